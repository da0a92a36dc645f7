#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>

#include "mhaff/error.hpp"
#include "mhaff/gradcheck.hpp"
#include "mhaff/saliency.hpp"
#include "mhaff/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string wiring;
  std::string fusion;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--data", o.data, "dataset root or synth://C=..,n=..,size=..,seed=..");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--wiring", o.wiring, "QKV wiring, e.g. XYX");
  cmd->add_option("--fusion", o.fusion, "mhaff | add | concat | cnn-only | vit-only");
  cmd->add_option("--epochs", o.epochs, "override the epoch count");
  cmd->add_option("--lr", o.lr, "override the initial learning rate");
}

mhaff::TrainConfig resolve(const CommonOptions& o) {
  mhaff::TrainConfig cfg = o.config.empty() ? mhaff::TrainConfig{} : mhaff::load_config(o.config);
  if (!o.data.empty()) cfg.data = o.data;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.wiring.empty()) cfg.model.wiring = mhaff::QkvWiring::parse(o.wiring);
  if (!o.fusion.empty()) cfg.model.fusion = mhaff::parse_fusion_method(o.fusion);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.lr) cfg.learning_rate = *o.lr;
  cfg.validate();
  return cfg;
}

std::optional<fs::path> out_dir(const CommonOptions& o) {
  if (o.out.empty()) return std::nullopt;
  fs::create_directories(o.out);
  return fs::path(o.out);
}

void write_summary(const std::optional<fs::path>& dir, const std::string& name, const json& summary) {
  if (!dir) return;
  std::ofstream f(*dir / name);
  if (!f) throw mhaff::IoError("cannot write " + (*dir / name).string());
  f << summary.dump(2) << '\n';
}

std::string history_table(const std::vector<mhaff::EpochMetrics>& history) {
  std::ostringstream os;
  os << std::setw(5) << "epoch" << std::setw(12) << "train_loss" << std::setw(12) << "val_loss" << std::setw(9)
     << "val_acc" << std::setw(10) << "lr" << '\n';
  for (const auto& m : history) {
    os << std::setw(5) << m.epoch << std::fixed << std::setprecision(5) << std::setw(12) << m.train_loss
       << std::setw(12) << m.val_loss << std::setprecision(4) << std::setw(9) << m.val_accuracy << std::scientific
       << std::setprecision(1) << std::setw(10) << m.lr << std::defaultfloat << '\n';
  }
  return os.str();
}

json arms_json(const std::vector<mhaff::ArmResult>& rows) { return json::parse(mhaff::results_to_json(rows)); }

int cmd_train(const CommonOptions& o) {
  const mhaff::TrainConfig cfg = resolve(o);
  const auto dir = out_dir(o);
  mhaff::Trainer trainer(cfg);
  for (const std::string& w : trainer.dataset().index.warnings) std::cerr << "warning: " << w << '\n';
  trainer.on_epoch = [](const mhaff::EpochMetrics& m) {
    std::cerr << "epoch " << m.epoch << " train_loss " << m.train_loss << " val_loss " << m.val_loss << " val_acc "
              << m.val_accuracy << '\n';
  };
  const mhaff::TrainReport report = trainer.run(dir);
  std::cout << history_table(report.history);
  json summary{{"best_epoch", report.best_epoch},
               {"best_val_loss", report.best_val_loss},
               {"best_val_accuracy", report.best_val_accuracy},
               {"epochs_run", report.history.size()},
               {"stopped_early", report.stopped_early},
               {"final_lr", report.final_lr},
               {"checkpoint", report.checkpoint ? report.checkpoint->string() : ""}};
  std::cout << "best epoch " << report.best_epoch << ": val_loss " << report.best_val_loss << ", val_acc "
            << report.best_val_accuracy << '\n';
  write_summary(dir, "summary.json", summary);
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& data, const std::string& out) {
  mhaff::Split s = mhaff::Split::val;
  if (split == "train") s = mhaff::Split::train;
  else if (split == "test") s = mhaff::Split::test;
  else if (split != "val") throw mhaff::UsageError("split must be train, val or test");
  const mhaff::EvalResult r =
      mhaff::evaluate_checkpoint(checkpoint, s, data.empty() ? std::nullopt : std::optional<std::string>(data));
  std::cout << "split     " << split << "\nsamples   " << r.labels.size() << "\naccuracy  " << r.accuracy
            << "\nloss      " << r.loss << '\n';
  const json summary{{"split", split}, {"samples", r.labels.size()}, {"accuracy", r.accuracy}, {"loss", r.loss}};
  if (!out.empty()) {
    fs::create_directories(out);
    write_summary(fs::path(out), "eval.json", summary);
  }
  return 0;
}

int cmd_ablate(const CommonOptions& o) {
  const mhaff::TrainConfig cfg = resolve(o);
  const auto dir = out_dir(o);
  const auto rows = mhaff::ablate_qkv(cfg, dir);
  std::cout << mhaff::format_table(rows);
  write_summary(dir, "ablation.json", {{"seed", cfg.seed}, {"data", cfg.data}, {"rows", arms_json(rows)}});
  for (const auto& r : rows)
    if (r.failed) return 3;
  return 0;
}

int cmd_compare(const CommonOptions& o, std::vector<std::uint64_t> seeds) {
  mhaff::TrainConfig cfg = resolve(o);
  const auto dir = out_dir(o);
  if (seeds.empty()) seeds.push_back(cfg.seed);
  std::vector<std::vector<mhaff::ArmResult>> runs;
  json per_seed = json::array();
  for (std::uint64_t seed : seeds) {
    cfg.seed = seed;
    std::optional<fs::path> seed_dir;
    if (dir) seed_dir = *dir / ("seed_" + std::to_string(seed));
    runs.push_back(mhaff::compare_fusions(cfg, seed_dir));
    std::cout << "seed " << seed << '\n' << mhaff::format_table(runs.back()) << '\n';
    per_seed.push_back({{"seed", seed}, {"rows", arms_json(runs.back())}});
  }
  const auto mean = mhaff::mean_over_seeds(runs);
  if (seeds.size() > 1) std::cout << "mean over " << seeds.size() << " seeds\n" << mhaff::format_table(mean);
  write_summary(dir, "comparison.json", {{"data", cfg.data}, {"per_seed", per_seed}, {"mean", arms_json(mean)}});
  for (const auto& r : mean)
    if (r.failed) return 3;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  const auto cases = mhaff::run_gradcheck_suite(seed);
  std::size_t width = 4;
  for (const auto& c : cases) width = std::max(width, c.name.size());
  bool ok = true;
  json rows = json::array();
  for (const auto& c : cases) {
    ok = ok && c.result.passed;
    std::cout << std::left << std::setw(static_cast<int>(width)) << c.name << std::right << "  "
              << std::scientific << std::setprecision(2) << c.result.max_relative_error << "  "
              << (c.result.passed ? "ok" : "FAIL") << '\n';
    rows.push_back({{"name", c.name},
                    {"max_relative_error", c.result.max_relative_error},
                    {"coordinates", c.result.coordinates},
                    {"passed", c.result.passed}});
  }
  std::cout << std::defaultfloat << cases.size() << " cases, " << (ok ? "all passed" : "FAILURES") << '\n';
  if (!out.empty()) {
    fs::create_directories(out);
    write_summary(fs::path(out), "gradcheck.json", {{"seed", seed}, {"passed", ok}, {"cases", rows}});
  }
  return ok ? 0 : 3;
}

std::string image_stem(const std::string& source) {
  if (mhaff::SynthSpec::is_synth(source)) {
    std::string tail = source.substr(source.find('#') + 1);
    std::replace(tail.begin(), tail.end(), ':', '_');
    return "synth_" + tail;
  }
  return fs::path(source).stem().string();
}

int cmd_saliency(const std::string& checkpoint, const std::string& image, const std::string& cls,
                 const std::string& layer, const std::string& out) {
  const mhaff::LayerTag tag = mhaff::parse_layer_tag(layer);
  std::optional<std::size_t> target;
  if (cls != "pred") {
    std::size_t pos = 0;
    try {
      target = std::stoul(cls, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != cls.size()) throw mhaff::UsageError("--class must be an integer or 'pred'");
  }
  mhaff::Checkpoint ckpt = mhaff::load_checkpoint(checkpoint);
  const mhaff::ImageBuffer img = mhaff::load_image(image);
  const mhaff::Heatmap map = mhaff::grad_cam_image(ckpt.model, ckpt.config.preprocess, img, target, tag);
  const std::string stem = image_stem(image);
  mhaff::export_heatmap(map, img, out, stem);
  std::cout << "class " << map.target_class << ", layer " << mhaff::to_string(tag) << " -> "
            << (fs::path(out) / (stem + ".pgm")).string() << ", " << (fs::path(out) / (stem + "_overlay.ppm")).string()
            << '\n';
  return 0;
}

void error_line(const std::string& kind, const std::string& message) {
  std::cerr << json{{"kind", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-head attention feature fusion: training, evaluation and analysis"};
  app.require_subcommand(1);

  CommonOptions train_opts, ablate_opts, compare_opts;
  CLI::App* train = app.add_subcommand("train", "train one model");
  add_common(train, train_opts);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::string eval_ckpt, eval_split = "val", eval_data, eval_out;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", eval_split, "train | val | test");
  eval->add_option("--data", eval_data, "dataset override");
  eval->add_option("--out", eval_out, "directory for eval.json");

  CLI::App* ablate = app.add_subcommand("ablate-qkv", "train the six mixed QKV wirings");
  add_common(ablate, ablate_opts);

  CLI::App* compare = app.add_subcommand("compare-fusions", "train the five fusion arms");
  add_common(compare, compare_opts);
  std::vector<std::uint64_t> compare_seeds;
  compare->add_option("--seeds", compare_seeds, "seeds to average over (default: --seed)")->delimiter(',');

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::uint64_t gc_seed = 1;
  std::string gc_out;
  gradcheck->add_option("--seed", gc_seed, "seed for random shapes and values");
  gradcheck->add_option("--out", gc_out, "directory for gradcheck.json");

  CLI::App* saliency = app.add_subcommand("saliency", "Grad-CAM heatmap for one image");
  std::string sal_ckpt, sal_image, sal_class = "pred", sal_layer, sal_out;
  saliency->add_option("--checkpoint", sal_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  saliency->add_option("--image", sal_image, "image path or synth id")->required();
  saliency->add_option("--class", sal_class, "class index or 'pred'");
  saliency->add_option("--layer", sal_layer, "cnn-branch | vit-branch | fusion")->required();
  saliency->add_option("--out", sal_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    error_line("usage", e.what());
    return 2;
  }

  try {
    if (*train) return cmd_train(train_opts);
    if (*eval) return cmd_eval(eval_ckpt, eval_split, eval_data, eval_out);
    if (*ablate) return cmd_ablate(ablate_opts);
    if (*compare) return cmd_compare(compare_opts, compare_seeds);
    if (*gradcheck) return cmd_gradcheck(gc_seed, gc_out);
    if (*saliency) return cmd_saliency(sal_ckpt, sal_image, sal_class, sal_layer, sal_out);
  } catch (const mhaff::Error& e) {
    error_line(mhaff::to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("internal", e.what());
    return 1;
  }
  return 0;
}
