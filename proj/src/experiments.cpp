#include <algorithm>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mhaff/init.hpp"
#include "mhaff/ops.hpp"
#include "mhaff/tape.hpp"
#include "mhaff/train.hpp"

namespace mhaff {

namespace {

ArmResult run_arm(const TrainConfig& cfg, const Dataset& dataset, const std::string& name,
                  const std::optional<std::filesystem::path>& out_dir) {
  ArmResult arm;
  arm.name = name;
  arm.seed = cfg.seed;
  try {
    Trainer trainer(cfg, dataset);
    std::optional<std::filesystem::path> dir;
    if (out_dir) dir = *out_dir / name;
    const TrainReport report = trainer.run(dir);
    arm.val_accuracy = report.best_val_accuracy;
    arm.val_loss = report.best_val_loss;
    arm.best_epoch = report.best_epoch;
    arm.epochs_run = report.history.size();
    arm.history = report.history;
  } catch (const Error& e) {
    arm.failed = true;
    arm.error = std::string(to_string(e.kind())) + ": " + e.what();
  }
  return arm;
}

}  // namespace

std::vector<ArmResult> ablate_qkv(const TrainConfig& base, const std::optional<std::filesystem::path>& out_dir) {
  const Dataset dataset = Dataset::open(base.data, base.split, base.seed);
  std::vector<ArmResult> rows;
  for (const QkvWiring& wiring : QkvWiring::ablation_rows()) {
    TrainConfig cfg = base;
    cfg.model.fusion = FusionMethod::mhaff;
    cfg.model.wiring = wiring;
    rows.push_back(run_arm(cfg, dataset, wiring.name(), out_dir));
  }
  return rows;
}

std::vector<ArmResult> compare_fusions(const TrainConfig& base, const std::optional<std::filesystem::path>& out_dir) {
  const Dataset dataset = Dataset::open(base.data, base.split, base.seed);
  std::vector<ArmResult> rows;
  for (FusionMethod method : all_fusion_methods()) {
    TrainConfig cfg = base;
    cfg.model.fusion = method;
    rows.push_back(run_arm(cfg, dataset, to_string(method), out_dir));
  }
  return rows;
}

std::vector<ArmResult> mean_over_seeds(const std::vector<std::vector<ArmResult>>& runs) {
  if (runs.empty()) return {};
  std::vector<ArmResult> out;
  for (const ArmResult& first : runs.front()) {
    ArmResult mean;
    mean.name = first.name;
    std::size_t n = 0;
    for (const auto& run : runs) {
      const auto it = std::find_if(run.begin(), run.end(), [&](const ArmResult& r) { return r.name == first.name; });
      if (it == run.end() || it->failed) {
        mean.failed = true;
        mean.error = it == run.end() ? "missing from a run" : it->error;
        break;
      }
      mean.val_accuracy += it->val_accuracy;
      mean.val_loss += it->val_loss;
      mean.epochs_run += it->epochs_run;
      ++n;
    }
    if (!mean.failed) {
      mean.val_accuracy /= static_cast<double>(n);
      mean.val_loss /= static_cast<double>(n);
      mean.epochs_run /= n;
    }
    out.push_back(mean);
  }
  return out;
}

std::string format_table(const std::vector<ArmResult>& rows) {
  std::vector<const ArmResult*> sorted;
  for (const ArmResult& r : rows) sorted.push_back(&r);
  std::stable_sort(sorted.begin(), sorted.end(), [](const ArmResult* a, const ArmResult* b) {
    if (a->failed != b->failed) return !a->failed;
    return a->val_accuracy > b->val_accuracy;
  });
  std::size_t name_w = 6;
  for (const ArmResult* r : sorted) name_w = std::max(name_w, r->name.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_w)) << "arm" << "  " << std::right << std::setw(8) << "val_acc"
     << "  " << std::setw(10) << "val_loss" << "  " << std::setw(10) << "best_epoch" << "  " << std::setw(6)
     << "epochs" << '\n';
  for (const ArmResult* r : sorted) {
    os << std::left << std::setw(static_cast<int>(name_w)) << r->name << "  " << std::right;
    if (r->failed) {
      os << "FAILED  " << r->error << '\n';
      continue;
    }
    os << std::fixed << std::setprecision(4) << std::setw(8) << r->val_accuracy << "  " << std::setw(10)
       << r->val_loss << "  " << std::setw(10) << r->best_epoch << "  " << std::setw(6) << r->epochs_run << '\n';
  }
  return os.str();
}

std::string results_to_json(const std::vector<ArmResult>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const ArmResult& r : rows) {
    nlohmann::json j{{"arm", r.name}, {"seed", r.seed}, {"failed", r.failed}};
    if (r.failed) {
      j["error"] = r.error;
    } else {
      j["val_accuracy"] = r.val_accuracy;
      j["val_loss"] = r.val_loss;
      j["best_epoch"] = r.best_epoch;
      j["epochs_run"] = r.epochs_run;
    }
    out.push_back(j);
  }
  return out.dump(2);
}

double linear_probe(const TrainConfig& config, const Dataset& dataset, std::size_t epochs, double lr) {
  auto design = [&](Split split, std::vector<std::size_t>& labels) {
    const std::vector<std::size_t> idx = dataset.index.indices(split);
    if (idx.empty()) throw EvaluationError(std::string("linear probe: split '") + to_string(split) + "' is empty");
    std::vector<Tensor> rows;
    for (std::size_t r : idx) {
      const Tensor v = preprocess_vit(dataset.images[r], config.preprocess);
      rows.push_back(ops::reshape(v, {1, v.numel()}));
      labels.push_back(dataset.index.records[r].label);
    }
    return ops::concat(rows, 0);
  };
  std::vector<std::size_t> train_labels, val_labels;
  const Tensor x_train = design(Split::train, train_labels);
  const Tensor x_val = design(Split::val, val_labels);
  const std::size_t features = x_train.dim(1), classes = dataset.index.classes();

  Rng rng(derive_seed(config.seed, {0x6c696e}));
  Tensor w = glorot_uniform({features, classes}, features, classes, rng).set_requires_grad();
  Tensor b = Tensor::zeros({classes}).set_requires_grad();
  Adam adam(config.adam, {w, b});
  for (std::size_t e = 0; e < epochs; ++e) {
    Tape tape;
    const Tensor loss =
        ops::cross_entropy_loss(ops::softmax(ops::add_bias(ops::matmul(x_train, w), b), 1), train_labels);
    w.zero_grad();
    b.zero_grad();
    tape.backward(loss);
    adam.step(lr);
  }
  NoGradGuard no_grad;
  const Tensor scores = ops::add_bias(ops::matmul(x_val, w), b);
  std::vector<std::size_t> predicted;
  for (std::size_t i = 0; i < val_labels.size(); ++i) predicted.push_back(argmax(scores.data().subspan(i * classes, classes)));
  return accuracy(predicted, val_labels);
}

}  // namespace mhaff
