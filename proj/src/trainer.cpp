#include <cmath>
#include <fstream>
#include <sstream>

#include "mhaff/ops.hpp"
#include "mhaff/tape.hpp"
#include "mhaff/train.hpp"

namespace mhaff {

namespace {

enum Stream : std::uint64_t { kShuffle = 11, kAugment, kDropout, kModel };

std::vector<Tensor> parameter_list(Model& model) {
  std::vector<Tensor> params;
  model.visit([&](const std::string&, Tensor& t) { params.push_back(t); });
  return params;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

Adam::Adam(const AdamConfig& config, std::vector<Tensor> params) : config_(config), params_(std::move(params)) {
  for (const Tensor& p : params_) {
    m_.push_back(Tensor::zeros(p.shape()));
    v_.push_back(Tensor::zeros(p.shape()));
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto m = m_[i].data();
    auto v = v_[i].data();
    auto w = p.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = config_.beta1 * m[k] + (1.0 - config_.beta1) * g[k];
      v[k] = config_.beta2 * v[k] + (1.0 - config_.beta2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.eps);
    }
  }
}

double PlateauScheduler::step(double val_loss, double lr) {
  if (val_loss < best - threshold) {
    best = val_loss;
    bad_epochs = 0;
    return lr;
  }
  if (++bad_epochs >= patience) {
    bad_epochs = 0;
    return lr * factor;
  }
  return lr;
}

bool EarlyStopping::step(double val_loss) {
  if (val_loss < best - threshold) {
    best = val_loss;
    bad_epochs = 0;
    return false;
  }
  return ++bad_epochs >= patience;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_acc,lr\n";
  for (const EpochMetrics& m : history) {
    out << m.epoch << ',' << format_double(m.train_loss) << ',' << format_double(m.val_loss) << ','
        << format_double(m.val_accuracy) << ',' << format_double(m.lr) << '\n';
  }
}

std::vector<EpochMetrics> read_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "epoch,train_loss,val_loss,val_acc,lr") throw IoError(path.string() + ": unexpected history header");
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EpochMetrics m;
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    row >> m.epoch >> c1 >> m.train_loss >> c2 >> m.val_loss >> c3 >> m.val_accuracy >> c4 >> m.lr;
    if (!row || c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',') throw IoError(path.string() + ": bad row '" + line + "'");
    out.push_back(m);
  }
  return out;
}

Trainer::Trainer(TrainConfig config) : Trainer(config, Dataset::open(config.data, config.split, config.seed)) {}

Trainer::Trainer(TrainConfig config, Dataset dataset) : config_(std::move(config)), dataset_(std::move(dataset)) {
  config_.model.classes = dataset_.index.classes();
  config_.validate();
  if (dataset_.index.count(Split::train) == 0) throw ConfigError("dataset has no training records");
  model_ = Model(config_.model, derive_seed(config_.seed, {kModel}));
  adam_ = Adam(config_.adam, parameter_list(model_));
  state_.lr = config_.learning_rate;
  state_.scheduler = {config_.lr_factor, config_.lr_patience, config_.improvement_threshold};
  state_.early_stop = {config_.early_stop_patience, config_.improvement_threshold};
  view_cache_.resize(dataset_.images.size());
}

std::pair<Tensor, Tensor> Trainer::views(std::size_t record, std::size_t epoch, bool augment) {
  const ImageBuffer& image = dataset_.images.at(record);
  if (augment) {
    const ImageBuffer aug = mhaff::augment(image, config_.augmentation, derive_seed(config_.seed, {kAugment, epoch, record}));
    return {preprocess_cnn(aug, config_.preprocess), preprocess_vit(aug, config_.preprocess)};
  }
  auto& slot = view_cache_.at(record);
  if (!slot) slot.emplace(preprocess_cnn(image, config_.preprocess), preprocess_vit(image, config_.preprocess));
  return *slot;
}

Tensor Trainer::batch_probabilities(std::span<const std::size_t> records, bool train, std::size_t epoch, bool augment,
                                    Rng& dropout_rng) {
  std::vector<Tensor> rows;
  rows.reserve(records.size());
  const std::size_t classes = config_.model.classes;
  for (std::size_t r : records) {
    const auto [cnn_view, vit_view] = views(r, epoch, augment);
    rows.push_back(ops::reshape(model_.logits(cnn_view, vit_view, train, dropout_rng), {1, classes}));
  }
  return ops::softmax(ops::concat(rows, 0), 1);
}

double Trainer::step(std::span<const std::size_t> records, std::uint64_t stream, std::size_t epoch, bool augment) {
  if (records.empty()) throw UsageError("empty training batch");
  Rng dropout_rng(derive_seed(config_.seed, {kDropout, epoch, stream}));
  std::vector<std::size_t> labels;
  for (std::size_t r : records) labels.push_back(dataset_.index.records.at(r).label);

  Tape tape;
  const Tensor probs = batch_probabilities(records, true, epoch, augment, dropout_rng);
  const Tensor loss = ops::cross_entropy_loss(probs, labels);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(stream) +
                        " (lr " + format_double(state_.lr) + ")");
  }
  model_.zero_grad();
  tape.backward(loss);
  adam_.step(state_.lr);
  return value;
}

double Trainer::train_epoch(std::size_t epoch) {
  std::vector<std::size_t> order = dataset_.index.indices(Split::train);
  Rng rng(derive_seed(config_.seed, {kShuffle, epoch}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  double total = 0.0;
  std::size_t batch = 0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size, ++batch) {
    const std::size_t n = std::min(config_.batch_size, order.size() - start);
    const std::span<const std::size_t> records(order.data() + start, n);
    total += step(records, batch, epoch, config_.augment) * static_cast<double>(n);
  }
  return total / static_cast<double>(order.size());
}

EvalResult Trainer::evaluate_records(std::span<const std::size_t> records) {
  if (records.empty()) throw EvaluationError("cannot evaluate an empty split");
  NoGradGuard no_grad;
  Rng unused(0);
  EvalResult out;
  const Tensor probs = batch_probabilities(records, false, 0, false, unused);
  for (std::size_t r : records) out.labels.push_back(dataset_.index.records.at(r).label);
  out.loss = ops::cross_entropy_loss(probs, out.labels).item();
  const std::size_t classes = probs.dim(1);
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.predictions.push_back(argmax(probs.data().subspan(i * classes, classes)));
  }
  out.accuracy = accuracy(out.predictions, out.labels);
  return out;
}

EvalResult Trainer::evaluate(Split split) {
  const std::vector<std::size_t> records = dataset_.index.indices(split);
  if (records.empty()) throw EvaluationError(std::string("split '") + to_string(split) + "' is empty");
  return evaluate_records(records);
}

TrainReport Trainer::run(const std::optional<std::filesystem::path>& out_dir) {
  if (out_dir) std::filesystem::create_directories(*out_dir);
  TrainReport report;
  for (std::size_t epoch = state_.epoch + 1; epoch <= config_.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.lr = state_.lr;
    m.train_loss = train_epoch(epoch);
    const EvalResult val = evaluate(Split::val);
    m.val_loss = val_loss_hook ? val_loss_hook(epoch, val.loss) : val.loss;
    m.val_accuracy = val.accuracy;
    state_.history.push_back(m);
    state_.epoch = epoch;

    if (m.val_loss < state_.best_val_loss) {
      state_.best_val_loss = m.val_loss;
      report.best_epoch = epoch;
      report.best_val_accuracy = m.val_accuracy;
      if (out_dir) {
        report.checkpoint = *out_dir / "best.ckpt";
        save_checkpoint(*report.checkpoint, model_, config_, state_, &adam_);
      }
    }
    state_.lr = state_.scheduler.step(m.val_loss, state_.lr);
    const bool stop = state_.early_stop.step(m.val_loss);
    if (on_epoch) on_epoch(m);
    if (out_dir) write_history_csv(*out_dir / "history.csv", state_.history);
    if (stop) {
      report.stopped_early = true;
      break;
    }
  }
  report.history = state_.history;
  report.best_val_loss = state_.best_val_loss;
  report.final_lr = state_.lr;
  return report;
}

EvalResult evaluate_checkpoint(const std::filesystem::path& path, Split split,
                               const std::optional<std::string>& data_override) {
  Checkpoint ckpt = load_checkpoint(path);
  TrainConfig cfg = ckpt.config;
  if (data_override) cfg.data = *data_override;
  Trainer trainer(cfg);
  if (trainer.config().model.classes != ckpt.config.model.classes) {
    throw EvaluationError("dataset has " + std::to_string(trainer.config().model.classes) +
                          " classes but the checkpoint was trained on " +
                          std::to_string(ckpt.config.model.classes));
  }
  auto dst = trainer.model().named_parameters();
  auto src = ckpt.model.named_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.data().begin());
  }
  return trainer.evaluate(split);
}

}  // namespace mhaff
