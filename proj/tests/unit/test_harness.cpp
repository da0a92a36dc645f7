#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <nlohmann/json.hpp>

#include "mhaff/ops.hpp"
#include "mhaff/tape.hpp"
#include "mhaff/train.hpp"
#include "temp_dir.hpp"

using namespace mhaff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.data = "synth://C=3,n=10,size=32,seed=4";
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.learning_rate = 1e-3;
  cfg.seed = 9;
  return cfg;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct CheckpointParts {
  json header;
  std::vector<std::uint8_t> blob;
};

CheckpointParts split_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[12 + i]) << (8 * i);
  CheckpointParts parts;
  parts.header = json::parse(bytes.begin() + 20, bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len));
  parts.blob.assign(bytes.begin() + 20 + static_cast<std::ptrdiff_t>(len), bytes.end());
  return parts;
}

std::vector<std::uint8_t> join_checkpoint(const std::string& header, const std::vector<std::uint8_t>& blob,
                                          std::uint32_t version = kCheckpointVersion) {
  std::vector<std::uint8_t> out{'M', 'H', 'A', 'F', 'F', 'C', 'K', 'P'};
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(version >> (8 * i)));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(header.size()) >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

CheckpointFault load_fault(const fs::path& p) {
  try {
    load_checkpoint(p);
  } catch (const CheckpointError& e) {
    return e.fault();
  }
  ADD_FAILURE() << "checkpoint loaded without error";
  return CheckpointFault::bad_magic;
}

class CheckpointFaults : public ::testing::Test {
 protected:
  void SetUp() override {
    Trainer trainer(tiny_config());
    original = dir.path() / "good.ckpt";
    save_checkpoint(original, trainer.model(), trainer.config(), trainer.state(), &trainer.optimizer());
    bytes = read_bytes(original);
    parts = split_checkpoint(bytes);
  }

  CheckpointFault fault_of(const std::vector<std::uint8_t>& data) {
    const fs::path p = dir.path() / "bad.ckpt";
    write_bytes(p, data);
    return load_fault(p);
  }
  CheckpointFault fault_of(const json& header) { return fault_of(join_checkpoint(header.dump(), parts.blob)); }

  TempDir dir{"mhaff_ckpt"};
  fs::path original;
  std::vector<std::uint8_t> bytes;
  CheckpointParts parts;
};

}  // namespace

TEST(Config, JsonRoundTrip) {
  TrainConfig cfg = tiny_config();
  cfg.model.wiring = QkvWiring::parse("YXX");
  cfg.model.fusion_residual = true;
  cfg.augmentation.blur_kernels = {1, 3};
  cfg.preprocess.mean = {0.1, 0.2, 0.3};
  const TrainConfig back = config_from_json(config_to_json(cfg));
  EXPECT_EQ(config_to_json(back), config_to_json(cfg));
  EXPECT_EQ(back.model.wiring.name(), "YXX");
  EXPECT_EQ(back.data, cfg.data);
  EXPECT_DOUBLE_EQ(back.preprocess.mean[2], 0.3);
}

TEST(Config, MissingKeysKeepDefaults) {
  const TrainConfig cfg = config_from_json(R"({"epochs": 3, "model": {"fusion": "concat"}})");
  EXPECT_EQ(cfg.epochs, 3u);
  EXPECT_EQ(cfg.model.fusion, FusionMethod::concatenation);
  EXPECT_DOUBLE_EQ(cfg.learning_rate, 1e-5);
  EXPECT_DOUBLE_EQ(cfg.lr_factor, 0.1);
  EXPECT_EQ(cfg.lr_patience, 5u);
  EXPECT_EQ(cfg.early_stop_patience, 20u);
  EXPECT_DOUBLE_EQ(cfg.model.dropout, 0.3);
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(config_from_json(R"({"epoch": 3})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"model": {"vit": {"depth": 2}}})"), ConfigError);
  EXPECT_THROW(config_from_json("{"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"model": {"dropout": 1.0}})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"epochs": 0})"), ConfigError);
  EXPECT_THROW(config_from_json(R"({"preprocess": {"cnn_crop": 30, "cnn_resize": 36}})"), ConfigError);
}

TEST(Adam, MatchesScalarOracle) {
  Tensor w = Tensor({1}, 1.0).set_requires_grad();
  Adam adam({}, {w});
  double m = 0, v = 0, expected = 1.0;
  for (int t = 1; t <= 3; ++t) {
    // d/dw of 0.5 w^2 + 0.25 w is w + 0.25
    const double g = expected + 0.25;
    {
      Tape tape;
      const Tensor loss = ops::add(ops::scale(ops::sum(ops::mul(w, w)), 0.5), ops::scale(ops::sum(w), 0.25));
      w.zero_grad();
      tape.backward(loss);
    }
    adam.step(0.1);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1 - std::pow(0.9, t)), vhat = v / (1 - std::pow(0.999, t));
    expected -= 0.1 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_NEAR(w[0], expected, 1e-15) << "step " << t;
  }
  EXPECT_EQ(adam.steps(), 3u);
}

TEST(Adam, SkipsParametersWithoutGradient) {
  Tensor a = Tensor({2}, 1.0).set_requires_grad();
  Adam adam({}, {a});
  adam.step(0.1);
  EXPECT_EQ(a[0], 1.0);
  EXPECT_EQ(a[1], 1.0);
}

TEST(Scheduler, ImprovingKeepsLr) {
  PlateauScheduler s;
  double lr = 1e-5;
  for (int e = 0; e < 30; ++e) lr = s.step(1.0 - 0.01 * e, lr);
  EXPECT_EQ(lr, 1e-5);
}

TEST(Scheduler, FourFlatEpochsThenImproveKeepsLr) {
  PlateauScheduler s;
  double lr = s.step(1.0, 1e-5);
  for (int e = 0; e < 4; ++e) lr = s.step(1.0, lr);
  EXPECT_EQ(lr, 1e-5);
  lr = s.step(0.5, lr);
  EXPECT_EQ(lr, 1e-5);
  EXPECT_EQ(s.bad_epochs, 0u);
}

TEST(Scheduler, FiveFlatEpochsReduceTenfold) {
  PlateauScheduler s;
  double lr = s.step(1.0, 1e-5);
  for (int e = 0; e < 4; ++e) lr = s.step(1.0, lr);
  lr = s.step(1.0, lr);
  EXPECT_DOUBLE_EQ(lr, 1e-6);
  EXPECT_EQ(s.bad_epochs, 0u);
}

TEST(Scheduler, TwoTriggersGiveOneHundredth) {
  PlateauScheduler s;
  double lr = s.step(1.0, 1e-5);
  for (int e = 0; e < 10; ++e) lr = s.step(1.0, lr);
  EXPECT_DOUBLE_EQ(lr, 1e-5 * 0.01);
}

TEST(Scheduler, ImprovementSmallerThanThresholdIsFlat) {
  PlateauScheduler s;
  double lr = s.step(1.0, 1e-5);
  for (int e = 0; e < 5; ++e) lr = s.step(1.0 - 5e-9, lr);
  EXPECT_DOUBLE_EQ(lr, 1e-6);
}

TEST(EarlyStop, NineteenFlatContinuesTwentyStops) {
  EarlyStopping stop;
  EXPECT_FALSE(stop.step(1.0));
  for (int e = 0; e < 19; ++e) EXPECT_FALSE(stop.step(1.0)) << "flat epoch " << e + 1;
  EXPECT_TRUE(stop.step(1.0));
}

TEST(EarlyStop, ImprovementResetsCounter) {
  EarlyStopping stop;
  stop.step(1.0);
  for (int e = 0; e < 9; ++e) stop.step(1.0);
  EXPECT_FALSE(stop.step(0.9));
  for (int e = 0; e < 19; ++e) EXPECT_FALSE(stop.step(0.9));
  EXPECT_TRUE(stop.step(0.9));
}

TEST(EarlyStop, IndependentOfScheduler) {
  PlateauScheduler sched;
  EarlyStopping stop;
  double lr = 1e-5;
  std::size_t reductions = 0;
  for (int e = 1; e <= 20; ++e) {
    const double next = sched.step(1.0, lr);
    reductions += next < lr;
    lr = next;
    EXPECT_FALSE(stop.step(1.0)) << "epoch " << e;
  }
  // First epoch sets the best; 19 flat epochs follow.
  EXPECT_EQ(reductions, 3u);
  EXPECT_EQ(stop.bad_epochs, 19u);
}

TEST(Accuracy, EightOfTen) {
  const std::vector<std::size_t> pred{0, 1, 2, 3, 4, 5, 6, 7, 0, 0};
  const std::vector<std::size_t> labels{0, 1, 2, 3, 4, 5, 6, 7, 1, 1};
  EXPECT_EQ(accuracy(pred, labels), 0.8);
}

TEST(Accuracy, EmptyAndMismatchedThrow) {
  EXPECT_THROW(accuracy({}, {}), EvaluationError);
  const std::vector<std::size_t> a{1, 2}, b{1};
  EXPECT_THROW(accuracy(a, b), Error);
}

TEST(Argmax, TiesGoToLowestIndex) {
  const std::vector<double> row{0.2, 0.4, 0.4, 0.0};
  EXPECT_EQ(argmax(row), 1u);
  const std::vector<double> flat{0.25, 0.25, 0.25, 0.25};
  EXPECT_EQ(argmax(flat), 0u);
}

TEST(History, CsvRoundTripIsExact) {
  TempDir dir{"mhaff_hist"};
  const std::vector<EpochMetrics> rows{{1, 2.0794415416798357, 2.01, 0.125, 1e-5},
                                       {2, 1.0 / 3.0, std::nextafter(1.0, 2.0), 0.875, 1e-6}};
  write_history_csv(dir.path() / "h.csv", rows);
  EXPECT_EQ(read_history_csv(dir.path() / "h.csv"), rows);
}

TEST(Trainer, HarnessLossEqualsCrossEntropyOfClassify) {
  TrainConfig cfg = tiny_config();
  cfg.augment = false;
  cfg.model.dropout = 0.0;
  Trainer trainer(cfg);
  const std::vector<std::size_t> records = trainer.dataset().index.indices(Split::val);

  std::vector<std::size_t> labels;
  std::vector<Tensor> rows;
  {
    NoGradGuard guard;
    Rng unused(0);
    for (std::size_t r : records) {
      const ImageBuffer& img = trainer.dataset().images[r];
      const Tensor logits = trainer.model().logits(preprocess_cnn(img, cfg.preprocess), preprocess_vit(img, cfg.preprocess),
                                                   false, unused);
      rows.push_back(ops::reshape(logits, {1, logits.numel()}));
      labels.push_back(trainer.dataset().index.records[r].label);
    }
  }
  const double expected = ops::cross_entropy_loss(ops::softmax(ops::concat(rows, 0), 1), labels).item();
  EXPECT_EQ(trainer.evaluate(Split::val).loss, expected);
}

TEST(Trainer, DeterministicHistories) {
  const TrainReport a = Trainer(tiny_config()).run();
  const TrainReport b = Trainer(tiny_config()).run();
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history, b.history);
}

TEST(Trainer, DifferentSeedsDiffer) {
  TrainConfig other = tiny_config();
  other.seed = 10;
  EXPECT_NE(Trainer(tiny_config()).run().history, Trainer(other).run().history);
}

TEST(Trainer, LrSequenceIsNonIncreasingPowersOfFactor) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 9;
  cfg.lr_patience = 2;
  Trainer trainer(cfg);
  trainer.val_loss_hook = [](std::size_t epoch, double) { return epoch <= 1 ? 1.0 : 2.0; };
  const TrainReport report = trainer.run();
  double prev = cfg.learning_rate;
  for (const EpochMetrics& m : report.history) {
    EXPECT_LE(m.lr, prev);
    const double k = std::log10(cfg.learning_rate / m.lr);
    EXPECT_NEAR(k, std::round(k), 1e-9);
    prev = m.lr;
  }
  EXPECT_NEAR(report.final_lr, 1e-7, 1e-20);
}

TEST(Trainer, RunWritesBestCheckpointAndHistory) {
  TempDir dir{"mhaff_run"};
  TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  Trainer trainer(cfg);
  const TrainReport report = trainer.run(dir.path());
  ASSERT_TRUE(report.checkpoint);
  EXPECT_TRUE(fs::exists(dir.path() / "best.ckpt"));
  EXPECT_EQ(read_history_csv(dir.path() / "history.csv"), report.history);

  double min_loss = std::numeric_limits<double>::infinity();
  for (const EpochMetrics& m : report.history) min_loss = std::min(min_loss, m.val_loss);
  EXPECT_EQ(report.best_val_loss, min_loss);
  const Checkpoint ckpt = load_checkpoint(*report.checkpoint);
  EXPECT_EQ(ckpt.state.best_val_loss, min_loss);
  EXPECT_EQ(ckpt.state.epoch, report.best_epoch);
}

TEST(Trainer, EmptyValidationSplitIsEvaluationError) {
  TrainConfig cfg = tiny_config();
  cfg.split = {1.0, 0.0, 0.0};
  Trainer trainer(cfg);
  EXPECT_THROW(trainer.evaluate(Split::val), EvaluationError);
}

TEST(Trainer, NonFiniteLossIsTrainingError) {
  TrainConfig cfg = tiny_config();
  Trainer trainer(cfg);
  trainer.model().visit([](const std::string& name, Tensor& t) {
    if (name.rfind("classifier.", 0) == 0) t[0] = std::numeric_limits<double>::quiet_NaN();
  });
  try {
    trainer.train_epoch(1);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
  }
}

TEST(Trainer, UnresolvableDatasetIsConfigOrIndexingError) {
  TrainConfig cfg = tiny_config();
  cfg.data = "/nonexistent/mhaff/data";
  EXPECT_THROW(Trainer{cfg}, Error);
  cfg.data = "synth://C=1,n=3";
  EXPECT_THROW(Trainer{cfg}, ConfigError);
}

TEST(Checkpoint, RoundTripForwardIsBitwise) {
  TempDir dir{"mhaff_ckpt"};
  Trainer trainer(tiny_config());
  trainer.train_epoch(1);
  save_checkpoint(dir.path() / "m.ckpt", trainer.model(), trainer.config(), trainer.state(), &trainer.optimizer());
  Checkpoint ckpt = load_checkpoint(dir.path() / "m.ckpt");

  const ImageBuffer& img = trainer.dataset().images[0];
  const PreprocessConfig& pre = trainer.config().preprocess;
  Rng r1(0), r2(0);
  const Tensor a = trainer.model().logits(preprocess_cnn(img, pre), preprocess_vit(img, pre), false, r1);
  const Tensor b = ckpt.model.logits(preprocess_cnn(img, pre), preprocess_vit(img, pre), false, r2);
  ASSERT_EQ(a.numel(), b.numel());
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), 8 * a.numel()), 0);

  auto params = trainer.model().named_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& m = ckpt.optimizer.at("m." + params[i].first);
    EXPECT_EQ(std::memcmp(m.data().data(), trainer.optimizer().first_moments()[i].data().data(), 8 * m.numel()), 0);
  }
  EXPECT_EQ(ckpt.optimizer_steps, trainer.optimizer().steps());
  EXPECT_EQ(config_to_json(ckpt.config), config_to_json(trainer.config()));
}

TEST_F(CheckpointFaults, IntactFileLoads) { EXPECT_NO_THROW(load_checkpoint(original)); }

TEST_F(CheckpointFaults, BadMagic) {
  auto data = bytes;
  data[0] = 'X';
  EXPECT_EQ(fault_of(data), CheckpointFault::bad_magic);
}

TEST_F(CheckpointFaults, VersionMismatchExplains) {
  const fs::path p = dir.path() / "v2.ckpt";
  write_bytes(p, join_checkpoint(parts.header.dump(), parts.blob, kCheckpointVersion + 1));
  try {
    load_checkpoint(p);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_EQ(e.fault(), CheckpointFault::version_mismatch);
    EXPECT_NE(std::string(e.what()).find("expected 1"), std::string::npos);
  }
}

TEST_F(CheckpointFaults, Truncation) {
  EXPECT_EQ(fault_of(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 5)), CheckpointFault::truncated);
  EXPECT_EQ(fault_of(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 15)), CheckpointFault::truncated);
  EXPECT_EQ(fault_of(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 40)), CheckpointFault::truncated);
  EXPECT_EQ(fault_of(std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1)), CheckpointFault::truncated);
}

TEST_F(CheckpointFaults, OffsetOutOfBoundsOrMisaligned) {
  json h = parts.header;
  h["tensors"][0]["offset"] = h["blob_bytes"];
  EXPECT_EQ(fault_of(h), CheckpointFault::manifest_overflow);
  h = parts.header;
  h["tensors"][1]["offset"] = 4;
  EXPECT_EQ(fault_of(h), CheckpointFault::manifest_overflow);
}

TEST_F(CheckpointFaults, OverlappingOffsets) {
  json h = parts.header;
  h["tensors"][1]["offset"] = h["tensors"][0]["offset"];
  EXPECT_EQ(fault_of(h), CheckpointFault::manifest_overlap);
}

TEST_F(CheckpointFaults, MalformedHeader) {
  EXPECT_EQ(fault_of(join_checkpoint("{not json", parts.blob)), CheckpointFault::malformed_header);
  json h = parts.header;
  h.erase("state");
  EXPECT_EQ(fault_of(h), CheckpointFault::malformed_header);
  h = parts.header;
  h["config"]["model"]["dropout"] = 2.0;
  EXPECT_EQ(fault_of(h), CheckpointFault::malformed_header);
}

TEST_F(CheckpointFaults, MissingTensor) {
  json h = parts.header;
  h["tensors"].erase(0);
  EXPECT_EQ(fault_of(h), CheckpointFault::missing_tensor);
}

TEST_F(CheckpointFaults, ShapeMismatch) {
  json h = parts.header;
  const auto shape = h["tensors"][0]["shape"].get<Shape>();
  h["tensors"][0]["shape"] = Shape{shape_numel(shape)};
  ASSERT_NE(shape.size(), 1u);
  EXPECT_EQ(fault_of(h), CheckpointFault::shape_mismatch);
}

TEST_F(CheckpointFaults, EveryPrefixFailsCleanly) {
  for (std::size_t n = 0; n < bytes.size(); n += 997) {
    const fs::path p = dir.path() / "prefix.ckpt";
    write_bytes(p, std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n)));
    EXPECT_THROW(load_checkpoint(p), CheckpointError) << "prefix " << n;
  }
}

TEST(Experiments, AblationHasSixRowsInOrder) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  const auto rows = ablate_qkv(cfg, std::nullopt);
  ASSERT_EQ(rows.size(), 6u);
  const char* names[] = {"XYY", "YXY", "YYX", "YXX", "XXY", "XYX"};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(rows[i].name, names[i]);
    EXPECT_FALSE(rows[i].failed) << rows[i].error;
  }
}

TEST(Experiments, ComparisonHasFiveRowsAndMarksFailures) {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  const auto rows = compare_fusions(cfg, std::nullopt);
  ASSERT_EQ(rows.size(), 5u);
  for (const ArmResult& r : rows) EXPECT_FALSE(r.failed) << r.name << ": " << r.error;

  std::vector<ArmResult> with_failure = rows;
  with_failure[0].failed = true;
  with_failure[0].error = "training: boom";
  const std::string table = format_table(with_failure);
  EXPECT_NE(table.find("FAILED"), std::string::npos);
  EXPECT_GT(table.find("FAILED"), table.find(rows[4].name));
  const json j = json::parse(results_to_json(with_failure));
  ASSERT_EQ(j.size(), 5u);
  EXPECT_TRUE(j[0]["failed"].get<bool>());
}

TEST(Experiments, TableSortsByAccuracyDescending) {
  std::vector<ArmResult> rows(3);
  rows[0].name = "low";
  rows[0].val_accuracy = 0.2;
  rows[1].name = "high";
  rows[1].val_accuracy = 0.9;
  rows[2].name = "mid";
  rows[2].val_accuracy = 0.5;
  const std::string t = format_table(rows);
  EXPECT_LT(t.find("high"), t.find("mid"));
  EXPECT_LT(t.find("mid"), t.find("low"));
}

TEST(Experiments, LinearProbeReturnsAccuracy) {
  TrainConfig cfg = tiny_config();
  const Dataset ds = Dataset::open(cfg.data, cfg.split, cfg.seed);
  const double acc = linear_probe(cfg, ds, 20, 1e-2);
  EXPECT_GE(acc, 0.0);
  EXPECT_LE(acc, 1.0);
}
