#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>

#include "mhaff/train.hpp"

namespace mhaff {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'H', 'A', 'F', 'F', 'C', 'K', 'P'};
constexpr std::size_t kPreamble = 8 + 4 + 8;

void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::vector<std::uint8_t>& in, std::size_t pos, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  return v;
}

// JSON has no infinity; an unset best is stored as null.
json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double from_nullable(const json& j) { return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>(); }

json history_json(const std::vector<EpochMetrics>& history) {
  json rows = json::array();
  for (const EpochMetrics& m : history) {
    rows.push_back({{"epoch", m.epoch},
                    {"train_loss", m.train_loss},
                    {"val_loss", m.val_loss},
                    {"val_acc", m.val_accuracy},
                    {"lr", m.lr}});
  }
  return rows;
}

[[noreturn]] void fault(CheckpointFault f, const std::filesystem::path& path, const std::string& why) {
  throw CheckpointError(f, path.string() + ": " + why);
}

struct Entry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Model& model, const TrainConfig& config,
                     const TrainState& state, Adam* adam) {
  std::vector<std::pair<std::string, Tensor>> tensors = model.named_parameters();
  if (adam) {
    const auto params = model.named_parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      tensors.emplace_back("optimizer.m." + params[i].first, adam->first_moments().at(i));
      tensors.emplace_back("optimizer.v." + params[i].first, adam->second_moments().at(i));
    }
  }

  json manifest = json::array();
  std::string blob;
  for (const auto& [name, t] : tensors) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
    for (double v : t.data()) put_le(blob, std::bit_cast<std::uint64_t>(v), 8);
  }
  json header;
  header["config"] = json::parse(config_to_json(config));
  header["tensors"] = manifest;
  header["blob_bytes"] = blob.size();
  header["history"] = history_json(state.history);
  header["state"] = {{"lr", state.lr},
                     {"epoch", state.epoch},
                     {"best_val_loss", finite_or_null(state.best_val_loss)},
                     {"scheduler_best", finite_or_null(state.scheduler.best)},
                     {"scheduler_bad_epochs", state.scheduler.bad_epochs},
                     {"early_stop_best", finite_or_null(state.early_stop.best)},
                     {"early_stop_bad_epochs", state.early_stop.bad_epochs},
                     {"optimizer_steps", adam ? adam->steps() : 0}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out += text;
  out += blob;

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};

  if (bytes.size() < sizeof kMagic) fault(CheckpointFault::truncated, path, "file shorter than the magic");
  if (!std::equal(kMagic, kMagic + 8, bytes.begin(), [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    fault(CheckpointFault::bad_magic, path, "not a checkpoint (bad magic)");
  }
  if (bytes.size() < kPreamble) fault(CheckpointFault::truncated, path, "truncated preamble");
  const auto version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (version != kCheckpointVersion) {
    fault(CheckpointFault::version_mismatch, path,
          "format version " + std::to_string(version) + " is not supported (expected " +
              std::to_string(kCheckpointVersion) + "); re-train or convert the file");
  }
  const std::uint64_t header_len = get_le(bytes, 12, 8);
  if (header_len > bytes.size() - kPreamble) fault(CheckpointFault::truncated, path, "truncated header");
  const std::size_t blob_start = kPreamble + header_len;
  const std::uint64_t blob_avail = bytes.size() - blob_start;

  json header;
  std::vector<Entry> entries;
  std::uint64_t blob_bytes = 0;
  try {
    header = json::parse(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(blob_start));
    blob_bytes = header.at("blob_bytes").get<std::uint64_t>();
    for (const json& e : header.at("tensors")) {
      Entry entry{e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("offset").get<std::uint64_t>(), 0};
      if (entry.shape.empty() || std::find(entry.shape.begin(), entry.shape.end(), 0u) != entry.shape.end()) {
        fault(CheckpointFault::malformed_header, path, "tensor '" + entry.name + "' has an invalid shape");
      }
      entry.bytes = 8 * shape_numel(entry.shape);
      entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    fault(CheckpointFault::malformed_header, path, std::string("malformed header: ") + e.what());
  }
  if (blob_avail < blob_bytes) fault(CheckpointFault::truncated, path, "truncated tensor blob");

  for (const Entry& e : entries) {
    if (e.offset % 8 != 0 || e.offset > blob_bytes || e.bytes > blob_bytes - e.offset) {
      fault(CheckpointFault::manifest_overflow, path, "tensor '" + e.name + "' lies outside the blob");
    }
  }
  std::vector<const Entry*> by_offset;
  for (const Entry& e : entries) by_offset.push_back(&e);
  std::sort(by_offset.begin(), by_offset.end(), [](const Entry* a, const Entry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i - 1]->offset + by_offset[i - 1]->bytes > by_offset[i]->offset) {
      fault(CheckpointFault::manifest_overlap, path,
            "tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap");
    }
  }

  Checkpoint ckpt;
  try {
    ckpt.config = config_from_json(header.at("config").dump());
    const json& st = header.at("state");
    ckpt.state.lr = st.at("lr").get<double>();
    ckpt.state.epoch = st.at("epoch").get<std::size_t>();
    ckpt.state.best_val_loss = from_nullable(st.at("best_val_loss"));
    ckpt.state.scheduler = {ckpt.config.lr_factor, ckpt.config.lr_patience, ckpt.config.improvement_threshold,
                            from_nullable(st.at("scheduler_best")), st.at("scheduler_bad_epochs").get<std::size_t>()};
    ckpt.state.early_stop = {ckpt.config.early_stop_patience, ckpt.config.improvement_threshold,
                             from_nullable(st.at("early_stop_best")), st.at("early_stop_bad_epochs").get<std::size_t>()};
    ckpt.optimizer_steps = st.at("optimizer_steps").get<std::size_t>();
    for (const json& row : header.at("history")) {
      ckpt.state.history.push_back({row.at("epoch").get<std::size_t>(), row.at("train_loss").get<double>(),
                                    row.at("val_loss").get<double>(), row.at("val_acc").get<double>(),
                                    row.at("lr").get<double>()});
    }
  } catch (const json::exception& e) {
    fault(CheckpointFault::malformed_header, path, std::string("malformed header: ") + e.what());
  } catch (const ConfigError& e) {
    fault(CheckpointFault::malformed_header, path, std::string("invalid config echo: ") + e.what());
  }

  auto read_tensor = [&](const Entry& e) {
    Tensor t(e.shape);
    const std::size_t base = blob_start + e.offset;
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std::bit_cast<double>(get_le(bytes, base + 8 * i, 8));
    return t;
  };
  std::map<std::string, const Entry*> by_name;
  for (const Entry& e : entries) by_name[e.name] = &e;

  ckpt.model = Model(ckpt.config.model, 0);
  ckpt.model.visit([&](const std::string& name, Tensor& param) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) fault(CheckpointFault::missing_tensor, path, "missing tensor '" + name + "'");
    if (it->second->shape != param.shape()) {
      fault(CheckpointFault::shape_mismatch, path,
            "tensor '" + name + "' has shape " + shape_string(it->second->shape) + ", model expects " +
                shape_string(param.shape()));
    }
    const Tensor loaded = read_tensor(*it->second);
    std::copy(loaded.data().begin(), loaded.data().end(), param.data().begin());
  });
  for (const Entry& e : entries) {
    if (e.name.rfind("optimizer.", 0) == 0) ckpt.optimizer[e.name.substr(10)] = read_tensor(e);
  }
  return ckpt;
}

}  // namespace mhaff
