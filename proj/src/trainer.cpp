// SPDX-License-Identifier: Apache-2.0
#include "skim/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "skim/ops.hpp"

namespace skim {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InputError("train config: " + what);
  };
  require(lr0 > 0, "lr0 must be positive");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
  require(adam_eps > 0, "adam eps must be positive");
  require(weight_decay >= 0, "weight decay must be non-negative");
  require(batch >= 1, "batch must be positive");
  require(micro_batch >= 1 && batch % micro_batch == 0, "micro_batch must divide batch");
  require(epochs >= 1, "epochs must be positive");
  require(t0 >= 1 && t_mult >= 1, "scheduler periods must be positive");
  require(eta_min_ratio > 0 && eta_min_ratio <= 1, "eta_min ratio must lie in (0, 1]");
  require(threshold > 0 && threshold < 1, "threshold must lie in (0, 1)");
  require(!target_dice || (*target_dice > 0 && *target_dice <= 1), "target dice must lie in (0, 1]");
  loss.validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = {
      {"lr0", lr0},
      {"betas", {beta1, beta2}},
      {"adam_eps", adam_eps},
      {"weight_decay", weight_decay},
      {"batch", batch},
      {"micro_batch", micro_batch},
      {"epochs", epochs},
      {"scheduler", {{"t0", t0}, {"t_mult", t_mult}, {"eta_min", eta_min()}}},
      {"patience", patience},
      {"augment", augment},
      {"alpha", loss.alpha},
      {"dice_eps", loss.eps},
      {"threshold", threshold},
      {"seed", seed},
  };
  j["target_dice"] = target_dice ? nlohmann::json(*target_dice) : nlohmann::json(nullptr);
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr0 = j.at("lr0");
  c.beta1 = j.at("betas").at(0);
  c.beta2 = j.at("betas").at(1);
  c.adam_eps = j.at("adam_eps");
  c.weight_decay = j.at("weight_decay");
  c.batch = j.at("batch");
  c.micro_batch = j.at("micro_batch");
  c.epochs = j.at("epochs");
  c.t0 = j.at("scheduler").at("t0");
  c.t_mult = j.at("scheduler").at("t_mult");
  c.eta_min_ratio = j.at("scheduler").at("eta_min").get<double>() / c.lr0;
  c.patience = j.at("patience");
  c.augment = j.at("augment");
  c.loss.alpha = j.at("alpha");
  c.loss.eps = j.at("dice_eps");
  c.threshold = j.at("threshold");
  c.seed = j.at("seed");
  if (j.contains("target_dice") && !j.at("target_dice").is_null()) c.target_dice = j.at("target_dice").get<double>();
  c.validate();
  return c;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  std::size_t t = epoch;
  std::size_t period = cfg.t0;
  while (t >= period) {
    t -= period;
    // Periods grow geometrically; past ~1e15 epochs the period is effectively infinite.
    if (period > (std::size_t{1} << 50) / std::max<std::size_t>(cfg.t_mult, 1)) break;
    period *= cfg.t_mult;
  }
  const double eta_min = cfg.eta_min();
  const double phase = static_cast<double>(t) / static_cast<double>(period);
  return eta_min + (cfg.lr0 - eta_min) * (1 + std::cos(std::numbers::pi * phase)) / 2;
}

// ---------------------------------------------------------------------------
// AdamW

AdamW::AdamW(const ParamRegistry& registry, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
  for (const auto& e : registry.entries()) {
    if (!e.trainable) continue;
    moments_[e.name] = Moments{std::vector<double>(e.tensor.numel(), 0.0), std::vector<double>(e.tensor.numel(), 0.0)};
  }
}

AdamWStepReport AdamW::step(ParamRegistry& registry, double lr) {
  AdamWStepReport report;
  for (auto& e : registry.entries()) {
    if (!e.trainable) {
      if (e.tensor.has_grad()) report.flagged_frozen.push_back(e.name);
      continue;
    }
    if (!e.tensor.has_grad()) throw ContractError("AdamW: trainable parameter '" + e.name + "' has no gradient");
  }
  ++step_;
  const double c1 = 1 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1 - std::pow(beta2_, static_cast<double>(step_));
  for (auto& e : registry.entries()) {
    if (!e.trainable) continue;
    Moments& mo = moments_.at(e.name);
    const auto g = e.tensor.grad();
    auto p = e.tensor.mutable_values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      double w = p[i] * (1 - lr * weight_decay_);
      mo.m[i] = beta1_ * mo.m[i] + (1 - beta1_) * g[i];
      mo.v[i] = beta2_ * mo.v[i] + (1 - beta2_) * g[i] * g[i];
      const double m_hat = mo.m[i] / c1;
      const double v_hat = mo.v[i] / c2;
      w -= lr * m_hat / (std::sqrt(v_hat) + eps_);
      p[i] = quantize(w);
    }
    ++report.updated;
  }
  return report;
}

// ---------------------------------------------------------------------------
// training

TrainExample make_example(const Sample& sample, std::size_t image_size) {
  const auto [boxed, geometry] = letterbox(sample, image_size);
  return TrainExample{image_tensor(boxed.image), mask_tensor(boxed.mask)};
}

double accumulate_gradients(SegmenterModel& model, std::span<const TrainExample> batch, std::size_t micro_batch,
                            const LossConfig& loss) {
  if (batch.empty()) throw InputError("empty batch");
  if (micro_batch == 0) throw InputError("micro_batch must be positive");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (std::size_t start = 0; start < batch.size(); start += micro_batch) {
    const std::size_t end = std::min(batch.size(), start + micro_batch);
    Tensor acc;
    for (std::size_t i = start; i < end; ++i) {
      const Tensor l = composite_loss(sigmoid(model.forward(batch[i].image)), batch[i].mask, loss);
      total += l.item();
      acc = acc.defined() ? add(acc, l) : l;
    }
    scale(acc, inv).backward();
  }
  return total * inv;
}

double train_step(SegmenterModel& model, std::span<const TrainExample> batch, std::size_t micro_batch,
                  const LossConfig& loss, AdamW& optimizer, double lr) {
  const double mean_loss = accumulate_gradients(model, batch, micro_batch, loss);
  optimizer.step(model.registry(), lr);
  model.registry().zero_grads();
  return mean_loss;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"lr", lr}, {"loss", loss}, {"val_dice", val_dice}};
}

std::vector<double> predict_probabilities(const SegmenterModel& model, const Sample& sample) {
  NoGradScope no_grad;
  const auto [boxed, geometry] = letterbox(sample, model.config().image_size);
  const Tensor prob = sigmoid(model.forward(image_tensor(boxed.image)));
  return invert_letterbox(prob.values(), geometry);
}

std::vector<Metrics> evaluate(const SegmenterModel& model, const std::vector<Sample>& samples, double threshold) {
  std::vector<Metrics> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto prob = predict_probabilities(model, s);
    const std::vector<double> truth(s.mask.data.begin(), s.mask.data.end());
    out.push_back(metrics_from_confusion(confusion(prob, truth, threshold)));
  }
  return out;
}

double mean_dice(const std::vector<Metrics>& metrics) {
  if (metrics.empty()) throw InputError("mean_dice of no images");
  double s = 0;
  for (const auto& m : metrics) s += m.dice;
  return s / static_cast<double>(metrics.size());
}

FitResult fit(SegmenterModel& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOptions& options) {
  cfg.validate();
  if (train.empty()) throw InputError("fit: empty train split");
  if (val.empty()) throw InputError("fit: empty validation split");
  const std::size_t size = model.config().image_size;
  Rng rng(cfg.seed);
  AdamW optimizer(model.registry(), cfg);
  FitResult result;
  ParamSnapshot best = take_snapshot(model.registry());
  std::size_t since_best = 0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::vector<TrainExample> batch;
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train[order[i]];
        batch.push_back(make_example(cfg.augment ? augment(s, rng, cfg.augmentation) : s, size));
      }
      const double l = train_step(model, batch, cfg.micro_batch, cfg.loss, optimizer, lr);
      loss_sum += l * static_cast<double>(batch.size());
    }

    EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(train.size()),
                    mean_dice(evaluate(model, val, cfg.threshold))};
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);

    if (rec.val_dice > result.best_val_dice) {
      result.best_val_dice = rec.val_dice;
      result.best_epoch = epoch;
      best = take_snapshot(model.registry());
      if (options.checkpoint) save_checkpoint(model, *options.checkpoint);
      since_best = 0;
    } else if (++since_best > cfg.patience) {
      result.stopped_early = true;
      break;
    }
    if (cfg.target_dice && rec.val_dice >= *cfg.target_dice) {
      result.reached_target = true;
      break;
    }
  }
  for (auto& e : model.registry().entries()) {
    const auto& saved = best.at(e.name);
    std::copy(saved.begin(), saved.end(), e.tensor.mutable_values().begin());
  }
  return result;
}

void write_history(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write history " + path.string());
  for (const auto& r : history) out << r.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("failed writing history " + path.string());
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Layout (little-endian): "SKIM1" | u64 file size | u64 fingerprint hash |
// u32 entry count | entries | u64 FNV-1a of all preceding bytes.
// Entry: u32 name length | name | u32 rank | u64 extents | f32 values.

namespace {

constexpr char kMagic[5] = {'S', 'K', 'I', 'M', '1'};
constexpr std::size_t kHeaderSize = 5 + 8 + 8 + 4;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

struct Cursor {
  std::span<const std::uint8_t> bytes;
  std::size_t pos;
  std::size_t end;  // exclusive, before the checksum
  const std::string& file;

  void need(std::size_t n) const {
    if (pos + n > end) throw CheckpointTruncatedError(file + ": checkpoint entry runs past the end of the data");
  }
  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[pos + static_cast<std::size_t>(i)]) << (8 * i);
    pos += static_cast<std::size_t>(width);
    return v;
  }
};

std::uint64_t fingerprint_hash(const ModelConfig& config) {
  const std::string fp = config.fingerprint();
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(fp.data()), fp.size()});
}

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_checkpoint(const SegmenterModel& model) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 5);
  put_u64(out, 0);  // file size, patched below
  put_u64(out, fingerprint_hash(model.config()));
  const auto& entries = model.registry().entries();
  put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<std::uint32_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) put_u64(out, d);
    for (double v : e.tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  const std::uint64_t total = out.size() + 8;
  for (int i = 0; i < 8; ++i) out[5 + static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(total >> (8 * i));
  put_u64(out, fnv1a64(out));
  return out;
}

void save_checkpoint(const SegmenterModel& model, const fs::path& path) {
  const auto bytes = encode_checkpoint(model);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

void load_checkpoint(const fs::path& path, SegmenterModel& model) {
  const std::string file = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(file + ": cannot open checkpoint");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 5 || std::memcmp(bytes.data(), kMagic, 5) != 0) {
    if (bytes.size() < 5) throw CheckpointTruncatedError(file + ": checkpoint is shorter than its header");
    throw CheckpointError(file + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < kHeaderSize + 8) throw CheckpointTruncatedError(file + ": checkpoint is shorter than its header");
  Cursor header{bytes, 5, bytes.size(), file};
  const std::uint64_t declared = header.uint(8);
  if (bytes.size() < declared) {
    throw CheckpointTruncatedError(file + ": checkpoint truncated (" + std::to_string(bytes.size()) + " of " +
                                   std::to_string(declared) + " bytes)");
  }
  const std::size_t body_end = bytes.size() - 8;
  Cursor tail{bytes, body_end, bytes.size(), file};
  const std::uint64_t stored_sum = tail.uint(8);
  if (declared != bytes.size() || fnv1a64({bytes.data(), body_end}) != stored_sum) {
    throw CheckpointChecksumError(file + ": checkpoint checksum mismatch");
  }
  if (header.uint(8) != fingerprint_hash(model.config())) {
    throw CheckpointFingerprintError(file + ": checkpoint was saved for a different model configuration");
  }

  Cursor cur{bytes, kHeaderSize, body_end, file};
  cur.pos = 5 + 8 + 8;
  const auto count = static_cast<std::size_t>(cur.uint(4));
  auto& entries = model.registry().entries();
  if (count != entries.size()) {
    throw CheckpointFingerprintError(file + ": checkpoint holds " + std::to_string(count) + " parameters, model has " +
                                     std::to_string(entries.size()));
  }
  std::vector<std::vector<double>> staged(count);
  for (std::size_t k = 0; k < count; ++k) {
    const auto len = static_cast<std::size_t>(cur.uint(4));
    cur.need(len);
    const std::string name(reinterpret_cast<const char*>(bytes.data() + cur.pos), len);
    cur.pos += len;
    const auto rank = static_cast<std::size_t>(cur.uint(4));
    Shape shape;
    for (std::size_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(cur.uint(8)));
    if (name != entries[k].name || shape != entries[k].tensor.shape()) {
      throw CheckpointFingerprintError(file + ": entry " + std::to_string(k) + " is '" + name + "' " +
                                       to_string(shape) + ", model expects '" + entries[k].name + "' " +
                                       to_string(entries[k].tensor.shape()));
    }
    const std::size_t n = numel(shape);
    cur.need(4 * n);
    staged[k].resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      staged[k][i] = static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(cur.uint(4))));
    }
  }
  if (cur.pos != body_end) throw CheckpointError(file + ": unexpected bytes after the last entry");
  for (std::size_t k = 0; k < count; ++k) {
    std::copy(staged[k].begin(), staged[k].end(), entries[k].tensor.mutable_values().begin());
  }
}

// ---------------------------------------------------------------------------

ParamSnapshot take_snapshot(const ParamRegistry& registry) {
  ParamSnapshot snap;
  for (const auto& e : registry.entries()) snap[e.name] = e.tensor.to_vector();
  return snap;
}

FreezeReport verify_freeze(const ParamRegistry& registry, const ParamSnapshot& before) {
  FreezeReport report;
  for (const auto& e : registry.entries()) {
    const auto it = before.find(e.name);
    const auto now = e.tensor.values();
    const bool changed = it == before.end() || it->second.size() != now.size() ||
                         std::memcmp(it->second.data(), now.data(), now.size() * sizeof(double)) != 0;
    if (!changed) continue;
    (e.trainable ? report.trainable_changed : report.frozen_changed).push_back(e.name);
  }
  return report;
}

}  // namespace skim
