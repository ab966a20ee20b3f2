// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "skim/ops.hpp"
#include "skim/trainer.hpp"

using namespace skim;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.image_size = 32;
  c.patch = 8;
  c.embed_dim = 16;
  c.depth = 2;
  c.heads = 2;
  c.window = 2;
  c.mlp_ratio = 2;
  c.lora_rank = 2;
  c.decoder_dim = 16;
  c.decoder_mlp_dim = 32;
  c.init_seed = seed;
  return c;
}

std::vector<Sample> small_samples(std::size_t n, std::uint64_t seed = 11) {
  DomainSpec spec = DomainSpec::builtin("D1", seed);
  spec.height = 40;
  spec.width = 48;
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

std::vector<TrainExample> examples(const std::vector<Sample>& samples, std::size_t size) {
  std::vector<TrainExample> out;
  for (const auto& s : samples) out.push_back(make_example(s, size));
  return out;
}

TrainConfig quick_config() {
  TrainConfig c;
  c.epochs = 4;
  c.batch = 4;
  c.micro_batch = 2;
  c.seed = 5;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("skim_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

bool same_params(const ParamRegistry& a, const ParamRegistry& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto x = a.entries()[i].tensor.values();
    const auto y = b.entries()[i].tensor.values();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

struct OneParam {
  Tensor w = Tensor::constant({1}, 1.0);
  Tensor frozen = Tensor::constant({2}, 3.0);
  ParamRegistry reg;

  OneParam() {
    reg.add("decoder.w", w, ParamGroup::decoder);
    reg.add("encoder.f", frozen, ParamGroup::encoder_base);
  }
};

}  // namespace

TEST_CASE("schedule examples") {
  const TrainConfig c;
  CHECK(lr_at(0, c) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(std::abs(lr_at(5, c) - 5.05e-4) < 1e-9);
  CHECK(lr_at(10, c) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(9, c) < lr_at(8, c));
  // second period lasts 1000 epochs, its midpoint is epoch 510
  CHECK(std::abs(lr_at(510, c) - 5.05e-4) < 1e-9);
  CHECK(lr_at(1010, c) == doctest::Approx(1e-3).epsilon(1e-12));
}

TEST_CASE("schedule stays within [eta_min, lr0] and decreases inside a period") {
  for (const auto& [t0, mult] : std::vector<std::pair<std::size_t, std::size_t>>{{10, 100}, {3, 2}, {1, 1}, {7, 1}}) {
    TrainConfig c;
    c.t0 = t0;
    c.t_mult = mult;
    std::size_t period_start = 0, period = t0;
    for (std::size_t e = 0; e < 400; ++e) {
      if (e == period_start + period) {
        period_start = e;
        period *= mult;
      }
      const double lr = lr_at(e, c);
      CHECK(lr >= c.eta_min() - 1e-15);
      CHECK(lr <= c.lr0 + 1e-15);
      if (e > period_start) CHECK(lr <= lr_at(e - 1, c));
      if (e == period_start) CHECK(lr == doctest::Approx(c.lr0).epsilon(1e-12));
    }
  }
  TrainConfig c;
  CHECK(lr_at(std::size_t{1} << 60, c) >= c.eta_min());
}

TEST_CASE("train config validation and json round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.eta_min() == doctest::Approx(1e-5));
  c.micro_batch = 3;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = TrainConfig{};
  c.lr0 = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = TrainConfig{};
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = TrainConfig{};
  c.threshold = 1.0;
  CHECK_THROWS_AS(c.validate(), InputError);

  TrainConfig d;
  d.micro_batch = 2;
  d.seed = 42;
  d.target_dice = 0.9;
  const TrainConfig e = TrainConfig::from_json(d.to_json());
  CHECK(e.to_json() == d.to_json());
  CHECK(e.target_dice.value() == 0.9);
}

TEST_CASE("adamw single step oracle") {
  PrecisionScope f64(Precision::f64);
  OneParam p;
  TrainConfig c;
  c.weight_decay = 0;
  AdamW opt(p.reg, c);
  CHECK(opt.buffers() == 1);
  p.w.mutable_grad()[0] = 1.0;
  const auto report = opt.step(p.reg, 0.1);
  CHECK(report.updated == 1);
  CHECK(report.flagged_frozen.empty());
  CHECK(p.w.value(0) == doctest::Approx(0.9).epsilon(1e-9));

  CHECK(p.w.value(0) == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));

  // second step by hand
  p.w.mutable_grad()[0] = -0.5;
  const double m = 0.937 * 0.063 + 0.063 * -0.5;
  const double v = 0.999 * 0.001 + 0.001 * 0.25;
  const double m_hat = m / (1 - 0.937 * 0.937);
  const double v_hat = v / (1 - 0.999 * 0.999);
  const double first = 1.0 - 0.1 / (1.0 + 1e-8);
  const double expect = first - 0.05 * m_hat / (std::sqrt(v_hat) + 1e-8);
  opt.step(p.reg, 0.05);
  CHECK(p.w.value(0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(opt.steps() == 2);
}

TEST_CASE("adamw decoupled weight decay and zero-gradient fixed point") {
  PrecisionScope f64(Precision::f64);
  {
    OneParam p;
    TrainConfig c;
    c.weight_decay = 0;
    AdamW opt(p.reg, c);
    p.w.mutable_grad()[0] = 0.0;
    for (int i = 0; i < 5; ++i) opt.step(p.reg, 0.1);
    CHECK(p.w.value(0) == 1.0);
  }
  {
    OneParam p;
    TrainConfig c;
    c.weight_decay = 0.01;
    AdamW opt(p.reg, c);
    p.w.mutable_grad()[0] = 0.0;
    opt.step(p.reg, 0.1);
    CHECK(p.w.value(0) == doctest::Approx(1.0 - 0.1 * 0.01).epsilon(1e-15));
  }
}

TEST_CASE("adamw flags frozen gradients and rejects missing ones") {
  OneParam p;
  AdamW opt(p.reg, TrainConfig{});
  CHECK_THROWS_AS(opt.step(p.reg, 0.1), ContractError);
  CHECK(p.w.value(0) == 1.0);
  p.w.mutable_grad()[0] = 1.0;
  p.frozen.mutable_grad()[0] = 5.0;
  const auto report = opt.step(p.reg, 0.1);
  REQUIRE(report.flagged_frozen.size() == 1);
  CHECK(report.flagged_frozen[0] == "encoder.f");
  CHECK(p.frozen.value(0) == 3.0);
  CHECK(p.frozen.value(1) == 3.0);
}

TEST_CASE("gradient accumulation matches the full batch") {
  PrecisionScope f64(Precision::f64);
  const auto data = examples(small_samples(8), 32);
  SegmenterModel model(small_config());
  auto grads = [&](std::size_t micro) {
    model.registry().zero_grads();
    const double l = accumulate_gradients(model, data, micro, LossConfig{});
    std::vector<double> g;
    for (const auto& e : model.registry().entries()) {
      if (e.trainable) g.insert(g.end(), e.tensor.grad().begin(), e.tensor.grad().end());
    }
    return std::pair{l, g};
  };
  const auto [l8, g8] = grads(8);
  for (std::size_t micro : {1, 2, 4}) {
    const auto [l, g] = grads(micro);
    CHECK(std::abs(l - l8) < 1e-12);
    REQUIRE(g.size() == g8.size());
    double worst = 0;
    for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(g[i] - g8[i]));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("accumulated parameters after one step match the full batch") {
  const auto data = examples(small_samples(8), 32);
  auto run = [&](std::size_t micro) {
    SegmenterModel model(small_config());
    AdamW opt(model.registry(), TrainConfig{});
    train_step(model, data, micro, LossConfig{}, opt, 1e-3);
    return take_snapshot(model.registry());
  };
  const auto full = run(8);
  for (std::size_t micro : {1, 4}) {
    const auto part = run(micro);
    double worst = 0;
    for (const auto& [name, v] : full) {
      for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(v[i] - part.at(name)[i]));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("reported step loss equals the standalone batch loss") {
  const auto data = examples(small_samples(4), 32);
  SegmenterModel model(small_config());
  std::vector<Tensor> probs, masks;
  for (const auto& ex : data) {
    probs.push_back(sigmoid(model.forward(ex.image)));
    masks.push_back(ex.mask);
  }
  const double expect = composite_loss(probs, masks, LossConfig{}).item();
  AdamW opt(model.registry(), TrainConfig{});
  const double got = train_step(model, data, 2, LossConfig{}, opt, 1e-3);
  CHECK(std::abs(got - expect) < 1e-6);
  for (const auto& e : model.registry().entries()) {
    if (!e.tensor.has_grad()) continue;
    for (double g : e.tensor.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("train step only moves trainable parameters") {
  const auto data = examples(small_samples(4), 32);
  SegmenterModel model(small_config());
  const auto before = take_snapshot(model.registry());
  CHECK(verify_freeze(model.registry(), before).frozen_intact());
  CHECK(verify_freeze(model.registry(), before).trainable_changed.empty());
  AdamW opt(model.registry(), TrainConfig{});
  for (int i = 0; i < 10; ++i) train_step(model, data, 4, LossConfig{}, opt, 1e-3);
  const auto report = verify_freeze(model.registry(), before);
  CHECK(report.frozen_intact());
  CHECK_FALSE(report.trainable_changed.empty());
  bool bypass = false, decoder = false;
  for (const auto& n : report.trainable_changed) {
    const auto g = model.registry().at(n).group;
    bypass |= g == ParamGroup::encoder_bypass;
    decoder |= g == ParamGroup::decoder;
  }
  CHECK(bypass);
  CHECK(decoder);

  // a single-bit edit to a frozen tensor is caught
  for (auto& e : model.registry().entries()) {
    if (e.trainable) continue;
    e.tensor.mutable_values()[0] = std::nextafter(e.tensor.values()[0], 1e9);
    const auto bad = verify_freeze(model.registry(), before);
    REQUIRE(bad.frozen_changed.size() == 1);
    CHECK(bad.frozen_changed[0] == e.name);
    break;
  }
}

TEST_CASE("fit with patience zero stops at the first non-improving epoch") {
  const auto train = small_samples(4);
  const auto val = small_samples(2, 99);
  SegmenterModel model(small_config());
  TrainConfig c = quick_config();
  c.epochs = 30;
  c.patience = 0;
  const auto r = fit(model, train, val, c);
  REQUIRE(!r.history.empty());
  if (r.stopped_early) {
    const std::size_t n = r.history.size();
    for (std::size_t i = 1; i + 1 < n; ++i) CHECK(r.history[i].val_dice > r.history[i - 1].val_dice);
    CHECK(r.history[n - 1].val_dice <= r.best_val_dice);
    CHECK(r.best_epoch == n - 2);
  } else {
    CHECK(r.history.size() == 30);
  }
}

TEST_CASE("fit history, best parameters and checkpoint reload") {
  const fs::path dir = temp_dir("fit");
  const auto train = small_samples(8);
  const auto val = small_samples(3, 77);
  SegmenterModel model(small_config());
  TrainConfig c = quick_config();
  c.epochs = 6;
  std::vector<EpochRecord> seen;
  FitOptions opts;
  opts.checkpoint = dir / "best.ckpt";
  opts.on_epoch = [&](const EpochRecord& r) { seen.push_back(r); };
  const auto r = fit(model, train, val, c, opts);
  REQUIRE(r.history.size() == 6);
  CHECK(seen.size() == 6);
  for (std::size_t i = 0; i < r.history.size(); ++i) {
    CHECK(r.history[i].epoch == i);
    CHECK(r.history[i].lr == lr_at(i, c));
    CHECK(std::isfinite(r.history[i].loss));
    CHECK(r.history[i].val_dice >= 0);
    CHECK(r.history[i].val_dice <= 1);
    CHECK(r.history[i].val_dice <= r.best_val_dice);
  }
  CHECK(r.history[r.best_epoch].val_dice == r.best_val_dice);
  CHECK(std::abs(mean_dice(evaluate(model, val, c.threshold)) - r.best_val_dice) < 1e-6);

  SegmenterModel fresh(small_config());
  load_checkpoint(dir / "best.ckpt", fresh);
  CHECK(same_params(fresh.registry(), model.registry()));
  CHECK(std::abs(mean_dice(evaluate(fresh, val, c.threshold)) - r.best_val_dice) < 1e-6);

  write_history(dir / "history.jsonl", r.history);
  std::ifstream in(dir / "history.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("epoch") == lines);
    CHECK(j.contains("lr"));
    CHECK(j.contains("loss"));
    CHECK(j.contains("val_dice"));
    ++lines;
  }
  CHECK(lines == 6);
}

TEST_CASE("fit rejects empty splits") {
  SegmenterModel model(small_config());
  const auto s = small_samples(2);
  CHECK_THROWS_AS(fit(model, {}, s, quick_config()), InputError);
  CHECK_THROWS_AS(fit(model, s, {}, quick_config()), InputError);
}

TEST_CASE("identical seeds give identical histories and checkpoints") {
  const auto train = small_samples(6);
  const auto val = small_samples(2, 5);
  auto run = [&](std::uint64_t seed) {
    SegmenterModel model(small_config());
    TrainConfig c = quick_config();
    c.seed = seed;
    const auto r = fit(model, train, val, c);
    std::string h;
    for (const auto& e : r.history) h += e.to_json().dump() + "\n";
    return std::pair{h, encode_checkpoint(model)};
  };
  const auto a = run(1);
  const auto b = run(1);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  const auto c = run(2);
  CHECK(c.first != a.first);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const fs::path dir = temp_dir("roundtrip");
  SegmenterModel model(small_config(3));
  // perturb trainables so the file differs from a fresh init
  for (auto& e : model.registry().entries()) {
    if (!e.trainable) continue;
    auto v = e.tensor.mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = quantize(v[i] + 0.001 * static_cast<double>(i % 7));
  }
  save_checkpoint(model, dir / "m.ckpt");
  SegmenterModel other(small_config(8));
  CHECK_FALSE(same_params(model.registry(), other.registry()));
  load_checkpoint(dir / "m.ckpt", other);
  CHECK(same_params(model.registry(), other.registry()));
  CHECK(encode_checkpoint(other) == read_bytes(dir / "m.ckpt"));
}

TEST_CASE("corrupt, truncated and mismatched checkpoints are rejected without side effects") {
  const fs::path dir = temp_dir("corrupt");
  SegmenterModel model(small_config(3));
  save_checkpoint(model, dir / "m.ckpt");
  const auto good = read_bytes(dir / "m.ckpt");

  SegmenterModel target(small_config(9));
  const auto before = take_snapshot(target.registry());
  auto untouched = [&] {
    const auto r = verify_freeze(target.registry(), before);
    return r.frozen_intact() && r.trainable_changed.empty();
  };

  for (std::size_t pos : {std::size_t{30}, good.size() / 2, good.size() - 20, good.size() - 1}) {
    auto bad = good;
    bad[pos] ^= 0x10;
    write_bytes(dir / "bad.ckpt", bad);
    try {
      load_checkpoint(dir / "bad.ckpt", target);
      FAIL("corruption accepted");
    } catch (const CheckpointChecksumError& e) {
      CHECK(std::string(e.what()).find("bad.ckpt") != std::string::npos);
    }
    CHECK(untouched());
  }

  auto cut = good;
  cut.resize(good.size() - 100);
  write_bytes(dir / "cut.ckpt", cut);
  CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt", target), CheckpointTruncatedError);
  write_bytes(dir / "tiny.ckpt", {good.begin(), good.begin() + 3});
  CHECK_THROWS_AS(load_checkpoint(dir / "tiny.ckpt", target), CheckpointTruncatedError);
  write_bytes(dir / "junk.ckpt", std::vector<std::uint8_t>(64, 7));
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt", target), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt", target), CheckpointError);
  CHECK(untouched());

  ModelConfig wider = small_config(3);
  wider.lora_rank = 4;
  SegmenterModel other(wider);
  const auto other_before = take_snapshot(other.registry());
  CHECK_THROWS_AS(load_checkpoint(dir / "m.ckpt", other), CheckpointFingerprintError);
  const auto r = verify_freeze(other.registry(), other_before);
  CHECK(r.frozen_intact());
  CHECK(r.trainable_changed.empty());

  // the init seed is not part of the architecture
  CHECK_NOTHROW(load_checkpoint(dir / "m.ckpt", target));
  CHECK(same_params(target.registry(), model.registry()));
}

TEST_CASE("predict_probabilities returns the original resolution") {
  SegmenterModel model(small_config());
  const auto s = small_samples(1).front();
  const auto p = predict_probabilities(model, s);
  CHECK(p.size() == s.mask.height * s.mask.width);
  for (double v : p) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
  CHECK_THROWS_AS(mean_dice({}), InputError);
}
