// SPDX-License-Identifier: Apache-2.0
#include "skim/segmenter.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "skim/ops.hpp"

namespace skim {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kPosEmbedStd = 0.02;
constexpr double kPromptStd = 0.02;

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Every module draws from a stream keyed by its name, so initial values do
/// not depend on construction order or on which optional pieces exist.
Rng module_rng(std::uint64_t seed, std::string_view name) { return Rng(seed ^ fnv1a(name)); }

}  // namespace

// ---------------------------------------------------------------------------
// ModelConfig

ModelConfig ModelConfig::preset(std::string_view name) {
  ModelConfig c;
  if (name == "toy-B") {
    c.depth = 2;
    c.embed_dim = 48;
  } else if (name == "toy-L") {
    c.depth = 4;
    c.embed_dim = 64;
  } else if (name == "toy-H") {
    c.depth = 6;
    c.embed_dim = 96;
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "' (expected toy-B, toy-L or toy-H)");
  }
  return c;
}

std::size_t ModelConfig::upsample_stages() const {
  if (mask_scale == 0 || patch % mask_scale != 0) {
    throw ConfigError("patch " + std::to_string(patch) + " must be a multiple of mask_scale " +
                      std::to_string(mask_scale));
  }
  const std::size_t ratio = patch / mask_scale;
  if (!std::has_single_bit(ratio)) throw ConfigError("patch / mask_scale must be a power of two");
  return static_cast<std::size_t>(std::countr_zero(ratio));
}

std::vector<std::size_t> ModelConfig::resolved_global_blocks() const {
  if (global_blocks) return *global_blocks;
  if (depth == 0) return {};
  return {depth - 1};
}

bool ModelConfig::is_global_block(std::size_t index) const {
  const auto blocks = resolved_global_blocks();
  return std::find(blocks.begin(), blocks.end(), index) != blocks.end();
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(image_size > 0 && patch > 0, "image_size and patch must be positive");
  require(image_size % patch == 0, "image_size must be divisible by patch");
  require(window > 0 && grid() % window == 0, "patch grid must be divisible by window");
  require(heads > 0 && embed_dim % heads == 0, "embed_dim must be divisible by heads");
  require(decoder_dim % heads == 0, "decoder_dim must be divisible by heads");
  require(mlp_ratio > 0 && decoder_mlp_dim > 0, "MLP widths must be positive");
  require(lora_rank > 0, "lora_rank must be positive");
  require(decoder_blocks > 0, "decoder_blocks must be positive");
  require(image_size % mask_scale == 0, "image_size must be divisible by mask_scale");
  const std::size_t stages = upsample_stages();
  require(decoder_dim % (std::size_t{1} << stages) == 0, "decoder_dim must halve cleanly at every upsampling stage");
  for (std::size_t b : resolved_global_blocks()) require(b < depth, "global block index out of range");
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"image_size", image_size},
      {"patch", patch},
      {"embed_dim", embed_dim},
      {"depth", depth},
      {"heads", heads},
      {"window", window},
      {"global_blocks", resolved_global_blocks()},
      {"mlp_ratio", mlp_ratio},
      {"lora_rank", lora_rank},
      {"decoder_dim", decoder_dim},
      {"decoder_blocks", decoder_blocks},
      {"decoder_mlp_dim", decoder_mlp_dim},
      {"mask_scale", mask_scale},
      {"encoder_bypass", encoder_bypass},
      {"decoder_bypass", decoder_bypass},
      {"init_seed", init_seed},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.at("image_size");
  c.patch = j.at("patch");
  c.embed_dim = j.at("embed_dim");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.window = j.at("window");
  c.global_blocks = j.at("global_blocks").get<std::vector<std::size_t>>();
  c.mlp_ratio = j.at("mlp_ratio");
  c.lora_rank = j.at("lora_rank");
  c.decoder_dim = j.at("decoder_dim");
  c.decoder_blocks = j.at("decoder_blocks");
  c.decoder_mlp_dim = j.at("decoder_mlp_dim");
  c.mask_scale = j.at("mask_scale");
  c.encoder_bypass = j.at("encoder_bypass");
  c.decoder_bypass = j.at("decoder_bypass");
  c.init_seed = j.value("init_seed", std::uint64_t{0});
  return c;
}

std::string ModelConfig::fingerprint() const {
  nlohmann::json j = to_json();
  j.erase("init_seed");
  return j.dump();
}

// ---------------------------------------------------------------------------
// Registry

std::string_view to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::encoder_base:
      return "encoder-base";
    case ParamGroup::encoder_bypass:
      return "encoder-bypass";
    case ParamGroup::prompt:
      return "prompt";
    case ParamGroup::decoder:
      return "decoder";
  }
  return "unknown";
}

ParamGroup classify_param_name(std::string_view name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.substr(name.size() - suffix.size()) == suffix;
  };
  if (name.starts_with("encoder.")) {
    return (ends_with(".W1") || ends_with(".W2")) ? ParamGroup::encoder_bypass : ParamGroup::encoder_base;
  }
  if (name.starts_with("prompt.")) return ParamGroup::prompt;
  if (name.starts_with("decoder.")) return ParamGroup::decoder;
  throw RegistryError("parameter '" + std::string(name) + "' does not belong to any model component");
}

void ParamRegistry::add(std::string name, Tensor& tensor, ParamGroup group) {
  if (contains(name)) throw RegistryError("duplicate parameter name '" + name + "'");
  if (classify_param_name(name) != group) throw RegistryError("parameter '" + name + "' registered in wrong group");
  const bool trainable = group != ParamGroup::encoder_base;
  tensor.set_requires_grad(trainable);
  entries_.push_back(ParamEntry{std::move(name), tensor, trainable, group});
}

const ParamEntry& ParamRegistry::at(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw RegistryError("unregistered parameter '" + std::string(name) + "'");
}

ParamEntry& ParamRegistry::at(std::string_view name) {
  return const_cast<ParamEntry&>(std::as_const(*this).at(name));
}

bool ParamRegistry::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.name == name; });
}

void ParamRegistry::zero_grads() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Model

LayerNormParams LayerNormParams::create(std::size_t dim) {
  return LayerNormParams{Tensor::constant({dim}, 1.0), Tensor::zeros({dim})};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, kLayerNormEps); }

SegmenterModel::SegmenterModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const std::uint64_t seed = c.init_seed;
  const std::size_t e = c.embed_dim, d = c.decoder_dim, g = c.grid();

  {
    Rng rng = module_rng(seed, "encoder.patch_embed");
    patch_proj_ = Linear::create(3 * c.patch * c.patch, e, rng);
    pos_embed_ = Tensor::gaussian({g, g, e}, 0.0, kPosEmbedStd, module_rng(seed, "encoder.pos_embed").next_u64());
  }
  for (std::size_t i = 0; i < c.depth; ++i) {
    const std::string prefix = "encoder.block" + std::to_string(i);
    Rng rng = module_rng(seed, prefix);
    EncoderBlock b;
    b.norm1 = LayerNormParams::create(e);
    const std::optional<std::size_t> window =
        c.is_global_block(i) ? std::nullopt : std::optional<std::size_t>(c.window);
    b.attn = AttentionParams::create(e, c.heads, c.lora_rank, false, window, rng);
    b.norm2 = LayerNormParams::create(e);
    b.fc1 = Linear::create(e, e * c.mlp_ratio, rng);
    b.fc2 = Linear::create(e * c.mlp_ratio, e, rng);
    if (c.encoder_bypass) {
      Rng bypass_rng = module_rng(seed, prefix + ".bypass");
      b.attn.q.attach_bypass(c.lora_rank, bypass_rng);
      b.attn.v.attach_bypass(c.lora_rank, bypass_rng);
    }
    blocks_.push_back(std::move(b));
  }
  {
    Rng rng = module_rng(seed, "encoder.neck");
    neck_ = Linear::create(e, d, rng);
    neck_norm_ = LayerNormParams::create(d);
  }
  no_mask_embed_ = Tensor::gaussian({d}, 0.0, kPromptStd, module_rng(seed, "prompt.no_mask_embed").next_u64());
  mask_token_ = Tensor::gaussian({d}, 0.0, 1.0, module_rng(seed, "decoder.mask_token").next_u64());
  for (std::size_t i = 0; i < c.decoder_blocks; ++i) {
    const std::string prefix = "decoder.block" + std::to_string(i);
    Rng rng = module_rng(seed, prefix);
    TwoWayBlock b;
    b.self_attn = AttentionParams::create(d, c.heads, c.lora_rank, false, std::nullopt, rng);
    b.norm1 = LayerNormParams::create(d);
    b.cross = AttentionParams::create(d, c.heads, c.lora_rank, false, std::nullopt, rng);
    b.norm2 = LayerNormParams::create(d);
    b.fc1 = Linear::create(d, c.decoder_mlp_dim, rng);
    b.fc2 = Linear::create(c.decoder_mlp_dim, d, rng);
    b.norm3 = LayerNormParams::create(d);
    b.cross_rev = AttentionParams::create(d, c.heads, c.lora_rank, false, std::nullopt, rng);
    b.norm4 = LayerNormParams::create(d);
    if (c.decoder_bypass) {
      Rng bypass_rng = module_rng(seed, prefix + ".bypass");
      for (AttentionParams* a : {&b.self_attn, &b.cross, &b.cross_rev}) {
        a->q.attach_bypass(c.lora_rank, bypass_rng);
        a->v.attach_bypass(c.lora_rank, bypass_rng);
      }
    }
    decoder_blocks_.push_back(std::move(b));
  }
  std::size_t channels = d;
  for (std::size_t s = 0; s < c.upsample_stages(); ++s) {
    Rng rng = module_rng(seed, "decoder.upsample" + std::to_string(s));
    upsample_.push_back(Linear::create(channels, 4 * (channels / 2), rng));
    channels /= 2;
  }
  {
    Rng rng = module_rng(seed, "decoder.hyper");
    hyper_[0] = Linear::create(d, d, rng);
    hyper_[1] = Linear::create(d, d, rng);
    hyper_[2] = Linear::create(d, channels, rng);
  }
  register_params();
}

void SegmenterModel::register_linear(const std::string& prefix, Linear& lin, ParamGroup group) {
  registry_.add(prefix + ".W", lin.weight, group);
  registry_.add(prefix + ".b", lin.bias, group);
}

void SegmenterModel::register_norm(const std::string& prefix, LayerNormParams& norm, ParamGroup group) {
  registry_.add(prefix + ".gamma", norm.gamma, group);
  registry_.add(prefix + ".beta", norm.beta, group);
}

void SegmenterModel::register_attention(const std::string& prefix, AttentionParams& attn, ParamGroup base_group) {
  const ParamGroup bypass_group = base_group == ParamGroup::encoder_base ? ParamGroup::encoder_bypass : base_group;
  for (auto [name, lin] : {std::pair{"q", &attn.q}, std::pair{"k", &attn.k}, std::pair{"v", &attn.v}}) {
    const std::string p = prefix + "." + name;
    registry_.add(p + ".W", lin->weight, base_group);
    registry_.add(p + ".b", lin->bias, base_group);
    if (lin->enabled) {
      registry_.add(p + ".W1", lin->down, bypass_group);
      registry_.add(p + ".W2", lin->up, bypass_group);
    }
  }
  register_linear(prefix + ".out", attn.out, base_group);
}

void SegmenterModel::register_params() {
  constexpr auto enc = ParamGroup::encoder_base;
  constexpr auto dec = ParamGroup::decoder;
  register_linear("encoder.patch_embed", patch_proj_, enc);
  registry_.add("encoder.pos_embed", pos_embed_, enc);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "encoder.block" + std::to_string(i);
    auto& b = blocks_[i];
    register_norm(p + ".norm1", b.norm1, enc);
    register_attention(p + ".attn", b.attn, enc);
    register_norm(p + ".norm2", b.norm2, enc);
    register_linear(p + ".mlp.fc1", b.fc1, enc);
    register_linear(p + ".mlp.fc2", b.fc2, enc);
  }
  register_linear("encoder.neck", neck_, enc);
  register_norm("encoder.neck_norm", neck_norm_, enc);
  registry_.add("prompt.no_mask_embed", no_mask_embed_, ParamGroup::prompt);
  registry_.add("decoder.mask_token", mask_token_, dec);
  for (std::size_t i = 0; i < decoder_blocks_.size(); ++i) {
    const std::string p = "decoder.block" + std::to_string(i);
    auto& b = decoder_blocks_[i];
    register_attention(p + ".self", b.self_attn, dec);
    register_norm(p + ".norm1", b.norm1, dec);
    register_attention(p + ".cross", b.cross, dec);
    register_norm(p + ".norm2", b.norm2, dec);
    register_linear(p + ".mlp.fc1", b.fc1, dec);
    register_linear(p + ".mlp.fc2", b.fc2, dec);
    register_norm(p + ".norm3", b.norm3, dec);
    register_attention(p + ".cross_rev", b.cross_rev, dec);
    register_norm(p + ".norm4", b.norm4, dec);
  }
  for (std::size_t s = 0; s < upsample_.size(); ++s) register_linear("decoder.upsample" + std::to_string(s), upsample_[s], dec);
  for (std::size_t i = 0; i < hyper_.size(); ++i) register_linear("decoder.hyper.fc" + std::to_string(i + 1), hyper_[i], dec);
}

Tensor SegmenterModel::mlp_block(const Tensor& x, const Linear& fc1, const Linear& fc2) const {
  return fc2(gelu(fc1(x)));
}

Tensor SegmenterModel::patch_embed(const Tensor& image) const {
  const auto& c = config_;
  if (image.shape() != Shape{3, c.image_size, c.image_size}) {
    throw ShapeError("expected image of shape " + to_string(Shape{3, c.image_size, c.image_size}) + ", got " +
                     to_string(image.shape()));
  }
  Tensor patches = transpose(space_to_depth(image, c.patch), {1, 2, 0});  // [g, g, 3 p^2]
  return add(patch_proj_(patches), pos_embed_);
}

Tensor SegmenterModel::encoder_forward(const Tensor& image) const {
  Tensor x = patch_embed(image);
  for (const auto& b : blocks_) {
    x = add(x, attention_forward(b.norm1(x), b.attn));
    x = add(x, mlp_block(b.norm2(x), b.fc1, b.fc2));
  }
  return neck_norm_(neck_(x));
}

Tensor SegmenterModel::prompt_default() const {
  const std::size_t g = config_.grid();
  return add(Tensor::zeros({g, g, config_.decoder_dim}), no_mask_embed_);
}

Tensor SegmenterModel::decoder_forward(const Tensor& embeddings, const Tensor& prompt) const {
  const auto& c = config_;
  const std::size_t g = c.grid(), d = c.decoder_dim;
  const Shape expected{g, g, d};
  if (embeddings.shape() != expected || prompt.shape() != expected) {
    throw ShapeError("decoder inputs must have shape " + to_string(expected));
  }
  Tensor image = reshape(add(embeddings, prompt), {1, g * g, d});
  Tensor tokens = reshape(mask_token_, {1, 1, d});
  for (const auto& b : decoder_blocks_) {
    tokens = b.norm1(add(tokens, multi_head_attention(tokens, tokens, b.self_attn)));
    tokens = b.norm2(add(tokens, multi_head_attention(tokens, image, b.cross)));
    tokens = b.norm3(add(tokens, mlp_block(tokens, b.fc1, b.fc2)));
    image = b.norm4(add(image, multi_head_attention(image, tokens, b.cross_rev)));
  }

  // Learned 2x upsampling: channel expansion then depth_to_space.
  Tensor features = reshape(image, {g, g, d});
  std::size_t side = g;
  std::size_t channels = d;
  for (const auto& stage : upsample_) {
    Tensor expanded = transpose(stage(features), {2, 0, 1});  // [4 c/2, side, side]
    channels /= 2;
    side *= 2;
    features = gelu(transpose(depth_to_space(expanded, 2), {1, 2, 0}));  // [side, side, c/2]
  }

  Tensor classifier = reshape(tokens, {1, d});
  classifier = hyper_[2](relu(hyper_[1](relu(hyper_[0](classifier)))));  // [1, channels]
  Tensor logits = matmul(reshape(features, {side * side, channels}), reshape(classifier, {channels, 1}));
  return reshape(logits, {side, side});
}

Tensor SegmenterModel::forward(const Tensor& image) const {
  const auto& c = config_;
  Tensor quarter = decoder_forward(encoder_forward(image), prompt_default());
  const std::size_t m = c.mask_size();
  Tensor full = resize(reshape(quarter, {1, m, m}), c.mask_scale, ResizeMode::bilinear);
  return reshape(full, {c.image_size, c.image_size});
}

ParamCounts SegmenterModel::count_params() const {
  ParamCounts counts;
  for (const auto& e : registry_.entries()) {
    const std::size_t n = e.tensor.numel();
    counts.total += n;
    if (e.trainable) counts.trainable += n;
    counts.by_group[static_cast<std::size_t>(e.group)] += n;
  }
  return counts;
}

ParamPartition SegmenterModel::param_partition() const {
  ParamPartition part;
  for (const auto& e : registry_.entries()) {
    const ParamGroup expected = classify_param_name(e.name);
    const bool trainable = expected != ParamGroup::encoder_base;
    if (expected != e.group || trainable != e.trainable || e.tensor.requires_grad() != trainable) {
      throw RegistryError("parameter '" + e.name + "' violates the freeze policy");
    }
    (trainable ? part.trainable : part.frozen).push_back(e.name);
  }
  return part;
}

void SegmenterModel::copy_shared_params(const SegmenterModel& other) {
  for (auto& e : registry_.entries()) {
    if (!other.registry().contains(e.name)) continue;
    const Tensor& src = other.registry().at(e.name).tensor;
    if (src.shape() != e.tensor.shape()) throw RegistryError("shape mismatch copying '" + e.name + "'");
    std::copy(src.values().begin(), src.values().end(), e.tensor.mutable_values().begin());
  }
}

// ---------------------------------------------------------------------------

ParamCounts expected_param_counts(const ModelConfig& c) {
  c.validate();
  const std::size_t e = c.embed_dim, d = c.decoder_dim, g = c.grid(), r = c.lora_rank, p = c.patch;
  const std::size_t hidden = e * c.mlp_ratio;
  const std::size_t attn_base = 4 * (e * e + e);
  const std::size_t enc_block = 4 * e + attn_base + (e * hidden + hidden) + (hidden * e + e);
  const std::size_t encoder_base = (3 * p * p * e + e) + g * g * e + c.depth * enc_block + (e * d + d) + 2 * d;
  const std::size_t encoder_bypass = c.encoder_bypass ? c.depth * 2 * (e * r + r * e) : 0;

  const std::size_t dec_attn = 4 * (d * d + d);
  const std::size_t dec_block =
      3 * dec_attn + 8 * d + (d * c.decoder_mlp_dim + c.decoder_mlp_dim) + (c.decoder_mlp_dim * d + d);
  const std::size_t dec_bypass = c.decoder_bypass ? 3 * 2 * (d * r + r * d) : 0;
  std::size_t upsample = 0;
  std::size_t channels = d;
  for (std::size_t s = 0; s < c.upsample_stages(); ++s) {
    upsample += channels * 4 * (channels / 2) + 4 * (channels / 2);
    channels /= 2;
  }
  const std::size_t hyper = 2 * (d * d + d) + (d * channels + channels);
  const std::size_t decoder = d + c.decoder_blocks * (dec_block + dec_bypass) + upsample + hyper;

  ParamCounts counts;
  counts.by_group = {encoder_base, encoder_bypass, d, decoder};
  counts.total = encoder_base + encoder_bypass + d + decoder;
  counts.trainable = encoder_bypass + d + decoder;
  return counts;
}

}  // namespace skim
