// SPDX-License-Identifier: Apache-2.0
#include "skim/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace skim {

namespace fs = std::filesystem;

ParseError::ParseError(const std::string& file, std::size_t offset, const std::string& what)
    : std::runtime_error(file + ": byte " + std::to_string(offset) + ": " + what), file_(file), offset_(offset) {}

std::size_t Mask::area() const {
  return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

void Sample::validate() const {
  if (image.height == 0 || image.width == 0) throw InputError("sample image is empty");
  if (image.data.size() != 3 * image.height * image.width) throw InputError("sample image buffer size mismatch");
  if (mask.height != image.height || mask.width != image.width || mask.data.size() != mask.height * mask.width) {
    throw InputError("sample mask shape does not match image");
  }
  for (auto v : mask.data) {
    if (v > 1) throw InputError("sample mask must be binary");
  }
}

Tensor image_tensor(const Image& image) { return Tensor::from_values({3, image.height, image.width}, image.data); }

Tensor mask_tensor(const Mask& mask) {
  return Tensor::from_values({mask.height, mask.width}, std::vector<double>(mask.data.begin(), mask.data.end()));
}

// ---------------------------------------------------------------------------
// resizing and letterbox

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == image.height && width == image.width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  auto source = [](std::size_t d, double s, std::size_t in, std::size_t& i0, std::size_t& i1, double& frac) {
    double pos = (static_cast<double>(d) + 0.5) * s - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(pos));
    i1 = std::min(i0 + 1, in - 1);
    frac = pos - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    source(y, sy, image.height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      source(x, sx, image.width, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(c, y0, x0) * (1 - fx) + image.at(c, y0, x1) * fx;
        const double bottom = image.at(c, y1, x0) * (1 - fx) + image.at(c, y1, x1) * fx;
        out.at(c, y, x) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

namespace {

std::size_t nearest_source(std::size_t d, std::size_t in, std::size_t out) {
  return std::min(in - 1, (2 * d + 1) * in / (2 * out));
}

template <typename T>
std::vector<T> resize_nearest_plane(std::span<const T> src, std::size_t in_h, std::size_t in_w, std::size_t h,
                                    std::size_t w) {
  std::vector<T> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = nearest_source(y, in_h, h);
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = src[sy * in_w + nearest_source(x, in_w, w)];
  }
  return out;
}

}  // namespace

Mask resize_nearest(const Mask& mask, std::size_t height, std::size_t width) {
  if (height == mask.height && width == mask.width) return mask;
  Mask out(height, width);
  out.data = resize_nearest_plane<std::uint8_t>(mask.data, mask.height, mask.width, height, width);
  return out;
}

LetterboxGeometry letterbox_geometry(std::size_t height, std::size_t width, std::size_t target) {
  if (target == 0) throw InputError("letterbox target must be positive");
  if (height == 0 || width == 0) throw InputError("letterbox of an empty image");
  LetterboxGeometry g;
  g.original_h = height;
  g.original_w = width;
  g.target = target;
  const double t = static_cast<double>(target);
  g.scale = std::min({1.0, t / static_cast<double>(height), t / static_cast<double>(width)});
  auto fit = [&](std::size_t extent) {
    const auto scaled = static_cast<std::size_t>(std::lround(static_cast<double>(extent) * g.scale));
    return std::clamp<std::size_t>(scaled, 1, target);
  };
  const std::size_t ch = g.scale == 1.0 ? height : fit(height);
  const std::size_t cw = g.scale == 1.0 ? width : fit(width);
  g.pad_top = (target - ch) / 2;
  g.pad_bottom = target - ch - g.pad_top;
  g.pad_left = (target - cw) / 2;
  g.pad_right = target - cw - g.pad_left;
  return g;
}

std::pair<Sample, LetterboxGeometry> letterbox(const Sample& sample, std::size_t target) {
  sample.validate();
  const LetterboxGeometry g = letterbox_geometry(sample.image.height, sample.image.width, target);
  const std::size_t ch = g.content_h(), cw = g.content_w();
  const Image content = resize_bilinear(sample.image, ch, cw);
  const Mask content_mask = resize_nearest(sample.mask, ch, cw);
  Sample out;
  out.domain = sample.domain;
  out.kinds = sample.kinds;
  out.image = Image(target, target, kLetterboxImagePad);
  out.mask = Mask(target, target);
  for (std::size_t y = 0; y < ch; ++y) {
    for (std::size_t x = 0; x < cw; ++x) {
      for (std::size_t c = 0; c < 3; ++c) out.image.at(c, y + g.pad_top, x + g.pad_left) = content.at(c, y, x);
      out.mask.at(y + g.pad_top, x + g.pad_left) = content_mask.at(y, x);
    }
  }
  return {std::move(out), g};
}

std::vector<double> invert_letterbox(std::span<const double> map, const LetterboxGeometry& g) {
  if (map.size() != g.target * g.target) {
    throw ShapeError("invert_letterbox: map has " + std::to_string(map.size()) + " values, geometry expects " +
                     std::to_string(g.target) + "x" + std::to_string(g.target));
  }
  const std::size_t ch = g.content_h(), cw = g.content_w();
  std::vector<double> content(ch * cw);
  for (std::size_t y = 0; y < ch; ++y)
    for (std::size_t x = 0; x < cw; ++x) content[y * cw + x] = map[(y + g.pad_top) * g.target + x + g.pad_left];
  if (ch == g.original_h && cw == g.original_w) return content;
  return resize_nearest_plane<double>(content, ch, cw, g.original_h, g.original_w);
}

// ---------------------------------------------------------------------------
// augmentation

Image hflip(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, y, image.width - 1 - x);
  return out;
}

Image vflip(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < image.height; ++y)
      for (std::size_t x = 0; x < image.width; ++x) out.at(c, y, x) = image.at(c, image.height - 1 - y, x);
  return out;
}

Image rot90(const Image& image) {
  Image out(image.width, image.height);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < out.height; ++y)
      for (std::size_t x = 0; x < out.width; ++x) out.at(c, y, x) = image.at(c, image.height - 1 - x, y);
  return out;
}

Mask hflip(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) out.at(y, x) = mask.at(y, mask.width - 1 - x);
  return out;
}

Mask vflip(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x) out.at(y, x) = mask.at(mask.height - 1 - y, x);
  return out;
}

Mask rot90(const Mask& mask) {
  Mask out(mask.width, mask.height);
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = mask.at(mask.height - 1 - x, y);
  return out;
}

Sample augment(const Sample& sample, Rng& rng, const AugmentConfig& cfg, AugmentTrace* trace) {
  AugmentTrace t;
  Sample out = sample;
  if ((t.hflip = rng.bernoulli(cfg.p_hflip))) {
    out.image = hflip(out.image);
    out.mask = hflip(out.mask);
  }
  if ((t.vflip = rng.bernoulli(cfg.p_vflip))) {
    out.image = vflip(out.image);
    out.mask = vflip(out.mask);
  }
  if ((t.rot90 = rng.bernoulli(cfg.p_rot90))) {
    out.image = rot90(out.image);
    out.mask = rot90(out.mask);
  }
  if (rng.bernoulli(cfg.p_brightness)) {
    t.brightness = rng.uniform(-cfg.brightness_range, cfg.brightness_range);
    for (double& v : out.image.data) v += *t.brightness;
  }
  if (rng.bernoulli(cfg.p_contrast)) {
    t.contrast = rng.uniform(1.0 - cfg.contrast_range, 1.0 + cfg.contrast_range);
    double mean = 0;
    for (double v : out.image.data) mean += v;
    mean /= static_cast<double>(out.image.data.size());
    for (double& v : out.image.data) v = mean + *t.contrast * (v - mean);
  }
  if (t.brightness || t.contrast) {
    for (double& v : out.image.data) v = std::clamp(v, 0.0, 1.0);
  }
  if (trace) *trace = t;
  return out;
}

// ---------------------------------------------------------------------------
// synthetic domains

void DomainSpec::validate() const {
  auto require = [&](bool ok, const std::string& what) {
    if (!ok) throw DataConfigError("domain " + domain_id + ": " + what);
  };
  require(!domain_id.empty(), "empty domain id");
  require(height >= 16 && width >= 16 && height <= 4096 && width <= 4096, "image size must lie in [16, 4096]");
  require(texture.weave_period >= 3 && texture.weave_period <= 64, "weave period must lie in [3, 64]");
  require(texture.yarn_contrast >= 0 && texture.yarn_contrast <= 1, "yarn contrast must lie in [0, 1]");
  require(std::abs(texture.orientation) <= std::numbers::pi, "orientation must lie in [-pi, pi]");
  for (double c : texture.color) require(c >= 0 && c <= 1, "texture color must lie in [0, 1]");
  double total = 0;
  for (double p : defect_mix) {
    require(p >= 0, "defect probabilities must be non-negative");
    total += p;
  }
  require(std::abs(total - 1.0) < 1e-9, "defect probabilities must sum to 1");
  require(max_defects >= 1 && max_defects <= 8, "max_defects must lie in [1, 8]");
  require(std::abs(imaging.brightness) <= 0.5, "brightness offset must lie in [-0.5, 0.5]");
  require(imaging.contrast_gain >= 0.25 && imaging.contrast_gain <= 4, "contrast gain must lie in [0.25, 4]");
  require(imaging.noise_std >= 0 && imaging.noise_std <= 0.5, "noise std must lie in [0, 0.5]");
}

nlohmann::json DomainSpec::to_json() const {
  nlohmann::json mix = nlohmann::json::object();
  for (std::size_t i = 0; i < kDefectKinds.size(); ++i) mix[kDefectKinds[i]] = defect_mix[i];
  return {
      {"domain", domain_id},
      {"height", height},
      {"width", width},
      {"texture",
       {{"weave_period", texture.weave_period},
        {"yarn_contrast", texture.yarn_contrast},
        {"orientation", texture.orientation},
        {"color", texture.color}}},
      {"defect_mix", mix},
      {"max_defects", max_defects},
      {"imaging",
       {{"brightness", imaging.brightness},
        {"contrast_gain", imaging.contrast_gain},
        {"noise_std", imaging.noise_std}}},
      {"seed", seed},
  };
}

DomainSpec DomainSpec::from_json(const nlohmann::json& j) {
  DomainSpec s;
  try {
    s.domain_id = j.at("domain");
    s.height = j.at("height");
    s.width = j.at("width");
    const auto& t = j.at("texture");
    s.texture.weave_period = t.at("weave_period");
    s.texture.yarn_contrast = t.at("yarn_contrast");
    s.texture.orientation = t.at("orientation");
    s.texture.color = t.at("color").get<std::array<double, 3>>();
    const auto& mix = j.at("defect_mix");
    for (std::size_t i = 0; i < kDefectKinds.size(); ++i) s.defect_mix[i] = mix.value(kDefectKinds[i], 0.0);
    s.max_defects = j.value("max_defects", std::size_t{2});
    const auto& im = j.at("imaging");
    s.imaging.brightness = im.at("brightness");
    s.imaging.contrast_gain = im.at("contrast_gain");
    s.imaging.noise_std = im.at("noise_std");
    s.seed = j.value("seed", std::uint64_t{1});
  } catch (const nlohmann::json::exception& e) {
    throw DataConfigError(std::string("invalid domain spec: ") + e.what());
  }
  s.validate();
  return s;
}

DomainSpec DomainSpec::builtin(const std::string& id, std::uint64_t seed) {
  DomainSpec s;
  s.domain_id = id;
  s.seed = seed;
  if (id == "D1") {
    s.texture = {6.0, 0.25, 0.0, {0.80, 0.77, 0.70}};
    s.defect_mix = {1.0, 0.0, 0.0, 0.0};
    s.imaging = {0.0, 1.0, 0.02};
  } else if (id == "D2") {
    s.height = 96;
    s.width = 160;
    s.texture = {4.0, 0.45, 0.0, {0.45, 0.45, 0.47}};
    s.defect_mix = {0.0, 0.7, 0.3, 0.0};
    s.imaging = {-0.05, 1.2, 0.04};
  } else if (id == "D3") {
    s.height = 112;
    s.width = 112;
    s.texture = {10.0, 0.35, 0.5, {0.45, 0.52, 0.68}};
    s.defect_mix = {0.4, 0.2, 0.2, 0.2};
    s.imaging = {0.08, 0.8, 0.06};
  } else {
    throw DataConfigError("unknown built-in domain '" + id + "' (expected D1, D2 or D3)");
  }
  s.validate();
  return s;
}

std::size_t DomainSpec::builtin_size(const std::string& id) {
  if (id == "D1") return 40;
  if (id == "D2") return 20;
  if (id == "D3") return 150;
  throw DataConfigError("unknown built-in domain '" + id + "'");
}

void quantize_8bit(Image& image) {
  for (double& v : image.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

namespace {

struct Canvas {
  Image image;
  Mask mask;
};

double side(const DomainSpec& spec) { return static_cast<double>(std::min(spec.height, spec.width)); }

template <typename Inside, typename Paint>
void paint_region(Canvas& canvas, Inside inside, Paint paint) {
  for (std::size_t y = 0; y < canvas.mask.height; ++y)
    for (std::size_t x = 0; x < canvas.mask.width; ++x) {
      if (!inside(static_cast<double>(x), static_cast<double>(y))) continue;
      canvas.mask.at(y, x) = 1;
      for (std::size_t c = 0; c < 3; ++c) {
        double& v = canvas.image.at(c, y, x);
        v = paint(c, v);
      }
    }
}

void draw_stain(Canvas& cv, const DomainSpec& spec, Rng& rng) {
  const double s = side(spec);
  const double cx = rng.uniform(0.15, 0.85) * static_cast<double>(spec.width);
  const double cy = rng.uniform(0.15, 0.85) * static_cast<double>(spec.height);
  const double radius = s * rng.uniform(0.08, 0.17);
  const double aspect = rng.uniform(0.7, 1.3);
  const double a2 = rng.uniform(0.0, 0.2), a3 = rng.uniform(0.0, 0.12);
  const double p2 = rng.uniform(0.0, 2 * std::numbers::pi), p3 = rng.uniform(0.0, 2 * std::numbers::pi);
  const double strength = rng.uniform(0.35, 0.55);
  const double shade = rng.uniform(0.8, 1.2);
  const std::array<double, 3> tint{0.38 * shade, 0.26 * shade, 0.14 * shade};
  paint_region(
      cv,
      [&](double x, double y) {
        const double dx = (x - cx) / aspect, dy = (y - cy) * aspect;
        const double theta = std::atan2(dy, dx);
        const double r = radius * (1 + a2 * std::sin(2 * theta + p2) + a3 * std::sin(3 * theta + p3));
        return dx * dx + dy * dy < r * r;
      },
      [&](std::size_t c, double v) { return v * (1 - strength) + tint[c] * strength; });
}

void draw_broken_yarn(Canvas& cv, const DomainSpec& spec, Rng& rng) {
  const bool horizontal = rng.bernoulli(0.5);
  const double thickness = std::max(2.0, std::round(side(spec) / 128.0 * static_cast<double>(2 + rng.below(3))));
  const double extent = static_cast<double>(horizontal ? spec.height : spec.width);
  const double start = std::floor(rng.uniform(0.1, 0.9) * (extent - thickness));
  const bool dark = rng.bernoulli(0.7);
  const double factor = dark ? rng.uniform(0.35, 0.6) : rng.uniform(1.3, 1.6);
  paint_region(
      cv,
      [&](double x, double y) {
        const double pos = horizontal ? y : x;
        return pos >= start && pos < start + thickness;
      },
      [&](std::size_t, double v) { return std::min(1.0, v * factor); });
}

void draw_hole(Canvas& cv, const DomainSpec& spec, Rng& rng) {
  const double s = side(spec);
  const double cx = rng.uniform(0.1, 0.9) * static_cast<double>(spec.width);
  const double cy = rng.uniform(0.1, 0.9) * static_cast<double>(spec.height);
  const double a = s * rng.uniform(0.03, 0.07);
  const double b = a * rng.uniform(0.6, 1.4);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double value = rng.uniform(0.05, 0.15);
  const double ca = std::cos(angle), sa = std::sin(angle);
  paint_region(
      cv,
      [&](double x, double y) {
        const double u = ((x - cx) * ca + (y - cy) * sa) / a;
        const double w = (-(x - cx) * sa + (y - cy) * ca) / b;
        return u * u + w * w < 1.0;
      },
      [&](std::size_t, double) { return value; });
}

void draw_fluff(Canvas& cv, const DomainSpec& spec, Rng& rng) {
  const double s = side(spec);
  const double cx = rng.uniform(0.1, 0.9) * static_cast<double>(spec.width);
  const double cy = rng.uniform(0.1, 0.9) * static_cast<double>(spec.height);
  const double spread = s * 0.05;
  const std::size_t count = 6 + rng.below(9);
  std::vector<std::array<double, 3>> dots;  // x, y, radius
  for (std::size_t i = 0; i < count; ++i) {
    const double r = spread * std::sqrt(rng.uniform());
    const double t = rng.uniform(0.0, 2 * std::numbers::pi);
    dots.push_back({cx + r * std::cos(t), cy + r * std::sin(t), rng.uniform(1.0, 2.5)});
  }
  const double value = rng.uniform(0.85, 1.0);
  paint_region(
      cv,
      [&](double x, double y) {
        return std::any_of(dots.begin(), dots.end(), [&](const auto& d) {
          return (x - d[0]) * (x - d[0]) + (y - d[1]) * (y - d[1]) < d[2] * d[2];
        });
      },
      [&](std::size_t, double) { return value; });
}

Image weave_background(const DomainSpec& spec, Rng& rng) {
  const auto& tx = spec.texture;
  Image img(spec.height, spec.width);
  const double pu = rng.uniform(0.0, tx.weave_period), pv = rng.uniform(0.0, tx.weave_period);
  const double theta = tx.orientation + rng.uniform(-0.05, 0.05);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double k = 2 * std::numbers::pi / tx.weave_period;
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      const double u = fx * ct + fy * st, v = -fx * st + fy * ct;
      const double warp = 0.5 + 0.5 * std::sin(k * (u + pu));
      const double weft = 0.5 + 0.5 * std::sin(k * (v + pv));
      // Checkerboard-like interlacing: warp dominates where weft is low.
      const double t = 0.5 * (warp + weft) + 0.25 * (warp - weft) * std::sin(k * 0.5 * (u + v));
      const double noise = 1 + spec.imaging.noise_std * rng.normal();
      for (std::size_t c = 0; c < 3; ++c) {
        img.at(c, y, x) = tx.color[c] * (1 - tx.yarn_contrast / 2 + tx.yarn_contrast * t) * noise;
      }
    }
  return img;
}

}  // namespace

Sample generate_sample(const DomainSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(spec.seed + index);
  const Image background = weave_background(spec, rng);
  const double pixels = static_cast<double>(spec.height * spec.width);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Canvas cv{background, Mask(spec.height, spec.width)};
    const std::size_t n_defects = 1 + rng.below(spec.max_defects);
    std::vector<std::string> kinds;
    for (std::size_t d = 0; d < n_defects; ++d) {
      double u = rng.uniform();
      std::size_t kind = 0;
      while (kind + 1 < kDefectKinds.size() && u >= spec.defect_mix[kind]) u -= spec.defect_mix[kind++];
      while (spec.defect_mix[kind] == 0.0) kind = (kind + kDefectKinds.size() - 1) % kDefectKinds.size();
      switch (kind) {
        case 0:
          draw_stain(cv, spec, rng);
          break;
        case 1:
          draw_broken_yarn(cv, spec, rng);
          break;
        case 2:
          draw_hole(cv, spec, rng);
          break;
        default:
          draw_fluff(cv, spec, rng);
          break;
      }
      if (std::find(kinds.begin(), kinds.end(), kDefectKinds[kind]) == kinds.end()) kinds.emplace_back(kDefectKinds[kind]);
    }
    const double area = static_cast<double>(cv.mask.area()) / pixels;
    if (area < kMinDefectArea || area > kMaxDefectArea) continue;

    for (double& v : cv.image.data) {
      v = spec.imaging.contrast_gain * (v - 0.5) + 0.5 + spec.imaging.brightness;
    }
    quantize_8bit(cv.image);
    std::sort(kinds.begin(), kinds.end());
    return Sample{std::move(cv.image), std::move(cv.mask), spec.domain_id, std::move(kinds)};
  }
  throw DataConfigError("domain " + spec.domain_id + ": could not place defects within the area band");
}

std::vector<double> intensity_histogram(const std::vector<Image>& images, std::size_t bins) {
  if (bins == 0) throw InputError("histogram needs at least one bin");
  std::vector<double> hist(bins, 0.0);
  double total = 0;
  for (const auto& img : images) {
    const std::size_t plane = img.height * img.width;
    for (std::size_t i = 0; i < plane; ++i) {
      const double gray = (img.data[i] + img.data[plane + i] + img.data[2 * plane + i]) / 3.0;
      const auto b = std::min(bins - 1, static_cast<std::size_t>(gray * static_cast<double>(bins)));
      hist[b] += 1;
      total += 1;
    }
  }
  if (total == 0) throw InputError("histogram of no pixels");
  for (double& h : hist) h /= total;
  return hist;
}

double histogram_distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("histograms have different bin counts");
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
  return d / 2;
}

// ---------------------------------------------------------------------------
// manifests

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
    case Split::none:
      return "unassigned";
  }
  return "unassigned";
}

Split split_from_string(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  if (text == "unassigned") return Split::none;
  throw InputError("unknown split '" + text + "'");
}

std::size_t DatasetManifest::count(Split split) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [&](const ManifestEntry& e) { return e.split == split; }));
}

DatasetManifest DatasetManifest::subset(Split split) const {
  DatasetManifest out = *this;
  if (split == Split::none) return out;
  out.samples.clear();
  for (const auto& e : samples) {
    if (e.split == split) out.samples.push_back(e);
  }
  return out;
}

Sample DatasetManifest::load(std::size_t index) const {
  const ManifestEntry& e = samples.at(index);
  Sample s{read_ppm(root / e.image), read_pgm(root / e.mask), e.domain, e.kinds};
  if (s.image.height != s.mask.height || s.image.width != s.mask.width) {
    throw ParseError((root / e.mask).string(), 0, "mask size does not match image " + e.image);
  }
  return s;
}

std::vector<Sample> DatasetManifest::load_all() const {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(load(i));
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : samples) {
    list.push_back(
        {{"image", e.image}, {"mask", e.mask}, {"domain", e.domain}, {"kinds", e.kinds}, {"split", to_string(e.split)}});
  }
  return {{"spec", spec}, {"seed", seed}, {"samples", std::move(list)}};
}

void DatasetManifest::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  out << to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

DatasetManifest DatasetManifest::read(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string(), e.byte, "malformed manifest");
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.spec = j.at("spec");
    m.seed = j.at("seed");
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      e.image = s.at("image");
      e.mask = s.at("mask");
      e.domain = s.at("domain");
      e.kinds = s.at("kinds").get<std::vector<std::string>>();
      e.split = split_from_string(s.value("split", std::string("unassigned")));
      m.samples.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), 0, std::string("manifest schema: ") + e.what());
  } catch (const InputError& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  return m;
}

DatasetManifest synth_generate(const DomainSpec& spec, std::size_t n, const fs::path& dir) {
  spec.validate();
  if (n == 0) throw InputError("generate needs at least one sample");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  DatasetManifest m;
  m.root = dir;
  m.spec = spec.to_json();
  m.seed = spec.seed;
  for (std::size_t i = 0; i < n; ++i) {
    const Sample s = generate_sample(spec, i);
    char name[32];
    std::snprintf(name, sizeof name, "%04zu", i);
    ManifestEntry e;
    e.image = std::string("images/") + name + ".ppm";
    e.mask = std::string("masks/") + name + ".pgm";
    e.domain = s.domain;
    e.kinds = s.kinds;
    write_ppm(dir / e.image, s.image);
    write_pgm(dir / e.mask, s.mask);
    m.samples.push_back(std::move(e));
  }
  m.save(dir / "manifest.json");
  return m;
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

DatasetManifest split_dataset(const DatasetManifest& manifest, const SplitFractions& f, std::uint64_t seed) {
  if (manifest.samples.empty()) throw InputError("cannot split an empty manifest");
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw InputError("split fractions must be non-negative and sum to 1");
  }
  const std::size_t n = manifest.size();
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.val + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * f.test + 1e-9));
  DatasetManifest out = manifest;
  const auto order = shuffled_indices(n, seed);
  for (std::size_t r = 0; r < n; ++r) {
    Split s = Split::train;
    if (r >= n - n_val - n_test) s = r < n - n_test ? Split::val : Split::test;
    out.samples[order[r]].split = s;
  }
  return out;
}

DatasetManifest few_shot_sample(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (manifest.samples[i].split == Split::train) train.push_back(i);
  }
  if (k == 0 || k > train.size()) {
    throw InputError("few-shot k=" + std::to_string(k) + " must lie in [1, " + std::to_string(train.size()) + "]");
  }
  const auto order = shuffled_indices(train.size(), seed);
  std::vector<bool> keep(manifest.size(), true);
  for (std::size_t i : train) keep[i] = false;
  for (std::size_t r = 0; r < k; ++r) keep[train[order[r]]] = true;
  DatasetManifest out = manifest;
  out.samples.clear();
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (keep[i]) out.samples.push_back(manifest.samples[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// P6 / P5

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string(), 0, "cannot open file");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct HeaderReader {
  const std::string& text;
  const std::string file;
  std::size_t pos = 0;
  std::size_t token_start = 0;

  void skip_space() {
    while (pos < text.size()) {
      if (text[pos] == '#') {
        while (pos < text.size() && text[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(text[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space();
    const std::size_t start = token_start = pos;
    std::size_t v = 0;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
      v = v * 10 + static_cast<std::size_t>(text[pos] - '0');
      if (v > (1u << 20)) throw ParseError(file, start, std::string(what) + " is too large");
      ++pos;
    }
    if (pos == start) throw ParseError(file, start, std::string("expected ") + what);
    return v;
  }
};

/// Parses "Px <w> <h> 255" and returns the payload offset.
std::size_t parse_header(const std::string& text, const std::string& file, const char* magic, std::size_t& h,
                         std::size_t& w) {
  if (text.size() < 2 || text.compare(0, 2, magic) != 0) throw ParseError(file, 0, std::string("expected magic ") + magic);
  HeaderReader r{text, file, 2};
  w = r.number("width");
  h = r.number("height");
  if (r.number("maxval") != 255) throw ParseError(file, r.token_start, "only maxval 255 is supported");
  if (w == 0 || h == 0) throw ParseError(file, 2, "zero image dimension");
  if (r.pos >= text.size() || !std::isspace(static_cast<unsigned char>(text[r.pos]))) {
    throw ParseError(file, r.pos, "expected whitespace before pixel data");
  }
  return r.pos + 1;
}

void write_bytes(const fs::path& path, const std::string& header, const std::vector<std::uint8_t>& payload) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << header;
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, const Image& image) {
  const std::size_t plane = image.height * image.width;
  std::vector<std::uint8_t> bytes(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      bytes[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[c * plane + i], 0.0, 1.0) * 255.0));
    }
  write_bytes(path, "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n", bytes);
}

Image read_ppm(const fs::path& path) {
  const std::string text = read_file(path);
  std::size_t h = 0, w = 0;
  const std::size_t start = parse_header(text, path.string(), "P6", h, w);
  const std::size_t plane = h * w;
  if (text.size() < start + 3 * plane) throw ParseError(path.string(), text.size(), "truncated pixel data");
  Image img(h, w);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      img.data[c * plane + i] = static_cast<double>(static_cast<unsigned char>(text[start + 3 * i + c])) / 255.0;
    }
  return img;
}

void write_pgm(const fs::path& path, const Mask& mask) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_bytes(path, "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n", bytes);
}

Mask read_pgm(const fs::path& path) {
  const std::string text = read_file(path);
  std::size_t h = 0, w = 0;
  const std::size_t start = parse_header(text, path.string(), "P5", h, w);
  if (text.size() < start + h * w) throw ParseError(path.string(), text.size(), "truncated pixel data");
  Mask m(h, w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const auto b = static_cast<unsigned char>(text[start + i]);
    if (b != 0 && b != 255) throw ParseError(path.string(), start + i, "mask byte must be 0 or 255");
    m.data[i] = b ? 1 : 0;
  }
  return m;
}

}  // namespace skim
