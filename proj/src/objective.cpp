// SPDX-License-Identifier: Apache-2.0
#include "skim/objective.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "skim/ops.hpp"

namespace skim {

namespace {

void check_pair(const Tensor& p, const Tensor& y, const char* what) {
  if (p.shape() != y.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + to_string(p.shape()) + " and target " +
                     to_string(y.shape()) + " differ");
  }
  for (double v : y.values()) {
    if (v != 0.0 && v != 1.0) throw InputError(std::string(what) + ": target mask must be binary");
  }
}

double ratio_or_policy(double num, double den, const Confusion& c) {
  if (den > 0) return num / den;
  return (c.fp == 0 && c.fn == 0) ? 1.0 : 0.0;
}

}  // namespace

void LossConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw InputError("loss alpha must lie in [0, 1]");
  if (!(eps > 0.0)) throw InputError("dice eps must be positive");
}

Tensor bce_loss(const Tensor& p, const Tensor& y) {
  check_pair(p, y, "bce_loss");
  const auto pv = p.values();
  const auto yv = y.values();
  const std::size_t n = pv.size();
  if (n == 0) throw InputError("bce_loss: empty map");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(pv[i], kBceClamp, 1.0 - kBceClamp);
    total += yv[i] * std::log(pc) + (1.0 - yv[i]) * std::log(1.0 - pc);
  }
  return Tensor::make_op({1}, {-total / static_cast<double>(n)}, {p, y},
                         [p, y, n](std::span<const double> g, std::span<GradSlot> in) {
                           if (!in[0].active()) return;
                           const auto pv = p.values();
                           const auto yv = y.values();
                           const double s = -g[0] / static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                             if (pv[i] < kBceClamp || pv[i] > 1.0 - kBceClamp) continue;
                             in[0].grad[i] += s * (yv[i] / pv[i] - (1.0 - yv[i]) / (1.0 - pv[i]));
                           }
                         });
}

Tensor dice_loss(const Tensor& p, const Tensor& y, double eps) {
  check_pair(p, y, "dice_loss");
  if (!(eps > 0.0)) throw InputError("dice eps must be positive");
  const auto pv = p.values();
  const auto yv = y.values();
  double inter = 0, denom = eps;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    inter += yv[i] * pv[i];
    denom += yv[i] * yv[i] + pv[i] * pv[i];
  }
  const double numer = 2.0 * inter + eps;
  return Tensor::make_op({1}, {1.0 - numer / denom}, {p, y},
                         [p, y, numer, denom](std::span<const double> g, std::span<GradSlot> in) {
                           if (!in[0].active()) return;
                           const auto pv = p.values();
                           const auto yv = y.values();
                           const double s = -g[0] / (denom * denom);
                           for (std::size_t i = 0; i < pv.size(); ++i) {
                             in[0].grad[i] += s * (2.0 * yv[i] * denom - numer * 2.0 * pv[i]);
                           }
                         });
}

Tensor composite_loss(const Tensor& p, const Tensor& y, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.alpha == 1.0) return bce_loss(p, y);
  if (cfg.alpha == 0.0) return dice_loss(p, y, cfg.eps);
  return add(scale(bce_loss(p, y), cfg.alpha), scale(dice_loss(p, y, cfg.eps), 1.0 - cfg.alpha));
}

Tensor composite_loss(std::span<const Tensor> p, std::span<const Tensor> y, const LossConfig& cfg) {
  if (p.empty() || p.size() != y.size()) throw InputError("composite_loss: batch must be nonempty and paired");
  Tensor total = composite_loss(p[0], y[0], cfg);
  for (std::size_t i = 1; i < p.size(); ++i) total = add(total, composite_loss(p[i], y[i], cfg));
  return scale(total, 1.0 / static_cast<double>(p.size()));
}

Confusion confusion(std::span<const double> p, std::span<const double> y, double threshold) {
  if (p.size() != y.size()) throw ShapeError("confusion: prediction and target sizes differ");
  if (!(threshold > 0.0 && threshold < 1.0)) throw InputError("confusion threshold must lie in (0, 1)");
  Confusion c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (y[i] != 0.0 && y[i] != 1.0) throw InputError("confusion: target mask must be binary");
    const bool pred = p[i] >= threshold;
    const bool truth = y[i] == 1.0;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

Confusion confusion(const Tensor& p, const Tensor& y, double threshold) {
  if (p.shape() != y.shape()) throw ShapeError("confusion: shapes " + to_string(p.shape()) + " and " + to_string(y.shape()));
  return confusion(p.values(), y.values(), threshold);
}

Metrics metrics_from_confusion(const Confusion& c) {
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn),
               tn = static_cast<double>(c.tn);
  Metrics m;
  m.accuracy = ratio_or_policy(tp + tn, tp + tn + fp + fn, c);
  m.recall = ratio_or_policy(tp, tp + fn, c);
  m.precision = ratio_or_policy(tp, tp + fp, c);
  m.dice = ratio_or_policy(2 * tp, 2 * tp + fp + fn, c);
  m.iou = ratio_or_policy(tp, tp + fp + fn, c);
  return m;
}

nlohmann::json metrics_to_json(const Metrics& m) {
  return {{"accuracy", m.accuracy}, {"recall", m.recall}, {"precision", m.precision}, {"dice", m.dice}, {"iou", m.iou}};
}

Metrics metrics_from_json(const nlohmann::json& j) {
  Metrics m;
  m.accuracy = j.at("accuracy");
  m.recall = j.at("recall");
  m.precision = j.at("precision");
  m.dice = j.at("dice");
  m.iou = j.at("iou");
  return m;
}

MetricsReport aggregate_report(std::vector<Metrics> per_image, std::size_t params_total, std::size_t params_trainable) {
  if (per_image.empty()) throw InputError("aggregate_report: no images");
  MetricsReport r;
  Metrics sum;
  for (const auto& m : per_image) {
    sum.accuracy += m.accuracy;
    sum.recall += m.recall;
    sum.precision += m.precision;
    sum.dice += m.dice;
    sum.iou += m.iou;
  }
  const double n = static_cast<double>(per_image.size());
  r.aggregate = Metrics{sum.accuracy / n, sum.recall / n, sum.precision / n, sum.dice / n, sum.iou / n};
  r.per_image = std::move(per_image);
  r.params_total = params_total;
  r.params_trainable = params_trainable;
  return r;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    nlohmann::json row = metrics_to_json(per_image[i]);
    if (i < image_names.size()) row["image"] = image_names[i];
    per.push_back(std::move(row));
  }
  return {
      {"config", config},
      {"seed", seed},
      {"dataset", dataset},
      {"n_images", n_images()},
      {"per_image", std::move(per)},
      {"aggregate", metrics_to_json(aggregate)},
      {"params", {{"total", params_total}, {"trainable", params_trainable}}},
      {"averaging", kAveraging},
      {"zero_division", kZeroDivisionPolicy},
  };
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.config = j.at("config");
  r.seed = j.at("seed");
  r.dataset = j.at("dataset");
  for (const auto& row : j.at("per_image")) {
    r.per_image.push_back(metrics_from_json(row));
    if (row.contains("image")) r.image_names.push_back(row.at("image"));
  }
  r.aggregate = metrics_from_json(j.at("aggregate"));
  r.params_total = j.at("params").at("total");
  r.params_trainable = j.at("params").at("trainable");
  if (j.at("n_images").get<std::size_t>() != r.per_image.size()) throw InputError("report n_images disagrees with rows");
  return r;
}

void MetricsReport::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing report " + path.string());
}

MetricsReport MetricsReport::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  return from_json(nlohmann::json::parse(in));
}

}  // namespace skim
