// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "skim/trainer.hpp"

namespace skim::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CommandError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelOptions {
  std::string preset = "toy-B";
  std::optional<std::size_t> rank;
  std::optional<std::size_t> image_size;

  void bind(CLI::App& cmd) {
    cmd.add_option("--preset", preset, "Model preset")->check(CLI::IsMember({"toy-B", "toy-L", "toy-H"}));
    cmd.add_option("--rank", rank, "Low-rank bypass dimension r");
    cmd.add_option("--image-size", image_size, "Square model input size");
  }

  ModelConfig resolve(std::uint64_t seed) const {
    ModelConfig c = ModelConfig::preset(preset);
    if (rank) c.lora_rank = *rank;
    if (image_size) c.image_size = *image_size;
    c.init_seed = seed;
    c.validate();
    return c;
  }
};

void bind_train_options(CLI::App& cmd, TrainConfig& t, bool& no_augment) {
  cmd.add_option("--lr", t.lr0, "Initial learning rate")->capture_default_str();
  cmd.add_option("--beta1", t.beta1, "AdamW beta1")->capture_default_str();
  cmd.add_option("--beta2", t.beta2, "AdamW beta2")->capture_default_str();
  cmd.add_option("--adam-eps", t.adam_eps, "AdamW epsilon")->capture_default_str();
  cmd.add_option("--weight-decay", t.weight_decay, "Decoupled weight decay")->capture_default_str();
  cmd.add_option("--batch", t.batch, "Effective batch size")->capture_default_str();
  cmd.add_option("--micro-batch", t.micro_batch, "Samples per backward pass")->capture_default_str();
  cmd.add_option("--epochs", t.epochs, "Epoch budget")->capture_default_str();
  cmd.add_option("--t0", t.t0, "First cosine period (epochs)")->capture_default_str();
  cmd.add_option("--t-mult", t.t_mult, "Cosine period multiplier")->capture_default_str();
  cmd.add_option("--eta-min-ratio", t.eta_min_ratio, "Minimum learning rate as a fraction of --lr")
      ->capture_default_str();
  cmd.add_option("--patience", t.patience, "Epochs without improvement before stopping")->capture_default_str();
  cmd.add_option("--target-dice", t.target_dice, "Stop once validation Dice reaches this value");
  cmd.add_option("--alpha", t.loss.alpha, "BCE weight in the composite loss")->capture_default_str();
  cmd.add_option("--threshold", t.threshold, "Binarization threshold")->capture_default_str();
  cmd.add_flag("--no-augment", no_augment, "Disable training augmentation");
}

DatasetManifest open_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  return DatasetManifest::read(file);
}

std::string dataset_name(const DatasetManifest& m) {
  if (m.spec.is_object() && m.spec.contains("domain")) return m.spec.at("domain").get<std::string>();
  return m.root.filename().string();
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CommandError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw CommandError("failed writing " + path.string());
}

void prepare_out(const fs::path& dir, const json& run_config) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw CommandError("cannot create output directory " + dir.string());
  write_json(dir / "run_config.json", run_config);
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

MetricsReport make_report(const SegmenterModel& model, const DatasetManifest& manifest, double threshold,
                          const json& config, std::uint64_t seed) {
  const auto samples = manifest.load_all();
  if (samples.empty()) throw CommandError("dataset " + manifest.root.string() + " has no images to evaluate");
  const ParamCounts counts = model.count_params();
  MetricsReport r = aggregate_report(evaluate(model, samples, threshold), counts.total, counts.trainable);
  r.config = config;
  r.seed = seed;
  r.dataset = dataset_name(manifest);
  for (const auto& e : manifest.samples) r.image_names.push_back(e.image);
  return r;
}

void print_metrics(std::ostream& out, const std::string& label, const MetricsReport& r) {
  const Metrics& a = r.aggregate;
  out << label << ": n=" << r.n_images() << " dice=" << fmt(a.dice) << " iou=" << fmt(a.iou)
      << " recall=" << fmt(a.recall) << " precision=" << fmt(a.precision) << " accuracy=" << fmt(a.accuracy) << '\n';
}

json argv_json(const std::vector<std::string>& args) { return json(args); }

// ---------------------------------------------------------------------------
// generate

struct GenerateArgs {
  std::string domain;
  std::string spec_file;
  std::optional<std::size_t> count;
  std::uint64_t seed = 1;
  std::string out;
};

int cmd_generate(const GenerateArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  DomainSpec spec;
  if (!a.spec_file.empty()) {
    std::ifstream in(a.spec_file, std::ios::binary);
    if (!in) throw CommandError("cannot open spec file " + a.spec_file);
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(a.spec_file, e.byte, "malformed domain spec");
    }
    try {
      spec = DomainSpec::from_json(j);
    } catch (const json::exception& e) {
      throw DataConfigError(a.spec_file + ": " + e.what());
    }
    spec.seed = a.seed;
  } else {
    spec = DomainSpec::builtin(a.domain, a.seed);
  }
  spec.validate();
  const std::size_t n = a.count.value_or(a.spec_file.empty() ? DomainSpec::builtin_size(a.domain) : 40);

  const fs::path dir = a.out;
  prepare_out(dir, {{"command", "generate"}, {"argv", argv_json(argv)}, {"spec", spec.to_json()}, {"n", n},
                    {"seed", a.seed}, {"splits", {0.6, 0.2, 0.2}}, {"out", a.out}});
  const DatasetManifest raw = synth_generate(spec, n, dir);
  const DatasetManifest split = split_dataset(raw, SplitFractions{}, a.seed);
  split.save(dir / "manifest.json");

  const std::size_t tr = split.count(Split::train), va = split.count(Split::val), te = split.count(Split::test);
  if (va == 0 || te == 0) {
    err << kWarningPrefix << "val/test splits are empty (train " << tr << ", val " << va << ", test " << te << ")\n";
  }
  std::map<std::string, std::size_t> kinds;
  for (const auto& e : split.samples) {
    for (const auto& k : e.kinds) ++kinds[k];
  }
  out << "generated " << n << " samples of " << spec.domain_id << " into " << dir.string() << '\n';
  out << "splits: train " << tr << " val " << va << " test " << te << '\n';
  out << "defects:";
  for (const auto& [k, c] : kinds) out << ' ' << k << '=' << c;
  out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  ModelOptions model;
  TrainConfig train;
  bool no_augment = false;
};

struct TrainOutcome {
  FitResult fit;
  std::optional<MetricsReport> report;
};

TrainOutcome train_run(const DatasetManifest& manifest, const ModelConfig& mc, const TrainConfig& tc,
                       const fs::path& dir, const json& run_config, std::ostream& out, std::ostream& err) {
  const auto train = manifest.subset(Split::train).load_all();
  const auto val = manifest.subset(Split::val).load_all();
  if (train.empty()) throw CommandError("manifest " + manifest.root.string() + " has an empty train split");
  if (val.empty()) throw CommandError("manifest " + manifest.root.string() + " has an empty val split");

  SegmenterModel model(mc);
  FitOptions opts;
  opts.checkpoint = dir / "best.ckpt";
  TrainOutcome o;
  o.fit = fit(model, train, val, tc, opts);
  write_history(dir / "history.jsonl", o.fit.history);
  out << "best epoch " << o.fit.best_epoch << " val dice " << fmt(o.fit.best_val_dice) << " after "
      << o.fit.history.size() << " epochs" << (o.fit.stopped_early ? " (early stop)" : "") << '\n';

  const DatasetManifest test = manifest.subset(Split::test);
  if (test.size() == 0) {
    err << kWarningPrefix << "test split is empty, no report written\n";
    return o;
  }
  o.report = make_report(model, test, tc.threshold, run_config, tc.seed);
  o.report->write(dir / "report.json");
  print_metrics(out, "test " + o.report->dataset, *o.report);
  return o;
}

TrainConfig resolve_train(TrainConfig t, std::uint64_t seed, bool no_augment) {
  t.seed = seed;
  t.augment = !no_augment;
  t.validate();
  return t;
}

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  const ModelConfig mc = a.model.resolve(a.seed);
  const TrainConfig tc = resolve_train(a.train, a.seed, a.no_augment);
  const json run_config = {{"command", "train"}, {"argv", argv_json(argv)}, {"data", a.data},
                           {"preset", a.model.preset}, {"model", mc.to_json()}, {"train", tc.to_json()},
                           {"seed", a.seed}, {"out", a.out}};
  prepare_out(a.out, run_config);
  const DatasetManifest manifest = open_manifest(a.data);
  const ParamCounts counts = expected_param_counts(mc);
  out << "params total " << counts.total << " trainable " << counts.trainable << '\n';
  train_run(manifest, mc, tc, a.out, run_config, out, err);
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> data;
  std::vector<std::string> cross;
  std::string out;
  double threshold = 0.5;
  ModelOptions model;
};

int cmd_eval(const EvalArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream&) {
  if (a.data.empty() && a.cross.empty()) throw CommandError("eval needs --data or --cross");
  if (!(a.threshold > 0 && a.threshold < 1)) throw CommandError("--threshold must lie in (0, 1)");
  const ModelConfig mc = a.model.resolve(0);
  const json run_config = {{"command", "eval"}, {"argv", argv_json(argv)}, {"checkpoint", a.checkpoint},
                           {"data", a.data}, {"cross", a.cross}, {"preset", a.model.preset},
                           {"model", mc.to_json()}, {"threshold", a.threshold}, {"out", a.out}};
  prepare_out(a.out, run_config);
  SegmenterModel model(mc);
  load_checkpoint(a.checkpoint, model);

  auto run_one = [&](const std::string& path, bool full) {
    const DatasetManifest m = open_manifest(path);
    const DatasetManifest subset = full ? m : m.subset(Split::test);
    const MetricsReport r = make_report(model, subset, a.threshold, run_config, 0);
    const std::string label = (full ? "cross_" : "test_") + r.dataset;
    r.write(fs::path(a.out) / ("report_" + label + ".json"));
    print_metrics(out, label, r);
  };
  for (const auto& d : a.data) run_one(d, false);
  for (const auto& d : a.cross) run_one(d, true);
  return 0;
}

// ---------------------------------------------------------------------------
// fewshot

struct FewshotArgs {
  std::string data;
  std::string out;
  std::vector<std::size_t> ks{10, 50, 100};
  std::size_t seeds = 3;
  std::uint64_t seed = 0;
  ModelOptions model;
  TrainConfig train;
  bool no_augment = false;
};

int cmd_fewshot(const FewshotArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  if (a.seeds == 0) throw CommandError("--seeds must be positive");
  const DatasetManifest manifest = open_manifest(a.data);
  const std::size_t available = manifest.count(Split::train);
  for (std::size_t k : a.ks) {
    if (k == 0 || k > available) {
      throw CommandError("k=" + std::to_string(k) + " exceeds the train split (" + std::to_string(available) + ")");
    }
  }
  const TrainConfig base = resolve_train(a.train, a.seed, a.no_augment);
  const json run_config = {{"command", "fewshot"}, {"argv", argv_json(argv)}, {"data", a.data},
                           {"preset", a.model.preset}, {"model", a.model.resolve(a.seed).to_json()},
                           {"train", base.to_json()}, {"ks", a.ks}, {"seeds", a.seeds},
                           {"base_seed", a.seed}, {"out", a.out}};
  prepare_out(a.out, run_config);

  json table = json::array();
  std::ostringstream text;
  text << "k      dice             iou              recall           precision\n";
  for (std::size_t k : a.ks) {
    std::vector<Metrics> runs;
    json row = {{"k", k}, {"runs", json::array()}};
    for (std::size_t s = 0; s < a.seeds; ++s) {
      const std::uint64_t seed = a.seed + s;
      const fs::path dir = fs::path(a.out) / ("k" + std::to_string(k) + "_seed" + std::to_string(seed));
      json rc = run_config;
      rc["k"] = k;
      rc["seed"] = seed;
      prepare_out(dir, rc);
      TrainConfig tc = base;
      tc.seed = seed;
      const DatasetManifest subset = few_shot_sample(manifest, k, seed);
      out << "k=" << k << " seed=" << seed << ": ";
      const TrainOutcome o = train_run(subset, a.model.resolve(seed), tc, dir, rc, out, err);
      if (!o.report) throw CommandError("few-shot runs need a nonempty test split");
      runs.push_back(o.report->aggregate);
      row["runs"].push_back({{"seed", seed}, {"aggregate", metrics_to_json(o.report->aggregate)}});
    }
    auto mean_sd = [&](double Metrics::*field) {
      double m = 0;
      for (const auto& r : runs) m += r.*field;
      m /= static_cast<double>(runs.size());
      double v = 0;
      for (const auto& r : runs) v += (r.*field - m) * (r.*field - m);
      const double sd = runs.size() > 1 ? std::sqrt(v / static_cast<double>(runs.size() - 1)) : 0.0;
      return std::pair{m, sd};
    };
    text << std::left << std::setw(7) << k;
    for (auto field : {&Metrics::dice, &Metrics::iou, &Metrics::recall, &Metrics::precision}) {
      const auto [m, sd] = mean_sd(field);
      text << std::setw(17) << (fmt(m) + " +- " + fmt(sd));
    }
    text << '\n';
    const auto [dm, dsd] = mean_sd(&Metrics::dice);
    row["dice_mean"] = dm;
    row["dice_sd"] = dsd;
    table.push_back(row);
  }
  write_json(fs::path(a.out) / "fewshot.json", table);
  out << text.str();
  return 0;
}

// ---------------------------------------------------------------------------
// params

int cmd_params(const ModelOptions& m, bool as_json, std::ostream& out) {
  const ModelConfig mc = m.resolve(0);
  const ParamCounts c = SegmenterModel(mc).count_params();
  const ParamCounts closed = expected_param_counts(mc);
  if (!(c.total == closed.total && c.trainable == closed.trainable && c.by_group == closed.by_group)) {
    throw CommandError("registry count disagrees with the closed form");
  }
  if (as_json) {
    json groups = json::object();
    for (auto g : {ParamGroup::encoder_base, ParamGroup::encoder_bypass, ParamGroup::prompt, ParamGroup::decoder}) {
      groups[std::string(to_string(g))] = c.group(g);
    }
    out << json{{"preset", m.preset}, {"model", mc.to_json()}, {"total", c.total}, {"trainable", c.trainable},
                {"trainable_fraction", c.trainable_fraction()}, {"groups", groups}}
               .dump(2)
        << '\n';
    return 0;
  }
  out << "preset " << m.preset << " (r=" << mc.lora_rank << ", image " << mc.image_size << ")\n";
  for (auto g : {ParamGroup::encoder_base, ParamGroup::encoder_bypass, ParamGroup::prompt, ParamGroup::decoder}) {
    out << "  " << std::left << std::setw(16) << to_string(g) << std::right << std::setw(12) << c.group(g) << '\n';
  }
  out << "  " << std::left << std::setw(16) << "total" << std::right << std::setw(12) << c.total << '\n';
  out << "  " << std::left << std::setw(16) << "trainable" << std::right << std::setw(12) << c.trainable << '\n';
  out << "  trainable fraction " << fmt(100 * c.trainable_fraction(), 2) << "%\n";
  out << "reference SAM-B: total 91,233,774 trainable 657,442 (0.72%)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// overlay

struct OverlayArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
  double threshold = 0.5;
  ModelOptions model;
};

int cmd_overlay(const OverlayArgs& a, const std::vector<std::string>& argv, std::ostream& out, std::ostream&) {
  if (!(a.threshold > 0 && a.threshold < 1)) throw CommandError("--threshold must lie in (0, 1)");
  const ModelConfig mc = a.model.resolve(0);
  prepare_out(a.out, {{"command", "overlay"}, {"argv", argv_json(argv)}, {"checkpoint", a.checkpoint},
                      {"data", a.data}, {"preset", a.model.preset}, {"model", mc.to_json()},
                      {"threshold", a.threshold}, {"out", a.out}});
  SegmenterModel model(mc);
  load_checkpoint(a.checkpoint, model);
  const DatasetManifest test = open_manifest(a.data).subset(Split::test);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Sample s = test.load(i);
    const auto prob = predict_probabilities(model, s);
    Mask pred(s.mask.height, s.mask.width);
    for (std::size_t p = 0; p < prob.size(); ++p) pred.data[p] = prob[p] >= a.threshold ? 1 : 0;
    write_ppm(fs::path(a.out) / fs::path(test.samples[i].image).filename(), render_overlay(s.image, pred, s.mask));
  }
  out << "wrote " << test.size() << " overlays to " << a.out << '\n';
  return 0;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

Mask contour(const Mask& mask) {
  Mask out(mask.height, mask.width);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == mask.height || x + 1 == mask.width || !mask.at(y - 1, x) ||
                        !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1);
      out.at(y, x) = edge ? 1 : 0;
    }
  }
  return out;
}

Image render_overlay(const Image& image, const Mask& prediction, const Mask& truth) {
  if (prediction.height != image.height || prediction.width != image.width || truth.height != image.height ||
      truth.width != image.width) {
    throw ShapeError("overlay: image and masks differ in size");
  }
  Image out = image;
  const Mask edge = contour(truth);
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      if (prediction.at(y, x)) {
        out.at(0, y, x) = 0.5 * out.at(0, y, x) + 0.5;
        out.at(1, y, x) = 0.5 * out.at(1, y, x);
        out.at(2, y, x) = 0.5 * out.at(2, y, x);
      }
      if (edge.at(y, x)) {
        out.at(0, y, x) = 0;
        out.at(1, y, x) = 1;
        out.at(2, y, x) = 0;
      }
    }
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Low-rank adapted segmenter for fabric defects", "skim"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a synthetic fabric dataset with 60/20/20 splits");
  auto* g_domain = g->add_option("--domain", gen.domain, "Built-in domain")->check(CLI::IsMember({"D1", "D2", "D3"}));
  auto* g_spec = g->add_option("--spec", gen.spec_file, "Domain spec JSON file");
  g_domain->excludes(g_spec);
  g->add_option("-n,--count", gen.count, "Number of samples (default: the domain's size)");
  g->add_option("--seed", gen.seed, "Generator and split seed")->capture_default_str();
  g->add_option("-o,--out", gen.out, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Fine-tune on a manifest and report on its test split");
  t->add_option("--data", tr.data, "Manifest file or dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--seed", tr.seed, "Init, shuffle and augmentation seed")->capture_default_str();
  tr.model.bind(*t);
  bind_train_options(*t, tr.train, tr.no_augment);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on test splits or whole foreign datasets");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Manifest evaluated on its test split (repeatable)");
  e->add_option("--cross", ev.cross, "Manifest evaluated in full (repeatable)");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--threshold", ev.threshold, "Binarization threshold")->capture_default_str();
  ev.model.bind(*e);

  FewshotArgs fw;
  auto* f = app.add_subcommand("fewshot", "Train on k-sample subsets over several seeds");
  f->add_option("--data", fw.data, "Manifest file or dataset directory")->required();
  f->add_option("--out", fw.out, "Output directory")->required();
  f->add_option("--ks", fw.ks, "Train subset sizes")->delimiter(',')->capture_default_str();
  f->add_option("--seeds", fw.seeds, "Number of seeds per k")->capture_default_str();
  f->add_option("--seed", fw.seed, "First seed")->capture_default_str();
  fw.model.bind(*f);
  bind_train_options(*f, fw.train, fw.no_augment);

  ModelOptions pm;
  bool params_json = false;
  auto* p = app.add_subcommand("params", "Print total and trainable parameter counts");
  pm.bind(*p);
  p->add_flag("--json", params_json, "Print JSON");

  OverlayArgs ov;
  auto* o = app.add_subcommand("overlay", "Write prediction overlays for the test split");
  o->add_option("--checkpoint", ov.checkpoint, "Checkpoint file")->required();
  o->add_option("--data", ov.data, "Manifest file or dataset directory")->required();
  o->add_option("--out", ov.out, "Output directory")->required();
  o->add_option("--threshold", ov.threshold, "Binarization threshold")->capture_default_str();
  ov.model.bind(*o);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::ParseError& ex) {
    err << kErrorPrefix << one_line(ex.what()) << '\n';
    return 2;
  }

  std::vector<std::string> argv{"skim"};
  argv.insert(argv.end(), args.begin(), args.end());
  try {
    if (g->parsed()) {
      if (gen.domain.empty() && gen.spec_file.empty()) throw CommandError("generate needs --domain or --spec");
      return cmd_generate(gen, argv, out, err);
    }
    if (t->parsed()) return cmd_train(tr, argv, out, err);
    if (e->parsed()) return cmd_eval(ev, argv, out, err);
    if (f->parsed()) return cmd_fewshot(fw, argv, out, err);
    if (p->parsed()) return cmd_params(pm, params_json, out);
    if (o->parsed()) return cmd_overlay(ov, argv, out, err);
  } catch (const std::exception& ex) {
    err << kErrorPrefix << one_line(ex.what()) << '\n';
    return 1;
  }
  return 1;
}

}  // namespace skim::cli
