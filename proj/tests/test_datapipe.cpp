// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "skim/datapipe.hpp"

using namespace skim;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("skim_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Sample random_sample(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Sample s;
  s.image = Image(h, w);
  for (double& v : s.image.data) v = rng.uniform();
  s.mask = Mask(h, w);
  for (auto& m : s.mask.data) m = rng.bernoulli(0.3) ? 1 : 0;
  s.domain = "T";
  return s;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// Index oracle for the geometric part of an augmentation trace: where does
// source pixel (y, x) land?
std::pair<std::size_t, std::size_t> map_point(std::size_t y, std::size_t x, std::size_t h, std::size_t w,
                                              const AugmentTrace& t) {
  if (t.hflip) x = w - 1 - x;
  if (t.vflip) y = h - 1 - y;
  if (t.rot90) {
    // out(y', x') = in(h - 1 - x', y')  =>  in(y, x) lands at (x, h - 1 - y).
    const std::size_t ny = x, nx = h - 1 - y;
    y = ny;
    x = nx;
  }
  return {y, x};
}

}  // namespace

TEST_CASE("letterbox examples") {
  {
    const auto [out, g] = letterbox(random_sample(512, 512, 1), 512);
    CHECK(g.scale == 1.0);
    CHECK(g.pad_top + g.pad_bottom + g.pad_left + g.pad_right == 0);
  }
  {
    const Sample s = random_sample(256, 256, 2);
    const auto [out, g] = letterbox(s, 512);
    CHECK(g.scale == 1.0);
    CHECK(g.pad_top == 128);
    CHECK(g.pad_bottom == 128);
    CHECK(g.pad_left == 128);
    CHECK(g.pad_right == 128);
    CHECK(out.image.height == 512);
    CHECK(out.image.at(1, 128 + 7, 128 + 9) == s.image.at(1, 7, 9));
    CHECK(out.image.at(0, 3, 3) == kLetterboxImagePad);
    CHECK(out.mask.at(3, 3) == 0);
    CHECK(out.mask.area() == s.mask.area());
  }
  {
    const auto [out, g] = letterbox(random_sample(512, 1024, 3), 512);
    CHECK(g.scale == 0.5);
    CHECK(g.content_h() == 256);
    CHECK(g.content_w() == 512);
    CHECK(g.pad_top == 128);
    CHECK(g.pad_bottom == 128);
    CHECK(g.pad_left == 0);
  }
  {
    const auto g = letterbox_geometry(1024, 512, 512);
    CHECK(g.content_h() == 512);
    CHECK(g.content_w() == 256);
    CHECK(g.pad_left == 128);
    CHECK(g.pad_right == 128);
  }
  CHECK_THROWS_AS(letterbox_geometry(0, 5, 8), InputError);
  CHECK_THROWS_AS(letterbox_geometry(5, 5, 0), InputError);
}

TEST_CASE("letterbox never magnifies and keeps aspect ratio") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const std::size_t target = 16 + rng.below(200);
    const std::size_t h = 1 + rng.below(2 * target), w = 1 + rng.below(2 * target);
    const auto g = letterbox_geometry(h, w, target);
    CHECK(g.scale <= 1.0);
    CHECK(g.content_h() <= target);
    CHECK(g.content_w() <= target);
    if (std::max(h, w) <= target) {
      CHECK(g.content_h() == h);
      CHECK(g.content_w() == w);
    }
    if (h % 2 == 0 && w == h / 2 && h > target) {
      CHECK(g.content_w() * 2 == g.content_h());
    }
  }
}

TEST_CASE("invert letterbox round trips") {
  const Sample s = random_sample(40, 70, 6);
  const auto [boxed, g] = letterbox(s, 96);
  std::vector<double> map(boxed.mask.data.begin(), boxed.mask.data.end());
  const auto back = invert_letterbox(map, g);
  CHECK(back == std::vector<double>(s.mask.data.begin(), s.mask.data.end()));

  const auto g2 = letterbox_geometry(300, 200, 100);
  const auto ones = invert_letterbox(std::vector<double>(100 * 100, 1.0), g2);
  CHECK(ones.size() == 300 * 200);
  CHECK(std::all_of(ones.begin(), ones.end(), [](double v) { return v == 1.0; }));

  CHECK_THROWS_AS(invert_letterbox(std::vector<double>(10, 0.0), g2), ShapeError);

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Sample r = random_sample(20 + seed, 30, seed);
    const auto [b, geo] = letterbox(r, 64);
    const auto rt = invert_letterbox(std::vector<double>(b.mask.data.begin(), b.mask.data.end()), geo);
    const auto c = confusion(rt, std::vector<double>(r.mask.data.begin(), r.mask.data.end()));
    CHECK(metrics_from_confusion(c).iou == 1.0);
  }
}

TEST_CASE("augment no-op path, involutions and cycles") {
  const Sample s = random_sample(12, 9, 7);
  AugmentConfig off{0, 0, 0, 0, 0, 0.2, 0.2};
  Rng rng(1);
  const Sample same = augment(s, rng, off);
  CHECK(same.image == s.image);
  CHECK(same.mask == s.mask);

  CHECK(hflip(hflip(s.image)) == s.image);
  CHECK(vflip(vflip(s.mask)) == s.mask);
  CHECK(rot90(rot90(rot90(rot90(s.image)))) == s.image);
  CHECK(rot90(rot90(rot90(rot90(s.mask)))) == s.mask);
  CHECK(rot90(s.image).height == 9);

  Sample point = s;
  std::fill(point.mask.data.begin(), point.mask.data.end(), 0);
  point.mask.at(4, 2) = 1;
  point.image.at(0, 4, 2) = 7.0;  // marker survives geometric ops untouched
  AugmentConfig only_h{1, 0, 0, 0, 0, 0.2, 0.2};
  Rng rng2(3);
  const Sample flipped = augment(point, rng2, only_h);
  CHECK(flipped.mask.at(4, 9 - 1 - 2) == 1);
  CHECK(flipped.image.at(0, 4, 9 - 1 - 2) == 7.0);
}

TEST_CASE("geometric augmentation moves image and mask together") {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t h = 3 + rng.below(6), w = 3 + rng.below(6);
    const Sample s = random_sample(h, w, 1000 + static_cast<std::uint64_t>(i));
    AugmentTrace trace;
    const Sample out = augment(s, rng, AugmentConfig{}, &trace);
    const std::size_t oh = trace.rot90 ? w : h, ow = trace.rot90 ? h : w;
    REQUIRE(out.mask.height == oh);
    REQUIRE(out.mask.width == ow);
    Mask expected(oh, ow);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const auto [ny, nx] = map_point(y, x, h, w, trace);
        expected.at(ny, nx) = s.mask.at(y, x);
      }
    CHECK(out.mask == expected);
    if (!trace.brightness && !trace.contrast) {
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const auto [ny, nx] = map_point(y, x, h, w, trace);
          CHECK(out.image.at(2, ny, nx) == s.image.at(2, y, x));
        }
    }
    for (double v : out.image.data) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("photometric ops leave the mask alone") {
  const Sample s = random_sample(16, 16, 9);
  AugmentConfig photo{0, 0, 0, 1, 1, 0.2, 0.2};
  Rng rng(2);
  AugmentTrace trace;
  const Sample out = augment(s, rng, photo, &trace);
  CHECK(out.mask == s.mask);
  REQUIRE(trace.brightness.has_value());
  REQUIRE(trace.contrast.has_value());
  CHECK(std::abs(*trace.brightness) <= 0.2);
  CHECK(*trace.contrast >= 0.8);
  CHECK(*trace.contrast <= 1.2);
  CHECK_FALSE(out.image == s.image);
}

TEST_CASE("domain specs validate and serialize") {
  for (const char* id : {"D1", "D2", "D3"}) {
    const DomainSpec spec = DomainSpec::builtin(id, 4);
    CHECK(DomainSpec::from_json(spec.to_json()).to_json() == spec.to_json());
  }
  CHECK(DomainSpec::builtin_size("D1") == 40);
  CHECK(DomainSpec::builtin_size("D2") == 20);
  CHECK(DomainSpec::builtin_size("D3") == 150);
  CHECK_THROWS_AS(DomainSpec::builtin("D9"), DataConfigError);
  DomainSpec bad = DomainSpec::builtin("D1");
  bad.defect_mix = {0.5, 0.2, 0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(), DataConfigError);
  bad = DomainSpec::builtin("D1");
  bad.imaging.noise_std = 2.0;
  CHECK_THROWS_AS(generate_sample(bad, 0), DataConfigError);
  bad = DomainSpec::builtin("D1");
  bad.texture.weave_period = 1.0;
  CHECK_THROWS_AS(bad.validate(), DataConfigError);
}

TEST_CASE("generated samples respect the generator contract") {
  for (const char* id : {"D1", "D2", "D3"}) {
    const DomainSpec spec = DomainSpec::builtin(id, 1);
    std::set<std::string> kinds;
    for (std::size_t i = 0; i < 30; ++i) {
      const Sample s = generate_sample(spec, i);
      CHECK_NOTHROW(s.validate());
      CHECK(s.image.height == spec.height);
      CHECK(s.image.width == spec.width);
      const double area = static_cast<double>(s.mask.area()) / static_cast<double>(spec.height * spec.width);
      CHECK(area >= kMinDefectArea);
      CHECK(area <= kMaxDefectArea);
      CHECK_FALSE(s.kinds.empty());
      kinds.insert(s.kinds.begin(), s.kinds.end());
      for (double v : s.image.data) CHECK(v * 255.0 == std::round(v * 255.0));
    }
    if (std::string(id) == "D1") CHECK(kinds == std::set<std::string>{"stain"});
    if (std::string(id) == "D2") CHECK(kinds.count("stain") == 0);
    if (std::string(id) == "D3") CHECK(kinds.size() == 4);
  }
  const DomainSpec spec = DomainSpec::builtin("D1", 9);
  CHECK(generate_sample(spec, 3).image == generate_sample(spec, 3).image);
  CHECK_FALSE(generate_sample(spec, 3).image == generate_sample(spec, 4).image);
}

TEST_CASE("built-in domains have distinguishable histograms") {
  std::vector<std::vector<double>> hists;
  for (const char* id : {"D1", "D2", "D3"}) {
    std::vector<Image> images;
    for (std::size_t i = 0; i < 20; ++i) images.push_back(generate_sample(DomainSpec::builtin(id, 1), i).image);
    hists.push_back(intensity_histogram(images));
    double total = 0;
    for (double v : hists.back()) total += v;
    CHECK(total == doctest::Approx(1.0));
  }
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b) CHECK(histogram_distance(hists[a], hists[b]) > kDomainShiftThreshold);
  CHECK(histogram_distance(hists[0], hists[0]) == 0.0);
}

TEST_CASE("generation to disk is byte-identical") {
  TempDir a("gen_a"), b("gen_b");
  const DomainSpec spec = DomainSpec::builtin("D2", 3);
  const auto ma = synth_generate(spec, 5, a.path);
  synth_generate(spec, 5, b.path);
  CHECK(ma.size() == 5);
  for (const auto& e : ma.samples) {
    CHECK(file_bytes(a.path / e.image) == file_bytes(b.path / e.image));
    CHECK(file_bytes(a.path / e.mask) == file_bytes(b.path / e.mask));
  }
  CHECK(file_bytes(a.path / "manifest.json") == file_bytes(b.path / "manifest.json"));
  const auto loaded = DatasetManifest::read(a.path / "manifest.json");
  CHECK(loaded.to_json() == ma.to_json());
  const Sample s = loaded.load(2);
  CHECK(s.image == generate_sample(spec, 2).image);
  CHECK(s.mask == generate_sample(spec, 2).mask);
}

TEST_CASE("split arithmetic and determinism") {
  auto make = [](std::size_t n) {
    DatasetManifest m;
    for (std::size_t i = 0; i < n; ++i) m.samples.push_back({"i" + std::to_string(i), "m", "D", {}, Split::none});
    return m;
  };
  auto counts = [](const DatasetManifest& m) {
    return std::array<std::size_t, 3>{m.count(Split::train), m.count(Split::val), m.count(Split::test)};
  };
  CHECK(counts(split_dataset(make(100), {}, 1)) == std::array<std::size_t, 3>{60, 20, 20});
  CHECK(counts(split_dataset(make(10), {}, 1)) == std::array<std::size_t, 3>{6, 2, 2});
  CHECK(counts(split_dataset(make(40), {}, 1)) == std::array<std::size_t, 3>{24, 8, 8});
  CHECK(counts(split_dataset(make(1), {}, 1)) == std::array<std::size_t, 3>{1, 0, 0});
  CHECK(counts(split_dataset(make(7), {}, 1)) == std::array<std::size_t, 3>{5, 1, 1});
  const auto a = split_dataset(make(50), {}, 5);
  const auto b = split_dataset(make(50), {}, 5);
  const auto c = split_dataset(make(50), {}, 6);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.to_json() != c.to_json());
  CHECK(counts(a) == counts(c));
  CHECK_THROWS_AS(split_dataset(make(0), {}, 1), InputError);
  CHECK_THROWS_AS(split_dataset(make(5), {0.5, 0.5, 0.5}, 1), InputError);
}

TEST_CASE("few-shot subsets") {
  DatasetManifest m;
  for (std::size_t i = 0; i < 60; ++i) m.samples.push_back({"i" + std::to_string(i), "m", "D", {}, Split::none});
  m = split_dataset(m, {}, 2);
  const std::size_t n_train = m.count(Split::train);
  std::set<std::string> train, test;
  for (const auto& e : m.samples) (e.split == Split::train ? train : test).insert(e.image);

  const auto whole = few_shot_sample(m, n_train, 1);
  CHECK(whole.to_json() == m.to_json());
  const auto s1 = few_shot_sample(m, 10, 1);
  const auto s2 = few_shot_sample(m, 10, 2);
  CHECK(s1.count(Split::train) == 10);
  CHECK(s2.count(Split::train) == 10);
  CHECK(s1.subset(Split::train).to_json() != s2.subset(Split::train).to_json());
  CHECK(s1.subset(Split::test).to_json() == m.subset(Split::test).to_json());
  CHECK(s1.subset(Split::val).to_json() == m.subset(Split::val).to_json());
  std::set<std::string> chosen;
  for (const auto& e : s1.subset(Split::train).samples) {
    chosen.insert(e.image);
    CHECK(train.count(e.image) == 1);
    CHECK(test.count(e.image) == 0);
  }
  CHECK(chosen.size() == 10);
  CHECK(few_shot_sample(m, 10, 1).to_json() == s1.to_json());
  CHECK_THROWS_AS(few_shot_sample(m, n_train + 1, 1), InputError);
}

TEST_CASE("image files round trip and reject malformed input") {
  TempDir dir("io");
  Image img = random_sample(5, 7, 3).image;
  quantize_8bit(img);
  write_ppm(dir.path / "a.ppm", img);
  CHECK(read_ppm(dir.path / "a.ppm") == img);
  const std::string bytes = file_bytes(dir.path / "a.ppm");
  CHECK(bytes.rfind("P6\n7 5\n255\n", 0) == 0);
  CHECK(bytes.size() == 11 + 3 * 35);

  const Mask mask = random_sample(6, 4, 8).mask;
  write_pgm(dir.path / "m.pgm", mask);
  CHECK(read_pgm(dir.path / "m.pgm") == mask);
  const std::string mb = file_bytes(dir.path / "m.pgm");
  for (std::size_t i = 11; i < mb.size(); ++i) CHECK((mb[i] == '\0' || static_cast<unsigned char>(mb[i]) == 255));

  {
    Image big(128, 128, 0.25);
    write_ppm(dir.path / "big.ppm", big);
    CHECK(file_bytes(dir.path / "big.ppm").rfind("P6\n128 128\n255\n", 0) == 0);
  }

  write_text(dir.path / "trunc.ppm", bytes.substr(0, 40));
  try {
    read_ppm(dir.path / "trunc.ppm");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 40);
    CHECK(std::string(e.what()).find("trunc.ppm") != std::string::npos);
  }
  write_text(dir.path / "magic.ppm", "P3\n1 1\n255\n");
  CHECK_THROWS_AS(read_ppm(dir.path / "magic.ppm"), ParseError);
  write_text(dir.path / "maxval.ppm", "P6\n1 1\n65535\n");
  try {
    read_ppm(dir.path / "maxval.ppm");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.offset() == 7);
  }
  write_text(dir.path / "comment.pgm", std::string("P5\n# hello\n2 1\n255\n") + '\xff' + '\0');
  CHECK(read_pgm(dir.path / "comment.pgm").data == std::vector<std::uint8_t>{1, 0});
  write_text(dir.path / "gray.pgm", std::string("P5\n1 1\n255\n") + '\x10');
  CHECK_THROWS_AS(read_pgm(dir.path / "gray.pgm"), ParseError);

  write_text(dir.path / "bad.json", "{\"spec\": {}, \"seed\": ");
  try {
    DatasetManifest::read(dir.path / "bad.json");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.file().find("bad.json") != std::string::npos);
    CHECK(e.offset() > 0);
  }
}
