#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "cki/data.hpp"
#include "cki/rng.hpp"
#include "testutil.hpp"

using namespace cki;
using testutil::TempDir;

namespace {

SceneCube tiny_scene() {
  SceneCube s;
  s.scene_id = "tiny";
  s.height = 2;
  s.width = 2;
  s.bands = 3;
  s.cube = Tensor({2, 2, 3});
  for (int64_t i = 0; i < s.cube.size(); ++i)
    s.cube[i] = 0.125 * static_cast<double>(i) + 0.0625;
  s.labels = {1, 0, 2, 1};
  s.class_names = {"alpha", "beta"};
  s.wavelength_min = 0.4;
  s.wavelength_max = 2.5;
  return s;
}

SceneCube grid_scene(int classes, int per_class, int64_t bands, uint64_t seed) {
  // one row per class, per_class labeled pixels each
  SceneCube s;
  s.scene_id = "grid";
  s.height = classes;
  s.width = per_class;
  s.bands = bands;
  s.cube = Tensor({s.height, s.width, bands});
  Rng rng(seed);
  for (int64_t i = 0; i < s.cube.size(); ++i) s.cube[i] = std::abs(rng.normal());
  s.labels.assign(static_cast<std::size_t>(s.height * s.width), 0);
  for (int k = 0; k < classes; ++k)
    for (int c = 0; c < per_class; ++c)
      s.labels[static_cast<std::size_t>(k * per_class + c)] = static_cast<uint16_t>(k + 1);
  for (int k = 0; k < classes; ++k) s.class_names.push_back("c" + std::to_string(k + 1));
  return s;
}

}  // namespace

TEST_CASE("scene save/load round-trips bit-exactly") {
  TempDir td("scene_rt");
  SceneCube s = tiny_scene();
  const std::string header = td.str() + "/tiny.json";
  save_scene(s, header);
  SceneCube r = load_scene(header, {.normalize = false});
  CHECK(r.height == 2);
  CHECK(r.width == 2);
  CHECK(r.bands == 3);
  CHECK(r.labels == s.labels);
  CHECK(r.class_names == s.class_names);
  for (int64_t i = 0; i < s.cube.size(); ++i) CHECK(r.cube[i] == s.cube[i]);

  // save again: payload bytes identical
  const std::string header2 = td.str() + "/tiny2.json";
  save_scene(r, header2);
  std::ifstream a(td.str() + "/tiny.cube.f32", std::ios::binary);
  std::ifstream b(td.str() + "/tiny2.cube.f32", std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
  CHECK(bytes_a == bytes_b);
  CHECK(!bytes_a.empty());
}

TEST_CASE("header/payload shape mismatch is rejected") {
  TempDir td("scene_mismatch");
  SceneCube s = grid_scene(3, 5, 103, 11);
  const std::string header = td.str() + "/p.json";
  save_scene(s, header);
  // rewrite the header to claim 200 bands over the 103-band payload
  nlohmann::json j;
  {
    std::ifstream in(header);
    in >> j;
  }
  j["bands"] = 200;
  {
    std::ofstream out(header);
    out << j.dump(2);
  }
  CHECK_THROWS_AS(load_scene(header), DataError);
}

TEST_CASE("missing header file is rejected") {
  CHECK_THROWS_AS(load_scene("/nonexistent/path/header.json"), DataError);
}

TEST_CASE("a Houston-sized header loads with 144 bands and 15 classes") {
  TempDir td("scene_houston");
  SceneCube s = grid_scene(15, 4, 144, 3);
  s.scene_id = "houston2013";
  s.wavelength_min = 0.38;
  s.wavelength_max = 1.05;
  const std::string header = td.str() + "/houston2013.json";
  save_scene(s, header);
  SceneCube r = load_scene(header);
  CHECK(r.bands == 144);
  CHECK(r.num_classes() == 15);
  CHECK(r.scene_id == "houston2013");
}

TEST_CASE("label raster referencing an unknown class is rejected") {
  TempDir td("scene_badlabel");
  SceneCube s = grid_scene(3, 4, 8, 5);
  s.labels[0] = 7;  // only 3 classes declared
  const std::string header = td.str() + "/bad.json";
  CHECK_THROWS_AS(save_scene(s, header), DataError);
}

TEST_CASE("per-band normalization maps every band to [0,1]") {
  SceneCube s = grid_scene(2, 6, 4, 17);
  normalize_bands(s);
  for (int64_t b = 0; b < s.bands; ++b) {
    double lo = 1e9, hi = -1e9;
    for (int64_t p = 0; p < s.height * s.width; ++p) {
      lo = std::min(lo, s.cube[p * s.bands + b]);
      hi = std::max(hi, s.cube[p * s.bands + b]);
    }
    CHECK(lo == doctest::Approx(0.0));
    CHECK(hi == doctest::Approx(1.0));
  }
}

TEST_CASE("make_split is deterministic and clamps small classes") {
  SceneCube s = grid_scene(9, 100, 4, 21);
  SplitManifest a = make_split(s, 10, 7);
  SplitManifest b = make_split(s, 10, 7);
  CHECK(a.train_coords == b.train_coords);
  CHECK(a.test_coords == b.test_coords);
  CHECK(a.train_count() == 90);  // 9 classes x 10 shots

  // distinct seeds give distinct manifests
  SplitManifest c = make_split(s, 10, 8);
  CHECK(a.train_coords != c.train_coords);

  // per-class sampling without replacement
  for (const auto& cls : a.train_coords) {
    std::set<std::pair<int64_t, int64_t>> uniq(cls.begin(), cls.end());
    CHECK(uniq.size() == cls.size());
  }

  // train and test are disjoint
  std::set<std::pair<int64_t, int64_t>> train_set;
  for (const auto& cls : a.train_coords) train_set.insert(cls.begin(), cls.end());
  for (const auto& tc : a.test_coords) CHECK(train_set.count(tc) == 0);

  // clamp: a 6-pixel class contributes all 6 without error
  SceneCube small = grid_scene(2, 6, 4, 22);
  SplitManifest m = make_split(small, 10, 1);
  CHECK(m.train_coords[0].size() == 6);
  CHECK(m.train_coords[1].size() == 6);
  CHECK(m.test_coords.empty());
}

TEST_CASE("make_split rejects a class with zero labeled pixels") {
  SceneCube s = grid_scene(3, 5, 4, 1);
  for (auto& l : s.labels)
    if (l == 2) l = 1;  // erase class 2 entirely
  CHECK_THROWS_AS(make_split(s, 10, 1), DataError);
}

TEST_CASE("manifest text round-trip") {
  TempDir td("manifest");
  SceneCube s = grid_scene(4, 20, 4, 33);
  SplitManifest m = make_split(s, 5, 9);
  const std::string path = td.str() + "/m.txt";
  save_manifest(m, path);
  SplitManifest r = load_manifest(path);
  CHECK(r.scene_id == m.scene_id);
  CHECK(r.seed == m.seed);
  CHECK(r.shots_per_class == m.shots_per_class);
  CHECK(r.train_coords == m.train_coords);
  CHECK(r.test_coords == m.test_coords);
}

TEST_CASE("interior windows equal the raw crop with the center at window/2") {
  SceneCube s = grid_scene(8, 12, 5, 44);
  const int w = 8;
  for (auto [r, c] : std::vector<std::pair<int64_t, int64_t>>{{4, 4}, {4, 7}, {4, 8}}) {
    WindowBatch wb = extract_windows(s, {{r, c}}, w, Domain::source);
    CHECK(wb.size() == 1);
    CHECK(wb.labels[0] == static_cast<int>(s.label_at(r, c)));
    for (int64_t dr = 0; dr < w; ++dr)
      for (int64_t dc = 0; dc < w; ++dc)
        for (int64_t b = 0; b < s.bands; ++b) {
          const double want = s.value_at(r - w / 2 + dr, c - w / 2 + dc, b);
          CHECK(wb.x[((0 * w + dr) * w + dc) * s.bands + b] == want);
        }
    // center pixel sits at index w/2
    for (int64_t b = 0; b < s.bands; ++b)
      CHECK(wb.x[((0 * w + w / 2) * w + w / 2) * s.bands + b] == s.value_at(r, c, b));
  }
}

TEST_CASE("corner windows are mirror padded (index-by-index oracle)") {
  SceneCube s = grid_scene(8, 10, 3, 45);
  const int w = 8;
  WindowBatch wb = extract_windows(s, {{0, 0}}, w, Domain::source);
  // independent reflection oracle
  auto reflect = [](int64_t i, int64_t n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -1 - i;
      if (i >= n) i = n - 1 - (i - n);
    }
    return i;
  };
  for (int64_t dr = 0; dr < w; ++dr)
    for (int64_t dc = 0; dc < w; ++dc)
      for (int64_t b = 0; b < s.bands; ++b) {
        const int64_t rr = reflect(0 - w / 2 + dr, s.height);
        const int64_t cc = reflect(0 - w / 2 + dc, s.width);
        CHECK(wb.x[((dr * w) + dc) * s.bands + b] == s.value_at(rr, cc, b));
      }
  // the inner quadrant equals the raw corner block
  for (int64_t dr = 0; dr < w / 2; ++dr)
    for (int64_t dc = 0; dc < w / 2; ++dc)
      for (int64_t b = 0; b < s.bands; ++b)
        CHECK(wb.x[((w / 2 + dr) * w + (w / 2 + dc)) * s.bands + b] ==
              s.value_at(dr, dc, b));
}

TEST_CASE("window batch cardinality and error cases") {
  SceneCube s = grid_scene(8, 8, 3, 46);
  std::vector<std::pair<int64_t, int64_t>> coords;
  for (int64_t r = 0; r < 8; ++r)
    for (int64_t c = 0; c < 8; ++c) coords.emplace_back(r, c);
  WindowBatch wb = extract_windows(s, coords, 4, Domain::target);
  CHECK(wb.size() == 64);
  CHECK(wb.domain == Domain::target);

  CHECK_THROWS_AS(extract_windows(s, {{8, 0}}, 4, Domain::source), DataError);
  CHECK_THROWS_AS(extract_windows(s, {{0, 0}}, 5, Domain::source), DataError);

  SceneCube bg = grid_scene(4, 8, 3, 47);
  bg.labels[0] = 0;
  CHECK_THROWS_AS(extract_windows(bg, {{0, 0}}, 4, Domain::source), DataError);
}

TEST_CASE("synthetic pair generation is bit-deterministic") {
  SynthSpec spec;
  spec.seed = 1;
  spec.noise_sigma = 0.05;
  SynthResult a = synth_cross_scene(spec);
  SynthResult b = synth_cross_scene(spec);
  CHECK(a.source.cube.vec() == b.source.cube.vec());
  CHECK(a.target.cube.vec() == b.target.cube.vec());
  CHECK(a.source.labels == b.source.labels);
  CHECK(a.shared_class_map == b.shared_class_map);
}

TEST_CASE("synthetic band counts pass through and class layout is sound") {
  SynthSpec spec;
  spec.source_bands = 32;
  spec.target_bands = 20;
  SynthResult r = synth_cross_scene(spec);
  CHECK(r.source.bands == 32);
  CHECK(r.target.bands == 20);
  CHECK(r.source.num_classes() == 6);  // 4 shared + 2 private
  CHECK(r.target.num_classes() == 5);  // 4 shared + 1 private
  CHECK(r.shared_class_map.size() == 4);
  CHECK_NOTHROW(r.source.validate());
  CHECK_NOTHROW(r.target.validate());
  // every class holds exactly pixels_per_class labeled pixels
  std::vector<int> counts(7, 0);
  for (uint16_t l : r.source.labels) ++counts[l];
  for (int k = 1; k <= 6; ++k) CHECK(counts[static_cast<std::size_t>(k)] == spec.pixels_per_class);
}

TEST_CASE("noise-free shared classes correlate across scenes on the latent grid") {
  SynthSpec spec;
  spec.noise_sigma = 0.0;
  spec.seed = 5;
  SynthResult r = synth_cross_scene(spec);
  const auto src_pos = band_positions(spec.source_bands, Domain::source);
  const auto tgt_pos = band_positions(spec.target_bands, Domain::target);

  // resample a pixel spectrum onto latent grid points covered by both sensors
  auto resample = [](const std::vector<double>& pos, const double* vals, double t) {
    std::size_t j = 1;
    while (j + 1 < pos.size() && pos[j] < t) ++j;
    const double t0 = pos[j - 1], t1 = pos[j];
    const double f = (t - t0) / (t1 - t0);
    return vals[j - 1] * (1.0 - f) + vals[j] * f;
  };

  for (const auto& [sk, tk] : r.shared_class_map) {
    // first pixel of the class in each scene
    const double* sv = nullptr;
    const double* tv = nullptr;
    for (int64_t p = 0; p < r.source.height * r.source.width && !sv; ++p)
      if (r.source.labels[static_cast<std::size_t>(p)] == sk)
        sv = r.source.cube.data() + p * r.source.bands;
    for (int64_t p = 0; p < r.target.height * r.target.width && !tv; ++p)
      if (r.target.labels[static_cast<std::size_t>(p)] == tk)
        tv = r.target.cube.data() + p * r.target.bands;
    REQUIRE(sv != nullptr);
    REQUIRE(tv != nullptr);

    std::vector<double> xs, ys;
    for (int i = 0; i < kLatentBands; ++i) {
      const double t = static_cast<double>(i) / (kLatentBands - 1);
      if (t < 0.2 || t > 0.8) continue;  // common coverage only
      xs.push_back(resample(src_pos, sv, t));
      ys.push_back(resample(tgt_pos, tv, t));
    }
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      mx += xs[i];
      my += ys[i];
    }
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(ys.size());
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += (xs[i] - mx) * (ys[i] - my);
      sxx += (xs[i] - mx) * (xs[i] - mx);
      syy += (ys[i] - my) * (ys[i] - my);
    }
    const double corr = sxy / std::sqrt(sxx * syy);
    CHECK(corr > 0.999);
  }
}

TEST_CASE("noise-free scenes are nearest-centroid separable in raw band space") {
  SynthSpec spec;
  spec.noise_sigma = 0.0;
  spec.seed = 9;
  SynthResult r = synth_cross_scene(spec);
  for (const SceneCube* s : {&r.source, &r.target}) {
    const int K = s->num_classes();
    std::vector<std::vector<double>> centroid(static_cast<std::size_t>(K),
                                              std::vector<double>(s->bands, 0.0));
    std::vector<int64_t> counts(static_cast<std::size_t>(K), 0);
    for (int64_t p = 0; p < s->height * s->width; ++p) {
      const uint16_t l = s->labels[static_cast<std::size_t>(p)];
      if (l == 0) continue;
      for (int64_t b = 0; b < s->bands; ++b)
        centroid[l - 1][static_cast<std::size_t>(b)] += s->cube[p * s->bands + b];
      ++counts[l - 1];
    }
    for (int k = 0; k < K; ++k)
      for (auto& v : centroid[static_cast<std::size_t>(k)])
        v /= static_cast<double>(counts[static_cast<std::size_t>(k)]);

    int64_t correct = 0, total = 0;
    for (int64_t p = 0; p < s->height * s->width; ++p) {
      const uint16_t l = s->labels[static_cast<std::size_t>(p)];
      if (l == 0) continue;
      int best = -1;
      double best_d = 1e300;
      for (int k = 0; k < K; ++k) {
        double d = 0;
        for (int64_t b = 0; b < s->bands; ++b) {
          const double diff =
              s->cube[p * s->bands + b] - centroid[static_cast<std::size_t>(k)][static_cast<std::size_t>(b)];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      correct += (best + 1 == l) ? 1 : 0;
      ++total;
    }
    CHECK(correct == total);
  }
}

TEST_CASE("infeasible synthetic class counts are rejected") {
  SynthSpec spec;
  spec.shared_classes = 40;
  spec.source_private_classes = 20;
  spec.target_private_classes = 20;
  CHECK_THROWS_AS(synth_cross_scene(spec), DataError);

  SynthSpec one_class;
  one_class.shared_classes = 1;
  one_class.source_private_classes = 0;
  one_class.target_private_classes = 0;
  CHECK_THROWS_AS(synth_cross_scene(one_class), DataError);
}
