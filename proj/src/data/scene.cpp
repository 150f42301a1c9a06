#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <vector>

#include "cki/data.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cki {

void SceneCube::validate() const {
  if (height <= 0 || width <= 0 || bands <= 0)
    throw DataError("scene: non-positive dimensions");
  if (cube.size() != height * width * bands)
    throw DataError("scene: cube size does not match (height, width, bands)");
  if (static_cast<int64_t>(labels.size()) != height * width)
    throw DataError("scene: label raster size mismatch");
  for (int64_t i = 0; i < cube.size(); ++i)
    if (!std::isfinite(cube[i])) throw DataError("scene: non-finite cube value");
  const int K = num_classes();
  std::vector<bool> seen(static_cast<std::size_t>(K) + 1, false);
  for (uint16_t l : labels) {
    if (l > K) throw DataError("scene: label index out of range");
    seen[l] = true;
  }
  for (int k = 1; k <= K; ++k)
    if (!seen[static_cast<std::size_t>(k)])
      throw DataError("scene: class " + std::to_string(k) + " (" +
                      class_names[static_cast<std::size_t>(k - 1)] + ") has no labeled pixels");
}

namespace {

std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + p.string());
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(len));
  in.read(buf.data(), len);
  if (!in) throw DataError("short read: " + p.string());
  return buf;
}

}  // namespace

SceneCube load_scene(const std::string& header_path, const LoadOptions& opts) {
  const fs::path hp(header_path);
  if (!fs::exists(hp)) throw DataError("missing header file: " + header_path);
  std::ifstream in(hp);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("bad scene header " + header_path + ": " + e.what());
  }

  SceneCube s;
  try {
    s.height = j.at("height").get<int64_t>();
    s.width = j.at("width").get<int64_t>();
    s.bands = j.at("bands").get<int64_t>();
    s.class_names = j.at("class_names").get<std::vector<std::string>>();
    s.scene_id = j.value("scene_id", hp.stem().string());
    s.wavelength_min = j.value("wavelength_min", 0.0);
    s.wavelength_max = j.value("wavelength_max", 0.0);
  } catch (const json::exception& e) {
    throw DataError("bad scene header " + header_path + ": " + e.what());
  }

  const fs::path dir = hp.parent_path();
  const fs::path cube_path = dir / j.at("cube_file").get<std::string>();
  const fs::path label_path = dir / j.at("label_file").get<std::string>();

  const std::vector<char> raw = read_file(cube_path);
  const int64_t expect = s.height * s.width * s.bands;
  if (static_cast<int64_t>(raw.size()) != expect * 4)
    throw DataError("cube payload size mismatch: header declares " + std::to_string(expect) +
                    " float32 values, file holds " + std::to_string(raw.size() / 4));

  // band-sequential float32 -> [H, W, C] doubles
  s.cube = Tensor({s.height, s.width, s.bands});
  const auto* fv = reinterpret_cast<const float*>(raw.data());
  for (int64_t b = 0; b < s.bands; ++b)
    for (int64_t r = 0; r < s.height; ++r)
      for (int64_t c = 0; c < s.width; ++c)
        s.cube[(r * s.width + c) * s.bands + b] =
            static_cast<double>(fv[(b * s.height + r) * s.width + c]);

  const std::vector<char> lraw = read_file(label_path);
  if (static_cast<int64_t>(lraw.size()) != s.height * s.width * 2)
    throw DataError("label raster size mismatch for " + label_path.string());
  s.labels.resize(static_cast<std::size_t>(s.height * s.width));
  const auto* lv = reinterpret_cast<const uint16_t*>(lraw.data());
  for (std::size_t i = 0; i < s.labels.size(); ++i) s.labels[i] = lv[i];

  s.validate();
  if (opts.normalize) normalize_bands(s);
  return s;
}

void save_scene(const SceneCube& scene, const std::string& header_path) {
  scene.validate();
  const fs::path hp(header_path);
  const fs::path dir = hp.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  const std::string stem = hp.stem().string();
  const std::string cube_name = stem + ".cube.f32";
  const std::string label_name = stem + ".labels.u16";

  {
    std::ofstream out(dir / cube_name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / cube_name).string());
    std::vector<float> fv(static_cast<std::size_t>(scene.cube.size()));
    for (int64_t b = 0; b < scene.bands; ++b)
      for (int64_t r = 0; r < scene.height; ++r)
        for (int64_t c = 0; c < scene.width; ++c)
          fv[static_cast<std::size_t>((b * scene.height + r) * scene.width + c)] =
              static_cast<float>(scene.cube[(r * scene.width + c) * scene.bands + b]);
    out.write(reinterpret_cast<const char*>(fv.data()),
              static_cast<std::streamsize>(fv.size() * 4));
  }
  {
    std::ofstream out(dir / label_name, std::ios::binary);
    if (!out) throw DataError("cannot write " + (dir / label_name).string());
    out.write(reinterpret_cast<const char*>(scene.labels.data()),
              static_cast<std::streamsize>(scene.labels.size() * 2));
  }

  json j;
  j["scene_id"] = scene.scene_id;
  j["height"] = scene.height;
  j["width"] = scene.width;
  j["bands"] = scene.bands;
  j["cube_file"] = cube_name;
  j["label_file"] = label_name;
  j["class_names"] = scene.class_names;
  j["wavelength_min"] = scene.wavelength_min;
  j["wavelength_max"] = scene.wavelength_max;
  std::ofstream out(hp);
  if (!out) throw DataError("cannot write " + header_path);
  out << j.dump(2) << "\n";
}

void normalize_bands(SceneCube& scene) {
  const int64_t n = scene.height * scene.width;
  for (int64_t b = 0; b < scene.bands; ++b) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (int64_t p = 0; p < n; ++p) {
      const double v = scene.cube[p * scene.bands + b];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double span = hi - lo;
    for (int64_t p = 0; p < n; ++p) {
      double& v = scene.cube[p * scene.bands + b];
      v = span > 0.0 ? (v - lo) / span : 0.0;
    }
  }
}

}  // namespace cki
