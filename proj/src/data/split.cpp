#include <fstream>
#include <sstream>

#include "cki/data.hpp"
#include "cki/rng.hpp"

namespace cki {

std::vector<std::pair<int64_t, int64_t>> SplitManifest::all_train() const {
  std::vector<std::pair<int64_t, int64_t>> out;
  for (const auto& cls : train_coords) out.insert(out.end(), cls.begin(), cls.end());
  return out;
}

int64_t SplitManifest::train_count() const {
  int64_t n = 0;
  for (const auto& cls : train_coords) n += static_cast<int64_t>(cls.size());
  return n;
}

SplitManifest make_split(const SceneCube& scene, int shots_per_class, uint64_t seed) {
  if (shots_per_class < 1) throw DataError("make_split: shots_per_class must be >= 1");
  const int K = scene.num_classes();

  std::vector<std::vector<std::pair<int64_t, int64_t>>> by_class(
      static_cast<std::size_t>(K));
  for (int64_t r = 0; r < scene.height; ++r)
    for (int64_t c = 0; c < scene.width; ++c) {
      const uint16_t l = scene.label_at(r, c);
      if (l > 0) by_class[static_cast<std::size_t>(l - 1)].emplace_back(r, c);
    }

  SplitManifest m;
  m.scene_id = scene.scene_id;
  m.shots_per_class = shots_per_class;
  m.seed = seed;
  m.train_coords.resize(static_cast<std::size_t>(K));

  Rng rng(seed);
  for (int k = 0; k < K; ++k) {
    auto& coords = by_class[static_cast<std::size_t>(k)];
    if (coords.empty())
      throw DataError("make_split: class " + std::to_string(k + 1) + " has no labeled pixels");
    rng.shuffle(coords);
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(shots_per_class),
                                            coords.size());
    m.train_coords[static_cast<std::size_t>(k)].assign(coords.begin(),
                                                       coords.begin() + static_cast<long>(take));
    m.test_coords.insert(m.test_coords.end(), coords.begin() + static_cast<long>(take),
                         coords.end());
  }
  return m;
}

void save_manifest(const SplitManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  out << "scene_id " << m.scene_id << "\n";
  out << "seed " << m.seed << "\n";
  out << "shots_per_class " << m.shots_per_class << "\n";
  for (std::size_t k = 0; k < m.train_coords.size(); ++k) {
    out << "train_class " << (k + 1) << " " << m.train_coords[k].size() << "\n";
    for (const auto& [r, c] : m.train_coords[k]) out << r << " " << c << "\n";
  }
  out << "test " << m.test_coords.size() << "\n";
  for (const auto& [r, c] : m.test_coords) out << r << " " << c << "\n";
}

SplitManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing manifest " + path);
  SplitManifest m;
  std::string key;
  while (in >> key) {
    if (key == "scene_id") {
      in >> m.scene_id;
    } else if (key == "seed") {
      in >> m.seed;
    } else if (key == "shots_per_class") {
      in >> m.shots_per_class;
    } else if (key == "train_class") {
      std::size_t k = 0, n = 0;
      in >> k >> n;
      if (k == 0) throw DataError("manifest: bad class index");
      if (m.train_coords.size() < k) m.train_coords.resize(k);
      auto& v = m.train_coords[k - 1];
      for (std::size_t i = 0; i < n; ++i) {
        int64_t r = 0, c = 0;
        in >> r >> c;
        v.emplace_back(r, c);
      }
    } else if (key == "test") {
      std::size_t n = 0;
      in >> n;
      for (std::size_t i = 0; i < n; ++i) {
        int64_t r = 0, c = 0;
        in >> r >> c;
        m.test_coords.emplace_back(r, c);
      }
    } else {
      throw DataError("manifest: unknown key '" + key + "'");
    }
  }
  return m;
}

}  // namespace cki
