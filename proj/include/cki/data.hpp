#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cki/tensor.hpp"

namespace cki {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Domain { source, target };

inline const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

/// One hyperspectral scene: reflectance cube, per-pixel ground truth and
/// acquisition metadata. Labels use 0 for unlabeled background and 1..K
/// for the classes listed in class_names.
struct SceneCube {
  int64_t height = 0;
  int64_t width = 0;
  int64_t bands = 0;
  Tensor cube;  // [H, W, C]
  std::vector<uint16_t> labels;
  std::vector<std::string> class_names;
  double wavelength_min = 0.0;
  double wavelength_max = 0.0;
  std::string scene_id;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  uint16_t label_at(int64_t r, int64_t c) const {
    return labels[static_cast<std::size_t>(r * width + c)];
  }
  double value_at(int64_t r, int64_t c, int64_t b) const {
    return cube[(r * width + c) * bands + b];
  }
  /// Checks the structural invariants; throws DataError on violation.
  void validate() const;
};

struct DomainSpec {
  int64_t bands = 0;
  int num_classes = 0;
  Domain role = Domain::source;

  void validate() const {
    if (bands < 1) throw DataError("DomainSpec: bands must be >= 1");
    if (num_classes < 2) throw DataError("DomainSpec: need at least 2 classes");
  }
};

/// A batch of spatial windows cut around labeled pixels.
struct WindowBatch {
  Tensor x;  // [B, w, w, C]
  std::vector<int> labels;  // 1..K, never 0
  Domain domain = Domain::source;
  std::vector<std::pair<int64_t, int64_t>> pixel_coords;

  int64_t size() const { return x.rank() > 0 ? x.dim(0) : 0; }
  int64_t window() const { return x.dim(1); }
  int64_t channels() const { return x.dim(3); }
};

struct SplitManifest {
  std::string scene_id;
  int shots_per_class = 0;
  uint64_t seed = 0;
  // train_coords[k] holds the coordinates for class k+1
  std::vector<std::vector<std::pair<int64_t, int64_t>>> train_coords;
  std::vector<std::pair<int64_t, int64_t>> test_coords;

  std::vector<std::pair<int64_t, int64_t>> all_train() const;
  int64_t train_count() const;
};

struct SynthSpec {
  int64_t source_bands = 32;
  int64_t target_bands = 20;
  int shared_classes = 4;
  int source_private_classes = 2;
  int target_private_classes = 1;
  int pixels_per_class = 32;
  double noise_sigma = 0.0;
  uint64_t seed = 0;

  void validate() const;
};

struct SynthResult {
  SceneCube source;
  SceneCube target;
  // 1-based (source class -> target class) for the semantically shared classes
  std::vector<std::pair<int, int>> shared_class_map;
};

// ----------------------------------------------------------------- scene io

struct LoadOptions {
  bool normalize = true;  // per-band min-max to [0,1]
};

/// Reads a scene from a JSON header referencing a float32 band-sequential
/// cube and a uint16 label raster (paths relative to the header).
SceneCube load_scene(const std::string& header_path, const LoadOptions& opts = {});

/// Writes header + payload files. header_path must end in ".json"; the cube
/// and label rasters are written next to it.
void save_scene(const SceneCube& scene, const std::string& header_path);

/// In-place per-band min-max scaling to [0,1]. Constant bands become 0.
void normalize_bands(SceneCube& scene);

// -------------------------------------------------------------------- split

/// Per-class sampling without replacement; a class with fewer labeled
/// pixels than shots contributes all of them. Remaining labeled pixels
/// form the test set. Deterministic in (scene, shots, seed).
SplitManifest make_split(const SceneCube& scene, int shots_per_class, uint64_t seed);

void save_manifest(const SplitManifest& m, const std::string& path);
SplitManifest load_manifest(const std::string& path);

// ------------------------------------------------------------------ windows

enum class PadMode { mirror };

/// Cuts window x window x bands blocks centered on each coordinate (center
/// pixel lands at index window/2), mirror-padding across scene borders.
WindowBatch extract_windows(const SceneCube& scene,
                            const std::vector<std::pair<int64_t, int64_t>>& coords,
                            int window, Domain domain, PadMode pad = PadMode::mirror);

/// Reflects an index into [0, n): -1 -> 0, -2 -> 1, n -> n-1, ...
int64_t mirror_index(int64_t i, int64_t n);

// -------------------------------------------------------------------- synth

inline constexpr int kLatentBands = 64;

/// Latent-continuum coordinates in [0,1] sampled by each band of a scene.
/// The source covers the lower sub-range, the target a shifted upper one.
std::vector<double> band_positions(int64_t nbands, Domain role);

/// Builds a controllable two-scene transfer problem: per-class Gaussian
/// signatures on a latent 64-band continuum, re-sampled by two virtual
/// sensors with different band counts and coverage. Shared classes reuse
/// one latent signature in both scenes; private-class signatures are
/// orthogonalized against every shared one.
SynthResult synth_cross_scene(const SynthSpec& spec);

}  // namespace cki
