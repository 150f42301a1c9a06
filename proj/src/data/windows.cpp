#include "cki/data.hpp"

namespace cki {

int64_t mirror_index(int64_t i, int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
  }
  return i;
}

WindowBatch extract_windows(const SceneCube& scene,
                            const std::vector<std::pair<int64_t, int64_t>>& coords,
                            int window, Domain domain, PadMode) {
  if (window < 2 || window % 2 != 0)
    throw DataError("extract_windows: window must be even and >= 2");
  const int64_t w = window;
  const int64_t half = w / 2;
  const int64_t C = scene.bands;
  const int64_t B = static_cast<int64_t>(coords.size());

  WindowBatch batch;
  batch.domain = domain;
  batch.x = Tensor({B, w, w, C});
  batch.labels.reserve(static_cast<std::size_t>(B));
  batch.pixel_coords = coords;

  for (int64_t i = 0; i < B; ++i) {
    const auto [r, c] = coords[static_cast<std::size_t>(i)];
    if (r < 0 || r >= scene.height || c < 0 || c >= scene.width)
      throw DataError("extract_windows: coordinate outside raster");
    const uint16_t label = scene.label_at(r, c);
    if (label == 0) throw DataError("extract_windows: background pixel in batch");
    batch.labels.push_back(label);
    double* dst = batch.x.data() + i * w * w * C;
    for (int64_t dr = 0; dr < w; ++dr) {
      const int64_t rr = mirror_index(r - half + dr, scene.height);
      for (int64_t dc = 0; dc < w; ++dc) {
        const int64_t cc = mirror_index(c - half + dc, scene.width);
        const double* src = scene.cube.data() + (rr * scene.width + cc) * C;
        std::copy_n(src, C, dst + (dr * w + dc) * C);
      }
    }
  }
  return batch;
}

}  // namespace cki
