#include <algorithm>
#include <cmath>

#include "cki/data.hpp"
#include "cki/rng.hpp"

namespace cki {

void SynthSpec::validate() const {
  if (shared_classes < 1) throw DataError("synth: need at least one shared class");
  if (source_private_classes < 0 || target_private_classes < 0 || pixels_per_class < 1)
    throw DataError("synth: negative counts");
  if (source_bands < 1 || target_bands < 1) throw DataError("synth: bands must be >= 1");
  if (noise_sigma < 0.0) throw DataError("synth: negative noise_sigma");
  if (shared_classes + source_private_classes < 2)
    throw DataError("synth: source needs at least 2 classes");
  if (shared_classes + target_private_classes < 2)
    throw DataError("synth: target needs at least 2 classes");
  if (shared_classes + source_private_classes + target_private_classes > kLatentBands)
    throw DataError("synth: more orthogonalized signatures than latent dimensions");
}

std::vector<double> band_positions(int64_t nbands, Domain role) {
  // source covers [0, 0.8] of the latent continuum, target [0.2, 1.0]
  const double lo = role == Domain::source ? 0.0 : 0.2;
  const double hi = role == Domain::source ? 0.8 : 1.0;
  std::vector<double> pos(static_cast<std::size_t>(nbands));
  for (int64_t i = 0; i < nbands; ++i)
    pos[static_cast<std::size_t>(i)] =
        nbands == 1 ? 0.5 * (lo + hi)
                    : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(nbands - 1);
  return pos;
}

namespace {

// linear interpolation of a latent signature (samples at i/(L-1))
double interp_latent(const std::vector<double>& sig, double t) {
  const int64_t L = static_cast<int64_t>(sig.size());
  const double x = t * static_cast<double>(L - 1);
  const int64_t i0 = std::clamp<int64_t>(static_cast<int64_t>(std::floor(x)), 0, L - 2);
  const double f = x - static_cast<double>(i0);
  return sig[static_cast<std::size_t>(i0)] * (1.0 - f) +
         sig[static_cast<std::size_t>(i0 + 1)] * f;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rescale_01(std::vector<double>& v, double lo, double hi) {
  const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  const double span = *mx - *mn;
  for (double& x : v) x = span > 1e-12 ? lo + (hi - lo) * (x - *mn) / span : 0.5 * (lo + hi);
}

SceneCube build_scene(const std::vector<std::vector<double>>& signatures,
                      const std::vector<std::string>& names, int64_t nbands, Domain role,
                      int pixels_per_class, double noise_sigma, Rng& rng,
                      const std::string& scene_id) {
  const int K = static_cast<int>(signatures.size());
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(pixels_per_class))));
  SceneCube s;
  s.scene_id = scene_id;
  s.class_names = names;
  s.bands = nbands;
  s.height = side;
  s.width = static_cast<int64_t>(K) * side;
  s.cube = Tensor({s.height, s.width, s.bands});
  s.labels.assign(static_cast<std::size_t>(s.height * s.width), 0);

  const std::vector<double> pos = band_positions(nbands, role);
  // latent [0,1] maps to 0.4..2.5 micrometers of virtual wavelength
  s.wavelength_min = 0.4 + 2.1 * pos.front();
  s.wavelength_max = 0.4 + 2.1 * pos.back();

  for (int k = 0; k < K; ++k) {
    int placed = 0;
    for (int dr = 0; dr < side && placed < pixels_per_class; ++dr)
      for (int dc = 0; dc < side && placed < pixels_per_class; ++dc) {
        const int64_t r = dr;
        const int64_t c = static_cast<int64_t>(k) * side + dc;
        s.labels[static_cast<std::size_t>(r * s.width + c)] = static_cast<uint16_t>(k + 1);
        ++placed;
      }
  }

  for (int64_t r = 0; r < s.height; ++r)
    for (int64_t c = 0; c < s.width; ++c) {
      const uint16_t l = s.label_at(r, c);
      double* px = s.cube.data() + (r * s.width + c) * nbands;
      for (int64_t b = 0; b < nbands; ++b) {
        double v = 0.2;  // neutral background reflectance
        if (l > 0)
          v = interp_latent(signatures[static_cast<std::size_t>(l - 1)],
                            pos[static_cast<std::size_t>(b)]);
        if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
        px[b] = std::max(0.0, v);
      }
    }
  return s;
}

}  // namespace

SynthResult synth_cross_scene(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  const int total = spec.shared_classes + spec.source_private_classes +
                    spec.target_private_classes;

  // Gaussian bumps with deterministic centers spread over the continuum,
  // widths and amplitudes drawn from the seeded stream.
  std::vector<std::vector<double>> latent(static_cast<std::size_t>(total));
  for (int k = 0; k < total; ++k) {
    const double mu =
        total == 1 ? 0.5 : 0.08 + 0.84 * static_cast<double>(k) / static_cast<double>(total - 1);
    const double sigma = rng.uniform(0.06, 0.14);
    const double amp = rng.uniform(0.7, 1.0);
    auto& sig = latent[static_cast<std::size_t>(k)];
    sig.resize(kLatentBands);
    for (int i = 0; i < kLatentBands; ++i) {
      const double t = static_cast<double>(i) / (kLatentBands - 1);
      sig[static_cast<std::size_t>(i)] =
          amp * std::exp(-0.5 * (t - mu) * (t - mu) / (sigma * sigma));
    }
  }

  // private-class signatures lose their components along every shared one
  for (int k = spec.shared_classes; k < total; ++k) {
    auto& sig = latent[static_cast<std::size_t>(k)];
    for (int j = 0; j < spec.shared_classes; ++j) {
      const auto& u = latent[static_cast<std::size_t>(j)];
      const double coeff = dot(sig, u) / dot(u, u);
      for (int i = 0; i < kLatentBands; ++i)
        sig[static_cast<std::size_t>(i)] -= coeff * u[static_cast<std::size_t>(i)];
    }
    rescale_01(sig, 0.1, 0.9);
  }

  std::vector<std::vector<double>> src_sigs, tgt_sigs;
  std::vector<std::string> src_names, tgt_names;
  for (int k = 0; k < spec.shared_classes; ++k) {
    src_sigs.push_back(latent[static_cast<std::size_t>(k)]);
    tgt_sigs.push_back(latent[static_cast<std::size_t>(k)]);
    src_names.push_back("shared_" + std::to_string(k + 1));
    tgt_names.push_back("shared_" + std::to_string(k + 1));
  }
  for (int k = 0; k < spec.source_private_classes; ++k) {
    src_sigs.push_back(latent[static_cast<std::size_t>(spec.shared_classes + k)]);
    src_names.push_back("src_only_" + std::to_string(k + 1));
  }
  for (int k = 0; k < spec.target_private_classes; ++k) {
    tgt_sigs.push_back(
        latent[static_cast<std::size_t>(spec.shared_classes + spec.source_private_classes + k)]);
    tgt_names.push_back("tgt_only_" + std::to_string(k + 1));
  }

  SynthResult out;
  out.source = build_scene(src_sigs, src_names, spec.source_bands, Domain::source,
                           spec.pixels_per_class, spec.noise_sigma, rng,
                           "synth-src-" + std::to_string(spec.seed));
  out.target = build_scene(tgt_sigs, tgt_names, spec.target_bands, Domain::target,
                           spec.pixels_per_class, spec.noise_sigma, rng,
                           "synth-tgt-" + std::to_string(spec.seed));
  for (int k = 1; k <= spec.shared_classes; ++k) out.shared_class_map.emplace_back(k, k);
  return out;
}

}  // namespace cki
