#pragma once

#include <memory>
#include <set>
#include <string>
#include <vector>

#include "cki/data.hpp"
#include "cki/graph.hpp"
#include "cki/ifss.hpp"
#include "cki/rng.hpp"

namespace cki {

/// Loss-term multipliers. lambda_adv follows the warm-up schedule and is
/// rewritten by the training loop each epoch.
struct LossWeights {
  double lambda_adv = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 1.0;
  double tau = 1.0;

  void validate() const {
    if (lambda_adv < 0 || alpha < 0 || beta < 0 || gamma < 0)
      throw ConfigError("loss weights must be >= 0");
    if (tau <= 0) throw ConfigError("tau must be > 0");
  }
};

struct AblationFlags {
  bool asc = false;   // adversarial spectral alignment
  bool cksp = false;  // source-sample similarity weighting
  bool ce = false;    // complementary branch
  bool di = false;    // distillation into the student

  static AblationFlags all() { return {true, true, true, true}; }
  static AblationFlags none() { return {}; }
  std::string str() const;
};

struct EncoderParams {
  Param *W1 = nullptr, *b1 = nullptr;
  Param *W2 = nullptr, *b2 = nullptr;
};

struct HeadParams {
  Param *W1 = nullptr, *b1 = nullptr;
  Param *W2 = nullptr, *b2 = nullptr;
};

struct DiscriminatorParams {
  Param *W1 = nullptr, *b1 = nullptr;
  Param *W2 = nullptr, *b2 = nullptr;
};

struct ModelConfig {
  int64_t window = 8;
  int64_t common_channels = 16;
  int64_t source_bands = 0;
  int64_t target_bands = 0;
  int num_source_classes = 0;
  int num_target_classes = 0;
  PatchConfig patch;
  int encoder_hidden = 8;
  int encoder_kernel1 = 5;
  int encoder_kernel2 = 3;
  int encoder_stride = 2;
  int disc_hidden = 32;
  int head_hidden = 0;  // 0 => embed_dim
  uint64_t init_seed = 0;

  void validate() const;
};

/// The full parameter set: per-domain spectral encoders, two domain
/// discriminators, three token-transformer learners and four MLP heads.
/// The student consumes the same target encoder instance as the shared
/// path.
class CkiModel {
 public:
  explicit CkiModel(const ModelConfig& config);

  ModelConfig cfg;
  ParamSet params;

  EncoderParams F_s, F_t, F_t_prime;
  DiscriminatorParams disc_adv;  // adversarially trained (through the GRL)
  DiscriminatorParams disc_sim;  // non-adversarial similarity probe
  std::unique_ptr<IfssNet> G, G_prime, G_stu;
  HeadParams T_s, T_t, T_t_prime, T_stu;

  /// windows [B,w,w,bands] -> per-pixel features [B*w*w, common_channels].
  Var encode(Graph& g, const Tensor& windows, const EncoderParams& enc) const;
  /// per-pixel features -> spatially pooled [B, common_channels].
  Var pool_spatial(Graph& g, Var enc_features, int64_t batch) const;
  /// pooled features -> probability of "source" in (0,1), shape [B,1].
  Var discriminate(Graph& g, Var pooled, const DiscriminatorParams& d) const;
  /// representation [B,D] -> class logits.
  Var head(Graph& g, Var rep, const HeadParams& h) const;
};

// ------------------------------------------------------------- persistence

/// Versioned binary checkpoint (parameters bit-exact) plus a text sidecar
/// ("<path>.shapes.txt") listing every tensor shape.
void save_checkpoint(const CkiModel& model, const LossWeights& weights,
                     const AblationFlags& flags, const std::string& path);

struct Checkpoint {
  ModelConfig cfg;
  LossWeights weights;
  AblationFlags flags;
  std::unique_ptr<CkiModel> model;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace cki
