#pragma once

#include <memory>
#include <string>
#include <vector>

#include "cki/data.hpp"
#include "cki/graph.hpp"
#include "cki/rng.hpp"

namespace cki {

/// Patch geometry and transformer sizing for one learner.
struct PatchConfig {
  int p_h = 4;
  int p_w = 4;
  int p_c = 4;
  int embed_dim = 64;
  int depth = 2;
  int heads = 4;

  void validate(int64_t window, int64_t channels) const;
  int64_t tokens(int64_t window, int64_t channels) const {
    return (window / p_h) * (window / p_w) * (channels / p_c);
  }
  int64_t patch_len() const {
    return static_cast<int64_t>(p_h) * p_w * p_c;
  }
};

/// Index map for cutting [B,w,w,C] feature blocks into non-overlapping
/// patches, flattened (spatial-row, spatial-col, spectral-block) with
/// (dr, dc, db) element order inside a token.
std::shared_ptr<const std::vector<int64_t>> patchify_map(int64_t batch, int64_t window,
                                                         int64_t channels,
                                                         const PatchConfig& cfg);
std::shared_ptr<const std::vector<int64_t>> unpatchify_map(int64_t batch, int64_t window,
                                                           int64_t channels,
                                                           const PatchConfig& cfg);

struct LayerNormParams {
  Param* gamma = nullptr;
  Param* beta = nullptr;
};

struct AttentionParams {
  Param *Wq = nullptr, *bq = nullptr;
  Param *Wk = nullptr, *bk = nullptr;
  Param *Wv = nullptr, *bv = nullptr;
  Param *Wo = nullptr, *bo = nullptr;
};

struct BlockParams {
  LayerNormParams ln1, ln2;
  AttentionParams att;
  Param *W1 = nullptr, *b1 = nullptr;  // FFN expand
  Param *W2 = nullptr, *b2 = nullptr;  // FFN project (zero => identity stage)
};

struct FusionParams {
  AttentionParams self_att;   // intra-modality views (shared between both)
  AttentionParams cross_att;  // inter-modality views (shared between both directions)
  LayerNormParams ln_mix;
  Param *M1 = nullptr, *c1 = nullptr;  // pointwise channel mixing
  Param *M2 = nullptr, *c2 = nullptr;
  Param *view_w = nullptr, *view_b = nullptr;  // 4 -> 1 view reduction
  LayerNormParams ln_out;
  Param *W1 = nullptr, *b1 = nullptr;  // final FFN
  Param *W2 = nullptr, *b2 = nullptr;
};

/// The interaction-fusion spatial/spectral transformer learner: two token
/// streams (block-wise spectral embedding vs shared spatial embedding with
/// positions), `depth` pre-norm MSA/FFN blocks each, a 2x2 self/cross
/// attention fusion compressed back to one view, and token mean pooling.
class IfssNet {
 public:
  IfssNet(ParamSet& ps, const std::string& prefix, const PatchConfig& cfg, int64_t window,
          int64_t channels, Rng& rng);

  /// features: [B*w*w, C] row-per-pixel layout. Returns [B, embed_dim].
  Var forward(Graph& g, Var features, int64_t batch) const;

  Var patchify(Graph& g, Var features, int64_t batch) const;
  Var unpatchify(Graph& g, Var tokens, int64_t batch) const;
  Var embed_spatial(Graph& g, Var tokens, int64_t batch, bool with_positions = true) const;
  Var embed_spectral(Graph& g, Var tokens, int64_t batch) const;
  Var transformer_block(Graph& g, Var z, const BlockParams& p, int64_t batch) const;

  /// The 2x2 fusion matrix: intra-modality views from one shared
  /// self-attention, inter-modality views from one shared cross-attention.
  struct FusionViews {
    Var z11, z12, z21, z22;
  };
  FusionViews fusion_views(Graph& g, Var spectral_tokens, Var spatial_tokens,
                           int64_t batch) const;
  Var fuse(Graph& g, Var spectral_tokens, Var spatial_tokens, int64_t batch) const;

  int64_t tokens() const { return n_tokens_; }
  const PatchConfig& cfg() const { return cfg_; }
  int64_t window() const { return window_; }
  int64_t channels() const { return channels_; }
  std::vector<BlockParams>& spectral_blocks() { return spectral_blocks_; }
  std::vector<BlockParams>& spatial_blocks() { return spatial_blocks_; }
  FusionParams& fusion() { return fusion_; }

 private:
  PatchConfig cfg_;
  int64_t window_ = 0;
  int64_t channels_ = 0;
  int64_t n_tokens_ = 0;
  int64_t n_spec_blocks_ = 0;

  Param *spatial_W_ = nullptr, *spatial_b_ = nullptr, *pos_ = nullptr;
  std::vector<Param*> spectral_W_, spectral_b_;
  std::vector<BlockParams> spectral_blocks_, spatial_blocks_;
  FusionParams fusion_;
};

/// Xavier-uniform weight + zero bias pair.
Param& add_linear_weight(ParamSet& ps, const std::string& name, int64_t in, int64_t out,
                         Rng& rng);

}  // namespace cki
