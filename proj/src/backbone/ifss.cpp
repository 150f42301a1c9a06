#include "cki/ifss.hpp"

#include <cmath>

namespace cki {

void PatchConfig::validate(int64_t window, int64_t channels) const {
  if (p_h <= 0 || p_w <= 0 || p_c <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0)
    throw DataError("patch config: non-positive field");
  if (window % p_h != 0 || window % p_w != 0)
    throw DataError("patch config: window " + std::to_string(window) +
                    " not divisible by spatial patch " + std::to_string(p_h) + "x" +
                    std::to_string(p_w));
  if (channels % p_c != 0)
    throw DataError("patch config: channel count " + std::to_string(channels) +
                    " not divisible by spectral block " + std::to_string(p_c));
  if (embed_dim % heads != 0)
    throw DataError("patch config: embed_dim not divisible by heads");
}

std::shared_ptr<const std::vector<int64_t>> patchify_map(int64_t batch, int64_t window,
                                                         int64_t channels,
                                                         const PatchConfig& cfg) {
  cfg.validate(window, channels);
  const int64_t ph = cfg.p_h, pw = cfg.p_w, pc = cfg.p_c;
  const int64_t nr = window / ph, nc = window / pw, nb = channels / pc;
  const int64_t N = nr * nc * nb;
  const int64_t L = cfg.patch_len();
  auto map = std::make_shared<std::vector<int64_t>>(
      static_cast<std::size_t>(batch * N * L));
  int64_t o = 0;
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t pr = 0; pr < nr; ++pr)
      for (int64_t cc = 0; cc < nc; ++cc)
        for (int64_t pb = 0; pb < nb; ++pb)
          for (int64_t dr = 0; dr < ph; ++dr)
            for (int64_t dc = 0; dc < pw; ++dc)
              for (int64_t db = 0; db < pc; ++db) {
                const int64_t r = pr * ph + dr;
                const int64_t c = cc * pw + dc;
                const int64_t ch = pb * pc + db;
                (*map)[static_cast<std::size_t>(o++)] =
                    ((b * window + r) * window + c) * channels + ch;
              }
  return map;
}

std::shared_ptr<const std::vector<int64_t>> unpatchify_map(int64_t batch, int64_t window,
                                                           int64_t channels,
                                                           const PatchConfig& cfg) {
  auto fwd = patchify_map(batch, window, channels, cfg);
  auto inv = std::make_shared<std::vector<int64_t>>(fwd->size());
  for (std::size_t i = 0; i < fwd->size(); ++i)
    (*inv)[static_cast<std::size_t>((*fwd)[i])] = static_cast<int64_t>(i);
  return inv;
}

Param& add_linear_weight(ParamSet& ps, const std::string& name, int64_t in, int64_t out,
                         Rng& rng) {
  Tensor w({in, out});
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-limit, limit);
  return ps.add(name, std::move(w));
}

namespace {

LayerNormParams add_ln(ParamSet& ps, const std::string& prefix, int64_t d) {
  LayerNormParams ln;
  ln.gamma = &ps.add(prefix + ".gamma", Tensor::full({d}, 1.0));
  ln.beta = &ps.add(prefix + ".beta", Tensor::zeros({d}));
  return ln;
}

AttentionParams add_attention(ParamSet& ps, const std::string& prefix, int64_t d, Rng& rng) {
  AttentionParams a;
  a.Wq = &add_linear_weight(ps, prefix + ".Wq", d, d, rng);
  a.bq = &ps.add(prefix + ".bq", Tensor::zeros({d}));
  a.Wk = &add_linear_weight(ps, prefix + ".Wk", d, d, rng);
  a.bk = &ps.add(prefix + ".bk", Tensor::zeros({d}));
  a.Wv = &add_linear_weight(ps, prefix + ".Wv", d, d, rng);
  a.bv = &ps.add(prefix + ".bv", Tensor::zeros({d}));
  a.Wo = &add_linear_weight(ps, prefix + ".Wo", d, d, rng);
  a.bo = &ps.add(prefix + ".bo", Tensor::zeros({d}));
  return a;
}

BlockParams add_block(ParamSet& ps, const std::string& prefix, int64_t d, Rng& rng) {
  BlockParams b;
  b.ln1 = add_ln(ps, prefix + ".ln1", d);
  b.att = add_attention(ps, prefix + ".att", d, rng);
  b.ln2 = add_ln(ps, prefix + ".ln2", d);
  const int64_t hidden = 2 * d;
  b.W1 = &add_linear_weight(ps, prefix + ".ffn.W1", d, hidden, rng);
  b.b1 = &ps.add(prefix + ".ffn.b1", Tensor::zeros({hidden}));
  b.W2 = &add_linear_weight(ps, prefix + ".ffn.W2", hidden, d, rng);
  b.b2 = &ps.add(prefix + ".ffn.b2", Tensor::zeros({d}));
  return b;
}

Var run_attention(Graph& g, Var q_tokens, Var kv_tokens, const AttentionParams& p,
                  int64_t batch, int64_t nq, int64_t nkv, int heads) {
  Var q = linear(g, q_tokens, *p.Wq, *p.bq);
  Var k = linear(g, kv_tokens, *p.Wk, *p.bk);
  Var v = linear(g, kv_tokens, *p.Wv, *p.bv);
  Var o = g.attention(q, k, v, batch, nq, nkv, heads);
  return linear(g, o, *p.Wo, *p.bo);
}

}  // namespace

IfssNet::IfssNet(ParamSet& ps, const std::string& prefix, const PatchConfig& cfg,
                 int64_t window, int64_t channels, Rng& rng)
    : cfg_(cfg), window_(window), channels_(channels) {
  cfg.validate(window, channels);
  n_tokens_ = cfg.tokens(window, channels);
  n_spec_blocks_ = channels / cfg.p_c;
  const int64_t L = cfg.patch_len();
  const int64_t D = cfg.embed_dim;

  spatial_W_ = &add_linear_weight(ps, prefix + ".spat.embed.W", L, D, rng);
  spatial_b_ = &ps.add(prefix + ".spat.embed.b", Tensor::zeros({D}));
  Tensor pos({n_tokens_, D});
  for (int64_t i = 0; i < pos.size(); ++i) pos[i] = 0.02 * rng.normal();
  pos_ = &ps.add(prefix + ".spat.pos", std::move(pos));

  for (int64_t blk = 0; blk < n_spec_blocks_; ++blk) {
    spectral_W_.push_back(&add_linear_weight(
        ps, prefix + ".spec.embed" + std::to_string(blk) + ".W", L, D, rng));
    spectral_b_.push_back(
        &ps.add(prefix + ".spec.embed" + std::to_string(blk) + ".b", Tensor::zeros({D})));
  }

  for (int d = 0; d < cfg.depth; ++d) {
    spectral_blocks_.push_back(add_block(ps, prefix + ".spec.block" + std::to_string(d), D, rng));
    spatial_blocks_.push_back(add_block(ps, prefix + ".spat.block" + std::to_string(d), D, rng));
  }

  fusion_.self_att = add_attention(ps, prefix + ".fuse.self", D, rng);
  fusion_.cross_att = add_attention(ps, prefix + ".fuse.cross", D, rng);
  fusion_.ln_mix = add_ln(ps, prefix + ".fuse.ln_mix", D);
  fusion_.M1 = &add_linear_weight(ps, prefix + ".fuse.M1", D, D, rng);
  fusion_.c1 = &ps.add(prefix + ".fuse.c1", Tensor::zeros({D}));
  fusion_.M2 = &add_linear_weight(ps, prefix + ".fuse.M2", D, D, rng);
  fusion_.c2 = &ps.add(prefix + ".fuse.c2", Tensor::zeros({D}));
  fusion_.view_w = &ps.add(prefix + ".fuse.view_w", Tensor::full({4}, 0.25));
  fusion_.view_b = &ps.add(prefix + ".fuse.view_b", Tensor::zeros({1}));
  fusion_.ln_out = add_ln(ps, prefix + ".fuse.ln_out", D);
  fusion_.W1 = &add_linear_weight(ps, prefix + ".fuse.ffn.W1", D, 2 * D, rng);
  fusion_.b1 = &ps.add(prefix + ".fuse.ffn.b1", Tensor::zeros({2 * D}));
  fusion_.W2 = &add_linear_weight(ps, prefix + ".fuse.ffn.W2", 2 * D, D, rng);
  fusion_.b2 = &ps.add(prefix + ".fuse.ffn.b2", Tensor::zeros({D}));
}

Var IfssNet::patchify(Graph& g, Var features, int64_t batch) const {
  auto map = patchify_map(batch, window_, channels_, cfg_);
  return g.permute_gather(features, map, {batch * n_tokens_, cfg_.patch_len()});
}

Var IfssNet::unpatchify(Graph& g, Var tokens, int64_t batch) const {
  auto map = unpatchify_map(batch, window_, channels_, cfg_);
  return g.permute_gather(tokens, map, {batch * window_ * window_, channels_});
}

Var IfssNet::embed_spatial(Graph& g, Var tokens, int64_t batch, bool with_positions) const {
  Var e = linear(g, tokens, *spatial_W_, *spatial_b_);
  if (with_positions) e = g.tile_add_rows(e, g.leaf(*pos_), batch);
  return e;
}

Var IfssNet::embed_spectral(Graph& g, Var tokens, int64_t batch) const {
  const int64_t R = batch * n_tokens_;
  const int64_t Bc = n_spec_blocks_;
  const int64_t per = R / Bc;
  // token index t has spectral block t % Bc (N is a multiple of Bc)
  std::vector<Var> parts;
  parts.reserve(static_cast<std::size_t>(Bc));
  for (int64_t blk = 0; blk < Bc; ++blk) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<std::size_t>(per));
    for (int64_t i = blk; i < R; i += Bc) idx.push_back(i);
    Var sub = g.gather_rows(tokens, std::move(idx));
    parts.push_back(linear(g, sub, *spectral_W_[static_cast<std::size_t>(blk)],
                           *spectral_b_[static_cast<std::size_t>(blk)]));
  }
  Var stacked = g.concat_rows(parts);
  std::vector<int64_t> restore(static_cast<std::size_t>(R));
  for (int64_t i = 0; i < R; ++i)
    restore[static_cast<std::size_t>(i)] = (i % Bc) * per + i / Bc;
  return g.gather_rows(stacked, std::move(restore));
}

Var IfssNet::transformer_block(Graph& g, Var z, const BlockParams& p, int64_t batch) const {
  const int64_t N = z.val().dim(0) / batch;
  Var h = g.layernorm_rows(z, g.leaf(*p.ln1.gamma), g.leaf(*p.ln1.beta));
  Var att = run_attention(g, h, h, p.att, batch, N, N, cfg_.heads);
  Var y = g.add(z, att);
  Var h2 = g.layernorm_rows(y, g.leaf(*p.ln2.gamma), g.leaf(*p.ln2.beta));
  Var f = linear(g, g.gelu(linear(g, h2, *p.W1, *p.b1)), *p.W2, *p.b2);
  return g.add(y, f);
}

IfssNet::FusionViews IfssNet::fusion_views(Graph& g, Var spectral_tokens, Var spatial_tokens,
                                           int64_t batch) const {
  if (!spectral_tokens.val().same_shape(spatial_tokens.val()))
    throw DataError("fuse: branch shape mismatch");
  const int64_t N = spectral_tokens.val().dim(0) / batch;
  const FusionParams& p = fusion_;
  FusionViews v;
  v.z11 = run_attention(g, spectral_tokens, spectral_tokens, p.self_att, batch, N, N,
                        cfg_.heads);
  v.z22 = run_attention(g, spatial_tokens, spatial_tokens, p.self_att, batch, N, N,
                        cfg_.heads);
  v.z12 = run_attention(g, spectral_tokens, spatial_tokens, p.cross_att, batch, N, N,
                        cfg_.heads);
  v.z21 = run_attention(g, spatial_tokens, spectral_tokens, p.cross_att, batch, N, N,
                        cfg_.heads);
  return v;
}

Var IfssNet::fuse(Graph& g, Var spectral_tokens, Var spatial_tokens, int64_t batch) const {
  const int64_t N = spectral_tokens.val().dim(0) / batch;
  const FusionParams& p = fusion_;
  FusionViews v = fusion_views(g, spectral_tokens, spatial_tokens, batch);

  // view-major stack [4*(B*N), D]
  Var zm = g.concat_rows({v.z11, v.z12, v.z21, v.z22});
  Var mixed = linear(
      g, linear(g, g.layernorm_rows(zm, g.leaf(*p.ln_mix.gamma), g.leaf(*p.ln_mix.beta)),
                *p.M1, *p.c1),
      *p.M2, *p.c2);
  Var res = g.add(g.gelu(mixed), zm);

  // final convolution collapses the view axis 4 -> 1
  Var vw = g.leaf(*p.view_w);
  const int64_t R = batch * N;
  Var acc;
  for (int v = 0; v < 4; ++v) {
    Var part = g.smul(g.slice_rows(res, v * R, R),
                      g.slice_rows(g.reshape(vw, {4, 1}), v, 1));
    acc = v == 0 ? part : g.add(acc, part);
  }
  Var zhat = g.adds(acc, g.leaf(*p.view_b));

  Var h = g.layernorm_rows(zhat, g.leaf(*p.ln_out.gamma), g.leaf(*p.ln_out.beta));
  Var f = linear(g, g.gelu(linear(g, h, *p.W1, *p.b1)), *p.W2, *p.b2);
  return g.add(zhat, f);
}

Var IfssNet::forward(Graph& g, Var features, int64_t batch) const {
  Var tokens = patchify(g, features, batch);
  Var spec = embed_spectral(g, tokens, batch);
  Var spat = embed_spatial(g, tokens, batch);
  for (int d = 0; d < cfg_.depth; ++d) {
    spec = transformer_block(g, spec, spectral_blocks_[static_cast<std::size_t>(d)], batch);
    spat = transformer_block(g, spat, spatial_blocks_[static_cast<std::size_t>(d)], batch);
  }
  Var fused = fuse(g, spec, spat, batch);
  return g.mean_rows_per_group(fused, n_tokens_);
}

}  // namespace cki
