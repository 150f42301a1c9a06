#include "cki/model.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

using nlohmann::json;

namespace cki {

std::string AblationFlags::str() const {
  std::string s;
  if (asc) s += "ASC+";
  if (cksp) s += "CKSP+";
  if (ce) s += "CE+";
  if (di) s += "DI+";
  if (s.empty()) return "none";
  s.pop_back();
  return s;
}

void ModelConfig::validate() const {
  if (window < 2 || window % 2 != 0) throw ConfigError("model: window must be even and >= 2");
  if (source_bands < 1 || target_bands < 1) throw ConfigError("model: bands unset");
  if (num_source_classes < 2 || num_target_classes < 2)
    throw ConfigError("model: need at least two classes per domain");
  if (common_channels < 1 || encoder_hidden < 1) throw ConfigError("model: encoder sizes");
  patch.validate(window, common_channels);
}

namespace {

Param& add_conv_weight(ParamSet& ps, const std::string& name, int64_t cout, int64_t cin,
                       int64_t k, Rng& rng) {
  Tensor w({cout, cin, k});
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = stddev * rng.normal();
  return ps.add(name, std::move(w));
}

EncoderParams add_encoder(ParamSet& ps, const std::string& prefix, const ModelConfig& c,
                          Rng& rng) {
  EncoderParams e;
  e.W1 = &add_conv_weight(ps, prefix + ".conv1.W", c.encoder_hidden, 1, c.encoder_kernel1, rng);
  e.b1 = &ps.add(prefix + ".conv1.b", Tensor::zeros({c.encoder_hidden}));
  e.W2 = &add_conv_weight(ps, prefix + ".conv2.W", c.common_channels, c.encoder_hidden,
                          c.encoder_kernel2, rng);
  e.b2 = &ps.add(prefix + ".conv2.b", Tensor::zeros({c.common_channels}));
  return e;
}

DiscriminatorParams add_disc(ParamSet& ps, const std::string& prefix, const ModelConfig& c,
                             Rng& rng) {
  DiscriminatorParams d;
  d.W1 = &add_linear_weight(ps, prefix + ".W1", c.common_channels, c.disc_hidden, rng);
  d.b1 = &ps.add(prefix + ".b1", Tensor::zeros({c.disc_hidden}));
  d.W2 = &add_linear_weight(ps, prefix + ".W2", c.disc_hidden, 1, rng);
  d.b2 = &ps.add(prefix + ".b2", Tensor::zeros({1}));
  return d;
}

HeadParams add_head(ParamSet& ps, const std::string& prefix, int64_t d_in, int64_t hidden,
                    int64_t classes, Rng& rng) {
  HeadParams h;
  h.W1 = &add_linear_weight(ps, prefix + ".W1", d_in, hidden, rng);
  h.b1 = &ps.add(prefix + ".b1", Tensor::zeros({hidden}));
  h.W2 = &add_linear_weight(ps, prefix + ".W2", hidden, classes, rng);
  h.b2 = &ps.add(prefix + ".b2", Tensor::zeros({classes}));
  return h;
}

}  // namespace

CkiModel::CkiModel(const ModelConfig& config) : cfg(config) {
  cfg.validate();
  Rng rng(cfg.init_seed);
  const int64_t D = cfg.patch.embed_dim;
  const int64_t hh = cfg.head_hidden > 0 ? cfg.head_hidden : D;

  F_s = add_encoder(params, "F_s", cfg, rng);
  F_t = add_encoder(params, "F_t", cfg, rng);
  F_t_prime = add_encoder(params, "F_t_prime", cfg, rng);
  disc_adv = add_disc(params, "I_adv", cfg, rng);
  disc_sim = add_disc(params, "I_sim", cfg, rng);
  G = std::make_unique<IfssNet>(params, "G", cfg.patch, cfg.window, cfg.common_channels, rng);
  G_prime = std::make_unique<IfssNet>(params, "G_prime", cfg.patch, cfg.window,
                                      cfg.common_channels, rng);
  G_stu = std::make_unique<IfssNet>(params, "G_stu", cfg.patch, cfg.window,
                                    cfg.common_channels, rng);
  T_s = add_head(params, "T_s", D, hh, cfg.num_source_classes, rng);
  T_t = add_head(params, "T_t", D, hh, cfg.num_target_classes, rng);
  T_t_prime = add_head(params, "T_t_prime", D, hh, cfg.num_target_classes, rng);
  T_stu = add_head(params, "T_stu", D, hh, cfg.num_target_classes, rng);
}

Var CkiModel::encode(Graph& g, const Tensor& windows, const EncoderParams& enc) const {
  if (windows.rank() != 4) throw DataError("encode: expected [B,w,w,C] windows");
  const int64_t B = windows.dim(0), w = windows.dim(1), C = windows.dim(3);
  if (w != cfg.window) throw DataError("encode: window size mismatch");
  Var x = g.constant(windows.reshaped({B * w * w, 1, C}));
  Var h1 = g.gelu(g.conv1d_same(x, g.leaf(*enc.W1), g.leaf(*enc.b1), cfg.encoder_stride));
  Var h2 = g.gelu(g.conv1d_same(h1, g.leaf(*enc.W2), g.leaf(*enc.b2), 1));
  return g.mean_positions(h2);
}

Var CkiModel::pool_spatial(Graph& g, Var enc_features, int64_t batch) const {
  const int64_t per = enc_features.val().dim(0) / batch;
  return g.mean_rows_per_group(enc_features, per);
}

Var CkiModel::discriminate(Graph& g, Var pooled, const DiscriminatorParams& d) const {
  Var h = g.gelu(linear(g, pooled, *d.W1, *d.b1));
  return g.sigmoid(linear(g, h, *d.W2, *d.b2));
}

Var CkiModel::head(Graph& g, Var rep, const HeadParams& h) const {
  Var z = g.gelu(linear(g, rep, *h.W1, *h.b1));
  return linear(g, z, *h.W2, *h.b2);
}

// ------------------------------------------------------------- persistence

namespace {

constexpr char kMagic[8] = {'C', 'K', 'I', 'C', 'K', 'P', 'T', '\x01'};
constexpr uint32_t kVersion = 1;

json config_to_json(const ModelConfig& c, const LossWeights& w, const AblationFlags& f) {
  json j;
  j["window"] = c.window;
  j["common_channels"] = c.common_channels;
  j["source_bands"] = c.source_bands;
  j["target_bands"] = c.target_bands;
  j["num_source_classes"] = c.num_source_classes;
  j["num_target_classes"] = c.num_target_classes;
  j["patch"] = {{"spatial_h", c.patch.p_h}, {"spatial_w", c.patch.p_w},
                {"spectral", c.patch.p_c}};
  j["embed_dim"] = c.patch.embed_dim;
  j["depth"] = c.patch.depth;
  j["heads"] = c.patch.heads;
  j["encoder_hidden"] = c.encoder_hidden;
  j["encoder_kernel1"] = c.encoder_kernel1;
  j["encoder_kernel2"] = c.encoder_kernel2;
  j["encoder_stride"] = c.encoder_stride;
  j["disc_hidden"] = c.disc_hidden;
  j["head_hidden"] = c.head_hidden;
  j["init_seed"] = c.init_seed;
  j["loss_weights"] = {{"lambda_adv", w.lambda_adv}, {"alpha", w.alpha}, {"beta", w.beta},
                       {"gamma", w.gamma},           {"tau", w.tau}};
  j["ablation"] = {{"asc", f.asc}, {"cksp", f.cksp}, {"ce", f.ce}, {"di", f.di}};
  return j;
}

void config_from_json(const json& j, ModelConfig& c, LossWeights& w, AblationFlags& f) {
  c.window = j.at("window").get<int64_t>();
  c.common_channels = j.at("common_channels").get<int64_t>();
  c.source_bands = j.at("source_bands").get<int64_t>();
  c.target_bands = j.at("target_bands").get<int64_t>();
  c.num_source_classes = j.at("num_source_classes").get<int>();
  c.num_target_classes = j.at("num_target_classes").get<int>();
  c.patch.p_h = j.at("patch").at("spatial_h").get<int>();
  c.patch.p_w = j.at("patch").at("spatial_w").get<int>();
  c.patch.p_c = j.at("patch").at("spectral").get<int>();
  c.patch.embed_dim = j.at("embed_dim").get<int>();
  c.patch.depth = j.at("depth").get<int>();
  c.patch.heads = j.at("heads").get<int>();
  c.encoder_hidden = j.at("encoder_hidden").get<int>();
  c.encoder_kernel1 = j.at("encoder_kernel1").get<int>();
  c.encoder_kernel2 = j.at("encoder_kernel2").get<int>();
  c.encoder_stride = j.at("encoder_stride").get<int>();
  c.disc_hidden = j.at("disc_hidden").get<int>();
  c.head_hidden = j.at("head_hidden").get<int>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  const json& lw = j.at("loss_weights");
  w.lambda_adv = lw.at("lambda_adv").get<double>();
  w.alpha = lw.at("alpha").get<double>();
  w.beta = lw.at("beta").get<double>();
  w.gamma = lw.at("gamma").get<double>();
  w.tau = lw.at("tau").get<double>();
  const json& ab = j.at("ablation");
  f.asc = ab.at("asc").get<bool>();
  f.cksp = ab.at("cksp").get<bool>();
  f.ce = ab.at("ce").get<bool>();
  f.di = ab.at("di").get<bool>();
}

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const CkiModel& model, const LossWeights& weights,
                     const AblationFlags& flags, const std::string& path) {
  const std::filesystem::path p(path);
  if (!p.parent_path().empty()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  const std::string cfg_json = config_to_json(model.cfg, weights, flags).dump();
  write_pod(out, static_cast<uint64_t>(cfg_json.size()));
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  const auto& all = model.params.all();
  write_pod(out, static_cast<uint64_t>(all.size()));
  for (const Param* prm : all) {
    write_pod(out, static_cast<uint32_t>(prm->name.size()));
    out.write(prm->name.data(), static_cast<std::streamsize>(prm->name.size()));
    write_pod(out, static_cast<uint32_t>(prm->value.rank()));
    for (int i = 0; i < prm->value.rank(); ++i) write_pod(out, prm->value.dim(i));
    out.write(reinterpret_cast<const char*>(prm->value.data()),
              static_cast<std::streamsize>(prm->value.size() * 8));
  }
  if (!out) throw DataError("checkpoint write failed: " + path);

  std::ofstream sidecar(path + ".shapes.txt");
  for (const Param* prm : all) {
    sidecar << prm->name;
    for (int i = 0; i < prm->value.rank(); ++i) sidecar << " " << prm->value.dim(i);
    sidecar << "\n";
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing checkpoint " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("not a checkpoint file: " + path);
  const auto version = read_pod<uint32_t>(in);
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto json_len = read_pod<uint64_t>(in);
  std::string cfg_json(json_len, '\0');
  in.read(cfg_json.data(), static_cast<std::streamsize>(json_len));

  Checkpoint ck;
  try {
    config_from_json(json::parse(cfg_json), ck.cfg, ck.weights, ck.flags);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: bad embedded config: ") + e.what());
  }
  ck.model = std::make_unique<CkiModel>(ck.cfg);

  const auto n_params = read_pod<uint64_t>(in);
  const auto& all = ck.model->params.all();
  if (n_params != all.size())
    throw DataError("checkpoint: parameter count mismatch");
  for (Param* prm : all) {
    const auto name_len = read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != prm->name) throw DataError("checkpoint: parameter order mismatch at " + name);
    const auto rank = read_pod<uint32_t>(in);
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) d = read_pod<int64_t>(in);
    if (dims != prm->value.shape()) throw DataError("checkpoint: shape mismatch at " + name);
    in.read(reinterpret_cast<char*>(prm->value.data()),
            static_cast<std::streamsize>(prm->value.size() * 8));
    if (!in) throw DataError("checkpoint: truncated tensor data");
  }
  return ck;
}

}  // namespace cki
