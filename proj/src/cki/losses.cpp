#include "cki/losses.hpp"

#include <algorithm>
#include <cmath>

namespace cki {

const std::vector<std::string>& LossReport::field_names() {
  static const std::vector<std::string> names = {
      "adv_domain", "nonadv_domain", "source_ce", "target_ce", "dcor",
      "kl_shared",  "kl_comp",       "comp_ce",   "student_ce", "total"};
  return names;
}

std::vector<double> LossReport::field_values() const {
  return {adv_domain, nonadv_domain, source_ce, target_ce, dcor,
          kl_shared,  kl_comp,       comp_ce,   student_ce, total};
}

double LossReport::recombine(const LossWeights& w, const AblationFlags& f) const {
  double t = source_ce + target_ce;
  if (f.asc) t += w.lambda_adv * adv_domain;
  if (f.cksp) t += nonadv_domain;
  if (f.ce) t += w.beta * comp_ce + dcor;
  if (f.di) t += w.alpha * (kl_shared + kl_comp) + w.gamma * student_ce;
  return t;
}

Var domain_bce(Graph& g, Var src_prob, Var tgt_prob) {
  if (src_prob.val().size() == 0 || tgt_prob.val().size() == 0)
    throw DataError("domain_bce: empty feature batch");
  Var term_src = g.scale(g.mean_all(g.log_prob(src_prob)), -1.0);
  Var term_tgt = g.scale(g.mean_all(g.log_prob(g.one_minus(tgt_prob))), -1.0);
  return g.add(term_src, term_tgt);
}

Var adversarial_domain_loss(Graph& g, const CkiModel& m, Var src_pooled, Var tgt_pooled,
                            double grl_lambda) {
  Var ps = m.discriminate(g, g.grl(src_pooled, grl_lambda), m.disc_adv);
  Var pt = m.discriminate(g, g.grl(tgt_pooled, grl_lambda), m.disc_adv);
  return domain_bce(g, ps, pt);
}

Var nonadversarial_domain_loss(Graph& g, const CkiModel& m, Var src_pooled, Var tgt_pooled) {
  Var ps = m.discriminate(g, g.detach(src_pooled), m.disc_sim);
  Var pt = m.discriminate(g, g.detach(tgt_pooled), m.disc_sim);
  return domain_bce(g, ps, pt);
}

std::vector<double> normalized_entropy(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(1) < 2)
    throw DataError("normalized_entropy: need [B,K] rows with K >= 2");
  const int64_t B = probs.dim(0), K = probs.dim(1);
  std::vector<double> out(static_cast<std::size_t>(B));
  const double logk = std::log(static_cast<double>(K));
  for (int64_t i = 0; i < B; ++i) {
    double sum = 0.0, h = 0.0;
    for (int64_t j = 0; j < K; ++j) {
      const double p = probs.at(i, j);
      if (p < 0.0) throw DataError("normalized_entropy: negative probability");
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw DataError("normalized_entropy: row does not sum to 1");
    out[static_cast<std::size_t>(i)] = h / logk;
  }
  return out;
}

WeightVector source_weight(const Tensor& src_logits, const Tensor& src_domain_prob) {
  const int64_t B = src_logits.dim(0), K = src_logits.dim(1);
  if (src_domain_prob.size() != B) throw DataError("source_weight: batch mismatch");
  Tensor probs({B, K});
  for (int64_t i = 0; i < B; ++i) {
    const double* in = src_logits.data() + i * K;
    double* o = probs.data() + i * K;
    double m = in[0];
    for (int64_t j = 1; j < K; ++j) m = std::max(m, in[j]);
    double s = 0.0;
    for (int64_t j = 0; j < K; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    for (int64_t j = 0; j < K; ++j) o[j] /= s;
  }
  const std::vector<double> ent = normalized_entropy(probs);
  WeightVector wv;
  wv.omega.resize(static_cast<std::size_t>(B));
  wv.omega_pre.resize(static_cast<std::size_t>(B));
  for (int64_t i = 0; i < B; ++i) {
    const double pre = ent[static_cast<std::size_t>(i)] - src_domain_prob[i];
    wv.omega_pre[static_cast<std::size_t>(i)] = pre;
    wv.omega[static_cast<std::size_t>(i)] = std::clamp(pre, 0.0, 1.0);
  }
  return wv;
}

namespace {

std::vector<int> to_zero_based(const std::vector<int>& labels, int64_t num_classes) {
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 1 || labels[i] > num_classes)
      throw DataError("label " + std::to_string(labels[i]) + " outside 1.." +
                      std::to_string(num_classes));
    out[i] = labels[i] - 1;
  }
  return out;
}

}  // namespace

Var weighted_source_ce(Graph& g, Var logits, const std::vector<int>& labels,
                       const std::vector<double>& omega) {
  if (omega.size() != labels.size()) throw DataError("weighted_source_ce: weight count");
  Var nll = g.pick_nll(g.log_softmax_rows(logits), to_zero_based(labels, logits.val().dim(1)));
  Var w = g.constant(Tensor({static_cast<int64_t>(omega.size())},
                            std::vector<double>(omega.begin(), omega.end())));
  return g.mean_all(g.mul(nll, w));
}

Var cross_entropy(Graph& g, Var logits, const std::vector<int>& labels) {
  Var nll = g.pick_nll(g.log_softmax_rows(logits), to_zero_based(labels, logits.val().dim(1)));
  return g.mean_all(nll);
}

Var distance_correlation(Graph& g, Var feat_a, Var feat_b) {
  const int64_t n = feat_a.val().dim(0);
  if (n < 2) throw DataError("distance_correlation: need at least 2 samples");
  if (feat_b.val().dim(0) != n) throw DataError("distance_correlation: row mismatch");

  // centering matrix H = I - 11^T/n applied on both sides
  Tensor H({n, n});
  const double inv_n = 1.0 / static_cast<double>(n);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) H.at(i, j) = (i == j ? 1.0 : 0.0) - inv_n;
  Var Hc = g.constant(H);

  Var Ac = g.matmul(g.matmul(Hc, g.pdist(feat_a)), Hc);
  Var Bc = g.matmul(g.matmul(Hc, g.pdist(feat_b)), Hc);

  const double inv_n2 = inv_n * inv_n;
  Var dcov2 = g.scale(g.sum_all(g.mul(Ac, Bc)), inv_n2);
  Var dvar_a = g.scale(g.sum_all(g.mul(Ac, Ac)), inv_n2);
  Var dvar_b = g.scale(g.sum_all(g.mul(Bc, Bc)), inv_n2);

  if (dvar_a.scalar() < 1e-12 || dvar_b.scalar() < 1e-12) return g.constant_scalar(0.0);
  if (dcov2.scalar() < 1e-14)
    return g.constant_scalar(std::sqrt(std::max(dcov2.scalar(), 0.0)) /
                             std::pow(dvar_a.scalar() * dvar_b.scalar(), 0.25));
  return g.div(g.powc(dcov2, 0.5), g.powc(g.mul(dvar_a, dvar_b), 0.25));
}

Var bidirectional_kl(Graph& g, Var logits_a, Var logits_b, double tau) {
  if (tau <= 0.0) throw ConfigError("bidirectional_kl: tau must be positive");
  if (!logits_a.val().same_shape(logits_b.val()))
    throw DataError("bidirectional_kl: logit shape mismatch");
  const double inv_b = 1.0 / static_cast<double>(logits_a.val().dim(0));
  Var la = g.log_softmax_rows(g.scale(logits_a, 1.0 / tau));
  Var lb = g.log_softmax_rows(g.scale(logits_b, 1.0 / tau));
  Var pa = g.exp(la);
  Var pb = g.exp(lb);
  Var kl_ab = g.sum_all(g.mul(pa, g.sub(la, lb)));
  Var kl_ba = g.sum_all(g.mul(pb, g.sub(lb, la)));
  return g.scale(g.add(kl_ab, kl_ba), inv_b);
}

StepResult cki_step(CkiModel& m, const WindowBatch& src, const WindowBatch& tgt,
                    const LossWeights& weights, const AblationFlags& flags,
                    bool do_backward) {
  weights.validate();
  if (src.size() == 0 || tgt.size() == 0) throw DataError("cki_step: empty batch");
  const int64_t Bs = src.size(), Bt = tgt.size();

  Graph g;
  StepResult out;
  LossReport& rep = out.report;

  Var f_s = m.encode(g, src.x, m.F_s);
  Var f_t = m.encode(g, tgt.x, m.F_t);
  Var pool_s = m.pool_spatial(g, f_s, Bs);
  Var pool_t = m.pool_spatial(g, f_t, Bt);
  Var rep_src = m.G->forward(g, f_s, Bs);
  Var rep_tgt = m.G->forward(g, f_t, Bt);
  Var logits_s = m.head(g, rep_src, m.T_s);
  Var logits_t = m.head(g, rep_tgt, m.T_t);

  std::vector<Var> terms;

  // similarity probe + per-sample source weights
  if (flags.cksp) {
    Var sim_s = m.discriminate(g, g.detach(pool_s), m.disc_sim);
    Var sim_t = m.discriminate(g, g.detach(pool_t), m.disc_sim);
    Var e_sim = domain_bce(g, sim_s, sim_t);
    rep.nonadv_domain = e_sim.scalar();
    terms.push_back(e_sim);
    out.weights = source_weight(logits_s.val(), sim_s.val());
  } else {
    out.weights.omega.assign(static_cast<std::size_t>(Bs), 1.0);
    out.weights.omega_pre.assign(static_cast<std::size_t>(Bs), 1.0);
  }

  Var e_ts = weighted_source_ce(g, logits_s, src.labels, out.weights.omega);
  rep.source_ce = e_ts.scalar();
  terms.push_back(e_ts);

  Var e_tt = cross_entropy(g, logits_t, tgt.labels);
  rep.target_ce = e_tt.scalar();
  terms.push_back(e_tt);

  // adversarial alignment: one backward pass realizes the minimax because
  // the reversal sits between the discriminator and the encoders
  if (flags.asc) {
    Var e_adv = adversarial_domain_loss(g, m, pool_s, pool_t, 1.0);
    rep.adv_domain = e_adv.scalar();
    terms.push_back(g.scale(e_adv, weights.lambda_adv));
  }

  Var logits_tc;  // complementary teacher logits (needed by the student KL)
  if (flags.ce) {
    Var f_tc = m.encode(g, tgt.x, m.F_t_prime);
    Var rep_tc = m.G_prime->forward(g, f_tc, Bt);
    logits_tc = m.head(g, rep_tc, m.T_t_prime);
    Var e_cc = cross_entropy(g, logits_tc, tgt.labels);
    rep.comp_ce = e_cc.scalar();
    terms.push_back(g.scale(e_cc, weights.beta));
    Var e_dc = distance_correlation(g, rep_tgt, rep_tc);
    rep.dcor = e_dc.scalar();
    terms.push_back(e_dc);
  }

  if (flags.di) {
    Var rep_stu = m.G_stu->forward(g, f_t, Bt);  // student shares the F_t features
    Var logits_stu = m.head(g, rep_stu, m.T_stu);
    Var e_stu = cross_entropy(g, logits_stu, tgt.labels);
    rep.student_ce = e_stu.scalar();
    terms.push_back(g.scale(e_stu, weights.gamma));
    Var e_kl1 = bidirectional_kl(g, logits_stu, logits_t, 1.0);
    rep.kl_shared = e_kl1.scalar();
    Var kl_sum = e_kl1;
    if (flags.ce) {
      Var e_kl2 = bidirectional_kl(g, logits_stu, logits_tc, weights.tau);
      rep.kl_comp = e_kl2.scalar();
      kl_sum = g.add(e_kl1, e_kl2);
    }
    terms.push_back(g.scale(kl_sum, weights.alpha));
  }

  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  rep.total = total.scalar();
  rep.finite = std::isfinite(rep.total);
  if (!rep.finite) return out;  // diagnostic report, no gradient update

  if (do_backward) g.backward(total);
  return out;
}

std::vector<int> predict(CkiModel& m, const WindowBatch& tgt, EvalPath path) {
  Graph g;
  Var f_t = m.encode(g, tgt.x, m.F_t);
  Var logits;
  if (path == EvalPath::student) {
    logits = m.head(g, m.G_stu->forward(g, f_t, tgt.size()), m.T_stu);
  } else {
    logits = m.head(g, m.G->forward(g, f_t, tgt.size()), m.T_t);
  }
  const Tensor& L = logits.val();
  std::vector<int> pred(static_cast<std::size_t>(L.dim(0)));
  for (int64_t i = 0; i < L.dim(0); ++i) {
    int best = 0;
    for (int64_t j = 1; j < L.dim(1); ++j)
      if (L.at(i, j) > L.at(i, best)) best = static_cast<int>(j);
    pred[static_cast<std::size_t>(i)] = best + 1;
  }
  return pred;
}

WeightStats source_weight_stats(CkiModel& m, const WindowBatch& src_batch,
                                const std::set<int>& shared_source_classes) {
  Graph g;
  Var f_s = m.encode(g, src_batch.x, m.F_s);
  Var pool_s = m.pool_spatial(g, f_s, src_batch.size());
  Var sim = m.discriminate(g, g.detach(pool_s), m.disc_sim);
  Var logits = m.head(g, m.G->forward(g, f_s, src_batch.size()), m.T_s);
  const WeightVector wv = source_weight(logits.val(), sim.val());

  WeightStats st;
  for (int64_t i = 0; i < src_batch.size(); ++i) {
    const bool shared =
        shared_source_classes.count(src_batch.labels[static_cast<std::size_t>(i)]) > 0;
    const double w = wv.omega_pre[static_cast<std::size_t>(i)];
    const double s = sim.val()[i];
    if (shared) {
      st.omega_shared += w;
      st.sim_shared += s;
      ++st.n_shared;
    } else {
      st.omega_private += w;
      st.sim_private += s;
      ++st.n_private;
    }
  }
  if (st.n_shared > 0) {
    st.omega_shared /= static_cast<double>(st.n_shared);
    st.sim_shared /= static_cast<double>(st.n_shared);
  }
  if (st.n_private > 0) {
    st.omega_private /= static_cast<double>(st.n_private);
    st.sim_private /= static_cast<double>(st.n_private);
  }
  return st;
}

}  // namespace cki
