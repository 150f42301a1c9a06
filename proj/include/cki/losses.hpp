#pragma once

#include <string>
#include <vector>

#include "cki/model.hpp"

namespace cki {

/// Per-step scalar values of every loss term, plus the combined total.
struct LossReport {
  double adv_domain = 0.0;   // adversarial discriminator BCE (through the GRL)
  double nonadv_domain = 0.0;  // similarity-probe BCE on detached features
  double source_ce = 0.0;    // similarity-weighted source cross-entropy
  double target_ce = 0.0;    // shared-path target cross-entropy
  double dcor = 0.0;         // shared/complementary distance correlation
  double kl_shared = 0.0;    // student <-> shared-teacher bidirectional KL
  double kl_comp = 0.0;      // student <-> complementary-teacher bidirectional KL
  double comp_ce = 0.0;      // complementary-path target cross-entropy
  double student_ce = 0.0;   // student-path target cross-entropy
  double total = 0.0;
  bool finite = true;

  static const std::vector<std::string>& field_names();
  std::vector<double> field_values() const;
  /// total recombined from the parts under the given flags/weights
  /// (used to assert the per-step algebraic identity).
  double recombine(const LossWeights& w, const AblationFlags& f) const;
};

/// Per-sample source transfer weights: omega = normalized prediction
/// entropy minus domain-similarity probability, detached from all
/// gradients. Pre-clamp values kept for diagnostics.
struct WeightVector {
  std::vector<double> omega;      // clamped to [0,1]
  std::vector<double> omega_pre;  // in (-1,1)
};

// ----------------------------------------------------------- loss builders

/// -mean log p_src - mean log(1 - p_tgt); probabilities clamped before log.
Var domain_bce(Graph& g, Var src_prob, Var tgt_prob);

/// Routes pooled features through the gradient-reversal layer and the
/// adversarial discriminator, then the BCE above.
Var adversarial_domain_loss(Graph& g, const CkiModel& m, Var src_pooled, Var tgt_pooled,
                            double grl_lambda);

/// Same BCE through the similarity probe, with both feature batches
/// detached: its gradient reaches only the probe, never the encoders.
Var nonadversarial_domain_loss(Graph& g, const CkiModel& m, Var src_pooled, Var tgt_pooled);

/// Shannon entropy of each row divided by log(K); rows must lie on the
/// simplex (sum 1 within 1e-6, no negative entries), K >= 2.
std::vector<double> normalized_entropy(const Tensor& probs);

/// omega_i = H(softmax(logits_i))/log K - sim_prob_i, clamped to [0,1].
WeightVector source_weight(const Tensor& src_logits, const Tensor& src_domain_prob);

/// mean_i omega_i * CE(y_i, logits_i); labels are 1-based.
Var weighted_source_ce(Graph& g, Var logits, const std::vector<int>& labels,
                       const std::vector<double>& omega);

/// Plain mean cross-entropy; labels are 1-based.
Var cross_entropy(Graph& g, Var logits, const std::vector<int>& labels);

/// Sample distance correlation between two feature batches (rows paired),
/// in [0,1], differentiable w.r.t. both. Returns 0 when either distance
/// variance is below 1e-12.
Var distance_correlation(Graph& g, Var feat_a, Var feat_b);

/// D_KL(p_a || p_b) + D_KL(p_b || p_a) with p = softmax(logits / tau),
/// averaged over the batch. Gradients flow into both logit sets.
Var bidirectional_kl(Graph& g, Var logits_a, Var logits_b, double tau);

// ------------------------------------------------------------------- step

enum class EvalPath { student, shared };

struct StepResult {
  LossReport report;
  WeightVector weights;
};

/// Builds every active loss term over one source/target batch pair, checks
/// the combined total is finite and (when requested) backpropagates into
/// the model parameter gradients. Inactive flags contribute exactly zero
/// and their sub-networks are not evaluated.
StepResult cki_step(CkiModel& m, const WindowBatch& src, const WindowBatch& tgt,
                    const LossWeights& weights, const AblationFlags& flags,
                    bool do_backward = true);

/// Argmax class indices (1-based) of the selected head over target windows.
std::vector<int> predict(CkiModel& m, const WindowBatch& tgt, EvalPath path = EvalPath::student);

/// Class-grouped means of the transfer weight and the similarity
/// probability over a set of source samples (diagnostics for the
/// shared-vs-private ordering).
struct WeightStats {
  double omega_shared = 0.0;
  double omega_private = 0.0;
  double sim_shared = 0.0;
  double sim_private = 0.0;
  int64_t n_shared = 0;
  int64_t n_private = 0;
};

WeightStats source_weight_stats(CkiModel& m, const WindowBatch& src_batch,
                                const std::set<int>& shared_source_classes);

}  // namespace cki
