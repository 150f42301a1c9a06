#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cki/tensor.hpp"

namespace cki {

/// A trainable tensor with an accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  Param(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}

  void zero_grad() { grad.fill(0.0); }
};

/// Registry owning all parameters of a model in registration order.
class ParamSet {
 public:
  Param& add(std::string name, Tensor init);
  const std::vector<Param*>& all() const { return order_; }
  Param* find(const std::string& name);
  void zero_grads();
  int64_t total_size() const;

 private:
  std::deque<Param> store_;
  std::vector<Param*> order_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool grad_alloc = false;
  std::function<void()> backward;
  int id = 0;

  void ensure_grad();
  void add_grad(const Tensor& g);
  void add_grad_raw(const double* g, int64_t n);
};

/// Handle into the tape.
struct Var {
  Node* n = nullptr;
  const Tensor& val() const { return n->value; }
  double scalar() const { return n->value[0]; }
  bool valid() const { return n != nullptr; }
};

/// Reverse-mode tape. Build ops forward, then call backward(loss) once;
/// gradients land in each Param::grad. The tape is single-use: clear()
/// (or destruction) drops all nodes.
class Graph {
 public:
  // ---- leaves ----
  Var leaf(Param& p);
  Var constant(Tensor t);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  // ---- elementwise / linear algebra ----
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var smul(Var a, Var s);       // a * s, s is a [1] scalar
  Var adds(Var a, Var s);       // a + s broadcast, s is a [1] scalar
  Var one_minus(Var a);         // 1 - a
  Var add_bias(Var x, Var b);   // x:[R,D] + b:[D] per row
  Var tile_add_rows(Var x, Var p, int64_t repeat);  // x:[(R*repeat? no) see impl]
  Var gelu(Var x);
  Var sigmoid(Var x);
  Var exp(Var x);
  Var log_prob(Var x);          // log of x clamped to [1e-7, 1-1e-7]
  Var powc(Var x, double p);    // x^p on positive inputs
  Var div(Var a, Var b);

  // ---- reductions / softmax ----
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var softmax_rows(Var x);
  Var log_softmax_rows(Var x);
  Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

  // ---- attention / conv ----
  /// Fused multi-head scaled-dot-product attention over already projected
  /// tokens. q:[(B*Nq),D], k,v:[(B*Nkv),D]. Head h occupies the column
  /// band [h*D/H, (h+1)*D/H).
  Var attention(Var q, Var k, Var v, int64_t batch, int64_t nq, int64_t nkv, int heads);

  /// 1-D convolution along the last axis with "same"-style zero padding.
  /// x:[P,Cin,L], w:[Cout,Cin,K], b:[Cout] -> [P,Cout,ceil(L/stride)].
  Var conv1d_same(Var x, Var w, Var b, int stride);

  Var mean_positions(Var x);                       // [P,C,L] -> [P,C]
  Var mean_rows_per_group(Var x, int64_t group);   // [(B*group),D] -> [B,D]

  // ---- structural ----
  Var reshape(Var x, std::vector<int64_t> shape);
  Var concat_rows(const std::vector<Var>& parts);
  Var slice_rows(Var x, int64_t row0, int64_t rows);
  Var gather_rows(Var x, std::vector<int64_t> idx);
  /// out.flat[i] = x.flat[map[i]]; map must be a bijection.
  Var permute_gather(Var x, std::shared_ptr<const std::vector<int64_t>> map,
                     std::vector<int64_t> out_shape);

  // ---- gradient plumbing ----
  /// Identity forward; backward multiplies the incoming gradient by
  /// -lambda before passing it on.
  Var grl(Var x, double lambda);
  Var detach(Var x);

  // ---- losses ----
  /// logp:[B,K] log-probabilities, labels0 zero-based: out[i] = -logp[i, y_i].
  Var pick_nll(Var logp, std::vector<int> labels0);
  /// Pairwise Euclidean distance matrix. x:[n,d] -> [n,n].
  Var pdist(Var x);

  // ---- engine ----
  void backward(Var loss);
  void clear();
  std::size_t node_count() const { return nodes_.size(); }

 private:
  Node* make(Tensor value, std::vector<Node*> parents);
  std::deque<Node> nodes_;
};

/// x @ W + b
inline Var linear(Graph& g, Var x, Param& W, Param& b) {
  return g.add_bias(g.matmul(x, g.leaf(W)), g.leaf(b));
}

/// AdamW with bias correction and decoupled weight decay.
class AdamW {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamW(const std::vector<Param*>& params);
  void step(const std::vector<Param*>& params, double lr, double weight_decay);
  int64_t steps_taken() const { return t_; }

 private:
  struct State {
    Tensor m, v;
  };
  std::vector<State> st_;
  int64_t t_ = 0;
};

}  // namespace cki
