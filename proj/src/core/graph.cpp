#include "cki/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cki/kernels.hpp"

namespace cki {

namespace {
constexpr double kProbFloor = 1e-7;

double clamp_prob(double x) {
  return std::min(std::max(x, kProbFloor), 1.0 - kProbFloor);
}
}  // namespace

// ---------------------------------------------------------------- ParamSet

Param& ParamSet::add(std::string name, Tensor init) {
  store_.emplace_back(std::move(name), std::move(init));
  order_.push_back(&store_.back());
  return store_.back();
}

Param* ParamSet::find(const std::string& name) {
  for (Param* p : order_)
    if (p->name == name) return p;
  return nullptr;
}

void ParamSet::zero_grads() {
  for (Param* p : order_) p->zero_grad();
}

int64_t ParamSet::total_size() const {
  int64_t n = 0;
  for (const Param* p : order_) n += p->value.size();
  return n;
}

// -------------------------------------------------------------------- Node

void Node::ensure_grad() {
  if (!grad_alloc) {
    grad = Tensor::zeros(value.shape());
    grad_alloc = true;
  }
}

void Node::add_grad(const Tensor& g) {
  ensure_grad();
  kernels::ops().axpy(1.0, g.data(), grad.data(), static_cast<std::size_t>(g.size()));
}

void Node::add_grad_raw(const double* g, int64_t n) {
  ensure_grad();
  kernels::ops().axpy(1.0, g, grad.data(), static_cast<std::size_t>(n));
}

// ------------------------------------------------------------------- Graph

Node* Graph::make(Tensor value, std::vector<Node*> parents) {
  nodes_.emplace_back();
  Node* n = &nodes_.back();
  n->value = std::move(value);
  n->id = static_cast<int>(nodes_.size()) - 1;
  for (Node* p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  return n;
}

Var Graph::leaf(Param& p) {
  Node* n = make(p.value, {});
  n->requires_grad = true;
  Param* pp = &p;
  n->backward = [n, pp] {
    kernels::ops().axpy(1.0, n->grad.data(), pp->grad.data(),
                        static_cast<std::size_t>(n->grad.size()));
  };
  return {n};
}

Var Graph::constant(Tensor t) { return {make(std::move(t), {})}; }

Var Graph::matmul(Var a, Var b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw std::invalid_argument("matmul: bad shapes " + A.shape_str() + " x " + B.shape_str());
  const auto m = static_cast<std::size_t>(A.dim(0));
  const auto k = static_cast<std::size_t>(A.dim(1));
  const auto nn = static_cast<std::size_t>(B.dim(1));
  Tensor C({A.dim(0), B.dim(1)});
  kernels::ops().gemm(m, nn, k, A.data(), B.data(), C.data(), false);
  Node* n = make(std::move(C), {a.n, b.n});
  Node *pa = a.n, *pb = b.n;
  n->backward = [n, pa, pb, m, k, nn] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      kernels::ops().gemm_nt(m, k, nn, n->grad.data(), pb->value.data(), pa->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      kernels::ops().gemm_tn(k, nn, m, pa->value.data(), n->grad.data(), pb->grad.data(), true);
    }
  };
  return {n};
}

Var Graph::add(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("add: shape mismatch");
  Tensor out(a.val().shape());
  kernels::ops().vadd(a.val().data(), b.val().data(), out.data(),
                      static_cast<std::size_t>(out.size()));
  Node* n = make(std::move(out), {a.n, b.n});
  Node *pa = a.n, *pb = b.n;
  n->backward = [n, pa, pb] {
    if (pa->requires_grad) pa->add_grad(n->grad);
    if (pb->requires_grad) pb->add_grad(n->grad);
  };
  return {n};
}

Var Graph::sub(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("sub: shape mismatch");
  Tensor out(a.val().shape());
  kernels::ops().vsub(a.val().data(), b.val().data(), out.data(),
                      static_cast<std::size_t>(out.size()));
  Node* n = make(std::move(out), {a.n, b.n});
  Node *pa = a.n, *pb = b.n;
  n->backward = [n, pa, pb] {
    if (pa->requires_grad) pa->add_grad(n->grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      kernels::ops().axpy(-1.0, n->grad.data(), pb->grad.data(),
                          static_cast<std::size_t>(n->grad.size()));
    }
  };
  return {n};
}

Var Graph::mul(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("mul: shape mismatch");
  Tensor out(a.val().shape());
  kernels::ops().vmul(a.val().data(), b.val().data(), out.data(),
                      static_cast<std::size_t>(out.size()));
  Node* n = make(std::move(out), {a.n, b.n});
  Node *pa = a.n, *pb = b.n;
  n->backward = [n, pa, pb] {
    const auto sz = static_cast<std::size_t>(n->grad.size());
    Tensor tmp(n->grad.shape());
    if (pa->requires_grad) {
      kernels::ops().vmul(n->grad.data(), pb->value.data(), tmp.data(), sz);
      pa->add_grad(tmp);
    }
    if (pb->requires_grad) {
      kernels::ops().vmul(n->grad.data(), pa->value.data(), tmp.data(), sz);
      pb->add_grad(tmp);
    }
  };
  return {n};
}

Var Graph::scale(Var a, double c) {
  Tensor out = a.val();
  kernels::ops().scal(c, out.data(), static_cast<std::size_t>(out.size()));
  Node* n = make(std::move(out), {a.n});
  Node* pa = a.n;
  n->backward = [n, pa, c] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      kernels::ops().axpy(c, n->grad.data(), pa->grad.data(),
                          static_cast<std::size_t>(n->grad.size()));
    }
  };
  return {n};
}

Var Graph::smul(Var a, Var s) {
  if (s.val().size() != 1) throw std::invalid_argument("smul: s must be scalar");
  const double sv = s.val()[0];
  Tensor out = a.val();
  kernels::ops().scal(sv, out.data(), static_cast<std::size_t>(out.size()));
  Node* n = make(std::move(out), {a.n, s.n});
  Node *pa = a.n, *ps = s.n;
  n->backward = [n, pa, ps, sv] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      kernels::ops().axpy(sv, n->grad.data(), pa->grad.data(),
                          static_cast<std::size_t>(n->grad.size()));
    }
    if (ps->requires_grad) {
      ps->ensure_grad();
      ps->grad[0] += kernels::ops().dot(n->grad.data(), pa->value.data(),
                                        static_cast<std::size_t>(n->grad.size()));
    }
  };
  return {n};
}

Var Graph::adds(Var a, Var s) {
  if (s.val().size() != 1) throw std::invalid_argument("adds: s must be scalar");
  const double sv = s.val()[0];
  Tensor out = a.val();
  for (int64_t i = 0; i < out.size(); ++i) out[i] += sv;
  Node* n = make(std::move(out), {a.n, s.n});
  Node *pa = a.n, *ps = s.n;
  n->backward = [n, pa, ps] {
    if (pa->requires_grad) pa->add_grad(n->grad);
    if (ps->requires_grad) {
      ps->ensure_grad();
      ps->grad[0] += kernels::ops().vsum(n->grad.data(),
                                         static_cast<std::size_t>(n->grad.size()));
    }
  };
  return {n};
}

Var Graph::one_minus(Var a) {
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = 1.0 - a.val()[i];
  Node* n = make(std::move(out), {a.n});
  Node* pa = a.n;
  n->backward = [n, pa] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      kernels::ops().axpy(-1.0, n->grad.data(), pa->grad.data(),
                          static_cast<std::size_t>(n->grad.size()));
    }
  };
  return {n};
}

Var Graph::add_bias(Var x, Var b) {
  const Tensor& X = x.val();
  const Tensor& B = b.val();
  if (X.rank() != 2 || B.size() != X.dim(1)) throw std::invalid_argument("add_bias: shapes");
  const int64_t R = X.dim(0), D = X.dim(1);
  Tensor out = X;
  for (int64_t r = 0; r < R; ++r)
    kernels::ops().axpy(1.0, B.data(), out.data() + r * D, static_cast<std::size_t>(D));
  Node* n = make(std::move(out), {x.n, b.n});
  Node *px = x.n, *pb = b.n;
  n->backward = [n, px, pb, R, D] {
    if (px->requires_grad) px->add_grad(n->grad);
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t r = 0; r < R; ++r)
        kernels::ops().axpy(1.0, n->grad.data() + r * D, pb->grad.data(),
                            static_cast<std::size_t>(D));
    }
  };
  return {n};
}

Var Graph::tile_add_rows(Var x, Var p, int64_t repeat) {
  const Tensor& X = x.val();
  const Tensor& P = p.val();
  if (X.rank() != 2 || P.rank() != 2 || X.dim(1) != P.dim(1) ||
      X.dim(0) != repeat * P.dim(0))
    throw std::invalid_argument("tile_add_rows: shapes");
  const int64_t rows = P.dim(0), D = P.dim(1);
  Tensor out = X;
  for (int64_t t = 0; t < repeat; ++t)
    kernels::ops().vadd(out.data() + t * rows * D, P.data(), out.data() + t * rows * D,
                        static_cast<std::size_t>(rows * D));
  Node* n = make(std::move(out), {x.n, p.n});
  Node *px = x.n, *pp = p.n;
  n->backward = [n, px, pp, repeat, rows, D] {
    if (px->requires_grad) px->add_grad(n->grad);
    if (pp->requires_grad) {
      pp->ensure_grad();
      for (int64_t t = 0; t < repeat; ++t)
        kernels::ops().axpy(1.0, n->grad.data() + t * rows * D, pp->grad.data(),
                            static_cast<std::size_t>(rows * D));
    }
  };
  return {n};
}

Var Graph::gelu(Var x) {
  const Tensor& X = x.val();
  Tensor out(X.shape());
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (int64_t i = 0; i < X.size(); ++i) {
    const double v = X[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, inv_sqrt2] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double c = 1.0 / std::sqrt(2.0 * M_PI);
    for (int64_t i = 0; i < n->grad.size(); ++i) {
      const double v = px->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = c * std::exp(-0.5 * v * v);
      px->grad[i] += n->grad[i] * (cdf + v * pdf);
    }
  };
  return {n};
}

Var Graph::sigmoid(Var x) {
  const Tensor& X = x.val();
  Tensor out(X.shape());
  for (int64_t i = 0; i < X.size(); ++i) {
    const double v = X[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t i = 0; i < n->grad.size(); ++i) {
      const double y = n->value[i];
      px->grad[i] += n->grad[i] * y * (1.0 - y);
    }
  };
  return {n};
}

Var Graph::exp(Var x) {
  const Tensor& X = x.val();
  Tensor out(X.shape());
  for (int64_t i = 0; i < X.size(); ++i) out[i] = std::exp(X[i]);
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t i = 0; i < n->grad.size(); ++i) px->grad[i] += n->grad[i] * n->value[i];
  };
  return {n};
}

Var Graph::log_prob(Var x) {
  const Tensor& X = x.val();
  Tensor out(X.shape());
  for (int64_t i = 0; i < X.size(); ++i) out[i] = std::log(clamp_prob(X[i]));
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t i = 0; i < n->grad.size(); ++i)
      px->grad[i] += n->grad[i] / clamp_prob(px->value[i]);
  };
  return {n};
}

Var Graph::powc(Var x, double p) {
  const Tensor& X = x.val();
  Tensor out(X.shape());
  for (int64_t i = 0; i < X.size(); ++i) out[i] = std::pow(std::max(X[i], 0.0), p);
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, p] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t i = 0; i < n->grad.size(); ++i) {
      const double v = std::max(px->value[i], 1e-12);
      px->grad[i] += n->grad[i] * p * std::pow(v, p - 1.0);
    }
  };
  return {n};
}

Var Graph::div(Var a, Var b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("div: shape mismatch");
  Tensor out(a.val().shape());
  for (int64_t i = 0; i < out.size(); ++i) out[i] = a.val()[i] / b.val()[i];
  Node* n = make(std::move(out), {a.n, b.n});
  Node *pa = a.n, *pb = b.n;
  n->backward = [n, pa, pb] {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (int64_t i = 0; i < n->grad.size(); ++i) pa->grad[i] += n->grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (int64_t i = 0; i < n->grad.size(); ++i)
        pb->grad[i] -= n->grad[i] * pa->value[i] / (pb->value[i] * pb->value[i]);
    }
  };
  return {n};
}

Var Graph::sum_all(Var x) {
  Tensor out = Tensor::scalar(
      kernels::ops().vsum(x.val().data(), static_cast<std::size_t>(x.val().size())));
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double g = n->grad[0];
    for (int64_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
  };
  return {n};
}

Var Graph::mean_all(Var x) {
  const int64_t sz = x.val().size();
  Tensor out = Tensor::scalar(
      kernels::ops().vsum(x.val().data(), static_cast<std::size_t>(sz)) /
      static_cast<double>(sz));
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, sz] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double g = n->grad[0] / static_cast<double>(sz);
    for (int64_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
  };
  return {n};
}

Var Graph::softmax_rows(Var x) {
  const Tensor& X = x.val();
  if (X.rank() != 2) throw std::invalid_argument("softmax_rows: rank");
  const int64_t R = X.dim(0), K = X.dim(1);
  Tensor out(X.shape());
  for (int64_t r = 0; r < R; ++r) {
    const double* in = X.data() + r * K;
    double* o = out.data() + r * K;
    const double m = kernels::ops().vmax(in, static_cast<std::size_t>(K));
    double s = 0.0;
    for (int64_t j = 0; j < K; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (int64_t j = 0; j < K; ++j) o[j] *= inv;
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, R, K] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const double* y = n->value.data() + r * K;
      const double* dy = n->grad.data() + r * K;
      double* dx = px->grad.data() + r * K;
      const double dot = kernels::ops().dot(y, dy, static_cast<std::size_t>(K));
      for (int64_t j = 0; j < K; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  };
  return {n};
}

Var Graph::log_softmax_rows(Var x) {
  const Tensor& X = x.val();
  if (X.rank() != 2) throw std::invalid_argument("log_softmax_rows: rank");
  const int64_t R = X.dim(0), K = X.dim(1);
  Tensor out(X.shape());
  for (int64_t r = 0; r < R; ++r) {
    const double* in = X.data() + r * K;
    double* o = out.data() + r * K;
    const double m = kernels::ops().vmax(in, static_cast<std::size_t>(K));
    double s = 0.0;
    for (int64_t j = 0; j < K; ++j) s += std::exp(in[j] - m);
    const double lse = m + std::log(s);
    for (int64_t j = 0; j < K; ++j) o[j] = in[j] - lse;
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, R, K] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t r = 0; r < R; ++r) {
      const double* lp = n->value.data() + r * K;
      const double* dy = n->grad.data() + r * K;
      double* dx = px->grad.data() + r * K;
      const double gsum = kernels::ops().vsum(dy, static_cast<std::size_t>(K));
      for (int64_t j = 0; j < K; ++j) dx[j] += dy[j] - std::exp(lp[j]) * gsum;
    }
  };
  return {n};
}

Var Graph::layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = x.val();
  if (X.rank() != 2) throw std::invalid_argument("layernorm_rows: rank");
  const int64_t R = X.dim(0), D = X.dim(1);
  if (gamma.val().size() != D || beta.val().size() != D)
    throw std::invalid_argument("layernorm_rows: affine shapes");
  Tensor out(X.shape());
  auto xhat = std::make_shared<Tensor>(X.shape());
  auto rstd = std::make_shared<Tensor>(std::vector<int64_t>{R});
  const double* gdat = gamma.val().data();
  const double* bdat = beta.val().data();
  for (int64_t r = 0; r < R; ++r) {
    const double* in = X.data() + r * D;
    double mu = kernels::ops().vsum(in, static_cast<std::size_t>(D)) / static_cast<double>(D);
    double var = 0.0;
    for (int64_t j = 0; j < D; ++j) {
      const double d = in[j] - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    double* xh = xhat->data() + r * D;
    double* o = out.data() + r * D;
    for (int64_t j = 0; j < D; ++j) {
      xh[j] = (in[j] - mu) * rs;
      o[j] = gdat[j] * xh[j] + bdat[j];
    }
  }
  Node* n = make(std::move(out), {x.n, gamma.n, beta.n});
  Node *px = x.n, *pg = gamma.n, *pb = beta.n;
  n->backward = [n, px, pg, pb, xhat, rstd, R, D] {
    const double* gdat2 = pg->value.data();
    if (pg->requires_grad) pg->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    if (px->requires_grad) px->ensure_grad();
    std::vector<double> dxh(static_cast<std::size_t>(D));
    for (int64_t r = 0; r < R; ++r) {
      const double* dy = n->grad.data() + r * D;
      const double* xh = xhat->data() + r * D;
      if (pg->requires_grad)
        for (int64_t j = 0; j < D; ++j) pg->grad[j] += dy[j] * xh[j];
      if (pb->requires_grad)
        for (int64_t j = 0; j < D; ++j) pb->grad[j] += dy[j];
      if (px->requires_grad) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < D; ++j) {
          dxh[static_cast<std::size_t>(j)] = dy[j] * gdat2[j];
          m1 += dxh[static_cast<std::size_t>(j)];
          m2 += dxh[static_cast<std::size_t>(j)] * xh[j];
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        double* dx = px->grad.data() + r * D;
        const double rs = (*rstd)[r];
        for (int64_t j = 0; j < D; ++j)
          dx[j] += rs * (dxh[static_cast<std::size_t>(j)] - m1 - xh[j] * m2);
      }
    }
  };
  return {n};
}

Var Graph::attention(Var q, Var k, Var v, int64_t batch, int64_t nq, int64_t nkv, int heads) {
  const Tensor& Q = q.val();
  const Tensor& K = k.val();
  const Tensor& V = v.val();
  const int64_t D = Q.dim(1);
  if (Q.dim(0) != batch * nq || K.dim(0) != batch * nkv || V.dim(0) != batch * nkv ||
      K.dim(1) != D || V.dim(1) != D || D % heads != 0)
    throw std::invalid_argument("attention: bad shapes");
  const int64_t dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs cached per (batch, head) for the backward pass
  auto probs = std::make_shared<std::vector<Tensor>>();
  probs->reserve(static_cast<std::size_t>(batch * heads));

  Tensor out({batch * nq, D});
  Tensor qh({nq, dh}), kh({nkv, dh}), vh({nkv, dh}), oh({nq, dh});
  for (int64_t b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const int64_t col = h * dh;
      for (int64_t t = 0; t < nq; ++t)
        std::copy_n(Q.data() + (b * nq + t) * D + col, dh, qh.data() + t * dh);
      for (int64_t t = 0; t < nkv; ++t) {
        std::copy_n(K.data() + (b * nkv + t) * D + col, dh, kh.data() + t * dh);
        std::copy_n(V.data() + (b * nkv + t) * D + col, dh, vh.data() + t * dh);
      }
      Tensor S({nq, nkv});
      kernels::ops().gemm_nt(static_cast<std::size_t>(nq), static_cast<std::size_t>(nkv),
                             static_cast<std::size_t>(dh), qh.data(), kh.data(), S.data(),
                             false);
      kernels::ops().scal(sc, S.data(), static_cast<std::size_t>(S.size()));
      for (int64_t t = 0; t < nq; ++t) {
        double* row = S.data() + t * nkv;
        const double m = kernels::ops().vmax(row, static_cast<std::size_t>(nkv));
        double sum = 0.0;
        for (int64_t j = 0; j < nkv; ++j) {
          row[j] = std::exp(row[j] - m);
          sum += row[j];
        }
        kernels::ops().scal(1.0 / sum, row, static_cast<std::size_t>(nkv));
      }
      kernels::ops().gemm(static_cast<std::size_t>(nq), static_cast<std::size_t>(dh),
                          static_cast<std::size_t>(nkv), S.data(), vh.data(), oh.data(),
                          false);
      for (int64_t t = 0; t < nq; ++t)
        std::copy_n(oh.data() + t * dh, dh, out.data() + (b * nq + t) * D + col);
      probs->push_back(std::move(S));
    }
  }

  Node* n = make(std::move(out), {q.n, k.n, v.n});
  Node *pq = q.n, *pk = k.n, *pv = v.n;
  n->backward = [n, pq, pk, pv, probs, batch, nq, nkv, heads, dh, sc] {
    const int64_t D = static_cast<int64_t>(heads) * dh;
    if (pq->requires_grad) pq->ensure_grad();
    if (pk->requires_grad) pk->ensure_grad();
    if (pv->requires_grad) pv->ensure_grad();
    Tensor qh({nq, dh}), kh({nkv, dh}), vh({nkv, dh});
    Tensor dO({nq, dh}), dP({nq, nkv}), dS({nq, nkv});
    Tensor dQ({nq, dh}), dK({nkv, dh}), dV({nkv, dh});
    for (int64_t b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const int64_t col = static_cast<int64_t>(h) * dh;
        const Tensor& P = (*probs)[static_cast<std::size_t>(b * heads + h)];
        for (int64_t t = 0; t < nq; ++t) {
          std::copy_n(pq->value.data() + (b * nq + t) * D + col, dh, qh.data() + t * dh);
          std::copy_n(n->grad.data() + (b * nq + t) * D + col, dh, dO.data() + t * dh);
        }
        for (int64_t t = 0; t < nkv; ++t) {
          std::copy_n(pk->value.data() + (b * nkv + t) * D + col, dh, kh.data() + t * dh);
          std::copy_n(pv->value.data() + (b * nkv + t) * D + col, dh, vh.data() + t * dh);
        }
        // dV = P^T dO
        kernels::ops().gemm_tn(static_cast<std::size_t>(nkv), static_cast<std::size_t>(dh),
                               static_cast<std::size_t>(nq), P.data(), dO.data(), dV.data(),
                               false);
        // dP = dO V^T
        kernels::ops().gemm_nt(static_cast<std::size_t>(nq), static_cast<std::size_t>(nkv),
                               static_cast<std::size_t>(dh), dO.data(), vh.data(), dP.data(),
                               false);
        // dS = P o (dP - rowsum(dP o P))
        for (int64_t t = 0; t < nq; ++t) {
          const double* prow = P.data() + t * nkv;
          const double* dprow = dP.data() + t * nkv;
          double* dsrow = dS.data() + t * nkv;
          const double dot =
              kernels::ops().dot(prow, dprow, static_cast<std::size_t>(nkv));
          for (int64_t j = 0; j < nkv; ++j) dsrow[j] = prow[j] * (dprow[j] - dot) * sc;
        }
        // dQ = dS K ; dK = dS^T Q   (scale already folded into dS)
        kernels::ops().gemm(static_cast<std::size_t>(nq), static_cast<std::size_t>(dh),
                            static_cast<std::size_t>(nkv), dS.data(), kh.data(), dQ.data(),
                            false);
        kernels::ops().gemm_tn(static_cast<std::size_t>(nkv), static_cast<std::size_t>(dh),
                               static_cast<std::size_t>(nq), dS.data(), qh.data(), dK.data(),
                               false);
        if (pq->requires_grad)
          for (int64_t t = 0; t < nq; ++t)
            kernels::ops().axpy(1.0, dQ.data() + t * dh,
                                pq->grad.data() + (b * nq + t) * D + col,
                                static_cast<std::size_t>(dh));
        if (pk->requires_grad)
          for (int64_t t = 0; t < nkv; ++t)
            kernels::ops().axpy(1.0, dK.data() + t * dh,
                                pk->grad.data() + (b * nkv + t) * D + col,
                                static_cast<std::size_t>(dh));
        if (pv->requires_grad)
          for (int64_t t = 0; t < nkv; ++t)
            kernels::ops().axpy(1.0, dV.data() + t * dh,
                                pv->grad.data() + (b * nkv + t) * D + col,
                                static_cast<std::size_t>(dh));
      }
    }
  };
  return {n};
}

Var Graph::conv1d_same(Var x, Var w, Var b, int stride) {
  const Tensor& X = x.val();
  const Tensor& W = w.val();
  const Tensor& B = b.val();
  if (X.rank() != 3 || W.rank() != 3 || X.dim(1) != W.dim(1))
    throw std::invalid_argument("conv1d_same: shapes");
  const int64_t P = X.dim(0), Cin = X.dim(1), L = X.dim(2);
  const int64_t Cout = W.dim(0), K = W.dim(2);
  if (B.size() != Cout) throw std::invalid_argument("conv1d_same: bias");
  const int64_t Lout = (L + stride - 1) / stride;
  const int64_t pad_total = std::max<int64_t>(0, (Lout - 1) * stride + K - L);
  const int64_t pad_l = pad_total / 2;

  Tensor out({P, Cout, Lout});
  for (int64_t p = 0; p < P; ++p) {
    const double* xin = X.data() + p * Cin * L;
    double* o = out.data() + p * Cout * Lout;
    for (int64_t co = 0; co < Cout; ++co) {
      const double* wrow = W.data() + co * Cin * K;
      for (int64_t t = 0; t < Lout; ++t) {
        double acc = B[co];
        const int64_t base = t * stride - pad_l;
        for (int64_t ci = 0; ci < Cin; ++ci) {
          const double* xc = xin + ci * L;
          const double* wc = wrow + ci * K;
          for (int64_t kk = 0; kk < K; ++kk) {
            const int64_t pos = base + kk;
            if (pos >= 0 && pos < L) acc += wc[kk] * xc[pos];
          }
        }
        o[co * Lout + t] = acc;
      }
    }
  }

  Node* n = make(std::move(out), {x.n, w.n, b.n});
  Node *px = x.n, *pw = w.n, *pb = b.n;
  n->backward = [n, px, pw, pb, P, Cin, L, Cout, K, Lout, pad_l, stride] {
    if (px->requires_grad) px->ensure_grad();
    if (pw->requires_grad) pw->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int64_t p = 0; p < P; ++p) {
      const double* xin = px->value.data() + p * Cin * L;
      const double* dout = n->grad.data() + p * Cout * Lout;
      double* dx = px->requires_grad ? px->grad.data() + p * Cin * L : nullptr;
      for (int64_t co = 0; co < Cout; ++co) {
        const double* dorow = dout + co * Lout;
        const double* wrow = pw->value.data() + co * Cin * K;
        double* dwrow = pw->requires_grad ? pw->grad.data() + co * Cin * K : nullptr;
        if (pb->requires_grad)
          pb->grad[co] += kernels::ops().vsum(dorow, static_cast<std::size_t>(Lout));
        for (int64_t t = 0; t < Lout; ++t) {
          const double g = dorow[t];
          if (g == 0.0) continue;
          const int64_t base = t * stride - pad_l;
          for (int64_t ci = 0; ci < Cin; ++ci) {
            const double* xc = xin + ci * L;
            for (int64_t kk = 0; kk < K; ++kk) {
              const int64_t pos = base + kk;
              if (pos < 0 || pos >= L) continue;
              if (dwrow != nullptr) dwrow[ci * K + kk] += g * xc[pos];
              if (dx != nullptr) dx[ci * L + pos] += g * wrow[ci * K + kk];
            }
          }
        }
      }
    }
  };
  return {n};
}

Var Graph::mean_positions(Var x) {
  const Tensor& X = x.val();
  if (X.rank() != 3) throw std::invalid_argument("mean_positions: rank");
  const int64_t P = X.dim(0), C = X.dim(1), L = X.dim(2);
  Tensor out({P, C});
  for (int64_t p = 0; p < P; ++p)
    for (int64_t c = 0; c < C; ++c)
      out.at(p, c) = kernels::ops().vsum(X.data() + (p * C + c) * L,
                                         static_cast<std::size_t>(L)) /
                     static_cast<double>(L);
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, P, C, L] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t p = 0; p < P; ++p)
      for (int64_t c = 0; c < C; ++c) {
        const double g = n->grad.at(p, c) / static_cast<double>(L);
        double* dst = px->grad.data() + (p * C + c) * L;
        for (int64_t l = 0; l < L; ++l) dst[l] += g;
      }
  };
  return {n};
}

Var Graph::mean_rows_per_group(Var x, int64_t group) {
  const Tensor& X = x.val();
  if (X.rank() != 2 || X.dim(0) % group != 0)
    throw std::invalid_argument("mean_rows_per_group: shapes");
  const int64_t B = X.dim(0) / group, D = X.dim(1);
  Tensor out({B, D});
  for (int64_t b = 0; b < B; ++b) {
    double* o = out.data() + b * D;
    for (int64_t t = 0; t < group; ++t)
      kernels::ops().axpy(1.0, X.data() + (b * group + t) * D, o,
                          static_cast<std::size_t>(D));
    kernels::ops().scal(1.0 / static_cast<double>(group), o, static_cast<std::size_t>(D));
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, B, D, group] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    const double inv = 1.0 / static_cast<double>(group);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t t = 0; t < group; ++t)
        kernels::ops().axpy(inv, n->grad.data() + b * D,
                            px->grad.data() + (b * group + t) * D,
                            static_cast<std::size_t>(D));
  };
  return {n};
}

Var Graph::reshape(Var x, std::vector<int64_t> shape) {
  Tensor out = x.val().reshaped(shape);
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px] {
    if (!px->requires_grad) return;
    px->add_grad_raw(n->grad.data(), n->grad.size());
  };
  return {n};
}

Var Graph::concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const int64_t D = parts[0].val().dim(1);
  int64_t rows = 0;
  for (const Var& p : parts) {
    if (p.val().rank() != 2 || p.val().dim(1) != D)
      throw std::invalid_argument("concat_rows: shapes");
    rows += p.val().dim(0);
  }
  Tensor out({rows, D});
  int64_t r0 = 0;
  std::vector<Node*> parents;
  std::vector<int64_t> offsets;
  for (const Var& p : parts) {
    std::copy_n(p.val().data(), p.val().size(), out.data() + r0 * D);
    parents.push_back(p.n);
    offsets.push_back(r0);
    r0 += p.val().dim(0);
  }
  Node* n = make(std::move(out), parents);
  n->backward = [n, parents, offsets, D] {
    for (std::size_t i = 0; i < parents.size(); ++i) {
      Node* p = parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      kernels::ops().axpy(1.0, n->grad.data() + offsets[i] * D, p->grad.data(),
                          static_cast<std::size_t>(p->grad.size()));
    }
  };
  return {n};
}

Var Graph::slice_rows(Var x, int64_t row0, int64_t rows) {
  const Tensor& X = x.val();
  if (X.rank() != 2 || row0 < 0 || row0 + rows > X.dim(0))
    throw std::invalid_argument("slice_rows: range");
  const int64_t D = X.dim(1);
  Tensor out({rows, D});
  std::copy_n(X.data() + row0 * D, rows * D, out.data());
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, row0, D] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    kernels::ops().axpy(1.0, n->grad.data(), px->grad.data() + row0 * D,
                        static_cast<std::size_t>(n->grad.size()));
  };
  return {n};
}

Var Graph::gather_rows(Var x, std::vector<int64_t> idx) {
  const Tensor& X = x.val();
  if (X.rank() != 2) throw std::invalid_argument("gather_rows: rank");
  const int64_t D = X.dim(1);
  Tensor out({static_cast<int64_t>(idx.size()), D});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(X.data() + idx[i] * D, D, out.data() + static_cast<int64_t>(i) * D);
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  auto idx_sp = std::make_shared<std::vector<int64_t>>(std::move(idx));
  n->backward = [n, px, idx_sp, D] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < idx_sp->size(); ++i)
      kernels::ops().axpy(1.0, n->grad.data() + static_cast<int64_t>(i) * D,
                          px->grad.data() + (*idx_sp)[i] * D, static_cast<std::size_t>(D));
  };
  return {n};
}

Var Graph::permute_gather(Var x, std::shared_ptr<const std::vector<int64_t>> map,
                          std::vector<int64_t> out_shape) {
  const Tensor& X = x.val();
  if (static_cast<int64_t>(map->size()) != Tensor::count(out_shape) ||
      static_cast<int64_t>(map->size()) != X.size())
    throw std::invalid_argument("permute_gather: map size");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < map->size(); ++i) out[static_cast<int64_t>(i)] = X[(*map)[i]];
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, map] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (std::size_t i = 0; i < map->size(); ++i)
      px->grad[(*map)[i]] += n->grad[static_cast<int64_t>(i)];
  };
  return {n};
}

Var Graph::grl(Var x, double lambda) {
  Node* n = make(x.val(), {x.n});
  Node* px = x.n;
  n->backward = [n, px, lambda] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    kernels::ops().axpy(-lambda, n->grad.data(), px->grad.data(),
                        static_cast<std::size_t>(n->grad.size()));
  };
  return {n};
}

Var Graph::detach(Var x) { return constant(x.val()); }

Var Graph::pick_nll(Var logp, std::vector<int> labels0) {
  const Tensor& LP = logp.val();
  if (LP.rank() != 2 || LP.dim(0) != static_cast<int64_t>(labels0.size()))
    throw std::invalid_argument("pick_nll: shapes");
  const int64_t B = LP.dim(0), K = LP.dim(1);
  Tensor out({B});
  for (int64_t i = 0; i < B; ++i) {
    const int y = labels0[static_cast<std::size_t>(i)];
    if (y < 0 || y >= K) throw std::out_of_range("pick_nll: label out of range");
    out[i] = -LP.at(i, y);
  }
  Node* n = make(std::move(out), {logp.n});
  Node* pl = logp.n;
  auto lab = std::make_shared<std::vector<int>>(std::move(labels0));
  n->backward = [n, pl, lab, K] {
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    for (int64_t i = 0; i < n->grad.size(); ++i)
      pl->grad[i * K + (*lab)[static_cast<std::size_t>(i)]] -= n->grad[i];
  };
  return {n};
}

Var Graph::pdist(Var x) {
  const Tensor& X = x.val();
  if (X.rank() != 2) throw std::invalid_argument("pdist: rank");
  const int64_t N = X.dim(0), D = X.dim(1);
  Tensor out({N, N});
  for (int64_t i = 0; i < N; ++i) {
    out.at(i, i) = 0.0;
    for (int64_t j = i + 1; j < N; ++j) {
      double s = 0.0;
      const double* xi = X.data() + i * D;
      const double* xj = X.data() + j * D;
      for (int64_t d = 0; d < D; ++d) {
        const double diff = xi[d] - xj[d];
        s += diff * diff;
      }
      const double dist = std::sqrt(s);
      out.at(i, j) = dist;
      out.at(j, i) = dist;
    }
  }
  Node* n = make(std::move(out), {x.n});
  Node* px = x.n;
  n->backward = [n, px, N, D] {
    if (!px->requires_grad) return;
    px->ensure_grad();
    for (int64_t i = 0; i < N; ++i) {
      for (int64_t j = 0; j < N; ++j) {
        if (i == j) continue;
        const double dist = n->value.at(i, j);
        if (dist < 1e-12) continue;  // subgradient 0 at coincident points
        const double g = n->grad.at(i, j) / dist;
        if (g == 0.0) continue;
        const double* xi = px->value.data() + i * D;
        const double* xj = px->value.data() + j * D;
        double* gi = px->grad.data() + i * D;
        double* gj = px->grad.data() + j * D;
        for (int64_t d = 0; d < D; ++d) {
          const double diff = (xi[d] - xj[d]) * g;
          gi[d] += diff;
          gj[d] -= diff;
        }
      }
    }
  };
  return {n};
}

void Graph::backward(Var loss) {
  if (loss.val().size() != 1) throw std::invalid_argument("backward: loss must be scalar");
  loss.n->ensure_grad();
  loss.n->grad[0] = 1.0;
  for (int id = loss.n->id; id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.grad_alloc && node.requires_grad && node.backward) node.backward();
  }
}

void Graph::clear() { nodes_.clear(); }

// ------------------------------------------------------------------- AdamW

AdamW::AdamW(const std::vector<Param*>& params) {
  st_.reserve(params.size());
  for (const Param* p : params)
    st_.push_back({Tensor::zeros(p->value.shape()), Tensor::zeros(p->value.shape())});
}

void AdamW::step(const std::vector<Param*>& params, double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    State& s = st_[i];
    for (int64_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      s.m[j] = beta1 * s.m[j] + (1.0 - beta1) * g;
      s.v[j] = beta2 * s.v[j] + (1.0 - beta2) * g * g;
      const double mhat = s.m[j] / bc1;
      const double vhat = s.v[j] / bc2;
      p.value[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.value[j]);
    }
  }
}

}  // namespace cki
