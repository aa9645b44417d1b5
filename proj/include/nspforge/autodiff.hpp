#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "nspforge/errors.hpp"
#include "nspforge/threads.hpp"

namespace nspforge {

// Reverse-mode tape over row-major (rows x cols) double tensors.
//
// Forward is eager: each op computes its value when recorded, so val() is
// usable immediately and a tape built without backward() doubles as the
// plain inference path — training and sampling share one arithmetic,
// which keeps importance ratios exactly 1 under unchanged parameters.
//
// Parameters live in one external flat vector. backward(loss) accumulates
// d loss / d params into the external grad vector (never zeroed here), so
// callers can sum gradients across micro-batches. A node participates in the
// backward sweep only if a trainable parameter is reachable from it; frozen
// segments therefore cost no gradient arithmetic.

enum class Op : uint8_t {
  kConst, kParam, kLin, kScale, kScaleByNode, kHadamard, kMatmul, kAddRowvec,
  kSilu, kTanh, kExp, kSoftmaxRows, kRmsnormRows, kConcatRows, kConcatCols,
  kGatherRows, kSliceRows, kMeanRows, kSum, kMeanSq, kGaussLogp, kMin, kClamp,
};

class Tape {
 public:
  // grad may be null for pure-inference tapes. trainable, when given, marks
  // per-index trainability of params (frozen segments receive no gradient).
  Tape(const std::vector<double>& params, std::vector<double>* grad,
       const std::vector<uint8_t>* trainable = nullptr)
      : params_(&params), grad_(grad), trainable_(trainable) {
    if (grad && grad->size() != params.size())
      throw ProtocolError("tape: grad length != param length");
  }

  void reset() {
    nodes_.clear();
    maps_.clear();
    vals_used_ = 0;
  }

  int constant(const double* d, int rows, int cols) {
    const int id = push(Op::kConst, -1, -1, rows, cols, false);
    std::memcpy(vals(id), d, numel(id) * sizeof(double));
    return id;
  }
  int constant(std::span<const double> d, int rows, int cols) {
    check(static_cast<size_t>(rows) * cols == d.size(),
          "constant: data size != rows*cols");
    return constant(d.data(), rows, cols);
  }
  int scalar_const(double v) { return constant(&v, 1, 1); }

  int param(size_t off, int rows, int cols) {
    const size_t n = static_cast<size_t>(rows) * cols;
    check(off + n <= params_->size(), "param: segment out of range");
    const bool tr =
        grad_ != nullptr && (trainable_ == nullptr || (*trainable_)[off] != 0);
    const int id = push(Op::kParam, -1, -1, rows, cols, tr);
    nodes_[id].i0 = static_cast<int>(off);
    std::memcpy(vals(id), params_->data() + off, n * sizeof(double));
    return id;
  }

  // alpha*a + beta*b, elementwise, equal shapes.
  int lin(int a, int b, double alpha, double beta) {
    same_shape(a, b, "lin");
    const int id = push(Op::kLin, a, b, rows(a), cols(a), ng(a) || ng(b));
    nodes_[id].p0 = alpha;
    nodes_[id].p1 = beta;
    const double *pa = vals(a), *pb = vals(b);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i)
      o[i] = alpha * pa[i] + beta * pb[i];
    return id;
  }

  int scale(int a, double c) {
    const int id = push(Op::kScale, a, -1, rows(a), cols(a), ng(a));
    nodes_[id].p0 = c;
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i) o[i] = c * pa[i];
    return id;
  }

  // a scaled by the 1x1 node s (both differentiable).
  int scale_by(int a, int s) {
    check(rows(s) == 1 && cols(s) == 1, "scale_by: scaler must be 1x1");
    const int id = push(Op::kScaleByNode, a, s, rows(a), cols(a),
                        ng(a) || ng(s));
    const double c = vals(s)[0];
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i) o[i] = c * pa[i];
    return id;
  }

  int hadamard(int a, int b) {
    same_shape(a, b, "hadamard");
    const int id = push(Op::kHadamard, a, b, rows(a), cols(a), ng(a) || ng(b));
    const double *pa = vals(a), *pb = vals(b);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i) o[i] = pa[i] * pb[i];
    return id;
  }

  int matmul(int a, int b, bool ta = false, bool tb = false) {
    const int am = ta ? cols(a) : rows(a), ak = ta ? rows(a) : cols(a);
    const int bk = tb ? cols(b) : rows(b), bn = tb ? rows(b) : cols(b);
    check(ak == bk, "matmul: inner dims disagree");
    const int id = push(Op::kMatmul, a, b, am, bn, ng(a) || ng(b));
    nodes_[id].i0 = ta;
    nodes_[id].i1 = tb;
    gemm(vals(id), vals(a), vals(b), am, bn, ak, ta, tb, rows(a), cols(a),
         rows(b), cols(b), /*accumulate=*/false);
    return id;
  }

  int add_rowvec(int a, int v) {
    check(rows(v) == 1 && cols(v) == cols(a), "add_rowvec: want 1 x cols(a)");
    const int id = push(Op::kAddRowvec, a, v, rows(a), cols(a), ng(a) || ng(v));
    const double *pa = vals(a), *pv = vals(v);
    double* o = vals(id);
    const int R = rows(a), C = cols(a);
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j) o[i * C + j] = pa[i * C + j] + pv[j];
    return id;
  }

  int silu(int a) {
    const int id = push(Op::kSilu, a, -1, rows(a), cols(a), ng(a));
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i)
      o[i] = pa[i] * sigmoid(pa[i]);
    return id;
  }

  int tanh_(int a) {
    const int id = push(Op::kTanh, a, -1, rows(a), cols(a), ng(a));
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i) o[i] = std::tanh(pa[i]);
    return id;
  }

  int exp_(int a) {
    const int id = push(Op::kExp, a, -1, rows(a), cols(a), ng(a));
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i) o[i] = std::exp(pa[i]);
    return id;
  }

  int softmax_rows(int a) {
    const int id = push(Op::kSoftmaxRows, a, -1, rows(a), cols(a), ng(a));
    const double* pa = vals(a);
    double* o = vals(id);
    const int R = rows(a), C = cols(a);
    for (int i = 0; i < R; ++i) {
      const double* x = pa + static_cast<size_t>(i) * C;
      double* y = o + static_cast<size_t>(i) * C;
      double mx = x[0];
      for (int j = 1; j < C; ++j) mx = std::max(mx, x[j]);
      double z = 0.0;
      for (int j = 0; j < C; ++j) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
      }
      const double inv = 1.0 / z;
      for (int j = 0; j < C; ++j) y[j] *= inv;
    }
    return id;
  }

  // Per row: x / sqrt(mean(x^2) + eps) * w, with w a (1 x cols) weight node.
  int rmsnorm_rows(int a, int w, double eps) {
    check(rows(w) == 1 && cols(w) == cols(a), "rmsnorm: weight must be 1 x D");
    const int id =
        push(Op::kRmsnormRows, a, w, rows(a), cols(a), ng(a) || ng(w));
    nodes_[id].p0 = eps;
    const double *pa = vals(a), *pw = vals(w);
    double* o = vals(id);
    const int R = rows(a), C = cols(a);
    for (int i = 0; i < R; ++i) {
      const double* x = pa + static_cast<size_t>(i) * C;
      double* y = o + static_cast<size_t>(i) * C;
      const double r = 1.0 / std::sqrt(mean_square(x, C) + eps);
      for (int j = 0; j < C; ++j) y[j] = x[j] * r * pw[j];
    }
    return id;
  }

  int concat_rows(int a, int b) {
    check(cols(a) == cols(b), "concat_rows: column counts disagree");
    const int id =
        push(Op::kConcatRows, a, b, rows(a) + rows(b), cols(a), ng(a) || ng(b));
    double* o = vals(id);
    std::memcpy(o, vals(a), numel(a) * sizeof(double));
    std::memcpy(o + numel(a), vals(b), numel(b) * sizeof(double));
    return id;
  }

  int concat_cols(int a, int b) {
    check(rows(a) == rows(b), "concat_cols: row counts disagree");
    const int ca = cols(a), cb = cols(b), R = rows(a);
    const int id = push(Op::kConcatCols, a, b, R, ca + cb, ng(a) || ng(b));
    const double *pa = vals(a), *pb = vals(b);
    double* o = vals(id);
    for (int i = 0; i < R; ++i) {
      std::memcpy(o + static_cast<size_t>(i) * (ca + cb), pa + static_cast<size_t>(i) * ca,
                  ca * sizeof(double));
      std::memcpy(o + static_cast<size_t>(i) * (ca + cb) + ca,
                  pb + static_cast<size_t>(i) * cb, cb * sizeof(double));
    }
    return id;
  }

  // out[r, :] = a[map[r], :]. Backward scatter-adds, serially, so the same
  // source row may appear any number of times.
  int gather_rows(int a, std::vector<int> map) {
    for (int r : map) check(r >= 0 && r < rows(a), "gather_rows: row oob");
    const int id = push(Op::kGatherRows, a, -1,
                        static_cast<int>(map.size()), cols(a), ng(a));
    nodes_[id].i0 = static_cast<int>(maps_.size());
    const double* pa = vals(a);
    double* o = vals(id);
    const int C = cols(a);
    for (size_t r = 0; r < map.size(); ++r)
      std::memcpy(o + r * C, pa + static_cast<size_t>(map[r]) * C,
                  C * sizeof(double));
    maps_.push_back(std::move(map));
    return id;
  }

  int slice_rows(int a, int r0, int nrows) {
    check(r0 >= 0 && nrows >= 1 && r0 + nrows <= rows(a),
          "slice_rows: range oob");
    const int id = push(Op::kSliceRows, a, -1, nrows, cols(a), ng(a));
    nodes_[id].i0 = r0;
    std::memcpy(vals(id), vals(a) + static_cast<size_t>(r0) * cols(a),
                numel(id) * sizeof(double));
    return id;
  }

  int mean_rows(int a) {
    const int id = push(Op::kMeanRows, a, -1, 1, cols(a), ng(a));
    const double* pa = vals(a);
    double* o = vals(id);
    const int R = rows(a), C = cols(a);
    const double inv = 1.0 / R;
    for (int j = 0; j < C; ++j) o[j] = 0.0;
    for (int i = 0; i < R; ++i)
      for (int j = 0; j < C; ++j) o[j] += pa[static_cast<size_t>(i) * C + j];
    for (int j = 0; j < C; ++j) o[j] *= inv;
    return id;
  }

  int sum(int a) {
    const int id = push(Op::kSum, a, -1, 1, 1, ng(a));
    const double* pa = vals(a);
    double acc = 0.0;
    for (size_t i = 0, n = numel(a); i < n; ++i) acc += pa[i];
    vals(id)[0] = acc;
    return id;
  }

  // mean over every entry of a^2 — the squared-error reduction.
  int mean_sq(int a) {
    const int id = push(Op::kMeanSq, a, -1, 1, 1, ng(a));
    const double* pa = vals(a);
    double acc = 0.0;
    const size_t n = numel(a);
    for (size_t i = 0; i < n; ++i) acc += pa[i] * pa[i];
    vals(id)[0] = acc / static_cast<double>(n);
    return id;
  }

  // Sum over entries of log N(x_i; mu_i, sigma), sigma a positive scalar.
  // x is the realized sample (held constant); gradients flow into mu only.
  int gauss_logp(int mu, int x, double sigma) {
    same_shape(mu, x, "gauss_logp");
    if (!(sigma > 0.0)) throw DomainError("gauss_logp: sigma must be > 0");
    const int id = push(Op::kGaussLogp, mu, x, 1, 1, ng(mu));
    nodes_[id].p0 = sigma;
    const double *pm = vals(mu), *px = vals(x);
    const size_t n = numel(mu);
    const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = px[i] - pm[i];
      acc -= d * d * inv2s2;
    }
    acc -= static_cast<double>(n) *
           (std::log(sigma) + 0.5 * std::log(2.0 * std::numbers::pi));
    vals(id)[0] = acc;
    return id;
  }

  // Elementwise min; ties route the gradient to a.
  int min_(int a, int b) {
    same_shape(a, b, "min");
    const int id = push(Op::kMin, a, b, rows(a), cols(a), ng(a) || ng(b));
    const double *pa = vals(a), *pb = vals(b);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i)
      o[i] = pa[i] <= pb[i] ? pa[i] : pb[i];
    return id;
  }

  // Clamp to [lo, hi]; gradient passes where lo <= value <= hi.
  int clamp(int a, double lo, double hi) {
    check(lo <= hi, "clamp: lo > hi");
    const int id = push(Op::kClamp, a, -1, rows(a), cols(a), ng(a));
    nodes_[id].p0 = lo;
    nodes_[id].p1 = hi;
    const double* pa = vals(a);
    double* o = vals(id);
    for (size_t i = 0, n = numel(id); i < n; ++i)
      o[i] = pa[i] < lo ? lo : (pa[i] > hi ? hi : pa[i]);
    return id;
  }

  int rows(int id) const { return nodes_[id].rows; }
  int cols(int id) const { return nodes_[id].cols; }
  size_t numel(int id) const {
    return static_cast<size_t>(nodes_[id].rows) * nodes_[id].cols;
  }
  std::span<const double> val(int id) const {
    return {vals_.data() + nodes_[id].off, numel(id)};
  }
  double scalar(int id) const {
    check(numel(id) == 1, "scalar: node is not 1x1");
    return vals_[nodes_[id].off];
  }
  size_t node_count() const { return nodes_.size(); }

  // Accumulates d loss / d params into the external grad vector (adds to
  // whatever is already there). May be called once per recorded loss.
  void backward(int loss) {
    if (grad_ == nullptr) throw ProtocolError("backward: tape has no grad");
    check(numel(loss) == 1, "backward: loss must be 1x1");
    if (!std::isfinite(vals_[nodes_[loss].off]))
      throw NumericsError("backward: non-finite loss");
    grads_.assign(vals_used_, 0.0);
    gval(loss)[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      const Node& n = nodes_[id];
      if (!n.needs_grad) continue;
      backward_one(id, n);
    }
  }

 private:
  struct Node {
    Op op;
    int a, b;
    int rows, cols;
    size_t off;
    double p0 = 0.0, p1 = 0.0;
    int i0 = 0, i1 = 0;
    bool needs_grad;
  };

  static void check(bool ok, const char* msg) {
    if (!ok) throw ShapeError(msg);
  }
  void same_shape(int a, int b, const char* who) const {
    if (rows(a) != rows(b) || cols(a) != cols(b))
      throw ShapeError(std::string(who) + ": shape mismatch");
  }
  static double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
  static double mean_square(const double* x, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += x[i] * x[i];
    return acc / n;
  }

  bool ng(int id) const { return nodes_[id].needs_grad; }
  double* vals(int id) { return vals_.data() + nodes_[id].off; }
  const double* vals(int id) const { return vals_.data() + nodes_[id].off; }
  double* gval(int id) { return grads_.data() + nodes_[id].off; }

  int push(Op op, int a, int b, int rows, int cols, bool needs_grad) {
    check(rows >= 1 && cols >= 1, "node: dims must be positive");
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.rows = rows;
    n.cols = cols;
    n.off = vals_used_;
    n.needs_grad = needs_grad;
    vals_used_ += static_cast<size_t>(rows) * cols;
    if (vals_.size() < vals_used_) vals_.resize(vals_used_);
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
  }

  // C (m x n) += or = op(A) * op(B); (ar, ac) and (br, bc) are the stored
  // layouts. Parallel over chunks of C rows; each output element is written
  // by exactly one chunk with a fixed-order inner loop, so results are
  // bit-identical for every worker count.
  static void gemm(double* C, const double* A, const double* B, int m, int n,
                   int k, bool ta, bool tb, int ar, int ac, int br, int bc,
                   bool accumulate) {
    (void)ar;
    (void)br;
    parallel_chunks(static_cast<size_t>(m), 32, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i) {
        double* crow = C + i * n;
        if (!accumulate)
          for (int j = 0; j < n; ++j) crow[j] = 0.0;
        for (int l = 0; l < k; ++l) {
          const double av = ta ? A[static_cast<size_t>(l) * ac + i]
                               : A[i * ac + l];
          if (tb) {
            // B stored n x k: column l of op(B) is B[j*bc + l].
            for (int j = 0; j < n; ++j) crow[j] += av * B[static_cast<size_t>(j) * bc + l];
          } else {
            const double* brow = B + static_cast<size_t>(l) * bc;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
          }
        }
      }
    });
  }

  void backward_one(int id, const Node& n) {
    const double* g = grads_.data() + n.off;
    switch (n.op) {
      case Op::kConst:
        break;
      case Op::kParam: {
        // Flush into the external gradient; off index i0.
        double* dst = grad_->data() + n.i0;
        for (size_t i = 0, m = numel(id); i < m; ++i) dst[i] += g[i];
        break;
      }
      case Op::kLin: {
        axpy_into(n.a, g, n.p0);
        axpy_into(n.b, g, n.p1);
        break;
      }
      case Op::kScale:
        axpy_into(n.a, g, n.p0);
        break;
      case Op::kScaleByNode: {
        const double c = vals(n.b)[0];
        axpy_into(n.a, g, c);
        if (ng(n.b)) {
          const double* pa = vals(n.a);
          double acc = 0.0;
          for (size_t i = 0, m = numel(n.a); i < m; ++i) acc += g[i] * pa[i];
          gval(n.b)[0] += acc;
        }
        break;
      }
      case Op::kHadamard: {
        if (ng(n.a)) {
          const double* pb = vals(n.b);
          double* da = gval(n.a);
          for (size_t i = 0, m = numel(id); i < m; ++i) da[i] += g[i] * pb[i];
        }
        if (ng(n.b)) {
          const double* pa = vals(n.a);
          double* db = gval(n.b);
          for (size_t i = 0, m = numel(id); i < m; ++i) db[i] += g[i] * pa[i];
        }
        break;
      }
      case Op::kMatmul: {
        const bool ta = n.i0 != 0, tb = n.i1 != 0;
        const int m = n.rows, nn = n.cols;
        const int k = ta ? rows(n.a) : cols(n.a);
        // dC is m x nn.
        if (ng(n.a)) {
          double* da = gval(n.a);
          if (!ta) {
            // dA += dC * op(B)^T: (m x nn) * (nn x k)
            gemm(da, g, vals(n.b), m, k, nn, false, !tb, m, nn, rows(n.b),
                 cols(n.b), true);
          } else {
            // A stored k x m; dA += op(B restored) * dC^T -> (k x m)
            // dA[l,i] = sum_j dC[i,j] * opB[l,j]
            gemm(da, vals(n.b), g, k, m, nn, tb, true, rows(n.b), cols(n.b), m,
                 nn, true);
          }
        }
        if (ng(n.b)) {
          double* db = gval(n.b);
          if (!tb) {
            // B stored k x nn; dB += op(A)^T * dC
            gemm(db, vals(n.a), g, k, nn, m, !ta, false, rows(n.a), cols(n.a),
                 m, nn, true);
          } else {
            // B stored nn x k; dB[j,l] = sum_i dC[i,j] * opA[i,l]
            gemm(db, g, vals(n.a), nn, k, m, true, ta, m, nn, rows(n.a),
                 cols(n.a), true);
          }
        }
        break;
      }
      case Op::kAddRowvec: {
        axpy_into(n.a, g, 1.0);
        if (ng(n.b)) {
          double* dv = gval(n.b);
          const int R = n.rows, C = n.cols;
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < C; ++j) dv[j] += g[static_cast<size_t>(i) * C + j];
        }
        break;
      }
      case Op::kSilu: {
        const double* x = vals(n.a);
        double* da = gval(n.a);
        for (size_t i = 0, m = numel(id); i < m; ++i) {
          const double s = sigmoid(x[i]);
          da[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
        }
        break;
      }
      case Op::kTanh: {
        const double* y = vals(id);
        double* da = gval(n.a);
        for (size_t i = 0, m = numel(id); i < m; ++i)
          da[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::kExp: {
        const double* y = vals(id);
        double* da = gval(n.a);
        for (size_t i = 0, m = numel(id); i < m; ++i) da[i] += g[i] * y[i];
        break;
      }
      case Op::kSoftmaxRows: {
        const double* y = vals(id);
        double* da = gval(n.a);
        const int R = n.rows, C = n.cols;
        for (int i = 0; i < R; ++i) {
          const double* yr = y + static_cast<size_t>(i) * C;
          const double* gr = g + static_cast<size_t>(i) * C;
          double* dr = da + static_cast<size_t>(i) * C;
          double dot = 0.0;
          for (int j = 0; j < C; ++j) dot += gr[j] * yr[j];
          for (int j = 0; j < C; ++j) dr[j] += yr[j] * (gr[j] - dot);
        }
        break;
      }
      case Op::kRmsnormRows: {
        const double* x = vals(n.a);
        const double* w = vals(n.b);
        const int R = n.rows, C = n.cols;
        for (int i = 0; i < R; ++i) {
          const double* xr = x + static_cast<size_t>(i) * C;
          const double* gr = g + static_cast<size_t>(i) * C;
          const double r = 1.0 / std::sqrt(mean_square(xr, C) + n.p0);
          if (ng(n.a)) {
            double* dr = gval(n.a) + static_cast<size_t>(i) * C;
            double s = 0.0;
            for (int j = 0; j < C; ++j) s += gr[j] * w[j] * xr[j];
            const double coef = r * r * r * s / C;
            for (int j = 0; j < C; ++j)
              dr[j] += r * w[j] * gr[j] - coef * xr[j];
          }
          if (ng(n.b)) {
            double* dw = gval(n.b);
            for (int j = 0; j < C; ++j) dw[j] += gr[j] * xr[j] * r;
          }
        }
        break;
      }
      case Op::kConcatRows: {
        if (ng(n.a)) axpy_raw(gval(n.a), g, numel(n.a));
        if (ng(n.b)) axpy_raw(gval(n.b), g + numel(n.a), numel(n.b));
        break;
      }
      case Op::kConcatCols: {
        const int R = n.rows, ca = cols(n.a), cb = cols(n.b);
        if (ng(n.a)) {
          double* da = gval(n.a);
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < ca; ++j)
              da[static_cast<size_t>(i) * ca + j] +=
                  g[static_cast<size_t>(i) * (ca + cb) + j];
        }
        if (ng(n.b)) {
          double* db = gval(n.b);
          for (int i = 0; i < R; ++i)
            for (int j = 0; j < cb; ++j)
              db[static_cast<size_t>(i) * cb + j] +=
                  g[static_cast<size_t>(i) * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::kGatherRows: {
        const auto& map = maps_[n.i0];
        double* da = gval(n.a);
        const int C = n.cols;
        for (size_t r = 0; r < map.size(); ++r) {
          double* dst = da + static_cast<size_t>(map[r]) * C;
          const double* src = g + r * C;
          for (int j = 0; j < C; ++j) dst[j] += src[j];
        }
        break;
      }
      case Op::kSliceRows: {
        double* da = gval(n.a) + static_cast<size_t>(n.i0) * n.cols;
        axpy_raw(da, g, numel(id));
        break;
      }
      case Op::kMeanRows: {
        double* da = gval(n.a);
        const int R = rows(n.a), C = n.cols;
        const double inv = 1.0 / R;
        for (int i = 0; i < R; ++i)
          for (int j = 0; j < C; ++j)
            da[static_cast<size_t>(i) * C + j] += g[j] * inv;
        break;
      }
      case Op::kSum: {
        const double gv = g[0];
        double* da = gval(n.a);
        for (size_t i = 0, m = numel(n.a); i < m; ++i) da[i] += gv;
        break;
      }
      case Op::kMeanSq: {
        const double gv = g[0];
        const double* x = vals(n.a);
        double* da = gval(n.a);
        const size_t m = numel(n.a);
        const double coef = 2.0 * gv / static_cast<double>(m);
        for (size_t i = 0; i < m; ++i) da[i] += coef * x[i];
        break;
      }
      case Op::kGaussLogp: {
        const double gv = g[0];
        const double* pm = vals(n.a);
        const double* px = vals(n.b);
        double* dm = gval(n.a);
        const double inv_s2 = 1.0 / (n.p0 * n.p0);
        for (size_t i = 0, m = numel(n.a); i < m; ++i)
          dm[i] += gv * (px[i] - pm[i]) * inv_s2;
        break;
      }
      case Op::kMin: {
        const double *pa = vals(n.a), *pb = vals(n.b);
        for (size_t i = 0, m = numel(id); i < m; ++i) {
          if (pa[i] <= pb[i]) {
            if (ng(n.a)) gval(n.a)[i] += g[i];
          } else {
            if (ng(n.b)) gval(n.b)[i] += g[i];
          }
        }
        break;
      }
      case Op::kClamp: {
        const double* x = vals(n.a);
        double* da = gval(n.a);
        for (size_t i = 0, m = numel(id); i < m; ++i)
          if (x[i] >= n.p0 && x[i] <= n.p1) da[i] += g[i];
        break;
      }
    }
  }

  void axpy_into(int id, const double* g, double coef) {
    if (!ng(id)) return;
    double* d = gval(id);
    for (size_t i = 0, m = numel(id); i < m; ++i) d[i] += coef * g[i];
  }
  static void axpy_raw(double* dst, const double* src, size_t n) {
    for (size_t i = 0; i < n; ++i) dst[i] += src[i];
  }

  const std::vector<double>* params_;
  std::vector<double>* grad_;
  const std::vector<uint8_t>* trainable_;
  std::vector<Node> nodes_;
  std::vector<std::vector<int>> maps_;
  std::vector<double> vals_, grads_;
  size_t vals_used_ = 0;
};

}  // namespace nspforge
