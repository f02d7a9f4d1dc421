#pragma once
// Sliding-window + global-token sparse attention.
//
// Every query position i attends to the key set
//   N_i = { j : |i-j| <= w }  ∪  G            (non-global i)
//   N_i = [0, n)                              (i ∈ G)
// Global attention is symmetric: global positions attend everywhere and are
// attended from everywhere. Windows truncate at sequence boundaries.
//
// The forward path is gather-based over a banded (CSR) layout and never
// materializes an n×n score matrix; a dense masked-attention reference is
// provided as the testing oracle and the quadratic baseline for benchmarks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "core/tensor.hpp"

namespace lfsum {

class AttentionPattern {
 public:
  // globals may be unsorted and may contain duplicates; indices must lie in
  // [0, n).
  AttentionPattern(int n, int w, std::vector<int> globals);

  int n() const { return n_; }
  int window() const { return w_; }
  const std::vector<int>& globals() const { return globals_; }

  bool is_global(int i) const { return global_mask_[i] != 0; }
  bool allowed(int i, int j) const {
    return (i >= j ? i - j : j - i) <= w_ || global_mask_[i] || global_mask_[j];
  }

  // Ascending neighbor list N_i.
  std::span<const int> neighbors(int i) const {
    return {cols_.data() + offsets_[i], cols_.data() + offsets_[i + 1]};
  }
  int row_size(int i) const { return static_cast<int>(offsets_[i + 1] - offsets_[i]); }
  long long row_offset(int i) const { return offsets_[i]; }
  long long nnz() const { return offsets_[n_]; }

  // Band width bound for non-global rows: 2w + 1 + |G|.
  int band_bound() const { return 2 * w_ + 1 + static_cast<int>(globals_.size()); }

  BoolMat to_mask() const;

  // Textual n×n grid, '#' where (i,j) is allowed and '.' elsewhere.
  std::string debug_grid() const;

 private:
  int n_ = 0;
  int w_ = 0;
  std::vector<int> globals_;        // sorted, unique
  std::vector<uint8_t> global_mask_;
  std::vector<long long> offsets_;  // n+1 CSR offsets
  std::vector<int> cols_;
};

using PatternPtr = std::shared_ptr<const AttentionPattern>;

PatternPtr build_pattern(int n, int w, std::vector<int> globals);

// Per-call accounting used to verify the banded-memory contract: the largest
// score buffer a sparse forward allocated, and whether any dense reference ran.
struct AttentionStats {
  long long sparse_calls = 0;
  long long dense_calls = 0;
  long long last_band_elems = 0;
  long long peak_band_elems = 0;
  long long peak_dense_elems = 0;

  static AttentionStats& local();
  void reset() { *this = AttentionStats{}; }
};

// Attention weights in banded storage, logically an n×n row-stochastic matrix
// with support exactly on the pattern.
template <class Real>
struct SparseWeightsT {
  PatternPtr pattern;
  std::vector<Real> values;  // aligned with pattern CSR order

  int n() const { return pattern->n(); }

  Real at(int i, int j) const {
    auto nb = pattern->neighbors(i);
    auto it = std::lower_bound(nb.begin(), nb.end(), j);
    if (it == nb.end() || *it != j) return Real(0);
    return values[size_t(pattern->row_offset(i) + (it - nb.begin()))];
  }

  // Materializes the logical matrix; intended for tests at small n.
  TensorT<Real> dense() const {
    TensorT<Real> out = TensorT<Real>::zeros({n(), n()});
    size_t idx = 0;
    for (int i = 0; i < n(); ++i)
      for (int j : pattern->neighbors(i)) out.at(i, j) = values[idx++];
    return out;
  }
};

namespace detail {

// Scaled banded scores -> per-row softmax, probabilities in CSR order.
// Accumulates row sums in double; scaling is 1/sqrt(d_k).
template <class Real>
std::vector<Real> banded_softmax_probs(const TensorT<Real>& q, const TensorT<Real>& k,
                                       const AttentionPattern& pattern) {
  const int n = pattern.n();
  const int d = q.cols();
  const double inv_sqrt_dk = 1.0 / std::sqrt(double(d));
  std::vector<Real> probs(pattern.nnz());
  std::vector<double> row(n);  // scratch, sized by the widest possible row
  size_t idx = 0;
  for (int i = 0; i < n; ++i) {
    auto nb = pattern.neighbors(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t t = 0; t < nb.size(); ++t) {
      double acc = 0;
      for (int p = 0; p < d; ++p) acc += double(q.at(i, p)) * double(k.at(nb[t], p));
      row[t] = acc * inv_sqrt_dk;
      mx = std::max(mx, row[t]);
    }
    double sum = 0;
    for (size_t t = 0; t < nb.size(); ++t) sum += std::exp(row[t] - mx);
    for (size_t t = 0; t < nb.size(); ++t)
      probs[idx + t] = Real(std::exp(row[t] - mx) / sum);
    idx += nb.size();
  }
  return probs;
}

template <class Real>
void check_attention_shapes(const TensorT<Real>& q, const TensorT<Real>& k,
                            const TensorT<Real>& v, const AttentionPattern& pattern,
                            const char* op) {
  check_2d(q.dim(), op);
  check_2d(k.dim(), op);
  check_2d(v.dim(), op);
  if (q.shape() != k.shape() || k.shape() != v.shape())
    fail(ErrorCode::shape, std::string(op) + ": Q " + shape_str(q.shape()) + ", K " +
                               shape_str(k.shape()) + ", V " + shape_str(v.shape()) +
                               " must agree");
  if (q.rows() != pattern.n())
    fail(ErrorCode::shape, std::string(op) + ": sequence length " +
                               std::to_string(q.rows()) + " does not match pattern n=" +
                               std::to_string(pattern.n()));
}

}  // namespace detail

// Row-stochastic attention weights restricted to the pattern (Q·Kᵀ/√d_k
// through a masked softmax realized directly on the band).
template <class Real>
SparseWeightsT<Real> sparse_attention_weights(const TensorT<Real>& q,
                                              const TensorT<Real>& k,
                                              const PatternPtr& pattern) {
  detail::check_attention_shapes(q, k, k, *pattern, "sparse_attention_weights");
  SparseWeightsT<Real> w;
  w.pattern = pattern;
  w.values = detail::banded_softmax_probs(q, k, *pattern);
  return w;
}

// out[i] = Σ_{j∈N_i} A(i,j) · V[j]; cost and memory proportional to Σ|N_i|.
// Differentiable w.r.t. Q, K, V through a hand-written banded backward.
template <class Real>
TensorT<Real> sparse_attention_forward(const TensorT<Real>& q, const TensorT<Real>& k,
                                       const TensorT<Real>& v, const PatternPtr& pattern) {
  detail::check_attention_shapes(q, k, v, *pattern, "sparse_attention_forward");
  const int n = pattern->n();
  const int d = q.cols();
  std::vector<Real> probs = detail::banded_softmax_probs(q, k, *pattern);

  auto& stats = AttentionStats::local();
  stats.sparse_calls += 1;
  stats.last_band_elems = pattern->nnz();
  stats.peak_band_elems = std::max(stats.peak_band_elems, pattern->nnz());

  TensorT<Real> out = TensorT<Real>::zeros({n, d});
  {
    size_t idx = 0;
    for (int i = 0; i < n; ++i) {
      auto nb = pattern->neighbors(i);
      for (int p = 0; p < d; ++p) {
        double acc = 0;
        for (size_t t = 0; t < nb.size(); ++t)
          acc += double(probs[idx + t]) * double(v.at(nb[t], p));
        out.at(i, p) = Real(acc);
      }
      idx += nb.size();
    }
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() &&
      (q.requires_grad() || k.requires_grad() || v.requires_grad())) {
    out.set_requires_grad(true);
    auto qs = q.storage(), ks = k.storage(), vs = v.storage(), os = out.storage();
    tape.record("sparse_attention", os,
                [qs, ks, vs, os, pattern, probs = std::move(probs), n, d] {
      const double inv_sqrt_dk = 1.0 / std::sqrt(double(d));
      const bool need_qk = qs->requires_grad || ks->requires_grad;
      if (qs->requires_grad) detail::ensure_grad<Real>(*qs);
      if (ks->requires_grad) detail::ensure_grad<Real>(*ks);
      if (vs->requires_grad) detail::ensure_grad<Real>(*vs);
      std::vector<double> da(pattern->band_bound() + n, 0.0);  // per-row scratch
      size_t idx = 0;
      for (int i = 0; i < n; ++i) {
        auto nb = pattern->neighbors(i);
        // dV[j] += A(i,j) · dOut[i];  dA(i,j) = dOut[i] · V[j]
        double row_dot = 0;
        for (size_t t = 0; t < nb.size(); ++t) {
          const int j = nb[t];
          double dat = 0;
          for (int p = 0; p < d; ++p) {
            const double go = double(os->grad[size_t(i) * d + p]);
            dat += go * double(vs->data[size_t(j) * d + p]);
            if (vs->requires_grad)
              vs->grad[size_t(j) * d + p] += Real(double(probs[idx + t]) * go);
          }
          da[t] = dat;
          row_dot += dat * double(probs[idx + t]);
        }
        if (need_qk) {
          // dS(i,j) = A(i,j)·(dA(i,j) − Σ_k A(i,k)·dA(i,k)), then the scaled
          // score product routes into Q and K.
          for (size_t t = 0; t < nb.size(); ++t) {
            const int j = nb[t];
            const double ds = double(probs[idx + t]) * (da[t] - row_dot) * inv_sqrt_dk;
            for (int p = 0; p < d; ++p) {
              if (qs->requires_grad)
                qs->grad[size_t(i) * d + p] += Real(ds * double(ks->data[size_t(j) * d + p]));
              if (ks->requires_grad)
                ks->grad[size_t(j) * d + p] += Real(ds * double(qs->data[size_t(i) * d + p]));
            }
          }
        }
        idx += nb.size();
      }
    });
  }
  return out;
}

// Full O(n²) masked attention, used as the oracle for sparse/dense
// equivalence tests, as the quadratic baseline in scaling benchmarks, and for
// the (short) decoder self/cross attention. Composed from recorded tensor ops,
// so it is differentiable as-is.
template <class Real>
TensorT<Real> dense_attention_reference(const TensorT<Real>& q, const TensorT<Real>& k,
                                        const TensorT<Real>& v, const BoolMat& mask) {
  detail::check_2d(q.dim(), "dense_attention_reference");
  detail::check_2d(k.dim(), "dense_attention_reference");
  detail::check_2d(v.dim(), "dense_attention_reference");
  if (q.cols() != k.cols() || k.rows() != v.rows())
    fail(ErrorCode::shape, "dense_attention_reference: Q " + shape_str(q.shape()) +
                               ", K " + shape_str(k.shape()) + ", V " +
                               shape_str(v.shape()) + " do not agree");
  if (mask.rows != q.rows() || mask.cols != k.rows())
    fail(ErrorCode::shape, "dense_attention_reference: mask " +
                               std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                               " does not match scores");
  auto& stats = AttentionStats::local();
  stats.dense_calls += 1;
  stats.peak_dense_elems =
      std::max(stats.peak_dense_elems, (long long)q.rows() * k.rows());

  TensorT<Real> scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(double(q.cols())));
  TensorT<Real> weights = softmax_rows(scores, &mask);
  return matmul(weights, v);
}

}  // namespace lfsum
