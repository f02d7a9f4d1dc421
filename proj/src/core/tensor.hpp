#pragma once
// Dense 2-D tensors with a reverse-mode autodiff tape.
//
// The production scalar type is float (see lfsum::Tensor); reductions inside
// every op accumulate in double and round once on store. The whole core is
// parameterized over the scalar so that gradient-oracle tests can instantiate
// the identical rules in double precision.
//
// The tape is thread-local and rebuilt per forward pass. A tensor is a cheap
// handle onto shared storage; values are immutable once created except for
// grad population during backward().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "core/error.hpp"

namespace lfsum {

// Boolean mask used by row-wise ops; nonzero marks a live position.
struct BoolMat {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> v;

  BoolMat() = default;
  BoolMat(int r, int c, bool fill = false)
      : rows(r), cols(c), v(static_cast<size_t>(r) * c, fill ? 1 : 0) {}

  uint8_t& at(int i, int j) { return v[static_cast<size_t>(i) * cols + j]; }
  uint8_t at(int i, int j) const { return v[static_cast<size_t>(i) * cols + j]; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class Real>
class TapeT;

template <class Real>
class TensorT {
 public:
  struct Storage {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad;  // empty until backward reaches this tensor
    bool requires_grad = false;
    long long op_node = -1;  // tape index of the op that produced this tensor
    uint64_t tape_epoch = 0;
  };

  TensorT() = default;

  static TensorT zeros(std::vector<int> shape) {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    size_t n = checked_numel(shape);
    t.s_->shape = std::move(shape);
    t.s_->data.assign(n, Real(0));
    return t;
  }

  static TensorT full(std::vector<int> shape, Real value) {
    TensorT t = zeros(std::move(shape));
    for (auto& x : t.s_->data) x = value;
    return t;
  }

  static TensorT from_data(std::vector<int> shape, std::vector<Real> data) {
    if (checked_numel(shape) != data.size())
      fail(ErrorCode::shape, "tensor: " + shape_str(shape) + " cannot hold " +
                                 std::to_string(data.size()) + " values");
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(data);
    return t;
  }

  static TensorT scalar(Real value) { return from_data({1}, {value}); }

  static TensorT uniform(std::vector<int> shape, Real lo, Real hi,
                         std::mt19937_64& rng) {
    TensorT t = zeros(std::move(shape));
    std::uniform_real_distribution<double> dist(double(lo), double(hi));
    for (auto& x : t.s_->data) x = Real(dist(rng));
    return t;
  }

  bool defined() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  size_t numel() const { return s_->data.size(); }
  int dim() const { return static_cast<int>(s_->shape.size()); }

  int rows() const { return s_->shape.empty() ? 1 : s_->shape[0]; }
  int cols() const { return dim() < 2 ? 1 : s_->shape[1]; }

  std::vector<Real>& data() { return s_->data; }
  const std::vector<Real>& data() const { return s_->data; }

  Real& at(int i, int j) { return s_->data[static_cast<size_t>(i) * cols() + j]; }
  Real at(int i, int j) const {
    return s_->data[static_cast<size_t>(i) * cols() + j];
  }
  Real& at(int i) { return s_->data[i]; }
  Real at(int i) const { return s_->data[i]; }

  // Scalar fetch; throws unless numel()==1.
  Real value() const {
    if (numel() != 1)
      fail(ErrorCode::shape, "value: tensor " + shape_str(shape()) + " is not scalar");
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  TensorT& set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  const std::vector<Real>& grad() const {
    if (s_->grad.empty())
      fail(ErrorCode::state, "grad: no gradient populated for this tensor");
    return s_->grad;
  }
  void zero_grad() { s_->grad.clear(); }

  // Deep copy of values; the copy is a leaf without grad history.
  TensorT clone_detached() const {
    TensorT t = zeros(s_->shape);
    t.s_->data = s_->data;
    return t;
  }

  std::shared_ptr<Storage> storage() const { return s_; }

  static size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty())
      fail(ErrorCode::shape, "tensor: rank-0 shapes are not supported");
    size_t n = 1;
    for (int d : shape) {
      if (d <= 0)
        fail(ErrorCode::shape, "tensor: non-positive dimension in " + shape_str(shape));
      n *= static_cast<size_t>(d);
    }
    return n;
  }

 private:
  std::shared_ptr<Storage> s_;
};

// Thread-local dynamic tape. One tape per thread of control; independent
// threads run independent graphs.
template <class Real>
class TapeT {
 public:
  using StoragePtr = std::shared_ptr<typename TensorT<Real>::Storage>;

  static TapeT& active() {
    thread_local TapeT tape;
    return tape;
  }

  bool recording() const { return no_grad_depth_ == 0; }
  size_t size() const { return nodes_.size(); }
  uint64_t epoch() const { return epoch_; }

  void clear() {
    nodes_.clear();
    backward_ran_ = false;
    ++epoch_;
  }

  // Registers the node that produced `out` and stamps the output storage.
  void record(const char* op, StoragePtr out, std::function<void()> backward_fn) {
    out->op_node = static_cast<long long>(nodes_.size());
    out->tape_epoch = epoch_;
    nodes_.push_back(Node{op, std::move(out), std::move(backward_fn)});
  }

  // Populates grad on every requires_grad ancestor of `loss`. Each recorded
  // node is visited at most once, in reverse recording order.
  void backward(const TensorT<Real>& loss) {
    if (loss.numel() != 1)
      fail(ErrorCode::shape,
           "backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (backward_ran_)
      fail(ErrorCode::state,
           "backward: tape already consumed; clear() before the next pass");
    auto st = loss.storage();
    bool attached = st->op_node >= 0 && st->tape_epoch == epoch_ &&
                    static_cast<size_t>(st->op_node) < nodes_.size() &&
                    nodes_[st->op_node].out == st;
    if (!attached)
      fail(ErrorCode::state, "backward: loss is detached from the active tape");
    backward_ran_ = true;
    st->grad.assign(1, Real(1));
    for (long long i = st->op_node; i >= 0; --i) {
      if (!nodes_[i].out->grad.empty()) nodes_[i].fn();
    }
  }

  struct NoGrad {
    NoGrad() { ++active().no_grad_depth_; }
    ~NoGrad() { --active().no_grad_depth_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
  };

 private:
  struct Node {
    const char* op;
    StoragePtr out;
    std::function<void()> fn;
  };

  std::vector<Node> nodes_;
  int no_grad_depth_ = 0;
  bool backward_ran_ = false;
  uint64_t epoch_ = 1;
};

namespace detail {

template <class Real>
void ensure_grad(typename TensorT<Real>::Storage& s) {
  if (s.grad.empty()) s.grad.assign(s.data.size(), Real(0));
}

template <class Real>
bool track(const TensorT<Real>& a) {
  return TapeT<Real>::active().recording() && a.requires_grad();
}

inline void check_2d(int dim, const char* op) {
  if (dim != 2)
    fail(ErrorCode::shape, std::string(op) + ": expected a 2-D tensor");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::shape,
         "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<Real> out = TensorT<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("add", os, [as, bs, os, n] {
      if (as->requires_grad) {
        detail::ensure_grad<Real>(*as);
        for (size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        detail::ensure_grad<Real>(*bs);
        for (size_t i = 0; i < n; ++i) bs->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> sub(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::shape,
         "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<Real> out = TensorT<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("sub", os, [as, bs, os, n] {
      if (as->requires_grad) {
        detail::ensure_grad<Real>(*as);
        for (size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        detail::ensure_grad<Real>(*bs);
        for (size_t i = 0; i < n; ++i) bs->grad[i] -= os->grad[i];
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() != b.shape())
    fail(ErrorCode::shape,
         "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  TensorT<Real> out = TensorT<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("mul", os, [as, bs, os, n] {
      if (as->requires_grad) {
        detail::ensure_grad<Real>(*as);
        for (size_t i = 0; i < n; ++i) as->grad[i] += os->grad[i] * bs->data[i];
      }
      if (bs->requires_grad) {
        detail::ensure_grad<Real>(*bs);
        for (size_t i = 0; i < n; ++i) bs->grad[i] += os->grad[i] * as->data[i];
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& a, double c) {
  TensorT<Real> out = TensorT<Real>::zeros(a.shape());
  const size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) out.data()[i] = Real(double(a.data()[i]) * c);

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && a.requires_grad()) {
    out.set_requires_grad(true);
    auto as = a.storage(), os = out.storage();
    tape.record("scale", os, [as, os, c, n] {
      detail::ensure_grad<Real>(*as);
      for (size_t i = 0; i < n; ++i) as->grad[i] += Real(double(os->grad[i]) * c);
    });
  }
  return out;
}

// x[m×n] + b[n], broadcast over rows.
template <class Real>
TensorT<Real> add_row_broadcast(const TensorT<Real>& x, const TensorT<Real>& b) {
  detail::check_2d(x.dim(), "add_row_broadcast");
  if (b.numel() != static_cast<size_t>(x.cols()))
    fail(ErrorCode::shape, "add_row_broadcast: bias " + shape_str(b.shape()) +
                               " does not match row width " + std::to_string(x.cols()));
  const int m = x.rows(), n = x.cols();
  TensorT<Real> out = TensorT<Real>::zeros(x.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(i, j) + b.data()[j];

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (x.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto xs = x.storage(), bs = b.storage(), os = out.storage();
    tape.record("add_row_broadcast", os, [xs, bs, os, m, n] {
      if (xs->requires_grad) {
        detail::ensure_grad<Real>(*xs);
        for (size_t i = 0; i < size_t(m) * n; ++i) xs->grad[i] += os->grad[i];
      }
      if (bs->requires_grad) {
        detail::ensure_grad<Real>(*bs);
        for (int j = 0; j < n; ++j) {
          double acc = 0;
          for (int i = 0; i < m; ++i) acc += os->grad[size_t(i) * n + j];
          bs->grad[j] += Real(acc);
        }
      }
    });
  }
  return out;
}

template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
  TensorT<Real> out = TensorT<Real>::zeros(x.shape());
  const size_t n = out.numel();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < n; ++i) {
    double v = x.data()[i];
    out.data()[i] = Real(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape.record("gelu", os, [xs, os, n] {
      detail::ensure_grad<Real>(*xs);
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      for (size_t i = 0; i < n; ++i) {
        double v = xs->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865475244));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        xs->grad[i] += Real(double(os->grad[i]) * (cdf + v * pdf));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matrix products (double accumulation)
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::check_2d(a.dim(), "matmul");
  detail::check_2d(b.dim(), "matmul");
  if (a.cols() != b.rows())
    fail(ErrorCode::shape, "matmul: inner dimensions disagree: " +
                               shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  TensorT<Real> out = TensorT<Real>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p) acc += double(a.at(i, p)) * double(b.at(p, j));
      out.at(i, j) = Real(acc);
    }
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("matmul", os, [as, bs, os, m, k, n] {
      if (as->requires_grad) {
        // dA = dOut · Bᵀ
        detail::ensure_grad<Real>(*as);
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            double acc = 0;
            for (int j = 0; j < n; ++j)
              acc += double(os->grad[size_t(i) * n + j]) * double(bs->data[size_t(p) * n + j]);
            as->grad[size_t(i) * k + p] += Real(acc);
          }
        }
      }
      if (bs->requires_grad) {
        // dB = Aᵀ · dOut
        detail::ensure_grad<Real>(*bs);
        for (int p = 0; p < k; ++p) {
          for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int i = 0; i < m; ++i)
              acc += double(as->data[size_t(i) * k + p]) * double(os->grad[size_t(i) * n + j]);
            bs->grad[size_t(p) * n + j] += Real(acc);
          }
        }
      }
    });
  }
  return out;
}

// a[m×k] · b[n×k]ᵀ -> [m×n]
template <class Real>
TensorT<Real> matmul_nt(const TensorT<Real>& a, const TensorT<Real>& b) {
  detail::check_2d(a.dim(), "matmul_nt");
  detail::check_2d(b.dim(), "matmul_nt");
  if (a.cols() != b.cols())
    fail(ErrorCode::shape, "matmul_nt: inner dimensions disagree: " +
                               shape_str(a.shape()) + " x " + shape_str(b.shape()) + "ᵀ");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  TensorT<Real> out = TensorT<Real>::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0;
      for (int p = 0; p < k; ++p) acc += double(a.at(i, p)) * double(b.at(j, p));
      out.at(i, j) = Real(acc);
    }
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && (a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    tape.record("matmul_nt", os, [as, bs, os, m, k, n] {
      if (as->requires_grad) {
        // dA = dOut · B
        detail::ensure_grad<Real>(*as);
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            double acc = 0;
            for (int j = 0; j < n; ++j)
              acc += double(os->grad[size_t(i) * n + j]) * double(bs->data[size_t(j) * k + p]);
            as->grad[size_t(i) * k + p] += Real(acc);
          }
        }
      }
      if (bs->requires_grad) {
        // dB = dOutᵀ · A
        detail::ensure_grad<Real>(*bs);
        for (int j = 0; j < n; ++j) {
          for (int p = 0; p < k; ++p) {
            double acc = 0;
            for (int i = 0; i < m; ++i)
              acc += double(os->grad[size_t(i) * n + j]) * double(as->data[size_t(i) * k + p]);
            bs->grad[size_t(j) * k + p] += Real(acc);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// row-wise softmax with optional mask
// ---------------------------------------------------------------------------

// Each output row sums to 1 over unmasked positions; masked positions are
// exactly 0. Stability by per-row max subtraction; a fully masked row is an
// error.
template <class Real>
TensorT<Real> softmax_rows(const TensorT<Real>& x, const BoolMat* mask = nullptr) {
  detail::check_2d(x.dim(), "softmax_rows");
  const int m = x.rows(), n = x.cols();
  if (mask && (mask->rows != m || mask->cols != n))
    fail(ErrorCode::shape, "softmax_rows: mask " + std::to_string(mask->rows) + "x" +
                               std::to_string(mask->cols) + " does not match " +
                               shape_str(x.shape()));
  TensorT<Real> out = TensorT<Real>::zeros(x.shape());
  for (int i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      mx = std::max(mx, double(x.at(i, j)));
    }
    if (mx == -std::numeric_limits<double>::infinity())
      fail(ErrorCode::invalid_argument,
           "softmax_rows: row " + std::to_string(i) + " is fully masked");
    double sum = 0;
    for (int j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      sum += std::exp(double(x.at(i, j)) - mx);
    }
    for (int j = 0; j < n; ++j) {
      if (mask && !mask->at(i, j)) continue;
      out.at(i, j) = Real(std::exp(double(x.at(i, j)) - mx) / sum);
    }
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape.record("softmax_rows", os, [xs, os, m, n] {
      detail::ensure_grad<Real>(*xs);
      for (int i = 0; i < m; ++i) {
        double dot = 0;
        for (int j = 0; j < n; ++j) {
          size_t idx = size_t(i) * n + j;
          dot += double(os->grad[idx]) * double(os->data[idx]);
        }
        for (int j = 0; j < n; ++j) {
          size_t idx = size_t(i) * n + j;
          xs->grad[idx] += Real(double(os->data[idx]) * (double(os->grad[idx]) - dot));
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer normalization over each row
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> layer_norm_rows(const TensorT<Real>& x, const TensorT<Real>& gamma,
                              const TensorT<Real>& beta, double eps = 1e-5) {
  detail::check_2d(x.dim(), "layer_norm_rows");
  const int m = x.rows(), n = x.cols();
  if (gamma.numel() != size_t(n) || beta.numel() != size_t(n))
    fail(ErrorCode::shape, "layer_norm_rows: gamma/beta must have width " + std::to_string(n));
  TensorT<Real> out = TensorT<Real>::zeros(x.shape());
  std::vector<Real> xhat(size_t(m) * n);
  std::vector<Real> inv_std(m);
  for (int i = 0; i < m; ++i) {
    double mean = 0;
    for (int j = 0; j < n; ++j) mean += double(x.at(i, j));
    mean /= n;
    double var = 0;
    for (int j = 0; j < n; ++j) {
      double d = double(x.at(i, j)) - mean;
      var += d * d;
    }
    var /= n;
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = Real(inv);
    for (int j = 0; j < n; ++j) {
      double h = (double(x.at(i, j)) - mean) * inv;
      xhat[size_t(i) * n + j] = Real(h);
      out.at(i, j) = Real(h * double(gamma.data()[j]) + double(beta.data()[j]));
    }
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() &&
      (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
    out.set_requires_grad(true);
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
    tape.record("layer_norm_rows", os,
                [xs, gs, bs, os, m, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)] {
      if (gs->requires_grad) {
        detail::ensure_grad<Real>(*gs);
        for (int j = 0; j < n; ++j) {
          double acc = 0;
          for (int i = 0; i < m; ++i)
            acc += double(os->grad[size_t(i) * n + j]) * double(xhat[size_t(i) * n + j]);
          gs->grad[j] += Real(acc);
        }
      }
      if (bs->requires_grad) {
        detail::ensure_grad<Real>(*bs);
        for (int j = 0; j < n; ++j) {
          double acc = 0;
          for (int i = 0; i < m; ++i) acc += double(os->grad[size_t(i) * n + j]);
          bs->grad[j] += Real(acc);
        }
      }
      if (xs->requires_grad) {
        detail::ensure_grad<Real>(*xs);
        for (int i = 0; i < m; ++i) {
          double mean_dh = 0, mean_dh_xhat = 0;
          for (int j = 0; j < n; ++j) {
            size_t idx = size_t(i) * n + j;
            double dh = double(os->grad[idx]) * double(gs->data[j]);
            mean_dh += dh;
            mean_dh_xhat += dh * double(xhat[idx]);
          }
          mean_dh /= n;
          mean_dh_xhat /= n;
          for (int j = 0; j < n; ++j) {
            size_t idx = size_t(i) * n + j;
            double dh = double(os->grad[idx]) * double(gs->data[j]);
            xs->grad[idx] += Real(double(inv_std[i]) *
                                  (dh - mean_dh - double(xhat[idx]) * mean_dh_xhat));
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// gathers, slices, concatenation
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> embedding_rows(const TensorT<Real>& table, std::span<const int> ids) {
  detail::check_2d(table.dim(), "embedding_rows");
  if (ids.empty()) fail(ErrorCode::invalid_argument, "embedding_rows: empty id sequence");
  const int v = table.rows(), d = table.cols();
  for (size_t t = 0; t < ids.size(); ++t)
    if (ids[t] < 0 || ids[t] >= v)
      fail(ErrorCode::invalid_argument,
           "embedding_rows: token id " + std::to_string(ids[t]) + " at position " +
               std::to_string(t) + " outside vocabulary of size " + std::to_string(v));
  const int m = static_cast<int>(ids.size());
  TensorT<Real> out = TensorT<Real>::zeros({m, d});
  for (int t = 0; t < m; ++t)
    for (int j = 0; j < d; ++j) out.at(t, j) = table.at(ids[t], j);

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && table.requires_grad()) {
    out.set_requires_grad(true);
    auto ts = table.storage(), os = out.storage();
    std::vector<int> idv(ids.begin(), ids.end());
    tape.record("embedding_rows", os, [ts, os, d, idv = std::move(idv)] {
      detail::ensure_grad<Real>(*ts);
      for (size_t t = 0; t < idv.size(); ++t)
        for (int j = 0; j < d; ++j)
          ts->grad[size_t(idv[t]) * d + j] += os->grad[t * d + j];
    });
  }
  return out;
}

template <class Real>
TensorT<Real> slice_rows(const TensorT<Real>& x, int r0, int h) {
  detail::check_2d(x.dim(), "slice_rows");
  if (r0 < 0 || h <= 0 || r0 + h > x.rows())
    fail(ErrorCode::shape, "slice_rows: range [" + std::to_string(r0) + ", " +
                               std::to_string(r0 + h) + ") outside " + shape_str(x.shape()));
  const int n = x.cols();
  TensorT<Real> out = TensorT<Real>::zeros({h, n});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = x.at(r0 + i, j);

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape.record("slice_rows", os, [xs, os, r0, h, n] {
      detail::ensure_grad<Real>(*xs);
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < n; ++j)
          xs->grad[size_t(r0 + i) * n + j] += os->grad[size_t(i) * n + j];
    });
  }
  return out;
}

template <class Real>
TensorT<Real> slice_cols(const TensorT<Real>& x, int c0, int w) {
  detail::check_2d(x.dim(), "slice_cols");
  if (c0 < 0 || w <= 0 || c0 + w > x.cols())
    fail(ErrorCode::shape, "slice_cols: range [" + std::to_string(c0) + ", " +
                               std::to_string(c0 + w) + ") outside " + shape_str(x.shape()));
  const int m = x.rows(), n = x.cols();
  TensorT<Real> out = TensorT<Real>::zeros({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape.record("slice_cols", os, [xs, os, c0, w, m, n] {
      detail::ensure_grad<Real>(*xs);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j)
          xs->grad[size_t(i) * n + c0 + j] += os->grad[size_t(i) * w + j];
    });
  }
  return out;
}

template <class Real>
TensorT<Real> concat_cols(const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat_cols: no inputs");
  const int m = parts[0].rows();
  int total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    detail::check_2d(p.dim(), "concat_cols");
    if (p.rows() != m)
      fail(ErrorCode::shape, "concat_cols: row counts differ");
    total += p.cols();
    any_grad = any_grad || p.requires_grad();
  }
  TensorT<Real> out = TensorT<Real>::zeros({m, total});
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<typename TensorT<Real>::Storage>> ps;
    std::vector<int> widths;
    for (const auto& p : parts) {
      ps.push_back(p.storage());
      widths.push_back(p.cols());
    }
    auto os = out.storage();
    tape.record("concat_cols", os,
                [ps = std::move(ps), widths = std::move(widths), os, m, total] {
      int off2 = 0;
      for (size_t k = 0; k < ps.size(); ++k) {
        if (ps[k]->requires_grad) {
          detail::ensure_grad<Real>(*ps[k]);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < widths[k]; ++j)
              ps[k]->grad[size_t(i) * widths[k] + j] +=
                  os->grad[size_t(i) * total + off2 + j];
        }
        off2 += widths[k];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> sum_all(const TensorT<Real>& x) {
  double acc = 0;
  for (Real v : x.data()) acc += double(v);
  TensorT<Real> out = TensorT<Real>::scalar(Real(acc));

  auto& tape = TapeT<Real>::active();
  if (tape.recording() && x.requires_grad()) {
    out.set_requires_grad(true);
    auto xs = x.storage(), os = out.storage();
    tape.record("sum_all", os, [xs, os] {
      detail::ensure_grad<Real>(*xs);
      for (auto& g : xs->grad) g += os->grad[0];
    });
  }
  return out;
}

template <class Real>
TensorT<Real> mean_all(const TensorT<Real>& x) {
  return scale(sum_all(x), 1.0 / double(x.numel()));
}

// ---------------------------------------------------------------------------
// testing oracle: central finite differences
// ---------------------------------------------------------------------------

// Central difference (f(x+eps·e_i) − f(x−eps·e_i)) / (2·eps) per element.
// f must be deterministic; x is perturbed in place and restored exactly.
template <class Real>
TensorT<Real> finite_difference_grad(const std::function<double(const TensorT<Real>&)>& f,
                                     TensorT<Real> x, double eps) {
  if (eps <= 0) fail(ErrorCode::invalid_argument, "finite_difference_grad: eps must be > 0");
  typename TapeT<Real>::NoGrad ng;
  TensorT<Real> out = TensorT<Real>::zeros(x.shape());
  for (size_t i = 0; i < x.numel(); ++i) {
    const Real saved = x.data()[i];
    x.data()[i] = Real(double(saved) + eps);
    const double f_plus = f(x);
    x.data()[i] = Real(double(saved) - eps);
    const double f_minus = f(x);
    x.data()[i] = saved;
    out.data()[i] = Real((f_plus - f_minus) / (2.0 * eps));
  }
  return out;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace lfsum
