// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gerlab/errors.hpp"
#include "gerlab/hash.hpp"
#include "gerlab/rng.hpp"

namespace gerlab {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;   // empty until materialized
  bool requires_grad = false; // leaf parameter flag
  bool tracked = false;       // participates in the active tape's graph

  std::size_t numel() const { return values.size(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

}  // namespace detail

// Dense 64-bit float array with shared storage. Copying a Tensor aliases the
// underlying buffer; use clone() for a deep copy. All training math in this
// repo runs through these.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : d_(std::make_shared<detail::TensorData>()) {
    d_->shape = std::move(shape);
    d_->values.assign(shape_numel(d_->shape), fill);
  }

  Tensor(Shape shape, std::vector<double> values)
      : d_(std::make_shared<detail::TensorData>()) {
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor: " + shape_str(shape) + " cannot hold " +
                           std::to_string(values.size()) + " values");
    d_->shape = std::move(shape);
    d_->values = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor gaussian(Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.d_->values) v = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->numel(); }
  std::size_t rows() const { return d_->shape.empty() ? 0 : d_->shape[0]; }
  std::size_t cols() const {
    return d_->shape.size() < 2 ? 1 : d_->shape[1];
  }

  std::span<double> values() { return d_->values; }
  std::span<const double> values() const { return d_->values; }

  double item() const {
    if (numel() != 1)
      throw ContractError("item(): tensor has " + std::to_string(numel()) +
                          " elements, expected 1");
    return d_->values[0];
  }

  double& at(std::size_t i) { return d_->values[i]; }
  double at(std::size_t i) const { return d_->values[i]; }
  double& at(std::size_t i, std::size_t j) {
    return d_->values[i * cols() + j];
  }
  double at(std::size_t i, std::size_t j) const {
    return d_->values[i * cols() + j];
  }

  bool requires_grad() const { return d_->requires_grad; }

  // Marks a leaf parameter. The grad buffer materializes lazily on first
  // tape participation.
  Tensor& set_requires_grad(bool on = true) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }

  std::span<double> grad() {
    d_->ensure_grad();
    return d_->grad;
  }
  std::span<const double> grad() const {
    if (d_->grad.empty())
      throw ContractError("grad(): gradient never materialized");
    return d_->grad;
  }

  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<detail::TensorData>(*d_);
    t.d_->tracked = false;
    return t;
  }

  std::uint64_t value_hash() const {
    return fnv1a64(std::span<const double>(d_->values));
  }

  std::shared_ptr<detail::TensorData> data_ptr() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Define-by-run gradient tape. Constructing one makes it the active tape for
// the current thread; ops executed while it is active record backward
// closures. backward() replays them in reverse and consumes the tape. The
// recording order is the topological order, since an op's inputs always exist
// before its output.
class GradTape {
 public:
  GradTape() {
    prev_ = active_;
    active_ = this;
  }
  ~GradTape() { active_ = prev_; }

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(std::shared_ptr<detail::TensorData> out,
              std::function<void()> fn) {
    nodes_.push_back({std::move(out), std::move(fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward(): loss must be scalar, got " +
                          shape_str(loss.shape()));
    auto target = loss.data_ptr();
    bool connected = false;
    for (const auto& n : nodes_) {
      if (n.out == target) {
        connected = true;
        break;
      }
    }
    if (!connected && !target->requires_grad)
      throw ContractError("backward(): loss is not connected to this tape");
    target->ensure_grad();
    target->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
    nodes_.clear();
  }

 private:
  struct Node {
    std::shared_ptr<detail::TensorData> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  GradTape* prev_ = nullptr;
  static inline thread_local GradTape* active_ = nullptr;
};

namespace detail {

inline bool track_inputs(std::initializer_list<const Tensor*> ins) {
  if (GradTape::active() == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->data_ptr()->requires_grad || t->data_ptr()->tracked) return true;
  return false;
}

inline bool wants_grad(const Tensor& t) {
  return t.data_ptr()->requires_grad || t.data_ptr()->tracked;
}

// Marks the output tracked and materializes every participating gradient
// buffer up front, so that after backward() all reachable tensors hold a
// fully populated grad. Inputs that do not want gradients are skipped.
inline void record_op(const Tensor& out,
                      std::initializer_list<const Tensor*> ins,
                      std::function<void()> fn) {
  auto od = out.data_ptr();
  od->tracked = true;
  od->ensure_grad();
  for (const Tensor* t : ins)
    if (wants_grad(*t)) t->data_ptr()->ensure_grad();
  GradTape::active()->record(od, std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise and shape ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
  if (detail::track_inputs({&a, &b})) {
    const bool ga = detail::wants_grad(a), gb = detail::wants_grad(b);
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a, &b}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ga) ad->grad[i] += od->grad[i];
        if (gb) bd->grad[i] += od->grad[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
  if (detail::track_inputs({&a, &b})) {
    const bool ga = detail::wants_grad(a), gb = detail::wants_grad(b);
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a, &b}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ga) ad->grad[i] += od->grad[i] * bd->values[i];
        if (gb) bd->grad[i] += od->grad[i] * ad->values[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  if (detail::track_inputs({&a})) {
    auto ad = a.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        ad->grad[i] += od->grad[i] * c;
    });
  }
  return out;
}

// Multiply by a one-element tensor; gradient reaches the scalar.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1)
    throw DimensionError("scale_by: scale must be scalar, got " +
                         shape_str(s.shape()));
  const double c = s.at(0);
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
  if (detail::track_inputs({&a, &s})) {
    const bool ga = detail::wants_grad(a), gs = detail::wants_grad(s);
    auto ad = a.data_ptr(), sd = s.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a, &s}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ga) ad->grad[i] += od->grad[i] * c;
        if (gs) sd->grad[0] += od->grad[i] * ad->values[i];
      }
    });
  }
  return out;
}

// Divide by a one-element tensor.
inline Tensor div_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1)
    throw DimensionError("div_by: divisor must be scalar");
  const double c = s.at(0);
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) / c;
  if (detail::track_inputs({&a, &s})) {
    const bool ga = detail::wants_grad(a), gs = detail::wants_grad(s);
    auto ad = a.data_ptr(), sd = s.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a, &s}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i) {
        if (ga) ad->grad[i] += od->grad[i] / c;
        if (gs) sd->grad[0] -= od->grad[i] * ad->values[i] / (c * c);
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
  if (detail::track_inputs({&a})) {
    auto ad = a.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a}, [=]() {
      for (std::size_t i = 0; i < od->grad.size(); ++i)
        if (ad->values[i] > 0.0) ad->grad[i] += od->grad[i];
    });
  }
  return out;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s);
  if (detail::track_inputs({&a})) {
    auto ad = a.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a}, [=]() {
      for (std::size_t i = 0; i < ad->grad.size(); ++i)
        ad->grad[i] += od->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw DimensionError("matmul: incompatible shapes " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = &out.at(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* brow = &b.values()[p * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (detail::track_inputs({&a, &b})) {
    const bool ga = detail::wants_grad(a), gb = detail::wants_grad(b);
    auto ad = a.data_ptr(), bd = b.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&a, &b}, [=]() {
      // dA = dOut * B^T ; dB = A^T * dOut
      if (ga) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* g = &od->grad[i * n];
            const double* brow = &bd->values[p * n];
            for (std::size_t j = 0; j < n; ++j) s += g[j] * brow[j];
            ad->grad[i * k + p] += s;
          }
      }
      if (gb) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ad->values[i * k + p];
            const double* g = &od->grad[i * n];
            double* bg = &bd->grad[p * n];
            for (std::size_t j = 0; j < n; ++j) bg[j] += av * g[j];
          }
      }
    });
  }
  return out;
}

// y = x * W^T + b with x:[T x d_in], W:[d_out x d_in], b:[d_out] or undefined.
// This is the hot path; both the forward dot products and the backward
// accumulations run over contiguous rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = {}) {
  if (x.shape().size() != 2 || w.shape().size() != 2 ||
      x.shape()[1] != w.shape()[1])
    throw DimensionError("linear: incompatible shapes " +
                         shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
  const std::size_t t = x.shape()[0], din = x.shape()[1], dout = w.shape()[0];
  if (b.defined() && b.numel() != dout)
    throw DimensionError("linear: bias size " + std::to_string(b.numel()) +
                         " != " + std::to_string(dout));
  Tensor out({t, dout});
  for (std::size_t i = 0; i < t; ++i) {
    const double* xrow = &x.values()[i * din];
    double* orow = &out.at(i, 0);
    for (std::size_t j = 0; j < dout; ++j) {
      const double* wrow = &w.values()[j * din];
      double s = b.defined() ? b.at(j) : 0.0;
      for (std::size_t p = 0; p < din; ++p) s += xrow[p] * wrow[p];
      orow[j] = s;
    }
  }
  const Tensor* bias = b.defined() ? &b : nullptr;
  bool track = bias ? detail::track_inputs({&x, &w, bias})
                    : detail::track_inputs({&x, &w});
  if (track) {
    const bool gx = detail::wants_grad(x), gw = detail::wants_grad(w);
    const bool gb = bias && detail::wants_grad(*bias);
    auto xd = x.data_ptr(), wd = w.data_ptr(), od = out.data_ptr();
    auto bd = bias ? bias->data_ptr() : nullptr;
    auto fn = [=]() {
      for (std::size_t i = 0; i < t; ++i) {
        const double* g = &od->grad[i * dout];
        if (gx) {
          double* xg = &xd->grad[i * din];
          for (std::size_t j = 0; j < dout; ++j) {
            const double gj = g[j];
            if (gj == 0.0) continue;
            const double* wrow = &wd->values[j * din];
            for (std::size_t p = 0; p < din; ++p) xg[p] += gj * wrow[p];
          }
        }
        if (gw) {
          const double* xrow = &xd->values[i * din];
          for (std::size_t j = 0; j < dout; ++j) {
            const double gj = g[j];
            if (gj == 0.0) continue;
            double* wg = &wd->grad[j * din];
            for (std::size_t p = 0; p < din; ++p) wg[p] += gj * xrow[p];
          }
        }
        if (gb)
          for (std::size_t j = 0; j < dout; ++j) bd->grad[j] += g[j];
      }
    };
    if (bias)
      detail::record_op(out, {&x, &w, bias}, std::move(fn));
    else
      detail::record_op(out, {&x, &w}, std::move(fn));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / cross entropy
// ---------------------------------------------------------------------------

// Numerically stabilized softmax along `axis`.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size() || s[axis] == 0)
    throw DimensionError("softmax: invalid axis " + std::to_string(axis) +
                         " for shape " + shape_str(s));
  const std::size_t n = s[axis];
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k)
        mx = std::max(mx, x.at(base + k * inner));
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(x.at(base + k * inner) - mx);
        out.at(base + k * inner) = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) out.at(base + k * inner) /= z;
    }
  }
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x}, [=]() {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t idx = base + k * inner;
            dot += od->grad[idx] * od->values[idx];
          }
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t idx = base + k * inner;
            xd->grad[idx] += od->values[idx] * (od->grad[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Mean token-level negative log-likelihood of `targets` under row-wise
// softmax of `logits`.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<std::size_t>& targets) {
  if (logits.shape().size() != 2)
    throw DimensionError("cross_entropy: logits must be 2-D, got " +
                         shape_str(logits.shape()));
  const std::size_t l = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != l)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(l) + " rows");
  for (std::size_t t : targets)
    if (t >= v)
      throw IndexError("cross_entropy: target " + std::to_string(t) +
                       " out of range for vocab " + std::to_string(v));
  // Softmax rows are cached for the backward pass.
  std::vector<double> probs(l * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    const double* row = &logits.values()[i * v];
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    loss -= std::log(probs[i * v + targets[i]]);
  }
  loss /= static_cast<double>(l);
  Tensor out = Tensor::scalar(loss);
  if (detail::track_inputs({&logits})) {
    auto xd = logits.data_ptr(), od = out.data_ptr();
    auto tg = targets;
    auto pr = std::move(probs);
    detail::record_op(out, {&logits}, [=]() {
      const double g = od->grad[0] / static_cast<double>(l);
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < v; ++j)
          xd->grad[i * v + j] +=
              g * (pr[i * v + j] - (tg[i] == j ? 1.0 : 0.0));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequence-shape ops
// ---------------------------------------------------------------------------

inline Tensor mean_pool_rows(const Tensor& x) {
  if (x.shape().size() != 2 || x.shape()[0] == 0)
    throw DimensionError("mean_pool_rows: need non-empty 2-D input, got " +
                         shape_str(x.shape()));
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  Tensor out({1, d});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(0, j) += x.at(i, j);
  for (std::size_t j = 0; j < d; ++j) out.at(0, j) /= static_cast<double>(t);
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x}, [=]() {
      const double inv = 1.0 / static_cast<double>(t);
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
          xd->grad[i * d + j] += od->grad[j] * inv;
    });
  }
  return out;
}

inline Tensor broadcast_rows(const Tensor& row, std::size_t t) {
  if (row.shape().size() != 2 || row.shape()[0] != 1)
    throw DimensionError("broadcast_rows: need [1xd] input, got " +
                         shape_str(row.shape()));
  const std::size_t d = row.shape()[1];
  Tensor out({t, d});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = row.at(0, j);
  if (detail::track_inputs({&row})) {
    auto rd = row.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&row}, [=]() {
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < d; ++j)
          rd->grad[j] += od->grad[i * d + j];
    });
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.shape().size() != 2 || p.cols() != d)
      throw DimensionError("concat_rows: column mismatch " +
                           shape_str(p.shape()));
    total += p.rows();
  }
  Tensor out({total, d});
  std::size_t r = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(r * d));
    r += p.rows();
  }
  bool any = false;
  for (const Tensor& p : parts)
    if (detail::wants_grad(p)) any = true;
  if (any && GradTape::active()) {
    auto od = out.data_ptr();
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    std::vector<bool> gs;
    for (const Tensor& p : parts) {
      pds.push_back(p.data_ptr());
      gs.push_back(detail::wants_grad(p));
      if (gs.back()) p.data_ptr()->ensure_grad();
    }
    od->tracked = true;
    od->ensure_grad();
    GradTape::active()->record(od, [=]() {
      std::size_t row = 0;
      for (std::size_t k = 0; k < pds.size(); ++k) {
        const std::size_t nr = pds[k]->shape[0];
        if (gs[k])
          for (std::size_t i = 0; i < nr * d; ++i)
            pds[k]->grad[i] += od->grad[row * d + i];
        row += nr;
      }
    });
  }
  return out;
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.shape().size() != 2 || begin > end || end > x.rows())
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) +
                         "," + std::to_string(end) + ") for " +
                         shape_str(x.shape()));
  const std::size_t d = x.cols(), t = end - begin;
  Tensor out({t, d});
  std::copy(x.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
            x.values().begin() + static_cast<std::ptrdiff_t>(end * d),
            out.values().begin());
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x}, [=]() {
      for (std::size_t i = 0; i < t * d; ++i)
        xd->grad[begin * d + i] += od->grad[i];
    });
  }
  return out;
}

// Per-row scaling: out[t,:] = x[t,:] * w[t]. w is 1-D of length rows(x).
inline Tensor row_scale(const Tensor& x, const Tensor& w) {
  if (x.shape().size() != 2 || w.numel() != x.rows())
    throw DimensionError("row_scale: " + shape_str(x.shape()) +
                         " with weights " + shape_str(w.shape()));
  const std::size_t t = x.rows(), d = x.cols();
  Tensor out({t, d});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * w.at(i);
  if (detail::track_inputs({&x, &w})) {
    const bool gx = detail::wants_grad(x), gw = detail::wants_grad(w);
    auto xd = x.data_ptr(), wd = w.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x, &w}, [=]() {
      for (std::size_t i = 0; i < t; ++i) {
        const double wi = wd->values[i];
        for (std::size_t j = 0; j < d; ++j) {
          const double g = od->grad[i * d + j];
          if (gx) xd->grad[i * d + j] += g * wi;
          if (gw) wd->grad[i] += g * xd->values[i * d + j];
        }
      }
    });
  }
  return out;
}

inline Tensor embedding_lookup(const Tensor& table,
                               const std::vector<std::size_t>& ids) {
  if (table.shape().size() != 2)
    throw DimensionError("embedding_lookup: table must be 2-D");
  const std::size_t v = table.rows(), d = table.cols();
  for (std::size_t id : ids)
    if (id >= v)
      throw IndexError("embedding_lookup: id " + std::to_string(id) +
                       " out of range for table of " + std::to_string(v));
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().begin() +
                    static_cast<std::ptrdiff_t>(ids[i] * d),
                d, out.values().begin() + static_cast<std::ptrdiff_t>(i * d));
  if (detail::track_inputs({&table})) {
    auto td = table.data_ptr(), od = out.data_ptr();
    auto idv = ids;
    detail::record_op(out, {&table}, [=]() {
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          td->grad[idv[i] * d + j] += od->grad[i * d + j];
    });
  }
  return out;
}

// Stride-2 downsampling: row o holds [x[2o] ; x[2o+1]], zero-padded past the
// end. Output has ceil(T/2) rows and 2d columns.
inline Tensor pair_downsample(const Tensor& x) {
  if (x.shape().size() != 2 || x.rows() == 0)
    throw DimensionError("pair_downsample: need non-empty 2-D input");
  const std::size_t t = x.rows(), d = x.cols(), to = (t + 1) / 2;
  Tensor out({to, 2 * d});
  for (std::size_t o = 0; o < to; ++o) {
    for (std::size_t j = 0; j < d; ++j) out.at(o, j) = x.at(2 * o, j);
    if (2 * o + 1 < t)
      for (std::size_t j = 0; j < d; ++j) out.at(o, d + j) = x.at(2 * o + 1, j);
  }
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x}, [=]() {
      for (std::size_t o = 0; o < to; ++o) {
        for (std::size_t j = 0; j < d; ++j)
          xd->grad[2 * o * d + j] += od->grad[o * 2 * d + j];
        if (2 * o + 1 < t)
          for (std::size_t j = 0; j < d; ++j)
            xd->grad[(2 * o + 1) * d + j] += od->grad[o * 2 * d + d + j];
      }
    });
  }
  return out;
}

// Bigram context: row t holds [x[t] ; x[t-1]], with zeros before the start.
inline Tensor context_pair(const Tensor& x) {
  if (x.shape().size() != 2 || x.rows() == 0)
    throw DimensionError("context_pair: need non-empty 2-D input");
  const std::size_t t = x.rows(), d = x.cols();
  Tensor out({t, 2 * d});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = x.at(i, j);
    if (i > 0)
      for (std::size_t j = 0; j < d; ++j) out.at(i, d + j) = x.at(i - 1, j);
  }
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    detail::record_op(out, {&x}, [=]() {
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < d; ++j)
          xd->grad[i * d + j] += od->grad[i * 2 * d + j];
        if (i > 0)
          for (std::size_t j = 0; j < d; ++j)
            xd->grad[(i - 1) * d + j] += od->grad[i * 2 * d + d + j];
      }
    });
  }
  return out;
}

// Mean of the row range [begin,end) per segment; used to pool fine-unit
// spans back to word positions.
inline Tensor segment_mean_rows(
    const Tensor& x,
    const std::vector<std::pair<std::size_t, std::size_t>>& segments) {
  if (x.shape().size() != 2)
    throw DimensionError("segment_mean_rows: need 2-D input");
  const std::size_t d = x.cols();
  for (const auto& [b, e] : segments)
    if (b >= e || e > x.rows())
      throw DimensionError("segment_mean_rows: bad segment [" +
                           std::to_string(b) + "," + std::to_string(e) + ")");
  Tensor out({segments.size(), d});
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [b, e] = segments[s];
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t j = 0; j < d; ++j) out.at(s, j) += x.at(i, j);
    const double inv = 1.0 / static_cast<double>(e - b);
    for (std::size_t j = 0; j < d; ++j) out.at(s, j) *= inv;
  }
  if (detail::track_inputs({&x})) {
    auto xd = x.data_ptr(), od = out.data_ptr();
    auto segs = segments;
    detail::record_op(out, {&x}, [=]() {
      for (std::size_t s = 0; s < segs.size(); ++s) {
        const auto [b, e] = segs[s];
        const double inv = 1.0 / static_cast<double>(e - b);
        for (std::size_t i = b; i < e; ++i)
          for (std::size_t j = 0; j < d; ++j)
            xd->grad[i * d + j] += od->grad[s * d + j] * inv;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward-only helpers
// ---------------------------------------------------------------------------

// Indicator 1[x >= threshold]. Carries no gradient and is never recorded:
// the threshold indicator is treated as piecewise constant.
inline Tensor ge_mask(const Tensor& x, double threshold) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.at(i) = x.at(i) >= threshold ? 1.0 : 0.0;
  return out;
}

// Inverted-scaling dropout mask: entries are 0 with probability `rate`, else
// 1/(1-rate). Constant w.r.t. the tape; apply with mul().
inline Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout_mask: rate must be in [0,1), got " +
                      std::to_string(rate));
  Tensor out(shape);
  const double keep = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < out.numel(); ++i)
    out.at(i) = rng.uniform() < rate ? 0.0 : keep;
  return out;
}

inline std::size_t argmax_row(const Tensor& x, std::size_t row) {
  const std::size_t d = x.cols();
  std::size_t best = 0;
  double bv = x.at(row, 0);
  for (std::size_t j = 1; j < d; ++j)
    if (x.at(row, j) > bv) {
      bv = x.at(row, j);
      best = j;
    }
  return best;
}

}  // namespace gerlab
