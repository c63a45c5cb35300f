#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace priorcast {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t p = 1;
  for (auto d : s) p *= d;
  return p;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
  out << ')';
  return out.str();
}

class Tape;

struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  bool is_leaf = true;
  Tape* tape = nullptr;

  void ensure_grad() {
    if (grad.size() != value->size()) grad.assign(value->size(), 0.0);
  }
};

// Value-semantics handle onto a node of the computation graph. Values are
// immutable once created except for leaf parameters, which the optimizer
// updates in place between steps.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<double> values) {
    check_sized(shape, values);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<double>>(std::move(values));
    return Tensor(n);
  }

  static Tensor full(Shape shape, double fill) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)), fill);
    return constant(std::move(shape), std::move(v));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor scalar(double v) { return constant({1}, {v}); }

  // Trainable leaf; not bound to any tape so it can participate in many.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  // New leaf sharing the same value buffer but with its own gradient;
  // lets worker threads run backward concurrently against shared weights.
  Tensor shared_value_leaf() const {
    auto n = std::make_shared<TensorNode>();
    n->shape = node_->shape;
    n->value = node_->value;
    n->requires_grad = node_->requires_grad;
    return Tensor(n);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value->size()); }
  const std::vector<double>& values() const { return *node_->value; }
  std::vector<double>& mutable_values() { return *node_->value; }
  const std::vector<double>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  Tape* tape() const { return node_->tape; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

  double item() const {
    if (numel() != 1)
      throw std::invalid_argument("item: tensor is not scalar, shape " +
                                  shape_str(shape()));
    return (*node_->value)[0];
  }

  double at(std::initializer_list<std::int64_t> idx) const {
    std::int64_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) flat = flat * node_->shape[i++] + v;
    return (*node_->value)[static_cast<std::size_t>(flat)];
  }

private:
  static void check_sized(const Shape& shape, const std::vector<double>& v) {
    if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor: value count " +
                                  std::to_string(v.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  std::shared_ptr<TensorNode> node_;
};

// Records one backward closure per forward operation; backward replays
// them in reverse and frees each closure as soon as it has run, so peak
// memory stays near the forward-pass peak.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() { unbind(); }

  Tensor input(Shape shape, std::vector<double> values) {
    Tensor t = Tensor::constant(std::move(shape), std::move(values));
    t.node()->tape = this;
    return t;
  }

  // Binds an existing leaf (parameter or constant) to this tape so that
  // operations consuming it are recorded. The binding is released when the
  // tape is reset or destroyed, letting long-lived parameters move between
  // tapes.
  void watch(const Tensor& leaf) {
    const auto& n = leaf.node();
    if (!n->is_leaf)
      throw std::logic_error("watch: only leaf tensors can be watched");
    if (n->tape == this) return;
    if (n->tape != nullptr)
      throw std::invalid_argument("watch: leaf already bound to another tape");
    n->tape = this;
    watched_.push_back(n);
  }

  void record(std::function<void()> op) { ops_.push_back(std::move(op)); }

  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                  shape_str(loss.shape()));
    if (loss.tape() != this)
      throw std::invalid_argument("backward: loss does not belong to this tape");
    if (backward_done_)
      throw std::runtime_error("backward: called twice without reset");
    backward_done_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    for (std::size_t i = ops_.size(); i-- > 0;) {
      ops_[i]();
      ops_[i] = nullptr;  // release captured nodes early
    }
  }

  void reset() {
    ops_.clear();
    backward_done_ = false;
    unbind();
  }

  std::size_t op_count() const { return ops_.size(); }
  bool backward_done() const { return backward_done_; }

private:
  void unbind() {
    for (auto& n : watched_)
      if (n->tape == this) n->tape = nullptr;
    watched_.clear();
  }

  std::vector<std::function<void()>> ops_;
  std::vector<std::shared_ptr<TensorNode>> watched_;
  bool backward_done_ = false;
};

namespace detail {

struct OpCtx {
  Tape* tape = nullptr;
  bool needs_grad = false;
  bool record() const { return tape != nullptr && needs_grad; }
};

inline OpCtx op_ctx(std::initializer_list<const Tensor*> inputs) {
  OpCtx ctx;
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw std::invalid_argument("op: undefined tensor input");
    ctx.needs_grad = ctx.needs_grad || t->requires_grad();
    Tape* tp = t->tape();
    if (tp == nullptr) continue;
    if (ctx.tape != nullptr && ctx.tape != tp)
      throw std::invalid_argument("op: inputs belong to different tapes");
    ctx.tape = tp;
  }
  if (ctx.record()) {
    for (const Tensor* t : inputs) {
      if (t->requires_grad() && !t->node()->is_leaf && t->tape() == nullptr)
        throw std::logic_error(
            "op: gradient-requiring intermediate was built outside the tape");
    }
  }
  return ctx;
}

inline Tensor make_result(Shape shape, std::vector<double> values,
                          const OpCtx& ctx) {
  Tensor t = Tensor::constant(std::move(shape), std::move(values));
  t.node()->tape = ctx.tape;
  t.node()->requires_grad = ctx.needs_grad;
  t.node()->is_leaf = false;
  return t;
}

// grad of `out` is absent when the node never contributed to the loss
inline bool has_grad(const std::shared_ptr<TensorNode>& n) {
  return !n->grad.empty();
}

using CMapRM = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic,
                                              Eigen::Dynamic, Eigen::RowMajor>>;
using MapRM = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline void axis_extents(const Shape& s, int axis, std::int64_t& outer,
                         std::int64_t& extent, std::int64_t& inner) {
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  extent = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    inner *= s[i];
}

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw std::invalid_argument(std::string(op) + ": axis " +
                                std::to_string(axis) + " out of range for rank " +
                                std::to_string(rank));
  return a;
}

inline std::vector<double> permute_buffer(const std::vector<double>& src,
                                          const Shape& src_shape,
                                          const std::vector<int>& perm) {
  const int r = static_cast<int>(src_shape.size());
  Shape dst_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i)
    dst_shape[static_cast<std::size_t>(i)] =
        src_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    src_strides[static_cast<std::size_t>(i)] =
        src_strides[static_cast<std::size_t>(i) + 1] *
        src_shape[static_cast<std::size_t>(i) + 1];
  std::vector<double> dst(src.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    std::int64_t off = 0;
    for (int i = 0; i < r; ++i)
      off += idx[static_cast<std::size_t>(i)] *
             src_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    dst[flat] = src[static_cast<std::size_t>(off)];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[static_cast<std::size_t>(i)] < dst_shape[static_cast<std::size_t>(i)]) break;
      idx[static_cast<std::size_t>(i)] = 0;
    }
  }
  return dst;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

// b broadcasts onto a when b's shape equals a trailing suffix of a's shape.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool suffix =
      sb.size() <= sa.size() &&
      std::equal(sb.begin(), sb.end(), sa.end() - static_cast<long>(sb.size()));
  if (!suffix)
    throw std::invalid_argument("add: shape " + shape_str(sb) +
                                " is not a trailing suffix of " + shape_str(sa));
  auto ctx = detail::op_ctx({&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  const std::size_t bn = bv.size();
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % bn];
  Tensor res = detail::make_result(sa, std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), bn2 = b.node(), on = res.node();
    ctx.tape->record([an, bn2, on] {
      if (!detail::has_grad(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
      }
      if (bn2->requires_grad) {
        bn2->ensure_grad();
        const std::size_t m = bn2->grad.size();
        for (std::size_t i = 0; i < on->grad.size(); ++i)
          bn2->grad[i % m] += on->grad[i];
      }
    });
  }
  return res;
}

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_same_shape(const char* name, const Tensor& a, const Tensor& b,
                         Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(name) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  auto ctx = op_ctx({&a, &b});
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  Tensor res = make_result(a.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), bn = b.node(), on = res.node();
    ctx.tape->record([an, bn, on, bwd] {
      if (!has_grad(on)) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        double da, db;
        bwd((*an->value)[i], (*bn->value)[i], on->grad[i], da, db);
        if (an->requires_grad) an->grad[i] += da;
        if (bn->requires_grad) bn->grad[i] += db;
      }
    });
  }
  return res;
}

template <class Fwd, class Dfn>
Tensor unary_elementwise(const Tensor& a, Fwd fwd, Dfn dfn) {
  auto ctx = op_ctx({&a});
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor res = make_result(a.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, dfn] {
      if (!has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += dfn((*an->value)[i]) * on->grad[i];
    });
  }
  return res;
}

}  // namespace detail

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_same_shape(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  return detail::unary_elementwise(
      a, [c](double x) { return c * x; }, [c](double) { return c; });
}

inline Tensor scalar_add(const Tensor& a, double c) {
  return detail::unary_elementwise(
      a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

inline Tensor relu(const Tensor& a) {
  // x > 0 ? x : 0*x keeps NaN inputs NaN instead of clamping them
  return detail::unary_elementwise(
      a, [](double x) { return x > 0.0 ? x : 0.0 * x; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_elementwise(
      a,
      [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [=](double x) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) +
               x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

inline Tensor log(const Tensor& a) {
  return detail::unary_elementwise(
      a, [](double x) { return std::log(x); },
      [](double x) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
  auto ctx = detail::op_ctx({&a});
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  Tensor res = detail::make_result(a.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i)
        an->grad[i] += (*on->value)[i] * on->grad[i];
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor reduce_full(const Tensor& a, bool take_mean) {
  auto ctx = op_ctx({&a});
  const auto& av = a.values();
  double s = 0.0;
  for (double v : av) s += v;
  const double scale = take_mean ? 1.0 / static_cast<double>(av.size()) : 1.0;
  Tensor res = make_result({1}, {s * scale}, ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, scale] {
      if (!has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      const double g = on->grad[0] * scale;
      for (auto& gi : an->grad) gi += g;
    });
  }
  return res;
}

inline Tensor reduce_axis(const char* name, const Tensor& a, int axis,
                          bool take_mean) {
  const int ax = normalize_axis(axis, a.rank(), name);
  std::int64_t outer, extent, inner;
  axis_extents(a.shape(), ax, outer, extent, inner);
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != ax) out_shape.push_back(a.dim(i));
  if (out_shape.empty()) out_shape.push_back(1);
  auto ctx = op_ctx({&a});
  const auto& av = a.values();
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const double scale = take_mean ? 1.0 / static_cast<double>(extent) : 1.0;
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < extent; ++k) {
      const double* src = av.data() + (o * extent + k) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (take_mean)
    for (auto& v : out) v *= scale;
  Tensor res = make_result(std::move(out_shape), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, outer, extent, inner, scale] {
      if (!has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < extent; ++k) {
          double* dst = an->grad.data() + (o * extent + k) * inner;
          const double* src = on->grad.data() + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
        }
    });
  }
  return res;
}

}  // namespace detail

inline Tensor sum(const Tensor& a) { return detail::reduce_full(a, false); }
inline Tensor mean(const Tensor& a) { return detail::reduce_full(a, true); }
inline Tensor sum_axis(const Tensor& a, int axis) {
  return detail::reduce_axis("sum_axis", a, axis, false);
}
inline Tensor mean_axis(const Tensor& a, int axis) {
  return detail::reduce_axis("mean_axis", a, axis, true);
}

// ---------------------------------------------------------------------------
// softmax and layer norm
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis = -1) {
  const int ax = detail::normalize_axis(axis, a.rank(), "softmax");
  std::int64_t outer, extent, inner;
  detail::axis_extents(a.shape(), ax, outer, extent, inner);
  auto ctx = detail::op_ctx({&a});
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      double m = av[static_cast<std::size_t>(base)];
      for (std::int64_t k = 1; k < extent; ++k)
        m = std::max(m, av[static_cast<std::size_t>(base + k * inner)]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < extent; ++k) {
        const double e = std::exp(av[static_cast<std::size_t>(base + k * inner)] - m);
        out[static_cast<std::size_t>(base + k * inner)] = e;
        denom += e;
      }
      for (std::int64_t k = 0; k < extent; ++k)
        out[static_cast<std::size_t>(base + k * inner)] /= denom;
    }
  Tensor res = detail::make_result(a.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, outer, extent, inner] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * extent * inner + i;
          double dot = 0.0;
          for (std::int64_t k = 0; k < extent; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            dot += on->grad[idx] * (*on->value)[idx];
          }
          for (std::int64_t k = 0; k < extent; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            an->grad[idx] += (*on->value)[idx] * (on->grad[idx] - dot);
          }
        }
    });
  }
  return res;
}

inline Tensor layer_norm(const Tensor& a, int axis = -1, double eps = 1e-5) {
  const int ax = detail::normalize_axis(axis, a.rank(), "layer_norm");
  std::int64_t outer, extent, inner;
  detail::axis_extents(a.shape(), ax, outer, extent, inner);
  auto ctx = detail::op_ctx({&a});
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * extent * inner + i;
      double mu = 0.0;
      for (std::int64_t k = 0; k < extent; ++k)
        mu += av[static_cast<std::size_t>(base + k * inner)];
      mu /= static_cast<double>(extent);
      double var = 0.0;
      for (std::int64_t k = 0; k < extent; ++k) {
        const double d = av[static_cast<std::size_t>(base + k * inner)] - mu;
        var += d * d;
      }
      var /= static_cast<double>(extent);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::int64_t k = 0; k < extent; ++k) {
        const auto idx = static_cast<std::size_t>(base + k * inner);
        out[idx] = (av[idx] - mu) * inv;
      }
    }
  Tensor res = detail::make_result(a.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, outer, extent, inner, eps] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      const double n = static_cast<double>(extent);
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t i = 0; i < inner; ++i) {
          const std::int64_t base = o * extent * inner + i;
          double mu = 0.0;
          for (std::int64_t k = 0; k < extent; ++k)
            mu += (*an->value)[static_cast<std::size_t>(base + k * inner)];
          mu /= n;
          double var = 0.0;
          for (std::int64_t k = 0; k < extent; ++k) {
            const double d = (*an->value)[static_cast<std::size_t>(base + k * inner)] - mu;
            var += d * d;
          }
          var /= n;
          const double inv = 1.0 / std::sqrt(var + eps);
          double g_mean = 0.0, gx_mean = 0.0;
          for (std::int64_t k = 0; k < extent; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            const double xh = ((*an->value)[idx] - mu) * inv;
            g_mean += on->grad[idx];
            gx_mean += on->grad[idx] * xh;
          }
          g_mean /= n;
          gx_mean /= n;
          for (std::int64_t k = 0; k < extent; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            const double xh = ((*an->value)[idx] - mu) * inv;
            an->grad[idx] += (on->grad[idx] - g_mean - xh * gx_mean) * inv;
          }
        }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

// Shares the value buffer; no copy in either direction.
inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(new_shape));
  auto ctx = detail::op_ctx({&a});
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(new_shape);
  n->value = a.node()->value;
  n->tape = ctx.tape;
  n->requires_grad = ctx.needs_grad;
  n->is_leaf = false;
  Tensor res(n);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return res;
}

inline Tensor transpose(const Tensor& a, std::vector<int> perm) {
  const int r = a.rank();
  if (static_cast<int>(perm.size()) != r)
    throw std::invalid_argument("transpose: perm rank mismatch for " +
                                shape_str(a.shape()));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
      throw std::invalid_argument("transpose: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  auto ctx = detail::op_ctx({&a});
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i)
    out_shape[static_cast<std::size_t>(i)] = a.dim(perm[static_cast<std::size_t>(i)]);
  Tensor res = detail::make_result(
      out_shape, detail::permute_buffer(a.values(), a.shape(), perm), ctx);
  if (ctx.record()) {
    std::vector<int> inv(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, out_shape, inv] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      auto g = detail::permute_buffer(on->grad, out_shape, inv);
      for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
    });
  }
  return res;
}

// swap the last two axes
inline Tensor transpose(const Tensor& a) {
  std::vector<int> perm(static_cast<std::size_t>(a.rank()));
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(a, std::move(perm));
}

inline Tensor slice(const Tensor& a, int axis, std::int64_t start,
                    std::int64_t len) {
  const int ax = detail::normalize_axis(axis, a.rank(), "slice");
  std::int64_t outer, extent, inner;
  detail::axis_extents(a.shape(), ax, outer, extent, inner);
  if (start < 0 || len < 0 || start + len > extent)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") exceeds axis of " +
                                std::to_string(extent) + " in " + shape_str(a.shape()));
  auto ctx = detail::op_ctx({&a});
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] = len;
  const auto& av = a.values();
  std::vector<double> out(static_cast<std::size_t>(outer * len * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(av.data() + (o * extent + start) * inner, len * inner,
                out.data() + o * len * inner);
  Tensor res = detail::make_result(std::move(out_shape), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), on = res.node();
    ctx.tape->record([an, on, outer, extent, inner, start, len] {
      if (!detail::has_grad(on) || !an->requires_grad) return;
      an->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o) {
        double* dst = an->grad.data() + (o * extent + start) * inner;
        const double* src = on->grad.data() + o * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return res;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  std::int64_t total = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size())
      throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != ax && s[i] != out_shape[i])
        throw std::invalid_argument("concat: shape " + shape_str(s) +
                                    " incompatible with " + shape_str(out_shape));
    total += s[static_cast<std::size_t>(ax)];
  }
  out_shape[static_cast<std::size_t>(ax)] = total;

  std::vector<const Tensor*> ptrs;
  for (const Tensor& p : parts) ptrs.push_back(&p);
  detail::OpCtx ctx;
  for (const Tensor* p : ptrs) {
    auto c = detail::op_ctx({p});
    ctx.needs_grad = ctx.needs_grad || c.needs_grad;
    if (c.tape) {
      if (ctx.tape && ctx.tape != c.tape)
        throw std::invalid_argument("concat: inputs belong to different tapes");
      ctx.tape = c.tape;
    }
  }

  std::int64_t outer, extent, inner;
  detail::axis_extents(out_shape, ax, outer, extent, inner);
  std::vector<double> out(static_cast<std::size_t>(outer * extent * inner));
  std::int64_t offset = 0;
  for (const Tensor& p : parts) {
    const std::int64_t ext_p = p.dim(ax);
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * ext_p * inner, ext_p * inner,
                  out.data() + (o * extent + offset) * inner);
    offset += ext_p;
  }
  Tensor res = detail::make_result(out_shape, std::move(out), ctx);
  if (ctx.tape != nullptr && ctx.needs_grad) {
    std::vector<std::shared_ptr<TensorNode>> nodes;
    std::vector<std::int64_t> extents;
    for (const Tensor& p : parts) {
      nodes.push_back(p.node());
      extents.push_back(p.dim(ax));
    }
    auto on = res.node();
    ctx.tape->record([nodes, extents, on, outer, extent, inner] {
      if (!detail::has_grad(on)) return;
      std::int64_t off = 0;
      for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
        const std::int64_t ext_p = extents[pi];
        if (nodes[pi]->requires_grad) {
          nodes[pi]->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o) {
            double* dst = nodes[pi]->grad.data() + o * ext_p * inner;
            const double* src = on->grad.data() + (o * extent + off) * inner;
            for (std::int64_t i = 0; i < ext_p * inner; ++i) dst[i] += src[i];
          }
        }
        off += ext_p;
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

// a: (..., m, k); b: (k, n) shared across the batch, or (..., k, n) with
// identical leading dimensions.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: inputs must have rank >= 2, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::int64_t m = a.dim(a.rank() - 2);
  const std::int64_t k = a.dim(a.rank() - 1);
  const bool shared_rhs = b.rank() == 2;
  if (shared_rhs) {
    if (b.dim(0) != k)
      throw std::invalid_argument("matmul: inner dimensions disagree, " +
                                  shape_str(a.shape()) + " x " + shape_str(b.shape()));
  } else {
    if (b.rank() != a.rank() || b.dim(b.rank() - 2) != k ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin()))
      throw std::invalid_argument("matmul: incompatible batched shapes, " +
                                  shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t n = shared_rhs ? b.dim(1) : b.dim(b.rank() - 1);
  std::int64_t batch = 1;
  for (int i = 0; i < a.rank() - 2; ++i) batch *= a.dim(i);

  auto ctx = detail::op_ctx({&a, &b});
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batch * m * n));

  const double* ap = a.values().data();
  const double* bp = b.values().data();
  if (shared_rhs) {
    detail::CMapRM A(ap, batch * m, k);
    detail::CMapRM B(bp, k, n);
    detail::MapRM C(out.data(), batch * m, n);
    C.noalias() = A * B;
  } else {
    for (std::int64_t s = 0; s < batch; ++s) {
      detail::CMapRM A(ap + s * m * k, m, k);
      detail::CMapRM B(bp + s * k * n, k, n);
      detail::MapRM C(out.data() + s * m * n, m, n);
      C.noalias() = A * B;
    }
  }
  Tensor res = detail::make_result(std::move(out_shape), std::move(out), ctx);
  if (ctx.record()) {
    auto an = a.node(), bn = b.node(), on = res.node();
    ctx.tape->record([an, bn, on, batch, m, k, n, shared_rhs] {
      if (!detail::has_grad(on)) return;
      const double* ap = an->value->data();
      const double* bp = bn->value->data();
      const double* gp = on->grad.data();
      if (shared_rhs) {
        detail::CMapRM A(ap, batch * m, k);
        detail::CMapRM B(bp, k, n);
        detail::CMapRM G(gp, batch * m, n);
        if (an->requires_grad) {
          an->ensure_grad();
          detail::MapRM dA(an->grad.data(), batch * m, k);
          dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::MapRM dB(bn->grad.data(), k, n);
          dB.noalias() += A.transpose() * G;
        }
      } else {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::int64_t s = 0; s < batch; ++s) {
          detail::CMapRM A(ap + s * m * k, m, k);
          detail::CMapRM B(bp + s * k * n, k, n);
          detail::CMapRM G(gp + s * m * n, m, n);
          if (an->requires_grad) {
            detail::MapRM dA(an->grad.data() + s * m * k, m, k);
            dA.noalias() += G * B.transpose();
          }
          if (bn->requires_grad) {
            detail::MapRM dB(bn->grad.data() + s * k * n, k, n);
            dB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return res;
}

// fused a @ w + bias with bias broadcast over rows
inline Tensor matmul_bias(const Tensor& a, const Tensor& w, const Tensor& bias) {
  return add(matmul(a, w), bias);
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

namespace detail {

// rotate adjacent pairs (x[2m], x[2m+1]) by angle pos * base^(-2m/d)
inline void rope_apply(const double* src, double* dst, std::int64_t rows,
                       std::int64_t d, const std::int64_t* positions,
                       double base, bool invert) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(positions[r]);
    for (std::int64_t m = 0; m < d / 2; ++m) {
      const double omega =
          std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(d));
      const double theta = (invert ? -pos : pos) * omega;
      const double c = std::cos(theta), s = std::sin(theta);
      const double x0 = src[r * d + 2 * m];
      const double x1 = src[r * d + 2 * m + 1];
      dst[r * d + 2 * m] = c * x0 - s * x1;
      dst[r * d + 2 * m + 1] = s * x0 + c * x1;
    }
  }
}

}  // namespace detail

// x: (..., n, d) with d even; positions give the absolute index of each of
// the n rows. Scores between rotated queries and keys depend only on the
// position difference.
inline Tensor rope_rotate(const Tensor& x, const std::vector<std::int64_t>& positions,
                          double base) {
  if (x.rank() < 2) throw std::invalid_argument("rope_rotate: rank must be >= 2");
  const std::int64_t d = x.dim(x.rank() - 1);
  const std::int64_t n = x.dim(x.rank() - 2);
  if (d % 2 != 0)
    throw std::invalid_argument("rope_rotate: head dimension must be even, got " +
                                std::to_string(d));
  if (static_cast<std::int64_t>(positions.size()) != n)
    throw std::invalid_argument("rope_rotate: need one position per row");
  auto ctx = detail::op_ctx({&x});
  const std::int64_t batch = x.numel() / (n * d);
  std::vector<double> out(x.values().size());
  for (std::int64_t s = 0; s < batch; ++s)
    detail::rope_apply(x.values().data() + s * n * d, out.data() + s * n * d, n,
                       d, positions.data(), base, false);
  Tensor res = detail::make_result(x.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto xn = x.node(), on = res.node();
    ctx.tape->record([xn, on, batch, n, d, positions, base] {
      if (!detail::has_grad(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      std::vector<double> tmp(static_cast<std::size_t>(n * d));
      for (std::int64_t s = 0; s < batch; ++s) {
        detail::rope_apply(on->grad.data() + s * n * d, tmp.data(), n, d,
                           positions.data(), base, true);
        double* dst = xn->grad.data() + s * n * d;
        for (std::int64_t i = 0; i < n * d; ++i) dst[i] += tmp[i];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// fused scaled-dot-product attention
// ---------------------------------------------------------------------------

// Probabilities are recomputed during backward instead of being stored, so
// activation memory stays O(n * d) per batch slice rather than O(n^2).
struct AttentionSpec {
  int heads = 1;
  // mask scores between distinct rows that both lie at or beyond t_train
  bool mask_test_block = false;
  std::int64_t t_train = 0;
  bool rope = false;
  double rope_base = 10000.0;
};

namespace detail {

struct AttentionDims {
  std::int64_t batch, n, d, dh;
  double scale;
};

// forward probabilities for one (batch, head) slice; masked entries stay 0
inline void attention_probs(const double* q, const double* k,
                            const AttentionDims& dims, const AttentionSpec& spec,
                            std::int64_t head, std::vector<double>& probs) {
  const std::int64_t n = dims.n, d = dims.d, dh = dims.dh;
  const std::int64_t h0 = head * dh;
  std::fill(probs.begin(), probs.end(), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    const bool i_test = spec.mask_test_block && i >= spec.t_train;
    auto allowed = [&](std::int64_t j) {
      return !i_test || j < spec.t_train || j == i;
    };
    for (std::int64_t j = 0; j < n; ++j) {
      if (!allowed(j)) continue;
      double s = 0.0;
      for (std::int64_t c = 0; c < dh; ++c)
        s += q[i * d + h0 + c] * k[j * d + h0 + c];
      s *= dims.scale;
      probs[static_cast<std::size_t>(i * n + j)] = s;
      if (s > m) m = s;
    }
    double denom = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      if (!allowed(j)) continue;
      const double e = std::exp(probs[static_cast<std::size_t>(i * n + j)] - m);
      probs[static_cast<std::size_t>(i * n + j)] = e;
      denom += e;
    }
    for (std::int64_t j = 0; j < n; ++j) {
      if (!allowed(j)) continue;
      probs[static_cast<std::size_t>(i * n + j)] /= denom;
    }
  }
}

}  // namespace detail

// q, k, v: (..., n, d) with d divisible by spec.heads; output (..., n, d).
// RoPE, when enabled, uses row index as the position.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionSpec& spec) {
  if (q.shape() != k.shape() || q.shape() != v.shape())
    throw std::invalid_argument("attention: q/k/v shapes disagree: " +
                                shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                                ", " + shape_str(v.shape()));
  if (q.rank() < 2) throw std::invalid_argument("attention: rank must be >= 2");
  const std::int64_t d = q.dim(q.rank() - 1);
  const std::int64_t n = q.dim(q.rank() - 2);
  if (spec.heads < 1 || d % spec.heads != 0)
    throw std::invalid_argument("attention: embed dim " + std::to_string(d) +
                                " not divisible by " + std::to_string(spec.heads) +
                                " heads");
  const std::int64_t dh = d / spec.heads;
  if (spec.rope && dh % 2 != 0)
    throw std::invalid_argument("attention: rope requires even head dimension, got " +
                                std::to_string(dh));

  detail::AttentionDims dims{q.numel() / (n * d), n, d, dh,
                             1.0 / std::sqrt(static_cast<double>(dh))};
  auto ctx = detail::op_ctx({&q, &k, &v});

  // optionally rotated copies of q and k used for score computation
  std::shared_ptr<std::vector<double>> qr, kr;
  if (spec.rope) {
    std::vector<std::int64_t> positions(static_cast<std::size_t>(n));
    std::iota(positions.begin(), positions.end(), 0);
    qr = std::make_shared<std::vector<double>>(q.values().size());
    kr = std::make_shared<std::vector<double>>(k.values().size());
    for (std::int64_t s = 0; s < dims.batch; ++s)
      for (int h = 0; h < spec.heads; ++h)
        for (std::int64_t i = 0; i < n; ++i) {
          // rotate each head's dh-slice independently
          const std::int64_t off = s * n * d + i * d + h * dh;
          const std::int64_t pos_arr[1] = {i};
          detail::rope_apply(q.values().data() + off, qr->data() + off, 1, dh,
                             pos_arr, spec.rope_base, false);
          detail::rope_apply(k.values().data() + off, kr->data() + off, 1, dh,
                             pos_arr, spec.rope_base, false);
        }
  } else {
    qr = q.node()->value;
    kr = k.node()->value;
  }

  std::vector<double> out(q.values().size(), 0.0);
  {
    std::vector<double> probs(static_cast<std::size_t>(n * n));
    for (std::int64_t s = 0; s < dims.batch; ++s) {
      const double* qs = qr->data() + s * n * d;
      const double* ks = kr->data() + s * n * d;
      const double* vs = v.values().data() + s * n * d;
      double* os = out.data() + s * n * d;
      for (int h = 0; h < spec.heads; ++h) {
        detail::attention_probs(qs, ks, dims, spec, h, probs);
        const std::int64_t h0 = h * dh;
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            const double p = probs[static_cast<std::size_t>(i * n + j)];
            if (p == 0.0) continue;
            for (std::int64_t c = 0; c < dh; ++c)
              os[i * d + h0 + c] += p * vs[j * d + h0 + c];
          }
      }
    }
  }
  Tensor res = detail::make_result(q.shape(), std::move(out), ctx);
  if (ctx.record()) {
    auto qn = q.node(), kn = k.node(), vn = v.node(), on = res.node();
    AttentionSpec sp = spec;
    ctx.tape->record([qn, kn, vn, on, qr, kr, dims, sp] {
      if (!detail::has_grad(on)) return;
      const std::int64_t n = dims.n, d = dims.d, dh = dims.dh;
      if (qn->requires_grad) qn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      if (vn->requires_grad) vn->ensure_grad();
      std::vector<double> probs(static_cast<std::size_t>(n * n));
      std::vector<double> dscore(static_cast<std::size_t>(n * n));
      std::vector<double> dqr(static_cast<std::size_t>(n * dh));
      std::vector<double> dkr(static_cast<std::size_t>(n * dh));
      std::vector<double> unrot(static_cast<std::size_t>(dh));
      for (std::int64_t s = 0; s < dims.batch; ++s) {
        const double* qs = qr->data() + s * n * d;
        const double* ks = kr->data() + s * n * d;
        const double* vs = vn->value->data() + s * n * d;
        const double* gs = on->grad.data() + s * n * d;
        for (int h = 0; h < static_cast<int>(sp.heads); ++h) {
          detail::attention_probs(qs, ks, dims, sp, h, probs);
          const std::int64_t h0 = h * dh;
          // dV += P^T dOut
          if (vn->requires_grad) {
            double* dv = vn->grad.data() + s * n * d;
            for (std::int64_t i = 0; i < n; ++i)
              for (std::int64_t j = 0; j < n; ++j) {
                const double p = probs[static_cast<std::size_t>(i * n + j)];
                if (p == 0.0) continue;
                for (std::int64_t c = 0; c < dh; ++c)
                  dv[j * d + h0 + c] += p * gs[i * d + h0 + c];
              }
          }
          if (!qn->requires_grad && !kn->requires_grad) continue;
          // dP = dOut V^T, then dS = P o (dP - rowsum(dP o P))
          for (std::int64_t i = 0; i < n; ++i) {
            double row_dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) {
              const double p = probs[static_cast<std::size_t>(i * n + j)];
              double dp = 0.0;
              if (p != 0.0) {
                for (std::int64_t c = 0; c < dh; ++c)
                  dp += gs[i * d + h0 + c] * vs[j * d + h0 + c];
              }
              dscore[static_cast<std::size_t>(i * n + j)] = dp;
              row_dot += dp * p;
            }
            for (std::int64_t j = 0; j < n; ++j) {
              const double p = probs[static_cast<std::size_t>(i * n + j)];
              dscore[static_cast<std::size_t>(i * n + j)] =
                  p * (dscore[static_cast<std::size_t>(i * n + j)] - row_dot);
            }
          }
          // dQr = dS Kr * scale ; dKr = dS^T Qr * scale
          std::fill(dqr.begin(), dqr.end(), 0.0);
          std::fill(dkr.begin(), dkr.end(), 0.0);
          for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
              const double g = dscore[static_cast<std::size_t>(i * n + j)] * dims.scale;
              if (g == 0.0) continue;
              for (std::int64_t c = 0; c < dh; ++c) {
                dqr[static_cast<std::size_t>(i * dh + c)] += g * ks[j * d + h0 + c];
                dkr[static_cast<std::size_t>(j * dh + c)] += g * qs[i * d + h0 + c];
              }
            }
          // undo the rotation for the rope path
          for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t pos_arr[1] = {i};
            if (qn->requires_grad) {
              const double* src = dqr.data() + i * dh;
              if (sp.rope) {
                detail::rope_apply(src, unrot.data(), 1, dh, pos_arr,
                                   sp.rope_base, true);
                src = unrot.data();
              }
              double* dst = qn->grad.data() + s * n * d + i * d + h0;
              for (std::int64_t c = 0; c < dh; ++c) dst[c] += src[c];
            }
            if (kn->requires_grad) {
              const double* src = dkr.data() + i * dh;
              if (sp.rope) {
                detail::rope_apply(src, unrot.data(), 1, dh, pos_arr,
                                   sp.rope_base, true);
                src = unrot.data();
              }
              double* dst = kn->grad.data() + s * n * d + i * d + h0;
              for (std::int64_t c = 0; c < dh; ++c) dst[c] += src[c];
            }
          }
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// categorical negative log likelihood
// ---------------------------------------------------------------------------

// mean over rows of -log softmax(logits)[target]; numerically via logsumexp
inline Tensor nll_rows(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2)
    throw std::invalid_argument("nll_rows: logits must be rank 2, got " +
                                shape_str(logits.shape()));
  const std::int64_t rows = logits.dim(0), cols = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows)
    throw std::invalid_argument("nll_rows: need one target per row");
  for (int t : targets)
    if (t < 0 || t >= cols)
      throw std::invalid_argument("nll_rows: target column out of range");
  auto ctx = detail::op_ctx({&logits});
  const auto& lv = logits.values();
  double total = 0.0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = lv.data() + r * cols;
    double m = row[0];
    for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
    double denom = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) denom += std::exp(row[c] - m);
    total += m + std::log(denom) - row[targets[static_cast<std::size_t>(r)]];
  }
  Tensor res = detail::make_result({1}, {total / static_cast<double>(rows)}, ctx);
  if (ctx.record()) {
    auto ln = logits.node(), on = res.node();
    ctx.tape->record([ln, on, rows, cols, targets] {
      if (!detail::has_grad(on) || !ln->requires_grad) return;
      ln->ensure_grad();
      const double g = on->grad[0] / static_cast<double>(rows);
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = ln->value->data() + r * cols;
        double m = row[0];
        for (std::int64_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < cols; ++c) denom += std::exp(row[c] - m);
        for (std::int64_t c = 0; c < cols; ++c) {
          double p = std::exp(row[c] - m) / denom;
          if (c == targets[static_cast<std::size_t>(r)]) p -= 1.0;
          ln->grad[static_cast<std::size_t>(r * cols + c)] += g * p;
        }
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

struct FdCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  std::size_t worst_leaf = 0;
  std::int64_t worst_index = -1;
};

// Central-difference check of the tape gradients for a scalar function of
// leaf tensors. The relative error uses max(1, |analytic|, |numeric|) as
// the denominator so that near-zero gradients are compared absolutely.
template <class F>
FdCheckReport finite_difference_check(const F& f, const std::vector<Tensor>& point,
                                      double h, double tol) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    for (const Tensor& leaf : point) tape.watch(leaf);
    Tensor loss = f(tape, point);
    if (loss.numel() != 1)
      throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
    tape.backward(loss);
    for (const Tensor& leaf : point) {
      if (leaf.grad().empty())
        analytic.emplace_back(leaf.values().size(), 0.0);
      else
        analytic.push_back(leaf.grad());
      leaf.node()->grad.clear();
    }
  }
  auto eval = [&]() {
    Tape tape;
    for (const Tensor& leaf : point) tape.watch(leaf);
    return f(tape, point).item();
  };
  FdCheckReport report;
  for (std::size_t li = 0; li < point.size(); ++li) {
    auto& vals = const_cast<std::vector<double>&>(point[li].values());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = eval();
      vals[i] = orig - h;
      const double fm = eval();
      vals[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double ga = analytic[li][i];
      const double denom = std::max({1.0, std::abs(ga), std::abs(fd)});
      const double rel = std::abs(ga - fd) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_leaf = li;
        report.worst_index = static_cast<std::int64_t>(i);
      }
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace priorcast
