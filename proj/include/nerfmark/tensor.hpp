#pragma once

// Dense float32 tensors with reverse-mode automatic differentiation.
//
// Tensors are row-major with value semantics; copies share storage. Gradient
// recording is explicit: ops append to a GradTape only when one of their
// inputs was registered on a live tape via GradTape::watch. backward()
// replays the record once in reverse topological order and consumes it.
//
// Reductions and convolution/matmul inner products accumulate in double and
// round to float32 once at the end. Scalar-valued reductions additionally
// keep their double value (item_f64) so finite-difference checks are not
// limited by the float32 rounding of the final scalar.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nerfmark/rng.hpp"

namespace nerfmark {

using Shape = std::vector<int>;

namespace detail {

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  out += ")";
  return out;
}

[[noreturn]] inline void fail_op(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

[[noreturn]] inline void fail_shapes(const std::string& op, const std::string& what,
                                     const Shape& a, const Shape& b) {
  fail_op(op, what + " " + shape_str(a) + " vs " + shape_str(b));
}

// Four-lane double accumulation; fixed summation order, deterministic.
inline double dot_f(const float* a, const float* b, std::size_t n) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += static_cast<double>(a[i]) * b[i];
    acc1 += static_cast<double>(a[i + 1]) * b[i + 1];
    acc2 += static_cast<double>(a[i + 2]) * b[i + 2];
    acc3 += static_cast<double>(a[i + 3]) * b[i + 3];
  }
  for (; i < n; ++i) acc0 += static_cast<double>(a[i]) * b[i];
  return (acc0 + acc1) + (acc2 + acc3);
}

inline double dot_strided_f(const float* a, const float* b, std::size_t n, std::size_t stride_b) {
  double acc0 = 0.0, acc1 = 0.0;
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    acc0 += static_cast<double>(a[i]) * b[i * stride_b];
    acc1 += static_cast<double>(a[i + 1]) * b[(i + 1) * stride_b];
  }
  if (i < n) acc0 += static_cast<double>(a[i]) * b[i * stride_b];
  return acc0 + acc1;
}

// Eight-lane float dot; the lanes vectorize without reassociating a single
// serial chain. Used by backward kernels, where minibatch noise dwarfs
// accumulation rounding; forward kernels keep double accumulation so
// finite-difference checks stay sharp.
inline float dot_f32(const float* a, const float* b, std::size_t n) {
  float lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) lanes[j] += a[i + j] * b[i + j];
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

inline float dot_strided_f32(const float* a, const float* b, std::size_t n,
                             std::size_t stride_b) {
  float acc0 = 0.0f, acc1 = 0.0f, acc2 = 0.0f, acc3 = 0.0f;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += a[i] * b[i * stride_b];
    acc1 += a[i + 1] * b[(i + 1) * stride_b];
    acc2 += a[i + 2] * b[(i + 2) * stride_b];
    acc3 += a[i + 3] * b[(i + 3) * stride_b];
  }
  for (; i < n; ++i) acc0 += a[i] * b[i * stride_b];
  return (acc0 + acc1) + (acc2 + acc3);
}

}  // namespace detail

class GradTape;

class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<float>>()) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<float>>(detail::numel(shape_), 0.0f)) {}

  Tensor(Shape shape, std::vector<float> values)
      : shape_(std::move(shape)), data_(std::make_shared<std::vector<float>>(std::move(values))) {
    if (data_->size() != detail::numel(shape_))
      detail::fail_op("Tensor", "data length " + std::to_string(data_->size()) +
                                    " does not match shape " + detail::shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }

  static Tensor scalar(float value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_->size(); }
  bool empty() const { return data_->empty(); }

  std::vector<float>& data() { return *data_; }
  const std::vector<float>& data() const { return *data_; }
  float* ptr() { return data_->data(); }
  const float* ptr() const { return data_->data(); }
  float operator[](std::size_t i) const { return (*data_)[i]; }
  float& operator[](std::size_t i) { return (*data_)[i]; }

  float item() const {
    if (size() != 1) detail::fail_op("item", "tensor has size " + std::to_string(size()));
    return (*data_)[0];
  }

  // Double value of a scalar; exact for reduction outputs, which carry their
  // 64-bit accumulation alongside the rounded float32.
  double item_f64() const {
    if (size() != 1) detail::fail_op("item_f64", "tensor has size " + std::to_string(size()));
    return has_f64_ ? f64_ : static_cast<double>((*data_)[0]);
  }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  int node() const { return node_; }
  GradTape* tape() const { return tape_; }
  bool recorded() const { return node_ >= 0; }

  Tensor detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<std::vector<float>>(*data_);
    t.requires_grad_ = requires_grad_;
    return t;
  }

 private:
  friend class GradTape;

  Shape shape_;
  std::shared_ptr<std::vector<float>> data_;
  bool requires_grad_ = false;
  int node_ = -1;
  GradTape* tape_ = nullptr;
  double f64_ = 0.0;
  bool has_f64_ = false;

  friend Tensor with_f64_(Tensor t, double v);
};

inline Tensor with_f64_(Tensor t, double v) {  // internal
  t.f64_ = v;
  t.has_f64_ = true;
  return t;
}

// Ordered record of executed primitives for one forward pass.
class GradTape {
 public:
  class Accum {
   public:
    explicit Accum(GradTape& tape) : tape_(tape) {}

    // Accumulate a gradient contribution for the given node.
    void add(int node, const Tensor& g) {
      if (node < 0) return;
      auto& slot = tape_.grads_[static_cast<std::size_t>(node)];
      if (slot.size() == 0) {
        slot = g.clone();
        slot.shape_ = tape_.nodes_[static_cast<std::size_t>(node)].shape;
        if (slot.size() != detail::numel(slot.shape_))
          detail::fail_op("backward", "gradient size mismatch for node " + std::to_string(node));
        return;
      }
      if (slot.size() != g.size())
        detail::fail_shapes("backward", "gradient shape mismatch", slot.shape(), g.shape());
      float* dst = slot.ptr();
      const float* src = g.ptr();
      for (std::size_t i = 0; i < slot.size(); ++i) dst[i] += src[i];
    }

   private:
    GradTape& tape_;
  };

  using BackwardFn = std::function<void(const Tensor& grad_out, Accum& sink)>;
  using GradMap = std::unordered_map<int, Tensor>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;
  ~GradTape() { unbind_watched(); }

  // Register a leaf. Idempotent for tensors already on this tape.
  Tensor& watch(Tensor& t) {
    if (t.tape_ == this && t.node_ >= 0) return t;
    if (t.tape_ != nullptr && t.tape_ != this)
      detail::fail_op("watch", "tensor is already recorded on another tape");
    if (consumed_) detail::fail_op("watch", "tape has been consumed by backward");
    t.requires_grad_ = true;
    t.tape_ = this;
    t.node_ = add_node(t.shape(), {}, nullptr);
    watched_.push_back(&t);
    return t;
  }

  // Record an op producing `value` from `inputs`; returns the bound tensor.
  Tensor emit(Tensor value, std::vector<int> inputs, BackwardFn fn) {
    if (consumed_) detail::fail_op("emit", "tape has been consumed by backward");
    value.tape_ = this;
    value.node_ = add_node(value.shape(), std::move(inputs), std::move(fn));
    return value;
  }

  // Reverse sweep from a scalar loss. Returns d loss / d leaf for every
  // watched leaf (zeros when unreachable) keyed by node id, then consumes
  // the record.
  GradMap backward(const Tensor& loss) {
    if (consumed_) detail::fail_op("backward", "tape has already been consumed");
    if (loss.tape_ != this || loss.node_ < 0)
      detail::fail_op("backward", "loss is not recorded on this tape");
    if (loss.size() != 1)
      detail::fail_op("backward", "loss must be scalar, got " + detail::shape_str(loss.shape()));

    grads_.assign(nodes_.size(), Tensor());
    grads_[static_cast<std::size_t>(loss.node_)] = Tensor::ones({1});
    grads_[static_cast<std::size_t>(loss.node_)].shape_ = loss.shape();

    Accum sink(*this);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (grads_[i].size() == 0 || !n.fn) continue;
      n.fn(grads_[i], sink);
      if (static_cast<int>(i) != loss.node_) grads_[i] = Tensor();  // free as we go
    }

    GradMap out;
    for (Tensor* t : watched_) {
      const int id = t->node_;
      if (id < 0) continue;
      Tensor g = grads_[static_cast<std::size_t>(id)];
      if (g.size() == 0) {
        g = Tensor::zeros(t->shape());
      }
      out.emplace(id, std::move(g));
    }

    unbind_watched();
    nodes_.clear();
    grads_.clear();
    consumed_ = true;
    return out;
  }

  std::size_t num_nodes() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> inputs;
    BackwardFn fn;
  };

  int add_node(Shape shape, std::vector<int> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(shape), std::move(inputs), std::move(fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  void unbind_watched() {
    for (Tensor* t : watched_) {
      if (t->tape_ == this) {
        t->tape_ = nullptr;
        t->node_ = -1;
      }
    }
    watched_.clear();
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<Tensor*> watched_;
  bool consumed_ = false;
};

namespace detail {

inline GradTape* merge_tapes(std::initializer_list<const Tensor*> ts, const char* op) {
  GradTape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t->recorded()) continue;
    if (tape == nullptr) {
      tape = t->tape();
    } else if (tape != t->tape()) {
      fail_op(op, "inputs are recorded on different tapes");
    }
  }
  return tape;
}

// Shape of the broadcast result, or failure. Supported: equal shapes, a
// 1-element operand, or same-rank shapes whose dims are equal or 1.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return a;
  if (numel(a) == 1) return b;
  if (numel(b) == 1) return a;
  if (a.size() != b.size()) fail_shapes(op, "shape mismatch", a, b);
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      out[i] = a[i];
    } else if (a[i] == 1) {
      out[i] = b[i];
    } else if (b[i] == 1) {
      out[i] = a[i];
    } else {
      fail_shapes(op, "shape mismatch", a, b);
    }
  }
  return out;
}

// Sum `g` (shaped like `from`) down to `to` by reducing broadcast axes.
inline Tensor reduce_to_shape(const Tensor& g, const Shape& to) {
  if (g.shape() == to) return g;
  Tensor out(to);
  const std::size_t n_to = out.size();
  if (n_to == 1) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i];
    out[0] = static_cast<float>(acc);
    return out;
  }
  const Shape& from = g.shape();
  const std::size_t rank = from.size();
  std::vector<std::size_t> stride_to(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = rank; i-- > 0;) {
    stride_to[i] = (to[i] == 1) ? 0 : s;
    s *= static_cast<std::size_t>(to[i]);
  }
  std::vector<int> idx(rank, 0);
  const float* src = g.ptr();
  float* dst = out.ptr();
  for (std::size_t flat = 0; flat < g.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += stride_to[i] * static_cast<std::size_t>(idx[i]);
    dst[off] += src[flat];
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < from[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

template <class F>
inline Tensor broadcast_apply(const char* op, const Tensor& a, const Tensor& b, F&& f) {
  const Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  Tensor out(out_shape);
  const float* pa = a.ptr();
  const float* pb = b.ptr();
  float* po = out.ptr();
  const std::size_t n = out.size();
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  } else if (a.size() == 1) {
    const float av = pa[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = f(av, pb[i]);
  } else if (b.size() == 1) {
    const float bv = pb[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], bv);
  } else {
    const std::size_t rank = out_shape.size();
    std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
    std::size_t ra = 1, rb = 1;
    for (std::size_t i = rank; i-- > 0;) {
      sa[i] = (a.shape()[i] == 1) ? 0 : ra;
      sb[i] = (b.shape()[i] == 1) ? 0 : rb;
      ra *= static_cast<std::size_t>(a.shape()[i]);
      rb *= static_cast<std::size_t>(b.shape()[i]);
    }
    std::vector<int> idx(rank, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
      std::size_t oa = 0, ob = 0;
      for (std::size_t i = 0; i < rank; ++i) {
        oa += sa[i] * static_cast<std::size_t>(idx[i]);
        ob += sb[i] * static_cast<std::size_t>(idx[i]);
      }
      po[flat] = f(pa[oa], pb[ob]);
      for (std::size_t i = rank; i-- > 0;) {
        if (++idx[i] < out_shape[i]) break;
        idx[i] = 0;
      }
    }
  }
  return out;
}

// Propagate exact double values through scalar arithmetic when available.
inline bool both_scalar(const Tensor& a, const Tensor& b) {
  return a.size() == 1 && b.size() == 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  Tensor out = detail::broadcast_apply("add", a, b, [](float x, float y) { return x + y; });
  if (detail::both_scalar(a, b)) out = with_f64_(std::move(out), a.item_f64() + b.item_f64());
  GradTape* tape = detail::merge_tapes({&a, &b}, "add");
  if (!tape) return out;
  const Shape sa = a.shape(), sb = b.shape();
  const int na = a.node(), nb = b.node();
  return tape->emit(std::move(out), {na, nb},
                    [sa, sb, na, nb](const Tensor& g, GradTape::Accum& sink) {
                      if (na >= 0) sink.add(na, detail::reduce_to_shape(g, sa));
                      if (nb >= 0) sink.add(nb, detail::reduce_to_shape(g, sb));
                    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor out = detail::broadcast_apply("sub", a, b, [](float x, float y) { return x - y; });
  if (detail::both_scalar(a, b)) out = with_f64_(std::move(out), a.item_f64() - b.item_f64());
  GradTape* tape = detail::merge_tapes({&a, &b}, "sub");
  if (!tape) return out;
  const Shape sa = a.shape(), sb = b.shape();
  const int na = a.node(), nb = b.node();
  return tape->emit(std::move(out), {na, nb},
                    [sa, sb, na, nb](const Tensor& g, GradTape::Accum& sink) {
                      if (na >= 0) sink.add(na, detail::reduce_to_shape(g, sa));
                      if (nb >= 0) {
                        Tensor neg_g(g.shape());
                        for (std::size_t i = 0; i < g.size(); ++i) neg_g[i] = -g[i];
                        sink.add(nb, detail::reduce_to_shape(neg_g, sb));
                      }
                    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor out = detail::broadcast_apply("mul", a, b, [](float x, float y) { return x * y; });
  if (detail::both_scalar(a, b)) out = with_f64_(std::move(out), a.item_f64() * b.item_f64());
  GradTape* tape = detail::merge_tapes({&a, &b}, "mul");
  if (!tape) return out;
  Tensor av = a.detached(), bv = b.detached();
  const int na = a.node(), nb = b.node();
  return tape->emit(std::move(out), {na, nb},
                    [av, bv, na, nb](const Tensor& g, GradTape::Accum& sink) {
                      if (na >= 0) {
                        Tensor ga = detail::broadcast_apply("mul.bwd", g, bv,
                                                            [](float x, float y) { return x * y; });
                        sink.add(na, detail::reduce_to_shape(ga, av.shape()));
                      }
                      if (nb >= 0) {
                        Tensor gb = detail::broadcast_apply("mul.bwd", g, av,
                                                            [](float x, float y) { return x * y; });
                        sink.add(nb, detail::reduce_to_shape(gb, bv.shape()));
                      }
                    });
}

inline Tensor scale(const Tensor& a, float c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  if (a.size() == 1) out = with_f64_(std::move(out), a.item_f64() * static_cast<double>(c));
  GradTape* tape = detail::merge_tapes({&a}, "scale");
  if (!tape) return out;
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, c](const Tensor& g, GradTape::Accum& sink) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
    sink.add(na, ga);
  });
}

inline Tensor add_scalar(const Tensor& a, float c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + c;
  if (a.size() == 1) out = with_f64_(std::move(out), a.item_f64() + static_cast<double>(c));
  GradTape* tape = detail::merge_tapes({&a}, "add_scalar");
  if (!tape) return out;
  const int na = a.node();
  return tape->emit(std::move(out), {na},
                    [na](const Tensor& g, GradTape::Accum& sink) { sink.add(na, g); });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

inline Tensor exp(const Tensor& a) {
  Tensor out(a.shape());
  // Evaluate in double and round once; keeps finite-difference checks tight.
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = static_cast<float>(std::exp(static_cast<double>(a[i])));
  GradTape* tape = detail::merge_tapes({&a}, "exp");
  if (!tape) return out;
  Tensor ov = out.detached();
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, ov](const Tensor& g, GradTape::Accum& sink) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * ov[i];
    sink.add(na, ga);
  });
}

inline Tensor leaky_relu(const Tensor& a, float negative_slope) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const float x = a[i];
    out[i] = x >= 0.0f ? x : negative_slope * x;
  }
  GradTape* tape = detail::merge_tapes({&a}, "leaky_relu");
  if (!tape) return out;
  Tensor av = a.detached();
  const int na = a.node();
  return tape->emit(std::move(out), {na},
                    [na, av, negative_slope](const Tensor& g, GradTape::Accum& sink) {
                      Tensor ga(g.shape());
                      for (std::size_t i = 0; i < g.size(); ++i)
                        ga[i] = av[i] >= 0.0f ? g[i] : negative_slope * g[i];
                      sink.add(na, ga);
                    });
}

inline Tensor relu(const Tensor& a) { return leaky_relu(a, 0.0f); }

inline Tensor sigmoid(const Tensor& a) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = static_cast<double>(a[i]);
    const double v = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out[i] = static_cast<float>(v);
  }
  GradTape* tape = detail::merge_tapes({&a}, "sigmoid");
  if (!tape) return out;
  Tensor ov = out.detached();
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, ov](const Tensor& g, GradTape::Accum& sink) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * ov[i] * (1.0f - ov[i]);
    sink.add(na, ga);
  });
}

inline Tensor clamp(const Tensor& a, float lo, float hi) {
  if (lo > hi) detail::fail_op("clamp", "lo > hi");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::min(hi, std::max(lo, a[i]));
  GradTape* tape = detail::merge_tapes({&a}, "clamp");
  if (!tape) return out;
  Tensor av = a.detached();
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, av, lo, hi](const Tensor& g, GradTape::Accum& sink) {
    Tensor ga(g.shape());
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] = (av[i] > lo && av[i] < hi) ? g[i] : 0.0f;
    sink.add(na, ga);
  });
}

// ---------------------------------------------------------------------------
// Structure: reshape, concat, slice
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (detail::numel(new_shape) != a.size())
    detail::fail_shapes("reshape", "element count mismatch", a.shape(), new_shape);
  Tensor out(new_shape, a.data());
  GradTape* tape = detail::merge_tapes({&a}, "reshape");
  if (!tape) return out;
  const Shape sa = a.shape();
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, sa](const Tensor& g, GradTape::Accum& sink) {
    sink.add(na, Tensor(sa, g.data()));
  });
}

// Concatenate along axis 1 (channels of (B,C,H,W), features of (N,F)).
inline Tensor concat_ch(const std::vector<Tensor>& parts) {
  if (parts.empty()) detail::fail_op("concat_ch", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() < 2) detail::fail_op("concat_ch", "inputs must have rank >= 2");
  int total_ch = 0;
  for (const Tensor& p : parts) {
    if (p.shape().size() != s0.size())
      detail::fail_shapes("concat_ch", "rank mismatch", s0, p.shape());
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != 1 && p.shape()[i] != s0[i])
        detail::fail_shapes("concat_ch", "non-channel dims differ", s0, p.shape());
    }
    total_ch += p.shape()[1];
  }
  Shape out_shape = s0;
  out_shape[1] = total_ch;

  std::size_t inner = 1;
  for (std::size_t i = 2; i < s0.size(); ++i) inner *= static_cast<std::size_t>(s0[i]);
  const std::size_t batch = static_cast<std::size_t>(s0[0]);

  Tensor out(out_shape);
  float* dst = out.ptr();
  const std::size_t out_row = static_cast<std::size_t>(total_ch) * inner;
  std::size_t ch_off = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = static_cast<std::size_t>(p.shape()[1]) * inner;
    const float* src = p.ptr();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy(src + b * pc, src + (b + 1) * pc, dst + b * out_row + ch_off * inner);
    ch_off += static_cast<std::size_t>(p.shape()[1]);
  }

  std::vector<const Tensor*> refs;
  refs.reserve(parts.size());
  for (const Tensor& p : parts) refs.push_back(&p);
  GradTape* tape = nullptr;
  for (const Tensor* p : refs) {
    GradTape* t = detail::merge_tapes({p}, "concat_ch");
    if (t) {
      if (tape && tape != t) detail::fail_op("concat_ch", "inputs on different tapes");
      tape = t;
    }
  }
  if (!tape) return out;

  std::vector<int> nodes;
  std::vector<int> chans;
  for (const Tensor& p : parts) {
    nodes.push_back(p.node());
    chans.push_back(p.shape()[1]);
  }
  Shape base = s0;
  return tape->emit(std::move(out), nodes,
                    [nodes, chans, base, inner, batch, total_ch](const Tensor& g,
                                                                 GradTape::Accum& sink) {
                      const std::size_t grow = static_cast<std::size_t>(total_ch) * inner;
                      std::size_t off = 0;
                      for (std::size_t k = 0; k < nodes.size(); ++k) {
                        const std::size_t pc = static_cast<std::size_t>(chans[k]) * inner;
                        if (nodes[k] >= 0) {
                          Shape ps = base;
                          ps[1] = chans[k];
                          Tensor gp(ps);
                          float* dst = gp.ptr();
                          const float* src = g.ptr();
                          for (std::size_t b = 0; b < batch; ++b)
                            std::copy(src + b * grow + off * inner,
                                      src + b * grow + off * inner + pc, dst + b * pc);
                          sink.add(nodes[k], gp);
                        }
                        off += static_cast<std::size_t>(chans[k]);
                      }
                    });
}

// Slice `count` channels starting at `start` along axis 1.
inline Tensor slice_ch(const Tensor& a, int start, int count) {
  const Shape& s = a.shape();
  if (s.size() < 2) detail::fail_op("slice_ch", "input must have rank >= 2");
  if (start < 0 || count <= 0 || start + count > s[1])
    detail::fail_op("slice_ch", "slice [" + std::to_string(start) + "," +
                                    std::to_string(start + count) + ") out of range for " +
                                    detail::shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
  const std::size_t batch = static_cast<std::size_t>(s[0]);
  const std::size_t in_row = static_cast<std::size_t>(s[1]) * inner;
  const std::size_t out_row = static_cast<std::size_t>(count) * inner;

  Shape out_shape = s;
  out_shape[1] = count;
  Tensor out(out_shape);
  const float* src = a.ptr();
  float* dst = out.ptr();
  for (std::size_t b = 0; b < batch; ++b)
    std::copy(src + b * in_row + static_cast<std::size_t>(start) * inner,
              src + b * in_row + static_cast<std::size_t>(start) * inner + out_row,
              dst + b * out_row);

  GradTape* tape = detail::merge_tapes({&a}, "slice_ch");
  if (!tape) return out;
  const Shape sa = a.shape();
  const int na = a.node();
  return tape->emit(std::move(out), {na},
                    [na, sa, start, count, inner, batch, in_row, out_row](
                        const Tensor& g, GradTape::Accum& sink) {
                      Tensor ga(sa);
                      float* dst = ga.ptr();
                      const float* src = g.ptr();
                      for (std::size_t b = 0; b < batch; ++b)
                        std::copy(src + b * out_row, src + (b + 1) * out_row,
                                  dst + b * in_row + static_cast<std::size_t>(start) * inner);
                      sink.add(na, ga);
                    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  Tensor out = with_f64_(Tensor::scalar(static_cast<float>(acc)), acc);
  GradTape* tape = detail::merge_tapes({&a}, "sum");
  if (!tape) return out;
  const Shape sa = a.shape();
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, sa](const Tensor& g, GradTape::Accum& sink) {
    sink.add(na, Tensor::full(sa, g[0]));
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) detail::fail_op("mean", "empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  acc /= static_cast<double>(a.size());
  Tensor out = with_f64_(Tensor::scalar(static_cast<float>(acc)), acc);
  GradTape* tape = detail::merge_tapes({&a}, "mean");
  if (!tape) return out;
  const Shape sa = a.shape();
  const float inv = 1.0f / static_cast<float>(a.size());
  const int na = a.node();
  return tape->emit(std::move(out), {na}, [na, sa, inv](const Tensor& g, GradTape::Accum& sink) {
    sink.add(na, Tensor::full(sa, g[0] * inv));
  });
}

// Sum over one axis, keeping it with extent 1.
inline Tensor sum_axis(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    detail::fail_op("sum_axis", "axis " + std::to_string(axis) + " out of range for " +
                                    detail::shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    inner *= static_cast<std::size_t>(s[i]);
  const std::size_t extent = static_cast<std::size_t>(s[axis]);

  Shape out_shape = s;
  out_shape[axis] = 1;
  Tensor out(out_shape);
  const float* src = a.ptr();
  float* dst = out.ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (std::size_t e = 0; e < extent; ++e) acc += src[(o * extent + e) * inner + i];
      dst[o * inner + i] = static_cast<float>(acc);
    }
  }

  GradTape* tape = detail::merge_tapes({&a}, "sum_axis");
  if (!tape) return out;
  const Shape sa = a.shape();
  const int na = a.node();
  return tape->emit(std::move(out), {na},
                    [na, sa, outer, inner, extent](const Tensor& g, GradTape::Accum& sink) {
                      Tensor ga(sa);
                      float* dst = ga.ptr();
                      const float* src = g.ptr();
                      for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t e = 0; e < extent; ++e)
                          for (std::size_t i = 0; i < inner; ++i)
                            dst[(o * extent + e) * inner + i] = src[o * inner + i];
                      sink.add(na, ga);
                    });
}

// Exclusive prefix sum along the last axis: out[..., 0] = 0,
// out[..., i] = sum of x[..., 0..i-1].
inline Tensor cumsum_exclusive(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty()) detail::fail_op("cumsum_exclusive", "rank-0 input");
  const std::size_t width = static_cast<std::size_t>(s.back());
  const std::size_t rows = a.size() / width;
  Tensor out(s);
  const float* src = a.ptr();
  float* dst = out.ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    double run = 0.0;
    for (std::size_t i = 0; i < width; ++i) {
      dst[r * width + i] = static_cast<float>(run);
      run += src[r * width + i];
    }
  }
  GradTape* tape = detail::merge_tapes({&a}, "cumsum_exclusive");
  if (!tape) return out;
  const int na = a.node();
  return tape->emit(std::move(out), {na},
                    [na, rows, width, s](const Tensor& g, GradTape::Accum& sink) {
                      Tensor ga(s);
                      float* dst = ga.ptr();
                      const float* src = g.ptr();
                      for (std::size_t r = 0; r < rows; ++r) {
                        double run = 0.0;
                        for (std::size_t i = width; i-- > 0;) {
                          dst[r * width + i] = static_cast<float>(run);
                          run += src[r * width + i];
                        }
                      }
                      sink.add(na, ga);
                    });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    detail::fail_shapes("matmul", "expects two rank-2 tensors", a.shape(), b.shape());
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) detail::fail_shapes("matmul", "inner dimensions differ", a.shape(), b.shape());

  Tensor out({m, n});
  {
    const float* pa = a.ptr();
    const float* pb = b.ptr();
    float* po = out.ptr();
    std::vector<double> acc(static_cast<std::size_t>(n));
    for (int i = 0; i < m; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int kk = 0; kk < k; ++kk) {
        const double av = pa[static_cast<std::size_t>(i) * k + kk];
        if (av == 0.0) continue;
        const float* brow = pb + static_cast<std::size_t>(kk) * n;
        for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += av * brow[j];
      }
      for (int j = 0; j < n; ++j)
        po[static_cast<std::size_t>(i) * n + j] = static_cast<float>(acc[static_cast<std::size_t>(j)]);
    }
  }

  GradTape* tape = detail::merge_tapes({&a, &b}, "matmul");
  if (!tape) return out;
  Tensor av = a.detached(), bv = b.detached();
  const int na = a.node(), nb = b.node();
  return tape->emit(
      std::move(out), {na, nb}, [av, bv, na, nb, m, k, n](const Tensor& g, GradTape::Accum& sink) {
        const float* pg = g.ptr();
        if (na >= 0) {  // dA = g . B^T
          Tensor da({m, k});
          float* pda = da.ptr();
          const float* pb = bv.ptr();
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk)
              pda[static_cast<std::size_t>(i) * k + kk] = detail::dot_f32(
                  pg + static_cast<std::size_t>(i) * n, pb + static_cast<std::size_t>(kk) * n,
                  static_cast<std::size_t>(n));
          sink.add(na, da);
        }
        if (nb >= 0) {  // dB = A^T . g
          Tensor db({k, n});
          const float* pa = av.ptr();
          std::vector<float> acc(static_cast<std::size_t>(n));
          float* pdb = db.ptr();
          for (int kk = 0; kk < k; ++kk) {
            std::fill(acc.begin(), acc.end(), 0.0f);
            for (int i = 0; i < m; ++i) {
              const float w = pa[static_cast<std::size_t>(i) * k + kk];
              if (w == 0.0f) continue;
              const float* grow = pg + static_cast<std::size_t>(i) * n;
              for (int j = 0; j < n; ++j) acc[static_cast<std::size_t>(j)] += w * grow[j];
            }
            std::copy(acc.begin(), acc.end(), pdb + static_cast<std::size_t>(kk) * n);
          }
          sink.add(nb, db);
        }
      });
}

// ---------------------------------------------------------------------------
// 2-D convolution (zero padding) and its transpose
// ---------------------------------------------------------------------------

namespace detail {

// Zero-padded copies of every channel plane of sample b: (C, H+2p, W+2p).
inline void pad_planes(const float* x, int c, int h, int w, int pad, std::vector<float>& out) {
  const int hp = h + 2 * pad, wp = w + 2 * pad;
  out.assign(static_cast<std::size_t>(c) * hp * wp, 0.0f);
  for (int ci = 0; ci < c; ++ci) {
    const float* src = x + static_cast<std::size_t>(ci) * h * w;
    float* dst = out.data() + static_cast<std::size_t>(ci) * hp * wp;
    for (int y = 0; y < h; ++y)
      std::copy(src + static_cast<std::size_t>(y) * w, src + static_cast<std::size_t>(y + 1) * w,
                dst + static_cast<std::size_t>(y + pad) * wp + pad);
  }
}

struct ConvDims {
  int batch, cin, h, w, cout, kh, kw, ho, wo;
};

inline ConvDims conv_dims(const char* op, const Tensor& x, const Tensor& w, const Tensor& bias,
                          int stride, int pad, bool transposed) {
  if (x.rank() != 4 || w.rank() != 4) fail_shapes(op, "expects rank-4 input and kernel", x.shape(), w.shape());
  if (stride < 1) fail_op(op, "stride must be >= 1");
  if (pad < 0) fail_op(op, "padding must be >= 0");
  ConvDims d{};
  d.batch = x.dim(0);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  if (!transposed) {
    d.cout = w.dim(0);
    d.cin = w.dim(1);
    if (x.dim(1) != d.cin) fail_shapes(op, "channel mismatch between input and kernel", x.shape(), w.shape());
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
      fail_shapes(op, "kernel larger than padded input", x.shape(), w.shape());
  } else {
    d.cin = w.dim(0);
    d.cout = w.dim(1);
    if (x.dim(1) != d.cin) fail_shapes(op, "channel mismatch between input and kernel", x.shape(), w.shape());
    d.ho = (d.h - 1) * stride + d.kh - 2 * pad;
    d.wo = (d.w - 1) * stride + d.kw - 2 * pad;
    if (d.ho < 1 || d.wo < 1) fail_shapes(op, "output would be empty", x.shape(), w.shape());
  }
  if (bias.size() != 0 && (bias.rank() != 1 || bias.dim(0) != d.cout))
    fail_op(op, "bias must have shape (" + std::to_string(d.cout) + "), got " + shape_str(bias.shape()));
  return d;
}

inline void conv2d_forward_kernel(const float* x, const float* w, const float* bias, float* out,
                                  const ConvDims& d, int stride, int pad) {
  const int hp = d.h + 2 * pad, wp = d.w + 2 * pad;
  std::vector<float> xpad;
  std::vector<double> acc(static_cast<std::size_t>(d.ho) * d.wo);
  for (int b = 0; b < d.batch; ++b) {
    pad_planes(x + static_cast<std::size_t>(b) * d.cin * d.h * d.w, d.cin, d.h, d.w, pad, xpad);
    for (int co = 0; co < d.cout; ++co) {
      std::fill(acc.begin(), acc.end(), bias ? static_cast<double>(bias[co]) : 0.0);
      for (int ci = 0; ci < d.cin; ++ci) {
        const float* plane = xpad.data() + static_cast<std::size_t>(ci) * hp * wp;
        for (int ky = 0; ky < d.kh; ++ky) {
          for (int kx = 0; kx < d.kw; ++kx) {
            const double wv = w[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
            if (wv == 0.0) continue;
            for (int oy = 0; oy < d.ho; ++oy) {
              const float* src = plane + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
              double* arow = acc.data() + static_cast<std::size_t>(oy) * d.wo;
              if (stride == 1) {
                for (int ox = 0; ox < d.wo; ++ox) arow[ox] += wv * src[ox];
              } else {
                for (int ox = 0; ox < d.wo; ++ox) arow[ox] += wv * src[ox * stride];
              }
            }
          }
        }
      }
      float* orow = out + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
      for (std::size_t i = 0; i < acc.size(); ++i) orow[i] = static_cast<float>(acc[i]);
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor(),
                     int stride = 1, int pad = 1) {
  const detail::ConvDims d = detail::conv_dims("conv2d", x, w, bias, stride, pad, false);
  Tensor out({d.batch, d.cout, d.ho, d.wo});
  detail::conv2d_forward_kernel(x.ptr(), w.ptr(), bias.size() ? bias.ptr() : nullptr, out.ptr(), d,
                                stride, pad);

  GradTape* tape = detail::merge_tapes({&x, &w, &bias}, "conv2d");
  if (!tape) return out;
  Tensor xv = x.detached(), wv = w.detached();
  const int nx = x.node(), nw = w.node(), nb = bias.node();
  return tape->emit(std::move(out), {nx, nw, nb}, [xv, wv, nx, nw, nb, d, stride, pad](
                                                      const Tensor& g, GradTape::Accum& sink) {
    const int hp = d.h + 2 * pad, wp = d.w + 2 * pad;
    const float* pg = g.ptr();
    const float* pw = wv.ptr();

    if (nx >= 0) {  // scatter g through the kernel into padded input space
      Tensor dx({d.batch, d.cin, d.h, d.w});
      std::vector<float> dxpad(static_cast<std::size_t>(d.cin) * hp * wp);
      for (int b = 0; b < d.batch; ++b) {
        std::fill(dxpad.begin(), dxpad.end(), 0.0f);
        for (int co = 0; co < d.cout; ++co) {
          const float* gplane = pg + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
          for (int ci = 0; ci < d.cin; ++ci) {
            float* dplane = dxpad.data() + static_cast<std::size_t>(ci) * hp * wp;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                const float wvv =
                    pw[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx];
                if (wvv == 0.0f) continue;
                for (int oy = 0; oy < d.ho; ++oy) {
                  const float* grow = gplane + static_cast<std::size_t>(oy) * d.wo;
                  float* drow = dplane + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
                  if (stride == 1) {
                    for (int ox = 0; ox < d.wo; ++ox) drow[ox] += wvv * grow[ox];
                  } else {
                    for (int ox = 0; ox < d.wo; ++ox) drow[ox * stride] += wvv * grow[ox];
                  }
                }
              }
            }
          }
        }
        float* dst = dx.ptr() + static_cast<std::size_t>(b) * d.cin * d.h * d.w;
        for (int ci = 0; ci < d.cin; ++ci)
          for (int y = 0; y < d.h; ++y)
            std::copy(dxpad.data() + (static_cast<std::size_t>(ci) * hp + y + pad) * wp + pad,
                      dxpad.data() + (static_cast<std::size_t>(ci) * hp + y + pad) * wp + pad + d.w,
                      dst + (static_cast<std::size_t>(ci) * d.h + y) * d.w);
      }
      sink.add(nx, dx);
    }

    if (nw >= 0) {
      Tensor dw({d.cout, d.cin, d.kh, d.kw});
      float* pdw = dw.ptr();
      std::vector<float> xpad;
      std::vector<double> acc(dw.size());
      for (int b = 0; b < d.batch; ++b) {
        detail::pad_planes(xv.ptr() + static_cast<std::size_t>(b) * d.cin * d.h * d.w, d.cin, d.h,
                           d.w, pad, xpad);
        for (int co = 0; co < d.cout; ++co) {
          const float* gplane = pg + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
          for (int ci = 0; ci < d.cin; ++ci) {
            const float* plane = xpad.data() + static_cast<std::size_t>(ci) * hp * wp;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                double s = 0.0;
                for (int oy = 0; oy < d.ho; ++oy) {
                  const float* grow = gplane + static_cast<std::size_t>(oy) * d.wo;
                  const float* xrow = plane + static_cast<std::size_t>(oy * stride + ky) * wp + kx;
                  s += (stride == 1)
                           ? detail::dot_f32(grow, xrow, static_cast<std::size_t>(d.wo))
                           : detail::dot_strided_f32(grow, xrow, static_cast<std::size_t>(d.wo),
                                                     static_cast<std::size_t>(stride));
                }
                acc[((static_cast<std::size_t>(co) * d.cin + ci) * d.kh + ky) * d.kw + kx] += s;
              }
            }
          }
        }
      }
      for (std::size_t i = 0; i < dw.size(); ++i) pdw[i] = static_cast<float>(acc[i]);
      sink.add(nw, dw);
    }

    if (nb >= 0) {
      Tensor db({d.cout});
      for (int co = 0; co < d.cout; ++co) {
        double s = 0.0;
        for (int b = 0; b < d.batch; ++b) {
          const float* gplane = pg + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
          for (int i = 0; i < d.ho * d.wo; ++i) s += gplane[i];
        }
        db[static_cast<std::size_t>(co)] = static_cast<float>(s);
      }
      sink.add(nb, db);
    }
  });
}

// Transposed 2-D convolution; kernel layout (Cin, Cout, kh, kw).
inline Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor(),
                               int stride = 1, int pad = 1) {
  const detail::ConvDims d = detail::conv_dims("conv2d_transpose", x, w, bias, stride, pad, true);
  const int hb = (d.h - 1) * stride + d.kh, wb = (d.w - 1) * stride + d.kw;
  Tensor out({d.batch, d.cout, d.ho, d.wo});
  {
    const float* px = x.ptr();
    const float* pw = w.ptr();
    float* po = out.ptr();
    std::vector<double> obuf(static_cast<std::size_t>(d.cout) * hb * wb);
    for (int b = 0; b < d.batch; ++b) {
      std::fill(obuf.begin(), obuf.end(), 0.0);
      for (int ci = 0; ci < d.cin; ++ci) {
        const float* xplane = px + (static_cast<std::size_t>(b) * d.cin + ci) * d.h * d.w;
        for (int co = 0; co < d.cout; ++co) {
          double* oplane = obuf.data() + static_cast<std::size_t>(co) * hb * wb;
          for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
              const double wvv =
                  pw[((static_cast<std::size_t>(ci) * d.cout + co) * d.kh + ky) * d.kw + kx];
              if (wvv == 0.0) continue;
              for (int y = 0; y < d.h; ++y) {
                const float* xrow = xplane + static_cast<std::size_t>(y) * d.w;
                double* orow = oplane + static_cast<std::size_t>(y * stride + ky) * wb + kx;
                if (stride == 1) {
                  for (int x2 = 0; x2 < d.w; ++x2) orow[x2] += wvv * xrow[x2];
                } else {
                  for (int x2 = 0; x2 < d.w; ++x2) orow[x2 * stride] += wvv * xrow[x2];
                }
              }
            }
          }
        }
      }
      for (int co = 0; co < d.cout; ++co) {
        const double bv = bias.size() ? static_cast<double>(bias[static_cast<std::size_t>(co)]) : 0.0;
        const double* oplane = obuf.data() + static_cast<std::size_t>(co) * hb * wb;
        float* dst = po + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
        for (int oy = 0; oy < d.ho; ++oy)
          for (int ox = 0; ox < d.wo; ++ox)
            dst[static_cast<std::size_t>(oy) * d.wo + ox] =
                static_cast<float>(oplane[static_cast<std::size_t>(oy + pad) * wb + ox + pad] + bv);
      }
    }
  }

  GradTape* tape = detail::merge_tapes({&x, &w, &bias}, "conv2d_transpose");
  if (!tape) return out;
  Tensor xv = x.detached(), wv = w.detached();
  const int nx = x.node(), nw = w.node(), nb = bias.node();
  return tape->emit(std::move(out), {nx, nw, nb}, [xv, wv, nx, nw, nb, d, stride, pad](
                                                      const Tensor& g, GradTape::Accum& sink) {
    // Pad the output gradient so forward scatter becomes a gather.
    const int hgp = d.ho + 2 * pad, wgp = d.wo + 2 * pad;
    const float* pw = wv.ptr();
    std::vector<float> gpad;

    if (nx >= 0) {
      Tensor dx({d.batch, d.cin, d.h, d.w});
      float* pdx = dx.ptr();
      std::vector<float> acc(static_cast<std::size_t>(d.h) * d.w);
      for (int b = 0; b < d.batch; ++b) {
        detail::pad_planes(g.ptr() + static_cast<std::size_t>(b) * d.cout * d.ho * d.wo, d.cout,
                           d.ho, d.wo, pad, gpad);
        for (int ci = 0; ci < d.cin; ++ci) {
          std::fill(acc.begin(), acc.end(), 0.0f);
          for (int co = 0; co < d.cout; ++co) {
            const float* gplane = gpad.data() + static_cast<std::size_t>(co) * hgp * wgp;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                const float wvv =
                    pw[((static_cast<std::size_t>(ci) * d.cout + co) * d.kh + ky) * d.kw + kx];
                if (wvv == 0.0f) continue;
                for (int y = 0; y < d.h; ++y) {
                  const float* grow = gplane + static_cast<std::size_t>(y * stride + ky) * wgp + kx;
                  float* arow = acc.data() + static_cast<std::size_t>(y) * d.w;
                  if (stride == 1) {
                    for (int x2 = 0; x2 < d.w; ++x2) arow[x2] += wvv * grow[x2];
                  } else {
                    for (int x2 = 0; x2 < d.w; ++x2) arow[x2] += wvv * grow[x2 * stride];
                  }
                }
              }
            }
          }
          std::copy(acc.begin(), acc.end(),
                    pdx + (static_cast<std::size_t>(b) * d.cin + ci) * d.h * d.w);
        }
      }
      sink.add(nx, dx);
    }

    if (nw >= 0) {
      Tensor dwt({d.cin, d.cout, d.kh, d.kw});
      std::vector<double> acc(dwt.size());
      for (int b = 0; b < d.batch; ++b) {
        detail::pad_planes(g.ptr() + static_cast<std::size_t>(b) * d.cout * d.ho * d.wo, d.cout,
                           d.ho, d.wo, pad, gpad);
        for (int ci = 0; ci < d.cin; ++ci) {
          const float* xplane = xv.ptr() + (static_cast<std::size_t>(b) * d.cin + ci) * d.h * d.w;
          for (int co = 0; co < d.cout; ++co) {
            const float* gplane = gpad.data() + static_cast<std::size_t>(co) * hgp * wgp;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                double s = 0.0;
                for (int y = 0; y < d.h; ++y) {
                  const float* xrow = xplane + static_cast<std::size_t>(y) * d.w;
                  const float* grow = gplane + static_cast<std::size_t>(y * stride + ky) * wgp + kx;
                  s += (stride == 1)
                           ? detail::dot_f32(xrow, grow, static_cast<std::size_t>(d.w))
                           : detail::dot_strided_f32(xrow, grow, static_cast<std::size_t>(d.w),
                                                     static_cast<std::size_t>(stride));
                }
                acc[((static_cast<std::size_t>(ci) * d.cout + co) * d.kh + ky) * d.kw + kx] += s;
              }
            }
          }
        }
      }
      float* pdw = dwt.ptr();
      for (std::size_t i = 0; i < dwt.size(); ++i) pdw[i] = static_cast<float>(acc[i]);
      sink.add(nw, dwt);
    }

    if (nb >= 0) {
      Tensor db({d.cout});
      const float* pg = g.ptr();
      for (int co = 0; co < d.cout; ++co) {
        double s = 0.0;
        for (int b = 0; b < d.batch; ++b) {
          const float* gplane = pg + (static_cast<std::size_t>(b) * d.cout + co) * d.ho * d.wo;
          for (int i = 0; i < d.ho * d.wo; ++i) s += gplane[i];
        }
        db[static_cast<std::size_t>(co)] = static_cast<float>(s);
      }
      sink.add(nb, db);
    }
  });
}

// ---------------------------------------------------------------------------
// Random tensors
// ---------------------------------------------------------------------------

namespace detail {

inline float kaiming_std(int fan_in, float slope) {
  return std::sqrt(2.0f / (static_cast<float>(fan_in) * (1.0f + slope * slope)));
}

}  // namespace detail

inline Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f, float mean = 0.0f) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = mean + stddev * rng.normal();
  return t;
}

inline Tensor rand_uniform(Shape shape, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace nerfmark
