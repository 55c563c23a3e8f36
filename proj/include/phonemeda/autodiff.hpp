#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "phonemeda/error.hpp"
#include "phonemeda/rng.hpp"

namespace phonemeda::ad {

// Persistent value with optional gradient storage. Parameters outlive the
// tapes that read them; a tape only ever accumulates into grad.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(std::vector<int> s, bool rg = false) : shape(std::move(s)), requires_grad(rg) {
    data.assign(numel(), T(0));
    if (requires_grad) grad.assign(numel(), T(0));
  }

  size_t numel() const {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  void zero_grad() {
    if (requires_grad) grad.assign(numel(), T(0));
  }
};

// Running statistics for batch_norm; not differentiated.
template <typename T>
struct BatchNormBuffers {
  std::vector<T> mean;
  std::vector<T> var;

  explicit BatchNormBuffers(int channels = 0)
      : mean(static_cast<size_t>(channels), T(0)), var(static_cast<size_t>(channels), T(1)) {}
};

enum class OpKind {
  Leaf,
  Constant,
  Matmul,
  Conv2d,
  Add,
  Hadamard,
  Concat,
  Slice,
  LeakyRelu,
  Tanh,
  Sigmoid,
  Softmax,
  BatchNorm,
  Transpose,
  Sum,
  Scale,
  Log,
  Reshape,  // zero-cost relabeling of dims, same element order
};

const char* op_name(OpKind k);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Attributes for the generic apply() entry point. Typed builder methods fill
// the same fields internally.
template <typename T>
struct OpAttrs {
  T scalar = T(0);      // leaky slope / scale factor / log eps / bn eps
  T momentum = T(0.1);  // bn running-stat momentum
  int axis = 0;         // concat / slice
  int begin = 0, end = 0;
  int pad_h = 0, pad_w = 0;
  bool training = false;
  bool update_running = false;
  BatchNormBuffers<T>* bn = nullptr;
};

// Records operations in creation order; creation order is a valid topological
// order, so backward is a single reverse sweep. One tape per forward pass.
template <typename T>
class Tape {
 public:
  Var leaf(Tensor<T>& t);
  Var constant(std::vector<int> shape, std::vector<T> data);
  Var constant_fill(std::vector<int> shape, T fill);

  Var matmul(Var a, Var b);
  Var conv2d(Var x, Var kernel, Var bias, int pad_h, int pad_w);
  Var add(Var a, Var b);
  Var hadamard(Var a, Var b);
  Var concat(std::span<const Var> parts, int axis);
  std::pair<Var, Var> split(Var x, int axis, int boundary);
  Var slice(Var x, int axis, int begin, int end);
  Var leaky_relu(Var x, T slope = T(0.01));
  Var tanh_op(Var x);
  Var sigmoid(Var x);
  Var softmax(Var x);  // per row; rank-1 input treated as one row
  Var batch_norm(Var x, Var gamma, Var beta, BatchNormBuffers<T>* running, bool training,
                 bool update_running, T momentum = T(0.1), T eps = T(1e-5));
  Var transpose(Var x);
  Var sum(Var x);
  Var scale(Var x, T factor);
  Var log_op(Var x, T eps = T(0));
  Var reshape(Var x, std::vector<int> new_shape);

  // Dispatches on kind; the contract surface used by generic op tests.
  Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs<T>& attrs = {});

  void backward(Var loss, T seed = T(1));

  const std::vector<T>& value(Var v) const { return val(v.id); }
  const std::vector<int>& shape(Var v) const { return node(v.id).shape; }
  const std::vector<T>& grad(Var v) const { return node(v.id).grad; }
  size_t size() const { return nodes_.size(); }

  int argmax(Var v) const {
    const auto& x = val(v.id);
    int best = 0;
    for (size_t i = 1; i < x.size(); ++i)
      if (x[i] > x[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
  }

 private:
  struct Node {
    OpKind op = OpKind::Leaf;
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    std::array<int, 3> in{-1, -1, -1};
    std::vector<int> many;  // concat inputs
    T a = T(0);             // slope / factor / eps
    T b = T(0);             // momentum
    int i0 = 0, i1 = 0, i2 = 0;
    bool flag = false;          // bn training mode
    bool flag2 = false;         // bn running-stat update
    Tensor<T>* param = nullptr;
    BatchNormBuffers<T>* bn = nullptr;
    std::vector<T> aux;  // forward scratch reused by backward
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  const std::vector<T>& val(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.op == OpKind::Leaf ? n.param->data : n.value;
  }

  std::vector<T>& ensure_grad(int id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
    return n.grad;
  }

  static size_t numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) n *= static_cast<size_t>(d);
    return n;
  }

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  [[noreturn]] static void shape_error(const std::string& op, const std::string& detail) {
    raise(Err::ShapeMismatch, op + ": " + detail);
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }

  void check_rank2(const char* op, Var v) const {
    if (node(v.id).shape.size() != 2) shape_error(op, "expected rank-2, got " + shape_str(node(v.id).shape));
  }

  void backward_one(int id);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, int> leaf_cache_;
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Constant: return "constant";
    case OpKind::Matmul: return "matmul";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Add: return "add";
    case OpKind::Hadamard: return "hadamard";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Transpose: return "transpose";
    case OpKind::Sum: return "sum";
    case OpKind::Scale: return "scale";
    case OpKind::Log: return "log";
    case OpKind::Reshape: return "reshape";
  }
  return "?";
}

template <typename T>
Var Tape<T>::leaf(Tensor<T>& t) {
  auto it = leaf_cache_.find(&t);
  if (it != leaf_cache_.end()) return Var{it->second};
  Node n;
  n.op = OpKind::Leaf;
  n.shape = t.shape;
  n.param = &t;
  n.needs_grad = t.requires_grad;
  int id = push(std::move(n));
  leaf_cache_.emplace(&t, id);
  return Var{id};
}

template <typename T>
Var Tape<T>::constant(std::vector<int> shape, std::vector<T> data) {
  if (numel(shape) != data.size()) shape_error("constant", "data size does not match shape");
  Node n;
  n.op = OpKind::Constant;
  n.shape = std::move(shape);
  n.value = std::move(data);
  return Var{push(std::move(n))};
}

template <typename T>
Var Tape<T>::constant_fill(std::vector<int> shape, T fill) {
  std::vector<T> data(numel(shape), fill);
  return constant(std::move(shape), std::move(data));
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  check_rank2("matmul", a);
  check_rank2("matmul", b);
  const auto& sa = node(a.id).shape;
  const auto& sb = node(b.id).shape;
  if (sa[1] != sb[0])
    shape_error("matmul", "inner dims differ: " + shape_str(sa) + " * " + shape_str(sb));
  const int m = sa[0], k = sa[1], n2 = sb[1];

  Node out;
  out.op = OpKind::Matmul;
  out.shape = {m, n2};
  out.in = {a.id, b.id, -1};
  out.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  out.value.assign(static_cast<size_t>(m) * n2, T(0));
  const auto& va = val(a.id);
  const auto& vb = val(b.id);
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const T aik = va[static_cast<size_t>(i) * k + kk];
      if (aik == T(0)) continue;
      const size_t brow = static_cast<size_t>(kk) * n2;
      const size_t crow = static_cast<size_t>(i) * n2;
      for (int j = 0; j < n2; ++j) out.value[crow + j] += aik * vb[brow + j];
    }
  }
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::conv2d(Var x, Var kernel, Var bias, int pad_h, int pad_w) {
  const auto& sx = node(x.id).shape;
  const auto& sk = node(kernel.id).shape;
  if (sx.size() != 3) shape_error("conv2d", "input must be [C,H,W], got " + shape_str(sx));
  if (sk.size() != 4) shape_error("conv2d", "kernel must be [Cout,Cin,KH,KW], got " + shape_str(sk));
  const int ci = sx[0], h = sx[1], w = sx[2];
  const int co = sk[0], kci = sk[1], kh = sk[2], kw = sk[3];
  if (kci != ci) shape_error("conv2d", "kernel Cin " + std::to_string(kci) + " vs input C " + std::to_string(ci));
  const int ho = h + 2 * pad_h - kh + 1;
  const int wo = w + 2 * pad_w - kw + 1;
  if (ho < 1 || wo < 1) shape_error("conv2d", "kernel larger than padded input");
  if (bias.valid()) {
    const auto& sb = node(bias.id).shape;
    if (numel(sb) != static_cast<size_t>(co)) shape_error("conv2d", "bias size must equal Cout");
  }

  Node out;
  out.op = OpKind::Conv2d;
  out.shape = {co, ho, wo};
  out.in = {x.id, kernel.id, bias.valid() ? bias.id : -1};
  out.i0 = pad_h;
  out.i1 = pad_w;
  out.needs_grad = node(x.id).needs_grad || node(kernel.id).needs_grad ||
                   (bias.valid() && node(bias.id).needs_grad);
  out.value.assign(static_cast<size_t>(co) * ho * wo, T(0));

  const auto& vx = val(x.id);
  const auto& vk = val(kernel.id);
  for (int oc = 0; oc < co; ++oc) {
    const T b0 = bias.valid() ? val(bias.id)[static_cast<size_t>(oc)] : T(0);
    for (int io = 0; io < ho; ++io) {
      for (int jo = 0; jo < wo; ++jo) {
        T acc = b0;
        for (int ic = 0; ic < ci; ++ic) {
          for (int u = 0; u < kh; ++u) {
            const int xi = io + u - pad_h;
            if (xi < 0 || xi >= h) continue;
            for (int v = 0; v < kw; ++v) {
              const int xj = jo + v - pad_w;
              if (xj < 0 || xj >= w) continue;
              acc += vk[((static_cast<size_t>(oc) * ci + ic) * kh + u) * kw + v] *
                     vx[(static_cast<size_t>(ic) * h + xi) * static_cast<size_t>(w) + xj];
            }
          }
        }
        out.value[(static_cast<size_t>(oc) * ho + io) * static_cast<size_t>(wo) + jo] = acc;
      }
    }
  }
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  if (node(a.id).shape != node(b.id).shape)
    shape_error("add", shape_str(node(a.id).shape) + " vs " + shape_str(node(b.id).shape));
  Node out;
  out.op = OpKind::Add;
  out.shape = node(a.id).shape;
  out.in = {a.id, b.id, -1};
  out.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  const auto& va = val(a.id);
  const auto& vb = val(b.id);
  out.value.resize(va.size());
  for (size_t i = 0; i < va.size(); ++i) out.value[i] = va[i] + vb[i];
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::hadamard(Var a, Var b) {
  if (node(a.id).shape != node(b.id).shape)
    shape_error("hadamard", shape_str(node(a.id).shape) + " vs " + shape_str(node(b.id).shape));
  Node out;
  out.op = OpKind::Hadamard;
  out.shape = node(a.id).shape;
  out.in = {a.id, b.id, -1};
  out.needs_grad = node(a.id).needs_grad || node(b.id).needs_grad;
  const auto& va = val(a.id);
  const auto& vb = val(b.id);
  out.value.resize(va.size());
  for (size_t i = 0; i < va.size(); ++i) out.value[i] = va[i] * vb[i];
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const auto& first = node(parts[0].id).shape;
  const int rank = static_cast<int>(first.size());
  if (axis < 0 || axis >= rank) shape_error("concat", "axis out of range");
  int axis_total = 0;
  bool needs = false;
  for (Var p : parts) {
    const auto& s = node(p.id).shape;
    if (static_cast<int>(s.size()) != rank) shape_error("concat", "rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[static_cast<size_t>(d)] != first[static_cast<size_t>(d)])
        shape_error("concat", "non-axis dims differ: " + shape_str(first) + " vs " + shape_str(s));
    axis_total += s[static_cast<size_t>(axis)];
    needs |= node(p.id).needs_grad;
  }

  Node out;
  out.op = OpKind::Concat;
  out.shape = first;
  out.shape[static_cast<size_t>(axis)] = axis_total;
  out.i0 = axis;
  out.needs_grad = needs;
  for (Var p : parts) out.many.push_back(p.id);

  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(first[static_cast<size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(first[static_cast<size_t>(d)]);

  out.value.resize(numel(out.shape));
  size_t axis_off = 0;
  for (Var p : parts) {
    const auto& s = node(p.id).shape;
    const size_t ax = static_cast<size_t>(s[static_cast<size_t>(axis)]);
    const auto& vp = val(p.id);
    for (size_t o = 0; o < outer; ++o) {
      const size_t src = o * ax * inner;
      const size_t dst = (o * static_cast<size_t>(axis_total) + axis_off) * inner;
      for (size_t i = 0; i < ax * inner; ++i) out.value[dst + i] = vp[src + i];
    }
    axis_off += ax;
  }
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::slice(Var x, int axis, int begin, int end) {
  const auto& sx = node(x.id).shape;
  const int rank = static_cast<int>(sx.size());
  if (axis < 0 || axis >= rank) shape_error("slice", "axis out of range");
  const int ax = sx[static_cast<size_t>(axis)];
  if (!(0 <= begin && begin < end && end <= ax))
    shape_error("slice", "bounds [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for axis size " + std::to_string(ax));

  Node out;
  out.op = OpKind::Slice;
  out.shape = sx;
  out.shape[static_cast<size_t>(axis)] = end - begin;
  out.in = {x.id, -1, -1};
  out.i0 = axis;
  out.i1 = begin;
  out.i2 = end;
  out.needs_grad = node(x.id).needs_grad;

  size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(sx[static_cast<size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(sx[static_cast<size_t>(d)]);

  const auto& vx = val(x.id);
  out.value.resize(numel(out.shape));
  const size_t span = static_cast<size_t>(end - begin) * inner;
  for (size_t o = 0; o < outer; ++o) {
    const size_t src = (o * static_cast<size_t>(ax) + static_cast<size_t>(begin)) * inner;
    for (size_t i = 0; i < span; ++i) out.value[o * span + i] = vx[src + i];
  }
  return Var{push(std::move(out))};
}

template <typename T>
std::pair<Var, Var> Tape<T>::split(Var x, int axis, int boundary) {
  const auto& sx = node(x.id).shape;
  if (axis < 0 || axis >= static_cast<int>(sx.size())) shape_error("split", "axis out of range");
  const int ax = sx[static_cast<size_t>(axis)];
  if (!(0 < boundary && boundary < ax)) shape_error("split", "boundary must fall inside the axis");
  return {slice(x, axis, 0, boundary), slice(x, axis, boundary, ax)};
}

template <typename T>
Var Tape<T>::leaky_relu(Var x, T slope) {
  Node out;
  out.op = OpKind::LeakyRelu;
  out.shape = node(x.id).shape;
  out.in = {x.id, -1, -1};
  out.a = slope;
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out.value[i] = vx[i] > T(0) ? vx[i] : slope * vx[i];
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::tanh_op(Var x) {
  Node out;
  out.op = OpKind::Tanh;
  out.shape = node(x.id).shape;
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out.value[i] = std::tanh(vx[i]);
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::sigmoid(Var x) {
  Node out;
  out.op = OpKind::Sigmoid;
  out.shape = node(x.id).shape;
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out.value[i] = T(1) / (T(1) + std::exp(-vx[i]));
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::softmax(Var x) {
  const auto& sx = node(x.id).shape;
  if (sx.size() != 1 && sx.size() != 2) shape_error("softmax", "rank must be 1 or 2");
  const int cols = sx.back();
  const int rows = sx.size() == 2 ? sx[0] : 1;

  Node out;
  out.op = OpKind::Softmax;
  out.shape = sx;
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * cols;
    T mx = vx[off];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, vx[off + static_cast<size_t>(c)]);
    T denom = T(0);
    for (int c = 0; c < cols; ++c) {
      const T e = std::exp(vx[off + static_cast<size_t>(c)] - mx);
      out.value[off + static_cast<size_t>(c)] = e;
      denom += e;
    }
    for (int c = 0; c < cols; ++c) out.value[off + static_cast<size_t>(c)] /= denom;
  }
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::batch_norm(Var x, Var gamma, Var beta, BatchNormBuffers<T>* running, bool training,
                        bool update_running, T momentum, T eps) {
  // channels on axis 0, statistics over everything behind it
  const auto& sx = node(x.id).shape;
  if (sx.size() < 2) shape_error("batch_norm", "input must be [C, ...], got " + shape_str(sx));
  const int channels = sx[0];
  const int m = static_cast<int>(numel(sx)) / channels;
  if (numel(node(gamma.id).shape) != static_cast<size_t>(channels) ||
      numel(node(beta.id).shape) != static_cast<size_t>(channels))
    shape_error("batch_norm", "gamma/beta must have one entry per channel");
  if (running == nullptr) shape_error("batch_norm", "running buffers required");
  if (running->mean.size() != static_cast<size_t>(channels))
    shape_error("batch_norm", "running buffer channel count mismatch");

  Node out;
  out.op = OpKind::BatchNorm;
  out.shape = sx;
  out.in = {x.id, gamma.id, beta.id};
  out.a = eps;
  out.b = momentum;
  out.flag = training;
  out.flag2 = update_running;
  out.bn = running;
  out.needs_grad = node(x.id).needs_grad || node(gamma.id).needs_grad || node(beta.id).needs_grad;

  const auto& vx = val(x.id);
  const auto& vg = val(gamma.id);
  const auto& vb = val(beta.id);
  out.value.resize(vx.size());
  // aux layout: xhat (C*M) then invstd (C)
  out.aux.resize(vx.size() + static_cast<size_t>(channels));

  for (int c = 0; c < channels; ++c) {
    const size_t off = static_cast<size_t>(c) * m;
    T batch_mean = T(0), batch_var = T(0);
    if (training || update_running) {
      T s = T(0);
      for (int i = 0; i < m; ++i) s += vx[off + static_cast<size_t>(i)];
      batch_mean = s / static_cast<T>(m);
      T sv = T(0);
      for (int i = 0; i < m; ++i) {
        const T d = vx[off + static_cast<size_t>(i)] - batch_mean;
        sv += d * d;
      }
      batch_var = sv / static_cast<T>(m);  // biased
      if (update_running) {
        const T unbiased = m > 1 ? sv / static_cast<T>(m - 1) : batch_var;
        running->mean[static_cast<size_t>(c)] =
            (T(1) - momentum) * running->mean[static_cast<size_t>(c)] + momentum * batch_mean;
        running->var[static_cast<size_t>(c)] =
            (T(1) - momentum) * running->var[static_cast<size_t>(c)] + momentum * unbiased;
      }
    }
    T mean, var;
    if (training) {
      mean = batch_mean;
      var = batch_var;
    } else {
      // running statistics; when update_running is also set this realizes
      // streaming normalization (stats from the samples seen so far)
      mean = running->mean[static_cast<size_t>(c)];
      var = running->var[static_cast<size_t>(c)];
    }
    const T invstd = T(1) / std::sqrt(var + eps);
    out.aux[vx.size() + static_cast<size_t>(c)] = invstd;
    for (int i = 0; i < m; ++i) {
      const T xh = (vx[off + static_cast<size_t>(i)] - mean) * invstd;
      out.aux[off + static_cast<size_t>(i)] = xh;
      out.value[off + static_cast<size_t>(i)] = vg[static_cast<size_t>(c)] * xh + vb[static_cast<size_t>(c)];
    }
  }
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::transpose(Var x) {
  check_rank2("transpose", x);
  const auto& sx = node(x.id).shape;
  const int m = sx[0], n2 = sx[1];
  Node out;
  out.op = OpKind::Transpose;
  out.shape = {n2, m};
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n2; ++j)
      out.value[static_cast<size_t>(j) * m + i] = vx[static_cast<size_t>(i) * n2 + j];
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::sum(Var x) {
  Node out;
  out.op = OpKind::Sum;
  out.shape = {1};
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  T acc = T(0);
  for (T v : vx) acc += v;
  out.value = {acc};
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::scale(Var x, T factor) {
  Node out;
  out.op = OpKind::Scale;
  out.shape = node(x.id).shape;
  out.in = {x.id, -1, -1};
  out.a = factor;
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out.value[i] = factor * vx[i];
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::log_op(Var x, T eps) {
  Node out;
  out.op = OpKind::Log;
  out.shape = node(x.id).shape;
  out.in = {x.id, -1, -1};
  out.a = eps;
  out.needs_grad = node(x.id).needs_grad;
  const auto& vx = val(x.id);
  out.value.resize(vx.size());
  for (size_t i = 0; i < vx.size(); ++i) out.value[i] = std::log(std::max(vx[i], eps));
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::reshape(Var x, std::vector<int> new_shape) {
  if (numel(new_shape) != numel(node(x.id).shape))
    shape_error("reshape", shape_str(node(x.id).shape) + " -> " + shape_str(new_shape) +
                               " changes element count");
  Node out;
  out.op = OpKind::Reshape;
  out.shape = std::move(new_shape);
  out.in = {x.id, -1, -1};
  out.needs_grad = node(x.id).needs_grad;
  out.value = val(x.id);
  return Var{push(std::move(out))};
}

template <typename T>
Var Tape<T>::apply(OpKind kind, std::span<const Var> in, const OpAttrs<T>& at) {
  auto need = [&](size_t n) {
    if (in.size() != n)
      shape_error(op_name(kind), "expected " + std::to_string(n) + " inputs, got " +
                                     std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::Matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::Conv2d:
      if (in.size() == 3) return conv2d(in[0], in[1], in[2], at.pad_h, at.pad_w);
      need(2);
      return conv2d(in[0], in[1], Var{}, at.pad_h, at.pad_w);
    case OpKind::Add: need(2); return add(in[0], in[1]);
    case OpKind::Hadamard: need(2); return hadamard(in[0], in[1]);
    case OpKind::Concat: return concat(in, at.axis);
    case OpKind::Slice: need(1); return slice(in[0], at.axis, at.begin, at.end);
    case OpKind::LeakyRelu: need(1); return leaky_relu(in[0], at.scalar);
    case OpKind::Tanh: need(1); return tanh_op(in[0]);
    case OpKind::Sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::Softmax: need(1); return softmax(in[0]);
    case OpKind::BatchNorm:
      need(3);
      return batch_norm(in[0], in[1], in[2], at.bn, at.training, at.update_running, at.momentum,
                        at.scalar);
    case OpKind::Transpose: need(1); return transpose(in[0]);
    case OpKind::Sum: need(1); return sum(in[0]);
    case OpKind::Scale: need(1); return scale(in[0], at.scalar);
    case OpKind::Log: need(1); return log_op(in[0], at.scalar);
    case OpKind::Leaf:
    case OpKind::Constant:
    case OpKind::Reshape:
      break;
  }
  shape_error(op_name(kind), "not applicable through apply()");
}

template <typename T>
void Tape<T>::backward(Var loss, T seed) {
  if (!loss.valid() || numel(node(loss.id).shape) != 1)
    raise(Err::NonScalarLoss, "backward requires a scalar loss node");
  ensure_grad(loss.id)[0] += seed;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.needs_grad || n.grad.empty()) continue;
    backward_one(id);
  }
}

template <typename T>
void Tape<T>::backward_one(int id) {
  Node& n = node(id);
  const auto& g = n.grad;

  auto in_grad = [&](int slot) -> std::vector<T>* {
    const int src = n.in[static_cast<size_t>(slot)];
    if (src < 0 || !node(src).needs_grad) return nullptr;
    return &ensure_grad(src);
  };

  switch (n.op) {
    case OpKind::Leaf: {
      Tensor<T>& p = *n.param;
      if (p.requires_grad) {
        if (p.grad.empty()) p.grad.assign(p.numel(), T(0));
        for (size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      }
      break;
    }
    case OpKind::Constant:
      break;
    case OpKind::Matmul: {
      const auto& sa = node(n.in[0]).shape;
      const auto& sb = node(n.in[1]).shape;
      const int m = sa[0], k = sa[1], n2 = sb[1];
      const auto& va = val(n.in[0]);
      const auto& vb = val(n.in[1]);
      if (auto* da = in_grad(0)) {
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            T acc = T(0);
            const size_t crow = static_cast<size_t>(i) * n2;
            const size_t brow = static_cast<size_t>(kk) * n2;
            for (int j = 0; j < n2; ++j) acc += g[crow + j] * vb[brow + j];
            (*da)[static_cast<size_t>(i) * k + kk] += acc;
          }
      }
      if (auto* db = in_grad(1)) {
        // dB = A^T * dC
        for (int i = 0; i < m; ++i) {
          const size_t arow = static_cast<size_t>(i) * k;
          const size_t crow = static_cast<size_t>(i) * n2;
          for (int kk = 0; kk < k; ++kk) {
            const T aik = va[arow + kk];
            if (aik == T(0)) continue;
            const size_t bro = static_cast<size_t>(kk) * n2;
            for (int j = 0; j < n2; ++j) (*db)[bro + j] += aik * g[crow + j];
          }
        }
      }
      break;
    }
    case OpKind::Conv2d: {
      const auto& sx = node(n.in[0]).shape;
      const auto& sk = node(n.in[1]).shape;
      const int ci = sx[0], h = sx[1], w = sx[2];
      const int co = sk[0], kh = sk[2], kw = sk[3];
      const int ho = n.shape[1], wo = n.shape[2];
      const int ph = n.i0, pw = n.i1;
      const auto& vx = val(n.in[0]);
      const auto& vk = val(n.in[1]);
      auto* dx = in_grad(0);
      auto* dk = in_grad(1);
      auto* db = n.in[2] >= 0 ? in_grad(2) : nullptr;
      for (int oc = 0; oc < co; ++oc) {
        for (int io = 0; io < ho; ++io) {
          for (int jo = 0; jo < wo; ++jo) {
            const T gv = g[(static_cast<size_t>(oc) * ho + io) * static_cast<size_t>(wo) + jo];
            if (gv == T(0)) continue;
            if (db) (*db)[static_cast<size_t>(oc)] += gv;
            for (int ic = 0; ic < ci; ++ic) {
              for (int u = 0; u < kh; ++u) {
                const int xi = io + u - ph;
                if (xi < 0 || xi >= h) continue;
                for (int v = 0; v < kw; ++v) {
                  const int xj = jo + v - pw;
                  if (xj < 0 || xj >= w) continue;
                  const size_t kidx = ((static_cast<size_t>(oc) * ci + ic) * kh + u) * kw + v;
                  const size_t xidx = (static_cast<size_t>(ic) * h + xi) * static_cast<size_t>(w) + xj;
                  if (dk) (*dk)[kidx] += gv * vx[xidx];
                  if (dx) (*dx)[xidx] += gv * vk[kidx];
                }
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::Add: {
      if (auto* da = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
      if (auto* db = in_grad(1))
        for (size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
      break;
    }
    case OpKind::Hadamard: {
      const auto& va = val(n.in[0]);
      const auto& vb = val(n.in[1]);
      if (auto* da = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * vb[i];
      if (auto* db = in_grad(1))
        for (size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * va[i];
      break;
    }
    case OpKind::Concat: {
      const int axis = n.i0;
      const int rank = static_cast<int>(n.shape.size());
      size_t outer = 1, inner = 1;
      for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(n.shape[static_cast<size_t>(d)]);
      for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(n.shape[static_cast<size_t>(d)]);
      const size_t axis_total = static_cast<size_t>(n.shape[static_cast<size_t>(axis)]);
      size_t axis_off = 0;
      for (int src : n.many) {
        const size_t ax = static_cast<size_t>(node(src).shape[static_cast<size_t>(axis)]);
        if (node(src).needs_grad) {
          auto& dsrc = ensure_grad(src);
          for (size_t o = 0; o < outer; ++o) {
            const size_t from = (o * axis_total + axis_off) * inner;
            const size_t to = o * ax * inner;
            for (size_t i = 0; i < ax * inner; ++i) dsrc[to + i] += g[from + i];
          }
        }
        axis_off += ax;
      }
      break;
    }
    case OpKind::Slice: {
      if (auto* dx = in_grad(0)) {
        const auto& sx = node(n.in[0]).shape;
        const int axis = n.i0, begin = n.i1;
        const int rank = static_cast<int>(sx.size());
        size_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= static_cast<size_t>(sx[static_cast<size_t>(d)]);
        for (int d = axis + 1; d < rank; ++d) inner *= static_cast<size_t>(sx[static_cast<size_t>(d)]);
        const size_t ax = static_cast<size_t>(sx[static_cast<size_t>(axis)]);
        const size_t span = static_cast<size_t>(n.shape[static_cast<size_t>(axis)]) * inner;
        for (size_t o = 0; o < outer; ++o) {
          const size_t dst = (o * ax + static_cast<size_t>(begin)) * inner;
          for (size_t i = 0; i < span; ++i) (*dx)[dst + i] += g[o * span + i];
        }
      }
      break;
    }
    case OpKind::LeakyRelu: {
      if (auto* dx = in_grad(0)) {
        const auto& vx = val(n.in[0]);
        for (size_t i = 0; i < g.size(); ++i)
          (*dx)[i] += g[i] * (vx[i] > T(0) ? T(1) : n.a);
      }
      break;
    }
    case OpKind::Tanh: {
      if (auto* dx = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * (T(1) - n.value[i] * n.value[i]);
      break;
    }
    case OpKind::Sigmoid: {
      if (auto* dx = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * n.value[i] * (T(1) - n.value[i]);
      break;
    }
    case OpKind::Softmax: {
      if (auto* dx = in_grad(0)) {
        const int cols = n.shape.back();
        const int rows = n.shape.size() == 2 ? n.shape[0] : 1;
        for (int r = 0; r < rows; ++r) {
          const size_t off = static_cast<size_t>(r) * cols;
          T dot = T(0);
          for (int c = 0; c < cols; ++c) dot += g[off + static_cast<size_t>(c)] * n.value[off + static_cast<size_t>(c)];
          for (int c = 0; c < cols; ++c)
            (*dx)[off + static_cast<size_t>(c)] +=
                n.value[off + static_cast<size_t>(c)] * (g[off + static_cast<size_t>(c)] - dot);
        }
      }
      break;
    }
    case OpKind::BatchNorm: {
      const int channels = n.shape[0];
      const int m = static_cast<int>(numel(n.shape)) / channels;
      const auto& vg = val(n.in[1]);
      auto* dx = in_grad(0);
      auto* dgamma = in_grad(1);
      auto* dbeta = in_grad(2);
      const size_t xh_off = 0;
      const size_t inv_off = static_cast<size_t>(channels) * m;
      for (int c = 0; c < channels; ++c) {
        const size_t off = static_cast<size_t>(c) * m;
        const T invstd = n.aux[inv_off + static_cast<size_t>(c)];
        T sum_dy = T(0), sum_dy_xh = T(0);
        for (int i = 0; i < m; ++i) {
          const T dy = g[off + static_cast<size_t>(i)];
          sum_dy += dy;
          sum_dy_xh += dy * n.aux[xh_off + off + static_cast<size_t>(i)];
        }
        if (dgamma) (*dgamma)[static_cast<size_t>(c)] += sum_dy_xh;
        if (dbeta) (*dbeta)[static_cast<size_t>(c)] += sum_dy;
        if (dx) {
          const T gamma_c = vg[static_cast<size_t>(c)];
          if (n.flag) {
            const T inv_m = T(1) / static_cast<T>(m);
            for (int i = 0; i < m; ++i) {
              const T dy = g[off + static_cast<size_t>(i)];
              const T xh = n.aux[xh_off + off + static_cast<size_t>(i)];
              (*dx)[off + static_cast<size_t>(i)] +=
                  gamma_c * invstd * (dy - inv_m * sum_dy - xh * inv_m * sum_dy_xh);
            }
          } else {
            for (int i = 0; i < m; ++i)
              (*dx)[off + static_cast<size_t>(i)] += gamma_c * invstd * g[off + static_cast<size_t>(i)];
          }
        }
      }
      break;
    }
    case OpKind::Transpose: {
      if (auto* dx = in_grad(0)) {
        const int m = n.shape[0], n2 = n.shape[1];  // transposed dims
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n2; ++j)
            (*dx)[static_cast<size_t>(j) * m + i] += g[static_cast<size_t>(i) * n2 + j];
      }
      break;
    }
    case OpKind::Sum: {
      if (auto* dx = in_grad(0)) {
        const T gv = g[0];
        for (auto& d : *dx) d += gv;
      }
      break;
    }
    case OpKind::Scale: {
      if (auto* dx = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * n.a;
      break;
    }
    case OpKind::Log: {
      if (auto* dx = in_grad(0)) {
        const auto& vx = val(n.in[0]);
        for (size_t i = 0; i < g.size(); ++i)
          if (vx[i] >= n.a && vx[i] > T(0)) (*dx)[i] += g[i] / vx[i];
      }
      break;
    }
    case OpKind::Reshape: {
      if (auto* dx = in_grad(0))
        for (size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Central finite-difference gradient checking.

struct GradCheckReport {
  double max_rel_error = 0.0;
  size_t coords_checked = 0;
  bool pass = false;
  std::string worst;  // "tensor#/coord" of the worst coordinate
};

// fn builds a scalar graph on the given tape from the supplied tensors.
// Large tensors are subsampled (up to max_coords coordinates, seeded).
template <typename T, typename Fn>
GradCheckReport grad_check(Fn&& fn, std::span<Tensor<T>*> inputs, T step, double tol,
                           int max_coords = 200, uint64_t seed = 7) {
  // analytic pass
  for (auto* t : inputs) t->zero_grad();
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    Var loss = fn(tape);
    if (tape.shape(loss).size() != 1 || tape.shape(loss)[0] != 1)
      raise(Err::NonScalarLoss, "grad_check requires a scalar function");
    tape.backward(loss);
  }
  for (auto* t : inputs) analytic.push_back(t->grad);

  auto eval = [&]() -> double {
    Tape<T> tape;
    Var loss = fn(tape);
    return static_cast<double>(tape.value(loss)[0]);
  };

  GradCheckReport report;
  report.max_rel_error = 0.0;
  Rng rng(seed);
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor<T>& t = *inputs[ti];
    if (!t.requires_grad) continue;
    std::vector<size_t> coords;
    if (static_cast<int>(t.numel()) <= max_coords) {
      coords.resize(t.numel());
      for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      for (int i = 0; i < max_coords; ++i) coords.push_back(rng.below(t.numel()));
    }
    for (size_t c : coords) {
      const T saved = t.data[c];
      t.data[c] = saved + step;
      const double f_plus = eval();
      t.data[c] = saved - step;
      const double f_minus = eval();
      t.data[c] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * static_cast<double>(step));
      const double a = static_cast<double>(analytic[ti][c]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-3});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = "tensor" + std::to_string(ti) + "/" + std::to_string(c);
      }
      ++report.coords_checked;
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace phonemeda::ad
