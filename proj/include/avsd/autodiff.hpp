// Copyright 2026  The avsd Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Reverse-mode automatic differentiation over dense Tensors.
//
// A Tape records every operation in execution order, so the node list is
// already a topological order of the computation graph. Backward() walks it
// in reverse and accumulates gradients into each node's inputs. A Tape is
// per-call state: concurrent callers each build their own.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "avsd/error.hpp"
#include "avsd/tensor.hpp"

namespace avsd::ad {

enum class OpKind {
  kInput,
  kParam,
  kMatMul,
  kMatMulNT,
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRow,
  kAddConst,
  kMulConst,
  kRelu,
  kGelu,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kInstanceNorm,
  kConcatCols,
  kSliceCols,
  kSelectRows,
  kReplaceRows,
  kEmbedding,
  kConv2d,
  kPoolGrid,
  kConv1d,
  kReshape,
  kSum,
  kMean,
  kStopGradient,
  kSoftCrossEntropy,
  kCtc,
};

inline const char* OpName(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kAddConst: return "add_const";
    case OpKind::kMulConst: return "mul_const";
    case OpKind::kRelu: return "relu";
    case OpKind::kGelu: return "gelu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kInstanceNorm: return "instance_norm";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kSelectRows: return "select_rows";
    case OpKind::kReplaceRows: return "replace_rows";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kPoolGrid: return "pool_grid";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kStopGradient: return "stop_gradient";
    case OpKind::kSoftCrossEntropy: return "soft_cross_entropy";
    case OpKind::kCtc: return "ctc";
  }
  return "?";
}

/// Stabilizer used inside every normalization.
inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kInvSqrt2 = 1.0 / std::numbers::sqrt2;

class Tape;

/// Handle to a node on a Tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Node {
    OpKind op;
    std::string name;
    std::vector<int> inputs;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  /// With record_gradients = false no backward closures are kept; use this
  /// for inference.
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var Input(Tensor value, std::string name = {}) {
    return Leaf(OpKind::kInput, std::move(value), std::move(name), false);
  }

  Var Param(Tensor value, std::string name) {
    return Leaf(OpKind::kParam, std::move(value), std::move(name), record_);
  }

  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  const Tensor& value(Var v) const { return node(v.id).value; }
  bool requires_grad(Var v) const { return node(v.id).requires_grad; }

  /// Gradient accumulated for v by the last Backward(); zeros if none flowed.
  Tensor Grad(Var v) const {
    const Node& n = node(v.id);
    if (n.grad.empty() && !n.value.empty()) return Tensor(n.value.shape());
    return n.grad;
  }

  /// Adds a computed node. Internal to op implementations.
  Var Push(OpKind op, std::vector<int> inputs, Tensor value, BackwardFn fn) {
    bool rg = false;
    if (record_)
      for (int i : inputs) rg = rg || nodes_[static_cast<std::size_t>(i)].requires_grad;
    if (!value.AllFinite())
      throw NumericError(Describe(op, static_cast<int>(nodes_.size())) +
                         ": non-finite output");
    Node n{op, {}, std::move(inputs), std::move(value), {}, rg, {}};
    if (rg) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Mutable gradient buffer of node id, allocated on first use.
  Tensor& GradBuffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool NeedsGrad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every node.
  void Backward(Var loss) {
    const Node& l = node(loss.id);
    if (l.value.size() != 1)
      throw ShapeError(Describe(l.op, loss.id) + ": Backward needs a scalar loss, got " +
                       ShapeString(l.value.shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    if (!l.requires_grad) return;
    GradBuffer(loss.id)[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  std::string Describe(OpKind op, int id) const {
    std::string s = std::string("node #") + std::to_string(id) + " (" + OpName(op);
    if (id >= 0 && static_cast<std::size_t>(id) < nodes_.size() &&
        !nodes_[static_cast<std::size_t>(id)].name.empty())
      s += " '" + nodes_[static_cast<std::size_t>(id)].name + "'";
    return s + ")";
  }

  [[noreturn]] void Fail(OpKind op, const std::string& msg) const {
    throw ShapeError(Describe(op, static_cast<int>(nodes_.size())) + ": " + msg);
  }

 private:
  Var Leaf(OpKind op, Tensor value, std::string name, bool rg) {
    if (!value.AllFinite())
      throw NumericError("non-finite " + std::string(OpName(op)) + " '" + name + "'");
    nodes_.push_back(Node{op, std::move(name), {}, std::move(value), {}, rg, {}});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

// C += A(m×k) · B(k×n)
inline void GemmNN(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A(m×k) · B(n×k)^T
inline void GemmNT(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// C += A(k×m)^T · B(k×n)
inline void GemmTN(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

inline void Accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

inline void RequireRank(const Tape& tape, OpKind op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    tape.Fail(op, "expected rank " + std::to_string(rank) + ", got " + ShapeString(t.shape()));
}

inline void RequireSameShape(const Tape& tape, OpKind op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    tape.Fail(op, "shape mismatch " + ShapeString(a.shape()) + " vs " + ShapeString(b.shape()));
}

inline void RequireSameTape(Var a, Var b) {
  if (a.tape != b.tape) throw ShapeError("operands live on different tapes");
}

inline double LogAdd(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

}  // namespace detail

using detail::LogAdd;

// ---------------------------------------------------------------------------
// Linear algebra

inline Var MatMul(Var a, Var b) {
  detail::RequireSameTape(a, b);
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::RequireRank(t, OpKind::kMatMul, A, 2);
  detail::RequireRank(t, OpKind::kMatMul, B, 2);
  if (A.cols() != B.rows())
    t.Fail(OpKind::kMatMul, "inner dims " + ShapeString(A.shape()) + " x " + ShapeString(B.shape()));
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor C = Tensor::Matrix(m, n);
  detail::GemmNN(A.data(), B.data(), C.data(), m, k, n);
  return t.Push(OpKind::kMatMul, {a.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(a.id))
      detail::GemmNT(G.data(), tp.node(b.id).value.data(), tp.GradBuffer(a.id).data(), m, n, k);
    if (tp.NeedsGrad(b.id))
      detail::GemmTN(tp.node(a.id).value.data(), G.data(), tp.GradBuffer(b.id).data(), k, m, n);
  });
}

/// a · bᵀ with a: m×k, b: n×k.
inline Var MatMulNT(Var a, Var b) {
  detail::RequireSameTape(a, b);
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  detail::RequireRank(t, OpKind::kMatMulNT, A, 2);
  detail::RequireRank(t, OpKind::kMatMulNT, B, 2);
  if (A.cols() != B.cols())
    t.Fail(OpKind::kMatMulNT, "inner dims " + ShapeString(A.shape()) + " x " + ShapeString(B.shape()) + "^T");
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor C = Tensor::Matrix(m, n);
  detail::GemmNT(A.data(), B.data(), C.data(), m, k, n);
  return t.Push(OpKind::kMatMulNT, {a.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(a.id))
      detail::GemmNN(G.data(), tp.node(b.id).value.data(), tp.GradBuffer(a.id).data(), m, n, k);
    if (tp.NeedsGrad(b.id))
      detail::GemmTN(G.data(), tp.node(a.id).value.data(), tp.GradBuffer(b.id).data(), n, m, k);
  });
}

inline Var Transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = a.value();
  detail::RequireRank(t, OpKind::kTranspose, A, 2);
  const std::size_t m = A.rows(), n = A.cols();
  Tensor C = Tensor::Matrix(n, m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C(j, i) = A(i, j);
  return t.Push(OpKind::kTranspose, {a.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& ga = tp.GradBuffer(a.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, j) += G(j, i);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var Add(Var a, Var b) {
  detail::RequireSameTape(a, b);
  Tape& t = *a.tape;
  detail::RequireSameShape(t, OpKind::kAdd, a.value(), b.value());
  Tensor C = a.value();
  detail::Accumulate(C, b.value());
  return t.Push(OpKind::kAdd, {a.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(a.id)) detail::Accumulate(tp.GradBuffer(a.id), G);
    if (tp.NeedsGrad(b.id)) detail::Accumulate(tp.GradBuffer(b.id), G);
  });
}

inline Var Sub(Var a, Var b) {
  detail::RequireSameTape(a, b);
  Tape& t = *a.tape;
  detail::RequireSameShape(t, OpKind::kSub, a.value(), b.value());
  Tensor C = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
  return t.Push(OpKind::kSub, {a.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(a.id)) detail::Accumulate(tp.GradBuffer(a.id), G);
    if (tp.NeedsGrad(b.id)) {
      Tensor& gb = tp.GradBuffer(b.id);
      for (std::size_t i = 0; i < G.size(); ++i) gb[i] -= G[i];
    }
  });
}

inline Var Mul(Var a, Var b) {
  detail::RequireSameTape(a, b);
  Tape& t = *a.tape;
  detail::RequireSameShape(t, OpKind::kMul, a.value(), b.value());
  Tensor C = a.value();
  const Tensor& B = b.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
  return t.Push(OpKind::kMul, {a.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& A = tp.node(a.id).value;
    const Tensor& Bv = tp.node(b.id).value;
    if (tp.NeedsGrad(a.id)) {
      Tensor& ga = tp.GradBuffer(a.id);
      for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * Bv[i];
    }
    if (tp.NeedsGrad(b.id)) {
      Tensor& gb = tp.GradBuffer(b.id);
      for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * A[i];
    }
  });
}

inline Var Scale(Var a, double s) {
  Tensor C = a.value();
  for (double& v : C.vec()) v *= s;
  return a.tape->Push(OpKind::kScale, {a.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& ga = tp.GradBuffer(a.id);
    for (std::size_t i = 0; i < G.size(); ++i) ga[i] += s * G[i];
  });
}

/// x (m×n) plus a row vector b (n or 1×n) broadcast over rows.
inline Var AddRow(Var x, Var b) {
  detail::RequireSameTape(x, b);
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kAddRow, X, 2);
  const std::size_t m = X.rows(), n = X.cols();
  if (b.value().size() != n)
    t.Fail(OpKind::kAddRow, "bias " + ShapeString(b.shape()) + " vs " + ShapeString(X.shape()));
  Tensor C = X;
  const double* bv = b.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C(i, j) += bv[j];
  return t.Push(OpKind::kAddRow, {x.id, b.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(x.id)) detail::Accumulate(tp.GradBuffer(x.id), G);
    if (tp.NeedsGrad(b.id)) {
      double* gb = tp.GradBuffer(b.id).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += G(i, j);
    }
  });
}

/// x + c where c is a constant of the same shape (e.g. an attention mask).
inline Var AddConst(Var x, const Tensor& c) {
  detail::RequireSameShape(*x.tape, OpKind::kAddConst, x.value(), c);
  Tensor C = x.value();
  detail::Accumulate(C, c);
  return x.tape->Push(OpKind::kAddConst, {x.id}, std::move(C), [=](Tape& tp, int self) {
    detail::Accumulate(tp.GradBuffer(x.id), tp.node(self).grad);
  });
}

/// Elementwise x * c with c constant.
inline Var MulConst(Var x, const Tensor& c) {
  detail::RequireSameShape(*x.tape, OpKind::kMulConst, x.value(), c);
  Tensor C = x.value();
  for (std::size_t i = 0; i < C.size(); ++i) C[i] *= c[i];
  return x.tape->Push(OpKind::kMulConst, {x.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * c[i];
  });
}

inline Var Relu(Var x) {
  Tensor C = x.value();
  for (double& v : C.vec()) v = v > 0.0 ? v : 0.0;
  return x.tape->Push(OpKind::kRelu, {x.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& X = tp.node(x.id).value;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t i = 0; i < G.size(); ++i)
      if (X[i] > 0.0) gx[i] += G[i];
  });
}

/// Exact (erf-based) GELU.
inline Var Gelu(Var x) {
  Tensor C = x.value();
  for (double& v : C.vec()) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return x.tape->Push(OpKind::kGelu, {x.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& X = tp.node(x.id).value;
    Tensor& gx = tp.GradBuffer(x.id);
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    for (std::size_t i = 0; i < G.size(); ++i) {
      const double v = X[i];
      const double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      gx[i] += G[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

inline Var Softmax(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kSoftmax, X, 2);
  Tensor Y = X;
  for (std::size_t i = 0; i < Y.rows(); ++i) {
    auto r = Y.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double& v : r) s += (v = std::exp(v - mx));
    for (double& v : r) v /= s;
  }
  return t.Push(OpKind::kSoftmax, {x.id}, std::move(Y), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& Yv = tp.node(self).value;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t i = 0; i < Yv.rows(); ++i) {
      auto y = Yv.row(i);
      auto g = G.row(i);
      double dot = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) dot += y[j] * g[j];
      auto o = gx.row(i);
      for (std::size_t j = 0; j < y.size(); ++j) o[j] += y[j] * (g[j] - dot);
    }
  });
}

inline Var LogSoftmax(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kLogSoftmax, X, 2);
  Tensor Y = X;
  for (std::size_t i = 0; i < Y.rows(); ++i) {
    auto r = Y.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : r) v -= lse;
  }
  return t.Push(OpKind::kLogSoftmax, {x.id}, std::move(Y), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& Yv = tp.node(self).value;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t i = 0; i < Yv.rows(); ++i) {
      auto y = Yv.row(i);
      auto g = G.row(i);
      double gs = 0.0;
      for (double v : g) gs += v;
      auto o = gx.row(i);
      for (std::size_t j = 0; j < y.size(); ++j) o[j] += g[j] - std::exp(y[j]) * gs;
    }
  });
}

/// Per-row layer normalization with affine gain and bias (each of length cols).
inline Var LayerNorm(Var x, Var gain, Var bias) {
  detail::RequireSameTape(x, gain);
  detail::RequireSameTape(x, bias);
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kLayerNorm, X, 2);
  const std::size_t m = X.rows(), n = X.cols();
  if (gain.value().size() != n || bias.value().size() != n)
    t.Fail(OpKind::kLayerNorm, "affine size mismatch for " + ShapeString(X.shape()));
  Tensor xhat = Tensor::Matrix(m, n);
  std::vector<double> inv_std(m);
  Tensor Y = Tensor::Matrix(m, n);
  const double* g = gain.value().data();
  const double* b = bias.value().data();
  for (std::size_t i = 0; i < m; ++i) {
    auto r = X.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + kNormEpsilon);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (r[j] - mean) * inv_std[i];
      Y(i, j) = xhat(i, j) * g[j] + b[j];
    }
  }
  return t.Push(OpKind::kLayerNorm, {x.id, gain.id, bias.id}, std::move(Y),
                [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const double* gv = tp.node(gain.id).value.data();
    if (tp.NeedsGrad(gain.id)) {
      double* gg = tp.GradBuffer(gain.id).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += G(i, j) * xhat(i, j);
    }
    if (tp.NeedsGrad(bias.id)) {
      double* gb = tp.GradBuffer(bias.id).data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += G(i, j);
    }
    if (tp.NeedsGrad(x.id)) {
      Tensor& gx = tp.GradBuffer(x.id);
      std::vector<double> dxhat(n);
      for (std::size_t i = 0; i < m; ++i) {
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dxhat[j] = G(i, j) * gv[j];
          mean_d += dxhat[j];
          mean_dx += dxhat[j] * xhat(i, j);
        }
        mean_d /= static_cast<double>(n);
        mean_dx /= static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          gx(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
      }
    }
  });
}

/// Normalizes each column over the row (time) axis; no affine terms.
inline Var InstanceNorm(Var x) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kInstanceNorm, X, 2);
  const std::size_t m = X.rows(), n = X.cols();
  Tensor Y = Tensor::Matrix(m, n);
  std::vector<double> inv_std(n);
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < m; ++i) mean += X(i, j);
    mean /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t i = 0; i < m; ++i) var += (X(i, j) - mean) * (X(i, j) - mean);
    var /= static_cast<double>(m);
    inv_std[j] = 1.0 / std::sqrt(var + kNormEpsilon);
    for (std::size_t i = 0; i < m; ++i) Y(i, j) = (X(i, j) - mean) * inv_std[j];
  }
  return t.Push(OpKind::kInstanceNorm, {x.id}, std::move(Y),
                [=, inv_std = std::move(inv_std)](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& Yv = tp.node(self).value;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t j = 0; j < n; ++j) {
      double mean_d = 0.0, mean_dy = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        mean_d += G(i, j);
        mean_dy += G(i, j) * Yv(i, j);
      }
      mean_d /= static_cast<double>(m);
      mean_dy /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i)
        gx(i, j) += inv_std[j] * (G(i, j) - mean_d - Yv(i, j) * mean_dy);
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and layout

inline Var ConcatCols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = *parts[0].tape;
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> offsets;
  std::size_t n = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    detail::RequireSameTape(parts[0], p);
    detail::RequireRank(t, OpKind::kConcatCols, p.value(), 2);
    if (p.value().rows() != m)
      t.Fail(OpKind::kConcatCols, "row mismatch " + ShapeString(p.shape()));
    offsets.push_back(n);
    n += p.value().cols();
    ids.push_back(p.id);
  }
  Tensor C = Tensor::Matrix(m, n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(P.row(i).begin(), P.row(i).end(), C.row(i).begin() + static_cast<long>(offsets[k]));
  }
  return t.Push(OpKind::kConcatCols, ids, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tp.NeedsGrad(ids[k])) continue;
      Tensor& gp = tp.GradBuffer(ids[k]);
      const std::size_t w = gp.cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) gp(i, j) += G(i, offsets[k] + j);
    }
  });
}

inline Var SliceCols(Var x, std::size_t start, std::size_t width) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kSliceCols, X, 2);
  if (start + width > X.cols())
    t.Fail(OpKind::kSliceCols, "columns [" + std::to_string(start) + "," +
                                   std::to_string(start + width) + ") out of " + ShapeString(X.shape()));
  const std::size_t m = X.rows();
  Tensor C = Tensor::Matrix(m, width);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) C(i, j) = X(i, start + j);
  return t.Push(OpKind::kSliceCols, {x.id}, std::move(C), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) gx(i, start + j) += G(i, j);
  });
}

/// Gathers rows (duplicates allowed).
inline Var SelectRows(Var x, std::vector<std::size_t> rows) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kSelectRows, X, 2);
  const std::size_t n = X.cols();
  Tensor C = Tensor::Matrix(rows.size(), n);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= X.rows())
      t.Fail(OpKind::kSelectRows, "row " + std::to_string(rows[k]) + " out of " + ShapeString(X.shape()));
    std::copy(X.row(rows[k]).begin(), X.row(rows[k]).end(), C.row(k).begin());
  }
  return t.Push(OpKind::kSelectRows, {x.id}, std::move(C), [=, rows = std::move(rows)](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t k = 0; k < rows.size(); ++k)
      for (std::size_t j = 0; j < n; ++j) gx(rows[k], j) += G(k, j);
  });
}

/// Rows listed in `rows` are replaced by the vector `fill` (length cols).
inline Var ReplaceRows(Var x, const std::vector<std::size_t>& rows, Var fill) {
  detail::RequireSameTape(x, fill);
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kReplaceRows, X, 2);
  const std::size_t m = X.rows(), n = X.cols();
  if (fill.value().size() != n)
    t.Fail(OpKind::kReplaceRows, "fill " + ShapeString(fill.shape()) + " vs " + ShapeString(X.shape()));
  std::vector<char> masked(m, 0);
  for (std::size_t r : rows) {
    if (r >= m) t.Fail(OpKind::kReplaceRows, "row " + std::to_string(r) + " out of " + ShapeString(X.shape()));
    masked[r] = 1;
  }
  Tensor C = X;
  for (std::size_t i = 0; i < m; ++i)
    if (masked[i]) std::copy(fill.value().data(), fill.value().data() + n, C.row(i).begin());
  return t.Push(OpKind::kReplaceRows, {x.id, fill.id}, std::move(C),
                [=, masked = std::move(masked)](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    if (tp.NeedsGrad(x.id)) {
      Tensor& gx = tp.GradBuffer(x.id);
      for (std::size_t i = 0; i < m; ++i)
        if (!masked[i])
          for (std::size_t j = 0; j < n; ++j) gx(i, j) += G(i, j);
    }
    if (tp.NeedsGrad(fill.id)) {
      double* gf = tp.GradBuffer(fill.id).data();
      for (std::size_t i = 0; i < m; ++i)
        if (masked[i])
          for (std::size_t j = 0; j < n; ++j) gf[j] += G(i, j);
    }
  });
}

/// Looks up rows of `table` (V×D) for each id.
inline Var Embedding(Var table, std::vector<int> ids) {
  Tape& t = *table.tape;
  const Tensor& W = table.value();
  detail::RequireRank(t, OpKind::kEmbedding, W, 2);
  const std::size_t d = W.cols();
  Tensor C = Tensor::Matrix(ids.size(), d);
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (ids[k] < 0 || static_cast<std::size_t>(ids[k]) >= W.rows())
      t.Fail(OpKind::kEmbedding, "id " + std::to_string(ids[k]) + " out of table " + ShapeString(W.shape()));
    std::copy(W.row(static_cast<std::size_t>(ids[k])).begin(), W.row(static_cast<std::size_t>(ids[k])).end(),
              C.row(k).begin());
  }
  return t.Push(OpKind::kEmbedding, {table.id}, std::move(C), [=, ids = std::move(ids)](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& gw = tp.GradBuffer(table.id);
    for (std::size_t k = 0; k < ids.size(); ++k)
      for (std::size_t j = 0; j < d; ++j) gw(static_cast<std::size_t>(ids[k]), j) += G(k, j);
  });
}

inline Var Reshape(Var x, Shape shape) {
  Tensor C = x.value().Reshaped(std::move(shape));
  return x.tape->Push(OpKind::kReshape, {x.id}, std::move(C), [=](Tape& tp, int self) {
    Tensor& gx = tp.GradBuffer(x.id);
    const Tensor& G = tp.node(self).grad;
    for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i];
  });
}

// ---------------------------------------------------------------------------
// Convolutions

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// x: N×C×H×W, weight: O×C×KH×KW, bias: O. Output N×O×Ho×Wo.
inline Var Conv2d(Var x, Var weight, Var bias, Conv2dOptions opt = {}) {
  detail::RequireSameTape(x, weight);
  detail::RequireSameTape(x, bias);
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  detail::RequireRank(t, OpKind::kConv2d, X, 4);
  detail::RequireRank(t, OpKind::kConv2d, W, 4);
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const std::size_t O = W.dim(0), KH = W.dim(2), KW = W.dim(3);
  if (W.dim(1) != C || bias.value().size() != O)
    t.Fail(OpKind::kConv2d, "weight " + ShapeString(W.shape()) + " incompatible with input " + ShapeString(X.shape()));
  const std::size_t s = opt.stride, p = opt.padding;
  if (H + 2 * p < KH || Wd + 2 * p < KW) t.Fail(OpKind::kConv2d, "kernel larger than padded input");
  const std::size_t Ho = (H + 2 * p - KH) / s + 1, Wo = (Wd + 2 * p - KW) / s + 1;
  Tensor Y(Shape{N, O, Ho, Wo});
  const double* xd = X.data();
  const double* wd = W.data();
  const double* bd = bias.value().data();
  double* yd = Y.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = bd[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t kh = 0; kh < KH; ++kh) {
              const long ih = static_cast<long>(oh * s + kh) - static_cast<long>(p);
              if (ih < 0 || ih >= static_cast<long>(H)) continue;
              for (std::size_t kw = 0; kw < KW; ++kw) {
                const long iw = static_cast<long>(ow * s + kw) - static_cast<long>(p);
                if (iw < 0 || iw >= static_cast<long>(Wd)) continue;
                acc += wd[((o * C + c) * KH + kh) * KW + kw] *
                       xd[((n * C + c) * H + static_cast<std::size_t>(ih)) * Wd + static_cast<std::size_t>(iw)];
              }
            }
          yd[((n * O + o) * Ho + oh) * Wo + ow] = acc;
        }
  return t.Push(OpKind::kConv2d, {x.id, weight.id, bias.id}, std::move(Y), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const double* gd = G.data();
    const double* xv = tp.node(x.id).value.data();
    const double* wv = tp.node(weight.id).value.data();
    double* gx = tp.NeedsGrad(x.id) ? tp.GradBuffer(x.id).data() : nullptr;
    double* gw = tp.NeedsGrad(weight.id) ? tp.GradBuffer(weight.id).data() : nullptr;
    double* gb = tp.NeedsGrad(bias.id) ? tp.GradBuffer(bias.id).data() : nullptr;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t oh = 0; oh < Ho; ++oh)
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const double g = gd[((n * O + o) * Ho + oh) * Wo + ow];
            if (g == 0.0) continue;
            if (gb) gb[o] += g;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const long ih = static_cast<long>(oh * s + kh) - static_cast<long>(p);
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const long iw = static_cast<long>(ow * s + kw) - static_cast<long>(p);
                  if (iw < 0 || iw >= static_cast<long>(Wd)) continue;
                  const std::size_t xi = ((n * C + c) * H + static_cast<std::size_t>(ih)) * Wd + static_cast<std::size_t>(iw);
                  const std::size_t wi = ((o * C + c) * KH + kh) * KW + kw;
                  if (gw) gw[wi] += g * xv[xi];
                  if (gx) gx[xi] += g * wv[wi];
                }
              }
          }
  });
}

/// Average-pools N×C×H×W onto a gh×gw grid and flattens to N×(C·gh·gw).
/// A 1×1 grid is global average pooling.
inline Var PoolGrid(Var x, std::size_t gh, std::size_t gw) {
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  detail::RequireRank(t, OpKind::kPoolGrid, X, 4);
  const std::size_t N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (gh == 0 || gw == 0 || gh > H || gw > W)
    t.Fail(OpKind::kPoolGrid, "grid does not fit " + ShapeString(X.shape()));
  auto lo = [](std::size_t i, std::size_t g, std::size_t L) { return i * L / g; };
  Tensor Y = Tensor::Matrix(N, C * gh * gw);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t a = 0; a < gh; ++a)
        for (std::size_t b = 0; b < gw; ++b) {
          const std::size_t h0 = lo(a, gh, H), h1 = lo(a + 1, gh, H);
          const std::size_t w0 = lo(b, gw, W), w1 = lo(b + 1, gw, W);
          double acc = 0.0;
          for (std::size_t h = h0; h < h1; ++h)
            for (std::size_t w = w0; w < w1; ++w) acc += X[((n * C + c) * H + h) * W + w];
          Y(n, (c * gh + a) * gw + b) = acc / static_cast<double>((h1 - h0) * (w1 - w0));
        }
  return t.Push(OpKind::kPoolGrid, {x.id}, std::move(Y), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    Tensor& gx = tp.GradBuffer(x.id);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t a = 0; a < gh; ++a)
          for (std::size_t b = 0; b < gw; ++b) {
            const std::size_t h0 = lo(a, gh, H), h1 = lo(a + 1, gh, H);
            const std::size_t w0 = lo(b, gw, W), w1 = lo(b + 1, gw, W);
            const double g = G(n, (c * gh + a) * gw + b) / static_cast<double>((h1 - h0) * (w1 - w0));
            for (std::size_t h = h0; h < h1; ++h)
              for (std::size_t w = w0; w < w1; ++w) gx[((n * C + c) * H + h) * W + w] += g;
          }
  });
}

/// Grouped 1-D convolution along rows (time) of x: T×D with "same" padding.
/// weight: D×(D/groups)×K with K odd, bias: D.
inline Var Conv1dTime(Var x, Var weight, Var bias, std::size_t groups) {
  detail::RequireSameTape(x, weight);
  detail::RequireSameTape(x, bias);
  Tape& t = *x.tape;
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  detail::RequireRank(t, OpKind::kConv1d, X, 2);
  detail::RequireRank(t, OpKind::kConv1d, W, 3);
  const std::size_t T = X.rows(), D = X.cols();
  if (groups == 0 || D % groups != 0 || W.dim(0) != D || W.dim(1) != D / groups ||
      W.dim(2) % 2 == 0 || bias.value().size() != D)
    t.Fail(OpKind::kConv1d, "weight " + ShapeString(W.shape()) + " incompatible with " + ShapeString(X.shape()));
  const std::size_t gsize = D / groups, K = W.dim(2), half = K / 2;
  Tensor Y = Tensor::Matrix(T, D);
  for (std::size_t tt = 0; tt < T; ++tt)
    for (std::size_t o = 0; o < D; ++o) {
      const std::size_t g0 = (o / gsize) * gsize;
      double acc = bias.value()[o];
      for (std::size_t k = 0; k < K; ++k) {
        const long src = static_cast<long>(tt + k) - static_cast<long>(half);
        if (src < 0 || src >= static_cast<long>(T)) continue;
        for (std::size_t i = 0; i < gsize; ++i)
          acc += W[(o * gsize + i) * K + k] * X(static_cast<std::size_t>(src), g0 + i);
      }
      Y(tt, o) = acc;
    }
  return t.Push(OpKind::kConv1d, {x.id, weight.id, bias.id}, std::move(Y), [=](Tape& tp, int self) {
    const Tensor& G = tp.node(self).grad;
    const Tensor& Xv = tp.node(x.id).value;
    const Tensor& Wv = tp.node(weight.id).value;
    Tensor* gx = tp.NeedsGrad(x.id) ? &tp.GradBuffer(x.id) : nullptr;
    Tensor* gw = tp.NeedsGrad(weight.id) ? &tp.GradBuffer(weight.id) : nullptr;
    Tensor* gb = tp.NeedsGrad(bias.id) ? &tp.GradBuffer(bias.id) : nullptr;
    for (std::size_t tt = 0; tt < T; ++tt)
      for (std::size_t o = 0; o < D; ++o) {
        const double g = G(tt, o);
        if (gb) (*gb)[o] += g;
        const std::size_t g0 = (o / gsize) * gsize;
        for (std::size_t k = 0; k < K; ++k) {
          const long src = static_cast<long>(tt + k) - static_cast<long>(half);
          if (src < 0 || src >= static_cast<long>(T)) continue;
          for (std::size_t i = 0; i < gsize; ++i) {
            const std::size_t wi = (o * gsize + i) * K + k;
            if (gw) (*gw)[wi] += g * Xv(static_cast<std::size_t>(src), g0 + i);
            if (gx) (*gx)(static_cast<std::size_t>(src), g0 + i) += g * Wv[wi];
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var Sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->Push(OpKind::kSum, {x.id}, Tensor::Scalar(s), [=](Tape& tp, int self) {
    const double g = tp.node(self).grad[0];
    for (double& v : tp.GradBuffer(x.id).vec()) v += g;
  });
}

inline Var Mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) x.tape->Fail(OpKind::kMean, "mean of empty tensor");
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape->Push(OpKind::kMean, {x.id}, Tensor::Scalar(s / n), [=](Tape& tp, int self) {
    const double g = tp.node(self).grad[0] / n;
    for (double& v : tp.GradBuffer(x.id).vec()) v += g;
  });
}

/// Identity in the forward pass; blocks all gradient flow.
inline Var StopGradient(Var x) {
  return x.tape->Push(OpKind::kStopGradient, {}, x.value(), nullptr);
}

/// -(1/N) Σ_n Σ_i q_ni · log softmax(logits)_ni for constant targets q (N×V).
inline Var SoftCrossEntropy(Var logits, const Tensor& targets) {
  Tape& t = *logits.tape;
  const Tensor& L = logits.value();
  detail::RequireRank(t, OpKind::kSoftCrossEntropy, L, 2);
  detail::RequireSameShape(t, OpKind::kSoftCrossEntropy, L, targets);
  const std::size_t N = L.rows(), V = L.cols();
  if (N == 0) t.Fail(OpKind::kSoftCrossEntropy, "no rows");
  Tensor probs = Tensor::Matrix(N, V);
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    auto r = L.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < V; ++j) {
      probs(i, j) = std::exp(r[j] - lse);
      if (targets(i, j) != 0.0) loss -= targets(i, j) * (r[j] - lse);
    }
  }
  loss /= static_cast<double>(N);
  return t.Push(OpKind::kSoftCrossEntropy, {logits.id}, Tensor::Scalar(loss),
                [=, probs = std::move(probs)](Tape& tp, int self) {
    const double g = tp.node(self).grad[0] / static_cast<double>(N);
    Tensor& gl = tp.GradBuffer(logits.id);
    for (std::size_t i = 0; i < N; ++i) {
      double qs = 0.0;
      for (std::size_t j = 0; j < V; ++j) qs += targets(i, j);
      for (std::size_t j = 0; j < V; ++j) gl(i, j) += g * (probs(i, j) * qs - targets(i, j));
    }
  });
}

/// Result of the CTC forward-backward recursion.
struct CtcAlignment {
  bool feasible = false;
  double nll = std::numeric_limits<double>::infinity();
  /// Posterior occupancy γ_t(k) (T×C); empty when infeasible.
  Tensor occupancy;
};

/// Minimal number of frames that can emit `labels` (repeats need a blank).
inline std::size_t CtcMinFrames(const std::vector<int>& labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

/// Log-space CTC forward-backward over log posteriors (T×C).
inline CtcAlignment CtcForwardBackward(const Tensor& log_probs, const std::vector<int>& labels, int blank) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  if (log_probs.rank() != 2) throw ShapeError("ctc: log posteriors must be T×C");
  const std::size_t T = log_probs.rows(), C = log_probs.cols();
  if (blank < 0 || static_cast<std::size_t>(blank) >= C) throw ShapeError("ctc: blank index out of range");
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= C || l == blank)
      throw ShapeError("ctc: label " + std::to_string(l) + " outside alphabet");
  CtcAlignment out;
  if (T == 0 || T < CtcMinFrames(labels)) return out;
  const std::size_t S = 2 * labels.size() + 1;
  auto sym = [&](std::size_t s) { return s % 2 == 0 ? blank : labels[s / 2]; };
  auto skip_ok = [&](std::size_t s) { return s >= 2 && s % 2 == 1 && labels[s / 2] != labels[s / 2 - 1]; };
  Tensor alpha = Tensor::Matrix(T, S, kNegInf), beta = Tensor::Matrix(T, S, kNegInf);
  alpha(0, 0) = log_probs(0, static_cast<std::size_t>(blank));
  if (S > 1) alpha(0, 1) = log_probs(0, static_cast<std::size_t>(labels[0]));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = LogAdd(a, alpha(t - 1, s - 1));
      if (skip_ok(s)) a = LogAdd(a, alpha(t - 1, s - 2));
      alpha(t, s) = a == kNegInf ? kNegInf : a + log_probs(t, static_cast<std::size_t>(sym(s)));
    }
  beta(T - 1, S - 1) = log_probs(T - 1, static_cast<std::size_t>(sym(S - 1)));
  if (S > 1) beta(T - 1, S - 2) = log_probs(T - 1, static_cast<std::size_t>(sym(S - 2)));
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < S) b = LogAdd(b, beta(t + 1, s + 1));
      if (s + 2 < S && skip_ok(s + 2)) b = LogAdd(b, beta(t + 1, s + 2));
      beta(t, s) = b == kNegInf ? kNegInf : b + log_probs(t, static_cast<std::size_t>(sym(s)));
    }
  double logp = alpha(T - 1, S - 1);
  if (S > 1) logp = LogAdd(logp, alpha(T - 1, S - 2));
  if (logp == kNegInf) return out;
  out.feasible = true;
  out.nll = -logp;
  out.occupancy = Tensor::Matrix(T, C);
  // alpha and beta both include the emission at t, so divide it out once.
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      const double ab = alpha(t, s) + beta(t, s);
      if (ab == kNegInf) continue;
      const std::size_t k = static_cast<std::size_t>(sym(s));
      out.occupancy(t, k) += std::exp(ab - log_probs(t, k) - logp);
    }
  return out;
}

/// CTC negative log-likelihood of `labels` given log posteriors (T×C).
/// Returns std::nullopt when no alignment exists.
inline std::optional<Var> CtcNll(Var log_probs, const std::vector<int>& labels, int blank) {
  CtcAlignment a = CtcForwardBackward(log_probs.value(), labels, blank);
  if (!a.feasible) return std::nullopt;
  return log_probs.tape->Push(OpKind::kCtc, {log_probs.id}, Tensor::Scalar(a.nll),
                              [=, occ = std::move(a.occupancy)](Tape& tp, int self) {
    const double g = tp.node(self).grad[0];
    Tensor& gl = tp.GradBuffer(log_probs.id);
    for (std::size_t i = 0; i < occ.size(); ++i) gl[i] -= g * occ[i];
  });
}

// ---------------------------------------------------------------------------
// Operator sugar

inline Var operator+(Var a, Var b) { return Add(a, b); }
inline Var operator-(Var a, Var b) { return Sub(a, b); }
inline Var operator*(Var a, Var b) { return Mul(a, b); }
inline Var operator*(Var a, double s) { return Scale(a, s); }
inline Var operator*(double s, Var a) { return Scale(a, s); }

// ---------------------------------------------------------------------------
// Whole-graph evaluation

using NamedTensors = std::map<std::string, Tensor>;
using NamedVars = std::map<std::string, Var>;

/// A computation graph expressed as a function that records onto a Tape.
/// It receives bound parameters and inputs and returns named outputs.
using GraphFn = std::function<NamedVars(Tape&, const NamedVars& params, const NamedVars& inputs)>;

namespace detail {
inline NamedVars Bind(Tape& tape, const NamedTensors& src, bool trainable) {
  NamedVars out;
  for (const auto& [name, value] : src)
    out.emplace(name, trainable ? tape.Param(value, name) : tape.Input(value, name));
  return out;
}
}  // namespace detail

/// Runs the graph forward and returns every named output.
inline NamedTensors Evaluate(const GraphFn& graph, const NamedTensors& params, const NamedTensors& inputs) {
  Tape tape(false);
  NamedVars p = detail::Bind(tape, params, false);
  NamedVars in = detail::Bind(tape, inputs, false);
  NamedVars outs = graph(tape, p, in);
  NamedTensors result;
  for (const auto& [name, v] : outs) result.emplace(name, v.value());
  return result;
}

/// Gradient of the scalar output `loss` with respect to every parameter.
inline NamedTensors Gradient(const GraphFn& graph, const NamedTensors& params, const NamedTensors& inputs,
                             const std::string& loss) {
  Tape tape(true);
  NamedVars p = detail::Bind(tape, params, true);
  NamedVars in = detail::Bind(tape, inputs, false);
  NamedVars outs = graph(tape, p, in);
  auto it = outs.find(loss);
  if (it == outs.end()) throw ShapeError("gradient: graph has no output '" + loss + "'");
  tape.Backward(it->second);
  NamedTensors grads;
  for (const auto& [name, v] : p) grads.emplace(name, tape.Grad(v));
  return grads;
}

}  // namespace avsd::ad
