#pragma once

// Reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records primitive operations in execution order; backward() walks
// the record in reverse and accumulates adjoints. Every node also keeps a
// recompute closure, so replay_forward() re-evaluates the whole tape in
// place. Parameter leaves re-read their bound ParameterT value on replay,
// which is what the finite-difference checker relies on.
//
// Kernel set: gemm (with transpose flags), elementwise add/multiply, scalar
// scale/shift, exp, log, row softmax, row layer norm, GELU, concat along an
// axis, mean over an axis, L2 norm, cosine similarity. Everything else in
// the project is composed from these.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace owtta::ad {

template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Named dense parameter with a gradient accumulator. Lives outside any
/// tape; tapes bind to it via TapeT::param().
template <class Scalar>
struct ParameterT {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;
  bool trainable = true;

  ParameterT() = default;
  ParameterT(std::string n, Mat<Scalar> v, bool train = true)
      : name(std::move(n)), value(std::move(v)), trainable(train) {
    grad = Mat<Scalar>::Zero(value.rows(), value.cols());
  }

  void zero_grad() { grad.setZero(); }
  Eigen::Index size() const { return value.size(); }
};

template <class Scalar>
class TapeT;

/// Lightweight handle to a node on a tape.
template <class Scalar>
struct VarT {
  TapeT<Scalar>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Mat<Scalar>& value() const;
  const Mat<Scalar>& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

  /// Value of a 1x1 node.
  Scalar scalar() const {
    const Mat<Scalar>& v = value();
    if (v.rows() != 1 || v.cols() != 1)
      throw std::invalid_argument("scalar(): node is " + std::to_string(v.rows()) + "x" +
                                  std::to_string(v.cols()) + ", expected 1x1");
    return v(0, 0);
  }
};

template <class Scalar>
class TapeT {
 public:
  struct Node {
    Mat<Scalar> value;
    Mat<Scalar> grad;
    bool requires_grad = false;
    std::function<void(TapeT&)> recompute;  // empty for leaves
    std::function<void(TapeT&)> pull;       // adjoint; empty for leaves
  };

  using Var = VarT<Scalar>;

  /// Leaf holding a fixed value that never receives gradient.
  Var constant(Mat<Scalar> v) { return push_leaf(std::move(v), false); }

  Var constant_scalar(Scalar s) {
    Mat<Scalar> m(1, 1);
    m(0, 0) = s;
    return constant(std::move(m));
  }

  /// Leaf with an explicit requires_grad flag (tests mostly).
  Var leaf(Mat<Scalar> v, bool requires_grad) { return push_leaf(std::move(v), requires_grad); }

  /// Leaf bound to an external parameter. Replay re-reads p.value; after
  /// backward() the node gradient is accumulated into p.grad when the
  /// parameter is trainable.
  Var param(ParameterT<Scalar>& p) {
    Node n;
    n.value = p.value;
    n.grad = Mat<Scalar>::Zero(p.value.rows(), p.value.cols());
    n.requires_grad = p.trainable;
    ParameterT<Scalar>* bound = &p;
    std::size_t id = nodes_.size();
    n.recompute = [id, bound](TapeT& t) { t.nodes_[id].value = bound->value; };
    nodes_.push_back(std::move(n));
    bindings_.emplace_back(id, bound);
    return Var{this, id};
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  /// Record an interior node. `recompute` must assign node.value from the
  /// current values of its inputs; `pull` must distribute node.grad.
  Var push(Mat<Scalar> value, bool requires_grad, std::function<void(TapeT&)> recompute,
           std::function<void(TapeT&)> pull) {
    Node n;
    n.grad = Mat<Scalar>::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.recompute = std::move(recompute);
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  /// Reverse sweep from a scalar loss. Node gradients are reset first, so a
  /// single call yields exact adjoints; parameter gradients accumulate
  /// across calls (callers reset them between passes).
  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward(): loss lives on another tape");
    const Mat<Scalar>& lv = nodes_[loss.id].value;
    if (lv.rows() != 1 || lv.cols() != 1)
      throw std::invalid_argument("backward(): loss must be scalar, got " +
                                  std::to_string(lv.rows()) + "x" + std::to_string(lv.cols()));
    for (Node& n : nodes_) n.grad.setZero();
    nodes_[loss.id].grad(0, 0) = Scalar(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.requires_grad && n.pull) n.pull(*this);
    }
    for (auto& [id, p] : bindings_) {
      if (p->trainable) p->grad += nodes_[id].grad;
    }
  }

  /// Re-execute every recorded op in record order. With unchanged inputs
  /// this reproduces all node values bitwise; with changed parameter values
  /// it evaluates the same function at the new point.
  void replay_forward() {
    for (Node& n : nodes_) {
      if (n.recompute) n.recompute(*this);
    }
  }

 private:
  Var push_leaf(Mat<Scalar> v, bool requires_grad) {
    Node n;
    n.grad = Mat<Scalar>::Zero(v.rows(), v.cols());
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  // Deque keeps node references stable while new ops are recorded, so a
  // Mat& obtained from Var::value() stays valid for the tape's lifetime.
  std::deque<Node> nodes_;
  std::vector<std::pair<std::size_t, ParameterT<Scalar>*>> bindings_;
};

template <class Scalar>
const Mat<Scalar>& VarT<Scalar>::value() const {
  return tape->node(id).value;
}

template <class Scalar>
const Mat<Scalar>& VarT<Scalar>::grad() const {
  return tape->node(id).grad;
}

namespace detail {

template <class Scalar>
TapeT<Scalar>* same_tape(VarT<Scalar> a, VarT<Scalar> b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw std::invalid_argument("operands live on different tapes");
  return a.tape;
}

inline std::string shape_str(Eigen::Index r, Eigen::Index c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class Scalar>
void require_same_shape(const Mat<Scalar>& a, const Mat<Scalar>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.rows(), a.cols()) + " vs " +
                                shape_str(b.rows(), b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// General matrix product with optional transposes (one gemm kernel).
template <class Scalar>
VarT<Scalar> matmul(VarT<Scalar> a, VarT<Scalar> b, bool trans_a = false, bool trans_b = false) {
  TapeT<Scalar>* t = detail::same_tape(a, b);
  const Mat<Scalar>& av = a.value();
  const Mat<Scalar>& bv = b.value();
  const Eigen::Index inner_a = trans_a ? av.rows() : av.cols();
  const Eigen::Index inner_b = trans_b ? bv.cols() : bv.rows();
  if (inner_a != inner_b)
    throw std::invalid_argument("matmul: inner extents differ, " +
                                detail::shape_str(av.rows(), av.cols()) + (trans_a ? "^T" : "") +
                                " * " + detail::shape_str(bv.rows(), bv.cols()) +
                                (trans_b ? "^T" : ""));
  auto eval = [ai = a.id, bi = b.id, trans_a, trans_b](TapeT<Scalar>& tp) -> Mat<Scalar> {
    const Mat<Scalar>& A = tp.node(ai).value;
    const Mat<Scalar>& B = tp.node(bi).value;
    if (trans_a && trans_b) return A.transpose() * B.transpose();
    if (trans_a) return A.transpose() * B;
    if (trans_b) return A * B.transpose();
    return A * B;
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad || t->node(b.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, bi = b.id, out_id, trans_a, trans_b](TapeT<Scalar>& tp) {
        const Mat<Scalar>& g = tp.node(out_id).grad;
        const Mat<Scalar>& A = tp.node(ai).value;
        const Mat<Scalar>& B = tp.node(bi).value;
        if (tp.node(ai).requires_grad) {
          // dA' = g * B'^T with A' = op(A); transpose back if needed.
          Mat<Scalar> da = trans_b ? Mat<Scalar>(g * B) : Mat<Scalar>(g * B.transpose());
          tp.node(ai).grad += trans_a ? da.transpose() : da;
        }
        if (tp.node(bi).requires_grad) {
          Mat<Scalar> db = trans_a ? Mat<Scalar>(A * g) : Mat<Scalar>(A.transpose() * g);
          tp.node(bi).grad += trans_b ? db.transpose() : db;
        }
      });
}

/// Elementwise sum of two same-shape nodes.
template <class Scalar>
VarT<Scalar> add(VarT<Scalar> a, VarT<Scalar> b) {
  TapeT<Scalar>* t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "add");
  bool rg = t->node(a.id).requires_grad || t->node(b.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      a.value() + b.value(), rg,
      [ai = a.id, bi = b.id, out_id](TapeT<Scalar>& tp) {
        tp.node(out_id).value = tp.node(ai).value + tp.node(bi).value;
      },
      [ai = a.id, bi = b.id, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& g = tp.node(out_id).grad;
        if (tp.node(ai).requires_grad) tp.node(ai).grad += g;
        if (tp.node(bi).requires_grad) tp.node(bi).grad += g;
      });
}

/// Hadamard product of two same-shape nodes.
template <class Scalar>
VarT<Scalar> mul(VarT<Scalar> a, VarT<Scalar> b) {
  TapeT<Scalar>* t = detail::same_tape(a, b);
  detail::require_same_shape(a.value(), b.value(), "mul");
  bool rg = t->node(a.id).requires_grad || t->node(b.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      a.value().cwiseProduct(b.value()), rg,
      [ai = a.id, bi = b.id, out_id](TapeT<Scalar>& tp) {
        tp.node(out_id).value = tp.node(ai).value.cwiseProduct(tp.node(bi).value);
      },
      [ai = a.id, bi = b.id, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& g = tp.node(out_id).grad;
        if (tp.node(ai).requires_grad)
          tp.node(ai).grad += g.cwiseProduct(tp.node(bi).value);
        if (tp.node(bi).requires_grad)
          tp.node(bi).grad += g.cwiseProduct(tp.node(ai).value);
      });
}

/// k * a for a plain scalar k.
template <class Scalar>
VarT<Scalar> scale(VarT<Scalar> a, Scalar k) {
  TapeT<Scalar>* t = a.tape;
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      a.value() * k, rg,
      [ai = a.id, out_id, k](TapeT<Scalar>& tp) {
        tp.node(out_id).value = tp.node(ai).value * k;
      },
      [ai = a.id, out_id, k](TapeT<Scalar>& tp) {
        if (tp.node(ai).requires_grad) tp.node(ai).grad += tp.node(out_id).grad * k;
      });
}

/// a + k elementwise for a plain scalar k.
template <class Scalar>
VarT<Scalar> shift(VarT<Scalar> a, Scalar k) {
  TapeT<Scalar>* t = a.tape;
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      Mat<Scalar>(a.value().array() + k), rg,
      [ai = a.id, out_id, k](TapeT<Scalar>& tp) {
        tp.node(out_id).value = tp.node(ai).value.array() + k;
      },
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        if (tp.node(ai).requires_grad) tp.node(ai).grad += tp.node(out_id).grad;
      });
}

/// Elementwise exponential.
template <class Scalar>
VarT<Scalar> vexp(VarT<Scalar> a) {
  TapeT<Scalar>* t = a.tape;
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      Mat<Scalar>(a.value().array().exp()), rg,
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        tp.node(out_id).value = tp.node(ai).value.array().exp();
      },
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        if (tp.node(ai).requires_grad)
          tp.node(ai).grad +=
              tp.node(out_id).grad.cwiseProduct(tp.node(out_id).value);
      });
}

/// Elementwise natural log; rejects non-positive inputs.
template <class Scalar>
VarT<Scalar> vlog(VarT<Scalar> a) {
  TapeT<Scalar>* t = a.tape;
  if ((a.value().array() <= Scalar(0)).any())
    throw std::domain_error("log: non-positive input");
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      Mat<Scalar>(a.value().array().log()), rg,
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& x = tp.node(ai).value;
        if ((x.array() <= Scalar(0)).any()) throw std::domain_error("log: non-positive input");
        tp.node(out_id).value = x.array().log();
      },
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        if (tp.node(ai).requires_grad)
          tp.node(ai).grad += tp.node(out_id).grad.cwiseQuotient(tp.node(ai).value);
      });
}

/// Row softmax with max subtraction (values are unchanged mathematically;
/// the shift only avoids overflow).
template <class Scalar>
VarT<Scalar> softmax_rows(VarT<Scalar> a) {
  TapeT<Scalar>* t = a.tape;
  auto eval = [ai = a.id](TapeT<Scalar>& tp) -> Mat<Scalar> {
    const Mat<Scalar>& x = tp.node(ai).value;
    Mat<Scalar> y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const Scalar m = x.row(r).maxCoeff();
      y.row(r) = (x.row(r).array() - m).exp();
      y.row(r) /= y.row(r).sum();
    }
    return y;
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        if (!tp.node(ai).requires_grad) return;
        const Mat<Scalar>& y = tp.node(out_id).value;
        const Mat<Scalar>& g = tp.node(out_id).grad;
        Mat<Scalar>& da = tp.node(ai).grad;
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
          const Scalar dot = g.row(r).dot(y.row(r));
          da.row(r) += ((g.row(r).array() - dot) * y.row(r).array()).matrix();
        }
      });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row normalization with affine: y_r = gamma .* (x_r - mean) / sqrt(var + eps) + beta.
/// gamma and beta are 1 x cols and broadcast across rows.
template <class Scalar>
VarT<Scalar> layer_norm_rows(VarT<Scalar> x, VarT<Scalar> gamma, VarT<Scalar> beta) {
  TapeT<Scalar>* t = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Eigen::Index d = x.value().cols();
  if (gamma.value().rows() != 1 || gamma.value().cols() != d || beta.value().rows() != 1 ||
      beta.value().cols() != d)
    throw std::invalid_argument("layer_norm_rows: affine must be 1x" + std::to_string(d));
  auto eval = [xi = x.id, gi = gamma.id, bi = beta.id](TapeT<Scalar>& tp) -> Mat<Scalar> {
    const Mat<Scalar>& xv = tp.node(xi).value;
    const Mat<Scalar>& gv = tp.node(gi).value;
    const Mat<Scalar>& bv = tp.node(bi).value;
    Mat<Scalar> y(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const Scalar mean = xv.row(r).mean();
      const Scalar var = (xv.row(r).array() - mean).square().mean();
      const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
      y.row(r) = (((xv.row(r).array() - mean) * inv) * gv.row(0).array() + bv.row(0).array()).matrix();
    }
    return y;
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(x.id).requires_grad || t->node(gamma.id).requires_grad ||
            t->node(beta.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [xi = x.id, gi = gamma.id, bi = beta.id, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& xv = tp.node(xi).value;
        const Mat<Scalar>& gv = tp.node(gi).value;
        const Mat<Scalar>& g = tp.node(out_id).grad;
        const Eigen::Index n = xv.cols();
        for (Eigen::Index r = 0; r < xv.rows(); ++r) {
          const Scalar mean = xv.row(r).mean();
          const Scalar var = (xv.row(r).array() - mean).square().mean();
          const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
          Eigen::Array<Scalar, 1, Eigen::Dynamic> xhat = (xv.row(r).array() - mean) * inv;
          if (tp.node(gi).requires_grad)
            tp.node(gi).grad.row(0) += (g.row(r).array() * xhat).matrix();
          if (tp.node(bi).requires_grad) tp.node(bi).grad.row(0) += g.row(r);
          if (tp.node(xi).requires_grad) {
            Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat = g.row(r).array() * gv.row(0).array();
            const Scalar m1 = dxhat.mean();
            const Scalar m2 = (dxhat * xhat).mean();
            tp.node(xi).grad.row(r) += (inv * (dxhat - m1 - xhat * m2)).matrix();
          }
        }
      });
}

/// GELU, tanh approximation.
template <class Scalar>
VarT<Scalar> gelu(VarT<Scalar> a) {
  TapeT<Scalar>* t = a.tape;
  const Scalar c0 = std::sqrt(Scalar(2) / Scalar(EIGEN_PI));
  const Scalar c1 = Scalar(0.044715);
  auto eval = [ai = a.id, c0, c1](TapeT<Scalar>& tp) -> Mat<Scalar> {
    auto x = tp.node(ai).value.array();
    auto u = c0 * (x + c1 * x.cube());
    return Scalar(0.5) * x * (Scalar(1) + u.tanh());
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, out_id, c0, c1](TapeT<Scalar>& tp) {
        if (!tp.node(ai).requires_grad) return;
        auto x = tp.node(ai).value.array();
        auto th = (c0 * (x + c1 * x.cube())).tanh();
        auto dudx = c0 * (Scalar(1) + Scalar(3) * c1 * x.square());
        auto dy = Scalar(0.5) * (Scalar(1) + th) + Scalar(0.5) * x * (Scalar(1) - th.square()) * dudx;
        tp.node(ai).grad.array() += tp.node(out_id).grad.array() * dy;
      });
}

/// Concatenation along axis 0 (stack rows) or axis 1 (stack cols).
template <class Scalar>
VarT<Scalar> concat(const std::vector<VarT<Scalar>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: empty input list");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  TapeT<Scalar>* t = parts.front().tape;
  std::vector<std::size_t> ids;
  ids.reserve(parts.size());
  Eigen::Index rows = parts.front().rows(), cols = parts.front().cols();
  Eigen::Index total = axis == 0 ? rows : cols;
  bool rg = t->node(parts.front().id).requires_grad;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::same_tape(parts.front(), parts[i]);
    const Mat<Scalar>& v = parts[i].value();
    if (axis == 0 && v.cols() != cols)
      throw std::invalid_argument("concat: column extents differ");
    if (axis == 1 && v.rows() != rows)
      throw std::invalid_argument("concat: row extents differ");
    if (i > 0) total += axis == 0 ? v.rows() : v.cols();
    rg = rg || t->node(parts[i].id).requires_grad;
    ids.push_back(parts[i].id);
  }
  auto eval = [ids, axis, rows, cols, total](TapeT<Scalar>& tp) -> Mat<Scalar> {
    Mat<Scalar> out(axis == 0 ? total : rows, axis == 0 ? cols : total);
    Eigen::Index off = 0;
    for (std::size_t pid : ids) {
      const Mat<Scalar>& v = tp.node(pid).value;
      if (axis == 0) {
        out.middleRows(off, v.rows()) = v;
        off += v.rows();
      } else {
        out.middleCols(off, v.cols()) = v;
        off += v.cols();
      }
    }
    return out;
  };
  Mat<Scalar> out = eval(*t);
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ids, axis, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& g = tp.node(out_id).grad;
        Eigen::Index off = 0;
        for (std::size_t pid : ids) {
          auto& in = tp.node(pid);
          const Eigen::Index ext = axis == 0 ? in.value.rows() : in.value.cols();
          if (in.requires_grad) {
            if (axis == 0)
              in.grad += g.middleRows(off, ext);
            else
              in.grad += g.middleCols(off, ext);
          }
          off += ext;
        }
      });
}

/// Mean over an axis: axis 0 collapses rows (result 1 x cols), axis 1
/// collapses cols (result rows x 1).
template <class Scalar>
VarT<Scalar> mean_axis(VarT<Scalar> a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("mean_axis: axis must be 0 or 1");
  TapeT<Scalar>* t = a.tape;
  auto eval = [ai = a.id, axis](TapeT<Scalar>& tp) -> Mat<Scalar> {
    const Mat<Scalar>& x = tp.node(ai).value;
    if (axis == 0) return x.colwise().mean();
    return x.rowwise().mean();
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, out_id, axis](TapeT<Scalar>& tp) {
        auto& in = tp.node(ai);
        if (!in.requires_grad) return;
        const Mat<Scalar>& g = tp.node(out_id).grad;
        if (axis == 0) {
          const Scalar inv = Scalar(1) / Scalar(in.value.rows());
          in.grad += (Mat<Scalar>::Ones(in.value.rows(), 1) * g) * inv;
        } else {
          const Scalar inv = Scalar(1) / Scalar(in.value.cols());
          in.grad += (g * Mat<Scalar>::Ones(1, in.value.cols())) * inv;
        }
      });
}

/// Frobenius norm as a 1x1 node. Gradient at the origin is left at zero.
template <class Scalar>
VarT<Scalar> l2_norm(VarT<Scalar> a) {
  TapeT<Scalar>* t = a.tape;
  auto eval = [ai = a.id](TapeT<Scalar>& tp) -> Mat<Scalar> {
    Mat<Scalar> out(1, 1);
    out(0, 0) = tp.node(ai).value.norm();
    return out;
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, out_id](TapeT<Scalar>& tp) {
        auto& in = tp.node(ai);
        if (!in.requires_grad) return;
        const Scalar n = tp.node(out_id).value(0, 0);
        if (n > Scalar(0)) in.grad += tp.node(out_id).grad(0, 0) * (in.value / n);
      });
}

/// Cosine similarity of two vectors (any orientation, flattened). A pair
/// with a zero-norm member evaluates to 0 and carries no gradient.
template <class Scalar>
VarT<Scalar> cosine_similarity(VarT<Scalar> a, VarT<Scalar> b) {
  TapeT<Scalar>* t = detail::same_tape(a, b);
  if (a.value().size() != b.value().size())
    throw std::invalid_argument("cosine_similarity: vector lengths differ");
  auto eval = [ai = a.id, bi = b.id](TapeT<Scalar>& tp) -> Mat<Scalar> {
    const Mat<Scalar>& x = tp.node(ai).value;
    const Mat<Scalar>& y = tp.node(bi).value;
    const Scalar nx = x.norm(), ny = y.norm();
    Mat<Scalar> out(1, 1);
    out(0, 0) = (nx == Scalar(0) || ny == Scalar(0))
                    ? Scalar(0)
                    : Scalar((x.reshaped().dot(y.reshaped())) / (nx * ny));
    return out;
  };
  Mat<Scalar> out = eval(*t);
  bool rg = t->node(a.id).requires_grad || t->node(b.id).requires_grad;
  std::size_t out_id = t->size();
  return t->push(
      std::move(out), rg,
      [out_id, eval](TapeT<Scalar>& tp) { tp.node(out_id).value = eval(tp); },
      [ai = a.id, bi = b.id, out_id](TapeT<Scalar>& tp) {
        const Mat<Scalar>& x = tp.node(ai).value;
        const Mat<Scalar>& y = tp.node(bi).value;
        const Scalar nx = x.norm(), ny = y.norm();
        if (nx == Scalar(0) || ny == Scalar(0)) return;
        const Scalar c = tp.node(out_id).value(0, 0);
        const Scalar g = tp.node(out_id).grad(0, 0);
        if (tp.node(ai).requires_grad)
          tp.node(ai).grad += g * (y / (nx * ny) - (c / (nx * nx)) * x);
        if (tp.node(bi).requires_grad)
          tp.node(bi).grad += g * (x / (nx * ny) - (c / (ny * ny)) * y);
      });
}

/// Value copy that blocks gradient flow. The snapshot is also frozen under
/// replay_forward(), so finite differences over a replayed tape measure the
/// stop-gradient objective the backward pass differentiates.
template <class Scalar>
VarT<Scalar> detach(VarT<Scalar> a) {
  return a.tape->constant(a.value());
}

// ---------------------------------------------------------------------------
// Composites (no new adjoint rules; built from the kernels above)
// ---------------------------------------------------------------------------

template <class Scalar>
VarT<Scalar> operator+(VarT<Scalar> a, VarT<Scalar> b) {
  return add(a, b);
}
template <class Scalar>
VarT<Scalar> operator*(VarT<Scalar> a, VarT<Scalar> b) {
  return mul(a, b);
}
template <class Scalar>
VarT<Scalar> operator*(Scalar k, VarT<Scalar> a) {
  return scale(a, k);
}

template <class Scalar>
VarT<Scalar> sub(VarT<Scalar> a, VarT<Scalar> b) {
  return add(a, scale(b, Scalar(-1)));
}
template <class Scalar>
VarT<Scalar> operator-(VarT<Scalar> a, VarT<Scalar> b) {
  return sub(a, b);
}

template <class Scalar>
VarT<Scalar> sum_axis(VarT<Scalar> a, int axis) {
  const Scalar n = Scalar(axis == 0 ? a.rows() : a.cols());
  return scale(mean_axis(a, axis), n);
}

/// Sum of all entries as a 1x1 node.
template <class Scalar>
VarT<Scalar> sum_all(VarT<Scalar> a) {
  return sum_axis(sum_axis(a, 0), 1);
}

/// Broadcast a 1 x c row vector over r rows via a ones-column product.
template <class Scalar>
VarT<Scalar> broadcast_rows(VarT<Scalar> v, Eigen::Index r) {
  TapeT<Scalar>* t = v.tape;
  VarT<Scalar> ones = t->constant(Mat<Scalar>::Ones(r, 1));
  return matmul(ones, v);
}

/// x + v with v a 1 x c row vector broadcast across the rows of x.
template <class Scalar>
VarT<Scalar> rowwise_add(VarT<Scalar> x, VarT<Scalar> v) {
  return add(x, broadcast_rows(v, x.rows()));
}

/// x .* v with v a 1 x c row vector broadcast across the rows of x.
template <class Scalar>
VarT<Scalar> rowwise_mul(VarT<Scalar> x, VarT<Scalar> v) {
  return mul(x, broadcast_rows(v, x.rows()));
}

/// x * W + b (b is 1 x out, broadcast over rows).
template <class Scalar>
VarT<Scalar> affine(VarT<Scalar> x, VarT<Scalar> w, VarT<Scalar> b) {
  return rowwise_add(matmul(x, w), b);
}

/// Single row of x as a 1 x cols node (selector product).
template <class Scalar>
VarT<Scalar> row(VarT<Scalar> x, Eigen::Index r) {
  if (r < 0 || r >= x.rows()) throw std::invalid_argument("row: index out of range");
  Mat<Scalar> sel = Mat<Scalar>::Zero(1, x.rows());
  sel(0, r) = Scalar(1);
  return matmul(x.tape->constant(std::move(sel)), x);
}

/// Contiguous column block [c0, c0+n) of x (selector product).
template <class Scalar>
VarT<Scalar> col_block(VarT<Scalar> x, Eigen::Index c0, Eigen::Index n) {
  if (c0 < 0 || n <= 0 || c0 + n > x.cols())
    throw std::invalid_argument("col_block: range out of bounds");
  Mat<Scalar> sel = Mat<Scalar>::Zero(x.cols(), n);
  for (Eigen::Index j = 0; j < n; ++j) sel(c0 + j, j) = Scalar(1);
  return matmul(x, x.tape->constant(std::move(sel)));
}

/// Contiguous row block [r0, r0+n) of x (selector product).
template <class Scalar>
VarT<Scalar> rows_block(VarT<Scalar> x, Eigen::Index r0, Eigen::Index n) {
  if (r0 < 0 || n <= 0 || r0 + n > x.rows())
    throw std::invalid_argument("rows_block: range out of bounds");
  Mat<Scalar> sel = Mat<Scalar>::Zero(n, x.rows());
  for (Eigen::Index j = 0; j < n; ++j) sel(j, r0 + j) = Scalar(1);
  return matmul(x.tape->constant(std::move(sel)), x);
}

/// Rows drop below this before the log in entropy; keeps 0*log(0) finite
/// without moving any probability mass that matters.
inline constexpr double kEntropyFloor = 1e-300;

/// Per-row Shannon entropy of a row-stochastic matrix, as rows x 1.
template <class Scalar>
VarT<Scalar> entropy_rows(VarT<Scalar> p) {
  VarT<Scalar> logp = vlog(shift(p, Scalar(kEntropyFloor)));
  return scale(sum_axis(mul(p, logp), 1), Scalar(-1));
}

}  // namespace owtta::ad
