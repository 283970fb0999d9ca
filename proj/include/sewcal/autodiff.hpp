#pragma once

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every value together with a closure that pushes the value's
// gradient to its inputs. Transformer-sized kernels (attention, layer norm,
// GELU) are single fused nodes with hand-written backward passes; the test
// suite checks all of them against central differences.

#include "sewcal/core.hpp"

#include <cmath>
#include <functional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

namespace sewcal::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix& grad)>;

  Tape() { nodes_.reserve(512); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Matrix value) { return push(std::move(value), nullptr); }

  // Leaf bound to an external parameter slot; one node per slot per tape.
  Var leaf(int slot, const Matrix& value) {
    auto it = leaves_.find(slot);
    if (it != leaves_.end()) return Var{this, it->second};
    Var v = push(value, nullptr);
    leaves_.emplace(slot, v.id);
    return v;
  }

  Var push(Matrix value, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), std::move(backward)});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  // Gradient accumulated so far; empty if the node received none.
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

  void accumulate(Var v, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Runs the reverse sweep once all output gradients have been seeded with
  // accumulate().
  void backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) {
        // Closures only touch grads of earlier nodes; nodes_ is not resized here.
        n.backward(*this, n.grad);
      }
    }
  }

  void backward(Var scalar_out) {
    accumulate(scalar_out, Matrix::Ones(1, 1));
    backward();
  }

  const std::unordered_map<int, int>& leaves() const { return leaves_; }
  Var node(int id) { return Var{this, id}; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
  std::unordered_map<int, int> leaves_;
};

inline const Matrix& val(Var v) { return v.tape->value(v); }

// ---------------------------------------------------------------------------
// Elementary ops
// ---------------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(val(a) * val(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * val(b).transpose());
    t.accumulate(b, val(a).transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(), ErrorKind::kShape,
          "add: shape mismatch");
  return t.push(val(a) + val(b), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

// x [r x c] + bias [1 x c] broadcast over rows.
inline Var add_row(Var x, Var bias) {
  Tape& t = *x.tape;
  Matrix out = val(x);
  out.rowwise() += val(bias).row(0);
  return t.push(std::move(out), [x, bias](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    t.accumulate(bias, g.colwise().sum());
  });
}

inline Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// Rows [start, start+count) of x.
inline Var slice_rows(Var x, int start, int count) {
  Tape& t = *x.tape;
  const auto rows = val(x).rows();
  const auto cols = val(x).cols();
  return t.push(val(x).middleRows(start, count), [x, start, count, rows, cols](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(rows, cols);
    full.middleRows(start, count) = g;
    t.accumulate(x, full);
  });
}

inline Var concat_rows(Var top, Var bottom) {
  Tape& t = *top.tape;
  const auto& a = val(top);
  const auto& b = val(bottom);
  require(a.cols() == b.cols(), ErrorKind::kShape, "concat_rows: column mismatch");
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  const auto ra = a.rows();
  const auto rb = b.rows();
  return t.push(std::move(out), [top, bottom, ra, rb](Tape& t, const Matrix& g) {
    t.accumulate(top, g.topRows(ra));
    t.accumulate(bottom, g.bottomRows(rb));
  });
}

// Embedding lookup: row r = table[ids[r]], or `substitute` (a 1 x d vector)
// where replace[r] is set.
inline Var embed(Var table, std::span<const int> ids, std::span<const std::uint8_t> replace = {},
                 Var substitute = {}) {
  Tape& t = *table.tape;
  const Matrix& tab = val(table);
  const auto n = static_cast<Eigen::Index>(ids.size());
  Matrix out(n, tab.cols());
  std::vector<int> idv(ids.begin(), ids.end());
  std::vector<std::uint8_t> rep(replace.begin(), replace.end());
  rep.resize(ids.size(), 0);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int id = idv[static_cast<std::size_t>(r)];
    if (rep[static_cast<std::size_t>(r)]) {
      out.row(r) = val(substitute).row(0);
    } else {
      require(id >= 0 && id < tab.rows(), ErrorKind::kIndex,
              "token id " + std::to_string(id) + " outside embedding table of " + std::to_string(tab.rows()));
      out.row(r) = tab.row(id);
    }
  }
  return t.push(std::move(out), [table, substitute, idv = std::move(idv), rep = std::move(rep)](Tape& t, const Matrix& g) {
    Matrix gt = Matrix::Zero(val(table).rows(), val(table).cols());
    Matrix gs;
    bool any_sub = false;
    for (std::size_t r = 0; r < idv.size(); ++r) {
      if (rep[r]) {
        if (!any_sub) gs = Matrix::Zero(1, g.cols());
        any_sub = true;
        gs += g.row(static_cast<Eigen::Index>(r));
      } else {
        gt.row(idv[r]) += g.row(static_cast<Eigen::Index>(r));
      }
    }
    t.accumulate(table, gt);
    if (any_sub) t.accumulate(substitute, gs);
  });
}

// Row-wise layer normalization with gain/bias [1 x d].
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape& t = *x.tape;
  const Matrix& X = val(x);
  const auto rows = X.rows();
  const auto d = static_cast<double>(X.cols());
  Matrix xhat(rows, X.cols());
  Eigen::VectorXd inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().sum() / d;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= val(gain).row(0).array();
  out.rowwise() += val(bias).row(0);
  return t.push(std::move(out), [x, gain, bias, xhat, inv_std, d](Tape& t, const Matrix& g) {
    t.accumulate(gain, (g.array() * xhat.array()).colwise().sum().matrix());
    t.accumulate(bias, g.colwise().sum());
    Matrix gx(g.rows(), g.cols());
    const auto gamma = val(gain).row(0).array();
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const Eigen::ArrayXXd dxhat = g.row(r).array() * gamma;
      const double m1 = dxhat.sum() / d;
      const double m2 = (dxhat * xhat.row(r).array()).sum() / d;
      gx.row(r) = (inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2)).matrix();
    }
    t.accumulate(x, gx);
  });
}

inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

// tanh approximation of GELU.
inline Var gelu(Var x) {
  Tape& t = *x.tape;
  constexpr double k = kGeluK;
  constexpr double c = kGeluC;
  const Matrix& X = val(x);
  Matrix th = (k * (X.array() + c * X.array().cube())).tanh().matrix();
  Matrix out = (0.5 * X.array() * (1.0 + th.array())).matrix();
  return t.push(std::move(out), [x, th](Tape& t, const Matrix& g) {
    const auto X = val(x).array();
    const auto T = th.array();
    const auto d = 0.5 * (1.0 + T) + 0.5 * X * (1.0 - T.square()) * kGeluK * (1.0 + 3.0 * kGeluC * X.square());
    t.accumulate(x, (g.array() * d).matrix());
  });
}

// Multi-head scaled dot-product attention on already-projected inputs.
// q [Lq x d], k/v [Lk x d]; all key rows are attended.
inline Var attention(Var q, Var k, Var v, int heads) {
  Tape& t = *q.tape;
  const Matrix& Q = val(q);
  const Matrix& K = val(k);
  const Matrix& V = val(v);
  const auto d = Q.cols();
  require(K.cols() == d && V.cols() == d && K.rows() == V.rows(), ErrorKind::kShape, "attention: shape mismatch");
  require(heads >= 1 && d % heads == 0, ErrorKind::kShape, "attention: dim not divisible by heads");
  const auto dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> probs(static_cast<std::size_t>(heads));
  Matrix out(Q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Matrix s = scale * Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const double m = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - m).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dh, dh) = s * V.middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return t.push(std::move(out), [q, k, v, heads, dh, scale, probs = std::move(probs)](Tape& t, const Matrix& g) {
    const Matrix& Q = val(q);
    const Matrix& K = val(k);
    const Matrix& V = val(v);
    Matrix gq(Q.rows(), Q.cols());
    Matrix gk(K.rows(), K.cols());
    Matrix gv(V.rows(), V.cols());
    for (int h = 0; h < heads; ++h) {
      const Matrix& P = probs[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh) = P.transpose() * go;
      Matrix dp = go * V.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd rs = (dp.array() * P.array()).rowwise().sum();
      Matrix ds = (P.array() * (dp.colwise() - rs).array()).matrix();
      gq.middleCols(h * dh, dh) = scale * ds * K.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh) = scale * ds.transpose() * Q.middleCols(h * dh, dh);
    }
    t.accumulate(q, gq);
    t.accumulate(k, gk);
    t.accumulate(v, gv);
  });
}

// Sum of all entries of x weighted by w (a constant). Used to build scalar
// test objectives.
inline Var weighted_sum(Var x, const Matrix& w) {
  Tape& t = *x.tape;
  Matrix out(1, 1);
  out(0, 0) = (val(x).array() * w.array()).sum();
  return t.push(std::move(out), [x, w](Tape& t, const Matrix& g) { t.accumulate(x, g(0, 0) * w); });
}

}  // namespace sewcal::ad
