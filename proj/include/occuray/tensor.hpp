#pragma once

// Small tape-based reverse-mode autodiff over dense row-major matrices.
// Just enough surface for the bilayer decoder: matmul, residual adds,
// row softmax, tanh, row concat/slice/mean, sigmoid, and mean BCE.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "occuray/error.hpp"
#include "occuray/losses.hpp"

namespace occuray::autodiff {

struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw Error("Matrix: negative dimensions");
  }
  double& at(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t size() const { return a.size(); }

  bool operator==(const Matrix&) const = default;
};

struct Var {
  int id = -1;
};

class Tape {
 public:
  Var input(Matrix m) {
    nodes_.push_back({std::move(m), {}, nullptr});
    Node& n = nodes_.back();
    n.grad = Matrix(n.val.rows, n.val.cols);
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& value(Var v) const { return nodes_.at(check(v)).val; }
  const Matrix& grad(Var v) const { return nodes_.at(check(v)).grad; }

  double scalar(Var v) const {
    const Matrix& m = value(v);
    if (m.rows != 1 || m.cols != 1) throw Error("Tape::scalar: not a 1x1 value");
    return m.a[0];
  }

  Var matmul(Var av, Var bv) {
    const Matrix& a = value(av);
    const Matrix& b = value(bv);
    if (a.cols != b.rows) throw Error("matmul: inner dimensions disagree");
    Matrix out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
      for (int k = 0; k < a.cols; ++k) {
        const double aik = a.at(i, k);
        if (aik == 0.0) continue;
        for (int j = 0; j < b.cols; ++j) out.at(i, j) += aik * b.at(k, j);
      }
    return emit(std::move(out), [this, av, bv](const Matrix& g) {
      const Matrix& a = value(av);
      const Matrix& b = value(bv);
      Matrix& ga = nodes_[av.id].grad;
      Matrix& gb = nodes_[bv.id].grad;
      for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.cols; ++j) {
          const double gij = g.at(i, j);
          if (gij == 0.0) continue;
          for (int k = 0; k < a.cols; ++k) {
            ga.at(i, k) += gij * b.at(k, j);
            gb.at(k, j) += a.at(i, k) * gij;
          }
        }
    });
  }

  Var transpose(Var av) {
    const Matrix& a = value(av);
    Matrix out(a.cols, a.rows);
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
    return emit(std::move(out), [this, av](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
    });
  }

  Var add(Var av, Var bv) {
    const Matrix& a = value(av);
    const Matrix& b = value(bv);
    if (a.rows != b.rows || a.cols != b.cols) throw Error("add: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.a[i] += b.a[i];
    return emit(std::move(out), [this, av, bv](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      Matrix& gb = nodes_[bv.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.a[i] += g.a[i];
        gb.a[i] += g.a[i];
      }
    });
  }

  Var scale(Var av, double s) {
    Matrix out = value(av);
    for (double& v : out.a) v *= s;
    return emit(std::move(out), [this, av, s](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += s * g.a[i];
    });
  }

  // rows of `a` plus a 1×c bias row
  Var add_bias(Var av, Var biasv) {
    const Matrix& a = value(av);
    const Matrix& bias = value(biasv);
    if (bias.rows != 1 || bias.cols != a.cols) throw Error("add_bias: shape mismatch");
    Matrix out = a;
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) out.at(i, j) += bias.at(0, j);
    return emit(std::move(out), [this, av, biasv](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      Matrix& gb = nodes_[biasv.id].grad;
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) {
          ga.at(i, j) += g.at(i, j);
          gb.at(0, j) += g.at(i, j);
        }
    });
  }

  Var softmax_rows(Var av) {
    const Matrix& a = value(av);
    Matrix out(a.rows, a.cols);
    for (int i = 0; i < a.rows; ++i) {
      double mx = a.at(i, 0);
      for (int j = 1; j < a.cols; ++j) mx = std::max(mx, a.at(i, j));
      double sum = 0.0;
      for (int j = 0; j < a.cols; ++j) {
        out.at(i, j) = std::exp(a.at(i, j) - mx);
        sum += out.at(i, j);
      }
      for (int j = 0; j < a.cols; ++j) out.at(i, j) /= sum;
    }
    const int id = next_id();
    return emit(std::move(out), [this, av, id](const Matrix& g) {
      const Matrix& y = nodes_[id].val;
      Matrix& ga = nodes_[av.id].grad;
      for (int i = 0; i < y.rows; ++i) {
        double dot = 0.0;
        for (int j = 0; j < y.cols; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < y.cols; ++j)
          ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    });
  }

  Var tanh_act(Var av) {
    Matrix out = value(av);
    for (double& v : out.a) v = std::tanh(v);
    const int id = next_id();
    return emit(std::move(out), [this, av, id](const Matrix& g) {
      const Matrix& y = nodes_[id].val;
      Matrix& ga = nodes_[av.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.a[i] += (1.0 - y.a[i] * y.a[i]) * g.a[i];
    });
  }

  Var sigmoid(Var av) {
    Matrix out = value(av);
    for (double& v : out.a) v = 1.0 / (1.0 + std::exp(-v));
    const int id = next_id();
    return emit(std::move(out), [this, av, id](const Matrix& g) {
      const Matrix& y = nodes_[id].val;
      Matrix& ga = nodes_[av.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        ga.a[i] += y.a[i] * (1.0 - y.a[i]) * g.a[i];
    });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw Error("concat_rows: nothing to concatenate");
    const int cols = value(parts[0]).cols;
    int rows = 0;
    for (Var p : parts) {
      if (value(p).cols != cols) throw Error("concat_rows: column mismatch");
      rows += value(p).rows;
    }
    Matrix out(rows, cols);
    int r = 0;
    for (Var p : parts) {
      const Matrix& m = value(p);
      for (int i = 0; i < m.rows; ++i, ++r)
        for (int j = 0; j < cols; ++j) out.at(r, j) = m.at(i, j);
    }
    return emit(std::move(out), [this, parts](const Matrix& g) {
      int r = 0;
      for (Var p : parts) {
        Matrix& gp = nodes_[p.id].grad;
        for (int i = 0; i < gp.rows; ++i, ++r)
          for (int j = 0; j < gp.cols; ++j) gp.at(i, j) += g.at(r, j);
      }
    });
  }

  Var slice_rows(Var av, int r0, int r1) {
    const Matrix& a = value(av);
    if (r0 < 0 || r1 > a.rows || r0 >= r1) throw Error("slice_rows: bad range");
    Matrix out(r1 - r0, a.cols);
    for (int i = r0; i < r1; ++i)
      for (int j = 0; j < a.cols; ++j) out.at(i - r0, j) = a.at(i, j);
    return emit(std::move(out), [this, av, r0](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) ga.at(r0 + i, j) += g.at(i, j);
    });
  }

  Var reshape(Var av, int rows, int cols) {
    const Matrix& a = value(av);
    if (static_cast<std::size_t>(rows) * cols != a.size())
      throw Error("reshape: element count mismatch");
    Matrix out(rows, cols);
    out.a = a.a;
    return emit(std::move(out), [this, av](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
    });
  }

  Var mean_rows(Var av) {
    const Matrix& a = value(av);
    Matrix out(1, a.cols);
    for (int i = 0; i < a.rows; ++i)
      for (int j = 0; j < a.cols; ++j) out.at(0, j) += a.at(i, j);
    for (int j = 0; j < a.cols; ++j) out.at(0, j) /= a.rows;
    const int rows = a.rows;
    return emit(std::move(out), [this, av, rows](const Matrix& g) {
      Matrix& ga = nodes_[av.id].grad;
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < g.cols; ++j) ga.at(i, j) += g.at(0, j) / rows;
    });
  }

  // Mean BCE of sigmoid probabilities against a fixed 0/1 target, matching
  // bce_mask_loss (including the ε clamp) bit for bit.
  Var bce_mean(Var probsv, const BinaryMask& target, double epsilon = 1e-7) {
    const Matrix& p = value(probsv);
    if (p.rows != target.height || p.cols != target.width)
      throw Error("bce_mean: shape mismatch");
    SoftMask sm(p.rows, p.cols);
    sm.probs = p.a;
    Matrix out(1, 1, bce_mask_loss(sm, target, epsilon));
    return emit(std::move(out), [this, probsv, target, epsilon](const Matrix& g) {
      const Matrix& p = value(probsv);
      SoftMask sm(p.rows, p.cols);
      sm.probs = p.a;
      const auto dp = bce_mask_grad(sm, target, epsilon);
      Matrix& gp = nodes_[probsv.id].grad;
      for (std::size_t i = 0; i < dp.size(); ++i) gp.a[i] += g.a[0] * dp[i];
    });
  }

  void backward(Var out) {
    Node& last = nodes_.at(check(out));
    if (last.val.rows != 1 || last.val.cols != 1)
      throw Error("backward: output must be scalar");
    for (Node& n : nodes_) n.grad = Matrix(n.val.rows, n.val.cols);
    last.grad.a[0] = 1.0;
    for (int i = out.id; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(nodes_[i].grad);
  }

 private:
  struct Node {
    Matrix val;
    Matrix grad;
    std::function<void(const Matrix&)> back;
  };

  int check(Var v) const {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw Error("Tape: invalid variable");
    return v.id;
  }

  int next_id() const { return static_cast<int>(nodes_.size()); }

  Var emit(Matrix out, std::function<void(const Matrix&)> back) {
    Node n;
    n.val = std::move(out);
    n.grad = Matrix(n.val.rows, n.val.cols);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace occuray::autodiff
