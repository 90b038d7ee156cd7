#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/rng.hpp"

namespace pbt {

// Eager tape for reverse-mode differentiation. Ops are an enum rather than
// stored closures: the gradient check sweeps tens of thousands of forward
// passes and virtual dispatch per node is measurable there.
enum class Op {
  Leaf,
  Add,
  Sub,
  MulElem,
  ScaleConst,
  MatMulNN,   // A * B
  MatMulNT,   // A * B^T
  AddRowVec,  // X + broadcast 1xC row
  LeakyRelu,
  Gelu,
  LayerNormRows,
  SoftmaxRowsMasked,
  SliceCols,
  ConcatCols,
  PickRow,
  PickElem,
  MulScalar,  // X * s, s a 1x1 node
  PadRows,    // zero-extend to a larger row count
  ZeroRows,
  SumAll,
  MeanAll,
  Dropout,
};

struct Node {
  Op op = Op::Leaf;
  int a0 = -1, a1 = -1, a2 = -1;
  Mat val;
  Mat grad;
  double s0 = 0.0;
  int i0 = 0, i1 = 0;
  std::vector<double> extra;  // per-op payload: row/col masks, LN inverse stds
  Mat aux;                    // per-op cache: LN x-hat, dropout keep mask
};

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;

class Graph {
 public:
  std::vector<Node> nodes;

  void reset() {
    nodes.clear();
    params_.clear();
  }

  const Mat& val(int id) const { return nodes[id].val; }
  const Mat& grad(int id) const { return nodes[id].grad; }

  int input(Mat v) {
    Node n;
    n.op = Op::Leaf;
    n.val = std::move(v);
    return push(std::move(n));
  }

  // Memoized by address: every use of a parameter within one tape shares a
  // node, so gradients from all batch elements accumulate into it.
  int param(const Mat& m) {
    auto it = params_.find(&m);
    if (it != params_.end()) return it->second;
    int id = input(m);
    params_.emplace(&m, id);
    return id;
  }

  bool has_param(const Mat& m) const { return params_.count(&m) != 0; }

  const Mat& grad_of(const Mat& m) const {
    auto it = params_.find(&m);
    assert(it != params_.end());
    return nodes[it->second].grad;
  }

  int add(int a, int b) {
    assert(nodes[a].val.same_shape(nodes[b].val));
    Node n;
    n.op = Op::Add;
    n.a0 = a;
    n.a1 = b;
    n.val = nodes[a].val;
    add_inplace(n.val, nodes[b].val);
    return push(std::move(n));
  }

  int sub(int a, int b) {
    assert(nodes[a].val.same_shape(nodes[b].val));
    Node n;
    n.op = Op::Sub;
    n.a0 = a;
    n.a1 = b;
    n.val = nodes[a].val;
    for (size_t i = 0; i < n.val.a.size(); ++i) n.val.a[i] -= nodes[b].val.a[i];
    return push(std::move(n));
  }

  int mul_elem(int a, int b) {
    assert(nodes[a].val.same_shape(nodes[b].val));
    Node n;
    n.op = Op::MulElem;
    n.a0 = a;
    n.a1 = b;
    n.val = nodes[a].val;
    for (size_t i = 0; i < n.val.a.size(); ++i) n.val.a[i] *= nodes[b].val.a[i];
    return push(std::move(n));
  }

  int scale(int a, double c) {
    Node n;
    n.op = Op::ScaleConst;
    n.a0 = a;
    n.s0 = c;
    n.val = nodes[a].val;
    for (double& v : n.val.a) v *= c;
    return push(std::move(n));
  }

  int matmul_nn(int a, int b) {
    Node n;
    n.op = Op::MatMulNN;
    n.a0 = a;
    n.a1 = b;
    n.val = pbt::matmul_nn(nodes[a].val, nodes[b].val);
    return push(std::move(n));
  }

  int matmul_nt(int a, int b) {
    Node n;
    n.op = Op::MatMulNT;
    n.a0 = a;
    n.a1 = b;
    n.val = pbt::matmul_nt(nodes[a].val, nodes[b].val);
    return push(std::move(n));
  }

  int add_row_vec(int a, int b) {
    const Mat& x = nodes[a].val;
    const Mat& r = nodes[b].val;
    assert(r.rows == 1 && r.cols == x.cols);
    Node n;
    n.op = Op::AddRowVec;
    n.a0 = a;
    n.a1 = b;
    n.val = x;
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < x.cols; ++j) n.val(i, j) += r(0, j);
    return push(std::move(n));
  }

  // y = x @ W^T + b with W stored (out, in) and b (1, out).
  int linear(int x, int w, int b) { return add_row_vec(matmul_nt(x, w), b); }

  int leaky_relu(int a, double slope) {
    Node n;
    n.op = Op::LeakyRelu;
    n.a0 = a;
    n.s0 = slope;
    n.val = nodes[a].val;
    for (double& v : n.val.a)
      if (v < 0.0) v *= slope;
    return push(std::move(n));
  }

  int gelu(int a) {
    Node n;
    n.op = Op::Gelu;
    n.a0 = a;
    n.val = nodes[a].val;
    for (double& v : n.val.a) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    return push(std::move(n));
  }

  // Per-row normalization with affine parameters; population variance.
  int layer_norm_rows(int x, int gamma, int beta, double eps = 1e-5) {
    const Mat& xv = nodes[x].val;
    const Mat& gv = nodes[gamma].val;
    const Mat& bv = nodes[beta].val;
    assert(gv.rows == 1 && gv.cols == xv.cols);
    assert(bv.rows == 1 && bv.cols == xv.cols);
    Node n;
    n.op = Op::LayerNormRows;
    n.a0 = x;
    n.a1 = gamma;
    n.a2 = beta;
    n.s0 = eps;
    n.val = Mat(xv.rows, xv.cols);
    n.aux = Mat(xv.rows, xv.cols);
    n.extra.resize(static_cast<size_t>(xv.rows));
    const double inv_c = 1.0 / xv.cols;
    for (int i = 0; i < xv.rows; ++i) {
      double mu = 0.0;
      for (int j = 0; j < xv.cols; ++j) mu += xv(i, j);
      mu *= inv_c;
      double var = 0.0;
      for (int j = 0; j < xv.cols; ++j) {
        double d = xv(i, j) - mu;
        var += d * d;
      }
      var *= inv_c;
      double inv = 1.0 / std::sqrt(var + eps);
      n.extra[static_cast<size_t>(i)] = inv;
      for (int j = 0; j < xv.cols; ++j) {
        double xh = (xv(i, j) - mu) * inv;
        n.aux(i, j) = xh;
        n.val(i, j) = gv(0, j) * xh + bv(0, j);
      }
    }
    return push(std::move(n));
  }

  // Softmax over each row restricted to columns with key_valid != 0; invalid
  // columns get probability exactly 0.
  int softmax_rows_masked(int a, const std::vector<double>& key_valid) {
    const Mat& x = nodes[a].val;
    assert(static_cast<int>(key_valid.size()) == x.cols);
    Node n;
    n.op = Op::SoftmaxRowsMasked;
    n.a0 = a;
    n.extra = key_valid;
    n.val = Mat(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
      double mx = -1e300;
      for (int j = 0; j < x.cols; ++j)
        if (key_valid[static_cast<size_t>(j)] != 0.0 && x(i, j) > mx) mx = x(i, j);
      double z = 0.0;
      for (int j = 0; j < x.cols; ++j) {
        if (key_valid[static_cast<size_t>(j)] != 0.0) {
          double e = std::exp(x(i, j) - mx);
          n.val(i, j) = e;
          z += e;
        }
      }
      if (z > 0.0) {
        double invz = 1.0 / z;
        for (int j = 0; j < x.cols; ++j) n.val(i, j) *= invz;
      }
    }
    return push(std::move(n));
  }

  int slice_cols(int a, int c0, int c1) {
    const Mat& x = nodes[a].val;
    assert(0 <= c0 && c0 < c1 && c1 <= x.cols);
    Node n;
    n.op = Op::SliceCols;
    n.a0 = a;
    n.i0 = c0;
    n.i1 = c1;
    n.val = Mat(x.rows, c1 - c0);
    for (int i = 0; i < x.rows; ++i)
      for (int j = c0; j < c1; ++j) n.val(i, j - c0) = x(i, j);
    return push(std::move(n));
  }

  int concat_cols(int a, int b) {
    const Mat& x = nodes[a].val;
    const Mat& y = nodes[b].val;
    assert(x.rows == y.rows);
    Node n;
    n.op = Op::ConcatCols;
    n.a0 = a;
    n.a1 = b;
    n.val = Mat(x.rows, x.cols + y.cols);
    for (int i = 0; i < x.rows; ++i) {
      for (int j = 0; j < x.cols; ++j) n.val(i, j) = x(i, j);
      for (int j = 0; j < y.cols; ++j) n.val(i, x.cols + j) = y(i, j);
    }
    return push(std::move(n));
  }

  int pick_row(int a, int r) {
    const Mat& x = nodes[a].val;
    assert(0 <= r && r < x.rows);
    Node n;
    n.op = Op::PickRow;
    n.a0 = a;
    n.i0 = r;
    n.val = Mat(1, x.cols);
    for (int j = 0; j < x.cols; ++j) n.val(0, j) = x(r, j);
    return push(std::move(n));
  }

  int pick_elem(int a, int r, int c) {
    const Mat& x = nodes[a].val;
    assert(0 <= r && r < x.rows && 0 <= c && c < x.cols);
    Node n;
    n.op = Op::PickElem;
    n.a0 = a;
    n.i0 = r;
    n.i1 = c;
    n.val = Mat(1, 1);
    n.val(0, 0) = x(r, c);
    return push(std::move(n));
  }

  // y = x * s where s is a 1x1 node.
  int mul_scalar(int x, int s) {
    assert(nodes[s].val.rows == 1 && nodes[s].val.cols == 1);
    Node n;
    n.op = Op::MulScalar;
    n.a0 = x;
    n.a1 = s;
    n.val = nodes[x].val;
    const double sv = nodes[s].val(0, 0);
    for (double& v : n.val.a) v *= sv;
    return push(std::move(n));
  }

  int pad_rows(int a, int total_rows) {
    const Mat& x = nodes[a].val;
    assert(total_rows >= x.rows);
    Node n;
    n.op = Op::PadRows;
    n.a0 = a;
    n.i0 = x.rows;
    n.val = Mat(total_rows, x.cols);
    for (int i = 0; i < x.rows; ++i)
      for (int j = 0; j < x.cols; ++j) n.val(i, j) = x(i, j);
    return push(std::move(n));
  }

  // Zeroes rows where row_valid == 0; keeps rows where it is 1.
  int zero_rows(int a, const std::vector<double>& row_valid) {
    const Mat& x = nodes[a].val;
    assert(static_cast<int>(row_valid.size()) == x.rows);
    Node n;
    n.op = Op::ZeroRows;
    n.a0 = a;
    n.extra = row_valid;
    n.val = x;
    for (int i = 0; i < x.rows; ++i)
      if (row_valid[static_cast<size_t>(i)] == 0.0)
        for (int j = 0; j < x.cols; ++j) n.val(i, j) = 0.0;
    return push(std::move(n));
  }

  int sum_all(int a) {
    Node n;
    n.op = Op::SumAll;
    n.a0 = a;
    n.val = Mat(1, 1);
    double s = 0.0;
    for (double v : nodes[a].val.a) s += v;
    n.val(0, 0) = s;
    return push(std::move(n));
  }

  int mean_all(int a) {
    Node n;
    n.op = Op::MeanAll;
    n.a0 = a;
    n.val = Mat(1, 1);
    double s = 0.0;
    for (double v : nodes[a].val.a) s += v;
    n.val(0, 0) = s / static_cast<double>(nodes[a].val.a.size());
    return push(std::move(n));
  }

  // Inverted dropout; identity when p == 0 or rng == nullptr (eval mode).
  int dropout(int a, double p, Rng* rng) {
    if (p <= 0.0 || rng == nullptr) return a;
    Node n;
    n.op = Op::Dropout;
    n.a0 = a;
    n.s0 = p;
    const Mat& x = nodes[a].val;
    n.val = Mat(x.rows, x.cols);
    n.aux = Mat(x.rows, x.cols);
    const double keep_scale = 1.0 / (1.0 - p);
    for (size_t i = 0; i < x.a.size(); ++i) {
      double m = (rng->uniform() >= p) ? keep_scale : 0.0;
      n.aux.a[i] = m;
      n.val.a[i] = x.a[i] * m;
    }
    return push(std::move(n));
  }

  void backward(int loss) {
    assert(nodes[loss].val.rows == 1 && nodes[loss].val.cols == 1);
    for (Node& n : nodes) {
      n.grad = Mat(n.val.rows, n.val.cols);
    }
    nodes[static_cast<size_t>(loss)].grad(0, 0) = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes[static_cast<size_t>(id)];
      const Mat& dy = n.grad;
      switch (n.op) {
        case Op::Leaf:
          break;
        case Op::Add: {
          add_inplace(nodes[n.a0].grad, dy);
          add_inplace(nodes[n.a1].grad, dy);
          break;
        }
        case Op::Sub: {
          add_inplace(nodes[n.a0].grad, dy);
          Mat& gb = nodes[n.a1].grad;
          for (size_t i = 0; i < gb.a.size(); ++i) gb.a[i] -= dy.a[i];
          break;
        }
        case Op::MulElem: {
          Mat& ga = nodes[n.a0].grad;
          Mat& gb = nodes[n.a1].grad;
          const Mat& av = nodes[n.a0].val;
          const Mat& bv = nodes[n.a1].val;
          for (size_t i = 0; i < dy.a.size(); ++i) {
            ga.a[i] += dy.a[i] * bv.a[i];
            gb.a[i] += dy.a[i] * av.a[i];
          }
          break;
        }
        case Op::ScaleConst: {
          Mat& ga = nodes[n.a0].grad;
          for (size_t i = 0; i < dy.a.size(); ++i) ga.a[i] += dy.a[i] * n.s0;
          break;
        }
        case Op::MatMulNN: {
          add_inplace(nodes[n.a0].grad, pbt::matmul_nt(dy, nodes[n.a1].val));
          add_inplace(nodes[n.a1].grad, pbt::matmul_tn(nodes[n.a0].val, dy));
          break;
        }
        case Op::MatMulNT: {
          add_inplace(nodes[n.a0].grad, pbt::matmul_nn(dy, nodes[n.a1].val));
          add_inplace(nodes[n.a1].grad, pbt::matmul_tn(dy, nodes[n.a0].val));
          break;
        }
        case Op::AddRowVec: {
          add_inplace(nodes[n.a0].grad, dy);
          Mat& gb = nodes[n.a1].grad;
          for (int i = 0; i < dy.rows; ++i)
            for (int j = 0; j < dy.cols; ++j) gb(0, j) += dy(i, j);
          break;
        }
        case Op::LeakyRelu: {
          Mat& ga = nodes[n.a0].grad;
          const Mat& xv = nodes[n.a0].val;
          for (size_t i = 0; i < dy.a.size(); ++i)
            ga.a[i] += dy.a[i] * (xv.a[i] > 0.0 ? 1.0 : n.s0);
          break;
        }
        case Op::Gelu: {
          Mat& ga = nodes[n.a0].grad;
          const Mat& xv = nodes[n.a0].val;
          for (size_t i = 0; i < dy.a.size(); ++i) {
            double x = xv.a[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
            ga.a[i] += dy.a[i] * (cdf + x * pdf);
          }
          break;
        }
        case Op::LayerNormRows: {
          Mat& gx = nodes[n.a0].grad;
          Mat& gg = nodes[n.a1].grad;
          Mat& gb = nodes[n.a2].grad;
          const Mat& gv = nodes[n.a1].val;
          const int C = dy.cols;
          const double inv_c = 1.0 / C;
          for (int i = 0; i < dy.rows; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (int j = 0; j < C; ++j) {
              double g = dy(i, j) * gv(0, j);
              m1 += g;
              m2 += g * n.aux(i, j);
            }
            m1 *= inv_c;
            m2 *= inv_c;
            const double inv = n.extra[static_cast<size_t>(i)];
            for (int j = 0; j < C; ++j) {
              double g = dy(i, j) * gv(0, j);
              gx(i, j) += inv * (g - m1 - n.aux(i, j) * m2);
              gg(0, j) += dy(i, j) * n.aux(i, j);
              gb(0, j) += dy(i, j);
            }
          }
          break;
        }
        case Op::SoftmaxRowsMasked: {
          Mat& gx = nodes[n.a0].grad;
          const Mat& p = n.val;
          for (int i = 0; i < dy.rows; ++i) {
            double s = 0.0;
            for (int j = 0; j < dy.cols; ++j) s += dy(i, j) * p(i, j);
            for (int j = 0; j < dy.cols; ++j) gx(i, j) += p(i, j) * (dy(i, j) - s);
          }
          break;
        }
        case Op::SliceCols: {
          Mat& gx = nodes[n.a0].grad;
          for (int i = 0; i < dy.rows; ++i)
            for (int j = 0; j < dy.cols; ++j) gx(i, n.i0 + j) += dy(i, j);
          break;
        }
        case Op::ConcatCols: {
          Mat& ga = nodes[n.a0].grad;
          Mat& gb = nodes[n.a1].grad;
          for (int i = 0; i < dy.rows; ++i) {
            for (int j = 0; j < ga.cols; ++j) ga(i, j) += dy(i, j);
            for (int j = 0; j < gb.cols; ++j) gb(i, j) += dy(i, ga.cols + j);
          }
          break;
        }
        case Op::PickRow: {
          Mat& gx = nodes[n.a0].grad;
          for (int j = 0; j < dy.cols; ++j) gx(n.i0, j) += dy(0, j);
          break;
        }
        case Op::PickElem: {
          nodes[n.a0].grad(n.i0, n.i1) += dy(0, 0);
          break;
        }
        case Op::MulScalar: {
          Mat& gx = nodes[n.a0].grad;
          Mat& gs = nodes[n.a1].grad;
          const Mat& xv = nodes[n.a0].val;
          const double sv = nodes[n.a1].val(0, 0);
          double acc = 0.0;
          for (size_t i = 0; i < dy.a.size(); ++i) {
            gx.a[i] += dy.a[i] * sv;
            acc += dy.a[i] * xv.a[i];
          }
          gs(0, 0) += acc;
          break;
        }
        case Op::PadRows: {
          Mat& gx = nodes[n.a0].grad;
          for (int i = 0; i < n.i0; ++i)
            for (int j = 0; j < dy.cols; ++j) gx(i, j) += dy(i, j);
          break;
        }
        case Op::ZeroRows: {
          Mat& gx = nodes[n.a0].grad;
          for (int i = 0; i < dy.rows; ++i) {
            if (n.extra[static_cast<size_t>(i)] == 0.0) continue;
            for (int j = 0; j < dy.cols; ++j) gx(i, j) += dy(i, j);
          }
          break;
        }
        case Op::SumAll: {
          Mat& gx = nodes[n.a0].grad;
          const double g = dy(0, 0);
          for (double& v : gx.a) v += g;
          break;
        }
        case Op::MeanAll: {
          Mat& gx = nodes[n.a0].grad;
          const double g = dy(0, 0) / static_cast<double>(gx.a.size());
          for (double& v : gx.a) v += g;
          break;
        }
        case Op::Dropout: {
          Mat& gx = nodes[n.a0].grad;
          for (size_t i = 0; i < dy.a.size(); ++i) gx.a[i] += dy.a[i] * n.aux.a[i];
          break;
        }
      }
    }
  }

 private:
  std::unordered_map<const Mat*, int> params_;

  int push(Node n) {
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }
};

}  // namespace pbt
