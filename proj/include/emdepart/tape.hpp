#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "emdepart/param.hpp"
#include "emdepart/rng.hpp"
#include "emdepart/tensor.hpp"

namespace emdepart {

// Reverse-mode tape. Each op appends a node holding its output value, a grad
// buffer of the same shape, and a closure that scatters the node's grad into
// its parents. Creation order is a topological order of the DAG, so backward
// is a single reverse sweep. One tape records one forward pass; build a fresh
// tape per step.
//
// Every op validates shapes up front and checks its output for NaN/Inf, so a
// numeric blow-up surfaces at the op that produced it.
class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;
    std::function<void(Node&)> back;  // null for leaves without parameters
  };

  class Value {
   public:
    Value() : node_(nullptr) {}
    explicit Value(Node* n) : node_(n) {}
    const Tensor& val() const { return node_->val; }
    const Shape& shape() const { return node_->val.shape; }
    Node* node() const { return node_; }
    bool defined() const { return node_ != nullptr; }

   private:
    Node* node_;
  };

  Value input(Tensor t) {
    t.check_finite("Tape::input");
    return make(std::move(t), nullptr);
  }

  Value constant(double v) { return input(Tensor::scalar(v)); }

  // Leaf backed by a Parameter; backward adds the leaf grad into p.grad.
  Value param(Parameter& p) {
    Parameter* pp = &p;
    Tensor v = p.value;
    v.check_finite("Tape::param " + p.name);
    return make(std::move(v), [pp](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pp->grad.data[i] += n.grad.data[i];
    });
  }

  // ---- elementwise ----

  Value add(Value a, Value b) {
    require_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += b.val().data[i];
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) {
        pa->grad.data[i] += n.grad.data[i];
        pb->grad.data[i] += n.grad.data[i];
      }
    });
  }

  Value sub(Value a, Value b) {
    require_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= b.val().data[i];
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) {
        pa->grad.data[i] += n.grad.data[i];
        pb->grad.data[i] -= n.grad.data[i];
      }
    });
  }

  Value mul(Value a, Value b) {
    require_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= b.val().data[i];
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) {
        pa->grad.data[i] += n.grad.data[i] * pb->val.data[i];
        pb->grad.data[i] += n.grad.data[i] * pa->val.data[i];
      }
    });
  }

  Value scale(Value a, double c) {
    Tensor out = a.val();
    for (auto& x : out.data) x *= c;
    Node* pa = a.node();
    return make(std::move(out), [pa, c](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pa->grad.data[i] += c * n.grad.data[i];
    });
  }

  // c - x, elementwise.
  Value rsub_const(Value a, double c) {
    Tensor out = a.val();
    for (auto& x : out.data) x = c - x;
    Node* pa = a.node();
    return make(std::move(out), [pa](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) pa->grad.data[i] -= n.grad.data[i];
    });
  }

  // max(0, x); the subgradient at x == 0 takes the zero branch.
  Value relu(Value a) {
    Tensor out = a.val();
    for (auto& x : out.data) x = x > 0.0 ? x : 0.0;
    Node* pa = a.node();
    return make(std::move(out), [pa](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i)
        if (pa->val.data[i] > 0.0) pa->grad.data[i] += n.grad.data[i];
    });
  }

  // sqrt(x + shift), elementwise. Requires x + shift >= 0. Where the output is
  // exactly 0 the derivative takes the zero branch instead of diverging.
  Value sqrt_shift(Value a, double shift) {
    Tensor out = a.val();
    for (auto& x : out.data) {
      double s = x + shift;
      if (s < 0.0) throw NumericError("sqrt_shift: negative operand " + std::to_string(s));
      x = std::sqrt(s);
    }
    Node* pa = a.node();
    return make(std::move(out), [pa](Node& n) {
      for (std::size_t i = 0; i < n.grad.numel(); ++i) {
        double y = n.val.data[i];
        if (y > 0.0) pa->grad.data[i] += n.grad.data[i] * 0.5 / y;
      }
    });
  }

  // ---- matrix products ----

  Value matmul(Value a, Value b) {
    const Tensor &A = a.val(), &B = b.val();
    A.require_rank(2, "matmul lhs");
    B.require_rank(2, "matmul rhs");
    if (A.cols() != B.rows())
      throw ShapeError("matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
    std::size_t m = A.rows(), k = A.cols(), n = B.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = A.at(i, p);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * B.at(p, j);
      }
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb, m, k, n](Node& nd) {
      const Tensor &A = pa->val, &B = pb->val, &G = nd.grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double g = G.at(i, j);
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            pa->grad.at(i, p) += g * B.at(p, j);
            pb->grad.at(p, j) += g * A.at(i, p);
          }
        }
    });
  }

  // A * B^T without materializing the transpose.
  Value matmul_nt(Value a, Value b) {
    const Tensor &A = a.val(), &B = b.val();
    A.require_rank(2, "matmul_nt lhs");
    B.require_rank(2, "matmul_nt rhs");
    if (A.cols() != B.cols())
      throw ShapeError("matmul_nt: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape) +
                       "^T");
    std::size_t m = A.rows(), k = A.cols(), n = B.rows();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += A.at(i, p) * B.at(j, p);
        out.at(i, j) = s;
      }
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb, m, k, n](Node& nd) {
      const Tensor &A = pa->val, &B = pb->val, &G = nd.grad;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double g = G.at(i, j);
          if (g == 0.0) continue;
          for (std::size_t p = 0; p < k; ++p) {
            pa->grad.at(i, p) += g * B.at(j, p);
            pb->grad.at(j, p) += g * A.at(i, p);
          }
        }
    });
  }

  // ---- reductions and row ops ----

  // axis 0: column means -> [cols]; axis 1: row means -> [rows]
  Value reduce_mean(Value a, int axis) {
    const Tensor& A = a.val();
    A.require_rank(2, "reduce_mean");
    std::size_t m = A.rows(), n = A.cols();
    Node* pa = a.node();
    if (axis == 0) {
      Tensor out({n});
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j) += A.at(i, j);
      for (auto& x : out.data) x /= static_cast<double>(m);
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            pa->grad.at(i, j) += nd.grad.at(j) / static_cast<double>(m);
      });
    }
    if (axis == 1) {
      Tensor out({m});
      for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += A.at(i, j);
        out.at(i) = s / static_cast<double>(n);
      }
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j)
            pa->grad.at(i, j) += nd.grad.at(i) / static_cast<double>(n);
      });
    }
    throw ShapeError("reduce_mean: axis must be 0 or 1");
  }

  // axis 0: column max -> [cols]; axis 1: row max -> [rows].
  // Ties route the gradient to the lowest index.
  Value reduce_max(Value a, int axis) {
    const Tensor& A = a.val();
    A.require_rank(2, "reduce_max");
    std::size_t m = A.rows(), n = A.cols();
    Node* pa = a.node();
    if (axis != 0 && axis != 1) throw ShapeError("reduce_max: axis must be 0 or 1");
    std::size_t out_n = axis == 0 ? n : m;
    Tensor out({out_n});
    auto arg = std::make_shared<std::vector<std::size_t>>(out_n, 0);
    for (std::size_t t = 0; t < out_n; ++t) {
      std::size_t span = axis == 0 ? m : n;
      double best = axis == 0 ? A.at(0, t) : A.at(t, 0);
      std::size_t best_i = 0;
      for (std::size_t s = 1; s < span; ++s) {
        double v = axis == 0 ? A.at(s, t) : A.at(t, s);
        if (v > best) {
          best = v;
          best_i = s;
        }
      }
      out.at(t) = best;
      (*arg)[t] = best_i;
    }
    return make(std::move(out), [pa, arg, axis](Node& nd) {
      for (std::size_t t = 0; t < nd.grad.numel(); ++t) {
        std::size_t s = (*arg)[t];
        if (axis == 0)
          pa->grad.at(s, t) += nd.grad.at(t);
        else
          pa->grad.at(t, s) += nd.grad.at(t);
      }
    });
  }

  Value sum_all(Value a) {
    double s = 0.0;
    for (double v : a.val().data) s += v;
    Node* pa = a.node();
    return make(Tensor::scalar(s), [pa](Node& nd) {
      double g = nd.grad.at(0);
      for (auto& x : pa->grad.data) x += g;
    });
  }

  Value mean_all(Value a) {
    std::size_t n = a.val().numel();
    double s = 0.0;
    for (double v : a.val().data) s += v;
    Node* pa = a.node();
    return make(Tensor::scalar(s / static_cast<double>(n)), [pa, n](Node& nd) {
      double g = nd.grad.at(0) / static_cast<double>(n);
      for (auto& x : pa->grad.data) x += g;
    });
  }

  // x[m,n] + v[n] broadcast over rows.
  Value add_rowvec(Value a, Value v) {
    const Tensor &A = a.val(), &V = v.val();
    A.require_rank(2, "add_rowvec lhs");
    V.require_rank(1, "add_rowvec rhs");
    if (A.cols() != V.numel())
      throw ShapeError("add_rowvec: " + shape_str(A.shape) + " + " + shape_str(V.shape));
    Tensor out = A;
    for (std::size_t i = 0; i < A.rows(); ++i)
      for (std::size_t j = 0; j < A.cols(); ++j) out.at(i, j) += V.at(j);
    Node *pa = a.node(), *pv = v.node();
    return make(std::move(out), [pa, pv](Node& nd) {
      std::size_t m = nd.grad.rows(), n = nd.grad.cols();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double g = nd.grad.at(i, j);
          pa->grad.at(i, j) += g;
          pv->grad.at(j) += g;
        }
    });
  }

  // v[n] stacked k times -> [k,n].
  Value repeat_row(Value v, std::size_t k) {
    const Tensor& V = v.val();
    V.require_rank(1, "repeat_row");
    std::size_t n = V.numel();
    Tensor out({k, n});
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = V.at(j);
    Node* pv = v.node();
    return make(std::move(out), [pv, k, n](Node& nd) {
      for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) pv->grad.at(j) += nd.grad.at(i, j);
    });
  }

  // rows [r0, r1) of x.
  Value row_slice(Value a, std::size_t r0, std::size_t r1) {
    const Tensor& A = a.val();
    A.require_rank(2, "row_slice");
    if (r0 >= r1 || r1 > A.rows())
      throw ShapeError("row_slice: [" + std::to_string(r0) + "," + std::to_string(r1) +
                       ") out of " + std::to_string(A.rows()) + " rows");
    std::size_t n = A.cols();
    Tensor out({r1 - r0, n});
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i - r0, j) = A.at(i, j);
    Node* pa = a.node();
    return make(std::move(out), [pa, r0, n](Node& nd) {
      for (std::size_t i = 0; i < nd.grad.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) pa->grad.at(r0 + i, j) += nd.grad.at(i, j);
    });
  }

  // single row of x as rank-1.
  Value row(Value a, std::size_t r) {
    const Tensor& A = a.val();
    A.require_rank(2, "row");
    if (r >= A.rows()) throw ShapeError("row: index " + std::to_string(r) + " out of range");
    std::size_t n = A.cols();
    Tensor out({n});
    for (std::size_t j = 0; j < n; ++j) out.at(j) = A.at(r, j);
    Node* pa = a.node();
    return make(std::move(out), [pa, r, n](Node& nd) {
      for (std::size_t j = 0; j < n; ++j) pa->grad.at(r, j) += nd.grad.at(j);
    });
  }

  Value concat_rows(Value a, Value b) {
    const Tensor &A = a.val(), &B = b.val();
    A.require_rank(2, "concat_rows lhs");
    B.require_rank(2, "concat_rows rhs");
    if (A.cols() != B.cols())
      throw ShapeError("concat_rows: " + shape_str(A.shape) + " over " + shape_str(B.shape));
    std::size_t ma = A.rows(), mb = B.rows(), n = A.cols();
    Tensor out({ma + mb, n});
    for (std::size_t i = 0; i < ma; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = A.at(i, j);
    for (std::size_t i = 0; i < mb; ++i)
      for (std::size_t j = 0; j < n; ++j) out.at(ma + i, j) = B.at(i, j);
    Node *pa = a.node(), *pb = b.node();
    return make(std::move(out), [pa, pb, ma, n](Node& nd) {
      for (std::size_t i = 0; i < nd.grad.rows(); ++i)
        for (std::size_t j = 0; j < n; ++j) {
          if (i < ma)
            pa->grad.at(i, j) += nd.grad.at(i, j);
          else
            pb->grad.at(i - ma, j) += nd.grad.at(i, j);
        }
    });
  }

  // rank-1 row vector -> [1,n]
  Value as_row_matrix(Value v) {
    const Tensor& V = v.val();
    V.require_rank(1, "as_row_matrix");
    std::size_t n = V.numel();
    Tensor out({1, n});
    out.data = V.data;
    Node* pv = v.node();
    return make(std::move(out), [pv, n](Node& nd) {
      for (std::size_t j = 0; j < n; ++j) pv->grad.at(j) += nd.grad.data[j];
    });
  }

  Value stack_scalars(const std::vector<Value>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty input");
    Tensor out({xs.size()});
    auto parents = std::make_shared<std::vector<Node*>>();
    parents->reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (xs[i].val().numel() != 1) throw ShapeError("stack_scalars: entry is not scalar");
      out.at(i) = xs[i].val().data[0];
      parents->push_back(xs[i].node());
    }
    return make(std::move(out), [parents](Node& nd) {
      for (std::size_t i = 0; i < parents->size(); ++i)
        (*parents)[i]->grad.data[0] += nd.grad.at(i);
    });
  }

  Value index(Value a, std::size_t i) {
    const Tensor& A = a.val();
    A.require_rank(1, "index");
    if (i >= A.numel()) throw ShapeError("index: out of range");
    Node* pa = a.node();
    return make(Tensor::scalar(A.at(i)), [pa, i](Node& nd) { pa->grad.at(i) += nd.grad.at(0); });
  }

  // Flat dot product; shapes may differ as long as element counts match
  // (used for the [r,1] scoring head against a rank-1 pooled vector).
  Value dot(Value a, Value b) {
    const Tensor &A = a.val(), &B = b.val();
    if (A.numel() != B.numel())
      throw ShapeError("dot: element counts " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    double s = 0.0;
    for (std::size_t i = 0; i < A.numel(); ++i) s += A.data[i] * B.data[i];
    Node *pa = a.node(), *pb = b.node();
    return make(Tensor::scalar(s), [pa, pb](Node& nd) {
      double g = nd.grad.at(0);
      for (std::size_t i = 0; i < pa->grad.numel(); ++i) {
        pa->grad.data[i] += g * pb->val.data[i];
        pb->grad.data[i] += g * pa->val.data[i];
      }
    });
  }

  // ---- nonlinear / normalizing ----

  // rank-1: softmax over the vector (axis ignored);
  // rank-2: axis 1 normalizes each row, axis 0 each column.
  Value softmax(Value a, int axis = 1) {
    const Tensor& A = a.val();
    if (A.rank() == 1) {
      Tensor out = softmax_slice(A.data);
      Node* pa = a.node();
      return make(std::move(out), [pa](Node& nd) { softmax_back_slice(nd, pa, 0, 1, nd.val.numel()); });
    }
    A.require_rank(2, "softmax");
    std::size_t m = A.rows(), n = A.cols();
    Tensor out({m, n});
    Node* pa = a.node();
    if (axis == 1) {
      for (std::size_t i = 0; i < m; ++i) softmax_fill(A, out, i * n, 1, n);
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t i = 0; i < m; ++i) softmax_back_slice(nd, pa, i * n, 1, n);
      });
    }
    if (axis == 0) {
      for (std::size_t j = 0; j < n; ++j) softmax_fill(A, out, j, n, m);
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t j = 0; j < n; ++j) softmax_back_slice(nd, pa, j, n, m);
      });
    }
    throw ShapeError("softmax: axis must be 0 or 1");
  }

  // rank-1 -> scalar; rank-2 axis 1 -> [rows], axis 0 -> [cols].
  Value logsumexp(Value a, int axis = 1) {
    const Tensor& A = a.val();
    Node* pa = a.node();
    if (A.rank() == 1) {
      Tensor out({1});
      out.at(0) = lse_slice(A, 0, 1, A.numel());
      return make(std::move(out), [pa](Node& nd) {
        lse_back_slice(nd.grad.at(0), nd.val.at(0), pa, 0, 1, pa->val.numel());
      });
    }
    A.require_rank(2, "logsumexp");
    std::size_t m = A.rows(), n = A.cols();
    if (axis == 1) {
      Tensor out({m});
      for (std::size_t i = 0; i < m; ++i) out.at(i) = lse_slice(A, i * n, 1, n);
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t i = 0; i < m; ++i)
          lse_back_slice(nd.grad.at(i), nd.val.at(i), pa, i * n, 1, n);
      });
    }
    if (axis == 0) {
      Tensor out({n});
      for (std::size_t j = 0; j < n; ++j) out.at(j) = lse_slice(A, j, n, m);
      return make(std::move(out), [pa, m, n](Node& nd) {
        for (std::size_t j = 0; j < n; ++j)
          lse_back_slice(nd.grad.at(j), nd.val.at(j), pa, j, n, m);
      });
    }
    throw ShapeError("logsumexp: axis must be 0 or 1");
  }

  // Per-row layer normalization with learnable gain and bias. Population
  // variance; a zero-variance row maps to bias (the normalized row is 0).
  Value layer_norm(Value a, Value gain, Value bias, double eps) {
    const Tensor& A = a.val();
    bool vec = A.rank() == 1;
    std::size_t m = vec ? 1 : A.rows();
    std::size_t n = vec ? A.numel() : A.cols();
    const Tensor &G = gain.val(), &Bv = bias.val();
    if (G.numel() != n || Bv.numel() != n)
      throw ShapeError("layer_norm: gain/bias size " + std::to_string(G.numel()) + "/" +
                       std::to_string(Bv.numel()) + " for width " + std::to_string(n));
    Tensor out = A;
    auto xhat = std::make_shared<Tensor>(A.shape);
    auto inv_sd = std::make_shared<std::vector<double>>(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += A.data[i * n + j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double d = A.data[i * n + j] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      double isd = 1.0 / std::sqrt(var + eps);
      (*inv_sd)[i] = isd;
      for (std::size_t j = 0; j < n; ++j) {
        double xh = (A.data[i * n + j] - mean) * isd;
        xhat->data[i * n + j] = xh;
        out.data[i * n + j] = G.data[j] * xh + Bv.data[j];
      }
    }
    Node *pa = a.node(), *pg = gain.node(), *pb = bias.node();
    return make(std::move(out), [pa, pg, pb, xhat, inv_sd, m, n](Node& nd) {
      for (std::size_t i = 0; i < m; ++i) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double dxhat = nd.grad.data[i * n + j] * pg->val.data[j];
          double xh = xhat->data[i * n + j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xh;
          pg->grad.data[j] += nd.grad.data[i * n + j] * xh;
          pb->grad.data[j] += nd.grad.data[i * n + j];
        }
        mean_dxhat /= static_cast<double>(n);
        mean_dxhat_xhat /= static_cast<double>(n);
        double isd = (*inv_sd)[i];
        for (std::size_t j = 0; j < n; ++j) {
          double dxhat = nd.grad.data[i * n + j] * pg->val.data[j];
          double xh = xhat->data[i * n + j];
          pa->grad.data[i * n + j] += isd * (dxhat - mean_dxhat - xh * mean_dxhat_xhat);
        }
      }
    });
  }

  // tanh-approximate GELU: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))
  Value gelu(Value a) {
    static constexpr double kC1 = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kC2 = 0.044715;
    Tensor out = a.val();
    for (auto& x : out.data) {
      double t = std::tanh(kC1 * (x + kC2 * x * x * x));
      x = 0.5 * x * (1.0 + t);
    }
    Node* pa = a.node();
    return make(std::move(out), [pa](Node& nd) {
      for (std::size_t i = 0; i < nd.grad.numel(); ++i) {
        double x = pa->val.data[i];
        double u = kC1 * (x + kC2 * x * x * x);
        double t = std::tanh(u);
        double d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC1 * (1.0 + 3.0 * kC2 * x * x);
        pa->grad.data[i] += nd.grad.data[i] * d;
      }
    });
  }

  // Inverted dropout: kept entries scale by 1/(1-rate). Identity (and no RNG
  // draws) when not training or rate == 0, so eval never perturbs RNG streams.
  Value dropout(Value a, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0)
      throw DataError("dropout: rate " + std::to_string(rate) + " outside [0,1)");
    if (!training || rate == 0.0) {
      Tensor out = a.val();
      Node* pa = a.node();
      return make(std::move(out), [pa](Node& nd) {
        for (std::size_t i = 0; i < nd.grad.numel(); ++i) pa->grad.data[i] += nd.grad.data[i];
      });
    }
    double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(a.val().numel());
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) {
      double m = rng.uniform() < rate ? 0.0 : keep_scale;
      (*mask)[i] = m;
      out.data[i] *= m;
    }
    Node* pa = a.node();
    return make(std::move(out), [pa, mask](Node& nd) {
      for (std::size_t i = 0; i < nd.grad.numel(); ++i)
        pa->grad.data[i] += nd.grad.data[i] * (*mask)[i];
    });
  }

  // Rows rescaled to unit L2 norm; a (near-)zero row is an error because a
  // cosine against it is undefined.
  Value row_l2_normalize(Value a) {
    const Tensor& A = a.val();
    A.require_rank(2, "row_l2_normalize");
    std::size_t m = A.rows(), n = A.cols();
    Tensor out({m, n});
    auto norms = std::make_shared<std::vector<double>>(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += A.at(i, j) * A.at(i, j);
      double nrm = std::sqrt(s);
      if (nrm < 1e-150) throw NumericError("row_l2_normalize: zero-norm row " + std::to_string(i));
      (*norms)[i] = nrm;
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) = A.at(i, j) / nrm;
    }
    Node* pa = a.node();
    return make(std::move(out), [pa, norms, m, n](Node& nd) {
      for (std::size_t i = 0; i < m; ++i) {
        double gy = 0.0;
        for (std::size_t j = 0; j < n; ++j) gy += nd.grad.at(i, j) * nd.val.at(i, j);
        for (std::size_t j = 0; j < n; ++j)
          pa->grad.at(i, j) += (nd.grad.at(i, j) - gy * nd.val.at(i, j)) / (*norms)[i];
      }
    });
  }

  // ---- engine ----

  // Seeds d(loss)/d(loss) = 1, sweeps nodes newest-first, then parameter
  // leaves have flushed their grads (leaf closures add into Parameter::grad).
  void backward(Value loss) {
    if (ran_backward_) throw NumericError("Tape::backward: tape already swept");
    if (loss.val().numel() != 1)
      throw ShapeError("Tape::backward: loss has shape " + shape_str(loss.shape()));
    ran_backward_ = true;
    loss.node()->grad.data[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
      if (it->back) it->back(*it);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  Value make(Tensor out, std::function<void(Node&)> back) {
    out.check_finite("tape op output");
    nodes_.push_back(Node{std::move(out), Tensor(), std::move(back)});
    Node& n = nodes_.back();
    n.grad = Tensor(n.val.shape);
    return Value(&n);
  }

  static Tensor softmax_slice(const std::vector<double>& x) {
    Tensor out({x.size()});
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      out.at(i) = std::exp(x[i] - mx);
      z += out.at(i);
    }
    for (auto& v : out.data) v /= z;
    return out;
  }

  static void softmax_fill(const Tensor& A, Tensor& out, std::size_t base, std::size_t stride,
                           std::size_t count) {
    double mx = A.data[base];
    for (std::size_t s = 1; s < count; ++s) mx = std::max(mx, A.data[base + s * stride]);
    double z = 0.0;
    for (std::size_t s = 0; s < count; ++s) {
      double e = std::exp(A.data[base + s * stride] - mx);
      out.data[base + s * stride] = e;
      z += e;
    }
    for (std::size_t s = 0; s < count; ++s) out.data[base + s * stride] /= z;
  }

  static void softmax_back_slice(Node& nd, Node* pa, std::size_t base, std::size_t stride,
                                 std::size_t count) {
    double dot = 0.0;
    for (std::size_t s = 0; s < count; ++s)
      dot += nd.grad.data[base + s * stride] * nd.val.data[base + s * stride];
    for (std::size_t s = 0; s < count; ++s) {
      double y = nd.val.data[base + s * stride];
      pa->grad.data[base + s * stride] += y * (nd.grad.data[base + s * stride] - dot);
    }
  }

  static double lse_slice(const Tensor& A, std::size_t base, std::size_t stride,
                          std::size_t count) {
    double mx = A.data[base];
    for (std::size_t s = 1; s < count; ++s) mx = std::max(mx, A.data[base + s * stride]);
    double z = 0.0;
    for (std::size_t s = 0; s < count; ++s) z += std::exp(A.data[base + s * stride] - mx);
    return mx + std::log(z);
  }

  static void lse_back_slice(double g, double lse, Node* pa, std::size_t base, std::size_t stride,
                             std::size_t count) {
    for (std::size_t s = 0; s < count; ++s)
      pa->grad.data[base + s * stride] += g * std::exp(pa->val.data[base + s * stride] - lse);
  }

  std::deque<Node> nodes_;
  bool ran_backward_ = false;
};

using Value = Tape::Value;

// x[m,in] * W[in,out] + b[out]
inline Value affine(Tape& t, Value x, Value W, Value b) { return t.add_rowvec(t.matmul(x, W), b); }

inline Value affine(Tape& t, Value x, Parameter& W, Parameter& b) {
  return affine(t, x, t.param(W), t.param(b));
}

struct AttentionOut {
  Value out;     // [m, dv]
  Value logits;  // [m, n], scaled by 1/sqrt(d) but pre-softmax
};

// Single-head scaled dot-product attention. Returns the output and the scaled
// pre-softmax logits, which downstream losses penalize directly.
inline AttentionOut scaled_attention(Tape& t, Value Q, Value K, Value V) {
  const Tensor &q = Q.val(), &k = K.val(), &v = V.val();
  q.require_rank(2, "scaled_attention Q");
  k.require_rank(2, "scaled_attention K");
  v.require_rank(2, "scaled_attention V");
  if (q.cols() != k.cols())
    throw ShapeError("scaled_attention: Q " + shape_str(q.shape) + " vs K " + shape_str(k.shape));
  if (k.rows() != v.rows())
    throw ShapeError("scaled_attention: K " + shape_str(k.shape) + " vs V " + shape_str(v.shape));
  Value logits = t.scale(t.matmul_nt(Q, K), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Value attn = t.softmax(logits, 1);
  return {t.matmul(attn, V), logits};
}

}  // namespace emdepart
