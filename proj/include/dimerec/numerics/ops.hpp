#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "dimerec/numerics/tape.hpp"

// Differentiable operations recorded on a Tape. Every op computes its value
// eagerly and registers a closure that maps the output gradient onto its
// inputs. Shapes are checked up front; the derivatives are covered by the
// finite-difference suite in tests/numerics_test.cpp.
namespace dimerec::ops {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

inline ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_matrix(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

inline void require_finite(const char* op, const Tensor& t) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

inline void axpy(Tensor& dst, const Tensor& src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

inline void check_segments(const char* op, const std::vector<std::size_t>& offsets, std::size_t rows) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
    throw DimensionError(std::string(op) + ": segment offsets must span [0, " + std::to_string(rows) + "]");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw DimensionError(std::string(op) + ": empty segment");
  }
}

}  // namespace detail

// C = A * B
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_matrix("matmul", av);
  detail::require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  Tensor out(Shape{av.rows(), bv.cols()});
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  return a.tape().record(std::move(out), {a.id(), b.id()}, [](const Tensor& g, GradContext& ctx) {
    const auto gm = detail::as_matrix(g);
    if (Tensor* ga = ctx.input_grad(0)) {
      detail::as_matrix(*ga).noalias() += gm * detail::as_matrix(ctx.input_value(1)).transpose();
    }
    if (Tensor* gb = ctx.input_grad(1)) {
      detail::as_matrix(*gb).noalias() += detail::as_matrix(ctx.input_value(0)).transpose() * gm;
    }
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::axpy(out, b.value());
  return a.tape().record(std::move(out), {a.id(), b.id()}, [](const Tensor& g, GradContext& ctx) {
    if (Tensor* ga = ctx.input_grad(0)) detail::axpy(*ga, g);
    if (Tensor* gb = ctx.input_grad(1)) detail::axpy(*gb, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  detail::axpy(out, b.value(), -1.0);
  return a.tape().record(std::move(out), {a.id(), b.id()}, [](const Tensor& g, GradContext& ctx) {
    if (Tensor* ga = ctx.input_grad(0)) detail::axpy(*ga, g);
    if (Tensor* gb = ctx.input_grad(1)) detail::axpy(*gb, g, -1.0);
  });
}

// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record(std::move(out), {a.id(), b.id()}, [](const Tensor& g, GradContext& ctx) {
    const Tensor& av = ctx.input_value(0);
    const Tensor& bv = ctx.input_value(1);
    if (Tensor* ga = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (Tensor* gb = ctx.input_grad(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= c;
  return a.tape().record(std::move(out), {a.id()}, [c](const Tensor& g, GradContext& ctx) {
    if (Tensor* ga = ctx.input_grad(0)) detail::axpy(*ga, g, c);
  });
}

// x (m x n) + b broadcast over rows; b has n elements.
inline Var add_bias(Var x, Var b) {
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " does not match " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  return x.tape().record(std::move(out), {x.id(), b.id()}, [n](const Tensor& g, GradContext& ctx) {
    if (Tensor* gx = ctx.input_grad(0)) detail::axpy(*gx, g);
    if (Tensor* gb = ctx.input_grad(1)) {
      Eigen::Map<Eigen::RowVectorXd>(gb->data(), static_cast<Eigen::Index>(n)) += detail::as_matrix(g).colwise().sum();
    }
  });
}

// tanh(x) = 1 - 2/(exp(2x) + 1) through Eigen's vectorised exp; absolute
// error stays within a few ulp of 1 and saturates cleanly at +-1.
inline Tensor tanh_values(const Tensor& x) {
  Tensor out(x.shape());
  Eigen::Map<const Eigen::ArrayXd> in(x.data(), static_cast<Eigen::Index>(x.size()));
  Eigen::Map<Eigen::ArrayXd> y(out.data(), static_cast<Eigen::Index>(out.size()));
  y = 1.0 - 2.0 / ((2.0 * in).exp() + 1.0);
  return out;
}

inline Var tanh(Var x) {
  Tensor out = tanh_values(x.value());
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x.id()}, [self, &tape = x.tape()](const Tensor& g, GradContext& ctx) {
    Tensor* gx = ctx.input_grad(0);
    if (!gx) return;
    const Tensor& y = tape.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

namespace detail {

// Softmax over a strided slice [begin, begin + count*stride) in place.
inline void softmax_slice(double* p, std::size_t count, std::size_t stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < count; ++i) mx = std::max(mx, p[i * stride]);
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    p[i * stride] = std::exp(p[i * stride] - mx);
    total += p[i * stride];
  }
  for (std::size_t i = 0; i < count; ++i) p[i * stride] /= total;
}

// dx = y * (g - sum(g*y)) over one slice.
inline void softmax_slice_grad(const double* y, const double* g, double* dx, std::size_t count, std::size_t stride) {
  double s = 0.0;
  for (std::size_t i = 0; i < count; ++i) s += g[i * stride] * y[i * stride];
  for (std::size_t i = 0; i < count; ++i) dx[i * stride] += y[i * stride] * (g[i * stride] - s);
}

}  // namespace detail

// Softmax of a matrix along `axis` (0: each column over rows, 1: each row
// over columns). Rank-1 input is a single row.
inline Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  if (xv.rank() > 2) throw DimensionError("softmax: rank > 2 unsupported");
  if (axis != 0 && axis != 1) throw DimensionError("softmax: axis must be 0 or 1");
  detail::require_finite("softmax", xv);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  if (axis == 1) {
    for (std::size_t r = 0; r < rows; ++r) detail::softmax_slice(out.data() + r * cols, cols, 1);
  } else {
    for (std::size_t c = 0; c < cols; ++c) detail::softmax_slice(out.data() + c, rows, cols);
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x.id()},
                         [self, axis, rows, cols, &tape = x.tape()](const Tensor& g, GradContext& ctx) {
                           Tensor* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const Tensor& y = tape.value(self);
                           if (axis == 1) {
                             for (std::size_t r = 0; r < rows; ++r) {
                               const std::size_t o = r * cols;
                               detail::softmax_slice_grad(y.data() + o, g.data() + o, gx->data() + o, cols, 1);
                             }
                           } else {
                             for (std::size_t c = 0; c < cols; ++c) {
                               detail::softmax_slice_grad(y.data() + c, g.data() + c, gx->data() + c, rows, cols);
                             }
                           }
                         });
}

// Column-wise softmax inside consecutive row segments [offsets[s], offsets[s+1]).
// This is a batch of axis-0 softmaxes over variable-length sequences.
inline Var segment_softmax(Var x, const std::vector<std::size_t>& offsets) {
  const Tensor& xv = x.value();
  detail::require_matrix("segment_softmax", xv);
  detail::check_segments("segment_softmax", offsets, xv.rows());
  detail::require_finite("segment_softmax", xv);
  const std::size_t cols = xv.cols();
  Tensor out = xv;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t n = offsets[s + 1] - offsets[s];
    for (std::size_t c = 0; c < cols; ++c) detail::softmax_slice(out.data() + offsets[s] * cols + c, n, cols);
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x.id()},
                         [self, offsets, cols, &tape = x.tape()](const Tensor& g, GradContext& ctx) {
                           Tensor* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const Tensor& y = tape.value(self);
                           for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
                             const std::size_t n = offsets[s + 1] - offsets[s];
                             for (std::size_t c = 0; c < cols; ++c) {
                               const std::size_t o = offsets[s] * cols + c;
                               detail::softmax_slice_grad(y.data() + o, g.data() + o, gx->data() + o, n, cols);
                             }
                           }
                         });
}

// For each segment s: out[s*K:(s+1)*K, :] = A_sᵀ · H_s where A_s, H_s are the
// segment's rows of A (rows x K) and H (rows x d).
inline Var segment_weighted_sum(Var a, Var h, const std::vector<std::size_t>& offsets) {
  const Tensor& av = a.value();
  const Tensor& hv = h.value();
  detail::require_matrix("segment_weighted_sum", av);
  detail::require_matrix("segment_weighted_sum", hv);
  if (av.rows() != hv.rows()) {
    throw DimensionError("segment_weighted_sum: row mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(hv.shape()));
  }
  detail::check_segments("segment_weighted_sum", offsets, av.rows());
  const std::size_t k = av.cols(), d = hv.cols(), segs = offsets.size() - 1;
  Tensor out(Shape{segs * k, d});
  for (std::size_t s = 0; s < segs; ++s) {
    const auto n = static_cast<Eigen::Index>(offsets[s + 1] - offsets[s]);
    detail::ConstMap as(av.data() + offsets[s] * k, n, static_cast<Eigen::Index>(k));
    detail::ConstMap hs(hv.data() + offsets[s] * d, n, static_cast<Eigen::Index>(d));
    detail::MutMap os(out.data() + s * k * d, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
    os.noalias() = as.transpose() * hs;
  }
  return a.tape().record(std::move(out), {a.id(), h.id()}, [offsets, k, d](const Tensor& g, GradContext& ctx) {
    Tensor* ga = ctx.input_grad(0);
    Tensor* gh = ctx.input_grad(1);
    const Tensor& av = ctx.input_value(0);
    const Tensor& hv = ctx.input_value(1);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const auto n = static_cast<Eigen::Index>(offsets[s + 1] - offsets[s]);
      detail::ConstMap gs(g.data() + s * k * d, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
      if (ga) {
        detail::MutMap das(ga->data() + offsets[s] * k, n, static_cast<Eigen::Index>(k));
        detail::ConstMap hs(hv.data() + offsets[s] * d, n, static_cast<Eigen::Index>(d));
        das.noalias() += hs * gs.transpose();
      }
      if (gh) {
        detail::MutMap dhs(gh->data() + offsets[s] * d, n, static_cast<Eigen::Index>(d));
        detail::ConstMap as(av.data() + offsets[s] * k, n, static_cast<Eigen::Index>(k));
        dhs.noalias() += as * gs;
      }
    }
  });
}

// Row gather: out[i] = x[ids[i]]. Backward scatters into the rows used.
inline Var gather_rows(Var x, const std::vector<std::size_t>& ids) {
  const Tensor& xv = x.value();
  detail::require_matrix("gather_rows", xv);
  const std::size_t cols = xv.cols();
  Tensor out(Shape{ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= xv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(ids[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy_n(xv.data() + ids[i] * cols, cols, out.data() + i * cols);
  }
  return x.tape().record(std::move(out), {x.id()}, [ids, cols](const Tensor& g, GradContext& ctx) {
    Tensor* gx = ctx.input_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gx->data() + ids[i] * cols;
      const double* src = g.data() + i * cols;
      for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
    }
  });
}

// Embedding lookup is a row gather over a parameter table.
inline Var embedding_lookup(Var table, const std::vector<std::size_t>& ids) { return gather_rows(table, ids); }

inline Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x.id()}, [](const Tensor& g, GradContext& ctx) {
    if (Tensor* gx = ctx.input_grad(0)) detail::axpy(*gx, g);
  });
}

// Horizontal concatenation of matrices with equal row counts.
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths, ids;
  for (const Var& p : parts) {
    detail::require_matrix("concat_cols", p.value());
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    widths.push_back(p.value().cols());
    ids.push_back(p.id());
    total += p.value().cols();
  }
  Tensor out(Shape{rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + off);
    off += widths[k];
  }
  return parts.front().tape().record(std::move(out), ids, [widths, rows, total](const Tensor& g, GradContext& ctx) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* gk = ctx.input_grad(k)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) gk->data()[r * widths[k] + c] += g[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
}

// Minimum row norm accepted by l2_normalize.
inline constexpr double kMinNormalizeNorm = 1e-12;

// Each row scaled to unit Euclidean norm. Rank-1 input is one row.
inline Var l2_normalize(Var x) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    norms[r] = norm(xv.row(r));
    if (!(norms[r] >= kMinNormalizeNorm)) {
      throw DegenerateInputError("l2_normalize: row " + std::to_string(r) + " has norm " + std::to_string(norms[r]));
    }
    for (double& v : out.row(r)) v /= norms[r];
  }
  const std::size_t self = x.tape().size();
  return x.tape().record(std::move(out), {x.id()},
                         [self, norms, rows, cols, &tape = x.tape()](const Tensor& g, GradContext& ctx) {
                           Tensor* gx = ctx.input_grad(0);
                           if (!gx) return;
                           const Tensor& y = tape.value(self);
                           // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* yr = y.data() + r * cols;
                             const double* gr = g.data() + r * cols;
                             double yg = 0.0;
                             for (std::size_t c = 0; c < cols; ++c) yg += yr[c] * gr[c];
                             for (std::size_t c = 0; c < cols; ++c) gx->data()[r * cols + c] += (gr[c] - yr[c] * yg) / norms[r];
                           }
                         });
}

// out[r] = <a[r], b[r]>, shape rows x 1.
inline Var row_dot(Var a, Var b) {
  detail::require_same_shape("row_dot", a.value(), b.value());
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(Shape{rows, 1});
  for (std::size_t r = 0; r < rows; ++r) out[r] = dot(av.row(r), b.value().row(r));
  return a.tape().record(std::move(out), {a.id(), b.id()}, [rows, cols](const Tensor& g, GradContext& ctx) {
    const Tensor& av = ctx.input_value(0);
    const Tensor& bv = ctx.input_value(1);
    Tensor* ga = ctx.input_grad(0);
    Tensor* gb = ctx.input_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        if (ga) (*ga)[r * cols + c] += g[r] * bv[r * cols + c];
        if (gb) (*gb)[r * cols + c] += g[r] * av[r * cols + c];
      }
    }
  });
}

// Row r of x scaled by the differentiable scalar s[r] (s is rows x 1).
inline Var mul_rows(Var x, Var s) {
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  if (sv.size() != xv.rows()) {
    throw DimensionError("mul_rows: scale " + shape_string(sv.shape()) + " vs " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    for (double& v : out.row(r)) v *= sv[r];
  }
  return x.tape().record(std::move(out), {x.id(), s.id()}, [rows, cols](const Tensor& g, GradContext& ctx) {
    const Tensor& xv = ctx.input_value(0);
    const Tensor& sv = ctx.input_value(1);
    Tensor* gx = ctx.input_grad(0);
    Tensor* gs = ctx.input_grad(1);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        if (gx) (*gx)[i] += g[i] * sv[r];
        acc += g[i] * xv[i];
      }
      if (gs) (*gs)[r] += acc;
    }
  });
}

// Row r of x scaled by the constant factors[r].
inline Var scale_rows(Var x, std::vector<double> factors) {
  const Tensor& xv = x.value();
  if (factors.size() != xv.rows()) throw DimensionError("scale_rows: factor count differs from row count");
  const std::size_t cols = xv.cols();
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (double& v : out.row(r)) v *= factors[r];
  }
  return x.tape().record(std::move(out), {x.id()}, [factors = std::move(factors), cols](const Tensor& g, GradContext& ctx) {
    Tensor* gx = ctx.input_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factors[i / cols];
  });
}

inline Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record(Tensor::scalar(s), {x.id()}, [](const Tensor& g, GradContext& ctx) {
    Tensor* gx = ctx.input_grad(0);
    if (!gx) return;
    for (double& v : gx->values()) v += g[0];
  });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

// Mean over rows of -log softmax(logits[r])[labels[r]].
inline Var softmax_cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  detail::require_matrix("softmax_cross_entropy", lv);
  if (labels.size() != lv.rows()) throw DimensionError("softmax_cross_entropy: label count differs from row count");
  if (!lv.all_finite()) throw NumericError("softmax_cross_entropy: non-finite logits");
  const std::size_t rows = lv.rows(), cols = lv.cols();
  Tensor probs = lv;
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= cols) throw DimensionError("softmax_cross_entropy: label out of range");
    const auto row = lv.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double v : row) total += std::exp(v - mx);
    loss += std::log(total) + mx - row[labels[r]];
    detail::softmax_slice(probs.data() + r * cols, cols, 1);
  }
  loss /= static_cast<double>(rows);
  return logits.tape().record(Tensor::scalar(loss), {logits.id()},
                              [probs = std::move(probs), labels, rows, cols](const Tensor& g, GradContext& ctx) {
                                Tensor* gl = ctx.input_grad(0);
                                if (!gl) return;
                                const double w = g[0] / static_cast<double>(rows);
                                for (std::size_t r = 0; r < rows; ++r) {
                                  for (std::size_t c = 0; c < cols; ++c) {
                                    const double onehot = c == labels[r] ? 1.0 : 0.0;
                                    (*gl)[r * cols + c] += w * (probs[r * cols + c] - onehot);
                                  }
                                }
                              });
}

// Mean over rows of the squared Euclidean distance ‖a[r] - b[r]‖².
inline Var mean_squared_distance(Var a, Var b) {
  const Var diff = sub(a, b);
  return scale(sum(mul(diff, diff)), 1.0 / static_cast<double>(a.value().rows()));
}

}  // namespace dimerec::ops
