// SPDX-License-Identifier: Apache-2.0
#include "congater/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace congater {

namespace {

struct Broadcast {
  Shape out;
  // Operand with fewer elements repeats with this period; 0 when shapes match.
  std::size_t period_a = 0;
  std::size_t period_b = 0;
};

bool trailing_match(const Shape& big, const Shape& small) {
  if (small.size() + 1 == big.size()) return std::equal(small.begin(), small.end(), big.begin() + 1);
  if (small.size() == big.size() && !small.empty() && small[0] == 1) {
    return std::equal(small.begin() + 1, small.end(), big.begin() + 1);
  }
  return false;
}

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return {a.shape(), 0, 0};
  if (trailing_match(a.shape(), b.shape())) return {a.shape(), 0, b.size()};
  if (trailing_match(b.shape(), a.shape())) return {b.shape(), a.size(), 0};
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

inline std::size_t idx(std::size_t i, std::size_t period) { return period ? i % period : i; }

void require_rank2(const Tensor& x, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(x.shape()));
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd fwd, Deriv deriv_from_out_and_in) {
  std::vector<double> out(x.size());
  auto in = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, name,
                     [x, deriv_from_out_and_in](std::span<const double> y, std::span<const double> gy) {
                       auto gx = grad_sink(x);
                       auto xv = x.values();
                       for (std::size_t i = 0; i < gx.size(); ++i) {
                         gx[i] += gy[i] * deriv_from_out_and_in(y[i], xv[i]);
                       }
                     });
}

Shape row_shape(const Tensor& x) { return x.rank() == 1 ? Shape{1, x.size()} : x.shape(); }

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto plan = plan_broadcast(a, b, "add");
  std::vector<double> out(numel(plan.out));
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[idx(i, plan.period_a)] + bv[idx(i, plan.period_b)];
  return make_result(plan.out, std::move(out), {a, b}, "add",
                     [a, b, plan](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a), gb = grad_sink(b);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (!ga.empty()) ga[idx(i, plan.period_a)] += g[i];
                         if (!gb.empty()) gb[idx(i, plan.period_b)] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto plan = plan_broadcast(a, b, "sub");
  std::vector<double> out(numel(plan.out));
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[idx(i, plan.period_a)] - bv[idx(i, plan.period_b)];
  return make_result(plan.out, std::move(out), {a, b}, "sub",
                     [a, b, plan](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a), gb = grad_sink(b);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (!ga.empty()) ga[idx(i, plan.period_a)] += g[i];
                         if (!gb.empty()) gb[idx(i, plan.period_b)] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto plan = plan_broadcast(a, b, "mul");
  std::vector<double> out(numel(plan.out));
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[idx(i, plan.period_a)] * bv[idx(i, plan.period_b)];
  return make_result(plan.out, std::move(out), {a, b}, "mul",
                     [a, b, plan](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a), gb = grad_sink(b);
                       auto av = a.values(), bv = b.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const auto ia = idx(i, plan.period_a), ib = idx(i, plan.period_b);
                         if (!ga.empty()) ga[ia] += g[i] * bv[ib];
                         if (!gb.empty()) gb[ib] += g[i] * av[ia];
                       }
                     });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, "scale",
                     [x, factor](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * g[i];
                     });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = bv.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_result({m, n}, std::move(out), {a, b}, "matmul",
                     [a, b, m, k, n](std::span<const double>, std::span<const double> g) {
                       auto ga = grad_sink(a), gb = grad_sink(b);
                       auto av = a.values(), bv = b.values();
                       for (std::size_t i = 0; i < m; ++i) {
                         const double* grow = g.data() + i * n;
                         for (std::size_t p = 0; p < k; ++p) {
                           if (!ga.empty()) {
                             const double* brow = bv.data() + p * n;
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                             ga[i * k + p] += acc;
                           }
                           if (!gb.empty()) {
                             const double aip = av[i * k + p];
                             double* gbrow = gb.data() + p * n;
                             for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank2(weight, "linear");
  const std::size_t out_dim = weight.shape()[0], in_dim = weight.shape()[1];
  if (x.rank() > 2 || x.cols() != in_dim) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size() != out_dim)) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t n = x.rows();
  std::vector<double> out(n * out_dim);
  auto xv = x.values(), wv = weight.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double* xrow = xv.data() + i * in_dim;
    for (std::size_t o = 0; o < out_dim; ++o) {
      const double* wrow = wv.data() + o * in_dim;
      double acc = bias.defined() ? bias.values()[o] : 0.0;
      for (std::size_t p = 0; p < in_dim; ++p) acc += xrow[p] * wrow[p];
      out[i * out_dim + o] = acc;
    }
  }
  Shape shape = x.rank() == 1 ? Shape{out_dim} : Shape{n, out_dim};
  std::vector<Tensor> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(shape), std::move(out), std::move(inputs), "linear",
                     [x, weight, bias, n, in_dim, out_dim](std::span<const double>,
                                                           std::span<const double> g) {
                       auto gx = grad_sink(x), gw = grad_sink(weight);
                       auto gb = bias.defined() ? grad_sink(bias) : std::span<double>{};
                       auto xv = x.values(), wv = weight.values();
                       for (std::size_t i = 0; i < n; ++i) {
                         const double* grow = g.data() + i * out_dim;
                         const double* xrow = xv.data() + i * in_dim;
                         for (std::size_t o = 0; o < out_dim; ++o) {
                           const double go = grow[o];
                           if (go == 0.0) continue;
                           if (!gx.empty()) {
                             const double* wrow = wv.data() + o * in_dim;
                             double* gxrow = gx.data() + i * in_dim;
                             for (std::size_t p = 0; p < in_dim; ++p) gxrow[p] += go * wrow[p];
                           }
                           if (!gw.empty()) {
                             double* gwrow = gw.data() + o * in_dim;
                             for (std::size_t p = 0; p < in_dim; ++p) gwrow[p] += go * xrow[p];
                           }
                           if (!gb.empty()) gb[o] += go;
                         }
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  require_rank2(x, "transpose");
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(r * c);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  return make_result({c, r}, std::move(out), {x}, "transpose",
                     [x, r, c](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {x}, "reshape",
                     [x](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double y, double) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double y, double) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return unary(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
      [](double, double v) {
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

Tensor exp(const Tensor& x) {
  require_finite(x.values(), "exp");
  auto out = unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double y, double) { return y; });
  for (double v : out.values()) {
    if (!std::isfinite(v)) throw NumericError("exp: overflow");
  }
  return out;
}

Tensor log(const Tensor& x) {
  require_finite(x.values(), "log");
  for (double v : x.values()) {
    if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double, double v) { return 1.0 / v; });
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out[i * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, "softmax_rows",
                     [x, r, c](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < r; ++i) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           gx[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = row[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, "log_softmax_rows",
                     [x, r, c](std::span<const double> y, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < r; ++i) {
                         double total = 0.0;
                         for (std::size_t j = 0; j < c; ++j) total += g[i * c + j];
                         for (std::size_t j = 0; j < c; ++j)
                           gx[i * c + j] += g[i * c + j] - std::exp(y[i * c + j]) * total;
                       }
                     });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm_rows: input " + shape_str(x.shape()) + " vs gamma " +
                     shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  std::vector<double> normalized(x.size()), inv_std(r), out(x.size());
  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      normalized[i * c + j] = (row[j] - mu) * inv_std[i];
      out[i * c + j] = normalized[i * c + j] * gv[j] + bv[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "layer_norm_rows",
      [x, gamma, beta, r, c, normalized = std::move(normalized), inv_std = std::move(inv_std)](
          std::span<const double>, std::span<const double> g) {
        auto gx = grad_sink(x), gg = grad_sink(gamma), gb = grad_sink(beta);
        auto gv = gamma.values();
        std::vector<double> dxhat(c);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double gij = g[i * c + j];
            if (!gg.empty()) gg[j] += gij * normalized[i * c + j];
            if (!gb.empty()) gb[j] += gij;
            dxhat[j] = gij * gv[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * normalized[i * c + j];
          }
          if (gx.empty()) continue;
          mean_d /= static_cast<double>(c);
          mean_dx /= static_cast<double>(c);
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - normalized[i * c + j] * mean_dx);
          }
        }
      });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return make_result({1}, {total}, {x}, "sum", [x](std::span<const double>, std::span<const double> g) {
    auto gx = grad_sink(x);
    for (auto& v : gx) v += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total_rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.cols() != c) {
      throw ShapeError("concat_rows: shape " + shape_str(p.shape()) + " does not match " +
                       shape_str(row_shape(parts[0])));
    }
    total_rows += p.rows();
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({total_rows, c}, std::move(out), inputs, "concat_rows",
                     [inputs](std::span<const double>, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const auto& p : inputs) {
                         auto gp = grad_sink(p);
                         for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
                         offset += p.size();
                       }
                     });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total_cols = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.rows() != r) {
      throw ShapeError("concat_cols: shape " + shape_str(p.shape()) + " does not match " +
                       shape_str(row_shape(parts[0])));
    }
    total_cols += p.cols();
  }
  std::vector<double> out(r * total_cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.data() + i * c, c, out.data() + i * total_cols + offset);
    offset += c;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result({r, total_cols}, std::move(out), inputs, "concat_cols",
                     [inputs, r, total_cols](std::span<const double>, std::span<const double> g) {
                       std::size_t offset = 0;
                       for (const auto& p : inputs) {
                         const std::size_t c = p.cols();
                         auto gp = grad_sink(p);
                         if (!gp.empty()) {
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               gp[i * c + j] += g[i * total_cols + offset + j];
                         }
                         offset += c;
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || begin + count > r) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + begin * c, x.values().begin() + (begin + count) * c);
  return make_result({count, c}, std::move(out), {x}, "slice_rows",
                     [x, begin, c](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < g.size(); ++i) gx[begin * c + i] += g[i];
                     });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (count == 0 || begin + count > c) {
    throw ShapeError("slice_cols: columns [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") out of range for " + shape_str(x.shape()));
  }
  std::vector<double> out(r * count);
  auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.data() + i * c + begin, count, out.data() + i * count);
  return make_result({r, count}, std::move(out), {x}, "slice_cols",
                     [x, begin, r, c, count](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] += g[i * count + j];
                     });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  require_rank2(table, "gather_rows");
  const std::size_t v = table.shape()[0], c = table.shape()[1];
  if (ids.empty()) throw ShapeError("gather_rows: empty id list");
  std::vector<double> out(ids.size() * c);
  auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(v) + " rows");
    }
    std::copy_n(tv.data() + ids[i] * c, c, out.data() + i * c);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return make_result({ids.size(), c}, std::move(out), {table}, "gather_rows",
                     [table, saved = std::move(saved), c](std::span<const double>, std::span<const double> g) {
                       auto gt = grad_sink(table);
                       for (std::size_t i = 0; i < saved.size(); ++i)
                         for (std::size_t j = 0; j < c; ++j) gt[saved[i] * c + j] += g[i * c + j];
                     });
}

Tensor mean_pool_groups(const Tensor& table, std::span<const std::vector<std::int32_t>> groups) {
  require_rank2(table, "mean_pool_groups");
  const std::size_t v = table.shape()[0], c = table.shape()[1];
  if (groups.empty()) throw ShapeError("mean_pool_groups: no groups");
  std::vector<double> out(groups.size() * c, 0.0);
  auto tv = table.values();
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& ids = groups[gi];
    if (ids.empty()) throw ShapeError("mean_pool_groups: empty group " + std::to_string(gi));
    const double w = 1.0 / static_cast<double>(ids.size());
    for (auto id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= v) {
        throw std::out_of_range("mean_pool_groups: id " + std::to_string(id) + " outside table of " +
                                std::to_string(v) + " rows");
      }
      for (std::size_t j = 0; j < c; ++j) out[gi * c + j] += w * tv[id * c + j];
    }
  }
  std::vector<std::vector<std::int32_t>> saved(groups.begin(), groups.end());
  return make_result({groups.size(), c}, std::move(out), {table}, "mean_pool_groups",
                     [table, saved = std::move(saved), c](std::span<const double>, std::span<const double> g) {
                       auto gt = grad_sink(table);
                       for (std::size_t gi = 0; gi < saved.size(); ++gi) {
                         const double w = 1.0 / static_cast<double>(saved[gi].size());
                         for (auto id : saved[gi])
                           for (std::size_t j = 0; j < c; ++j) gt[id * c + j] += w * g[gi * c + j];
                       }
                     });
}

Tensor pick_rows(const Tensor& x, std::span<const int> index) {
  const std::size_t r = x.rows(), c = x.cols();
  if (index.size() != r) {
    throw ShapeError("pick_rows: " + std::to_string(index.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= c) {
      throw std::out_of_range("pick_rows: index " + std::to_string(index[i]) + " outside " +
                              std::to_string(c) + " columns");
    }
    out[i] = x.values()[i * c + index[i]];
  }
  std::vector<int> saved(index.begin(), index.end());
  return make_result({r}, std::move(out), {x}, "pick_rows",
                     [x, saved = std::move(saved), c](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < saved.size(); ++i) gx[i * c + saved[i]] += g[i];
                     });
}

Tensor grad_reverse(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(x.shape(), std::move(out), {x}, "grad_reverse",
                     [x](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] -= g[i];
                     });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must be in [0,1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? inv : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, "dropout",
                     [x, mask = std::move(mask)](std::span<const double>, std::span<const double> g) {
                       auto gx = grad_sink(x);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
                     });
}

}  // namespace congater
