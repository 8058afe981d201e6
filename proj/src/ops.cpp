#include "gdt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gdt/errors.hpp"

namespace gdt {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstVec = Eigen::Map<const Eigen::RowVectorXd>;
using MutVec = Eigen::Map<Eigen::RowVectorXd>;

ConstMap as_matrix(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MutMap as_matrix(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MutMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void record(std::string_view op, std::vector<Tensor> inputs, const Tensor& out, BackwardFn fn) {
  active_tape()->record(op, std::move(inputs), out, std::move(fn));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Grad accumulation target for an input, or empty span when the input is frozen.
std::span<double> grad_of(const Tensor& t) {
  if (!t.requires_grad()) return {};
  Tensor h = t;
  return h.grad_buffer();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents disagree for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const bool rg = tracking({&a, &b});
  Tensor out = Tensor::zeros({m, n}, rg);
  as_matrix(out.mutable_data(), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  if (rg) {
    record("matmul", {a, b}, out, [m, k, n](const TapeNode& node) {
      const auto& a = node.inputs[0];
      const auto& b = node.inputs[1];
      auto gc = as_matrix(node.output.grad(), m, n);
      if (auto ga = grad_of(a); !ga.empty()) {
        as_matrix(ga, m, k).noalias() += gc * as_matrix(b.data(), k, n).transpose();
      }
      if (auto gb = grad_of(b); !gb.empty()) {
        as_matrix(gb, k, n).noalias() += as_matrix(a.data(), m, k).transpose() * gc;
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  require_rank(bias, 1, "linear", "bias");
  const std::size_t n = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  if (weight.dim(0) != in || bias.dim(0) != out_dim) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()));
  }
  const bool rg = tracking({&x, &weight, &bias});
  Tensor out = Tensor::zeros({n, out_dim}, rg);
  auto y = as_matrix(out.mutable_data(), n, out_dim);
  y.noalias() = as_matrix(x.data(), n, in) * as_matrix(weight.data(), in, out_dim);
  y.rowwise() += ConstVec(bias.data().data(), static_cast<Eigen::Index>(out_dim));
  if (rg) {
    record("linear", {x, weight, bias}, out, [n, in, out_dim](const TapeNode& node) {
      auto gy = as_matrix(node.output.grad(), n, out_dim);
      if (auto gx = grad_of(node.inputs[0]); !gx.empty()) {
        as_matrix(gx, n, in).noalias() += gy * as_matrix(node.inputs[1].data(), in, out_dim).transpose();
      }
      if (auto gw = grad_of(node.inputs[1]); !gw.empty()) {
        as_matrix(gw, in, out_dim).noalias() += as_matrix(node.inputs[0].data(), n, in).transpose() * gy;
      }
      if (auto gb = grad_of(node.inputs[2]); !gb.empty()) {
        MutVec(gb.data(), static_cast<Eigen::Index>(out_dim)) += gy.colwise().sum();
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rg = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rg);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (rg) {
    record("add", {a, b}, out, [](const TapeNode& node) {
      auto g = node.output.grad();
      for (std::size_t p = 0; p < 2; ++p) {
        if (auto gi = grad_of(node.inputs[p]); !gi.empty()) {
          for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rg = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rg);
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (rg) {
    record("mul", {a, b}, out, [](const TapeNode& node) {
      auto g = node.output.grad();
      auto x = node.inputs[0].data();
      auto y = node.inputs[1].data();
      if (auto gx = grad_of(node.inputs[0]); !gx.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
      }
      if (auto gy = grad_of(node.inputs[1]); !gy.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto o = out.mutable_data();
  auto in = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] * factor;
  if (rg) {
    record("scale", {x}, out, [factor](const TapeNode& node) {
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  const bool rg = tracking({&x});
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::scalar(total, rg);
  if (rg) {
    record("sum", {x}, out, [](const TapeNode& node) {
      const double g = node.output.grad()[0];
      for (double& gi : grad_of(node.inputs[0])) gi += g;
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t len = shape[axis];

  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros(shape, rg);
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, in[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(in[base + j * inner] - mx);
        y[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) y[base + j * inner] /= z;
    }
  }
  if (rg) {
    record("softmax", {x}, out, [outer, inner, len](const TapeNode& node) {
      auto y = node.output.data();
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * len * inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += y[base + j * inner] * g[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t p = base + j * inner;
            gx[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: input must have rank >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != cols || bias.dim(0) != cols) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                         " must match last extent of " + shape_str(x.shape()));
  }
  const bool rg = tracking({&x, &gain, &bias});
  Tensor out = Tensor::zeros(x.shape(), rg);
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  auto in = x.data();
  auto y = out.mutable_data();
  auto g = gain.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (row[c] - mean) * is;
      xhat[r * cols + c] = h;
      y[r * cols + c] = h * g[c] + b[c];
    }
  }
  if (rg) {
    record("layer_norm", {x, gain, bias}, out,
           [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](const TapeNode& node) {
             auto gy = node.output.grad();
             auto g = node.inputs[1].data();
             auto gx = grad_of(node.inputs[0]);
             auto gg = grad_of(node.inputs[1]);
             auto gb = grad_of(node.inputs[2]);
             const double inv_n = 1.0 / static_cast<double>(cols);
             for (std::size_t r = 0; r < rows; ++r) {
               const std::size_t off = r * cols;
               if (!gg.empty() || !gb.empty()) {
                 for (std::size_t c = 0; c < cols; ++c) {
                   if (!gg.empty()) gg[c] += gy[off + c] * xhat[off + c];
                   if (!gb.empty()) gb[c] += gy[off + c];
                 }
               }
               if (gx.empty()) continue;
               double mean_d = 0.0, mean_dx = 0.0;
               for (std::size_t c = 0; c < cols; ++c) {
                 const double d = gy[off + c] * g[c];
                 mean_d += d;
                 mean_dx += d * xhat[off + c];
               }
               mean_d *= inv_n;
               mean_dx *= inv_n;
               for (std::size_t c = 0; c < cols; ++c) {
                 const double d = gy[off + c] * g[c];
                 gx[off + c] += inv_std[r] * (d - mean_d - xhat[off + c] * mean_dx);
               }
             }
           });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double kA = 0.044715;
  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto in = x.data();
  auto y = out.mutable_data();
  std::vector<double> th(rg ? y.size() : 0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double v = in[i];
    const double t = std::tanh(kC * (v + kA * v * v * v));
    if (rg) th[i] = t;
    y[i] = 0.5 * v * (1.0 + t);
  }
  if (rg) {
    record("gelu", {x}, out, [th = std::move(th)](const TapeNode& node) {
      auto in = node.inputs[0].data();
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = in[i];
        const double t = th[i];
        const double dt = (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
        gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
      }
    });
  }
  return out;
}

Tensor tanh(const Tensor& x) {
  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::tanh(in[i]);
  if (rg) {
    record("tanh", {x}, out, [](const TapeNode& node) {
      auto y = node.output.data();
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw RangeError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = uniform(rng) >= p ? keep_scale : 0.0;
  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros(x.shape(), rg);
  auto in = x.data();
  auto y = out.mutable_data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[i] * mask[i];
  if (rg) {
    record("dropout", {x}, out, [mask = std::move(mask)](const TapeNode& node) {
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank(table, 2, "gather_rows", "table");
  const std::size_t v = table.dim(0), e = table.dim(1);
  for (auto idx : indices) {
    if (idx >= v) {
      throw RangeError("gather_rows: index " + std::to_string(idx) + " out of range for table with " +
                       std::to_string(v) + " rows");
    }
  }
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  const bool rg = tracking({&table});
  Tensor out = Tensor::zeros({indices.size(), e}, rg);
  auto src = table.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[r] * e), e,
                y.begin() + static_cast<std::ptrdiff_t>(r * e));
  }
  if (rg) {
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    record("gather_rows", {table}, out, [e, idx = std::move(idx)](const TapeNode& node) {
      auto g = node.output.grad();
      auto gt = grad_of(node.inputs[0]);
      for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t c = 0; c < e; ++c) gt[idx[r] * e + c] += g[r * e + c];
      }
    });
  }
  return out;
}

Tensor interleave_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("interleave_rows: no inputs");
  const Tensor& first = parts.front();
  require_rank(first, 2, "interleave_rows", "input");
  for (const auto& p : parts) require_same_shape(first, p, "interleave_rows");
  const std::size_t n = first.dim(0), e = first.dim(1), k = parts.size();
  bool rg = false;
  if (active_tape() != nullptr) {
    rg = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  }
  Tensor out = Tensor::zeros({n * k, e}, rg);
  auto y = out.mutable_data();
  for (std::size_t p = 0; p < k; ++p) {
    auto src = parts[p].data();
    for (std::size_t r = 0; r < n; ++r) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(r * e), e,
                  y.begin() + static_cast<std::ptrdiff_t>((r * k + p) * e));
    }
  }
  if (rg) {
    record("interleave_rows", std::vector<Tensor>(parts.begin(), parts.end()), out,
           [n, e, k](const TapeNode& node) {
             auto g = node.output.grad();
             for (std::size_t p = 0; p < k; ++p) {
               auto gp = grad_of(node.inputs[p]);
               if (gp.empty()) continue;
               for (std::size_t r = 0; r < n; ++r) {
                 for (std::size_t c = 0; c < e; ++c) gp[r * e + c] += g[(r * k + p) * e + c];
               }
             }
           });
  }
  return out;
}

Tensor select_rows(const Tensor& x, std::size_t stride, std::size_t offset) {
  require_rank(x, 2, "select_rows", "input");
  const std::size_t n = x.dim(0), e = x.dim(1);
  if (stride == 0 || offset >= stride || n % stride != 0) {
    throw DimensionError("select_rows: stride " + std::to_string(stride) + " / offset " + std::to_string(offset) +
                         " incompatible with " + shape_str(x.shape()));
  }
  const std::size_t m = n / stride;
  const bool rg = tracking({&x});
  Tensor out = Tensor::zeros({m, e}, rg);
  auto src = x.data();
  auto y = out.mutable_data();
  for (std::size_t r = 0; r < m; ++r) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((r * stride + offset) * e), e,
                y.begin() + static_cast<std::ptrdiff_t>(r * e));
  }
  if (rg) {
    record("select_rows", {x}, out, [m, e, stride, offset](const TapeNode& node) {
      auto g = node.output.grad();
      auto gx = grad_of(node.inputs[0]);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < e; ++c) gx[(r * stride + offset) * e + c] += g[r * e + c];
      }
    });
  }
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_seq, std::size_t n_heads,
                        std::span<const std::uint8_t> key_mask) {
  require_rank(q, 2, "causal_attention", "query");
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t rows = q.dim(0), embed = q.dim(1);
  if (n_seq == 0 || rows % n_seq != 0) {
    throw DimensionError("causal_attention: " + std::to_string(rows) + " rows do not split into " +
                         std::to_string(n_seq) + " sequences");
  }
  if (n_heads == 0 || embed % n_heads != 0) {
    throw DimensionError("causal_attention: embed " + std::to_string(embed) + " not divisible by " +
                         std::to_string(n_heads) + " heads");
  }
  if (key_mask.size() != rows) {
    throw DimensionError("causal_attention: mask has " + std::to_string(key_mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  const std::size_t len = rows / n_seq;
  const std::size_t hd = embed / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  const bool rg = tracking({&q, &k, &v});
  Tensor out = Tensor::zeros({rows, embed}, rg);
  // probs[(s * n_heads + h) * len * len + i * len + j]
  std::vector<double> probs(n_seq * n_heads * len * len, 0.0);
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  auto od = out.mutable_data();
  std::vector<double> scores(len);

  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t r0 = s * len;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * hd;
      double* p_block = probs.data() + (s * n_heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        const double* qi = qd.data() + (r0 + i) * embed + c0;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!key_mask[r0 + j]) continue;
          const double* kj = kd.data() + (r0 + j) * embed + c0;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_sqrt;
          mx = any ? std::max(mx, scores[j]) : scores[j];
          any = true;
        }
        if (!any) continue;
        double z = 0.0;
        double* pi = p_block + i * len;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!key_mask[r0 + j]) continue;
          pi[j] = std::exp(scores[j] - mx);
          z += pi[j];
        }
        double* oi = od.data() + (r0 + i) * embed + c0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!key_mask[r0 + j]) continue;
          pi[j] /= z;
          const double* vj = vd.data() + (r0 + j) * embed + c0;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += pi[j] * vj[c];
        }
      }
    }
  }

  if (rg) {
    record("causal_attention", {q, k, v}, out,
           [n_seq, n_heads, len, hd, embed, inv_sqrt, probs = std::move(probs)](const TapeNode& node) {
             auto qd = node.inputs[0].data();
             auto kd = node.inputs[1].data();
             auto vd = node.inputs[2].data();
             auto go = node.output.grad();
             auto gq = grad_of(node.inputs[0]);
             auto gk = grad_of(node.inputs[1]);
             auto gv = grad_of(node.inputs[2]);
             std::vector<double> dp(len);
             for (std::size_t s = 0; s < n_seq; ++s) {
               const std::size_t r0 = s * len;
               for (std::size_t h = 0; h < n_heads; ++h) {
                 const std::size_t c0 = h * hd;
                 const double* p_block = probs.data() + (s * n_heads + h) * len * len;
                 for (std::size_t i = 0; i < len; ++i) {
                   const double* pi = p_block + i * len;
                   const double* goi = go.data() + (r0 + i) * embed + c0;
                   double weighted = 0.0;
                   for (std::size_t j = 0; j <= i; ++j) {
                     if (pi[j] == 0.0) {
                       dp[j] = 0.0;
                       continue;
                     }
                     const double* vj = vd.data() + (r0 + j) * embed + c0;
                     double d = 0.0;
                     for (std::size_t c = 0; c < hd; ++c) d += goi[c] * vj[c];
                     dp[j] = d;
                     weighted += pi[j] * d;
                     if (!gv.empty()) {
                       double* gvj = gv.data() + (r0 + j) * embed + c0;
                       for (std::size_t c = 0; c < hd; ++c) gvj[c] += pi[j] * goi[c];
                     }
                   }
                   const double* qi = qd.data() + (r0 + i) * embed + c0;
                   for (std::size_t j = 0; j <= i; ++j) {
                     if (pi[j] == 0.0) continue;
                     const double ds = pi[j] * (dp[j] - weighted) * inv_sqrt;
                     const double* kj = kd.data() + (r0 + j) * embed + c0;
                     if (!gq.empty()) {
                       double* gqi = gq.data() + (r0 + i) * embed + c0;
                       for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
                     }
                     if (!gk.empty()) {
                       double* gkj = gk.data() + (r0 + j) * embed + c0;
                       for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
                     }
                   }
                 }
               }
             }
           });
  }
  return out;
}

Tensor masked_mse(const Tensor& pred, const Tensor& target, std::span<const std::uint8_t> row_mask) {
  require_rank(pred, 2, "masked_mse", "prediction");
  require_same_shape(pred, target, "masked_mse");
  const std::size_t rows = pred.dim(0), cols = pred.dim(1);
  if (row_mask.size() != rows) {
    throw DimensionError("masked_mse: mask has " + std::to_string(row_mask.size()) + " entries for " +
                         std::to_string(rows) + " rows");
  }
  const auto active = static_cast<std::size_t>(std::count_if(row_mask.begin(), row_mask.end(),
                                                             [](std::uint8_t m) { return m != 0; }));
  if (active == 0) throw ContractError("masked_mse: every position is masked");
  const double denom = static_cast<double>(active * cols);
  auto p = pred.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = p[r * cols + c] - t[r * cols + c];
      acc += d * d;
    }
  }
  const bool rg = tracking({&pred, &target});
  Tensor out = Tensor::scalar(acc / denom, rg);
  if (rg) {
    std::vector<std::uint8_t> mask(row_mask.begin(), row_mask.end());
    record("masked_mse", {pred, target}, out, [rows, cols, denom, mask = std::move(mask)](const TapeNode& node) {
      const double g = node.output.grad()[0];
      auto p = node.inputs[0].data();
      auto t = node.inputs[1].data();
      auto gp = grad_of(node.inputs[0]);
      auto gt = grad_of(node.inputs[1]);
      for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t i = r * cols + c;
          const double d = 2.0 * g * (p[i] - t[i]) / denom;
          if (!gp.empty()) gp[i] += d;
          if (!gt.empty()) gt[i] -= d;
        }
      }
    });
  }
  return out;
}

}  // namespace gdt
