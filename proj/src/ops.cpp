#include "jst/ops.hpp"

#include "jst/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace jst {

namespace {

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw ShapeError(std::string(op) + ": expected rank >= 1, got scalar");
  return t.shape().back();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct BroadcastPlan {
  Shape out;
  bool same = false;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

BroadcastPlan plan_broadcast(const Shape& as, const Shape& bs, const char* op) {
  BroadcastPlan plan;
  if (as == bs) {
    plan.out = as;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(as.size(), bs.size());
  Shape a(rank, 1), b(rank, 1);
  std::copy(as.begin(), as.end(), a.begin() + static_cast<std::ptrdiff_t>(rank - as.size()));
  std::copy(bs.begin(), bs.end(), b.begin() + static_cast<std::ptrdiff_t>(rank - bs.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(as) + " and " + shape_str(bs) +
                       " are not broadcast-compatible");
    }
    plan.out[i] = std::max(a[i], b[i]);
  }
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t i = rank; i-- > 0;) {
    sa[i] = a[i] == 1 ? 0 : stride_a;
    sb[i] = b[i] == 1 ? 0 : stride_b;
    stride_a *= a[i];
    stride_b *= b[i];
  }
  const std::size_t n = shape_numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < plan.out[d]) break;
      ia -= sa[d] * idx[d];
      ib -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), name));
  const std::size_t n = shape_numel(plan->out);
  std::vector<double> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[plan->same ? i : plan->a_index[i]];
    const double y = bv[plan->same ? i : plan->b_index[i]];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
    }
  }
  return make_result(plan->out, std::move(out), {a, b}, [plan, kind](Node& self) {
    const auto& in_a = self.inputs[0];
    const auto& in_b = self.inputs[1];
    const auto& g = self.grad;
    const std::size_t n = g.size();
    if (wants_grad(in_a)) {
      auto& ga = in_a->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ib = plan->same ? i : plan->b_index[i];
        const double d = kind == BinaryKind::kMul ? g[i] * in_b->value[ib] : g[i];
        ga[plan->same ? i : plan->a_index[i]] += d;
      }
    }
    if (wants_grad(in_b)) {
      auto& gb = in_b->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = plan->same ? i : plan->a_index[i];
        double d = g[i];
        if (kind == BinaryKind::kSub) d = -d;
        if (kind == BinaryKind::kMul) d *= in_a->value[ia];
        gb[plan->same ? i : plan->b_index[i]] += d;
      }
    }
  });
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result(a.shape(), std::move(out), {a}, [deriv](Node& self) {
    const auto& in = self.inputs[0];
    auto& gi = in->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) {
      gi[i] += self.grad[i] * deriv(in->value[i], self.value[i]);
    }
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kAdd, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kSub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::kMul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(
      a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor swish(const Tensor& a) {
  return unary(
      a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor glu(const Tensor& a) {
  const std::size_t d2 = last_dim(a, "glu");
  if (d2 % 2 != 0) throw ShapeError("glu: last axis must be even, got shape " + shape_str(a.shape()));
  const std::size_t d = d2 / 2;
  const std::size_t rows = a.numel() / d2;
  Shape out_shape = a.shape();
  out_shape.back() = d;
  const auto av = a.data();
  std::vector<double> out(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = av[r * d2 + j] * sigmoid_scalar(av[r * d2 + d + j]);
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a}, [rows, d](Node& self) {
    const auto& in = self.inputs[0];
    auto& gi = in->grad_buffer();
    const std::size_t d2 = 2 * d;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const double x = in->value[r * d2 + j];
        const double s = sigmoid_scalar(in->value[r * d2 + d + j]);
        const double g = self.grad[r * d + j];
        gi[r * d2 + j] += g * s;
        gi[r * d2 + d + j] += g * x * s * (1.0 - s);
      }
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (b.rank() != 2 || a.rank() < 1) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                     shape_str(b.shape()));
  }
  const std::size_t k = a.shape().back();
  const std::size_t bk = transpose_b ? b.dim(1) : b.dim(0);
  const std::size_t n = transpose_b ? b.dim(0) : b.dim(1);
  if (k != bk) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const double* A = a.data().data();
  const double* B = b.data().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* c = out.data() + i * n;
    const double* ar = A + i * k;
    if (transpose_b) {
      for (std::size_t j = 0; j < n; ++j) {
        const double* br = B + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
        c[j] = acc;
      }
    } else {
      for (std::size_t p = 0; p < k; ++p) {
        const double x = ar[p];
        const double* br = B + p * n;
        for (std::size_t j = 0; j < n; ++j) c[j] += x * br[j];
      }
    }
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [m, k, n, transpose_b](Node& self) {
                       const auto& in_a = self.inputs[0];
                       const auto& in_b = self.inputs[1];
                       const double* G = self.grad.data();
                       const double* A = in_a->value.data();
                       const double* B = in_b->value.data();
                       if (wants_grad(in_a)) {
                         double* GA = in_a->grad_buffer().data();
                         for (std::size_t i = 0; i < m; ++i) {
                           const double* g = G + i * n;
                           double* ga = GA + i * k;
                           if (transpose_b) {
                             for (std::size_t j = 0; j < n; ++j) {
                               const double gj = g[j];
                               const double* br = B + j * k;
                               for (std::size_t p = 0; p < k; ++p) ga[p] += gj * br[p];
                             }
                           } else {
                             for (std::size_t p = 0; p < k; ++p) {
                               const double* br = B + p * n;
                               double acc = 0.0;
                               for (std::size_t j = 0; j < n; ++j) acc += g[j] * br[j];
                               ga[p] += acc;
                             }
                           }
                         }
                       }
                       if (wants_grad(in_b)) {
                         double* GB = in_b->grad_buffer().data();
                         for (std::size_t i = 0; i < m; ++i) {
                           const double* g = G + i * n;
                           const double* ar = A + i * k;
                           if (transpose_b) {
                             for (std::size_t j = 0; j < n; ++j) {
                               const double gj = g[j];
                               double* gb = GB + j * k;
                               for (std::size_t p = 0; p < k; ++p) gb[p] += gj * ar[p];
                             }
                           } else {
                             for (std::size_t p = 0; p < k; ++p) {
                               const double x = ar[p];
                               double* gb = GB + p * n;
                               for (std::size_t j = 0; j < n; ++j) gb[j] += x * g[j];
                             }
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  Tensor y = matmul(x, weight);
  if (!bias.defined()) return y;
  if (bias.rank() != 1 || bias.dim(0) != y.shape().back()) {
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match output " +
                     shape_str(y.shape()));
  }
  return add(y, bias);
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {a}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    const double g = self.grad[0];
    for (auto& v : gi) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean_rows(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) == 0) {
    throw ShapeError("mean_rows: expected non-empty [N, d], got " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(0), d = a.dim(1);
  const auto av = a.data();
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += av[i * d + j];
  for (auto& v : out) v /= static_cast<double>(n);
  return make_result({d}, std::move(out), {a}, [n, d](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) gi[i * d + j] += self.grad[j] / static_cast<double>(n);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& gi = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  if (gamma.defined() && gamma.numel() != d) {
    throw ShapeError("layer_norm: gain shape " + shape_str(gamma.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  if (beta.defined() && beta.numel() != d) {
    throw ShapeError("layer_norm: bias shape " + shape_str(beta.shape()) + " vs input " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mu) * inv;
      (*xhat)[r * d + j] = h;
      double y = h;
      if (gamma.defined()) y *= gamma.data()[j];
      if (beta.defined()) y += beta.data()[j];
      out[r * d + j] = y;
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat, inv_std](Node& self) {
                       const auto& in_x = self.inputs[0];
                       const auto& in_g = self.inputs[1];
                       const auto& in_b = self.inputs[2];
                       const auto& g = self.grad;
                       if (wants_grad(in_g)) {
                         auto& gg = in_g->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * (*xhat)[i];
                       }
                       if (wants_grad(in_b)) {
                         auto& gb = in_b->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                       }
                       if (wants_grad(in_x)) {
                         auto& gx = in_x->grad_buffer();
                         std::vector<double> dh(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             double v = g[r * d + j];
                             if (in_g) v *= in_g->value[j];
                             dh[j] = v;
                             m1 += v;
                             m2 += v * (*xhat)[r * d + j];
                           }
                           m1 /= static_cast<double>(d);
                           m2 /= static_cast<double>(d);
                           const double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             gx[r * d + j] += inv * (dh[j] - m1 - (*xhat)[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor softmax(const Tensor& x) {
  const std::size_t d = last_dim(x, "softmax");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (out[r * d + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] /= z;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, d](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.value[r * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += self.value[r * d + j] * (self.grad[r * d + j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t d = last_dim(x, "log_softmax");
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(xr[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] - lse;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, d](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < d; ++j) gs += self.grad[r * d + j];
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += self.grad[r * d + j] - std::exp(self.value[r * d + j]) * gs;
      }
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, Shape prefix) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, d], got " + shape_str(table.shape()));
  if (shape_numel(prefix) != ids.size()) {
    throw ShapeError("embedding: prefix " + shape_str(prefix) + " does not hold " +
                     std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  std::vector<double> out(ids.size() * d);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table of shape " +
                       shape_str(table.shape()));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Shape shape = std::move(prefix);
  shape.push_back(d);
  return make_result(std::move(shape), std::move(out), {table}, [idx, d](Node& self) {
    auto& gt = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const std::size_t base = static_cast<std::size_t>((*idx)[i]) * d;
      for (std::size_t j = 0; j < d; ++j) gt[base + j] += self.grad[i * d + j];
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::int64_t> rows) {
  if (x.rank() < 1) throw ShapeError("select_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t width = n == 0 ? 0 : x.numel() / n;
  auto idx = std::make_shared<std::vector<std::int64_t>>(rows.begin(), rows.end());
  std::vector<double> out(rows.size() * width, 0.0);
  const auto xv = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto r = rows[i];
    if (r < -1 || r >= static_cast<std::int64_t>(n)) {
      throw ShapeError("select_rows: row " + std::to_string(r) + " outside " + shape_str(x.shape()));
    }
    if (r < 0) continue;
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * width),
                width, out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  return make_result(std::move(shape), std::move(out), {x}, [idx, width](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx->size(); ++i) {
      const auto r = (*idx)[i];
      if (r < 0) continue;
      const std::size_t base = static_cast<std::size_t>(r) * width;
      for (std::size_t j = 0; j < width; ++j) gx[base + j] += self.grad[i * width + j];
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    Shape pt(p.shape().begin() + 1, p.shape().end());
    if (p.rank() < 1 || pt != tail) {
      throw ShapeError("concat_rows: shape " + shape_str(p.shape()) + " incompatible with " +
                       shape_str(parts[0].shape()));
    }
    offsets.push_back(out.size());
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape shape = parts[0].shape();
  shape[0] = rows;
  return make_result(std::move(shape), std::move(out), parts, [offsets](Node& self) {
    for (std::size_t p = 0; p < self.inputs.size(); ++p) {
      const auto& in = self.inputs[p];
      if (!wants_grad(in)) continue;
      auto& gi = in->grad_buffer();
      for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += self.grad[offsets[p] + j];
    }
  });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  const std::size_t d = last_dim(x, "l2_normalize");
  const std::size_t rows = x.numel() / d;
  auto norms = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xv[r * d + j] * xv[r * d + j];
    const double nrm = std::sqrt(s + eps);
    (*norms)[r] = nrm;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] / nrm;
  }
  return make_result(x.shape(), std::move(out), {x}, [rows, d, norms](Node& self) {
    const auto& in = self.inputs[0];
    auto& gx = in->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double nrm = (*norms)[r];
      double gdotx = 0.0;
      for (std::size_t j = 0; j < d; ++j) gdotx += self.grad[r * d + j] * in->value[r * d + j];
      const double n3 = nrm * nrm * nrm;
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += self.grad[r * d + j] / nrm - in->value[r * d + j] * gdotx / n3;
      }
    }
  });
}

Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "rowwise_dot");
  const std::size_t d = last_dim(a, "rowwise_dot");
  const std::size_t rows = a.numel() / d;
  std::vector<double> out(rows, 0.0);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += av[r * d + j] * bv[r * d + j];
  Shape shape(a.shape().begin(), a.shape().end() - 1);
  return make_result(std::move(shape), std::move(out), {a, b}, [rows, d](Node& self) {
    const auto& in_a = self.inputs[0];
    const auto& in_b = self.inputs[1];
    if (wants_grad(in_a)) {
      auto& ga = in_a->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += self.grad[r] * in_b->value[r * d + j];
    }
    if (wants_grad(in_b)) {
      auto& gb = in_b->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += self.grad[r] * in_a->value[r * d + j];
    }
  });
}

Tensor max_pool_time(const Tensor& x, std::span<const std::size_t> lengths) {
  if (x.rank() != 3) throw ShapeError("max_pool_time: expected [B, T, d], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  if (lengths.size() != B) {
    throw ShapeError("max_pool_time: " + std::to_string(lengths.size()) + " lengths for batch " +
                     shape_str(x.shape()));
  }
  auto arg = std::make_shared<std::vector<std::size_t>>(B * d);
  std::vector<double> out(B * d);
  const auto xv = x.data();
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::min(lengths[b], T);
    if (len == 0) throw ShapeError("max_pool_time: empty sequence in batch");
    for (std::size_t j = 0; j < d; ++j) {
      std::size_t best = 0;
      double bv = xv[(b * T) * d + j];
      for (std::size_t t = 1; t < len; ++t) {
        const double v = xv[(b * T + t) * d + j];
        if (v > bv) {
          bv = v;
          best = t;
        }
      }
      out[b * d + j] = bv;
      (*arg)[b * d + j] = (b * T + best) * d + j;
    }
  }
  return make_result({B, d}, std::move(out), {x}, [arg](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < arg->size(); ++i) gx[(*arg)[i]] += self.grad[i];
  });
}

Tensor nll_loss(const Tensor& log_probs, std::span<const int> targets) {
  if (log_probs.rank() != 2 || log_probs.dim(0) != targets.size()) {
    throw ShapeError("nll_loss: log-probs " + shape_str(log_probs.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) throw ShapeError("nll_loss: no target positions");
  const std::size_t n = targets.size(), c = log_probs.dim(1);
  auto tg = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw ShapeError("nll_loss: target " + std::to_string(t) + " outside " +
                       shape_str(log_probs.shape()));
    }
    s -= log_probs.data()[i * c + static_cast<std::size_t>(t)];
  }
  return make_result({}, {s / static_cast<double>(n)}, {log_probs}, [tg, n, c](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double w = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) g[i * c + static_cast<std::size_t>((*tg)[i])] -= w;
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
  return nll_loss(log_softmax(logits), targets);
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  require_same_shape(hard, soft, "straight_through");
  std::vector<double> out(hard.data().begin(), hard.data().end());
  return make_result(hard.shape(), std::move(out), {soft}, [](Node& self) {
    auto& gs = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += self.grad[i];
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw Error("dropout probability must be < 1");
  const std::size_t n = x.numel();
  auto keep = std::make_shared<std::vector<double>>(n);
  const double kept_scale = 1.0 / (1.0 - p);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*keep)[i] = uniform01(rng) < p ? 0.0 : kept_scale;
    out[i] = x.data()[i] * (*keep)[i];
  }
  return make_result(x.shape(), std::move(out), {x}, [keep](Node& self) {
    auto& gx = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * (*keep)[i];
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionOptions& opts) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + " and k/v " +
                     shape_str(k.shape()) + "/" + shape_str(v.shape()));
  }
  const std::size_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), d = q.dim(2);
  const std::size_t H = opts.heads;
  if (H == 0 || d % H != 0) {
    throw ShapeError("attention: model dim " + std::to_string(d) + " not divisible by " +
                     std::to_string(H) + " heads");
  }
  const std::size_t dh = d / H;
  const std::size_t R = opts.max_relative;
  const bool has_bias = opts.relative_bias.defined();
  if (has_bias && (opts.relative_bias.rank() != 2 || opts.relative_bias.dim(0) != H ||
                   opts.relative_bias.dim(1) != 2 * R + 1)) {
    throw ShapeError("attention: relative bias " + shape_str(opts.relative_bias.shape()) +
                     " does not match heads/max_relative");
  }
  if (!opts.key_lengths.empty() && opts.key_lengths.size() != B) {
    throw ShapeError("attention: key length count does not match batch");
  }
  auto key_len = std::make_shared<std::vector<std::size_t>>(B, Tk);
  if (!opts.key_lengths.empty()) {
    for (std::size_t b = 0; b < B; ++b) (*key_len)[b] = std::min(opts.key_lengths[b], Tk);
  }
  const bool causal = opts.causal;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto rel_index = [R](std::size_t i, std::size_t j) {
    const auto diff = static_cast<std::int64_t>(j) - static_cast<std::int64_t>(i);
    const auto r = static_cast<std::int64_t>(R);
    return static_cast<std::size_t>(std::clamp(diff, -r, r) + r);
  };

  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  const double* BIAS = has_bias ? opts.relative_bias.data().data() : nullptr;
  auto probs = std::make_shared<std::vector<double>>(B * H * Tq * Tk, 0.0);
  std::vector<double> out(B * Tq * d, 0.0);
  std::vector<double> row(Tk);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = (*key_len)[b];
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < Tq; ++i) {
        const std::size_t jmax = causal ? std::min(len, i + 1) : len;
        if (jmax == 0) continue;
        const double* qi = Q + (b * Tq + i) * d + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          const double* kj = K + (b * Tk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          s *= inv_scale;
          if (BIAS) s += BIAS[h * (2 * R + 1) + rel_index(i, j)];
          row[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) z += (row[j] = std::exp(row[j] - mx));
        double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
        double* oi = out.data() + (b * Tq + i) * d + h * dh;
        for (std::size_t j = 0; j < jmax; ++j) {
          p[j] = row[j] / z;
          const double* vj = V + (b * Tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return make_result(
      {B, Tq, d}, std::move(out), {q, k, v, opts.relative_bias},
      [=](Node& self) {
        const auto& nq = self.inputs[0];
        const auto& nk = self.inputs[1];
        const auto& nv = self.inputs[2];
        const auto& nb = self.inputs[3];
        const double* Q = nq->value.data();
        const double* K = nk->value.data();
        const double* V = nv->value.data();
        const double* G = self.grad.data();
        double* GQ = wants_grad(nq) ? nq->grad_buffer().data() : nullptr;
        double* GK = wants_grad(nk) ? nk->grad_buffer().data() : nullptr;
        double* GV = wants_grad(nv) ? nv->grad_buffer().data() : nullptr;
        double* GB = wants_grad(nb) ? nb->grad_buffer().data() : nullptr;
        std::vector<double> ds(Tk);
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t len = (*key_len)[b];
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < Tq; ++i) {
              const std::size_t jmax = causal ? std::min(len, i + 1) : len;
              if (jmax == 0) continue;
              const double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
              const double* gi = G + (b * Tq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double* vj = V + (b * Tk + j) * d + h * dh;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dp += gi[c] * vj[c];
                ds[j] = dp;
                dot += p[j] * dp;
                if (GV) {
                  double* gvj = GV + (b * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * gi[c];
                }
              }
              const double* qi = Q + (b * Tq + i) * d + h * dh;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double dsj = p[j] * (ds[j] - dot);
                if (GB) GB[h * (2 * R + 1) + rel_index(i, j)] += dsj;
                const double w = dsj * inv_scale;
                if (GQ) {
                  const double* kj = K + (b * Tk + j) * d + h * dh;
                  double* gqi = GQ + (b * Tq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += w * kj[c];
                }
                if (GK) {
                  double* gkj = GK + (b * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += w * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                        std::span<const std::size_t> lengths) {
  if (x.rank() != 3 || weight.rank() != 2 || weight.dim(1) != x.dim(2) || weight.dim(0) % 2 == 0) {
    throw ShapeError("depthwise_conv1d: input " + shape_str(x.shape()) + " vs kernel " +
                     shape_str(weight.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), C = x.dim(2), K = weight.dim(0);
  if (bias.defined() && bias.numel() != C) {
    throw ShapeError("depthwise_conv1d: bias " + shape_str(bias.shape()) + " vs channels " +
                     std::to_string(C));
  }
  if (lengths.size() != B) throw ShapeError("depthwise_conv1d: lengths do not match batch");
  auto lens = std::make_shared<std::vector<std::size_t>>(lengths.begin(), lengths.end());
  const std::size_t pad = K / 2;
  const double* X = x.data().data();
  const double* W = weight.data().data();
  std::vector<double> out(B * T * C, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::min((*lens)[b], T);
    for (std::size_t t = 0; t < T; ++t) {
      double* o = out.data() + (b * T + t) * C;
      if (bias.defined()) std::copy_n(bias.data().data(), C, o);
      for (std::size_t kk = 0; kk < K; ++kk) {
        const auto src = static_cast<std::int64_t>(t + kk) - static_cast<std::int64_t>(pad);
        if (src < 0 || src >= static_cast<std::int64_t>(len)) continue;
        const double* xs = X + (b * T + static_cast<std::size_t>(src)) * C;
        const double* w = W + kk * C;
        for (std::size_t c = 0; c < C; ++c) o[c] += w[c] * xs[c];
      }
    }
  }
  return make_result(x.shape(), std::move(out), {x, weight, bias}, [=](Node& self) {
    const auto& nx = self.inputs[0];
    const auto& nw = self.inputs[1];
    const auto& nb = self.inputs[2];
    const double* X = nx->value.data();
    const double* W = nw->value.data();
    double* GX = wants_grad(nx) ? nx->grad_buffer().data() : nullptr;
    double* GW = wants_grad(nw) ? nw->grad_buffer().data() : nullptr;
    double* GB = wants_grad(nb) ? nb->grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t len = std::min((*lens)[b], T);
      for (std::size_t t = 0; t < T; ++t) {
        const double* g = self.grad.data() + (b * T + t) * C;
        if (GB)
          for (std::size_t c = 0; c < C; ++c) GB[c] += g[c];
        for (std::size_t kk = 0; kk < K; ++kk) {
          const auto src = static_cast<std::int64_t>(t + kk) - static_cast<std::int64_t>(pad);
          if (src < 0 || src >= static_cast<std::int64_t>(len)) continue;
          const std::size_t off = (b * T + static_cast<std::size_t>(src)) * C;
          for (std::size_t c = 0; c < C; ++c) {
            if (GX) GX[off + c] += g[c] * W[kk * C + c];
            if (GW) GW[kk * C + c] += g[c] * X[off + c];
          }
        }
      }
    }
  });
}

Tensor conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::span<const std::size_t> lengths) {
  if (x.rank() != 3 || weight.rank() != 2 || kernel % 2 == 0 || stride == 0 ||
      weight.dim(0) != kernel * x.dim(2)) {
    throw ShapeError("conv1d: input " + shape_str(x.shape()) + " vs weight " +
                     shape_str(weight.shape()) + " (kernel " + std::to_string(kernel) + ")");
  }
  const std::size_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2), Cout = weight.dim(1);
  if (bias.defined() && bias.numel() != Cout) {
    throw ShapeError("conv1d: bias " + shape_str(bias.shape()) + " vs output channels " +
                     std::to_string(Cout));
  }
  if (lengths.size() != B) throw ShapeError("conv1d: lengths do not match batch");
  auto lens = std::make_shared<std::vector<std::size_t>>(lengths.begin(), lengths.end());
  const std::size_t pad = (kernel - 1) / 2;
  const std::size_t To = (T + stride - 1) / stride;
  const double* X = x.data().data();
  const double* W = weight.data().data();
  std::vector<double> out(B * To * Cout, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = std::min((*lens)[b], T);
    for (std::size_t o = 0; o < To; ++o) {
      double* y = out.data() + (b * To + o) * Cout;
      if (bias.defined()) std::copy_n(bias.data().data(), Cout, y);
      for (std::size_t kk = 0; kk < kernel; ++kk) {
        const auto src = static_cast<std::int64_t>(o * stride + kk) - static_cast<std::int64_t>(pad);
        if (src < 0 || src >= static_cast<std::int64_t>(len)) continue;
        const double* xs = X + (b * T + static_cast<std::size_t>(src)) * Cin;
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const double xv = xs[ci];
          const double* w = W + (kk * Cin + ci) * Cout;
          for (std::size_t co = 0; co < Cout; ++co) y[co] += xv * w[co];
        }
      }
    }
  }
  return make_result({B, To, Cout}, std::move(out), {x, weight, bias}, [=](Node& self) {
    const auto& nx = self.inputs[0];
    const auto& nw = self.inputs[1];
    const auto& nb = self.inputs[2];
    const double* X = nx->value.data();
    const double* W = nw->value.data();
    double* GX = wants_grad(nx) ? nx->grad_buffer().data() : nullptr;
    double* GW = wants_grad(nw) ? nw->grad_buffer().data() : nullptr;
    double* GB = wants_grad(nb) ? nb->grad_buffer().data() : nullptr;
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t len = std::min((*lens)[b], T);
      for (std::size_t o = 0; o < To; ++o) {
        const double* g = self.grad.data() + (b * To + o) * Cout;
        if (GB)
          for (std::size_t co = 0; co < Cout; ++co) GB[co] += g[co];
        for (std::size_t kk = 0; kk < kernel; ++kk) {
          const auto src =
              static_cast<std::int64_t>(o * stride + kk) - static_cast<std::int64_t>(pad);
          if (src < 0 || src >= static_cast<std::int64_t>(len)) continue;
          const std::size_t xoff = (b * T + static_cast<std::size_t>(src)) * Cin;
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double* w = W + (kk * Cin + ci) * Cout;
            if (GX) {
              double acc = 0.0;
              for (std::size_t co = 0; co < Cout; ++co) acc += g[co] * w[co];
              GX[xoff + ci] += acc;
            }
            if (GW) {
              double* gw = GW + (kk * Cin + ci) * Cout;
              const double xv = X[xoff + ci];
              for (std::size_t co = 0; co < Cout; ++co) gw[co] += xv * g[co];
            }
          }
        }
      }
    }
  });
}

}  // namespace jst
