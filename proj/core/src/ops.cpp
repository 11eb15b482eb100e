#include "dinocell/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dinocell/errors.hpp"

namespace dinocell::ops {

namespace {

using detail::make_result;
using detail::Node;

// Results must not depend on thread scheduling.
const bool kBlasSingleThread = [] {
  openblas_set_num_threads(1);
  return true;
}();

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (beta == 0.0f) {
      for (std::size_t i = 0; i < m; ++i) std::fill_n(c + i * ldc, n, 0.0f);
    }
    return;
  }
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
              static_cast<blasint>(n), static_cast<blasint>(k), alpha, a,
              static_cast<blasint>(lda), b, static_cast<blasint>(ldb), beta, c,
              static_cast<blasint>(ldc));
}

bool wants_grad(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

std::vector<float>& grad_of(Node& self, std::size_t i) { return self.parents[i]->ensure_grad(); }

void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

std::size_t last_dim(const Tensor& t, const char* op) {
  require(t.rank() >= 1, std::string(op) + ": tensor must have rank >= 1");
  return t.shape().back();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                                      " vs " + shape_string(b.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<float> out(m * n);
  gemm(false, false, m, n, k, 1.0f, a.data().data(), k, b.data().data(), n, 0.0f, out.data(), n);
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](Node& self) {
        const float* g = self.grad.data();
        if (wants_grad(self, 0)) {
          gemm(false, true, m, k, n, 1.0f, g, n, self.parents[1]->data.data(), n, 1.0f,
               grad_of(self, 0).data(), k);
        }
        if (wants_grad(self, 1)) {
          gemm(true, false, k, n, m, 1.0f, self.parents[0]->data.data(), k, g, n, 1.0f,
               grad_of(self, 1).data(), n);
        }
      },
      "matmul");
}

Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
          "matmul_bt: incompatible shapes " + shape_string(a.shape()) + " and " +
              shape_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<float> out(m * n);
  gemm(false, true, m, n, k, 1.0f, a.data().data(), k, b.data().data(), k, 0.0f, out.data(), n);
  return make_result(
      {m, n}, std::move(out), {a, b},
      [m, k, n](Node& self) {
        const float* g = self.grad.data();
        if (wants_grad(self, 0)) {
          gemm(false, false, m, k, n, 1.0f, g, n, self.parents[1]->data.data(), k, 1.0f,
               grad_of(self, 0).data(), k);
        }
        if (wants_grad(self, 1)) {
          gemm(true, false, n, k, m, 1.0f, g, n, self.parents[0]->data.data(), k, 1.0f,
               grad_of(self, 1).data(), k);
        }
      },
      "matmul_bt");
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t in = last_dim(x, "linear");
  require(weight.rank() == 2 && weight.dim(0) == in,
          "linear: weight " + shape_string(weight.shape()) + " does not accept input " +
              shape_string(x.shape()));
  const std::size_t out_dim = weight.dim(1);
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.rank() == 1 && bias.dim(0) == out_dim, "linear: bias shape mismatch");
  }
  const std::size_t rows = x.numel() / in;
  std::vector<float> out(rows * out_dim);
  if (has_bias) {
    auto b = bias.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy(b.begin(), b.end(), out.begin() + r * out_dim);
  }
  gemm(false, false, rows, out_dim, in, 1.0f, x.data().data(), in, weight.data().data(), out_dim,
       has_bias ? 1.0f : 0.0f, out.data(), out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<Tensor> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return make_result(
      std::move(shape), std::move(out), std::move(parents),
      [rows, in, out_dim, has_bias](Node& self) {
        const float* g = self.grad.data();
        if (wants_grad(self, 0)) {
          gemm(false, true, rows, in, out_dim, 1.0f, g, out_dim, self.parents[1]->data.data(),
               out_dim, 1.0f, grad_of(self, 0).data(), in);
        }
        if (wants_grad(self, 1)) {
          gemm(true, false, in, out_dim, rows, 1.0f, self.parents[0]->data.data(), in, g, out_dim,
               1.0f, grad_of(self, 1).data(), out_dim);
        }
        if (has_bias && wants_grad(self, 2)) {
          auto& gb = grad_of(self, 2);
          for (std::size_t r = 0; r < rows; ++r) {
            const float* row = g + r * out_dim;
            for (std::size_t j = 0; j < out_dim; ++j) gb[j] += row[j];
          }
        }
      },
      "linear");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        for (std::size_t p = 0; p < 2; ++p) {
          if (!wants_grad(self, p)) continue;
          auto& g = grad_of(self, p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      },
      "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        if (wants_grad(self, 0)) {
          auto& g = grad_of(self, 0);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad(self, 1)) {
          auto& g = grad_of(self, 1);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      },
      "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return make_result(
      a.shape(), std::move(out), {a, b},
      [](Node& self) {
        const auto& xa = self.parents[0]->data;
        const auto& xb = self.parents[1]->data;
        if (wants_grad(self, 0)) {
          auto& g = grad_of(self, 0);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xb[i];
        }
        if (wants_grad(self, 1)) {
          auto& g = grad_of(self, 1);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xa[i];
        }
      },
      "mul");
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_result(
      a.shape(), std::move(out), {a},
      [factor](Node& self) {
        auto& g = grad_of(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
      },
      "scale");
}

Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  require(ys.size() <= xs.size() && std::equal(ys.rbegin(), ys.rend(), xs.rbegin()),
          "add_broadcast: " + shape_string(ys) + " is not a trailing shape of " + shape_string(xs));
  const std::size_t inner = y.numel();
  const std::size_t outer = inner == 0 ? 0 : x.numel() / inner;
  std::vector<float> out(x.data().begin(), x.data().end());
  auto dy = y.data();
  for (std::size_t o = 0; o < outer; ++o) {
    float* row = out.data() + o * inner;
    for (std::size_t i = 0; i < inner; ++i) row[i] += dy[i];
  }
  return make_result(
      xs, std::move(out), {x, y},
      [outer, inner](Node& self) {
        if (wants_grad(self, 0)) {
          auto& g = grad_of(self, 0);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants_grad(self, 1)) {
          auto& g = grad_of(self, 1);
          for (std::size_t o = 0; o < outer; ++o) {
            const float* row = self.grad.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) g[i] += row[i];
          }
        }
      },
      "add_broadcast");
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  return make_result(
      {}, {static_cast<float>(acc)}, {a},
      [](Node& self) {
        auto& g = grad_of(self, 0);
        const float s = self.grad[0];
        for (auto& v : g) v += s;
      },
      "sum");
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean: empty tensor");
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  const double n = static_cast<double>(a.numel());
  return make_result(
      {}, {static_cast<float>(acc / n)}, {a},
      [n](Node& self) {
        auto& g = grad_of(self, 0);
        const float s = static_cast<float>(self.grad[0] / n);
        for (auto& v : g) v += s;
      },
      "mean");
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  return make_result(
      std::move(shape), std::vector<float>(a.data().begin(), a.data().end()), {a},
      [](Node& self) {
        auto& g = grad_of(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      },
      "reshape");
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0f ? v : 0.0f;
  return make_result(
      x.shape(), std::move(out), {x},
      [](Node& self) {
        auto& g = grad_of(self, 0);
        const auto& in = self.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] > 0.0f) g[i] += self.grad[i];
        }
      },
      "relu");
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  std::vector<float> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5f * in[i] * (1.0f + std::erf(in[i] * kInvSqrt2));
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [](Node& self) {
        constexpr float kInvSqrt2Pi = 0.39894228040143268f;
        auto& g = grad_of(self, 0);
        const auto& in = self.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const float v = in[i];
          const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
          const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
          g[i] += self.grad[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

Tensor dropout(const Tensor& x, float p, std::mt19937_64& rng) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::uniform_real_distribution<float> uniform(0.0f, 1.0f);
  std::vector<float> mask(x.numel());
  for (auto& m : mask) m = uniform(rng) < p ? 0.0f : keep_scale;
  std::vector<float> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * mask[i];
  return make_result(
      x.shape(), std::move(out), {x},
      [mask = std::move(mask)](Node& self) {
        auto& g = grad_of(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
      },
      "dropout");
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = last_dim(x, "layer_norm");
  require(gamma.shape() == Shape{d} && beta.shape() == Shape{d},
          "layer_norm: affine parameters must have shape [" + std::to_string(d) + "]");
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_std(rows);
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>(row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gm[j] + bt[j];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const float* g = self.grad.data();
        const auto& gm = self.parents[1]->data;
        if (wants_grad(self, 0)) {
          auto& gx = grad_of(self, 0);
          for (std::size_t r = 0; r < rows; ++r) {
            const float* gr = g + r * d;
            const float* hr = xhat.data() + r * d;
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = static_cast<double>(gr[j]) * gm[j];
              mean_dh += dh;
              mean_dh_h += dh * hr[j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_h /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = static_cast<double>(gr[j]) * gm[j];
              gx[r * d + j] += static_cast<float>(inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h));
            }
          }
        }
        if (wants_grad(self, 1)) {
          auto& gg = grad_of(self, 1);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
          }
        }
        if (wants_grad(self, 2)) {
          auto& gb = grad_of(self, 2);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
          }
        }
      },
      "layer_norm");
}

Tensor l2_normalize_rows(const Tensor& x, float eps) {
  const std::size_t d = last_dim(x, "l2_normalize_rows");
  const std::size_t rows = x.numel() / d;
  std::vector<float> out(x.numel());
  std::vector<float> norms(rows);
  auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += static_cast<double>(in[r * d + j]) * in[r * d + j];
    const float n = std::max(static_cast<float>(std::sqrt(ss)), eps);
    norms[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = in[r * d + j] / n;
  }
  return make_result(
      x.shape(), std::move(out), {x},
      [rows, d, eps, norms = std::move(norms)](Node& self) {
        auto& gx = grad_of(self, 0);
        const auto& in = self.parents[0]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const float n = norms[r];
          const float* gr = self.grad.data() + r * d;
          if (n <= eps) {
            for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += gr[j] / n;
            continue;
          }
          // y = x / |x|  =>  dx = (g - y (y . g)) / |x|
          double dot = 0.0;
          for (std::size_t j = 0; j < d; ++j) dot += static_cast<double>(gr[j]) * in[r * d + j] / n;
          for (std::size_t j = 0; j < d; ++j) {
            const double y = in[r * d + j] / n;
            gx[r * d + j] += static_cast<float>((gr[j] - y * dot) / n);
          }
        }
      },
      "l2_normalize_rows");
}

std::vector<float> softmax_values(std::span<const float> logits, std::size_t cols, float tau) {
  if (!(tau > 0.0f)) throw ConfigError("softmax temperature must be positive");
  if (cols == 0 || logits.size() % cols != 0) throw ShapeError("softmax: invalid row width");
  detail::check_finite(logits, "softmax input");
  const std::size_t rows = logits.size() / cols;
  std::vector<float> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = logits.data() + r * cols;
    float* o = out.data() + r * cols;
    const float mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      o[j] = std::exp((row[j] - mx) / tau);
      z += o[j];
    }
    const float inv = static_cast<float>(1.0 / z);
    for (std::size_t j = 0; j < cols; ++j) o[j] *= inv;
  }
  return out;
}

double row_entropy_mean(std::span<const float> probs, std::size_t cols) {
  if (cols == 0 || probs.size() % cols != 0) throw ShapeError("entropy: invalid row width");
  const std::size_t rows = probs.size() / cols;
  if (rows == 0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    if (p > 0.0) total -= p * std::log(p);
  }
  return total / static_cast<double>(rows);
}

Tensor tempered_softmax(const Tensor& logits, float tau) {
  const std::size_t k = last_dim(logits, "tempered_softmax");
  require(k >= 1, "tempered_softmax: need at least one class");
  auto out = softmax_values(logits.data(), k, tau);
  const std::size_t rows = logits.numel() / k;
  return make_result(
      logits.shape(), std::move(out), {logits},
      [rows, k, tau](Node& self) {
        auto& gl = grad_of(self, 0);
        const float* p = self.data.data();
        const float* g = self.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) dot += static_cast<double>(g[r * k + j]) * p[r * k + j];
          for (std::size_t j = 0; j < k; ++j) {
            gl[r * k + j] += static_cast<float>(p[r * k + j] * (g[r * k + j] - dot) / tau);
          }
        }
      },
      "tempered_softmax");
}

Tensor cross_entropy_rows(const Tensor& p_teacher, const Tensor& p_student) {
  require_same_shape(p_teacher, p_student, "cross_entropy_rows");
  const std::size_t k = last_dim(p_teacher, "cross_entropy_rows");
  const std::size_t rows = p_teacher.numel() / k;
  require(rows > 0, "cross_entropy_rows: no rows");
  auto pt = p_teacher.data();
  auto ps = p_student.data();
  double total = 0.0;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    total -= static_cast<double>(pt[i]) * std::log(static_cast<double>(ps[i]) + kLogFloor);
  }
  const double n = static_cast<double>(rows);
  return make_result(
      {}, {static_cast<float>(total / n)}, {p_teacher, p_student},
      [n](Node& self) {
        const double g = self.grad[0] / n;
        const auto& pt = self.parents[0]->data;
        const auto& ps = self.parents[1]->data;
        if (wants_grad(self, 0)) {
          auto& gt = grad_of(self, 0);
          for (std::size_t i = 0; i < gt.size(); ++i) {
            gt[i] -= static_cast<float>(g * std::log(static_cast<double>(ps[i]) + kLogFloor));
          }
        }
        if (wants_grad(self, 1)) {
          auto& gs = grad_of(self, 1);
          for (std::size_t i = 0; i < gs.size(); ++i) {
            gs[i] -= static_cast<float>(g * pt[i] / (static_cast<double>(ps[i]) + kLogFloor));
          }
        }
      },
      "cross_entropy_rows");
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  require_same_shape(logits, targets, "bce_with_logits");
  require(logits.numel() > 0, "bce_with_logits: empty input");
  auto x = logits.data();
  auto y = targets.data();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    total += std::max(v, 0.0) - v * y[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const double n = static_cast<double>(x.size());
  return make_result(
      {}, {static_cast<float>(total / n)}, {logits, targets},
      [n](Node& self) {
        const double g = self.grad[0] / n;
        const auto& x = self.parents[0]->data;
        const auto& y = self.parents[1]->data;
        if (wants_grad(self, 0)) {
          auto& gx = grad_of(self, 0);
          for (std::size_t i = 0; i < gx.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
            gx[i] += static_cast<float>(g * (sig - y[i]));
          }
        }
        if (wants_grad(self, 1)) {
          auto& gy = grad_of(self, 1);
          for (std::size_t i = 0; i < gy.size(); ++i) gy[i] -= static_cast<float>(g * x[i]);
        }
      },
      "bce_with_logits");
}

Tensor multi_head_attention(const Tensor& qkv, std::size_t num_heads) {
  require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0,
          "multi_head_attention: expected [N x T x 3*dim], got " + shape_string(qkv.shape()));
  const std::size_t batch = qkv.dim(0), tokens = qkv.dim(1), dim = qkv.dim(2) / 3;
  require(num_heads > 0 && dim % num_heads == 0,
          "multi_head_attention: dim not divisible by head count");
  const std::size_t hd = dim / num_heads;
  const std::size_t stride = 3 * dim;
  const float scale_factor = 1.0f / std::sqrt(static_cast<float>(hd));
  std::vector<float> probs(batch * num_heads * tokens * tokens);
  std::vector<float> out(batch * tokens * dim);
  const float* base = qkv.data().data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < num_heads; ++h) {
      const float* q = base + n * tokens * stride + h * hd;
      const float* k = q + dim;
      const float* v = q + 2 * dim;
      float* p = probs.data() + (n * num_heads + h) * tokens * tokens;
      gemm(false, true, tokens, tokens, hd, scale_factor, q, stride, k, stride, 0.0f, p, tokens);
      for (std::size_t i = 0; i < tokens; ++i) {
        float* row = p + i * tokens;
        const float mx = *std::max_element(row, row + tokens);
        double z = 0.0;
        for (std::size_t j = 0; j < tokens; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (std::size_t j = 0; j < tokens; ++j) row[j] *= inv;
      }
      gemm(false, false, tokens, hd, tokens, 1.0f, p, tokens, v, stride, 0.0f,
           out.data() + n * tokens * dim + h * hd, dim);
    }
  }
  return make_result(
      {batch, tokens, dim}, std::move(out), {qkv},
      [=, probs = std::move(probs)](Node& self) {
        auto& gqkv = grad_of(self, 0);
        const float* in = self.parents[0]->data.data();
        std::vector<float> dp(tokens * tokens);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t h = 0; h < num_heads; ++h) {
            const std::size_t off = n * tokens * stride + h * hd;
            const float* q = in + off;
            const float* k = q + dim;
            const float* v = q + 2 * dim;
            float* gq = gqkv.data() + off;
            float* gk = gq + dim;
            float* gv = gq + 2 * dim;
            const float* p = probs.data() + (n * num_heads + h) * tokens * tokens;
            const float* go = self.grad.data() + n * tokens * dim + h * hd;
            // dV = P^T dO ; dP = dO V^T
            gemm(true, false, tokens, hd, tokens, 1.0f, p, tokens, go, dim, 1.0f, gv, stride);
            gemm(false, true, tokens, tokens, hd, 1.0f, go, dim, v, stride, 0.0f, dp.data(), tokens);
            for (std::size_t i = 0; i < tokens; ++i) {
              float* dr = dp.data() + i * tokens;
              const float* pr = p + i * tokens;
              double dot = 0.0;
              for (std::size_t j = 0; j < tokens; ++j) dot += static_cast<double>(dr[j]) * pr[j];
              for (std::size_t j = 0; j < tokens; ++j) {
                dr[j] = static_cast<float>(pr[j] * (dr[j] - dot));
              }
            }
            // dQ = dS K * s ; dK = dS^T Q * s
            gemm(false, false, tokens, hd, tokens, scale_factor, dp.data(), tokens, k, stride, 1.0f,
                 gq, stride);
            gemm(true, false, tokens, hd, tokens, scale_factor, dp.data(), tokens, q, stride, 1.0f,
                 gk, stride);
          }
        }
      },
      "multi_head_attention");
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
  require(x.rank() == 3, "prepend_token: expected [N x P x d], got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), patches = x.dim(1), d = x.dim(2);
  require(token.numel() == d, "prepend_token: token width mismatch");
  const std::size_t tokens = patches + 1;
  std::vector<float> out(batch * tokens * d);
  auto in = x.data();
  auto tk = token.data();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy(tk.begin(), tk.end(), out.begin() + n * tokens * d);
    std::copy(in.begin() + n * patches * d, in.begin() + (n + 1) * patches * d,
              out.begin() + n * tokens * d + d);
  }
  return make_result(
      {batch, tokens, d}, std::move(out), {x, token},
      [batch, patches, tokens, d](Node& self) {
        const float* g = self.grad.data();
        if (wants_grad(self, 0)) {
          auto& gx = grad_of(self, 0);
          for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t i = 0; i < patches * d; ++i) {
              gx[n * patches * d + i] += g[n * tokens * d + d + i];
            }
          }
        }
        if (wants_grad(self, 1)) {
          auto& gt = grad_of(self, 1);
          for (std::size_t n = 0; n < batch; ++n) {
            for (std::size_t j = 0; j < d; ++j) gt[j] += g[n * tokens * d + j];
          }
        }
      },
      "prepend_token");
}

Tensor select_token(const Tensor& x, std::size_t index) {
  require(x.rank() == 3, "select_token: expected [N x T x d], got " + shape_string(x.shape()));
  const std::size_t batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  require(index < tokens, "select_token: index out of range");
  std::vector<float> out(batch * d);
  auto in = x.data();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(in.begin() + (n * tokens + index) * d, d, out.begin() + n * d);
  }
  return make_result(
      {batch, d}, std::move(out), {x},
      [batch, tokens, d, index](Node& self) {
        auto& gx = grad_of(self, 0);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t j = 0; j < d; ++j) gx[(n * tokens + index) * d + j] += self.grad[n * d + j];
        }
      },
      "select_token");
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require(x.rank() == 2, "gather_rows: expected a matrix");
  const std::size_t rows = x.dim(0), k = x.dim(1);
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<float> out(idx.size() * k);
  auto in = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < rows, "gather_rows: row index out of range");
    std::copy_n(in.begin() + idx[i] * k, k, out.begin() + i * k);
  }
  const std::size_t count = idx.size();
  return make_result(
      {count, k}, std::move(out), {x},
      [k, idx = std::move(idx)](Node& self) {
        auto& gx = grad_of(self, 0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t j = 0; j < k; ++j) gx[idx[i] * k + j] += self.grad[i * k + j];
        }
      },
      "gather_rows");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: nothing to concatenate");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t total_rows = 0;
  std::vector<std::size_t> offsets;
  std::vector<float> out;
  for (const auto& p : parts) {
    require(p.rank() >= 1 && Shape(p.shape().begin() + 1, p.shape().end()) == tail,
            "concat_rows: trailing shapes differ");
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
    total_rows += p.dim(0);
  }
  Shape shape{total_rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return make_result(
      std::move(shape), std::move(out), parts,
      [offsets = std::move(offsets)](Node& self) {
        for (std::size_t p = 0; p < offsets.size(); ++p) {
          if (!wants_grad(self, p)) continue;
          auto& g = grad_of(self, p);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[p] + i];
        }
      },
      "concat_rows");
}

}  // namespace dinocell::ops
