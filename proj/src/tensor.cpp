#include "xaqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace xaqa {

namespace {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

// c[m×n] += a[m×k] · b[k×n]
void gemm_acc_nn(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×n] += a[m×inner] · b[n×inner]^T  (dot of contiguous rows)
void gemm_acc_nt(double* c, const double* a, const double* b, std::size_t m, std::size_t inner,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * inner;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * inner;
      double acc = 0.0;
      for (std::size_t l = 0; l < inner; ++l) acc += arow[l] * brow[l];
      crow[j] += acc;
    }
  }
}

// c[k×n] += a[m×k]^T · b[m×n]
void gemm_acc_tn(double* c, const double* a, const double* b, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      double* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

using Data = std::shared_ptr<detail::TensorData>;

std::span<double> ensure_grad(const Data& d) {
  if (d->grad.empty()) d->grad.assign(d->values.size(), 0.0);
  return d->grad;
}

// Output grad absent means this value never fed the loss; nothing to do.
bool has_out_grad(const Data& d) { return !d->grad.empty(); }

bool recording(const Tensor& a) { return Graph::active() != nullptr && a.requires_grad(); }

Tensor make_result(Shape shape, std::vector<double> values, bool requires_grad) {
  Tensor t = Tensor::from_values(std::move(shape), std::move(values), requires_grad);
#ifndef NDEBUG
  check_finite(t, "op result");
#endif
  return t;
}

}  // namespace

thread_local Graph* Graph::active_ = nullptr;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(shape_numel(shape), 0.0);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto d = std::make_shared<detail::TensorData>();
  d->values.assign(shape_numel(shape), value);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("from_values: " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  auto d = std::make_shared<detail::TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from_values({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return from_values({rows, cols}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : d_->shape[0]; }

std::size_t Tensor::cols() const {
  if (rank() == 1) return d_->shape[0];
  if (rank() == 2) return d_->shape[1];
  throw ShapeError("cols: rank-" + std::to_string(rank()) + " tensor has no column count");
}

double Tensor::value() const {
  if (!is_scalar()) throw ContractError("value: tensor with " + std::to_string(numel()) + " elements is not a scalar");
  return d_->values[0];
}

std::span<const double> Tensor::grad() const {
  ensure_grad(d_);
  return d_->grad;
}

std::span<double> Tensor::grad_mut() { return ensure_grad(d_); }

void Tensor::zero_grad() {
  if (d_ && !d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar())
    throw ContractError("backward: loss must be a scalar tensor");
  ensure_grad(loss.d_)[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void check_finite(const Tensor& t, const char* what) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(what) + ": non-finite value");
  if (t.has_grad())
    for (double g : t.grad())
      if (!std::isfinite(g)) throw NumericError(std::string(what) + ": non-finite gradient");
}

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!a.is_matrix() || !b.is_matrix() || a.cols() != b.rows()) shape_fail("matmul", a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  gemm_acc_nn(out.data(), a.values().data(), b.values().data(), m, k, n);
  Tensor c = make_result({m, n}, std::move(out), recording(a) || recording(b));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), bd = b.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, bd, cd, m, k, n] {
      if (!has_out_grad(cd)) return;
      if (ad->requires_grad)
        gemm_acc_nt(ensure_grad(ad).data(), cd->grad.data(), bd->values.data(), m, n, k);
      if (bd->requires_grad)
        gemm_acc_tn(ensure_grad(bd).data(), ad->values.data(), cd->grad.data(), m, k, n);
    });
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  if (!a.is_matrix()) throw ShapeError("transpose: rank-2 tensor required");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  Tensor c = make_result({n, m}, std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd, m, n] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += cd->grad[j * m + i];
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  Tensor c = make_result(a.shape(), std::move(out), recording(a) || recording(b));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), bd = b.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, bd, cd] {
      if (!has_out_grad(cd)) return;
      if (ad->requires_grad) {
        auto g = ensure_grad(ad);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i];
      }
      if (bd->requires_grad) {
        auto g = ensure_grad(bd);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i];
      }
    });
  }
  return c;
}

Tensor add_rowvec(const Tensor& a, const Tensor& bias) {
  if (!a.is_matrix() || bias.numel() != a.cols()) shape_fail("add_rowvec", a, bias);
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] + bias.values()[j];
  Tensor c = make_result({m, n}, std::move(out), recording(a) || recording(bias));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), bd = bias.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, bd, cd, m, n] {
      if (!has_out_grad(cd)) return;
      if (ad->requires_grad) {
        auto g = ensure_grad(ad);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i];
      }
      if (bd->requires_grad) {
        auto g = ensure_grad(bd);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) g[j] += cd->grad[i * n + j];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * factor;
  Tensor c = make_result(a.shape(), std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd, factor] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] * factor;
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  Tensor c = make_result(a.shape(), std::move(out), recording(a) || recording(b));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), bd = b.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, bd, cd] {
      if (!has_out_grad(cd)) return;
      if (ad->requires_grad) {
        auto g = ensure_grad(ad);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] * bd->values[i];
      }
      if (bd->requires_grad) {
        auto g = ensure_grad(bd);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] * ad->values[i];
      }
    });
  }
  return c;
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw ShapeError("softmax_rows: empty rows");
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = a.values().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite input");
    double denom = 0.0;
    double* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= denom;
  }
  Tensor c = make_result(a.shape(), std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd, m, n] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < m; ++i) {
        const double* p = cd->values.data() + i * n;
        const double* dy = cd->grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * p[j];
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += p[j] * (dy[j] - dot);
      }
    });
  }
  return c;
}

Tensor log(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(a.values()[i] > 0.0)) throw NumericError("log: non-positive input");
    out[i] = std::log(a.values()[i]);
  }
  Tensor c = make_result(a.shape(), std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[i] / ad->values[i];
    });
  }
  return c;
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
  Tensor c = make_result(a.shape(), std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (ad->values[i] > 0.0) g[i] += cd->grad[i];
    });
  }
  return c;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  Tensor c = make_result(a.shape(), std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double x = ad->values[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        g[i] += cd->grad[i] * (cdf + x * pdf);
      }
    });
  }
  return c;
}

namespace {
constexpr double kLayerNormEps = 1e-5;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) shape_fail("layer_norm", x, gain);
  std::vector<double> out(m * n);
  std::vector<double> inv_sigma(m), mean(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.values().data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    mean[i] = mu;
    inv_sigma[i] = is;
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = (row[j] - mu) * is * gain.values()[j] + bias.values()[j];
  }
  Tensor c = make_result(x.shape(), std::move(out),
                         recording(x) || recording(gain) || recording(bias));
  if (c.requires_grad()) {
    auto xd = x.data_ptr(), gd = gain.data_ptr(), bd = bias.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([xd, gd, bd, cd, m, n, mean, inv_sigma] {
      if (!has_out_grad(cd)) return;
      for (std::size_t i = 0; i < m; ++i) {
        const double* row = xd->values.data() + i * n;
        const double* dy = cd->grad.data() + i * n;
        const double is = inv_sigma[i];
        const double mu = mean[i];
        if (gd->requires_grad) {
          auto gg = ensure_grad(gd);
          for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * (row[j] - mu) * is;
        }
        if (bd->requires_grad) {
          auto bg = ensure_grad(bd);
          for (std::size_t j = 0; j < n; ++j) bg[j] += dy[j];
        }
        if (xd->requires_grad) {
          auto xg = ensure_grad(xd);
          // d/dx of gain*(x-mu)/sigma: project out mean and variance directions.
          double sum_t = 0.0, sum_tz = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double t = dy[j] * gd->values[j];
            const double z = (row[j] - mu) * is;
            sum_t += t;
            sum_tz += t * z;
          }
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double t = dy[j] * gd->values[j];
            const double z = (row[j] - mu) * is;
            xg[i * n + j] += is * (t - inv_n * sum_t - z * inv_n * sum_tz);
          }
        }
      }
    });
  }
  return c;
}

Tensor embedding_gather(const Tensor& table, const std::vector<int>& ids) {
  if (!table.is_matrix()) throw ShapeError("embedding_gather: table must be rank-2");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ContractError("embedding_gather: id " + std::to_string(ids[i]) +
                          " outside table of " + std::to_string(v) + " rows");
    const double* row = table.values().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(row, row + d, out.data() + i * d);
  }
  Tensor c = make_result({ids.size(), d}, std::move(out), recording(table));
  if (c.requires_grad()) {
    auto td = table.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([td, cd, ids, d] {
      if (!has_out_grad(cd) || !td->requires_grad) return;
      auto g = ensure_grad(td);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* grow = g.data() + static_cast<std::size_t>(ids[i]) * d;
        const double* dy = cd->grad.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) grow[j] += dy[j];
      }
    });
  }
  return c;
}

Tensor cross_entropy(const Tensor& probs, const Tensor& target) {
  if (probs.numel() != target.numel()) shape_fail("cross_entropy", probs, target);
  double loss = 0.0;
  for (std::size_t i = 0; i < probs.numel(); ++i)
    loss -= target.values()[i] * std::log(probs.values()[i] + kCrossEntropyEps);
  Tensor c = make_result({1}, {loss}, recording(probs));
  if (c.requires_grad()) {
    auto pd = probs.data_ptr(), td = target.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([pd, td, cd] {
      if (!has_out_grad(cd) || !pd->requires_grad) return;
      auto g = ensure_grad(pd);
      const double dy = cd->grad[0];
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] -= dy * td->values[i] / (pd->values[i] + kCrossEntropyEps);
    });
  }
  return c;
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  Tensor c = make_result({1}, {total}, recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[0];
    });
  }
  return c;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: need at least one part");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.cols() != n) shape_fail("concat_rows", parts[0], p);
    m += p.rows();
    rec = rec || recording(p);
  }
  std::vector<double> out;
  out.reserve(m * n);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  Tensor c = make_result({m, n}, std::move(out), rec);
  if (c.requires_grad()) {
    std::vector<Data> pds;
    pds.reserve(parts.size());
    for (const Tensor& p : parts) pds.push_back(p.data_ptr());
    auto cd = c.data_ptr();
    Graph::active()->record([pds, cd] {
      if (!has_out_grad(cd)) return;
      std::size_t offset = 0;
      for (const Data& pd : pds) {
        if (pd->requires_grad) {
          auto g = ensure_grad(pd);
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += cd->grad[offset + i];
        }
        offset += pd->values.size();
      }
    });
  }
  return c;
}

Tensor slice_cols(const Tensor& a, std::size_t col_begin, std::size_t col_end) {
  const std::size_t m = a.rows(), n = a.cols();
  if (col_begin >= col_end || col_end > n)
    throw ShapeError("slice_cols: range [" + std::to_string(col_begin) + "," +
                     std::to_string(col_end) + ") outside " + std::to_string(n) + " columns");
  const std::size_t w = col_end - col_begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    std::copy(a.values().data() + i * n + col_begin, a.values().data() + i * n + col_end,
              out.data() + i * w);
  Tensor c = make_result({m, w}, std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd, m, n, w, col_begin] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * n + col_begin + j] += cd->grad[i * w + j];
    });
  }
  return c;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: need at least one part");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.rows() != m) shape_fail("concat_cols", parts[0], p);
    n += p.cols();
    rec = rec || recording(p);
  }
  std::vector<double> out(m * n);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy(p.values().data() + i * w, p.values().data() + (i + 1) * w,
                out.data() + i * n + offset);
    offset += w;
  }
  Tensor c = make_result({m, n}, std::move(out), rec);
  if (c.requires_grad()) {
    std::vector<Data> pds;
    for (const Tensor& p : parts) pds.push_back(p.data_ptr());
    auto cd = c.data_ptr();
    Graph::active()->record([pds, cd, m, n] {
      if (!has_out_grad(cd)) return;
      std::size_t off = 0;
      for (const Data& pd : pds) {
        const std::size_t w = pd->shape.size() == 2 ? pd->shape[1] : pd->values.size();
        if (pd->requires_grad) {
          auto g = ensure_grad(pd);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += cd->grad[i * n + off + j];
        }
        off += w;
      }
    });
  }
  return c;
}

Tensor pick_row(const Tensor& a, std::size_t r) {
  const std::size_t m = a.rows(), n = a.cols();
  if (r >= m) throw ShapeError("pick_row: row " + std::to_string(r) + " outside " + std::to_string(m));
  std::vector<double> out(a.values().begin() + r * n, a.values().begin() + (r + 1) * n);
  Tensor c = make_result({1, n}, std::move(out), recording(a));
  if (c.requires_grad()) {
    auto ad = a.data_ptr(), cd = c.data_ptr();
    Graph::active()->record([ad, cd, r, n] {
      if (!has_out_grad(cd) || !ad->requires_grad) return;
      auto g = ensure_grad(ad);
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += cd->grad[j];
    });
  }
  return c;
}

}  // namespace ops
}  // namespace xaqa
