#include "fedsp/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace fedsp::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Eigen's blocked GEMM has a fixed setup cost that dominates for the tiny
// per-head products in attention.
constexpr std::size_t kLazyProductFlops = 32 * 32 * 32;

template <typename Dst, typename L, typename R>
void gemm_assign(Dst&& dst, const L& lhs, const R& rhs) {
  if (static_cast<std::size_t>(lhs.rows() * lhs.cols() * rhs.cols()) <= kLazyProductFlops) {
    dst.noalias() = lhs.lazyProduct(rhs);
  } else {
    dst.noalias() = lhs * rhs;
  }
}

template <typename Dst, typename L, typename R>
void gemm_accumulate(Dst&& dst, const L& lhs, const R& rhs) {
  if (static_cast<std::size_t>(lhs.rows() * lhs.cols() * rhs.cols()) <= kLazyProductFlops) {
    dst.noalias() += lhs.lazyProduct(rhs);
  } else {
    dst.noalias() += lhs * rhs;
  }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

bool is_suffix(const Shape& full, const Shape& tail) {
  if (tail.size() > full.size()) return false;
  return std::equal(tail.rbegin(), tail.rend(), full.rbegin());
}

Shape leading_dims(const Shape& s, std::size_t keep_last) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(keep_last));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
}

void require_broadcastable(const char* op, const Tensor& a, const Tensor& b) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw ShapeError(op, "right operand " + shape_str(b.shape()) + " does not broadcast onto " + shape_str(a.shape()));
  }
}

// Accumulates `g` into `t`'s gradient, summing over leading repeats when `t` is
// a broadcast operand.
void accumulate_broadcast(const Tensor& t, std::span<const double> g) {
  auto dst = t.ensure_grad();
  const std::size_t inner = dst.size();
  if (inner == 0) return;
  for (std::size_t off = 0; off < g.size(); off += inner) {
    for (std::size_t i = 0; i < inner; ++i) dst[i] += g[off + i];
  }
}

template <typename ValueFn, typename DerivFn>
Tensor unary(const char* op, const Tensor& x, ValueFn value, DerivFn deriv) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = value(in[i]);
  auto y = Tensor::from(x.shape(), std::move(out));
  if (should_record({&x})) {
    Tape::active().record(op, {x}, y, [x, y, deriv] {
      auto g = y.grad();
      auto xd = x.data();
      auto yd = y.data();
      auto dx = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(xd[i], yd[i]);
    });
  }
  return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul", "operands need rank >= 2, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t r = a.rank();
  const std::size_t m = a.dim(r - 2);
  const std::size_t k = a.dim(r - 1);
  const bool shared = b.rank() == 2;
  if (!shared) {
    if (b.rank() != r || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw ShapeError("matmul", "batch dims of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
  }
  const std::size_t br = b.rank();
  if (b.dim(br - 2) != k) {
    throw ShapeError("matmul", "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t n = b.dim(br - 1);
  const std::size_t batch = (m * k == 0) ? 0 : a.numel() / (m * k);

  Shape out_shape = leading_dims(a.shape(), 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto c = Tensor::zeros(out_shape);
  {
    auto cd = c.mutable_data();
    if (shared) {
      ConstMap A(a.data().data(), batch * m, k);
      ConstMap B(b.data().data(), k, n);
      MutMap C(cd.data(), batch * m, n);
      C.noalias() = A * B;
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMap A(a.data().data() + i * m * k, m, k);
        ConstMap B(b.data().data() + i * k * n, k, n);
        gemm_assign(MutMap(cd.data() + i * m * n, m, n), A, B);
      }
    }
  }
  if (should_record({&a, &b})) {
    Tape::active().record("matmul", {a, b}, c, [a, b, c, shared, batch, m, k, n] {
      const double* g = c.grad().data();
      if (shared) {
        ConstMap G(g, batch * m, n);
        if (a.requires_grad()) {
          MutMap dA(a.ensure_grad().data(), batch * m, k);
          dA.noalias() += G * ConstMap(b.data().data(), k, n).transpose();
        }
        if (b.requires_grad()) {
          MutMap dB(b.ensure_grad().data(), k, n);
          dB.noalias() += ConstMap(a.data().data(), batch * m, k).transpose() * G;
        }
        return;
      }
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMap G(g + i * m * n, m, n);
        if (a.requires_grad()) {
          gemm_accumulate(MutMap(a.ensure_grad().data() + i * m * k, m, k), G,
                          ConstMap(b.data().data() + i * k * n, k, n).transpose());
        }
        if (b.requires_grad()) {
          gemm_accumulate(MutMap(b.ensure_grad().data() + i * k * n, k, n),
                          ConstMap(a.data().data() + i * m * k, m, k).transpose(), G);
        }
      }
    });
  }
  return c;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_broadcastable("add", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  const std::size_t inner = bd.size();
  for (std::size_t off = 0; off < ad.size(); off += inner)
    for (std::size_t j = 0; j < inner; ++j) out[off + j] = ad[off + j] + bd[j];
  auto c = Tensor::from(a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    Tape::active().record("add", {a, b}, c, [a, b, c] {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) accumulate_broadcast(b, g);
    });
  }
  return c;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_broadcastable("sub", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  const std::size_t inner = bd.size();
  for (std::size_t off = 0; off < ad.size(); off += inner)
    for (std::size_t j = 0; j < inner; ++j) out[off + j] = ad[off + j] - bd[j];
  auto c = Tensor::from(a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    Tape::active().record("sub", {a, b}, c, [a, b, c] {
      auto g = c.grad();
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        auto db = b.ensure_grad();
        const std::size_t inner = db.size();
        for (std::size_t off = 0; off < g.size(); off += inner)
          for (std::size_t j = 0; j < inner; ++j) db[j] -= g[off + j];
      }
    });
  }
  return c;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_broadcastable("mul", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  const std::size_t inner = bd.size();
  for (std::size_t off = 0; off < ad.size(); off += inner)
    for (std::size_t j = 0; j < inner; ++j) out[off + j] = ad[off + j] * bd[j];
  auto c = Tensor::from(a.shape(), std::move(out));
  if (should_record({&a, &b})) {
    Tape::active().record("mul", {a, b}, c, [a, b, c] {
      auto g = c.grad();
      auto ad = a.data();
      auto bd = b.data();
      const std::size_t inner = bd.size();
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t off = 0; off < g.size(); off += inner)
          for (std::size_t j = 0; j < inner; ++j) da[off + j] += g[off + j] * bd[j];
      }
      if (b.requires_grad()) {
        auto db = b.ensure_grad();
        for (std::size_t off = 0; off < g.size(); off += inner)
          for (std::size_t j = 0; j < inner; ++j) db[j] += g[off + j] * ad[off + j];
      }
    });
  }
  return c;
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  constexpr double kC = kGeluC;
  constexpr double kA = kGeluA;
  const auto n = static_cast<Eigen::Index>(x.numel());
  Eigen::Map<const Eigen::ArrayXd> in(x.data().data(), n);
  // tanh(u) = 1 - 2 / (1 + exp(2u)), which vectorises through Eigen's exp.
  // The exp destination is Eigen-owned so the packet/scalar split depends on
  // the index alone, never on the caller's heap alignment.
  Eigen::ArrayXd u = kC * (in + kA * in.cube());
  Eigen::ArrayXd e = (2.0 * u).exp();
  std::vector<double> th(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXd> t(th.data(), n);
  t = 1.0 - 2.0 / (1.0 + e);
  std::vector<double> out(static_cast<std::size_t>(n));
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = 0.5 * in * (1.0 + t);
  auto y = Tensor::from(x.shape(), std::move(out));
  if (should_record({&x})) {
    Tape::active().record("gelu", {x}, y, [x, y, n, th = std::move(th)] {
      Eigen::Map<const Eigen::ArrayXd> g(y.grad().data(), n);
      Eigen::Map<const Eigen::ArrayXd> xv(x.data().data(), n);
      Eigen::Map<const Eigen::ArrayXd> t(th.data(), n);
      Eigen::Map<Eigen::ArrayXd> dx(x.ensure_grad().data(), n);
      dx += g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * xv.square()));
    });
  }
  return y;
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax", "needs rank >= 1");
  const std::size_t d = x.shape().back();
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double* o = out.data() + r * d;
    const double mx = *std::max_element(row, row + d);
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw std::domain_error("softmax: row " + std::to_string(r) + " is fully masked");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) z += (o[j] = std::exp(row[j] - mx));
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < d; ++j) o[j] *= inv;
  }
  auto y = Tensor::from(x.shape(), std::move(out));
  if (should_record({&x})) {
    Tape::active().record("softmax", {x}, y, [x, y, rows, d] {
      auto g = y.grad();
      auto yd = y.data();
      auto dx = x.ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t off = r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += g[off + j] * yd[off + j];
        for (std::size_t j = 0; j < d; ++j) dx[off + j] += yd[off + j] * (g[off + j] - dot);
      }
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm", "needs rank >= 1");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm", "gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                                       " do not match last dim of " + shape_str(x.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.numel() / d;
  auto in = x.data();
  auto gd = gain.data();
  auto bd = bias.data();
  std::vector<double> out(in.size());
  std::vector<double> xhat(in.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gd[j] + bd[j];
    }
  }
  auto y = Tensor::from(x.shape(), std::move(out));
  if (should_record({&x, &gain, &bias})) {
    Tape::active().record("layer_norm", 
        {x, gain, bias}, y,
        [x, gain, bias, y, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
          auto g = y.grad();
          auto gd = gain.data();
          if (gain.requires_grad()) {
            auto dg = gain.ensure_grad();
            for (std::size_t off = 0; off < g.size(); off += d)
              for (std::size_t j = 0; j < d; ++j) dg[j] += g[off + j] * xhat[off + j];
          }
          if (bias.requires_grad()) accumulate_broadcast(bias, g);
          if (!x.requires_grad()) return;
          auto dx = x.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t off = r * d;
            double s1 = 0.0;
            double s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[off + j] * gd[j];
              s1 += dh;
              s2 += dh * xhat[off + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[off + j] * gd[j];
              dx[off + j] += inv_std[r] * (dh - inv_d * s1 - xhat[off + j] * inv_d * s2);
            }
          }
        });
  }
  return y;
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw ShapeError("embedding", "table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(ids_shape) != ids.size()) {
    throw ShapeError("embedding", "ids shape " + shape_str(ids_shape) + " does not hold " + std::to_string(ids.size()) + " ids");
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding: token id " + std::to_string(id) + " outside vocab of " + std::to_string(vocab));
    }
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto y = Tensor::from(std::move(out_shape), std::move(out));
  if (should_record({&table})) {
    Tape::active().record("embedding", {table}, y, [table, y, d, ids = std::vector<std::int32_t>(ids.begin(), ids.end())] {
      auto g = y.grad();
      auto dt = table.ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double* row = dt.data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
      }
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat", "no operands");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat", "axis " + std::to_string(axis) + " out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat", "operand " + shape_str(s) + " incompatible with " + shape_str(first) + " on axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;

  std::vector<double> out(numel_of(out_shape));
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    auto pd = p.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(pd.data() + o * chunk, chunk, out.data() + o * out_row + col);
    col += chunk;
  }
  auto y = Tensor::from(std::move(out_shape), std::move(out));
  bool record = false;
  if (grad_enabled()) {
    record = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  }
  if (record) {
    Tape::active().record("concat", parts, y, [parts, y, axis, outer, inner, out_row] {
      auto g = y.grad();
      std::size_t col = 0;
      for (const auto& p : parts) {
        const std::size_t chunk = p.dim(axis) * inner;
        if (p.requires_grad()) {
          auto dp = p.ensure_grad();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < chunk; ++j) dp[o * chunk + j] += g[o * out_row + col + j];
        }
        col += chunk;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= a.rank()) throw ShapeError("slice", "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  if (start + length > a.dim(axis)) {
    throw ShapeError("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                  ") exceeds dim " + std::to_string(a.dim(axis)) + " of " + shape_str(a.shape()));
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t src_row = a.dim(axis) * inner;
  const std::size_t dst_row = length * inner;
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::vector<double> out(outer * dst_row);
  auto ad = a.data();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(ad.data() + o * src_row + start * inner, dst_row, out.data() + o * dst_row);
  auto y = Tensor::from(std::move(out_shape), std::move(out));
  if (should_record({&a})) {
    Tape::active().record("slice", {a}, y, [a, y, outer, inner, src_row, dst_row, start] {
      auto g = y.grad();
      auto da = a.ensure_grad();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < dst_row; ++j) da[o * src_row + start * inner + j] += g[o * dst_row + j];
    });
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose", "needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto ad = a.data();
  auto y = Tensor::from(std::move(shape), std::vector<double>(ad.begin(), ad.end()));
  if (should_record({&a})) {
    Tape::active().record("reshape", {a}, y, [a, y] {
      auto g = y.grad();
      auto da = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    });
  }
  return y;
}

namespace {

// Source offset for each destination element of a permutation.
std::vector<std::size_t> permutation_index(const Shape& src, const std::vector<std::size_t>& perm) {
  const std::size_t r = src.size();
  std::vector<std::size_t> src_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) src_stride[i - 1] = src_stride[i] * src[i];
  Shape dst(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    dst[i] = src[perm[i]];
    stride[i] = src_stride[perm[i]];
  }
  const std::size_t n = numel_of(src);
  std::vector<std::size_t> index(n);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    index[flat] = offset;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      offset += stride[i];
      if (counter[i] < dst[i]) break;
      offset -= stride[i] * dst[i];
      counter[i] = 0;
    }
  }
  return index;
}

}  // namespace

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  std::vector<bool> used(r, false);
  bool ok = perm.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = perm[i] < r && !used[perm[i]];
    if (ok) used[perm[i]] = true;
  }
  if (!ok) throw ShapeError("permute", "invalid permutation for " + shape_str(a.shape()));
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  auto index = permutation_index(a.shape(), perm);
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[index[i]];
  auto y = Tensor::from(std::move(out_shape), std::move(out));
  if (should_record({&a})) {
    Tape::active().record("permute", {a}, y, [a, y, index = std::move(index)] {
      auto g = y.grad();
      auto da = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) da[index[i]] += g[i];
    });
  }
  return y;
}

Tensor expand(const Tensor& a, const Shape& leading) {
  Shape out_shape = leading;
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  const std::size_t reps = numel_of(leading);
  auto ad = a.data();
  std::vector<double> out;
  out.reserve(reps * ad.size());
  for (std::size_t i = 0; i < reps; ++i) out.insert(out.end(), ad.begin(), ad.end());
  auto y = Tensor::from(std::move(out_shape), std::move(out));
  if (should_record({&a})) {
    Tape::active().record("expand", {a}, y, [a, y] { accumulate_broadcast(a, y.grad()); });
  }
  return y;
}

Tensor causal_mask(const Tensor& scores, std::size_t prefix_len) {
  if (scores.rank() < 2) throw ShapeError("causal_mask", "needs rank >= 2, got " + shape_str(scores.shape()));
  const std::size_t t_len = scores.dim(scores.rank() - 2);
  const std::size_t s_len = scores.dim(scores.rank() - 1);
  if (s_len != prefix_len + t_len) {
    throw ShapeError("causal_mask", "key axis " + std::to_string(s_len) + " != prefix " + std::to_string(prefix_len) +
                                        " + queries " + std::to_string(t_len));
  }
  const double neg_inf = -std::numeric_limits<double>::infinity();
  auto in = scores.data();
  std::vector<double> out(in.begin(), in.end());
  const std::size_t block = t_len * s_len;
  const std::size_t blocks = block == 0 ? 0 : out.size() / block;
  for (std::size_t b = 0; b < blocks; ++b)
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = prefix_len + t + 1; j < s_len; ++j) out[b * block + t * s_len + j] = neg_inf;
  auto y = Tensor::from(scores.shape(), std::move(out));
  if (should_record({&scores})) {
    Tape::active().record("causal_mask", {scores}, y, [scores, y, blocks, t_len, s_len, prefix_len] {
      auto g = y.grad();
      auto dx = scores.ensure_grad();
      const std::size_t block = t_len * s_len;
      for (std::size_t b = 0; b < blocks; ++b)
        for (std::size_t t = 0; t < t_len; ++t)
          for (std::size_t j = 0; j <= prefix_len + t && j < s_len; ++j) {
            const std::size_t i = b * block + t * s_len + j;
            dx[i] += g[i];
          }
    });
  }
  return y;
}

Tensor sum(const Tensor& a) {
  auto ad = a.data();
  auto y = Tensor::scalar(std::accumulate(ad.begin(), ad.end(), 0.0));
  if (should_record({&a})) {
    Tape::active().record("sum", {a}, y, [a, y] {
      const double g = y.grad()[0];
      auto da = a.ensure_grad();
      for (auto& v : da) v += g;
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  if (a.numel() == 0) throw ShapeError("mse", "empty operands");
  auto ad = a.data();
  auto bd = b.data();
  const double inv_n = 1.0 / static_cast<double>(ad.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) acc += (ad[i] - bd[i]) * (ad[i] - bd[i]);
  auto y = Tensor::scalar(acc * inv_n);
  if (should_record({&a, &b})) {
    Tape::active().record("mse", {a, b}, y, [a, b, y, inv_n] {
      const double g = y.grad()[0];
      auto ad = a.data();
      auto bd = b.data();
      if (a.requires_grad()) {
        auto da = a.ensure_grad();
        for (std::size_t i = 0; i < ad.size(); ++i) da[i] += 2.0 * inv_n * g * (ad[i] - bd[i]);
      }
      if (b.requires_grad()) {
        auto db = b.ensure_grad();
        for (std::size_t i = 0; i < ad.size(); ++i) db[i] -= 2.0 * inv_n * g * (ad[i] - bd[i]);
      }
    });
  }
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index) {
  if (logits.rank() < 1) throw ShapeError("cross_entropy", "logits need rank >= 1");
  const std::size_t v = logits.shape().back();
  const std::size_t rows = v == 0 ? 0 : logits.numel() / v;
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(rows) +
                                          " rows of " + shape_str(logits.shape()));
  }
  auto ld = logits.data();
  std::vector<double> probs(ld.size(), 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int32_t t = targets[r];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside vocab of " + std::to_string(v));
    }
    const double* row = ld.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += (probs[r * v + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
    total += std::log(z) + mx - row[t];
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: every target is ignored");
  const double inv = 1.0 / static_cast<double>(count);
  auto y = Tensor::scalar(total * inv);
  if (should_record({&logits})) {
    Tape::active().record("cross_entropy", 
        {logits}, y,
        [logits, y, v, rows, inv, ignore_index, probs = std::move(probs),
         targets = std::vector<std::int32_t>(targets.begin(), targets.end())] {
          const double g = y.grad()[0] * inv;
          auto dl = logits.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            if (targets[r] == ignore_index) continue;
            for (std::size_t j = 0; j < v; ++j) dl[r * v + j] += g * probs[r * v + j];
            dl[r * v + static_cast<std::size_t>(targets[r])] -= g;
          }
        });
  }
  return y;
}

}  // namespace fedsp::ops
