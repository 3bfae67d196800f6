#include "treetf/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace treetf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

using detail::grad_of;
using detail::record;
using detail::TensorImpl;

int normalize_axis(int axis, int rank, const Shape& s) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("axis out of range for shape " + shape_str(s));
  }
  return axis;
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Element offsets of two broadcast operands for every output element.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> a_off;
  std::vector<std::int64_t> b_off;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  Shape ap(r, 1), bp(r, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    p.out[i] = std::max(ap[i], bp[i]);
  }
  auto sa = contiguous_strides(ap), sb = contiguous_strides(bp);
  for (std::size_t i = 0; i < r; ++i) {
    if (ap[i] == 1) sa[i] = 0;
    if (bp[i] == 1) sb[i] = 0;
  }
  const auto n = numel_of(p.out);
  p.a_off.resize(static_cast<std::size_t>(n));
  p.b_off.resize(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t e = 0; e < n; ++e) {
    p.a_off[e] = oa;
    p.b_off[e] = ob;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++idx[d] < p.out[d]) {
        oa += sa[d];
        ob += sb[d];
        break;
      }
      oa -= sa[d] * (p.out[d] - 1);
      ob -= sb[d] * (p.out[d] - 1);
      idx[d] = 0;
    }
  }
  return p;
}

template <class Fwd, class Da, class Db>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Fwd f, Da da, Db db) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
  const auto n = static_cast<std::size_t>(numel_of(plan->out));
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  if (plan->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[plan->a_off[i]], pb[plan->b_off[i]]);
  }
  Tensor y = make_tensor(plan->out, std::move(out));
  auto ia = a.impl_ptr(), ib = b.impl_ptr();
  record(y, {a, b}, name, [ia, ib, plan, da, db](const TensorImpl& o) {
    double* ga = grad_of(ia);
    double* gb = grad_of(ib);
    const double* g = o.grad.data();
    const double* xa = ia->data.data();
    const double* xb = ib->data.data();
    const std::size_t m = o.grad.size();
    for (std::size_t i = 0; i < m; ++i) {
      const auto ja = plan->same ? i : static_cast<std::size_t>(plan->a_off[i]);
      const auto jb = plan->same ? i : static_cast<std::size_t>(plan->b_off[i]);
      if (ga) ga[ja] += g[i] * da(xa[ja], xb[jb]);
      if (gb) gb[jb] += g[i] * db(xa[ja], xb[jb]);
    }
  });
  return y;
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* name, Fwd f, Deriv d) {
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(px[i]);
  Tensor y = make_tensor(x.shape(), std::move(out));
  auto ix = x.impl_ptr();
  const TensorImpl* iy = y.impl();
  record(y, {x}, name, [ix, iy, d](const TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * d(ix->data[i], iy->data[i]);
  });
  return y;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa.back() != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const auto m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  auto ia = a.impl_ptr(), ib = b.impl_ptr();

  if (sb.size() == 2) {
    const auto rows = numel_of(sa) / k;
    Shape out_shape(sa.begin(), sa.end() - 1);
    out_shape.push_back(n);
    std::vector<double> out(static_cast<std::size_t>(rows * n));
    Map(out.data(), rows, n).noalias() = MapC(a.data().data(), rows, k) * MapC(b.data().data(), k, n);
    Tensor y = make_tensor(std::move(out_shape), std::move(out));
    record(y, {a, b}, "matmul", [ia, ib, rows, k, n](const TensorImpl& o) {
      MapC g(o.grad.data(), rows, n);
      if (double* ga = grad_of(ia)) Map(ga, rows, k).noalias() += g * MapC(ib->data.data(), k, n).transpose();
      if (double* gb = grad_of(ib)) Map(gb, k, n).noalias() += MapC(ia->data.data(), rows, k).transpose() * g;
    });
    return y;
  }

  // Broadcast over leading batch dims, one matrix at a time.
  Shape ba(sa.begin(), sa.end() - 2), bb(sb.begin(), sb.end() - 2);
  if (ba.empty()) ba = {1};
  if (bb.empty()) bb = {1};
  Broadcast plan;
  try {
    plan = plan_broadcast(ba, bb, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible batch dims " + shape_str(sa) + " and " + shape_str(sb));
  }
  const auto batches = numel_of(plan.out);
  std::vector<std::int64_t> aoff(static_cast<std::size_t>(batches)), boff(static_cast<std::size_t>(batches));
  for (std::int64_t i = 0; i < batches; ++i) {
    aoff[i] = plan.same ? i : plan.a_off[i];
    boff[i] = plan.same ? i : plan.b_off[i];
  }
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(static_cast<std::size_t>(batches * m * n));
  for (std::int64_t i = 0; i < batches; ++i) {
    Map(out.data() + i * m * n, m, n).noalias() =
        MapC(a.data().data() + aoff[i] * m * k, m, k) * MapC(b.data().data() + boff[i] * k * n, k, n);
  }
  Tensor y = make_tensor(std::move(out_shape), std::move(out));
  record(y, {a, b}, "matmul", [ia, ib, aoff, boff, m, k, n](const TensorImpl& o) {
    double* ga = grad_of(ia);
    double* gb = grad_of(ib);
    for (std::size_t i = 0; i < aoff.size(); ++i) {
      MapC g(o.grad.data() + i * m * n, m, n);
      if (ga) Map(ga + aoff[i] * m * k, m, k).noalias() += g * MapC(ib->data.data() + boff[i] * k * n, k, n).transpose();
      if (gb) Map(gb + boff[i] * k * n, k, n).noalias() += MapC(ia->data.data() + aoff[i] * m * k, m, k).transpose() * g;
    }
  });
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& x, double s) {
  return unary(
      x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) throw DomainError("log of negative value " + std::to_string(v));
  }
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      x, "gelu", [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor softmax(const Tensor& x, int axis) {
  const auto& s = x.shape();
  axis = normalize_axis(axis, x.rank(), s);
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const auto len = s[axis];
  std::vector<double> out(x.numel(), 0.0);
  const double* px = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = kMaskSentinel;
      for (std::int64_t j = 0; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      if (mx == kMaskSentinel) continue;  // fully masked slice stays zero
      double z = 0.0;
      for (std::int64_t j = 0; j < len; ++j) {
        const double v = px[base + j * inner];
        const double e = v == kMaskSentinel ? 0.0 : std::exp(v - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::int64_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  Tensor y = make_tensor(s, std::move(out));
  auto ix = x.impl_ptr();
  const TensorImpl* iy = y.impl();
  record(y, {x}, "softmax", [ix, iy, outer, inner, len](const TensorImpl& o) {
    double* gx = grad_of(ix);
    if (!gx) return;
    const double* g = o.grad.data();
    const double* p = iy->data.data();
    for (std::int64_t a = 0; a < outer; ++a) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = a * len * inner + in;
        double dot = 0.0;
        for (std::int64_t j = 0; j < len; ++j) dot += g[base + j * inner] * p[base + j * inner];
        for (std::int64_t j = 0; j < len; ++j) {
          const auto e = base + j * inner;
          gx[e] += p[e] * (g[e] - dot);
        }
      }
    }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto h = x.shape().back();
  if (gamma.numel() != static_cast<std::size_t>(h) || beta.numel() != static_cast<std::size_t>(h)) {
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match last dim of " + shape_str(x.shape()));
  }
  const auto rows = static_cast<std::int64_t>(x.numel()) / h;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
  std::vector<double> out(x.numel());
  const double* px = x.data().data();
  const double* pg = gamma.data().data();
  const double* pb = beta.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * h;
    double mu = 0.0;
    for (std::int64_t j = 0; j < h; ++j) mu += row[j];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::int64_t j = 0; j < h; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::int64_t j = 0; j < h; ++j) {
      const double xh = (row[j] - mu) * rs;
      (*xhat)[r * h + j] = xh;
      out[r * h + j] = pg[j] * xh + pb[j];
    }
  }
  Tensor y = make_tensor(x.shape(), std::move(out));
  auto ix = x.impl_ptr(), ig = gamma.impl_ptr(), ib = beta.impl_ptr();
  record(y, {x, gamma, beta}, "layer_norm", [ix, ig, ib, xhat, rstd, rows, h](const TensorImpl& o) {
    double* gx = grad_of(ix);
    double* gg = grad_of(ig);
    double* gb = grad_of(ib);
    const double* g = o.grad.data();
    const double* gam = ig->data.data();
    std::vector<double> gxh(static_cast<std::size_t>(h));
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xhat->data() + r * h;
      const double* gr = g + r * h;
      double m1 = 0.0, m2 = 0.0;
      for (std::int64_t j = 0; j < h; ++j) {
        if (gg) gg[j] += gr[j] * xr[j];
        if (gb) gb[j] += gr[j];
        gxh[j] = gr[j] * gam[j];
        m1 += gxh[j];
        m2 += gxh[j] * xr[j];
      }
      if (!gx) continue;
      m1 /= static_cast<double>(h);
      m2 /= static_cast<double>(h);
      const double rs = (*rstd)[r];
      for (std::int64_t j = 0; j < h; ++j) gx[r * h + j] += rs * (gxh[j] - m1 - xr[j] * m2);
    }
  });
  return y;
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  if (numel_of(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw DimensionError("embedding: ids shape " + shape_str(ids_shape) + " does not match " +
                         std::to_string(ids.size()) + " ids");
  }
  const auto v = table.dim(0), h = table.dim(1);
  std::vector<double> out(ids.size() * static_cast<std::size_t>(h));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                              std::to_string(v));
    }
    std::copy_n(table.data().data() + ids[i] * h, h, out.data() + i * h);
  }
  Shape s = ids_shape;
  s.push_back(h);
  Tensor y = make_tensor(std::move(s), std::move(out));
  auto it = table.impl_ptr();
  auto idv = std::make_shared<std::vector<std::int64_t>>(ids.begin(), ids.end());
  record(y, {table}, "embedding", [it, idv, h](const TensorImpl& o) {
    double* gt = grad_of(it);
    if (!gt) return;
    for (std::size_t i = 0; i < idv->size(); ++i) {
      double* row = gt + (*idv)[i] * h;
      const double* g = o.grad.data() + i * h;
      for (std::int64_t j = 0; j < h; ++j) row[j] += g[j];
    }
  });
  return y;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
  if (logits.rank() != 2 || static_cast<std::size_t>(logits.dim(0)) != targets.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const auto n = logits.dim(0), c = logits.dim(1);
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const double* px = logits.data().data();
  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = px + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - mx) / z;
    const auto t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || t >= c) throw std::out_of_range("cross_entropy target " + std::to_string(t) + " out of range");
    total += std::log(z) + mx - row[t];
    ++count;
  }
  Tensor y = make_tensor({1}, {count ? total / static_cast<double>(count) : 0.0});
  auto il = logits.impl_ptr();
  auto tv = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
  record(y, {logits}, "cross_entropy", [il, tv, probs, n, c, count, ignore_index](const TensorImpl& o) {
    double* gl = grad_of(il);
    if (!gl || count == 0) return;
    const double g = o.grad[0] / static_cast<double>(count);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto t = (*tv)[i];
      if (t == ignore_index) continue;
      for (std::int64_t j = 0; j < c; ++j) gl[i * c + j] += g * ((*probs)[i * c + j] - (j == t ? 1.0 : 0.0));
    }
  });
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != static_cast<std::int64_t>(x.numel())) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor y = make_tensor(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  auto ix = x.impl_ptr();
  record(y, {x}, "reshape", [ix](const TensorImpl& o) {
    if (double* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
  });
  return y;
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  const auto& s = x.shape();
  const int r = x.rank();
  axis0 = normalize_axis(axis0, r, s);
  axis1 = normalize_axis(axis1, r, s);
  Shape os = s;
  std::swap(os[axis0], os[axis1]);
  const auto in_st = contiguous_strides(s);
  auto perm_st = in_st;
  std::swap(perm_st[axis0], perm_st[axis1]);
  // src[e] = input offset of output element e
  auto src = std::make_shared<std::vector<std::int64_t>>(x.numel());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t off = 0;
  for (std::size_t e = 0; e < x.numel(); ++e) {
    (*src)[e] = off;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < os[d]) {
        off += perm_st[d];
        break;
      }
      off -= perm_st[d] * (os[d] - 1);
      idx[d] = 0;
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t e = 0; e < out.size(); ++e) out[e] = x.data()[(*src)[e]];
  Tensor y = make_tensor(std::move(os), std::move(out));
  auto ix = x.impl_ptr();
  record(y, {x}, "transpose", [ix, src](const TensorImpl& o) {
    if (double* gx = grad_of(ix)) {
      for (std::size_t e = 0; e < o.grad.size(); ++e) gx[(*src)[e]] += o.grad[e];
    }
  });
  return y;
}

Tensor select(const Tensor& x, int axis, std::int64_t index) {
  const auto& s = x.shape();
  axis = normalize_axis(axis, x.rank(), s);
  if (index < 0 || index >= s[axis]) {
    throw DimensionError("select: index " + std::to_string(index) + " out of range for " + shape_str(s));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const auto len = s[axis];
  Shape os;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != axis) os.push_back(s[i]);
  }
  if (os.empty()) os = {1};
  std::vector<double> out(static_cast<std::size_t>(outer * inner));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + (o * len + index) * inner, inner, out.data() + o * inner);
  }
  Tensor y = make_tensor(std::move(os), std::move(out));
  auto ix = x.impl_ptr();
  record(y, {x}, "select", [ix, outer, inner, len, index](const TensorImpl& o) {
    if (double* gx = grad_of(ix)) {
      for (std::int64_t a = 0; a < outer; ++a) {
        for (std::int64_t j = 0; j < inner; ++j) gx[(a * len + index) * inner + j] += o.grad[a * inner + j];
      }
    }
  });
  return y;
}

Tensor sum(const Tensor& x) {
  double t = 0.0;
  for (double v : x.data()) t += v;
  Tensor y = make_tensor({1}, {t});
  auto ix = x.impl_ptr();
  record(y, {x}, "sum", [ix](const TensorImpl& o) {
    if (double* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += o.grad[0];
    }
  });
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout rate must be < 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - rate);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = u(rng) < rate ? 0.0 : keep;
  return mul(x, make_tensor(x.shape(), std::move(m)));
}

}  // namespace treetf
