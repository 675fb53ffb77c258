#include "bijrecon/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

namespace bijrecon::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int64_t i = static_cast<int64_t>(shape.size()) - 2; i >= 0; --i)
    s[static_cast<size_t>(i)] = s[static_cast<size_t>(i + 1)] * shape[static_cast<size_t>(i + 1)];
  return s;
}

// Strides of `shape` when broadcast against `out_shape` (right aligned);
// broadcast dims get stride 0.
std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape,
                                       const std::vector<int64_t>& out_shape) {
  std::vector<int64_t> st = strides_of(shape);
  std::vector<int64_t> r(out_shape.size(), 0);
  int64_t off = static_cast<int64_t>(out_shape.size()) - static_cast<int64_t>(shape.size());
  for (size_t i = 0; i < shape.size(); ++i) {
    r[static_cast<size_t>(off) + i] = (shape[i] == 1) ? 0 : st[i];
  }
  return r;
}

// Reduce x (graph op composition) down to `target` shape, inverting a
// broadcast. Used by every broadcasting vjp.
Var reduce_to(const Var& x, const std::vector<int64_t>& target) {
  if (x.shape() == target) return x;
  int64_t extra = x.value().ndim() - static_cast<int64_t>(target.size());
  std::vector<int64_t> axes;
  for (int64_t i = 0; i < extra; ++i) axes.push_back(i);
  for (size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 1 && x.shape()[static_cast<size_t>(extra) + i] != 1)
      axes.push_back(extra + static_cast<int64_t>(i));
  }
  Var s = axes.empty() ? x : sum(x, axes, /*keepdims=*/true);
  return reshape(s, target);
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_eval(const Tensor& a, const Tensor& b, BinOp op) {
  std::vector<int64_t> os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const int64_t n = out.numel();
  if (a.shape() == b.shape()) {
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    switch (op) {
      case BinOp::Add: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
      case BinOp::Sub: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
      case BinOp::Mul: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
      case BinOp::Div: for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
    }
    return out;
  }
  std::vector<int64_t> sa = broadcast_strides(a.shape(), os);
  std::vector<int64_t> sb = broadcast_strides(b.shape(), os);
  std::vector<int64_t> idx(os.size(), 0);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    double x = pa[oa], y = pb[ob];
    switch (op) {
      case BinOp::Add: po[i] = x + y; break;
      case BinOp::Sub: po[i] = x - y; break;
      case BinOp::Mul: po[i] = x * y; break;
      case BinOp::Div: po[i] = x / y; break;
    }
    // advance multi-index
    for (int64_t d = static_cast<int64_t>(os.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      oa += sa[ud];
      ob += sb[ud];
      if (idx[ud] < os[ud]) break;
      idx[ud] = 0;
      oa -= sa[ud] * os[ud];
      ob -= sb[ud] * os[ud];
    }
  }
  return out;
}

Tensor unary_eval(const Tensor& a, double (*f)(double)) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
  return out;
}

// Scatter `x` into a zeros tensor of shape `full` at offset `starts`
// (inverse of slice). Linear, so its vjp is slice.
Var unslice(const Var& x, std::vector<int64_t> starts, std::vector<int64_t> full);

std::vector<int64_t> keepdims_shape(const std::vector<int64_t>& shape,
                                    const std::vector<int64_t>& axes) {
  std::vector<int64_t> ks = shape;
  for (int64_t ax : axes) ks[static_cast<size_t>(ax)] = 1;
  return ks;
}

std::vector<int64_t> normalize_axes(std::vector<int64_t> axes, int64_t ndim) {
  if (axes.empty()) {
    for (int64_t i = 0; i < ndim; ++i) axes.push_back(i);
  }
  for (int64_t& a : axes)
    if (a < 0) a += ndim;
  std::sort(axes.begin(), axes.end());
  return axes;
}

}  // namespace

std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                     const std::vector<int64_t>& b) {
  size_t n = std::max(a.size(), b.size());
  std::vector<int64_t> out(n, 1);
  for (size_t i = 0; i < n; ++i) {
    int64_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    int64_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast_shape: incompatible shapes");
    out[i] = std::max(da, db);
  }
  return out;
}

// ---- arithmetic -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tensor v = binary_eval(a.value(), b.value(), BinOp::Add);
  auto ash = a.shape();
  auto bsh = b.shape();
  return Var::make(std::move(v), {a, b},
                   [ash, bsh](const Var& cot) -> std::vector<Var> {
                     return {reduce_to(cot, ash), reduce_to(cot, bsh)};
                   },
                   "add");
}

Var sub(const Var& a, const Var& b) {
  Tensor v = binary_eval(a.value(), b.value(), BinOp::Sub);
  auto ash = a.shape();
  auto bsh = b.shape();
  return Var::make(std::move(v), {a, b},
                   [ash, bsh](const Var& cot) -> std::vector<Var> {
                     return {reduce_to(cot, ash), reduce_to(neg(cot), bsh)};
                   },
                   "sub");
}

Var mul(const Var& a, const Var& b) {
  Tensor v = binary_eval(a.value(), b.value(), BinOp::Mul);
  auto ash = a.shape();
  auto bsh = b.shape();
  return Var::make(std::move(v), {a, b},
                   [ash, bsh, a, b](const Var& cot) -> std::vector<Var> {
                     return {reduce_to(mul(cot, b), ash), reduce_to(mul(cot, a), bsh)};
                   },
                   "mul");
}

Var div(const Var& a, const Var& b) {
  Tensor v = binary_eval(a.value(), b.value(), BinOp::Div);
  auto ash = a.shape();
  auto bsh = b.shape();
  return Var::make(std::move(v), {a, b},
                   [ash, bsh, a, b](const Var& cot) -> std::vector<Var> {
                     Var da = reduce_to(div(cot, b), ash);
                     Var db = reduce_to(neg(div(mul(cot, a), mul(b, b))), bsh);
                     return {da, db};
                   },
                   "div");
}

Var neg(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return -x; });
  return Var::make(std::move(v), {a},
                   [](const Var& cot) -> std::vector<Var> { return {neg(cot)}; }, "neg");
}

Var add_scalar(const Var& a, double s) { return add(a, Var::scalar(s)); }
Var mul_scalar(const Var& a, double s) { return mul(a, Var::scalar(s)); }

// ---- unary ------------------------------------------------------------------

Var exp_(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return std::exp(x); });
  return Var::make(std::move(v), {a},
                   [a](const Var& cot) -> std::vector<Var> { return {mul(cot, exp_(a))}; },
                   "exp");
}

Var log_(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return std::log(x); });
  return Var::make(std::move(v), {a},
                   [a](const Var& cot) -> std::vector<Var> { return {div(cot, a)}; }, "log");
}

Var tanh_(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return std::tanh(x); });
  return Var::make(std::move(v), {a},
                   [a](const Var& cot) -> std::vector<Var> {
                     Var t = tanh_(a);
                     return {mul(cot, sub(Var::scalar(1.0), mul(t, t)))};
                   },
                   "tanh");
}

Var sqrt_(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return std::sqrt(x); });
  return Var::make(std::move(v), {a},
                   [a](const Var& cot) -> std::vector<Var> {
                     return {mul(cot, mul_scalar(pow_scalar(a, -0.5), 0.5))};
                   },
                   "sqrt");
}

Var square(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return x * x; });
  return Var::make(std::move(v), {a},
                   [a](const Var& cot) -> std::vector<Var> {
                     return {mul(cot, mul_scalar(a, 2.0))};
                   },
                   "square");
}

Var abs_(const Var& a) {
  Tensor v = unary_eval(a.value(), [](double x) { return std::abs(x); });
  Tensor sgn = unary_eval(a.value(), [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
  return Var::make(std::move(v), {a},
                   [sgn](const Var& cot) -> std::vector<Var> {
                     return {mul(cot, Var::constant(sgn))};
                   },
                   "abs");
}

Var pow_scalar(const Var& a, double p) {
  Tensor v(a.shape());
  {
    const double* pa = a.value().data();
    double* po = v.data();
    for (int64_t i = 0; i < v.numel(); ++i) po[i] = std::pow(pa[i], p);
  }
  return Var::make(std::move(v), {a},
                   [a, p](const Var& cot) -> std::vector<Var> {
                     return {mul(cot, mul_scalar(pow_scalar(a, p - 1.0), p))};
                   },
                   "pow");
}

Var relu(const Var& a) { return leaky_relu(a, 0.0); }

Var leaky_relu(const Var& a, double slope) {
  Tensor v(a.shape());
  Tensor mask(a.shape());
  {
    const double* pa = a.value().data();
    double* po = v.data();
    double* pm = mask.data();
    for (int64_t i = 0; i < v.numel(); ++i) {
      bool pos = pa[i] > 0;
      pm[i] = pos ? 1.0 : slope;
      po[i] = pa[i] * pm[i];
    }
  }
  return Var::make(std::move(v), {a},
                   [mask](const Var& cot) -> std::vector<Var> {
                     return {mul(cot, Var::constant(mask))};
                   },
                   "leaky_relu");
}

// ---- reductions -------------------------------------------------------------

Var sum(const Var& a, std::vector<int64_t> axes, bool keepdims) {
  axes = normalize_axes(std::move(axes), a.value().ndim());
  const auto& ish = a.shape();
  std::vector<int64_t> ks = keepdims_shape(ish, axes);
  Tensor out(ks);
  // generic strided accumulate
  const auto ist = strides_of(ish);
  const auto ost = strides_of(ks);
  std::vector<int64_t> idx(ish.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  int64_t n = a.numel();
  int64_t oo = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[oo] += pa[i];
    for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (ks[ud] != 1) oo += ost[ud];
      if (idx[ud] < ish[ud]) break;
      idx[ud] = 0;
      if (ks[ud] != 1) oo -= ost[ud] * ish[ud];
    }
  }
  std::vector<int64_t> fs;  // final shape
  if (keepdims) {
    fs = ks;
  } else {
    for (size_t i = 0; i < ish.size(); ++i)
      if (std::find(axes.begin(), axes.end(), static_cast<int64_t>(i)) == axes.end())
        fs.push_back(ish[i]);
    if (fs.empty()) fs.push_back(1);
  }
  Tensor outf = out.reshape(fs);
  return Var::make(std::move(outf), {a},
                   [ish, ks](const Var& cot) -> std::vector<Var> {
                     return {broadcast_to(reshape(cot, ks), ish)};
                   },
                   "sum");
}

Var sum_all(const Var& a) { return sum(a, {}, false); }

Var mean(const Var& a, std::vector<int64_t> axes, bool keepdims) {
  axes = normalize_axes(std::move(axes), a.value().ndim());
  int64_t cnt = 1;
  for (int64_t ax : axes) cnt *= a.shape()[static_cast<size_t>(ax)];
  return mul_scalar(sum(a, axes, keepdims), 1.0 / static_cast<double>(cnt));
}

Var mean_all(const Var& a) { return mean(a, {}, false); }

Var reduce_max(const Var& a, std::vector<int64_t> axes, bool keepdims) {
  axes = normalize_axes(std::move(axes), a.value().ndim());
  const auto& ish = a.shape();
  std::vector<int64_t> ks = keepdims_shape(ish, axes);
  Tensor out = Tensor::full(ks, -std::numeric_limits<double>::infinity());
  const auto ost = strides_of(ks);
  std::vector<int64_t> idx(ish.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  const int64_t n = a.numel();
  int64_t oo = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[oo] = std::max(po[oo], pa[i]);
    for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (ks[ud] != 1) oo += ost[ud];
      if (idx[ud] < ish[ud]) break;
      idx[ud] = 0;
      if (ks[ud] != 1) oo -= ost[ud] * ish[ud];
    }
  }
  // first-occurrence mask for the vjp
  Tensor mask(ish);
  Tensor taken = Tensor::zeros(ks);
  {
    std::fill(idx.begin(), idx.end(), 0);
    double* pm = mask.data();
    double* pt = taken.data();
    oo = 0;
    for (int64_t i = 0; i < n; ++i) {
      if (pt[oo] == 0.0 && pa[i] == po[oo]) {
        pm[i] = 1.0;
        pt[oo] = 1.0;
      }
      for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
        size_t ud = static_cast<size_t>(d);
        idx[ud]++;
        if (ks[ud] != 1) oo += ost[ud];
        if (idx[ud] < ish[ud]) break;
        idx[ud] = 0;
        if (ks[ud] != 1) oo -= ost[ud] * ish[ud];
      }
    }
  }
  std::vector<int64_t> fs;
  if (keepdims) {
    fs = ks;
  } else {
    for (size_t i = 0; i < ish.size(); ++i)
      if (std::find(axes.begin(), axes.end(), static_cast<int64_t>(i)) == axes.end())
        fs.push_back(ish[i]);
    if (fs.empty()) fs.push_back(1);
  }
  Tensor outf = out.reshape(fs);
  return Var::make(std::move(outf), {a},
                   [ish, ks, mask](const Var& cot) -> std::vector<Var> {
                     return {mul(broadcast_to(reshape(cot, ks), ish), Var::constant(mask))};
                   },
                   "reduce_max");
}

// ---- shape ------------------------------------------------------------------

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor v = a.value().reshape(shape);
  auto ish = a.shape();
  return Var::make(std::move(v), {a},
                   [ish](const Var& cot) -> std::vector<Var> { return {reshape(cot, ish)}; },
                   "reshape");
}

Var transpose(const Var& a, std::vector<int64_t> perm) {
  const auto& ish = a.shape();
  std::vector<int64_t> os(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) os[i] = ish[static_cast<size_t>(perm[i])];
  Tensor out(os);
  const auto ist = strides_of(ish);
  const auto ost = strides_of(os);
  std::vector<int64_t> idx(os.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (size_t d = 0; d < os.size(); ++d) src += idx[d] * ist[static_cast<size_t>(perm[d])];
    po[i] = pa[src];
    for (int64_t d = static_cast<int64_t>(os.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (idx[ud] < os[ud]) break;
      idx[ud] = 0;
    }
  }
  std::vector<int64_t> inv(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int64_t>(i);
  return Var::make(std::move(out), {a},
                   [inv](const Var& cot) -> std::vector<Var> { return {transpose(cot, inv)}; },
                   "transpose");
}

Var slice(const Var& a, std::vector<int64_t> starts, std::vector<int64_t> sizes) {
  const auto& ish = a.shape();
  Tensor out(sizes);
  const auto ist = strides_of(ish);
  std::vector<int64_t> idx(sizes.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (size_t d = 0; d < sizes.size(); ++d) src += (starts[d] + idx[d]) * ist[d];
    po[i] = pa[src];
    for (int64_t d = static_cast<int64_t>(sizes.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (idx[ud] < sizes[ud]) break;
      idx[ud] = 0;
    }
  }
  return Var::make(std::move(out), {a},
                   [starts, ish](const Var& cot) -> std::vector<Var> {
                     return {unslice(cot, starts, ish)};
                   },
                   "slice");
}

namespace {
Var unslice(const Var& x, std::vector<int64_t> starts, std::vector<int64_t> full) {
  const auto& ish = x.shape();
  Tensor out = Tensor::zeros(full);
  const auto fst = strides_of(full);
  std::vector<int64_t> idx(ish.size(), 0);
  const double* pa = x.value().data();
  double* po = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    int64_t dst = 0;
    for (size_t d = 0; d < ish.size(); ++d) dst += (starts[d] + idx[d]) * fst[d];
    po[dst] = pa[i];
    for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (idx[ud] < ish[ud]) break;
      idx[ud] = 0;
    }
  }
  std::vector<int64_t> sizes = ish;
  return Var::make(std::move(out), {x},
                   [starts, sizes](const Var& cot) -> std::vector<Var> {
                     return {slice(cot, starts, sizes)};
                   },
                   "unslice");
}
}  // namespace

Var concat(const std::vector<Var>& xs, int64_t axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty inputs");
  const auto& fsh = xs[0].shape();
  if (axis < 0) axis += static_cast<int64_t>(fsh.size());
  std::vector<int64_t> os = fsh;
  os[static_cast<size_t>(axis)] = 0;
  for (const Var& x : xs) os[static_cast<size_t>(axis)] += x.shape()[static_cast<size_t>(axis)];
  Tensor out(os);
  const auto ost = strides_of(os);
  int64_t run = 0;
  std::vector<int64_t> offs;
  for (const Var& x : xs) {
    offs.push_back(run);
    const auto& ish = x.shape();
    std::vector<int64_t> idx(ish.size(), 0);
    const double* pa = x.value().data();
    double* po = out.data();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
      int64_t dst = 0;
      for (size_t d = 0; d < ish.size(); ++d) {
        int64_t c = idx[d] + (static_cast<int64_t>(d) == axis ? run : 0);
        dst += c * ost[d];
      }
      po[dst] = pa[i];
      for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
        size_t ud = static_cast<size_t>(d);
        idx[ud]++;
        if (idx[ud] < ish[ud]) break;
        idx[ud] = 0;
      }
    }
    run += ish[static_cast<size_t>(axis)];
  }
  std::vector<std::vector<int64_t>> sizes;
  for (const Var& x : xs) sizes.push_back(x.shape());
  return Var::make(std::move(out), xs,
                   [axis, offs, sizes](const Var& cot) -> std::vector<Var> {
                     std::vector<Var> outs;
                     for (size_t i = 0; i < sizes.size(); ++i) {
                       std::vector<int64_t> st(sizes[i].size(), 0);
                       st[static_cast<size_t>(axis)] = offs[i];
                       outs.push_back(slice(cot, st, sizes[i]));
                     }
                     return outs;
                   },
                   "concat");
}

Var flip(const Var& a, std::vector<int64_t> axes) {
  const auto& ish = a.shape();
  Tensor out(ish);
  const auto ist = strides_of(ish);
  std::vector<int64_t> idx(ish.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  const int64_t n = a.numel();
  std::vector<bool> isflip(ish.size(), false);
  for (int64_t ax : axes) isflip[static_cast<size_t>(ax < 0 ? ax + a.value().ndim() : ax)] = true;
  for (int64_t i = 0; i < n; ++i) {
    int64_t src = 0;
    for (size_t d = 0; d < ish.size(); ++d) {
      int64_t c = isflip[d] ? (ish[d] - 1 - idx[d]) : idx[d];
      src += c * ist[d];
    }
    po[i] = pa[src];
    for (int64_t d = static_cast<int64_t>(ish.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      if (idx[ud] < ish[ud]) break;
      idx[ud] = 0;
    }
  }
  return Var::make(std::move(out), {a},
                   [axes](const Var& cot) -> std::vector<Var> { return {flip(cot, axes)}; },
                   "flip");
}

Var broadcast_to(const Var& a, std::vector<int64_t> shape) {
  if (a.shape() == shape) return a;
  Tensor out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  std::vector<int64_t> idx(shape.size(), 0);
  const double* pa = a.value().data();
  double* po = out.data();
  const int64_t n = out.numel();
  int64_t oa = 0;
  for (int64_t i = 0; i < n; ++i) {
    po[i] = pa[oa];
    for (int64_t d = static_cast<int64_t>(shape.size()) - 1; d >= 0; --d) {
      size_t ud = static_cast<size_t>(d);
      idx[ud]++;
      oa += sa[ud];
      if (idx[ud] < shape[ud]) break;
      idx[ud] = 0;
      oa -= sa[ud] * shape[ud];
    }
  }
  auto ish = a.shape();
  return Var::make(std::move(out), {a},
                   [ish](const Var& cot) -> std::vector<Var> { return {reduce_to(cot, ish)}; },
                   "broadcast_to");
}

Var detach(const Var& a) { return Var::constant(a.value()); }

// ---- linear algebra ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
    throw std::invalid_argument("matmul: bad shapes " + a.value().shape_str() + " x " +
                                b.value().shape_str());
  Tensor out({as[0], bs[1]});
  CMapMat ma(a.value().data(), as[0], as[1]);
  CMapMat mb(b.value().data(), bs[0], bs[1]);
  MapMat mo(out.data(), as[0], bs[1]);
  mo.noalias() = ma * mb;
  return Var::make(std::move(out), {a, b},
                   [a, b](const Var& cot) -> std::vector<Var> {
                     return {matmul(cot, transpose(b, {1, 0})), matmul(transpose(a, {1, 0}), cot)};
                   },
                   "matmul");
}

Var bmm(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
    throw std::invalid_argument("bmm: bad shapes");
  Tensor out({as[0], as[1], bs[2]});
  for (int64_t i = 0; i < as[0]; ++i) {
    CMapMat ma(a.value().data() + i * as[1] * as[2], as[1], as[2]);
    CMapMat mb(b.value().data() + i * bs[1] * bs[2], bs[1], bs[2]);
    MapMat mo(out.data() + i * as[1] * bs[2], as[1], bs[2]);
    mo.noalias() = ma * mb;
  }
  return Var::make(std::move(out), {a, b},
                   [a, b](const Var& cot) -> std::vector<Var> {
                     return {bmm(cot, transpose(b, {0, 2, 1})), bmm(transpose(a, {0, 2, 1}), cot)};
                   },
                   "bmm");
}

// ---- conv / pooling ---------------------------------------------------------

namespace {
// im2col for one sample: cols [C*kh*kw, Ho*Wo]
void im2col(const double* x, int64_t C, int64_t H, int64_t W, int64_t kh, int64_t kw,
            double* cols) {
  const int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t p = 0; p < kh; ++p) {
      for (int64_t q = 0; q < kw; ++q) {
        double* row = cols + ((c * kh + p) * kw + q) * (Ho * Wo);
        const double* src = x + c * H * W;
        for (int64_t i = 0; i < Ho; ++i) {
          std::memcpy(row + i * Wo, src + (i + p) * W + q, sizeof(double) * static_cast<size_t>(Wo));
        }
      }
    }
  }
}
}  // namespace

Var conv2d_valid(const Var& x, const Var& w) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw std::invalid_argument("conv2d_valid: bad shapes " + x.value().shape_str() + " * " +
                                w.value().shape_str());
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int64_t O = ws[0], kh = ws[2], kw = ws[3];
  const int64_t Ho = H - kh + 1, Wo = W - kw + 1;
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d_valid: kernel larger than input");
  Tensor out({N, O, Ho, Wo});
  std::vector<double> cols(static_cast<size_t>(C * kh * kw * Ho * Wo));
  CMapMat mw(w.value().data(), O, C * kh * kw);
  for (int64_t n = 0; n < N; ++n) {
    im2col(x.value().data() + n * C * H * W, C, H, W, kh, kw, cols.data());
    CMapMat mc(cols.data(), C * kh * kw, Ho * Wo);
    MapMat mo(out.data() + n * O * Ho * Wo, O, Ho * Wo);
    mo.noalias() = mw * mc;
  }
  return Var::make(
      std::move(out), {x, w},
      [x, w, kh, kw](const Var& cot) -> std::vector<Var> {
        // dx = conv(pad(cot), flip(w) with in/out channels swapped)
        Var wf = transpose(flip(w, {2, 3}), {1, 0, 2, 3});
        Var dx = conv2d_valid(pad2d(cot, kh - 1, kh - 1, kw - 1, kw - 1), wf);
        // dw = conv(x^{C,N,H,W}, cot^{O,N,Ho,Wo}) -> [C,O,kh,kw] -> transpose
        Var dw = transpose(conv2d_valid(transpose(x, {1, 0, 2, 3}), transpose(cot, {1, 0, 2, 3})),
                           {1, 0, 2, 3});
        return {dx, dw};
      },
      "conv2d");
}

Var pad2d(const Var& x, int64_t top, int64_t bottom, int64_t left, int64_t right) {
  if (top == 0 && bottom == 0 && left == 0 && right == 0) return x;
  const auto& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor out = Tensor::zeros({N, C, H + top + bottom, W + left + right});
  const int64_t Wp = W + left + right;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = x.value().data() + nc * H * W;
    double* dst = out.data() + nc * (H + top + bottom) * Wp;
    for (int64_t i = 0; i < H; ++i)
      std::memcpy(dst + (i + top) * Wp + left, src + i * W, sizeof(double) * static_cast<size_t>(W));
  }
  std::vector<int64_t> starts = {0, 0, top, left};
  std::vector<int64_t> sizes = {N, C, H, W};
  return Var::make(std::move(out), {x},
                   [starts, sizes](const Var& cot) -> std::vector<Var> {
                     return {slice(cot, starts, sizes)};
                   },
                   "pad2d");
}

Var avg_pool2(const Var& x) {
  const auto& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
  Tensor out({N, C, H / 2, W / 2});
  const double* pa = x.value().data();
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* s = pa + nc * H * W;
    double* d = po + nc * (H / 2) * (W / 2);
    for (int64_t i = 0; i < H / 2; ++i)
      for (int64_t j = 0; j < W / 2; ++j)
        d[i * (W / 2) + j] = 0.25 * (s[(2 * i) * W + 2 * j] + s[(2 * i) * W + 2 * j + 1] +
                                     s[(2 * i + 1) * W + 2 * j] + s[(2 * i + 1) * W + 2 * j + 1]);
  }
  return Var::make(std::move(out), {x},
                   [](const Var& cot) -> std::vector<Var> {
                     return {mul_scalar(upsample2(cot), 0.25)};
                   },
                   "avg_pool2");
}

Var upsample2(const Var& x) {
  const auto& xs = x.shape();
  const int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  Tensor out({N, C, H * 2, W * 2});
  const double* pa = x.value().data();
  double* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* s = pa + nc * H * W;
    double* d = po + nc * 4 * H * W;
    for (int64_t i = 0; i < H; ++i)
      for (int64_t j = 0; j < W; ++j) {
        double v = s[i * W + j];
        d[(2 * i) * 2 * W + 2 * j] = v;
        d[(2 * i) * 2 * W + 2 * j + 1] = v;
        d[(2 * i + 1) * 2 * W + 2 * j] = v;
        d[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
      }
  }
  return Var::make(std::move(out), {x},
                   [](const Var& cot) -> std::vector<Var> {
                     return {mul_scalar(avg_pool2(cot), 4.0)};
                   },
                   "upsample2");
}

// ---- composites -------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int64_t pad) {
  Var h = conv2d_valid(pad2d(x, pad, pad, pad, pad), w);
  if (b.defined()) h = add(h, reshape(b, {b.numel(), 1, 1}));
  return h;
}

Var dense(const Var& x, const Var& w, const Var& b) {
  Var h = matmul(x, w);
  if (b.defined()) h = add(h, b);
  return h;
}

Var softmax(const Var& x, int64_t axis) {
  Var m = detach(reduce_max(x, {axis}, true));
  Var e = exp_(sub(x, m));
  return div(e, sum(e, {axis}, true));
}

Var log_softmax(const Var& x, int64_t axis) {
  Var m = detach(reduce_max(x, {axis}, true));
  Var c = sub(x, m);
  return sub(c, log_(sum(exp_(c), {axis}, true)));
}

Var instance_norm(const Var& x, double eps) {
  Var m = mean(x, {2, 3}, true);
  Var c = sub(x, m);
  Var v = mean(square(c), {2, 3}, true);
  return div(c, sqrt_(add_scalar(v, eps)));
}

Var layer_norm(const Var& x, double eps) {
  int64_t last = x.value().ndim() - 1;
  Var m = mean(x, {last}, true);
  Var c = sub(x, m);
  Var v = mean(square(c), {last}, true);
  return div(c, sqrt_(add_scalar(v, eps)));
}

Var minibatch_stddev(const Var& x) {
  const auto& xs = x.shape();
  Var m = mean(x, {0}, true);
  Var v = mean(square(sub(x, m)), {0}, true);
  Var s = sqrt_(add_scalar(v, 1e-8));
  Var avg = mean_all(s);
  Var feat = broadcast_to(reshape(avg, {1, 1, 1, 1}), {xs[0], 1, xs[2], xs[3]});
  return concat({x, feat}, 1);
}

namespace {
Var clamp_min_scalar(const Var& x, double c) {
  return add_scalar(relu(add_scalar(x, -c)), c);
}
}  // namespace

Var l2_normalize_rows(const Var& x, double eps) {
  Var n = sqrt_(sum(square(x), {1}, true));
  return div(x, clamp_min_scalar(n, eps));
}

Var cosine_rows(const Var& a, const Var& b, double eps) {
  Var num = sum(mul(a, b), {1}, false);
  Var na = clamp_min_scalar(sqrt_(sum(square(a), {1}, false)), eps);
  Var nb = clamp_min_scalar(sqrt_(sum(square(b), {1}, false)), eps);
  return div(num, mul(na, nb));
}

// ---- reverse mode -----------------------------------------------------------

std::vector<Var> gradients(const Var& out, const std::vector<Var>& wrt) {
  std::unordered_set<Node*> wrtset;
  for (const Var& v : wrt) wrtset.insert(v.node());

  // depends[n]: some wrt node is n or an ancestor input of n
  std::unordered_map<Node*, bool> depends;
  {
    std::function<bool(Node*)> dfs = [&](Node* n) -> bool {
      auto it = depends.find(n);
      if (it != depends.end()) return it->second;
      bool d = wrtset.count(n) > 0;
      depends[n] = d;
      if (!d) {
        for (const Var& p : n->parents)
          if (dfs(p.node())) {
            d = true;
            break;
          }
      }
      depends[n] = d;
      return d;
    };
    dfs(out.node());
  }

  // post-order topo (iterative); reverse order is a valid schedule for
  // cotangent accumulation
  std::vector<Node*> topo;
  {
    std::unordered_set<Node*> done;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({out.node(), 0});
    while (!stack.empty()) {
      Node* n = stack.back().first;
      if (done.count(n)) {
        stack.pop_back();
        continue;
      }
      size_t i = stack.back().second;
      if (i < n->parents.size()) {
        stack.back().second = i + 1;
        Node* p = n->parents[i].node();
        if (!done.count(p) && depends.count(p) && depends[p] && p->requires_grad)
          stack.push_back({p, 0});
        continue;
      }
      done.insert(n);
      topo.push_back(n);
      stack.pop_back();
    }
  }

  std::unordered_map<Node*, Var> cot;
  cot[out.node()] = Var::constant(Tensor::ones(out.shape()));

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    auto cit = cot.find(n);
    if (cit == cot.end() || !n->vjp) continue;
    std::vector<Var> pcots = n->vjp(cit->second);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      Node* p = n->parents[i].node();
      if (!p->requires_grad) continue;
      auto dit = depends.find(p);
      if (dit == depends.end() || !dit->second) continue;
      if (i >= pcots.size() || !pcots[i].defined()) continue;
      auto ait = cot.find(p);
      if (ait == cot.end())
        cot[p] = pcots[i];
      else
        ait->second = add(ait->second, pcots[i]);
    }
  }

  std::vector<Var> result;
  result.reserve(wrt.size());
  for (const Var& v : wrt) {
    auto it = cot.find(v.node());
    if (it == cot.end())
      result.push_back(Var::constant(Tensor::zeros(v.shape())));
    else
      result.push_back(it->second);
  }
  return result;
}

}  // namespace bijrecon::nn
