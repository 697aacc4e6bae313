#include "cfnet/ndgrad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace cfnet::nd {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

template <typename T>
using StoragePtr = std::shared_ptr<Storage<T>>;
template <typename T>
using BackwardFn = std::function<void(TapeEntry<T>&)>;

[[noreturn]] void shape_fail(const char* prim, const std::string& what) {
  throw ShapeError(std::string(prim) + ": " + what);
}

template <typename T>
BasicTensor<T> blank(Shape shape) {
  return BasicTensor<T>::zeros(std::move(shape));
}

// Finite check plus tape recording. The backward closure receives the entry;
// entry.inputs holds the input storages in call order.
template <typename T>
BasicTensor<T> finish(const char* prim, BasicTensor<T> out,
                      std::vector<StoragePtr<T>> inputs, BackwardFn<T> backward) {
  for (T v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(prim) + ": non-finite value in output of shape " +
                         to_string(out.shape()));
    }
  }
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return out;
  bool any = false;
  for (const auto& in : inputs) {
    if (!in->requires_grad) continue;
    any = true;
    auto owner = in->tape.lock();
    if (owner && owner != tape->state()) {
      throw TapeError(std::string(prim) + ": input was recorded on a different live tape");
    }
  }
  if (!any) return out;
  TapeEntry<T> entry{prim, std::move(inputs), out.storage(), std::move(backward)};
  tape->record(std::move(entry), *out.storage());
  return out;
}

template <typename T>
std::span<T> grad_of(TapeEntry<T>& e, std::size_t i) {
  return e.inputs[i]->grad_buffer();
}

template <typename T>
bool wants(const TapeEntry<T>& e, std::size_t i) {
  return e.inputs[i]->requires_grad;
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;  // per-output-axis strides, 0 when broadcast
  bool same = false;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast(const char* prim, const Shape& a, const Shape& b) {
  Broadcast br;
  if (a == b) {
    br.out = a;
    br.same = true;
    return br;
  }
  const std::size_t r = std::max(a.size(), b.size());
  br.out.assign(r, 1);
  br.sa.assign(r, 0);
  br.sb.assign(r, 0);
  auto sta = strides_of(a), stb = strides_of(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size(), ib = i + b.size();
    std::size_t da = ia >= r ? a[ia - r] : 1;
    std::size_t db = ib >= r ? b[ib - r] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_fail(prim, "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    br.out[i] = std::max(da, db);
    if (ia >= r && da != 1) br.sa[i] = sta[ia - r];
    if (ib >= r && db != 1) br.sb[i] = stb[ib - r];
  }
  return br;
}

// Calls fn(out_index, a_offset, b_offset) over every output element.
template <typename F>
void each_broadcast(const Broadcast& br, F&& fn) {
  const std::size_t n = numel(br.out);
  if (br.same) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = br.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, oa, ob);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < br.out[ax]) {
        oa += br.sa[ax];
        ob += br.sb[ax];
        break;
      }
      oa -= br.sa[ax] * (br.out[ax] - 1);
      ob -= br.sb[ax] * (br.out[ax] - 1);
      idx[ax] = 0;
    }
  }
}

template <typename T, typename Fwd, typename Da, typename Db>
BasicTensor<T> binary(const char* prim, const BasicTensor<T>& a, const BasicTensor<T>& b, Fwd f,
                      Da dfa, Db dfb) {
  auto br = broadcast(prim, a.shape(), b.shape());
  auto out = blank<T>(br.out);
  auto od = out.mutable_data();
  auto ad = a.data(), bd = b.data();
  each_broadcast(br, [&](std::size_t o, std::size_t ia, std::size_t ib) { od[o] = f(ad[ia], bd[ib]); });
  return finish<T>(prim, out, {a.storage(), b.storage()}, [br, dfa, dfb](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& av = e.inputs[0]->data;
    const auto& bv = e.inputs[1]->data;
    const bool wa = wants(e, 0), wb = wants(e, 1);
    std::span<T> ga, gb;
    if (wa) ga = grad_of(e, 0);
    if (wb) gb = grad_of(e, 1);
    each_broadcast(br, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (wa) ga[ia] += go[o] * dfa(av[ia], bv[ib]);
      if (wb) gb[ib] += go[o] * dfb(av[ia], bv[ib]);
    });
  });
}

template <typename T, typename Fwd, typename Dfn>
BasicTensor<T> unary(const char* prim, const BasicTensor<T>& x, Fwd f, Dfn df) {
  auto out = blank<T>(x.shape());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) od[i] = f(xd[i]);
  // df(x, y) gives dy/dx.
  return finish<T>(prim, out, {x.storage()}, [df](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& y = e.output->data;
    const auto& xv = e.inputs[0]->data;
    auto g = grad_of(e, 0);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * df(xv[i], y[i]);
  });
}

// ---- im2col -------------------------------------------------------------

struct ConvGeom {
  std::size_t c, h, w, k, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool in = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                            ix < static_cast<long>(g.w);
            row[oy * g.wo + ox] = in ? img[(c * g.h + iy) * g.w + ix] : T{0};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* img) {
  const std::size_t plane = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
    }
  }
}

void require_rank(const char* prim, const Shape& s, std::size_t r, const char* what) {
  if (s.size() != r) {
    shape_fail(prim, std::string(what) + " must be rank " + std::to_string(r) + ", got " +
                         to_string(s));
  }
}

// Shape with the listed axes removed; also returns per-input-axis strides into
// the reduced output (0 on reduced axes).
std::pair<Shape, std::vector<std::size_t>> reduce_plan(const char* prim, const Shape& in,
                                                       const std::vector<std::size_t>& axes) {
  std::vector<bool> drop(in.size(), false);
  for (auto a : axes) {
    if (a >= in.size()) shape_fail(prim, "axis " + std::to_string(a) + " out of range for " + to_string(in));
    if (drop[a]) shape_fail(prim, "axis " + std::to_string(a) + " listed twice");
    drop[a] = true;
  }
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i)
    if (!drop[i]) out.push_back(in[i]);
  auto ost = strides_of(out);
  std::vector<std::size_t> st(in.size(), 0);
  for (std::size_t i = 0, j = 0; i < in.size(); ++i) {
    if (!drop[i]) st[i] = ost[j++];
  }
  return {out, st};
}

template <typename F>
void each_reduce(const Shape& in, const std::vector<std::size_t>& st, F&& fn) {
  const std::size_t n = numel(in);
  std::vector<std::size_t> idx(in.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    fn(i, off);
    for (std::size_t ax = in.size(); ax-- > 0;) {
      if (++idx[ax] < in[ax]) {
        off += st[ax];
        break;
      }
      off -= st[ax] * (in[ax] - 1);
      idx[ax] = 0;
    }
  }
}

template <typename T>
BasicTensor<T> reduce_sum(const char* prim, const BasicTensor<T>& x,
                          const std::vector<std::size_t>& axes, T factor) {
  auto [oshape, st] = reduce_plan(prim, x.shape(), axes);
  auto out = blank<T>(oshape);
  auto od = out.mutable_data();
  auto xd = x.data();
  // Accumulate in double for reproducible, accurate sums in both precisions.
  std::vector<double> acc(od.size(), 0.0);
  each_reduce(x.shape(), st, [&](std::size_t i, std::size_t o) { acc[o] += xd[i]; });
  for (std::size_t o = 0; o < od.size(); ++o) od[o] = static_cast<T>(acc[o] * factor);
  Shape ishape = x.shape();
  return finish<T>(prim, out, {x.storage()}, [ishape, st = st, factor](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    each_reduce(ishape, st, [&](std::size_t i, std::size_t o) { g[i] += go[o] * factor; });
  });
}

std::vector<std::size_t> all_axes(std::size_t r) {
  std::vector<std::size_t> a(r);
  std::iota(a.begin(), a.end(), 0);
  return a;
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{1}; });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T{1}; },
      [](T, T) { return T{-1}; });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T{1} / y; },
      [](T x, T y) { return -x / (y * y); });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  return unary<T>(
      "scale", x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& x, T value) {
  return unary<T>(
      "add_scalar", x, [value](T v) { return v + value; }, [](T, T) { return T{1}; });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T{0} ? v : T{0}; },
      [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T{0}) return T{1} / (T{1} + std::exp(-v));
        const T e = std::exp(v);
        return e / (T{1} + e);
      },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
BasicTensor<T> exp(const BasicTensor<T>& x) {
  return unary<T>(
      "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
BasicTensor<T> sqrt(const BasicTensor<T>& x) {
  return unary<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return y > T{0} ? T{0.5} / y : T{0}; });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& x) {
  return unary<T>(
      "square", x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
BasicTensor<T> pow_scalar(const BasicTensor<T>& x, T exponent) {
  return unary<T>(
      "pow_scalar", x, [exponent](T v) { return std::pow(v, exponent); },
      [exponent](T v, T) {
        if (exponent == T{0}) return T{0};
        if (v == T{0} && exponent < T{1}) return T{0};
        return exponent * std::pow(v, exponent - T{1});
      });
}

// ---- linear algebra -------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  std::size_t batch = 1, m, k, n;
  bool batched_b = false;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0];
    k = sa[1];
    n = sb[1];
    if (sb[0] != k) shape_fail("matmul", "inner dims differ: " + to_string(sa) + " x " + to_string(sb));
  } else if (sa.size() == 3 && sb.size() == 2) {
    // Fold the batch into rows.
    m = sa[0] * sa[1];
    k = sa[2];
    n = sb[1];
    if (sb[0] != k) shape_fail("matmul", "inner dims differ: " + to_string(sa) + " x " + to_string(sb));
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0];
    m = sa[1];
    k = sa[2];
    n = sb[2];
    batched_b = true;
    if (sb[0] != batch || sb[1] != k) {
      shape_fail("matmul", "batched dims differ: " + to_string(sa) + " x " + to_string(sb));
    }
  } else {
    shape_fail("matmul", "unsupported ranks " + to_string(sa) + " x " + to_string(sb));
  }
  Shape oshape = sa.size() == 2 ? Shape{m, n}
                 : batched_b    ? Shape{batch, m, n}
                                : Shape{sa[0], sa[1], n};
  auto out = blank<T>(oshape);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    MapC<T> A(a.data().data() + bi * m * k, m, k);
    MapC<T> B(b.data().data() + (batched_b ? bi * k * n : 0), k, n);
    Map<T> C(out.mutable_data().data() + bi * m * n, m, n);
    C.noalias() = A * B;
  }
  return finish<T>("matmul", out, {a.storage(), b.storage()},
                   [batch, m, k, n, batched_b](TapeEntry<T>& e) {
                     const bool wa = wants(e, 0), wb = wants(e, 1);
                     std::span<T> ga, gb;
                     if (wa) ga = grad_of(e, 0);
                     if (wb) gb = grad_of(e, 1);
                     for (std::size_t bi = 0; bi < batch; ++bi) {
                       MapC<T> G(e.output->grad.data() + bi * m * n, m, n);
                       MapC<T> A(e.inputs[0]->data.data() + bi * m * k, m, k);
                       const std::size_t boff = batched_b ? bi * k * n : 0;
                       MapC<T> B(e.inputs[1]->data.data() + boff, k, n);
                       if (wa) {
                         Map<T> GA(ga.data() + bi * m * k, m, k);
                         GA.noalias() += G * B.transpose();
                       }
                       if (wb) {
                         Map<T> GB(gb.data() + boff, k, n);
                         GB.noalias() += A.transpose() * G;
                       }
                     }
                   });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
  const auto& s = x.shape();
  if (s.size() != 2 && s.size() != 3) shape_fail("transpose", "needs rank 2 or 3, got " + to_string(s));
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t r = s[s.size() - 2], c = s[s.size() - 1];
  Shape os = s;
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  auto out = blank<T>(os);
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) od[b * r * c + j * r + i] = xd[b * r * c + i * c + j];
  return finish<T>("transpose", out, {x.storage()}, [batch, r, c](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += go[b * r * c + j * r + i];
  });
}

// ---- convolution ----------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const std::optional<std::type_identity_t<BasicTensor<T>>>& bias, Conv2dAttrs attrs) {
  require_rank("conv2d", x.shape(), 4, "input");
  require_rank("conv2d", w.shape(), 4, "weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin) {
    shape_fail("conv2d", "weight " + to_string(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                             " input channels, input " + to_string(x.shape()) + " has " + std::to_string(Cin));
  }
  if (w.dim(3) != k) shape_fail("conv2d", "kernel must be square, got " + to_string(w.shape()));
  if (attrs.stride == 0) shape_fail("conv2d", "stride must be positive");
  if (H + 2 * attrs.pad < k || W + 2 * attrs.pad < k) {
    shape_fail("conv2d", "kernel " + std::to_string(k) + " larger than padded input " + to_string(x.shape()));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) {
    shape_fail("conv2d", "bias " + to_string(bias->shape()) + " does not match " + std::to_string(Cout) + " outputs");
  }
  ConvGeom g{Cin, H, W, k, attrs.stride, attrs.pad, (H + 2 * attrs.pad - k) / attrs.stride + 1,
             (W + 2 * attrs.pad - k) / attrs.stride + 1};
  const std::size_t plane = g.ho * g.wo, ckk = Cin * k * k;
  auto out = blank<T>({B, Cout, g.ho, g.wo});
  std::vector<T> cols(ckk * plane);
  MapC<T> Wm(w.data().data(), Cout, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(x.data().data() + b * Cin * H * W, g, cols.data());
    Map<T> O(out.mutable_data().data() + b * Cout * plane, Cout, plane);
    O.noalias() = Wm * MapC<T>(cols.data(), ckk, plane);
    if (bias) {
      for (std::size_t c = 0; c < Cout; ++c) O.row(c).array() += bias->data()[c];
    }
  }
  std::vector<StoragePtr<T>> ins{x.storage(), w.storage()};
  if (bias) ins.push_back(bias->storage());
  const bool has_bias = bias.has_value();
  return finish<T>("conv2d", out, std::move(ins), [g, B, Cout, plane, ckk, has_bias](TapeEntry<T>& e) {
    const auto& xs = *e.inputs[0];
    const auto& ws = *e.inputs[1];
    const bool wx = wants(e, 0), ww = wants(e, 1), wbias = has_bias && wants(e, 2);
    std::span<T> gx, gw, gb;
    if (wx) gx = grad_of(e, 0);
    if (ww) gw = grad_of(e, 1);
    if (wbias) gb = grad_of(e, 2);
    std::vector<T> cols(ckk * plane);
    MapC<T> Wm(ws.data.data(), Cout, ckk);
    const std::size_t in_plane = g.c * g.h * g.w;
    for (std::size_t b = 0; b < B; ++b) {
      MapC<T> G(e.output->grad.data() + b * Cout * plane, Cout, plane);
      if (ww) {
        im2col(xs.data.data() + b * in_plane, g, cols.data());
        Map<T> GW(gw.data(), Cout, ckk);
        GW.noalias() += G * MapC<T>(cols.data(), ckk, plane).transpose();
      }
      if (wx) {
        Map<T> C(cols.data(), ckk, plane);
        C.noalias() = Wm.transpose() * G;
        col2im(cols.data(), g, gx.data() + b * in_plane);
      }
      if (wbias) {
        for (std::size_t c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
      }
    }
  });
}

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                const std::optional<std::type_identity_t<BasicTensor<T>>>& bias, Conv2dAttrs attrs) {
  require_rank("conv_transpose2d", x.shape(), 4, "input");
  require_rank("conv_transpose2d", w.shape(), 4, "weight");
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(1), k = w.dim(2);
  if (w.dim(0) != Cin) {
    shape_fail("conv_transpose2d", "weight " + to_string(w.shape()) + " expects " +
                                       std::to_string(w.dim(0)) + " input channels, input " +
                                       to_string(x.shape()) + " has " + std::to_string(Cin));
  }
  if (w.dim(3) != k) shape_fail("conv_transpose2d", "kernel must be square, got " + to_string(w.shape()));
  if (attrs.stride == 0) shape_fail("conv_transpose2d", "stride must be positive");
  if ((H - 1) * attrs.stride + k <= 2 * attrs.pad) shape_fail("conv_transpose2d", "padding leaves no output");
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) {
    shape_fail("conv_transpose2d", "bias " + to_string(bias->shape()) + " does not match " +
                                       std::to_string(Cout) + " outputs");
  }
  const std::size_t Ho = (H - 1) * attrs.stride + k - 2 * attrs.pad;
  const std::size_t Wo = (W - 1) * attrs.stride + k - 2 * attrs.pad;
  // The transposed conv is the input-gradient of a conv from [Cout,Ho,Wo] to [Cin,H,W].
  ConvGeom g{Cout, Ho, Wo, k, attrs.stride, attrs.pad, H, W};
  const std::size_t plane = H * W, ckk = Cout * k * k;
  auto out = blank<T>({B, Cout, Ho, Wo});
  std::vector<T> cols(ckk * plane);
  MapC<T> Wm(w.data().data(), Cin, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    Map<T> C(cols.data(), ckk, plane);
    C.noalias() = Wm.transpose() * MapC<T>(x.data().data() + b * Cin * plane, Cin, plane);
    T* ob = out.mutable_data().data() + b * Cout * Ho * Wo;
    col2im(cols.data(), g, ob);
    if (bias) {
      for (std::size_t c = 0; c < Cout; ++c)
        for (std::size_t i = 0; i < Ho * Wo; ++i) ob[c * Ho * Wo + i] += bias->data()[c];
    }
  }
  std::vector<StoragePtr<T>> ins{x.storage(), w.storage()};
  if (bias) ins.push_back(bias->storage());
  const bool has_bias = bias.has_value();
  return finish<T>("conv_transpose2d", out, std::move(ins),
                   [g, B, Cin, Cout, plane, ckk, has_bias](TapeEntry<T>& e) {
                     const auto& xs = *e.inputs[0];
                     const auto& ws = *e.inputs[1];
                     const bool wx = wants(e, 0), ww = wants(e, 1), wbias = has_bias && wants(e, 2);
                     std::span<T> gx, gw, gb;
                     if (wx) gx = grad_of(e, 0);
                     if (ww) gw = grad_of(e, 1);
                     if (wbias) gb = grad_of(e, 2);
                     std::vector<T> cols(ckk * plane);
                     MapC<T> Wm(ws.data.data(), Cin, ckk);
                     const std::size_t out_plane = g.h * g.w;
                     for (std::size_t b = 0; b < B; ++b) {
                       const T* go = e.output->grad.data() + b * Cout * out_plane;
                       im2col(go, g, cols.data());
                       MapC<T> C(cols.data(), ckk, plane);
                       if (wx) {
                         Map<T> GX(gx.data() + b * Cin * plane, Cin, plane);
                         GX.noalias() += Wm * C;
                       }
                       if (ww) {
                         Map<T> GW(gw.data(), Cin, ckk);
                         GW.noalias() += MapC<T>(xs.data.data() + b * Cin * plane, Cin, plane) * C.transpose();
                       }
                       if (wbias) {
                         for (std::size_t c = 0; c < Cout; ++c) {
                           T s{0};
                           for (std::size_t i = 0; i < out_plane; ++i) s += go[c * out_plane + i];
                           gb[c] += s;
                         }
                       }
                     }
                   });
}

// ---- softmax --------------------------------------------------------------

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.rank() == 0) shape_fail("softmax", "needs rank >= 1");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  auto out = blank<T>(x.shape());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T* o = od.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s{0};
    for (std::size_t i = 0; i < n; ++i) s += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < n; ++i) o[i] /= s;
  }
  return finish<T>("softmax", out, {x.storage()}, [rows, n](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& y = e.output->data;
    auto g = grad_of(e, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t i = 0; i < n; ++i) dot += go[r * n + i] * y[r * n + i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += y[r * n + i] * (go[r * n + i] - dot);
    }
  });
}

template <typename T>
BasicTensor<T> log_softmax(const BasicTensor<T>& x) {
  if (x.rank() == 0) shape_fail("log_softmax", "needs rank >= 1");
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  auto out = blank<T>(x.shape());
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T* o = od.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T s{0};
    for (std::size_t i = 0; i < n; ++i) s += std::exp(in[i] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t i = 0; i < n; ++i) o[i] = in[i] - lse;
  }
  return finish<T>("log_softmax", out, {x.storage()}, [rows, n](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& y = e.output->data;
    auto g = grad_of(e, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      T s{0};
      for (std::size_t i = 0; i < n; ++i) s += go[r * n + i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += go[r * n + i] - std::exp(y[r * n + i]) * s;
    }
  });
}

// ---- pooling --------------------------------------------------------------

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  require_rank("global_avg_pool", x.shape(), 4, "input");
  return reduce_sum<T>("global_avg_pool", x, {2, 3}, T{1} / static_cast<T>(x.dim(2) * x.dim(3)));
}

template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t k) {
  require_rank("avg_pool2d", x.shape(), 4, "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k == 0 || H % k || W % k) {
    shape_fail("avg_pool2d", "window " + std::to_string(k) + " does not tile " + to_string(x.shape()));
  }
  const std::size_t Ho = H / k, Wo = W / k;
  auto out = blank<T>({B, C, Ho, Wo});
  auto od = out.mutable_data();
  auto xd = x.data();
  const T inv = T{1} / static_cast<T>(k * k);
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        od[(p * Ho + y / k) * Wo + xx / k] += xd[(p * H + y) * W + xx] * inv;
  return finish<T>("avg_pool2d", out, {x.storage()}, [B, C, H, W, k, Ho, Wo, inv](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    for (std::size_t p = 0; p < B * C; ++p)
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx)
          g[(p * H + y) * W + xx] += go[(p * Ho + y / k) * Wo + xx / k] * inv;
  });
}

// ---- structural -----------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    shape_fail("reshape", "cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  std::vector<T> d(x.data().begin(), x.data().end());
  BasicTensor<T> out(std::move(shape), std::move(d));
  return finish<T>("reshape", out, {x.storage()}, [](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
  });
}

template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  if (x.rank() < 1) shape_fail("flatten", "needs rank >= 1");
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) shape_fail("concat", "axis " + std::to_string(axis) + " out of range for " + to_string(s0));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  std::vector<std::size_t> widths;
  std::vector<StoragePtr<T>> ins;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    if (!ok) shape_fail("concat", "shape " + to_string(s) + " incompatible with " + to_string(s0) + " on axis " + std::to_string(axis));
    widths.push_back(s[axis] * inner);
    total += s[axis];
    ins.push_back(p.storage());
  }
  Shape os = s0;
  os[axis] = total;
  auto out = blank<T>(os);
  auto od = out.mutable_data();
  const std::size_t row = total * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto pd = parts[i].data();
      std::copy_n(pd.data() + o * widths[i], widths[i], od.data() + o * row + off);
      off += widths[i];
    }
  }
  return finish<T>("concat", out, std::move(ins), [outer, row, widths](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    std::size_t off = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants(e, i)) {
        auto g = grad_of(e, i);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < widths[i]; ++j) g[o * widths[i] + j] += go[o * row + off + j];
      }
      off += widths[i];
    }
  });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_fail("slice", "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  if (begin >= end || end > s[axis]) {
    shape_fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis of size " + std::to_string(s[axis]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = end - begin;
  auto out = blank<T>(os);
  auto od = out.mutable_data();
  auto xd = x.data();
  const std::size_t w = (end - begin) * inner, row = s[axis] * inner, start = begin * inner;
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xd.data() + o * row + start, w, od.data() + o * w);
  return finish<T>("slice", out, {x.storage()}, [outer, w, row, start](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < w; ++j) g[o * row + start + j] += go[o * w + j];
  });
}

template <typename T>
BasicTensor<T> take(const BasicTensor<T>& x, const std::vector<std::size_t>& indices) {
  if (indices.empty()) shape_fail("take", "empty index list");
  std::vector<T> d(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) {
      shape_fail("take", "index " + std::to_string(indices[i]) + " out of range for " + to_string(x.shape()));
    }
    d[i] = x.data()[indices[i]];
  }
  BasicTensor<T> out(Shape{indices.size()}, std::move(d));
  return finish<T>("take", out, {x.storage()}, [indices](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    auto g = grad_of(e, 0);
    for (std::size_t i = 0; i < indices.size(); ++i) g[indices[i]] += go[i];
  });
}

// ---- reductions -----------------------------------------------------------

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  return reduce_sum<T>("sum", x, all_axes(x.rank()), T{1});
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  return reduce_sum<T>("mean", x, all_axes(x.rank()), T{1} / static_cast<T>(x.size()));
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  return reduce_sum<T>("sum", x, axes, T{1});
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
  std::size_t count = 1;
  for (auto a : axes) count *= x.dim(a);
  return reduce_sum<T>("mean", x, axes, T{1} / static_cast<T>(count));
}

template <typename T>
BasicTensor<T> l2_norm(const BasicTensor<T>& x, std::size_t axis) {
  auto [oshape, st] = reduce_plan("l2_norm", x.shape(), {axis});
  auto out = blank<T>(oshape);
  auto od = out.mutable_data();
  auto xd = x.data();
  std::vector<double> acc(od.size(), 0.0);
  each_reduce(x.shape(), st, [&](std::size_t i, std::size_t o) { acc[o] += double(xd[i]) * xd[i]; });
  for (std::size_t o = 0; o < od.size(); ++o) od[o] = static_cast<T>(std::sqrt(acc[o]));
  Shape ishape = x.shape();
  return finish<T>("l2_norm", out, {x.storage()}, [ishape, st = st](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& y = e.output->data;
    const auto& xv = e.inputs[0]->data;
    auto g = grad_of(e, 0);
    each_reduce(ishape, st, [&](std::size_t i, std::size_t o) {
      if (y[o] > T{0}) g[i] += go[o] * xv[i] / y[o];
    });
  });
}

template <typename T>
BasicTensor<T> pairwise_distance(const BasicTensor<T>& x) {
  require_rank("pairwise_distance", x.shape(), 2, "input");
  const std::size_t n = x.dim(0), d = x.dim(1);
  auto out = blank<T>({n, n});
  auto od = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = double(xd[i * d + c]) - xd[j * d + c];
        s += diff * diff;
      }
      od[i * n + j] = od[j * n + i] = static_cast<T>(std::sqrt(s));
    }
  }
  return finish<T>("pairwise_distance", out, {x.storage()}, [n, d](TapeEntry<T>& e) {
    const auto& go = e.output->grad;
    const auto& y = e.output->data;
    const auto& xv = e.inputs[0]->data;
    auto g = grad_of(e, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j || y[i * n + j] <= T{0}) continue;
        // d(D_ij)/dx_i = (x_i - x_j) / D_ij, and D_ij appears at (i,j) and (j,i).
        const T w = (go[i * n + j] + go[j * n + i]) / y[i * n + j];
        if (j < i) continue;
        for (std::size_t c = 0; c < d; ++c) {
          const T diff = xv[i * d + c] - xv[j * d + c];
          g[i * d + c] += w * diff;
          g[j * d + c] -= w * diff;
        }
      }
    }
  });
}

#define CFNET_INSTANTIATE(T)                                                                    \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> div(const BasicTensor<T>&, const BasicTensor<T>&);                    \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                      \
  template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> transpose(const BasicTensor<T>&);                                     \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                 const std::optional<std::type_identity_t<BasicTensor<T>>>&, Conv2dAttrs);            \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&,        \
                                           const std::optional<std::type_identity_t<BasicTensor<T>>>&, Conv2dAttrs);  \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                          \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                       \
  template BasicTensor<T> exp(const BasicTensor<T>&);                                           \
  template BasicTensor<T> log(const BasicTensor<T>&);                                           \
  template BasicTensor<T> sqrt(const BasicTensor<T>&);                                          \
  template BasicTensor<T> square(const BasicTensor<T>&);                                        \
  template BasicTensor<T> pow_scalar(const BasicTensor<T>&, T);                                 \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                       \
  template BasicTensor<T> log_softmax(const BasicTensor<T>&);                                   \
  template BasicTensor<T> global_avg_pool(const BasicTensor<T>&);                               \
  template BasicTensor<T> avg_pool2d(const BasicTensor<T>&, std::size_t);                       \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                \
  template BasicTensor<T> flatten(const BasicTensor<T>&);                                       \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);              \
  template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);  \
  template BasicTensor<T> take(const BasicTensor<T>&, const std::vector<std::size_t>&);         \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                           \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                          \
  template BasicTensor<T> sum(const BasicTensor<T>&, const std::vector<std::size_t>&);          \
  template BasicTensor<T> mean(const BasicTensor<T>&, const std::vector<std::size_t>&);         \
  template BasicTensor<T> l2_norm(const BasicTensor<T>&, std::size_t);                          \
  template BasicTensor<T> pairwise_distance(const BasicTensor<T>&);

CFNET_INSTANTIATE(float)
CFNET_INSTANTIATE(double)

#undef CFNET_INSTANTIATE

}  // namespace cfnet::nd
