#pragma once

// Reverse-mode differentiation over Tensor values.
//
// A Tape records every operation as a node holding its forward value and a
// closure that pushes the node's gradient to its inputs. Parameters live in
// a ParamStore; binding one onto a tape creates a leaf that reads the stored
// tensor directly and accumulates into the store's gradient on backward.

#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "diffwave/error.hpp"
#include "diffwave/tensor.hpp"

namespace diffwave {

template <class Real>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
  };

  ParamStore() = default;
  ParamStore(const ParamStore& o) { *this = o; }
  ParamStore& operator=(const ParamStore& o) {
    if (this == &o) return *this;
    entries_ = o.entries_;
    index_ = o.index_;
    return *this;
  }
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Tensor<Real>& add(const std::string& name, Tensor<Real> value) {
    if (index_.count(name)) fail(ErrorKind::Config, "param store: duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    Tensor<Real> g = Tensor<Real>::zeros_like(value);
    entries_.push_back(Entry{name, std::move(value), std::move(g)});
    return entries_.back().value;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) { return entries_[lookup(name)]; }
  const Entry& entry(const std::string& name) const { return entries_[lookup(name)]; }
  Tensor<Real>& value(const std::string& name) { return entry(name).value; }
  const Tensor<Real>& value(const std::string& name) const { return entry(name).value; }
  Tensor<Real>& grad(const std::string& name) { return entry(name).grad; }
  const Tensor<Real>& grad(const std::string& name) const { return entry(name).grad; }

  std::deque<Entry>& entries() { return entries_; }
  const std::deque<Entry>& entries() const { return entries_; }

  void zero_grad() {
    for (auto& e : entries_) e.grad.fill(Real(0));
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::Config, "param store: unknown parameter '" + name + "'");
    return it->second;
  }

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class Real>
class Tape;

template <class Real>
struct Var {
  Tape<Real>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<Real>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <class Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<Real>& out_grad)>;

  /// With record = false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<Real> constant(Tensor<Real> value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  Var<Real> param(ParamStore<Real>& store, const std::string& name) {
    auto& e = store.entry(name);
    Node n{{}, &e.value, {}, nullptr, record_};
    if (record_) {
      Tensor<Real>* g = &e.grad;
      n.backward = [g](Tape&, const Tensor<Real>& og) { *g += og; };
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Tensor<Real>& value(Var<Real> v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var<Real> v) const { return nodes_.at(v.id).requires_grad; }

  /// Appends a computed node. `backward` is dropped when no input needs grad.
  Var<Real> push(Tensor<Real> value, const std::vector<Var<Real>>& inputs, Backward backward) {
    bool rg = false;
    if (record_)
      for (auto in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
    nodes_.push_back(Node{std::move(value), nullptr, {}, rg ? std::move(backward) : nullptr, rg});
    return {this, nodes_.size() - 1};
  }

  /// Gradient buffer of an input during backward; nullptr when it needs none.
  Tensor<Real>* grad_of(Var<Real> v) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !value(v).empty()) n.grad = Tensor<Real>(value(v).shape());
    return &n.grad;
  }

  /// Reverse sweep from a scalar node; parameter gradients accumulate into their store.
  void backward(Var<Real> loss) {
    require(record_, "backward: tape was created without recording");
    if (value(loss).size() != 1)
      fail(ErrorKind::Config, "backward: loss must be a scalar, got shape " + shape_str(value(loss).shape()));
    for (auto& n : nodes_) n.grad = Tensor<Real>();
    if (!nodes_[loss.id].requires_grad) return;
    nodes_[loss.id].grad = Tensor<Real>(value(loss).shape(), Real(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      // The closure may allocate input grads, which never moves this node.
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<Real> value;
    const Tensor<Real>* external;
    Tensor<Real> grad;
    Backward backward;
    bool requires_grad;
  };

  bool record_;
  std::deque<Node> nodes_;
};

/// Accumulates gradients of `loss` into every parameter reachable from it.
template <class Real>
void grad(Var<Real> loss) {
  loss.tape->backward(loss);
}

namespace ops {

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MatMap = Eigen::Map<RowMat<Real>>;
template <class Real>
using ConstMatMap = Eigen::Map<const RowMat<Real>>;

namespace detail {

template <class Real>
void same_shape(Var<Real> a, Var<Real> b, const char* op) {
  if (a.shape() != b.shape())
    fail(ErrorKind::Config, std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class Real, class F, class DF>
Var<Real> unary(Var<Real> x, F f, DF df) {
  const auto& xv = x.value();
  Tensor<Real> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return x.tape->push(std::move(out), {x}, [x, df](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& xv = tp.value(x);
    auto* gx = tp.grad_of(x);
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += g[i] * df(xv[i]);
  });
}

template <class Real>
Real sigmoid(Real v) {
  return Real(1) / (Real(1) + std::exp(-v));
}

}  // namespace detail

template <class Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
  detail::same_shape(a, b, "add");
  Tensor<Real> out = a.value();
  out += b.value();
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    if (auto* ga = tp.grad_of(a)) *ga += g;
    if (auto* gb = tp.grad_of(b)) *gb += g;
  });
}

template <class Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
  detail::same_shape(a, b, "sub");
  Tensor<Real> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    if (auto* ga = tp.grad_of(a)) *ga += g;
    if (auto* gb = tp.grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

template <class Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
  detail::same_shape(a, b, "mul");
  const auto& av = a.value();
  const auto& bv = b.value();
  Tensor<Real> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& av = tp.value(a);
    const auto& bv = tp.value(b);
    if (auto* ga = tp.grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = tp.grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

template <class Real>
Var<Real> scale(Var<Real> a, Real s) {
  Tensor<Real> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return a.tape->push(std::move(out), {a}, [a, s](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* ga = tp.grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

template <class Real>
Var<Real> relu(Var<Real> x) {
  return detail::unary(x, [](Real v) { return v > 0 ? v : Real(0); },
                       [](Real v) { return v > 0 ? Real(1) : Real(0); });
}

template <class Real>
Var<Real> leaky_relu(Var<Real> x, Real slope) {
  return detail::unary(x, [slope](Real v) { return v > 0 ? v : slope * v; },
                       [slope](Real v) { return v > 0 ? Real(1) : slope; });
}

/// x * sigmoid(x)
template <class Real>
Var<Real> silu(Var<Real> x) {
  return detail::unary(x, [](Real v) { return v * detail::sigmoid(v); },
                       [](Real v) {
                         const Real s = detail::sigmoid(v);
                         return s * (Real(1) + v * (Real(1) - s));
                       });
}

template <class Real>
Var<Real> tanh(Var<Real> x) {
  return detail::unary(x, [](Real v) { return std::tanh(v); },
                       [](Real v) {
                         const Real t = std::tanh(v);
                         return Real(1) - t * t;
                       });
}

template <class Real>
Var<Real> sigmoid(Var<Real> x) {
  return detail::unary(x, [](Real v) { return detail::sigmoid(v); },
                       [](Real v) {
                         const Real s = detail::sigmoid(v);
                         return s * (Real(1) - s);
                       });
}

/// Sum of all elements, as a scalar of shape [1].
template <class Real>
Var<Real> sum(Var<Real> x) {
  Real s = 0;
  for (Real v : x.value().vec()) s += v;
  return x.tape->push(Tensor<Real>({1}, s), {x}, [x](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gx = tp.grad_of(x);
    for (auto& v : gx->vec()) v += g[0];
  });
}

template <class Real>
Var<Real> reshape(Var<Real> x, Shape shape) {
  Tensor<Real> out = x.value().reshaped(std::move(shape));
  return x.tape->push(std::move(out), {x}, [x](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gx = tp.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

/// out = x W^T + b for x [B, in], W [out, in], optional b [out].
template <class Real>
Var<Real> affine(Var<Real> x, Var<Real> w, const std::type_identity_t<Var<Real>>* b = nullptr) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 2 && wv.rank() == 2 && xv.dim(1) == wv.dim(1),
          "affine: input " + shape_str(xv.shape()) + " vs weight " + shape_str(wv.shape()));
  const std::size_t B = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
  Tensor<Real> y({B, out});
  MatMap<Real> Y(y.data(), B, out);
  Y.noalias() = ConstMatMap<Real>(xv.data(), B, in) * ConstMatMap<Real>(wv.data(), out, in).transpose();
  Var<Real> bias{};
  if (b) {
    const auto& bv = b->value();
    require(bv.size() == out, "affine: bias size mismatch");
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t o = 0; o < out; ++o) Y(i, o) += bv[o];
    bias = *b;
  }
  const bool has_bias = b != nullptr;
  std::vector<Var<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return x.tape->push(std::move(y), inputs,
                      [x, w, bias, has_bias, B, in, out](Tape<Real>& tp, const Tensor<Real>& g) {
                        ConstMatMap<Real> G(g.data(), B, out);
                        if (auto* gx = tp.grad_of(x))
                          MatMap<Real>(gx->data(), B, in).noalias() +=
                              G * ConstMatMap<Real>(tp.value(w).data(), out, in);
                        if (auto* gw = tp.grad_of(w))
                          MatMap<Real>(gw->data(), out, in).noalias() +=
                              G.transpose() * ConstMatMap<Real>(tp.value(x).data(), B, in);
                        if (has_bias) {
                          if (auto* gb = tp.grad_of(bias))
                            for (std::size_t i = 0; i < B; ++i)
                              for (std::size_t o = 0; o < out; ++o) (*gb)[o] += G(i, o);
                        }
                      });
}

/// Non-causal dilated 1-D convolution: x [B, Cin, L], w [Cout, Cin, k] with k
/// odd, zero padding of dilation*(k-1)/2 on both sides, output [B, Cout, L].
template <class Real>
Var<Real> conv1d(Var<Real> x, Var<Real> w, const std::type_identity_t<Var<Real>>* b, std::size_t dilation) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 3 && wv.rank() == 3, "conv1d: expected [B,C,L] input and [Cout,Cin,k] weight");
  require(xv.dim(1) == wv.dim(1),
          "conv1d: input channels " + std::to_string(xv.dim(1)) + " vs weight " + shape_str(wv.shape()));
  require(wv.dim(2) % 2 == 1, "conv1d: kernel size must be odd");
  require(dilation >= 1, "conv1d: dilation must be >= 1");
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), L = xv.dim(2), Cout = wv.dim(0), k = wv.dim(2);
  const auto L_i = static_cast<std::ptrdiff_t>(L);

  struct TapRange {
    std::ptrdiff_t shift, lo, n;
  };
  auto tap_range = [=](std::size_t j) {
    const std::ptrdiff_t s = (static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(k / 2)) *
                             static_cast<std::ptrdiff_t>(dilation);
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -s);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(L_i, L_i - s);
    return TapRange{s, lo, std::max<std::ptrdiff_t>(0, hi - lo)};
  };
  auto taps = std::make_shared<std::vector<RowMat<Real>>>(k, RowMat<Real>(Cout, Cin));
  for (std::size_t o = 0; o < Cout; ++o)
    for (std::size_t i = 0; i < Cin; ++i)
      for (std::size_t j = 0; j < k; ++j) (*taps)[j](o, i) = wv[(o * Cin + i) * k + j];

  Tensor<Real> y({B, Cout, L});
  for (std::size_t bi = 0; bi < B; ++bi) {
    ConstMatMap<Real> X(xv.data() + bi * Cin * L, Cin, L);
    MatMap<Real> Y(y.data() + bi * Cout * L, Cout, L);
    for (std::size_t j = 0; j < k; ++j) {
      auto r = tap_range(j);
      if (r.n == 0) continue;
      Y.middleCols(r.lo, r.n).noalias() += (*taps)[j] * X.middleCols(r.lo + r.shift, r.n);
    }
  }
  Var<Real> bias{};
  const bool has_bias = b != nullptr;
  if (has_bias) {
    const auto& bv = b->value();
    require(bv.size() == Cout, "conv1d: bias size mismatch");
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t o = 0; o < Cout; ++o) {
        Real* row = y.data() + (bi * Cout + o) * L;
        for (std::size_t l = 0; l < L; ++l) row[l] += bv[o];
      }
    bias = *b;
  }
  std::vector<Var<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return x.tape->push(
      std::move(y), inputs, [=](Tape<Real>& tp, const Tensor<Real>& g) {
        const auto& xv = tp.value(x);
        auto* gx = tp.grad_of(x);
        auto* gw = tp.grad_of(w);
        std::vector<RowMat<Real>> dtaps;
        if (gw) dtaps.assign(k, RowMat<Real>::Zero(Cout, Cin));
        for (std::size_t bi = 0; bi < B; ++bi) {
          ConstMatMap<Real> G(g.data() + bi * Cout * L, Cout, L);
          ConstMatMap<Real> X(xv.data() + bi * Cin * L, Cin, L);
          for (std::size_t j = 0; j < k; ++j) {
            auto r = tap_range(j);
            if (r.n == 0) continue;
            if (gx)
              MatMap<Real>(gx->data() + bi * Cin * L, Cin, L).middleCols(r.lo + r.shift, r.n).noalias() +=
                  (*taps)[j].transpose() * G.middleCols(r.lo, r.n);
            if (gw)
              dtaps[j].noalias() += G.middleCols(r.lo, r.n) * X.middleCols(r.lo + r.shift, r.n).transpose();
          }
        }
        if (gw)
          for (std::size_t o = 0; o < Cout; ++o)
            for (std::size_t i = 0; i < Cin; ++i)
              for (std::size_t j = 0; j < k; ++j) (*gw)[(o * Cin + i) * k + j] += dtaps[j](o, i);
        if (has_bias) {
          if (auto* gb = tp.grad_of(bias))
            for (std::size_t bi = 0; bi < B; ++bi)
              for (std::size_t o = 0; o < Cout; ++o) {
                const Real* row = g.data() + (bi * Cout + o) * L;
                Real s = 0;
                for (std::size_t l = 0; l < L; ++l) s += row[l];
                (*gb)[o] += s;
              }
        }
      });
}

struct ConvTranspose2dGeometry {
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
};

/// Standard transposed 2-D convolution: x [B, Cin, H, W], w [Cin, Cout, kh, kw],
/// optional b [Cout]. Output extent is (H-1)*stride - 2*pad + kernel per axis.
template <class Real>
Var<Real> conv_transpose2d(Var<Real> x, Var<Real> w, const std::type_identity_t<Var<Real>>* b, ConvTranspose2dGeometry geo) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  require(xv.rank() == 4 && wv.rank() == 4, "conv_transpose2d: expected rank-4 input and weight");
  require(xv.dim(1) == wv.dim(0), "conv_transpose2d: channel mismatch " + shape_str(xv.shape()) + " vs " +
                                      shape_str(wv.shape()));
  require(geo.stride_h >= 1 && geo.stride_w >= 1, "conv_transpose2d: stride must be >= 1");
  const std::size_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t Cout = wv.dim(1), KH = wv.dim(2), KW = wv.dim(3);
  const std::ptrdiff_t OH = static_cast<std::ptrdiff_t>((H - 1) * geo.stride_h + KH) - 2 * static_cast<std::ptrdiff_t>(geo.pad_h);
  const std::ptrdiff_t OW = static_cast<std::ptrdiff_t>((W - 1) * geo.stride_w + KW) - 2 * static_cast<std::ptrdiff_t>(geo.pad_w);
  require(OH > 0 && OW > 0, "conv_transpose2d: padding exceeds output extent");
  const auto oh_n = static_cast<std::size_t>(OH), ow_n = static_cast<std::size_t>(OW);

  // Visits every (input, weight, output) triple that contributes.
  auto for_each = [=](auto&& fn) {
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t ci = 0; ci < Cin; ++ci)
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t ih = 0; ih < H; ++ih)
            for (std::size_t kh = 0; kh < KH; ++kh) {
              const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih * geo.stride_h + kh) - static_cast<std::ptrdiff_t>(geo.pad_h);
              if (oh < 0 || oh >= OH) continue;
              for (std::size_t iw = 0; iw < W; ++iw) {
                const std::size_t xi = ((bi * Cin + ci) * H + ih) * W + iw;
                const std::size_t wrow = ((ci * Cout + co) * KH + kh) * KW;
                const std::size_t orow = ((bi * Cout + co) * oh_n + static_cast<std::size_t>(oh)) * ow_n;
                const std::ptrdiff_t ow0 = static_cast<std::ptrdiff_t>(iw * geo.stride_w) - static_cast<std::ptrdiff_t>(geo.pad_w);
                const std::size_t kw_lo = ow0 < 0 ? static_cast<std::size_t>(-ow0) : 0;
                const std::size_t kw_hi = static_cast<std::size_t>(std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(KW), OW - ow0));
                for (std::size_t kw = kw_lo; kw < kw_hi; ++kw)
                  fn(xi, wrow + kw, orow + static_cast<std::size_t>(ow0 + static_cast<std::ptrdiff_t>(kw)));
              }
            }
  };

  Tensor<Real> y({B, Cout, oh_n, ow_n});
  for_each([&](std::size_t xi, std::size_t wi, std::size_t oi) { y[oi] += xv[xi] * wv[wi]; });
  Var<Real> bias{};
  const bool has_bias = b != nullptr;
  if (has_bias) {
    const auto& bv = b->value();
    require(bv.size() == Cout, "conv_transpose2d: bias size mismatch");
    const std::size_t plane = oh_n * ow_n;
    for (std::size_t bi = 0; bi < B; ++bi)
      for (std::size_t co = 0; co < Cout; ++co)
        for (std::size_t p = 0; p < plane; ++p) y[(bi * Cout + co) * plane + p] += bv[co];
    bias = *b;
  }
  std::vector<Var<Real>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return x.tape->push(std::move(y), inputs, [=](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& xv = tp.value(x);
    const auto& wv = tp.value(w);
    auto* gx = tp.grad_of(x);
    auto* gw = tp.grad_of(w);
    if (gx || gw)
      for_each([&](std::size_t xi, std::size_t wi, std::size_t oi) {
        if (gx) (*gx)[xi] += g[oi] * wv[wi];
        if (gw) (*gw)[wi] += g[oi] * xv[xi];
      });
    if (has_bias) {
      if (auto* gb = tp.grad_of(bias)) {
        const std::size_t plane = oh_n * ow_n;
        for (std::size_t bi = 0; bi < B; ++bi)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t p = 0; p < plane; ++p) (*gb)[co] += g[(bi * Cout + co) * plane + p];
      }
    }
  });
}

/// Splits channels of x [B, 2C, L] into halves (a, b) and returns tanh(a) * sigmoid(b).
template <class Real>
Var<Real> gated_tanh(Var<Real> x) {
  const auto& xv = x.value();
  require(xv.rank() == 3, "gated_tanh: expected [B,2C,L]");
  require(xv.dim(1) % 2 == 0, "gated_tanh: channel count must be even, got " + std::to_string(xv.dim(1)));
  const std::size_t B = xv.dim(0), C = xv.dim(1) / 2, L = xv.dim(2);
  using Arr = Eigen::Array<Real, Eigen::Dynamic, 1>;
  using ConstArrMap = Eigen::Map<const Arr>;
  // tanh(a) and sigmoid(b) are kept for the backward pass.
  auto th = std::make_shared<Arr>(B * C * L);
  auto sg = std::make_shared<Arr>(B * C * L);
  const std::size_t n = C * L;
  for (std::size_t bi = 0; bi < B; ++bi) {
    const Real* a = xv.data() + bi * 2 * n;
    th->segment(bi * n, n) = ConstArrMap(a, n).tanh();
    sg->segment(bi * n, n) = ConstArrMap(a + n, n).logistic();
  }
  Tensor<Real> y({B, C, L});
  Eigen::Map<Arr>(y.data(), B * n) = (*th) * (*sg);
  return x.tape->push(std::move(y), {x}, [x, th, sg, B, n](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gx = tp.grad_of(x);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const auto G = ConstArrMap(g.data() + bi * n, n);
      const auto t = th->segment(bi * n, n);
      const auto s = sg->segment(bi * n, n);
      Eigen::Map<Arr>(gx->data() + bi * 2 * n, n) += G * s * (Real(1) - t * t);
      Eigen::Map<Arr>(gx->data() + bi * 2 * n + n, n) += G * t * s * (Real(1) - s);
    }
  });
}

/// x [B, C, L] plus v [B, C] broadcast over length.
template <class Real>
Var<Real> add_over_length(Var<Real> x, Var<Real> v) {
  const auto& xv = x.value();
  const auto& vv = v.value();
  require(xv.rank() == 3 && vv.rank() == 2 && vv.dim(0) == xv.dim(0) && vv.dim(1) == xv.dim(1),
          "add_over_length: " + shape_str(xv.shape()) + " + " + shape_str(vv.shape()));
  const std::size_t BC = xv.dim(0) * xv.dim(1), L = xv.dim(2);
  Tensor<Real> y = xv;
  for (std::size_t r = 0; r < BC; ++r)
    for (std::size_t l = 0; l < L; ++l) y[r * L + l] += vv[r];
  return x.tape->push(std::move(y), {x, v}, [x, v, BC, L](Tape<Real>& tp, const Tensor<Real>& g) {
    if (auto* gx = tp.grad_of(x)) *gx += g;
    if (auto* gv = tp.grad_of(v))
      for (std::size_t r = 0; r < BC; ++r) {
        Real s = 0;
        for (std::size_t l = 0; l < L; ++l) s += g[r * L + l];
        (*gv)[r] += s;
      }
  });
}

/// Keeps the first n entries of the last axis of a rank-3 tensor.
template <class Real>
Var<Real> trim_length(Var<Real> x, std::size_t n) {
  const auto& xv = x.value();
  require(xv.rank() == 3 && xv.dim(2) >= n, "trim_length: cannot trim " + shape_str(xv.shape()) +
                                                 " to " + std::to_string(n));
  const std::size_t R = xv.dim(0) * xv.dim(1), L = xv.dim(2);
  Tensor<Real> y({xv.dim(0), xv.dim(1), n});
  for (std::size_t r = 0; r < R; ++r) std::copy_n(xv.data() + r * L, n, y.data() + r * n);
  return x.tape->push(std::move(y), {x}, [x, R, L, n](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gx = tp.grad_of(x);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t l = 0; l < n; ++l) (*gx)[r * L + l] += g[r * n + l];
  });
}

/// Mean over the last axis: [B, C, L] -> [B, C].
template <class Real>
Var<Real> mean_length(Var<Real> x) {
  const auto& xv = x.value();
  require(xv.rank() == 3, "mean_length: expected rank 3");
  const std::size_t R = xv.dim(0) * xv.dim(1), L = xv.dim(2);
  Tensor<Real> y({xv.dim(0), xv.dim(1)});
  for (std::size_t r = 0; r < R; ++r) {
    Real s = 0;
    for (std::size_t l = 0; l < L; ++l) s += xv[r * L + l];
    y[r] = s / static_cast<Real>(L);
  }
  return x.tape->push(std::move(y), {x}, [x, R, L](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gx = tp.grad_of(x);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t l = 0; l < L; ++l) (*gx)[r * L + l] += g[r] / static_cast<Real>(L);
  });
}

/// Row lookup: table [K, D], labels of length B -> [B, D].
template <class Real>
Var<Real> embedding(Var<Real> table, const std::vector<int>& labels) {
  const auto& tv = table.value();
  require(tv.rank() == 2, "embedding: table must be rank 2");
  const std::size_t K = tv.dim(0), D = tv.dim(1);
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      fail(ErrorKind::Config, "embedding: label " + std::to_string(l) + " out of range [0," + std::to_string(K) + ")");
  Tensor<Real> y({labels.size(), D});
  for (std::size_t i = 0; i < labels.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(labels[i]) * D, D, y.data() + i * D);
  return table.tape->push(std::move(y), {table}, [table, labels, D](Tape<Real>& tp, const Tensor<Real>& g) {
    auto* gt = tp.grad_of(table);
    for (std::size_t i = 0; i < labels.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) (*gt)[static_cast<std::size_t>(labels[i]) * D + d] += g[i * D + d];
  });
}

/// Row-wise softmax over the last axis of [B, K].
template <class Real>
Var<Real> softmax(Var<Real> x) {
  const auto& xv = x.value();
  require(xv.rank() == 2, "softmax: expected [B,K]");
  const std::size_t B = xv.dim(0), K = xv.dim(1);
  Tensor<Real> y({B, K});
  for (std::size_t i = 0; i < B; ++i) {
    Real m = xv[i * K];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, xv[i * K + k]);
    Real z = 0;
    for (std::size_t k = 0; k < K; ++k) z += (y[i * K + k] = std::exp(xv[i * K + k] - m));
    for (std::size_t k = 0; k < K; ++k) y[i * K + k] /= z;
  }
  const Var<Real> self{x.tape, x.tape->size()};
  return x.tape->push(std::move(y), {x}, [x, self, B, K](Tape<Real>& tp, const Tensor<Real>& g) {
    const auto& yv = tp.value(self);
    auto* gx = tp.grad_of(x);
    for (std::size_t i = 0; i < B; ++i) {
      Real dot = 0;
      for (std::size_t k = 0; k < K; ++k) dot += g[i * K + k] * yv[i * K + k];
      for (std::size_t k = 0; k < K; ++k) (*gx)[i * K + k] += yv[i * K + k] * (g[i * K + k] - dot);
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label].
template <class Real>
Var<Real> cross_entropy(Var<Real> logits, const std::vector<int>& labels) {
  const auto& xv = logits.value();
  require(xv.rank() == 2 && xv.dim(0) == labels.size(), "cross_entropy: logits/labels mismatch");
  require(!labels.empty(), "cross_entropy: empty batch");
  const std::size_t B = xv.dim(0), K = xv.dim(1);
  auto probs = std::make_shared<std::vector<Real>>(B * K);
  Real loss = 0;
  for (std::size_t i = 0; i < B; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < K, "cross_entropy: label out of range");
    Real m = xv[i * K];
    for (std::size_t k = 1; k < K; ++k) m = std::max(m, xv[i * K + k]);
    Real z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(xv[i * K + k] - m);
    for (std::size_t k = 0; k < K; ++k) (*probs)[i * K + k] = std::exp(xv[i * K + k] - m) / z;
    loss += -(xv[i * K + static_cast<std::size_t>(labels[i])] - m - std::log(z));
  }
  loss /= static_cast<Real>(B);
  return logits.tape->push(Tensor<Real>({1}, loss), {logits},
                           [logits, labels, probs, B, K](Tape<Real>& tp, const Tensor<Real>& g) {
                             auto* gx = tp.grad_of(logits);
                             const Real s = g[0] / static_cast<Real>(B);
                             for (std::size_t i = 0; i < B; ++i)
                               for (std::size_t k = 0; k < K; ++k) {
                                 const Real onehot = static_cast<std::size_t>(labels[i]) == k ? Real(1) : Real(0);
                                 (*gx)[i * K + k] += s * ((*probs)[i * K + k] - onehot);
                               }
                           });
}

/// Squared L2 norm of (pred - target) per example (axis 0), averaged over the batch.
template <class Real>
Var<Real> squared_error(Var<Real> pred, const Tensor<Real>& target) {
  const auto& pv = pred.value();
  pv.check_same(target, "squared_error");
  require(pv.rank() >= 1 && pv.dim(0) > 0, "squared_error: empty batch");
  const std::size_t B = pv.dim(0);
  Real s = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const Real d = pv[i] - target[i];
    s += d * d;
  }
  auto tgt = std::make_shared<Tensor<Real>>(target);
  return pred.tape->push(Tensor<Real>({1}, s / static_cast<Real>(B)), {pred},
                         [pred, tgt, B](Tape<Real>& tp, const Tensor<Real>& g) {
                           const auto& pv = tp.value(pred);
                           auto* gp = tp.grad_of(pred);
                           const Real c = Real(2) * g[0] / static_cast<Real>(B);
                           for (std::size_t i = 0; i < pv.size(); ++i) (*gp)[i] += c * (pv[i] - (*tgt)[i]);
                         });
}

}  // namespace ops
}  // namespace diffwave
