#pragma once

// Layer kinds, parameter initialization, and forward/backward passes for
// convolution, max-pooling, dense, ReLU, softmax, dropout, batch
// normalization, flatten, and LSTM layers, plus their composition into a
// sequential Network.
//
// Activations carry a leading batch axis. Per-layer input layouts:
//   Conv2D, MaxPool2D      [N, C, H, W]
//   Dense, Softmax         [N, F]
//   BatchNorm              [N, F] or [N, C, H, W]
//   LSTM                   [N, T, F]
//   ReLU, Dropout, Flatten any rank >= 2

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "percept/tensor.hpp"

namespace percept {

enum class Padding { Valid, Same };
enum class Mode { Train, Infer };

namespace layer {

struct Conv2D {
  std::size_t filters = 1;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
  friend bool operator==(const Conv2D&, const Conv2D&) = default;
};

struct MaxPool2D {
  std::size_t pool_h = 2;
  std::size_t pool_w = 2;
  friend bool operator==(const MaxPool2D&, const MaxPool2D&) = default;
};

struct Dense {
  std::size_t units = 1;
  friend bool operator==(const Dense&, const Dense&) = default;
};

struct ReLU {
  friend bool operator==(const ReLU&, const ReLU&) = default;
};

struct Softmax {
  friend bool operator==(const Softmax&, const Softmax&) = default;
};

struct Dropout {
  double rate = 0.5;
  friend bool operator==(const Dropout&, const Dropout&) = default;
};

struct BatchNorm {
  double momentum = 0.9;
  double epsilon = 1e-5;
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

struct LSTM {
  std::size_t units = 1;
  bool return_sequence = false;
  friend bool operator==(const LSTM&, const LSTM&) = default;
};

}  // namespace layer

using LayerSpec = std::variant<layer::Conv2D, layer::MaxPool2D, layer::Dense, layer::ReLU,
                               layer::Softmax, layer::Dropout, layer::BatchNorm,
                               layer::Flatten, layer::LSTM>;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

inline std::string layer_name(const LayerSpec& spec) {
  return std::visit(
      overloaded{
          [](const layer::Conv2D& c) {
            return "Conv2D(" + std::to_string(c.filters) + "," + std::to_string(c.kernel_h) + "x" +
                   std::to_string(c.kernel_w) + ",s" + std::to_string(c.stride) +
                   (c.padding == Padding::Same ? ",same)" : ",valid)");
          },
          [](const layer::MaxPool2D& p) {
            return "MaxPool2D(" + std::to_string(p.pool_h) + "x" + std::to_string(p.pool_w) + ")";
          },
          [](const layer::Dense& d) { return "Dense(" + std::to_string(d.units) + ")"; },
          [](const layer::ReLU&) { return std::string("ReLU"); },
          [](const layer::Softmax&) { return std::string("Softmax"); },
          [](const layer::Dropout& d) { return "Dropout(" + std::to_string(d.rate) + ")"; },
          [](const layer::BatchNorm&) { return std::string("BatchNorm"); },
          [](const layer::Flatten&) { return std::string("Flatten"); },
          [](const layer::LSTM& l) {
            return "LSTM(" + std::to_string(l.units) + (l.return_sequence ? ",seq)" : ")");
          },
      },
      spec);
}

inline void validate_spec(const LayerSpec& spec) {
  std::visit(overloaded{
                 [](const layer::Conv2D& c) {
                   require(c.filters >= 1 && c.kernel_h >= 1 && c.kernel_w >= 1 && c.stride >= 1,
                           ErrorKind::Argument, "Conv2D extents must be >= 1");
                 },
                 [](const layer::MaxPool2D& p) {
                   require(p.pool_h >= 1 && p.pool_w >= 1, ErrorKind::Argument,
                           "MaxPool2D extents must be >= 1");
                 },
                 [](const layer::Dense& d) {
                   require(d.units >= 1, ErrorKind::Argument, "Dense units must be >= 1");
                 },
                 [](const layer::Dropout& d) {
                   require(d.rate > 0.0 && d.rate < 1.0, ErrorKind::Argument,
                           "dropout rate must lie strictly inside (0,1)");
                 },
                 [](const layer::BatchNorm& b) {
                   require(b.epsilon > 0.0, ErrorKind::Argument, "BatchNorm epsilon must be > 0");
                   require(b.momentum >= 0.0 && b.momentum < 1.0, ErrorKind::Argument,
                           "BatchNorm momentum must lie in [0,1)");
                 },
                 [](const layer::LSTM& l) {
                   require(l.units >= 1, ErrorKind::Argument, "LSTM units must be >= 1");
                 },
                 [](const auto&) {},
             },
             spec);
}

// Convolution geometry for one [C,H,W] sample.
struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t filters, kernel_h, kernel_w, stride;
  std::size_t out_h, out_w;
  std::size_t pad_top, pad_left;

  std::size_t patch() const { return channels * kernel_h * kernel_w; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const layer::Conv2D& c, std::size_t channels, std::size_t h,
                                  std::size_t w) {
  ConvGeometry g{channels, h, w, c.filters, c.kernel_h, c.kernel_w, c.stride, 0, 0, 0, 0};
  if (c.padding == Padding::Valid) {
    require(c.kernel_h <= h && c.kernel_w <= w, ErrorKind::Shape,
            "Conv2D kernel " + std::to_string(c.kernel_h) + "x" + std::to_string(c.kernel_w) +
                " larger than input " + std::to_string(h) + "x" + std::to_string(w));
    g.out_h = (h - c.kernel_h) / c.stride + 1;
    g.out_w = (w - c.kernel_w) / c.stride + 1;
  } else {
    g.out_h = (h + c.stride - 1) / c.stride;
    g.out_w = (w + c.stride - 1) / c.stride;
    const std::size_t need_h = (g.out_h - 1) * c.stride + c.kernel_h;
    const std::size_t need_w = (g.out_w - 1) * c.stride + c.kernel_w;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  }
  return g;
}

// Per-sample output shape, or a Shape error when the layer cannot accept `in`.
inline Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
  validate_spec(spec);
  const std::string where = layer_name(spec) + " on input " + in.str();
  return std::visit(
      overloaded{
          [&](const layer::Conv2D& c) {
            require(in.rank() == 3, ErrorKind::Shape, where + ": expected [C,H,W]");
            const auto g = conv_geometry(c, in[0], in[1], in[2]);
            return Shape{c.filters, g.out_h, g.out_w};
          },
          [&](const layer::MaxPool2D& p) {
            require(in.rank() == 3, ErrorKind::Shape, where + ": expected [C,H,W]");
            require(in[1] % p.pool_h == 0 && in[2] % p.pool_w == 0, ErrorKind::Shape,
                    where + ": spatial dims not divisible by the pool size");
            return Shape{in[0], in[1] / p.pool_h, in[2] / p.pool_w};
          },
          [&](const layer::Dense& d) {
            require(in.rank() == 1, ErrorKind::Shape, where + ": expected [F]");
            return Shape{d.units};
          },
          [&](const layer::Softmax&) {
            require(in.rank() == 1, ErrorKind::Shape, where + ": expected [K]");
            return in;
          },
          [&](const layer::BatchNorm&) {
            require(in.rank() == 1 || in.rank() == 3, ErrorKind::Shape,
                    where + ": expected [F] or [C,H,W]");
            return in;
          },
          [&](const layer::Flatten&) { return Shape{in.size()}; },
          [&](const layer::LSTM& l) {
            require(in.rank() == 2, ErrorKind::Shape, where + ": expected [T,F]");
            return l.return_sequence ? Shape{in[0], l.units} : Shape{l.units};
          },
          [&](const auto&) { return in; },
      },
      spec);
}

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> value;
  bool trainable = true;
};

template <typename T>
struct LayerParams {
  std::vector<NamedTensor<T>> tensors;

  const BasicTensor<T>& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    fail(ErrorKind::Shape, "missing parameter tensor '" + name + "'");
  }
  BasicTensor<T>& get(const std::string& name) {
    return const_cast<BasicTensor<T>&>(std::as_const(*this).get(name));
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors)
      if (t.trainable) n += t.value.size();
    return n;
  }
};

enum class Init { HeUniform, GlorotUniform };

namespace detail {

template <typename T>
BasicTensor<T> init_uniform(Prng& prng, const Shape& shape, double limit) {
  return prng_uniform<T>(prng, shape, -limit, limit);
}

}  // namespace detail

// Expected parameter tensors for `spec` with per-sample input `in`.
// Conv/Dense use He-uniform when `init` says so (they feed a ReLU), Glorot
// otherwise. LSTM weights are Glorot with gate order i, f, g, o and forget
// bias 1.
template <typename T>
LayerParams<T> init_layer_params(const LayerSpec& spec, const Shape& in, Init init, Prng& prng) {
  LayerParams<T> p;
  std::visit(
      overloaded{
          [&](const layer::Conv2D& c) {
            const std::size_t fan_in = in[0] * c.kernel_h * c.kernel_w;
            const std::size_t fan_out = c.filters * c.kernel_h * c.kernel_w;
            const double lim = init == Init::HeUniform ? std::sqrt(6.0 / fan_in)
                                                       : std::sqrt(6.0 / (fan_in + fan_out));
            p.tensors.push_back(
                {"kernel", detail::init_uniform<T>(prng, Shape{c.filters, in[0], c.kernel_h, c.kernel_w}, lim)});
            p.tensors.push_back({"bias", BasicTensor<T>(Shape{c.filters})});
          },
          [&](const layer::Dense& d) {
            const std::size_t fan_in = in[0];
            const double lim = init == Init::HeUniform ? std::sqrt(6.0 / fan_in)
                                                       : std::sqrt(6.0 / (fan_in + d.units));
            p.tensors.push_back({"weight", detail::init_uniform<T>(prng, Shape{in[0], d.units}, lim)});
            p.tensors.push_back({"bias", BasicTensor<T>(Shape{d.units})});
          },
          [&](const layer::BatchNorm&) {
            const std::size_t f = in[0];
            p.tensors.push_back({"gamma", BasicTensor<T>(Shape{f}, T(1))});
            p.tensors.push_back({"beta", BasicTensor<T>(Shape{f})});
            p.tensors.push_back({"running_mean", BasicTensor<T>(Shape{f}), false});
            p.tensors.push_back({"running_var", BasicTensor<T>(Shape{f}, T(1)), false});
          },
          [&](const layer::LSTM& l) {
            const std::size_t f = in[1], u = l.units;
            p.tensors.push_back(
                {"input_weight", detail::init_uniform<T>(prng, Shape{f, 4 * u}, std::sqrt(6.0 / (f + 4 * u)))});
            p.tensors.push_back({"recurrent_weight",
                                 detail::init_uniform<T>(prng, Shape{u, 4 * u}, std::sqrt(6.0 / (u + 4 * u)))});
            BasicTensor<T> b(Shape{4 * u});
            for (std::size_t j = u; j < 2 * u; ++j) b[j] = T(1);
            p.tensors.push_back({"bias", std::move(b)});
          },
          [&](const auto&) {},
      },
      spec);
  return p;
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

// out[m x n] with an optional per-row or per-column bias seeding each
// accumulator. Same summation order as gemm().
// cols[(c*kh + ky)*kw + kx][n*P + oy*ow + ox] for the whole batch.
template <typename T>
std::vector<T> im2col(const BasicTensor<T>& x, const ConvGeometry& g) {
  const std::size_t batch = x.dim(0), P = g.out_pixels(), cols_n = batch * P;
  std::vector<T> cols(g.patch() * cols_n, T(0));
  const T* xd = x.data().data();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = cols.data() + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols_n;
        for (std::size_t n = 0; n < batch; ++n) {
          const T* plane = xd + (n * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad_top);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad_left);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              row[n * P + oy * g.out_w + ox] = plane[iy * g.width + ix];
            }
          }
        }
      }
  return cols;
}

template <typename T>
BasicTensor<T> col2im(const std::vector<T>& dcols, const ConvGeometry& g, std::size_t batch) {
  const std::size_t P = g.out_pixels(), cols_n = batch * P;
  std::vector<accum_t> dx(batch * g.channels * g.height * g.width, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = dcols.data() + ((c * g.kernel_h + ky) * g.kernel_w + kx) * cols_n;
        for (std::size_t n = 0; n < batch; ++n) {
          accum_t* plane = dx.data() + (n * g.channels + c) * g.height * g.width;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                            static_cast<std::ptrdiff_t>(g.pad_top);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                              static_cast<std::ptrdiff_t>(g.pad_left);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
              plane[iy * g.width + ix] += row[n * P + oy * g.out_w + ox];
            }
          }
        }
      }
  BasicTensor<T> out(Shape{batch, g.channels, g.height, g.width});
  for (std::size_t i = 0; i < dx.size(); ++i) out[i] = static_cast<T>(dx[i]);
  return out;
}

}  // namespace detail

// Cross-correlation (no kernel flip) plus per-filter bias. Each output value
// accumulates bias, then products in (channel, ky, kx) order, in double.
// If `cols_out` is given it receives the im2col matrix for reuse in backward.
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& kernel,
                              const BasicTensor<T>& bias, const layer::Conv2D& spec,
                              std::vector<T>* cols_out = nullptr) {
  require(x.rank() == 4, ErrorKind::Shape, "conv2d expects [N,C,H,W], got " + x.shape().str());
  require(kernel.shape() == Shape{spec.filters, x.dim(1), spec.kernel_h, spec.kernel_w},
          ErrorKind::Shape, "conv2d kernel shape " + kernel.shape().str() + " inconsistent with input");
  require(bias.shape() == Shape{spec.filters}, ErrorKind::Shape, "conv2d bias shape mismatch");
  const auto g = conv_geometry(spec, x.dim(1), x.dim(2), x.dim(3));
  const std::size_t batch = x.dim(0), P = g.out_pixels(), cols_n = batch * P;
  std::vector<T> cols = detail::im2col(x, g);
  std::vector<T> fm(g.filters * cols_n);
  detail::gemm_bias(kernel.data().data(), cols.data(), fm.data(), g.filters, g.patch(), cols_n,
                    bias.data().data(), static_cast<const T*>(nullptr));
  BasicTensor<T> y(Shape{batch, g.filters, g.out_h, g.out_w});
  for (std::size_t f = 0; f < g.filters; ++f)
    for (std::size_t n = 0; n < batch; ++n)
      std::copy_n(fm.data() + f * cols_n + n * P, P, y.data().data() + (n * g.filters + f) * P);
  if (cols_out) *cols_out = std::move(cols);
  return y;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> input, kernel, bias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& x, const std::vector<T>& cols,
                             const BasicTensor<T>& kernel, const layer::Conv2D& spec,
                             const BasicTensor<T>& dy) {
  const auto g = conv_geometry(spec, x.dim(1), x.dim(2), x.dim(3));
  const std::size_t batch = x.dim(0), P = g.out_pixels(), cols_n = batch * P;
  require(dy.shape() == Shape{batch, g.filters, g.out_h, g.out_w}, ErrorKind::Shape,
          "conv2d upstream gradient shape mismatch");
  std::vector<T> dfm(g.filters * cols_n);
  for (std::size_t f = 0; f < g.filters; ++f)
    for (std::size_t n = 0; n < batch; ++n)
      std::copy_n(dy.data().data() + (n * g.filters + f) * P, P, dfm.data() + f * cols_n + n * P);

  ConvGrads<T> out;
  out.bias = BasicTensor<T>(Shape{g.filters});
  for (std::size_t f = 0; f < g.filters; ++f) {
    accum_t s = 0;
    for (std::size_t j = 0; j < cols_n; ++j) s += dfm[f * cols_n + j];
    out.bias[f] = static_cast<T>(s);
  }
  out.kernel = BasicTensor<T>(kernel.shape());
  const auto cols_t = detail::transpose(cols.data(), g.patch(), cols_n);
  detail::gemm(dfm.data(), cols_t.data(), out.kernel.data().data(), g.filters, cols_n, g.patch());

  const auto kernel_t = detail::transpose(kernel.data().data(), g.filters, g.patch());
  std::vector<T> dcols(g.patch() * cols_n);
  detail::gemm(kernel_t.data(), dfm.data(), dcols.data(), g.patch(), g.filters, cols_n);
  out.input = detail::col2im(dcols, g, batch);
  return out;
}

// ---------------------------------------------------------------------------
// Max pooling (non-overlapping windows, stride = pool size)

template <typename T>
BasicTensor<T> maxpool2d_forward(const BasicTensor<T>& x, const layer::MaxPool2D& spec,
                                 std::vector<std::size_t>* argmax_out = nullptr) {
  require(x.rank() == 4, ErrorKind::Shape, "maxpool expects [N,C,H,W], got " + x.shape().str());
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % spec.pool_h == 0 && W % spec.pool_w == 0, ErrorKind::Shape,
          "maxpool: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
              " not divisible by pool size");
  const std::size_t OH = H / spec.pool_h, OW = W / spec.pool_w;
  BasicTensor<T> y(Shape{N, C, OH, OW});
  std::vector<std::size_t> idx(y.size());
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy)
      for (std::size_t ox = 0; ox < OW; ++ox, ++o) {
        std::size_t best = base + oy * spec.pool_h * W + ox * spec.pool_w;
        for (std::size_t py = 0; py < spec.pool_h; ++py)
          for (std::size_t px = 0; px < spec.pool_w; ++px) {
            const std::size_t i = base + (oy * spec.pool_h + py) * W + ox * spec.pool_w + px;
            if (x[i] > x[best]) best = i;
          }
        y[o] = x[best];
        idx[o] = best;
      }
  }
  if (argmax_out) *argmax_out = std::move(idx);
  return y;
}

template <typename T>
BasicTensor<T> maxpool2d_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                  const BasicTensor<T>& dy) {
  require(dy.size() == argmax.size(), ErrorKind::Shape, "maxpool backward: cache/gradient mismatch");
  BasicTensor<T> dx(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
  return dx;
}

// ---------------------------------------------------------------------------
// Dense

template <typename T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                             const BasicTensor<T>& bias) {
  require(x.rank() == 2 && weight.rank() == 2, ErrorKind::Shape, "dense expects [N,in] input");
  require(x.dim(1) == weight.dim(0), ErrorKind::Shape,
          "dense: input width " + std::to_string(x.dim(1)) + " vs weight rows " +
              std::to_string(weight.dim(0)));
  require(bias.shape() == Shape{weight.dim(1)}, ErrorKind::Shape, "dense bias shape mismatch");
  BasicTensor<T> y(Shape{x.dim(0), weight.dim(1)});
  detail::gemm_bias(x.data().data(), weight.data().data(), y.data().data(), x.dim(0), x.dim(1),
                    weight.dim(1), static_cast<const T*>(nullptr), bias.data().data());
  return y;
}

template <typename T>
struct DenseGrads {
  BasicTensor<T> input, weight, bias;
};

template <typename T>
DenseGrads<T> dense_backward(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                             const BasicTensor<T>& dy) {
  const std::size_t N = x.dim(0), in = x.dim(1), units = weight.dim(1);
  require(dy.shape() == Shape{N, units}, ErrorKind::Shape, "dense upstream gradient shape mismatch");
  DenseGrads<T> g;
  g.weight = BasicTensor<T>(weight.shape());
  const auto xt = detail::transpose(x.data().data(), N, in);
  detail::gemm(xt.data(), dy.data().data(), g.weight.data().data(), in, N, units);
  g.bias = BasicTensor<T>(Shape{units});
  std::vector<accum_t> s(units, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t j = 0; j < units; ++j) s[j] += dy[n * units + j];
  for (std::size_t j = 0; j < units; ++j) g.bias[j] = static_cast<T>(s[j]);
  g.input = BasicTensor<T>(x.shape());
  const auto wt = detail::transpose(weight.data().data(), in, units);
  detail::gemm(dy.data().data(), wt.data(), g.input.data().data(), N, units, in);
  return g;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return map(x, [](T v) { return v > T(0) ? v : T(0); });
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& x, const BasicTensor<T>& dy) {
  return zip(x, dy, [](T v, T g) { return v > T(0) ? g : T(0); });
}

// Softmax over a rank-1 vector or each row of a rank-2 tensor, with
// max-subtraction.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  require(x.rank() == 1 || x.rank() == 2, ErrorKind::Shape, "softmax expects rank 1 or 2");
  const std::size_t K = x.rank() == 1 ? x.dim(0) : x.dim(1);
  const std::size_t rows = x.size() / K;
  BasicTensor<T> y(x.shape());
  std::vector<accum_t> e(K);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * K;
    const T mx = *std::max_element(xr, xr + K);
    accum_t sum = 0;
    for (std::size_t k = 0; k < K; ++k) {
      e[k] = std::exp(static_cast<accum_t>(xr[k]) - static_cast<accum_t>(mx));
      sum += e[k];
    }
    for (std::size_t k = 0; k < K; ++k) y[r * K + k] = static_cast<T>(e[k] / sum);
  }
  return y;
}

// Jacobian-vector product of softmax given its output y.
template <typename T>
BasicTensor<T> softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& dy) {
  require(y.shape() == dy.shape(), ErrorKind::Shape, "softmax backward shape mismatch");
  const std::size_t K = y.shape().dims().back();
  const std::size_t rows = y.size() / K;
  BasicTensor<T> dx(y.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    accum_t dot = 0;
    for (std::size_t k = 0; k < K; ++k)
      dot += static_cast<accum_t>(y[r * K + k]) * static_cast<accum_t>(dy[r * K + k]);
    for (std::size_t k = 0; k < K; ++k)
      dx[r * K + k] = static_cast<T>(y[r * K + k] * (static_cast<accum_t>(dy[r * K + k]) - dot));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Dropout (inverted)

template <typename T>
BasicTensor<T> dropout_mask(const Shape& shape, double rate, Prng& prng) {
  require(rate > 0.0 && rate < 1.0, ErrorKind::Argument, "dropout rate must lie strictly inside (0,1)");
  BasicTensor<T> mask(shape);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (T& m : mask.data()) m = prng.next_double() < rate ? T(0) : keep_scale;
  return mask;
}

template <typename T>
BasicTensor<T> dropout_forward(const BasicTensor<T>& x, double rate, Mode mode, Prng* prng,
                               BasicTensor<T>* mask_out = nullptr) {
  require(rate > 0.0 && rate < 1.0, ErrorKind::Argument, "dropout rate must lie strictly inside (0,1)");
  if (mode == Mode::Infer) return x;
  require(prng != nullptr, ErrorKind::Argument, "train-mode dropout needs a Prng");
  auto mask = dropout_mask<T>(x.shape(), rate, *prng);
  auto y = zip(x, mask, [](T a, T m) { return a * m; });
  if (mask_out) *mask_out = std::move(mask);
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization. Statistics are per feature over the batch for [N,F]
// inputs and per channel over batch and spatial dims for [N,C,H,W] inputs.

struct BatchNormLayout {
  std::size_t batch, features, spatial;
};

inline BatchNormLayout batchnorm_layout(const Shape& s) {
  require(s.rank() == 2 || s.rank() == 4, ErrorKind::Shape,
          "batchnorm expects [N,F] or [N,C,H,W], got " + s.str());
  return {s[0], s[1], s.rank() == 4 ? s[2] * s[3] : 1};
}

template <typename T>
struct BatchNormCache {
  BasicTensor<T> xhat;
  std::vector<accum_t> inv_std;
};

template <typename T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, LayerParams<T>& params,
                                 const layer::BatchNorm& spec, Mode mode,
                                 BatchNormCache<T>* cache = nullptr) {
  const auto L = batchnorm_layout(x.shape());
  const auto& gamma = params.get("gamma");
  const auto& beta = params.get("beta");
  auto& rmean = params.get("running_mean");
  auto& rvar = params.get("running_var");
  require(gamma.size() == L.features, ErrorKind::Shape, "batchnorm parameter width mismatch");
  auto at = [&](std::size_t n, std::size_t f, std::size_t s) { return (n * L.features + f) * L.spatial + s; };

  BasicTensor<T> y(x.shape());
  if (mode == Mode::Infer) {
    for (std::size_t f = 0; f < L.features; ++f) {
      const accum_t inv = 1.0 / std::sqrt(static_cast<accum_t>(rvar[f]) + spec.epsilon);
      for (std::size_t n = 0; n < L.batch; ++n)
        for (std::size_t s = 0; s < L.spatial; ++s) {
          const std::size_t i = at(n, f, s);
          y[i] = static_cast<T>(gamma[f] * ((x[i] - static_cast<accum_t>(rmean[f])) * inv) + beta[f]);
        }
    }
    return y;
  }

  require(L.batch >= 2, ErrorKind::Argument, "train-mode batchnorm needs batch >= 2");
  const accum_t M = static_cast<accum_t>(L.batch * L.spatial);
  BatchNormCache<T> c{BasicTensor<T>(x.shape()), std::vector<accum_t>(L.features)};
  for (std::size_t f = 0; f < L.features; ++f) {
    accum_t sum = 0;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t s = 0; s < L.spatial; ++s) sum += x[at(n, f, s)];
    const accum_t mean = sum / M;
    accum_t sq = 0;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const accum_t d = x[at(n, f, s)] - mean;
        sq += d * d;
      }
    const accum_t var = sq / M;
    const accum_t inv = 1.0 / std::sqrt(var + spec.epsilon);
    c.inv_std[f] = inv;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const std::size_t i = at(n, f, s);
        const accum_t xh = (x[i] - mean) * inv;
        c.xhat[i] = static_cast<T>(xh);
        y[i] = static_cast<T>(gamma[f] * xh + beta[f]);
      }
    rmean[f] = static_cast<T>(spec.momentum * rmean[f] + (1.0 - spec.momentum) * mean);
    rvar[f] = static_cast<T>(spec.momentum * rvar[f] + (1.0 - spec.momentum) * var);
  }
  if (cache) *cache = std::move(c);
  return y;
}

template <typename T>
struct BatchNormGrads {
  BasicTensor<T> input, gamma, beta;
};

// Full batch-statistics gradient:
// dx = gamma * inv_std / M * (M*dy - sum(dy) - xhat * sum(dy*xhat)).
template <typename T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const BasicTensor<T>& gamma,
                                     const BasicTensor<T>& dy) {
  const auto L = batchnorm_layout(dy.shape());
  const accum_t M = static_cast<accum_t>(L.batch * L.spatial);
  auto at = [&](std::size_t n, std::size_t f, std::size_t s) { return (n * L.features + f) * L.spatial + s; };
  BatchNormGrads<T> g{BasicTensor<T>(dy.shape()), BasicTensor<T>(Shape{L.features}),
                      BasicTensor<T>(Shape{L.features})};
  for (std::size_t f = 0; f < L.features; ++f) {
    accum_t sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const std::size_t i = at(n, f, s);
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<accum_t>(dy[i]) * cache.xhat[i];
      }
    g.beta[f] = static_cast<T>(sum_dy);
    g.gamma[f] = static_cast<T>(sum_dy_xhat);
    const accum_t k = gamma[f] * cache.inv_std[f] / M;
    for (std::size_t n = 0; n < L.batch; ++n)
      for (std::size_t s = 0; s < L.spatial; ++s) {
        const std::size_t i = at(n, f, s);
        g.input[i] = static_cast<T>(k * (M * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat));
      }
  }
  return g;
}

// ---------------------------------------------------------------------------
// LSTM. Fused gate layout along the last axis of every weight: [i | f | g | o].

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
struct LstmState {
  BasicTensor<T> h, c;
};

template <typename T>
struct LstmStepCache {
  BasicTensor<T> xh;     // [N, in+units]
  BasicTensor<T> gates;  // [N, 4*units] post-activation
  BasicTensor<T> c_prev, c;
};

namespace detail {

// Stacks input and recurrent weights into one [(in+units), 4*units] matrix.
template <typename T>
BasicTensor<T> stack_lstm_weights(const LayerParams<T>& p) {
  const auto& W = p.get("input_weight");
  const auto& U = p.get("recurrent_weight");
  require(W.dim(1) == U.dim(1) && U.dim(1) == 4 * U.dim(0), ErrorKind::Shape, "LSTM weight shapes inconsistent");
  std::vector<T> wu(W.data().begin(), W.data().end());
  wu.insert(wu.end(), U.data().begin(), U.data().end());
  return BasicTensor<T>(Shape{W.dim(0) + U.dim(0), W.dim(1)}, std::move(wu));
}

template <typename T>
LstmState<T> lstm_step_stacked(const BasicTensor<T>& x_t, const BasicTensor<T>& h_prev,
                               const BasicTensor<T>& c_prev, const BasicTensor<T>& wu,
                               const BasicTensor<T>& bias, LstmStepCache<T>* cache) {
  const std::size_t N = x_t.dim(0), in = x_t.dim(1), u = h_prev.dim(1);
  require(h_prev.shape() == Shape{N, u} && c_prev.shape() == Shape{N, u}, ErrorKind::Shape,
          "LSTM state shape mismatch");
  if (wu.dim(0) != in + u || wu.dim(1) != 4 * u)
    fail(ErrorKind::Shape, "LSTM input width " + std::to_string(in) + " inconsistent with weights");
  BasicTensor<T> xh(Shape{N, in + u});
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(x_t.data().data() + n * in, in, xh.data().data() + n * (in + u));
    std::copy_n(h_prev.data().data() + n * u, u, xh.data().data() + n * (in + u) + in);
  }
  BasicTensor<T> z(Shape{N, 4 * u});
  gemm_bias(xh.data().data(), wu.data().data(), z.data().data(), N, in + u, 4 * u,
            static_cast<const T*>(nullptr), bias.data().data());
  LstmState<T> s{BasicTensor<T>(Shape{N, u}), BasicTensor<T>(Shape{N, u})};
  for (std::size_t n = 0; n < N; ++n) {
    T* zr = z.data().data() + n * 4 * u;
    for (std::size_t j = 0; j < u; ++j) {
      const T i = sigmoid(zr[j]);
      const T f = sigmoid(zr[u + j]);
      const T g = std::tanh(zr[2 * u + j]);
      const T o = sigmoid(zr[3 * u + j]);
      zr[j] = i;
      zr[u + j] = f;
      zr[2 * u + j] = g;
      zr[3 * u + j] = o;
      const T c = f * c_prev[n * u + j] + i * g;
      s.c[n * u + j] = c;
      s.h[n * u + j] = o * std::tanh(c);
    }
  }
  if (cache) *cache = LstmStepCache<T>{std::move(xh), std::move(z), c_prev, s.c};
  return s;
}

}  // namespace detail

// One step of the standard LSTM recurrence:
// i,f,o = sigmoid(x W + h U + b), g = tanh(...), c = f*c_prev + i*g, h = o*tanh(c).
template <typename T>
LstmState<T> lstm_cell_step(const BasicTensor<T>& x_t, const BasicTensor<T>& h_prev,
                            const BasicTensor<T>& c_prev, const LayerParams<T>& params) {
  require(x_t.rank() == 2, ErrorKind::Shape, "lstm_cell_step expects x_t as [N,in]");
  return detail::lstm_step_stacked(x_t, h_prev, c_prev, detail::stack_lstm_weights(params),
                                   params.get("bias"), static_cast<LstmStepCache<T>*>(nullptr));
}

template <typename T>
struct LstmCache {
  std::vector<LstmStepCache<T>> steps;
};

// Runs the recurrence from h0 = c0 = 0 over x [N,T,in].
template <typename T>
BasicTensor<T> lstm_sequence_forward(const BasicTensor<T>& x, const LayerParams<T>& params,
                                     const layer::LSTM& spec, LstmCache<T>* cache = nullptr) {
  require(x.rank() == 3, ErrorKind::Shape, "LSTM expects [N,T,in], got " + x.shape().str());
  const std::size_t N = x.dim(0), T_ = x.dim(1), in = x.dim(2), u = spec.units;
  require(T_ >= 1, ErrorKind::Shape, "LSTM sequence length must be >= 1");
  const auto wu = detail::stack_lstm_weights(params);
  const auto& bias = params.get("bias");
  require(wu.dim(1) == 4 * u, ErrorKind::Shape, "LSTM params do not match units");
  LstmState<T> s{BasicTensor<T>(Shape{N, u}), BasicTensor<T>(Shape{N, u})};
  BasicTensor<T> seq;
  if (spec.return_sequence) seq = BasicTensor<T>(Shape{N, T_, u});
  if (cache) cache->steps.assign(T_, {});
  BasicTensor<T> xt(Shape{N, in});
  for (std::size_t t = 0; t < T_; ++t) {
    for (std::size_t n = 0; n < N; ++n)
      std::copy_n(x.data().data() + (n * T_ + t) * in, in, xt.data().data() + n * in);
    s = detail::lstm_step_stacked(xt, s.h, s.c, wu, bias, cache ? &cache->steps[t] : nullptr);
    if (spec.return_sequence)
      for (std::size_t n = 0; n < N; ++n)
        std::copy_n(s.h.data().data() + n * u, u, seq.data().data() + (n * T_ + t) * u);
  }
  return spec.return_sequence ? seq : s.h;
}

template <typename T>
struct LstmGrads {
  BasicTensor<T> input, input_weight, recurrent_weight, bias;
};

// Backpropagation through all T steps. `dy` is [N,units] (last output) or
// [N,T,units] (full sequence).
template <typename T>
LstmGrads<T> lstm_sequence_backward(const LstmCache<T>& cache, const LayerParams<T>& params,
                                    const layer::LSTM& spec, const Shape& input_shape,
                                    const BasicTensor<T>& dy) {
  const std::size_t N = input_shape[0], T_ = input_shape[1], in = input_shape[2], u = spec.units;
  require(cache.steps.size() == T_, ErrorKind::Argument, "LSTM backward: missing cache");
  require(dy.shape() == (spec.return_sequence ? Shape{N, T_, u} : Shape{N, u}), ErrorKind::Shape,
          "LSTM upstream gradient shape mismatch");
  const auto wu = detail::stack_lstm_weights(params);
  const auto wu_t = detail::transpose(wu.data().data(), in + u, 4 * u);

  std::vector<T> dz_all(T_ * N * 4 * u);
  std::vector<T> xh_all(T_ * N * (in + u));
  BasicTensor<T> dx(input_shape);
  std::vector<T> dh_next(N * u, T(0)), dc_next(N * u, T(0));
  std::vector<T> dxh(N * (in + u));

  for (std::size_t tt = T_; tt-- > 0;) {
    const auto& sc = cache.steps[tt];
    std::copy(sc.xh.data().begin(), sc.xh.data().end(), xh_all.begin() + tt * N * (in + u));
    T* dz = dz_all.data() + tt * N * 4 * u;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < u; ++j) {
        const std::size_t k = n * u + j;
        T dh = dh_next[k];
        if (spec.return_sequence)
          dh += dy[(n * T_ + tt) * u + j];
        else if (tt + 1 == T_)
          dh += dy[k];
        const T* gr = sc.gates.data().data() + n * 4 * u;
        const T i = gr[j], f = gr[u + j], g = gr[2 * u + j], o = gr[3 * u + j];
        const T tc = std::tanh(sc.c[k]);
        const T dc = dc_next[k] + dh * o * (T(1) - tc * tc);
        T* dzr = dz + n * 4 * u;
        dzr[j] = dc * g * i * (T(1) - i);
        dzr[u + j] = dc * sc.c_prev[k] * f * (T(1) - f);
        dzr[2 * u + j] = dc * i * (T(1) - g * g);
        dzr[3 * u + j] = dh * tc * o * (T(1) - o);
        dc_next[k] = dc * f;
      }
    detail::gemm(dz, wu_t.data(), dxh.data(), N, 4 * u, in + u);
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(dxh.data() + n * (in + u), in, dx.data().data() + (n * T_ + tt) * in);
      std::copy_n(dxh.data() + n * (in + u) + in, u, dh_next.data() + n * u);
    }
  }

  const std::size_t rows = T_ * N;
  const auto xh_t = detail::transpose(xh_all.data(), rows, in + u);
  std::vector<T> dwu((in + u) * 4 * u);
  detail::gemm(xh_t.data(), dz_all.data(), dwu.data(), in + u, rows, 4 * u);

  LstmGrads<T> g;
  g.input = std::move(dx);
  g.input_weight = BasicTensor<T>(Shape{in, 4 * u},
                                  std::vector<T>(dwu.begin(), dwu.begin() + in * 4 * u));
  g.recurrent_weight = BasicTensor<T>(Shape{u, 4 * u},
                                      std::vector<T>(dwu.begin() + in * 4 * u, dwu.end()));
  g.bias = BasicTensor<T>(Shape{4 * u});
  std::vector<accum_t> sb(4 * u, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < 4 * u; ++j) sb[j] += dz_all[r * 4 * u + j];
  for (std::size_t j = 0; j < 4 * u; ++j) g.bias[j] = static_cast<T>(sb[j]);
  return g;
}

// ---------------------------------------------------------------------------
// Sequential network

template <typename T>
struct LayerCache {
  BasicTensor<T> input;
  BasicTensor<T> output;
  BasicTensor<T> mask;
  std::vector<T> cols;
  std::vector<std::size_t> argmax;
  BatchNormCache<T> bn;
  LstmCache<T> lstm;
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
};

template <typename T>
struct Gradients {
  // Aligned with Network::params(): one entry per parameter tensor; empty
  // tensors for non-trainable ones.
  std::vector<std::vector<BasicTensor<T>>> params;
  BasicTensor<T> input;
};

template <typename T>
class Network {
 public:
  Network() = default;

  // Builds the network and initializes parameters from `prng`.
  Network(std::vector<LayerSpec> specs, Shape sample_shape, Prng& prng)
      : specs_(std::move(specs)), sample_shape_(std::move(sample_shape)) {
    infer_shapes();
    for (std::size_t l = 0; l < specs_.size(); ++l)
      params_.push_back(init_layer_params<T>(specs_[l], shapes_[l], init_for(l), prng));
  }

  // Builds the network around existing parameters, checking their shapes.
  Network(std::vector<LayerSpec> specs, Shape sample_shape, std::vector<LayerParams<T>> params)
      : specs_(std::move(specs)), sample_shape_(std::move(sample_shape)), params_(std::move(params)) {
    infer_shapes();
    require(params_.size() == specs_.size(), ErrorKind::Shape, "one LayerParams per layer required");
    Prng scratch(0);
    for (std::size_t l = 0; l < specs_.size(); ++l) {
      const auto expect = init_layer_params<T>(specs_[l], shapes_[l], init_for(l), scratch);
      require(expect.tensors.size() == params_[l].tensors.size(), ErrorKind::Shape,
              "layer " + std::to_string(l) + " (" + layer_name(specs_[l]) + "): wrong tensor count");
      for (std::size_t k = 0; k < expect.tensors.size(); ++k) {
        const auto& e = expect.tensors[k];
        const auto& got = params_[l].tensors[k];
        require(e.name == got.name && e.value.shape() == got.value.shape(), ErrorKind::Shape,
                "layer " + std::to_string(l) + " (" + layer_name(specs_[l]) + "): tensor '" + got.name +
                    "' " + got.value.shape().str() + " expected '" + e.name + "' " + e.value.shape().str());
        params_[l].tensors[k].trainable = e.trainable;
      }
    }
  }

  const std::vector<LayerSpec>& specs() const noexcept { return specs_; }
  const Shape& sample_shape() const noexcept { return sample_shape_; }
  const Shape& output_sample_shape() const noexcept { return shapes_.back(); }
  // shapes()[l] is the per-sample input of layer l; the last entry is the output.
  const std::vector<Shape>& shapes() const noexcept { return shapes_; }
  std::vector<LayerParams<T>>& params() noexcept { return params_; }
  const std::vector<LayerParams<T>>& params() const noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.trainable_count();
    return n;
  }

  bool ends_with_softmax() const {
    return !specs_.empty() && std::holds_alternative<layer::Softmax>(specs_.back());
  }

  // Train-mode runs need `prng` when the stack contains dropout. `cache`, when
  // given, receives everything backward() needs.
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Prng* prng = nullptr,
                         ForwardCache<T>* cache = nullptr) {
    require(x.rank() >= 2 && x.shape().tail() == sample_shape_, ErrorKind::Shape,
            "network input " + x.shape().str() + " does not match sample shape " + sample_shape_.str());
    if (cache) cache->layers.assign(specs_.size(), {});
    BasicTensor<T> a = x;
    for (std::size_t l = 0; l < specs_.size(); ++l) {
      LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;
      if (lc) lc->input = a;
      a = forward_layer(l, a, mode, prng, lc);
      if (lc) lc->output = a;
    }
    return a;
  }

  // Inference-mode forward; does not touch parameters.
  BasicTensor<T> predict(const BasicTensor<T>& x) const {
    return const_cast<Network*>(this)->forward(x, Mode::Infer);
  }

  // Backpropagates `dy` (gradient w.r.t. the output of layer end_layer-1)
  // down to the input. end_layer defaults to all layers; pass
  // specs().size()-1 to start below a final softmax fused into the loss.
  Gradients<T> backward(const ForwardCache<T>& cache, const BasicTensor<T>& dy,
                        std::optional<std::size_t> end_layer = std::nullopt) const {
    const std::size_t end = end_layer.value_or(specs_.size());
    require(end <= specs_.size(), ErrorKind::Argument, "backward end layer out of range");
    require(cache.layers.size() == specs_.size(), ErrorKind::Argument,
            "backward needs the cache of a train-mode forward");
    Gradients<T> g;
    g.params.resize(specs_.size());
    for (std::size_t l = 0; l < specs_.size(); ++l)
      g.params[l].resize(params_[l].tensors.size());
    BasicTensor<T> d = dy;
    for (std::size_t l = end; l-- > 0;) d = backward_layer(l, cache.layers[l], d, g.params[l]);
    g.input = std::move(d);
    return g;
  }

  template <typename U>
  Network<U> cast() const {
    std::vector<LayerParams<U>> ps;
    for (const auto& p : params_) {
      LayerParams<U> q;
      for (const auto& t : p.tensors) q.tensors.push_back({t.name, tensor_cast<U>(t.value), t.trainable});
      ps.push_back(std::move(q));
    }
    return Network<U>(specs_, sample_shape_, std::move(ps));
  }

 private:
  void infer_shapes() {
    require(sample_shape_.rank() >= 1, ErrorKind::Shape, "network needs a sample shape");
    shapes_.assign(1, sample_shape_);
    for (const auto& s : specs_) shapes_.push_back(layer_output_shape(s, shapes_.back()));
  }

  // A weight layer feeding ReLU (possibly through BatchNorm/Dropout) gets He init.
  Init init_for(std::size_t l) const {
    for (std::size_t k = l + 1; k < specs_.size(); ++k) {
      if (std::holds_alternative<layer::ReLU>(specs_[k])) return Init::HeUniform;
      if (!std::holds_alternative<layer::BatchNorm>(specs_[k]) &&
          !std::holds_alternative<layer::Dropout>(specs_[k]))
        break;
    }
    return Init::GlorotUniform;
  }

  BasicTensor<T> forward_layer(std::size_t l, const BasicTensor<T>& a, Mode mode, Prng* prng,
                               LayerCache<T>* lc) {
    auto& p = params_[l];
    return std::visit(
        overloaded{
            [&](const layer::Conv2D& c) {
              return conv2d_forward(a, p.get("kernel"), p.get("bias"), c, lc ? &lc->cols : nullptr);
            },
            [&](const layer::MaxPool2D& m) { return maxpool2d_forward(a, m, lc ? &lc->argmax : nullptr); },
            [&](const layer::Dense&) { return dense_forward(a, p.get("weight"), p.get("bias")); },
            [&](const layer::ReLU&) { return relu(a); },
            [&](const layer::Softmax&) { return softmax(a); },
            [&](const layer::Dropout& d) {
              return dropout_forward(a, d.rate, mode, prng, lc ? &lc->mask : nullptr);
            },
            [&](const layer::BatchNorm& b) { return batchnorm_forward(a, p, b, mode, lc ? &lc->bn : nullptr); },
            [&](const layer::Flatten&) { return a.reshaped(Shape{a.dim(0), a.size() / a.dim(0)}); },
            [&](const layer::LSTM& s) { return lstm_sequence_forward(a, p, s, lc ? &lc->lstm : nullptr); },
        },
        specs_[l]);
  }

  BasicTensor<T> backward_layer(std::size_t l, const LayerCache<T>& lc, const BasicTensor<T>& d,
                                std::vector<BasicTensor<T>>& pg) const {
    const auto& p = params_[l];
    require(!lc.input.empty(), ErrorKind::Argument, "backward: missing forward cache for layer " + std::to_string(l));
    return std::visit(
        overloaded{
            [&](const layer::Conv2D& c) {
              auto g = conv2d_backward(lc.input, lc.cols, p.get("kernel"), c, d);
              pg[0] = std::move(g.kernel);
              pg[1] = std::move(g.bias);
              return std::move(g.input);
            },
            [&](const layer::MaxPool2D&) { return maxpool2d_backward(lc.input.shape(), lc.argmax, d); },
            [&](const layer::Dense&) {
              auto g = dense_backward(lc.input, p.get("weight"), d);
              pg[0] = std::move(g.weight);
              pg[1] = std::move(g.bias);
              return std::move(g.input);
            },
            [&](const layer::ReLU&) { return relu_backward(lc.input, d); },
            [&](const layer::Softmax&) { return softmax_backward(lc.output, d); },
            [&](const layer::Dropout&) {
              if (lc.mask.empty()) return d;  // infer-mode cache: identity
              return zip(d, lc.mask, [](T a, T m) { return a * m; });
            },
            [&](const layer::BatchNorm&) {
              require(!lc.bn.xhat.empty(), ErrorKind::Argument, "batchnorm backward needs a train-mode cache");
              auto g = batchnorm_backward(lc.bn, p.get("gamma"), d);
              pg[0] = std::move(g.gamma);
              pg[1] = std::move(g.beta);
              return std::move(g.input);
            },
            [&](const layer::Flatten&) { return d.reshaped(lc.input.shape()); },
            [&](const layer::LSTM& s) {
              auto g = lstm_sequence_backward(lc.lstm, p, s, lc.input.shape(), d);
              pg[0] = std::move(g.input_weight);
              pg[1] = std::move(g.recurrent_weight);
              pg[2] = std::move(g.bias);
              return std::move(g.input);
            },
        },
        specs_[l]);
  }

  std::vector<LayerSpec> specs_;
  Shape sample_shape_;
  std::vector<Shape> shapes_;
  std::vector<LayerParams<T>> params_;
};

}  // namespace percept
