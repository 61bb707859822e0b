#pragma once

// Slow, obviously-correct reference implementations used as test oracles.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <vector>

#include "percept/layers.hpp"

namespace oracles {

// Quadruple-nested-loop cross-correlation, double accumulation starting from
// the bias, taps in (channel, ky, kx) order.
inline percept::Tensor reference_conv(const percept::Tensor& x, const percept::Tensor& k, const percept::Tensor& b,
                                      const percept::layer::Conv2D& spec) {
  const auto g = percept::conv_geometry(spec, x.dim(1), x.dim(2), x.dim(3));
  percept::Tensor y(percept::Shape{x.dim(0), g.filters, g.out_h, g.out_w});
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t f = 0; f < g.filters; ++f)
      for (std::size_t oy = 0; oy < g.out_h; ++oy)
        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
          double acc = b[f];
          for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
              for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad_top);
                const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad_left);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(g.height) ||
                    ix >= static_cast<std::ptrdiff_t>(g.width))
                  continue;
                acc += static_cast<double>(k.at(f, c, ky, kx)) *
                       static_cast<double>(x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)));
              }
          y.at(n, f, oy, ox) = static_cast<float>(acc);
        }
  return y;
}

// One-sided |DFT|^2 by direct summation.
inline std::vector<double> naive_power(const std::vector<double>& x) {
  const std::size_t N = x.size();
  std::vector<double> p(N / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    std::complex<double> s = 0;
    for (std::size_t n = 0; n < N; ++n) s += x[n] * std::polar(1.0, -2 * std::numbers::pi * double(k * n) / double(N));
    p[k] = std::norm(s);
  }
  return p;
}

// Orthonormal DCT-II coefficient k straight from the definition, in long double.
inline double direct_dct2(const std::vector<double>& v, std::size_t k) {
  const std::size_t N = v.size();
  long double s = 0;
  for (std::size_t n = 0; n < N; ++n)
    s += v[n] * std::cos(std::numbers::pi_v<long double> * k * (2 * n + 1) / (2.0L * N));
  const long double scale = k == 0 ? std::sqrt(1.0L / N) : std::sqrt(2.0L / N);
  return static_cast<double>(s * scale);
}

}  // namespace oracles
