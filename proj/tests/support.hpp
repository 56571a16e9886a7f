#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "chaneq/graph.hpp"
#include "chaneq/model_io.hpp"
#include "chaneq/tensor.hpp"

namespace chaneq::test {

inline Node conv(std::string id, std::vector<std::string> inputs, Tensor kernel, Tensor bias,
                 Activation act = Activation::linear(), Padding padding = Padding::Same,
                 Stride stride = {}) {
  Node n;
  n.id = std::move(id);
  n.op = OpKind::Conv;
  n.inputs = std::move(inputs);
  n.kernel = std::move(kernel);
  n.bias = std::move(bias);
  n.activation = std::move(act);
  n.padding = padding;
  n.stride = stride;
  return n;
}

inline Node depthwise(std::string id, std::vector<std::string> inputs, Tensor kernel, Tensor bias,
                      Activation act = Activation::linear(), Padding padding = Padding::Same) {
  Node n = conv(std::move(id), std::move(inputs), std::move(kernel), std::move(bias), std::move(act),
                padding);
  n.op = OpKind::DepthwiseConv;
  return n;
}

inline Node junction(std::string id, OpKind op, std::vector<std::string> inputs,
                     Activation act = Activation::linear()) {
  Node n;
  n.id = std::move(id);
  n.op = op;
  n.inputs = std::move(inputs);
  n.activation = std::move(act);
  return n;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// max |a - b| / max |a|.
inline double max_rel_dev(const Tensor& a, const Tensor& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(a[i]));
  }
  return den > 0.0 ? num / den : num;
}

/// Direct six-loop convolution with explicit zero padding.
inline Tensor naive_conv(const Tensor& x, const Tensor& k, const Tensor& b, std::size_t stride,
                         bool same) {
  const std::size_t H = x.dim(1), W = x.dim(2), C = x.dim(3);
  const std::size_t KH = k.dim(0), KW = k.dim(1), O = k.dim(3);
  std::size_t OH, OW, pt = 0, pl = 0;
  if (same) {
    OH = (H + stride - 1) / stride;
    OW = (W + stride - 1) / stride;
    const std::size_t ph = std::max<long>(0, static_cast<long>((OH - 1) * stride + KH) - static_cast<long>(H));
    const std::size_t pw = std::max<long>(0, static_cast<long>((OW - 1) * stride + KW) - static_cast<long>(W));
    pt = ph / 2;
    pl = pw / 2;
  } else {
    OH = (H - KH) / stride + 1;
    OW = (W - KW) / stride + 1;
  }
  Tensor y({1, OH, OW, O});
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox)
      for (std::size_t o = 0; o < O; ++o) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < KH; ++ky)
          for (std::size_t kx = 0; kx < KW; ++kx) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pt);
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pl);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
            for (std::size_t c = 0; c < C; ++c)
              acc += x.at(0, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c) * k.at(ky, kx, c, o);
          }
        y.at(0, oy, ox, o) = acc + b[o];
      }
  return y;
}

/// Single-input 1x1 network: input (1, 1, cin) -> layer.
inline InputSpec point_input(std::size_t channels, std::size_t h = 1, std::size_t w = 1) {
  return InputSpec{"input", h, w, channels};
}

inline std::vector<Tensor> constant_samples(const InputSpec& in, std::vector<double> values) {
  std::vector<Tensor> out;
  for (double v : values) out.emplace_back(Shape{1, in.height, in.width, in.channels}, v);
  return out;
}

}  // namespace chaneq::test
