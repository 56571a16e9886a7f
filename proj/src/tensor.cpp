#include "chaneq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace chaneq {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_elements(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_elements(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_elements(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return vector(std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_to_string(shape_));
  }
  return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_elements(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                     shape_to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::scaled(double alpha) const {
  Tensor out = *this;
  for (auto& v : out.data_) v *= alpha;
  return out;
}

const char* to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::Linear: return "linear";
    case ActivationKind::ReLU: return "relu";
    case ActivationKind::PReLU: return "prelu";
    case ActivationKind::ReLU6: return "relu6";
  }
  return "?";
}

ActivationKind activation_kind_from_string(const std::string& name) {
  if (name == "linear") return ActivationKind::Linear;
  if (name == "relu") return ActivationKind::ReLU;
  if (name == "prelu") return ActivationKind::PReLU;
  if (name == "relu6") return ActivationKind::ReLU6;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

const char* to_string(Padding padding) { return padding == Padding::Same ? "same" : "valid"; }

Padding padding_from_string(const std::string& name) {
  if (name == "same") return Padding::Same;
  if (name == "valid") return Padding::Valid;
  throw std::invalid_argument("unknown padding '" + name + "'");
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (padding == Padding::Same) return (in + stride - 1) / stride;
  if (kernel > in) {
    throw ShapeError("kernel extent " + std::to_string(kernel) + " exceeds input extent " +
                     std::to_string(in) + " with valid padding");
  }
  return (in - kernel) / stride + 1;
}

namespace {

// Leading zero padding for "same" mode; extra padding goes to the trailing edge.
std::size_t leading_pad(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                        Padding padding) {
  if (padding == Padding::Valid) return 0;
  const std::ptrdiff_t needed = static_cast<std::ptrdiff_t>((out - 1) * stride + kernel) -
                                static_cast<std::ptrdiff_t>(in);
  return needed > 0 ? static_cast<std::size_t>(needed) / 2 : 0;
}

}  // namespace

double mean_valid_taps(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding) {
  const std::size_t out = conv_output_extent(in, kernel, stride, padding);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(leading_pad(in, out, kernel, stride, padding));
  std::size_t taps = 0;
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(o * stride + k) - pad;
      if (i >= 0 && i < static_cast<std::ptrdiff_t>(in)) ++taps;
    }
  }
  return static_cast<double>(taps) / static_cast<double>(out);
}

namespace {

void require_feature_map(const Tensor& t, const char* what) {
  if (t.rank() != 4) {
    throw ShapeError(std::string(what) + " must be rank 4 (N, H, W, C), got " +
                     shape_to_string(t.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Stride stride,
              Padding padding) {
  require_feature_map(input, "conv2d input");
  if (kernel.rank() != 4) {
    throw ShapeError("conv2d kernel must be rank 4 (kh, kw, c_in, c_out), got " +
                     shape_to_string(kernel.shape()));
  }
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2), cin = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cout = kernel.dim(3);
  if (kernel.dim(2) != cin) {
    throw ShapeError("conv2d c_in mismatch: input has " + std::to_string(cin) +
                     " channels, kernel expects " + std::to_string(kernel.dim(2)));
  }
  if (bias.size() != cout) {
    throw ShapeError("conv2d c_out mismatch: bias has " + std::to_string(bias.size()) +
                     " entries, kernel produces " + std::to_string(cout));
  }
  const std::size_t oh = conv_output_extent(h, kh, stride.h, padding);
  const std::size_t ow = conv_output_extent(w, kw, stride.w, padding);
  const std::size_t pt = leading_pad(h, oh, kh, stride.h, padding);
  const std::size_t pl = leading_pad(w, ow, kw, stride.w, padding);

  Tensor out({n, oh, ow, cout});
  const auto x = input.data();
  const auto k = kernel.data();
  auto y = out.data();
  std::vector<double> acc(cout);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride.h + ky) -
                                    static_cast<std::ptrdiff_t>(pt);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride.w + kx) -
                                      static_cast<std::ptrdiff_t>(pl);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const double* xp = &x[((b * h + iy) * w + ix) * cin];
            const double* kp = &k[(ky * kw + kx) * cin * cout];
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const double xv = xp[ci];
              const double* krow = kp + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) acc[co] += xv * krow[co];
            }
          }
        }
        double* yp = &y[((b * oh + oy) * ow + ox) * cout];
        for (std::size_t co = 0; co < cout; ++co) yp[co] = acc[co] + bias[co];
      }
    }
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        Stride stride, Padding padding) {
  require_feature_map(input, "depthwise_conv2d input");
  if (!(kernel.rank() == 3 || (kernel.rank() == 4 && kernel.dim(3) == 1))) {
    throw ShapeError("depthwise kernel must be (kh, kw, c, 1) or (kh, kw, c), got " +
                     shape_to_string(kernel.shape()));
  }
  const std::size_t n = input.dim(0), h = input.dim(1), w = input.dim(2), c = input.dim(3);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  if (kernel.dim(2) != c) {
    throw ShapeError("depthwise channel mismatch: input has " + std::to_string(c) +
                     " channels, kernel has " + std::to_string(kernel.dim(2)));
  }
  if (bias.size() != c) {
    throw ShapeError("depthwise channel mismatch: bias has " + std::to_string(bias.size()) +
                     " entries, expected " + std::to_string(c));
  }
  const std::size_t oh = conv_output_extent(h, kh, stride.h, padding);
  const std::size_t ow = conv_output_extent(w, kw, stride.w, padding);
  const std::size_t pt = leading_pad(h, oh, kh, stride.h, padding);
  const std::size_t pl = leading_pad(w, ow, kw, stride.w, padding);

  Tensor out({n, oh, ow, c});
  const auto x = input.data();
  const auto k = kernel.data();
  auto y = out.data();
  std::vector<double> acc(c);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride.h + ky) -
                                    static_cast<std::ptrdiff_t>(pt);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride.w + kx) -
                                      static_cast<std::ptrdiff_t>(pl);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const double* xp = &x[((b * h + iy) * w + ix) * c];
            const double* kp = &k[(ky * kw + kx) * c];
            for (std::size_t ci = 0; ci < c; ++ci) acc[ci] += xp[ci] * kp[ci];
          }
        }
        double* yp = &y[((b * oh + oy) * ow + ox) * c];
        for (std::size_t ci = 0; ci < c; ++ci) yp[ci] = acc[ci] + bias[ci];
      }
    }
  }
  return out;
}

double activate(double v, const Activation& activation, std::size_t channel) {
  switch (activation.kind) {
    case ActivationKind::Linear: return v;
    case ActivationKind::ReLU: return v > 0.0 ? v : 0.0;
    case ActivationKind::ReLU6: return std::clamp(v, 0.0, kRelu6Ceiling);
    case ActivationKind::PReLU: {
      const auto& s = activation.slopes;
      const double slope = s.size() == 1 ? s[0] : s[channel];
      return v >= 0.0 ? v : slope * v;
    }
  }
  return v;
}

Tensor apply_activation(const Tensor& x, const Activation& activation) {
  if (activation.kind == ActivationKind::Linear) return x;
  const std::size_t c = x.channels();
  if (activation.kind == ActivationKind::PReLU) {
    const auto ns = activation.slopes.size();
    if (ns != 1 && ns != c) {
      throw ShapeError("PReLU slope count " + std::to_string(ns) + " does not match " +
                       std::to_string(c) + " channels");
    }
  }
  Tensor out = x;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = activate(d[i], activation, i % c);
  return out;
}

Tensor add(std::span<const Tensor> operands) {
  if (operands.empty()) throw ShapeError("add requires at least one operand");
  Tensor out = operands[0];
  auto d = out.data();
  for (std::size_t k = 1; k < operands.size(); ++k) {
    if (operands[k].shape() != out.shape()) {
      throw ShapeError("add operand " + std::to_string(k) + " has shape " +
                       shape_to_string(operands[k].shape()) + ", expected " +
                       shape_to_string(out.shape()));
    }
    const auto s = operands[k].data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor> operands) {
  if (operands.empty()) throw ShapeError("concat requires at least one operand");
  for (const auto& t : operands) require_feature_map(t, "concat operand");
  const Shape& first = operands[0].shape();
  std::size_t total = 0;
  for (std::size_t k = 0; k < operands.size(); ++k) {
    const Shape& s = operands[k].shape();
    for (std::size_t a = 0; a < 3; ++a) {
      if (s[a] != first[a]) {
        throw ShapeError("concat operand " + std::to_string(k) + " axis " + std::to_string(a) +
                         " is " + std::to_string(s[a]) + ", expected " +
                         std::to_string(first[a]));
      }
    }
    total += s[3];
  }
  const std::size_t pixels = first[0] * first[1] * first[2];
  Tensor out({first[0], first[1], first[2], total});
  auto d = out.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::size_t offset = 0;
    for (const auto& t : operands) {
      const std::size_t c = t.channels();
      const auto s = t.data();
      std::copy_n(&s[p * c], c, &d[p * total + offset]);
      offset += c;
    }
  }
  return out;
}

std::vector<ChannelStats> channel_stats(const Tensor& x) {
  if (x.empty()) throw ShapeError("channel_stats of an empty tensor");
  const std::size_t c = x.channels();
  std::vector<ChannelStats> stats(c);
  const auto d = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    stats[ch].min = d[ch];
    stats[ch].max = d[ch];
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto& s = stats[i % c];
    const double v = d[i];
    s.min = std::min(s.min, v);
    s.max = std::max(s.max, v);
    s.energy += v * v;
  }
  return stats;
}

}  // namespace chaneq
