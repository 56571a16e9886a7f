#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace chaneq {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible. The message names the
/// offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_to_string(const Shape& shape);
std::size_t shape_elements(const Shape& shape);

/// Dense row-major tensor of doubles. Feature maps are NHWC, conv kernels
/// are (kh, kw, c_in, c_out), per-channel vectors are rank 1.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::initializer_list<double> values);
  static Tensor vector(std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-4 tensors.
  double& at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }
  double at(std::size_t a, std::size_t b, std::size_t c, std::size_t d) const {
    return data_[((a * shape_[1] + b) * shape_[2] + c) * shape_[3] + d];
  }

  /// Innermost extent; the channel count for NHWC maps and c_out for kernels.
  std::size_t channels() const { return shape_.empty() ? 0 : shape_.back(); }

  Tensor reshaped(Shape shape) const;
  Tensor scaled(double alpha) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

enum class Padding { Valid, Same };

struct Stride {
  std::size_t h = 1;
  std::size_t w = 1;
  bool operator==(const Stride&) const = default;
};

enum class ActivationKind { Linear, ReLU, PReLU, ReLU6 };

/// Activation function. PReLU slopes are either one scalar or one per channel.
struct Activation {
  ActivationKind kind = ActivationKind::Linear;
  std::vector<double> slopes;

  static Activation linear() { return {}; }
  static Activation relu() { return {ActivationKind::ReLU, {}}; }
  static Activation relu6() { return {ActivationKind::ReLU6, {}}; }
  static Activation prelu(std::vector<double> slopes) {
    return {ActivationKind::PReLU, std::move(slopes)};
  }

  /// True when A(a*x) == a*A(x) for every a > 0.
  bool positively_homogeneous() const { return kind != ActivationKind::ReLU6; }

  bool operator==(const Activation&) const = default;
};

inline constexpr double kRelu6Ceiling = 6.0;

const char* to_string(ActivationKind kind);
ActivationKind activation_kind_from_string(const std::string& name);
const char* to_string(Padding padding);
Padding padding_from_string(const std::string& name);

/// Output extent along one spatial axis.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               Padding padding);

/// Average number of kernel taps per output position that land inside the
/// input along one axis; smaller than `kernel` when zero padding is used.
double mean_valid_taps(std::size_t in, std::size_t kernel, std::size_t stride, Padding padding);

/// Standard cross-correlation. kernel is (kh, kw, c_in, c_out), bias has c_out
/// entries. Accumulation order is fixed: kernel row, kernel column, input
/// channel; bias is added last.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Stride stride,
              Padding padding);

/// Per-channel cross-correlation. kernel is (kh, kw, c, 1) or (kh, kw, c).
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                        Stride stride, Padding padding);

Tensor apply_activation(const Tensor& x, const Activation& activation);

/// Scalar form of the activation for channel `channel`.
double activate(double v, const Activation& activation, std::size_t channel);

/// Channel-wise sum; operands must share a shape.
Tensor add(std::span<const Tensor> operands);

/// Concatenation along the channel axis; all other extents must match.
Tensor concat_channels(std::span<const Tensor> operands);

struct ChannelStats {
  double min = 0.0;
  double max = 0.0;
  double energy = 0.0;  ///< sum of squares
};

/// Per-channel min, max and sum of squares over every non-channel axis.
std::vector<ChannelStats> channel_stats(const Tensor& x);

}  // namespace chaneq
