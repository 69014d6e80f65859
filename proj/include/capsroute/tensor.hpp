#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace capsroute {

/// Dense row-major tensor of 64-bit floats. Shapes are explicit and
/// checked; there is no broadcasting beyond scalar-tensor operations.
/// A rank-0 tensor (empty shape) holds a single scalar.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at2(std::size_t i, std::size_t j);
  double at2(std::size_t i, std::size_t j) const;
  double& at3(std::size_t i, std::size_t j, std::size_t k);
  double at3(std::size_t i, std::size_t j, std::size_t k) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  /// Returns a copy with a new shape of equal element count.
  Tensor reshaped(std::vector<std::size_t> new_shape) const;

  void fill(double value);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_string(const std::vector<std::size_t>& shape);

/// Euclidean norm of the whole tensor.
double tensor_norm(const Tensor& t);
double tensor_dot(const Tensor& a, const Tensor& b);
bool bitwise_equal(const Tensor& a, const Tensor& b);

}  // namespace capsroute
