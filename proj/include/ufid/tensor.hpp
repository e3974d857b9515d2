#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace ufid {

using Shape = std::vector<std::size_t>;

// Cache-line aligned storage. Vectorized kernels peel a different number of
// leading elements depending on the buffer address, which changes the
// summation order; a fixed alignment keeps results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Every activation, parameter and gradient
// in the library lives in one of these.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  // Convenience for tests and small fixtures.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const;
  void fill(double value);
  bool all_finite() const;

  // this += scale * other (shapes must match).
  void add_scaled(const Tensor& other, double scale = 1.0);

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_string() const { return to_string(shape_); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  AlignedBuffer data_;
};

// Throws DimensionError unless `t` has exactly `expected_rank` axes.
void expect_rank(const Tensor& t, std::size_t expected_rank, const char* what);

}  // namespace ufid
