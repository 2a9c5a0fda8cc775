#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace snf {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);

// Cache-line aligned storage. Eigen kernels peel differently depending on
// buffer alignment, which changes summation order; a fixed alignment keeps
// results independent of heap layout (and hence of thread count).
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};
using AlignedVector = std::vector<double, AlignedAllocator<double>>;
std::string shape_str(const Shape& shape);

// Dense row-major float64 array. Rank 0 is a scalar; most numerical code in
// this project works with rank-2 tensors (rows x cols).
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor(Shape{rows, cols}, std::move(data));
  }
  static Tensor row(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor(Shape{1, n}, std::move(data));
  }
  static Tensor column(std::vector<double> data) {
    const std::size_t n = data.size();
    return Tensor(Shape{n, 1}, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  // Rank-2 accessors. Scalars report 1 x 1.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    if (shape_.size() > 2) rank_error("rows()");
    return 1;
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    if (shape_.size() > 2) rank_error("cols()");
    return 1;
  }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  std::vector<double> vec() const { return {data_.begin(), data_.end()}; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  [[noreturn]] void rank_error(const char* what) const;
  Shape shape_;
  AlignedVector data_;
};

}  // namespace snf
