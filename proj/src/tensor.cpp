#include "snf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "snf/errors.hpp"

namespace snf {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_size(shape_) != data_.size()) {
    throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }
}

void Tensor::rank_error(const char* what) const {
  throw ValidationError(std::string(what) + " requires rank <= 2, got " + shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ValidationError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  // x * 0 is 0 for finite x and NaN for Inf/NaN. Four independent partial
  // sums let the compiler vectorize without reassociating.
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  const std::size_t n = data_.size(), n4 = n - n % 4;
  const double* d = data_.data();
  for (std::size_t i = 0; i < n4; i += 4) {
    acc[0] += d[i] * 0.0;
    acc[1] += d[i + 1] * 0.0;
    acc[2] += d[i + 2] * 0.0;
    acc[3] += d[i + 3] * 0.0;
  }
  for (std::size_t i = n4; i < n; ++i) acc[0] += d[i] * 0.0;
  return acc[0] + acc[1] + acc[2] + acc[3] == 0.0;
}

}  // namespace snf
