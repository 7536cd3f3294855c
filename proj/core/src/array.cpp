#include "genrec/array.hpp"

#include <cmath>
#include <sstream>

namespace genrec {

int64_t shape_size(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("array extents must be positive");
    n *= d;
  }
  return n;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Array::Array(std::vector<int> shape) : shape_(std::move(shape)) {
  data_ = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_size(shape_)), 0.0);
}

Array::Array(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_size(shape_) != static_cast<int64_t>(data.size()))
    throw std::invalid_argument("array data length does not match shape");
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Array Array::scalar(double v) { return Array({1}, {v}); }

Array Array::full(std::vector<int> shape, double v) {
  Array a(std::move(shape));
  for (int64_t i = 0; i < a.size(); ++i) a.at(i) = v;
  return a;
}

double Array::item() const {
  require(size() == 1, "item(): array has " + std::to_string(size()) + " elements");
  return (*data_)[0];
}

bool Array::all_finite() const {
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

std::string Array::shape_str() const {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
  os << ")";
  return os.str();
}

}  // namespace genrec
