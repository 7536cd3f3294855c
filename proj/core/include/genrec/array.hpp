#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace genrec {

// Dense row-major array of doubles. Copies share the underlying buffer;
// by convention a buffer is only written while the array is being built,
// so shared arrays behave as immutable values.
class Array {
 public:
  Array() = default;

  explicit Array(std::vector<int> shape);
  Array(std::vector<int> shape, std::vector<double> data);

  static Array scalar(double v);
  static Array zeros(std::vector<int> shape) { return Array(std::move(shape)); }
  static Array full(std::vector<int> shape, double v);

  bool empty() const { return data_ == nullptr; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  // 2-D accessors; a 1-D array of length n is treated as one row of n.
  int rows() const {
    if (shape_.size() == 1) return 1;
    check_2d();
    return shape_[0];
  }
  int cols() const {
    if (shape_.size() == 1) return shape_[0];
    check_2d();
    return shape_[1];
  }
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  const std::vector<int>& shape() const { return shape_; }
  bool same_shape(const Array& o) const { return shape_ == o.shape_; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double& at(int i, int j) { return (*data_)[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const { return (*data_)[static_cast<size_t>(i) * cols() + j]; }

  // Value of a single-element array.
  double item() const;

  bool all_finite() const;
  std::string shape_str() const;

 private:
  void check_2d() const {
    if (shape_.size() != 2) throw std::invalid_argument("array is not 1-D or 2-D");
  }

 public:

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

int64_t shape_size(const std::vector<int>& shape);

// Throws std::invalid_argument with the given message when cond is false.
// Prefer GENREC_REQUIRE in hot paths: it builds the message lazily.
void require(bool cond, const std::string& msg);
[[noreturn]] void fail(const std::string& msg);

#define GENREC_REQUIRE(cond, msg_expr) \
  do {                                 \
    if (!(cond)) ::genrec::fail(msg_expr); \
  } while (0)

}  // namespace genrec
