// Dense row-major array type shared by every component.
//
// Tensor<S> is a flat buffer plus a shape; S is float in production code and
// double in the gradient-verification tests. Eigen maps provide the matrix
// views used by the linear-algebra kernels.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevplan {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using EigenMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<EigenMatrix>;
  using ConstMatMap = Eigen::Map<const EigenMatrix>;
  using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
  using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}
  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }
  static Tensor scalar(S value) { return full({1}, value); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& raw() { return data_; }
  const std::vector<S>& raw() const { return data_; }

  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& operator()(int i) { return data_[static_cast<size_t>(i)]; }
  S operator()(int i) const { return data_[static_cast<size_t>(i)]; }
  S& operator()(int i, int j) { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  S operator()(int i, int j) const { return data_[static_cast<size_t>(i) * shape_[1] + j]; }
  S& operator()(int i, int j, int k) {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  S operator()(int i, int j, int k) const {
    return data_[(static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k];
  }
  S& operator()(int i, int j, int k, int l) {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  S operator()(int i, int j, int k, int l) const {
    return data_[((static_cast<size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  void fill(S value) { std::fill(data_.begin(), data_.end(), value); }
  void zero() { fill(S(0)); }

  // 2D Eigen view; rows*cols must equal size().
  MatMap mat(int rows, int cols) {
    check_view(rows, cols);
    return MatMap(data_.data(), rows, cols);
  }
  ConstMatMap mat(int rows, int cols) const {
    check_view(rows, cols);
    return ConstMatMap(data_.data(), rows, cols);
  }
  MatMap mat() { return mat(shape_.at(0), shape_.size() == 1 ? 1 : trailing(1)); }
  ConstMatMap mat() const { return mat(shape_.at(0), shape_.size() == 1 ? 1 : trailing(1)); }

  VecMap vec() { return VecMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstVecMap vec() const {
    return ConstVecMap(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<T>(data_[static_cast<size_t>(i)]);
    return out;
  }

  // Product of extents from dimension `from` to the end.
  int64_t trailing(int from) const {
    int64_t n = 1;
    for (size_t i = static_cast<size_t>(from); i < shape_.size(); ++i) n *= shape_[i];
    return n;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  void check_view(int rows, int cols) const {
    if (static_cast<int64_t>(rows) * cols != size())
      throw ShapeError("cannot view " + shape_str(shape_) + " as " + std::to_string(rows) + "x" +
                       std::to_string(cols));
  }

  Shape shape_;
  std::vector<S> data_;
};

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace bevplan
