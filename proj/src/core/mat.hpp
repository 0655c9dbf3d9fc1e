#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstddef>
#include <vector>

namespace countlab {

// Dense row-major matrix owning its storage. Kept deliberately plain so the
// autograd tape can copy values cheaply and map them into Eigen on demand.
template <typename T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, T(0)) {}
  Mat(int r, int c, T fill) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

  size_t size() const { return data.size(); }
  T* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }
  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  void zero() { std::fill(data.begin(), data.end(), T(0)); }

  template <typename U>
  Mat<U> cast() const {
    Mat<U> out(rows, cols);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
using ERowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
Eigen::Map<ERowMajor<T>> emap(Mat<T>& m) {
  return Eigen::Map<ERowMajor<T>>(m.data.data(), m.rows, m.cols);
}

template <typename T>
Eigen::Map<const ERowMajor<T>> emap(const Mat<T>& m) {
  return Eigen::Map<const ERowMajor<T>>(m.data.data(), m.rows, m.cols);
}

}  // namespace countlab
