#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace raven {

// Dense row-major array of floats. Shape is a list of positive dims; data
// length always equals the product of the dims. float is the training
// precision, double the gradient-checking precision.
template <class T>
struct ArrayT {
  std::vector<int> shape;
  std::vector<T> data;

  ArrayT() = default;
  explicit ArrayT(std::vector<int> s) : shape(std::move(s)), data(numel_of(shape), T(0)) {
    check_shape(shape);
  }
  ArrayT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    check_shape(shape);
    if ((int64_t)data.size() != numel_of(shape))
      throw std::invalid_argument("Array: data length does not match shape");
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  static void check_shape(const std::vector<int>& s) {
    for (int d : s)
      if (d <= 0) throw std::invalid_argument("Array: non-positive dim");
  }

  int64_t numel() const { return (int64_t)data.size(); }
  int rank() const { return (int)shape.size(); }
  int dim(int i) const { return shape[(size_t)i]; }

  // 2-D accessors (rows x cols); most kernels address raw data directly.
  int rows() const { return shape.size() >= 1 ? shape[0] : 1; }
  int cols() const {
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return (int)c;
  }
  T& at(int i, int j) { return data[(size_t)i * cols() + j]; }
  T at(int i, int j) const { return data[(size_t)i * cols() + j]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  bool same_shape(const ArrayT& o) const { return shape == o.shape; }

  ArrayT reshaped(std::vector<int> s) const {
    if (numel_of(s) != numel()) throw std::invalid_argument("reshape: numel mismatch");
    ArrayT out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite((double)v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

using Arr = ArrayT<float>;
using ArrD = ArrayT<double>;

template <class T>
ArrayT<T> make_array(std::vector<int> shape, std::initializer_list<T> vals) {
  return ArrayT<T>(std::move(shape), std::vector<T>(vals));
}

template <class T>
double max_abs_diff(const ArrayT<T>& a, const ArrayT<T>& b) {
  assert(a.numel() == b.numel());
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs((double)a.data[(size_t)i] - (double)b.data[(size_t)i]));
  return m;
}

template <class T>
ArrayT<double> to_double(const ArrayT<T>& a) {
  ArrayT<double> out(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.data[(size_t)i] = (double)a.data[(size_t)i];
  return out;
}

template <class T>
ArrayT<float> to_float(const ArrayT<T>& a) {
  ArrayT<float> out(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.data[(size_t)i] = (float)a.data[(size_t)i];
  return out;
}

}  // namespace raven
