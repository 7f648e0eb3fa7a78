#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "outfitlab/error.hpp"
#include "outfitlab/rng.hpp"

namespace outfitlab::diff {

// Dense row-major matrix. Vectors are n x 1 or 1 x n, scalars 1 x 1.
template <class Real>
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<Real> data;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, Real(0)) {
    if (r < 0 || c < 0) throw DimensionError("tensor dimensions must be non-negative");
  }
  Tensor(int r, int c, std::initializer_list<Real> vals) : Tensor(r, c) {
    if (vals.size() != data.size())
      throw DimensionError("initializer size does not match tensor shape");
    std::copy(vals.begin(), vals.end(), data.begin());
  }

  Real& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  Real at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
  }

  bool all_finite() const {
    for (Real v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(rows, cols);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<Other>(data[i]);
    return out;
  }
};

template <class Real>
Tensor<Real> zeros(int r, int c) {
  return Tensor<Real>(r, c);
}

template <class Real>
Tensor<Real> full(int r, int c, Real v) {
  Tensor<Real> t(r, c);
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

template <class Real>
Tensor<Real> gaussian(int r, int c, RngStream& rng, double stddev = 1.0) {
  Tensor<Real> t(r, c);
  for (auto& v : t.data) v = static_cast<Real>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace outfitlab::diff
