#pragma once

#include "tristream/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace tristream::testing {

inline ad::Matrix random_matrix(std::mt19937_64& rng, ad::Index rows, ad::Index cols, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of a scalar function with respect to every entry of x.
inline ad::Matrix central_difference(const std::function<double(const ad::Matrix&)>& f, const ad::Matrix& x,
                                     double h = 1e-6) {
  ad::Matrix g(x.rows(), x.cols());
  ad::Matrix xp = x;
  for (ad::Index i = 0; i < x.size(); ++i) {
    const double orig = xp.data()[i];
    xp.data()[i] = orig + h;
    const double fp = f(xp);
    xp.data()[i] = orig - h;
    const double fm = f(xp);
    xp.data()[i] = orig;
    g.data()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// max |a - b| relative to max |b|.
inline double relative_error(const ad::Matrix& a, const ad::Matrix& b) {
  const double scale = std::max(b.cwiseAbs().maxCoeff(), 1e-12);
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace tristream::testing
