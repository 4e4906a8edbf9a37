#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>

#include "advcomm/diffcore/tensor.hpp"

namespace advcomm::diffcore {

/// Standard normal draw from a 64-bit engine via Box-Muller, so results do
/// not depend on the standard library's distribution implementation.
inline double gaussian(std::mt19937_64& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [0, n) by multiply-shift; n must be positive.
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>((static_cast<unsigned __int128>(rng()) * n) >> 64);
}

/// Fisher-Yates with uniform_index, identical on every standard library.
template <typename It>
void shuffle(It first, It last, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(last - first);
  for (std::size_t i = n; i > 1; --i) std::swap(first[i - 1], first[uniform_index(rng, i)]);
}

/// Matrix with orthonormal rows or columns (whichever is fewer), times gain.
/// Shape is [rows, cols]; conv kernels pass rows = out channels and
/// cols = in*kh*kw, then reshape.
template <typename T>
Tensor<T> orthogonal(std::size_t rows, std::size_t cols, double gain, std::mt19937_64& rng) {
  const bool tall = rows >= cols;
  const std::size_t m = tall ? rows : cols, n = tall ? cols : rows;
  Eigen::MatrixXd a(m, n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) a(i, j) = gaussian(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
  // sign fix so the draw is uniform over the orthogonal group
  Eigen::MatrixXd r = qr.matrixQR().topLeftCorner(n, n);
  for (std::size_t j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  Tensor<T> out({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = static_cast<T>(gain * (tall ? q(i, j) : q(j, i)));
  return out;
}

}  // namespace advcomm::diffcore
