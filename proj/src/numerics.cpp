#include "dpq/numerics.hpp"

#include <numbers>

namespace dpq {

Matrix make_matrix(Index rows, Index cols, std::span<const double> data) {
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size())
    throw InvalidArgument("make_matrix: data length does not match rows x cols");
  Matrix m = Eigen::Map<const Matrix>(data.data(), rows, cols);
  require_finite(m, "make_matrix");
  return m;
}

Matrix central_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& at, double h) {
  if (!(h > 0.0)) throw InvalidArgument("central_diff_grad: h must be positive");
  Matrix x = at;
  Matrix grad(at.rows(), at.cols());
  for (Index r = 0; r < at.rows(); ++r) {
    for (Index c = 0; c < at.cols(); ++c) {
      const double orig = x(r, c);
      x(r, c) = orig + h;
      const double fp = f(x);
      x(r, c) = orig - h;
      const double fm = f(x);
      x(r, c) = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw OracleFailure("central_diff_grad: non-finite function value");
      grad(r, c) = (fp - fm) / (2.0 * h);
    }
  }
  return grad;
}

const char* to_string(Distance d) {
  switch (d) {
    case Distance::dot: return "dot";
    case Distance::euclidean: return "euclidean";
    case Distance::cosine: return "cosine";
  }
  return "?";
}

Distance parse_distance(const std::string& s) {
  if (s == "dot") return Distance::dot;
  if (s == "euclidean") return Distance::euclidean;
  if (s == "cosine") return Distance::cosine;
  throw InvalidArgument("unknown distance '" + s + "'");
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t Rng::below(std::uint64_t bound) {
  if (bound == 0) throw InvalidArgument("Rng::below: bound must be positive");
  // Values below `threshold` would bias the modulo.
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x >= threshold) return x % bound;
  }
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Matrix Rng::uniform_matrix(Index rows, Index cols, double lo, double hi) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = uniform(lo, hi);
  return m;
}

Matrix Rng::normal_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = normal();
  return m;
}

}  // namespace dpq
