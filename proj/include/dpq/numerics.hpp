#ifndef DPQ_NUMERICS_HPP
#define DPQ_NUMERICS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dpq/errors.hpp"

namespace dpq {

using Index = Eigen::Index;

// Row-major dense storage; every downstream module uses these aliases.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

template <typename Derived>
void require_finite(const Eigen::DenseBase<Derived>& m, const char* what) {
  if (!all_finite(m)) throw InvalidArgument(std::string(what) + ": non-finite entry");
}

// Validated construction from row-major data.
Matrix make_matrix(Index rows, Index cols, std::span<const double> data);

// Row-wise softmax of m / temperature, max-subtracted.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& m,
                                                typename Derived::Scalar temperature) {
  using Scalar = typename Derived::Scalar;
  if (!(temperature > Scalar(0))) throw InvalidArgument("softmax_rows: temperature must be positive");
  require_finite(m, "softmax_rows");
  MatrixX<Scalar> out = m / temperature;
  for (Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  return out;
}

// Numerical rank by row elimination with partial pivoting. A pivot whose
// magnitude is at most tol times the largest entry of m counts as zero.
template <typename Derived>
Index matrix_rank(const Eigen::MatrixBase<Derived>& m, double tol = 1e-9) {
  if (!(tol > 0.0)) throw InvalidArgument("matrix_rank: tol must be positive");
  require_finite(m, "matrix_rank");
  MatrixX<double> a = m.template cast<double>();
  const double scale = a.size() == 0 ? 0.0 : a.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0;
  const double threshold = tol * scale;
  Index rank = 0;
  for (Index c = 0; c < a.cols() && rank < a.rows(); ++c) {
    Index pivot = rank;
    a.col(c).segment(rank, a.rows() - rank).cwiseAbs().maxCoeff(&pivot);
    pivot += rank;
    if (std::abs(a(pivot, c)) <= threshold) continue;
    a.row(pivot).swap(a.row(rank));
    for (Index r = rank + 1; r < a.rows(); ++r) {
      const double f = a(r, c) / a(rank, c);
      if (f != 0.0) a.row(r) -= f * a.row(rank);
    }
    ++rank;
  }
  return rank;
}

// Entrywise central-difference gradient of f at `at`.
Matrix central_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& at, double h);

enum class Distance { dot, euclidean, cosine };

const char* to_string(Distance d);
Distance parse_distance(const std::string& s);

// Norm floor for cosine similarity.
inline constexpr double kCosineEps = 1e-12;

// Pairwise similarity logits (larger = closer) between the rows of queries
// (B x s) and keys (K x s): dot product, negative squared Euclidean distance,
// or dot product of L2-normalized rows.
template <typename DerivedQ, typename DerivedK>
MatrixX<typename DerivedQ::Scalar> similarity(const Eigen::MatrixBase<DerivedQ>& queries,
                                               const Eigen::MatrixBase<DerivedK>& keys, Distance metric) {
  using Scalar = typename DerivedQ::Scalar;
  MatrixX<Scalar> dots = queries * keys.transpose();
  switch (metric) {
    case Distance::dot:
      return dots;
    case Distance::euclidean:
      // Direct differences rather than |q|^2 - 2qk + |k|^2 so exact ties stay exact.
      for (Index i = 0; i < dots.rows(); ++i)
        for (Index k = 0; k < dots.cols(); ++k) dots(i, k) = -(queries.row(i) - keys.row(k)).squaredNorm();
      return dots;
    case Distance::cosine: {
      for (Index i = 0; i < dots.rows(); ++i) {
        const Scalar qn = std::max<Scalar>(queries.row(i).norm(), Scalar(kCosineEps));
        for (Index k = 0; k < dots.cols(); ++k) {
          const Scalar kn = std::max<Scalar>(keys.row(k).norm(), Scalar(kCosineEps));
          dots(i, k) /= qn * kn;
        }
      }
      return dots;
    }
  }
  return dots;
}

// Index of the largest entry of a row; ties resolve to the smallest index.
template <typename Derived>
Index argmax_first(const Eigen::DenseBase<Derived>& row) {
  Index best = 0;
  for (Index k = 1; k < row.size(); ++k)
    if (row(k) > row(best)) best = k;
  return best;
}

// SplitMix64 (Steele, Lea, Flood 2014): state += 0x9E3779B97F4A7C15, then the
// output is mixed with shifts 30/27/31 and multipliers 0xBF58476D1CE4E5B9 and
// 0x94D049BB133111EB. Derived quantities use only this stream so sequences are
// reproducible in any language.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  // 53 high bits scaled to [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Unbiased integer in [0, bound) by rejection.
  std::uint64_t below(std::uint64_t bound);
  // Box-Muller, consuming two uniforms per call (no caching).
  double normal();

  Matrix uniform_matrix(Index rows, Index cols, double lo, double hi);
  Matrix normal_matrix(Index rows, Index cols);

  // Fisher-Yates, iterating from the back.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t state() const { return state_; }

private:
  std::uint64_t state_;
};

}  // namespace dpq

#endif  // DPQ_NUMERICS_HPP
