#ifndef DPQ_TESTS_SUPPORT_HPP
#define DPQ_TESTS_SUPPORT_HPP

// Test-only generators and independent oracles. Nothing here calls into the
// autograd code paths it is used to check.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "dpq/core.hpp"

namespace dpq::check {

inline double rel_err(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline double max_rel_err(const Matrix& analytic, const Matrix& numeric, double floor = 1e-3) {
  double worst = 0.0;
  for (Index r = 0; r < analytic.rows(); ++r)
    for (Index c = 0; c < analytic.cols(); ++c) worst = std::max(worst, rel_err(analytic(r, c), numeric(r, c), floor));
  return worst;
}

struct RankConstruction {
  Codebook codes;
  ProductTable values;
};

enum class Violation { none, one_hot_rank, value_rank, too_few_codes };

// One-hot matrices have rank at most KD - D + 1 (each row has one 1 per
// group), so a construction with rank(B) = min(n, KD) needs n <= KD - D + 1.
inline RankConstruction make_rank_construction(Rng& rng, Violation violation) {
  for (;;) {
    const Index groups = 1 + static_cast<Index>(rng.below(3));
    const Index k = 2 + static_cast<Index>(rng.below(3));
    Index s = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(k)));
    if (violation == Violation::too_few_codes) s = k + 1 + static_cast<Index>(rng.below(2));
    const Index max_n = k * groups - groups + 1;
    const Index n = 1 + static_cast<Index>(rng.below(static_cast<std::uint64_t>(max_n)));
    if (violation == Violation::one_hot_rank && n < 2) continue;

    Codebook cb{CodeMatrix(n, groups), k};
    bool found = false;
    for (int attempt = 0; attempt < 200 && !found; ++attempt) {
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < groups; ++j) cb.codes(i, j) = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(k)));
      found = matrix_rank(one_hot(cb)) == n;
    }
    if (!found) continue;
    if (violation == Violation::one_hot_rank) {
      const Index dst = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
      Index src = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - 1)));
      if (src >= dst) ++src;
      cb.codes.row(dst) = cb.codes.row(src);
    }

    Matrix v = rng.normal_matrix(k, s * groups);
    if (violation == Violation::value_rank) {
      const Index j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(groups)));
      if (s >= 2)
        v.col(j * s + 1) = 2.0 * v.col(j * s);
      else
        v.col(j * s).setZero();
    }
    return {cb, ProductTable(v, groups, false)};
  }
}

// Loop-level reimplementation of the tau-relaxed SX output for a batch:
// similarity -> optional batch normalization -> softmax(./tau) -> soft mix of
// value rows. Parameters are passed as raw matrices so the finite-difference
// oracle can perturb any of them.
struct SoftParams {
  Matrix queries;  // B x d (batch rows only)
  Matrix keys;     // key table data
  Matrix values;   // value table data
  Matrix gamma;    // D x K, used when affine
  Matrix beta;
};

inline Matrix naive_soft_output(const SoftParams& p, const DpqConfig& cfg) {
  const Index b = p.queries.rows();
  const Index s = cfg.sub_dim();
  const Index kk = cfg.num_codes;
  Matrix out = Matrix::Zero(b, cfg.dim);
  for (Index j = 0; j < cfg.num_groups; ++j) {
    const Index kcol = cfg.subspace_sharing ? 0 : j * s;
    Matrix logit(b, kk);
    for (Index i = 0; i < b; ++i)
      for (Index k = 0; k < kk; ++k) {
        double dot = 0, qq = 0, k2 = 0, d2 = 0;
        for (Index t = 0; t < s; ++t) {
          const double q = p.queries(i, j * s + t);
          const double kv = p.keys(k, kcol + t);
          dot += q * kv;
          qq += q * q;
          k2 += kv * kv;
          d2 += (q - kv) * (q - kv);
        }
        switch (cfg.distance) {
          case Distance::dot: logit(i, k) = dot; break;
          case Distance::euclidean: logit(i, k) = -d2; break;
          case Distance::cosine:
            logit(i, k) = dot / (std::max(std::sqrt(qq), 1e-12) * std::max(std::sqrt(k2), 1e-12));
            break;
        }
      }
    if (cfg.batch_norm) {
      for (Index k = 0; k < kk; ++k) {
        double mean = 0;
        for (Index i = 0; i < b; ++i) mean += logit(i, k);
        mean /= static_cast<double>(b);
        double var = 0;
        for (Index i = 0; i < b; ++i) var += (logit(i, k) - mean) * (logit(i, k) - mean);
        var /= static_cast<double>(b);
        for (Index i = 0; i < b; ++i) {
          double x = (logit(i, k) - mean) / std::sqrt(var + cfg.bn_eps);
          if (cfg.bn_affine) x = x * p.gamma(j, k) + p.beta(j, k);
          logit(i, k) = x;
        }
      }
    }
    for (Index i = 0; i < b; ++i) {
      double mx = logit(i, 0);
      for (Index k = 1; k < kk; ++k) mx = std::max(mx, logit(i, k));
      std::vector<double> w(static_cast<std::size_t>(kk));
      double z = 0;
      for (Index k = 0; k < kk; ++k) z += (w[static_cast<std::size_t>(k)] = std::exp((logit(i, k) - mx) / cfg.tau_backward));
      for (Index k = 0; k < kk; ++k)
        for (Index t = 0; t < s; ++t) out(i, j * s + t) += w[static_cast<std::size_t>(k)] / z * p.values(k, kcol + t);
    }
  }
  return out;
}

}  // namespace dpq::check

#endif  // DPQ_TESTS_SUPPORT_HPP
