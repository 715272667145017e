#pragma once

// Piecewise polynomial regression of a weighted set of curves sharing one
// time grid: per-segment weighted least squares, the table of segment
// costs over every admissible window, and the dynamic program that picks
// the globally optimal segmentation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pwrm/dataset.hpp"
#include "pwrm/errors.hpp"

namespace pwrm {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Polynomial design rows x_j = (1, t_j, ..., t_j^p) on the grid mapped
/// affinely to [0, 1]. Also caches prefix sums of x_j x_j^T.
class PolyBasis {
 public:
  PolyBasis() = default;

  PolyBasis(const Eigen::VectorXd& grid, int degree) : degree_(degree), grid_(grid) {
    if (degree < 0) throw InvalidData("polynomial degree must be >= 0");
    if (grid.size() < 2) throw InvalidData("grid needs at least two points");
    const double lo = grid[0];
    const double span = grid[grid.size() - 1] - lo;
    if (!(span > 0.0)) throw InvalidData("time grid must be strictly increasing");
    const Index m = grid.size();
    const Index d = dim();
    rows_.resize(m, d);
    for (Index j = 0; j < m; ++j) {
      const double t = (grid[j] - lo) / span;
      double pw = 1.0;
      for (Index q = 0; q < d; ++q) {
        rows_(j, q) = pw;
        pw *= t;
      }
    }
    gram_prefix_.assign(static_cast<std::size_t>(m) + 1, Eigen::MatrixXd::Zero(d, d));
    for (Index j = 0; j < m; ++j)
      gram_prefix_[static_cast<std::size_t>(j) + 1] =
          gram_prefix_[static_cast<std::size_t>(j)] + rows_.row(j).transpose() * rows_.row(j);
  }

  int degree() const { return degree_; }
  Index dim() const { return degree_ + 1; }
  Index size() const { return rows_.rows(); }
  const Eigen::VectorXd& grid() const { return grid_; }
  const Eigen::MatrixXd& rows() const { return rows_; }

  /// Smallest admissible segment: p + 1 distinct points keep the normal
  /// matrix full rank.
  int min_segment_length() const { return degree_ + 1; }

  /// Sum of x_j x_j^T over the window (a, b].
  Eigen::MatrixXd gram(Index a, Index b) const {
    return gram_prefix_[static_cast<std::size_t>(b)] - gram_prefix_[static_cast<std::size_t>(a)];
  }
  const Eigen::MatrixXd& gram_prefix(Index t) const { return gram_prefix_[static_cast<std::size_t>(t)]; }

 private:
  int degree_ = 0;
  Eigen::VectorXd grid_;
  Eigen::MatrixXd rows_;
  std::vector<Eigen::MatrixXd> gram_prefix_;
};

/// Segment boundaries 0 = xi_1 < ... < xi_{R+1} = m; segment r covers the
/// 0-based time indices [xi_r, xi_{r+1}).
struct Segmentation {
  std::vector<int> bounds;

  int segments() const { return static_cast<int>(bounds.size()) - 1; }
  int begin(int r) const { return bounds[static_cast<std::size_t>(r)]; }
  int end(int r) const { return bounds[static_cast<std::size_t>(r) + 1]; }
  int length(int r) const { return end(r) - begin(r); }

  void validate(Index m, int min_length) const {
    if (bounds.size() < 2) throw InvalidData("segmentation needs at least one segment");
    if (bounds.front() != 0 || bounds.back() != m) throw InvalidData("segmentation must span [0, m]");
    for (int r = 0; r < segments(); ++r)
      if (length(r) < min_length)
        throw InvalidData("segment " + std::to_string(r + 1) + " shorter than " + std::to_string(min_length));
  }

  bool operator==(const Segmentation&) const = default;
};

enum class CostKind {
  Likelihood,    // W m_r (1 + log sigma_r^2), the plug-in negative log-likelihood term
  SumOfSquares,  // weighted residual sum of squares
};

struct SegmentOptions {
  CostKind kind = CostKind::Likelihood;
  double variance_floor = 1e-8;
};

/// 1e-8 times the variance of every observation (1e-8 when that is zero).
inline double variance_floor(const CurveSet& curves) {
  const double mean = curves.values.mean();
  const double var = (curves.values.array() - mean).square().mean();
  return 1e-8 * (var > 0.0 ? var : 1.0);
}

struct SegmentFit {
  Eigen::VectorXd beta;
  double sigma2 = 0.0;
  double weighted_sse = 0.0;
  double cost = 0.0;
  bool floored = false;
};

struct PiecewiseModel {
  Segmentation segmentation;
  std::vector<SegmentFit> fits;
  double total_cost = 0.0;

  int regimes() const { return segmentation.segments(); }

  /// The piecewise polynomial mean evaluated on every grid point.
  Eigen::VectorXd mean_curve(const PolyBasis& basis) const {
    Eigen::VectorXd g(basis.size());
    for (int r = 0; r < regimes(); ++r) {
      const auto& beta = fits[static_cast<std::size_t>(r)].beta;
      for (int j = segmentation.begin(r); j < segmentation.end(r); ++j) g[j] = basis.rows().row(j).dot(beta);
    }
    return g;
  }

  Eigen::VectorXd variance_curve(Index m) const {
    Eigen::VectorXd v(m);
    for (int r = 0; r < regimes(); ++r)
      v.segment(segmentation.begin(r), segmentation.length(r)).setConstant(fits[static_cast<std::size_t>(r)].sigma2);
    return v;
  }

  bool any_floored() const {
    return std::any_of(fits.begin(), fits.end(), [](const SegmentFit& f) { return f.floored; });
  }
};

namespace detail {

inline double checked_total_weight(std::span<const double> w, Index n) {
  if (static_cast<Index>(w.size()) != n) throw InvalidData("weight vector length must equal curve count");
  double total = 0.0;
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x)) throw InvalidData("weights must be finite and non-negative");
    total += x;
  }
  if (!(total > 0.0)) throw EmptyCluster(-1, "segment weights sum to zero");
  return total;
}

/// Solves (A + lambda I) beta = c with lambda = 1e-10 trace(A)/dim.
template <class Mat, class Vec>
Vec ridge_solve(const Mat& A, const Vec& c) {
  const double lambda = 1e-10 * A.trace() / static_cast<double>(A.rows());
  Mat Ar = A;
  Ar.diagonal().array() += lambda;
  Eigen::LLT<Mat> llt(Ar);
  if (!(lambda > 0.0) || llt.info() != Eigen::Success) throw SingularSegment("normal matrix is singular");
  Vec beta = llt.solve(c);
  if (!beta.allFinite()) throw SingularSegment("normal equations produced non-finite coefficients");
  return beta;
}

inline void finish_fit(SegmentFit& fit, double sse, double wlen, const SegmentOptions& opts) {
  fit.weighted_sse = std::max(sse, 0.0);
  const double raw = fit.weighted_sse / wlen;
  fit.floored = raw < opts.variance_floor;
  fit.sigma2 = fit.floored ? opts.variance_floor : raw;
  fit.cost = opts.kind == CostKind::SumOfSquares ? fit.weighted_sse : wlen * (1.0 + std::log(fit.sigma2));
}

template <int D>
void fill_cost_table(const PolyBasis& basis, const Eigen::VectorXd& wy, const Eigen::VectorXd& wy2, double W,
                     const SegmentOptions& opts, int lmin, std::vector<double>& out) {
  using Mat = Eigen::Matrix<double, D, D>;
  using Vec = Eigen::Matrix<double, D, 1>;
  const Index m = basis.size();
  const Index d = basis.dim();
  const auto& X = basis.rows();

  std::vector<Vec> pxy(static_cast<std::size_t>(m) + 1, Vec::Zero(d));
  std::vector<double> pyy(static_cast<std::size_t>(m) + 1, 0.0);
  for (Index j = 0; j < m; ++j) {
    pxy[static_cast<std::size_t>(j) + 1] = pxy[static_cast<std::size_t>(j)] + X.row(j).transpose() * wy[j];
    pyy[static_cast<std::size_t>(j) + 1] = pyy[static_cast<std::size_t>(j)] + wy2[j];
  }
  std::vector<Mat> gram(static_cast<std::size_t>(m) + 1);
  for (Index t = 0; t <= m; ++t) gram[static_cast<std::size_t>(t)] = basis.gram_prefix(t);

  SegmentFit scratch;
  for (Index a = 0; a + lmin <= m; ++a) {
    for (Index b = a + lmin; b <= m; ++b) {
      const Mat A = W * (gram[static_cast<std::size_t>(b)] - gram[static_cast<std::size_t>(a)]);
      const Vec c = pxy[static_cast<std::size_t>(b)] - pxy[static_cast<std::size_t>(a)];
      const double s = pyy[static_cast<std::size_t>(b)] - pyy[static_cast<std::size_t>(a)];
      double cost = kInf;
      try {
        const Vec beta = ridge_solve(A, c);
        const double sse = s - 2.0 * beta.dot(c) + beta.dot(A * beta);
        finish_fit(scratch, sse, W * static_cast<double>(b - a), opts);
        cost = scratch.cost;
      } catch (const SingularSegment&) {
        cost = kInf;  // window never selected
      }
      out[static_cast<std::size_t>(a * (m + 1) + b)] = cost;
    }
  }
}

}  // namespace detail

/// Weighted least-squares fit of one window (a, b] computed directly from
/// the observations.
inline SegmentFit weighted_segment_fit(const CurveSet& curves, const PolyBasis& basis, int a, int b,
                                       std::span<const double> weights, const SegmentOptions& opts = {}) {
  const Index m = curves.m();
  if (basis.size() != m) throw InvalidData("basis grid does not match curves");
  if (a < 0 || b > m || a >= b) throw InvalidData("segment window out of range");
  if (b - a < basis.min_segment_length()) throw InvalidData("segment shorter than p + 1 points");
  const double W = detail::checked_total_weight(weights, curves.n());
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Index>(weights.size()));

  const Index len = b - a;
  const auto Xr = basis.rows().middleRows(a, len);
  const auto Yr = curves.values.middleCols(a, len);
  const Eigen::MatrixXd A = W * (Xr.transpose() * Xr);
  const Eigen::VectorXd c = Xr.transpose() * (Yr.transpose() * w);

  SegmentFit fit;
  fit.beta = detail::ridge_solve(A, c);
  const Eigen::VectorXd pred = Xr * fit.beta;
  double sse = 0.0;
  for (Index i = 0; i < curves.n(); ++i) {
    if (w[i] == 0.0) continue;
    sse += w[i] * (Yr.row(i).transpose() - pred).squaredNorm();
  }
  detail::finish_fit(fit, sse, W * static_cast<double>(len), opts);
  return fit;
}

/// Costs c(a, b) of every window with b - a >= min_length; other entries
/// are +infinity.
class CostTable {
 public:
  CostTable(Index m, int min_length)
      : m_(m), lmin_(min_length), c_(static_cast<std::size_t>((m + 1) * (m + 1)), kInf) {}

  double operator()(Index a, Index b) const { return c_[static_cast<std::size_t>(a * (m_ + 1) + b)]; }
  void set(Index a, Index b, double v) { c_[static_cast<std::size_t>(a * (m_ + 1) + b)] = v; }

  Index m() const { return m_; }
  int min_length() const { return lmin_; }

  /// Number of admissible windows.
  std::size_t entries() const {
    std::size_t count = 0;
    for (Index a = 0; a + lmin_ <= m_; ++a) count += static_cast<std::size_t>(m_ - (a + lmin_) + 1);
    return count;
  }

  std::vector<double>& data() { return c_; }

 private:
  Index m_;
  int lmin_;
  std::vector<double> c_;
};

/// Cost table from prefix sums of the per-time sufficient statistics
/// W x_j x_j^T, x_j sum_i w_i y_ij and sum_i w_i y_ij^2.
inline CostTable segment_cost_table(const CurveSet& curves, const PolyBasis& basis, std::span<const double> weights,
                                    const SegmentOptions& opts = {}) {
  if (basis.size() != curves.m()) throw InvalidData("basis grid does not match curves");
  const double W = detail::checked_total_weight(weights, curves.n());
  const Eigen::Map<const Eigen::VectorXd> w(weights.data(), static_cast<Index>(weights.size()));
  const Eigen::VectorXd wy = curves.values.transpose() * w;
  const Eigen::VectorXd wy2 = curves.values.array().square().matrix().transpose() * w;

  CostTable table(curves.m(), basis.min_segment_length());
  switch (basis.dim()) {
    case 1: detail::fill_cost_table<1>(basis, wy, wy2, W, opts, table.min_length(), table.data()); break;
    case 2: detail::fill_cost_table<2>(basis, wy, wy2, W, opts, table.min_length(), table.data()); break;
    case 3: detail::fill_cost_table<3>(basis, wy, wy2, W, opts, table.min_length(), table.data()); break;
    case 4: detail::fill_cost_table<4>(basis, wy, wy2, W, opts, table.min_length(), table.data()); break;
    default:
      detail::fill_cost_table<Eigen::Dynamic>(basis, wy, wy2, W, opts, table.min_length(), table.data());
  }
  return table;
}

struct SegmentationResult {
  Segmentation segmentation;
  double total_cost = 0.0;
};

/// Global minimiser of sum_r c(xi_r, xi_{r+1}) over segmentations into R
/// segments. On equal costs the smallest split point wins at each stage.
inline SegmentationResult optimal_segmentation(const CostTable& table, int R) {
  const Index m = table.m();
  const int L = table.min_length();
  if (R < 1) throw InvalidData("number of segments must be >= 1");
  if (static_cast<Index>(R) * L > m)
    throw InfeasibleSegmentation(std::to_string(R) + " segments of at least " + std::to_string(L) +
                                 " points do not fit in " + std::to_string(m) + " time points");

  const auto stride = static_cast<std::size_t>(m + 1);
  std::vector<double> D(static_cast<std::size_t>(R) * stride, kInf);
  std::vector<int> arg(static_cast<std::size_t>(R) * stride, -1);
  for (Index t = L; t <= m; ++t) D[static_cast<std::size_t>(t)] = table(0, t);
  for (int r = 1; r < R; ++r) {
    double* cur = &D[static_cast<std::size_t>(r) * stride];
    const double* prev = &D[static_cast<std::size_t>(r - 1) * stride];
    int* a = &arg[static_cast<std::size_t>(r) * stride];
    for (Index t = static_cast<Index>(r + 1) * L; t <= m; ++t) {
      double best = kInf;
      int best_s = -1;
      for (Index s = static_cast<Index>(r) * L; s + L <= t; ++s) {
        const double v = prev[s] + table(s, t);
        if (v < best) {
          best = v;
          best_s = static_cast<int>(s);
        }
      }
      cur[t] = best;
      a[t] = best_s;
    }
  }

  const double total = D[static_cast<std::size_t>(R - 1) * stride + static_cast<std::size_t>(m)];
  if (!std::isfinite(total)) throw InfeasibleSegmentation("no segmentation with finite cost");

  SegmentationResult res;
  res.total_cost = total;
  res.segmentation.bounds.assign(static_cast<std::size_t>(R) + 1, 0);
  res.segmentation.bounds[static_cast<std::size_t>(R)] = static_cast<int>(m);
  Index t = m;
  for (int r = R - 1; r >= 1; --r) {
    const int s = arg[static_cast<std::size_t>(r) * stride + static_cast<std::size_t>(t)];
    res.segmentation.bounds[static_cast<std::size_t>(r)] = s;
    t = s;
  }
  return res;
}

/// Weighted fits of every segment of a fixed segmentation.
inline PiecewiseModel fit_on_segmentation(const CurveSet& curves, const PolyBasis& basis, const Segmentation& seg,
                                          std::span<const double> weights, const SegmentOptions& opts = {}) {
  seg.validate(curves.m(), basis.min_segment_length());
  PiecewiseModel model;
  model.segmentation = seg;
  model.fits.reserve(static_cast<std::size_t>(seg.segments()));
  for (int r = 0; r < seg.segments(); ++r) {
    model.fits.push_back(weighted_segment_fit(curves, basis, seg.begin(r), seg.end(r), weights, opts));
    model.total_cost += model.fits.back().cost;
  }
  return model;
}

/// Optimal R-segment piecewise regression of the weighted curves.
inline PiecewiseModel fit_piecewise(const CurveSet& curves, const PolyBasis& basis, int R,
                                    std::span<const double> weights, const SegmentOptions& opts = {}) {
  const auto table = segment_cost_table(curves, basis, weights, opts);
  const auto best = optimal_segmentation(table, R);
  return fit_on_segmentation(curves, basis, best.segmentation, weights, opts);
}

inline Segmentation uniform_segmentation(Index m, int R, int min_length) {
  if (R < 1 || static_cast<Index>(R) * min_length > m)
    throw InfeasibleSegmentation("uniform segmentation infeasible");
  Segmentation s;
  s.bounds.resize(static_cast<std::size_t>(R) + 1);
  for (int r = 0; r <= R; ++r) s.bounds[static_cast<std::size_t>(r)] = static_cast<int>((static_cast<Index>(r) * m) / R);
  return s;
}

/// Uniformly random composition of m into R lengths, each >= min_length.
template <class Rng>
Segmentation random_segmentation(Index m, int R, int min_length, Rng& rng) {
  if (R < 1 || static_cast<Index>(R) * min_length > m)
    throw InfeasibleSegmentation("random segmentation infeasible");
  const auto extra = static_cast<int>(m - static_cast<Index>(R) * min_length);
  std::vector<int> pool(static_cast<std::size_t>(extra + R - 1));
  for (std::size_t q = 0; q < pool.size(); ++q) pool[q] = static_cast<int>(q) + 1;
  std::vector<int> cuts;
  std::sample(pool.begin(), pool.end(), std::back_inserter(cuts), R - 1, rng);
  std::sort(cuts.begin(), cuts.end());
  Segmentation s;
  s.bounds.push_back(0);
  int prev = 0;
  for (int r = 0; r < R; ++r) {
    const int cut = r + 1 < R ? cuts[static_cast<std::size_t>(r)] : extra + R;
    const int gap = cut - prev - 1;
    s.bounds.push_back(s.bounds.back() + min_length + gap);
    prev = cut;
  }
  return s;
}

}  // namespace pwrm
