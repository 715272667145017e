#pragma once

// Slow, independent reference computations used to check the library.
// None of them reuse the library's prefix sums, dynamic program or
// posterior code.

#include <Eigen/Dense>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include "pwrm/dataset.hpp"
#include "pwrm/piecewise.hpp"

namespace oracle {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

struct Best {
  double cost = std::numeric_limits<double>::infinity();
  std::vector<int> bounds;
};

/// Every segmentation of [0, m) into R pieces of length >= L, costs summed
/// left to right. Among equal costs keeps the one whose boundaries, read
/// from the last to the first, are lexicographically smallest.
inline Best enumerate(const std::function<double(int, int)>& cost, int m, int R, int L) {
  Best best;
  std::vector<int> b{0};
  std::function<void(int, double)> rec = [&](int r, double acc) {
    const int a = b.back();
    if (r == R - 1) {
      if (m - a < L) return;
      const double total = acc + cost(a, m);
      b.push_back(m);
      bool better = total < best.cost;
      if (!better && total == best.cost) {
        for (int q = R - 1; q >= 1; --q)
          if (b[q] != best.bounds[q]) {
            better = b[q] < best.bounds[q];
            break;
          }
      }
      if (better) {
        best.cost = total;
        best.bounds = b;
      }
      b.pop_back();
      return;
    }
    for (int e = a + L; e + (R - r - 1) * L <= m; ++e) {
      b.push_back(e);
      rec(r + 1, acc + cost(a, e));
      b.pop_back();
    }
  };
  rec(0, 0.0);
  return best;
}

/// Weighted least squares on the stacked system sqrt(w_i) (X beta - y_i),
/// solved by column-pivoting QR. With `ridge`, rows sqrt(lambda) I with
/// lambda = 1e-10 trace(W X'X) / dim are appended. Returns beta and the
/// weighted SSE (ridge rows excluded).
inline std::pair<VectorXd, double> stacked_wls(const MatrixXd& Y, const VectorXd& w, const MatrixXd& X, int a, int b,
                                               bool ridge = false) {
  const Index len = b - a;
  const Index n = Y.rows();
  const Index d = X.cols();
  const Index extra = ridge ? d : 0;
  MatrixXd A = MatrixXd::Zero(n * len + extra, d);
  VectorXd rhs = VectorXd::Zero(n * len + extra);
  double trace = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double s = std::sqrt(w[i]);
    A.middleRows(i * len, len) = s * X.middleRows(a, len);
    rhs.segment(i * len, len) = s * Y.row(i).segment(a, len).transpose();
    trace += w[i] * X.middleRows(a, len).squaredNorm();
  }
  if (ridge) A.bottomRows(d) = std::sqrt(1e-10 * trace / static_cast<double>(d)) * MatrixXd::Identity(d, d);
  const VectorXd beta = A.colPivHouseholderQr().solve(rhs);
  return {beta, (A.topRows(n * len) * beta - rhs.head(n * len)).squaredNorm()};
}

/// Design matrix built from scratch: t = (x - x_0)/(x_{m-1} - x_0), powers
/// by std::pow.
inline MatrixXd design(const VectorXd& grid, int p) {
  MatrixXd X(grid.size(), p + 1);
  const double lo = grid[0];
  const double span = grid[grid.size() - 1] - lo;
  for (Index j = 0; j < grid.size(); ++j)
    for (int q = 0; q <= p; ++q) X(j, q) = std::pow((grid[j] - lo) / span, q);
  return X;
}

using mp = boost::multiprecision::cpp_bin_float_50;

/// Posteriors and log-likelihood in 50-digit arithmetic straight from
/// alpha_k * exp(log density).
inline std::pair<MatrixXd, double> softmax_mp(const MatrixXd& logdens, const VectorXd& alpha) {
  MatrixXd tau(logdens.rows(), logdens.cols());
  mp total = 0;
  for (Index i = 0; i < logdens.rows(); ++i) {
    std::vector<mp> e(static_cast<std::size_t>(logdens.cols()));
    mp s = 0;
    for (Index k = 0; k < logdens.cols(); ++k) {
      e[static_cast<std::size_t>(k)] = mp(alpha[k]) * boost::multiprecision::exp(mp(logdens(i, k)));
      s += e[static_cast<std::size_t>(k)];
    }
    for (Index k = 0; k < logdens.cols(); ++k) tau(i, k) = static_cast<double>(e[static_cast<std::size_t>(k)] / s);
    total += boost::multiprecision::log(s);
  }
  return {tau, static_cast<double>(total)};
}

/// Log density of curve y under a piecewise Gaussian model, point by point.
inline double piecewise_logpdf(const VectorXd& y, const VectorXd& mean, const VectorXd& var) {
  double s = 0.0;
  for (Index j = 0; j < y.size(); ++j) {
    const double d = y[j] - mean[j];
    s += -0.5 * std::log(2.0 * std::numbers::pi * var[j]) - 0.5 * d * d / var[j];
  }
  return s;
}

/// Small textbook diagonal-GMM EM loop, written without the library.
struct GmmOracle {
  VectorXd alpha;
  std::vector<VectorXd> mu, var;
  double loglik = 0.0;
  MatrixXd tau;
};

inline GmmOracle gmm_em(const MatrixXd& Y, const std::vector<int>& init, int K, int iters, double floor) {
  const Index n = Y.rows(), m = Y.cols();
  GmmOracle g;
  MatrixXd t = MatrixXd::Zero(n, K);
  for (Index i = 0; i < n; ++i) t(i, init[static_cast<std::size_t>(i)]) = 1.0;
  for (int it = 0; it <= iters; ++it) {
    g.alpha = VectorXd(K);
    g.mu.assign(K, VectorXd::Zero(m));
    g.var.assign(K, VectorXd::Zero(m));
    for (int k = 0; k < K; ++k) {
      double W = 0;
      for (Index i = 0; i < n; ++i) W += t(i, k);
      g.alpha[k] = W / n;
      for (Index i = 0; i < n; ++i) g.mu[k] += t(i, k) * Y.row(i).transpose();
      g.mu[k] /= W;
      for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < m; ++j) g.var[k][j] += t(i, k) * (Y(i, j) - g.mu[k][j]) * (Y(i, j) - g.mu[k][j]);
      g.var[k] /= W;
      for (Index j = 0; j < m; ++j) g.var[k][j] = std::max(g.var[k][j], floor);
    }
    MatrixXd ld(n, K);
    for (Index i = 0; i < n; ++i)
      for (int k = 0; k < K; ++k) ld(i, k) = piecewise_logpdf(Y.row(i).transpose(), g.mu[k], g.var[k]);
    auto [tau, L] = softmax_mp(ld, g.alpha);
    t = tau;
    g.tau = tau;
    g.loglik = L;
  }
  return g;
}

/// Random curve set with n curves on m points.
inline pwrm::CurveSet random_curves(Index n, Index m, std::mt19937_64& rng, bool labels = false) {
  std::normal_distribution<double> N(0.0, 1.0);
  pwrm::CurveSet cs;
  cs.values.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) cs.values(i, j) = N(rng);
  cs.grid = pwrm::default_grid(m);
  if (labels) cs.labels.assign(static_cast<std::size_t>(n), 1);
  return cs;
}

}  // namespace oracle
