#pragma once

// Reference clusterers: a mixture of single polynomial regressions over the
// whole grid, and a Gaussian mixture on the raw curve vectors.

#include <Eigen/Core>

#include <string>
#include <vector>

#include "pwrm/mixture.hpp"
#include "pwrm/pwrm_cem.hpp"

namespace pwrm {

// ---------------------------------------------------------------------------
// Polynomial regression mixture

struct PrmParams {
  Eigen::VectorXd alpha;
  std::vector<Eigen::VectorXd> beta;
  std::vector<double> sigma2;
  int degree = 0;

  int K() const { return static_cast<int>(beta.size()); }
  int free_parameters() const { return K() * (degree + 3) - 1; }
  Eigen::VectorXd prototype(int k, const PolyBasis& basis) const {
    return basis.rows() * beta[static_cast<std::size_t>(k)];
  }
};

using PrmFit = FitResult<PrmParams>;

enum class PrmAlgorithm { Em, Cem };

namespace detail {

/// Weighted normal equations over all m points of every curve.
inline PrmParams prm_m_step(const CurveSet& curves, const PolyBasis& basis, const Eigen::MatrixXd& tau, double floor) {
  const Eigen::MatrixXd& X = basis.rows();
  const Eigen::MatrixXd XtX = X.transpose() * X;
  const double m = static_cast<double>(curves.m());
  PrmParams params;
  params.degree = basis.degree();
  params.alpha = tau.colwise().sum().transpose() / static_cast<double>(curves.n());
  for (Index k = 0; k < tau.cols(); ++k) {
    const double W = tau.col(k).sum();
    if (W < kEmptyWeight) throw EmptyCluster(static_cast<int>(k), "polynomial regression cluster is empty");
    const Eigen::VectorXd ybar = curves.values.transpose() * tau.col(k);  // sum_i tau_ik y_i
    const Eigen::VectorXd beta = ridge_solve(Eigen::MatrixXd(W * XtX), Eigen::VectorXd(X.transpose() * ybar));
    const Eigen::VectorXd g = X * beta;
    double sse = 0.0;
    for (Index i = 0; i < curves.n(); ++i)
      if (tau(i, k) > 0.0) sse += tau(i, k) * (curves.values.row(i).transpose() - g).squaredNorm();
    const double s2 = sse / (W * m);
    params.beta.push_back(beta);
    params.sigma2.push_back(s2 >= floor ? s2 : floor);
  }
  return params;
}

inline Eigen::MatrixXd prm_log_density(const CurveSet& curves, const PolyBasis& basis, const PrmParams& params) {
  Eigen::MatrixXd ld(curves.n(), params.K());
  const double m = static_cast<double>(curves.m());
  for (int k = 0; k < params.K(); ++k) {
    const Eigen::VectorXd g = params.prototype(k, basis);
    const double s2 = params.sigma2[static_cast<std::size_t>(k)];
    for (Index i = 0; i < curves.n(); ++i)
      ld(i, k) = -0.5 * (squared_distance(curves.values.row(i).transpose(), g) / s2 + m * (kLog2Pi + std::log(s2)));
  }
  return ld;
}

inline void prm_note_floor(std::vector<FitEvent>& events, const PrmParams& p, double floor, int restart, int it) {
  for (int k = 0; k < p.K(); ++k)
    if (p.sigma2[static_cast<std::size_t>(k)] == floor)
      events.push_back({EventKind::VarianceFloor, restart, it, k, "variance held at the floor"});
}

}  // namespace detail

/// Mixture of polynomial regressions fitted by EM or CEM, with the same
/// restart seeding as the piecewise fitters.
inline PrmFit fit_prm(const CurveSet& curves, FitConfig config, PrmAlgorithm algo = PrmAlgorithm::Em) {
  curves.validate();
  config.R = {1};
  config.validate(curves);
  const PolyBasis basis(curves.grid, config.p);
  const double floor = variance_floor(curves);

  auto run = [&](int restart) {
    auto rng = restart_rng(config.seed, restart);
    PrmFit fit;
    fit.restart = restart;
    std::vector<int> z = initial_partition(curves, config, rng);
    fit.params = detail::prm_m_step(curves, basis, one_hot(z, config.K), floor);
    detail::prm_note_floor(fit.events, fit.params, floor, restart, 0);
    Posterior post = e_step(detail::prm_log_density(curves, basis, fit.params), fit.params.alpha);
    auto criterion = [&] {
      return algo == PrmAlgorithm::Em ? post.log_likelihood : complete_log_likelihood(post.log_post, z);
    };
    fit.criterion_trace.push_back(criterion());
    for (int it = 1; it <= config.max_iter; ++it) {
      Eigen::MatrixXd tau;
      if (algo == PrmAlgorithm::Em) {
        tau = post.tau;
        for (int k : detail::repair_empty_clusters(tau))
          fit.events.push_back({EventKind::EmptyCluster, restart, it, k, "cluster reseeded from least confident curve"});
      } else {
        std::vector<int> next = argmax_rows(post.log_post);
        for (int k : detail::repair_hard_partition(
                 next, config.K, [&](std::size_t i) { return post.tau.row(static_cast<Index>(i)).maxCoeff(); }))
          fit.events.push_back({EventKind::EmptyCluster, restart, it, k, "cluster reseeded from least confident curve"});
        if (next == z) {
          fit.converged = true;
          break;
        }
        z = std::move(next);
        tau = one_hot(z, config.K);
      }
      fit.params = detail::prm_m_step(curves, basis, tau, floor);
      detail::prm_note_floor(fit.events, fit.params, floor, restart, it);
      ++fit.iterations;
      post = e_step(detail::prm_log_density(curves, basis, fit.params), fit.params.alpha);
      fit.criterion_trace.push_back(criterion());
      if (relative_change_below(fit.criterion_trace[it - 1], fit.criterion_trace[it], config.tol)) {
        fit.converged = true;
        break;
      }
    }
    fit.tau = post.tau;
    fit.labels = argmax_rows(post.log_post);
    fit.log_likelihood = post.log_likelihood;
    fit.complete_log_likelihood = complete_log_likelihood(post.log_post, fit.labels);
    return fit;
  };
  return best_of_restarts<PrmFit>(config.n_restarts, config.threads, run, [&](const PrmFit& f) {
    return algo == PrmAlgorithm::Em ? f.log_likelihood : f.complete_log_likelihood;
  });
}

// ---------------------------------------------------------------------------
// Gaussian mixture on raw curves

enum class Covariance { Diagonal, Spherical };

struct GmmParams {
  Eigen::VectorXd alpha;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::VectorXd> variances;  // per coordinate; constant when spherical
  Covariance covariance = Covariance::Diagonal;

  int K() const { return static_cast<int>(means.size()); }
  Index dim() const { return means.empty() ? 0 : means.front().size(); }

  int free_parameters() const {
    const int m = static_cast<int>(dim());
    return covariance == Covariance::Diagonal ? K() * (2 * m + 1) - 1 : K() * (m + 2) - 1;
  }
};

using GmmFit = FitResult<GmmParams>;

namespace detail {

inline GmmParams gmm_m_step(const CurveSet& curves, const Eigen::MatrixXd& tau, Covariance cov, double floor,
                            bool& floored) {
  GmmParams params;
  params.covariance = cov;
  params.alpha = tau.colwise().sum().transpose() / static_cast<double>(curves.n());
  floored = false;
  for (Index k = 0; k < tau.cols(); ++k) {
    const double W = tau.col(k).sum();
    if (W < kEmptyWeight) throw EmptyCluster(static_cast<int>(k), "Gaussian mixture cluster is empty");
    const Eigen::VectorXd mu = curves.values.transpose() * tau.col(k) / W;
    const Eigen::MatrixXd centred = curves.values.rowwise() - mu.transpose();
    Eigen::VectorXd var = centred.array().square().matrix().transpose() * tau.col(k) / W;
    if (cov == Covariance::Spherical) var.setConstant(var.mean());
    for (Index j = 0; j < var.size(); ++j)
      if (!(var[j] >= floor)) {
        var[j] = floor;
        floored = true;
      }
    params.means.push_back(mu);
    params.variances.push_back(var);
  }
  return params;
}

inline Eigen::MatrixXd gmm_log_density(const CurveSet& curves, const GmmParams& params) {
  Eigen::MatrixXd ld(curves.n(), params.K());
  for (int k = 0; k < params.K(); ++k) {
    const auto& mu = params.means[static_cast<std::size_t>(k)];
    const auto& var = params.variances[static_cast<std::size_t>(k)];
    const double c = (kLog2Pi + var.array().log()).sum();
    const Eigen::ArrayXd inv = var.array().inverse();
    for (Index i = 0; i < curves.n(); ++i)
      ld(i, k) = -0.5 * (((curves.values.row(i).transpose() - mu).array().square() * inv).sum() + c);
  }
  return ld;
}

}  // namespace detail

/// Gaussian mixture on the raw m-dimensional curves, fitted by EM.
inline GmmFit fit_gmm(const CurveSet& curves, FitConfig config, Covariance cov = Covariance::Diagonal) {
  curves.validate();
  config.R = {1};
  config.p = 0;
  config.validate(curves);
  const double floor = variance_floor(curves);

  auto run = [&](int restart) {
    auto rng = restart_rng(config.seed, restart);
    GmmFit fit;
    fit.restart = restart;
    bool floored = false;
    const std::vector<int> z = initial_partition(curves, config, rng);
    fit.params = detail::gmm_m_step(curves, one_hot(z, config.K), cov, floor, floored);
    if (floored) fit.events.push_back({EventKind::VarianceFloor, restart, 0, -1, "coordinate variance held at the floor"});
    Posterior post;
    for (int it = 0;; ++it) {
      post = e_step(detail::gmm_log_density(curves, fit.params), fit.params.alpha);
      fit.criterion_trace.push_back(post.log_likelihood);
      if (it > 0 && relative_change_below(fit.criterion_trace[it - 1], post.log_likelihood, config.tol)) {
        fit.converged = true;
        break;
      }
      if (it == config.max_iter) break;
      Eigen::MatrixXd tau = post.tau;
      for (int k : detail::repair_empty_clusters(tau))
        fit.events.push_back({EventKind::EmptyCluster, restart, it + 1, k, "cluster reseeded from least confident curve"});
      fit.params = detail::gmm_m_step(curves, tau, cov, floor, floored);
      if (floored)
        fit.events.push_back({EventKind::VarianceFloor, restart, it + 1, -1, "coordinate variance held at the floor"});
      ++fit.iterations;
    }
    fit.tau = post.tau;
    fit.labels = argmax_rows(post.log_post);
    fit.log_likelihood = post.log_likelihood;
    fit.complete_log_likelihood = complete_log_likelihood(post.log_post, fit.labels);
    return fit;
  };
  return best_of_restarts<GmmFit>(config.n_restarts, config.threads, run,
                                  [](const GmmFit& f) { return f.log_likelihood; });
}

/// Hard-label cluster means, the GMM prototypes used for inertia.
inline std::vector<Eigen::VectorXd> hard_means(const CurveSet& curves, const std::vector<int>& labels, int K) {
  std::vector<Eigen::VectorXd> g(static_cast<std::size_t>(K), Eigen::VectorXd::Zero(curves.m()));
  std::vector<int> count(static_cast<std::size_t>(K), 0);
  for (Index i = 0; i < curves.n(); ++i) {
    const auto k = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    g[k] += curves.values.row(i).transpose();
    ++count[k];
  }
  for (std::size_t k = 0; k < g.size(); ++k)
    if (count[k] > 0) g[k] /= count[k];
  return g;
}

}  // namespace pwrm
