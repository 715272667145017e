#pragma once

// Maximum-likelihood fitting of the piecewise regression mixture by EM.

#include <Eigen/Core>

#include <span>
#include <string>
#include <vector>

#include "pwrm/mixture.hpp"

namespace pwrm {

struct MStep {
  PwrmParams params;
  std::vector<int> empty;  // clusters whose total weight fell below 1e-8; left unfitted
};

inline constexpr double kEmptyWeight = 1e-8;

/// Weighted M-step: mixing proportions from the column sums of tau, then
/// one optimal weighted segmentation and fit per cluster.
inline MStep m_step(const CurveSet& curves, const PolyBasis& basis, const Eigen::MatrixXd& tau, const FitConfig& config,
                    double floor) {
  if (tau.rows() != curves.n() || tau.cols() != config.K) throw InvalidData("tau has the wrong shape");
  MStep out;
  out.params.degree = basis.degree();
  out.params.alpha = tau.colwise().sum().transpose() / static_cast<double>(curves.n());
  out.params.clusters.resize(static_cast<std::size_t>(config.K));
  const SegmentOptions opts{CostKind::Likelihood, floor};
  for (int k = 0; k < config.K; ++k) {
    if (tau.col(k).sum() < kEmptyWeight) {
      out.empty.push_back(k);
      continue;
    }
    std::span<const double> w(tau.col(k).data(), static_cast<std::size_t>(tau.rows()));
    out.params.clusters[static_cast<std::size_t>(k)] = fit_piecewise(curves, basis, config.regimes(k), w, opts);
  }
  return out;
}

namespace detail {

/// Gives every empty cluster the curve with the least confident posterior
/// as a point mass. Returns the clusters that were repaired.
inline std::vector<int> repair_empty_clusters(Eigen::MatrixXd& tau) {
  std::vector<int> repaired;
  std::vector<bool> moved(static_cast<std::size_t>(tau.rows()), false);
  for (int pass = 0; pass < tau.cols(); ++pass) {
    bool any = false;
    for (Index k = 0; k < tau.cols(); ++k) {
      if (tau.col(k).sum() >= kEmptyWeight) continue;
      Index pick = -1;
      double lowest = kInf;
      for (Index i = 0; i < tau.rows(); ++i) {
        if (moved[static_cast<std::size_t>(i)]) continue;
        const double c = tau.row(i).maxCoeff();
        if (c < lowest) {
          lowest = c;
          pick = i;
        }
      }
      if (pick < 0) throw FitFailed("cannot repopulate empty cluster");
      moved[static_cast<std::size_t>(pick)] = true;
      tau.row(pick).setZero();
      tau(pick, k) = 1.0;
      repaired.push_back(static_cast<int>(k));
      any = true;
    }
    if (!any) break;
  }
  return repaired;
}

/// Initial parameters: fits on the initial hard partition, each cluster on
/// its configured starting segmentation.
template <class Rng>
PwrmParams initial_params(const CurveSet& curves, const PolyBasis& basis, const std::vector<int>& z,
                          const FitConfig& config, int restart, const SegmentOptions& opts, Rng& rng) {
  const Eigen::MatrixXd t = one_hot(z, config.K);
  PwrmParams params;
  params.degree = basis.degree();
  params.alpha = t.colwise().sum().transpose() / static_cast<double>(curves.n());
  for (int k = 0; k < config.K; ++k) {
    std::span<const double> w(t.col(k).data(), static_cast<std::size_t>(t.rows()));
    if (t.col(k).sum() < kEmptyWeight) throw EmptyCluster(k, "initial partition leaves a cluster empty");
    const auto seg = initial_segmentation(config, restart, k, curves.m(), basis.min_segment_length(), rng);
    params.clusters.push_back(seg ? fit_on_segmentation(curves, basis, *seg, w, opts)
                                  : fit_piecewise(curves, basis, config.regimes(k), w, opts));
  }
  return params;
}

inline void note_floor(std::vector<FitEvent>& events, const PwrmParams& params, int restart, int iteration) {
  for (int k = 0; k < params.K(); ++k)
    if (params.clusters[static_cast<std::size_t>(k)].any_floored())
      events.push_back({EventKind::VarianceFloor, restart, iteration, k, "segment variance held at the floor"});
}

inline PwrmFit run_em(const CurveSet& curves, const PolyBasis& basis, const FitConfig& config, int restart) {
  auto rng = restart_rng(config.seed, restart);
  const double floor = variance_floor(curves);
  const SegmentOptions opts{CostKind::Likelihood, floor};
  PwrmFit fit;
  fit.restart = restart;
  const auto z0 = initial_partition(curves, config, rng);
  fit.params = initial_params(curves, basis, z0, config, restart, opts, rng);
  note_floor(fit.events, fit.params, restart, 0);

  Posterior post;
  for (int it = 0;; ++it) {
    post = e_step(log_density_per_cluster(curves, basis, fit.params), fit.params.alpha);
    fit.criterion_trace.push_back(post.log_likelihood);
    if (it > 0 && relative_change_below(fit.criterion_trace[it - 1], post.log_likelihood, config.tol)) {
      fit.converged = true;
      break;
    }
    if (it == config.max_iter) break;
    Eigen::MatrixXd tau = post.tau;
    for (int k : repair_empty_clusters(tau))
      fit.events.push_back({EventKind::EmptyCluster, restart, it + 1, k, "cluster reseeded from least confident curve"});
    auto step = m_step(curves, basis, tau, config, floor);
    if (!step.empty.empty()) throw EmptyCluster(step.empty.front(), "cluster empty after repair");
    fit.params = std::move(step.params);
    note_floor(fit.events, fit.params, restart, it + 1);
    ++fit.iterations;
  }
  fit.tau = post.tau;
  fit.labels = argmax_rows(post.log_post);
  fit.log_likelihood = post.log_likelihood;
  fit.complete_log_likelihood = complete_log_likelihood(post.log_post, fit.labels);
  fit.degenerate = std::any_of(fit.params.clusters.begin(), fit.params.clusters.end(),
                               [](const PiecewiseModel& c) { return c.any_floored(); });
  return fit;
}

}  // namespace detail

/// EM over `config.n_restarts` starts; keeps the highest final
/// log-likelihood.
inline PwrmFit fit_em(const CurveSet& curves, const FitConfig& config) {
  curves.validate();
  config.validate(curves);
  const PolyBasis basis(curves.grid, config.p);
  return best_of_restarts<PwrmFit>(
      config.n_restarts, config.threads, [&](int r) { return detail::run_em(curves, basis, config, r); },
      [](const PwrmFit& f) { return f.log_likelihood; });
}

}  // namespace pwrm
