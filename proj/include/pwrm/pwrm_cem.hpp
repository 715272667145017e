#pragma once

// Classification EM for the piecewise regression mixture, the K-means-like
// alternating algorithm for piecewise constant prototypes, and a checker
// that runs both side by side under the constraints that make them agree.

#include <Eigen/Core>

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pwrm/mixture.hpp"
#include "pwrm/pwrm_em.hpp"

namespace pwrm {

struct CemConstraints {
  bool equal_proportions = false;  // alpha_k = 1/K
  bool pooled_variance = false;    // one sigma^2 shared by every cluster and segment
};

/// Snapshot after each hard M-step / relocation: the partition the
/// parameters were fitted on, their segmentations and the criterion.
struct HardStep {
  std::vector<int> labels;
  std::vector<Segmentation> segmentations;
  double distortion = 0.0;  // sum_i ||y_i - g_{z_i}||^2
};

using HardStepObserver = std::function<void(const HardStep&)>;

namespace detail {

inline std::vector<Index> members(const std::vector<int>& z, int k) {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < z.size(); ++i)
    if (z[i] == k) rows.push_back(static_cast<Index>(i));
  return rows;
}

inline double distortion(const CurveSet& curves, const std::vector<int>& z, const std::vector<Eigen::VectorXd>& proto) {
  double e = 0.0;
  for (Index i = 0; i < curves.n(); ++i)
    e += squared_distance(curves.values.row(i).transpose(), proto[static_cast<std::size_t>(z[static_cast<std::size_t>(i)])]);
  return e;
}

/// Hard M-step: each cluster refitted on its own curves with unit weights.
/// `fixed` supplies the starting segmentations for the initial step.
inline PwrmParams hard_m_step(const CurveSet& curves, const PolyBasis& basis, const std::vector<int>& z,
                              const FitConfig& config, const CemConstraints& cons, double floor,
                              const std::vector<std::optional<Segmentation>>* fixed = nullptr) {
  PwrmParams params;
  params.degree = basis.degree();
  params.alpha.resize(config.K);
  const auto sizes = cluster_sizes(z, config.K);
  const SegmentOptions opts{cons.pooled_variance ? CostKind::SumOfSquares : CostKind::Likelihood, floor};
  double pooled_sse = 0.0;
  for (int k = 0; k < config.K; ++k) {
    if (sizes[static_cast<std::size_t>(k)] == 0) throw EmptyCluster(k, "hard partition leaves a cluster empty");
    params.alpha[k] = cons.equal_proportions ? 1.0 / config.K
                                             : static_cast<double>(sizes[static_cast<std::size_t>(k)]) / curves.n();
    const CurveSet sub = curves.subset(members(z, k));
    const std::vector<double> ones(static_cast<std::size_t>(sub.n()), 1.0);
    const std::optional<Segmentation> seg = fixed ? (*fixed)[static_cast<std::size_t>(k)] : std::nullopt;
    params.clusters.push_back(seg ? fit_on_segmentation(sub, basis, *seg, ones, opts)
                                  : fit_piecewise(sub, basis, config.regimes(k), ones, opts));
    for (const auto& f : params.clusters.back().fits) pooled_sse += f.weighted_sse;
  }
  if (cons.pooled_variance) {
    const double raw = pooled_sse / (static_cast<double>(curves.n()) * static_cast<double>(curves.m()));
    const bool floored = !(raw >= floor);
    const double s2 = floored ? floor : raw;
    for (auto& c : params.clusters)
      for (auto& f : c.fits) {
        f.sigma2 = s2;
        f.floored = floored;
      }
  }
  return params;
}

inline std::vector<Segmentation> segmentations_of(const PwrmParams& params) {
  std::vector<Segmentation> s;
  for (const auto& c : params.clusters) s.push_back(c.segmentation);
  return s;
}

inline std::vector<Eigen::VectorXd> prototypes_of(const PwrmParams& params, const PolyBasis& basis) {
  std::vector<Eigen::VectorXd> g;
  for (int k = 0; k < params.K(); ++k) g.push_back(params.prototype(k, basis));
  return g;
}

/// Moves, into every empty cluster, the curve scoring lowest under
/// `confidence`. Returns the clusters repaired.
template <class Confidence>
std::vector<int> repair_hard_partition(std::vector<int>& z, int K, Confidence&& confidence) {
  std::vector<int> repaired;
  std::vector<bool> moved(z.size(), false);
  for (int pass = 0; pass < K; ++pass) {
    const auto sizes = cluster_sizes(z, K);
    bool any = false;
    for (int k = 0; k < K; ++k) {
      if (sizes[static_cast<std::size_t>(k)] > 0) continue;
      std::size_t pick = z.size();
      double lowest = kInf;
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (moved[i]) continue;
        const double c = confidence(i);
        if (c < lowest) {
          lowest = c;
          pick = i;
        }
      }
      if (pick == z.size()) throw FitFailed("cannot repopulate empty cluster");
      moved[pick] = true;
      z[pick] = k;
      repaired.push_back(k);
      any = true;
      break;  // sizes changed; recount
    }
    if (!any) break;
  }
  return repaired;
}

inline PwrmFit run_cem(const CurveSet& curves, const PolyBasis& basis, const FitConfig& config,
                       const CemConstraints& cons, int restart, const HardStepObserver& observe = {}) {
  auto rng = restart_rng(config.seed, restart);
  const double floor = variance_floor(curves);
  PwrmFit fit;
  fit.restart = restart;
  std::vector<int> z = initial_partition(curves, config, rng);
  std::vector<std::optional<Segmentation>> start;
  for (int k = 0; k < config.K; ++k)
    start.push_back(initial_segmentation(config, restart, k, curves.m(), basis.min_segment_length(), rng));
  fit.params = hard_m_step(curves, basis, z, config, cons, floor, &start);
  // A stable partition ends the run only once the segmentations are optimal.
  bool segmented = std::none_of(start.begin(), start.end(), [](const auto& s) { return s.has_value(); });
  note_floor(fit.events, fit.params, restart, 0);
  if (observe) observe({z, segmentations_of(fit.params), distortion(curves, z, prototypes_of(fit.params, basis))});

  Posterior post = e_step(log_density_per_cluster(curves, basis, fit.params), fit.params.alpha);
  fit.criterion_trace.push_back(complete_log_likelihood(post.log_post, z));
  for (int it = 1; it <= config.max_iter; ++it) {
    std::vector<int> next = argmax_rows(post.log_post);
    for (int k : repair_hard_partition(next, config.K,
                                       [&](std::size_t i) { return post.tau.row(static_cast<Index>(i)).maxCoeff(); }))
      fit.events.push_back({EventKind::EmptyCluster, restart, it, k, "cluster reseeded from least confident curve"});
    if (next == z && segmented) {
      fit.converged = true;
      break;
    }
    z = std::move(next);
    fit.params = hard_m_step(curves, basis, z, config, cons, floor);
    segmented = true;
    note_floor(fit.events, fit.params, restart, it);
    ++fit.iterations;
    if (observe) observe({z, segmentations_of(fit.params), distortion(curves, z, prototypes_of(fit.params, basis))});
    post = e_step(log_density_per_cluster(curves, basis, fit.params), fit.params.alpha);
    fit.criterion_trace.push_back(complete_log_likelihood(post.log_post, z));
    if (relative_change_below(fit.criterion_trace[it - 1], fit.criterion_trace[it], config.tol)) {
      fit.converged = true;
      break;
    }
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

/// Classification EM; keeps the restart with the highest final complete-data
/// log-likelihood.
inline PwrmFit fit_cem(const CurveSet& curves, const FitConfig& config, const CemConstraints& cons = {}) {
  curves.validate();
  config.validate(curves);
  const PolyBasis basis(curves.grid, config.p);
  return best_of_restarts<PwrmFit>(
      config.n_restarts, config.threads, [&](int r) { return detail::run_cem(curves, basis, config, cons, r); },
      [](const PwrmFit& f) { return f.complete_log_likelihood; });
}

/// Piecewise constant prototypes with their segmentations.
struct KMeansLikeModel {
  std::vector<Segmentation> segmentations;
  std::vector<Eigen::VectorXd> prototypes;  // one length-m curve per cluster

  int K() const { return static_cast<int>(prototypes.size()); }

  /// sum_k R_k (p + 2) - K with p = 0: levels plus interior boundaries.
  int free_parameters() const {
    int nu = -K();
    for (const auto& s : segmentations) nu += 2 * s.segments();
    return nu;
  }
};

struct KMeansLikeResult {
  std::vector<int> labels;  // 0-based hard partition
  KMeansLikeModel model;
  std::vector<double> distortion_trace;  // E after every relocation
  bool converged = false;
  int iterations = 0;
  double distortion = 0.0;
  int restart = 0;
  std::vector<FitEvent> events;
};

namespace detail {

inline KMeansLikeModel relocate(const CurveSet& curves, const PolyBasis& basis, const std::vector<int>& z,
                                const FitConfig& config, double floor) {
  const CemConstraints cons{true, true};
  const PwrmParams params = hard_m_step(curves, basis, z, config, cons, floor);
  return {segmentations_of(params), prototypes_of(params, basis)};
}

inline KMeansLikeResult run_kmeans(const CurveSet& curves, const PolyBasis& basis, const FitConfig& config,
                                   int restart, const HardStepObserver& observe = {}) {
  auto rng = restart_rng(config.seed, restart);
  const double floor = variance_floor(curves);
  KMeansLikeResult res;
  res.restart = restart;
  std::vector<int> z = initial_partition(curves, config, rng);
  const Index n = curves.n();
  for (int it = 0;; ++it) {
    res.model = relocate(curves, basis, z, config, floor);
    res.distortion = distortion(curves, z, res.model.prototypes);
    res.distortion_trace.push_back(res.distortion);
    if (observe) observe({z, res.model.segmentations, res.distortion});
    if (it == config.max_iter) break;

    std::vector<int> next(static_cast<std::size_t>(n));
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = kInf;
      for (int k = 0; k < config.K; ++k) {
        const double d = squared_distance(curves.values.row(i).transpose(), res.model.prototypes[static_cast<std::size_t>(k)]);
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      next[static_cast<std::size_t>(i)] = best;
      dist[static_cast<std::size_t>(i)] = bd;
    }
    // The farthest curve is the least well represented one.
    for (int k : repair_hard_partition(next, config.K, [&](std::size_t i) { return -dist[i]; }))
      res.events.push_back({EventKind::EmptyCluster, restart, it + 1, k, "cluster reseeded from farthest curve"});
    if (next == z) {
      res.converged = true;
      break;
    }
    z = std::move(next);
    ++res.iterations;
  }
  res.labels = z;
  return res;
}

}  // namespace detail

/// Alternates optimal piecewise constant relocation with nearest-prototype
/// assignment. Requires p = 0. Keeps the restart with the lowest distortion.
inline KMeansLikeResult fit_kmeans_like(const CurveSet& curves, const FitConfig& config) {
  curves.validate();
  if (config.p != 0) throw InvalidData("kmeans requires p=0");
  config.validate(curves);
  const PolyBasis basis(curves.grid, 0);
  return best_of_restarts<KMeansLikeResult>(
      config.n_restarts, config.threads, [&](int r) { return detail::run_kmeans(curves, basis, config, r); },
      [](const KMeansLikeResult& f) { return -f.distortion; });
}

struct EquivalenceReport {
  int steps = 0;                  // matched relocation steps
  std::vector<double> cem_distortion;     // J along the constrained CEM run
  std::vector<double> kmeans_distortion;  // E along the K-means-like run
  std::vector<std::vector<int>> partitions;
};

/// Runs constrained CEM (alpha_k = 1/K, pooled variance, p = 0, optimal
/// initial segmentation) and the K-means-like algorithm from the same
/// initial partition and demands identical partitions, segmentations and
/// distortions at every step. Throws EquivalenceViolation at the first
/// difference.
inline EquivalenceReport check_prop1_equivalence(const CurveSet& curves, FitConfig config) {
  curves.validate();
  if (config.p != 0) throw InvalidData("the equivalence holds only for p=0");
  config.n_restarts = 1;
  config.validate(curves);
  {
    auto rng = restart_rng(config.seed, 0);
    config.initial_labels = initial_partition(curves, config, rng);
    config.init = PartitionInit::Provided;
  }
  config.segmentation_init = SegmentationInit::Optimal;
  config.tol = std::numeric_limits<double>::min();  // stop on a stable partition only
  const PolyBasis basis(curves.grid, 0);

  std::vector<HardStep> cem_steps, km_steps;
  detail::run_cem(curves, basis, config, {true, true}, 0, [&](const HardStep& s) { cem_steps.push_back(s); });
  detail::run_kmeans(curves, basis, config, 0, [&](const HardStep& s) { km_steps.push_back(s); });

  EquivalenceReport rep;
  const std::size_t common = std::min(cem_steps.size(), km_steps.size());
  for (std::size_t q = 0; q < common; ++q) {
    const auto& a = cem_steps[q];
    const auto& b = km_steps[q];
    const int it = static_cast<int>(q);
    if (a.labels != b.labels) throw EquivalenceViolation(it, "partitions differ at step " + std::to_string(it));
    if (a.segmentations != b.segmentations)
      throw EquivalenceViolation(it, "segmentations differ at step " + std::to_string(it));
    if (a.distortion != b.distortion) throw EquivalenceViolation(it, "distortions differ at step " + std::to_string(it));
    rep.cem_distortion.push_back(a.distortion);
    rep.kmeans_distortion.push_back(b.distortion);
    rep.partitions.push_back(a.labels);
  }
  if (cem_steps.size() != km_steps.size())
    throw EquivalenceViolation(static_cast<int>(common), "runs stop after different numbers of steps");
  rep.steps = static_cast<int>(common);
  return rep;
}

}  // namespace pwrm
