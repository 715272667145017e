#pragma once

// Types and steps shared by every mixture fitter: configuration, fit
// results, the posterior computation, random initial partitions and the
// multi-restart driver.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "pwrm/dataset.hpp"
#include "pwrm/errors.hpp"
#include "pwrm/piecewise.hpp"

namespace pwrm {

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2 pi)

enum class PartitionInit { Random, Provided };

/// First segmentation of every cluster. Optimal runs the dynamic program on
/// the initial partition directly.
enum class SegmentationInit { Uniform, RandomContiguous, Optimal };

struct FitConfig {
  int K = 2;
  std::vector<int> R{5};  // one shared entry, or one per cluster
  int p = 1;
  int max_iter = 1000;
  double tol = 1e-6;
  int n_restarts = 10;
  std::uint64_t seed = 0;
  PartitionInit init = PartitionInit::Random;
  std::vector<int> initial_labels;  // 0-based, with PartitionInit::Provided
  SegmentationInit segmentation_init = SegmentationInit::RandomContiguous;
  int threads = 1;

  int regimes(int k) const { return R.size() == 1 ? R.front() : R[static_cast<std::size_t>(k)]; }

  void validate(const CurveSet& curves) const {
    if (K < 1) throw InvalidData("K must be >= 1");
    if (K > curves.n()) throw InvalidData("K exceeds the number of curves");
    if (p < 0) throw InvalidData("p must be >= 0");
    if (R.empty() || (R.size() != 1 && static_cast<int>(R.size()) != K))
      throw InvalidData("R must have one entry or K entries");
    for (int r : R) {
      if (r < 1) throw InvalidData("R must be >= 1");
      if (static_cast<Index>(r) * (p + 1) > curves.m())
        throw InfeasibleSegmentation("R * (p + 1) exceeds the number of time points");
    }
    if (!(tol > 0.0)) throw InvalidData("tol must be > 0");
    if (n_restarts < 1) throw InvalidData("n_restarts must be >= 1");
    if (max_iter < 1) throw InvalidData("max_iter must be >= 1");
    if (init == PartitionInit::Provided) {
      if (static_cast<Index>(initial_labels.size()) != curves.n())
        throw InvalidData("initial labels must cover every curve");
      for (int z : initial_labels)
        if (z < 0 || z >= K) throw InvalidData("initial label out of range");
    }
  }
};

enum class EventKind { VarianceFloor, EmptyCluster };

/// Something the fitter did that the optimised criterion does not account
/// for. `iteration` is the criterion-trace index first affected.
struct FitEvent {
  EventKind kind;
  int restart = 0;
  int iteration = 0;
  int cluster = -1;
  std::string detail;
};

inline const char* to_string(EventKind k) {
  return k == EventKind::VarianceFloor ? "variance-floor" : "empty-cluster";
}

template <class Params>
struct FitResult {
  Params params;
  Eigen::MatrixXd tau;                  // n x K posteriors
  std::vector<int> labels;              // 0-based MAP labels
  std::vector<double> criterion_trace;  // L for EM, L_c for CEM
  bool converged = false;
  int iterations = 0;
  double log_likelihood = 0.0;
  double complete_log_likelihood = 0.0;
  int restart = 0;
  bool degenerate = false;  // final parameters rest on the variance floor
  std::vector<FitEvent> events;

  int K() const { return static_cast<int>(tau.cols()); }
  Index n() const { return tau.rows(); }

  bool event_at(int iteration) const {
    return std::any_of(events.begin(), events.end(), [&](const FitEvent& e) { return e.iteration == iteration; });
  }
};

/// Piecewise regression mixture parameters.
struct PwrmParams {
  Eigen::VectorXd alpha;
  std::vector<PiecewiseModel> clusters;
  int degree = 0;

  int K() const { return static_cast<int>(clusters.size()); }

  /// sum_k R_k (p + 3) - 1.
  int free_parameters() const {
    int nu = -1;
    for (const auto& c : clusters) nu += c.regimes() * (degree + 3);
    return nu;
  }

  Eigen::VectorXd prototype(int k, const PolyBasis& basis) const {
    return clusters[static_cast<std::size_t>(k)].mean_curve(basis);
  }

  void validate() const {
    if (alpha.size() != K()) throw InvalidData("alpha and clusters disagree in count");
    if ((alpha.array() < 0.0).any() || std::abs(alpha.sum() - 1.0) > 1e-12)
      throw InvalidData("alpha must lie on the simplex");
  }
};

using PwrmFit = FitResult<PwrmParams>;

/// ||a - b||^2, shared by every nearest-prototype and homoskedastic
/// density computation so they round identically.
template <class A, class B>
double squared_distance(const A& a, const B& b) {
  return (a - b).squaredNorm();
}

/// n x K matrix of log p(y_i | z_i = k) under the piecewise model of each
/// cluster, Gaussian constants included.
inline Eigen::MatrixXd log_density_per_cluster(const CurveSet& curves, const PolyBasis& basis,
                                               const PwrmParams& params) {
  const Index n = curves.n();
  const Index m = curves.m();
  Eigen::MatrixXd ld(n, params.K());
  for (int k = 0; k < params.K(); ++k) {
    const auto& model = params.clusters[static_cast<std::size_t>(k)];
    if (model.fits.empty()) {
      ld.col(k).setConstant(-kInf);
      continue;
    }
    const Eigen::VectorXd g = model.mean_curve(basis);
    const double s0 = model.fits.front().sigma2;
    const bool homoskedastic =
        std::all_of(model.fits.begin(), model.fits.end(), [&](const SegmentFit& f) { return f.sigma2 == s0; });
    if (homoskedastic) {
      const double c = static_cast<double>(m) * (kLog2Pi + std::log(s0));
      for (Index i = 0; i < n; ++i)
        ld(i, k) = -0.5 * (squared_distance(curves.values.row(i).transpose(), g) / s0 + c);
      continue;
    }
    for (Index i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int r = 0; r < model.regimes(); ++r) {
        const auto& seg = model.segmentation;
        const double s2 = model.fits[static_cast<std::size_t>(r)].sigma2;
        const double sse =
            (curves.values.row(i).segment(seg.begin(r), seg.length(r)).transpose() - g.segment(seg.begin(r), seg.length(r)))
                .squaredNorm();
        acc += -0.5 * (sse / s2 + static_cast<double>(seg.length(r)) * (kLog2Pi + std::log(s2)));
      }
      ld(i, k) = acc;
    }
  }
  return ld;
}

struct Posterior {
  Eigen::MatrixXd tau;       // n x K, rows sum to 1
  Eigen::MatrixXd log_post;  // log alpha_k + log density, unnormalised
  double log_likelihood = 0.0;
};

/// Posterior membership probabilities by a row-wise log-sum-exp.
inline Posterior e_step(const Eigen::MatrixXd& log_densities, const Eigen::VectorXd& alpha) {
  if (alpha.size() != log_densities.cols()) throw InvalidData("alpha and densities disagree in K");
  Posterior post;
  const Index n = log_densities.rows();
  const Index K = log_densities.cols();
  post.log_post.resize(n, K);
  post.tau.resize(n, K);
  for (Index k = 0; k < K; ++k) {
    const double la = alpha[k] > 0.0 ? std::log(alpha[k]) : -kInf;
    post.log_post.col(k) = log_densities.col(k).array() + la;
  }
  for (Index i = 0; i < n; ++i) {
    const double mx = post.log_post.row(i).maxCoeff();
    if (!std::isfinite(mx)) throw InvalidData("curve has zero density under every cluster");
    double s = 0.0;
    for (Index k = 0; k < K; ++k) {
      const double e = std::exp(post.log_post(i, k) - mx);
      post.tau(i, k) = e;
      s += e;
    }
    post.tau.row(i) /= s;
    post.log_likelihood += mx + std::log(s);
  }
  return post;
}

/// Row-wise argmax; the smallest index wins ties.
inline std::vector<int> argmax_rows(const Eigen::MatrixXd& scores) {
  std::vector<int> z(static_cast<std::size_t>(scores.rows()), 0);
  for (Index i = 0; i < scores.rows(); ++i) {
    int best = 0;
    for (Index k = 1; k < scores.cols(); ++k)
      if (scores(i, k) > scores(i, best)) best = static_cast<int>(k);
    z[static_cast<std::size_t>(i)] = best;
  }
  return z;
}

inline double complete_log_likelihood(const Eigen::MatrixXd& log_post, const std::vector<int>& z) {
  double lc = 0.0;
  for (Index i = 0; i < log_post.rows(); ++i) lc += log_post(i, z[static_cast<std::size_t>(i)]);
  return lc;
}

inline Eigen::MatrixXd one_hot(const std::vector<int>& z, int K) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(static_cast<Index>(z.size()), K);
  for (std::size_t i = 0; i < z.size(); ++i) t(static_cast<Index>(i), z[i]) = 1.0;
  return t;
}

inline std::vector<int> cluster_sizes(const std::vector<int>& z, int K) {
  std::vector<int> sizes(static_cast<std::size_t>(K), 0);
  for (int l : z) ++sizes[static_cast<std::size_t>(l)];
  return sizes;
}

/// Generator for restart `restart` of a fit seeded with `seed`.
inline std::mt19937_64 restart_rng(std::uint64_t seed, int restart) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(restart)};
  return std::mt19937_64(seq);
}

/// Random hard partition with every cluster non-empty.
template <class Rng>
std::vector<int> random_partition(Index n, int K, Rng& rng) {
  if (K < 1 || K > n) throw InvalidData("random partition needs 1 <= K <= n");
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> pick(0, K - 1);
  std::vector<int> z(static_cast<std::size_t>(n));
  for (std::size_t q = 0; q < order.size(); ++q)
    z[static_cast<std::size_t>(order[q])] = q < static_cast<std::size_t>(K) ? static_cast<int>(q) : pick(rng);
  return z;
}

template <class Rng>
std::vector<int> initial_partition(const CurveSet& curves, const FitConfig& config, Rng& rng) {
  if (config.init == PartitionInit::Provided) return config.initial_labels;
  return random_partition(curves.n(), config.K, rng);
}

/// Segmentation used to seed cluster k. Restart 0 always starts uniform
/// under RandomContiguous so that the uniform start is among the tries.
template <class Rng>
std::optional<Segmentation> initial_segmentation(const FitConfig& config, int restart, int k, Index m, int lmin,
                                                 Rng& rng) {
  switch (config.segmentation_init) {
    case SegmentationInit::Uniform:
      return uniform_segmentation(m, config.regimes(k), lmin);
    case SegmentationInit::RandomContiguous:
      if (restart == 0) return uniform_segmentation(m, config.regimes(k), lmin);
      return random_segmentation(m, config.regimes(k), lmin, rng);
    case SegmentationInit::Optimal:
      return std::nullopt;
  }
  return std::nullopt;
}

namespace detail {

template <class F>
void parallel_for(int count, int threads, F&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int q = 0; q < count; ++q) fn(q);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int q = next++; q < count; q = next++) fn(q);
    });
}

}  // namespace detail

template <class Result>
bool is_degenerate(const Result& r) {
  if constexpr (requires { r.degenerate; })
    return r.degenerate;
  else
    return false;
}

/// Runs `run(restart)` for every restart and keeps the highest `score`
/// among the non-degenerate results (among all results when every one is
/// degenerate); scores within 1e-9 are broken by fewer iterations, then by
/// the lower restart index. Restarts that throw are skipped; if all do,
/// FitFailed.
template <class Result, class Run, class Score>
Result best_of_restarts(int n_restarts, int threads, Run&& run, Score&& score) {
  std::vector<std::optional<Result>> results(static_cast<std::size_t>(n_restarts));
  std::vector<std::string> failures(static_cast<std::size_t>(n_restarts));
  detail::parallel_for(n_restarts, threads, [&](int q) {
    try {
      results[static_cast<std::size_t>(q)] = run(q);
    } catch (const Error& e) {
      failures[static_cast<std::size_t>(q)] = e.what();
    }
  });
  int best = -1;
  for (int q = 0; q < n_restarts; ++q) {
    const auto& r = results[static_cast<std::size_t>(q)];
    if (!r || !std::isfinite(score(*r))) continue;
    if (best < 0) {
      best = q;
      continue;
    }
    const auto& b = *results[static_cast<std::size_t>(best)];
    if (is_degenerate(*r) != is_degenerate(b)) {
      if (is_degenerate(b)) best = q;
      continue;
    }
    const double diff = score(*r) - score(b);
    if (diff > 1e-9 || (std::abs(diff) <= 1e-9 && r->iterations < b.iterations)) best = q;
  }
  if (best < 0) {
    std::string msg = "all " + std::to_string(n_restarts) + " restarts failed";
    for (int q = 0; q < n_restarts; ++q)
      if (!failures[static_cast<std::size_t>(q)].empty())
        msg += "; restart " + std::to_string(q) + ": " + failures[static_cast<std::size_t>(q)];
    throw FitFailed(msg);
  }
  return std::move(*results[static_cast<std::size_t>(best)]);
}

inline bool relative_change_below(double prev, double cur, double tol) {
  return std::abs(cur - prev) <= tol * std::abs(prev);
}

}  // namespace pwrm
