#pragma once

// Information criteria, grid model selection, and clustering quality
// measures (misclassification under the best label matching, intra-cluster
// inertia).

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pwrm/baselines.hpp"
#include "pwrm/mixture.hpp"
#include "pwrm/pwrm_cem.hpp"
#include "pwrm/pwrm_em.hpp"

namespace pwrm {

inline double penalty(int free_parameters, Index n) {
  return 0.5 * free_parameters * std::log(static_cast<double>(n));
}

inline double bic(double log_likelihood, int free_parameters, Index n) {
  return log_likelihood - penalty(free_parameters, n);
}

inline double icl(double complete_log_likelihood, int free_parameters, Index n) {
  return complete_log_likelihood - penalty(free_parameters, n);
}

template <class Params>
double bic(const FitResult<Params>& fit) {
  return bic(fit.log_likelihood, fit.params.free_parameters(), fit.n());
}

template <class Params>
double icl(const FitResult<Params>& fit) {
  return icl(fit.complete_log_likelihood, fit.params.free_parameters(), fit.n());
}

/// The K-means-like criterion is -E/2 in place of a complete-data
/// log-likelihood.
inline double icl(const KMeansLikeResult& fit, Index n) {
  return icl(-0.5 * fit.distortion, fit.model.free_parameters(), n);
}

// ---------------------------------------------------------------------------
// Grid selection

enum class Algorithm { PwrmEm, PwrmCem, KMeansLike };
enum class Criterion { Bic, Icl };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::PwrmEm: return "pwrm-em";
    case Algorithm::PwrmCem: return "pwrm-cem";
    case Algorithm::KMeansLike: return "kmeans";
  }
  return "?";
}

inline const char* to_string(Criterion c) { return c == Criterion::Bic ? "bic" : "icl"; }

struct IntRange {
  int lo = 1;
  int hi = 1;
  bool contains(int v) const { return lo <= v && v <= hi; }
};

struct SelectionGridSpec {
  IntRange K{1, 5};
  IntRange R{1, 8};
  IntRange p{0, 3};

  void validate() const {
    if (K.lo < 1 || R.lo < 1 || p.lo < 0 || K.lo > K.hi || R.lo > R.hi || p.lo > p.hi)
      throw InvalidData("malformed selection grid");
  }
};

enum class CellStatus { Fitted, Infeasible, Failed, Unsupported };

inline const char* to_string(CellStatus s) {
  switch (s) {
    case CellStatus::Fitted: return "fitted";
    case CellStatus::Infeasible: return "infeasible";
    case CellStatus::Failed: return "failed";
    case CellStatus::Unsupported: return "unsupported";
  }
  return "?";
}

struct SelectionCell {
  int K = 0, R = 0, p = 0;
  CellStatus status = CellStatus::Fitted;
  double log_likelihood = std::numeric_limits<double>::quiet_NaN();
  double complete_log_likelihood = std::numeric_limits<double>::quiet_NaN();
  int free_parameters = 0;
  double bic = std::numeric_limits<double>::quiet_NaN();
  double icl = std::numeric_limits<double>::quiet_NaN();
  int iterations = 0;
  std::string note;

  double score(Criterion c) const { return c == Criterion::Bic ? bic : icl; }
};

struct SelectionGrid {
  SelectionGridSpec spec;
  Algorithm algorithm = Algorithm::PwrmEm;
  Criterion criterion = Criterion::Bic;
  std::vector<SelectionCell> cells;
  std::size_t chosen = 0;

  const SelectionCell& best() const { return cells.at(chosen); }
};

/// One fit per (K, R, p) cell with R shared across clusters and the seed of
/// `base` reused in every cell; picks the cell maximising the criterion
/// (first in K, R, p order on exact ties). Cells with R (p + 1) > m are
/// skipped. For the K-means-like algorithm only p = 0 is fitted and BIC is
/// reported equal to ICL.
inline SelectionGrid select_model(const CurveSet& curves, const SelectionGridSpec& spec, Algorithm algorithm,
                                  Criterion criterion, const FitConfig& base) {
  curves.validate();
  spec.validate();
  SelectionGrid grid;
  grid.spec = spec;
  grid.algorithm = algorithm;
  grid.criterion = criterion;
  const Index n = curves.n();
  for (int K = spec.K.lo; K <= spec.K.hi; ++K)
    for (int R = spec.R.lo; R <= spec.R.hi; ++R)
      for (int p = spec.p.lo; p <= spec.p.hi; ++p) {
        SelectionCell cell{.K = K, .R = R, .p = p};
        if (static_cast<Index>(R) * (p + 1) > curves.m()) {
          cell.status = CellStatus::Infeasible;
          cell.note = "R (p + 1) exceeds m";
        } else if (K > n) {
          cell.status = CellStatus::Infeasible;
          cell.note = "K exceeds n";
        } else if (algorithm == Algorithm::KMeansLike && p != 0) {
          cell.status = CellStatus::Unsupported;
          cell.note = "kmeans requires p=0";
        } else {
          FitConfig cfg = base;
          cfg.K = K;
          cfg.R = {R};
          cfg.p = p;
          cfg.init = PartitionInit::Random;
          try {
            if (algorithm == Algorithm::KMeansLike) {
              const auto fit = fit_kmeans_like(curves, cfg);
              cell.complete_log_likelihood = -0.5 * fit.distortion;
              cell.log_likelihood = cell.complete_log_likelihood;
              cell.free_parameters = fit.model.free_parameters();
              cell.icl = icl(fit, n);
              cell.bic = cell.icl;
              cell.iterations = fit.iterations;
            } else {
              const auto fit = algorithm == Algorithm::PwrmEm ? fit_em(curves, cfg) : fit_cem(curves, cfg);
              cell.log_likelihood = fit.log_likelihood;
              cell.complete_log_likelihood = fit.complete_log_likelihood;
              cell.free_parameters = fit.params.free_parameters();
              cell.bic = bic(fit);
              cell.icl = icl(fit);
              cell.iterations = fit.iterations;
            }
          } catch (const Error& e) {
            cell.status = CellStatus::Failed;
            cell.note = e.what();
          }
        }
        grid.cells.push_back(std::move(cell));
      }
  bool found = false;
  for (std::size_t q = 0; q < grid.cells.size(); ++q) {
    const auto& c = grid.cells[q];
    if (c.status != CellStatus::Fitted || !std::isfinite(c.score(criterion))) continue;
    if (!found || c.score(criterion) > grid.cells[grid.chosen].score(criterion)) {
      grid.chosen = q;
      found = true;
    }
  }
  if (!found) throw SelectionFailed("no cell of the selection grid could be fitted");
  return grid;
}

// ---------------------------------------------------------------------------
// Evaluation

struct LabelMatching {
  double rate = 0.0;              // fraction of curves misclassified
  int errors = 0;
  std::vector<int> permutation;   // estimated label -> true label
};

namespace detail {

/// Minimum-cost perfect assignment on a square matrix (Hungarian method,
/// potentials form). Returns column assigned to each row.
inline std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  const int N = static_cast<int>(cost.rows());
  std::vector<double> u(N + 1, 0.0), v(N + 1, 0.0);
  std::vector<int> p(N + 1, 0), way(N + 1, 0);
  for (int i = 1; i <= N; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(N + 1, kInf);
    std::vector<bool> used(N + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= N; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= N; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(N, 0);
  for (int j = 1; j <= N; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

}  // namespace detail

/// Misclassification rate under the label permutation that maximises
/// agreement. Labels are non-negative integers in any numbering; the two
/// label sets may differ in size.
inline LabelMatching misclassification(std::span<const int> truth, std::span<const int> estimate) {
  if (truth.size() != estimate.size()) throw InvalidData("label vectors differ in length");
  if (truth.empty()) throw InvalidData("no labels to compare");
  int S = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || estimate[i] < 0) throw InvalidData("labels must be non-negative");
    S = std::max({S, truth[i] + 1, estimate[i] + 1});
  }
  Eigen::MatrixXd confusion = Eigen::MatrixXd::Zero(S, S);  // rows: estimate, cols: truth
  for (std::size_t i = 0; i < truth.size(); ++i) confusion(estimate[i], truth[i]) += 1.0;

  std::vector<int> best(static_cast<std::size_t>(S));
  if (S <= 8) {
    std::vector<int> perm(static_cast<std::size_t>(S));
    std::iota(perm.begin(), perm.end(), 0);
    double best_hits = -1.0;
    do {
      double hits = 0.0;
      for (int e = 0; e < S; ++e) hits += confusion(e, perm[static_cast<std::size_t>(e)]);
      if (hits > best_hits) {
        best_hits = hits;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
  } else {
    best = detail::hungarian(-confusion);
  }
  LabelMatching out;
  out.permutation = best;
  int hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i)
    if (best[static_cast<std::size_t>(estimate[i])] == truth[i]) ++hits;
  out.errors = static_cast<int>(truth.size()) - hits;
  out.rate = static_cast<double>(out.errors) / static_cast<double>(truth.size());
  return out;
}

inline LabelMatching misclassification(const std::vector<int>& truth, const std::vector<int>& estimate) {
  return misclassification(std::span<const int>(truth), std::span<const int>(estimate));
}

/// sum_i ||y_i - g_{z_i}||^2. Prototypes of clusters without members add
/// nothing.
inline double intra_inertia(const CurveSet& curves, const std::vector<int>& labels,
                            const std::vector<Eigen::VectorXd>& prototypes) {
  if (static_cast<Index>(labels.size()) != curves.n()) throw InvalidData("one label per curve required");
  double s = 0.0;
  for (Index i = 0; i < curves.n(); ++i) {
    const int k = labels[static_cast<std::size_t>(i)];
    if (k < 0 || k >= static_cast<int>(prototypes.size())) throw InvalidData("label without prototype");
    s += squared_distance(curves.values.row(i).transpose(), prototypes[static_cast<std::size_t>(k)]);
  }
  return s;
}

template <class Params>
std::vector<Eigen::VectorXd> prototypes(const CurveSet& curves, const FitResult<Params>& fit) {
  const PolyBasis basis(curves.grid, fit.params.degree);
  std::vector<Eigen::VectorXd> g;
  for (int k = 0; k < fit.params.K(); ++k) g.push_back(fit.params.prototype(k, basis));
  return g;
}

inline std::vector<Eigen::VectorXd> prototypes(const CurveSet& curves, const GmmFit& fit) {
  return hard_means(curves, fit.labels, fit.K());
}

inline std::vector<Eigen::VectorXd> prototypes(const CurveSet&, const KMeansLikeResult& fit) {
  return fit.model.prototypes;
}

template <class Fit>
double intra_inertia(const CurveSet& curves, const Fit& fit) {
  return intra_inertia(curves, fit.labels, prototypes(curves, fit));
}

struct EvalReport {
  LabelMatching matching;
  double inertia = 0.0;
};

template <class Fit>
EvalReport evaluate(const CurveSet& curves, const Fit& fit) {
  if (!curves.has_labels()) throw InvalidData("evaluation needs true labels");
  return {misclassification(curves.labels, fit.labels), intra_inertia(curves, fit)};
}

}  // namespace pwrm
