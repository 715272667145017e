#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "pwrm/pwrm_cem.hpp"
#include "pwrm/selection.hpp"

using namespace pwrm;

namespace {

FitConfig config(std::uint64_t seed, int p = 1, int restarts = 3) {
  FitConfig c;
  c.K = 2;
  c.R = {5};
  c.p = p;
  c.n_restarts = restarts;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(FitCem, Table1ZeroError) {
  const auto cs = generate(table1_spec(0.0, 20));
  const auto fit = fit_cem(cs, config(20, 1, 10));
  EXPECT_EQ(misclassification(cs.labels, fit.labels).rate, 0.0);
  EXPECT_TRUE(fit.converged);
}

TEST(FitCem, StablePartitionStillGetsOptimalSegmentation) {
  // Started from the true labels the first C-step changes nothing; the run
  // must still re-segment rather than stop on the uniform start.
  const auto cs = generate(table1_spec(0.0, 5000));
  FitConfig cfg = config(5000, 1, 1);
  cfg.init = PartitionInit::Provided;
  for (int l : cs.labels) cfg.initial_labels.push_back(l - 1);
  const auto fit = fit_cem(cs, cfg);
  EXPECT_GE(fit.iterations, 1);
  const PolyBasis basis(cs.grid, 1);
  const auto refit = detail::hard_m_step(cs, basis, fit.labels, cfg, {}, variance_floor(cs));
  for (int k = 0; k < 2; ++k)
    EXPECT_EQ(fit.params.clusters[k].segmentation, refit.clusters[k].segmentation);
}

TEST(FitCem, CompleteLikelihoodTraceIsMonotone) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cs = generate(table1_spec(0.8, 200 + seed));
    const auto fit = fit_cem(cs, config(seed, 1, 1));
    for (std::size_t q = 1; q < fit.criterion_trace.size(); ++q)
      if (!fit.event_at(static_cast<int>(q)))
        EXPECT_GE(fit.criterion_trace[q] - fit.criterion_trace[q - 1], -1e-8) << "seed " << seed << " it " << q;
  }
}

TEST(FitCem, FinalLabelsAreMapAndCriterionMatches) {
  const auto cs = generate(table1_spec(1.0, 21));
  const auto fit = fit_cem(cs, config(21));
  for (Index i = 0; i < cs.n(); ++i) {
    Index k;
    fit.tau.row(i).maxCoeff(&k);
    EXPECT_EQ(fit.labels[i], k);
  }
  // L_c recomputed from scratch with the pointwise oracle.
  const PolyBasis basis(cs.grid, 1);
  double lc = 0.0;
  for (Index i = 0; i < cs.n(); ++i) {
    const int k = fit.labels[i];
    const auto& c = fit.params.clusters[k];
    lc += std::log(fit.params.alpha[k]) +
          oracle::piecewise_logpdf(cs.values.row(i).transpose(), c.mean_curve(basis), c.variance_curve(cs.m()));
  }
  EXPECT_NEAR(fit.complete_log_likelihood, lc, 1e-9 * std::abs(lc));
}

TEST(HardMStep, EmWithHardPosteriorsEqualsCem) {
  const auto cs = generate(table1_spec(0.5, 22));
  const PolyBasis basis(cs.grid, 1);
  std::mt19937_64 rng(22);
  const auto z = random_partition(cs.n(), 2, rng);
  const auto cfg = config(0);
  const double floor = variance_floor(cs);
  const auto em = m_step(cs, basis, one_hot(z, 2), cfg, floor).params;
  const auto cem = detail::hard_m_step(cs, basis, z, cfg, {}, floor);
  EXPECT_LT((em.alpha - cem.alpha).cwiseAbs().maxCoeff(), 1e-10);
  for (int k = 0; k < 2; ++k) {
    ASSERT_EQ(em.clusters[k].segmentation, cem.clusters[k].segmentation);
    for (int r = 0; r < 5; ++r) {
      EXPECT_LT((em.clusters[k].fits[r].beta - cem.clusters[k].fits[r].beta).cwiseAbs().maxCoeff(), 1e-10);
      EXPECT_LT(std::abs(em.clusters[k].fits[r].sigma2 - cem.clusters[k].fits[r].sigma2), 1e-10);
    }
  }
}

TEST(ConstrainedCem, EqualProportionsAndPooledVariance) {
  const auto cs = generate(table1_unbalanced_spec(0.0, 23));
  const auto fit = fit_cem(cs, config(23, 0, 2), {true, true});
  EXPECT_DOUBLE_EQ(fit.params.alpha[0], 0.5);
  EXPECT_DOUBLE_EQ(fit.params.alpha[1], 0.5);
  const double s2 = fit.params.clusters[0].fits[0].sigma2;
  for (const auto& c : fit.params.clusters)
    for (const auto& f : c.fits) EXPECT_EQ(f.sigma2, s2);
  // Pooled variance is the total within-segment SSE over n m.
  const PolyBasis basis(cs.grid, 0);
  double sse = 0.0;
  std::vector<Eigen::VectorXd> g;
  for (int k = 0; k < 2; ++k) g.push_back(fit.params.prototype(k, basis));
  // Variance belongs to the partition of the final M-step, which is the
  // MAP partition once the run has converged.
  for (Index i = 0; i < cs.n(); ++i) sse += (cs.values.row(i).transpose() - g[fit.labels[i]]).squaredNorm();
  EXPECT_NEAR(s2, sse / (cs.n() * cs.m()), 1e-9);
}

TEST(KMeansLike, RequiresPiecewiseConstant) {
  const auto cs = generate(table1_spec(0.0, 24));
  EXPECT_THROW(fit_kmeans_like(cs, config(0, 3)), InvalidData);
}

TEST(KMeansLike, DistortionNonIncreasingAndFixedPoint) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto cs = generate(table1_spec(0.6, 300 + seed));
    const auto fit = fit_kmeans_like(cs, config(seed, 0, 2));
    for (std::size_t q = 1; q < fit.distortion_trace.size(); ++q)
      EXPECT_LE(fit.distortion_trace[q], fit.distortion_trace[q - 1] + 1e-9);
    ASSERT_TRUE(fit.converged);
    // Every curve sits with its nearest prototype.
    for (Index i = 0; i < cs.n(); ++i)
      for (int k = 0; k < 2; ++k)
        EXPECT_LE((cs.values.row(i).transpose() - fit.model.prototypes[fit.labels[i]]).squaredNorm(),
                  (cs.values.row(i).transpose() - fit.model.prototypes[k]).squaredNorm());
    EXPECT_NEAR(fit.distortion, intra_inertia(cs, fit), 1e-9 * fit.distortion);
  }
}

TEST(KMeansLike, RelocationMatchesExhaustiveSegmentation) {
  std::mt19937_64 rng(25);
  for (int trial = 0; trial < 30; ++trial) {
    auto cs = oracle::random_curves(6, 9, rng);
    FitConfig cfg = config(static_cast<std::uint64_t>(trial), 0, 1);
    cfg.R = {3};
    const auto fit = fit_kmeans_like(cs, cfg);
    for (int k = 0; k < 2; ++k) {
      std::vector<Index> rows;
      for (Index i = 0; i < cs.n(); ++i)
        if (fit.labels[i] == k) rows.push_back(i);
      const auto sub = cs.subset(rows);
      auto sse = [&](int a, int b) {
        double mean = sub.values.middleCols(a, b - a).mean(), s = 0.0;
        for (Index i = 0; i < sub.n(); ++i)
          for (int j = a; j < b; ++j) s += (sub.values(i, j) - mean) * (sub.values(i, j) - mean);
        return s;
      };
      const auto best = oracle::enumerate(sse, 9, 3, 1);
      double got = 0.0;
      for (Index i = 0; i < sub.n(); ++i) got += (sub.values.row(i).transpose() - fit.model.prototypes[k]).squaredNorm();
      EXPECT_NEAR(got, best.cost, 1e-9 * (1.0 + best.cost));
    }
  }
}

TEST(KMeansLike, FreeParameters) {
  KMeansLikeModel m;
  m.segmentations.assign(2, uniform_segmentation(160, 5, 1));
  m.prototypes.assign(2, Eigen::VectorXd::Zero(160));
  EXPECT_EQ(m.free_parameters(), 18);
}

TEST(KMeansLike, Table1Unbalanced) {
  const auto cs = generate(table1_unbalanced_spec(0.0, 26));
  const auto fit = fit_kmeans_like(cs, config(26, 0, 5));
  EXPECT_EQ(fit.labels.size(), 100u);
  EXPECT_GT(fit.distortion, 0.0);
}

TEST(Equivalence, ConstrainedCemTracksKMeansLike) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cs = generate(table1_spec(0.0, 400 + seed));
    const auto rep = check_prop1_equivalence(cs, config(seed, 0));
    EXPECT_GE(rep.steps, 2);
    EXPECT_EQ(rep.cem_distortion, rep.kmeans_distortion);
  }
}

TEST(Equivalence, RejectsPolynomialDegree) {
  const auto cs = generate(table1_spec(0.0, 27));
  EXPECT_THROW(check_prop1_equivalence(cs, config(0, 1)), InvalidData);
}
