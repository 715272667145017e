#include <gtest/gtest.h>

#include <numbers>
#include <random>

#include "oracles.hpp"
#include "pwrm/pwrm_em.hpp"
#include "pwrm/selection.hpp"

using namespace pwrm;

namespace {

FitConfig table1_config(std::uint64_t seed, int restarts = 3) {
  FitConfig c;
  c.K = 2;
  c.R = {5};
  c.p = 1;
  c.n_restarts = restarts;
  c.seed = seed;
  return c;
}

std::vector<int> zero_based(const std::vector<int>& labels) {
  std::vector<int> z;
  for (int l : labels) z.push_back(l - 1);
  return z;
}

}  // namespace

TEST(EStep, MatchesMultiprecisionSoftmax) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> N(0.0, 300.0);
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + trial % 4;
    Eigen::MatrixXd ld(15, K);
    for (Index i = 0; i < ld.rows(); ++i)
      for (Index k = 0; k < K; ++k) ld(i, k) = N(rng) - 2000.0;
    Eigen::VectorXd alpha = Eigen::VectorXd::Random(K).array().abs() + 0.05;
    alpha /= alpha.sum();
    const auto post = e_step(ld, alpha);
    const auto [tau, L] = oracle::softmax_mp(ld, alpha);
    EXPECT_LT((post.tau - tau).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(post.log_likelihood, L, 1e-12 * std::abs(L));
    for (Index i = 0; i < ld.rows(); ++i) EXPECT_NEAR(post.tau.row(i).sum(), 1.0, 1e-10);
  }
}

TEST(EStep, DegeneratePrior) {
  Eigen::MatrixXd ld(3, 2);
  ld << -1, -0.5, -2, -9, -3, -1;
  const auto post = e_step(ld, Eigen::Vector2d(1.0, 0.0));
  for (Index i = 0; i < 3; ++i) {
    EXPECT_DOUBLE_EQ(post.tau(i, 0), 1.0);
    EXPECT_DOUBLE_EQ(post.tau(i, 1), 0.0);
  }
}

TEST(LogDensity, MatchesPointwiseGaussian) {
  const auto cs = generate(table1_spec(0.0, 3));
  const PolyBasis basis(cs.grid, 1);
  const std::vector<double> w1(100, 1.0);
  PwrmParams params;
  params.degree = 1;
  params.alpha = Eigen::Vector2d(0.4, 0.6);
  params.clusters.push_back(fit_piecewise(cs, basis, 5, w1));
  auto homo = fit_piecewise(cs, basis, 3, w1);
  for (auto& f : homo.fits) f.sigma2 = 1.3;
  params.clusters.push_back(homo);
  const auto ld = log_density_per_cluster(cs, basis, params);
  for (int k = 0; k < 2; ++k) {
    const auto& c = params.clusters[k];
    const Eigen::VectorXd mean = c.mean_curve(basis);
    const Eigen::VectorXd var = c.variance_curve(cs.m());
    for (Index i = 0; i < cs.n(); i += 7)
      EXPECT_NEAR(ld(i, k), oracle::piecewise_logpdf(cs.values.row(i).transpose(), mean, var), 1e-9 * std::abs(ld(i, k)));
  }
}

TEST(MStep, AllMassOnOneCluster) {
  const auto cs = generate(table1_spec(0.0, 4));
  const PolyBasis basis(cs.grid, 1);
  Eigen::MatrixXd tau = Eigen::MatrixXd::Zero(cs.n(), 3);
  tau.col(0).setOnes();
  FitConfig cfg = table1_config(0);
  cfg.K = 3;
  const double floor = variance_floor(cs);
  const auto step = m_step(cs, basis, tau, cfg, floor);
  EXPECT_DOUBLE_EQ(step.params.alpha[0], 1.0);
  EXPECT_DOUBLE_EQ(step.params.alpha[1], 0.0);
  EXPECT_EQ(step.empty, (std::vector<int>{1, 2}));
  const auto direct = fit_piecewise(cs, basis, 5, std::vector<double>(100, 1.0), {CostKind::Likelihood, floor});
  EXPECT_EQ(step.params.clusters[0].segmentation, direct.segmentation);
  EXPECT_TRUE(step.params.clusters[0].fits[2].beta.isApprox(direct.fits[2].beta, 1e-12));
}

TEST(MStep, UniformPosteriorsGiveIdenticalClusters) {
  const auto cs = generate(table1_spec(0.0, 5));
  const PolyBasis basis(cs.grid, 1);
  const Eigen::MatrixXd tau = Eigen::MatrixXd::Constant(cs.n(), 3, 1.0 / 3.0);
  FitConfig cfg = table1_config(0);
  cfg.K = 3;
  const auto step = m_step(cs, basis, tau, cfg, variance_floor(cs));
  for (int k = 1; k < 3; ++k) {
    EXPECT_EQ(step.params.clusters[k].segmentation, step.params.clusters[0].segmentation);
    EXPECT_NEAR(step.params.clusters[k].fits[0].sigma2, step.params.clusters[0].fits[0].sigma2, 1e-12);
  }
}

TEST(MStep, WeightedFitsMatchStackedOracle) {
  const auto cs = generate(table1_spec(0.3, 6));
  const PolyBasis basis(cs.grid, 1);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  Eigen::MatrixXd tau(cs.n(), 2);
  for (Index i = 0; i < cs.n(); ++i) {
    tau(i, 0) = U(rng);
    tau(i, 1) = 1.0 - tau(i, 0);
  }
  const auto step = m_step(cs, basis, tau, table1_config(0), variance_floor(cs));
  const auto X = oracle::design(cs.grid, 1);
  for (int k = 0; k < 2; ++k) {
    const auto& c = step.params.clusters[k];
    for (int r = 0; r < c.regimes(); ++r) {
      const auto [beta, sse] =
          oracle::stacked_wls(cs.values, tau.col(k), X, c.segmentation.begin(r), c.segmentation.end(r), true);
      EXPECT_TRUE(c.fits[r].beta.isApprox(beta, 1e-10));
      EXPECT_NEAR(c.fits[r].sigma2, sse / (tau.col(k).sum() * c.segmentation.length(r)), 1e-10);
    }
    EXPECT_NEAR(step.params.alpha[k], tau.col(k).mean(), 1e-15);
  }
}

TEST(MStep, HardTrueLabelsOnNoiselessDataFindBreaks) {
  auto spec = table1_spec(0.0, 7);
  for (auto& c : spec.clusters)
    for (auto& s : c.sigmas) s = 0.0;
  const auto cs = generate(spec);
  const PolyBasis basis(cs.grid, 1);
  const auto step = m_step(cs, basis, one_hot(zero_based(cs.labels), 2), table1_config(0), variance_floor(cs));
  // Cluster 1 regimes 3 and 4 share the level 10, so the break between them
  // is not identifiable without noise. The ramps meet their neighbours
  // continuously, so the shared endpoint fits either side exactly.
  auto near = [](Index got, Index want) { return got == want || got == want - 1; };
  const auto& b1 = step.params.clusters[0].segmentation.bounds;
  EXPECT_PRED2(near, b1[1], 20);
  EXPECT_PRED2(near, b1[2], 60);
  EXPECT_EQ(b1[4], 140);
  EXPECT_GT(b1[3], 60);
  EXPECT_LT(b1[3], 140);
  const auto& b2 = step.params.clusters[1].segmentation.bounds;
  EXPECT_PRED2(near, b2[1], 20);
  EXPECT_PRED2(near, b2[2], 70);
  EXPECT_EQ(b2[4], 140);
}

TEST(MStep, HardTrueLabelsRecoverBreaksWithNoise) {
  auto spec = table1_spec(0.0, 8);
  spec.n = 600;
  const auto cs = generate(spec);
  const PolyBasis basis(cs.grid, 1);
  const auto step = m_step(cs, basis, one_hot(zero_based(cs.labels), 2), table1_config(0), variance_floor(cs));
  const std::vector<int> t1{0, 20, 60, 115, 140, 160}, t2{0, 20, 70, 90, 140, 160};
  for (int r = 0; r <= 5; ++r) {
    EXPECT_NEAR(step.params.clusters[0].segmentation.bounds[r], t1[r], 2);
    EXPECT_NEAR(step.params.clusters[1].segmentation.bounds[r], t2[r], 2);
  }
}

TEST(RepairEmpty, LeastConfidentCurveMoves) {
  Eigen::MatrixXd tau(4, 3);
  tau << 0.9, 0.1, 0, 0.55, 0.45, 0, 0.99, 0.01, 0, 0.2, 0.8, 0;
  const auto repaired = detail::repair_empty_clusters(tau);
  EXPECT_EQ(repaired, (std::vector<int>{2}));
  EXPECT_DOUBLE_EQ(tau(1, 2), 1.0);
  EXPECT_DOUBLE_EQ(tau(1, 0), 0.0);
}

TEST(FitEm, SingleClusterIsPlainPiecewiseFit) {
  const auto cs = generate(table1_spec(0.0, 9));
  FitConfig cfg = table1_config(1, 1);
  cfg.K = 1;
  const auto fit = fit_em(cs, cfg);
  const PolyBasis basis(cs.grid, 1);
  const auto direct = fit_piecewise(cs, basis, 5, std::vector<double>(100, 1.0), {CostKind::Likelihood, variance_floor(cs)});
  EXPECT_EQ(fit.params.clusters[0].segmentation, direct.segmentation);
  // Plug-in log-likelihood: -1/2 sum_r n m_r (log 2 pi + log sigma_r^2 + 1).
  double L = 0.0;
  for (int r = 0; r < 5; ++r)
    L -= 0.5 * 100.0 * direct.segmentation.length(r) * (std::log(2 * std::numbers::pi) + std::log(direct.fits[r].sigma2) + 1.0);
  EXPECT_NEAR(fit.log_likelihood, L, 1e-8 * std::abs(L));
}

TEST(FitEm, Table1ZeroError) {
  const auto cs = generate(table1_spec(0.0, 10));
  const auto fit = fit_em(cs, table1_config(10, 10));
  EXPECT_EQ(misclassification(cs.labels, fit.labels).rate, 0.0);
  EXPECT_TRUE(fit.converged);
  EXPECT_NEAR(fit.params.alpha.sum(), 1.0, 1e-12);
}

TEST(FitEm, TraceIsMonotone) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto cs = generate(table1_spec(0.5, 100 + seed));
    const auto fit = fit_em(cs, table1_config(seed, 1));
    for (std::size_t q = 1; q < fit.criterion_trace.size(); ++q)
      if (!fit.event_at(static_cast<int>(q)))
        EXPECT_GE(fit.criterion_trace[q] - fit.criterion_trace[q - 1], -1e-8) << "seed " << seed << " it " << q;
  }
}

TEST(FitEm, PosteriorsNormalisedAndLabelsAreMap) {
  const auto cs = generate(table1_spec(1.0, 11));
  const auto fit = fit_em(cs, table1_config(11, 2));
  for (Index i = 0; i < cs.n(); ++i) {
    EXPECT_NEAR(fit.tau.row(i).sum(), 1.0, 1e-10);
    Index k;
    fit.tau.row(i).maxCoeff(&k);
    EXPECT_EQ(fit.labels[i], k);
  }
}

TEST(FitEm, SeparatedConstantClustersGiveCrispPosteriors) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> N(0.0, 0.3);
  CurveSet cs;
  cs.values.resize(40, 20);
  cs.grid = default_grid(20);
  for (Index i = 0; i < 40; ++i)
    for (Index j = 0; j < 20; ++j) cs.values(i, j) = (i < 20 ? 0.0 : 5.0) + N(rng);
  FitConfig cfg;
  cfg.K = 2;
  cfg.R = {1};
  cfg.p = 0;
  cfg.n_restarts = 3;
  const auto fit = fit_em(cs, cfg);
  for (Index i = 0; i < 40; ++i) {
    const double t = fit.tau(i, 0);
    EXPECT_TRUE(t < 1e-6 || t > 1.0 - 1e-6) << t;
  }
}

TEST(FitEm, PermutingInitialLabelsPermutesClusters) {
  const auto cs = generate(table1_spec(0.8, 13));
  FitConfig cfg = table1_config(13, 1);
  cfg.init = PartitionInit::Provided;
  cfg.segmentation_init = SegmentationInit::Uniform;
  std::mt19937_64 rng(13);
  cfg.initial_labels = random_partition(cs.n(), 2, rng);
  const auto a = fit_em(cs, cfg);
  for (int& z : cfg.initial_labels) z = 1 - z;
  const auto b = fit_em(cs, cfg);
  EXPECT_NEAR(a.log_likelihood, b.log_likelihood, 1e-9 * std::abs(a.log_likelihood));
  EXPECT_LT((a.tau.col(0) - b.tau.col(1)).cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_EQ(a.params.clusters[0].segmentation, b.params.clusters[1].segmentation);
}

TEST(FitEm, ShiftLeavesPartitionAndVariancesUnchanged) {
  const auto cs = generate(table1_spec(0.5, 14));
  auto shifted = cs;
  shifted.values.array() += 3.0;
  FitConfig cfg = table1_config(14, 1);
  cfg.init = PartitionInit::Provided;
  std::mt19937_64 rng(14);
  cfg.initial_labels = random_partition(cs.n(), 2, rng);
  const auto a = fit_em(cs, cfg);
  const auto b = fit_em(shifted, cfg);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_LT((a.tau - b.tau).cwiseAbs().maxCoeff(), 1e-8);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(a.params.clusters[k].segmentation, b.params.clusters[k].segmentation);
    for (int r = 0; r < 5; ++r) EXPECT_NEAR(a.params.clusters[k].fits[r].sigma2, b.params.clusters[k].fits[r].sigma2, 1e-8);
  }
}

TEST(FitEm, DeterministicAcrossThreadCounts) {
  const auto cs = generate(table1_spec(0.7, 15));
  FitConfig cfg = table1_config(15, 4);
  const auto a = fit_em(cs, cfg);
  cfg.threads = 3;
  const auto b = fit_em(cs, cfg);
  EXPECT_EQ(a.restart, b.restart);
  EXPECT_EQ(a.criterion_trace, b.criterion_trace);
  EXPECT_EQ(a.labels, b.labels);
}

TEST(FitEm, ConfigErrors) {
  const auto cs = generate(table1_spec(0.0, 16));
  FitConfig cfg = table1_config(0, 1);
  cfg.R = {81};
  EXPECT_THROW(fit_em(cs, cfg), InfeasibleSegmentation);
  cfg = table1_config(0, 1);
  cfg.K = 101;
  EXPECT_THROW(fit_em(cs, cfg), InvalidData);
  cfg = table1_config(0, 1);
  cfg.R = {3, 4, 5};
  EXPECT_THROW(fit_em(cs, cfg), InvalidData);
}

TEST(FitEm, PerClusterRegimeCounts) {
  const auto cs = generate(table1_spec(0.0, 17));
  FitConfig cfg = table1_config(17, 2);
  cfg.R = {3, 6};
  const auto fit = fit_em(cs, cfg);
  EXPECT_EQ(fit.params.clusters[0].regimes(), 3);
  EXPECT_EQ(fit.params.clusters[1].regimes(), 6);
  EXPECT_EQ(fit.params.free_parameters(), 9 * 4 - 1);
}
