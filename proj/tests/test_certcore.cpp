#include "poisoncert/certcore.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace poisoncert;

namespace {

// Straight-line Monte Carlo of E[lambda(theta')] + l_adv(theta) - lambda(theta).
struct MonteCarlo {
  double mean;
  double stderr_;
};

MonteCarlo mc_lagrangian(const QuadraticMultiplier& lam, const Vec& theta, const Vec& z_adv, const LearningRule& rule,
                         const ContaminatedStream& stream, const AdversarialObjective& obj, int samples,
                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g;
  const int d = static_cast<int>(theta.size());
  Mat chol_sigma, chol_s;
  if (const auto* gs = std::get_if<GaussianSource>(&stream.benign)) chol_sigma = psd_factor(gs->sigma);
  if (const auto* m = std::get_if<MeanRule>(&rule)) chol_s = psd_factor(m->S);
  double sum = 0.0, sum2 = 0.0;
  for (int k = 0; k < samples; ++k) {
    Vec z;
    if (u(rng) < stream.epsilon) {
      z = z_adv;
    } else if (const auto* gs = std::get_if<GaussianSource>(&stream.benign)) {
      Vec w(d);
      for (int i = 0; i < d; ++i) w(i) = g(rng);
      z = gs->mu + chol_sigma * w;
    } else {
      const auto& pts = std::get<EmpiricalSource>(stream.benign).points;
      std::uniform_int_distribution<int> pick(0, static_cast<int>(pts.rows()) - 1);
      z = pts.row(pick(rng)).transpose();
    }
    Vec next;
    if (const auto* m = std::get_if<MeanRule>(&rule)) {
      Vec w(d);
      for (int i = 0; i < d; ++i) w(i) = g(rng);
      next = (1.0 - m->eta) * theta + m->eta * z + m->eta * (chol_s * w);
    } else {
      const auto& h = std::get<HingeRule>(rule);
      next = (1.0 - h.sigma * h.eta) * theta;
      if (theta.dot(z) <= 1.0) next += h.eta * z;
    }
    const double v = lam(next);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / samples;
  const double var = sum2 / samples - mean * mean;
  const double extra = adversarial_loss(obj, theta) - lam(theta);
  return {mean + extra, std::sqrt(std::max(var, 0.0) / samples)};
}

Mat random_sym(std::mt19937_64& rng, int d, double scale) {
  std::normal_distribution<double> g;
  Mat m(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = g(rng);
  return scale * 0.5 * (m + m.transpose());
}

Mat unit_ball_points(std::mt19937_64& rng, int n, int d) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Mat pts(n, d);
  for (int i = 0; i < n; ++i) {
    Vec v(d);
    for (int j = 0; j < d; ++j) v(j) = g(rng);
    pts.row(i) = (v / v.norm() * std::pow(u(rng), 1.0 / d)).transpose();
  }
  return pts;
}

}  // namespace

TEST(QuadraticMultiplier, RejectsAsymmetricMatrix) {
  Mat a(2, 2);
  a << 1, 2, 0, 1;
  EXPECT_THROW(QuadraticMultiplier(a, Vec::Zero(2)), ContractViolation);
  EXPECT_THROW(QuadraticMultiplier(Mat::Identity(2, 2), Vec::Zero(3)), ContractViolation);
}

TEST(Stream, RejectsBadInputs) {
  EXPECT_THROW(ContaminatedStream::gaussian(1.5, Vec::Zero(1), Mat::Identity(1, 1)), ContractViolation);
  EXPECT_THROW(ContaminatedStream::gaussian(0.1, Vec::Zero(1), -Mat::Identity(1, 1)), ContractViolation);
}

TEST(Lagrangian, ZeroMultiplierReducesToLoss) {
  const Vec mu = Vec(Eigen::Vector2d(1.0, -2.0));
  const Vec theta = Vec(Eigen::Vector2d(0.3, 0.7));
  // eta = 1 is outside the rule's open interval; eta close to one exercises the same reduction.
  const double v = lagrangian_value(QuadraticMultiplier::zero(2), theta, mu, MeanRule{0.999, Mat::Zero(2, 2)},
                                    ContaminatedStream::gaussian(0.0, mu, Mat::Zero(2, 2)), SquaredDistance{mu});
  EXPECT_NEAR(v, (mu - theta).squaredNorm(), 1e-12);
}

TEST(Lagrangian, GaussianNoiseExampleMatchesMonteCarlo) {
  const QuadraticMultiplier lam(Mat::Identity(1, 1), Vec::Zero(1));
  const Vec zero = Vec::Zero(1);
  const LearningRule rule = MeanRule{0.5, Mat::Identity(1, 1)};
  const auto stream = ContaminatedStream::gaussian(0.0, zero, Mat::Identity(1, 1));
  const AdversarialObjective obj = SquaredDistance{zero};
  const double closed = lagrangian_value(lam, zero, zero, rule, stream, obj);
  EXPECT_NEAR(closed, 0.5, 1e-14);
  const MonteCarlo mc = mc_lagrangian(lam, zero, zero, rule, stream, obj, 1000000, 1);
  EXPECT_LE(std::abs(mc.mean - closed), 3.0 * mc.stderr_);
}

TEST(Lagrangian, HingeInactiveBranchesByHand) {
  const double eta = 0.1, sigma = 0.5;
  Mat pts(1, 2);
  pts << 0.6, 0.0;
  const Vec theta = Vec(Eigen::Vector2d(2.0, 1.0));  // theta.z1 = 1.2
  const Vec z_adv = Vec(Eigen::Vector2d(0.8, 0.0));  // theta.z_adv = 1.6
  Mat a(2, 2);
  a << 1.0, 0.2, 0.2, 0.5;
  const QuadraticMultiplier lam(a, Vec(Eigen::Vector2d(0.3, -0.1)), 0.7);
  const auto stream = ContaminatedStream::empirical(0.2, pts);
  const AdversarialObjective obj = HingeOnTarget{pts};
  const double v = lagrangian_value(lam, theta, z_adv, HingeRule{eta, sigma}, stream, obj);
  const Vec next = (1.0 - sigma * eta) * theta;
  const double expected = lam(next) + std::max(0.0, 1.0 - theta.dot(pts.row(0).transpose())) - lam(theta);
  EXPECT_NEAR(v, expected, 1e-12);
}

TEST(Lagrangian, ConstantShiftCancels) {
  std::mt19937_64 rng(4);
  const int d = 2;
  const Mat pts = unit_ball_points(rng, 5, d);
  QuadraticMultiplier lam(random_sym(rng, d, 1.0), Vec(Eigen::Vector2d(0.4, -0.3)));
  const Vec theta = Vec(Eigen::Vector2d(0.5, 1.5));
  const Vec z = Vec(Eigen::Vector2d(0.1, -0.7));
  const auto mean_stream = ContaminatedStream::gaussian(0.1, Vec::Ones(d), Mat::Identity(d, d));
  const LearningRule mean_rule = MeanRule{0.3, 0.2 * Mat::Identity(d, d)};
  const auto emp_stream = ContaminatedStream::empirical(0.1, pts);
  const LearningRule hinge_rule = HingeRule{0.05, 0.5};
  const double base_mean = lagrangian_value(lam, theta, z, mean_rule, mean_stream, SquaredDistance{Vec::Ones(d)});
  const double base_hinge = lagrangian_value(lam, theta, z, hinge_rule, emp_stream, HingeOnTarget{pts});
  for (double c : {-10.0, 1.0, 1e3}) {
    QuadraticMultiplier shifted = lam;
    shifted.c = c;
    EXPECT_NEAR(lagrangian_value(shifted, theta, z, mean_rule, mean_stream, SquaredDistance{Vec::Ones(d)}),
                base_mean, 1e-9);
    EXPECT_NEAR(lagrangian_value(shifted, theta, z, hinge_rule, emp_stream, HingeOnTarget{pts}), base_hinge, 1e-9);
  }
}

TEST(Lagrangian, ClosedFormAgreesWithMonteCarloOnRandomInstances) {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 6; ++trial) {
    const int d = 1 + trial % 3;
    Vec mu(d), theta(d), z(d), b(d);
    for (int i = 0; i < d; ++i) {
      mu(i) = g(rng);
      theta(i) = g(rng);
      z(i) = g(rng);
      b(i) = g(rng);
    }
    const Mat sig = random_sym(rng, d, 1.0);
    const Mat sigma = sig * sig + 0.1 * Mat::Identity(d, d);
    const Mat s = 0.3 * Mat::Identity(d, d);
    const QuadraticMultiplier lam(random_sym(rng, d, 1.0), b);
    const LearningRule rule = MeanRule{0.2 + 0.1 * trial, s};
    const auto stream = ContaminatedStream::gaussian(0.1 * trial / 5.0, mu, sigma);
    const AdversarialObjective obj = SquaredDistance{mu};
    const double closed = lagrangian_value(lam, theta, z, rule, stream, obj);
    const MonteCarlo mc = mc_lagrangian(lam, theta, z, rule, stream, obj, 1000000, 100 + trial);
    EXPECT_LE(std::abs(mc.mean - closed), 4.0 * mc.stderr_ + 1e-12) << "mean trial " << trial;
  }
  for (int trial = 0; trial < 4; ++trial) {
    const int d = 2;
    const Mat pts = unit_ball_points(rng, 6, d);
    Vec theta(d), z(d), b(d);
    for (int i = 0; i < d; ++i) {
      theta(i) = 1.5 * g(rng);
      z(i) = 0.5 * g(rng);
      b(i) = g(rng);
    }
    const QuadraticMultiplier lam(random_sym(rng, d, 1.0), b);
    const LearningRule rule = HingeRule{0.5, 0.4};
    const auto stream = ContaminatedStream::empirical(0.3, pts);
    const AdversarialObjective obj = HingeOnTarget{pts};
    const double closed = lagrangian_value(lam, theta, z, rule, stream, obj);
    const MonteCarlo mc = mc_lagrangian(lam, theta, z, rule, stream, obj, 1000000, 200 + trial);
    EXPECT_LE(std::abs(mc.mean - closed), 4.0 * mc.stderr_ + 1e-12) << "hinge trial " << trial;
  }
}

TEST(Lagrangian, HingeRuleRejectsGaussianSource) {
  EXPECT_THROW(lagrangian_value(QuadraticMultiplier::zero(1), Vec::Zero(1), Vec::Zero(1), HingeRule{0.1, 0.1},
                                ContaminatedStream::gaussian(0.1, Vec::Zero(1), Mat::Identity(1, 1)),
                                HingeOnTarget{Mat::Ones(1, 1)}),
               ContractViolation);
}

TEST(Lagrangian, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const int d = 3;
  const Vec mu = Vec::Constant(d, 0.5);
  const QuadraticMultiplier lam(random_sym(rng, d, 1.0), Vec::Constant(d, 0.2));
  const LagrangianEvaluator ev(lam, MeanRule{0.3, 0.1 * Mat::Identity(d, d)},
                               ContaminatedStream::gaussian(0.2, mu, Mat::Identity(d, d)), SquaredDistance{mu});
  Vec theta(d), z(d);
  theta << 0.3, -1.0, 2.0;
  z << 0.1, 0.2, -0.4;
  Vec gt, gz;
  ev.gradient(theta, z, gt, gz);
  const double h = 1e-6;
  for (int i = 0; i < d; ++i) {
    Vec e = Vec::Zero(d);
    e(i) = h;
    EXPECT_NEAR(gt(i), (ev.value(theta + e, z) - ev.value(theta - e, z)) / (2 * h), 1e-6);
    EXPECT_NEAR(gz(i), (ev.value(theta, z + e) - ev.value(theta, z - e)) / (2 * h), 1e-6);
  }
}

TEST(Verify, ZeroMultiplierGivesSquaredRadius) {
  for (int d : {1, 2, 4}) {
    const Vec mu = Vec::Constant(d, 1.0);
    const double radius = 3.0;
    const VerifyResult vr =
        verify_certificate(QuadraticMultiplier::zero(d), MeanRule{0.5, Mat::Zero(d, d)},
                           ContaminatedStream::gaussian(0.1, mu, Mat::Identity(d, d)), SquaredDistance{mu},
                           Region::ball(mu, radius), Region::ball(mu, 1.0));
    EXPECT_GE(vr.value, radius * radius) << d;
    EXPECT_LE(vr.value, radius * radius * (1.0 + 1e-5)) << d;
    EXPECT_GE(vr.value, vr.raw_max);
  }
}

// Independent exhaustive grid over theta and z for a two-dimensional hinge instance.
TEST(Verify, MatchesExhaustiveGridOnSmallClassification) {
  std::mt19937_64 rng(23);
  const int d = 2, n = 4;
  const Mat pts = unit_ball_points(rng, n, d);
  const double eta = 0.3, sigma = 0.8, eps = 0.2;
  Mat a(2, 2);
  a << 0.4, 0.1, 0.1, 0.3;
  const QuadraticMultiplier lam(a, Vec(Eigen::Vector2d(-0.2, 0.3)));
  const LearningRule rule = HingeRule{eta, sigma};
  const auto stream = ContaminatedStream::empirical(eps, pts);
  const AdversarialObjective obj = HingeOnTarget{pts};
  const double rad = 1.0 / sigma;
  const VerifyResult vr = verify_certificate(lam, rule, stream, obj, Region::ball(Vec::Zero(d), rad),
                                             Region::ball(Vec::Zero(d), 1.0));

  std::vector<Vec> zs;
  for (int k = 0; k < 400; ++k) {
    const double ang = 2 * M_PI * k / 400;
    zs.push_back(Vec(Eigen::Vector2d(std::cos(ang), std::sin(ang))));
  }
  for (int i = 0; i < 40; ++i)
    for (int j = 0; j < 40; ++j) {
      Vec z(2);
      z << -1 + 2.0 * i / 39, -1 + 2.0 * j / 39;
      if (z.norm() <= 1) zs.push_back(z);
    }
  double grid_max = -1e300;
  const double c = 1 - sigma * eta;
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 200; ++j) {
      Vec th(2);
      th << -rad + 2 * rad * i / 199, -rad + 2 * rad * j / 199;
      if (th.norm() > rad) continue;
      double benign = 0, loss = 0;
      for (int k = 0; k < n; ++k) {
        const Vec zk = pts.row(k).transpose();
        Vec nx = c * th;
        if (th.dot(zk) <= 1) nx += eta * zk;
        benign += lam(nx) / n;
        loss += std::max(0.0, 1 - th.dot(zk)) / n;
      }
      double adv = -1e300;
      for (const auto& z : zs) {
        Vec nx = c * th;
        if (th.dot(z) <= 1) nx += eta * z;
        adv = std::max(adv, lam(nx));
      }
      grid_max = std::max(grid_max, eps * adv + (1 - eps) * benign + loss - lam(th));
    }
  EXPECT_GE(vr.value, grid_max - 1e-9);
  EXPECT_LE(vr.value, grid_max + 0.01 * std::abs(grid_max));
}

TEST(Mdp, SingleStateGain) {
  DiscretizedMDP mdp;
  mdp.theta_grid = {Vec::Zero(1)};
  mdp.action_grid = {Vec::Zero(1)};
  mdp.transition = {{{{0, 1.0}}}};
  mdp.reward = Vec::Constant(1, 3.0);
  EXPECT_NEAR(solve_discretized_mdp(mdp, 1e-10), 3.0, 1e-9);
}

TEST(Mdp, DeterministicTwoCycleAverages) {
  DiscretizedMDP mdp;
  mdp.theta_grid = {Vec::Zero(1), Vec::Ones(1)};
  mdp.action_grid = {Vec::Zero(1)};
  mdp.transition = {{{{1, 1.0}}}, {{{0, 1.0}}}};
  mdp.reward = Vec(Eigen::Vector2d(0.0, 4.0));
  EXPECT_NEAR(solve_discretized_mdp(mdp, 1e-10), 2.0, 1e-9);
}

TEST(Mdp, PicksBestAction) {
  DiscretizedMDP mdp;
  mdp.theta_grid = {Vec::Zero(1), Vec::Ones(1)};
  mdp.action_grid = {Vec::Zero(1), Vec::Ones(1)};
  // Action 0 stays, action 1 moves; state 1 pays 5.
  mdp.transition = {{{{0, 1.0}}, {{1, 1.0}}}, {{{1, 1.0}}, {{0, 1.0}}}};
  mdp.reward = Vec(Eigen::Vector2d(1.0, 5.0));
  EXPECT_NEAR(solve_discretized_mdp(mdp, 1e-10), 5.0, 1e-8);
}

TEST(Mdp, RejectsRowsNotSummingToOne) {
  DiscretizedMDP mdp;
  mdp.theta_grid = {Vec::Zero(1)};
  mdp.action_grid = {Vec::Zero(1)};
  mdp.transition = {{{{0, 0.9}}}};
  mdp.reward = Vec::Constant(1, 1.0);
  EXPECT_THROW(solve_discretized_mdp(mdp, 1e-8), ContractViolation);
}

TEST(Mdp, ReportsBracketWhenSweepsRunOut) {
  DiscretizedMDP mdp = build_mean_mdp(0.0, 1.0, 0.05, 0.0, 0.1, 1.0, {.states = 41, .actions = 5});
  try {
    solve_discretized_mdp_info(mdp, 1e-14, 3);
    FAIL() << "expected non-convergence";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("gain in ["), std::string::npos);
  }
}

TEST(Mdp, MeanBuilderRowsAreStochastic) {
  for (Snapping mode : {Snapping::nearest, Snapping::moment}) {
    MeanMdpConfig cfg;
    cfg.states = 61;
    cfg.actions = 9;
    cfg.snapping = mode;
    const DiscretizedMDP mdp = build_mean_mdp(1.0, 0.5, 0.3, 0.2, 0.05, 1.0, cfg);
    EXPECT_NO_THROW(mdp.validate());
    EXPECT_EQ(mdp.num_states(), 61);
    EXPECT_EQ(static_cast<int>(mdp.transition[0].size()), 9);
  }
}

TEST(Mdp, MomentSnappingPreservesInteriorMean) {
  MeanMdpConfig cfg;
  cfg.states = 201;
  cfg.actions = 3;
  cfg.snapping = Snapping::moment;
  cfg.mixing = 0.0;
  const double mu = 0.5, eta = 0.4;
  const DiscretizedMDP mdp = build_mean_mdp(mu, 0.3, eta, 0.1, 0.2, 1.0, cfg);
  const int s = 100;
  const double theta = mdp.theta_grid[s](0);
  for (int a = 0; a < 3; ++a) {
    double mean = 0.0;
    for (const auto& o : mdp.transition[s][a]) mean += o.prob * mdp.theta_grid[o.next](0);
    const double expected = (1 - eta) * theta + eta * (0.2 * mdp.action_grid[a](0) + 0.8 * mu);
    EXPECT_NEAR(mean, expected, 1e-9);
  }
}
