#pragma once

#include "poisoncert/certcore.hpp"
#include "poisoncert/sdp.hpp"

namespace poisoncert {

/// Linear hinge classification instance. Points are label-multiplied
/// features z = y x with ||z|| <= 1; theta lives in the 1/sigma ball and
/// the adversary in the unit ball.
struct ClassInstance {
  Mat points;  // N x d
  double eta = 1e-3;
  double sigma = 1e-2;
  double epsilon = 0.0;
  Mat targets;  // empty: same as points

  int dim() const { return static_cast<int>(points.cols()); }
  int size() const { return static_cast<int>(points.rows()); }
  const Mat& target_points() const { return targets.size() == 0 ? points : targets; }
  bool shared_targets() const;
  void validate() const;

  LearningRule rule() const { return HingeRule{eta, sigma}; }
  ContaminatedStream stream() const { return ContaminatedStream::empirical(epsilon, points); }
  AdversarialObjective objective() const { return HingeOnTarget{target_points()}; }
  Region domain() const { return Region::ball(Vec::Zero(dim()), 1.0 / sigma); }
  Region adversary_set() const { return Region::ball(Vec::Zero(dim()), 1.0); }
};

/// Dual variables in natural units; rows of the N x d matrices belong to one indicator.
struct ClassDualVars {
  Vec nu1, nu2, nu7;
  Mat nu3, nu4, nu5, nu6;
  double nu8 = 0.0, nu9 = 0.0, nu10 = 0.0;
  Mat A;
  Vec b;
};

/// Sense of the per-indicator component constraints.
enum class ComponentSense {
  mixed,       // indicator row <= 0, McCormick rows == 0
  inequality,  // every row <= 0
  equality     // every row == 0
};

struct ClassProgramOptions {
  ComponentSense sense = ComponentSense::mixed;
  /// Drop the (nu3 + nu5) / sigma terms from the indicator row.
  bool literal_indicator_row = false;
};

/// Certificate program for one branch. branch 1: the adversarial indicator is
/// off (no z_adv block); branch 2: it is on.
struct ClassProgram {
  sdp::ConeProgram program;
  int branch = 2;
  int d = 0;
  int m = 0;  // number of relaxed indicators
  double eta = 0.0, sigma = 0.0;
  int a_first = 0, b_first = 0;
  int nu1 = 0, nu2 = 0, nu7 = 0;        // m each
  int nu3 = 0, nu4 = 0, nu5 = 0, nu6 = 0;  // m * d each, row-major
  int nu8 = 0, nu9 = -1, nu10 = -1;
  int t = 0;

  int a_index(int i, int j) const;
  ClassDualVars extract(const Vec& x) const;
};

/// Indicator weights: each relaxed indicator carries a dynamics weight (benign
/// points) and a loss weight (targets). Shared targets merge both roles.
struct IndicatorSet {
  Mat z;          // m x d
  Vec dynamics;   // (1 - eps) / N for benign points
  Vec loss;       // 1 / M for targets
};
IndicatorSet indicator_set(const ClassInstance& inst);

ClassProgram build_opt1(const ClassInstance& inst, const ClassProgramOptions& options = {});
ClassProgram build_opt2(const ClassInstance& inst, const ClassProgramOptions& options = {});

/// Smallest slack of every component constraint (>= 0 when satisfied).
double class_constraint_slack(const ClassDualVars& dual, const ClassInstance& inst,
                              const ClassProgramOptions& options = {});
/// Branch objective ||p||^2_{D^-1} + q at a dual point; +infinity when the
/// point violates a constraint by more than tol.
double evaluate_class_dual(const ClassDualVars& dual, const ClassInstance& inst, int branch,
                           const ClassProgramOptions& options = {}, double tol = 1e-7);

struct ClassCertifyOptions {
  ClassProgramOptions program;
  sdp::SolveOptions solver;
  SearchConfig search;
  int max_points = 200;
  int max_variables = 4000;  // dense solver budget; larger instances are subsampled
  std::uint64_t subsample_seed = 7;
};

/// Subsample used for the program; the verifier always sees the full data.
ClassInstance program_instance(const ClassInstance& inst, const ClassCertifyOptions& options);

/// Solves both branches, keeps the larger, and verifies its multiplier over
/// the parameter ball and adversary ball with the exact indicators.
CertificateResult certify_class(const ClassInstance& inst, double tol = 1e-6, const ClassCertifyOptions& options = {});

struct BruteForceResult {
  double value = 0.0;
  Vec theta, z;
  std::vector<int> q;
  bool coarse = false;  // fewer than 20 grid points per axis
};

/// Exhaustive sup of the pre-relaxation problem at a fixed (A, b): every
/// q in {0,1}^N consistent with the big-M indicator constraints, theta on a
/// grid of the 1/sigma disc, z_adv on a grid of the unit disc plus its circle.
BruteForceResult brute_force_inner_sup(const ClassInstance& inst, const Mat& A, const Vec& b, int resolution);

/// Smallest slack of the four bilinear envelopes of w = q theta over the box
/// |theta_j| <= 1/sigma, q in [0, 1].
double mccormick_slack(const Vec& theta, double q, const Vec& w, double sigma);

}  // namespace poisoncert
