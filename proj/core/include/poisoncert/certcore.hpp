#pragma once

#include "poisoncert/common.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace poisoncert {

/// lambda(theta) = theta^T A theta + b^T theta + c
struct QuadraticMultiplier {
  Mat A;
  Vec b;
  double c = 0.0;

  QuadraticMultiplier() = default;
  QuadraticMultiplier(Mat a, Vec bv, double cv = 0.0);
  static QuadraticMultiplier zero(int d);

  int dim() const { return static_cast<int>(b.size()); }
  double operator()(const Vec& theta) const;
  Vec gradient(const Vec& theta) const;
  /// Throws ContractViolation unless A is square, symmetric and matches b.
  void validate() const;
};

struct GaussianSource {
  Vec mu;
  Mat sigma;
};

/// Rows are data points.
struct EmpiricalSource {
  Mat points;
};

/// Huber contamination: z ~ epsilon * delta(z_adv) + (1 - epsilon) * benign.
struct ContaminatedStream {
  double epsilon = 0.0;
  std::variant<GaussianSource, EmpiricalSource> benign;

  static ContaminatedStream gaussian(double epsilon, Vec mu, Mat sigma);
  static ContaminatedStream empirical(double epsilon, Mat points);

  int dim() const;
  bool is_gaussian() const { return std::holds_alternative<GaussianSource>(benign); }
  void validate() const;
};

/// theta' = (1 - eta) theta + eta z + eta B w,  w ~ N(0, I),  S = B B^T.
struct MeanRule {
  double eta = 0.1;
  Mat S;
};

/// theta' = (1 - sigma eta) theta + eta [theta^T z <= 1] z
struct HingeRule {
  double eta = 1e-3;
  double sigma = 1e-2;
};

using LearningRule = std::variant<MeanRule, HingeRule>;

void validate_rule(const LearningRule& rule, int dim);

/// Deterministic part of the update; the mean rule's noise enters as eta * B * w.
Vec apply_rule(const LearningRule& rule, const Vec& theta, const Vec& z);

/// ||mu - theta||^2
struct SquaredDistance {
  Vec mu;
};

/// mean over targets of max(0, 1 - theta^T t); rows are targets.
struct HingeOnTarget {
  Mat targets;
};

using AdversarialObjective = std::variant<SquaredDistance, HingeOnTarget>;

double adversarial_loss(const AdversarialObjective& obj, const Vec& theta);
/// A subgradient (exact away from hinge kinks).
Vec adversarial_loss_gradient(const AdversarialObjective& obj, const Vec& theta);

/// Euclidean ball or axis-aligned box.
struct Region {
  enum class Kind { ball, box };
  Kind kind = Kind::ball;
  Vec center;  // ball
  double radius = 1.0;
  Vec lo, hi;  // box

  static Region ball(Vec center, double radius);
  static Region box(Vec lo, Vec hi);

  int dim() const;
  bool contains(const Vec& x, double tol = 1e-12) const;
  Vec project(const Vec& x) const;
  /// Bounding box corners.
  std::pair<Vec, Vec> bounds() const;
};

/// Uniform draw from the region.
Vec sample_region(const Region& region, std::mt19937_64& rng);

/// E_{theta'}[lambda(theta')] + l_adv(theta) - lambda(theta). Supported
/// pairings: mean rule with either benign source, hinge rule with an
/// empirical source.
double lagrangian_value(const QuadraticMultiplier& lambda, const Vec& theta, const Vec& z_adv,
                        const LearningRule& rule, const ContaminatedStream& stream,
                        const AdversarialObjective& obj);

/// Caches per-point products so repeated evaluations stay cheap. The value
/// splits as base(theta) + epsilon * lambda(F(theta, z_adv)).
class LagrangianEvaluator {
 public:
  LagrangianEvaluator(QuadraticMultiplier lambda, LearningRule rule, ContaminatedStream stream,
                      AdversarialObjective obj);

  int dim() const { return lambda_.dim(); }
  double epsilon() const { return stream_.epsilon; }

  double value(const Vec& theta, const Vec& z) const;
  /// Everything that does not depend on z_adv.
  double base(const Vec& theta) const;
  /// z_adv-dependent part of lambda(F(theta, z_adv)) - lambda(theta), without epsilon.
  double adversarial_term(const Vec& theta, const Vec& z) const;
  /// Gradient of value() with indicators frozen at the current point.
  void gradient(const Vec& theta, const Vec& z, Vec& g_theta, Vec& g_z) const;

  const QuadraticMultiplier& multiplier() const { return lambda_; }

 private:
  void step_params(double& g, double& eta) const;

  QuadraticMultiplier lambda_;
  LearningRule rule_;
  ContaminatedStream stream_;
  AdversarialObjective obj_;
  double noise_const_ = 0.0;  // trace terms from Gaussian noise
  Mat pts_;                   // benign points (empirical), rows
  Mat apts_;                  // A z_i, rows
  Vec zaz_, bz_;
};

struct SearchConfig {
  int restarts = 64;
  int max_iters = 300;
  int grid_per_axis = 50;       // grid pass only when d <= max_grid_dim
  int max_grid_dim = 3;
  int refine_top = 16;
  double grad_tol = 1e-9;
  double rel_margin = 1e-6;
  double abs_margin = 1e-9;
  std::uint64_t seed = 12345;
  /// Extra ascent starts in theta, e.g. fixed points of the benign dynamics.
  std::vector<Vec> theta_anchors;
  int zoom_levels = 5;  // shrinking local grids around each anchor
};

struct VerifyResult {
  double value = 0.0;      // inflated, certified
  double raw_max = 0.0;    // best evaluated point
  Vec theta, z;            // maximizer found
  bool nonconverged = false;
  long evaluations = 0;
};

/// Approximate sup over theta in domain, z in adv_set of lagrangian_value,
/// inflated by the configured safety margin. The returned value is at least
/// the Lagrangian at every point the search evaluated.
VerifyResult verify_certificate(const QuadraticMultiplier& lambda, const LearningRule& rule,
                                const ContaminatedStream& stream, const AdversarialObjective& obj,
                                const Region& domain, const Region& adv_set,
                                const SearchConfig& search = {});

double inflate_bound(double raw, const SearchConfig& search);

/// Solver bound plus independently verified bound for one certificate.
struct CertificateResult {
  double solver_value = 0.0;
  double verified_value = 0.0;  // certificate of record
  std::string solver_status;
  int solver_iterations = 0;
  double solver_gap = 0.0;
  bool nonconverged = false;
  QuadraticMultiplier lambda;
  std::map<std::string, double> scalars;  // e.g. nu, branch values
  Vec argmax_theta, argmax_z;
  std::string branch;
  double wall_seconds = 0.0;
};

/// Finite state-action surrogate of the poisoned dynamics.
struct DiscretizedMDP {
  struct Outcome {
    int next;
    double prob;
  };
  std::vector<Vec> theta_grid;
  std::vector<Vec> action_grid;
  /// transition[state][action] = sparse next-state distribution
  std::vector<std::vector<std::vector<Outcome>>> transition;
  Vec reward;
  /// Effective row = (1 - uniform_mixing) * transition row + uniform_mixing / states.
  double uniform_mixing = 0.0;

  int num_states() const { return static_cast<int>(theta_grid.size()); }
  /// Throws ContractViolation if any row does not sum to one within 1e-9.
  void validate() const;
};

struct MdpSolveInfo {
  double gain = 0.0;
  double lower = 0.0, upper = 0.0;  // bracket at termination
  int sweeps = 0;
};

/// Optimal average reward by relative value iteration. Throws NumericalError
/// carrying the final bracket when max_sweeps is reached.
MdpSolveInfo solve_discretized_mdp_info(const DiscretizedMDP& mdp, double tol, int max_sweeps = 200000);
double solve_discretized_mdp(const DiscretizedMDP& mdp, double tol);

/// How continuous next-state laws are mapped onto the state grid.
enum class Snapping {
  nearest,  // cell masses of the law, assigned to the nearest node
  moment    // mean-preserving split onto the neighbouring nodes, variance matched where possible
};

struct MeanMdpConfig {
  int states = 201;
  int actions = 41;
  double half_width = 0.0;  // 0 picks a width covering the reachable mass
  double mixing = 1e-6;
  Snapping snapping = Snapping::nearest;
};

/// One-dimensional mean-estimation instance: benign N(mu, sigma2), defense
/// noise variance s, adversary constrained to |z - mu| <= sqrt(r).
DiscretizedMDP build_mean_mdp(double mu, double sigma2, double eta, double s, double epsilon, double r,
                              const MeanMdpConfig& config = {});

}  // namespace poisoncert
