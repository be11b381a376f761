#pragma once

#include "poisoncert/certcore.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace poisoncert {

struct AttackPolicy {
  enum class Kind { none, label_flip, fgsm, pgd, greedy };
  Kind kind = Kind::none;
  double step = 0.1;        // fgsm / pgd ascent step (along the unit gradient direction)
  int steps = 1;            // pgd iterations
  int horizon = 1;          // lookahead depth of the attacked loss
  bool fixed_point = false;  // label flip: reuse one drawn point instead of a fresh draw

  static AttackPolicy none() { return {}; }
  static AttackPolicy label_flip(bool fixed = false);
  static AttackPolicy fgsm(double step);
  static AttackPolicy pgd(int steps, double step);
  static AttackPolicy greedy();

  void validate() const;
  std::string name() const;
};

AttackPolicy::Kind parse_attack_kind(const std::string& name);

struct Trajectory {
  std::vector<Vec> thetas;  // filled only when recording is requested
  double avg_adv_loss = 0.0;
  double avg_benign_loss = 0.0;
  Vec mean_theta;            // time average of theta after burn-in
  double max_theta_norm = 0.0;
  double max_adv_violation = 0.0;  // distance of injected points outside the adversary set
  long poisoned_steps = 0;
  std::uint64_t seed = 0;
  long T = 0;
  long burn_in = 0;
  std::uint64_t config_hash = 0;
};

struct RunOptions {
  bool record_thetas = false;
  int record_stride = 1;
};

/// One poisoned trajectory. Each step draws z_adv from the policy with
/// probability epsilon (projected onto adv_set), otherwise a benign sample,
/// then applies the rule. Losses average theta_{burn_in+1..T}.
Trajectory run_online(const LearningRule& rule, const ContaminatedStream& stream, const AdversarialObjective& obj,
                      const AttackPolicy& policy, const Region& adv_set, long T, long burn_in, std::uint64_t seed,
                      const Vec& theta0, const RunOptions& options = {});

/// Independent seeds base_seed, base_seed + 1, ...; threads <= 1 runs inline.
std::vector<Trajectory> run_seeds(const LearningRule& rule, const ContaminatedStream& stream,
                                  const AdversarialObjective& obj, const AttackPolicy& policy, const Region& adv_set,
                                  long T, long burn_in, std::uint64_t base_seed, int seeds, const Vec& theta0,
                                  int threads = 1);

/// Minimizer of sigma/2 ||theta||^2 + mean_i max(0, 1 - theta^T z_i) by averaged
/// full-batch subgradient steps; the benign fixed point used to start hinge
/// trajectories in their stationary regime.
Vec hinge_warm_start(const Mat& points, double sigma, int iters = 20000);

/// argmax over ||z - mu||^2 <= r of the next-step squared error.
Vec greedy_best_response_mean(const Vec& theta, const Vec& mu, double r, double eta);

/// Deterministic lookahead loss l_adv(F^h(theta, z)) with the same z fed at every step.
double lookahead_loss(const Vec& theta, const Vec& z, const LearningRule& rule, const AdversarialObjective& obj,
                      int horizon = 1);
/// Its gradient in z with the hinge indicators frozen.
Vec lookahead_gradient(const Vec& theta, const Vec& z, const LearningRule& rule, const AdversarialObjective& obj,
                       int horizon = 1);

Vec fgsm_attack(const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj, double step,
                const Region& adv_set, std::mt19937_64& rng, int horizon = 1);
Vec pgd_attack(const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj, int steps, double step,
               const Region& adv_set, std::mt19937_64& rng, int horizon = 1);
/// Negated benign draw.
Vec label_flip_attack(const ContaminatedStream& stream, std::mt19937_64& rng);
/// Benign sample (Gaussian or uniform over the empirical points).
Vec sample_benign(const ContaminatedStream& stream, std::mt19937_64& rng);

struct RewardEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  int runs = 0;
};

/// Mean and standard error of avg_adv_loss across runs of one configuration.
RewardEstimate estimate_avg_reward(const std::vector<Trajectory>& runs);

}  // namespace poisoncert
