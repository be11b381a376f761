#pragma once

#include "poisoncert/mean_cert.hpp"
#include "poisoncert/simulate.hpp"

#include <cstdint>
#include <vector>

namespace poisoncert {

struct TaskPrior {
  double dof = 0.0;  // <= 0: d + 2
  Mat scale;         // empty: identity
};

struct MeanTask {
  Vec mu;
  Mat Sigma;
};

/// mu ~ N(0, I), Sigma ~ InverseWishart(dof, scale).
MeanTask sample_task(int d, const TaskPrior& prior, std::uint64_t seed);
std::vector<MeanTask> sample_tasks(int d, int count, const TaskPrior& prior, std::uint64_t seed);

/// Wishart(scale, dof) draw by the Bartlett decomposition.
Mat sample_wishart(const Mat& scale, double dof, std::mt19937_64& rng);

struct MetaConfig {
  double kappa = 1.0;
  int T = 10;
  int K = 10;
  std::uint64_t seed = 0;
  TaskPrior prior;
  double trace_cap = 1e3;  // Tr(S) <= trace_cap keeps the S step bounded
  bool isotropic = false;  // restrict S to s I
  int threads = 1;
  sdp::SolveOptions solver;
};

struct MetaTrace {
  std::vector<double> objective;          // after the S step of each iteration
  std::vector<double> objective_after_a;  // after the multiplier step
  std::vector<double> s_step_gap;
  std::vector<bool> cap_active;
  std::vector<Mat> S_history;  // S^(1), ..., S^(T+1)
  std::vector<MeanDualPoint> duals;  // last multiplier step, one per task
  Mat S;
};

/// (kappa / K) sum_i g(dual_i; S, task_i) + eta^2 Tr(S)
double meta_objective(const std::vector<MeanTask>& tasks, const std::vector<MeanDualPoint>& duals, const Mat& S,
                      double eta, double epsilon, double r, double kappa);

/// Initial S: Wishart(I, d) draw rescaled to trace d.
Mat initial_defense(int d, std::uint64_t seed);

struct SStep {
  Mat S;
  double gap = 0.0;
  bool cap_active = false;
};

/// argmin over 0 <= S, Tr(S) <= cap of (kappa / K) sum_i eta^2 Tr(A_i S) + eta^2 Tr(S).
SStep solve_s_step(const std::vector<MeanDualPoint>& duals, double eta, double kappa, double trace_cap,
                   bool isotropic);

/// Alternating minimization over the task multipliers and S.
MetaTrace meta_train(const std::vector<MeanTask>& tasks, double eta, double epsilon, double r,
                     const MetaConfig& cfg);

struct DefenseEvaluation {
  double mean = 0.0;
  double stderr_ = 0.0;
  Vec per_task;  // seed-averaged loss per task
  Vec per_seed;  // task-averaged loss per seed index
};

struct EvalConfig {
  long T = 50000;
  long burn_in = 10000;
  int seeds = 8;
  std::uint64_t seed = 0;
  int threads = 1;
};

/// Time-averaged ||mu - theta||^2 under the attack, averaged over tasks.
/// Seeds are shared across tasks and defenses so comparisons are paired.
DefenseEvaluation eval_defense(const Mat& S, const std::vector<MeanTask>& tasks, double eta, double epsilon, double r,
                               const AttackPolicy& attack, const EvalConfig& cfg = {});

/// Best s I over the candidate scales, judged by eval_defense on the given tasks.
double best_isotropic_scale(const std::vector<double>& scales, const std::vector<MeanTask>& tasks, double eta,
                            double epsilon, double r, const AttackPolicy& attack, const EvalConfig& cfg = {});

}  // namespace poisoncert
