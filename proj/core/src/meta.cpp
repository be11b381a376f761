#include "poisoncert/meta.hpp"

#include <cmath>
#include <future>
#include <limits>

namespace poisoncert {

Mat sample_wishart(const Mat& scale, double dof, std::mt19937_64& rng) {
  const int d = static_cast<int>(scale.rows());
  require(scale.cols() == d && d >= 1, "sample_wishart: scale must be square");
  require(dof > d - 1, "sample_wishart: dof must exceed d - 1");
  std::normal_distribution<double> normal;
  Mat lower = Mat::Zero(d, d);
  for (int i = 0; i < d; ++i) {
    std::chi_squared_distribution<double> chi(dof - i);
    lower(i, i) = std::sqrt(chi(rng));
    for (int j = 0; j < i; ++j) lower(i, j) = normal(rng);
  }
  const Mat factor = psd_factor(scale) * lower;
  Mat w = factor * factor.transpose();
  return 0.5 * (w + w.transpose());
}

MeanTask sample_task(int d, const TaskPrior& prior, std::uint64_t seed) {
  require(d >= 1, "sample_task: d must be positive");
  const double dof = prior.dof > 0.0 ? prior.dof : d + 2.0;
  const Mat scale = prior.scale.size() == 0 ? Mat::Identity(d, d) : prior.scale;
  require(scale.rows() == d && scale.cols() == d && is_psd(scale), "sample_task: scale must be d x d PSD");
  require(dof > d - 1, "sample_task: dof must exceed d - 1");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  MeanTask task;
  task.mu.resize(d);
  for (int i = 0; i < d; ++i) task.mu(i) = normal(rng);
  // Sigma^{-1} ~ Wishart(scale^{-1}, dof).
  const Mat precision = sample_wishart(scale.inverse(), dof, rng);
  Mat sigma = precision.llt().solve(Mat::Identity(d, d));
  task.Sigma = 0.5 * (sigma + sigma.transpose());
  return task;
}

std::vector<MeanTask> sample_tasks(int d, int count, const TaskPrior& prior, std::uint64_t seed) {
  require(count >= 0, "sample_tasks: count must be nonnegative");
  std::vector<MeanTask> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) out.push_back(sample_task(d, prior, seed ^ fnv1a("task " + std::to_string(k))));
  return out;
}

namespace {

// Multipliers come from the solver and sit on the LMI boundary.
constexpr double kBoundaryTol = 1e-7;

MeanInstance task_instance(const MeanTask& task, const Mat& S, double eta, double epsilon, double r) {
  MeanInstance inst;
  inst.mu = task.mu;
  inst.Sigma = task.Sigma;
  inst.S = S;
  inst.eta = eta;
  inst.epsilon = epsilon;
  inst.r = r;
  return inst;
}

}  // namespace

double meta_objective(const std::vector<MeanTask>& tasks, const std::vector<MeanDualPoint>& duals, const Mat& S,
                      double eta, double epsilon, double r, double kappa) {
  require(!tasks.empty() && tasks.size() == duals.size(), "meta_objective: one multiplier per task");
  double sum = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    sum += eval_g(duals[i], task_instance(tasks[i], S, eta, epsilon, r), kBoundaryTol);
  return kappa / static_cast<double>(tasks.size()) * sum + benign_loss(eta, S);
}

Mat initial_defense(int d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Mat w = sample_wishart(Mat::Identity(d, d), d, rng);
  return w * (d / w.trace());
}

SStep solve_s_step(const std::vector<MeanDualPoint>& duals, double eta, double kappa, double trace_cap,
                   bool isotropic) {
  require(!duals.empty(), "solve_s_step: no multipliers");
  require(kappa > 0.0 && trace_cap > 0.0, "solve_s_step: kappa and trace_cap must be positive");
  const Eigen::Index d = duals.front().A.rows();
  Mat cost = Mat::Identity(d, d);
  for (const auto& dual : duals) cost += kappa / static_cast<double>(duals.size()) * dual.A;
  cost = 0.5 * (cost + cost.transpose());
  const double scale = eta * eta;

  // Linear objective over {S >= 0, Tr S <= cap}: the minimum sits at 0 or at
  // cap times the bottom eigenvector. The dual bound cap * min(0, lambda_min)
  // closes the gap.
  SStep out;
  double primal = 0.0, dual_bound = 0.0;
  if (isotropic) {
    const double tr = cost.trace();
    const double s = tr < 0.0 ? trace_cap / static_cast<double>(d) : 0.0;
    out.S = s * Mat::Identity(d, d);
    primal = scale * s * tr;
    dual_bound = scale * std::min(0.0, trace_cap / static_cast<double>(d) * tr);
  } else {
    Eigen::SelfAdjointEigenSolver<Mat> es(cost);
    const double lmin = es.eigenvalues()(0);
    if (lmin < 0.0) {
      const Vec v = es.eigenvectors().col(0);
      out.S = trace_cap * v * v.transpose();
    } else {
      out.S = Mat::Zero(d, d);
    }
    primal = scale * (cost.cwiseProduct(out.S)).sum();
    dual_bound = scale * trace_cap * std::min(0.0, lmin);
  }
  out.gap = std::abs(primal - dual_bound);
  out.cap_active = out.S.trace() > 0.5 * trace_cap;
  return out;
}

MetaTrace meta_train(const std::vector<MeanTask>& tasks, double eta, double epsilon, double r,
                     const MetaConfig& cfg) {
  require(!tasks.empty(), "meta_train: need at least one task");
  require(cfg.kappa > 0.0, "meta_train: kappa must be positive");
  require(cfg.T >= 1, "meta_train: T must be at least 1");
  const int d = static_cast<int>(tasks.front().mu.size());
  MetaTrace trace;
  Mat S = initial_defense(d, cfg.seed);
  if (cfg.isotropic) S = S.trace() / d * Mat::Identity(d, d);
  trace.S_history.push_back(S);

  auto solve_task = [&](std::size_t i, const Mat& s) {
    try {
      return solve_mean_dual(task_instance(tasks[i], s, eta, epsilon, r), cfg.solver).dual;
    } catch (const std::exception& e) {
      throw NumericalError("meta_train: multiplier step failed on task " + std::to_string(i) + ": " + e.what());
    }
  };

  for (int t = 0; t < cfg.T; ++t) {
    std::vector<MeanDualPoint> duals(tasks.size());
    if (cfg.threads > 1) {
      std::vector<std::future<MeanDualPoint>> futures;
      for (std::size_t i = 0; i < tasks.size(); ++i)
        futures.push_back(std::async(std::launch::async, solve_task, i, S));
      for (std::size_t i = 0; i < tasks.size(); ++i) duals[i] = futures[i].get();
    } else {
      for (std::size_t i = 0; i < tasks.size(); ++i) duals[i] = solve_task(i, S);
    }
    trace.objective_after_a.push_back(meta_objective(tasks, duals, S, eta, epsilon, r, cfg.kappa));

    const SStep step = solve_s_step(duals, eta, cfg.kappa, cfg.trace_cap, cfg.isotropic);
    S = step.S;
    trace.s_step_gap.push_back(step.gap);
    trace.cap_active.push_back(step.cap_active);
    trace.S_history.push_back(S);
    trace.objective.push_back(meta_objective(tasks, duals, S, eta, epsilon, r, cfg.kappa));
    trace.duals = std::move(duals);
  }
  trace.S = S;
  return trace;
}

DefenseEvaluation eval_defense(const Mat& S, const std::vector<MeanTask>& tasks, double eta, double epsilon, double r,
                               const AttackPolicy& attack, const EvalConfig& cfg) {
  require(!tasks.empty(), "eval_defense: no tasks");
  require(cfg.seeds >= 1, "eval_defense: need at least one seed");
  DefenseEvaluation out;
  out.per_task = Vec::Zero(static_cast<Eigen::Index>(tasks.size()));
  out.per_seed = Vec::Zero(cfg.seeds);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const MeanInstance inst = task_instance(tasks[i], S, eta, epsilon, r);
    inst.validate();
    const auto runs = run_seeds(inst.rule(), inst.stream(), inst.objective(), attack, mean_adversary_set(inst),
                                cfg.T, cfg.burn_in, cfg.seed + 1000003ULL * i, cfg.seeds, inst.mu, cfg.threads);
    for (int s = 0; s < cfg.seeds; ++s) {
      out.per_task(static_cast<Eigen::Index>(i)) += runs[s].avg_adv_loss / cfg.seeds;
      out.per_seed(s) += runs[s].avg_adv_loss / static_cast<double>(tasks.size());
    }
  }
  out.mean = out.per_seed.mean();
  if (cfg.seeds > 1) {
    const double var = (out.per_seed.array() - out.mean).square().sum() / (cfg.seeds - 1);
    out.stderr_ = std::sqrt(var / cfg.seeds);
  }
  return out;
}

double best_isotropic_scale(const std::vector<double>& scales, const std::vector<MeanTask>& tasks, double eta,
                            double epsilon, double r, const AttackPolicy& attack, const EvalConfig& cfg) {
  require(!scales.empty() && !tasks.empty(), "best_isotropic_scale: empty candidates");
  const int d = static_cast<int>(tasks.front().mu.size());
  double best = scales.front(), best_val = std::numeric_limits<double>::infinity();
  for (double s : scales) {
    require(s >= 0.0, "best_isotropic_scale: scales must be nonnegative");
    const double v = eval_defense(s * Mat::Identity(d, d), tasks, eta, epsilon, r, attack, cfg).mean;
    if (v < best_val) {
      best_val = v;
      best = s;
    }
  }
  return best;
}

}  // namespace poisoncert
