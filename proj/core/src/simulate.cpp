#include "poisoncert/simulate.hpp"

#include <cmath>
#include <future>
#include <sstream>

namespace poisoncert {

AttackPolicy AttackPolicy::label_flip(bool fixed) {
  AttackPolicy p;
  p.kind = Kind::label_flip;
  p.fixed_point = fixed;
  return p;
}

AttackPolicy AttackPolicy::fgsm(double step) {
  AttackPolicy p;
  p.kind = Kind::fgsm;
  p.step = step;
  return p;
}

AttackPolicy AttackPolicy::pgd(int steps, double step) {
  AttackPolicy p;
  p.kind = Kind::pgd;
  p.steps = steps;
  p.step = step;
  return p;
}

AttackPolicy AttackPolicy::greedy() {
  AttackPolicy p;
  p.kind = Kind::greedy;
  return p;
}

void AttackPolicy::validate() const {
  require(step > 0.0 && std::isfinite(step), "AttackPolicy: step must be positive");
  require(steps >= 1, "AttackPolicy: steps must be at least 1");
  require(horizon >= 1, "AttackPolicy: horizon must be at least 1");
}

std::string AttackPolicy::name() const {
  switch (kind) {
    case Kind::none: return "none";
    case Kind::label_flip: return "label_flip";
    case Kind::fgsm: return "fgsm";
    case Kind::pgd: return "pgd";
    case Kind::greedy: return "greedy";
  }
  return "unknown";
}

AttackPolicy::Kind parse_attack_kind(const std::string& name) {
  if (name == "none") return AttackPolicy::Kind::none;
  if (name == "label_flip" || name == "labelflip" || name == "flip") return AttackPolicy::Kind::label_flip;
  if (name == "fgsm") return AttackPolicy::Kind::fgsm;
  if (name == "pgd") return AttackPolicy::Kind::pgd;
  if (name == "greedy") return AttackPolicy::Kind::greedy;
  throw ContractViolation("unknown attack '" + name + "'");
}

Vec greedy_best_response_mean(const Vec& theta, const Vec& mu, double r, double eta) {
  require(r > 0.0, "greedy_best_response_mean: r must be positive");
  require(eta > 0.0 && eta < 1.0, "greedy_best_response_mean: eta must lie in (0, 1)");
  require(theta.size() == mu.size(), "greedy_best_response_mean: dimension mismatch");
  const Vec disp = theta - mu;
  const double n = disp.norm();
  if (n == 0.0) {
    Vec z = mu;
    z(0) += std::sqrt(r);
    return z;
  }
  return mu + disp * (std::sqrt(r) / n);
}

Vec hinge_warm_start(const Mat& points, double sigma, int iters) {
  require(points.rows() >= 1 && sigma > 0.0 && iters >= 1, "hinge_warm_start: bad arguments");
  const Eigen::Index d = points.cols();
  Vec theta = Vec::Zero(d), avg = Vec::Zero(d);
  for (int k = 1; k <= iters; ++k) {
    const Vec margins = points * theta;
    Vec active = Vec::Zero(d);
    for (Eigen::Index i = 0; i < margins.size(); ++i)
      if (margins(i) <= 1.0) active += points.row(i).transpose();
    active /= static_cast<double>(points.rows());
    // Step 1 / (sigma k) on the strongly convex objective keeps ||theta|| <= 1 / sigma.
    theta = (1.0 - 1.0 / k) * theta + active / (sigma * k);
    if (2 * k > iters) avg += theta;
  }
  return avg / static_cast<double>(iters - iters / 2);
}

namespace {

// Rollout with a fixed z; jac is the scalar with dF/dz = jac * I (indicators frozen).
Vec rollout(const Vec& theta, const Vec& z, const LearningRule& rule, int horizon, double& jac) {
  Vec cur = theta;
  jac = 0.0;
  for (int k = 0; k < horizon; ++k) {
    if (const auto* m = std::get_if<MeanRule>(&rule)) {
      jac = (1.0 - m->eta) * jac + m->eta;
    } else {
      const auto& h = std::get<HingeRule>(rule);
      const bool active = cur.dot(z) <= 1.0;
      jac = (1.0 - h.sigma * h.eta) * jac + (active ? h.eta : 0.0);
    }
    cur = apply_rule(rule, cur, z);
  }
  return cur;
}

double unit_step_ascent(Vec& z, const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj,
                        double step, const Region& adv_set, int horizon) {
  const Vec g = lookahead_gradient(theta, z, rule, obj, horizon);
  const double gn = g.norm();
  if (gn == 0.0 || !std::isfinite(gn)) return 0.0;
  z = adv_set.project(z + step * g / gn);
  return gn;
}

}  // namespace

double lookahead_loss(const Vec& theta, const Vec& z, const LearningRule& rule, const AdversarialObjective& obj,
                      int horizon) {
  double jac = 0.0;
  return adversarial_loss(obj, rollout(theta, z, rule, horizon, jac));
}

Vec lookahead_gradient(const Vec& theta, const Vec& z, const LearningRule& rule, const AdversarialObjective& obj,
                       int horizon) {
  double jac = 0.0;
  const Vec end = rollout(theta, z, rule, horizon, jac);
  return jac * adversarial_loss_gradient(obj, end);
}

Vec fgsm_attack(const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj, double step,
                const Region& adv_set, std::mt19937_64& rng, int horizon) {
  Vec z = sample_region(adv_set, rng);
  unit_step_ascent(z, theta, rule, obj, step, adv_set, horizon);
  return z;
}

Vec pgd_attack(const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj, int steps, double step,
               const Region& adv_set, std::mt19937_64& rng, int horizon) {
  require(steps >= 1, "pgd_attack: steps must be at least 1");
  Vec z = sample_region(adv_set, rng);
  for (int k = 0; k < steps; ++k)
    if (unit_step_ascent(z, theta, rule, obj, step, adv_set, horizon) == 0.0) break;
  return z;
}

Vec sample_benign(const ContaminatedStream& stream, std::mt19937_64& rng) {
  if (const auto* g = std::get_if<GaussianSource>(&stream.benign)) {
    std::normal_distribution<double> n;
    Vec w(g->mu.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = n(rng);
    return g->mu + psd_factor(g->sigma) * w;
  }
  const auto& pts = std::get<EmpiricalSource>(stream.benign).points;
  std::uniform_int_distribution<Eigen::Index> pick(0, pts.rows() - 1);
  return pts.row(pick(rng)).transpose();
}

Vec label_flip_attack(const ContaminatedStream& stream, std::mt19937_64& rng) { return -sample_benign(stream, rng); }

namespace {

Vec greedy_generic(const Vec& theta, const LearningRule& rule, const AdversarialObjective& obj,
                   const Region& adv_set, std::mt19937_64& rng, int horizon) {
  Vec best = adv_set.kind == Region::Kind::ball ? adv_set.center : adv_set.project(theta);
  double best_val = lookahead_loss(theta, best, rule, obj, horizon);
  for (int k = 0; k < 128; ++k) {
    Vec z = sample_region(adv_set, rng);
    if (adv_set.kind == Region::Kind::ball && k % 2 == 0 && (z - adv_set.center).norm() > 0)
      z = adv_set.center + (z - adv_set.center).normalized() * adv_set.radius;
    const double v = lookahead_loss(theta, z, rule, obj, horizon);
    if (v > best_val) {
      best_val = v;
      best = z;
    }
  }
  const auto [lo, hi] = adv_set.bounds();
  double step = 0.05 * (hi - lo).maxCoeff();
  for (int k = 0; k < 40 && step > 1e-9; ++k) {
    Vec z = best;
    unit_step_ascent(z, theta, rule, obj, step, adv_set, horizon);
    const double v = lookahead_loss(theta, z, rule, obj, horizon);
    if (v > best_val) {
      best_val = v;
      best = z;
    } else {
      step *= 0.5;
    }
  }
  return best;
}

std::string describe(const LearningRule& rule, const ContaminatedStream& stream, const AdversarialObjective& obj,
                     const AttackPolicy& policy, const Region& adv_set, long T, long burn_in, const Vec& theta0) {
  std::ostringstream os;
  os.precision(17);
  if (const auto* m = std::get_if<MeanRule>(&rule)) os << "mean " << m->eta << ' ' << m->S.reshaped().transpose();
  else os << "hinge " << std::get<HingeRule>(rule).eta << ' ' << std::get<HingeRule>(rule).sigma;
  os << " | eps " << stream.epsilon;
  if (const auto* g = std::get_if<GaussianSource>(&stream.benign))
    os << " gauss " << g->mu.transpose() << ' ' << g->sigma.reshaped().transpose();
  else {
    const auto& p = std::get<EmpiricalSource>(stream.benign).points;
    os << " emp " << p.rows() << ' ' << p.sum() << ' ' << p.squaredNorm();
  }
  os << " | obj " << obj.index() << " | " << policy.name() << ' ' << policy.step << ' ' << policy.steps << ' '
     << policy.horizon << ' ' << policy.fixed_point << " | adv " << static_cast<int>(adv_set.kind) << ' '
     << adv_set.radius << " | " << T << ' ' << burn_in << " | " << theta0.transpose();
  return os.str();
}

double benign_loss_of(const ContaminatedStream& stream, const AdversarialObjective& obj, const Vec& theta) {
  if (const auto* g = std::get_if<GaussianSource>(&stream.benign)) return (theta - g->mu).squaredNorm();
  if (std::holds_alternative<SquaredDistance>(obj)) return adversarial_loss(obj, theta);
  const auto& pts = std::get<EmpiricalSource>(stream.benign).points;
  return (1.0 - (pts * theta).array()).cwiseMax(0.0).mean();
}

}  // namespace

Trajectory run_online(const LearningRule& rule, const ContaminatedStream& stream, const AdversarialObjective& obj,
                      const AttackPolicy& policy, const Region& adv_set, long T, long burn_in, std::uint64_t seed,
                      const Vec& theta0, const RunOptions& options) {
  const int d = static_cast<int>(theta0.size());
  stream.validate();
  validate_rule(rule, d);
  policy.validate();
  require(stream.dim() == d && adv_set.dim() == d, "run_online: dimension mismatch");
  require(T > burn_in && burn_in >= 0, "run_online: need T > burn_in >= 0");
  require(options.record_stride >= 1, "run_online: record_stride must be positive");
  if (const auto* h = std::get_if<HingeRule>(&rule))
    require(theta0.norm() <= 1.0 / h->sigma + 1e-12, "run_online: ||theta0|| must not exceed 1/sigma");
  const bool mean_greedy = std::holds_alternative<MeanRule>(rule) && std::holds_alternative<SquaredDistance>(obj) &&
                           adv_set.kind == Region::Kind::ball;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> normal;

  Mat benign_factor, noise_factor;
  const GaussianSource* gauss = std::get_if<GaussianSource>(&stream.benign);
  const Mat* points = nullptr;
  if (gauss) benign_factor = psd_factor(gauss->sigma);
  else points = &std::get<EmpiricalSource>(stream.benign).points;
  const MeanRule* mean_rule = std::get_if<MeanRule>(&rule);
  bool has_noise = false;
  if (mean_rule) {
    noise_factor = psd_factor(mean_rule->S);
    has_noise = noise_factor.cwiseAbs().maxCoeff() > 0.0;
  }
  std::uniform_int_distribution<Eigen::Index> pick(0, points ? points->rows() - 1 : 0);
  auto draw_benign = [&]() -> Vec {
    if (gauss) {
      Vec w(d);
      for (int i = 0; i < d; ++i) w(i) = normal(rng);
      return gauss->mu + benign_factor * w;
    }
    return points->row(pick(rng)).transpose();
  };

  Trajectory tr;
  tr.seed = seed;
  tr.T = T;
  tr.burn_in = burn_in;
  tr.config_hash = fnv1a(describe(rule, stream, obj, policy, adv_set, T, burn_in, theta0));
  tr.mean_theta = Vec::Zero(d);
  if (options.record_thetas) tr.thetas.push_back(theta0);

  Vec theta = theta0;
  Vec fixed_flip;
  tr.max_theta_norm = theta.norm();
  double adv_sum = 0.0, benign_sum = 0.0;
  for (long t = 0; t < T; ++t) {
    Vec z;
    if (stream.epsilon > 0.0 && coin(rng) < stream.epsilon) {
      switch (policy.kind) {
        case AttackPolicy::Kind::none: z = draw_benign(); break;
        case AttackPolicy::Kind::label_flip:
          if (policy.fixed_point) {
            if (fixed_flip.size() == 0) fixed_flip = -draw_benign();
            z = fixed_flip;
          } else {
            z = -draw_benign();
          }
          break;
        case AttackPolicy::Kind::fgsm:
          z = fgsm_attack(theta, rule, obj, policy.step, adv_set, rng, policy.horizon);
          break;
        case AttackPolicy::Kind::pgd:
          z = pgd_attack(theta, rule, obj, policy.steps, policy.step, adv_set, rng, policy.horizon);
          break;
        case AttackPolicy::Kind::greedy:
          if (mean_greedy && policy.horizon == 1)
            z = greedy_best_response_mean(theta, std::get<SquaredDistance>(obj).mu, adv_set.radius * adv_set.radius,
                                          mean_rule->eta);
          else
            z = greedy_generic(theta, rule, obj, adv_set, rng, policy.horizon);
          break;
      }
      if (!z.allFinite())
        throw NumericalError("run_online: attack '" + policy.name() + "' produced a non-finite point at step " +
                             std::to_string(t));
      if (policy.kind != AttackPolicy::Kind::none) {
        z = adv_set.project(z);
        double viol = 0.0;
        if (adv_set.kind == Region::Kind::ball) viol = std::max(0.0, (z - adv_set.center).norm() - adv_set.radius);
        else viol = std::max((adv_set.lo - z).maxCoeff(), (z - adv_set.hi).maxCoeff());
        tr.max_adv_violation = std::max(tr.max_adv_violation, std::max(0.0, viol));
      }
      ++tr.poisoned_steps;
    } else {
      z = draw_benign();
    }
    Vec next = apply_rule(rule, theta, z);
    if (has_noise) {
      Vec w(d);
      for (int i = 0; i < d; ++i) w(i) = normal(rng);
      next += mean_rule->eta * (noise_factor * w);
    }
    theta = std::move(next);
    tr.max_theta_norm = std::max(tr.max_theta_norm, theta.norm());
    if (t + 1 > burn_in) {
      adv_sum += adversarial_loss(obj, theta);
      benign_sum += benign_loss_of(stream, obj, theta);
      tr.mean_theta += theta;
    }
    if (options.record_thetas && (t + 1) % options.record_stride == 0) tr.thetas.push_back(theta);
  }
  const double n = static_cast<double>(T - burn_in);
  tr.avg_adv_loss = adv_sum / n;
  tr.avg_benign_loss = benign_sum / n;
  tr.mean_theta /= n;
  return tr;
}

std::vector<Trajectory> run_seeds(const LearningRule& rule, const ContaminatedStream& stream,
                                  const AdversarialObjective& obj, const AttackPolicy& policy, const Region& adv_set,
                                  long T, long burn_in, std::uint64_t base_seed, int seeds, const Vec& theta0,
                                  int threads) {
  require(seeds >= 1, "run_seeds: need at least one seed");
  std::vector<Trajectory> out(seeds);
  auto one = [&](int k) {
    return run_online(rule, stream, obj, policy, adv_set, T, burn_in, base_seed + static_cast<std::uint64_t>(k),
                      theta0);
  };
  if (threads <= 1) {
    for (int k = 0; k < seeds; ++k) out[k] = one(k);
    return out;
  }
  for (int start = 0; start < seeds; start += threads) {
    std::vector<std::future<Trajectory>> jobs;
    const int stop = std::min(seeds, start + threads);
    for (int k = start; k < stop; ++k) jobs.push_back(std::async(std::launch::async, one, k));
    for (int k = start; k < stop; ++k) out[k] = jobs[k - start].get();
  }
  return out;
}

RewardEstimate estimate_avg_reward(const std::vector<Trajectory>& runs) {
  require(runs.size() >= 2, "estimate_avg_reward: need at least two runs");
  const auto& ref = runs.front();
  double sum = 0.0;
  for (const auto& r : runs) {
    require(r.T == ref.T && r.burn_in == ref.burn_in && r.config_hash == ref.config_hash,
            "estimate_avg_reward: runs differ in configuration");
    sum += r.avg_adv_loss;
  }
  const double n = static_cast<double>(runs.size());
  RewardEstimate est;
  est.runs = static_cast<int>(runs.size());
  est.mean = sum / n;
  double ss = 0.0;
  for (const auto& r : runs) ss += (r.avg_adv_loss - est.mean) * (r.avg_adv_loss - est.mean);
  est.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  return est;
}

}  // namespace poisoncert
