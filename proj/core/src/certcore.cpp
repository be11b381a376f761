#include "poisoncert/certcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace poisoncert {

QuadraticMultiplier::QuadraticMultiplier(Mat a, Vec bv, double cv) : A(std::move(a)), b(std::move(bv)), c(cv) {
  validate();
}

QuadraticMultiplier QuadraticMultiplier::zero(int d) { return {Mat::Zero(d, d), Vec::Zero(d), 0.0}; }

double QuadraticMultiplier::operator()(const Vec& theta) const { return theta.dot(A * theta) + b.dot(theta) + c; }

Vec QuadraticMultiplier::gradient(const Vec& theta) const { return 2.0 * (A * theta) + b; }

void QuadraticMultiplier::validate() const {
  require(A.rows() == A.cols(), "QuadraticMultiplier: A must be square");
  require(A.rows() == b.size(), "QuadraticMultiplier: dim(b) must equal rows(A)");
  require(A.size() == 0 || (A - A.transpose()).cwiseAbs().maxCoeff() <= 1e-12,
          "QuadraticMultiplier: A must be symmetric");
}

ContaminatedStream ContaminatedStream::gaussian(double epsilon, Vec mu, Mat sigma) {
  ContaminatedStream s{epsilon, GaussianSource{std::move(mu), std::move(sigma)}};
  s.validate();
  return s;
}

ContaminatedStream ContaminatedStream::empirical(double epsilon, Mat points) {
  ContaminatedStream s{epsilon, EmpiricalSource{std::move(points)}};
  s.validate();
  return s;
}

int ContaminatedStream::dim() const {
  if (const auto* g = std::get_if<GaussianSource>(&benign)) return static_cast<int>(g->mu.size());
  return static_cast<int>(std::get<EmpiricalSource>(benign).points.cols());
}

void ContaminatedStream::validate() const {
  require(epsilon >= 0.0 && epsilon <= 1.0, "ContaminatedStream: epsilon must lie in [0, 1]");
  if (const auto* g = std::get_if<GaussianSource>(&benign)) {
    require(g->sigma.rows() == g->mu.size() && g->sigma.cols() == g->mu.size(),
            "GaussianSource: covariance dimension mismatch");
    require(is_psd(g->sigma), "GaussianSource: covariance must be symmetric PSD");
  } else {
    const auto& e = std::get<EmpiricalSource>(benign);
    require(e.points.rows() >= 1, "EmpiricalSource: needs at least one point");
    require(e.points.allFinite(), "EmpiricalSource: non-finite point");
  }
}

void validate_rule(const LearningRule& rule, int dim) {
  if (const auto* m = std::get_if<MeanRule>(&rule)) {
    require(m->eta > 0.0 && m->eta < 1.0, "MeanRule: eta must lie in (0, 1)");
    require(m->S.rows() == dim && m->S.cols() == dim, "MeanRule: S dimension mismatch");
    require(is_psd(m->S), "MeanRule: S must be symmetric PSD");
  } else {
    const auto& h = std::get<HingeRule>(rule);
    require(h.eta > 0.0 && h.sigma > 0.0, "HingeRule: eta and sigma must be positive");
    require(h.sigma * h.eta < 1.0, "HingeRule: sigma * eta must be below 1");
  }
}

Vec apply_rule(const LearningRule& rule, const Vec& theta, const Vec& z) {
  if (const auto* m = std::get_if<MeanRule>(&rule)) return (1.0 - m->eta) * theta + m->eta * z;
  const auto& h = std::get<HingeRule>(rule);
  Vec next = (1.0 - h.sigma * h.eta) * theta;
  if (theta.dot(z) <= 1.0) next += h.eta * z;
  return next;
}

double adversarial_loss(const AdversarialObjective& obj, const Vec& theta) {
  if (const auto* sq = std::get_if<SquaredDistance>(&obj)) return (sq->mu - theta).squaredNorm();
  const auto& h = std::get<HingeOnTarget>(obj);
  const Vec margins = h.targets * theta;
  return (1.0 - margins.array()).cwiseMax(0.0).mean();
}

Vec adversarial_loss_gradient(const AdversarialObjective& obj, const Vec& theta) {
  if (const auto* sq = std::get_if<SquaredDistance>(&obj)) return 2.0 * (theta - sq->mu);
  const auto& h = std::get<HingeOnTarget>(obj);
  const Vec margins = h.targets * theta;
  Vec g = Vec::Zero(theta.size());
  for (Eigen::Index i = 0; i < margins.size(); ++i)
    if (margins(i) < 1.0) g -= h.targets.row(i).transpose();
  return g / static_cast<double>(h.targets.rows());
}

Region Region::ball(Vec center, double radius) {
  require(radius >= 0.0, "Region: negative radius");
  Region r;
  r.kind = Kind::ball;
  r.center = std::move(center);
  r.radius = radius;
  return r;
}

Region Region::box(Vec lo, Vec hi) {
  require(lo.size() == hi.size() && (hi - lo).minCoeff() >= 0.0, "Region: malformed box");
  Region r;
  r.kind = Kind::box;
  r.lo = std::move(lo);
  r.hi = std::move(hi);
  return r;
}

int Region::dim() const { return static_cast<int>(kind == Kind::ball ? center.size() : lo.size()); }

bool Region::contains(const Vec& x, double tol) const {
  if (kind == Kind::ball) return (x - center).norm() <= radius * (1.0 + tol) + tol;
  return ((x - lo).minCoeff() >= -tol) && ((hi - x).minCoeff() >= -tol);
}

Vec Region::project(const Vec& x) const {
  if (kind == Kind::ball) return project_to_ball(x, center, radius);
  return x.cwiseMax(lo).cwiseMin(hi);
}

std::pair<Vec, Vec> Region::bounds() const {
  if (kind == Kind::box) return {lo, hi};
  return {center.array() - radius, center.array() + radius};
}

LagrangianEvaluator::LagrangianEvaluator(QuadraticMultiplier lambda, LearningRule rule, ContaminatedStream stream,
                                         AdversarialObjective obj)
    : lambda_(std::move(lambda)), rule_(std::move(rule)), stream_(std::move(stream)), obj_(std::move(obj)) {
  lambda_.validate();
  stream_.validate();
  const int d = lambda_.dim();
  require(stream_.dim() == d, "lagrangian: stream dimension differs from multiplier");
  validate_rule(rule_, d);
  if (const auto* sq = std::get_if<SquaredDistance>(&obj_))
    require(sq->mu.size() == d, "lagrangian: objective dimension mismatch");
  else
    require(std::get<HingeOnTarget>(obj_).targets.cols() == d, "lagrangian: target dimension mismatch");

  if (const auto* m = std::get_if<MeanRule>(&rule_)) {
    const double eta2 = m->eta * m->eta;
    noise_const_ = eta2 * (lambda_.A * m->S).trace();
    if (const auto* g = std::get_if<GaussianSource>(&stream_.benign)) {
      noise_const_ += (1.0 - stream_.epsilon) * eta2 * (lambda_.A * g->sigma).trace();
      pts_ = g->mu.transpose();
    } else {
      pts_ = std::get<EmpiricalSource>(stream_.benign).points;
    }
  } else {
    require(!stream_.is_gaussian(), "lagrangian: the hinge rule needs an empirical benign source");
    pts_ = std::get<EmpiricalSource>(stream_.benign).points;
  }
  apts_ = pts_ * lambda_.A;  // symmetric A
  zaz_ = (apts_.cwiseProduct(pts_)).rowwise().sum();
  bz_ = pts_ * lambda_.b;
}

// Increments are formed as lambda(theta + delta) - lambda(theta) = delta^T A (2 theta + delta) + b^T delta
// with delta = g theta + eta q z, so large multipliers do not cancel catastrophically.
void LagrangianEvaluator::step_params(double& g, double& eta) const {
  if (const auto* m = std::get_if<MeanRule>(&rule_)) {
    g = -m->eta;
    eta = m->eta;
  } else {
    const auto& h = std::get<HingeRule>(rule_);
    g = -h.sigma * h.eta;
    eta = h.eta;
  }
}

double LagrangianEvaluator::base(const Vec& theta) const {
  const double eps = stream_.epsilon;
  double g = 0.0, eta = 0.0;
  step_params(g, eta);
  const double tat = theta.dot(lambda_.A * theta);
  const double self = g * (2.0 + g) * tat + g * lambda_.b.dot(theta);
  const Vec cross = apts_ * theta;
  const bool hinge = std::holds_alternative<HingeRule>(rule_);
  const Vec margins = hinge ? Vec(pts_ * theta) : Vec();
  double benign = 0.0;
  for (Eigen::Index i = 0; i < cross.size(); ++i) {
    if (hinge && margins(i) > 1.0) continue;
    benign += 2.0 * eta * (1.0 + g) * cross(i) + eta * eta * zaz_(i) + eta * bz_(i);
  }
  benign /= static_cast<double>(cross.size());
  return self + (1.0 - eps) * benign + noise_const_ + adversarial_loss(obj_, theta);
}

double LagrangianEvaluator::adversarial_term(const Vec& theta, const Vec& z) const {
  if (std::holds_alternative<HingeRule>(rule_) && theta.dot(z) > 1.0) return 0.0;
  double g = 0.0, eta = 0.0;
  step_params(g, eta);
  const Vec az = lambda_.A * z;
  return 2.0 * eta * (1.0 + g) * az.dot(theta) + eta * eta * az.dot(z) + eta * lambda_.b.dot(z);
}

double LagrangianEvaluator::value(const Vec& theta, const Vec& z) const {
  require(theta.size() == dim() && z.size() == dim(), "lagrangian: dimension mismatch");
  return base(theta) + stream_.epsilon * adversarial_term(theta, z);
}

void LagrangianEvaluator::gradient(const Vec& theta, const Vec& z, Vec& g_theta, Vec& g_z) const {
  const double eps = stream_.epsilon;
  const Mat& A = lambda_.A;
  double g = 0.0, eta = 0.0;
  step_params(g, eta);
  const bool hinge = std::holds_alternative<HingeRule>(rule_);
  Vec za = Vec::Zero(theta.size());
  if (hinge) {
    const Vec margins = pts_ * theta;
    for (Eigen::Index i = 0; i < margins.size(); ++i)
      if (margins(i) <= 1.0) za += apts_.row(i).transpose();
  } else {
    za = apts_.colwise().sum().transpose();
  }
  za /= static_cast<double>(pts_.rows());
  const bool adv_active = !hinge || theta.dot(z) <= 1.0;
  const Vec az = A * z;
  g_theta = 2.0 * g * (2.0 + g) * (A * theta) + g * lambda_.b + (1.0 - eps) * 2.0 * eta * (1.0 + g) * za +
            adversarial_loss_gradient(obj_, theta);
  if (adv_active) {
    g_theta += eps * 2.0 * eta * (1.0 + g) * az;
    g_z = eps * (2.0 * eta * (1.0 + g) * (A * theta) + 2.0 * eta * eta * az + eta * lambda_.b);
  } else {
    g_z = Vec::Zero(theta.size());
  }
}

double lagrangian_value(const QuadraticMultiplier& lambda, const Vec& theta, const Vec& z_adv,
                        const LearningRule& rule, const ContaminatedStream& stream,
                        const AdversarialObjective& obj) {
  return LagrangianEvaluator(lambda, rule, stream, obj).value(theta, z_adv);
}

double inflate_bound(double raw, const SearchConfig& search) {
  return raw + search.rel_margin * std::abs(raw) + search.abs_margin;
}

Vec sample_region(const Region& region, std::mt19937_64& rng) {
  const int d = region.dim();
  if (region.kind == Region::Kind::box) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vec x(d);
    for (int i = 0; i < d; ++i) x(i) = region.lo(i) + u(rng) * (region.hi(i) - region.lo(i));
    return x;
  }
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec dir(d);
  for (int i = 0; i < d; ++i) dir(i) = g(rng);
  const double n = dir.norm();
  if (n == 0.0) return region.center;
  return region.center + dir * (region.radius * std::pow(u(rng), 1.0 / d) / n);
}

namespace {

// Axis grid over the bounding box, filtered to the region.
std::vector<Vec> region_grid(const Region& region, int per_axis) {
  const int d = region.dim();
  const auto [lo, hi] = region.bounds();
  std::vector<Vec> out;
  std::vector<int> idx(d, 0);
  while (true) {
    Vec x(d);
    for (int i = 0; i < d; ++i)
      x(i) = per_axis == 1 ? 0.5 * (lo(i) + hi(i)) : lo(i) + (hi(i) - lo(i)) * idx[i] / (per_axis - 1.0);
    if (region.contains(x, 1e-12)) out.push_back(region.project(x));
    int k = 0;
    while (k < d && ++idx[k] == per_axis) idx[k++] = 0;
    if (k == d) break;
  }
  return out;
}

// Points on the boundary sphere of a ball (d <= 3).
std::vector<Vec> sphere_points(const Region& ball, int count) {
  const int d = ball.dim();
  std::vector<Vec> out;
  if (ball.kind != Region::Kind::ball || ball.radius == 0.0) return out;
  if (d == 1) {
    out.push_back(ball.center.array() - ball.radius);
    out.push_back(ball.center.array() + ball.radius);
  } else if (d == 2) {
    for (int k = 0; k < count; ++k) {
      const double a = 2.0 * std::numbers::pi * k / count;
      out.push_back(ball.center + ball.radius * Vec(Eigen::Vector2d(std::cos(a), std::sin(a))));
    }
  } else if (d == 3) {
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int k = 0; k < count; ++k) {
      const double y = 1.0 - 2.0 * (k + 0.5) / count;
      const double rad = std::sqrt(std::max(0.0, 1.0 - y * y));
      const double phi = golden * k;
      out.push_back(ball.center + ball.radius * Vec(Eigen::Vector3d(std::cos(phi) * rad, y, std::sin(phi) * rad)));
    }
  }
  return out;
}

struct Best {
  double value = -std::numeric_limits<double>::infinity();
  Vec theta, z;
  bool nonconverged = false;
};

class Ascent {
 public:
  Ascent(const LagrangianEvaluator& ev, const Region& domain, const Region& adv, const SearchConfig& cfg,
         long& evals)
      : ev_(ev), domain_(domain), adv_(adv), cfg_(cfg), evals_(evals) {}

  // Projected gradient ascent with Armijo backtracking. Returns whether the
  // run stopped on a stationarity test rather than the iteration cap.
  bool run(Vec theta, Vec z, Best& best) {
    mesh_ = 0.05;
    theta = domain_.project(theta);
    z = adv_.project(z);
    double f = eval(theta, z, best, false);
    double step = 1.0;
    const double scale = 1.0 + std::max(domain_.bounds().second.cwiseAbs().maxCoeff(),
                                        domain_.bounds().first.cwiseAbs().maxCoeff());
    Vec gt, gz;
    for (int it = 0; it < cfg_.max_iters; ++it) {
      ev_.gradient(theta, z, gt, gz);
      const double gnorm = std::sqrt(gt.squaredNorm() + gz.squaredNorm());
      if (!std::isfinite(gnorm)) return true;
      // Projected-gradient stationarity.
      const Vec pt = domain_.project(theta + gt) - theta;
      const Vec pz = adv_.project(z + gz) - z;
      if (std::sqrt(pt.squaredNorm() + pz.squaredNorm()) <= cfg_.grad_tol * scale) return true;
      step = std::min(step * 4.0, 1e6 * scale / std::max(gnorm, 1e-300));
      bool moved = false;
      while (step * gnorm > 1e-14 * scale) {
        const Vec nt = domain_.project(theta + step * gt);
        const Vec nz = adv_.project(z + step * gz);
        const double nf = eval(nt, nz, best, false);
        const double predicted = gt.dot(nt - theta) + gz.dot(nz - z);
        if (nf >= f + 1e-4 * predicted && nf > f) {
          const double dx = std::sqrt((nt - theta).squaredNorm() + (nz - z).squaredNorm());
          theta = nt;
          z = nz;
          const double gain = nf - f;
          f = nf;
          moved = true;
          if (dx <= 1e-13 * scale || gain <= 1e-15 * (1.0 + std::abs(f))) return true;
          break;
        }
        step *= 0.5;
      }
      // No ascent direction survives backtracking: a kink or a local max.
      // A compass poll steps across kinks where the frozen gradient lies.
      if (!moved && !poll(theta, z, f, best)) return true;
    }
    return false;
  }

  // One successful compass move along +-coordinate axes of (theta, z), with
  // the mesh shrinking on failure. Returns false once the mesh is exhausted.
  bool poll(Vec& theta, Vec& z, double& f, Best& best) {
    const auto extent = [](const Region& r) {
      const auto [lo, hi] = r.bounds();
      return 0.5 * (hi - lo).maxCoeff();
    };
    const double rt = extent(domain_), rz = extent(adv_);
    const int d = static_cast<int>(theta.size());
    while (mesh_ > 1e-10) {
      for (int k = 0; k < 4 * d; ++k) {
        Vec nt = theta, nz = z;
        const double sign = (k % 2 == 0) ? 1.0 : -1.0;
        const int axis = (k / 2) % d;
        if (k < 2 * d) nt(axis) += sign * mesh_ * rt;
        else nz(axis) += sign * mesh_ * rz;
        nt = domain_.project(nt);
        nz = adv_.project(nz);
        const double nf = eval(nt, nz, best, false);
        if (nf > f + 1e-15 * (1.0 + std::abs(f))) {
          theta = nt;
          z = nz;
          f = nf;
          return true;
        }
      }
      mesh_ *= 0.5;
    }
    return false;
  }

  double eval(const Vec& theta, const Vec& z, Best& best, bool) {
    const double v = ev_.value(theta, z);
    ++evals_;
    if (v > best.value) {
      best.value = v;
      best.theta = theta;
      best.z = z;
    }
    return v;
  }

 private:
  const LagrangianEvaluator& ev_;
  const Region& domain_;
  const Region& adv_;
  const SearchConfig& cfg_;
  long& evals_;
  double mesh_ = 0.05;
};

}  // namespace

VerifyResult verify_certificate(const QuadraticMultiplier& lambda, const LearningRule& rule,
                                const ContaminatedStream& stream, const AdversarialObjective& obj,
                                const Region& domain, const Region& adv_set, const SearchConfig& search) {
  const int d = lambda.dim();
  require(domain.dim() == d && adv_set.dim() == d, "verify_certificate: region dimension mismatch");
  require(search.restarts >= 0 && search.max_iters >= 1, "verify_certificate: bad search budget");
  const LagrangianEvaluator ev(lambda, rule, stream, obj);
  long evals = 0;
  Best best;
  Ascent ascent(ev, domain, adv_set, search, evals);
  bool any_nonconverged = false;
  double best_run_value = -std::numeric_limits<double>::infinity();

  auto refine = [&](const Vec& theta, const Vec& z) {
    Best local;
    const bool ok = ascent.run(theta, z, local);
    if (local.value > best.value) {
      best.value = local.value;
      best.theta = local.theta;
      best.z = local.z;
    }
    if (local.value > best_run_value) {
      best_run_value = local.value;
      any_nonconverged = !ok;
    }
  };

  const Vec theta_center = domain.kind == Region::Kind::ball ? domain.center : Vec(0.5 * (domain.lo + domain.hi));
  const Vec z_center = adv_set.kind == Region::Kind::ball ? adv_set.center : Vec(0.5 * (adv_set.lo + adv_set.hi));

  // Candidate z set shared by every grid pass.
  std::vector<Vec> zs;
  if (d <= search.max_grid_dim && ev.epsilon() > 0.0) {
    const int z_axis = d == 1 ? 2 * search.grid_per_axis + 1 : (d == 2 ? search.grid_per_axis : 7);
    zs = region_grid(adv_set, z_axis);
    for (auto& p : sphere_points(adv_set, d == 2 ? 4 * search.grid_per_axis : 256)) zs.push_back(std::move(p));
  }
  if (zs.empty()) zs.push_back(z_center);

  // Scores every theta against every z in zs, then refines the best few.
  auto grid_pass = [&](const std::vector<Vec>& thetas) {
    std::vector<std::pair<double, std::pair<int, int>>> scored;
    scored.reserve(thetas.size());
    for (std::size_t i = 0; i < thetas.size(); ++i) {
      const double b = ev.base(thetas[i]);
      double top = 0.0;
      int arg = 0;
      if (ev.epsilon() > 0.0) {
        top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < zs.size(); ++j) {
          const double a = ev.adversarial_term(thetas[i], zs[j]);
          if (a > top) {
            top = a;
            arg = static_cast<int>(j);
          }
        }
      }
      evals += static_cast<long>(zs.size());
      const double v = b + ev.epsilon() * top;
      scored.push_back({v, {static_cast<int>(i), arg}});
      if (v > best.value) {
        // Recompute through value() so the recorded maximum is an exact evaluation.
        const double exact = ev.value(thetas[i], zs[arg]);
        if (exact > best.value) {
          best.value = exact;
          best.theta = thetas[i];
          best.z = zs[arg];
        }
      }
    }
    const std::size_t top_k = std::min<std::size_t>(scored.size(), static_cast<std::size_t>(search.refine_top));
    std::partial_sort(scored.begin(), scored.begin() + static_cast<long>(top_k), scored.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; k < top_k; ++k) refine(thetas[scored[k].second.first], zs[scored[k].second.second]);
  };

  if (d <= search.max_grid_dim && search.grid_per_axis >= 2) grid_pass(region_grid(domain, search.grid_per_axis));

  std::mt19937_64 rng(search.seed);
  refine(theta_center, z_center);
  // Zoom around each anchor: shrinking boxes centred on the best point so far.
  for (const Vec& a : search.theta_anchors) {
    require(a.size() == d, "verify_certificate: anchor dimension mismatch");
    refine(a, z_center);
    for (int k = 0; k < 4; ++k) refine(a, sample_region(adv_set, rng));
    Vec center = domain.project(a);
    double radius = 0.5 * (1.0 + center.norm());
    for (int level = 0; level < search.zoom_levels; ++level, radius *= 0.3) {
      const Region box = Region::box(center.array() - radius, center.array() + radius);
      std::vector<Vec> thetas;
      if (d <= search.max_grid_dim) {
        for (const Vec& t : region_grid(box, d == 1 ? 101 : (d == 2 ? 41 : 11))) thetas.push_back(domain.project(t));
      } else {
        for (int k = 0; k < 200; ++k) thetas.push_back(domain.project(sample_region(box, rng)));
      }
      const double before = best.value;
      grid_pass(thetas);
      if (best.value > before) center = best.theta;
    }
  }
  for (int k = 0; k < search.restarts; ++k) refine(sample_region(domain, rng), sample_region(adv_set, rng));

  VerifyResult out;
  out.raw_max = best.value;
  out.value = inflate_bound(best.value, search);
  out.theta = best.theta;
  out.z = best.z;
  out.nonconverged = any_nonconverged;
  out.evaluations = evals;
  return out;
}

void DiscretizedMDP::validate() const {
  const int n = num_states();
  require(n >= 1, "DiscretizedMDP: no states");
  require(static_cast<int>(transition.size()) == n && reward.size() == n, "DiscretizedMDP: size mismatch");
  require(uniform_mixing >= 0.0 && uniform_mixing <= 1.0, "DiscretizedMDP: mixing outside [0, 1]");
  require(reward.allFinite(), "DiscretizedMDP: non-finite reward");
  for (int s = 0; s < n; ++s) {
    require(!transition[s].empty(), "DiscretizedMDP: state without actions");
    for (const auto& row : transition[s]) {
      double total = 0.0;
      for (const auto& o : row) {
        require(o.next >= 0 && o.next < n && o.prob >= 0.0, "DiscretizedMDP: malformed transition");
        total += o.prob;
      }
      require(std::abs(total - 1.0) <= 1e-9, "DiscretizedMDP: transition row does not sum to one");
    }
  }
}

MdpSolveInfo solve_discretized_mdp_info(const DiscretizedMDP& mdp, double tol, int max_sweeps) {
  mdp.validate();
  require(tol > 0.0, "solve_discretized_mdp: tol must be positive");
  const int n = mdp.num_states();
  const double mix = mdp.uniform_mixing;
  Vec h = Vec::Zero(n), th(n);
  MdpSolveInfo info;
  // Aperiodicity transform P' = (P + I) / 2 leaves the optimal gain unchanged.
  for (int sweep = 1; sweep <= max_sweeps; ++sweep) {
    const double hmean = h.mean();
    for (int s = 0; s < n; ++s) {
      double top = -std::numeric_limits<double>::infinity();
      for (const auto& row : mdp.transition[s]) {
        double e = 0.0;
        for (const auto& o : row) e += o.prob * h(o.next);
        top = std::max(top, (1.0 - mix) * e + mix * hmean);
      }
      th(s) = mdp.reward(s) + 0.5 * h(s) + 0.5 * top;
    }
    const Vec diff = th - h;
    info.lower = diff.minCoeff();
    info.upper = diff.maxCoeff();
    info.sweeps = sweep;
    if (info.upper - info.lower <= tol) {
      info.gain = 0.5 * (info.lower + info.upper);
      return info;
    }
    h = th.array() - th(0);
  }
  std::ostringstream msg;
  msg << "solve_discretized_mdp: no convergence after " << max_sweeps << " sweeps; gain in [" << info.lower
      << ", " << info.upper << "]";
  throw NumericalError(msg.str());
}

double solve_discretized_mdp(const DiscretizedMDP& mdp, double tol) { return solve_discretized_mdp_info(mdp, tol).gain; }

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Gauss-Hermite nodes and weights for the standard normal (probabilists').
void hermite_rule(int order, std::vector<double>& nodes, std::vector<double>& weights) {
  // Golub-Welsch on the Jacobi matrix of probabilists' Hermite polynomials.
  Mat j = Mat::Zero(order, order);
  for (int i = 1; i < order; ++i) j(i, i - 1) = j(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Mat> eig(j);
  nodes.resize(order);
  weights.resize(order);
  for (int i = 0; i < order; ++i) {
    nodes[i] = eig.eigenvalues()(i);
    weights[i] = eig.eigenvectors()(0, i) * eig.eigenvectors()(0, i);
  }
}

class GridMapper {
 public:
  GridMapper(double lo, double h, int n, Snapping mode) : lo_(lo), h_(h), n_(n), mode_(mode) {
    hermite_rule(24, nodes_, weights_);
  }

  // Adds weight * law N(mean, var) to acc.
  void add_gaussian(double mean, double var, double weight, std::vector<double>& acc) const {
    if (mode_ == Snapping::nearest) {
      if (var <= 0.0) {
        acc[nearest(mean)] += weight;
        return;
      }
      const double sd = std::sqrt(var);
      double prev = 0.0;
      for (int k = 0; k < n_; ++k) {
        const double upper = k == n_ - 1 ? 1.0 : normal_cdf((lo_ + (k + 0.5) * h_ - mean) / sd);
        acc[k] += weight * std::max(0.0, upper - prev);
        prev = upper;
      }
      return;
    }
    // Moment mode: quadrature of the law, each node split linearly between
    // its neighbours. The split adds variance, so the quadrature variance is
    // reduced by the expected split variance when there is room.
    double v = std::max(var, 0.0);
    double target = var;
    for (int pass = 0; pass < 4 && var > 0.0; ++pass) {
      const double extra = split_variance(mean, v);
      v = std::max(target - extra, 0.0);
    }
    if (var <= 0.0) {
      split(mean, weight, acc);
      return;
    }
    const double sd = std::sqrt(v);
    for (std::size_t q = 0; q < nodes_.size(); ++q) split(mean + sd * nodes_[q], weight * weights_[q], acc);
  }

 private:
  int nearest(double x) const {
    const long k = std::lround((x - lo_) / h_);
    return static_cast<int>(std::clamp<long>(k, 0, n_ - 1));
  }
  void split(double x, double weight, std::vector<double>& acc) const {
    const double t = (x - lo_) / h_;
    if (t <= 0.0) {
      acc[0] += weight;
      return;
    }
    if (t >= n_ - 1) {
      acc[n_ - 1] += weight;
      return;
    }
    const int k = static_cast<int>(std::floor(t));
    const double f = t - k;
    acc[k] += weight * (1.0 - f);
    if (f > 0.0) acc[k + 1] += weight * f;
  }
  double split_variance(double mean, double v) const {
    const double sd = std::sqrt(v);
    double extra = 0.0;
    for (std::size_t q = 0; q < nodes_.size(); ++q) {
      const double t = (mean + sd * nodes_[q] - lo_) / h_;
      if (t <= 0.0 || t >= n_ - 1) continue;
      const double f = t - std::floor(t);
      extra += weights_[q] * f * (1.0 - f) * h_ * h_;
    }
    return extra;
  }

  double lo_, h_;
  int n_;
  Snapping mode_;
  std::vector<double> nodes_, weights_;
};

}  // namespace

DiscretizedMDP build_mean_mdp(double mu, double sigma2, double eta, double s, double epsilon, double r,
                              const MeanMdpConfig& config) {
  require(eta > 0.0 && eta < 1.0, "build_mean_mdp: eta must lie in (0, 1)");
  require(sigma2 >= 0.0 && s >= 0.0 && r > 0.0, "build_mean_mdp: bad variances or budget");
  require(epsilon >= 0.0 && epsilon <= 1.0, "build_mean_mdp: epsilon outside [0, 1]");
  require(config.states >= 3 && config.actions >= 1, "build_mean_mdp: grid too small");
  const double radius = std::sqrt(r);
  double half = config.half_width;
  if (half <= 0.0) {
    // Noise-free iterates stay within sqrt(r) of mu once there; add room for
    // the stationary spread.
    const double spread = std::sqrt(eta * (sigma2 + s) / (2.0 - eta));
    half = radius + 8.0 * spread + 1e-3;
  }
  const int n = config.states;
  const double lo = mu - half;
  const double h = 2.0 * half / (n - 1);
  const GridMapper mapper(lo, h, n, config.snapping);

  DiscretizedMDP mdp;
  mdp.uniform_mixing = config.mixing;
  mdp.reward = Vec(n);
  for (int k = 0; k < n; ++k) {
    const double x = lo + k * h;
    mdp.theta_grid.push_back(Vec::Constant(1, x));
    mdp.reward(k) = (x - mu) * (x - mu);
  }
  const int m = config.actions;
  for (int a = 0; a < m; ++a) {
    const double x = m == 1 ? mu + radius : mu - radius + 2.0 * radius * a / (m - 1.0);
    mdp.action_grid.push_back(Vec::Constant(1, x));
  }
  const double var_adv = eta * eta * s;
  const double var_ben = eta * eta * (sigma2 + s);
  std::vector<double> acc(n);
  mdp.transition.resize(n);
  for (int k = 0; k < n; ++k) {
    const double theta = mdp.theta_grid[k](0);
    const double ben_mean = (1.0 - eta) * theta + eta * mu;
    std::vector<double> ben(n, 0.0);
    mapper.add_gaussian(ben_mean, var_ben, 1.0, ben);
    for (int a = 0; a < m; ++a) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const double adv_mean = (1.0 - eta) * theta + eta * mdp.action_grid[a](0);
      mapper.add_gaussian(adv_mean, var_adv, epsilon, acc);
      std::vector<DiscretizedMDP::Outcome> row;
      double total = 0.0;
      for (int j = 0; j < n; ++j) {
        const double p = acc[j] + (1.0 - epsilon) * ben[j];
        if (p > 0.0) {
          row.push_back({j, p});
          total += p;
        }
      }
      for (auto& o : row) o.prob /= total;
      mdp.transition[k].push_back(std::move(row));
    }
  }
  return mdp;
}

}  // namespace poisoncert
