#include "poisoncert/class_cert.hpp"
#include "poisoncert/simulate.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

namespace poisoncert {

bool ClassInstance::shared_targets() const {
  return targets.size() == 0 || (targets.rows() == points.rows() && targets.cols() == points.cols() &&
                                 targets == points);
}

void ClassInstance::validate() const {
  require(points.rows() >= 1 && points.cols() >= 1, "ClassInstance: need at least one point");
  require(points.allFinite(), "ClassInstance: non-finite point");
  require(points.rowwise().norm().maxCoeff() <= 1.0 + 1e-9, "ClassInstance: points must satisfy ||z|| <= 1");
  require(eta > 0.0 && sigma > 0.0 && sigma * eta < 1.0, "ClassInstance: need 0 < sigma * eta < 1");
  require(epsilon >= 0.0 && epsilon <= 1.0, "ClassInstance: epsilon outside [0, 1]");
  if (targets.size() != 0) {
    require(targets.cols() == points.cols(), "ClassInstance: target dimension mismatch");
    require(targets.allFinite(), "ClassInstance: non-finite target");
  }
}

IndicatorSet indicator_set(const ClassInstance& inst) {
  const int n = inst.size();
  const double dyn = (1.0 - inst.epsilon) / n;
  IndicatorSet set;
  if (inst.shared_targets()) {
    set.z = inst.points;
    set.dynamics = Vec::Constant(n, dyn);
    set.loss = Vec::Constant(n, 1.0 / n);
    return set;
  }
  const int m = static_cast<int>(inst.targets.rows());
  set.z.resize(n + m, inst.dim());
  set.z << inst.points, inst.targets;
  set.dynamics = Vec::Zero(n + m);
  set.dynamics.head(n).setConstant(dyn);
  set.loss = Vec::Zero(n + m);
  set.loss.tail(m).setConstant(1.0 / m);
  return set;
}

int ClassProgram::a_index(int i, int j) const {
  if (i < j) std::swap(i, j);
  return a_first + i * (i + 1) / 2 + j;
}

ClassDualVars ClassProgram::extract(const Vec& x) const {
  ClassDualVars v;
  v.A = Mat(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) v.A(i, j) = x(a_index(i, j)) / eta;
  v.b = x.segment(b_first, d) / eta;
  auto nonneg = [](const Vec& s) { return Vec(s.cwiseMax(0.0)); };
  v.nu1 = nonneg(x.segment(nu1, m));
  v.nu2 = nonneg(x.segment(nu2, m));
  v.nu7 = nonneg(x.segment(nu7, m));
  auto block = [&](int first) {
    Mat out(m, d);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j) out(i, j) = std::max(0.0, x(first + i * d + j));
    return out;
  };
  v.nu3 = block(nu3);
  v.nu4 = block(nu4);
  v.nu5 = block(nu5);
  v.nu6 = block(nu6);
  v.nu8 = std::max(0.0, x(nu8)) * sigma * sigma;
  v.nu9 = nu9 >= 0 ? std::max(0.0, x(nu9)) * sigma : 0.0;
  v.nu10 = nu10 >= 0 ? std::max(0.0, x(nu10)) : 0.0;
  return v;
}

namespace {

// Program in A~ = eta A, b~ = eta b, with the theta block rescaled to u = sigma theta so
// both quadratic-form arguments live in unit balls.
ClassProgram build_branch(const ClassInstance& inst, int branch, const ClassProgramOptions& options) {
  inst.validate();
  using sdp::LinearExpr;
  const IndicatorSet set = indicator_set(inst);
  const int d = inst.dim(), m = static_cast<int>(set.z.rows());
  const double eta = inst.eta, sigma = inst.sigma, eps = inst.epsilon;
  const double c = 1.0 - sigma * eta;
  const double big_m = 1.0 + 1.0 / sigma;

  ClassProgram cp;
  cp.branch = branch;
  cp.d = d;
  cp.m = m;
  cp.eta = eta;
  cp.sigma = sigma;
  auto& prog = cp.program;
  cp.a_first = prog.add_variables(d * (d + 1) / 2);
  cp.b_first = prog.add_variables(d);
  cp.nu1 = prog.add_variables(m);
  cp.nu2 = prog.add_variables(m);
  cp.nu7 = prog.add_variables(m);
  cp.nu3 = prog.add_variables(m * d);
  cp.nu4 = prog.add_variables(m * d);
  cp.nu5 = prog.add_variables(m * d);
  cp.nu6 = prog.add_variables(m * d);
  cp.nu8 = prog.add_variable();
  if (branch == 2) {
    cp.nu9 = prog.add_variable();
    cp.nu10 = prog.add_variable();
  }
  for (int v = cp.nu1; v < prog.num_variables(); ++v) prog.add_nonneg(v);

  auto at = [&](int first, int i, int j) { return first + i * d + j; };

  const int n_blk = branch == 2 ? 2 * d : d;
  sdp::SymAffine D(n_blk);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) D.add(i, j, cp.a_index(i, j), (2.0 - sigma * eta) / sigma);
    D.add(i, i, cp.nu8, 1.0);
  }
  if (branch == 2) {
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j < d; ++j) D.add(d + i, j, cp.a_index(i, j), -eps * c / sigma);
      D.add(d + i, i, cp.nu9, 1.0);
      for (int j = 0; j <= i; ++j) D.add(d + i, d + j, cp.a_index(i, j), -eps * eta);
      D.add(d + i, d + i, cp.nu10, 1.0);
    }
  }

  std::vector<LinearExpr> p(n_blk);
  for (int j = 0; j < d; ++j) {
    LinearExpr top;
    top.add(cp.b_first + j, -0.5);
    for (int i = 0; i < m; ++i) {
      top.add(cp.nu1 + i, 0.5 * set.z(i, j) / sigma);
      top.add(cp.nu2 + i, -0.5 * set.z(i, j) / sigma);
      top.add(at(cp.nu4, i, j), -0.5 / sigma);
      top.add(at(cp.nu6, i, j), 0.5 / sigma);
    }
    p[j] = top;
    if (branch == 2) p[d + j] = LinearExpr::variable(cp.b_first + j, 0.5 * eps);
  }

  LinearExpr q;
  for (int i = 0; i < m; ++i) {
    q.add(cp.nu1 + i, -1.0);
    q.add(cp.nu2 + i, 2.0 + 1.0 / sigma);
    q.add(cp.nu7 + i, 1.0);
    for (int j = 0; j < d; ++j) {
      q.add(at(cp.nu4, i, j), 1.0 / sigma);
      q.add(at(cp.nu6, i, j), 1.0 / sigma);
    }
  }
  q.add(cp.nu8, 1.0);
  if (branch == 2) {
    q.add(cp.nu9, 2.0 * sigma);
    q.add(cp.nu10, 1.0);
  }

  // Component constraints, one indicator row and d envelope rows per index.
  for (int i = 0; i < m; ++i) {
    const Vec zi = set.z.row(i).transpose();
    const double w_dyn = set.dynamics(i), w_loss = set.loss(i);
    LinearExpr row(w_loss);
    for (int a = 0; a < d; ++a)
      for (int b2 = 0; b2 < d; ++b2) row.add(cp.a_index(a, b2), w_dyn * eta * zi(a) * zi(b2));
    for (int j = 0; j < d; ++j) row.add(cp.b_first + j, w_dyn * zi(j));
    row.add(cp.nu1 + i, big_m);
    row.add(cp.nu2 + i, -big_m);
    row.add(cp.nu7 + i, -1.0);
    for (int j = 0; j < d; ++j) {
      if (!options.literal_indicator_row) {
        row.add(at(cp.nu3, i, j), 1.0 / sigma);
        row.add(at(cp.nu5, i, j), 1.0 / sigma);
      }
      row.add(at(cp.nu4, i, j), -1.0 / sigma);
      row.add(at(cp.nu6, i, j), -1.0 / sigma);
    }
    if (options.sense == ComponentSense::equality) prog.add_eq(row);
    else prog.add_ineq(-1.0 * row);

    for (int j = 0; j < d; ++j) {
      LinearExpr wrow(-w_loss * zi(j));
      for (int k = 0; k < d; ++k) wrow.add(cp.a_index(j, k), w_dyn * 2.0 * c * zi(k));
      wrow.add(at(cp.nu3, i, j), 1.0);
      wrow.add(at(cp.nu4, i, j), 1.0);
      wrow.add(at(cp.nu5, i, j), -1.0);
      wrow.add(at(cp.nu6, i, j), -1.0);
      if (options.sense == ComponentSense::inequality) prog.add_ineq(-1.0 * wrow);
      else prog.add_eq(wrow);
    }
  }
  cp.t = sdp::matrix_fractional_epigraph(prog, p, D, q);
  return cp;
}

// pseudo-inverse quadratic form; +inf for a non-PSD matrix or p outside its range
double fractional_value(const Mat& D, const Vec& p) {
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (D + D.transpose()));
  const Vec& ev = eig.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev(0) < -1e-10 * scale) return std::numeric_limits<double>::infinity();
  const Vec coords = eig.eigenvectors().transpose() * p;
  double quad = 0.0;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) > 1e-10 * scale) quad += coords(i) * coords(i) / ev(i);
    else if (std::abs(coords(i)) > 1e-8 * (1.0 + p.norm())) return std::numeric_limits<double>::infinity();
  }
  return quad;
}

}  // namespace

ClassProgram build_opt1(const ClassInstance& inst, const ClassProgramOptions& options) {
  return build_branch(inst, 1, options);
}

ClassProgram build_opt2(const ClassInstance& inst, const ClassProgramOptions& options) {
  return build_branch(inst, 2, options);
}

double class_constraint_slack(const ClassDualVars& v, const ClassInstance& inst, const ClassProgramOptions& options) {
  const IndicatorSet set = indicator_set(inst);
  const int d = inst.dim(), m = static_cast<int>(set.z.rows());
  require(v.nu1.size() == m && v.nu2.size() == m && v.nu7.size() == m, "class dual: nu1/nu2/nu7 size mismatch");
  for (const Mat* blk : {&v.nu3, &v.nu4, &v.nu5, &v.nu6})
    require(blk->rows() == m && blk->cols() == d, "class dual: McCormick multiplier shape mismatch");
  require(v.A.rows() == d && v.A.cols() == d && v.b.size() == d, "class dual: A/b dimension mismatch");
  const double eta = inst.eta, sigma = inst.sigma, c = 1.0 - sigma * eta, big_m = 1.0 + 1.0 / sigma;
  double slack = std::numeric_limits<double>::infinity();
  double neg = std::min({v.nu1.minCoeff(), v.nu2.minCoeff(), v.nu7.minCoeff(), v.nu3.minCoeff(), v.nu4.minCoeff(),
                         v.nu5.minCoeff(), v.nu6.minCoeff(), v.nu8, v.nu9, v.nu10});
  slack = std::min(slack, neg);
  for (int i = 0; i < m; ++i) {
    const Vec zi = set.z.row(i).transpose();
    const double s1 = set.dynamics(i) * (eta * eta * zi.dot(v.A * zi) + eta * v.b.dot(zi)) + set.loss(i);
    const Vec sw = set.dynamics(i) * 2.0 * eta * c * (v.A * zi) - set.loss(i) * zi;
    double r1 = big_m * (v.nu1(i) - v.nu2(i)) - (v.nu4.row(i).sum() + v.nu6.row(i).sum()) / sigma - v.nu7(i);
    if (!options.literal_indicator_row) r1 += (v.nu3.row(i).sum() + v.nu5.row(i).sum()) / sigma;
    const double row = r1 + s1;
    slack = std::min(slack, options.sense == ComponentSense::equality ? -std::abs(row) : -row);
    for (int j = 0; j < d; ++j) {
      const double w = v.nu3(i, j) + v.nu4(i, j) - v.nu5(i, j) - v.nu6(i, j) + sw(j);
      slack = std::min(slack, options.sense == ComponentSense::inequality ? -w : -std::abs(w));
    }
  }
  return slack;
}

double evaluate_class_dual(const ClassDualVars& v, const ClassInstance& inst, int branch,
                           const ClassProgramOptions& options, double tol) {
  require(branch == 1 || branch == 2, "evaluate_class_dual: branch must be 1 or 2");
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (class_constraint_slack(v, inst, options) < -tol) return inf;
  const IndicatorSet set = indicator_set(inst);
  const int d = inst.dim(), m = static_cast<int>(set.z.rows());
  const double eta = inst.eta, sigma = inst.sigma, eps = inst.epsilon, c = 1.0 - sigma * eta;
  const Mat I = Mat::Identity(d, d);
  Vec p_top = -sigma * eta * v.b;
  for (int i = 0; i < m; ++i)
    p_top += (v.nu1(i) - v.nu2(i)) * set.z.row(i).transpose() - v.nu4.row(i).transpose() + v.nu6.row(i).transpose();
  p_top *= 0.5;
  double q = -v.nu1.sum() + (2.0 + 1.0 / sigma) * v.nu2.sum() + (v.nu4.sum() + v.nu6.sum()) / sigma + v.nu7.sum() +
             v.nu8 / (sigma * sigma);
  const Mat d11 = (1.0 - c * c) * v.A + v.nu8 * I;
  if (branch == 1) return fractional_value(d11, p_top) + q;
  Mat D(2 * d, 2 * d);
  D.topLeftCorner(d, d) = d11;
  D.topRightCorner(d, d) = -eps * c * eta * v.A + v.nu9 * I;
  D.bottomLeftCorner(d, d) = D.topRightCorner(d, d).transpose();
  D.bottomRightCorner(d, d) = -eps * eta * eta * v.A + v.nu10 * I;
  Vec p(2 * d);
  p << p_top, 0.5 * eps * eta * v.b;
  q += 2.0 * v.nu9 + v.nu10;
  return fractional_value(D, p) + q;
}

ClassInstance program_instance(const ClassInstance& inst, const ClassCertifyOptions& options) {
  require(options.max_points >= 1, "certify_class: max_points must be positive");
  const int d = inst.dim();
  const int per_index = 3 + 4 * d;
  const int fixed = d * (d + 1) / 2 + d + 5;
  const int budget_points = std::max(1, (options.max_variables - fixed) / per_index);
  const bool shared = inst.shared_targets();
  const int n = inst.size();
  const int m = shared ? 0 : static_cast<int>(inst.targets.rows());
  const int cap_total = std::min(budget_points, shared ? options.max_points : 2 * options.max_points);
  if (n + m <= cap_total && n <= options.max_points && m <= options.max_points) return inst;

  std::mt19937_64 rng(options.subsample_seed);
  auto pick = [&](const Mat& src, int keep) {
    std::vector<int> idx(src.rows());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(1, keep))));
    std::sort(idx.begin(), idx.end());
    Mat out(idx.size(), src.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = src.row(idx[k]);
    return out;
  };
  ClassInstance sub = inst;
  if (shared) {
    sub.points = pick(inst.points, std::min(options.max_points, cap_total));
    sub.targets = Mat();
  } else {
    const int half = std::max(1, cap_total / 2);
    sub.points = pick(inst.points, std::min(options.max_points, half));
    sub.targets = pick(inst.targets, std::min(options.max_points, cap_total - static_cast<int>(sub.points.rows())));
  }
  return sub;
}

CertificateResult certify_class(const ClassInstance& inst, double tol, const ClassCertifyOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  inst.validate();
  const ClassInstance sub = program_instance(inst, options);
  sdp::SolveOptions solver = options.solver;
  solver.tol = tol;

  struct Branch {
    bool ok = false;
    double value = -std::numeric_limits<double>::infinity();
    sdp::Solution sol;
    ClassDualVars dual;
  };
  auto run = [&](int which) {
    Branch br;
    const ClassProgram cp = which == 1 ? build_opt1(sub, options.program) : build_opt2(sub, options.program);
    br.sol = sdp::solve(cp.program, solver);
    br.ok = (br.sol.status == sdp::Status::optimal || br.sol.status == sdp::Status::max_iter) && br.sol.x.allFinite();
    if (br.ok) {
      br.value = br.sol.objective_value;
      br.dual = cp.extract(br.sol.x);
    }
    return br;
  };
  const Branch b1 = run(1), b2 = run(2);
  if (!b1.ok && !b2.ok)
    throw NumericalError("certify_class: both branches failed (opt1 " + sdp::to_string(b1.sol.status) + ", opt2 " +
                         sdp::to_string(b2.sol.status) + "); a large nu8 with A = alpha I is always feasible");
  const Branch& win = (b2.ok && (!b1.ok || b2.value >= b1.value)) ? b2 : b1;

  CertificateResult res;
  res.solver_value = win.value;
  res.solver_status = sdp::to_string(win.sol.status);
  res.solver_iterations = win.sol.iterations;
  res.solver_gap = win.sol.gap;
  res.branch = &win == &b2 ? "opt2" : "opt1";
  res.lambda = QuadraticMultiplier(0.5 * (win.dual.A + win.dual.A.transpose()), win.dual.b);
  res.scalars["opt1"] = b1.value;
  res.scalars["opt2"] = b2.value;
  res.scalars["points_used"] = sub.size();
  res.scalars["nu8"] = win.dual.nu8;

  // Anchor the search where the attacked chain spends its time: near the benign
  // fixed point and near the minimizer of lambda.
  SearchConfig search = options.search;
  search.theta_anchors.push_back(inst.domain().project(hinge_warm_start(inst.points, inst.sigma)));
  const Eigen::SelfAdjointEigenSolver<Mat> eig(res.lambda.A);
  if (eig.eigenvalues().minCoeff() > 1e-12 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff()))
    search.theta_anchors.push_back(inst.domain().project(-0.5 * res.lambda.A.ldlt().solve(res.lambda.b)));
  const VerifyResult vr = verify_certificate(res.lambda, inst.rule(), inst.stream(), inst.objective(), inst.domain(),
                                             inst.adversary_set(), search);
  res.verified_value = vr.value;
  res.nonconverged = vr.nonconverged;
  res.argmax_theta = vr.theta;
  res.argmax_z = vr.z;
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

namespace {

std::vector<Vec> disc_grid(int d, double radius, int res) {
  std::vector<Vec> out;
  if (d == 1) {
    for (int i = 0; i < res; ++i) out.push_back(Vec::Constant(1, -radius + 2.0 * radius * i / (res - 1)));
    return out;
  }
  for (int i = 0; i < res; ++i)
    for (int j = 0; j < res; ++j) {
      Vec x(2);
      x << -radius + 2.0 * radius * i / (res - 1), -radius + 2.0 * radius * j / (res - 1);
      if (x.norm() <= radius) out.push_back(x);
    }
  for (int k = 0; k < 4 * res; ++k) {
    const double a = 2.0 * M_PI * k / (4 * res);
    out.push_back(radius * Vec(Eigen::Vector2d(std::cos(a), std::sin(a))));
  }
  return out;
}

}  // namespace

BruteForceResult brute_force_inner_sup(const ClassInstance& inst, const Mat& A, const Vec& b, int resolution) {
  inst.validate();
  const int d = inst.dim();
  require(d <= 2, "brute_force_inner_sup: d must be at most 2");
  require(resolution >= 2, "brute_force_inner_sup: resolution must be at least 2");
  const IndicatorSet set = indicator_set(inst);
  const int m = static_cast<int>(set.z.rows());
  require(m <= 8, "brute_force_inner_sup: at most 8 indicators");
  require(A.rows() == d && A.cols() == d && b.size() == d, "brute_force_inner_sup: dimension mismatch");
  const double eta = inst.eta, sigma = inst.sigma, eps = inst.epsilon, c = 1.0 - sigma * eta;
  const double big_m = 1.0 + 1.0 / sigma;

  const std::vector<Vec> thetas = disc_grid(d, 1.0 / sigma, resolution);
  const std::vector<Vec> zs = disc_grid(d, 1.0, resolution);
  std::vector<double> zaz(zs.size()), bz(zs.size());
  std::vector<Vec> az(zs.size());
  for (std::size_t k = 0; k < zs.size(); ++k) {
    az[k] = A * zs[k];
    zaz[k] = zs[k].dot(az[k]);
    bz[k] = b.dot(zs[k]);
  }
  // Per-indicator gain when q_i = 1: dynamics increment plus hinge term.
  std::vector<double> gain(m);
  BruteForceResult best;
  best.value = -std::numeric_limits<double>::infinity();
  best.coarse = resolution < 20;
  const long patterns = 1L << m;
  for (const Vec& th : thetas) {
    const Vec ath = A * th;
    double f0 = (c * c - 1.0) * th.dot(ath) - sigma * eta * b.dot(th);
    double adv = 0.0;
    int adv_arg = -1;
    if (eps > 0.0) {
      adv = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < zs.size(); ++k) {
        const double v = th.dot(zs[k]) <= 1.0 ? eta * eta * zaz[k] + 2.0 * c * eta * ath.dot(zs[k]) + eta * bz[k]
                                             : 0.0;
        if (v > adv) {
          adv = v;
          adv_arg = static_cast<int>(k);
        }
      }
    }
    std::vector<double> slack(m);
    for (int i = 0; i < m; ++i) {
      const Vec zi = set.z.row(i).transpose();
      slack[i] = 1.0 - th.dot(zi);
      gain[i] = set.dynamics(i) * (eta * eta * zi.dot(A * zi) + 2.0 * eta * c * ath.dot(zi) + eta * b.dot(zi)) +
                set.loss(i) * slack[i];
    }
    for (long mask = 0; mask < patterns; ++mask) {
      double f = f0 + eps * adv;
      bool feasible = true;
      for (int i = 0; i < m && feasible; ++i) {
        const int qi = static_cast<int>((mask >> i) & 1L);
        feasible = slack[i] <= big_m * qi + 1e-12 && slack[i] >= -big_m * (1 - qi) - 1e-12;
        if (qi) f += gain[i];
      }
      if (feasible && f > best.value) {
        best.value = f;
        best.theta = th;
        best.z = adv_arg >= 0 ? zs[adv_arg] : Vec::Zero(d);
        best.q.assign(m, 0);
        for (int i = 0; i < m; ++i) best.q[i] = static_cast<int>((mask >> i) & 1L);
      }
    }
  }
  return best;
}

double mccormick_slack(const Vec& theta, double q, const Vec& w, double sigma) {
  const double u = 1.0 / sigma;
  double s = std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < theta.size(); ++j) {
    s = std::min(s, w(j) + q * u);
    s = std::min(s, w(j) - theta(j) - q * u + u);
    s = std::min(s, q * u - w(j));
    s = std::min(s, theta(j) - q * u - w(j) + u);
  }
  return s;
}

}  // namespace poisoncert
