#include "poisoncert/mean_cert.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace poisoncert {

void MeanInstance::validate() const {
  const int d = dim();
  require(d >= 1, "MeanInstance: empty mean");
  require(Sigma.rows() == d && Sigma.cols() == d && S.rows() == d && S.cols() == d,
          "MeanInstance: matrix dimension mismatch");
  require(is_psd(Sigma), "MeanInstance: Sigma must be symmetric PSD");
  require(is_psd(S), "MeanInstance: S must be symmetric PSD");
  require(eta > 0.0 && eta < 1.0, "MeanInstance: eta must lie in (0, 1)");
  require(epsilon >= 0.0 && epsilon <= 1.0, "MeanInstance: epsilon outside [0, 1]");
  require(r > 0.0, "MeanInstance: r must be positive");
}

Mat mean_dual_matrix(const MeanDualPoint& dual, const MeanInstance& inst) {
  const int d = inst.dim();
  const double eta = inst.eta, eps = inst.epsilon;
  const Mat I = Mat::Identity(d, d);
  Mat D(2 * d, 2 * d);
  D.topLeftCorner(d, d) = (1.0 - (1.0 - eta) * (1.0 - eta)) * dual.A - I;
  D.topRightCorner(d, d) = -eps * eta * (1.0 - eta) * dual.A;
  D.bottomLeftCorner(d, d) = D.topRightCorner(d, d);
  D.bottomRightCorner(d, d) = dual.nu * I - eps * eta * eta * dual.A;
  return D;
}

Vec mean_dual_linear(const MeanDualPoint& dual, const MeanInstance& inst) {
  const int d = inst.dim();
  const double eta = inst.eta, eps = inst.epsilon;
  Vec l(2 * d);
  l.head(d) = 2.0 * (1.0 - eps) * eta * (1.0 - eta) * (dual.A * inst.mu) - 2.0 * inst.mu - eta * dual.b;
  l.tail(d) = eps * eta * dual.b + 2.0 * dual.nu * inst.mu;
  return l;
}

namespace {

double mean_constant(const MeanDualPoint& dual, const MeanInstance& inst) {
  const double eta = inst.eta, eps = inst.epsilon;
  const double mm = inst.mu.squaredNorm();
  return (1.0 - eps) * (eta * eta * (inst.Sigma * dual.A).trace() + eta * eta * inst.mu.dot(dual.A * inst.mu) +
                        eta * dual.b.dot(inst.mu)) +
         mm + eta * eta * (dual.A * inst.S).trace() + dual.nu * (inst.r - mm);
}

}  // namespace

double eval_g(const MeanDualPoint& dual, const MeanInstance& inst, double feas_tol) {
  const int d = inst.dim();
  require(dual.A.rows() == d && dual.A.cols() == d && dual.b.size() == d, "eval_g: dual dimension mismatch");
  constexpr double inf = std::numeric_limits<double>::infinity();
  if (!(dual.nu >= 0.0)) return inf;
  const Mat D = mean_dual_matrix(dual, inst);
  const Vec l = mean_dual_linear(dual, inst);
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (D + D.transpose()));
  const Vec& ev = eig.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  require(feas_tol > 0.0, "eval_g: feas_tol must be positive");
  if (ev(0) < -feas_tol * scale) return inf;
  // Pseudo-inverse quadratic form; components of l along the null space make
  // the inner supremum unbounded.
  const Vec coords = eig.eigenvectors().transpose() * l;
  const double thresh = feas_tol * scale;
  double quad = 0.0;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) > thresh) quad += coords(i) * coords(i) / ev(i);
    else if (std::abs(coords(i)) > 100.0 * feas_tol * (1.0 + l.norm())) return inf;
  }
  return 0.25 * quad + mean_constant(dual, inst);
}

double benign_loss(double eta, const Mat& S) {
  require(is_psd(S), "benign_loss: S must be symmetric PSD");
  return eta * eta * S.trace();
}

int MeanProgram::a_index(int i, int j) const {
  if (i < j) std::swap(i, j);
  return a_first + i * (i + 1) / 2 + j;
}

MeanDualPoint MeanProgram::extract(const Vec& x) const {
  MeanDualPoint dual;
  dual.A = Mat(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) dual.A(i, j) = x(a_index(i, j)) / eta;
  dual.b = x.segment(b_first, d) / eta;
  dual.nu = std::max(0.0, x(nu));
  return dual;
}

MeanProgram build_mean_program(const MeanInstance& inst) {
  inst.validate();
  using sdp::LinearExpr;
  using sdp::SymAffine;
  const int d = inst.dim();
  const double eta = inst.eta, eps = inst.epsilon;
  MeanProgram mp;
  mp.d = d;
  mp.eta = eta;
  auto& prog = mp.program;
  mp.a_first = prog.add_variables(d * (d + 1) / 2);
  mp.b_first = prog.add_variables(d);
  mp.nu = prog.add_variable();
  prog.add_nonneg(mp.nu);

  // Matrix-valued affine expression in the scaled A~ = eta A.
  auto a_entry = [&](int i, int j, double coef) {
    LinearExpr e;
    e.add(mp.a_index(i, j), coef);
    return e;
  };

  SymAffine D(2 * d);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j <= i; ++j) {
      D.add(i, j, a_entry(i, j, 2.0 - eta));
      D.add(d + i, d + j, a_entry(i, j, -eps * eta));
    }
    for (int j = 0; j < d; ++j) D.add(d + i, j, a_entry(i, j, -eps * (1.0 - eta)));
    D.add(i, i, sdp::kConstant, -1.0);
    D.add(d + i, d + i, mp.nu, 1.0);
  }

  // p = l / 2.
  std::vector<LinearExpr> p(2 * d);
  for (int i = 0; i < d; ++i) {
    LinearExpr top(-inst.mu(i));
    for (int j = 0; j < d; ++j) top.add(mp.a_index(i, j), (1.0 - eps) * (1.0 - eta) * inst.mu(j));
    top.add(mp.b_first + i, -0.5);
    p[i] = top;
    LinearExpr bottom;
    bottom.add(mp.b_first + i, 0.5 * eps);
    bottom.add(mp.nu, inst.mu(i));
    p[d + i] = bottom;
  }

  const double mm = inst.mu.squaredNorm();
  LinearExpr q(mm);
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < d; ++j) {
      // Tr(M A~) carries M_ij A~_ji; symmetric storage folds both triangles.
      const double coef = (1.0 - eps) * eta * (inst.Sigma(i, j) + inst.mu(i) * inst.mu(j)) + eta * inst.S(i, j);
      q.add(mp.a_index(i, j), coef);
    }
    q.add(mp.b_first + i, (1.0 - eps) * inst.mu(i));
  }
  q.add(mp.nu, inst.r - mm);
  mp.t = sdp::matrix_fractional_epigraph(prog, p, D, q);
  return mp;
}

MeanSolve solve_mean_dual(const MeanInstance& inst, const sdp::SolveOptions& options) {
  const MeanProgram mp = build_mean_program(inst);
  MeanSolve out;
  out.solution = sdp::solve(mp.program, options);
  if (out.solution.status == sdp::Status::infeasible || out.solution.status == sdp::Status::unbounded)
    throw NumericalError("mean certificate program reported " + sdp::to_string(out.solution.status) +
                         " (large A and nu are always feasible, so this indicates a numerical failure)");
  out.dual = mp.extract(out.solution.x);
  out.value = out.solution.objective_value;
  return out;
}

Region default_mean_domain(const MeanInstance& inst, double scale) {
  return Region::ball(inst.mu, scale * (inst.mu.norm() + std::sqrt(inst.r)));
}

Region mean_adversary_set(const MeanInstance& inst) { return Region::ball(inst.mu, std::sqrt(inst.r)); }

CertificateResult certify_mean(const MeanInstance& inst, double tol, const MeanCertifyOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  sdp::SolveOptions solver = options.solver;
  solver.tol = tol;
  const MeanSolve ms = solve_mean_dual(inst, solver);

  CertificateResult res;
  res.solver_value = ms.value;
  res.solver_status = sdp::to_string(ms.solution.status);
  res.solver_iterations = ms.solution.iterations;
  res.solver_gap = ms.solution.gap;
  res.lambda = QuadraticMultiplier(0.5 * (ms.dual.A + ms.dual.A.transpose()), ms.dual.b);
  res.scalars["nu"] = ms.dual.nu;
  res.scalars["g_at_solution"] = eval_g(ms.dual, inst);

  const VerifyResult vr = verify_certificate(res.lambda, inst.rule(), inst.stream(), inst.objective(),
                                             default_mean_domain(inst, options.domain_scale),
                                             mean_adversary_set(inst), options.search);
  res.verified_value = vr.value;
  res.nonconverged = vr.nonconverged;
  res.argmax_theta = vr.theta;
  res.argmax_z = vr.z;
  res.branch = "mean";
  res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace poisoncert
