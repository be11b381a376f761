#pragma once

#include "poisoncert/certcore.hpp"
#include "poisoncert/sdp.hpp"

namespace poisoncert {

struct MeanInstance {
  Vec mu;
  Mat Sigma;
  double eta = 0.1;
  Mat S;
  double epsilon = 0.0;
  double r = 1.0;  // adversary budget: ||z_adv - mu||^2 <= r

  int dim() const { return static_cast<int>(mu.size()); }
  void validate() const;

  LearningRule rule() const { return MeanRule{eta, S}; }
  ContaminatedStream stream() const { return ContaminatedStream::gaussian(epsilon, mu, Sigma); }
  AdversarialObjective objective() const { return SquaredDistance{mu}; }
};

struct MeanDualPoint {
  Mat A;
  Vec b;
  double nu = 0.0;
};

/// The 2d x 2d matrix of the quadratic form in (theta, z_adv).
Mat mean_dual_matrix(const MeanDualPoint& dual, const MeanInstance& inst);
/// Linear vector paired with mean_dual_matrix.
Vec mean_dual_linear(const MeanDualPoint& dual, const MeanInstance& inst);

/// Dual function value; +infinity when nu < 0, the matrix is not PSD, or the
/// linear vector leaves its range. feas_tol is the relative eigenvalue
/// tolerance; raise it to the solver's feasibility tolerance when evaluating
/// solver output that sits on the boundary.
double eval_g(const MeanDualPoint& dual, const MeanInstance& inst, double feas_tol = 1e-10);

/// eta^2 Tr(S)
double benign_loss(double eta, const Mat& S);

/// Certificate program in scaled variables A~ = eta A, b~ = eta b.
struct MeanProgram {
  sdp::ConeProgram program;
  int d = 0;
  int a_first = 0;  // lower-triangle packed, row-major
  int b_first = 0;
  int nu = 0;
  int t = 0;
  double eta = 0.0;

  int a_index(int i, int j) const;
  MeanDualPoint extract(const Vec& x) const;
};

MeanProgram build_mean_program(const MeanInstance& inst);

struct MeanSolve {
  MeanDualPoint dual;
  double value = 0.0;
  sdp::Solution solution;
};

/// Solves the dual program only (no verification pass).
MeanSolve solve_mean_dual(const MeanInstance& inst, const sdp::SolveOptions& options = {});

struct MeanCertifyOptions {
  sdp::SolveOptions solver;
  SearchConfig search;
  double domain_scale = 10.0;  // theta domain radius = scale * (||mu|| + sqrt(r))
};

Region default_mean_domain(const MeanInstance& inst, double scale = 10.0);
Region mean_adversary_set(const MeanInstance& inst);

/// Solves the program, then verifies lambda(theta) = theta^T A theta + b^T theta
/// by direct search. verified_value is the certificate of record.
CertificateResult certify_mean(const MeanInstance& inst, double tol = 1e-6, const MeanCertifyOptions& options = {});

}  // namespace poisoncert
