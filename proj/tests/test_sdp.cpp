#include "poisoncert/sdp.hpp"

#include <gtest/gtest.h>

#include <random>
#include <sstream>

using namespace poisoncert;
using namespace poisoncert::sdp;

namespace {

// Symmetric n x n matrix variable X embedded in a PSD block with X - offset*I.
struct MatVar {
  int first;
  int n;
  int index(int i, int j) const {
    if (i < j) std::swap(i, j);
    return first + i * (i + 1) / 2 + j;
  }
};

MatVar add_matrix_variable(ConeProgram& prog, int n) {
  return {prog.add_variables(n * (n + 1) / 2), n};
}

Mat random_spd(std::mt19937& rng, int n, double floor) {
  std::normal_distribution<double> g;
  Mat b(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) b(i, j) = g(rng);
  return b * b.transpose() / n + floor * Mat::Identity(n, n);
}

}  // namespace

TEST(ConeSolver, SingleBoundLp) {
  ConeProgram prog;
  const int x = prog.add_variable();
  prog.add_objective(x, 1.0);
  prog.add_ineq(LinearExpr::variable(x) - LinearExpr(1.0));
  const Solution sol = solve(prog);
  ASSERT_EQ(sol.status, Status::optimal);
  EXPECT_NEAR(sol.x(x), 1.0, 1e-6);
  EXPECT_NEAR(sol.objective_value, 1.0, 1e-6);
}

TEST(ConeSolver, TraceAboveIdentity) {
  ConeProgram prog;
  const MatVar xv = add_matrix_variable(prog, 3);
  SymAffine block(3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j <= i; ++j) block.add(i, j, xv.index(i, j), 1.0);
    block.add(i, i, kConstant, -1.0);
    prog.add_objective(xv.index(i, i), 1.0);
  }
  prog.add_psd(block);
  const Solution sol = solve(prog);
  ASSERT_EQ(sol.status, Status::optimal);
  EXPECT_NEAR(sol.objective_value, 3.0, 1e-6);
  EXPECT_NEAR(sol.dual_objective, 3.0, 1e-5);
}

TEST(ConeSolver, TwoByTwoSchurBlock) {
  ConeProgram prog;
  const int t = prog.add_variable();
  SymAffine block(2);
  block.add(0, 0, kConstant, 1.0);
  block.add(1, 0, kConstant, 2.0);
  block.add(1, 1, t, 1.0);
  prog.add_psd(block);
  prog.add_objective(t, 1.0);
  const Solution sol = solve(prog);
  ASSERT_EQ(sol.status, Status::optimal);
  EXPECT_NEAR(sol.x(t), 4.0, 1e-6);
}

TEST(Epigraph, FixedDataClosedForms) {
  struct Case {
    Mat d;
    Vec p;
    double q;
    double expected;
  };
  std::vector<Case> cases;
  cases.push_back({Mat::Identity(2, 2), Vec(Eigen::Vector2d(3, 4)), 0.0, 25.0});
  cases.push_back({2.0 * Mat::Identity(2, 2), Vec(Eigen::Vector2d(2, 0)), 5.0, 7.0});
  std::mt19937 rng(5);
  std::normal_distribution<double> g;
  for (int i = 0; i < 5; ++i) {
    Mat d = random_spd(rng, 4, 0.05);
    Vec p(4);
    for (int j = 0; j < 4; ++j) p(j) = g(rng);
    const double q = g(rng);
    cases.push_back({d, p, q, p.dot(d.ldlt().solve(p)) + q});
  }
  for (const auto& c : cases) {
    const int k = static_cast<int>(c.p.size());
    ConeProgram prog;
    SymAffine d(k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j <= i; ++j) d.add(i, j, kConstant, c.d(i, j));
    std::vector<LinearExpr> p;
    for (int i = 0; i < k; ++i) p.emplace_back(c.p(i));
    const int t = matrix_fractional_epigraph(prog, p, d, LinearExpr(c.q));
    const Solution sol = solve(prog);
    ASSERT_EQ(sol.status, Status::optimal);
    EXPECT_NEAR(sol.x(t), c.expected, 1e-6);
  }
}

TEST(Epigraph, SingularDUsesPseudoInverse) {
  ConeProgram prog;
  SymAffine d(2);
  d.add(0, 0, kConstant, 2.0);
  const int t = matrix_fractional_epigraph(prog, {LinearExpr(2.0), LinearExpr(0.0)}, d, LinearExpr(1.0));
  const Solution sol = solve(prog);
  ASSERT_EQ(sol.status, Status::optimal);
  EXPECT_NEAR(sol.x(t), 3.0, 1e-5);
}

TEST(Epigraph, RejectsDimensionMismatch) {
  ConeProgram prog;
  SymAffine d(2);
  EXPECT_THROW(matrix_fractional_epigraph(prog, {LinearExpr(1.0)}, d, LinearExpr()), ContractViolation);
}

TEST(ConeSolver, SmallestEigenvalueWithTraceConstraint) {
  std::mt19937 rng(3);
  const int n = 4;
  Mat c = random_spd(rng, n, -0.5);
  ConeProgram prog;
  const MatVar xv = add_matrix_variable(prog, n);
  SymAffine block(n);
  LinearExpr trace(-1.0);
  for (int i = 0; i < n; ++i) {
    trace.add(xv.index(i, i), 1.0);
    for (int j = 0; j <= i; ++j) {
      block.add(i, j, xv.index(i, j), 1.0);
      prog.add_objective(xv.index(i, j), i == j ? c(i, i) : 2.0 * c(i, j));
    }
  }
  prog.add_psd(block);
  prog.add_eq(trace);
  const Solution sol = solve(prog);
  ASSERT_EQ(sol.status, Status::optimal);
  EXPECT_NEAR(sol.objective_value, min_eigenvalue(c), 1e-6);
}

// min_x (p0 + Bx)^T D^{-1} (p0 + Bx) + q has a weighted least-squares closed form.
TEST(ConeSolver, RandomMatrixFractionalProblems) {
  std::mt19937 rng(11);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + trial % 4;
    const int m = 1 + trial % 3;
    const Mat dm = random_spd(rng, k, 0.1);
    Vec p0(k);
    Mat b(k, m);
    for (int i = 0; i < k; ++i) {
      p0(i) = g(rng);
      for (int j = 0; j < m; ++j) b(i, j) = g(rng);
    }
    const double q = g(rng);

    ConeProgram prog;
    const int x0 = prog.add_variables(m);
    std::vector<LinearExpr> p(k);
    for (int i = 0; i < k; ++i) {
      p[i].constant = p0(i);
      for (int j = 0; j < m; ++j) p[i].add(x0 + j, b(i, j));
    }
    SymAffine d(k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j <= i; ++j) d.add(i, j, kConstant, dm(i, j));
    matrix_fractional_epigraph(prog, p, d, LinearExpr(q));
    const Solution sol = solve(prog);
    ASSERT_EQ(sol.status, Status::optimal) << "trial " << trial;

    const Mat dinv = dm.inverse();
    const Vec xs = -(b.transpose() * dinv * b).ldlt().solve(b.transpose() * dinv * p0);
    const Vec r = p0 + b * xs;
    const double expected = r.dot(dinv * r) + q;
    EXPECT_NEAR(sol.objective_value, expected, 1e-5 * std::max(1.0, std::abs(expected))) << "trial " << trial;
    EXPECT_LE(sol.dual_objective, sol.objective_value + 1e-6);
    EXPECT_LE(sol.gap, 1e-6);
    EXPECT_LE(prog.max_violation(sol.x), 1e-6);
  }
}

TEST(ConeSolver, ObjectiveScalingKeepsArgmin) {
  std::mt19937 rng(21);
  const Mat c = random_spd(rng, 3, -0.3);
  Vec reference;
  double base = 0.0;
  for (double scale : {1.0, 10.0, 1000.0}) {
    ConeProgram prog;
    const MatVar xv = add_matrix_variable(prog, 3);
    SymAffine block(3);
    LinearExpr trace(-1.0);
    for (int i = 0; i < 3; ++i) {
      trace.add(xv.index(i, i), 1.0);
      for (int j = 0; j <= i; ++j) {
        block.add(i, j, xv.index(i, j), 1.0);
        prog.add_objective(xv.index(i, j), scale * (i == j ? c(i, i) : 2.0 * c(i, j)));
      }
    }
    prog.add_psd(block);
    prog.add_eq(trace);
    SolveOptions opts;
    opts.tol = 1e-9 * scale;
    const Solution sol = solve(prog, opts);
    ASSERT_EQ(sol.status, Status::optimal);
    if (scale == 1.0) {
      reference = sol.x;
      base = sol.objective_value;
    } else {
      EXPECT_NEAR(sol.objective_value / scale, base, 1e-6);
      EXPECT_LE((sol.x - reference).cwiseAbs().maxCoeff(), 1e-6);
    }
  }
}

TEST(ConeSolver, DetectsPrimalInfeasibility) {
  ConeProgram prog;
  const int x = prog.add_variable();
  prog.add_objective(x, 1.0);
  prog.add_ineq(LinearExpr::variable(x) - LinearExpr(1.0));
  prog.add_ineq(-1.0 * LinearExpr::variable(x));
  EXPECT_EQ(solve(prog).status, Status::infeasible);
}

TEST(ConeSolver, DetectsUnboundedness) {
  ConeProgram prog;
  const int x = prog.add_variable();
  prog.add_objective(x, 1.0);
  prog.add_ineq(LinearExpr(1.0) - LinearExpr::variable(x));
  EXPECT_EQ(solve(prog).status, Status::unbounded);
}

TEST(ConeSolver, ReportsIterationCap) {
  ConeProgram prog;
  const MatVar xv = add_matrix_variable(prog, 3);
  SymAffine block(3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j <= i; ++j) block.add(i, j, xv.index(i, j), 1.0);
    block.add(i, i, kConstant, -1.0);
    prog.add_objective(xv.index(i, i), 1.0);
  }
  prog.add_psd(block);
  SolveOptions opts;
  opts.max_iter = 1;
  EXPECT_EQ(solve(prog, opts).status, Status::max_iter);
}

TEST(ConeSolver, RejectsBadVariableIndex) {
  ConeProgram prog;
  prog.add_variable();
  prog.add_objective(3, 1.0);
  prog.add_nonneg(0);
  EXPECT_THROW(solve(prog), ContractViolation);
}

TEST(SparseDump, RoundTripPreservesProgram) {
  ConeProgram prog;
  const int x = prog.add_variables(2);
  SymAffine d(2);
  d.add(0, 0, x, 1.0);
  d.add(1, 1, kConstant, 2.0);
  d.add(1, 0, x + 1, 0.5);
  matrix_fractional_epigraph(prog, {LinearExpr(1.0), LinearExpr::variable(x + 1)}, d, LinearExpr(0.25));
  prog.add_ineq(LinearExpr::variable(x) - LinearExpr(0.5));
  prog.add_eq(LinearExpr::variable(x + 1) - LinearExpr(0.3));

  std::stringstream buf;
  write_sparse_dump(buf, prog);
  ConeProgram back = read_sparse_dump(buf);
  ASSERT_EQ(back.num_variables(), prog.num_variables());
  ASSERT_EQ(back.psd_blocks().size(), 1u);
  Vec probe(prog.num_variables());
  probe << 0.7, -0.2, 3.0;
  EXPECT_NEAR(back.objective_at(probe), prog.objective_at(probe), 1e-15);
  EXPECT_TRUE(back.psd_blocks()[0].evaluate(probe).isApprox(prog.psd_blocks()[0].evaluate(probe)));
  EXPECT_NEAR(back.max_violation(probe), prog.max_violation(probe), 1e-14);
  EXPECT_NEAR(solve(back).objective_value, solve(prog).objective_value, 1e-7);
}

TEST(Presolve, MatchesUnreducedSolve) {
  std::mt19937 rng(17);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 20; ++trial) {
    // min <C, X> + c^T u  s.t.  X >= 0 (3 x 3), u >= 0, u_k - <E_k, X> = f_k, Tr X <= 4.
    ConeProgram prog;
    const MatVar xv = add_matrix_variable(prog, 3);
    const int u = prog.add_variables(4);
    SymAffine block(3);
    LinearExpr trace(4.0);
    const Mat c = random_spd(rng, 3, 0.0) - 0.5 * Mat::Identity(3, 3);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j <= i; ++j) {
        block.add(i, j, xv.index(i, j), 1.0);
        prog.add_objective(xv.index(i, j), i == j ? c(i, i) : 2.0 * c(i, j));
        if (i == j) trace.add(xv.index(i, i), -1.0);
      }
    prog.add_psd(block);
    prog.add_ineq(trace);
    for (int k = 0; k < 4; ++k) {
      prog.add_nonneg(u + k);
      prog.add_objective(u + k, 0.5 + std::abs(g(rng)));
      LinearExpr eq(-std::abs(g(rng)));
      eq.add(u + k, 1.0);
      for (int i = 0; i < 3; ++i) eq.add(xv.index(i, i), -0.3 * std::abs(g(rng)));
      prog.add_eq(eq);
    }
    SolveOptions plain;
    plain.presolve = false;
    const Solution a = solve(prog), b = solve(prog, plain);
    ASSERT_EQ(a.status, Status::optimal) << trial;
    ASSERT_EQ(b.status, Status::optimal) << trial;
    EXPECT_NEAR(a.objective_value, b.objective_value, 1e-6 * (1 + std::abs(b.objective_value)));
    EXPECT_LE(prog.max_violation(a.x), 1e-7);
    for (const auto& e : prog.eqs()) EXPECT_NEAR(e.evaluate(a.x), 0.0, 1e-9);
  }
}

TEST(Presolve, DetectsInfeasibleSubstitution) {
  ConeProgram prog;
  const int x = prog.add_variable();
  prog.add_objective(x, 1.0);
  prog.add_ineq(-1.0 * LinearExpr::variable(x));
  prog.add_eq(LinearExpr::variable(x) - LinearExpr(1.0));
  EXPECT_EQ(solve(prog).status, Status::infeasible);
  SolveOptions plain;
  plain.presolve = false;
  EXPECT_EQ(solve(prog, plain).status, Status::infeasible);
}
