#pragma once

// Small dense cone-program solver.
//
//   minimize    c^T x + offset
//   subject to  M0_k + sum_i x_i M_ik  is PSD       for every PSD block k
//               a0_j + a_j^T x >= 0                   for every inequality j
//               e0_l + e_l^T x  = 0                   for every equality l
//
// Solved with a primal-dual interior-point method on the homogeneous
// self-dual embedding, Nesterov-Todd scaling, and Mehrotra
// predictor-corrector steps. All factorizations are dense.

#include "poisoncert/common.hpp"

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace poisoncert::sdp {

inline constexpr int kConstant = -1;

/// Affine scalar map  constant + sum coef * x[var].
struct LinearExpr {
  double constant = 0.0;
  std::vector<std::pair<int, double>> terms;

  LinearExpr() = default;
  explicit LinearExpr(double c) : constant(c) {}

  static LinearExpr variable(int var, double coef = 1.0) {
    LinearExpr e;
    e.terms.emplace_back(var, coef);
    return e;
  }

  LinearExpr& add(int var, double coef) {
    if (coef != 0.0) terms.emplace_back(var, coef);
    return *this;
  }
  LinearExpr& operator+=(const LinearExpr& other);
  LinearExpr& operator-=(const LinearExpr& other);
  LinearExpr& operator*=(double alpha);

  double evaluate(const Vec& x) const;
};

LinearExpr operator+(LinearExpr a, const LinearExpr& b);
LinearExpr operator-(LinearExpr a, const LinearExpr& b);
LinearExpr operator*(double alpha, LinearExpr a);

/// Affine symmetric-matrix map x -> M0 + sum_i x_i M_i, stored as triplets on
/// the lower triangle. var == kConstant marks entries of M0.
class SymAffine {
 public:
  struct Entry {
    int row;
    int col;
    int var;
    double coef;
  };

  SymAffine() = default;
  explicit SymAffine(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Accumulates coef * x[var] into entry (row, col) and its mirror.
  void add(int row, int col, int var, double coef);
  void add(int row, int col, const LinearExpr& expr);
  /// Places a whole affine block with its top-left corner at (row0, col0).
  void add_block(int row0, int col0, const SymAffine& block);

  Mat evaluate(const Vec& x) const;

 private:
  int dim_ = 0;
  std::vector<Entry> entries_;
};

class ConeProgram {
 public:
  int add_variable() { return num_vars_++; }
  /// Returns the index of the first new variable.
  int add_variables(int count);
  int num_variables() const { return num_vars_; }

  void add_objective(int var, double coef);
  void add_objective(const LinearExpr& expr);
  void set_objective_offset(double offset) { offset_ = offset; }

  /// Returns the block index.
  int add_psd(SymAffine block);
  void add_ineq(LinearExpr expr);  // expr >= 0
  void add_eq(LinearExpr expr);    // expr == 0
  void add_nonneg(int var) { add_ineq(LinearExpr::variable(var)); }

  const std::vector<std::pair<int, double>>& objective() const { return objective_; }
  double objective_offset() const { return offset_; }
  const std::vector<SymAffine>& psd_blocks() const { return psd_; }
  const std::vector<LinearExpr>& ineqs() const { return ineq_; }
  const std::vector<LinearExpr>& eqs() const { return eq_; }

  /// Dense objective vector of length num_variables().
  Vec objective_vector() const;
  double objective_at(const Vec& x) const;

  /// Largest violation of any constraint at x (PSD blocks measured by the
  /// negative part of the smallest eigenvalue).
  double max_violation(const Vec& x) const;

  /// Throws ContractViolation for out-of-range variable indices or
  /// malformed blocks.
  void validate() const;

 private:
  int num_vars_ = 0;
  double offset_ = 0.0;
  std::vector<std::pair<int, double>> objective_;
  std::vector<SymAffine> psd_;
  std::vector<LinearExpr> ineq_;
  std::vector<LinearExpr> eq_;
};

enum class Status { optimal, infeasible, unbounded, max_iter };

std::string to_string(Status status);

struct SolveOptions {
  double tol = 1e-6;       // absolute or relative duality gap
  double feastol = 1e-7;   // relative primal/dual residual
  int max_iter = 200;
  bool verbose = false;
  /// Eliminate equality rows through variables that appear in no PSD block
  /// and in no other equality before solving.
  bool presolve = true;
};

struct Solution {
  Vec x;
  double objective_value = 0.0;
  double dual_objective = 0.0;
  Status status = Status::max_iter;
  double gap = 0.0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  int iterations = 0;
};

/// Throws NumericalError when the KKT system cannot be factored even with
/// regularization; the message carries condition diagnostics.
Solution solve(const ConeProgram& program, const SolveOptions& options = {});

/// Adds a scalar t and the block [[D, p], [p^T, t - q]] >= 0 to the program
/// and places t in the objective with weight one. At any fixed point of the
/// remaining variables with D positive definite the smallest feasible t is
/// p^T D^{-1} p + q. Returns the index of t.
int matrix_fractional_epigraph(ConeProgram& program, const std::vector<LinearExpr>& p,
                               const SymAffine& d, const LinearExpr& q);

/// Plain-text sparse dump, one nonzero per line:
///   block row col var_index coefficient
/// Block 0 is the objective (row = col = 0). Blocks 1..B are the PSD blocks.
/// Block B+1 holds the inequalities and B+2 the equalities as diagonal
/// entries (row = col = constraint index). var_index -1 is the constant.
void write_sparse_dump(std::ostream& out, const ConeProgram& program);
ConeProgram read_sparse_dump(std::istream& in);

}  // namespace poisoncert::sdp
