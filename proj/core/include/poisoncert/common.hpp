#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace poisoncert {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Thrown when a caller breaks a documented precondition (dimension
/// mismatch, out-of-range hyperparameter, malformed input).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a numerical routine cannot produce an answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

/// ||M - M^T||_inf <= tol
bool is_symmetric(const Mat& m, double tol = 1e-12);

/// Smallest eigenvalue of a symmetric matrix.
double min_eigenvalue(const Mat& m);

/// Symmetric PSD test with a tolerance scaled to the matrix magnitude.
bool is_psd(const Mat& m, double rel_tol = 1e-10);

/// Returns B with B * B^T == S. Uses Cholesky when S is positive definite and
/// the symmetric square root otherwise (S singular but PSD).
Mat psd_factor(const Mat& s);

/// Euclidean projection onto the ball {x : ||x - center|| <= radius}.
Vec project_to_ball(const Vec& x, const Vec& center, double radius);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view text);

}  // namespace poisoncert
