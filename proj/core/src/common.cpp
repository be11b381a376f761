#include "poisoncert/common.hpp"

#include <algorithm>
#include <cmath>

namespace poisoncert {

bool is_symmetric(const Mat& m, double tol) {
  if (m.rows() != m.cols()) return false;
  if (m.size() == 0) return true;
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol;
}

double min_eigenvalue(const Mat& m) {
  if (m.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> eig(m, Eigen::EigenvaluesOnly);
  return eig.eigenvalues()(0);
}

bool is_psd(const Mat& m, double rel_tol) {
  if (!is_symmetric(m, 1e-9 * std::max(1.0, m.cwiseAbs().maxCoeff()))) return false;
  if (m.size() == 0) return true;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  return min_eigenvalue(m) >= -rel_tol * scale;
}

Mat psd_factor(const Mat& s) {
  require(s.rows() == s.cols(), "psd_factor: matrix must be square");
  Eigen::LLT<Mat> llt(s);
  if (llt.info() == Eigen::Success) return llt.matrixL();
  Eigen::SelfAdjointEigenSolver<Mat> eig(s);
  Vec root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal() * eig.eigenvectors().transpose();
}

Vec project_to_ball(const Vec& x, const Vec& center, double radius) {
  Vec offset = x - center;
  const double norm = offset.norm();
  if (norm <= radius) return x;
  return center + offset * (radius / norm);
}

}  // namespace poisoncert

namespace poisoncert {

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace poisoncert
