#include "poisoncert/sdp.hpp"

#include <Eigen/SVD>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

namespace poisoncert::sdp {

LinearExpr& LinearExpr::operator+=(const LinearExpr& other) {
  constant += other.constant;
  terms.insert(terms.end(), other.terms.begin(), other.terms.end());
  return *this;
}

LinearExpr& LinearExpr::operator-=(const LinearExpr& other) {
  constant -= other.constant;
  for (const auto& [var, coef] : other.terms) terms.emplace_back(var, -coef);
  return *this;
}

LinearExpr& LinearExpr::operator*=(double alpha) {
  constant *= alpha;
  for (auto& term : terms) term.second *= alpha;
  return *this;
}

double LinearExpr::evaluate(const Vec& x) const {
  double value = constant;
  for (const auto& [var, coef] : terms) value += coef * x(var);
  return value;
}

LinearExpr operator+(LinearExpr a, const LinearExpr& b) { return a += b; }
LinearExpr operator-(LinearExpr a, const LinearExpr& b) { return a -= b; }
LinearExpr operator*(double alpha, LinearExpr a) { return a *= alpha; }

void SymAffine::add(int row, int col, int var, double coef) {
  require(row >= 0 && col >= 0 && row < dim_ && col < dim_, "SymAffine: index out of range");
  if (coef == 0.0) return;
  if (row < col) std::swap(row, col);
  entries_.push_back({row, col, var, coef});
}

void SymAffine::add(int row, int col, const LinearExpr& expr) {
  if (expr.constant != 0.0) add(row, col, kConstant, expr.constant);
  for (const auto& [var, coef] : expr.terms) add(row, col, var, coef);
}

void SymAffine::add_block(int row0, int col0, const SymAffine& block) {
  for (const auto& e : block.entries()) {
    add(row0 + e.row, col0 + e.col, e.var, e.coef);
    // The lower-triangle storage only covers one side of an off-diagonal
    // block placement; mirror it for square blocks sitting on the diagonal.
    if (row0 != col0 && e.row != e.col) add(row0 + e.col, col0 + e.row, e.var, e.coef);
  }
}

Mat SymAffine::evaluate(const Vec& x) const {
  Mat m = Mat::Zero(dim_, dim_);
  for (const auto& e : entries_) {
    const double v = e.coef * (e.var == kConstant ? 1.0 : x(e.var));
    m(e.row, e.col) += v;
    if (e.row != e.col) m(e.col, e.row) += v;
  }
  return m;
}

int ConeProgram::add_variables(int count) {
  require(count >= 0, "add_variables: negative count");
  const int first = num_vars_;
  num_vars_ += count;
  return first;
}

void ConeProgram::add_objective(int var, double coef) {
  if (coef != 0.0) objective_.emplace_back(var, coef);
}

void ConeProgram::add_objective(const LinearExpr& expr) {
  offset_ += expr.constant;
  for (const auto& [var, coef] : expr.terms) add_objective(var, coef);
}

int ConeProgram::add_psd(SymAffine block) {
  require(block.dim() > 0, "add_psd: empty block");
  psd_.push_back(std::move(block));
  return static_cast<int>(psd_.size()) - 1;
}

void ConeProgram::add_ineq(LinearExpr expr) { ineq_.push_back(std::move(expr)); }
void ConeProgram::add_eq(LinearExpr expr) { eq_.push_back(std::move(expr)); }

Vec ConeProgram::objective_vector() const {
  Vec c = Vec::Zero(num_vars_);
  for (const auto& [var, coef] : objective_) c(var) += coef;
  return c;
}

double ConeProgram::objective_at(const Vec& x) const {
  return objective_vector().dot(x) + offset_;
}

double ConeProgram::max_violation(const Vec& x) const {
  double worst = 0.0;
  for (const auto& e : ineq_) worst = std::max(worst, -e.evaluate(x));
  for (const auto& e : eq_) worst = std::max(worst, std::abs(e.evaluate(x)));
  for (const auto& block : psd_) worst = std::max(worst, -min_eigenvalue(block.evaluate(x)));
  return worst;
}

void ConeProgram::validate() const {
  require(num_vars_ > 0, "cone program has no variables");
  auto check_var = [&](int var, bool allow_const) {
    require((allow_const && var == kConstant) || (var >= 0 && var < num_vars_),
            "cone program: variable index out of range");
  };
  for (const auto& term : objective_) check_var(term.first, false);
  for (const auto& block : psd_)
    for (const auto& e : block.entries()) check_var(e.var, true);
  for (const auto& list : {&ineq_, &eq_})
    for (const auto& expr : *list)
      for (const auto& term : expr.terms) check_var(term.first, false);
  require(!psd_.empty() || !ineq_.empty(), "cone program has no cone constraints");
}

std::string to_string(Status status) {
  switch (status) {
    case Status::optimal: return "optimal";
    case Status::infeasible: return "infeasible";
    case Status::unbounded: return "unbounded";
    case Status::max_iter: return "max_iter";
  }
  return "unknown";
}

namespace {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Element of the product cone: a nonnegative vector and a list of symmetric
// matrices.
struct ConeVec {
  Vec l;
  std::vector<Mat> s;

  double dot(const ConeVec& o) const {
    double v = l.dot(o.l);
    for (std::size_t k = 0; k < s.size(); ++k) v += s[k].cwiseProduct(o.s[k]).sum();
    return v;
  }
  double norm() const { return std::sqrt(dot(*this)); }
  void axpy(double a, const ConeVec& o) {
    l += a * o.l;
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += a * o.s[k];
  }
  ConeVec scaled(double a) const {
    ConeVec r = *this;
    r.l *= a;
    for (auto& m : r.s) m *= a;
    return r;
  }
};

ConeVec operator-(const ConeVec& a, const ConeVec& b) {
  ConeVec r = a;
  r.axpy(-1.0, b);
  return r;
}
ConeVec operator+(const ConeVec& a, const ConeVec& b) {
  ConeVec r = a;
  r.axpy(1.0, b);
  return r;
}

struct PsdData {
  int k = 0;
  Mat h;
  std::vector<int> vars;
  Mat cols;  // column j = vec(G_j) for variable vars[j], k*k rows
};

// Standard form  min c'x  s.t.  Gx + s = h, Ax = b, s in K.
struct Standard {
  int n = 0;
  Vec c;
  SpMat gl;
  Vec hl;
  std::vector<PsdData> psd;
  Mat a;  // dense, p x n
  Vec b;
  int degree = 0;

  ConeVec zero() const {
    ConeVec r;
    r.l = Vec::Zero(gl.rows());
    for (const auto& blk : psd) r.s.push_back(Mat::Zero(blk.k, blk.k));
    return r;
  }
  ConeVec identity() const {
    ConeVec r;
    r.l = Vec::Ones(gl.rows());
    for (const auto& blk : psd) r.s.push_back(Mat::Identity(blk.k, blk.k));
    return r;
  }
  ConeVec h() const {
    ConeVec r;
    r.l = hl;
    for (const auto& blk : psd) r.s.push_back(blk.h);
    return r;
  }
  ConeVec g_mul(const Vec& x) const {
    ConeVec r;
    r.l = gl * x;
    for (const auto& blk : psd) {
      Vec xs(static_cast<Eigen::Index>(blk.vars.size()));
      for (std::size_t j = 0; j < blk.vars.size(); ++j) xs(j) = x(blk.vars[j]);
      Vec flat = blk.cols * xs;
      r.s.push_back(Eigen::Map<Mat>(flat.data(), blk.k, blk.k));
    }
    return r;
  }
  Vec gt_mul(const ConeVec& z) const {
    Vec r = gl.transpose() * z.l;
    for (std::size_t k = 0; k < psd.size(); ++k) {
      const auto& blk = psd[k];
      Eigen::Map<const Vec> flat(z.s[k].data(), blk.k * blk.k);
      Vec part = blk.cols.transpose() * flat;
      for (std::size_t j = 0; j < blk.vars.size(); ++j) r(blk.vars[j]) += part(j);
    }
    return r;
  }
};

Standard to_standard(const ConeProgram& prog) {
  Standard st;
  st.n = prog.num_variables();
  st.c = prog.objective_vector();

  const int nl = static_cast<int>(prog.ineqs().size());
  std::vector<Eigen::Triplet<double>> trip;
  st.hl = Vec::Zero(nl);
  for (int i = 0; i < nl; ++i) {
    const auto& e = prog.ineqs()[i];
    st.hl(i) = e.constant;
    for (const auto& [var, coef] : e.terms) trip.emplace_back(i, var, -coef);
  }
  st.gl.resize(nl, st.n);
  st.gl.setFromTriplets(trip.begin(), trip.end());

  for (const auto& block : prog.psd_blocks()) {
    PsdData data;
    data.k = block.dim();
    data.h = Mat::Zero(data.k, data.k);
    std::map<int, int> column;
    for (const auto& e : block.entries())
      if (e.var != kConstant && !column.count(e.var)) {
        const int j = static_cast<int>(column.size());
        column[e.var] = j;
      }
    data.vars.resize(column.size());
    for (const auto& [var, j] : column) data.vars[j] = var;
    data.cols = Mat::Zero(data.k * data.k, static_cast<Eigen::Index>(column.size()));
    for (const auto& e : block.entries()) {
      if (e.var == kConstant) {
        data.h(e.row, e.col) += e.coef;
        if (e.row != e.col) data.h(e.col, e.row) += e.coef;
      } else {
        const int j = column[e.var];
        data.cols(e.row + e.col * data.k, j) -= e.coef;
        if (e.row != e.col) data.cols(e.col + e.row * data.k, j) -= e.coef;
      }
    }
    st.degree += data.k;
    st.psd.push_back(std::move(data));
  }
  st.degree += nl;

  const int p = static_cast<int>(prog.eqs().size());
  st.a = Mat::Zero(p, st.n);
  st.b = Vec::Zero(p);
  for (int i = 0; i < p; ++i) {
    const auto& e = prog.eqs()[i];
    st.b(i) = -e.constant;
    for (const auto& [var, coef] : e.terms) st.a(i, var) += coef;
  }
  return st;
}

// Nesterov-Todd scaling W with W^{-T} s = W z = lambda.
struct Scaling {
  Vec d;  // orthant part: W = diag(d)
  std::vector<Mat> r, rinv;
  Vec lam_l;
  std::vector<Vec> lam_s;

  ConeVec w(const ConeVec& u) const {  // W u
    ConeVec o;
    o.l = d.cwiseProduct(u.l);
    for (std::size_t k = 0; k < r.size(); ++k) o.s.push_back(r[k].transpose() * u.s[k] * r[k]);
    return o;
  }
  ConeVec wt(const ConeVec& u) const {  // W^T u
    ConeVec o;
    o.l = d.cwiseProduct(u.l);
    for (std::size_t k = 0; k < r.size(); ++k) o.s.push_back(r[k] * u.s[k] * r[k].transpose());
    return o;
  }
  ConeVec winv(const ConeVec& u) const {  // W^{-1} u
    ConeVec o;
    o.l = u.l.cwiseQuotient(d);
    for (std::size_t k = 0; k < r.size(); ++k)
      o.s.push_back(rinv[k].transpose() * u.s[k] * rinv[k]);
    return o;
  }
  ConeVec winvt(const ConeVec& u) const {  // W^{-T} u
    ConeVec o;
    o.l = u.l.cwiseQuotient(d);
    for (std::size_t k = 0; k < r.size(); ++k)
      o.s.push_back(rinv[k] * u.s[k] * rinv[k].transpose());
    return o;
  }
  ConeVec lambda() const {
    ConeVec o;
    o.l = lam_l;
    for (const auto& v : lam_s) o.s.push_back(v.asDiagonal());
    return o;
  }
};

// Iterate with PSD parts held as factors s = Fs Fs^T, z = Fz Fz^T.
struct Iterate {
  Vec x, y;
  Vec sl, zl;
  std::vector<Mat> fs, fz;
  double tau = 1.0, kappa = 1.0;

  ConeVec s() const {
    ConeVec o;
    o.l = sl;
    for (const auto& f : fs) o.s.push_back(f * f.transpose());
    return o;
  }
  ConeVec z() const {
    ConeVec o;
    o.l = zl;
    for (const auto& f : fz) o.s.push_back(f * f.transpose());
    return o;
  }
};

Scaling compute_scaling(const Iterate& it) {
  Scaling w;
  w.d = (it.sl.cwiseQuotient(it.zl)).cwiseSqrt();
  w.lam_l = (it.sl.cwiseProduct(it.zl)).cwiseSqrt();
  for (std::size_t k = 0; k < it.fs.size(); ++k) {
    Eigen::JacobiSVD<Mat> svd(it.fz[k].transpose() * it.fs[k], Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec lam = svd.singularValues();
    if (!(lam.minCoeff() > 0.0) || !lam.allFinite())
      throw NumericalError("cone solver: scaling point left the cone interior");
    const Vec isq = lam.cwiseSqrt().cwiseInverse();
    w.r.push_back(it.fs[k] * svd.matrixV() * isq.asDiagonal());
    w.rinv.push_back(isq.asDiagonal() * svd.matrixU().transpose() * it.fz[k].transpose());
    w.lam_s.push_back(lam);
  }
  return w;
}

// Reduced KKT system
//   [ 0  A^T  G^T   ] [ux]   [bx]
//   [ A  0    0     ] [uy] = [by]
//   [ G  0  -W^T W  ] [uz]   [bz]
class Kkt {
 public:
  Kkt(const Standard& st, const Scaling& w) : st_(st), w_(w) {
    const int n = st.n;
    Mat h = Mat::Zero(n, n);
    for (int i = 0; i < st.gl.outerSize(); ++i) {
      const double inv2 = 1.0 / (w.d(i) * w.d(i));
      for (SpMat::InnerIterator a(st.gl, i); a; ++a)
        for (SpMat::InnerIterator b(st.gl, i); b; ++b)
          h(a.col(), b.col()) += a.value() * b.value() * inv2;
    }
    scaled_.resize(st.psd.size());
    for (std::size_t k = 0; k < st.psd.size(); ++k) {
      const auto& blk = st.psd[k];
      const auto nk = static_cast<Eigen::Index>(blk.vars.size());
      Mat& sc = scaled_[k];
      sc.resize(blk.k * blk.k, nk);
      for (Eigen::Index j = 0; j < nk; ++j) {
        Eigen::Map<const Mat> gj(blk.cols.col(j).data(), blk.k, blk.k);
        Mat t = w.rinv[k] * gj * w.rinv[k].transpose();
        sc.col(j) = Eigen::Map<const Vec>(t.data(), blk.k * blk.k);
      }
      Mat sub = sc.transpose() * sc;
      for (Eigen::Index a = 0; a < nk; ++a)
        for (Eigen::Index b = 0; b < nk; ++b) h(blk.vars[a], blk.vars[b]) += sub(a, b);
    }
    factor(h);
  }

  double regularization() const { return reg_; }

  // Returns (ux, uy, W uz).
  void solve(const Vec& bx, const Vec& by, const ConeVec& bz, Vec& ux, Vec& uy, ConeVec& wuz) const {
    const ConeVec wbz = w_.winvt(bz);
    Vec rhs = bx + gt_scaled(wbz);
    if (st_.a.rows() == 0) {
      ux = llt_.solve(rhs);
      uy.resize(0);
    } else {
      const Vec rhs2 = rhs + st_.a.transpose() * by;
      const Vec k1 = llt_.solve(rhs2);
      uy = schur_.solve(st_.a * k1 - by);
      ux = llt_.solve(rhs2 - st_.a.transpose() * uy);
    }
    wuz = g_scaled(ux) - wbz;
  }

 private:
  ConeVec g_scaled(const Vec& x) const {  // W^{-T} G x
    ConeVec r;
    r.l = (st_.gl * x).cwiseQuotient(w_.d);
    for (std::size_t k = 0; k < st_.psd.size(); ++k) {
      const auto& blk = st_.psd[k];
      Vec xs(static_cast<Eigen::Index>(blk.vars.size()));
      for (std::size_t j = 0; j < blk.vars.size(); ++j) xs(j) = x(blk.vars[j]);
      Vec flat = scaled_[k] * xs;
      r.s.push_back(Eigen::Map<Mat>(flat.data(), blk.k, blk.k));
    }
    return r;
  }
  Vec gt_scaled(const ConeVec& z) const {  // G^T W^{-1} z
    Vec r = st_.gl.transpose() * z.l.cwiseQuotient(w_.d);
    for (std::size_t k = 0; k < st_.psd.size(); ++k) {
      const auto& blk = st_.psd[k];
      Eigen::Map<const Vec> flat(z.s[k].data(), blk.k * blk.k);
      Vec part = scaled_[k].transpose() * flat;
      for (std::size_t j = 0; j < blk.vars.size(); ++j) r(blk.vars[j]) += part(j);
    }
    return r;
  }

  void factor(Mat h) {
    if (st_.a.rows() > 0) h += st_.a.transpose() * st_.a;
    const double scale = std::max(1.0, h.diagonal().cwiseAbs().maxCoeff());
    for (double rel : {0.0, 1e-13, 1e-11, 1e-9, 1e-7}) {
      reg_ = rel * scale;
      Mat hr = h;
      hr.diagonal().array() += reg_;
      llt_.compute(hr);
      if (llt_.info() != Eigen::Success) continue;
      const Vec piv = Mat(llt_.matrixL()).diagonal();
      if (!piv.allFinite() || piv.minCoeff() <= 0.0) continue;
      if (st_.a.rows() == 0) return;
      Mat schur = st_.a * llt_.solve(Mat(st_.a.transpose()));
      schur_.compute(schur);
      if (schur_.info() == Eigen::Success) return;
    }
    const Vec diag = h.diagonal();
    std::ostringstream msg;
    msg << "cone solver: KKT system could not be factored (n=" << st_.n
        << ", diag range [" << diag.minCoeff() << ", " << diag.maxCoeff()
        << "], diag ratio " << diag.maxCoeff() / std::max(diag.minCoeff(), 1e-300) << ")";
    throw NumericalError(msg.str());
  }

  const Standard& st_;
  const Scaling& w_;
  std::vector<Mat> scaled_;
  Eigen::LLT<Mat> llt_;
  Eigen::LLT<Mat> schur_;
  double reg_ = 0.0;
};

// lambda^{-1} o v in the scaled space (lambda diagonal on PSD blocks).
ConeVec lambda_div(const Scaling& w, const ConeVec& v) {
  ConeVec o;
  o.l = v.l.cwiseQuotient(w.lam_l);
  for (std::size_t k = 0; k < v.s.size(); ++k) {
    const Vec& lam = w.lam_s[k];
    Mat u = v.s[k];
    for (Eigen::Index i = 0; i < u.rows(); ++i)
      for (Eigen::Index j = 0; j < u.cols(); ++j) u(i, j) *= 2.0 / (lam(i) + lam(j));
    o.s.push_back(u);
  }
  return o;
}

ConeVec jordan_product(const ConeVec& a, const ConeVec& b) {
  ConeVec o;
  o.l = a.l.cwiseProduct(b.l);
  for (std::size_t k = 0; k < a.s.size(); ++k) o.s.push_back(0.5 * (a.s[k] * b.s[k] + b.s[k] * a.s[k]));
  return o;
}

// Largest t with lambda + t * delta still in the cone (infinity if unbounded).
double max_step(const Scaling& w, const ConeVec& delta) {
  double worst = 0.0;  // max of -min ratio
  for (Eigen::Index i = 0; i < delta.l.size(); ++i)
    worst = std::max(worst, -delta.l(i) / w.lam_l(i));
  for (std::size_t k = 0; k < delta.s.size(); ++k) {
    const Vec isq = w.lam_s[k].cwiseSqrt().cwiseInverse();
    Mat m = isq.asDiagonal() * delta.s[k] * isq.asDiagonal();
    m = 0.5 * (m + m.transpose());
    worst = std::max(worst, -min_eigenvalue(m));
  }
  return worst > 0.0 ? 1.0 / worst : std::numeric_limits<double>::infinity();
}

double cone_min_eig(const ConeVec& v) {
  double m = std::numeric_limits<double>::infinity();
  if (v.l.size() > 0) m = v.l.minCoeff();
  for (const auto& s : v.s) m = std::min(m, min_eigenvalue(s));
  return m;
}

Mat safe_cholesky(const Mat& m) {
  Eigen::LLT<Mat> llt(m);
  if (llt.info() == Eigen::Success) {
    Mat l = llt.matrixL();
    if (l.allFinite() && l.diagonal().minCoeff() > 0.0) return l;
  }
  Eigen::SelfAdjointEigenSolver<Mat> eig(0.5 * (m + m.transpose()));
  const double floor = 1e-300 + 1e-15 * std::max(1.0, eig.eigenvalues().cwiseAbs().maxCoeff());
  Vec root = eig.eigenvalues().cwiseMax(floor).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

// Shift v into the cone interior the way the standard HSD start does.
ConeVec shift_into_cone(const Standard& st, const ConeVec& v) {
  const double t = -cone_min_eig(v);
  if (t >= -1e-8 * std::max(v.norm(), 1.0)) {
    ConeVec r = v;
    r.axpy(1.0 + t, st.identity());
    return r;
  }
  return v;
}

}  // namespace

namespace {

Solution solve_core(const ConeProgram& program, const SolveOptions& options) {
  const Standard st = to_standard(program);
  const int n = st.n;
  const ConeVec hvec = st.h();

  const double resx0 = std::max(1.0, st.c.norm());
  const double resy0 = std::max(1.0, st.b.norm());
  const double resz0 = std::max(1.0, hvec.norm());

  Iterate it;
  {
    Scaling ident;
    ident.d = Vec::Ones(st.gl.rows());
    ident.lam_l = ident.d;
    for (const auto& blk : st.psd) {
      ident.r.push_back(Mat::Identity(blk.k, blk.k));
      ident.rinv.push_back(Mat::Identity(blk.k, blk.k));
      ident.lam_s.push_back(Vec::Ones(blk.k));
    }
    Kkt kkt(st, ident);
    Vec ux, uy;
    ConeVec uz;
    kkt.solve(Vec::Zero(n), st.b, hvec, ux, uy, uz);
    it.x = ux;
    ConeVec s = shift_into_cone(st, uz.scaled(-1.0));
    kkt.solve(-st.c, Vec::Zero(st.b.size()), st.zero(), ux, uy, uz);
    it.y = uy;
    ConeVec z = shift_into_cone(st, uz);
    it.sl = s.l;
    it.zl = z.l;
    for (std::size_t k = 0; k < st.psd.size(); ++k) {
      it.fs.push_back(safe_cholesky(s.s[k]));
      it.fz.push_back(safe_cholesky(z.s[k]));
    }
  }

  Solution sol;
  auto finish = [&](Status status, int iters, double pres, double dres, double gap) {
    sol.status = status;
    sol.iterations = iters;
    sol.x = it.x / it.tau;
    sol.objective_value = st.c.dot(sol.x) + program.objective_offset();
    const ConeVec z = it.z();
    sol.dual_objective = -(st.b.dot(it.y) + hvec.dot(z)) / it.tau + program.objective_offset();
    sol.gap = gap;
    sol.primal_residual = pres;
    sol.dual_residual = dres;
    return sol;
  };

  double pres = 0, dres = 0, gap = 0;
  // Best iterate so far, returned when progress stalls on a degenerate face.
  Iterate best = it;
  double best_metric = std::numeric_limits<double>::infinity();
  double best_pres = 0, best_dres = 0, best_gap = 0;
  int best_iter = 0;
  for (int iter = 0; iter <= options.max_iter; ++iter) {
    const ConeVec s = it.s();
    const ConeVec z = it.z();
    const double tau = it.tau, kappa = it.kappa;
    if (!std::isfinite(tau) || !std::isfinite(kappa) || !it.x.allFinite())
      throw NumericalError("cone solver: iterates diverged at iteration " + std::to_string(iter));

    const Vec aty_gtz = (st.a.rows() ? Vec(st.a.transpose() * it.y) : Vec::Zero(n)) + st.gt_mul(z);
    const Vec rx = aty_gtz + tau * st.c;
    const Vec ax = st.a * it.x;
    const Vec ry = tau * st.b - ax;
    ConeVec gx_s = st.g_mul(it.x) + s;
    ConeVec rz = gx_s;
    rz.axpy(-tau, hvec);
    const double cx = st.c.dot(it.x), by = st.b.dot(it.y), hz = hvec.dot(z);
    const double rt = kappa + cx + by + hz;

    const double sz = s.dot(z);
    const double mu = (sz + tau * kappa) / (st.degree + 1);
    const double pcost = cx / tau, dcost = -(hz + by) / tau;
    gap = sz / (tau * tau);
    pres = std::max(ry.norm() / resy0, rz.norm() / resz0) / tau;
    dres = rx.norm() / resx0 / tau;
    const double pinfres = (hz + by < 0) ? aty_gtz.norm() / resx0 / -(hz + by)
                                         : std::numeric_limits<double>::infinity();
    const double dinfres = (cx < 0) ? std::max(ax.norm() / resy0, gx_s.norm() / resz0) / -cx
                                    : std::numeric_limits<double>::infinity();
    if (options.verbose)
      std::cerr << std::setw(3) << iter << std::scientific << std::setprecision(4) << "  pcost "
                << pcost << "  dcost " << dcost << "  gap " << gap << "  pres " << pres << "  dres "
                << dres << "  k/t " << kappa / tau << "\n";

    // Absolute gap: callers compare certificates at fixed absolute granularity.
    if (pres <= options.feastol && dres <= options.feastol && gap <= options.tol &&
        pcost - dcost <= options.tol)
      return finish(Status::optimal, iter, pres, dres, gap);
    if (pinfres <= options.feastol) return finish(Status::infeasible, iter, pres, dres, gap);
    if (dinfres <= options.feastol) return finish(Status::unbounded, iter, pres, dres, gap);
    const double metric = std::max({pres / options.feastol, dres / options.feastol, gap / options.tol,
                                    (pcost - dcost) / options.tol});
    if (metric < best_metric) {
      best_metric = metric;
      best = it;
      best_iter = iter;
      best_pres = pres;
      best_dres = dres;
      best_gap = gap;
    } else if (iter - best_iter >= 8 || !(metric < 1e6 * best_metric)) {
      it = best;
      return finish(Status::max_iter, best_iter, best_pres, best_dres, best_gap);
    }
    if (iter == options.max_iter) break;

    const Scaling w = compute_scaling(it);
    const Kkt kkt(st, w);
    Vec vx, vy;
    ConeVec wvz;
    kkt.solve(-st.c, st.b, hvec, vx, vy, wvz);
    const ConeVec vz = w.winv(wvz);
    const double vden = st.c.dot(vx) + st.b.dot(vy) + hvec.dot(vz) - kappa / tau;

    const ConeVec lam = w.lambda();
    ConeVec dsa, dza;
    double dtau_a = 0, dkappa_a = 0, sigma = 0;
    Vec dx, dy;
    ConeVec ds, dz;
    double dtau = 0, dkappa = 0, step = 0;

    for (int pass = 0; pass < 2; ++pass) {
      ConeVec rc;
      double rk, eta;
      if (pass == 0) {
        rc = lam.scaled(-1.0);
        rk = -tau * kappa;
        eta = 1.0;
      } else {
        ConeVec target = st.identity().scaled(sigma * mu) - jordan_product(dsa, dza);
        rc = lam.scaled(-1.0) + lambda_div(w, target);
        rk = sigma * mu - tau * kappa - dtau_a * dkappa_a;
        eta = 1.0 - sigma;
      }
      ConeVec bz = rz.scaled(-eta) - w.wt(rc);
      Vec ux, uy;
      ConeVec wuz;
      kkt.solve(-eta * rx, eta * ry, bz, ux, uy, wuz);
      const ConeVec uz = w.winv(wuz);
      dtau = (-eta * rt - st.c.dot(ux) - st.b.dot(uy) - hvec.dot(uz) - rk / tau) / vden;
      dx = ux + dtau * vx;
      dy = uy + dtau * vy;
      dz = wuz + wvz.scaled(dtau);  // scaled: W dz
      ds = rc - dz;                 // scaled: W^{-T} ds
      dkappa = (rk - kappa * dtau) / tau;

      double tmax = std::min(max_step(w, ds), max_step(w, dz));
      if (dtau < 0) tmax = std::min(tmax, -tau / dtau);
      if (dkappa < 0) tmax = std::min(tmax, -kappa / dkappa);
      if (pass == 0) {
        const double alpha = std::min(1.0, tmax);
        sigma = std::pow(1.0 - alpha, 3);
        dsa = ds;
        dza = dz;
        dtau_a = dtau;
        dkappa_a = dkappa;
      } else {
        step = std::min(1.0, 0.99 * tmax);
      }
    }

    it.x += step * dx;
    it.y += step * dy;
    it.tau += step * dtau;
    it.kappa += step * dkappa;
    // New point in the scaled space, then mapped back through W.
    const Vec ls = w.lam_l + step * ds.l;
    const Vec lz = w.lam_l + step * dz.l;
    it.sl = w.d.cwiseProduct(ls);
    it.zl = lz.cwiseQuotient(w.d);
    for (std::size_t k = 0; k < st.psd.size(); ++k) {
      Mat ms = Mat(w.lam_s[k].asDiagonal()) + step * ds.s[k];
      Mat mz = Mat(w.lam_s[k].asDiagonal()) + step * dz.s[k];
      it.fs[k] = w.r[k] * safe_cholesky(0.5 * (ms + ms.transpose()));
      it.fz[k] = w.rinv[k].transpose() * safe_cholesky(0.5 * (mz + mz.transpose()));
    }
  }
  return finish(Status::max_iter, options.max_iter, pres, dres, gap);
}

using TermMap = std::map<int, double>;

struct Row {
  double constant = 0.0;
  TermMap terms;
};

Row to_row(const LinearExpr& e) {
  Row r;
  r.constant = e.constant;
  for (const auto& [var, coef] : e.terms) r.terms[var] += coef;
  return r;
}

LinearExpr to_expr(const Row& r, const std::vector<int>& index) {
  LinearExpr e(r.constant);
  for (const auto& [var, coef] : r.terms)
    if (coef != 0.0) e.add(index[var], coef);
  return e;
}

// Replaces var by sub (var = sub.constant + sum sub.terms) inside row.
void substitute(Row& row, int var, const Row& sub) {
  const auto it = row.terms.find(var);
  if (it == row.terms.end()) return;
  const double c = it->second;
  row.terms.erase(it);
  row.constant += c * sub.constant;
  for (const auto& [v, k] : sub.terms) row.terms[v] += c * k;
}

struct Reduction {
  ConeProgram program;
  std::vector<int> kept;                        // reduced index -> original index
  std::vector<std::pair<int, Row>> eliminated;  // in elimination order
  bool infeasible = false;
};

Reduction presolve(const ConeProgram& prog) {
  const int n = prog.num_variables();
  std::vector<char> in_psd(n, 0);
  for (const auto& block : prog.psd_blocks())
    for (const auto& e : block.entries())
      if (e.var != kConstant) in_psd[e.var] = 1;

  std::vector<Row> eqs, ineqs;
  for (const auto& e : prog.eqs()) eqs.push_back(to_row(e));
  for (const auto& e : prog.ineqs()) ineqs.push_back(to_row(e));
  Row objective;
  for (const auto& [var, coef] : prog.objective()) objective.terms[var] += coef;

  std::vector<int> eq_count(n, 0);
  for (const auto& r : eqs)
    for (const auto& [var, coef] : r.terms)
      if (coef != 0.0) ++eq_count[var];
  std::vector<std::vector<int>> ineq_of(n);
  for (std::size_t i = 0; i < ineqs.size(); ++i)
    for (const auto& [var, coef] : ineqs[i].terms) ineq_of[var].push_back(static_cast<int>(i));

  Reduction red;
  std::vector<char> gone(n, 0);
  std::vector<char> eq_dropped(eqs.size(), 0);
  for (std::size_t k = 0; k < eqs.size(); ++k) {
    const Row& row = eqs[k];
    double biggest = 0.0;
    for (const auto& [var, coef] : row.terms) biggest = std::max(biggest, std::abs(coef));
    int pick = -1;
    double best = 0.0;
    for (const auto& [var, coef] : row.terms) {
      if (in_psd[var] || eq_count[var] != 1 || std::abs(coef) < 1e-3 * biggest) continue;
      if (std::abs(coef) > best) {
        best = std::abs(coef);
        pick = var;
      }
    }
    if (pick < 0) continue;
    // pick = -(constant + sum_{other} c x) / c_pick
    Row sub;
    const double cp = row.terms.at(pick);
    sub.constant = -row.constant / cp;
    for (const auto& [var, coef] : row.terms)
      if (var != pick && coef != 0.0) sub.terms[var] = -coef / cp;
    for (int i : ineq_of[pick]) {
      substitute(ineqs[i], pick, sub);
      for (const auto& [var, coef] : sub.terms) ineq_of[var].push_back(i);
    }
    substitute(objective, pick, sub);
    eq_dropped[k] = 1;
    gone[pick] = 1;
    red.eliminated.emplace_back(pick, std::move(sub));
  }

  std::vector<int> index(n, -1);
  for (int v = 0; v < n; ++v)
    if (!gone[v]) {
      index[v] = static_cast<int>(red.kept.size());
      red.kept.push_back(v);
    }
  ConeProgram& out = red.program;
  out.add_variables(static_cast<int>(red.kept.size()));
  for (const auto& [var, coef] : objective.terms)
    if (coef != 0.0) out.add_objective(index[var], coef);
  out.set_objective_offset(prog.objective_offset() + objective.constant);
  for (const auto& block : prog.psd_blocks()) {
    SymAffine b(block.dim());
    for (const auto& e : block.entries()) b.add(e.row, e.col, e.var == kConstant ? kConstant : index[e.var], e.coef);
    out.add_psd(std::move(b));
  }
  auto empty = [](const Row& r) {
    for (const auto& [var, coef] : r.terms)
      if (coef != 0.0) return false;
    return true;
  };
  const double tiny = 1e-12;
  for (const auto& r : ineqs) {
    if (empty(r)) {
      if (r.constant < -tiny * std::max(1.0, std::abs(r.constant))) red.infeasible = true;
      continue;
    }
    out.add_ineq(to_expr(r, index));
  }
  for (std::size_t k = 0; k < eqs.size(); ++k) {
    if (eq_dropped[k]) continue;
    if (empty(eqs[k])) {
      if (std::abs(eqs[k].constant) > tiny) red.infeasible = true;
      continue;
    }
    out.add_eq(to_expr(eqs[k], index));
  }
  return red;
}

}  // namespace

Solution solve(const ConeProgram& program, const SolveOptions& options) {
  program.validate();
  require(options.tol > 0 && options.feastol > 0 && options.max_iter > 0, "solve: bad options");
  if (!options.presolve || program.eqs().empty()) return solve_core(program, options);
  const Reduction red = presolve(program);
  if (red.infeasible) {
    Solution sol;
    sol.x = Vec::Zero(program.num_variables());
    sol.status = Status::infeasible;
    sol.objective_value = std::numeric_limits<double>::infinity();
    return sol;
  }
  Solution sol = solve_core(red.program, options);
  Vec x = Vec::Zero(program.num_variables());
  for (std::size_t j = 0; j < red.kept.size(); ++j) x(red.kept[j]) = sol.x(static_cast<Eigen::Index>(j));
  for (auto it = red.eliminated.rbegin(); it != red.eliminated.rend(); ++it) {
    double v = it->second.constant;
    for (const auto& [var, coef] : it->second.terms) v += coef * x(var);
    x(it->first) = v;
  }
  sol.x = std::move(x);
  return sol;
}

int matrix_fractional_epigraph(ConeProgram& program, const std::vector<LinearExpr>& p,
                               const SymAffine& d, const LinearExpr& q) {
  const int k = d.dim();
  require(static_cast<int>(p.size()) == k, "matrix_fractional_epigraph: p and D sizes differ");
  const int t = program.add_variable();
  SymAffine block(k + 1);
  block.add_block(0, 0, d);
  for (int i = 0; i < k; ++i) block.add(k, i, p[i]);
  block.add(k, k, t, 1.0);
  block.add(k, k, -1.0 * q);
  program.add_psd(std::move(block));
  program.add_objective(t, 1.0);
  return t;
}

void write_sparse_dump(std::ostream& out, const ConeProgram& program) {
  const auto& blocks = program.psd_blocks();
  const int nb = static_cast<int>(blocks.size());
  out << "# vars " << program.num_variables() << "\n# psd";
  for (const auto& b : blocks) out << ' ' << b.dim();
  out << "\n# ineq " << program.ineqs().size() << "\n# eq " << program.eqs().size() << "\n";
  out << std::setprecision(17);
  if (program.objective_offset() != 0.0) out << "0 0 0 -1 " << program.objective_offset() << "\n";
  for (const auto& [var, coef] : program.objective()) out << "0 0 0 " << var << ' ' << coef << "\n";
  for (int b = 0; b < nb; ++b)
    for (const auto& e : blocks[b].entries())
      out << b + 1 << ' ' << e.row << ' ' << e.col << ' ' << e.var << ' ' << e.coef << "\n";
  auto write_list = [&](const std::vector<LinearExpr>& list, int block) {
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (list[i].constant != 0.0) out << block << ' ' << i << ' ' << i << " -1 " << list[i].constant << "\n";
      for (const auto& [var, coef] : list[i].terms)
        out << block << ' ' << i << ' ' << i << ' ' << var << ' ' << coef << "\n";
    }
  };
  write_list(program.ineqs(), nb + 1);
  write_list(program.eqs(), nb + 2);
}

ConeProgram read_sparse_dump(std::istream& in) {
  int nvars = -1;
  std::vector<int> dims;
  std::size_t nineq = 0, neq = 0;
  std::string line;
  struct Row {
    int block, row, col, var;
    double coef;
  };
  std::vector<Row> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key;
      ls >> hash >> key;
      if (key == "vars") ls >> nvars;
      else if (key == "psd") for (int v; ls >> v;) dims.push_back(v);
      else if (key == "ineq") ls >> nineq;
      else if (key == "eq") ls >> neq;
      continue;
    }
    Row r{};
    if (!(ls >> r.block >> r.row >> r.col >> r.var >> r.coef))
      throw ContractViolation("read_sparse_dump: malformed line: " + line);
    rows.push_back(r);
  }
  require(nvars >= 0, "read_sparse_dump: missing '# vars' header");
  ConeProgram prog;
  prog.add_variables(nvars);
  const int nb = static_cast<int>(dims.size());
  std::vector<SymAffine> blocks;
  for (int d : dims) blocks.emplace_back(d);
  std::vector<LinearExpr> ineq(nineq), eq(neq);
  for (const auto& r : rows) {
    if (r.block == 0) {
      if (r.var == kConstant) prog.set_objective_offset(prog.objective_offset() + r.coef);
      else prog.add_objective(r.var, r.coef);
    } else if (r.block <= nb) {
      blocks[r.block - 1].add(r.row, r.col, r.var, r.coef);
    } else if (r.block == nb + 1 || r.block == nb + 2) {
      auto& list = r.block == nb + 1 ? ineq : eq;
      require(r.row >= 0 && static_cast<std::size_t>(r.row) < list.size(),
              "read_sparse_dump: constraint index out of range");
      if (r.var == kConstant) list[r.row].constant += r.coef;
      else list[r.row].add(r.var, r.coef);
    } else {
      throw ContractViolation("read_sparse_dump: unknown block " + std::to_string(r.block));
    }
  }
  for (auto& b : blocks) prog.add_psd(std::move(b));
  for (auto& e : ineq) prog.add_ineq(std::move(e));
  for (auto& e : eq) prog.add_eq(std::move(e));
  return prog;
}

}  // namespace poisoncert::sdp
