#include "cwg/autodiff.hpp"

#include <cmath>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cwg::ad {

namespace {

std::string shape_of(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

[[noreturn]] void shape_error(const char* prim, const Matrix& a, const Matrix& b) {
  throw std::invalid_argument(std::string(prim) + ": shape mismatch " + shape_of(a) +
                              " vs " + shape_of(b));
}

}  // namespace

Var Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check(Var v) const {
  require(v.valid() && v.id < static_cast<int>(nodes_.size()), "tape: invalid var handle");
}

const Matrix& Tape::value(Var v) const {
  check(v);
  return at(v).value;
}

Matrix Tape::grad(Var v) const {
  check(v);
  const Node& n = at(v);
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Matrix& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::leaf(Matrix v) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(v);
  return push(std::move(n));
}

Var Tape::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m));
}

#define BINARY_SAME_SHAPE(NAME, OPNAME)                                             \
  Var Tape::NAME(Var a, Var b) {                                                    \
    check(a); check(b);                                                              \
    const Matrix& va = at(a).value; const Matrix& vb = at(b).value;                  \
    if (va.rows() != vb.rows() || va.cols() != vb.cols()) shape_error(#NAME, va, vb);

BINARY_SAME_SHAPE(add, Add)
  Node n; n.op = Op::Add; n.a = a.id; n.b = b.id; n.value = va + vb;
  return push(std::move(n));
}

BINARY_SAME_SHAPE(sub, Sub)
  Node n; n.op = Op::Sub; n.a = a.id; n.b = b.id; n.value = va - vb;
  return push(std::move(n));
}

BINARY_SAME_SHAPE(mul, Mul)
  Node n; n.op = Op::Mul; n.a = a.id; n.b = b.id; n.value = va.cwiseProduct(vb);
  return push(std::move(n));
}

BINARY_SAME_SHAPE(divide, Div)
  Node n; n.op = Op::Div; n.a = a.id; n.b = b.id; n.value = va.cwiseQuotient(vb);
  return push(std::move(n));
}

#undef BINARY_SAME_SHAPE

Var Tape::neg(Var a) {
  check(a);
  Node n; n.op = Op::Neg; n.a = a.id; n.value = -at(a).value;
  return push(std::move(n));
}

Var Tape::scale(Var a, double c) {
  check(a);
  Node n; n.op = Op::Scale; n.a = a.id; n.c0 = c; n.value = c * at(a).value;
  return push(std::move(n));
}

Var Tape::add_const(Var a, double c) {
  check(a);
  Node n; n.op = Op::AddConst; n.a = a.id; n.c0 = c;
  n.value = at(a).value.array() + c;
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  check(a); check(b);
  const Matrix& va = at(a).value;
  const Matrix& vb = at(b).value;
  if (va.cols() != vb.rows()) shape_error("matmul", va, vb);
  Node n; n.op = Op::MatMul; n.a = a.id; n.b = b.id; n.value = va * vb;
  return push(std::move(n));
}

Var Tape::add_row_vector(Var x, Var b) {
  check(x); check(b);
  const Matrix& vx = at(x).value;
  const Matrix& vb = at(b).value;
  if (vb.rows() != 1 || vb.cols() != vx.cols()) shape_error("add_row_vector", vx, vb);
  Node n; n.op = Op::AddRowVec; n.a = x.id; n.b = b.id;
  n.value = vx.rowwise() + vb.row(0);
  return push(std::move(n));
}

#define UNARY(NAME, OP, EXPR)                          \
  Var Tape::NAME(Var a) {                              \
    check(a);                                          \
    const Matrix& v = at(a).value;                     \
    Node n; n.op = Op::OP; n.a = a.id; n.value = EXPR; \
    return push(std::move(n));                         \
  }

UNARY(tanh, Tanh, v.array().tanh())
UNARY(relu, Relu, v.cwiseMax(0.0))
UNARY(exp, Exp, v.array().exp())
UNARY(log, Log, v.array().log())
UNARY(square, Square, v.array().square())

#undef UNARY

Var Tape::sum(Var a) {
  check(a);
  Node n; n.op = Op::Sum; n.a = a.id;
  n.value = Matrix::Constant(1, 1, at(a).value.sum());
  return push(std::move(n));
}

Var Tape::mean(Var a) {
  check(a);
  Node n; n.op = Op::Mean; n.a = a.id;
  n.value = Matrix::Constant(1, 1, at(a).value.mean());
  return push(std::move(n));
}

Var Tape::col_mean(Var x, int col) {
  check(x);
  const Matrix& v = at(x).value;
  require(col >= 0 && col < v.cols(), "col_mean: column out of range");
  Node n; n.op = Op::ColMean; n.a = x.id; n.i0 = col;
  n.value = Matrix::Constant(1, 1, v.col(col).mean());
  return push(std::move(n));
}

Var Tape::stop_grad(Var a) {
  check(a);
  Node n; n.op = Op::StopGrad; n.a = a.id; n.value = at(a).value;
  return push(std::move(n));
}

Var Tape::cost_matrix(Var a, Var b) {
  check(a); check(b);
  const Matrix& va = at(a).value;
  const Matrix& vb = at(b).value;
  if (va.cols() != vb.cols()) shape_error("cost_matrix", va, vb);
  const Vector an = va.rowwise().squaredNorm();
  const Vector bn = vb.rowwise().squaredNorm();
  Matrix c = (-2.0 * va * vb.transpose());
  c.colwise() += an;
  c.rowwise() += bn.transpose();
  c = c.cwiseMax(0.0);
  Node n; n.op = Op::CostMatrix; n.a = a.id; n.b = b.id; n.value = std::move(c);
  return push(std::move(n));
}

Var Tape::add_col_offsets(Var c, Var p) {
  check(c); check(p);
  const Matrix& vc = at(c).value;
  const Matrix& vp = at(p).value;
  if (vp.cols() != 1 || vp.rows() != vc.cols()) shape_error("add_col_offsets", vc, vp);
  Node n; n.op = Op::AddColOffsets; n.a = c.id; n.b = p.id;
  n.value = vc.rowwise() + vp.col(0).transpose();
  return push(std::move(n));
}

Var Tape::softmin_rows(Var c, const Vector& g, double eps) {
  check(c);
  const Matrix& vc = at(c).value;
  require(g.size() == vc.cols(), "softmin_rows: dual size mismatch");
  require(eps > 0.0, "softmin_rows: eps must be positive");
  const Eigen::Index rows = vc.rows();
  Matrix out(rows, 1);
  const double logm = std::log(static_cast<double>(vc.cols()));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Eigen::ArrayXd s = (g.transpose() - vc.row(i)).array() / eps;
    const double m = s.maxCoeff();
    out(i, 0) = -eps * (m + std::log((s - m).exp().sum()) - logm);
  }
  Node n; n.op = Op::SoftminRows; n.a = c.id; n.c0 = eps; n.aux0 = g;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::softmin_cols(Var c, const Vector& f, double eps) {
  check(c);
  const Matrix& vc = at(c).value;
  require(f.size() == vc.rows(), "softmin_cols: dual size mismatch");
  require(eps > 0.0, "softmin_cols: eps must be positive");
  const Eigen::Index cols = vc.cols();
  Matrix out(cols, 1);
  const double logn = std::log(static_cast<double>(vc.rows()));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (Eigen::Index j = 0; j < cols; ++j) {
    const Eigen::ArrayXd s = (f - vc.col(j)).array() / eps;
    const double m = s.maxCoeff();
    out(j, 0) = -eps * (m + std::log((s - m).exp().sum()) - logn);
  }
  Node n; n.op = Op::SoftminCols; n.a = c.id; n.c0 = eps; n.aux0 = f;
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::sparse_softmin_rows(Var a_pts, Var b_pts, const Vector& duals,
                              const Vector* col_offsets, double eps,
                              std::shared_ptr<const Shortlist> lists, int total_cols) {
  check(a_pts); check(b_pts);
  const Matrix& va = at(a_pts).value;
  const Matrix& vb = at(b_pts).value;
  if (va.cols() != vb.cols()) shape_error("sparse_softmin_rows", va, vb);
  require(lists && lists->rows() == va.rows(), "sparse_softmin_rows: bad shortlist");
  require(duals.size() == vb.rows(), "sparse_softmin_rows: dual size mismatch");
  require(eps > 0.0, "sparse_softmin_rows: eps must be positive");
  const Eigen::Index rows = va.rows();
  const double logm = std::log(static_cast<double>(total_cols));
  Matrix out(rows, 1);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (Eigen::Index i = 0; i < rows; ++i) {
    const int lo = lists->offsets[static_cast<std::size_t>(i)];
    const int hi = lists->offsets[static_cast<std::size_t>(i) + 1];
    double m = -std::numeric_limits<double>::infinity();
    for (int t = lo; t < hi; ++t) {
      const int j = lists->cols[static_cast<std::size_t>(t)];
      double s = duals[j] - (va.row(i) - vb.row(j)).squaredNorm();
      if (col_offsets) s -= (*col_offsets)[j];
      if (s > m) m = s;
    }
    double acc = 0.0;
    for (int t = lo; t < hi; ++t) {
      const int j = lists->cols[static_cast<std::size_t>(t)];
      double s = duals[j] - (va.row(i) - vb.row(j)).squaredNorm();
      if (col_offsets) s -= (*col_offsets)[j];
      acc += std::exp((s - m) / eps);
    }
    out(i, 0) = -eps * (m / eps + std::log(acc) - logm);
  }
  Node n; n.op = Op::SparseSoftminRows; n.a = a_pts.id; n.b = b_pts.id;
  n.c0 = eps; n.i0 = total_cols; n.aux0 = duals;
  if (col_offsets) n.aux1 = *col_offsets;
  n.lists = std::move(lists);
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::relu_feature(Var x, std::vector<int> coords, Vector w, Vector b) {
  check(x);
  const Matrix& vx = at(x).value;
  require(w.size() == b.size() && static_cast<Eigen::Index>(coords.size()) == w.size(),
          "relu_feature: weight/bias/coord sizes differ");
  for (int c : coords)
    require(c >= 0 && c < vx.cols(), "relu_feature: coordinate out of range");
  Matrix out = Matrix::Zero(vx.rows(), 1);
  for (Eigen::Index i = 0; i < vx.rows(); ++i) {
    double s = 0.0;
    for (std::size_t t = 0; t < coords.size(); ++t) {
      const double a = w[static_cast<Eigen::Index>(t)] * vx(i, coords[t]) -
                       b[static_cast<Eigen::Index>(t)];
      if (a > 0.0) s += a;
    }
    out(i, 0) = s;
  }
  Node n; n.op = Op::ReluFeature; n.a = x.id;
  n.aux0 = std::move(w); n.aux1 = std::move(b); n.aux_idx = std::move(coords);
  n.value = std::move(out);
  return push(std::move(n));
}

Var Tape::apply_potential(Var x, const PotentialFn& fn) {
  check(x);
  const Matrix& vx = at(x).value;
  Vector u;
  Matrix du;
  fn(vx, u, du);
  require(u.size() == vx.rows(), "apply_potential: bad value count");
  require(du.rows() == vx.rows() && du.cols() == vx.cols(),
          "apply_potential: bad jacobian shape");
  Node n; n.op = Op::ApplyPotential; n.a = x.id; n.aux_mat = std::move(du);
  n.value = u;
  return push(std::move(n));
}

Var Tape::clamp_min(Var a, double c) {
  return add_const(relu(add_const(a, -c)), c);
}

void Tape::backward(Var out) {
  check(out);
  const Node& onode = at(out);
  require(onode.value.rows() == 1 && onode.value.cols() == 1,
          "backward: output must be scalar");
  grad_buf(out.id)(0, 0) = 1.0;

  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) continue;  // not reachable from out
    const Matrix& g = n.grad;
    switch (n.op) {
      case Op::Leaf:
      case Op::StopGrad:
        break;
      case Op::Add:
        grad_buf(n.a) += g;
        grad_buf(n.b) += g;
        break;
      case Op::Sub:
        grad_buf(n.a) += g;
        grad_buf(n.b) -= g;
        break;
      case Op::Mul:
        grad_buf(n.a) += g.cwiseProduct(nodes_[static_cast<std::size_t>(n.b)].value);
        grad_buf(n.b) += g.cwiseProduct(nodes_[static_cast<std::size_t>(n.a)].value);
        break;
      case Op::Div: {
        const Matrix& vb = nodes_[static_cast<std::size_t>(n.b)].value;
        grad_buf(n.a) += g.cwiseQuotient(vb);
        grad_buf(n.b) -= g.cwiseProduct(n.value).cwiseQuotient(vb);
        break;
      }
      case Op::Neg:
        grad_buf(n.a) -= g;
        break;
      case Op::Scale:
        grad_buf(n.a) += n.c0 * g;
        break;
      case Op::AddConst:
        grad_buf(n.a) += g;
        break;
      case Op::MatMul:
        grad_buf(n.a) += g * nodes_[static_cast<std::size_t>(n.b)].value.transpose();
        grad_buf(n.b) += nodes_[static_cast<std::size_t>(n.a)].value.transpose() * g;
        break;
      case Op::AddRowVec:
        grad_buf(n.a) += g;
        grad_buf(n.b) += g.colwise().sum();
        break;
      case Op::Tanh:
        grad_buf(n.a).array() += g.array() * (1.0 - n.value.array().square());
        break;
      case Op::Relu: {
        const Matrix& vx = nodes_[static_cast<std::size_t>(n.a)].value;
        grad_buf(n.a).array() += g.array() * (vx.array() > 0.0).cast<double>();
        break;
      }
      case Op::Exp:
        grad_buf(n.a).array() += g.array() * n.value.array();
        break;
      case Op::Log:
        grad_buf(n.a).array() +=
            g.array() / nodes_[static_cast<std::size_t>(n.a)].value.array();
        break;
      case Op::Square:
        grad_buf(n.a).array() +=
            2.0 * g.array() * nodes_[static_cast<std::size_t>(n.a)].value.array();
        break;
      case Op::Sum:
        grad_buf(n.a).array() += g(0, 0);
        break;
      case Op::Mean:
        grad_buf(n.a).array() +=
            g(0, 0) / static_cast<double>(nodes_[static_cast<std::size_t>(n.a)].value.size());
        break;
      case Op::ColMean: {
        Matrix& ga = grad_buf(n.a);
        ga.col(n.i0).array() += g(0, 0) / static_cast<double>(ga.rows());
        break;
      }
      case Op::CostMatrix: {
        const Matrix& va = nodes_[static_cast<std::size_t>(n.a)].value;
        const Matrix& vb = nodes_[static_cast<std::size_t>(n.b)].value;
        const Vector rs = g.rowwise().sum();
        const Vector cs = g.colwise().sum();
        grad_buf(n.a) += 2.0 * (rs.asDiagonal() * va - g * vb);
        grad_buf(n.b) += 2.0 * (cs.asDiagonal() * vb - g.transpose() * va);
        break;
      }
      case Op::AddColOffsets:
        grad_buf(n.a) += g;
        grad_buf(n.b) += g.colwise().sum().transpose();
        break;
      case Op::SoftminRows: {
        // w_ij = exp((g_j - C_ij + f_i)/eps)/M, recomputed from stored values
        const Matrix& vc = nodes_[static_cast<std::size_t>(n.a)].value;
        Matrix& gc = grad_buf(n.a);
        const double eps = n.c0;
        const double invm = 1.0 / static_cast<double>(vc.cols());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (Eigen::Index i = 0; i < vc.rows(); ++i) {
          const double gi = g(i, 0);
          if (gi == 0.0) continue;
          gc.row(i).array() += gi * invm *
              ((n.aux0.transpose().array() - vc.row(i).array() + n.value(i, 0)) / eps).exp();
        }
        break;
      }
      case Op::SoftminCols: {
        const Matrix& vc = nodes_[static_cast<std::size_t>(n.a)].value;
        Matrix& gc = grad_buf(n.a);
        const double eps = n.c0;
        const double invn = 1.0 / static_cast<double>(vc.rows());
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (Eigen::Index j = 0; j < vc.cols(); ++j) {
          const double gj = g(j, 0);
          if (gj == 0.0) continue;
          gc.col(j).array() += gj * invn *
              ((n.aux0.array() - vc.col(j).array() + n.value(j, 0)) / eps).exp();
        }
        break;
      }
      case Op::SparseSoftminRows: {
        const Matrix& va = nodes_[static_cast<std::size_t>(n.a)].value;
        const Matrix& vb = nodes_[static_cast<std::size_t>(n.b)].value;
        Matrix& ga = grad_buf(n.a);
        Matrix& gb = grad_buf(n.b);
        const double eps = n.c0;
        const double invm = 1.0 / static_cast<double>(n.i0);
        const bool has_off = n.aux1.size() > 0;
        for (Eigen::Index i = 0; i < va.rows(); ++i) {
          const double gi = g(i, 0);
          if (gi == 0.0) continue;
          const int lo = n.lists->offsets[static_cast<std::size_t>(i)];
          const int hi = n.lists->offsets[static_cast<std::size_t>(i) + 1];
          for (int t = lo; t < hi; ++t) {
            const int j = n.lists->cols[static_cast<std::size_t>(t)];
            const auto diff = va.row(i) - vb.row(j);
            double s = n.aux0[j] - diff.squaredNorm();
            if (has_off) s -= n.aux1[j];
            const double w = invm * std::exp((s + n.value(i, 0)) / eps);
            const double coef = 2.0 * gi * w;
            ga.row(i) += coef * diff;
            gb.row(j) -= coef * diff;
          }
        }
        break;
      }
      case Op::ReluFeature: {
        const Matrix& vx = nodes_[static_cast<std::size_t>(n.a)].value;
        Matrix& gx = grad_buf(n.a);
        for (Eigen::Index i = 0; i < vx.rows(); ++i) {
          const double gi = g(i, 0);
          if (gi == 0.0) continue;
          for (std::size_t t = 0; t < n.aux_idx.size(); ++t) {
            const double w = n.aux0[static_cast<Eigen::Index>(t)];
            const double b = n.aux1[static_cast<Eigen::Index>(t)];
            const int c = n.aux_idx[t];
            if (w * vx(i, c) - b > 0.0) gx(i, c) += gi * w;
          }
        }
        break;
      }
      case Op::ApplyPotential: {
        Matrix& gx = grad_buf(n.a);
        gx += g.col(0).asDiagonal() * n.aux_mat;
        break;
      }
    }
  }
}

FdReport finite_diff_check(const std::function<double(const std::vector<Matrix>&)>& f,
                           const std::vector<Matrix>& params,
                           const std::vector<Matrix>& analytic_grads,
                           const FdOptions& opts) {
  require(params.size() == analytic_grads.size(), "finite_diff_check: size mismatch");
  double gmax = 0.0;
  for (const Matrix& g : analytic_grads) {
    if (g.size() > 0) gmax = std::max(gmax, g.cwiseAbs().maxCoeff());
  }
  FdReport rep;
  std::vector<Matrix> work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index r = 0; r < params[p].rows(); ++r) {
      for (Eigen::Index c = 0; c < params[p].cols(); ++c) {
        const double saved = work[p](r, c);
        work[p](r, c) = saved + opts.step;
        const double fp = f(work);
        work[p](r, c) = saved - opts.step;
        const double fm = f(work);
        work[p](r, c) = saved;
        const double fd = (fp - fm) / (2.0 * opts.step);
        const double ad = analytic_grads[p](r, c);
        const double denom = std::max({std::abs(fd), std::abs(ad),
                                       opts.rel_floor * gmax, opts.abs_floor});
        const double rel = std::abs(fd - ad) / denom;
        if (rel > rep.max_rel_err) {
          rep.max_rel_err = rel;
          rep.worst_param = static_cast<int>(p);
          rep.worst_row = r;
          rep.worst_col = c;
        }
      }
    }
  }
  rep.pass = rep.max_rel_err < opts.tol;
  return rep;
}

}  // namespace cwg::ad
