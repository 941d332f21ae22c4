#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "cwg/common.hpp"

namespace cwg::ad {

// Handle into a Tape. Default-constructed handles are invalid.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Row-major candidate lists (CSR) for truncated softmins: for each row of the
// left batch, the column indices that carry non-negligible mass.
struct Shortlist {
  std::vector<int> offsets;  // size rows+1
  std::vector<int> cols;
  int rows() const { return static_cast<int>(offsets.size()) - 1; }
  std::size_t nnz() const { return cols.size(); }
};

// Callback evaluating a potential U on a batch: fills per-sample values and
// the per-sample gradient dU/dx, both computed with whatever internal state
// (neighbor sets, plane fits) frozen at the evaluation point.
using PotentialFn = std::function<void(const Matrix& X, Vector& U, Matrix& dU)>;

// Reverse-mode tape over dense float64 arrays (rank <= 2).
// One tape per optimization step; nodes are recorded in topological order
// and backward replays them in reverse. Single-threaded by contract; the
// heavy primitives parallelize over rows internally, which keeps results
// identical for any thread count.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Matrix v);
  Var scalar(double v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);        // elementwise
  Var divide(Var a, Var b);     // elementwise
  Var neg(Var a);
  Var scale(Var a, double c);
  Var add_const(Var a, double c);
  Var matmul(Var a, Var b);
  Var add_row_vector(Var x, Var b);  // x: N x W, b: 1 x W broadcast over rows
  Var tanh(Var a);
  Var relu(Var a);
  Var exp(Var a);
  Var log(Var a);
  Var square(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var col_mean(Var x, int col);
  Var stop_grad(Var a);

  // C_ij = |a_i - b_j|^2, clamped at 0 against roundoff.
  Var cost_matrix(Var a, Var b);
  // out_ij = C_ij + p_j (p: M x 1)
  Var add_col_offsets(Var c, Var p);

  // f_i = -eps log( (1/M) sum_j exp((g_j - C_ij)/eps) ); g is a detached dual.
  Var softmin_rows(Var c, const Vector& g, double eps);
  Var softmin_cols(Var c, const Vector& f, double eps);

  // Fused truncated softmin: cost entries are computed on the fly from the
  // two point batches over the shortlist, never materializing C. `duals` and
  // `col_offsets` are detached; `total_cols` is the full column count M used
  // for the 1/M weighting (the shortlist omits only negligible terms).
  Var sparse_softmin_rows(Var a_pts, Var b_pts, const Vector& duals,
                          const Vector* col_offsets, double eps,
                          std::shared_ptr<const Shortlist> lists, int total_cols);

  // out_i = sum_c relu(w_c * x(i, coord_c) - b_c)
  Var relu_feature(Var x, std::vector<int> coords, Vector w, Vector b);

  // out_i = U(x_i) with the potential's per-sample gradient captured at
  // forward time (frozen-coefficient semantics).
  Var apply_potential(Var x, const PotentialFn& fn);

  // clamp_min(x, c) = c + relu(x - c)
  Var clamp_min(Var a, double c);

  void backward(Var out);

  const Matrix& value(Var v) const;
  // Zero matrix of the value's shape when no gradient reached v.
  Matrix grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  enum class Op {
    Leaf, Add, Sub, Mul, Div, Neg, Scale, AddConst, MatMul, AddRowVec,
    Tanh, Relu, Exp, Log, Square, Sum, Mean, ColMean, StopGrad,
    CostMatrix, AddColOffsets, SoftminRows, SoftminCols, SparseSoftminRows,
    ReluFeature, ApplyPotential
  };

  struct Node {
    Op op;
    int a = -1, b = -1;
    Matrix value;
    Matrix grad;  // empty until touched by backward
    double c0 = 0.0;
    int i0 = 0;
    Vector aux0, aux1;  // detached duals / offsets / relu weights
    Matrix aux_mat;     // potential jacobian
    std::vector<int> aux_idx;
    std::shared_ptr<const Shortlist> lists;
  };

  Var push(Node n);
  Node& at(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& at(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
  Matrix& grad_buf(int id);
  void check(Var v) const;

  std::vector<Node> nodes_;
};

struct FdOptions {
  double step = 1e-5;
  double tol = 1e-4;
  double abs_floor = 1e-12;
  double rel_floor = 1e-6;  // scaled by the largest gradient magnitude
};

struct FdReport {
  double max_rel_err = 0.0;
  bool pass = false;
  int worst_param = -1;
  Eigen::Index worst_row = 0, worst_col = 0;
};

// Central-difference check of analytic gradients, coordinate by coordinate.
// `f` must be deterministic for fixed inputs.
FdReport finite_diff_check(const std::function<double(const std::vector<Matrix>&)>& f,
                           const std::vector<Matrix>& params,
                           const std::vector<Matrix>& analytic_grads,
                           const FdOptions& opts = {});

}  // namespace cwg::ad
