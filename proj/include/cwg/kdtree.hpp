#pragma once

#include <vector>

#include "cwg/common.hpp"

namespace cwg {

// Axis-aligned kd-tree over row points of an N x D matrix.
// Serves three users: k-NN queries (entropy estimator, MLS neighborhoods),
// and the cluster hierarchy of the multiscale Sinkhorn solver, which walks
// the node array directly.
class KdTree {
 public:
  struct Node {
    int begin = 0, end = 0;     // range into perm()
    int left = -1, right = -1;  // child node ids, -1 for leaf
    int parent = -1;
    Vector centroid;
    double radius = 0.0;  // max distance centroid -> member point
    Vector lo, hi;        // bounding box
    int count() const { return end - begin; }
    bool leaf() const { return left < 0; }
  };

  KdTree() = default;
  explicit KdTree(const Matrix& points, int leaf_size = 8);

  // k nearest neighbors of an arbitrary query point; squared distances,
  // ascending. If exclude >= 0, that point index is skipped (self queries).
  void query_knn(const Eigen::Ref<const Eigen::RowVectorXd>& q, int k,
                 std::vector<int>& idx, std::vector<double>& dist2,
                 int exclude = -1) const;

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<int>& perm() const { return perm_; }
  const Matrix& points() const { return points_; }
  int root() const { return nodes_.empty() ? -1 : 0; }
  Eigen::Index size() const { return points_.rows(); }
  Eigen::Index dim() const { return points_.cols(); }

 private:
  int build(int begin, int end, int parent);
  void search(int node, const Eigen::Ref<const Eigen::RowVectorXd>& q, int k, int exclude,
              std::vector<std::pair<double, int>>& heap) const;
  double box_dist2(const Node& n, const Eigen::Ref<const Eigen::RowVectorXd>& q) const;

  Matrix points_;  // copy, original row order
  std::vector<int> perm_;
  std::vector<Node> nodes_;
  int leaf_size_ = 8;
};

}  // namespace cwg
