#include "cwg/kdtree.hpp"

#include <algorithm>
#include <numeric>

namespace cwg {

KdTree::KdTree(const Matrix& points, int leaf_size)
    : points_(points), leaf_size_(leaf_size) {
  require(points_.rows() >= 1, "kdtree: empty point set");
  require(all_finite(points_), "kdtree: non-finite coordinates");
  perm_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(perm_.begin(), perm_.end(), 0);
  nodes_.reserve(static_cast<std::size_t>(2 * points_.rows() / leaf_size_ + 2));
  build(0, static_cast<int>(points_.rows()), -1);
}

int KdTree::build(int begin, int end, int parent) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.begin = begin;
  n.end = end;
  n.parent = parent;

  const Eigen::Index d = points_.cols();
  Vector lo = Vector::Constant(d, std::numeric_limits<double>::infinity());
  Vector hi = Vector::Constant(d, -std::numeric_limits<double>::infinity());
  Vector mean = Vector::Zero(d);
  for (int i = begin; i < end; ++i) {
    const auto p = points_.row(perm_[static_cast<std::size_t>(i)]);
    lo = lo.cwiseMin(p.transpose());
    hi = hi.cwiseMax(p.transpose());
    mean += p.transpose();
  }
  mean /= static_cast<double>(end - begin);
  double r2 = 0.0;
  for (int i = begin; i < end; ++i) {
    const auto p = points_.row(perm_[static_cast<std::size_t>(i)]);
    r2 = std::max(r2, (p.transpose() - mean).squaredNorm());
  }
  // 'n' may dangle after the recursive calls below reallocate nodes_,
  // so fill a local copy first and write through the id at the end.
  Vector centroid = mean;
  double radius = std::sqrt(r2);

  int left = -1, right = -1;
  if (end - begin > leaf_size_) {
    int split_dim = 0;
    (hi - lo).maxCoeff(&split_dim);
    const int mid = begin + (end - begin) / 2;
    std::nth_element(perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
                     [&](int a, int b) { return points_(a, split_dim) < points_(b, split_dim); });
    left = build(begin, mid, id);
    right = build(mid, end, id);
  }
  Node& out = nodes_[static_cast<std::size_t>(id)];
  out.left = left;
  out.right = right;
  out.centroid = std::move(centroid);
  out.radius = radius;
  out.lo = std::move(lo);
  out.hi = std::move(hi);
  return id;
}

double KdTree::box_dist2(const Node& n, const Eigen::Ref<const Eigen::RowVectorXd>& q) const {
  double s = 0.0;
  for (Eigen::Index d = 0; d < q.size(); ++d) {
    const double v = q[d];
    double diff = 0.0;
    if (v < n.lo[d]) diff = n.lo[d] - v;
    else if (v > n.hi[d]) diff = v - n.hi[d];
    s += diff * diff;
  }
  return s;
}

void KdTree::search(int node, const Eigen::Ref<const Eigen::RowVectorXd>& q, int k, int exclude,
                    std::vector<std::pair<double, int>>& heap) const {
  const Node& n = nodes_[static_cast<std::size_t>(node)];
  if (static_cast<int>(heap.size()) == k && box_dist2(n, q) > heap.front().first) return;
  if (n.leaf()) {
    for (int i = n.begin; i < n.end; ++i) {
      const int pi = perm_[static_cast<std::size_t>(i)];
      if (pi == exclude) continue;
      const double d2 = (points_.row(pi) - q).squaredNorm();
      if (static_cast<int>(heap.size()) < k) {
        heap.emplace_back(d2, pi);
        std::push_heap(heap.begin(), heap.end());
      } else if (d2 < heap.front().first) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = {d2, pi};
        std::push_heap(heap.begin(), heap.end());
      }
    }
    return;
  }
  const double dl = box_dist2(nodes_[static_cast<std::size_t>(n.left)], q);
  const double dr = box_dist2(nodes_[static_cast<std::size_t>(n.right)], q);
  if (dl <= dr) {
    search(n.left, q, k, exclude, heap);
    if (static_cast<int>(heap.size()) < k || dr <= heap.front().first)
      search(n.right, q, k, exclude, heap);
  } else {
    search(n.right, q, k, exclude, heap);
    if (static_cast<int>(heap.size()) < k || dl <= heap.front().first)
      search(n.left, q, k, exclude, heap);
  }
}

void KdTree::query_knn(const Eigen::Ref<const Eigen::RowVectorXd>& q, int k,
                       std::vector<int>& idx, std::vector<double>& dist2,
                       int exclude) const {
  require(k >= 1, "kdtree: k must be >= 1");
  std::vector<std::pair<double, int>> heap;
  heap.reserve(static_cast<std::size_t>(k) + 1);
  search(root(), q, k, exclude, heap);
  std::sort_heap(heap.begin(), heap.end());
  idx.resize(heap.size());
  dist2.resize(heap.size());
  for (std::size_t i = 0; i < heap.size(); ++i) {
    dist2[i] = heap[i].first;
    idx[i] = heap[i].second;
  }
}

}  // namespace cwg
