#include "genrec/kmeans.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace genrec {

namespace {

double sq_dist(const double* a, const double* b, int d) {
  double s = 0;
  for (int i = 0; i < d; ++i) {
    double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(const Array& points, int k, Rng& rng, const KMeansOptions& opts) {
  int n = points.rows(), d = points.cols();
  GENREC_REQUIRE(k >= 1, "kmeans: k must be >= 1");
  GENREC_REQUIRE(n >= k, "kmeans: need at least k points");

  KMeansResult res;
  res.centroids = Array::zeros({k, d});

  // k-means++ seeding.
  std::vector<double> min_d2(static_cast<size_t>(n), std::numeric_limits<double>::max());
  {
    int first = static_cast<int>(rng.randint(n));
    for (int j = 0; j < d; ++j) res.centroids.at(0, j) = points.at(first, j);
    for (int c = 1; c < k; ++c) {
      double total = 0;
      for (int i = 0; i < n; ++i) {
        double d2 = sq_dist(points.data() + static_cast<int64_t>(i) * d,
                            res.centroids.data() + static_cast<int64_t>(c - 1) * d, d);
        min_d2[static_cast<size_t>(i)] = std::min(min_d2[static_cast<size_t>(i)], d2);
        total += min_d2[static_cast<size_t>(i)];
      }
      int pick = 0;
      if (total > 0) {
        double r = rng.uniform() * total;
        double acc = 0;
        for (int i = 0; i < n; ++i) {
          acc += min_d2[static_cast<size_t>(i)];
          if (acc >= r) {
            pick = i;
            break;
          }
          pick = i;
        }
      } else {
        pick = static_cast<int>(rng.randint(n));
      }
      for (int j = 0; j < d; ++j) res.centroids.at(c, j) = points.at(pick, j);
    }
  }
  res.initial_centroids = Array({k, d});
  for (int64_t i = 0; i < res.initial_centroids.size(); ++i)
    res.initial_centroids.at(i) = res.centroids.at(i);

  res.assignment.assign(static_cast<size_t>(n), 0);
  double prev_obj = std::numeric_limits<double>::max();
  for (int iter = 0; iter < opts.max_iters; ++iter) {
    // Assignment phase; ties break to the lowest index.
    double obj = 0;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = sq_dist(points.data() + static_cast<int64_t>(i) * d, res.centroids.data(), d);
      for (int c = 1; c < k; ++c) {
        double d2 = sq_dist(points.data() + static_cast<int64_t>(i) * d,
                            res.centroids.data() + static_cast<int64_t>(c) * d, d);
        if (d2 < best_d) {
          best_d = d2;
          best = c;
        }
      }
      res.assignment[static_cast<size_t>(i)] = best;
      obj += best_d;
    }
    res.objective_per_iter.push_back(obj);
    res.objective = obj;
    res.iterations = iter + 1;

    bool converged = prev_obj != std::numeric_limits<double>::max() &&
                     (prev_obj - obj) <= opts.rel_tol * std::max(prev_obj, 1e-300);
    prev_obj = obj;

    // Update phase: means of assigned points.
    std::vector<int> counts(static_cast<size_t>(k), 0);
    Array sums = Array::zeros({k, d});
    for (int i = 0; i < n; ++i) {
      int c = res.assignment[static_cast<size_t>(i)];
      counts[static_cast<size_t>(c)]++;
      for (int j = 0; j < d; ++j) sums.at(c, j) += points.at(i, j);
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        for (int j = 0; j < d; ++j) res.centroids.at(c, j) = sums.at(c, j) / counts[static_cast<size_t>(c)];
      }
    }
    // Reseed empty clusters to the farthest point from its assigned centroid.
    std::vector<bool> taken(static_cast<size_t>(n), false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) continue;
      int far = -1;
      double far_d = -1;
      for (int i = 0; i < n; ++i) {
        if (taken[static_cast<size_t>(i)]) continue;
        int a = res.assignment[static_cast<size_t>(i)];
        double d2 = sq_dist(points.data() + static_cast<int64_t>(i) * d,
                            res.centroids.data() + static_cast<int64_t>(a) * d, d);
        if (d2 > far_d) {
          far_d = d2;
          far = i;
        }
      }
      if (far < 0) continue;
      taken[static_cast<size_t>(far)] = true;
      for (int j = 0; j < d; ++j) res.centroids.at(c, j) = points.at(far, j);
      res.assignment[static_cast<size_t>(far)] = c;
      converged = false;
    }

    if (converged) break;
  }
  return res;
}

int cube_root_cluster_count(int n) {
  int c = 0;
  while (static_cast<int64_t>(c + 1) * (c + 1) * (c + 1) <= n) ++c;
  return c;
}

namespace {

void split_recursive(const Array& points, const std::vector<int>& subset, int threshold, Rng& rng,
                     std::vector<int>& labels, int& next_label) {
  int n = static_cast<int>(subset.size());
  if (n <= threshold) {
    int lab = next_label++;
    for (int i : subset) labels[static_cast<size_t>(i)] = lab;
    return;
  }
  int d = points.cols();
  int k = std::max(2, cube_root_cluster_count(n));
  k = std::min(k, n);
  Array sub({n, d});
  for (int r = 0; r < n; ++r)
    for (int j = 0; j < d; ++j) sub.at(r, j) = points.at(subset[static_cast<size_t>(r)], j);
  KMeansResult km = kmeans(sub, k, rng);
  std::vector<std::vector<int>> children(static_cast<size_t>(k));
  for (int r = 0; r < n; ++r)
    children[static_cast<size_t>(km.assignment[static_cast<size_t>(r)])]
        .push_back(subset[static_cast<size_t>(r)]);
  for (auto& child : children) {
    if (child.empty()) continue;
    if (static_cast<int>(child.size()) == n) {
      // Degenerate split; stop rather than recurse forever.
      int lab = next_label++;
      for (int i : child) labels[static_cast<size_t>(i)] = lab;
      continue;
    }
    split_recursive(points, child, threshold, rng, labels, next_label);
  }
}

}  // namespace

std::vector<int> hierarchical_clusters(const Array& points, int threshold, Rng& rng) {
  GENREC_REQUIRE(threshold >= 1, "hierarchical_clusters: threshold must be >= 1");
  int n = points.rows();
  std::vector<int> labels(static_cast<size_t>(n), 0);
  std::vector<int> all(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
  int next_label = 0;
  split_recursive(points, all, threshold, rng, labels, next_label);
  return labels;
}

}  // namespace genrec
