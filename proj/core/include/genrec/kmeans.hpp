#pragma once

#include <vector>

#include "genrec/array.hpp"
#include "genrec/rng.hpp"

namespace genrec {

struct KMeansOptions {
  int max_iters = 50;
  double rel_tol = 1e-6;  // stop when the objective improves less than this
};

struct KMeansResult {
  Array centroids;          // (k, d)
  Array initial_centroids;  // k-means++ seeds, before any Lloyd step
  std::vector<int> assignment;
  std::vector<double> objective_per_iter;  // after each assignment phase
  double objective = 0.0;
  int iterations = 0;
};

// Lloyd's algorithm with k-means++ seeding. Assignment ties break to the
// lowest centroid index; empty clusters are reseeded to the point farthest
// from its assigned centroid.
KMeansResult kmeans(const Array& points, int k, Rng& rng, const KMeansOptions& opts = {});

// Largest c with c^3 <= n (cluster count per hierarchical step).
int cube_root_cluster_count(int n);

// Recursive K-means split. Cluster count per step is max(2, cube root of the
// current set size); recursion stops when a cluster holds <= threshold points.
// Returns a leaf-cluster label per point. Points in sets of size <= threshold
// at the top level are each their own leaf only if no split happened; the
// caller decides what to do with leaves.
std::vector<int> hierarchical_clusters(const Array& points, int threshold, Rng& rng);

}  // namespace genrec
