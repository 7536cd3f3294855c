#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "genrec/array.hpp"
#include "genrec/rng.hpp"
#include "genrec/tape.hpp"

namespace genrec {

struct ParamId {
  int index = -1;
  bool valid() const { return index >= 0; }
};

// Owns model parameters. Insertion order is fixed, which keeps optimizer
// sweeps and serialization deterministic.
class ParamStore {
 public:
  // sparse marks embedding-table parameters; they may get their own learning
  // rate. trainable=false registers a buffer the optimizer never touches
  // (e.g. MoE routing biases).
  ParamId add(const std::string& name, Array init, bool sparse = false, bool trainable = true);

  Array& value(ParamId p) { return entries_[static_cast<size_t>(p.index)].value; }
  const Array& value(ParamId p) const { return entries_[static_cast<size_t>(p.index)].value; }
  const std::string& name(ParamId p) const { return entries_[static_cast<size_t>(p.index)].name; }
  bool sparse(ParamId p) const { return entries_[static_cast<size_t>(p.index)].sparse; }
  bool trainable(ParamId p) const { return entries_[static_cast<size_t>(p.index)].trainable; }

  int count() const { return static_cast<int>(entries_.size()); }
  int64_t total_size() const;
  ParamId find(const std::string& name) const;

  struct Entry {
    std::string name;
    Array value;
    bool sparse = false;
    bool trainable = true;
  };
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

// Per-forward binding of store parameters onto a tape. Each parameter becomes
// a leaf node on first use; after backward() the accumulated gradients are
// read back through this mapping.
class ParamSession {
 public:
  ParamSession(Tape& tape, ParamStore& store, bool train = true)
      : tape_(&tape), store_(&store), train_(train) {}

  Var operator[](ParamId p);

  bool bound(ParamId p) const;
  // Gradient of a bound parameter after backward(); nullptr when the
  // parameter never entered the graph.
  const Array* grad(ParamId p) const;

  Tape& tape() { return *tape_; }
  ParamStore& store() { return *store_; }
  bool training() const { return train_; }

 private:
  Tape* tape_;
  ParamStore* store_;
  bool train_;
  std::unordered_map<int, Var> bound_;
};

struct AdamConfig {
  double lr = 1e-3;
  double lr_sparse = -1.0;  // < 0 means: use lr
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a ParamStore. Parameters that were not bound in the session (or
// received no gradient) are left untouched, moments included.
class Adam {
 public:
  explicit Adam(const AdamConfig& cfg) : cfg_(cfg) {}

  void step(ParamSession& session);
  void reset() { m_.clear(); v_.clear(); steps_.clear(); }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr, double lr_sparse) { cfg_.lr = lr; cfg_.lr_sparse = lr_sparse; }

 private:
  AdamConfig cfg_;
  std::unordered_map<int, Array> m_, v_;
  std::unordered_map<int, int64_t> steps_;
};

// Initializers.
Array normal_init(std::vector<int> shape, double stddev, Rng& rng);
Array zeros_init(std::vector<int> shape);
Array ones_init(std::vector<int> shape);

}  // namespace genrec
