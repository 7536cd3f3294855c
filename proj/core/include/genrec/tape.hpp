#pragma once

#include <functional>
#include <vector>

#include "genrec/array.hpp"

namespace genrec {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr; }
  const Array& value() const;
  const std::vector<int>& shape() const { return value().shape(); }
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// topological order by construction, so the backward pass is a single
// reverse sweep visiting each node once.
class Tape {
 public:
  struct Node {
    Array value;
    Array grad;  // empty until the node receives a gradient
    bool requires_grad = false;
    std::function<void(Tape&, int)> backprop;  // pushes this node's grad to its parents
  };

  Var leaf(Array value, bool requires_grad = false);
  Var make(Array value, bool requires_grad, std::function<void(Tape&, int)> backprop);

  // Reverse sweep from a scalar loss. Gradients accumulate into node buffers.
  void backward(Var loss);

  // Gradient of a node after backward(); zeros if the node is off every path
  // to the loss.
  const Array& grad(Var v);

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  // Adds delta into the gradient accumulator of node id.
  void accumulate(int id, const Array& delta);
  // Mutable gradient buffer, allocated on first use.
  Array& grad_buf(int id);

 private:
  std::vector<Node> nodes_;
};

// ---- primitive operations -------------------------------------------------
// All ops evaluate eagerly, verify every produced value is finite, and
// register an exact reverse-mode rule when an input requires gradients.

Var add(Var a, Var b);                 // same shape
Var add_rowvec(Var a, Var v);          // (m,n) + (1,n)
Var add_scalar(Var a, double c);
Var sub(Var a, Var b);
Var neg(Var a);
Var mul(Var a, Var b);                 // elementwise, same shape
Var div(Var a, Var b);                 // elementwise, same shape
Var mul_colvec(Var a, Var v);          // (m,n) * (m,1), column broadcast
Var mul_scalar(Var a, double c);
Var mul_const(Var a, const Array& c);  // elementwise by a constant array
Var matmul(Var a, Var b);
Var transpose(Var a);

Var softmax_rows(Var x);  // softmax along the last axis, max-subtracted
// Row i is a softmax over its first valid[i] entries; the rest are zero and
// receive no gradient.
Var softmax_rows_masked(Var x, const std::vector<int>& valid);
Var log_softmax_rows(Var x);
// log softmax(row i)[target[i]] as a (rows,1) column.
Var picked_log_softmax(Var logits, const std::vector<int>& targets);
// -log softmax(logits)[target] for a single-row logit vector.
Var cross_entropy(Var logits, int target);
// Elementwise max(z,0) - z*y + log(1+exp(-|z|)); y is a constant array.
Var bce_with_logits(Var z, const Array& y);

Var rms_norm(Var x, Var gain, double eps);  // normalize along the last axis
Var leaky_relu(Var x, double negative_slope = 0.01);
Var silu(Var x);
Var sigmoid(Var x);
Var exp_op(Var x);
Var log_op(Var x);
Var clamp(Var x, double lo, double hi);  // zero gradient outside [lo, hi]
Var minimum(Var a, Var b);               // ties route gradient to a

Var sqrt_op(Var x);

Var sum(Var x);
Var mean(Var x);
Var mean_rows(Var x);  // (m,n) -> (1,n)
// Same data, new shape (element count preserved).
Var reshape(Var x, std::vector<int> shape);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var x, int begin, int end);
Var slice_cols(Var x, int begin, int end);
Var gather_rows(Var x, std::vector<int> idx);
// Places rows of x at positions idx within a (total_rows, cols) zero array.
Var scatter_rows(Var x, std::vector<int> idx, int total_rows);
// x[rows[i], cols[i]] as a (n,1) column.
Var gather_elements(Var x, std::vector<int> rows, std::vector<int> cols);

// Forward identity whose backward contribution is exactly zero.
Var stop_gradient(Var x);

// Fused multi-head scaled-dot-product attention: q (Tq, d), k/v (Tk, d) are
// already projected; heads must divide d. Per head, softmax(Q Kt / sqrt(dh)) V,
// heads re-concatenated. causal_valid, when given, holds one key-prefix
// length per query row. One node with a hand-derived backward keeps the
// graphs small.
Var mha_core(Var q, Var k, Var v, int heads, const std::vector<int>* causal_valid = nullptr);

}  // namespace genrec
