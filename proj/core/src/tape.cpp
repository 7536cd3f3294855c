#include "genrec/tape.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace genrec {

namespace {

const Array& val(Var a) { return a.tape->node(a.id).value; }
bool rg(Var a) { return a.tape->node(a.id).requires_grad; }

void same_tape(Var a, Var b) { GENREC_REQUIRE(a.tape == b.tape, "operands live on different tapes"); }

void check2d(const Array& a, const char* op) {
  GENREC_REQUIRE(a.ndim() == 1 || a.ndim() == 2, std::string(op) + ": expected 1-D or 2-D array");
}

}  // namespace

const Array& Var::value() const { return tape->node(id).value; }

Var Tape::leaf(Array value, bool requires_grad) {
  return make(std::move(value), requires_grad, nullptr);
}

Var Tape::make(Array value, bool requires_grad, std::function<void(Tape&, int)> backprop) {
  if (!value.all_finite()) throw std::runtime_error("non-finite value produced on tape");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Array& Tape::grad_buf(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Array::zeros(n.value.shape());
  return n.grad;
}

namespace {

std::vector<int> squeezed(const std::vector<int>& shape) {
  std::vector<int> out;
  for (int d : shape)
    if (d != 1) out.push_back(d);
  return out;
}

}  // namespace

void Tape::accumulate(int id, const Array& delta) {
  Array& g = grad_buf(id);
  // Shapes must agree up to unit extents (a scalar may arrive as (1,1)).
  GENREC_REQUIRE(g.same_shape(delta) || squeezed(g.shape()) == squeezed(delta.shape()),
          "gradient shape mismatch");
  for (int64_t i = 0; i < g.size(); ++i) g.at(i) += delta.at(i);
}

void Tape::backward(Var loss) {
  GENREC_REQUIRE(loss.tape == this, "backward: loss node is not on this tape");
  const Node& ln = node(loss.id);
  GENREC_REQUIRE(ln.value.size() == 1, "backward: loss must be a scalar");
  if (!ln.requires_grad) return;
  grad_buf(loss.id).at(0) += 1.0;
  // Creation order is topological, so one reverse sweep suffices.
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, id);
  }
}

const Array& Tape::grad(Var v) {
  GENREC_REQUIRE(v.tape == this, "grad: node is not on this tape");
  return grad_buf(v.id);
}

// ---- elementwise ------------------------------------------------------------

Var add(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  GENREC_REQUIRE(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) + bv.at(i);
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) t.accumulate(ai, g);
    if (rb) t.accumulate(bi, g);
  });
}

Var add_rowvec(Var a, Var v) {
  same_tape(a, v);
  const Array &av = val(a), &vv = val(v);
  GENREC_REQUIRE(vv.rows() == 1 && vv.cols() == av.cols(), "add_rowvec: expected (1," +
          std::to_string(av.cols()) + "), got " + vv.shape_str());
  Array out(av.shape());
  int m = av.rows(), n = av.cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = av.at(i, j) + vv.at(0, j);
  int ai = a.id, vi = v.id;
  bool ra = rg(a), rv = rg(v);
  return a.tape->make(std::move(out), ra || rv, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) t.accumulate(ai, g);
    if (rv) {
      Array dv({1, n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dv.at(0, j) += g.at(i, j);
      t.accumulate(vi, dv);
    }
  });
}

Var add_scalar(Var a, double c) {
  const Array& av = val(a);
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) + c;
  int ai = a.id;
  bool ra = rg(a);
  return a.tape->make(std::move(out), ra, [=](Tape& t, int id) {
    t.accumulate(ai, t.node(id).grad);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  GENREC_REQUIRE(av.same_shape(bv), "sub: shape mismatch");
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) - bv.at(i);
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) t.accumulate(ai, g);
    if (rb) {
      Array nb(g.shape());
      for (int64_t i = 0; i < nb.size(); ++i) nb.at(i) = -g.at(i);
      t.accumulate(bi, nb);
    }
  });
}

Var neg(Var a) { return mul_scalar(a, -1.0); }

Var mul(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  GENREC_REQUIRE(av.same_shape(bv), "mul: shape mismatch");
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) * bv.at(i);
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=, va = av, vb = bv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) * vb.at(i);
      t.accumulate(ai, d);
    }
    if (rb) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) * va.at(i);
      t.accumulate(bi, d);
    }
  });
}

Var div(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  GENREC_REQUIRE(av.same_shape(bv), "div: shape mismatch");
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) / bv.at(i);
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=, va = av, vb = bv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) / vb.at(i);
      t.accumulate(ai, d);
    }
    if (rb) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i)
        d.at(i) = -g.at(i) * va.at(i) / (vb.at(i) * vb.at(i));
      t.accumulate(bi, d);
    }
  });
}

Var mul_colvec(Var a, Var v) {
  same_tape(a, v);
  const Array &av = val(a), &vv = val(v);
  int m = av.rows(), n = av.cols();
  GENREC_REQUIRE(vv.rows() == m && vv.cols() == 1, "mul_colvec: expected (" + std::to_string(m) +
          ",1), got " + vv.shape_str());
  Array out({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) = av.at(i, j) * vv.at(i, 0);
  int ai = a.id, vi = v.id;
  bool ra = rg(a), rv = rg(v);
  return a.tape->make(std::move(out), ra || rv, [=, va = av, vb = vv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) {
      Array d({m, n});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) d.at(i, j) = g.at(i, j) * vb.at(i, 0);
      t.accumulate(ai, d);
    }
    if (rv) {
      Array d({m, 1});
      for (int i = 0; i < m; ++i) {
        double s = 0;
        for (int j = 0; j < n; ++j) s += g.at(i, j) * va.at(i, j);
        d.at(i, 0) = s;
      }
      t.accumulate(vi, d);
    }
  });
}

Var mul_scalar(Var a, double c) {
  const Array& av = val(a);
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) * c;
  int ai = a.id;
  bool ra = rg(a);
  return a.tape->make(std::move(out), ra, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d(g.shape());
    for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) * c;
    t.accumulate(ai, d);
  });
}

Var mul_const(Var a, const Array& c) {
  const Array& av = val(a);
  GENREC_REQUIRE(av.same_shape(c), "mul_const: shape mismatch");
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = av.at(i) * c.at(i);
  int ai = a.id;
  bool ra = rg(a);
  return a.tape->make(std::move(out), ra, [=, cv = c](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d(g.shape());
    for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) * cv.at(i);
    t.accumulate(ai, d);
  });
}

// ---- linear algebra ---------------------------------------------------------

namespace {

// out(m,n) += a(m,k) * b(k,n), row-major ikj order.
void matmul_into(Array& out, const Array& a, const Array& b, bool transpose_a, bool transpose_b) {
  int m = out.rows(), n = out.cols();
  int kk = transpose_a ? a.rows() : a.cols();
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<int64_t>(i) * n;
    for (int k = 0; k < kk; ++k) {
      double aik = transpose_a ? a.at(k, i) : a.at(i, k);
      if (aik == 0.0) continue;
      if (!transpose_b) {
        const double* brow = b.data() + static_cast<int64_t>(k) * n;
        for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
      } else {
        for (int j = 0; j < n; ++j) orow[j] += aik * b.at(j, k);
      }
    }
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  check2d(av, "matmul");
  check2d(bv, "matmul");
  int m = av.rows(), k = av.cols(), k2 = bv.rows(), n = bv.cols();
  GENREC_REQUIRE(k == k2, "matmul: inner extents disagree, " + av.shape_str() + " x " + bv.shape_str());
  Array out({m, n});
  matmul_into(out, av, bv, false, false);
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=, va = av, vb = bv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) {
      Array da({m, k});
      matmul_into(da, g, vb, false, true);  // g * b^T
      t.accumulate(ai, da);
    }
    if (rb) {
      Array db({k, n});
      matmul_into(db, va, g, true, false);  // a^T * g
      t.accumulate(bi, db);
    }
  });
}

Var transpose(Var a) {
  const Array& av = val(a);
  check2d(av, "transpose");
  int m = av.rows(), n = av.cols();
  Array out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  int ai = a.id;
  bool ra = rg(a);
  return a.tape->make(std::move(out), ra, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) d.at(i, j) = g.at(j, i);
    t.accumulate(ai, d);
  });
}

// ---- softmax family ---------------------------------------------------------

Var softmax_rows(Var x) {
  const Array& xv = val(x);
  check2d(xv, "softmax_rows");
  int m = xv.rows(), n = xv.cols();
  std::vector<int> valid(static_cast<size_t>(m), n);
  return softmax_rows_masked(x, valid);
}

Var softmax_rows_masked(Var x, const std::vector<int>& valid) {
  const Array& xv = val(x);
  check2d(xv, "softmax_rows_masked");
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(static_cast<int>(valid.size()) == m, "softmax mask length must equal row count");
  Array out(xv.shape());
  for (int i = 0; i < m; ++i) {
    int v = valid[static_cast<size_t>(i)];
    GENREC_REQUIRE(v >= 1 && v <= n, "softmax mask entry out of range");
    double mx = xv.at(i, 0);
    for (int j = 1; j < v; ++j) mx = std::max(mx, xv.at(i, j));
    double denom = 0;
    for (int j = 0; j < v; ++j) denom += std::exp(xv.at(i, j) - mx);
    for (int j = 0; j < v; ++j) out.at(i, j) = std::exp(xv.at(i, j) - mx) / denom;
  }
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=, vmask = valid](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    const Array& y = t.node(id).value;
    Array d({m, n});
    for (int i = 0; i < m; ++i) {
      int v = vmask[static_cast<size_t>(i)];
      double dot = 0;
      for (int j = 0; j < v; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < v; ++j) d.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
    }
    t.accumulate(xi, d);
  });
}

Var log_softmax_rows(Var x) {
  const Array& xv = val(x);
  check2d(xv, "log_softmax_rows");
  int m = xv.rows(), n = xv.cols();
  Array out({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = xv.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    double denom = 0;
    for (int j = 0; j < n; ++j) denom += std::exp(xv.at(i, j) - mx);
    double lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) - lse;
  }
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    const Array& y = t.node(id).value;
    Array d({m, n});
    for (int i = 0; i < m; ++i) {
      double gsum = 0;
      for (int j = 0; j < n; ++j) gsum += g.at(i, j);
      for (int j = 0; j < n; ++j) d.at(i, j) = g.at(i, j) - std::exp(y.at(i, j)) * gsum;
    }
    t.accumulate(xi, d);
  });
}

Var picked_log_softmax(Var logits, const std::vector<int>& targets) {
  const Array& xv = val(logits);
  check2d(xv, "picked_log_softmax");
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(static_cast<int>(targets.size()) == m, "picked_log_softmax: one target per row");
  for (int t : targets) GENREC_REQUIRE(t >= 0 && t < n, "target index out of range");
  Array out({m, 1});
  Array probs({m, n});
  for (int i = 0; i < m; ++i) {
    double mx = xv.at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
    double denom = 0;
    for (int j = 0; j < n; ++j) denom += std::exp(xv.at(i, j) - mx);
    double lse = mx + std::log(denom);
    for (int j = 0; j < n; ++j) probs.at(i, j) = std::exp(xv.at(i, j) - lse);
    out.at(i, 0) = xv.at(i, targets[static_cast<size_t>(i)]) - lse;
  }
  int xi = logits.id;
  bool rx = rg(logits);
  return logits.tape->make(std::move(out), rx, [=, p = probs, tg = targets](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int i = 0; i < m; ++i) {
      double gi = g.at(i, 0);
      for (int j = 0; j < n; ++j) d.at(i, j) = -gi * p.at(i, j);
      d.at(i, tg[static_cast<size_t>(i)]) += gi;
    }
    t.accumulate(xi, d);
  });
}

Var cross_entropy(Var logits, int target) {
  const Array& xv = val(logits);
  check2d(xv, "cross_entropy");
  GENREC_REQUIRE(xv.rows() == 1, "cross_entropy: expected a single logit row");
  GENREC_REQUIRE(target >= 0 && target < xv.cols(), "cross_entropy: target index out of range");
  Var lp = picked_log_softmax(logits, {target});
  return neg(lp);
}

Var bce_with_logits(Var z, const Array& y) {
  const Array& zv = val(z);
  GENREC_REQUIRE(zv.same_shape(y), "bce_with_logits: shape mismatch");
  Array out(zv.shape());
  for (int64_t i = 0; i < out.size(); ++i) {
    double zi = zv.at(i);
    out.at(i) = std::max(zi, 0.0) - zi * y.at(i) + std::log1p(std::exp(-std::fabs(zi)));
  }
  int zi_id = z.id;
  bool rz = rg(z);
  return z.tape->make(std::move(out), rz, [=, zval = zv, yv = y](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d(g.shape());
    for (int64_t i = 0; i < d.size(); ++i) {
      double s = 1.0 / (1.0 + std::exp(-zval.at(i)));
      d.at(i) = g.at(i) * (s - yv.at(i));
    }
    t.accumulate(zi_id, d);
  });
}

// ---- normalization and activations -------------------------------------------

Var rms_norm(Var x, Var gain, double eps) {
  same_tape(x, gain);
  const Array &xv = val(x), &gv = val(gain);
  check2d(xv, "rms_norm");
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(static_cast<int64_t>(n) == gv.size(), "rms_norm: gain length must match last extent");
  Array out({m, n});
  std::vector<double> inv_rms(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    double ms = 0;
    for (int j = 0; j < n; ++j) ms += xv.at(i, j) * xv.at(i, j);
    ms = ms / n + eps;
    double r = 1.0 / std::sqrt(ms);
    inv_rms[static_cast<size_t>(i)] = r;
    for (int j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) * r * gv.at(j);
  }
  int xi = x.id, gi = gain.id;
  bool rx = rg(x), rga = rg(gain);
  return x.tape->make(std::move(out), rx || rga,
                      [=, vx = xv, vg = gv, r = std::move(inv_rms)](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (rx) {
      Array d({m, n});
      for (int i = 0; i < m; ++i) {
        double ri = r[static_cast<size_t>(i)];
        double dot = 0;
        for (int j = 0; j < n; ++j) dot += g.at(i, j) * vg.at(j) * vx.at(i, j);
        double c = ri * ri * ri * dot / n;
        for (int j = 0; j < n; ++j) d.at(i, j) = g.at(i, j) * vg.at(j) * ri - c * vx.at(i, j);
      }
      t.accumulate(xi, d);
    }
    if (rga) {
      Array d(vg.shape());
      for (int i = 0; i < m; ++i) {
        double ri = r[static_cast<size_t>(i)];
        for (int j = 0; j < n; ++j) d.at(j) += g.at(i, j) * vx.at(i, j) * ri;
      }
      t.accumulate(gi, d);
    }
  });
}

namespace {

template <typename F, typename DF>
Var unary_op(Var x, F f, DF df) {
  const Array& xv = val(x);
  Array out(xv.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = f(xv.at(i));
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=, vx = xv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d(g.shape());
    for (int64_t i = 0; i < d.size(); ++i) d.at(i) = g.at(i) * df(vx.at(i));
    t.accumulate(xi, d);
  });
}

}  // namespace

Var leaky_relu(Var x, double negative_slope) {
  return unary_op(
      x, [=](double v) { return v > 0 ? v : negative_slope * v; },
      [=](double v) { return v > 0 ? 1.0 : negative_slope; });
}

Var silu(Var x) {
  return unary_op(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var sigmoid(Var x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double v) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 - s);
      });
}

Var exp_op(Var x) {
  return unary_op(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Var log_op(Var x) {
  return unary_op(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

Var sqrt_op(Var x) {
  return unary_op(x, [](double v) { return std::sqrt(v); },
                  [](double v) { return 0.5 / std::sqrt(v); });
}

Var clamp(Var x, double lo, double hi) {
  GENREC_REQUIRE(lo <= hi, "clamp: lo > hi");
  return unary_op(
      x, [=](double v) { return std::min(std::max(v, lo), hi); },
      [=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var minimum(Var a, Var b) {
  same_tape(a, b);
  const Array &av = val(a), &bv = val(b);
  GENREC_REQUIRE(av.same_shape(bv), "minimum: shape mismatch");
  Array out(av.shape());
  for (int64_t i = 0; i < out.size(); ++i) out.at(i) = std::min(av.at(i), bv.at(i));
  int ai = a.id, bi = b.id;
  bool ra = rg(a), rb = rg(b);
  return a.tape->make(std::move(out), ra || rb, [=, va = av, vb = bv](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    if (ra) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i) d.at(i) = va.at(i) <= vb.at(i) ? g.at(i) : 0.0;
      t.accumulate(ai, d);
    }
    if (rb) {
      Array d(g.shape());
      for (int64_t i = 0; i < d.size(); ++i) d.at(i) = vb.at(i) < va.at(i) ? g.at(i) : 0.0;
      t.accumulate(bi, d);
    }
  });
}

// ---- reductions ---------------------------------------------------------------

Var sum(Var x) {
  const Array& xv = val(x);
  double s = 0;
  for (int64_t i = 0; i < xv.size(); ++i) s += xv.at(i);
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(Array::scalar(s), rx, [=, shape = xv.shape()](Tape& t, int id) {
    double g = t.node(id).grad.at(0);
    Array d = Array::full(shape, g);
    t.accumulate(xi, d);
  });
}

Var mean(Var x) {
  const Array& xv = val(x);
  return mul_scalar(sum(x), 1.0 / static_cast<double>(xv.size()));
}

Var mean_rows(Var x) {
  const Array& xv = val(x);
  check2d(xv, "mean_rows");
  int m = xv.rows(), n = xv.cols();
  Array out({1, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(0, j) += xv.at(i, j) / m;
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) d.at(i, j) = g.at(0, j) / m;
    t.accumulate(xi, d);
  });
}

// ---- shape ops ------------------------------------------------------------------

Var reshape(Var x, std::vector<int> shape) {
  const Array& xv = val(x);
  GENREC_REQUIRE(shape_size(shape) == xv.size(), "reshape: element count mismatch");
  std::vector<double> data(xv.data(), xv.data() + xv.size());
  Array out(shape, std::move(data));
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=, old_shape = xv.shape()](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    std::vector<double> gd(g.data(), g.data() + g.size());
    t.accumulate(xi, Array(old_shape, std::move(gd)));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  GENREC_REQUIRE(!parts.empty(), "concat_rows: no inputs");
  Tape* tape = parts[0].tape;
  int n = val(parts[0]).cols();
  int m = 0;
  bool any = false;
  for (Var p : parts) {
    GENREC_REQUIRE(p.tape == tape, "concat_rows: inputs on different tapes");
    GENREC_REQUIRE(val(p).cols() == n, "concat_rows: column mismatch");
    m += val(p).rows();
    any = any || rg(p);
  }
  Array out({m, n});
  int row = 0;
  std::vector<std::pair<int, std::pair<int, int>>> spans;  // (node id, (begin row, rows))
  for (Var p : parts) {
    const Array& pv = val(p);
    for (int i = 0; i < pv.rows(); ++i)
      for (int j = 0; j < n; ++j) out.at(row + i, j) = pv.at(i, j);
    spans.push_back({p.id, {row, pv.rows()}});
    row += pv.rows();
  }
  std::vector<bool> grads;
  for (Var p : parts) grads.push_back(rg(p));
  return tape->make(std::move(out), any, [=, sp = std::move(spans), gr = std::move(grads)](
                                             Tape& t, int id) {
    const Array& g = t.node(id).grad;
    for (size_t k = 0; k < sp.size(); ++k) {
      if (!gr[k]) continue;
      int begin = sp[k].second.first, cnt = sp[k].second.second;
      Array d({cnt, n});
      for (int i = 0; i < cnt; ++i)
        for (int j = 0; j < n; ++j) d.at(i, j) = g.at(begin + i, j);
      t.accumulate(sp[k].first, d);
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  GENREC_REQUIRE(!parts.empty(), "concat_cols: no inputs");
  Tape* tape = parts[0].tape;
  int m = val(parts[0]).rows();
  int n = 0;
  bool any = false;
  for (Var p : parts) {
    GENREC_REQUIRE(p.tape == tape, "concat_cols: inputs on different tapes");
    GENREC_REQUIRE(val(p).rows() == m, "concat_cols: row mismatch");
    n += val(p).cols();
    any = any || rg(p);
  }
  Array out({m, n});
  int col = 0;
  std::vector<std::pair<int, std::pair<int, int>>> spans;
  for (Var p : parts) {
    const Array& pv = val(p);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pv.cols(); ++j) out.at(i, col + j) = pv.at(i, j);
    spans.push_back({p.id, {col, pv.cols()}});
    col += pv.cols();
  }
  std::vector<bool> grads;
  for (Var p : parts) grads.push_back(rg(p));
  return tape->make(std::move(out), any, [=, sp = std::move(spans), gr = std::move(grads)](
                                             Tape& t, int id) {
    const Array& g = t.node(id).grad;
    for (size_t k = 0; k < sp.size(); ++k) {
      if (!gr[k]) continue;
      int begin = sp[k].second.first, cnt = sp[k].second.second;
      Array d({m, cnt});
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < cnt; ++j) d.at(i, j) = g.at(i, begin + j);
      t.accumulate(sp[k].first, d);
    }
  });
}

Var slice_rows(Var x, int begin, int end) {
  const Array& xv = val(x);
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(begin >= 0 && begin < end && end <= m, "slice_rows: bad range");
  Array out({end - begin, n});
  for (int i = begin; i < end; ++i)
    for (int j = 0; j < n; ++j) out.at(i - begin, j) = xv.at(i, j);
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int i = begin; i < end; ++i)
      for (int j = 0; j < n; ++j) d.at(i, j) = g.at(i - begin, j);
    t.accumulate(xi, d);
  });
}

Var slice_cols(Var x, int begin, int end) {
  const Array& xv = val(x);
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(begin >= 0 && begin < end && end <= n, "slice_cols: bad range");
  Array out({m, end - begin});
  for (int i = 0; i < m; ++i)
    for (int j = begin; j < end; ++j) out.at(i, j - begin) = xv.at(i, j);
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = begin; j < end; ++j) d.at(i, j) = g.at(i, j - begin);
    t.accumulate(xi, d);
  });
}

Var gather_rows(Var x, std::vector<int> idx) {
  const Array& xv = val(x);
  int m = xv.rows(), n = xv.cols();
  for (int i : idx) GENREC_REQUIRE(i >= 0 && i < m, "gather_rows: index out of range");
  Array out({static_cast<int>(idx.size()), n});
  for (size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < n; ++j) out.at(static_cast<int>(r), j) = xv.at(idx[r], j);
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=, ids = std::move(idx)](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (size_t r = 0; r < ids.size(); ++r)
      for (int j = 0; j < n; ++j) d.at(ids[r], j) += g.at(static_cast<int>(r), j);
    t.accumulate(xi, d);
  });
}

Var scatter_rows(Var x, std::vector<int> idx, int total_rows) {
  const Array& xv = val(x);
  int m = xv.rows(), n = xv.cols();
  GENREC_REQUIRE(static_cast<int>(idx.size()) == m, "scatter_rows: one destination per row");
  for (int i : idx) GENREC_REQUIRE(i >= 0 && i < total_rows, "scatter_rows: index out of range");
  Array out({total_rows, n});
  for (int r = 0; r < m; ++r)
    for (int j = 0; j < n; ++j) out.at(idx[static_cast<size_t>(r)], j) += xv.at(r, j);
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx, [=, ids = std::move(idx)](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (int r = 0; r < m; ++r)
      for (int j = 0; j < n; ++j) d.at(r, j) = g.at(ids[static_cast<size_t>(r)], j);
    t.accumulate(xi, d);
  });
}

Var gather_elements(Var x, std::vector<int> rows, std::vector<int> cols) {
  const Array& xv = val(x);
  GENREC_REQUIRE(rows.size() == cols.size(), "gather_elements: rows/cols length mismatch");
  int m = xv.rows(), n = xv.cols();
  int cnt = static_cast<int>(rows.size());
  Array out({cnt, 1});
  for (int i = 0; i < cnt; ++i) {
    GENREC_REQUIRE(rows[static_cast<size_t>(i)] >= 0 && rows[static_cast<size_t>(i)] < m &&
                cols[static_cast<size_t>(i)] >= 0 && cols[static_cast<size_t>(i)] < n,
            "gather_elements: index out of range");
    out.at(i, 0) = xv.at(rows[static_cast<size_t>(i)], cols[static_cast<size_t>(i)]);
  }
  int xi = x.id;
  bool rx = rg(x);
  return x.tape->make(std::move(out), rx,
                      [=, rr = std::move(rows), cc = std::move(cols)](Tape& t, int id) {
    const Array& g = t.node(id).grad;
    Array d({m, n});
    for (size_t i = 0; i < rr.size(); ++i) d.at(rr[i], cc[i]) += g.at(static_cast<int>(i), 0);
    t.accumulate(xi, d);
  });
}

Var stop_gradient(Var x) {
  Array copy = val(x);
  return x.tape->leaf(std::move(copy), false);
}

Var mha_core(Var q, Var k, Var v, int heads, const std::vector<int>* causal_valid) {
  same_tape(q, k);
  same_tape(q, v);
  const Array &qv = val(q), &kv = val(k), &vv = val(v);
  int tq = qv.rows(), tk = kv.rows(), d = qv.cols();
  GENREC_REQUIRE(kv.cols() == d && vv.cols() == d && vv.rows() == tk, "mha_core: shape mismatch");
  GENREC_REQUIRE(heads >= 1 && d % heads == 0, "mha_core: heads must divide d");
  if (causal_valid) {
    GENREC_REQUIRE(static_cast<int>(causal_valid->size()) == tq, "mha_core: one mask entry per query");
    for (int m : *causal_valid) GENREC_REQUIRE(m >= 1 && m <= tk, "mha_core: mask out of range");
  }
  int dh = d / heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights kept for the backward pass: (heads, tq, tk) flattened.
  Array att({heads, tq, tk});
  Array out({tq, d});
  for (int h = 0; h < heads; ++h) {
    int off = h * dh;
    for (int i = 0; i < tq; ++i) {
      int valid = causal_valid ? (*causal_valid)[static_cast<size_t>(i)] : tk;
      double* arow = att.data() + (static_cast<int64_t>(h) * tq + i) * tk;
      double mx = -1e300;
      for (int j = 0; j < valid; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) s += qv.at(i, off + c) * kv.at(j, off + c);
        arow[j] = s * scale;
        mx = std::max(mx, arow[j]);
      }
      double denom = 0;
      for (int j = 0; j < valid; ++j) {
        arow[j] = std::exp(arow[j] - mx);
        denom += arow[j];
      }
      for (int j = 0; j < valid; ++j) arow[j] /= denom;
      for (int c = 0; c < dh; ++c) {
        double s = 0;
        for (int j = 0; j < valid; ++j) s += arow[j] * vv.at(j, off + c);
        out.at(i, off + c) = s;
      }
    }
  }

  int qi = q.id, ki = k.id, vi = v.id;
  bool rq = rg(q), rk = rg(k), rv = rg(v);
  std::vector<int> mask = causal_valid ? *causal_valid : std::vector<int>();
  return q.tape->make(
      std::move(out), rq || rk || rv,
      [=, qa = qv, ka = kv, va = vv, aw = att, msk = std::move(mask)](Tape& t, int id) {
        const Array& g = t.node(id).grad;
        Array dq({tq, d}), dk({tk, d}), dv({tk, d});
        std::vector<double> da(static_cast<size_t>(tk));
        for (int h = 0; h < heads; ++h) {
          int off = h * dh;
          for (int i = 0; i < tq; ++i) {
            int valid = msk.empty() ? tk : msk[static_cast<size_t>(i)];
            const double* arow = aw.data() + (static_cast<int64_t>(h) * tq + i) * tk;
            // dA = g Vt ; dV += At g
            double dot = 0;
            for (int j = 0; j < valid; ++j) {
              double s = 0;
              for (int c = 0; c < dh; ++c) s += g.at(i, off + c) * va.at(j, off + c);
              da[static_cast<size_t>(j)] = s;
              dot += s * arow[j];
            }
            for (int j = 0; j < valid; ++j) {
              double ds = arow[j] * (da[static_cast<size_t>(j)] - dot) * scale;
              if (rv) {
                for (int c = 0; c < dh; ++c) dv.at(j, off + c) += arow[j] * g.at(i, off + c);
              }
              if (rq) {
                for (int c = 0; c < dh; ++c) dq.at(i, off + c) += ds * ka.at(j, off + c);
              }
              if (rk) {
                for (int c = 0; c < dh; ++c) dk.at(j, off + c) += ds * qa.at(i, off + c);
              }
            }
          }
        }
        if (rq) t.accumulate(qi, dq);
        if (rk) t.accumulate(ki, dk);
        if (rv) t.accumulate(vi, dv);
      });
}

}  // namespace genrec
