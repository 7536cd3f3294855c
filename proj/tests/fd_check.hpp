#pragma once

#include <functional>
#include <vector>

#include "genrec/params.hpp"
#include "genrec/tape.hpp"

// Central finite-difference gradient oracle, independent of the tape's
// reverse-mode rules. Rebuilds the forward pass for every perturbed input
// element and compares against the analytic gradients.
namespace fd {

using genrec::Array;
using genrec::Tape;
using genrec::Var;

// Builds a scalar loss from leaves created for `inputs`.
using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct Report {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double eval(const Builder& build, const std::vector<Array>& inputs) {
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(inputs.size());
  for (const auto& a : inputs) xs.push_back(tape.leaf(a, false));
  return build(tape, xs).value().item();
}

inline Report check(const Builder& build, const std::vector<Array>& inputs, double step = 1e-5) {
  Tape tape;
  std::vector<Var> xs;
  xs.reserve(inputs.size());
  for (const auto& a : inputs) xs.push_back(tape.leaf(a, true));
  Var loss = build(tape, xs);
  tape.backward(loss);

  Report rep;
  for (size_t k = 0; k < inputs.size(); ++k) {
    const Array& analytic = tape.grad(xs[k]);
    for (int64_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Array> plus = inputs;
      std::vector<Array> minus = inputs;
      Array ap(inputs[k].shape()), am(inputs[k].shape());
      for (int64_t j = 0; j < inputs[k].size(); ++j) {
        ap.at(j) = inputs[k].at(j);
        am.at(j) = inputs[k].at(j);
      }
      ap.at(i) += step;
      am.at(i) -= step;
      plus[k] = ap;
      minus[k] = am;
      double numeric = (eval(build, plus) - eval(build, minus)) / (2.0 * step);
      double a = analytic.at(i);
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

// Spot-check analytic parameter gradients against central finite differences:
// every parameter that received a gradient is perturbed at up to
// `elements_per_param` positions. loss_fn must rebuild the full forward pass
// from the store's current values.
inline Report param_spot_check(genrec::ParamStore& store,
                               const std::function<double()>& loss_fn,
                               const std::function<genrec::Var(genrec::Tape&, genrec::ParamSession&)>& build,
                               int elements_per_param = 2, double step = 1e-5) {
  genrec::Tape tape;
  genrec::ParamSession session(tape, store, true);
  genrec::Var loss = build(tape, session);
  tape.backward(loss);

  Report rep;
  for (const auto& entry : store.entries()) {
    genrec::ParamId p = store.find(entry.name);
    if (!store.trainable(p)) continue;
    const Array* g = session.grad(p);
    if (!g) continue;
    Array& value = store.value(p);
    int64_t count = std::min<int64_t>(elements_per_param, value.size());
    for (int64_t i = 0; i < count; ++i) {
      // Spread probes across the array rather than always hitting index 0.
      int64_t idx = count > 1 ? (i * (value.size() - 1)) / (count - 1) : 0;
      double orig = value.at(idx);
      value.at(idx) = orig + step;
      double fp = loss_fn();
      value.at(idx) = orig - step;
      double fm = loss_fn();
      value.at(idx) = orig;
      double numeric = (fp - fm) / (2 * step);
      double a = g->at(idx);
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-4});
      double rel = std::fabs(a - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace fd
