#include "genrec/params.hpp"

#include <cmath>

namespace genrec {

ParamId ParamStore::add(const std::string& name, Array init, bool sparse, bool trainable) {
  GENREC_REQUIRE(by_name_.find(name) == by_name_.end(), "duplicate parameter name: " + name);
  Entry e;
  e.name = name;
  e.value = std::move(init);
  e.sparse = sparse;
  e.trainable = trainable;
  entries_.push_back(std::move(e));
  int idx = static_cast<int>(entries_.size()) - 1;
  by_name_[name] = idx;
  return ParamId{idx};
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

ParamId ParamStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? ParamId{} : ParamId{it->second};
}

Var ParamSession::operator[](ParamId p) {
  GENREC_REQUIRE(p.valid(), "invalid parameter id");
  auto it = bound_.find(p.index);
  if (it != bound_.end()) return it->second;
  bool needs_grad = train_ && store_->trainable(p);
  Var v = tape_->leaf(store_->value(p), needs_grad);
  bound_.emplace(p.index, v);
  return v;
}

bool ParamSession::bound(ParamId p) const { return bound_.count(p.index) > 0; }

const Array* ParamSession::grad(ParamId p) const {
  auto it = bound_.find(p.index);
  if (it == bound_.end()) return nullptr;
  const Tape::Node& n = tape_->node(it->second.id);
  if (n.grad.empty()) return nullptr;
  return &n.grad;
}

void Adam::step(ParamSession& session) {
  ParamStore& store = session.store();
  for (int i = 0; i < store.count(); ++i) {
    ParamId p{i};
    if (!store.trainable(p)) continue;
    const Array* g = session.grad(p);
    if (!g) continue;
    Array& value = store.value(p);
    auto mi = m_.find(i);
    if (mi == m_.end()) {
      m_.emplace(i, Array::zeros(value.shape()));
      v_.emplace(i, Array::zeros(value.shape()));
      steps_.emplace(i, 0);
    }
    Array& m = m_.at(i);
    Array& v = v_.at(i);
    int64_t t = ++steps_.at(i);
    double lr = (store.sparse(p) && cfg_.lr_sparse > 0) ? cfg_.lr_sparse : cfg_.lr;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
    Array next(value.shape());
    for (int64_t k = 0; k < value.size(); ++k) {
      double gk = g->at(k);
      m.at(k) = cfg_.beta1 * m.at(k) + (1.0 - cfg_.beta1) * gk;
      v.at(k) = cfg_.beta2 * v.at(k) + (1.0 - cfg_.beta2) * gk * gk;
      double mhat = m.at(k) / bc1;
      double vhat = v.at(k) / bc2;
      next.at(k) = value.at(k) - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
    value = std::move(next);
  }
}

Array normal_init(std::vector<int> shape, double stddev, Rng& rng) {
  Array a(std::move(shape));
  for (int64_t i = 0; i < a.size(); ++i) a.at(i) = rng.normal(0.0, stddev);
  return a;
}

Array zeros_init(std::vector<int> shape) { return Array::zeros(std::move(shape)); }

Array ones_init(std::vector<int> shape) { return Array::full(std::move(shape), 1.0); }

}  // namespace genrec
