#include <cmath>

#include "doctest.h"
#include "genrec/ecpo.hpp"

using namespace genrec;

TEST_CASE("advantage normalization uses the population std") {
  auto a = normalize_advantages({1, 2, 3});
  REQUIRE(a.size() == 3);
  CHECK(a[0] == doctest::Approx(-1.224744871).epsilon(1e-7));
  CHECK(a[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(a[2] == doctest::Approx(1.224744871).epsilon(1e-7));
}

TEST_CASE("equal rewards give all-zero advantages") {
  auto a = normalize_advantages({0.7, 0.7, 0.7, 0.7});
  for (double v : a) CHECK(v == 0.0);
  CHECK_THROWS(normalize_advantages({1.0}));
}

TEST_CASE("normalized advantages have zero mean and unit population std") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    int g = 2 + static_cast<int>(rng.randint(14));
    std::vector<double> rewards;
    for (int i = 0; i < g; ++i) rewards.push_back(rng.uniform());
    auto a = normalize_advantages(rewards);
    double mean = 0;
    for (double v : a) mean += v / g;
    double var = 0;
    for (double v : a) var += (v - mean) * (v - mean) / g;
    CHECK(std::fabs(mean) <= 1e-10);
    double stddev = std::sqrt(var);
    CHECK((stddev == 0.0 || std::fabs(stddev - 1.0) <= 1e-10));
  }
}

TEST_CASE("advantages are invariant to reward shifts and positive scalings") {
  std::vector<double> r{0.2, 0.8, 0.5, 0.9};
  auto base = normalize_advantages(r);
  std::vector<double> shifted, scaled;
  for (double v : r) {
    shifted.push_back(v + 3.7);
    scaled.push_back(2.5 * v);
  }
  auto s1 = normalize_advantages(shifted);
  auto s2 = normalize_advantages(scaled);
  for (size_t i = 0; i < r.size(); ++i) {
    CHECK(s1[i] == doctest::Approx(base[i]).epsilon(1e-10));
    CHECK(s2[i] == doctest::Approx(base[i]).epsilon(1e-10));
  }
}

TEST_CASE("early clip worked examples") {
  // pi=0.5, pi_old=0.1, eps=0.2, delta=0.1 -> max(0.5/1.3, 0.1) = 0.38462
  double p1 = early_clipped_old(0.5, 0.1, 0.2, 0.1);
  CHECK(p1 == doctest::Approx(0.384615384).epsilon(1e-6));
  CHECK(0.5 / p1 == doctest::Approx(1.3).epsilon(1e-6));

  // pi=0.05, pi_old=0.1 -> the plain GRPO denominator
  double p2 = early_clipped_old(0.05, 0.1, 0.2, 0.1);
  CHECK(p2 == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(0.05 / p2 == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS(early_clipped_old(0.5, 0.1, 0.2, 0.0));  // delta must be > 0
}

TEST_CASE("the ratio never exceeds 1+eps+delta") {
  Rng rng(7);
  const double eps = 0.2, delta = 0.1;
  for (int i = 0; i < 100000; ++i) {
    double pi = std::exp(rng.uniform(-30.0, 0.0));
    double pi_old = std::exp(rng.uniform(-30.0, 0.0));
    double denom = early_clipped_old(pi, pi_old, eps, delta);
    CHECK(pi / denom <= 1.0 + eps + delta + 1e-9);
  }
}

TEST_CASE("ecpo equals grpo whenever the early clip is inactive") {
  // pi <= pi_old * (1+eps+delta): the denominator is exactly pi_old, so the
  // ECPO term is bit-identical to GRPO with the same (eps, A).
  Rng rng(9);
  const double eps = 0.2, delta = 0.1;
  for (int i = 0; i < 200; ++i) {
    double pi_old = rng.uniform(0.05, 0.8);
    double pi = pi_old * rng.uniform(0.05, 1.0 + eps + delta);
    double adv = rng.normal();
    Tape tape;
    EcpoSample s{tape.leaf(Array::scalar(std::log(pi)), true), pi_old, adv};
    EcpoTerms terms = ecpo_objective(tape, {s}, eps, delta);

    // GRPO oracle through the same ratio route, with pi_old as denominator.
    double ratio = std::exp(std::log(pi) + (-std::log(pi_old)));
    double clipped = std::min(std::max(ratio, 1.0 - eps), 1.0 + eps);
    double grpo = std::min(ratio * adv, clipped * adv);
    CHECK(terms.objective.value().item() == grpo);  // bit-exact
  }
}

TEST_CASE("clip-inactive groups reduce to the plain policy gradient") {
  Rng rng(11);
  const double eps = 0.2, delta = 0.1;
  Tape tape;
  std::vector<EcpoSample> samples;
  double want = 0;
  const int g = 8;
  for (int i = 0; i < g; ++i) {
    double pi_old = rng.uniform(0.2, 0.8);
    double ratio = rng.uniform(0.85, 1.15);  // inside [1-eps, 1+eps]
    double pi = pi_old * ratio;
    double adv = rng.normal();
    samples.push_back({tape.leaf(Array::scalar(std::log(pi)), true), pi_old, adv});
    want += ratio * adv / g;
  }
  EcpoTerms terms = ecpo_objective(tape, samples, eps, delta);
  CHECK(terms.objective.value().item() == doctest::Approx(want).epsilon(1e-12));
  CHECK(terms.clip_fraction == 0.0);
}

TEST_CASE("a single unit-advantage sample at ratio 1 gives objective 1") {
  Tape tape;
  EcpoSample s{tape.leaf(Array::scalar(std::log(0.3)), true), 0.3, 1.0};
  EcpoTerms terms = ecpo_objective(tape, {s}, 0.2, 0.1);
  CHECK(terms.objective.value().item() == doctest::Approx(1.0).epsilon(1e-12));
  tape.backward(terms.objective);
  // d(ratio)/d(log pi) = ratio = 1: REINFORCE-like unit gradient.
  CHECK(tape.grad(Var{&tape, 0}).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ecpo bounds the negative-advantage gradient where grpo explodes") {
  const double eps = 0.2, delta = 0.1;
  const double pi_old = 0.005, pi = 0.5;  // ratio 100
  const double adv = -1.0;

  // ECPO gradient w.r.t. log pi.
  Tape tape;
  Var lp = tape.leaf(Array::scalar(std::log(pi)), true);
  EcpoTerms terms = ecpo_objective(tape, {{lp, pi_old, adv}}, eps, delta);
  tape.backward(terms.objective);
  double ecpo_grad = std::fabs(tape.grad(lp).item());
  CHECK(terms.max_ratio <= 1.0 + eps + delta + 1e-9);

  // Unclipped GRPO gradient: min(ratio*A, clip(ratio)*A) with A<0 picks the
  // ratio branch, so d/dlog(pi) = ratio * A = -100.
  Tape tape2;
  Var lp2 = tape2.leaf(Array::scalar(std::log(pi)), true);
  Var ratio = exp_op(add_scalar(lp2, -std::log(pi_old)));
  Var grpo = minimum(mul_scalar(ratio, adv),
                     mul_scalar(clamp(ratio, 1.0 - eps, 1.0 + eps), adv));
  tape2.backward(grpo);
  double grpo_grad = std::fabs(tape2.grad(lp2).item());

  CHECK(grpo_grad == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(ecpo_grad <= 1.0 + eps + delta + 1e-9);
  CHECK(grpo_grad >= 10.0 * ecpo_grad);
}

TEST_CASE("a degenerate group contributes zero gradient") {
  Tape tape;
  std::vector<double> rewards{0.4, 0.4, 0.4};
  auto adv = normalize_advantages(rewards);
  std::vector<EcpoSample> samples;
  std::vector<Var> lps;
  for (int i = 0; i < 3; ++i) {
    Var lp = tape.leaf(Array::scalar(std::log(0.2 + 0.1 * i)), true);
    lps.push_back(lp);
    samples.push_back({lp, 0.25, adv[static_cast<size_t>(i)]});
  }
  EcpoTerms terms = ecpo_objective(tape, samples, 0.2, 0.1);
  CHECK(terms.objective.value().item() == 0.0);
  tape.backward(terms.objective);
  for (Var lp : lps) CHECK(tape.grad(lp).item() == 0.0);
}

TEST_CASE("group size defaults to four times the serving output count") {
  PostTrainConfig cfg;
  const int serving_k = 8;
  CHECK(cfg.group_size == 4 * serving_k);
}
