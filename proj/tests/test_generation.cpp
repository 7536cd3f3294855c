#include <algorithm>
#include <cmath>
#include <map>

#include "doctest.h"
#include "genrec/generation.hpp"

using namespace genrec;

namespace {

// Scorer from explicit per-step conditional distributions; logits are log
// probabilities so the model distribution matches the table exactly.
StepScorer table_scorer(const std::map<std::vector<int>, std::vector<double>>& dist) {
  return [dist](std::span<const int> prefix) {
    std::vector<int> key(prefix.begin(), prefix.end());
    const auto& probs = dist.at(key);
    Array logits({1, static_cast<int>(probs.size())});
    for (size_t i = 0; i < probs.size(); ++i) logits.at(0, static_cast<int>(i)) = std::log(probs[i]);
    return logits;
  };
}

StepScorer random_scorer(int vocab, uint64_t seed) {
  return [vocab, seed](std::span<const int> prefix) {
    // Deterministic pseudo-random logits keyed on the prefix.
    uint64_t h = seed;
    for (int c : prefix) h = h * 0x100000001b3ULL + static_cast<uint64_t>(c + 1);
    Rng rng(h);
    Array logits({1, vocab});
    for (int i = 0; i < vocab; ++i) logits.at(0, i) = rng.normal(0.0, 1.5);
    return logits;
  };
}

SemanticTrie full_trie(int vocab, int depth) {
  SemanticTrie trie(depth);
  std::vector<int> codes(static_cast<size_t>(depth), 0);
  int64_t item = 0;
  std::function<void(int)> fill = [&](int level) {
    if (level == depth) {
      trie.insert(SemanticId{codes}, item++);
      return;
    }
    for (int c = 0; c < vocab; ++c) {
      codes[static_cast<size_t>(level)] = c;
      fill(level + 1);
    }
  };
  fill(0);
  return trie;
}

// Exhaustive enumeration oracle over all vocab^depth sequences.
std::vector<std::pair<double, std::vector<int>>> enumerate_all(const StepScorer& scorer, int vocab,
                                                               int depth) {
  std::vector<std::pair<double, std::vector<int>>> out;
  std::vector<int> codes;
  std::function<void(double)> walk = [&](double lp) {
    if (static_cast<int>(codes.size()) == depth) {
      out.push_back({lp, codes});
      return;
    }
    Array logits = scorer(codes);
    double mx = logits.at(0);
    for (int64_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits.at(i));
    double lse = 0;
    for (int64_t i = 0; i < logits.size(); ++i) lse += std::exp(logits.at(i) - mx);
    lse = mx + std::log(lse);
    for (int c = 0; c < vocab; ++c) {
      codes.push_back(c);
      walk(lp + logits.at(c) - lse);
      codes.pop_back();
    }
  };
  walk(0.0);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  return out;
}

}  // namespace

TEST_CASE("beam search matches brute-force enumeration on the worked example") {
  std::map<std::vector<int>, std::vector<double>> dist{
      {{}, {0.6, 0.4}},
      {{0}, {0.9, 0.1}},
      {{1}, {0.5, 0.5}},
  };
  StepScorer scorer = table_scorer(dist);
  SemanticTrie trie = full_trie(2, 2);
  GenerationRequest req;
  req.width = 4;
  auto out = beam_search(req, scorer, 2, 2, trie);
  REQUIRE(out.size() == 4);
  CHECK(out[0].codes.codes == std::vector<int>{0, 0});
  CHECK(out[0].log_prob == doctest::Approx(std::log(0.54)).epsilon(1e-12));

  auto oracle = enumerate_all(scorer, 2, 2);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(out[i].codes.codes == oracle[i].second);
    CHECK(std::fabs(out[i].log_prob - oracle[i].first) <= 1e-10);
  }
}

TEST_CASE("wide beams reproduce the exhaustive ranking exactly") {
  const int vocab = 8, depth = 3;
  StepScorer scorer = random_scorer(vocab, 99);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest req;
  req.width = 512;  // >= vocab^depth: the beam cannot prune
  auto out = beam_search(req, scorer, depth, vocab, trie);
  auto oracle = enumerate_all(scorer, vocab, depth);
  REQUIRE(out.size() == oracle.size());
  for (size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].codes.codes == oracle[i].second);
    CHECK(std::fabs(out[i].log_prob - oracle[i].first) <= 1e-10);
  }
  // Sorted and unique.
  for (size_t i = 1; i < out.size(); ++i) {
    CHECK(out[i - 1].log_prob >= out[i].log_prob);
    CHECK(!(out[i - 1].codes == out[i].codes));
  }
}

TEST_CASE("narrower beams still match the top of the enumeration here") {
  // With width >= surviving prefixes at every step the beam is exact; at
  // vocab 4 / width 16 every prefix survives through depth 2.
  const int vocab = 4, depth = 3;
  StepScorer scorer = random_scorer(vocab, 7);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest req;
  req.width = 16;
  auto out = beam_search(req, scorer, depth, vocab, trie);
  auto oracle = enumerate_all(scorer, vocab, depth);
  REQUIRE(out.size() == 16);
  for (size_t i = 0; i < out.size(); ++i) CHECK(out[i].codes.codes == oracle[i].second);
}

TEST_CASE("constrained beam on a single-path trie returns exactly that path") {
  SemanticTrie trie(3);
  trie.insert(SemanticId{{2, 5, 1}}, 42);
  StepScorer scorer = random_scorer(8, 3);
  GenerationRequest req;
  req.width = 16;
  req.constrain_to_trie = true;
  auto out = beam_search(req, scorer, 3, 8, trie);
  REQUIRE(out.size() == 1);
  CHECK(out[0].codes.codes == std::vector<int>{2, 5, 1});
  CHECK(out[0].legal);
  REQUIRE(out[0].item_ids.size() == 1);
  CHECK(out[0].item_ids[0] == 42);
  CHECK(legality_rate(out) == 1.0);

  SemanticTrie empty(3);
  CHECK_THROWS(beam_search(req, scorer, 3, 8, empty));
}

TEST_CASE("constrained generation is always fully legal") {
  const int vocab = 6, depth = 3;
  SemanticTrie trie(depth);
  Rng rng(17);
  for (int i = 0; i < 12; ++i)
    trie.insert(SemanticId{{static_cast<int>(rng.randint(vocab)), static_cast<int>(rng.randint(vocab)),
                            static_cast<int>(rng.randint(vocab))}},
                i);
  StepScorer scorer = random_scorer(vocab, 23);
  GenerationRequest req;
  req.width = 8;
  req.constrain_to_trie = true;
  auto beams = beam_search(req, scorer, depth, vocab, trie);
  CHECK(legality_rate(beams) == 1.0);

  req.strategy = SearchStrategy::topk_topp;
  Rng srng(5);
  auto samples = sample_topk_topp(req, scorer, depth, vocab, trie, srng);
  (void)samples;  // sampling ignores the constraint flag; legality is free to vary
}

TEST_CASE("top_k=1 sampling is greedy and equals beam width 1") {
  const int vocab = 8, depth = 3;
  StepScorer scorer = random_scorer(vocab, 31);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest beam_req;
  beam_req.width = 1;
  auto beam = beam_search(beam_req, scorer, depth, vocab, trie);

  GenerationRequest samp;
  samp.strategy = SearchStrategy::topk_topp;
  samp.width = 4;
  samp.top_k = 1;
  Rng rng(9);
  auto sampled = sample_topk_topp(samp, scorer, depth, vocab, trie, rng);
  for (const auto& item : sampled) {
    CHECK(item.codes.codes == beam[0].codes.codes);
    CHECK(item.log_prob == doctest::Approx(beam[0].log_prob).epsilon(1e-12));
  }
}

TEST_CASE("temperature near zero converges to the greedy sequence") {
  const int vocab = 6, depth = 3;
  StepScorer scorer = random_scorer(vocab, 41);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest beam_req;
  beam_req.width = 1;
  auto greedy = beam_search(beam_req, scorer, depth, vocab, trie);

  GenerationRequest samp;
  samp.strategy = SearchStrategy::topk_topp;
  samp.width = 16;
  samp.temperature = 1e-6;
  Rng rng(11);
  auto sampled = sample_topk_topp(samp, scorer, depth, vocab, trie, rng);
  for (const auto& item : sampled) CHECK(item.codes.codes == greedy[0].codes.codes);
}

TEST_CASE("unrestricted sampling frequencies match the step distribution") {
  // Single-step vocabulary of 5; 100k draws, 3-sigma multinomial bounds.
  std::map<std::vector<int>, std::vector<double>> dist{{{}, {0.4, 0.25, 0.2, 0.1, 0.05}}};
  StepScorer scorer = table_scorer(dist);
  SemanticTrie trie = full_trie(5, 1);
  GenerationRequest req;
  req.strategy = SearchStrategy::topk_topp;
  req.width = 100000;
  req.top_k = 5;
  req.top_p = 1.0;
  Rng rng(13);
  auto samples = sample_topk_topp(req, scorer, 1, 5, trie, rng);
  std::vector<int64_t> counts(5, 0);
  for (const auto& s : samples) counts[static_cast<size_t>(s.codes.codes[0])]++;
  const auto& p = dist.at({});
  for (int i = 0; i < 5; ++i) {
    double expect = p[static_cast<size_t>(i)] * req.width;
    double sigma = std::sqrt(req.width * p[static_cast<size_t>(i)] * (1 - p[static_cast<size_t>(i)]));
    CHECK(std::fabs(counts[static_cast<size_t>(i)] - expect) <= 3 * sigma);
  }
}

TEST_CASE("top_k and top_p truncate the sampled support") {
  std::map<std::vector<int>, std::vector<double>> dist{{{}, {0.5, 0.3, 0.1, 0.06, 0.04}}};
  StepScorer scorer = table_scorer(dist);
  SemanticTrie trie = full_trie(5, 1);
  GenerationRequest req;
  req.strategy = SearchStrategy::topk_topp;
  req.width = 2000;
  req.top_k = 3;  // keeps {0,1,2}
  Rng rng(15);
  for (const auto& s : sample_topk_topp(req, scorer, 1, 5, trie, rng))
    CHECK(s.codes.codes[0] <= 2);

  req.top_k = 0;
  req.top_p = 0.8;  // 0.5+0.3 reaches the mass: keeps {0,1}
  for (const auto& s : sample_topk_topp(req, scorer, 1, 5, trie, rng))
    CHECK(s.codes.codes[0] <= 1);
}

TEST_CASE("sampling with a fixed seed reproduces bit-exactly") {
  const int vocab = 8, depth = 3;
  StepScorer scorer = random_scorer(vocab, 77);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest req;
  req.strategy = SearchStrategy::topk_topp;
  req.width = 64;
  req.top_k = 4;
  req.top_p = 0.9;
  req.temperature = 1.3;
  Rng a(21), b(21);
  auto ra = sample_topk_topp(req, scorer, depth, vocab, trie, a);
  auto rb = sample_topk_topp(req, scorer, depth, vocab, trie, b);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].codes.codes == rb[i].codes.codes);
    CHECK(ra[i].log_prob == rb[i].log_prob);
  }
}

TEST_CASE("returned log_prob equals an independent per-step log-softmax sum") {
  const int vocab = 7, depth = 3;
  StepScorer scorer = random_scorer(vocab, 55);
  SemanticTrie trie = full_trie(vocab, depth);
  GenerationRequest req;
  req.strategy = SearchStrategy::topk_topp;
  req.width = 32;
  req.temperature = 2.0;  // sampling tempered; log_prob still the model's
  Rng rng(3);
  auto samples = sample_topk_topp(req, scorer, depth, vocab, trie, rng);
  for (const auto& s : samples) {
    double want = 0;
    std::vector<int> prefix;
    for (int code : s.codes.codes) {
      Array logits = scorer(prefix);
      double mx = logits.at(0);
      for (int64_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits.at(i));
      double lse = 0;
      for (int64_t i = 0; i < logits.size(); ++i) lse += std::exp(logits.at(i) - mx);
      want += logits.at(code) - (mx + std::log(lse));
      prefix.push_back(code);
    }
    CHECK(std::fabs(s.log_prob - want) <= 1e-10);
    CHECK(s.log_prob <= 0.0);
  }
}

TEST_CASE("legality over a one-item trie matches the analytic rate") {
  // Uniform policy over 8^3 = 512 sequences; one legal leaf -> rate 1/512.
  const int vocab = 8, depth = 3;
  SemanticTrie trie(depth);
  trie.insert(SemanticId{{1, 2, 3}}, 0);
  StepScorer uniform = [vocab](std::span<const int>) { return Array::zeros({1, vocab}); };
  GenerationRequest req;
  req.strategy = SearchStrategy::topk_topp;
  req.width = 50000;
  Rng rng(29);
  auto samples = sample_topk_topp(req, uniform, depth, vocab, trie, rng);
  double rate = legality_rate(samples);
  double p = 1.0 / 512;
  double sigma = std::sqrt(p * (1 - p) / req.width);
  CHECK(std::fabs(rate - p) <= 3 * sigma);

  CHECK_THROWS(legality_rate({}));
}

TEST_CASE("pass@k is computed over prefixes and is monotone per user") {
  // Rewards keyed by the generated code; generation order fixed per user.
  const int vocab = 4, depth = 2;
  SemanticTrie trie = full_trie(vocab, depth);
  auto gen = [&](int user, int count) {
    StepScorer scorer = random_scorer(vocab, 100 + static_cast<uint64_t>(user));
    GenerationRequest req;
    req.width = count;
    return beam_search(req, scorer, depth, vocab, trie);
  };
  auto reward = [](int user, const GeneratedItem& item) {
    Rng rng(static_cast<uint64_t>(user) * 1000 + static_cast<uint64_t>(item.codes.codes[0] * 7 + item.codes.codes[1]));
    return rng.uniform();
  };
  auto res = pass_at_k_eval(6, {1, 2, 4, 8, 16}, gen, reward);
  REQUIRE(res.per_user.size() == 6);
  for (const auto& row : res.per_user)
    for (size_t k = 1; k < row.size(); ++k) CHECK(row[k] >= row[k - 1] - 1e-15);

  // K=1 equals the greedy sequence's reward.
  for (int u = 0; u < 6; ++u) {
    auto greedy = gen(u, 1);
    CHECK(res.per_user[static_cast<size_t>(u)][0] ==
          doctest::Approx(reward(u, greedy[0])).epsilon(1e-12));
  }

  CHECK_THROWS(pass_at_k_eval(2, {4, 2}, gen, reward));  // K must ascend
}
