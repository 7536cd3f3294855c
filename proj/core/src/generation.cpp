#include "genrec/generation.hpp"

#include <algorithm>
#include <cmath>

namespace genrec {

namespace {

std::vector<double> log_softmax(const Array& logits) {
  int n = static_cast<int>(logits.size());
  double mx = logits.at(0);
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits.at(i));
  double denom = 0;
  for (int i = 0; i < n; ++i) denom += std::exp(logits.at(i) - mx);
  double lse = mx + std::log(denom);
  std::vector<double> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = logits.at(i) - lse;
  return out;
}

GeneratedItem finish(SemanticId codes, double log_prob, const SemanticTrie& trie) {
  GeneratedItem item;
  item.codes = std::move(codes);
  item.log_prob = log_prob;
  const auto* ids = trie.lookup(item.codes.codes);
  item.legal = ids != nullptr;
  if (ids) item.item_ids = *ids;
  return item;
}

}  // namespace

void validate_request(const GenerationRequest& req) {
  GENREC_REQUIRE(req.width >= 1, "generation width must be >= 1");
  GENREC_REQUIRE(req.top_p > 0 && req.top_p <= 1.0, "top_p must lie in (0,1]");
  GENREC_REQUIRE(req.top_k >= 0, "top_k must be >= 1 (or 0 for the full vocabulary)");
  GENREC_REQUIRE(req.temperature > 0, "temperature must be positive");
}

std::vector<GeneratedItem> beam_search(const GenerationRequest& req, const StepScorer& scorer,
                                       int depth, int vocab, const SemanticTrie& trie) {
  validate_request(req);
  if (req.constrain_to_trie)
    GENREC_REQUIRE(trie.item_count() > 0, "constrained beam search over an empty trie");

  struct Beam {
    std::vector<int> codes;
    double log_prob = 0;
  };
  std::vector<Beam> beams{{{}, 0.0}};
  for (int step = 0; step < depth; ++step) {
    std::vector<Beam> candidates;
    for (const auto& beam : beams) {
      Array logits = scorer(beam.codes);
      GENREC_REQUIRE(static_cast<int64_t>(vocab) == logits.size(), "scorer vocabulary mismatch");
      std::vector<double> lsm = log_softmax(logits);
      if (req.constrain_to_trie) {
        for (int code : trie.children_of(beam.codes)) {
          Beam next = beam;
          next.codes.push_back(code);
          next.log_prob += lsm[static_cast<size_t>(code)];
          candidates.push_back(std::move(next));
        }
      } else {
        for (int code = 0; code < vocab; ++code) {
          Beam next = beam;
          next.codes.push_back(code);
          next.log_prob += lsm[static_cast<size_t>(code)];
          candidates.push_back(std::move(next));
        }
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Beam& a, const Beam& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.codes < b.codes;
    });
    if (static_cast<int>(candidates.size()) > req.width) candidates.resize(static_cast<size_t>(req.width));
    beams = std::move(candidates);
    if (beams.empty()) break;  // constrained search exhausted the trie
  }

  std::vector<GeneratedItem> out;
  out.reserve(beams.size());
  for (auto& beam : beams)
    out.push_back(finish(SemanticId{std::move(beam.codes)}, beam.log_prob, trie));
  return out;
}

std::vector<GeneratedItem> sample_topk_topp(const GenerationRequest& req,
                                            const StepScorer& scorer, int depth, int vocab,
                                            const SemanticTrie& trie, Rng& rng) {
  validate_request(req);
  std::vector<GeneratedItem> out;
  out.reserve(static_cast<size_t>(req.width));
  for (int s = 0; s < req.width; ++s) {
    std::vector<int> codes;
    double log_prob = 0;
    for (int step = 0; step < depth; ++step) {
      Array logits = scorer(codes);
      GENREC_REQUIRE(static_cast<int64_t>(vocab) == logits.size(), "scorer vocabulary mismatch");
      std::vector<double> model_lsm = log_softmax(logits);

      // Tempered distribution for sampling.
      Array tempered({1, vocab});
      for (int i = 0; i < vocab; ++i) tempered.at(0, i) = logits.at(i) / req.temperature;
      std::vector<double> lsm = log_softmax(tempered);
      std::vector<std::pair<double, int>> probs;
      probs.reserve(static_cast<size_t>(vocab));
      for (int i = 0; i < vocab; ++i) probs.push_back({std::exp(lsm[static_cast<size_t>(i)]), i});
      std::stable_sort(probs.begin(), probs.end(),
                       [](const auto& a, const auto& b) { return a.first > b.first; });

      int keep = req.top_k > 0 ? std::min(req.top_k, vocab) : vocab;
      probs.resize(static_cast<size_t>(keep));
      double mass = 0;
      for (const auto& [p, _] : probs) mass += p;
      // Smallest prefix reaching top_p of the renormalized mass.
      double target = req.top_p * mass;
      double acc = 0;
      size_t cut = probs.size();
      for (size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i].first;
        if (acc >= target - 1e-15) {
          cut = i + 1;
          break;
        }
      }
      probs.resize(cut);
      double total = 0;
      for (const auto& [p, _] : probs) total += p;
      double u = rng.uniform() * total;
      double run = 0;
      int picked = probs.back().second;
      for (const auto& [p, idx] : probs) {
        run += p;
        if (run >= u) {
          picked = idx;
          break;
        }
      }
      codes.push_back(picked);
      log_prob += model_lsm[static_cast<size_t>(picked)];
    }
    out.push_back(finish(SemanticId{std::move(codes)}, log_prob, trie));
  }
  return out;
}

std::vector<GeneratedItem> generate(const GenerationRequest& req, const StepScorer& scorer,
                                    int depth, int vocab, const SemanticTrie& trie, Rng& rng) {
  if (req.strategy == SearchStrategy::beam) return beam_search(req, scorer, depth, vocab, trie);
  return sample_topk_topp(req, scorer, depth, vocab, trie, rng);
}

double legality_rate(const std::vector<GeneratedItem>& samples) {
  GENREC_REQUIRE(!samples.empty(), "legality_rate of an empty sample set is undefined");
  int64_t legal = 0;
  for (const auto& s : samples) legal += s.legal ? 1 : 0;
  return static_cast<double>(legal) / static_cast<double>(samples.size());
}

StepScorer policy_scorer(const PolicyModel& policy, const Array& z_enc) {
  return [&policy, z_enc](std::span<const int> prefix) {
    return policy.next_logits_eval(z_enc, prefix);
  };
}

PassAtKResult pass_at_k_eval(
    int n_users, const std::vector<int>& k_values,
    const std::function<std::vector<GeneratedItem>(int user, int count)>& generate_for_user,
    const std::function<double(int user, const GeneratedItem&)>& reward) {
  GENREC_REQUIRE(!k_values.empty(), "pass@k needs at least one K");
  for (size_t i = 1; i < k_values.size(); ++i)
    GENREC_REQUIRE(k_values[i] > k_values[i - 1], "K values must be ascending");
  PassAtKResult res;
  res.k_values = k_values;
  int max_k = k_values.back();
  res.mean_best.assign(k_values.size(), 0.0);
  for (int u = 0; u < n_users; ++u) {
    std::vector<GeneratedItem> items = generate_for_user(u, max_k);
    double best = -1e300;
    size_t ki = 0;
    std::vector<double> bests(k_values.size(), 0.0);
    for (int i = 0; i < max_k; ++i) {
      if (i < static_cast<int>(items.size()))
        best = std::max(best, reward(u, items[static_cast<size_t>(i)]));
      while (ki < k_values.size() && i + 1 == k_values[ki]) {
        bests[ki] = best;
        ++ki;
      }
    }
    for (; ki < k_values.size(); ++ki) bests[ki] = best;
    for (size_t i = 0; i < k_values.size(); ++i) res.mean_best[i] += bests[i] / n_users;
    res.per_user.push_back(std::move(bests));
  }
  return res;
}

}  // namespace genrec
