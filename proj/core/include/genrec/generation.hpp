#pragma once

#include <functional>
#include <span>
#include <vector>

#include "genrec/policy.hpp"
#include "genrec/trie.hpp"

namespace genrec {

// Logits over the next position's vocabulary given a code prefix.
using StepScorer = std::function<Array(std::span<const int> prefix)>;

enum class SearchStrategy { beam, topk_topp };

struct GenerationRequest {
  SearchStrategy strategy = SearchStrategy::beam;
  int width = 8;  // beam width, or sample count for top-k/top-p
  bool constrain_to_trie = false;
  double temperature = 1.0;
  int top_k = 0;      // 0 means: full vocabulary
  double top_p = 1.0; // in (0, 1]
};

void validate_request(const GenerationRequest& req);

struct GeneratedItem {
  SemanticId codes;
  double log_prob = 0;  // model log-probability of the whole sequence
  bool legal = false;
  std::vector<int64_t> item_ids;  // resolved leaf items (several on collision)
};

// Length-L beam over the per-position vocabularies. Output is sorted by
// (log_prob desc, codes asc) and unique. With constrain_to_trie, expansions
// stay inside the prefix tree, so every result is legal.
std::vector<GeneratedItem> beam_search(const GenerationRequest& req, const StepScorer& scorer,
                                       int depth, int vocab, const SemanticTrie& trie);

// width independent samples; per step the distribution is tempered, truncated
// to top_k, then to the smallest top_p mass prefix, renormalized, sampled.
// log_prob still records the untruncated model distribution.
std::vector<GeneratedItem> sample_topk_topp(const GenerationRequest& req,
                                            const StepScorer& scorer, int depth, int vocab,
                                            const SemanticTrie& trie, Rng& rng);

// Dispatch on req.strategy (rng unused for beam).
std::vector<GeneratedItem> generate(const GenerationRequest& req, const StepScorer& scorer,
                                    int depth, int vocab, const SemanticTrie& trie, Rng& rng);

// Fraction of samples that map to real items. Empty input is an error.
double legality_rate(const std::vector<GeneratedItem>& samples);

// Scorer backed by a policy and a fixed context encoding.
StepScorer policy_scorer(const PolicyModel& policy, const Array& z_enc);

struct PassAtKResult {
  std::vector<int> k_values;
  // best-of-prefix-K reward per user, one row per user, one column per K.
  std::vector<std::vector<double>> per_user;
  std::vector<double> mean_best;  // averaged over users, per K
};

// Generates max(K) items once per user and evaluates best-of-prefix-K under
// the reward oracle. K values must be ascending.
PassAtKResult pass_at_k_eval(
    int n_users, const std::vector<int>& k_values,
    const std::function<std::vector<GeneratedItem>(int user, int count)>& generate_for_user,
    const std::function<double(int user, const GeneratedItem&)>& reward);

}  // namespace genrec
