#pragma once

#include <string>
#include <vector>

#include "genrec/generation.hpp"
#include "genrec/nn.hpp"
#include "genrec/world.hpp"

namespace genrec {

struct PScoreConfig {
  int user_dim = 16;  // observable feature widths
  int item_dim = 16;
  int encoder_hidden = 32;  // shared user/item encoder output width
  int tower_hidden = 16;
  int n_objectives = kNumObjectives;
  int steps = 1200;
  int batch = 64;
  double lr = 2e-3;
  double holdout_fraction = 0.2;
  uint64_t seed = 31;
};

// Multi-tower preference model: shared user/item encoders, one tower per
// engagement objective with a BCE auxiliary head, and a fusion head over the
// tower hidden states plus both encodings. The fusion output in (0,1) is the
// preference score used as the RL reward.
class PScoreModel {
 public:
  explicit PScoreModel(const PScoreConfig& cfg);

  struct Forward {
    std::vector<Var> tower_logits;  // (B,1) each
    Var fusion_logit;               // (B,1)
  };
  Forward forward(ParamSession& s, Var user_rows, Var item_rows) const;

  // Sum of per-tower BCE against each objective label plus the fusion head's
  // BCE averaged over all objective labels. labels is (B, n_objectives).
  Var training_loss(ParamSession& s, Var user_rows, Var item_rows, const Array& labels) const;

  // Deterministic preference score in (0,1).
  double pscore(const Array& user_row, const Array& item_row) const;
  // Auxiliary tower probability for one objective.
  double tower_probability(const Array& user_row, const Array& item_row, int objective) const;

  const PScoreConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }

  void save(const std::string& path) const;
  static PScoreModel load(const std::string& path);

 private:
  PScoreConfig cfg_;
  ParamStore params_;
  MlpParams user_enc_, item_enc_;
  struct Tower {
    MlpParams hidden;   // 2*encoder_hidden -> tower_hidden
    LinearParams head;  // tower_hidden -> 1
  };
  std::vector<Tower> towers_;
  MlpParams fusion_hidden_;
  LinearParams fusion_head_;
};

struct PScoreTrainReport {
  std::vector<double> loss_curve;
  double holdout_auc_vtr = 0;
};

// Fits the model on (user_obs, item_obs, labels) triples from the log.
// Events are split chronologically; the tail holdout_fraction is held out.
PScoreModel train_pscore(const World& world, const InteractionLog& log, const PScoreConfig& cfg,
                         PScoreTrainReport* report = nullptr);

// Area under the ROC curve; scores paired with binary labels.
double auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels);

// ---- format reward -----------------------------------------------------------

enum class FormatMode { topk, random };

struct FormatAdvantage {
  int index = 0;  // into the sample group
  double advantage = 1.0;
};

// Selects K samples (top-K by log_prob, or uniformly at random); selected
// legal samples get advantage 1, everything else is excluded. Never emits a
// negative advantage.
std::vector<FormatAdvantage> format_advantages(const std::vector<GeneratedItem>& group,
                                               FormatMode mode, int k, Rng& rng);

// ---- specific industrial reward -----------------------------------------------

// Per-group rewards: the original preference scores r, and the
// industrial-adjusted r' that training consumes.
struct RewardBundle {
  std::vector<double> preference;  // r_i
  std::vector<uint8_t> viral;
  std::vector<double> adjusted;  // r_i', initialized to preference
};

RewardBundle make_reward_bundle(std::vector<double> preference, std::vector<uint8_t> viral);

// Recomputes adjusted from preference: viral rewards shrink by alpha iff the
// measured viral exposure proportion exceeds f. Idempotent for a fixed
// measurement, never increases any reward. Requires alpha in (0,1).
void apply_sir(RewardBundle& bundle, double f, double alpha, double exposure_proportion);

}  // namespace genrec
