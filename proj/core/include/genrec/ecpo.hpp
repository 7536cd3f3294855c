#pragma once

#include <map>
#include <optional>
#include <vector>

#include "genrec/generation.hpp"
#include "genrec/reward.hpp"
#include "genrec/tokenizer.hpp"

namespace genrec {

// Group advantages: (r - mean) / population std; a group with vanishing
// spread (std < 1e-8) contributes all-zero advantages. Needs >= 2 rewards.
std::vector<double> normalize_advantages(const std::vector<double>& rewards);

// Early-clipped old-policy probability:
// max(sg(pi_current)/(1+eps+delta), pi_old). The first branch is a plain
// number, so no gradient flows through it.
double early_clipped_old(double pi_current, double pi_old, double eps, double delta);

struct EcpoSample {
  Var log_prob;       // log pi_theta(o|u) on the live tape
  double pi_old = 0;  // sampling policy probability
  double advantage = 0;
};

struct EcpoTerms {
  Var objective;               // mean over samples, to be maximized
  double clip_fraction = 0;    // samples with the ratio outside [1-eps,1+eps]
  double max_ratio = 0;
};

// Mean over the group of min(ratio*A, clip(ratio,1-eps,1+eps)*A) with
// ratio = pi_theta / pi'_old. Asserts ratio <= 1+eps+delta on every sample.
EcpoTerms ecpo_objective(Tape& tape, const std::vector<EcpoSample>& samples, double eps,
                         double delta);

enum class ReferenceMode { pretrained, current_policy };

struct PostTrainConfig {
  double eps = 0.2;
  double delta = 0.1;
  int group_size = 32;  // G; the suggested default is 4x the serving K
  int format_k = 5;
  FormatMode format_mode = FormatMode::random;
  bool format_enabled = true;
  bool preference_enabled = true;
  ReferenceMode reference_mode = ReferenceMode::current_policy;
  SearchStrategy strategy = SearchStrategy::beam;
  bool constrain_generation = false;  // unconstrained reproduces the squeezing effect
  double temperature = 1.0;
  int top_k = 0;
  double top_p = 1.0;
  int sync_period = 50;           // reference refresh cadence (steps)
  double rl_user_fraction = 0.5;  // share of the step's users that get RL samples
  bool sir_enabled = false;
  double sir_f = 0.2;
  double sir_alpha = 0.5;
  double rsft_weight = 1.0;
  double rl_weight = 1.0;
  // -1 scores with the fused preference model; otherwise the index of a
  // single objective tower (vtr-only reward ablations).
  int reward_objective = -1;
  double lr_dense = 8e-4;   // annealed fine-tuning rates, toy-scaled
  double lr_sparse = 1e-3;
  int batch_sessions = 8;
  uint64_t seed = 77;
};

// One scored RL sample, for the reward audit log.
struct AuditRow {
  int user = 0;
  SemanticId codes;
  double reward = 0;           // r (preference)
  double adjusted_reward = 0;  // r' after industrial adjustment
  bool legal = false;
  bool viral = false;
};

struct StepMetrics {
  double ntp_loss = 0;
  double ecpo_objective = 0;
  double format_objective = 0;
  double mean_reward = 0;       // adjusted rewards over scored samples
  double legality = 0;          // over all generated samples this step
  double clip_fraction = 0;
  double viral_exposure = 0;    // share of viral items among legal samples
  double load_max_over_mean = 0;  // expert balance, 0 when dense
  int rl_users = 0;
  int rl_samples = 0;
};

// Streaming next-token-prediction trainer over world sessions; shared by
// pre-training and the RSFT half of post-training.
class SessionStream {
 public:
  SessionStream(const World& world, const std::vector<SemanticId>& corpus_codes,
                const PolicyConfig& cfg, uint64_t seed);

  struct Sample {
    int user = 0;
    int history_len = 0;  // events of this user preceding the target
    SemanticId target;
  };
  // Simulates n_sessions fresh sessions, appends them to the per-user
  // histories, and returns training samples (from RSFT-kept sessions when
  // rsft is set).
  std::vector<Sample> next_batch(int n_sessions, bool rsft);

  UserContext context_of(const Sample& s) const;
  UserContext current_context(int user) const;
  const World& world() const { return world_; }

 private:
  const World& world_;
  const std::vector<SemanticId>& codes_;
  PolicyConfig cfg_;
  Rng rng_;
  std::map<int, std::vector<Interaction>> history_;
  int max_history_;
  double clock_ = 0;
};

struct PretrainResult {
  std::vector<double> loss_curve;  // per step
  std::vector<double> load_max_over_mean;  // per step, MoE runs only
};

// Next-token-prediction pre-training on the logging-policy stream.
PretrainResult pretrain(PolicyModel& policy, SessionStream& stream, int steps, int batch_sessions,
                        double lr_dense, double lr_sparse,
                        const std::function<void(int, double)>& on_step = nullptr);

// Joint RSFT + RL stepping per the post-training recipe: filter the fresh
// sessions by median play duration for the NTP term, sample groups from the
// frozen reference policy for the ECPO terms, and take one combined step.
class PostTrainer {
 public:
  PostTrainer(PolicyModel& policy, SessionStream& stream, const CodebookStack& stack,
              const PScoreModel& reward, const PostTrainConfig& cfg);

  StepMetrics step();
  int steps_done() const { return steps_; }
  // When set, every generated RL sample is appended here.
  void set_audit_sink(std::vector<AuditRow>* sink) { audit_ = sink; }
  const PolicyModel& reference() const { return reference_; }

  // Preference rewards (P-Score after SIR) for one generated group; exposed
  // for evaluation code. Illegal samples get no reward entry.
  RewardBundle score_group(int user, const std::vector<GeneratedItem>& group,
                           std::vector<int>* scored_indices, Rng& rng) const;

 private:
  void maybe_sync();

  PolicyModel& policy_;
  SessionStream& stream_;
  const CodebookStack& stack_;
  const PScoreModel& reward_;
  PostTrainConfig cfg_;
  PolicyModel reference_;
  Adam adam_;
  Rng rng_;
  int steps_ = 0;
  std::vector<AuditRow>* audit_ = nullptr;
};

}  // namespace genrec
