#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "genrec/array.hpp"
#include "genrec/rng.hpp"

namespace genrec {

// Engagement objectives, in label-bit order.
inline constexpr int kNumObjectives = 5;
inline constexpr const char* kObjectiveNames[kNumObjectives] = {"lvtr", "vtr", "ltr", "wtr",
                                                                "cmtr"};
int objective_index(const std::string& name);

struct WorldConfig {
  int n_users = 256;
  int n_items = 1024;
  int n_authors = 64;
  int latent_dim = 16;
  int n_item_clusters = 8;
  int n_user_clusters = 4;
  double cluster_spread = 0.25;  // within-cluster stddev relative to centers

  int content_tokens = 8;     // raw content rows per item
  int content_dim = 32;       // content embedding width
  double content_noise = 0.05;
  double obs_noise = 0.1;     // noise on observable user/item features

  double viral_fraction = 0.2;

  // Engagement link per objective: sigmoid(scale * <u, i * w_o> + bias).
  std::array<double, kNumObjectives> objective_scale{3.0, 3.0, 3.0, 3.0, 3.0};
  std::array<double, kNumObjectives> objective_bias{-1.0, 0.5, -2.5, -3.0, -2.0};
  std::array<double, kNumObjectives> composite_weights{0.3, 0.3, 0.15, 0.1, 0.15};

  double min_duration = 5.0, max_duration = 120.0;
  int session_len_min = 4, session_len_max = 12;
  double logging_temperature = 0.25;  // exposure softmax over true vtr

  uint64_t seed = 1;
};

struct ObjectiveLabels {
  uint32_t bits = 0;
  bool get(int o) const { return (bits >> o) & 1u; }
  void set(int o, bool v) {
    if (v)
      bits |= (1u << o);
    else
      bits &= ~(1u << o);
  }
};

struct Interaction {
  int user = 0;
  int64_t item = 0;
  int session = 0;
  double ts = 0;
  double playtime = 0;
  double duration = 0;
  ObjectiveLabels labels;
};

struct InteractionLog {
  std::vector<Interaction> events;  // time-ordered ascending
};

// Synthetic user/item universe with exact ground-truth engagement
// probabilities. Latents live on mixture-of-cluster structure so K-means
// style tokenization has something to recover.
struct World {
  WorldConfig cfg;
  Array user_latent;  // (U, d)
  Array item_latent;  // (I, d)
  Array user_obs;     // (U, d) observables: latent + noise
  Array item_obs;     // (I, d)
  Array item_content; // (I, content_tokens * content_dim)
  Array obj_weight;   // (kNumObjectives, d)
  std::vector<int> item_author;
  std::vector<double> item_tag;       // numeric tag affinity in [0,1]
  std::vector<double> item_duration;  // seconds
  std::vector<uint8_t> item_viral;
  std::vector<int> item_cluster;      // generative cluster of each item

  double true_prob(int user, int64_t item, int objective) const;
  std::array<double, kNumObjectives> true_xtr(int user, int64_t item) const;
  // Configured weighted blend of the true xtr vector (the world's ideal
  // preference score).
  double composite_reward(int user, int64_t item) const;

  // (content_tokens, content_dim) view of one item's raw content rows.
  Array content_tokens_of(int64_t item) const;

  int64_t viral_count() const;
};

World generate_world(const WorldConfig& cfg);

// Sessions under the logging policy: exposure sampled from a softmax over
// true vtr, labels from the true probabilities, playtime from a Beta draw
// shifted by the lvtr label.
InteractionLog simulate_sessions(const World& world, int n_sessions, Rng& rng);

// Exposure from an arbitrary item sampler (e.g. a trained policy);
// labels/playtime still come from the world's ground truth.
InteractionLog simulate_sessions_with(
    const World& world, int n_sessions, Rng& rng,
    const std::function<int64_t(int user, Rng& rng)>& pick_item);

// Keeps the sessions above the median by mean playtime; drops floor(n/2)
// sessions from a log with n sessions.
InteractionLog rsft_filter(const InteractionLog& log);

// Events grouped by session id, preserving order.
std::vector<std::vector<const Interaction*>> group_sessions(const InteractionLog& log);

double beta_sample(double a, double b, Rng& rng);

}  // namespace genrec
