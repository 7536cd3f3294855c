#include "genrec/ecpo.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace genrec {

std::vector<double> normalize_advantages(const std::vector<double>& rewards) {
  int g = static_cast<int>(rewards.size());
  GENREC_REQUIRE(g >= 2, "advantage normalization needs a group of at least 2");
  double mean = 0;
  for (double r : rewards) mean += r / g;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean) / g;  // population std
  double std_dev = std::sqrt(var);
  std::vector<double> out(rewards.size(), 0.0);
  if (std_dev < 1e-8) return out;  // degenerate group: no preference signal
  for (size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std_dev;
  return out;
}

double early_clipped_old(double pi_current, double pi_old, double eps, double delta) {
  GENREC_REQUIRE(delta > 0, "early clip: delta must be positive");
  GENREC_REQUIRE(pi_current > 0 && pi_current <= 1 && pi_old > 0 && pi_old <= 1,
          "early clip: probabilities must lie in (0,1]");
  return std::max(pi_current / (1.0 + eps + delta), pi_old);
}

EcpoTerms ecpo_objective(Tape& tape, const std::vector<EcpoSample>& samples, double eps,
                         double delta) {
  GENREC_REQUIRE(!samples.empty(), "ecpo objective over an empty sample set");
  std::vector<Var> terms;
  int clipped = 0;
  double max_ratio = 0;
  for (const auto& sample : samples) {
    double pi_current = std::max(std::exp(sample.log_prob.value().item()), 1e-300);
    double pi_old_prime = early_clipped_old(pi_current, sample.pi_old, eps, delta);
    // ratio = pi_theta / pi'_old with a constant denominator.
    Var ratio = exp_op(add_scalar(sample.log_prob, -std::log(pi_old_prime)));
    double r = ratio.value().item();
    GENREC_REQUIRE(r <= 1.0 + eps + delta + 1e-9, "ecpo ratio bound violated");
    max_ratio = std::max(max_ratio, r);
    if (r < 1.0 - eps || r > 1.0 + eps) ++clipped;
    Var unclipped = mul_scalar(ratio, sample.advantage);
    Var clipped_term = mul_scalar(clamp(ratio, 1.0 - eps, 1.0 + eps), sample.advantage);
    terms.push_back(minimum(unclipped, clipped_term));
  }
  EcpoTerms out;
  out.objective = mean(concat_rows(terms));
  out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(samples.size());
  out.max_ratio = max_ratio;
  return out;
}

// ---- session stream --------------------------------------------------------------

SessionStream::SessionStream(const World& world, const std::vector<SemanticId>& corpus_codes,
                             const PolicyConfig& cfg, uint64_t seed)
    : world_(world), codes_(corpus_codes), cfg_(cfg), rng_(seed) {
  GENREC_REQUIRE(static_cast<int>(corpus_codes.size()) == world.cfg.n_items,
          "session stream needs codes for the whole corpus");
  max_history_ = std::max(4 * cfg.lifelong_len, 64);
}

std::vector<SessionStream::Sample> SessionStream::next_batch(int n_sessions, bool rsft) {
  InteractionLog log = simulate_sessions(world_, n_sessions, rng_);
  // Each simulation starts its clock at zero; shift onto the stream's clock
  // so per-user histories stay time-ordered across batches.
  for (auto& ev : log.events) ev.ts += clock_;
  if (!log.events.empty()) clock_ = log.events.back().ts + 1.0;
  InteractionLog kept = rsft ? rsft_filter(log) : log;
  std::set<std::pair<int, double>> kept_keys;
  for (const auto& ev : kept.events) kept_keys.insert({ev.user, ev.ts});

  std::vector<Sample> samples;
  for (const auto& ev : log.events) {
    auto& hist = history_[ev.user];
    if (!hist.empty() && kept_keys.count({ev.user, ev.ts})) {
      Sample s;
      s.user = ev.user;
      s.history_len = static_cast<int>(hist.size());
      s.target = codes_[static_cast<size_t>(ev.item)];
      samples.push_back(std::move(s));
    }
    hist.push_back(ev);
    if (static_cast<int>(hist.size()) > max_history_)
      hist.erase(hist.begin(), hist.end() - max_history_);
  }
  return samples;
}

UserContext SessionStream::context_of(const Sample& s) const {
  const auto& hist = history_.at(s.user);
  int len = std::min<int>(s.history_len, static_cast<int>(hist.size()));
  return build_user_context(world_, s.user, std::span<const Interaction>(hist.data(), len), cfg_,
                            cfg_.use_sid_history ? &codes_ : nullptr);
}

UserContext SessionStream::current_context(int user) const {
  auto it = history_.find(user);
  if (it == history_.end() || it->second.empty())
    return build_user_context(world_, user, {}, cfg_, cfg_.use_sid_history ? &codes_ : nullptr);
  return build_user_context(world_, user, it->second, cfg_,
                            cfg_.use_sid_history ? &codes_ : nullptr);
}

// ---- pre-training ------------------------------------------------------------------

PretrainResult pretrain(PolicyModel& policy, SessionStream& stream, int steps, int batch_sessions,
                        double lr_dense, double lr_sparse,
                        const std::function<void(int, double)>& on_step) {
  Adam adam(AdamConfig{.lr = lr_dense, .lr_sparse = lr_sparse});
  PretrainResult result;
  for (int step = 0; step < steps; ++step) {
    auto samples = stream.next_batch(batch_sessions, false);
    if (samples.empty()) {
      result.loss_curve.push_back(result.loss_curve.empty() ? 0 : result.loss_curve.back());
      continue;
    }
    Tape tape;
    ParamSession s(tape, policy.params());
    MoeTrace trace;
    std::vector<Var> losses;
    for (const auto& sample : samples) {
      UserContext ctx = stream.context_of(sample);
      Var z = policy.encode(s, ctx);
      losses.push_back(policy.ntp_loss(s, z, sample.target, &trace));
    }
    Var loss = mean(concat_rows(losses));
    result.loss_curve.push_back(loss.value().item());
    tape.backward(loss);
    adam.step(s);
    if (policy.n_moe_layers() > 0) {
      policy.apply_balancing(trace);
      auto totals = trace.totals();
      double mx = 0, mean_load = 0;
      for (int64_t l : totals) {
        mx = std::max(mx, static_cast<double>(l));
        mean_load += static_cast<double>(l) / static_cast<double>(totals.size());
      }
      result.load_max_over_mean.push_back(mean_load > 0 ? mx / mean_load : 0);
    }
    if (on_step) on_step(step, result.loss_curve.back());
  }
  return result;
}

// ---- post-training -----------------------------------------------------------------

PostTrainer::PostTrainer(PolicyModel& policy, SessionStream& stream, const CodebookStack& stack,
                         const PScoreModel& reward, const PostTrainConfig& cfg)
    : policy_(policy),
      stream_(stream),
      stack_(stack),
      reward_(reward),
      cfg_(cfg),
      reference_(policy),
      adam_(AdamConfig{.lr = cfg.lr_dense, .lr_sparse = cfg.lr_sparse}),
      rng_(cfg.seed) {}

void PostTrainer::maybe_sync() {
  if (cfg_.reference_mode != ReferenceMode::current_policy) return;
  if (steps_ % cfg_.sync_period != 0) return;
  // Atomic swap of the frozen sampling copy.
  reference_ = policy_;
}

RewardBundle PostTrainer::score_group(int user, const std::vector<GeneratedItem>& group,
                                      std::vector<int>* scored_indices, Rng& rng) const {
  std::vector<double> rewards;
  std::vector<uint8_t> viral;
  if (scored_indices) scored_indices->clear();
  Array user_row({1, stream_.world().cfg.latent_dim});
  for (int j = 0; j < user_row.cols(); ++j) user_row.at(0, j) = stream_.world().user_obs.at(user, j);
  for (size_t i = 0; i < group.size(); ++i) {
    if (!group[i].legal) continue;  // nothing to score without an item
    // Multi-item leaves resolve to one uniformly chosen item.
    const auto& ids = group[i].item_ids;
    int64_t item = ids[static_cast<size_t>(rng.randint(static_cast<int64_t>(ids.size())))];
    Array item_row({1, stream_.world().cfg.latent_dim});
    for (int j = 0; j < item_row.cols(); ++j)
      item_row.at(0, j) = stream_.world().item_obs.at(static_cast<int>(item), j);
    rewards.push_back(cfg_.reward_objective < 0
                          ? reward_.pscore(user_row, item_row)
                          : reward_.tower_probability(user_row, item_row, cfg_.reward_objective));
    viral.push_back(stream_.world().item_viral[static_cast<size_t>(item)]);
    if (scored_indices) scored_indices->push_back(static_cast<int>(i));
  }
  return make_reward_bundle(std::move(rewards), std::move(viral));
}

StepMetrics PostTrainer::step() {
  maybe_sync();
  StepMetrics metrics;

  Tape tape;
  ParamSession s(tape, policy_.params());
  MoeTrace trace;

  // (a) RSFT: sessions below the median play duration are dropped.
  auto samples = stream_.next_batch(cfg_.batch_sessions, true);
  std::vector<Var> ntp_terms;
  std::set<int> step_users;
  for (const auto& sample : samples) {
    step_users.insert(sample.user);
    UserContext ctx = stream_.context_of(sample);
    Var z = policy_.encode(s, ctx);
    ntp_terms.push_back(policy_.ntp_loss(s, z, sample.target, &trace));
  }
  Var total{};
  if (!ntp_terms.empty()) {
    Var ntp = mean(concat_rows(ntp_terms));
    metrics.ntp_loss = ntp.value().item();
    total = mul_scalar(ntp, cfg_.rsft_weight);
  }

  // (b) RL on a random share of this step's users.
  std::vector<int> rl_users;
  for (int u : step_users)
    if (rng_.uniform() < cfg_.rl_user_fraction) rl_users.push_back(u);
  metrics.rl_users = static_cast<int>(rl_users.size());

  GenerationRequest req;
  req.strategy = cfg_.strategy;
  req.width = cfg_.group_size;
  req.constrain_to_trie = cfg_.constrain_generation;
  req.temperature = cfg_.temperature;
  req.top_k = cfg_.top_k;
  req.top_p = cfg_.top_p;

  struct GroupData {
    int user;
    UserContext ctx;
    std::vector<GeneratedItem> items;
  };
  std::vector<GroupData> groups;
  int64_t legal_count = 0, sample_count = 0, viral_legal = 0;
  for (int user : rl_users) {
    GroupData g;
    g.user = user;
    g.ctx = stream_.current_context(user);
    Array z_ref = reference_.encode_eval(g.ctx);
    Rng gen_rng = rng_.split(0x5eed + static_cast<uint64_t>(user) + 31ULL * steps_);
    g.items = generate(req, policy_scorer(reference_, z_ref), policy_.config().n_code_layers,
                       policy_.config().codebook_size, stack_.trie, gen_rng);
    sample_count += static_cast<int64_t>(g.items.size());
    for (const auto& item : g.items) {
      if (!item.legal) continue;
      ++legal_count;
      // Exposure measured over this step's generated legal items.
      const auto& ids = item.item_ids;
      bool viral = false;
      for (int64_t id : ids) viral = viral || stream_.world().item_viral[static_cast<size_t>(id)];
      viral_legal += viral ? 1 : 0;
    }
    groups.push_back(std::move(g));
  }
  metrics.rl_samples = static_cast<int>(sample_count);
  metrics.legality = sample_count > 0 ? static_cast<double>(legal_count) / sample_count : 0;
  metrics.viral_exposure = legal_count > 0 ? static_cast<double>(viral_legal) / legal_count : 0;

  std::vector<EcpoSample> preference_samples, format_samples;
  double reward_sum = 0;
  int64_t reward_count = 0;
  for (auto& g : groups) {
    // Current-policy log-probs for the whole group, one encode per user.
    Var z = policy_.encode(s, g.ctx);
    std::vector<Var> log_probs;
    for (const auto& item : g.items)
      log_probs.push_back(policy_.sequence_log_prob(s, z, item.codes, &trace));

    if (cfg_.preference_enabled) {
      std::vector<int> scored;
      Rng pick_rng = rng_.split(0xab1e + static_cast<uint64_t>(g.user));
      RewardBundle bundle = score_group(g.user, g.items, &scored, pick_rng);
      if (cfg_.sir_enabled) apply_sir(bundle, cfg_.sir_f, cfg_.sir_alpha, metrics.viral_exposure);
      for (double r : bundle.adjusted) {
        reward_sum += r;
        ++reward_count;
      }
      if (audit_) {
        size_t scored_pos = 0;
        for (size_t i = 0; i < g.items.size(); ++i) {
          AuditRow row;
          row.user = g.user;
          row.codes = g.items[i].codes;
          row.legal = g.items[i].legal;
          if (scored_pos < scored.size() && scored[scored_pos] == static_cast<int>(i)) {
            row.reward = bundle.preference[scored_pos];
            row.adjusted_reward = bundle.adjusted[scored_pos];
            row.viral = bundle.viral[scored_pos] != 0;
            ++scored_pos;
          }
          audit_->push_back(std::move(row));
        }
      }
      if (bundle.adjusted.size() >= 2) {
        std::vector<double> adv = normalize_advantages(bundle.adjusted);
        for (size_t i = 0; i < scored.size(); ++i) {
          EcpoSample es;
          es.log_prob = log_probs[static_cast<size_t>(scored[i])];
          es.pi_old = std::max(std::exp(g.items[static_cast<size_t>(scored[i])].log_prob), 1e-300);
          es.advantage = adv[i];
          preference_samples.push_back(es);
        }
      }
    }

    if (cfg_.format_enabled) {
      Rng fmt_rng = rng_.split(0xf0a7 + static_cast<uint64_t>(g.user) + 97ULL * steps_);
      for (const auto& fa : format_advantages(g.items, cfg_.format_mode, cfg_.format_k, fmt_rng)) {
        EcpoSample es;
        es.log_prob = log_probs[static_cast<size_t>(fa.index)];
        es.pi_old = std::max(std::exp(g.items[static_cast<size_t>(fa.index)].log_prob), 1e-300);
        es.advantage = fa.advantage;
        format_samples.push_back(es);
      }
    }
  }
  metrics.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0;

  if (!preference_samples.empty()) {
    EcpoTerms terms = ecpo_objective(tape, preference_samples, cfg_.eps, cfg_.delta);
    metrics.ecpo_objective = terms.objective.value().item();
    metrics.clip_fraction = terms.clip_fraction;
    Var rl_loss = mul_scalar(neg(terms.objective), cfg_.rl_weight);
    total = total.valid() ? add(total, rl_loss) : rl_loss;
  }
  if (!format_samples.empty()) {
    EcpoTerms terms = ecpo_objective(tape, format_samples, cfg_.eps, cfg_.delta);
    metrics.format_objective = terms.objective.value().item();
    Var rl_loss = mul_scalar(neg(terms.objective), cfg_.rl_weight);
    total = total.valid() ? add(total, rl_loss) : rl_loss;
  }

  if (total.valid()) {
    tape.backward(total);
    adam_.step(s);
  }
  if (policy_.n_moe_layers() > 0 && !trace.per_layer.empty()) {
    policy_.apply_balancing(trace);
    auto totals = trace.totals();
    double mx = 0, mean_load = 0;
    for (int64_t l : totals) {
      mx = std::max(mx, static_cast<double>(l));
      mean_load += static_cast<double>(l) / static_cast<double>(totals.size());
    }
    metrics.load_max_over_mean = mean_load > 0 ? mx / mean_load : 0;
  }
  ++steps_;
  return metrics;
}

}  // namespace genrec
