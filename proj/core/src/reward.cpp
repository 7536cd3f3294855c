#include "genrec/reward.hpp"

#include <algorithm>
#include <cmath>

#include "genrec/io.hpp"
#include "json.hpp"

namespace genrec {

PScoreModel::PScoreModel(const PScoreConfig& cfg) : cfg_(cfg) {
  Rng rng(cfg.seed);
  int h = cfg.encoder_hidden;
  user_enc_ = make_mlp(params_, "user_enc", cfg.user_dim, h, h, rng);
  item_enc_ = make_mlp(params_, "item_enc", cfg.item_dim, h, h, rng);
  for (int o = 0; o < cfg.n_objectives; ++o) {
    Tower t;
    t.hidden = make_mlp(params_, std::string("tower.") + kObjectiveNames[o], 2 * h,
                        cfg.tower_hidden, cfg.tower_hidden, rng);
    t.head = make_linear(params_, std::string("tower.") + kObjectiveNames[o] + ".out",
                         cfg.tower_hidden, 1, rng);
    towers_.push_back(t);
  }
  fusion_hidden_ = make_mlp(params_, "fusion", 2 * h + cfg.n_objectives * cfg.tower_hidden, h, h,
                            rng);
  fusion_head_ = make_linear(params_, "fusion.out", h, 1, rng);
}

PScoreModel::Forward PScoreModel::forward(ParamSession& s, Var user_rows, Var item_rows) const {
  Var hu = mlp_leaky(s, user_enc_, user_rows);
  Var hi = mlp_leaky(s, item_enc_, item_rows);
  Var pair = concat_cols({hu, hi});
  Forward out;
  std::vector<Var> states{pair};
  for (const auto& tower : towers_) {
    Var hidden = leaky_relu(mlp_leaky(s, tower.hidden, pair));
    states.push_back(hidden);
    out.tower_logits.push_back(linear(s, tower.head, hidden));
  }
  // Tower hidden states plus user/item representations feed the fusion MLP.
  std::vector<Var> fusion_in;
  for (size_t i = 1; i < states.size(); ++i) fusion_in.push_back(states[i]);
  fusion_in.push_back(pair);
  Var fused = mlp_leaky(s, fusion_hidden_, concat_cols(fusion_in));
  out.fusion_logit = linear(s, fusion_head_, leaky_relu(fused));
  return out;
}

Var PScoreModel::training_loss(ParamSession& s, Var user_rows, Var item_rows,
                               const Array& labels) const {
  int batch = user_rows.rows();
  GENREC_REQUIRE(labels.rows() == batch && labels.cols() == cfg_.n_objectives,
          "pscore labels must be (batch, n_objectives)");
  Forward f = forward(s, user_rows, item_rows);
  Var total{};
  for (int o = 0; o < cfg_.n_objectives; ++o) {
    Array y({batch, 1});
    for (int i = 0; i < batch; ++i) y.at(i, 0) = labels.at(i, o);
    Var term = mean(bce_with_logits(f.tower_logits[static_cast<size_t>(o)], y));
    total = o == 0 ? term : add(total, term);
    // Fusion head learns against every objective's labels.
    total = add(total, mul_scalar(mean(bce_with_logits(f.fusion_logit, y)),
                                  1.0 / cfg_.n_objectives));
  }
  return total;
}

double PScoreModel::pscore(const Array& user_row, const Array& item_row) const {
  Tape tape;
  ParamSession s(tape, const_cast<ParamStore&>(params_), false);
  Forward f = forward(s, tape.leaf(user_row), tape.leaf(item_row));
  return 1.0 / (1.0 + std::exp(-f.fusion_logit.value().item()));
}

double PScoreModel::tower_probability(const Array& user_row, const Array& item_row,
                                      int objective) const {
  Tape tape;
  ParamSession s(tape, const_cast<ParamStore&>(params_), false);
  Forward f = forward(s, tape.leaf(user_row), tape.leaf(item_row));
  return 1.0 / (1.0 + std::exp(-f.tower_logits[static_cast<size_t>(objective)].value().item()));
}

namespace {

constexpr char kPScoreMagic[4] = {'G', 'R', 'P', 'S'};
constexpr uint32_t kPScoreVersion = 1;

Array user_row_of(const World& world, int user) {
  Array row({1, world.cfg.latent_dim});
  for (int j = 0; j < world.cfg.latent_dim; ++j) row.at(0, j) = world.user_obs.at(user, j);
  return row;
}

Array item_row_of(const World& world, int64_t item) {
  Array row({1, world.cfg.latent_dim});
  for (int j = 0; j < world.cfg.latent_dim; ++j)
    row.at(0, j) = world.item_obs.at(static_cast<int>(item), j);
  return row;
}

}  // namespace

void PScoreModel::save(const std::string& path) const {
  BinaryWriter w(path);
  w.magic(kPScoreMagic);
  w.u32(kPScoreVersion);
  nlohmann::json j{{"user_dim", cfg_.user_dim},
                   {"item_dim", cfg_.item_dim},
                   {"encoder_hidden", cfg_.encoder_hidden},
                   {"tower_hidden", cfg_.tower_hidden},
                   {"n_objectives", cfg_.n_objectives},
                   {"steps", cfg_.steps},
                   {"batch", cfg_.batch},
                   {"lr", cfg_.lr},
                   {"holdout_fraction", cfg_.holdout_fraction},
                   {"seed", cfg_.seed}};
  w.str(j.dump());
  w.u64(static_cast<uint64_t>(params_.count()));
  for (const auto& e : params_.entries()) {
    w.str(e.name);
    w.array(e.value);
  }
  w.close();
}

PScoreModel PScoreModel::load(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kPScoreMagic);
  GENREC_REQUIRE(r.u32() == kPScoreVersion, "unsupported reward checkpoint version");
  auto j = nlohmann::json::parse(r.str());
  PScoreConfig cfg;
  cfg.user_dim = j.at("user_dim");
  cfg.item_dim = j.at("item_dim");
  cfg.encoder_hidden = j.at("encoder_hidden");
  cfg.tower_hidden = j.at("tower_hidden");
  cfg.n_objectives = j.at("n_objectives");
  cfg.steps = j.at("steps");
  cfg.batch = j.at("batch");
  cfg.lr = j.at("lr");
  cfg.holdout_fraction = j.at("holdout_fraction");
  cfg.seed = j.at("seed");
  PScoreModel model(cfg);
  uint64_t count = r.u64();
  GENREC_REQUIRE(count == static_cast<uint64_t>(model.params_.count()),
          "reward checkpoint parameter count mismatch");
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Array value = r.array();
    ParamId p = model.params_.find(name);
    GENREC_REQUIRE(p.valid(), "reward checkpoint has unknown parameter: " + name);
    model.params_.value(p) = std::move(value);
  }
  return model;
}

PScoreModel train_pscore(const World& world, const InteractionLog& log, const PScoreConfig& cfg,
                         PScoreTrainReport* report) {
  GENREC_REQUIRE(!log.events.empty(), "train_pscore: empty log");
  GENREC_REQUIRE(cfg.user_dim == world.cfg.latent_dim && cfg.item_dim == world.cfg.latent_dim,
          "pscore feature dims must match the world's observable width");
  PScoreModel model(cfg);
  Rng rng(cfg.seed + 1);
  Adam adam(AdamConfig{.lr = cfg.lr});

  int n = static_cast<int>(log.events.size());
  int train_n = n - static_cast<int>(cfg.holdout_fraction * n);
  GENREC_REQUIRE(train_n >= 1, "train_pscore: nothing left to train on");

  for (int step = 0; step < cfg.steps; ++step) {
    int b = std::min(cfg.batch, train_n);
    Array users({b, cfg.user_dim}), items({b, cfg.item_dim}), labels({b, cfg.n_objectives});
    for (int i = 0; i < b; ++i) {
      const Interaction& ev = log.events[static_cast<size_t>(rng.randint(train_n))];
      for (int j = 0; j < cfg.user_dim; ++j) users.at(i, j) = world.user_obs.at(ev.user, j);
      for (int j = 0; j < cfg.item_dim; ++j)
        items.at(i, j) = world.item_obs.at(static_cast<int>(ev.item), j);
      for (int o = 0; o < cfg.n_objectives; ++o) labels.at(i, o) = ev.labels.get(o) ? 1.0 : 0.0;
    }
    Tape tape;
    ParamSession s(tape, model.params());
    Var loss = model.training_loss(s, tape.leaf(users), tape.leaf(items), labels);
    if (report) report->loss_curve.push_back(loss.value().item());
    tape.backward(loss);
    adam.step(s);
  }

  if (report) {
    int vtr = objective_index("vtr");
    std::vector<double> scores;
    std::vector<uint8_t> labels;
    for (int i = train_n; i < n; ++i) {
      const Interaction& ev = log.events[static_cast<size_t>(i)];
      scores.push_back(model.tower_probability(user_row_of(world, ev.user),
                                               item_row_of(world, ev.item), vtr));
      labels.push_back(ev.labels.get(vtr) ? 1 : 0);
    }
    report->holdout_auc_vtr = auc(scores, labels);
  }
  return model;
}

double auc(const std::vector<double>& scores, const std::vector<uint8_t>& labels) {
  GENREC_REQUIRE(scores.size() == labels.size(), "auc: size mismatch");
  std::vector<size_t> order(scores.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Rank-sum with midranks for ties.
  double pos = 0, neg = 0, rank_sum = 0;
  size_t i = 0;
  double rank = 1;
  while (i < order.size()) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    double mid = rank + (static_cast<double>(j - i) - 1) / 2.0;
    for (size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum += mid;
    rank += static_cast<double>(j - i);
    i = j;
  }
  for (uint8_t l : labels) (l ? pos : neg) += 1;
  GENREC_REQUIRE(pos > 0 && neg > 0, "auc undefined without both classes");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

std::vector<FormatAdvantage> format_advantages(const std::vector<GeneratedItem>& group,
                                               FormatMode mode, int k, Rng& rng) {
  GENREC_REQUIRE(k <= static_cast<int>(group.size()), "format reward: K exceeds the group size");
  std::vector<int> selected;
  if (mode == FormatMode::topk) {
    std::vector<int> order(group.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return group[static_cast<size_t>(a)].log_prob > group[static_cast<size_t>(b)].log_prob;
    });
    order.resize(static_cast<size_t>(k));
    selected = std::move(order);
  } else {
    std::vector<int> order(group.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    selected = std::move(order);
  }
  std::vector<FormatAdvantage> out;
  for (int idx : selected) {
    // Legal samples get advantage 1; illegal ones are discarded outright so
    // they contribute no gradient at all.
    if (group[static_cast<size_t>(idx)].legal) out.push_back({idx, 1.0});
  }
  return out;
}

RewardBundle make_reward_bundle(std::vector<double> preference, std::vector<uint8_t> viral) {
  GENREC_REQUIRE(preference.size() == viral.size(), "reward bundle: flag count mismatch");
  RewardBundle b;
  b.adjusted = preference;
  b.preference = std::move(preference);
  b.viral = std::move(viral);
  return b;
}

void apply_sir(RewardBundle& bundle, double f, double alpha, double exposure_proportion) {
  GENREC_REQUIRE(alpha > 0 && alpha < 1, "sir: alpha must lie in (0,1)");
  GENREC_REQUIRE(f >= 0 && f <= 1, "sir: f must lie in [0,1]");
  bundle.adjusted = bundle.preference;
  if (exposure_proportion > f) {
    for (size_t i = 0; i < bundle.adjusted.size(); ++i)
      if (bundle.viral[i]) bundle.adjusted[i] *= alpha;
  }
}

}  // namespace genrec
