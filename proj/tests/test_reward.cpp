#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fd_check.hpp"
#include "genrec/reward.hpp"

using namespace genrec;

namespace {

WorldConfig reward_world_config() {
  WorldConfig cfg;
  cfg.n_users = 96;
  cfg.n_items = 256;
  cfg.latent_dim = 8;
  cfg.content_tokens = 2;
  cfg.content_dim = 8;
  cfg.obs_noise = 0.05;
  cfg.logging_temperature = 1.0;
  cfg.seed = 7;
  return cfg;
}

PScoreConfig small_pscore(const WorldConfig& w) {
  PScoreConfig cfg;
  cfg.user_dim = w.latent_dim;
  cfg.item_dim = w.latent_dim;
  cfg.encoder_hidden = 32;
  cfg.tower_hidden = 8;
  cfg.steps = 800;
  cfg.batch = 64;
  cfg.lr = 3e-3;
  cfg.seed = 5;
  return cfg;
}

Array row_of(const Array& m, int i) {
  Array r({1, m.cols()});
  for (int j = 0; j < m.cols(); ++j) r.at(0, j) = m.at(i, j);
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    for (size_t i = 0; i < v.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < order.size(); ++i) r[order[i]] = static_cast<double>(i);
    return r;
  };
  auto ra = ranks(a), rb = ranks(b);
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i] / ra.size();
    mb += rb[i] / rb.size();
  }
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(va * vb);
}

}  // namespace

TEST_CASE("trained vtr tower separates engagement on held-out data") {
  WorldConfig wcfg = reward_world_config();
  // Sharpen the vtr link so the ground truth itself is separable: the AUC of
  // any learned model is capped by the label noise of the true logistic.
  int vtr = objective_index("vtr");
  wcfg.objective_scale[static_cast<size_t>(vtr)] = 16.0;
  wcfg.objective_bias[static_cast<size_t>(vtr)] = 0.0;
  wcfg.obs_noise = 0.02;
  // Broad exposure coverage; the logging bias is not under test here.
  wcfg.logging_temperature = 1.0;
  World world = generate_world(wcfg);
  Rng rng(3);
  InteractionLog log = simulate_sessions(world, 700, rng);

  // Oracle ceiling: score events by their true probability.
  {
    std::vector<double> scores;
    std::vector<uint8_t> labels;
    for (const auto& ev : log.events) {
      scores.push_back(world.true_prob(ev.user, ev.item, vtr));
      labels.push_back(ev.labels.get(vtr) ? 1 : 0);
    }
    CHECK(auc(scores, labels) > 0.93);
  }

  PScoreTrainReport report;
  PScoreModel model = train_pscore(world, log, small_pscore(wcfg), &report);
  CHECK(report.holdout_auc_vtr > 0.9);
}

TEST_CASE("a constant-label objective converges to its base rate") {
  WorldConfig wcfg = reward_world_config();
  // Flatten the ltr objective: zero scale makes p = sigmoid(bias) everywhere.
  int ltr = objective_index("ltr");
  wcfg.objective_scale[static_cast<size_t>(ltr)] = 0.0;
  wcfg.objective_bias[static_cast<size_t>(ltr)] = -1.5;
  World world = generate_world(wcfg);
  Rng rng(5);
  InteractionLog log = simulate_sessions(world, 700, rng);
  PScoreModel model = train_pscore(world, log, small_pscore(wcfg));
  double base = 1.0 / (1.0 + std::exp(1.5));
  double mean_pred = 0;
  int n = 0;
  for (int u = 0; u < 16; ++u)
    for (int i = 0; i < 16; ++i) {
      mean_pred += model.tower_probability(row_of(world.user_obs, u), row_of(world.item_obs, i), ltr);
      ++n;
    }
  mean_pred /= n;
  CHECK(std::fabs(mean_pred - base) < 0.05);
}

TEST_CASE("fusion head gradient check") {
  PScoreConfig cfg;
  cfg.user_dim = 6;
  cfg.item_dim = 6;
  cfg.encoder_hidden = 8;
  cfg.tower_hidden = 4;
  PScoreModel model(cfg);
  Rng rng(9);
  Array users({4, 6}), items({4, 6}), labels({4, kNumObjectives});
  for (int64_t i = 0; i < users.size(); ++i) users.at(i) = rng.normal();
  for (int64_t i = 0; i < items.size(); ++i) items.at(i) = rng.normal();
  for (int64_t i = 0; i < labels.size(); ++i) labels.at(i) = rng.uniform() < 0.4 ? 1.0 : 0.0;

  auto build = [&](Tape& tape, ParamSession& s) {
    return model.training_loss(s, tape.leaf(users), tape.leaf(items), labels);
  };
  auto loss_fn = [&]() {
    Tape tape;
    ParamSession s(tape, model.params(), false);
    return build(tape, s).value().item();
  };
  auto rep = fd::param_spot_check(model.params(), loss_fn, build, 2);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("pscore is a pure function with outputs in (0,1)") {
  WorldConfig wcfg = reward_world_config();
  World world = generate_world(wcfg);
  PScoreModel model(small_pscore(wcfg));  // untrained weights suffice here
  Array u = row_of(world.user_obs, 3);
  Array i1 = row_of(world.item_obs, 10);
  Array i2 = row_of(world.item_obs, 10);
  CHECK(model.pscore(u, i1) == model.pscore(u, i2));
  for (int i = 0; i < 32; ++i) {
    double p = model.pscore(row_of(world.user_obs, i % wcfg.n_users), row_of(world.item_obs, i));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
}

TEST_CASE("trained pscore tracks the true composite reward") {
  WorldConfig wcfg = reward_world_config();
  World world = generate_world(wcfg);
  Rng rng(11);
  InteractionLog log = simulate_sessions(world, 900, rng);
  PScoreModel model = train_pscore(world, log, small_pscore(wcfg));

  // Held-out user-item pairs: Spearman rank correlation with the true
  // composite must clear 0.6 for RL experiments to mean anything.
  std::vector<double> truth, learned;
  Rng pair_rng(13);
  for (int k = 0; k < 400; ++k) {
    int u = static_cast<int>(pair_rng.randint(wcfg.n_users));
    int i = static_cast<int>(pair_rng.randint(wcfg.n_items));
    truth.push_back(world.composite_reward(u, i));
    learned.push_back(model.pscore(row_of(world.user_obs, u), row_of(world.item_obs, i)));
  }
  CHECK(spearman(truth, learned) > 0.6);

  // Monotonicity probe: items whose true engagement is higher score higher
  // on average over users.
  std::vector<std::pair<double, double>> by_item;
  for (int i = 0; i < 64; ++i) {
    double t = 0, l = 0;
    for (int u = 0; u < 24; ++u) {
      t += world.composite_reward(u, i) / 24;
      l += model.pscore(row_of(world.user_obs, u), row_of(world.item_obs, i)) / 24;
    }
    by_item.push_back({t, l});
  }
  std::sort(by_item.begin(), by_item.end());
  double low = 0, high = 0;
  for (int i = 0; i < 16; ++i) {
    low += by_item[static_cast<size_t>(i)].second / 16;
    high += by_item[static_cast<size_t>(48 + i)].second / 16;
  }
  CHECK(high > low);
}

TEST_CASE("pscore checkpoints round-trip") {
  PScoreConfig cfg;
  cfg.user_dim = 6;
  cfg.item_dim = 6;
  PScoreModel model(cfg);
  Rng rng(15);
  Array u({1, 6}), i({1, 6});
  for (int j = 0; j < 6; ++j) {
    u.at(0, j) = rng.normal();
    i.at(0, j) = rng.normal();
  }
  double before = model.pscore(u, i);
  model.save("/tmp/genrec_test_pscore.bin");
  PScoreModel loaded = PScoreModel::load("/tmp/genrec_test_pscore.bin");
  CHECK(loaded.pscore(u, i) == before);
}

// ---- format reward ---------------------------------------------------------------

namespace {

std::vector<GeneratedItem> make_group(int n, const std::vector<int>& legal_idx) {
  std::vector<GeneratedItem> group;
  for (int i = 0; i < n; ++i) {
    GeneratedItem item;
    item.codes = SemanticId{{i, 0, 0}};
    item.log_prob = -0.01 * i;  // descending probability with the index
    item.legal = std::find(legal_idx.begin(), legal_idx.end(), i) != legal_idx.end();
    if (item.legal) item.item_ids = {i};
    group.push_back(item);
  }
  return group;
}

}  // namespace

TEST_CASE("format advantages select top-5 of 128 by probability") {
  std::vector<int> legal;
  for (int i = 0; i < 128; i += 2) legal.push_back(i);
  auto group = make_group(128, legal);
  Rng rng(1);
  auto adv = format_advantages(group, FormatMode::topk, 5, rng);
  // Top-5 by log_prob are indices 0..4; the legal ones among them are 0,2,4.
  REQUIRE(adv.size() == 3);
  CHECK(adv[0].index == 0);
  CHECK(adv[1].index == 2);
  CHECK(adv[2].index == 4);
  for (const auto& a : adv) CHECK(a.advantage == 1.0);
}

TEST_CASE("all selected legal gives exactly K advantage-1 entries") {
  std::vector<int> all;
  for (int i = 0; i < 16; ++i) all.push_back(i);
  auto group = make_group(16, all);
  Rng rng(2);
  for (FormatMode mode : {FormatMode::topk, FormatMode::random}) {
    auto adv = format_advantages(group, mode, 5, rng);
    CHECK(adv.size() == 5);
    for (const auto& a : adv) CHECK(a.advantage == 1.0);
  }
}

TEST_CASE("all selected illegal contributes nothing and never goes negative") {
  auto group = make_group(16, {});
  Rng rng(3);
  for (FormatMode mode : {FormatMode::topk, FormatMode::random}) {
    auto adv = format_advantages(group, mode, 6, rng);
    CHECK(adv.empty());
  }
  CHECK_THROWS(format_advantages(group, FormatMode::topk, 17, rng));
}

TEST_CASE("random format selection is seeded and within range") {
  std::vector<int> all;
  for (int i = 0; i < 32; ++i) all.push_back(i);
  auto group = make_group(32, all);
  Rng a(7), b(7);
  auto ra = format_advantages(group, FormatMode::random, 8, a);
  auto rb = format_advantages(group, FormatMode::random, 8, b);
  REQUIRE(ra.size() == rb.size());
  for (size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].index == rb[i].index);
}

// ---- specific industrial reward -----------------------------------------------------

TEST_CASE("sir arithmetic on the worked example") {
  RewardBundle b = make_reward_bundle({0.8}, {1});
  apply_sir(b, 0.2, 0.5, 0.3);  // proportion 0.3 > f 0.2
  CHECK(b.adjusted[0] == doctest::Approx(0.4).epsilon(1e-15));
  CHECK(b.preference[0] == 0.8);
}

TEST_CASE("sir leaves rewards unchanged below the trigger") {
  RewardBundle b = make_reward_bundle({0.8, 0.6, 0.3}, {1, 0, 1});
  apply_sir(b, 0.5, 0.5, 0.4);  // proportion <= f
  CHECK(b.adjusted == b.preference);
}

TEST_CASE("sir is idempotent and never increases a reward") {
  RewardBundle b = make_reward_bundle({0.9, 0.7, 0.5, 0.2}, {1, 0, 1, 0});
  apply_sir(b, 0.1, 0.5, 0.6);
  auto once = b.adjusted;
  apply_sir(b, 0.1, 0.5, 0.6);
  CHECK(b.adjusted == once);
  for (size_t i = 0; i < b.adjusted.size(); ++i) CHECK(b.adjusted[i] <= b.preference[i]);

  CHECK_THROWS(apply_sir(b, 0.1, 1.5, 0.6));  // alpha outside (0,1)
  CHECK_THROWS(apply_sir(b, 0.1, 0.0, 0.6));
}

TEST_CASE("auc of a perfect ranker is 1 and of a constant is undefined") {
  CHECK(auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);  // midranks
  CHECK_THROWS(auc({0.5, 0.5}, {1, 1}));
}
