#include "genrec/world.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <numeric>

namespace genrec {

int objective_index(const std::string& name) {
  for (int i = 0; i < kNumObjectives; ++i)
    if (name == kObjectiveNames[i]) return i;
  throw std::invalid_argument("unknown objective: " + name);
}

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Marsaglia-Tsang gamma sampler, shape >= 0 handled via the boost trick.
double gamma_sample(double shape, Rng& rng) {
  if (shape < 1.0) {
    double u = rng.uniform();
    while (u <= 0) u = rng.uniform();
    return gamma_sample(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  double d = shape - 1.0 / 3.0;
  double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = rng.normal();
    double v = 1.0 + c * x;
    if (v <= 0) continue;
    v = v * v * v;
    double u = rng.uniform();
    while (u <= 0) u = rng.uniform();
    if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v;
  }
}

// Cluster centers plus within-cluster spread; rows scaled so dot products of
// unrelated vectors stay O(1).
Array mixture_latents(int n, int dim, int clusters, double spread, Rng& rng,
                      std::vector<int>* labels_out) {
  double center_scale = 1.0 / std::sqrt(static_cast<double>(dim));
  Array centers({clusters, dim});
  for (int64_t i = 0; i < centers.size(); ++i) centers.at(i) = rng.normal(0.0, center_scale);
  Array out({n, dim});
  if (labels_out) labels_out->assign(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    int c = static_cast<int>(rng.randint(clusters));
    if (labels_out) (*labels_out)[static_cast<size_t>(i)] = c;
    for (int j = 0; j < dim; ++j)
      out.at(i, j) = centers.at(c, j) + rng.normal(0.0, spread * center_scale);
  }
  return out;
}

}  // namespace

double beta_sample(double a, double b, Rng& rng) {
  double x = gamma_sample(a, rng);
  double y = gamma_sample(b, rng);
  return x / (x + y);
}

double World::true_prob(int user, int64_t item, int objective) const {
  int d = cfg.latent_dim;
  double dot = 0;
  for (int j = 0; j < d; ++j)
    dot += user_latent.at(user, j) * item_latent.at(static_cast<int>(item), j) *
           obj_weight.at(objective, j);
  return sigmoid(cfg.objective_scale[static_cast<size_t>(objective)] * dot +
                 cfg.objective_bias[static_cast<size_t>(objective)]);
}

std::array<double, kNumObjectives> World::true_xtr(int user, int64_t item) const {
  std::array<double, kNumObjectives> out{};
  for (int o = 0; o < kNumObjectives; ++o) out[static_cast<size_t>(o)] = true_prob(user, item, o);
  return out;
}

double World::composite_reward(int user, int64_t item) const {
  auto xtr = true_xtr(user, item);
  double s = 0;
  for (int o = 0; o < kNumObjectives; ++o)
    s += cfg.composite_weights[static_cast<size_t>(o)] * xtr[static_cast<size_t>(o)];
  return s;
}

Array World::content_tokens_of(int64_t item) const {
  Array out({cfg.content_tokens, cfg.content_dim});
  for (int t = 0; t < cfg.content_tokens; ++t)
    for (int j = 0; j < cfg.content_dim; ++j)
      out.at(t, j) = item_content.at(static_cast<int>(item), t * cfg.content_dim + j);
  return out;
}

int64_t World::viral_count() const {
  int64_t n = 0;
  for (uint8_t v : item_viral) n += v;
  return n;
}

World generate_world(const WorldConfig& cfg) {
  require(cfg.n_users > 0 && cfg.n_items > 0 && cfg.latent_dim > 0, "world: counts must be positive");
  World w;
  w.cfg = cfg;
  Rng rng(cfg.seed);
  Rng user_rng = rng.split(1);
  Rng item_rng = rng.split(2);
  Rng content_rng = rng.split(3);
  Rng attr_rng = rng.split(4);

  w.user_latent = mixture_latents(cfg.n_users, cfg.latent_dim, cfg.n_user_clusters,
                                  cfg.cluster_spread, user_rng, nullptr);
  w.item_latent = mixture_latents(cfg.n_items, cfg.latent_dim, cfg.n_item_clusters,
                                  cfg.cluster_spread, item_rng, &w.item_cluster);

  w.user_obs = Array({cfg.n_users, cfg.latent_dim});
  for (int i = 0; i < cfg.n_users; ++i)
    for (int j = 0; j < cfg.latent_dim; ++j)
      w.user_obs.at(i, j) = w.user_latent.at(i, j) +
                            attr_rng.normal(0.0, cfg.obs_noise / std::sqrt(cfg.latent_dim));
  w.item_obs = Array({cfg.n_items, cfg.latent_dim});
  for (int i = 0; i < cfg.n_items; ++i)
    for (int j = 0; j < cfg.latent_dim; ++j)
      w.item_obs.at(i, j) = w.item_latent.at(i, j) +
                            attr_rng.normal(0.0, cfg.obs_noise / std::sqrt(cfg.latent_dim));

  // Content rows: per-token random projections of the item latent plus noise,
  // so content embeddings carry the cluster structure.
  Array proj({cfg.content_tokens * cfg.latent_dim, cfg.content_dim});
  for (int64_t i = 0; i < proj.size(); ++i)
    proj.at(i) = content_rng.normal(0.0, 1.0 / std::sqrt(cfg.latent_dim));
  w.item_content = Array({cfg.n_items, cfg.content_tokens * cfg.content_dim});
  for (int i = 0; i < cfg.n_items; ++i) {
    for (int t = 0; t < cfg.content_tokens; ++t) {
      for (int j = 0; j < cfg.content_dim; ++j) {
        double v = 0;
        for (int l = 0; l < cfg.latent_dim; ++l)
          v += w.item_latent.at(i, l) * proj.at(t * cfg.latent_dim + l, j);
        w.item_content.at(i, t * cfg.content_dim + j) =
            v + content_rng.normal(0.0, cfg.content_noise);
      }
    }
  }

  w.obj_weight = Array({kNumObjectives, cfg.latent_dim});
  for (int o = 0; o < kNumObjectives; ++o)
    for (int j = 0; j < cfg.latent_dim; ++j)
      w.obj_weight.at(o, j) = 1.0 + attr_rng.normal(0.0, 0.35);

  w.item_author.resize(static_cast<size_t>(cfg.n_items));
  w.item_tag.resize(static_cast<size_t>(cfg.n_items));
  w.item_duration.resize(static_cast<size_t>(cfg.n_items));
  for (int i = 0; i < cfg.n_items; ++i) {
    w.item_author[static_cast<size_t>(i)] = static_cast<int>(attr_rng.randint(cfg.n_authors));
    w.item_tag[static_cast<size_t>(i)] = attr_rng.uniform();
    w.item_duration[static_cast<size_t>(i)] = attr_rng.uniform(cfg.min_duration, cfg.max_duration);
  }

  // Viral flags: exactly floor(viral_fraction * n_items) items.
  w.item_viral.assign(static_cast<size_t>(cfg.n_items), 0);
  std::vector<int> order(static_cast<size_t>(cfg.n_items));
  std::iota(order.begin(), order.end(), 0);
  attr_rng.shuffle(order);
  int64_t n_viral = static_cast<int64_t>(cfg.viral_fraction * cfg.n_items);
  for (int64_t i = 0; i < n_viral; ++i) w.item_viral[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;

  return w;
}

namespace {

Interaction make_event(const World& w, int user, int64_t item, int session, double ts, Rng& rng) {
  Interaction ev;
  ev.user = user;
  ev.item = item;
  ev.session = session;
  ev.ts = ts;
  ev.duration = w.item_duration[static_cast<size_t>(item)];
  for (int o = 0; o < kNumObjectives; ++o)
    ev.labels.set(o, rng.uniform() < w.true_prob(user, item, o));
  // Play fraction from a Beta whose parameters shift with the lvtr label.
  double frac = ev.labels.get(0) ? beta_sample(5.0, 1.5, rng) : beta_sample(1.3, 3.0, rng);
  ev.playtime = ev.duration * frac;
  return ev;
}

}  // namespace

InteractionLog simulate_sessions_with(
    const World& world, int n_sessions, Rng& rng,
    const std::function<int64_t(int user, Rng& rng)>& pick_item) {
  InteractionLog log;
  double ts = 0;
  for (int s = 0; s < n_sessions; ++s) {
    int user = static_cast<int>(rng.randint(world.cfg.n_users));
    int len = world.cfg.session_len_min +
              static_cast<int>(rng.randint(world.cfg.session_len_max - world.cfg.session_len_min + 1));
    for (int e = 0; e < len; ++e) {
      ts += 1.0;
      int64_t item = pick_item(user, rng);
      log.events.push_back(make_event(world, user, item, s, ts, rng));
    }
  }
  return log;
}

InteractionLog simulate_sessions(const World& world, int n_sessions, Rng& rng) {
  // Logging policy: softmax over true vtr, the bias the policy later inherits.
  int vtr = objective_index("vtr");
  return simulate_sessions_with(
      world, n_sessions, rng, [&world, vtr](int user, Rng& r) -> int64_t {
        int n = world.cfg.n_items;
        std::vector<double> logits(static_cast<size_t>(n));
        double mx = -1e300;
        for (int i = 0; i < n; ++i) {
          logits[static_cast<size_t>(i)] =
              world.true_prob(user, i, vtr) / world.cfg.logging_temperature;
          mx = std::max(mx, logits[static_cast<size_t>(i)]);
        }
        double total = 0;
        for (int i = 0; i < n; ++i) {
          logits[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - mx);
          total += logits[static_cast<size_t>(i)];
        }
        double u = r.uniform() * total;
        double acc = 0;
        for (int i = 0; i < n; ++i) {
          acc += logits[static_cast<size_t>(i)];
          if (acc >= u) return i;
        }
        return n - 1;
      });
}

std::vector<std::vector<const Interaction*>> group_sessions(const InteractionLog& log) {
  std::map<int, std::vector<const Interaction*>> by_session;
  for (const auto& ev : log.events) by_session[ev.session].push_back(&ev);
  std::vector<std::vector<const Interaction*>> out;
  out.reserve(by_session.size());
  for (auto& [_, events] : by_session) out.push_back(std::move(events));
  return out;
}

InteractionLog rsft_filter(const InteractionLog& log) {
  auto sessions = group_sessions(log);
  int n = static_cast<int>(sessions.size());
  if (n == 0) return {};
  std::vector<std::pair<double, int>> keyed;  // (mean playtime, session id)
  keyed.reserve(static_cast<size_t>(n));
  for (const auto& events : sessions) {
    double total = 0;
    for (const auto* ev : events) total += ev->playtime;
    keyed.push_back({total / static_cast<double>(events.size()), events.front()->session});
  }
  std::sort(keyed.begin(), keyed.end());
  int drop = n / 2;
  std::set<int> keep;
  for (int i = drop; i < n; ++i) keep.insert(keyed[static_cast<size_t>(i)].second);
  InteractionLog out;
  for (const auto& ev : log.events)
    if (keep.count(ev.session)) out.events.push_back(ev);
  return out;
}

}  // namespace genrec
