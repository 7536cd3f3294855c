#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "fd_check.hpp"
#include "genrec/io.hpp"
#include "genrec/tokenizer.hpp"

using namespace genrec;

namespace {

Array random_array(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Array a(std::move(shape));
  for (int64_t i = 0; i < a.size(); ++i) a.at(i) = rng.normal(0.0, scale);
  return a;
}

ItemEmbeddings embeddings_from(const Array& flat, int n_queries, int dim) {
  ItemEmbeddings e;
  e.n_queries = n_queries;
  e.dim = dim;
  e.flat = flat;
  return e;
}

// Independent Lloyd iteration oracle: plain assignment/update loop started
// from the given centroids. No k-means++ logic, no reseeding.
std::vector<int> plain_lloyd(const Array& pts, Array centroids, int iters) {
  int n = pts.rows(), d = pts.cols(), k = centroids.rows();
  std::vector<int> assign(static_cast<size_t>(n), 0);
  for (int it = 0; it < iters; ++it) {
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = 1e300;
      for (int c = 0; c < k; ++c) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
          double diff = pts.at(i, j) - centroids.at(c, j);
          s += diff * diff;
        }
        if (s < bd) {
          bd = s;
          best = c;
        }
      }
      assign[static_cast<size_t>(i)] = best;
    }
    Array sums = Array::zeros({k, d});
    std::vector<int> cnt(static_cast<size_t>(k), 0);
    for (int i = 0; i < n; ++i) {
      cnt[static_cast<size_t>(assign[static_cast<size_t>(i)])]++;
      for (int j = 0; j < d; ++j) sums.at(assign[static_cast<size_t>(i)], j) += pts.at(i, j);
    }
    for (int c = 0; c < k; ++c)
      if (cnt[static_cast<size_t>(c)])
        for (int j = 0; j < d; ++j) centroids.at(c, j) = sums.at(c, j) / cnt[static_cast<size_t>(c)];
  }
  return assign;
}

}  // namespace

TEST_CASE("cross-attention over a single token returns that token") {
  // One key forces the softmax weight to 1; with identity value and output
  // projections the block output equals the token for any query.
  Rng rng(1);
  ParamStore store;
  auto attn = make_attention(store, "attn", 6, 1, rng);
  Array eye({6, 6});
  for (int i = 0; i < 6; ++i) eye.at(i, i) = 1.0;
  store.value(attn.wv.w) = eye;
  store.value(attn.wo.w) = eye;

  Tape tape;
  ParamSession s(tape, store, false);
  Array token = random_array({1, 6}, rng);
  for (int trial = 0; trial < 3; ++trial) {
    Var q = tape.leaf(random_array({4, 6}, rng, 2.0));
    Array out = attention(s, attn, q, tape.leaf(token)).value();
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j < 6; ++j) CHECK(out.at(r, j) == doctest::Approx(token.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("qformer compress output shape follows the configuration") {
  AlignConfig cfg;
  cfg.content_tokens = 16;
  cfg.content_dim = 512;
  cfg.n_queries = 4;
  cfg.n_layers = 1;
  cfg.heads = 1;
  cfg.ffn_hidden = 32;
  Rng rng(5);
  AlignmentModel model(cfg, rng);
  Array out = model.compress_eval(random_array({16, 512}, rng, 0.3));
  CHECK(out.rows() == 4);
  CHECK(out.cols() == 512);
}

TEST_CASE("qformer gradient check through 2 layers") {
  AlignConfig cfg;
  cfg.content_tokens = 3;
  cfg.content_dim = 8;
  cfg.n_queries = 2;
  cfg.n_layers = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 10;
  Rng rng(9);
  AlignmentModel model(cfg, rng);
  Array tokens = random_array({3, 8}, rng, 0.5);

  // FD over the token input with the full 2-layer stack on top.
  auto build = [&](Tape& tape, const std::vector<Var>& v) {
    ParamSession s(tape, model.params(), false);
    Var out = model.compress(s, v[0]);
    return mean(mul(out, out));
  };
  auto rep = fd::check(build, {tokens});
  CHECK(rep.max_rel_err < 1e-5);

  // And over every model parameter, loss built from a fresh session so the
  // parameters are tape leaves.
  Tape tape;
  ParamSession s(tape, model.params());
  Var out = model.compress(s, tape.leaf(tokens));
  Var loss = mean(mul(out, out));
  tape.backward(loss);
  for (const auto& entry : model.params().entries()) {
    ParamId p = model.params().find(entry.name);
    const Array* g = s.grad(p);
    if (!g) continue;
    // Spot-check each parameter's first element by finite differences.
    Array& value = model.params().value(p);
    double orig = value.at(0);
    double h = 1e-5;
    auto eval = [&]() {
      Tape t2;
      ParamSession s2(t2, model.params(), false);
      Var o = model.compress(s2, t2.leaf(tokens));
      return mean(mul(o, o)).value().item();
    };
    value.at(0) = orig + h;
    double fp = eval();
    value.at(0) = orig - h;
    double fm = eval();
    value.at(0) = orig;
    double numeric = (fp - fm) / (2 * h);
    double denom = std::max({std::fabs(g->at(0)), std::fabs(numeric), 1e-4});
    CHECK(std::fabs(g->at(0) - numeric) / denom < 1e-5);
  }
}

TEST_CASE("item pairs: perfect co-engagement produces a maximal pair") {
  InteractionLog log;
  // Two items liked by the same 10 users; a third item engaged by nobody else.
  for (int u = 0; u < 10; ++u) {
    for (int64_t item : {0, 1}) {
      Interaction ev;
      ev.user = u;
      ev.item = item;
      ev.session = u;
      ev.ts = u * 10.0 + item;
      ev.duration = 10;
      ev.playtime = 5;
      ev.labels.set(objective_index("ltr"), true);
      log.events.push_back(ev);
    }
  }
  CHECK(co_engagement_similarity(log, 0, 1) == doctest::Approx(1.0));
  ItemPairSet pairs = build_item_pairs(log, 0.3);
  bool found = false;
  for (const auto& p : pairs.pairs) {
    CHECK(p.a != p.b);
    CHECK(p.weight > 0);
    if ((p.a == 0 && p.b == 1) || (p.a == 1 && p.b == 0)) {
      found = true;
      CHECK(p.weight == doctest::Approx(1.0));
    }
  }
  CHECK(found);
}

TEST_CASE("item pairs: disjoint audiences produce no i2i pair") {
  InteractionLog log;
  for (int u = 0; u < 5; ++u) {
    Interaction ev;
    ev.user = u;
    ev.item = 0;
    ev.session = u;
    ev.ts = u;
    ev.duration = 10;
    ev.playtime = 5;
    ev.labels.set(objective_index("ltr"), true);
    log.events.push_back(ev);
  }
  for (int u = 5; u < 10; ++u) {
    Interaction ev;
    ev.user = u;
    ev.item = 1;
    ev.session = u;
    ev.ts = u;
    ev.duration = 10;
    ev.playtime = 5;
    ev.labels.set(objective_index("ltr"), true);
    log.events.push_back(ev);
  }
  CHECK(co_engagement_similarity(log, 0, 1) == 0.0);
  ItemPairSet pairs = build_item_pairs(log, 0.1);
  CHECK(pairs.pairs.empty());
}

TEST_CASE("item pairs match an exhaustive pairwise-similarity oracle") {
  // 100-user synthetic log over 20 items with random strong engagements.
  Rng rng(77);
  InteractionLog log;
  int t = 0;
  for (int u = 0; u < 100; ++u) {
    int n = 3 + static_cast<int>(rng.randint(5));
    for (int e = 0; e < n; ++e) {
      Interaction ev;
      ev.user = u;
      ev.item = rng.randint(20);
      ev.session = u;
      ev.ts = ++t;
      ev.duration = 10;
      ev.playtime = 5;
      ev.labels.set(objective_index("cmtr"), rng.uniform() < 0.7);
      log.events.push_back(ev);
    }
  }
  const double threshold = 0.3;
  ItemPairSet pairs = build_item_pairs(log, threshold);
  // Oracle: O(n^2) over items; every pair above threshold must be present.
  std::set<std::pair<int64_t, int64_t>> have;
  for (const auto& p : pairs.pairs) have.insert(std::minmax(p.a, p.b));
  for (int64_t a = 0; a < 20; ++a) {
    for (int64_t b = a + 1; b < 20; ++b) {
      double sim = co_engagement_similarity(log, a, b);
      if (sim >= threshold) {
        CHECK(have.count({a, b}) == 1);
      }
    }
  }
  // And every emitted pair weight matches the oracle similarity (u2i pairs
  // may fall below the i2i threshold but still use the same similarity).
  for (const auto& p : pairs.pairs)
    CHECK(p.weight == doctest::Approx(co_engagement_similarity(log, p.a, p.b)).epsilon(1e-12));
}

TEST_CASE("i2i contrastive loss analytic cases") {
  // Two pairs with identical similarities -> ln 2 regardless of the value.
  Tape tape;
  Var sims = tape.leaf(Array({2, 1}, {0.37, 0.37}));
  CHECK(i2i_contrastive_loss(sims, 0.07).value().item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // Paired similarity far above the rest -> loss ~ 0 for the batch mean to
  // the extent the dominant pair saturates; with one dominant of B the loss
  // approaches (B-1)/B * (gap/tau) ... use the direct recomputation instead.
  Rng rng(13);
  Array s({8, 1});
  for (int i = 0; i < 8; ++i) s.at(i, 0) = rng.uniform(-1.0, 1.0);
  double tau = 0.07;
  double mx = -1e300;
  for (int i = 0; i < 8; ++i) mx = std::max(mx, s.at(i, 0) / tau);
  double lse = 0;
  for (int i = 0; i < 8; ++i) lse += std::exp(s.at(i, 0) / tau - mx);
  lse = mx + std::log(lse);
  double want = 0;
  for (int i = 0; i < 8; ++i) want += lse - s.at(i, 0) / tau;
  want /= 8;
  Var sims8 = tape.leaf(s);
  CHECK(i2i_contrastive_loss(sims8, tau).value().item() == doctest::Approx(want).epsilon(1e-10));

  // Saturated case: one pair's similarity dominated by its own term -> the
  // per-pair loss of that pair tends to 0.
  Var one_hot = tape.leaf(Array({2, 1}, {40.0 * tau, -40.0 * tau}));
  Var z = mul_scalar(one_hot, 1.0 / tau);
  // log softmax of the first entry:
  double term = std::log(std::exp(40.0) / (std::exp(40.0) + std::exp(-40.0)));
  CHECK(term == doctest::Approx(0.0).epsilon(1e-10));
  (void)z;

  CHECK_THROWS(i2i_contrastive_loss(tape.leaf(Array({1, 1}, {0.5})), tau));
}

TEST_CASE("rq-kmeans with corpus of exactly N_t distinct points is exact") {
  Rng rng(3);
  Array flat = random_array({16, 6}, rng, 1.5);
  RqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_layers = 1;
  auto fit = fit_rq_kmeans(embeddings_from(flat, 2, 3), cfg);
  auto metrics = tokenizer_metrics(fit.corpus_codes, fit.stack, embeddings_from(flat, 2, 3));
  CHECK(metrics.recon_loss <= 1e-18);
  // Centroids are the points themselves up to permutation.
  std::set<int> used;
  for (const auto& id : fit.corpus_codes) used.insert(id.codes[0]);
  CHECK(used.size() == 16);
}

TEST_CASE("default quantization depth is three layers") {
  RqConfig cfg;
  CHECK(cfg.n_layers == 3);
  Rng rng(5);
  Array flat = random_array({64, 4}, rng);
  auto fit = fit_rq_kmeans(embeddings_from(flat, 1, 4), RqConfig{.n_layers = 3, .codebook_size = 8});
  for (const auto& id : fit.corpus_codes) CHECK(id.codes.size() == 3);
  CHECK(fit.stack.layers.size() == 3);
}

TEST_CASE("layer-1 assignment matches an independent Lloyd oracle") {
  // 256 points from 8 well-separated Gaussians.
  Rng rng(11);
  Array pts({256, 4});
  for (int i = 0; i < 256; ++i) {
    int c = i % 8;
    for (int j = 0; j < 4; ++j)
      pts.at(i, j) = ((c >> j) & 1) * 12.0 + rng.normal(0.0, 0.4);
  }
  RqConfig cfg;
  cfg.codebook_size = 8;
  cfg.n_layers = 2;
  auto fit = fit_rq_kmeans(embeddings_from(pts, 1, 4), cfg);

  // Oracle: run plain Lloyd from the library's k-means++ seeds.
  Rng rng2(cfg.seed);
  KMeansResult km = kmeans(pts, 8, rng2, cfg.kmeans);
  std::vector<int> oracle = plain_lloyd(pts, km.initial_centroids, 50);
  // Identical partition: same code <=> same oracle cluster.
  std::map<int, int> code_to_oracle;
  for (int i = 0; i < 256; ++i) {
    int code = fit.corpus_codes[static_cast<size_t>(i)].codes[0];
    auto it = code_to_oracle.find(code);
    if (it == code_to_oracle.end())
      code_to_oracle[code] = oracle[static_cast<size_t>(i)];
    else
      CHECK(it->second == oracle[static_cast<size_t>(i)]);
  }
  CHECK(code_to_oracle.size() == 8);
}

TEST_CASE("quantize hits an exact centroid and telescopes") {
  Rng rng(19);
  Array flat = random_array({64, 6}, rng, 1.2);
  RqConfig cfg;
  cfg.codebook_size = 8;
  cfg.n_layers = 3;
  auto emb = embeddings_from(flat, 3, 2);
  auto fit = fit_rq_kmeans(emb, cfg);

  // Exact centroid hit at layer 1.
  int k = 5;
  Array centroid({1, 6});
  for (int j = 0; j < 6; ++j) centroid.at(0, j) = fit.stack.layers[0].at(k, j);
  auto [id, rec] = quantize(centroid, fit.stack);
  CHECK(id.codes[0] == k);

  // Telescoping: embedding - reconstruction equals the final residual norm.
  for (int i = 0; i < 64; ++i) {
    Array e = emb.row(i);
    auto [codes, r] = quantize(e, fit.stack);
    double err2 = 0;
    std::vector<double> resid(6);
    for (int j = 0; j < 6; ++j) resid[static_cast<size_t>(j)] = e.at(0, j);
    for (int layer = 0; layer < 3; ++layer)
      for (int j = 0; j < 6; ++j)
        resid[static_cast<size_t>(j)] -= fit.stack.layers[static_cast<size_t>(layer)].at(codes.codes[static_cast<size_t>(layer)], j);
    for (int j = 0; j < 6; ++j) {
      double diff = e.at(0, j) - r.at(0, j);
      CHECK(std::fabs(diff - resid[static_cast<size_t>(j)]) <= 1e-10);
      err2 += diff * diff;
    }
    (void)err2;
  }
}

TEST_CASE("mean squared reconstruction error matches an independent recomputation") {
  Rng rng(23);
  Array flat = random_array({512, 8}, rng);
  auto emb = embeddings_from(flat, 2, 4);
  RqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_layers = 3;
  auto fit = fit_rq_kmeans(emb, cfg);
  auto metrics = tokenizer_metrics(fit.corpus_codes, fit.stack, emb);

  double total = 0;
  for (int i = 0; i < 512; ++i) {
    auto [codes, rec] = quantize(emb.row(i), fit.stack);
    for (int j = 0; j < 8; ++j) {
      double diff = flat.at(i, j) - rec.at(0, j);
      total += diff * diff;
    }
    // quantize must agree with the codes assigned during fitting
    CHECK(codes.codes == fit.corpus_codes[static_cast<size_t>(i)].codes);
  }
  CHECK(std::fabs(metrics.recon_loss - total / (512.0 * 8)) <= 1e-12);
}

TEST_CASE("quantize is pure and deterministic") {
  Rng rng(29);
  Array flat = random_array({32, 4}, rng);
  auto emb = embeddings_from(flat, 1, 4);
  auto fit = fit_rq_kmeans(emb, RqConfig{.n_layers = 2, .codebook_size = 4});
  for (int i = 0; i < 32; ++i) {
    auto a = quantize(emb.row(i), fit.stack);
    auto b = quantize(emb.row(i), fit.stack);
    CHECK(a.first.codes == b.first.codes);
    for (int j = 0; j < 4; ++j) CHECK(a.second.at(0, j) == b.second.at(0, j));
  }
}

TEST_CASE("tokenizer metric analytic cases") {
  // Uniform usage of all 8192 codes in one layer.
  std::vector<SemanticId> codes;
  for (int i = 0; i < 8192; ++i) codes.push_back(SemanticId{{i}});
  auto m = code_distribution_metrics(codes, 1, 8192);
  CHECK(m.utilization[0] == 1.0);
  CHECK(m.entropy[0] == doctest::Approx(std::log(8192.0)).epsilon(1e-12));
  CHECK(m.entropy[0] == doctest::Approx(9.0109).epsilon(1e-4));
  CHECK(8.9191 <= m.entropy[0]);  // reported entropies stay under ln(N_t)

  // Degenerate: all items on one code.
  std::vector<SemanticId> one;
  for (int i = 0; i < 100; ++i) one.push_back(SemanticId{{3}});
  auto m1 = code_distribution_metrics(one, 1, 64);
  CHECK(m1.utilization[0] == doctest::Approx(1.0 / 64));
  CHECK(m1.entropy[0] == 0.0);
}

TEST_CASE("reconstruction error is non-increasing in quantization depth") {
  Rng rng(31);
  Array flat = random_array({256, 6}, rng);
  auto emb = embeddings_from(flat, 2, 3);
  double prev = 1e300;
  for (int depth = 1; depth <= 4; ++depth) {
    RqConfig cfg;
    cfg.codebook_size = 8;
    cfg.n_layers = depth;
    auto fit = fit_rq_kmeans(emb, cfg);
    auto m = tokenizer_metrics(fit.corpus_codes, fit.stack, emb);
    CHECK(m.recon_loss <= prev + 1e-12);
    prev = m.recon_loss;
  }
}

TEST_CASE("kmeans objective is non-increasing at every rq layer") {
  Rng rng(37);
  Array flat = random_array({200, 5}, rng);
  auto fit = fit_rq_kmeans(embeddings_from(flat, 1, 5), RqConfig{.n_layers = 3, .codebook_size = 10});
  for (const auto& trace : fit.layer_objectives)
    for (size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-9);
}

TEST_CASE("utilization is 1.0 on the fitting corpus") {
  Rng rng(41);
  Array flat = random_array({300, 4}, rng);
  auto emb = embeddings_from(flat, 1, 4);
  auto fit = fit_rq_kmeans(emb, RqConfig{.n_layers = 3, .codebook_size = 16});
  auto m = tokenizer_metrics(fit.corpus_codes, fit.stack, emb);
  for (double u : m.utilization) CHECK(u == 1.0);
}

TEST_CASE("trie accepts exactly the quantized corpus") {
  Rng rng(43);
  Array flat = random_array({64, 4}, rng);
  auto emb = embeddings_from(flat, 1, 4);
  auto fit = fit_rq_kmeans(emb, RqConfig{.n_layers = 3, .codebook_size = 4});
  std::set<std::vector<int>> corpus;
  for (const auto& id : fit.corpus_codes) corpus.insert(id.codes);
  // Exhaustive 4^3 check.
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      for (int c = 0; c < 4; ++c) {
        std::vector<int> seq{a, b, c};
        CHECK(fit.stack.trie.accepts(seq) == (corpus.count(seq) > 0));
      }
  CHECK(fit.stack.trie.item_count() == 64);
}

TEST_CASE("rq-kmeans beats the fixed-random-codebook baseline directionally") {
  Rng rng(47);
  // Clustered corpus (structure to exploit).
  Array flat({512, 8});
  for (int i = 0; i < 512; ++i) {
    int c = i % 8;
    for (int j = 0; j < 8; ++j)
      flat.at(i, j) = ((c >> (j % 3)) & 1) * 4.0 + rng.normal(0.0, 0.5);
  }
  auto emb = embeddings_from(flat, 2, 4);
  RqConfig cfg;
  cfg.codebook_size = 16;
  cfg.n_layers = 3;
  auto km = fit_rq_kmeans(emb, cfg);
  auto rnd = fit_random_rq(emb, cfg);
  auto m_km = tokenizer_metrics(km.corpus_codes, km.stack, emb);
  auto m_rnd = tokenizer_metrics(rnd.corpus_codes, rnd.stack, emb);
  CHECK(m_km.recon_loss < m_rnd.recon_loss);
}

TEST_CASE("codebooks and trie survive a save/load round trip") {
  Rng rng(53);
  Array flat = random_array({64, 4}, rng);
  auto emb = embeddings_from(flat, 2, 2);
  auto fit = fit_rq_kmeans(emb, RqConfig{.n_layers = 2, .codebook_size = 8});
  std::string path = "/tmp/genrec_test_codebooks.bin";
  save_codebooks(fit.stack, path);
  CodebookStack loaded = load_codebooks(path);
  CHECK(loaded.n_layers == 2);
  CHECK(loaded.codebook_size == 8);
  CHECK(loaded.emb_queries == 2);
  CHECK(loaded.trie.item_count() == fit.stack.trie.item_count());
  for (int i = 0; i < 64; ++i) {
    auto a = quantize(emb.row(i), fit.stack);
    auto b = quantize(emb.row(i), loaded);
    CHECK(a.first.codes == b.first.codes);
  }

  save_codes_jsonl(fit.corpus_codes, "/tmp/genrec_test_codes.jsonl");
  auto codes = load_codes_jsonl("/tmp/genrec_test_codes.jsonl");
  REQUIRE(codes.size() == fit.corpus_codes.size());
  for (size_t i = 0; i < codes.size(); ++i) CHECK(codes[i].codes == fit.corpus_codes[i].codes);
}

TEST_CASE("corpus smaller than the codebook is rejected") {
  Rng rng(59);
  Array flat = random_array({4, 4}, rng);
  CHECK_THROWS(fit_rq_kmeans(embeddings_from(flat, 1, 4), RqConfig{.n_layers = 1, .codebook_size = 8}));
}
