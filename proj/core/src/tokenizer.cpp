#include "genrec/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "genrec/io.hpp"
#include "json.hpp"

namespace genrec {

Array ItemEmbeddings::row(int64_t item) const {
  Array out({1, vec_dim()});
  for (int j = 0; j < vec_dim(); ++j) out.at(0, j) = flat.at(static_cast<int>(item), j);
  return out;
}

AlignmentModel::AlignmentModel(const AlignConfig& cfg, Rng& rng) : cfg_(cfg) {
  GENREC_REQUIRE(cfg.n_layers >= 1, "alignment model needs at least one block");
  queries_ = params_.add("queries",
                         normal_init({cfg.n_queries, cfg.content_dim},
                                     1.0 / std::sqrt(cfg.content_dim), rng));
  for (int l = 0; l < cfg.n_layers; ++l)
    blocks_.push_back(make_qformer_block(params_, "block" + std::to_string(l), cfg.content_dim,
                                         cfg.heads, cfg.ffn_hidden, rng));
}

Var AlignmentModel::compress(ParamSession& s, Var tokens) const {
  GENREC_REQUIRE(tokens.cols() == cfg_.content_dim, "compress: token width mismatch");
  Var q = s[queries_];
  for (const auto& block : blocks_) q = qformer_block(s, block, q, tokens);
  return q;
}

Array AlignmentModel::compress_eval(const Array& tokens) {
  Tape tape;
  ParamSession s(tape, params_, false);
  return compress(s, tape.leaf(tokens)).value();
}

namespace {

// Users with any strong positive label (everything except plain vtr) per item.
std::map<int64_t, std::set<int>> positive_user_sets(const InteractionLog& logs) {
  std::map<int64_t, std::set<int>> engaged;
  for (const auto& ev : logs.events) {
    uint32_t strong = ev.labels.bits & ~(1u << objective_index("vtr"));
    if (strong) engaged[ev.item].insert(ev.user);
  }
  return engaged;
}

double cosine_from_sets(const std::set<int>& a, const std::set<int>& b) {
  if (a.empty() || b.empty()) return 0;
  int64_t inter = 0;
  for (int u : a)
    if (b.count(u)) ++inter;
  return static_cast<double>(inter) / std::sqrt(static_cast<double>(a.size()) * b.size());
}

}  // namespace

double co_engagement_similarity(const InteractionLog& logs, int64_t a, int64_t b) {
  auto engaged = positive_user_sets(logs);
  return cosine_from_sets(engaged[a], engaged[b]);
}

ItemPairSet build_item_pairs(const InteractionLog& logs, double i2i_threshold) {
  GENREC_REQUIRE(!logs.events.empty(), "build_item_pairs: empty log");
  auto engaged = positive_user_sets(logs);

  std::map<std::pair<int64_t, int64_t>, double> best;
  auto add_pair = [&](int64_t a, int64_t b, double w) {
    if (a == b || w <= 0) return;
    auto key = std::minmax(a, b);
    auto it = best.find({key.first, key.second});
    if (it == best.end() || it->second < w) best[{key.first, key.second}] = w;
  };

  // User-to-item: each positive target pairs with the most similar earlier
  // positive click of the same user.
  std::map<int, std::vector<int64_t>> history;
  for (const auto& ev : logs.events) {
    uint32_t strong = ev.labels.bits & ~(1u << objective_index("vtr"));
    if (!strong) continue;
    auto& prev = history[ev.user];
    int64_t best_item = -1;
    double best_sim = 0;
    for (int64_t p : prev) {
      if (p == ev.item) continue;
      double sim = cosine_from_sets(engaged[p], engaged[ev.item]);
      if (sim > best_sim) {
        best_sim = sim;
        best_item = p;
      }
    }
    if (best_item >= 0) add_pair(ev.item, best_item, best_sim);
    prev.push_back(ev.item);
  }

  // Item-to-item: co-engagement similarity above the threshold.
  std::vector<int64_t> items;
  for (const auto& [item, users] : engaged)
    if (!users.empty()) items.push_back(item);
  for (size_t i = 0; i < items.size(); ++i) {
    for (size_t j = i + 1; j < items.size(); ++j) {
      double sim = cosine_from_sets(engaged[items[i]], engaged[items[j]]);
      if (sim >= i2i_threshold) add_pair(items[i], items[j], sim);
    }
  }

  ItemPairSet out;
  for (const auto& [key, w] : best) out.pairs.push_back({key.first, key.second, w});
  return out;
}

Var cosine_similarity(Var a_flat, Var b_flat) {
  Var dot = sum(mul(a_flat, b_flat));
  Var na = sqrt_op(add_scalar(sum(mul(a_flat, a_flat)), 1e-12));
  Var nb = sqrt_op(add_scalar(sum(mul(b_flat, b_flat)), 1e-12));
  return div(dot, mul(na, nb));
}

Var i2i_contrastive_loss(Var sims, double temperature) {
  GENREC_REQUIRE(temperature > 0, "i2i loss: temperature must be positive");
  GENREC_REQUIRE(sims.value().size() >= 2, "i2i loss: a batch needs at least 2 pairs");
  Var z = mul_scalar(sims, 1.0 / temperature);
  Var lse = log_op(sum(exp_op(z)));
  return sub(lse, mean(z));
}

ItemEmbeddings align_embeddings(const World& world, const InteractionLog& logs,
                                const AlignConfig& cfg, std::vector<double>* loss_curve) {
  GENREC_REQUIRE(cfg.content_tokens == world.cfg.content_tokens &&
              cfg.content_dim == world.cfg.content_dim,
          "align config does not match the world's content shape");
  Rng rng(cfg.seed);
  AlignmentModel model(cfg, rng);
  ItemPairSet pairs = build_item_pairs(logs);
  Adam adam(AdamConfig{.lr = cfg.lr});

  if (pairs.pairs.size() >= 2) {
    for (int step = 0; step < cfg.steps; ++step) {
      Tape tape;
      ParamSession s(tape, model.params());
      std::vector<Var> sims;
      int b = std::min<int>(cfg.batch_pairs, static_cast<int>(pairs.pairs.size()));
      for (int k = 0; k < b; ++k) {
        const auto& pr = pairs.pairs[static_cast<size_t>(rng.randint(static_cast<int64_t>(pairs.pairs.size())))];
        Var ea = model.compress(s, tape.leaf(world.content_tokens_of(pr.a)));
        Var eb = model.compress(s, tape.leaf(world.content_tokens_of(pr.b)));
        sims.push_back(cosine_similarity(reshape(ea, {1, cfg.n_queries * cfg.content_dim}),
                                         reshape(eb, {1, cfg.n_queries * cfg.content_dim})));
      }
      Var loss = i2i_contrastive_loss(concat_rows(sims), cfg.temperature);
      if (loss_curve) loss_curve->push_back(loss.value().item());
      tape.backward(loss);
      adam.step(s);
    }
  }

  ItemEmbeddings out;
  out.n_queries = cfg.n_queries;
  out.dim = cfg.content_dim;
  out.flat = Array({world.cfg.n_items, cfg.n_queries * cfg.content_dim});
  for (int i = 0; i < world.cfg.n_items; ++i) {
    Array e = model.compress_eval(world.content_tokens_of(i));
    for (int j = 0; j < out.vec_dim(); ++j) out.flat.at(i, j) = e.at(j);
  }
  return out;
}

// ---- residual quantization ---------------------------------------------------

namespace {

RqFitResult fit_rq_impl(const ItemEmbeddings& embeddings, const RqConfig& cfg,
                        bool random_codebooks) {
  int n = embeddings.n_items();
  int d = embeddings.vec_dim();
  GENREC_REQUIRE(n >= cfg.codebook_size, "corpus smaller than the codebook size");
  GENREC_REQUIRE(cfg.n_layers >= 1, "need at least one quantization layer");

  RqFitResult res;
  res.stack.n_layers = cfg.n_layers;
  res.stack.codebook_size = cfg.codebook_size;
  res.stack.emb_queries = embeddings.n_queries;
  res.stack.emb_dim = embeddings.dim;
  res.stack.trie = SemanticTrie(cfg.n_layers);
  res.corpus_codes.assign(static_cast<size_t>(n), SemanticId{});

  Rng rng(cfg.seed);
  Array residual = Array({n, d});
  for (int64_t i = 0; i < residual.size(); ++i) residual.at(i) = embeddings.flat.at(i);

  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    Array codebook;
    std::vector<int> assignment(static_cast<size_t>(n));
    if (!random_codebooks) {
      KMeansResult km = kmeans(residual, cfg.codebook_size, rng, cfg.kmeans);
      codebook = km.centroids;
      assignment = km.assignment;
      res.layer_objectives.push_back(km.objective_per_iter);
    } else {
      // Moment-matched Gaussian centroids, never adapted to the data.
      std::vector<double> mean(static_cast<size_t>(d), 0), var(static_cast<size_t>(d), 0);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += residual.at(i, j) / n;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
          double diff = residual.at(i, j) - mean[static_cast<size_t>(j)];
          var[static_cast<size_t>(j)] += diff * diff / n;
        }
      codebook = Array({cfg.codebook_size, d});
      for (int c = 0; c < cfg.codebook_size; ++c)
        for (int j = 0; j < d; ++j)
          codebook.at(c, j) =
              mean[static_cast<size_t>(j)] + rng.normal(0.0, std::sqrt(var[static_cast<size_t>(j)]));
      for (int i = 0; i < n; ++i) {
        int best = 0;
        double best_d = 0;
        for (int c = 0; c < cfg.codebook_size; ++c) {
          double d2 = 0;
          for (int j = 0; j < d; ++j) {
            double diff = residual.at(i, j) - codebook.at(c, j);
            d2 += diff * diff;
          }
          if (c == 0 || d2 < best_d) {
            best_d = d2;
            best = c;
          }
        }
        assignment[static_cast<size_t>(i)] = best;
      }
      res.layer_objectives.push_back({});
    }

    res.stack.layers.push_back(codebook);
    for (int i = 0; i < n; ++i) {
      int c = assignment[static_cast<size_t>(i)];
      res.corpus_codes[static_cast<size_t>(i)].codes.push_back(c);
      for (int j = 0; j < d; ++j) residual.at(i, j) -= codebook.at(c, j);
    }
  }

  for (int i = 0; i < n; ++i) res.stack.trie.insert(res.corpus_codes[static_cast<size_t>(i)], i);
  return res;
}

}  // namespace

RqFitResult fit_rq_kmeans(const ItemEmbeddings& embeddings, const RqConfig& cfg) {
  return fit_rq_impl(embeddings, cfg, false);
}

RqFitResult fit_random_rq(const ItemEmbeddings& embeddings, const RqConfig& cfg) {
  return fit_rq_impl(embeddings, cfg, true);
}

std::pair<SemanticId, Array> quantize(const Array& flat_embedding, const CodebookStack& stack) {
  int d = stack.vec_dim();
  GENREC_REQUIRE(flat_embedding.size() == d, "quantize: embedding width mismatch");
  GENREC_REQUIRE(!stack.layers.empty(), "quantize: codebooks not fitted");
  SemanticId id;
  Array reconstruction({1, d});
  std::vector<double> residual(static_cast<size_t>(d));
  for (int j = 0; j < d; ++j) residual[static_cast<size_t>(j)] = flat_embedding.at(j);
  for (int layer = 0; layer < stack.n_layers; ++layer) {
    const Array& cb = stack.layers[static_cast<size_t>(layer)];
    int best = 0;
    double best_d = 0;
    for (int c = 0; c < stack.codebook_size; ++c) {
      double d2 = 0;
      for (int j = 0; j < d; ++j) {
        double diff = residual[static_cast<size_t>(j)] - cb.at(c, j);
        d2 += diff * diff;
      }
      if (c == 0 || d2 < best_d) {  // strict < keeps ties at the lowest index
        best_d = d2;
        best = c;
      }
    }
    id.codes.push_back(best);
    for (int j = 0; j < d; ++j) {
      residual[static_cast<size_t>(j)] -= cb.at(best, j);
      reconstruction.at(0, j) += cb.at(best, j);
    }
  }
  return {id, reconstruction};
}

TokenizerMetrics code_distribution_metrics(const std::vector<SemanticId>& codes, int n_layers,
                                           int codebook_size) {
  TokenizerMetrics m;
  m.utilization.assign(static_cast<size_t>(n_layers), 0);
  m.entropy.assign(static_cast<size_t>(n_layers), 0);
  if (codes.empty()) return m;
  for (int layer = 0; layer < n_layers; ++layer) {
    std::vector<int64_t> counts(static_cast<size_t>(codebook_size), 0);
    for (const auto& id : codes) counts[static_cast<size_t>(id.codes[static_cast<size_t>(layer)])]++;
    int64_t used = 0;
    double h = 0;
    double total = static_cast<double>(codes.size());
    for (int64_t c : counts) {
      if (c == 0) continue;
      ++used;
      double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
    m.utilization[static_cast<size_t>(layer)] = static_cast<double>(used) / codebook_size;
    m.entropy[static_cast<size_t>(layer)] = h;
  }
  return m;
}

TokenizerMetrics tokenizer_metrics(const std::vector<SemanticId>& codes,
                                   const CodebookStack& stack, const ItemEmbeddings& embeddings) {
  GENREC_REQUIRE(static_cast<int>(codes.size()) == embeddings.n_items(),
          "tokenizer_metrics: corpus must be quantized");
  TokenizerMetrics m = code_distribution_metrics(codes, stack.n_layers, stack.codebook_size);
  int d = stack.vec_dim();
  double total = 0;
  for (int i = 0; i < embeddings.n_items(); ++i) {
    const SemanticId& id = codes[static_cast<size_t>(i)];
    for (int j = 0; j < d; ++j) {
      double rec = 0;
      for (int layer = 0; layer < stack.n_layers; ++layer)
        rec += stack.layers[static_cast<size_t>(layer)].at(id.codes[static_cast<size_t>(layer)], j);
      double diff = embeddings.flat.at(i, j) - rec;
      total += diff * diff;
    }
  }
  m.recon_loss = total / (static_cast<double>(embeddings.n_items()) * d);
  return m;
}

// ---- persistence ----------------------------------------------------------------

namespace {
constexpr char kCodebookMagic[4] = {'G', 'R', 'T', 'K'};
constexpr uint32_t kCodebookVersion = 1;
}  // namespace

void save_codebooks(const CodebookStack& stack, const std::string& path) {
  BinaryWriter w(path);
  w.magic(kCodebookMagic);
  w.u32(kCodebookVersion);
  w.u32(static_cast<uint32_t>(stack.n_layers));
  w.u32(static_cast<uint32_t>(stack.codebook_size));
  w.u32(static_cast<uint32_t>(stack.emb_queries));
  w.u32(static_cast<uint32_t>(stack.emb_dim));
  for (const auto& layer : stack.layers) w.array(layer);
  // Trie edges as leaf paths with item lists.
  w.u64(static_cast<uint64_t>(stack.trie.leaf_count()));
  stack.trie.for_each_leaf([&](const SemanticId& id, const std::vector<int64_t>& items) {
    for (int c : id.codes) w.u32(static_cast<uint32_t>(c));
    w.u64(items.size());
    for (int64_t item : items) w.i64(item);
  });
  w.close();
}

CodebookStack load_codebooks(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kCodebookMagic);
  uint32_t version = r.u32();
  GENREC_REQUIRE(version == kCodebookVersion, "unsupported codebook file version");
  CodebookStack stack;
  stack.n_layers = static_cast<int>(r.u32());
  stack.codebook_size = static_cast<int>(r.u32());
  stack.emb_queries = static_cast<int>(r.u32());
  stack.emb_dim = static_cast<int>(r.u32());
  for (int l = 0; l < stack.n_layers; ++l) stack.layers.push_back(r.array());
  stack.trie = SemanticTrie(stack.n_layers);
  uint64_t leaves = r.u64();
  for (uint64_t i = 0; i < leaves; ++i) {
    SemanticId id;
    for (int l = 0; l < stack.n_layers; ++l) id.codes.push_back(static_cast<int>(r.u32()));
    uint64_t n_items = r.u64();
    for (uint64_t k = 0; k < n_items; ++k) stack.trie.insert(id, r.i64());
  }
  return stack;
}

void save_codes_jsonl(const std::vector<SemanticId>& codes, const std::string& path) {
  std::ostringstream os;
  for (size_t i = 0; i < codes.size(); ++i) {
    nlohmann::json j;
    j["item_id"] = i;
    j["codes"] = codes[i].codes;
    os << j.dump() << "\n";
  }
  write_text_file(path, os.str());
}

std::vector<SemanticId> load_codes_jsonl(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<SemanticId> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    SemanticId id;
    for (int c : j.at("codes")) id.codes.push_back(c);
    size_t item = j.at("item_id").get<size_t>();
    if (out.size() <= item) out.resize(item + 1);
    out[item] = std::move(id);
  }
  return out;
}

}  // namespace genrec
