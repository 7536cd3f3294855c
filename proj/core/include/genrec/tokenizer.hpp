#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "genrec/kmeans.hpp"
#include "genrec/nn.hpp"
#include "genrec/trie.hpp"
#include "genrec/world.hpp"

namespace genrec {

// Aligned item embeddings: each item is a (n_queries, dim) matrix, stored
// flattened so codebook distances are plain Euclidean norms over rows.
struct ItemEmbeddings {
  int n_queries = 0;
  int dim = 0;
  Array flat;  // (n_items, n_queries * dim)

  int vec_dim() const { return n_queries * dim; }
  int n_items() const { return flat.rows(); }
  Array row(int64_t item) const;  // (1, vec_dim)
};

struct AlignConfig {
  int content_tokens = 8;
  int content_dim = 32;
  int n_queries = 4;   // compressed rows per item
  int n_layers = 4;    // QFormer blocks
  int heads = 1;
  int ffn_hidden = 64;
  double temperature = 0.07;
  int batch_pairs = 16;
  int steps = 150;
  double lr = 1e-3;
  uint64_t seed = 7;
};

// Query-token compressor over raw content rows, trained with the in-batch
// item-to-item contrastive loss.
class AlignmentModel {
 public:
  AlignmentModel(const AlignConfig& cfg, Rng& rng);

  // (content_tokens, content_dim) -> (n_queries, content_dim).
  Var compress(ParamSession& s, Var tokens) const;
  Array compress_eval(const Array& tokens);

  const AlignConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }

 private:
  AlignConfig cfg_;
  ParamStore params_;
  ParamId queries_;
  std::vector<QFormerBlockParams> blocks_;
};

struct ItemPair {
  int64_t a = 0, b = 0;
  double weight = 0;
};

struct ItemPairSet {
  std::vector<ItemPair> pairs;
};

// Pair construction from interaction logs: user-to-item pairs (each positive
// target with the most co-engagement-similar earlier positive click) plus
// item-to-item pairs above a similarity threshold. Similarity is the cosine
// of binary user-engagement incidence vectors.
ItemPairSet build_item_pairs(const InteractionLog& logs, double i2i_threshold = 0.3);

// Cosine co-engagement similarity of two items in a log (exposed for tests).
double co_engagement_similarity(const InteractionLog& logs, int64_t a, int64_t b);

// In-batch contrastive loss: -mean log softmax of each pair's similarity
// against all pair similarities in the batch. sims is a (B,1) column of
// cosine similarities; throws for B < 2.
Var i2i_contrastive_loss(Var sims, double temperature);

// Cosine similarity of two flattened embeddings on the tape.
Var cosine_similarity(Var a_flat, Var b_flat);

// Trains the alignment model on world content and returns the compressed
// embeddings of the whole corpus.
ItemEmbeddings align_embeddings(const World& world, const InteractionLog& logs,
                                const AlignConfig& cfg, std::vector<double>* loss_curve = nullptr);

// ---- residual quantization ---------------------------------------------------

struct RqConfig {
  int n_layers = 3;       // quantization depth
  int codebook_size = 64; // centroids per layer
  KMeansOptions kmeans;
  uint64_t seed = 11;
};

struct CodebookStack {
  int n_layers = 0;
  int codebook_size = 0;
  int emb_queries = 0;  // logical per-item embedding shape
  int emb_dim = 0;
  std::vector<Array> layers;  // each (codebook_size, emb_queries * emb_dim)
  SemanticTrie trie;

  int vec_dim() const { return emb_queries * emb_dim; }
};

struct RqFitResult {
  CodebookStack stack;
  std::vector<SemanticId> corpus_codes;
  // Objective trace per layer for monotonicity checks.
  std::vector<std::vector<double>> layer_objectives;
};

// Residual K-means: layer l codebook is the K-means centroid set of the
// residuals left by layers < l. Requires corpus size >= codebook_size.
RqFitResult fit_rq_kmeans(const ItemEmbeddings& embeddings, const RqConfig& cfg);

// Same residual structure with fixed random codebooks (moment-matched
// Gaussian draws); the directional baseline.
RqFitResult fit_random_rq(const ItemEmbeddings& embeddings, const RqConfig& cfg);

// Nearest centroid per layer (ties to the lowest index), reconstruction as
// the sum of chosen centroids. Returns (codes, reconstruction (1, vec_dim)).
std::pair<SemanticId, Array> quantize(const Array& flat_embedding, const CodebookStack& stack);

struct TokenizerMetrics {
  double recon_loss = 0;            // elementwise mean squared error
  std::vector<double> utilization;  // per layer, fraction of used centroids
  std::vector<double> entropy;      // per layer, nats
};

TokenizerMetrics tokenizer_metrics(const std::vector<SemanticId>& codes,
                                   const CodebookStack& stack, const ItemEmbeddings& embeddings);

// Metrics that need only the code assignment (utilization/entropy).
TokenizerMetrics code_distribution_metrics(const std::vector<SemanticId>& codes,
                                           int n_layers, int codebook_size);

// Versioned binary persistence (codebooks + trie).
void save_codebooks(const CodebookStack& stack, const std::string& path);
CodebookStack load_codebooks(const std::string& path);

// JSON-lines {"item_id":..,"codes":[..]} export.
void save_codes_jsonl(const std::vector<SemanticId>& codes, const std::string& path);
std::vector<SemanticId> load_codes_jsonl(const std::string& path);

}  // namespace genrec
