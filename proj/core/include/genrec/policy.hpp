#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "genrec/nn.hpp"
#include "genrec/trie.hpp"
#include "genrec/world.hpp"

namespace genrec {

// One resolved history record, features already normalized for embedding.
struct InteractionFeature {
  int64_t vid = 0;
  std::vector<int> sid;  // semantic id codes when sid history is enabled
  int aid = 0;
  double tag = 0;       // numeric tag affinity
  double ts = 0;        // recency-relative, scaled
  double playtime = 0;  // scaled to [0,1]
  double duration = 0;  // scaled to [0,1]
  uint32_t labels = 0;
};

// The four pathway feature bundles for one user at one decision point.
struct UserContext {
  int uid = 0, gender = 0, age_bucket = 0;
  std::vector<InteractionFeature> short_seq;     // <= short_len, time ascending
  std::vector<InteractionFeature> positive_seq;  // <= positive_len
  std::vector<InteractionFeature> lifelong_seq;  // <= lifelong_len, post-compression
};

enum class MoeLocation { decoder, enc_and_dec };

struct PolicyConfig {
  // Architecture table fields.
  int n_layers = 4;  // encoder + decoder total; split equally
  int d_model = 128;
  int ffn_hidden = 256;  // dense FFN intermediate size (2 * d_model)
  int n_heads = 4;
  bool moe_enabled = false;
  int n_experts = 0;
  int experts_active = 0;
  MoeLocation moe_location = MoeLocation::decoder;
  int expert_round_multiple = 128;  // SwiGLU hidden rounds up to this

  // Semantic-id vocabulary.
  int n_code_layers = 3;  // quantization depth
  int codebook_size = 64; // per-layer vocabulary

  // Sequence geometry.
  int short_len = 20;
  int positive_len = 256;
  int lifelong_len = 2000;
  int n_queries = 128;     // lifelong query rows
  int lifelong_blocks = 2; // lifelong QFormer blocks

  // Hashed embedding vocabularies.
  int vid_vocab = 4096;
  int aid_vocab = 256;
  int uid_vocab = 1024;
  int gender_vocab = 3;
  int age_vocab = 8;
  int n_label_flags = kNumObjectives;

  // Use semantic-id code embeddings (shared with the decoder) for history
  // items instead of a dedicated vid table.
  bool use_sid_history = false;
  // Ablation baseline: history records carry only the vid embedding.
  bool vid_only_features = false;

  int compress_threshold = 8;     // lifelong clustering threshold M
  double moe_bias_update = 1e-3;  // loss-free balancing rate u
  uint64_t seed = 123;

  int enc_layers() const { return n_layers / 2; }
  int dec_layers() const { return n_layers - n_layers / 2; }
  int enc_seq_len() const { return 1 + short_len + positive_len + n_queries; }
  // Feature dims keep the architecture's ratios to d_model.
  int aid_dim() const { return std::max(1, d_model / 2); }
  int minor_dim() const { return std::max(1, d_model / 8); }
  int static_dim() const { return std::max(1, d_model / 16); }
  int expert_hidden() const { return expert_hidden_size(d_model, expert_round_multiple); }
};

void validate_context(const UserContext& ctx, const PolicyConfig& cfg);

// Per-forward record of MoE routing loads, one entry per MoE layer.
struct MoeTrace {
  std::vector<std::vector<int64_t>> per_layer;

  void merge(const MoeTrace& other);
  // Sum of loads across layers, per expert (layers must agree on width).
  std::vector<int64_t> totals() const;
};

// Encoder-decoder policy over semantic ids.
class PolicyModel {
 public:
  explicit PolicyModel(const PolicyConfig& cfg);

  const PolicyConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Pathways + positional embedding + encoder stack. (enc_seq_len, d_model).
  Var encode(ParamSession& s, const UserContext& ctx) const;

  // Pathway projections, exposed for shape and gradient tests.
  Var embed_static(ParamSession& s, const UserContext& ctx) const;        // (1, d)
  Var embed_short(ParamSession& s, const UserContext& ctx) const;         // (short_len, d)
  Var embed_positive(ParamSession& s, const UserContext& ctx) const;      // (positive_len, d)
  Var embed_lifelong(ParamSession& s, const UserContext& ctx) const;      // (n_queries, d)

  // Decoder over [BOS, tokens...]; returns per-position hidden states.
  Var decode(ParamSession& s, Var z_enc, std::span<const int> tokens,
             MoeTrace* trace = nullptr) const;

  // Logits over the vocabulary predicted at `position` (0 predicts the first
  // code). hidden is the decode() output.
  Var position_logits(ParamSession& s, Var hidden, int position) const;

  // Sum over positions of log P(code | prefix); differentiable.
  Var sequence_log_prob(ParamSession& s, Var z_enc, const SemanticId& target,
                        MoeTrace* trace = nullptr) const;
  // Next-token-prediction loss: negated sequence log-prob.
  Var ntp_loss(ParamSession& s, Var z_enc, const SemanticId& target,
               MoeTrace* trace = nullptr) const;

  // Gradient-free evaluation paths for generation.
  Array encode_eval(const UserContext& ctx) const;
  // Logits for the next code after `prefix` (prefix excludes BOS).
  Array next_logits_eval(const Array& z_enc, std::span<const int> prefix) const;

  // Loss-free balancing update on every MoE layer from a routing trace.
  void apply_balancing(const MoeTrace& trace);

  int n_moe_layers() const { return static_cast<int>(moe_layers_.size()); }
  const MoeParams& moe_layer(int i) const { return moe_layers_[static_cast<size_t>(i)]; }

  void save(const std::string& path) const;
  static PolicyModel load(const std::string& path);

 private:
  struct EncLayer {
    RmsNormParams n1, n2;
    AttentionParams attn;
    FfnParams ffn;
    int moe = -1;  // index into moe_layers_, -1 for dense
  };
  struct DecLayer {
    RmsNormParams n1, n2, n3;
    AttentionParams self_attn, cross_attn;
    FfnParams ffn;
    int moe = -1;
  };

  Var embed_records(ParamSession& s, const std::vector<InteractionFeature>& records,
                    const MlpParams& mlp, ParamId pad_row, int target_len) const;
  Var feature_rows(ParamSession& s, const std::vector<InteractionFeature>& records) const;
  Var ffn_or_moe(ParamSession& s, int moe_index, const FfnParams& ffn_params, Var x,
                 MoeTrace* trace) const;

  PolicyConfig cfg_;
  ParamStore params_;

  // Embedding tables.
  ParamId uid_emb_, gender_emb_, age_emb_;
  ParamId vid_emb_, aid_emb_, label_emb_;
  ParamId tag_proj_, ts_proj_, playtime_proj_, dur_proj_;  // (2, minor): weight row, bias row
  ParamId pad_short_, pad_positive_, pad_lifelong_;
  ParamId pos_emb_;

  MlpParams static_mlp_, short_mlp_, positive_mlp_, lifelong_mlp_;
  ParamId lifelong_queries_;
  std::vector<QFormerBlockParams> lifelong_qformer_;

  std::vector<EncLayer> enc_layers_;

  ParamId bos_emb_;
  std::vector<ParamId> token_emb_;      // per code layer
  std::vector<LinearParams> heads_;     // per predicted position
  std::vector<DecLayer> dec_layers_;
  std::vector<MoeParams> moe_layers_;
};

// Recursive K-means compression of a history. content holds one row per
// record. Sets of size <= threshold stay untouched; otherwise leaf-cluster
// members share aggregate features: categorical fields come from the record
// nearest the cluster center, continuous fields are cluster means. Keeps the
// most recent max_out records.
std::vector<InteractionFeature> compress_lifelong(
    const std::vector<InteractionFeature>& history, const Array& content, int threshold,
    int max_out, Rng& rng);

// Assembles the four pathway bundles from a user's event history (ascending
// time). corpus_codes, when given with use_sid_history, resolves items to
// semantic ids. Compression randomness derives from cfg.seed and uid only.
UserContext build_user_context(const World& world, int user,
                               std::span<const Interaction> history, const PolicyConfig& cfg,
                               const std::vector<SemanticId>* corpus_codes = nullptr);

}  // namespace genrec
