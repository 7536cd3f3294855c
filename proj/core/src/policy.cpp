#include "genrec/policy.hpp"

#include <algorithm>
#include <cmath>

#include "genrec/io.hpp"
#include "genrec/kmeans.hpp"
#include "json.hpp"

namespace genrec {

namespace {

int hashed(int64_t id, int vocab) {
  int64_t m = id % vocab;
  return static_cast<int>(m < 0 ? m + vocab : m);
}

constexpr double kTsScale = 100.0;

}  // namespace

void validate_context(const UserContext& ctx, const PolicyConfig& cfg) {
  auto check_seq = [&](const std::vector<InteractionFeature>& seq, int cap, const char* name) {
    GENREC_REQUIRE(static_cast<int>(seq.size()) <= cap,
            std::string(name) + " sequence exceeds its configured cap");
    for (size_t i = 0; i < seq.size(); ++i) {
      if (i > 0)
        GENREC_REQUIRE(seq[i].ts >= seq[i - 1].ts, std::string(name) + " sequence not time-ordered");
      GENREC_REQUIRE(seq[i].playtime <= seq[i].duration * 1.0 + 1e-6,
              "playtime exceeds duration");
      GENREC_REQUIRE(seq[i].labels < (1u << cfg.n_label_flags), "label bits outside defined flags");
    }
  };
  check_seq(ctx.short_seq, cfg.short_len, "short");
  check_seq(ctx.positive_seq, cfg.positive_len, "positive");
  check_seq(ctx.lifelong_seq, cfg.lifelong_len, "lifelong");
}

void MoeTrace::merge(const MoeTrace& other) {
  if (per_layer.empty()) {
    per_layer = other.per_layer;
    return;
  }
  GENREC_REQUIRE(per_layer.size() == other.per_layer.size(), "moe trace layer count mismatch");
  for (size_t l = 0; l < per_layer.size(); ++l)
    for (size_t e = 0; e < per_layer[l].size(); ++e) per_layer[l][e] += other.per_layer[l][e];
}

std::vector<int64_t> MoeTrace::totals() const {
  std::vector<int64_t> out;
  for (const auto& layer : per_layer) {
    if (out.empty()) out.assign(layer.size(), 0);
    for (size_t e = 0; e < layer.size(); ++e) out[e] += layer[e];
  }
  return out;
}

PolicyModel::PolicyModel(const PolicyConfig& cfg) : cfg_(cfg) {
  GENREC_REQUIRE(cfg.n_layers >= 2, "policy needs at least one encoder and one decoder layer");
  GENREC_REQUIRE(cfg.d_model % cfg.n_heads == 0, "heads must divide d_model");
  Rng rng(cfg.seed);
  int d = cfg.d_model;

  auto table = [&](const std::string& name, int vocab, int dim) {
    return params_.add(name, normal_init({vocab, dim}, 1.0 / std::sqrt(dim), rng), true);
  };

  uid_emb_ = table("emb.uid", cfg.uid_vocab, cfg.static_dim());
  gender_emb_ = table("emb.gender", cfg.gender_vocab, cfg.static_dim());
  age_emb_ = table("emb.age", cfg.age_vocab, cfg.static_dim());
  vid_emb_ = table("emb.vid", cfg.vid_vocab, d);
  aid_emb_ = table("emb.aid", cfg.aid_vocab, cfg.aid_dim());
  label_emb_ = table("emb.label", cfg.n_label_flags, cfg.minor_dim());
  tag_proj_ = params_.add("emb.tag", normal_init({2, cfg.minor_dim()}, 0.5, rng));
  ts_proj_ = params_.add("emb.ts", normal_init({2, cfg.minor_dim()}, 0.5, rng));
  playtime_proj_ = params_.add("emb.playtime", normal_init({2, cfg.minor_dim()}, 0.5, rng));
  dur_proj_ = params_.add("emb.duration", normal_init({2, cfg.minor_dim()}, 0.5, rng));
  pad_short_ = params_.add("pad.short", zeros_init({1, d}));
  pad_positive_ = params_.add("pad.positive", zeros_init({1, d}));
  pad_lifelong_ = params_.add("pad.lifelong", zeros_init({1, d}));
  pos_emb_ = params_.add("emb.pos", normal_init({cfg.enc_seq_len(), d}, 1.0 / std::sqrt(d), rng));

  int feat = cfg.vid_only_features ? d : d + cfg.aid_dim() + 5 * cfg.minor_dim();
  static_mlp_ = make_mlp(params_, "pathway.static", 3 * cfg.static_dim(), d, d, rng);
  short_mlp_ = make_mlp(params_, "pathway.short", feat, d, d, rng);
  positive_mlp_ = make_mlp(params_, "pathway.positive", feat, d, d, rng);
  lifelong_mlp_ = make_mlp(params_, "pathway.lifelong", feat, d, d, rng);

  lifelong_queries_ =
      params_.add("lifelong.queries", normal_init({cfg.n_queries, d}, 1.0 / std::sqrt(d), rng));
  for (int b = 0; b < cfg.lifelong_blocks; ++b)
    lifelong_qformer_.push_back(make_qformer_block(params_, "lifelong.block" + std::to_string(b),
                                                   d, cfg.n_heads, cfg.ffn_hidden, rng));

  bool enc_moe = cfg.moe_enabled && cfg.moe_location == MoeLocation::enc_and_dec;
  for (int l = 0; l < cfg.enc_layers(); ++l) {
    EncLayer layer;
    std::string name = "enc" + std::to_string(l);
    layer.n1 = make_rms_norm(params_, name + ".n1", d);
    layer.n2 = make_rms_norm(params_, name + ".n2", d);
    layer.attn = make_attention(params_, name + ".attn", d, cfg.n_heads, rng);
    if (enc_moe) {
      layer.moe = static_cast<int>(moe_layers_.size());
      moe_layers_.push_back(make_moe(params_, name + ".moe", d, cfg.expert_hidden(),
                                     cfg.n_experts, cfg.experts_active, rng));
    } else {
      layer.ffn = make_ffn(params_, name + ".ffn", d, cfg.ffn_hidden, rng);
    }
    enc_layers_.push_back(layer);
  }

  bos_emb_ = params_.add("dec.bos", normal_init({1, d}, 1.0 / std::sqrt(d), rng));
  for (int l = 0; l < cfg.n_code_layers; ++l)
    token_emb_.push_back(table("dec.tokens" + std::to_string(l), cfg.codebook_size, d));
  for (int l = 0; l < cfg.n_code_layers; ++l)
    heads_.push_back(
        make_linear(params_, "dec.head" + std::to_string(l), d, cfg.codebook_size, rng, false));

  for (int l = 0; l < cfg.dec_layers(); ++l) {
    DecLayer layer;
    std::string name = "dec" + std::to_string(l);
    layer.n1 = make_rms_norm(params_, name + ".n1", d);
    layer.n2 = make_rms_norm(params_, name + ".n2", d);
    layer.n3 = make_rms_norm(params_, name + ".n3", d);
    layer.self_attn = make_attention(params_, name + ".self", d, cfg.n_heads, rng);
    layer.cross_attn = make_attention(params_, name + ".cross", d, cfg.n_heads, rng);
    if (cfg.moe_enabled) {
      layer.moe = static_cast<int>(moe_layers_.size());
      moe_layers_.push_back(make_moe(params_, name + ".moe", d, cfg.expert_hidden(),
                                     cfg.n_experts, cfg.experts_active, rng));
    } else {
      layer.ffn = make_ffn(params_, name + ".ffn", d, cfg.ffn_hidden, rng);
    }
    dec_layers_.push_back(layer);
  }
}

Var PolicyModel::feature_rows(ParamSession& s,
                              const std::vector<InteractionFeature>& records) const {
  int n = static_cast<int>(records.size());
  GENREC_REQUIRE(n > 0, "feature_rows: empty record list");
  Tape& tape = s.tape();

  Var vid_rows{};
  if (cfg_.use_sid_history) {
    // Shared input/output representation: sum the per-layer code embeddings.
    std::vector<Var> per_layer;
    for (int l = 0; l < cfg_.n_code_layers; ++l) {
      std::vector<int> idx(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        const auto& sid = records[static_cast<size_t>(i)].sid;
        GENREC_REQUIRE(static_cast<int>(sid.size()) == cfg_.n_code_layers,
                "sid history enabled but record lacks semantic id codes");
        idx[static_cast<size_t>(i)] = sid[static_cast<size_t>(l)];
      }
      per_layer.push_back(gather_rows(s[token_emb_[static_cast<size_t>(l)]], idx));
    }
    vid_rows = per_layer[0];
    for (size_t l = 1; l < per_layer.size(); ++l) vid_rows = add(vid_rows, per_layer[l]);
  } else {
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      idx[static_cast<size_t>(i)] = hashed(records[static_cast<size_t>(i)].vid, cfg_.vid_vocab);
    vid_rows = gather_rows(s[vid_emb_], idx);
  }

  if (cfg_.vid_only_features) return vid_rows;

  std::vector<int> aidx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    aidx[static_cast<size_t>(i)] = hashed(records[static_cast<size_t>(i)].aid, cfg_.aid_vocab);
  Var aid_rows = gather_rows(s[aid_emb_], aidx);

  auto scalar_feature = [&](ParamId proj, auto getter) {
    Array col({n, 1});
    for (int i = 0; i < n; ++i) col.at(i, 0) = getter(records[static_cast<size_t>(i)]);
    Var p = s[proj];
    Var w = slice_rows(p, 0, 1);
    Var b = slice_rows(p, 1, 2);
    return add_rowvec(matmul(tape.leaf(col), w), b);
  };
  Var tag_rows = scalar_feature(tag_proj_, [](const InteractionFeature& r) { return r.tag; });
  Var ts_rows = scalar_feature(ts_proj_, [](const InteractionFeature& r) { return r.ts; });
  Var play_rows =
      scalar_feature(playtime_proj_, [](const InteractionFeature& r) { return r.playtime; });
  Var dur_rows =
      scalar_feature(dur_proj_, [](const InteractionFeature& r) { return r.duration; });

  // Multi-hot label bits -> sum of flag embeddings.
  Array hot({n, cfg_.n_label_flags});
  for (int i = 0; i < n; ++i)
    for (int f = 0; f < cfg_.n_label_flags; ++f)
      hot.at(i, f) = (records[static_cast<size_t>(i)].labels >> f) & 1u ? 1.0 : 0.0;
  Var label_rows = matmul(tape.leaf(hot), s[label_emb_]);

  return concat_cols({vid_rows, aid_rows, tag_rows, ts_rows, play_rows, dur_rows, label_rows});
}

Var PolicyModel::embed_records(ParamSession& s, const std::vector<InteractionFeature>& records,
                               const MlpParams& mlp, ParamId pad_row, int target_len) const {
  int n = static_cast<int>(records.size());
  Var content{};
  if (n > 0) content = mlp_leaky(s, mlp, feature_rows(s, records));
  if (target_len < 0) {
    // Variable-length pathway: an empty history becomes the padding row.
    return n > 0 ? content : s[pad_row];
  }
  GENREC_REQUIRE(n <= target_len, "pathway sequence longer than its cap");
  if (n == target_len) return content;
  std::vector<Var> parts;
  Var pad = s[pad_row];
  for (int i = 0; i < target_len - n; ++i) parts.push_back(pad);
  if (n > 0) parts.push_back(content);
  return concat_rows(parts);
}

Var PolicyModel::embed_static(ParamSession& s, const UserContext& ctx) const {
  Var u = gather_rows(s[uid_emb_], {hashed(ctx.uid, cfg_.uid_vocab)});
  Var g = gather_rows(s[gender_emb_], {hashed(ctx.gender, cfg_.gender_vocab)});
  Var a = gather_rows(s[age_emb_], {hashed(ctx.age_bucket, cfg_.age_vocab)});
  return mlp_leaky(s, static_mlp_, concat_cols({u, g, a}));
}

Var PolicyModel::embed_short(ParamSession& s, const UserContext& ctx) const {
  return embed_records(s, ctx.short_seq, short_mlp_, pad_short_, cfg_.short_len);
}

Var PolicyModel::embed_positive(ParamSession& s, const UserContext& ctx) const {
  return embed_records(s, ctx.positive_seq, positive_mlp_, pad_positive_, cfg_.positive_len);
}

Var PolicyModel::embed_lifelong(ParamSession& s, const UserContext& ctx) const {
  Var keys = embed_records(s, ctx.lifelong_seq, lifelong_mlp_, pad_lifelong_, -1);
  Var q = s[lifelong_queries_];
  for (const auto& block : lifelong_qformer_) q = qformer_block(s, block, q, keys);
  return q;
}

Var PolicyModel::ffn_or_moe(ParamSession& s, int moe_index, const FfnParams& ffn_params, Var x,
                            MoeTrace* trace) const {
  if (moe_index < 0) return ffn(s, ffn_params, x);
  MoeOutput out = moe_forward(s, moe_layers_[static_cast<size_t>(moe_index)], x);
  if (trace) {
    if (trace->per_layer.size() < moe_layers_.size())
      trace->per_layer.resize(moe_layers_.size());
    auto& slot = trace->per_layer[static_cast<size_t>(moe_index)];
    if (slot.empty()) slot.assign(out.loads.size(), 0);
    for (size_t e = 0; e < out.loads.size(); ++e) slot[e] += out.loads[e];
  }
  return out.out;
}

Var PolicyModel::encode(ParamSession& s, const UserContext& ctx) const {
  validate_context(ctx, cfg_);
  Var z = concat_rows(
      {embed_static(s, ctx), embed_short(s, ctx), embed_positive(s, ctx), embed_lifelong(s, ctx)});
  z = add(z, s[pos_emb_]);
  for (const auto& layer : enc_layers_) {
    Var nz = rms_norm(s, layer.n1, z);
    z = add(z, attention(s, layer.attn, nz, nz));
    z = add(z, ffn_or_moe(s, layer.moe, layer.ffn, rms_norm(s, layer.n2, z), nullptr));
  }
  return z;
}

Var PolicyModel::decode(ParamSession& s, Var z_enc, std::span<const int> tokens,
                        MoeTrace* trace) const {
  GENREC_REQUIRE(static_cast<int>(tokens.size()) <= cfg_.n_code_layers,
          "decoder input longer than the code depth");
  std::vector<Var> rows{s[bos_emb_]};
  for (size_t j = 0; j < tokens.size(); ++j) {
    GENREC_REQUIRE(tokens[j] >= 0 && tokens[j] < cfg_.codebook_size,
            "decoder token outside its layer vocabulary");
    rows.push_back(gather_rows(s[token_emb_[j]], {tokens[j]}));
  }
  Var d = rows.size() == 1 ? rows[0] : concat_rows(rows);
  int len = d.rows();
  std::vector<int> causal(static_cast<size_t>(len));
  for (int i = 0; i < len; ++i) causal[static_cast<size_t>(i)] = i + 1;
  for (const auto& layer : dec_layers_) {
    Var nd = rms_norm(s, layer.n1, d);
    d = add(d, attention(s, layer.self_attn, nd, nd, &causal));
    d = add(d, attention(s, layer.cross_attn, rms_norm(s, layer.n2, d), z_enc));
    d = add(d, ffn_or_moe(s, layer.moe, layer.ffn, rms_norm(s, layer.n3, d), trace));
  }
  return d;
}

Var PolicyModel::position_logits(ParamSession& s, Var hidden, int position) const {
  GENREC_REQUIRE(position >= 0 && position < cfg_.n_code_layers, "no prediction head at this position");
  GENREC_REQUIRE(position < hidden.rows(), "position beyond the decoded sequence");
  return linear(s, heads_[static_cast<size_t>(position)],
                slice_rows(hidden, position, position + 1));
}

Var PolicyModel::sequence_log_prob(ParamSession& s, Var z_enc, const SemanticId& target,
                                   MoeTrace* trace) const {
  GENREC_REQUIRE(static_cast<int>(target.codes.size()) == cfg_.n_code_layers,
          "target must be a full semantic id");
  // Input [BOS, s1 .. s^{L-1}]; position j predicts code j.
  std::span<const int> prefix(target.codes.data(), target.codes.size() - 1);
  Var hidden = decode(s, z_enc, prefix, trace);
  std::vector<Var> terms;
  for (int j = 0; j < cfg_.n_code_layers; ++j) {
    Var logits = position_logits(s, hidden, j);
    terms.push_back(picked_log_softmax(logits, {target.codes[static_cast<size_t>(j)]}));
  }
  return sum(concat_rows(terms));
}

Var PolicyModel::ntp_loss(ParamSession& s, Var z_enc, const SemanticId& target,
                          MoeTrace* trace) const {
  return neg(sequence_log_prob(s, z_enc, target, trace));
}

Array PolicyModel::encode_eval(const UserContext& ctx) const {
  Tape tape;
  ParamSession s(tape, const_cast<ParamStore&>(params_), false);
  return encode(s, ctx).value();
}

Array PolicyModel::next_logits_eval(const Array& z_enc, std::span<const int> prefix) const {
  Tape tape;
  ParamSession s(tape, const_cast<ParamStore&>(params_), false);
  Var z = tape.leaf(z_enc);
  Var hidden = decode(s, z, prefix, nullptr);
  return position_logits(s, hidden, static_cast<int>(prefix.size())).value();
}

void PolicyModel::apply_balancing(const MoeTrace& trace) {
  if (cfg_.moe_bias_update <= 0) return;  // balancing disabled
  GENREC_REQUIRE(trace.per_layer.size() == moe_layers_.size(), "balancing trace layer count mismatch");
  for (size_t l = 0; l < moe_layers_.size(); ++l) {
    if (trace.per_layer[l].empty()) continue;
    update_gate_bias(params_, moe_layers_[l], trace.per_layer[l], cfg_.moe_bias_update);
  }
}

// ---- persistence ------------------------------------------------------------

namespace {

constexpr char kPolicyMagic[4] = {'G', 'R', 'C', 'P'};
constexpr uint32_t kPolicyVersion = 1;

nlohmann::json config_json(const PolicyConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},
                        {"d_model", c.d_model},
                        {"ffn_hidden", c.ffn_hidden},
                        {"n_heads", c.n_heads},
                        {"moe_enabled", c.moe_enabled},
                        {"n_experts", c.n_experts},
                        {"experts_active", c.experts_active},
                        {"moe_location", c.moe_location == MoeLocation::decoder ? "decoder" : "enc_and_dec"},
                        {"expert_round_multiple", c.expert_round_multiple},
                        {"n_code_layers", c.n_code_layers},
                        {"codebook_size", c.codebook_size},
                        {"short_len", c.short_len},
                        {"positive_len", c.positive_len},
                        {"lifelong_len", c.lifelong_len},
                        {"n_queries", c.n_queries},
                        {"lifelong_blocks", c.lifelong_blocks},
                        {"vid_vocab", c.vid_vocab},
                        {"aid_vocab", c.aid_vocab},
                        {"uid_vocab", c.uid_vocab},
                        {"gender_vocab", c.gender_vocab},
                        {"age_vocab", c.age_vocab},
                        {"n_label_flags", c.n_label_flags},
                        {"use_sid_history", c.use_sid_history},
                        {"vid_only_features", c.vid_only_features},
                        {"compress_threshold", c.compress_threshold},
                        {"moe_bias_update", c.moe_bias_update},
                        {"seed", c.seed}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.n_layers = j.at("n_layers");
  c.d_model = j.at("d_model");
  c.ffn_hidden = j.at("ffn_hidden");
  c.n_heads = j.at("n_heads");
  c.moe_enabled = j.at("moe_enabled");
  c.n_experts = j.at("n_experts");
  c.experts_active = j.at("experts_active");
  c.moe_location = j.at("moe_location") == "decoder" ? MoeLocation::decoder : MoeLocation::enc_and_dec;
  c.expert_round_multiple = j.at("expert_round_multiple");
  c.n_code_layers = j.at("n_code_layers");
  c.codebook_size = j.at("codebook_size");
  c.short_len = j.at("short_len");
  c.positive_len = j.at("positive_len");
  c.lifelong_len = j.at("lifelong_len");
  c.n_queries = j.at("n_queries");
  c.lifelong_blocks = j.at("lifelong_blocks");
  c.vid_vocab = j.at("vid_vocab");
  c.aid_vocab = j.at("aid_vocab");
  c.uid_vocab = j.at("uid_vocab");
  c.gender_vocab = j.at("gender_vocab");
  c.age_vocab = j.at("age_vocab");
  c.n_label_flags = j.at("n_label_flags");
  c.use_sid_history = j.at("use_sid_history");
  c.vid_only_features = j.value("vid_only_features", false);
  c.compress_threshold = j.at("compress_threshold");
  c.moe_bias_update = j.at("moe_bias_update");
  c.seed = j.at("seed");
  return c;
}

}  // namespace

void PolicyModel::save(const std::string& path) const {
  BinaryWriter w(path);
  w.magic(kPolicyMagic);
  w.u32(kPolicyVersion);
  w.str(config_json(cfg_).dump());
  w.u64(static_cast<uint64_t>(params_.count()));
  for (const auto& e : params_.entries()) {
    w.str(e.name);
    w.array(e.value);
  }
  w.close();
}

PolicyModel PolicyModel::load(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kPolicyMagic);
  uint32_t version = r.u32();
  GENREC_REQUIRE(version == kPolicyVersion, "unsupported checkpoint version");
  PolicyConfig cfg = config_from_json(nlohmann::json::parse(r.str()));
  PolicyModel model(cfg);
  uint64_t count = r.u64();
  GENREC_REQUIRE(count == static_cast<uint64_t>(model.params_.count()),
          "checkpoint parameter count mismatch");
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    Array value = r.array();
    ParamId p = model.params_.find(name);
    GENREC_REQUIRE(p.valid(), "checkpoint has unknown parameter: " + name);
    GENREC_REQUIRE(model.params_.value(p).same_shape(value), "checkpoint shape mismatch for " + name);
    model.params_.value(p) = std::move(value);
  }
  return model;
}

// ---- context construction ------------------------------------------------------

std::vector<InteractionFeature> compress_lifelong(
    const std::vector<InteractionFeature>& history, const Array& content, int threshold,
    int max_out, Rng& rng) {
  int n = static_cast<int>(history.size());
  GENREC_REQUIRE(n > 0, "compress_lifelong: empty history");
  GENREC_REQUIRE(content.rows() == n, "compress_lifelong: one content row per record");
  GENREC_REQUIRE(max_out >= 1, "compress_lifelong: max_out must be >= 1");

  std::vector<InteractionFeature> out;
  if (n <= threshold) {
    out = history;
  } else {
    std::vector<int> labels = hierarchical_clusters(content, threshold, rng);
    int n_leaves = 1 + *std::max_element(labels.begin(), labels.end());
    int d = content.cols();

    // Leaf centers, member lists, and continuous-feature means.
    std::vector<std::vector<int>> members(static_cast<size_t>(n_leaves));
    for (int i = 0; i < n; ++i) members[static_cast<size_t>(labels[static_cast<size_t>(i)])].push_back(i);
    std::vector<InteractionFeature> leaf_feature(static_cast<size_t>(n_leaves));
    for (int leaf = 0; leaf < n_leaves; ++leaf) {
      const auto& m = members[static_cast<size_t>(leaf)];
      if (m.empty()) continue;
      std::vector<double> center(static_cast<size_t>(d), 0);
      for (int i : m)
        for (int j = 0; j < d; ++j) center[static_cast<size_t>(j)] += content.at(i, j) / static_cast<double>(m.size());
      // Representative: member nearest the cluster center.
      int rep = m[0];
      double best = 1e300;
      for (int i : m) {
        double dist = 0;
        for (int j = 0; j < d; ++j) {
          double diff = content.at(i, j) - center[static_cast<size_t>(j)];
          dist += diff * diff;
        }
        if (dist < best) {
          best = dist;
          rep = i;
        }
      }
      InteractionFeature f = history[static_cast<size_t>(rep)];  // categorical fields inherited
      f.tag = f.ts = f.playtime = f.duration = 0;
      for (int i : m) {
        f.tag += history[static_cast<size_t>(i)].tag / static_cast<double>(m.size());
        f.ts += history[static_cast<size_t>(i)].ts / static_cast<double>(m.size());
        f.playtime += history[static_cast<size_t>(i)].playtime / static_cast<double>(m.size());
        f.duration += history[static_cast<size_t>(i)].duration / static_cast<double>(m.size());
      }
      // Averaged playtime may slightly exceed averaged duration only if the
      // inputs did; keep the invariant tight anyway.
      f.playtime = std::min(f.playtime, f.duration);
      leaf_feature[static_cast<size_t>(leaf)] = f;
    }
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      InteractionFeature f = leaf_feature[static_cast<size_t>(labels[static_cast<size_t>(i)])];
      f.ts = history[static_cast<size_t>(i)].ts;  // keep the sequence time-ordered
      out.push_back(f);
    }
  }
  if (static_cast<int>(out.size()) > max_out)
    out.erase(out.begin(), out.end() - max_out);
  return out;
}

namespace {

InteractionFeature to_feature(const World& world, const Interaction& ev, double now,
                              const std::vector<SemanticId>* corpus_codes, bool want_sid) {
  InteractionFeature f;
  f.vid = ev.item;
  if (want_sid && corpus_codes)
    f.sid = (*corpus_codes)[static_cast<size_t>(ev.item)].codes;
  f.aid = world.item_author[static_cast<size_t>(ev.item)];
  f.tag = world.item_tag[static_cast<size_t>(ev.item)];
  f.ts = (ev.ts - now) / kTsScale;
  f.playtime = ev.playtime / world.cfg.max_duration;
  f.duration = ev.duration / world.cfg.max_duration;
  f.labels = ev.labels.bits;
  return f;
}

}  // namespace

UserContext build_user_context(const World& world, int user, std::span<const Interaction> history,
                               const PolicyConfig& cfg,
                               const std::vector<SemanticId>* corpus_codes) {
  UserContext ctx;
  ctx.uid = user;
  // Demographics synthesized deterministically from the user id.
  ctx.gender = user % cfg.gender_vocab;
  ctx.age_bucket = (user / cfg.gender_vocab) % cfg.age_vocab;
  if (history.empty()) return ctx;

  double now = history.back().ts;
  bool sid = cfg.use_sid_history;
  GENREC_REQUIRE(!sid || corpus_codes != nullptr, "sid history requires corpus codes");

  int start_short = std::max(0, static_cast<int>(history.size()) - cfg.short_len);
  for (size_t i = static_cast<size_t>(start_short); i < history.size(); ++i)
    ctx.short_seq.push_back(to_feature(world, history[i], now, corpus_codes, sid));

  uint32_t strong_mask = ~(1u << objective_index("vtr"));
  std::vector<const Interaction*> positives;
  for (const auto& ev : history)
    if (ev.labels.bits & strong_mask) positives.push_back(&ev);
  int start_pos = std::max(0, static_cast<int>(positives.size()) - cfg.positive_len);
  for (size_t i = static_cast<size_t>(start_pos); i < positives.size(); ++i)
    ctx.positive_seq.push_back(to_feature(world, *positives[i], now, corpus_codes, sid));

  std::vector<InteractionFeature> full;
  Array content({static_cast<int>(history.size()), world.cfg.content_tokens * world.cfg.content_dim});
  for (size_t i = 0; i < history.size(); ++i) {
    full.push_back(to_feature(world, history[i], now, corpus_codes, sid));
    for (int j = 0; j < content.cols(); ++j)
      content.at(static_cast<int>(i), j) = world.item_content.at(static_cast<int>(history[i].item), j);
  }
  Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * static_cast<uint64_t>(user + 1)));
  ctx.lifelong_seq = compress_lifelong(full, content, cfg.compress_threshold, cfg.lifelong_len, rng);
  return ctx;
}

}  // namespace genrec
