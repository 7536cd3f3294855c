#include "genrec/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "genrec/io.hpp"
#include "json.hpp"

namespace genrec {

namespace {

constexpr const char* kVersion = "0.1.0";

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

// Structured-text config block: one key=value per line, fixed order.
std::string world_config_text(const WorldConfig& c) {
  std::ostringstream os;
  os << "n_users=" << c.n_users << "\n"
     << "n_items=" << c.n_items << "\n"
     << "n_authors=" << c.n_authors << "\n"
     << "latent_dim=" << c.latent_dim << "\n"
     << "n_item_clusters=" << c.n_item_clusters << "\n"
     << "n_user_clusters=" << c.n_user_clusters << "\n"
     << "cluster_spread=" << format_double(c.cluster_spread) << "\n"
     << "content_tokens=" << c.content_tokens << "\n"
     << "content_dim=" << c.content_dim << "\n"
     << "content_noise=" << format_double(c.content_noise) << "\n"
     << "obs_noise=" << format_double(c.obs_noise) << "\n"
     << "viral_fraction=" << format_double(c.viral_fraction) << "\n";
  for (int o = 0; o < kNumObjectives; ++o) {
    os << "objective_scale." << kObjectiveNames[o] << "="
       << format_double(c.objective_scale[static_cast<size_t>(o)]) << "\n";
    os << "objective_bias." << kObjectiveNames[o] << "="
       << format_double(c.objective_bias[static_cast<size_t>(o)]) << "\n";
    os << "composite_weight." << kObjectiveNames[o] << "="
       << format_double(c.composite_weights[static_cast<size_t>(o)]) << "\n";
  }
  os << "min_duration=" << format_double(c.min_duration) << "\n"
     << "max_duration=" << format_double(c.max_duration) << "\n"
     << "session_len_min=" << c.session_len_min << "\n"
     << "session_len_max=" << c.session_len_max << "\n"
     << "logging_temperature=" << format_double(c.logging_temperature) << "\n"
     << "seed=" << c.seed << "\n";
  return os.str();
}

WorldConfig parse_world_config(const std::string& text) {
  WorldConfig c;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    auto pos = line.find('=');
    if (pos == std::string::npos) continue;
    kv[line.substr(0, pos)] = line.substr(pos + 1);
  }
  auto geti = [&](const std::string& k) { return std::stoi(kv.at(k)); };
  auto getd = [&](const std::string& k) { return std::stod(kv.at(k)); };
  c.n_users = geti("n_users");
  c.n_items = geti("n_items");
  c.n_authors = geti("n_authors");
  c.latent_dim = geti("latent_dim");
  c.n_item_clusters = geti("n_item_clusters");
  c.n_user_clusters = geti("n_user_clusters");
  c.cluster_spread = getd("cluster_spread");
  c.content_tokens = geti("content_tokens");
  c.content_dim = geti("content_dim");
  c.content_noise = getd("content_noise");
  c.obs_noise = getd("obs_noise");
  c.viral_fraction = getd("viral_fraction");
  for (int o = 0; o < kNumObjectives; ++o) {
    c.objective_scale[static_cast<size_t>(o)] = getd(std::string("objective_scale.") + kObjectiveNames[o]);
    c.objective_bias[static_cast<size_t>(o)] = getd(std::string("objective_bias.") + kObjectiveNames[o]);
    c.composite_weights[static_cast<size_t>(o)] = getd(std::string("composite_weight.") + kObjectiveNames[o]);
  }
  c.min_duration = getd("min_duration");
  c.max_duration = getd("max_duration");
  c.session_len_min = geti("session_len_min");
  c.session_len_max = geti("session_len_max");
  c.logging_temperature = getd("logging_temperature");
  c.seed = std::stoull(kv.at("seed"));
  return c;
}

}  // namespace

void write_manifest(const std::string& dir, const std::string& stage,
                    const std::string& config_text, uint64_t seed) {
  nlohmann::json j;
  j["stage"] = stage;
  j["config_hash"] = fnv1a(config_text);
  j["seed"] = seed;
  j["version"] = kVersion;
  write_text_file(join(dir, "manifest.json"), j.dump(2) + "\n");
}

void require_fresh_run_dir(const std::string& dir) {
  require(!file_exists(join(dir, "manifest.json")),
          "run directory already holds a completed run: " + dir);
  ensure_dir(dir);
}

void write_summary(const std::string& dir, const std::map<std::string, std::vector<double>>& m) {
  nlohmann::json j;
  for (const auto& [k, v] : m) {
    nlohmann::json arr = nlohmann::json::array();
    for (double x : v) arr.push_back(x);
    j[k] = arr;
  }
  write_text_file(join(dir, "summary.json"), j.dump(2) + "\n");
}

std::map<std::string, std::vector<double>> load_summary(const std::string& dir) {
  auto j = nlohmann::json::parse(read_text_file(join(dir, "summary.json")));
  std::map<std::string, std::vector<double>> out;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::vector<double> v;
    if (it.value().is_array())
      for (const auto& x : it.value()) v.push_back(x.get<double>());
    else
      v.push_back(it.value().get<double>());
    out[it.key()] = std::move(v);
  }
  return out;
}

// ---- world persistence ---------------------------------------------------------

void save_world(const World& world, const InteractionLog& log, const std::string& dir) {
  write_text_file(join(dir, "config.txt"), world_config_text(world.cfg));
  BinaryWriter w(join(dir, "latents.bin"));
  w.magic("GRWD");
  w.u32(1);
  w.array(world.user_latent);
  w.array(world.item_latent);
  w.array(world.user_obs);
  w.array(world.item_obs);
  w.array(world.item_content);
  w.array(world.obj_weight);
  w.u64(world.item_author.size());
  for (int a : world.item_author) w.i64(a);
  for (double t : world.item_tag) w.f64(t);
  for (double d : world.item_duration) w.f64(d);
  for (uint8_t v : world.item_viral) w.u32(v);
  for (int c : world.item_cluster) w.i64(c);
  w.close();

  std::ostringstream os;
  for (const auto& ev : log.events) {
    nlohmann::json j;
    j["user"] = ev.user;
    j["item"] = ev.item;
    j["session"] = ev.session;
    j["ts"] = ev.ts;
    j["playtime"] = ev.playtime;
    j["duration"] = ev.duration;
    j["labels"] = ev.labels.bits;
    os << j.dump() << "\n";
  }
  write_text_file(join(dir, "logs.jsonl"), os.str());
}

World load_world(const std::string& dir) {
  World w;
  w.cfg = parse_world_config(read_text_file(join(dir, "config.txt")));
  BinaryReader r(join(dir, "latents.bin"));
  r.expect_magic("GRWD");
  require(r.u32() == 1, "unsupported world snapshot version");
  w.user_latent = r.array();
  w.item_latent = r.array();
  w.user_obs = r.array();
  w.item_obs = r.array();
  w.item_content = r.array();
  w.obj_weight = r.array();
  uint64_t n = r.u64();
  w.item_author.resize(n);
  w.item_tag.resize(n);
  w.item_duration.resize(n);
  w.item_viral.resize(n);
  w.item_cluster.resize(n);
  for (auto& a : w.item_author) a = static_cast<int>(r.i64());
  for (auto& t : w.item_tag) t = r.f64();
  for (auto& d : w.item_duration) d = r.f64();
  for (auto& v : w.item_viral) v = static_cast<uint8_t>(r.u32());
  for (auto& c : w.item_cluster) c = static_cast<int>(r.i64());
  return w;
}

InteractionLog load_log(const std::string& dir) {
  InteractionLog log;
  std::istringstream in(read_text_file(join(dir, "logs.jsonl")));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Interaction ev;
    ev.user = j.at("user");
    ev.item = j.at("item");
    ev.session = j.at("session");
    ev.ts = j.at("ts");
    ev.playtime = j.at("playtime");
    ev.duration = j.at("duration");
    ev.labels.bits = j.at("labels");
    log.events.push_back(ev);
  }
  return log;
}

void save_embeddings(const ItemEmbeddings& emb, const std::string& path) {
  BinaryWriter w(path);
  w.magic("GREM");
  w.u32(1);
  w.u32(static_cast<uint32_t>(emb.n_queries));
  w.u32(static_cast<uint32_t>(emb.dim));
  w.array(emb.flat);
  w.close();
}

ItemEmbeddings load_embeddings(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic("GREM");
  require(r.u32() == 1, "unsupported embedding file version");
  ItemEmbeddings emb;
  emb.n_queries = static_cast<int>(r.u32());
  emb.dim = static_cast<int>(r.u32());
  emb.flat = r.array();
  return emb;
}

// ---- stages -----------------------------------------------------------------------

void stage_gen_world(const WorldStageConfig& cfg, const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = generate_world(cfg.world);
  Rng rng(cfg.world.seed ^ 0x10675ULL);
  InteractionLog log = simulate_sessions(world, cfg.base_sessions, rng);
  save_world(world, log, out_dir);
  write_summary(out_dir, {{"n_users", {static_cast<double>(cfg.world.n_users)}},
                          {"n_items", {static_cast<double>(cfg.world.n_items)}},
                          {"n_events", {static_cast<double>(log.events.size())}},
                          {"viral_count", {static_cast<double>(world.viral_count())}}});
  write_manifest(out_dir, "gen-world",
                 world_config_text(cfg.world) + "base_sessions=" + std::to_string(cfg.base_sessions),
                 cfg.world.seed);
}

namespace {

std::string tokenizer_config_text(const TokenizerStageConfig& cfg) {
  std::ostringstream os;
  os << "n_queries=" << cfg.align.n_queries << "\nalign_layers=" << cfg.align.n_layers
     << "\nheads=" << cfg.align.heads << "\nffn_hidden=" << cfg.align.ffn_hidden
     << "\ntemperature=" << format_double(cfg.align.temperature)
     << "\nbatch_pairs=" << cfg.align.batch_pairs << "\nsteps=" << cfg.align.steps
     << "\nlr=" << format_double(cfg.align.lr) << "\nalign_seed=" << cfg.align.seed
     << "\nrq_layers=" << cfg.rq.n_layers << "\ncodebook_size=" << cfg.rq.codebook_size
     << "\nrq_seed=" << cfg.rq.seed << "\nbaseline=" << cfg.compare_random_baseline << "\n";
  return os.str();
}

}  // namespace

void stage_fit_tokenizer(const std::string& world_dir, const TokenizerStageConfig& cfg,
                         const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  InteractionLog log = load_log(world_dir);

  // Content geometry always comes from the world snapshot.
  TokenizerStageConfig stage_cfg = cfg;
  stage_cfg.align.content_tokens = world.cfg.content_tokens;
  stage_cfg.align.content_dim = world.cfg.content_dim;

  std::vector<double> align_curve;
  ItemEmbeddings emb = align_embeddings(world, log, stage_cfg.align, &align_curve);
  CsvWriter align_csv(join(out_dir, "align_loss.csv"), {"step", "loss"});
  for (size_t i = 0; i < align_curve.size(); ++i)
    align_csv.row({static_cast<double>(i), align_curve[i]});
  align_csv.close();
  save_embeddings(emb, join(out_dir, "embeddings.bin"));

  RqFitResult fit = fit_rq_kmeans(emb, stage_cfg.rq);
  save_codebooks(fit.stack, join(out_dir, "codebooks.bin"));
  save_codes_jsonl(fit.corpus_codes, join(out_dir, "codes.jsonl"));
  TokenizerMetrics m = tokenizer_metrics(fit.corpus_codes, fit.stack, emb);

  std::map<std::string, std::vector<double>> summary;
  summary["recon_loss"] = {m.recon_loss};
  summary["utilization"] = m.utilization;
  summary["entropy"] = m.entropy;
  summary["collisions"] = {static_cast<double>(fit.stack.trie.collision_count())};
  summary["leaves"] = {static_cast<double>(fit.stack.trie.leaf_count())};
  if (stage_cfg.compare_random_baseline) {
    RqFitResult base = fit_random_rq(emb, stage_cfg.rq);
    TokenizerMetrics bm = tokenizer_metrics(base.corpus_codes, base.stack, emb);
    summary["baseline_recon_loss"] = {bm.recon_loss};
    summary["baseline_utilization"] = bm.utilization;
    summary["baseline_entropy"] = bm.entropy;
  }
  write_summary(out_dir, summary);
  write_manifest(out_dir, "fit-tokenizer", tokenizer_config_text(stage_cfg), stage_cfg.rq.seed);
}

void stage_tokenize(const std::string& tokenizer_dir, const std::string& codebook_path,
                    const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  ItemEmbeddings emb = load_embeddings(join(tokenizer_dir, "embeddings.bin"));
  CodebookStack stack = load_codebooks(codebook_path);
  std::vector<SemanticId> codes;
  for (int i = 0; i < emb.n_items(); ++i) codes.push_back(quantize(emb.row(i), stack).first);
  save_codes_jsonl(codes, join(out_dir, "codes.jsonl"));
  TokenizerMetrics m = tokenizer_metrics(codes, stack, emb);
  write_summary(out_dir, {{"recon_loss", {m.recon_loss}},
                          {"utilization", m.utilization},
                          {"entropy", m.entropy}});
  write_manifest(out_dir, "tokenize", codebook_path, 0);
}

namespace {

std::string policy_config_text(const PolicyConfig& c) {
  std::ostringstream os;
  os << "n_layers=" << c.n_layers << "\nd_model=" << c.d_model << "\nffn_hidden=" << c.ffn_hidden
     << "\nn_heads=" << c.n_heads << "\nmoe=" << c.moe_enabled << "\nn_experts=" << c.n_experts
     << "\nexperts_active=" << c.experts_active
     << "\nmoe_location=" << (c.moe_location == MoeLocation::decoder ? "decoder" : "enc_and_dec")
     << "\nexpert_round_multiple=" << c.expert_round_multiple
     << "\nn_code_layers=" << c.n_code_layers << "\ncodebook_size=" << c.codebook_size
     << "\nshort_len=" << c.short_len << "\npositive_len=" << c.positive_len
     << "\nlifelong_len=" << c.lifelong_len << "\nn_queries=" << c.n_queries
     << "\nlifelong_blocks=" << c.lifelong_blocks << "\nvid_vocab=" << c.vid_vocab
     << "\naid_vocab=" << c.aid_vocab << "\nuid_vocab=" << c.uid_vocab
     << "\nuse_sid_history=" << c.use_sid_history << "\nvid_only=" << c.vid_only_features
     << "\ncompress_threshold=" << c.compress_threshold
     << "\nmoe_bias_update=" << format_double(c.moe_bias_update) << "\nseed=" << c.seed << "\n";
  return os.str();
}

CodebookStack load_stack_of(const std::string& tokenizer_dir) {
  return load_codebooks((std::filesystem::path(tokenizer_dir) / "codebooks.bin").string());
}

std::vector<SemanticId> load_codes_of(const std::string& tokenizer_dir) {
  return load_codes_jsonl((std::filesystem::path(tokenizer_dir) / "codes.jsonl").string());
}

double tail_mean(const std::vector<double>& v, size_t n) {
  if (v.empty()) return 0;
  size_t from = v.size() > n ? v.size() - n : 0;
  double s = 0;
  for (size_t i = from; i < v.size(); ++i) s += v[i];
  return s / static_cast<double>(v.size() - from);
}

}  // namespace

void stage_pretrain(const std::string& world_dir, const std::string& tokenizer_dir,
                    const PretrainStageConfig& cfg, const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  auto codes = load_codes_of(tokenizer_dir);
  CodebookStack stack = load_stack_of(tokenizer_dir);
  require(cfg.policy.codebook_size == stack.codebook_size &&
              cfg.policy.n_code_layers == stack.n_layers,
          "policy vocabulary does not match the fitted codebooks");
  PolicyModel policy(cfg.policy);
  SessionStream stream(world, codes, cfg.policy, cfg.stream_seed);
  CsvWriter csv(join(out_dir, "train_metrics.csv"), {"step", "ntp_loss", "load_max_over_mean"});
  PretrainResult res = pretrain(policy, stream, cfg.steps, cfg.batch_sessions, cfg.lr_dense,
                                cfg.lr_sparse, nullptr);
  for (size_t i = 0; i < res.loss_curve.size(); ++i)
    csv.row({static_cast<double>(i), res.loss_curve[i],
             i < res.load_max_over_mean.size() ? res.load_max_over_mean[i] : 0.0});
  csv.close();
  policy.save(join(out_dir, "checkpoint.bin"));
  write_summary(out_dir, {{"final_loss", {tail_mean(res.loss_curve, 20)}},
                          {"steps", {static_cast<double>(cfg.steps)}},
                          {"params", {static_cast<double>(policy.params().total_size())}}});
  write_manifest(out_dir, "pretrain",
                 policy_config_text(cfg.policy) + "steps=" + std::to_string(cfg.steps) +
                     "\nbatch_sessions=" + std::to_string(cfg.batch_sessions) +
                     "\nlr_dense=" + format_double(cfg.lr_dense) +
                     "\nlr_sparse=" + format_double(cfg.lr_sparse),
                 cfg.stream_seed);
}

void stage_train_pscore(const std::string& world_dir, const PScoreStageConfig& cfg,
                        const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  InteractionLog log;
  if (cfg.sessions > 0) {
    Rng rng(cfg.pscore.seed ^ 0x9e37ULL);
    log = simulate_sessions(world, cfg.sessions, rng);
  } else {
    log = load_log(world_dir);
  }
  PScoreTrainReport report;
  PScoreModel model = train_pscore(world, log, cfg.pscore, &report);
  model.save(join(out_dir, "pscore.bin"));
  CsvWriter csv(join(out_dir, "train_metrics.csv"), {"step", "loss"});
  for (size_t i = 0; i < report.loss_curve.size(); ++i)
    csv.row({static_cast<double>(i), report.loss_curve[i]});
  csv.close();
  write_summary(out_dir, {{"holdout_auc_vtr", {report.holdout_auc_vtr}},
                          {"final_loss", {tail_mean(report.loss_curve, 20)}}});
  std::ostringstream cfgtext;
  cfgtext << "steps=" << cfg.pscore.steps << "\nbatch=" << cfg.pscore.batch
          << "\nlr=" << format_double(cfg.pscore.lr) << "\nhidden=" << cfg.pscore.encoder_hidden
          << "\ntower=" << cfg.pscore.tower_hidden;
  write_manifest(out_dir, "train-pscore", cfgtext.str(), cfg.pscore.seed);
}

namespace {

std::string posttrain_config_text(const PosttrainStageConfig& cfg) {
  const PostTrainConfig& p = cfg.post;
  std::ostringstream os;
  os << "steps=" << cfg.steps << "\neps=" << format_double(p.eps)
     << "\ndelta=" << format_double(p.delta) << "\ngroup_size=" << p.group_size
     << "\nformat_k=" << p.format_k
     << "\nformat_mode=" << (p.format_mode == FormatMode::topk ? "topk" : "random")
     << "\nformat_enabled=" << p.format_enabled << "\npreference_enabled=" << p.preference_enabled
     << "\nreference=" << (p.reference_mode == ReferenceMode::pretrained ? "pretrained" : "current")
     << "\nstrategy=" << (p.strategy == SearchStrategy::beam ? "beam" : "topk_topp")
     << "\nconstrain=" << p.constrain_generation << "\nsync_period=" << p.sync_period
     << "\nrl_user_fraction=" << format_double(p.rl_user_fraction) << "\nsir=" << p.sir_enabled
     << "\nsir_f=" << format_double(p.sir_f) << "\nsir_alpha=" << format_double(p.sir_alpha)
     << "\nrsft_weight=" << format_double(p.rsft_weight)
     << "\nrl_weight=" << format_double(p.rl_weight)
     << "\nlr_dense=" << format_double(p.lr_dense) << "\nlr_sparse=" << format_double(p.lr_sparse)
     << "\nbatch_sessions=" << p.batch_sessions << "\nreward_objective=" << p.reward_objective
     << "\nseed=" << p.seed;
  return os.str();
}

}  // namespace

void stage_posttrain(const std::string& world_dir, const std::string& tokenizer_dir,
                     const std::string& checkpoint, const std::string& pscore_path,
                     const PosttrainStageConfig& cfg, const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  auto codes = load_codes_of(tokenizer_dir);
  CodebookStack stack = load_stack_of(tokenizer_dir);
  PolicyModel policy = PolicyModel::load(checkpoint);
  PScoreModel pscore = PScoreModel::load(pscore_path);
  SessionStream stream(world, codes, policy.config(), cfg.post.seed ^ 0x57ea3ULL);

  PostTrainer trainer(policy, stream, stack, pscore, cfg.post);
  std::vector<AuditRow> audit;
  trainer.set_audit_sink(&audit);
  CsvWriter csv(join(out_dir, "train_metrics.csv"),
                {"step", "ntp_loss", "ecpo_objective", "format_objective", "mean_reward",
                 "legality_rate", "clip_fraction", "viral_exposure", "load_max_over_mean",
                 "rl_users", "rl_samples"});
  std::vector<double> legality_curve, reward_curve;
  for (int i = 0; i < cfg.steps; ++i) {
    StepMetrics m = trainer.step();
    legality_curve.push_back(m.legality);
    reward_curve.push_back(m.mean_reward);
    csv.row({static_cast<double>(i), m.ntp_loss, m.ecpo_objective, m.format_objective,
             m.mean_reward, m.legality, m.clip_fraction, m.viral_exposure, m.load_max_over_mean,
             static_cast<double>(m.rl_users), static_cast<double>(m.rl_samples)});
  }
  csv.close();
  policy.save(join(out_dir, "checkpoint.bin"));

  std::ostringstream audit_csv;
  audit_csv << "user_id,codes,r,r_adjusted,legal,viral\n";
  for (const auto& row : audit) {
    audit_csv << row.user << ",\"";
    for (size_t i = 0; i < row.codes.codes.size(); ++i)
      audit_csv << (i ? "-" : "") << row.codes.codes[i];
    audit_csv << "\"," << format_double(row.reward) << "," << format_double(row.adjusted_reward)
              << "," << (row.legal ? 1 : 0) << "," << (row.viral ? 1 : 0) << "\n";
  }
  write_text_file(join(out_dir, "reward_audit.csv"), audit_csv.str());

  write_summary(out_dir, {{"final_legality", {tail_mean(legality_curve, 10)}},
                          {"final_reward", {tail_mean(reward_curve, 10)}},
                          {"steps", {static_cast<double>(cfg.steps)}}});
  write_manifest(out_dir, "posttrain", posttrain_config_text(cfg), cfg.post.seed);
}

void stage_generate(const std::string& world_dir, const std::string& tokenizer_dir,
                    const std::string& checkpoint, const GenerateStageConfig& cfg,
                    const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  auto codes = load_codes_of(tokenizer_dir);
  CodebookStack stack = load_stack_of(tokenizer_dir);
  PolicyModel policy = PolicyModel::load(checkpoint);
  SessionStream stream(world, codes, policy.config(), cfg.stream_seed);
  if (cfg.warmup_sessions > 0) stream.next_batch(cfg.warmup_sessions, false);

  std::ostringstream os;
  double legal_sum = 0;
  Rng rng(cfg.seed);
  for (int u = 0; u < cfg.n_users; ++u) {
    UserContext ctx = stream.current_context(u);
    Array z = policy.encode_eval(ctx);
    Rng gen_rng = rng.split(static_cast<uint64_t>(u));
    auto items = generate(cfg.request, policy_scorer(policy, z), policy.config().n_code_layers,
                          policy.config().codebook_size, stack.trie, gen_rng);
    legal_sum += items.empty() ? 0 : legality_rate(items);
    for (const auto& item : items) {
      nlohmann::json j;
      j["user_id"] = u;
      j["codes"] = item.codes.codes;
      j["log_prob"] = item.log_prob;
      j["legal"] = item.legal;
      j["item_ids"] = item.item_ids;
      os << j.dump() << "\n";
    }
  }
  write_text_file(join(out_dir, "results.jsonl"), os.str());
  write_summary(out_dir, {{"legality_rate", {legal_sum / std::max(1, cfg.n_users)}}});
  std::ostringstream cfgtext;
  cfgtext << "width=" << cfg.request.width << "\nconstrain=" << cfg.request.constrain_to_trie
          << "\nusers=" << cfg.n_users;
  write_manifest(out_dir, "generate", cfgtext.str(), cfg.seed);
}

void stage_eval(const std::string& world_dir, const std::string& tokenizer_dir,
                const std::string& checkpoint, const std::string& pscore_path,
                const EvalStageConfig& cfg, const std::string& out_dir) {
  require_fresh_run_dir(out_dir);
  World world = load_world(world_dir);
  auto codes = load_codes_of(tokenizer_dir);
  CodebookStack stack = load_stack_of(tokenizer_dir);
  PolicyModel policy = PolicyModel::load(checkpoint);
  PScoreModel pscore = PScoreModel::load(pscore_path);
  SessionStream stream(world, codes, policy.config(), cfg.stream_seed);
  if (cfg.warmup_sessions > 0) stream.next_batch(cfg.warmup_sessions, false);

  Rng rng(cfg.seed);
  int n_users = std::min(cfg.n_users, world.cfg.n_users);
  auto gen = [&](int user, int count) {
    UserContext ctx = stream.current_context(user);
    Array z = policy.encode_eval(ctx);
    GenerationRequest req;
    req.strategy = cfg.strategy;
    req.width = count;
    req.constrain_to_trie = cfg.constrain_to_trie;
    Rng gen_rng = rng.split(static_cast<uint64_t>(user) + 1000);
    return generate(req, policy_scorer(policy, z), policy.config().n_code_layers,
                    policy.config().codebook_size, stack.trie, gen_rng);
  };
  auto resolve = [&](const GeneratedItem& item, Rng& r) -> int64_t {
    return item.item_ids[static_cast<size_t>(r.randint(static_cast<int64_t>(item.item_ids.size())))];
  };
  // Objective rewards come from the world oracle; illegal sequences earn 0.
  auto composite_oracle = [&](int user, const GeneratedItem& item) {
    if (!item.legal) return 0.0;
    Rng r(static_cast<uint64_t>(user) * 977 + static_cast<uint64_t>(item.codes.codes[0]));
    return world.composite_reward(user, resolve(item, r));
  };
  PassAtKResult composite = pass_at_k_eval(n_users, cfg.k_values, gen, composite_oracle);

  // Per-objective ground truth plus the learned preference score of the full
  // Pass@maxK list.
  int max_k = cfg.k_values.back();
  std::array<double, kNumObjectives> mean_xtr{};
  double mean_pscore = 0, legality_sum = 0;
  int64_t scored = 0;
  for (int u = 0; u < n_users; ++u) {
    auto items = gen(u, max_k);
    if (!items.empty()) legality_sum += legality_rate(items);
    Array user_row({1, world.cfg.latent_dim});
    for (int j = 0; j < world.cfg.latent_dim; ++j) user_row.at(0, j) = world.user_obs.at(u, j);
    for (const auto& item : items) {
      if (!item.legal) continue;
      Rng r(static_cast<uint64_t>(u) * 31 + 7);
      int64_t id = resolve(item, r);
      auto xtr = world.true_xtr(u, id);
      for (int o = 0; o < kNumObjectives; ++o) mean_xtr[static_cast<size_t>(o)] += xtr[static_cast<size_t>(o)];
      Array item_row({1, world.cfg.latent_dim});
      for (int j = 0; j < world.cfg.latent_dim; ++j)
        item_row.at(0, j) = world.item_obs.at(static_cast<int>(id), j);
      mean_pscore += pscore.pscore(user_row, item_row);
      ++scored;
    }
  }
  if (scored > 0) {
    for (auto& v : mean_xtr) v /= static_cast<double>(scored);
    mean_pscore /= static_cast<double>(scored);
  }

  CsvWriter csv(join(out_dir, "pass_at_k.csv"), {"k", "mean_best_composite"});
  for (size_t i = 0; i < composite.k_values.size(); ++i)
    csv.row({static_cast<double>(composite.k_values[i]), composite.mean_best[i]});
  csv.close();

  std::map<std::string, std::vector<double>> summary;
  for (int o = 0; o < kNumObjectives; ++o)
    summary[kObjectiveNames[o]] = {mean_xtr[static_cast<size_t>(o)]};
  summary["pscore"] = {mean_pscore};
  summary["legality_rate"] = {legality_sum / std::max(1, n_users)};
  summary["pass_at_k_composite"] = composite.mean_best;
  write_summary(out_dir, summary);
  std::ostringstream cfgtext;
  cfgtext << "users=" << n_users << "\nmax_k=" << max_k
          << "\nstrategy=" << (cfg.strategy == SearchStrategy::beam ? "beam" : "topk_topp");
  write_manifest(out_dir, "eval", cfgtext.str(), cfg.seed);
}

// ---- comparison ---------------------------------------------------------------------

namespace {

// Two-sided 95% Student t quantiles for df 1..30.
double t_quantile_95(int df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306,
                                 2.262,  2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
                                 2.110,  2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
                                 2.060,  2.056, 2.052, 2.048, 2.045, 2.042};
  if (df < 1) return 0;
  if (df > 30) return 1.96;
  return table[df - 1];
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0 : s / static_cast<double>(v.size());
}

}  // namespace

std::vector<CompareRow> compare_runs(const std::string& dir_a, const std::string& dir_b,
                                     const std::vector<std::string>& metrics) {
  auto sa = load_summary(dir_a);
  auto sb = load_summary(dir_b);
  std::vector<CompareRow> rows;
  for (const auto& metric : metrics) {
    require(sa.count(metric) > 0, "metric absent in " + dir_a + ": " + metric);
    require(sb.count(metric) > 0, "metric absent in " + dir_b + ": " + metric);
    const auto& a = sa.at(metric);
    const auto& b = sb.at(metric);
    CompareRow row;
    row.metric = metric;
    row.baseline = mean_of(a);
    row.candidate = mean_of(b);
    row.relative_improvement =
        std::fabs(row.baseline) > 1e-300 ? (row.candidate - row.baseline) / std::fabs(row.baseline) : 0.0;
    if (a.size() == b.size() && a.size() >= 2) {
      row.paired = true;
      std::vector<double> diff;
      for (size_t i = 0; i < a.size(); ++i) diff.push_back(b[i] - a[i]);
      double m = mean_of(diff);
      double var = 0;
      for (double d : diff) var += (d - m) * (d - m) / static_cast<double>(diff.size() - 1);
      double se = std::sqrt(var / static_cast<double>(diff.size()));
      row.ci_half_width = t_quantile_95(static_cast<int>(diff.size()) - 1) * se;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_compare_table(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "metric,baseline,candidate,relative_improvement,ci_half_width,paired\n";
  for (const auto& r : rows) {
    os << r.metric << "," << format_double(r.baseline) << "," << format_double(r.candidate) << ","
       << format_double(r.relative_improvement) << ","
       << (r.paired ? format_double(r.ci_half_width) : std::string("")) << ","
       << (r.paired ? 1 : 0) << "\n";
  }
  return os.str();
}

// ---- sweeps -----------------------------------------------------------------------------

namespace {

// Collects selected metrics of a finished stage directory into arrays keyed
// by metric name, one entry per seed.
void merge_point_summary(std::map<std::string, std::vector<double>>& point,
                         const std::string& run_dir) {
  for (const auto& [metric, values] : load_summary(run_dir)) {
    if (values.size() == 1) point[metric].push_back(values[0]);
  }
}

}  // namespace

void stage_sweep(const SweepConfig& cfg, const std::string& out_root) {
  require_fresh_run_dir(out_root);
  require(!cfg.values.empty(), "sweep needs at least one value");
  std::ostringstream rows;
  rows << "axis,value,seed,run_dir\n";

  for (const std::string& value : cfg.values) {
    std::string point_dir = join(out_root, value);
    ensure_dir(point_dir);
    std::map<std::string, std::vector<double>> point_summary;

    for (uint64_t seed : cfg.seeds) {
      std::string run_dir = join(point_dir, "seed_" + std::to_string(seed));
      if (cfg.axis == "model-size" || cfg.axis == "feature-mode" || cfg.axis == "history-id") {
        PretrainStageConfig p = cfg.pretrain;
        if (cfg.axis == "model-size") {
          PolicyConfig arch = toy_arch(value);
          arch.codebook_size = p.policy.codebook_size;
          arch.n_code_layers = p.policy.n_code_layers;
          arch.vid_vocab = p.policy.vid_vocab;
          p.policy = arch;
        } else if (cfg.axis == "feature-mode") {
          require(value == "full" || value == "vid-only", "feature-mode value must be full|vid-only");
          p.policy.vid_only_features = value == "vid-only";
        } else {
          require(value == "vid" || value == "sid", "history-id value must be vid|sid");
          p.policy.use_sid_history = value == "sid";
        }
        p.policy.seed += seed;
        p.stream_seed ^= seed;
        stage_pretrain(cfg.world_dir, cfg.tokenizer_dir, p, run_dir);
        merge_point_summary(point_summary, run_dir);
        if (cfg.axis != "model-size" && !cfg.pscore_path.empty()) {
          EvalStageConfig e = cfg.eval;
          e.seed += seed;
          std::string eval_dir = join(run_dir, "eval");
          stage_eval(cfg.world_dir, cfg.tokenizer_dir, join(run_dir, "checkpoint.bin"),
                     cfg.pscore_path, e, eval_dir);
          merge_point_summary(point_summary, eval_dir);
        }
      } else if (cfg.axis == "codebook-size") {
        TokenizerStageConfig t;
        t.rq.codebook_size = std::stoi(value);
        t.rq.seed += seed;
        std::string tok_dir = join(run_dir, "tokenizer");
        stage_fit_tokenizer(cfg.world_dir, t, tok_dir);
        PretrainStageConfig p = cfg.pretrain;
        p.policy.codebook_size = t.rq.codebook_size;
        p.policy.seed += seed;
        p.stream_seed ^= seed;
        std::string pre_dir = join(run_dir, "pretrain");
        stage_pretrain(cfg.world_dir, tok_dir, p, pre_dir);
        merge_point_summary(point_summary, pre_dir);
        if (!cfg.pscore_path.empty()) {
          EvalStageConfig e = cfg.eval;
          e.seed += seed;
          std::string eval_dir = join(run_dir, "eval");
          stage_eval(cfg.world_dir, tok_dir, join(pre_dir, "checkpoint.bin"), cfg.pscore_path, e,
                     eval_dir);
          merge_point_summary(point_summary, eval_dir);
        }
      } else if (cfg.axis == "group-size" || cfg.axis == "search-strategy" ||
                 cfg.axis == "reference-mode" || cfg.axis == "format-mode" || cfg.axis == "sir") {
        PosttrainStageConfig p = cfg.posttrain;
        if (cfg.axis == "group-size") {
          p.post.group_size = std::stoi(value);
        } else if (cfg.axis == "search-strategy") {
          require(value == "beam" || value == "topk_topp", "strategy must be beam|topk_topp");
          p.post.strategy = value == "beam" ? SearchStrategy::beam : SearchStrategy::topk_topp;
        } else if (cfg.axis == "reference-mode") {
          require(value == "pretrained" || value == "current", "reference must be pretrained|current");
          p.post.reference_mode =
              value == "pretrained" ? ReferenceMode::pretrained : ReferenceMode::current_policy;
        } else if (cfg.axis == "format-mode") {
          require(value == "none" || value == "topk" || value == "random",
                  "format-mode must be none|topk|random");
          p.post.format_enabled = value != "none";
          if (value == "topk") p.post.format_mode = FormatMode::topk;
          if (value == "random") p.post.format_mode = FormatMode::random;
        } else {
          require(value == "on" || value == "off", "sir must be on|off");
          p.post.sir_enabled = value == "on";
        }
        p.post.seed += seed;
        std::string post_dir = join(run_dir, "posttrain");
        stage_posttrain(cfg.world_dir, cfg.tokenizer_dir, cfg.checkpoint, cfg.pscore_path, p,
                        post_dir);
        merge_point_summary(point_summary, post_dir);
        EvalStageConfig e = cfg.eval;
        e.seed += seed;
        std::string eval_dir = join(run_dir, "eval");
        stage_eval(cfg.world_dir, cfg.tokenizer_dir, join(post_dir, "checkpoint.bin"),
                   cfg.pscore_path, e, eval_dir);
        merge_point_summary(point_summary, eval_dir);
      } else if (cfg.axis == "pass-at-k") {
        EvalStageConfig e = cfg.eval;
        e.k_values.clear();
        for (const std::string& v : cfg.values) e.k_values.push_back(std::stoi(v));
        std::sort(e.k_values.begin(), e.k_values.end());
        e.seed += seed;
        stage_eval(cfg.world_dir, cfg.tokenizer_dir, cfg.checkpoint, cfg.pscore_path, e, run_dir);
        merge_point_summary(point_summary, run_dir);
      } else {
        throw std::invalid_argument("unknown sweep axis: " + cfg.axis);
      }
      rows << cfg.axis << "," << value << "," << seed << "," << run_dir << "\n";
      if (cfg.axis == "pass-at-k") break;  // one eval covers every K
    }
    write_summary(point_dir, point_summary);
    if (cfg.axis == "pass-at-k") break;
  }
  write_text_file(join(out_root, "sweep_points.csv"), rows.str());
  std::ostringstream cfgtext;
  cfgtext << "axis=" << cfg.axis << "\nvalues=";
  for (const auto& v : cfg.values) cfgtext << v << ";";
  cfgtext << "\nseeds=";
  for (uint64_t s : cfg.seeds) cfgtext << s << ";";
  write_manifest(out_root, "sweep", cfgtext.str(), cfg.seeds.empty() ? 0 : cfg.seeds[0]);
}

// ---- architecture presets -------------------------------------------------------------

PolicyConfig toy_arch(const std::string& name) {
  PolicyConfig c;
  c.codebook_size = 64;
  c.n_code_layers = 3;
  c.short_len = 6;
  c.positive_len = 8;
  c.lifelong_len = 16;
  c.n_queries = 4;
  c.lifelong_blocks = 2;
  c.vid_vocab = 4096;
  c.compress_threshold = 8;
  if (name == "toy-0.015b") {
    c.n_layers = 4;
    c.d_model = 16;
    c.ffn_hidden = 32;
    c.n_heads = 4;
  } else if (name == "toy-0.121b") {
    c.n_layers = 8;
    c.d_model = 32;
    c.ffn_hidden = 64;
    c.n_heads = 8;
  } else if (name == "toy-0.935b") {
    c.n_layers = 8;
    c.d_model = 32;
    c.ffn_hidden = 64;
    c.n_heads = 8;
    c.moe_enabled = true;
    c.n_experts = 24;
    c.experts_active = 2;
    c.moe_location = MoeLocation::decoder;
    c.expert_round_multiple = 4;
  } else if (name == "toy-2.633b") {
    c.n_layers = 24;
    c.d_model = 32;
    c.ffn_hidden = 64;
    c.n_heads = 8;
    c.moe_enabled = true;
    c.n_experts = 24;
    c.experts_active = 4;
    c.moe_location = MoeLocation::enc_and_dec;
    c.expert_round_multiple = 4;
  } else {
    throw std::invalid_argument("unknown architecture preset: " + name);
  }
  return c;
}

std::vector<std::string> toy_arch_names() {
  return {"toy-0.015b", "toy-0.121b", "toy-0.935b", "toy-2.633b"};
}

}  // namespace genrec
