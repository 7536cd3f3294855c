// Command-line front end for the generative recommender pipeline: world
// synthesis, tokenizer fitting, pre/post-training, generation, evaluation,
// sweeps, and run comparison. Every subcommand writes an isolated run
// directory with metrics and a manifest. Exit code 0 on success; failures
// leave a failure.json marker and print a JSON error record to stderr.

#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "genrec/harness.hpp"
#include "genrec/io.hpp"
#include "json.hpp"

using namespace genrec;

namespace {

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  for (const auto& tok : split_csv(s)) out.push_back(std::stoi(tok));
  return out;
}

int guarded(const std::string& out_dir, const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", e.what()}};
    if (!out_dir.empty()) {
      try {
        ensure_dir(out_dir);
        write_text_file(out_dir + "/failure.json", err.dump(2) + "\n");
      } catch (...) {
      }
    }
    std::cerr << err.dump() << "\n";
    return 1;
  }
}

void add_policy_flags(CLI::App* cmd, PolicyConfig& p, std::string& arch) {
  cmd->add_option("--arch", arch, "architecture preset (toy-0.015b .. toy-2.633b)");
  cmd->add_option("--layers", p.n_layers, "total transformer layers (encoder+decoder)");
  cmd->add_option("--d-model", p.d_model, "hidden width");
  cmd->add_option("--ffn-hidden", p.ffn_hidden, "dense FFN intermediate size");
  cmd->add_option("--heads", p.n_heads, "attention heads");
  cmd->add_flag("--moe", p.moe_enabled, "use mixture-of-experts feed-forward layers");
  cmd->add_option("--experts", p.n_experts, "total experts per MoE layer");
  cmd->add_option("--experts-active", p.experts_active, "active experts per token");
  cmd->add_option("--expert-round", p.expert_round_multiple, "expert hidden rounding multiple");
  cmd->add_option("--code-layers", p.n_code_layers, "semantic id depth");
  cmd->add_option("--codebook-size", p.codebook_size, "per-layer vocabulary");
  cmd->add_option("--short-len", p.short_len, "short pathway length");
  cmd->add_option("--positive-len", p.positive_len, "positive pathway length");
  cmd->add_option("--lifelong-len", p.lifelong_len, "lifelong pathway cap");
  cmd->add_option("--n-queries", p.n_queries, "lifelong query rows");
  cmd->add_option("--vid-vocab", p.vid_vocab, "hashed vid vocabulary");
  cmd->add_flag("--sid-history", p.use_sid_history, "encode history items by semantic id");
  cmd->add_flag("--vid-only", p.vid_only_features, "vid-only feature ablation");
  cmd->add_option("--policy-seed", p.seed, "parameter init seed");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale generative recommendation pipeline"};
  app.require_subcommand(1);
  app.set_config("--config", "", "read options from an INI file");

  // gen-world ------------------------------------------------------------------
  auto* gen_world = app.add_subcommand("gen-world", "synthesize a user/item world and base log");
  WorldStageConfig wcfg;
  std::string out_dir;
  gen_world->add_option("--out", out_dir, "output directory")->required();
  gen_world->add_option("--users", wcfg.world.n_users);
  gen_world->add_option("--items", wcfg.world.n_items);
  gen_world->add_option("--authors", wcfg.world.n_authors);
  gen_world->add_option("--latent-dim", wcfg.world.latent_dim);
  gen_world->add_option("--item-clusters", wcfg.world.n_item_clusters);
  gen_world->add_option("--content-tokens", wcfg.world.content_tokens);
  gen_world->add_option("--content-dim", wcfg.world.content_dim);
  gen_world->add_option("--viral-fraction", wcfg.world.viral_fraction);
  gen_world->add_option("--sessions", wcfg.base_sessions, "logging-policy sessions in the base log");
  gen_world->add_option("--seed", wcfg.world.seed);

  // fit-tokenizer --------------------------------------------------------------
  auto* fit_tok = app.add_subcommand("fit-tokenizer", "align embeddings and fit residual K-means");
  TokenizerStageConfig tcfg;
  std::string world_dir;
  fit_tok->add_option("--world", world_dir, "world directory")->required();
  fit_tok->add_option("--out", out_dir, "output directory")->required();
  fit_tok->add_option("--queries", tcfg.align.n_queries, "compressed rows per item");
  fit_tok->add_option("--align-layers", tcfg.align.n_layers);
  fit_tok->add_option("--align-steps", tcfg.align.steps);
  fit_tok->add_option("--align-lr", tcfg.align.lr);
  fit_tok->add_option("--temperature", tcfg.align.temperature);
  fit_tok->add_option("--rq-layers", tcfg.rq.n_layers, "quantization depth");
  fit_tok->add_option("--codebook-size", tcfg.rq.codebook_size);
  fit_tok->add_option("--seed", tcfg.rq.seed);
  bool no_baseline = false;
  fit_tok->add_flag("--no-baseline", no_baseline, "skip the random-codebook baseline");

  // tokenize ---------------------------------------------------------------------
  auto* tokenize_cmd = app.add_subcommand("tokenize", "quantize stored embeddings with a codebook");
  std::string tokenizer_dir, codebook_path;
  tokenize_cmd->add_option("--tokenizer", tokenizer_dir, "tokenizer run directory")->required();
  tokenize_cmd->add_option("--codebooks", codebook_path, "codebook file (defaults to the run's)");
  tokenize_cmd->add_option("--out", out_dir)->required();

  // pretrain -----------------------------------------------------------------------
  auto* pretrain_cmd = app.add_subcommand("pretrain", "next-token-prediction pre-training");
  PretrainStageConfig pcfg;
  std::string arch;
  pretrain_cmd->add_option("--world", world_dir)->required();
  pretrain_cmd->add_option("--tokenizer", tokenizer_dir)->required();
  pretrain_cmd->add_option("--out", out_dir)->required();
  pretrain_cmd->add_option("--steps", pcfg.steps);
  pretrain_cmd->add_option("--batch-sessions", pcfg.batch_sessions);
  pretrain_cmd->add_option("--lr-dense", pcfg.lr_dense);
  pretrain_cmd->add_option("--lr-sparse", pcfg.lr_sparse);
  pretrain_cmd->add_option("--stream-seed", pcfg.stream_seed);
  add_policy_flags(pretrain_cmd, pcfg.policy, arch);

  // train-pscore ----------------------------------------------------------------------
  auto* pscore_cmd = app.add_subcommand("train-pscore", "fit the multi-tower preference model");
  PScoreStageConfig scfg;
  pscore_cmd->add_option("--world", world_dir)->required();
  pscore_cmd->add_option("--out", out_dir)->required();
  pscore_cmd->add_option("--steps", scfg.pscore.steps);
  pscore_cmd->add_option("--batch", scfg.pscore.batch);
  pscore_cmd->add_option("--lr", scfg.pscore.lr);
  pscore_cmd->add_option("--hidden", scfg.pscore.encoder_hidden);
  pscore_cmd->add_option("--tower-hidden", scfg.pscore.tower_hidden);
  pscore_cmd->add_option("--sessions", scfg.sessions, "fresh sessions (0: use the base log)");
  pscore_cmd->add_option("--seed", scfg.pscore.seed);

  // posttrain ----------------------------------------------------------------------------
  auto* post_cmd = app.add_subcommand("posttrain", "joint RSFT + ECPO reinforcement learning");
  PosttrainStageConfig ocfg;
  std::string checkpoint, pscore_path, strategy = "beam", reference = "current",
              format_mode = "random";
  post_cmd->add_option("--world", world_dir)->required();
  post_cmd->add_option("--tokenizer", tokenizer_dir)->required();
  post_cmd->add_option("--checkpoint", checkpoint)->required();
  post_cmd->add_option("--pscore", pscore_path)->required();
  post_cmd->add_option("--out", out_dir)->required();
  post_cmd->add_option("--steps", ocfg.steps);
  post_cmd->add_option("--eps", ocfg.post.eps);
  post_cmd->add_option("--delta", ocfg.post.delta);
  post_cmd->add_option("--group-size", ocfg.post.group_size);
  post_cmd->add_option("--format-k", ocfg.post.format_k);
  post_cmd->add_option("--format-mode", format_mode, "none | topk | random");
  post_cmd->add_option("--strategy", strategy, "beam | topk_topp");
  post_cmd->add_option("--reference", reference, "pretrained | current");
  post_cmd->add_option("--sync-period", ocfg.post.sync_period);
  post_cmd->add_option("--rl-user-fraction", ocfg.post.rl_user_fraction);
  bool sir = false;
  post_cmd->add_flag("--sir", sir, "enable the industrial suppression reward");
  post_cmd->add_option("--sir-f", ocfg.post.sir_f);
  post_cmd->add_option("--sir-alpha", ocfg.post.sir_alpha);
  post_cmd->add_option("--rl-weight", ocfg.post.rl_weight);
  post_cmd->add_option("--lr-dense", ocfg.post.lr_dense);
  post_cmd->add_option("--lr-sparse", ocfg.post.lr_sparse);
  post_cmd->add_option("--batch-sessions", ocfg.post.batch_sessions);
  post_cmd->add_option("--reward-objective", ocfg.post.reward_objective,
                       "-1 fused P-Score, else objective index");
  post_cmd->add_option("--seed", ocfg.post.seed);

  // generate -----------------------------------------------------------------------------
  auto* gen_cmd = app.add_subcommand("generate", "emit item lists for a batch of users");
  GenerateStageConfig gcfg;
  std::string gen_strategy = "beam";
  gen_cmd->add_option("--world", world_dir)->required();
  gen_cmd->add_option("--tokenizer", tokenizer_dir)->required();
  gen_cmd->add_option("--checkpoint", checkpoint)->required();
  gen_cmd->add_option("--out", out_dir)->required();
  gen_cmd->add_option("--width", gcfg.request.width, "beam width / sample count");
  gen_cmd->add_option("--strategy", gen_strategy, "beam | topk_topp");
  bool constrain = false;
  gen_cmd->add_flag("--constrain", constrain, "restrict expansion to the prefix trie");
  gen_cmd->add_option("--temperature", gcfg.request.temperature);
  gen_cmd->add_option("--top-k", gcfg.request.top_k);
  gen_cmd->add_option("--top-p", gcfg.request.top_p);
  gen_cmd->add_option("--users", gcfg.n_users);
  gen_cmd->add_option("--warmup-sessions", gcfg.warmup_sessions);
  gen_cmd->add_option("--seed", gcfg.seed);

  // eval ----------------------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "offline metrics over generated lists");
  EvalStageConfig ecfg;
  std::string k_list = "8,32";
  std::string eval_strategy = "beam";
  eval_cmd->add_option("--world", world_dir)->required();
  eval_cmd->add_option("--tokenizer", tokenizer_dir)->required();
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--pscore", pscore_path)->required();
  eval_cmd->add_option("--out", out_dir)->required();
  eval_cmd->add_option("--k", k_list, "ascending Pass@K list, comma separated");
  eval_cmd->add_option("--users", ecfg.n_users);
  eval_cmd->add_option("--strategy", eval_strategy, "beam | topk_topp");
  eval_cmd->add_option("--warmup-sessions", ecfg.warmup_sessions);
  eval_cmd->add_option("--seed", ecfg.seed);

  // sweep ----------------------------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "run an experiment grid over one axis");
  SweepConfig swcfg;
  std::string values, seeds = "1";
  sweep_cmd->add_option("--axis", swcfg.axis, "sweep axis (see docs)")->required();
  sweep_cmd->add_option("--values", values, "comma-separated axis values")->required();
  sweep_cmd->add_option("--seeds", seeds, "comma-separated seeds");
  sweep_cmd->add_option("--world", swcfg.world_dir);
  sweep_cmd->add_option("--tokenizer", swcfg.tokenizer_dir);
  sweep_cmd->add_option("--checkpoint", swcfg.checkpoint);
  sweep_cmd->add_option("--pscore", swcfg.pscore_path);
  sweep_cmd->add_option("--out", out_dir)->required();
  sweep_cmd->add_option("--pretrain-steps", swcfg.pretrain.steps);
  sweep_cmd->add_option("--posttrain-steps", swcfg.posttrain.steps);
  sweep_cmd->add_option("--eval-users", swcfg.eval.n_users);
  std::string sweep_arch;
  add_policy_flags(sweep_cmd, swcfg.pretrain.policy, sweep_arch);

  // compare ----------------------------------------------------------------------------------
  auto* compare_cmd = app.add_subcommand("compare", "relative improvement between two runs");
  std::string dir_a, dir_b, metric_list, compare_out;
  compare_cmd->add_option("--a", dir_a, "baseline run directory")->required();
  compare_cmd->add_option("--b", dir_b, "candidate run directory")->required();
  compare_cmd->add_option("--metrics", metric_list, "comma-separated metric names")->required();
  compare_cmd->add_option("--out", compare_out, "also write the table to this CSV file");

  CLI11_PARSE(app, argc, argv);

  if (gen_world->parsed()) return guarded(out_dir, [&] { stage_gen_world(wcfg, out_dir); });
  if (fit_tok->parsed()) {
    tcfg.compare_random_baseline = !no_baseline;
    return guarded(out_dir, [&] { stage_fit_tokenizer(world_dir, tcfg, out_dir); });
  }
  if (tokenize_cmd->parsed()) {
    if (codebook_path.empty()) codebook_path = tokenizer_dir + "/codebooks.bin";
    return guarded(out_dir, [&] { stage_tokenize(tokenizer_dir, codebook_path, out_dir); });
  }
  if (pretrain_cmd->parsed()) {
    return guarded(out_dir, [&] {
      if (!arch.empty()) {
        PolicyConfig preset = toy_arch(arch);
        preset.codebook_size = pcfg.policy.codebook_size;
        preset.n_code_layers = pcfg.policy.n_code_layers;
        preset.use_sid_history = pcfg.policy.use_sid_history;
        preset.vid_only_features = pcfg.policy.vid_only_features;
        preset.seed = pcfg.policy.seed;
        pcfg.policy = preset;
      }
      stage_pretrain(world_dir, tokenizer_dir, pcfg, out_dir);
    });
  }
  if (pscore_cmd->parsed()) {
    return guarded(out_dir, [&] {
      World world = load_world(world_dir);
      scfg.pscore.user_dim = world.cfg.latent_dim;
      scfg.pscore.item_dim = world.cfg.latent_dim;
      stage_train_pscore(world_dir, scfg, out_dir);
    });
  }
  if (post_cmd->parsed()) {
    return guarded(out_dir, [&] {
      ocfg.post.sir_enabled = sir;
      ocfg.post.strategy = strategy == "beam" ? SearchStrategy::beam : SearchStrategy::topk_topp;
      ocfg.post.reference_mode =
          reference == "pretrained" ? ReferenceMode::pretrained : ReferenceMode::current_policy;
      ocfg.post.format_enabled = format_mode != "none";
      ocfg.post.format_mode = format_mode == "topk" ? FormatMode::topk : FormatMode::random;
      stage_posttrain(world_dir, tokenizer_dir, checkpoint, pscore_path, ocfg, out_dir);
    });
  }
  if (gen_cmd->parsed()) {
    return guarded(out_dir, [&] {
      gcfg.request.strategy =
          gen_strategy == "beam" ? SearchStrategy::beam : SearchStrategy::topk_topp;
      gcfg.request.constrain_to_trie = constrain;
      stage_generate(world_dir, tokenizer_dir, checkpoint, gcfg, out_dir);
    });
  }
  if (eval_cmd->parsed()) {
    return guarded(out_dir, [&] {
      ecfg.k_values = split_ints(k_list);
      ecfg.strategy = eval_strategy == "beam" ? SearchStrategy::beam : SearchStrategy::topk_topp;
      stage_eval(world_dir, tokenizer_dir, checkpoint, pscore_path, ecfg, out_dir);
    });
  }
  if (sweep_cmd->parsed()) {
    return guarded(out_dir, [&] {
      swcfg.values = split_csv(values);
      swcfg.seeds.clear();
      for (const auto& s : split_csv(seeds)) swcfg.seeds.push_back(std::stoull(s));
      stage_sweep(swcfg, out_dir);
    });
  }
  if (compare_cmd->parsed()) {
    return guarded("", [&] {
      auto rows = compare_runs(dir_a, dir_b, split_csv(metric_list));
      std::string table = format_compare_table(rows);
      std::cout << table;
      if (!compare_out.empty()) write_text_file(compare_out, table);
    });
  }
  return 0;
}
