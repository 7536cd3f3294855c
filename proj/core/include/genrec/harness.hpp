#pragma once

#include <map>
#include <string>
#include <vector>

#include "genrec/ecpo.hpp"

namespace genrec {

// Experiment stages write into isolated run directories: metrics as CSV/JSON,
// plus a manifest binding every number to (stage, config hash, seed).
// Completed run directories are never mutated; re-running into one throws.

struct WorldStageConfig {
  WorldConfig world;
  int base_sessions = 400;  // logging-policy interaction log size
};

struct TokenizerStageConfig {
  AlignConfig align;
  RqConfig rq;
  bool compare_random_baseline = true;
};

struct PretrainStageConfig {
  PolicyConfig policy;
  int steps = 300;
  int batch_sessions = 4;
  double lr_dense = 2e-3;
  double lr_sparse = 3e-3;
  uint64_t stream_seed = 31;
};

struct PScoreStageConfig {
  PScoreConfig pscore;
  int sessions = 0;  // 0: reuse the world's base log
};

struct PosttrainStageConfig {
  PostTrainConfig post;
  int steps = 100;
};

struct GenerateStageConfig {
  GenerationRequest request;
  int n_users = 16;
  uint64_t seed = 5;
  uint64_t stream_seed = 31;
  int warmup_sessions = 0;  // sessions simulated to give users a history
};

struct EvalStageConfig {
  std::vector<int> k_values{8, 32};
  int n_users = 24;
  SearchStrategy strategy = SearchStrategy::beam;
  bool constrain_to_trie = false;
  uint64_t seed = 5;
  uint64_t stream_seed = 31;
  int warmup_sessions = 60;
};

// ---- stage runners ----------------------------------------------------------

void stage_gen_world(const WorldStageConfig& cfg, const std::string& out_dir);
void stage_fit_tokenizer(const std::string& world_dir, const TokenizerStageConfig& cfg,
                         const std::string& out_dir);
// Quantizes persisted embeddings with an existing codebook file.
void stage_tokenize(const std::string& tokenizer_dir, const std::string& codebook_path,
                    const std::string& out_dir);
void stage_pretrain(const std::string& world_dir, const std::string& tokenizer_dir,
                    const PretrainStageConfig& cfg, const std::string& out_dir);
void stage_train_pscore(const std::string& world_dir, const PScoreStageConfig& cfg,
                        const std::string& out_dir);
void stage_posttrain(const std::string& world_dir, const std::string& tokenizer_dir,
                     const std::string& checkpoint, const std::string& pscore_path,
                     const PosttrainStageConfig& cfg, const std::string& out_dir);
void stage_generate(const std::string& world_dir, const std::string& tokenizer_dir,
                    const std::string& checkpoint, const GenerateStageConfig& cfg,
                    const std::string& out_dir);
void stage_eval(const std::string& world_dir, const std::string& tokenizer_dir,
                const std::string& checkpoint, const std::string& pscore_path,
                const EvalStageConfig& cfg, const std::string& out_dir);

// ---- persistence ------------------------------------------------------------

void save_world(const World& world, const InteractionLog& log, const std::string& dir);
World load_world(const std::string& dir);
InteractionLog load_log(const std::string& dir);

void save_embeddings(const ItemEmbeddings& emb, const std::string& path);
ItemEmbeddings load_embeddings(const std::string& path);

// Summary metrics of a completed run (flat name -> value or value list).
std::map<std::string, std::vector<double>> load_summary(const std::string& dir);
void write_summary(const std::string& dir, const std::map<std::string, std::vector<double>>& m);

void write_manifest(const std::string& dir, const std::string& stage, const std::string& config_text,
                    uint64_t seed);
// Throws when the directory already holds a completed run.
void require_fresh_run_dir(const std::string& dir);

// ---- comparison --------------------------------------------------------------

struct CompareRow {
  std::string metric;
  double baseline = 0;   // run A mean
  double candidate = 0;  // run B mean
  double relative_improvement = 0;  // (B - A) / |A|
  // Paired CI over seeds when both runs carry per-seed values; half-width of
  // a 95% t-interval on the paired differences. NaN when unavailable.
  double ci_half_width = 0;
  bool paired = false;
};

std::vector<CompareRow> compare_runs(const std::string& dir_a, const std::string& dir_b,
                                     const std::vector<std::string>& metrics);
std::string format_compare_table(const std::vector<CompareRow>& rows);

// ---- sweeps ------------------------------------------------------------------

// Architecture presets shaped like the published table rows, scaled to desk
// size (layer counts, FFN=2*d_model, expert counts and activation ratios
// preserved; absolute widths shrunk).
PolicyConfig toy_arch(const std::string& name);
std::vector<std::string> toy_arch_names();

// One experiment grid: per (value, seed) the needed pipeline stages run into
// isolated directories under out_root/<value>/seed_<s>/. Axes:
//   model-size      values: architecture preset names; pretrains each
//   feature-mode    values: full | vid-only; pretrain + eval
//   history-id      values: vid | sid; pretrain + eval
//   codebook-size   values: integers; fit-tokenizer + pretrain + eval
//   group-size      values: integers; posttrain + eval from a checkpoint
//   search-strategy values: beam | topk_topp; posttrain + eval
//   reference-mode  values: pretrained | current; posttrain + eval
//   format-mode     values: none | topk | random; posttrain + eval
//   sir             values: on | off; posttrain + eval
//   pass-at-k       values: K integers; one eval emits the whole table
struct SweepConfig {
  std::string axis;
  std::vector<std::string> values;
  std::vector<uint64_t> seeds{1};
  std::string world_dir, tokenizer_dir, checkpoint, pscore_path;
  PretrainStageConfig pretrain;
  PosttrainStageConfig posttrain;
  EvalStageConfig eval;
};

void stage_sweep(const SweepConfig& cfg, const std::string& out_root);

}  // namespace genrec
