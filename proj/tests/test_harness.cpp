#include <filesystem>

#include "doctest.h"
#include "genrec/harness.hpp"
#include "genrec/io.hpp"

using namespace genrec;

namespace {

std::string fresh_dir(const std::string& name) {
  std::string dir = "/tmp/genrec_harness_test/" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  std::filesystem::remove_all(dir);
  return dir;
}

WorldStageConfig tiny_world_cfg() {
  WorldStageConfig cfg;
  cfg.world.n_users = 32;
  cfg.world.n_items = 96;
  cfg.world.latent_dim = 6;
  cfg.world.content_tokens = 3;
  cfg.world.content_dim = 8;
  cfg.world.seed = 17;
  cfg.base_sessions = 120;
  return cfg;
}

TokenizerStageConfig tiny_tok_cfg() {
  TokenizerStageConfig cfg;
  cfg.align.n_queries = 2;
  cfg.align.n_layers = 1;
  cfg.align.ffn_hidden = 16;
  cfg.align.steps = 25;
  cfg.rq.n_layers = 3;
  cfg.rq.codebook_size = 8;
  return cfg;
}

PretrainStageConfig tiny_pretrain_cfg() {
  PretrainStageConfig cfg;
  cfg.policy.n_layers = 2;
  cfg.policy.d_model = 8;
  cfg.policy.ffn_hidden = 16;
  cfg.policy.n_heads = 2;
  cfg.policy.n_code_layers = 3;
  cfg.policy.codebook_size = 8;
  cfg.policy.short_len = 3;
  cfg.policy.positive_len = 3;
  cfg.policy.lifelong_len = 6;
  cfg.policy.n_queries = 2;
  cfg.policy.lifelong_blocks = 1;
  cfg.policy.vid_vocab = 96;
  cfg.steps = 12;
  cfg.batch_sessions = 3;
  return cfg;
}

}  // namespace

TEST_CASE("world snapshot round trip preserves the world and log") {
  std::string dir = fresh_dir("world_rt");
  stage_gen_world(tiny_world_cfg(), dir);
  World w = load_world(dir);
  CHECK(w.cfg.n_items == 96);
  World direct = generate_world(tiny_world_cfg().world);
  for (int64_t i = 0; i < direct.item_latent.size(); ++i)
    CHECK(w.item_latent.at(i) == direct.item_latent.at(i));
  InteractionLog log = load_log(dir);
  CHECK(!log.events.empty());
  for (const auto& ev : log.events) CHECK(ev.playtime <= ev.duration + 1e-9);
}

TEST_CASE("rerunning a stage with identical config reproduces bit-identical metric files") {
  std::string a = fresh_dir("det_a");
  std::string b = fresh_dir("det_b");
  stage_gen_world(tiny_world_cfg(), a);
  stage_gen_world(tiny_world_cfg(), b);

  for (const char* f : {"config.txt", "logs.jsonl", "summary.json", "manifest.json"})
    CHECK(read_text_file(a + "/" + f) == read_text_file(b + "/" + f));

  std::string ta = fresh_dir("det_tok_a");
  std::string tb = fresh_dir("det_tok_b");
  stage_fit_tokenizer(a, tiny_tok_cfg(), ta);
  stage_fit_tokenizer(b, tiny_tok_cfg(), tb);
  for (const char* f : {"codes.jsonl", "summary.json", "align_loss.csv"})
    CHECK(read_text_file(ta + "/" + f) == read_text_file(tb + "/" + f));

  std::string pa = fresh_dir("det_pre_a");
  std::string pb = fresh_dir("det_pre_b");
  stage_pretrain(a, ta, tiny_pretrain_cfg(), pa);
  stage_pretrain(b, tb, tiny_pretrain_cfg(), pb);
  CHECK(read_text_file(pa + "/train_metrics.csv") == read_text_file(pb + "/train_metrics.csv"));
  CHECK(read_text_file(pa + "/summary.json") == read_text_file(pb + "/summary.json"));
}

TEST_CASE("completed run directories are never overwritten") {
  std::string dir = fresh_dir("no_overwrite");
  stage_gen_world(tiny_world_cfg(), dir);
  CHECK_THROWS(stage_gen_world(tiny_world_cfg(), dir));
}

TEST_CASE("manifest carries stage, config hash, and seed") {
  std::string dir = fresh_dir("manifest");
  stage_gen_world(tiny_world_cfg(), dir);
  std::string manifest = read_text_file(dir + "/manifest.json");
  CHECK(manifest.find("\"stage\": \"gen-world\"") != std::string::npos);
  CHECK(manifest.find("config_hash") != std::string::npos);
  CHECK(manifest.find("\"seed\": 17") != std::string::npos);
  CHECK(manifest.find("version") != std::string::npos);
}

TEST_CASE("identical runs compare to zero improvement") {
  std::string dir = fresh_dir("cmp_world");
  stage_gen_world(tiny_world_cfg(), dir);
  std::string ta = fresh_dir("cmp_tok");
  stage_fit_tokenizer(dir, tiny_tok_cfg(), ta);
  auto rows = compare_runs(ta, ta, {"recon_loss", "entropy"});
  REQUIRE(rows.size() == 2);
  for (const auto& r : rows) {
    CHECK(r.relative_improvement == 0.0);
    CHECK(r.baseline == r.candidate);
  }
  CHECK_THROWS(compare_runs(ta, ta, {"absent_metric"}));
}

TEST_CASE("feature-mode sweep produces the with/without comparison table") {
  std::string wdir = fresh_dir("sweep_world");
  stage_gen_world(tiny_world_cfg(), wdir);
  std::string tdir = fresh_dir("sweep_tok");
  stage_fit_tokenizer(wdir, tiny_tok_cfg(), tdir);

  SweepConfig sw;
  sw.axis = "feature-mode";
  sw.values = {"vid-only", "full"};
  sw.seeds = {1, 2};
  sw.world_dir = wdir;
  sw.tokenizer_dir = tdir;
  sw.pretrain = tiny_pretrain_cfg();
  std::string out = fresh_dir("sweep_fm");
  stage_sweep(sw, out);

  auto a = load_summary(out + "/vid-only");
  auto b = load_summary(out + "/full");
  REQUIRE(a.at("final_loss").size() == 2);  // one entry per seed
  REQUIRE(b.at("final_loss").size() == 2);
  auto rows = compare_runs(out + "/vid-only", out + "/full", {"final_loss"});
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].paired);  // paired-seed confidence interval present
  CHECK(rows[0].ci_half_width >= 0.0);
}

TEST_CASE("architecture presets follow the published shape rules") {
  PolicyConfig a = toy_arch("toy-0.015b");
  CHECK(a.n_layers == 4);
  CHECK(a.ffn_hidden == 2 * a.d_model);
  CHECK(!a.moe_enabled);

  PolicyConfig c = toy_arch("toy-0.935b");
  CHECK(c.n_layers == 8);
  CHECK(c.moe_enabled);
  CHECK(c.n_experts == 24);
  CHECK(c.experts_active == 2);
  CHECK(c.moe_location == MoeLocation::decoder);

  PolicyConfig d = toy_arch("toy-2.633b");
  CHECK(d.n_layers == 24);
  CHECK(d.n_experts == 24);
  CHECK(d.experts_active == 4);
  CHECK(d.moe_location == MoeLocation::enc_and_dec);

  CHECK_THROWS(toy_arch("toy-9b"));
}
