#pragma once

#include <string>
#include <vector>

#include "genrec/params.hpp"

namespace genrec {

// Transformer building blocks used by the tokenizer QFormer, the encoder
// stack, and the decoder. Parameter structs hold ids into a ParamStore;
// forward functions run on a ParamSession.

struct LinearParams {
  ParamId w;  // (in, out)
  ParamId b;  // (1, out), invalid when bias-free
  int in = 0, out = 0;
};

LinearParams make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                         bool bias = true);
Var linear(ParamSession& s, const LinearParams& p, Var x);

// Dense(LeakyReLU(Dense(x))) pathway projection.
struct MlpParams {
  LinearParams l1, l2;
};
MlpParams make_mlp(ParamStore& store, const std::string& name, int in, int hidden, int out,
                   Rng& rng);
Var mlp_leaky(ParamSession& s, const MlpParams& p, Var x);

struct RmsNormParams {
  ParamId gain;
};
RmsNormParams make_rms_norm(ParamStore& store, const std::string& name, int dim);
Var rms_norm(ParamSession& s, const RmsNormParams& p, Var x, double eps = 1e-6);

// Multi-head attention with per-head dim d/heads; all projections bias-free.
struct AttentionParams {
  LinearParams wq, wk, wv, wo;
  int heads = 1;
};
AttentionParams make_attention(ParamStore& store, const std::string& name, int d_model, int heads,
                               Rng& rng);
// q_in (Tq,d) attends to kv_in (Tk,d). causal_valid, when given, holds one
// prefix length per query row (entries in [1, Tk]).
Var attention(ParamSession& s, const AttentionParams& p, Var q_in, Var kv_in,
              const std::vector<int>* causal_valid = nullptr);

// Two-layer feed-forward with SiLU.
struct FfnParams {
  LinearParams l1, l2;
};
FfnParams make_ffn(ParamStore& store, const std::string& name, int d_model, int hidden, Rng& rng);
Var ffn(ParamSession& s, const FfnParams& p, Var x);

// SwiGLU expert: W2 (silu(W1 x) * W3 x), bias-free.
struct SwigluParams {
  LinearParams w1, w3, w2;
};
SwigluParams make_swiglu(ParamStore& store, const std::string& name, int d_model, int hidden,
                         Rng& rng);
Var swiglu(ParamSession& s, const SwigluParams& p, Var x);

// Query-compression block: Q <- CrossAttn(Q, M, M); Q <- FFN(RMSNorm(Q)).
// No residual path, matching the compression formulation.
struct QFormerBlockParams {
  AttentionParams attn;
  RmsNormParams norm;
  FfnParams ffn;
};
QFormerBlockParams make_qformer_block(ParamStore& store, const std::string& name, int dim,
                                      int heads, int ffn_hidden, Rng& rng);
Var qformer_block(ParamSession& s, const QFormerBlockParams& p, Var queries, Var tokens);

// Mixture of experts with top-k routing. Selection ranks gate score plus the
// per-expert routing bias; combination weights are a softmax over the raw
// gate scores of the selected experts only, so biases steer load without
// entering the output.
struct MoeParams {
  LinearParams gate;  // (d, n_experts), bias-free
  std::vector<SwigluParams> experts;
  ParamId routing_bias;  // (1, n_experts) buffer, not trained by gradient
  int top_k = 1;
};
MoeParams make_moe(ParamStore& store, const std::string& name, int d_model, int expert_hidden,
                   int n_experts, int top_k, Rng& rng);

struct MoeOutput {
  Var out;
  std::vector<int64_t> loads;  // tokens routed to each expert
};
MoeOutput moe_forward(ParamSession& s, const MoeParams& p, Var x);

// Loss-free balancing: b_j -= u * sign(load_j - mean load). sign(0) = 0.
void update_gate_bias(ParamStore& store, const MoeParams& p, const std::vector<int64_t>& loads,
                      double update_rate);

// SwiGLU expert hidden size: (2/3)*4*d_model rounded up to a multiple of
// `multiple`.
int expert_hidden_size(int d_model, int multiple);

}  // namespace genrec
