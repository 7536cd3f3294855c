#include "genrec/nn.hpp"

#include <algorithm>
#include <cmath>

namespace genrec {

LinearParams make_linear(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                         bool bias) {
  LinearParams p;
  p.in = in;
  p.out = out;
  p.w = store.add(name + ".w", normal_init({in, out}, 1.0 / std::sqrt(in), rng));
  if (bias) p.b = store.add(name + ".b", zeros_init({1, out}));
  return p;
}

Var linear(ParamSession& s, const LinearParams& p, Var x) {
  Var y = matmul(x, s[p.w]);
  if (p.b.valid()) y = add_rowvec(y, s[p.b]);
  return y;
}

MlpParams make_mlp(ParamStore& store, const std::string& name, int in, int hidden, int out,
                   Rng& rng) {
  MlpParams p;
  p.l1 = make_linear(store, name + ".fc1", in, hidden, rng);
  p.l2 = make_linear(store, name + ".fc2", hidden, out, rng);
  return p;
}

Var mlp_leaky(ParamSession& s, const MlpParams& p, Var x) {
  return linear(s, p.l2, leaky_relu(linear(s, p.l1, x)));
}

RmsNormParams make_rms_norm(ParamStore& store, const std::string& name, int dim) {
  return RmsNormParams{store.add(name + ".gain", ones_init({1, dim}))};
}

Var rms_norm(ParamSession& s, const RmsNormParams& p, Var x, double eps) {
  return rms_norm(x, s[p.gain], eps);
}

AttentionParams make_attention(ParamStore& store, const std::string& name, int d_model, int heads,
                               Rng& rng) {
  GENREC_REQUIRE(heads >= 1 && d_model % heads == 0, "attention: heads must divide d_model");
  AttentionParams p;
  p.heads = heads;
  p.wq = make_linear(store, name + ".wq", d_model, d_model, rng, false);
  p.wk = make_linear(store, name + ".wk", d_model, d_model, rng, false);
  p.wv = make_linear(store, name + ".wv", d_model, d_model, rng, false);
  p.wo = make_linear(store, name + ".wo", d_model, d_model, rng, false);
  return p;
}

Var attention(ParamSession& s, const AttentionParams& p, Var q_in, Var kv_in,
              const std::vector<int>* causal_valid) {
  Var q = linear(s, p.wq, q_in);
  Var k = linear(s, p.wk, kv_in);
  Var v = linear(s, p.wv, kv_in);
  return linear(s, p.wo, mha_core(q, k, v, p.heads, causal_valid));
}

FfnParams make_ffn(ParamStore& store, const std::string& name, int d_model, int hidden, Rng& rng) {
  FfnParams p;
  p.l1 = make_linear(store, name + ".fc1", d_model, hidden, rng);
  p.l2 = make_linear(store, name + ".fc2", hidden, d_model, rng);
  return p;
}

Var ffn(ParamSession& s, const FfnParams& p, Var x) {
  return linear(s, p.l2, silu(linear(s, p.l1, x)));
}

SwigluParams make_swiglu(ParamStore& store, const std::string& name, int d_model, int hidden,
                         Rng& rng) {
  SwigluParams p;
  p.w1 = make_linear(store, name + ".w1", d_model, hidden, rng, false);
  p.w3 = make_linear(store, name + ".w3", d_model, hidden, rng, false);
  p.w2 = make_linear(store, name + ".w2", hidden, d_model, rng, false);
  return p;
}

Var swiglu(ParamSession& s, const SwigluParams& p, Var x) {
  return linear(s, p.w2, mul(silu(linear(s, p.w1, x)), linear(s, p.w3, x)));
}

QFormerBlockParams make_qformer_block(ParamStore& store, const std::string& name, int dim,
                                      int heads, int ffn_hidden, Rng& rng) {
  QFormerBlockParams p;
  p.attn = make_attention(store, name + ".attn", dim, heads, rng);
  p.norm = make_rms_norm(store, name + ".norm", dim);
  p.ffn = make_ffn(store, name + ".ffn", dim, ffn_hidden, rng);
  return p;
}

Var qformer_block(ParamSession& s, const QFormerBlockParams& p, Var queries, Var tokens) {
  Var q = attention(s, p.attn, queries, tokens);
  return ffn(s, p.ffn, rms_norm(s, p.norm, q));
}

MoeParams make_moe(ParamStore& store, const std::string& name, int d_model, int expert_hidden,
                   int n_experts, int top_k, Rng& rng) {
  GENREC_REQUIRE(top_k >= 1 && top_k <= n_experts, "moe: need 1 <= k <= n_experts");
  MoeParams p;
  p.top_k = top_k;
  p.gate = make_linear(store, name + ".gate", d_model, n_experts, rng, false);
  p.routing_bias =
      store.add(name + ".routing_bias", zeros_init({1, n_experts}), false, /*trainable=*/false);
  p.experts.reserve(static_cast<size_t>(n_experts));
  for (int e = 0; e < n_experts; ++e)
    p.experts.push_back(
        make_swiglu(store, name + ".expert" + std::to_string(e), d_model, expert_hidden, rng));
  return p;
}

MoeOutput moe_forward(ParamSession& s, const MoeParams& p, Var x) {
  int tokens = x.rows();
  int n_experts = static_cast<int>(p.experts.size());
  int k = p.top_k;
  Var scores = linear(s, p.gate, x);  // (T, E) raw gate scores
  const Array& score_v = scores.value();
  const Array& bias = s.store().value(p.routing_bias);

  // Top-k selection on score+bias; ties break to the lower expert index.
  std::vector<std::vector<int>> selected(static_cast<size_t>(tokens));
  for (int t = 0; t < tokens; ++t) {
    std::vector<int> order(static_cast<size_t>(n_experts));
    for (int e = 0; e < n_experts; ++e) order[static_cast<size_t>(e)] = e;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return score_v.at(t, a) + bias.at(0, a) > score_v.at(t, b) + bias.at(0, b);
    });
    order.resize(static_cast<size_t>(k));
    std::sort(order.begin(), order.end());
    selected[static_cast<size_t>(t)] = std::move(order);
  }

  // Gate weights: softmax over the k selected raw scores per token.
  std::vector<Var> selected_score_cols;
  std::vector<int> iota(static_cast<size_t>(tokens));
  for (int t = 0; t < tokens; ++t) iota[static_cast<size_t>(t)] = t;
  for (int j = 0; j < k; ++j) {
    std::vector<int> cols(static_cast<size_t>(tokens));
    for (int t = 0; t < tokens; ++t) cols[static_cast<size_t>(t)] = selected[static_cast<size_t>(t)][static_cast<size_t>(j)];
    selected_score_cols.push_back(gather_elements(scores, iota, cols));
  }
  Var weights = softmax_rows(k == 1 ? selected_score_cols[0] : concat_cols(selected_score_cols));

  MoeOutput result;
  result.loads.assign(static_cast<size_t>(n_experts), 0);
  Var out = s.tape().leaf(Array::zeros({tokens, x.cols()}), false);
  for (int e = 0; e < n_experts; ++e) {
    std::vector<int> rows, wcols;
    for (int t = 0; t < tokens; ++t) {
      const auto& sel = selected[static_cast<size_t>(t)];
      for (int j = 0; j < k; ++j) {
        if (sel[static_cast<size_t>(j)] == e) {
          rows.push_back(t);
          wcols.push_back(j);
        }
      }
    }
    result.loads[static_cast<size_t>(e)] = static_cast<int64_t>(rows.size());
    if (rows.empty()) continue;
    Var xe = gather_rows(x, rows);
    Var he = swiglu(s, p.experts[static_cast<size_t>(e)], xe);
    Var we = gather_elements(weights, rows, wcols);
    out = add(out, scatter_rows(mul_colvec(he, we), rows, tokens));
  }
  result.out = out;
  return result;
}

void update_gate_bias(ParamStore& store, const MoeParams& p, const std::vector<int64_t>& loads,
                      double update_rate) {
  GENREC_REQUIRE(update_rate > 0, "update_gate_bias: update rate must be positive");
  int n_experts = static_cast<int>(p.experts.size());
  GENREC_REQUIRE(static_cast<int>(loads.size()) == n_experts, "update_gate_bias: load count mismatch");
  double mean_load = 0;
  for (int64_t l : loads) mean_load += static_cast<double>(l);
  mean_load /= n_experts;
  Array& bias = store.value(p.routing_bias);
  Array next = Array::zeros(bias.shape());
  for (int e = 0; e < n_experts; ++e) {
    double diff = static_cast<double>(loads[static_cast<size_t>(e)]) - mean_load;
    double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    next.at(0, e) = bias.at(0, e) - update_rate * sign;
  }
  bias = std::move(next);
}

int expert_hidden_size(int d_model, int multiple) {
  GENREC_REQUIRE(multiple >= 1, "expert_hidden_size: multiple must be >= 1");
  int raw = (2 * 4 * d_model + 2) / 3;  // ceil of (2/3)*4*d_model
  return ((raw + multiple - 1) / multiple) * multiple;
}

}  // namespace genrec
