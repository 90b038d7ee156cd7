#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pbt/autodiff.hpp"
#include "pbt/battmoe.hpp"
#include "pbt/cycledata.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/rng.hpp"

namespace pbt {

enum class LabelTransform { identity, log_scale };

inline const char* label_transform_name(LabelTransform t) {
  return t == LabelTransform::log_scale ? "log" : "identity";
}

inline LabelTransform label_transform_from_name(const std::string& s) {
  if (s == "identity") return LabelTransform::identity;
  if (s == "log") return LabelTransform::log_scale;
  throw InvalidConfig("label_transform must be 'identity' or 'log', got '" + s + "'");
}

struct ModelConfig {
  int d = 128;
  int d_ff = 512;
  int l1 = 2;   // intra-cycle encoder layers
  int l2 = 10;  // inter-cycle encoder layers
  int heads = 8;
  double dropout = 0.05;
  int k_g = 1;  // general experts per BatteryMoE layer
  int d_embed = 256;
  int max_cycles = kMaxCycles;
  LabelTransform label_transform = LabelTransform::identity;
};

inline void validate_config(const ModelConfig& c) {
  if (c.d <= 0 || c.d_ff <= 0) throw InvalidConfig("d and d_ff must be positive");
  if (c.heads <= 0 || c.d % c.heads != 0)
    throw InvalidConfig("d must be divisible by the head count");
  if (c.l1 < 1 || c.l2 < 1) throw InvalidConfig("L1 and L2 must be at least 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw InvalidConfig("dropout must be in [0, 1)");
  if (c.k_g < 0) throw InvalidConfig("K_g must be non-negative");
  if (c.d_embed < 8) throw InvalidConfig("d_embed must be at least 8");
  if (c.max_cycles != kMaxCycles) throw InvalidConfig("max_cycles is fixed at 100");
}

// The published full-scale configuration.
inline ModelConfig paper_config() {
  ModelConfig c;
  c.d = 128;
  c.d_ff = 512;
  c.l1 = 2;
  c.l2 = 10;
  c.heads = 8;
  c.dropout = 0.05;
  c.k_g = 1;
  c.d_embed = 256;
  return c;
}

struct LnParams {
  Mat gamma;  // (1, d)
  Mat beta;   // (1, d)
};

struct FfnExpert {
  LinearParams lin1;  // d -> d_ff
  LinearParams lin2;  // d_ff -> d
};

template <typename E>
struct MoeParams {
  std::vector<E> general;
  std::vector<E> specialized;
  GateParams gate;
};

struct IntraLayer {
  MoeParams<FfnExpert> moe;
  LnParams ln;
};

struct InterLayer {
  LinearParams wq, wk, wv, wo;
  LnParams ln1;
  MoeParams<FfnExpert> moe;
  LnParams ln2;
};

// Projection head: 5 always-on linear experts plus 5 gated by G(z).
struct HeadParams {
  std::array<LinearParams, 10> f;  // each d -> 1
  LinearParams gate;               // d -> 5
};

struct AdapterParams {
  LnParams ln;
  LinearParams down;  // d -> d_a
  LinearParams up;    // d_a -> d
};

struct ModelState {
  ModelConfig config;
  ExpertRegistry registry;
  LinearParams distill;                 // d_embed -> d_ff, shared across layers
  MoeParams<LinearParams> cyclepatch;   // experts: 900 -> d
  std::vector<IntraLayer> intra;
  std::vector<InterLayer> inter;
  HeadParams head;
  std::vector<AdapterParams> adapters;
  std::vector<int> adapter_positions;  // pipeline layer index each adapter follows
  bool adapter_residual = false;
  std::vector<std::string> seen_condition_keys;  // train + val keys at training time
};

inline constexpr double kLnEps = 1e-5;

namespace detail {

inline void init_linear(LinearParams& p, int out, int in, Rng& rng) {
  p.w = Mat(out, in);
  p.b = Mat(1, out);
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : p.w.a) v = rng.uniform(-bound, bound);
  for (double& v : p.b.a) v = rng.uniform(-bound, bound);
}

inline void init_ln(LnParams& p, int d) {
  p.gamma = Mat(1, d);
  p.beta = Mat(1, d);
  p.gamma.fill(1.0);
}

inline void init_ffn_expert(FfnExpert& e, int d, int d_ff, Rng& rng) {
  init_linear(e.lin1, d_ff, d, rng);
  init_linear(e.lin2, d, d_ff, rng);
}

inline void init_gate(GateParams& g, int k_s, int d_ff, Rng& rng) {
  g.w2 = Mat(k_s, d_ff);
  g.b2 = Mat(1, k_s);
  double bound = 1.0 / std::sqrt(static_cast<double>(d_ff));
  for (double& v : g.w2.a) v = rng.uniform(-bound, bound);
  for (double& v : g.b2.a) v = rng.uniform(-bound, bound);
}

}  // namespace detail

inline ModelState init_model(const ModelConfig& config, const ExpertRegistry& registry,
                             uint64_t seed) {
  validate_config(config);
  ModelState m;
  m.config = config;
  m.registry = registry;
  Rng rng(seed);
  const int d = config.d, d_ff = config.d_ff, k_s = registry.k_s();

  detail::init_linear(m.distill, d_ff, config.d_embed, rng);

  m.cyclepatch.general.resize(static_cast<size_t>(registry.general_count));
  m.cyclepatch.specialized.resize(static_cast<size_t>(k_s));
  for (auto& e : m.cyclepatch.general) detail::init_linear(e, d, kPointsPerCycle * 3, rng);
  for (auto& e : m.cyclepatch.specialized) detail::init_linear(e, d, kPointsPerCycle * 3, rng);
  detail::init_gate(m.cyclepatch.gate, k_s, d_ff, rng);

  m.intra.resize(static_cast<size_t>(config.l1));
  for (IntraLayer& L : m.intra) {
    L.moe.general.resize(static_cast<size_t>(registry.general_count));
    L.moe.specialized.resize(static_cast<size_t>(k_s));
    for (auto& e : L.moe.general) detail::init_ffn_expert(e, d, d_ff, rng);
    for (auto& e : L.moe.specialized) detail::init_ffn_expert(e, d, d_ff, rng);
    detail::init_gate(L.moe.gate, k_s, d_ff, rng);
    detail::init_ln(L.ln, d);
  }

  m.inter.resize(static_cast<size_t>(config.l2));
  for (InterLayer& L : m.inter) {
    detail::init_linear(L.wq, d, d, rng);
    detail::init_linear(L.wk, d, d, rng);
    detail::init_linear(L.wv, d, d, rng);
    detail::init_linear(L.wo, d, d, rng);
    detail::init_ln(L.ln1, d);
    L.moe.general.resize(static_cast<size_t>(registry.general_count));
    L.moe.specialized.resize(static_cast<size_t>(k_s));
    for (auto& e : L.moe.general) detail::init_ffn_expert(e, d, d_ff, rng);
    for (auto& e : L.moe.specialized) detail::init_ffn_expert(e, d, d_ff, rng);
    detail::init_gate(L.moe.gate, k_s, d_ff, rng);
    detail::init_ln(L.ln2, d);
  }

  for (auto& f : m.head.f) detail::init_linear(f, 1, d, rng);
  detail::init_linear(m.head.gate, 5, d, rng);
  return m;
}

// Enumerates every parameter tensor with a stable name, in the fixed
// serialization order. Adapters come last so base checkpoints are a prefix.
template <typename State, typename Fn>
void visit_params(State& m, Fn&& fn) {
  fn("distill.w", m.distill.w);
  fn("distill.b", m.distill.b);

  auto visit_gate = [&](const std::string& base, auto& gate) {
    fn(base + ".gate.w2", gate.w2);
    fn(base + ".gate.b2", gate.b2);
  };
  auto visit_linear_experts = [&](const std::string& base, auto& moe) {
    for (size_t i = 0; i < moe.general.size(); ++i) {
      fn(base + ".gen" + std::to_string(i) + ".w", moe.general[i].w);
      fn(base + ".gen" + std::to_string(i) + ".b", moe.general[i].b);
    }
    for (size_t j = 0; j < moe.specialized.size(); ++j) {
      fn(base + ".spec" + std::to_string(j) + ".w", moe.specialized[j].w);
      fn(base + ".spec" + std::to_string(j) + ".b", moe.specialized[j].b);
    }
    visit_gate(base, moe.gate);
  };
  auto visit_ffn_experts = [&](const std::string& base, auto& moe) {
    auto one = [&](const std::string& ebase, auto& e) {
      fn(ebase + ".lin1.w", e.lin1.w);
      fn(ebase + ".lin1.b", e.lin1.b);
      fn(ebase + ".lin2.w", e.lin2.w);
      fn(ebase + ".lin2.b", e.lin2.b);
    };
    for (size_t i = 0; i < moe.general.size(); ++i) one(base + ".gen" + std::to_string(i), moe.general[i]);
    for (size_t j = 0; j < moe.specialized.size(); ++j)
      one(base + ".spec" + std::to_string(j), moe.specialized[j]);
    visit_gate(base, moe.gate);
  };
  auto visit_ln = [&](const std::string& base, auto& ln) {
    fn(base + ".gamma", ln.gamma);
    fn(base + ".beta", ln.beta);
  };

  visit_linear_experts("cyclepatch", m.cyclepatch);

  for (size_t l = 0; l < m.intra.size(); ++l) {
    std::string base = "intra" + std::to_string(l);
    visit_ffn_experts(base + ".ffn", m.intra[l].moe);
    visit_ln(base + ".ln", m.intra[l].ln);
  }
  for (size_t l = 0; l < m.inter.size(); ++l) {
    std::string base = "inter" + std::to_string(l);
    fn(base + ".attn.wq.w", m.inter[l].wq.w);
    fn(base + ".attn.wq.b", m.inter[l].wq.b);
    fn(base + ".attn.wk.w", m.inter[l].wk.w);
    fn(base + ".attn.wk.b", m.inter[l].wk.b);
    fn(base + ".attn.wv.w", m.inter[l].wv.w);
    fn(base + ".attn.wv.b", m.inter[l].wv.b);
    fn(base + ".attn.wo.w", m.inter[l].wo.w);
    fn(base + ".attn.wo.b", m.inter[l].wo.b);
    visit_ln(base + ".ln1", m.inter[l].ln1);
    visit_ffn_experts(base + ".ffn", m.inter[l].moe);
    visit_ln(base + ".ln2", m.inter[l].ln2);
  }
  for (size_t i = 0; i < m.head.f.size(); ++i) {
    fn("head.f" + std::to_string(i) + ".w", m.head.f[i].w);
    fn("head.f" + std::to_string(i) + ".b", m.head.f[i].b);
  }
  fn("head.gate.w", m.head.gate.w);
  fn("head.gate.b", m.head.gate.b);

  for (size_t k = 0; k < m.adapters.size(); ++k) {
    std::string base = "adapter" + std::to_string(k);
    visit_ln(base + ".ln", m.adapters[k].ln);
    fn(base + ".down.w", m.adapters[k].down.w);
    fn(base + ".down.b", m.adapters[k].down.b);
    fn(base + ".up.w", m.adapters[k].up.w);
    fn(base + ".up.b", m.adapters[k].up.b);
  }
}

inline bool is_adapter_param(const std::string& name) { return name.rfind("adapter", 0) == 0; }

inline size_t count_params(const ModelState& m) {
  size_t n = 0;
  visit_params(const_cast<ModelState&>(m), [&](const std::string&, Mat& t) { n += t.size(); });
  return n;
}

inline double transform_label(double y, LabelTransform t) {
  if (t == LabelTransform::log_scale) {
    if (!(y > 0.0)) throw InvalidLabel("log label transform needs positive labels");
    return std::log(y);
  }
  return y;
}

inline double inverse_transform_label(double y, LabelTransform t) {
  return t == LabelTransform::log_scale ? std::exp(y) : y;
}

// Sinusoidal positional encoding over the first `valid_rows` positions;
// padded rows stay zero so the encoding never writes into padding.
inline Mat positional_encoding(int valid_rows, int total_rows, int d) {
  Mat pe(total_rows, d);
  for (int pos = 0; pos < valid_rows; ++pos) {
    for (int j = 0; j < d; j += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(j) / d);
      pe(pos, j) = std::sin(pos * freq);
      if (j + 1 < d) pe(pos, j + 1) = std::cos(pos * freq);
    }
  }
  return pe;
}

struct CycleTokens {
  Mat m;                      // 100 x d, rows >= s exactly zero
  std::vector<double> valid;  // 100 flags, first s set
  int s = 0;
};

namespace detail {

inline int build_linear(Graph& g, int x, const LinearParams& p) {
  return g.linear(x, g.param(p.w), g.param(p.b));
}

inline int build_gate_vector(Graph& g, int e_hat, const GateParams& gate) {
  return g.linear(e_hat, g.param(gate.w2), g.param(gate.b2));
}

// Shared MoE aggregation: general experts summed, selected specialized
// experts weighted by their gate entry. Masked experts never enter the tape,
// so their parameters receive exactly zero gradient and the corresponding
// gate rows get none either (only selected columns are picked).
template <typename BuildExpert>
int build_moe(Graph& g, int x, int e_hat, const GateParams& gate, const RoutingMask& mask,
              size_t n_general, BuildExpert&& build_expert, int out_cols) {
  int gate_vec = build_gate_vector(g, e_hat, gate);
  int acc = -1;
  auto accumulate = [&](int term) { acc = acc < 0 ? term : g.add(acc, term); };
  for (size_t i = 0; i < n_general; ++i) accumulate(build_expert(/*general=*/true, i));
  for (size_t j = 0; j < mask.bits.size(); ++j) {
    if (!mask.bits[j]) continue;
    int y = build_expert(/*general=*/false, j);
    accumulate(g.mul_scalar(y, g.pick_elem(gate_vec, 0, static_cast<int>(j))));
  }
  if (acc < 0) acc = g.input(Mat(g.val(x).rows, out_cols));
  return acc;
}

inline int build_moe_linear(Graph& g, const MoeParams<LinearParams>& moe, int x, int e_hat,
                            const RoutingMask& mask, int d_out) {
  return build_moe(
      g, x, e_hat, moe.gate, mask, moe.general.size(),
      [&](bool general, size_t idx) {
        const LinearParams& p = general ? moe.general[idx] : moe.specialized[idx];
        return build_linear(g, x, p);
      },
      d_out);
}

inline int build_ffn(Graph& g, int x, const FfnExpert& e, double dropout_p, Rng* rng) {
  int h = g.gelu(build_linear(g, x, e.lin1));
  int y = build_linear(g, h, e.lin2);
  return g.dropout(y, dropout_p, rng);
}

inline int build_moe_ffn(Graph& g, const MoeParams<FfnExpert>& moe, int x, int e_hat,
                         const RoutingMask& mask, int d, double dropout_p, Rng* rng) {
  return build_moe(
      g, x, e_hat, moe.gate, mask, moe.general.size(),
      [&](bool general, size_t idx) {
        const FfnExpert& e = general ? moe.general[idx] : moe.specialized[idx];
        return build_ffn(g, x, e, dropout_p, rng);
      },
      d);
}

inline int build_ln(Graph& g, int x, const LnParams& ln) {
  return g.layer_norm_rows(x, g.param(ln.gamma), g.param(ln.beta), kLnEps);
}

inline int build_attention(Graph& g, const InterLayer& L, int x, const std::vector<double>& valid,
                           int heads) {
  const int d = g.val(x).cols;
  const int dk = d / heads;
  int q = build_linear(g, x, L.wq);
  int k = build_linear(g, x, L.wk);
  int v = build_linear(g, x, L.wv);
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  int merged = -1;
  for (int h = 0; h < heads; ++h) {
    int c0 = h * dk, c1 = (h + 1) * dk;
    int qh = g.slice_cols(q, c0, c1);
    int kh = g.slice_cols(k, c0, c1);
    int vh = g.slice_cols(v, c0, c1);
    int scores = g.scale(g.matmul_nt(qh, kh), scale);
    int probs = g.softmax_rows_masked(scores, valid);  // padded keys get exactly 0
    int oh = g.matmul_nn(probs, vh);
    merged = merged < 0 ? oh : g.concat_cols(merged, oh);
  }
  return build_linear(g, merged, L.wo);
}

inline int build_adapter(Graph& g, const AdapterParams& a, int x, const std::vector<double>& valid,
                         bool residual) {
  int h = build_ln(g, x, a.ln);
  int y = build_linear(g, g.gelu(build_linear(g, h, a.down)), a.up);
  if (residual) y = g.add(y, x);
  return g.zero_rows(y, valid);
}

}  // namespace detail

// CyclePatch: every available cycle (a flattened 300x3 patch) through the
// linear-expert BatteryMoE, producing one d-dimensional token per cycle.
inline int build_cyclepatch(Graph& g, const ModelState& m, int x_node, int e_hat,
                            const RoutingMask& mask) {
  const int s = g.val(x_node).rows;
  if (s < 1 || s > m.config.max_cycles)
    throw InvalidN("cycle count must be in [1, 100], got " + std::to_string(s));
  if (g.val(x_node).cols != kPointsPerCycle * 3)
    throw DimensionMismatch("each cycle patch must flatten to 900 values");
  return detail::build_moe_linear(g, m.cyclepatch, x_node, e_hat, mask, m.config.d);
}

// Encoder stack over padded tokens: L1 row-wise intra-cycle layers, sinusoidal
// positions on valid rows, L2 masked-attention inter-cycle layers. Padded rows
// are re-zeroed after every layer so they stay exactly zero throughout.
inline int build_encoder(Graph& g, const ModelState& m, int tokens, int s, int e_hat,
                         const RoutingMask& mask, double dropout_p, Rng* rng) {
  const int total = m.config.max_cycles;
  std::vector<double> valid(static_cast<size_t>(total), 0.0);
  for (int i = 0; i < s; ++i) valid[static_cast<size_t>(i)] = 1.0;

  std::map<int, size_t> adapter_at;
  for (size_t k = 0; k < m.adapter_positions.size(); ++k)
    adapter_at[m.adapter_positions[k]] = k;

  int h = tokens;
  int pipeline_pos = 0;
  auto maybe_adapter = [&](int node) {
    auto it = adapter_at.find(pipeline_pos);
    if (it == adapter_at.end()) return node;
    return detail::build_adapter(g, m.adapters[it->second], node, valid, m.adapter_residual);
  };

  for (const IntraLayer& L : m.intra) {
    int ffn = detail::build_moe_ffn(g, L.moe, h, e_hat, mask, m.config.d, dropout_p, rng);
    h = g.zero_rows(detail::build_ln(g, g.add(ffn, h), L.ln), valid);
    h = maybe_adapter(h);
    ++pipeline_pos;
  }

  h = g.add(h, g.input(positional_encoding(s, total, m.config.d)));

  for (const InterLayer& L : m.inter) {
    int att = g.dropout(detail::build_attention(g, L, h, valid, m.config.heads), dropout_p, rng);
    int p1 = g.zero_rows(detail::build_ln(g, g.add(att, h), L.ln1), valid);
    int ffn = detail::build_moe_ffn(g, L.moe, p1, e_hat, mask, m.config.d, dropout_p, rng);
    h = g.zero_rows(detail::build_ln(g, g.add(ffn, p1), L.ln2), valid);
    h = maybe_adapter(h);
    ++pipeline_pos;
  }
  return h;
}

// g = G(z); y = sum of the 5 general linear experts plus the 5 gated ones.
inline int build_head(Graph& g, const ModelState& m, int z) {
  int acc = -1;
  for (int i = 0; i < 5; ++i) {
    int t = detail::build_linear(g, z, m.head.f[static_cast<size_t>(i)]);
    acc = acc < 0 ? t : g.add(acc, t);
  }
  int gate = detail::build_linear(g, z, m.head.gate);
  for (int i = 0; i < 5; ++i) {
    int t = detail::build_linear(g, z, m.head.f[static_cast<size_t>(5 + i)]);
    acc = g.add(acc, g.mul_scalar(t, g.pick_elem(gate, 0, i)));
  }
  return acc;
}

// Full forward pass to the transformed-space prediction node. `rng` non-null
// enables dropout (training mode).
inline int build_forward(Graph& g, const ModelState& m, const Mat& x, const Mat& e,
                         const RoutingMask& mask, Rng* rng) {
  if (e.cols != m.config.d_embed)
    throw DimensionMismatch("aging embedding width must equal configured d_embed");
  const int s = x.rows;
  int e_hat = g.leaky_relu(detail::build_linear(g, g.input(e), m.distill), 0.01);
  int tokens = g.pad_rows(build_cyclepatch(g, m, g.input(x), e_hat, mask), m.config.max_cycles);
  double p = rng ? m.config.dropout : 0.0;
  int enc = build_encoder(g, m, tokens, s, e_hat, mask, p, rng);
  int z = g.pick_row(enc, s - 1);
  return build_head(g, m, z);
}

// Forward pass starting from an externally supplied padded token matrix;
// exposes the padding contract for direct verification.
inline int build_forward_from_tokens(Graph& g, const ModelState& m, const Mat& tokens, int s,
                                     const Mat& e, const RoutingMask& mask) {
  if (tokens.rows != m.config.max_cycles || tokens.cols != m.config.d)
    throw DimensionMismatch("token matrix must be 100 x d");
  if (s < 1 || s > m.config.max_cycles) throw InvalidN("valid token count must be in [1, 100]");
  int e_hat = g.leaky_relu(detail::build_linear(g, g.input(e), m.distill), 0.01);
  int enc = build_encoder(g, m, g.input(tokens), s, e_hat, mask, 0.0, nullptr);
  return build_head(g, m, g.pick_row(enc, s - 1));
}

// The CyclePatch stage materialized: tokens padded to 100 rows with validity.
inline CycleTokens cyclepatch_forward(const ModelState& m, const Mat& x, const Mat& e,
                                      const RoutingMask& mask) {
  Graph g;
  int e_hat = g.leaky_relu(detail::build_linear(g, g.input(e), m.distill), 0.01);
  int tok = g.pad_rows(build_cyclepatch(g, m, g.input(x), e_hat, mask), m.config.max_cycles);
  CycleTokens out;
  out.m = g.val(tok);
  out.s = x.rows;
  out.valid.assign(static_cast<size_t>(m.config.max_cycles), 0.0);
  for (int i = 0; i < x.rows; ++i) out.valid[static_cast<size_t>(i)] = 1.0;
  return out;
}

// Model-ready view of one cell: flattened cycle patches plus the cached aging
// embedding and routing mask (the condition never changes mid-run).
struct CellTensor {
  std::string cell_id;
  std::string dataset_name;
  std::string cond_key;
  AgingCondition condition;
  Mat x;  // S x 900
  double label = 0;
  double threshold_fraction = 0.8;
  Mat e;
  RoutingMask mask;

  int s() const { return x.rows; }
};

using EmbedFn = std::function<Mat(const std::string& prompt)>;

inline EmbedFn hash_embedder(int d_embed) {
  return [d_embed](const std::string& prompt) { return embed_hash(prompt, d_embed); };
}

inline CellTensor make_cell_tensor(const CellSample& cell, const ExpertRegistry& registry,
                                   const EmbedFn& embed) {
  CellTensor t;
  t.cell_id = cell.cell_id;
  t.dataset_name = cell.dataset_name;
  t.condition = cell.condition;
  t.cond_key = condition_key(cell.condition);
  t.label = static_cast<double>(cell.label.cycles_to_threshold);
  t.threshold_fraction = cell.label.threshold_fraction;
  int s = static_cast<int>(cell.cycles.size());
  if (s < 1 || s > kMaxCycles) throw InvalidN("cell must hold 1..100 resampled cycles");
  t.x = Mat(s, kPointsPerCycle * 3);
  for (int k = 0; k < s; ++k)
    for (int j = 0; j < kPointsPerCycle * 3; ++j)
      t.x(k, j) = cell.cycles[static_cast<size_t>(k)].vals[static_cast<size_t>(j)];
  t.e = embed(render_prompt(cell.condition, cell.label.threshold_fraction));
  t.mask = hard_mask(cell.condition, registry);
  return t;
}

// Inference: deterministic, dropout off; returns cycles (inverse-transformed).
inline double predict(const ModelState& m, const CellTensor& cell, int first_n = 0) {
  int s = cell.s();
  if (first_n > 0) {
    if (first_n > s) throw InvalidN("truncation exceeds available cycles");
    s = first_n;
  }
  Mat x(s, cell.x.cols);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < cell.x.cols; ++j) x(i, j) = cell.x(i, j);
  Graph g;
  int yhat = build_forward(g, m, x, cell.e, cell.mask, nullptr);
  return inverse_transform_label(g.val(yhat)(0, 0), m.config.label_transform);
}

}  // namespace pbt
