#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "pbt/battmoe.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/model.hpp"
#include "pbt/train.hpp"

namespace pbt {

enum class TransferMode { fine_tune, adapter };

inline const char* transfer_mode_name(TransferMode m) {
  return m == TransferMode::fine_tune ? "fine_tune" : "adapter";
}

inline TransferMode transfer_mode_from_name(const std::string& s) {
  if (s == "fine_tune") return TransferMode::fine_tune;
  if (s == "adapter") return TransferMode::adapter;
  throw InvalidConfig("transfer mode must be 'fine_tune' or 'adapter', got '" + s + "'");
}

struct TransferConfig {
  TransferMode mode = TransferMode::adapter;
  int n_adapt = 1;  // adapters after the first n_adapt encoder layers
  int d_a = 8;      // adapter bottleneck width
  double learning_rate = 1e-4;
  int batch_size = 32;
  double weight_decay = 0.0;
  double dropout = 0.05;
  bool residual_adapter = false;
  int max_epochs = 10;
  int eval_every = 50;
  uint64_t seed = 0;
  std::string log_path;
};

// Hyperparameters are confined to the published search ranges; every
// rejection names the offending range.
inline void validate_transfer_config(const TransferConfig& c) {
  if (c.mode == TransferMode::fine_tune) {
    if (!(c.learning_rate >= 1e-5 && c.learning_rate <= 1e-4))
      throw InvalidConfig("fine_tune learning_rate must be in [1e-05, 1e-04]");
  } else {
    if (!(c.learning_rate >= 5e-6 && c.learning_rate <= 1e-3))
      throw InvalidConfig("adapter learning_rate must be in [5e-06, 1e-03]");
    if (c.d_a < 1 || c.d_a > 128) throw InvalidConfig("d_a must be in [1, 128]");
    if (c.n_adapt < 1 || c.n_adapt > 12) throw InvalidConfig("n_adapt must be in [1, 12]");
  }
  static const std::set<int> kBatches = {4, 8, 16, 32, 64, 128, 256};
  if (!kBatches.count(c.batch_size))
    throw InvalidConfig("batch_size must be one of {4, 8, 16, 32, 64, 128, 256}");
  if (!(c.weight_decay >= 0.0 && c.weight_decay <= 10.0))
    throw InvalidConfig("weight_decay must be in [0, 10]");
  static const double kDropouts[] = {0.0, 0.05, 0.15, 0.25};
  bool drop_ok = false;
  for (double d : kDropouts) drop_ok = drop_ok || c.dropout == d;
  if (!drop_ok) throw InvalidConfig("dropout must be one of {0, 0.05, 0.15, 0.25}");
  if (c.max_epochs < 1) throw InvalidConfig("max_epochs must be at least 1");
  if (c.eval_every < 1) throw InvalidConfig("eval_every must be at least 1");
}

// Reference nn math for the adapter, mirroring the graph ops bit for bit.
inline Mat adapter_forward(const Mat& x, const AdapterParams& a, bool residual) {
  if (x.cols != a.ln.gamma.cols) throw DimensionMismatch("adapter input width mismatch");
  Mat h(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r) {
    double mean = 0;
    for (int c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= x.cols;
    double var = 0;
    for (int c = 0; c < x.cols; ++c) {
      double d = x(r, c) - mean;
      var += d * d;
    }
    var /= x.cols;
    double inv = 1.0 / std::sqrt(var + kLnEps);
    for (int c = 0; c < x.cols; ++c)
      h(r, c) = (x(r, c) - mean) * inv * a.ln.gamma(0, c) + a.ln.beta(0, c);
  }
  Mat z = matmul_nt(h, a.down.w);
  for (int r = 0; r < z.rows; ++r)
    for (int c = 0; c < z.cols; ++c) {
      double v = z(r, c) + a.down.b(0, c);
      z(r, c) = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
  Mat y = matmul_nt(z, a.up.w);
  for (int r = 0; r < y.rows; ++r)
    for (int c = 0; c < y.cols; ++c) {
      y(r, c) += a.up.b(0, c);
      if (residual) y(r, c) += x(r, c);
    }
  return y;
}

// Inserts bottleneck adapters after each of the first `n_adapt` encoder
// layers in pipeline order (intra-cycle layers first, then inter-cycle).
// Down projections start uniform, up projections start at zero, so with the
// residual flag the inserted adapters are exact identities.
inline ModelState insert_adapters(const ModelState& base, int n_adapt, int d_a, uint64_t seed,
                                  bool residual = false) {
  int total_layers = base.config.l1 + base.config.l2;
  if (n_adapt < 1 || n_adapt > total_layers)
    throw InvalidConfig("n_adapt must be in [1, " + std::to_string(total_layers) + "]");
  if (d_a < 1 || d_a > 128) throw InvalidConfig("d_a must be in [1, 128]");
  ModelState m = base;
  m.adapters.clear();
  m.adapter_positions.clear();
  m.adapter_residual = residual;
  Rng rng(seed);
  const int d = m.config.d;
  for (int k = 0; k < n_adapt; ++k) {
    AdapterParams a;
    detail::init_ln(a.ln, d);
    a.down.w = Mat(d_a, d);
    a.down.b = Mat(1, d_a);
    double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : a.down.w.a) v = rng.uniform(-bound, bound);
    a.up.w = Mat(d, d_a);
    a.up.b = Mat(1, d);
    m.adapters.push_back(std::move(a));
    m.adapter_positions.push_back(k);
  }
  return m;
}

// Full fine-tuning: every parameter updates.
inline TrainResult fine_tune(const ModelState& base, const std::vector<CellTensor>& train_cells,
                             const std::vector<CellTensor>& val_cells, const TransferConfig& cfg) {
  TransferConfig checked = cfg;
  checked.mode = TransferMode::fine_tune;
  validate_transfer_config(checked);
  ModelState m = base;
  m.config.dropout = cfg.dropout;
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.weight_decay = cfg.weight_decay;
  tc.max_epochs = cfg.max_epochs;
  tc.eval_every = cfg.eval_every;
  tc.seed = cfg.seed;
  tc.log_path = cfg.log_path;
  return train_loop(m, train_cells, val_cells, tc, all_trainable());
}

// Adapter tuning: inserts adapters when the model has none, then updates
// adapter parameters only; the base stays bit-identical.
inline TrainResult adapter_tune(const ModelState& base, const std::vector<CellTensor>& train_cells,
                                const std::vector<CellTensor>& val_cells,
                                const TransferConfig& cfg) {
  TransferConfig checked = cfg;
  checked.mode = TransferMode::adapter;
  validate_transfer_config(checked);
  ModelState m = base;
  if (m.adapters.empty())
    m = insert_adapters(base, cfg.n_adapt, cfg.d_a, cfg.seed ^ 0xada57ULL, cfg.residual_adapter);
  m.config.dropout = cfg.dropout;
  TrainConfig tc;
  tc.learning_rate = cfg.learning_rate;
  tc.batch_size = cfg.batch_size;
  tc.weight_decay = cfg.weight_decay;
  tc.max_epochs = cfg.max_epochs;
  tc.eval_every = cfg.eval_every;
  tc.seed = cfg.seed;
  tc.log_path = cfg.log_path;
  return train_loop(m, train_cells, val_cells, tc, adapters_only());
}

namespace detail {

inline void mean_linear(const std::vector<LinearParams>& src, const std::vector<size_t>& idx,
                        LinearParams& out) {
  out.w = Mat(src[idx[0]].w.rows, src[idx[0]].w.cols);
  out.b = Mat(src[idx[0]].b.rows, src[idx[0]].b.cols);
  for (size_t i : idx) {
    add_inplace(out.w, src[i].w);
    add_inplace(out.b, src[i].b);
  }
  double inv = 1.0 / static_cast<double>(idx.size());
  for (double& v : out.w.a) v *= inv;
  for (double& v : out.b.a) v *= inv;
}

inline void mean_ffn(const std::vector<FfnExpert>& src, const std::vector<size_t>& idx,
                     FfnExpert& out) {
  out.lin1.w = Mat(src[idx[0]].lin1.w.rows, src[idx[0]].lin1.w.cols);
  out.lin1.b = Mat(src[idx[0]].lin1.b.rows, src[idx[0]].lin1.b.cols);
  out.lin2.w = Mat(src[idx[0]].lin2.w.rows, src[idx[0]].lin2.w.cols);
  out.lin2.b = Mat(src[idx[0]].lin2.b.rows, src[idx[0]].lin2.b.cols);
  for (size_t i : idx) {
    add_inplace(out.lin1.w, src[i].lin1.w);
    add_inplace(out.lin1.b, src[i].lin1.b);
    add_inplace(out.lin2.w, src[i].lin2.w);
    add_inplace(out.lin2.b, src[i].lin2.b);
  }
  double inv = 1.0 / static_cast<double>(idx.size());
  for (double& v : out.lin1.w.a) v *= inv;
  for (double& v : out.lin1.b.a) v *= inv;
  for (double& v : out.lin2.w.a) v *= inv;
  for (double& v : out.lin2.b.a) v *= inv;
}

inline void extend_gate(GateParams& gate, const std::vector<size_t>& idx) {
  Mat w2(gate.w2.rows + 1, gate.w2.cols);
  for (int r = 0; r < gate.w2.rows; ++r)
    for (int c = 0; c < gate.w2.cols; ++c) w2(r, c) = gate.w2(r, c);
  Mat b2(1, gate.b2.cols + 1);
  for (int c = 0; c < gate.b2.cols; ++c) b2(0, c) = gate.b2(0, c);
  double inv = 1.0 / static_cast<double>(idx.size());
  for (size_t i : idx) {
    for (int c = 0; c < gate.w2.cols; ++c)
      w2(gate.w2.rows, c) += gate.w2(static_cast<int>(i), c) * inv;
    b2(0, gate.b2.cols) += gate.b2(0, static_cast<int>(i)) * inv;
  }
  gate.w2 = std::move(w2);
  gate.b2 = std::move(b2);
}

// Appends one specialized expert to every BatteryMoE layer, initialized to
// the mean of the same-kind experts, and registers the new routing tag.
inline void append_expert(ModelState& m, const RoutingTag& tag) {
  std::vector<size_t> same_kind;
  for (size_t j = 0; j < m.registry.specialized.size(); ++j)
    if (m.registry.specialized[j].kind == tag.kind) same_kind.push_back(j);
  if (same_kind.empty())
    throw InvalidConfig("cannot extend a kind with no existing experts: " +
                        std::string(tag_kind_name(tag.kind)));

  LinearParams lp;
  mean_linear(m.cyclepatch.specialized, same_kind, lp);
  m.cyclepatch.specialized.push_back(std::move(lp));
  extend_gate(m.cyclepatch.gate, same_kind);
  for (IntraLayer& L : m.intra) {
    FfnExpert fe;
    mean_ffn(L.moe.specialized, same_kind, fe);
    L.moe.specialized.push_back(std::move(fe));
    extend_gate(L.moe.gate, same_kind);
  }
  for (InterLayer& L : m.inter) {
    FfnExpert fe;
    mean_ffn(L.moe.specialized, same_kind, fe);
    L.moe.specialized.push_back(std::move(fe));
    extend_gate(L.moe.gate, same_kind);
  }
  m.registry.specialized.push_back(tag);
}

}  // namespace detail

// Adds experts for category values the registry cannot route yet, so target
// conditions with new chemistries/formats/temperatures become routable.
// Kinds without any expert keep being ignored by the router.
inline int extend_registry(ModelState& m, const std::vector<AgingCondition>& conditions) {
  int added = 0;
  for (const AgingCondition& cond : conditions) {
    validate_condition(cond);
    for (TagKind kind :
         {TagKind::cathode, TagKind::anode, TagKind::format, TagKind::temperature}) {
      bool kind_present = false, matched = false;
      for (const RoutingTag& t : m.registry.specialized) {
        if (t.kind != kind) continue;
        kind_present = true;
        if (tag_matches(t, cond)) {
          matched = true;
          break;
        }
      }
      if (!kind_present || matched) continue;
      RoutingTag tag;
      tag.kind = kind;
      switch (kind) {
        case TagKind::cathode: tag.value = cond.cathode; break;
        case TagKind::anode: tag.value = cond.anode; break;
        case TagKind::format: tag.value = cond.format; break;
        case TagKind::temperature:
          tag.center_c = temperature_center(cond.temperature_c);
          tag.value = detail::fmt_num(tag.center_c);
          break;
      }
      detail::append_expert(m, tag);
      ++added;
    }
  }
  return added;
}

}  // namespace pbt
