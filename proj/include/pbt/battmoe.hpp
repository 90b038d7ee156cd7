#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pbt/aging.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"

namespace pbt {

enum class TagKind { cathode, anode, format, temperature };

inline const char* tag_kind_name(TagKind k) {
  switch (k) {
    case TagKind::cathode: return "cathode";
    case TagKind::anode: return "anode";
    case TagKind::format: return "format";
    case TagKind::temperature: return "temperature";
  }
  return "?";
}

inline TagKind tag_kind_from_name(const std::string& s) {
  if (s == "cathode") return TagKind::cathode;
  if (s == "anode") return TagKind::anode;
  if (s == "format") return TagKind::format;
  if (s == "temperature") return TagKind::temperature;
  throw InvalidConfig("unknown routing tag kind '" + s + "'");
}

// Specialization tag of one expert. Categorical kinds use `value`;
// temperature experts use `center_c`, a multiple of 5 degrees C.
struct RoutingTag {
  TagKind kind = TagKind::cathode;
  std::string value;
  double center_c = 0;

  bool operator==(const RoutingTag& o) const {
    if (kind != o.kind) return false;
    if (kind == TagKind::temperature) return center_c == o.center_c;
    return value == o.value;
  }
};

// Ordered specialized-expert tags plus the per-layer general expert count.
// The order is fixed at construction: every BatteryMoE layer's expert list
// and gate rows follow this exact order.
struct ExpertRegistry {
  int general_count = 1;
  std::vector<RoutingTag> specialized;

  int k_s() const { return static_cast<int>(specialized.size()); }
};

struct RoutingMask {
  std::vector<uint8_t> bits;

  int count_selected() const {
    int n = 0;
    for (uint8_t b : bits) n += b ? 1 : 0;
    return n;
  }
};

// One expert per started hundred of training batteries, with half-hundreds
// rounding up: 50 -> 1, 101 -> 1, 150 -> 2, 151 -> 2.
inline int allocate_expert_count(int n_batteries) {
  if (n_batteries < 1) throw InvalidConfig("expert allocation needs a positive battery count");
  return std::max(1, (n_batteries + 50) / 100);
}

inline std::map<std::string, int> allocate_expert_counts(
    const std::map<std::string, int>& batteries_per_value) {
  std::map<std::string, int> out;
  for (const auto& [value, n] : batteries_per_value) out[value] = allocate_expert_count(n);
  return out;
}

inline double temperature_center(double temperature_c) {
  return 5.0 * static_cast<double>(std::llround(temperature_c / 5.0));
}

// Builds the registry from training conditions only. Kind order is fixed
// (cathode, anode, format, temperature); categorical values sort
// lexicographically and temperature centers ascend, so the registry is
// deterministic for a given training set.
inline ExpertRegistry build_registry(const std::vector<AgingCondition>& train_conditions,
                                     int general_count = 1) {
  ExpertRegistry reg;
  reg.general_count = general_count;

  auto add_categorical = [&](TagKind kind, auto field) {
    std::map<std::string, int> counts;
    for (const AgingCondition& c : train_conditions) counts[field(c)]++;
    for (const auto& [value, n] : counts) {
      int experts = allocate_expert_count(n);
      for (int e = 0; e < experts; ++e)
        reg.specialized.push_back(RoutingTag{kind, value, 0.0});
    }
  };
  add_categorical(TagKind::cathode, [](const AgingCondition& c) { return c.cathode; });
  add_categorical(TagKind::anode, [](const AgingCondition& c) { return c.anode; });
  add_categorical(TagKind::format, [](const AgingCondition& c) { return c.format; });

  std::map<double, int> temp_counts;
  for (const AgingCondition& c : train_conditions) temp_counts[temperature_center(c.temperature_c)]++;
  for (const auto& [center, n] : temp_counts) {
    int experts = allocate_expert_count(n);
    for (int e = 0; e < experts; ++e)
      reg.specialized.push_back(
          RoutingTag{TagKind::temperature, detail::fmt_num(center), center});
  }
  return reg;
}

inline bool tag_matches(const RoutingTag& tag, const AgingCondition& c) {
  switch (tag.kind) {
    case TagKind::cathode: return tag.value == c.cathode;
    case TagKind::anode: return tag.value == c.anode;
    case TagKind::format: return tag.value == c.format;
    case TagKind::temperature: return std::fabs(tag.center_c - c.temperature_c) <= 5.0;
  }
  return false;
}

// Knowledge-based weight selection: bit j set iff specialized expert j's tag
// matches the condition (exact value for categorical kinds, +-5 C inclusive
// for temperature). A kind that has experts in the registry but no match for
// the condition is outside the training vocabulary: UnknownCategory. Kinds
// with no experts at all are simply not routed on.
inline RoutingMask hard_mask(const AgingCondition& cond, const ExpertRegistry& reg) {
  RoutingMask mask;
  mask.bits.assign(static_cast<size_t>(reg.k_s()), 0);
  bool kind_present[4] = {false, false, false, false};
  bool kind_matched[4] = {false, false, false, false};
  for (int j = 0; j < reg.k_s(); ++j) {
    const RoutingTag& tag = reg.specialized[static_cast<size_t>(j)];
    int ki = static_cast<int>(tag.kind);
    kind_present[ki] = true;
    if (tag_matches(tag, cond)) {
      kind_matched[ki] = true;
      mask.bits[static_cast<size_t>(j)] = 1;
    }
  }
  for (int ki = 0; ki < 4; ++ki) {
    if (kind_present[ki] && !kind_matched[ki]) {
      TagKind kind = static_cast<TagKind>(ki);
      std::string v;
      switch (kind) {
        case TagKind::cathode: v = cond.cathode; break;
        case TagKind::anode: v = cond.anode; break;
        case TagKind::format: v = cond.format; break;
        case TagKind::temperature: v = detail::fmt_num(cond.temperature_c) + " degrees C"; break;
      }
      throw UnknownCategory(std::string(tag_kind_name(kind)) + " value '" + v +
                            "' has no expert in the registry");
    }
  }
  return mask;
}

// Selected soft weights: g with masked-out entries set to exactly zero.
inline std::vector<double> masked_weights(const std::vector<double>& g, const RoutingMask& mask) {
  if (g.size() != mask.bits.size())
    throw DimensionMismatch("gate weight count must equal specialized expert count");
  std::vector<double> out(g.size(), 0.0);
  for (size_t j = 0; j < g.size(); ++j)
    if (mask.bits[j]) out[j] = g[j];
  return out;
}

struct LinearParams {
  Mat w;  // (out, in)
  Mat b;  // (1, out)
};

struct GateParams {
  Mat w2;  // (K_s, d_ff)
  Mat b2;  // (1, K_s)
};

// e -> LeakyReLU(W e + b), slope 0.01. Computed once per cell and shared by
// every BatteryMoE layer.
inline Mat distill_embedding(const Mat& e, const LinearParams& distill) {
  if (e.rows != 1 || e.cols != distill.w.cols)
    throw DimensionMismatch("aging embedding length must equal distill input width");
  Mat out = matmul_nt(e, distill.w);
  for (int j = 0; j < out.cols; ++j) {
    double v = out(0, j) + distill.b(0, j);
    out(0, j) = v > 0.0 ? v : 0.01 * v;
  }
  return out;
}

// Per-layer soft gate: g = W2 e_hat + b2, no normalization.
inline std::vector<double> gate_weights(const Mat& e_hat, const GateParams& gate) {
  if (e_hat.rows != 1 || e_hat.cols != gate.w2.cols)
    throw DimensionMismatch("distilled embedding length must equal gate input width");
  Mat g = matmul_nt(e_hat, gate.w2);
  std::vector<double> out(static_cast<size_t>(g.cols));
  for (int j = 0; j < g.cols; ++j) out[static_cast<size_t>(j)] = g(0, j) + gate.b2(0, j);
  return out;
}

// Expert aggregation: all general experts plus gate-weighted specialized
// experts. An expert with weight exactly 0 is never evaluated (compute-skip).
// `experts` lists the K_g general experts first, then the K_s specialized
// ones; `out_cols` fixes the output width for the nothing-selected case.
inline Mat moe_forward(const Mat& x, const std::vector<double>& g_bar,
                       const std::vector<std::function<Mat(const Mat&)>>& experts, int k_g,
                       int out_cols) {
  if (static_cast<int>(experts.size()) != k_g + static_cast<int>(g_bar.size()))
    throw DimensionMismatch("expert list must hold K_g general plus K_s specialized experts");
  Mat acc(x.rows, out_cols);
  auto accumulate = [&](const Mat& y, double w) {
    if (!acc.same_shape(y)) throw DimensionMismatch("expert output shape mismatch");
    for (size_t i = 0; i < acc.a.size(); ++i) acc.a[i] += w * y.a[i];
  };
  for (int i = 0; i < k_g; ++i) accumulate(experts[static_cast<size_t>(i)](x), 1.0);
  for (size_t j = 0; j < g_bar.size(); ++j) {
    if (g_bar[j] == 0.0) continue;  // compute-skip: masked experts are not run
    accumulate(experts[static_cast<size_t>(k_g) + j](x), g_bar[j]);
  }
  return acc;
}

}  // namespace pbt
