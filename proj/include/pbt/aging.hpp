#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"

namespace pbt {

struct ProtocolStage {
  double c_rate = 0;
  std::optional<double> soc_target_pct;
  std::optional<double> cutoff_v;
};

// The ten aging factors grouped by the prompt template: specifications
// (cathode, anode, electrolyte, nominal capacity, format, manufacturer),
// formation, and operation (charge protocol, discharge protocol,
// temperature). chemistry_family and soc_range render into the prompt but are
// not condition-identity factors.
struct AgingCondition {
  std::string chemistry_family = "lithium-ion";
  std::string format;
  std::string cathode;
  std::string anode;
  std::string electrolyte;           // empty = unknown
  std::string manufacturer;
  double nominal_capacity_ah = 0;
  std::string formation_protocol;    // empty = just after formation
  std::vector<ProtocolStage> charge_stages;
  std::vector<ProtocolStage> discharge_stages;
  double temperature_c = 25;
  double soc_low_pct = 0;
  double soc_high_pct = 100;
};

inline void validate_condition(const AgingCondition& c) {
  if (c.cathode.empty()) throw InvalidConfig("condition.cathode must be non-empty");
  if (c.anode.empty()) throw InvalidConfig("condition.anode must be non-empty");
  if (c.format.empty()) throw InvalidConfig("condition.format must be non-empty");
  if (!std::isfinite(c.temperature_c)) throw InvalidConfig("condition.temperature_c must be finite");
  if (!(c.soc_low_pct < c.soc_high_pct))
    throw InvalidConfig("condition soc_range must satisfy low < high");
}

namespace detail {

// Human-readable number: no trailing zeros, integers without a decimal point.
inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// Exact textual identity for condition keys.
inline std::string fmt_exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string number_word(int n) {
  static const char* w[] = {"zero", "one",  "two",  "three", "four",  "five",  "six",
                            "seven", "eight", "nine", "ten",  "eleven", "twelve", "thirteen",
                            "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
                            "nineteen", "twenty"};
  if (n >= 0 && n <= 20) return w[n];
  return std::to_string(n);
}

inline std::string ordinal_word(int n) {
  static const char* w[] = {"zeroth", "first", "second", "third", "fourth", "fifth",
                            "sixth", "seventh", "eighth", "ninth", "tenth", "eleventh",
                            "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth",
                            "seventeenth", "eighteenth", "nineteenth", "twentieth"};
  if (n >= 0 && n <= 20) return w[n];
  return std::to_string(n) + "th";
}

// Renders " to X% state-of-charge (SOC)" on the first SOC mention in the
// prompt and " to X% SOC" afterwards; cutoffs append " until reaching V V".
inline std::string stage_suffix(const ProtocolStage& st, bool& soc_spelled) {
  std::string s;
  if (st.soc_target_pct) {
    s += " to " + fmt_num(*st.soc_target_pct) + "% ";
    s += soc_spelled ? "SOC" : "state-of-charge (SOC)";
    soc_spelled = true;
  }
  if (st.cutoff_v) s += " until reaching " + fmt_num(*st.cutoff_v) + " V";
  return s;
}

}  // namespace detail

// Fills the unified prompt template: a task description naming the capacity
// threshold, the battery specifications, and the operating condition with
// multi-stage protocols enumerated and single stages collapsed to one
// sentence.
inline std::string render_prompt(const AgingCondition& c, double threshold_fraction) {
  using detail::fmt_num;
  std::string p;
  p += "Task description: The target the number of cycles until the battery’s discharge "
       "capacity reaches " +
       fmt_num(threshold_fraction * 100.0) +
       "% of its nominal capacity. The discharge capacity is calculated under the described "
       "operating condition. Please directly output the target of the battery based on the "
       "provided data.";

  p += "\n\nBattery specifications: The data comes from a " + c.chemistry_family +
       " battery in a format of " + c.format + ". Its positive electrode is " + c.cathode +
       ". Its negative electrode is " + c.anode + ". The electrolyte formula is " +
       (c.electrolyte.empty() ? std::string("unknown") : c.electrolyte) +
       ". The battery manufacturer is " + c.manufacturer + ". The nominal capacity is " +
       fmt_num(c.nominal_capacity_ah) + " Ah.";

  p += "\n\nOperating condition: ";
  if (c.formation_protocol.empty()) {
    p += "The working history of this battery is just after formation.";
  } else {
    p += c.formation_protocol;
    if (p.back() != '.') p += '.';
  }
  p += " The working ambient temperature of this battery is " + fmt_num(c.temperature_c) +
       " degrees Celsius.";

  bool soc_spelled = false;
  const auto& cs = c.charge_stages;
  if (cs.size() > 1) {
    p += " The cycling consists of " + detail::number_word(static_cast<int>(cs.size())) +
         " charging stages.";
    for (size_t k = 0; k < cs.size(); ++k) {
      p += " In the " + detail::ordinal_word(static_cast<int>(k) + 1) +
           " stage, the battery was charged at a constant current of " + fmt_num(cs[k].c_rate) +
           " C" + detail::stage_suffix(cs[k], soc_spelled) + ".";
    }
  } else if (cs.size() == 1) {
    p += " In the cycling, the battery was charged at a constant current of " +
         fmt_num(cs[0].c_rate) + " C" + detail::stage_suffix(cs[0], soc_spelled) + ".";
  }

  const auto& ds = c.discharge_stages;
  if (ds.size() > 1) {
    p += " The discharging consists of " + detail::number_word(static_cast<int>(ds.size())) +
         " stages.";
    for (size_t k = 0; k < ds.size(); ++k) {
      p += " In the " + detail::ordinal_word(static_cast<int>(k) + 1) +
           " stage, the battery was discharged at a constant current of " + fmt_num(ds[k].c_rate) +
           " C" + detail::stage_suffix(ds[k], soc_spelled) + ".";
    }
  } else if (ds.size() == 1) {
    p += " The battery was then discharged at a constant current of " + fmt_num(ds[0].c_rate) +
         " C" + detail::stage_suffix(ds[0], soc_spelled) + ".";
  }

  p += " The cycling state-of-charge of this battery ranges from " + fmt_num(c.soc_low_pct) +
       "% to " + fmt_num(c.soc_high_pct) + "%.";
  return p;
}

namespace detail {

inline std::string key_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char ch : s) {
    if (ch == '\\' || ch == '|' || ch == ';' || ch == '~') out += '\\';
    out += ch;
  }
  return out;
}

inline std::string key_stages(const std::vector<ProtocolStage>& stages) {
  std::string out;
  for (const ProtocolStage& st : stages) {
    if (!out.empty()) out += ';';
    out += "c:" + fmt_exact(st.c_rate);
    out += ",soc:" + (st.soc_target_pct ? fmt_exact(*st.soc_target_pct) : std::string("_"));
    out += ",v:" + (st.cutoff_v ? fmt_exact(*st.cutoff_v) : std::string("_"));
  }
  return out;
}

}  // namespace detail

// Canonical identity over the ten aging factors: two conditions get equal
// keys iff every factor is equal. Used for the seen/unseen evaluation split.
inline std::string condition_key(const AgingCondition& c) {
  using detail::fmt_exact;
  using detail::key_escape;
  std::string k;
  k += "cathode=" + key_escape(c.cathode);
  k += "|anode=" + key_escape(c.anode);
  k += "|electrolyte=" + key_escape(c.electrolyte);
  k += "|capacity_ah=" + fmt_exact(c.nominal_capacity_ah);
  k += "|format=" + key_escape(c.format);
  k += "|manufacturer=" + key_escape(c.manufacturer);
  k += "|formation=" + key_escape(c.formation_protocol);
  k += "|charge=" + detail::key_stages(c.charge_stages);
  k += "|discharge=" + detail::key_stages(c.discharge_stages);
  k += "|temp_c=" + fmt_exact(c.temperature_c);
  return k;
}

struct TokenMatrix {
  Mat rows;                // L x d_embed
  std::vector<int> mask;   // L entries, nonzero = valid
};

// Row at the largest valid index; the causal-context pooling rule.
inline Mat last_valid_pool(const TokenMatrix& tokens) {
  if (static_cast<int>(tokens.mask.size()) != tokens.rows.rows)
    throw DimensionMismatch("token mask length must equal token row count");
  for (int r = tokens.rows.rows - 1; r >= 0; --r) {
    if (tokens.mask[static_cast<size_t>(r)] != 0) {
      Mat out(1, tokens.rows.cols);
      for (int j = 0; j < tokens.rows.cols; ++j) out(0, j) = tokens.rows(r, j);
      return out;
    }
  }
  throw NoValidToken("no valid token row to pool");
}

// Lowercased runs of ASCII alphanumerics; everything else separates tokens.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char ch : text) {
    bool alnum = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9');
    if (alnum) {
      cur += static_cast<char>(ch >= 'A' && ch <= 'Z' ? ch - 'A' + 'a' : ch);
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

inline constexpr uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr uint64_t kFnvPrime = 1099511628211ULL;
// Second stream for bucket signs; any fixed distinct offset works.
inline constexpr uint64_t kFnvSignOffset = kFnvOffset ^ 0x9E3779B97F4A7C15ULL;

inline uint64_t fnv1a64(const std::string& s, uint64_t offset = kFnvOffset) {
  uint64_t h = offset;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= kFnvPrime;
  }
  return h;
}

// Deterministic feature-hash embedding: each token lands in bucket
// fnv1a(token) mod d with a +-1 sign from a second hash; the sum is
// L2-normalized. A platform-independent stand-in for a language-model
// embedding.
inline Mat embed_hash(const std::string& prompt, int d_embed) {
  if (d_embed < 8) throw InvalidConfig("d_embed must be at least 8");
  std::vector<std::string> tokens = tokenize(prompt);
  if (tokens.empty()) throw EmptyPrompt("prompt has no tokens");
  Mat e(1, d_embed);
  for (const std::string& tok : tokens) {
    uint64_t bucket = fnv1a64(tok) % static_cast<uint64_t>(d_embed);
    double sign = (fnv1a64(tok, kFnvSignOffset) & 1ULL) ? 1.0 : -1.0;
    e(0, static_cast<int>(bucket)) += sign;
  }
  double norm2 = 0.0;
  for (double v : e.a) norm2 += v * v;
  if (norm2 == 0.0) {
    // All tokens cancelled pairwise; fall back to a deterministic unit vector.
    e(0, static_cast<int>(fnv1a64(tokens.front()) % static_cast<uint64_t>(d_embed))) = 1.0;
    norm2 = 1.0;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (double& v : e.a) v *= inv;
  return e;
}

}  // namespace pbt
