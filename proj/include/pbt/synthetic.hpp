#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "pbt/aging.hpp"
#include "pbt/cycledata.hpp"
#include "pbt/errors.hpp"
#include "pbt/rng.hpp"

namespace pbt {

inline constexpr double kSynthThreshold = 0.8;

// Sampling tables for per-cell aging factors. Every table must be non-empty.
struct SynthConfig {
  int n_cells = 32;
  int l_min = 300;
  int l_max = 2000;
  double beta = 1.0;  // fade exponent
  std::string dataset_name = "synthetic";
  std::vector<std::string> cathodes = {"LFP", "NMC", "NCA"};
  std::vector<std::string> anodes = {"graphite", "graphite-SiOx"};
  std::vector<std::string> formats = {"cylindrical_18650", "pouch", "prismatic"};
  std::vector<std::string> electrolytes = {"", "1M LiPF6 in EC:DMC 1:1 vol"};
  std::vector<std::string> manufacturers = {"CellWorks", "NorthCell"};
  std::vector<double> temperatures_c = {15.0, 25.0, 35.0};
  std::vector<double> charge_c_rates = {0.5, 1.0, 1.5, 2.0};
  std::vector<double> capacities_ah = {1.1, 2.0, 3.5};
};

namespace detail {

template <typename T>
const T& pick(const std::vector<T>& table, Rng& rng) {
  return table[static_cast<size_t>(rng.next_below(table.size()))];
}

// Discharge capacity at cycle k. The final cycle is pinned to the exact
// threshold expression used by the labeler, so the configured lifetime is
// recovered bit-exactly; earlier cycles clear it by a margin >= 0.1*beta/L.
inline double synth_capacity(int k, int life, double beta, double q0) {
  if (k >= life) return kSynthThreshold * q0;
  double frac = static_cast<double>(k) / static_cast<double>(life);
  return q0 * (1.0 - 0.2 * std::pow(frac, beta));
}

}  // namespace detail

inline void validate_synth_config(const SynthConfig& c) {
  if (c.n_cells < 1) throw InvalidConfig("n_cells must be at least 1");
  if (c.l_min < 2) throw InvalidConfig("l_min must be at least 2");
  if (c.l_max > 10000) throw InvalidConfig("l_max must be at most 10000");
  if (c.l_min > c.l_max) throw InvalidConfig("l_min must not exceed l_max");
  if (!(c.beta > 0.0)) throw InvalidConfig("beta must be positive");
  if (c.cathodes.empty() || c.anodes.empty() || c.formats.empty() || c.electrolytes.empty() ||
      c.manufacturers.empty() || c.temperatures_c.empty() || c.charge_c_rates.empty() ||
      c.capacities_ah.empty())
    throw InvalidConfig("every sampling table must be non-empty");
}

// Deterministic synthetic drop-in for real cycling data. Per cycle: an
// 8-sample constant-current charge sweep (smooth voltage-vs-SOC profile plus
// an IR offset proportional to C-rate) followed by a 2-sample one-hour
// constant-current discharge whose trapezoidal integral equals the modeled
// capacity exactly.
inline std::vector<RawCellRecord> generate_synthetic(const SynthConfig& config, uint64_t seed) {
  validate_synth_config(config);
  Rng master(seed);
  std::vector<RawCellRecord> cells;
  cells.reserve(static_cast<size_t>(config.n_cells));

  for (int c = 0; c < config.n_cells; ++c) {
    Rng rng = master.fork(static_cast<uint64_t>(c));
    RawCellRecord rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "_%04d", c);
    rec.cell_id = config.dataset_name + idbuf;
    rec.dataset_name = config.dataset_name;

    double q0 = detail::pick(config.capacities_ah, rng);
    rec.nominal_capacity_ah = q0;

    AgingCondition& cond = rec.condition;
    cond.cathode = detail::pick(config.cathodes, rng);
    cond.anode = detail::pick(config.anodes, rng);
    cond.format = detail::pick(config.formats, rng);
    cond.electrolyte = detail::pick(config.electrolytes, rng);
    cond.manufacturer = detail::pick(config.manufacturers, rng);
    cond.nominal_capacity_ah = q0;
    cond.temperature_c = detail::pick(config.temperatures_c, rng);
    cond.formation_protocol =
        rng.uniform() < 0.5 ? "" : "The cell completed three formation cycles at 0.1 C";

    double c_chg = detail::pick(config.charge_c_rates, rng);
    if (rng.uniform() < 0.25) {
      ProtocolStage s1;
      s1.c_rate = c_chg;
      s1.soc_target_pct = 80.0;
      ProtocolStage s2;
      s2.c_rate = 0.5;
      s2.cutoff_v = 4.2;
      cond.charge_stages = {s1, s2};
    } else {
      ProtocolStage s1;
      s1.c_rate = c_chg;
      s1.cutoff_v = 4.2;
      cond.charge_stages = {s1};
    }
    ProtocolStage dis;
    dis.c_rate = 1.0;
    dis.cutoff_v = 3.0;
    cond.discharge_stages = {dis};

    int life = config.l_min + static_cast<int>(rng.next_below(
                                  static_cast<uint64_t>(config.l_max - config.l_min + 1)));

    rec.cycles.reserve(static_cast<size_t>(life));
    for (int k = 1; k <= life; ++k) {
      double qk = detail::synth_capacity(k, life, config.beta, q0);
      RawCycle cyc;
      cyc.samples.reserve(10);
      for (int j = 0; j < 8; ++j) {
        double soc = static_cast<double>(j) / 7.0;
        RawSample s;
        s.t = 512.0 * j;
        s.i = c_chg * q0;
        s.v = 3.0 + 0.7 * soc + 0.5 * soc * soc + 0.05 * c_chg;
        cyc.samples.push_back(s);
      }
      // Two samples one hour apart at constant current |i| = qk make the
      // trapezoid integral exactly qk: 0.5*(qk+qk)*(3600/3600).
      double dis_cr = qk / q0;
      for (int j = 0; j < 2; ++j) {
        RawSample s;
        s.t = 3600.0 * (j + 1);
        s.i = -qk;
        s.v = 3.0 + (j == 0 ? 1.0 : 0.0) - 0.05 * dis_cr;
        cyc.samples.push_back(s);
      }
      rec.cycles.push_back(std::move(cyc));
    }
    cells.push_back(std::move(rec));
  }
  return cells;
}

}  // namespace pbt
