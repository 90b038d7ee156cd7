#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pbt/aging.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/rng.hpp"

namespace pbt {

// Raw time series as measured: seconds, volts, signed amperes.
// Sign convention: charge current positive, discharge negative.
struct RawSample {
  double t = 0;
  double v = 0;
  double i = 0;
};

struct RawCycle {
  std::vector<RawSample> samples;
};

struct RawCellRecord {
  std::string cell_id;
  std::string dataset_name;
  double nominal_capacity_ah = 0;
  AgingCondition condition;
  std::vector<RawCycle> cycles;
};

// One cycle resampled to 300 points: rows 0..149 charge phase, 150..299
// discharge phase, each row (voltage V, current C-rate, capacity Ah).
// Stored flattened row-major so a cycle is directly a 900-value model patch.
struct ResampledCycle {
  std::vector<double> vals;  // 300 * 3

  ResampledCycle() : vals(900, 0.0) {}
  double& at(int row, int col) { return vals[static_cast<size_t>(row) * 3 + col]; }
  double at(int row, int col) const { return vals[static_cast<size_t>(row) * 3 + col]; }
};

struct LifeLabel {
  int cycles_to_threshold = 0;
  double threshold_fraction = 0.8;
};

struct CellSample {
  std::string cell_id;
  std::string dataset_name;
  double nominal_capacity_ah = 0;
  AgingCondition condition;
  std::vector<ResampledCycle> cycles;  // first S cycles, S <= 100
  LifeLabel label;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  uint64_t seed = 0;
};

inline constexpr int kMaxCycles = 100;
inline constexpr int kPointsPerPhase = 150;
inline constexpr int kPointsPerCycle = 2 * kPointsPerPhase;

// Cumulative |i| dt integral (trapezoidal) in amp-hours, starting at 0.
// The interval is divided by 3600 before the multiply so a phase spanning
// exactly 3600 s with constant current integrates with no rounding beyond
// the current value itself.
inline std::vector<double> coulomb_count(const std::vector<double>& t,
                                         const std::vector<double>& i) {
  if (t.size() != i.size()) throw InvalidSeries("time and current series differ in length");
  if (t.size() < 2) throw InvalidSeries("capacity integration needs at least 2 samples");
  std::vector<double> q(t.size(), 0.0);
  for (size_t k = 1; k < t.size(); ++k) {
    double dt = t[k] - t[k - 1];
    if (!(dt > 0.0)) throw InvalidSeries("timestamps must be strictly increasing");
    q[k] = q[k - 1] + 0.5 * (std::fabs(i[k - 1]) + std::fabs(i[k])) * (dt / 3600.0);
  }
  return q;
}

inline std::vector<double> coulomb_count(const std::vector<RawSample>& s) {
  std::vector<double> t(s.size()), i(s.size());
  for (size_t k = 0; k < s.size(); ++k) {
    t[k] = s[k].t;
    i[k] = s[k].i;
  }
  return coulomb_count(t, i);
}

// Charge segment: the maximal contiguous run of i >= 0 samples containing the
// first positive-current sample. Discharge: the maximal i <= 0 run containing
// the first negative sample after the charge run. A zero-current sample on the
// boundary belongs to both runs (rest samples attach to the phase they
// border), matching the [+1,+1,0,-1,-1] -> 3/3 segmentation rule.
inline std::pair<std::vector<RawSample>, std::vector<RawSample>> segment_cycle(
    const RawCycle& raw) {
  const auto& s = raw.samples;
  if (s.size() < 2) throw InvalidSeries("cycle needs at least 2 samples");
  for (size_t k = 1; k < s.size(); ++k)
    if (!(s[k].t > s[k - 1].t))
      throw InvalidSeries("cycle timestamps must be strictly increasing");

  size_t first_pos = s.size();
  for (size_t k = 0; k < s.size(); ++k)
    if (s[k].i > 0.0) {
      first_pos = k;
      break;
    }
  if (first_pos == s.size()) throw IncompleteCycle("cycle has no charge (positive) current");

  size_t c_lo = first_pos, c_hi = first_pos;
  while (c_lo > 0 && s[c_lo - 1].i >= 0.0) --c_lo;
  while (c_hi + 1 < s.size() && s[c_hi + 1].i >= 0.0) ++c_hi;

  size_t first_neg = s.size();
  for (size_t k = c_hi + 1; k < s.size(); ++k)
    if (s[k].i < 0.0) {
      first_neg = k;
      break;
    }
  if (first_neg == s.size())
    throw IncompleteCycle("cycle has no discharge (negative) current after charge");

  size_t d_lo = first_neg, d_hi = first_neg;
  while (d_lo > 0 && s[d_lo - 1].i <= 0.0) --d_lo;
  while (d_hi + 1 < s.size() && s[d_hi + 1].i <= 0.0) ++d_hi;

  std::vector<RawSample> charge(s.begin() + static_cast<long>(c_lo),
                                s.begin() + static_cast<long>(c_hi) + 1);
  std::vector<RawSample> discharge(s.begin() + static_cast<long>(d_lo),
                                   s.begin() + static_cast<long>(d_hi) + 1);
  return {std::move(charge), std::move(discharge)};
}

namespace detail {

// Linear interpolation of y over x (strictly increasing) at query point xq,
// clamped to the endpoints.
inline double interp1(const std::vector<double>& x, const std::vector<double>& y, double xq) {
  if (xq <= x.front()) return y.front();
  if (xq >= x.back()) return y.back();
  size_t hi = static_cast<size_t>(std::upper_bound(x.begin(), x.end(), xq) - x.begin());
  size_t lo = hi - 1;
  double w = (xq - x[lo]) / (x[hi] - x[lo]);
  return y[lo] + w * (y[hi] - y[lo]);
}

struct PhaseColumns {
  std::vector<double> t, v, i, q;
};

inline PhaseColumns phase_columns(const std::vector<RawSample>& seg) {
  PhaseColumns c;
  c.t.reserve(seg.size());
  c.v.reserve(seg.size());
  c.i.reserve(seg.size());
  for (const RawSample& s : seg) {
    c.t.push_back(s.t);
    c.v.push_back(s.v);
    c.i.push_back(s.i);
  }
  c.q = seg.size() >= 2 ? coulomb_count(c.t, c.i) : std::vector<double>(seg.size(), 0.0);
  return c;
}

}  // namespace detail

inline ResampledCycle resample_cycle(const std::vector<RawSample>& charge,
                                     const std::vector<RawSample>& discharge,
                                     double nominal_capacity_ah) {
  if (!(nominal_capacity_ah > 0.0))
    throw InvalidCapacity("nominal capacity must be positive amp-hours");
  if (charge.empty() || discharge.empty())
    throw IncompleteCycle("both charge and discharge segments are required");

  ResampledCycle out;
  const std::vector<RawSample>* segs[2] = {&charge, &discharge};
  for (int p = 0; p < 2; ++p) {
    detail::PhaseColumns c = detail::phase_columns(*segs[p]);
    double t0 = c.t.front(), t1 = c.t.back();
    for (int j = 0; j < kPointsPerPhase; ++j) {
      double tq = c.t.size() == 1
                      ? t0
                      : t0 + (t1 - t0) * (static_cast<double>(j) / (kPointsPerPhase - 1));
      int row = p * kPointsPerPhase + j;
      out.at(row, 0) = detail::interp1(c.t, c.v, tq);
      out.at(row, 1) = detail::interp1(c.t, c.i, tq) / nominal_capacity_ah;
      out.at(row, 2) = detail::interp1(c.t, c.q, tq);
    }
  }
  return out;
}

// Final capacity moved during the discharge phase of one raw cycle.
inline double discharge_capacity(const RawCycle& raw) {
  auto [charge, discharge] = segment_cycle(raw);
  if (discharge.size() < 2) return 0.0;
  return coulomb_count(discharge).back();
}

// First cycle whose discharge capacity falls to threshold * nominal, with no
// smoothing; index is 1-based.
inline LifeLabel compute_life_label(const std::vector<double>& discharge_capacity_per_cycle,
                                    double nominal_capacity_ah, double threshold_fraction) {
  if (discharge_capacity_per_cycle.empty())
    throw InvalidSeries("capacity series is empty");
  double thr = threshold_fraction * nominal_capacity_ah;
  for (size_t k = 0; k < discharge_capacity_per_cycle.size(); ++k) {
    if (discharge_capacity_per_cycle[k] <= thr)
      return LifeLabel{static_cast<int>(k) + 1, threshold_fraction};
  }
  throw NotDegraded("no cycle reaches the capacity threshold");
}

// Deterministic 6:2:2 split: the shuffled list is consumed in order, train
// takes the first floor(0.6 n), val the next floor(0.2 n), test the tail
// (so 11 cells split 6/2/3).
inline DatasetSplit split_dataset(std::vector<std::string> cell_ids, uint64_t seed) {
  size_t n = cell_ids.size();
  if (n < 5) throw TooFewCells("dataset split needs at least 5 cells");
  Rng rng(seed);
  deterministic_shuffle(cell_ids, rng);
  size_t n_train = n * 6 / 10;
  size_t n_val = n * 2 / 10;
  DatasetSplit sp;
  sp.seed = seed;
  sp.train.assign(cell_ids.begin(), cell_ids.begin() + static_cast<long>(n_train));
  sp.val.assign(cell_ids.begin() + static_cast<long>(n_train),
                cell_ids.begin() + static_cast<long>(n_train + n_val));
  sp.test.assign(cell_ids.begin() + static_cast<long>(n_train + n_val), cell_ids.end());
  return sp;
}

inline CellSample truncate_to_first_n(const CellSample& cell, int n) {
  int avail = static_cast<int>(cell.cycles.size());
  if (n < 1 || n > std::min(kMaxCycles, avail))
    throw InvalidN("N must be in [1, min(100, available cycles)], got " + std::to_string(n));
  CellSample out = cell;
  out.cycles.resize(static_cast<size_t>(n));
  return out;
}

// Full per-cell pipeline: label from the complete capacity series, model
// input from the first <= 100 cycles.
inline CellSample preprocess_cell(const RawCellRecord& rec, double threshold_fraction = 0.8) {
  if (rec.cycles.empty()) throw InvalidSeries("cell '" + rec.cell_id + "' has no cycles");
  if (!(rec.nominal_capacity_ah > 0.0))
    throw InvalidCapacity("cell '" + rec.cell_id + "' nominal capacity must be positive");

  std::vector<double> caps;
  caps.reserve(rec.cycles.size());
  for (const RawCycle& c : rec.cycles) caps.push_back(discharge_capacity(c));
  LifeLabel label = compute_life_label(caps, rec.nominal_capacity_ah, threshold_fraction);

  CellSample out;
  out.cell_id = rec.cell_id;
  out.dataset_name = rec.dataset_name;
  out.nominal_capacity_ah = rec.nominal_capacity_ah;
  out.condition = rec.condition;
  out.label = label;
  int s = std::min<int>(kMaxCycles, static_cast<int>(rec.cycles.size()));
  out.cycles.reserve(static_cast<size_t>(s));
  for (int k = 0; k < s; ++k) {
    auto [charge, discharge] = segment_cycle(rec.cycles[static_cast<size_t>(k)]);
    out.cycles.push_back(resample_cycle(charge, discharge, rec.nominal_capacity_ah));
  }
  return out;
}

}  // namespace pbt
