#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbt/aging.hpp"
#include "pbt/bytes.hpp"
#include "pbt/cycledata.hpp"
#include "pbt/errors.hpp"

namespace pbt {

using ordered_json = nlohmann::ordered_json;

namespace detail {

// Input validation helpers that name the file and the JSON path of the
// offending field, so operator errors are directly actionable.
inline void io_require(bool ok, const std::string& file, const std::string& jpath,
                       const std::string& what) {
  if (!ok) throw IoError(file + ": " + jpath + " " + what);
}

inline double io_num(const ordered_json& j, const std::string& file, const std::string& jpath) {
  io_require(j.is_number(), file, jpath, "must be a number");
  double v = j.get<double>();
  io_require(std::isfinite(v), file, jpath, "must be finite");
  return v;
}

inline std::string io_str(const ordered_json& j, const std::string& file,
                          const std::string& jpath) {
  io_require(j.is_string(), file, jpath, "must be a string");
  return j.get<std::string>();
}

}  // namespace detail

inline ordered_json stage_to_json(const ProtocolStage& s) {
  ordered_json j;
  j["c_rate"] = s.c_rate;
  if (s.soc_target_pct) j["soc_target_pct"] = *s.soc_target_pct;
  if (s.cutoff_v) j["cutoff_v"] = *s.cutoff_v;
  return j;
}

inline ProtocolStage stage_from_json(const ordered_json& j, const std::string& file,
                                     const std::string& jpath) {
  detail::io_require(j.is_object(), file, jpath, "must be an object");
  detail::io_require(j.contains("c_rate"), file, jpath + ".c_rate", "is required");
  ProtocolStage s;
  s.c_rate = detail::io_num(j.at("c_rate"), file, jpath + ".c_rate");
  if (j.contains("soc_target_pct") && !j.at("soc_target_pct").is_null())
    s.soc_target_pct = detail::io_num(j.at("soc_target_pct"), file, jpath + ".soc_target_pct");
  if (j.contains("cutoff_v") && !j.at("cutoff_v").is_null())
    s.cutoff_v = detail::io_num(j.at("cutoff_v"), file, jpath + ".cutoff_v");
  return s;
}

inline ordered_json condition_to_json(const AgingCondition& c) {
  ordered_json j;
  j["chemistry_family"] = c.chemistry_family;
  j["format"] = c.format;
  j["cathode"] = c.cathode;
  j["anode"] = c.anode;
  j["electrolyte"] = c.electrolyte;
  j["manufacturer"] = c.manufacturer;
  j["nominal_capacity_ah"] = c.nominal_capacity_ah;
  j["formation_protocol"] = c.formation_protocol;
  j["charge_stages"] = ordered_json::array();
  for (const ProtocolStage& s : c.charge_stages) j["charge_stages"].push_back(stage_to_json(s));
  j["discharge_stages"] = ordered_json::array();
  for (const ProtocolStage& s : c.discharge_stages)
    j["discharge_stages"].push_back(stage_to_json(s));
  j["temperature_c"] = c.temperature_c;
  j["soc_low_pct"] = c.soc_low_pct;
  j["soc_high_pct"] = c.soc_high_pct;
  return j;
}

inline AgingCondition condition_from_json(const ordered_json& j, const std::string& file,
                                          const std::string& jpath) {
  detail::io_require(j.is_object(), file, jpath, "must be an object");
  AgingCondition c;
  auto need = [&](const char* key) -> const ordered_json& {
    detail::io_require(j.contains(key), file, jpath + "." + key, "is required");
    return j.at(key);
  };
  c.chemistry_family = detail::io_str(need("chemistry_family"), file, jpath + ".chemistry_family");
  c.format = detail::io_str(need("format"), file, jpath + ".format");
  c.cathode = detail::io_str(need("cathode"), file, jpath + ".cathode");
  c.anode = detail::io_str(need("anode"), file, jpath + ".anode");
  c.electrolyte = detail::io_str(need("electrolyte"), file, jpath + ".electrolyte");
  c.manufacturer = detail::io_str(need("manufacturer"), file, jpath + ".manufacturer");
  c.nominal_capacity_ah =
      detail::io_num(need("nominal_capacity_ah"), file, jpath + ".nominal_capacity_ah");
  c.formation_protocol =
      detail::io_str(need("formation_protocol"), file, jpath + ".formation_protocol");
  const ordered_json& cs = need("charge_stages");
  detail::io_require(cs.is_array(), file, jpath + ".charge_stages", "must be an array");
  for (size_t i = 0; i < cs.size(); ++i)
    c.charge_stages.push_back(
        stage_from_json(cs[i], file, jpath + ".charge_stages[" + std::to_string(i) + "]"));
  const ordered_json& ds = need("discharge_stages");
  detail::io_require(ds.is_array(), file, jpath + ".discharge_stages", "must be an array");
  for (size_t i = 0; i < ds.size(); ++i)
    c.discharge_stages.push_back(
        stage_from_json(ds[i], file, jpath + ".discharge_stages[" + std::to_string(i) + "]"));
  c.temperature_c = detail::io_num(need("temperature_c"), file, jpath + ".temperature_c");
  c.soc_low_pct = detail::io_num(need("soc_low_pct"), file, jpath + ".soc_low_pct");
  c.soc_high_pct = detail::io_num(need("soc_high_pct"), file, jpath + ".soc_high_pct");
  return c;
}

// One JSON document per cell. Strict JSON keeps NaN/Inf out by grammar; the
// numeric checks above keep them out of writes as well.
inline ordered_json cell_to_json(const RawCellRecord& rec) {
  ordered_json j;
  j["cell_id"] = rec.cell_id;
  j["dataset_name"] = rec.dataset_name;
  j["nominal_capacity_ah"] = rec.nominal_capacity_ah;
  j["condition"] = condition_to_json(rec.condition);
  j["cycles"] = ordered_json::array();
  for (const RawCycle& cyc : rec.cycles) {
    ordered_json samples = ordered_json::array();
    for (const RawSample& s : cyc.samples) {
      if (!std::isfinite(s.t) || !std::isfinite(s.v) || !std::isfinite(s.i))
        throw IoError(rec.cell_id + ": refusing to serialize non-finite sample");
      samples.push_back({s.t, s.v, s.i});
    }
    ordered_json cj;
    cj["samples"] = std::move(samples);
    j["cycles"].push_back(std::move(cj));
  }
  return j;
}

inline RawCellRecord cell_from_json(const ordered_json& j, const std::string& file) {
  detail::io_require(j.is_object(), file, "$", "must be a JSON object");
  RawCellRecord rec;
  auto need = [&](const char* key) -> const ordered_json& {
    detail::io_require(j.contains(key), file, std::string("$.") + key, "is required");
    return j.at(key);
  };
  rec.cell_id = detail::io_str(need("cell_id"), file, "$.cell_id");
  rec.dataset_name = detail::io_str(need("dataset_name"), file, "$.dataset_name");
  rec.nominal_capacity_ah = detail::io_num(need("nominal_capacity_ah"), file,
                                           "$.nominal_capacity_ah");
  rec.condition = condition_from_json(need("condition"), file, "$.condition");
  const ordered_json& cycles = need("cycles");
  detail::io_require(cycles.is_array(), file, "$.cycles", "must be an array");
  for (size_t k = 0; k < cycles.size(); ++k) {
    std::string cpath = "$.cycles[" + std::to_string(k) + "]";
    detail::io_require(cycles[k].is_object(), file, cpath, "must be an object");
    detail::io_require(cycles[k].contains("samples"), file, cpath + ".samples", "is required");
    const ordered_json& samples = cycles[k].at("samples");
    detail::io_require(samples.is_array(), file, cpath + ".samples", "must be an array");
    RawCycle cyc;
    for (size_t s = 0; s < samples.size(); ++s) {
      std::string spath = cpath + ".samples[" + std::to_string(s) + "]";
      detail::io_require(samples[s].is_array() && samples[s].size() == 3, file, spath,
                         "must be [t_s, v_V, i_A]");
      RawSample smp;
      smp.t = detail::io_num(samples[s][0], file, spath + "[0]");
      smp.v = detail::io_num(samples[s][1], file, spath + "[1]");
      smp.i = detail::io_num(samples[s][2], file, spath + "[2]");
      cyc.samples.push_back(smp);
    }
    rec.cycles.push_back(std::move(cyc));
  }
  return rec;
}

inline void save_cell_file(const RawCellRecord& rec, const std::string& path) {
  detail::write_file(path, cell_to_json(rec).dump(2) + "\n");
}

inline RawCellRecord load_cell_file(const std::string& path) {
  std::string text = detail::read_file(path);
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded()) throw IoError(path + ": $ is not valid JSON");
  return cell_from_json(j, path);
}

// All *.json files in a directory, ordered by filename for determinism.
inline std::vector<RawCellRecord> load_cell_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RawCellRecord> cells;
  cells.reserve(files.size());
  for (const fs::path& p : files) cells.push_back(load_cell_file(p.string()));
  return cells;
}

// Resampled dataset directory: manifest.json (per-cell metadata + tensor file
// names), one raw little-endian f32 array of shape [S, 300, 3] per cell, and
// labels.json mapping cell_id to its integer life label.
inline void write_resampled_dataset(const std::vector<CellSample>& cells, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "pbt-resampled";
  manifest["version"] = 1;
  manifest["cells"] = ordered_json::array();
  ordered_json labels;
  for (size_t i = 0; i < cells.size(); ++i) {
    const CellSample& c = cells[i];
    char name[32];
    std::snprintf(name, sizeof(name), "cell_%04zu.f32", i);
    std::string blob;
    for (const ResampledCycle& cyc : c.cycles)
      for (double v : cyc.vals) detail::append_f32_le(blob, v);
    detail::write_file(fs::path(dir) / name, blob);
    ordered_json e;
    e["cell_id"] = c.cell_id;
    e["dataset_name"] = c.dataset_name;
    e["nominal_capacity_ah"] = c.nominal_capacity_ah;
    e["file"] = name;
    e["shape"] = {static_cast<int>(c.cycles.size()), kPointsPerCycle, 3};
    e["label"] = c.label.cycles_to_threshold;
    e["threshold_fraction"] = c.label.threshold_fraction;
    e["condition"] = condition_to_json(c.condition);
    e["condition_key"] = condition_key(c.condition);
    manifest["cells"].push_back(e);
    labels[c.cell_id] = c.label.cycles_to_threshold;
  }
  detail::write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  detail::write_file(fs::path(dir) / "labels.json", labels.dump(2) + "\n");
}

inline std::vector<CellSample> read_resampled_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string mpath = (fs::path(dir) / "manifest.json").string();
  ordered_json manifest = ordered_json::parse(detail::read_file(mpath), nullptr, false);
  if (manifest.is_discarded()) throw IoError(mpath + ": $ is not valid JSON");
  detail::io_require(manifest.value("format", "") == "pbt-resampled", mpath, "$.format",
                     "must be 'pbt-resampled'");
  const ordered_json& list = manifest.at("cells");
  detail::io_require(list.is_array(), mpath, "$.cells", "must be an array");
  std::vector<CellSample> cells;
  for (size_t i = 0; i < list.size(); ++i) {
    const ordered_json& e = list[i];
    std::string jpath = "$.cells[" + std::to_string(i) + "]";
    CellSample c;
    c.cell_id = detail::io_str(e.at("cell_id"), mpath, jpath + ".cell_id");
    c.dataset_name = detail::io_str(e.at("dataset_name"), mpath, jpath + ".dataset_name");
    c.nominal_capacity_ah =
        detail::io_num(e.at("nominal_capacity_ah"), mpath, jpath + ".nominal_capacity_ah");
    c.condition = condition_from_json(e.at("condition"), mpath, jpath + ".condition");
    c.label.cycles_to_threshold = e.at("label").get<int>();
    c.label.threshold_fraction =
        detail::io_num(e.at("threshold_fraction"), mpath, jpath + ".threshold_fraction");
    int s = e.at("shape").at(0).get<int>();
    detail::io_require(e.at("shape").at(1).get<int>() == kPointsPerCycle &&
                           e.at("shape").at(2).get<int>() == 3,
                       mpath, jpath + ".shape", "must be [S, 300, 3]");
    std::string blob = detail::read_file(fs::path(dir) / e.at("file").get<std::string>());
    size_t expect = static_cast<size_t>(s) * kPointsPerCycle * 3 * 4;
    detail::io_require(blob.size() == expect, mpath, jpath + ".file",
                       "tensor byte size does not match shape");
    const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data());
    c.cycles.resize(static_cast<size_t>(s));
    for (int k = 0; k < s; ++k)
      for (int v = 0; v < kPointsPerCycle * 3; ++v)
        c.cycles[static_cast<size_t>(k)].vals[static_cast<size_t>(v)] =
            detail::read_f32_le(p + (static_cast<size_t>(k) * kPointsPerCycle * 3 + v) * 4);
    cells.push_back(std::move(c));
  }
  return cells;
}

}  // namespace pbt
