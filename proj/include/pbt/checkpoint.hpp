#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbt/bytes.hpp"
#include "pbt/model.hpp"

namespace pbt {

using ordered_json = nlohmann::ordered_json;

// FNV-1a over the raw bytes of the doubles; used to prove tensors untouched.
inline uint64_t tensor_fingerprint(const Mat& m) {
  uint64_t h = kFnvOffset;
  for (double d : m.a) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &d, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= kFnvPrime;
    }
  }
  return h;
}

// Combined fingerprint of every non-adapter tensor, order-sensitive.
inline uint64_t base_fingerprint(const ModelState& m) {
  uint64_t h = kFnvOffset;
  visit_params(const_cast<ModelState&>(m), [&](const std::string& name, Mat& t) {
    if (is_adapter_param(name)) return;
    uint64_t fp = tensor_fingerprint(t);
    for (int i = 0; i < 8; ++i) {
      h ^= (fp >> (8 * i)) & 0xff;
      h *= kFnvPrime;
    }
  });
  return h;
}

inline ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["d"] = c.d;
  j["d_ff"] = c.d_ff;
  j["l1"] = c.l1;
  j["l2"] = c.l2;
  j["heads"] = c.heads;
  j["dropout"] = c.dropout;
  j["k_g"] = c.k_g;
  j["d_embed"] = c.d_embed;
  j["max_cycles"] = c.max_cycles;
  j["label_transform"] = label_transform_name(c.label_transform);
  return j;
}

inline ModelConfig config_from_json(const ordered_json& j) {
  ModelConfig c;
  c.d = j.at("d").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.l1 = j.at("l1").get<int>();
  c.l2 = j.at("l2").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.k_g = j.at("k_g").get<int>();
  c.d_embed = j.at("d_embed").get<int>();
  c.max_cycles = j.at("max_cycles").get<int>();
  c.label_transform = label_transform_from_name(j.at("label_transform").get<std::string>());
  validate_config(c);
  return c;
}

inline ordered_json registry_to_json(const ExpertRegistry& reg) {
  ordered_json j;
  j["general_count"] = reg.general_count;
  ordered_json spec = ordered_json::array();
  for (size_t i = 0; i < reg.specialized.size(); ++i) {
    const RoutingTag& t = reg.specialized[i];
    ordered_json e;
    e["kind"] = tag_kind_name(t.kind);
    e["value"] = t.value;
    e["expert_index"] = static_cast<int>(i);
    spec.push_back(e);
  }
  j["specialized"] = spec;
  return j;
}

inline ExpertRegistry registry_from_json(const ordered_json& j) {
  ExpertRegistry reg;
  reg.general_count = j.at("general_count").get<int>();
  const ordered_json& spec = j.at("specialized");
  reg.specialized.resize(spec.size());
  for (const ordered_json& e : spec) {
    RoutingTag t;
    t.kind = tag_kind_from_name(e.at("kind").get<std::string>());
    t.value = e.at("value").get<std::string>();
    if (t.kind == TagKind::temperature) t.center_c = std::stod(t.value);
    int idx = e.at("expert_index").get<int>();
    if (idx < 0 || static_cast<size_t>(idx) >= reg.specialized.size())
      throw IoError("registry expert_index out of range");
    reg.specialized[static_cast<size_t>(idx)] = t;
  }
  return reg;
}

namespace detail {

// Serializes the chosen tensors (filtered by `keep`) into manifest + blob.
template <typename Keep>
void pack_tensors(const ModelState& m, Keep&& keep, ordered_json& index, std::string& blob) {
  index = ordered_json::array();
  visit_params(const_cast<ModelState&>(m), [&](const std::string& name, Mat& t) {
    if (!keep(name)) return;
    ordered_json e;
    e["name"] = name;
    e["shape"] = {t.rows, t.cols};
    e["dtype"] = "f32";
    e["file"] = "tensors.bin";
    e["offset"] = blob.size();
    index.push_back(e);
    for (double v : t.a) append_f32_le(blob, v);
  });
}

// Loads tensors named by `index` into the model in place; every indexed name
// must resolve and shapes must agree.
inline void unpack_tensors(ModelState& m, const ordered_json& index, const std::string& blob) {
  std::map<std::string, Mat*> slots;
  visit_params(m, [&](const std::string& name, Mat& t) { slots[name] = &t; });
  for (const ordered_json& e : index) {
    std::string name = e.at("name").get<std::string>();
    auto it = slots.find(name);
    if (it == slots.end()) throw IoError("checkpoint tensor has no slot in model: " + name);
    Mat& t = *it->second;
    int rows = e.at("shape").at(0).get<int>();
    int cols = e.at("shape").at(1).get<int>();
    if (e.at("dtype").get<std::string>() != "f32")
      throw IoError("unsupported tensor dtype for " + name);
    if (rows != t.rows || cols != t.cols)
      throw IoError("checkpoint tensor shape mismatch for " + name);
    size_t offset = e.at("offset").get<size_t>();
    size_t need = offset + 4 * t.size();
    if (need > blob.size()) throw IoError("tensor data out of bounds for " + name);
    const unsigned char* p = reinterpret_cast<const unsigned char*>(blob.data()) + offset;
    for (size_t i = 0; i < t.size(); ++i) t.a[i] = read_f32_le(p + 4 * i);
  }
}

inline ordered_json adapter_meta(const ModelState& m) {
  ordered_json a;
  a["positions"] = m.adapter_positions;
  a["residual"] = m.adapter_residual;
  a["d_a"] = m.adapters.empty() ? 0 : m.adapters.front().down.w.rows;
  return a;
}

inline void apply_adapter_meta(ModelState& m, const ordered_json& a) {
  m.adapter_positions = a.at("positions").get<std::vector<int>>();
  m.adapter_residual = a.at("residual").get<bool>();
  int d_a = a.at("d_a").get<int>();
  m.adapters.clear();
  m.adapters.resize(m.adapter_positions.size());
  for (AdapterParams& ad : m.adapters) {
    ad.ln.gamma = Mat(1, m.config.d);
    ad.ln.beta = Mat(1, m.config.d);
    ad.down.w = Mat(d_a, m.config.d);
    ad.down.b = Mat(1, d_a);
    ad.up.w = Mat(m.config.d, d_a);
    ad.up.b = Mat(1, m.config.d);
  }
}

}  // namespace detail

// Directory layout: manifest.json + tensors.bin (raw little-endian f32 in
// manifest order). Save -> load -> save reproduces both files byte for byte.
inline void save_checkpoint(const ModelState& m, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "pbt-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = config_to_json(m.config);
  manifest["registry"] = registry_to_json(m.registry);
  if (!m.adapters.empty()) manifest["adapters"] = detail::adapter_meta(m);
  manifest["seen_condition_keys"] = m.seen_condition_keys;
  ordered_json index;
  std::string blob;
  detail::pack_tensors(m, [](const std::string&) { return true; }, index, blob);
  manifest["tensors"] = index;
  detail::write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  detail::write_file(fs::path(dir) / "tensors.bin", blob);
}

inline ModelState load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::string text = detail::read_file(fs::path(dir) / "manifest.json");
  ordered_json manifest = ordered_json::parse(text, nullptr, false);
  if (manifest.is_discarded()) throw IoError("manifest.json is not valid JSON: " + dir);
  if (manifest.value("format", "") != "pbt-checkpoint")
    throw IoError("not a model checkpoint: " + dir);
  ModelConfig config = config_from_json(manifest.at("config"));
  ExpertRegistry registry = registry_from_json(manifest.at("registry"));
  ModelState m = init_model(config, registry, /*seed=*/0);
  if (manifest.contains("adapters")) detail::apply_adapter_meta(m, manifest.at("adapters"));
  m.seen_condition_keys = manifest.value("seen_condition_keys", std::vector<std::string>{});
  std::string blob = detail::read_file(fs::path(dir) / "tensors.bin");
  detail::unpack_tensors(m, manifest.at("tensors"), blob);
  return m;
}

// Adapter-only checkpoint: records a reference to the base checkpoint plus
// just the adapter tensors, so one pretrained base serves many adaptations.
inline void save_adapter_checkpoint(const ModelState& m, const std::string& dir,
                                    const std::string& base_checkpoint) {
  namespace fs = std::filesystem;
  if (m.adapters.empty()) throw InvalidConfig("model has no adapters to save");
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = "pbt-adapter";
  manifest["version"] = 1;
  manifest["base_checkpoint"] = base_checkpoint;
  manifest["adapters"] = detail::adapter_meta(m);
  manifest["seen_condition_keys"] = m.seen_condition_keys;
  ordered_json index;
  std::string blob;
  detail::pack_tensors(m, [](const std::string& n) { return is_adapter_param(n); }, index, blob);
  manifest["tensors"] = index;
  detail::write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
  detail::write_file(fs::path(dir) / "tensors.bin", blob);
}

// Loads base + adapters. `base_override` replaces the recorded base path when
// non-empty (relative references resolve against the adapter directory).
inline ModelState load_adapter_checkpoint(const std::string& dir,
                                          const std::string& base_override = "") {
  namespace fs = std::filesystem;
  std::string text = detail::read_file(fs::path(dir) / "manifest.json");
  ordered_json manifest = ordered_json::parse(text, nullptr, false);
  if (manifest.is_discarded()) throw IoError("manifest.json is not valid JSON: " + dir);
  if (manifest.value("format", "") != "pbt-adapter")
    throw IoError("not an adapter checkpoint: " + dir);
  std::string base = base_override;
  if (base.empty()) {
    base = manifest.at("base_checkpoint").get<std::string>();
    fs::path p(base);
    if (p.is_relative()) base = (fs::path(dir) / p).string();
  }
  ModelState m = load_checkpoint(base);
  detail::apply_adapter_meta(m, manifest.at("adapters"));
  if (manifest.contains("seen_condition_keys"))
    m.seen_condition_keys = manifest.at("seen_condition_keys").get<std::vector<std::string>>();
  std::string blob = detail::read_file(fs::path(dir) / "tensors.bin");
  detail::unpack_tensors(m, manifest.at("tensors"), blob);
  return m;
}

}  // namespace pbt
