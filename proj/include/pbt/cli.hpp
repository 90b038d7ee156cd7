#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbt/cell_io.hpp"
#include "pbt/checkpoint.hpp"
#include "pbt/cycledata.hpp"
#include "pbt/embed_service.hpp"
#include "pbt/errors.hpp"
#include "pbt/model.hpp"
#include "pbt/synthetic.hpp"
#include "pbt/train.hpp"
#include "pbt/transfer.hpp"

namespace pbt {

// Exit-code contract: 0 success, 2 input error, 3 routing/config error,
// 4 numeric failure.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NonFiniteGradient*>(&e)) return 4;
  if (dynamic_cast<const UnknownCategory*>(&e)) return 3;
  if (dynamic_cast<const InvalidConfig*>(&e)) return 3;
  return 2;
}

struct EmbedderSpec {
  std::string kind = "hash";  // "hash" or "remote"
  std::string host = "127.0.0.1";
  int port = 0;
  double timeout_s = 5.0;
};

inline EmbedFn make_embedder(const EmbedderSpec& spec, int d_embed) {
  if (spec.kind == "hash") return hash_embedder(d_embed);
  if (spec.kind == "remote") {
    if (spec.port <= 0) throw InvalidConfig("remote embedder requires a positive port");
    EmbedEndpoint ep;
    ep.host = spec.host;
    ep.port = spec.port;
    ep.timeout_s = spec.timeout_s;
    return remote_embedder(ep, d_embed);
  }
  throw InvalidConfig("embedder kind must be 'hash' or 'remote', got '" + spec.kind + "'");
}

// One JSON document with per-module sections; unknown keys are rejected and
// every range is validated at load time. Flags override these values.
struct RunConfig {
  uint64_t seed = 0;
  SynthConfig synth;
  ModelConfig model;
  TrainConfig train;
  TransferConfig transfer;
  EmbedderSpec embedder;
};

namespace detail {

inline void check_keys(const ordered_json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* a : allowed)
      if (item.key() == a) {
        known = true;
        break;
      }
    if (!known)
      throw InvalidConfig("config section '" + section + "' has unknown key '" + item.key() +
                          "'");
  }
}

template <typename T>
T cfg_get(const ordered_json& j, const std::string& name) {
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidConfig("config key '" + name + "' has the wrong type");
  }
}

template <typename T>
void cfg_opt(const ordered_json& j, const char* key, const std::string& section, T& dst) {
  if (j.contains(key)) dst = cfg_get<T>(j.at(key), section + "." + key);
}

}  // namespace detail

inline RunConfig parse_run_config(const ordered_json& j, const std::string& file) {
  if (!j.is_object()) throw InvalidConfig(file + ": config root must be a JSON object");
  detail::check_keys(j, "$", {"seed", "synth", "model", "train", "transfer", "embedder"});
  RunConfig rc;
  detail::cfg_opt(j, "seed", "$", rc.seed);
  if (j.contains("synth")) {
    const ordered_json& s = j.at("synth");
    detail::check_keys(s, "synth",
                       {"n_cells", "l_min", "l_max", "beta", "dataset_name", "cathodes", "anodes",
                        "formats", "electrolytes", "manufacturers", "temperatures_c",
                        "charge_c_rates", "capacities_ah"});
    detail::cfg_opt(s, "n_cells", "synth", rc.synth.n_cells);
    detail::cfg_opt(s, "l_min", "synth", rc.synth.l_min);
    detail::cfg_opt(s, "l_max", "synth", rc.synth.l_max);
    detail::cfg_opt(s, "beta", "synth", rc.synth.beta);
    detail::cfg_opt(s, "dataset_name", "synth", rc.synth.dataset_name);
    detail::cfg_opt(s, "cathodes", "synth", rc.synth.cathodes);
    detail::cfg_opt(s, "anodes", "synth", rc.synth.anodes);
    detail::cfg_opt(s, "formats", "synth", rc.synth.formats);
    detail::cfg_opt(s, "electrolytes", "synth", rc.synth.electrolytes);
    detail::cfg_opt(s, "manufacturers", "synth", rc.synth.manufacturers);
    detail::cfg_opt(s, "temperatures_c", "synth", rc.synth.temperatures_c);
    detail::cfg_opt(s, "charge_c_rates", "synth", rc.synth.charge_c_rates);
    detail::cfg_opt(s, "capacities_ah", "synth", rc.synth.capacities_ah);
    validate_synth_config(rc.synth);
  }
  if (j.contains("model")) {
    const ordered_json& m = j.at("model");
    detail::check_keys(
        m, "model", {"d", "d_ff", "l1", "l2", "heads", "dropout", "k_g", "d_embed",
                     "label_transform"});
    detail::cfg_opt(m, "d", "model", rc.model.d);
    detail::cfg_opt(m, "d_ff", "model", rc.model.d_ff);
    detail::cfg_opt(m, "l1", "model", rc.model.l1);
    detail::cfg_opt(m, "l2", "model", rc.model.l2);
    detail::cfg_opt(m, "heads", "model", rc.model.heads);
    detail::cfg_opt(m, "dropout", "model", rc.model.dropout);
    detail::cfg_opt(m, "k_g", "model", rc.model.k_g);
    detail::cfg_opt(m, "d_embed", "model", rc.model.d_embed);
    if (m.contains("label_transform"))
      rc.model.label_transform = label_transform_from_name(
          detail::cfg_get<std::string>(m.at("label_transform"), "model.label_transform"));
    validate_config(rc.model);
  }
  if (j.contains("train")) {
    const ordered_json& t = j.at("train");
    detail::check_keys(t, "train",
                       {"learning_rate", "batch_size", "weight_decay", "beta1", "beta2",
                        "epsilon", "max_epochs", "eval_every"});
    detail::cfg_opt(t, "learning_rate", "train", rc.train.learning_rate);
    detail::cfg_opt(t, "batch_size", "train", rc.train.batch_size);
    detail::cfg_opt(t, "weight_decay", "train", rc.train.weight_decay);
    detail::cfg_opt(t, "beta1", "train", rc.train.beta1);
    detail::cfg_opt(t, "beta2", "train", rc.train.beta2);
    detail::cfg_opt(t, "epsilon", "train", rc.train.epsilon);
    detail::cfg_opt(t, "max_epochs", "train", rc.train.max_epochs);
    detail::cfg_opt(t, "eval_every", "train", rc.train.eval_every);
    validate_train_config(rc.train);
  }
  if (j.contains("transfer")) {
    const ordered_json& t = j.at("transfer");
    detail::check_keys(t, "transfer",
                       {"mode", "n_adapt", "d_a", "learning_rate", "batch_size", "weight_decay",
                        "dropout", "residual_adapter", "max_epochs", "eval_every"});
    if (t.contains("mode"))
      rc.transfer.mode = transfer_mode_from_name(
          detail::cfg_get<std::string>(t.at("mode"), "transfer.mode"));
    detail::cfg_opt(t, "n_adapt", "transfer", rc.transfer.n_adapt);
    detail::cfg_opt(t, "d_a", "transfer", rc.transfer.d_a);
    detail::cfg_opt(t, "learning_rate", "transfer", rc.transfer.learning_rate);
    detail::cfg_opt(t, "batch_size", "transfer", rc.transfer.batch_size);
    detail::cfg_opt(t, "weight_decay", "transfer", rc.transfer.weight_decay);
    detail::cfg_opt(t, "dropout", "transfer", rc.transfer.dropout);
    detail::cfg_opt(t, "residual_adapter", "transfer", rc.transfer.residual_adapter);
    detail::cfg_opt(t, "max_epochs", "transfer", rc.transfer.max_epochs);
    detail::cfg_opt(t, "eval_every", "transfer", rc.transfer.eval_every);
    validate_transfer_config(rc.transfer);
  }
  if (j.contains("embedder")) {
    const ordered_json& e = j.at("embedder");
    detail::check_keys(e, "embedder", {"kind", "host", "port", "timeout_s"});
    detail::cfg_opt(e, "kind", "embedder", rc.embedder.kind);
    detail::cfg_opt(e, "host", "embedder", rc.embedder.host);
    detail::cfg_opt(e, "port", "embedder", rc.embedder.port);
    detail::cfg_opt(e, "timeout_s", "embedder", rc.embedder.timeout_s);
    if (rc.embedder.kind != "hash" && rc.embedder.kind != "remote")
      throw InvalidConfig("embedder kind must be 'hash' or 'remote', got '" + rc.embedder.kind +
                          "'");
  }
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  ordered_json j = ordered_json::parse(detail::read_file(path), nullptr, false);
  if (j.is_discarded()) throw InvalidConfig(path + ": config is not valid JSON");
  return parse_run_config(j, path);
}

inline std::vector<int> parse_cycles_list(const std::string& text) {
  std::vector<int> out;
  size_t at = 0;
  while (at <= text.size()) {
    size_t comma = text.find(',', at);
    std::string part = text.substr(at, comma == std::string::npos ? std::string::npos
                                                                  : comma - at);
    size_t used = 0;
    int n = 0;
    try {
      n = std::stoi(part, &used);
    } catch (...) {
      throw InvalidConfig("cycles list must be comma-separated integers, got '" + text + "'");
    }
    if (used != part.size() || n < 1 || n > kMaxCycles)
      throw InvalidConfig("cycles entries must be integers in [1, 100], got '" + part + "'");
    out.push_back(n);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  if (out.empty()) throw InvalidConfig("cycles list is empty");
  return out;
}

namespace detail {

struct SplitCells {
  std::vector<CellSample> train, val, test;
};

inline SplitCells split_cells(const std::vector<CellSample>& cells, uint64_t seed) {
  std::vector<std::string> ids;
  ids.reserve(cells.size());
  std::map<std::string, const CellSample*> by_id;
  for (const CellSample& c : cells) {
    if (!by_id.emplace(c.cell_id, &c).second)
      throw IoError("duplicate cell_id in dataset: " + c.cell_id);
    ids.push_back(c.cell_id);
  }
  DatasetSplit sp = split_dataset(ids, seed);
  SplitCells out;
  for (const std::string& id : sp.train) out.train.push_back(*by_id.at(id));
  for (const std::string& id : sp.val) out.val.push_back(*by_id.at(id));
  for (const std::string& id : sp.test) out.test.push_back(*by_id.at(id));
  return out;
}

inline std::vector<CellTensor> to_tensors(const std::vector<CellSample>& cells,
                                          const ExpertRegistry& reg, const EmbedFn& embed) {
  std::vector<CellTensor> out;
  out.reserve(cells.size());
  for (const CellSample& c : cells) out.push_back(make_cell_tensor(c, reg, embed));
  return out;
}

inline std::vector<std::string> sorted_unique_keys(const std::vector<CellSample>& a,
                                                   const std::vector<CellSample>& b) {
  std::set<std::string> keys;
  for (const CellSample& c : a) keys.insert(condition_key(c.condition));
  for (const CellSample& c : b) keys.insert(condition_key(c.condition));
  return {keys.begin(), keys.end()};
}

inline ModelState load_any_checkpoint(const std::string& dir, const std::string& base_override) {
  namespace fs = std::filesystem;
  ordered_json manifest =
      ordered_json::parse(read_file(fs::path(dir) / "manifest.json"), nullptr, false);
  if (manifest.is_discarded()) throw IoError(dir + "/manifest.json is not valid JSON");
  std::string format = manifest.value("format", "");
  if (format == "pbt-checkpoint") return load_checkpoint(dir);
  if (format == "pbt-adapter") return load_adapter_checkpoint(dir, base_override);
  throw IoError(dir + " is neither a model nor an adapter checkpoint");
}

}  // namespace detail

// Writes one unified cell JSON file per generated cell.
inline int cmd_synth(const RunConfig& rc, const std::string& out_dir, std::ostream& out,
                     std::ostream& err) {
  try {
    namespace fs = std::filesystem;
    std::vector<RawCellRecord> cells = generate_synthetic(rc.synth, rc.seed);
    fs::create_directories(out_dir);
    for (const RawCellRecord& rec : cells)
      save_cell_file(rec, (fs::path(out_dir) / (rec.cell_id + ".json")).string());
    out << cells.size() << " cells written to " << out_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Segments, integrates, resamples, and labels every cell JSON in in_dir.
// Cells that never cross the threshold are excluded with a warning.
inline int cmd_preprocess(const std::string& in_dir, const std::string& out_dir, std::ostream& out,
                          std::ostream& err) {
  try {
    std::vector<RawCellRecord> recs = load_cell_dir(in_dir);
    std::vector<CellSample> samples;
    for (const RawCellRecord& rec : recs) {
      try {
        CellSample s = preprocess_cell(rec);
        out << rec.cell_id << ": cycles=" << s.cycles.size()
            << " label=" << s.label.cycles_to_threshold << "\n";
        samples.push_back(std::move(s));
      } catch (const NotDegraded&) {
        err << "warning: " << rec.cell_id << " never reaches the capacity threshold; excluded\n";
      }
    }
    write_resampled_dataset(samples, out_dir);
    out << samples.size() << " cells written to " << out_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Pretraining: split, build the registry from training cells only, train,
// save the best checkpoint (manifest.json + tensors.bin) plus a JSONL log.
inline int cmd_pretrain(const RunConfig& rc, const std::string& data_dir,
                        const std::string& out_dir, std::ostream& out, std::ostream& err) {
  try {
    namespace fs = std::filesystem;
    std::vector<CellSample> cells = read_resampled_dataset(data_dir);
    detail::SplitCells sp = detail::split_cells(cells, rc.seed);

    std::vector<AgingCondition> train_conds;
    for (const CellSample& c : sp.train) train_conds.push_back(c.condition);
    ExpertRegistry registry = build_registry(train_conds, rc.model.k_g);
    ModelState model = init_model(rc.model, registry, rc.seed);
    model.seen_condition_keys = detail::sorted_unique_keys(sp.train, sp.val);

    EmbedFn embed = make_embedder(rc.embedder, rc.model.d_embed);
    std::vector<CellTensor> train_ct = detail::to_tensors(sp.train, registry, embed);
    std::vector<CellTensor> val_ct = detail::to_tensors(sp.val, registry, embed);

    fs::create_directories(out_dir);
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    tc.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    fs::remove(tc.log_path);

    TrainResult res = train_loop(model, train_ct, val_ct, tc);
    save_checkpoint(res.model, out_dir);
    out << "steps: " << res.steps_run << "\n";
    if (!std::isnan(res.best_val_mape)) out << "best_val_mape: " << res.best_val_mape << "\n";
    if (res.aborted) err << "warning: non-finite loss; stopped early, best checkpoint kept\n";
    out << "checkpoint: " << out_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Transfer: extends the registry for unseen category values, then fine-tunes
// everything or trains adapters only. Adapter runs save an adapter checkpoint
// (base reference + adapter tensors); if the registry grew, the extended base
// is saved alongside and referenced instead.
inline int cmd_transfer(const RunConfig& rc, const std::string& base_ckpt,
                        const std::string& data_dir, const std::string& out_dir,
                        std::ostream& out, std::ostream& err) {
  try {
    namespace fs = std::filesystem;
    ModelState base = load_checkpoint(base_ckpt);
    std::vector<CellSample> cells = read_resampled_dataset(data_dir);
    detail::SplitCells sp = detail::split_cells(cells, rc.seed);

    std::vector<AgingCondition> train_conds;
    for (const CellSample& c : sp.train) train_conds.push_back(c.condition);
    int added = extend_registry(base, train_conds);
    if (added > 0) out << "registry extended with " << added << " experts\n";
    std::vector<std::string> target_keys = detail::sorted_unique_keys(sp.train, sp.val);
    std::set<std::string> seen(base.seen_condition_keys.begin(), base.seen_condition_keys.end());
    seen.insert(target_keys.begin(), target_keys.end());
    base.seen_condition_keys.assign(seen.begin(), seen.end());

    EmbedFn embed = make_embedder(rc.embedder, base.config.d_embed);
    std::vector<CellTensor> train_ct = detail::to_tensors(sp.train, base.registry, embed);
    std::vector<CellTensor> val_ct = detail::to_tensors(sp.val, base.registry, embed);

    fs::create_directories(out_dir);
    TransferConfig cfg = rc.transfer;
    cfg.seed = rc.seed;
    cfg.log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    fs::remove(cfg.log_path);

    if (cfg.mode == TransferMode::fine_tune) {
      TrainResult res = fine_tune(base, train_ct, val_ct, cfg);
      save_checkpoint(res.model, out_dir);
      out << "steps: " << res.steps_run << "\n";
      if (!std::isnan(res.best_val_mape)) out << "best_val_mape: " << res.best_val_mape << "\n";
      out << "checkpoint: " << out_dir << "\n";
    } else {
      TrainResult res = adapter_tune(base, train_ct, val_ct, cfg);
      std::string adapter_dir = (fs::path(out_dir) / "adapter").string();
      std::string base_ref;
      if (added > 0) {
        ModelState frozen = res.model;
        frozen.adapters.clear();
        frozen.adapter_positions.clear();
        frozen.adapter_residual = false;
        save_checkpoint(frozen, (fs::path(out_dir) / "base_extended").string());
        base_ref = "../base_extended";
      } else {
        base_ref = fs::absolute(base_ckpt).string();
      }
      save_adapter_checkpoint(res.model, adapter_dir, base_ref);
      out << "steps: " << res.steps_run << "\n";
      if (!std::isnan(res.best_val_mape)) out << "best_val_mape: " << res.best_val_mape << "\n";
      out << "checkpoint: " << adapter_dir << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Evaluation: MAPE overall, per dataset, seen/unseen by the checkpoint's
// recorded condition keys, and per requested first-N cycle budget.
inline int cmd_eval(const RunConfig& rc, const std::string& ckpt, const std::string& data_dir,
                    const std::vector<int>& cycles, const std::string& out_path,
                    const std::string& base_override, std::ostream& out, std::ostream& err) {
  try {
    ModelState m = detail::load_any_checkpoint(ckpt, base_override);
    std::vector<CellSample> cells = read_resampled_dataset(data_dir);
    EmbedFn embed = make_embedder(rc.embedder, m.config.d_embed);
    std::vector<CellTensor> ct = detail::to_tensors(cells, m.registry, embed);
    std::set<std::string> seen(m.seen_condition_keys.begin(), m.seen_condition_keys.end());
    EvalReport rep = evaluate(m, ct, seen, cycles);
    ordered_json j = eval_report_to_json(rep);
    out << j.dump(2) << "\n";
    if (!out_path.empty()) detail::write_file(out_path, j.dump(2) + "\n");
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Renders the prompt for a condition file and emits its embedding as JSON.
// The file holds either a bare condition object or {"condition", ...,
// "threshold_fraction": ...}.
inline int cmd_embed(const RunConfig& rc, const std::string& condition_file,
                     const std::string& out_path, std::ostream& out, std::ostream& err) {
  try {
    ordered_json j = ordered_json::parse(detail::read_file(condition_file), nullptr, false);
    if (j.is_discarded()) throw IoError(condition_file + ": $ is not valid JSON");
    double threshold = 0.8;
    ordered_json cj = j;
    if (j.is_object() && j.contains("condition")) {
      cj = j.at("condition");
      if (j.contains("threshold_fraction"))
        threshold = detail::io_num(j.at("threshold_fraction"), condition_file,
                                   "$.threshold_fraction");
    }
    AgingCondition cond = condition_from_json(cj, condition_file, "$");
    validate_condition(cond);
    std::string prompt = render_prompt(cond, threshold);
    Mat e = make_embedder(rc.embedder, rc.model.d_embed)(prompt);
    ordered_json rep;
    rep["dim"] = e.cols;
    rep["prompt"] = prompt;
    ordered_json vec = ordered_json::array();
    for (int c = 0; c < e.cols; ++c) vec.push_back(e(0, c));
    rep["embedding"] = vec;
    out << rep.dump(2) << "\n";
    if (!out_path.empty()) detail::write_file(out_path, rep.dump(2) + "\n");
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

// Serves the embedding wire protocol until interrupted.
inline int cmd_embed_stub(const RunConfig& rc, int port, std::ostream& out, std::ostream& err) {
  try {
    StubEmbedServer server(rc.model.d_embed);
    int bound = server.start(port);
    out << "listening on 127.0.0.1:" << bound << "\n";
    out.flush();
    server.wait();
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace pbt
