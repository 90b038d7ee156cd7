#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "pbt/errors.hpp"
#include "pbt/matrix.hpp"
#include "pbt/model.hpp"
#include "pbt/rng.hpp"

namespace pbt {

struct TrainConfig {
  double learning_rate = 2.5e-5;
  int batch_size = 256;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int max_epochs = 10;
  uint64_t seed = 0;
  int eval_every = 50;   // steps between validation evaluations
  std::string log_path;  // JSONL log destination; empty keeps the log in memory only
};

inline void validate_train_config(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0)) throw InvalidConfig("learning_rate must be positive");
  if (c.batch_size < 1) throw InvalidConfig("batch_size must be at least 1");
  if (!(c.weight_decay >= 0.0)) throw InvalidConfig("weight_decay must be non-negative");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw InvalidConfig("betas must be in [0, 1)");
  if (!(c.epsilon > 0.0)) throw InvalidConfig("epsilon must be positive");
  if (c.max_epochs < 1) throw InvalidConfig("max_epochs must be at least 1");
  if (c.eval_every < 1) throw InvalidConfig("eval_every must be at least 1");
}

struct OptimizerState {
  std::map<std::string, Mat> m, v;
  int64_t t = 0;
};

inline double mse_loss(const std::vector<double>& predictions, const std::vector<double>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw EmptyBatch("mse_loss needs matching non-empty prediction/label vectors");
  double acc = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    double d = predictions[i] - labels[i];
    acc += d * d;
  }
  return acc / static_cast<double>(predictions.size());
}

using TrainableFilter = std::function<bool(const std::string&)>;

inline TrainableFilter all_trainable() {
  return [](const std::string&) { return true; };
}

inline TrainableFilter adapters_only() {
  return [](const std::string& name) { return is_adapter_param(name); };
}

// Decoupled-weight-decay AdamW with bias correction. The step is atomic: all
// trainable gradients are checked finite before any parameter moves.
inline void adamw_step(ModelState& model, const std::map<std::string, Mat>& grads,
                       OptimizerState& state, const TrainConfig& cfg,
                       const TrainableFilter& trainable = all_trainable()) {
  visit_params(model, [&](const std::string& name, Mat& p) {
    if (!trainable(name)) return;
    auto it = grads.find(name);
    if (it == grads.end()) return;
    if (!it->second.all_finite()) throw NonFiniteGradient("non-finite gradient in " + name);
    if (it->second.rows != p.rows || it->second.cols != p.cols)
      throw DimensionMismatch("gradient shape mismatch for " + name);
  });

  state.t += 1;
  double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  visit_params(model, [&](const std::string& name, Mat& p) {
    if (!trainable(name)) return;
    auto it = grads.find(name);
    if (it == grads.end()) return;
    const Mat& g = it->second;
    Mat& m = state.m.try_emplace(name, Mat(p.rows, p.cols)).first->second;
    Mat& v = state.v.try_emplace(name, Mat(p.rows, p.cols)).first->second;
    for (size_t i = 0; i < p.size(); ++i) {
      m.a[i] = cfg.beta1 * m.a[i] + (1.0 - cfg.beta1) * g.a[i];
      v.a[i] = cfg.beta2 * v.a[i] + (1.0 - cfg.beta2) * g.a[i] * g.a[i];
      double m_hat = m.a[i] / bc1;
      double v_hat = v.a[i] / bc2;
      p.a[i] -= cfg.learning_rate *
                (m_hat / (std::sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * p.a[i]);
    }
  });
}

struct GradientResult {
  double loss = 0;  // mean MSE over the batch, transformed label space
  std::map<std::string, Mat> grads;
};

// Exact reverse-mode gradients of the batch-mean MSE. Parameters that never
// enter the tape (masked experts, unselected gate rows) come back as exact
// zeros. `dropout_rng` non-null enables training-mode dropout.
inline GradientResult compute_gradients(const ModelState& model,
                                        const std::vector<const CellTensor*>& batch,
                                        Rng* dropout_rng = nullptr) {
  if (batch.empty()) throw EmptyBatch("gradient computation needs a non-empty batch");
  Graph g;
  int acc = -1;
  for (const CellTensor* cell : batch) {
    int yhat = build_forward(g, model, cell->x, cell->e, cell->mask, dropout_rng);
    Mat target(1, 1);
    target(0, 0) = transform_label(cell->label, model.config.label_transform);
    int diff = g.sub(yhat, g.input(target));
    int sq = g.mul_elem(diff, diff);
    acc = acc < 0 ? sq : g.add(acc, sq);
  }
  int loss = g.scale(acc, 1.0 / static_cast<double>(batch.size()));
  g.backward(loss);

  GradientResult out;
  out.loss = g.val(loss)(0, 0);
  visit_params(const_cast<ModelState&>(model), [&](const std::string& name, Mat& p) {
    out.grads.emplace(name, g.has_param(p) ? g.grad_of(p) : Mat(p.rows, p.cols));
  });
  return out;
}

inline double mape(const std::vector<double>& predictions, const std::vector<double>& labels) {
  if (predictions.empty() || predictions.size() != labels.size())
    throw EmptyBatch("mape needs matching non-empty prediction/label vectors");
  double acc = 0;
  for (size_t i = 0; i < predictions.size(); ++i) {
    if (!(labels[i] > 0.0)) throw InvalidLabel("mape labels must be positive");
    acc += std::fabs(predictions[i] - labels[i]) / labels[i];
  }
  return acc / static_cast<double>(predictions.size());
}

inline double batch_mape(const ModelState& model, const std::vector<CellTensor>& cells,
                         int first_n = 0) {
  std::vector<double> preds, labels;
  preds.reserve(cells.size());
  labels.reserve(cells.size());
  for (const CellTensor& c : cells) {
    int n = first_n > 0 ? std::min(first_n, c.s()) : 0;
    preds.push_back(predict(model, c, n));
    labels.push_back(c.label);
  }
  return mape(preds, labels);
}

struct EvalReport {
  double overall_mape = 0;
  std::map<std::string, double> per_dataset;
  std::optional<double> seen_mape;
  std::optional<double> unseen_mape;
  int seen_count = 0;
  int unseen_count = 0;
  std::map<int, double> mape_by_cycles;
};

// Groups: per dataset_name; seen vs unseen by condition_key membership in the
// training+validation key set; optional per-N sweep. Each cell is evaluated
// on all its available cycles (capped at min(N, S) within the sweep).
inline EvalReport evaluate(const ModelState& model, const std::vector<CellTensor>& cells,
                           const std::set<std::string>& train_condition_keys,
                           const std::vector<int>& cycle_counts = {}) {
  if (cells.empty()) throw EmptyBatch("evaluation needs at least one cell");
  EvalReport rep;
  std::vector<double> all_p, all_y, seen_p, seen_y, unseen_p, unseen_y;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_ds;
  for (const CellTensor& c : cells) {
    double p = predict(model, c);
    all_p.push_back(p);
    all_y.push_back(c.label);
    auto& ds = by_ds[c.dataset_name];
    ds.first.push_back(p);
    ds.second.push_back(c.label);
    if (train_condition_keys.count(c.cond_key)) {
      seen_p.push_back(p);
      seen_y.push_back(c.label);
    } else {
      unseen_p.push_back(p);
      unseen_y.push_back(c.label);
    }
  }
  rep.overall_mape = mape(all_p, all_y);
  for (auto& [name, pl] : by_ds) rep.per_dataset[name] = mape(pl.first, pl.second);
  rep.seen_count = static_cast<int>(seen_p.size());
  rep.unseen_count = static_cast<int>(unseen_p.size());
  if (!seen_p.empty()) rep.seen_mape = mape(seen_p, seen_y);
  if (!unseen_p.empty()) rep.unseen_mape = mape(unseen_p, unseen_y);
  for (int n : cycle_counts) {
    if (n < 1 || n > kMaxCycles) throw InvalidN("cycle sweep entries must be in [1, 100]");
    rep.mape_by_cycles[n] = batch_mape(model, cells, n);
  }
  return rep;
}

inline nlohmann::ordered_json eval_report_to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["overall_mape"] = r.overall_mape;
  j["per_dataset"] = nlohmann::ordered_json::object();
  for (const auto& [name, v] : r.per_dataset) j["per_dataset"][name] = v;
  j["seen_mape"] = r.seen_mape ? nlohmann::ordered_json(*r.seen_mape)
                               : nlohmann::ordered_json(nullptr);
  j["unseen_mape"] = r.unseen_mape ? nlohmann::ordered_json(*r.unseen_mape)
                                   : nlohmann::ordered_json(nullptr);
  j["seen_count"] = r.seen_count;
  j["unseen_count"] = r.unseen_count;
  j["mape_by_cycles"] = nlohmann::ordered_json::object();
  for (const auto& [n, v] : r.mape_by_cycles) j["mape_by_cycles"][std::to_string(n)] = v;
  return j;
}

struct LogRecord {
  int64_t step = 0;
  double train_loss = 0;
  std::optional<double> val_mape;
  double wall_seconds = 0;
};

struct TrainResult {
  ModelState model;  // checkpoint with the lowest validation MAPE
  std::vector<LogRecord> log;
  double best_val_mape = 0;
  int64_t steps_run = 0;
  bool aborted = false;  // non-finite loss encountered; best checkpoint kept
};

namespace detail {

inline void append_log_record(const std::string& path, const LogRecord& rec) {
  if (path.empty()) return;
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  j["train_loss"] = rec.train_loss;
  j["val_mape"] = rec.val_mape ? nlohmann::ordered_json(*rec.val_mape)
                               : nlohmann::ordered_json(nullptr);
  j["wall_seconds"] = rec.wall_seconds;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open training log: " + path);
  out << j.dump() << "\n";
}

}  // namespace detail

// Epochs of seed-shuffled mini-batches; validation MAPE every `eval_every`
// steps (and at the end); the checkpoint with the lowest validation MAPE is
// returned. Serial and fully deterministic for a fixed seed. A non-finite
// loss stops training and keeps the best checkpoint so far; a non-finite
// gradient propagates as NonFiniteGradient.
inline TrainResult train_loop(ModelState model, const std::vector<CellTensor>& train_cells,
                              const std::vector<CellTensor>& val_cells, const TrainConfig& cfg,
                              const TrainableFilter& trainable = all_trainable()) {
  validate_train_config(cfg);
  if (train_cells.empty()) throw TooFewCells("training split is empty");

  auto started = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };

  Rng shuffle_rng = Rng(cfg.seed).fork(0);
  Rng dropout_rng = Rng(cfg.seed).fork(1);

  OptimizerState opt;
  TrainResult res;
  res.model = model;
  res.best_val_mape = std::numeric_limits<double>::infinity();
  bool have_best = false;

  auto run_eval = [&](double train_loss) {
    LogRecord rec;
    rec.step = res.steps_run;
    rec.train_loss = train_loss;
    if (!val_cells.empty()) {
      double vm = batch_mape(model, val_cells);
      rec.val_mape = vm;
      if (vm < res.best_val_mape) {
        res.best_val_mape = vm;
        res.model = model;
        have_best = true;
      }
    }
    rec.wall_seconds = elapsed();
    res.log.push_back(rec);
    detail::append_log_record(cfg.log_path, rec);
  };

  std::vector<size_t> order(train_cells.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  double last_loss = 0;
  bool logged_last = true;
  for (int epoch = 0; epoch < cfg.max_epochs && !res.aborted; ++epoch) {
    deterministic_shuffle(order, shuffle_rng);
    for (size_t at = 0; at < order.size() && !res.aborted; at += static_cast<size_t>(cfg.batch_size)) {
      std::vector<const CellTensor*> batch;
      size_t end = std::min(order.size(), at + static_cast<size_t>(cfg.batch_size));
      for (size_t i = at; i < end; ++i) batch.push_back(&train_cells[order[i]]);

      GradientResult gr = compute_gradients(model, batch, &dropout_rng);
      if (!std::isfinite(gr.loss)) {
        res.aborted = true;
        break;
      }
      adamw_step(model, gr.grads, opt, cfg, trainable);
      res.steps_run += 1;
      last_loss = gr.loss;
      logged_last = false;
      if (res.steps_run % cfg.eval_every == 0) {
        run_eval(gr.loss);
        logged_last = true;
      }
    }
  }
  if (!logged_last) run_eval(last_loss);
  if (!have_best) {
    res.model = model;  // no validation signal: keep the final parameters
    res.best_val_mape = std::numeric_limits<double>::quiet_NaN();
  }
  return res;
}

}  // namespace pbt
