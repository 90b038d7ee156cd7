// Walks the full pipeline in-process on a tiny synthetic dataset:
// generate raw cells, resample and label them, pretrain a small model,
// then evaluate seen/unseen generalization and a first-N sweep.
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "pbt/battmoe.hpp"
#include "pbt/cycledata.hpp"
#include "pbt/model.hpp"
#include "pbt/synthetic.hpp"
#include "pbt/train.hpp"

int main() {
  pbt::SynthConfig sc;
  sc.n_cells = 12;
  sc.l_min = 120;
  sc.l_max = 400;
  std::vector<pbt::RawCellRecord> raw = pbt::generate_synthetic(sc, 7);
  std::cout << "generated " << raw.size() << " raw cells\n";

  std::vector<pbt::CellSample> cells;
  for (const auto& r : raw) cells.push_back(pbt::preprocess_cell(r));
  std::printf("resampled %zu cells, first label %d cycles\n", cells.size(),
              cells[0].label.cycles_to_threshold);

  std::vector<std::string> ids;
  std::map<std::string, const pbt::CellSample*> by_id;
  for (const auto& c : cells) {
    ids.push_back(c.cell_id);
    by_id[c.cell_id] = &c;
  }
  pbt::DatasetSplit sp = pbt::split_dataset(ids, 11);
  auto pick = [&](const std::vector<std::string>& part) {
    std::vector<pbt::CellSample> out;
    for (const auto& id : part) out.push_back(*by_id.at(id));
    return out;
  };
  std::vector<pbt::CellSample> train = pick(sp.train), val = pick(sp.val), test = pick(sp.test);

  pbt::ModelConfig mc;
  mc.d = 16;
  mc.d_ff = 32;
  mc.l1 = 1;
  mc.l2 = 1;
  mc.heads = 2;
  mc.d_embed = 32;
  mc.label_transform = pbt::LabelTransform::log_scale;

  std::vector<pbt::AgingCondition> train_conds;
  for (const auto& c : train) train_conds.push_back(c.condition);
  pbt::ExpertRegistry reg = pbt::build_registry(train_conds, mc.k_g);
  std::printf("registry: %d general + %zu specialized experts\n", reg.general_count,
              reg.specialized.size());

  pbt::ModelState model = pbt::init_model(mc, reg, 7);
  pbt::EmbedFn embed = pbt::hash_embedder(mc.d_embed);

  auto tensorize = [&](const std::vector<pbt::CellSample>& in) {
    std::vector<pbt::CellTensor> out;
    for (const auto& c : in) out.push_back(pbt::make_cell_tensor(c, model.registry, embed));
    return out;
  };
  std::vector<pbt::CellTensor> train_t = tensorize(train);
  std::vector<pbt::CellTensor> val_t = tensorize(val);
  std::vector<pbt::CellTensor> test_t = tensorize(test);

  pbt::TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 8;
  tc.max_epochs = 40;
  tc.eval_every = 20;
  tc.seed = 7;
  pbt::TrainResult res = pbt::train_loop(model, train_t, val_t, tc);
  std::printf("trained %lld steps, best val MAPE %.3f\n",
              static_cast<long long>(res.steps_run), res.best_val_mape);

  std::set<std::string> seen;
  for (const auto& c : train) seen.insert(pbt::condition_key(c.condition));
  for (const auto& c : val) seen.insert(pbt::condition_key(c.condition));
  pbt::EvalReport report = pbt::evaluate(res.model, test_t, seen, {10, 50, 100});
  std::printf("test MAPE %.3f over %zu cells\n", report.overall_mape, test_t.size());
  for (const auto& [n, mape_n] : report.mape_by_cycles)
    std::printf("  first %3d cycles: MAPE %.3f\n", n, mape_n);
  return 0;
}
