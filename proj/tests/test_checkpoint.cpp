#include <catch2/catch_amalgamated.hpp>

#include <fstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "pbt/checkpoint.hpp"
#include "pbt/transfer.hpp"

using pbt::AgingCondition;
using pbt::ExpertRegistry;
using pbt::Mat;
using pbt::ModelConfig;
using pbt::ModelState;
using testutil::TempDir;

namespace {

AgingCondition make_cond(const std::string& cathode, double temperature_c) {
  AgingCondition c;
  c.cathode = cathode;
  c.anode = "graphite";
  c.format = "pouch";
  c.manufacturer = "m";
  c.nominal_capacity_ah = 2.0;
  c.temperature_c = temperature_c;
  c.charge_stages = {{1.0, {}, 4.2}};
  c.discharge_stages = {{1.0, {}, 3.0}};
  return c;
}

ModelState tiny_model(uint64_t seed = 7) {
  ModelConfig c;
  c.d = 8;
  c.d_ff = 12;
  c.l1 = 1;
  c.l2 = 1;
  c.heads = 2;
  c.d_embed = 16;
  c.label_transform = pbt::LabelTransform::log_scale;
  std::vector<AgingCondition> conds = {make_cond("LFP", 25.0), make_cond("NMC", 40.0)};
  ExpertRegistry reg = pbt::build_registry(conds, 1);
  ModelState m = pbt::init_model(c, reg, seed);
  m.seen_condition_keys = {pbt::condition_key(conds[0]), pbt::condition_key(conds[1])};
  return m;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

bool models_equal(ModelState& a, ModelState& b) {
  std::vector<Mat*> ta, tb;
  pbt::visit_params(a, [&](const std::string&, Mat& t) { ta.push_back(&t); });
  pbt::visit_params(b, [&](const std::string&, Mat& t) { tb.push_back(&t); });
  if (ta.size() != tb.size()) return false;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (ta[i]->rows != tb[i]->rows || ta[i]->cols != tb[i]->cols) return false;
    for (size_t k = 0; k < ta[i]->a.size(); ++k)
      if (ta[i]->a[k] != tb[i]->a[k]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("save, load, save reproduces both files byte for byte") {
  TempDir tmp("ckpt_rt");
  ModelState m = tiny_model();
  std::string d1 = tmp.sub("one"), d2 = tmp.sub("two");
  pbt::save_checkpoint(m, d1);
  ModelState loaded = pbt::load_checkpoint(d1);
  pbt::save_checkpoint(loaded, d2);

  CHECK(slurp(d1 + "/manifest.json") == slurp(d2 + "/manifest.json"));
  CHECK(slurp(d1 + "/tensors.bin") == slurp(d2 + "/tensors.bin"));

  // Every stored value is the f32 rounding of the original double.
  std::vector<Mat*> orig, back;
  pbt::visit_params(m, [&](const std::string&, Mat& t) { orig.push_back(&t); });
  pbt::visit_params(loaded, [&](const std::string&, Mat& t) { back.push_back(&t); });
  REQUIRE(orig.size() == back.size());
  for (size_t i = 0; i < orig.size(); ++i)
    for (size_t k = 0; k < orig[i]->a.size(); ++k)
      CHECK(back[i]->a[k] == static_cast<double>(static_cast<float>(orig[i]->a[k])));
}

TEST_CASE("checkpoint restores config, registry, and seen keys") {
  TempDir tmp("ckpt_meta");
  ModelState m = tiny_model();
  pbt::save_checkpoint(m, tmp.sub("c"));
  ModelState r = pbt::load_checkpoint(tmp.sub("c"));

  CHECK(r.config.d == m.config.d);
  CHECK(r.config.d_ff == m.config.d_ff);
  CHECK(r.config.l1 == m.config.l1);
  CHECK(r.config.l2 == m.config.l2);
  CHECK(r.config.heads == m.config.heads);
  CHECK(r.config.dropout == m.config.dropout);
  CHECK(r.config.k_g == m.config.k_g);
  CHECK(r.config.d_embed == m.config.d_embed);
  CHECK(r.config.label_transform == m.config.label_transform);

  REQUIRE(r.registry.k_s() == m.registry.k_s());
  CHECK(r.registry.general_count == m.registry.general_count);
  for (int i = 0; i < m.registry.k_s(); ++i) {
    const pbt::RoutingTag& a = m.registry.specialized[static_cast<size_t>(i)];
    const pbt::RoutingTag& b = r.registry.specialized[static_cast<size_t>(i)];
    CHECK(a.kind == b.kind);
    CHECK(a.value == b.value);
    CHECK(a.center_c == b.center_c);
  }
  CHECK(r.seen_condition_keys == m.seen_condition_keys);

  // Routing behaves identically after the round trip, temperature included.
  AgingCondition probe = make_cond("LFP", 22.0);
  CHECK(pbt::hard_mask(probe, r.registry).bits == pbt::hard_mask(probe, m.registry).bits);
}

TEST_CASE("identical saves from one model are byte-identical") {
  TempDir tmp("ckpt_rep");
  ModelState m = tiny_model(99);
  pbt::save_checkpoint(m, tmp.sub("a"));
  pbt::save_checkpoint(m, tmp.sub("b"));
  CHECK(slurp(tmp.sub("a") + "/manifest.json") == slurp(tmp.sub("b") + "/manifest.json"));
  CHECK(slurp(tmp.sub("a") + "/tensors.bin") == slurp(tmp.sub("b") + "/tensors.bin"));
}

TEST_CASE("adapter checkpoints reference their base") {
  TempDir tmp("ckpt_adapter");
  ModelState base = tiny_model(21);
  // Store the base with f32-exact tensors so adapter loads reproduce it.
  pbt::save_checkpoint(base, tmp.sub("base"));
  base = pbt::load_checkpoint(tmp.sub("base"));
  pbt::save_checkpoint(base, tmp.sub("base"));

  ModelState adapted = pbt::insert_adapters(base, 2, 4, /*seed=*/5, /*residual=*/true);
  // Give adapters nonzero content so the round trip is meaningful.
  pbt::Rng rng(3);
  for (pbt::AdapterParams& a : adapted.adapters)
    for (double& v : a.up.w.a) v = rng.uniform(-1, 1);

  SECTION("relative base reference resolves against the adapter directory") {
    pbt::save_adapter_checkpoint(adapted, tmp.sub("adapt"), "../base");
    ModelState r = pbt::load_adapter_checkpoint(tmp.sub("adapt"));
    REQUIRE(r.adapters.size() == 2);
    CHECK(r.adapter_positions == adapted.adapter_positions);
    CHECK(r.adapter_residual == adapted.adapter_residual);
    CHECK(pbt::base_fingerprint(r) == pbt::base_fingerprint(base));
    for (size_t k = 0; k < r.adapters.size(); ++k)
      for (size_t i = 0; i < r.adapters[k].up.w.a.size(); ++i)
        CHECK(r.adapters[k].up.w.a[i] ==
              static_cast<double>(static_cast<float>(adapted.adapters[k].up.w.a[i])));
  }

  SECTION("base override replaces the recorded path") {
    pbt::save_adapter_checkpoint(adapted, tmp.sub("adapt2"), "../nowhere");
    CHECK_THROWS_AS(pbt::load_adapter_checkpoint(tmp.sub("adapt2")), pbt::IoError);
    ModelState r = pbt::load_adapter_checkpoint(tmp.sub("adapt2"), tmp.sub("base"));
    CHECK(pbt::base_fingerprint(r) == pbt::base_fingerprint(base));
    REQUIRE(r.adapters.size() == 2);
  }

  SECTION("adapter blob holds only adapter tensors") {
    pbt::save_adapter_checkpoint(adapted, tmp.sub("adapt3"), "../base");
    std::string manifest = slurp(tmp.sub("adapt3") + "/manifest.json");
    CHECK(manifest.find("\"pbt-adapter\"") != std::string::npos);
    CHECK(manifest.find("adapter0.up.w") != std::string::npos);
    CHECK(manifest.find("head.gate.w") == std::string::npos);
    CHECK(manifest.find("distill.w") == std::string::npos);
  }

  SECTION("saving adapters from a model without any is refused") {
    CHECK_THROWS_AS(pbt::save_adapter_checkpoint(base, tmp.sub("x"), "../base"),
                    pbt::InvalidConfig);
  }
}

TEST_CASE("malformed checkpoints are rejected with IoError") {
  TempDir tmp("ckpt_bad");
  ModelState m = tiny_model();
  std::string dir = tmp.sub("c");
  pbt::save_checkpoint(m, dir);

  SECTION("missing directory") {
    CHECK_THROWS_AS(pbt::load_checkpoint(tmp.sub("absent")), pbt::IoError);
  }
  SECTION("manifest is not JSON") {
    spit(dir + "/manifest.json", "{not json");
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("wrong format marker") {
    std::string text = slurp(dir + "/manifest.json");
    size_t at = text.find("pbt-checkpoint");
    REQUIRE(at != std::string::npos);
    text.replace(at, 14, "something-else");
    spit(dir + "/manifest.json", text);
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("missing tensor file") {
    std::filesystem::remove(dir + "/tensors.bin");
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("truncated tensor blob") {
    std::string blob = slurp(dir + "/tensors.bin");
    spit(dir + "/tensors.bin", blob.substr(0, blob.size() / 2));
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("tensor shape mismatch") {
    pbt::ordered_json manifest = pbt::ordered_json::parse(slurp(dir + "/manifest.json"));
    manifest["tensors"][0]["shape"][0] = manifest["tensors"][0]["shape"][0].get<int>() + 1;
    spit(dir + "/manifest.json", manifest.dump(2) + "\n");
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("unknown tensor name") {
    pbt::ordered_json manifest = pbt::ordered_json::parse(slurp(dir + "/manifest.json"));
    manifest["tensors"][0]["name"] = "distill.q";
    spit(dir + "/manifest.json", manifest.dump(2) + "\n");
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
  SECTION("unsupported dtype") {
    pbt::ordered_json manifest = pbt::ordered_json::parse(slurp(dir + "/manifest.json"));
    manifest["tensors"][0]["dtype"] = "f64";
    spit(dir + "/manifest.json", manifest.dump(2) + "\n");
    CHECK_THROWS_AS(pbt::load_checkpoint(dir), pbt::IoError);
  }
}

TEST_CASE("fingerprints react to tensors and ignore adapters") {
  ModelState m = tiny_model(31);
  uint64_t fp0 = pbt::base_fingerprint(m);
  CHECK(fp0 == pbt::base_fingerprint(m));

  Mat probe(2, 2);
  probe.a = {1.0, 2.0, 3.0, 4.0};
  uint64_t t0 = pbt::tensor_fingerprint(probe);
  probe(1, 1) = 4.0000000001;
  CHECK(pbt::tensor_fingerprint(probe) != t0);

  ModelState tweaked = m;
  tweaked.head.gate.b(0, 0) += 1e-9;
  CHECK(pbt::base_fingerprint(tweaked) != fp0);

  ModelState adapted = pbt::insert_adapters(m, 1, 4, 9, true);
  CHECK(pbt::base_fingerprint(adapted) == fp0);
  adapted.adapters[0].down.w(0, 0) = 5.0;
  CHECK(pbt::base_fingerprint(adapted) == fp0);
}

TEST_CASE("loading twice yields identical models") {
  TempDir tmp("ckpt_twice");
  ModelState m = tiny_model(77);
  pbt::save_checkpoint(m, tmp.sub("c"));
  ModelState a = pbt::load_checkpoint(tmp.sub("c"));
  ModelState b = pbt::load_checkpoint(tmp.sub("c"));
  CHECK(models_equal(a, b));
}
