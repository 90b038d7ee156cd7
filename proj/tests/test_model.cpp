#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "pbt/model.hpp"
#include "pbt/synthetic.hpp"

using pbt::AgingCondition;
using pbt::ExpertRegistry;
using pbt::Graph;
using pbt::LabelTransform;
using pbt::LinearParams;
using pbt::Mat;
using pbt::ModelConfig;
using pbt::ModelState;
using pbt::Rng;
using pbt::RoutingMask;
using testutil::rand_mat;
using testutil::rel_err;

namespace {

AgingCondition make_cond(const std::string& cathode, double temperature_c,
                         const std::string& format = "cylindrical_18650") {
  AgingCondition c;
  c.cathode = cathode;
  c.anode = "graphite";
  c.format = format;
  c.manufacturer = "m";
  c.nominal_capacity_ah = 1.1;
  c.temperature_c = temperature_c;
  c.charge_stages = {{1.0, {}, 4.2}};
  c.discharge_stages = {{1.0, {}, 3.0}};
  return c;
}

ModelConfig tiny_config(int d = 8, int d_ff = 12, int l1 = 1, int l2 = 2, int heads = 2,
                        int d_embed = 16) {
  ModelConfig c;
  c.d = d;
  c.d_ff = d_ff;
  c.l1 = l1;
  c.l2 = l2;
  c.heads = heads;
  c.dropout = 0.0;
  c.k_g = 1;
  c.d_embed = d_embed;
  return c;
}

// ---- plain-loop recomputation of the whole forward pass (no Graph) ----

Mat o_linear(const Mat& x, const LinearParams& p) {
  Mat y(x.rows, p.w.rows);
  for (int r = 0; r < x.rows; ++r)
    for (int o = 0; o < p.w.rows; ++o) {
      double acc = 0;
      for (int k = 0; k < x.cols; ++k) acc += x(r, k) * p.w(o, k);
      y(r, o) = acc + p.b(0, o);
    }
  return y;
}

Mat o_leaky(Mat x, double slope) {
  for (double& v : x.a) v = v > 0 ? v : slope * v;
  return x;
}

Mat o_gelu(Mat x) {
  for (double& v : x.a) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
  return x;
}

Mat o_add(const Mat& a, const Mat& b) {
  Mat y = a;
  for (size_t i = 0; i < y.a.size(); ++i) y.a[i] += b.a[i];
  return y;
}

Mat o_ln(const Mat& x, const pbt::LnParams& ln, double eps) {
  Mat y = x;
  for (int r = 0; r < x.rows; ++r) {
    double mean = 0;
    for (int c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= x.cols;
    double var = 0;
    for (int c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < x.cols; ++c)
      y(r, c) = ln.gamma(0, c) * (x(r, c) - mean) * inv + ln.beta(0, c);
  }
  return y;
}

Mat o_zero_rows(Mat x, const std::vector<double>& valid) {
  for (int r = 0; r < x.rows; ++r)
    if (valid[static_cast<size_t>(r)] == 0.0)
      for (int c = 0; c < x.cols; ++c) x(r, c) = 0.0;
  return x;
}

std::vector<double> o_gate(const Mat& e_hat, const pbt::GateParams& g) {
  std::vector<double> out(static_cast<size_t>(g.w2.rows));
  for (int j = 0; j < g.w2.rows; ++j) {
    double acc = 0;
    for (int k = 0; k < g.w2.cols; ++k) acc += g.w2(j, k) * e_hat(0, k);
    out[static_cast<size_t>(j)] = acc + g.b2(0, j);
  }
  return out;
}

Mat o_moe_linear(const Mat& x, const pbt::MoeParams<LinearParams>& moe, const Mat& e_hat,
                 const RoutingMask& mask, int d_out) {
  Mat acc(x.rows, d_out);
  std::vector<double> gate = o_gate(e_hat, moe.gate);
  for (const LinearParams& p : moe.general) acc = o_add(acc, o_linear(x, p));
  for (size_t j = 0; j < mask.bits.size(); ++j) {
    if (!mask.bits[j]) continue;
    Mat y = o_linear(x, moe.specialized[j]);
    for (double& v : y.a) v *= gate[j];
    acc = o_add(acc, y);
  }
  return acc;
}

Mat o_ffn(const Mat& x, const pbt::FfnExpert& e) {
  return o_linear(o_gelu(o_linear(x, e.lin1)), e.lin2);
}

Mat o_moe_ffn(const Mat& x, const pbt::MoeParams<pbt::FfnExpert>& moe, const Mat& e_hat,
              const RoutingMask& mask, int d) {
  Mat acc(x.rows, d);
  std::vector<double> gate = o_gate(e_hat, moe.gate);
  for (const pbt::FfnExpert& e : moe.general) acc = o_add(acc, o_ffn(x, e));
  for (size_t j = 0; j < mask.bits.size(); ++j) {
    if (!mask.bits[j]) continue;
    Mat y = o_ffn(x, moe.specialized[j]);
    for (double& v : y.a) v *= gate[j];
    acc = o_add(acc, y);
  }
  return acc;
}

Mat o_softmax_masked(const Mat& s, const std::vector<double>& valid) {
  Mat p(s.rows, s.cols);
  for (int r = 0; r < s.rows; ++r) {
    double mx = -1e300;
    for (int c = 0; c < s.cols; ++c)
      if (valid[static_cast<size_t>(c)] != 0.0) mx = std::max(mx, s(r, c));
    double denom = 0;
    for (int c = 0; c < s.cols; ++c)
      if (valid[static_cast<size_t>(c)] != 0.0) denom += std::exp(s(r, c) - mx);
    for (int c = 0; c < s.cols; ++c)
      p(r, c) = valid[static_cast<size_t>(c)] != 0.0 ? std::exp(s(r, c) - mx) / denom : 0.0;
  }
  return p;
}

Mat o_attention(const Mat& h, const pbt::InterLayer& L, const std::vector<double>& valid,
                int heads) {
  const int d = h.cols;
  const int dk = d / heads;
  Mat q = o_linear(h, L.wq), k = o_linear(h, L.wk), v = o_linear(h, L.wv);
  Mat merged(h.rows, d);
  double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (int hd = 0; hd < heads; ++hd) {
    int c0 = hd * dk;
    Mat scores(h.rows, h.rows);
    for (int r = 0; r < h.rows; ++r)
      for (int c = 0; c < h.rows; ++c) {
        double acc = 0;
        for (int j = 0; j < dk; ++j) acc += q(r, c0 + j) * k(c, c0 + j);
        scores(r, c) = acc * scale;
      }
    Mat probs = o_softmax_masked(scores, valid);
    for (int r = 0; r < h.rows; ++r)
      for (int j = 0; j < dk; ++j) {
        double acc = 0;
        for (int c = 0; c < h.rows; ++c) acc += probs(r, c) * v(c, c0 + j);
        merged(r, c0 + j) = acc;
      }
  }
  return o_linear(merged, L.wo);
}

Mat o_positional(int valid_rows, int total, int d) {
  Mat pe(total, d);
  for (int pos = 0; pos < valid_rows; ++pos)
    for (int j = 0; j < d; j += 2) {
      double freq = std::pow(10000.0, -static_cast<double>(j) / d);
      pe(pos, j) = std::sin(pos * freq);
      if (j + 1 < d) pe(pos, j + 1) = std::cos(pos * freq);
    }
  return pe;
}

double o_head(const Mat& z, const pbt::HeadParams& head) {
  Mat gate = o_linear(z, head.gate);
  double y = 0;
  for (int i = 0; i < 5; ++i) y += o_linear(z, head.f[static_cast<size_t>(i)])(0, 0);
  for (int i = 0; i < 5; ++i)
    y += gate(0, i) * o_linear(z, head.f[static_cast<size_t>(5 + i)])(0, 0);
  return y;
}

double o_forward(const ModelState& m, const Mat& x, const Mat& e, const RoutingMask& mask) {
  const int d = m.config.d, total = m.config.max_cycles, s = x.rows;
  Mat e_hat = o_leaky(o_linear(e, m.distill), 0.01);

  Mat tok = o_moe_linear(x, m.cyclepatch, e_hat, mask, d);
  Mat h(total, d);
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < d; ++c) h(r, c) = tok(r, c);
  std::vector<double> valid(static_cast<size_t>(total), 0.0);
  for (int r = 0; r < s; ++r) valid[static_cast<size_t>(r)] = 1.0;

  for (const pbt::IntraLayer& L : m.intra) {
    Mat f = o_moe_ffn(h, L.moe, e_hat, mask, d);
    h = o_zero_rows(o_ln(o_add(f, h), L.ln, pbt::kLnEps), valid);
  }
  h = o_add(h, o_positional(s, total, d));
  for (const pbt::InterLayer& L : m.inter) {
    Mat att = o_attention(h, L, valid, m.config.heads);
    Mat p1 = o_zero_rows(o_ln(o_add(att, h), L.ln1, pbt::kLnEps), valid);
    Mat f = o_moe_ffn(p1, L.moe, e_hat, mask, d);
    h = o_zero_rows(o_ln(o_add(f, p1), L.ln2, pbt::kLnEps), valid);
  }
  Mat z(1, d);
  for (int c = 0; c < d; ++c) z(0, c) = h(s - 1, c);
  return o_head(z, m.head);
}

size_t closed_form_params(const ModelConfig& c, int k_s, int n_adapt = 0, int d_a = 0) {
  auto sz = [](int a, int b) { return static_cast<size_t>(a) * static_cast<size_t>(b); };
  const int d = c.d, d_ff = c.d_ff;
  size_t ffn_expert = sz(2 * d, d_ff) + static_cast<size_t>(d_ff + d);
  size_t gate = sz(k_s, d_ff) + static_cast<size_t>(k_s);
  size_t n = sz(d_ff, c.d_embed) + static_cast<size_t>(d_ff);
  n += static_cast<size_t>(c.k_g + k_s) * (sz(d, 900) + static_cast<size_t>(d)) + gate;
  n += static_cast<size_t>(c.l1) *
       (static_cast<size_t>(c.k_g + k_s) * ffn_expert + gate + static_cast<size_t>(2 * d));
  n += static_cast<size_t>(c.l2) *
       (4 * (sz(d, d) + static_cast<size_t>(d)) + static_cast<size_t>(4 * d) +
        static_cast<size_t>(c.k_g + k_s) * ffn_expert + gate);
  n += 10 * static_cast<size_t>(d + 1) + 5 * static_cast<size_t>(d + 1);
  n += static_cast<size_t>(n_adapt) *
       (static_cast<size_t>(2 * d) + sz(d_a, d) + static_cast<size_t>(d_a) + sz(d, d_a) +
        static_cast<size_t>(d));
  return n;
}

ExpertRegistry small_registry() {
  std::vector<AgingCondition> conds = {make_cond("LFP", 25.0), make_cond("NMC", 25.0),
                                       make_cond("LFP", 45.0, "pouch")};
  return pbt::build_registry(conds, 1);
}

}  // namespace

TEST_CASE("config validation rejects each malformed field") {
  ModelConfig c = tiny_config();
  REQUIRE_NOTHROW(pbt::validate_config(c));

  ModelConfig bad = c;
  bad.d = 0;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.d_ff = -1;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.l1 = 0;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.l2 = 0;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.dropout = -0.1;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.k_g = -1;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.d_embed = 4;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
  bad = c;
  bad.max_cycles = 64;
  CHECK_THROWS_AS(pbt::validate_config(bad), pbt::InvalidConfig);
}

TEST_CASE("published configuration matches the documented scale") {
  ModelConfig c = pbt::paper_config();
  CHECK(c.d == 128);
  CHECK(c.d_ff == 512);
  CHECK(c.l1 == 2);
  CHECK(c.l2 == 10);
  CHECK(c.l1 + c.l2 == 12);
  CHECK(c.heads == 8);
  CHECK(c.dropout == 0.05);
  CHECK(c.k_g == 1);
  CHECK(c.d_embed == 256);
  CHECK(c.max_cycles == 100);
  REQUIRE_NOTHROW(pbt::validate_config(c));
}

TEST_CASE("initialization is seed-deterministic") {
  ExpertRegistry reg = small_registry();
  ModelConfig c = tiny_config();
  ModelState a = pbt::init_model(c, reg, 42);
  ModelState b = pbt::init_model(c, reg, 42);
  ModelState other = pbt::init_model(c, reg, 43);

  std::vector<Mat*> ta, tb, tc;
  pbt::visit_params(a, [&](const std::string&, Mat& t) { ta.push_back(&t); });
  pbt::visit_params(b, [&](const std::string&, Mat& t) { tb.push_back(&t); });
  pbt::visit_params(other, [&](const std::string&, Mat& t) { tc.push_back(&t); });
  REQUIRE(ta.size() == tb.size());

  bool identical = true, differs = false;
  for (size_t i = 0; i < ta.size(); ++i) {
    REQUIRE(ta[i]->a.size() == tb[i]->a.size());
    for (size_t k = 0; k < ta[i]->a.size(); ++k) {
      if (ta[i]->a[k] != tb[i]->a[k]) identical = false;
      if (ta[i]->a[k] != tc[i]->a[k]) differs = true;
    }
  }
  CHECK(identical);
  CHECK(differs);
}

TEST_CASE("parameter names are unique and ordered with adapters last") {
  ExpertRegistry reg = small_registry();
  ModelState m = pbt::init_model(tiny_config(), reg, 3);

  std::vector<std::string> names;
  pbt::visit_params(m, [&](const std::string& n, Mat&) { names.push_back(n); });
  std::set<std::string> uniq(names.begin(), names.end());
  CHECK(uniq.size() == names.size());
  REQUIRE(names.size() >= 4);
  CHECK(names[0] == "distill.w");
  CHECK(names[1] == "distill.b");
  CHECK(names[2] == "cyclepatch.gen0.w");
  CHECK(names[3] == "cyclepatch.gen0.b");
  CHECK(std::find(names.begin(), names.end(), "cyclepatch.gate.w2") != names.end());
  CHECK(std::find(names.begin(), names.end(), "intra0.ffn.spec0.lin1.w") != names.end());
  CHECK(std::find(names.begin(), names.end(), "inter1.attn.wo.b") != names.end());
  CHECK(std::find(names.begin(), names.end(), "inter0.ln2.beta") != names.end());
  CHECK(names[names.size() - 2] == "head.gate.w");
  CHECK(names.back() == "head.gate.b");
  for (const std::string& n : names) CHECK_FALSE(pbt::is_adapter_param(n));

  // Appended adapters always serialize after every base tensor.
  pbt::AdapterParams a;
  pbt::detail::init_ln(a.ln, m.config.d);
  Rng rng(9);
  pbt::detail::init_linear(a.down, 4, m.config.d, rng);
  pbt::detail::init_linear(a.up, m.config.d, 4, rng);
  m.adapters.push_back(a);
  m.adapter_positions.push_back(0);
  std::vector<std::string> with_adapter;
  pbt::visit_params(m, [&](const std::string& n, Mat&) { with_adapter.push_back(n); });
  REQUIRE(with_adapter.size() == names.size() + 6);
  for (size_t i = 0; i < names.size(); ++i) CHECK(with_adapter[i] == names[i]);
  CHECK(with_adapter[names.size()] == "adapter0.ln.gamma");
  CHECK(with_adapter.back() == "adapter0.up.b");
  CHECK(pbt::is_adapter_param("adapter0.down.w"));
  CHECK_FALSE(pbt::is_adapter_param("head.gate.w"));
}

TEST_CASE("parameter count equals the closed-form total") {
  struct Case {
    ModelConfig c;
    int n_conds;
  };
  std::vector<Case> cases;
  cases.push_back({tiny_config(), 3});
  cases.push_back({tiny_config(16, 24, 2, 3, 4, 32), 2});
  ModelConfig paper = pbt::paper_config();
  cases.push_back({paper, 3});

  for (const Case& cs : cases) {
    std::vector<AgingCondition> conds;
    conds.push_back(make_cond("LFP", 25.0));
    if (cs.n_conds > 1) conds.push_back(make_cond("NMC", 35.0, "pouch"));
    if (cs.n_conds > 2) conds.push_back(make_cond("NCA", 15.0, "prismatic"));
    ExpertRegistry reg = pbt::build_registry(conds, cs.c.k_g);
    ModelState m = pbt::init_model(cs.c, reg, 11);
    CHECK(pbt::count_params(m) == closed_form_params(cs.c, reg.k_s()));
  }
}

TEST_CASE("positional encoding matches the sinusoid table") {
  Mat pe = pbt::positional_encoding(3, 5, 4);
  // Position 0: sin 0 = 0, cos 0 = 1 at every frequency.
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
  CHECK(pe(0, 2) == 0.0);
  CHECK(pe(0, 3) == 1.0);
  // Position 1, d = 4: frequencies 1 and 10000^(-2/4) = 0.01.
  CHECK(std::abs(pe(1, 0) - std::sin(1.0)) < 1e-12);
  CHECK(std::abs(pe(1, 1) - std::cos(1.0)) < 1e-12);
  CHECK(std::abs(pe(1, 2) - std::sin(0.01)) < 1e-12);
  CHECK(std::abs(pe(1, 3) - std::cos(0.01)) < 1e-12);
  CHECK(std::abs(pe(2, 0) - std::sin(2.0)) < 1e-12);
  // Rows past the valid range stay exactly zero.
  for (int r = 3; r < 5; ++r)
    for (int c = 0; c < 4; ++c) CHECK(pe(r, c) == 0.0);

  Mat odd = pbt::positional_encoding(2, 2, 3);
  CHECK(std::abs(odd(1, 2) - std::sin(std::pow(10000.0, -2.0 / 3.0))) < 1e-12);
}

TEST_CASE("cyclepatch produces padded tokens with exact zero padding") {
  ExpertRegistry reg = small_registry();
  ModelState m = pbt::init_model(tiny_config(), reg, 5);
  Rng rng(21);
  AgingCondition cond = make_cond("LFP", 25.0);
  RoutingMask mask = pbt::hard_mask(cond, reg);

  Mat x = rand_mat(rng, 1, 900);
  Mat e = rand_mat(rng, 1, m.config.d_embed);
  pbt::CycleTokens tok = pbt::cyclepatch_forward(m, x, e, mask);
  REQUIRE(tok.m.rows == 100);
  REQUIRE(tok.m.cols == m.config.d);
  CHECK(tok.s == 1);
  CHECK(tok.valid[0] == 1.0);
  for (int r = 1; r < 100; ++r) {
    CHECK(tok.valid[static_cast<size_t>(r)] == 0.0);
    for (int c = 0; c < tok.m.cols; ++c) CHECK(tok.m(r, c) == 0.0);
  }
  CHECK(tok.m.all_finite());
}

TEST_CASE("cyclepatch with one general expert is a plain linear map") {
  // Registry with zero specialized experts: only the general expert remains.
  ExpertRegistry reg;
  reg.general_count = 1;
  ModelConfig c = tiny_config();
  ModelState m = pbt::init_model(c, reg, 8);
  REQUIRE(m.cyclepatch.specialized.empty());

  Rng rng(77);
  Mat x = rand_mat(rng, 4, 900);
  Mat e = rand_mat(rng, 1, c.d_embed);
  RoutingMask mask;  // no specialized experts, empty mask
  pbt::CycleTokens tok = pbt::cyclepatch_forward(m, x, e, mask);

  Mat want = o_linear(x, m.cyclepatch.general[0]);
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < c.d; ++col)
      CHECK(std::abs(tok.m(r, col) - want(r, col)) < 1e-12);
}

TEST_CASE("intra layer with zeroed FFN experts reduces to layer norm") {
  ExpertRegistry reg = small_registry();
  ModelConfig c = tiny_config();
  ModelState m = pbt::init_model(c, reg, 13);
  pbt::IntraLayer& L = m.intra[0];
  for (auto& e : L.moe.general) {
    e.lin1.w.fill(0.0);
    e.lin1.b.fill(0.0);
    e.lin2.w.fill(0.0);
    e.lin2.b.fill(0.0);
  }
  for (auto& e : L.moe.specialized) {
    e.lin2.w.fill(0.0);
    e.lin2.b.fill(0.0);
  }

  Rng rng(4);
  Mat h_in(6, c.d);
  for (int r = 0; r < 4; ++r)
    for (int col = 0; col < c.d; ++col) h_in(r, col) = rng.uniform(-1, 1);
  std::vector<double> valid = {1, 1, 1, 1, 0, 0};
  RoutingMask mask = pbt::hard_mask(make_cond("LFP", 25.0), reg);
  Mat e_hat_val = rand_mat(rng, 1, c.d_ff);

  Graph g;
  int h = g.input(h_in);
  int e_hat = g.input(e_hat_val);
  int ffn = pbt::detail::build_moe_ffn(g, L.moe, h, e_hat, mask, c.d, 0.0, nullptr);
  int out = g.zero_rows(pbt::detail::build_ln(g, g.add(ffn, h), L.ln), valid);

  Mat want = o_zero_rows(o_ln(h_in, L.ln, pbt::kLnEps), valid);
  const Mat& got = g.val(out);
  for (int r = 0; r < 6; ++r)
    for (int col = 0; col < c.d; ++col) CHECK(std::abs(got(r, col) - want(r, col)) < 1e-12);
}

TEST_CASE("attention with one valid token copies its value row") {
  ModelConfig c = tiny_config();
  ExpertRegistry reg = small_registry();
  ModelState m = pbt::init_model(c, reg, 19);
  const pbt::InterLayer& L = m.inter[0];

  Rng rng(31);
  Mat h(5, c.d);
  for (int col = 0; col < c.d; ++col) h(0, col) = rng.uniform(-1, 1);
  std::vector<double> valid = {1, 0, 0, 0, 0};

  Graph g;
  int att = pbt::detail::build_attention(g, L, g.input(h), valid, c.heads);
  const Mat& got = g.val(att);

  // Probabilities collapse to 1 on the single valid key, so the attended
  // value is exactly the first value row for every head.
  Mat v = o_linear(h, L.wv);
  Mat merged(1, c.d);
  for (int col = 0; col < c.d; ++col) merged(0, col) = v(0, col);
  Mat want = o_linear(merged, L.wo);
  for (int col = 0; col < c.d; ++col) CHECK(std::abs(got(0, col) - want(0, col)) < 1e-12);
}

TEST_CASE("attention over two identical tokens yields identical rows") {
  ModelConfig c = tiny_config();
  ModelState m = pbt::init_model(c, small_registry(), 23);
  Rng rng(6);
  Mat h(4, c.d);
  for (int col = 0; col < c.d; ++col) {
    double v = rng.uniform(-1, 1);
    h(0, col) = v;
    h(1, col) = v;
  }
  std::vector<double> valid = {1, 1, 0, 0};
  Graph g;
  int att = pbt::detail::build_attention(g, m.inter[0], g.input(h), valid, c.heads);
  const Mat& got = g.val(att);
  for (int col = 0; col < c.d; ++col) CHECK(got(0, col) == got(1, col));
}

TEST_CASE("single-head attention matches the softmax oracle") {
  ModelConfig c = tiny_config(8, 12, 1, 1, /*heads=*/1);
  ModelState m = pbt::init_model(c, small_registry(), 29);
  Rng rng(41);
  Mat h = rand_mat(rng, 3, c.d);
  std::vector<double> valid = {1, 1, 1};

  Graph g;
  int att = pbt::detail::build_attention(g, m.inter[0], g.input(h), valid, 1);
  const Mat& got = g.val(att);
  Mat want = o_attention(h, m.inter[0], valid, 1);
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < c.d; ++col) CHECK(rel_err(got(r, col), want(r, col)) < 1e-10);
}

TEST_CASE("projection head mixes general and gated experts") {
  ModelConfig c = tiny_config();
  ModelState m = pbt::init_model(c, small_registry(), 37);
  Rng rng(55);
  Mat z = rand_mat(rng, 1, c.d);

  SECTION("single constant expert") {
    for (auto& f : m.head.f) {
      f.w.fill(0.0);
      f.b.fill(0.0);
    }
    m.head.gate.w.fill(0.0);
    m.head.gate.b.fill(0.0);
    m.head.f[1].b(0, 0) = 3.25;
    Graph g;
    int y = pbt::build_head(g, m, g.input(z));
    CHECK(g.val(y)(0, 0) == 3.25);
  }

  SECTION("zero gate keeps only the general sum") {
    m.head.gate.w.fill(0.0);
    m.head.gate.b.fill(0.0);
    Graph g;
    int y = pbt::build_head(g, m, g.input(z));
    double want = 0;
    for (int i = 0; i < 5; ++i) want += o_linear(z, m.head.f[static_cast<size_t>(i)])(0, 0);
    CHECK(rel_err(g.val(y)(0, 0), want) < 1e-12);
  }

  SECTION("random parameters match the direct formula") {
    Graph g;
    int y = pbt::build_head(g, m, g.input(z));
    CHECK(rel_err(g.val(y)(0, 0), o_head(z, m.head)) < 1e-12);
  }
}

TEST_CASE("full forward pass matches an independent recomputation") {
  struct Trial {
    ModelConfig c;
    int s;
    uint64_t seed;
  };
  std::vector<Trial> trials = {
      {tiny_config(8, 12, 1, 2, 2, 16), 3, 101},
      {tiny_config(6, 10, 2, 1, 3, 16), 5, 202},
      {tiny_config(8, 12, 1, 1, 2, 16), 1, 303},
  };
  for (const Trial& tr : trials) {
    ExpertRegistry reg = small_registry();
    ModelState m = pbt::init_model(tr.c, reg, tr.seed);
    Rng rng(tr.seed + 7);
    Mat x = rand_mat(rng, tr.s, 900, -0.5, 0.5);
    Mat e = rand_mat(rng, 1, tr.c.d_embed);
    RoutingMask mask = pbt::hard_mask(make_cond("LFP", 25.0), reg);
    REQUIRE(mask.count_selected() < reg.k_s());  // NMC expert masked out

    Graph g;
    int yhat = pbt::build_forward(g, m, x, e, mask, nullptr);
    double got = g.val(yhat)(0, 0);
    double want = o_forward(m, x, e, mask);
    INFO("s=" << tr.s << " seed=" << tr.seed);
    CHECK(rel_err(got, want) < 1e-9);
  }
}

TEST_CASE("padded token rows never influence the prediction") {
  ModelConfig c = tiny_config();
  ExpertRegistry reg = small_registry();
  ModelState m = pbt::init_model(c, reg, 47);
  Rng rng(91);
  RoutingMask mask = pbt::hard_mask(make_cond("LFP", 25.0), reg);

  for (int trial = 0; trial < 8; ++trial) {
    int s = 1 + static_cast<int>(rng.next_below(12));
    Mat x = rand_mat(rng, s, 900);
    Mat e = rand_mat(rng, 1, c.d_embed);
    pbt::CycleTokens tok = pbt::cyclepatch_forward(m, x, e, mask);

    Graph g1;
    double clean = g1.val(pbt::build_forward_from_tokens(g1, m, tok.m, s, e, mask))(0, 0);

    Mat garbage = tok.m;
    for (int r = s; r < 100; ++r)
      for (int col = 0; col < c.d; ++col) garbage(r, col) = rng.uniform(-100, 100);
    Graph g2;
    double dirty = g2.val(pbt::build_forward_from_tokens(g2, m, garbage, s, e, mask))(0, 0);

    CHECK(clean == dirty);  // bit-identical, not merely close

    Graph g3;
    double direct = g3.val(pbt::build_forward(g3, m, x, e, mask, nullptr))(0, 0);
    CHECK(direct == clean);
  }
}

TEST_CASE("forward pass stays finite at both cycle-count extremes") {
  ModelConfig c = tiny_config();
  ExpertRegistry reg = small_registry();
  ModelState m = pbt::init_model(c, reg, 53);
  Rng rng(14);
  Mat e = rand_mat(rng, 1, c.d_embed);
  RoutingMask mask = pbt::hard_mask(make_cond("LFP", 25.0), reg);

  for (int s : {1, 100}) {
    Mat x = rand_mat(rng, s, 900);
    Graph g;
    double y = g.val(pbt::build_forward(g, m, x, e, mask, nullptr))(0, 0);
    CHECK(std::isfinite(y));
  }

  Mat x101 = rand_mat(rng, 101, 900);
  Graph g;
  CHECK_THROWS_AS(pbt::build_forward(g, m, x101, e, mask, nullptr), pbt::InvalidN);
  Mat bad_width = rand_mat(rng, 2, 899);
  Graph g2;
  CHECK_THROWS_AS(pbt::build_forward(g2, m, bad_width, e, mask, nullptr),
                  pbt::DimensionMismatch);
  Mat bad_embed = rand_mat(rng, 1, c.d_embed + 1);
  Mat x_ok = rand_mat(rng, 2, 900);
  Graph g3;
  CHECK_THROWS_AS(pbt::build_forward(g3, m, x_ok, bad_embed, mask, nullptr),
                  pbt::DimensionMismatch);
}

TEST_CASE("label transforms round-trip") {
  CHECK(pbt::transform_label(1234.5, LabelTransform::identity) == 1234.5);
  CHECK(pbt::inverse_transform_label(-7.0, LabelTransform::identity) == -7.0);
  for (double y : {1.0, 42.0, 800.0, 2365.0}) {
    double t = pbt::transform_label(y, LabelTransform::log_scale);
    CHECK(std::abs(t - std::log(y)) < 1e-15);
    CHECK(std::abs(pbt::inverse_transform_label(t, LabelTransform::log_scale) - y) <
          1e-12 * y);
  }
  CHECK_THROWS_AS(pbt::transform_label(0.0, LabelTransform::log_scale), pbt::InvalidLabel);
  CHECK_THROWS_AS(pbt::transform_label(-3.0, LabelTransform::log_scale), pbt::InvalidLabel);
}

TEST_CASE("cell tensors and predictions are deterministic") {
  pbt::SynthConfig sc;
  sc.n_cells = 3;
  sc.l_min = 150;
  sc.l_max = 400;
  std::vector<pbt::RawCellRecord> raw = pbt::generate_synthetic(sc, 99);
  std::vector<pbt::CellSample> cells;
  for (const auto& r : raw) cells.push_back(pbt::preprocess_cell(r));

  std::vector<AgingCondition> conds;
  for (const auto& cs : cells) conds.push_back(cs.condition);
  ExpertRegistry reg = pbt::build_registry(conds, 1);
  ModelConfig mc = tiny_config();
  ModelState m = pbt::init_model(mc, reg, 61);
  pbt::EmbedFn embed = pbt::hash_embedder(mc.d_embed);

  pbt::CellTensor a = pbt::make_cell_tensor(cells[0], reg, embed);
  pbt::CellTensor b = pbt::make_cell_tensor(cells[0], reg, embed);
  REQUIRE(a.e.a.size() == b.e.a.size());
  for (size_t i = 0; i < a.e.a.size(); ++i) CHECK(a.e.a[i] == b.e.a[i]);
  REQUIRE(a.mask.bits == b.mask.bits);
  CHECK(a.cond_key == b.cond_key);
  CHECK(a.label == cells[0].label.cycles_to_threshold);

  double p1 = pbt::predict(m, a);
  double p2 = pbt::predict(m, b);
  CHECK(p1 == p2);
  CHECK(std::isfinite(p1));

  // Truncated prediction uses exactly the first rows.
  int s = a.s();
  REQUIRE(s > 1);
  double head_only = pbt::predict(m, a, 1);
  CHECK(std::isfinite(head_only));
  CHECK_THROWS_AS(pbt::predict(m, a, s + 1), pbt::InvalidN);

  pbt::CellSample empty = cells[0];
  empty.cycles.clear();
  CHECK_THROWS_AS(pbt::make_cell_tensor(empty, reg, embed), pbt::InvalidN);
}
