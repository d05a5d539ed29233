#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "hedl/harness.hpp"
#include "hedl/report.hpp"
#include "hedl/seeding.hpp"

using namespace hedl;

namespace {

ExperimentConfig smoke_config() {
  ExperimentConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.n_heads = 2;
  cfg.model.head_dim = 4;
  cfg.model.hidden_dim = 8;
  cfg.model.vocab_size = 32;
  cfg.model.context_len = 16;
  cfg.world.n_subjects = 10;
  cfg.world.n_values = 8;
  cfg.world.n_question_forms = 2;
  cfg.world.sentences_per_subject = 10;
  cfg.pretrain.epochs = 2;
  cfg.plan.k = 2;
  cfg.plan.n_random_sets = 3;
  cfg.plan.n_single_heads = 2;
  cfg.plan.n_iti_seeds = 2;
  cfg.plan.alpha_grid = {0, 2};
  cfg.plan.tau_grid = {0.3};
  cfg.plan.ipo_epochs = 2;
  cfg.seed = 1;
  return cfg;
}

// two-sided p for Student's t by direct numerical integration of the density;
// independent of the incomplete-beta path used by the library
double t_p_quadrature(double t, double df) {
  double norm = std::tgamma((df + 1) / 2) / (std::sqrt(df * std::acos(-1.0)) *
                                             std::tgamma(df / 2));
  auto pdf = [&](double x) {
    return norm * std::pow(1 + x * x / df, -(df + 1) / 2);
  };
  // Simpson over [|t|, |t| + 2000]: the power-law tail past the cutoff is
  // below 1e-9 even at df=3
  double lo = std::abs(t), hi = std::abs(t) + 2000.0;
  int n = 1000000;
  double h = (hi - lo) / n, acc = pdf(lo) + pdf(hi);
  for (int i = 1; i < n; ++i) acc += pdf(lo + i * h) * (i % 2 ? 4.0 : 2.0);
  return 2.0 * acc * h / 3.0;
}

}  // namespace

TEST_CASE("plan validation") {
  ExperimentPlan p;
  CHECK_NOTHROW(p.validate());
  p.k = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = ExperimentPlan{};
  p.alpha_grid.clear();
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = ExperimentPlan{};
  p.tau_grid = {0.1, -0.2};
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = ExperimentPlan{};
  p.n_random_sets = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("config parsing: defaults, overrides, rejection of unknown keys") {
  ExperimentConfig def = parse_config("{}");
  CHECK(def.model.n_layers == 4);
  CHECK(def.world.n_subjects == 40);
  CHECK(def.plan.k == 4);
  CHECK(def.seed == 0);

  ExperimentConfig cfg = parse_config(R"({
    "seed": 7,
    "model": {"n_layers": 2, "n_heads": 2, "head_dim": 4, "hidden_dim": 8},
    "world": {"n_subjects": 10},
    "plan": {"k": 2, "alpha_grid": [0, 5], "kl_direction": "pre_vs_post"}
  })");
  CHECK(cfg.seed == 7);
  CHECK(cfg.model.n_layers == 2);
  CHECK(cfg.world.n_subjects == 10);
  CHECK(cfg.world.n_values == 16);  // untouched keys keep defaults
  CHECK(cfg.plan.alpha_grid == std::vector<double>{0, 5});
  CHECK(cfg.plan.kl_direction == KlDirection::pre_vs_post);

  CHECK_THROWS_AS(parse_config(R"({"plam": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"plan": {"kk": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_config("not json"), ConfigError);
  CHECK_THROWS_AS(parse_config(R"({"plan": {"kl_direction": "sideways"}})"),
                  ConfigError);
  // values that parse but violate invariants still fail
  CHECK_THROWS_AS(parse_config(R"({"model": {"hidden_dim": 9}})"), ConfigError);
}

TEST_CASE("canonical config and hash are stable and discriminating") {
  ExperimentConfig a = smoke_config();
  ExperimentConfig b = smoke_config();
  CHECK(canonical_config(a) == canonical_config(b));
  CHECK(config_hash(a) == config_hash(b));
  b.plan.k = 1;
  CHECK(config_hash(a) != config_hash(b));

  // canonical text round-trips through the parser
  ExperimentConfig c = parse_config(canonical_config(a));
  CHECK(canonical_config(c) == canonical_config(a));
}

TEST_CASE("load_config maps missing files to io errors") {
  CHECK_THROWS_AS(load_config("/nonexistent/path/cfg.json"), IoError);
}

TEST_CASE("seeding primitives") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(sub_seed(1, "task") == sub_seed(1, "task"));
  CHECK(sub_seed(1, "task") != sub_seed(1, "model"));
  CHECK(sub_seed(1, "task") != sub_seed(2, "task"));
}

TEST_CASE("report float formatting is canonical") {
  CHECK(fmt_double(0.1) == "0.1");
  CHECK(fmt_double(25.0) == "25");
  CHECK(fmt_double(0.0) == "0");
  CHECK(fmt_double(1.0 / 3.0) == "0.3333333333");
}

TEST_CASE("random head sets: shape, bounds, determinism, distinctness") {
  ModelConfig mc;  // 4x4 heads
  auto sets = sample_random_heads(mc, 4, 16, 123);
  REQUIRE(sets.size() == 16);
  std::set<std::vector<std::pair<int, int>>> uniq;
  for (const auto& s : sets) {
    CHECK(s.size() == 4);
    std::set<std::pair<int, int>> in_set;
    for (const auto& h : s) {
      CHECK(h.layer >= 0);
      CHECK(h.layer < 4);
      CHECK(h.head >= 0);
      CHECK(h.head < 4);
      in_set.insert({h.layer, h.head});
    }
    CHECK(in_set.size() == 4);  // no duplicates within a set
    std::vector<std::pair<int, int>> key(in_set.begin(), in_set.end());
    uniq.insert(key);
  }
  CHECK(uniq.size() == 16);  // pairwise distinct while combinatorially possible

  auto again = sample_random_heads(mc, 4, 16, 123);
  for (size_t i = 0; i < sets.size(); ++i) CHECK(sets[i] == again[i]);

  auto all = sample_random_heads(mc, 16, 3, 9);
  for (const auto& s : all) CHECK(s.size() == 16);  // k = L*H: the full set

  CHECK_THROWS_AS(sample_random_heads(mc, 17, 1, 0), ConfigError);
  CHECK_THROWS_AS(sample_random_heads(mc, 0, 1, 0), ConfigError);
}

TEST_CASE("kahan reduction recovers increments naive summation drops") {
  // 2^20 additions of 2^-60 onto 1.0: every naive add rounds back to 1.0,
  // while the compensated sum lands on the exactly representable 1 + 2^-40
  std::vector<double> xs = {1.0};
  double tiny = std::ldexp(1.0, -60);
  for (int i = 0; i < (1 << 20); ++i) xs.push_back(tiny);
  double naive = 0.0;
  for (double x : xs) naive += x;
  double exact = 1.0 + std::ldexp(1.0, -40);
  CHECK(naive == 1.0);
  CHECK(kahan_sum(xs) == doctest::Approx(exact).epsilon(1e-15));
  CHECK(kahan_mean(xs) == doctest::Approx(exact / xs.size()).epsilon(1e-15));

  std::vector<double> ints = {3, -1, 7, 22, -9};
  CHECK(kahan_sum(ints) == 22.0);
  CHECK(kahan_mean(ints) == 4.4);
}

TEST_CASE("incomplete beta spot values") {
  CHECK(regularized_incomplete_beta(1, 1, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(regularized_incomplete_beta(1, 1, 0.25) == doctest::Approx(0.25).epsilon(1e-12));
  // I_x(2,2) = 3x^2 - 2x^3
  CHECK(regularized_incomplete_beta(2, 2, 0.25) ==
        doctest::Approx(0.15625).epsilon(1e-12));
  CHECK(regularized_incomplete_beta(2, 2, 0.0) == 0.0);
  CHECK(regularized_incomplete_beta(2, 2, 1.0) == 1.0);
}

TEST_CASE("welch t-test against an external statistical oracle") {
  std::vector<double> a = {27.5, 21.0, 19.0, 23.6, 17.0};
  std::vector<double> b = {27.1, 22.0, 20.8, 23.4, 23.4};
  WelchResult r = welch_t_test(a, b);
  // oracle values from an independent statistics package
  CHECK(std::abs(r.t - (-0.813168331778)) < 1e-6);
  CHECK(std::abs(r.df - 6.402517409391) < 1e-6);
  CHECK(std::abs(r.p - 0.445301508209) < 1e-6);
  CHECK(!r.degenerate);

  WelchResult same = welch_t_test(a, a);
  CHECK(same.p == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> z = {0, 0, 0, 0}, o = {1, 1, 1, 1};
  WelchResult deg = welch_t_test(z, o);
  CHECK(deg.degenerate);
  CHECK(deg.p == doctest::Approx(0.0));
  WelchResult deg_eq = welch_t_test(z, z);
  CHECK(deg_eq.degenerate);
  CHECK(deg_eq.p == doctest::Approx(1.0));
}

TEST_CASE("t distribution tail matches direct quadrature") {
  for (auto [t, df] : std::vector<std::pair<double, double>>{
           {0.5, 3.0}, {1.2, 6.4}, {2.8, 10.0}, {0.0, 5.0}}) {
    double lib = t_two_sided_p(t, df);
    double ref = t_p_quadrature(t, df);
    CHECK(std::abs(lib - ref) < 1e-6);
  }
}

TEST_CASE("compare_conditions is the welch test") {
  std::vector<double> a = {0.1, 0.3, 0.2, 0.5};
  std::vector<double> b = {0.6, 0.7, 0.4, 0.9};
  WelchResult r1 = compare_conditions(a, b);
  WelchResult r2 = welch_t_test(a, b);
  CHECK(r1.t == r2.t);
  CHECK(r1.p == r2.p);
}

TEST_CASE("stage helpers are deterministic in the master seed") {
  ExperimentConfig cfg = smoke_config();
  Task t1 = make_task(cfg);
  Task t2 = make_task(cfg);
  CHECK(t1.corpus == t2.corpus);
  CHECK(t1.world.true_value == t2.world.true_value);

  cfg.seed = 2;
  Task t3 = make_task(cfg);
  CHECK(t1.corpus != t3.corpus);
}

TEST_CASE("probing produces a probe and intervention per head") {
  ExperimentConfig cfg = smoke_config();
  Task task = make_task(cfg);
  ModelWeights w = ModelWeights::init(cfg.model);  // untrained is fine here
  ProbeOutcome out = run_probing(w, task, cfg.plan.k, 3, true);
  CHECK(out.probes.size() == 4);  // 2x2 heads, layer-major
  CHECK(out.interventions.size() == 4);
  for (size_t i = 0; i < out.probes.size(); ++i) {
    CHECK(out.probes[i].head == out.interventions[i].head);
    int layer = static_cast<int>(i) / 2, head = static_cast<int>(i) % 2;
    CHECK(out.probes[i].head == HeadId{layer, head});
    CHECK(out.probes[i].val_accuracy >= 0.0);
    CHECK(out.probes[i].val_accuracy <= 1.0);
  }
  CHECK(out.localized.size() == 2);
  CHECK(out.localized == rank_heads(out.probes, 2));
}

TEST_CASE("iti sweep with a zero-only grid reproduces the baseline") {
  ExperimentConfig cfg = smoke_config();
  Task task = make_task(cfg);
  PretrainResult pre = pretrain_base(cfg, task);
  ProbeOutcome probing = run_probing(pre.weights, task, cfg.plan.k, 0, true);

  ExperimentPlan plan = cfg.plan;
  plan.alpha_grid = {0.0};
  ConditionResult r = run_iti_sweep(pre.weights, task, probing, probing.localized, plan,
                                    "iti_localized", 0);
  EvalScores base = evaluate_model(pre.weights, task.world, task.split.test,
                                   task.mc_test, nullptr, plan);
  CHECK(r.test.setting == 0.0);
  CHECK(r.test.info_truth == base.info_truth);
  CHECK(r.test.kl == 0.0);
  CHECK(r.curve.size() == 1);
}

TEST_CASE("empty results emit a header-only eval report") {
  ExperimentConfig cfg = smoke_config();
  ExperimentResult res;
  res.cfg_hash = config_hash(cfg);
  auto dir = std::filesystem::temp_directory_path() / "hedl_empty_report";
  std::filesystem::remove_all(dir);
  emit_report(dir, cfg, res);
  std::ifstream in(dir / "eval_report.csv");
  REQUIRE(in.good());
  std::string line;
  std::getline(in, line);
  CHECK(line == "condition,seed,alpha_or_tau,truth,info,info_truth,kl,mc");
  CHECK(!std::getline(in, line));  // nothing after the header
  std::filesystem::remove_all(dir);
}
