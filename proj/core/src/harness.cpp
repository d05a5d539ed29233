#include "hedl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "hedl/report.hpp"
#include "hedl/seeding.hpp"
#include "json.hpp"

namespace hedl {

namespace {

using nlohmann::json;

json take_section(json& o, const char* key) {
  auto it = o.find(key);
  if (it == o.end()) return json::object();
  if (!it->is_object()) {
    throw ConfigError(std::string("config: '") + key + "' must be an object");
  }
  json v = *it;
  o.erase(it);
  return v;
}

template <class T>
void take_into(json& o, const char* key, T& slot) {
  auto it = o.find(key);
  if (it == o.end()) return;
  try {
    slot = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
  o.erase(it);
}

void expect_drained(const json& o, const char* where) {
  if (!o.empty()) {
    throw ConfigError(std::string("config: unknown key '") + o.begin().key() + "' in " +
                      where);
  }
}

std::string hex_u64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string head_str(HeadId h) {
  return std::to_string(h.layer) + ":" + std::to_string(h.head);
}

std::string indexed_name(const std::string& base, int i) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "_%02d", i);
  return base + buf;
}

Tensor take_rows(const Tensor& m, const std::vector<int>& rows) {
  const int64_t d = m.dim(1);
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<size_t>(d));
  for (int r : rows) {
    for (int64_t c = 0; c < d; ++c) out.push_back(m.at(r, c));
  }
  return Tensor::from_vector({static_cast<int64_t>(rows.size()), d}, std::move(out));
}

MetricRow to_row(std::string condition, uint64_t seed, double setting, const EvalScores& s) {
  MetricRow r;
  r.condition = std::move(condition);
  r.seed = seed;
  r.setting = setting;
  r.truth = s.truth;
  r.info = s.info;
  r.info_truth = s.info_truth;
  r.kl = s.kl;
  r.mc = s.mc;
  return r;
}

std::ofstream open_report_file(const std::filesystem::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

void log_progress(std::ostream* out, const std::string& line) {
  if (out) *out << line << "\n" << std::flush;
}

}  // namespace

void ExperimentPlan::validate() const {
  if (k < 1) throw ConfigError("plan: k must be >= 1");
  if (n_random_sets < 1) throw ConfigError("plan: n_random_sets must be >= 1");
  if (n_single_heads < 0) throw ConfigError("plan: n_single_heads must be >= 0");
  if (n_iti_seeds < 1) throw ConfigError("plan: n_iti_seeds must be >= 1");
  if (alpha_grid.empty()) throw ConfigError("plan: alpha_grid must be non-empty");
  if (tau_grid.empty()) throw ConfigError("plan: tau_grid must be non-empty");
  for (double a : alpha_grid) {
    if (!std::isfinite(a)) throw ConfigError("plan: alpha_grid values must be finite");
  }
  for (double t : tau_grid) {
    if (!(t > 0.0) || !std::isfinite(t)) throw ConfigError("plan: tau_grid values must be > 0");
  }
  if (!(lr_full > 0.0) || !(lr_masked > 0.0) || !(lr_single > 0.0)) {
    throw ConfigError("plan: learning rates must be > 0");
  }
  if (ipo_epochs < 1) throw ConfigError("plan: ipo_epochs must be >= 1");
  if (ipo_batch_size < 1) throw ConfigError("plan: ipo_batch_size must be >= 1");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");

  ExperimentConfig cfg;

  json jm = take_section(root, "model");
  take_into(jm, "n_layers", cfg.model.n_layers);
  take_into(jm, "n_heads", cfg.model.n_heads);
  take_into(jm, "head_dim", cfg.model.head_dim);
  take_into(jm, "hidden_dim", cfg.model.hidden_dim);
  take_into(jm, "vocab_size", cfg.model.vocab_size);
  take_into(jm, "context_len", cfg.model.context_len);
  take_into(jm, "mlp_ratio", cfg.model.mlp_ratio);
  take_into(jm, "tied_unembed", cfg.model.tied_unembed);
  expect_drained(jm, "model");

  json jw = take_section(root, "world");
  take_into(jw, "n_subjects", cfg.world.n_subjects);
  take_into(jw, "n_values", cfg.world.n_values);
  take_into(jw, "n_question_forms", cfg.world.n_question_forms);
  take_into(jw, "sentences_per_subject", cfg.world.sentences_per_subject);
  take_into(jw, "p_mis", cfg.world.p_mis);
  take_into(jw, "misconception_fraction", cfg.world.misconception_fraction);
  expect_drained(jw, "world");

  json jp = take_section(root, "pretrain");
  take_into(jp, "epochs", cfg.pretrain.epochs);
  take_into(jp, "batch_size", cfg.pretrain.batch_size);
  take_into(jp, "lr", cfg.pretrain.lr);
  expect_drained(jp, "pretrain");

  json jl = take_section(root, "plan");
  take_into(jl, "k", cfg.plan.k);
  take_into(jl, "n_random_sets", cfg.plan.n_random_sets);
  take_into(jl, "n_single_heads", cfg.plan.n_single_heads);
  take_into(jl, "n_iti_seeds", cfg.plan.n_iti_seeds);
  take_into(jl, "alpha_grid", cfg.plan.alpha_grid);
  take_into(jl, "tau_grid", cfg.plan.tau_grid);
  take_into(jl, "lr_full", cfg.plan.lr_full);
  take_into(jl, "lr_masked", cfg.plan.lr_masked);
  take_into(jl, "lr_single", cfg.plan.lr_single);
  take_into(jl, "ipo_epochs", cfg.plan.ipo_epochs);
  take_into(jl, "ipo_batch_size", cfg.plan.ipo_batch_size);
  take_into(jl, "normalize_direction", cfg.plan.normalize_direction);
  take_into(jl, "edit_prompt_positions", cfg.plan.edit_prompt_positions);
  std::string kd = cfg.plan.kl_direction == KlDirection::post_vs_pre ? "post_vs_pre"
                                                                     : "pre_vs_post";
  take_into(jl, "kl_direction", kd);
  if (kd == "post_vs_pre") {
    cfg.plan.kl_direction = KlDirection::post_vs_pre;
  } else if (kd == "pre_vs_post") {
    cfg.plan.kl_direction = KlDirection::pre_vs_post;
  } else {
    throw ConfigError("config: kl_direction must be post_vs_pre or pre_vs_post");
  }
  expect_drained(jl, "plan");

  take_into(root, "seed", cfg.seed);
  expect_drained(root, "config");

  cfg.model.validate();
  cfg.world.validate();
  cfg.plan.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) throw IoError("cannot read config " + file.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string canonical_config(const ExperimentConfig& cfg) {
  json j;
  j["model"] = {{"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"head_dim", cfg.model.head_dim},
                {"hidden_dim", cfg.model.hidden_dim},
                {"vocab_size", cfg.model.vocab_size},
                {"context_len", cfg.model.context_len},
                {"mlp_ratio", cfg.model.mlp_ratio},
                {"tied_unembed", cfg.model.tied_unembed}};
  j["world"] = {{"n_subjects", cfg.world.n_subjects},
                {"n_values", cfg.world.n_values},
                {"n_question_forms", cfg.world.n_question_forms},
                {"sentences_per_subject", cfg.world.sentences_per_subject},
                {"p_mis", cfg.world.p_mis},
                {"misconception_fraction", cfg.world.misconception_fraction}};
  j["pretrain"] = {{"epochs", cfg.pretrain.epochs},
                   {"batch_size", cfg.pretrain.batch_size},
                   {"lr", cfg.pretrain.lr}};
  j["plan"] = {{"k", cfg.plan.k},
               {"n_random_sets", cfg.plan.n_random_sets},
               {"n_single_heads", cfg.plan.n_single_heads},
               {"n_iti_seeds", cfg.plan.n_iti_seeds},
               {"alpha_grid", cfg.plan.alpha_grid},
               {"tau_grid", cfg.plan.tau_grid},
               {"lr_full", cfg.plan.lr_full},
               {"lr_masked", cfg.plan.lr_masked},
               {"lr_single", cfg.plan.lr_single},
               {"ipo_epochs", cfg.plan.ipo_epochs},
               {"ipo_batch_size", cfg.plan.ipo_batch_size},
               {"normalize_direction", cfg.plan.normalize_direction},
               {"edit_prompt_positions", cfg.plan.edit_prompt_positions},
               {"kl_direction", cfg.plan.kl_direction == KlDirection::post_vs_pre
                                    ? "post_vs_pre"
                                    : "pre_vs_post"}};
  j["seed"] = cfg.seed;
  return j.dump();  // object keys are stored sorted, so this is canonical
}

uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(canonical_config(cfg)); }

Task make_task(const ExperimentConfig& cfg) {
  return generate_task(cfg.world, sub_seed(cfg.seed, "task"));
}

PretrainResult pretrain_base(const ExperimentConfig& cfg, const Task& task) {
  ModelConfig mc = cfg.model;
  mc.seed = sub_seed(cfg.seed, "model");
  PretrainOptions po = cfg.pretrain;
  po.seed = sub_seed(cfg.seed, "pretrain");
  return pretrain(mc, task.corpus, po);
}

std::vector<std::vector<HeadId>> sample_random_heads(const ModelConfig& cfg, int k,
                                                     int n_repeats, uint64_t seed) {
  cfg.validate();
  const int total = cfg.n_layers * cfg.n_heads;
  if (k < 1 || k > total) throw ConfigError("sample_random_heads: k out of range");
  if (n_repeats < 0) throw ConfigError("sample_random_heads: n_repeats must be >= 0");

  // C(total, k), saturating well above any sane repeat count
  double log_comb = 0.0;
  for (int i = 0; i < k; ++i) {
    log_comb += std::log2(static_cast<double>(total - i)) -
                std::log2(static_cast<double>(i + 1));
  }
  const bool distinct_possible =
      log_comb >= 63.0 || static_cast<double>(n_repeats) <= std::exp2(log_comb);

  std::mt19937_64 rng(seed);
  std::vector<int> idx(static_cast<size_t>(total));
  std::set<std::vector<int>> seen;
  std::vector<std::vector<HeadId>> out;
  out.reserve(static_cast<size_t>(n_repeats));
  while (static_cast<int>(out.size()) < n_repeats) {
    std::iota(idx.begin(), idx.end(), 0);
    for (int j = 0; j < k; ++j) {
      std::uniform_int_distribution<int> pick(j, total - 1);
      std::swap(idx[static_cast<size_t>(j)], idx[static_cast<size_t>(pick(rng))]);
    }
    std::vector<int> sig(idx.begin(), idx.begin() + k);
    std::sort(sig.begin(), sig.end());
    if (distinct_possible && !seen.insert(sig).second) continue;
    std::vector<HeadId> set;
    set.reserve(static_cast<size_t>(k));
    for (int i : sig) set.push_back({i / cfg.n_heads, i % cfg.n_heads});
    out.push_back(std::move(set));
  }
  return out;
}

ProbeOutcome run_probing(const ModelWeights& w, const Task& task, int k, uint64_t seed,
                         bool normalize_direction) {
  const World& world = task.world;
  const auto& train = task.split.train;
  if (train.empty()) throw ContractError("run_probing: empty train split");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<size_t> pick(0, train.size() - 1);
  auto random_other_prompt = [&](size_t i) {
    size_t j = i;
    while (train.size() > 1 && j == i) j = pick(rng);
    return question_prompt(world, train[j]);
  };

  std::vector<ProbeExample> examples;
  examples.reserve(train.size() * 2);
  for (size_t i = 0; i < train.size(); ++i) {
    const Question& q = train[i];
    // answers carry their terminator so the template matches the corpus
    // document shape "Q s A v EOS Q s' A ..."
    ProbeExample pos;
    pos.x = question_prompt(world, q);
    pos.y = {world.true_value[static_cast<size_t>(q.subject)], world.eos};
    pos.x_random = random_other_prompt(i);
    pos.label = 1;
    examples.push_back(std::move(pos));

    ProbeExample neg;
    neg.x = question_prompt(world, q);
    neg.y = {world.dist_value[static_cast<size_t>(q.subject)], world.eos};
    neg.x_random = random_other_prompt(i);
    neg.label = 0;
    examples.push_back(std::move(neg));
  }

  LabeledActivations acts = collect_activations(w, examples);
  std::vector<int> pos_rows, neg_rows;
  for (size_t i = 0; i < acts.labels.size(); ++i) {
    (acts.labels[i] == 1 ? pos_rows : neg_rows).push_back(static_cast<int>(i));
  }

  ProbeOutcome out;
  for (int l = 0; l < w.config.n_layers; ++l) {
    for (int h = 0; h < w.config.n_heads; ++h) {
      const HeadId id{l, h};
      const Tensor& a = acts.acts[static_cast<size_t>(l)][static_cast<size_t>(h)];
      out.probes.push_back(train_probe(a, acts.labels, id));
      Tensor u = mass_mean_shift(take_rows(a, pos_rows), take_rows(a, neg_rows));
      double sigma = direction_sigma(a, u);
      out.interventions.push_back(build_intervention(id, u, sigma, normalize_direction));
    }
  }
  out.localized = rank_heads(out.probes, k);
  return out;
}

EvalScores evaluate_model(const ModelWeights& w, const World& world,
                          std::span<const Question> questions,
                          std::span<const McQuestion> mc, const EditHook* editor,
                          const ExperimentPlan& plan) {
  std::vector<JudgeVerdict> verdicts;
  std::vector<std::vector<int>> prompts;
  verdicts.reserve(questions.size());
  prompts.reserve(questions.size());
  GenerateOptions gopt;
  gopt.max_new = 4;
  gopt.eos_token = world.eos;
  gopt.edit_prompt_positions = plan.edit_prompt_positions;
  for (const Question& q : questions) {
    std::vector<int> prompt = question_prompt(world, q);
    std::vector<int> toks = generate(w, prompt, gopt, editor);
    std::vector<int> answer(toks.begin() + static_cast<int64_t>(prompt.size()), toks.end());
    verdicts.push_back(judge(answer, q.subject, world));
    prompts.push_back(std::move(prompt));
  }
  JudgeScores agg = aggregate_scores(verdicts);
  EvalScores s;
  s.truth = agg.truth;
  s.info = agg.info;
  s.info_truth = agg.info_truth();
  s.kl = kl_pre_post(w, editor, prompts, plan.kl_direction);
  s.mc = mc_score(w, editor, mc);
  return s;
}

double validation_info_truth(const ModelWeights& w, const World& world,
                             std::span<const Question> questions, const EditHook* editor,
                             const ExperimentPlan& plan) {
  std::vector<JudgeVerdict> verdicts;
  verdicts.reserve(questions.size());
  GenerateOptions gopt;
  gopt.max_new = 4;
  gopt.eos_token = world.eos;
  gopt.edit_prompt_positions = plan.edit_prompt_positions;
  for (const Question& q : questions) {
    std::vector<int> prompt = question_prompt(world, q);
    std::vector<int> toks = generate(w, prompt, gopt, editor);
    std::vector<int> answer(toks.begin() + static_cast<int64_t>(prompt.size()), toks.end());
    verdicts.push_back(judge(answer, q.subject, world));
  }
  JudgeScores agg = aggregate_scores(verdicts);
  return agg.info_truth();
}

ConditionResult run_iti_sweep(const ModelWeights& w, const Task& task,
                              const ProbeOutcome& probing, const std::vector<HeadId>& heads,
                              const ExperimentPlan& plan, const std::string& condition,
                              uint64_t seed) {
  if (heads.empty()) throw ContractError("run_iti_sweep: no heads");
  std::vector<InterventionVector> selected;
  selected.reserve(heads.size());
  for (HeadId h : heads) {
    const size_t i =
        static_cast<size_t>(h.layer) * static_cast<size_t>(w.config.n_heads) +
        static_cast<size_t>(h.head);
    if (i >= probing.interventions.size() || !(probing.interventions[i].head == h)) {
      throw ContractError("run_iti_sweep: probing outcome does not cover head " +
                          head_str(h));
    }
    selected.push_back(probing.interventions[i]);
  }

  ConditionResult out;
  double best_val = -1.0;
  double best_alpha = plan.alpha_grid.front();
  for (double alpha : plan.alpha_grid) {
    ItiHook hook = ItiHook::build(selected, w.config, alpha);
    double v = validation_info_truth(w, task.world, task.split.val, &hook, plan);
    out.curve.push_back({alpha, v});
    if (v > best_val) {  // ties keep the earliest (weakest) grid point
      best_val = v;
      best_alpha = alpha;
    }
  }
  ItiHook best = ItiHook::build(selected, w.config, best_alpha);
  EvalScores s =
      evaluate_model(w, task.world, task.split.test, task.mc_test, &best, plan);
  out.test = to_row(condition, seed, best_alpha, s);
  return out;
}

IpoConditionResult run_ipo_condition(const ModelWeights& w, const Task& task,
                                     const HeadMask& mask, double lr,
                                     const ExperimentPlan& plan, const std::string& condition,
                                     uint64_t seed, const RefLogprobs& refs) {
  IpoConditionResult out;
  double best_val = -1.0;
  double best_tau = 0.0;
  for (double tau : plan.tau_grid) {
    TrainConfig tc;
    tc.tau = tau;
    tc.epochs = plan.ipo_epochs;
    tc.batch_size = plan.ipo_batch_size;
    tc.lr = lr;
    tc.seed = sub_seed(seed, condition + "/shuffle/" + fmt_double(tau));
    ReparamLoraHook adapter(mask, sub_seed(seed, condition + "/init/" + fmt_double(tau)));
    try {
      train_localized(w, task.pairs, tc, adapter, &refs);
    } catch (const TrainingError& e) {
      out.failures.push_back(condition + " tau=" + fmt_double(tau) + ": " + e.what());
      continue;
    }
    double v = validation_info_truth(w, task.world, task.split.val, &adapter, plan);
    out.result.curve.push_back({tau, v});
    if (v > best_val) {
      best_val = v;
      best_tau = tau;
      out.best_adapter = std::move(adapter);
    }
  }
  if (!out.best_adapter) {
    out.failed = true;
    return out;
  }
  EvalScores s = evaluate_model(w, task.world, task.split.test, task.mc_test,
                                &*out.best_adapter, plan);
  out.result.test = to_row(condition, seed, best_tau, s);
  return out;
}

WelchResult compare_conditions(std::span<const double> results_a,
                               std::span<const double> results_b) {
  return welch_t_test(results_a, results_b);
}

ExperimentResult run_full_experiment(const ExperimentConfig& cfg, const ModelWeights& w,
                                     const Task& task, std::ostream* progress) {
  cfg.model.validate();
  cfg.plan.validate();
  const ExperimentPlan& plan = cfg.plan;
  const World& world = task.world;
  const auto t0 = std::chrono::steady_clock::now();

  ExperimentResult res;
  res.cfg_hash = config_hash(cfg);

  EvalScores base = evaluate_model(w, world, task.split.test, task.mc_test, nullptr, plan);
  res.base_row = to_row("base", cfg.seed, 0.0, base);
  res.rows.push_back(res.base_row);
  log_progress(progress, "base: info_truth=" + fmt_double(base.info_truth));

  std::vector<Question> mis_test;
  for (const Question& q : task.split.test) {
    if (world.misconception[static_cast<size_t>(q.subject)]) mis_test.push_back(q);
  }
  res.base_mis_info_truth = validation_info_truth(w, world, mis_test, nullptr, plan);

  // one draw of random head sets, shared verbatim by the ITI and IPO arms
  const auto sets =
      sample_random_heads(cfg.model, plan.k, plan.n_random_sets, sub_seed(cfg.seed, "random-sets"));
  {
    std::string ser;
    for (const auto& set : sets) {
      for (HeadId h : set) ser += head_str(h) + ",";
      ser += ";";
    }
    res.random_sets_hash = fnv1a(ser);
  }
  const auto singles = plan.n_single_heads > 0
                           ? sample_random_heads(cfg.model, 1, plan.n_single_heads,
                                                 sub_seed(cfg.seed, "single-heads"))
                           : std::vector<std::vector<HeadId>>{};

  std::vector<double> loc_scores, rand_scores;
  for (int s = 0; s < plan.n_iti_seeds; ++s) {
    const uint64_t ps = sub_seed(cfg.seed, "iti/" + std::to_string(s));
    ProbeOutcome probing = run_probing(w, task, plan.k, ps, plan.normalize_direction);
    ConditionResult loc = run_iti_sweep(w, task, probing, probing.localized, plan,
                                        "iti_localized", static_cast<uint64_t>(s));
    res.rows.push_back(loc.test);
    loc_scores.push_back(loc.test.info_truth);
    if (s == 0) {
      res.iti_loc_curve = loc.curve;
      res.localized = probing.localized;
      res.probes = probing.probes;
      res.interventions = probing.interventions;
    }
    for (const auto& set : sets) {
      ConditionResult rr =
          run_iti_sweep(w, task, probing, set, plan, "iti_random", static_cast<uint64_t>(s));
      res.rows.push_back(rr.test);
      rand_scores.push_back(rr.test.info_truth);
    }
    log_progress(progress, "iti seed " + std::to_string(s) +
                               ": localized alpha=" + fmt_double(loc.test.setting) +
                               " info_truth=" + fmt_double(loc.test.info_truth));
  }
  res.iti_loc_vs_random = compare_conditions(loc_scores, rand_scores);

  const RefLogprobs refs = cache_reference_logprobs(w, task.pairs);
  const auto& mc = cfg.model;
  auto run_ipo = [&](const std::string& name, const std::vector<HeadId>& heads, double lr,
                     uint64_t row_seed) -> IpoConditionResult {
    HeadMask mask(mc.n_layers, mc.n_heads, mc.head_dim, heads);
    IpoConditionResult r = run_ipo_condition(w, task, mask, lr, plan, name,
                                             sub_seed(cfg.seed, "ipo/" + name), refs);
    if (r.failed) {
      res.failed_conditions.push_back(name);
      for (const auto& f : r.failures) res.failed_conditions.back() += " [" + f + "]";
      log_progress(progress, name + ": all taus failed");
      return r;
    }
    r.result.test.seed = row_seed;
    res.rows.push_back(r.result.test);
    res.adapters.emplace_back(name, std::move(*r.best_adapter));
    log_progress(progress, name + ": tau=" + fmt_double(r.result.test.setting) +
                               " info_truth=" + fmt_double(r.result.test.info_truth));
    return r;
  };

  std::vector<HeadId> all_heads;
  for (int l = 0; l < mc.n_layers; ++l) {
    for (int h = 0; h < mc.n_heads; ++h) all_heads.push_back({l, h});
  }
  run_ipo("ipo_full", all_heads, plan.lr_full, 0);
  run_ipo("ipo_localized", res.localized, plan.lr_masked, 0);
  for (size_t i = 0; i < sets.size(); ++i) {
    auto r = run_ipo(indexed_name("ipo_random", static_cast<int>(i)), sets[i],
                     plan.lr_masked, static_cast<uint64_t>(i));
    if (!r.failed) res.rows.back().condition = "ipo_random";
  }
  for (size_t i = 0; i < singles.size(); ++i) {
    auto r = run_ipo(indexed_name("ipo_single", static_cast<int>(i)), singles[i],
                     plan.lr_single, static_cast<uint64_t>(i));
    if (!r.failed) {
      res.rows.back().condition = "ipo_single";
      res.single_head_scores.emplace_back(singles[i][0], r.result.test.info_truth);
    }
  }

  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

void emit_report(const std::filesystem::path& out_dir, const ExperimentConfig& cfg,
                 const ExperimentResult& res) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  {
    auto f = open_report_file(out_dir / "eval_report.csv");
    f << "condition,seed,alpha_or_tau,truth,info,info_truth,kl,mc\n";
    for (const MetricRow& r : res.rows) {
      f << r.condition << "," << r.seed << "," << fmt_double(r.setting) << ","
        << fmt_double(r.truth) << "," << fmt_double(r.info) << ","
        << fmt_double(r.info_truth) << "," << fmt_double(r.kl) << "," << fmt_double(r.mc)
        << "\n";
    }
  }
  {
    auto f = open_report_file(out_dir / "config_echo.json");
    f << canonical_config(cfg) << "\n";
  }
  {
    auto f = open_report_file(out_dir / "run_manifest.txt");
    f << "config_hash: " << hex_u64(res.cfg_hash) << "\n";
    f << "master_seed: " << cfg.seed << "\n";
    f << "localized_heads:";
    for (HeadId h : res.localized) f << " " << head_str(h);
    f << "\n";
    f << "random_sets_hash: " << hex_u64(res.random_sets_hash) << "\n";
    f << "iti_seeds: " << cfg.plan.n_iti_seeds << "\n";
    f << "welch_t: " << fmt_double(res.iti_loc_vs_random.t) << "\n";
    f << "welch_df: " << fmt_double(res.iti_loc_vs_random.df) << "\n";
    f << "welch_p: " << fmt_double(res.iti_loc_vs_random.p) << "\n";
    f << "welch_degenerate: " << (res.iti_loc_vs_random.degenerate ? 1 : 0) << "\n";
    f << "base_mis_info_truth: " << fmt_double(res.base_mis_info_truth) << "\n";
    f << "failed_conditions:";
    if (res.failed_conditions.empty()) {
      f << " (none)";
    } else {
      for (const auto& c : res.failed_conditions) f << " " << c;
    }
    f << "\n";
    f << "rows: " << res.rows.size() << "\n";
  }
  {
    auto f = open_report_file(out_dir / "plotdata_iti_curve.csv");
    f << "alpha,val_info_truth\n";
    for (const SweepPoint& p : res.iti_loc_curve) {
      f << fmt_double(p.setting) << "," << fmt_double(p.val_info_truth) << "\n";
    }
  }
  {
    auto f = open_report_file(out_dir / "plotdata_single_heads.csv");
    f << "layer,head,info_truth\n";
    for (const auto& [h, it] : res.single_head_scores) {
      f << h.layer << "," << h.head << "," << fmt_double(it) << "\n";
    }
  }
  {
    auto f = open_report_file(out_dir / "plotdata_truth_info.csv");
    f << "condition,seed,truth,info\n";
    for (const MetricRow& r : res.rows) {
      f << r.condition << "," << r.seed << "," << fmt_double(r.truth) << ","
        << fmt_double(r.info) << "\n";
    }
  }
  {
    auto f = open_report_file(out_dir / "plotdata_kl_mc.csv");
    f << "condition,seed,kl,mc\n";
    for (const MetricRow& r : res.rows) {
      f << r.condition << "," << r.seed << "," << fmt_double(r.kl) << ","
        << fmt_double(r.mc) << "\n";
    }
  }
}

}  // namespace hedl
