// hedl — command-line front end for the localization-editing laboratory.
// Every stage derives its randomness from --seed sub-streams, so staged
// invocations and the one-shot `experiment` agree bit-for-bit.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hedl/harness.hpp"
#include "hedl/report.hpp"
#include "hedl/seeding.hpp"

namespace fs = std::filesystem;
using namespace hedl;

namespace {

struct CommonOpts {
  std::string config;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "out";
  std::string weights;  // default <out>/weights.hedl
};

void add_common(CLI::App* sub, CommonOpts& o, bool with_weights = false) {
  sub->add_option("--config", o.config, "JSON config file (defaults used when omitted)");
  sub->add_option("--seed", o.seed, "master seed (overrides config)")
      ->each([&o](const std::string&) { o.seed_set = true; });
  sub->add_option("--out", o.out, "output directory");
  if (with_weights) {
    sub->add_option("--weights", o.weights, "model checkpoint (default <out>/weights.hedl)");
  }
}

ExperimentConfig resolve_config(const CommonOpts& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  if (o.seed_set) cfg.seed = o.seed;
  return cfg;
}

fs::path weights_path(const CommonOpts& o) {
  return o.weights.empty() ? fs::path(o.out) / "weights.hedl" : fs::path(o.weights);
}

void ensure_out(const std::string& out) {
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out + ": " + ec.message());
}

std::ofstream open_out_file(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot write " + p.string());
  return f;
}

void write_eval_rows(const fs::path& file, const std::vector<MetricRow>& rows) {
  auto f = open_out_file(file);
  f << "condition,seed,alpha_or_tau,truth,info,info_truth,kl,mc\n";
  for (const MetricRow& r : rows) {
    f << r.condition << "," << r.seed << "," << fmt_double(r.setting) << ","
      << fmt_double(r.truth) << "," << fmt_double(r.info) << "," << fmt_double(r.info_truth)
      << "," << fmt_double(r.kl) << "," << fmt_double(r.mc) << "\n";
  }
}

std::vector<HeadId> parse_head_list(const std::string& s, const ModelConfig& mc) {
  std::vector<HeadId> heads;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("--heads items must look like layer:head");
    try {
      heads.push_back({std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
    } catch (const std::exception&) {
      throw ConfigError("--heads: cannot parse '" + item + "'");
    }
  }
  if (heads.empty()) throw ConfigError("--heads: empty list");
  for (HeadId h : heads) {
    if (h.layer < 0 || h.layer >= mc.n_layers || h.head < 0 || h.head >= mc.n_heads) {
      throw ConfigError("--heads: head out of range");
    }
  }
  return heads;
}

int run_pretrain(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  PretrainResult pr = pretrain_base(cfg, task);
  pr.weights.save(fs::path(o.out) / "weights.hedl");
  {
    auto f = open_out_file(fs::path(o.out) / "pretrain_trace.csv");
    f << "epoch,loss\n";
    for (size_t i = 0; i < pr.epoch_losses.size(); ++i) {
      f << i << "," << fmt_double(pr.epoch_losses[i]) << "\n";
    }
  }
  std::cout << "pretrained " << cfg.pretrain.epochs << " epochs on " << task.corpus.size()
            << " sentences; final loss " << fmt_double(pr.epoch_losses.back())
            << ", predictable-token accuracy " << fmt_double(pr.train_accuracy) << "\n";
  std::cout << "weights -> " << (fs::path(o.out) / "weights.hedl").string() << "\n";
  return 0;
}

int run_gen_task(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  {
    auto f = open_out_file(fs::path(o.out) / "corpus.txt");
    for (const auto& sent : task.corpus) {
      for (size_t i = 0; i < sent.size(); ++i) f << (i ? " " : "") << sent[i];
      f << "\n";
    }
  }
  {
    auto f = open_out_file(fs::path(o.out) / "pairs.csv");
    f << "x,y_plus,y_minus\n";
    auto join = [](const std::vector<int>& v) {
      std::string s;
      for (size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
      return s;
    };
    for (const auto& p : task.pairs) {
      f << join(p.x) << "," << join(p.y_plus) << "," << join(p.y_minus) << "\n";
    }
  }
  {
    auto f = open_out_file(fs::path(o.out) / "split.csv");
    f << "split,subject,form\n";
    for (const auto& q : task.split.train) f << "train," << q.subject << "," << q.form << "\n";
    for (const auto& q : task.split.val) f << "val," << q.subject << "," << q.form << "\n";
    for (const auto& q : task.split.test) f << "test," << q.subject << "," << q.form << "\n";
  }
  std::cout << "task: " << task.corpus.size() << " corpus sentences, " << task.pairs.size()
            << " preference pairs, splits " << task.split.train.size() << "/"
            << task.split.val.size() << "/" << task.split.test.size() << " questions\n";
  return 0;
}

int run_probe(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  ModelWeights w = ModelWeights::load(weights_path(o));
  ProbeOutcome pr = run_probing(w, task, cfg.plan.k, sub_seed(cfg.seed, "iti/0"),
                                cfg.plan.normalize_direction);
  write_probe_report(fs::path(o.out) / "probe_report.csv", pr.probes, pr.interventions);
  std::cout << "localized heads:";
  for (HeadId h : pr.localized) std::cout << " " << h.layer << ":" << h.head;
  std::cout << "\nprobe report -> " << (fs::path(o.out) / "probe_report.csv").string() << "\n";
  return 0;
}

int run_iti_sweep_cmd(const CommonOpts& o) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  ModelWeights w = ModelWeights::load(weights_path(o));
  ProbeOutcome pr = run_probing(w, task, cfg.plan.k, sub_seed(cfg.seed, "iti/0"),
                                cfg.plan.normalize_direction);
  std::vector<MetricRow> rows;
  ConditionResult loc = run_iti_sweep(w, task, pr, pr.localized, cfg.plan, "iti_localized", 0);
  rows.push_back(loc.test);
  auto sets = sample_random_heads(cfg.model, cfg.plan.k, cfg.plan.n_random_sets,
                                  sub_seed(cfg.seed, "random-sets"));
  for (const auto& set : sets) {
    rows.push_back(run_iti_sweep(w, task, pr, set, cfg.plan, "iti_random", 0).test);
  }
  write_eval_rows(fs::path(o.out) / "eval_report.csv", rows);
  std::cout << "iti_localized: alpha=" << fmt_double(loc.test.setting)
            << " info_truth=" << fmt_double(loc.test.info_truth) << " over "
            << sets.size() << " random sets -> "
            << (fs::path(o.out) / "eval_report.csv").string() << "\n";
  return 0;
}

int run_ipo_train(const CommonOpts& o, const std::string& mask_kind,
                  const std::string& head_list, double tau, double lr_opt) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  ModelWeights w = ModelWeights::load(weights_path(o));

  std::vector<HeadId> heads;
  double lr = lr_opt;
  if (!head_list.empty()) {
    heads = parse_head_list(head_list, cfg.model);
    if (lr <= 0) lr = heads.size() == 1 ? cfg.plan.lr_single : cfg.plan.lr_masked;
  } else if (mask_kind == "full") {
    for (int l = 0; l < cfg.model.n_layers; ++l) {
      for (int h = 0; h < cfg.model.n_heads; ++h) heads.push_back({l, h});
    }
    if (lr <= 0) lr = cfg.plan.lr_full;
  } else if (mask_kind == "localized") {
    ProbeOutcome pr = run_probing(w, task, cfg.plan.k, sub_seed(cfg.seed, "iti/0"),
                                  cfg.plan.normalize_direction);
    heads = pr.localized;
    if (lr <= 0) lr = cfg.plan.lr_masked;
  } else {
    throw ConfigError("ipo-train: --mask must be full or localized (or use --heads)");
  }

  HeadMask mask(cfg.model.n_layers, cfg.model.n_heads, cfg.model.head_dim, heads);
  TrainConfig tc;
  tc.tau = tau;
  tc.epochs = cfg.plan.ipo_epochs;
  tc.batch_size = cfg.plan.ipo_batch_size;
  tc.lr = lr;
  tc.seed = sub_seed(cfg.seed, "ipo-train/shuffle");
  ReparamLoraHook adapter(mask, sub_seed(cfg.seed, "ipo-train/init"));
  TrainTrace trace = train_localized(w, task.pairs, tc, adapter);
  adapter.save(fs::path(o.out) / "adapter.hedl");
  write_training_trace(fs::path(o.out) / "training_trace.csv", trace);
  std::cout << "trained " << mask.size() << "-head adapter, tau=" << fmt_double(tau)
            << " lr=" << fmt_double(lr) << ", final epoch loss "
            << fmt_double(trace.epoch_losses.back()) << "\n";
  std::cout << "adapter -> " << (fs::path(o.out) / "adapter.hedl").string() << "\n";
  return 0;
}

int run_evaluate(const CommonOpts& o, const std::string& adapter_path,
                 const std::string& split, const std::string& name) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);
  ModelWeights w = ModelWeights::load(weights_path(o));

  std::optional<ReparamLoraHook> adapter;
  if (!adapter_path.empty()) adapter = ReparamLoraHook::load(adapter_path);
  const EditHook* editor = adapter ? &*adapter : nullptr;

  std::span<const Question> qs;
  std::span<const McQuestion> mc;
  if (split == "test") {
    qs = task.split.test;
    mc = task.mc_test;
  } else if (split == "val") {
    qs = task.split.val;
    mc = task.mc_val;
  } else {
    throw ConfigError("evaluate: --split must be val or test");
  }

  EvalScores s = evaluate_model(w, task.world, qs, mc, editor, cfg.plan);
  MetricRow row;
  row.condition = name;
  row.seed = cfg.seed;
  row.truth = s.truth;
  row.info = s.info;
  row.info_truth = s.info_truth;
  row.kl = s.kl;
  row.mc = s.mc;
  write_eval_rows(fs::path(o.out) / "eval_report.csv", {row});
  std::cout << name << " on " << split << ": truth=" << fmt_double(s.truth)
            << " info=" << fmt_double(s.info) << " info_truth=" << fmt_double(s.info_truth)
            << " kl=" << fmt_double(s.kl) << " mc=" << fmt_double(s.mc) << "\n";
  return 0;
}

int run_experiment(const CommonOpts& o, bool quiet) {
  ExperimentConfig cfg = resolve_config(o);
  ensure_out(o.out);
  Task task = make_task(cfg);

  ModelWeights w = [&] {
    if (!o.weights.empty()) return ModelWeights::load(o.weights);
    PretrainResult pr = pretrain_base(cfg, task);
    if (!quiet) {
      std::cout << "pretrained: predictable-token accuracy "
                << fmt_double(pr.train_accuracy) << "\n";
    }
    pr.weights.save(fs::path(o.out) / "weights.hedl");
    return pr.weights;
  }();

  ExperimentResult res = run_full_experiment(cfg, w, task, quiet ? nullptr : &std::cout);
  emit_report(o.out, cfg, res);
  write_probe_report(fs::path(o.out) / "probe_report.csv", res.probes, res.interventions);
  fs::create_directories(fs::path(o.out) / "adapters");
  for (const auto& [name, adapter] : res.adapters) {
    adapter.save(fs::path(o.out) / "adapters" / (name + ".hedl"));
  }
  std::cout << "experiment done in " << fmt_double(res.wall_seconds) << "s: "
            << res.rows.size() << " rows, welch localized-vs-random p="
            << fmt_double(res.iti_loc_vs_random.p) << "\n";
  std::cout << "reports -> " << o.out << "\n";
  return 0;
}

int run_report(const CommonOpts& o) {
  const fs::path file = fs::path(o.out) / "eval_report.csv";
  std::ifstream f(file);
  if (!f) throw IoError("cannot read " + file.string());
  std::string line;
  if (!std::getline(f, line) || line != "condition,seed,alpha_or_tau,truth,info,info_truth,kl,mc") {
    throw IoError("unexpected header in " + file.string());
  }
  struct Acc {
    std::vector<double> it, kl, mc;
  };
  std::map<std::string, Acc> by_cond;
  std::vector<std::string> order;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 8) throw IoError("malformed row in " + file.string());
    auto& a = by_cond[fields[0]];
    if (a.it.empty()) order.push_back(fields[0]);
    try {
      a.it.push_back(std::stod(fields[5]));
      a.kl.push_back(std::stod(fields[6]));
      a.mc.push_back(std::stod(fields[7]));
    } catch (const std::exception&) {
      throw IoError("malformed number in " + file.string());
    }
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  std::cout << "condition            n   mean_IT  median_IT  mean_KL  mean_MC\n";
  for (const auto& c : order) {
    const Acc& a = by_cond[c];
    const double n = static_cast<double>(a.it.size());
    double mit = 0, mkl = 0, mmc = 0;
    for (double x : a.it) mit += x;
    for (double x : a.kl) mkl += x;
    for (double x : a.mc) mmc += x;
    std::printf("%-20s %3zu  %7.4f   %7.4f  %7.4f  %7.4f\n", c.c_str(), a.it.size(),
                mit / n, median(a.it), mkl / n, mmc / n);
  }
  if (by_cond.count("iti_localized") && by_cond.count("iti_random")) {
    WelchResult wr =
        compare_conditions(by_cond["iti_localized"].it, by_cond["iti_random"].it);
    std::cout << "welch iti_localized vs iti_random: t=" << fmt_double(wr.t)
              << " df=" << fmt_double(wr.df) << " p=" << fmt_double(wr.p)
              << (wr.degenerate ? " (degenerate)" : "") << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hedl: probe-localized and optimal localized edits on a toy transformer"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string mask_kind = "localized", head_list, adapter_path, split = "test",
              eval_name = "evaluate";
  double tau = 0.1, lr = 0.0;
  bool quiet = false;

  add_common(app.add_subcommand("pretrain", "train the base model on the task corpus"), o);
  add_common(app.add_subcommand("gen-task", "emit the synthetic task artifacts"), o);
  add_common(app.add_subcommand("probe", "probe heads and write the probe report"), o, true);
  add_common(app.add_subcommand("iti-sweep", "alpha sweeps at localized and random heads"), o,
             true);
  auto* ipo = app.add_subcommand("ipo-train", "train one masked preference adapter");
  add_common(ipo, o, true);
  ipo->add_option("--mask", mask_kind, "full or localized");
  ipo->add_option("--heads", head_list, "explicit head list layer:head,layer:head,...");
  ipo->add_option("--tau", tau, "preference objective scale");
  ipo->add_option("--lr", lr, "peak learning rate (default by mask kind)");
  auto* ev = app.add_subcommand("evaluate", "score a model (optionally with an adapter)");
  add_common(ev, o, true);
  ev->add_option("--adapter", adapter_path, "adapter checkpoint to apply");
  ev->add_option("--split", split, "val or test");
  ev->add_option("--name", eval_name, "condition label for the report row");
  auto* ex = app.add_subcommand("experiment", "full pipeline: pretrain, probe, edit, report");
  add_common(ex, o, true);
  ex->add_flag("--quiet", quiet, "suppress progress lines");
  add_common(app.add_subcommand("report", "summarize an eval_report.csv"), o);

  try {
    app.parse(argc, argv);
    if (app.get_subcommand("pretrain")->parsed()) return run_pretrain(o);
    if (app.get_subcommand("gen-task")->parsed()) return run_gen_task(o);
    if (app.get_subcommand("probe")->parsed()) return run_probe(o);
    if (app.get_subcommand("iti-sweep")->parsed()) return run_iti_sweep_cmd(o);
    if (app.get_subcommand("ipo-train")->parsed()) {
      return run_ipo_train(o, mask_kind, head_list, tau, lr);
    }
    if (app.get_subcommand("evaluate")->parsed()) {
      return run_evaluate(o, adapter_path, split, eval_name);
    }
    if (app.get_subcommand("experiment")->parsed()) return run_experiment(o, quiet);
    if (app.get_subcommand("report")->parsed()) return run_report(o);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const TrainingError& e) {
    std::cerr << "training failure: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
