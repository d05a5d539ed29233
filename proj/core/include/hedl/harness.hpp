#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hedl/align.hpp"
#include "hedl/edits.hpp"
#include "hedl/evalsuite.hpp"
#include "hedl/localize.hpp"
#include "hedl/stats.hpp"

namespace hedl {

struct ExperimentPlan {
  int k = 4;               // localized head count (16-of-1024 analogue)
  int n_random_sets = 16;  // reused across ITI and IPO conditions
  int n_single_heads = 8;
  int n_iti_seeds = 8;
  std::vector<double> alpha_grid = {0, 1, 2, 5, 10, 15, 20};
  std::vector<double> tau_grid = {0.1, 0.2, 0.3, 0.4, 0.5};
  // source recipe: 1e-4 full / 5e-4 masked / 2e-3 single at 3280 steps on
  // 6560 pairs; desk-scale values rescaled for the tiny pair set (see README)
  double lr_full = 1e-3;
  double lr_masked = 2e-2;
  double lr_single = 2e-2;
  int ipo_epochs = 150;
  int ipo_batch_size = 4;
  bool normalize_direction = true;
  bool edit_prompt_positions = true;  // apply residual edits at prompt tokens too
  KlDirection kl_direction = KlDirection::post_vs_pre;

  void validate() const;  // ConfigError
};

struct ExperimentConfig {
  ModelConfig model;
  WorldConfig world;
  PretrainOptions pretrain;
  ExperimentPlan plan;
  uint64_t seed = 0;
};

/// Structured-text (JSON) config. Missing keys keep desk defaults; unknown
/// keys are config errors so typos cannot silently revert to defaults.
ExperimentConfig load_config(const std::filesystem::path& file);
ExperimentConfig parse_config(const std::string& json_text);
std::string canonical_config(const ExperimentConfig& cfg);  // sorted-key JSON
uint64_t config_hash(const ExperimentConfig& cfg);

/// Pipeline stages share one seed convention: every stage draws from its own
/// sub-stream of cfg.seed, so staged CLI runs and the one-shot experiment
/// produce identical artifacts.
Task make_task(const ExperimentConfig& cfg);
PretrainResult pretrain_base(const ExperimentConfig& cfg, const Task& task);

/// n_repeats head sets of size k, uniform without replacement inside each
/// set; sets are pairwise distinct whenever combinatorially possible.
std::vector<std::vector<HeadId>> sample_random_heads(const ModelConfig& cfg, int k,
                                                     int n_repeats, uint64_t seed);

struct MetricRow {
  std::string condition;
  uint64_t seed = 0;
  double setting = 0.0;  // selected alpha (ITI) or tau (IPO)
  double truth = 0.0, info = 0.0, info_truth = 0.0, kl = 0.0, mc = 0.0;
};

struct ProbeOutcome {
  std::vector<Probe> probes;                     // all L*H, layer-major
  std::vector<InterventionVector> interventions; // aligned with probes
  std::vector<HeadId> localized;                 // top-k by val accuracy
};

/// Probing pipeline on the train split: activation collection (x ⊕ y ⊕
/// random question), per-head probes, ranking, intervention vectors.
ProbeOutcome run_probing(const ModelWeights& w, const Task& task, int k, uint64_t seed,
                         bool normalize_direction);

struct EvalScores {
  double truth = 0.0, info = 0.0, info_truth = 0.0, kl = 0.0, mc = 0.0;
};

/// Full metric panel for one (possibly edited) model on a question set.
EvalScores evaluate_model(const ModelWeights& w, const World& world,
                          std::span<const Question> questions,
                          std::span<const McQuestion> mc, const EditHook* editor,
                          const ExperimentPlan& plan);

/// Info*Truth only — the sweep selection score (validation split).
double validation_info_truth(const ModelWeights& w, const World& world,
                             std::span<const Question> questions, const EditHook* editor,
                             const ExperimentPlan& plan);

struct SweepPoint {
  double setting = 0.0;
  double val_info_truth = 0.0;
};

struct ConditionResult {
  MetricRow test;                 // metrics at the selected setting
  std::vector<SweepPoint> curve;  // validation Info*Truth per grid point
};

/// ITI sweep over the alpha grid: select by validation Info*Truth, report
/// test metrics at the winner. Selection never sees test scores.
ConditionResult run_iti_sweep(const ModelWeights& w, const Task& task,
                              const ProbeOutcome& probing, const std::vector<HeadId>& heads,
                              const ExperimentPlan& plan, const std::string& condition,
                              uint64_t seed);

/// IPO sweep over the tau grid: one adapter per tau, select by validation
/// Info*Truth, report test metrics. Failed trainings are recorded and the
/// tau is skipped; all taus failing marks the condition failed.
struct IpoConditionResult {
  ConditionResult result;
  bool failed = false;
  std::vector<std::string> failures;
  std::optional<ReparamLoraHook> best_adapter;
};
IpoConditionResult run_ipo_condition(const ModelWeights& w, const Task& task,
                                     const HeadMask& mask, double lr,
                                     const ExperimentPlan& plan, const std::string& condition,
                                     uint64_t seed, const RefLogprobs& refs);

struct ExperimentResult {
  std::vector<MetricRow> rows;          // every recorded (condition, seed, setting)
  std::vector<SweepPoint> iti_loc_curve;
  WelchResult iti_loc_vs_random;        // localized-vs-random significance
  MetricRow base_row;                   // unedited model on test
  double base_mis_info_truth = 0.0;     // base model on misconception subjects
  std::vector<std::pair<HeadId, double>> single_head_scores;
  std::vector<HeadId> localized;        // probing pick (first probe seed)
  std::vector<Probe> probes;            // first probe seed, layer-major
  std::vector<InterventionVector> interventions;
  std::vector<std::string> failed_conditions;
  std::vector<std::pair<std::string, ReparamLoraHook>> adapters;  // winners per IPO condition
  uint64_t random_sets_hash = 0;        // asserts the ITI/IPO sets coincide
  uint64_t cfg_hash = 0;
  double wall_seconds = 0.0;            // stdout only, never written to files
};

ExperimentResult run_full_experiment(const ExperimentConfig& cfg, const ModelWeights& w,
                                     const Task& task, std::ostream* progress = nullptr);

/// eval CSV, run manifest, and per-figure plot-data files. Byte-identical
/// for identical (config, seed): no timestamps, fixed float formatting.
void emit_report(const std::filesystem::path& out_dir, const ExperimentConfig& cfg,
                 const ExperimentResult& res);

/// (t, p) comparison of two score samples (Welch, two-sided).
WelchResult compare_conditions(std::span<const double> results_a,
                               std::span<const double> results_b);

}  // namespace hedl
