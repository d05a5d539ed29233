#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "hedl/edits.hpp"
#include "hedl/model.hpp"

namespace hedl {

struct PreferencePair {
  std::vector<int> x;        // prompt
  std::vector<int> y_plus;   // truthful answer
  std::vector<int> y_minus;  // untruthful answer
};

struct TrainConfig {
  double tau = 0.1;
  int epochs = 20;     // desk-scale default; the source recipe's 2 stays available
  int batch_size = 4;
  double lr = 1e-4;    // recipe defaults: 1e-4 all heads, 5e-4 for 16, 2e-3 single
  uint64_t seed = 0;

  void validate() const;  // ConfigError
};

/// Frozen-reference log-probs logπ₀(y±|x), cached once (π₀ never changes).
struct RefLogprobs {
  std::vector<double> plus, minus;
};

RefLogprobs cache_reference_logprobs(const ModelWeights& w,
                                     std::span<const PreferencePair> pairs);

/// mean_i [h_i - 1/(2τ)]² with
/// h_i = (logπ_φ(y⁺|x) - logπ₀(y⁺|x)) - (logπ_φ(y⁻|x) - logπ₀(y⁻|x)).
/// Differentiable w.r.t. the adapter's parameters; adapter == nullptr scores
/// the reference policy itself (h ≡ 0).
Tensor ipo_loss(const ModelWeights& w, const EditHook* adapter,
                std::span<const PreferencePair> batch, std::span<const double> ref_plus,
                std::span<const double> ref_minus, double tau);

double cosine_lr(int step, int total_steps, double lr_max);

struct TrainTrace {
  struct Row {
    int step;
    double lr, loss;
  };
  std::vector<Row> rows;
  std::vector<double> epoch_losses;
};

/// IPO training of the masked adapter: decoupled-weight-decay Adam
/// (β 0.9/0.999, wd 0), cosine decay from cfg.lr to 0, mask re-projected
/// after every step. Base weights are frozen for the duration. NaN loss →
/// TrainingError. Deterministic given cfg.seed and the adapter's init.
/// refs, when given, must be cache_reference_logprobs(w, pairs) — callers
/// sweeping many adapters over the same pairs avoid recomputing it.
TrainTrace train_localized(const ModelWeights& w, std::span<const PreferencePair> pairs,
                           const TrainConfig& cfg, ReparamLoraHook& adapter,
                           const RefLogprobs* refs = nullptr);

/// CSV: step, lr, loss.
void write_training_trace(const std::filesystem::path& file, const TrainTrace& trace);

}  // namespace hedl
