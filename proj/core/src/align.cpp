#include "hedl/align.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "hedl/optim.hpp"
#include "hedl/report.hpp"

namespace hedl {

void TrainConfig::validate() const {
  if (tau <= 0.0) throw ConfigError("train config: tau must be > 0");
  if (epochs <= 0) throw ConfigError("train config: epochs must be > 0");
  if (batch_size <= 0) throw ConfigError("train config: batch_size must be > 0");
  if (lr <= 0.0) throw ConfigError("train config: lr must be > 0");
}

namespace {

void check_pair(const PreferencePair& p) {
  if (p.y_plus.empty() || p.y_minus.empty()) {
    throw ContractError("preference pair: answers must be nonempty");
  }
  if (p.y_plus == p.y_minus) {
    throw ContractError("preference pair: y_plus equals y_minus");
  }
}

}  // namespace

RefLogprobs cache_reference_logprobs(const ModelWeights& w,
                                     std::span<const PreferencePair> pairs) {
  RefLogprobs ref;
  ref.plus.reserve(pairs.size());
  ref.minus.reserve(pairs.size());
  for (const auto& p : pairs) {
    check_pair(p);
    ref.plus.push_back(sequence_logprob(w, p.x, p.y_plus));
    ref.minus.push_back(sequence_logprob(w, p.x, p.y_minus));
  }
  return ref;
}

Tensor ipo_loss(const ModelWeights& w, const EditHook* adapter,
                std::span<const PreferencePair> batch, std::span<const double> ref_plus,
                std::span<const double> ref_minus, double tau) {
  if (tau <= 0.0) throw ConfigError("ipo_loss: tau must be > 0");
  if (batch.empty()) throw ContractError("ipo_loss: empty batch");
  if (ref_plus.size() != batch.size() || ref_minus.size() != batch.size()) {
    throw ContractError("ipo_loss: reference logprobs misaligned with batch");
  }
  const double target = 1.0 / (2.0 * tau);

  Tensor total;
  for (size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    check_pair(p);
    Tensor lp_p = sequence_logprob_t(w, p.x, p.y_plus, adapter);
    Tensor lp_m = sequence_logprob_t(w, p.x, p.y_minus, adapter);
    // h - 1/(2τ) = (lp⁺ - lp⁻) - (ref⁺ - ref⁻) - 1/(2τ)
    Tensor t = add_scalar(sub(lp_p, lp_m), -(ref_plus[i] - ref_minus[i]) - target);
    Tensor sq = square(t);
    total = total.defined() ? add(total, sq) : sq;
  }
  return scale(total, 1.0 / static_cast<double>(batch.size()));
}

double cosine_lr(int step, int total_steps, double lr_max) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw ContractError("cosine_lr: need 0 <= step <= total_steps");
  }
  return lr_max * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                  static_cast<double>(total_steps))) / 2.0;
}

TrainTrace train_localized(const ModelWeights& w, std::span<const PreferencePair> pairs,
                           const TrainConfig& cfg, ReparamLoraHook& adapter,
                           const RefLogprobs* refs) {
  cfg.validate();
  if (pairs.empty()) throw ContractError("train_localized: no preference pairs");
  if (adapter.mask().size() == 0) throw ConfigError("train_localized: empty head mask");
  if (refs && (refs->plus.size() != pairs.size() || refs->minus.size() != pairs.size())) {
    throw ContractError("train_localized: reference cache does not match pairs");
  }

  // frozen base: only the adapter trains
  std::vector<Tensor> base = const_cast<ModelWeights&>(w).parameters();
  std::vector<bool> was_grad;
  for (auto& p : base) {
    was_grad.push_back(p.requires_grad());
    p.set_requires_grad(false);
  }

  TrainTrace trace;
  try {
    RefLogprobs ref = refs ? *refs : cache_reference_logprobs(w, pairs);
    AdamW opt(adapter.parameters(), cfg.lr, 0.9, 0.999, 1e-8, 0.0);

    const int n = static_cast<int>(pairs.size());
    const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const int total_steps = cfg.epochs * steps_per_epoch;

    std::mt19937_64 rng(cfg.seed ^ 0xd1b54a32d192ed03ULL);
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    int step = 0;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
      std::shuffle(order.begin(), order.end(), rng);
      double ep_loss = 0.0;
      int ep_batches = 0;
      for (int start = 0; start < n; start += cfg.batch_size) {
        const int end = std::min(n, start + cfg.batch_size);
        std::vector<PreferencePair> batch;
        std::vector<double> rp, rm;
        for (int i = start; i < end; ++i) {
          batch.push_back(pairs[static_cast<size_t>(order[static_cast<size_t>(i)])]);
          rp.push_back(ref.plus[static_cast<size_t>(order[static_cast<size_t>(i)])]);
          rm.push_back(ref.minus[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        }
        const double lr = cosine_lr(step, total_steps, cfg.lr);
        opt.set_lr(lr);
        opt.zero_grad();
        Tensor loss = ipo_loss(w, &adapter, batch, rp, rm, cfg.tau);
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          throw TrainingError("train_localized: non-finite loss at step " +
                              std::to_string(step) + " (tau " + std::to_string(cfg.tau) + ")");
        }
        backward(loss);
        opt.step();
        adapter.project();
        trace.rows.push_back({step, lr, lv});
        ep_loss += lv;
        ++ep_batches;
        ++step;
      }
      trace.epoch_losses.push_back(ep_loss / static_cast<double>(ep_batches));
    }
  } catch (...) {
    for (size_t i = 0; i < base.size(); ++i) base[i].set_requires_grad(was_grad[i]);
    throw;
  }
  for (size_t i = 0; i < base.size(); ++i) base[i].set_requires_grad(was_grad[i]);
  return trace;
}

void write_training_trace(const std::filesystem::path& file, const TrainTrace& trace) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw IoError("training trace: cannot open '" + file.string() + "'");
  os << "step,lr,loss\n";
  for (const auto& r : trace.rows) {
    os << r.step << ',' << fmt_double(r.lr) << ',' << fmt_double(r.loss) << '\n';
  }
  if (!os) throw IoError("training trace: write failed");
}

}  // namespace hedl
