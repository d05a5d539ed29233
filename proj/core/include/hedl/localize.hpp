#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "hedl/model.hpp"
#include "hedl/tensor.hpp"

namespace hedl {

/// One probing example: question x, answer y, trailing random question. The
/// activation is read at the final token of the concatenation.
struct ProbeExample {
  std::vector<int> x;
  std::vector<int> y;
  std::vector<int> x_random;
  int label = 0;  // 1 = truthful answer
};

/// Per-head last-token activations with shared labels. acts[l][h] is
/// [n_examples x D]; rows follow the example order.
struct LabeledActivations {
  std::vector<std::vector<Tensor>> acts;
  std::vector<int> labels;
};

struct Probe {
  HeadId head;
  Tensor w;  // [D]
  double bias = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct InterventionVector {
  HeadId head;
  Tensor direction;  // u, the mass mean shift [D]
  double sigma = 0.0;
  Tensor theta;  // sigma * u/|u| (or sigma * u unnormalized) [D]
  bool zero_direction = false;
};

LabeledActivations collect_activations(const ModelWeights& w,
                                       std::span<const ProbeExample> examples);

/// Logistic regression by full-batch gradient descent with L2 penalty 1e-3,
/// run to convergence (grad inf-norm < 1e-6 or 10k steps). Accuracy reported
/// on a fixed 80/20 split (row order shuffled by a constant internal seed so
/// caller ordering cannot skew the split).
Probe train_probe(const Tensor& acts, std::span<const int> labels, HeadId head = {});

/// val_accuracy descending, ties by (layer, head) ascending; top k.
std::vector<HeadId> rank_heads(std::span<const Probe> probes, int k);

/// mean of positive rows minus mean of negative rows.
Tensor mass_mean_shift(const Tensor& acts_pos, const Tensor& acts_neg);

/// population std of projections of all rows onto u's direction; 0 if u = 0.
double direction_sigma(const Tensor& all_acts, const Tensor& u);

InterventionVector build_intervention(HeadId head, const Tensor& u, double sigma,
                                      bool normalize_direction = true);

/// CSV: layer, head, train_acc, val_acc, sigma, theta_norm.
void write_probe_report(const std::filesystem::path& file, std::span<const Probe> probes,
                        std::span<const InterventionVector> interventions);

}  // namespace hedl
