#include "hedl/localize.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "hedl/report.hpp"

namespace hedl {

LabeledActivations collect_activations(const ModelWeights& w,
                                       std::span<const ProbeExample> examples) {
  if (examples.empty()) throw ContractError("collect_activations: no examples");
  const auto& cfg = w.config;

  LabeledActivations out;
  out.acts.assign(cfg.n_layers, {});
  std::vector<std::vector<std::vector<double>>> rows(
      cfg.n_layers, std::vector<std::vector<double>>(cfg.n_heads));

  for (size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    std::vector<int> toks = ex.x;
    toks.insert(toks.end(), ex.y.begin(), ex.y.end());
    toks.insert(toks.end(), ex.x_random.begin(), ex.x_random.end());
    if (static_cast<int>(toks.size()) > cfg.context_len) {
      throw ContractError("collect_activations: example " + std::to_string(i) +
                          " exceeds context (" + std::to_string(toks.size()) + " tokens)");
    }
    auto [logits, tape] = forward_capture(w, toks);
    const int64_t last = static_cast<int64_t>(toks.size()) - 1;
    for (int l = 0; l < cfg.n_layers; ++l) {
      const Tensor& o = tape.head_outputs[l];
      for (int h = 0; h < cfg.n_heads; ++h) {
        std::vector<double>& dst = rows[l][h];
        for (int d = 0; d < cfg.head_dim; ++d) {
          dst.push_back(o.at(last, static_cast<int64_t>(h) * cfg.head_dim + d));
        }
      }
    }
    out.labels.push_back(ex.label);
  }

  const int64_t n = static_cast<int64_t>(examples.size());
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      out.acts[l].push_back(Tensor::from_vector({n, cfg.head_dim}, std::move(rows[l][h])));
    }
  }
  return out;
}

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

double probe_accuracy(const Tensor& x, std::span<const size_t> idx,
                      std::span<const int> labels, std::span<const double> w, double b) {
  if (idx.empty()) return 0.0;
  const int64_t d = x.dim(1);
  int ok = 0;
  for (size_t i : idx) {
    double z = b;
    for (int64_t j = 0; j < d; ++j) z += x.at(static_cast<int64_t>(i), j) * w[j];
    if ((z > 0.0 ? 1 : 0) == labels[i]) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(idx.size());
}

}  // namespace

Probe train_probe(const Tensor& acts, std::span<const int> labels, HeadId head) {
  if (acts.ndim() != 2) throw ShapeError("train_probe: activations must be [n x D]");
  const int64_t n = acts.dim(0), d = acts.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ShapeError("train_probe: label count mismatch");
  }
  const int64_t n_pos = std::count(labels.begin(), labels.end(), 1);
  if (n_pos == 0 || n_pos == n) throw ContractError("train_probe: single-class input");

  // fixed split: constant-seed shuffle of row indices, first 80% train
  std::vector<size_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 split_rng(0x5eedULL);
  std::shuffle(idx.begin(), idx.end(), split_rng);
  const size_t n_tr = std::max<size_t>(1, static_cast<size_t>(0.8 * static_cast<double>(n)));
  std::vector<size_t> tr(idx.begin(), idx.begin() + static_cast<int64_t>(n_tr));
  std::vector<size_t> va(idx.begin() + static_cast<int64_t>(n_tr), idx.end());

  const double lambda = 1e-3;
  std::vector<double> w(static_cast<size_t>(d), 0.0);
  double b = 0.0;

  // full-batch GD with halving on loss increase; stops at grad inf-norm <1e-6
  auto eval_loss = [&](const std::vector<double>& wv, double bv) {
    double loss = 0.0;
    for (size_t i : tr) {
      double z = bv;
      for (int64_t j = 0; j < d; ++j) z += acts.at(static_cast<int64_t>(i), j) * wv[j];
      const double y = labels[i];
      // numerically stable -[y log σ(z) + (1-y) log(1-σ(z))]
      loss += std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
    }
    loss /= static_cast<double>(tr.size());
    for (double wj : wv) loss += lambda * wj * wj;
    return loss;
  };

  double lr = 1.0;
  double prev_loss = eval_loss(w, b);
  for (int step = 0; step < 10000; ++step) {
    std::vector<double> gw(static_cast<size_t>(d), 0.0);
    double gb = 0.0;
    for (size_t i : tr) {
      double z = b;
      for (int64_t j = 0; j < d; ++j) z += acts.at(static_cast<int64_t>(i), j) * w[j];
      const double e = sigmoid(z) - static_cast<double>(labels[i]);
      for (int64_t j = 0; j < d; ++j) gw[j] += e * acts.at(static_cast<int64_t>(i), j);
      gb += e;
    }
    double gmax = std::abs(gb / static_cast<double>(tr.size()));
    for (int64_t j = 0; j < d; ++j) {
      gw[j] = gw[j] / static_cast<double>(tr.size()) + 2.0 * lambda * w[j];
      gmax = std::max(gmax, std::abs(gw[j]));
    }
    gb /= static_cast<double>(tr.size());
    if (gmax < 1e-6) break;

    while (true) {
      std::vector<double> w2 = w;
      for (int64_t j = 0; j < d; ++j) w2[j] -= lr * gw[j];
      const double b2 = b - lr * gb;
      const double l2 = eval_loss(w2, b2);
      if (l2 <= prev_loss || lr < 1e-12) {
        w = std::move(w2);
        b = b2;
        prev_loss = l2;
        break;
      }
      lr *= 0.5;
    }
  }

  Probe p;
  p.head = head;
  p.w = Tensor::from_vector({d}, w);
  p.bias = b;
  p.train_accuracy = probe_accuracy(acts, tr, labels, w, b);
  p.val_accuracy = probe_accuracy(acts, va, labels, w, b);
  return p;
}

std::vector<HeadId> rank_heads(std::span<const Probe> probes, int k) {
  if (k < 0 || static_cast<size_t>(k) > probes.size()) {
    throw ContractError("rank_heads: k out of range");
  }
  std::vector<const Probe*> order;
  order.reserve(probes.size());
  for (const auto& p : probes) order.push_back(&p);
  std::sort(order.begin(), order.end(), [](const Probe* a, const Probe* b) {
    if (a->val_accuracy != b->val_accuracy) return a->val_accuracy > b->val_accuracy;
    return a->head < b->head;
  });
  std::vector<HeadId> out;
  out.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) out.push_back(order[static_cast<size_t>(i)]->head);
  return out;
}

Tensor mass_mean_shift(const Tensor& acts_pos, const Tensor& acts_neg) {
  if (acts_pos.ndim() != 2 || acts_neg.ndim() != 2 || acts_pos.dim(1) != acts_neg.dim(1)) {
    throw ShapeError("mass_mean_shift: need [n x D] matrices with matching D");
  }
  if (acts_pos.dim(0) == 0 || acts_neg.dim(0) == 0) {
    throw ContractError("mass_mean_shift: empty class");
  }
  const int64_t d = acts_pos.dim(1);
  std::vector<double> u(static_cast<size_t>(d), 0.0);
  for (int64_t j = 0; j < d; ++j) {
    double mp = 0.0, mn = 0.0;
    for (int64_t i = 0; i < acts_pos.dim(0); ++i) mp += acts_pos.at(i, j);
    for (int64_t i = 0; i < acts_neg.dim(0); ++i) mn += acts_neg.at(i, j);
    u[static_cast<size_t>(j)] = mp / static_cast<double>(acts_pos.dim(0)) -
                                mn / static_cast<double>(acts_neg.dim(0));
  }
  return Tensor::from_vector({d}, std::move(u));
}

double direction_sigma(const Tensor& all_acts, const Tensor& u) {
  if (all_acts.ndim() != 2 || u.ndim() != 1 || all_acts.dim(1) != u.dim(0)) {
    throw ShapeError("direction_sigma: shape mismatch");
  }
  double norm2 = 0.0;
  for (double v : u.data()) norm2 += v * v;
  if (norm2 == 0.0) return 0.0;
  const double inv_norm = 1.0 / std::sqrt(norm2);

  const int64_t n = all_acts.dim(0), d = all_acts.dim(1);
  std::vector<double> proj(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < d; ++j) s += all_acts.at(i, j) * u.at(j);
    proj[static_cast<size_t>(i)] = s * inv_norm;
  }
  double mean = 0.0;
  for (double p : proj) mean += p;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double p : proj) var += (p - mean) * (p - mean);
  var /= static_cast<double>(n);
  return std::sqrt(var);
}

InterventionVector build_intervention(HeadId head, const Tensor& u, double sigma,
                                      bool normalize_direction) {
  InterventionVector iv;
  iv.head = head;
  iv.direction = u.detach();
  iv.sigma = sigma;

  double norm2 = 0.0;
  for (double v : u.data()) norm2 += v * v;
  if (norm2 == 0.0) {
    iv.theta = Tensor::zeros(u.shape());
    iv.zero_direction = true;
    return iv;
  }
  const double scale_f = normalize_direction ? sigma / std::sqrt(norm2) : sigma;
  std::vector<double> theta(u.data().begin(), u.data().end());
  for (double& t : theta) t *= scale_f;
  iv.theta = Tensor::from_vector(u.shape(), std::move(theta));
  return iv;
}

void write_probe_report(const std::filesystem::path& file, std::span<const Probe> probes,
                        std::span<const InterventionVector> interventions) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw IoError("probe report: cannot open '" + file.string() + "'");
  os << "layer,head,train_acc,val_acc,sigma,theta_norm\n";
  for (size_t i = 0; i < probes.size(); ++i) {
    const auto& p = probes[i];
    double sigma = 0.0, theta_norm = 0.0;
    if (i < interventions.size()) {
      sigma = interventions[i].sigma;
      double n2 = 0.0;
      for (double v : interventions[i].theta.data()) n2 += v * v;
      theta_norm = std::sqrt(n2);
    }
    os << p.head.layer << ',' << p.head.head << ',' << fmt_double(p.train_accuracy) << ','
       << fmt_double(p.val_accuracy) << ',' << fmt_double(sigma) << ','
       << fmt_double(theta_norm) << '\n';
  }
  if (!os) throw IoError("probe report: write failed");
}

}  // namespace hedl
