#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include "hedl/localize.hpp"
#include "hedl/model.hpp"

namespace hedl {

/// Set of heads whose b-blocks may be nonzero; the formalization of
/// "localized edit".
class HeadMask {
 public:
  HeadMask(int n_layers, int n_heads, int head_dim, std::vector<HeadId> heads);
  static HeadMask full(const ModelConfig& cfg);
  static HeadMask empty(const ModelConfig& cfg);

  bool contains(HeadId h) const;
  const std::vector<HeadId>& heads() const { return heads_; }  // sorted
  std::vector<int> layers() const;  // layers with >= 1 masked head, ascending
  /// {0,1}^{DH} block indicator for one layer.
  std::vector<double> layer_indicator(int layer) const;
  size_t size() const { return heads_.size(); }
  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  int head_dim() const { return head_dim_; }

 private:
  int n_layers_, n_heads_, head_dim_;
  std::vector<HeadId> heads_;
};

// ---- vector-level edit algebra (the testable equations) ----

/// r + α·Σ_h W_h θ_h. α=0 returns r bitwise-unchanged.
std::vector<double> iti_edit(std::span<const double> r, std::span<const Tensor> wo_blocks,
                             std::span<const double> theta, double alpha);

/// r + ⟨a,o⟩·b. Zero strength returns r bitwise-unchanged.
std::vector<double> lora_edit(std::span<const double> r, std::span<const double> o,
                              std::span<const double> a, std::span<const double> b);

/// r + ⟨a,o⟩·Σ_{h∈mask} W_h b_h. b must already respect the mask
/// (off-mask coordinates exactly 0) → ContractError otherwise.
std::vector<double> reparam_lora_edit(std::span<const double> r, std::span<const double> o,
                                      std::span<const double> a, std::span<const double> b,
                                      std::span<const Tensor> wo_blocks, const HeadMask& mask,
                                      int layer);

/// Zero off-mask blocks of b; on-mask blocks untouched bitwise; idempotent.
std::vector<double> project_mask(std::span<const double> b, const HeadMask& mask, int layer);

// ---- model-integrated hooks ----

/// Adds α·W^l θ^l to the residual at every targeted layer and position.
/// θ^l is assembled from per-head intervention vectors (zeros elsewhere).
class ItiHook : public EditHook {
 public:
  ItiHook(std::map<int, Tensor> thetas, double alpha);
  static ItiHook build(std::span<const InterventionVector> ivs, const ModelConfig& cfg,
                       double alpha);
  Tensor delta(int layer, const Tensor& head_outputs,
               const ModelWeights& weights) const override;
  double alpha() const { return alpha_; }

 private:
  std::map<int, Tensor> thetas_;  // layer -> θ^l [hidden]
  double alpha_;
};

/// Plain rank-1 edit r + ⟨a,o⟩·b' (b' lives in residual space directly).
class LoraHook : public EditHook {
 public:
  explicit LoraHook(std::map<int, std::pair<Tensor, Tensor>> ab);  // layer -> (a, b')
  Tensor delta(int layer, const Tensor& head_outputs,
               const ModelWeights& weights) const override;
  std::vector<Tensor> parameters();

 private:
  std::map<int, std::pair<Tensor, Tensor>> ab_;
};

/// Head-masked reparameterized rank-1 adapter: r + ⟨a,o⟩·Σ_{h∈mask} W_h b_h.
/// Layers with an empty mask carry no parameters. a is free; only b is
/// masked, re-projected after every optimizer step.
class ReparamLoraHook : public EditHook {
 public:
  ReparamLoraHook(HeadMask mask, uint64_t init_seed, double b_init_std = 0.02,
                  bool constant_strength = false);

  Tensor delta(int layer, const Tensor& head_outputs,
               const ModelWeights& weights) const override;

  std::vector<Tensor> parameters();
  void project();  // zero off-mask b coordinates in place
  bool mask_respected() const;

  const HeadMask& mask() const { return mask_; }
  Tensor a(int layer) const;
  Tensor b(int layer) const;

  void save(const std::filesystem::path& file) const;
  static ReparamLoraHook load(const std::filesystem::path& file);

 private:
  HeadMask mask_;
  std::map<int, std::pair<Tensor, Tensor>> ab_;  // layer -> (a [DH], b [DH])
  bool constant_strength_;
};

}  // namespace hedl
