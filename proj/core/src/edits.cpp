#include "hedl/edits.hpp"

#include <algorithm>
#include <random>

#include "hedl/checkpoint.hpp"

namespace hedl {

HeadMask::HeadMask(int n_layers, int n_heads, int head_dim, std::vector<HeadId> heads)
    : n_layers_(n_layers), n_heads_(n_heads), head_dim_(head_dim), heads_(std::move(heads)) {
  for (const auto& h : heads_) {
    if (h.layer < 0 || h.layer >= n_layers_ || h.head < 0 || h.head >= n_heads_) {
      throw ContractError("head mask: head (" + std::to_string(h.layer) + "," +
                          std::to_string(h.head) + ") out of bounds");
    }
  }
  std::sort(heads_.begin(), heads_.end());
  heads_.erase(std::unique(heads_.begin(), heads_.end()), heads_.end());
}

HeadMask HeadMask::full(const ModelConfig& cfg) {
  std::vector<HeadId> hs;
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) hs.push_back({l, h});
  return HeadMask(cfg.n_layers, cfg.n_heads, cfg.head_dim, std::move(hs));
}

HeadMask HeadMask::empty(const ModelConfig& cfg) {
  return HeadMask(cfg.n_layers, cfg.n_heads, cfg.head_dim, {});
}

bool HeadMask::contains(HeadId h) const {
  return std::binary_search(heads_.begin(), heads_.end(), h);
}

std::vector<int> HeadMask::layers() const {
  std::vector<int> out;
  for (const auto& h : heads_) {
    if (out.empty() || out.back() != h.layer) out.push_back(h.layer);
  }
  return out;
}

std::vector<double> HeadMask::layer_indicator(int layer) const {
  std::vector<double> ind(static_cast<size_t>(n_heads_) * head_dim_, 0.0);
  for (const auto& h : heads_) {
    if (h.layer != layer) continue;
    for (int d = 0; d < head_dim_; ++d) {
      ind[static_cast<size_t>(h.head) * head_dim_ + d] = 1.0;
    }
  }
  return ind;
}

// ---- vector-level algebra ----

namespace {

void check_blocks(std::span<const Tensor> wo_blocks, size_t hidden, size_t head_dim) {
  for (const auto& b : wo_blocks) {
    if (b.ndim() != 2 || b.dim(0) != static_cast<int64_t>(hidden) ||
        b.dim(1) != static_cast<int64_t>(head_dim)) {
      throw ShapeError("edit: wo block shape mismatch");
    }
  }
}

double dot_d(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::vector<double> iti_edit(std::span<const double> r, std::span<const Tensor> wo_blocks,
                             std::span<const double> theta, double alpha) {
  if (theta.size() != r.size() || wo_blocks.empty()) {
    throw ShapeError("iti_edit: theta/r size mismatch");
  }
  const size_t hd = r.size() / wo_blocks.size();
  check_blocks(wo_blocks, r.size(), hd);

  std::vector<double> out(r.begin(), r.end());
  if (alpha == 0.0) return out;
  for (size_t h = 0; h < wo_blocks.size(); ++h) {
    auto wb = wo_blocks[h].data();
    for (size_t i = 0; i < r.size(); ++i) {
      double s = 0.0;
      for (size_t d = 0; d < hd; ++d) s += wb[i * hd + d] * theta[h * hd + d];
      out[i] += alpha * s;
    }
  }
  return out;
}

std::vector<double> lora_edit(std::span<const double> r, std::span<const double> o,
                              std::span<const double> a, std::span<const double> b) {
  if (o.size() != a.size() || b.size() != r.size()) {
    throw ShapeError("lora_edit: size mismatch");
  }
  std::vector<double> out(r.begin(), r.end());
  const double strength = dot_d(a, o);
  if (strength == 0.0) return out;
  for (size_t i = 0; i < out.size(); ++i) out[i] += strength * b[i];
  return out;
}

std::vector<double> reparam_lora_edit(std::span<const double> r, std::span<const double> o,
                                      std::span<const double> a, std::span<const double> b,
                                      std::span<const Tensor> wo_blocks, const HeadMask& mask,
                                      int layer) {
  if (o.size() != a.size() || b.size() != r.size() || o.size() != b.size()) {
    throw ShapeError("reparam_lora_edit: size mismatch");
  }
  const auto ind = mask.layer_indicator(layer);
  for (size_t i = 0; i < b.size(); ++i) {
    if (ind[i] == 0.0 && b[i] != 0.0) {
      throw ContractError("reparam_lora_edit: b has nonzero off-mask coordinate " +
                          std::to_string(i));
    }
  }
  const size_t hd = static_cast<size_t>(mask.head_dim());
  check_blocks(wo_blocks, r.size(), hd);

  std::vector<double> out(r.begin(), r.end());
  const double strength = dot_d(a, o);
  if (strength == 0.0) return out;
  for (const auto& h : mask.heads()) {
    if (h.layer != layer) continue;
    auto wb = wo_blocks[static_cast<size_t>(h.head)].data();
    for (size_t i = 0; i < out.size(); ++i) {
      double s = 0.0;
      for (size_t d = 0; d < hd; ++d) {
        s += wb[i * hd + d] * b[static_cast<size_t>(h.head) * hd + d];
      }
      out[i] += strength * s;
    }
  }
  return out;
}

std::vector<double> project_mask(std::span<const double> b, const HeadMask& mask, int layer) {
  const auto ind = mask.layer_indicator(layer);
  if (b.size() != ind.size()) throw ShapeError("project_mask: size mismatch");
  std::vector<double> out(b.begin(), b.end());
  for (size_t i = 0; i < out.size(); ++i) {
    if (ind[i] == 0.0) out[i] = 0.0;
  }
  return out;
}

// ---- hooks ----

ItiHook::ItiHook(std::map<int, Tensor> thetas, double alpha)
    : thetas_(std::move(thetas)), alpha_(alpha) {}

ItiHook ItiHook::build(std::span<const InterventionVector> ivs, const ModelConfig& cfg,
                       double alpha) {
  std::map<int, std::vector<double>> assembled;
  for (const auto& iv : ivs) {
    const auto& h = iv.head;
    if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads) {
      throw ContractError("iti hook: head out of bounds");
    }
    auto& theta = assembled[h.layer];
    if (theta.empty()) theta.assign(static_cast<size_t>(cfg.hidden_dim), 0.0);
    for (int d = 0; d < cfg.head_dim; ++d) {
      theta[static_cast<size_t>(h.head) * cfg.head_dim + d] = iv.theta.at(d);
    }
  }
  std::map<int, Tensor> thetas;
  for (auto& [l, v] : assembled) {
    thetas.emplace(l, Tensor::from_vector({cfg.hidden_dim}, std::move(v)));
  }
  return ItiHook(std::move(thetas), alpha);
}

Tensor ItiHook::delta(int layer, const Tensor& head_outputs, const ModelWeights& weights) const {
  auto it = thetas_.find(layer);
  if (it == thetas_.end() || alpha_ == 0.0) return {};
  // α·W^l θ^l = α·Σ_h W_h θ_h, one constant row per position
  const auto& cfg = weights.config;
  Tensor w_theta;
  for (int h = 0; h < cfg.n_heads; ++h) {
    std::vector<double> block(static_cast<size_t>(cfg.head_dim));
    for (int d = 0; d < cfg.head_dim; ++d) {
      block[static_cast<size_t>(d)] = it->second.at(static_cast<int64_t>(h) * cfg.head_dim + d);
    }
    if (std::all_of(block.begin(), block.end(), [](double v) { return v == 0.0; })) continue;
    Tensor wh_th = matvec(weights.wo_block(layer, h),
                          Tensor::from_vector({cfg.head_dim}, std::move(block)));
    w_theta = w_theta.defined() ? add(w_theta, wh_th) : wh_th;
  }
  if (!w_theta.defined()) return {};
  return broadcast_row(scale(w_theta, alpha_), head_outputs.dim(0));
}

LoraHook::LoraHook(std::map<int, std::pair<Tensor, Tensor>> ab) : ab_(std::move(ab)) {}

Tensor LoraHook::delta(int layer, const Tensor& head_outputs, const ModelWeights&) const {
  auto it = ab_.find(layer);
  if (it == ab_.end()) return {};
  return outer(matvec(head_outputs, it->second.first), it->second.second);
}

std::vector<Tensor> LoraHook::parameters() {
  std::vector<Tensor> out;
  for (auto& [l, ab] : ab_) {
    out.push_back(ab.first);
    out.push_back(ab.second);
  }
  return out;
}

ReparamLoraHook::ReparamLoraHook(HeadMask mask, uint64_t init_seed, double b_init_std,
                                 bool constant_strength)
    : mask_(std::move(mask)), constant_strength_(constant_strength) {
  std::mt19937_64 rng(init_seed);
  const int64_t hid = static_cast<int64_t>(mask_.n_heads()) * mask_.head_dim();
  for (int l : mask_.layers()) {
    Tensor a = Tensor::zeros({hid}, true);
    Tensor b = Tensor::randn({hid}, rng, b_init_std, true);
    const auto ind = mask_.layer_indicator(l);
    auto bd = b.mutable_data();
    for (size_t i = 0; i < bd.size(); ++i) bd[i] *= ind[i];
    ab_.emplace(l, std::make_pair(std::move(a), std::move(b)));
  }
}

Tensor ReparamLoraHook::delta(int layer, const Tensor& head_outputs,
                              const ModelWeights& weights) const {
  auto it = ab_.find(layer);
  if (it == ab_.end()) return {};
  const auto& cfg = weights.config;
  const auto& [a, b] = it->second;

  // direction Σ_{h∈mask} W_h b_h, differentiable in b
  Tensor dir;
  for (const auto& hid : mask_.heads()) {
    if (hid.layer != layer) continue;
    Tensor row = gather_rows(reshape(b, {cfg.n_heads, cfg.head_dim}),
                             std::vector<int>{hid.head});             // [1 x D]
    Tensor wh_bh = matvec(weights.wo_block(layer, hid.head),
                          reshape(row, {cfg.head_dim}));              // [hidden]
    dir = dir.defined() ? add(dir, wh_bh) : wh_bh;
  }
  if (!dir.defined()) return {};
  if (constant_strength_) return broadcast_row(dir, head_outputs.dim(0));
  return outer(matvec(head_outputs, a), dir);
}

std::vector<Tensor> ReparamLoraHook::parameters() {
  std::vector<Tensor> out;
  for (auto& [l, ab] : ab_) {
    if (!constant_strength_) out.push_back(ab.first);
    out.push_back(ab.second);
  }
  return out;
}

void ReparamLoraHook::project() {
  for (auto& [l, ab] : ab_) {
    const auto ind = mask_.layer_indicator(l);
    auto bd = ab.second.mutable_data();
    for (size_t i = 0; i < bd.size(); ++i) {
      if (ind[i] == 0.0) bd[i] = 0.0;
    }
  }
}

bool ReparamLoraHook::mask_respected() const {
  for (const auto& [l, ab] : ab_) {
    const auto ind = mask_.layer_indicator(l);
    auto bd = ab.second.data();
    for (size_t i = 0; i < bd.size(); ++i) {
      if (ind[i] == 0.0 && bd[i] != 0.0) return false;
    }
  }
  return true;
}

Tensor ReparamLoraHook::a(int layer) const {
  auto it = ab_.find(layer);
  if (it == ab_.end()) throw ContractError("adapter: layer carries no parameters");
  return it->second.first;
}

Tensor ReparamLoraHook::b(int layer) const {
  auto it = ab_.find(layer);
  if (it == ab_.end()) throw ContractError("adapter: layer carries no parameters");
  return it->second.second;
}

void ReparamLoraHook::save(const std::filesystem::path& file) const {
  Checkpoint ck;
  ck.put_ints("dims", {mask_.n_layers(), mask_.n_heads(), mask_.head_dim(),
                       constant_strength_ ? 1 : 0});
  std::vector<int64_t> flat;
  for (const auto& h : mask_.heads()) {
    flat.push_back(h.layer);
    flat.push_back(h.head);
  }
  ck.put_ints("mask", flat);
  for (const auto& [l, ab] : ab_) {
    ck.put("layer" + std::to_string(l) + ".a", ab.first);
    ck.put("layer" + std::to_string(l) + ".b", ab.second);
  }
  ck.save(file);
}

ReparamLoraHook ReparamLoraHook::load(const std::filesystem::path& file) {
  Checkpoint ck = Checkpoint::load(file);
  const auto dims = ck.get_ints("dims");
  if (dims.size() != 4) throw IoError("adapter: bad dims record");
  const auto flat = ck.get_ints("mask");
  if (flat.size() % 2 != 0) throw IoError("adapter: bad mask record");
  std::vector<HeadId> heads;
  for (size_t i = 0; i < flat.size(); i += 2) {
    heads.push_back({static_cast<int>(flat[i]), static_cast<int>(flat[i + 1])});
  }
  HeadMask mask(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                static_cast<int>(dims[2]), std::move(heads));

  ReparamLoraHook hook(mask, 0, 0.0, dims[3] != 0);
  hook.ab_.clear();
  for (int l : mask.layers()) {
    Tensor a = ck.get("layer" + std::to_string(l) + ".a");
    Tensor b = ck.get("layer" + std::to_string(l) + ".b");
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    hook.ab_.emplace(l, std::make_pair(std::move(a), std::move(b)));
  }
  return hook;
}

}  // namespace hedl
