#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "hedl/tensor.hpp"

namespace hedl {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int head_dim = 8;
  int hidden_dim = 32;  // must equal n_heads * head_dim
  int vocab_size = 64;
  int context_len = 32;
  double mlp_ratio = 4.0;
  // Tied unembedding (logits read the token-embedding matrix) keeps the
  // residual stream a shared read/write space, so edits written through W^l
  // move next-token logits directly. An untied head stays available.
  bool tied_unembed = true;
  uint64_t seed = 0;

  int mlp_dim() const { return static_cast<int>(mlp_ratio * hidden_dim); }
  void validate() const;  // ConfigError on violation
};

struct HeadId {
  int layer = 0;
  int head = 0;
  bool operator==(const HeadId&) const = default;
  auto operator<=>(const HeadId&) const = default;
};

struct LayerWeights {
  Tensor wq, wk, wv;              // [hidden x hidden]
  std::vector<Tensor> wo_blocks;  // H blocks, each [hidden x D]; block h is
                                  // the write-out matrix for head h
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_in, mlp_out;  // [hidden x mlp], [mlp x hidden]
};

struct ModelWeights {
  ModelConfig config;
  Tensor tok_emb;  // [vocab x hidden]
  Tensor pos_emb;  // [context x hidden]
  std::vector<LayerWeights> layers;
  Tensor final_ln_g, final_ln_b;
  Tensor unemb;  // [hidden x vocab]; undefined when config.tied_unembed

  static ModelWeights init(const ModelConfig& config);

  /// Dense project-out matrix: the H blocks concatenated column-wise.
  Tensor wo_dense(int layer) const;
  const Tensor& wo_block(int layer, int head) const;

  /// Handles to every trainable tensor (shared with the stored weights, so
  /// optimizer updates through these mutate the model).
  std::vector<Tensor> parameters();
  void set_requires_grad(bool v);

  void save(const std::filesystem::path& file) const;
  static ModelWeights load(const std::filesystem::path& file);
};

/// Per-position activations recorded by forward_capture. Head outputs are
/// stored concatenated; head h of layer l occupies columns [h*D, (h+1)*D).
struct ActivationTape {
  std::vector<Tensor> residual;      // L+1 entries, [T x hidden]; residual[0] = embeddings
  std::vector<Tensor> head_outputs;  // L entries, [T x hidden]
  std::vector<Tensor> mlp_outputs;   // L entries, [T x hidden]

  /// o_h^l as [T x D].
  Tensor head_output(int layer, int head, int head_dim) const;
};

/// Residual-stream editor. delta() returns a [T x hidden] addition to the
/// attention contribution of `layer` (before the MLP reads it), built from
/// graph ops so adapters can train through it, or an undefined Tensor for
/// "no change here".
class EditHook {
 public:
  virtual ~EditHook() = default;
  virtual Tensor delta(int layer, const Tensor& head_outputs,
                       const ModelWeights& weights) const = 0;
};

struct GenerateOptions {
  int max_new = 4;
  std::optional<int> eos_token;    // stop after emitting this token
  bool edit_prompt_positions = true;  // apply editors at prompt positions too
};

/// edit_from_pos: first position the editor applies to (0 = everywhere);
/// earlier rows of the delta are zeroed.
Tensor forward_logits(const ModelWeights& w, std::span<const int> tokens,
                      const EditHook* editor = nullptr, int edit_from_pos = 0);

std::pair<Tensor, ActivationTape> forward_capture(const ModelWeights& w,
                                                  std::span<const int> tokens,
                                                  const EditHook* editor = nullptr);

std::vector<int> generate(const ModelWeights& w, std::span<const int> prompt,
                          const GenerateOptions& opt, const EditHook* editor = nullptr);

/// Σ_t log p(answer_t | prompt, answer_<t); ≤ 0. Graph-valued so preference
/// objectives can differentiate through an editor's parameters.
Tensor sequence_logprob_t(const ModelWeights& w, std::span<const int> prompt,
                          std::span<const int> answer, const EditHook* editor = nullptr);
double sequence_logprob(const ModelWeights& w, std::span<const int> prompt,
                        std::span<const int> answer, const EditHook* editor = nullptr);

struct PretrainOptions {
  int epochs = 30;
  int batch_size = 32;
  double lr = 3e-3;
  uint64_t seed = 0;
};

struct PretrainResult {
  ModelWeights weights;
  std::vector<double> epoch_losses;
  double train_accuracy = 0.0;  // over corpus-predictable positions
};

/// Next-token cross-entropy training of all weights. Deterministic given
/// config.seed and opt.seed. Accuracy is measured over positions whose
/// exact-prefix continuation is unique in the corpus, so stochastic answer
/// positions don't count against memorization. NaN loss → TrainingError.
PretrainResult pretrain(const ModelConfig& config,
                        const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opt);

}  // namespace hedl
