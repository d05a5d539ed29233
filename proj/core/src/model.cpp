#include "hedl/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "hedl/checkpoint.hpp"
#include "hedl/optim.hpp"

namespace hedl {

void ModelConfig::validate() const {
  if (n_layers <= 0 || n_heads <= 0 || head_dim <= 0 || vocab_size <= 0 || context_len <= 0) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (hidden_dim != n_heads * head_dim) {
    throw ConfigError("model config: hidden_dim must equal n_heads*head_dim (" +
                      std::to_string(hidden_dim) + " != " + std::to_string(n_heads * head_dim) + ")");
  }
  if (mlp_ratio <= 0.0 || mlp_dim() <= 0) {
    throw ConfigError("model config: mlp_ratio must be positive");
  }
}

ModelWeights ModelWeights::init(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const int hid = config.hidden_dim;
  const double attn_std = 1.0 / std::sqrt(static_cast<double>(hid));
  const double mlp_out_std = 1.0 / std::sqrt(static_cast<double>(config.mlp_dim()));

  ModelWeights w;
  w.config = config;
  w.tok_emb = Tensor::randn({config.vocab_size, hid}, rng, 0.08, true);
  w.pos_emb = Tensor::randn({config.context_len, hid}, rng, 0.08, true);
  for (int l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.wq = Tensor::randn({hid, hid}, rng, attn_std, true);
    lw.wk = Tensor::randn({hid, hid}, rng, attn_std, true);
    lw.wv = Tensor::randn({hid, hid}, rng, attn_std, true);
    for (int h = 0; h < config.n_heads; ++h) {
      lw.wo_blocks.push_back(Tensor::randn({hid, config.head_dim}, rng, attn_std, true));
    }
    lw.ln1_g = Tensor::full({hid}, 1.0, true);
    lw.ln1_b = Tensor::zeros({hid}, true);
    lw.ln2_g = Tensor::full({hid}, 1.0, true);
    lw.ln2_b = Tensor::zeros({hid}, true);
    lw.mlp_in = Tensor::randn({hid, config.mlp_dim()}, rng, attn_std, true);
    lw.mlp_out = Tensor::randn({config.mlp_dim(), hid}, rng, mlp_out_std, true);
    w.layers.push_back(std::move(lw));
  }
  w.final_ln_g = Tensor::full({hid}, 1.0, true);
  w.final_ln_b = Tensor::zeros({hid}, true);
  if (!config.tied_unembed) {
    w.unemb = Tensor::randn({hid, config.vocab_size}, rng, 0.08, true);
  }
  return w;
}

Tensor ModelWeights::wo_dense(int layer) const {
  return concat_cols(layers.at(layer).wo_blocks);
}

const Tensor& ModelWeights::wo_block(int layer, int head) const {
  return layers.at(layer).wo_blocks.at(head);
}

std::vector<Tensor> ModelWeights::parameters() {
  std::vector<Tensor> ps{tok_emb, pos_emb};
  for (auto& lw : layers) {
    ps.push_back(lw.wq);
    ps.push_back(lw.wk);
    ps.push_back(lw.wv);
    for (auto& b : lw.wo_blocks) ps.push_back(b);
    ps.push_back(lw.ln1_g);
    ps.push_back(lw.ln1_b);
    ps.push_back(lw.ln2_g);
    ps.push_back(lw.ln2_b);
    ps.push_back(lw.mlp_in);
    ps.push_back(lw.mlp_out);
  }
  ps.push_back(final_ln_g);
  ps.push_back(final_ln_b);
  if (!config.tied_unembed) ps.push_back(unemb);
  return ps;
}

void ModelWeights::set_requires_grad(bool v) {
  for (auto& p : parameters()) p.set_requires_grad(v);
}

void ModelWeights::save(const std::filesystem::path& file) const {
  Checkpoint ck;
  ck.put_ints("config", {config.n_layers, config.n_heads, config.head_dim, config.hidden_dim,
                         config.vocab_size, config.context_len,
                         config.tied_unembed ? int64_t{1} : int64_t{0},
                         static_cast<int64_t>(config.seed)});
  ck.put("config.mlp_ratio", Tensor::scalar(config.mlp_ratio));
  ck.put("tok_emb", tok_emb);
  ck.put("pos_emb", pos_emb);
  for (int l = 0; l < config.n_layers; ++l) {
    const auto& lw = layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    ck.put(p + "wq", lw.wq);
    ck.put(p + "wk", lw.wk);
    ck.put(p + "wv", lw.wv);
    for (int h = 0; h < config.n_heads; ++h) {
      ck.put(p + "wo" + std::to_string(h), lw.wo_blocks[h]);
    }
    ck.put(p + "ln1_g", lw.ln1_g);
    ck.put(p + "ln1_b", lw.ln1_b);
    ck.put(p + "ln2_g", lw.ln2_g);
    ck.put(p + "ln2_b", lw.ln2_b);
    ck.put(p + "mlp_in", lw.mlp_in);
    ck.put(p + "mlp_out", lw.mlp_out);
  }
  ck.put("final_ln_g", final_ln_g);
  ck.put("final_ln_b", final_ln_b);
  if (!config.tied_unembed) ck.put("unemb", unemb);
  ck.save(file);
}

ModelWeights ModelWeights::load(const std::filesystem::path& file) {
  Checkpoint ck = Checkpoint::load(file);
  const auto ci = ck.get_ints("config");
  if (ci.size() != 8) throw IoError("model checkpoint: bad config record");
  ModelConfig config;
  config.n_layers = static_cast<int>(ci[0]);
  config.n_heads = static_cast<int>(ci[1]);
  config.head_dim = static_cast<int>(ci[2]);
  config.hidden_dim = static_cast<int>(ci[3]);
  config.vocab_size = static_cast<int>(ci[4]);
  config.context_len = static_cast<int>(ci[5]);
  config.tied_unembed = ci[6] != 0;
  config.seed = static_cast<uint64_t>(ci[7]);
  config.mlp_ratio = ck.get("config.mlp_ratio").item();
  config.validate();

  ModelWeights w;
  w.config = config;
  w.tok_emb = ck.get("tok_emb");
  w.pos_emb = ck.get("pos_emb");
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights lw;
    lw.wq = ck.get(p + "wq");
    lw.wk = ck.get(p + "wk");
    lw.wv = ck.get(p + "wv");
    for (int h = 0; h < config.n_heads; ++h) {
      lw.wo_blocks.push_back(ck.get(p + "wo" + std::to_string(h)));
    }
    lw.ln1_g = ck.get(p + "ln1_g");
    lw.ln1_b = ck.get(p + "ln1_b");
    lw.ln2_g = ck.get(p + "ln2_g");
    lw.ln2_b = ck.get(p + "ln2_b");
    lw.mlp_in = ck.get(p + "mlp_in");
    lw.mlp_out = ck.get(p + "mlp_out");
    w.layers.push_back(std::move(lw));
  }
  w.final_ln_g = ck.get("final_ln_g");
  w.final_ln_b = ck.get("final_ln_b");
  if (!config.tied_unembed) w.unemb = ck.get("unemb");
  w.set_requires_grad(true);
  return w;
}

Tensor ActivationTape::head_output(int layer, int head, int head_dim) const {
  return slice_cols(head_outputs.at(layer), static_cast<int64_t>(head) * head_dim,
                    static_cast<int64_t>(head + 1) * head_dim);
}

namespace {

// additive causal mask: 0 on/below the diagonal, -1e30 above. exp(x-1e30)
// underflows to exactly 0, so masked positions carry exactly zero weight.
Tensor causal_mask(int64_t t) {
  std::vector<double> m(static_cast<size_t>(t * t), 0.0);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = i + 1; j < t; ++j) m[i * t + j] = -1e30;
  return Tensor::from_vector({t, t}, std::move(m));
}

Tensor row_mask_from(int64_t t, int64_t hid, int64_t from) {
  std::vector<double> m(static_cast<size_t>(t * hid), 1.0);
  for (int64_t i = 0; i < std::min(from, t); ++i)
    for (int64_t j = 0; j < hid; ++j) m[i * hid + j] = 0.0;
  return Tensor::from_vector({t, hid}, std::move(m));
}

Tensor forward_impl(const ModelWeights& w, std::span<const int> tokens, const EditHook* editor,
                    int edit_from_pos, ActivationTape* tape) {
  const auto& cfg = w.config;
  const int64_t t = static_cast<int64_t>(tokens.size());
  if (t == 0) throw ContractError("forward: empty token sequence");
  if (t > cfg.context_len) {
    throw ContractError("forward: sequence length " + std::to_string(t) +
                        " exceeds context " + std::to_string(cfg.context_len));
  }
  for (int tok : tokens) {
    if (tok < 0 || tok >= cfg.vocab_size) {
      throw ContractError("forward: token " + std::to_string(tok) + " outside vocab");
    }
  }

  std::vector<int> pos(tokens.size());
  std::iota(pos.begin(), pos.end(), 0);
  Tensor x = add(gather_rows(w.tok_emb, tokens), gather_rows(w.pos_emb, pos));

  const Tensor mask = causal_mask(t);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& lw = w.layers[l];
    if (tape) tape->residual.push_back(x.detach());

    Tensor hi = layer_norm(x, lw.ln1_g, lw.ln1_b);
    Tensor q = matmul(hi, lw.wq);
    Tensor k = matmul(hi, lw.wk);
    Tensor v = matmul(hi, lw.wv);

    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.n_heads);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const int64_t c0 = static_cast<int64_t>(h) * cfg.head_dim;
      const int64_t c1 = c0 + cfg.head_dim;
      Tensor scores = scale(matmul(slice_cols(q, c0, c1), transpose(slice_cols(k, c0, c1))),
                            inv_sqrt_d);
      Tensor attn = softmax(add(scores, mask), 1);
      head_outs.push_back(matmul(attn, slice_cols(v, c0, c1)));
    }
    Tensor o = concat_cols(head_outs);
    if (tape) tape->head_outputs.push_back(o.detach());

    // residual write: sum of per-head block contributions W_h o_h
    Tensor contrib = matmul(head_outs[0], transpose(lw.wo_blocks[0]));
    for (int h = 1; h < cfg.n_heads; ++h) {
      contrib = add(contrib, matmul(head_outs[h], transpose(lw.wo_blocks[h])));
    }
    if (editor) {
      Tensor d = editor->delta(l, o, w);
      if (d.defined()) {
        if (d.shape() != contrib.shape()) {
          throw ShapeError("editor delta shape " + shape_str(d.shape()) +
                           " does not match residual " + shape_str(contrib.shape()));
        }
        if (edit_from_pos > 0) d = mul(d, row_mask_from(t, cfg.hidden_dim, edit_from_pos));
        contrib = add(contrib, d);
      }
    }
    x = add(x, contrib);

    Tensor mt = matmul(gelu(matmul(layer_norm(x, lw.ln2_g, lw.ln2_b), lw.mlp_in)), lw.mlp_out);
    if (tape) tape->mlp_outputs.push_back(mt.detach());
    x = add(x, mt);
  }
  if (tape) tape->residual.push_back(x.detach());
  Tensor xf = layer_norm(x, w.final_ln_g, w.final_ln_b);
  return w.config.tied_unembed ? matmul(xf, transpose(w.tok_emb)) : matmul(xf, w.unemb);
}

int argmax_row(const Tensor& logits, int64_t row) {
  const int64_t n = logits.dim(1);
  int best = 0;
  double best_v = logits.at(row, 0);
  for (int64_t j = 1; j < n; ++j) {
    const double v = logits.at(row, j);
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(j);
    }
  }
  return best;  // ties resolve to the lowest token id
}

}  // namespace

Tensor forward_logits(const ModelWeights& w, std::span<const int> tokens, const EditHook* editor,
                      int edit_from_pos) {
  return forward_impl(w, tokens, editor, edit_from_pos, nullptr);
}

std::pair<Tensor, ActivationTape> forward_capture(const ModelWeights& w,
                                                  std::span<const int> tokens,
                                                  const EditHook* editor) {
  ActivationTape tape;
  Tensor logits = forward_impl(w, tokens, editor, 0, &tape);
  return {std::move(logits), std::move(tape)};
}

std::vector<int> generate(const ModelWeights& w, std::span<const int> prompt,
                          const GenerateOptions& opt, const EditHook* editor) {
  if (opt.max_new < 0) throw ContractError("generate: max_new must be >= 0");
  if (static_cast<int64_t>(prompt.size()) + opt.max_new > w.config.context_len) {
    throw ContractError("generate: prompt plus max_new exceeds context");
  }
  std::vector<int> toks(prompt.begin(), prompt.end());
  const int edit_from = opt.edit_prompt_positions ? 0 : static_cast<int>(prompt.size());
  for (int step = 0; step < opt.max_new; ++step) {
    Tensor logits = forward_logits(w, toks, editor, edit_from);
    const int next = argmax_row(logits, logits.dim(0) - 1);
    toks.push_back(next);
    if (opt.eos_token && next == *opt.eos_token) break;
  }
  return toks;
}

Tensor sequence_logprob_t(const ModelWeights& w, std::span<const int> prompt,
                          std::span<const int> answer, const EditHook* editor) {
  if (answer.empty()) throw ContractError("sequence_logprob: empty answer");
  if (prompt.empty()) throw ContractError("sequence_logprob: empty prompt");
  std::vector<int> toks(prompt.begin(), prompt.end());
  toks.insert(toks.end(), answer.begin(), answer.end());
  Tensor lp = log_softmax(forward_logits(w, toks, editor), 1);
  const int64_t p = static_cast<int64_t>(prompt.size());
  std::vector<int> rows(answer.size());
  std::iota(rows.begin(), rows.end(), static_cast<int>(p - 1));
  std::vector<int> cols(answer.begin(), answer.end());
  return sum(gather_elems(gather_rows(lp, rows), cols));
}

double sequence_logprob(const ModelWeights& w, std::span<const int> prompt,
                        std::span<const int> answer, const EditHook* editor) {
  return sequence_logprob_t(w, prompt, answer, editor).item();
}

PretrainResult pretrain(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                        const PretrainOptions& opt) {
  if (corpus.empty()) throw ContractError("pretrain: empty corpus");
  for (const auto& row : corpus) {
    if (row.size() < 2) throw ContractError("pretrain: corpus rows need >= 2 tokens");
  }

  PretrainResult res;
  res.weights = ModelWeights::init(config);
  auto params = res.weights.parameters();
  AdamW optimizer(params, opt.lr);

  std::mt19937_64 shuffle_rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  for (int ep = 0; ep < opt.epochs; ++ep) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double ep_loss = 0.0;
    int64_t ep_count = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(opt.batch_size));
      optimizer.zero_grad();
      Tensor total;
      int64_t n_pred = 0;
      for (size_t bi = start; bi < end; ++bi) {
        const auto& row = corpus[order[bi]];
        Tensor lp = log_softmax(forward_logits(res.weights, row), 1);
        std::vector<int> rows(row.size() - 1), cols(row.begin() + 1, row.end());
        std::iota(rows.begin(), rows.end(), 0);
        Tensor s = sum(gather_elems(gather_rows(lp, rows), cols));
        total = total.defined() ? add(total, s) : s;
        n_pred += static_cast<int64_t>(rows.size());
      }
      Tensor loss = scale(total, -1.0 / static_cast<double>(n_pred));
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw TrainingError("pretrain: non-finite loss at epoch " + std::to_string(ep));
      }
      backward(loss);
      optimizer.step();
      ep_loss += lv * static_cast<double>(n_pred);
      ep_count += n_pred;
    }
    res.epoch_losses.push_back(ep_loss / static_cast<double>(ep_count));
  }

  // accuracy over corpus-predictable positions: prefixes with a unique
  // continuation in the corpus (answer positions of stochastic subjects
  // are excluded by construction)
  std::map<std::vector<int>, std::pair<int, bool>> cont;  // prefix -> (next, unique)
  for (const auto& row : corpus) {
    for (size_t t = 0; t + 1 < row.size(); ++t) {
      std::vector<int> prefix(row.begin(), row.begin() + static_cast<int64_t>(t) + 1);
      auto it = cont.find(prefix);
      if (it == cont.end()) {
        cont.emplace(std::move(prefix), std::make_pair(row[t + 1], true));
      } else if (it->second.first != row[t + 1]) {
        it->second.second = false;
      }
    }
  }
  int64_t ok = 0, tot = 0;
  for (const auto& row : corpus) {
    Tensor logits = forward_logits(res.weights, row);
    for (size_t t = 0; t + 1 < row.size(); ++t) {
      std::vector<int> prefix(row.begin(), row.begin() + static_cast<int64_t>(t) + 1);
      const auto& [next, unique] = cont.at(prefix);
      if (!unique) continue;
      ++tot;
      if (argmax_row(logits, static_cast<int64_t>(t)) == next) ++ok;
    }
  }
  res.train_accuracy = tot ? static_cast<double>(ok) / static_cast<double>(tot) : 1.0;
  return res;
}

}  // namespace hedl
