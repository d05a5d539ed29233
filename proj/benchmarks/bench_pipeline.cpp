#include <benchmark/benchmark.h>

#include <random>

#include "hedl/align.hpp"
#include "hedl/edits.hpp"
#include "hedl/harness.hpp"
#include "hedl/model.hpp"

using namespace hedl;

namespace {

ModelConfig desk_config() {
  ModelConfig c;
  c.seed = 11;
  return c;  // library defaults: 4 layers, 4 heads, 64-token vocab
}

std::vector<int> random_tokens(const ModelConfig& c, int n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
  std::vector<int> out(n);
  for (int& t : out) t = tok(rng);
  return out;
}

}  // namespace

static void BM_ForwardLogits(benchmark::State& state) {
  ModelWeights w = ModelWeights::init(desk_config());
  auto tokens = random_tokens(w.config, static_cast<int>(state.range(0)), 1);
  for (auto _ : state) {
    Tensor logits = forward_logits(w, tokens);
    benchmark::DoNotOptimize(logits.at(0, 0));
  }
  state.SetItemsProcessed(state.iterations() * tokens.size());
}
BENCHMARK(BM_ForwardLogits)->Arg(8)->Arg(16)->Arg(32);

static void BM_SequenceLogprobBackward(benchmark::State& state) {
  ModelWeights w = ModelWeights::init(desk_config());
  w.set_requires_grad(true);
  auto prompt = random_tokens(w.config, 8, 2);
  auto answer = random_tokens(w.config, 4, 3);
  for (auto _ : state) {
    Tensor lp = sequence_logprob_t(w, prompt, answer);
    backward(lp);
    benchmark::DoNotOptimize(lp.item());
    for (auto& p : w.parameters()) p.zero_grad();
  }
}
BENCHMARK(BM_SequenceLogprobBackward);

static void BM_IpoLossBackward(benchmark::State& state) {
  ModelWeights w = ModelWeights::init(desk_config());
  std::vector<HeadId> heads = {{1, 0}, {2, 3}, {3, 1}, {3, 2}};
  HeadMask mask(w.config.n_layers, w.config.n_heads, w.config.head_dim, heads);
  ReparamLoraHook adapter(mask, 5);
  std::vector<PreferencePair> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back({random_tokens(w.config, 6, 10 + i),
                     random_tokens(w.config, 2, 20 + i),
                     random_tokens(w.config, 2, 30 + i)});
  }
  RefLogprobs refs = cache_reference_logprobs(w, batch);
  for (auto _ : state) {
    Tensor loss = ipo_loss(w, &adapter, batch, refs.plus, refs.minus, 0.1);
    backward(loss);
    benchmark::DoNotOptimize(loss.item());
    for (auto& p : adapter.parameters()) p.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * batch.size());
}
BENCHMARK(BM_IpoLossBackward);

static void BM_GenerateEdited(benchmark::State& state) {
  ModelWeights w = ModelWeights::init(desk_config());
  auto prompt = random_tokens(w.config, 6, 7);
  std::vector<InterventionVector> ivs;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  for (int l = 0; l < w.config.n_layers; ++l) {
    for (int h = 0; h < w.config.n_heads; ++h) {
      Tensor dir = Tensor::randn({w.config.head_dim}, rng);
      ivs.push_back(build_intervention({l, h}, dir, 1.0));
    }
  }
  ItiHook hook = ItiHook::build(ivs, w.config, 5.0);
  GenerateOptions opts;
  opts.max_new = 4;
  opts.eos_token = 0;
  for (auto _ : state) {
    auto out = generate(w, prompt, opts, &hook);
    benchmark::DoNotOptimize(out.size());
  }
}
BENCHMARK(BM_GenerateEdited);

static void BM_ProbeTraining(benchmark::State& state) {
  int n = static_cast<int>(state.range(0)), dim = 8;
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g;
  std::vector<double> flat(static_cast<size_t>(n) * dim);
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) {
    labels[i] = i % 2;
    for (int j = 0; j < dim; ++j) flat[i * dim + j] = g(rng) + (labels[i] ? 0.5 : -0.5);
  }
  Tensor acts = Tensor::from_vector({n, dim}, flat);
  for (auto _ : state) {
    Probe p = train_probe(acts, labels);
    benchmark::DoNotOptimize(p.val_accuracy);
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ProbeTraining)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
