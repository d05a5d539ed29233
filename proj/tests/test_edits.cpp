#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "hedl/edits.hpp"

using namespace hedl;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.head_dim = 2;
  c.hidden_dim = 8;
  c.vocab_size = 16;
  c.context_len = 16;
  c.seed = 5;
  return c;
}

std::vector<Tensor> random_blocks(int n_heads, int hidden, int head_dim,
                                  std::mt19937_64& rng) {
  std::vector<Tensor> blocks;
  for (int h = 0; h < n_heads; ++h)
    blocks.push_back(Tensor::randn({hidden, head_dim}, rng));
  return blocks;
}

std::vector<double> randvec(size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

// dense W θ via the concatenated block layout
std::vector<double> dense_apply(std::span<const Tensor> blocks,
                                std::span<const double> theta, int head_dim) {
  size_t hidden = static_cast<size_t>(blocks[0].dim(0));
  std::vector<double> out(hidden, 0.0);
  for (size_t h = 0; h < blocks.size(); ++h)
    for (size_t i = 0; i < hidden; ++i)
      for (int j = 0; j < head_dim; ++j)
        out[i] += blocks[h].at(static_cast<int64_t>(i), j) * theta[h * head_dim + j];
  return out;
}

// Gauss-Jordan solve for the expressiveness round-trip
std::vector<double> solve(std::vector<double> A, std::vector<double> y, int n) {
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(A[r * n + col]) > std::abs(A[piv * n + col])) piv = r;
    for (int j = 0; j < n; ++j) std::swap(A[col * n + j], A[piv * n + j]);
    std::swap(y[col], y[piv]);
    double d = A[col * n + col];
    for (int j = 0; j < n; ++j) A[col * n + j] /= d;
    y[col] /= d;
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = A[r * n + col];
      for (int j = 0; j < n; ++j) A[r * n + j] -= f * A[col * n + j];
      y[r] -= f * y[col];
    }
  }
  return y;
}

}  // namespace

TEST_CASE("head mask construction, dedup, bounds") {
  HeadMask m(2, 4, 2, {{1, 2}, {0, 1}, {1, 2}});
  CHECK(m.size() == 2);  // duplicate removed
  CHECK(m.heads() == std::vector<HeadId>{{0, 1}, {1, 2}});
  CHECK(m.contains({1, 2}));
  CHECK(!m.contains({1, 1}));
  CHECK(m.layers() == std::vector<int>{0, 1});

  auto ind = m.layer_indicator(0);
  CHECK(ind == std::vector<double>{0, 0, 1, 1, 0, 0, 0, 0});
  auto ind1 = m.layer_indicator(1);
  CHECK(ind1 == std::vector<double>{0, 0, 0, 0, 1, 1, 0, 0});

  CHECK_THROWS_AS(HeadMask(2, 4, 2, {{2, 0}}), ContractError);
  CHECK_THROWS_AS(HeadMask(2, 4, 2, {{0, 4}}), ContractError);

  ModelConfig c = tiny_config();
  CHECK(HeadMask::full(c).size() == 8);
  CHECK(HeadMask::empty(c).size() == 0);
}

TEST_CASE("iti_edit zero alpha is a bitwise no-op") {
  std::mt19937_64 rng(1);
  auto blocks = random_blocks(4, 8, 2, rng);
  auto r = randvec(8, rng);
  auto theta = randvec(8, rng);
  auto out = iti_edit(r, blocks, theta, 0.0);
  CHECK(out == r);
}

TEST_CASE("iti_edit identity projection moves one coordinate") {
  // W = I (blocks tile the identity), theta one-hot at j=3, alpha=2
  std::vector<Tensor> blocks;
  for (int h = 0; h < 4; ++h) {
    std::vector<double> blk(8 * 2, 0.0);
    blk[(h * 2 + 0) * 2 + 0] = 1.0;
    blk[(h * 2 + 1) * 2 + 1] = 1.0;
    blocks.push_back(Tensor::from_vector({8, 2}, std::move(blk)));
  }
  std::vector<double> r(8, 0.5);
  std::vector<double> theta(8, 0.0);
  theta[3] = 1.0;
  auto out = iti_edit(r, blocks, theta, 2.0);
  for (int i = 0; i < 8; ++i)
    CHECK(out[i] == doctest::Approx(i == 3 ? 2.5 : 0.5).epsilon(1e-15));
}

TEST_CASE("iti_edit block sum equals the dense product") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto blocks = random_blocks(4, 8, 2, rng);
    auto r = randvec(8, rng);
    auto theta = randvec(8, rng);
    double alpha = 1.7;
    auto edited = iti_edit(r, blocks, theta, alpha);
    auto wtheta = dense_apply(blocks, theta, 2);
    for (int i = 0; i < 8; ++i)
      CHECK(std::abs(edited[i] - (r[i] + alpha * wtheta[i])) < 1e-10);
  }
}

TEST_CASE("lora_edit strength and direction") {
  std::mt19937_64 rng(3);
  auto r = randvec(8, rng);
  auto o = randvec(8, rng);
  std::vector<double> zero(8, 0.0);
  auto b = randvec(8, rng);
  CHECK(lora_edit(r, o, zero, b) == r);  // a = 0: bitwise no-op

  std::vector<double> a(8, 0.0), e2(8, 0.0);
  a[0] = 1.0;
  e2[1] = 1.0;
  std::vector<double> o3(8, 0.0);
  o3[0] = 3.0;
  auto out = lora_edit(r, o3, a, e2);
  for (int i = 0; i < 8; ++i)
    CHECK(out[i] == doctest::Approx(r[i] + (i == 1 ? 3.0 : 0.0)).epsilon(1e-15));
}

TEST_CASE("lora_edit matches the dense rank-1 update (W + b a^T) o") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    auto blocks = random_blocks(4, 8, 2, rng);
    auto o = randvec(8, rng);
    auto a = randvec(8, rng);
    auto b = randvec(8, rng);
    auto r = dense_apply(blocks, o, 2);  // r = W o, the unedited contribution
    auto edited = lora_edit(r, o, a, b);
    double ao = 0;
    for (int i = 0; i < 8; ++i) ao += a[i] * o[i];
    for (int i = 0; i < 8; ++i) {
      double dense = r[i] + b[i] * ao;  // (W + b a^T) o
      CHECK(std::abs(edited[i] - dense) < 1e-10);
    }
  }
}

TEST_CASE("reparam equals lora on W^l b with the full mask") {
  ModelConfig c = tiny_config();
  std::mt19937_64 rng(5);
  HeadMask full = HeadMask::full(c);
  for (int trial = 0; trial < 20; ++trial) {
    auto blocks = random_blocks(4, 8, 2, rng);
    auto r = randvec(8, rng);
    auto o = randvec(8, rng);
    auto a = randvec(8, rng);
    auto b = randvec(8, rng);
    auto reparam = reparam_lora_edit(r, o, a, b, blocks, full, 0);
    auto wb = dense_apply(blocks, b, 2);
    auto plain = lora_edit(r, o, a, wb);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(reparam[i] - plain[i]) < 1e-10);
  }
}

TEST_CASE("reparam respects the mask") {
  ModelConfig c = tiny_config();
  std::mt19937_64 rng(6);
  auto blocks = random_blocks(4, 8, 2, rng);
  auto r = randvec(8, rng);
  auto o = randvec(8, rng);
  auto a = randvec(8, rng);

  HeadMask none = HeadMask::empty(c);
  std::vector<double> zero(8, 0.0);
  CHECK(reparam_lora_edit(r, o, a, zero, blocks, none, 0) == r);

  // single-head mask: delta lives in that head's column span
  HeadMask single(c.n_layers, c.n_heads, c.head_dim, {{0, 2}});
  std::vector<double> b(8, 0.0);
  b[4] = 0.3;
  b[5] = -0.7;
  auto edited = reparam_lora_edit(r, o, a, b, blocks, single, 0);
  double ao = 0;
  for (int i = 0; i < 8; ++i) ao += a[i] * o[i];
  for (int i = 0; i < 8; ++i) {
    double expect = r[i] + ao * (blocks[2].at(i, 0) * 0.3 + blocks[2].at(i, 1) * -0.7);
    CHECK(std::abs(edited[i] - expect) < 1e-10);
  }

  // off-mask coordinate nonzero: contract violation, projection is not our job
  std::vector<double> bad = b;
  bad[0] = 1e-9;
  CHECK_THROWS_AS(reparam_lora_edit(r, o, a, bad, blocks, single, 0), ContractError);
}

TEST_CASE("project_mask zeroes exactly the off-mask blocks") {
  ModelConfig c = tiny_config();
  std::vector<double> b = {1, 2, 3, 4, 5, 6, 7, 8};

  HeadMask full = HeadMask::full(c);
  CHECK(project_mask(b, full, 0) == b);

  HeadMask none = HeadMask::empty(c);
  CHECK(project_mask(b, none, 0) == std::vector<double>(8, 0.0));

  HeadMask h1(c.n_layers, c.n_heads, c.head_dim, {{0, 1}});
  auto p = project_mask(b, h1, 0);
  CHECK(p == std::vector<double>{0, 0, 3, 4, 0, 0, 0, 0});
  CHECK(project_mask(p, h1, 0) == p);  // idempotent

  // a layer not in the mask zeroes everything
  CHECK(project_mask(b, h1, 1) == std::vector<double>(8, 0.0));
}

TEST_CASE("expressiveness round-trip through an invertible dense W") {
  // for any b' there is b = W^{-1} b' making the two forms agree
  ModelConfig c = tiny_config();
  std::mt19937_64 rng(7);
  HeadMask full = HeadMask::full(c);
  for (int trial = 0; trial < 5; ++trial) {
    // W = I + small noise keeps it well-conditioned
    std::vector<Tensor> blocks;
    std::normal_distribution<double> nd(0.0, 0.05);
    std::vector<double> dense(64);
    for (int h = 0; h < 4; ++h) {
      std::vector<double> blk(16);
      for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 2; ++j) {
          double v = (i == h * 2 + j ? 1.0 : 0.0) + nd(rng);
          blk[i * 2 + j] = v;
          dense[i * 8 + h * 2 + j] = v;
        }
      blocks.push_back(Tensor::from_vector({8, 2}, std::move(blk)));
    }
    auto r = randvec(8, rng);
    auto o = randvec(8, rng);
    auto a = randvec(8, rng);
    auto b_prime = randvec(8, rng);
    auto b = solve(dense, b_prime, 8);
    auto via_reparam = reparam_lora_edit(r, o, a, b, blocks, full, 0);
    auto via_plain = lora_edit(r, o, a, b_prime);
    for (int i = 0; i < 8; ++i) CHECK(std::abs(via_reparam[i] - via_plain[i]) < 1e-8);
  }
}

TEST_CASE("iti hook delta matches the vector algebra and zero alpha is inert") {
  ModelConfig c = tiny_config();
  ModelWeights w = ModelWeights::init(c);
  std::mt19937_64 rng(8);

  std::vector<InterventionVector> ivs;
  ivs.push_back(build_intervention({0, 1}, Tensor::randn({2}, rng), 1.5));
  ivs.push_back(build_intervention({1, 3}, Tensor::randn({2}, rng), 0.5));

  ItiHook hook = ItiHook::build(ivs, c, 2.0);
  std::vector<int> seq = {1, 2, 3};
  auto [logits, tape] = forward_capture(w, seq);

  Tensor d0 = hook.delta(0, tape.head_outputs[0], w);
  REQUIRE(d0.defined());
  CHECK(d0.shape() == Shape{3, 8});
  // assemble theta^0: head 1's block carries iv.theta, rest zeros
  std::vector<double> theta(8, 0.0);
  theta[2] = ivs[0].theta.at(0);
  theta[3] = ivs[0].theta.at(1);
  std::vector<double> zero(8, 0.0);
  auto expect = iti_edit(zero, w.layers[0].wo_blocks, theta, 2.0);
  for (int64_t t = 0; t < 3; ++t)
    for (int i = 0; i < 8; ++i)
      CHECK(d0.at(t, i) == doctest::Approx(expect[i]).epsilon(1e-12));

  ItiHook inert = ItiHook::build(ivs, c, 0.0);
  Tensor l0 = forward_logits(w, seq);
  Tensor l1 = forward_logits(w, seq, &inert);
  for (int64_t i = 0; i < l0.numel(); ++i) CHECK(l0.data()[i] == l1.data()[i]);
}

TEST_CASE("reparam hook: init, delta, projection, round-trip") {
  ModelConfig c = tiny_config();
  ModelWeights w = ModelWeights::init(c);
  HeadMask mask(c.n_layers, c.n_heads, c.head_dim, {{0, 1}, {1, 0}, {1, 3}});
  ReparamLoraHook hook(mask, 99);

  CHECK(hook.mask_respected());
  CHECK(hook.parameters().size() == 4);  // (a, b) per nonempty layer

  // a starts at zero: the adapter is initially inert
  for (int l : mask.layers())
    for (double v : hook.a(l).data()) CHECK(v == 0.0);

  // b respects the mask at init
  auto ind = mask.layer_indicator(1);
  auto b1 = hook.b(1);
  bool some_nonzero = false;
  for (size_t i = 0; i < 8; ++i) {
    if (ind[i] == 0.0) CHECK(b1.at(static_cast<int64_t>(i)) == 0.0);
    else if (b1.at(static_cast<int64_t>(i)) != 0.0) some_nonzero = true;
  }
  CHECK(some_nonzero);

  // delta matches the vector-level algebra once a is nonzero
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  for (Tensor& p : hook.parameters())
    for (double& v : p.mutable_data()) v = nd(rng);
  hook.project();
  CHECK(hook.mask_respected());

  std::vector<int> seq = {4, 5, 6};
  auto [logits, tape] = forward_capture(w, seq);
  Tensor d = hook.delta(1, tape.head_outputs[1], w);
  REQUIRE(d.defined());
  std::vector<double> a(hook.a(1).data().begin(), hook.a(1).data().end());
  std::vector<double> b(hook.b(1).data().begin(), hook.b(1).data().end());
  for (int64_t t = 0; t < 3; ++t) {
    std::vector<double> o(8), zero(8, 0.0);
    for (int i = 0; i < 8; ++i) o[static_cast<size_t>(i)] = tape.head_outputs[1].at(t, i);
    auto expect = reparam_lora_edit(zero, o, a, b, w.layers[1].wo_blocks, mask, 1);
    for (int i = 0; i < 8; ++i)
      CHECK(d.at(t, i) == doctest::Approx(expect[i]).epsilon(1e-12));
  }

  // layer 0 has heads in the mask, untouched layers carry nothing
  CHECK(hook.delta(0, tape.head_outputs[0], w).defined());
  CHECK_THROWS_AS((void)hook.a(3), ContractError);

  auto path = std::filesystem::temp_directory_path() / "adapter_roundtrip.hedl";
  hook.save(path);
  ReparamLoraHook loaded = ReparamLoraHook::load(path);
  CHECK(loaded.mask().heads() == mask.heads());
  for (int l : mask.layers()) {
    for (int64_t i = 0; i < 8; ++i) {
      CHECK(loaded.a(l).at(i) == hook.a(l).at(i));
      CHECK(loaded.b(l).at(i) == hook.b(l).at(i));
    }
  }
  std::filesystem::remove(path);
}

TEST_CASE("constant strength variant drops the gate parameters") {
  ModelConfig c = tiny_config();
  HeadMask mask(c.n_layers, c.n_heads, c.head_dim, {{0, 0}});
  ReparamLoraHook hook(mask, 1, 0.02, /*constant_strength=*/true);
  CHECK(hook.parameters().size() == 1);  // b only

  ModelWeights w = ModelWeights::init(c);
  std::vector<int> seq = {1, 2};
  auto [logits, tape] = forward_capture(w, seq);
  Tensor d = hook.delta(0, tape.head_outputs[0], w);
  REQUIRE(d.defined());
  // strength 1 at every position: rows identical
  for (int i = 0; i < 8; ++i) CHECK(d.at(0, i) == d.at(1, i));
}

TEST_CASE("reparam init is deterministic in the seed") {
  ModelConfig c = tiny_config();
  HeadMask mask(c.n_layers, c.n_heads, c.head_dim, {{0, 1}, {1, 2}});
  ReparamLoraHook h1(mask, 42), h2(mask, 42), h3(mask, 43);
  bool differs = false;
  for (int l : mask.layers())
    for (int64_t i = 0; i < 8; ++i) {
      CHECK(h1.b(l).at(i) == h2.b(l).at(i));
      if (h1.b(l).at(i) != h3.b(l).at(i)) differs = true;
    }
  CHECK(differs);
}
