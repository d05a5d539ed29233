#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "hedl/evalsuite.hpp"
#include "hedl/edits.hpp"

using namespace hedl;

namespace {

WorldConfig small_world() {
  WorldConfig c;
  c.n_subjects = 10;
  c.n_values = 8;
  c.n_question_forms = 2;
  c.sentences_per_subject = 20;
  c.p_mis = 0.7;
  c.misconception_fraction = 0.5;
  return c;
}

ModelConfig tiny_config(int vocab) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_dim = 4;
  c.hidden_dim = 8;
  c.vocab_size = vocab;
  c.context_len = 16;
  c.seed = 1;
  return c;
}

ModelWeights zero_model(int vocab) {
  ModelWeights w = ModelWeights::init(tiny_config(vocab));
  for (Tensor& p : w.parameters())
    for (double& v : p.mutable_data()) v = 0.0;
  return w;
}

}  // namespace

TEST_CASE("world config validation") {
  WorldConfig c = small_world();
  CHECK_NOTHROW(c.validate());
  c.n_subjects = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_world();
  c.n_values = 7;  // odd: pools cannot split
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_world();
  c.p_mis = 1.2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("task layout: vocabulary, split sizes, preference pairs") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 0);
  const World& w = t.world;

  CHECK(w.n_tokens() == 3 + 2 + 10 + 8);
  for (int s = 0; s < c.n_subjects; ++s) {
    CHECK(w.true_value[s] != w.dist_value[s]);
    CHECK(w.in_true_pool(w.true_value[s]));
    CHECK(!w.in_true_pool(w.dist_value[s]));
    CHECK(w.is_value_token(w.dist_value[s]));
  }
  int n_mis = static_cast<int>(
      std::count(w.misconception.begin(), w.misconception.end(), true));
  CHECK(n_mis == 5);

  // 60/20/20 by subject, every form per subject
  CHECK(t.split.train.size() == 6 * 2);
  CHECK(t.split.val.size() == 2 * 2);
  CHECK(t.split.test.size() == 2 * 2);

  CHECK(t.pairs.size() == t.split.train.size());
  for (size_t i = 0; i < t.pairs.size(); ++i) {
    int s = t.split.train[i].subject;
    CHECK(t.pairs[i].x == question_prompt(w, t.split.train[i]));
    CHECK(t.pairs[i].y_plus == std::vector<int>{w.true_value[s]});
    CHECK(t.pairs[i].y_minus == std::vector<int>{w.dist_value[s]});
  }

  // splits are disjoint in subjects
  std::vector<int> seen;
  for (const auto& q : t.split.train) seen.push_back(q.subject);
  for (const auto& q : t.split.val)
    CHECK(std::find(seen.begin(), seen.end(), q.subject) == seen.end());
}

TEST_CASE("default-scale split matches 24/8/8 subjects") {
  WorldConfig c;  // defaults: 40 subjects
  Task t = generate_task(c, 0);
  CHECK(t.split.train.size() == 24u * c.n_question_forms);
  CHECK(t.split.val.size() == 8u * c.n_question_forms);
  CHECK(t.split.test.size() == 8u * c.n_question_forms);
}

TEST_CASE("corpus documents carry the Q s A v sentence grammar") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 3);
  const World& w = t.world;
  size_t slots = 0;
  for (const auto& doc : t.corpus) {
    REQUIRE((doc.size() == 10 || doc.size() == 5));
    for (size_t off = 0; off < doc.size(); off += 5) {
      CHECK(doc[off] >= w.q0);
      CHECK(doc[off] < w.q0 + c.n_question_forms);
      CHECK(doc[off + 1] >= w.subj0);
      CHECK(doc[off + 1] < w.subj0 + c.n_subjects);
      CHECK(doc[off + 2] == w.answer_marker);
      CHECK(w.is_value_token(doc[off + 3]));
      CHECK(doc[off + 4] == w.eos);
      ++slots;
    }
  }
  CHECK(slots == static_cast<size_t>(c.n_subjects) * c.sentences_per_subject);
}

TEST_CASE("p_mis extremes pin every corpus answer") {
  WorldConfig c = small_world();
  c.p_mis = 0.0;
  Task clean = generate_task(c, 1);
  for (const auto& doc : clean.corpus)
    for (size_t off = 0; off < doc.size(); off += 5) {
      int s = doc[off + 1] - clean.world.subj0;
      CHECK(doc[off + 3] == clean.world.true_value[s]);
    }

  c.p_mis = 1.0;
  c.misconception_fraction = 1.0;
  Task wrong = generate_task(c, 1);
  for (const auto& doc : wrong.corpus)
    for (size_t off = 0; off < doc.size(); off += 5) {
      int s = doc[off + 1] - wrong.world.subj0;
      CHECK(doc[off + 3] == wrong.world.dist_value[s]);
    }
}

TEST_CASE("misconception answers hit the distractor at the configured rate") {
  WorldConfig c = small_world();
  c.n_subjects = 20;
  c.sentences_per_subject = 50;
  Task t = generate_task(c, 7);
  const World& w = t.world;
  int mis_total = 0, mis_dist = 0, clean_true = 0, clean_total = 0;
  for (const auto& doc : t.corpus)
    for (size_t off = 0; off < doc.size(); off += 5) {
      int s = doc[off + 1] - w.subj0;
      if (w.misconception[s]) {
        ++mis_total;
        if (doc[off + 3] == w.dist_value[s]) ++mis_dist;
      } else {
        ++clean_total;
        if (doc[off + 3] == w.true_value[s]) ++clean_true;
      }
    }
  double rate = static_cast<double>(mis_dist) / mis_total;
  CHECK(rate > c.p_mis - 0.1);
  CHECK(rate < c.p_mis + 0.1);
  CHECK(clean_true == clean_total);  // non-misconception subjects never lie
}

TEST_CASE("task generation is deterministic in the seed") {
  WorldConfig c = small_world();
  Task a = generate_task(c, 5);
  Task b = generate_task(c, 5);
  CHECK(a.corpus == b.corpus);
  CHECK(a.world.true_value == b.world.true_value);
  Task d = generate_task(c, 6);
  CHECK(a.corpus != d.corpus);
}

TEST_CASE("mc questions have exactly one truthful candidate") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 2);
  CHECK(t.mc_val.size() == t.split.val.size());
  CHECK(t.mc_test.size() == t.split.test.size());
  for (const auto& mq : t.mc_test) {
    CHECK(mq.candidates.size() >= 2);
    int truthful = 0;
    for (size_t i = 0; i < mq.candidates.size(); ++i) {
      REQUIRE(mq.candidates[i].size() == 1);
      if (mq.candidates[i][0] == t.world.true_value[mq.subject]) {
        ++truthful;
        CHECK(static_cast<int>(i) == mq.truthful_index);
      }
    }
    CHECK(truthful == 1);
  }
}

TEST_CASE("judge verdicts cover every rule") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 0);
  const World& w = t.world;
  int s = 0;
  int vt = w.true_value[s], vd = w.dist_value[s];
  int other = -1;  // a value token that is neither vt nor vd for subject 0
  for (int v = w.val0; v < w.val0 + c.n_values; ++v)
    if (v != vt && v != vd) other = v;
  REQUIRE(other >= 0);

  auto verdict = [&](std::vector<int> ans) { return judge(ans, s, w); };
  CHECK(verdict({vt}).truth == 1);
  CHECK(verdict({vt}).info == 1);
  CHECK(verdict({vt, w.eos}).truth == 1);  // trailing terminator ignored
  CHECK(verdict({vt, w.eos}).info == 1);
  CHECK(verdict({w.abstain}).truth == 1);
  CHECK(verdict({w.abstain}).info == 0);
  CHECK(verdict({vd}).truth == 0);
  CHECK(verdict({vd}).info == 1);
  CHECK(verdict({other}).truth == 0);
  CHECK(verdict({other}).info == 1);
  CHECK(verdict({w.q0}).truth == 0);  // garbage: not a value
  CHECK(verdict({w.q0}).info == 0);
  CHECK(verdict({}).truth == 0);
  CHECK(verdict({}).info == 0);
  CHECK(verdict({vt, vd}).truth == 0);  // multi-token: malformed
  CHECK(verdict({vt, vd}).info == 0);
  CHECK(verdict({w.abstain, vd}).truth == 1);  // abstain prefix stays truthful
  CHECK(verdict({w.abstain, vd}).info == 0);

  // judging is pure
  JudgeVerdict v1 = judge(std::vector<int>{vt}, s, w);
  JudgeVerdict v2 = judge(std::vector<int>{vt}, s, w);
  CHECK(v1.truth == v2.truth);
  CHECK(v1.info == v2.info);
}

TEST_CASE("aggregate info*truth arithmetic") {
  std::vector<JudgeVerdict> all_good(4, {1, 1});
  JudgeScores s1 = aggregate_scores(all_good);
  CHECK(s1.info_truth() == 1.0);

  std::vector<JudgeVerdict> split = {{1, 0}, {1, 0}, {0, 1}, {0, 1}};
  JudgeScores s2 = aggregate_scores(split);
  CHECK(s2.truth == 0.5);
  CHECK(s2.info == 0.5);
  CHECK(s2.info_truth() == 0.25);

  std::vector<JudgeVerdict> none;
  CHECK_THROWS_AS(aggregate_scores(none), ContractError);
}

TEST_CASE("kl divergence spot values and contracts") {
  std::vector<double> p = {0.5, 0.5}, q = {0.25, 0.75};
  double kl = kl_divergence(p, q);
  CHECK(std::abs(kl - 0.14384) < 1e-5);
  CHECK(std::abs(kl - (0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0))) < 1e-15);

  CHECK(kl_divergence(p, p) == 0.0);

  // unnormalized inputs are normalized first
  std::vector<double> p2 = {2.0, 2.0}, q2 = {1.0, 3.0};
  CHECK(kl_divergence(p2, q2) == doctest::Approx(kl).epsilon(1e-15));

  std::vector<double> neg = {-0.1, 1.1};
  CHECK_THROWS_AS(kl_divergence(neg, q), ContractError);
  std::vector<double> hole = {0.0, 1.0};
  CHECK_THROWS_AS(kl_divergence(p, hole), ContractError);
  CHECK(kl_divergence(hole, p) > 0.0);  // p may have zeros, q may not

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(8), b(8);
    for (int i = 0; i < 8; ++i) {
      a[i] = u(rng);
      b[i] = u(rng);
    }
    CHECK(kl_divergence(a, b) >= 0.0);
  }
}

TEST_CASE("kl_pre_post is zero without an edit and nonnegative always") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 0);
  ModelConfig mc = tiny_config(t.world.n_tokens());
  ModelWeights w = ModelWeights::init(mc);

  std::vector<std::vector<int>> prompts = {question_prompt(t.world, t.split.val[0]),
                                           question_prompt(t.world, t.split.val[1])};
  CHECK(kl_pre_post(w, nullptr, prompts) == 0.0);

  std::vector<InterventionVector> ivs = {
      build_intervention({0, 0}, Tensor::from_vector({4}, {1, 0, 0, 0}), 1.0)};
  ItiHook inert = ItiHook::build(ivs, mc, 0.0);
  CHECK(kl_pre_post(w, &inert, prompts) == 0.0);

  // random editors: Gibbs' inequality keeps every mean KL nonnegative
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<InterventionVector> rivs = {
        build_intervention({trial % 2, trial % 2}, Tensor::randn({4}, rng), 1.0)};
    ItiHook hook = ItiHook::build(rivs, mc, 1.0 + (trial % 5));
    double kl = kl_pre_post(w, &hook, prompts);
    CHECK(kl >= 0.0);
    CHECK(std::isfinite(kl));
  }

  // both directions available; they differ in general
  std::vector<InterventionVector> strong = {
      build_intervention({1, 1}, Tensor::from_vector({4}, {1, 2, -1, 0}), 3.0)};
  ItiHook hook = ItiHook::build(strong, mc, 5.0);
  double post_pre = kl_pre_post(w, &hook, prompts, KlDirection::post_vs_pre);
  double pre_post = kl_pre_post(w, &hook, prompts, KlDirection::pre_vs_post);
  CHECK(post_pre > 0.0);
  CHECK(pre_post > 0.0);
  CHECK(post_pre != pre_post);
}

TEST_CASE("mc_score ties count as incorrect") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 0);
  ModelWeights w = zero_model(t.world.n_tokens());
  // all logits identical: every candidate ties, strict argmax fails everywhere
  CHECK(mc_score(w, nullptr, t.mc_test) == 0.0);
}

TEST_CASE("mc_score matches a brute-force enumeration oracle") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 0);
  ModelWeights w = ModelWeights::init(tiny_config(t.world.n_tokens()));

  double got = mc_score(w, nullptr, t.mc_test);
  int correct = 0;
  for (const auto& mq : t.mc_test) {
    double best = -1e300;
    std::vector<size_t> argmax;
    for (size_t i = 0; i < mq.candidates.size(); ++i) {
      double lp = sequence_logprob(w, mq.prompt, mq.candidates[i]) /
                  static_cast<double>(mq.candidates[i].size());
      if (lp > best) {
        best = lp;
        argmax = {i};
      } else if (lp == best) {
        argmax.push_back(i);
      }
    }
    if (argmax.size() == 1 && argmax[0] == static_cast<size_t>(mq.truthful_index))
      ++correct;
  }
  CHECK(got == static_cast<double>(correct) / static_cast<double>(t.mc_test.size()));
}

TEST_CASE("mc_score is invariant to candidate order") {
  WorldConfig c = small_world();
  Task t = generate_task(c, 4);
  ModelWeights w = ModelWeights::init(tiny_config(t.world.n_tokens()));

  std::vector<McQuestion> shuffled = t.mc_test;
  std::mt19937_64 rng(8);
  for (auto& mq : shuffled) {
    std::vector<size_t> perm(mq.candidates.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::vector<int>> cands;
    for (size_t i : perm) cands.push_back(mq.candidates[i]);
    mq.truthful_index = static_cast<int>(
        std::find(perm.begin(), perm.end(), static_cast<size_t>(mq.truthful_index)) -
        perm.begin());
    mq.candidates = std::move(cands);
  }
  CHECK(mc_score(w, nullptr, t.mc_test) == mc_score(w, nullptr, shuffled));
}

TEST_CASE("a model trained on a truthful world aces multiple choice") {
  WorldConfig c;
  c.n_subjects = 4;
  c.n_values = 4;
  c.n_question_forms = 1;
  c.sentences_per_subject = 6;
  c.p_mis = 0.0;
  c.misconception_fraction = 0.0;
  Task t = generate_task(c, 0);

  ModelConfig mc = tiny_config(t.world.n_tokens());
  PretrainOptions opt;
  opt.epochs = 300;
  opt.batch_size = 8;
  PretrainResult res = pretrain(mc, t.corpus, opt);
  REQUIRE(res.train_accuracy >= 0.95);

  CHECK(mc_score(res.weights, nullptr, t.mc_test) == 1.0);

  // and its generations answer with the true value
  GenerateOptions g;
  g.max_new = 2;
  g.eos_token = t.world.eos;
  for (const auto& q : t.split.test) {
    auto prompt = question_prompt(t.world, q);
    auto out = generate(res.weights, prompt, g);
    std::vector<int> answer(out.begin() + static_cast<int64_t>(prompt.size()), out.end());
    JudgeVerdict v = judge(answer, q.subject, t.world);
    CHECK(v.truth == 1);
    CHECK(v.info == 1);
  }
}
