#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moxe/errors.hpp"
#include "moxe/train.hpp"

using namespace moxe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("moxe_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<int> text_tokens(std::size_t n, std::uint64_t seed) {
  // Repetitive pseudo-text: learnable but not trivial.
  const std::string words[] = {"the ", "cat ", "sat ", "on ", "a ", "mat. ", "and ", "dog ", "ran "};
  std::mt19937_64 rng(seed);
  std::vector<int> t;
  while (t.size() < n) {
    for (char ch : words[rng() % 9]) t.push_back(static_cast<unsigned char>(ch));
  }
  t.resize(n);
  return t;
}

RunConfig tiny_run() {
  RunConfig c;
  c.model.vocab_size = 256;
  c.model.embed_dim = 8;
  c.model.num_layers = 2;
  c.model.num_experts = 4;
  c.model.top_k = 2;
  c.model.num_heads = 2;
  c.model.seed = 3;
  c.train.batch_size = 2;
  c.train.seq_len = 8;
  c.train.steps = 12;
  c.train.learning_rate = 1e-2;
  c.train.warmup_steps = 3;
  c.train.eval_interval = 4;
  c.train.eval_tokens = 64;
  c.train.checkpoint_interval = 5;
  c.train.log_throughput = false;
  return c;
}

}  // namespace

// ---- config ------------------------------------------------------------------------

TEST(RunConfigText, ParsesCommentsAndWhitespace) {
  const auto c = parse_run_config("# desk run\n embed_dim = 32 \nnum_heads=4\n\nlearning_rate=1e-3 # faster\nsteps=7\n");
  EXPECT_EQ(c.model.embed_dim, 32u);
  EXPECT_EQ(c.model.num_heads, 4u);
  EXPECT_EQ(c.train.learning_rate, 1e-3);
  EXPECT_EQ(c.train.steps, 7u);
  EXPECT_EQ(c.model.num_layers, ModelConfig{}.num_layers);
}

TEST(RunConfigText, RoundTrip) {
  RunConfig c = tiny_run();
  c.train.beta2 = 0.987654321;
  const auto back = parse_run_config(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(RunConfigText, Errors) {
  EXPECT_THROW(parse_run_config("embed_dims=3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("steps=3\nsteps=4\n"), ConfigError);
  EXPECT_THROW(parse_run_config("just words\n"), ConfigError);
  EXPECT_THROW(parse_run_config("=3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("split_fraction=1.5\n"), ConfigError);
  EXPECT_THROW(parse_run_config("top_k=9\n"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/config.txt"), InputError);
}

// ---- data --------------------------------------------------------------------------

TEST(Corpus, BytesAreTokens) {
  const auto dir = scratch("corpus");
  std::ofstream(dir / "abc.txt") << "abc";
  const auto c = load_corpus(dir / "abc.txt", 0.9, 0);
  EXPECT_EQ(c.tokens, (std::vector<int>{97, 98, 99}));
  std::ofstream(dir / "empty.txt");
  EXPECT_THROW(load_corpus(dir / "empty.txt", 0.9, 0), InputError);
  EXPECT_THROW(load_corpus(dir / "missing.txt", 0.9, 0), InputError);
}

TEST(Corpus, SplitIsContiguousAndDeterministic) {
  std::vector<int> t(100);
  for (int i = 0; i < 100; ++i) t[i] = i;
  const auto a = make_corpus(t, 0.9, 5), b = make_corpus(t, 0.9, 5);
  EXPECT_EQ(a.train().size(), 90u);
  EXPECT_EQ(a.validation().size(), 10u);
  EXPECT_EQ(a.validation()[0], 90);
  EXPECT_EQ(a.split, b.split);
}

TEST(Corpus, UnigramEntropy) {
  EXPECT_NEAR(unigram_entropy(std::vector<int>{1, 1, 1}), 0.0, 1e-15);
  EXPECT_NEAR(unigram_entropy(std::vector<int>{1, 2, 3, 4}), std::log(4.0), 1e-15);
}

TEST(Batches, TargetsAreShiftedInputs) {
  std::vector<int> t(300);
  for (int i = 0; i < 300; ++i) t[i] = i % 256;
  BatchSampler s(t, 4, 16, 9);
  const Batch b = s.at(1);
  ASSERT_EQ(b.inputs.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto o = b.offsets[i];
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(b.inputs[i][j], t[o + j]);
      EXPECT_EQ(b.targets[i][j], t[o + j + 1]);
    }
  }
}

TEST(Batches, DeterministicPerStepAndInBounds) {
  std::vector<int> t(50, 7);
  BatchSampler a(t, 3, 10, 1), b(t, 3, 10, 1), other(t, 3, 10, 2);
  EXPECT_EQ(a.at(17).offsets, b.at(17).offsets);
  EXPECT_NE(a.at(17).offsets, a.at(18).offsets);
  EXPECT_NE(a.at(17).offsets, other.at(17).offsets);
  std::size_t lo = 100, hi = 0;
  for (std::uint64_t step = 0; step < 10000 / 3 + 1; ++step) {
    for (auto o : a.at(step).offsets) {
      ASSERT_LE(o + 10 + 1, t.size());
      lo = std::min(lo, o);
      hi = std::max(hi, o);
    }
  }
  EXPECT_EQ(lo, 0u);
  EXPECT_EQ(hi, t.size() - 11);
  EXPECT_THROW(BatchSampler(std::vector<int>(11, 0), 1, 10, 0), InputError);
}

// ---- optimizer -----------------------------------------------------------------------

namespace {
ModelParams scalar_model(double w) {
  ModelParams p;
  p.embedding = Tensor::vector({w});
  return p;
}

// One buffer per visited tensor; the embedding gets `g`.
Gradients scalar_grad(const ModelParams& p, double g) {
  Gradients out;
  for_each_parameter(p, [&](const std::string&, const Tensor& t) { out.emplace_back(t.numel(), 0.0); });
  out[0][0] = g;
  return out;
}
}  // namespace

TEST(Optimizer, ZeroGradientLeavesParameters) {
  auto p = scalar_model(0.25);
  auto st = make_optimizer_state(p);
  auto g = scalar_grad(p, 0.0);
  optimizer_step(p, g, st, {}, 0.1);
  EXPECT_EQ(p.embedding.item(), 0.25);
}

TEST(Optimizer, FirstStepIsLearningRate) {
  auto p = scalar_model(0.0);
  auto st = make_optimizer_state(p);
  auto g = scalar_grad(p, 1.0);
  const double lr = 1e-3, eps = 1e-8;
  optimizer_step(p, g, st, {0.9, 0.95, eps, 0.0}, lr);
  EXPECT_DOUBLE_EQ(p.embedding.item(), -lr * 1.0 / (1.0 + eps));
  EXPECT_EQ(st.step, 1u);
}

TEST(Optimizer, ClipScalesGlobalNorm) {
  Gradients g{{6.0}, {8.0}};
  EXPECT_DOUBLE_EQ(clip_by_global_norm(g, 1.0), 10.0);
  EXPECT_DOUBLE_EQ(g[0][0], 0.6);
  EXPECT_DOUBLE_EQ(g[1][0], 0.8);
  Gradients h{{3.0}};
  clip_by_global_norm(h, 0.0);
  EXPECT_EQ(h[0][0], 3.0);
}

TEST(Optimizer, NonFiniteGradientNamesParameter) {
  auto p = scalar_model(1.0);
  auto st = make_optimizer_state(p);
  auto g = scalar_grad(p, NAN);
  try {
    optimizer_step(p, g, st, {}, 0.1);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("embedding"), std::string::npos);
  }
  EXPECT_EQ(p.embedding.item(), 1.0);
}

TEST(Optimizer, WarmupSchedule) {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.warmup_steps = 4;
  EXPECT_EQ(scheduled_lr(c, 1), 0.25);
  EXPECT_EQ(scheduled_lr(c, 4), 1.0);
  EXPECT_EQ(scheduled_lr(c, 100), 1.0);
  c.warmup_steps = 0;
  EXPECT_EQ(scheduled_lr(c, 1), 1.0);
}

// ---- checkpoints ---------------------------------------------------------------------

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto dir = scratch("ckpt");
  Checkpoint ck;
  ck.config = tiny_run();
  ck.params = init_model(ck.config.model);
  ck.optimizer = make_optimizer_state(ck.params);
  ck.optimizer.m[3][1] = 0.1234;
  ck.optimizer.v[5][0] = 5e-300;
  ck.optimizer.step = 41;
  ck.step = 42;
  save_checkpoint(dir / "a.bin", ck);
  const auto back = load_checkpoint(dir / "a.bin");
  EXPECT_EQ(back.step, 42u);
  EXPECT_EQ(back.optimizer.step, 41u);
  EXPECT_EQ(back.config.to_text(), ck.config.to_text());
  EXPECT_EQ(back.optimizer.m, ck.optimizer.m);
  EXPECT_EQ(back.optimizer.v, ck.optimizer.v);
  std::vector<std::vector<double>> a, b;
  for_each_parameter(ck.params, [&](const std::string&, const Tensor& t) { a.emplace_back(t.values().begin(), t.values().end()); });
  for_each_parameter(back.params, [&](const std::string&, const Tensor& t) { b.emplace_back(t.values().begin(), t.values().end()); });
  EXPECT_EQ(a, b);
  save_checkpoint(dir / "b.bin", back);
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = scratch("ckpt_bad");
  std::ofstream(dir / "junk.bin") << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(dir / "junk.bin"), InputError);
  EXPECT_THROW(load_checkpoint(dir / "none.bin"), InputError);

  Checkpoint ck;
  ck.config = tiny_run();
  ck.params = init_model(ck.config.model);
  ck.optimizer = make_optimizer_state(ck.params);
  save_checkpoint(dir / "ok.bin", ck);
  auto bytes = slurp(dir / "ok.bin");
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(load_checkpoint(dir / "short.bin"), InputError);
  bytes[8] = 99;  // version field
  std::ofstream(dir / "version.bin", std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(dir / "version.bin"), InputError);
}

// ---- evaluation and training -----------------------------------------------------------

TEST(Evaluate, UniformModelOnRandomBytes) {
  RunConfig c = tiny_run();
  auto p = init_model(c.model);
  p.head = Tensor::zeros(p.head.shape());  // uniform predictor
  std::mt19937_64 rng(1);
  std::vector<int> stream(2000);
  for (auto& t : stream) t = static_cast<int>(rng() % 256);
  const auto r = evaluate(p, c.model, stream, 32);
  EXPECT_NEAR(r.ce, std::log(256.0), 1e-12);
  EXPECT_EQ(r.tokens, 1999u);
  EXPECT_DOUBLE_EQ(r.perplexity, std::exp(r.ce));
  const auto again = evaluate(p, c.model, stream, 32);
  EXPECT_EQ(again.ce, r.ce);
}

TEST(Evaluate, VocabularyMismatchIsConfigError) {
  RunConfig c = tiny_run();
  c.model.vocab_size = 16;
  const auto p = init_model(c.model);
  EXPECT_THROW(evaluate(p, c.model, std::vector<int>{1, 2, 200}, 4), ConfigError);
}

TEST(Trainer, SmokeRunLogsFiniteValues) {
  const auto dir = scratch("smoke");
  RunConfig c = tiny_run();
  Trainer t(c, make_corpus(text_tokens(4000, 1), 0.9, 0), dir);
  std::vector<StepRecord> recs;
  t.run(std::nullopt, [&](const StepRecord& r) { recs.push_back(r); });
  ASSERT_EQ(recs.size(), 12u);
  for (const auto& r : recs) {
    for (double v : {r.ce, r.l_d, r.l_group, r.l_z, r.l_aux, r.total, r.lr}) EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(r.usage.size(), 8u);
  }
  std::ifstream m(dir / "metrics.csv");
  std::string header;
  std::getline(m, header);
  EXPECT_EQ(header,
            "step,ce,l_d,l_group,l_z,l_aux,total,lr,tok_per_s,usage_L0_E0,usage_L0_E1,usage_L0_E2,usage_L0_E3,"
            "usage_L1_E0,usage_L1_E1,usage_L1_E2,usage_L1_E3");
  std::size_t rows = 0;
  for (std::string line; std::getline(m, line);) ++rows;
  EXPECT_EQ(rows, 12u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_EQ(load_checkpoint(dir / "checkpoint.bin").step, 12u);
  std::ifstream e(dir / "eval.csv");
  std::size_t eval_rows = 0;
  for (std::string line; std::getline(e, line);) ++eval_rows;
  EXPECT_EQ(eval_rows, 1u + 3u);
}

TEST(Trainer, ResumeReproducesUninterruptedRun) {
  const auto tokens = text_tokens(4000, 2);
  RunConfig c = tiny_run();
  const auto full = scratch("full"), split = scratch("split");
  Trainer(c, make_corpus(tokens, 0.9, 0), full).run();

  {
    Trainer first(c, make_corpus(tokens, 0.9, 0), split);
    first.run(7);  // final checkpoint at step 7
  }
  Trainer resumed = Trainer::resume(split / "checkpoint.bin", tokens, split);
  EXPECT_EQ(resumed.current_step(), 7u);
  resumed.run();
  for (const char* f : {"metrics.csv", "routing.csv", "eval.csv"}) EXPECT_EQ(slurp(full / f), slurp(split / f)) << f;
  EXPECT_EQ(slurp(full / "checkpoint.bin"), slurp(split / "checkpoint.bin"));
}

TEST(Trainer, ResumeDropsRowsPastTheCheckpoint) {
  const auto tokens = text_tokens(4000, 3);
  RunConfig c = tiny_run();
  const auto full = scratch("full2"), crash = scratch("crash");
  Trainer(c, make_corpus(tokens, 0.9, 0), full).run();
  {
    Trainer t(c, make_corpus(tokens, 0.9, 0), crash);
    t.run(5);  // checkpoint.bin at step 5
    fs::copy_file(crash / "checkpoint.bin", crash / "at5.bin");
    t.run(9);  // rows 6..9 are "lost work"
  }
  Trainer resumed = Trainer::resume(crash / "at5.bin", tokens, crash);
  resumed.run();
  for (const char* f : {"metrics.csv", "routing.csv", "eval.csv"}) EXPECT_EQ(slurp(full / f), slurp(crash / f)) << f;
}

TEST(Trainer, FixedSeedRunsAreIdentical) {
  const auto tokens = text_tokens(4000, 4);
  RunConfig c = tiny_run();
  const auto a = scratch("det_a"), b = scratch("det_b");
  Trainer(c, make_corpus(tokens, 0.9, 0), a).run();
  Trainer(c, make_corpus(tokens, 0.9, 0), b).run();
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
}

TEST(Trainer, RejectsTooShortCorpus) {
  RunConfig c = tiny_run();
  EXPECT_THROW(Trainer(c, make_corpus(text_tokens(9, 1), 0.9, 0), scratch("short")), InputError);
}
