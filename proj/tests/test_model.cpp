#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "lp/checkpoint_io.hpp"
#include "lp/corpus.hpp"
#include "lp/model.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

using lp::Index;
using lp::Matrix;

namespace {

template <class S>
lp::Checkpoint<S> seeded_checkpoint(uint64_t seed, lp::ModelConfig cfg) {
  cfg.seed = seed;
  return lp::generate_toy_checkpoint<S>(cfg);
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("attention residual of zero weights is the zero map") {
  auto cfg = testutil::tiny_config();
  auto zero = testutil::zero_layer<double>(cfg);
  auto x = testutil::random_matrix<double>(3, 5, cfg.d_model);
  Matrix<double> out = lp::attention_residual<double>(x, zero, cfg);
  CHECK(out.rows() == 5);
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) CHECK(out(i, j) == 0.0);
  }
}

TEST_CASE("attention residual matches per-head reference") {
  auto cfg = testutil::tiny_config();
  auto layer = testutil::random_layer<double>(7, cfg);

  // single token
  auto x1 = testutil::random_matrix<double>(8, 1, cfg.d_model);
  CHECK(oracle::rel_error<double>(lp::attention_residual<double>(x1, layer, cfg),
                                  oracle::attention_residual(x1, layer, cfg)) < 1e-12);
  // longer sequence, both norm kinds
  for (auto nk : {lp::NormKind::Rms, lp::NormKind::LayerNorm}) {
    auto c = cfg;
    c.norm_kind = nk;
    auto x = testutil::random_matrix<double>(9, 7, cfg.d_model);
    CHECK(oracle::rel_error<double>(lp::attention_residual<double>(x, layer, c),
                                    oracle::attention_residual(x, layer, c)) < 1e-12);
  }
  // f32 tolerance per contract
  auto layer_f = testutil::random_layer<float>(7, cfg);
  auto xf = testutil::random_matrix<float>(9, 7, cfg.d_model);
  CHECK(oracle::rel_error<float>(lp::attention_residual<float>(xf, layer_f, cfg),
                                 oracle::attention_residual(xf, layer_f, cfg)) < 1e-6);
}

TEST_CASE("attention is causal: prefix rows ignore later tokens") {
  auto cfg = testutil::tiny_config();
  auto layer = testutil::random_layer<double>(17, cfg);
  auto x = testutil::random_matrix<double>(18, 6, cfg.d_model);
  Matrix<double> base = lp::attention_residual<double>(x, layer, cfg);
  Matrix<double> perturbed = x;
  perturbed.row(4).array() += 3.0;
  Matrix<double> out = lp::attention_residual<double>(perturbed, layer, cfg);
  for (Index i = 0; i < 4; ++i) {
    for (Index j = 0; j < out.cols(); ++j) CHECK(out(i, j) == base(i, j));
  }
  // and some row at or after the perturbation must change
  CHECK((out.row(4) - base.row(4)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("sequence length limit enforced") {
  auto cfg = testutil::tiny_config();
  cfg.max_seq_len = 4;
  auto layer = testutil::random_layer<double>(5, cfg);
  auto x = testutil::random_matrix<double>(6, 5, cfg.d_model);
  CHECK_THROWS_AS(lp::attention_residual<double>(x, layer, cfg), lp::SequenceError);
}

TEST_CASE("ffn residual zero map and scalar reference") {
  auto cfg = testutil::tiny_config(2, 4, 2, 8, 16);
  cfg.head_dim = 2;
  auto layer = testutil::random_layer<double>(23, cfg);
  layer.w_down.setZero();
  auto x = testutil::random_matrix<double>(24, 3, cfg.d_model);
  Matrix<double> out = lp::ffn_residual<double>(x, layer, cfg);
  for (Index i = 0; i < out.rows(); ++i) {
    for (Index j = 0; j < out.cols(); ++j) CHECK(out(i, j) == 0.0);
  }

  auto layer2 = testutil::random_layer<double>(25, cfg);
  auto x2 = testutil::random_matrix<double>(26, 2, cfg.d_model);
  CHECK(oracle::rel_error<double>(lp::ffn_residual<double>(x2, layer2, cfg),
                                  oracle::ffn_residual(x2, layer2, cfg)) < 1e-12);
  for (auto act : {lp::Activation::Silu, lp::Activation::Gelu}) {
    auto c = cfg;
    c.activation = act;
    CHECK(oracle::rel_error<double>(lp::ffn_residual<double>(x2, layer2, c),
                                    oracle::ffn_residual(x2, layer2, c)) < 1e-12);
  }
}

TEST_CASE("ffn is positionwise: permuting rows permutes outputs") {
  auto cfg = testutil::tiny_config();
  auto layer = testutil::random_layer<double>(31, cfg);
  auto x = testutil::random_matrix<double>(32, 5, cfg.d_model);
  Matrix<double> base = lp::ffn_residual<double>(x, layer, cfg);
  std::vector<int> perm = {4, 2, 0, 1, 3};
  Matrix<double> xp(5, cfg.d_model);
  for (int i = 0; i < 5; ++i) xp.row(i) = x.row(perm[size_t(i)]);
  Matrix<double> outp = lp::ffn_residual<double>(xp, layer, cfg);
  for (int i = 0; i < 5; ++i) {
    for (Index j = 0; j < base.cols(); ++j) CHECK(outp(i, j) == base(perm[size_t(i)], j));
  }
}

TEST_CASE("forward: singleton parallel groups match the sequential plan bitwise") {
  auto cfg = testutil::tiny_config(3);
  auto ckpt = seeded_checkpoint<double>(41, cfg);
  auto tokens = testutil::random_tokens<double>(42, 12, cfg.vocab_size);
  auto seq = lp::ExecutionPlan::sequential(3);
  lp::ExecutionPlan singles;
  for (int i = 0; i < 3; ++i) singles.stages.push_back(lp::Stage::parallel({i}));
  CHECK(testutil::bitwise_equal<double>(lp::forward<double>(ckpt, tokens, seq),
                                        lp::forward<double>(ckpt, tokens, singles)));
}

TEST_CASE("forward: paired stage matches direct PAR formula") {
  auto cfg = testutil::tiny_config(4);
  auto ckpt = seeded_checkpoint<double>(43, cfg);
  auto tokens = testutil::random_tokens<double>(44, 9, cfg.vocab_size);
  lp::ExecutionPlan plan;
  plan.stages.push_back(lp::Stage::sequential(0));
  plan.stages.push_back(lp::Stage::parallel({1, 2}));
  plan.stages.push_back(lp::Stage::sequential(3));
  CHECK(oracle::rel_error<double>(lp::forward<double>(ckpt, tokens, plan),
                                  oracle::forward(ckpt, tokens, plan)) < 1e-12);
}

TEST_CASE("forward validates plans and reports offending layers") {
  auto cfg = testutil::tiny_config(3);
  auto ckpt = seeded_checkpoint<double>(45, cfg);
  auto tokens = testutil::random_tokens<double>(46, 4, cfg.vocab_size);

  lp::ExecutionPlan dup;
  dup.stages = {lp::Stage::sequential(0), lp::Stage::sequential(0), lp::Stage::sequential(1),
                lp::Stage::sequential(2)};
  CHECK_THROWS_WITH_AS(lp::forward<double>(ckpt, tokens, dup),
                       doctest::Contains("duplicated layers [0]"), lp::PlanError);

  lp::ExecutionPlan oob;
  oob.stages = {lp::Stage::sequential(0), lp::Stage::sequential(7)};
  CHECK_THROWS_WITH_AS(lp::forward<double>(ckpt, tokens, oob),
                       doctest::Contains("out-of-range layers [7]"), lp::PlanError);

  // missing layers are allowed at forward time (pruned plans)
  lp::ExecutionPlan pruned;
  pruned.stages = {lp::Stage::sequential(0), lp::Stage::sequential(2)};
  CHECK_NOTHROW(lp::forward<double>(ckpt, tokens, pruned));
  pruned.validate(3, false);
  CHECK_THROWS_WITH_AS(pruned.validate(3, true), doctest::Contains("missing layers [1]"),
                       lp::PlanError);
}

TEST_CASE("forward causality at the logits level") {
  auto cfg = testutil::tiny_config(2);
  auto ckpt = seeded_checkpoint<double>(47, cfg);
  auto tokens = testutil::random_tokens<double>(48, 8, cfg.vocab_size);
  lp::ExecutionPlan plan;
  plan.stages.push_back(lp::Stage::parallel({0, 1}));
  Matrix<double> base = lp::forward<double>(ckpt, tokens, plan);
  auto tokens2 = tokens;
  tokens2[5] = (tokens2[5] + 1) % cfg.vocab_size;
  Matrix<double> out = lp::forward<double>(ckpt, tokens2, plan);
  for (Index t = 0; t < 5; ++t) {
    for (Index j = 0; j < base.cols(); ++j) CHECK(out(t, j) == base(t, j));
  }
}

TEST_CASE("perplexity of a uniform model is vocab size") {
  auto cfg = testutil::tiny_config(1, 8, 2, 16, 24);
  cfg.head_dim = 4;
  auto ckpt = seeded_checkpoint<double>(51, cfg);
  ckpt.output_head.setZero();
  auto corpus = lp::generate_corpus(5, 2, 300, cfg.vocab_size);
  const double ppl =
      lp::perplexity<double>(ckpt, corpus.tokens, lp::ExecutionPlan::sequential(1), 32);
  CHECK(ppl == doctest::Approx(24.0).epsilon(1e-9));
}

TEST_CASE("perplexity is deterministic and respects stride flag") {
  auto cfg = testutil::tiny_config(2);
  cfg.max_seq_len = 16;
  auto ckpt = seeded_checkpoint<double>(52, cfg);
  auto corpus = lp::generate_corpus(6, 3, 200, cfg.vocab_size);
  const auto plan = lp::ExecutionPlan::sequential(2);
  const double a = lp::perplexity<double>(ckpt, corpus.tokens, plan, 8);
  const double b = lp::perplexity<double>(ckpt, corpus.tokens, plan, 8);
  CHECK(a == b);
  // stride capped by max_seq_len
  const double c = lp::perplexity<double>(ckpt, corpus.tokens, plan, 1000);
  const double d = lp::perplexity<double>(ckpt, corpus.tokens, plan, 16);
  CHECK(c == d);
  std::vector<int> tiny = {1};
  CHECK_THROWS(lp::perplexity<double>(ckpt, tiny, plan, 8));
}

TEST_CASE("checkpoint save/load round trip is byte identical") {
  auto cfg = testutil::tiny_config();
  auto ckpt = seeded_checkpoint<double>(53, cfg);
  const std::string p1 = temp_path("lp_test_ckpt1.bin");
  const std::string p2 = temp_path("lp_test_ckpt2.bin");
  lp::save_checkpoint(ckpt, p1);
  auto loaded = lp::load_checkpoint<double>(p1);
  lp::save_checkpoint(loaded, p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1.size() > 0);
  CHECK(s1 == s2);
  CHECK(lp::checkpoint_dtype(p1) == "f64");
  CHECK_THROWS_AS(lp::load_checkpoint<float>(p1), lp::CheckpointFormatError);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint loader rejects foreign files") {
  const std::string p = temp_path("lp_test_not_ckpt.bin");
  std::ofstream(p, std::ios::binary) << "definitely not a checkpoint";
  CHECK_THROWS_AS(lp::load_checkpoint<double>(p), lp::CheckpointFormatError);
  std::remove(p.c_str());
}

TEST_CASE("toy checkpoint generation is seed deterministic") {
  auto cfg = testutil::tiny_config();
  auto a = seeded_checkpoint<double>(54, cfg);
  auto b = seeded_checkpoint<double>(54, cfg);
  auto c = seeded_checkpoint<double>(55, cfg);
  CHECK(testutil::bitwise_equal<double>(a.embedding, b.embedding));
  CHECK(testutil::bitwise_equal<double>(a.layers[1].w_down, b.layers[1].w_down));
  CHECK_FALSE(testutil::bitwise_equal<double>(a.embedding, c.embedding));
}

TEST_CASE("corpus generator: deterministic, in range, learnable structure") {
  auto c1 = lp::generate_corpus(9, 3, 5000, 256);
  auto c2 = lp::generate_corpus(9, 3, 5000, 256);
  CHECK(c1.tokens == c2.tokens);
  for (int t : c1.tokens) {
    CHECK(t >= 0);
    CHECK(t < 256);
  }
  // sparse next-token structure: the distribution is far from uniform
  std::vector<int> counts(256, 0);
  for (int t : c1.tokens) counts[size_t(t)]++;
  int used = 0;
  for (int c : counts) used += c > 0 ? 1 : 0;
  CHECK(used < 256);  // only hashed candidates appear
  CHECK(used > 16);
}

TEST_CASE("corpus file round trip") {
  auto corpus = lp::generate_corpus(10, 2, 333, 256);
  const std::string p = temp_path("lp_test_corpus.bin");
  lp::save_corpus(corpus, p);
  auto loaded = lp::load_corpus(p);
  CHECK(loaded.tokens == corpus.tokens);
  std::remove(p.c_str());
}
