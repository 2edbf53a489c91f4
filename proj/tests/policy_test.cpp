#include <gtest/gtest.h>

#include <cmath>
#include <array>
#include <cstring>
#include <numeric>

#include "opdlab/policy.hpp"
#include "test_util.hpp"

namespace opdlab {
namespace {

TEST(InitPolicy, ZeroScaleIsUniform) {
  const PolicySpec spec{2, 16, 1.0};
  const auto p = init_policy(spec, 1, 0.0);
  const TokenSeq state{3, 10, 4, 13};
  for (double x : next_token_dist(p, state)) EXPECT_DOUBLE_EQ(x, 1.0 / 16);
}

TEST(InitPolicy, Deterministic) {
  const PolicySpec spec{2, 16, 1.0};
  EXPECT_EQ(init_policy(spec, 42, 0.3).params(), init_policy(spec, 42, 0.3).params());
  EXPECT_NE(init_policy(spec, 42, 0.3).params(), init_policy(spec, 43, 0.3).params());
}

TEST(InitPolicy, SmallScaleEntropiesNearMaximal) {
  const PolicySpec spec{2, 16, 1.0};
  const auto p = init_policy(spec, 5, 0.1);
  double worst = 0.0;
  for (std::size_t row = 0; row < spec.row_count(); ++row) {
    double h = 0.0;
    for (double q : p.row_probs(row)) h -= q * std::log(q);
    worst = std::max(worst, std::log(16.0) - h);
  }
  EXPECT_LT(worst, 0.01);
}

TEST(NextTokenDist, ForcedSoftmax) {
  const PolicySpec spec{1, 2, 1.0};
  // row for context token 0: logits (ln 2, 0)
  Policy p(spec, {std::log(2.0), 0.0, 0.0, 0.0}, RoleTag::kStudent);
  const auto d = next_token_dist(p, TokenSeq{0});
  EXPECT_NEAR(d[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(d[1], 1.0 / 3.0, 1e-15);
}

TEST(NextTokenDist, NormalizedEverywhere) {
  const PolicySpec spec{2, 16, 0.7};
  const auto p = init_policy(spec, 9, 5.0);
  for (std::size_t row = 0; row < spec.row_count(); ++row) {
    const auto probs = p.row_probs(row);
    EXPECT_NEAR(std::accumulate(probs.begin(), probs.end(), 0.0), 1.0, 1e-12);
  }
}

// Property: tokens outside the last-k window never change the distribution.
TEST(NextTokenDist, ContextTableLocality) {
  RngStream gen(3);
  for (int k = 1; k <= 3; ++k) {
    const PolicySpec spec{k, 6, 1.0};
    const auto p = init_policy(spec, 17, 2.0);
    for (int trial = 0; trial < 50; ++trial) {
      TokenSeq state;
      const auto len = static_cast<std::size_t>(k + 1 + gen.below(5));
      for (std::size_t i = 0; i < len; ++i) state.push_back(static_cast<Token>(gen.below(5)));
      TokenSeq mutated = state;
      for (std::size_t i = 0; i + k < mutated.size(); ++i) mutated[i] = static_cast<Token>(gen.below(5));
      EXPECT_EQ(next_token_dist(p, state), next_token_dist(p, mutated));
    }
  }
}

TEST(NextTokenDist, ShortStatesArePadded) {
  const PolicySpec spec{3, 4, 1.0};
  const auto p = init_policy(spec, 1, 1.0);
  // a one-token state reads the window (pad, pad, t)
  const Token pad = spec.pad_id();
  EXPECT_EQ(p.row_of(TokenSeq{2}, {}), static_cast<std::size_t>((pad * 4 + pad) * 4 + 2));
}

TEST(SampleTrajectory, DegenerateIsDeterministic) {
  const auto vocab = Vocab::arithmetic();
  const PolicySpec spec{1, 16, 1.0};
  auto params = std::vector<double>(spec.param_count(), 0.0);
  // Every context emits '#' except after '#' (emit 7) and after 7 (emit eos).
  for (std::size_t row = 0; row < spec.row_count(); ++row) {
    Token next = 14;
    if (row == 14) next = 7;
    if (row == 7) next = vocab.eos();
    params[row * 16 + static_cast<std::size_t>(next)] = 1e6;
  }
  const Policy p(spec, params, RoleTag::kStudent);
  const auto task = make_arithmetic_task(vocab, "3+4=");
  RngStream r1(1), r2(2);
  const auto a = sample_trajectory(p, task, vocab, r1);
  const auto b = sample_trajectory(p, task, vocab, r2);
  EXPECT_EQ(a.response, b.response);
  EXPECT_EQ(vocab.render(a.response), "#7<eos>");
  EXPECT_EQ(a.reward, 1);
  EXPECT_FALSE(a.truncated);
}

TEST(SampleTrajectory, RecordedLogProbsMatchRecomputation) {
  const auto vocab = Vocab::arithmetic();
  const auto p = init_policy({3, 16, 0.9}, 4, 1.5);
  const auto tasks = generate_tasks(vocab, 5, 20, 1);
  RngStream rng(8);
  for (const auto& task : tasks) {
    const auto traj = sample_trajectory(p, task, vocab, rng);
    const auto lp = log_prob(p, traj);
    ASSERT_EQ(lp.per_token.size(), traj.logprob_actor.size());
    for (std::size_t t = 0; t < lp.per_token.size(); ++t) {
      EXPECT_EQ(lp.per_token[t], traj.logprob_actor[t]);
      EXPECT_LE(traj.logprob_actor[t], 0.0);
    }
    EXPECT_EQ(lp.total, traj.logprob_sum());
    EXPECT_LE(static_cast<int>(traj.response.size()), task.max_response_len);
  }
}

TEST(SampleTrajectory, UniformEosPositionIsGeometric) {
  const auto vocab = Vocab::arithmetic();
  const auto p = init_policy({2, 16, 1.0}, 0, 0.0);
  auto task = make_arithmetic_task(vocab, "3+4=");
  task.max_response_len = 3;
  constexpr int kSamples = 100000;
  std::array<int, 4> counts{};  // eos at step 1, 2, 3, or truncated
  RngStream rng(2024);
  for (int i = 0; i < kSamples; ++i) {
    const auto traj = sample_trajectory(p, task, vocab, rng);
    counts[traj.truncated ? 3 : traj.response.size() - 1]++;
  }
  const double q = 1.0 / 16.0;
  const std::array<double, 4> expected{q, (1 - q) * q, (1 - q) * (1 - q) * q, std::pow(1 - q, 3)};
  for (int i = 0; i < 4; ++i) {
    const double freq = counts[i] / static_cast<double>(kSamples);
    const double se = std::sqrt(expected[i] * (1 - expected[i]) / kSamples);
    EXPECT_LE(std::abs(freq - expected[i]), 3 * se) << "bin " << i;
  }
}

TEST(LogProb, UniformPolicy) {
  const auto p = init_policy({2, 16, 1.0}, 0, 0.0);
  const TokenSeq prompt{1, 10, 2, 13};
  const TokenSeq response{4, 14, 4, 15};
  EXPECT_NEAR(log_prob(p, prompt, response).total, -4 * std::log(16.0), 1e-12);
}

TEST(GradLogProb, UniformSingleToken) {
  const auto p = init_policy({2, 16, 1.0}, 0, 0.0);
  const TokenSeq prompt{1, 10, 2, 13};
  const auto g = grad_log_prob(p, prompt, TokenSeq{5});
  ASSERT_EQ(g.rows().size(), 1u);
  const auto& row = g.rows().begin()->second;
  for (int j = 0; j < 16; ++j) EXPECT_DOUBLE_EQ(row[j], (j == 5 ? 1.0 : 0.0) - 1.0 / 16);
}

TEST(GradLogProb, RowsSumToZero) {
  const auto vocab = Vocab::arithmetic();
  const auto p = init_policy({2, 16, 1.3}, 8, 2.0);
  RngStream rng(1);
  for (const auto& task : generate_tasks(vocab, 2, 10, 2)) {
    const auto traj = sample_trajectory(p, task, vocab, rng);
    const auto g = grad_log_prob(p, traj);
    for (const auto& [r, row] : g.rows())
      EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 0.0, 1e-12);
  }
}

TEST(GradLogProb, MatchesCentralDifferences) {
  const auto vocab = Vocab::generic(3);
  RngStream gen(77);
  int checked = 0;
  for (int trial = 0; trial < 24; ++trial) {
    const int k = 1 + static_cast<int>(gen.below(2));
    const double temp = 0.5 + gen.uniform();
    const auto p = init_policy({k, 4, temp}, gen.next(), 2.0);
    TaskInstance task{"t", {0, 1}, {0}, 4};
    RngStream rng(gen.next());
    const auto traj = sample_trajectory(p, task, vocab, rng);
    const auto analytic = grad_log_prob(p, traj);
    const auto numeric = testutil::central_difference(p, [&](const Policy& q) {
      return log_prob(q, traj).total;
    });
    EXPECT_LE(relative_max_difference(analytic, numeric), 1e-6) << "trial " << trial;
    ++checked;
  }
  EXPECT_GE(checked, 20);
}

TEST(ApplyUpdate, ZeroGradientAndZeroRate) {
  const auto p = init_policy({2, 5, 1.0}, 3, 1.0);
  OptimizerState st;
  SparseGrad zero(5);
  zero.row(3);
  EXPECT_EQ(apply_update(p, zero, st, {}, "test").params(), p.params());
  SparseGrad g(5);
  g.row(2)[1] = 7.0;
  StepConfig no_rate;
  no_rate.learning_rate = 0.0;
  EXPECT_EQ(apply_update(p, g, st, no_rate, "test").params(), p.params());
}

TEST(ApplyUpdate, ClipsToThreshold) {
  auto p = init_policy({1, 4, 1.0}, 0, 0.0);
  SparseGrad g(4);
  g.row(0) = {4.0, 0.0, 0.0, 0.0};
  OptimizerState st;
  StepConfig cfg;
  cfg.learning_rate = 1.0;
  cfg.grad_clip_norm = 1.0;
  const auto info = apply_update_inplace(p, g, st, cfg, "test");
  EXPECT_DOUBLE_EQ(info.grad_norm, 4.0);
  EXPECT_DOUBLE_EQ(info.applied_norm, 1.0);
  EXPECT_DOUBLE_EQ(p.params()[0], 1.0);  // ascent along +gradient, clipped to norm 1
}

TEST(ApplyUpdate, NonFiniteGradientNamesLocation) {
  const auto p = init_policy({1, 4, 1.0}, 0, 0.0);
  SparseGrad g(4);
  g.row(1)[2] = std::nan("");
  OptimizerState st;
  try {
    apply_update(p, g, st, {}, "stage FKL step 12");
    FAIL() << "expected RuntimeFailure";
  } catch (const RuntimeFailure& e) {
    EXPECT_NE(std::string(e.what()).find("stage FKL step 12"), std::string::npos);
  }
}

TEST(ApplyUpdate, AdamMovesAlongGradient) {
  const auto p = init_policy({1, 4, 1.0}, 0, 0.0);
  SparseGrad g(4);
  g.row(0) = {0.5, -0.5, 0.0, 0.0};
  OptimizerState st;
  StepConfig cfg;
  cfg.optimizer = OptimizerKind::kAdam;
  cfg.learning_rate = 0.1;
  const auto q = apply_update(p, g, st, cfg, "adam");
  EXPECT_NEAR(q.params()[0], 0.1, 1e-6);
  EXPECT_NEAR(q.params()[1], -0.1, 1e-6);
  EXPECT_EQ(q.params()[4], 0.0);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const auto p = init_policy({3, 5, 0.8}, 12, 3.0, RoleTag::kTeacherRl);
  const auto q = decode_checkpoint(encode_checkpoint(p));
  EXPECT_EQ(q.spec(), p.spec());
  EXPECT_EQ(q.role(), RoleTag::kTeacherRl);
  ASSERT_EQ(q.params().size(), p.params().size());
  EXPECT_EQ(std::memcmp(q.params().data(), p.params().data(), p.params().size() * sizeof(double)), 0);
  EXPECT_EQ(q.fingerprint(), p.fingerprint());
}

TEST(Checkpoint, RejectsTruncationAndBadMagic) {
  const auto p = init_policy({2, 4, 1.0}, 1, 1.0);
  auto buf = encode_checkpoint(p);
  EXPECT_THROW(decode_checkpoint(buf.substr(0, buf.size() - 3)), RuntimeFailure);
  EXPECT_THROW(decode_checkpoint(buf.substr(0, 20)), RuntimeFailure);
  buf[0] = 'X';
  EXPECT_THROW(decode_checkpoint(buf), RuntimeFailure);
}

}  // namespace
}  // namespace opdlab
