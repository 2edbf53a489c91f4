#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "opdlab/oracle.hpp"
#include "test_util.hpp"

namespace opdlab {
namespace {

TaskInstance generic_task(int max_len) { return TaskInstance{"g", {0}, {}, max_len}; }

Policy random_policy(int k, int v, RngStream& gen, double scale = 1.5) {
  return init_policy({k, v, 0.7 + 0.6 * gen.uniform()}, gen.next(), scale);
}

TEST(Enumerate, ThreeTokenVocabDepthTwo) {
  const auto v = Vocab::generic(2);  // a, b, eos
  const auto support = enumerate_responses(generic_task(2), v);
  ASSERT_EQ(support.size(), 7u);
  std::vector<std::string> rendered;
  for (const auto& r : support) rendered.push_back(v.render(r.tokens) + (r.truncated ? "|T" : ""));
  // locked regression order: eos first, then content tokens depth first
  const std::vector<std::string> expected{"<eos>", "a<eos>", "aa|T", "ab|T", "b<eos>", "ba|T", "bb|T"};
  EXPECT_EQ(rendered, expected);
  EXPECT_DOUBLE_EQ(support_size(3, 2), 7.0);
}

TEST(Enumerate, BaseCaseAndNoDuplicates) {
  const auto v = Vocab::generic(4);
  const auto one = enumerate_responses(generic_task(1), v);
  ASSERT_EQ(one.size(), 5u);
  EXPECT_EQ(one[0].tokens, TokenSeq{v.eos()});
  for (std::size_t i = 1; i < one.size(); ++i) EXPECT_TRUE(one[i].truncated);

  const auto deep = enumerate_responses(generic_task(4), v);
  std::set<TokenSeq> uniq;
  for (const auto& r : deep) uniq.insert(r.tokens);
  EXPECT_EQ(uniq.size(), deep.size());
  EXPECT_DOUBLE_EQ(static_cast<double>(deep.size()), support_size(5, 4));
}

TEST(Enumerate, CapRejectsLargeInstance) {
  const auto v = Vocab::arithmetic();
  auto task = make_arithmetic_task(v, "3+4=");
  task.max_response_len = 6;
  try {
    enumerate_responses(task, v);
    FAIL() << "expected OracleCapError";
  } catch (const OracleCapError& e) {
    EXPECT_NE(std::string(e.what()).find("instance too large for oracle"), std::string::npos);
  }
  task.max_response_len = 5;
  EXPECT_NO_THROW(check_enumerable(16, 5, kDefaultEnumerationCap));
}

TEST(Distribution, NormalizedForRandomPolicies) {
  RngStream gen(1);
  const auto v = Vocab::generic(3);
  for (int i = 0; i < 10; ++i) {
    const auto p = random_policy(1 + static_cast<int>(gen.below(3)), 4, gen, 3.0);
    EXPECT_NEAR(sequence_distribution(p, generic_task(4), v).total_mass(), 1.0, 1e-10);
  }
}

TEST(RewardShaped, ZeroRewardReproducesReference) {
  RngStream gen(2);
  const auto v = Vocab::generic(2);
  const auto ref = random_policy(2, 3, gen);
  const auto task = generic_task(3);
  const auto base = sequence_distribution(ref, task, v);
  const auto shaped = reward_shaped_target(ref, task, v, 0.3, [](const TokenSeq&) { return 0.0; });
  ASSERT_EQ(base.probs.size(), shaped.probs.size());
  for (std::size_t i = 0; i < base.probs.size(); ++i) EXPECT_NEAR(shaped.probs[i], base.probs[i], 1e-15);
  EXPECT_NEAR(shaped.log_partition, 0.0, 1e-12);
}

TEST(RewardShaped, TwoSequenceLockedConstant) {
  // V=2, T_max=1: support {eos, a(truncated)}, uniform reference.
  const auto v = Vocab::generic(1);
  const auto ref = init_policy({1, 2, 1.0}, 0, 0.0);
  const auto target = reward_shaped_target(ref, generic_task(1), v, 1.0,
                                           [&](const TokenSeq& y) { return y == TokenSeq{v.eos()} ? 1.0 : 0.0; });
  ASSERT_EQ(target.probs.size(), 2u);
  EXPECT_NEAR(target.probs[0], 0.731059, 1e-6);
  EXPECT_NEAR(target.probs[0], std::exp(1.0) / (1.0 + std::exp(1.0)), 1e-15);
}

TEST(RewardShaped, LargeBetaLimit) {
  const auto v = Vocab::arithmetic();
  RngStream gen(3);
  const auto ref = random_policy(1, 16, gen);
  auto task = make_arithmetic_task(v, "3+4=");
  task.max_response_len = 3;
  const auto base = sequence_distribution(ref, task, v);
  const auto target = reward_shaped_target(ref, task, v, 1e6);
  double worst = 0.0;
  for (std::size_t i = 0; i < base.probs.size(); ++i) worst = std::max(worst, std::abs(base.probs[i] - target.probs[i]));
  EXPECT_LE(worst, 1e-5);
}

TEST(RewardShaped, SmallBetaReachesMaxReward) {
  const auto v = Vocab::arithmetic();
  RngStream gen(4);
  const auto ref = random_policy(2, 16, gen);
  auto task = make_arithmetic_task(v, "2*4=");
  task.max_response_len = 3;
  const auto target = reward_shaped_target(ref, task, v, 1e-3);
  EXPECT_NEAR(target.total_mass(), 1.0, 1e-10);
  EXPECT_GE(exact_expected_reward(target, task, v), 1.0 - 1e-3);
}

TEST(ExactKl, SelfIsZeroAndAsymmetric) {
  RngStream gen(5);
  const auto v = Vocab::generic(2);
  const auto task = generic_task(3);
  const auto p = random_policy(1, 3, gen, 2.0);
  const auto q = random_policy(2, 3, gen, 2.0);
  EXPECT_NEAR(exact_kl(p, p, task, v), 0.0, 1e-12);
  const double pq = exact_kl(p, q, task, v);
  const double qp = exact_kl(q, p, task, v);
  EXPECT_GT(pq, 0.0);
  EXPECT_GT(qp, 0.0);
  EXPECT_GT(std::abs(pq - qp), 1e-6 * std::max(pq, qp));
}

TEST(ExactKl, SupportMismatchIsHardError) {
  const auto v = Vocab::generic(2);
  const auto p = init_policy({1, 3, 1.0}, 0, 0.0);
  EXPECT_THROW(exact_kl(sequence_distribution(p, generic_task(2), v), sequence_distribution(p, generic_task(3), v)),
               ConfigError);
}

TEST(ExactKl, PartitionIdentity) {
  const auto v = Vocab::arithmetic();
  RngStream gen(6);
  for (double beta : {0.1, 0.5, 2.0}) {
    const auto ref = random_policy(2, 16, gen);
    auto task = make_arithmetic_task(v, "9-5=");
    task.max_response_len = 3;
    const auto base = sequence_distribution(ref, task, v);
    const auto target = reward_shaped_target(ref, task, v, beta);
    const double lhs = exact_kl(target, base);
    const double rhs = exact_expected_reward(target, task, v) / beta - target.log_partition;
    EXPECT_NEAR(lhs, rhs, 1e-8) << "beta " << beta;
    EXPECT_NEAR(target.total_mass(), 1.0, 1e-10);
  }
}

TEST(ExpectedReward, DeterministicCorrectPolicyScoresOne) {
  const auto v = Vocab::arithmetic();
  const PolicySpec spec{1, 16, 1.0};
  std::vector<double> params(spec.param_count(), 0.0);
  for (std::size_t row = 0; row < spec.row_count(); ++row) {
    const Token next = row == 14 ? 7 : row == 7 ? v.eos() : 14;
    params[row * 16 + static_cast<std::size_t>(next)] = 60.0;
  }
  const Policy p(spec, params, RoleTag::kStudent);
  const auto task = make_arithmetic_task(v, "3+4=");
  EXPECT_NEAR(exact_expected_reward(p, task, v), 1.0, 1e-12);
}

TEST(ExpectedReward, UniformPolicyMatchesMonteCarlo) {
  const auto v = Vocab::arithmetic();
  const auto p = init_policy({2, 16, 1.0}, 0, 0.0);
  auto task = make_arithmetic_task(v, "3+4=");
  task.max_response_len = 3;
  const double exact = exact_expected_reward(p, task, v);
  EXPECT_NEAR(exact, std::pow(16.0, -3), 1e-15);  // only "#7<eos>" scores
  constexpr int kSamples = 100000;
  RngStream rng(11);
  int hits = 0;
  for (int i = 0; i < kSamples; ++i) hits += sample_trajectory(p, task, v, rng).reward;
  const double se = std::sqrt(exact * (1 - exact) / kSamples);
  EXPECT_LE(std::abs(hits / static_cast<double>(kSamples) - exact), 3 * se);
}

TEST(OpdGradient, IdentityOnRandomTriples) {
  const auto v = Vocab::generic(2);
  RngStream gen(7);
  for (int trial = 0; trial < 20; ++trial) {
    const int ks = 1 + trial % 2;
    const auto student = random_policy(ks, 3, gen);
    const auto teacher = random_policy(1 + static_cast<int>(gen.below(2)), 3, gen);
    TaskInstance task{"r", {static_cast<Token>(gen.below(2))}, {}, 3};
    const auto pair = exact_opd_gradient(student, teacher, task, v, 0.5 + gen.uniform());
    EXPECT_LE(relative_max_difference(pair.kl_route, pair.implicit_reward_route), 1e-8) << "trial " << trial;
    EXPECT_GT(pair.kl_route.max_abs(), 0.0);
  }
}

TEST(OpdGradient, ScoreFunctionHasZeroExpectation) {
  const auto v = Vocab::generic(2);
  RngStream gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_policy(1 + trial % 2, 3, gen);
    EXPECT_LE(score_function_expectation(p, generic_task(3), v).max_abs(), 1e-10);
  }
}

TEST(OpdGradient, LinearInBeta) {
  const auto v = Vocab::generic(2);
  RngStream gen(9);
  const auto s = random_policy(2, 3, gen);
  const auto t = random_policy(2, 3, gen);
  const auto one = exact_opd_gradient(s, t, generic_task(3), v, 0.7);
  const auto two = exact_opd_gradient(s, t, generic_task(3), v, 1.4);
  SparseGrad a = one.kl_route, b = one.implicit_reward_route;
  a.scale(2.0);
  b.scale(2.0);
  EXPECT_LE(relative_max_difference(a, two.kl_route), 1e-12);
  EXPECT_LE(relative_max_difference(b, two.implicit_reward_route), 1e-12);
}

TEST(OpdGradient, VanishesWhenStudentIsTeacher) {
  const auto v = Vocab::generic(2);
  RngStream gen(10);
  const auto p = random_policy(2, 3, gen);
  const auto pair = exact_opd_gradient(p, p, generic_task(3), v, 1.0);
  EXPECT_LE(pair.kl_route.max_abs(), 1e-10);
  EXPECT_LE(pair.implicit_reward_route.max_abs(), 1e-10);
}

TEST(OpdGradient, KlGradientMatchesFiniteDifferences) {
  const auto v = Vocab::generic(2);
  RngStream gen(12);
  for (int trial = 0; trial < 5; ++trial) {
    const auto s = random_policy(1 + trial % 2, 3, gen);
    const auto t = random_policy(2, 3, gen);
    const auto task = generic_task(3);
    double kl = 0.0;
    const auto analytic = exact_reverse_kl_gradient(s, t, task, v, &kl);
    EXPECT_NEAR(kl, exact_kl(s, t, task, v), 1e-12);
    const auto numeric = testutil::central_difference(s, [&](const Policy& q) { return exact_kl(q, t, task, v); });
    EXPECT_LE(relative_max_difference(analytic, numeric), 1e-6);
  }
}

TEST(ImplicitReward, TraceProperties) {
  const auto v = Vocab::generic(2);
  RngStream gen(13);
  const auto s = random_policy(2, 3, gen);
  const auto t = random_policy(1, 3, gen);
  const auto task = generic_task(3);
  RngStream rng(1);
  for (int i = 0; i < 20; ++i) {
    const auto traj = sample_trajectory(s, task, v, rng);
    const auto same = implicit_reward(traj, s, s, 0.8);
    for (double x : same.per_token) EXPECT_EQ(x, 0.0);
    const auto tr = implicit_reward(traj, t, s, 0.8);
    EXPECT_NEAR(tr.total, 0.8 * (log_prob(t, traj).total - log_prob(s, traj).total), 1e-10);
  }
}

TEST(RewardShapedSampler, MatchesEnumeratedTarget) {
  const auto v = Vocab::arithmetic();
  // prefers '#' after '=' and eos after a digit, so the target has moderate mass
  auto ref = init_policy({1, 16, 1.0}, 3, 0.5);
  for (std::size_t digit = 0; digit < 10; ++digit) ref.mutable_params()[digit * 16 + 15] += 2.0;
  ref.mutable_params()[13 * 16 + 14] += 2.0;
  auto task = make_arithmetic_task(v, "3+4=");
  task.max_response_len = 3;
  const double beta = 0.25;
  const double exact = exact_expected_reward(reward_shaped_target(ref, task, v, beta), task, v);
  constexpr int kSamples = 20000;
  RngStream rng(5);
  int hits = 0;
  for (int i = 0; i < kSamples; ++i) hits += sample_reward_shaped(ref, task, v, beta, rng).reward;
  const double se = std::sqrt(exact * (1 - exact) / kSamples);
  EXPECT_GT(exact, 0.1);
  EXPECT_LE(std::abs(hits / static_cast<double>(kSamples) - exact), 3 * se) << "exact " << exact;
}

TEST(OracleRecord, FieldsAreConsistent) {
  const auto v = Vocab::arithmetic();
  const auto ref = init_policy({1, 16, 1.0}, 3, 0.5);
  auto task = make_arithmetic_task(v, "3+4=");
  task.max_response_len = 3;
  const auto rec = oracle_record(ref, task, v, 0.5);
  EXPECT_EQ(rec.task_id, task.id);
  EXPECT_GE(rec.kl_target_to_ref, 0.0);
  EXPECT_GE(rec.expected_reward_target, rec.expected_reward_ref);
  EXPECT_NEAR(rec.kl_target_to_ref, rec.expected_reward_target / 0.5 - rec.log_partition, 1e-8);
}

}  // namespace
}  // namespace opdlab
