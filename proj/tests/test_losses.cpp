// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "asrcl/errors.hpp"
#include "asrcl/losses.hpp"
#include "helpers.hpp"

using namespace asrcl;
using testutil::to_tensor;

namespace {

std::vector<int> random_labels(std::mt19937_64& rng, std::size_t n, int classes) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
  return y;
}

oracle::Mat one_hots(const std::vector<int>& y, std::size_t classes) {
  oracle::Mat m(y.size(), std::vector<double>(classes, 0.0));
  for (std::size_t i = 0; i < y.size(); ++i) m[i][static_cast<std::size_t>(y[i])] = 1.0;
  return m;
}

oracle::Mat orthonormal(std::size_t n) {
  oracle::Mat m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) m[i][i] = 1.0;
  return m;
}

}  // namespace

TEST(PairContrastive, SpotValues) {
  Tape tape;
  const oracle::Mat one = {{0.3, -1.0, 2.0}};
  const oracle::Mat other = {{1.0, 0.5, 0.1}};
  EXPECT_EQ(pair_contrastive_loss({tape.constant(to_tensor(one)), tape.constant(to_tensor(other))}, 0.2).item(),
            0.0);
  const auto e = orthonormal(4);
  const oracle::Mat clean = {e[0], e[1]}, asr = {e[2], e[3]};
  EXPECT_NEAR(pair_contrastive_loss({tape.constant(to_tensor(clean)), tape.constant(to_tensor(asr))}, 1.0).item(),
              std::log(3.0), 1e-12);
}

TEST(PairContrastive, MatchesOracleAndIsSymmetric) {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 1 + rng() % 8, d = 2 + rng() % 15;
    const auto c = oracle::random_mat(rng, n, d), a = oracle::random_mat(rng, n, d);
    for (double tau : {0.2, 1.0, 5.0}) {
      Tape tape;
      const double got = pair_contrastive_loss({tape.constant(to_tensor(c)), tape.constant(to_tensor(a))}, tau).item();
      EXPECT_NEAR(got, oracle::l_c(c, a, tau), 1e-9);
      const double swapped =
          pair_contrastive_loss({tape.constant(to_tensor(a)), tape.constant(to_tensor(c))}, tau).item();
      EXPECT_NEAR(got, swapped, 1e-12);
      EXPECT_GE(got, 0.0);
    }
  }
}

TEST(PairContrastive, Errors) {
  Tape tape;
  EXPECT_THROW(pair_contrastive_loss({tape.constant(Tensor({0, 3})), tape.constant(Tensor({0, 3}))}, 0.2),
               DegenerateInputError);
  EXPECT_THROW(pair_contrastive_loss({tape.constant(Tensor({2, 3}, 1.0)), tape.constant(Tensor({3, 3}, 1.0))}, 0.2),
               ShapeError);
}

TEST(HardContrastive, SpotValues) {
  Tape tape;
  const auto e = orthonormal(3);
  EXPECT_NEAR(hard_contrastive_loss(tape.constant(to_tensor(e)), std::vector<int>{0, 0, 1}, 1.0).item(),
              2.0 / 3.0 * std::log(2.0), 1e-12);
  std::mt19937_64 rng(2);
  const auto r = oracle::random_mat(rng, 5, 4);
  EXPECT_EQ(hard_contrastive_loss(tape.constant(to_tensor(r)), std::vector<int>{0, 1, 2, 3, 4}, 0.2).item(), 0.0);
  EXPECT_THROW(hard_contrastive_loss(tape.constant(to_tensor(oracle::Mat{{1.0, 0.0}})), std::vector<int>{0}, 0.2),
               DegenerateInputError);
}

TEST(HardContrastive, MatchesOracle) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 2 + rng() % 7, d = 2 + rng() % 15;
    const auto x = oracle::random_mat(rng, n, d);
    const auto y = random_labels(rng, n, 3);
    for (double tau : {0.2, 1.0, 5.0}) {
      Tape tape;
      EXPECT_NEAR(hard_contrastive_loss(tape.constant(to_tensor(x)), y, tau).item(), oracle::l_hard(x, y, tau), 1e-9);
    }
  }
}

TEST(Distill, SpotValues) {
  Tape tape;
  EXPECT_NEAR(distill_loss(tape.constant(to_tensor({{0.7, 0.7}})), to_tensor({{1.0, 0.0}}), 1.0).item(), std::log(2.0),
              1e-15);
  const oracle::Mat z = {{1.0, -2.0, 0.5}, {3.0, 3.0, -1.0}};
  oracle::Mat p;
  for (const auto& row : z) p.push_back(oracle::softmax(row, 5.0));
  EXPECT_NEAR(distill_loss(tape.constant(to_tensor(z)), to_tensor(p), 5.0).item(), 0.0, 1e-15);
}

TEST(Distill, OneHotIsTemperatureScaledCrossEntropy) {
  std::mt19937_64 rng(4);
  const auto z = oracle::random_mat(rng, 6, 4, 3.0);
  const auto y = random_labels(rng, 6, 4);
  oracle::Mat scaled = z;
  for (auto& r : scaled)
    for (double& v : r) v /= 5.0;
  Tape tape;
  EXPECT_NEAR(distill_loss(tape.constant(to_tensor(z)), to_tensor(one_hots(y, 4)), 5.0).item(),
              oracle::cross_entropy_mean(scaled, y), 1e-12);
}

TEST(Distill, MatchesOracle) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 1 + rng() % 8, c = 2 + rng() % 4;
    const auto z = oracle::random_mat(rng, n, c, 2.0);
    auto p = oracle::random_probs(rng, n, c);
    if (rep % 3 == 0) p = one_hots(random_labels(rng, n, static_cast<int>(c)), c);
    for (double tau : {0.2, 1.0, 5.0}) {
      Tape tape;
      const double got = distill_loss(tape.constant(to_tensor(z)), to_tensor(p), tau).item();
      EXPECT_NEAR(got, oracle::l_d(z, p, tau), 1e-9);
      EXPECT_GE(got, -1e-15);
    }
  }
}

TEST(Distill, RejectsInvalidRows) {
  Tape tape;
  const Var z = tape.constant(to_tensor({{0.0, 1.0}}));
  EXPECT_THROW(distill_loss(z, to_tensor({{0.5, 0.6}}), 1.0), ConfigError);
  EXPECT_THROW(distill_loss(z, to_tensor({{1.5, -0.5}}), 1.0), ConfigError);
  EXPECT_THROW(distill_loss(z, to_tensor({{1.0, 0.0}}), 0.0), ConfigError);
}

TEST(SoftContrastive, Reductions) {
  std::mt19937_64 rng(6);
  const auto x = oracle::random_mat(rng, 5, 6);
  Tape tape;
  const Var reps = tape.constant(to_tensor(x));
  const std::vector<int> same(5, 1);
  EXPECT_NEAR(soft_contrastive_loss(reps, to_tensor(one_hots(same, 3)), 0.2).item(),
              hard_contrastive_loss(reps, same, 0.2).item(), 1e-12);
  const std::vector<int> distinct = {0, 1, 2, 3, 4};
  EXPECT_EQ(soft_contrastive_loss(reps, to_tensor(one_hots(distinct, 5)), 0.2).item(), 0.0);
  // one-hot soft labels reproduce the hard loss for any labelling
  const auto y = random_labels(rng, 5, 3);
  EXPECT_NEAR(soft_contrastive_loss(reps, to_tensor(one_hots(y, 3)), 0.7).item(),
              hard_contrastive_loss(reps, y, 0.7).item(), 1e-12);
}

TEST(SoftContrastive, MatchesOracle) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 2 + rng() % 7, d = 2 + rng() % 15, c = 2 + rng() % 4;
    const auto x = oracle::random_mat(rng, n, d);
    const auto p = oracle::random_probs(rng, n, c);
    for (double tau : {0.2, 1.0, 5.0}) {
      Tape tape;
      EXPECT_NEAR(soft_contrastive_loss(tape.constant(to_tensor(x)), to_tensor(p), tau).item(),
                  oracle::l_soft(x, p, tau), 1e-9);
    }
  }
}

TEST(Mlm, Values) {
  Tape tape;
  EXPECT_NEAR(mlm_loss(tape.constant(Tensor({3, 100}, 0.25)), std::vector<int>{5, 17, 99}).item(), std::log(100.0),
              1e-12);
  std::mt19937_64 rng(8);
  const auto z = oracle::random_mat(rng, 7, 9);
  const auto y = random_labels(rng, 7, 9);
  EXPECT_NEAR(mlm_loss(tape.constant(to_tensor(z)), y).item(), oracle::cross_entropy_mean(z, y), 1e-12);
}

TEST(Composites, Weighting) {
  Tape tape;
  auto s = [&](double v) { return tape.constant(Tensor::scalar(v)); };
  EXPECT_EQ(pretrain_loss(s(1.0), s(2.0), 1.0).item(), 3.0);
  EXPECT_EQ(pretrain_loss(s(1.5), s(2.0), 0.0).item(), 1.5);
  const LossWeights w;
  EXPECT_NEAR(finetune_loss(s(1), s(1), s(1), s(1), w).item(), 12.1, 1e-12);
  LossWeights base = w;
  base.lambda_d = base.lambda_sc = 0.0;
  EXPECT_EQ(finetune_loss(s(0.8), s(3), s(5), s(7), base).item(), 0.8);
  LossWeights no_sc = w;
  no_sc.lambda_sc = 0.0;
  EXPECT_NEAR(finetune_loss(s(0.8), s(3), s(5), s(7), no_sc).item(), 0.8 + 10 * 3, 1e-12);
}

TEST(Composites, MultiheadCrossEntropy) {
  std::mt19937_64 rng(9);
  const auto z1 = oracle::random_mat(rng, 4, 3), z2 = oracle::random_mat(rng, 4, 5);
  const auto y1 = random_labels(rng, 4, 3), y2 = random_labels(rng, 4, 5);
  Tape tape;
  std::vector<Var> one = {tape.constant(to_tensor(z1))};
  std::vector<std::vector<int>> ly1 = {y1};
  EXPECT_NEAR(multihead_cross_entropy(one, ly1).item(), oracle::cross_entropy_mean(z1, y1), 1e-12);
  std::vector<Var> same = {tape.constant(to_tensor(z1)), tape.constant(to_tensor(z1))};
  std::vector<std::vector<int>> ly11 = {y1, y1};
  EXPECT_NEAR(multihead_cross_entropy(same, ly11).item(), 2 * oracle::cross_entropy_mean(z1, y1), 1e-12);
  std::vector<Var> two = {tape.constant(to_tensor(z1)), tape.constant(to_tensor(z2))};
  std::vector<std::vector<int>> ly12 = {y1, y2};
  EXPECT_NEAR(multihead_cross_entropy(two, ly12).item(),
              oracle::cross_entropy_mean(z1, y1) + oracle::cross_entropy_mean(z2, y2), 1e-12);
  EXPECT_THROW(multihead_cross_entropy(two, ly1), ConfigError);
}

TEST(Losses, ScaleAndPermutationInvariance) {
  std::mt19937_64 rng(10);
  const std::size_t n = 6;
  const auto x = oracle::random_mat(rng, n, 5);
  const auto y = random_labels(rng, n, 3);
  const auto p = oracle::random_probs(rng, n, 3);
  auto scaled = x;
  for (std::size_t i = 0; i < n; ++i)
    for (double& v : scaled[i]) v *= 0.1 + static_cast<double>(i);
  std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
  oracle::Mat xp, pp;
  std::vector<int> yp;
  for (auto i : perm) {
    xp.push_back(x[i]);
    pp.push_back(p[i]);
    yp.push_back(y[i]);
  }
  Tape t;
  const double h = hard_contrastive_loss(t.constant(to_tensor(x)), y, 0.2).item();
  EXPECT_NEAR(hard_contrastive_loss(t.constant(to_tensor(scaled)), y, 0.2).item(), h, 1e-9);
  EXPECT_NEAR(hard_contrastive_loss(t.constant(to_tensor(xp)), yp, 0.2).item(), h, 1e-10);
  const double s = soft_contrastive_loss(t.constant(to_tensor(x)), to_tensor(p), 0.2).item();
  EXPECT_NEAR(soft_contrastive_loss(t.constant(to_tensor(scaled)), to_tensor(p), 0.2).item(), s, 1e-9);
  EXPECT_NEAR(soft_contrastive_loss(t.constant(to_tensor(xp)), to_tensor(pp), 0.2).item(), s, 1e-10);
  const auto a = oracle::random_mat(rng, n, 5);
  oracle::Mat ap;
  for (auto i : perm) ap.push_back(a[i]);
  const double c = pair_contrastive_loss({t.constant(to_tensor(x)), t.constant(to_tensor(a))}, 0.2).item();
  EXPECT_NEAR(pair_contrastive_loss({t.constant(to_tensor(scaled)), t.constant(to_tensor(a))}, 0.2).item(), c, 1e-9);
  EXPECT_NEAR(pair_contrastive_loss({t.constant(to_tensor(xp)), t.constant(to_tensor(ap))}, 0.2).item(), c, 1e-10);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  const std::vector<Tensor> pair = {to_tensor(oracle::random_mat(rng, 3, 8)), to_tensor(oracle::random_mat(rng, 3, 8))};
  EXPECT_LT(grad_check([](Tape&, std::span<const Var> v) { return pair_contrastive_loss({v[0], v[1]}, 0.2); }, pair),
            1e-4);
  const Tensor x = to_tensor(oracle::random_mat(rng, 5, 6));
  const std::vector<int> y = {0, 1, 0, 2, 1};
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return hard_contrastive_loss(v[0], y, 0.2); },
                       std::span<const Tensor>(&x, 1)),
            1e-4);
  const Tensor p = to_tensor(oracle::random_probs(rng, 4, 3));
  const Tensor x4 = to_tensor(oracle::random_mat(rng, 4, 6));
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return soft_contrastive_loss(v[0], p, 0.2); },
                       std::span<const Tensor>(&x4, 1)),
            1e-4);
  const Tensor z = to_tensor(oracle::random_mat(rng, 4, 3, 2.0));
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return distill_loss(v[0], p, 5.0); },
                       std::span<const Tensor>(&z, 1)),
            1e-4);
  const std::vector<int> t = {2, 0, 1, 1};
  EXPECT_LT(grad_check([&](Tape&, std::span<const Var> v) { return mlm_loss(v[0], t); }, std::span<const Tensor>(&z, 1)),
            1e-4);
}

TEST(Losses, DistillGradientIgnoresPrevProbs) {
  std::mt19937_64 rng(12);
  const Tensor p = to_tensor(oracle::random_probs(rng, 3, 4));
  Tape tape;
  Var z = tape.input(to_tensor(oracle::random_mat(rng, 3, 4)));
  tape.backward(distill_loss(z, p, 5.0));
  // d/dz of (1/N) KL(p || softmax(z/tau)) = (q - p) / (N tau)
  for (std::size_t i = 0; i < 3; ++i) {
    const auto q = oracle::softmax(std::vector<double>(z.value().row(i).begin(), z.value().row(i).end()), 5.0);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(z.grad()(i, c), (q[c] - p(i, c)) / 15.0, 1e-14);
  }
}
