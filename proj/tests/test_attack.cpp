#include <gtest/gtest.h>

#include <cmath>

#include "ega/attack.hpp"
#include "testutil.hpp"

using namespace ega;

namespace {

ArchDescriptor small_desc(uint64_t seed) {
  ArchDescriptor d;
  d.input_size = 16;
  d.num_classes = 3;
  d.stages = {{8, true}};
  d.seed = seed;
  return d;
}

TensorPtr image_batch(const ArchDescriptor& d, int n, uint64_t seed) {
  RandomSource rng(seed);
  auto x = Tensor::make({n, d.input_channels, d.input_size, d.input_size});
  testutil::fill_uniform(x, rng, 0.0f, 1.0f);
  return x;
}

double attack_view_loss(EgaModel& m, const TensorPtr& x, const std::vector<int>& labels) {
  StatFreezeGuard guard(m);
  Tape t;
  auto out = m.forward(t, x, BranchId::Auxiliary, RunMode::Train);
  return softmax_cross_entropy(t, out.logits, labels)->value_precise();
}

}  // namespace

TEST(EpsilonSchedule, PaperRule) {
  EXPECT_EQ(epsilon_schedule(1).steps, 1);
  EXPECT_EQ(epsilon_schedule(2).steps, 3);
  EXPECT_EQ(epsilon_schedule(3).steps, 4);
  EXPECT_EQ(epsilon_schedule(4).steps, 5);
  EXPECT_EQ(epsilon_schedule(0).steps, 0);
  EXPECT_FALSE(epsilon_schedule(0).enabled());
  EXPECT_THROW(epsilon_schedule(5), ConfigError);
  EXPECT_THROW(epsilon_schedule(-1), ConfigError);
}

TEST(EpsilonSchedule, StepSizeCoversBallWithoutExceedingIt) {
  EXPECT_FLOAT_EQ(epsilon_schedule(1).step_size, 1.0f / 255.0f);
  for (int e : {2, 3, 4}) {
    auto cfg = epsilon_schedule(e);
    EXPECT_LE(cfg.step_size, cfg.radius());
    EXPECT_GT(cfg.step_size * float(cfg.steps), cfg.radius());  // can reach the boundary
  }
}

TEST(Pgd, ZeroEpsilonIsIdentity) {
  auto m = EgaModel::build(small_desc(1));
  auto x = image_batch(m.descriptor, 2, 2);
  auto adv = pgd(m, x, {0, 1}, epsilon_schedule(0));
  EXPECT_TRUE(testutil::bytes_equal(adv->data, x->data));
}

TEST(Pgd, LinearModelMatchesClosedForm) {
  // no conv stages: GAP over the raw channels feeds the class head, so the
  // input gradient is constant per channel and FGSM has a closed form
  ArchDescriptor d;
  d.input_size = 4;
  d.num_classes = 3;
  d.stages = {};
  d.seed = 5;
  auto m = EgaModel::build(d);
  auto x = image_batch(d, 1, 7);
  const std::vector<int> labels = {1};

  AttackConfig cfg;
  cfg.epsilon = 2;
  cfg.steps = 1;
  cfg.step_size = 2.0f / 255.0f;
  auto adv = pgd(m, x, labels, cfg);

  // closed form: dL/dx[c] = (1/HW) * sum_j (softmax_j - onehot_j) W[j][c]
  const int C = 3, HW = 16;
  Tape t;
  auto logits = m.forward(t, x, BranchId::Auxiliary, RunMode::Eval).logits;
  double mx = -1e30, denom = 0.0;
  for (int j = 0; j < C; ++j) mx = std::max(mx, double(logits->data[size_t(j)]));
  for (int j = 0; j < C; ++j) denom += std::exp(double(logits->data[size_t(j)]) - mx);
  for (int c = 0; c < 3; ++c) {
    double g = 0.0;
    for (int j = 0; j < C; ++j) {
      double p = std::exp(double(logits->data[size_t(j)]) - mx) / denom;
      g += (p - (j == labels[0] ? 1.0 : 0.0)) * double(m.head_weight->data[size_t(j) * 3 + c]);
    }
    g /= HW;
    const float sgn = g > 0.0 ? 1.0f : (g < 0.0 ? -1.0f : 0.0f);
    for (int i = 0; i < HW; ++i) {
      const size_t idx = size_t(c) * HW + size_t(i);
      float expect = x->data[idx] + cfg.step_size * sgn;
      expect = std::min(std::max(expect, 0.0f), 1.0f);
      EXPECT_NEAR(adv->data[idx], expect, 2e-7f) << "channel " << c << " pixel " << i;
    }
  }
}

TEST(Pgd, ConstraintsHoldExactly) {
  for (int eps : {1, 2, 3, 4}) {
    auto m = EgaModel::build(small_desc(uint64_t(eps) * 11));
    auto x = image_batch(m.descriptor, 3, uint64_t(eps) * 13);
    auto adv = pgd(m, x, {0, 1, 2}, epsilon_schedule(eps));
    const double bound = double(eps) / 255.0;
    for (size_t i = 0; i < x->data.size(); ++i) {
      const double diff = double(adv->data[i]) - double(x->data[i]);
      EXPECT_LE(std::abs(diff), bound) << "eps " << eps << " index " << i;
      EXPECT_GE(adv->data[i], 0.0f);
      EXPECT_LE(adv->data[i], 1.0f);
    }
  }
}

TEST(Pgd, ModelStateBitUnchanged) {
  auto m = EgaModel::build(small_desc(21));
  // season the stats away from init first
  auto warm = image_batch(m.descriptor, 4, 22);
  {
    Tape t;
    m.forward(t, warm, BranchId::Main, RunMode::Train);
    Tape t2;
    m.forward(t2, warm, BranchId::Auxiliary, RunMode::Train);
  }
  const std::string before = checkpoint_bytes(m);
  auto x = image_batch(m.descriptor, 3, 23);
  pgd(m, x, {0, 1, 2}, epsilon_schedule(3));
  EXPECT_EQ(checkpoint_bytes(m), before);
  // requires_grad flags restored for training afterwards
  for (auto& p : m.parameters()) EXPECT_TRUE(p->requires_grad);
}

TEST(Pgd, DeterministicGivenSameInputs) {
  auto m = EgaModel::build(small_desc(31));
  auto x = image_batch(m.descriptor, 2, 32);
  auto a1 = pgd(m, x, {0, 2}, epsilon_schedule(4));
  auto a2 = pgd(m, x, {0, 2}, epsilon_schedule(4));
  EXPECT_TRUE(testutil::bytes_equal(a1->data, a2->data));
}

TEST(Pgd, RaisesAttackObjectiveMostOfTheTime) {
  int up = 0, trials = 20;
  for (int k = 0; k < trials; ++k) {
    auto m = EgaModel::build(small_desc(100 + uint64_t(k)));
    auto x = image_batch(m.descriptor, 2, 200 + uint64_t(k));
    std::vector<int> labels = {int(k % 3), int((k + 1) % 3)};
    double before = attack_view_loss(m, x, labels);
    auto adv = pgd(m, x, labels, epsilon_schedule(2));
    double after = attack_view_loss(m, adv, labels);
    if (after >= before) ++up;
  }
  EXPECT_GE(up, (trials * 8) / 10);
}

TEST(Pgd, InputOutsidePixelBoundsRejected) {
  auto m = EgaModel::build(small_desc(41));
  auto x = image_batch(m.descriptor, 2, 42);
  x->data[5] = 1.5f;
  EXPECT_THROW(pgd(m, x, {0, 1}, epsilon_schedule(1)), ContractError);
}

TEST(Pgd, NanGradientIsNumericError) {
  auto m = EgaModel::build(small_desc(51));
  m.layers[0].weight->data[0] = std::numeric_limits<float>::quiet_NaN();
  auto x = image_batch(m.descriptor, 2, 52);
  EXPECT_THROW(pgd(m, x, {0, 1}, epsilon_schedule(1)), NumericError);
}
