#pragma once

#include <cmath>
#include <vector>

#include "ega/model.hpp"

namespace ega {

// L-inf PGD configuration. Epsilon counts in 1/255 units of the pixel range,
// matching the integer strengths the training schedule sweeps.
struct AttackConfig {
  int epsilon = 1;
  int steps = 1;
  float step_size = 1.0f / 255.0f;
  float pixel_lo = 0.0f;
  float pixel_hi = 1.0f;

  float radius() const { return float(epsilon) / 255.0f; }
  bool enabled() const { return epsilon > 0 && steps > 0; }

  void validate() const {
    if (epsilon < 0) throw ConfigError("attack epsilon must be >= 0");
    if (epsilon > 0 && steps < 1) throw ConfigError("attack needs at least 1 step when epsilon > 0");
    if (epsilon > 0 && step_size <= 0.0f) throw ConfigError("attack step size must be positive");
    if (pixel_lo >= pixel_hi) throw ConfigError("attack pixel bounds are empty");
  }
};

// n = epsilon + 1, except a single step at epsilon = 1; epsilon = 0 disables
// the attack. Step size covers the ball with a 2.5x overshoot factor but
// never exceeds the radius itself.
inline AttackConfig epsilon_schedule(int epsilon) {
  if (epsilon < 0 || epsilon > 4)
    throw ConfigError("epsilon " + std::to_string(epsilon) + " outside the supported set {0..4}");
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  if (epsilon == 0) {
    cfg.steps = 0;
    cfg.step_size = 0.0f;
    return cfg;
  }
  cfg.steps = epsilon == 1 ? 1 : epsilon + 1;
  const float radius = cfg.radius();
  cfg.step_size = cfg.steps == 1 ? radius : std::min(radius, 2.5f * radius / float(cfg.steps));
  return cfg;
}

namespace detail {

// Projects one pixel onto ball(x, eps) intersected with [lo, hi], exactly:
// |result - x| <= eps and lo <= result <= hi hold in double arithmetic.
inline float project_pixel(double x, double candidate, double eps, float lo, float hi) {
  double delta = candidate - x;
  if (delta > eps) delta = eps;
  if (delta < -eps) delta = -eps;
  float out = float(x + delta);
  // float rounding can poke a hair outside the ball; walk back at most a few ulps
  while (double(out) - x > eps) out = std::nextafterf(out, -INFINITY);
  while (double(out) - x < -eps) out = std::nextafterf(out, INFINITY);
  if (out < lo) out = lo;
  if (out > hi) out = hi;
  return out;
}

}  // namespace detail

// Inner maximization: signed-gradient ascent on the classification loss,
// computed through the Auxiliary branch with train-mode batch statistics.
// Parameters are frozen and no running statistics move; the model state is
// bit-identical before and after.
inline TensorPtr pgd(EgaModel& model, const TensorPtr& x, const std::vector<int>& labels,
                     const AttackConfig& cfg) {
  cfg.validate();
  for (float v : x->data)
    if (v < cfg.pixel_lo || v > cfg.pixel_hi)
      throw ContractError("pgd: input pixel outside [" + std::to_string(cfg.pixel_lo) + ", " +
                          std::to_string(cfg.pixel_hi) + "]");
  auto adv = Tensor::make(x->shape);
  adv->data = x->data;
  if (!cfg.enabled()) return adv;

  ParamFreezeGuard freeze(model);
  StatFreezeGuard stats(model);
  // exact radius: float(eps/255) rounds a hair above the true value
  const double eps = double(cfg.epsilon) / 255.0;

  for (int step = 0; step < cfg.steps; ++step) {
    auto probe = Tensor::make(x->shape, true);
    probe->data = adv->data;
    Tape tape;
    auto out = model.forward(tape, probe, BranchId::Auxiliary, RunMode::Train);
    auto loss = softmax_cross_entropy(tape, out.logits, labels);
    tape.backward(loss);
    for (float g : probe->grad)
      if (!std::isfinite(g)) throw NumericError("pgd: attack diverged, NaN gradient at step " +
                                                std::to_string(step));
    for (size_t i = 0; i < adv->data.size(); ++i) {
      const float g = probe->grad[i];
      const float sgn = g > 0.0f ? 1.0f : (g < 0.0f ? -1.0f : 0.0f);
      const double cand = double(adv->data[i]) + double(cfg.step_size) * double(sgn);
      adv->data[i] = detail::project_pixel(double(x->data[i]), cand, eps, cfg.pixel_lo, cfg.pixel_hi);
    }
  }
  return adv;
}

}  // namespace ega
