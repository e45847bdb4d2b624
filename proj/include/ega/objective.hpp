#pragma once

#include <vector>

#include "ega/attack.hpp"
#include "ega/localization.hpp"
#include "ega/model.hpp"

namespace ega {

struct LossWeights {
  float lambda_clean = 1.0f;
  float lambda_adv = 0.01f;

  void validate_nonnegative() const {
    if (!(lambda_clean >= 0.0f) || !(lambda_adv >= 0.0f))
      throw ConfigError("entropy loss weights must be non-negative");
  }
  // the full objective keeps the clean map under the stronger penalty
  void validate_strict_ordering() const {
    validate_nonnegative();
    if (!(lambda_clean > lambda_adv))
      throw ConfigError("lambda_clean (" + std::to_string(lambda_clean) +
                        ") must be strictly greater than lambda_adv (" +
                        std::to_string(lambda_adv) + ")");
  }
};

struct LossBreakdown {
  double clean_ce = 0.0;
  double adv_ce = 0.0;
  double ent_clean = 0.0;  // 0 when the term is disabled
  double ent_adv = 0.0;
  double total = 0.0;
  // share of CAM probability pixels above the -p*log(p) crossover at 1/e;
  // logged so entropy-driven drift is observable either direction
  double cam_clean_frac_high = 0.0;
  double cam_adv_frac_high = 0.0;
};

// ---------------------------------------------------------------------------
// probability map over CAM pixels: min-max normalized, clamped, extrema
// treated as constants
// ---------------------------------------------------------------------------

struct ProbabilityMap {
  int height = 0, width = 0;
  std::vector<float> values;
  bool degenerate = false;
};

inline ProbabilityMap cam_to_probability(const CamMap& cam) {
  if (int(cam.values.size()) != cam.height * cam.width)
    throw DimensionError("cam_to_probability: malformed map");
  ProbabilityMap out;
  out.height = cam.height;
  out.width = cam.width;
  auto ctx = detail::make_norm_context(cam.values.data(), 1, int64_t(cam.values.size()));
  out.degenerate = ctx.degenerate[0] != 0;
  out.values.resize(cam.values.size());
  for (size_t i = 0; i < cam.values.size(); ++i) {
    float p = detail::prob_from_context(ctx, 0, int64_t(i), cam.values[i]);
    out.values[i] = std::min(std::max(p, kProbClampLo), kProbClampHi);
  }
  return out;
}

// -sum P log P over a probability map, natural log; degenerate maps
// contribute nothing by definition.
inline double entropy_sum(const ProbabilityMap& p) {
  if (p.degenerate) return 0.0;
  double s = 0.0;
  for (float v : p.values) s -= double(v) * std::log(double(v));
  return s;
}

// Shannon entropy of a batch of in-graph CAMs; see cam_entropy for the exact
// normalization and gradient conventions.
inline TensorPtr entropy_loss(Tape& tape, const TensorPtr& cams, CamEntropyStats* stats = nullptr) {
  return cam_entropy(tape, cams, stats);
}

// ---------------------------------------------------------------------------
// Full objective: clean CE + adversarial CE + weighted CAM entropies, one
// combined backward. CAMs index the ground-truth class of each sample.
// ---------------------------------------------------------------------------

struct EgaLossResult {
  LossBreakdown breakdown;
  TensorPtr total;
  ForwardOutput clean_out, adv_out;
  TensorPtr cam_clean, cam_adv;  // null when the entropy terms are disabled
};

inline EgaLossResult ega_loss(Tape& tape, EgaModel& model, const TensorPtr& clean_batch,
                              const TensorPtr& adv_batch, const std::vector<int>& labels,
                              const LossWeights& weights, bool entropy_enabled = true) {
  weights.validate_nonnegative();
  if (clean_batch->shape != adv_batch->shape)
    throw ContractError("ega_loss: clean batch " + detail::shape_str(clean_batch->shape) +
                        " vs adversarial batch " + detail::shape_str(adv_batch->shape));
  if (int(labels.size()) != clean_batch->dim(0))
    throw ContractError("ega_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                        std::to_string(clean_batch->dim(0)));

  EgaLossResult res;
  res.clean_out = model.forward(tape, clean_batch, BranchId::Main, RunMode::Train);
  res.adv_out = model.forward(tape, adv_batch, BranchId::Auxiliary, RunMode::Train);

  auto ce_clean = softmax_cross_entropy(tape, res.clean_out.logits, labels);
  auto ce_adv = softmax_cross_entropy(tape, res.adv_out.logits, labels);
  res.breakdown.clean_ce = ce_clean->value_precise();
  res.breakdown.adv_ce = ce_adv->value_precise();

  auto total = add(tape, ce_clean, ce_adv);
  if (entropy_enabled && weights.lambda_clean > 0.0f) {
    res.cam_clean = compute_cam(tape, res.clean_out, model, labels);
    CamEntropyStats stats;
    auto ent = cam_entropy(tape, res.cam_clean, &stats);
    res.breakdown.ent_clean = ent->value_precise();
    res.breakdown.cam_clean_frac_high = stats.frac_above_crossover;
    total = add(tape, total, scale(tape, ent, weights.lambda_clean));
  }
  if (entropy_enabled && weights.lambda_adv > 0.0f) {
    res.cam_adv = compute_cam(tape, res.adv_out, model, labels);
    CamEntropyStats stats;
    auto ent = cam_entropy(tape, res.cam_adv, &stats);
    res.breakdown.ent_adv = ent->value_precise();
    res.breakdown.cam_adv_frac_high = stats.frac_above_crossover;
    total = add(tape, total, scale(tape, ent, weights.lambda_adv));
  }
  res.breakdown.total = res.breakdown.clean_ce + res.breakdown.adv_ce +
                        double(weights.lambda_clean) * res.breakdown.ent_clean +
                        double(weights.lambda_adv) * res.breakdown.ent_adv;
  res.total = total;
  return res;
}

}  // namespace ega
