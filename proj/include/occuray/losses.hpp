#pragma once

// Training objectives as pure numeric functions: per-pixel BCE over soft
// masks, the λ-weighted occluder/occludee combination, the multi-task total,
// and a finite-difference harness for the analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "occuray/error.hpp"
#include "occuray/mask.hpp"

namespace occuray {

struct SoftMask {
  int height = 0;
  int width = 0;
  std::vector<double> probs;  // row-major, values in [0, 1]

  SoftMask() = default;
  SoftMask(int h, int w, double fill = 0.0)
      : height(h), width(w), probs(static_cast<std::size_t>(h) * w, fill) {
    if (h <= 0 || w <= 0) throw Error("SoftMask: non-positive dimensions");
  }
  std::size_t size() const { return probs.size(); }
};

// What the occluder term does for a ROI with no occluder ground truth:
// score the prediction against an all-zero mask, or drop the term.
enum class OccluderPolicy { zero_target, skip };

struct LossConfig {
  double lambda = 0.25;
  double epsilon = 1e-7;
  OccluderPolicy occluder_policy = OccluderPolicy::zero_target;
};

namespace detail {

inline void require_pair(const SoftMask& p, const BinaryMask& t, const char* what) {
  if (p.height != t.height || p.width != t.width)
    throw Error(std::string(what) + ": pred/target dimension mismatch");
  if (p.height <= 0 || p.width <= 0)
    throw Error(std::string(what) + ": empty mask");
}

inline double clamp_prob(double v, double eps) {
  if (v < eps) return eps;
  if (v > 1.0 - eps) return 1.0 - eps;
  return v;
}

}  // namespace detail

// Mean binary cross entropy with the prediction clamped to [ε, 1−ε].
inline double bce_mask_loss(const SoftMask& pred, const BinaryMask& target,
                            double epsilon = 1e-7) {
  detail::require_pair(pred, target, "bce_mask_loss");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = detail::clamp_prob(pred.probs[i], epsilon);
    const double m = target.bits[i] ? 1.0 : 0.0;
    sum += m * std::log(p) + (1.0 - m) * std::log(1.0 - p);
  }
  return -sum / static_cast<double>(pred.size());
}

// ∂(bce)/∂pred. Zero where the clamp is active (loss locally constant there).
inline std::vector<double> bce_mask_grad(const SoftMask& pred, const BinaryMask& target,
                                         double epsilon = 1e-7) {
  detail::require_pair(pred, target, "bce_mask_grad");
  std::vector<double> g(pred.size(), 0.0);
  const double n = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred.probs[i];
    if (p < epsilon || p > 1.0 - epsilon) continue;
    const double m = target.bits[i] ? 1.0 : 0.0;
    g[i] = (p - m) / (p * (1.0 - p) * n);
  }
  return g;
}

inline double seg_combine(double occludee_loss, double occluder_loss,
                          double lambda) {
  return occludee_loss + lambda * occluder_loss;
}

// Occludee BCE plus λ times occluder BCE. With no occluder ground truth the
// occluder prediction is scored against an all-zero target (default) or the
// term is skipped, per cfg.occluder_policy.
inline double seg_loss(const SoftMask& pred_occludee, const BinaryMask& gt_occludee,
                       const SoftMask& pred_occluder,
                       const BinaryMask* gt_occluder, const LossConfig& cfg = {}) {
  const double occludee = bce_mask_loss(pred_occludee, gt_occludee, cfg.epsilon);
  if (gt_occluder != nullptr) {
    return seg_combine(occludee,
                       bce_mask_loss(pred_occluder, *gt_occluder, cfg.epsilon),
                       cfg.lambda);
  }
  if (cfg.occluder_policy == OccluderPolicy::zero_target) {
    const BinaryMask zeros(pred_occluder.height, pred_occluder.width);
    return seg_combine(occludee,
                       bce_mask_loss(pred_occluder, zeros, cfg.epsilon),
                       cfg.lambda);
  }
  return occludee;
}

struct RoiLosses {
  double cls = 0.0;
  double reg = 0.0;
  double seg = 0.0;
  bool positive = false;
};

struct SampleLosses {
  std::vector<double> rpn;
  std::vector<RoiLosses> per_roi;
};

namespace detail {

// Sort-then-sum keeps the result bit-identical under permutation of the
// addends.
inline double stable_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  return sum;
}

}  // namespace detail

// (1/M)·Σ rpn + (1/N)·Σ (cls + 1[positive]·(reg + seg)); empty sums are 0.
inline double total_loss(const SampleLosses& s) {
  double loss = 0.0;
  if (!s.rpn.empty())
    loss += detail::stable_sum(s.rpn) / static_cast<double>(s.rpn.size());
  if (!s.per_roi.empty()) {
    std::vector<double> terms;
    terms.reserve(s.per_roi.size());
    for (const auto& r : s.per_roi)
      terms.push_back(r.cls + (r.positive ? r.reg + r.seg : 0.0));
    loss += detail::stable_sum(std::move(terms)) / static_cast<double>(s.per_roi.size());
  }
  return loss;
}

// Relative error between the analytic directional derivative and a central
// finite difference with step h.
inline double grad_check(const std::function<double(const std::vector<double>&)>& f,
                         const std::vector<double>& analytic_grad,
                         const std::vector<double>& point,
                         const std::vector<double>& direction, double h = 1e-5) {
  if (analytic_grad.size() != point.size() || direction.size() != point.size())
    throw Error("grad_check: size mismatch");
  double analytic = 0.0;
  for (std::size_t i = 0; i < point.size(); ++i)
    analytic += analytic_grad[i] * direction[i];
  std::vector<double> plus = point, minus = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    plus[i] += h * direction[i];
    minus[i] -= h * direction[i];
  }
  const double fd = (f(plus) - f(minus)) / (2.0 * h);
  return std::abs(analytic - fd) / std::max(1.0, std::abs(analytic));
}

// grad_check specialized to bce_mask_loss at `pred`. Verifies the whole
// perturbed segment stays strictly inside the clamp region.
inline double bce_grad_check(const SoftMask& pred, const BinaryMask& target,
                             const std::vector<double>& direction,
                             double epsilon = 1e-7, double h = 1e-5) {
  detail::require_pair(pred, target, "bce_grad_check");
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double lo = pred.probs[i] - h * std::abs(direction[i]);
    const double hi = pred.probs[i] + h * std::abs(direction[i]);
    if (lo <= epsilon || hi >= 1.0 - epsilon)
      throw Error("bce_grad_check: point too close to the clamp boundary");
  }
  auto f = [&](const std::vector<double>& x) {
    SoftMask p = pred;
    p.probs = x;
    return bce_mask_loss(p, target, epsilon);
  };
  return grad_check(f, bce_mask_grad(pred, target, epsilon), pred.probs, direction, h);
}

}  // namespace occuray
