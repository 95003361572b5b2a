#pragma once

#include "epipose/core.hpp"
#include "epipose/dist.hpp"
#include "epipose/geom.hpp"
#include "epipose/render.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace epipose {

/// Pose score parts. s_M and s_C are average log likelihoods (nats, <= 0);
/// the total weighs them by their maximum entropies: s_M / log 2 and
/// s_C / log |S| where |S| is the key count.
struct ScoreBreakdown {
  double s_M = 0.0;
  double s_C = 0.0;
  double total = 0.0;
};

inline double total_score(double s_m, double s_c, int key_count) {
  return s_m / std::log(2.0) + s_c / std::log(double(key_count));
}

/// Average log likelihood of the rendered mask under the per-pixel mask
/// probabilities, over all pixels. Probabilities are clamped to
/// [1e-6, 1 - 1e-6] before the log.
inline double mask_score(const RenderedView& rv, const EmbeddingField& field) {
  double delta = 0.0;
  const std::size_t n = field.pixel_count();
  for (std::size_t i = 0; i < n; ++i)
    if (rv.mask[i]) delta += field.log_mask(i) - field.log_inv_mask(i);
  return (field.sum_log_inv_mask() + delta) / double(n);
}

/// Average log likelihood of the rendered object coordinates within the
/// rendered mask. Each coordinate snaps to its nearest key sample (the
/// distribution lives on the key sample set).
inline Result<double> corr_score(const RenderedView& rv,
                                 const EmbeddingField& field,
                                 const KeySet& keys) {
  double sum = 0.0;
  std::size_t count = 0;
  for (int y = 0; y < rv.height; ++y)
    for (int x = 0; x < rv.width; ++x) {
      const Pixel p{x, y};
      const std::size_t i = rv.index(p);
      if (!rv.mask[i]) continue;
      const int nn = keys.nearest(rv.coords[i]);
      const double logit = keys.key(nn).dot(field.query_d(p));
      sum += logit - field.log_partition(p, keys);
      ++count;
    }
  if (count == 0) return Err::EmptyMask;
  return sum / double(count);
}

/// Mask and correspondence scores averaged over views. A view in which the
/// pose renders an empty mask contributes the maximum-entropy penalty
/// -log |S| to s_C, so poses outside a view's frustum are dominated by poses
/// visible in it.
inline ScoreBreakdown multiview_score(const Pose& pose,
                                      std::span<const Camera> cams,
                                      std::span<const EmbeddingField> fields,
                                      const ObjectModel& model,
                                      const KeySet& keys) {
  ScoreBreakdown sb;
  const int n = static_cast<int>(cams.size());
  for (int v = 0; v < n; ++v) {
    const RenderedView rv = render_pose(model, pose, cams[v]);
    sb.s_M += mask_score(rv, fields[v]);
    const auto sc = corr_score(rv, fields[v], keys);
    sb.s_C += sc.ok() ? *sc : -std::log(double(keys.count()));
  }
  sb.s_M /= n;
  sb.s_C /= n;
  sb.total = total_score(sb.s_M, sb.s_C, keys.count());
  return sb;
}

struct RefineConfig {
  int max_iters = 50;
  double grad_tol = 1e-6;
  double fd_step_rot = 1e-3;        // radians
  double fd_step_trans = 1e-3;      // fraction of model diameter
  bool include_partial_mask = true;
  int stride = 4;
};

namespace detail {

/// Frozen refinement objective. The visible coordinate set is fixed at the
/// initial pose; under a perturbed pose the points are re-projected and the
/// per-pixel log likelihoods are sampled with a bicubic patch so the objective is
/// continuous in the pose parameters.
class RefineObjective {
 public:
  RefineObjective(const Pose& pose0, std::span<const Camera> cams,
                  std::span<const EmbeddingField> fields,
                  const ObjectModel& model, const KeySet& keys,
                  const RefineConfig& cfg)
      : pose0_(pose0),
        cams_(cams),
        fields_(fields),
        keys_(keys),
        cfg_(cfg),
        diameter_(model.diameter) {
    views_.resize(cams.size());
    for (std::size_t v = 0; v < cams.size(); ++v) {
      const RenderedView rv = render_pose(model, pose0, cams_[v]);
      for (const auto& [px, c] : visibility_subset(rv, cfg.stride)) {
        views_[v].coords.push_back(c);
        views_[v].key_index.push_back(keys.nearest(c));
      }
    }
  }

  bool has_points() const {
    for (const auto& v : views_)
      if (!v.coords.empty()) return true;
    return false;
  }

  Pose pose_at(const Vec6& x) const {
    Vec6 delta = x;
    delta.tail<3>() *= diameter_;
    return se3_perturb(pose0_, delta);
  }

  /// Mean over views of the mean frozen-point log likelihood (correspondence
  /// term plus, optionally, the partial mask term). Higher is better.
  double operator()(const Vec6& x) const {
    const Pose pose = pose_at(x);
    const double floor_log = std::log(kMaskProbClamp);
    double j = 0.0;
    int used_views = 0;
    for (std::size_t v = 0; v < views_.size(); ++v) {
      const auto& fv = views_[v];
      if (fv.coords.empty()) continue;
      ++used_views;
      double acc = 0.0;
      for (std::size_t i = 0; i < fv.coords.size(); ++i) {
        const auto uv = project(cams_[v], pose.apply(fv.coords[i]));
        if (!uv.ok()) {
          acc += cfg_.include_partial_mask ? 2.0 * floor_log : floor_log;
          continue;
        }
        acc += sample_corr_logprob(v, *uv, fv.key_index[i]);
        if (cfg_.include_partial_mask) acc += sample_log_mask(v, *uv);
      }
      j += acc / double(fv.coords.size());
    }
    return j / double(used_views);
  }

 private:
  struct FrozenView {
    std::vector<Vec3> coords;
    std::vector<int> key_index;
  };

  static void catmull_rom_weights(double t, double* w) {
    const double t2 = t * t, t3 = t2 * t;
    w[0] = -0.5 * t3 + t2 - 0.5 * t;
    w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
    w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
    w[3] = 0.5 * t3 - 0.5 * t2;
  }

  /// Catmull-Rom bicubic sampling in pixel-center space, border-clamped.
  /// Bilinear sampling is not enough here: the frozen points start exactly on
  /// pixel centers, and a bilinear interpolant of a peaked field attains its
  /// maximum at grid nodes, which pins the objective at the starting pose for
  /// sub-pixel perturbations. The cubic's slope at a node is the central
  /// difference, so points are pulled toward the true inter-pixel peak.
  template <typename ValueAt>
  double sample_patch(const EmbeddingField& f, const Vec2& uv,
                      ValueAt&& value) const {
    const double fx = std::clamp(uv.x() - 0.5, 0.0, double(f.width() - 1));
    const double fy = std::clamp(uv.y() - 0.5, 0.0, double(f.height() - 1));
    const int x0 = static_cast<int>(std::floor(fx));
    const int y0 = static_cast<int>(std::floor(fy));
    double wx[4], wy[4];
    catmull_rom_weights(fx - x0, wx);
    catmull_rom_weights(fy - y0, wy);
    double acc = 0.0;
    for (int j = 0; j < 4; ++j) {
      const int py = std::clamp(y0 - 1 + j, 0, f.height() - 1);
      double row = 0.0;
      for (int i = 0; i < 4; ++i) {
        const int px = std::clamp(x0 - 1 + i, 0, f.width() - 1);
        row += wx[i] * value(Pixel{px, py});
      }
      acc += wy[j] * row;
    }
    return acc;
  }

  // Log probabilities are bounded by zero; clamping the interpolated value
  // removes the cubic's ringing overshoot next to sharp boundaries, which
  // would otherwise fabricate spurious objective maxima just inside the mask.
  double sample_corr_logprob(std::size_t v, const Vec2& uv, int key) const {
    const auto& f = fields_[v];
    return std::min(0.0, sample_patch(f, uv, [&](Pixel p) {
      return keys_.key(key).dot(f.query_d(p)) - f.log_partition(p, keys_);
    }));
  }

  // The mask table is a plateau with a cliff at the boundary; bilinear
  // sampling is bounded by the sample range there, while a cubic would ring.
  double sample_log_mask(std::size_t v, const Vec2& uv) const {
    const auto& f = fields_[v];
    const double fx = std::clamp(uv.x() - 0.5, 0.0, double(f.width() - 1));
    const double fy = std::clamp(uv.y() - 0.5, 0.0, double(f.height() - 1));
    const int x0 = std::min(static_cast<int>(fx), std::max(f.width() - 2, 0));
    const int y0 = std::min(static_cast<int>(fy), std::max(f.height() - 2, 0));
    const int x1 = std::min(x0 + 1, f.width() - 1);
    const int y1 = std::min(y0 + 1, f.height() - 1);
    const double ax = fx - x0, ay = fy - y0;
    auto at = [&](int x, int y) { return f.log_mask(f.index(Pixel{x, y})); };
    return (1 - ax) * ((1 - ay) * at(x0, y0) + ay * at(x0, y1)) +
           ax * ((1 - ay) * at(x1, y0) + ay * at(x1, y1));
  }

  Pose pose0_;
  std::span<const Camera> cams_;
  std::span<const EmbeddingField> fields_;
  const KeySet& keys_;
  RefineConfig cfg_;
  double diameter_;
  std::vector<FrozenView> views_;
};

}  // namespace detail

/// Quasi-Newton (BFGS) maximization of the frozen refinement objective over
/// an SE(3) perturbation of the initial pose. Returns the refined pose only
/// if its full multi-view score does not decrease; otherwise the input pose
/// is returned unchanged.
inline std::pair<Pose, ScoreBreakdown> refine(
    const Pose& pose, std::span<const Camera> cams,
    std::span<const EmbeddingField> fields, const ObjectModel& model,
    const KeySet& keys, const RefineConfig& cfg = {}) {
  const ScoreBreakdown initial = multiview_score(pose, cams, fields, model, keys);
  const detail::RefineObjective objective(pose, cams, fields, model, keys, cfg);
  if (!objective.has_points()) return {pose, initial};

  auto f = [&](const Vec6& x) { return -objective(x); };
  Vec6 steps;
  steps << cfg.fd_step_rot, cfg.fd_step_rot, cfg.fd_step_rot,
      cfg.fd_step_trans, cfg.fd_step_trans, cfg.fd_step_trans;
  auto grad = [&](const Vec6& x) {
    Vec6 g;
    for (int i = 0; i < 6; ++i) {
      Vec6 xp = x, xm = x;
      xp(i) += steps(i);
      xm(i) -= steps(i);
      g(i) = (f(xp) - f(xm)) / (2.0 * steps(i));
    }
    return g;
  };

  Vec6 x = Vec6::Zero();
  double fx = f(x);
  Vec6 gx = grad(x);
  Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Identity();

  Vec6 best_x = x;
  double best_f = fx;
  for (int it = 0; it < cfg.max_iters; ++it) {
    if (gx.norm() < cfg.grad_tol) break;
    Vec6 p = -(h * gx);
    double gtp = gx.dot(p);
    if (gtp >= 0.0) {
      h.setIdentity();
      p = -gx;
      gtp = gx.dot(p);
      if (gtp >= 0.0) break;
    }

    // Backtracking Armijo line search. The first trial step is capped so a
    // raw gradient step cannot leave the meaningful pose range (parameters
    // are radians and diameter fractions); near convergence the cap is
    // inactive and the BFGS unit step goes through.
    double alpha = std::min(1.0, 0.25 / std::max(1e-12, p.norm()));
    bool accepted = false;
    Vec6 xn = x;
    double fn = fx;
    for (int ls = 0; ls < 40; ++ls) {
      xn = x + alpha * p;
      fn = f(xn);
      if (fn <= fx + 1e-4 * alpha * gtp) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;

    const Vec6 gn = grad(xn);
    const Vec6 s = xn - x;
    const Vec6 y = gn - gx;
    const double sy = s.dot(y);
    if (sy > 1e-10 * s.norm() * y.norm()) {
      const double rho = 1.0 / sy;
      const Eigen::Matrix<double, 6, 6> eye =
          Eigen::Matrix<double, 6, 6>::Identity();
      h = (eye - rho * s * y.transpose()) * h * (eye - rho * y * s.transpose()) +
          rho * s * s.transpose();
    }
    x = xn;
    fx = fn;
    gx = gn;
    if (fx < best_f) {
      best_f = fx;
      best_x = x;
    }
  }

  const Pose refined = objective.pose_at(best_x);
  const ScoreBreakdown sb = multiview_score(refined, cams, fields, model, keys);
  if (sb.total >= initial.total) return {refined, sb};
  return {pose, initial};
}

}  // namespace epipose
