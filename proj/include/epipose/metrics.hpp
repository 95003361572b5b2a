#pragma once

#include "epipose/core.hpp"
#include "epipose/geom.hpp"
#include "epipose/render.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace epipose {

/// BOP-style pose errors for one estimate. vsd holds one value per tau in
/// the standard grid (vsd_taus).
struct PoseErrors {
  double mssd = 0.0;              // scene units
  double mspd = 0.0;              // pixels, normalized by 640/image_width
  std::vector<double> vsd;        // fractions in [0, 1], one per tau
};

struct RecallReport {
  double ar_vsd = 0.0;
  double ar_mssd = 0.0;
  double ar_mspd = 0.0;
  double ar = 0.0;
};

/// Maximum symmetry-aware surface distance: min over declared symmetries of
/// the max vertex displacement between est and gt composed with the symmetry.
inline double mssd(const Pose& est, const Pose& gt, const ObjectModel& model) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& sym : model.symmetries) {
    double worst = 0.0;
    for (const Vec3& v : model.vertices) {
      const Vec3 e = est.apply(v);
      const Vec3 g = gt.apply(sym.apply(v));
      worst = std::max(worst, (e - g).norm());
    }
    best = std::min(best, worst);
  }
  return best;
}

/// Maximum symmetry-aware projection distance in pixels, normalized to a
/// 640-wide image (multiplied by 640/image_width).
inline Result<double> mspd(const Pose& est, const Pose& gt,
                           const ObjectModel& model, const Camera& camera) {
  const double scale = 640.0 / camera.width;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& sym : model.symmetries) {
    double worst = 0.0;
    for (const Vec3& v : model.vertices) {
      const auto pe = project(camera, est.apply(v));
      const auto pg = project(camera, gt.apply(sym.apply(v)));
      if (!pe.ok() || !pg.ok()) return Err::VertexBehindCamera;
      worst = std::max(worst, (*pe - *pg).norm());
    }
    best = std::min(best, worst * scale);
  }
  return best;
}

/// Standard tau grid for VSD: {0.05, ..., 0.50} * diameter.
inline std::vector<double> vsd_taus(double diameter) {
  std::vector<double> taus;
  for (int i = 1; i <= 10; ++i) taus.push_back(0.05 * i * diameter);
  return taus;
}

/// Visible surface discrepancy per tau. Single-object variant: visibility is
/// simply where each rendering has valid depth, with no occluder term, so
/// delta_tol is accepted for interface parity but unused.
inline std::vector<double> vsd(const Pose& est, const Pose& gt,
                               const ObjectModel& model, const Camera& camera,
                               std::span<const double> taus,
                               double delta_tol = 15.0) {
  (void)delta_tol;
  const RenderedView re = render_pose(model, est, camera);
  const RenderedView rg = render_pose(model, gt, camera);
  std::size_t union_count = 0;
  std::vector<std::size_t> mismatch(taus.size(), 0);
  for (std::size_t i = 0; i < re.mask.size(); ++i) {
    const bool me = re.mask[i] != 0, mg = rg.mask[i] != 0;
    if (!me && !mg) continue;
    ++union_count;
    if (me != mg) {
      for (auto& m : mismatch) ++m;
    } else {
      const double dd = std::abs(re.depth[i] - rg.depth[i]);
      for (std::size_t t = 0; t < taus.size(); ++t)
        if (dd > taus[t]) ++mismatch[t];
    }
  }
  std::vector<double> out(taus.size(), 0.0);
  if (union_count == 0) return out;
  for (std::size_t t = 0; t < taus.size(); ++t)
    out[t] = double(mismatch[t]) / double(union_count);
  return out;
}

inline PoseErrors pose_errors(const Pose& est, const Pose& gt,
                              const ObjectModel& model, const Camera& camera) {
  PoseErrors e;
  e.mssd = mssd(est, gt, model);
  const auto pd = mspd(est, gt, model, camera);
  e.mspd = pd.ok() ? *pd : std::numeric_limits<double>::infinity();
  e.vsd = vsd(est, gt, model, camera, vsd_taus(model.diameter));
  return e;
}

/// BOP-style average recall. MSSD recall over thresholds
/// {0.05,...,0.50} * diameter, MSPD over {5,...,50} normalized px, VSD over
/// the tau grid crossed with thresholds {0.05,...,0.50}; ar is their mean.
inline RecallReport average_recall(std::span<const PoseErrors> errors,
                                   std::span<const double> diameters) {
  RecallReport r;
  if (errors.empty()) return r;
  const std::size_t n = errors.size();
  double mssd_hits = 0, mspd_hits = 0, vsd_hits = 0;
  std::size_t mssd_cells = 0, mspd_cells = 0, vsd_cells = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (int t = 1; t <= 10; ++t) {
      ++mssd_cells;
      if (errors[i].mssd < 0.05 * t * diameters[i]) ++mssd_hits;
      ++mspd_cells;
      if (errors[i].mspd < 5.0 * t) ++mspd_hits;
    }
    for (double v : errors[i].vsd)
      for (int t = 1; t <= 10; ++t) {
        ++vsd_cells;
        if (v < 0.05 * t) ++vsd_hits;
      }
  }
  r.ar_mssd = mssd_hits / double(mssd_cells);
  r.ar_mspd = mspd_hits / double(mspd_cells);
  r.ar_vsd = vsd_cells > 0 ? vsd_hits / double(vsd_cells) : 0.0;
  r.ar = (r.ar_vsd + r.ar_mssd + r.ar_mspd) / 3.0;
  return r;
}

}  // namespace epipose
