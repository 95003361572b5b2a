#pragma once

#include "epipose/core.hpp"
#include "epipose/dist.hpp"
#include "epipose/geom.hpp"
#include "epipose/parallel.hpp"
#include "epipose/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace epipose {

/// Three correspondences: a triangle in the object frame and one in the
/// scene frame. For a perfect triplet the two triangles are congruent.
struct Triplet {
  std::array<int, 3> indices{};
  std::array<Vec3, 3> obj{};
  std::array<Vec3, 3> scene{};
};

struct TripletScore {
  double noise = 0.0;   // side-length mismatch, scene units
  double signal = 0.0;  // smallest triangle height, scene units
  double snr = 0.0;
};

inline Triplet make_triplet(std::span<const CorrSample> corrs,
                            const KeySet& keys, std::array<int, 3> idx) {
  Triplet t;
  t.indices = idx;
  for (int k = 0; k < 3; ++k) {
    t.obj[k] = keys.coord(corrs[idx[k]].c_index);
    t.scene[k] = corrs[idx[k]].x;
  }
  return t;
}

/// L2 norm of the three side-length differences between the two triangles.
inline double triplet_noise(const Triplet& t) {
  double s = 0.0;
  for (const auto [i, j] : {std::pair{0, 1}, {0, 2}, {1, 2}}) {
    const double d = (t.obj[i] - t.obj[j]).norm() - (t.scene[i] - t.scene[j]).norm();
    s += d * d;
  }
  return std::sqrt(s);
}

/// Smallest of the six triangle heights (three per triangle).
inline double triplet_signal(const Triplet& t) {
  auto min_height = [](const std::array<Vec3, 3>& tri) {
    const double area2 = (tri[1] - tri[0]).cross(tri[2] - tri[0]).norm();
    double h = std::numeric_limits<double>::infinity();
    for (const auto [i, j] : {std::pair{0, 1}, {0, 2}, {1, 2}}) {
      const double base = (tri[i] - tri[j]).norm();
      h = std::min(h, base > 0.0 ? area2 / base : 0.0);
    }
    return std::isfinite(h) ? h : 0.0;
  };
  return std::min(min_height(t.obj), min_height(t.scene));
}

/// snr = signal / noise, with zero noise mapping to +inf (unless the signal
/// is also zero, which maps to 0: a degenerate triangle carries no signal).
inline TripletScore score_triplet(const Triplet& t) {
  TripletScore s;
  s.noise = triplet_noise(t);
  s.signal = triplet_signal(t);
  if (s.signal <= 0.0)
    s.snr = 0.0;
  else if (s.noise <= 0.0)
    s.snr = std::numeric_limits<double>::infinity();
  else
    s.snr = s.signal / s.noise;
  return s;
}

/// Draws n_triplets uniform index triples (distinct within a triple,
/// duplicates across triples allowed) and returns the top_k by descending
/// snr. Ties break by lower noise, then draw order.
inline Result<std::vector<Triplet>> rank_triplets(
    std::span<const CorrSample> corrs, const KeySet& keys, int n_triplets,
    int top_k, Rng& rng, int threads = 0) {
  const int n = static_cast<int>(corrs.size());
  if (n < 3) return Err::TooFewCorrespondences;

  std::vector<std::array<int, 3>> draws(n_triplets);
  for (auto& idx : draws) {
    idx[0] = static_cast<int>(rng.uniform_index(n));
    do {
      idx[1] = static_cast<int>(rng.uniform_index(n));
    } while (idx[1] == idx[0]);
    do {
      idx[2] = static_cast<int>(rng.uniform_index(n));
    } while (idx[2] == idx[0] || idx[2] == idx[1]);
  }

  struct Scored {
    double snr;
    double noise;
    int order;
  };
  std::vector<Scored> scored(n_triplets);
  parallel_for(n_triplets, threads, [&](std::size_t i) {
    const auto s = score_triplet(make_triplet(corrs, keys, draws[i]));
    scored[i] = {s.snr, s.noise, static_cast<int>(i)};
  });

  std::vector<int> order(n_triplets);
  for (int i = 0; i < n_triplets; ++i) order[i] = i;
  const auto better = [&](int a, int b) {
    if (scored[a].snr != scored[b].snr) return scored[a].snr > scored[b].snr;
    if (scored[a].noise != scored[b].noise)
      return scored[a].noise < scored[b].noise;
    return scored[a].order < scored[b].order;
  };
  const int k = std::min(top_k, n_triplets);
  std::nth_element(order.begin(), order.begin() + k, order.end(), better);
  std::sort(order.begin(), order.begin() + k, better);

  std::vector<Triplet> out;
  out.reserve(k);
  for (int i = 0; i < k; ++i)
    out.push_back(make_triplet(corrs, keys, draws[order[i]]));
  return out;
}

/// One Kabsch pose per non-degenerate triplet; degenerate triplets are
/// skipped. Fails only if every triplet is degenerate.
inline Result<std::vector<Pose>> hypotheses_from_triplets(
    std::span<const Triplet> triplets) {
  std::vector<Pose> out;
  out.reserve(triplets.size());
  for (const Triplet& t : triplets) {
    const auto p = kabsch(t.obj, t.scene);
    if (p.ok()) out.push_back(*p);
  }
  if (out.empty()) return Err::NoValidHypotheses;
  return out;
}

}  // namespace epipose
