#pragma once

#include "epipose/core.hpp"
#include "epipose/geom.hpp"
#include "epipose/parallel.hpp"
#include "epipose/rng.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <vector>

namespace epipose {

inline constexpr double kMaskProbClamp = 1e-6;
// Categorical weights below this are treated as exact zeros; sampling in the
// denormal range is numerically meaningless.
inline constexpr double kWeightFloor = 1e-300;

/// Inverse-CDF categorical sampler over a fixed weight vector.
/// Construction is O(N), each draw O(log N).
class CategoricalSampler {
 public:
  explicit CategoricalSampler(std::span<const double> weights) {
    cdf_.reserve(weights.size());
    double acc = 0.0;
    for (double w : weights) {
      if (w >= kWeightFloor) acc += w;
      cdf_.push_back(acc);
    }
    total_ = acc;
  }

  double total() const { return total_; }
  bool empty() const { return total_ < kWeightFloor; }

  std::size_t sample(Rng& rng) const {
    const double r = rng.uniform01() * total_;
    const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), r);
    return std::min<std::size_t>(it - cdf_.begin(), cdf_.size() - 1);
  }

 private:
  std::vector<double> cdf_;
  double total_ = 0.0;
};

/// Object-surface sample set with key embeddings. Coordinates and keys are
/// stored as float32 (the on-disk precision); compute mirrors are double.
class KeySet {
 public:
  KeySet() : KeySet({}, {}, 0, 0.0) {}

  KeySet(std::vector<float> coords, std::vector<float> keys, int embed_dim,
         double diameter)
      : coords_(std::move(coords)),
        keys_(std::move(keys)),
        embed_dim_(embed_dim),
        diameter_(diameter) {
    count_ = static_cast<int>(coords_.size() / 3);
    keys_d_.resize(count_, embed_dim_);
    for (int i = 0; i < count_; ++i)
      for (int e = 0; e < embed_dim_; ++e)
        keys_d_(i, e) = keys_[std::size_t(i) * embed_dim_ + e];
    coords_d_.reserve(count_);
    for (int i = 0; i < count_; ++i)
      coords_d_.emplace_back(coords_[3 * i], coords_[3 * i + 1],
                             coords_[3 * i + 2]);
    build_grid();
  }

  KeySet(const KeySet& o)
      : coords_(o.coords_),
        keys_(o.keys_),
        embed_dim_(o.embed_dim_),
        diameter_(o.diameter_),
        count_(o.count_),
        keys_d_(o.keys_d_),
        coords_d_(o.coords_d_),
        grid_dim_(o.grid_dim_),
        grid_origin_(o.grid_origin_),
        cell_(o.cell_),
        cell_start_(o.cell_start_),
        cell_items_(o.cell_items_),
        uid_(next_uid()) {}
  KeySet(KeySet&&) = default;
  KeySet& operator=(const KeySet&) = delete;
  KeySet& operator=(KeySet&&) = default;

  int count() const { return count_; }
  int embed_dim() const { return embed_dim_; }
  double diameter() const { return diameter_; }
  /// Process-unique id; caches key on it rather than on the address, which
  /// can be reused by a later KeySet.
  std::uint64_t uid() const { return uid_; }
  const Vec3& coord(int i) const { return coords_d_[i]; }
  Eigen::Ref<const Eigen::RowVectorXd> key(int i) const { return keys_d_.row(i); }
  const Eigen::MatrixXd& keys_matrix() const { return keys_d_; }
  const std::vector<float>& raw_coords() const { return coords_; }
  const std::vector<float>& raw_keys() const { return keys_; }

  double max_coord_radius() const {
    double m = 0.0;
    for (const Vec3& c : coords_d_) m = std::max(m, c.norm());
    return m;
  }

  /// Index of the key sample nearest to p. Ties break to the lowest index.
  int nearest(const Vec3& p) const {
    if (count_ == 0) return -1;
    const auto cell_of = [&](double v, int lim) {
      int c = static_cast<int>(std::floor((v - grid_origin_) / cell_));
      return std::clamp(c, 0, lim - 1);
    };
    const int cx = cell_of(p.x(), grid_dim_), cy = cell_of(p.y(), grid_dim_),
              cz = cell_of(p.z(), grid_dim_);
    int best = -1;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (int ring = 0; ring < grid_dim_; ++ring) {
      // Once a hit exists, no point in a farther ring can beat it.
      if (best >= 0) {
        const double ring_min = (ring - 1) * cell_;
        if (ring_min > 0 && ring_min * ring_min > best_d2) break;
      }
      bool any_cell = false;
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring)
              continue;
            const int gx = cx + dx, gy = cy + dy, gz = cz + dz;
            if (gx < 0 || gy < 0 || gz < 0 || gx >= grid_dim_ ||
                gy >= grid_dim_ || gz >= grid_dim_)
              continue;
            any_cell = true;
            const std::size_t cell =
                (std::size_t(gz) * grid_dim_ + gy) * grid_dim_ + gx;
            for (int idx = cell_start_[cell]; idx < cell_start_[cell + 1]; ++idx) {
              const int i = cell_items_[idx];
              const double d2 = (coords_d_[i] - p).squaredNorm();
              if (d2 < best_d2 || (d2 == best_d2 && i < best)) {
                best_d2 = d2;
                best = i;
              }
            }
          }
      if (!any_cell && best >= 0) break;
    }
    return best;
  }

 private:
  void build_grid() {
    grid_dim_ = 24;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const Vec3& c : coords_d_) {
      lo = std::min({lo, c.x(), c.y(), c.z()});
      hi = std::max({hi, c.x(), c.y(), c.z()});
    }
    if (!(hi > lo)) {
      lo -= 0.5;
      hi += 0.5;
    }
    const double span = hi - lo;
    grid_origin_ = lo - 1e-9 * span;
    cell_ = span * (1.0 + 2e-9) / grid_dim_;
    std::vector<int> counts(std::size_t(grid_dim_) * grid_dim_ * grid_dim_, 0);
    auto cell_index = [&](const Vec3& c) {
      const auto f = [&](double v) {
        return std::clamp(static_cast<int>(std::floor((v - grid_origin_) / cell_)),
                          0, grid_dim_ - 1);
      };
      return (std::size_t(f(c.z())) * grid_dim_ + f(c.y())) * grid_dim_ + f(c.x());
    };
    for (const Vec3& c : coords_d_) counts[cell_index(c)]++;
    cell_start_.assign(counts.size() + 1, 0);
    for (std::size_t i = 0; i < counts.size(); ++i)
      cell_start_[i + 1] = cell_start_[i] + counts[i];
    cell_items_.resize(count_);
    std::vector<int> fill(cell_start_.begin(), cell_start_.end() - 1);
    for (int i = 0; i < count_; ++i) cell_items_[fill[cell_index(coords_d_[i])]++] = i;
  }

  static std::uint64_t next_uid() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::vector<float> coords_, keys_;
  int embed_dim_ = 0;
  double diameter_ = 0.0;
  int count_ = 0;
  Eigen::MatrixXd keys_d_;
  std::vector<Vec3> coords_d_;
  int grid_dim_ = 0;
  double grid_origin_ = 0.0, cell_ = 1.0;
  std::vector<int> cell_start_;
  std::vector<int> cell_items_;
  std::uint64_t uid_ = next_uid();
};

/// Per-view query-embedding grid and mask-probability grid. The log-partition
/// of the correspondence distribution is cached per pixel on first use; the
/// fill is idempotent (identical values), so concurrent readers are fine.
class EmbeddingField {
 public:
  EmbeddingField(int view_id, int width, int height, int embed_dim,
                 std::vector<float> queries, std::vector<float> mask_prob)
      : view_id_(view_id),
        width_(width),
        height_(height),
        embed_dim_(embed_dim),
        queries_(std::move(queries)),
        mask_(std::move(mask_prob)) {
    const std::size_t n = pixel_count();
    log_mask_.resize(n);
    log_inv_mask_.resize(n);
    sum_log_inv_mask_ = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double m = mask_[i];
      log_mask_[i] = std::log(std::clamp(m, kMaskProbClamp, 1.0 - kMaskProbClamp));
      log_inv_mask_[i] =
          std::log(std::clamp(1.0 - m, kMaskProbClamp, 1.0 - kMaskProbClamp));
      sum_log_inv_mask_ += log_inv_mask_[i];
    }
    reset_cache();
  }

  EmbeddingField(const EmbeddingField& o)
      : view_id_(o.view_id_),
        width_(o.width_),
        height_(o.height_),
        embed_dim_(o.embed_dim_),
        queries_(o.queries_),
        mask_(o.mask_),
        log_mask_(o.log_mask_),
        log_inv_mask_(o.log_inv_mask_),
        sum_log_inv_mask_(o.sum_log_inv_mask_) {
    reset_cache();
  }
  EmbeddingField& operator=(const EmbeddingField&) = delete;
  EmbeddingField(EmbeddingField&& o) noexcept
      : view_id_(o.view_id_),
        width_(o.width_),
        height_(o.height_),
        embed_dim_(o.embed_dim_),
        queries_(std::move(o.queries_)),
        mask_(std::move(o.mask_)),
        log_mask_(std::move(o.log_mask_)),
        log_inv_mask_(std::move(o.log_inv_mask_)),
        sum_log_inv_mask_(o.sum_log_inv_mask_),
        logz_(std::move(o.logz_)) {
    logz_keys_.store(o.logz_keys_.load(std::memory_order_acquire),
                     std::memory_order_release);
  }
  EmbeddingField& operator=(EmbeddingField&&) = delete;

  int view_id() const { return view_id_; }
  int width() const { return width_; }
  int height() const { return height_; }
  int embed_dim() const { return embed_dim_; }
  std::size_t pixel_count() const { return std::size_t(width_) * height_; }
  bool contains(Pixel p) const {
    return p.x >= 0 && p.y >= 0 && p.x < width_ && p.y < height_;
  }

  std::size_t index(Pixel p) const { return std::size_t(p.y) * width_ + p.x; }
  double mask_prob(Pixel p) const { return mask_[index(p)]; }
  double mask_prob_at(std::size_t i) const { return mask_[i]; }
  double log_mask(std::size_t i) const { return log_mask_[i]; }
  double log_inv_mask(std::size_t i) const { return log_inv_mask_[i]; }
  double sum_log_inv_mask() const { return sum_log_inv_mask_; }

  Eigen::Map<const Eigen::VectorXf> query(Pixel p) const {
    return {queries_.data() + index(p) * embed_dim_, embed_dim_};
  }
  VecX query_d(Pixel p) const { return query(p).cast<double>(); }

  const std::vector<float>& raw_queries() const { return queries_; }
  const std::vector<float>& raw_mask() const { return mask_; }

  /// log sum_i exp(q_u . k_i), computed with max-subtraction and cached.
  /// The cache binds to the first KeySet it sees (a field is used with one
  /// key set per bundle); other key sets are computed without caching.
  double log_partition(Pixel p, const KeySet& keys) const {
    std::uint64_t tag = logz_keys_.load(std::memory_order_acquire);
    if (tag == 0) {
      std::uint64_t expected = 0;
      logz_keys_.compare_exchange_strong(expected, keys.uid(),
                                         std::memory_order_acq_rel);
      tag = logz_keys_.load(std::memory_order_acquire);
    }
    if (tag != keys.uid()) return log_sum_exp(keys.keys_matrix() * query_d(p));
    const std::size_t i = index(p);
    const double cached = logz_[i].load(std::memory_order_relaxed);
    if (!std::isnan(cached)) return cached;
    const double z = log_sum_exp(keys.keys_matrix() * query_d(p));
    logz_[i].store(z, std::memory_order_relaxed);
    return z;
  }

  static double log_sum_exp(const VecX& logits) {
    const double m = logits.maxCoeff();
    double s = 0.0;
    for (Eigen::Index i = 0; i < logits.size(); ++i)
      s += std::exp(logits(i) - m);
    return m + std::log(s);
  }

 private:
  void reset_cache() {
    const std::size_t n = pixel_count();
    logz_ = std::make_unique<std::atomic<double>[]>(n);
    for (std::size_t i = 0; i < n; ++i)
      logz_[i].store(std::numeric_limits<double>::quiet_NaN(),
                     std::memory_order_relaxed);
  }

  int view_id_, width_, height_, embed_dim_;
  std::vector<float> queries_;
  std::vector<float> mask_;
  std::vector<double> log_mask_, log_inv_mask_;
  double sum_log_inv_mask_ = 0.0;
  mutable std::unique_ptr<std::atomic<double>[]> logz_;
  mutable std::atomic<std::uint64_t> logz_keys_{0};
};

/// One sampled 3D-3D correspondence: pixel u1, object point index, second
/// pixel u2 in another view, and the triangulated scene point x.
struct CorrSample {
  ViewPixel u1;
  int c_index = -1;
  ViewPixel u2;
  Vec3 x = Vec3::Zero();

  bool operator==(const CorrSample& o) const {
    return u1 == o.u1 && c_index == o.c_index && u2 == o.u2 && x == o.x;
  }
};

/// p(c_i | u, I) = exp(q_u . k_i - logZ_u) over all key samples.
inline std::vector<double> corr_distribution(const EmbeddingField& field,
                                             Pixel u, const KeySet& keys) {
  const VecX logits = keys.keys_matrix() * field.query_d(u);
  const double z = field.log_partition(u, keys);
  std::vector<double> p(keys.count());
  for (int i = 0; i < keys.count(); ++i) p[i] = std::exp(logits(i) - z);
  return p;
}

/// Flat categorical over all pixels of all views, weighted by mask
/// probability. Built once and reused across draws.
class U1Distribution {
 public:
  explicit U1Distribution(std::span<const EmbeddingField> fields) {
    std::vector<double> w;
    for (const auto& f : fields) {
      offsets_.push_back(w.size());
      widths_.push_back(f.width());
      for (std::size_t i = 0; i < f.pixel_count(); ++i)
        w.push_back(f.mask_prob_at(i));
    }
    offsets_.push_back(w.size());
    sampler_ = std::make_unique<CategoricalSampler>(w);
  }

  bool empty() const { return sampler_->empty(); }

  ViewPixel sample(Rng& rng) const {
    const std::size_t flat = sampler_->sample(rng);
    const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), flat);
    const int view = static_cast<int>(it - offsets_.begin()) - 1;
    const std::size_t local = flat - offsets_[view];
    const int w = widths_[view];
    return {view, Pixel{static_cast<int>(local % w), static_cast<int>(local / w)}};
  }

 private:
  std::vector<std::size_t> offsets_;
  std::vector<int> widths_;
  std::unique_ptr<CategoricalSampler> sampler_;
};

/// Draws n pixels i.i.d. across all views proportional to mask probability.
inline Result<std::vector<ViewPixel>> sample_u1(
    std::span<const EmbeddingField> fields, int n, Rng& rng) {
  const U1Distribution dist(fields);
  if (dist.empty()) return Err::EmptyMask;
  std::vector<ViewPixel> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(dist.sample(rng));
  return out;
}

/// Draws m key indices i.i.d. from p(c | u1, I).
inline std::vector<int> sample_c_given_u1(const EmbeddingField& field, Pixel u1,
                                          const KeySet& keys, int m, Rng& rng) {
  const std::vector<double> p = corr_distribution(field, u1, keys);
  const CategoricalSampler sampler(p);
  std::vector<int> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i)
    out.push_back(static_cast<int>(sampler.sample(rng)));
  return out;
}

namespace detail {

/// Epipolar candidate pixels of one u1 in every other view, with the parts of
/// the u2 weight that do not depend on the sampled object point.
struct U2Candidates {
  struct Entry {
    int view;
    Pixel px;
    double mask;
    double logz;
  };
  std::vector<Entry> entries;
  // Per-candidate query embeddings as a matrix for fast per-key weighting.
  Eigen::MatrixXd queries;  // entries x E
};

inline U2Candidates collect_u2_candidates(
    ViewPixel u1, std::span<const EmbeddingField> fields,
    std::span<const Camera> cams, const KeySet& keys,
    const std::vector<std::vector<Mat3>>& fmats, double band_px,
    double epipole_px) {
  U2Candidates cand;
  for (int j = 0; j < static_cast<int>(fields.size()); ++j) {
    if (j == u1.view) continue;
    if (!std::isfinite(fmats[u1.view][j](0, 0))) continue;  // degenerate pair
    const auto px = epipolar_line_pixels(u1.px, cams[u1.view], cams[j],
                                         fmats[u1.view][j], band_px, epipole_px);
    if (!px.ok()) continue;
    for (const Pixel& p : *px) {
      const double m = fields[j].mask_prob(p);
      if (m < kWeightFloor) continue;
      cand.entries.push_back({j, p, m, fields[j].log_partition(p, keys)});
    }
  }
  cand.queries.resize(cand.entries.size(), keys.embed_dim());
  for (std::size_t i = 0; i < cand.entries.size(); ++i)
    cand.queries.row(i) =
        fields[cand.entries[i].view].query_d(cand.entries[i].px).transpose();
  return cand;
}

}  // namespace detail

/// Draws m second pixels from p(u2 | u1, c): candidates are the epipolar-line
/// pixels of u1 in every other view, weighted by mask probability times the
/// correspondence probability of c, normalized jointly across views.
inline Result<std::vector<ViewPixel>> sample_u2(
    ViewPixel u1, int c_index, std::span<const EmbeddingField> fields,
    std::span<const Camera> cams, const KeySet& keys, int m, Rng& rng,
    double band_px = kEpipolarBandPx, double epipole_px = kEpipoleExclusionPx) {
  std::vector<std::vector<Mat3>> fmats(fields.size(),
                                       std::vector<Mat3>(fields.size()));
  for (auto& row : fmats)
    for (auto& f : row) f.setConstant(std::numeric_limits<double>::quiet_NaN());
  for (int j = 0; j < static_cast<int>(fields.size()); ++j) {
    if (j == u1.view) continue;
    const auto f = fundamental_matrix(cams[u1.view], cams[j]);
    if (f.ok()) fmats[u1.view][j] = *f;
  }
  const auto cand = detail::collect_u2_candidates(u1, fields, cams, keys, fmats,
                                                  band_px, epipole_px);
  if (cand.entries.empty()) return Err::NoCandidates;

  const VecX logits = cand.queries * keys.key(c_index).transpose();
  std::vector<double> w(cand.entries.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = cand.entries[i].mask * std::exp(logits(i) - cand.entries[i].logz);
  const CategoricalSampler sampler(w);
  if (sampler.empty()) return Err::NoCandidates;

  std::vector<ViewPixel> out;
  out.reserve(m);
  for (int i = 0; i < m; ++i) {
    const auto& e = cand.entries[sampler.sample(rng)];
    out.push_back({e.view, e.px});
  }
  return out;
}

struct SampleConfig {
  int n_u1 = 5000;
  int n_c = 5;
  int n_u2 = 5;
  double band_px = kEpipolarBandPx;
  double epipole_px = kEpipoleExclusionPx;
  double min_ray_angle_deg = kNearParallelDeg;
};

/// Full three-stage correspondence draw. The u1 batch is split into
/// fixed-size shards with per-shard derived seeds, so the output is
/// deterministic for a given seed regardless of thread count. Samples whose
/// triangulation fails are dropped silently.
inline Result<std::vector<CorrSample>> draw_correspondences(
    std::span<const EmbeddingField> fields, std::span<const Camera> cams,
    const KeySet& keys, const SampleConfig& cfg, std::uint64_t seed,
    int threads = 0) {
  if (fields.size() < 2) return Err::NoCandidates;
  const U1Distribution u1_dist(fields);
  if (u1_dist.empty()) return Err::EmptyMask;

  const int n_views = static_cast<int>(fields.size());
  std::vector<std::vector<Mat3>> fmats(n_views, std::vector<Mat3>(n_views));
  for (auto& row : fmats)
    for (auto& f : row) f.setConstant(std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < n_views; ++i)
    for (int j = 0; j < n_views; ++j) {
      if (i == j) continue;
      const auto f = fundamental_matrix(cams[i], cams[j]);
      if (f.ok()) fmats[i][j] = *f;
    }

  constexpr int kShardSize = 256;
  const int n_shards = (cfg.n_u1 + kShardSize - 1) / kShardSize;
  std::vector<std::vector<CorrSample>> shard_out(n_shards);
  std::vector<char> shard_all_no_candidates(n_shards, 0);

  parallel_for(n_shards, threads, [&](std::size_t s) {
    Rng rng = Rng::derive(seed, s);
    const int quota =
        std::min(kShardSize, cfg.n_u1 - static_cast<int>(s) * kShardSize);
    auto& out = shard_out[s];
    bool all_no_candidates = true;
    for (int iu = 0; iu < quota; ++iu) {
      const ViewPixel u1 = u1_dist.sample(rng);
      const auto& field1 = fields[u1.view];
      const std::vector<double> pc = corr_distribution(field1, u1.px, keys);
      const CategoricalSampler c_sampler(pc);

      const auto cand = detail::collect_u2_candidates(
          u1, fields, cams, keys, fmats, cfg.band_px, cfg.epipole_px);
      if (cand.entries.empty()) continue;
      all_no_candidates = false;

      for (int ic = 0; ic < cfg.n_c; ++ic) {
        const int c_index = static_cast<int>(c_sampler.sample(rng));
        const VecX logits = cand.queries * keys.key(c_index).transpose();
        std::vector<double> w(cand.entries.size());
        for (std::size_t i = 0; i < w.size(); ++i)
          w[i] = cand.entries[i].mask *
                 std::exp(logits(i) - cand.entries[i].logz);
        const CategoricalSampler u2_sampler(w);
        if (u2_sampler.empty()) continue;
        for (int i2 = 0; i2 < cfg.n_u2; ++i2) {
          const auto& e = cand.entries[u2_sampler.sample(rng)];
          const auto x = triangulate(pixel_center(u1.px), cams[u1.view],
                                     pixel_center(e.px), cams[e.view],
                                     cfg.min_ray_angle_deg);
          if (!x.ok()) continue;
          out.push_back({u1, c_index, {e.view, e.px}, *x});
        }
      }
    }
    shard_all_no_candidates[s] = all_no_candidates ? 1 : 0;
  });

  std::vector<CorrSample> result;
  bool all_no_candidates = true;
  for (int s = 0; s < n_shards; ++s) {
    if (!shard_all_no_candidates[s]) all_no_candidates = false;
    result.insert(result.end(), shard_out[s].begin(), shard_out[s].end());
  }
  if (result.empty() && all_no_candidates) return Err::NoCandidates;
  return result;
}

}  // namespace epipose
