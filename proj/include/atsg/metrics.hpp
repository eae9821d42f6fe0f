#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "atsg/errors.hpp"

namespace atsg {

using Dims3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Integer label grid with physical spacing (mm per voxel along each axis).
/// Layout is row-major, last axis fastest.
struct SegmentationMask {
  Dims3 dims{};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<std::uint8_t> labels;

  SegmentationMask() = default;
  SegmentationMask(Dims3 d, Spacing3 s = {1.0, 1.0, 1.0})
      : dims(d), spacing(s), labels(d[0] * d[1] * d[2], 0) {}

  std::size_t size() const { return labels.size(); }
  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return (i * dims[1] + j) * dims[2] + k; }
  std::uint8_t& operator()(std::size_t i, std::size_t j, std::size_t k) { return labels[index(i, j, k)]; }
  std::uint8_t operator()(std::size_t i, std::size_t j, std::size_t k) const { return labels[index(i, j, k)]; }

  void validate(std::size_t n_class) const {
    if (labels.size() != dims[0] * dims[1] * dims[2]) throw DataError("mask: label count does not match dims");
    for (double s : spacing)
      if (!(s > 0.0)) throw DataError("mask: spacing must be positive");
    for (auto l : labels)
      if (l >= n_class)
        throw LabelRangeError("mask: label " + std::to_string(l) + " outside [0, " + std::to_string(n_class) + ")");
  }
};

struct MetricReport {
  double dsc = 0.0;
  double hd95_mm = 0.0;
  double assd_mm = 0.0;
};

struct SurfaceDistanceStats {
  double hd95_mm = 0.0;
  double assd_mm = 0.0;
};

namespace detail {

inline void check_same_grid(const SegmentationMask& a, const SegmentationMask& b, const char* op) {
  if (a.dims != b.dims)
    throw DimensionError(std::string(op) + ": masks have different shapes");
}

}  // namespace detail

/// 2|A∩B| / (|A|+|B|) for one class; 1 when both are empty.
inline double dsc(const SegmentationMask& a, const SegmentationMask& b, std::uint8_t class_id) {
  detail::check_same_grid(a, b, "dsc");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_a = a.labels[i] == class_id, in_b = b.labels[i] == class_id;
    na += in_a;
    nb += in_b;
    both += in_a && in_b;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Foreground voxels with at least one 6-connected neighbour that is
/// background or outside the grid.
inline std::vector<std::uint8_t> surface_voxels(const SegmentationMask& m, std::uint8_t class_id) {
  const auto [X, Y, Z] = m.dims;
  std::vector<std::uint8_t> surf(m.size(), 0);
  auto fg = [&](long i, long j, long k) {
    if (i < 0 || j < 0 || k < 0 || i >= static_cast<long>(X) || j >= static_cast<long>(Y) || k >= static_cast<long>(Z))
      return false;
    return m(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(k)) == class_id;
  };
  for (long i = 0; i < static_cast<long>(X); ++i)
    for (long j = 0; j < static_cast<long>(Y); ++j)
      for (long k = 0; k < static_cast<long>(Z); ++k) {
        if (!fg(i, j, k)) continue;
        if (!fg(i - 1, j, k) || !fg(i + 1, j, k) || !fg(i, j - 1, k) || !fg(i, j + 1, k) || !fg(i, j, k - 1) ||
            !fg(i, j, k + 1))
          surf[m.index(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(k))] = 1;
      }
  return surf;
}

namespace detail {

// Exact 1D squared distance transform (lower envelope of parabolas) for sample
// positions q·s; f holds +inf where there is no site.
inline void edt_1d(const double* f, double* out, std::size_t n, double s, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  z.resize(n + 1);
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double xq = static_cast<double>(q) * s;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      k = 0;
      any = true;
      continue;
    }
    while (true) {
      const double xv = static_cast<double>(v[k]) * s;
      const double intersect = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (intersect <= z[k] && k > 0) {
        --k;
        continue;
      }
      if (intersect <= z[k]) {  // k == 0: new parabola dominates everywhere
        v[0] = q;
        z[0] = -inf;
        z[1] = inf;
        break;
      }
      ++k;
      v[k] = q;
      z[k] = intersect;
      z[k + 1] = inf;
      break;
    }
  }
  if (!any) {
    for (std::size_t p = 0; p < n; ++p) out[p] = inf;
    return;
  }
  k = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const double xp = static_cast<double>(p) * s;
    while (z[k + 1] < xp) ++k;
    const double d = (xp - static_cast<double>(v[k]) * s);
    out[p] = d * d + f[v[k]];
  }
}

}  // namespace detail

/// Exact squared Euclidean distance (in mm²) from every voxel center to the
/// nearest site, separable over the three axes.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& sites, const Dims3& dims,
                                                      const Spacing3& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const auto [X, Y, Z] = dims;
  std::vector<double> d(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) d[i] = sites[i] ? 0.0 : inf;
  std::vector<double> line_in, line_out;
  std::vector<std::size_t> v;
  std::vector<double> z;
  auto pass = [&](std::size_t len, std::size_t stride, double s, auto&& starts) {
    line_in.resize(len);
    line_out.resize(len);
    for (std::size_t base : starts) {
      for (std::size_t t = 0; t < len; ++t) line_in[t] = d[base + t * stride];
      detail::edt_1d(line_in.data(), line_out.data(), len, s, v, z);
      for (std::size_t t = 0; t < len; ++t) d[base + t * stride] = line_out[t];
    }
  };
  std::vector<std::size_t> starts;
  // last axis (k)
  starts.clear();
  for (std::size_t i = 0; i < X; ++i)
    for (std::size_t j = 0; j < Y; ++j) starts.push_back((i * Y + j) * Z);
  pass(Z, 1, spacing[2], starts);
  // middle axis (j)
  starts.clear();
  for (std::size_t i = 0; i < X; ++i)
    for (std::size_t k = 0; k < Z; ++k) starts.push_back(i * Y * Z + k);
  pass(Y, Z, spacing[1], starts);
  // first axis (i)
  starts.clear();
  for (std::size_t j = 0; j < Y; ++j)
    for (std::size_t k = 0; k < Z; ++k) starts.push_back(j * Z + k);
  pass(X, Y * Z, spacing[0], starts);
  return d;
}

/// Linear-interpolation percentile of an ascending-sorted sample, q in [0,100].
inline double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ContractError("percentile of empty sample");
  const double pos = (q / 100.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

/// Directed nearest-surface distances of A's surface to B's, plus the reverse.
/// Uses the spacing of `a`.
inline std::vector<double> symmetric_surface_distances(const SegmentationMask& a, const SegmentationMask& b,
                                                       std::uint8_t class_id) {
  detail::check_same_grid(a, b, "surface distance");
  const auto sa = surface_voxels(a, class_id);
  const auto sb = surface_voxels(b, class_id);
  const bool a_empty = std::none_of(sa.begin(), sa.end(), [](auto v) { return v != 0; });
  const bool b_empty = std::none_of(sb.begin(), sb.end(), [](auto v) { return v != 0; });
  if (a_empty || b_empty)
    throw UndefinedMetricError("surface distance undefined: class " + std::to_string(class_id) + " is empty in " +
                               (a_empty ? (b_empty ? "both masks" : "the first mask") : "the second mask"));
  const auto da = squared_distance_transform(sa, a.dims, a.spacing);
  const auto db = squared_distance_transform(sb, a.dims, a.spacing);
  std::vector<double> dists;
  for (std::size_t i = 0; i < sa.size(); ++i)
    if (sa[i]) dists.push_back(std::sqrt(db[i]));
  for (std::size_t i = 0; i < sb.size(); ++i)
    if (sb[i]) dists.push_back(std::sqrt(da[i]));
  return dists;
}

/// HD95 (linear-interpolated 95th percentile) and ASSD (mean) of the union of
/// both directed surface-distance sets, in mm.
inline SurfaceDistanceStats surface_distance_stats(const SegmentationMask& a, const SegmentationMask& b,
                                                   std::uint8_t class_id) {
  auto dists = symmetric_surface_distances(a, b, class_id);
  std::sort(dists.begin(), dists.end());
  double mean = 0.0;
  for (double d : dists) mean += d;
  mean /= static_cast<double>(dists.size());
  return {percentile_sorted(dists, 95.0), mean};
}

/// DSC, HD95 and ASSD of `pred` against `truth` for one class.
inline MetricReport evaluate_masks(const SegmentationMask& pred, const SegmentationMask& truth,
                                   std::uint8_t class_id = 1) {
  MetricReport r;
  r.dsc = dsc(pred, truth, class_id);
  const auto s = surface_distance_stats(pred, truth, class_id);
  r.hd95_mm = s.hd95_mm;
  r.assd_mm = s.assd_mm;
  return r;
}

}  // namespace atsg
