#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "atsg/errors.hpp"
#include "atsg/metrics.hpp"
#include "atsg/model.hpp"
#include "atsg/parallel.hpp"
#include "atsg/volume.hpp"

namespace atsg {

enum class PaddingMode { mirror, zero };

/// Sliding-window layout. Block origins are in padded coordinates; window
/// stride is w so the center patches tile the (remainder-extended) volume
/// exactly once.
struct WindowPlan {
  Dims3 volume_shape{};
  Dims3 pad_low{};
  Dims3 pad_high{};
  Dims3 windows_per_axis{};
  std::vector<Dims3> origins;

  Dims3 padded_shape() const {
    return {volume_shape[0] + pad_low[0] + pad_high[0], volume_shape[1] + pad_low[1] + pad_high[1],
            volume_shape[2] + pad_low[2] + pad_high[2]};
  }
};

/// Pads every face by (W−w)/2, plus the remainder r = (−extent) mod w split
/// floor(r/2) low / rest high.
inline WindowPlan plan_windows(const Dims3& shape, const Hyperparams& hp) {
  hp.validate();
  WindowPlan plan;
  plan.volume_shape = shape;
  const std::size_t w = hp.w(), margin = hp.center_offset();
  for (std::size_t a = 0; a < 3; ++a) {
    if (shape[a] == 0) throw DataError("plan_windows: extents must be positive");
    const std::size_t r = (w - shape[a] % w) % w;
    plan.pad_low[a] = margin + r / 2;
    plan.pad_high[a] = margin + (r - r / 2);
    plan.windows_per_axis[a] = (shape[a] + r) / w;
  }
  for (std::size_t i = 0; i < plan.windows_per_axis[0]; ++i)
    for (std::size_t j = 0; j < plan.windows_per_axis[1]; ++j)
      for (std::size_t k = 0; k < plan.windows_per_axis[2]; ++k) plan.origins.push_back({i * w, j * w, k * w});
  return plan;
}

/// Reflects an out-of-range index back into [0, n) without repeating the
/// edge sample (… c b | a b c … ), periodically for large offsets.
inline std::size_t mirror_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

inline ImageGrid pad_image(const ImageGrid& img, const WindowPlan& plan, PaddingMode mode) {
  ImageGrid out;
  out.dims = plan.padded_shape();
  out.channels = img.channels;
  out.spacing = img.spacing;
  out.data.assign(out.voxels() * out.channels, 0.0);
  const std::size_t c = img.channels;
  for (std::size_t i = 0; i < out.dims[0]; ++i)
    for (std::size_t j = 0; j < out.dims[1]; ++j)
      for (std::size_t k = 0; k < out.dims[2]; ++k) {
        const long si = static_cast<long>(i) - static_cast<long>(plan.pad_low[0]);
        const long sj = static_cast<long>(j) - static_cast<long>(plan.pad_low[1]);
        const long sk = static_cast<long>(k) - static_cast<long>(plan.pad_low[2]);
        const bool inside = si >= 0 && sj >= 0 && sk >= 0 && si < static_cast<long>(img.dims[0]) &&
                            sj < static_cast<long>(img.dims[1]) && sk < static_cast<long>(img.dims[2]);
        if (!inside && mode == PaddingMode::zero) continue;
        const std::size_t ii = mirror_index(si, img.dims[0]);
        const std::size_t jj = mirror_index(sj, img.dims[1]);
        const std::size_t kk = mirror_index(sk, img.dims[2]);
        const std::size_t dst = ((i * out.dims[1] + j) * out.dims[2] + k) * c;
        const std::size_t src = ((ii * img.dims[1] + jj) * img.dims[2] + kk) * c;
        for (std::size_t ch = 0; ch < c; ++ch) out.data[dst + ch] = img.data[src + ch];
      }
  return out;
}

struct InferenceOptions {
  PaddingMode padding = PaddingMode::mirror;
  std::size_t threads = 0;  // 0: thread_count()
};

struct SegmentationOutput {
  SegmentationMask labels;
  std::vector<double> probabilities;  // (X, Y, Z, n_class), last index fastest
};

namespace detail {

inline Tensor window_block(const ImageGrid& padded, const Dims3& origin, std::size_t W) {
  const std::size_t c = padded.channels;
  Tensor block(Shape{W, W, W, c});
  for (std::size_t i = 0; i < W; ++i)
    for (std::size_t j = 0; j < W; ++j) {
      const std::size_t src = (((origin[0] + i) * padded.dims[1] + origin[1] + j) * padded.dims[2] + origin[2]) * c;
      std::copy_n(padded.data.begin() + static_cast<std::ptrdiff_t>(src), W * c,
                  block.data().begin() + static_cast<std::ptrdiff_t>(((i * W + j) * W) * c));
    }
  return block;
}

inline std::string origin_string(const Dims3& o) {
  return "(" + std::to_string(o[0]) + "," + std::to_string(o[1]) + "," + std::to_string(o[2]) + ")";
}

/// Center-patch class probabilities (w³ × n_class) from one forward.
inline std::vector<double> center_probabilities(const Tensor& out, const Hyperparams& hp) {
  const std::size_t C = hp.n_class, V = hp.patch_voxels();
  if (hp.head_mode == HeadMode::voxel) return {out.data().begin(), out.data().end()};
  std::vector<double> p(V * C);
  const std::size_t center = hp.center_index();
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t c = 0; c < C; ++c) p[v * C + c] = out[center * C + c];
  return p;
}

inline std::size_t resolve_threads(std::size_t t) { return t == 0 ? thread_count() : t; }

}  // namespace detail

/// Applies the model to every planned window and writes each window's
/// center-patch prediction into its own region of the output; labels are the
/// per-voxel argmax. The image is used as given (normalise it first with
/// prepare_image, as training does).
inline SegmentationOutput segment_volume(const ImageGrid& image, const ModelWeights& m,
                                         const InferenceOptions& opt = {}) {
  const auto& hp = m.hp;
  if (image.channels != hp.c) throw DataError("segment_volume: channel count does not match the model");
  if (!m.seg_head) throw ContractError("segment_volume: model has no segmentation head");
  const WindowPlan plan = plan_windows(image.dims, hp);
  const ImageGrid padded = pad_image(image, plan, opt.padding);
  const auto [X, Y, Z] = image.dims;
  const std::size_t C = hp.n_class, w = hp.w();
  const std::size_t lo0 = plan.pad_low[0] - hp.center_offset();
  const std::size_t lo1 = plan.pad_low[1] - hp.center_offset();
  const std::size_t lo2 = plan.pad_low[2] - hp.center_offset();

  SegmentationOutput out;
  out.labels = SegmentationMask(image.dims, image.spacing);
  out.probabilities.assign(X * Y * Z * C, 0.0);

  parallel_for(
      plan.origins.size(),
      [&](std::size_t idx) {
        const Dims3& o = plan.origins[idx];
        Tape off(false);
        Tensor y;
        try {
          y = forward(off, detail::window_block(padded, o, hp.W), m).output;
        } catch (const NumericError& e) {
          throw NumericError("window at origin " + detail::origin_string(o) + ": " + e.what());
        }
        if (!y.all_finite()) throw NumericError("non-finite activation in window at origin " + detail::origin_string(o));
        const auto probs = detail::center_probabilities(y, hp);
        // Center patch of this window in original-volume coordinates (may
        // start below 0 or end past the extent on remainder-padded axes).
        for (std::size_t i = 0; i < w; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t k = 0; k < w; ++k) {
              const long vi = static_cast<long>(o[0] + i) - static_cast<long>(lo0);
              const long vj = static_cast<long>(o[1] + j) - static_cast<long>(lo1);
              const long vk = static_cast<long>(o[2] + k) - static_cast<long>(lo2);
              if (vi < 0 || vj < 0 || vk < 0 || vi >= static_cast<long>(X) || vj >= static_cast<long>(Y) ||
                  vk >= static_cast<long>(Z))
                continue;
              const std::size_t vox = (static_cast<std::size_t>(vi) * Y + static_cast<std::size_t>(vj)) * Z +
                                      static_cast<std::size_t>(vk);
              const std::size_t src = ((i * w + j) * w + k) * C;
              std::size_t best = 0;
              for (std::size_t c = 0; c < C; ++c) {
                out.probabilities[vox * C + c] = probs[src + c];
                if (probs[src + c] > probs[src + best]) best = c;
              }
              out.labels.labels[vox] = static_cast<std::uint8_t>(best);
            }
      },
      detail::resolve_threads(opt.threads));
  return out;
}

/// Volume-shaped attention map for one (stage, head) pair.
struct AttentionMap {
  std::size_t stage = 0;
  std::size_t head = 0;
  std::vector<double> values;  // (X, Y, Z)

  std::string name() const { return "attn_k" + std::to_string(stage) + "_h" + std::to_string(head); }
};

/// Total attention received by each patch (column sums of every A^{k,i}),
/// spread uniformly over the patch's voxels and averaged voxel-wise over all
/// windows whose block covers the voxel. Returns K·n_h maps, stage-major.
inline std::vector<AttentionMap> aggregate_attention(const ImageGrid& image, const ModelWeights& m,
                                                     const InferenceOptions& opt = {}) {
  const auto& hp = m.hp;
  if (image.channels != hp.c) throw DataError("aggregate_attention: channel count does not match the model");
  const WindowPlan plan = plan_windows(image.dims, hp);
  const ImageGrid padded = pad_image(image, plan, opt.padding);
  const std::size_t K = hp.K, H = hp.n_h, N = hp.N(), n = hp.n, w = hp.w();

  // Per-window column totals, gathered in parallel and reduced in plan order
  // so the result does not depend on scheduling.
  std::vector<std::vector<double>> totals(plan.origins.size());
  parallel_for(
      plan.origins.size(),
      [&](std::size_t idx) {
        const Dims3& o = plan.origins[idx];
        Tape off(false);
        ForwardResult r;
        try {
          r = forward(off, detail::window_block(padded, o, hp.W), m, true);
        } catch (const NumericError& e) {
          throw NumericError("window at origin " + detail::origin_string(o) + ": " + e.what());
        }
        auto& t = totals[idx];
        t.assign(K * H * N, 0.0);
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t h = 0; h < H; ++h) {
            const Tensor& A = r.attention->A[k][h];
            if (!A.all_finite())
              throw NumericError("non-finite attention in window at origin " + detail::origin_string(o));
            for (std::size_t row = 0; row < N; ++row)
              for (std::size_t col = 0; col < N; ++col) t[(k * H + h) * N + col] += A[row * N + col];
          }
      },
      detail::resolve_threads(opt.threads));

  const auto [X, Y, Z] = image.dims;
  std::vector<std::vector<double>> acc(K * H, std::vector<double>(X * Y * Z, 0.0));
  std::vector<double> count(X * Y * Z, 0.0);
  for (std::size_t idx = 0; idx < plan.origins.size(); ++idx) {
    const Dims3& o = plan.origins[idx];
    for (std::size_t bi = 0; bi < hp.W; ++bi) {
      const long vi = static_cast<long>(o[0] + bi) - static_cast<long>(plan.pad_low[0]);
      if (vi < 0 || vi >= static_cast<long>(X)) continue;
      for (std::size_t bj = 0; bj < hp.W; ++bj) {
        const long vj = static_cast<long>(o[1] + bj) - static_cast<long>(plan.pad_low[1]);
        if (vj < 0 || vj >= static_cast<long>(Y)) continue;
        for (std::size_t bk = 0; bk < hp.W; ++bk) {
          const long vk = static_cast<long>(o[2] + bk) - static_cast<long>(plan.pad_low[2]);
          if (vk < 0 || vk >= static_cast<long>(Z)) continue;
          const std::size_t patch = ((bi / w) * n + bj / w) * n + bk / w;
          const std::size_t vox = (static_cast<std::size_t>(vi) * Y + static_cast<std::size_t>(vj)) * Z +
                                  static_cast<std::size_t>(vk);
          count[vox] += 1.0;
          for (std::size_t kh = 0; kh < K * H; ++kh) acc[kh][vox] += totals[idx][kh * N + patch];
        }
      }
    }
  }
  std::vector<AttentionMap> maps;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t h = 0; h < H; ++h) {
      AttentionMap map{k, h, std::move(acc[k * H + h])};
      for (std::size_t v = 0; v < map.values.size(); ++v) map.values[v] /= count[v];
      maps.push_back(std::move(map));
    }
  return maps;
}

inline Volume probabilities_to_volume(const SegmentationOutput& s, std::size_t n_class) {
  Volume v = Volume::zeros_f32({s.labels.dims[0], s.labels.dims[1], s.labels.dims[2], n_class}, s.labels.spacing);
  auto& d = v.f32();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(s.probabilities[i]);
  return v;
}

inline Volume attention_to_volume(const AttentionMap& a, const Dims3& dims, const Spacing3& spacing) {
  Volume v = Volume::zeros_f32({dims[0], dims[1], dims[2], 1}, spacing);
  auto& d = v.f32();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(a.values[i]);
  return v;
}

}  // namespace atsg
