#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/errors.hpp"
#include "atsg/rng.hpp"
#include "atsg/volume.hpp"

namespace atsg {

// ---------------------------------------------------------------------------
// Synthetic phantoms
// ---------------------------------------------------------------------------

struct SyntheticCase {
  Volume image;  // f32, one channel
  Volume mask;   // u8, labels {0,1}
};

struct SyntheticOptions {
  double background_std = 0.15;  // smooth (blurred) background texture
  double noise_std = 0.1;        // white noise on top
  double contrast = 1.0;         // intensity added inside ellipsoids
  double min_fraction = 0.02;
  double max_fraction = 0.4;
  Spacing3 spacing{1.0, 1.0, 1.0};
};

namespace detail {

// Box blur of radius r along one axis with clamped borders.
inline void box_blur_axis(std::vector<double>& v, const Dims3& d, int axis, int r) {
  const std::size_t len = d[static_cast<std::size_t>(axis)];
  const std::size_t stride = axis == 2 ? 1 : (axis == 1 ? d[2] : d[1] * d[2]);
  std::vector<double> line(len), out(len);
  const std::size_t a = axis == 0 ? d[1] : d[0];
  const std::size_t b = axis == 2 ? d[1] : d[2];
  for (std::size_t p = 0; p < a; ++p)
    for (std::size_t q = 0; q < b; ++q) {
      std::size_t base = 0;
      if (axis == 0) base = p * d[2] + q;
      if (axis == 1) base = p * d[1] * d[2] + q;
      if (axis == 2) base = (p * d[1] + q) * d[2];
      for (std::size_t t = 0; t < len; ++t) line[t] = v[base + t * stride];
      for (std::size_t t = 0; t < len; ++t) {
        double s = 0.0;
        for (int o = -r; o <= r; ++o) {
          const long idx = std::clamp<long>(static_cast<long>(t) + o, 0, static_cast<long>(len) - 1);
          s += line[static_cast<std::size_t>(idx)];
        }
        out[t] = s / static_cast<double>(2 * r + 1);
      }
      for (std::size_t t = 0; t < len; ++t) v[base + t * stride] = out[t];
    }
}

}  // namespace detail

/// One phantom: blurred background texture + 1–3 random ellipsoids of raised
/// intensity + white noise. The mask marks ellipsoid interiors; ellipsoids are
/// redrawn until the foreground fraction lies in [min_fraction, max_fraction].
inline SyntheticCase generate_synthetic_case(const Dims3& dims, std::uint64_t seed,
                                             const SyntheticOptions& opt = {}) {
  Rng rng(seed);
  const std::size_t V = dims[0] * dims[1] * dims[2];

  std::vector<double> bg(V);
  for (auto& x : bg) x = rng.normal();
  for (int pass = 0; pass < 2; ++pass)
    for (int axis = 0; axis < 3; ++axis) detail::box_blur_axis(bg, dims, axis, 2);
  double mean = 0.0, var = 0.0;
  for (double x : bg) mean += x;
  mean /= static_cast<double>(V);
  for (double x : bg) var += (x - mean) * (x - mean);
  var /= static_cast<double>(V);
  const double bg_scale = var > 0.0 ? opt.background_std / std::sqrt(var) : 0.0;

  std::vector<std::uint8_t> labels(V, 0);
  for (int attempt = 0;; ++attempt) {
    std::fill(labels.begin(), labels.end(), 0);
    const std::size_t count = 1 + rng.uniform_int(3);
    for (std::size_t e = 0; e < count; ++e) {
      std::array<double, 3> center{}, radius{};
      for (std::size_t a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(dims[a]);
        center[a] = rng.uniform(0.25, 0.75) * ext;
        radius[a] = std::max(1.5, rng.uniform(0.12, 0.3) * ext);
      }
      for (std::size_t i = 0; i < dims[0]; ++i)
        for (std::size_t j = 0; j < dims[1]; ++j)
          for (std::size_t k = 0; k < dims[2]; ++k) {
            const double u = (static_cast<double>(i) + 0.5 - center[0]) / radius[0];
            const double v = (static_cast<double>(j) + 0.5 - center[1]) / radius[1];
            const double w = (static_cast<double>(k) + 0.5 - center[2]) / radius[2];
            if (u * u + v * v + w * w <= 1.0) labels[(i * dims[1] + j) * dims[2] + k] = 1;
          }
    }
    const double frac =
        static_cast<double>(std::count(labels.begin(), labels.end(), std::uint8_t{1})) / static_cast<double>(V);
    if (frac >= opt.min_fraction && frac <= opt.max_fraction) break;
    if (attempt > 1000) throw ConfigError("synthetic generator cannot meet the foreground fraction bounds");
  }

  SyntheticCase out{Volume::zeros_f32({dims[0], dims[1], dims[2], 1}, opt.spacing),
                    Volume::zeros_u8({dims[0], dims[1], dims[2], 1}, opt.spacing)};
  auto& img = out.image.f32();
  for (std::size_t i = 0; i < V; ++i) {
    const double value = (bg[i] - mean) * bg_scale + opt.contrast * labels[i] + opt.noise_std * rng.normal();
    img[i] = static_cast<float>(value);
  }
  out.mask.u8() = labels;
  return out;
}

/// `count` phantoms; case i uses the i-th seed drawn from Rng(seed).
inline std::vector<SyntheticCase> generate_synthetic_dataset(std::size_t count, const Dims3& dims, std::uint64_t seed,
                                                             const SyntheticOptions& opt = {}) {
  Rng rng(seed);
  std::vector<SyntheticCase> cases;
  cases.reserve(count);
  for (std::size_t i = 0; i < count; ++i) cases.push_back(generate_synthetic_case(dims, rng.next_u64(), opt));
  return cases;
}

// ---------------------------------------------------------------------------
// Manifests and splits
// ---------------------------------------------------------------------------

enum class Split { train, val, test };

NLOHMANN_JSON_SERIALIZE_ENUM(Split, {{Split::train, "train"}, {Split::val, "val"}, {Split::test, "test"}})

struct ManifestEntry {
  std::string image;
  std::optional<std::string> mask;
  Split split = Split::train;
};

/// Image/mask listing with split tags. Relative paths resolve against the
/// manifest file's directory.
struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::vector<ManifestEntry> in_split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries)
      if (e.split == s) out.push_back(e);
    return out;
  }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  void validate() const {
    std::set<std::string> seen;
    for (const auto& e : entries) {
      if (!seen.insert(e.image).second) throw DataError("manifest: '" + e.image + "' listed more than once");
      if (e.mask && !seen.insert(*e.mask).second) throw DataError("manifest: '" + *e.mask + "' listed more than once");
    }
  }
};

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  m.validate();
  nlohmann::json j;
  j["seed"] = m.seed;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json je{{"image", e.image}, {"split", e.split}};
    if (e.mask) je["mask"] = *e.mask;
    j["entries"].push_back(je);
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  DatasetManifest m;
  m.base_dir = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& je : j.at("entries")) {
      ManifestEntry e;
      e.image = je.at("image").get<std::string>();
      if (je.contains("mask")) e.mask = je.at("mask").get<std::string>();
      e.split = je.at("split").get<Split>();
      m.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest '" + path.string() + "': " + e.what());
  }
  m.validate();
  return m;
}

/// Fractions of the whole collection assigned to train/val/test.
struct SplitRatios {
  double train = 0.64;
  double val = 0.16;  // one fifth of the 0.8 training pool
  double test = 0.2;
};

/// Deterministic split: a seeded Fisher–Yates shuffle of the indices, then
/// consecutive runs of train, val and test sized by the largest-remainder
/// rounding of ratio·count. Returns the split of each input index.
inline std::vector<Split> split_indices(std::size_t count, const SplitRatios& ratios, std::uint64_t seed) {
  const std::array<double, 3> r{ratios.train, ratios.val, ratios.test};
  for (double x : r)
    if (x < 0.0 || !std::isfinite(x)) throw ConfigError("split ratios must be non-negative");
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const auto nonzero = static_cast<std::size_t>(std::count_if(r.begin(), r.end(), [](double x) { return x > 0.0; }));
  if (count < nonzero)
    throw DataError("cannot split " + std::to_string(count) + " volumes into " + std::to_string(nonzero) + " splits");

  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    const double exact = r[s] * static_cast<double>(count);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < count) {
    std::size_t best = 0;
    for (std::size_t s = 1; s < 3; ++s)
      if (rem[s] > rem[best]) best = s;
    ++sizes[best];
    rem[best] = -1.0;
    ++assigned;
  }
  // Every split with a positive ratio gets at least one volume.
  for (std::size_t s = 0; s < 3; ++s) {
    if (r[s] > 0.0 && sizes[s] == 0) {
      const auto donor = static_cast<std::size_t>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
      --sizes[donor];
      ++sizes[s];
    }
  }

  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);

  std::vector<Split> out(count);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t t = 0; t < sizes[s]; ++t) out[order[pos++]] = static_cast<Split>(s);
  return out;
}

/// Builds a manifest from (image, optional mask) path pairs.
inline DatasetManifest split_manifest(const std::vector<std::pair<std::string, std::optional<std::string>>>& paths,
                                      const SplitRatios& ratios, std::uint64_t seed) {
  const auto splits = split_indices(paths.size(), ratios, seed);
  DatasetManifest m;
  m.seed = seed;
  for (std::size_t i = 0; i < paths.size(); ++i) m.entries.push_back({paths[i].first, paths[i].second, splits[i]});
  m.validate();
  return m;
}

/// A volume ready for training or evaluation.
struct LabeledVolume {
  std::string name;
  ImageGrid image;
  SegmentationMask mask;
};

inline LabeledVolume load_labeled(const DatasetManifest& m, const ManifestEntry& e, std::size_t n_class) {
  if (!e.mask) throw DataError("manifest entry '" + e.image + "' has no mask");
  const Volume img = read_volume(m.resolve(e.image));
  const Volume msk = read_volume(m.resolve(*e.mask));
  if (img.dims() != msk.dims()) throw DataError("'" + e.image + "': mask shape differs from image");
  if (img.spacing != msk.spacing) throw DataError("'" + e.image + "': mask spacing differs from image");
  return {e.image, prepare_image(img), mask_from_volume(msk, n_class)};
}

inline std::vector<LabeledVolume> load_split(const DatasetManifest& m, Split s, std::size_t n_class) {
  std::vector<LabeledVolume> out;
  for (const auto& e : m.in_split(s)) out.push_back(load_labeled(m, e, n_class));
  return out;
}

/// In-memory equivalent of load_labeled for generated cases.
inline LabeledVolume to_labeled(const SyntheticCase& c, std::string name, std::size_t n_class = 2) {
  return {std::move(name), prepare_image(c.image), mask_from_volume(c.mask, n_class)};
}

}  // namespace atsg
