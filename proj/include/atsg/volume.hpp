#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/errors.hpp"
#include "atsg/metrics.hpp"

namespace atsg {

static_assert(std::endian::native == std::endian::little, "volume and checkpoint I/O assume a little-endian host");

enum class Dtype { f32, u8 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "u8"; }

/// 3D multi-channel grid of shape (X, Y, Z, C), last index fastest, with
/// physical spacing in mm per spatial axis. Holds either f32 intensities or
/// u8 labels.
struct Volume {
  std::array<std::size_t, 4> shape{};
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::variant<std::vector<float>, std::vector<std::uint8_t>> data;

  Dtype dtype() const { return data.index() == 0 ? Dtype::f32 : Dtype::u8; }
  Dims3 dims() const { return {shape[0], shape[1], shape[2]}; }
  std::size_t channels() const { return shape[3]; }
  std::size_t element_count() const { return shape[0] * shape[1] * shape[2] * shape[3]; }

  std::vector<float>& f32() { return std::get<std::vector<float>>(data); }
  const std::vector<float>& f32() const { return std::get<std::vector<float>>(data); }
  std::vector<std::uint8_t>& u8() { return std::get<std::vector<std::uint8_t>>(data); }
  const std::vector<std::uint8_t>& u8() const { return std::get<std::vector<std::uint8_t>>(data); }

  static Volume zeros_f32(std::array<std::size_t, 4> shape, Spacing3 spacing = {1.0, 1.0, 1.0}) {
    Volume v{shape, spacing, std::vector<float>(shape[0] * shape[1] * shape[2] * shape[3], 0.0f)};
    return v;
  }
  static Volume zeros_u8(std::array<std::size_t, 4> shape, Spacing3 spacing = {1.0, 1.0, 1.0}) {
    Volume v{shape, spacing, std::vector<std::uint8_t>(shape[0] * shape[1] * shape[2] * shape[3], 0)};
    return v;
  }

  void validate() const {
    for (auto e : shape)
      if (e == 0) throw DataError("volume: extents must be positive");
    for (double s : spacing)
      if (!(s > 0.0) || !std::isfinite(s)) throw DataError("volume: spacing must be positive and finite");
    const std::size_t len = std::visit([](const auto& d) { return d.size(); }, data);
    if (len != element_count()) throw LengthMismatchError("volume: payload length does not match shape");
  }
};

/// AVOL1 layout: the line "AVOL1", one JSON header line
/// {"shape":[X,Y,Z,C],"dtype":"f32"|"u8","spacing":[sx,sy,sz]}, then the raw
/// little-endian payload (X·Y·Z·C elements).
inline void write_volume(const std::filesystem::path& path, const Volume& v) {
  v.validate();
  nlohmann::json header{{"shape", v.shape}, {"dtype", dtype_name(v.dtype())}, {"spacing", v.spacing}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "AVOL1\n" << header.dump() << '\n';
  std::visit(
      [&](const auto& d) {
        out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(d[0])));
      },
      v.data);
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

inline Volume read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::string magic;
  std::getline(in, magic);
  if (magic != "AVOL1") throw BadMagicError("'" + path.string() + "' is not an AVOL1 volume");
  std::string header_line;
  std::getline(in, header_line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  Volume v;
  try {
    v.shape = header.at("shape").get<std::array<std::size_t, 4>>();
    v.spacing = header.at("spacing").get<Spacing3>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "': malformed header: " + e.what());
  }
  const std::string dtype = header.value("dtype", "");
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t count = v.element_count();
  auto expect = [&](std::size_t elem) {
    if (payload.size() != count * elem)
      throw LengthMismatchError("'" + path.string() + "': payload has " + std::to_string(payload.size()) +
                                " bytes, header implies " + std::to_string(count * elem));
  };
  if (dtype == "f32") {
    expect(sizeof(float));
    std::vector<float> d(count);
    std::memcpy(d.data(), payload.data(), payload.size());
    v.data = std::move(d);
  } else if (dtype == "u8") {
    expect(1);
    v.data = std::vector<std::uint8_t>(payload.begin(), payload.end());
  } else {
    throw UnknownDtypeError("'" + path.string() + "': unknown dtype '" + dtype + "'");
  }
  v.validate();
  return v;
}

/// Double-precision working image used by training and inference.
struct ImageGrid {
  Dims3 dims{};
  std::size_t channels = 1;
  Spacing3 spacing{1.0, 1.0, 1.0};
  std::vector<double> data;  // (X,Y,Z,C), last index fastest

  std::size_t voxels() const { return dims[0] * dims[1] * dims[2]; }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t ch) const {
    return data[((i * dims[1] + j) * dims[2] + k) * channels + ch];
  }
};

/// Converts an f32 volume to doubles and z-scores it over all voxels and
/// channels. A constant volume is only mean-shifted.
inline ImageGrid prepare_image(const Volume& v) {
  v.validate();
  if (v.dtype() != Dtype::f32) throw DataError("image volume must be f32");
  ImageGrid g{v.dims(), v.channels(), v.spacing, {}};
  const auto& src = v.f32();
  g.data.assign(src.begin(), src.end());
  double mean = 0.0;
  for (double x : g.data) mean += x;
  mean /= static_cast<double>(g.data.size());
  double var = 0.0;
  for (double x : g.data) var += (x - mean) * (x - mean);
  var /= static_cast<double>(g.data.size());
  const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& x : g.data) x = (x - mean) * inv;
  return g;
}

/// Extracts a label mask from a single-channel u8 volume and checks the range.
inline SegmentationMask mask_from_volume(const Volume& v, std::size_t n_class) {
  v.validate();
  if (v.dtype() != Dtype::u8) throw DataError("mask volume must be u8");
  if (v.channels() != 1) throw DataError("mask volume must have one channel");
  SegmentationMask m(v.dims(), v.spacing);
  m.labels = v.u8();
  m.validate(n_class);
  return m;
}

inline Volume mask_to_volume(const SegmentationMask& m) {
  Volume v = Volume::zeros_u8({m.dims[0], m.dims[1], m.dims[2], 1}, m.spacing);
  v.u8() = m.labels;
  return v;
}

}  // namespace atsg
