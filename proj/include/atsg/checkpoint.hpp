#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atsg/errors.hpp"
#include "atsg/model.hpp"

namespace atsg {

/// Checkpoint layout: the line "ATSG1", one JSON manifest line
///   {"hyperparams":{...}, "heads":{"segmentation":bool,"pretraining":bool},
///    "tensors":[{"name":..., "shape":[...], "offset":bytes}, ...],
///    "payload_bytes":n}
/// then the concatenated little-endian float64 payload. Offsets are relative
/// to the first payload byte.
inline nlohmann::json checkpoint_manifest(const ModelWeights& m) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : m.named_parameters()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(double);
  }
  return {{"hyperparams", m.hp},
          {"heads", {{"segmentation", m.seg_head.has_value()}, {"pretraining", m.pre_head.has_value()}}},
          {"tensors", tensors},
          {"payload_bytes", offset}};
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelWeights& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << "ATSG1\n" << checkpoint_manifest(m).dump() << '\n';
  for (const auto& [name, t] : m.named_parameters())
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw DataError("write failed for '" + path.string() + "'");
}

/// Reads the manifest line only.
inline nlohmann::json read_checkpoint_manifest(std::istream& in, const std::string& label) {
  std::string magic;
  std::getline(in, magic);
  if (magic != "ATSG1") throw BadMagicError("'" + label + "' is not an ATSG1 checkpoint");
  std::string line;
  std::getline(in, line);
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + label + "': malformed manifest: " + e.what());
  }
}

inline ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  const auto manifest = read_checkpoint_manifest(in, path.string());
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  ModelWeights m;
  try {
    Hyperparams hp;
    manifest.at("hyperparams").get_to(hp);
    hp.validate();
    m = init_weights(hp, 0);  // structure only; every value is overwritten below
    if (!manifest.at("heads").at("segmentation").get<bool>()) m.seg_head.reset();
    if (manifest.at("heads").at("pretraining").get<bool>()) attach_pretraining_head(m, 0);
    if (manifest.at("payload_bytes").get<std::size_t>() != payload.size())
      throw LengthMismatchError("'" + path.string() + "': payload length differs from manifest");

    std::map<std::string, Tensor> by_name;
    for (const auto& [name, t] : m.named_parameters()) by_name.emplace(name, t);
    const auto& entries = manifest.at("tensors");
    if (entries.size() != by_name.size())
      throw DataError("'" + path.string() + "': tensor list does not match hyperparams");
    for (const auto& e : entries) {
      const auto name = e.at("name").get<std::string>();
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("'" + path.string() + "': unexpected tensor '" + name + "'");
      Tensor t = it->second;
      if (e.at("shape").get<Shape>() != t.shape())
        throw DataError("'" + path.string() + "': tensor '" + name + "' has the wrong shape");
      const auto offset = e.at("offset").get<std::size_t>();
      const std::size_t bytes = t.size() * sizeof(double);
      if (offset + bytes > payload.size())
        throw LengthMismatchError("'" + path.string() + "': tensor '" + name + "' runs past the payload");
      std::memcpy(t.data().data(), payload.data() + offset, bytes);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + path.string() + "': malformed manifest: " + e.what());
  }
  return m;
}

}  // namespace atsg
