#pragma once

// Checkpoint file: 8-byte magic, u64 header length, a JSON header listing each
// tensor (name, rows, cols, offset in floats) plus caller metadata, then the
// tensors as little-endian float32.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "locl/core.hpp"
#include "locl/io.hpp"

namespace locl::ckpt {

inline constexpr char kMagic[8] = {'L', 'O', 'C', 'L', 'C', 'K', 'P', '1'};

template <typename T>
std::string serialize(const std::vector<Param<T>*>& params, const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto* p : params) {
    tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size());
  }
  header["tensors"] = std::move(tensors);
  const std::string h = header.dump();
  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t hlen = h.size();
  out.append(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out += h;
  std::vector<float> buf;
  buf.reserve(offset);
  for (const auto* p : params)
    for (Eigen::Index k = 0; k < p->value.size(); ++k) buf.push_back(static_cast<float>(p->value.data()[k]));
  out.append(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
  return out;
}

template <typename T>
void save(const std::filesystem::path& path, const std::vector<Param<T>*>& params, const nlohmann::json& meta) {
  io::atomic_write(path, serialize(params, meta));
}

/// Header of a checkpoint without loading tensors.
inline nlohmann::json read_header(const std::string& bytes, std::size_t* data_start = nullptr) {
  if (bytes.size() < sizeof(kMagic) + 8 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw ValidationError("not a checkpoint file");
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data() + sizeof(kMagic), sizeof(hlen));
  const std::size_t start = sizeof(kMagic) + 8;
  if (bytes.size() < start + hlen) throw ValidationError("truncated checkpoint header");
  if (data_start) *data_start = start + hlen;
  try {
    return nlohmann::json::parse(bytes.substr(start, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
  }
}

/// Loads tensors into `params` by name; every param must be present with the
/// same shape. Returns the metadata.
template <typename T>
nlohmann::json deserialize(const std::string& bytes, const std::vector<Param<T>*>& params) {
  std::size_t start = 0;
  const nlohmann::json header = read_header(bytes, &start);
  const std::size_t nfloats = (bytes.size() - start) / sizeof(float);
  for (auto* p : params) {
    const nlohmann::json* entry = nullptr;
    for (const auto& t : header.at("tensors"))
      if (t.at("name").get<std::string>() == p->name) entry = &t;
    if (!entry) throw ValidationError("checkpoint has no tensor '" + p->name + "'");
    const auto rows = entry->at("rows").get<Eigen::Index>(), cols = entry->at("cols").get<Eigen::Index>();
    if (rows != p->value.rows() || cols != p->value.cols())
      throw ValidationError("checkpoint tensor '" + p->name + "' has shape " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", model expects " + std::to_string(p->value.rows()) + "x" +
                            std::to_string(p->value.cols()));
    const auto off = entry->at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(p->value.size()) > nfloats) throw ValidationError("truncated checkpoint data");
    for (Eigen::Index k = 0; k < p->value.size(); ++k) {
      float f = 0;
      std::memcpy(&f, bytes.data() + start + (off + static_cast<std::size_t>(k)) * sizeof(float), sizeof(float));
      p->value.data()[k] = static_cast<T>(f);
    }
  }
  return header.at("meta");
}

template <typename T>
nlohmann::json load(const std::filesystem::path& path, const std::vector<Param<T>*>& params) {
  return deserialize(io::read_file(path), params);
}

}  // namespace locl::ckpt
