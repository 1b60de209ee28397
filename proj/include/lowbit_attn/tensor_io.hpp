// Copyright 2026 The lowbit-attn Authors
// SPDX-License-Identifier: Apache-2.0

// Raw tensor files: little-endian IEEE binary32, row-major, with a JSON
// sidecar next to the data file (same stem, suffix ".meta.json"):
//   {"shape": [rows, cols], "dtype": "f32", "order": "row-major"}

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lowbit_attn/tensor.hpp"

namespace lowbit_attn {

class TensorIoError : public std::runtime_error {
 public:
  enum class Kind { kMissingFile, kLengthMismatch, kMalformedDescriptor, kDescriptorMismatch, kWriteFailed };

  TensorIoError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// "dir/q.f32" -> "dir/q.meta.json".
inline std::filesystem::path descriptor_path(const std::filesystem::path& data_path) {
  std::filesystem::path p = data_path;
  p.replace_extension(".meta.json");
  return p;
}

namespace detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  {
    std::ofstream data(path, std::ios::binary | std::ios::trunc);
    if (!data) throw TensorIoError(TensorIoError::Kind::kWriteFailed, "cannot write " + path.string());
    std::vector<std::uint32_t> words(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
      words[i] = detail::to_little_endian(std::bit_cast<std::uint32_t>(t.data()[i]));
    }
    data.write(reinterpret_cast<const char*>(words.data()),
               static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
    if (!data) throw TensorIoError(TensorIoError::Kind::kWriteFailed, "write failed: " + path.string());
  }
  const nlohmann::json meta = {
      {"shape", {t.rows(), t.cols()}}, {"dtype", "f32"}, {"order", "row-major"}};
  std::ofstream desc(descriptor_path(path), std::ios::trunc);
  desc << meta.dump() << '\n';
  if (!desc) {
    throw TensorIoError(TensorIoError::Kind::kWriteFailed,
                        "cannot write " + descriptor_path(path).string());
  }
}

/// Reads a tensor and validates it against its descriptor and, if given, an
/// expected shape.
inline Tensor load_tensor(const std::filesystem::path& path,
                          std::optional<std::pair<std::size_t, std::size_t>> expected = {}) {
  using Kind = TensorIoError::Kind;
  const auto meta_path = descriptor_path(path);
  if (!std::filesystem::exists(path)) throw TensorIoError(Kind::kMissingFile, "missing " + path.string());
  if (!std::filesystem::exists(meta_path)) {
    throw TensorIoError(Kind::kMissingFile, "missing descriptor " + meta_path.string());
  }

  std::size_t rows = 0, cols = 0;
  try {
    std::ifstream in(meta_path);
    const nlohmann::json meta = nlohmann::json::parse(in);
    const auto& shape = meta.at("shape");
    if (!shape.is_array() || shape.size() != 2) throw std::invalid_argument("shape must have 2 entries");
    for (const auto& dim : shape) {
      if (!dim.is_number_unsigned()) throw std::invalid_argument("shape entries must be non-negative integers");
    }
    rows = shape[0].get<std::size_t>();
    cols = shape[1].get<std::size_t>();
    if (meta.at("dtype").get<std::string>() != "f32") throw std::invalid_argument("dtype must be f32");
    if (meta.at("order").get<std::string>() != "row-major") {
      throw std::invalid_argument("order must be row-major");
    }
  } catch (const std::exception& e) {
    throw TensorIoError(Kind::kMalformedDescriptor, meta_path.string() + ": " + e.what());
  }

  const std::uintmax_t bytes = std::filesystem::file_size(path);
  const std::uintmax_t want = static_cast<std::uintmax_t>(rows) * cols * sizeof(float);
  if (bytes < want) {
    throw TensorIoError(Kind::kLengthMismatch, path.string() + ": " + std::to_string(bytes) +
                                                   " bytes, descriptor needs " + std::to_string(want));
  }
  if (bytes > want) {
    throw TensorIoError(Kind::kDescriptorMismatch,
                        path.string() + ": " + std::to_string(bytes) + " bytes but descriptor says " +
                            shape_string(rows, cols));
  }
  if (expected && (expected->first != rows || expected->second != cols)) {
    throw TensorIoError(Kind::kDescriptorMismatch,
                        path.string() + ": shape " + shape_string(rows, cols) + ", expected " +
                            shape_string(expected->first, expected->second));
  }

  std::vector<std::uint32_t> words(rows * cols);
  std::ifstream data(path, std::ios::binary);
  data.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(want));
  if (!data) throw TensorIoError(Kind::kLengthMismatch, "short read from " + path.string());
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < words.size(); ++i) {
    t.data()[i] = std::bit_cast<float>(detail::to_little_endian(words[i]));
  }
  return t;
}

}  // namespace lowbit_attn
