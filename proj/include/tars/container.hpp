#pragma once

// Binary tensor container shared by checkpoints, targeting vectors, and edit
// sidecars:
//
//   "TARS" | u32 version | u64 header_len | JSON header | raw little-endian f32
//
// The header maps tensor name -> {"dtype": "f32", "shape": [...], "offset": n}
// with offsets in bytes from the start of the data block. Free-form metadata
// lives under the reserved "__meta__" key.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace tars::container {

inline constexpr std::string_view kMagic = "TARS";
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::string_view kMetaKey = "__meta__";

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor& get(std::string_view name) const;  // throws InputError
  bool contains(std::string_view name) const;
};

// Tensors are written in the order given; the output is a pure function of
// the container contents.
std::string serialize(const Container& c);
Container parse(std::string_view bytes);

// Header only, without decoding tensor data.
nlohmann::json read_header(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes) noexcept;

}  // namespace tars::container
