#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "autolora/lora.h"

namespace autolora {

// Shared layout of every binary artifact (LPAK, LENC, LIDX, LGAT), all
// little-endian:
//   magic        4 bytes
//   version      u32 (= 1)
//   manifest_len u64
//   manifest     UTF-8 JSON, manifest_len bytes
//   payload      raw f32 values, row-major
// Byte offsets stored in manifests are relative to the payload start.
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  nlohmann::json manifest;
  std::vector<float> payload;
};

std::string encode_container(std::string_view magic, const Container& c);
Container decode_container(std::string_view magic, std::string_view bytes);

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& c);
Container read_container(const std::filesystem::path& path, std::string_view magic);

// Appends a tensor's values (as f32) and returns its byte offset.
std::uint64_t append_tensor(std::vector<float>& payload, const Tensor& t);
// Reads count f32 values at a byte offset; throws FormatError(Truncated)
// when the range is past the end of the payload.
std::vector<double> read_values(const std::vector<float>& payload, std::uint64_t byte_offset, std::size_t count);
Tensor read_tensor(const std::vector<float>& payload, std::uint64_t byte_offset, std::vector<std::size_t> shape);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace autolora
