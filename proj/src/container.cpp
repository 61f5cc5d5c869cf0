#include "autolora/container.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace autolora {

static_assert(std::endian::native == std::endian::little, "containers assume a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

[[noreturn]] void fail(FormatError::Kind kind, const std::string& msg) { throw FormatError(kind, msg); }

}  // namespace

std::string encode_container(std::string_view magic, const Container& c) {
  if (magic.size() != 4) throw ArgumentError("container magic must be 4 bytes");
  const std::string manifest = c.manifest.dump();
  std::string out;
  out.reserve(16 + manifest.size() + c.payload.size() * sizeof(float));
  out.append(magic);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint64_t>(out, manifest.size());
  out.append(manifest);
  const auto* raw = reinterpret_cast<const char*>(c.payload.data());
  out.append(raw, c.payload.size() * sizeof(float));
  return out;
}

Container decode_container(std::string_view magic, std::string_view bytes) {
  const std::string m(magic);
  if (bytes.size() < 4 || bytes.substr(0, 4) != magic) fail(FormatError::Kind::BadMagic, "expected magic " + m);
  if (bytes.size() < 16) fail(FormatError::Kind::Truncated, m + ": header truncated");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kContainerVersion) {
    fail(FormatError::Kind::VersionMismatch, m + ": unsupported version " + std::to_string(version));
  }
  const auto manifest_len = get<std::uint64_t>(bytes, 8);
  if (manifest_len > bytes.size() - 16) fail(FormatError::Kind::Truncated, m + ": manifest truncated");

  Container c;
  try {
    c.manifest = nlohmann::json::parse(bytes.substr(16, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    fail(FormatError::Kind::Manifest, m + ": invalid manifest JSON: " + e.what());
  }
  if (!c.manifest.is_object()) fail(FormatError::Kind::Manifest, m + ": manifest is not an object");

  const std::string_view data = bytes.substr(16 + manifest_len);
  if (data.size() % sizeof(float) != 0) {
    fail(FormatError::Kind::LengthMismatch, m + ": payload is not a whole number of f32 values");
  }
  c.payload.resize(data.size() / sizeof(float));
  std::memcpy(c.payload.data(), data.data(), data.size());
  return c;
}

void write_container(const std::filesystem::path& path, std::string_view magic, const Container& c) {
  write_file_bytes(path, encode_container(magic, c));
}

Container read_container(const std::filesystem::path& path, std::string_view magic) {
  return decode_container(magic, read_file_bytes(path));
}

std::uint64_t append_tensor(std::vector<float>& payload, const Tensor& t) {
  const std::uint64_t offset = payload.size() * sizeof(float);
  for (double v : t.values()) payload.push_back(static_cast<float>(v));
  return offset;
}

std::vector<double> read_values(const std::vector<float>& payload, std::uint64_t byte_offset, std::size_t count) {
  if (byte_offset % sizeof(float) != 0) fail(FormatError::Kind::Manifest, "tensor offset is not f32-aligned");
  const std::uint64_t begin = byte_offset / sizeof(float);
  if (begin > payload.size() || count > payload.size() - begin) {
    fail(FormatError::Kind::Truncated, "tensor extends past the end of the payload");
  }
  return {payload.begin() + static_cast<std::ptrdiff_t>(begin),
          payload.begin() + static_cast<std::ptrdiff_t>(begin + count)};
}

Tensor read_tensor(const std::vector<float>& payload, std::uint64_t byte_offset, std::vector<std::size_t> shape) {
  std::size_t count = 1;
  for (std::size_t s : shape) count *= s;
  return Tensor(std::move(shape), read_values(payload, byte_offset, count));
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace autolora
