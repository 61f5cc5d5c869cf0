#include "autolora/pack.h"

#include "autolora/container.h"

namespace autolora {

namespace {

constexpr std::string_view kMagic = "LPAK";

}  // namespace

std::string encode_pack(const LoRAAdapter& adapter) {
  adapter.validate();
  Container c;
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerDelta& ld : adapter.layers) {
    const std::uint64_t b_offset = append_tensor(c.payload, ld.B);
    const std::uint64_t a_offset = append_tensor(c.payload, ld.A);
    layers.push_back({{"layer_id", ld.layer_id},
                      {"d", ld.d},
                      {"k", ld.k},
                      {"r", ld.r},
                      {"alpha", ld.alpha},
                      {"b_offset", b_offset},
                      {"a_offset", a_offset}});
  }
  c.manifest = {{"adapter_id", adapter.adapter_id}, {"metadata", adapter.metadata}, {"layers", layers}};
  return encode_container(kMagic, c);
}

LoRAAdapter decode_pack(std::string_view bytes) {
  Container c = decode_container(kMagic, bytes);
  LoRAAdapter adapter;
  std::size_t declared = 0;
  try {
    adapter.adapter_id = c.manifest.at("adapter_id").get<std::string>();
    adapter.metadata = c.manifest.at("metadata").get<std::map<std::string, std::string>>();
    for (const auto& rec : c.manifest.at("layers")) {
      LayerDelta ld;
      ld.layer_id = rec.at("layer_id").get<std::string>();
      ld.d = rec.at("d").get<std::size_t>();
      ld.k = rec.at("k").get<std::size_t>();
      ld.r = rec.at("r").get<std::size_t>();
      ld.alpha = rec.at("alpha").get<double>();
      ld.B = read_tensor(c.payload, rec.at("b_offset").get<std::uint64_t>(), {ld.d, ld.r});
      ld.A = read_tensor(c.payload, rec.at("a_offset").get<std::uint64_t>(), {ld.r, ld.k});
      declared += ld.d * ld.r + ld.r * ld.k;
      adapter.layers.push_back(std::move(ld));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::Manifest, std::string("LPAK: malformed manifest: ") + e.what());
  }
  if (declared != c.payload.size()) {
    throw FormatError(FormatError::Kind::LengthMismatch,
                      "LPAK: manifest declares " + std::to_string(declared) + " values, payload holds " +
                          std::to_string(c.payload.size()));
  }
  adapter.validate();
  return adapter;
}

void save_pack(const LoRAAdapter& adapter, const std::filesystem::path& path) {
  write_file_bytes(path, encode_pack(adapter));
}

LoRAAdapter load_pack(const std::filesystem::path& path) { return decode_pack(read_file_bytes(path)); }

}  // namespace autolora
