#pragma once

#include <filesystem>
#include <string>

#include "autolora/lora.h"

namespace autolora {

// LPAK adapter container. Manifest:
//   {"adapter_id", "metadata": {..}, "layers": [{"layer_id", "d", "k", "r",
//    "alpha", "b_offset", "a_offset"}]}
// B and A are stored as f32, row-major.
std::string encode_pack(const LoRAAdapter& adapter);
LoRAAdapter decode_pack(std::string_view bytes);

void save_pack(const LoRAAdapter& adapter, const std::filesystem::path& path);
LoRAAdapter load_pack(const std::filesystem::path& path);

}  // namespace autolora
