#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "floodseg/data.hpp"
#include "floodseg/models.hpp"

namespace support {

inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("floodseg_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// U-Net (base 8) whose logits are 40 * x[:, 0] - 20: input channel 0 is
/// copied along enc1 and the dec1 skip path, everything else is zeroed.
inline floodseg::Model passthrough_unet() {
  using namespace floodseg;
  ModelOptions opts;
  opts.unet_base = 8;
  Model m = build_unet(opts);
  auto carries = [](const std::string& n) {
    return n == "enc1.1.conv.weight" || n == "enc1.2.conv.weight" || n == "dec1.1.conv.weight" ||
           n == "dec1.2.conv.weight";
  };
  for (auto& [name, p] : m.parameters()) {
    if (name.ends_with(".gamma")) {
      p->value.fill(1.0f);
    } else if (name == "head.conv.weight") {
      p->value.fill(40.0f);
    } else if (name == "head.conv.bias") {
      p->value.fill(-20.0f);
    } else {
      p->value.fill(0.0f);
      if (carries(name)) p->value.at(0, 0, 1, 1) = 1.0f;
    }
  }
  for (auto& [name, b] : m.buffers()) b->value.fill(name.ends_with("running_var") ? 1.0f - 1e-5f : 0.0f);
  return m;
}

/// Samples whose image channel 0 equals the mask, so passthrough_unet is a perfect predictor.
inline std::vector<floodseg::Sample> mask_in_red(std::vector<floodseg::Sample> samples) {
  for (auto& s : samples) {
    const auto plane = static_cast<std::size_t>(s.mask.size());
    for (std::size_t i = 0; i < plane; ++i) s.image[i] = s.mask[i];
  }
  return samples;
}

}  // namespace support
