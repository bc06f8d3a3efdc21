#pragma once

#include <cstdint>
#include <vector>

#include "floodseg/model.hpp"

namespace floodseg {

struct ModelOptions {
  std::int64_t in_channels = 3;
  /// U-Net width of the first level; levels use base, 2x, 4x, 8x and a 16x bottleneck.
  std::int64_t unet_base = 64;
  std::vector<std::int64_t> aspp_rates{6, 12, 18};
  std::int64_t aspp_channels = 256;
  std::uint64_t seed = 0;
};

/// Four encoder levels of (3x3 conv, BN, ReLU) x 2 with 2x2 max-pooling, a
/// bottleneck at 16 * base channels, four decoder levels of 2x2 transposed
/// conv + skip concat + double conv, and a 1x1 conv to one logit channel.
/// Tags: encoder1..encoder4, bottleneck, logits.
Model build_unet(const ModelOptions& opts = {});

/// ResNet-50 backbone (output stride 32) with a 3x3 conv/BN/ReLU + 1x1 conv
/// head and x32 bilinear upsampling. Tags: backbone, logits.
Model build_resnet50(const ModelOptions& opts = {});

/// ResNet-50 backbone at output stride 16 (dilated last stage) feeding ASPP.
/// Tags: aspp_input, aspp_concat, logits.
Model build_deeplabv3(const ModelOptions& opts = {});

Model build_model(Architecture arch, const ModelOptions& opts = {});

// Building blocks, exposed for composition in tests.

/// conv -> BN -> ReLU; returns the ReLU node.
NodeId add_conv_bn_relu(Model& m, const std::string& prefix, NodeId in, std::int64_t cin, std::int64_t cout,
                        std::int64_t kernel, ConvParams p);

struct BackboneNodes {
  NodeId output;
  std::int64_t channels;
  std::size_t residual_blocks;
};

/// Stem + four bottleneck stages [3, 4, 6, 3]. With `dilate_last` the last
/// stage keeps stride 1 and uses dilation 2 (output stride 16).
BackboneNodes add_resnet50_backbone(Model& m, NodeId in, std::int64_t in_channels, bool dilate_last);

struct AsppNodes {
  std::vector<NodeId> branches;  // 1x1, one per atrous rate, then image pooling
  NodeId concat;
  NodeId output;  // after the 1x1 projection
};

AsppNodes add_aspp(Model& m, NodeId in, std::int64_t in_channels, const std::vector<std::int64_t>& rates,
                   std::int64_t channels);

}  // namespace floodseg
