#include "floodseg/models.hpp"

#include <string>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

NodeId add_conv(Model& m, const std::string& name, NodeId in, std::int64_t cin, std::int64_t cout, std::int64_t kernel,
                ConvParams p, bool bias) {
  Rng rng = m.init_rng(name);
  return m.add(name, Conv2d(cin, cout, kernel, p, bias, rng), {in});
}

NodeId add_double_conv(Model& m, const std::string& prefix, NodeId in, std::int64_t cin, std::int64_t cout) {
  NodeId x = add_conv_bn_relu(m, prefix + ".1", in, cin, cout, 3, {1, 1, 1});
  return add_conv_bn_relu(m, prefix + ".2", x, cout, cout, 3, {1, 1, 1});
}

struct Bottleneck {
  std::int64_t width;
  std::int64_t stride;
  std::int64_t dilation;
};

NodeId add_bottleneck(Model& m, const std::string& prefix, NodeId in, std::int64_t cin, const Bottleneck& b) {
  const std::int64_t cout = 4 * b.width;
  NodeId x = add_conv_bn_relu(m, prefix + ".1", in, cin, b.width, 1, {});
  x = add_conv_bn_relu(m, prefix + ".2", x, b.width, b.width, 3, {b.stride, b.dilation, b.dilation});
  x = add_conv(m, prefix + ".3.conv", x, b.width, cout, 1, {}, false);
  x = m.add(prefix + ".3.bn", BatchNorm2d(cout), {x});
  NodeId shortcut = in;
  if (b.stride != 1 || cin != cout) {
    shortcut = add_conv(m, prefix + ".proj.conv", in, cin, cout, 1, {b.stride, 0, 1}, false);
    shortcut = m.add(prefix + ".proj.bn", BatchNorm2d(cout), {shortcut});
  }
  x = m.add(prefix + ".add", ResidualAdd(), {x, shortcut});
  return m.add(prefix + ".relu", ReLU(), {x});
}

}  // namespace

NodeId add_conv_bn_relu(Model& m, const std::string& prefix, NodeId in, std::int64_t cin, std::int64_t cout,
                        std::int64_t kernel, ConvParams p) {
  NodeId x = add_conv(m, prefix + ".conv", in, cin, cout, kernel, p, false);
  x = m.add(prefix + ".bn", BatchNorm2d(cout), {x});
  return m.add(prefix + ".relu", ReLU(), {x});
}

Model build_unet(const ModelOptions& opts) {
  if (opts.unet_base < 8) throw ConfigError("unet: base width must be >= 8");
  Model m(Architecture::kUNet, {opts.in_channels, 16, 16}, opts.seed);
  const std::int64_t base = opts.unet_base;

  std::vector<NodeId> skips;
  NodeId x = Model::kInput;
  std::int64_t cin = opts.in_channels;
  for (int level = 1; level <= 4; ++level) {
    const std::int64_t ch = base << (level - 1);
    const std::string name = "enc" + std::to_string(level);
    x = add_double_conv(m, name, x, cin, ch);
    m.tag("encoder" + std::to_string(level), x);
    skips.push_back(x);
    x = m.add("pool" + std::to_string(level), MaxPool2d(2, 2), {x});
    cin = ch;
  }
  x = add_double_conv(m, "bottleneck", x, cin, base * 16);
  m.tag("bottleneck", x);
  cin = base * 16;

  for (int level = 4; level >= 1; --level) {
    const std::int64_t ch = base << (level - 1);
    const std::string name = "dec" + std::to_string(level);
    Rng rng = m.init_rng(name + ".up");
    x = m.add(name + ".up", ConvTranspose2d(cin, ch, true, rng), {x});
    x = m.add(name + ".concat", ConcatChannels(), {skips[static_cast<std::size_t>(level - 1)], x});
    x = add_double_conv(m, name, x, 2 * ch, ch);
    cin = ch;
  }
  x = add_conv(m, "head.conv", x, cin, 1, 1, {}, true);
  m.tag("logits", x);
  m.set_output(x);
  return m;
}

BackboneNodes add_resnet50_backbone(Model& m, NodeId in, std::int64_t in_channels, bool dilate_last) {
  NodeId x = add_conv_bn_relu(m, "stem", in, in_channels, 64, 7, {2, 3, 1});
  x = m.add("stem.pool", MaxPool2d(3, 2, 1), {x});

  constexpr std::int64_t kBlocks[4] = {3, 4, 6, 3};
  constexpr std::int64_t kWidths[4] = {64, 128, 256, 512};
  std::int64_t cin = 64;
  std::size_t residual = 0;
  for (int stage = 0; stage < 4; ++stage) {
    for (std::int64_t block = 0; block < kBlocks[stage]; ++block) {
      Bottleneck b{kWidths[stage], 1, 1};
      if (block == 0 && stage > 0) b.stride = 2;
      if (stage == 3 && dilate_last) {
        // First block keeps the previous dilation; later blocks dilate.
        b.stride = 1;
        b.dilation = block == 0 ? 1 : 2;
      }
      const std::string name = "layer" + std::to_string(stage + 1) + "." + std::to_string(block);
      x = add_bottleneck(m, name, x, cin, b);
      cin = 4 * b.width;
      ++residual;
    }
  }
  return {x, cin, residual};
}

Model build_resnet50(const ModelOptions& opts) {
  Model m(Architecture::kResNet50, {opts.in_channels, 32, 32}, opts.seed);
  auto backbone = add_resnet50_backbone(m, Model::kInput, opts.in_channels, false);
  m.tag("backbone", backbone.output);
  NodeId x = add_conv_bn_relu(m, "head.1", backbone.output, backbone.channels, 512, 3, {1, 1, 1});
  x = add_conv(m, "head.cls", x, 512, 1, 1, {}, true);
  x = m.add("head.up", BilinearUp::by_factor(32), {x});
  m.tag("logits", x);
  m.set_output(x);
  return m;
}

AsppNodes add_aspp(Model& m, NodeId in, std::int64_t in_channels, const std::vector<std::int64_t>& rates,
                   std::int64_t channels) {
  AsppNodes out;
  out.branches.push_back(add_conv_bn_relu(m, "aspp.b0", in, in_channels, channels, 1, {}));
  for (std::size_t i = 0; i < rates.size(); ++i) {
    const std::int64_t r = rates[i];
    out.branches.push_back(
        add_conv_bn_relu(m, "aspp.b" + std::to_string(i + 1), in, in_channels, channels, 3, {1, r, r}));
  }
  NodeId pool = m.add("aspp.pool.gap", GlobalAvgPool(), {in});
  pool = add_conv_bn_relu(m, "aspp.pool", pool, in_channels, channels, 1, {});
  pool = m.add("aspp.pool.up", BilinearUp::like(), {pool, in});
  out.branches.push_back(pool);

  NodeId cat = out.branches[0];
  for (std::size_t i = 1; i < out.branches.size(); ++i) {
    cat = m.add("aspp.concat" + std::to_string(i), ConcatChannels(), {cat, out.branches[i]});
  }
  out.concat = cat;
  const auto total = channels * static_cast<std::int64_t>(out.branches.size());
  out.output = add_conv_bn_relu(m, "aspp.project", cat, total, channels, 1, {});
  return out;
}

Model build_deeplabv3(const ModelOptions& opts) {
  Model m(Architecture::kDeepLabV3, {opts.in_channels, 16, 16}, opts.seed);
  auto backbone = add_resnet50_backbone(m, Model::kInput, opts.in_channels, true);
  m.tag("aspp_input", backbone.output);
  auto aspp = add_aspp(m, backbone.output, backbone.channels, opts.aspp_rates, opts.aspp_channels);
  m.tag("aspp_concat", aspp.concat);
  NodeId x = add_conv(m, "head.cls", aspp.output, opts.aspp_channels, 1, 1, {}, true);
  x = m.add("head.up", BilinearUp::by_factor(16), {x});
  m.tag("logits", x);
  m.set_output(x);
  return m;
}

Model build_model(Architecture arch, const ModelOptions& opts) {
  switch (arch) {
    case Architecture::kUNet: return build_unet(opts);
    case Architecture::kResNet50: return build_resnet50(opts);
    case Architecture::kDeepLabV3: return build_deeplabv3(opts);
    case Architecture::kCustom: break;
  }
  throw ConfigError("build_model: no builder for architecture '" + std::string(architecture_name(arch)) + "'");
}

}  // namespace floodseg
