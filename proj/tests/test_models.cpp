#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "floodseg/error.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/models.hpp"
#include "oracles.hpp"

using namespace floodseg;

namespace {

const Architecture kArchs[] = {Architecture::kUNet, Architecture::kResNet50, Architecture::kDeepLabV3};

std::size_t count_kind(const Model& m, LayerKind kind) {
  std::size_t n = 0;
  for (NodeId id = 1; id < m.node_count(); ++id) n += m.layer(id)->kind() == kind;
  return n;
}

// Independent parameter count from the block definitions.
std::int64_t unet_count(std::int64_t base) {
  auto conv = [](std::int64_t cin, std::int64_t cout, std::int64_t k) { return cin * cout * k * k; };
  auto dbl = [&](std::int64_t cin, std::int64_t cout) { return conv(cin, cout, 3) + conv(cout, cout, 3) + 4 * cout; };
  std::int64_t total = 0, cin = 3;
  for (int l = 0; l < 4; ++l) {
    total += dbl(cin, base << l);
    cin = base << l;
  }
  total += dbl(cin, base * 16);
  cin = base * 16;
  for (int l = 3; l >= 0; --l) {
    const std::int64_t ch = base << l;
    total += cin * ch * 4 + ch + dbl(2 * ch, ch);
    cin = ch;
  }
  return total + cin + 1;
}

}  // namespace

TEST(UNet, ShapesAndParameterCount) {
  const Model m = build_unet();
  EXPECT_EQ(m.parameter_count(), 31037633u);
  EXPECT_EQ(static_cast<std::int64_t>(m.parameter_count()), unet_count(64));
  const Shape in{1, 3, 256, 256};
  EXPECT_EQ(m.tap_shape("bottleneck", in), (Shape{1, 1024, 16, 16}));
  EXPECT_EQ(m.tap_shape("encoder1", in), (Shape{1, 64, 256, 256}));
  EXPECT_EQ(m.tap_shape("logits", in), (Shape{1, 1, 256, 256}));
}

TEST(UNet, SmallBaseCountAndLimits) {
  ModelOptions o;
  o.unet_base = 8;
  EXPECT_EQ(static_cast<std::int64_t>(build_unet(o).parameter_count()), unet_count(8));
  o.unet_base = 4;
  EXPECT_THROW(build_unet(o), ConfigError);
  o.unet_base = 8;
  EXPECT_THROW(build_unet(o).check_input({1, 3, 72, 64}), InputSpecError);
  EXPECT_THROW(build_unet(o).check_input({1, 1, 64, 64}), InputSpecError);
}

TEST(ResNet50, BackboneStructure) {
  Model m(Architecture::kCustom, {3, 32, 32}, 0);
  const BackboneNodes b = add_resnet50_backbone(m, Model::kInput, 3, false);
  EXPECT_EQ(count_kind(m, LayerKind::kConv2d), 53u);
  EXPECT_EQ(count_kind(m, LayerKind::kBatchNorm2d), 53u);
  EXPECT_EQ(count_kind(m, LayerKind::kResidualAdd), 16u);
  EXPECT_EQ(b.residual_blocks, 16u);
  EXPECT_EQ(b.channels, 2048);

  const Model full = build_resnet50();
  EXPECT_EQ(full.parameter_count(), 32946753u);
  const Shape in{1, 3, 256, 256};
  EXPECT_EQ(full.tap_shape("backbone", in), (Shape{1, 2048, 8, 8}));
  EXPECT_EQ(full.tap_shape("logits", in), (Shape{1, 1, 256, 256}));
  EXPECT_THROW(full.check_input({1, 3, 16, 16}), InputSpecError);
}

TEST(DeepLabV3, AsppShapes) {
  const Model m = build_deeplabv3();
  EXPECT_EQ(m.parameter_count(), 39043393u);
  const Shape in{1, 3, 256, 256};
  EXPECT_EQ(m.tap_shape("aspp_input", in), (Shape{1, 2048, 16, 16}));
  EXPECT_EQ(m.tap_shape("aspp_concat", in), (Shape{1, 1280, 16, 16}));
  EXPECT_EQ(m.tap_shape("logits", in), (Shape{1, 1, 256, 256}));
  const auto shapes = m.infer_shapes(in);
  for (const char* b : {"aspp.b1.relu", "aspp.b2.relu", "aspp.b3.relu"}) {
    for (NodeId id = 0; id < m.node_count(); ++id) {
      if (m.node_name(id) == b) EXPECT_EQ(shapes[id], (Shape{1, 256, 16, 16})) << b;
    }
  }
  EXPECT_THROW(m.check_input({1, 3, 8, 8}), InputSpecError);
}

TEST(DeepLabV3, PoolingBranchOnConstantInput) {
  Model m(Architecture::kCustom, {4, 1, 1}, 3);
  const AsppNodes a = add_aspp(m, Model::kInput, 4, {1, 2}, 3);
  m.set_output(a.output);
  const Tensor* b0 = nullptr;
  for (const auto& [name, p] : std::as_const(m).parameters()) {
    if (name == "aspp.b0.conv.weight") b0 = &p->value;
  }
  ASSERT_NE(b0, nullptr);
  for (auto& [name, p] : m.parameters()) {
    if (name == "aspp.pool.conv.weight") p->value = *b0;
  }
  const Tensor x({1, 4, 5, 5}, 0.8f);
  const auto acts = m.predict_all(x);
  const Tensor& one = acts[a.branches.front()];
  const Tensor& pool = acts[a.branches.back()];
  ASSERT_EQ(one.shape(), pool.shape());
  for (std::size_t i = 0; i < one.size(); ++i) EXPECT_NEAR(one[i], pool[i], 1e-6);
}

TEST(Models, ShapeContractAcrossSizes) {
  for (Architecture arch : kArchs) {
    const Model m = build_model(arch);
    for (std::int64_t s : {64, 128, 256}) {
      EXPECT_EQ(m.tap_shape("logits", {2, 3, s, s}), (Shape{2, 1, s, s})) << architecture_name(arch);
    }
  }
}

TEST(Models, InitialisationIsSaneAndFlowsGradients) {
  Rng rng(99);
  const Tensor x = oracle::random_tensor({2, 3, 64, 64}, rng, 0.0f, 1.0f);
  const Tensor y(Shape{2, 1, 64, 64}, 1.0f);
  for (Architecture arch : kArchs) {
    ModelOptions o;
    o.seed = 4;
    Model m = build_model(arch, o);
    const Tensor p = sigmoid(m.forward(x, Mode::kTrain));
    m.clear_tape();
    const double mean = std::accumulate(p.data().begin(), p.data().end(), 0.0) / static_cast<double>(p.size());
    EXPECT_GT(mean, 0.05) << architecture_name(arch);
    EXPECT_LT(mean, 0.95) << architecture_name(arch);

    m.zero_grad();
    const Tensor z = m.forward(x, Mode::kTrain);
    m.backward(bce_loss(z, y).grad);
    std::size_t total = 0, nonzero = 0;
    for (const auto& [name, prm] : m.parameters()) {
      ASSERT_EQ(prm->grad.shape(), prm->value.shape()) << name;
      ++total;
      double norm = 0;
      for (float g : prm->grad.data()) norm += double(g) * g;
      nonzero += norm > 0;
    }
    EXPECT_GE(static_cast<double>(nonzero), 0.99 * static_cast<double>(total)) << architecture_name(arch);
    m.clear_tape();
  }
}

TEST(Models, EvalForwardIsPureAndSeeded) {
  Rng rng(5);
  const Tensor x = oracle::random_tensor({1, 3, 64, 64}, rng, 0.0f, 1.0f);
  for (Architecture arch : kArchs) {
    ModelOptions o;
    o.seed = 12;
    o.unet_base = 8;
    const Model a = build_model(arch, o), b = build_model(arch, o);
    EXPECT_EQ(a.predict(x), a.predict(x));
    auto pa = a.parameters();
    auto pb = b.parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].item->value, pb[i].item->value);
    o.seed = 13;
    EXPECT_NE(build_model(arch, o).parameters()[0].item->value, pa[0].item->value);
  }
}

TEST(Models, NonFiniteOutputNamesLayer) {
  ModelOptions o;
  o.unet_base = 8;
  Model m = build_unet(o);
  m.parameters()[0].item->value[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    m.forward(Tensor({1, 3, 16, 16}, 0.5f), Mode::kEval);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.layer(), "enc1.1.conv");
  }
}

TEST(Models, ArchitectureNames) {
  EXPECT_EQ(parse_architecture("deeplabv3"), Architecture::kDeepLabV3);
  EXPECT_EQ(architecture_name(Architecture::kResNet50), "resnet50");
  try {
    parse_architecture("vgg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("unet"), std::string::npos);
  }
}

TEST(Models, DescribeListsTapsAndCount) {
  const std::string d = build_deeplabv3().describe({1, 3, 64, 64});
  EXPECT_NE(d.find("tap aspp_input [1,2048,4,4]"), std::string::npos);
  EXPECT_NE(d.find("output [1,1,64,64]"), std::string::npos);
  EXPECT_NE(d.find("parameters 39043393"), std::string::npos);
}
