#pragma once

#include <concepts>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "floodseg/layers.hpp"
#include "floodseg/tensor.hpp"

namespace floodseg {

/// Trainable tensor plus its accumulated gradient. `name` is local to the layer.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Non-trainable state (batchnorm running statistics).
struct Buffer {
  std::string name;
  Tensor value;
};

enum class LayerKind {
  kConv2d,
  kConvTranspose2d,
  kBatchNorm2d,
  kReLU,
  kSigmoid,
  kMaxPool2d,
  kGlobalAvgPool,
  kConcatChannels,
  kResidualAdd,
  kBilinearUp,
};

std::string_view kind_name(LayerKind kind);

/// One differentiable node of a static graph. `forward` may update internal
/// buffers (train-mode batchnorm); `infer` is the pure eval-mode map. `backward`
/// returns one gradient per input (an empty Tensor for non-differentiable
/// inputs) and accumulates parameter gradients into params().
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  /// Hyperparameter summary for describe output.
  virtual std::string summary() const = 0;
  virtual std::size_t arity() const { return 1; }
  virtual Shape output_shape(std::span<const Shape> in) const = 0;

  virtual Tensor forward(std::span<const Tensor* const> in, Mode mode) {
    (void)mode;
    return infer(in);
  }
  virtual Tensor infer(std::span<const Tensor* const> in) const = 0;
  virtual std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out,
                                       const Tensor& grad_out) = 0;

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Buffer>& buffers() { return buffers_; }
  const std::vector<Buffer>& buffers() const { return buffers_; }

 protected:
  std::vector<Param> params_;
  std::vector<Buffer> buffers_;
};

// Concrete layers. Parameter tensors are initialised by the constructor.

class Conv2d final : public Layer {
 public:
  /// weight He-normal with fan_in = in * k * k; bias (when enabled) zero.
  Conv2d(std::int64_t in, std::int64_t out, std::int64_t kernel, ConvParams p, bool bias, Rng& rng);

  LayerKind kind() const override { return LayerKind::kConv2d; }
  std::string summary() const override;
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;

  const ConvParams& conv() const { return p_; }
  std::int64_t kernel() const { return k_; }
  bool has_bias() const { return params_.size() > 1; }

 private:
  std::int64_t in_, out_, k_;
  ConvParams p_;
};

class ConvTranspose2d final : public Layer {
 public:
  ConvTranspose2d(std::int64_t in, std::int64_t out, bool bias, Rng& rng);

  LayerKind kind() const override { return LayerKind::kConvTranspose2d; }
  std::string summary() const override;
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;

 private:
  std::int64_t in_, out_;
};

class BatchNorm2d final : public Layer {
 public:
  explicit BatchNorm2d(std::int64_t channels, BatchNormConfig cfg = {});

  LayerKind kind() const override { return LayerKind::kBatchNorm2d; }
  std::string summary() const override;
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor forward(std::span<const Tensor* const> in, Mode mode) override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;

 private:
  std::int64_t channels_;
  BatchNormConfig cfg_;
};

class ReLU final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kReLU; }
  std::string summary() const override { return {}; }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;
};

class Sigmoid final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kSigmoid; }
  std::string summary() const override { return {}; }
  Shape output_shape(std::span<const Shape> in) const override { return in[0]; }
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(std::int64_t kernel, std::int64_t stride, std::int64_t padding = 0);

  LayerKind kind() const override { return LayerKind::kMaxPool2d; }
  std::string summary() const override;
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;

 private:
  std::int64_t k_, s_, p_;
};

class GlobalAvgPool final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kGlobalAvgPool; }
  std::string summary() const override { return {}; }
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;
};

class ConcatChannels final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kConcatChannels; }
  std::string summary() const override { return {}; }
  std::size_t arity() const override { return 2; }
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;
};

class ResidualAdd final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::kResidualAdd; }
  std::string summary() const override { return {}; }
  std::size_t arity() const override { return 2; }
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;
};

/// Bilinear resize. With a factor it scales H and W; in "like" mode it takes a
/// second input and resizes to that input's H x W (the reference receives no
/// gradient).
class BilinearUp final : public Layer {
 public:
  static BilinearUp by_factor(std::int64_t factor) { return BilinearUp(factor); }
  static BilinearUp like() { return BilinearUp(0); }

  LayerKind kind() const override { return LayerKind::kBilinearUp; }
  std::string summary() const override;
  std::size_t arity() const override { return factor_ == 0 ? 2 : 1; }
  Shape output_shape(std::span<const Shape> in) const override;
  Tensor infer(std::span<const Tensor* const> in) const override;
  std::vector<Tensor> backward(std::span<const Tensor* const> in, const Tensor& out, const Tensor& grad_out) override;

 private:
  explicit BilinearUp(std::int64_t factor) : factor_(factor) {}
  std::int64_t factor_;
};

enum class Architecture : std::uint8_t { kUNet = 0, kResNet50 = 1, kDeepLabV3 = 2, kCustom = 255 };

std::string_view architecture_name(Architecture arch);
/// Throws ConfigError listing the valid names.
Architecture parse_architecture(std::string_view name);

/// Spatial input constraints: H, W >= min_size and divisible by multiple.
struct InputSpec {
  std::int64_t channels = 3;
  std::int64_t multiple = 1;
  std::int64_t min_size = 1;
};

using NodeId = std::size_t;

/// Parameter or buffer with its fully qualified name ("node.local").
template <typename T>
struct Named {
  std::string name;
  T* item;
};

/// Static directed graph of layers. Node 0 is the input; nodes are stored in
/// topological order (every input id precedes its consumer), so forward walks
/// the list and backward walks it in reverse.
class Model {
 public:
  Model(Architecture arch, InputSpec spec, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  static constexpr NodeId kInput = 0;

  NodeId add(std::string name, std::unique_ptr<Layer> layer, std::vector<NodeId> inputs);
  template <std::derived_from<Layer> L>
  NodeId add(std::string name, L layer, std::vector<NodeId> inputs) {
    return add(std::move(name), std::unique_ptr<Layer>(std::make_unique<L>(std::move(layer))), std::move(inputs));
  }
  void set_output(NodeId id);
  /// Names a node so tests and describe output can refer to it.
  void tag(std::string tag, NodeId id);

  /// Fresh per-node RNG stream for parameter initialisation.
  Rng init_rng(std::string_view node_name) const;

  Architecture architecture() const { return arch_; }
  std::uint64_t seed() const { return seed_; }
  const InputSpec& input_spec() const { return spec_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::string& node_name(NodeId id) const { return nodes_.at(id).name; }
  const Layer* layer(NodeId id) const { return nodes_.at(id).layer.get(); }
  NodeId output() const { return output_; }
  NodeId tagged(std::string_view tag) const;
  std::vector<std::string> tags() const;

  /// Validates channels and spatial constraints; throws InputSpecError.
  void check_input(const Shape& shape) const;

  /// Train mode records activations for backward; eval mode does not.
  /// Throws NumericalError naming the first node with a non-finite output.
  Tensor forward(const Tensor& x, Mode mode);
  /// Pure eval-mode forward; safe to call concurrently.
  Tensor predict(const Tensor& x) const;
  /// Eval-mode outputs of every node (index = NodeId).
  std::vector<Tensor> predict_all(const Tensor& x) const;

  /// Backpropagates d(loss)/d(logits) through the last train-mode forward and
  /// accumulates parameter gradients.
  void backward(const Tensor& grad_output);
  void zero_grad();
  /// Releases activations recorded by the last train-mode forward.
  void clear_tape();

  std::vector<Named<Param>> parameters();
  std::vector<Named<const Param>> parameters() const;
  std::vector<Named<Buffer>> buffers();
  std::vector<Named<const Buffer>> buffers() const;
  std::size_t parameter_count() const;

  /// Output shape of every node for the given input shape.
  std::vector<Shape> infer_shapes(const Shape& input) const;
  Shape tap_shape(std::string_view tag, const Shape& input) const;
  /// Human-readable layer graph with per-node output shapes and the parameter count.
  std::string describe(const Shape& input) const;

 private:
  struct Node {
    std::string name;
    std::unique_ptr<Layer> layer;  // null for the input node
    std::vector<NodeId> inputs;
  };

  std::vector<const Tensor*> gather(const std::vector<Tensor>& acts, const Node& node) const;

  Architecture arch_;
  InputSpec spec_;
  std::uint64_t seed_;
  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, NodeId>> tags_;
  NodeId output_ = 0;
  std::vector<Tensor> tape_;
};

}  // namespace floodseg
