#include "floodseg/model.hpp"

#include <algorithm>
#include <functional>
#include <iomanip>
#include <sstream>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

const Tensor kNoTensor;

Shape conv_shape(const Shape& in, std::int64_t cout, std::int64_t k, const ConvParams& p) {
  return {in[0], cout, conv_output_size(in[2], k, p), conv_output_size(in[3], k, p)};
}

void require_rank4(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + ": expected NCHW input, got " + to_string(s));
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

std::string_view kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kConvTranspose2d: return "conv_transpose2d";
    case LayerKind::kBatchNorm2d: return "batchnorm2d";
    case LayerKind::kReLU: return "relu";
    case LayerKind::kSigmoid: return "sigmoid";
    case LayerKind::kMaxPool2d: return "maxpool2d";
    case LayerKind::kGlobalAvgPool: return "global_avg_pool";
    case LayerKind::kConcatChannels: return "concat_channels";
    case LayerKind::kResidualAdd: return "residual_add";
    case LayerKind::kBilinearUp: return "bilinear_up";
  }
  return "?";
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::int64_t in, std::int64_t out, std::int64_t kernel, ConvParams p, bool bias, Rng& rng)
    : in_(in), out_(out), k_(kernel), p_(p) {
  if (kernel < 1 || p.stride < 1 || p.dilation < 1 || p.padding < 0) {
    throw ConfigError("conv2d: requires k >= 1, s >= 1, d >= 1, p >= 0");
  }
  params_.push_back({"weight", create({out, in, kernel, kernel}, fill::HeNormal{in * kernel * kernel, &rng}), {}});
  if (bias) params_.push_back({"bias", Tensor({out}), {}});
  for (auto& prm : params_) prm.grad = Tensor(prm.value.shape());
}

std::string Conv2d::summary() const {
  std::ostringstream os;
  os << in_ << "->" << out_ << " k=" << k_ << " s=" << p_.stride << " p=" << p_.padding << " d=" << p_.dilation;
  if (!has_bias()) os << " nobias";
  return os.str();
}

Shape Conv2d::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "conv2d");
  if (in[0][1] != in_) throw ShapeError("conv2d: expected " + std::to_string(in_) + " channels, got " + to_string(in[0]));
  return conv_shape(in[0], out_, k_, p_);
}

Tensor Conv2d::infer(std::span<const Tensor* const> in) const {
  return conv2d_forward(*in[0], params_[0].value, has_bias() ? params_[1].value : kNoTensor, p_);
}

std::vector<Tensor> Conv2d::backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out) {
  auto g = conv2d_backward(grad_out, *in[0], params_[0].value, has_bias(), p_);
  add_inplace(params_[0].grad, g.weight);
  if (has_bias()) add_inplace(params_[1].grad, g.bias);
  std::vector<Tensor> out;
  out.push_back(std::move(g.x));
  return out;
}

// ---------------------------------------------------------------- ConvTranspose2d

ConvTranspose2d::ConvTranspose2d(std::int64_t in, std::int64_t out, bool bias, Rng& rng) : in_(in), out_(out) {
  // Every output pixel receives exactly `in` taps for k == s == 2.
  params_.push_back({"weight", create({in, out, 2, 2}, fill::HeNormal{in, &rng}), {}});
  if (bias) params_.push_back({"bias", Tensor({out}), {}});
  for (auto& prm : params_) prm.grad = Tensor(prm.value.shape());
}

std::string ConvTranspose2d::summary() const {
  return std::to_string(in_) + "->" + std::to_string(out_) + " k=2 s=2";
}

Shape ConvTranspose2d::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "conv_transpose2d");
  if (in[0][1] != in_) throw ShapeError("conv_transpose2d: channel mismatch " + to_string(in[0]));
  return {in[0][0], out_, 2 * in[0][2], 2 * in[0][3]};
}

Tensor ConvTranspose2d::infer(std::span<const Tensor* const> in) const {
  return conv_transpose2d_forward(*in[0], params_[0].value, params_.size() > 1 ? params_[1].value : kNoTensor);
}

std::vector<Tensor> ConvTranspose2d::backward(std::span<const Tensor* const> in, const Tensor&,
                                              const Tensor& grad_out) {
  const bool bias = params_.size() > 1;
  auto g = conv_transpose2d_backward(grad_out, *in[0], params_[0].value, bias);
  add_inplace(params_[0].grad, g.weight);
  if (bias) add_inplace(params_[1].grad, g.bias);
  std::vector<Tensor> out;
  out.push_back(std::move(g.x));
  return out;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::int64_t channels, BatchNormConfig cfg) : channels_(channels), cfg_(cfg) {
  params_.push_back({"gamma", Tensor({channels}, 1.0f), Tensor({channels})});
  params_.push_back({"beta", Tensor({channels}), Tensor({channels})});
  buffers_.push_back({"running_mean", Tensor({channels})});
  buffers_.push_back({"running_var", Tensor({channels}, 1.0f)});
}

std::string BatchNorm2d::summary() const { return std::to_string(channels_); }

Shape BatchNorm2d::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "batchnorm2d");
  if (in[0][1] != channels_) throw ShapeError("batchnorm2d: channel mismatch " + to_string(in[0]));
  return in[0];
}

Tensor BatchNorm2d::forward(std::span<const Tensor* const> in, Mode mode) {
  return batchnorm2d_forward(*in[0], params_[0].value, params_[1].value, mode, buffers_[0].value, buffers_[1].value,
                             cfg_);
}

Tensor BatchNorm2d::infer(std::span<const Tensor* const> in) const {
  return batchnorm2d_infer(*in[0], params_[0].value, params_[1].value, buffers_[0].value, buffers_[1].value, cfg_);
}

std::vector<Tensor> BatchNorm2d::backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out) {
  auto g = batchnorm2d_backward(grad_out, *in[0], params_[0].value, cfg_);
  add_inplace(params_[0].grad, g.gamma);
  add_inplace(params_[1].grad, g.beta);
  std::vector<Tensor> out;
  out.push_back(std::move(g.x));
  return out;
}

// ---------------------------------------------------------------- stateless layers

Tensor ReLU::infer(std::span<const Tensor* const> in) const { return relu(*in[0]); }

std::vector<Tensor> ReLU::backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out) {
  std::vector<Tensor> out;
  out.push_back(relu_backward(grad_out, *in[0]));
  return out;
}

Tensor Sigmoid::infer(std::span<const Tensor* const> in) const { return sigmoid(*in[0]); }

std::vector<Tensor> Sigmoid::backward(std::span<const Tensor* const>, const Tensor& out, const Tensor& grad_out) {
  Tensor g(out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] * out[i] * (1.0f - out[i]);
  std::vector<Tensor> res;
  res.push_back(std::move(g));
  return res;
}

MaxPool2d::MaxPool2d(std::int64_t kernel, std::int64_t stride, std::int64_t padding)
    : k_(kernel), s_(stride), p_(padding) {
  if (kernel < 1 || stride < 1 || padding < 0 || 2 * padding > kernel) throw ConfigError("maxpool2d: invalid config");
}

std::string MaxPool2d::summary() const {
  return "k=" + std::to_string(k_) + " s=" + std::to_string(s_) + " p=" + std::to_string(p_);
}

Shape MaxPool2d::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "maxpool2d");
  if (in[0][2] + 2 * p_ < k_ || in[0][3] + 2 * p_ < k_) throw ShapeError("maxpool2d: input smaller than kernel");
  return conv_shape(in[0], in[0][1], k_, ConvParams{s_, p_, 1});
}

Tensor MaxPool2d::infer(std::span<const Tensor* const> in) const { return maxpool2d_forward(*in[0], k_, s_, p_); }

std::vector<Tensor> MaxPool2d::backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out) {
  std::vector<Tensor> out;
  out.push_back(maxpool2d_backward(grad_out, *in[0], k_, s_, p_));
  return out;
}

Shape GlobalAvgPool::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "global_avg_pool");
  return {in[0][0], in[0][1], 1, 1};
}

Tensor GlobalAvgPool::infer(std::span<const Tensor* const> in) const { return global_avg_pool_forward(*in[0]); }

std::vector<Tensor> GlobalAvgPool::backward(std::span<const Tensor* const> in, const Tensor&,
                                            const Tensor& grad_out) {
  std::vector<Tensor> out;
  out.push_back(global_avg_pool_backward(grad_out, in[0]->shape()));
  return out;
}

Shape ConcatChannels::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "concat_channels");
  require_rank4(in[1], "concat_channels");
  if (in[0][0] != in[1][0] || in[0][2] != in[1][2] || in[0][3] != in[1][3]) {
    throw ShapeError("concat_channels: mismatched N/H/W " + to_string(in[0]) + " vs " + to_string(in[1]));
  }
  return {in[0][0], in[0][1] + in[1][1], in[0][2], in[0][3]};
}

Tensor ConcatChannels::infer(std::span<const Tensor* const> in) const { return concat_channels(*in[0], *in[1]); }

std::vector<Tensor> ConcatChannels::backward(std::span<const Tensor* const> in, const Tensor&,
                                             const Tensor& grad_out) {
  auto [a, b] = split_channels(grad_out, in[0]->dim(1));
  std::vector<Tensor> out;
  out.push_back(std::move(a));
  out.push_back(std::move(b));
  return out;
}

Shape ResidualAdd::output_shape(std::span<const Shape> in) const {
  if (in[0] != in[1]) throw ShapeError("residual_add: shape mismatch " + to_string(in[0]) + " vs " + to_string(in[1]));
  return in[0];
}

Tensor ResidualAdd::infer(std::span<const Tensor* const> in) const { return add(*in[0], *in[1]); }

std::vector<Tensor> ResidualAdd::backward(std::span<const Tensor* const>, const Tensor&, const Tensor& grad_out) {
  std::vector<Tensor> out;
  out.push_back(grad_out);
  out.push_back(grad_out);
  return out;
}

std::string BilinearUp::summary() const { return factor_ == 0 ? "like" : "x" + std::to_string(factor_); }

Shape BilinearUp::output_shape(std::span<const Shape> in) const {
  require_rank4(in[0], "bilinear_up");
  if (factor_ == 0) {
    require_rank4(in[1], "bilinear_up reference");
    return {in[0][0], in[0][1], in[1][2], in[1][3]};
  }
  return {in[0][0], in[0][1], in[0][2] * factor_, in[0][3] * factor_};
}

Tensor BilinearUp::infer(std::span<const Tensor* const> in) const {
  const auto& x = *in[0];
  if (factor_ == 0) return bilinear_resize(x, in[1]->dim(2), in[1]->dim(3));
  return bilinear_resize(x, x.dim(2) * factor_, x.dim(3) * factor_);
}

std::vector<Tensor> BilinearUp::backward(std::span<const Tensor* const> in, const Tensor&, const Tensor& grad_out) {
  std::vector<Tensor> out;
  out.push_back(bilinear_resize_backward(grad_out, in[0]->shape()));
  if (factor_ == 0) out.emplace_back();
  return out;
}

// ---------------------------------------------------------------- Architecture

std::string_view architecture_name(Architecture arch) {
  switch (arch) {
    case Architecture::kUNet: return "unet";
    case Architecture::kResNet50: return "resnet50";
    case Architecture::kDeepLabV3: return "deeplabv3";
    case Architecture::kCustom: return "custom";
  }
  return "?";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "unet") return Architecture::kUNet;
  if (name == "resnet50") return Architecture::kResNet50;
  if (name == "deeplabv3") return Architecture::kDeepLabV3;
  throw ConfigError("unknown model '" + std::string(name) + "'; valid names: unet, resnet50, deeplabv3");
}

// ---------------------------------------------------------------- Model

Model::Model(Architecture arch, InputSpec spec, std::uint64_t seed) : arch_(arch), spec_(spec), seed_(seed) {
  nodes_.push_back({"input", nullptr, {}});
}

NodeId Model::add(std::string name, std::unique_ptr<Layer> layer, std::vector<NodeId> inputs) {
  if (layer->arity() != inputs.size()) {
    throw ConfigError("node '" + name + "' expects " + std::to_string(layer->arity()) + " inputs");
  }
  for (const auto& n : nodes_) {
    if (n.name == name) throw ConfigError("duplicate node name '" + name + "'");
  }
  for (NodeId in : inputs) {
    if (in >= nodes_.size()) throw ConfigError("node '" + name + "' references an undefined input");
  }
  nodes_.push_back({std::move(name), std::move(layer), std::move(inputs)});
  output_ = nodes_.size() - 1;
  return output_;
}

void Model::set_output(NodeId id) { output_ = id; }

void Model::tag(std::string tag, NodeId id) { tags_.emplace_back(std::move(tag), id); }

Rng Model::init_rng(std::string_view node_name) const { return Rng(seed_).fork(fnv1a(node_name)); }

NodeId Model::tagged(std::string_view tag) const {
  for (const auto& [t, id] : tags_) {
    if (t == tag) return id;
  }
  throw ConfigError("model has no node tagged '" + std::string(tag) + "'");
}

std::vector<std::string> Model::tags() const {
  std::vector<std::string> out;
  for (const auto& [t, id] : tags_) out.push_back(t);
  return out;
}

void Model::check_input(const Shape& shape) const {
  if (shape.size() != 4 || shape[1] != spec_.channels) {
    throw InputSpecError(std::string(architecture_name(arch_)) + ": expected input [N," +
                         std::to_string(spec_.channels) + ",H,W], got " + to_string(shape));
  }
  for (std::size_t axis : {std::size_t{2}, std::size_t{3}}) {
    if (shape[axis] < spec_.min_size || shape[axis] % spec_.multiple != 0) {
      throw InputSpecError(std::string(architecture_name(arch_)) + ": spatial dims must be multiples of " +
                           std::to_string(spec_.multiple) + " and at least " + std::to_string(spec_.min_size) +
                           ", got " + to_string(shape));
    }
  }
}

std::vector<const Tensor*> Model::gather(const std::vector<Tensor>& acts, const Node& node) const {
  std::vector<const Tensor*> in;
  in.reserve(node.inputs.size());
  for (NodeId id : node.inputs) in.push_back(&acts[id]);
  return in;
}

Tensor Model::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::kEval) {
    tape_.clear();
    return predict(x);
  }
  check_input(x.shape());
  tape_.assign(nodes_.size(), Tensor());
  tape_[0] = x;
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    auto& node = nodes_[i];
    auto in = gather(tape_, node);
    tape_[i] = node.layer->forward(in, mode);
    if (!tape_[i].all_finite()) throw NumericalError("non-finite activation in layer '" + node.name + "'", node.name);
  }
  return tape_[output_];
}

std::vector<Tensor> Model::predict_all(const Tensor& x) const {
  check_input(x.shape());
  std::vector<Tensor> acts(nodes_.size());
  acts[0] = x;
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    auto in = gather(acts, node);
    acts[i] = node.layer->infer(in);
    if (!acts[i].all_finite()) throw NumericalError("non-finite activation in layer '" + node.name + "'", node.name);
  }
  return acts;
}

Tensor Model::predict(const Tensor& x) const {
  check_input(x.shape());
  // Drop activations as soon as their last consumer has run.
  std::vector<NodeId> last_use(nodes_.size(), 0);
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    for (NodeId in : nodes_[i].inputs) last_use[in] = std::max(last_use[in], i);
  }
  std::vector<Tensor> acts(nodes_.size());
  acts[0] = x;
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    auto in = gather(acts, node);
    acts[i] = node.layer->infer(in);
    if (!acts[i].all_finite()) throw NumericalError("non-finite activation in layer '" + node.name + "'", node.name);
    for (NodeId id : node.inputs) {
      if (last_use[id] == i && id != output_) acts[id] = Tensor();
    }
  }
  return acts[output_];
}

void Model::backward(const Tensor& grad_output) {
  if (tape_.size() != nodes_.size()) throw ConfigError("backward called without a preceding train-mode forward");
  if (grad_output.shape() != tape_[output_].shape()) {
    throw ShapeError("backward: gradient shape " + to_string(grad_output.shape()) + " does not match output " +
                     to_string(tape_[output_].shape()));
  }
  std::vector<Tensor> grads(nodes_.size());
  grads[output_] = grad_output;
  for (NodeId i = nodes_.size() - 1; i >= 1; --i) {
    if (grads[i].empty()) continue;
    auto& node = nodes_[i];
    auto in = gather(tape_, node);
    auto in_grads = node.layer->backward(in, tape_[i], grads[i]);
    grads[i] = Tensor();
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (in_grads[j].empty() || node.inputs[j] == kInput) continue;
      auto& acc = grads[node.inputs[j]];
      if (acc.empty()) {
        acc = std::move(in_grads[j]);
      } else {
        add_inplace(acc, in_grads[j]);
      }
    }
  }
}

void Model::zero_grad() {
  for (auto& node : nodes_) {
    if (!node.layer) continue;
    for (auto& p : node.layer->params()) p.grad.fill(0.0f);
  }
}

void Model::clear_tape() { tape_.clear(); }

std::vector<Named<Param>> Model::parameters() {
  std::vector<Named<Param>> out;
  for (auto& node : nodes_) {
    if (!node.layer) continue;
    for (auto& p : node.layer->params()) out.push_back({node.name + "." + p.name, &p});
  }
  return out;
}

std::vector<Named<const Param>> Model::parameters() const {
  std::vector<Named<const Param>> out;
  for (const auto& node : nodes_) {
    if (!node.layer) continue;
    for (const auto& p : node.layer->params()) out.push_back({node.name + "." + p.name, &p});
  }
  return out;
}

std::vector<Named<Buffer>> Model::buffers() {
  std::vector<Named<Buffer>> out;
  for (auto& node : nodes_) {
    if (!node.layer) continue;
    for (auto& b : node.layer->buffers()) out.push_back({node.name + "." + b.name, &b});
  }
  return out;
}

std::vector<Named<const Buffer>> Model::buffers() const {
  std::vector<Named<const Buffer>> out;
  for (const auto& node : nodes_) {
    if (!node.layer) continue;
    for (const auto& b : node.layer->buffers()) out.push_back({node.name + "." + b.name, &b});
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.item->value.size();
  return n;
}

std::vector<Shape> Model::infer_shapes(const Shape& input) const {
  check_input(input);
  std::vector<Shape> shapes(nodes_.size());
  shapes[0] = input;
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    std::vector<Shape> in;
    for (NodeId id : nodes_[i].inputs) in.push_back(shapes[id]);
    shapes[i] = nodes_[i].layer->output_shape(in);
  }
  return shapes;
}

Shape Model::tap_shape(std::string_view tag, const Shape& input) const { return infer_shapes(input)[tagged(tag)]; }

std::string Model::describe(const Shape& input) const {
  const auto shapes = infer_shapes(input);
  std::ostringstream os;
  os << "model " << architecture_name(arch_) << " input " << to_string(input) << "\n";
  for (NodeId i = 1; i < nodes_.size(); ++i) {
    const auto& node = nodes_[i];
    std::size_t params = 0;
    for (const auto& p : node.layer->params()) params += p.value.size();
    std::ostringstream from;
    for (std::size_t j = 0; j < node.inputs.size(); ++j) from << (j ? "," : "") << node.inputs[j];
    os << std::setw(4) << i << "  " << std::left << std::setw(30) << node.name << std::setw(17)
       << kind_name(node.layer->kind()) << std::setw(32) << node.layer->summary() << std::setw(8) << from.str()
       << std::setw(22) << to_string(shapes[i]) << std::right;
    if (params) os << " params=" << params;
    os << "\n";
  }
  for (const auto& [t, id] : tags_) os << "tap " << t << " " << to_string(shapes[id]) << "\n";
  os << "output " << to_string(shapes[output_]) << "\n";
  os << "parameters " << parameter_count() << "\n";
  return os.str();
}

}  // namespace floodseg
