#include "floodseg/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "floodseg/error.hpp"

namespace floodseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- Adam

AdamState make_adam_state(std::span<const Tensor* const> params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

AdamState make_adam_state(const Model& model) {
  std::vector<const Tensor*> values;
  for (const auto& p : model.parameters()) values.push_back(&p.item->value);
  return make_adam_state(values);
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads, AdamState& state,
               const AdamConfig& cfg) {
  if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m.size()) + " moment tensors");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Shape& s = params[i]->shape();
    if (grads[i]->shape() != s || state.m[i].shape() != s || state.v[i].shape() != s) {
      throw ShapeError("adam_step: tensor " + std::to_string(i) + " shape mismatch, param " + to_string(s) +
                       " grad " + to_string(grads[i]->shape()));
    }
  }
  ++state.step;
  const auto t = static_cast<double>(state.step);
  const auto bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta1), t));
  const auto bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(cfg.beta2), t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    float* p = params[i]->ptr();
    const float* g = grads[i]->ptr();
    float* m = state.m[i].ptr();
    float* v = state.v[i].ptr();
    const std::size_t n = params[i]->size();
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0f - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0f - cfg.beta2) * g[j] * g[j];
      const float mhat = m[j] / bc1;
      const float vhat = v[j] / bc2;
      p[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

void adam_step(Model& model, AdamState& state, const AdamConfig& cfg) {
  std::vector<Tensor*> values;
  std::vector<const Tensor*> grads;
  for (auto& p : model.parameters()) {
    values.push_back(&p.item->value);
    grads.push_back(&p.item->grad);
  }
  adam_step(values, grads, state, cfg);
}

// ---------------------------------------------------------------- config, early stopping

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(adam.learning_rate > 0.0f)) throw ConfigError("learning rate must be > 0");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(threshold >= 0.0f && threshold <= 1.0f)) throw ConfigError("threshold must be in [0, 1]");
}

EarlyStopping::EarlyStopping(int patience, double min_delta)
    : patience_(patience), min_delta_(min_delta), best_loss_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

void EarlyStopping::resume(int best_epoch, double best_loss) {
  best_epoch_ = best_epoch;
  best_loss_ = best_loss;
  bad_epochs_ = 0;
}

bool EarlyStopping::observe(int epoch, double loss) {
  if (loss < best_loss_ - min_delta_) {
    best_loss_ = loss;
    best_epoch_ = epoch;
    bad_epochs_ = 0;
    return true;
  }
  ++bad_epochs_;
  return false;
}

ModelState capture_state(const Model& model) {
  ModelState s;
  for (const auto& p : model.parameters()) s.params.push_back(p.item->value);
  for (const auto& b : model.buffers()) s.buffers.push_back(b.item->value);
  return s;
}

void restore_state(Model& model, const ModelState& state) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  if (params.size() != state.params.size() || buffers.size() != state.buffers.size()) {
    throw ShapeError("restore_state: tensor count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].item->value.shape() != state.params[i].shape()) {
      throw ShapeError("restore_state: shape mismatch for " + params[i].name);
    }
    params[i].item->value = state.params[i];
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    if (buffers[i].item->value.shape() != state.buffers[i].shape()) {
      throw ShapeError("restore_state: shape mismatch for " + buffers[i].name);
    }
    buffers[i].item->value = state.buffers[i];
  }
}

// ---------------------------------------------------------------- training loop

namespace {

double accuracy_of(const ConfusionMatrix& cm) {
  return cm.total() == 0 ? 0.0 : static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

[[noreturn]] void rethrow_numerical(const NumericalError& e, int epoch, std::size_t batch) {
  throw NumericalError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batch) + ": " + e.what(),
                       e.layer());
}

}  // namespace

TrainResult train(Model& model, std::span<const Sample> train_set, std::span<const Sample> val_set,
                  const TrainConfig& cfg, const TrainState* resume, const TrainHooks& hooks) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("train: empty training set");
  if (val_set.empty()) throw ConfigError("train: empty validation set");

  TrainResult result;
  AdamState adam = resume ? resume->adam : make_adam_state(model);
  EarlyStopping stopper(cfg.patience);
  int first_epoch = 1;
  if (resume) {
    stopper.resume(resume->epoch, resume->best_val_loss);
    first_epoch = resume->epoch + 1;
    result.state = *resume;
  }
  ModelState best_weights = capture_state(model);
  const Rng root(cfg.seed);

  for (int epoch = first_epoch; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(2 * static_cast<std::uint64_t>(epoch));
    const Rng aug_root = root.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
    const auto groups = batch_indices(train_set.size(), cfg.batch_size, true, shuffle_rng);

    double loss_sum = 0.0;
    ConfusionMatrix train_cm;
    for (std::size_t b = 0; b < groups.size(); ++b) {
      std::vector<Sample> picked;
      picked.reserve(groups[b].size());
      for (std::size_t idx : groups[b]) {
        if (cfg.augment) {
          Rng rng = aug_root.fork(idx);
          picked.push_back(augment(train_set[idx], cfg.policy, rng));
        } else {
          picked.push_back(train_set[idx]);
        }
      }
      const Batch batch = collate(picked);
      try {
        model.zero_grad();
        const Tensor logits = model.forward(batch.images, Mode::kTrain);
        const LossResult loss = segmentation_loss(cfg.loss, logits, batch.masks);
        if (!std::isfinite(loss.value)) throw NumericalError("non-finite loss", "loss");
        train_cm += confusion_from_logits(logits, batch.masks, cfg.threshold);
        model.backward(loss.grad);
        model.clear_tape();
        adam_step(model, adam, cfg.adam);
        loss_sum += loss.value * static_cast<double>(picked.size());
      } catch (const NumericalError& e) {
        model.clear_tape();
        rethrow_numerical(e, epoch, b + 1);
      }
    }

    const MetricsReport val = evaluate(model, val_set, cfg.loss, cfg.batch_size, cfg.threshold);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_accuracy = accuracy_of(train_cm);
    rec.val_loss = hooks.val_loss_override ? hooks.val_loss_override(epoch, val.loss) : val.loss;
    rec.val_accuracy = val.accuracy;
    if (!std::isfinite(rec.val_loss)) {
      throw NumericalError("epoch " + std::to_string(epoch) + ": non-finite validation loss", "loss");
    }
    result.history.epochs.push_back(rec);

    if (stopper.observe(epoch, rec.val_loss)) {
      best_weights = capture_state(model);
      result.state = TrainState{adam, epoch, rec.val_loss};
    }
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stopper.should_stop()) {
      result.history.stopped_early = true;
      break;
    }
    if (hooks.stop_when && hooks.stop_when(rec)) break;
  }

  result.history.best_epoch = stopper.best_epoch();
  restore_state(model, best_weights);
  return result;
}

// ---------------------------------------------------------------- evaluation

MetricsReport evaluate(const LogitFn& logits, std::span<const Sample> samples, LossKind loss, std::size_t batch_size,
                       float threshold) {
  if (samples.empty()) throw ConfigError("evaluate: empty dataset");
  if (batch_size < 1) throw ConfigError("evaluate: batch size must be >= 1");
  Rng unused(0);
  ConfusionMatrix cm;
  double loss_sum = 0.0;
  for (const auto& group : batch_indices(samples.size(), batch_size, false, unused)) {
    const Batch batch = collate(samples.subspan(group.front(), group.size()));
    const Tensor z = logits(batch.images);
    const LossResult l = segmentation_loss(loss, z, batch.masks);
    loss_sum += l.value * static_cast<double>(group.size());
    cm += confusion_from_logits(z, batch.masks, threshold);
  }
  MetricsReport report = compute_metrics(cm);
  report.loss = loss_sum / static_cast<double>(samples.size());
  return report;
}

MetricsReport evaluate(const Model& model, std::span<const Sample> samples, LossKind loss, std::size_t batch_size,
                       float threshold) {
  return evaluate([&model](const Tensor& x) { return model.predict(x); }, samples, loss, batch_size, threshold);
}

// ---------------------------------------------------------------- history CSV

namespace {

constexpr const char* kHistoryHeader = "epoch,train_loss,train_acc,val_loss,val_acc";

void write_bytes(const fs::path& file, const std::string& bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out << bytes;
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

}  // namespace

std::string history_csv(const TrainHistory& history) {
  std::string out = std::string(kHistoryHeader) + "\n";
  char line[160];
  for (const auto& r : history.epochs) {
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.6f\n", r.epoch, r.train_loss, r.train_accuracy, r.val_loss,
                  r.val_accuracy);
    out += line;
  }
  return out;
}

void write_history(const fs::path& file, const TrainHistory& history) { write_bytes(file, history_csv(history)); }

TrainHistory read_history(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open history '" + file.string() + "'");
  auto fail = [&](std::size_t line, const std::string& why) -> ManifestError {
    return ManifestError(file.string() + ":" + std::to_string(line) + ": " + why);
  };
  TrainHistory h;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw fail(1, "empty file");
  ++lineno;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kHistoryHeader) throw fail(lineno, "expected header '" + std::string(kHistoryHeader) + "'");
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 5) throw fail(lineno, "expected 5 fields, got " + std::to_string(cells.size()));
    EpochRecord r;
    try {
      std::size_t used = 0;
      r.epoch = std::stoi(cells[0], &used);
      if (used != cells[0].size()) throw std::invalid_argument("epoch");
      double* fields[] = {&r.train_loss, &r.train_accuracy, &r.val_loss, &r.val_accuracy};
      for (std::size_t i = 0; i < 4; ++i) {
        *fields[i] = std::stod(cells[i + 1], &used);
        if (used != cells[i + 1].size()) throw std::invalid_argument("number");
      }
    } catch (const std::logic_error&) {
      throw fail(lineno, "malformed number in '" + line + "'");
    }
    h.epochs.push_back(r);
  }
  if (h.epochs.empty()) throw fail(lineno, "no epoch rows");
  const auto best = std::min_element(h.epochs.begin(), h.epochs.end(),
                                     [](const EpochRecord& a, const EpochRecord& b) { return a.val_loss < b.val_loss; });
  h.best_epoch = best->epoch;
  return h;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[4] = {'F', 'S', 'E', 'G'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    const U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void put_tensor(const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw IoError("checkpoint: tensor name too long");
    put(static_cast<std::uint16_t>(name.size()));
    bytes_.insert(bytes_.end(), name.begin(), name.end());
    put(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put(static_cast<std::uint32_t>(d));
    for (float v : t.data()) put(v);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const std::string& field) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(U), field);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }
  std::string get_string(std::size_t n, const std::string& field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const std::string& field) const {
    if (bytes_.size() - pos_ < n) throw CorruptCheckpoint("checkpoint truncated while reading " + field);
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

ModelOptions options_from_tensors(Architecture arch, std::uint64_t seed, const std::map<std::string, Tensor>& t) {
  auto find = [&](const std::string& name) -> const Tensor& {
    auto it = t.find(name);
    if (it == t.end() || it->second.rank() != 4) throw CorruptCheckpoint("checkpoint: missing tensor " + name);
    return it->second;
  };
  ModelOptions opts;
  opts.seed = seed;
  if (arch == Architecture::kUNet) {
    const Tensor& w = find("enc1.1.conv.weight");
    opts.unet_base = w.dim(0);
    opts.in_channels = w.dim(1);
  } else {
    opts.in_channels = find("stem.conv.weight").dim(1);
    if (arch == Architecture::kDeepLabV3) opts.aspp_channels = find("aspp.b0.conv.weight").dim(0);
  }
  return opts;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const AdamState& adam, const CheckpointInfo& info) {
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  if (adam.m.size() != params.size() || adam.v.size() != params.size()) {
    throw ShapeError("checkpoint: optimizer state does not match the model's parameters");
  }
  Writer w;
  for (char c : kMagic) w.put(static_cast<std::uint8_t>(c));
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint8_t>(info.architecture));
  w.put(info.seed);
  w.put(info.epoch);
  w.put(info.best_val_loss);
  w.put(static_cast<std::uint32_t>(3 * params.size() + buffers.size()));
  for (const auto& p : params) w.put_tensor(p.name, p.item->value);
  for (const auto& b : buffers) w.put_tensor(b.name, b.item->value);
  for (std::size_t i = 0; i < params.size(); ++i) w.put_tensor(params[i].name + ".m", adam.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) w.put_tensor(params[i].name + ".v", adam.v[i]);
  w.put(adam.step);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.get_string(4, "magic") != std::string(kMagic, 4)) throw CorruptCheckpoint("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CorruptCheckpoint("checkpoint: unsupported version " + std::to_string(version));
  }
  CheckpointInfo info;
  const auto arch_id = r.get<std::uint8_t>("architecture");
  if (arch_id > 2) throw CorruptCheckpoint("checkpoint: unknown architecture id " + std::to_string(arch_id));
  info.architecture = static_cast<Architecture>(arch_id);
  info.seed = r.get<std::uint64_t>("seed");
  info.epoch = r.get<std::uint32_t>("epoch");
  info.best_val_loss = r.get<float>("best_val_loss");
  const auto count = r.get<std::uint32_t>("tensor count");

  std::map<std::string, Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "tensor " + std::to_string(i);
    const auto len = r.get<std::uint16_t>(where + " name length");
    std::string name = r.get_string(len, where + " name");
    const auto ndim = r.get<std::uint8_t>(name + " ndim");
    if (ndim == 0) throw CorruptCheckpoint("checkpoint: " + name + " has zero dimensions");
    Shape shape;
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint32_t>(name + " dims");
      if (dim == 0) throw CorruptCheckpoint("checkpoint: " + name + " has a zero dimension");
      shape.push_back(dim);
      n *= dim;
    }
    r.need(n * 4, name + " data");
    std::vector<float> data(n);
    for (auto& v : data) v = r.get<float>(name + " data");
    if (!tensors.emplace(name, Tensor(shape, std::move(data))).second) {
      throw CorruptCheckpoint("checkpoint: duplicate tensor " + name);
    }
  }
  const auto step = r.get<std::uint64_t>("adam step");
  if (!r.done()) throw CorruptCheckpoint("checkpoint: trailing bytes after adam step");

  Model model = build_model(info.architecture, options_from_tensors(info.architecture, info.seed, tensors));
  auto take = [&](const std::string& name, const Shape& expected) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CorruptCheckpoint("checkpoint: missing tensor " + name);
    if (it->second.shape() != expected) {
      throw CorruptCheckpoint("checkpoint: tensor " + name + " has shape " + to_string(it->second.shape()) +
                              ", model expects " + to_string(expected));
    }
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  AdamState adam;
  adam.step = step;
  for (auto& p : model.parameters()) {
    p.item->value = take(p.name, p.item->value.shape());
    adam.m.push_back(take(p.name + ".m", p.item->value.shape()));
    adam.v.push_back(take(p.name + ".v", p.item->value.shape()));
  }
  for (auto& b : model.buffers()) b.item->value = take(b.name, b.item->value.shape());
  if (!tensors.empty()) throw CorruptCheckpoint("checkpoint: unexpected tensor " + tensors.begin()->first);
  return Checkpoint{info, std::move(model), std::move(adam)};
}

void save_checkpoint(const fs::path& file, const Model& model, const AdamState& adam, const CheckpointInfo& info) {
  const auto bytes = encode_checkpoint(model, adam, info);
  fs::path tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, file);
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + file.string() + "'");
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace floodseg
