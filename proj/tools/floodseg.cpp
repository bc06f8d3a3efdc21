#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "floodseg/data.hpp"
#include "floodseg/error.hpp"
#include "floodseg/image_io.hpp"
#include "floodseg/metrics.hpp"
#include "floodseg/models.hpp"
#include "floodseg/report.hpp"
#include "floodseg/train.hpp"

namespace fs = std::filesystem;
using namespace floodseg;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + file.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + file.string() + "'");
}

void write_config(const fs::path& file, const ordered_json& cfg) { write_text(file, cfg.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  if (!dir.empty()) fs::create_directories(dir);
}

/// Config record for commands whose output is a single file.
fs::path sidecar_config(const fs::path& out, const std::string& command) {
  return out.parent_path() / ("config." + command + ".json");
}

fs::path manifest_path(const fs::path& data) { return fs::is_directory(data) ? data / "manifest.json" : data; }

const char* env_threads() {
  const char* t = std::getenv("FLOODSEG_THREADS");
  return t ? t : "1";
}

/// Reads "size" from the config.json written next to a checkpoint by train.
std::optional<std::int64_t> size_from_run_config(const fs::path& checkpoint) {
  const fs::path cfg = checkpoint.parent_path() / "config.json";
  std::ifstream in(cfg);
  if (!in) return std::nullopt;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.contains("size") && j["size"].is_number_integer()) return j["size"].get<std::int64_t>();
  } catch (const nlohmann::json::exception&) {
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- prepare

struct PrepareArgs {
  std::string images, masks, out;
  std::int64_t size = 256;
  std::uint64_t seed = 0;
  double split = 0.8;
  std::size_t synthetic = 0;
};

int cmd_prepare(const PrepareArgs& a) {
  const fs::path out = a.out;
  const TargetSize target{a.size, a.size};
  ensure_dir(out);
  fs::path images = a.images, masks = a.masks;
  if (a.synthetic > 0) {
    const auto samples = generate_synthetic(a.synthetic, target, a.seed);
    write_samples(out, samples);
    images = out / "images";
    masks = out / "masks";
  } else if (images.empty() || masks.empty()) {
    throw ConfigError("prepare: give --images and --masks, or --synthetic N");
  }
  const Pairing pairing = pair_directory(images, masks);
  if (!pairing.unpaired.empty()) {
    std::string msg = "prepare: " + std::to_string(pairing.unpaired.size()) + " unpaired file(s):";
    for (const auto& u : pairing.unpaired) msg += "\n  " + u;
    throw ManifestError(msg);
  }
  if (pairing.pairs.size() < 2) throw ManifestError("prepare: need at least 2 image/mask pairs");
  const DatasetManifest manifest = make_manifest(pairing, a.split, a.seed, target);
  write_manifest(out / "manifest.json", manifest);

  std::size_t n_train = 0;
  for (const auto& e : manifest.entries) n_train += e.split == SplitTag::kTrain;
  std::printf("manifest %s: %zu train, %zu val\n", (out / "manifest.json").string().c_str(), n_train,
              manifest.entries.size() - n_train);

  ordered_json cfg;
  cfg["command"] = "prepare";
  cfg["images"] = images.string();
  cfg["masks"] = masks.string();
  cfg["out"] = out.string();
  cfg["size"] = a.size;
  cfg["seed"] = a.seed;
  cfg["split"] = a.split;
  cfg["synthetic"] = a.synthetic;
  write_config(out / "config.json", cfg);
  return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, model = "unet", out, loss = "bce", resume;
  int epochs = 100;
  std::size_t batch_size = 4;
  float lr = 1e-3f;
  int patience = 10;
  std::uint64_t seed = 0;
  bool no_augment = false;
  bool describe = false;
  std::int64_t base = 64;
  std::int64_t size = 0;  // 0: manifest size (or 256 for --describe)
  bool seed_given = false;
};

void print_describe(const Model& m, std::int64_t size) {
  std::cout << "model " << architecture_name(m.architecture()) << "\n" << m.describe({1, 3, size, size});
}

int cmd_train(const TrainArgs& a) {
  const Architecture arch = parse_architecture(a.model);
  ModelOptions opts;
  opts.unet_base = a.base;
  opts.seed = a.seed;

  if (a.describe) {
    const std::int64_t size = a.size > 0 ? a.size : 256;
    Model m = build_model(arch, opts);
    m.check_input({1, 3, size, size});
    print_describe(m, size);
    return 0;
  }
  if (a.data.empty() || a.out.empty()) throw ConfigError("train: --data and --out are required");

  const DatasetManifest manifest = read_manifest(manifest_path(a.data));
  if (a.size > 0 && (a.size != manifest.target.height || a.size != manifest.target.width)) {
    throw ConfigError("train: --size " + std::to_string(a.size) + " differs from the manifest size " +
                      std::to_string(manifest.target.height) + "; re-run prepare instead");
  }
  const auto train_set = load_split(manifest, SplitTag::kTrain);
  const auto val_set = load_split(manifest, SplitTag::kVal);
  if (train_set.empty() || val_set.empty()) throw ManifestError("train: manifest needs both train and val entries");

  TrainConfig cfg;
  cfg.architecture = arch;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.adam.learning_rate = a.lr;
  cfg.loss = parse_loss(a.loss);
  cfg.patience = a.patience;
  cfg.seed = a.seed;
  cfg.augment = !a.no_augment;
  cfg.validate();

  const fs::path out = a.out;
  ensure_dir(out);
  std::optional<TrainState> resume;
  TrainHistory previous;
  std::optional<Model> model;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (ck.info.architecture != arch) {
      throw ConfigError("train: checkpoint holds a " + std::string(architecture_name(ck.info.architecture)) +
                        " model, --model is " + a.model);
    }
    if (!a.seed_given) cfg.seed = ck.info.seed;
    resume = TrainState{std::move(ck.adam), static_cast<int>(ck.info.epoch), ck.info.best_val_loss};
    model.emplace(std::move(ck.model));
    if (fs::exists(out / "history.csv")) {
      for (const auto& r : read_history(out / "history.csv").epochs) {
        if (r.epoch <= resume->epoch) previous.epochs.push_back(r);
      }
    }
  } else {
    opts.seed = cfg.seed;
    model.emplace(build_model(arch, opts));
  }
  model->check_input({1, 3, manifest.target.height, manifest.target.width});

  const std::int64_t base = arch == Architecture::kUNet ? model->layer(1)->params()[0].value.dim(0) : 0;
  ordered_json jc;
  jc["command"] = "train";
  jc["data"] = manifest_path(a.data).string();
  jc["model"] = a.model;
  jc["out"] = out.string();
  jc["size"] = manifest.target.height;
  jc["epochs"] = cfg.epochs;
  jc["batch_size"] = cfg.batch_size;
  jc["learning_rate"] = cfg.adam.learning_rate;
  jc["beta1"] = cfg.adam.beta1;
  jc["beta2"] = cfg.adam.beta2;
  jc["adam_eps"] = cfg.adam.eps;
  jc["loss"] = loss_name(cfg.loss);
  jc["patience"] = cfg.patience;
  jc["monitor"] = "val_loss";
  jc["seed"] = cfg.seed;
  jc["augment"] = cfg.augment;
  if (arch == Architecture::kUNet) jc["base"] = base;
  jc["resume"] = a.resume;
  jc["threads"] = env_threads();
  write_config(out / "config.json", jc);

  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) {
    std::printf("epoch %d train_loss %.6f val_loss %.6f val_acc %.6f\n", r.epoch, r.train_loss, r.val_loss,
                r.val_accuracy);
    std::fflush(stdout);
  };
  TrainResult result = train(*model, train_set, val_set, cfg, resume ? &*resume : nullptr, hooks);

  TrainHistory history = previous;
  history.epochs.insert(history.epochs.end(), result.history.epochs.begin(), result.history.epochs.end());
  history.best_epoch = result.state.epoch;
  history.stopped_early = result.history.stopped_early;
  write_history(out / "history.csv", history);

  CheckpointInfo info{arch, cfg.seed, static_cast<std::uint32_t>(result.state.epoch),
                      static_cast<float>(result.state.best_val_loss)};
  save_checkpoint(out / "checkpoint.fseg", *model, result.state.adam, info);
  std::printf("best_epoch %d best_val_loss %.6f stopped_early %s\n", result.state.epoch, result.state.best_val_loss,
              result.history.stopped_early ? "true" : "false");
  return 0;
}

// ---------------------------------------------------------------- predict / evaluate

struct PredictArgs {
  std::string checkpoint, image, out, composite, mask;
  float threshold = 0.5f;
  std::int64_t size = 0;
};

/// Panels [C,H,W] in [0,1], gray panels repeated to RGB, placed left to right.
Image8 composite_row(const std::vector<Tensor>& panels) {
  const std::int64_t h = panels.front().dim(1), w = panels.front().dim(2);
  const auto k = static_cast<std::int64_t>(panels.size());
  Image8 out{w * k, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w * k * h * 3))};
  for (std::int64_t p = 0; p < k; ++p) {
    const Image8 src = to_image8(panels[static_cast<std::size_t>(p)]);
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j)
        for (std::int64_t c = 0; c < 3; ++c) {
          const std::int64_t sc = src.channels == 3 ? c : 0;
          out.pixels[static_cast<std::size_t>((i * w * k + p * w + j) * 3 + c)] =
              src.pixels[static_cast<std::size_t>((i * w + j) * src.channels + sc)];
        }
  }
  return out;
}

int cmd_predict(const PredictArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const std::int64_t size = a.size > 0 ? a.size : size_from_run_config(a.checkpoint).value_or(256);
  const Tensor image = load_image(a.image, {size, size});
  const Tensor x = image.reshaped({1, 3, size, size});
  ck.model.check_input(x.shape());
  const Tensor probs = sigmoid(ck.model.predict(x));

  Image8 mask{size, size, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size))};
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) mask.pixels[i] = probs[i] >= a.threshold ? 255 : 0;
  const fs::path out = a.out;
  ensure_dir(out.parent_path());
  write_png(out, mask);

  if (!a.composite.empty()) {
    std::vector<Tensor> panels{image};
    if (!a.mask.empty()) panels.push_back(load_sample(a.image, a.mask, {size, size}).mask);
    Tensor predicted({1, size, size});
    for (std::size_t i = 0; i < predicted.size(); ++i) predicted[i] = mask.pixels[i] ? 1.0f : 0.0f;
    panels.push_back(predicted);
    write_png(a.composite, composite_row(panels));
  }

  ordered_json cfg;
  cfg["command"] = "predict";
  cfg["checkpoint"] = a.checkpoint;
  cfg["model"] = architecture_name(ck.info.architecture);
  cfg["image"] = a.image;
  cfg["out"] = a.out;
  cfg["threshold"] = a.threshold;
  cfg["size"] = size;
  if (!a.composite.empty()) cfg["composite"] = a.composite;
  if (!a.mask.empty()) cfg["mask"] = a.mask;
  write_config(sidecar_config(out, "predict"), cfg);
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint, data, out, split = "val", loss = "bce";
  std::size_t batch_size = 4;
  float threshold = 0.5f;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const DatasetManifest manifest = read_manifest(manifest_path(a.data));
  std::vector<Sample> samples;
  if (a.split == "train" || a.split == "all") samples = load_split(manifest, SplitTag::kTrain);
  if (a.split == "val" || a.split == "all") {
    auto val = load_split(manifest, SplitTag::kVal);
    samples.insert(samples.end(), std::make_move_iterator(val.begin()), std::make_move_iterator(val.end()));
  }
  if (samples.empty()) throw ManifestError("evaluate: split '" + a.split + "' has no entries");
  ck.model.check_input({1, 3, manifest.target.height, manifest.target.width});
  const MetricsReport report = evaluate(ck.model, samples, parse_loss(a.loss), a.batch_size, a.threshold);

  const fs::path out = a.out;
  ensure_dir(out.parent_path());
  write_text(out, to_json(report));
  std::cout << to_json(report);

  ordered_json cfg;
  cfg["command"] = "evaluate";
  cfg["checkpoint"] = a.checkpoint;
  cfg["model"] = architecture_name(ck.info.architecture);
  cfg["data"] = manifest_path(a.data).string();
  cfg["split"] = a.split;
  cfg["loss"] = a.loss;
  cfg["batch_size"] = a.batch_size;
  cfg["threshold"] = a.threshold;
  cfg["out"] = a.out;
  write_config(sidecar_config(out, "evaluate"), cfg);
  return 0;
}

// ---------------------------------------------------------------- report

struct ReportArgs {
  std::vector<std::string> histories, metrics, labels;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  if (a.histories.empty()) throw ConfigError("report: at least one history file is required");
  if (!a.labels.empty() && a.labels.size() != a.histories.size()) {
    throw ConfigError("report: " + std::to_string(a.labels.size()) + " labels for " +
                      std::to_string(a.histories.size()) + " histories");
  }
  if (!a.labels.empty() && !a.metrics.empty() && a.metrics.size() != a.labels.size()) {
    throw ConfigError("report: " + std::to_string(a.labels.size()) + " labels for " +
                      std::to_string(a.metrics.size()) + " metrics files");
  }
  std::vector<CurveSeries> runs;
  for (std::size_t i = 0; i < a.histories.size(); ++i) {
    runs.push_back({a.labels.empty() ? run_label(a.histories[i]) : a.labels[i], read_history(a.histories[i])});
  }
  std::vector<ComparisonRow> rows;
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    rows.push_back({a.labels.empty() ? run_label(a.metrics[i]) : a.labels[i], read_metrics(a.metrics[i])});
  }
  const fs::path out = a.out;
  ensure_dir(out);
  write_text(out / "curves.svg", curves_svg(runs));
  write_text(out / "comparison.csv", comparison_csv(rows));

  ordered_json cfg;
  cfg["command"] = "report";
  cfg["histories"] = a.histories;
  cfg["metrics"] = a.metrics;
  cfg["labels"] = a.labels;
  cfg["out"] = a.out;
  write_config(out / "config.json", cfg);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flood-area semantic segmentation: U-Net, ResNet-50 and DeepLabv3 from scratch"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Pair images with masks, split, and write a manifest");
  prepare->add_option("--images", prep.images, "Image directory");
  prepare->add_option("--masks", prep.masks, "Mask directory");
  prepare->add_option("--out", prep.out, "Output directory")->required();
  prepare->add_option("--size", prep.size, "Target side length")->check(CLI::PositiveNumber);
  prepare->add_option("--seed", prep.seed, "Split and generator seed");
  prepare->add_option("--split", prep.split, "Train fraction")->check(CLI::Range(0.0, 1.0));
  prepare->add_option("--synthetic", prep.synthetic, "Generate N synthetic samples into --out first");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoint, history and config");
  train_cmd->add_option("--data", tr.data, "Prepared dataset directory or manifest");
  train_cmd->add_option("--model", tr.model, "unet | resnet50 | deeplabv3");
  train_cmd->add_option("--out", tr.out, "Run directory");
  train_cmd->add_option("--epochs", tr.epochs, "Maximum epoch count");
  train_cmd->add_option("--batch-size", tr.batch_size, "Batch size");
  train_cmd->add_option("--lr", tr.lr, "Adam learning rate");
  train_cmd->add_option("--loss", tr.loss, "bce | dice | bce+dice");
  train_cmd->add_option("--patience", tr.patience, "Early-stopping patience");
  auto* seed_opt = train_cmd->add_option("--seed", tr.seed, "Seed for initialisation, shuffling and augmentation");
  train_cmd->add_flag("--no-augment", tr.no_augment, "Disable augmentation");
  train_cmd->add_option("--base", tr.base, "U-Net first-level width");
  train_cmd->add_option("--size", tr.size, "Input side length (for --describe)");
  train_cmd->add_option("--resume", tr.resume, "Continue from a checkpoint");
  train_cmd->add_flag("--describe", tr.describe, "Print the layer graph and parameter count, then exit");

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Write a 0/255 water mask PNG for one image");
  predict->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  predict->add_option("--image", pr.image, "Input image")->required();
  predict->add_option("--out", pr.out, "Output mask PNG")->required();
  predict->add_option("--composite", pr.composite, "Also write input | [ground truth |] prediction as one PNG");
  predict->add_option("--mask", pr.mask, "Ground-truth mask for the composite")->check(CLI::ExistingFile);
  predict->add_option("--threshold", pr.threshold, "Probability threshold")->check(CLI::Range(0.0, 1.0));
  predict->add_option("--size", pr.size, "Input side length (default: run config, else 256)");

  EvaluateArgs ev;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Compute metrics JSON on a prepared dataset");
  evaluate_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  evaluate_cmd->add_option("--data", ev.data, "Prepared dataset directory or manifest")->required();
  evaluate_cmd->add_option("--out", ev.out, "Output metrics JSON")->required();
  evaluate_cmd->add_option("--split", ev.split, "val | train | all")->check(CLI::IsMember({"val", "train", "all"}));
  evaluate_cmd->add_option("--loss", ev.loss, "bce | dice | bce+dice");
  evaluate_cmd->add_option("--batch-size", ev.batch_size, "Batch size");
  evaluate_cmd->add_option("--threshold", ev.threshold, "Probability threshold")->check(CLI::Range(0.0, 1.0));

  ReportArgs rp;
  auto* report = app.add_subcommand("report", "Plot training curves and tabulate metrics");
  report->add_option("--histories", rp.histories, "Comma-separated history.csv files")->delimiter(',')->required();
  report->add_option("--metrics", rp.metrics, "Comma-separated metrics JSON files")->delimiter(',');
  report->add_option("--labels", rp.labels, "Comma-separated run labels")->delimiter(',');
  report->add_option("--out", rp.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*prepare) return cmd_prepare(prep);
    if (*train_cmd) {
      tr.seed_given = seed_opt->count() > 0;
      return cmd_train(tr);
    }
    if (*predict) return cmd_predict(pr);
    if (*evaluate_cmd) return cmd_evaluate(ev);
    if (*report) return cmd_report(rp);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const InputSpecError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const ManifestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const CorruptCheckpoint& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << " (layer " << e.layer() << ")\n";
    return kRuntimeError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kUsageError;
}
