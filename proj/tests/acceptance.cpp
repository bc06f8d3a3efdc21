// Acceptance harness: one PASS/FAIL line per criterion.
//   floodseg_acceptance                      all criteria
//   floodseg_acceptance --criterion N [--model unet|resnet50|deeplabv3]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>

#include "checks.hpp"
#include "floodseg/models.hpp"
#include "floodseg/train.hpp"

using namespace floodseg;
namespace fs = std::filesystem;

namespace {

constexpr int kSkip = 77;

struct Outcome {
  bool pass;
  bool skipped = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int report(int id, const std::string& label, const Outcome& o, double secs, double limit) {
  if (o.skipped) {
    std::printf("SKIP criterion %d%s: %s\n", id, label.c_str(), o.detail.c_str());
    return kSkip;
  }
  const bool in_time = secs <= limit;
  const bool pass = o.pass && in_time;
  std::printf("%s criterion %d%s: %s [%.1f s, limit %.0f s%s]\n", pass ? "PASS" : "FAIL", id, label.c_str(),
              o.detail.c_str(), secs, limit, in_time ? "" : ", over time");
  std::fflush(stdout);
  return pass ? 0 : 1;
}

int timed(int id, const std::string& label, double limit, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, false, std::string("exception: ") + e.what()};
  }
  return report(id, label, o, seconds_since(t0), limit);
}

fs::path workdir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("floodseg_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string grad_line(const char* name, const oracle::GradCheck& g) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s max_rel %.2e max_abs %.2e (%zu comps)%s; ", name, g.max_rel_error,
                g.max_abs_error, g.components,
                g.pass ? "" : (" worst " + g.worst).c_str());
  return buf;
}

Outcome gradients() {
  Outcome o{true};
  const std::pair<const char*, oracle::GradCheck> parts[] = {
      {"conv2d d=1", checks::conv2d_gradients(20, 101, {1})},
      {"conv2d d=2", checks::conv2d_gradients(20, 102, {2})},
      {"conv2d d=6", checks::conv2d_gradients(20, 106, {6})},
      {"conv_transpose2d", checks::conv_transpose2d_gradients(20, 103)},
      {"batchnorm2d", checks::batchnorm2d_gradients(20, 104)},
      {"bce", checks::bce_gradients(20, 105)},
      {"dice", checks::dice_gradients(20, 107)},
  };
  for (const auto& [name, g] : parts) {
    o.pass = o.pass && g.pass;
    o.detail += grad_line(name, g);
  }
  return o;
}

Outcome from(const checks::Result& r) { return {r.pass, false, r.detail}; }

Outcome overfit(Architecture arch) {
  const checks::OverfitOutcome r = checks::overfit(arch, 200, 8, 64, 64, std::getenv("FLOODSEG_VERBOSE") != nullptr);
  char buf[200];
  std::snprintf(buf, sizeof buf, "best train acc %.4f (>= 0.99), train IoU %.4f (>= 0.9) after %d epochs",
                r.best_train_accuracy, r.train_iou, r.epochs);
  return {r.pass, false, buf};
}

Outcome determinism(const fs::path& cli) {
  Outcome o{true};
  const checks::Result parts[] = {
      checks::cli_determinism(cli, workdir("determinism")),
      checks::checkpoint_roundtrip(Architecture::kUNet, 64, 64, 10),
      checks::checkpoint_roundtrip(Architecture::kResNet50, 64, 64, 10),
      checks::checkpoint_roundtrip(Architecture::kDeepLabV3, 64, 64, 10),
      checks::resume_equivalence(workdir("resume")),
  };
  for (const auto& r : parts) {
    o.pass = o.pass && r.pass;
    o.detail += r.detail + "; ";
  }
  return o;
}

Outcome pipeline() {
  Outcome o{true};
  const checks::Result parts[] = {
      checks::pipeline_fuzz(40, 7, workdir("fuzz")),
      checks::geometric_consistency(200, 8),
      checks::manifest_split_290(workdir("manifest290")),
  };
  for (const auto& r : parts) {
    o.pass = o.pass && r.pass;
    o.detail += r.detail + "; ";
  }
  return o;
}

Outcome flood_dataset(const fs::path& cli) {
  const char* root = std::getenv("FLOODSEG_FLOOD_DATA");
  if (!root || !*root) return {false, true, "set FLOODSEG_FLOOD_DATA to a directory with images/ and masks/"};
  const fs::path work = workdir("flood");
  const fs::path data(root);
  auto r = checks::run_command(checks::quote(cli) + " prepare --images " + checks::quote(data / "images") +
                               " --masks " + checks::quote(data / "masks") + " --size 256 --seed 0 --out " +
                               checks::quote(work / "data"));
  if (r.code != 0) return {false, false, "prepare failed: " + r.out};
  r = checks::run_command(checks::quote(cli) + " train --data " + checks::quote(work / "data") +
                          " --model deeplabv3 --epochs 100 --seed 0 --out " + checks::quote(work / "run"));
  if (r.code != 0) return {false, false, "train failed: " + r.out.substr(r.out.size() > 500 ? r.out.size() - 500 : 0)};
  const TrainHistory h = read_history(work / "run" / "history.csv");
  const double acc = h.epochs[static_cast<std::size_t>(h.best_epoch - 1)].val_accuracy;
  char buf[160];
  std::snprintf(buf, sizeof buf, "best-epoch val accuracy %.4f (>= 0.85) at epoch %d of %zu", acc, h.best_epoch,
                h.epochs.size());
  return {acc >= 0.85, false, buf};
}

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  std::string model;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--criterion") && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else if (!std::strcmp(argv[i], "--model") && i + 1 < argc) {
      model = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--criterion N [--model NAME]]\n", argv[0]);
      return 2;
    }
  }
  const fs::path cli = FLOODSEG_CLI;
  const bool all = only == 0;
  int failures = 0, last = 0;
  auto run = [&](int id, const std::string& label, double limit, const std::function<Outcome()>& body) {
    last = timed(id, label, limit, body);
    failures += last == 1;
  };

  if (all || only == 1) run(1, "", 60, gradients);
  if (all || only == 2) run(2, "", 10, [] { return from(checks::metric_oracle(1000, 2024)); });
  if (all || only == 3) run(3, "", 60, [&] { return from(checks::shape_contracts(cli, {64, 128, 256})); });
  if (all || only == 4) {
    for (Architecture arch : {Architecture::kUNet, Architecture::kResNet50, Architecture::kDeepLabV3}) {
      const std::string name(architecture_name(arch));
      if (!model.empty() && model != name) continue;
      run(4, " [" + name + "]", 900, [arch] { return overfit(arch); });
    }
  }
  if (all || only == 5) run(5, "", 1, [] { return from(checks::early_stopping_trace()); });
  if (all || only == 6) run(6, "", 300, [&] { return determinism(cli); });
  if (all || only == 7) run(7, "", 30, pipeline);
  if (all || only == 8) run(8, "", 1e9, [&] { return flood_dataset(cli); });

  if (failures > 0) return 1;
  return !all && last == kSkip ? kSkip : 0;
}
