#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "floodseg/metrics.hpp"
#include "floodseg/train.hpp"

namespace floodseg {

/// Reads a metrics JSON written by to_json. Throws ManifestError on a missing
/// or non-numeric key.
MetricsReport read_metrics(const std::filesystem::path& file);

struct ComparisonRow {
  std::string model;
  MetricsReport metrics;
};

/// Header model,val_loss,accuracy,precision,recall,f1; values with 6 decimals.
std::string comparison_csv(std::span<const ComparisonRow> rows);

struct CurveSeries {
  std::string label;
  TrainHistory history;
};

/// Two panels (loss, accuracy) against epoch. Each run contributes a solid
/// train polyline and a dashed val polyline; axes span all runs.
std::string curves_svg(std::span<const CurveSeries> runs);

/// Default label for a run file: its parent directory name, else its stem.
std::string run_label(const std::filesystem::path& file);

}  // namespace floodseg
