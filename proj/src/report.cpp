#include "floodseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "floodseg/error.hpp"

namespace floodseg {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Panel {
  double x0, y0, width, height;  // plot area in SVG pixels
  double max_epoch;
  double ymin, ymax;

  double px(double epoch) const { return x0 + (max_epoch <= 1 ? 0.0 : (epoch - 1) / (max_epoch - 1) * width); }
  double py(double v) const { return y0 + height - (v - ymin) / (ymax - ymin) * height; }
};

void draw_axes(std::string& svg, const Panel& p, const std::string& title) {
  svg += "<g class=\"axes\">\n";
  svg += "<rect x=\"" + fmt("%.1f", p.x0) + "\" y=\"" + fmt("%.1f", p.y0) + "\" width=\"" + fmt("%.1f", p.width) +
         "\" height=\"" + fmt("%.1f", p.height) + "\" fill=\"none\" stroke=\"#444\"/>\n";
  svg += "<text x=\"" + fmt("%.1f", p.x0 + p.width / 2) + "\" y=\"" + fmt("%.1f", p.y0 - 10) +
         "\" text-anchor=\"middle\" font-size=\"14\">" + title + "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = p.ymin + (p.ymax - p.ymin) * i / 4.0;
    svg += "<text x=\"" + fmt("%.1f", p.x0 - 6) + "\" y=\"" + fmt("%.1f", p.py(v) + 4) +
           "\" text-anchor=\"end\" font-size=\"10\">" + fmt("%.3f", v) + "</text>\n";
  }
  svg += "<text x=\"" + fmt("%.1f", p.x0) + "\" y=\"" + fmt("%.1f", p.y0 + p.height + 16) +
         "\" text-anchor=\"middle\" font-size=\"10\">1</text>\n";
  svg += "<text x=\"" + fmt("%.1f", p.x0 + p.width) + "\" y=\"" + fmt("%.1f", p.y0 + p.height + 16) +
         "\" text-anchor=\"middle\" font-size=\"10\">" + fmt("%.0f", p.max_epoch) + "</text>\n";
  svg += "<text x=\"" + fmt("%.1f", p.x0 + p.width / 2) + "\" y=\"" + fmt("%.1f", p.y0 + p.height + 30) +
         "\" text-anchor=\"middle\" font-size=\"11\">epoch</text>\n";
  svg += "</g>\n";
}

void draw_series(std::string& svg, const Panel& p, const TrainHistory& h, bool loss, bool val, const char* colour,
                 const std::string& label) {
  svg += "<polyline class=\"" + std::string(val ? "val" : "train") + "\" data-run=\"" + escape_xml(label) +
         "\" fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"1.5\"";
  if (val) svg += " stroke-dasharray=\"5,3\"";
  svg += " points=\"";
  bool first = true;
  for (const auto& r : h.epochs) {
    const double v = loss ? (val ? r.val_loss : r.train_loss) : (val ? r.val_accuracy : r.train_accuracy);
    if (!first) svg += ' ';
    first = false;
    svg += fmt("%.2f", p.px(r.epoch)) + "," + fmt("%.2f", p.py(v));
  }
  svg += "\"/>\n";
}

}  // namespace

MetricsReport read_metrics(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open metrics '" + file.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ManifestError(file.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  MetricsReport r;
  const std::pair<const char*, double*> keys[] = {{"accuracy", &r.accuracy}, {"precision", &r.precision},
                                                   {"recall", &r.recall},     {"f1", &r.f1},
                                                   {"iou", &r.iou},           {"dice", &r.dice},
                                                   {"loss", &r.loss}};
  for (const auto& [key, dst] : keys) {
    if (!j.contains(key) || !j[key].is_number()) {
      throw ManifestError(file.string() + ": missing numeric key '" + key + "'");
    }
    *dst = j[key].get<double>();
  }
  return r;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::string out = "model,val_loss,accuracy,precision,recall,f1\n";
  char line[256];
  for (const auto& row : rows) {
    const auto& m = row.metrics;
    std::snprintf(line, sizeof line, ",%.6f,%.6f,%.6f,%.6f,%.6f\n", m.loss, m.accuracy, m.precision, m.recall, m.f1);
    out += row.model + line;
  }
  return out;
}

std::string curves_svg(std::span<const CurveSeries> runs) {
  if (runs.empty()) throw ConfigError("curves_svg: no runs");
  double max_epoch = 1, loss_max = 0, loss_min = std::numeric_limits<double>::infinity();
  double acc_min = std::numeric_limits<double>::infinity(), acc_max = 0;
  for (const auto& run : runs) {
    for (const auto& r : run.history.epochs) {
      max_epoch = std::max(max_epoch, static_cast<double>(r.epoch));
      loss_min = std::min({loss_min, r.train_loss, r.val_loss});
      loss_max = std::max({loss_max, r.train_loss, r.val_loss});
      acc_min = std::min({acc_min, r.train_accuracy, r.val_accuracy});
      acc_max = std::max({acc_max, r.train_accuracy, r.val_accuracy});
    }
  }
  if (!std::isfinite(loss_min)) loss_min = 0, acc_min = 0;
  auto pad = [](double& lo, double& hi) {
    if (hi - lo < 1e-9) {
      lo -= 0.5;
      hi += 0.5;
    }
  };
  loss_min = std::min(loss_min, 0.0);
  acc_max = std::max(acc_max, 1.0);
  pad(loss_min, loss_max);
  pad(acc_min, acc_max);

  const double panel_w = 400, panel_h = 260, margin = 60;
  const double total_w = 2 * (panel_w + 2 * margin);
  const double legend_h = 20.0 * static_cast<double>(runs.size()) + 20;
  const double total_h = panel_h + 2 * margin + legend_h;
  const Panel loss_panel{margin, margin, panel_w, panel_h, max_epoch, loss_min, loss_max};
  const Panel acc_panel{3 * margin + panel_w, margin, panel_w, panel_h, max_epoch, acc_min, acc_max};

  std::string svg = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt("%.0f", total_w) + "\" height=\"" +
         fmt("%.0f", total_h) + "\" viewBox=\"0 0 " + fmt("%.0f", total_w) + " " + fmt("%.0f", total_h) +
         "\" font-family=\"sans-serif\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  draw_axes(svg, loss_panel, "Training and Validation Loss");
  draw_axes(svg, acc_panel, "Training and Validation Accuracy");
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const char* colour = kPalette[i % std::size(kPalette)];
    svg += "<g class=\"panel-loss\">\n";
    draw_series(svg, loss_panel, runs[i].history, true, false, colour, runs[i].label);
    draw_series(svg, loss_panel, runs[i].history, true, true, colour, runs[i].label);
    svg += "</g>\n<g class=\"panel-accuracy\">\n";
    draw_series(svg, acc_panel, runs[i].history, false, false, colour, runs[i].label);
    draw_series(svg, acc_panel, runs[i].history, false, true, colour, runs[i].label);
    svg += "</g>\n";
    const double ly = panel_h + 2 * margin + 20.0 * static_cast<double>(i);
    svg += "<text x=\"" + fmt("%.0f", margin) + "\" y=\"" + fmt("%.0f", ly) + "\" font-size=\"12\" fill=\"" +
           colour + "\">" + escape_xml(runs[i].label) + " (solid: train, dashed: val)</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::string run_label(const std::filesystem::path& file) {
  const auto parent = file.parent_path().filename().string();
  if (!parent.empty() && parent != "." && parent != "..") return parent;
  return file.stem().string();
}

}  // namespace floodseg
