#include "comal/evalcli/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "comal/evalcli/metrics.hpp"
#include "comal/evalcli/render.hpp"
#include "comal/ndgrad/serialize.hpp"
#include "json.hpp"

namespace comal::eval {

namespace {

namespace fs = std::filesystem;

struct RegimeEntry {
  std::string key;
  std::string label;
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

std::vector<world::LabelMap> load_predictions(const fs::path& path) {
  const nd::Tensor t = nd::load_tensor(path);
  if (t.rank() != 3) throw nd::FormatError(path.string() + ": expected [N,H,W] predictions");
  const std::size_t N = t.shape()[0], H = t.shape()[1], W = t.shape()[2];
  std::vector<world::LabelMap> out(N, world::LabelMap(H, W));
  const auto d = t.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t p = 0; p < H * W; ++p) {
      const double v = d[n * H * W + p];
      if (v < 0.0 || v >= 256.0) throw nd::FormatError(path.string() + ": label out of range");
      out[n].labels[p] = static_cast<std::uint8_t>(v);
    }
  }
  return out;
}

}  // namespace

ReportFiles report(const fs::path& run_dir, const ReportOptions& opts) {
  const fs::path manifest_path = run_dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw std::runtime_error("report: missing input files:\n  " + manifest_path.string());
  }
  const auto manifest = nlohmann::json::parse(read_file(manifest_path.string()));
  std::vector<RegimeEntry> regimes;
  for (const auto& r : manifest.at("regimes")) {
    regimes.push_back({r.at("key").get<std::string>(), r.at("label").get<std::string>()});
  }
  if (regimes.empty()) throw std::runtime_error("report: manifest lists no regimes");
  const auto tail = manifest.at("tail_classes").get<std::vector<std::size_t>>();

  std::vector<fs::path> missing;
  auto need = [&](const fs::path& p) {
    if (!fs::exists(p)) missing.push_back(p);
  };
  const fs::path eval_dir = run_dir / "data" / "eval";
  for (const char* f : {"manifest.json", "images.ndg", "labels.ndg"}) need(eval_dir / f);
  for (const auto& r : regimes) {
    for (const char* f : {"history.csv", "checkpoint.ckpt", "predictions.ndg"}) need(run_dir / r.key / f);
  }
  if (!missing.empty()) {
    std::string msg = "report: missing input files:";
    for (const auto& p : missing) msg += "\n  " + p.string();
    throw std::runtime_error(msg);
  }

  const world::Dataset eval = world::load_dataset(eval_dir);
  const std::vector<world::LabelMap> gts = eval.label_maps();
  std::vector<std::vector<world::LabelMap>> preds;
  std::vector<MetricsReport> metrics;
  for (const auto& r : regimes) {
    preds.push_back(load_predictions(run_dir / r.key / "predictions.ndg"));
    if (preds.back().size() != gts.size()) {
      throw std::runtime_error("report: " + r.key + " has " + std::to_string(preds.back().size()) +
                               " predictions for " + std::to_string(gts.size()) + " scenes");
    }
    metrics.push_back(miou(preds.back(), gts, world::kNumClasses, tail));
  }

  const fs::path out = run_dir / "report";
  fs::create_directories(out);
  ReportFiles files{out / "summary.csv", out / "ablation.csv", out / "ablation.md",
                    out / "samples.ppm"};

  // metric rows x regime columns
  std::string summary = "metric";
  for (const auto& r : regimes) summary += "," + r.key;
  summary += "\n";
  auto row = [&](const std::string& name, auto pick) {
    summary += name;
    for (const auto& m : metrics) summary += "," + num(pick(m));
    summary += "\n";
  };
  row("miou", [](const MetricsReport& m) { return m.miou; });
  row("head_iou", [](const MetricsReport& m) { return m.head_iou; });
  row("tail_iou", [](const MetricsReport& m) { return m.tail_iou; });
  for (std::size_t c = 0; c < world::kNumClasses; ++c) {
    row("iou_" + std::string(world::class_name(c)), [c](const MetricsReport& m) { return m.iou[c]; });
  }
  write_file(files.summary_csv.string(), summary);

  std::string tail_names;
  for (std::size_t c : tail) {
    tail_names += (tail_names.empty() ? "" : " ") + std::string(world::class_name(c));
  }
  std::string csv = "key,label,miou,head_iou,tail_iou,tail_classes\n";
  std::string md = "| Settings | mIoU | head IoU | tail IoU |\n|---|---:|---:|---:|\n";
  for (std::size_t i = 0; i < regimes.size(); ++i) {
    const auto& m = metrics[i];
    csv += regimes[i].key + "," + regimes[i].label + "," + num(m.miou) + "," + num(m.head_iou) +
           "," + num(m.tail_iou) + "," + tail_names + "\n";
    md += "| " + regimes[i].label + " | " + pct(m.miou) + " | " + pct(m.head_iou) + " | " +
          pct(m.tail_iou) + " |\n";
  }
  md += "\nTail classes: " + tail_names + ". Scenes evaluated: " + std::to_string(gts.size()) + ".\n";
  write_file(files.ablation_csv.string(), csv);
  write_file(files.ablation_md.string(), md);

  // One row per scene: input, ground truth, then each regime's prediction.
  std::vector<std::vector<Raster>> grid;
  const std::size_t scenes = std::min(opts.sample_scenes, gts.size());
  for (std::size_t s = 0; s < scenes; ++s) {
    std::vector<Raster> r{upscale(to_raster(eval.samples[s].image), opts.scale),
                          upscale(colorize(gts[s]), opts.scale)};
    for (const auto& p : preds) r.push_back(upscale(colorize(p[s]), opts.scale));
    grid.push_back(std::move(r));
  }
  write_file(files.samples_ppm.string(), encode_ppm(tile(grid, 2)));
  return files;
}

}  // namespace comal::eval
