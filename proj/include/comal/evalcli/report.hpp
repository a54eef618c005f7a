#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace comal::eval {

struct ReportOptions {
  std::size_t sample_scenes = 4;  // rows of the qualitative grid
  std::size_t scale = 4;          // pixel enlargement in the grid
};

struct ReportFiles {
  std::filesystem::path summary_csv;
  std::filesystem::path ablation_csv;
  std::filesystem::path ablation_md;
  std::filesystem::path samples_ppm;
};

/// Reads a run directory (manifest.json, data/eval, and per regime
/// history.csv, checkpoint.ckpt, predictions.ndg) and writes report/ inside
/// it. Metrics are recomputed from the stored predictions. Deterministic:
/// rerunning produces identical bytes. Throws listing every missing input.
ReportFiles report(const std::filesystem::path& run_dir, const ReportOptions& opts = {});

}  // namespace comal::eval
