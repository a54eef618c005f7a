#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "comal/bimal/flow.hpp"
#include "comal/costruct/structnet.hpp"
#include "comal/evalcli/metrics.hpp"
#include "comal/losses/losses.hpp"
#include "comal/ndgrad/optim.hpp"
#include "comal/segnet/segnet.hpp"
#include "comal/synthworld/world.hpp"

namespace comal::train {

enum class Regime { kSourceOnly, kEntMin, kBimal, kComal };
Regime parse_regime(const std::string& name);
std::string regime_name(Regime r);

struct TrainConfig {
  std::uint64_t seed = 0;
  std::size_t warmup_epochs = 30;  // source-only epochs before adaptation
  std::size_t epochs = 60;         // adaptation epochs
  std::size_t batch = 8;
  nd::SgdOptions sgd;
  Regime regime = Regime::kSourceOnly;
  losses::LossConfig loss;
  double lambda_entropy = 1e-3;

  world::WorldConfig world;
  std::size_t source_count = 512;
  std::size_t target_count = 512;
  std::size_t eval_count = 128;
  /// Source ground-truth maps used to fit the flow and the structure network.
  std::size_t prior_maps = 512;

  std::size_t flow_epochs = 8;
  double flow_lr = 1e-3;
  std::size_t flow_layers = 6;
  std::size_t flow_hidden = 64;

  std::size_t struct_epochs = 10;
  double struct_lr = 2e-3;
  std::size_t struct_embed = 64;
  std::size_t struct_blocks = 4;
  std::size_t struct_heads = 4;

  void validate() const;
  /// Flat "key = value" text, one entry per line, in a fixed order.
  std::string to_text() const;
  static TrainConfig from_text(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  void set(const std::string& key, const std::string& value);
  std::string hash() const;

  costruct::StructConfig struct_config() const;
  bimal::FlowConfig flow_config() const;
};

/// The small configuration used for tests and the acceptance run: 16x16
/// worlds, 8x8 prior grids and short schedules.
TrainConfig desk_profile(std::uint64_t seed);

struct Datasets {
  world::Dataset source;
  world::Dataset target;
  world::Dataset eval;                     // held-out target-domain scenes
  std::vector<world::LabelMap> prior_maps;  // source ground truths at full resolution
};

/// Deterministic in (cfg.seed, cfg.world and the counts).
Datasets make_datasets(const TrainConfig& cfg);

struct Priors {
  std::optional<bimal::FlowModel> flow;
  std::optional<costruct::StructNet> structnet;
  std::vector<double> q_source;
};

bimal::FlowModel pretrain_flow(const TrainConfig& cfg, const Datasets& data);
costruct::StructNet pretrain_struct(const TrainConfig& cfg, const Datasets& data);
std::vector<double> source_histogram(const Datasets& data);

/// Model files carry their architecture in the archive metadata.
void save_flow(const std::filesystem::path& path, const bimal::FlowModel& flow);
bimal::FlowModel load_flow(const std::filesystem::path& path);
void save_structnet(const std::filesystem::path& path, const costruct::StructNet& net);
costruct::StructNet load_structnet(const std::filesystem::path& path);

/// Metric history row; the same fields appear as CSV columns.
struct EpochRecord {
  std::string phase;
  std::size_t epoch = 0;
  double loss = 0.0;
  double ce_source = 0.0;
  double ce_target = 0.0;
  double entropy = 0.0;
  double nll = 0.0;
  double tau = 0.0;
  double comal_source = 0.0;
  double comal_target = 0.0;
  std::size_t target_skipped = 0;  // iterations with no confident target pixel
  double miou = 0.0;
  double head_iou = 0.0;
  double tail_iou = 0.0;
  std::vector<double> iou;
};

std::string history_csv(const std::vector<EpochRecord>& history);

/// Parameters, SGD momenta, epoch counter, config hash and metric history.
struct Checkpoint {
  seg::SegParams params;
  std::vector<std::vector<double>> velocity;
  std::size_t epoch = 0;
  std::string config_hash;
  std::string phase;
  std::vector<EpochRecord> history;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Plain SGD update of one tensor (see nd::sgd_update).
void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity,
              double lr, double momentum, double weight_decay);

struct PhaseResult {
  Checkpoint checkpoint;
  eval::MetricsReport final_metrics;
};

struct PhaseOptions {
  std::string phase;  // label in the history; also separates RNG streams
  std::size_t epochs = 0;
  /// Written after every epoch; an existing file with the same config hash
  /// and phase is resumed from.
  std::optional<std::filesystem::path> checkpoint;
};

/// Trains the segmenter from `init` under `regime` for opts.epochs epochs,
/// evaluating target mIoU after each.
PhaseResult run_phase(Regime regime, const TrainConfig& cfg, const Datasets& data,
                      const Priors& priors, const seg::SegParams& init, const PhaseOptions& opts);

/// Predictions for every eval scene.
std::vector<world::LabelMap> predict(const seg::SegParams& params, const world::Dataset& data);

struct AblationRow {
  std::string key;    // directory name
  std::string label;  // settings column of the table
  double miou = 0.0;
  double head_iou = 0.0;
  double tail_iou = 0.0;
  std::vector<double> iou;
};

/// Five rows: source-only, flow likelihood, flow likelihood + tau,
/// class-weighted pseudo-label training, and that plus the conditional
/// likelihood loss. Writes everything under `out` and returns the table.
std::vector<AblationRow> ablation_suite(const TrainConfig& cfg, const std::filesystem::path& out);

/// Trains priors and the warm start, then one regime; writes under `out`.
PhaseResult run_experiment(const TrainConfig& cfg, const std::filesystem::path& out);

}  // namespace comal::train
