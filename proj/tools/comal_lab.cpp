// comal-lab: data generation, prior training, adaptation runs and reports.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "comal/bimal/bimal.hpp"
#include "comal/evalcli/render.hpp"
#include "comal/evalcli/report.hpp"
#include "comal/trainer/trainer.hpp"

using namespace comal;
namespace fs = std::filesystem;

namespace {

// Mask files: one line per row; '?' marks an unknown pixel, a digit a known
// class. Whitespace between cells is optional.
std::pair<costruct::BinaryMask, world::LabelMap> read_mask_file(const std::string& path,
                                                                std::size_t H, std::size_t W) {
  std::istringstream in(eval::read_file(path));
  costruct::BinaryMask mask(H, W, 1);
  world::LabelMap known(H, W, 0);
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    std::string cells;
    for (char ch : line) {
      if (!std::isspace(static_cast<unsigned char>(ch))) cells += ch;
    }
    if (cells.empty()) continue;
    if (r >= H || cells.size() != W) {
      throw std::invalid_argument("mask file " + path + ": expected " + std::to_string(H) +
                                  " rows of " + std::to_string(W) + " cells");
    }
    for (std::size_t c = 0; c < W; ++c) {
      const char ch = cells[c];
      if (ch == '?') continue;
      if (ch < '0' || ch >= '0' + static_cast<int>(world::kNumClasses)) {
        throw std::invalid_argument(std::string("mask file: bad cell '") + ch + "'");
      }
      mask.masked[r * W + c] = 0;
      known.labels[r * W + c] = static_cast<std::uint8_t>(ch - '0');
    }
    ++r;
  }
  if (r != H) throw std::invalid_argument("mask file " + path + ": expected " + std::to_string(H) + " rows");
  return {mask, known};
}

std::string label_text(const world::LabelMap& m) {
  std::string s;
  for (std::size_t r = 0; r < m.height; ++r) {
    for (std::size_t c = 0; c < m.width; ++c) s += static_cast<char>('0' + m.at(r, c));
    s += '\n';
  }
  return s;
}

train::TrainConfig load_config(const std::string& path, const std::vector<std::string>& sets,
                               std::optional<std::uint64_t> seed) {
  train::TrainConfig cfg = path.empty() ? train::desk_profile(seed.value_or(0))
                                        : train::TrainConfig::load(path);
  if (seed) cfg.seed = *seed;
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"comal-lab: segmentation domain adaptation with learned label-map priors"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::uint64_t gen_seed = 0;
  std::size_t gen_count = 16, gen_h = 32, gen_w = 32;
  double gen_tail = 1.0;
  std::string gen_domain = "source", gen_out;
  gen->add_option("--seed", gen_seed, "first scene seed");
  gen->add_option("--count", gen_count, "number of scenes");
  gen->add_option("--domain", gen_domain, "source|target");
  gen->add_option("--height", gen_h);
  gen->add_option("--width", gen_w);
  gen->add_option("--lambda,--tail-lambda", gen_tail, "scale of tail-class frequency");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train-flow
  auto* tflow = app.add_subcommand("train-flow", "Fit the flow prior on a dataset's label maps");
  std::string tf_data, tf_out;
  bimal::FlowTrainOptions tf_opts;
  bimal::BimalSettings tf_settings;
  std::size_t tf_layers = 6, tf_hidden = 64;
  tflow->add_option("--data", tf_data, "dataset directory")->required();
  tflow->add_option("--out", tf_out, "flow checkpoint path")->required();
  tflow->add_option("--epochs", tf_opts.epochs);
  tflow->add_option("--lr", tf_opts.lr);
  tflow->add_option("--seed", tf_opts.seed);
  tflow->add_option("--stride", tf_settings.stride);
  tflow->add_option("--eps", tf_settings.eps);
  tflow->add_option("--layers", tf_layers);
  tflow->add_option("--hidden", tf_hidden);

  // uds
  auto* uds = app.add_subcommand("uds", "Estimate the unaligned domain score of predictions");
  std::string uds_flow, uds_data, uds_model, uds_form = "bilateral";
  bimal::BimalSettings uds_settings;
  uds->add_option("--flow", uds_flow, "flow checkpoint")->required();
  uds->add_option("--data", uds_data, "dataset directory")->required();
  uds->add_option("--model", uds_model, "segmenter checkpoint; ground truth is scored if omitted");
  uds->add_option("--sigma1", uds_settings.sigma1);
  uds->add_option("--sigma2", uds_settings.sigma2);
  uds->add_option("--tau-form", uds_form, "paper|bilateral");
  uds->add_option("--stride", uds_settings.stride);
  uds->add_option("--eps", uds_settings.eps);

  // train-struct
  auto* tstruct = app.add_subcommand("train-struct", "Fit the conditional structure network");
  std::string ts_data, ts_out;
  costruct::StructTrainOptions ts_opts;
  std::size_t ts_stride = 2, ts_embed = 64, ts_blocks = 4, ts_heads = 4;
  tstruct->add_option("--data", ts_data, "dataset directory")->required();
  tstruct->add_option("--out", ts_out, "checkpoint path")->required();
  tstruct->add_option("--epochs", ts_opts.epochs);
  tstruct->add_option("--lr", ts_opts.lr);
  tstruct->add_option("--seed", ts_opts.seed);
  tstruct->add_option("--stride", ts_stride, "label subsampling stride");
  tstruct->add_option("--embed", ts_embed);
  tstruct->add_option("--blocks", ts_blocks);
  tstruct->add_option("--heads", ts_heads);

  // sample
  auto* samp = app.add_subcommand("sample", "Decode label maps with the structure network");
  std::string sm_model, sm_mask, sm_out;
  double sm_temp = 1.0;
  std::uint64_t sm_seed = 0;
  std::size_t sm_count = 1;
  samp->add_option("--model", sm_model, "structure network checkpoint")->required();
  samp->add_option("--mask-file", sm_mask, "known pixels ('?' = unknown); all unknown if omitted");
  samp->add_option("--temp", sm_temp, "sampling temperature; 0 decodes greedily");
  samp->add_option("--seed", sm_seed);
  samp->add_option("--count", sm_count);
  samp->add_option("--out", sm_out, "write a .ppm grid or a text file instead of stdout");

  // run
  auto* run = app.add_subcommand("run", "Warm up, then adapt with one regime");
  std::string run_config, run_regime, run_out;
  std::vector<std::string> run_sets;
  std::optional<std::uint64_t> run_seed;
  run->add_option("--config", run_config, "config file (desk profile if omitted)");
  run->add_option("--regime", run_regime, "source-only|entmin|bimal|comal");
  run->add_option("--seed", run_seed);
  run->add_option("--set", run_sets, "key=value overrides");
  run->add_option("--out", run_out, "run directory")->required();

  // ablation
  auto* abl = app.add_subcommand("ablation", "Run the five-row ablation suite");
  std::string abl_config, abl_out;
  std::vector<std::string> abl_sets;
  std::optional<std::uint64_t> abl_seed;
  abl->add_option("--config", abl_config, "config file (desk profile if omitted)");
  abl->add_option("--seed", abl_seed);
  abl->add_option("--set", abl_sets, "key=value overrides");
  abl->add_option("--out", abl_out, "run directory")->required();

  // report
  auto* rep = app.add_subcommand("report", "Summarize a run directory");
  std::string rep_run;
  rep->add_option("--run", rep_run, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      world::WorldConfig cfg;
      cfg.height = gen_h;
      cfg.width = gen_w;
      cfg.tail_lambda = gen_tail;
      const auto data = world::generate_dataset(gen_seed, gen_count, world::parse_domain(gen_domain), cfg);
      world::save_dataset(gen_out, data);
      const auto hist = world::class_histogram(data.label_maps());
      for (std::size_t c = 0; c < hist.size(); ++c) {
        std::printf("%-10s %.4f\n", std::string(world::class_name(c)).c_str(), hist[c]);
      }
    } else if (tflow->parsed()) {
      const auto data = world::load_dataset(tf_data);
      const auto labels = data.label_maps();
      auto fc = bimal::flow_config_for(data.config.height, data.config.width, tf_settings);
      fc.layers = tf_layers;
      fc.hidden = tf_hidden;
      bimal::FlowModel flow(fc, tf_opts.seed ^ 0xf1);
      const auto rep = bimal::train_flow(flow, bimal::relaxed_codes(labels, tf_settings), tf_opts);
      for (std::size_t e = 0; e < rep.epoch_nll.size(); ++e) {
        std::printf("epoch %zu nll %.4f\n", e + 1, rep.epoch_nll[e]);
      }
      train::save_flow(tf_out, flow);
    } else if (uds->parsed()) {
      uds_settings.form = bimal::parse_tau_form(uds_form);
      const auto flow = train::load_flow(uds_flow);
      const auto data = world::load_dataset(uds_data);
      std::vector<const world::Image*> imgs;
      for (const auto& s : data.samples) imgs.push_back(&s.image);
      nd::Tensor y;
      if (uds_model.empty()) {
        y = bimal::one_hot(data.label_maps(), world::kNumClasses);
      } else {
        nd::NoGradGuard ng;
        y = seg::forward(train::load_checkpoint(uds_model).params, seg::images_to_tensor(imgs)).probs;
      }
      std::printf("uds %.6f\n", bimal::uds_estimate(flow, bimal::images_nhwc(imgs), y, uds_settings));
    } else if (tstruct->parsed()) {
      const auto data = world::load_dataset(ts_data);
      std::vector<world::LabelMap> grids;
      for (const auto& m : data.label_maps()) grids.push_back(world::subsample(m, ts_stride));
      costruct::StructConfig sc;
      sc.height = grids.front().height;
      sc.width = grids.front().width;
      sc.embed = ts_embed;
      sc.blocks = ts_blocks;
      sc.heads = ts_heads;
      sc.mlp_hidden = 2 * ts_embed;
      auto net = costruct::init_structnet(ts_opts.seed ^ 0x57, sc);
      const auto rep = costruct::train_struct(net, grids, ts_opts);
      for (std::size_t e = 0; e < rep.epoch_nll.size(); ++e) {
        std::printf("epoch %zu masked-nll %.4f\n", e + 1, rep.epoch_nll[e]);
      }
      train::save_structnet(ts_out, net);
    } else if (samp->parsed()) {
      const auto net = train::load_structnet(sm_model);
      const std::size_t H = net.config.height, W = net.config.width;
      costruct::BinaryMask mask(H, W, 1);
      world::LabelMap known(H, W, 0);
      if (!sm_mask.empty()) std::tie(mask, known) = read_mask_file(sm_mask, H, W);
      const std::vector<costruct::BinaryMask> masks(sm_count, mask);
      const std::vector<world::LabelMap> knowns(sm_count, known);
      const auto out = costruct::sample_many(net, masks, knowns, sm_temp, sm_seed);
      std::string text;
      std::vector<eval::Raster> tiles;
      for (const auto& m : out) {
        text += label_text(m) + "violations " +
                std::to_string(world::validate_structure(m).size()) + "\n\n";
        tiles.push_back(eval::upscale(eval::colorize(m), 8));
      }
      if (sm_out.empty()) {
        std::cout << text;
      } else if (fs::path(sm_out).extension() == ".ppm") {
        eval::write_file(sm_out, eval::encode_ppm(eval::tile({tiles}, 2)));
      } else {
        eval::write_file(sm_out, text);
      }
    } else if (run->parsed()) {
      auto cfg = load_config(run_config, run_sets, run_seed);
      if (!run_regime.empty()) cfg.regime = train::parse_regime(run_regime);
      const auto r = train::run_experiment(cfg, run_out);
      std::printf("%s miou %.4f head %.4f tail %.4f\n", train::regime_name(cfg.regime).c_str(),
                  r.final_metrics.miou, r.final_metrics.head_iou, r.final_metrics.tail_iou);
    } else if (abl->parsed()) {
      const auto cfg = load_config(abl_config, abl_sets, abl_seed);
      for (const auto& r : train::ablation_suite(cfg, abl_out)) {
        std::printf("%-14s miou %.4f head %.4f tail %.4f\n", r.key.c_str(), r.miou, r.head_iou,
                    r.tail_iou);
      }
    } else if (rep->parsed()) {
      const auto files = eval::report(rep_run);
      std::cout << eval::read_file(files.ablation_md.string());
      std::cout << "wrote " << files.summary_csv.string() << ", " << files.ablation_csv.string()
                << ", " << files.ablation_md.string() << ", " << files.samples_ppm.string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "comal-lab: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
