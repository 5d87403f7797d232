// rine: train, evaluate and inspect the detector head from the command line.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "rine/container.hpp"
#include "rine/data.hpp"
#include "rine/head.hpp"
#include "rine/kernels.hpp"
#include "rine/metrics.hpp"
#include "rine/trainer.hpp"
#include "rine/vit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw rine::LoadError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw rine::LoadError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw rine::Error("cannot write " + path.string());
  out << text;
}

std::string with_commas(std::uint64_t v) {
  std::string digits = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i > 0 && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return out;
}

// "name=dir" or a bare directory named after its last component.
std::vector<std::pair<std::string, fs::path>> parse_dataset_args(const std::vector<std::string>& args) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& a : args) {
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(0, eq), a.substr(eq + 1));
    } else {
      fs::path p(a);
      const auto name = (p.has_filename() ? p : p.parent_path()).filename().string();
      out.emplace_back(name, p);
    }
  }
  return out;
}

// Flags left unset keep the value from the config file, then the default.
struct TrainFlags {
  std::string config;
  std::optional<std::size_t> batch_size, epochs, depth, projected;
  std::optional<double> lr, xi, tau, dropout, weight_decay, grad_clip;
  std::optional<std::uint64_t> seed;
  bool no_tie = false, no_contrastive = false, last_block_only = false;
  bool no_augment = false, cache_features = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON training config");
    cmd->add_option("--batch-size", batch_size);
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--lr", lr);
    cmd->add_option("--xi", xi, "contrastive weight");
    cmd->add_option("--tau", tau, "contrastive temperature");
    cmd->add_option("--depth", depth, "layers per projection network");
    cmd->add_option("--projected", projected, "projection width");
    cmd->add_option("--dropout", dropout);
    cmd->add_option("--weight-decay", weight_decay);
    cmd->add_option("--grad-clip", grad_clip);
    cmd->add_option("--seed", seed);
    cmd->add_flag("--no-tie", no_tie, "uniform block weights instead of the importance estimator");
    cmd->add_flag("--no-contrastive", no_contrastive, "same as xi = 0");
    cmd->add_flag("--last-block-only", last_block_only, "use only the final block's CLS token");
    cmd->add_flag("--no-augment", no_augment, "centre crop only during training");
    cmd->add_flag("--cache-features", cache_features, "encode each training image once (needs --no-augment)");
  }

  rine::TrainConfig resolve() const {
    rine::TrainConfig c;
    if (!config.empty()) c = rine::TrainConfig::from_json(read_json(config));
    if (batch_size) c.batch_size = *batch_size;
    if (epochs) c.epochs = *epochs;
    if (lr) c.lr = *lr;
    if (xi) c.loss.xi = *xi;
    if (tau) c.loss.tau = *tau;
    if (depth) c.head.depth = *depth;
    if (projected) c.head.projected = *projected;
    if (dropout) c.head.dropout = *dropout;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (grad_clip) c.grad_clip = *grad_clip;
    if (seed) c.seed = *seed;
    if (no_tie) c.head.use_tie = false;
    if (no_contrastive) c.loss.xi = 0.0;
    if (last_block_only) c.head.last_block_only = true;
    if (no_augment) c.augment = false;
    if (cache_features) c.cache_features = true;
    return c;
  }
};

struct PerturbFlags {
  std::string kind;
  rine::PerturbConfig config;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--kind", kind, "blur, crop, compress, noise or combined")->required();
    cmd->add_option("--probability", config.probability, "chance of applying each perturbation");
    cmd->add_option("--blur-sigma-max", config.blur_sigma_max);
    cmd->add_option("--crop-fraction", config.crop_fraction);
    cmd->add_option("--jpeg-quality-min", config.jpeg_quality_min);
    cmd->add_option("--jpeg-quality-max", config.jpeg_quality_max);
    cmd->add_option("--noise-sigma-min", config.noise_sigma_min);
    cmd->add_option("--noise-sigma-max", config.noise_sigma_max);
  }
};

int finish_report(const rine::EvalReport& report, const fs::path& out, const json& resolved) {
  const auto j = rine::report_to_json(report);
  const auto csv = rine::report_to_csv(report);
  if (!out.empty()) {
    write_text(out / "report.json", j.dump(2) + "\n");
    write_text(out / "report.csv", csv);
    write_text(out / "eval_config.json", resolved.dump(2) + "\n");
  }
  std::cout << csv;
  bool skipped = false;
  for (const auto& d : report.datasets) skipped = skipped || d.skipped_files > 0;
  return report.ok() && !skipped ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("rine"));
  if (const char* env = std::getenv("RINE_THREADS")) {
    try {
      const int threads = std::stoi(env);
      if (threads < 1) throw std::invalid_argument(env);
      rine::kernels::set_num_threads(threads);
    } catch (const std::exception&) {
      std::cerr << "RINE_THREADS must be a positive integer, got \"" << env << "\"\n";
      return 2;
    }
  }

  CLI::App app{"Synthetic image detector on intermediate CLS tokens of a frozen ViT"};
  app.require_subcommand(1);

  int status = 0;

  // train
  auto* train = app.add_subcommand("train", "train a head on a real/fake directory");
  TrainFlags train_flags;
  std::string train_data, train_val, train_backbone, train_out, train_resume;
  std::optional<std::uint64_t> max_steps;
  train->add_option("--data", train_data)->required();
  train->add_option("--val", train_val, "evaluate the trained head on this directory");
  train->add_option("--backbone", train_backbone)->required();
  train->add_option("--out", train_out, "run directory")->required();
  train->add_option("--resume", train_resume, "checkpoint to continue from");
  train->add_option("--max-steps", max_steps, "stop after this many optimizer steps in total");
  train_flags.add_to(train);
  train->callback([&] {
    const auto backbone = rine::load_backbone(train_backbone);
    const auto encoder = rine::make_encoder(backbone);
    const auto config = rine::resolve_config(train_flags.resolve(), encoder);
    const rine::DirectoryDataset data(train_data);
    std::optional<rine::TrainState> resumed;
    rine::TrainOptions options;
    options.max_steps = max_steps;
    if (!train_resume.empty()) {
      resumed = rine::load_checkpoint(train_resume, config);
      options.resume = &*resumed;
    }
    const auto state = rine::train(data, encoder, config, options);
    rine::write_run(train_out, state, config);
    spdlog::info("wrote run to {}", train_out);
    if (data.skipped() > 0) status = 1;
    if (!train_val.empty()) {
      const auto report = rine::evaluate(rine::Detector{backbone, config.head, state.params},
                                         {{fs::path(train_val).filename().string(), train_val}}, {});
      status = std::max(status, finish_report(report, fs::path(train_out) / "validation", config.to_json()));
    }
  });

  // grid
  auto* grid = app.add_subcommand("grid", "train every xi × depth × projected combination, rank by ACC+AP");
  TrainFlags grid_flags;
  std::string grid_data, grid_val, grid_backbone, grid_out;
  rine::GridAxes axes;
  grid->add_option("--data", grid_data)->required();
  grid->add_option("--val", grid_val)->required();
  grid->add_option("--backbone", grid_backbone)->required();
  grid->add_option("--out", grid_out)->required();
  grid->add_option("--xi-values", axes.xi);
  grid->add_option("--depth-values", axes.depth);
  grid->add_option("--projected-values", axes.projected);
  grid_flags.add_to(grid);
  grid->callback([&] {
    const auto backbone = rine::load_backbone(grid_backbone);
    const auto base = grid_flags.resolve();
    const rine::DirectoryDataset data(grid_data), val(grid_val);
    const auto results = rine::grid_search(data, val, backbone, rine::enumerate_grid(base, axes));
    json resolved = base.to_json();
    resolved["grid"] = {{"xi", axes.xi}, {"depth", axes.depth}, {"projected", axes.projected}};
    write_text(fs::path(grid_out) / "config.json", resolved.dump(2) + "\n");
    write_text(fs::path(grid_out) / "ranking.json", rine::grid_to_json(results).dump(2) + "\n");
    for (const auto& r : results) {
      std::printf("xi=%g q=%zu d'=%zu acc=%.4f ap=%.4f%s\n", r.config.loss.xi, r.config.head.depth,
                  r.config.head.projected, r.acc, r.ap, r.error ? " FAILED" : "");
      if (r.error) status = 1;
    }
  });

  // eval / perturb-eval
  struct EvalFlags {
    std::string head, backbone, out;
    std::vector<std::string> dirs;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
  };
  auto add_eval_flags = [](CLI::App* cmd, EvalFlags& f) {
    cmd->add_option("--head", f.head)->required();
    cmd->add_option("--backbone", f.backbone)->required();
    cmd->add_option("--data-dirs", f.dirs, "directories, optionally as name=dir")->required();
    cmd->add_option("--out", f.out, "write report.json and report.csv here");
    cmd->add_option("--batch-size", f.batch_size);
    cmd->add_option("--seed", f.seed);
  };
  auto run_eval = [&](const EvalFlags& f, const std::optional<rine::PerturbConfig>& perturb,
                      std::optional<rine::PerturbKind> kind) {
    const auto backbone = rine::load_backbone(f.backbone);
    const auto head = rine::load_head(f.head);
    rine::InferenceOptions options;
    options.batch_size = f.batch_size;
    options.seed = f.seed;
    options.perturbation = kind;
    if (perturb) options.perturb_config = *perturb;
    const auto datasets = parse_dataset_args(f.dirs);
    json resolved = {{"head", f.head}, {"backbone", f.backbone}, {"batch_size", f.batch_size}, {"seed", f.seed}};
    for (const auto& [name, dir] : datasets) resolved["datasets"][name] = dir.string();
    if (kind) {
      resolved["perturbation"] = rine::to_string(*kind);
      resolved["perturb_config"] = options.perturb_config.to_json();
    }
    const auto report = rine::evaluate(rine::Detector{backbone, head.config, head.params}, datasets, options);
    status = finish_report(report, f.out, resolved);
  };

  auto* eval = app.add_subcommand("eval", "ACC/AP per dataset plus the unweighted average");
  EvalFlags eval_flags;
  add_eval_flags(eval, eval_flags);
  eval->callback([&] { run_eval(eval_flags, std::nullopt, std::nullopt); });

  auto* perturb_eval = app.add_subcommand("perturb-eval", "evaluate under blur/crop/compress/noise perturbations");
  EvalFlags perturb_eval_flags;
  PerturbFlags perturb_flags;
  add_eval_flags(perturb_eval, perturb_eval_flags);
  perturb_flags.add_to(perturb_eval);
  perturb_eval->callback([&] {
    run_eval(perturb_eval_flags, perturb_flags.config, rine::parse_perturb_kind(perturb_flags.kind));
  });

  // analyze-importance
  auto* importance = app.add_subcommand("analyze-importance", "per-block share of features with maximal importance");
  std::string importance_head, importance_out;
  importance->add_option("--head", importance_head)->required();
  importance->add_option("--out", importance_out, "CSV path");
  importance->callback([&] {
    const auto head = rine::load_head(importance_head);
    if (!head.config.use_tie) throw rine::ParameterError("head was trained without the importance estimator");
    const auto csv = rine::importance_to_csv(rine::importance_frequency(head.params.importance));
    if (!importance_out.empty()) write_text(importance_out, csv);
    std::cout << csv;
  });

  // param-count
  auto* count = app.add_subcommand("param-count", "trainable scalar count of a head config");
  std::string count_config;
  rine::HeadConfig count_head{.blocks = 24, .width = 1024, .projected = 1024, .depth = 4};
  bool count_no_tie = false, count_last = false;
  count->add_option("--config", count_config, "head config, or a train config with a \"head\" entry");
  count->add_option("--blocks", count_head.blocks);
  count->add_option("--width", count_head.width);
  count->add_option("--projected", count_head.projected);
  count->add_option("--depth", count_head.depth);
  count->add_flag("--no-tie", count_no_tie);
  count->add_flag("--last-block-only", count_last);
  count->callback([&] {
    rine::HeadConfig c = count_head;
    if (!count_config.empty()) {
      json j = read_json(count_config);
      if (j.contains("head")) j = j["head"];
      json full = c.to_json();
      full.merge_patch(j);
      c = rine::HeadConfig::from_json(full);
    }
    if (count->count("--blocks")) c.blocks = count_head.blocks;
    if (count->count("--width")) c.width = count_head.width;
    if (count->count("--projected")) c.projected = count_head.projected;
    if (count->count("--depth")) c.depth = count_head.depth;
    if (count_no_tie) c.use_tie = false;
    if (count_last) c.last_block_only = true;
    std::cout << with_commas(rine::param_count(c)) << "\n";
  });

  // export-features
  auto* features = app.add_subcommand("export-features", "write Q2 output features with labels as CSV");
  std::string feat_head, feat_backbone, feat_data, feat_out;
  features->add_option("--head", feat_head)->required();
  features->add_option("--backbone", feat_backbone)->required();
  features->add_option("--data", feat_data)->required();
  features->add_option("--out", feat_out)->required();
  features->callback([&] {
    const auto backbone = rine::load_backbone(feat_backbone);
    const auto head = rine::load_head(feat_head);
    const rine::DirectoryDataset data(feat_data);
    rine::InferenceOptions options;
    options.keep_features = true;
    const auto run = rine::infer(rine::Detector{backbone, head.config, head.params}, data, options);
    std::string csv = "id,label";
    for (std::size_t k = 0; k < head.config.projected; ++k) csv += ",f" + std::to_string(k);
    csv += "\n";
    char buf[32];
    for (std::size_t i = 0; i < run.scores.size(); ++i) {
      csv += run.ids[i] + "," + std::to_string(run.labels[i]);
      for (std::size_t k = 0; k < head.config.projected; ++k) {
        std::snprintf(buf, sizeof buf, ",%.9g", run.features.at(i, k));
        csv += buf;
      }
      csv += "\n";
    }
    write_text(feat_out, csv);
    if (run.skipped > 0) status = 1;
  });

  // make-toy
  auto* toy = app.add_subcommand("make-toy", "write a synthetic real/fake corpus");
  rine::ToyDatasetConfig toy_config;
  std::string toy_out;
  toy->add_option("--out", toy_out)->required();
  toy->add_option("--per-class", toy_config.per_class);
  toy->add_option("--side", toy_config.side);
  toy->add_option("--amplitude", toy_config.amplitude);
  toy->add_option("--seed", toy_config.seed);
  toy->callback([&] { rine::synth_toy_dataset(toy_out, toy_config); });

  // make-toy-backbone
  auto* toy_backbone = app.add_subcommand("make-toy-backbone", "write a randomly initialized ViT container");
  rine::ViTConfig vit{.width = 64, .blocks = 6, .patch = 8, .heads = 4, .image_side = 32};
  std::string toy_backbone_out;
  std::uint64_t toy_backbone_seed = 0;
  toy_backbone->add_option("--out", toy_backbone_out)->required();
  toy_backbone->add_option("--width", vit.width);
  toy_backbone->add_option("--blocks", vit.blocks);
  toy_backbone->add_option("--patch", vit.patch);
  toy_backbone->add_option("--heads", vit.heads);
  toy_backbone->add_option("--side", vit.image_side);
  toy_backbone->add_option("--seed", toy_backbone_seed);
  toy_backbone->callback([&] { rine::save_backbone(rine::make_random_backbone(vit, toy_backbone_seed), toy_backbone_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return status;
}
