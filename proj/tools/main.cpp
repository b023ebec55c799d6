#include <CLI11.hpp>
#include <cstdio>
#include <string>
#include <vector>

#include "labelreg/experiment.hpp"

namespace {

using labelreg::ExperimentConfig;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Experiment config JSON")->required();
  cmd->add_option("--out", args.out_dir, "Output directory (overrides config out_dir)");
  cmd->add_option("--seed", args.seed, "Seed override")->each([&](const std::string&) {
    args.seed_set = true;
  });
}

ExperimentConfig load_with_overrides(const CommonArgs& args) {
  ExperimentConfig cfg = labelreg::load_experiment_config(args.config_path);
  if (args.seed_set) cfg.seed = args.seed;
  return cfg;
}

std::string resolve_out(const CommonArgs& args, const ExperimentConfig& cfg) {
  return args.out_dir.empty() ? cfg.out_dir : args.out_dir;
}

std::vector<std::uint64_t> default_seeds(const ExperimentConfig& cfg, int count) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < count; ++i) seeds.push_back(cfg.seed + std::uint64_t(i));
  return seeds;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"labelreg: two-phase label-structure regularization for semantic segmentation"};
  app.require_subcommand(1);

  CommonArgs gen, tae, tseg, evl, swp, abl, qnn;
  std::string model_path, ae_path;
  std::vector<double> lambdas = labelreg::default_lambda_sweep();
  std::vector<std::uint64_t> sweep_seeds, ablate_seeds;
  int workers = 2;
  int num_queries = 100;

  auto* c_gen = app.add_subcommand("gen-data", "Materialize the synthetic dataset to PPM/PGM");
  add_common(c_gen, gen);

  auto* c_tae = app.add_subcommand("train-ae", "Phase 1: train the label autoencoder");
  add_common(c_tae, tae);

  auto* c_tseg = app.add_subcommand("train-seg", "Phase 2: train the segmentation CNN");
  add_common(c_tseg, tseg);

  auto* c_eval = app.add_subcommand("eval", "Evaluate an exported model on the validation split");
  add_common(c_eval, evl);
  c_eval->add_option("--model", model_path, "Model checkpoint (.ckpt)")->required();

  auto* c_swp = app.add_subcommand("sweep-lambda", "Train/eval across auxiliary loss weights");
  add_common(c_swp, swp);
  c_swp->add_option("--lambdas", lambdas, "Weights to sweep");
  c_swp->add_option("--seeds", sweep_seeds, "Seeds (default: 3 from config seed)");
  c_swp->add_option("--workers", workers, "Parallel isolated runs");

  auto* c_abl = app.add_subcommand("ablate", "Baseline vs frozen/unfrozen/random-init decoder");
  add_common(c_abl, abl);
  c_abl->add_option("--seeds", ablate_seeds, "Seeds (default: 5 from config seed)");
  c_abl->add_option("--workers", workers, "Parallel isolated runs");

  auto* c_qnn = app.add_subcommand("query-nn", "Bottleneck nearest-neighbor region queries");
  add_common(c_qnn, qnn);
  c_qnn->add_option("--ae", ae_path, "Phase-1 autoencoder checkpoint")->required();
  c_qnn->add_option("--queries", num_queries, "Number of query cells");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);  // prints usage or error text
    return code == 0 ? 0 : 1;     // flag errors are config errors
  }

  try {
    if (*c_gen) {
      auto cfg = load_with_overrides(gen);
      return labelreg::cmd_gen_data(cfg, gen.config_path, resolve_out(gen, cfg));
    }
    if (*c_tae) {
      auto cfg = load_with_overrides(tae);
      return labelreg::cmd_train_ae(cfg, tae.config_path, resolve_out(tae, cfg));
    }
    if (*c_tseg) {
      auto cfg = load_with_overrides(tseg);
      return labelreg::cmd_train_seg(cfg, tseg.config_path, resolve_out(tseg, cfg));
    }
    if (*c_eval) {
      auto cfg = load_with_overrides(evl);
      return labelreg::cmd_eval(cfg, evl.config_path, model_path, resolve_out(evl, cfg));
    }
    if (*c_swp) {
      auto cfg = load_with_overrides(swp);
      if (sweep_seeds.empty()) sweep_seeds = default_seeds(cfg, 3);
      return labelreg::cmd_sweep_lambda(cfg, swp.config_path, lambdas, sweep_seeds, workers,
                                        resolve_out(swp, cfg));
    }
    if (*c_abl) {
      auto cfg = load_with_overrides(abl);
      if (ablate_seeds.empty()) ablate_seeds = default_seeds(cfg, 5);
      return labelreg::cmd_ablate(cfg, abl.config_path, ablate_seeds, workers,
                                  resolve_out(abl, cfg));
    }
    if (*c_qnn) {
      auto cfg = load_with_overrides(qnn);
      return labelreg::cmd_query_nn(cfg, qnn.config_path, ae_path, num_queries,
                                    resolve_out(qnn, cfg));
    }
  } catch (const labelreg::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
