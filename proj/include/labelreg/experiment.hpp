#pragma once

#include <functional>
#include <string>
#include <vector>

#include "labelreg/checkpoint.hpp"
#include "labelreg/config.hpp"
#include "labelreg/introspect.hpp"

namespace labelreg {

void write_metrics_csv(const std::string& path, const std::vector<EpochLog>& logs);

// Materializes the requested split: either the seeded synthetic corpus or a
// PPM/PGM directory (expects <dir>/<split>/).
Dataset load_split(const ExperimentConfig& cfg, const std::string& split);

// For directory datasets, reads meta.json so resolution/class count are
// available before any model is built.
void probe_dataset(ExperimentConfig& cfg);

// Phase 1: the label autoencoder, trained on training-split annotations only.
AutoencoderModel<float> train_phase1(const ExperimentConfig& cfg,
                                     std::vector<EpochLog>* logs = nullptr,
                                     double stop_at_accuracy = -1.0);

struct Phase2Result {
  RegularizedModel<float> model;
  std::vector<EpochLog> logs;
  double val_miou = 0;  // from the final validation row
};

// Phase 2: the segmentation CNN under cfg.scheme. When the scheme needs the
// label model, `ae` is used if non-null, otherwise cfg.ae_checkpoint is
// loaded (missing -> ConfigError naming the phase-1 artifact).
Phase2Result train_phase2(
    const ExperimentConfig& cfg, const AutoencoderModel<float>* ae = nullptr,
    const std::function<void(int, const RegularizedModel<float>&)>& on_epoch = {});

struct SweepRow {
  double lambda = 0;
  std::uint64_t seed = 0;
  double miou = 0;
};

// One full train/eval per (lambda, seed); rows sorted by (lambda, seed).
// Runs fan out across `workers` threads, each fully isolated. When out_root
// is non-empty, per-run metrics plus sweep.csv/sweep_summary.csv land there.
std::vector<SweepRow> sweep_lambda(const ExperimentConfig& cfg,
                                   const std::vector<double>& lambdas,
                                   const std::vector<std::uint64_t>& seeds, int workers,
                                   const std::string& out_root = "");

inline const std::vector<double>& default_lambda_sweep() {
  static const std::vector<double> v = {0, 0.25, 0.5, 1, 2, 4, 6};
  return v;
}

struct AblationRow {
  std::string variant;  // none | frozen | unfrozen | random_init
  std::uint64_t seed = 0;
  double miou = 0;
};

// Four runs per seed with shared data order: baseline plus the three decoder
// modes of the decoder_aux scheme.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds, int workers,
                                      const std::string& out_root = "");

// CLI entry points; return process exit codes (0 ok, 1 config error, 2
// runtime failure). config_path is echoed verbatim into the out dir.
int cmd_gen_data(ExperimentConfig cfg, const std::string& config_path, const std::string& out_dir);
int cmd_train_ae(ExperimentConfig cfg, const std::string& config_path, const std::string& out_dir);
int cmd_train_seg(ExperimentConfig cfg, const std::string& config_path,
                  const std::string& out_dir);
int cmd_eval(ExperimentConfig cfg, const std::string& config_path, const std::string& model_path,
             const std::string& out_dir);
int cmd_sweep_lambda(ExperimentConfig cfg, const std::string& config_path,
                     const std::vector<double>& lambdas, const std::vector<std::uint64_t>& seeds,
                     int workers, const std::string& out_dir);
int cmd_ablate(ExperimentConfig cfg, const std::string& config_path,
               const std::vector<std::uint64_t>& seeds, int workers, const std::string& out_dir);
int cmd_query_nn(ExperimentConfig cfg, const std::string& config_path,
                 const std::string& ae_checkpoint, int num_queries, const std::string& out_dir);

}  // namespace labelreg
