#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "labelreg/data.hpp"
#include "testutil.hpp"

namespace {

const char* cli_path() { return LABELREG_CLI; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(cli_path()) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_config(const std::string& path, const std::string& out_dir,
                  const std::string& scheme_extra = "", const std::string& ae_ckpt = "") {
  std::ofstream f(path);
  f << R"({
  "seed": 5,
  "dataset": {"synthetic": {"num_classes": 6, "height": 64, "width": 64,
                             "train_size": 12, "val_size": 6, "seed": 5,
                             "texture_confound": 0.9, "confound_class": 3}},
  "augment": null,
  "autoencoder": {"preset": "32", "stages": 3},
  "segnet": {"preset": "hyper_tiny"},
  "scheme": {)" << scheme_extra
    << R"(},
  "schedule": {"epochs_hi": 1, "epochs_lo": 0, "lr_hi": 1e-3, "lr_lo": 1e-4,
               "batch_size": 6, "val_every": 0},)";
  if (!ae_ckpt.empty()) f << "\n  \"ae_checkpoint\": \"" << ae_ckpt << "\",";
  f << "\n  \"out_dir\": \"" << out_dir << "\"\n}\n";
}

}  // namespace

TEST_CASE("cli: bad usage exits 1, bad config exits 1") {
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("train-ae") == 1);                       // missing --config
  CHECK(run_cli("train-ae --config /does/not/exist") == 1);
  CHECK(run_cli("train-ae --config /etc/hostname") == 1);  // not an experiment config
}

TEST_CASE("cli: gen-data writes loadable splits") {
  testutil::TempDir dir("cli_gen");
  const std::string cfg = dir.str() + "/config.json";
  write_config(cfg, dir.str() + "/data");
  REQUIRE(run_cli("gen-data --config " + cfg) == 0);
  const auto train = labelreg::load_dataset_dir(dir.str() + "/data/train");
  const auto val = labelreg::load_dataset_dir(dir.str() + "/data/val");
  CHECK(train.samples.size() == 12);
  CHECK(val.samples.size() == 6);
  CHECK(slurp(dir.str() + "/data/config.json") == slurp(cfg));  // verbatim echo
}

TEST_CASE("cli: two-phase contract and the full mini pipeline") {
  testutil::TempDir dir("cli_pipeline");
  const std::string ae_out = dir.str() + "/ae";
  const std::string seg_out = dir.str() + "/seg";

  // train-seg with an aux scheme but no phase-1 artifact: config error naming it
  const std::string cfg_noae = dir.str() + "/noae.json";
  write_config(cfg_noae, seg_out,
               R"("variant": "decoder_aux", "aux_loss": "cross_entropy", "lambda": 0.5)");
  CHECK(run_cli("train-seg --config " + cfg_noae) == 1);

  const std::string cfg_ae = dir.str() + "/ae.json";
  write_config(cfg_ae, ae_out);
  REQUIRE(run_cli("train-ae --config " + cfg_ae) == 0);
  CHECK(slurp(ae_out + "/metrics.csv").rfind("epoch,split,", 0) == 0);

  const std::string cfg_seg = dir.str() + "/seg.json";
  write_config(cfg_seg, seg_out,
               R"("variant": "decoder_aux", "aux_loss": "cross_entropy", "lambda": 0.5)",
               ae_out + "/ae.ckpt");
  REQUIRE(run_cli("train-seg --config " + cfg_seg) == 0);

  // exported model evaluates with no autoencoder anywhere in sight
  const std::string cfg_eval = dir.str() + "/eval.json";
  write_config(cfg_eval, dir.str() + "/eval");
  CHECK(run_cli("eval --config " + cfg_eval + " --model " + seg_out + "/model.ckpt") == 0);
  CHECK(run_cli("eval --config " + cfg_eval + " --model " + seg_out + "/missing.ckpt") == 2);

  // rerun reproduces metrics byte-for-byte
  const std::string again = dir.str() + "/seg2";
  REQUIRE(run_cli("train-seg --config " + cfg_seg + " --out " + again) == 0);
  CHECK(slurp(seg_out + "/metrics.csv") == slurp(again + "/metrics.csv"));

  // seed override changes the trajectory
  const std::string other = dir.str() + "/seg3";
  REQUIRE(run_cli("train-seg --config " + cfg_seg + " --out " + other + " --seed 99") == 0);
  CHECK(slurp(seg_out + "/metrics.csv") != slurp(other + "/metrics.csv"));

  // bottleneck nearest-neighbor queries over the trained label model
  const std::string nn_out = dir.str() + "/nn";
  REQUIRE(run_cli("query-nn --config " + cfg_ae + " --ae " + ae_out + "/ae.ckpt --queries 10 --out " +
                  nn_out) == 0);
  CHECK(slurp(nn_out + "/nn.csv").rfind("query_sample,", 0) == 0);
  CHECK(run_cli("query-nn --config " + cfg_ae + " --ae /missing.ckpt --out " + nn_out) == 1);
}

TEST_CASE("cli: micro sweep and ablation batteries") {
  testutil::TempDir dir("cli_battery");
  const std::string cfg = dir.str() + "/cfg.json";
  write_config(cfg, dir.str() + "/out",
               R"("variant": "decoder_aux", "aux_loss": "cross_entropy", "lambda": 0.5)");

  REQUIRE(run_cli("sweep-lambda --config " + cfg + " --lambdas 0 0.5 --seeds 5 --workers 2 --out " +
                  dir.str() + "/sweep") == 0);
  const std::string sweep = slurp(dir.str() + "/sweep/sweep.csv");
  CHECK(sweep.rfind("lambda,seed,miou\n", 0) == 0);
  CHECK(sweep.find("\n0,5,") != std::string::npos);
  CHECK(sweep.find("\n0.5,5,") != std::string::npos);

  REQUIRE(run_cli("ablate --config " + cfg + " --seeds 5 --workers 2 --out " + dir.str() +
                  "/ablate") == 0);
  const std::string ab = slurp(dir.str() + "/ablate/ablation.csv");
  CHECK(ab.rfind("variant,seed,miou\n", 0) == 0);
  for (const char* v : {"none", "frozen", "unfrozen", "random_init"})
    CHECK(ab.find(std::string("\n") + v + ",5,") != std::string::npos);
}
