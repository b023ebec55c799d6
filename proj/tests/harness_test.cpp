#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "labelreg/checkpoint.hpp"
#include "labelreg/config.hpp"
#include "labelreg/experiment.hpp"
#include "labelreg/introspect.hpp"
#include "labelreg/metrics.hpp"
#include "testutil.hpp"

using namespace labelreg;

namespace {

// Independent set-based IoU: per class, explicit pixel index sets.
double brute_force_miou(const LabelMap& truth, const LabelMap& pred, int k) {
  double sum = 0;
  int counted = 0;
  for (int cls = 0; cls < k; ++cls) {
    std::set<std::size_t> t, p;
    for (std::size_t i = 0; i < truth.ids.size(); ++i) {
      if (truth.ids[i] == kVoidId) continue;
      if (truth.ids[i] == cls) t.insert(i);
      if (pred.ids[i] == cls) p.insert(i);
    }
    std::size_t inter = 0;
    for (auto i : t) inter += p.count(i);
    const std::size_t uni = t.size() + p.size() - inter;
    if (uni == 0) continue;
    sum += double(inter) / double(uni);
    ++counted;
  }
  return sum / counted;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("miou: hand example 7/12 and perfect prediction") {
  LabelMap truth(1, 2, 2), pred(1, 2, 2);
  truth.ids = {0, 0, 1, 1};
  pred.ids = {0, 1, 1, 1};
  ConfusionMatrix conf(2);
  conf.accumulate(truth, pred);
  const auto r = miou(conf);
  CHECK(r.per_class[0] == doctest::Approx(0.5));
  CHECK(r.per_class[1] == doctest::Approx(2.0 / 3.0));
  CHECK(r.mean == doctest::Approx(7.0 / 12.0));

  ConfusionMatrix perfect(2);
  perfect.accumulate(truth, truth);
  CHECK(miou(perfect).mean == doctest::Approx(1.0));

  ConfusionMatrix empty(2);
  CHECK_THROWS_AS(miou(empty), DataError);
}

TEST_CASE("miou matches the brute-force set oracle on random maps") {
  RngStream rng = stream(3, "miou_oracle");
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + int(rng.below(5));
    LabelMap truth(1, 8, 8), pred(1, 8, 8);
    for (std::size_t i = 0; i < truth.ids.size(); ++i) {
      truth.ids[i] = std::uint8_t(rng.below(10) == 9 ? kVoidId : rng.below(std::uint64_t(k)));
      // leave some classes absent now and then
      pred.ids[i] = std::uint8_t(rng.below(std::uint64_t(std::max(1, k - int(rng.below(2))))));
    }
    bool any_support = false;
    for (auto id : truth.ids) any_support = any_support || id != kVoidId;
    if (!any_support) continue;
    ConfusionMatrix conf(k);
    conf.accumulate(truth, pred);
    CHECK(std::fabs(miou(conf).mean - brute_force_miou(truth, pred, k)) < 1e-12);
  }
}

TEST_CASE("checkpoint: byte-exact round trip and error paths") {
  testutil::TempDir dir("ckpt");
  ParamStore<float> store;
  RngStream rng = stream(4, "ckpt");
  store.add("seg.head.w", {6, 176, 1, 1}, testutil::random_tensor({6, 176, 1, 1}, rng)
                                              .values()
                                              .cast<float>());
  store.add("seg.head.b", {1, 6, 1, 1}, VecX<float>::Zero(6));
  const std::string path = dir.str() + "/a.ckpt";
  save_checkpoint(store, path);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.names() == store.names());
  for (const auto& n : store.names()) {
    CHECK(loaded.at(n).shape == store.at(n).shape);
    CHECK(std::memcmp(loaded.at(n).value.data(), store.at(n).value.data(),
                      std::size_t(loaded.at(n).value.size()) * sizeof(float)) == 0);
  }
  const std::string path2 = dir.str() + "/b.ckpt";
  save_checkpoint(loaded, path2);
  CHECK(slurp(path) == slurp(path2));  // save -> load -> save byte-identical

  // corrupted magic
  {
    std::string bytes = slurp(path);
    bytes[0] = 'X';
    std::ofstream f(dir.str() + "/bad.ckpt", std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.str() + "/bad.ckpt"), doctest::Contains("not a checkpoint"),
                       DataError);

  // truncated file
  {
    std::string bytes = slurp(path);
    bytes.resize(bytes.size() / 2);
    std::ofstream f(dir.str() + "/trunc.ckpt", std::ios::binary);
    f << bytes;
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(dir.str() + "/trunc.ckpt"), doctest::Contains("truncated"),
                       DataError);

  // shape mismatch on load-into names the parameter
  ParamStore<float> other;
  other.add("seg.head.w", {6, 99, 1, 1}, VecX<float>::Zero(594));
  other.add("seg.head.b", {1, 6, 1, 1}, VecX<float>::Zero(6));
  CHECK_THROWS_WITH_AS(load_params_into(other, path), doctest::Contains("seg.head.w"), DataError);
}

TEST_CASE("experiment config: parsing, defaults, unknown keys rejected") {
  const std::string text = R"({
    "seed": 7,
    "dataset": {"synthetic": {"num_classes": 6, "height": 64, "width": 64,
                               "train_size": 100, "val_size": 20, "seed": 3,
                               "texture_confound": 0.8, "confound_class": 3}},
    "augment": null,
    "autoencoder": {"preset": "32", "stages": 3},
    "segnet": {"preset": "hyper_tiny"},
    "scheme": {"variant": "decoder_aux", "aux_loss": "cross_entropy",
               "lambda": 0.5, "decoder_mode": "frozen"},
    "schedule": {"epochs_hi": 2, "epochs_lo": 1, "lr_hi": 1e-3, "lr_lo": 1e-4,
                 "batch_size": 8, "val_every": 0},
    "out_dir": "runs/x"
  })";
  const auto cfg = parse_experiment_config(text);
  CHECK(cfg.seed == 7);
  CHECK(cfg.synthetic);
  CHECK(cfg.dataset_spec.train_size == 100);
  CHECK(cfg.scheme.variant == RegVariant::kDecoderAux);
  CHECK(cfg.scheme.lambda == 0.5);
  CHECK(cfg.schedule.total_epochs() == 3);
  CHECK(cfg.autoencoder_config().bottleneck_shape() == TensorShape{1, 32, 8, 8});
  CHECK(cfg.segnet_config().preset == "hyper_tiny");

  CHECK_THROWS_WITH_AS(parse_experiment_config(R"({"seeed": 1, "dataset": {"dir": "x"}})"),
                       doctest::Contains("seeed"), ConfigError);
  CHECK_THROWS_WITH_AS(
      parse_experiment_config(
          R"({"dataset": {"synthetic": {"num_classs": 6}}})"),
      doctest::Contains("num_classs"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config(R"({"dataset": {}})"), ConfigError);
  CHECK_THROWS_AS(parse_experiment_config("not json at all"), ConfigError);
  CHECK_THROWS_AS(
      parse_experiment_config(
          R"({"dataset": {"dir": "x"}, "scheme": {"variant": "bogus"}})"),
      ConfigError);
}

TEST_CASE("metrics csv: fixed header, dot decimals, LF endings") {
  testutil::TempDir dir("csv");
  std::vector<EpochLog> logs;
  EpochLog a;
  a.epoch = 0;
  a.split = "train";
  a.primary_loss = 1.25;
  a.aux_loss = 0.5;
  a.miou = 0.333333333;
  logs.push_back(a);
  EpochLog b = a;
  b.split = "val";
  b.aux_loss = 0;
  logs.push_back(b);
  const std::string path = dir.str() + "/metrics.csv";
  write_metrics_csv(path, logs);
  const std::string got = slurp(path);
  CHECK(got ==
        "epoch,split,primary_loss,aux_loss,miou\n"
        "0,train,1.250000,0.500000,0.333333\n"
        "0,val,1.250000,0.000000,0.333333\n");
}

TEST_CASE("nn_query: exact search, ties, self-exclusion, errors") {
  std::vector<RegionFeature> db;
  auto mk = [](int sample, int cy, int cx, float v0, float v1) {
    RegionFeature f;
    f.sample_id = sample;
    f.cy = cy;
    f.cx = cx;
    f.origin = "encoder_gt";
    f.vec = {v0, v1};
    return f;
  };
  db.push_back(mk(0, 0, 0, 1.0f, 0.0f));
  db.push_back(mk(1, 0, 0, 1.0f, 0.0f));  // exact duplicate of db[0]'s vector
  db.push_back(mk(2, 1, 1, 0.0f, 1.0f));

  const RegionFeature q = mk(0, 0, 0, 1.0f, 0.0f);
  // query present in db: distance 0 first; tie between samples 0 and 1 breaks
  // to the lower sample id
  auto top = nn_query(q, db, 2);
  CHECK(top[0].dist == 0.0);
  CHECK(db[top[0].index].sample_id == 0);
  CHECK(db[top[1].index].sample_id == 1);

  // excluding the query's own sample re-ranks
  top = nn_query(q, db, 1, /*exclude_sample_id=*/0);
  CHECK(db[top[0].index].sample_id == 1);

  std::vector<RegionFeature> empty;
  CHECK_THROWS_AS(nn_query(q, empty, 1), UsageError);
  // origin/dimension mismatch
  auto qbad = q;
  qbad.origin = "cnn_predicted";
  CHECK_THROWS_AS(nn_query(qbad, db, 1), UsageError);
}

TEST_CASE("cell_dominant_class: majority vote, void never wins") {
  LabelMap label(1, 4, 4);
  label.ids = {1, 1, 0, 0,
               1, 1, 0, 0,
               2, 2, std::uint8_t(kVoidId), std::uint8_t(kVoidId),
               2, 2, std::uint8_t(kVoidId), std::uint8_t(kVoidId)};
  CHECK(cell_dominant_class(label, 0, 0, 2, 2) == 1);
  CHECK(cell_dominant_class(label, 0, 1, 2, 2) == 0);
  CHECK(cell_dominant_class(label, 1, 0, 2, 2) == 2);
  CHECK(cell_dominant_class(label, 1, 1, 2, 2) == -1);   // all void
  CHECK(cell_dominant_class(label, 1, 0, 2, 2, 0.9) == 2);
  CHECK(cell_dominant_class(label, 1, 0, 2, 2, 1.01) == -1);  // coverage gate
}

TEST_CASE("region features from the encoder: one vector per bottleneck cell") {
  SyntheticSpec spec;
  spec.train_size = 3;
  Dataset ds = materialize_synthetic(spec, "train");
  const auto ae = build_autoencoder<float>(AutoencoderConfig::preset("32", 6, 64, 64, 3), 2);
  const auto feats = extract_region_features(ae, ds);
  CHECK(feats.size() == std::size_t(3 * 8 * 8));
  CHECK(feats[0].vec.size() == 32);
  CHECK(feats[0].origin == "encoder_gt");
  const auto self = nn_query(feats[5], feats, 1);
  CHECK(self[0].dist == 0.0);
  CHECK(self[0].index == 5);
}

TEST_CASE("sweep and ablation batteries at micro scale: CSV contracts") {
  testutil::TempDir dir("battery_micro");
  ExperimentConfig cfg;
  cfg.seed = 3;
  cfg.dataset_spec.train_size = 10;
  cfg.dataset_spec.val_size = 6;
  cfg.dataset_spec.seed = 3;
  cfg.schedule = {1, 0, 1e-3f, 1e-4f, 5, 0};
  cfg.scheme.variant = RegVariant::kDecoderAux;
  cfg.scheme.lambda = 0.5;

  const auto rows = sweep_lambda(cfg, {0.0, 0.5}, {3, 4}, 2, dir.str() + "/sweep");
  REQUIRE(rows.size() == 4);
  // sorted by (lambda, seed)
  CHECK(rows[0].lambda == 0.0);
  CHECK(rows[0].seed == 3);
  CHECK(rows[1].seed == 4);
  CHECK(rows[2].lambda == 0.5);
  const std::string csv = slurp(dir.str() + "/sweep/sweep.csv");
  CHECK(csv.rfind("lambda,seed,miou\n", 0) == 0);
  CHECK(slurp(dir.str() + "/sweep/sweep_summary.csv").rfind("lambda,mean_miou,std_miou\n", 0) ==
        0);

  // lambda = 0 rows reproduce the baseline mIoU per seed
  for (std::uint64_t seed : {std::uint64_t(3), std::uint64_t(4)}) {
    ExperimentConfig base = cfg;
    base.seed = seed;
    base.scheme.variant = RegVariant::kNone;
    const auto res = train_phase2(base);
    for (const auto& r : rows)
      if (r.lambda == 0.0 && r.seed == seed) CHECK(r.miou == res.val_miou);
  }

  const auto ab = run_ablation(cfg, {3}, 2, dir.str() + "/ablate");
  REQUIRE(ab.size() == 4);
  CHECK(ab[0].variant == "none");
  CHECK(ab[1].variant == "frozen");
  CHECK(ab[2].variant == "unfrozen");
  CHECK(ab[3].variant == "random_init");
  CHECK(slurp(dir.str() + "/ablate/ablation.csv").rfind("variant,seed,miou\n", 0) == 0);
  const std::string summary = slurp(dir.str() + "/ablate/ablation_summary.csv");
  CHECK(summary.rfind("variant,mean_miou,mean_delta_vs_none\n", 0) == 0);
  CHECK(summary.find("none,") != std::string::npos);
}

TEST_CASE("train_phase2 demands the phase-1 artifact for aux schemes") {
  ExperimentConfig cfg;
  cfg.dataset_spec.train_size = 4;
  cfg.dataset_spec.val_size = 2;
  cfg.schedule = {1, 0, 1e-3f, 1e-4f, 4, 0};
  cfg.scheme.variant = RegVariant::kDecoderAux;
  cfg.ae_checkpoint = "";
  CHECK_THROWS_WITH_AS(train_phase2(cfg), doctest::Contains("phase-1"), ConfigError);
  cfg.ae_checkpoint = "/nonexistent/ae.ckpt";
  CHECK_THROWS_AS(train_phase2(cfg), ConfigError);
}
