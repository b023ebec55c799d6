#include "labelreg/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace labelreg {

namespace {

std::string fmt6(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt_lambda(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void copy_config_into(const std::string& config_path, const std::string& out_dir) {
  fs::create_directories(out_dir);
  if (config_path.empty()) return;
  std::ifstream in(config_path, std::ios::binary);
  if (!in) throw ConfigError("cannot reopen config " + config_path + " for provenance copy");
  std::stringstream ss;
  ss << in.rdbuf();
  std::ofstream out(out_dir + "/config.json", std::ios::binary);
  out << ss.str();
}

// Waves of isolated runs; the first exception (if any) is rethrown after all
// threads join.
void parallel_runs(int count, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, workers);
  std::mutex mu;
  std::exception_ptr first_error;
  int next = 0;
  auto body = [&] {
    for (;;) {
      int mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= count || first_error) return;
        mine = next++;
      }
      try {
        fn(mine);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, count); ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

void write_metrics_csv(const std::string& path, const std::vector<EpochLog>& logs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_metrics_csv: cannot write " + path);
  f << "epoch,split,primary_loss,aux_loss,miou\n";
  for (const auto& e : logs)
    f << e.epoch << ',' << e.split << ',' << fmt6(e.primary_loss) << ',' << fmt6(e.aux_loss)
      << ',' << fmt6(e.miou) << '\n';
}

void probe_dataset(ExperimentConfig& cfg) {
  if (cfg.synthetic || cfg.loaded_classes > 0) return;
  const std::string meta_path = cfg.dataset_dir + "/train/meta.json";
  std::ifstream f(meta_path);
  if (!f) throw ConfigError("dataset dir " + cfg.dataset_dir + " has no train/meta.json");
  nlohmann::json meta = nlohmann::json::parse(f, nullptr, false);
  if (meta.is_discarded()) throw DataError(meta_path + ": malformed JSON");
  cfg.loaded_classes = meta.at("num_classes").get<int>();
  cfg.loaded_h = meta.at("resolution").at(0).get<int>();
  cfg.loaded_w = meta.at("resolution").at(1).get<int>();
}

Dataset load_split(const ExperimentConfig& cfg, const std::string& split) {
  if (cfg.synthetic) return materialize_synthetic(cfg.dataset_spec, split);
  return load_dataset_dir(cfg.dataset_dir + "/" + split);
}

namespace {

// Batteries run the same synthetic corpus many times across worker threads;
// generation is pure, so materialized splits are shared.
std::shared_ptr<const Dataset> cached_split(const ExperimentConfig& cfg,
                                            const std::string& split) {
  if (!cfg.synthetic)
    return std::make_shared<const Dataset>(load_dataset_dir(cfg.dataset_dir + "/" + split));
  const auto& s = cfg.dataset_spec;
  std::string key = split;
  key += '|' + std::to_string(s.num_classes) + '|' + std::to_string(s.height) + 'x' +
         std::to_string(s.width) + '|' + std::to_string(s.seed) + '|' +
         std::to_string(s.train_size) + '/' + std::to_string(s.val_size) + '|' +
         std::to_string(s.texture_confound) + '|' + std::to_string(s.confound_class);
  for (double c : s.co_occurrence) key += ',' + std::to_string(c);

  static std::mutex mu;
  static std::map<std::string, std::weak_ptr<const Dataset>> cache;
  std::lock_guard<std::mutex> lock(mu);
  if (auto hit = cache[key].lock()) return hit;
  auto made = std::make_shared<const Dataset>(materialize_synthetic(s, split));
  cache[key] = made;
  return made;
}

}  // namespace

AutoencoderModel<float> train_phase1(const ExperimentConfig& cfg, std::vector<EpochLog>* logs,
                                     double stop_at_accuracy) {
  ExperimentConfig c = cfg;
  probe_dataset(c);
  const auto train_ptr = cached_split(c, "train");
  const Dataset& train = *train_ptr;
  std::vector<LabelMap> labels;
  labels.reserve(train.samples.size());
  for (const auto& s : train.samples) labels.push_back(s.label);
  auto model = build_autoencoder<float>(c.autoencoder_config(), c.seed);
  auto history = train_autoencoder(model, labels, c.schedule, c.seed, stop_at_accuracy);
  if (logs) *logs = std::move(history);
  return model;
}

Phase2Result train_phase2(const ExperimentConfig& cfg, const AutoencoderModel<float>* ae,
                          const std::function<void(int, const RegularizedModel<float>&)>& on_epoch) {
  ExperimentConfig c = cfg;
  probe_dataset(c);
  const auto train_ptr = cached_split(c, "train");
  const auto val_ptr = cached_split(c, "val");
  const Dataset& train = *train_ptr;
  const Dataset& val = *val_ptr;

  AutoencoderModel<float> loaded_ae;
  if (c.scheme.variant != RegVariant::kNone && !ae) {
    if (c.ae_checkpoint.empty())
      throw ConfigError("scheme '" + std::string(to_string(c.scheme.variant)) +
                        "' needs the phase-1 autoencoder checkpoint: set ae_checkpoint (run "
                        "train-ae first)");
    loaded_ae = build_autoencoder<float>(c.autoencoder_config(), c.seed);
    try {
      load_params_into(loaded_ae.params, c.ae_checkpoint);
    } catch (const DataError& e) {
      throw ConfigError("phase-1 artifact " + c.ae_checkpoint + " unusable: " + e.what());
    }
    ae = &loaded_ae;
  }

  auto seg = build_segnet<float>(c.segnet_config(), c.seed);
  if (c.standardize_taps) calibrate_standardization(seg, train);

  Phase2Result result;
  switch (c.scheme.variant) {
    case RegVariant::kNone:
      result.model = make_baseline(seg);
      break;
    case RegVariant::kDecoderAux:
      result.model = attach_decoder_aux(seg, *ae, c.scheme, c.seed);
      break;
    case RegVariant::kEncoderPred:
      result.model = attach_encoder_pred(seg, *ae, c.scheme, c.seed);
      break;
  }
  result.logs = train_segmenter(result.model, train, &val,
                                c.augment ? &*c.augment : nullptr, c.schedule, c.seed, on_epoch);
  result.val_miou = final_val_miou(result.logs);
  return result;
}

std::vector<SweepRow> sweep_lambda(const ExperimentConfig& cfg,
                                   const std::vector<double>& lambdas,
                                   const std::vector<std::uint64_t>& seeds, int workers,
                                   const std::string& out_root) {
  if (cfg.scheme.variant == RegVariant::kNone)
    throw ConfigError("sweep_lambda: scheme must carry an auxiliary branch (variant != none)");
  if (lambdas.empty() || seeds.empty()) throw ConfigError("sweep_lambda: empty lambda/seed list");

  // Hold the shared corpus across all runs; phase 1 once per seed.
  const auto hold_train = cached_split(cfg, "train");
  const auto hold_val = cached_split(cfg, "val");
  std::vector<AutoencoderModel<float>> aes(seeds.size());
  parallel_runs(int(seeds.size()), workers, [&](int i) {
    ExperimentConfig c = cfg;
    c.seed = seeds[std::size_t(i)];
    aes[std::size_t(i)] = train_phase1(c);
  });

  struct Job {
    double lambda;
    std::size_t seed_idx;
  };
  std::vector<Job> jobs;
  for (double l : lambdas)
    for (std::size_t si = 0; si < seeds.size(); ++si) jobs.push_back({l, si});

  std::vector<SweepRow> rows(jobs.size());
  parallel_runs(int(jobs.size()), workers, [&](int i) {
    const Job& job = jobs[std::size_t(i)];
    ExperimentConfig c = cfg;
    c.seed = seeds[job.seed_idx];
    c.scheme.lambda = job.lambda;
    const auto res = train_phase2(c, &aes[job.seed_idx]);
    rows[std::size_t(i)] = {job.lambda, seeds[job.seed_idx], res.val_miou};
    if (!out_root.empty()) {
      const std::string dir =
          out_root + "/l" + fmt_lambda(job.lambda) + "_s" + std::to_string(seeds[job.seed_idx]);
      fs::create_directories(dir);
      write_metrics_csv(dir + "/metrics.csv", res.logs);
    }
  });

  std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
    if (a.lambda != b.lambda) return a.lambda < b.lambda;
    return a.seed < b.seed;
  });

  if (!out_root.empty()) {
    fs::create_directories(out_root);
    std::ofstream f(out_root + "/sweep.csv", std::ios::binary);
    f << "lambda,seed,miou\n";
    for (const auto& r : rows)
      f << fmt_lambda(r.lambda) << ',' << r.seed << ',' << fmt6(r.miou) << '\n';
    std::ofstream g(out_root + "/sweep_summary.csv", std::ios::binary);
    g << "lambda,mean_miou,std_miou\n";
    for (double l : lambdas) {
      double sum = 0, sumsq = 0;
      int n = 0;
      for (const auto& r : rows)
        if (r.lambda == l) {
          sum += r.miou;
          sumsq += r.miou * r.miou;
          ++n;
        }
      const double mean = sum / n;
      const double var = std::max(0.0, sumsq / n - mean * mean);
      g << fmt_lambda(l) << ',' << fmt6(mean) << ',' << fmt6(std::sqrt(var)) << '\n';
    }
  }
  return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg,
                                      const std::vector<std::uint64_t>& seeds, int workers,
                                      const std::string& out_root) {
  if (seeds.empty()) throw ConfigError("run_ablation: empty seed list");
  const auto hold_train = cached_split(cfg, "train");
  const auto hold_val = cached_split(cfg, "val");
  static const char* kVariants[] = {"none", "frozen", "unfrozen", "random_init"};

  std::vector<AblationRow> rows(seeds.size() * 4);
  parallel_runs(int(seeds.size()), workers, [&](int si) {
    ExperimentConfig base = cfg;
    base.seed = seeds[std::size_t(si)];
    const auto ae = train_phase1(base);
    for (int vi = 0; vi < 4; ++vi) {
      ExperimentConfig c = base;
      if (vi == 0) {
        c.scheme.variant = RegVariant::kNone;
      } else {
        c.scheme.variant = RegVariant::kDecoderAux;
        c.scheme.decoder_mode = vi == 1   ? DecoderMode::kFrozen
                                : vi == 2 ? DecoderMode::kUnfrozen
                                          : DecoderMode::kRandomInit;
      }
      const auto res = train_phase2(c, &ae);
      rows[std::size_t(si) * 4 + std::size_t(vi)] = {kVariants[vi], seeds[std::size_t(si)],
                                                     res.val_miou};
      if (!out_root.empty()) {
        const std::string dir = out_root + "/" + kVariants[vi] + "_s" +
                                std::to_string(seeds[std::size_t(si)]);
        fs::create_directories(dir);
        write_metrics_csv(dir + "/metrics.csv", res.logs);
      }
    }
  });

  std::sort(rows.begin(), rows.end(), [](const AblationRow& a, const AblationRow& b) {
    auto rank = [](const std::string& v) {
      for (int i = 0; i < 4; ++i)
        if (v == kVariants[i]) return i;
      return 4;
    };
    if (rank(a.variant) != rank(b.variant)) return rank(a.variant) < rank(b.variant);
    return a.seed < b.seed;
  });

  if (!out_root.empty()) {
    fs::create_directories(out_root);
    std::ofstream f(out_root + "/ablation.csv", std::ios::binary);
    f << "variant,seed,miou\n";
    for (const auto& r : rows) f << r.variant << ',' << r.seed << ',' << fmt6(r.miou) << '\n';

    std::map<std::string, double> means;
    for (const char* v : kVariants) {
      double sum = 0;
      int n = 0;
      for (const auto& r : rows)
        if (r.variant == v) {
          sum += r.miou;
          ++n;
        }
      means[v] = sum / n;
    }
    std::ofstream g(out_root + "/ablation_summary.csv", std::ios::binary);
    g << "variant,mean_miou,mean_delta_vs_none\n";
    for (const char* v : kVariants)
      g << v << ',' << fmt6(means[v]) << ',' << fmt6(means[v] - means["none"]) << '\n';
  }
  return rows;
}

int cmd_gen_data(ExperimentConfig cfg, const std::string& config_path,
                 const std::string& out_dir) {
  if (!cfg.synthetic)
    throw ConfigError("gen-data: config must describe a synthetic dataset to materialize");
  copy_config_into(config_path, out_dir);
  for (const char* split : {"train", "val"}) {
    const Dataset ds = materialize_synthetic(cfg.dataset_spec, split);
    write_dataset_dir(ds, out_dir + "/" + split, split);
    std::printf("gen-data: wrote %zu %s samples to %s/%s\n", ds.samples.size(), split,
                out_dir.c_str(), split);
  }
  return 0;
}

int cmd_train_ae(ExperimentConfig cfg, const std::string& config_path,
                 const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  std::vector<EpochLog> logs;
  const auto model = train_phase1(cfg, &logs);
  save_checkpoint(model.params, out_dir + "/ae.ckpt");
  write_metrics_csv(out_dir + "/metrics.csv", logs);
  std::printf("train-ae: %d epochs, final reconstruction mIoU %.4f -> %s/ae.ckpt\n",
              int(logs.size()), logs.empty() ? 0.0 : logs.back().miou, out_dir.c_str());
  return 0;
}

int cmd_train_seg(ExperimentConfig cfg, const std::string& config_path,
                  const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  const auto res = train_phase2(cfg);
  save_checkpoint(res.model.params, out_dir + "/model_full.ckpt");
  save_checkpoint(export_inference(res.model), out_dir + "/model.ckpt");
  write_metrics_csv(out_dir + "/metrics.csv", res.logs);
  std::printf("train-seg: scheme %s, final val mIoU %.4f -> %s/model.ckpt\n",
              to_string(cfg.scheme.variant), res.val_miou, out_dir.c_str());
  return 0;
}

int cmd_eval(ExperimentConfig cfg, const std::string& config_path, const std::string& model_path,
             const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  probe_dataset(cfg);
  const Dataset val = load_split(cfg, "val");
  auto seg = build_segnet<float>(cfg.segnet_config(), cfg.seed);
  load_params_into(seg.params, model_path);
  EpochLog row = evaluate_segmenter<float>(seg.config, seg.params, val, cfg.schedule.batch_size);
  row.epoch = 0;
  write_metrics_csv(out_dir + "/metrics.csv", {row});
  std::printf("eval: val mIoU %.4f (primary loss %.4f) on %zu samples\n", row.miou,
              row.primary_loss, val.samples.size());
  return 0;
}

int cmd_sweep_lambda(ExperimentConfig cfg, const std::string& config_path,
                     const std::vector<double>& lambdas, const std::vector<std::uint64_t>& seeds,
                     int workers, const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  const auto rows = sweep_lambda(cfg, lambdas, seeds, workers, out_dir);
  std::printf("sweep-lambda: %zu runs -> %s/sweep.csv\n", rows.size(), out_dir.c_str());
  return 0;
}

int cmd_ablate(ExperimentConfig cfg, const std::string& config_path,
               const std::vector<std::uint64_t>& seeds, int workers, const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  const auto rows = run_ablation(cfg, seeds, workers, out_dir);
  std::printf("ablate: %zu runs -> %s/ablation.csv\n", rows.size(), out_dir.c_str());
  return 0;
}

int cmd_query_nn(ExperimentConfig cfg, const std::string& config_path,
                 const std::string& ae_checkpoint, int num_queries, const std::string& out_dir) {
  copy_config_into(config_path, out_dir);
  probe_dataset(cfg);
  if (ae_checkpoint.empty())
    throw ConfigError("query-nn: an autoencoder checkpoint is required (--ae)");
  auto ae = build_autoencoder<float>(cfg.autoencoder_config(), cfg.seed);
  try {
    load_params_into(ae.params, ae_checkpoint);
  } catch (const DataError& e) {
    throw ConfigError("query-nn: phase-1 artifact unusable: " + std::string(e.what()));
  }

  const Dataset train = load_split(cfg, "train");
  const Dataset val = load_split(cfg, "val");
  const auto db = extract_region_features(ae, val);

  const int cells_y = ae.config.bottleneck_h(), cells_x = ae.config.bottleneck_w();
  RngStream rng = stream(cfg.seed, "nnquery");
  std::ofstream f(out_dir + "/nn.csv", std::ios::binary);
  f << "query_sample,query_cy,query_cx,query_class,match_sample,match_cy,match_cx,match_class,"
       "dist\n";
  int matched = 0, made = 0;
  int guard = 0;
  while (made < num_queries && guard++ < num_queries * 200) {
    const int si = int(rng.below(std::uint64_t(train.samples.size())));
    const int cy = int(rng.below(std::uint64_t(cells_y)));
    const int cx = int(rng.below(std::uint64_t(cells_x)));
    const int cls =
        cell_dominant_class(train.samples[std::size_t(si)].label, cy, cx, cells_y, cells_x, 0.5);
    if (cls <= 0) continue;  // class-bearing cells only
    const auto onehot =
        one_hot_labels<float>(train.samples[std::size_t(si)].label, cfg.dataset_classes());
    const auto code = encode(ae, onehot).bottleneck;
    RegionFeature q;
    q.sample_id = si;
    q.cy = cy;
    q.cx = cx;
    q.origin = "encoder_gt";
    const std::int64_t px = code.shape().pixels();
    q.vec.resize(std::size_t(code.shape().c));
    for (int c = 0; c < code.shape().c; ++c)
      q.vec[std::size_t(c)] =
          code.values()[std::int64_t(c) * px + std::int64_t(cy) * code.shape().w + cx];
    const auto top = nn_query(q, db, 1);
    const auto& m = db[top.front().index];
    const int mcls =
        cell_dominant_class(val.samples[std::size_t(m.sample_id)].label, m.cy, m.cx, cells_y,
                            cells_x);
    ++made;
    matched += mcls == cls ? 1 : 0;
    f << si << ',' << cy << ',' << cx << ',' << cls << ',' << m.sample_id << ',' << m.cy << ','
      << m.cx << ',' << mcls << ',' << fmt6(top.front().dist) << '\n';
  }
  if (made == 0) throw DataError("query-nn: found no class-bearing query cells");
  std::printf("query-nn: %d/%d top-1 matches share the query's dominant class (%.1f%%)\n",
              matched, made, 100.0 * matched / made);
  return 0;
}

}  // namespace labelreg
