#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lesionseg/checkpoint.hpp"
#include "lesionseg/data.hpp"
#include "lesionseg/graph.hpp"
#include "lesionseg/metrics.hpp"
#include "lesionseg/optim.hpp"

namespace lesionseg {

struct RunConfig {
  std::string arch = "sgn3";
  std::string data_root;
  std::uint64_t seed = 1;
  int max_epochs = 100;       // Network-Structure experiment uses 50
  int batch_size = 1;
  double learning_rate = 0.003;
  double momentum = 0.9;
  double l2_lambda = 0.0005;
  double l1_lambda = 0.0;
  int patience = 10;          // Network-Structure experiment uses 25
  double lr_decay = 1.0;      // multiplicative per epoch
  bool augment = true;
  AugmentConfig augment_cfg;
  std::string init_policy = "scratch";  // scratch | transfer
  std::string donor_path;
  std::string out_dir;
  double test_fraction = 0.3;
  // 0 validates on the test set (the paper's protocol); > 0 carves a
  // separate validation split out of the training set
  double val_fraction = 0.0;
  int target_h = kWorkingHeight;
  int target_w = kWorkingWidth;

  // in-memory dataset override, used by tests and synthetic runs
  std::vector<Sample> train_override;
  std::vector<Sample> val_override;
};

struct IterRecord {
  long iter;
  int epoch;
  double loss;
};

struct EpochRecord {
  int epoch;
  double val_metric;  // mean per-class accuracy
  std::array<std::optional<double>, 2> acc;
  std::array<std::optional<double>, 2> iou;
  std::array<std::optional<double>, 2> bf1;
};

struct RunLog {
  std::vector<IterRecord> iters;
  std::vector<EpochRecord> epochs;
  std::string stop_reason;
  int best_epoch = 0;
  double best_metric = 0.0;
  Checkpoint best;
  Checkpoint final;
  double wall_seconds = 0.0;
};

inline std::string config_text(const RunConfig& cfg) {
  std::ostringstream os;
  os << "arch=" << cfg.arch << "\nseed=" << cfg.seed << "\nmax_epochs=" << cfg.max_epochs
     << "\nbatch_size=" << cfg.batch_size << "\nlearning_rate=" << cfg.learning_rate
     << "\nmomentum=" << cfg.momentum << "\nl2=" << cfg.l2_lambda << "\nl1=" << cfg.l1_lambda
     << "\npatience=" << cfg.patience << "\nlr_decay=" << cfg.lr_decay
     << "\naugment=" << (cfg.augment ? 1 : 0) << "\ninit=" << cfg.init_policy
     << "\ntest_fraction=" << cfg.test_fraction << "\nval_fraction=" << cfg.val_fraction
     << "\n";
  return os.str();
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : config_text(cfg)) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline EpochRecord validate_epoch(const GraphSpec& spec, Checkpoint& params,
                                  const std::vector<Sample>& val, int epoch) {
  std::vector<PredTruthPair> pairs;
  for (const auto& s : val) {
    Activations acts = forward(spec, params, s.image, Mode::Infer);
    pairs.push_back({s.source_id, argmax_labels(logits_of(spec, acts)), s.label});
  }
  MetricsReport rep = report(pairs);
  EpochRecord rec;
  rec.epoch = epoch;
  auto acc = accuracy(rep.total_cm);
  rec.val_metric = acc.mean.value_or(0.0);
  for (int c = 0; c < 2; ++c) {
    rec.acc[c] = rep.aggregate[c].accuracy;
    rec.iou[c] = rep.aggregate[c].iou;
    rec.bf1[c] = rep.aggregate[c].bf1;
  }
  return rec;
}

inline void write_run_files(const RunConfig& cfg, const RunLog& log) {
  if (cfg.out_dir.empty()) return;
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  {
    std::ofstream os(fs::path(cfg.out_dir) / "runlog.csv");
    os << "iter,epoch,loss\n";
    for (const auto& r : log.iters) os << r.iter << ',' << r.epoch << ',' << fmt(r.loss) << '\n';
  }
  {
    std::ofstream os(fs::path(cfg.out_dir) / "valmetrics.csv");
    os << "epoch,val_metric,acc_skin,acc_lesion,iou_skin,iou_lesion,bf1_skin,bf1_lesion\n";
    auto cell = [](std::optional<double> v) { return v ? fmt(*v) : std::string("undefined"); };
    for (const auto& r : log.epochs)
      os << r.epoch << ',' << fmt(r.val_metric) << ',' << cell(r.acc[0]) << ','
         << cell(r.acc[1]) << ',' << cell(r.iou[0]) << ',' << cell(r.iou[1]) << ','
         << cell(r.bf1[0]) << ',' << cell(r.bf1[1]) << '\n';
  }
  {
    std::ofstream os(fs::path(cfg.out_dir) / "config.txt");
    os << config_text(cfg) << "config_hash=" << config_hash(cfg)
       << "\nstop_reason=" << log.stop_reason << "\nbest_epoch=" << log.best_epoch << "\n";
  }
  {
    // wall clock lives apart so the numeric outputs stay byte-reproducible
    std::ofstream os(fs::path(cfg.out_dir) / "walltime.txt");
    os << fmt(log.wall_seconds) << "\n";
  }
  save_checkpoint(log.best, (fs::path(cfg.out_dir) / "best.segw").string());
  save_checkpoint(log.final, (fs::path(cfg.out_dir) / "final.segw").string());
}

}  // namespace detail

// Full experiment loop: shuffle each epoch, on-the-fly geometric
// augmentation, forward/backward/SGDM per mini-batch, one validation check
// per epoch (plus an initial-parameters baseline), early stopping on mean
// per-class validation accuracy.
inline RunLog train(const RunConfig& cfg) {
  auto t0 = std::chrono::steady_clock::now();
  GraphSpec spec = build_preset(cfg.arch);

  std::vector<Sample> train_set = cfg.train_override;
  std::vector<Sample> val_set = cfg.val_override;
  if (train_set.empty()) {
    DatasetSplit ds = load_dataset(cfg.data_root, cfg.test_fraction, cfg.seed, cfg.target_h,
                                   cfg.target_w);
    if (ds.train.empty()) throw ConfigError("train: no training samples in " + cfg.data_root);
    train_set = std::move(ds.train);
    if (cfg.val_fraction > 0.0) {
      std::size_t n_val = test_count_for(train_set.size(), cfg.val_fraction);
      val_set.assign(train_set.end() - n_val, train_set.end());
      train_set.resize(train_set.size() - n_val);
    } else {
      val_set = std::move(ds.test);  // the paper validated on its test set
    }
  }
  if (val_set.empty()) val_set = train_set;

  Rng rng(cfg.seed);
  Checkpoint params;
  if (cfg.init_policy == "scratch") {
    params = scratch_init(spec, rng);
  } else if (cfg.init_policy == "transfer") {
    Checkpoint donor = load_checkpoint(cfg.donor_path);
    params = transfer_init(spec, donor, rng);
  } else {
    throw ConfigError("train: unknown init policy '" + cfg.init_policy + "'");
  }
  params.metadata["arch"] = serialize_graph(spec);
  params.metadata["seed"] = std::to_string(cfg.seed);

  std::vector<LabelMap> train_labels;
  for (const auto& s : train_set) train_labels.push_back(s.label);
  ClassWeights cw = class_weights(train_labels);

  SgdmState opt = make_sgdm_state(params, cfg.learning_rate, cfg.momentum, cfg.l2_lambda,
                                  cfg.l1_lambda);
  EarlyStopState stopper;
  stopper.patience = cfg.patience;

  RunLog log;
  auto run_validation = [&](int epoch) {
    EpochRecord rec = detail::validate_epoch(spec, params, val_set, epoch);
    log.epochs.push_back(rec);
    return early_stop_update(stopper, rec.val_metric, params);
  };
  run_validation(0);  // baseline before any update

  long iter = 0;
  Checkpoint last_good = params;
  bool stopped = false;
  for (int epoch = 1; epoch <= cfg.max_epochs && !stopped; ++epoch) {
    // Fisher-Yates with the epoch-derived stream
    Rng shuffle_rng = rng.child("shuffle", static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    std::optional<Checkpoint> batch_grads;
    int batch_fill = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Sample& src = train_set[order[k]];
      Sample sample = src;
      if (cfg.augment) {
        Rng arng = rng.child("aug/" + src.source_id,
                             static_cast<std::uint64_t>(epoch) * train_set.size() + k);
        sample = augment_geometric(src, cfg.augment_cfg, arng);
      }

      // a zero learning rate freezes every parameter, running statistics
      // included; otherwise the stale-validation guarantee of the patience
      // contract would not hold exactly
      const bool frozen = opt.learning_rate == 0.0;
      std::vector<std::pair<std::string, Tensor>> saved_stats;
      if (frozen)
        for (const auto& [name, t] : params.entries())
          if (!is_trainable_param(name)) saved_stats.emplace_back(name, t);
      Activations acts = forward(spec, params, sample.image, Mode::Train);
      if (frozen)
        for (auto& [name, t] : saved_stats) params.at(name) = std::move(t);
      BackwardResult bw = backward(spec, params, acts, sample.label, cw.w);
      ++iter;
      log.iters.push_back({iter, epoch, bw.loss});
      if (!std::isfinite(bw.loss)) {
        params = last_good;
        log.stop_reason = "divergence: non-finite loss at iteration " + std::to_string(iter);
        stopped = true;
        break;
      }
      if (bw.empty_sample) continue;

      if (!batch_grads) {
        batch_grads = std::move(bw.grads);
        batch_fill = 1;
      } else {
        for (const auto& [name, g] : bw.grads.entries()) {
          Tensor& acc = batch_grads->at(name);
          for (std::size_t i = 0; i < g.numel(); ++i) acc.data[i] += g.data[i];
        }
        ++batch_fill;
      }
      if (batch_fill == cfg.batch_size || k + 1 == order.size()) {
        if (batch_fill > 1) {
          float inv = 1.0f / static_cast<float>(batch_fill);
          for (const auto& [name, t] : opt.velocity) {
            (void)t;
            for (float& v : batch_grads->at(name).data) v *= inv;
          }
        }
        // normalization can keep the loss finite while weights or running
        // statistics overflow, so the snapshot itself must be checked
        bool finite_params = true;
        for (const auto& [name, t] : params.entries())
          if (!t.all_finite()) {
            finite_params = false;
            (void)name;
            break;
          }
        if (!finite_params) {
          params = last_good;
          log.stop_reason =
              "divergence: non-finite parameters at iteration " + std::to_string(iter);
          stopped = true;
          break;
        }
        last_good = params;
        sgdm_step(params, *batch_grads, opt);
        batch_grads.reset();
        batch_fill = 0;
      }
    }
    if (stopped) break;

    opt.learning_rate *= cfg.lr_decay;
    if (run_validation(epoch) == StopDecision::Stop) {
      log.stop_reason = "early stop: no improvement within patience " +
                        std::to_string(cfg.patience);
      stopped = true;
    }
  }
  if (log.stop_reason.empty()) log.stop_reason = "max epochs reached";

  log.best_epoch = stopper.best_check - 1;  // checks are epoch+1 (baseline is check 1)
  log.best_metric = stopper.best_metric;
  log.best = stopper.best_checkpoint.value_or(params);
  log.final = params;
  log.best.metadata["epoch"] = std::to_string(log.best_epoch);
  log.best.metadata["metric"] = std::to_string(log.best_metric);

  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::write_run_files(cfg, log);
  return log;
}

// Inference-mode evaluation of a frozen checkpoint.
inline MetricsReport evaluate(Checkpoint& ckpt, const std::vector<Sample>& samples,
                              const std::string& expected_arch = "") {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  auto it = ckpt.metadata.find("arch");
  if (it == ckpt.metadata.end()) throw ConfigError("evaluate: checkpoint carries no arch text");
  GraphSpec spec = parse_graph(it->second);
  if (!expected_arch.empty() && spec.preset_name != expected_arch)
    throw ConfigError("evaluate: checkpoint arch '" + spec.preset_name +
                      "' does not match requested '" + expected_arch + "'");
  std::vector<PredTruthPair> pairs;
  for (const auto& s : samples) {
    Activations acts = forward(spec, ckpt, s.image, Mode::Infer);
    pairs.push_back({s.source_id, argmax_labels(logits_of(spec, acts)), s.label});
  }
  return report(pairs);
}

// Single-image inference: writes an 8-bit {1,2} label raster and a tinted
// overlay into out_dir.
inline LabelMap predict(Checkpoint& ckpt, const std::string& image_path,
                        const std::string& out_dir, int target_h = kWorkingHeight,
                        int target_w = kWorkingWidth) {
  auto it = ckpt.metadata.find("arch");
  if (it == ckpt.metadata.end()) throw ConfigError("predict: checkpoint carries no arch text");
  GraphSpec spec = parse_graph(it->second);
  Tensor image = resize_image(load_image(image_path), target_h, target_w);
  Activations acts = forward(spec, ckpt, image, Mode::Infer);
  LabelMap pred = argmax_labels(logits_of(spec, acts));

  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  std::string stem = fs::path(image_path).stem().string();
  save_label((fs::path(out_dir) / (stem + "_label.png")).string(), pred);
  save_overlay((fs::path(out_dir) / (stem + "_overlay.png")).string(), image, pred);
  return pred;
}

}  // namespace lesionseg
