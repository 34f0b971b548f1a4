#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "glaucad/adam.hpp"
#include "glaucad/dataset.hpp"
#include "glaucad/error.hpp"
#include "glaucad/metrics.hpp"
#include "glaucad/model.hpp"
#include "glaucad/preprocess.hpp"
#include "glaucad/weights_io.hpp"
#include "json.hpp"

namespace glaucad {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t max_epochs = 120;
  std::size_t patience = 10;
  std::size_t num_folds = 5;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augment_config;
  AdamConfig adam;
  NormalizationStats normalization;
  std::optional<std::filesystem::path> checkpoint_dir;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (num_folds < 2) throw ConfigError("train: num_folds must be >= 2");
    augment_config.validate();
    adam.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, train_acc = 0, val_loss = 0, val_acc = 0;
};

// Patience-based stop on validation loss. An epoch improves only when its
// loss is strictly below the best seen so far.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ConfigError("early stopping: patience must be >= 1");
  }

  // Returns true when training should stop after this epoch.
  bool update(std::size_t epoch, double val_loss) {
    improved_ = val_loss < best_loss_;
    if (improved_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return stale_ >= patience_;
  }

  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::size_t stale_ = 0;
  std::size_t best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  bool improved_ = false;
};

struct Evaluation {
  double loss = 0;
  double accuracy = 0;              // argmax predictions
  std::vector<double> scores;       // p_glaucoma per sample
  std::vector<int> labels;
  std::vector<Prediction> predictions;
};

// Eval-mode pass over preprocessed samples in order.
template <class T = float>
Evaluation evaluate_model(const ModelConfig& cfg, const ModelWeights<T>& w,
                          std::span<const ImageSample> samples, std::size_t batch_size = 32,
                          const NormalizationStats& stats = {}) {
  if (samples.empty()) throw ConfigError("evaluate: no samples");
  Evaluation ev;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (const auto& idx : batch_partition(samples.size(), batch_size, false, nullptr)) {
    const auto b = make_batch<T>(samples, idx, stats);
    const auto fr = forward_logits(cfg, w, b.images);
    const auto xent = softmax_cross_entropy<T>(fr.logits, b.labels);
    loss_sum += static_cast<double>(xent.loss.item()) * static_cast<double>(idx.size());
    for (const auto& p : predictions_from_logits(fr.logits)) ev.predictions.push_back(p);
    ev.labels.insert(ev.labels.end(), b.labels.begin(), b.labels.end());
  }
  for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
    ev.scores.push_back(ev.predictions[i].p_glaucoma);
    if (ev.predictions[i].predicted_class == ev.labels[i]) ++correct;
  }
  ev.loss = loss_sum / static_cast<double>(samples.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  return ev;
}

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  std::size_t stopped_epoch = 0;
  bool early_stopped = false;
  double best_val_loss = 0;
  std::string checkpoint_id;
  MetricReport val_metrics;  // best weights on the validation samples
};

template <class T = float>
struct TrainResult {
  TrainReport report;
  ModelWeights<T> best_weights;
};

inline std::string epochs_csv(const std::vector<EpochRecord>& records) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (const auto& r : records) {
    os << r.epoch << ',' << r.train_loss << ',' << r.train_acc << ',' << r.val_loss << ',' << r.val_acc << '\n';
  }
  return os.str();
}

inline std::vector<EpochRecord> parse_epochs_csv(const std::string& text) {
  std::vector<EpochRecord> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (line.rfind("epoch,", 0) != 0) throw DataError("epoch CSV: missing header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf", &r.epoch, &r.train_loss, &r.train_acc,
                    &r.val_loss, &r.val_acc) != 5) {
      throw DataError("epoch CSV: malformed row '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  return {bytes.begin(), bytes.end()};
}

// Training state written next to best.mdnw.
inline nlohmann::json checkpoint_sidecar(const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         std::size_t epoch, double val_loss) {
  return {{"epoch", epoch},
          {"val_loss", val_loss},
          {"seed", tcfg.seed},
          {"batch_size", tcfg.batch_size},
          {"learning_rate", tcfg.adam.learning_rate},
          {"model", mcfg}};
}

inline std::string checkpoint_id_for(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%04zu", epoch);
  return buf;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch ADAM with augmentation on the training split, an eval-mode
// validation pass per epoch, and a stop after `patience` epochs without a
// strictly lower validation loss. The best-epoch weights are returned and,
// with a checkpoint_dir, persisted as best.mdnw + best.json along with
// epochs.csv. A non-finite loss raises NumericError; whatever was already
// checkpointed stays on disk.
template <class T = float>
TrainResult<T> fit_with_early_stopping(const TrainConfig& tcfg, const ModelConfig& mcfg,
                                       ModelWeights<T> weights, std::span<const ImageSample> train,
                                       std::span<const ImageSample> val,
                                       const EpochCallback& on_epoch = {}) {
  tcfg.validate();
  check_weights(mcfg, weights);
  if (train.empty() || val.empty()) throw ConfigError("train: train and validation sets must be non-empty");

  TrainResult<T> result;
  auto& rep = result.report;
  AdamState<T> adam;
  EarlyStopping stopper(tcfg.patience);
  set_requires_grad(weights, true);
  result.best_weights = clone_weights(weights);

  for (std::size_t epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(tcfg.seed, 4 * epoch));
    Rng dropout_rng(derive_seed(tcfg.seed, 4 * epoch + 1));
    const std::uint64_t augment_seed = derive_seed(tcfg.seed, 4 * epoch + 2);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& idx : batch_partition(train.size(), tcfg.batch_size, true, &shuffle_rng)) {
      const auto batch = make_batch<T>(train, idx, tcfg.normalization,
                                       tcfg.augment ? &tcfg.augment_config : nullptr, augment_seed);
      Tape<T> tape;
      zero_grad(weights);
      ForwardOptions opt;
      opt.mode = Mode::train;
      opt.rng = &dropout_rng;
      const auto fr = forward_logits(mcfg, weights, batch.images, opt, &tape);
      const auto xent = softmax_cross_entropy<T>(fr.logits, batch.labels, &tape);
      const double batch_loss = static_cast<double>(xent.loss.item());
      if (!std::isfinite(batch_loss)) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      backward(tape, xent.loss);
      adam_step(weights, adam, tcfg.adam);
      loss_sum += batch_loss * static_cast<double>(idx.size());
      const auto preds = predictions_from_logits(fr.logits);
      for (std::size_t k = 0; k < preds.size(); ++k) correct += preds[k].predicted_class == batch.labels[k];
    }
    zero_grad(weights);

    const auto ev = evaluate_model<T>(mcfg, weights, val, tcfg.batch_size, tcfg.normalization);
    if (!std::isfinite(ev.loss)) throw NumericError("train: non-finite validation loss at epoch " + std::to_string(epoch));
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()),
                    static_cast<double>(correct) / static_cast<double>(train.size()), ev.loss, ev.accuracy};
    rep.epochs.push_back(rec);
    const bool stop = stopper.update(epoch, ev.loss);
    if (stopper.improved()) {
      result.best_weights = clone_weights(weights);
      set_requires_grad(result.best_weights, false);
      if (tcfg.checkpoint_dir) {
        save_weights(result.best_weights, *tcfg.checkpoint_dir / "best.mdnw", mcfg.variant_name);
        write_text(*tcfg.checkpoint_dir / "best.json",
                   checkpoint_sidecar(mcfg, tcfg, epoch, ev.loss).dump(2) + "\n");
      }
    }
    if (tcfg.checkpoint_dir) write_text(*tcfg.checkpoint_dir / "epochs.csv", epochs_csv(rep.epochs));
    if (on_epoch) on_epoch(rec);
    rep.stopped_epoch = epoch;
    if (stop) {
      rep.early_stopped = epoch < tcfg.max_epochs;
      break;
    }
  }
  rep.best_epoch = stopper.best_epoch();
  rep.best_val_loss = stopper.best_loss();
  rep.checkpoint_id = checkpoint_id_for(rep.best_epoch);
  const auto ev = evaluate_model<T>(mcfg, result.best_weights, val, tcfg.batch_size, tcfg.normalization);
  rep.val_metrics = evaluate_scores(ev.scores, ev.labels);
  return result;
}

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

using FoldPlan = std::vector<Fold>;

// Stratified k-fold: each class is shuffled with its own seeded stream and
// dealt round-robin over the folds; class 1 continues where class 0 stopped
// so fold sizes differ by at most one.
inline FoldPlan make_folds(std::span<const int> labels, std::size_t num_folds, std::uint64_t seed) {
  if (num_folds < 2) throw ConfigError("make_folds: num_folds must be >= 2");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ConfigError("make_folds: labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < num_folds) {
      throw ConfigError("make_folds: class " + std::to_string(c) + " has " +
                        std::to_string(by_class[c].size()) + " samples, fewer than " +
                        std::to_string(num_folds) + " folds");
    }
  }
  FoldPlan plan(num_folds);
  std::size_t next = 0;
  for (int c = 0; c < 2; ++c) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    auto idx = by_class[c];
    rng.shuffle(idx);
    for (auto i : idx) plan[next++ % num_folds].val.push_back(i);
  }
  for (auto& f : plan) {
    std::sort(f.val.begin(), f.val.end());
    std::vector<char> in_val(labels.size(), 0);
    for (auto i : f.val) in_val[i] = 1;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!in_val[i]) f.train.push_back(i);
  }
  return plan;
}

inline FoldPlan make_folds(const DatasetManifest& m, std::size_t num_folds, std::uint64_t seed) {
  const auto labels = m.labels();
  return make_folds(labels, num_folds, seed);
}

struct CrossValReport {
  std::vector<TrainReport> folds;
  std::map<std::string, MeanStd> aggregate;  // accuracy, precision, recall, f1, auc
  double pooled_auc = 0;                     // AUC over all folds' validation scores
  std::optional<std::size_t> failed_fold;
  std::string failure;
};

class CrossValidationError : public Error {
 public:
  CrossValidationError(const std::string& what, CrossValReport partial)
      : Error(what), partial_(std::move(partial)) {}
  const CrossValReport& partial() const { return partial_; }

 private:
  CrossValReport partial_;
};

inline void aggregate_folds(CrossValReport& r) {
  std::map<std::string, std::vector<double>> cols;
  for (const auto& f : r.folds) {
    cols["accuracy"].push_back(f.val_metrics.accuracy);
    cols["precision"].push_back(f.val_metrics.precision);
    cols["recall"].push_back(f.val_metrics.recall);
    cols["f1"].push_back(f.val_metrics.f1);
    cols["auc"].push_back(f.val_metrics.auc);
  }
  r.aggregate.clear();
  for (const auto& [k, v] : cols) r.aggregate[k] = mean_std(v);
}

inline nlohmann::json cross_val_json(const CrossValReport& r) {
  nlohmann::json j;
  j["folds"] = nlohmann::json::array();
  for (std::size_t i = 0; i < r.folds.size(); ++i) {
    const auto& f = r.folds[i];
    j["folds"].push_back({{"fold", i + 1},
                          {"best_epoch", f.best_epoch},
                          {"stopped_epoch", f.stopped_epoch},
                          {"early_stopped", f.early_stopped},
                          {"best_val_loss", f.best_val_loss},
                          {"metrics", f.val_metrics}});
  }
  j["aggregate"] = nlohmann::json::object();
  for (const auto& [k, ms] : r.aggregate) {
    j["aggregate"][k] = {{"mean", ms.mean}, {"std", ms.stddev}, {"formatted", format_mean_std(ms)}};
  }
  j["pooled_auc"] = r.pooled_auc;
  if (r.failed_fold) j["failed_fold"] = *r.failed_fold + 1, j["failure"] = r.failure;
  return j;
}

// Trains one model per fold. Fold k initializes from seed derive_seed(seed, k)
// and trains with the same derived seed, so folds are independent and
// reproducible. With a checkpoint_dir each fold writes into fold_<k>/.
template <class T = float>
CrossValReport cross_validate(const TrainConfig& tcfg, const ModelConfig& mcfg,
                              std::span<const ImageSample> samples,
                              const std::function<void(std::size_t, const EpochRecord&)>& on_epoch = {}) {
  tcfg.validate();
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  const auto plan = make_folds(labels, tcfg.num_folds, tcfg.seed);
  CrossValReport report;
  std::vector<double> pooled_scores;
  std::vector<int> pooled_labels;
  for (std::size_t k = 0; k < plan.size(); ++k) {
    try {
      std::vector<ImageSample> tr, va;
      for (auto i : plan[k].train) tr.push_back(samples[i]);
      for (auto i : plan[k].val) va.push_back(samples[i]);
      TrainConfig fold_cfg = tcfg;
      fold_cfg.seed = derive_seed(tcfg.seed, 100 + k);
      if (tcfg.checkpoint_dir) fold_cfg.checkpoint_dir = *tcfg.checkpoint_dir / ("fold_" + std::to_string(k + 1));
      Rng init(fold_cfg.seed);
      auto w = build_model<T>(mcfg, init);
      auto res = fit_with_early_stopping<T>(fold_cfg, mcfg, std::move(w), tr, va,
                                            [&](const EpochRecord& r) { if (on_epoch) on_epoch(k, r); });
      const auto ev = evaluate_model<T>(mcfg, res.best_weights, va, tcfg.batch_size, tcfg.normalization);
      pooled_scores.insert(pooled_scores.end(), ev.scores.begin(), ev.scores.end());
      pooled_labels.insert(pooled_labels.end(), ev.labels.begin(), ev.labels.end());
      report.folds.push_back(std::move(res.report));
    } catch (const std::exception& e) {
      report.failed_fold = k;
      report.failure = e.what();
      if (!report.folds.empty()) aggregate_folds(report);
      throw CrossValidationError("cross-validation fold " + std::to_string(k + 1) + " failed: " + e.what(),
                                 std::move(report));
    }
  }
  aggregate_folds(report);
  report.pooled_auc = roc_auc(pooled_scores, pooled_labels).auc;
  return report;
}

}  // namespace glaucad
