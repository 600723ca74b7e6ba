#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stconv/data_synth.hpp"
#include "stconv/model.hpp"

namespace stconv {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.1;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double pos_weight = 4.0;
  double alpha = 0.2;
  std::int64_t batch = 4;
  std::int64_t epochs = 10;
  double plateau_factor = 0.9;
  double threshold = 0.5;
  std::uint64_t seed = 42;
  /// Random flips / quarter turns of each training sample (inputs and targets together).
  bool augment = false;

  void validate() const;
  std::string to_text() const;
  /// Applies one key; returns false for keys that are not training keys.
  bool apply(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Mean over all pixels of pos_weight*y*softplus(-z) + (1-y)*softplus(z).
/// Throws ShapeError on mismatched shapes and ConfigError on non-binary targets.
template <typename T>
double bce_loss(const Tensor<T>& logits, const Tensor<T>& y, double pos_weight);
template <typename T>
ag::Var bce_loss(ag::Tape<T>& tape, ag::Var logits, const Tensor<T>& y, double pos_weight);

template <typename T>
double total_loss(const Tensor<T>& y_final, const Tensor<T>& y_early, const Tensor<T>& y, const TrainConfig& cfg);
template <typename T>
ag::Var total_loss(ag::Tape<T>& tape, ag::Var y_final, ag::Var y_early, const Tensor<T>& y, const TrainConfig& cfg);

/// First and second moment buffers, one pair per parameter in store order.
template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m, v;
};

/// One decoupled-decay Adam update with cfg.lr, reading gradients from the store.
/// step_index counts from 1 and must be exactly state.step + 1.
template <typename T>
void adamw_step(ParamStore<T>& params, AdamState<T>& state, const TrainConfig& cfg, std::int64_t step_index);

/// lr * factor when the validation loss got strictly worse, else lr.
double plateau_schedule(double prev_val_loss, double curr_val_loss, double lr, double factor = 0.9);

struct MetricsRecord {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0, recall = 0, f1 = 0, iou = 0;

  /// Ratios from counts. 0/0 gives 0, except that iou and f1 are 1 when both masks
  /// are empty.
  static MetricsRecord from_counts(std::int64_t tp, std::int64_t fp, std::int64_t fn, std::int64_t tn);
  std::string csv() const;
  static std::string csv_header();
};

/// Pixel confusion over the whole volume of sigmoid(logits) >= threshold against truth.
template <typename T>
MetricsRecord binarize_and_score(const Tensor<T>& logits, const Tensor<T>& truth, double threshold);
/// Same, for predictions that are already binary masks.
template <typename T>
MetricsRecord score_masks(const Tensor<T>& pred, const Tensor<T>& truth);

double mean_iou(const std::vector<MetricsRecord>& records);

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_miou = 0, lr = 0;
};

std::string log_header();
std::string log_line(const EpochRecord& r);

/// Inputs and targets stacked along N.
struct Batch {
  Tensor<float> x, y;
};
/// Symmetry k in [0, 8) of the square over (H, W): bit 0 flips H, bit 1 flips W, bit 2
/// transposes (square grids only).
template <typename T>
Tensor<T> dihedral(const Tensor<T>& x, int k);

Batch stack_samples(const std::vector<Sample>& samples, std::span<const std::size_t> order = {});

struct Evaluation {
  double loss = 0;
  std::vector<MetricsRecord> records;  // one per sample
  double miou = 0;
};

/// Eval-mode loss and per-sample metrics, batched `batch` samples at a time.
Evaluation evaluate(ParamStore<float>& params, const ModelConfig& model, const std::vector<Sample>& data,
                    const TrainConfig& cfg);

struct TrainOptions {
  /// Written whenever validation mIoU improves (empty: not written).
  std::filesystem::path checkpoint;
  /// CSV log, rewritten after every epoch (empty: not written).
  std::filesystem::path log;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Stop after this many optimizer steps (0: no limit).
  std::int64_t max_steps = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  ParamStore<float> best;
  ParamStore<float> last;
  std::int64_t best_epoch = 0;
  std::int64_t steps = 0;
  double last_train_loss = 0;
};

/// Minibatch AdamW over shuffled training samples, one validation pass per epoch,
/// plateau decay of the learning rate. Deterministic given cfg.seed. Throws
/// NonFiniteError with the epoch, step and offending tensor on NaN/Inf.
TrainResult train_loop(const ModelConfig& model, const std::vector<Sample>& train, const std::vector<Sample>& val,
                       const TrainConfig& cfg, const TrainOptions& opts = {});

}  // namespace stconv
