#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "versekit/bpe.hpp"
#include "versekit/corpus.hpp"
#include "versekit/model.hpp"

namespace versekit {

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int warmup_steps = 4000;
  int epochs = 12;
  int batch_size = 32;
  double smoothing = 0.1;
  std::uint64_t seed = 0;
  bool grad_clip = false;        // global-norm clip at grad_clip_norm when on
  double grad_clip_norm = 1.0;
  long long max_steps = 0;       // 0 = no cap; the tiny overfit budget uses it
  long long checkpoint_every = 0;  // extra step-interval checkpoints, 0 = off

  void validate() const {
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
      throw ValidationError("adam betas must be in (0, 1)");
    }
    if (adam_eps <= 0.0) throw ValidationError("adam_eps must be positive");
    if (warmup_steps < 1) throw ValidationError("warmup_steps must be >= 1");
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(smoothing >= 0.0 && smoothing < 1.0)) {
      throw ValidationError("smoothing must be in [0, 1)");
    }
    if (grad_clip_norm <= 0.0) {
      throw ValidationError("grad_clip_norm must be positive");
    }
    if (max_steps < 0 || checkpoint_every < 0) {
      throw ValidationError("step counts must be non-negative");
    }
  }
};

template <class S>
struct AdamState {
  long long step = 0;
  ModelParams<S> m;
  ModelParams<S> v;
};

template <class S>
AdamState<S> init_adam(const ModelParams<S>& params) {
  AdamState<S> state;
  state.m = zeros_like(params);
  state.v = zeros_like(params);
  return state;
}

// Warmup-then-decay schedule: d^(-1/2) * min(step^(-1/2), step * warmup^(-3/2)).
// Peaks exactly at step == warmup. step < 1 is a validation error.
double lr_at(long long step, int d_model, int warmup);

// Standard Adam with bias correction. Honors cfg.grad_clip by rescaling the
// effective gradient to global norm grad_clip_norm; the grads argument is
// never mutated. Returns false (parameters untouched, diagnostic filled) if
// any gradient entry is non-finite.
template <class S>
bool adam_step(ModelParams<S>& params, const ModelParams<S>& grads,
               AdamState<S>& state, double lr, const TrainConfig& cfg,
               std::string* diagnostic = nullptr);

extern template bool adam_step<float>(ModelParams<float>&,
                                      const ModelParams<float>&,
                                      AdamState<float>&, double,
                                      const TrainConfig&, std::string*);
extern template bool adam_step<double>(ModelParams<double>&,
                                       const ModelParams<double>&,
                                       AdamState<double>&, double,
                                       const TrainConfig&, std::string*);

struct StepRecord {
  long long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double mean_train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainMetrics {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  std::size_t dropped_train_rows = 0;  // longer than context_len
  std::size_t dropped_val_rows = 0;
};

struct TrainResult {
  TrainMetrics metrics;
  ModelParams<float> params;  // state after the last step
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

// Runs the full loop: per-epoch seeded shuffles, right-padded couplet
// batches, Adam with the warmup schedule, a checkpoint per epoch plus
// best-by-validation, and metrics/validation CSVs in out_dir.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const DatasetSplit& data, const BpeModel& tokenizer,
                  const std::string& out_dir);

// Pooled label-smoothed CE over all non-PAD target positions, dropout off.
double evaluate_loss(const ModelParams<float>& params,
                     const std::vector<Couplet>& data,
                     const BpeModel& tokenizer, double smoothing,
                     int batch_size = 32);

// Right-pads token rows to the longest row. Rows must fit context_len.
Batch pack_batch(const std::vector<std::vector<int>>& rows, int pad_id);

}  // namespace versekit
