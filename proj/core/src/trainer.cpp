#include "versekit/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "versekit/checkpoint.hpp"
#include "versekit/errors.hpp"
#include "versekit/rng.hpp"

namespace versekit {

double lr_at(long long step, int d_model, int warmup) {
  if (step < 1) {
    throw ValidationError("lr_at step must be >= 1");
  }
  if (d_model < 1 || warmup < 1) {
    throw ValidationError("lr_at needs positive d_model and warmup");
  }
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

template <class S>
bool adam_step(ModelParams<S>& params, const ModelParams<S>& grads,
               AdamState<S>& state, double lr, const TrainConfig& cfg,
               std::string* diagnostic) {
  if (lr <= 0.0) {
    throw ValidationError("adam_step needs lr > 0");
  }
  auto g_refs = tensor_registry(const_cast<ModelParams<S>&>(grads));
  double norm_sq = 0.0;
  for (auto& [name, tensor] : g_refs) {
    for (const S v : tensor->data) {
      if (!std::isfinite(static_cast<double>(v))) {
        if (diagnostic != nullptr) {
          *diagnostic = "non-finite gradient in " + name;
        }
        return false;
      }
      norm_sq += static_cast<double>(v) * static_cast<double>(v);
    }
  }
  const double norm = std::sqrt(norm_sq);
  const bool clip = cfg.grad_clip && norm > cfg.grad_clip_norm;

  auto p_refs = tensor_registry(params);
  auto m_refs = tensor_registry(state.m);
  auto v_refs = tensor_registry(state.v);
  const long long t = ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < p_refs.size(); ++i) {
    std::vector<S>& p = p_refs[i].second->data;
    const std::vector<S>& g = g_refs[i].second->data;
    std::vector<S>& m = m_refs[i].second->data;
    std::vector<S>& v = v_refs[i].second->data;
    for (std::size_t j = 0; j < p.size(); ++j) {
      double gj = static_cast<double>(g[j]);
      if (clip) gj = gj / norm * cfg.grad_clip_norm;
      const double mj = cfg.beta1 * static_cast<double>(m[j]) +
                        (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(v[j]) +
                        (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<S>(mj);
      v[j] = static_cast<S>(vj);
      const double m_hat = mj / bc1;
      const double v_hat = vj / bc2;
      p[j] = static_cast<S>(static_cast<double>(p[j]) -
                            lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
    }
  }
  return true;
}

template bool adam_step<float>(ModelParams<float>&, const ModelParams<float>&,
                               AdamState<float>&, double, const TrainConfig&,
                               std::string*);
template bool adam_step<double>(ModelParams<double>&,
                                const ModelParams<double>&, AdamState<double>&,
                                double, const TrainConfig&, std::string*);

Batch pack_batch(const std::vector<std::vector<int>>& rows, int pad_id) {
  if (rows.empty()) {
    throw ValidationError("cannot pack an empty batch");
  }
  std::size_t t_len = 0;
  for (const auto& r : rows) t_len = std::max(t_len, r.size());
  Batch batch;
  batch.batch_size = rows.size();
  batch.seq_len = t_len;
  batch.tokens.assign(rows.size() * t_len, pad_id);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    std::copy(rows[b].begin(), rows[b].end(),
              batch.tokens.begin() + static_cast<std::ptrdiff_t>(b * t_len));
  }
  return batch;
}

namespace {

std::vector<std::vector<int>> tokenize_couplets(
    const std::vector<Couplet>& data, const BpeModel& tokenizer,
    int context_len, std::size_t& dropped) {
  std::vector<std::vector<int>> rows;
  rows.reserve(data.size());
  dropped = 0;
  for (const Couplet& c : data) {
    std::vector<int> ids = tokenizer.encode_couplet(c);
    if (ids.size() > static_cast<std::size_t>(context_len)) {
      ++dropped;
      continue;
    }
    rows.push_back(std::move(ids));
  }
  return rows;
}

double pooled_loss(const ModelParams<float>& params,
                   const std::vector<std::vector<int>>& rows, double smoothing,
                   int batch_size) {
  double total = 0.0;
  std::size_t positions = 0;
  for (std::size_t start = 0; start < rows.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(rows.size(), start + static_cast<std::size_t>(batch_size));
    const std::vector<std::vector<int>> chunk(rows.begin() + static_cast<std::ptrdiff_t>(start),
                                              rows.begin() + static_cast<std::ptrdiff_t>(end));
    const Batch batch = pack_batch(chunk, kPadId);
    const LossStats stats = compute_loss(params, batch, smoothing, kPadId);
    total += stats.loss * static_cast<double>(stats.positions);
    positions += stats.positions;
  }
  if (positions == 0) {
    throw ValidationError("no scorable positions in evaluation data");
  }
  return total / static_cast<double>(positions);
}

void write_metrics_csv(const std::string& path,
                       const std::vector<StepRecord>& steps) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write metrics CSV: " + path);
  out << "step,epoch,lr,train_loss\n";
  char buf[128];
  for (const StepRecord& r : steps) {
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.9e,%.9f\n", r.step, r.epoch,
                  r.lr, r.train_loss);
    out << buf;
  }
  if (!out) throw RunError("write failed: " + path);
}

void write_val_csv(const std::string& path,
                   const std::vector<EpochRecord>& epochs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write validation CSV: " + path);
  out << "epoch,val_loss\n";
  char buf[64];
  for (const EpochRecord& r : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.9f\n", r.epoch, r.val_loss);
    out << buf;
  }
  if (!out) throw RunError("write failed: " + path);
}

std::string epoch_ckpt_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch-%03d.ckpt", epoch);
  return buf;
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                  const DatasetSplit& data, const BpeModel& tokenizer,
                  const std::string& out_dir) {
  model_cfg.validate();
  train_cfg.validate();
  if (data.train.empty()) {
    throw ValidationError("training set is empty");
  }
  if (data.validation.empty()) {
    throw ValidationError("validation set is empty");
  }
  std::filesystem::create_directories(out_dir);

  TrainResult result;
  std::vector<std::vector<int>> train_rows =
      tokenize_couplets(data.train, tokenizer, model_cfg.context_len,
                        result.metrics.dropped_train_rows);
  std::vector<std::vector<int>> val_rows =
      tokenize_couplets(data.validation, tokenizer, model_cfg.context_len,
                        result.metrics.dropped_val_rows);
  if (train_rows.empty()) {
    throw ValidationError("every training couplet exceeds context_len");
  }
  if (val_rows.empty()) {
    throw ValidationError("every validation couplet exceeds context_len");
  }

  ModelParams<float> params =
      init_model<float>(model_cfg, derive_seed(train_cfg.seed, 0));
  ModelParams<float> grads = zeros_like(params);
  AdamState<float> adam = init_adam(params);
  Rng dropout_rng(derive_seed(train_cfg.seed, 1));

  result.best_epoch = 0;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  long long step = 0;
  bool budget_done = false;
  for (int epoch = 1; epoch <= train_cfg.epochs && !budget_done; ++epoch) {
    std::vector<std::size_t> order(train_rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(train_cfg.seed,
                                10000 + static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss_sum = 0.0;
    std::size_t epoch_steps = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(train_cfg.batch_size)) {
      const std::size_t end = std::min(
          order.size(), start + static_cast<std::size_t>(train_cfg.batch_size));
      std::vector<std::vector<int>> chunk;
      chunk.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        chunk.push_back(train_rows[order[i]]);
      }
      const Batch batch = pack_batch(chunk, kPadId);

      ++step;
      const double lr = lr_at(step, model_cfg.d_model, train_cfg.warmup_steps);
      const LossStats stats = loss_and_grads(params, batch,
                                             train_cfg.smoothing, kPadId,
                                             grads, true, &dropout_rng);
      if (!std::isfinite(stats.loss)) {
        throw RunError("training loss diverged at step " +
                       std::to_string(step));
      }
      std::string diagnostic;
      if (!adam_step(params, grads, adam, lr, train_cfg, &diagnostic)) {
        throw RunError("optimizer step rejected at step " +
                       std::to_string(step) + ": " + diagnostic);
      }
      result.metrics.steps.push_back({step, epoch, lr, stats.loss});
      epoch_loss_sum += stats.loss;
      ++epoch_steps;

      if (train_cfg.checkpoint_every > 0 &&
          step % train_cfg.checkpoint_every == 0) {
        save_checkpoint(params, out_dir + "/step-" + std::to_string(step) +
                                    ".ckpt");
      }
      if (train_cfg.max_steps > 0 && step >= train_cfg.max_steps) {
        budget_done = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean_train_loss =
        epoch_steps > 0 ? epoch_loss_sum / static_cast<double>(epoch_steps)
                        : 0.0;
    rec.val_loss = pooled_loss(params, val_rows, train_cfg.smoothing,
                               train_cfg.batch_size);
    result.metrics.epochs.push_back(rec);
    save_checkpoint(params, out_dir + "/" + epoch_ckpt_name(epoch));
    if (rec.val_loss < result.best_val_loss) {
      result.best_val_loss = rec.val_loss;
      result.best_epoch = epoch;
    }
  }

  if (result.best_epoch > 0) {
    std::filesystem::copy_file(
        out_dir + "/" + epoch_ckpt_name(result.best_epoch),
        out_dir + "/best.ckpt",
        std::filesystem::copy_options::overwrite_existing);
  }
  write_metrics_csv(out_dir + "/metrics.csv", result.metrics.steps);
  write_val_csv(out_dir + "/val.csv", result.metrics.epochs);
  result.params = std::move(params);
  return result;
}

double evaluate_loss(const ModelParams<float>& params,
                     const std::vector<Couplet>& data,
                     const BpeModel& tokenizer, double smoothing,
                     int batch_size) {
  if (data.empty()) {
    throw ValidationError("evaluation data is empty");
  }
  if (batch_size < 1) {
    throw ValidationError("batch_size must be >= 1");
  }
  std::size_t dropped = 0;
  const std::vector<std::vector<int>> rows =
      tokenize_couplets(data, tokenizer, params.config.context_len, dropped);
  if (rows.empty()) {
    throw ValidationError("every evaluation couplet exceeds context_len");
  }
  return pooled_loss(params, rows, smoothing, batch_size);
}

}  // namespace versekit
