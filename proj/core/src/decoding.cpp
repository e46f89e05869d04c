#include "versekit/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <set>
#include <thread>

#include "versekit/errors.hpp"
#include "versekit/rng.hpp"

namespace versekit {

std::vector<double> apply_temperature(const std::vector<double>& logits,
                                      double t) {
  if (!(t > 0.0)) {
    throw ValidationError("temperature must be > 0");
  }
  double max_u = kNegInf;
  for (const double u : logits) max_u = std::max(max_u, u);
  if (max_u == kNegInf) {
    throw ValidationError("all logits are masked");
  }
  std::vector<double> probs(logits.size(), 0.0);
  double denom = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == kNegInf) continue;  // exact zero probability
    probs[i] = std::exp((logits[i] - max_u) / t);
    denom += probs[i];
  }
  for (double& p : probs) p /= denom;
  return probs;
}

std::vector<double> top_k_filter(const std::vector<double>& logits, int k) {
  if (k < 1) {
    throw ValidationError("k must be >= 1");
  }
  if (static_cast<std::size_t>(k) >= logits.size()) {
    return logits;
  }
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b];  // stable keeps lower ids first on ties
  });
  std::vector<double> out(logits.size(), kNegInf);
  for (int i = 0; i < k; ++i) {
    out[idx[static_cast<std::size_t>(i)]] =
        logits[idx[static_cast<std::size_t>(i)]];
  }
  return out;
}

std::vector<double> nucleus_filter(const std::vector<double>& probs,
                                   double p) {
  if (!(p > 0.0 && p <= 1.0)) {
    throw ValidationError("nucleus p must be in (0, 1]");
  }
  double sum = 0.0;
  for (const double q : probs) {
    if (q < 0.0) throw ValidationError("nucleus input has negative mass");
    sum += q;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    throw ValidationError("nucleus input must sum to 1");
  }
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return probs[a] > probs[b];
  });
  std::vector<double> out(probs.size(), 0.0);
  double cum = 0.0;
  double kept = 0.0;
  for (const std::size_t i : idx) {
    out[i] = probs[i];
    cum += probs[i];
    kept += probs[i];
    if (cum >= p) break;
  }
  for (double& q : out) q /= kept;
  return out;
}

std::vector<double> anti_lm_penalty(const std::vector<double>& logits,
                                    const std::vector<int>& prefix,
                                    double lambda, bool* skipped,
                                    int* penalized_count) {
  if (skipped != nullptr) *skipped = false;
  if (penalized_count != nullptr) *penalized_count = 0;
  if (!(lambda >= 0.0)) {
    throw ValidationError("anti-LM lambda must be >= 0 or inf");
  }
  if (lambda == 0.0 || prefix.size() < 2) {
    return logits;
  }
  const int last = prefix.back();
  std::set<int> banned;
  for (std::size_t i = 0; i + 1 < prefix.size(); ++i) {
    if (prefix[i] == last) {
      banned.insert(prefix[i + 1]);
    }
  }
  if (banned.empty()) {
    return logits;
  }

  if (std::isinf(lambda)) {
    // The hard ban must leave at least one live candidate.
    bool survivor = false;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (logits[i] != kNegInf && banned.count(static_cast<int>(i)) == 0) {
        survivor = true;
        break;
      }
    }
    if (!survivor) {
      if (skipped != nullptr) *skipped = true;
      return logits;
    }
  }

  std::vector<double> out = logits;
  int hits = 0;
  for (const int b : banned) {
    if (b < 0 || static_cast<std::size_t>(b) >= out.size()) continue;
    if (out[static_cast<std::size_t>(b)] == kNegInf) continue;
    out[static_cast<std::size_t>(b)] =
        std::isinf(lambda) ? kNegInf
                           : out[static_cast<std::size_t>(b)] - lambda;
    ++hits;
  }
  if (penalized_count != nullptr) *penalized_count = hits;
  return out;
}

double annealing_temperature(long long i, double t0, double tf, double step) {
  if (!(tf <= t0)) throw ValidationError("annealing needs Tf <= T0");
  if (!(step > 0.0)) throw ValidationError("anneal step must be > 0");
  if (i < 0) throw ValidationError("annealing step index must be >= 0");
  return std::max(tf, t0 - static_cast<double>(i) * step);
}

namespace {

// Top-k restriction in probability space; rank-equivalent to top_k_filter
// on logits because temperature preserves ordering.
std::vector<double> top_k_probs(const std::vector<double>& probs, int k) {
  if (static_cast<std::size_t>(k) >= probs.size()) {
    return probs;
  }
  std::vector<std::size_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return probs[a] > probs[b];
  });
  std::vector<double> out(probs.size(), 0.0);
  double kept = 0.0;
  for (int i = 0; i < k; ++i) {
    const std::size_t j = idx[static_cast<std::size_t>(i)];
    out[j] = probs[j];
    kept += probs[j];
  }
  for (double& q : out) q /= kept;
  return out;
}

}  // namespace

template <class S>
GenerationResult generate(const ModelParams<S>& params,
                          const BpeModel& tokenizer, const DecodeConfig& cfg) {
  cfg.validate();
  if (params.config.vocab_size != tokenizer.model_vocab_size()) {
    throw ValidationError(
        "checkpoint vocab (" + std::to_string(params.config.vocab_size) +
        ") does not match tokenizer vocab (" +
        std::to_string(tokenizer.model_vocab_size()) + ")");
  }
  const std::size_t vocab = static_cast<std::size_t>(params.config.vocab_size);
  const std::size_t context =
      static_cast<std::size_t>(params.config.context_len);

  GenerationResult result;
  Rng rng(cfg.seed);
  std::vector<int> seq{kBosId};
  bool saw_eos = false;

  for (long long i = 0; i < cfg.max_tokens; ++i) {
    const std::size_t window_start =
        seq.size() > context ? seq.size() - context : 0;
    Batch batch;
    batch.batch_size = 1;
    batch.seq_len = seq.size() - window_start;
    batch.tokens.assign(seq.begin() + static_cast<std::ptrdiff_t>(window_start),
                        seq.end());
    const Matrix<S> logits_m =
        forward<S>(params, batch, false, nullptr, nullptr);

    std::vector<double> u(vocab);
    const S* last_row = logits_m.row(batch.seq_len - 1);
    for (std::size_t j = 0; j < vocab; ++j) {
      u[j] = static_cast<double>(last_row[j]);
    }
    // Control tokens that must never be sampled mid-sequence.
    u[kBosId] = kNegInf;
    u[kPadId] = kNegInf;

    int penalized = 0;
    if (cfg.anti_lm) {
      bool skipped = false;
      u = anti_lm_penalty(u, seq, cfg.anti_lm_lambda, &skipped, &penalized);
      if (skipped) {
        result.trace.skip_events.push_back(i);
      }
    }

    const double temp =
        cfg.temperature_mode == TemperatureMode::kFixed
            ? cfg.t
            : annealing_temperature(i, cfg.t0, cfg.tf, cfg.anneal_step);

    std::vector<double> probs = apply_temperature(u, temp);
    probs = top_k_probs(probs, cfg.k);
    probs = nucleus_filter(probs, cfg.p);

    int support = 0;
    for (const double q : probs) {
      if (q > 0.0) ++support;
    }
    const int token = static_cast<int>(rng.sample_discrete(probs));

    seq.push_back(token);
    result.trace.tokens.push_back(token);
    result.trace.temperatures.push_back(temp);
    result.trace.candidate_counts.push_back(support);
    result.trace.penalized_counts.push_back(penalized);
    if (token == kEosId) {
      saw_eos = true;
      break;
    }
  }

  result.tokens.assign(seq.begin() + 1, seq.end());
  int sep_count = 0;
  for (const int id : result.tokens) {
    if (id == kSepId) ++sep_count;
  }
  result.malformed = !saw_eos || sep_count != 1;

  std::vector<int> first_ids, second_ids;
  bool after_sep = false;
  for (const int id : result.tokens) {
    if (id == kSepId) {
      if (!after_sep) {
        after_sep = true;
        continue;
      }
    }
    if (id == kEosId) break;
    (after_sep ? second_ids : first_ids).push_back(id);
  }
  result.couplet.first = tokenizer.decode(first_ids);
  result.couplet.second = tokenizer.decode(second_ids);
  result.couplet.source_id = "generated";
  return result;
}

template <class S>
std::vector<GenerationResult> generate_samples(const ModelParams<S>& params,
                                               const BpeModel& tokenizer,
                                               const DecodeConfig& cfg,
                                               int n_samples, int n_threads) {
  if (n_samples < 1) {
    throw ValidationError("n_samples must be >= 1");
  }
  if (n_threads < 1) {
    throw ValidationError("n_threads must be >= 1");
  }
  std::vector<GenerationResult> results(
      static_cast<std::size_t>(n_samples));

  // Sample i is a pure function of (params, tokenizer, cfg with seed
  // derived from i), so any worker may compute it; results land by index
  // and the output is identical for every thread count.
  std::atomic<int> next{0};
  const auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n_samples) return;
      DecodeConfig sample_cfg = cfg;
      sample_cfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
      results[static_cast<std::size_t>(i)] =
          generate(params, tokenizer, sample_cfg);
    }
  };

  const int workers = std::min(n_threads, n_samples);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return results;
}

template GenerationResult generate<float>(const ModelParams<float>&,
                                          const BpeModel&,
                                          const DecodeConfig&);
template GenerationResult generate<double>(const ModelParams<double>&,
                                           const BpeModel&,
                                           const DecodeConfig&);
template std::vector<GenerationResult> generate_samples<float>(
    const ModelParams<float>&, const BpeModel&, const DecodeConfig&, int, int);
template std::vector<GenerationResult> generate_samples<double>(
    const ModelParams<double>&, const BpeModel&, const DecodeConfig&, int,
    int);

}  // namespace versekit
