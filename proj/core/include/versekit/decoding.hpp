#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "versekit/bpe.hpp"
#include "versekit/model.hpp"

namespace versekit {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum class TemperatureMode { kFixed, kAnnealed };

struct DecodeConfig {
  int k = 20;
  double p = 0.9;
  TemperatureMode temperature_mode = TemperatureMode::kFixed;
  double t = 1.0;          // fixed mode
  double t0 = 0.9;         // annealed mode
  double tf = 0.5;
  double anneal_step = 0.05;
  bool anti_lm = false;
  double anti_lm_lambda = std::numeric_limits<double>::infinity();
  int max_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ValidationError("k must be >= 1");
    if (!(p > 0.0 && p <= 1.0)) throw ValidationError("p must be in (0, 1]");
    if (temperature_mode == TemperatureMode::kFixed) {
      if (!(t > 0.0)) throw ValidationError("temperature t must be > 0");
    } else {
      if (!(tf <= t0)) throw ValidationError("annealing needs Tf <= T0");
      if (!(tf > 0.0)) throw ValidationError("Tf must be > 0");
      if (!(anneal_step > 0.0)) {
        throw ValidationError("anneal step must be > 0");
      }
    }
    if (anti_lm && !(anti_lm_lambda >= 0.0)) {
      throw ValidationError("anti-LM lambda must be >= 0 or inf");
    }
    if (max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
  }
};

// Tempered softmax. Masked (-inf) logits become exact zeros; the
// max is subtracted before exponentiation. Throws if t <= 0 or everything
// is masked.
std::vector<double> apply_temperature(const std::vector<double>& logits,
                                      double t);

// Keeps the k highest logits (ties: lower id), masks the rest to -inf.
// k >= |V| is the identity.
std::vector<double> top_k_filter(const std::vector<double>& logits, int k);

// Keeps the smallest descending-sorted prefix with cumulative mass >= p
// (ties: lower id) and renormalizes. Input must sum to 1.
std::vector<double> nucleus_filter(const std::vector<double>& probs, double p);

// Subtracts lambda from u_b for every bigram (last, b) in the prefix;
// infinite lambda masks. If the penalty would mask every live candidate it
// is skipped and *skipped is set. penalized_count reports distinct tokens hit.
std::vector<double> anti_lm_penalty(const std::vector<double>& logits,
                                    const std::vector<int>& prefix,
                                    double lambda, bool* skipped = nullptr,
                                    int* penalized_count = nullptr);

// max(Tf, T0 - i * step), the simulated-annealing schedule over step index i.
double annealing_temperature(long long i, double t0, double tf, double step);

struct GenerationTrace {
  std::vector<int> tokens;              // emitted ids, EOS included if reached
  std::vector<double> temperatures;     // per emitted token
  std::vector<int> candidate_counts;    // support size after all filters
  std::vector<int> penalized_counts;    // anti-LM hits per step
  std::vector<long long> skip_events;   // steps where the penalty was skipped
};

struct GenerationResult {
  Couplet couplet;
  std::vector<int> tokens;  // emitted ids (no BOS), EOS included if reached
  bool malformed = false;   // missing EOS, or SEP count != 1
  GenerationTrace trace;
};

// Autoregressive sampling from BOS: forward -> anti-LM -> temperature ->
// top-k -> nucleus -> categorical draw, stopping at EOS or max_tokens.
// Pure function of (params, tokenizer, cfg) including cfg.seed.
template <class S>
GenerationResult generate(const ModelParams<S>& params,
                          const BpeModel& tokenizer, const DecodeConfig& cfg);

// n samples with per-sample seeds derived from (cfg.seed, index). Samples
// are independent, so they may be computed by up to n_threads workers; the
// result is identical for every thread count.
template <class S>
std::vector<GenerationResult> generate_samples(const ModelParams<S>& params,
                                               const BpeModel& tokenizer,
                                               const DecodeConfig& cfg,
                                               int n_samples,
                                               int n_threads = 1);

extern template GenerationResult generate<float>(const ModelParams<float>&,
                                                 const BpeModel&,
                                                 const DecodeConfig&);
extern template GenerationResult generate<double>(const ModelParams<double>&,
                                                  const BpeModel&,
                                                  const DecodeConfig&);
extern template std::vector<GenerationResult> generate_samples<float>(
    const ModelParams<float>&, const BpeModel&, const DecodeConfig&, int, int);
extern template std::vector<GenerationResult> generate_samples<double>(
    const ModelParams<double>&, const BpeModel&, const DecodeConfig&, int,
    int);

}  // namespace versekit
