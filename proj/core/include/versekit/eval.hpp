#pragma once

#include <string>
#include <vector>

#include "versekit/bpe.hpp"
#include "versekit/corpus.hpp"
#include "versekit/decoding.hpp"
#include "versekit/model.hpp"

namespace versekit {

// Sentence-level BLEU of one hypothesis against a reference set, over
// token-id n-grams. Conventions (declared in every report header):
//   - clipped precision, counts clipped by the max across references;
//   - smoothing: zero numerators are replaced by 0.1;
//   - uniform weights over the n-gram orders the hypothesis can form
//     (1/max_n once the hypothesis has at least max_n tokens), so that
//     bleu(x, {x}) is exactly 1 for every non-empty x;
//   - brevity penalty against the closest reference length, ties broken
//     toward the shorter reference.
// Empty hypothesis scores 0.
double bleu(const std::vector<int>& hypothesis,
            const std::vector<std::vector<int>>& references, int max_n);

// Mean over texts of bleu(text, all others). Needs at least 2 texts.
double self_bleu(const std::vector<std::vector<int>>& texts, int max_n);

struct ScoreReport {
  std::string recipe;
  double bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
  double sbleu2 = 0.0, sbleu3 = 0.0, sbleu4 = 0.0;
  int n_scored = 0;       // well-formed samples entering the scores
  int n_malformed = 0;    // generated but excluded
  bool high_malformed = false;  // more than 5% excluded
};

struct Recipe {
  std::string label;
  DecodeConfig cfg;
};

// Generates n_samples per recipe, scores BLEU-2/3/4 against the references
// and Self-BLEU-2/3/4 within each generated set, and (when paths are given)
// writes the per-recipe report CSV and the (1-BLEU4, SelfBLEU4) curve CSV.
std::vector<ScoreReport> tradeoff_report(const ModelParams<float>& params,
                                         const BpeModel& tokenizer,
                                         const std::vector<Recipe>& recipes,
                                         const std::vector<Couplet>& references,
                                         int n_samples,
                                         const std::string& report_csv = "",
                                         const std::string& curve_csv = "",
                                         int n_threads = 1);

// Token ids scored by the metrics: BOS/EOS/PAD stripped, SEP kept.
std::vector<int> scoring_tokens(const std::vector<int>& ids);

void write_report_csv(const std::string& path,
                      const std::vector<ScoreReport>& reports);
void write_curve_csv(const std::string& path,
                     const std::vector<ScoreReport>& reports);

}  // namespace versekit
