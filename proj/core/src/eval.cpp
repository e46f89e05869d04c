#include "versekit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "versekit/errors.hpp"

namespace versekit {

namespace {

using NgramCounts = std::map<std::vector<int>, int>;

NgramCounts count_ngrams(const std::vector<int>& tokens, int n) {
  NgramCounts counts;
  if (tokens.size() < static_cast<std::size_t>(n)) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size();
       ++i) {
    std::vector<int> gram(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                          tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[gram];
  }
  return counts;
}

// Per n-gram order: the highest count of each gram across all references.
NgramCounts max_ref_counts(const std::vector<std::vector<int>>& references,
                           int n) {
  NgramCounts merged;
  for (const auto& ref : references) {
    for (const auto& [gram, count] : count_ngrams(ref, n)) {
      int& slot = merged[gram];
      slot = std::max(slot, count);
    }
  }
  return merged;
}

double modified_precision(const NgramCounts& hyp_counts,
                          const NgramCounts& clip) {
  long long num = 0;
  long long den = 0;
  for (const auto& [gram, count] : hyp_counts) {
    const auto it = clip.find(gram);
    const int best = it != clip.end() ? it->second : 0;
    num += std::min(count, best);
    den += count;
  }
  const double d = static_cast<double>(den);
  return num > 0 ? static_cast<double>(num) / d : 0.1 / d;
}

double brevity_penalty(std::size_t hyp_len,
                       const std::vector<std::size_t>& ref_lens) {
  // Closest reference length; ties prefer the shorter reference.
  std::size_t r = ref_lens[0];
  const auto dist = [&](std::size_t len) {
    return len > hyp_len ? len - hyp_len : hyp_len - len;
  };
  for (const std::size_t len : ref_lens) {
    if (dist(len) < dist(r) || (dist(len) == dist(r) && len < r)) r = len;
  }
  if (hyp_len >= r) return 1.0;
  return std::exp(1.0 -
                  static_cast<double>(r) / static_cast<double>(hyp_len));
}

double bleu_with_tables(const std::vector<int>& hypothesis,
                        const std::vector<NgramCounts>& clip_by_order,
                        const std::vector<std::size_t>& ref_lens) {
  const std::size_t c = hypothesis.size();
  if (c == 0) return 0.0;
  double log_sum = 0.0;
  int levels = 0;
  for (std::size_t n = 1; n <= clip_by_order.size(); ++n) {
    if (c < n) break;
    const NgramCounts hyp_counts =
        count_ngrams(hypothesis, static_cast<int>(n));
    log_sum += std::log(modified_precision(hyp_counts, clip_by_order[n - 1]));
    ++levels;
  }
  const double geo = std::exp(log_sum / static_cast<double>(levels));
  return brevity_penalty(c, ref_lens) * geo;
}

const char kReportHeaderNote[] =
    "# bleu: token-level n-grams; smoothing: zero numerators set to 0.1; "
    "brevity penalty: closest reference length, ties toward shorter\n";

}  // namespace

double bleu(const std::vector<int>& hypothesis,
            const std::vector<std::vector<int>>& references, int max_n) {
  if (max_n < 1) {
    throw ValidationError("bleu max_n must be >= 1");
  }
  if (references.empty()) {
    throw ValidationError("bleu needs at least one reference");
  }
  std::vector<NgramCounts> clip_by_order;
  clip_by_order.reserve(static_cast<std::size_t>(max_n));
  for (int n = 1; n <= max_n; ++n) {
    clip_by_order.push_back(max_ref_counts(references, n));
  }
  std::vector<std::size_t> ref_lens;
  ref_lens.reserve(references.size());
  for (const auto& ref : references) ref_lens.push_back(ref.size());
  return bleu_with_tables(hypothesis, clip_by_order, ref_lens);
}

double self_bleu(const std::vector<std::vector<int>>& texts, int max_n) {
  if (texts.size() < 2) {
    throw ValidationError("self_bleu needs at least 2 texts");
  }
  if (max_n < 1) {
    throw ValidationError("self_bleu max_n must be >= 1");
  }
  const std::size_t m = texts.size();

  // For each order, track the best and second-best count of every gram
  // along with which text holds the best. Leave-one-out clipping for text i
  // is then best (if owned elsewhere) or second-best (if i owns the max).
  struct Slot {
    int best = 0;
    int second = 0;
    std::size_t owner = 0;
  };
  std::vector<std::map<std::vector<int>, Slot>> tables(
      static_cast<std::size_t>(max_n));
  std::vector<std::vector<NgramCounts>> per_text(m);
  for (std::size_t i = 0; i < m; ++i) {
    per_text[i].reserve(static_cast<std::size_t>(max_n));
    for (int n = 1; n <= max_n; ++n) {
      per_text[i].push_back(count_ngrams(texts[i], n));
      for (const auto& [gram, count] : per_text[i].back()) {
        Slot& s = tables[static_cast<std::size_t>(n - 1)][gram];
        if (count > s.best) {
          s.second = s.best;
          s.best = count;
          s.owner = i;
        } else if (count > s.second) {
          s.second = count;
        }
      }
    }
  }

  std::vector<std::size_t> lens;
  lens.reserve(m);
  for (const auto& t : texts) lens.push_back(t.size());

  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = texts[i].size();
    if (c == 0) continue;  // empty hypothesis scores zero

    std::vector<std::size_t> other_lens;
    other_lens.reserve(m - 1);
    for (std::size_t j = 0; j < m; ++j) {
      if (j != i) other_lens.push_back(lens[j]);
    }

    double log_sum = 0.0;
    int levels = 0;
    for (int n = 1; n <= max_n; ++n) {
      if (c < static_cast<std::size_t>(n)) break;
      const NgramCounts& hyp_counts =
          per_text[i][static_cast<std::size_t>(n - 1)];
      const auto& table = tables[static_cast<std::size_t>(n - 1)];
      long long num = 0;
      long long den = 0;
      for (const auto& [gram, count] : hyp_counts) {
        const Slot& s = table.at(gram);
        const int clip = s.owner == i ? s.second : s.best;
        num += std::min(count, clip);
        den += count;
      }
      const double precision =
          num > 0 ? static_cast<double>(num) / static_cast<double>(den)
                  : 0.1 / static_cast<double>(den);
      log_sum += std::log(precision);
      ++levels;
    }
    const double geo = std::exp(log_sum / static_cast<double>(levels));
    total += brevity_penalty(c, other_lens) * geo;
  }
  return total / static_cast<double>(m);
}

std::vector<int> scoring_tokens(const std::vector<int>& ids) {
  std::vector<int> out;
  out.reserve(ids.size());
  for (const int id : ids) {
    if (id == kBosId || id == kEosId || id == kPadId) continue;
    out.push_back(id);
  }
  return out;
}

std::vector<ScoreReport> tradeoff_report(const ModelParams<float>& params,
                                         const BpeModel& tokenizer,
                                         const std::vector<Recipe>& recipes,
                                         const std::vector<Couplet>& references,
                                         int n_samples,
                                         const std::string& report_csv,
                                         const std::string& curve_csv,
                                         int n_threads) {
  if (n_samples < 2) {
    throw ValidationError("tradeoff_report needs n_samples >= 2");
  }
  if (references.empty()) {
    throw ValidationError("tradeoff_report needs references");
  }
  std::vector<std::vector<int>> ref_tokens;
  ref_tokens.reserve(references.size());
  for (const Couplet& c : references) {
    ref_tokens.push_back(scoring_tokens(tokenizer.encode_couplet(c)));
  }

  std::vector<ScoreReport> reports;
  reports.reserve(recipes.size());
  for (const Recipe& recipe : recipes) {
    const std::vector<GenerationResult> samples =
        generate_samples(params, tokenizer, recipe.cfg, n_samples, n_threads);
    std::vector<std::vector<int>> texts;
    int malformed = 0;
    for (const GenerationResult& g : samples) {
      if (g.malformed) {
        ++malformed;
        continue;
      }
      texts.push_back(scoring_tokens(g.tokens));
    }
    if (texts.size() < 2) {
      throw RunError("recipe '" + recipe.label +
                     "' produced fewer than 2 well-formed samples out of " +
                     std::to_string(n_samples));
    }

    ScoreReport rep;
    rep.recipe = recipe.label;
    rep.n_scored = static_cast<int>(texts.size());
    rep.n_malformed = malformed;
    rep.high_malformed =
        static_cast<double>(malformed) > 0.05 * static_cast<double>(n_samples);

    double b2 = 0.0, b3 = 0.0, b4 = 0.0;
    for (const auto& t : texts) {
      b2 += bleu(t, ref_tokens, 2);
      b3 += bleu(t, ref_tokens, 3);
      b4 += bleu(t, ref_tokens, 4);
    }
    const double m = static_cast<double>(texts.size());
    rep.bleu2 = b2 / m;
    rep.bleu3 = b3 / m;
    rep.bleu4 = b4 / m;
    rep.sbleu2 = self_bleu(texts, 2);
    rep.sbleu3 = self_bleu(texts, 3);
    rep.sbleu4 = self_bleu(texts, 4);
    reports.push_back(std::move(rep));
  }

  if (!report_csv.empty()) write_report_csv(report_csv, reports);
  if (!curve_csv.empty()) write_curve_csv(curve_csv, reports);
  return reports;
}

void write_report_csv(const std::string& path,
                      const std::vector<ScoreReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write report CSV: " + path);
  out << kReportHeaderNote;
  out << "recipe,bleu2,bleu3,bleu4,sbleu2,sbleu3,sbleu4,n\n";
  char buf[256];
  for (const ScoreReport& r : reports) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d\n",
                  r.recipe.c_str(), r.bleu2, r.bleu3, r.bleu4, r.sbleu2,
                  r.sbleu3, r.sbleu4, r.n_scored);
    out << buf;
  }
  if (!out) throw RunError("write failed: " + path);
}

void write_curve_csv(const std::string& path,
                     const std::vector<ScoreReport>& reports) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RunError("cannot write curve CSV: " + path);
  out << "recipe,one_minus_bleu4,sbleu4\n";
  char buf[160];
  for (const ScoreReport& r : reports) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", r.recipe.c_str(),
                  1.0 - r.bleu4, r.sbleu4);
    out << buf;
  }
  if (!out) throw RunError("write failed: " + path);
}

}  // namespace versekit
