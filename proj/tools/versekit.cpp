#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "versekit/bpe.hpp"
#include "versekit/bundled_corpus.hpp"
#include "versekit/checkpoint.hpp"
#include "versekit/corpus.hpp"
#include "versekit/decoding.hpp"
#include "versekit/errors.hpp"
#include "versekit/eval.hpp"
#include "versekit/manifest.hpp"
#include "versekit/model.hpp"
#include "versekit/rng.hpp"
#include "versekit/trainer.hpp"
#include "versekit/version.hpp"

namespace fs = std::filesystem;
using versekit::RunError;
using versekit::ValidationError;

namespace {

std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);  // shortest round-trip form
}

std::string fmt_u64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%" PRIu64, v);
  return std::string(buf);
}

// Delimiter flags accept the escape sequences \t, \n, and \\ so a tab can be
// written in configs and shells.
std::string unescape_delimiter(const std::string& raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] == '\\' && i + 1 < raw.size()) {
      const char next = raw[i + 1];
      if (next == 't') {
        out += '\t';
        ++i;
        continue;
      }
      if (next == 'n') {
        out += '\n';
        ++i;
        continue;
      }
      if (next == '\\') {
        out += '\\';
        ++i;
        continue;
      }
    }
    out += raw[i];
  }
  return out;
}

// Flat `key = value` config support. Values from the file are appended to
// the argument list as `--key=value` for keys the command line did not set,
// giving the resolution order defaults < config file < flags.
std::vector<std::string> config_args(const std::string& path,
                                     const std::vector<std::string>& argv) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open config file: " + path);

  const auto trim = [](std::string s) {
    const std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };

  std::vector<std::string> extra;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#' || stripped[0] == ';') {
      continue;
    }
    const std::size_t eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) +
                            " is not key = value: " + stripped);
    }
    const std::string key = trim(stripped.substr(0, eq));
    std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) {
      throw ValidationError("config line " + std::to_string(line_no) +
                            " has an empty key");
    }
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }

    const std::string flag = "--" + key;
    bool on_command_line = false;
    for (const std::string& arg : argv) {
      if (arg == flag || arg.rfind(flag + "=", 0) == 0) {
        on_command_line = true;
        break;
      }
    }
    if (!on_command_line) extra.push_back(flag + "=" + value);
  }
  return extra;
}

std::vector<versekit::Couplet> read_couplets_checked(const std::string& path) {
  versekit::FetchReport report;
  std::vector<versekit::Couplet> couplets =
      versekit::read_couplets_jsonl(path, report);
  for (const versekit::RecordIssue& issue : report.skipped) {
    std::cerr << "warning: " << path << " line " << issue.index << ": "
              << issue.reason << "\n";
  }
  if (couplets.empty()) {
    throw ValidationError("no couplets in " + path);
  }
  return couplets;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw RunError("cannot create directory " + dir + ": " + ec.message());
}

// ---- decoding flag bundle shared by generate and eval ----

struct DecodeFlags {
  versekit::DecodeConfig cfg;
  std::string anti_lm = "off";
  std::string mode;  // "", "fixed", or "annealed"
  CLI::Option* opt_t = nullptr;
  CLI::Option* opt_t0 = nullptr;
  CLI::Option* opt_tf = nullptr;
  CLI::Option* opt_step = nullptr;
  CLI::Option* opt_mode = nullptr;
};

void add_decode_flags(CLI::App* cmd, DecodeFlags& df) {
  cmd->add_option("--k", df.cfg.k, "Top-K cutoff");
  cmd->add_option("--p", df.cfg.p, "nucleus mass in (0, 1]");
  df.opt_t = cmd->add_option("--t", df.cfg.t, "fixed temperature");
  df.opt_t0 = cmd->add_option("--t0", df.cfg.t0, "annealing start temperature");
  df.opt_tf = cmd->add_option("--tf", df.cfg.tf, "annealing floor temperature");
  df.opt_step =
      cmd->add_option("--anneal-step", df.cfg.anneal_step,
                      "annealing decrement per emitted token");
  df.opt_mode = cmd->add_option("--temperature-mode", df.mode,
                                "fixed or annealed (inferred from flags when "
                                "omitted)")
                    ->check(CLI::IsMember({"fixed", "annealed"}));
  cmd->add_option("--anti-lm", df.anti_lm,
                  "bigram penalty: off, inf, or a non-negative lambda");
  cmd->add_option("--max-tokens", df.cfg.max_tokens,
                  "token budget per sample");
  cmd->add_option("--seed", df.cfg.seed, "RNG seed");
}

versekit::DecodeConfig resolve_decode(const DecodeFlags& df) {
  versekit::DecodeConfig cfg = df.cfg;

  const bool fixed_given = df.opt_t->count() > 0;
  const bool anneal_given = df.opt_t0->count() > 0 ||
                            df.opt_tf->count() > 0 ||
                            df.opt_step->count() > 0;
  if (df.opt_mode->count() > 0) {
    cfg.temperature_mode = df.mode == "annealed"
                               ? versekit::TemperatureMode::kAnnealed
                               : versekit::TemperatureMode::kFixed;
  } else if (anneal_given && !fixed_given) {
    cfg.temperature_mode = versekit::TemperatureMode::kAnnealed;
  } else if (anneal_given && fixed_given) {
    throw ValidationError(
        "both --t and annealing flags given; pass --temperature-mode to "
        "disambiguate");
  } else {
    cfg.temperature_mode = versekit::TemperatureMode::kFixed;
  }

  if (df.anti_lm == "off") {
    cfg.anti_lm = false;
  } else if (df.anti_lm == "inf" || df.anti_lm == "infinity") {
    cfg.anti_lm = true;
    cfg.anti_lm_lambda = std::numeric_limits<double>::infinity();
  } else {
    try {
      std::size_t pos = 0;
      cfg.anti_lm_lambda = std::stod(df.anti_lm, &pos);
      if (pos != df.anti_lm.size()) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ValidationError("invalid --anti-lm value '" + df.anti_lm +
                            "' (expected off, inf, or a number)");
    }
    cfg.anti_lm = true;
  }

  cfg.validate();
  return cfg;
}

void record_decode_config(std::map<std::string, std::string>& out,
                          const versekit::DecodeConfig& cfg) {
  out["k"] = std::to_string(cfg.k);
  out["p"] = fmt_double(cfg.p);
  out["temperature_mode"] =
      cfg.temperature_mode == versekit::TemperatureMode::kFixed ? "fixed"
                                                                : "annealed";
  out["t"] = fmt_double(cfg.t);
  out["t0"] = fmt_double(cfg.t0);
  out["tf"] = fmt_double(cfg.tf);
  out["anneal_step"] = fmt_double(cfg.anneal_step);
  out["anti_lm"] = cfg.anti_lm ? "on" : "off";
  out["anti_lm_lambda"] = std::isinf(cfg.anti_lm_lambda)
                              ? std::string("inf")
                              : fmt_double(cfg.anti_lm_lambda);
  out["max_tokens"] = std::to_string(cfg.max_tokens);
  out["seed"] = fmt_u64(cfg.seed);
}

// ---- tiny preset ----

struct ModelFlags {
  versekit::ModelConfig cfg;
  std::string preset;
  CLI::Option* opt_d = nullptr;
  CLI::Option* opt_layers = nullptr;
  CLI::Option* opt_heads = nullptr;
  CLI::Option* opt_ffn = nullptr;
  CLI::Option* opt_context = nullptr;
};

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--preset", mf.preset, "named bundle of defaults (tiny)")
      ->check(CLI::IsMember({"tiny"}));
  mf.opt_d = cmd->add_option("--d-model", mf.cfg.d_model, "model width");
  mf.opt_layers =
      cmd->add_option("--n-layers", mf.cfg.n_layers, "decoder stack depth");
  mf.opt_heads =
      cmd->add_option("--n-heads", mf.cfg.n_heads, "attention heads");
  mf.opt_ffn = cmd->add_option("--ffn-hidden", mf.cfg.ffn_hidden,
                               "feed-forward width (0 = 4x d-model)");
  mf.opt_context =
      cmd->add_option("--context-len", mf.cfg.context_len, "context window");
}

// Preset values fill only settings that neither flags nor config touched.
void apply_tiny_model_preset(ModelFlags& mf) {
  if (mf.preset != "tiny") return;
  if (mf.opt_d->count() == 0) mf.cfg.d_model = 16;
  if (mf.opt_layers->count() == 0) mf.cfg.n_layers = 1;
  if (mf.opt_heads->count() == 0) mf.cfg.n_heads = 2;
  if (mf.opt_ffn->count() == 0) mf.cfg.ffn_hidden = 64;
  if (mf.opt_context->count() == 0) mf.cfg.context_len = 96;
}

constexpr int kTinyBpeVocab = 64;

std::vector<versekit::Couplet> bundled_couplets() {
  versekit::FetchReport fetch_report;
  const std::vector<versekit::RawPoem> poems =
      versekit::parse_poems_text(versekit::kBundledCorpusJsonl, fetch_report);
  std::vector<versekit::Couplet> couplets;
  versekit::CoupletReport couplet_report;
  for (const versekit::RawPoem& poem : poems) {
    for (versekit::Couplet& c :
         versekit::split_into_couplets(poem, "\t", couplet_report)) {
      couplets.push_back(std::move(c));
    }
  }
  return couplets;
}

// ---- subcommand option bags ----

struct FetchOpts {
  std::string source;
  std::string out;
  versekit::FetchOptions options;
};

struct PrepareOpts {
  std::string input;
  std::string out_dir;
  std::string delimiter = "\\t";
  int min_suffix = 2;
  bool keep_non_rhyming = false;
  double ratio = 0.95;
  std::uint64_t seed = 0;
};

struct TokenizeOpts {
  std::string input;
  std::string out;
  int vocab_size = 8000;
};

struct SweepOpts {
  std::string input;
  std::string out;
  std::vector<int> sizes = {64, 128, 256, 512};
};

struct TrainOpts {
  std::string train_path;
  std::string val_path;
  std::string bpe_path;
  std::string out_dir;
  ModelFlags model;
  versekit::TrainConfig train_cfg;
  bool tied = false;
  double dropout = 0.1;
  CLI::Option* opt_dropout = nullptr;
};

struct GenerateOpts {
  std::string checkpoint;
  std::string bpe_path;
  std::string out;
  std::string delimiter = "\\t";
  int n_samples = 1;
  int threads = 1;
  bool trace = false;
  DecodeFlags decode;
};

struct EvalOpts {
  std::string checkpoint;
  std::string bpe_path;
  std::string refs_path;
  std::string out_dir;
  std::string label = "default";
  std::string recipes_path;
  int n_samples = 200;
  int ref_subsample = 0;
  int threads = 1;
  DecodeFlags decode;
};

struct CheckGradsOpts {
  ModelFlags model;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
  std::string out_dir;
  double smoothing = 0.1;
  int batch_couplets = 2;
};

// ---- subcommand bodies ----

void run_fetch(const FetchOpts& o) {
  versekit::FetchReport report;
  const std::vector<versekit::RawPoem> poems =
      versekit::fetch_poems(o.source, o.options, report);

  std::ofstream out(o.out, std::ios::binary);
  if (!out) throw RunError("cannot write " + o.out);
  for (const versekit::RawPoem& p : poems) {
    nlohmann::json j;
    j["id"] = p.id;
    j["title"] = p.title;
    j["body"] = p.body;
    j["poet"] = p.poet;
    out << j.dump() << "\n";
  }
  out.close();
  if (!out) throw RunError("write failed: " + o.out);

  versekit::RunManifest m;
  m.command = "fetch";
  m.config["source"] = o.source;
  m.config["page_limit"] = std::to_string(o.options.page_limit);
  m.config["page_size"] = std::to_string(o.options.page_size);
  m.config["max_attempts"] = std::to_string(o.options.max_attempts);
  m.config["backoff_ms"] = std::to_string(o.options.backoff_ms);
  if (fs::exists(o.source)) {
    m.inputs[o.source] = versekit::hash_file_hex(o.source);
  }
  m.outputs[o.out] = versekit::hash_file_hex(o.out);
  versekit::write_manifest(o.out + ".manifest.json", m);

  std::cout << "fetched " << report.parsed << " poems";
  if (!report.skipped.empty()) {
    std::cout << ", skipped " << report.skipped.size() << " records";
    for (const versekit::RecordIssue& issue : report.skipped) {
      std::cerr << "warning: record " << issue.index << ": " << issue.reason
                << "\n";
    }
  }
  std::cout << " -> " << o.out << "\n";
}

void run_prepare(const PrepareOpts& o) {
  const std::string delimiter = unescape_delimiter(o.delimiter);
  if (delimiter.empty()) throw ValidationError("delimiter must be non-empty");
  if (o.min_suffix < 1) throw ValidationError("min-suffix must be >= 1");

  versekit::FetchReport fetch_report;
  std::vector<versekit::RawPoem> poems;
  if (o.input == "bundled") {
    poems =
        versekit::parse_poems_text(versekit::kBundledCorpusJsonl, fetch_report);
  } else {
    versekit::FetchOptions fo;
    poems = versekit::fetch_poems(o.input, fo, fetch_report);
  }
  for (const versekit::RecordIssue& issue : fetch_report.skipped) {
    std::cerr << "warning: record " << issue.index << ": " << issue.reason
              << "\n";
  }

  versekit::CoupletReport couplet_report;
  std::vector<versekit::Couplet> couplets;
  for (const versekit::RawPoem& poem : poems) {
    for (versekit::Couplet& c :
         versekit::split_into_couplets(poem, delimiter, couplet_report)) {
      couplets.push_back(std::move(c));
    }
  }

  std::size_t filtered = 0;
  if (!o.keep_non_rhyming) {
    std::vector<versekit::Couplet> rhyming;
    rhyming.reserve(couplets.size());
    for (versekit::Couplet& c : couplets) {
      if (versekit::is_rhyming(c, static_cast<std::size_t>(o.min_suffix))) {
        rhyming.push_back(std::move(c));
      } else {
        ++filtered;
      }
    }
    couplets = std::move(rhyming);
  }

  const versekit::DatasetSplit split =
      versekit::build_split(couplets, o.ratio, o.seed);

  ensure_dir(o.out_dir);
  const std::string train_path = o.out_dir + "/train.jsonl";
  const std::string val_path = o.out_dir + "/val.jsonl";
  versekit::write_couplets_jsonl(train_path, split.train);
  versekit::write_couplets_jsonl(val_path, split.validation);

  versekit::RunManifest m;
  m.command = "prepare";
  m.config["input"] = o.input;
  m.config["delimiter"] = o.delimiter;
  m.config["min_suffix"] = std::to_string(o.min_suffix);
  m.config["keep_non_rhyming"] = o.keep_non_rhyming ? "true" : "false";
  m.config["ratio"] = fmt_double(o.ratio);
  m.config["seed"] = fmt_u64(o.seed);
  m.stats["poems"] = std::to_string(fetch_report.parsed);
  m.stats["records_skipped"] = std::to_string(fetch_report.skipped.size());
  m.stats["couplets_kept"] = std::to_string(couplets.size());
  m.stats["lines_dropped"] = std::to_string(couplet_report.dropped_lines);
  m.stats["filtered_non_rhyming"] = std::to_string(filtered);
  m.stats["train_size"] = std::to_string(split.train.size());
  m.stats["val_size"] = std::to_string(split.validation.size());
  if (o.input != "bundled" && fs::exists(o.input)) {
    m.inputs[o.input] = versekit::hash_file_hex(o.input);
  }
  m.outputs["train.jsonl"] = versekit::hash_file_hex(train_path);
  m.outputs["val.jsonl"] = versekit::hash_file_hex(val_path);
  versekit::write_manifest(o.out_dir + "/manifest.json", m);

  std::cout << "kept " << couplets.size() << " couplets ("
            << couplet_report.dropped_lines << " lines dropped, " << filtered
            << " non-rhyming filtered); split " << split.train.size() << "/"
            << split.validation.size() << " -> " << o.out_dir << "\n";
}

void run_tokenize(const TokenizeOpts& o) {
  const std::vector<versekit::Couplet> couplets = read_couplets_checked(o.input);
  const versekit::BpeModel model =
      versekit::train_bpe(couplets, o.vocab_size);
  versekit::save_bpe(model, o.out);

  long long total_tokens = 0;
  for (const versekit::Couplet& c : couplets) {
    total_tokens += static_cast<long long>(model.encode_couplet(c).size());
  }
  const double avg = static_cast<double>(total_tokens) /
                     static_cast<double>(couplets.size());

  versekit::RunManifest m;
  m.command = "tokenize";
  m.config["input"] = o.input;
  m.config["vocab_size"] = std::to_string(o.vocab_size);
  m.stats["actual_vocab_size"] = std::to_string(model.vocab_size);
  m.stats["model_vocab_size"] = std::to_string(model.model_vocab_size());
  m.stats["merges"] = std::to_string(model.merges.size());
  m.stats["avg_tokens_per_couplet"] = fmt_double(avg);
  m.inputs[o.input] = versekit::hash_file_hex(o.input);
  m.outputs[o.out] = versekit::hash_file_hex(o.out);
  versekit::write_manifest(o.out + ".manifest.json", m);

  std::cout << "trained BPE vocab " << model.vocab_size << " ("
            << model.merges.size() << " merges, model vocab "
            << model.model_vocab_size() << "), avg " << avg
            << " tokens/couplet -> " << o.out << "\n";
}

void run_sweep(const SweepOpts& o) {
  const std::vector<versekit::Couplet> couplets = read_couplets_checked(o.input);
  const std::vector<versekit::SweepPoint> points =
      versekit::vocab_sweep(couplets, o.sizes);

  std::ofstream out(o.out, std::ios::binary);
  if (!out) throw RunError("cannot write " + o.out);
  out << "vocab_size,avg_tokens\n";
  char buf[64];
  for (const versekit::SweepPoint& pt : points) {
    std::snprintf(buf, sizeof(buf), "%d,%.9f\n", pt.vocab_size,
                  pt.avg_tokens_per_couplet);
    out << buf;
  }
  out.close();
  if (!out) throw RunError("write failed: " + o.out);

  versekit::RunManifest m;
  m.command = "sweep-vocab";
  m.config["input"] = o.input;
  std::string sizes_str;
  for (const int s : o.sizes) {
    if (!sizes_str.empty()) sizes_str += ",";
    sizes_str += std::to_string(s);
  }
  m.config["sizes"] = sizes_str;
  m.inputs[o.input] = versekit::hash_file_hex(o.input);
  m.outputs[o.out] = versekit::hash_file_hex(o.out);
  versekit::write_manifest(o.out + ".manifest.json", m);

  for (const versekit::SweepPoint& pt : points) {
    std::cout << pt.vocab_size << " -> " << pt.avg_tokens_per_couplet
              << " tokens/couplet\n";
  }
  std::cout << "sweep -> " << o.out << "\n";
}

void run_train(TrainOpts& o) {
  apply_tiny_model_preset(o.model);
  o.model.cfg.dropout = o.dropout;
  if (o.model.preset == "tiny" && o.opt_dropout->count() == 0) {
    o.model.cfg.dropout = 0.1;
  }
  o.model.cfg.tied_embeddings = o.tied;

  const versekit::BpeModel tokenizer = versekit::load_bpe(o.bpe_path);
  o.model.cfg.vocab_size = tokenizer.model_vocab_size();

  versekit::DatasetSplit split;
  split.train = read_couplets_checked(o.train_path);
  split.validation = read_couplets_checked(o.val_path);
  split.seed = o.train_cfg.seed;
  split.ratio = static_cast<double>(split.train.size()) /
                static_cast<double>(split.train.size() +
                                    split.validation.size());

  ensure_dir(o.out_dir);
  const versekit::TrainResult result = versekit::train(
      o.model.cfg, o.train_cfg, split, tokenizer, o.out_dir);

  versekit::RunManifest m;
  m.command = "train";
  m.config["train"] = o.train_path;
  m.config["val"] = o.val_path;
  m.config["bpe"] = o.bpe_path;
  m.config["d_model"] = std::to_string(o.model.cfg.d_model);
  m.config["n_layers"] = std::to_string(o.model.cfg.n_layers);
  m.config["n_heads"] = std::to_string(o.model.cfg.n_heads);
  m.config["ffn_hidden"] = std::to_string(o.model.cfg.resolved_ffn());
  m.config["context_len"] = std::to_string(o.model.cfg.context_len);
  m.config["dropout"] = fmt_double(o.model.cfg.dropout);
  m.config["tied_embeddings"] = o.tied ? "true" : "false";
  m.config["vocab_size"] = std::to_string(o.model.cfg.vocab_size);
  m.config["epochs"] = std::to_string(o.train_cfg.epochs);
  m.config["batch_size"] = std::to_string(o.train_cfg.batch_size);
  m.config["warmup_steps"] = std::to_string(o.train_cfg.warmup_steps);
  m.config["smoothing"] = fmt_double(o.train_cfg.smoothing);
  m.config["seed"] = fmt_u64(o.train_cfg.seed);
  m.config["grad_clip"] = o.train_cfg.grad_clip ? "true" : "false";
  m.config["grad_clip_norm"] = fmt_double(o.train_cfg.grad_clip_norm);
  m.config["max_steps"] = std::to_string(o.train_cfg.max_steps);
  m.config["checkpoint_every"] = std::to_string(o.train_cfg.checkpoint_every);
  m.stats["steps"] = std::to_string(result.metrics.steps.size());
  m.stats["epochs_run"] = std::to_string(result.metrics.epochs.size());
  m.stats["best_epoch"] = std::to_string(result.best_epoch);
  m.stats["best_val_loss"] = fmt_double(result.best_val_loss);
  m.stats["dropped_train_rows"] =
      std::to_string(result.metrics.dropped_train_rows);
  m.stats["dropped_val_rows"] =
      std::to_string(result.metrics.dropped_val_rows);
  m.stats["param_count"] =
      std::to_string(versekit::param_count(o.model.cfg));
  m.inputs[o.train_path] = versekit::hash_file_hex(o.train_path);
  m.inputs[o.val_path] = versekit::hash_file_hex(o.val_path);
  m.inputs[o.bpe_path] = versekit::hash_file_hex(o.bpe_path);
  m.outputs["metrics.csv"] =
      versekit::hash_file_hex(o.out_dir + "/metrics.csv");
  m.outputs["val.csv"] = versekit::hash_file_hex(o.out_dir + "/val.csv");
  m.outputs["best.ckpt"] = versekit::hash_file_hex(o.out_dir + "/best.ckpt");
  versekit::write_manifest(o.out_dir + "/manifest.json", m);

  std::cout << "trained " << result.metrics.steps.size() << " steps, best epoch "
            << result.best_epoch << " (val loss " << result.best_val_loss
            << ") -> " << o.out_dir << "\n";
}

void run_generate(const GenerateOpts& o) {
  const versekit::DecodeConfig cfg = resolve_decode(o.decode);
  if (o.n_samples < 1) throw ValidationError("n-samples must be >= 1");
  if (o.threads < 1) throw ValidationError("threads must be >= 1");

  versekit::BpeModel tokenizer = versekit::load_bpe(o.bpe_path);
  tokenizer.sep_render = unescape_delimiter(o.delimiter);
  const versekit::ModelParams<float> params =
      versekit::load_checkpoint<float>(o.checkpoint);

  const std::vector<versekit::GenerationResult> samples =
      versekit::generate_samples(params, tokenizer, cfg, o.n_samples,
                                 o.threads);

  std::ofstream out(o.out, std::ios::binary);
  if (!out) throw RunError("cannot write " + o.out);
  int malformed = 0;
  for (int i = 0; i < o.n_samples; ++i) {
    const versekit::GenerationResult& g =
        samples[static_cast<std::size_t>(i)];
    if (g.malformed) ++malformed;
    nlohmann::json j;
    j["text"] = tokenizer.decode(g.tokens);
    j["first"] = g.couplet.first;
    j["second"] = g.couplet.second;
    j["tokens"] = g.tokens;
    j["seed"] =
        versekit::derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
    j["malformed"] = g.malformed;
    if (o.trace) {
      nlohmann::json t;
      t["temperatures"] = g.trace.temperatures;
      t["candidate_counts"] = g.trace.candidate_counts;
      t["penalized_counts"] = g.trace.penalized_counts;
      t["skip_events"] = g.trace.skip_events;
      j["trace"] = t;
    }
    // Byte-fallback tokens can decode to non-UTF-8 bytes; replace those
    // with U+FFFD rather than refusing to write the record.
    out << j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace)
        << "\n";
  }
  out.close();
  if (!out) throw RunError("write failed: " + o.out);

  versekit::RunManifest m;
  m.command = "generate";
  record_decode_config(m.config, cfg);
  m.config["checkpoint"] = o.checkpoint;
  m.config["bpe"] = o.bpe_path;
  m.config["n_samples"] = std::to_string(o.n_samples);
  m.config["trace"] = o.trace ? "true" : "false";
  m.config["delimiter"] = o.delimiter;
  m.stats["malformed"] = std::to_string(malformed);
  m.inputs[o.checkpoint] = versekit::hash_file_hex(o.checkpoint);
  m.inputs[o.bpe_path] = versekit::hash_file_hex(o.bpe_path);
  m.outputs[o.out] = versekit::hash_file_hex(o.out);
  versekit::write_manifest(o.out + ".manifest.json", m);

  std::cout << "generated " << o.n_samples << " samples (" << malformed
            << " malformed) -> " << o.out << "\n";
}

// Recipe file: one recipe per line, `label: key=value key=value ...`.
// Keys are the decode flag names without dashes prefix (k, p, t, t0, tf,
// anneal-step, anti-lm, max-tokens, seed, temperature-mode). '#' starts a
// comment line.
versekit::Recipe parse_recipe_line(const std::string& line,
                                   const versekit::DecodeConfig& base) {
  const std::size_t colon = line.find(':');
  if (colon == std::string::npos || colon == 0) {
    throw ValidationError("recipe line needs 'label: key=value ...': " + line);
  }
  versekit::Recipe recipe;
  recipe.label = line.substr(0, colon);
  recipe.cfg = base;

  bool fixed_given = false;
  bool anneal_given = false;
  std::string mode;
  std::istringstream rest(line.substr(colon + 1));
  std::string kv;
  while (rest >> kv) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("recipe entry is not key=value: " + kv);
    }
    const std::string key = kv.substr(0, eq);
    const std::string value = kv.substr(eq + 1);
    try {
      if (key == "k") {
        recipe.cfg.k = std::stoi(value);
      } else if (key == "p") {
        recipe.cfg.p = std::stod(value);
      } else if (key == "t") {
        recipe.cfg.t = std::stod(value);
        fixed_given = true;
      } else if (key == "t0") {
        recipe.cfg.t0 = std::stod(value);
        anneal_given = true;
      } else if (key == "tf") {
        recipe.cfg.tf = std::stod(value);
        anneal_given = true;
      } else if (key == "anneal-step") {
        recipe.cfg.anneal_step = std::stod(value);
        anneal_given = true;
      } else if (key == "temperature-mode") {
        mode = value;
      } else if (key == "anti-lm") {
        if (value == "off") {
          recipe.cfg.anti_lm = false;
        } else if (value == "inf" || value == "infinity") {
          recipe.cfg.anti_lm = true;
          recipe.cfg.anti_lm_lambda =
              std::numeric_limits<double>::infinity();
        } else {
          recipe.cfg.anti_lm = true;
          recipe.cfg.anti_lm_lambda = std::stod(value);
        }
      } else if (key == "max-tokens") {
        recipe.cfg.max_tokens = std::stoi(value);
      } else if (key == "seed") {
        recipe.cfg.seed = std::stoull(value);
      } else {
        throw ValidationError("unknown recipe key: " + key);
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError("invalid recipe value: " + kv);
    }
  }

  if (mode == "fixed") {
    recipe.cfg.temperature_mode = versekit::TemperatureMode::kFixed;
  } else if (mode == "annealed") {
    recipe.cfg.temperature_mode = versekit::TemperatureMode::kAnnealed;
  } else if (!mode.empty()) {
    throw ValidationError("temperature-mode must be fixed or annealed");
  } else if (anneal_given && !fixed_given) {
    recipe.cfg.temperature_mode = versekit::TemperatureMode::kAnnealed;
  } else if (anneal_given && fixed_given) {
    throw ValidationError("recipe '" + recipe.label +
                          "' mixes t with annealing keys; add "
                          "temperature-mode");
  } else {
    recipe.cfg.temperature_mode = versekit::TemperatureMode::kFixed;
  }
  recipe.cfg.validate();
  return recipe;
}

void run_eval(const EvalOpts& o) {
  if (o.n_samples < 2) throw ValidationError("n-samples must be >= 2");
  if (o.threads < 1) throw ValidationError("threads must be >= 1");
  if (o.ref_subsample < 0) {
    throw ValidationError("ref-subsample must be >= 0");
  }

  const versekit::BpeModel tokenizer = versekit::load_bpe(o.bpe_path);
  const versekit::ModelParams<float> params =
      versekit::load_checkpoint<float>(o.checkpoint);
  std::vector<versekit::Couplet> refs = read_couplets_checked(o.refs_path);

  versekit::DecodeConfig base = resolve_decode(o.decode);
  std::vector<versekit::Recipe> recipes;
  if (!o.recipes_path.empty()) {
    std::ifstream in(o.recipes_path, std::ios::binary);
    if (!in) throw ValidationError("cannot open recipes: " + o.recipes_path);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const std::size_t start = line.find_first_not_of(" \t");
      if (start == std::string::npos || line[start] == '#') continue;
      recipes.push_back(parse_recipe_line(line.substr(start), base));
    }
    if (recipes.empty()) {
      throw ValidationError("no recipes in " + o.recipes_path);
    }
  } else {
    recipes.push_back({o.label, base});
  }

  if (o.ref_subsample > 0 &&
      static_cast<std::size_t>(o.ref_subsample) < refs.size()) {
    versekit::Rng rng(versekit::derive_seed(base.seed, 0x7265667373ULL));
    rng.shuffle(refs);
    refs.resize(static_cast<std::size_t>(o.ref_subsample));
  }

  ensure_dir(o.out_dir);
  const std::string report_path = o.out_dir + "/report.csv";
  const std::string curve_path = o.out_dir + "/curve.csv";
  const std::vector<versekit::ScoreReport> reports =
      versekit::tradeoff_report(params, tokenizer, recipes, refs, o.n_samples,
                                report_path, curve_path, o.threads);

  versekit::RunManifest m;
  m.command = "eval";
  record_decode_config(m.config, base);
  m.config["checkpoint"] = o.checkpoint;
  m.config["bpe"] = o.bpe_path;
  m.config["refs"] = o.refs_path;
  m.config["label"] = o.label;
  m.config["recipes"] = o.recipes_path;
  m.config["n_samples"] = std::to_string(o.n_samples);
  m.config["ref_subsample"] = std::to_string(o.ref_subsample);
  m.stats["references"] = std::to_string(refs.size());
  m.stats["recipes"] = std::to_string(recipes.size());
  m.inputs[o.checkpoint] = versekit::hash_file_hex(o.checkpoint);
  m.inputs[o.bpe_path] = versekit::hash_file_hex(o.bpe_path);
  m.inputs[o.refs_path] = versekit::hash_file_hex(o.refs_path);
  m.outputs["report.csv"] = versekit::hash_file_hex(report_path);
  m.outputs["curve.csv"] = versekit::hash_file_hex(curve_path);
  versekit::write_manifest(o.out_dir + "/manifest.json", m);

  for (const versekit::ScoreReport& r : reports) {
    std::printf(
        "%-12s bleu2/3/4 %.4f %.4f %.4f  sbleu2/3/4 %.4f %.4f %.4f  n=%d%s\n",
        r.recipe.c_str(), r.bleu2, r.bleu3, r.bleu4, r.sbleu2, r.sbleu3,
        r.sbleu4, r.n_scored, r.high_malformed ? "  [>5% malformed]" : "");
  }
  std::cout << "report -> " << report_path << "\n";
}

void run_check_grads(CheckGradsOpts& o) {
  if (o.model.preset.empty() && o.model.opt_d->count() == 0) {
    o.model.preset = "tiny";
  }
  apply_tiny_model_preset(o.model);
  if (o.tolerance <= 0.0) throw ValidationError("tolerance must be > 0");
  if (o.batch_couplets < 1) {
    throw ValidationError("batch-couplets must be >= 1");
  }

  const std::vector<versekit::Couplet> couplets = bundled_couplets();
  const versekit::BpeModel tokenizer =
      versekit::train_bpe(couplets, kTinyBpeVocab);

  versekit::ModelConfig cfg = o.model.cfg;
  cfg.vocab_size = tokenizer.model_vocab_size();
  cfg.validate();

  std::vector<std::vector<int>> rows;
  for (int i = 0; i < o.batch_couplets &&
                  i < static_cast<int>(couplets.size());
       ++i) {
    rows.push_back(
        tokenizer.encode_couplet(couplets[static_cast<std::size_t>(i)]));
  }
  const versekit::Batch batch =
      versekit::pack_batch(rows, versekit::kPadId);

  versekit::ModelParams<double> params = versekit::init_model<double>(
      cfg, versekit::derive_seed(o.seed, 0));
  const versekit::GradCheckReport report = versekit::gradient_check(
      params, batch, o.smoothing, versekit::kPadId, o.tolerance, o.seed);

  double worst = 0.0;
  for (const versekit::GradCheckEntry& e : report.entries) {
    worst = std::max(worst, e.max_rel_err);
    std::printf("%-24s %10.3e  (%zu coords) %s\n", e.tensor.c_str(),
                e.max_rel_err, e.coords_checked,
                e.max_rel_err <= o.tolerance ? "ok" : "FAIL");
  }
  std::printf("gradient check %s: max rel err %.3e vs tolerance %.1e\n",
              report.passed ? "PASSED" : "FAILED", worst, o.tolerance);

  if (!o.out_dir.empty()) {
    ensure_dir(o.out_dir);
    nlohmann::json j;
    j["passed"] = report.passed;
    j["tolerance"] = report.tolerance;
    j["max_rel_err"] = worst;
    nlohmann::json entries = nlohmann::json::array();
    for (const versekit::GradCheckEntry& e : report.entries) {
      entries.push_back({{"tensor", e.tensor},
                         {"max_rel_err", e.max_rel_err},
                         {"coords_checked", e.coords_checked}});
    }
    j["tensors"] = entries;
    const std::string report_path = o.out_dir + "/grad_check.json";
    std::ofstream out(report_path, std::ios::binary);
    if (!out) throw RunError("cannot write " + report_path);
    out << j.dump(2) << "\n";
    out.close();
    if (!out) throw RunError("write failed: " + report_path);

    versekit::RunManifest m;
    m.command = "check-grads";
    m.config["preset"] = o.model.preset;
    m.config["d_model"] = std::to_string(cfg.d_model);
    m.config["n_layers"] = std::to_string(cfg.n_layers);
    m.config["n_heads"] = std::to_string(cfg.n_heads);
    m.config["ffn_hidden"] = std::to_string(cfg.resolved_ffn());
    m.config["context_len"] = std::to_string(cfg.context_len);
    m.config["vocab_size"] = std::to_string(cfg.vocab_size);
    m.config["tolerance"] = fmt_double(o.tolerance);
    m.config["smoothing"] = fmt_double(o.smoothing);
    m.config["seed"] = fmt_u64(o.seed);
    m.config["batch_couplets"] = std::to_string(o.batch_couplets);
    m.outputs["grad_check.json"] = versekit::hash_file_hex(report_path);
    versekit::write_manifest(o.out_dir + "/manifest.json", m);
  }

  if (!report.passed) {
    throw RunError("gradient check failed");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"versekit: train and sample a couplet language model"};
  app.require_subcommand(1);
  std::ostringstream version;
  version << "versekit " << versekit::kVersion << " (checkpoint format "
          << versekit::kCheckpointFormatVersion << ", bpe format "
          << versekit::kBpeFormatVersion << ", manifest format "
          << versekit::kManifestFormatVersion << ")";
  app.set_version_flag("--version", version.str());

  std::string config_path;
  const auto add_config_opt = [&config_path](CLI::App* cmd) {
    cmd->add_option("--config", config_path,
                    "flat key = value file; flags override it");
  };

  FetchOpts fetch_opts;
  CLI::App* fetch = app.add_subcommand(
      "fetch", "download or copy poem records to a local JSONL file");
  add_config_opt(fetch);
  fetch->add_option("--source", fetch_opts.source,
                    "HTTP(S) URL or local JSON/JSONL file")
      ->required();
  fetch->add_option("--out", fetch_opts.out, "output poems JSONL")->required();
  fetch->add_option("--page-limit", fetch_opts.options.page_limit,
                    "pages to request from an HTTP source");
  fetch->add_option("--page-size", fetch_opts.options.page_size,
                    "records per page");
  fetch->add_option("--max-attempts", fetch_opts.options.max_attempts,
                    "attempts per page before giving up");
  fetch->add_option("--backoff-ms", fetch_opts.options.backoff_ms,
                    "initial retry backoff in milliseconds");
  fetch->callback([&]() { run_fetch(fetch_opts); });

  PrepareOpts prepare_opts;
  CLI::App* prepare = app.add_subcommand(
      "prepare",
      "split poems into couplets, filter rhymes, make train/val sets");
  add_config_opt(prepare);
  prepare->add_option("--input", prepare_opts.input,
                      "poems JSONL, or 'bundled' for the sample corpus")
      ->required();
  prepare->add_option("--out-dir", prepare_opts.out_dir,
                      "directory for train.jsonl and val.jsonl")
      ->required();
  prepare->add_option("--delimiter", prepare_opts.delimiter,
                      "hemistich delimiter (\\t, \\n, \\\\ recognized)");
  prepare->add_option("--min-suffix", prepare_opts.min_suffix,
                      "rhyme suffix length in code points");
  prepare->add_flag("--keep-non-rhyming", prepare_opts.keep_non_rhyming,
                    "skip the rhyme filter");
  prepare->add_option("--ratio", prepare_opts.ratio,
                      "train fraction in (0, 1)");
  prepare->add_option("--seed", prepare_opts.seed, "shuffle seed");
  prepare->callback([&]() { run_prepare(prepare_opts); });

  TokenizeOpts tokenize_opts;
  CLI::App* tokenize =
      app.add_subcommand("tokenize", "train a BPE model on couplets");
  add_config_opt(tokenize);
  tokenize->add_option("--input", tokenize_opts.input, "couplet JSONL")
      ->required();
  tokenize->add_option("--out", tokenize_opts.out, "output BPE model file")
      ->required();
  tokenize->add_option("--vocab-size", tokenize_opts.vocab_size,
                       "target vocabulary size (specials included)");
  tokenize->callback([&]() { run_tokenize(tokenize_opts); });

  SweepOpts sweep_opts;
  CLI::App* sweep = app.add_subcommand(
      "sweep-vocab", "average tokens per couplet across vocabulary sizes");
  add_config_opt(sweep);
  sweep->add_option("--input", sweep_opts.input, "couplet JSONL")->required();
  sweep->add_option("--out", sweep_opts.out, "output CSV")->required();
  sweep->add_option("--sizes", sweep_opts.sizes,
                    "ascending vocabulary sizes")
      ->delimiter(',');
  sweep->callback([&]() { run_sweep(sweep_opts); });

  TrainOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "train the decoder model");
  add_config_opt(train);
  train->add_option("--train", train_opts.train_path, "training couplet JSONL")
      ->required();
  train->add_option("--val", train_opts.val_path, "validation couplet JSONL")
      ->required();
  train->add_option("--bpe", train_opts.bpe_path, "BPE model file")
      ->required();
  train->add_option("--out-dir", train_opts.out_dir,
                    "directory for checkpoints and metrics")
      ->required();
  add_model_flags(train, train_opts.model);
  train_opts.opt_dropout =
      train->add_option("--dropout", train_opts.dropout, "dropout rate");
  train->add_flag("--tied-embeddings", train_opts.tied,
                  "share the embedding with the output projection");
  train->add_option("--epochs", train_opts.train_cfg.epochs, "epoch budget");
  train->add_option("--batch-size", train_opts.train_cfg.batch_size,
                    "couplets per step");
  train->add_option("--warmup-steps", train_opts.train_cfg.warmup_steps,
                    "learning-rate warmup steps");
  train->add_option("--smoothing", train_opts.train_cfg.smoothing,
                    "label smoothing factor");
  train->add_option("--seed", train_opts.train_cfg.seed, "training seed");
  train->add_flag("--grad-clip", train_opts.train_cfg.grad_clip,
                  "clip gradients by global norm");
  train->add_option("--grad-clip-norm", train_opts.train_cfg.grad_clip_norm,
                    "global-norm threshold");
  train->add_option("--max-steps", train_opts.train_cfg.max_steps,
                    "stop after this many steps (0 = epochs only)");
  train->add_option("--checkpoint-every",
                    train_opts.train_cfg.checkpoint_every,
                    "extra checkpoint interval in steps (0 = off)");
  train->callback([&]() { run_train(train_opts); });

  GenerateOpts gen_opts;
  CLI::App* generate =
      app.add_subcommand("generate", "sample couplets from a checkpoint");
  add_config_opt(generate);
  generate->add_option("--checkpoint", gen_opts.checkpoint, "model checkpoint")
      ->required();
  generate->add_option("--bpe", gen_opts.bpe_path, "BPE model file")
      ->required();
  generate->add_option("--out", gen_opts.out, "output samples JSONL")
      ->required();
  add_decode_flags(generate, gen_opts.decode);
  generate->add_option("--n-samples", gen_opts.n_samples,
                       "number of couplets to sample");
  generate->add_option("--threads", gen_opts.threads,
                       "worker cap for sampling");
  generate->add_flag("--trace", gen_opts.trace,
                     "record per-step pipeline details in each sample");
  generate->add_option("--delimiter", gen_opts.delimiter,
                       "hemistich delimiter used when rendering text");
  generate->callback([&]() { run_generate(gen_opts); });

  EvalOpts eval_opts;
  CLI::App* evalc = app.add_subcommand(
      "eval", "score generated samples with BLEU and Self-BLEU");
  add_config_opt(evalc);
  evalc->add_option("--checkpoint", eval_opts.checkpoint, "model checkpoint")
      ->required();
  evalc->add_option("--bpe", eval_opts.bpe_path, "BPE model file")->required();
  evalc->add_option("--refs", eval_opts.refs_path, "reference couplet JSONL")
      ->required();
  evalc->add_option("--out-dir", eval_opts.out_dir,
                    "directory for report.csv and curve.csv")
      ->required();
  add_decode_flags(evalc, eval_opts.decode);
  evalc->add_option("--label", eval_opts.label,
                    "recipe label when no recipe file is given");
  evalc->add_option("--recipes", eval_opts.recipes_path,
                    "recipe file, one 'label: key=value ...' per line");
  evalc->add_option("--n-samples", eval_opts.n_samples,
                    "samples generated per recipe");
  evalc->add_option("--ref-subsample", eval_opts.ref_subsample,
                    "cap the reference set (0 = use all, seeded choice)");
  evalc->add_option("--threads", eval_opts.threads,
                    "worker cap for sampling");
  evalc->callback([&]() { run_eval(eval_opts); });

  CheckGradsOpts grads_opts;
  CLI::App* grads = app.add_subcommand(
      "check-grads", "finite-difference check of the analytic gradients");
  add_config_opt(grads);
  add_model_flags(grads, grads_opts.model);
  grads->add_option("--tolerance", grads_opts.tolerance,
                    "max relative error allowed");
  grads->add_option("--smoothing", grads_opts.smoothing,
                    "label smoothing factor for the checked loss");
  grads->add_option("--seed", grads_opts.seed, "init and subsample seed");
  grads->add_option("--batch-couplets", grads_opts.batch_couplets,
                    "bundled couplets in the probe batch");
  grads->add_option("--out-dir", grads_opts.out_dir,
                    "optional directory for grad_check.json");
  grads->callback([&]() { run_check_grads(grads_opts); });

  try {
    std::vector<std::string> args;
    args.reserve(static_cast<std::size_t>(argc > 0 ? argc - 1 : 0));
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);

    std::string conf_file;
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) {
        conf_file = args[i + 1];
      } else if (args[i].rfind("--config=", 0) == 0) {
        conf_file = args[i].substr(9);
      }
    }
    if (!conf_file.empty()) {
      for (std::string& extra : config_args(conf_file, args)) {
        args.push_back(std::move(extra));
      }
    }

    std::vector<const char*> cargs;
    cargs.reserve(args.size() + 1);
    cargs.push_back(argc > 0 ? argv[0] : "versekit");
    for (const std::string& a : args) cargs.push_back(a.c_str());
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RunError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
