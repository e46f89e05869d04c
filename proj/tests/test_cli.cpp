#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "support.hpp"
#include "versekit/rng.hpp"

// VERSEKIT_CLI_PATH is injected by the build as the path to the versekit
// binary; every test here drives the tool as a subprocess.

namespace {

const std::string kCli = std::string("\"") + VERSEKIT_CLI_PATH + "\"";

vktest::CommandResult run_cli(const std::string& args) {
  return vktest::run_command(kCli + " " + args);
}

bool file_exists(const std::string& path) {
  return std::filesystem::exists(path);
}

// One trained pipeline shared by the generate and eval smoke tests. The
// model is small but trained long enough that sampled couplets are almost
// always well formed. Sampling uses the final-epoch checkpoint: with only a
// handful of held-out couplets the early-stopping pick lands on a barely
// trained epoch, and its samples are mostly malformed.
struct Pipeline {
  vktest::TempDir dir;
  std::string data_dir, bpe_path, run_dir, ckpt;
  bool ok = false;
  std::string log;

  Pipeline() {
    data_dir = dir.file("data");
    run_dir = dir.file("run");
    bpe_path = dir.file("couplets.bpe");
    ckpt = run_dir + "/epoch-150.ckpt";

    const std::vector<std::string> steps = {
        " prepare --input bundled --out-dir " + data_dir +
            " --ratio 0.8 --seed 3",
        " tokenize --input " + data_dir + "/train.jsonl --out " + bpe_path +
            " --vocab-size 64",
        " train --train " + data_dir + "/train.jsonl --val " + data_dir +
            "/val.jsonl --bpe " + bpe_path + " --out-dir " + run_dir +
            " --preset tiny --dropout 0 --epochs 150 --batch-size 8"
            " --warmup-steps 100 --smoothing 0.1 --seed 11",
    };
    for (const std::string& step : steps) {
      const auto result = vktest::run_command(kCli + step);
      log += "$ versekit" + step + "\n" + result.output;
      if (result.exit_code != 0) return;
    }
    ok = file_exists(ckpt);
  }
};

const Pipeline& pipeline() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("--version reports the tool and format versions") {
  const auto result = run_cli("--version");
  CHECK(result.exit_code == 0);
  CHECK(result.output.find("versekit 0.1.0") != std::string::npos);
  CHECK(result.output.find("checkpoint format 1") != std::string::npos);
  CHECK(result.output.find("bpe format 1") != std::string::npos);
  CHECK(result.output.find("manifest format 1") != std::string::npos);
}

TEST_CASE("--help exits cleanly and lists the subcommands") {
  const auto result = run_cli("--help");
  CHECK(result.exit_code == 0);
  for (const char* name : {"fetch", "prepare", "tokenize", "sweep-vocab",
                           "train", "generate", "eval", "check-grads"}) {
    CAPTURE(name);
    CHECK(result.output.find(name) != std::string::npos);
  }
}

TEST_CASE("usage errors exit with code 1") {
  CHECK(run_cli("").exit_code == 1);                      // no subcommand
  CHECK(run_cli("frobnicate").exit_code == 1);            // unknown subcommand
  CHECK(run_cli("prepare --input bundled").exit_code == 1);  // missing out-dir
  CHECK(run_cli("generate --nope=1").exit_code == 1);     // unknown flag
}

TEST_CASE("prepare on the bundled corpus writes the split and a manifest") {
  vktest::TempDir dir;
  const std::string out = dir.file("data");
  const auto result =
      run_cli("prepare --input bundled --out-dir " + out + " --seed 4");
  CAPTURE(result.output);
  REQUIRE(result.exit_code == 0);
  CHECK(file_exists(out + "/train.jsonl"));
  CHECK(file_exists(out + "/val.jsonl"));

  const std::string manifest_text = vktest::read_file(out + "/manifest.json");
  const nlohmann::json m = nlohmann::json::parse(manifest_text);
  CHECK(m.at("tool_version").get<std::string>() == "0.1.0");
  CHECK(m.at("format_version").get<int>() == 1);
  CHECK(m.at("command").get<std::string>() == "prepare");
  CHECK(m.at("config").at("ratio").get<std::string>() == "0.95");
  CHECK(m.at("config").at("seed").get<std::string>() == "4");
  CHECK(m.at("stats").at("couplets_kept").get<std::string>() == "32");
  CHECK(m.at("stats").at("train_size").get<std::string>() == "30");
  CHECK(m.at("stats").at("val_size").get<std::string>() == "2");
  const std::string train_hash =
      m.at("outputs").at("train.jsonl").get<std::string>();
  CHECK(train_hash.size() == 16);

  // Re-running the identical command reproduces every byte, manifest included.
  vktest::TempDir dir2;
  const std::string out2 = dir2.file("data");
  const auto again =
      run_cli("prepare --input bundled --out-dir " + out2 + " --seed 4");
  REQUIRE(again.exit_code == 0);
  CHECK(vktest::read_file(out + "/train.jsonl") ==
        vktest::read_file(out2 + "/train.jsonl"));
  CHECK(vktest::read_file(out + "/val.jsonl") ==
        vktest::read_file(out2 + "/val.jsonl"));
  CHECK(manifest_text == vktest::read_file(out2 + "/manifest.json"));
}

TEST_CASE("prepare rejects a missing input file") {
  vktest::TempDir dir;
  const auto result = run_cli("prepare --input " + dir.file("absent.jsonl") +
                              " --out-dir " + dir.file("data"));
  CHECK(result.exit_code == 1);
}

TEST_CASE("config files fill in flags without overriding them") {
  vktest::TempDir dir;
  const std::string cfg = dir.file("prep.conf");
  vktest::write_file(cfg,
                     "# prepare settings\n"
                     "ratio = 0.5\n"
                     "seed = 9\n");

  const std::string from_config = dir.file("a");
  const std::string from_flags = dir.file("b");
  const std::string overridden = dir.file("c");
  const std::string override_flags = dir.file("d");

  REQUIRE(run_cli("prepare --input bundled --config " + cfg + " --out-dir " +
                  from_config)
              .exit_code == 0);
  REQUIRE(run_cli("prepare --input bundled --ratio 0.5 --seed 9 --out-dir " +
                  from_flags)
              .exit_code == 0);
  CHECK(vktest::read_file(from_config + "/train.jsonl") ==
        vktest::read_file(from_flags + "/train.jsonl"));
  CHECK(vktest::read_file(from_config + "/val.jsonl") ==
        vktest::read_file(from_flags + "/val.jsonl"));

  // A flag on the command line beats the same key in the config file.
  REQUIRE(run_cli("prepare --input bundled --config " + cfg +
                  " --ratio 0.8 --out-dir " + overridden)
              .exit_code == 0);
  REQUIRE(run_cli("prepare --input bundled --ratio 0.8 --seed 9 --out-dir " +
                  override_flags)
              .exit_code == 0);
  CHECK(vktest::read_file(overridden + "/train.jsonl") ==
        vktest::read_file(override_flags + "/train.jsonl"));
  CHECK(vktest::read_file(overridden + "/train.jsonl") !=
        vktest::read_file(from_config + "/train.jsonl"));
}

TEST_CASE("malformed config files exit with code 1") {
  vktest::TempDir dir;
  const std::string bad_line = dir.file("bad.conf");
  vktest::write_file(bad_line, "this is not a key value pair\n");
  CHECK(run_cli("prepare --input bundled --config " + bad_line +
                " --out-dir " + dir.file("x"))
            .exit_code == 1);

  const std::string unknown_key = dir.file("unknown.conf");
  vktest::write_file(unknown_key, "frobnication-level = 9\n");
  CHECK(run_cli("prepare --input bundled --config " + unknown_key +
                " --out-dir " + dir.file("y"))
            .exit_code == 1);

  CHECK(run_cli("prepare --input bundled --config " + dir.file("absent.conf") +
                " --out-dir " + dir.file("z"))
            .exit_code == 1);
}

TEST_CASE("fetch copies a local file and fails cleanly on bad sources") {
  vktest::TempDir dir;
  const std::string src = dir.file("poems.jsonl");
  vktest::write_file(
      src,
      "{\"id\": \"p1\", \"title\": \"t\", \"body\": \"ab\\tcd\", "
      "\"poet\": \"x\"}\n");
  const std::string out = dir.file("fetched.jsonl");

  const auto result = run_cli("fetch --source " + src + " --out " + out);
  CAPTURE(result.output);
  CHECK(result.exit_code == 0);
  CHECK(file_exists(out));
  CHECK(file_exists(out + ".manifest.json"));
  const nlohmann::json record =
      nlohmann::json::parse(vktest::read_file(out).substr(
          0, vktest::read_file(out).find('\n')));
  CHECK(record.at("id").get<std::string>() == "p1");

  // A missing local file is a usage error.
  CHECK(run_cli("fetch --source " + dir.file("absent.jsonl") + " --out " +
                dir.file("o1.jsonl"))
            .exit_code == 1);

  // An unreachable HTTP endpoint is a runtime failure.
  CHECK(run_cli("fetch --source http://127.0.0.1:1/api --out " +
                dir.file("o2.jsonl") +
                " --max-attempts 1 --backoff-ms 1 --page-limit 1")
            .exit_code == 2);
}

TEST_CASE("tokenize trains and saves a BPE model with a manifest") {
  vktest::TempDir dir;
  const std::string data = dir.file("data");
  REQUIRE(run_cli("prepare --input bundled --out-dir " + data).exit_code == 0);

  const std::string bpe = dir.file("model.bpe");
  const auto result = run_cli("tokenize --input " + data +
                              "/train.jsonl --out " + bpe + " --vocab-size 64");
  CAPTURE(result.output);
  CHECK(result.exit_code == 0);
  CHECK(file_exists(bpe));

  const nlohmann::json m =
      nlohmann::json::parse(vktest::read_file(bpe + ".manifest.json"));
  CHECK(m.at("command").get<std::string>() == "tokenize");
  CHECK(m.at("stats").at("actual_vocab_size").get<std::string>() == "64");
  CHECK(m.at("stats").at("model_vocab_size").get<std::string>() == "320");

  // Below the base-character floor the trainer refuses.
  CHECK(run_cli("tokenize --input " + data + "/train.jsonl --out " +
                dir.file("tiny.bpe") + " --vocab-size 6")
            .exit_code == 1);
}

TEST_CASE("sweep-vocab writes the compression curve CSV") {
  vktest::TempDir dir;
  const std::string data = dir.file("data");
  REQUIRE(run_cli("prepare --input bundled --out-dir " + data).exit_code == 0);

  const std::string csv = dir.file("sweep.csv");
  const auto result = run_cli("sweep-vocab --input " + data +
                              "/train.jsonl --out " + csv + " --sizes 64,128");
  CAPTURE(result.output);
  CHECK(result.exit_code == 0);

  std::istringstream in(vktest::read_file(csv));
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "vocab_size,avg_tokens");
  REQUIRE(std::getline(in, line));
  CHECK(line.rfind("64,", 0) == 0);
  REQUIRE(std::getline(in, line));
  CHECK(line.rfind("128,", 0) == 0);
  CHECK_FALSE(std::getline(in, line));

  // Sizes must be strictly ascending.
  CHECK(run_cli("sweep-vocab --input " + data + "/train.jsonl --out " +
                dir.file("bad.csv") + " --sizes 128,64")
            .exit_code == 1);
}

TEST_CASE("check-grads passes on the tiny preset") {
  vktest::TempDir dir;
  const std::string out = dir.file("grads");
  const auto result =
      run_cli("check-grads --batch-couplets 1 --out-dir " + out);
  CAPTURE(result.output);
  CHECK(result.exit_code == 0);
  CHECK(result.output.find("PASSED") != std::string::npos);

  const nlohmann::json report =
      nlohmann::json::parse(vktest::read_file(out + "/grad_check.json"));
  CHECK(report.at("passed").get<bool>());
  CHECK(report.at("max_rel_err").get<double>() < 1e-4);
  CHECK(file_exists(out + "/manifest.json"));

  CHECK(run_cli("check-grads --tolerance 0").exit_code == 1);
}

TEST_CASE("train produces metrics, checkpoints, and a manifest") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  CHECK(file_exists(p.run_dir + "/metrics.csv"));
  CHECK(file_exists(p.run_dir + "/val.csv"));
  CHECK(file_exists(p.run_dir + "/best.ckpt"));
  CHECK(file_exists(p.run_dir + "/epoch-001.ckpt"));
  CHECK(file_exists(p.run_dir + "/epoch-150.ckpt"));

  const nlohmann::json m =
      nlohmann::json::parse(vktest::read_file(p.run_dir + "/manifest.json"));
  CHECK(m.at("command").get<std::string>() == "train");
  CHECK(m.at("config").at("d_model").get<std::string>() == "16");
  CHECK(m.at("config").at("ffn_hidden").get<std::string>() == "64");
  // 26 training couplets in batches of 8 make 4 steps per epoch.
  CHECK(m.at("stats").at("steps").get<std::string>() == "600");
  CHECK(m.at("stats").at("epochs_run").get<std::string>() == "150");

  const std::string metrics = vktest::read_file(p.run_dir + "/metrics.csv");
  CHECK(metrics.rfind("step,epoch,lr,train_loss\n", 0) == 0);
  const std::string val = vktest::read_file(p.run_dir + "/val.csv");
  CHECK(val.rfind("epoch,val_loss\n", 0) == 0);
}

TEST_CASE("generate writes one JSON record per sample") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  vktest::TempDir dir;
  const std::string out = dir.file("samples.jsonl");
  const auto result = run_cli(
      "generate --checkpoint " + p.ckpt + " --bpe " + p.bpe_path + " --out " +
      out + " --n-samples 6 --threads 2 --seed 5 --t 0.8 --trace");
  CAPTURE(result.output);
  REQUIRE(result.exit_code == 0);
  CHECK(file_exists(out + ".manifest.json"));

  std::istringstream in(vktest::read_file(out));
  std::string line;
  int records = 0;
  while (std::getline(in, line)) {
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.contains("text"));
    CHECK(j.contains("first"));
    CHECK(j.contains("second"));
    CHECK(j.at("tokens").is_array());
    CHECK(j.at("malformed").is_boolean());
    CHECK(j.at("trace").at("temperatures").is_array());
    CHECK(j.at("seed").get<std::uint64_t>() ==
          versekit::derive_seed(5, static_cast<std::uint64_t>(records)));
    ++records;
  }
  CHECK(records == 6);

  // The same seed reproduces the same bytes, threads notwithstanding.
  const std::string out2 = dir.file("samples2.jsonl");
  REQUIRE(run_cli("generate --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
                  " --out " + out2 +
                  " --n-samples 6 --threads 4 --seed 5 --t 0.8 --trace")
              .exit_code == 0);
  CHECK(vktest::read_file(out) == vktest::read_file(out2));
}

TEST_CASE("generate validates its flag combinations") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  vktest::TempDir dir;
  // Missing checkpoint file.
  CHECK(run_cli("generate --checkpoint " + dir.file("absent.ckpt") +
                " --bpe " + p.bpe_path + " --out " + dir.file("s.jsonl"))
            .exit_code == 1);
  // Fixed and annealed temperatures at once.
  CHECK(run_cli("generate --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
                " --out " + dir.file("s.jsonl") + " --t 0.8 --t0 0.9")
            .exit_code == 1);
  // Unparseable anti-LM strength.
  CHECK(run_cli("generate --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
                " --out " + dir.file("s.jsonl") + " --anti-lm sometimes")
            .exit_code == 1);
}

TEST_CASE("eval scores recipes against references") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  vktest::TempDir dir;
  const std::string out = dir.file("eval");
  const auto result = run_cli(
      "eval --checkpoint " + p.ckpt + " --bpe " + p.bpe_path + " --refs " +
      p.data_dir + "/train.jsonl --out-dir " + out +
      " --label smoke --n-samples 12 --t 0.7 --seed 3 --ref-subsample 10");
  CAPTURE(result.output);
  REQUIRE(result.exit_code == 0);

  const std::string report = vktest::read_file(out + "/report.csv");
  CHECK(report.rfind("# bleu:", 0) == 0);
  CHECK(report.find("\nsmoke,") != std::string::npos);
  CHECK(file_exists(out + "/curve.csv"));

  const nlohmann::json m =
      nlohmann::json::parse(vktest::read_file(out + "/manifest.json"));
  CHECK(m.at("command").get<std::string>() == "eval");
  CHECK(m.at("stats").at("references").get<std::string>() == "10");
  CHECK(m.at("stats").at("recipes").get<std::string>() == "1");
}

TEST_CASE("eval runs every recipe in a recipe file") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  vktest::TempDir dir;
  const std::string recipes = dir.file("recipes.txt");
  vktest::write_file(recipes,
                     "# two decoding recipes\n"
                     "warm: t=0.7 seed=3\n"
                     "anneal: t0=0.9 tf=0.5 anneal-step=0.05 seed=4\n");
  const std::string out = dir.file("eval");
  const auto result =
      run_cli("eval --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
              " --refs " + p.data_dir + "/train.jsonl --out-dir " + out +
              " --recipes " + recipes + " --n-samples 10");
  CAPTURE(result.output);
  REQUIRE(result.exit_code == 0);

  const std::string report = vktest::read_file(out + "/report.csv");
  CHECK(report.find("\nwarm,") != std::string::npos);
  CHECK(report.find("\nanneal,") != std::string::npos);

  // A recipe with an unknown key is a usage error.
  const std::string bad = dir.file("bad.txt");
  vktest::write_file(bad, "oops: sharpness=3\n");
  CHECK(run_cli("eval --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
                " --refs " + p.data_dir + "/train.jsonl --out-dir " +
                dir.file("eval2") + " --recipes " + bad + " --n-samples 10")
            .exit_code == 1);
}

TEST_CASE("eval reports a runtime failure when no recipe can be scored") {
  const Pipeline& p = pipeline();
  CAPTURE(p.log);
  REQUIRE(p.ok);

  vktest::TempDir dir;
  // A one-token budget cannot fit SEP and EOS, so every sample is malformed.
  const auto result =
      run_cli("eval --checkpoint " + p.ckpt + " --bpe " + p.bpe_path +
              " --refs " + p.data_dir + "/train.jsonl --out-dir " +
              dir.file("eval") + " --n-samples 8 --max-tokens 1");
  CHECK(result.exit_code == 2);
  CHECK(result.output.find("well-formed") != std::string::npos);
}
