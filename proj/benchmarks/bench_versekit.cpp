#include <benchmark/benchmark.h>

#include <cstdint>
#include <string>
#include <vector>

#include "versekit/bpe.hpp"
#include "versekit/bundled_corpus.hpp"
#include "versekit/corpus.hpp"
#include "versekit/decoding.hpp"
#include "versekit/eval.hpp"
#include "versekit/model.hpp"
#include "versekit/rng.hpp"
#include "versekit/trainer.hpp"

namespace {

using namespace versekit;

std::vector<Couplet> bundled_couplets() {
  FetchReport report;
  const auto poems = parse_poems_text(kBundledCorpusJsonl, report);
  std::vector<Couplet> couplets;
  for (const auto& poem : poems) {
    CoupletReport cr;
    auto cs = split_into_couplets(poem, "\t", cr);
    couplets.insert(couplets.end(), cs.begin(), cs.end());
  }
  return couplets;
}

const std::vector<Couplet>& corpus() {
  static const std::vector<Couplet> c = bundled_couplets();
  return c;
}

const BpeModel& tokenizer() {
  static const BpeModel m = train_bpe(corpus(), 64);
  return m;
}

ModelConfig model_config(int d_model, int n_layers, int n_heads) {
  ModelConfig cfg;
  cfg.d_model = d_model;
  cfg.n_layers = n_layers;
  cfg.n_heads = n_heads;
  cfg.ffn_hidden = 4 * d_model;
  cfg.vocab_size = tokenizer().model_vocab_size();
  cfg.context_len = 96;
  cfg.dropout = 0.0;
  return cfg;
}

Batch corpus_batch(int batch_size) {
  std::vector<std::vector<int>> rows;
  for (int i = 0; i < batch_size; ++i) {
    rows.push_back(tokenizer().encode_couplet(corpus()[i % corpus().size()]));
  }
  return pack_batch(rows, kPadId);
}

void BM_BpeTrain(benchmark::State& state) {
  const int vocab = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(train_bpe(corpus(), vocab));
  }
}
BENCHMARK(BM_BpeTrain)->Arg(64)->Arg(128)->Arg(256);

void BM_BpeEncodeCorpus(benchmark::State& state) {
  const BpeModel& m = tokenizer();
  for (auto _ : state) {
    for (const Couplet& c : corpus()) {
      benchmark::DoNotOptimize(m.encode_couplet(c));
    }
  }
  state.SetItemsProcessed(state.iterations() *
                          static_cast<std::int64_t>(corpus().size()));
}
BENCHMARK(BM_BpeEncodeCorpus);

void BM_Forward(benchmark::State& state) {
  const int d_model = static_cast<int>(state.range(0));
  const int batch_size = static_cast<int>(state.range(1));
  const ModelConfig cfg = model_config(d_model, 2, 2);
  const auto params = init_model<float>(cfg, 42);
  const Batch batch = corpus_batch(batch_size);
  for (auto _ : state) {
    benchmark::DoNotOptimize(forward(params, batch, false));
  }
  state.SetItemsProcessed(state.iterations() * batch_size);
}
BENCHMARK(BM_Forward)->Args({16, 1})->Args({16, 8})->Args({64, 8});

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig cfg = model_config(16, 2, 2);
  auto params = init_model<float>(cfg, 42);
  auto grads = zeros_like(params);
  auto adam = init_adam(params);
  const Batch batch = corpus_batch(8);
  const TrainConfig tc;
  long long step = 0;
  for (auto _ : state) {
    const LossStats stats =
        loss_and_grads(params, batch, tc.smoothing, kPadId, grads, false);
    benchmark::DoNotOptimize(stats.loss);
    adam_step(params, grads, adam, lr_at(++step, cfg.d_model, 4000), tc);
  }
  state.SetItemsProcessed(state.iterations() * batch.batch_size);
}
BENCHMARK(BM_TrainStep);

void BM_FilterPipeline(benchmark::State& state) {
  const int vocab = static_cast<int>(state.range(0));
  Rng rng(7);
  std::vector<double> logits(static_cast<std::size_t>(vocab));
  for (double& v : logits) v = rng.next_normal();
  for (auto _ : state) {
    auto filtered = top_k_filter(logits, 20);
    auto probs = apply_temperature(filtered, 0.7);
    benchmark::DoNotOptimize(nucleus_filter(probs, 0.9));
  }
}
BENCHMARK(BM_FilterPipeline)->Arg(320)->Arg(4096);

void BM_Generate(benchmark::State& state) {
  const ModelConfig cfg = model_config(16, 1, 2);
  const auto params = init_model<float>(cfg, 42);
  DecodeConfig dc;
  dc.max_tokens = 48;
  std::uint64_t seed = 0;
  for (auto _ : state) {
    dc.seed = ++seed;
    benchmark::DoNotOptimize(generate(params, tokenizer(), dc));
  }
}
BENCHMARK(BM_Generate);

void BM_Bleu(benchmark::State& state) {
  Rng rng(11);
  const auto random_tokens = [&](std::size_t n) {
    std::vector<int> t(n);
    for (int& v : t) v = static_cast<int>(rng.next_below(50));
    return t;
  };
  const std::vector<int> hyp = random_tokens(24);
  std::vector<std::vector<int>> refs;
  for (int i = 0; i < 8; ++i) refs.push_back(random_tokens(24));
  for (auto _ : state) {
    benchmark::DoNotOptimize(bleu(hyp, refs, 4));
  }
}
BENCHMARK(BM_Bleu);

void BM_SelfBleu(benchmark::State& state) {
  const int n_texts = static_cast<int>(state.range(0));
  Rng rng(13);
  std::vector<std::vector<int>> texts;
  for (int i = 0; i < n_texts; ++i) {
    std::vector<int> t(24);
    for (int& v : t) v = static_cast<int>(rng.next_below(50));
    texts.push_back(std::move(t));
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(self_bleu(texts, 4));
  }
}
BENCHMARK(BM_SelfBleu)->Arg(16)->Arg(64);

}  // namespace

BENCHMARK_MAIN();
