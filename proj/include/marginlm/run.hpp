#pragma once

// A training run as data: everything needed to rebuild the vocabulary,
// initialize the model, train and evaluate it. Serialized as the run
// manifest, which replays bit-exactly.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marginlm/checkpoint.hpp"
#include "marginlm/corpus.hpp"
#include "marginlm/margin_head.hpp"
#include "marginlm/model.hpp"
#include "marginlm/training.hpp"

#ifndef MARGINLM_VERSION
#define MARGINLM_VERSION "0.0.0"
#endif

namespace marginlm {

enum class Precision { kF32, kF64 };

inline std::string_view to_string(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw UsageError("unknown precision '" + std::string(s) + "' (expected f32 or f64)");
}

struct CorpusSpec {
  std::string train;
  std::string valid;
  std::string test;   // optional
  std::string vocab;  // optional vocab TSV; built from train when empty
  VocabOptions vocab_options;
};

struct RunManifest {
  CorpusSpec corpus;
  std::size_t d_emb = 128;
  std::size_t d_h = 128;
  std::size_t layers = 2;
  TrainConfig train;
  HeadConfig head;
  Precision precision = Precision::kF32;
  std::string version = MARGINLM_VERSION;
  std::string output_dir;

  void validate() const {
    head.validate();
    train.validate();
    if (d_emb == 0 || d_h == 0 || layers == 0) throw UsageError("model dimensions must be positive");
    if (corpus.train.empty()) throw UsageError("a training corpus is required");
    if (corpus.valid.empty()) throw UsageError("a validation corpus is required");
    if (output_dir.empty()) throw UsageError("an output directory is required");
    for (const std::string* p : {&corpus.train, &corpus.valid, &corpus.test, &corpus.vocab}) {
      if (!p->empty() && !std::filesystem::is_regular_file(*p)) throw UsageError("no such file: " + *p);
    }
  }
};

inline void to_json(nlohmann::json& j, const RunManifest& r) {
  j = nlohmann::json{
      {"toolkit_version", r.version},
      {"seed", r.train.seed},
      {"corpus",
       {{"train", r.corpus.train},
        {"valid", r.corpus.valid},
        {"test", r.corpus.test},
        {"vocab", r.corpus.vocab},
        {"min_count", r.corpus.vocab_options.min_count},
        {"max_size", r.corpus.vocab_options.max_size},
        {"lowercase", r.corpus.vocab_options.lowercase}}},
      {"model", {{"d_emb", r.d_emb}, {"d_h", r.d_h}, {"layers", r.layers}}},
      {"train_config", r.train},
      {"head_config", r.head},
      {"precision", std::string(to_string(r.precision))},
      {"output_dir", r.output_dir}};
}

inline void from_json(const nlohmann::json& j, RunManifest& r) {
  try {
    const auto& c = j.at("corpus");
    r.corpus.train = c.at("train").get<std::string>();
    r.corpus.valid = c.at("valid").get<std::string>();
    r.corpus.test = c.value("test", std::string());
    r.corpus.vocab = c.value("vocab", std::string());
    r.corpus.vocab_options.min_count = c.value("min_count", VocabOptions{}.min_count);
    r.corpus.vocab_options.max_size = c.value("max_size", VocabOptions{}.max_size);
    r.corpus.vocab_options.lowercase = c.value("lowercase", false);
    const auto& m = j.at("model");
    r.d_emb = m.at("d_emb").get<std::size_t>();
    r.d_h = m.at("d_h").get<std::size_t>();
    r.layers = m.at("layers").get<std::size_t>();
    r.train = j.at("train_config").get<TrainConfig>();
    r.head = j.at("head_config").get<HeadConfig>();
    r.precision = parse_precision(j.value("precision", std::string("f32")));
    r.version = j.value("toolkit_version", std::string(MARGINLM_VERSION));
    r.output_dir = j.value("output_dir", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("malformed run manifest: ") + e.what());
  }
}

struct RunData {
  Vocabulary vocab;
  std::vector<WordId> train, valid, test;
};

inline Vocabulary load_vocab_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open vocabulary '" + path + "'");
  return Vocabulary::load_tsv(is);
}

inline RunData load_run_data(const CorpusSpec& spec) {
  RunData d;
  const std::string train_text = read_text_file(spec.train);
  d.vocab = spec.vocab.empty() ? build_vocab(train_text, spec.vocab_options) : load_vocab_file(spec.vocab);
  const bool lower = spec.vocab_options.lowercase;
  d.train = encode(d.vocab, train_text, lower);
  d.valid = encode(d.vocab, read_text_file(spec.valid), lower);
  if (!spec.test.empty()) d.test = encode(d.vocab, read_text_file(spec.test), lower);
  return d;
}

struct RunOutcome {
  std::vector<EpochMetrics> epochs;
  std::optional<EvalReport> test;
};

template <typename T>
RunOutcome train_and_evaluate(const RunManifest& run, const RunData& data, LmModel<T>& model) {
  RunOutcome out;
  out.epochs = train(model, data.vocab, data.train, data.valid, run.head, run.train).epochs;
  if (!data.test.empty()) {
    out.test = evaluate_ppl(model, data.vocab.counts(), data.test, run.head, run.train.eval_streams,
                            run.train.eval_bptt_len);
  }
  return out;
}

inline std::string format_run_summary(const RunManifest& run, const RunOutcome& o) {
  char buf[256];
  const auto& last = o.epochs.back();
  std::snprintf(buf, sizeof buf, "%s seed=%llu epochs=%zu train_ppl=%.4f valid_ppl=%.4f", run.head.label().c_str(),
                static_cast<unsigned long long>(run.train.seed), o.epochs.size(), last.train_ppl, last.valid_ppl);
  std::string s = buf;
  if (o.test) {
    std::snprintf(buf, sizeof buf, " test_ppl=%.4f", o.test->perplexity);
    s += buf;
  }
  return s;
}

// Writes manifest.json first, then trains and writes metrics.tsv and
// model.ckpt into run.output_dir.
template <typename T>
RunOutcome execute_run_as(const RunManifest& run) {
  run.validate();
  const RunData data = load_run_data(run.corpus);
  std::filesystem::create_directories(run.output_dir);
  const auto dir = std::filesystem::path(run.output_dir);
  {
    std::ofstream os(dir / "manifest.json");
    os << nlohmann::json(run).dump(2) << '\n';
  }
  auto model = init_model<T>({data.vocab.size(), run.d_emb, run.d_h, run.layers}, run.train.seed);
  RunOutcome out = train_and_evaluate(run, data, model);
  {
    std::ofstream os(dir / "metrics.tsv");
    write_metrics_tsv(os, out.epochs);
  }
  save_checkpoint((dir / "model.ckpt").string(), model, data.vocab, run.head,
                  nlohmann::json{{"manifest", run}});
  return out;
}

inline RunOutcome execute_run(const RunManifest& run) {
  return run.precision == Precision::kF32 ? execute_run_as<float>(run) : execute_run_as<double>(run);
}

}  // namespace marginlm
