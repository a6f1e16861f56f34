// marginlm command line: vocabulary, training, sweeps, evaluation,
// embedding export and analysis, gradient self-check.

#include <malloc.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "marginlm/marginlm.hpp"

namespace fs = std::filesystem;
using namespace marginlm;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitSelfCheck = 3;

struct SelfCheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string default_out_dir(const std::string& leaf) {
  const char* env = std::getenv("MARGINLM_OUT_DIR");
  return (fs::path(env && *env ? env : "runs") / leaf).string();
}

std::ofstream open_out(const std::string& path) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  return os;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- shared flag groups

struct HeadFlags {
  std::string margin = "none";
  double m = 0.0;
  double s = 64.0;
  std::string f_mode = "no-mod";
  std::string g_mode = "no-mod";
  bool classic = false;
  bool eval_with_margin = false;
  bool no_bias = false;

  void add(CLI::App* app) {
    app->add_option("--margin", margin, "margin family")->check(CLI::IsMember({"none", "cos", "arc", "lsm"}));
    app->add_option("--m", m, "margin value (integer for lsm)");
    app->add_option("--s", s, "scale for --classic-normalize");
    app->add_option("--f-mode", f_mode, "word vector norm scaling")
        ->check(CLI::IsMember({"no-mod", "uniform", "log-rank", "unigram", "log-unigram"}));
    app->add_option("--g-mode", g_mode, "context vector norm scaling")->check(CLI::IsMember({"no-mod", "max-norm"}));
    app->add_flag("--classic-normalize", classic, "unit word vectors, context vectors scaled to s");
    app->add_flag("--eval-with-margin", eval_with_margin, "keep the margin during evaluation");
    app->add_flag("--no-bias", no_bias, "drop the output bias");
  }

  HeadConfig build() const {
    HeadConfig c;
    c.family = parse_margin_family(margin);
    c.m = m;
    c.s = s;
    c.f_mode = parse_word_norm_mode(f_mode);
    c.g_mode = parse_context_norm_mode(g_mode);
    c.classic_normalize = classic;
    c.eval_with_margin = eval_with_margin;
    c.use_bias = !no_bias;
    c.validate();
    return c;
  }
};

struct TrainFlags {
  std::string train, valid, test, vocab;
  std::uint64_t min_count = 1;
  std::size_t max_size = 10000;
  bool lowercase = false;
  std::size_t d_emb = 0, d_h = 128, layers = 2;
  std::string optimizer = "adam";
  std::string precision = "f32";
  TrainConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--train", train, "training corpus");
    app->add_option("--valid", valid, "validation corpus");
    app->add_option("--test", test, "test corpus, evaluated after training");
    app->add_option("--vocab", vocab, "vocabulary TSV (default: built from --train)");
    app->add_option("--min-count", min_count);
    app->add_option("--max-size", max_size);
    app->add_flag("--lowercase", lowercase);
    app->add_option("--d-emb", d_emb, "embedding size (default: d_h)");
    app->add_option("--d-h", d_h, "LSTM hidden size");
    app->add_option("--layers", layers);
    app->add_option("--optimizer", optimizer)->check(CLI::IsMember({"adam", "sgd"}));
    app->add_option("--lr", cfg.learning_rate);
    app->add_option("--clip", cfg.grad_clip_norm, "global gradient norm clip");
    app->add_option("--epochs", cfg.epochs);
    app->add_option("--bptt", cfg.bptt_len);
    app->add_option("--streams", cfg.num_streams);
    app->add_option("--seed", cfg.seed);
    app->add_option("--lr-decay", cfg.lr_decay);
    app->add_option("--dropout", cfg.dropout);
    app->add_option("--eval-streams", cfg.eval_streams);
    app->add_option("--eval-bptt", cfg.eval_bptt_len);
    app->add_option("--precision", precision)->check(CLI::IsMember({"f32", "f64"}));
  }

  RunManifest build(const HeadConfig& head) const {
    RunManifest r;
    r.corpus = {train, valid, test, vocab, {min_count, max_size, lowercase}};
    r.d_h = d_h;
    r.d_emb = d_emb == 0 ? d_h : d_emb;
    r.layers = layers;
    r.train = cfg;
    r.train.optimizer = parse_optimizer(optimizer);
    r.head = head;
    r.precision = parse_precision(precision);
    return r;
  }
};

RunManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot open manifest '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("manifest '" + path + "' is not valid JSON: " + e.what());
  }
  return j.get<RunManifest>();
}

// ---------------------------------------------------------------- subcommands

int cmd_toy_corpus(const std::string& out_dir, std::size_t train_tokens, std::size_t eval_tokens,
                   std::uint64_t seed) {
  fs::create_directories(out_dir);
  const std::pair<const char*, toy::Options> splits[] = {{"train.txt", {train_tokens, seed}},
                                                         {"valid.txt", {eval_tokens, seed + 1}},
                                                         {"test.txt", {eval_tokens, seed + 2}}};
  for (const auto& [name, opts] : splits) open_out((fs::path(out_dir) / name).string()) << toy::generate(opts);
  open_out((fs::path(out_dir) / "word_pairs.txt").string()) << toy::default_word_pairs();
  std::cout << "wrote train/valid/test/word_pairs to " << out_dir << "\n";
  return 0;
}

int cmd_vocab(const std::string& corpus, const VocabOptions& opts, const std::string& out) {
  const Vocabulary v = build_vocab(read_text_file(corpus), opts);
  if (out.empty()) {
    v.save_tsv(std::cout);
  } else {
    auto os = open_out(out);
    v.save_tsv(os);
    std::cout << "vocabulary of " << v.size() << " words written to " << out << "\n";
  }
  return 0;
}

int cmd_train(RunManifest run) {
  run.validate();
  const RunOutcome o = execute_run(run);
  for (const auto& e : o.epochs) {
    std::cout << "epoch " << e.epoch << " train_ppl " << fmt("%.4f", e.train_ppl) << " valid_ppl "
              << fmt("%.4f", e.valid_ppl) << " lr " << fmt("%g", e.learning_rate) << "\n";
  }
  std::cout << format_run_summary(run, o) << "\nrun directory: " << run.output_dir << "\n";
  return 0;
}

// Sweep manifest: corpus/model/train_config/precision as in a run
// manifest, plus "configs" (list of head configs) and/or "grid" (lists per
// head field, expanded as a cartesian product).
std::vector<HeadConfig> expand_sweep(const json& j) {
  std::vector<HeadConfig> out;
  if (j.contains("configs")) {
    for (const auto& c : j.at("configs")) out.push_back(c.get<HeadConfig>());
  }
  if (j.contains("grid")) {
    const json& g = j.at("grid");
    const HeadConfig d;
    auto list = [&](const char* key, json fallback) {
      json v = g.value(key, json::array({fallback}));
      if (!v.is_array()) v = json::array({v});
      return v;
    };
    const json base = d;
    for (const auto& margin : list("margin", base["margin"]))
      for (const auto& m : list("m", base["m"]))
        for (const auto& s : list("s", base["s"]))
          for (const auto& f : list("f_mode", base["f_mode"]))
            for (const auto& gm : list("g_mode", base["g_mode"]))
              for (const auto& cl : list("classic_normalize", base["classic_normalize"])) {
                json c = base;
                c["margin"] = margin;
                c["m"] = m;
                c["s"] = s;
                c["f_mode"] = f;
                c["g_mode"] = gm;
                c["classic_normalize"] = cl;
                c["use_bias"] = g.value("use_bias", d.use_bias);
                c["eval_with_margin"] = g.value("eval_with_margin", d.eval_with_margin);
                out.push_back(c.get<HeadConfig>());
              }
  }
  if (out.empty()) throw UsageError("sweep manifest lists no head configs (\"configs\" or \"grid\")");
  for (const auto& c : out) c.validate();
  return out;
}

struct SweepRow {
  std::size_t index = 0;
  RunManifest run;
  RunOutcome outcome;
};

void write_sweep_tsv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "index\tlabel\tmargin\tm\ts\tf_mode\tg_mode\tclassic_normalize\tseed\tepochs\ttrain_ppl\tvalid_ppl\ttest_ppl\n";
  for (const auto& r : rows) {
    const auto& h = r.run.head;
    const auto& last = r.outcome.epochs.back();
    const double test = r.outcome.test ? r.outcome.test->perplexity : std::nan("");
    os << r.index << '\t' << h.label() << '\t' << to_string(h.family) << '\t' << viz::fmt_real(h.m) << '\t'
       << viz::fmt_real(h.s) << '\t' << to_string(h.f_mode) << '\t' << to_string(h.g_mode) << '\t'
       << (h.classic_normalize ? 1 : 0) << '\t' << r.run.train.seed << '\t' << r.outcome.epochs.size() << '\t'
       << viz::fmt_real(last.train_ppl) << '\t' << viz::fmt_real(last.valid_ppl) << '\t' << viz::fmt_real(test)
       << '\n';
  }
}

json outcome_json(const RunOutcome& o) {
  json e = json::array();
  for (const auto& m : o.epochs) e.push_back({m.epoch, m.train_ppl, m.valid_ppl, m.learning_rate});
  json j{{"epochs", e}};
  if (o.test) j["test"] = {o.test->total_log_prob, o.test->token_count, o.test->perplexity};
  return j;
}

RunOutcome outcome_from_json(const json& j) {
  RunOutcome o;
  for (const auto& e : j.at("epochs")) {
    o.epochs.push_back({e[0].get<std::size_t>(), e[1].get<double>(), e[2].get<double>(), e[3].get<double>()});
  }
  if (j.contains("test")) {
    const auto& t = j.at("test");
    o.test = EvalReport{t[0].get<double>(), t[1].get<std::uint64_t>(), t[2].get<double>()};
  }
  return o;
}

int cmd_sweep(const std::string& manifest_path, std::string out_dir, std::size_t jobs, bool shared_seed) {
  std::ifstream is(manifest_path);
  if (!is) throw UsageError("cannot open sweep manifest '" + manifest_path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw UsageError("sweep manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!j.contains("head_config")) j["head_config"] = json::object();
  const RunManifest base = j.get<RunManifest>();
  const auto heads = expand_sweep(j);
  if (out_dir.empty()) out_dir = base.output_dir.empty() ? default_out_dir("sweep") : base.output_dir;

  std::vector<SweepRow> rows;
  for (std::size_t k = 0; k < heads.size(); ++k) {
    SweepRow r;
    r.index = k;
    r.run = base;
    r.run.head = heads[k];
    r.run.train.seed = shared_seed ? base.train.seed : base.train.seed + k;
    char leaf[32];
    std::snprintf(leaf, sizeof leaf, "%03zu_", k);
    r.run.output_dir = (fs::path(out_dir) / (leaf + heads[k].label())).string();
    r.run.validate();
    rows.push_back(std::move(r));
  }

  auto run_one = [](SweepRow& r) {
    r.outcome = execute_run(r.run);
    open_out((fs::path(r.run.output_dir) / "outcome.json").string()) << outcome_json(r.outcome).dump() << '\n';
    std::cout << "[" << r.index << "] " << format_run_summary(r.run, r.outcome) << std::endl;
  };

  jobs = std::max<std::size_t>(1, std::min(jobs, rows.size()));
  if (jobs == 1) {
    for (auto& r : rows) run_one(r);
  } else {
    std::cout.flush();
    std::vector<pid_t> workers;
    for (std::size_t w = 0; w < jobs; ++w) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          for (std::size_t k = w; k < rows.size(); k += jobs) run_one(rows[k]);
        } catch (const std::exception& e) {
          std::cerr << "error: " << e.what() << "\n";
          code = kExitRuntime;
        }
        std::cout.flush();
        _exit(code);
      }
      workers.push_back(pid);
    }
    bool failed = false;
    for (pid_t pid : workers) {
      int status = 0;
      waitpid(pid, &status, 0);
      failed |= !WIFEXITED(status) || WEXITSTATUS(status) != 0;
    }
    if (failed) throw std::runtime_error("a sweep worker failed");
    for (auto& r : rows) {
      std::ifstream in(fs::path(r.run.output_dir) / "outcome.json");
      r.outcome = outcome_from_json(json::parse(in));
    }
  }
  const std::string tsv = (fs::path(out_dir) / "sweep.tsv").string();
  auto os = open_out(tsv);
  write_sweep_tsv(os, rows);
  std::cout << rows.size() << " configs, results in " << tsv << "\n";
  return 0;
}

template <typename T>
EvalReport eval_as(const std::string& ckpt, const std::string& corpus, std::size_t streams, std::size_t bptt,
                   bool with_margin) {
  auto ck = load_checkpoint<T>(ckpt);
  HeadConfig head = ck.head;
  if (with_margin) head.eval_with_margin = true;
  const bool lower = ck.extra.contains("manifest") && ck.extra["manifest"]["corpus"].value("lowercase", false);
  const auto ids = encode(ck.vocab, read_text_file(corpus), lower);
  return evaluate_ppl(ck.model, ck.vocab.counts(), ids, head, streams, bptt);
}

// Evaluates at the precision the model was trained in.
int cmd_eval(const std::string& ckpt, const std::string& corpus, std::size_t streams, std::size_t bptt,
             bool with_margin) {
  const auto header = load_checkpoint<float>(ckpt).extra;
  const bool f32 = !header.contains("manifest") || header["manifest"].value("precision", std::string("f32")) == "f32";
  const auto r = f32 ? eval_as<float>(ckpt, corpus, streams, bptt, with_margin)
                     : eval_as<double>(ckpt, corpus, streams, bptt, with_margin);
  std::cout << corpus << '\t' << r.token_count << '\t' << viz::fmt_real(r.total_log_prob) << '\t'
            << viz::fmt_real(r.perplexity) << '\n';
  return 0;
}

viz::Mat output_vectors(const Checkpoint<double>& ck) { return ck.model.W.value(); }

int cmd_export(const std::string& ckpt, const std::string& out) {
  const auto ck = load_checkpoint<double>(ckpt);
  const viz::Mat W = output_vectors(ck);
  std::ostringstream os;
  for (WordId id = 0; id < ck.vocab.size(); ++id) {
    os << ck.vocab.word(id);
    for (Index c = 0; c < W.cols(); ++c) os << '\t' << viz::fmt_real(W(id, c));
    os << '\n';
  }
  if (out.empty()) {
    std::cout << os.str();
  } else {
    open_out(out) << os.str();
    std::cout << W.rows() << " word vectors of dimension " << W.cols() << " written to " << out << "\n";
  }
  return 0;
}

std::vector<std::pair<std::string, std::string>> read_pairs(const std::string& path) {
  return viz::parse_word_pairs(read_text_file(path));
}

int cmd_plot(const std::string& ckpt, std::string out_dir, const viz::ProjectOptions& opts, const std::string& reference,
             const std::string& pairs_path) {
  const auto ck = load_checkpoint<double>(ckpt);
  const viz::Mat W = output_vectors(ck);
  const WordId ref = viz::lookup(ck.vocab, reference);
  std::vector<std::pair<std::string, std::string>> pairs;
  if (!pairs_path.empty()) pairs = read_pairs(pairs_path);
  if (out_dir.empty()) out_dir = fs::path(ckpt).parent_path().string();
  if (out_dir.empty()) out_dir = ".";
  const std::string label = ck.head.label();

  auto top = viz::project(W, ck.vocab, opts);
  if (!top.index_of(ref)) throw UsageError("reference word '" + reference + "' is not among the top " +
                                           std::to_string(opts.top_k) + " words");
  top = viz::align(top, ref);
  viz::SvgOptions svg;
  svg.title = label + ", top " + std::to_string(opts.top_k);
  svg.highlight.insert(top.ids.begin(), top.ids.end());
  open_out((fs::path(out_dir) / ("projection_" + label + ".tsv")).string()) << [&] {
    std::ostringstream s;
    viz::write_projection_tsv(s, top, ck.vocab);
    return s.str();
  }();
  {
    auto os = open_out((fs::path(out_dir) / ("polar_" + label + ".svg")).string());
    viz::write_polar_svg(os, top, ck.vocab, svg);
  }

  if (!pairs.empty()) {
    std::vector<WordId> ids{ref};
    for (const auto& [a, b] : pairs) {
      for (const auto& w : {a, b}) {
        const WordId id = viz::lookup(ck.vocab, w);
        if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
      }
    }
    auto groups = viz::align(viz::project_words(W, ids, opts), ref);
    viz::SvgOptions gs;
    gs.title = label + ", word groups";
    gs.labeled.insert(ids.begin(), ids.end());
    gs.highlight.insert(ids.begin(), ids.end());
    std::ostringstream s;
    viz::write_projection_tsv(s, groups, ck.vocab);
    open_out((fs::path(out_dir) / ("groups_" + label + ".tsv")).string()) << s.str();
    auto os = open_out((fs::path(out_dir) / ("groups_" + label + ".svg")).string());
    viz::write_polar_svg(os, groups, ck.vocab, gs);
  }
  std::cout << "plots for " << label << " written to " << out_dir << "\n";
  return 0;
}

int cmd_angles(const std::string& ckpt, const std::string& pairs_path, const std::string& out, std::size_t top_k) {
  const auto ck = load_checkpoint<double>(ckpt);
  const viz::Mat W = output_vectors(ck);
  const auto pairs = read_pairs(pairs_path);
  const auto angles = viz::angle_report(W, ck.vocab, pairs);
  const double disp = viz::dispersion(W, ck.vocab, top_k);
  std::ostringstream tsv;
  viz::write_angle_tsv(tsv, angles);
  std::ostream& summary = out.empty() ? std::cerr : std::cout;
  if (out.empty()) {
    std::cout << tsv.str();
  } else {
    open_out(out) << tsv.str();
  }
  summary << "mean pairwise angle among top " << top_k << " words: " << fmt("%.6f", disp) << " rad\n";
  return 0;
}

int cmd_norms(const std::string& ckpt, const std::string& out) {
  const auto ck = load_checkpoint<double>(ckpt);
  const auto r = viz::norm_report(output_vectors(ck), ck.vocab);
  std::ostringstream tsv;
  viz::write_norm_tsv(tsv, r, ck.vocab);
  std::ostream& summary = out.empty() ? std::cerr : std::cout;
  if (out.empty()) {
    std::cout << tsv.str();
  } else {
    open_out(out) << tsv.str();
  }
  summary << "pearson(norm, log count) = " << fmt("%.6f", r.correlation) << (r.degenerate ? " (degenerate)" : "")
          << "\n";
  return 0;
}

int cmd_grad_check(const GradAuditOptions& opts, double tolerance, const std::string& out) {
  const auto rows = grad_audit(opts);
  std::ostringstream tsv;
  write_grad_audit_tsv(tsv, rows);
  if (out.empty()) {
    std::cout << tsv.str();
  } else {
    open_out(out) << tsv.str();
  }
  double worst = 0.0;
  for (const auto& r : rows) worst = std::max(worst, r.max_error);
  std::ostream& summary = out.empty() ? std::cerr : std::cout;
  summary << rows.size() << " configurations, worst relative error " << fmt("%.3e", worst) << "\n";
  if (!(worst < tolerance)) throw SelfCheckFailed("gradient check error " + fmt("%.3e", worst) + " exceeds " + fmt("%g", tolerance));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // the autodiff graph allocates many large short-lived buffers
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Large-margin softmax heads for LSTM language models"};
  app.set_version_flag("--version", std::string(MARGINLM_VERSION));
  app.require_subcommand(1);

  // toy-corpus
  std::string toy_out = "data/toy";
  std::size_t toy_train = 200000, toy_eval = 20000;
  std::uint64_t toy_seed = 11;
  auto* toy_cmd = app.add_subcommand("toy-corpus", "generate the synthetic train/valid/test corpus");
  toy_cmd->add_option("--out-dir", toy_out);
  toy_cmd->add_option("--train-tokens", toy_train);
  toy_cmd->add_option("--eval-tokens", toy_eval, "tokens in each of valid and test");
  toy_cmd->add_option("--seed", toy_seed);

  // vocab
  std::string vocab_corpus, vocab_out;
  VocabOptions vocab_opts;
  auto* vocab_cmd = app.add_subcommand("vocab", "build a vocabulary TSV from a corpus");
  vocab_cmd->add_option("--corpus", vocab_corpus)->required();
  vocab_cmd->add_option("--min-count", vocab_opts.min_count);
  vocab_cmd->add_option("--max-size", vocab_opts.max_size);
  vocab_cmd->add_flag("--lowercase", vocab_opts.lowercase);
  vocab_cmd->add_option("--out", vocab_out);

  // train
  HeadFlags head_flags;
  TrainFlags train_flags;
  std::string train_manifest, train_out;
  auto* train_cmd = app.add_subcommand("train", "train one model; writes manifest, metrics and checkpoint");
  head_flags.add(train_cmd);
  train_flags.add(train_cmd);
  train_cmd->add_option("--manifest", train_manifest, "replay a run manifest");
  train_cmd->add_option("--out-dir", train_out);

  // sweep
  std::string sweep_manifest, sweep_out;
  std::size_t sweep_jobs = 1;
  bool sweep_shared_seed = false;
  auto* sweep_cmd = app.add_subcommand("sweep", "train every head config listed in a sweep manifest");
  sweep_cmd->add_option("--manifest", sweep_manifest)->required();
  sweep_cmd->add_option("--out-dir", sweep_out);
  sweep_cmd->add_option("--jobs", sweep_jobs, "parallel worker processes");
  sweep_cmd->add_flag("--shared-seed", sweep_shared_seed, "use the base seed for every config");

  // eval
  std::string eval_ckpt, eval_corpus;
  std::size_t eval_streams = 1, eval_bptt = 35;
  bool eval_margin = false;
  auto* eval_cmd = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus");
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--corpus", eval_corpus)->required();
  eval_cmd->add_option("--streams", eval_streams);
  eval_cmd->add_option("--bptt", eval_bptt);
  eval_cmd->add_flag("--eval-with-margin", eval_margin);

  // export-embeddings
  std::string export_ckpt, export_out;
  auto* export_cmd = app.add_subcommand("export-embeddings", "write the output word vectors as TSV");
  export_cmd->add_option("--checkpoint", export_ckpt)->required();
  export_cmd->add_option("--out", export_out);

  // plot
  std::string plot_ckpt, plot_out, plot_ref = "the", plot_pairs;
  viz::ProjectOptions plot_opts;
  auto* plot_cmd = app.add_subcommand("plot", "PCA + t-SNE polar plots of frequent words and word groups");
  plot_cmd->add_option("--checkpoint", plot_ckpt)->required();
  plot_cmd->add_option("--out-dir", plot_out);
  plot_cmd->add_option("--top-k", plot_opts.top_k);
  plot_cmd->add_option("--reference", plot_ref);
  plot_cmd->add_option("--pairs", plot_pairs, "word pairs file for the word-group plot");
  plot_cmd->add_option("--seed", plot_opts.seed);
  plot_cmd->add_option("--pca-dims", plot_opts.pca_dims);
  plot_cmd->add_option("--perplexity", plot_opts.tsne.perplexity);
  plot_cmd->add_option("--iters", plot_opts.tsne.iterations);

  // angles
  std::string angles_ckpt, angles_pairs, angles_out;
  std::size_t angles_top = 100;
  auto* angles_cmd = app.add_subcommand("angles", "angles between word pairs, plus dispersion");
  angles_cmd->add_option("--checkpoint", angles_ckpt)->required();
  angles_cmd->add_option("--pairs", angles_pairs)->required();
  angles_cmd->add_option("--out", angles_out);
  angles_cmd->add_option("--top-k", angles_top);

  // norms
  std::string norms_ckpt, norms_out;
  auto* norms_cmd = app.add_subcommand("norms", "word vector norms against log counts");
  norms_cmd->add_option("--checkpoint", norms_ckpt)->required();
  norms_cmd->add_option("--out", norms_out);

  // grad-check
  GradAuditOptions audit;
  double audit_tol = 1e-4;
  std::string audit_out;
  auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference audit of every head config");
  grad_cmd->add_option("--seed", audit.seed);
  grad_cmd->add_option("--epsilon", audit.epsilon);
  grad_cmd->add_option("--tolerance", audit_tol);
  grad_cmd->add_option("--out", audit_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*toy_cmd) return cmd_toy_corpus(toy_out, toy_train, toy_eval, toy_seed);
    if (*vocab_cmd) return cmd_vocab(vocab_corpus, vocab_opts, vocab_out);
    if (*train_cmd) {
      RunManifest run;
      if (!train_manifest.empty()) {
        run = read_manifest(train_manifest);
      } else {
        run = train_flags.build(head_flags.build());
      }
      if (!train_out.empty()) {
        run.output_dir = train_out;
      } else if (run.output_dir.empty()) {
        run.output_dir = default_out_dir(run.head.label() + "_seed" + std::to_string(run.train.seed));
      }
      return cmd_train(run);
    }
    if (*sweep_cmd) return cmd_sweep(sweep_manifest, sweep_out, sweep_jobs, sweep_shared_seed);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_corpus, eval_streams, eval_bptt, eval_margin);
    if (*export_cmd) return cmd_export(export_ckpt, export_out);
    if (*plot_cmd) return cmd_plot(plot_ckpt, plot_out, plot_opts, plot_ref, plot_pairs);
    if (*angles_cmd) return cmd_angles(angles_ckpt, angles_pairs, angles_out, angles_top);
    if (*norms_cmd) return cmd_norms(norms_ckpt, norms_out);
    if (*grad_cmd) return cmd_grad_check(audit, audit_tol, audit_out);
  } catch (const SelfCheckFailed& e) {
    std::cerr << "self-check failed: " << e.what() << "\n";
    return kExitSelfCheck;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
