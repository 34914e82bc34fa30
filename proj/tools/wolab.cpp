// wolab: command-line front end for corpus perturbation, tiny-LM training,
// probing and analysis. Every subcommand writes its artifacts plus a
// manifest into the output directory.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "json.hpp"
#include "wolab/analysis.hpp"
#include "wolab/corpus.hpp"
#include "wolab/manifest.hpp"
#include "wolab/model.hpp"
#include "wolab/probes.hpp"
#include "wolab/synth.hpp"
#include "wolab/tokenizer.hpp"
#include "wolab/training.hpp"
#include "wolab/treebank.hpp"

namespace fs = std::filesystem;
using namespace wolab;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

/// Usage-class errors (bad flags, missing files, invalid config) exit with 2.
struct UsageError : Error {
  explicit UsageError(const std::string& m) : Error("usage", m) {}
};

struct Globals {
  std::string out;
  int workers = 1;
  std::vector<std::string> args;  // subcommand and its flags, minus --out / --workers
};

std::string default_out() {
  const char* env = std::getenv("WOLAB_OUT");
  return env && *env ? env : "wolab-out";
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::is_regular_file(path)) throw UsageError(what + " '" + path + "' does not exist");
}

json read_json_file(const std::string& path) {
  require_file(path, "config file");
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config file '" + path + "': " + e.what());
  }
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& part : split(s, ',')) {
    if (part.empty()) continue;
    char* end = nullptr;
    const long v = std::strtol(part.c_str(), &end, 10);
    if (*end != '\0' || v < 0) throw UsageError("'" + s + "' is not a comma-separated list of non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw UsageError("empty list '" + s + "'");
  return out;
}

std::vector<DepSentence> load_treebank(const std::string& path, std::size_t max_len) {
  require_file(path, "treebank");
  auto tb = parse_conllu(path);
  return max_len ? filter_max_len(tb, max_len) : tb;
}

void write_output(Manifest& m, const fs::path& path, const std::string& contents) {
  write_file(path, contents);
  m.add_output(path);
}

// ---------------------------------------------------------------------------
// Subcommands

struct FixtureOpts {
  std::size_t sentences = 1000;
  std::size_t treebank_sentences = 1000;
  std::uint64_t seed = 1;
};

void cmd_make_fixture(const Globals& g, const FixtureOpts& o) {
  Manifest m("make-fixture", g.args, g.out);
  m.set_seed("seed", o.seed);
  const SyntheticLanguage lang;
  const auto text_tb = lang.generate(o.sentences, o.seed);
  const auto sents = to_sentences(text_tb);
  write_output(m, fs::path(g.out) / "corpus.txt", sentences_to_text(sents));
  const auto tb = lang.generate(o.treebank_sentences, mix_seed(o.seed, 1));
  write_output(m, fs::path(g.out) / "treebank.conllu", to_conllu(tb));
  m.write();
}

struct BpeOpts {
  std::string corpus;
  std::size_t vocab_size = 5000;
};

void cmd_train_bpe(const Globals& g, const BpeOpts& o) {
  require_file(o.corpus, "--corpus");
  Manifest m("train-bpe", g.args, g.out);
  m.add_input(o.corpus);
  const auto sents = load_corpus(o.corpus);
  const auto vocab = train_bpe(sents, o.vocab_size);
  write_output(m, fs::path(g.out) / "vocab.bpe", vocab.serialize());
  m.set("vocab_checksum", vocab.checksum());
  m.write();
}

struct PerturbOpts {
  std::string corpus, vocab, mode = "identity", stage = "pre";
  std::uint64_t seed = 0;
};

void cmd_perturb(const Globals& g, const PerturbOpts& o) {
  require_file(o.corpus, "--corpus");
  require_file(o.vocab, "--vocab");
  PerturbationSpec spec;
  try {
    spec = PerturbationSpec::parse_mode(o.mode);
    spec.stage = parse_stage(o.stage);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  spec.seed = o.seed;
  Manifest m("perturb", g.args, g.out);
  m.add_input(o.corpus);
  m.add_input(o.vocab);
  m.set_seed("seed", o.seed);
  const auto vocab = BpeVocab::load(o.vocab);
  const auto corpus = perturb_pipeline(load_corpus(o.corpus), spec, vocab, g.workers);
  write_output(m, fs::path(g.out) / "corpus.ids", corpus_to_text(corpus));
  save_corpus_metadata(fs::path(g.out) / "corpus.meta.json", spec, vocab.checksum());
  m.add_output(fs::path(g.out) / "corpus.meta.json");
  m.write();
}

struct BiasedOpts {
  std::string corpus, vocab;
  std::uint64_t seed = 0;
  double probability = 0.8;
};

void cmd_sample_biased(const Globals& g, const BiasedOpts& o) {
  require_file(o.corpus, "--corpus");
  require_file(o.vocab, "--vocab");
  Manifest m("sample-biased", g.args, g.out);
  m.add_input(o.corpus);
  m.add_input(o.vocab);
  m.set_seed("seed", o.seed);
  const auto vocab = BpeVocab::load(o.vocab);
  const auto encoded = encode_corpus(load_corpus(o.corpus), vocab, g.workers);
  auto cfg = build_biased_sampler(encoded, vocab.size());
  cfg.in_half_probability = o.probability;
  std::vector<std::size_t> lengths;
  for (const auto& s : encoded) lengths.push_back(s.size());
  Rng rng(mix_seed(o.seed, 0));
  const auto sampled = sample_biased_corpus(cfg, lengths, rng);
  write_output(m, fs::path(g.out) / "corpus.ids", corpus_to_text(sampled));
  ojson info;
  info["threshold_length"] = cfg.threshold_length;
  info["in_half_probability"] = cfg.in_half_probability;
  info["half_a_size"] = cfg.half_a.size();
  info["half_b_size"] = cfg.half_b.size();
  info["half_a_frequency"] = cfg.half_frequency(cfg.half_a);
  info["half_b_frequency"] = cfg.half_frequency(cfg.half_b);
  info["half_a"] = cfg.half_a;
  info["half_b"] = cfg.half_b;
  write_output(m, fs::path(g.out) / "sampler.json", info.dump(2) + "\n");
  m.write();
}

struct TrainOpts {
  std::string corpus, config, heldout, init;
  std::optional<std::size_t> layers, heads, d_model, d_ff, max_positions, steps, batch_size, warmup, eval_interval;
  std::optional<std::string> position_mode;
  std::optional<double> lr, dropout, weight_decay;
  std::optional<std::uint64_t> seed;
  std::size_t vocab_size = 0;
  bool drop_long = false;
};

void cmd_train_lm(const Globals& g, const TrainOpts& o) {
  require_file(o.corpus, "--corpus");
  ModelConfig mc;
  TrainConfig tc;
  try {
    if (!o.config.empty()) {
      const json cfg = read_json_file(o.config);
      if (cfg.contains("model")) mc = ModelConfig::from_json(cfg["model"]);
      if (cfg.contains("train")) tc = TrainConfig::from_json(cfg["train"]);
    }
    if (o.layers) mc.layers = *o.layers;
    if (o.heads) mc.heads = *o.heads;
    if (o.d_model) mc.d_model = *o.d_model;
    if (o.d_ff) mc.d_ff = *o.d_ff;
    if (o.max_positions) mc.max_positions = *o.max_positions;
    if (o.vocab_size) mc.vocab_size = o.vocab_size;
    if (o.position_mode) mc.position_mode = parse_position_mode(*o.position_mode);
    if (o.dropout) mc.dropout = *o.dropout;
    if (o.seed) {
      mc.seed = *o.seed;
      tc.seed = *o.seed;
    }
    if (o.steps) tc.steps = *o.steps;
    if (o.batch_size) tc.batch_size = *o.batch_size;
    if (o.warmup) tc.warmup_steps = *o.warmup;
    if (o.eval_interval) tc.eval_interval = *o.eval_interval;
    if (o.lr) tc.learning_rate = *o.lr;
    if (o.weight_decay) tc.weight_decay = *o.weight_decay;
    mc.validate();
    tc.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }

  Manifest m("train-lm", g.args, g.out);
  m.add_input(o.corpus);
  if (!o.config.empty()) m.add_input(o.config);
  m.set_seed("model_seed", mc.seed);
  m.set_seed("train_seed", tc.seed);
  Corpus corpus = load_id_corpus(o.corpus);
  if (o.drop_long) {
    const std::size_t limit = mc.max_positions - (mc.frame_bos_eos ? 2 : 0);
    std::erase_if(corpus, [&](const TokenSeq& s) { return s.size() > limit; });
  }
  ModelCheckpoint init;
  if (!o.init.empty()) {
    require_file(o.init, "--init");
    m.add_input(o.init);
    init = ModelCheckpoint::load(o.init);
  } else {
    init = init_model(mc);
  }
  const auto result = train_mlm_from(init, tc, corpus);
  const fs::path ck = fs::path(g.out) / "model.ckpt";
  result.checkpoint.save(ck);
  m.add_output(ck);
  write_output(m, fs::path(g.out) / "loss.csv", loss_curve_csv(result.loss_curve));
  if (!o.heldout.empty()) {
    require_file(o.heldout, "--heldout");
    m.add_input(o.heldout);
    const double h = heldout_mlm_loss(result.checkpoint, load_id_corpus(o.heldout));
    write_output(m, fs::path(g.out) / "heldout.csv", "metric,value\nheldout_mlm_loss," + format_double(h) + "\n");
  }
  m.set("model_config", mc.to_json());
  m.set("train_config", tc.to_json());
  m.set("sentences", corpus.size());
  m.write();
}

struct ProbeOpts {
  std::string checkpoint, vocab, treebank, config, baseline, layer = "final";
  std::string train_sizes = "2000,5000,10000", seeds = "0,1,2";
  std::size_t test_size = 2000;
  std::size_t max_len = 30;
  double lambda = 1.0;
  bool shuffle_labels = false;
  // dependency probe
  std::string train_tb, dev_tb, test_tb;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
};

// Removes sentences whose encoding does not fit the position table.
void drop_unfit(std::vector<DepSentence>& tb, const ModelCheckpoint& ckpt, const BpeVocab& vocab, Manifest& m,
                const std::string& key) {
  const std::size_t limit = ckpt.config.max_positions - (ckpt.config.frame_bos_eos ? 2 : 0);
  const std::size_t before = tb.size();
  std::erase_if(tb, [&](const DepSentence& s) { return vocab.encode_words(s.words).size() > limit; });
  m.set("dropped_too_long_" + key, before - tb.size());
}

std::vector<MatD> probe_reps(const Globals& g, const ProbeOpts& o, Manifest& m, std::vector<DepSentence>& tb) {
  require_file(o.checkpoint, "--checkpoint");
  require_file(o.vocab, "--vocab");
  m.add_input(o.checkpoint);
  m.add_input(o.vocab);
  const auto ckpt = ModelCheckpoint::load(o.checkpoint);
  const auto vocab = BpeVocab::load(o.vocab);
  LayerSelector sel;
  try {
    sel = LayerSelector::parse(o.layer);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  drop_unfit(tb, ckpt, vocab, m, "treebank");
  return extract_word_representations(ckpt, vocab, words_of(tb), sel, g.workers);
}

void finish_probe(const Globals& g, Manifest& m, ProbeReport r, const ProbeOpts& o, const std::string& stem) {
  r.subject = o.checkpoint;
  if (!o.baseline.empty()) {
    require_file(o.baseline, "--baseline");
    m.add_input(o.baseline);
    r = with_baseline(r, ProbeReport::from_json(read_json_file(o.baseline)), o.baseline);
  }
  write_output(m, fs::path(g.out) / (stem + ".csv"), r.to_csv());
  write_output(m, fs::path(g.out) / (stem + ".json"), r.to_json().dump(2) + "\n");
  m.write();
}

void cmd_probe_order(const Globals& g, const ProbeOpts& o) {
  Manifest m("probe-order", g.args, g.out);
  auto tb = load_treebank(o.treebank, o.max_len);
  m.add_input(o.treebank);
  PairwiseConfig pc;
  pc.train_sizes = parse_size_list(o.train_sizes);
  pc.test_size = o.test_size;
  pc.seeds.clear();
  for (auto s : parse_size_list(o.seeds)) pc.seeds.push_back(s);
  pc.shuffle_labels = o.shuffle_labels;
  for (auto s : pc.seeds) m.set_seed("probe_seed_" + std::to_string(s), s);
  const auto reps = probe_reps(g, o, m, tb);
  finish_probe(g, m, pairwise_order_probe(reps, pc), o, "probe_order");
}

void cmd_probe_position(const Globals& g, const ProbeOpts& o) {
  Manifest m("probe-position", g.args, g.out);
  auto tb = load_treebank(o.treebank, o.max_len);
  m.add_input(o.treebank);
  RegressionConfig rc;
  rc.lambda = o.lambda;
  rc.shuffle_labels = o.shuffle_labels;
  rc.seed = o.seed;
  m.set_seed("seed", o.seed);
  const auto reps = probe_reps(g, o, m, tb);
  finish_probe(g, m, position_regression_probe(reps, tb, rc), o, "probe_position");
}

void cmd_probe_deps(const Globals& g, const ProbeOpts& o) {
  Manifest m("probe-deps", g.args, g.out);
  std::vector<DepSentence> tr, dv, te;
  if (!o.train_tb.empty()) {
    tr = load_treebank(o.train_tb, o.max_len);
    dv = load_treebank(o.dev_tb, o.max_len);
    te = load_treebank(o.test_tb, o.max_len);
    m.add_input(o.train_tb);
    m.add_input(o.dev_tb);
    m.add_input(o.test_tb);
  } else {
    const auto all = load_treebank(o.treebank, o.max_len);
    m.add_input(o.treebank);
    const std::size_t n_tr = all.size() * 8 / 10, n_dv = all.size() / 10;
    tr.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_tr));
    dv.assign(all.begin() + static_cast<std::ptrdiff_t>(n_tr), all.begin() + static_cast<std::ptrdiff_t>(n_tr + n_dv));
    te.assign(all.begin() + static_cast<std::ptrdiff_t>(n_tr + n_dv), all.end());
  }
  require_file(o.checkpoint, "--checkpoint");
  require_file(o.vocab, "--vocab");
  m.add_input(o.checkpoint);
  m.add_input(o.vocab);
  const auto ckpt = ModelCheckpoint::load(o.checkpoint);
  const auto vocab = BpeVocab::load(o.vocab);
  drop_unfit(tr, ckpt, vocab, m, "train");
  drop_unfit(dv, ckpt, vocab, m, "dev");
  drop_unfit(te, ckpt, vocab, m, "test");
  if (tr.empty() || te.empty()) throw UsageError("dependency probe needs non-empty train and test treebanks");
  LayerSelector sel;
  try {
    sel = LayerSelector::parse(o.layer);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  auto reps = [&](const std::vector<DepSentence>& tb) {
    return restrict_layers(extract_all_layers(ckpt, vocab, words_of(tb), g.workers), sel);
  };
  BilinearConfig bc;
  bc.epochs = o.epochs;
  bc.seed = o.seed;
  bc.scalar_mix = sel.kind == LayerSelector::Kind::ScalarMix;
  m.set_seed("seed", o.seed);
  finish_probe(g, m, bilinear_dep_probe(reps(tr), tr, reps(dv), dv, reps(te), te, bc), o, "probe_deps");
}

struct AnalyzeOpts {
  std::string checkpoint, vocab, corpus;
  std::size_t rows = 0, sentences = 100, window = kBandingWindow;
  bool dot = false;
  std::string layers;
};

void cmd_analyze_pos(const Globals& g, const AnalyzeOpts& o) {
  require_file(o.checkpoint, "--checkpoint");
  Manifest m("analyze-pos", g.args, g.out);
  m.add_input(o.checkpoint);
  const auto ckpt = ModelCheckpoint::load(o.checkpoint);
  MatD table;
  try {
    table = position_table(ckpt);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  if (o.rows > 0 && o.rows < static_cast<std::size_t>(table.rows())) {
    table.conservativeResize(static_cast<Eigen::Index>(o.rows), Eigen::NoChange);
  }
  const MatD c = correlation_matrix(table);
  write_output(m, fs::path(g.out) / "correlation.csv", correlation_csv(c));
  write_output(m, fs::path(g.out) / "correlation.svg",
               heatmap_svg(c, {"Position embedding correlations", "position", "position"}));
  if (o.dot) {
    const MatD d = dot_product_matrix(table);
    write_output(m, fs::path(g.out) / "dot_product.csv", correlation_csv(d));
    write_output(m, fs::path(g.out) / "dot_product.svg",
                 heatmap_svg(d, {"Position embedding dot products", "position", "position"}, d.minCoeff(), d.maxCoeff()));
  }
  const auto b = banding_scores(c, o.window);
  std::string csv = "metric,value\nmonotonicity," + format_double(b.monotonicity) + "\ntranslation_invariance," +
                    format_double(b.translation_invariance) + "\n";
  for (std::size_t k = 0; k < b.profile.size(); ++k) csv += "profile_" + std::to_string(k) + "," + format_double(b.profile[k]) + "\n";
  write_output(m, fs::path(g.out) / "banding.csv", csv);
  m.write();
}

void cmd_analyze_attn(const Globals& g, const AnalyzeOpts& o) {
  require_file(o.checkpoint, "--checkpoint");
  require_file(o.vocab, "--vocab");
  require_file(o.corpus, "--corpus");
  Manifest m("analyze-attn", g.args, g.out);
  m.add_input(o.checkpoint);
  m.add_input(o.vocab);
  m.add_input(o.corpus);
  const auto ckpt = ModelCheckpoint::load(o.checkpoint);
  const auto vocab = BpeVocab::load(o.vocab);
  auto sents = load_corpus(o.corpus);
  if (sents.size() > o.sentences) sents.resize(o.sentences);
  Corpus enc = encode_corpus(sents, vocab, g.workers);
  const std::size_t limit = ckpt.config.max_positions - (ckpt.config.frame_bos_eos ? 2 : 0);
  std::erase_if(enc, [&](const TokenSeq& s) { return s.size() > limit; });
  const auto h = attention_offset_histogram(ckpt, enc, g.workers);
  write_output(m, fs::path(g.out) / "offsets.csv", h.to_csv());
  write_output(m, fs::path(g.out) / "attention_mass.csv", h.mass_to_csv());
  const auto layers = o.layers.empty() ? default_plot_layers(ckpt.config.layers) : parse_size_list(o.layers);
  write_output(m, fs::path(g.out) / "offsets.svg", offset_chart_svg(h, layers, "Maximum-attention offsets"));
  write_output(m, fs::path(g.out) / "attention_mass.svg", offset_chart_svg(h, layers, "Attention mass by offset", true));
  m.write();
}

struct OverlapOpts {
  std::string corpus, vocab, mode = "shuf-n1";
  std::uint64_t seed = 0;
  std::size_t stride = 100;
};

void cmd_analyze_overlap(const Globals& g, const OverlapOpts& o) {
  require_file(o.corpus, "--corpus");
  require_file(o.vocab, "--vocab");
  Manifest m("analyze-overlap", g.args, g.out);
  m.add_input(o.corpus);
  m.add_input(o.vocab);
  m.set_seed("seed", o.seed);
  PerturbationSpec spec;
  try {
    spec = PerturbationSpec::parse_mode(o.mode);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  spec.seed = o.seed;
  const auto vocab = BpeVocab::load(o.vocab);
  const auto sents = load_corpus(o.corpus);
  const auto orig = encode_corpus(sents, vocab, g.workers);
  spec.stage = PerturbStage::PreSegmentation;
  const auto pre = bigram_overlap(orig, perturb_pipeline(sents, spec, vocab, g.workers), o.stride);
  spec.stage = PerturbStage::PostSegmentation;
  const auto post = bigram_overlap(orig, perturb_pipeline(sents, spec, vocab, g.workers), o.stride);
  std::string csv = "sentences_seen,pre_pct,post_pct\n";
  std::vector<Series> series(2);
  series[0].name = "pre-segmentation";
  series[1].name = "post-segmentation";
  for (std::size_t k = 0; k < pre.points.size() && k < post.points.size(); ++k) {
    csv += std::to_string(pre.points[k].first) + "," + format_double(pre.points[k].second) + "," +
           format_double(post.points[k].second) + "\n";
    series[0].points.emplace_back(static_cast<double>(pre.points[k].first), pre.points[k].second);
    series[1].points.emplace_back(static_cast<double>(post.points[k].first), post.points[k].second);
  }
  write_output(m, fs::path(g.out) / "overlap.csv", csv);
  write_output(m, fs::path(g.out) / "overlap.svg",
               line_chart_svg(series, {"Bigram overlap with original text", "sentences", "% bigrams retained"}));
  m.write();
}

struct SurgeryOpts {
  std::string checkpoint, replace_pos;
  std::optional<double> noise_sigma;
  std::uint64_t seed = 0;
};

void cmd_surgery(const Globals& g, const SurgeryOpts& o) {
  require_file(o.checkpoint, "--checkpoint");
  if (o.replace_pos.empty() && !o.noise_sigma) throw UsageError("surgery needs --replace-pos and/or --noise-sigma");
  Manifest m("surgery", g.args, g.out);
  m.add_input(o.checkpoint);
  m.set_seed("seed", o.seed);
  auto ckpt = ModelCheckpoint::load(o.checkpoint);
  try {
    if (!o.replace_pos.empty()) ckpt = replace_position_embeddings(ckpt, parse_position_replacement(o.replace_pos), o.seed);
    if (o.noise_sigma) ckpt = add_gaussian_noise(ckpt, *o.noise_sigma, o.seed);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  const fs::path out = fs::path(g.out) / "model.ckpt";
  ckpt.save(out);
  m.add_output(out);
  m.write();
}

struct StatsOpts {
  std::string treebank;
  std::size_t max_len = 30;
  bool per_relation = false;
};

void cmd_treebank_stats(const Globals& g, const StatsOpts& o) {
  Manifest m("treebank-stats", g.args, g.out);
  const auto tb = load_treebank(o.treebank, o.max_len);
  m.add_input(o.treebank);
  const auto h = dependency_length_histogram(
      tb, o.per_relation ? HistogramNormalization::PerRelation : HistogramNormalization::PerBin);
  write_output(m, fs::path(g.out) / "dependency_lengths.csv", h.to_csv());
  m.write();
}

// report: collates probe, banding, offset and overlap artifacts found below --out.
void cmd_report(const Globals& g) {
  const fs::path root(g.out);
  if (!fs::is_directory(root)) throw UsageError("output directory '" + g.out + "' does not exist");
  std::vector<fs::path> csvs;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file() && e.path().extension() == ".csv" && e.path().filename() != "summary.csv") csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  if (csvs.empty()) throw UsageError("no CSV artifacts under '" + g.out + "'");
  Manifest m("report", g.args, g.out);
  std::string summary = "source,key,value\n";
  std::string md = "# wolab report\n\n| source | key | value |\n|---|---|---|\n";
  auto emit = [&](const std::string& src, const std::string& key, const std::string& value) {
    summary += src + "," + key + "," + value + "\n";
    md += "| " + src + " | " + key + " | " + value + " |\n";
  };
  for (const auto& p : csvs) {
    m.add_input(p);
    const std::string src = p.lexically_relative(root).generic_string();
    std::istringstream in(read_file(p));
    std::string header, line;
    std::getline(in, header);
    const auto name = p.filename().string();
    std::vector<std::vector<std::string>> rows;
    while (std::getline(in, line)) {
      if (!line.empty()) rows.push_back(split(line, ','));
    }
    if (header == "task,metric,value,delta" || header == "metric,value") {
      for (const auto& r : rows) {
        if (r.size() >= 2 && !r[r.size() >= 4 ? 1 : 0].ends_with("_sd") && !r[1].starts_with("r2_fold")) {
          emit(src, r.size() >= 4 ? r[1] : r[0], r.size() >= 4 ? r[2] : r[1]);
          if (r.size() >= 4 && !r[3].empty()) emit(src, r[1] + "_delta", r[3]);
        }
      }
    } else if (header == "layer,offset,pct") {
      std::map<std::string, double> near;
      for (const auto& r : rows) {
        if (r.size() == 3 && (r[1] == "1" || r[1] == "-1")) near[r[0]] += std::strtod(r[2].c_str(), nullptr);
      }
      for (const auto& [layer, v] : near) emit(src, "layer" + layer + "_offset_pm1_pct", format_double(v));
    } else if (header == "step,loss" && !rows.empty()) {
      emit(src, "final_loss", rows.back().at(1));
    } else if (header == "sentences_seen,pre_pct,post_pct" && !rows.empty()) {
      emit(src, "final_pre_pct", rows.back().at(1));
      emit(src, "final_post_pct", rows.back().at(2));
    }
  }
  write_output(m, root / "summary.csv", summary);
  write_output(m, root / "report.md", md);
  m.write();
}

// ---------------------------------------------------------------------------
// Dispatch

int run_cli(std::vector<std::string> argv);

struct ReplayOpts {
  std::string manifest, into;
};

int cmd_replay(const ReplayOpts& o) {
  require_file(o.manifest, "--manifest");
  const json mj = read_manifest(o.manifest);
  std::vector<std::string> args;
  std::string cwd;
  try {
    args = mj.at("args").get<std::vector<std::string>>();
    cwd = mj.value("cwd", std::string());
  } catch (const json::exception& e) {
    throw UsageError(std::string("manifest: ") + e.what());
  }
  if (args.empty()) throw UsageError("manifest has no arguments");
  const fs::path target = o.into.empty() ? fs::path(o.manifest).parent_path() / "replay" : fs::path(o.into);
  fs::create_directories(target);
  const fs::path abs_target = fs::absolute(target);
  const fs::path here = fs::current_path();
  if (!cwd.empty()) fs::current_path(cwd);
  args.insert(args.begin(), {"wolab", "--workers", "1", "--out", abs_target.string()});
  int rc = run_cli(args);
  fs::current_path(here);
  if (rc != kExitOk) return rc;
  bool same = true;
  for (const auto& out : mj.at("outputs")) {
    const std::string rel = out.at("path");
    const fs::path p = abs_target / rel;
    const bool ok = fs::exists(p) && sha256_file(p) == out.at("sha256").get<std::string>();
    std::cout << (ok ? "identical " : "DIFFERS   ") << rel << "\n";
    same = same && ok;
  }
  return same ? kExitOk : kExitFailure;
}

// Drops --out/--workers (and their values) so manifests record only the
// subcommand's own arguments.
std::vector<std::string> strip_globals(const std::vector<std::string>& argv) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const auto& a = argv[i];
    if (a == "--out" || a == "--workers" || a == "-j") {
      ++i;
      continue;
    }
    if (a.starts_with("--out=") || a.starts_with("--workers=")) continue;
    out.push_back(a);
  }
  return out;
}

int run_cli(std::vector<std::string> argv) {
  CLI::App app{"wolab: word-order probing toolkit for small masked language models"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  g.out = default_out();
  app.add_option("--out", g.out, "Output directory (default: $WOLAB_OUT or ./wolab-out)");
  app.add_option("--workers,-j", g.workers, "Worker threads; 1 is fully deterministic")->check(CLI::PositiveNumber);

  FixtureOpts fx;
  auto* c_fix = app.add_subcommand("make-fixture", "Generate a synthetic corpus and treebank");
  c_fix->add_option("--sentences", fx.sentences, "Corpus sentences");
  c_fix->add_option("--treebank-sentences", fx.treebank_sentences, "Treebank sentences");
  c_fix->add_option("--seed", fx.seed, "Generator seed");

  BpeOpts bpe;
  auto* c_bpe = app.add_subcommand("train-bpe", "Learn a BPE vocabulary");
  c_bpe->add_option("--corpus", bpe.corpus, "One sentence per line")->required();
  c_bpe->add_option("--vocab-size", bpe.vocab_size, "Target vocabulary size");

  PerturbOpts pt;
  auto* c_pt = app.add_subcommand("perturb", "Encode and perturb a corpus");
  c_pt->add_option("--corpus", pt.corpus)->required();
  c_pt->add_option("--vocab", pt.vocab)->required();
  c_pt->add_option("--mode", pt.mode, "identity | shuf-nK | corpus-shuffle | biased-sample");
  c_pt->add_option("--stage", pt.stage, "pre | post");
  c_pt->add_option("--seed", pt.seed);

  BiasedOpts bo;
  auto* c_bs = app.add_subcommand("sample-biased", "Length-dependent unigram resampling");
  c_bs->add_option("--corpus", bo.corpus)->required();
  c_bs->add_option("--vocab", bo.vocab)->required();
  c_bs->add_option("--seed", bo.seed);
  c_bs->add_option("--probability", bo.probability, "Probability of drawing from the length's own half");

  TrainOpts tr;
  auto* c_tr = app.add_subcommand("train-lm", "Pretrain a masked language model");
  c_tr->add_option("--corpus", tr.corpus, "Id corpus from perturb")->required();
  c_tr->add_option("--config", tr.config, "JSON file with \"model\" and \"train\" objects");
  c_tr->add_option("--heldout", tr.heldout, "Id corpus for held-out MLM loss");
  c_tr->add_option("--init", tr.init, "Start from this checkpoint");
  c_tr->add_option("--vocab-size", tr.vocab_size);
  c_tr->add_option("--layers", tr.layers);
  c_tr->add_option("--heads", tr.heads);
  c_tr->add_option("--d-model", tr.d_model);
  c_tr->add_option("--d-ff", tr.d_ff);
  c_tr->add_option("--max-positions", tr.max_positions);
  c_tr->add_option("--position-mode", tr.position_mode, "learned | sinusoidal | none");
  c_tr->add_option("--dropout", tr.dropout);
  c_tr->add_option("--steps", tr.steps);
  c_tr->add_option("--batch-size", tr.batch_size);
  c_tr->add_option("--warmup", tr.warmup);
  c_tr->add_option("--eval-interval", tr.eval_interval);
  c_tr->add_option("--lr", tr.lr);
  c_tr->add_option("--weight-decay", tr.weight_decay);
  c_tr->add_option("--seed", tr.seed);
  c_tr->add_flag("--drop-long", tr.drop_long, "Skip sentences longer than max_positions");

  ProbeOpts po;
  auto add_probe_common = [&](CLI::App* c) {
    c->add_option("--checkpoint", po.checkpoint)->required();
    c->add_option("--vocab", po.vocab)->required();
    c->add_option("--layer", po.layer, "final | mix | layer index");
    c->add_option("--baseline", po.baseline, "Probe JSON report to diff against");
    c->add_option("--max-len", po.max_len, "Drop treebank sentences longer than this (0 keeps all)");
    c->add_option("--seed", po.seed);
  };
  auto* c_po = app.add_subcommand("probe-order", "Pairwise word-order probe");
  add_probe_common(c_po);
  c_po->add_option("--treebank", po.treebank)->required();
  c_po->add_option("--train-sizes", po.train_sizes);
  c_po->add_option("--test-size", po.test_size);
  c_po->add_option("--seeds", po.seeds);
  c_po->add_flag("--shuffle-labels", po.shuffle_labels);
  auto* c_pp = app.add_subcommand("probe-position", "Word-position regression probe");
  add_probe_common(c_pp);
  c_pp->add_option("--treebank", po.treebank)->required();
  c_pp->add_option("--lambda", po.lambda);
  c_pp->add_flag("--shuffle-labels", po.shuffle_labels);
  auto* c_pd = app.add_subcommand("probe-deps", "Bilinear dependency-arc probe");
  add_probe_common(c_pd);
  c_pd->add_option("--treebank", po.treebank, "Split 80/10/10 when --train/--dev/--test are absent");
  c_pd->add_option("--train", po.train_tb);
  c_pd->add_option("--dev", po.dev_tb);
  c_pd->add_option("--test", po.test_tb);
  c_pd->add_option("--epochs", po.epochs);

  AnalyzeOpts ao;
  auto* c_ap = app.add_subcommand("analyze-pos", "Position-embedding correlation matrix and banding scores");
  c_ap->add_option("--checkpoint", ao.checkpoint)->required();
  c_ap->add_option("--rows", ao.rows, "Use only the first N positions (0 = all)");
  c_ap->add_option("--window", ao.window, "Banding window K");
  c_ap->add_flag("--dot", ao.dot, "Also export dot products");
  auto* c_aa = app.add_subcommand("analyze-attn", "Maximum-attention offset distributions");
  c_aa->add_option("--checkpoint", ao.checkpoint)->required();
  c_aa->add_option("--vocab", ao.vocab)->required();
  c_aa->add_option("--corpus", ao.corpus)->required();
  c_aa->add_option("--sentences", ao.sentences);
  c_aa->add_option("--layers", ao.layers, "Comma-separated 1-based layers to plot");

  OverlapOpts oo;
  auto* c_ao = app.add_subcommand("analyze-overlap", "Bigram overlap of pre- vs post-segmentation shuffling");
  c_ao->add_option("--corpus", oo.corpus)->required();
  c_ao->add_option("--vocab", oo.vocab)->required();
  c_ao->add_option("--mode", oo.mode);
  c_ao->add_option("--seed", oo.seed);
  c_ao->add_option("--stride", oo.stride);

  SurgeryOpts so;
  auto* c_su = app.add_subcommand("surgery", "Swap position tables or add a Gaussian noise table");
  c_su->add_option("--checkpoint", so.checkpoint)->required();
  c_su->add_option("--replace-pos", so.replace_pos, "learned_random | sinusoidal | none");
  c_su->add_option("--noise-sigma", so.noise_sigma);
  c_su->add_option("--seed", so.seed);

  StatsOpts st;
  auto* c_ts = app.add_subcommand("treebank-stats", "Dependency-length histogram per relation");
  c_ts->add_option("--treebank", st.treebank)->required();
  c_ts->add_option("--max-len", st.max_len);
  c_ts->add_flag("--per-relation", st.per_relation, "Normalise each relation over bins");

  auto* c_rep = app.add_subcommand("report", "Collate all CSV artifacts under --out");

  ReplayOpts ro;
  auto* c_rp = app.add_subcommand("replay", "Rerun a manifest with one worker and compare checksums");
  c_rp->add_option("--manifest", ro.manifest)->required();
  c_rp->add_option("--into", ro.into, "Directory for the rerun (default: <manifest dir>/replay)");

  std::vector<const char*> cargv;
  for (const auto& a : argv) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << ojson{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return kExitUsage;
  }
  g.args = strip_globals(argv);

  try {
    if (*c_rp) return cmd_replay(ro);
    if (!*c_rep) fs::create_directories(g.out);
    if (*c_fix) cmd_make_fixture(g, fx);
    if (*c_bpe) cmd_train_bpe(g, bpe);
    if (*c_pt) cmd_perturb(g, pt);
    if (*c_bs) cmd_sample_biased(g, bo);
    if (*c_tr) cmd_train_lm(g, tr);
    if (*c_po) cmd_probe_order(g, po);
    if (*c_pp) cmd_probe_position(g, po);
    if (*c_pd) cmd_probe_deps(g, po);
    if (*c_ap) cmd_analyze_pos(g, ao);
    if (*c_aa) cmd_analyze_attn(g, ao);
    if (*c_ao) cmd_analyze_overlap(g, oo);
    if (*c_su) cmd_surgery(g, so);
    if (*c_ts) cmd_treebank_stats(g, st);
    if (*c_rep) cmd_report(g);
  } catch (const UsageError& e) {
    std::cerr << ojson{{"error", "usage"}, {"message", e.what()}}.dump() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << ojson{{"error", e.kind()}, {"message", e.what()}}.dump() << "\n";
    return e.kind() == "invalid_argument" ? kExitUsage : kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << ojson{{"error", "internal"}, {"message", e.what()}}.dump() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(std::move(args));
}
