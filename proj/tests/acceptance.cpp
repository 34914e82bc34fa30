// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// when any criterion fails. Trained models are cached under --cache, keyed by
// a hash of their data and configuration.

#include <sys/wait.h>

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "wolab/analysis.hpp"
#include "wolab/corpus.hpp"
#include "wolab/model.hpp"
#include "wolab/probes.hpp"
#include "wolab/synth.hpp"
#include "wolab/tokenizer.hpp"
#include "wolab/training.hpp"
#include "wolab/treebank.hpp"

namespace fs = std::filesystem;
using namespace wolab;

namespace {

struct Outcome {
  int id = 0;
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double sample_sd(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void log(const std::string& msg) {
  static const auto start = std::chrono::steady_clock::now();
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cerr << "[" << fmt(t, 0) << "s] " << msg << std::endl;
}

// ---------------------------------------------------------------------------
// 1. Gradients

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_model = 32;
  cfg.d_ff = 64;
  cfg.max_positions = 12;
  cfg.vocab_size = 40;
  cfg.seed = 1;
  Transformer<double> m(cfg, params_from_checkpoint<double>(init_model(cfg)));
  Rng rng(2);
  std::normal_distribution<double> nd(0.0, 0.1);
  m.params().visit([&](const std::string& name, Mat<double>& p) {
    const bool gain = name.ends_with(".gain");
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = (gain ? 1.0 : 0.0) + nd(rng);
  });
  std::uniform_int_distribution<TokenId> u(special::kCount, static_cast<TokenId>(cfg.vocab_size - 1));
  std::vector<std::vector<TokenId>> seqs;
  for (std::size_t len : {12u, 9u, 5u}) {
    std::vector<TokenId> s(len);
    for (auto& id : s) id = u(rng);
    seqs.push_back(s);
  }
  TrainConfig tc;
  tc.mask_probability = 0.4;
  const auto mb = make_mlm_batch(seqs, tc, cfg.vocab_size, rng);

  Params<double> grads = m.params().zeros_like();
  m.loss_and_gradients(mb, grads);
  std::map<std::string, Mat<double>*> analytic;
  grads.visit([&](const std::string& n, Mat<double>& g) { analytic[n] = &g; });
  const double eps = 1e-3;
  double worst = 0;
  std::string worst_name;
  std::size_t entries = 0;
  m.params().visit([&](const std::string& name, Mat<double>& p) {
    const Mat<double>& g = *analytic.at(name);
    double diff = 0, scale = 0;
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      const double keep = p.data()[k];
      p.data()[k] = keep + eps;
      const double up = m.loss(mb);
      p.data()[k] = keep - eps;
      const double down = m.loss(mb);
      p.data()[k] = keep;
      const double numeric = (up - down) / (2 * eps);
      diff = std::max(diff, std::abs(numeric - g.data()[k]));
      scale = std::max({scale, std::abs(numeric), std::abs(g.data()[k])});
      ++entries;
    }
    // per-tensor: max abs error over the tensor's largest gradient magnitude,
    // floored at 1e-6 for tensors whose exact gradient is zero (attn.k.bias)
    const double rel = diff / std::max(scale, 1e-6);
    if (rel > worst) {
      worst = rel;
      worst_name = name;
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {1, worst < 1e-4 && secs < 300,
          "max relative error " + fmt(worst * 1e6, 3) + "e-6 (" + worst_name + ") over " + std::to_string(entries) +
              " parameters in " + fmt(secs, 1) + "s; limits 1e-4 and 300s"};
}

// ---------------------------------------------------------------------------
// 2. Derangements

Outcome derangement_suite() {
  Rng rng(3);
  std::size_t fixed_points = 0;
  for (std::size_t n = 2; n <= 12; ++n) {
    std::vector<int> items(n);
    std::iota(items.begin(), items.end(), 0);
    for (int d = 0; d < 10000; ++d) {
      const auto p = derange(items, rng);
      for (std::size_t i = 0; i < n; ++i) fixed_points += p[i] == items[i];
    }
  }
  // brute-force enumeration of the derangements of 5
  std::vector<int> perm{0, 1, 2, 3, 4};
  std::map<std::vector<int>, int> counts;
  do {
    bool ok = true;
    for (int i = 0; i < 5; ++i) ok = ok && perm[static_cast<std::size_t>(i)] != i;
    if (ok) counts[perm] = 0;
  } while (std::next_permutation(perm.begin(), perm.end()));
  const std::vector<int> five{0, 1, 2, 3, 4};
  const int draws = 10000;
  bool outside = false;
  for (int d = 0; d < draws; ++d) {
    const auto p = derange(five, rng);
    const auto it = counts.find(p);
    if (it == counts.end()) outside = true;
    else ++it->second;
  }
  const double expected = static_cast<double>(draws) / static_cast<double>(counts.size());
  double chi2 = 0;
  for (const auto& [p, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
  const double critical = 66.206;  // chi-square, 43 degrees of freedom, 99%
  return {2, fixed_points == 0 && !outside && counts.size() == 44 && chi2 < critical,
          std::to_string(fixed_points) + " fixed points in 110000 draws; " + std::to_string(counts.size()) +
              " derangements of 5, chi2 = " + fmt(chi2, 2) + " < " + fmt(critical, 3)};
}

// ---------------------------------------------------------------------------
// 3. BPE round trip

Outcome bpe_round_trip(const std::vector<Sentence>& train, const BpeVocab& vocab) {
  const SyntheticLanguage lang;
  const auto held = to_sentences(lang.generate(3000, 303));
  std::set<char> chars;
  for (const auto& s : train)
    for (const auto& w : s.words) chars.insert(w.begin(), w.end());
  std::size_t tested = 0, exact = 0;
  for (const auto& s : held) {
    if (tested == 1000) break;
    bool seen = true;
    std::string joined;
    for (const auto& w : s.words) {
      for (char c : w) seen = seen && chars.count(c);
      joined += (joined.empty() ? "" : " ") + w;
    }
    if (!seen) continue;
    ++tested;
    exact += vocab.decode(vocab.encode(s).ids) == joined;
  }
  const auto again = train_bpe(train, 5000);
  const bool same = again.merges() == vocab.merges();
  return {3, tested == 1000 && exact == tested && same,
          std::to_string(exact) + "/" + std::to_string(tested) + " held-out sentences round-trip; " +
              std::to_string(vocab.merges().size()) + " merges " + (same ? "identical" : "DIFFER") + " across two runs"};
}

// ---------------------------------------------------------------------------
// 4. Probe oracles

Outcome probe_oracles() {
  const SyntheticLanguage lang;
  const auto tb = filter_max_len(lang.generate(1500, 404), 30);
  Rng rng(4);
  std::normal_distribution<double> nd;
  std::vector<MatD> revealing, noise, exact, constant;
  for (const auto& s : tb) {
    const auto n = static_cast<Eigen::Index>(s.size());
    MatD r(n, 9), z(n, 32), e(n, 1), c(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      r(i, 0) = static_cast<double>(i);
      for (Eigen::Index j = 1; j < 9; ++j) r(i, j) = nd(rng);
      for (Eigen::Index j = 0; j < 32; ++j) z(i, j) = nd(rng);
      e(i, 0) = static_cast<double>(i);
      c(i, 0) = 1.0;
    }
    revealing.push_back(r);
    noise.push_back(z);
    exact.push_back(e);
    constant.push_back(c);
  }
  PairwiseConfig pc;
  pc.train_sizes = {2000};
  const double acc_pos = *pairwise_order_probe(revealing, pc).metric("accuracy@2000");
  const double acc_noise = *pairwise_order_probe(noise, pc).metric("accuracy@2000");
  const double r2_exact = *position_regression_probe(exact, tb, RegressionConfig{}).metric("r2");
  const double r2_const = *position_regression_probe(constant, tb, RegressionConfig{}).metric("r2");
  const bool pass = acc_pos >= 0.99 && std::abs(acc_noise - 0.5) <= 0.03 && std::abs(r2_exact - 1.0) <= 1e-6 && r2_const <= 0;
  return {4, pass,
          "position-revealing accuracy " + fmt(acc_pos) + " (>= 0.99); noise accuracy " + fmt(acc_noise) +
              " (0.50 +- 0.03); exact-position R2 " + fmt(r2_exact, 9) + " (1 +- 1e-6); constant R2 " + fmt(r2_const) +
              " (<= 0)"};
}

// ---------------------------------------------------------------------------
// Tiny models

constexpr std::size_t kCorpusSentences = 20000;
constexpr std::size_t kVocab = 5000;
constexpr std::size_t kMaxPositions = 64;
constexpr std::size_t kBandRows = 40;

struct Lab {
  fs::path cache;
  std::vector<Sentence> sentences;
  BpeVocab vocab;
  std::vector<DepSentence> probe_tb;  // 2000 train / 500 dev / 500 test
  Corpus attention_eval;
};

Lab make_lab(const fs::path& cache) {
  Lab lab;
  lab.cache = cache;
  const SyntheticLanguage lang;
  lab.sentences = to_sentences(lang.generate(kCorpusSentences, 1));
  const fs::path vocab_path = cache / "vocab.bpe";
  if (fs::exists(vocab_path)) {
    lab.vocab = BpeVocab::load(vocab_path);
  } else {
    log("training BPE vocabulary");
    lab.vocab = train_bpe(lab.sentences, kVocab);
    lab.vocab.save(vocab_path);
  }
  lab.probe_tb = filter_max_len(lang.generate(3600, 99), 30);
  const std::size_t limit = kMaxPositions - 2;
  std::erase_if(lab.probe_tb, [&](const DepSentence& s) { return lab.vocab.encode_words(s.words).size() > limit; });
  lab.probe_tb.resize(3000);
  lab.attention_eval = encode_corpus(to_sentences(lang.generate(600, 77)), lab.vocab);
  std::erase_if(lab.attention_eval, [&](const TokenSeq& s) { return s.size() > limit; });
  lab.attention_eval.resize(500);
  return lab;
}

struct Recipe {
  std::string name;
  std::string mode = "identity";
  PerturbStage stage = PerturbStage::PreSegmentation;
  PositionMode position = PositionMode::Learned;
  std::uint64_t seed = 1;
};

ModelCheckpoint tiny_model(const Lab& lab, const Recipe& r) {
  ModelConfig mc;
  mc.vocab_size = lab.vocab.size();
  mc.max_positions = kMaxPositions;
  mc.position_mode = r.position;
  mc.seed = r.seed;
  TrainConfig tc;
  tc.steps = 3000;
  tc.batch_size = 64;
  tc.learning_rate = 2e-3;
  tc.warmup_steps = 150;
  tc.eval_interval = 500;
  tc.seed = mix_seed(r.seed, 17);
  auto spec = PerturbationSpec::parse_mode(r.mode);
  spec.stage = r.stage;
  spec.seed = r.seed;
  const nlohmann::ordered_json key{{"model", mc.to_json()},
                                   {"train", tc.to_json()},
                                   {"mode", spec.mode_name()},
                                   {"stage", spec.stage_name()},
                                   {"perturb_seed", spec.seed},
                                   {"sentences", kCorpusSentences},
                                   {"vocab", lab.vocab.checksum()}};
  const fs::path path = lab.cache / (r.name + "-" + sha256_hex(key.dump()).substr(0, 12) + ".ckpt");
  if (fs::exists(path)) return ModelCheckpoint::load(path);
  log("training " + r.name);
  Corpus corpus = perturb_pipeline(lab.sentences, spec, lab.vocab);
  std::erase_if(corpus, [](const TokenSeq& s) { return s.size() + 2 > kMaxPositions; });
  auto result = train_mlm(mc, tc, corpus);
  log(r.name + " final loss " + fmt(result.loss_curve.back().loss));
  result.checkpoint.save(path);
  return result.checkpoint;
}

struct ProbeResults {
  double pairwise = 0;
  double r2 = 0;
  std::array<double, kLengthBins> uas_bins{};
  double uas = 0;
  double plus_minus_one[2] = {0, 0};
};

ProbeResults probe_model(const Lab& lab, const ModelCheckpoint& ck, bool probes) {
  ProbeResults out;
  const auto h = attention_offset_histogram(ck, lab.attention_eval);
  for (std::size_t l = 0; l < 2; ++l) out.plus_minus_one[l] = h.pct(l, -1) + h.pct(l, 1);
  if (!probes) return out;
  const auto all = extract_all_layers(ck, lab.vocab, words_of(lab.probe_tb));
  const auto final_layer = select_layer(all, LayerSelector{});
  PairwiseConfig pc;
  pc.train_sizes = {10000};
  out.pairwise = *pairwise_order_probe(final_layer, pc).metric("accuracy@10000");
  out.r2 = *position_regression_probe(final_layer, lab.probe_tb, RegressionConfig{}).metric("r2");
  const std::vector<DepSentence> tr(lab.probe_tb.begin(), lab.probe_tb.begin() + 2000),
      dv(lab.probe_tb.begin() + 2000, lab.probe_tb.begin() + 2500), te(lab.probe_tb.begin() + 2500, lab.probe_tb.end());
  const LayeredWords a(all.begin(), all.begin() + 2000), b(all.begin() + 2000, all.begin() + 2500),
      c(all.begin() + 2500, all.end());
  BilinearConfig bc;
  bc.scalar_mix = true;
  bc.epochs = 15;
  const auto dep = bilinear_dep_probe(a, tr, b, dv, c, te, bc);
  out.uas = *dep.metric("uas");
  for (std::size_t k = 0; k < kLengthBins; ++k)
    out.uas_bins[k] = dep.metric(std::string("uas_bin_") + kLengthBinNames[k]).value_or(std::nan(""));
  return out;
}

BandingScores model_banding(const ModelCheckpoint& ck) { return banding_scores(position_correlation_matrix(ck, kBandRows)); }

std::string seeds_str(const std::vector<double>& v, int digits = 3) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : "/") + fmt(x, digits);
  return s;
}

// ---------------------------------------------------------------------------
// 10. CLI determinism

struct Run {
  int code = -1;
  std::string output;
};

Run run_cli(const std::string& args) {
  const std::string cmd = std::string(WOLAB_CLI_PATH) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

Outcome cli_determinism(const fs::path& cache) {
  const fs::path root = cache / "cli";
  fs::remove_all(root);
  fs::create_directories(root);
  auto q = [](const fs::path& p) { return "'" + p.string() + "'"; };
  auto out = [&](const char* d) { return "--workers 1 --out " + q(root / d) + " "; };
  const std::string corpus = q(root / "fx" / "corpus.txt"), tb = q(root / "fx" / "treebank.conllu"),
                    vocab = q(root / "bpe" / "vocab.bpe"), ck = q(root / "lm" / "model.ckpt");
  const std::vector<std::pair<std::string, std::string>> steps{
      {"fx", out("fx") + "make-fixture --sentences 400 --treebank-sentences 200 --seed 10"},
      {"bpe", out("bpe") + "train-bpe --corpus " + corpus + " --vocab-size 400"},
      {"ids", out("ids") + "perturb --corpus " + corpus + " --vocab " + vocab + " --mode shuf-n2 --stage post --seed 3"},
      {"biased", out("biased") + "sample-biased --corpus " + corpus + " --vocab " + vocab + " --seed 4"},
      {"lm", out("lm") + "train-lm --corpus " + q(root / "ids" / "corpus.ids") +
                 " --vocab-size 400 --layers 2 --heads 2 --d-model 16 --d-ff 32 --max-positions 64 --steps 30"
                 " --batch-size 8 --eval-interval 10 --drop-long --seed 5"},
      {"order", out("order") + "probe-order --checkpoint " + ck + " --vocab " + vocab + " --treebank " + tb +
                    " --train-sizes 300 --test-size 200 --seeds 0,1"},
      {"position", out("position") + "probe-position --checkpoint " + ck + " --vocab " + vocab + " --treebank " + tb},
      {"deps", out("deps") + "probe-deps --checkpoint " + ck + " --vocab " + vocab + " --treebank " + tb + " --epochs 2"},
      {"pos", out("pos") + "analyze-pos --checkpoint " + ck},
      {"attn", out("attn") + "analyze-attn --checkpoint " + ck + " --vocab " + vocab + " --corpus " + corpus},
      {"overlap", out("overlap") + "analyze-overlap --corpus " + corpus + " --vocab " + vocab + " --stride 50"},
      {"stats", out("stats") + "treebank-stats --treebank " + tb},
  };
  std::size_t replayed = 0, csvs = 0;
  for (const auto& [dir, args] : steps) {
    const auto r = run_cli(args);
    if (r.code != 0) return {10, false, "step '" + dir + "' exited " + std::to_string(r.code) + ": " + r.output};
  }
  for (const auto& [dir, args] : steps) {
    fs::path manifest;
    for (const auto& e : fs::directory_iterator(root / dir))
      if (e.path().string().ends_with(".manifest.json")) manifest = e.path();
    const auto r = run_cli("replay --manifest " + q(manifest) + " --into " + q(root / (dir + "-replay")));
    if (r.code != 0 || r.output.find("DIFFERS") != std::string::npos)
      return {10, false, "replay of '" + dir + "' not identical:\n" + r.output};
    for (std::size_t pos = 0; (pos = r.output.find(".csv\n", pos)) != std::string::npos; ++pos) ++csvs;
    ++replayed;
  }
  return {10, csvs > 0, std::to_string(replayed) + " manifests replayed with --workers 1; " + std::to_string(csvs) +
                            " CSV artifacts byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wolab acceptance run"};
  std::string cache = "acceptance-cache";
  std::vector<int> only;
  app.add_option("--cache", cache, "Directory for trained models and scratch files");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(cache);
  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  std::vector<Outcome> outcomes;
  if (wanted(1)) {
    log("criterion 1");
    outcomes.push_back(gradient_check());
  }
  if (wanted(2)) {
    log("criterion 2");
    outcomes.push_back(derangement_suite());
  }
  const bool need_lab = std::any_of(only.begin(), only.end(), [](int i) { return i == 3 || (i >= 5 && i <= 9); });
  std::optional<Lab> lab;
  if (only.empty() || need_lab) lab = make_lab(cache);
  if (wanted(3)) {
    log("criterion 3");
    outcomes.push_back(bpe_round_trip(lab->sentences, lab->vocab));
  }
  if (wanted(4)) {
    log("criterion 4");
    outcomes.push_back(probe_oracles());
  }

  if (lab && (wanted(5) || wanted(6) || wanted(7) || wanted(8) || wanted(9))) {
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    std::map<std::string, std::vector<ProbeResults>> res;
    std::map<std::string, std::vector<BandingScores>> band;
    for (auto seed : seeds) {
      const std::vector<Recipe> recipes{
          {"orig", "identity", PerturbStage::PreSegmentation, PositionMode::Learned, seed},
          {"nopos", "identity", PerturbStage::PreSegmentation, PositionMode::None, seed},
          {"shuf-pre", "shuf-n1", PerturbStage::PreSegmentation, PositionMode::Learned, seed},
          {"shuf-post", "shuf-n1", PerturbStage::PostSegmentation, PositionMode::Learned, seed}};
      for (const auto& r : recipes) {
        const auto ck = tiny_model(*lab, r);
        const bool probes = r.name != "shuf-post" && (wanted(5) || wanted(9));
        log("probing " + r.name + " seed " + std::to_string(seed));
        res[r.name].push_back(probe_model(*lab, ck, probes));
        if (r.position != PositionMode::None) band[r.name].push_back(model_banding(ck));
      }
    }
    auto field = [&](const std::string& name, auto get) {
      std::vector<double> v;
      for (const auto& p : res[name]) v.push_back(get(p));
      return v;
    };

    if (wanted(5)) {
      const auto pw = [](const ProbeResults& p) { return 100.0 * p.pairwise; };
      const auto r2 = [](const ProbeResults& p) { return p.r2; };
      const double o = mean(field("orig", pw)), s = mean(field("shuf-pre", pw)), n = mean(field("nopos", pw));
      const double ro = mean(field("orig", r2)), rs = mean(field("shuf-pre", r2)), rn = mean(field("nopos", r2));
      const bool pass = o >= n + 5 && s >= n + 5 && std::abs(n - 50) <= 3 && rn < 0.10 && rn < 0.5 * ro;
      outcomes.push_back({5, pass,
                          "pairwise % Orig/Shuf/NoPos = " + fmt(o, 1) + "/" + fmt(s, 1) + "/" + fmt(n, 1) +
                              " (need Orig,Shuf >= NoPos+5 and NoPos in 50 +- 3); R2 = " + fmt(ro, 3) + "/" + fmt(rs, 3) +
                              "/" + fmt(rn, 3) + " (need NoPos < 0.10 and < Orig/2); mean of 3 seeds"});
    }

    if (wanted(6)) {
      const Corpus original = encode_corpus(lab->sentences, lab->vocab);
      auto pre = PerturbationSpec::parse_mode("shuf-n1");
      pre.seed = 1;
      auto post = pre;
      post.stage = PerturbStage::PostSegmentation;
      const auto op = bigram_overlap(original, perturb_pipeline(lab->sentences, pre, lab->vocab), 500);
      const auto oq = bigram_overlap(original, perturb_pipeline(lab->sentences, post, lab->vocab), 500);
      std::map<std::size_t, double> post_at(oq.points.begin(), oq.points.end());
      std::size_t checkpoints = 0, ahead = 0;
      for (const auto& [n, v] : op.points) {
        if (n <= 1000 || !post_at.count(n)) continue;
        ++checkpoints;
        ahead += v > post_at[n];
      }
      int mono_wins = 0, inv_wins = 0;
      std::vector<double> mp, mq, ip, iq;
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        const auto& a = band["shuf-pre"][k];
        const auto& b = band["shuf-post"][k];
        mono_wins += a.monotonicity > b.monotonicity;
        inv_wins += a.translation_invariance > b.translation_invariance;
        mp.push_back(a.monotonicity);
        mq.push_back(b.monotonicity);
        ip.push_back(a.translation_invariance);
        iq.push_back(b.translation_invariance);
      }
      const bool pass = checkpoints > 0 && ahead == checkpoints && mono_wins >= 2 && inv_wins >= 2;
      outcomes.push_back(
          {6, pass,
           "overlap pre > post at " + std::to_string(ahead) + "/" + std::to_string(checkpoints) +
               " checkpoints beyond 1k (final " + fmt(op.points.back().second, 1) + "% vs " +
               fmt(oq.points.back().second, 1) + "%); banding pre " + seeds_str(mp) + " vs post " + seeds_str(mq) +
               " (" + std::to_string(mono_wins) + "/3); invariance pre " + seeds_str(ip) + " vs post " + seeds_str(iq) +
               " (" + std::to_string(inv_wins) + "/3)"});
    }

    if (wanted(7)) {
      std::vector<double> baseline;
      for (std::uint64_t s = 0; s < 20; ++s) {
        ModelConfig mc;
        mc.vocab_size = lab->vocab.size();
        mc.max_positions = kMaxPositions;
        mc.seed = 1000 + s;
        baseline.push_back(model_banding(init_model(mc)).monotonicity);
      }
      const double mu = mean(baseline), sd = sample_sd(baseline);
      const double shuffled = model_banding(tiny_model(*lab, {"corpus-shuffle", "corpus-shuffle"})).monotonicity;
      const double biased = model_banding(tiny_model(*lab, {"biased", "biased-sample"})).monotonicity;
      const bool pass = std::abs(shuffled - mu) <= 3 * sd && biased >= mu + 3 * sd;
      outcomes.push_back({7, pass,
                          "banding: random tables " + fmt(mu, 3) + " +- " + fmt(sd, 3) + " (n=20); corpus-shuffle " +
                              fmt(shuffled, 3) + " (need within 3 SD); biased " + fmt(biased, 3) + " (need >= " +
                              fmt(mu + 3 * sd, 3) + ")"});
    }

    if (wanted(8)) {
      int wins = 0;
      std::string detail;
      for (std::size_t k = 0; k < seeds.size(); ++k) {
        const auto& o = res["orig"][k];
        const auto& n = res["nopos"][k];
        const bool win = o.plus_minus_one[0] > n.plus_minus_one[0] && o.plus_minus_one[1] > n.plus_minus_one[1];
        wins += win;
        detail += " seed " + std::to_string(seeds[k]) + ": L1 " + fmt(o.plus_minus_one[0], 1) + " vs " +
                  fmt(n.plus_minus_one[0], 1) + ", L2 " + fmt(o.plus_minus_one[1], 1) + " vs " +
                  fmt(n.plus_minus_one[1], 1) + ";";
      }
      outcomes.push_back({8, wins >= 2,
                          "+-1 offset % Orig vs NoPos," + detail + " Orig ahead in both layers for " +
                              std::to_string(wins) + "/3 seeds"});
    }

    if (wanted(9)) {
      std::array<double, kLengthBins> d_nopos{}, d_shuf{};
      for (std::size_t b = 0; b < kLengthBins; ++b) {
        const auto bin = [b](const ProbeResults& p) { return p.uas_bins[b]; };
        const double o = mean(field("orig", bin));
        d_nopos[b] = mean(field("nopos", bin)) - o;
        d_shuf[b] = mean(field("shuf-pre", bin)) - o;
      }
      int inversions = 0;
      for (std::size_t b = 0; b + 1 < kLengthBins; ++b) inversions += d_nopos[b + 1] > d_nopos[b];
      std::size_t closest = 0;
      for (std::size_t b = 1; b < kLengthBins; ++b)
        if (std::abs(d_shuf[b]) < std::abs(d_shuf[closest])) closest = b;
      std::string dn, ds;
      for (std::size_t b = 0; b < kLengthBins; ++b) {
        dn += (b ? " " : "") + fmt(d_nopos[b], 3);
        ds += (b ? " " : "") + fmt(d_shuf[b], 3);
      }
      const bool finite = std::all_of(d_nopos.begin(), d_nopos.end(), [](double x) { return std::isfinite(x); });
      outcomes.push_back({9, finite && inversions <= 1 && closest == 0,
                          "dUAS NoPos-Orig by bin [" + dn + "] has " + std::to_string(inversions) +
                              " inversion(s) (max 1); dUAS Shuf-Orig [" + ds + "] closest to 0 at bin " +
                              std::string(kLengthBinNames[closest]) + " (need 1)"});
    }
  }

  if (wanted(10)) {
    log("criterion 10");
    outcomes.push_back(cli_determinism(cache));
  }

  std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
  bool all = true;
  for (const auto& o : outcomes) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << o.id << ": " << o.detail << "\n";
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
