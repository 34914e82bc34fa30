#include "wolab/corpus.hpp"

#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace wolab {

CorpusReader::CorpusReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open corpus " + path.string());
}

std::optional<Sentence> CorpusReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!is_valid_utf8(line)) {
      throw FormatError(path_.string() + ":" + std::to_string(line_no_) + ": invalid UTF-8");
    }
    auto words = split_whitespace(line);
    if (words.empty()) continue;
    return Sentence{std::move(words), next_id_++};
  }
  if (in_.bad()) throw IoError("read failure on " + path_.string());
  return std::nullopt;
}

std::vector<Sentence> load_corpus(const std::filesystem::path& path) {
  CorpusReader reader(path);
  std::vector<Sentence> out;
  while (auto s = reader.next()) out.push_back(std::move(*s));
  return out;
}

Corpus corpus_shuffle(std::span<const TokenSeq> corpus, Rng& rng) {
  if (corpus.empty()) throw InvalidArgument("corpus_shuffle: corpus is empty");
  std::vector<TokenId> pool;
  for (const auto& s : corpus) pool.insert(pool.end(), s.ids.begin(), s.ids.end());
  std::shuffle(pool.begin(), pool.end(), rng);
  Corpus out;
  out.reserve(corpus.size());
  std::size_t k = 0;
  for (const auto& s : corpus) {
    TokenSeq t;
    t.ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(k), pool.begin() + static_cast<std::ptrdiff_t>(k + s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) t.word_spans.emplace_back(i, i + 1);
    k += s.size();
    out.push_back(std::move(t));
  }
  return out;
}

std::int64_t BiasedSamplerConfig::half_frequency(std::span<const TokenId> half) const {
  std::int64_t total = 0;
  for (TokenId id : half) {
    if (static_cast<std::size_t>(id) < frequencies.size()) total += frequencies[static_cast<std::size_t>(id)];
  }
  return total;
}

std::size_t balanced_length_threshold(std::span<const std::size_t> lengths) {
  std::map<std::size_t, std::int64_t> tokens_at;  // length -> total tokens
  std::int64_t total = 0;
  for (auto len : lengths) {
    tokens_at[len] += static_cast<std::int64_t>(len);
    total += static_cast<std::int64_t>(len);
  }
  if (tokens_at.empty()) throw InvalidArgument("balanced_length_threshold: no sentences");
  std::size_t best_l = tokens_at.begin()->first;
  std::int64_t best_gap = total;  // l = smallest length: nothing below
  std::int64_t below = 0;
  for (const auto& [len, toks] : tokens_at) {
    const std::int64_t gap = std::llabs(below - (total - below));
    if (gap < best_gap) {
      best_gap = gap;
      best_l = len;
    }
    below += toks;
  }
  return best_l;
}

BiasedSamplerConfig build_biased_sampler(std::span<const TokenSeq> corpus, std::size_t vocab_size) {
  if (vocab_size < 2) throw InvalidArgument("build_biased_sampler: vocabulary must have at least 2 entries");
  if (corpus.empty()) throw InvalidArgument("build_biased_sampler: corpus is empty");
  BiasedSamplerConfig cfg;
  cfg.frequencies.assign(vocab_size, 0);
  std::vector<std::size_t> lengths;
  lengths.reserve(corpus.size());
  for (const auto& s : corpus) {
    lengths.push_back(s.size());
    for (TokenId id : s.ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
        throw InvalidArgument("build_biased_sampler: id " + std::to_string(id) + " outside vocabulary");
      }
      ++cfg.frequencies[static_cast<std::size_t>(id)];
    }
  }

  std::vector<TokenId> order(vocab_size);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) {
    return cfg.frequencies[static_cast<std::size_t>(a)] > cfg.frequencies[static_cast<std::size_t>(b)];
  });
  const std::size_t cap_a = (vocab_size + 1) / 2;
  const std::size_t cap_b = vocab_size / 2;
  std::int64_t mass_a = 0, mass_b = 0;
  for (TokenId id : order) {
    const auto f = cfg.frequencies[static_cast<std::size_t>(id)];
    const bool a_has_room = cfg.half_a.size() < cap_a;
    const bool b_has_room = cfg.half_b.size() < cap_b;
    const bool to_a = a_has_room && (!b_has_room || mass_a <= mass_b);
    if (to_a) {
      cfg.half_a.push_back(id);
      mass_a += f;
    } else {
      cfg.half_b.push_back(id);
      mass_b += f;
    }
  }
  std::sort(cfg.half_a.begin(), cfg.half_a.end());
  std::sort(cfg.half_b.begin(), cfg.half_b.end());
  cfg.threshold_length = balanced_length_threshold(lengths);
  return cfg;
}

Corpus sample_biased_corpus(const BiasedSamplerConfig& config, std::span<const std::size_t> length_template, Rng& rng) {
  const double p = config.in_half_probability;
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("sample_biased_corpus: in_half_probability must be in [0, 1]");
  if (config.threshold_length == 0) throw InvalidArgument("sample_biased_corpus: threshold length must be positive");
  auto make_dist = [&](const std::vector<TokenId>& half) {
    std::vector<double> w;
    w.reserve(half.size());
    for (TokenId id : half) w.push_back(static_cast<double>(config.frequencies.at(static_cast<std::size_t>(id))));
    if (std::accumulate(w.begin(), w.end(), 0.0) <= 0.0) {
      throw InvalidArgument("sample_biased_corpus: a vocabulary half has zero unigram mass");
    }
    return std::discrete_distribution<std::size_t>(w.begin(), w.end());
  };
  auto dist_a = make_dist(config.half_a);
  auto dist_b = make_dist(config.half_b);
  std::bernoulli_distribution in_half(p);

  Corpus out;
  out.reserve(length_template.size());
  for (std::size_t len : length_template) {
    const bool short_sentence = len < config.threshold_length;
    TokenSeq t;
    t.ids.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
      const bool primary = in_half(rng);
      const bool use_a = primary == short_sentence;
      t.ids.push_back(use_a ? config.half_a[dist_a(rng)] : config.half_b[dist_b(rng)]);
      t.word_spans.emplace_back(i, i + 1);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::string OverlapReport::to_csv() const {
  std::string out = "sentences_seen,overlap_pct\n";
  for (const auto& [n, pct] : points) out += std::to_string(n) + "," + format_double(pct) + "\n";
  return out;
}

OverlapReport bigram_overlap(std::span<const TokenSeq> original, std::span<const TokenSeq> perturbed,
                             std::size_t stride) {
  if (original.size() != perturbed.size()) {
    throw InvalidArgument("bigram_overlap: sentence counts differ (" + std::to_string(original.size()) + " vs " +
                          std::to_string(perturbed.size()) + ")");
  }
  if (stride == 0) stride = 1;
  OverlapReport report;
  std::int64_t overlap = 0, seen = 0;
  std::map<std::pair<TokenId, TokenId>, std::int64_t> orig_counts;
  for (std::size_t s = 0; s < original.size(); ++s) {
    orig_counts.clear();
    const auto& o = original[s].ids;
    const auto& p = perturbed[s].ids;
    for (std::size_t i = 0; i + 1 < o.size(); ++i) ++orig_counts[{o[i], o[i + 1]}];
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
      ++seen;
      auto it = orig_counts.find({p[i], p[i + 1]});
      if (it != orig_counts.end() && it->second > 0) {
        --it->second;
        ++overlap;
      }
    }
    const bool emit = (s + 1) % stride == 0 || s + 1 == original.size();
    if (emit && seen > 0) {
      report.points.emplace_back(s + 1, 100.0 * static_cast<double>(overlap) / static_cast<double>(seen));
    }
  }
  return report;
}

PerturbationSpec PerturbationSpec::parse_mode(const std::string& mode) {
  PerturbationSpec spec;
  if (mode == "identity") {
    spec.mode = PerturbMode::Identity;
  } else if (mode == "corpus-shuffle") {
    spec.mode = PerturbMode::CorpusShuffle;
  } else if (mode == "biased-sample") {
    spec.mode = PerturbMode::BiasedSample;
  } else if (mode.rfind("shuf-n", 0) == 0 && mode.size() > 6) {
    std::size_t n = 0;
    for (char c : mode.substr(6)) {
      if (c < '0' || c > '9') throw InvalidArgument("unknown perturbation mode '" + mode + "'");
      n = n * 10 + static_cast<std::size_t>(c - '0');
    }
    if (n == 0) throw InvalidArgument("perturbation mode '" + mode + "': n must be >= 1");
    spec.mode = PerturbMode::ShuffleN;
    spec.n = n;
  } else {
    throw InvalidArgument("unknown perturbation mode '" + mode + "'");
  }
  return spec;
}

std::string PerturbationSpec::mode_name() const {
  switch (mode) {
    case PerturbMode::Identity: return "identity";
    case PerturbMode::ShuffleN: return "shuf-n" + std::to_string(n);
    case PerturbMode::CorpusShuffle: return "corpus-shuffle";
    case PerturbMode::BiasedSample: return "biased-sample";
  }
  return "unknown";
}

std::string PerturbationSpec::stage_name() const {
  return stage == PerturbStage::PreSegmentation ? "pre" : "post";
}

PerturbStage parse_stage(const std::string& stage) {
  if (stage == "pre" || stage == "pre_segmentation") return PerturbStage::PreSegmentation;
  if (stage == "post" || stage == "post_segmentation") return PerturbStage::PostSegmentation;
  throw InvalidArgument("unknown perturbation stage '" + stage + "' (expected pre or post)");
}

Corpus encode_corpus(std::span<const Sentence> corpus, const BpeVocab& vocab, int workers) {
  Corpus out(corpus.size());
  parallel_for(corpus.size(), workers, [&](std::size_t i) { out[i] = vocab.encode(corpus[i]); });
  return out;
}

Corpus perturb_pipeline(std::span<const Sentence> corpus, const PerturbationSpec& spec, const BpeVocab& vocab,
                        int workers) {
  switch (spec.mode) {
    case PerturbMode::Identity:
      return encode_corpus(corpus, vocab, workers);
    case PerturbMode::ShuffleN: {
      Corpus out(corpus.size());
      parallel_for(corpus.size(), workers, [&](std::size_t i) {
        Rng rng(mix_seed(spec.seed, i));
        if (spec.stage == PerturbStage::PreSegmentation) {
          const auto words = shuffle_ngrams(corpus[i].words, spec.n, rng);
          out[i] = vocab.encode_words(words);
        } else {
          const auto encoded = vocab.encode(corpus[i]);
          TokenSeq t;
          t.ids = shuffle_ngrams(encoded.ids, spec.n, rng);
          for (std::size_t k = 0; k < t.ids.size(); ++k) t.word_spans.emplace_back(k, k + 1);
          out[i] = std::move(t);
        }
      });
      return out;
    }
    case PerturbMode::CorpusShuffle: {
      if (corpus.empty()) throw InvalidArgument("corpus-shuffle needs a non-empty corpus");
      const auto encoded = encode_corpus(corpus, vocab, workers);
      Rng rng(mix_seed(spec.seed, 0));
      return corpus_shuffle(encoded, rng);
    }
    case PerturbMode::BiasedSample: {
      const auto encoded = encode_corpus(corpus, vocab, workers);
      const auto cfg = build_biased_sampler(encoded, vocab.size());
      std::vector<std::size_t> lengths;
      lengths.reserve(encoded.size());
      for (const auto& s : encoded) lengths.push_back(s.size());
      Rng rng(mix_seed(spec.seed, 0));
      return sample_biased_corpus(cfg, lengths, rng);
    }
  }
  throw InvalidArgument("perturb_pipeline: unknown mode");
}

std::string corpus_to_text(std::span<const TokenSeq> corpus) {
  std::string out;
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.ids.size(); ++i) {
      if (i) out += ' ';
      out += std::to_string(s.ids[i]);
    }
    out += '\n';
  }
  return out;
}

void save_id_corpus(const std::filesystem::path& path, std::span<const TokenSeq> corpus) {
  write_file(path, corpus_to_text(corpus));
}

Corpus load_id_corpus(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  Corpus out;
  std::size_t line_no = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    TokenSeq t;
    for (const auto& tok : split_whitespace(line)) {
      try {
        std::size_t used = 0;
        const long v = std::stol(tok, &used);
        if (used != tok.size() || v < 0) throw std::invalid_argument(tok);
        t.ids.push_back(static_cast<TokenId>(v));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad token id '" + tok + "'");
      }
      t.word_spans.emplace_back(t.ids.size() - 1, t.ids.size());
    }
    if (!t.ids.empty()) out.push_back(std::move(t));
  }
  return out;
}

void save_corpus_metadata(const std::filesystem::path& path, const PerturbationSpec& spec,
                          const std::string& vocab_checksum) {
  nlohmann::ordered_json meta;
  meta["mode"] = spec.mode_name();
  meta["stage"] = spec.stage_name();
  meta["seed"] = spec.seed;
  meta["vocab_checksum"] = vocab_checksum;
  write_file(path, meta.dump(2) + "\n");
}

}  // namespace wolab
