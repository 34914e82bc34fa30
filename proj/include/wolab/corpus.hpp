#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wolab/common.hpp"
#include "wolab/corpus_types.hpp"
#include "wolab/tokenizer.hpp"

namespace wolab {

using Corpus = std::vector<TokenSeq>;

// ---------------------------------------------------------------------------
// Loading

/// Streams sentences from a one-sentence-per-line UTF-8 file. Blank lines are
/// skipped; ids count the yielded sentences. Throws IoError when the file
/// cannot be opened and FormatError (naming the 1-based line) on bad UTF-8.
class CorpusReader {
 public:
  explicit CorpusReader(const std::filesystem::path& path);
  std::optional<Sentence> next();

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t line_no_ = 0;
  std::uint64_t next_id_ = 0;
};

std::vector<Sentence> load_corpus(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Shuffling

/// Uniformly random fixed-point-free permutation (rejection sampling of
/// uniform permutations). Identity for length <= 1.
template <class T>
std::vector<T> derange(std::span<const T> items, Rng& rng) {
  std::vector<T> out(items.begin(), items.end());
  const std::size_t n = out.size();
  if (n <= 1) return out;
  std::vector<std::size_t> perm(n);
  for (;;) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    bool fixed = false;
    for (std::size_t i = 0; i < n && !fixed; ++i) fixed = perm[i] == i;
    if (!fixed) break;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = items[perm[i]];
  return out;
}

template <class T>
std::vector<T> derange(const std::vector<T>& items, Rng& rng) {
  return derange(std::span<const T>(items), rng);
}

/// Chunks `tokens` left-to-right into ceil(L/n) runs of n (last may be
/// shorter) and deranges the chunk order; within-chunk order is kept.
template <class T>
std::vector<T> shuffle_ngrams(std::span<const T> tokens, std::size_t n, Rng& rng) {
  if (n == 0) throw InvalidArgument("shuffle_ngrams: n must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t s = 0; s < tokens.size(); s += n) chunks.emplace_back(s, std::min(tokens.size(), s + n));
  const auto order = derange(std::span<const std::pair<std::size_t, std::size_t>>(chunks), rng);
  std::vector<T> out;
  out.reserve(tokens.size());
  for (const auto& [s, e] : order) out.insert(out.end(), tokens.begin() + s, tokens.begin() + e);
  return out;
}

template <class T>
std::vector<T> shuffle_ngrams(const std::vector<T>& tokens, std::size_t n, Rng& rng) {
  return shuffle_ngrams(std::span<const T>(tokens), n, rng);
}

/// One global uniform permutation of every subword id, refilled into the
/// original sentence lengths.
Corpus corpus_shuffle(std::span<const TokenSeq> corpus, Rng& rng);

// ---------------------------------------------------------------------------
// Biased (length-dependent) unigram sampling

struct BiasedSamplerConfig {
  std::vector<TokenId> half_a;
  std::vector<TokenId> half_b;
  std::size_t threshold_length = 1;  // sentences shorter than this draw mainly from half_a
  double in_half_probability = 0.8;
  std::vector<std::int64_t> frequencies;  // unigram count per token id

  std::int64_t half_frequency(std::span<const TokenId> half) const;
};

/// Splits the vocabulary into two equal-size halves with balanced unigram
/// mass (greedy: descending frequency, each id to the lighter half with room)
/// and picks the token-balancing length threshold.
BiasedSamplerConfig build_biased_sampler(std::span<const TokenSeq> corpus, std::size_t vocab_size);

/// Smallest observed length l minimising |tokens in sentences shorter than l -
/// tokens in sentences of length >= l|.
std::size_t balanced_length_threshold(std::span<const std::size_t> lengths);

Corpus sample_biased_corpus(const BiasedSamplerConfig& config, std::span<const std::size_t> length_template, Rng& rng);

// ---------------------------------------------------------------------------
// Overlap statistics

struct OverlapReport {
  std::vector<std::pair<std::size_t, double>> points;  // (sentences_seen, overlap_pct)

  std::string to_csv() const;
};

/// Cumulative percentage of perturbed bigrams (ordered, multiset-intersected
/// per sentence) that also occur in the matching original sentence. Prefixes
/// with no bigrams seen yet are omitted; `stride` thins the output.
OverlapReport bigram_overlap(std::span<const TokenSeq> original, std::span<const TokenSeq> perturbed,
                             std::size_t stride = 1);

// ---------------------------------------------------------------------------
// Perturbation pipeline

enum class PerturbMode { Identity, ShuffleN, CorpusShuffle, BiasedSample };
enum class PerturbStage { PreSegmentation, PostSegmentation };

struct PerturbationSpec {
  PerturbMode mode = PerturbMode::Identity;
  std::size_t n = 1;
  PerturbStage stage = PerturbStage::PreSegmentation;
  std::uint64_t seed = 0;

  /// "identity", "shuf-n1".."shuf-nK", "corpus-shuffle", "biased-sample".
  static PerturbationSpec parse_mode(const std::string& mode);
  std::string mode_name() const;
  std::string stage_name() const;
};

PerturbStage parse_stage(const std::string& stage);

/// Encodes and perturbs a corpus. Deterministic for a fixed seed: every
/// sentence draws from its own generator derived from (seed, sentence index).
Corpus perturb_pipeline(std::span<const Sentence> corpus, const PerturbationSpec& spec, const BpeVocab& vocab,
                        int workers = 1);

Corpus encode_corpus(std::span<const Sentence> corpus, const BpeVocab& vocab, int workers = 1);

// ---------------------------------------------------------------------------
// Corpus files

/// One sentence per line of space-separated ids.
std::string corpus_to_text(std::span<const TokenSeq> corpus);
void save_id_corpus(const std::filesystem::path& path, std::span<const TokenSeq> corpus);
/// Reads an id corpus; spans default to one id per span.
Corpus load_id_corpus(const std::filesystem::path& path);

/// Metadata sidecar written next to a perturbed corpus.
void save_corpus_metadata(const std::filesystem::path& path, const PerturbationSpec& spec,
                          const std::string& vocab_checksum);

}  // namespace wolab
