#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wolab/common.hpp"
#include "wolab/corpus_types.hpp"
#include "wolab/treebank.hpp"

namespace wolab {

/// Cumulative table for sampling ranks with probability proportional to
/// 1 / (rank + offset)^exponent.
class ZipfTable {
 public:
  ZipfTable() = default;
  ZipfTable(std::size_t n, double exponent, double offset = 2.7);
  std::size_t sample(Rng& rng) const;
  std::size_t size() const { return cdf_.size(); }

 private:
  std::vector<double> cdf_;
};

struct SynthConfig {
  std::uint64_t lexicon_seed = 2022;
  std::size_t noun_stems = 8000;
  std::size_t verb_stems = 2500;
  std::size_t adjective_stems = 2500;
  std::size_t names = 1500;
  double zipf_exponent = 1.0;
  std::size_t max_words = 60;
};

/// A small English-like language: a projective phrase-structure grammar over
/// a Zipfian lexicon of real function words and generated content stems with
/// regular inflection. Produces sentences together with gold dependency
/// trees (UD-style relation labels). Used for fixtures when no natural corpus
/// or treebank is available.
class SyntheticLanguage {
 public:
  explicit SyntheticLanguage(SynthConfig config = {});

  DepSentence sample(Rng& rng) const;
  std::vector<DepSentence> generate(std::size_t count, std::uint64_t seed) const;

  const SynthConfig& config() const { return config_; }

  struct Lexicon;

 private:
  SynthConfig config_;
  std::shared_ptr<const Lexicon> lex_;
};

std::vector<Sentence> to_sentences(std::span<const DepSentence> treebank);
std::string sentences_to_text(std::span<const Sentence> sentences);

}  // namespace wolab
