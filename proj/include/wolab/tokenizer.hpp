#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wolab/corpus_types.hpp"

namespace wolab {

using TokenId = std::int32_t;

/// Reserved ids. Every vocabulary places these first.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kMask = 1;
inline constexpr TokenId kUnk = 2;
inline constexpr TokenId kBos = 3;
inline constexpr TokenId kEos = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

inline constexpr std::string_view kEndOfWord = "</w>";

/// Subword ids plus the runs of ids that came from one input word.
struct TokenSeq {
  std::vector<TokenId> ids;
  std::vector<std::pair<std::size_t, std::size_t>> word_spans;  // [start, end)

  std::size_t size() const { return ids.size(); }
  bool spans_tile() const;
};

struct MergeRule {
  std::string left;
  std::string right;
  std::string merged() const { return left + right; }
  bool operator==(const MergeRule&) const = default;
};

/// A trained byte-pair-encoding vocabulary. Immutable once built.
class BpeVocab {
 public:
  static constexpr int kFormatVersion = 1;

  BpeVocab();  // specials only, no merges

  std::size_t size() const { return id_to_token_.size(); }
  const std::vector<MergeRule>& merges() const { return merges_; }
  const std::string& token(TokenId id) const;
  /// -1 when absent.
  TokenId id_of(const std::string& token) const;
  bool is_special(TokenId id) const { return id >= 0 && id < special::kCount; }

  std::vector<TokenId> encode_word(const std::string& word) const;
  TokenSeq encode(const Sentence& sentence) const;
  TokenSeq encode_words(std::span<const std::string> words) const;
  /// Inverse of encode; end-of-word markers become single spaces.
  std::string decode(std::span<const TokenId> ids) const;

  /// Hex SHA-256 of the serialized vocabulary.
  std::string checksum() const;

  std::string serialize() const;
  static BpeVocab deserialize(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static BpeVocab load(const std::filesystem::path& path);

  /// Builds a vocabulary from an initial symbol inventory and an ordered merge list.
  static BpeVocab from_merges(const std::vector<std::string>& initial_symbols,
                              const std::vector<MergeRule>& merges);

 private:
  TokenId add_token(const std::string& tok);
  void rebuild_ranks();

  std::vector<MergeRule> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  // "left\x1fright" -> merge rank
  std::unordered_map<std::string, std::size_t> merge_rank_;
};

/// Number of symbols a vocabulary trained on `corpus` starts from
/// (specials + distinct characters + end-of-word marker).
std::size_t bpe_initial_size(std::span<const Sentence> corpus);

/// Standard BPE: characters plus an end-of-word marker, then greedily merge
/// the most frequent adjacent pair (ties broken lexicographically) until the
/// vocabulary reaches `vocab_size` or no pair occurs at least twice.
BpeVocab train_bpe(std::span<const Sentence> corpus, std::size_t vocab_size);

}  // namespace wolab
