#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace wolab {

/// A dependency-annotated sentence. heads[i] is the 0-based index of word i's
/// head, or kRoot for the root word.
struct DepSentence {
  static constexpr int kRoot = -1;

  std::string id;
  std::vector<std::string> words;
  std::vector<int> heads;
  std::vector<std::string> relations;

  std::size_t size() const { return words.size(); }
};

/// Throws FormatError naming `where` when heads are out of range or cyclic.
void validate_tree(const DepSentence& s, const std::string& where);

std::vector<DepSentence> parse_conllu_text(const std::string& text, const std::string& source = "<memory>");
std::vector<DepSentence> parse_conllu(const std::filesystem::path& path);
std::string to_conllu(std::span<const DepSentence> sentences);

std::vector<DepSentence> filter_max_len(std::span<const DepSentence> sentences, std::size_t max_tokens = 30);

/// Dependency-length bins: 1, 2, 3, 4, 5+.
inline constexpr std::size_t kLengthBins = 5;
inline constexpr std::array<const char*, kLengthBins> kLengthBinNames = {"1", "2", "3", "4", "5+"};
std::size_t length_bin(std::size_t length);

enum class HistogramNormalization { PerBin, PerRelation };

struct DependencyHistogram {
  HistogramNormalization normalization = HistogramNormalization::PerBin;
  std::map<std::string, std::array<double, kLengthBins>> frequency;  // relation -> bin -> relative frequency
  std::map<std::string, std::array<std::size_t, kLengthBins>> counts;

  std::string to_csv() const;  // relation,bin,frequency
};

/// Lengths |i - head(i)| of every non-root-headed word, binned. PerBin makes
/// each bin's frequencies sum to 1 over relations; PerRelation makes each
/// relation's frequencies sum to 1 over bins.
DependencyHistogram dependency_length_histogram(std::span<const DepSentence> sentences,
                                                HistogramNormalization norm = HistogramNormalization::PerBin);

}  // namespace wolab
