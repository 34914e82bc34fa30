#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wolab/corpus.hpp"
#include "wolab/model.hpp"

namespace wolab {

using MatD = Mat<double>;

// ---------------------------------------------------------------------------
// Position-embedding geometry

/// The learned or fixed position table of a checkpoint. Throws
/// InvalidArgument("no position table") when the model has none.
MatD position_table(const ModelCheckpoint& checkpoint);

/// Pearson correlation between every pair of rows. Constant rows correlate
/// 0 with everything except themselves.
MatD correlation_matrix(const MatD& table);
MatD dot_product_matrix(const MatD& table);

/// Correlation matrix of the first `rows` position embeddings (all when 0).
MatD position_correlation_matrix(const ModelCheckpoint& checkpoint, std::size_t rows = 0);

struct BandingScores {
  double monotonicity = 0;
  double translation_invariance = 0;
  std::vector<double> profile;  // a(k) for k = 0..K+1
};

inline constexpr std::size_t kBandingWindow = 16;

/// a(k) = mean_i C[i, i+k]; invariance = 1 - mean_{k=1..K} std_i C[i, i+k]
/// (population std); monotonicity = share of k in [1, K] with |a(k)| > |a(k+1)|.
/// Requires P > K + 1.
BandingScores banding_scores(const MatD& c, std::size_t window = kBandingWindow);

// ---------------------------------------------------------------------------
// Attention offsets

/// Offset j - i of the most attended key for query i among the first
/// `length` entries of `row`; ties go to the smallest |offset|, then left.
int max_attention_offset(std::span<const double> row, std::size_t query, std::size_t length);

struct OffsetHistogram {
  std::size_t layers = 0;
  std::size_t heads = 0;
  /// [layer][offset] -> percentage of queries whose maximum attention lands there (heads pooled).
  std::vector<std::map<int, double>> max_pct;
  /// [layer][offset] -> percentage of total attention mass at that offset (heads pooled).
  std::vector<std::map<int, double>> mass_pct;

  double pct(std::size_t layer, int offset) const;
  std::string to_csv() const;       // layer,offset,pct (layer 1-based)
  std::string mass_to_csv() const;  // layer,offset,pct
};

/// Accumulates max-attention offsets and attention mass from per-sequence
/// attention matrices: attn[layer][head][sequence] with `lengths[sequence]`
/// valid rows/columns.
class OffsetAccumulator {
 public:
  OffsetAccumulator(std::size_t layers, std::size_t heads);
  void add(std::size_t layer, std::size_t head, const Mat<float>& attention, std::size_t length);
  void add(std::size_t layer, std::size_t head, const MatD& attention, std::size_t length);
  void merge(const OffsetAccumulator& other);
  OffsetHistogram finish() const;

 private:
  std::size_t layers_, heads_;
  std::vector<std::map<int, double>> max_counts_, mass_;
  std::vector<double> queries_;
};

OffsetHistogram attention_offset_histogram(const ModelCheckpoint& checkpoint, std::span<const TokenSeq> sentences,
                                           int workers = 1);

/// {1, 2, 7, 8, 11, 12} mapped onto a model of `depth` layers (1-based, unique).
std::vector<std::size_t> default_plot_layers(std::size_t depth);

// ---------------------------------------------------------------------------
// Export

std::string correlation_csv(const MatD& c);  // i,j,value
MatD parse_correlation_csv(const std::string& text);

std::map<std::pair<std::size_t, int>, double> parse_offset_csv(const std::string& text);

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

struct ChartLabels {
  std::string title;
  std::string x_label;
  std::string y_label;
};

std::string heatmap_svg(const MatD& c, const ChartLabels& labels, double lo = -1.0, double hi = 1.0);
std::string line_chart_svg(std::span<const Series> series, const ChartLabels& labels);

/// Lines for the selected layers (1-based) over offsets.
std::string offset_chart_svg(const OffsetHistogram& h, std::span<const std::size_t> layers, const std::string& title,
                             bool mass = false);

void export_text(const std::filesystem::path& path, const std::string& contents);

}  // namespace wolab
