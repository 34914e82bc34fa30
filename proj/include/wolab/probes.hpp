#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wolab/model.hpp"
#include "wolab/tokenizer.hpp"
#include "wolab/treebank.hpp"

namespace wolab {

using MatD = Mat<double>;
using VecD = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Representations

struct LayerSelector {
  enum class Kind { Layer, Final, ScalarMix };
  Kind kind = Kind::Final;
  std::size_t layer = 0;  // 0 = embedding layer

  /// "final", "mix" / "scalar_mix", or a layer index.
  static LayerSelector parse(const std::string& s);
  std::string name() const;
};

/// Softmax-normalised layer weights times a global scale.
struct ScalarMix {
  VecD logits;
  double gamma = 1.0;

  static ScalarMix uniform(std::size_t layers);
  VecD weights() const;
  MatD apply(std::span<const MatD> layers) const;
};

/// Per sentence, per layer (layers + 1 entries): words x d_model, each word
/// the mean of its subword vectors. Forward runs on the words as given.
using LayeredWords = std::vector<std::vector<MatD>>;

LayeredWords extract_all_layers(const ModelCheckpoint& checkpoint, const BpeVocab& vocab,
                                std::span<const std::vector<std::string>> sentences, int workers = 1);

/// Per sentence: words x d_model for the selected layer. ScalarMix uses
/// uniform weights unless `mix` is given.
std::vector<MatD> select_layer(const LayeredWords& all, const LayerSelector& selector,
                               const std::optional<ScalarMix>& mix = std::nullopt);

std::vector<MatD> extract_word_representations(const ModelCheckpoint& checkpoint, const BpeVocab& vocab,
                                               std::span<const std::vector<std::string>> sentences,
                                               const LayerSelector& selector, int workers = 1);

std::vector<std::vector<std::string>> words_of(std::span<const DepSentence> treebank);

// ---------------------------------------------------------------------------
// Solvers

struct Standardizer {
  VecD mean, scale;  // scale = 1/std, 0 for constant columns

  static Standardizer fit(const MatD& x);
  MatD apply(const MatD& x) const;
};

struct LinearModel {
  VecD weights;
  double bias = 0;

  VecD predict(const MatD& x) const;
};

struct LogisticOptions {
  double l2 = 1e-4;
  double tolerance = 1e-6;  // on the gradient norm
  std::size_t max_iterations = 5000;
};

/// Full-batch accelerated gradient descent on mean logistic loss plus
/// l2/2 |w|^2 (bias unpenalised), step 1/L with L from a power-iteration
/// bound. Labels are 0/1.
LinearModel logistic_train(const MatD& x, std::span<const int> labels, const LogisticOptions& opts = {});

/// Closed-form ridge with an unpenalised intercept: (Xc'Xc + lambda I) w = Xc'yc.
/// Throws InvalidArgument for lambda < 0 and NumericError on a singular system.
LinearModel ridge_solve(const MatD& x, const VecD& y, double lambda);

double accuracy(const LinearModel& model, const MatD& x, std::span<const int> labels);
/// 1 - SS_res / SS_tot, SS_tot about the mean of `y`.
double r_squared(const VecD& y, const VecD& prediction);

// ---------------------------------------------------------------------------
// Reports

struct ProbeReport {
  std::string task;
  std::string subject;  // checkpoint or feature description
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<std::string, double>> metrics;
  std::string baseline;  // empty when no comparison
  std::vector<std::pair<std::string, double>> delta;  // subject - baseline

  std::optional<double> metric(const std::string& name) const;
  /// Throws NumericError when a metric leaves its valid range.
  void validate() const;
  std::string to_csv() const;  // task,metric,value,delta
  nlohmann::ordered_json to_json() const;
  static ProbeReport from_json(const nlohmann::json& j);
};

/// Adds per-metric differences (report - baseline) for metrics present in both.
ProbeReport with_baseline(ProbeReport report, const ProbeReport& baseline, const std::string& baseline_name);

// ---------------------------------------------------------------------------
// Probes

struct PairwiseConfig {
  std::vector<std::size_t> train_sizes = {2000, 5000, 10000};
  std::size_t test_size = 2000;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  double min_position_coverage = 0.25;  // banned positions occur in at least this share of sentences
  bool shuffle_labels = false;
  LogisticOptions logistic;
};

struct PairwiseSplit {
  std::pair<std::size_t, std::size_t> banned;
  // (sentence, first word, second word); label = first precedes second
  std::vector<std::array<std::size_t, 3>> train;
  std::vector<std::array<std::size_t, 3>> test;
};

/// Builds the banned-position split for one seed. Train pairs avoid both
/// banned positions; test pairs contain at least one. Labels alternate so
/// every prefix of `train` is balanced.
PairwiseSplit make_pairwise_split(std::span<const std::size_t> lengths, std::size_t train_size,
                                  std::size_t test_size, double min_position_coverage, std::uint64_t seed);

ProbeReport pairwise_order_probe(std::span<const MatD> reps, const PairwiseConfig& config);

struct RegressionConfig {
  std::size_t folds = 6;
  double lambda = 1.0;
  bool shuffle_labels = false;
  std::uint64_t seed = 0;  // only used to shuffle labels
};

/// Assigns each word type to one of `folds` folds, greedily balancing sample
/// counts (types by descending count, ties by string).
std::vector<std::size_t> word_type_folds(std::span<const std::string> types, std::span<const std::size_t> counts,
                                         std::size_t folds);

/// Reps are indexed like `treebank`; the target is each word's 0-based index.
ProbeReport position_regression_probe(std::span<const MatD> reps, std::span<const DepSentence> treebank,
                                      const RegressionConfig& config);

struct BilinearConfig {
  std::size_t epochs = 30;
  std::size_t batch_sentences = 16;
  double learning_rate = 2e-3;
  double l2 = 0.0;
  std::uint64_t seed = 0;
  bool scalar_mix = false;
};

/// Unlabeled attachment over non-root dependents, overall and per distance bin.
struct UasResult {
  double overall = 0;
  std::array<double, kLengthBins> per_bin{};
  std::array<std::size_t, kLengthBins> counts{};
};

/// Argmax over candidate heads j != i of h_i' W h_j.
UasResult bilinear_uas(std::span<const MatD> reps, std::span<const DepSentence> treebank, const MatD& w);

struct BilinearModel {
  MatD w;
  std::optional<ScalarMix> mix;
  std::vector<Standardizer> standardizers;  // per layer
};

/// Each sentence entry holds one or more layers; with scalar_mix every layer
/// is mixed, otherwise only the first is used.
BilinearModel train_bilinear(const LayeredWords& train, std::span<const DepSentence> train_tb, const LayeredWords& dev,
                             std::span<const DepSentence> dev_tb, const BilinearConfig& config);

UasResult evaluate_bilinear(const BilinearModel& model, const LayeredWords& reps, std::span<const DepSentence> treebank);

ProbeReport bilinear_dep_probe(const LayeredWords& train, std::span<const DepSentence> train_tb, const LayeredWords& dev,
                               std::span<const DepSentence> dev_tb, const LayeredWords& test,
                               std::span<const DepSentence> test_tb, const BilinearConfig& config);

/// Keeps only the selected layer (or all layers for ScalarMix).
LayeredWords restrict_layers(const LayeredWords& all, const LayerSelector& selector);

}  // namespace wolab
