#include "wolab/probes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "wolab/training.hpp"

namespace wolab {

// ---------------------------------------------------------------------------
// Representations

LayerSelector LayerSelector::parse(const std::string& s) {
  LayerSelector sel;
  if (s == "final") return sel;
  if (s == "mix" || s == "scalar_mix") {
    sel.kind = Kind::ScalarMix;
    return sel;
  }
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0' || v < 0) {
    throw InvalidArgument("layer selector '" + s + "' is not final, mix or a layer index");
  }
  sel.kind = Kind::Layer;
  sel.layer = static_cast<std::size_t>(v);
  return sel;
}

std::string LayerSelector::name() const {
  switch (kind) {
    case Kind::Final: return "final";
    case Kind::ScalarMix: return "scalar_mix";
    case Kind::Layer: return std::to_string(layer);
  }
  return "final";
}

ScalarMix ScalarMix::uniform(std::size_t layers) {
  ScalarMix m;
  m.logits = VecD::Zero(static_cast<Eigen::Index>(layers));
  return m;
}

VecD ScalarMix::weights() const {
  const double mx = logits.maxCoeff();
  VecD w = (logits.array() - mx).exp().matrix();
  return w / w.sum();
}

MatD ScalarMix::apply(std::span<const MatD> layers) const {
  if (layers.size() != static_cast<std::size_t>(logits.size())) throw InvalidArgument("scalar mix: layer count mismatch");
  const VecD w = weights();
  MatD out = MatD::Zero(layers[0].rows(), layers[0].cols());
  for (std::size_t l = 0; l < layers.size(); ++l) out += w(static_cast<Eigen::Index>(l)) * layers[l];
  return gamma * out;
}

LayeredWords extract_all_layers(const ModelCheckpoint& checkpoint, const BpeVocab& vocab,
                                std::span<const std::vector<std::string>> sentences, int workers) {
  const Transformer<float> model(checkpoint);
  const bool framed = checkpoint.config.frame_bos_eos;
  const std::size_t offset = framed ? 1 : 0;
  std::vector<TokenSeq> encoded(sentences.size());
  for (std::size_t s = 0; s < sentences.size(); ++s) encoded[s] = vocab.encode_words(sentences[s]);
  const auto framed_ids = frame_sequences(encoded, framed);

  constexpr std::size_t kBatch = 16;
  const std::size_t n_batches = (sentences.size() + kBatch - 1) / kBatch;
  LayeredWords out(sentences.size());
  parallel_for(n_batches, workers, [&](std::size_t b) {
    const std::size_t s0 = b * kBatch, s1 = std::min(sentences.size(), s0 + kBatch);
    const Batch batch = Batch::from_sequences(std::span<const std::vector<TokenId>>(framed_ids.data() + s0, s1 - s0));
    ForwardOptions<float> opts;
    opts.attentions = false;
    const auto trace = model.forward(batch, opts);
    std::size_t row = 0;
    for (std::size_t s = s0; s < s1; ++s) {
      const auto& spans = encoded[s].word_spans;
      auto& layers = out[s];
      layers.resize(trace.hidden_states.size());
      for (std::size_t l = 0; l < trace.hidden_states.size(); ++l) {
        const auto& h = trace.hidden_states[l];
        MatD words(static_cast<Eigen::Index>(spans.size()), h.cols());
        for (std::size_t w = 0; w < spans.size(); ++w) {
          const auto [a, e] = spans[w];
          if (e == a) throw InvalidArgument("word '" + sentences[s][w] + "' encodes to no subwords");
          words.row(static_cast<Eigen::Index>(w)) =
              h.middleRows(static_cast<Eigen::Index>(row + offset + a), static_cast<Eigen::Index>(e - a))
                  .colwise()
                  .mean()
                  .cast<double>();
        }
        layers[l] = std::move(words);
      }
      row += framed_ids[s].size();
    }
  });
  return out;
}

std::vector<MatD> select_layer(const LayeredWords& all, const LayerSelector& selector,
                               const std::optional<ScalarMix>& mix) {
  std::vector<MatD> out;
  out.reserve(all.size());
  for (const auto& layers : all) {
    switch (selector.kind) {
      case LayerSelector::Kind::Final: out.push_back(layers.back()); break;
      case LayerSelector::Kind::Layer:
        if (selector.layer >= layers.size()) {
          throw InvalidArgument("layer " + std::to_string(selector.layer) + " out of range (model has " +
                                std::to_string(layers.size()) + " hidden states)");
        }
        out.push_back(layers[selector.layer]);
        break;
      case LayerSelector::Kind::ScalarMix: {
        const ScalarMix m = mix ? *mix : ScalarMix::uniform(layers.size());
        out.push_back(m.apply(layers));
        break;
      }
    }
  }
  return out;
}

std::vector<MatD> extract_word_representations(const ModelCheckpoint& checkpoint, const BpeVocab& vocab,
                                               std::span<const std::vector<std::string>> sentences,
                                               const LayerSelector& selector, int workers) {
  return select_layer(extract_all_layers(checkpoint, vocab, sentences, workers), selector);
}

std::vector<std::vector<std::string>> words_of(std::span<const DepSentence> treebank) {
  std::vector<std::vector<std::string>> out;
  out.reserve(treebank.size());
  for (const auto& s : treebank) out.push_back(s.words);
  return out;
}

LayeredWords restrict_layers(const LayeredWords& all, const LayerSelector& selector) {
  if (selector.kind == LayerSelector::Kind::ScalarMix) return all;
  LayeredWords out;
  out.reserve(all.size());
  for (const auto& layers : all) {
    const std::size_t l = selector.kind == LayerSelector::Kind::Final ? layers.size() - 1 : selector.layer;
    if (l >= layers.size()) throw InvalidArgument("layer " + std::to_string(l) + " out of range");
    out.push_back({layers[l]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Solvers

Standardizer Standardizer::fit(const MatD& x) {
  if (x.rows() == 0) throw InvalidArgument("standardizer: no samples");
  Standardizer s;
  s.mean = x.colwise().mean().transpose();
  s.scale.resize(x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double var = (x.col(c).array() - s.mean(c)).square().mean();
    s.scale(c) = var > 1e-24 ? 1.0 / std::sqrt(var) : 0.0;
  }
  return s;
}

MatD Standardizer::apply(const MatD& x) const {
  MatD out = x.rowwise() - mean.transpose();
  return out.array().rowwise() * scale.transpose().array();
}

VecD LinearModel::predict(const MatD& x) const { return (x * weights).array() + bias; }

namespace {

void check_finite(const MatD& x, const char* what) {
  if (!x.allFinite()) throw InvalidArgument(std::string(what) + ": features contain non-finite values");
}

double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

}  // namespace

LinearModel logistic_train(const MatD& x, std::span<const int> labels, const LogisticOptions& opts) {
  const Eigen::Index n = x.rows(), p = x.cols();
  if (n == 0) throw InvalidArgument("logistic_train: no samples");
  if (static_cast<std::size_t>(n) != labels.size()) throw InvalidArgument("logistic_train: label count mismatch");
  check_finite(x, "logistic_train");
  VecD y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] != 0 && labels[static_cast<std::size_t>(i)] != 1) {
      throw InvalidArgument("logistic_train: labels must be 0 or 1");
    }
    y(i) = labels[static_cast<std::size_t>(i)];
  }

  // Largest eigenvalue of [X 1]'[X 1] / n by power iteration.
  VecD v = VecD::Ones(p + 1) / std::sqrt(static_cast<double>(p + 1));
  double lambda_max = 0;
  for (int it = 0; it < 100; ++it) {
    VecD xv = x * v.head(p);
    xv.array() += v(p);
    VecD next(p + 1);
    next.head(p) = x.transpose() * xv / static_cast<double>(n);
    next(p) = xv.sum() / static_cast<double>(n);
    const double norm = next.norm();
    if (norm == 0) break;
    lambda_max = norm;
    v = next / norm;
  }
  const double lipschitz = 0.25 * lambda_max * 1.05 + opts.l2 + 1e-12;
  const double step = 1.0 / lipschitz;

  auto gradient = [&](const VecD& theta, VecD& g) {
    VecD z = x * theta.head(p);
    z.array() += theta(p);
    VecD r(n);
    for (Eigen::Index i = 0; i < n; ++i) r(i) = sigmoid(z(i)) - y(i);
    g.resize(p + 1);
    g.head(p) = x.transpose() * r / static_cast<double>(n) + opts.l2 * theta.head(p);
    g(p) = r.sum() / static_cast<double>(n);
  };

  VecD theta = VecD::Zero(p + 1), prev = theta, look = theta, g;
  double t = 1.0;
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    gradient(look, g);
    if (g.norm() < opts.tolerance) {
      theta = look;
      break;
    }
    prev = theta;
    theta = look - step * g;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    look = theta + ((t - 1.0) / t_next) * (theta - prev);
    t = t_next;
  }
  LinearModel m;
  m.weights = theta.head(p);
  m.bias = theta(p);
  return m;
}

LinearModel ridge_solve(const MatD& x, const VecD& y, double lambda) {
  if (lambda < 0) throw InvalidArgument("ridge_solve: lambda must be >= 0");
  if (x.rows() == 0) throw InvalidArgument("ridge_solve: no samples");
  if (x.rows() != y.size()) throw InvalidArgument("ridge_solve: target count mismatch");
  check_finite(x, "ridge_solve");
  const VecD xm = x.colwise().mean().transpose();
  const double ym = y.mean();
  const MatD xc = x.rowwise() - xm.transpose();
  const VecD yc = y.array() - ym;
  MatD gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  Eigen::LLT<MatD> llt(gram);
  if (llt.info() != Eigen::Success) throw NumericError("ridge_solve: singular normal equations (use lambda > 0)");
  LinearModel m;
  m.weights = llt.solve(xc.transpose() * yc);
  if (!m.weights.allFinite()) throw NumericError("ridge_solve: singular normal equations (use lambda > 0)");
  m.bias = ym - xm.dot(m.weights);
  return m;
}

double accuracy(const LinearModel& model, const MatD& x, std::span<const int> labels) {
  const VecD z = model.predict(x);
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) correct += ((z(i) > 0) == (labels[static_cast<std::size_t>(i)] == 1)) ? 1 : 0;
  return z.size() ? static_cast<double>(correct) / static_cast<double>(z.size()) : 0.0;
}

double r_squared(const VecD& y, const VecD& prediction) {
  const double mean = y.mean();
  const double ss_tot = (y.array() - mean).square().sum();
  const double ss_res = (y - prediction).squaredNorm();
  if (ss_tot == 0) return ss_res == 0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - ss_res / ss_tot;
}

// ---------------------------------------------------------------------------
// Reports

std::optional<double> ProbeReport::metric(const std::string& name) const {
  for (const auto& [k, v] : metrics) {
    if (k == name) return v;
  }
  return std::nullopt;
}

void ProbeReport::validate() const {
  for (const auto& [k, v] : metrics) {
    if (std::isnan(v)) throw NumericError("probe metric " + k + " is NaN");
    const bool unit = k.starts_with("accuracy") || k.starts_with("uas") || k.starts_with("dev_uas");
    if (unit && !k.ends_with("_sd") && (v < 0.0 || v > 1.0)) throw NumericError("probe metric " + k + " outside [0, 1]");
    if (k.starts_with("r2") && !k.ends_with("_sd") && v > 1.0 + 1e-12) throw NumericError("probe metric " + k + " exceeds 1");
  }
}

std::string ProbeReport::to_csv() const {
  std::string out = "task,metric,value,delta\n";
  for (const auto& [k, v] : metrics) {
    std::string d;
    for (const auto& [dk, dv] : delta) {
      if (dk == k) d = format_double(dv);
    }
    out += task + "," + k + "," + format_double(v) + "," + d + "\n";
  }
  return out;
}

nlohmann::ordered_json ProbeReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["subject"] = subject;
  j["seeds"] = seeds;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) m[k] = v;
  j["metrics"] = m;
  if (!baseline.empty()) {
    j["baseline"] = baseline;
    nlohmann::ordered_json d = nlohmann::ordered_json::object();
    for (const auto& [k, v] : delta) d[k] = v;
    j["delta"] = d;
  }
  return j;
}

ProbeReport ProbeReport::from_json(const nlohmann::json& j) {
  ProbeReport r;
  try {
    r.task = j.at("task").get<std::string>();
    r.subject = j.value("subject", std::string());
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    for (const auto& [k, v] : j.at("metrics").items()) r.metrics.emplace_back(k, v.get<double>());
    r.baseline = j.value("baseline", std::string());
    if (j.contains("delta")) {
      for (const auto& [k, v] : j.at("delta").items()) r.delta.emplace_back(k, v.get<double>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe report: ") + e.what());
  }
  return r;
}

ProbeReport with_baseline(ProbeReport report, const ProbeReport& baseline, const std::string& baseline_name) {
  report.baseline = baseline_name;
  report.delta.clear();
  for (const auto& [k, v] : report.metrics) {
    if (auto b = baseline.metric(k)) report.delta.emplace_back(k, v - *b);
  }
  return report;
}

// ---------------------------------------------------------------------------
// Pairwise order probe

PairwiseSplit make_pairwise_split(std::span<const std::size_t> lengths, std::size_t train_size,
                                  std::size_t test_size, double min_position_coverage, std::uint64_t seed) {
  std::size_t max_len = 0;
  for (auto l : lengths) max_len = std::max(max_len, l);
  std::vector<std::size_t> eligible;
  for (std::size_t p = 0; p < max_len; ++p) {
    std::size_t present = 0;
    for (auto l : lengths) present += l > p ? 1 : 0;
    if (static_cast<double>(present) >= min_position_coverage * static_cast<double>(lengths.size())) eligible.push_back(p);
  }
  if (eligible.size() < 2) throw InvalidArgument("pairwise probe: fewer than two positions meet the coverage threshold");

  Rng rng(mix_seed(seed, 0x5041495257495345ULL));
  std::shuffle(eligible.begin(), eligible.end(), rng);
  PairwiseSplit split;
  split.banned = {std::min(eligible[0], eligible[1]), std::max(eligible[0], eligible[1])};
  auto banned = [&](std::size_t p) { return p == split.banned.first || p == split.banned.second; };

  std::vector<std::array<std::size_t, 3>> train_pool, test_pool;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    for (std::size_t i = 0; i < lengths[s]; ++i) {
      for (std::size_t j = i + 1; j < lengths[s]; ++j) {
        (banned(i) || banned(j) ? test_pool : train_pool).push_back({s, i, j});
      }
    }
  }
  if (train_pool.size() < train_size || test_pool.size() < test_size) {
    throw InvalidArgument("pairwise probe: insufficient pairs (train " + std::to_string(train_pool.size()) + "/" +
                          std::to_string(train_size) + ", test " + std::to_string(test_pool.size()) + "/" +
                          std::to_string(test_size) + ")");
  }
  // Separate streams keep the test sample fixed across training sizes.
  auto take = [](std::vector<std::array<std::size_t, 3>>& pool, std::size_t n, Rng& rng) {
    // partial Fisher-Yates: first n entries become a uniform sample without replacement
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
      std::swap(pool[k], pool[pick(rng)]);
    }
    pool.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (k % 2 == 1) std::swap(pool[k][1], pool[k][2]);
    }
    return pool;
  };
  Rng test_rng(mix_seed(seed, 0x54455354ULL));
  split.train = take(train_pool, train_size, rng);
  split.test = take(test_pool, test_size, test_rng);
  return split;
}

namespace {

MatD pair_features(std::span<const MatD> reps, std::span<const std::array<std::size_t, 3>> pairs, std::vector<int>& labels) {
  const Eigen::Index d = reps.empty() ? 0 : reps[0].cols();
  MatD x(static_cast<Eigen::Index>(pairs.size()), 2 * d);
  labels.resize(pairs.size());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto [s, a, b] = pairs[k];
    x.row(static_cast<Eigen::Index>(k)).head(d) = reps[s].row(static_cast<Eigen::Index>(a));
    x.row(static_cast<Eigen::Index>(k)).tail(d) = reps[s].row(static_cast<Eigen::Index>(b));
    labels[k] = a < b ? 1 : 0;
  }
  return x;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

ProbeReport pairwise_order_probe(std::span<const MatD> reps, const PairwiseConfig& config) {
  if (config.train_sizes.empty() || config.seeds.empty()) throw InvalidArgument("pairwise probe: no train sizes or seeds");
  std::vector<std::size_t> lengths;
  for (const auto& r : reps) lengths.push_back(static_cast<std::size_t>(r.rows()));
  const std::size_t max_train = *std::max_element(config.train_sizes.begin(), config.train_sizes.end());

  std::vector<std::vector<double>> acc(config.train_sizes.size());
  for (auto seed : config.seeds) {
    const auto split = make_pairwise_split(lengths, max_train, config.test_size, config.min_position_coverage, seed);
    std::vector<int> train_labels, test_labels;
    const MatD train_x = pair_features(reps, split.train, train_labels);
    const MatD test_x = pair_features(reps, split.test, test_labels);
    if (config.shuffle_labels) {
      Rng rng(mix_seed(seed, 0x4c4142454cULL));
      std::shuffle(train_labels.begin(), train_labels.end(), rng);
    }
    for (std::size_t t = 0; t < config.train_sizes.size(); ++t) {
      const auto n = static_cast<Eigen::Index>(config.train_sizes[t]);
      const MatD xs = train_x.topRows(n);
      const Standardizer st = Standardizer::fit(xs);
      const auto model = logistic_train(st.apply(xs), std::span<const int>(train_labels.data(), static_cast<std::size_t>(n)),
                                        config.logistic);
      acc[t].push_back(accuracy(model, st.apply(test_x), test_labels));
    }
  }
  ProbeReport r;
  r.task = "pairwise_order";
  r.seeds = config.seeds;
  for (std::size_t t = 0; t < config.train_sizes.size(); ++t) {
    const std::string name = "accuracy@" + std::to_string(config.train_sizes[t]);
    r.metrics.emplace_back(name, mean_of(acc[t]));
    r.metrics.emplace_back(name + "_sd", sd_of(acc[t]));
  }
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Position regression probe

std::vector<std::size_t> word_type_folds(std::span<const std::string> types, std::span<const std::size_t> counts,
                                         std::size_t folds) {
  if (folds == 0) throw InvalidArgument("regression probe: folds must be positive");
  std::vector<std::size_t> order(types.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (counts[a] != counts[b]) return counts[a] > counts[b];
    return types[a] < types[b];
  });
  std::vector<std::size_t> load(folds, 0), fold(types.size(), 0);
  for (auto t : order) {
    const auto f = static_cast<std::size_t>(std::min_element(load.begin(), load.end()) - load.begin());
    fold[t] = f;
    load[f] += counts[t];
  }
  return fold;
}

ProbeReport position_regression_probe(std::span<const MatD> reps, std::span<const DepSentence> treebank,
                                      const RegressionConfig& config) {
  if (reps.size() != treebank.size()) throw InvalidArgument("regression probe: representation/treebank size mismatch");
  std::map<std::string, std::size_t> type_index;
  std::vector<std::string> types;
  std::vector<std::size_t> type_counts;
  struct Sample {
    std::size_t sentence, word, type;
  };
  std::vector<Sample> samples;
  for (std::size_t s = 0; s < treebank.size(); ++s) {
    if (static_cast<std::size_t>(reps[s].rows()) != treebank[s].size()) {
      throw InvalidArgument("regression probe: sentence " + std::to_string(s) + " has mismatched word count");
    }
    for (std::size_t i = 0; i < treebank[s].size(); ++i) {
      auto [it, inserted] = type_index.emplace(treebank[s].words[i], types.size());
      if (inserted) {
        types.push_back(treebank[s].words[i]);
        type_counts.push_back(0);
      }
      ++type_counts[it->second];
      samples.push_back({s, i, it->second});
    }
  }
  if (samples.empty()) throw InvalidArgument("regression probe: empty treebank");
  const auto fold_of_type = word_type_folds(types, type_counts, config.folds);
  const Eigen::Index d = reps[0].cols();
  MatD x(static_cast<Eigen::Index>(samples.size()), d);
  VecD y(static_cast<Eigen::Index>(samples.size()));
  for (std::size_t k = 0; k < samples.size(); ++k) {
    x.row(static_cast<Eigen::Index>(k)) = reps[samples[k].sentence].row(static_cast<Eigen::Index>(samples[k].word));
    y(static_cast<Eigen::Index>(k)) = static_cast<double>(samples[k].word);
  }
  if (config.shuffle_labels) {
    Rng rng(mix_seed(config.seed, 0x4c4142454cULL));
    std::vector<double> v(y.data(), y.data() + y.size());
    std::shuffle(v.begin(), v.end(), rng);
    y = Eigen::Map<VecD>(v.data(), y.size());
  }

  std::vector<double> r2;
  for (std::size_t f = 0; f < config.folds; ++f) {
    std::vector<Eigen::Index> tr, te;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      (fold_of_type[samples[k].type] == f ? te : tr).push_back(static_cast<Eigen::Index>(k));
    }
    if (te.size() < 10 || tr.size() < 10) {
      throw InvalidArgument("regression probe: fold " + std::to_string(f) + " has fewer than 10 samples");
    }
    const MatD xtr = x(tr, Eigen::all), xte = x(te, Eigen::all);
    const VecD ytr = y(tr), yte = y(te);
    const Standardizer st = Standardizer::fit(xtr);
    const auto model = ridge_solve(st.apply(xtr), ytr, config.lambda);
    r2.push_back(r_squared(yte, model.predict(st.apply(xte))));
  }
  ProbeReport r;
  r.task = "position_regression";
  r.seeds = {config.seed};
  r.metrics.emplace_back("r2", mean_of(r2));
  r.metrics.emplace_back("r2_sd", sd_of(r2));
  for (std::size_t f = 0; f < r2.size(); ++f) r.metrics.emplace_back("r2_fold" + std::to_string(f), r2[f]);
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Bilinear dependency probe

namespace {

void add_arc(UasResult& u, std::array<std::size_t, kLengthBins>& correct, std::size_t dist, bool ok) {
  const auto b = length_bin(dist);
  ++u.counts[b];
  correct[b] += ok ? 1 : 0;
}

void finish(UasResult& u, const std::array<std::size_t, kLengthBins>& correct) {
  std::size_t total = 0, hits = 0;
  for (std::size_t b = 0; b < kLengthBins; ++b) {
    total += u.counts[b];
    hits += correct[b];
    u.per_bin[b] = u.counts[b] ? static_cast<double>(correct[b]) / static_cast<double>(u.counts[b]) : 0.0;
  }
  u.overall = total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

void score_sentence(const MatD& h, const DepSentence& s, const MatD& w, UasResult& u,
                    std::array<std::size_t, kLengthBins>& correct) {
  const auto n = static_cast<Eigen::Index>(s.size());
  if (h.rows() != n) throw InvalidArgument("bilinear probe: representation/treebank word count mismatch");
  const MatD scores = h * w * h.transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const int gold = s.heads[static_cast<std::size_t>(i)];
    if (gold == DepSentence::kRoot) continue;
    Eigen::Index best = -1;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (best < 0 || scores(i, j) > best_score) {
        best = j;
        best_score = scores(i, j);
      }
    }
    add_arc(u, correct, static_cast<std::size_t>(std::abs(static_cast<int>(i) - gold)), best == gold);
  }
}

struct AdamState {
  MatD m, v;
  void init(Eigen::Index r, Eigen::Index c) {
    m = MatD::Zero(r, c);
    v = MatD::Zero(r, c);
  }
  void step(MatD& p, const MatD& g, double lr, std::size_t t) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(b1, static_cast<double>(t)), c2 = 1 - std::pow(b2, static_cast<double>(t));
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

// Standardised per-layer matrices for one sentence.
std::vector<MatD> prepared(const std::vector<MatD>& layers, const std::vector<Standardizer>& st, bool mix) {
  std::vector<MatD> out;
  const std::size_t n = mix ? layers.size() : 1;
  for (std::size_t l = 0; l < n; ++l) out.push_back(st[l].apply(layers[l]));
  return out;
}

MatD combine(const std::vector<MatD>& layers, const std::optional<ScalarMix>& mix) {
  return mix ? mix->apply(layers) : layers[0];
}

}  // namespace

UasResult bilinear_uas(std::span<const MatD> reps, std::span<const DepSentence> treebank, const MatD& w) {
  if (reps.size() != treebank.size()) throw InvalidArgument("bilinear probe: representation/treebank size mismatch");
  UasResult u;
  std::array<std::size_t, kLengthBins> correct{};
  for (std::size_t s = 0; s < reps.size(); ++s) score_sentence(reps[s], treebank[s], w, u, correct);
  finish(u, correct);
  return u;
}

UasResult evaluate_bilinear(const BilinearModel& model, const LayeredWords& reps, std::span<const DepSentence> treebank) {
  if (reps.size() != treebank.size()) throw InvalidArgument("bilinear probe: representation/treebank size mismatch");
  UasResult u;
  std::array<std::size_t, kLengthBins> correct{};
  for (std::size_t s = 0; s < reps.size(); ++s) {
    const MatD h = combine(prepared(reps[s], model.standardizers, model.mix.has_value()), model.mix);
    score_sentence(h, treebank[s], model.w, u, correct);
  }
  finish(u, correct);
  return u;
}

BilinearModel train_bilinear(const LayeredWords& train, std::span<const DepSentence> train_tb, const LayeredWords& dev,
                             std::span<const DepSentence> dev_tb, const BilinearConfig& config) {
  if (train.empty() || train.size() != train_tb.size()) throw InvalidArgument("bilinear probe: empty or mismatched training data");
  if (config.batch_sentences == 0) throw InvalidArgument("bilinear probe: batch_sentences must be positive");
  const std::size_t n_layers = config.scalar_mix ? train[0].size() : 1;
  const Eigen::Index d = train[0][0].cols();

  BilinearModel model;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Eigen::Index rows = 0;
    for (const auto& s : train) rows += s[l].rows();
    MatD stacked(rows, d);
    Eigen::Index r = 0;
    for (const auto& s : train) {
      stacked.middleRows(r, s[l].rows()) = s[l];
      r += s[l].rows();
    }
    model.standardizers.push_back(Standardizer::fit(stacked));
  }
  if (config.scalar_mix) model.mix = ScalarMix::uniform(n_layers);

  std::vector<std::vector<MatD>> xs;
  xs.reserve(train.size());
  for (const auto& s : train) xs.push_back(prepared(s, model.standardizers, config.scalar_mix));

  Rng rng(mix_seed(config.seed, 0x42494c494eULL));
  std::normal_distribution<double> init(0.0, 0.01);
  model.w = MatD(d, d);
  for (Eigen::Index k = 0; k < model.w.size(); ++k) model.w.data()[k] = init(rng);

  AdamState adam_w, adam_mix, adam_gamma;
  adam_w.init(d, d);
  adam_mix.init(static_cast<Eigen::Index>(n_layers), 1);
  adam_gamma.init(1, 1);

  BilinearModel best = model;
  double best_dev = -1;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_sentences) {
      const std::size_t b1 = std::min(order.size(), b0 + config.batch_sentences);
      MatD gw = MatD::Zero(d, d);
      VecD gmix = VecD::Zero(static_cast<Eigen::Index>(n_layers));
      double ggamma = 0;
      std::size_t arcs = 0;
      const VecD mixw = config.scalar_mix ? model.mix->weights() : VecD::Ones(1);
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const auto& s = train_tb[order[bi]];
        const auto& layers = xs[order[bi]];
        const MatD h = combine(layers, model.mix);
        const auto n = h.rows();
        if (n < 2) continue;
        const MatD hw = h * model.w;
        MatD scores = hw * h.transpose();
        MatD ds = MatD::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          const int gold = s.heads[static_cast<std::size_t>(i)];
          if (gold == DepSentence::kRoot) continue;
          scores(i, i) = -std::numeric_limits<double>::infinity();
          const double mx = scores.row(i).maxCoeff();
          VecD p = (scores.row(i).array() - mx).exp().transpose();
          p /= p.sum();
          ds.row(i) = p.transpose();
          ds(i, gold) -= 1.0;
          ++arcs;
        }
        gw.noalias() += h.transpose() * ds * h;
        if (config.scalar_mix) {
          MatD dh = ds * (h * model.w.transpose());
          dh.noalias() += ds.transpose() * hw;
          const double gamma = model.mix->gamma;
          VecD dw(static_cast<Eigen::Index>(n_layers));
          for (std::size_t l = 0; l < n_layers; ++l) {
            const double inner = (dh.array() * layers[l].array()).sum();
            dw(static_cast<Eigen::Index>(l)) = gamma * inner;
            ggamma += mixw(static_cast<Eigen::Index>(l)) * inner;
          }
          const double avg = mixw.dot(dw);
          gmix.array() += mixw.array() * (dw.array() - avg);
        }
      }
      if (arcs == 0) continue;
      const double inv = 1.0 / static_cast<double>(arcs);
      gw *= inv;
      if (config.l2 > 0) gw += config.l2 * model.w;
      ++t;
      adam_w.step(model.w, gw, config.learning_rate, t);
      if (config.scalar_mix) {
        MatD gm = gmix * inv;
        MatD lg = model.mix->logits;
        adam_mix.step(lg, gm, config.learning_rate, t);
        model.mix->logits = lg;
        MatD gg(1, 1), gv(1, 1);
        gg(0, 0) = ggamma * inv;
        gv(0, 0) = model.mix->gamma;
        adam_gamma.step(gv, gg, config.learning_rate, t);
        model.mix->gamma = gv(0, 0);
      }
    }
    const double dev_uas = dev.empty() ? 0.0 : evaluate_bilinear(model, dev, dev_tb).overall;
    if (dev.empty() || dev_uas > best_dev) {
      best_dev = dev_uas;
      best = model;
    }
  }
  return best;
}

ProbeReport bilinear_dep_probe(const LayeredWords& train, std::span<const DepSentence> train_tb, const LayeredWords& dev,
                               std::span<const DepSentence> dev_tb, const LayeredWords& test,
                               std::span<const DepSentence> test_tb, const BilinearConfig& config) {
  const BilinearModel model = train_bilinear(train, train_tb, dev, dev_tb, config);
  const UasResult u = evaluate_bilinear(model, test, test_tb);
  ProbeReport r;
  r.task = "bilinear_dependency";
  r.seeds = {config.seed};
  r.metrics.emplace_back("uas", u.overall);
  for (std::size_t b = 0; b < kLengthBins; ++b) {
    if (u.counts[b] == 0) continue;
    r.metrics.emplace_back(std::string("uas_bin_") + kLengthBinNames[b], u.per_bin[b]);
  }
  if (!dev.empty()) r.metrics.emplace_back("dev_uas", evaluate_bilinear(model, dev, dev_tb).overall);
  if (model.mix) {
    const VecD w = model.mix->weights();
    for (Eigen::Index l = 0; l < w.size(); ++l) r.metrics.emplace_back("mix_weight_" + std::to_string(l), w(l));
    r.metrics.emplace_back("mix_gamma", model.mix->gamma);
  }
  r.validate();
  return r;
}

}  // namespace wolab
