#include "wolab/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wolab {

void TrainConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(mask_probability) || !prob(split_mask) || !prob(split_random) || !prob(split_keep)) {
    throw InvalidArgument("train config: probabilities must lie in [0, 1]");
  }
  if (std::abs(split_mask + split_random + split_keep - 1.0) > 1e-9) {
    throw InvalidArgument("train config: mask/random/keep split must sum to 1");
  }
  if (!(learning_rate > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(epsilon > 0)) {
    throw InvalidArgument("train config: invalid optimizer hyperparameters");
  }
  if (weight_decay < 0 || clip_norm < 0) throw InvalidArgument("train config: weight_decay and clip_norm must be >= 0");
  if (batch_size == 0 || eval_interval == 0) throw InvalidArgument("train config: batch_size and eval_interval must be positive");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["learning_rate"] = learning_rate;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["epsilon"] = epsilon;
  j["weight_decay"] = weight_decay;
  j["warmup_steps"] = warmup_steps;
  j["linear_decay"] = linear_decay;
  j["clip_norm"] = clip_norm;
  j["batch_size"] = batch_size;
  j["steps"] = steps;
  j["mask_probability"] = mask_probability;
  j["split_mask"] = split_mask;
  j["split_random"] = split_random;
  j["split_keep"] = split_keep;
  j["seed"] = seed;
  j["eval_interval"] = eval_interval;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.linear_decay = j.value("linear_decay", c.linear_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.mask_probability = j.value("mask_probability", c.mask_probability);
    c.split_mask = j.value("split_mask", c.split_mask);
    c.split_random = j.value("split_random", c.split_random);
    c.split_keep = j.value("split_keep", c.split_keep);
    c.seed = j.value("seed", c.seed);
    c.eval_interval = j.value("eval_interval", c.eval_interval);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<std::vector<TokenId>> frame_sequences(std::span<const TokenSeq> corpus, bool bos_eos) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    std::vector<TokenId> ids;
    ids.reserve(s.size() + 2);
    if (bos_eos) ids.push_back(special::kBos);
    ids.insert(ids.end(), s.ids.begin(), s.ids.end());
    if (bos_eos) ids.push_back(special::kEos);
    out.push_back(std::move(ids));
  }
  return out;
}

MaskedBatch make_mlm_batch(std::span<const std::vector<TokenId>> seqs, const TrainConfig& config,
                           std::size_t vocab_size, Rng& rng) {
  if (vocab_size <= static_cast<std::size_t>(special::kCount)) throw InvalidArgument("make_mlm_batch: vocabulary has no regular ids");
  MaskedBatch mb;
  mb.batch = Batch::from_sequences(seqs);
  mb.targets.assign(mb.batch.ids.size(), -1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<TokenId> random_id(special::kCount, static_cast<TokenId>(vocab_size) - 1);
  std::vector<std::size_t> eligible;

  auto corrupt = [&](std::size_t cell) {
    const TokenId original = mb.batch.ids[cell];
    mb.targets[cell] = original;
    const double u = unit(rng);
    if (u < config.split_mask) {
      mb.batch.ids[cell] = special::kMask;
    } else if (u < config.split_mask + config.split_random) {
      mb.batch.ids[cell] = random_id(rng);
    }
  };

  std::size_t selected = 0;
  for (std::size_t cell = 0; cell < mb.batch.ids.size(); ++cell) {
    if (!mb.batch.mask[cell]) continue;
    const TokenId id = mb.batch.ids[cell];
    if (id >= 0 && id < special::kCount) continue;
    eligible.push_back(cell);
    if (unit(rng) < config.mask_probability) {
      corrupt(cell);
      ++selected;
    }
  }
  if (selected == 0) {
    if (eligible.empty()) throw InvalidArgument("make_mlm_batch: batch has no maskable tokens");
    std::uniform_int_distribution<std::size_t> pick(0, eligible.size() - 1);
    corrupt(eligible[pick(rng)]);
  }
  return mb;
}

std::string loss_curve_csv(std::span<const LossPoint> curve) {
  std::string out = "step,loss\n";
  for (const auto& p : curve) out += std::to_string(p.step) + "," + format_double(p.loss) + "\n";
  return out;
}

namespace {

// Sorts pools of shuffled sentences by length so each batch holds similar
// lengths, then shuffles batch order.
std::vector<std::vector<std::size_t>> bucket_batches(const std::vector<std::vector<TokenId>>& seqs,
                                                     std::size_t batch_size, Rng& rng) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t pool = batch_size * 50;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += pool) {
    const auto e = std::min(order.size(), s + pool);
    std::stable_sort(order.begin() + static_cast<std::ptrdiff_t>(s), order.begin() + static_cast<std::ptrdiff_t>(e),
                     [&](std::size_t a, std::size_t b) { return seqs[a].size() < seqs[b].size(); });
    for (std::size_t b = s; b < e; b += batch_size) {
      batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(e, b + batch_size)));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::vector<Mat<float>*> tensor_list(Params<float>& p, std::vector<std::string>* names = nullptr) {
  std::vector<Mat<float>*> out;
  p.visit([&](const std::string& n, Mat<float>& m) {
    out.push_back(&m);
    if (names) names->push_back(n);
  });
  return out;
}

void check_lengths(const std::vector<std::vector<TokenId>>& seqs, const ModelConfig& mc) {
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    if (seqs[i].size() > mc.max_positions) {
      throw InvalidArgument("sentence " + std::to_string(i) + " has " + std::to_string(seqs[i].size()) +
                            " tokens, exceeding max_positions " + std::to_string(mc.max_positions));
    }
    for (TokenId id : seqs[i]) {
      if (id < 0 || static_cast<std::size_t>(id) >= mc.vocab_size) {
        throw InvalidArgument("sentence " + std::to_string(i) + " contains id " + std::to_string(id) +
                              " outside the model vocabulary");
      }
    }
  }
}

}  // namespace

TrainResult train_mlm(const ModelConfig& model_config, const TrainConfig& train_config, std::span<const TokenSeq> corpus,
                      const TrainProgress& progress) {
  return train_mlm_from(init_model(model_config), train_config, corpus, progress);
}

TrainResult train_mlm_from(const ModelCheckpoint& init, const TrainConfig& tc, std::span<const TokenSeq> corpus,
                           const TrainProgress& progress) {
  tc.validate();
  if (corpus.empty()) throw InvalidArgument("train_mlm: empty corpus");
  const ModelConfig& mc = init.config;
  const auto seqs = frame_sequences(corpus, mc.frame_bos_eos);
  check_lengths(seqs, mc);

  Transformer<float> model(init);
  Params<float> grads = model.params().zeros_like();
  Params<float> m1 = grads.zeros_like();
  Params<float> m2 = grads.zeros_like();
  std::vector<std::string> names;
  auto P = tensor_list(model.params(), &names);
  auto G = tensor_list(grads);
  auto M1 = tensor_list(m1);
  auto M2 = tensor_list(m2);
  std::vector<bool> trainable(names.size()), decayed(names.size());
  for (std::size_t k = 0; k < names.size(); ++k) {
    trainable[k] = is_trainable(names[k], mc);
    decayed[k] = names[k].ends_with(".weight");
  }

  Rng order_rng(mix_seed(tc.seed, 1));
  Rng mask_rng(mix_seed(tc.seed, 2));
  Rng dropout_rng(mix_seed(tc.seed, 3));
  std::vector<std::vector<std::size_t>> batches;
  std::size_t next_batch = 0;

  TrainResult result;
  double interval_sum = 0;
  std::size_t interval_count = 0;
  std::vector<std::vector<TokenId>> batch_seqs;

  for (std::size_t step = 1; step <= tc.steps; ++step) {
    if (next_batch >= batches.size()) {
      batches = bucket_batches(seqs, tc.batch_size, order_rng);
      next_batch = 0;
    }
    batch_seqs.clear();
    for (auto i : batches[next_batch]) batch_seqs.push_back(seqs[i]);
    ++next_batch;

    const MaskedBatch mb = make_mlm_batch(batch_seqs, tc, mc.vocab_size, mask_rng);
    const float loss = model.loss_and_gradients(mb, grads, mc.dropout > 0 ? &dropout_rng : nullptr);
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(step));

    double scale = 1.0;
    if (tc.clip_norm > 0) {
      double sq = 0;
      for (std::size_t k = 0; k < G.size(); ++k) {
        if (trainable[k]) sq += static_cast<double>(G[k]->squaredNorm());
      }
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) throw NumericError("non-finite gradient at step " + std::to_string(step));
      if (norm > tc.clip_norm) scale = tc.clip_norm / norm;
    }

    double lr = tc.learning_rate;
    if (tc.warmup_steps > 0 && step <= tc.warmup_steps) {
      lr *= static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
    } else if (tc.linear_decay && tc.steps > tc.warmup_steps) {
      lr *= static_cast<double>(tc.steps - step + 1) / static_cast<double>(tc.steps - tc.warmup_steps);
    }
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
    const auto b1 = static_cast<float>(tc.beta1), b2 = static_cast<float>(tc.beta2);
    const auto step_size = static_cast<float>(lr / bc1);
    const auto inv_bc2 = static_cast<float>(1.0 / bc2);
    const auto eps = static_cast<float>(tc.epsilon);
    const auto gscale = static_cast<float>(scale);
    const auto decay = static_cast<float>(1.0 - lr * tc.weight_decay);
    for (std::size_t k = 0; k < P.size(); ++k) {
      if (!trainable[k]) continue;
      auto g = G[k]->array() * gscale;
      M1[k]->array() = b1 * M1[k]->array() + (1.0f - b1) * g;
      M2[k]->array() = b2 * M2[k]->array() + (1.0f - b2) * g.square();
      if (decayed[k]) P[k]->array() *= decay;
      P[k]->array() -= step_size * M1[k]->array() / ((M2[k]->array() * inv_bc2).sqrt() + eps);
    }

    interval_sum += loss;
    ++interval_count;
    if (step % tc.eval_interval == 0 || step == tc.steps) {
      LossPoint pt{step, interval_sum / static_cast<double>(interval_count)};
      result.loss_curve.push_back(pt);
      if (progress) progress(pt);
      interval_sum = 0;
      interval_count = 0;
    }
  }
  result.checkpoint = model.to_checkpoint();
  return result;
}

double heldout_mlm_loss(const ModelCheckpoint& checkpoint, std::span<const TokenSeq> corpus, std::uint64_t mask_seed,
                        std::size_t batch_size) {
  if (corpus.empty()) throw InvalidArgument("heldout_mlm_loss: empty corpus");
  if (batch_size == 0) throw InvalidArgument("heldout_mlm_loss: batch_size must be positive");
  const auto seqs = frame_sequences(corpus, checkpoint.config.frame_bos_eos);
  check_lengths(seqs, checkpoint.config);
  Transformer<float> model(checkpoint);
  TrainConfig tc;
  double total = 0;
  std::size_t targets = 0;
  for (std::size_t s = 0, b = 0; s < seqs.size(); s += batch_size, ++b) {
    const auto e = std::min(seqs.size(), s + batch_size);
    Rng rng(mix_seed(mask_seed, b));
    const MaskedBatch mb =
        make_mlm_batch(std::span<const std::vector<TokenId>>(seqs.data() + s, e - s), tc, checkpoint.config.vocab_size, rng);
    const std::size_t n = mb.target_count();
    total += static_cast<double>(model.loss(mb)) * static_cast<double>(n);
    targets += n;
  }
  return total / static_cast<double>(targets);
}

}  // namespace wolab
