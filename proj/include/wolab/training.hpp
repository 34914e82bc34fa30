#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "wolab/corpus.hpp"
#include "wolab/model.hpp"

namespace wolab {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-6;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 0;
  bool linear_decay = true;
  double clip_norm = 1.0;  // 0 disables clipping
  std::size_t batch_size = 32;
  std::size_t steps = 1000;
  double mask_probability = 0.15;
  double split_mask = 0.8;
  double split_random = 0.1;
  double split_keep = 0.1;
  std::uint64_t seed = 0;
  std::size_t eval_interval = 50;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Wraps each sequence in <s> ... </s>.
std::vector<std::vector<TokenId>> frame_sequences(std::span<const TokenSeq> corpus, bool bos_eos);

/// Selects non-special positions i.i.d. with the mask probability and
/// corrupts them 80/10/10 (mask / random non-special id / unchanged). When
/// nothing is selected one uniformly chosen non-special position is forced.
MaskedBatch make_mlm_batch(std::span<const std::vector<TokenId>> seqs, const TrainConfig& config,
                           std::size_t vocab_size, Rng& rng);

struct LossPoint {
  std::size_t step = 0;
  double loss = 0;
};

std::string loss_curve_csv(std::span<const LossPoint> curve);

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<LossPoint> loss_curve;  // mean training loss over each evaluation interval
};

using TrainProgress = std::function<void(const LossPoint&)>;

/// AdamW pretraining with length-bucketed batches. Deterministic for a fixed
/// seed. Throws NumericError naming the step on a non-finite loss.
TrainResult train_mlm(const ModelConfig& model_config, const TrainConfig& train_config, std::span<const TokenSeq> corpus,
                      const TrainProgress& progress = {});

/// Continues training from an existing checkpoint.
TrainResult train_mlm_from(const ModelCheckpoint& init, const TrainConfig& train_config,
                           std::span<const TokenSeq> corpus, const TrainProgress& progress = {});

/// Mean masked cross-entropy over a fixed-seed masking of `corpus`,
/// weighted by target count.
double heldout_mlm_loss(const ModelCheckpoint& checkpoint, std::span<const TokenSeq> corpus,
                        std::uint64_t mask_seed = 20220101, std::size_t batch_size = 64);

}  // namespace wolab
