#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "wolab/common.hpp"
#include "wolab/tokenizer.hpp"

namespace wolab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class PositionMode { Learned, Sinusoidal, None };
std::string to_string(PositionMode m);
PositionMode parse_position_mode(const std::string& s);

struct ModelConfig {
  std::size_t layers = 6;
  std::size_t heads = 1;
  std::size_t d_model = 64;
  std::size_t d_ff = 256;
  std::size_t max_positions = 128;
  std::size_t vocab_size = 5000;
  PositionMode position_mode = PositionMode::Learned;
  double dropout = 0.0;
  std::uint64_t seed = 0;
  /// Sequences are wrapped in <s> ... </s> before the forward pass.
  bool frame_bos_eos = true;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Row-major float32 tensor as stored in checkpoints.
struct Tensor {
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  std::size_t numel() const;
  bool operator==(const Tensor&) const = default;
};

struct ModelCheckpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor& at(const std::string& name) const;

  /// Magic "WOLAB1\n", a one-line JSON config, a little-endian u32 tensor
  /// count, then per tensor: u32 name length, name bytes, u32 rank, u32 dims,
  /// float32 data (all little-endian).
  std::string serialize() const;
  static ModelCheckpoint deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static ModelCheckpoint load(const std::filesystem::path& path);
  std::string checksum() const;
};

/// Padded id matrix plus padding mask (1 = real token).
struct Batch {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::uint8_t> mask;

  TokenId id(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  bool valid(std::size_t r, std::size_t c) const { return mask[r * cols + c] != 0; }

  static Batch from_sequences(std::span<const std::vector<TokenId>> seqs);
};

/// Corrupted inputs plus a target id per cell (-1 where nothing is predicted).
struct MaskedBatch {
  Batch batch;
  std::vector<TokenId> targets;

  std::size_t target_count() const;
};

template <class T>
struct LayerParams {
  Mat<T> ln1_gain, ln1_bias;
  Mat<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Mat<T> ln2_gain, ln2_bias;
  Mat<T> w1, b1, w2, b2;

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", ln1_gain);
    f(prefix + "ln1.bias", ln1_bias);
    f(prefix + "attn.q.weight", wq);
    f(prefix + "attn.q.bias", bq);
    f(prefix + "attn.k.weight", wk);
    f(prefix + "attn.k.bias", bk);
    f(prefix + "attn.v.weight", wv);
    f(prefix + "attn.v.bias", bv);
    f(prefix + "attn.out.weight", wo);
    f(prefix + "attn.out.bias", bo);
    f(prefix + "ln2.gain", ln2_gain);
    f(prefix + "ln2.bias", ln2_bias);
    f(prefix + "ffn.in.weight", w1);
    f(prefix + "ffn.in.bias", b1);
    f(prefix + "ffn.out.weight", w2);
    f(prefix + "ffn.out.bias", b2);
  }
};

/// All parameters of the encoder. Vectors are stored as 1 x n matrices;
/// absent tables (position / noise) are 0 x 0.
template <class T>
struct Params {
  Mat<T> tok_emb;
  Mat<T> pos_emb;
  Mat<T> noise;
  std::vector<LayerParams<T>> layers;
  Mat<T> lnf_gain, lnf_bias;
  Mat<T> head_w, head_b;

  /// Visits every allocated tensor in canonical order: f(name, Mat<T>&).
  template <class F>
  void visit(F&& f) {
    f("tok_emb", tok_emb);
    if (pos_emb.size()) f("pos_emb", pos_emb);
    if (noise.size()) f("noise_table", noise);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit("layers." + std::to_string(l) + ".", f);
    f("lnf.gain", lnf_gain);
    f("lnf.bias", lnf_bias);
    f("head.weight", head_w);
    f("head.bias", head_b);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<Params*>(this)->visit([&](const std::string& n, Mat<T>& m) { f(n, static_cast<const Mat<T>&>(m)); });
  }

  Params zeros_like() const;
  void set_zero();
};

/// Whether training updates this tensor (sinusoidal and noise tables are fixed).
bool is_trainable(const std::string& name, const ModelConfig& config);

template <class T>
struct ForwardOptions {
  bool logits = false;
  bool attentions = true;
};

/// Hidden states hold one row per real (unpadded) token in row-major batch
/// order; `coords[k]` is the (row, col) of compact row k.
template <class T>
struct ForwardTrace {
  std::vector<Mat<T>> hidden_states;  // layers + 1 entries, embeddings first
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  /// attentions[layer][head][batch_row] is cols x cols; padded rows/columns are 0.
  std::vector<std::vector<std::vector<Mat<T>>>> attentions;
  Mat<T> logits;  // compact rows x vocab, when requested
};

/// Pre-layer-norm transformer encoder with an MLM head and hand-written
/// backward pass. Instantiated for float (training) and double (checks).
template <class T>
class Transformer {
 public:
  explicit Transformer(const ModelCheckpoint& ckpt);
  Transformer(ModelConfig config, Params<T> params);

  const ModelConfig& config() const { return config_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }
  ModelCheckpoint to_checkpoint() const;

  ForwardTrace<T> forward(const Batch& batch, const ForwardOptions<T>& opts = {}) const;

  /// Mean masked cross-entropy. Dropout is applied only when `dropout_rng`
  /// is given and config().dropout > 0.
  T loss(const MaskedBatch& batch, Rng* dropout_rng = nullptr) const;
  /// As loss(); also writes d loss / d param into `grads` (overwritten).
  T loss_and_gradients(const MaskedBatch& batch, Params<T>& grads, Rng* dropout_rng = nullptr) const;

 private:
  struct State;
  State run(const Batch& batch, Rng* dropout_rng) const;

  ModelConfig config_;
  Params<T> params_;
};

extern template class Transformer<float>;
extern template class Transformer<double>;

ModelCheckpoint init_model(const ModelConfig& config);

/// Closed-form sin/cos table: row p, column 2i = sin(p / 10000^(2i/d)),
/// column 2i+1 = cos(same).
Mat<float> sinusoidal_table(std::size_t positions, std::size_t dim);

ForwardTrace<float> forward(const ModelCheckpoint& ckpt, const Batch& batch, const ForwardOptions<float>& opts = {});

struct LossAndGradients {
  double loss = 0;
  std::map<std::string, Tensor> gradients;
};
LossAndGradients loss_and_gradients(const ModelCheckpoint& ckpt, const MaskedBatch& batch);

enum class PositionReplacement { LearnedRandom, Sinusoidal, None };
PositionReplacement parse_position_replacement(const std::string& s);

/// Swaps or removes only the position table; every other tensor is copied
/// unchanged. LearnedRandom draws a fresh truncated-normal table.
ModelCheckpoint replace_position_embeddings(const ModelCheckpoint& ckpt, PositionReplacement mode,
                                            std::uint64_t seed = 0);

/// Adds a fixed P x d table of i.i.d. N(0, sigma^2) noise that is summed into
/// the embedding layer like a position table. sigma = 0 returns the input.
ModelCheckpoint add_gaussian_noise(const ModelCheckpoint& ckpt, double sigma, std::uint64_t seed);

template <class T>
Params<T> params_from_checkpoint(const ModelCheckpoint& ckpt);
template <class T>
ModelCheckpoint checkpoint_from_params(const ModelConfig& config, const Params<T>& params);

}  // namespace wolab
