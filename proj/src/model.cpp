#include "wolab/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

namespace wolab {

// ---------------------------------------------------------------------------
// Config

std::string to_string(PositionMode m) {
  switch (m) {
    case PositionMode::Learned: return "learned";
    case PositionMode::Sinusoidal: return "sinusoidal";
    case PositionMode::None: return "none";
  }
  return "unknown";
}

PositionMode parse_position_mode(const std::string& s) {
  if (s == "learned") return PositionMode::Learned;
  if (s == "sinusoidal") return PositionMode::Sinusoidal;
  if (s == "none") return PositionMode::None;
  throw InvalidArgument("unknown position mode '" + s + "' (expected learned, sinusoidal or none)");
}

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || d_model == 0 || d_ff == 0 || max_positions == 0) {
    throw InvalidArgument("model config: layers, heads, d_model, d_ff and max_positions must be positive");
  }
  if (d_model % heads != 0) {
    throw InvalidArgument("model config: d_model " + std::to_string(d_model) + " is not divisible by heads " +
                          std::to_string(heads));
  }
  if (vocab_size <= special::kCount) throw InvalidArgument("model config: vocab_size must exceed the reserved ids");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("model config: dropout must be in [0, 1)");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["layers"] = layers;
  j["heads"] = heads;
  j["d_model"] = d_model;
  j["d_ff"] = d_ff;
  j["max_positions"] = max_positions;
  j["vocab_size"] = vocab_size;
  j["position_mode"] = to_string(position_mode);
  j["dropout"] = dropout;
  j["seed"] = seed;
  j["frame_bos_eos"] = frame_bos_eos;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.heads = j.value("heads", c.heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.position_mode = parse_position_mode(j.value("position_mode", std::string("learned")));
    c.dropout = j.value("dropout", c.dropout);
    c.seed = j.value("seed", c.seed);
    c.frame_bos_eos = j.value("frame_bos_eos", c.frame_bos_eos);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Tensors and checkpoints

std::size_t Tensor::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const Tensor& ModelCheckpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw InvalidArgument("checkpoint has no tensor '" + name + "'");
  return it->second;
}

namespace {

constexpr std::string_view kMagic = "WOLAB1\n";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size()) throw FormatError("checkpoint truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 4;
  return v;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool is_vector_param(const std::string& name) {
  auto ends = [&](std::string_view suf) {
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  return ends(".gain") || ends(".bias");
}

}  // namespace

std::string ModelCheckpoint::serialize() const {
  std::string out(kMagic);
  out += config.to_json().dump();
  out += '\n';
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(out, d);
    for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

ModelCheckpoint ModelCheckpoint::deserialize(const std::string& bytes) {
  if (bytes.compare(0, kMagic.size(), kMagic) != 0) throw FormatError("not a checkpoint: unknown magic bytes");
  std::size_t pos = kMagic.size();
  const auto nl = bytes.find('\n', pos);
  if (nl == std::string::npos) throw FormatError("checkpoint truncated in config block");
  ModelCheckpoint ck;
  try {
    ck.config = ModelConfig::from_json(nlohmann::json::parse(bytes.substr(pos, nl - pos)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config block: ") + e.what());
  }
  pos = nl + 1;
  const std::uint32_t count = get_u32(bytes, pos);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(bytes, pos);
    if (pos + name_len > bytes.size()) throw FormatError("checkpoint truncated in tensor name");
    std::string name = bytes.substr(pos, name_len);
    pos += name_len;
    Tensor t;
    const std::uint32_t rank = get_u32(bytes, pos);
    if (rank > 4) throw FormatError("tensor '" + name + "' has implausible rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(get_u32(bytes, pos));
    const std::size_t n = t.numel();
    if (pos + 4 * n > bytes.size()) throw FormatError("checkpoint truncated in tensor '" + name + "'");
    t.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.data[k] = std::bit_cast<float>(get_u32(bytes, pos));
    ck.tensors.emplace(std::move(name), std::move(t));
  }
  if (pos != bytes.size()) throw FormatError("trailing bytes after last tensor");
  return ck;
}

void ModelCheckpoint::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

ModelCheckpoint ModelCheckpoint::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::string ModelCheckpoint::checksum() const { return sha256_hex(serialize()); }

Batch Batch::from_sequences(std::span<const std::vector<TokenId>> seqs) {
  Batch b;
  b.rows = seqs.size();
  for (const auto& s : seqs) b.cols = std::max(b.cols, s.size());
  b.ids.assign(b.rows * b.cols, special::kPad);
  b.mask.assign(b.rows * b.cols, 0);
  for (std::size_t r = 0; r < b.rows; ++r) {
    for (std::size_t c = 0; c < seqs[r].size(); ++c) {
      b.ids[r * b.cols + c] = seqs[r][c];
      b.mask[r * b.cols + c] = 1;
    }
  }
  return b;
}

std::size_t MaskedBatch::target_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) n += (targets[i] >= 0 && batch.mask[i]) ? 1 : 0;
  return n;
}

template <class T>
Params<T> Params<T>::zeros_like() const {
  Params<T> z = *this;
  z.set_zero();
  return z;
}

template <class T>
void Params<T>::set_zero() {
  visit([](const std::string&, Mat<T>& m) { m.setZero(); });
}

bool is_trainable(const std::string& name, const ModelConfig& config) {
  if (name == "noise_table") return false;
  if (name == "pos_emb") return config.position_mode == PositionMode::Learned;
  return true;
}

// ---------------------------------------------------------------------------
// Parameter layout

namespace {

template <class T>
Params<T> allocate(const ModelConfig& c, bool with_pos, bool with_noise) {
  const auto d = static_cast<Eigen::Index>(c.d_model);
  const auto ff = static_cast<Eigen::Index>(c.d_ff);
  const auto V = static_cast<Eigen::Index>(c.vocab_size);
  const auto P = static_cast<Eigen::Index>(c.max_positions);
  Params<T> p;
  p.tok_emb = Mat<T>::Zero(V, d);
  if (with_pos) p.pos_emb = Mat<T>::Zero(P, d);
  if (with_noise) p.noise = Mat<T>::Zero(P, d);
  p.layers.resize(c.layers);
  for (auto& l : p.layers) {
    l.ln1_gain = Mat<T>::Ones(1, d);
    l.ln1_bias = Mat<T>::Zero(1, d);
    l.wq = Mat<T>::Zero(d, d);
    l.bq = Mat<T>::Zero(1, d);
    l.wk = Mat<T>::Zero(d, d);
    l.bk = Mat<T>::Zero(1, d);
    l.wv = Mat<T>::Zero(d, d);
    l.bv = Mat<T>::Zero(1, d);
    l.wo = Mat<T>::Zero(d, d);
    l.bo = Mat<T>::Zero(1, d);
    l.ln2_gain = Mat<T>::Ones(1, d);
    l.ln2_bias = Mat<T>::Zero(1, d);
    l.w1 = Mat<T>::Zero(d, ff);
    l.b1 = Mat<T>::Zero(1, ff);
    l.w2 = Mat<T>::Zero(ff, d);
    l.b2 = Mat<T>::Zero(1, d);
  }
  p.lnf_gain = Mat<T>::Ones(1, d);
  p.lnf_bias = Mat<T>::Zero(1, d);
  p.head_w = Mat<T>::Zero(d, V);
  p.head_b = Mat<T>::Zero(1, V);
  return p;
}

void fill_truncated_normal(Mat<float>& m, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, sigma);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double x;
    do {
      x = nd(rng);
    } while (std::abs(x) > 2.0 * sigma);
    m.data()[i] = static_cast<float>(x);
  }
}

}  // namespace

Mat<float> sinusoidal_table(std::size_t positions, std::size_t dim) {
  Mat<float> t(static_cast<Eigen::Index>(positions), static_cast<Eigen::Index>(dim));
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(p) * freq;
      t(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = static_cast<float>(std::sin(angle));
      if (i + 1 < dim) t(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i + 1)) = static_cast<float>(std::cos(angle));
    }
  }
  return t;
}

template <class T>
Params<T> params_from_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.config.validate();
  const bool with_pos = ckpt.has("pos_emb");
  if (with_pos != (ckpt.config.position_mode != PositionMode::None)) {
    throw FormatError("checkpoint position table does not match position_mode " + to_string(ckpt.config.position_mode));
  }
  Params<T> p = allocate<T>(ckpt.config, with_pos, ckpt.has("noise_table"));
  std::size_t seen = 0;
  p.visit([&](const std::string& name, Mat<T>& m) {
    const Tensor& t = ckpt.at(name);
    const bool vec = is_vector_param(name);
    const std::vector<std::uint32_t> expect =
        vec ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(m.cols())}
            : std::vector<std::uint32_t>{static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    if (t.shape != expect) throw FormatError("tensor '" + name + "' has a shape inconsistent with the config");
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      if (!std::isfinite(t.data[k])) throw FormatError("tensor '" + name + "' contains a non-finite value");
      m.data()[k] = static_cast<T>(t.data[k]);
    }
    ++seen;
  });
  if (seen != ckpt.tensors.size()) throw FormatError("checkpoint contains unexpected tensors");
  return p;
}

template <class T>
ModelCheckpoint checkpoint_from_params(const ModelConfig& config, const Params<T>& params) {
  ModelCheckpoint ck;
  ck.config = config;
  params.visit([&](const std::string& name, const Mat<T>& m) {
    Tensor t;
    if (is_vector_param(name)) {
      t.shape = {static_cast<std::uint32_t>(m.cols())};
    } else {
      t.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
    }
    t.data.resize(static_cast<std::size_t>(m.size()));
    for (Eigen::Index k = 0; k < m.size(); ++k) t.data[static_cast<std::size_t>(k)] = static_cast<float>(m.data()[k]);
    ck.tensors.emplace(name, std::move(t));
  });
  return ck;
}

ModelCheckpoint init_model(const ModelConfig& config) {
  config.validate();
  Params<float> p = allocate<float>(config, config.position_mode != PositionMode::None, false);
  constexpr double kSigma = 0.02;
  p.visit([&](const std::string& name, Mat<float>& m) {
    if (is_vector_param(name)) return;  // gains stay 1, biases 0
    if (name == "pos_emb" && config.position_mode == PositionMode::Sinusoidal) {
      m = sinusoidal_table(config.max_positions, config.d_model);
      return;
    }
    fill_truncated_normal(m, kSigma, mix_seed(config.seed, fnv1a(name)));
  });
  return checkpoint_from_params(config, p);
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

constexpr double kLnEps = 1e-5;

template <class T>
void layer_norm_forward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& xhat, std::vector<T>& rstd,
                        Mat<T>& y) {
  const Eigen::Index n = x.rows(), d = x.cols();
  xhat.resize(n, d);
  y.resize(n, d);
  rstd.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T r = T(1) / std::sqrt(var + T(kLnEps));
    rstd[static_cast<std::size_t>(i)] = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
  }
}

// dx for y = LN(x); accumulates dgain/dbias.
template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const std::vector<T>& rstd, const Mat<T>& gain,
                           Mat<T>& dgain, Mat<T>& dbias) {
  const Eigen::Index n = dy.rows(), d = dy.cols();
  Mat<T> dx(n, d);
  dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto dxhat = (dy.row(i).array() * gain.row(0).array()).eval();
    const T m1 = dxhat.mean();
    const T m2 = (dxhat * xhat.row(i).array()).mean();
    dx.row(i) = (rstd[static_cast<std::size_t>(i)] * (dxhat - m1 - xhat.row(i).array() * m2)).matrix();
  }
  return dx;
}

template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<T> m(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = T(1.0 / (1.0 - p));
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = keep(rng) ? scale : T(0);
  return m;
}

}  // namespace

template <class T>
struct Transformer<T>::State {
  std::size_t rows = 0, cols = 0;
  std::vector<TokenId> ids;
  std::vector<std::size_t> pos;
  std::vector<std::size_t> seq_off;  // compact rows of batch row b: [seq_off[b], seq_off[b+1])
  std::vector<std::pair<std::size_t, std::size_t>> coords;

  struct Layer {
    Mat<T> xhat1, a, q, k, v, ctx, o_mask;
    std::vector<T> rstd1, rstd2;
    std::vector<Mat<T>> probs;  // [b * heads + h]
    Mat<T> xhat2, bn, h, g, f_mask;
  };
  Mat<T> emb_mask;
  std::vector<Mat<T>> hidden;  // layers + 1
  std::vector<Layer> layers;
};

template <class T>
Transformer<T>::Transformer(const ModelCheckpoint& ckpt)
    : config_(ckpt.config), params_(params_from_checkpoint<T>(ckpt)) {}

template <class T>
Transformer<T>::Transformer(ModelConfig config, Params<T> params) : config_(config), params_(std::move(params)) {
  config_.validate();
}

template <class T>
ModelCheckpoint Transformer<T>::to_checkpoint() const {
  return checkpoint_from_params(config_, params_);
}

template <class T>
typename Transformer<T>::State Transformer<T>::run(const Batch& batch, Rng* dropout_rng) const {
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const std::size_t H = config_.heads;
  const auto dh = static_cast<Eigen::Index>(config_.d_model / H);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const bool drop = dropout_rng != nullptr && config_.dropout > 0.0;

  State s;
  s.rows = batch.rows;
  s.cols = batch.cols;
  s.seq_off.push_back(0);
  for (std::size_t r = 0; r < batch.rows; ++r) {
    for (std::size_t c = 0; c < batch.cols; ++c) {
      if (!batch.valid(r, c)) continue;
      const TokenId id = batch.id(r, c);
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw InvalidArgument("forward: token id " + std::to_string(id) + " outside vocabulary");
      }
      if (c >= config_.max_positions) {
        throw InvalidArgument("forward: sequence length exceeds max_positions " + std::to_string(config_.max_positions));
      }
      s.ids.push_back(id);
      s.pos.push_back(c);
      s.coords.emplace_back(r, c);
    }
    s.seq_off.push_back(s.ids.size());
  }
  const auto N = static_cast<Eigen::Index>(s.ids.size());

  Mat<T> x(N, d);
  for (Eigen::Index i = 0; i < N; ++i) {
    x.row(i) = params_.tok_emb.row(s.ids[static_cast<std::size_t>(i)]);
    const auto p = static_cast<Eigen::Index>(s.pos[static_cast<std::size_t>(i)]);
    if (params_.pos_emb.size()) x.row(i) += params_.pos_emb.row(p);
    if (params_.noise.size()) x.row(i) += params_.noise.row(p);
  }
  if (drop) {
    s.emb_mask = dropout_mask<T>(N, d, config_.dropout, *dropout_rng);
    x.array() *= s.emb_mask.array();
  }
  s.hidden.push_back(x);
  s.layers.resize(config_.layers);

  for (std::size_t l = 0; l < config_.layers; ++l) {
    const auto& P = params_.layers[l];
    auto& c = s.layers[l];
    const Mat<T>& xin = s.hidden.back();
    Mat<T> ln_out;
    layer_norm_forward(xin, P.ln1_gain, P.ln1_bias, c.xhat1, c.rstd1, ln_out);
    c.a = std::move(ln_out);
    c.q.noalias() = c.a * P.wq;
    c.q.rowwise() += P.bq.row(0);
    c.k.noalias() = c.a * P.wk;
    c.k.rowwise() += P.bk.row(0);
    c.v.noalias() = c.a * P.wv;
    c.v.rowwise() += P.bv.row(0);
    c.ctx.setZero(N, d);
    c.probs.resize(s.rows * H);
    for (std::size_t b = 0; b < s.rows; ++b) {
      const auto off = static_cast<Eigen::Index>(s.seq_off[b]);
      const auto L = static_cast<Eigen::Index>(s.seq_off[b + 1] - s.seq_off[b]);
      if (L == 0) continue;
      for (std::size_t h = 0; h < H; ++h) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        Mat<T> sc = (c.q.block(off, col, L, dh) * c.k.block(off, col, L, dh).transpose()) * scale;
        for (Eigen::Index i = 0; i < L; ++i) {
          const T mx = sc.row(i).maxCoeff();
          sc.row(i) = (sc.row(i).array() - mx).exp();
          sc.row(i) /= sc.row(i).sum();
        }
        c.ctx.block(off, col, L, dh).noalias() = sc * c.v.block(off, col, L, dh);
        c.probs[b * H + h] = std::move(sc);
      }
    }
    Mat<T> o = c.ctx * P.wo;
    o.rowwise() += P.bo.row(0);
    if (drop) {
      c.o_mask = dropout_mask<T>(N, d, config_.dropout, *dropout_rng);
      o.array() *= c.o_mask.array();
    }
    Mat<T> x1 = xin + o;
    layer_norm_forward(x1, P.ln2_gain, P.ln2_bias, c.xhat2, c.rstd2, c.bn);
    c.h.noalias() = c.bn * P.w1;
    c.h.rowwise() += P.b1.row(0);
    c.g = c.h.unaryExpr([](T v) { return gelu(v); });
    Mat<T> f = c.g * P.w2;
    f.rowwise() += P.b2.row(0);
    if (drop) {
      c.f_mask = dropout_mask<T>(N, d, config_.dropout, *dropout_rng);
      f.array() *= c.f_mask.array();
    }
    s.hidden.push_back(x1 + f);
  }
  return s;
}

template <class T>
ForwardTrace<T> Transformer<T>::forward(const Batch& batch, const ForwardOptions<T>& opts) const {
  State s = run(batch, nullptr);
  ForwardTrace<T> tr;
  tr.coords = s.coords;
  const std::size_t H = config_.heads;
  if (opts.attentions) {
    tr.attentions.resize(config_.layers);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      tr.attentions[l].resize(H);
      for (std::size_t h = 0; h < H; ++h) {
        auto& per_row = tr.attentions[l][h];
        per_row.resize(s.rows);
        for (std::size_t b = 0; b < s.rows; ++b) {
          Mat<T> full = Mat<T>::Zero(static_cast<Eigen::Index>(s.cols), static_cast<Eigen::Index>(s.cols));
          const auto& pr = s.layers[l].probs[b * H + h];
          const std::size_t off = s.seq_off[b];
          for (Eigen::Index i = 0; i < pr.rows(); ++i) {
            for (Eigen::Index j = 0; j < pr.cols(); ++j) {
              full(static_cast<Eigen::Index>(s.pos[off + static_cast<std::size_t>(i)]),
                   static_cast<Eigen::Index>(s.pos[off + static_cast<std::size_t>(j)])) = pr(i, j);
            }
          }
          per_row[b] = std::move(full);
        }
      }
    }
  }
  if (opts.logits) {
    Mat<T> xhat, z;
    std::vector<T> rstd;
    layer_norm_forward(s.hidden.back(), params_.lnf_gain, params_.lnf_bias, xhat, rstd, z);
    tr.logits = z * params_.head_w;
    tr.logits.rowwise() += params_.head_b.row(0);
  }
  tr.hidden_states = std::move(s.hidden);
  return tr;
}

namespace {

template <class T>
std::vector<std::pair<std::size_t, TokenId>> gather_targets(const MaskedBatch& mb,
                                                            const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                                                            std::size_t vocab) {
  if (mb.targets.size() != mb.batch.ids.size()) throw InvalidArgument("masked batch: targets shape differs from ids");
  std::vector<std::pair<std::size_t, TokenId>> out;
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const TokenId t = mb.targets[coords[k].first * mb.batch.cols + coords[k].second];
    if (t < 0) continue;
    if (static_cast<std::size_t>(t) >= vocab) throw InvalidArgument("masked batch: target id outside vocabulary");
    out.emplace_back(k, t);
  }
  if (out.empty()) throw InvalidArgument("masked batch has no prediction targets");
  return out;
}

}  // namespace

template <class T>
T Transformer<T>::loss(const MaskedBatch& mb, Rng* dropout_rng) const {
  State s = run(mb.batch, dropout_rng);
  const auto targets = gather_targets<T>(mb, s.coords, config_.vocab_size);
  const auto M = static_cast<Eigen::Index>(targets.size());
  Mat<T> xf(M, static_cast<Eigen::Index>(config_.d_model));
  for (Eigen::Index m = 0; m < M; ++m) xf.row(m) = s.hidden.back().row(static_cast<Eigen::Index>(targets[static_cast<std::size_t>(m)].first));
  Mat<T> xhat, z;
  std::vector<T> rstd;
  layer_norm_forward(xf, params_.lnf_gain, params_.lnf_bias, xhat, rstd, z);
  Mat<T> logits = z * params_.head_w;
  logits.rowwise() += params_.head_b.row(0);
  T total = 0;
  for (Eigen::Index m = 0; m < M; ++m) {
    const T mx = logits.row(m).maxCoeff();
    const T lse = mx + std::log((logits.row(m).array() - mx).exp().sum());
    total += lse - logits(m, targets[static_cast<std::size_t>(m)].second);
  }
  return total / static_cast<T>(M);
}

template <class T>
T Transformer<T>::loss_and_gradients(const MaskedBatch& mb, Params<T>& grads, Rng* dropout_rng) const {
  const auto d = static_cast<Eigen::Index>(config_.d_model);
  const std::size_t H = config_.heads;
  const auto dh = static_cast<Eigen::Index>(config_.d_model / H);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  if (grads.tok_emb.rows() != params_.tok_emb.rows() || grads.layers.size() != params_.layers.size() ||
      grads.pos_emb.size() != params_.pos_emb.size() || grads.noise.size() != params_.noise.size()) {
    grads = params_.zeros_like();
  } else {
    grads.set_zero();
  }

  State s = run(mb.batch, dropout_rng);
  const auto targets = gather_targets<T>(mb, s.coords, config_.vocab_size);
  const auto M = static_cast<Eigen::Index>(targets.size());
  const auto N = static_cast<Eigen::Index>(s.ids.size());

  // MLM head on target rows only.
  Mat<T> xf(M, d);
  for (Eigen::Index m = 0; m < M; ++m) xf.row(m) = s.hidden.back().row(static_cast<Eigen::Index>(targets[static_cast<std::size_t>(m)].first));
  Mat<T> xhat_f, z;
  std::vector<T> rstd_f;
  layer_norm_forward(xf, params_.lnf_gain, params_.lnf_bias, xhat_f, rstd_f, z);
  Mat<T> logits = z * params_.head_w;
  logits.rowwise() += params_.head_b.row(0);
  T total = 0;
  for (Eigen::Index m = 0; m < M; ++m) {
    const T mx = logits.row(m).maxCoeff();
    logits.row(m) = (logits.row(m).array() - mx).exp();
    const T sum = logits.row(m).sum();
    const TokenId tgt = targets[static_cast<std::size_t>(m)].second;
    total += std::log(sum) - std::log(logits(m, tgt));
    logits.row(m) /= sum;
    logits(m, tgt) -= T(1);
  }
  const T loss = total / static_cast<T>(M);
  if (!std::isfinite(static_cast<double>(loss))) return loss;
  Mat<T>& dlogits = logits;
  dlogits /= static_cast<T>(M);
  grads.head_w.noalias() += z.transpose() * dlogits;
  grads.head_b.row(0) += dlogits.colwise().sum();
  Mat<T> dz = dlogits * params_.head_w.transpose();
  Mat<T> dxf = layer_norm_backward(dz, xhat_f, rstd_f, params_.lnf_gain, grads.lnf_gain, grads.lnf_bias);

  Mat<T> dx = Mat<T>::Zero(N, d);
  for (Eigen::Index m = 0; m < M; ++m) dx.row(static_cast<Eigen::Index>(targets[static_cast<std::size_t>(m)].first)) += dxf.row(m);

  for (std::size_t li = config_.layers; li-- > 0;) {
    const auto& P = params_.layers[li];
    auto& G = grads.layers[li];
    auto& c = s.layers[li];

    // feed-forward branch
    Mat<T> df = dx;
    if (c.f_mask.size()) df.array() *= c.f_mask.array();
    G.w2.noalias() += c.g.transpose() * df;
    G.b2.row(0) += df.colwise().sum();
    Mat<T> dh_ = df * P.w2.transpose();
    dh_.array() *= c.h.unaryExpr([](T v) { return gelu_grad(v); }).array();
    G.w1.noalias() += c.bn.transpose() * dh_;
    G.b1.row(0) += dh_.colwise().sum();
    Mat<T> dbn = dh_ * P.w1.transpose();
    Mat<T> dx1 = dx + layer_norm_backward(dbn, c.xhat2, c.rstd2, P.ln2_gain, G.ln2_gain, G.ln2_bias);

    // attention branch
    Mat<T> dout = dx1;
    if (c.o_mask.size()) dout.array() *= c.o_mask.array();
    G.wo.noalias() += c.ctx.transpose() * dout;
    G.bo.row(0) += dout.colwise().sum();
    Mat<T> dctx = dout * P.wo.transpose();
    Mat<T> dq = Mat<T>::Zero(N, d), dk = Mat<T>::Zero(N, d), dv = Mat<T>::Zero(N, d);
    for (std::size_t b = 0; b < s.rows; ++b) {
      const auto off = static_cast<Eigen::Index>(s.seq_off[b]);
      const auto L = static_cast<Eigen::Index>(s.seq_off[b + 1] - s.seq_off[b]);
      if (L == 0) continue;
      for (std::size_t h = 0; h < H; ++h) {
        const auto col = static_cast<Eigen::Index>(h) * dh;
        const Mat<T>& pr = c.probs[b * H + h];
        const auto dc = dctx.block(off, col, L, dh);
        Mat<T> dp = dc * c.v.block(off, col, L, dh).transpose();
        dv.block(off, col, L, dh).noalias() += pr.transpose() * dc;
        for (Eigen::Index i = 0; i < L; ++i) {
          const T dot = dp.row(i).dot(pr.row(i));
          dp.row(i) = (pr.row(i).array() * (dp.row(i).array() - dot)).matrix();
        }
        dp *= scale;
        dq.block(off, col, L, dh).noalias() += dp * c.k.block(off, col, L, dh);
        dk.block(off, col, L, dh).noalias() += dp.transpose() * c.q.block(off, col, L, dh);
      }
    }
    G.wq.noalias() += c.a.transpose() * dq;
    G.bq.row(0) += dq.colwise().sum();
    G.wk.noalias() += c.a.transpose() * dk;
    G.bk.row(0) += dk.colwise().sum();
    G.wv.noalias() += c.a.transpose() * dv;
    G.bv.row(0) += dv.colwise().sum();
    Mat<T> da = dq * P.wq.transpose();
    da.noalias() += dk * P.wk.transpose();
    da.noalias() += dv * P.wv.transpose();
    dx = dx1 + layer_norm_backward(da, c.xhat1, c.rstd1, P.ln1_gain, G.ln1_gain, G.ln1_bias);
  }

  if (s.emb_mask.size()) dx.array() *= s.emb_mask.array();
  const bool pos_trainable = params_.pos_emb.size() && config_.position_mode == PositionMode::Learned;
  for (Eigen::Index i = 0; i < N; ++i) {
    grads.tok_emb.row(s.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    if (pos_trainable) grads.pos_emb.row(static_cast<Eigen::Index>(s.pos[static_cast<std::size_t>(i)])) += dx.row(i);
  }
  return loss;
}

template class Transformer<float>;
template class Transformer<double>;
template struct Params<float>;
template struct Params<double>;
template Params<float> params_from_checkpoint<float>(const ModelCheckpoint&);
template Params<double> params_from_checkpoint<double>(const ModelCheckpoint&);
template ModelCheckpoint checkpoint_from_params<float>(const ModelConfig&, const Params<float>&);
template ModelCheckpoint checkpoint_from_params<double>(const ModelConfig&, const Params<double>&);

// ---------------------------------------------------------------------------
// Checkpoint-level operations

ForwardTrace<float> forward(const ModelCheckpoint& ckpt, const Batch& batch, const ForwardOptions<float>& opts) {
  return Transformer<float>(ckpt).forward(batch, opts);
}

LossAndGradients loss_and_gradients(const ModelCheckpoint& ckpt, const MaskedBatch& batch) {
  Transformer<float> model(ckpt);
  Params<float> grads = model.params().zeros_like();
  LossAndGradients out;
  out.loss = model.loss_and_gradients(batch, grads);
  out.gradients = checkpoint_from_params(ckpt.config, grads).tensors;
  return out;
}

PositionReplacement parse_position_replacement(const std::string& s) {
  if (s == "learned_random" || s == "learned-random") return PositionReplacement::LearnedRandom;
  if (s == "sinusoidal") return PositionReplacement::Sinusoidal;
  if (s == "none") return PositionReplacement::None;
  throw InvalidArgument("unknown position replacement '" + s + "' (expected learned_random, sinusoidal or none)");
}

ModelCheckpoint replace_position_embeddings(const ModelCheckpoint& ckpt, PositionReplacement mode, std::uint64_t seed) {
  ModelCheckpoint out = ckpt;
  out.tensors.erase("pos_emb");
  const auto P = static_cast<Eigen::Index>(ckpt.config.max_positions);
  const auto d = static_cast<Eigen::Index>(ckpt.config.d_model);
  auto store = [&](const Mat<float>& m) {
    Tensor t;
    t.shape = {static_cast<std::uint32_t>(P), static_cast<std::uint32_t>(d)};
    t.data.assign(m.data(), m.data() + m.size());
    out.tensors["pos_emb"] = std::move(t);
  };
  switch (mode) {
    case PositionReplacement::None:
      out.config.position_mode = PositionMode::None;
      break;
    case PositionReplacement::Sinusoidal:
      out.config.position_mode = PositionMode::Sinusoidal;
      store(sinusoidal_table(ckpt.config.max_positions, ckpt.config.d_model));
      break;
    case PositionReplacement::LearnedRandom: {
      out.config.position_mode = PositionMode::Learned;
      Mat<float> m(P, d);
      fill_truncated_normal(m, 0.02, mix_seed(seed, fnv1a("pos_emb.replacement")));
      store(m);
      break;
    }
  }
  return out;
}

ModelCheckpoint add_gaussian_noise(const ModelCheckpoint& ckpt, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidArgument("add_gaussian_noise: sigma must be >= 0");
  if (sigma == 0.0) return ckpt;
  ModelCheckpoint out = ckpt;
  const std::size_t P = ckpt.config.max_positions, d = ckpt.config.d_model;
  Tensor& t = out.tensors["noise_table"];
  if (t.data.empty()) {
    t.shape = {static_cast<std::uint32_t>(P), static_cast<std::uint32_t>(d)};
    t.data.assign(P * d, 0.0f);
  }
  Rng rng(mix_seed(seed, fnv1a("noise_table")));
  std::normal_distribution<double> nd(0.0, sigma);
  for (auto& v : t.data) v += static_cast<float>(nd(rng));
  return out;
}

}  // namespace wolab
