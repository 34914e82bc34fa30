#include "wolab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>

#include "wolab/training.hpp"

namespace wolab {

// ---------------------------------------------------------------------------
// Position-embedding geometry

MatD position_table(const ModelCheckpoint& checkpoint) {
  if (checkpoint.config.position_mode == PositionMode::None || !checkpoint.has("pos_emb")) {
    throw InvalidArgument("no position table: checkpoint has position_mode none");
  }
  const Tensor& t = checkpoint.at("pos_emb");
  if (t.shape.size() != 2) throw FormatError("pos_emb is not a matrix");
  MatD m(t.shape[0], t.shape[1]);
  for (std::size_t k = 0; k < t.data.size(); ++k) m.data()[k] = t.data[k];
  return m;
}

MatD correlation_matrix(const MatD& table) {
  const Eigen::Index p = table.rows();
  if (p == 0 || table.cols() < 2) throw InvalidArgument("correlation matrix needs at least one row of width >= 2");
  MatD z = table.colwise() - table.rowwise().mean();
  for (Eigen::Index i = 0; i < p; ++i) {
    const double n = z.row(i).norm();
    if (n > 0) {
      z.row(i) /= n;
    } else {
      z.row(i).setZero();
    }
  }
  MatD c = z * z.transpose();
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) c(i, j) = std::clamp(c(i, j), -1.0, 1.0);
    c(i, i) = 1.0;
  }
  // exact symmetry
  for (Eigen::Index i = 0; i < p; ++i) {
    for (Eigen::Index j = i + 1; j < p; ++j) c(j, i) = c(i, j);
  }
  return c;
}

MatD dot_product_matrix(const MatD& table) { return table * table.transpose(); }

MatD position_correlation_matrix(const ModelCheckpoint& checkpoint, std::size_t rows) {
  MatD t = position_table(checkpoint);
  if (rows > 0 && rows < static_cast<std::size_t>(t.rows())) t.conservativeResize(static_cast<Eigen::Index>(rows), Eigen::NoChange);
  return correlation_matrix(t);
}

BandingScores banding_scores(const MatD& c, std::size_t window) {
  const auto p = static_cast<std::size_t>(c.rows());
  if (c.rows() != c.cols()) throw InvalidArgument("banding scores need a square matrix");
  if (window == 0 || p <= window + 1) {
    throw InvalidArgument("banding scores need more than " + std::to_string(window + 1) + " positions, got " +
                          std::to_string(p));
  }
  BandingScores b;
  double std_sum = 0;
  for (std::size_t k = 0; k <= window + 1; ++k) {
    const std::size_t n = p - k;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i + k));
    mean /= static_cast<double>(n);
    b.profile.push_back(mean);
    if (k >= 1 && k <= window) {
      double var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i + k)) - mean;
        var += d * d;
      }
      std_sum += std::sqrt(var / static_cast<double>(n));
    }
  }
  std::size_t mono = 0;
  for (std::size_t k = 1; k <= window; ++k) mono += std::abs(b.profile[k]) > std::abs(b.profile[k + 1]) ? 1 : 0;
  b.monotonicity = static_cast<double>(mono) / static_cast<double>(window);
  b.translation_invariance = 1.0 - std_sum / static_cast<double>(window);
  return b;
}

// ---------------------------------------------------------------------------
// Attention offsets

int max_attention_offset(std::span<const double> row, std::size_t query, std::size_t length) {
  if (length == 0 || query >= length || row.size() < length) throw InvalidArgument("max_attention_offset: bad row");
  int best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  bool first = true;
  for (std::size_t j = 0; j < length; ++j) {
    const int off = static_cast<int>(j) - static_cast<int>(query);
    const double v = row[j];
    bool take = first || v > best_v;
    if (!take && v == best_v) take = std::abs(off) < std::abs(best) || (std::abs(off) == std::abs(best) && off < best);
    if (take) {
      best = off;
      best_v = v;
      first = false;
    }
  }
  return best;
}

double OffsetHistogram::pct(std::size_t layer, int offset) const {
  if (layer >= max_pct.size()) return 0.0;
  auto it = max_pct[layer].find(offset);
  return it == max_pct[layer].end() ? 0.0 : it->second;
}

namespace {

std::string offsets_csv(const std::vector<std::map<int, double>>& data) {
  std::string out = "layer,offset,pct\n";
  for (std::size_t l = 0; l < data.size(); ++l) {
    for (const auto& [off, v] : data[l]) out += std::to_string(l + 1) + "," + std::to_string(off) + "," + format_double(v) + "\n";
  }
  return out;
}

}  // namespace

std::string OffsetHistogram::to_csv() const { return offsets_csv(max_pct); }
std::string OffsetHistogram::mass_to_csv() const { return offsets_csv(mass_pct); }

OffsetAccumulator::OffsetAccumulator(std::size_t layers, std::size_t heads)
    : layers_(layers), heads_(heads), max_counts_(layers), mass_(layers), queries_(layers, 0.0) {}

void OffsetAccumulator::add(std::size_t layer, std::size_t head, const MatD& a, std::size_t length) {
  if (layer >= layers_ || head >= heads_) throw InvalidArgument("offset accumulator: layer/head out of range");
  if (static_cast<std::size_t>(a.rows()) < length || static_cast<std::size_t>(a.cols()) < length) {
    throw InvalidArgument("offset accumulator: attention smaller than sequence length");
  }
  std::vector<double> row(length);
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t j = 0; j < length; ++j) {
      row[j] = a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      mass_[layer][static_cast<int>(j) - static_cast<int>(i)] += row[j];
    }
    max_counts_[layer][max_attention_offset(row, i, length)] += 1.0;
    queries_[layer] += 1.0;
  }
}

void OffsetAccumulator::add(std::size_t layer, std::size_t head, const Mat<float>& a, std::size_t length) {
  add(layer, head, MatD(a.cast<double>()), length);
}

void OffsetAccumulator::merge(const OffsetAccumulator& other) {
  if (other.layers_ != layers_ || other.heads_ != heads_) throw InvalidArgument("offset accumulator: shape mismatch");
  for (std::size_t l = 0; l < layers_; ++l) {
    for (const auto& [off, c] : other.max_counts_[l]) max_counts_[l][off] += c;
    for (const auto& [off, m] : other.mass_[l]) mass_[l][off] += m;
    queries_[l] += other.queries_[l];
  }
}

OffsetHistogram OffsetAccumulator::finish() const {
  OffsetHistogram h;
  h.layers = layers_;
  h.heads = heads_;
  h.max_pct.resize(layers_);
  h.mass_pct.resize(layers_);
  for (std::size_t l = 0; l < layers_; ++l) {
    if (queries_[l] == 0) continue;
    for (const auto& [off, c] : max_counts_[l]) h.max_pct[l][off] = 100.0 * c / queries_[l];
    double total = 0;
    for (const auto& [off, m] : mass_[l]) total += m;
    for (const auto& [off, m] : mass_[l]) h.mass_pct[l][off] = total > 0 ? 100.0 * m / total : 0.0;
  }
  return h;
}

OffsetHistogram attention_offset_histogram(const ModelCheckpoint& checkpoint, std::span<const TokenSeq> sentences,
                                           int workers) {
  const Transformer<float> model(checkpoint);
  const auto& cfg = checkpoint.config;
  const auto seqs = frame_sequences(sentences, cfg.frame_bos_eos);
  constexpr std::size_t kBatch = 16;
  const std::size_t n_batches = (seqs.size() + kBatch - 1) / kBatch;
  std::vector<OffsetAccumulator> parts(n_batches, OffsetAccumulator(cfg.layers, cfg.heads));
  parallel_for(n_batches, workers, [&](std::size_t b) {
    const std::size_t s0 = b * kBatch, s1 = std::min(seqs.size(), s0 + kBatch);
    const Batch batch = Batch::from_sequences(std::span<const std::vector<TokenId>>(seqs.data() + s0, s1 - s0));
    const auto trace = model.forward(batch);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        for (std::size_t r = 0; r < s1 - s0; ++r) parts[b].add(l, h, trace.attentions[l][h][r], seqs[s0 + r].size());
      }
    }
  });
  // merged in batch order so the result does not depend on the worker count
  OffsetAccumulator merged(cfg.layers, cfg.heads);
  for (const auto& p : parts) merged.merge(p);
  return merged.finish();
}

std::vector<std::size_t> default_plot_layers(std::size_t depth) {
  std::vector<std::size_t> out;
  for (std::size_t x : {1, 2, 7, 8, 11, 12}) {
    const std::size_t l = std::clamp<std::size_t>((x * depth + 11) / 12, 1, std::max<std::size_t>(depth, 1));
    if (std::find(out.begin(), out.end(), l) == out.end()) out.push_back(l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Export

std::string correlation_csv(const MatD& c) {
  std::string out = "i,j,value\n";
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(c(i, j)) + "\n";
    }
  }
  return out;
}

namespace {

std::vector<std::vector<std::string>> csv_rows(const std::string& text, std::size_t columns, const std::string& header) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header) throw FormatError("CSV header must be '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != columns) throw FormatError("CSV line " + std::to_string(n) + ": expected " + std::to_string(columns) + " fields");
    rows.push_back(std::move(cells));
  }
  return rows;
}

double to_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw FormatError("'" + s + "' is not a number");
  return v;
}

long to_long(const std::string& s) {
  char* end = nullptr;
  const long v = std::strtol(s.c_str(), &end, 10);
  if (s.empty() || *end != '\0') throw FormatError("'" + s + "' is not an integer");
  return v;
}

}  // namespace

MatD parse_correlation_csv(const std::string& text) {
  const auto rows = csv_rows(text, 3, "i,j,value");
  long n = 0;
  for (const auto& r : rows) n = std::max({n, to_long(r[0]) + 1, to_long(r[1]) + 1});
  MatD c = MatD::Zero(n, n);
  for (const auto& r : rows) {
    const long i = to_long(r[0]), j = to_long(r[1]);
    if (i < 0 || j < 0) throw FormatError("negative matrix index in CSV");
    c(i, j) = to_double(r[2]);
  }
  return c;
}

std::map<std::pair<std::size_t, int>, double> parse_offset_csv(const std::string& text) {
  std::map<std::pair<std::size_t, int>, double> out;
  for (const auto& r : csv_rows(text, 3, "layer,offset,pct")) {
    out[{static_cast<std::size_t>(to_long(r[0])), static_cast<int>(to_long(r[1]))}] = to_double(r[2]);
  }
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_open(int w, int h) {
  return "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         std::to_string(w) + "\" height=\"" + std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " +
         std::to_string(h) + "\">\n<rect x=\"0\" y=\"0\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" fill=\"white\"/>\n";
}

std::string text_el(double x, double y, const std::string& s, const std::string& extra = "") {
  return "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" font-family=\"sans-serif\" font-size=\"12\"" + extra + ">" +
         xml_escape(s) + "</text>\n";
}

std::string diverging(double v, double lo, double hi) {
  double t = hi > lo ? (v - lo) / (hi - lo) : 0.5;
  if (!std::isfinite(t)) t = 0.5;
  t = std::clamp(t, 0.0, 1.0);
  // blue (0) -> white (0.5) -> red (1)
  double r, g, b;
  if (t < 0.5) {
    const double u = t / 0.5;
    r = 59 + (255 - 59) * u;
    g = 76 + (255 - 76) * u;
    b = 192 + (255 - 192) * u;
  } else {
    const double u = (t - 0.5) / 0.5;
    r = 255 + (180 - 255) * u;
    g = 255 + (4 - 255) * u;
    b = 255 + (38 - 255) * u;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(r)), static_cast<int>(std::lround(g)),
                static_cast<int>(std::lround(b)));
  return buf;
}

}  // namespace

std::string heatmap_svg(const MatD& c, const ChartLabels& labels, double lo, double hi) {
  const int n = static_cast<int>(c.rows());
  const double cell = n > 0 ? std::max(1.0, 480.0 / n) : 0.0;
  const double left = 60, top = 40;
  const int w = static_cast<int>(left + cell * n + 90), h = static_cast<int>(top + cell * n + 50);
  std::string s = svg_open(std::max(w, 300), std::max(h, 200));
  s += text_el(left, 20, labels.title, " font-weight=\"bold\"");
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < static_cast<int>(c.cols()); ++j) {
      s += "<rect x=\"" + fmt(left + j * cell) + "\" y=\"" + fmt(top + i * cell) + "\" width=\"" + fmt(cell) +
           "\" height=\"" + fmt(cell) + "\" fill=\"" + diverging(c(i, j), lo, hi) + "\"/>\n";
    }
  }
  s += text_el(left + cell * n / 2, top + cell * n + 30, labels.x_label, " text-anchor=\"middle\"");
  s += text_el(15, top + cell * n / 2, labels.y_label,
               " text-anchor=\"middle\" transform=\"rotate(-90 15 " + fmt(top + cell * n / 2) + ")\"");
  // colour bar
  const double bx = left + cell * n + 20;
  for (int k = 0; k < 20; ++k) {
    const double v = hi - (hi - lo) * (k + 0.5) / 20.0;
    s += "<rect x=\"" + fmt(bx) + "\" y=\"" + fmt(top + k * 12) + "\" width=\"14\" height=\"12\" fill=\"" +
         diverging(v, lo, hi) + "\"/>\n";
  }
  s += text_el(bx + 18, top + 10, tick(hi));
  s += text_el(bx + 18, top + 240, tick(lo));
  s += "</svg>\n";
  return s;
}

std::string line_chart_svg(std::span<const Series> series, const ChartLabels& labels) {
  const double left = 70, top = 40, pw = 480, ph = 300;
  std::string s = svg_open(static_cast<int>(left + pw + 160), static_cast<int>(top + ph + 60));
  s += text_el(left, 20, labels.title, " font-weight=\"bold\"");
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& se : series) {
    for (const auto& [x, y] : se.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  s += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(pw) + "\" height=\"" + fmt(ph) +
       "\" fill=\"none\" stroke=\"black\"/>\n";
  s += text_el(left + pw / 2, top + ph + 45, labels.x_label, " text-anchor=\"middle\"");
  s += text_el(18, top + ph / 2, labels.y_label,
               " text-anchor=\"middle\" transform=\"rotate(-90 18 " + fmt(top + ph / 2) + ")\"");
  if (!(x0 <= x1)) {
    s += text_el(left + pw / 2, top + ph / 2, "no data", " text-anchor=\"middle\"");
    s += "</svg>\n";
    return s;
  }
  if (x1 == x0) {
    x0 -= 0.5;
    x1 += 0.5;
  }
  if (y1 == y0) {
    y0 -= 0.5;
    y1 += 0.5;
  }
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
  auto py = [&](double y) { return top + ph - (y - y0) / (y1 - y0) * ph; };
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    s += text_el(px(xv), top + ph + 16, tick(xv), " text-anchor=\"middle\"");
    s += text_el(left - 6, py(yv) + 4, tick(yv), " text-anchor=\"end\"");
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const int shade = series.size() > 1 ? static_cast<int>(200 - 190.0 * static_cast<double>(k) / static_cast<double>(series.size() - 1)) : 30;
    char colour[16];
    std::snprintf(colour, sizeof colour, "#%02x%02x%02x", shade / 3, shade / 2, shade);
    std::string pts;
    for (const auto& [x, y] : series[k].points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      if (!pts.empty()) pts += ' ';
      pts += fmt(px(x)) + "," + fmt(py(y));
    }
    s += "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    s += "<line x1=\"" + fmt(left + pw + 15) + "\" y1=\"" + fmt(top + 10 + 16.0 * static_cast<double>(k)) + "\" x2=\"" +
         fmt(left + pw + 35) + "\" y2=\"" + fmt(top + 10 + 16.0 * static_cast<double>(k)) + "\" stroke=\"" + colour +
         "\" stroke-width=\"2\"/>\n";
    s += text_el(left + pw + 40, top + 14 + 16.0 * static_cast<double>(k), series[k].name);
  }
  s += "</svg>\n";
  return s;
}

std::string offset_chart_svg(const OffsetHistogram& h, std::span<const std::size_t> layers, const std::string& title,
                             bool mass) {
  std::vector<Series> series;
  for (auto l : layers) {
    if (l == 0 || l > h.layers) continue;
    Series se;
    se.name = "layer " + std::to_string(l);
    for (const auto& [off, v] : (mass ? h.mass_pct : h.max_pct)[l - 1]) se.points.emplace_back(off, v);
    series.push_back(std::move(se));
  }
  return line_chart_svg(series, {title, "offset", mass ? "% attention mass" : "% of max-attention relations"});
}

void export_text(const std::filesystem::path& path, const std::string& contents) { write_file(path, contents); }

}  // namespace wolab
