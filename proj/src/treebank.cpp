#include "wolab/treebank.hpp"

#include <cstdlib>
#include <sstream>

#include "wolab/common.hpp"

namespace wolab {

void validate_tree(const DepSentence& s, const std::string& where) {
  const int n = static_cast<int>(s.size());
  if (s.heads.size() != s.words.size() || s.relations.size() != s.words.size()) {
    throw FormatError(where + ": field lengths differ");
  }
  for (int i = 0; i < n; ++i) {
    const int h = s.heads[static_cast<std::size_t>(i)];
    if (h != DepSentence::kRoot && (h < 0 || h >= n || h == i)) {
      throw FormatError(where + ": word " + std::to_string(i + 1) + " has out-of-range head");
    }
  }
  // every word must reach the root sentinel within n steps
  for (int i = 0; i < n; ++i) {
    int cur = i;
    int steps = 0;
    while (cur != DepSentence::kRoot) {
      cur = s.heads[static_cast<std::size_t>(cur)];
      if (++steps > n) throw FormatError(where + ": heads contain a cycle through word " + std::to_string(i + 1));
    }
  }
}

std::vector<DepSentence> parse_conllu_text(const std::string& text, const std::string& source) {
  std::vector<DepSentence> out;
  DepSentence cur;
  std::vector<int> raw_heads;
  std::size_t line_no = 0;
  std::size_t start_line = 1;

  auto flush = [&]() {
    if (cur.words.empty()) {
      cur = DepSentence{};
      raw_heads.clear();
      return;
    }
    const std::string where =
        source + ": sentence " + (cur.id.empty() ? "#" + std::to_string(out.size() + 1) : cur.id) + " (line " +
        std::to_string(start_line) + ")";
    const int n = static_cast<int>(cur.words.size());
    cur.heads.resize(raw_heads.size());
    for (std::size_t i = 0; i < raw_heads.size(); ++i) {
      const int h = raw_heads[i];
      if (h < 0 || h > n) throw FormatError(where + ": head " + std::to_string(h) + " out of range");
      cur.heads[i] = h == 0 ? DepSentence::kRoot : h - 1;
    }
    validate_tree(cur, where);
    out.push_back(std::move(cur));
    cur = DepSentence{};
    raw_heads.clear();
  };

  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      start_line = line_no + 1;
      continue;
    }
    if (line[0] == '#') {
      if (cur.words.empty()) {
        static constexpr std::string_view kSentId = "# sent_id = ";
        if (line.rfind(kSentId, 0) == 0) cur.id = line.substr(kSentId.size());
        start_line = line_no;
      }
      continue;
    }
    const auto cols = split(line, '\t');
    if (cols.size() != 10) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected 10 tab-separated columns, got " +
                        std::to_string(cols.size()));
    }
    const std::string& id = cols[0];
    if (id.find('-') != std::string::npos || id.find('.') != std::string::npos) continue;  // multiword / empty node
    char* end = nullptr;
    const long idx = std::strtol(id.c_str(), &end, 10);
    if (*end != '\0' || idx != static_cast<long>(cur.words.size()) + 1) {
      throw FormatError(source + ":" + std::to_string(line_no) + ": unexpected token id '" + id + "'");
    }
    const long head = std::strtol(cols[6].c_str(), &end, 10);
    if (cols[6].empty() || *end != '\0') {
      throw FormatError(source + ":" + std::to_string(line_no) + ": head '" + cols[6] + "' is not an integer");
    }
    cur.words.push_back(cols[1]);
    cur.relations.push_back(cols[7]);
    raw_heads.push_back(static_cast<int>(head));
  }
  flush();
  return out;
}

std::vector<DepSentence> parse_conllu(const std::filesystem::path& path) {
  return parse_conllu_text(read_file(path), path.string());
}

std::string to_conllu(std::span<const DepSentence> sentences) {
  std::ostringstream out;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sent = sentences[s];
    out << "# sent_id = " << (sent.id.empty() ? std::to_string(s + 1) : sent.id) << '\n';
    out << "# text =";
    for (const auto& w : sent.words) out << ' ' << w;
    out << '\n';
    for (std::size_t i = 0; i < sent.size(); ++i) {
      const int h = sent.heads[i] == DepSentence::kRoot ? 0 : sent.heads[i] + 1;
      out << i + 1 << '\t' << sent.words[i] << "\t_\t_\t_\t_\t" << h << '\t' << sent.relations[i] << "\t_\t_\n";
    }
    out << '\n';
  }
  return out.str();
}

std::vector<DepSentence> filter_max_len(std::span<const DepSentence> sentences, std::size_t max_tokens) {
  std::vector<DepSentence> out;
  for (const auto& s : sentences) {
    if (s.size() <= max_tokens) out.push_back(s);
  }
  return out;
}

std::size_t length_bin(std::size_t length) { return length >= kLengthBins ? kLengthBins - 1 : length - 1; }

std::string DependencyHistogram::to_csv() const {
  std::string out = "relation,bin,frequency\n";
  for (const auto& [rel, freqs] : frequency) {
    for (std::size_t b = 0; b < kLengthBins; ++b) {
      out += rel + "," + kLengthBinNames[b] + "," + format_double(freqs[b]) + "\n";
    }
  }
  return out;
}

DependencyHistogram dependency_length_histogram(std::span<const DepSentence> sentences, HistogramNormalization norm) {
  DependencyHistogram h;
  h.normalization = norm;
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.heads[i] == DepSentence::kRoot) continue;
      const auto len = static_cast<std::size_t>(std::abs(static_cast<int>(i) - s.heads[i]));
      auto& c = h.counts[s.relations[i]];
      ++c[length_bin(len)];
    }
  }
  std::array<double, kLengthBins> bin_totals{};
  for (const auto& [rel, c] : h.counts) {
    for (std::size_t b = 0; b < kLengthBins; ++b) bin_totals[b] += static_cast<double>(c[b]);
  }
  for (const auto& [rel, c] : h.counts) {
    auto& f = h.frequency[rel];
    double rel_total = 0;
    for (auto v : c) rel_total += static_cast<double>(v);
    for (std::size_t b = 0; b < kLengthBins; ++b) {
      const double denom = norm == HistogramNormalization::PerBin ? bin_totals[b] : rel_total;
      f[b] = denom > 0 ? static_cast<double>(c[b]) / denom : 0.0;
    }
  }
  return h;
}

}  // namespace wolab
