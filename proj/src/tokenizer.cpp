#include "wolab/tokenizer.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <unordered_set>

#include "wolab/common.hpp"

namespace wolab {

namespace {

constexpr std::string_view kSpecialNames[special::kCount] = {"<pad>", "<mask>", "<unk>", "<s>", "</s>"};
// Placeholder for an out-of-vocabulary character during encoding; never merges.
const std::string kUnknownSymbol = "\x01unk";

std::string rank_key(const std::string& left, const std::string& right) {
  std::string k;
  k.reserve(left.size() + right.size() + 1);
  k += left;
  k += '\x1f';
  k += right;
  return k;
}

}  // namespace

bool TokenSeq::spans_tile() const {
  std::size_t expect = 0;
  for (const auto& [start, end] : word_spans) {
    if (start != expect || end <= start) return false;
    expect = end;
  }
  return expect == ids.size();
}

BpeVocab::BpeVocab() {
  for (auto name : kSpecialNames) add_token(std::string(name));
}

const std::string& BpeVocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " out of range [0, " +
                          std::to_string(id_to_token_.size()) + ")");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

TokenId BpeVocab::id_of(const std::string& tok) const {
  auto it = token_to_id_.find(tok);
  return it == token_to_id_.end() ? -1 : it->second;
}

TokenId BpeVocab::add_token(const std::string& tok) {
  auto it = token_to_id_.find(tok);
  if (it != token_to_id_.end()) return it->second;
  const auto id = static_cast<TokenId>(id_to_token_.size());
  id_to_token_.push_back(tok);
  token_to_id_.emplace(tok, id);
  return id;
}

void BpeVocab::rebuild_ranks() {
  merge_rank_.clear();
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_.emplace(rank_key(merges_[r].left, merges_[r].right), r);
  }
}

BpeVocab BpeVocab::from_merges(const std::vector<std::string>& initial_symbols,
                               const std::vector<MergeRule>& merges) {
  BpeVocab v;
  for (const auto& s : initial_symbols) v.add_token(s);
  for (const auto& m : merges) {
    if (v.id_of(m.left) < 0 || v.id_of(m.right) < 0) {
      throw FormatError("merge rule '" + m.left + " " + m.right + "' uses an operand that does not exist yet");
    }
    v.merges_.push_back(m);
    v.add_token(m.merged());
  }
  v.rebuild_ranks();
  return v;
}

std::vector<TokenId> BpeVocab::encode_word(const std::string& word) const {
  std::vector<std::string> symbols;
  for (auto& ch : utf8_chars(word)) {
    symbols.push_back(token_to_id_.count(ch) ? std::move(ch) : kUnknownSymbol);
  }
  symbols.emplace_back(kEndOfWord);

  while (symbols.size() > 1) {
    std::size_t best_rank = merge_rank_.size();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(rank_key(symbols[i], symbols[i + 1]));
      if (it != merge_rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == merge_rank_.size()) break;
    const MergeRule& rule = merges_[best_rank];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == rule.left && symbols[i + 1] == rule.right) {
        next.push_back(rule.merged());
        i += 2;
      } else {
        next.push_back(std::move(symbols[i]));
        ++i;
      }
    }
    symbols = std::move(next);
  }

  std::vector<TokenId> ids;
  ids.reserve(symbols.size());
  for (const auto& s : symbols) {
    if (s == kUnknownSymbol) {
      ids.push_back(special::kUnk);
    } else {
      ids.push_back(token_to_id_.at(s));
    }
  }
  return ids;
}

TokenSeq BpeVocab::encode_words(std::span<const std::string> words) const {
  TokenSeq out;
  for (const auto& w : words) {
    const std::size_t start = out.ids.size();
    auto ids = encode_word(w);
    out.ids.insert(out.ids.end(), ids.begin(), ids.end());
    out.word_spans.emplace_back(start, out.ids.size());
  }
  return out;
}

TokenSeq BpeVocab::encode(const Sentence& sentence) const { return encode_words(sentence.words); }

std::string BpeVocab::decode(std::span<const TokenId> ids) const {
  std::string text;
  for (TokenId id : ids) {
    const std::string& tok = token(id);
    if (id == special::kPad || id == special::kBos || id == special::kEos) continue;
    if (is_special(id)) {
      text += tok;
      continue;
    }
    std::size_t pos = 0;
    while (pos < tok.size()) {
      auto hit = tok.find(kEndOfWord, pos);
      if (hit == std::string::npos) {
        text.append(tok, pos, std::string::npos);
        break;
      }
      text.append(tok, pos, hit - pos);
      text += ' ';
      pos = hit + kEndOfWord.size();
    }
  }
  if (!text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

std::string BpeVocab::serialize() const {
  std::ostringstream out;
  out << "wolab-bpe " << kFormatVersion << ' ' << id_to_token_.size() << ' ' << merges_.size() << '\n';
  for (const auto& m : merges_) out << m.left << ' ' << m.right << '\n';
  for (const auto& t : id_to_token_) out << t << '\n';
  return out.str();
}

std::string BpeVocab::checksum() const { return sha256_hex(serialize()); }

BpeVocab BpeVocab::deserialize(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("vocabulary file is empty");
  const auto header = split_whitespace(line);
  if (header.size() != 4 || header[0] != "wolab-bpe") throw FormatError("not a vocabulary file: bad header '" + line + "'");
  if (header[1] != std::to_string(kFormatVersion)) {
    throw FormatError("unsupported vocabulary version " + header[1] + " (expected " + std::to_string(kFormatVersion) + ")");
  }
  std::size_t size = 0, n_merges = 0;
  try {
    size = std::stoull(header[2]);
    n_merges = std::stoull(header[3]);
  } catch (const std::exception&) {
    throw FormatError("malformed vocabulary header '" + line + "'");
  }

  std::vector<MergeRule> merges;
  merges.reserve(n_merges);
  for (std::size_t i = 0; i < n_merges; ++i) {
    if (!std::getline(in, line)) throw FormatError("vocabulary truncated in merge list");
    auto parts = split_whitespace(line);
    if (parts.size() != 2) throw FormatError("malformed merge rule on line " + std::to_string(i + 2));
    merges.push_back({parts[0], parts[1]});
  }
  std::vector<std::string> table;
  table.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    if (!std::getline(in, line)) throw FormatError("vocabulary truncated in token table");
    table.push_back(line);
  }
  if (size < special::kCount) throw FormatError("vocabulary smaller than the reserved specials");
  for (std::size_t i = 0; i < special::kCount; ++i) {
    if (table[i] != kSpecialNames[i]) throw FormatError("reserved id " + std::to_string(i) + " is not " + std::string(kSpecialNames[i]));
  }

  BpeVocab v;
  for (std::size_t i = special::kCount; i < size; ++i) {
    if (v.add_token(table[i]) != static_cast<TokenId>(i)) throw FormatError("duplicate token '" + table[i] + "' in table");
  }
  for (const auto& m : merges) {
    if (v.id_of(m.left) < 0 || v.id_of(m.right) < 0 || v.id_of(m.merged()) < 0) {
      throw FormatError("merge rule '" + m.left + " " + m.right + "' inconsistent with token table");
    }
  }
  v.merges_ = std::move(merges);
  v.rebuild_ranks();
  return v;
}

void BpeVocab::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

BpeVocab BpeVocab::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

namespace {

std::vector<std::string> initial_symbols(const std::map<std::string, std::int64_t>& word_counts) {
  std::set<std::string> chars;
  for (const auto& [w, c] : word_counts) {
    for (auto& ch : utf8_chars(w)) chars.insert(std::move(ch));
  }
  std::vector<std::string> out(chars.begin(), chars.end());
  out.emplace_back(kEndOfWord);
  return out;
}

std::map<std::string, std::int64_t> count_words(std::span<const Sentence> corpus) {
  std::map<std::string, std::int64_t> counts;
  for (const auto& s : corpus) {
    for (const auto& w : s.words) ++counts[w];
  }
  return counts;
}

}  // namespace

std::size_t bpe_initial_size(std::span<const Sentence> corpus) {
  return special::kCount + initial_symbols(count_words(corpus)).size();
}

BpeVocab train_bpe(std::span<const Sentence> corpus, std::size_t vocab_size) {
  if (corpus.empty()) throw InvalidArgument("train_bpe: corpus is empty");
  const auto word_counts = count_words(corpus);
  const auto init = initial_symbols(word_counts);
  const std::size_t minimum = special::kCount + init.size();
  if (vocab_size < minimum) {
    throw InvalidArgument("train_bpe: vocab_size " + std::to_string(vocab_size) + " is too small; minimum is " +
                          std::to_string(minimum) + " (specials + characters + end-of-word marker)");
  }

  // Symbol table local to training; ids index `names`.
  std::vector<std::string> names;
  std::unordered_map<std::string, std::uint32_t> sym_of;
  auto intern = [&](const std::string& s) {
    auto [it, inserted] = sym_of.emplace(s, static_cast<std::uint32_t>(names.size()));
    if (inserted) names.push_back(s);
    return it->second;
  };
  for (const auto& s : init) intern(s);

  struct WordState {
    std::vector<std::uint32_t> symbols;
    std::int64_t count;
  };
  std::vector<WordState> words;
  words.reserve(word_counts.size());
  for (const auto& [w, c] : word_counts) {
    WordState ws{{}, c};
    for (const auto& ch : utf8_chars(w)) ws.symbols.push_back(sym_of.at(ch));
    ws.symbols.push_back(sym_of.at(std::string(kEndOfWord)));
    words.push_back(std::move(ws));
  }

  auto key = [](std::uint32_t a, std::uint32_t b) { return (static_cast<std::uint64_t>(a) << 32) | b; };
  std::unordered_map<std::uint64_t, std::int64_t> pair_count;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> pair_words;  // may hold stale entries

  auto add_word_pairs = [&](std::uint32_t wi, std::int64_t sign) {
    const auto& ws = words[wi];
    for (std::size_t i = 0; i + 1 < ws.symbols.size(); ++i) {
      const auto k = key(ws.symbols[i], ws.symbols[i + 1]);
      auto& c = pair_count[k];
      c += sign * ws.count;
      if (c == 0) pair_count.erase(k);
      if (sign > 0) pair_words[k].push_back(wi);
    }
  };
  for (std::uint32_t wi = 0; wi < words.size(); ++wi) add_word_pairs(wi, +1);

  std::vector<MergeRule> merges;
  std::set<std::string> vocab_tokens(init.begin(), init.end());
  std::size_t current_size = minimum;

  while (current_size < vocab_size) {
    std::uint64_t best = 0;
    std::int64_t best_count = 0;
    for (const auto& [k, c] : pair_count) {
      if (c > best_count) {
        best = k;
        best_count = c;
      } else if (c == best_count) {
        const auto& bl = names[best >> 32];
        const auto& br = names[best & 0xffffffffu];
        const auto& l = names[k >> 32];
        const auto& r = names[k & 0xffffffffu];
        if (std::tie(l, r) < std::tie(bl, br)) best = k;
      }
    }
    if (best_count < 2) break;

    const std::uint32_t a = static_cast<std::uint32_t>(best >> 32);
    const std::uint32_t b = static_cast<std::uint32_t>(best & 0xffffffffu);
    const std::string merged = names[a] + names[b];
    const std::uint32_t m = intern(merged);
    merges.push_back({names[a], names[b]});
    if (vocab_tokens.insert(merged).second) ++current_size;

    auto affected = std::move(pair_words[best]);
    pair_words.erase(best);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::uint32_t wi : affected) {
      auto& syms = words[wi].symbols;
      bool present = false;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        if (syms[i] == a && syms[i + 1] == b) {
          present = true;
          break;
        }
      }
      if (!present) continue;
      add_word_pairs(wi, -1);
      std::vector<std::uint32_t> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(m);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms = std::move(next);
      add_word_pairs(wi, +1);
    }
  }

  return BpeVocab::from_merges(init, merges);
}

}  // namespace wolab
