#include <algorithm>
#include <map>
#include <set>

#include "doctest.h"
#include "support.hpp"
#include "wolab/common.hpp"
#include "wolab/tokenizer.hpp"

using namespace wolab;
using wolab::testing::TempDir;

namespace {

std::vector<Sentence> sentences_of(std::initializer_list<std::string> lines) {
  std::vector<Sentence> out;
  std::uint64_t id = 0;
  for (const auto& l : lines) out.push_back({split_whitespace(l), id++});
  return out;
}

// Straightforward BPE over explicit symbol lists, recounting every pair at each step.
std::vector<MergeRule> naive_bpe(const std::vector<Sentence>& corpus, std::size_t vocab_size) {
  std::map<std::string, long> counts;
  for (const auto& s : corpus)
    for (const auto& w : s.words) counts[w]++;
  std::vector<std::pair<std::vector<std::string>, long>> words;
  std::set<std::string> symbols;
  for (const auto& [w, c] : counts) {
    auto chars = utf8_chars(w);
    symbols.insert(chars.begin(), chars.end());
    chars.emplace_back(kEndOfWord);
    words.emplace_back(chars, c);
  }
  std::size_t size = special::kCount + symbols.size() + 1;
  std::vector<MergeRule> merges;
  while (size < vocab_size) {
    std::map<std::pair<std::string, std::string>, long> pairs;
    for (const auto& [syms, c] : words)
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += c;
    std::pair<std::string, std::string> best;
    long best_c = 0;
    for (const auto& [p, c] : pairs) {
      if (c > best_c) {
        best = p;
        best_c = c;
      }
    }
    if (best_c < 2) break;
    merges.push_back({best.first, best.second});
    for (auto& [syms, c] : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == best.first && syms[i + 1] == best.second) {
          next.push_back(best.first + best.second);
          i += 2;
        } else {
          next.push_back(syms[i++]);
        }
      }
      syms = std::move(next);
    }
    ++size;
  }
  return merges;
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("first merge is the most frequent pair") {
  const auto corpus = sentences_of({"aaab", "aab"});
  const auto v = train_bpe(corpus, bpe_initial_size(corpus) + 1);
  REQUIRE(v.merges().size() == 1);
  CHECK(v.merges()[0] == MergeRule{"a", "a"});
  // (a, a) occurs twice in "aaab" and once in "aab".
  long freq = 0;
  for (const auto& s : corpus)
    for (const auto& w : s.words)
      for (std::size_t i = 0; i + 1 < w.size(); ++i) freq += (w[i] == 'a' && w[i + 1] == 'a');
  CHECK(freq == 3);
}

TEST_CASE("vocabulary at the initial size has no merges") {
  const auto corpus = sentences_of({"hello world", "low"});
  const auto v = train_bpe(corpus, bpe_initial_size(corpus));
  CHECK(v.merges().empty());
  CHECK(v.size() == bpe_initial_size(corpus));
  // specials + h e l o w r d + end-of-word
  CHECK(bpe_initial_size(corpus) == special::kCount + 7 + 1);
}

TEST_CASE("too-small vocabulary names the minimum") {
  const auto corpus = sentences_of({"abc"});
  try {
    train_bpe(corpus, 3);
    FAIL("expected InvalidArgument");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("minimum is " + std::to_string(bpe_initial_size(corpus))) != std::string::npos);
  }
  CHECK_THROWS_AS(train_bpe(std::vector<Sentence>{}, 100), InvalidArgument);
}

TEST_CASE("training matches a naive reference implementation") {
  const auto corpus = wolab::testing::synthetic_sentences(300, 21);
  const std::size_t target = bpe_initial_size(corpus) + 150;
  const auto v = train_bpe(corpus, target);
  CHECK(v.merges() == naive_bpe(corpus, target));
  CHECK(v.size() <= target);
}

TEST_CASE("training is deterministic") {
  const auto corpus = wolab::testing::synthetic_sentences(400, 22);
  CHECK(train_bpe(corpus, 300).checksum() == train_bpe(corpus, 300).checksum());
}

TEST_CASE("encoding basics") {
  const auto corpus = sentences_of({"ab ab ab", "b"});
  const auto v = train_bpe(corpus, 100);
  const auto single = v.encode_word("b");
  CHECK(single.size() == 1);
  const auto seq = v.encode(Sentence{{"b"}, 0});
  CHECK(seq.word_spans == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}});
  const auto unk = v.encode_word("z");
  CHECK(std::find(unk.begin(), unk.end(), special::kUnk) != unk.end());
  CHECK(v.decode(std::vector<TokenId>{}) == "");
  CHECK_THROWS_AS(v.token(static_cast<TokenId>(v.size())), InvalidArgument);
  CHECK_THROWS_AS(v.decode(std::vector<TokenId>{-1}), InvalidArgument);
}

TEST_CASE("decode inverts encode on seen characters") {
  const auto corpus = wolab::testing::synthetic_sentences(1000, 23);
  const auto v = train_bpe(corpus, 800);
  const auto held = wolab::testing::synthetic_sentences(200, 24);
  for (const auto& s : held) {
    bool seen_chars = true;
    for (const auto& w : s.words)
      for (const auto& ch : utf8_chars(w)) seen_chars = seen_chars && v.id_of(ch) >= 0;
    if (!seen_chars) continue;
    std::string joined;
    for (const auto& w : s.words) joined += (joined.empty() ? "" : " ") + w;
    const auto enc = v.encode(s);
    CHECK(enc.spans_tile());
    CHECK(v.decode(enc.ids) == joined);
  }
}

TEST_CASE("encoding a sentence concatenates its words") {
  const auto corpus = wolab::testing::synthetic_sentences(300, 25);
  const auto v = train_bpe(corpus, 400);
  for (std::size_t i = 0; i + 1 < corpus.size(); i += 7) {
    Sentence both{corpus[i].words, 0};
    both.words.insert(both.words.end(), corpus[i + 1].words.begin(), corpus[i + 1].words.end());
    auto want = v.encode(corpus[i]).ids;
    const auto tail = v.encode(corpus[i + 1]).ids;
    want.insert(want.end(), tail.begin(), tail.end());
    CHECK(v.encode(both).ids == want);
  }
}

TEST_CASE("merge order decides the segmentation") {
  const std::vector<std::string> init{"a", "b", "c", std::string(kEndOfWord)};
  const auto ab_first = BpeVocab::from_merges(init, {{"a", "b"}, {"b", "c"}});
  const auto bc_first = BpeVocab::from_merges(init, {{"b", "c"}, {"a", "b"}});
  const auto x = ab_first.encode_word("abc");
  const auto y = bc_first.encode_word("abc");
  REQUIRE(x.size() == 3);
  REQUIRE(y.size() == 3);
  CHECK(ab_first.token(x[0]) == "ab");
  CHECK(bc_first.token(y[0]) == "a");
  CHECK(bc_first.token(y[1]) == "bc");
  CHECK_THROWS_AS(BpeVocab::from_merges(init, {{"ab", "c"}}), FormatError);
}

TEST_CASE("token tables are mutually inverse") {
  const auto corpus = wolab::testing::synthetic_sentences(300, 26);
  const auto v = train_bpe(corpus, 350);
  for (TokenId id = 0; id < static_cast<TokenId>(v.size()); ++id) CHECK(v.id_of(v.token(id)) == id);
  CHECK(v.id_of("no-such-token") == -1);
  CHECK(v.is_special(special::kMask));
  CHECK_FALSE(v.is_special(special::kCount));
}

TEST_CASE("vocabulary files round-trip and reject other versions") {
  TempDir dir("bpe");
  const auto corpus = wolab::testing::synthetic_sentences(200, 27);
  const auto v = train_bpe(corpus, 300);
  v.save(dir / "v.bpe");
  const auto back = BpeVocab::load(dir / "v.bpe");
  CHECK(back.checksum() == v.checksum());
  CHECK(back.merges() == v.merges());
  for (const auto& s : corpus) CHECK(back.encode(s).ids == v.encode(s).ids);

  std::string text = v.serialize();
  text.replace(text.find(" 1 "), 3, " 9 ");
  CHECK_THROWS_AS(BpeVocab::deserialize(text), FormatError);
  CHECK_THROWS_AS(BpeVocab::deserialize(""), FormatError);
  CHECK_THROWS_AS(BpeVocab::load(dir / "missing.bpe"), IoError);
}

}  // TEST_SUITE
