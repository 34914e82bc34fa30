#include <cmath>
#include <map>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "wolab/common.hpp"
#include "wolab/treebank.hpp"

using namespace wolab;
using wolab::testing::TempDir;

namespace {

DepSentence make(std::vector<int> heads, std::vector<std::string> rels = {}) {
  DepSentence s;
  for (std::size_t i = 0; i < heads.size(); ++i) s.words.push_back("w" + std::to_string(i));
  s.heads = std::move(heads);
  s.relations = rels.empty() ? std::vector<std::string>(s.words.size(), "dep") : std::move(rels);
  return s;
}

std::string conllu_line(int id, const std::string& form, int head, const std::string& rel) {
  return std::to_string(id) + "\t" + form + "\t_\t_\t_\t_\t" + std::to_string(head) + "\t" + rel + "\t_\t_\n";
}

}  // namespace

TEST_SUITE("treebank") {

TEST_CASE("two-word sentence") {
  const std::string text = "# sent_id = s1\n" + conllu_line(1, "He", 2, "nsubj") + conllu_line(2, "runs", 0, "root") + "\n";
  const auto tb = parse_conllu_text(text);
  REQUIRE(tb.size() == 1);
  CHECK(tb[0].id == "s1");
  CHECK(tb[0].words == std::vector<std::string>{"He", "runs"});
  CHECK(tb[0].heads == std::vector<int>{1, DepSentence::kRoot});
  CHECK(tb[0].relations == std::vector<std::string>{"nsubj", "root"});
}

TEST_CASE("comment-only input yields no sentences") {
  CHECK(parse_conllu_text("# a comment\n# another\n\n").empty());
  CHECK(parse_conllu_text("").empty());
}

TEST_CASE("multiword tokens and empty nodes are skipped") {
  const std::string text = "1-2\tdon't\t_\t_\t_\t_\t_\t_\t_\t_\n" + conllu_line(1, "do", 0, "root") +
                           conllu_line(2, "n't", 1, "advmod") + "2.1\tx\t_\t_\t_\t_\t_\t_\t_\t_\n\n";
  const auto tb = parse_conllu_text(text);
  REQUIRE(tb.size() == 1);
  CHECK(tb[0].words == std::vector<std::string>{"do", "n't"});
}

TEST_CASE("cyclic heads name the sentence") {
  const std::string text = "# sent_id = loop7\n" + conllu_line(1, "a", 2, "dep") + conllu_line(2, "b", 1, "dep") + "\n";
  try {
    parse_conllu_text(text);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("loop7") != std::string::npos);
  }
  const std::string oob = conllu_line(1, "a", 5, "dep") + "\n";
  CHECK_THROWS_AS(parse_conllu_text(oob), FormatError);
  CHECK_THROWS_AS(parse_conllu_text("1\ta\t_\n\n"), FormatError);
}

TEST_CASE("validate_tree") {
  CHECK_NOTHROW(validate_tree(make({1, DepSentence::kRoot}), "t"));
  CHECK_THROWS_AS(validate_tree(make({0, DepSentence::kRoot}), "t"), FormatError);  // self-loop
  CHECK_THROWS_AS(validate_tree(make({1, 0}), "t"), FormatError);
}

TEST_CASE("token count matches a line-counting oracle") {
  const auto tb = wolab::testing::language().generate(100, 31);
  const std::string text = to_conllu(tb);
  std::size_t oracle = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto id = line.substr(0, line.find('\t'));
    if (id.find_first_not_of("0123456789") == std::string::npos) ++oracle;
  }
  TempDir dir("tb");
  write_file(dir / "t.conllu", text);
  const auto back = parse_conllu(dir / "t.conllu");
  std::size_t tokens = 0;
  for (const auto& s : back) tokens += s.size();
  CHECK(back.size() == 100);
  CHECK(tokens == oracle);
  for (std::size_t i = 0; i < tb.size(); ++i) {
    CHECK(back[i].words == tb[i].words);
    CHECK(back[i].heads == tb[i].heads);
  }
}

TEST_CASE("length filter is inclusive") {
  std::vector<DepSentence> tb;
  for (std::size_t n : {30u, 31u, 5u, 40u}) {
    std::vector<int> heads(n, 0);
    heads[0] = DepSentence::kRoot;
    tb.push_back(make(heads));
  }
  const auto kept = filter_max_len(tb, 30);
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].size() == 30);
  CHECK(kept[1].size() == 5);
}

TEST_CASE("length bins") {
  CHECK(length_bin(1) == 0);
  CHECK(length_bin(4) == 3);
  CHECK(length_bin(5) == 4);
  CHECK(length_bin(17) == 4);
}

TEST_CASE("histogram of a single length-1 dependency") {
  const std::vector<DepSentence> tb{make({1, DepSentence::kRoot}, {"nsubj", "root"})};
  const auto h = dependency_length_histogram(tb);
  REQUIRE(h.frequency.count("nsubj"));
  CHECK(h.frequency.at("nsubj")[0] == doctest::Approx(1.0));
  CHECK(h.frequency.count("root") == 0);
}

TEST_CASE("histogram of lengths 1, 1 and 6") {
  // 8 words: words 0 and 2 attach at distance 1 to word 1; word 7 attaches at distance 6.
  std::vector<int> heads{1, DepSentence::kRoot, 1, 1, 1, 1, 1, 1};
  std::vector<std::string> rels{"amod", "root", "amod", "x", "x", "x", "x", "amod"};
  const std::vector<DepSentence> tb{make(heads, rels)};
  const auto h = dependency_length_histogram(tb, HistogramNormalization::PerRelation);
  const auto& f = h.frequency.at("amod");
  CHECK(f[0] == doctest::Approx(2.0 / 3.0));
  CHECK(f[4] == doctest::Approx(1.0 / 3.0));
  CHECK(f[1] + f[2] + f[3] == doctest::Approx(0.0));
}

TEST_CASE("per-bin frequencies sum to one over relations") {
  const auto tb = wolab::testing::language().generate(500, 32);
  const auto h = dependency_length_histogram(tb);
  std::map<std::string, std::array<std::size_t, kLengthBins>> oracle;
  std::size_t counted = 0, non_root = 0;
  for (const auto& s : tb) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.heads[i] == DepSentence::kRoot) continue;
      ++non_root;
      const std::size_t len = static_cast<std::size_t>(std::abs(static_cast<int>(i) - s.heads[i]));
      oracle[s.relations[i]][std::min<std::size_t>(len, 5) - 1]++;
    }
  }
  CHECK(h.counts == oracle);
  for (std::size_t b = 0; b < kLengthBins; ++b) {
    double sum = 0;
    for (const auto& [rel, f] : h.frequency) sum += f[b];
    CHECK(sum == doctest::Approx(1.0));
  }
  for (const auto& [rel, c] : h.counts)
    for (auto v : c) counted += v;
  CHECK(counted == non_root);
  CHECK(h.to_csv().rfind("relation,bin,frequency\n", 0) == 0);
}

TEST_CASE("synthetic treebanks are valid projective trees") {
  const auto tb = wolab::testing::language().generate(300, 33);
  for (const auto& s : tb) {
    CHECK_NOTHROW(validate_tree(s, s.id));
    int roots = 0;
    for (int h : s.heads) roots += h == DepSentence::kRoot;
    CHECK(roots == 1);
    // No crossing arcs.
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.heads[i] == DepSentence::kRoot) continue;
      const auto a = std::minmax<int>(static_cast<int>(i), s.heads[i]);
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (s.heads[j] == DepSentence::kRoot) continue;
        const auto b = std::minmax<int>(static_cast<int>(j), s.heads[j]);
        const bool cross = (a.first < b.first && b.first < a.second && a.second < b.second);
        CHECK_FALSE(cross);
      }
    }
  }
  CHECK(wolab::testing::language().generate(50, 1)[7].words == wolab::testing::language().generate(50, 1)[7].words);
}

}  // TEST_SUITE
