#include "wolab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <unordered_set>

namespace wolab {

ZipfTable::ZipfTable(std::size_t n, double exponent, double offset) {
  cdf_.resize(n);
  double acc = 0;
  for (std::size_t r = 0; r < n; ++r) {
    acc += 1.0 / std::pow(static_cast<double>(r) + offset, exponent);
    cdf_[r] = acc;
  }
  for (auto& c : cdf_) c /= acc;
}

std::size_t ZipfTable::sample(Rng& rng) const {
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
}

namespace {

enum class VerbClass { Intransitive, Transitive, Ditransitive, Clausal };

struct WordList {
  std::vector<std::string> forms;
  ZipfTable table;
  const std::string& draw(Rng& rng) const { return forms[table.sample(rng)]; }
};

// Small weighted choice over a fixed list.
struct Choice {
  std::vector<std::string> items;
  std::vector<double> cdf;
  Choice(std::initializer_list<std::pair<const char*, double>> list) {
    double acc = 0;
    for (const auto& [w, p] : list) {
      items.emplace_back(w);
      acc += p;
      cdf.push_back(acc);
    }
    for (auto& c : cdf) c /= acc;
  }
  const std::string& draw(Rng& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto i = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    return items[std::min(i, items.size() - 1)];
  }
};

bool ends_with(const std::string& s, std::string_view suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

bool is_vowel(char c) { return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u'; }

std::string plural(const std::string& n) {
  if (ends_with(n, "s") || ends_with(n, "sh") || ends_with(n, "ch") || ends_with(n, "x")) return n + "es";
  if (n.size() > 1 && n.back() == 'y' && !is_vowel(n[n.size() - 2])) return n.substr(0, n.size() - 1) + "ies";
  return n + "s";
}

std::string past(const std::string& v) {
  if (v.back() == 'e') return v + "d";
  if (v.size() > 1 && v.back() == 'y' && !is_vowel(v[v.size() - 2])) return v.substr(0, v.size() - 1) + "ied";
  return v + "ed";
}

std::string third_person(const std::string& v) { return plural(v); }

std::string gerund(const std::string& v) {
  if (v.size() > 2 && v.back() == 'e' && v[v.size() - 2] != 'e') return v.substr(0, v.size() - 1) + "ing";
  return v + "ing";
}

std::string adverb_of(const std::string& a) {
  if (a.size() > 1 && a.back() == 'y') return a.substr(0, a.size() - 1) + "ily";
  if (ends_with(a, "le")) return a.substr(0, a.size() - 1) + "y";
  return a + "ly";
}

}  // namespace

struct SyntheticLanguage::Lexicon {
  WordList nouns, adjectives, names;
  std::vector<std::string> verb_stems;
  std::vector<VerbClass> verb_class;
  ZipfTable verb_table;
};

namespace {

const char* const kOnsets[] = {"b",  "c",  "d",  "f",  "g",  "h",  "j",  "k",  "l",  "m",  "n",  "p",  "r",
                               "s",  "t",  "v",  "w",  "y",  "z",  "br", "cr", "dr", "fr", "gr", "pr", "tr",
                               "bl", "cl", "fl", "gl", "pl", "sl", "st", "sp", "sk", "sm", "sn", "sh", "ch",
                               "th", "wh", "qu", "",   "",   ""};
const char* const kNuclei[] = {"a", "e", "i", "o", "u", "a", "e", "i", "o", "ai", "ea", "ee", "oo", "ou", "ie", "oa"};
const char* const kCodas[] = {"", "", "", "n", "r", "l", "s", "t", "m", "d", "ng", "nt", "st", "rt", "ck", "ll", "rd", "nd", "sh", "th"};

template <std::size_t N>
const char* pick(const char* const (&arr)[N], Rng& rng) {
  return arr[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

std::string make_stem(Rng& rng, std::size_t syllables) {
  std::string s;
  for (std::size_t i = 0; i < syllables; ++i) {
    s += pick(kOnsets, rng);
    s += pick(kNuclei, rng);
    if (i + 1 == syllables || std::bernoulli_distribution(0.3)(rng)) s += pick(kCodas, rng);
  }
  return s;
}

std::size_t syllables_for_rank(std::size_t rank, Rng& rng) {
  if (rank < 60) return 1;
  if (rank < 600) return std::uniform_int_distribution<std::size_t>(1, 2)(rng);
  return std::uniform_int_distribution<std::size_t>(2, 3)(rng);
}

const char* const kRealNouns[] = {"man",    "woman", "door",  "room",   "hand",  "time",   "way",    "day",   "house",
                                  "car",    "girl",  "boy",   "face",   "head",  "night",  "voice",  "world", "life",
                                  "father", "mother", "water", "light", "table", "window", "phone",  "friend", "place",
                                  "thing",  "word",  "bed",   "floor",  "wall",  "street", "city",   "moment", "arm",
                                  "body",   "heart", "dog",   "book",   "kitchen", "morning", "brother", "sister", "road"};
const char* const kRealVerbs[] = {"look", "turn",  "walk",  "want",  "need",  "open",  "close", "start", "call",
                                  "pull", "push",  "smile", "stare", "wait",  "reach", "laugh", "nod",   "move",
                                  "watch", "kiss", "touch", "pick",  "stop",  "help",  "love",  "ask",   "answer",
                                  "decide", "notice", "remember", "believe", "realize", "whisper", "shout", "try"};
const VerbClass kRealVerbClass[] = {
    VerbClass::Intransitive, VerbClass::Transitive, VerbClass::Intransitive, VerbClass::Transitive,
    VerbClass::Transitive,   VerbClass::Transitive, VerbClass::Transitive,   VerbClass::Transitive,
    VerbClass::Transitive,   VerbClass::Transitive, VerbClass::Intransitive, VerbClass::Intransitive,
    VerbClass::Intransitive, VerbClass::Transitive, VerbClass::Intransitive, VerbClass::Intransitive,
    VerbClass::Intransitive, VerbClass::Transitive, VerbClass::Transitive,   VerbClass::Transitive,
    VerbClass::Transitive,   VerbClass::Transitive, VerbClass::Transitive,   VerbClass::Ditransitive,
    VerbClass::Ditransitive, VerbClass::Ditransitive, VerbClass::Clausal,    VerbClass::Clausal,
    VerbClass::Clausal,      VerbClass::Clausal,    VerbClass::Clausal,      VerbClass::Clausal,
    VerbClass::Clausal,      VerbClass::Intransitive};
const char* const kRealAdjectives[] = {"good",  "small", "old",   "dark",   "cold",  "long",   "quiet", "soft",
                                       "warm",  "empty", "bright", "little", "young", "strange", "heavy", "slow",
                                       "quick", "sudden", "gentle", "happy", "angry", "tired",  "loud",  "sweet"};

const std::unordered_set<std::string>& reserved_words() {
  static const std::unordered_set<std::string> words = {
      "the", "a", "an", "this", "that", "these", "his", "her", "their", "my", "your", "its", "some", "every",
      "no", "i", "you", "he", "she", "we", "they", "it", "me", "him", "us", "them", "was", "were", "is",
      "would", "could", "will", "did", "might", "should", "can", "not", "in", "on", "at", "with", "from",
      "to", "into", "of", "for", "about", "under", "over", "behind", "after", "before", "through", "across",
      "toward", "against", "near", "without", "and", "but", "or", "because", "when", "while", "if", "although",
      "who", "which", "just", "still", "never", "always", "then", "again", "even", "very", "so", "too",
      "two", "three", "four", "five", "six", "ten", "here", "there", "now", "back", "away", "down", "up"};
  return words;
}

WordList make_word_list(std::vector<std::string> real, std::size_t generated, Rng& rng,
                        std::unordered_set<std::string>& used, double zipf) {
  WordList wl;
  for (auto& w : real) {
    used.insert(w);
    wl.forms.push_back(std::move(w));
  }
  while (wl.forms.size() < real.size() + generated) {
    const std::size_t rank = wl.forms.size();
    std::string stem = make_stem(rng, syllables_for_rank(rank, rng));
    if (stem.size() < 2 || used.count(stem) || reserved_words().count(stem)) continue;
    used.insert(stem);
    wl.forms.push_back(std::move(stem));
  }
  wl.table = ZipfTable(wl.forms.size(), zipf);
  return wl;
}

}  // namespace

SyntheticLanguage::SyntheticLanguage(SynthConfig config) : config_(config) {
  Rng rng(mix_seed(config.lexicon_seed, 17));
  auto lex = std::make_shared<Lexicon>();
  std::unordered_set<std::string> used(reserved_words().begin(), reserved_words().end());
  lex->nouns = make_word_list({std::begin(kRealNouns), std::end(kRealNouns)}, config.noun_stems, rng, used,
                              config.zipf_exponent);
  lex->adjectives = make_word_list({std::begin(kRealAdjectives), std::end(kRealAdjectives)}, config.adjective_stems,
                                   rng, used, config.zipf_exponent);
  lex->names = make_word_list({}, config.names, rng, used, config.zipf_exponent);
  WordList verbs = make_word_list({std::begin(kRealVerbs), std::end(kRealVerbs)}, config.verb_stems, rng, used,
                                  config.zipf_exponent);
  lex->verb_stems = verbs.forms;
  lex->verb_table = verbs.table;
  for (std::size_t i = 0; i < lex->verb_stems.size(); ++i) {
    if (i < std::size(kRealVerbClass)) {
      lex->verb_class.push_back(kRealVerbClass[i]);
      continue;
    }
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    lex->verb_class.push_back(u < 0.35   ? VerbClass::Intransitive
                              : u < 0.8  ? VerbClass::Transitive
                              : u < 0.86 ? VerbClass::Ditransitive
                                         : VerbClass::Clausal);
  }
  lex_ = std::move(lex);
}

namespace {

// Dependency subtree: left dependents (in surface order), the head word, right
// dependents (in surface order).
struct Node {
  std::string form;
  std::string rel;
  std::vector<Node> left;
  std::vector<Node> right;
};

void linearize(const Node& n, int head, DepSentence& out) {
  // The head's index is only known after its left dependents are placed, so
  // left subtrees are written first with a placeholder and patched.
  std::vector<std::size_t> left_roots;
  for (const auto& c : n.left) {
    const std::size_t before = out.words.size();
    linearize(c, -2, out);
    for (std::size_t i = before; i < out.words.size(); ++i) {
      if (out.heads[i] == -2) left_roots.push_back(i);
    }
  }
  const int self = static_cast<int>(out.words.size());
  out.words.push_back(n.form);
  out.heads.push_back(head);
  out.relations.push_back(n.rel);
  for (auto i : left_roots) out.heads[i] = self;
  for (const auto& c : n.right) linearize(c, self, out);
}

bool flip(Rng& rng, double p) { return std::bernoulli_distribution(p)(rng); }

class Builder {
 public:
  Builder(const SyntheticLanguage::Lexicon& lex, Rng& rng) : lex_(lex), rng_(rng) {}

  Node sentence() {
    Node root = clause(0, "root");
    static const Choice final_punct{{".", 0.85}, {"?", 0.07}, {"!", 0.08}};
    root.right.push_back(Node{final_punct.draw(rng_), "punct", {}, {}});
    return root;
  }

 private:
  struct NounPhrase {
    Node node;
    bool singular_third = false;
  };

  NounPhrase noun_phrase(int depth, bool nominative, const std::string& rel) {
    const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    if (r < 0.28) {
      static const Choice nom{{"he", 3}, {"she", 3}, {"i", 3}, {"they", 2}, {"you", 2}, {"we", 1}, {"it", 1.5}};
      static const Choice acc{{"him", 3}, {"her", 3}, {"me", 2.5}, {"them", 2}, {"you", 2}, {"us", 1}, {"it", 2}};
      const std::string& p = nominative ? nom.draw(rng_) : acc.draw(rng_);
      return {Node{p, rel, {}, {}}, p == "he" || p == "she" || p == "it"};
    }
    if (r < 0.40) {
      Node n{lex_.names.draw(rng_), rel, {}, {}};
      if (flip(rng_, 0.12)) n.right.push_back(Node{lex_.names.draw(rng_), "flat", {}, {}});
      return {std::move(n), true};
    }
    Node n;
    n.rel = rel;
    bool singular = !flip(rng_, 0.3);
    if (flip(rng_, 0.85)) {
      static const Choice det{{"the", 10}, {"a", 5}, {"his", 1.5}, {"her", 1.5}, {"their", 0.8}, {"my", 1},
                              {"this", 0.7}, {"that", 0.5}, {"some", 0.5}, {"every", 0.2}, {"no", 0.3},
                              {"your", 0.4}, {"its", 0.2}};
      const std::string& d = det.draw(rng_);
      if (d == "a" || d == "every") singular = true;
      n.left.push_back(Node{d, "det", {}, {}});
    } else if (flip(rng_, 0.25)) {
      static const Choice num{{"two", 4}, {"three", 3}, {"four", 1.5}, {"five", 1}, {"six", 0.5}, {"ten", 0.5}};
      n.left.push_back(Node{num.draw(rng_), "nummod", {}, {}});
      singular = false;
    }
    if (flip(rng_, 0.25)) {
      n.left.push_back(adjective());
      if (flip(rng_, 0.1)) n.left.insert(n.left.end() - 1, adjective());
    }
    if (flip(rng_, 0.06)) n.left.push_back(Node{lex_.nouns.draw(rng_), "compound", {}, {}});
    const std::string& stem = lex_.nouns.draw(rng_);
    n.form = singular ? stem : plural(stem);
    if (depth < 3 && flip(rng_, 0.12)) n.right.push_back(prepositional(depth + 1, "nmod"));
    if (depth < 2 && flip(rng_, 0.06)) n.right.push_back(relative_clause(depth + 1, singular));
    return {std::move(n), singular};
  }

  Node adjective() {
    Node a{lex_.adjectives.draw(rng_), "amod", {}, {}};
    if (flip(rng_, 0.1)) {
      static const Choice deg{{"very", 3}, {"so", 1}, {"too", 1}};
      a.left.push_back(Node{deg.draw(rng_), "advmod", {}, {}});
    }
    return a;
  }

  Node prepositional(int depth, const std::string& rel) {
    static const Choice adp{{"in", 8},     {"on", 5},      {"at", 5},    {"with", 6},    {"from", 3},
                            {"to", 6},     {"into", 2},    {"of", 6},    {"for", 3},     {"about", 1.5},
                            {"under", 0.6}, {"over", 0.8}, {"behind", 0.5}, {"after", 1}, {"before", 0.7},
                            {"through", 1}, {"across", 0.5}, {"toward", 0.5}, {"against", 0.4}, {"near", 0.4},
                            {"without", 0.5}};
    NounPhrase np = noun_phrase(depth, false, rel);
    np.node.left.insert(np.node.left.begin(), Node{adp.draw(rng_), "case", {}, {}});
    return std::move(np.node);
  }

  Node relative_clause(int depth, bool singular) {
    static const Choice rel{{"that", 3}, {"who", 2}, {"which", 1}};
    Node subj{rel.draw(rng_), "nsubj", {}, {}};
    return predicate(depth, "acl:relcl", std::move(subj), singular);
  }

  Node adverb() {
    if (flip(rng_, 0.5)) {
      static const Choice adv{{"just", 3}, {"still", 2}, {"never", 2}, {"always", 1.5}, {"then", 3},
                              {"again", 1.5}, {"even", 1}, {"now", 1.5}, {"back", 1.5}, {"away", 1},
                              {"down", 1}, {"up", 1}, {"here", 1}, {"there", 1}};
      return Node{adv.draw(rng_), "advmod", {}, {}};
    }
    return Node{adverb_of(lex_.adjectives.draw(rng_)), "advmod", {}, {}};
  }

  Node clause(int depth, const std::string& rel) {
    NounPhrase subj = noun_phrase(depth, true, "nsubj");
    return predicate(depth, rel, std::move(subj.node), subj.singular_third);
  }

  // Verb-headed clause with the given subject already built.
  Node predicate(int depth, const std::string& rel, Node subject, bool singular_subject) {
    const std::size_t vi = lex_.verb_table.sample(rng_);
    const std::string& stem = lex_.verb_stems[vi];
    VerbClass vc = lex_.verb_class[vi];
    Node v;
    v.rel = rel;
    v.left.push_back(std::move(subject));

    const double t = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    if (t < 0.55) {
      v.form = past(stem);
    } else if (t < 0.75) {
      v.form = singular_subject ? third_person(stem) : stem;
    } else if (t < 0.87) {
      static const Choice modal{{"would", 3}, {"could", 3}, {"will", 1.5}, {"did", 2}, {"might", 1},
                                {"should", 1}, {"can", 1.5}};
      v.left.push_back(Node{modal.draw(rng_), "aux", {}, {}});
      if (flip(rng_, 0.3)) v.left.push_back(Node{"not", "advmod", {}, {}});
      v.form = stem;
    } else {
      v.left.push_back(Node{singular_subject ? "was" : "were", "aux", {}, {}});
      v.form = gerund(stem);
    }
    if (flip(rng_, 0.08)) v.left.push_back(adverb());

    if (vc == VerbClass::Clausal && depth >= 2) vc = VerbClass::Transitive;
    switch (vc) {
      case VerbClass::Intransitive:
        break;
      case VerbClass::Transitive:
        if (depth < 2 && flip(rng_, 0.1)) {
          Node x;
          x.rel = "xcomp";
          x.form = lex_.verb_stems[lex_.verb_table.sample(rng_)];
          x.left.push_back(Node{"to", "mark", {}, {}});
          if (flip(rng_, 0.5)) x.right.push_back(noun_phrase(depth + 1, false, "obj").node);
          v.right.push_back(std::move(x));
        } else {
          v.right.push_back(noun_phrase(depth + 1, false, "obj").node);
        }
        break;
      case VerbClass::Ditransitive:
        v.right.push_back(noun_phrase(depth + 1, false, "iobj").node);
        v.right.push_back(noun_phrase(depth + 1, false, "obj").node);
        break;
      case VerbClass::Clausal: {
        Node c = clause(depth + 1, "ccomp");
        if (flip(rng_, 0.6)) c.left.insert(c.left.begin(), Node{"that", "mark", {}, {}});
        v.right.push_back(std::move(c));
        break;
      }
    }

    const double pp = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    const int n_obl = depth >= 2 ? (pp < 0.2 ? 1 : 0) : (pp < 0.55 ? 0 : pp < 0.88 ? 1 : 2);
    for (int i = 0; i < n_obl; ++i) v.right.push_back(prepositional(depth + 1, "obl"));
    if (flip(rng_, 0.1)) v.right.push_back(adverb());

    if (depth == 0 && flip(rng_, 0.12)) {
      static const Choice sconj{{"because", 2}, {"when", 3}, {"while", 1.5}, {"if", 2}, {"although", 0.5}};
      Node sub = clause(depth + 1, "advcl");
      sub.left.insert(sub.left.begin(), Node{sconj.draw(rng_), "mark", {}, {}});
      if (flip(rng_, 0.3)) {
        sub.right.push_back(Node{",", "punct", {}, {}});
        v.left.insert(v.left.begin(), std::move(sub));
      } else {
        v.right.push_back(std::move(sub));
      }
    }
    if (depth == 0 && flip(rng_, 0.12)) {
      static const Choice cc{{"and", 3}, {"but", 2}, {"or", 0.4}};
      Node conj = clause(depth + 1, "conj");
      if (flip(rng_, 0.4)) conj.left.insert(conj.left.begin(), Node{",", "punct", {}, {}});
      conj.left.insert(conj.left.begin() + (conj.left.empty() || conj.left.front().form != "," ? 0 : 1),
                       Node{cc.draw(rng_), "cc", {}, {}});
      v.right.push_back(std::move(conj));
    }
    return v;
  }

  const SyntheticLanguage::Lexicon& lex_;
  Rng& rng_;
};

}  // namespace

DepSentence SyntheticLanguage::sample(Rng& rng) const {
  for (;;) {
    Builder b(*lex_, rng);
    const Node root = b.sentence();
    DepSentence s;
    linearize(root, DepSentence::kRoot, s);
    if (s.size() > config_.max_words) continue;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      if (s.words[i] == "a" && is_vowel(s.words[i + 1][0])) s.words[i] = "an";
    }
    return s;
  }
}

std::vector<DepSentence> SyntheticLanguage::generate(std::size_t count, std::uint64_t seed) const {
  Rng rng(mix_seed(seed, 101));
  std::vector<DepSentence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto s = sample(rng);
    s.id = "synth-" + std::to_string(seed) + "-" + std::to_string(i + 1);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<Sentence> to_sentences(std::span<const DepSentence> treebank) {
  std::vector<Sentence> out;
  out.reserve(treebank.size());
  for (std::size_t i = 0; i < treebank.size(); ++i) out.push_back(Sentence{treebank[i].words, i});
  return out;
}

std::string sentences_to_text(std::span<const Sentence> sentences) {
  std::string out;
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.words.size(); ++i) {
      if (i) out += ' ';
      out += s.words[i];
    }
    out += '\n';
  }
  return out;
}

}  // namespace wolab
