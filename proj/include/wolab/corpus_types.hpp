#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace wolab {

/// One whitespace-tokenized line of the input corpus.
struct Sentence {
  std::vector<std::string> words;
  std::uint64_t id = 0;
};

}  // namespace wolab
