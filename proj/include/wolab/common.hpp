#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace wolab {

/// Base class for every error raised by the library. `kind()` is a short
/// machine-readable tag that the CLI prints verbatim.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct FormatError : Error {
  explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& m) : Error("invalid_argument", m) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

/// The single generator type used everywhere. Each worker owns its own.
using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a stream tag.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

bool is_valid_utf8(std::string_view s);

/// Splits a UTF-8 string into code points (each as its byte string).
std::vector<std::string> utf8_chars(std::string_view s);

std::vector<std::string> split_whitespace(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

/// Hex SHA-256 of a byte string / a file's contents.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Runs fn(i) for i in [0, n) over `workers` threads with static contiguous
/// partitioning. workers <= 1 runs inline, in order.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

/// Shortest representation that round-trips through strtod.
std::string format_double(double v);

}  // namespace wolab
