#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace wolab {

inline constexpr const char* kVersion = "1.0.0";

/// Record of one CLI invocation: the arguments needed to rerun it plus the
/// checksums of everything it read and wrote. Output paths are stored
/// relative to the output directory.
class Manifest {
 public:
  Manifest(std::string command, std::vector<std::string> args, std::filesystem::path out_dir);

  void add_input(const std::filesystem::path& path);
  void add_output(const std::filesystem::path& path);
  void set_seed(const std::string& name, std::uint64_t value);
  void set(const std::string& key, nlohmann::ordered_json value);

  const std::filesystem::path& out_dir() const { return out_dir_; }
  nlohmann::ordered_json to_json() const;
  /// Writes <out_dir>/<command>.manifest.json and returns its path.
  std::filesystem::path write() const;

  static std::filesystem::path path_for(const std::filesystem::path& out_dir, const std::string& command);

 private:
  std::string command_;
  std::vector<std::string> args_;
  std::filesystem::path out_dir_;
  std::string cwd_;
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json seeds_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json extra_ = nlohmann::ordered_json::object();
};

nlohmann::json read_manifest(const std::filesystem::path& path);

}  // namespace wolab
