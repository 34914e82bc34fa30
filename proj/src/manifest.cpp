#include "wolab/manifest.hpp"

#include "wolab/common.hpp"

namespace wolab {

Manifest::Manifest(std::string command, std::vector<std::string> args, std::filesystem::path out_dir)
    : command_(std::move(command)),
      args_(std::move(args)),
      out_dir_(std::move(out_dir)),
      cwd_(std::filesystem::current_path().string()) {}

void Manifest::add_input(const std::filesystem::path& path) {
  inputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
}

void Manifest::add_output(const std::filesystem::path& path) {
  const auto rel = path.lexically_relative(out_dir_);
  const std::string name = rel.empty() || rel.string().starts_with("..") ? path.string() : rel.generic_string();
  outputs_.push_back({{"path", name}, {"sha256", sha256_file(path)}});
}

void Manifest::set_seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

void Manifest::set(const std::string& key, nlohmann::ordered_json value) { extra_[key] = std::move(value); }

nlohmann::ordered_json Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["tool"] = "wolab";
  j["version"] = kVersion;
  j["command"] = command_;
  j["args"] = args_;
  j["cwd"] = cwd_;
  j["seeds"] = seeds_;
  j["inputs"] = inputs_;
  j["outputs"] = outputs_;
  for (const auto& [k, v] : extra_.items()) j[k] = v;
  return j;
}

std::filesystem::path Manifest::path_for(const std::filesystem::path& out_dir, const std::string& command) {
  return out_dir / (command + ".manifest.json");
}

std::filesystem::path Manifest::write() const {
  const auto p = path_for(out_dir_, command_);
  write_file(p, to_json().dump(2) + "\n");
  return p;
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace wolab
