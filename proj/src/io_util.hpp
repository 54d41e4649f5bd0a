#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "headprune/experiment.hpp"

namespace headprune::io {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput("missing input: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes next to the target and renames, so readers never see half a file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void require_file(const std::filesystem::path& path, const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw MissingInput("missing input: " + path.string() + " (run `" + producer + "` first)");
}

}  // namespace headprune::io
