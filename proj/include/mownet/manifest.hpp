#pragma once

// Run manifest: a flat `key = value` text file. The config entries use the
// command-line flag names without dashes, so a manifest can be passed back
// as a config file to repeat the run.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mownet/errors.hpp"

namespace mownet {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline void check_entry(const std::string& key, const std::string& value) {
  if (key.empty() || trim(key) != key || key.find_first_of("=#\n") != std::string::npos || key.front() == '[') {
    throw ContractError("manifest: invalid key '" + key + "'");
  }
  if (trim(value) != value || value.find('\n') != std::string::npos) {
    throw ContractError("manifest: value of '" + key + "' has surrounding whitespace or a newline");
  }
}

}  // namespace detail

// Ordered key/value lines; '#' starts a comment line. Duplicate keys are an error.
inline KeyValues parse_key_values(const std::string& text) {
  KeyValues out;
  std::size_t offset = 0;
  while (offset < text.size()) {
    auto end = text.find('\n', offset);
    if (end == std::string::npos) end = text.size();
    const auto line = detail::trim(text.substr(offset, end - offset));
    if (!line.empty() && line.front() != '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("expected 'key = value'", offset);
      auto key = detail::trim(line.substr(0, eq));
      auto value = detail::trim(line.substr(eq + 1));
      if (key.empty()) throw FormatError("empty key", offset);
      for (const auto& [k, v] : out)
        if (k == key) throw FormatError("duplicate key '" + key + "'", offset);
      out.emplace_back(std::move(key), std::move(value));
    }
    offset = end + 1;
  }
  return out;
}

inline KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string mode;
  KeyValues config;     // flag name (without dashes) -> value
  KeyValues artifacts;  // artifact name -> path
  std::string started;
  std::string finished;

  void set(const std::string& key, const std::string& value) {
    if (is_record_key(key)) throw ContractError("manifest: '" + key + "' is reserved");
    upsert(config, key, value);
  }
  void add_artifact(const std::string& name, const std::string& path) { upsert(artifacts, name, path); }

  std::optional<std::string> get(const std::string& key) const {
    for (const auto& [k, v] : config)
      if (k == key) return v;
    return std::nullopt;
  }

  std::string to_text() const {
    std::string out = "# mownet run manifest\n";
    auto line = [&](const std::string& k, const std::string& v) {
      detail::check_entry(k, v);
      out += k + " = " + v + "\n";
    };
    line("mode", mode);
    line("started", started);
    line("finished", finished);
    for (const auto& [k, v] : config) line(k, v);
    for (const auto& [k, v] : artifacts) line("artifact." + k, v);
    return out;
  }

  static RunManifest from_text(const std::string& text) {
    RunManifest m;
    for (auto& [k, v] : parse_key_values(text)) {
      if (k == "mode") {
        m.mode = v;
      } else if (k == "started") {
        m.started = v;
      } else if (k == "finished") {
        m.finished = v;
      } else if (k.rfind("artifact.", 0) == 0) {
        m.artifacts.emplace_back(k.substr(9), v);
      } else {
        m.config.emplace_back(k, v);
      }
    }
    return m;
  }

  // Keys that describe a run rather than configure it.
  static bool is_record_key(const std::string& key) {
    return key == "mode" || key == "started" || key == "finished" || key.rfind("artifact.", 0) == 0;
  }

  bool operator==(const RunManifest&) const = default;

 private:
  static void upsert(KeyValues& kv, const std::string& key, const std::string& value) {
    detail::check_entry(key, value);
    for (auto& [k, v] : kv) {
      if (k == key) {
        v = value;
        return;
      }
    }
    kv.emplace_back(key, value);
  }
};

inline void save_manifest(const RunManifest& m, const std::filesystem::path& path) {
  const auto text = m.to_text();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << text;
  if (!out) throw IoError("failed writing manifest " + path.string());
}

inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return RunManifest::from_text(ss.str());
}

// Creates a fresh directory under `root` named `<prefix>-<n>` with the first
// unused n. Existing directories are never reused.
inline std::filesystem::path create_run_directory(const std::filesystem::path& root, const std::string& prefix) {
  std::filesystem::create_directories(root);
  for (int n = 1;; ++n) {
    auto dir = root / (prefix + "-" + std::to_string(n));
    if (std::filesystem::exists(dir)) continue;
    if (std::filesystem::create_directory(dir)) return dir;
  }
}

// Uses `dir` as a run directory; refuses one that already holds files.
inline std::filesystem::path claim_run_directory(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir)) {
    if (!std::filesystem::is_directory(dir)) throw IoError(dir.string() + " exists and is not a directory");
    if (!std::filesystem::is_empty(dir)) throw IoError("run directory " + dir.string() + " is not empty; runs are never overwritten");
  } else {
    std::filesystem::create_directories(dir);
  }
  return dir;
}

}  // namespace mownet
