#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace vividforge {

// Flat dotted-key configuration: defaults live in code, an optional config
// file overrides them, and command-line flags override both. Unknown keys are
// rejected so typos fail loudly instead of silently running defaults. Every
// command writes the resolved tree next to its outputs, prefixed by a stable
// hash that tags the run (ablation switches change the tag).
struct RunConfig {
  std::map<std::string, std::string> values;

  // Every key the tools understand, with its default value.
  static RunConfig defaults();
  static bool is_known_key(const std::string& key);

  // Applies "key = value" lines ('#' comments and blank lines allowed).
  void load_file(const std::string& path);
  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, int64_t v);
  void set_double(const std::string& key, double v);
  void set_bool(const std::string& key, bool v);

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  // Sorted "key = value" lines.
  std::string serialize() const;
  // FNV-1a of the serialized tree: the run tag.
  uint64_t hash() const;
  // serialize() preceded by "# hash <16 hex digits>".
  void write_snapshot(const std::string& path) const;
};

}  // namespace vividforge
