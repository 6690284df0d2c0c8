#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace texbridge {

// Flat key/value run configuration. Files are TOML-style:
//
//   # comment
//   [finetune]
//   steps = 200        # keys become "finetune.steps"
//   name = "baseline"
//
// Every key a stage consumes has a default supplied at the read site; the
// resolved (file + overrides + defaults) view is echoed for the run manifest so
// silent hyperparameters stay auditable. Reads of file keys are tracked so a
// run can reject misspelled keys.
class Config {
 public:
  Config() = default;
  static Config from_file(const std::string& path);    // ConfigError on syntax
  static Config from_string(const std::string& text, const std::string& origin = "<string>");

  // "section.key=value", as given on the command line
  void apply_override(const std::string& keyval);

  bool has(const std::string& key) const { return raw_.count(key) != 0; }

  int64_t get_int(const std::string& key, int64_t def);
  double get_double(const std::string& key, double def);
  bool get_bool(const std::string& key, bool def);
  std::string get_string(const std::string& key, const std::string& def);

  // canonical "key = value" lines, sorted, of everything consumed so far
  std::string resolved_echo() const;
  std::string resolved_hash() const;

  // same, restricted to "section.*" keys of the given sections
  std::string resolved_echo(const std::vector<std::string>& sections) const;

  // ConfigError naming any file/override key that was never consumed
  void require_consumed() const;

  // like require_consumed but only for keys under "section."; lets each
  // pipeline stage reject typos in its own namespace without claiming others
  void require_consumed_in(const std::string& section) const;

 private:
  std::string raw_or_mark(const std::string& key, bool* present);
  std::map<std::string, std::string> raw_;
  std::map<std::string, std::string> resolved_;
  std::set<std::string> consumed_;
};

}  // namespace texbridge
