// Copyright 2026 The HFUS Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Run configuration: flat "key = value" text grouped in [sections], one per
// module. Unknown sections or keys are rejected. The same keys double as
// command-line flags (underscores become dashes).
//
//   [model]
//   variant = ghif_vsp
//   widths = 16,32,64

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hfus/error.hpp"
#include "hfus/synthetic.hpp"
#include "hfus/training.hpp"

namespace hfus {

struct RunConfig {
  // [data]
  std::string manifest;
  std::size_t studies = 200;
  std::size_t min_images = 1;
  std::size_t max_images = kMaxStudyImages;
  ConfounderMode confounder = ConfounderMode::off;
  std::uint64_t data_seed = 0;
  // [split]
  int folds = 5;
  int fold = 0;
  std::uint64_t split_seed = 0;
  // [model] and [training] and [augmentation]
  TrainConfig train;
  // [output]
  std::string out;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline std::string join_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <class T>
T parse_unsigned(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw DomainError("config: " + key + " expects a non-negative integer, got '" + v + "'");
  }
  try {
    return static_cast<T>(std::stoull(v));
  } catch (const std::out_of_range&) {
    throw DomainError("config: " + key + " is out of range");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  int out = 0;
  try {
    out = std::stoi(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw DomainError("config: " + key + " expects an integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw DomainError("config: " + key + " expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw DomainError("config: " + key + " expects true|false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_unsigned<std::size_t>(key, trim(item)));
  if (out.empty()) throw DomainError("config: " + key + " expects a comma-separated list");
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct ConfigKey {
  const char* section;
  const char* key;
};

}  // namespace detail

// Every accepted key, in echo order.
inline const std::vector<detail::ConfigKey>& config_keys() {
  static const std::vector<detail::ConfigKey> keys{
      {"data", "manifest"},        {"data", "studies"},          {"data", "min_images"},
      {"data", "max_images"},      {"data", "confounder"},       {"data", "data_seed"},
      {"split", "folds"},          {"split", "fold"},            {"split", "split_seed"},
      {"model", "variant"},        {"model", "norm"},            {"model", "input_size"},
      {"model", "widths"},         {"model", "strides"},         {"training", "lr"},
      {"training", "epochs"},      {"training", "batch_size"},   {"training", "seed"},
      {"training", "augment"},     {"augmentation", "brightness"}, {"augmentation", "contrast_min"},
      {"augmentation", "contrast_max"}, {"augmentation", "rotation_deg"}, {"augmentation", "scale_min"},
      {"augmentation", "scale_max"}, {"output", "out"}};
  return keys;
}

// Section owning `key`, or empty if the key is unknown.
inline std::string config_section(const std::string& key) {
  for (const auto& k : config_keys())
    if (key == k.key) return k.section;
  return "";
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  const std::string& v = value;
  TrainConfig& t = c.train;
  if (key == "manifest") c.manifest = v;
  else if (key == "studies") c.studies = parse_unsigned<std::size_t>(key, v);
  else if (key == "min_images") c.min_images = parse_unsigned<std::size_t>(key, v);
  else if (key == "max_images") c.max_images = parse_unsigned<std::size_t>(key, v);
  else if (key == "confounder") c.confounder = parse_confounder(v);
  else if (key == "data_seed") c.data_seed = parse_unsigned<std::uint64_t>(key, v);
  else if (key == "folds") c.folds = parse_int(key, v);
  else if (key == "fold") c.fold = parse_int(key, v);
  else if (key == "split_seed") c.split_seed = parse_unsigned<std::uint64_t>(key, v);
  else if (key == "variant") t.variant = parse_variant(v);
  else if (key == "norm") t.norm = parse_norm_kind(v);
  else if (key == "input_size") {
    const auto x = v.find('x');
    t.input_rows = parse_unsigned<std::size_t>(key, x == std::string::npos ? v : v.substr(0, x));
    t.input_cols = x == std::string::npos ? t.input_rows : parse_unsigned<std::size_t>(key, v.substr(x + 1));
  } else if (key == "widths") t.widths = parse_list(key, v);
  else if (key == "strides") t.strides = parse_list(key, v);
  else if (key == "lr") t.lr = parse_double(key, v);
  else if (key == "epochs") t.epochs = parse_int(key, v);
  else if (key == "batch_size") t.batch_size = parse_int(key, v);
  else if (key == "seed") t.seed = parse_unsigned<std::uint64_t>(key, v);
  else if (key == "augment") t.augment = parse_bool(key, v);
  else if (key == "brightness") t.augmentation.brightness = parse_double(key, v);
  else if (key == "contrast_min") t.augmentation.contrast_min = parse_double(key, v);
  else if (key == "contrast_max") t.augmentation.contrast_max = parse_double(key, v);
  else if (key == "rotation_deg") t.augmentation.rotation_deg = parse_double(key, v);
  else if (key == "scale_min") t.augmentation.scale_min = parse_double(key, v);
  else if (key == "scale_max") t.augmentation.scale_max = parse_double(key, v);
  else if (key == "out") c.out = v;
  else throw DomainError("config: unknown key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  using detail::format_double;
  const TrainConfig& t = c.train;
  if (key == "manifest") return c.manifest;
  if (key == "studies") return std::to_string(c.studies);
  if (key == "min_images") return std::to_string(c.min_images);
  if (key == "max_images") return std::to_string(c.max_images);
  if (key == "confounder") return to_string(c.confounder);
  if (key == "data_seed") return std::to_string(c.data_seed);
  if (key == "folds") return std::to_string(c.folds);
  if (key == "fold") return std::to_string(c.fold);
  if (key == "split_seed") return std::to_string(c.split_seed);
  if (key == "variant") return to_string(t.variant);
  if (key == "norm") return to_string(t.norm);
  if (key == "input_size") return std::to_string(t.input_rows) + "x" + std::to_string(t.input_cols);
  if (key == "widths") return detail::join_list(t.widths);
  if (key == "strides") return detail::join_list(t.strides);
  if (key == "lr") return format_double(t.lr);
  if (key == "epochs") return std::to_string(t.epochs);
  if (key == "batch_size") return std::to_string(t.batch_size);
  if (key == "seed") return std::to_string(t.seed);
  if (key == "augment") return t.augment ? "true" : "false";
  if (key == "brightness") return format_double(t.augmentation.brightness);
  if (key == "contrast_min") return format_double(t.augmentation.contrast_min);
  if (key == "contrast_max") return format_double(t.augmentation.contrast_max);
  if (key == "rotation_deg") return format_double(t.augmentation.rotation_deg);
  if (key == "scale_min") return format_double(t.augmentation.scale_min);
  if (key == "scale_max") return format_double(t.augmentation.scale_max);
  if (key == "out") return c.out;
  throw DomainError("config: unknown key '" + key + "'");
}

// Applies a config text on top of `c`. Blank lines and lines starting with
// '#' or ';' are ignored. Keys that were set are added to `seen`.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config",
                              std::set<std::string>* seen = nullptr) {
  std::istringstream in(text);
  std::string line, section;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string s = detail::trim(line);
    const std::string where = origin + ":" + std::to_string(line_no);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw FormatError(where + ": malformed section header");
      section = detail::trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const auto& k : config_keys()) known |= section == k.section;
      if (!known) throw DomainError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw FormatError(where + ": expected key = value");
    const std::string key = detail::trim(s.substr(0, eq)), value = detail::trim(s.substr(eq + 1));
    const std::string owner = config_section(key);
    if (owner.empty()) throw DomainError(where + ": unknown key '" + key + "'");
    if (section.empty()) throw FormatError(where + ": key '" + key + "' outside a section");
    if (owner != section) throw DomainError(where + ": key '" + key + "' belongs in [" + owner + "], not [" + section + "]");
    try {
      set_config_value(c, key, value);
      if (seen) seen->insert(key);
    } catch (const DomainError& e) {
      throw DomainError(where + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& c, const std::filesystem::path& path, std::set<std::string>* seen = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str(), path.string(), seen);
}

// Every key in section order; parses back to the same configuration.
inline std::string config_to_text(const RunConfig& c) {
  std::string out, section;
  for (const auto& k : config_keys()) {
    if (section != k.section) {
      section = k.section;
      out += (out.empty() ? "" : "\n") + std::string("[") + section + "]\n";
    }
    out += std::string(k.key) + " = " + get_config_value(c, k.key) + "\n";
  }
  return out;
}

}  // namespace hfus
