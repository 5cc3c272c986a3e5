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

// HFUS1 checkpoint files.
//
//   "HFUS1"  u64 LE manifest length  manifest text  payload
//
// The manifest is newline separated:
//   config key=value key=value ...
//   tensor <name> <d0,d1,...> <byte offset into payload>
// The payload holds every tensor as little-endian IEEE-754 doubles,
// row-major, in manifest order.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hfus/error.hpp"
#include "hfus/model.hpp"

namespace hfus {

inline constexpr char kCheckpointMagic[] = "HFUS1";
inline constexpr std::size_t kCheckpointMagicSize = 5;

struct Checkpoint {
  FibrosisModel model;
  // Free-form key=value record stored next to the architecture keys (fold,
  // seed, ...). Keys and values must not contain whitespace or '='.
  std::map<std::string, std::string> metadata;
};

namespace detail {

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

inline std::vector<std::size_t> split_sizes(const std::string& s, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
      throw FormatError("checkpoint: malformed " + what + " '" + s + "'");
    }
    out.push_back(std::stoull(item));
  }
  if (out.empty()) throw FormatError("checkpoint: empty " + what);
  return out;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

inline void check_token(const std::string& s, const std::string& what) {
  if (s.empty() || s.find_first_of(" \t\n\r=") != std::string::npos) {
    throw DomainError("checkpoint: invalid " + what + " '" + s + "'");
  }
}

// Named tensors in file order: parameters, then batch-norm running
// statistics for each stage.
inline std::vector<std::pair<std::string, Tensor>> checkpoint_tensors(const FibrosisModel& model) {
  auto out = model.named_parameters();
  const auto& stages = model.stages();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (const BatchNormState* st = stages[s].norm.state()) {
      const std::string prefix = "stage" + std::to_string(s + 1) + ".norm.";
      const std::size_t c = st->running_mean.size();
      out.emplace_back(prefix + "running_mean", Tensor({c}, st->running_mean));
      out.emplace_back(prefix + "running_var", Tensor({c}, st->running_var));
    }
  }
  return out;
}

}  // namespace detail

inline std::string checkpoint_bytes(const FibrosisModel& model,
                                    const std::map<std::string, std::string>& metadata = {}) {
  const BackboneConfig& cfg = model.config();
  std::string manifest = "config variant=" + std::string(to_string(model.variant())) +
                         " norm=" + to_string(cfg.norm) + " vsp=" + (cfg.vsp_enabled ? "1" : "0") +
                         " input=" + std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols) +
                         " widths=" + detail::join_sizes(cfg.widths) + " strides=" + detail::join_sizes(cfg.strides);
  for (const auto& [k, v] : metadata) {
    detail::check_token(k, "metadata key");
    detail::check_token(v, "metadata value");
    if (k == "variant" || k == "norm" || k == "vsp" || k == "input" || k == "widths" || k == "strides") {
      throw DomainError("checkpoint: metadata key '" + k + "' is reserved");
    }
    manifest += " " + k + "=" + v;
  }
  manifest += "\n";
  std::string payload;
  for (const auto& [name, t] : detail::checkpoint_tensors(model)) {
    manifest += "tensor " + name + " " + detail::join_sizes(t.shape()) + " " + std::to_string(payload.size()) + "\n";
    for (double v : t.values()) detail::put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }
  std::string out(kCheckpointMagic, kCheckpointMagicSize);
  detail::put_u64(out, manifest.size());
  return out + manifest + payload;
}

inline void save_checkpoint(const std::filesystem::path& path, const FibrosisModel& model,
                            const std::map<std::string, std::string>& metadata = {}) {
  const std::string bytes = checkpoint_bytes(model, metadata);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint " + path.string());
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::size_t head = kCheckpointMagicSize + 8;
  if (bytes.size() < head || bytes.compare(0, kCheckpointMagicSize, kCheckpointMagic) != 0) {
    throw FormatError("checkpoint: missing HFUS1 magic");
  }
  const std::uint64_t mlen = detail::get_u64(bytes, kCheckpointMagicSize);
  if (mlen > bytes.size() - head) throw FormatError("checkpoint: manifest length exceeds file size");
  std::istringstream manifest(bytes.substr(head, mlen));
  const std::size_t payload_at = head + mlen;
  const std::size_t payload_size = bytes.size() - payload_at;

  std::string line;
  if (!std::getline(manifest, line)) throw FormatError("checkpoint: empty manifest");
  std::istringstream cfg_line(line);
  std::string word;
  cfg_line >> word;
  if (word != "config") throw FormatError("checkpoint: manifest must start with a config record");
  std::map<std::string, std::string> record;
  while (cfg_line >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos || eq == 0) throw FormatError("checkpoint: malformed config entry '" + word + "'");
    record[word.substr(0, eq)] = word.substr(eq + 1);
  }
  auto take = [&](const std::string& key) {
    auto it = record.find(key);
    if (it == record.end()) throw FormatError("checkpoint: config record lacks '" + key + "'");
    std::string v = it->second;
    record.erase(it);
    return v;
  };

  BackboneConfig cfg;
  Variant variant;
  try {
    variant = parse_variant(take("variant"));
    cfg.norm = parse_norm_kind(take("norm"));
  } catch (const DomainError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  const std::string vsp = take("vsp");
  if (vsp != "0" && vsp != "1") throw FormatError("checkpoint: vsp must be 0 or 1");
  cfg.vsp_enabled = vsp == "1";
  const std::string input = take("input");
  const auto x = input.find('x');
  if (x == std::string::npos) throw FormatError("checkpoint: malformed input size '" + input + "'");
  cfg.input_rows = detail::split_sizes(input.substr(0, x), "input size")[0];
  cfg.input_cols = detail::split_sizes(input.substr(x + 1), "input size")[0];
  cfg.widths = detail::split_sizes(take("widths"), "widths");
  cfg.strides = detail::split_sizes(take("strides"), "strides");

  Checkpoint ck{[&] {
                  try {
                    return FibrosisModel(cfg, variant);
                  } catch (const DomainError& e) {
                    throw FormatError(std::string("checkpoint: inconsistent config: ") + e.what());
                  }
                }(),
                std::move(record)};

  auto expected = detail::checkpoint_tensors(ck.model);
  std::size_t next = 0;
  std::size_t offset = 0;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ts(line);
    std::string kind, name, dims, off;
    if (!(ts >> kind >> name >> dims >> off) || kind != "tensor" || (ts >> word)) {
      throw FormatError("checkpoint: malformed manifest line '" + line + "'");
    }
    if (next >= expected.size() || expected[next].first != name) {
      throw FormatError("checkpoint: unexpected tensor '" + name + "'" +
                        (next < expected.size() ? " (expected '" + expected[next].first + "')" : ""));
    }
    Tensor& target = expected[next].second;
    if (detail::split_sizes(dims, "shape") != target.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has shape " + dims + ", model expects " +
                        shape_str(target.shape()));
    }
    if (detail::split_sizes(off, "offset")[0] != offset) {
      throw FormatError("checkpoint: tensor " + name + " offset " + off + " is not contiguous");
    }
    const std::size_t nbytes = target.numel() * 8;
    if (offset + nbytes > payload_size) throw FormatError("checkpoint: payload truncated at tensor " + name);
    auto values = target.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = std::bit_cast<double>(detail::get_u64(bytes, payload_at + offset + 8 * i));
    }
    offset += nbytes;
    ++next;
  }
  if (next != expected.size()) throw FormatError("checkpoint: missing tensor '" + expected[next].first + "'");
  if (offset != payload_size) throw FormatError("checkpoint: trailing bytes after payload");

  // Running statistics were decoded into detached copies; write them back.
  auto& stages = ck.model.stages();
  std::size_t k = ck.model.named_parameters().size();
  for (auto& stage : stages) {
    if (BatchNormState* st = stage.norm.state()) {
      const auto mean = expected[k++].second.values();
      const auto var = expected[k++].second.values();
      st->running_mean.assign(mean.begin(), mean.end());
      st->running_var.assign(var.begin(), var.end());
    }
  }
  return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

}  // namespace hfus
