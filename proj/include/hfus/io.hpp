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

// Binary PGM (P5) images and the JSON Lines manifest that ties images, masks,
// views and labels into studies.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hfus/dataset.hpp"
#include "hfus/error.hpp"

namespace hfus {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PGM

inline void write_pgm(const fs::path& path, const Grid<std::uint8_t>& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.cols << ' ' << image.rows << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.data.data()), static_cast<std::streamsize>(image.data.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline Grid<std::uint8_t> read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto fail = [&](const std::string& why) { return FormatError(path.string() + ": malformed PGM (" + why + ")"); };
  // Header tokens, skipping whitespace and '#' comments.
  auto token = [&]() {
    std::string t;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(c));
    }
    return t;
  };
  if (token() != "P5") throw fail("missing P5 magic");
  long cols = 0, rows = 0, maxval = 0;
  try {
    cols = std::stol(token());
    rows = std::stol(token());
    maxval = std::stol(token());
  } catch (const std::exception&) {
    throw fail("bad header field");
  }
  if (cols <= 0 || rows <= 0) throw fail("non-positive size");
  if (maxval != 255) throw fail("maxval must be 255");
  Grid<std::uint8_t> image(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  in.read(reinterpret_cast<char*>(image.data.data()), static_cast<std::streamsize>(image.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(image.data.size())) throw fail("truncated pixel data");
  return image;
}

inline BinaryMask read_mask_pgm(const fs::path& path) {
  BinaryMask m = read_pgm(path);
  for (auto& v : m.data) v = v >= 128 ? 1 : 0;
  return m;
}

inline void write_mask_pgm(const fs::path& path, const BinaryMask& mask) {
  Grid<std::uint8_t> g = mask;
  for (auto& v : g.data) v = v ? 255 : 0;
  write_pgm(path, g);
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string study_id;
  std::string patient_id;
  int label = 0;
  int view = 1;
  std::string image_path;  // relative to the manifest
  std::string mask_path;
};

inline ManifestRecord parse_manifest_line(const std::string& line, std::size_t line_no) {
  const std::string where = "manifest line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(where + ": " + e.what());
  }
  static const std::vector<std::string> keys{"study_id", "patient_id", "label", "view", "image_path", "mask_path"};
  if (!j.is_object() || j.size() != keys.size()) throw FormatError(where + ": expected exactly the keys study_id, patient_id, label, view, image_path, mask_path");
  for (const auto& k : keys)
    if (!j.contains(k)) throw FormatError(where + ": missing key '" + k + "'");
  ManifestRecord r;
  try {
    r.study_id = j.at("study_id").get<std::string>();
    r.patient_id = j.at("patient_id").get<std::string>();
    r.label = j.at("label").get<int>();
    r.view = j.at("view").get<int>();
    r.image_path = j.at("image_path").get<std::string>();
    r.mask_path = j.at("mask_path").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  if (r.view < 1 || r.view > kNumViews) {
    throw DomainError(where + ": view " + std::to_string(r.view) + " outside 1.." + std::to_string(kNumViews));
  }
  if (r.label != 0 && r.label != 1) throw DomainError(where + ": label must be 0 or 1");
  return r;
}

inline std::string manifest_line(const ManifestRecord& r) {
  // Fixed key order keeps manifests byte-reproducible.
  nlohmann::ordered_json j;
  j["study_id"] = r.study_id;
  j["patient_id"] = r.patient_id;
  j["label"] = r.label;
  j["view"] = r.view;
  j["image_path"] = r.image_path;
  j["mask_path"] = r.mask_path;
  return j.dump();
}

struct LoadOptions {
  // Resize target; 0 keeps the stored size.
  std::size_t input_rows = 0;
  std::size_t input_cols = 0;
};

// Reads the manifest and every referenced image and mask. Studies come back in
// order of first appearance; images keep file order within a study.
inline std::vector<Study> load_manifest(const fs::path& path, const LoadOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  std::vector<Study> studies;
  std::map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    const ManifestRecord r = parse_manifest_line(line, line_no);
    auto [it, inserted] = index.emplace(r.study_id, studies.size());
    if (inserted) studies.push_back(Study{r.study_id, r.patient_id, r.label, {}});
    Study& s = studies[it->second];
    if (s.label != r.label) {
      throw ConsistencyError("manifest line " + std::to_string(line_no) + ": study " + r.study_id +
                             " has conflicting labels " + std::to_string(s.label) + " and " + std::to_string(r.label));
    }
    if (s.patient_id != r.patient_id) {
      throw ConsistencyError("manifest line " + std::to_string(line_no) + ": study " + r.study_id +
                             " has conflicting patient ids");
    }
    const fs::path image_path = base / r.image_path, mask_path = base / r.mask_path;
    if (!fs::exists(image_path)) throw IoError("manifest line " + std::to_string(line_no) + ": missing image " + image_path.string());
    if (!fs::exists(mask_path)) throw IoError("manifest line " + std::to_string(line_no) + ": missing mask " + mask_path.string());
    StudyImage im{UsImage{read_pgm(image_path)}, r.view, LiverMask{read_mask_pgm(mask_path)}};
    if (im.liver.bits.rows != im.image.rows() || im.liver.bits.cols != im.image.cols()) {
      throw ConsistencyError("manifest line " + std::to_string(line_no) + ": mask size differs from image size");
    }
    if (options.input_rows && (im.image.rows() != options.input_rows || im.image.cols() != options.input_cols)) {
      im.image = UsImage::quantize(resize_bilinear(im.image.normalized(), options.input_rows, options.input_cols));
      im.liver.bits = resize_nearest(im.liver.bits, options.input_rows, options.input_cols);
    }
    s.images.push_back(std::move(im));
  }
  for (const auto& s : studies) {
    if (s.images.size() > kMaxStudyImages) {
      throw DomainError("study " + s.study_id + " has " + std::to_string(s.images.size()) + " images (max 14)");
    }
  }
  return studies;
}

// Writes images/<study>_<k>.pgm, masks/<study>_<k>.pgm and manifest.jsonl
// under `dir`; returns the manifest path.
inline fs::path save_dataset(const std::vector<Study>& studies, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const fs::path manifest = dir / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw IoError("cannot write " + manifest.string());
  for (const auto& s : studies) {
    validate_study(s);
    for (std::size_t k = 0; k < s.images.size(); ++k) {
      const std::string stem = s.study_id + "_" + std::to_string(k);
      const ManifestRecord r{s.study_id, s.patient_id, s.label, s.images[k].view, "images/" + stem + ".pgm",
                             "masks/" + stem + ".pgm"};
      write_pgm(dir / r.image_path, s.images[k].image.pixels);
      write_mask_pgm(dir / r.mask_path, s.images[k].liver.bits);
      out << manifest_line(r) << '\n';
    }
  }
  if (!out) throw IoError("failed writing " + manifest.string());
  return manifest;
}

}  // namespace hfus
