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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hfus/error.hpp"
#include "hfus/layers.hpp"

namespace hfus {

// Row-major 2-D grid.
template <class T>
struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const { return data.size(); }
  bool operator==(const Grid&) const = default;
};

// Grayscale scan stored as 8-bit pixels; the model consumes normalized().
struct UsImage {
  Grid<std::uint8_t> pixels;

  std::size_t rows() const { return pixels.rows; }
  std::size_t cols() const { return pixels.cols; }

  Grid<double> normalized() const {
    Grid<double> out(pixels.rows, pixels.cols);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = pixels.data[i] / 255.0;
    return out;
  }

  static UsImage quantize(const Grid<double>& g) {
    UsImage img{Grid<std::uint8_t>(g.rows, g.cols)};
    for (std::size_t i = 0; i < g.size(); ++i) {
      img.pixels.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(g.data[i], 0.0, 1.0) * 255.0));
    }
    return img;
  }

  bool operator==(const UsImage&) const = default;
};

// Binary mask, 1 = inside.
using BinaryMask = Grid<std::uint8_t>;

struct LiverMask {
  BinaryMask bits;
  bool operator==(const LiverMask&) const = default;
};

// Inclusive pixel rectangle.
struct Rect {
  std::size_t row_top = 0, row_bottom = 0, col_left = 0, col_right = 0;
  bool operator==(const Rect&) const = default;
};

// Filled axis-aligned rectangle covering the upper liver border and the top
// half of the liver.
struct ClinicalRoi {
  BinaryMask bits;
  Rect rect;
};

struct StudyImage {
  UsImage image;
  int view = 1;
  LiverMask liver;
  bool operator==(const StudyImage&) const = default;
};

inline constexpr std::size_t kMaxStudyImages = 14;

struct Study {
  std::string study_id;
  std::string patient_id;
  int label = 0;  // 1 = moderate-to-severe fibrosis
  std::vector<StudyImage> images;

  std::size_t size() const { return images.size(); }
  bool operator==(const Study&) const = default;
};

inline void validate_study(const Study& s) {
  if (s.images.empty() || s.images.size() > kMaxStudyImages) {
    throw DomainError("study " + s.study_id + ": image count " + std::to_string(s.images.size()) +
                      " outside 1.." + std::to_string(kMaxStudyImages));
  }
  if (s.label != 0 && s.label != 1) throw DomainError("study " + s.study_id + ": label must be 0 or 1");
  for (const auto& im : s.images) check_view(im.view);
}

inline Rect bounding_box(const BinaryMask& mask) {
  Rect r{mask.rows, 0, mask.cols, 0};
  bool any = false;
  for (std::size_t i = 0; i < mask.rows; ++i)
    for (std::size_t j = 0; j < mask.cols; ++j)
      if (mask(i, j)) {
        any = true;
        r.row_top = std::min(r.row_top, i);
        r.row_bottom = std::max(r.row_bottom, i);
        r.col_left = std::min(r.col_left, j);
        r.col_right = std::max(r.col_right, j);
      }
  if (!any) throw DomainError("mask is empty");
  return r;
}

// Upward extension for an image of `rows` pixels: 10 pixels at 128 rows,
// scaled with the image height, at least 1.
inline std::size_t roi_margin_for_height(std::size_t rows) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(10.0 * static_cast<double>(rows) / 128.0)));
}

// Rows [max(0, top - margin), top + floor((bottom - top) / 2)], columns of the
// liver bounding box.
inline ClinicalRoi roi_from_liver_mask(const LiverMask& liver, std::size_t margin) {
  Rect box;
  try {
    box = bounding_box(liver.bits);
  } catch (const DomainError&) {
    throw DomainError("roi_from_liver_mask: liver mask is empty");
  }
  Rect roi{box.row_top >= margin ? box.row_top - margin : 0, box.row_top + (box.row_bottom - box.row_top) / 2,
           box.col_left, box.col_right};
  ClinicalRoi out{BinaryMask(liver.bits.rows, liver.bits.cols, 0), roi};
  for (std::size_t i = roi.row_top; i <= roi.row_bottom; ++i)
    for (std::size_t j = roi.col_left; j <= roi.col_right; ++j) out.bits(i, j) = 1;
  return out;
}

inline ClinicalRoi roi_from_liver_mask(const LiverMask& liver) {
  return roi_from_liver_mask(liver, roi_margin_for_height(liver.bits.rows));
}

// Bilinear resize, used by the loader when stored scans differ from the
// configured input size.
inline Grid<double> resize_bilinear(const Grid<double>& in, std::size_t rows, std::size_t cols) {
  Grid<double> out(rows, cols);
  const double sy = static_cast<double>(in.rows) / static_cast<double>(rows);
  const double sx = static_cast<double>(in.cols) / static_cast<double>(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.rows - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, in.rows - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.cols - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, in.cols - 1);
      const double fx = x - static_cast<double>(x0);
      out(i, j) = (1 - fy) * ((1 - fx) * in(y0, x0) + fx * in(y0, x1)) + fy * ((1 - fx) * in(y1, x0) + fx * in(y1, x1));
    }
  }
  return out;
}

inline BinaryMask resize_nearest(const BinaryMask& in, std::size_t rows, std::size_t cols) {
  BinaryMask out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t si = std::min(in.rows - 1, i * in.rows / rows);
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = in(si, std::min(in.cols - 1, j * in.cols / cols));
  }
  return out;
}

}  // namespace hfus
