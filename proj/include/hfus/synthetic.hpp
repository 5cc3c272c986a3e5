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

// Seeded ultrasound-like phantom studies standing in for clinical data.
//
// Each image is a sector scan with multiplicative speckle. An elliptical liver
// sits at a view-dependent pose. Fibrotic studies (label 1) get a coarser
// parenchyma texture (band-pass noise with a longer correlation length) and a
// sinusoidally nodular upper liver border, with a per-study severity so that
// mild cases overlap healthy ones. Healthy studies keep a smooth texture and
// border. An optional corner patch outside the sector can be made to
// correlate with the label (or anti-correlate) to probe shortcut learning;
// the three confounder modes produce identical pixels outside the patch.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "hfus/dataset.hpp"
#include "hfus/error.hpp"
#include "hfus/layers.hpp"
#include "hfus/rng.hpp"

namespace hfus {

enum class ConfounderMode { off, train, flipped };

inline const char* to_string(ConfounderMode m) {
  switch (m) {
    case ConfounderMode::off: return "off";
    case ConfounderMode::train: return "train";
    case ConfounderMode::flipped: return "flipped";
  }
  return "?";
}

inline ConfounderMode parse_confounder(const std::string& s) {
  if (s == "off") return ConfounderMode::off;
  if (s == "train") return ConfounderMode::train;
  if (s == "flipped") return ConfounderMode::flipped;
  throw DomainError("unknown confounder mode '" + s + "' (expected off|train|flipped)");
}

struct PhantomParams {
  std::size_t size = 64;
  double tissue_level = 0.32;
  double liver_level = 0.46;
  double speckle_blur = 0.7;       // px, grain of the speckle
  double fine_texture = 0.10;      // amplitude of short-correlation texture (all livers)
  double fine_corr = 0.8;          // px
  double coarse_texture = 0.55;    // amplitude at severity 1
  double coarse_corr = 2.2;        // px
  double nodularity = 0.10;        // relative border displacement at severity 1
  double capsule_gain = 0.22;      // brightness of the upper liver border line
  double min_severity = 0.15;      // label-1 severity ~ U(min_severity, 1)
  double image_severity_jitter = 0.35;
  std::size_t patch = 7;           // confounder patch side, px
};

// Liver pose per view (center row/col, semi-axes as image fractions, angle).
struct ViewPose {
  double cy, cx, ay, ax, angle_deg;
};

inline const ViewPose& view_pose(int view) {
  static const std::array<ViewPose, kNumViews> poses{{{0.46, 0.50, 0.20, 0.33, 0.0},
                                                       {0.48, 0.43, 0.23, 0.29, 14.0},
                                                       {0.49, 0.57, 0.19, 0.34, -12.0},
                                                       {0.45, 0.46, 0.24, 0.27, 24.0},
                                                       {0.50, 0.53, 0.21, 0.31, -22.0},
                                                       {0.47, 0.55, 0.22, 0.25, 7.0}}};
  check_view(view);
  return poses[static_cast<std::size_t>(view - 1)];
}

// Per-patient anatomy shared by all studies of the same patient.
struct PatientTraits {
  double dy = 0, dx = 0, scale = 1;
  static PatientTraits draw(Rng& rng) {
    return {rng.uniform(-0.03, 0.03), rng.uniform(-0.03, 0.03), rng.uniform(0.9, 1.1)};
  }
};

namespace detail {

inline Grid<double> gaussian_blur(const Grid<double>& in, double sigma) {
  if (sigma <= 0) return in;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& k : kernel) k /= total;
  const auto rows = static_cast<long>(in.rows), cols = static_cast<long>(in.cols);
  auto reflect = [](long i, long n) { return i < 0 ? -i - 1 : (i >= n ? 2 * n - i - 1 : i); };
  Grid<double> tmp(in.rows, in.cols), out(in.rows, in.cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * in(static_cast<std::size_t>(r), static_cast<std::size_t>(reflect(c + i, cols)));
      tmp(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i)
        acc += kernel[static_cast<std::size_t>(i + radius)] * tmp(static_cast<std::size_t>(reflect(r + i, rows)), static_cast<std::size_t>(c));
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  return out;
}

// Zero-mean, unit-variance noise field with correlation length `corr`.
inline Grid<double> correlated_noise(std::size_t n, double corr, Rng& rng) {
  Grid<double> g(n, n);
  for (double& v : g.data) v = rng.normal();
  g = gaussian_blur(g, corr);
  double mean = 0, var = 0;
  for (double v : g.data) mean += v;
  mean /= static_cast<double>(g.size());
  for (double v : g.data) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(g.size()));
  for (double& v : g.data) v = (v - mean) / sd;
  return g;
}

// Band-pass: short-scale structure minus the slow trend.
inline Grid<double> band_pass_noise(std::size_t n, double corr, Rng& rng) {
  Grid<double> base(n, n);
  for (double& v : base.data) v = rng.normal();
  const Grid<double> fine = gaussian_blur(base, corr);
  const Grid<double> slow = gaussian_blur(base, 3.0 * corr);
  Grid<double> out(n, n);
  double var = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = fine.data[i] - slow.data[i];
    var += out.data[i] * out.data[i];
  }
  const double sd = std::sqrt(var / static_cast<double>(out.size()));
  for (double& v : out.data) v /= sd;
  return out;
}

}  // namespace detail

struct SyntheticImage {
  UsImage image;
  LiverMask liver;
};

// One scan. `severity` in [0,1] scales the fibrosis markers (0 = healthy).
inline SyntheticImage render_phantom(int view, double severity, const PatientTraits& patient, double confounder_level,
                                     bool with_patch, Rng& rng, const PhantomParams& p = {}) {
  const std::size_t n = p.size;
  const double sz = static_cast<double>(n);
  const ViewPose& pose = view_pose(view);
  const double cy = (pose.cy + patient.dy + rng.uniform(-0.025, 0.025)) * sz;
  const double cx = (pose.cx + patient.dx + rng.uniform(-0.025, 0.025)) * sz;
  const double ay = pose.ay * patient.scale * rng.uniform(0.92, 1.08) * sz;
  const double ax = pose.ax * patient.scale * rng.uniform(0.92, 1.08) * sz;
  const double angle = (pose.angle_deg + rng.uniform(-5.0, 5.0)) * std::numbers::pi / 180.0;
  const double ca = std::cos(angle), sa = std::sin(angle);
  const double nod_amp = p.nodularity * severity;
  const double nod_freq = static_cast<double>(rng.between(5, 9));
  const double nod_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // Sector geometry: apex above the image, +-42 degrees.
  const double apex_r = -0.35 * sz, apex_c = 0.5 * sz;
  const double half_fan = 42.0 * std::numbers::pi / 180.0;
  const double r_min = 0.38 * sz, r_max = 1.32 * sz;

  Grid<double> speckle(n, n);
  for (double& v : speckle.data) {
    const double u = std::max(rng.uniform(), 1e-12);
    v = std::sqrt(-2.0 * std::log(u)) * std::sqrt(2.0 / std::numbers::pi);  // Rayleigh, mean 1
  }
  speckle = detail::gaussian_blur(speckle, p.speckle_blur);
  const Grid<double> fine = detail::correlated_noise(n, p.fine_corr, rng);
  const Grid<double> coarse = detail::band_pass_noise(n, p.coarse_corr, rng);
  const double gain = rng.uniform(0.9, 1.1);

  Grid<double> pixels(n, n, 0.0);
  LiverMask liver{BinaryMask(n, n, 0)};
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      const double y = static_cast<double>(r) + 0.5, x = static_cast<double>(c) + 0.5;
      const double dr = y - apex_r, dc = x - apex_c;
      const double radius = std::hypot(dr, dc);
      const double theta = std::atan2(dc, dr);
      if (radius < r_min || radius > r_max || std::abs(theta) > half_fan) continue;

      // Liver frame: u along the major axis, v downwards.
      const double ry = y - cy, rx = x - cx;
      const double u = (ca * rx + sa * ry) / ax;
      const double v = (-sa * rx + ca * ry) / ay;
      const double rho = std::hypot(u, v);
      const double phi = std::atan2(v, u);
      const double upper = std::max(0.0, -std::sin(phi));  // 1 at the top of the liver
      const double boundary = 1.0 + nod_amp * upper * std::sin(nod_freq * phi + nod_phase);
      const bool inside = rho < boundary;

      const double depth = radius / sz;
      double level = p.tissue_level * std::exp(-0.35 * depth);
      if (inside) {
        liver.bits(r, c) = 1;
        const double texture = 1.0 + p.fine_texture * fine(r, c) + p.coarse_texture * severity * coarse(r, c);
        level = p.liver_level * std::exp(-0.35 * depth) * std::max(0.05, texture);
      }
      const double edge_distance = std::abs(rho - boundary) * std::min(ax, ay);
      if (upper > 0.2 && edge_distance < 1.2) level += p.capsule_gain * upper;
      pixels(r, c) = gain * level * speckle(r, c);
    }
  }
  // Patch noise is drawn unconditionally so every confounder mode consumes the
  // same random stream.
  for (std::size_t r = n - p.patch - 1; r < n - 1; ++r)
    for (std::size_t c = 1; c < p.patch + 1; ++c) {
      const double noise = 0.03 * rng.normal();
      if (with_patch) pixels(r, c) = confounder_level + noise;
    }
  return {UsImage::quantize(pixels), std::move(liver)};
}

struct SyntheticStudyRequest {
  std::uint64_t seed = 0;
  int label = 0;
  std::vector<int> views;  // one per image, K = views.size()
  ConfounderMode confounder = ConfounderMode::off;
  PatientTraits patient{};
  PhantomParams params{};
};

// Patch brightness: high for label 1 in `train` mode, inverted in `flipped`.
inline double confounder_level(ConfounderMode mode, int label, Rng& rng) {
  const bool bright = (mode == ConfounderMode::train) == (label == 1);
  return bright ? rng.uniform(0.72, 0.9) : rng.uniform(0.1, 0.28);
}

inline Study generate_synthetic_study(const SyntheticStudyRequest& req) {
  const std::size_t k = req.views.size();
  if (k < 1 || k > kMaxStudyImages) throw DomainError("synthetic study: K must be in 1..14, got " + std::to_string(k));
  for (int v : req.views) check_view(v);
  if (req.label != 0 && req.label != 1) throw DomainError("synthetic study: label must be 0 or 1");
  Rng rng(req.seed);
  const double severity = req.label ? rng.uniform(req.params.min_severity, 1.0) : 0.0;
  // The patch is drawn even when unused so confounder modes share every other pixel.
  const double patch = confounder_level(req.confounder, req.label, rng);
  Study study;
  study.label = req.label;
  for (int view : req.views) {
    const double jitter = 1.0 + req.params.image_severity_jitter * (2.0 * rng.uniform() - 1.0);
    const double s = std::clamp(severity * jitter, 0.0, 1.0);
    auto img = render_phantom(view, s, req.patient, patch, req.confounder != ConfounderMode::off, rng, req.params);
    study.images.push_back({std::move(img.image), view, std::move(img.liver)});
  }
  return study;
}

inline Study generate_synthetic_study(std::uint64_t seed, int label, std::size_t k, const std::vector<int>& views,
                                      ConfounderMode confounder) {
  if (views.size() != k) throw DomainError("synthetic study: expected " + std::to_string(k) + " view ids");
  return generate_synthetic_study(SyntheticStudyRequest{seed, label, views, confounder, {}, {}});
}

struct CorpusRequest {
  std::size_t studies = 200;
  std::uint64_t seed = 0;
  std::size_t min_images = 1;
  std::size_t max_images = kMaxStudyImages;
  ConfounderMode confounder = ConfounderMode::off;
  PhantomParams params{};
};

// ceil(N/2) positive studies. Patients hold 1-3 studies of one label and share
// anatomy. Study s draws its pixels from the stream (seed, s), so corpora that
// differ only in confounder mode differ only in the patch.
inline std::vector<Study> generate_corpus(const CorpusRequest& req) {
  if (req.studies == 0) throw DomainError("corpus: need at least one study");
  if (req.min_images < 1 || req.max_images > kMaxStudyImages || req.min_images > req.max_images) {
    throw DomainError("corpus: image range must satisfy 1 <= min <= max <= 14");
  }
  Rng layout(req.seed);
  const std::size_t positives = (req.studies + 1) / 2;
  std::vector<Study> out;
  std::size_t patient_index = 0;
  std::size_t remaining_in_patient = 0;
  int patient_label = -1;
  PatientTraits traits;
  char buf[32];
  for (std::size_t s = 0; s < req.studies; ++s) {
    const int label = s < positives ? 1 : 0;
    if (remaining_in_patient == 0 || label != patient_label) {
      ++patient_index;
      remaining_in_patient = static_cast<std::size_t>(layout.between(1, 3));
      patient_label = label;
      Rng prng = Rng::derive(req.seed, 1'000'000 + patient_index);
      traits = PatientTraits::draw(prng);
    }
    --remaining_in_patient;
    const auto k = static_cast<std::size_t>(layout.between(static_cast<int>(req.min_images), static_cast<int>(req.max_images)));
    std::vector<int> views(k);
    for (int& v : views) v = layout.between(1, kNumViews);
    SyntheticStudyRequest sreq{Rng::derive(req.seed, s).next_u64(), label, views, req.confounder, traits, req.params};
    Study study = generate_synthetic_study(sreq);
    std::snprintf(buf, sizeof buf, "S%04zu", s + 1);
    study.study_id = buf;
    std::snprintf(buf, sizeof buf, "P%04zu", patient_index);
    study.patient_id = buf;
    out.push_back(std::move(study));
  }
  return out;
}

}  // namespace hfus
