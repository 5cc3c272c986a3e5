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
#include <functional>
#include <limits>
#include <numbers>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hfus/dataset.hpp"
#include "hfus/error.hpp"
#include "hfus/evaluation.hpp"
#include "hfus/model.hpp"
#include "hfus/optim.hpp"
#include "hfus/rng.hpp"

namespace hfus {

// Ranges of the random photometric and geometric transforms. Each range must
// contain the identity.
struct AugmentationConfig {
  double brightness = 0.1;  // additive delta in [-b, b]
  double contrast_min = 0.8;
  double contrast_max = 1.2;
  double rotation_deg = 10.0;  // angle in [-r, r]
  double scale_min = 0.9;
  double scale_max = 1.1;

  static AugmentationConfig identity() { return {0.0, 1.0, 1.0, 0.0, 1.0, 1.0}; }

  void validate() const {
    if (!(brightness >= 0.0)) throw DomainError("augmentation: brightness must be >= 0");
    if (!(contrast_min > 0.0 && contrast_min <= 1.0 && contrast_max >= 1.0)) {
      throw DomainError("augmentation: contrast range must satisfy 0 < min <= 1 <= max");
    }
    if (!(rotation_deg >= 0.0 && rotation_deg <= 180.0)) throw DomainError("augmentation: rotation must be in [0, 180]");
    if (!(scale_min > 0.0 && scale_min <= 1.0 && scale_max >= 1.0)) {
      throw DomainError("augmentation: scale range must satisfy 0 < min <= 1 <= max");
    }
  }
};

struct TrainConfig {
  double lr = 0.001;
  int epochs = 30;
  int batch_size = 8;  // training samples per optimizer step
  std::uint64_t seed = 0;
  Variant variant = Variant::ghif_vsp;
  NormKind norm = NormKind::instance;
  bool augment = true;
  AugmentationConfig augmentation;
  std::size_t input_rows = 64;
  std::size_t input_cols = 64;
  std::vector<std::size_t> widths{16, 32, 64};
  std::vector<std::size_t> strides{1, 2, 2};

  BackboneConfig backbone() const {
    BackboneConfig b;
    b.input_rows = input_rows;
    b.input_cols = input_cols;
    b.widths = widths;
    b.strides = strides;
    b.norm = norm;
    b.vsp_enabled = variant == Variant::ghif_vsp;
    return b;
  }

  void validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw DomainError("train: lr must be > 0");
    if (epochs < 1) throw DomainError("train: epochs must be >= 1");
    if (batch_size < 1) throw DomainError("train: batch_size must be >= 1");
    augmentation.validate();
    backbone().validate();
  }
};

// ---------------------------------------------------------------------------
// Patient-level folds

struct Fold {
  std::vector<std::string> train, val, test;  // patient ids
};

struct FoldSplit {
  std::vector<Fold> folds;
};

inline constexpr double kValFraction = 0.1;

// One seeded shuffle of the patients; fold f tests on the f-th of n_folds
// equal chunks, validates on the next 10% (cyclically) and trains on the rest.
inline FoldSplit split_folds(const std::vector<std::string>& patient_ids, int n_folds, Rng& rng) {
  const std::size_t n = patient_ids.size();
  if (n_folds < 2) throw DomainError("split_folds: need at least 2 folds");
  if (n < 10) throw DomainError("split_folds: need at least 10 patients, got " + std::to_string(n));
  if (std::set<std::string>(patient_ids.begin(), patient_ids.end()).size() != n) {
    throw DomainError("split_folds: duplicate patient ids");
  }
  std::vector<std::string> order = patient_ids;
  rng.shuffle(order.begin(), order.end());
  const std::size_t k = static_cast<std::size_t>(n_folds);
  const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(kValFraction * n)));
  FoldSplit split;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t lo = f * n / k, hi = (f + 1) * n / k;
    if (hi - lo + n_val >= n) throw DomainError("split_folds: too few patients for " + std::to_string(k) + " folds");
    Fold fold;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t after = (i + n - hi) % n;  // distance past the test chunk
      if (i >= lo && i < hi) {
        fold.test.push_back(order[i]);
      } else if (after < n_val) {
        fold.val.push_back(order[i]);
      } else {
        fold.train.push_back(order[i]);
      }
    }
    split.folds.push_back(std::move(fold));
  }
  return split;
}

inline FoldSplit split_folds(const std::vector<std::string>& patient_ids, int n_folds, std::uint64_t seed) {
  Rng rng(seed);
  return split_folds(patient_ids, n_folds, rng);
}

// Distinct patient ids in first-appearance order.
inline std::vector<std::string> patient_ids(std::span<const Study> studies) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& s : studies)
    if (seen.insert(s.patient_id).second) out.push_back(s.patient_id);
  return out;
}

struct FoldStudies {
  std::vector<Study> train, val, test;
};

inline FoldStudies partition_studies(std::span<const Study> studies, const Fold& fold) {
  const std::set<std::string> train(fold.train.begin(), fold.train.end());
  const std::set<std::string> val(fold.val.begin(), fold.val.end());
  const std::set<std::string> test(fold.test.begin(), fold.test.end());
  FoldStudies out;
  for (const auto& s : studies) {
    if (train.count(s.patient_id)) {
      out.train.push_back(s);
    } else if (val.count(s.patient_id)) {
      out.val.push_back(s);
    } else if (test.count(s.patient_id)) {
      out.test.push_back(s);
    } else {
      throw ConsistencyError("study " + s.study_id + ": patient " + s.patient_id + " is in no partition");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling and augmentation

// Subset size uniform in 1..k, then that many distinct indices uniformly;
// returned sorted.
inline std::vector<std::size_t> sample_combination(std::size_t k, Rng& rng) {
  if (k == 0) throw DomainError("sample_combination: empty study");
  const std::size_t size = 1 + rng.below(k);
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  for (std::size_t i = 0; i < size; ++i) std::swap(idx[i], idx[i + rng.below(k - i)]);
  idx.resize(size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<std::size_t> sample_combination(const Study& study, Rng& rng) {
  return sample_combination(study.size(), rng);
}

struct AugmentParams {
  double brightness = 0.0;
  double contrast = 1.0;
  double rotation_deg = 0.0;
  double scale = 1.0;
};

inline AugmentParams draw_augment_params(const AugmentationConfig& cfg, Rng& rng) {
  AugmentParams p;
  p.brightness = rng.uniform(-cfg.brightness, cfg.brightness);
  p.contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  p.rotation_deg = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg);
  p.scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  return p;
}

struct Augmented {
  Grid<double> image;
  LiverMask liver;
};

// Brightness and contrast (about the image mean) act on the image only;
// rotation (counterclockwise as displayed) and scaling about the image centre
// act on both, bilinear for the image and nearest for the mask. Pixels mapped
// from outside the frame are 0. The image is clamped to [0,1].
inline Augmented apply_augment(const Grid<double>& image, const LiverMask& liver, const AugmentParams& p) {
  if (liver.bits.rows != image.rows || liver.bits.cols != image.cols) {
    throw ShapeError("augment: mask and image sizes differ");
  }
  const std::size_t rows = image.rows, cols = image.cols;
  double mean = 0;
  for (double v : image.data) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(1, image.size()));
  Grid<double> tone(rows, cols);
  for (std::size_t i = 0; i < image.size(); ++i) {
    tone.data[i] = (p.contrast == 1.0 ? image.data[i] : (image.data[i] - mean) * p.contrast + mean) + p.brightness;
  }

  Augmented out{Grid<double>(rows, cols), LiverMask{BinaryMask(rows, cols)}};
  const double theta = p.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(rows) - 1.0) / 2.0, cx = (static_cast<double>(cols) - 1.0) / 2.0;
  auto at = [&](long r, long c) {
    return (r < 0 || c < 0 || r >= static_cast<long>(rows) || c >= static_cast<long>(cols))
               ? 0.0
               : tone(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      // Inverse map: source = R(-theta) (dst - centre) / scale + centre, in
      // (x right, y up) display coordinates.
      const double dx = static_cast<double>(c) - cx, dy = cy - static_cast<double>(r);
      const double sx = (cs * dx + sn * dy) / p.scale, sy = (-sn * dx + cs * dy) / p.scale;
      const double src_c = sx + cx, src_r = cy - sy;
      const double r0 = std::floor(src_r), c0 = std::floor(src_c);
      const double fr = src_r - r0, fc = src_c - c0;
      const long ir = static_cast<long>(r0), ic = static_cast<long>(c0);
      const double v = (1 - fr) * ((1 - fc) * at(ir, ic) + fc * at(ir, ic + 1)) +
                       fr * ((1 - fc) * at(ir + 1, ic) + fc * at(ir + 1, ic + 1));
      out.image(r, c) = std::clamp(v, 0.0, 1.0);
      const long nr = std::lround(src_r), nc = std::lround(src_c);
      if (nr >= 0 && nc >= 0 && nr < static_cast<long>(rows) && nc < static_cast<long>(cols)) {
        out.liver.bits(r, c) = liver.bits(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc));
      }
    }
  }
  return out;
}

inline Augmented augment(const Grid<double>& image, const LiverMask& liver, const AugmentationConfig& cfg,
                         Rng& rng) {
  return apply_augment(image, liver, draw_augment_params(cfg, rng));
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_auc = 0;  // NaN when the validation set is missing a class
};

struct TrainResult {
  FibrosisModel model;  // parameters of the selected epoch
  std::vector<EpochRecord> history;
  int best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Study-wise AUC of `model` on `studies`, NaN if one class is absent.
inline double study_auc(std::span<const Study> studies, FibrosisModel& model) {
  std::vector<double> scores;
  std::vector<int> labels;
  bool pos = false, neg = false;
  for (const auto& s : studies) {
    scores.push_back(predict_study(s, model));
    labels.push_back(s.label);
    (s.label ? pos : neg) = true;
  }
  if (!pos || !neg) return std::numeric_limits<double>::quiet_NaN();
  return auc(roc_curve(scores, labels));
}

namespace detail {

struct TrainSample {
  std::size_t study;
  std::vector<std::size_t> images;
};

// This epoch's samples: a random combination per study (ghif variants), the
// whole study (global_fusion) or one sample per image (image-wise variants).
inline std::vector<TrainSample> epoch_samples(std::span<const Study> studies, Variant variant, Rng& rng) {
  std::vector<TrainSample> out;
  for (std::size_t s = 0; s < studies.size(); ++s) {
    const std::size_t k = studies[s].size();
    if (variant == Variant::ghif || variant == Variant::ghif_vsp) {
      out.push_back({s, sample_combination(k, rng)});
    } else if (variant == Variant::global_fusion) {
      std::vector<std::size_t> all(k);
      for (std::size_t i = 0; i < k; ++i) all[i] = i;
      out.push_back({s, std::move(all)});
    } else {
      for (std::size_t i = 0; i < k; ++i) out.push_back({s, {i}});
    }
  }
  rng.shuffle(out.begin(), out.end());
  return out;
}

}  // namespace detail

// SGD on `train`; the returned model is the epoch with the best validation
// AUC (later epochs win ties). Each step sums the BCE of batch_size samples.
inline TrainResult train(std::span<const Study> train_set, std::span<const Study> val_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DomainError("train: empty training partition");
  for (const auto& s : train_set) {
    validate_study(s);
    for (const auto& im : s.images) {
      if (im.image.rows() != cfg.input_rows || im.image.cols() != cfg.input_cols) {
        throw ShapeError("train: study " + s.study_id + " has a " + std::to_string(im.image.rows()) + "x" +
                         std::to_string(im.image.cols()) + " image, model expects " +
                         std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols));
      }
    }
  }
  FibrosisModel model(cfg.backbone(), cfg.variant, Rng::derive(cfg.seed, 0).next_u64());
  Rng rng = Rng::derive(cfg.seed, 1);
  std::vector<Tensor> params = model.parameters();

  std::vector<std::vector<Grid<double>>> pixels(train_set.size());
  for (std::size_t s = 0; s < train_set.size(); ++s)
    for (const auto& im : train_set[s].images) pixels[s].push_back(im.image.normalized());

  TrainResult result{model.clone(), {}, 0};
  double best_auc = -1;
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto samples = detail::epoch_samples(train_set, cfg.variant, rng);
    double loss_sum = 0;
    for (std::size_t b0 = 0; b0 < samples.size(); b0 += batch) {
      const std::size_t b1 = std::min(samples.size(), b0 + batch);
      std::vector<PreparedImage> images;
      std::vector<std::size_t> sizes;
      for (std::size_t i = b0; i < b1; ++i) {
        const Study& st = train_set[samples[i].study];
        for (std::size_t k : samples[i].images) {
          const StudyImage& im = st.images[k];
          if (cfg.augment) {
            const Augmented a = augment(pixels[samples[i].study][k], im.liver, cfg.augmentation, rng);
            images.push_back(prepare_image(a.image, a.liver, im.view, model));
          } else {
            images.push_back(prepare_image(pixels[samples[i].study][k], im.liver, im.view, model));
          }
        }
        sizes.push_back(samples[i].images.size());
      }
      auto batch_ids = [&] {
        std::string ids;
        for (std::size_t i = b0; i < b1; ++i) ids += (i > b0 ? "," : "") + train_set[samples[i].study].study_id;
        return ids;
      };
      try {
        Tape tape;
        const GroupOutputs out = forward_groups(model, images, sizes, true);
        Tensor loss = bce_loss(out.probabilities[0], train_set[samples[b0].study].label);
        for (std::size_t i = b0 + 1; i < b1; ++i) {
          loss = add(loss, bce_loss(out.probabilities[i - b0], train_set[samples[i].study].label));
        }
        loss_sum += loss.item();
        tape.backward(loss);
        sgd_step(params, cfg.lr);
      } catch (const NonFiniteError& e) {
        throw NonFiniteError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", studies " +
                             batch_ids() + ")");
      }
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(samples.size()),
                    val_set.empty() ? std::numeric_limits<double>::quiet_NaN() : study_auc(val_set, model)};
    result.history.push_back(rec);
    // Undefined validation AUC ranks below every defined one.
    const double key = std::isnan(rec.val_auc) ? -0.5 : rec.val_auc;
    if (key >= best_auc) {
      best_auc = key;
      result.best_epoch = epoch;
      result.model = model.clone();
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

inline constexpr const char* kHistoryHeader = "epoch,train_loss,val_auc";

inline void write_history_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  os << kHistoryHeader << "\n";
  for (const auto& r : history) {
    os << r.epoch << "," << format_number(r.train_loss) << "," << format_number(r.val_auc) << "\n";
  }
}

}  // namespace hfus
