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
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hfus/dataset.hpp"
#include "hfus/error.hpp"
#include "hfus/layers.hpp"
#include "hfus/ops.hpp"
#include "hfus/rng.hpp"
#include "hfus/tensor.hpp"

namespace hfus {

// Model variants, one per row of the ablation:
//   imagewise      per-image classifier on plain GAP, median over the study
//   imagewise_roi  per-image classifier on clinical-ROI pooling, median
//   global_fusion  mean/var/max feature fusion, trained on full studies only
//   ghif           the same fusion trained on random image combinations
//   ghif_vsp       ghif plus view-specific normalization banks
enum class Variant { imagewise, imagewise_roi, global_fusion, ghif, ghif_vsp };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::imagewise: return "imagewise";
    case Variant::imagewise_roi: return "imagewise_roi";
    case Variant::global_fusion: return "global_fusion";
    case Variant::ghif: return "ghif";
    case Variant::ghif_vsp: return "ghif_vsp";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::imagewise, Variant::imagewise_roi, Variant::global_fusion, Variant::ghif,
                    Variant::ghif_vsp}) {
    if (s == to_string(v)) return v;
  }
  throw DomainError("unknown model variant '" + s +
                    "' (expected imagewise|imagewise_roi|global_fusion|ghif|ghif_vsp)");
}

inline bool is_fusion(Variant v) { return v == Variant::global_fusion || v == Variant::ghif || v == Variant::ghif_vsp; }
inline bool uses_roi(Variant v) { return v != Variant::imagewise; }

struct BackboneConfig {
  std::size_t input_rows = 64;
  std::size_t input_cols = 64;
  std::vector<std::size_t> widths{16, 32, 64};
  std::vector<std::size_t> strides{1, 2, 2};
  NormKind norm = NormKind::instance;
  bool vsp_enabled = false;

  std::size_t feature_stride() const {
    std::size_t s = 1;
    for (auto v : strides) s *= v;
    return s;
  }
  std::size_t feature_rows() const { return input_rows / feature_stride(); }
  std::size_t feature_cols() const { return input_cols / feature_stride(); }
  std::size_t channels() const { return widths.back(); }

  void validate() const {
    if (widths.empty() || widths.size() != strides.size()) {
      throw DomainError("backbone: widths and strides must be non-empty and of equal length");
    }
    for (auto w : widths)
      if (w == 0) throw DomainError("backbone: stage widths must be positive");
    for (auto s : strides)
      if (s == 0) throw DomainError("backbone: strides must be positive");
    const std::size_t fs = feature_stride();
    if (input_rows % fs != 0 || input_cols % fs != 0) {
      throw DomainError("backbone: feature stride " + std::to_string(fs) + " does not divide input size " +
                        std::to_string(input_rows) + "x" + std::to_string(input_cols));
    }
    if (feature_rows() < 2 || feature_cols() < 2) {
      throw DomainError("backbone: final feature map must be at least 2x2");
    }
  }
};

// Backbone parameters theta (3x3 conv per stage), normalization banks and the
// linear head. Stage n is conv(stride) -> norm -> relu.
class FibrosisModel {
 public:
  struct Stage {
    Tensor weight;  // [out, in, 3, 3]
    Tensor bias;    // [out]
    NormLayer norm;
    std::size_t stride;
  };

  FibrosisModel(BackboneConfig config, Variant variant, std::uint64_t seed = 0)
      : config_(std::move(config)), variant_(variant) {
    config_.validate();
    if (variant_ == Variant::ghif_vsp && !config_.vsp_enabled) {
      throw DomainError("model: variant ghif_vsp requires view-specific normalization");
    }
    Rng rng(seed);
    std::size_t in = 1;
    for (std::size_t s = 0; s < config_.widths.size(); ++s) {
      const std::size_t out = config_.widths[s];
      std::vector<double> w(out * in * 9);
      const double stddev = std::sqrt(2.0 / static_cast<double>(in * 9));
      for (double& v : w) v = rng.normal(0.0, stddev);
      stages_.push_back({Tensor({out, in, 3, 3}, std::move(w), true), Tensor::zeros({out}, true),
                         NormLayer(config_.norm, out, config_.vsp_enabled), config_.strides[s]});
      in = out;
    }
    const std::size_t width = head_width();
    std::vector<double> hw(width);
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    for (double& v : hw) v = rng.uniform(-bound, bound);
    head_weight_ = Tensor({1, width}, std::move(hw), true);
    head_bias_ = Tensor::zeros({1}, true);
  }

  const BackboneConfig& config() const { return config_; }
  Variant variant() const { return variant_; }
  std::size_t channels() const { return config_.channels(); }
  // 3C for the fusion variants (mean, var, max), C otherwise.
  std::size_t head_width() const { return (is_fusion(variant_) ? 3 : 1) * channels(); }

  std::vector<Stage>& stages() { return stages_; }
  const std::vector<Stage>& stages() const { return stages_; }
  Tensor& head_weight() { return head_weight_; }
  Tensor& head_bias() { return head_bias_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }

  // Backbone on a batch [N,1,H,W]; sample n is normalized with the bank of
  // views[n]. Returns [N,C,H',W'].
  Tensor backbone(const Tensor& batch, std::span<const int> views, bool training) {
    if (batch.rank() != 4 || batch.dim(1) != 1 || batch.dim(2) != config_.input_rows ||
        batch.dim(3) != config_.input_cols) {
      throw ShapeError("backbone: expected [N,1," + std::to_string(config_.input_rows) + "," +
                       std::to_string(config_.input_cols) + "], got " + shape_str(batch.shape()));
    }
    for (int v : views) check_view(v);
    Tensor x = batch;
    for (auto& stage : stages_) {
      x = conv2d(x, stage.weight, stage.bias, stage.stride, 1);
      x = stage.norm.forward(x, views, training);
      x = relu(x);
    }
    return x;
  }

  // Logit of the linear head on a pooled or fused vector.
  Tensor head(const Tensor& features) const {
    if (features.rank() != 1 || features.dim(0) != head_width()) {
      throw ShapeError("head: expected [" + std::to_string(head_width()) + "], got " + shape_str(features.shape()));
    }
    return linear(features, head_weight_, head_bias_);
  }

  // Every trainable tensor with its checkpoint name, in checkpoint order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      const std::string prefix = "stage" + std::to_string(s + 1);
      out.emplace_back(prefix + ".conv.weight", stages_[s].weight);
      out.emplace_back(prefix + ".conv.bias", stages_[s].bias);
      const NormLayer& norm = stages_[s].norm;
      if (const ViewBank* bank = norm.bank()) {
        for (int v = 1; v <= kNumViews; ++v) {
          const NormAffine& a = vsp_select(*bank, v);
          out.emplace_back(prefix + ".norm.view" + std::to_string(v) + ".gamma", a.gamma);
          out.emplace_back(prefix + ".norm.view" + std::to_string(v) + ".beta", a.beta);
        }
      } else {
        const NormAffine& a = norm.affine_for(1);
        out.emplace_back(prefix + ".norm.shared.gamma", a.gamma);
        out.emplace_back(prefix + ".norm.shared.beta", a.beta);
      }
    }
    out.emplace_back("head.weight", head_weight_);
    out.emplace_back("head.bias", head_bias_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  // Normalization affine parameter count (all banks).
  std::size_t norm_parameter_count() const {
    std::size_t n = 0;
    for (const auto& s : stages_)
      for (const auto& t : s.norm.parameters()) n += t.numel();
    return n;
  }

  // Shared backbone weights theta: conv weights and biases only.
  std::vector<Tensor> theta() const {
    std::vector<Tensor> out;
    for (const auto& s : stages_) {
      out.push_back(s.weight);
      out.push_back(s.bias);
    }
    return out;
  }

  // Deep copy: no tensor storage is shared with *this.
  FibrosisModel clone() const {
    FibrosisModel copy = *this;
    for (auto& s : copy.stages_) {
      s.weight = s.weight.clone(true);
      s.bias = s.bias.clone(true);
      if (ViewBank* bank = s.norm.bank()) {
        for (auto& a : bank->banks) a = {a.gamma.clone(true), a.beta.clone(true)};
      } else {
        NormAffine* a = s.norm.shared();
        *a = {a->gamma.clone(true), a->beta.clone(true)};
      }
    }
    copy.head_weight_ = head_weight_.clone(true);
    copy.head_bias_ = head_bias_.clone(true);
    return copy;
  }

 private:
  BackboneConfig config_;
  Variant variant_;
  std::vector<Stage> stages_;
  Tensor head_weight_;
  Tensor head_bias_;
};

// Little-endian bytes of theta, used to check that switching views never
// touches the shared weights.
inline std::vector<std::uint8_t> serialize_theta(const FibrosisModel& model) {
  std::vector<std::uint8_t> out;
  for (const Tensor& t : model.theta()) {
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int b = 0; b < 8; ++b) out.push_back(static_cast<std::uint8_t>(bits >> (8 * b)));
    }
  }
  return out;
}

inline Tensor image_tensor(const Grid<double>& pixels) {
  return Tensor({1, pixels.rows, pixels.cols}, pixels.data);
}

// A(k) for a single image in inference mode: [C,H',W'].
inline Tensor extract_features(const Grid<double>& image, int view, FibrosisModel& model) {
  check_view(view);
  const auto& cfg = model.config();
  if (image.rows != cfg.input_rows || image.cols != cfg.input_cols) {
    throw ShapeError("extract_features: image is " + std::to_string(image.rows) + "x" + std::to_string(image.cols) +
                     ", model expects " + std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols));
  }
  const Tensor batch({1, 1, image.rows, image.cols}, image.data);
  const int views[] = {view};
  return select(model.backbone(batch, views, false), 0);
}

// Average-pools the binary mask over each stride x stride cell and keeps the
// cells with coverage >= 0.5. Returns a constant [H',W'] tensor of 0/1.
inline Tensor downsample_mask(const BinaryMask& mask, std::size_t feature_rows, std::size_t feature_cols) {
  if (feature_rows == 0 || feature_cols == 0 || mask.rows % feature_rows != 0 || mask.cols % feature_cols != 0) {
    throw ShapeError("downsample_mask: mask " + std::to_string(mask.rows) + "x" + std::to_string(mask.cols) +
                     " is not an integer multiple of feature shape " + std::to_string(feature_rows) + "x" +
                     std::to_string(feature_cols));
  }
  const std::size_t cy = mask.rows / feature_rows, cx = mask.cols / feature_cols;
  std::vector<double> out(feature_rows * feature_cols);
  for (std::size_t i = 0; i < feature_rows; ++i)
    for (std::size_t j = 0; j < feature_cols; ++j) {
      std::size_t on = 0;
      for (std::size_t a = 0; a < cy; ++a)
        for (std::size_t b = 0; b < cx; ++b) on += mask(i * cy + a, j * cx + b) ? 1 : 0;
      out[i * feature_cols + j] = 2 * on >= cy * cx ? 1.0 : 0.0;
    }
  return Tensor({feature_rows, feature_cols}, std::move(out));
}

// Masked global average pooling: sum(M * A) / (H' * W') per channel. The
// divisor is the full feature area, so the pooled value also reflects how much
// of the map the mask covers.
inline Tensor clinical_roi_pool(const Tensor& features, const Tensor& mask) {
  if (features.rank() != 3 || mask.rank() != 2 || features.dim(1) != mask.dim(0) || features.dim(2) != mask.dim(1)) {
    throw ShapeError("clinical_roi_pool: feature map " + shape_str(features.shape()) + " and mask " +
                     shape_str(mask.shape()) + " disagree spatially");
  }
  return global_avg_pool(mul(features, mask));
}

// Study-level fusion of K pooled vectors: concat(mean, var, max), each
// channel-wise over the set, variance with divisor K. Output length is 3C for
// every K.
inline Tensor ghif_fuse(std::span<const Tensor> pooled) {
  if (pooled.empty()) throw DomainError("ghif_fuse: empty image set");
  const Tensor g = stack(pooled);
  if (g.rank() != 2) throw ShapeError("ghif_fuse: pooled vectors must be 1-D");
  return concat({mean_rows(g), var_rows(g), max_rows(g)});
}

// Median of per-image probabilities; even counts take the midpoint of the two
// central values.
inline double median_late_fusion(std::span<const double> probs) {
  if (probs.empty()) throw DomainError("median_late_fusion: no predictions");
  for (double p : probs)
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("median_late_fusion: probability outside [0,1]");
  std::vector<double> v(probs.begin(), probs.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// An image ready for the backbone: normalized pixels, view and (for the ROI
// variants) the clinical ROI at feature resolution.
struct PreparedImage {
  Grid<double> pixels;
  int view = 1;
  Tensor mask;  // [H',W'], undefined for plain GAP
};

inline PreparedImage prepare_image(const Grid<double>& pixels, const LiverMask& liver, int view,
                                   const FibrosisModel& model) {
  check_view(view);
  const auto& cfg = model.config();
  if (pixels.rows != cfg.input_rows || pixels.cols != cfg.input_cols) {
    throw ShapeError("prepare_image: image is " + std::to_string(pixels.rows) + "x" + std::to_string(pixels.cols) +
                     ", model expects " + std::to_string(cfg.input_rows) + "x" + std::to_string(cfg.input_cols));
  }
  PreparedImage out{pixels, view, {}};
  if (uses_roi(model.variant())) {
    out.mask = downsample_mask(roi_from_liver_mask(liver).bits, cfg.feature_rows(), cfg.feature_cols());
  }
  return out;
}

inline PreparedImage prepare_image(const StudyImage& image, const FibrosisModel& model) {
  return prepare_image(image.image.normalized(), image.liver, image.view, model);
}

// Pooled vector of one image's feature map: clinical ROI pooling when a mask
// is present, plain GAP otherwise.
inline Tensor pool_features(const Tensor& features, const PreparedImage& image) {
  return image.mask.defined() ? clinical_roi_pool(features, image.mask) : global_avg_pool(features);
}

// Runs all images through the backbone as one batch, then pools and splits
// them into consecutive groups of group_sizes[g] images. Each group yields one
// probability tensor: fused over the group for fusion variants, or a single
// image's prediction (group size 1) otherwise.
struct GroupOutputs {
  std::vector<Tensor> probabilities;
  std::vector<Tensor> pooled;  // per image, in input order
};

inline GroupOutputs forward_groups(FibrosisModel& model, std::span<const PreparedImage> images,
                                   std::span<const std::size_t> group_sizes, bool training) {
  const auto& cfg = model.config();
  std::size_t total = 0;
  for (auto g : group_sizes) {
    if (g == 0) throw DomainError("forward_groups: empty group");
    if (!is_fusion(model.variant()) && g != 1) {
      throw DomainError("forward_groups: image-wise variants take one image per group");
    }
    total += g;
  }
  if (total != images.size() || total == 0) throw DomainError("forward_groups: group sizes do not cover the images");
  std::vector<double> pixels;
  pixels.reserve(total * cfg.input_rows * cfg.input_cols);
  std::vector<int> views;
  for (const auto& im : images) {
    pixels.insert(pixels.end(), im.pixels.data.begin(), im.pixels.data.end());
    views.push_back(im.view);
  }
  const Tensor batch({total, 1, cfg.input_rows, cfg.input_cols}, std::move(pixels));
  const Tensor features = model.backbone(batch, views, training);
  GroupOutputs out;
  for (std::size_t n = 0; n < total; ++n) out.pooled.push_back(pool_features(select(features, n), images[n]));
  std::size_t offset = 0;
  for (auto g : group_sizes) {
    const std::span<const Tensor> group(out.pooled.data() + offset, g);
    const Tensor fused = is_fusion(model.variant()) ? ghif_fuse(group) : group[0];
    out.probabilities.push_back(sigmoid(model.head(fused)));
    offset += g;
  }
  return out;
}

// Study-wise probability from the images at `subset`. Fusion variants fuse the
// pooled features; image-wise variants take the median of image predictions.
inline double predict_study(const Study& study, std::span<const std::size_t> subset, FibrosisModel& model) {
  if (subset.empty()) throw DomainError("predict_study: empty image subset");
  std::vector<PreparedImage> images;
  for (auto k : subset) {
    if (k >= study.images.size()) throw DomainError("predict_study: image index out of range");
    images.push_back(prepare_image(study.images[k], model));
  }
  if (is_fusion(model.variant())) {
    const std::size_t sizes[] = {images.size()};
    return forward_groups(model, images, sizes, false).probabilities[0].item();
  }
  const std::vector<std::size_t> sizes(images.size(), 1);
  std::vector<double> probs;
  for (const auto& p : forward_groups(model, images, sizes, false).probabilities) probs.push_back(p.item());
  return median_late_fusion(probs);
}

inline double predict_study(const Study& study, FibrosisModel& model) {
  std::vector<std::size_t> all(study.images.size());
  for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
  return predict_study(study, all, model);
}

// Image-wise probability f(g(A); w) for the image-wise variants.
inline double predict_image(const PreparedImage& prepared, FibrosisModel& model) {
  if (is_fusion(model.variant())) throw DomainError("predict_image: model uses a fusion head");
  const std::size_t sizes[] = {1};
  return forward_groups(model, std::span(&prepared, 1), sizes, false).probabilities[0].item();
}

inline double predict_image(const Grid<double>& image, int view, const LiverMask& liver, FibrosisModel& model) {
  return predict_image(prepare_image(image, liver, view, model), model);
}

}  // namespace hfus
