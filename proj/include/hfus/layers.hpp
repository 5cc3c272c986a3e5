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

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hfus/error.hpp"
#include "hfus/ops.hpp"
#include "hfus/tensor.hpp"

namespace hfus {

inline constexpr int kNumViews = 6;
inline constexpr double kNormEpsilon = 1e-5;

enum class NormKind { instance, batch };

inline const char* to_string(NormKind kind) { return kind == NormKind::instance ? "instance" : "batch"; }

inline NormKind parse_norm_kind(const std::string& s) {
  if (s == "instance") return NormKind::instance;
  if (s == "batch") return NormKind::batch;
  throw DomainError("unknown norm kind '" + s + "' (expected instance|batch)");
}

// Per-channel scale and shift applied after standardization.
struct NormAffine {
  Tensor gamma;
  Tensor beta;

  static NormAffine identity(std::size_t channels) {
    return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true)};
  }
  std::size_t channels() const { return gamma.numel(); }
};

// One NormAffine per ultrasound view.
struct ViewBank {
  std::array<NormAffine, kNumViews> banks;

  static ViewBank identity(std::size_t channels) {
    ViewBank bank;
    for (auto& b : bank.banks) b = NormAffine::identity(channels);
    return bank;
  }
};

inline void check_view(int view) {
  if (view < 1 || view > kNumViews) {
    throw DomainError("view id " + std::to_string(view) + " outside 1.." + std::to_string(kNumViews));
  }
}

// Affine parameters of `view` (1-based). Returns a reference to the stored
// bank, not a copy.
inline const NormAffine& vsp_select(const ViewBank& bank, int view) {
  check_view(view);
  return bank.banks[static_cast<std::size_t>(view - 1)];
}

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;

  static BatchNormState fresh(std::size_t channels, double momentum = 0.1) {
    return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0), momentum};
  }

  // running <- (1 - momentum) * running + momentum * batch
  void update(const ChannelStats& stats) {
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * stats.mean[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * stats.var[c];
    }
  }
};

inline Tensor instance_norm_forward(const Tensor& x, const NormAffine& affine, double eps = kNormEpsilon) {
  const Tensor normalized = instance_normalize(x, eps);
  const std::vector<Tensor> gammas(x.dim(0), affine.gamma), betas(x.dim(0), affine.beta);
  return channel_affine(normalized, gammas, betas);
}

// Training mode normalizes with batch statistics and updates the running
// statistics; inference mode uses the running statistics.
inline Tensor batch_norm_forward(const Tensor& x, const NormAffine& affine, BatchNormState& state, bool training,
                                 double eps = kNormEpsilon) {
  Tensor normalized;
  if (training) {
    ChannelStats stats;
    normalized = batch_normalize(x, eps, &stats);
    state.update(stats);
  } else {
    normalized = normalize_with(x, state.running_mean, state.running_var, eps);
  }
  const std::vector<Tensor> gammas(x.dim(0), affine.gamma), betas(x.dim(0), affine.beta);
  return channel_affine(normalized, gammas, betas);
}

// A normalization layer of the backbone: instance or batch standardization
// followed by either a single shared affine or a six-view bank.
class NormLayer {
 public:
  NormLayer(NormKind kind, std::size_t channels, bool view_specific, double eps = kNormEpsilon)
      : kind_(kind), channels_(channels), eps_(eps) {
    if (!(eps > 0.0)) throw DomainError("NormLayer: eps must be > 0");
    if (view_specific) {
      bank_ = ViewBank::identity(channels);
    } else {
      shared_ = NormAffine::identity(channels);
    }
    if (kind == NormKind::batch) state_ = BatchNormState::fresh(channels);
  }

  NormKind kind() const { return kind_; }
  std::size_t channels() const { return channels_; }
  bool view_specific() const { return bank_.has_value(); }
  double eps() const { return eps_; }

  // The affine parameters used for images of `view`.
  const NormAffine& affine_for(int view) const {
    check_view(view);
    return bank_ ? vsp_select(*bank_, view) : *shared_;
  }

  ViewBank* bank() { return bank_ ? &*bank_ : nullptr; }
  const ViewBank* bank() const { return bank_ ? &*bank_ : nullptr; }
  NormAffine* shared() { return shared_ ? &*shared_ : nullptr; }
  BatchNormState* state() { return state_ ? &*state_ : nullptr; }
  const BatchNormState* state() const { return state_ ? &*state_ : nullptr; }

  // x is [N,C,H,W]; views[n] selects the affine parameters of sample n.
  Tensor forward(const Tensor& x, std::span<const int> views, bool training) {
    if (x.rank() != 4 || x.dim(1) != channels_) {
      throw ShapeError("NormLayer: expected [N," + std::to_string(channels_) + ",H,W], got " +
                       shape_str(x.shape()));
    }
    if (views.size() != x.dim(0)) {
      throw ShapeError("NormLayer: " + std::to_string(views.size()) + " view ids for batch dim 0 = " +
                       std::to_string(x.dim(0)));
    }
    Tensor normalized;
    if (kind_ == NormKind::instance) {
      normalized = instance_normalize(x, eps_);
    } else if (training) {
      ChannelStats stats;
      normalized = batch_normalize(x, eps_, &stats);
      state_->update(stats);
    } else {
      normalized = normalize_with(x, state_->running_mean, state_->running_var, eps_);
    }
    std::vector<Tensor> gammas, betas;
    gammas.reserve(views.size());
    betas.reserve(views.size());
    for (int v : views) {
      const NormAffine& a = affine_for(v);
      gammas.push_back(a.gamma);
      betas.push_back(a.beta);
    }
    return channel_affine(normalized, gammas, betas);
  }

  // All affine tensors, shared first or view 1..6 in order.
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    if (bank_) {
      for (const auto& b : bank_->banks) {
        out.push_back(b.gamma);
        out.push_back(b.beta);
      }
    } else {
      out.push_back(shared_->gamma);
      out.push_back(shared_->beta);
    }
    return out;
  }

 private:
  NormKind kind_;
  std::size_t channels_;
  double eps_;
  std::optional<ViewBank> bank_;
  std::optional<NormAffine> shared_;
  std::optional<BatchNormState> state_;
};

}  // namespace hfus
