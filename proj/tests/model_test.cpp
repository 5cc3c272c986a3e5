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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "gradcheck.hpp"
#include "hfus/model.hpp"
#include "hfus/synthetic.hpp"

namespace hfus {
namespace {

BackboneConfig small_config(std::size_t size, NormKind norm, bool vsp) {
  BackboneConfig c;
  c.input_rows = c.input_cols = size;
  c.widths = {3, 4, 5};
  c.strides = {1, 2, 2};
  c.norm = norm;
  c.vsp_enabled = vsp;
  return c;
}

Study small_study(std::size_t size, std::vector<int> views, std::uint64_t seed = 3, int label = 1) {
  SyntheticStudyRequest req;
  req.seed = seed;
  req.label = label;
  req.views = std::move(views);
  req.params.size = size;
  return generate_synthetic_study(req);
}

void zero_head(FibrosisModel& m) {
  for (double& v : m.head_weight().mutable_values()) v = 0.0;
  for (double& v : m.head_bias().mutable_values()) v = 0.0;
}

Tensor t(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)); }

TEST(BackboneConfigTest, DefaultsAndInvariants) {
  BackboneConfig c;
  EXPECT_EQ(c.input_rows, 64u);
  EXPECT_EQ(c.widths, (std::vector<std::size_t>{16, 32, 64}));
  EXPECT_EQ(c.strides, (std::vector<std::size_t>{1, 2, 2}));
  EXPECT_EQ(c.feature_rows(), 16u);
  EXPECT_NO_THROW(c.validate());
  c.input_rows = 62;  // not divisible by 4
  EXPECT_THROW(c.validate(), DomainError);
  c.input_rows = 4;  // final map 1x1
  c.input_cols = 4;
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(FibrosisModelTest, HeadWidthIsThreeCForFusion) {
  const auto cfg = small_config(16, NormKind::instance, true);
  EXPECT_EQ(FibrosisModel(cfg, Variant::ghif_vsp).head_width(), 15u);
  EXPECT_EQ(FibrosisModel(cfg, Variant::global_fusion).head_width(), 15u);
  EXPECT_EQ(FibrosisModel(cfg, Variant::imagewise_roi).head_width(), 5u);
  EXPECT_THROW(FibrosisModel(small_config(16, NormKind::instance, false), Variant::ghif_vsp), DomainError);
}

TEST(FibrosisModelTest, DefaultVspParameterCount) {
  BackboneConfig c;
  c.vsp_enabled = true;
  const FibrosisModel vsp(c, Variant::ghif_vsp);
  c.vsp_enabled = false;
  const FibrosisModel plain(c, Variant::ghif);
  // Convs: 1*16*9+16, 16*32*9+32, 32*64*9+64; head 3*64+1.
  const std::size_t conv = 160 + 4640 + 18496, head = 193;
  EXPECT_EQ(plain.parameter_count(), conv + 2 * 112 + head);
  EXPECT_EQ(vsp.parameter_count(), conv + 6 * 2 * 112 + head);
  EXPECT_EQ(vsp.norm_parameter_count(), 1344u);
  EXPECT_EQ(vsp.parameter_count() - plain.parameter_count(), 1120u);
}

TEST(FibrosisModelTest, CheckpointNamesFollowTheScheme) {
  const FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp);
  const auto named = m.named_parameters();
  EXPECT_EQ(named.front().first, "stage1.conv.weight");
  EXPECT_EQ(named[2].first, "stage1.norm.view1.gamma");
  EXPECT_EQ(named[13].first, "stage1.norm.view6.beta");
  EXPECT_EQ(named.back().first, "head.bias");
  const FibrosisModel s(small_config(16, NormKind::instance, false), Variant::ghif);
  EXPECT_EQ(s.named_parameters()[2].first, "stage1.norm.shared.gamma");
}

TEST(FibrosisModelTest, CloneIsDeep) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 1);
  FibrosisModel c = m.clone();
  const auto a = m.parameters(), b = c.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_FALSE(a[i].same_storage(b[i]));
  c.head_bias().mutable_values()[0] = 5.0;
  EXPECT_EQ(m.head_bias()[0], 0.0);
}

TEST(ExtractFeaturesTest, ShapeDeterminismAndErrors) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 2);
  const Study st = small_study(16, {1});
  const Grid<double> img = st.images[0].image.normalized();
  const Tensor a = extract_features(img, 1, m);
  EXPECT_EQ(a.shape(), (Shape{5, 4, 4}));
  const Tensor b = extract_features(img, 1, m);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  EXPECT_THROW(extract_features(Grid<double>(8, 8), 1, m), ShapeError);
  EXPECT_THROW(extract_features(img, 7, m), DomainError);
}

TEST(ExtractFeaturesTest, IdenticalBanksMakeViewIrrelevant) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 2);
  const Grid<double> img = small_study(16, {1}).images[0].image.normalized();
  const Tensor v1 = extract_features(img, 1, m);
  for (int v = 2; v <= kNumViews; ++v) {
    const Tensor a = extract_features(img, v, m);
    EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), v1.values().begin()));
  }
}

TEST(ExtractFeaturesTest, PerturbingOneBankOnlyMovesThatView) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 2);
  const Grid<double> img = small_study(16, {1}).images[0].image.normalized();
  const Tensor before = extract_features(img, 1, m);
  const auto theta_before = serialize_theta(m);
  auto* bank = m.stages()[0].norm.bank();
  for (double& g : const_cast<Tensor&>(vsp_select(*bank, 2).gamma).mutable_values()) g *= 1.5;
  const Tensor v1 = extract_features(img, 1, m);
  const Tensor v2 = extract_features(img, 2, m);
  EXPECT_TRUE(std::equal(v1.values().begin(), v1.values().end(), before.values().begin()));
  double diff = 0;
  for (std::size_t i = 0; i < v2.numel(); ++i) diff = std::max(diff, std::abs(v2[i] - v1[i]));
  EXPECT_GT(diff, 1e-6);
  EXPECT_EQ(serialize_theta(m), theta_before);
}

TEST(DownsampleMaskTest, Examples) {
  BinaryMask ones(4, 4, 1), zeros(4, 4, 0), quad(4, 4, 0);
  const Tensor o = downsample_mask(ones, 2, 2);
  EXPECT_EQ(std::vector<double>(o.values().begin(), o.values().end()), (std::vector<double>{1, 1, 1, 1}));
  const Tensor z = downsample_mask(zeros, 2, 2);
  EXPECT_EQ(std::count(z.values().begin(), z.values().end(), 0.0), 4);
  quad(0, 2) = quad(0, 3) = quad(1, 2) = quad(1, 3) = 1;
  const Tensor q = downsample_mask(quad, 2, 2);
  EXPECT_EQ(std::vector<double>(q.values().begin(), q.values().end()), (std::vector<double>{0, 1, 0, 0}));
  // Half coverage binarizes to 1, a quarter to 0.
  BinaryMask half(2, 2, 0);
  half(0, 0) = half(0, 1) = 1;
  EXPECT_EQ(downsample_mask(half, 1, 1)[0], 1.0);
  half(0, 1) = 0;
  EXPECT_EQ(downsample_mask(half, 1, 1)[0], 0.0);
  EXPECT_THROW(downsample_mask(ones, 3, 3), ShapeError);
}

TEST(ClinicalRoiPoolTest, Examples) {
  const Tensor ones = Tensor::full({2, 2, 2}, 1.0);
  const Tensor m1 = Tensor::full({2, 2}, 1.0);
  const Tensor p = clinical_roi_pool(ones, m1);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], 1.0);
  // Full-area divisor: (1 + 2) / 4.
  EXPECT_EQ(clinical_roi_pool(t({1, 2, 2}, {1, 2, 3, 4}), t({2, 2}, {1, 1, 0, 0}))[0], 0.75);
  EXPECT_EQ(clinical_roi_pool(ones, Tensor::zeros({2, 2}))[0], 0.0);
  EXPECT_THROW(clinical_roi_pool(ones, Tensor::zeros({3, 2})), ShapeError);
}

TEST(ClinicalRoiPoolTest, AllOnesMaskEqualsGap) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = testing::random_tensor({3, 4, 5}, rng, false);
    const Tensor p = clinical_roi_pool(a, Tensor::full({4, 5}, 1.0));
    const Tensor g = global_avg_pool(a);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p[c], g[c], 1e-12);
  }
}

TEST(ClinicalRoiPoolTest, ShrinkingTheMaskNeverIncreasesNonNegativeFeatures) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor a = testing::random_tensor({3, 4, 4}, rng, false, 0.0, 1.0);
    std::vector<double> m(16);
    for (double& v : m) v = static_cast<double>(rng.below(2));
    std::vector<double> smaller = m;
    smaller[rng.below(16)] = 0.0;
    const Tensor big = clinical_roi_pool(a, t({4, 4}, m));
    const Tensor small = clinical_roi_pool(a, t({4, 4}, smaller));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_LE(small[c], big[c]);
  }
}

TEST(GhifFuseTest, Examples) {
  const std::vector<Tensor> one{t({2}, {0.5, -1.0})};
  const Tensor f1 = ghif_fuse(one);
  EXPECT_EQ(std::vector<double>(f1.values().begin(), f1.values().end()),
            (std::vector<double>{0.5, -1.0, 0, 0, 0.5, -1.0}));
  const std::vector<Tensor> two{t({2}, {1, 0}), t({2}, {3, 2})};
  const Tensor f2 = ghif_fuse(two);
  EXPECT_EQ(std::vector<double>(f2.values().begin(), f2.values().end()), (std::vector<double>{2, 1, 1, 1, 3, 2}));
  const std::vector<Tensor> swapped{two[1], two[0]};
  const Tensor f3 = ghif_fuse(swapped);
  EXPECT_TRUE(std::equal(f2.values().begin(), f2.values().end(), f3.values().begin()));
  EXPECT_THROW(ghif_fuse(std::vector<Tensor>{}), DomainError);
}

TEST(GhifFuseTest, WidthAndDegeneracyForEveryCardinality) {
  Rng rng(3);
  for (std::size_t k = 1; k <= kMaxStudyImages; ++k) {
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < k; ++i) g.push_back(testing::random_tensor({7}, rng, false));
    const Tensor f = ghif_fuse(g);
    ASSERT_EQ(f.numel(), 21u);
    if (k == 1) {
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_EQ(f[7 + c], 0.0);
        EXPECT_EQ(f[c], f[14 + c]);
      }
    }
  }
}

TEST(GhifFuseTest, PermutationInvariance) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(kMaxStudyImages);
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < k; ++i) g.push_back(testing::random_tensor({6}, rng, false));
    const Tensor base = ghif_fuse(g);
    rng.shuffle(g.begin(), g.end());
    const Tensor perm = ghif_fuse(g);
    for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(base[i], perm[i], 1e-12);
  }
}

TEST(MedianLateFusionTest, Examples) {
  EXPECT_EQ(median_late_fusion(std::vector<double>{0.2, 0.7, 0.9}), 0.7);
  EXPECT_EQ(median_late_fusion(std::vector<double>{0.9, 0.2, 0.7}), 0.7);
  EXPECT_EQ(median_late_fusion(std::vector<double>{0.4}), 0.4);
  EXPECT_EQ(median_late_fusion(std::vector<double>{0.2, 0.8}), 0.5);
  EXPECT_THROW(median_late_fusion(std::vector<double>{}), DomainError);
  EXPECT_THROW(median_late_fusion(std::vector<double>{1.5}), DomainError);
}

TEST(PredictStudyTest, ZeroHeadGivesOneHalf) {
  for (Variant v : {Variant::imagewise, Variant::imagewise_roi, Variant::global_fusion, Variant::ghif}) {
    FibrosisModel m(small_config(16, NormKind::instance, false), v, 5);
    zero_head(m);
    EXPECT_EQ(predict_study(small_study(16, {1, 3, 5}), m), 0.5) << to_string(v);
  }
}

TEST(PredictStudyTest, SubsetOrderDoesNotMatter) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 6);
  const Study st = small_study(16, {1, 2, 3, 4, 5});
  std::vector<std::size_t> idx{0, 1, 2, 3, 4};
  const double base = predict_study(st, idx, m);
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    rng.shuffle(idx.begin(), idx.end());
    EXPECT_NEAR(predict_study(st, idx, m), base, 1e-12);
  }
}

TEST(PredictStudyTest, EveryCardinalityFrom1To14) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 8);
  const std::size_t params = m.parameter_count();
  std::vector<int> views;
  for (std::size_t k = 0; k < kMaxStudyImages; ++k) views.push_back(static_cast<int>(k % 6) + 1);
  const Study st = small_study(16, views);
  for (std::size_t k = 1; k <= kMaxStudyImages; ++k) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), 0);
    const double p = predict_study(st, idx, m);
    EXPECT_TRUE(std::isfinite(p));
    EXPECT_GT(p, 0.0);
    EXPECT_LT(p, 1.0);
  }
  EXPECT_EQ(m.parameter_count(), params);
}

TEST(PredictStudyTest, ImagewiseUsesTheMedianOfImagePredictions) {
  FibrosisModel m(small_config(16, NormKind::instance, false), Variant::imagewise_roi, 9);
  const Study st = small_study(16, {1, 2, 3});
  std::vector<double> each;
  for (const auto& im : st.images) each.push_back(predict_image(prepare_image(im, m), m));
  std::sort(each.begin(), each.end());
  EXPECT_EQ(predict_study(st, m), each[1]);
}

TEST(PredictImageTest, ZeroHeadAndAllOnesMaskEquivalence) {
  FibrosisModel roi(small_config(16, NormKind::instance, false), Variant::imagewise_roi, 10);
  const Study st = small_study(16, {2});
  const Grid<double> img = st.images[0].image.normalized();
  FibrosisModel plain = roi.clone();
  // Same weights, different pooling path.
  FibrosisModel gap(small_config(16, NormKind::instance, false), Variant::imagewise, 10);
  const auto src = roi.parameters(), dst = gap.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto out = const_cast<Tensor&>(dst[i]).mutable_values();
    std::copy(src[i].values().begin(), src[i].values().end(), out.begin());
  }
  PreparedImage with_mask{img, 2, Tensor::full({4, 4}, 1.0)};
  EXPECT_NEAR(predict_image(with_mask, roi), predict_image(img, 2, st.images[0].liver, gap), 1e-12);
  const double again = predict_image(img, 2, st.images[0].liver, gap);
  EXPECT_EQ(again, predict_image(img, 2, st.images[0].liver, gap));
  zero_head(plain);
  EXPECT_EQ(predict_image(img, 2, st.images[0].liver, plain), 0.5);
  FibrosisModel fused(small_config(16, NormKind::instance, false), Variant::ghif, 10);
  EXPECT_THROW(predict_image(img, 2, st.images[0].liver, fused), DomainError);
}

// Gradient of the study loss with respect to every parameter, against
// central differences, for a 2-image toy study. The loss is a scalar near 1,
// so the difference quotient carries about 1e-10 of rounding noise; some
// components are small enough (~1e-7) for that noise to dominate a relative
// error, so components below 1e-6 are held to an absolute bound.
class EndToEndGradientTest : public ::testing::TestWithParam<NormKind> {};

TEST_P(EndToEndGradientTest, MatchesFiniteDifferences) {
  const bool batch = GetParam() == NormKind::batch;
  FibrosisModel m(small_config(16, GetParam(), !batch), batch ? Variant::ghif : Variant::ghif_vsp, 11);
  // Move the norm affines and head away from their symmetric initial values.
  Rng rng(12);
  for (auto& p : m.parameters())
    for (double& v : p.mutable_values()) v += rng.uniform(-0.2, 0.2);
  ASSERT_LE(m.parameter_count(), 5000u);
  const Study st = small_study(16, {2, 5});
  std::vector<PreparedImage> images;
  for (const auto& im : st.images) images.push_back(prepare_image(im, m));
  const std::vector<std::size_t> sizes{2};
  std::vector<Tensor> params = m.parameters();
  const auto result = testing::grad_check(
      params,
      [&](const std::vector<Tensor>&) {
        return bce_loss(forward_groups(m, images, sizes, true).probabilities[0], st.label);
      },
      13, 1e-6, 1e-6);
  EXPECT_EQ(result.checked, m.parameter_count());
  EXPECT_LT(result.max_rel_error, 1e-4);
  EXPECT_LT(result.max_abs_error, 1e-9);
}

INSTANTIATE_TEST_SUITE_P(Norms, EndToEndGradientTest, ::testing::Values(NormKind::instance, NormKind::batch),
                         [](const auto& info) { return std::string(to_string(info.param)); });

TEST(InstanceVsBatchTest, InstanceNormPredictionIgnoresBatchCompanions) {
  FibrosisModel m(small_config(16, NormKind::instance, true), Variant::ghif_vsp, 14);
  const Study a = small_study(16, {1, 2}, 20, 1);
  const Study b = small_study(16, {3, 4, 5}, 21, 0);
  std::vector<PreparedImage> alone, together;
  for (const auto& im : a.images) alone.push_back(prepare_image(im, m));
  together = alone;
  for (const auto& im : b.images) together.push_back(prepare_image(im, m));
  const std::vector<std::size_t> one{2}, two{2, 3};
  const double pa = forward_groups(m, alone, one, true).probabilities[0].item();
  const double pt = forward_groups(m, together, two, true).probabilities[0].item();
  EXPECT_NEAR(pa, pt, 1e-12);
}

TEST(InstanceVsBatchTest, BatchNormTrainingCouplesStudies) {
  FibrosisModel m(small_config(16, NormKind::batch, false), Variant::ghif, 14);
  const Study a = small_study(16, {1, 2}, 20, 1);
  const Study b = small_study(16, {3, 4, 5}, 21, 0);
  std::vector<PreparedImage> alone, together;
  for (const auto& im : a.images) alone.push_back(prepare_image(im, m));
  together = alone;
  for (const auto& im : b.images) together.push_back(prepare_image(im, m));
  const std::vector<std::size_t> one{2}, two{2, 3};
  const auto ra = forward_groups(m, alone, one, true);
  const auto rt = forward_groups(m, together, two, true);
  double diff = 0;
  for (std::size_t c = 0; c < ra.pooled[0].numel(); ++c) diff = std::max(diff, std::abs(ra.pooled[0][c] - rt.pooled[0][c]));
  EXPECT_GT(diff, 1e-6);
}

}  // namespace
}  // namespace hfus
