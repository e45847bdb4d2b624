#include <gtest/gtest.h>

#include <algorithm>
#include <stack>

#include "ega/localization.hpp"
#include "testutil.hpp"

using namespace ega;

namespace {

CamMap make_cam(int h, int w, std::vector<float> v) {
  CamMap c;
  c.height = h;
  c.width = w;
  c.values = std::move(v);
  c.target_height = 64;
  c.target_width = 64;
  return c;
}

// independent flood-fill oracle (explicit stack, column-major start scan so
// the traversal differs from the implementation)
std::vector<Component> oracle_components(const std::vector<uint8_t>& bin, int H, int W) {
  std::vector<int> label(size_t(H) * W, -1);
  std::vector<Component> comps;
  for (int x = 0; x < W; ++x)
    for (int y = 0; y < H; ++y) {
      size_t i = size_t(y) * W + x;
      if (!bin[i] || label[i] >= 0) continue;
      Component c;
      c.box = {x, y, x + 1, y + 1};
      std::stack<std::pair<int, int>> st;
      st.push({y, x});
      label[i] = int(comps.size());
      while (!st.empty()) {
        auto [cy, cx] = st.top();
        st.pop();
        ++c.area;
        c.box.x0 = std::min(c.box.x0, cx);
        c.box.x1 = std::max(c.box.x1, cx + 1);
        c.box.y0 = std::min(c.box.y0, cy);
        c.box.y1 = std::max(c.box.y1, cy + 1);
        const int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int ny = cy + dy[k], nx = cx + dx[k];
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          size_t j = size_t(ny) * W + nx;
          if (bin[j] && label[j] < 0) {
            label[j] = int(comps.size());
            st.push({ny, nx});
          }
        }
      }
      comps.push_back(c);
    }
  return comps;
}

bool same_component_sets(std::vector<Component> a, std::vector<Component> b) {
  auto key = [](const Component& c) {
    return std::tuple(c.box.y0, c.box.x0, c.box.y1, c.box.x1, c.area);
  };
  auto lt = [&](const Component& l, const Component& r) { return key(l) < key(r); };
  std::sort(a.begin(), a.end(), lt);
  std::sort(b.begin(), b.end(), lt);
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (key(a[i]) != key(b[i])) return false;
  return true;
}

}  // namespace

TEST(UpsampleCam, SameSizeOnlyNormalizes) {
  auto cam = make_cam(2, 2, {1.0f, 3.0f, 2.0f, 5.0f});
  auto up = upsample_cam(cam, 2, 2);
  EXPECT_FLOAT_EQ(up[0], 0.0f);
  EXPECT_FLOAT_EQ(up[1], 0.5f);
  EXPECT_FLOAT_EQ(up[2], 0.25f);
  EXPECT_FLOAT_EQ(up[3], 1.0f);
}

TEST(UpsampleCam, ConstantMapBecomesAllZeros) {
  auto cam = make_cam(1, 1, {4.2f});
  auto up = upsample_cam(cam, 4, 4);
  for (float v : up) EXPECT_FLOAT_EQ(v, 0.0f);
}

TEST(UpsampleCam, BilinearMidpointsByHand) {
  // [[0,1],[0,1]] widened to 2x4: interior columns sit at 1/3 and 2/3
  auto cam = make_cam(2, 2, {0.0f, 1.0f, 0.0f, 1.0f});
  auto up = upsample_cam(cam, 2, 4);
  for (int row = 0; row < 2; ++row) {
    EXPECT_NEAR(up[size_t(row) * 4 + 0], 0.0f, 1e-6f);
    EXPECT_NEAR(up[size_t(row) * 4 + 1], 1.0f / 3.0f, 1e-6f);
    EXPECT_NEAR(up[size_t(row) * 4 + 2], 2.0f / 3.0f, 1e-6f);
    EXPECT_NEAR(up[size_t(row) * 4 + 3], 1.0f, 1e-6f);
  }
}

TEST(UpsampleCam, BadTargetRejected) {
  auto cam = make_cam(2, 2, {0, 1, 2, 3});
  EXPECT_THROW(upsample_cam(cam, 0, 4), DimensionError);
  EXPECT_THROW(upsample_cam(cam, 1, 4), DimensionError);  // smaller than source
}

TEST(ExtractBox, RectangleByInspection) {
  const int H = 8, W = 10;
  std::vector<float> map(size_t(H) * W, 0.0f);
  for (int y = 2; y < 5; ++y)
    for (int x = 3; x < 8; ++x) map[size_t(y) * W + x] = 1.0f;
  auto box = extract_box(map, H, W, 0.2f);
  EXPECT_EQ(box, (BoundingBox{3, 2, 8, 5}));
}

TEST(ExtractBox, AllZeroFallsBackToFullImage) {
  std::vector<float> map(6 * 7, 0.0f);
  auto box = extract_box(map, 6, 7, 0.3f);
  EXPECT_EQ(box, (BoundingBox{0, 0, 7, 6}));
}

TEST(ExtractBox, LargestComponentWins) {
  const int H = 10, W = 12;
  std::vector<float> map(size_t(H) * W, 0.0f);
  // blob A: 2x3 = 6 pixels, blob B: 4x5 = 20 pixels
  for (int y = 1; y < 3; ++y)
    for (int x = 1; x < 4; ++x) map[size_t(y) * W + x] = 1.0f;
  for (int y = 5; y < 9; ++y)
    for (int x = 6; x < 11; ++x) map[size_t(y) * W + x] = 1.0f;
  auto box = extract_box(map, H, W, 0.5f);
  EXPECT_EQ(box, (BoundingBox{6, 5, 11, 9}));
}

TEST(ExtractBox, RampThresholdGeometry) {
  const int H = 4, W = 64;
  std::vector<float> map(size_t(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) map[size_t(y) * W + x] = float(x) / float(W - 1);
  auto box = extract_box(map, H, W, 0.5f);
  EXPECT_EQ(box, (BoundingBox{32, 0, 64, 4}));
}

TEST(ExtractBox, BadTauRejected) {
  std::vector<float> map(4, 1.0f);
  EXPECT_THROW(extract_box(map, 2, 2, 0.0f), ContractError);
  EXPECT_THROW(extract_box(map, 2, 2, 1.0f), ContractError);
}

TEST(ExtractBox, AlwaysYieldsValidBox) {
  RandomSource rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int H = 1 + int(rng.uniform_int(20)), W = 1 + int(rng.uniform_int(20));
    std::vector<float> map(size_t(H) * W);
    for (auto& v : map) v = rng.uniform() < 0.3f ? 0.0f : rng.uniform();
    const float tau = 0.05f + 0.9f * rng.uniform();
    auto box = extract_box(map, H, W, tau);
    EXPECT_TRUE(box.valid_in(W, H)) << "H=" << H << " W=" << W << " tau=" << tau;
    EXPECT_GE(box.area(), 1);
  }
}

TEST(ExtractBox, AffineInvarianceThroughNormalization) {
  RandomSource rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const int H = 6, W = 6;
    CamMap cam = make_cam(H, W, {});
    cam.values.resize(size_t(H) * W);
    for (auto& v : cam.values) v = rng.uniform_in(-2.0f, 2.0f);
    CamMap affine = cam;
    const float a = 0.5f + 2.0f * rng.uniform(), b = rng.uniform_in(-5.0f, 5.0f);
    for (auto& v : affine.values) v = a * v + b;
    auto m1 = upsample_cam(cam, 12, 12);
    auto m2 = upsample_cam(affine, 12, 12);
    const float tau = 0.1f + 0.8f * rng.uniform();
    EXPECT_EQ(extract_box(m1, 12, 12, tau), extract_box(m2, 12, 12, tau));
  }
}

TEST(ThresholdSweep, SingleBlobIsThresholdInvariant) {
  const int H = 6, W = 6;
  std::vector<float> map(size_t(H) * W, 0.0f);
  for (int y = 1; y < 4; ++y)
    for (int x = 2; x < 5; ++x) map[size_t(y) * W + x] = 1.0f;
  auto boxes = threshold_sweep_boxes(map, H, W, default_tau_grid());
  EXPECT_EQ(boxes.size(), 19u);
  for (const auto& b : boxes) EXPECT_EQ(b, (BoundingBox{2, 1, 5, 4}));
}

TEST(ThresholdSweep, EmptyGridRejected) {
  std::vector<float> map(4, 1.0f);
  EXPECT_THROW(threshold_sweep_boxes(map, 2, 2, {}), ContractError);
}

TEST(Components, MatchesFloodFillOracleExactly) {
  RandomSource rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int H = 2 + int(rng.uniform_int(31)), W = 2 + int(rng.uniform_int(31));
    std::vector<uint8_t> bin(size_t(H) * W);
    const float density = 0.2f + 0.6f * rng.uniform();
    for (auto& v : bin) v = rng.uniform() < density ? 1 : 0;
    EXPECT_TRUE(same_component_sets(label_components(bin, H, W), oracle_components(bin, H, W)))
        << "H=" << H << " W=" << W << " trial=" << trial;
  }
}
