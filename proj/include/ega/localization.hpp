#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "ega/common.hpp"

namespace ega {

// Per-class spatial score map at feature resolution, plus the image
// resolution it will be scored against.
struct CamMap {
  int height = 0, width = 0;
  std::vector<float> values;
  int class_index = 0;
  int target_height = 0, target_width = 0;
};

// Half-open pixel box [x0, x1) x [y0, y1).
struct BoundingBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int64_t area() const { return int64_t(x1 - x0) * int64_t(y1 - y0); }
  bool valid_in(int W, int H) const {
    return 0 <= x0 && x0 < x1 && x1 <= W && 0 <= y0 && y0 < y1 && y1 <= H;
  }
  bool operator==(const BoundingBox& o) const {
    return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
  }
};

// ---------------------------------------------------------------------------
// bilinear upsample (corner-aligned) + min-max normalization to [0, 1]
// ---------------------------------------------------------------------------

inline std::vector<float> upsample_cam(const CamMap& cam, int H, int W) {
  if (H <= 0 || W <= 0) throw DimensionError("upsample_cam: target size must be positive");
  if (H < cam.height || W < cam.width)
    throw DimensionError("upsample_cam: target " + std::to_string(W) + "x" + std::to_string(H) +
                         " smaller than source " + std::to_string(cam.width) + "x" +
                         std::to_string(cam.height));
  if (cam.height <= 0 || cam.width <= 0 || int(cam.values.size()) != cam.height * cam.width)
    throw DimensionError("upsample_cam: malformed source map");
  for (float v : cam.values)
    if (!std::isfinite(v)) throw NumericError("upsample_cam: NaN or Inf in map");

  std::vector<float> out(size_t(H) * W);
  const double sy_step = H > 1 ? double(cam.height - 1) / double(H - 1) : 0.0;
  const double sx_step = W > 1 ? double(cam.width - 1) / double(W - 1) : 0.0;
  for (int oy = 0; oy < H; ++oy) {
    const double sy = oy * sy_step;
    const int y0 = int(sy);
    const int y1 = std::min(y0 + 1, cam.height - 1);
    const double fy = sy - y0;
    for (int ox = 0; ox < W; ++ox) {
      const double sx = ox * sx_step;
      const int x0 = int(sx);
      const int x1 = std::min(x0 + 1, cam.width - 1);
      const double fx = sx - x0;
      const double top = double(cam.values[size_t(y0) * cam.width + x0]) * (1.0 - fx) +
                         double(cam.values[size_t(y0) * cam.width + x1]) * fx;
      const double bot = double(cam.values[size_t(y1) * cam.width + x0]) * (1.0 - fx) +
                         double(cam.values[size_t(y1) * cam.width + x1]) * fx;
      out[size_t(oy) * W + ox] = float(top * (1.0 - fy) + bot * fy);
    }
  }
  float mn = out[0], mx = out[0];
  for (float v : out) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  if (mx - mn < 1e-8f) {
    std::fill(out.begin(), out.end(), 0.0f);
  } else {
    const float s = 1.0f / (mx - mn);
    for (float& v : out) v = (v - mn) * s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// 4-connected component labeling (plain BFS, deterministic scan order)
// ---------------------------------------------------------------------------

struct Component {
  int64_t area = 0;
  BoundingBox box;
};

inline std::vector<Component> label_components(const std::vector<uint8_t>& bin, int H, int W) {
  std::vector<int32_t> label(size_t(H) * W, -1);
  std::vector<Component> comps;
  std::vector<int32_t> queue;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const size_t i = size_t(y) * W + x;
      if (!bin[i] || label[i] >= 0) continue;
      const int32_t id = int32_t(comps.size());
      Component comp;
      comp.box = {x, y, x + 1, y + 1};
      queue.clear();
      queue.push_back(int32_t(i));
      label[i] = id;
      while (!queue.empty()) {
        const int32_t cur = queue.back();
        queue.pop_back();
        const int cy = cur / W, cx = cur % W;
        ++comp.area;
        comp.box.x0 = std::min(comp.box.x0, cx);
        comp.box.x1 = std::max(comp.box.x1, cx + 1);
        comp.box.y0 = std::min(comp.box.y0, cy);
        comp.box.y1 = std::max(comp.box.y1, cy + 1);
        const int ny[4] = {cy - 1, cy + 1, cy, cy};
        const int nx[4] = {cx, cx, cx - 1, cx + 1};
        for (int k = 0; k < 4; ++k) {
          if (ny[k] < 0 || ny[k] >= H || nx[k] < 0 || nx[k] >= W) continue;
          const size_t j = size_t(ny[k]) * W + nx[k];
          if (bin[j] && label[j] < 0) {
            label[j] = id;
            queue.push_back(int32_t(j));
          }
        }
      }
      comps.push_back(comp);
    }
  return comps;
}

// ---------------------------------------------------------------------------
// box extraction: binarize at tau * max, tight box of the largest component
// ---------------------------------------------------------------------------

inline BoundingBox extract_box(const std::vector<float>& map, int H, int W, float tau) {
  if (!(tau > 0.0f && tau < 1.0f))
    throw ContractError("extract_box: tau must lie in (0, 1), got " + std::to_string(tau));
  if (int(map.size()) != H * W) throw DimensionError("extract_box: map size does not match H*W");
  float mx = 0.0f;
  for (float v : map) mx = std::max(mx, v);
  const BoundingBox full{0, 0, W, H};
  if (mx <= 0.0f) return full;
  const float thr = tau * mx;
  std::vector<uint8_t> bin(map.size());
  bool any = false;
  for (size_t i = 0; i < map.size(); ++i) {
    bin[i] = map[i] >= thr ? 1 : 0;
    any |= bin[i] != 0;
  }
  if (!any) return full;
  auto comps = label_components(bin, H, W);
  const Component* best = &comps[0];
  for (const auto& c : comps) {
    if (c.area > best->area ||
        (c.area == best->area &&
         (c.box.y0 < best->box.y0 || (c.box.y0 == best->box.y0 && c.box.x0 < best->box.x0))))
      best = &c;
  }
  return best->box;
}

inline std::vector<float> default_tau_grid() {
  std::vector<float> taus;
  for (int i = 1; i <= 19; ++i) taus.push_back(float(i) * 0.05f);
  return taus;
}

constexpr float kDefaultTau = 0.2f;

inline std::vector<BoundingBox> threshold_sweep_boxes(const std::vector<float>& map, int H, int W,
                                                      const std::vector<float>& taus) {
  if (taus.empty()) throw ContractError("threshold_sweep_boxes: tau grid is empty");
  std::vector<BoundingBox> boxes;
  boxes.reserve(taus.size());
  for (float tau : taus) boxes.push_back(extract_box(map, H, W, tau));
  return boxes;
}

}  // namespace ega
