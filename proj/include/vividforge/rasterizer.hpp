#pragma once

#include <cstdint>
#include <vector>

#include "vividforge/tensor.hpp"

namespace vividforge {

// Orthographic camera. A model-space point (x,y,z) lands on the image plane
// at px = W/2 + s*x, py = H/2 - s*y with s = scale_factor * min(W,H); depth
// is -z (camera looks down +z, larger z is closer). Pixel (ix,iy) has its
// center at (ix+0.5, iy+0.5).
struct Camera {
  int64_t width = 64;
  int64_t height = 64;
  double scale_factor = 0.45;

  double scale() const {
    return scale_factor * double(width < height ? width : height);
  }
};

struct RenderOutput {
  Tensor color;  // [H,W,3]
  Tensor mask;   // [H,W], exactly 0 or 1
  Tensor depth;  // [H,W], kEmptyDepth where nothing was drawn
  std::vector<int32_t> tri_index;  // H*W entries, -1 where empty
};

constexpr double kEmptyDepth = 1e30;

// [n,3] model space -> [n,2] pixel coordinates (x then y).
Tensor project_vertices(const Tensor& verts, const Camera& cam);

// Software z-buffer rasterization of an indexed triangle mesh with
// per-vertex colors, interpolated with perspective-free barycentrics.
//
// The exact per-pixel arithmetic (replicated by the test oracle):
//   * project all three vertices: (ax,ay,da), (bx,by,db), (cx,cy,dc),
//     where d = -z;
//   * signed doubled area with y-down screen coords:
//       area2 = (bx-ax)*(cy-ay) - (by-ay)*(cx-ax)
//     Faces wound CCW in model space seen from +z have area2 < 0; triangles
//     with area2 >= 0 are culled (backfaces and degenerates).
//   * canonicalize by swapping vertices B and C, making area2c = -area2 > 0.
//   * edge function against pixel center p = (ix+0.5, iy+0.5):
//       E(a,b,p) = (bx-ax)*(py-ay) - (by-ay)*(px-ax)
//     computed for edges (B,C), (C,A), (A,B) in canonical order. A pixel is
//     covered when every E > 0, or E == 0 on edges that satisfy the top-left
//     rule: dy == 0 && dx > 0 (top) or dy < 0 (left), with (dx,dy) = b - a.
//   * barycentrics: l0 = E(B,C,p)/area2c, l1 = E(C,A,p)/area2c,
//     l2 = E(A,B,p)/area2c; interpolation accumulates strictly left to
//     right: v = l0*v0, v += l1*v1, v += l2*v2.
//   * depth test: strictly smaller depth wins; an exact tie keeps the lower
//     triangle index.
// Triangles are processed in index order within per-row bins, so the result
// is identical for any thread count.
RenderOutput render_mesh(const Tensor& verts, const std::vector<int64_t>& tris,
                         const Tensor& vert_colors, const Camera& cam);

// out = fg*mask + bg*(1-mask). Throws unless every mask entry is exactly 0
// or 1 and shapes agree.
Tensor composite(const Tensor& fg, const Tensor& bg, const Tensor& mask);

// Isotropic Gaussian heatmaps, one channel per point: [K,H,W] with
// map[k,y,x] = exp(-((x+0.5-px)^2 + (y+0.5-py)^2) / (2 sigma^2)).
Tensor gaussian_maps(const Tensor& points, int64_t h, int64_t w, double sigma);

// Heatmap difference of the first `count` rows of two landmark arrays
// (driven minus reference): [count,H,W].
Tensor lip_gaussian_diff(const Tensor& lm_driven, const Tensor& lm_ref,
                         int64_t count, int64_t h, int64_t w, double sigma);

}  // namespace vividforge
