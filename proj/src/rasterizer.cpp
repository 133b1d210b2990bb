#include "vividforge/rasterizer.hpp"

#include <algorithm>
#include <cmath>

#include "vividforge/error.hpp"
#include "vividforge/threading.hpp"

namespace vividforge {

Tensor project_vertices(const Tensor& verts, const Camera& cam) {
  if (verts.ndim() != 2 || verts.dim(1) != 3) {
    throw DataError("project_vertices: vertices must be [n,3], got " +
                    verts.shape_str());
  }
  if (!verts.all_finite()) {
    throw NumericError("project_vertices: non-finite vertex positions");
  }
  double s = cam.scale();
  double cx = double(cam.width) / 2.0, cy = double(cam.height) / 2.0;
  Tensor out = Tensor::zeros({verts.dim(0), 2});
  for (int64_t i = 0; i < verts.dim(0); ++i) {
    out.at2(i, 0) = cx + s * verts.at2(i, 0);
    out.at2(i, 1) = cy - s * verts.at2(i, 1);
  }
  return out;
}

RenderOutput render_mesh(const Tensor& verts, const std::vector<int64_t>& tris,
                         const Tensor& vert_colors, const Camera& cam) {
  if (verts.ndim() != 2 || verts.dim(1) != 3) {
    throw DataError("render_mesh: vertices must be [n,3]");
  }
  if (vert_colors.ndim() != 2 || vert_colors.dim(1) != 3 ||
      vert_colors.dim(0) != verts.dim(0)) {
    throw DataError("render_mesh: colors must be [n,3] matching vertices");
  }
  if (tris.size() % 3 != 0) throw DataError("render_mesh: bad triangle list");
  if (!verts.all_finite() || !vert_colors.all_finite()) {
    throw NumericError("render_mesh: non-finite input");
  }
  int64_t n = verts.dim(0);
  for (int64_t idx : tris) {
    if (idx < 0 || idx >= n) {
      throw DataError("render_mesh: triangle index out of range");
    }
  }

  int64_t W = cam.width, H = cam.height;
  RenderOutput out;
  out.color = Tensor::zeros({H, W, 3});
  out.mask = Tensor::zeros({H, W});
  out.depth = Tensor::full({H, W}, kEmptyDepth);
  out.tri_index.assign(size_t(H * W), -1);

  Tensor proj = project_vertices(verts, cam);
  int64_t ntri = int64_t(tris.size()) / 3;

  // Precompute canonical per-triangle data and bin triangles by the rows
  // their bounding box touches.
  struct Pre {
    double ax, ay, bx, by, cx, cy;  // canonical order (B and C swapped)
    double da, db, dc;
    double area2c;
    int64_t x_lo, x_hi, y_lo, y_hi;
    bool alive;
  };
  std::vector<Pre> pre(static_cast<size_t>(ntri));
  std::vector<std::vector<int32_t>> row_bins(static_cast<size_t>(H));
  for (int64_t t = 0; t < ntri; ++t) {
    Pre& p = pre[size_t(t)];
    p.alive = false;
    int64_t ia = tris[size_t(t * 3)], ib = tris[size_t(t * 3 + 1)],
            ic = tris[size_t(t * 3 + 2)];
    double ax = proj.at2(ia, 0), ay = proj.at2(ia, 1);
    double bx = proj.at2(ib, 0), by = proj.at2(ib, 1);
    double cx = proj.at2(ic, 0), cy = proj.at2(ic, 1);
    double area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
    if (area2 >= 0.0) continue;  // backface or degenerate
    // Canonical order: swap B and C so the signed area goes positive.
    p.ax = ax;
    p.ay = ay;
    p.bx = cx;
    p.by = cy;
    p.cx = bx;
    p.cy = by;
    p.da = -verts.at2(ia, 2);
    p.db = -verts.at2(ic, 2);
    p.dc = -verts.at2(ib, 2);
    p.area2c = (p.bx - p.ax) * (p.cy - p.ay) - (p.by - p.ay) * (p.cx - p.ax);
    double minx = std::min({p.ax, p.bx, p.cx});
    double maxx = std::max({p.ax, p.bx, p.cx});
    double miny = std::min({p.ay, p.by, p.cy});
    double maxy = std::max({p.ay, p.by, p.cy});
    p.x_lo = std::max<int64_t>(0, int64_t(std::ceil(minx - 0.5)));
    p.x_hi = std::min<int64_t>(W - 1, int64_t(std::floor(maxx - 0.5)));
    p.y_lo = std::max<int64_t>(0, int64_t(std::ceil(miny - 0.5)));
    p.y_hi = std::min<int64_t>(H - 1, int64_t(std::floor(maxy - 0.5)));
    if (p.x_lo > p.x_hi || p.y_lo > p.y_hi) continue;
    p.alive = true;
    for (int64_t y = p.y_lo; y <= p.y_hi; ++y) {
      row_bins[size_t(y)].push_back(int32_t(t));
    }
  }

  // Colors in canonical order are fetched inside the pixel loop; keep the
  // original index handy.
  auto color_of = [&](int64_t t, int which, int64_t chan) {
    // which: 0 = A, 1 = canonical B (original C), 2 = canonical C (orig. B)
    static const int remap[3] = {0, 2, 1};
    int64_t vid = tris[size_t(t * 3 + remap[which])];
    return vert_colors.at2(vid, chan);
  };

  // Top-left rule for an edge a -> b with (dx,dy) = b - a.
  auto edge_accepts_zero = [](double dx, double dy) {
    return (dy == 0.0 && dx > 0.0) || dy < 0.0;
  };

  parallel_for(H, [&](int64_t y0, int64_t y1) {
    for (int64_t iy = y0; iy < y1; ++iy) {
      double py = double(iy) + 0.5;
      for (int32_t t : row_bins[size_t(iy)]) {
        const Pre& p = pre[size_t(t)];
        for (int64_t ix = p.x_lo; ix <= p.x_hi; ++ix) {
          double px = double(ix) + 0.5;
          // Edges in canonical order: (B,C) opposite A, (C,A), (A,B).
          double e0 = (p.cx - p.bx) * (py - p.by) - (p.cy - p.by) * (px - p.bx);
          double e1 = (p.ax - p.cx) * (py - p.cy) - (p.ay - p.cy) * (px - p.cx);
          double e2 = (p.bx - p.ax) * (py - p.ay) - (p.by - p.ay) * (px - p.ax);
          bool in0 = e0 > 0.0 || (e0 == 0.0 && edge_accepts_zero(p.cx - p.bx, p.cy - p.by));
          bool in1 = e1 > 0.0 || (e1 == 0.0 && edge_accepts_zero(p.ax - p.cx, p.ay - p.cy));
          bool in2 = e2 > 0.0 || (e2 == 0.0 && edge_accepts_zero(p.bx - p.ax, p.by - p.ay));
          if (!in0 || !in1 || !in2) continue;
          double l0 = e0 / p.area2c;
          double l1 = e1 / p.area2c;
          double l2 = e2 / p.area2c;
          double z = l0 * p.da;
          z += l1 * p.db;
          z += l2 * p.dc;
          int64_t pix = iy * W + ix;
          double cur = out.depth[pix];
          int32_t cur_t = out.tri_index[size_t(pix)];
          if (z < cur || (z == cur && (cur_t < 0 || t < cur_t))) {
            out.depth[pix] = z;
            out.tri_index[size_t(pix)] = t;
            out.mask[pix] = 1.0;
            for (int64_t c = 0; c < 3; ++c) {
              double v = l0 * color_of(t, 0, c);
              v += l1 * color_of(t, 1, c);
              v += l2 * color_of(t, 2, c);
              out.color[pix * 3 + c] = v;
            }
          }
        }
      }
    }
  });
  return out;
}

Tensor composite(const Tensor& fg, const Tensor& bg, const Tensor& mask) {
  if (fg.ndim() != 3 || fg.dim(2) != 3) {
    throw DataError("composite: foreground must be [H,W,3]");
  }
  if (!fg.same_shape(bg)) {
    throw DataError("composite: foreground/background shape mismatch " +
                    fg.shape_str() + " vs " + bg.shape_str());
  }
  if (mask.ndim() != 2 || mask.dim(0) != fg.dim(0) || mask.dim(1) != fg.dim(1)) {
    throw DataError("composite: mask must be [H,W] matching the images");
  }
  for (double v : mask.data) {
    if (v != 0.0 && v != 1.0) {
      throw DataError("composite: mask entries must be exactly 0 or 1");
    }
  }
  Tensor out = Tensor::zeros(fg.shape);
  int64_t hw = mask.numel();
  for (int64_t p = 0; p < hw; ++p) {
    double m = mask[p];
    for (int64_t c = 0; c < 3; ++c) {
      out[p * 3 + c] = fg[p * 3 + c] * m + bg[p * 3 + c] * (1.0 - m);
    }
  }
  return out;
}

Tensor gaussian_maps(const Tensor& points, int64_t h, int64_t w, double sigma) {
  if (points.ndim() != 2 || points.dim(1) != 2) {
    throw DataError("gaussian_maps: points must be [K,2]");
  }
  if (sigma <= 0.0) throw DataError("gaussian_maps: sigma must be positive");
  int64_t k = points.dim(0);
  Tensor out = Tensor::zeros({k, h, w});
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int64_t i = 0; i < k; ++i) {
    double px = points.at2(i, 0), py = points.at2(i, 1);
    double* map = out.data.data() + i * h * w;
    for (int64_t y = 0; y < h; ++y) {
      double dy = double(y) + 0.5 - py;
      for (int64_t x = 0; x < w; ++x) {
        double dx = double(x) + 0.5 - px;
        map[y * w + x] = std::exp(-(dx * dx + dy * dy) * inv);
      }
    }
  }
  return out;
}

Tensor lip_gaussian_diff(const Tensor& lm_driven, const Tensor& lm_ref,
                         int64_t count, int64_t h, int64_t w, double sigma) {
  if (lm_driven.ndim() != 2 || lm_ref.ndim() != 2 || lm_driven.dim(1) != 2 ||
      lm_ref.dim(1) != 2 || lm_driven.dim(0) < count || lm_ref.dim(0) < count) {
    throw DataError("lip_gaussian_diff: landmark arrays must be [K>=count,2]");
  }
  auto head = [&](const Tensor& t) {
    Tensor s = Tensor::zeros({count, 2});
    for (int64_t i = 0; i < count * 2; ++i) s[i] = t[i];
    return s;
  };
  Tensor a = gaussian_maps(head(lm_driven), h, w, sigma);
  Tensor b = gaussian_maps(head(lm_ref), h, w, sigma);
  for (int64_t i = 0; i < a.numel(); ++i) a[i] -= b[i];
  return a;
}

}  // namespace vividforge
