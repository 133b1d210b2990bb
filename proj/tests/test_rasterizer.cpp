#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "raster_oracle.hpp"
#include "test_util.hpp"
#include "vividforge/error.hpp"
#include "vividforge/face_model.hpp"
#include "vividforge/rasterizer.hpp"

using namespace vividforge;
using namespace vividforge::testutil;

TEST_CASE("projection follows the documented camera formula") {
  Camera cam{64, 48, 0.45};
  CHECK(cam.scale() == doctest::Approx(0.45 * 48.0));
  Tensor v = Tensor::from({2, 3}, {0, 0, 0, 0.5, -0.25, 0.9});
  Tensor p = project_vertices(v, cam);
  CHECK(p.at2(0, 0) == 32.0);
  CHECK(p.at2(0, 1) == 24.0);
  CHECK(p.at2(1, 0) == 32.0 + 0.45 * 48.0 * 0.5);
  CHECK(p.at2(1, 1) == 24.0 + 0.45 * 48.0 * 0.25);
  Tensor bad = Tensor::from({1, 3}, {0.0, 1.0 / 0.0, 0.0});
  CHECK_THROWS_AS(project_vertices(bad, cam), NumericError);
}

TEST_CASE("right triangle coverage matches the half-plane derivation") {
  // Camera with scale 16 puts model coords +-0.75 at pixel columns 4 / 28
  // exactly. Screen triangle: A=(4,4), B=(4,28), C=(28,4); front facing.
  Camera cam{32, 32, 0.5};
  Tensor verts = Tensor::from({3, 3},
                              {-0.75, 0.75, 0.0,    // A -> (4,4)
                               -0.75, -0.75, 0.0,   // B -> (4,28)
                               0.75, 0.75, 0.0});   // C -> (28,4)
  std::vector<int64_t> tris{0, 1, 2};
  Tensor colors = Tensor::full({3, 3}, 1.0);
  RenderOutput r = render_mesh(verts, tris, colors, cam);

  // Derived by hand from the edge functions: covered iff ix >= 4 && iy >= 4
  // && ix + iy <= 30 (left and top edges included, hypotenuse excluded).
  int64_t covered = 0;
  for (int64_t iy = 0; iy < 32; ++iy) {
    for (int64_t ix = 0; ix < 32; ++ix) {
      bool want = ix >= 4 && iy >= 4 && ix + iy <= 30;
      CHECK(r.mask.at2(iy, ix) == (want ? 1.0 : 0.0));
      covered += want;
    }
  }
  CHECK(covered == 276);
  // Flat z=0 plane: every covered depth is ~0 and color ~1.
  for (int64_t iy = 4; iy < 27; ++iy) {
    CHECK(r.depth.at2(iy, 4) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.color[(iy * 32 + 4) * 3] == doctest::Approx(1.0).epsilon(1e-12));
  }
  // Back side of the same geometry is culled.
  std::vector<int64_t> flipped{0, 2, 1};
  RenderOutput back = render_mesh(verts, flipped, colors, cam);
  for (int64_t i = 0; i < 32 * 32; ++i) CHECK(back.mask[i] == 0.0);
}

TEST_CASE("renderer agrees with the per-pixel oracle bit for bit") {
  Camera cam{32, 32, 0.45};
  Rng rng(20260816, "raster.scenes");
  int64_t drawn_pixels = 0;
  for (int scene = 0; scene < 50; ++scene) {
    RasterScene sc = random_raster_scene(rng);
    RenderOutput fast = render_mesh(sc.verts, sc.tris, sc.colors, cam);
    RenderOutput ref = oracle_render(sc.verts, sc.tris, sc.colors, cam);
    REQUIRE(render_outputs_identical(fast, ref));
    for (int64_t i = 0; i < fast.mask.numel(); ++i) drawn_pixels += fast.mask[i] > 0.0;
  }
  // The suite must actually exercise coverage, not just empty frames.
  CHECK(drawn_pixels > 2000);
}

TEST_CASE("oracle agreement holds on a posed face render") {
  FaceModel m = FaceModel::build(90210);
  Camera cam{48, 48, 0.45};
  Tensor pose = Tensor::from({6}, {0.3, -0.4, 0.2, 0.05, -0.03, 0.0});
  Tensor posed = m.apply_pose(m.base, pose);
  Tensor colors = m.ncc();
  RenderOutput fast = render_mesh(posed, m.tris, colors, cam);
  RenderOutput ref = oracle_render(posed, m.tris, colors, cam);
  CHECK(render_outputs_identical(fast, ref));
  int64_t on = 0;
  for (int64_t i = 0; i < fast.mask.numel(); ++i) on += fast.mask[i] > 0.0;
  CHECK(on > 400);
}

TEST_CASE("depth test: nearer surface wins, ties keep the lower index") {
  Camera cam{32, 32, 0.5};
  // Two stacked full-frame quads; the second sits closer to the camera
  // (larger z -> smaller depth).
  Tensor verts = Tensor::from(
      {8, 3},
      {-1, 1, 0.0, -1, -1, 0.0, 1, -1, 0.0, 1, 1, 0.0,
       -1, 1, 0.5, -1, -1, 0.5, 1, -1, 0.5, 1, 1, 0.5});
  std::vector<int64_t> tris{0, 1, 2, 0, 2, 3, 4, 5, 6, 4, 6, 7};
  Tensor colors = Tensor::zeros({8, 3});
  for (int64_t v = 0; v < 4; ++v) colors.at2(v, 0) = 1.0;  // far quad red
  for (int64_t v = 4; v < 8; ++v) colors.at2(v, 2) = 1.0;  // near quad blue
  RenderOutput r = render_mesh(verts, tris, colors, cam);
  for (int64_t i = 0; i < 32 * 32; ++i) {
    REQUIRE(r.mask[i] == 1.0);
    CHECK(r.color[i * 3 + 2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.depth[i] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(r.tri_index[size_t(i)] >= 2);
  }

  // Exact tie: identical geometry twice, different colors. First wins.
  Tensor verts2 = Tensor::from({3, 3}, {-0.5, 0.5, 0.0, -0.5, -0.5, 0.0,
                                        0.5, 0.5, 0.0});
  std::vector<int64_t> tie{0, 1, 2, 0, 1, 2};
  Tensor c2 = Tensor::zeros({3, 3});
  c2.at2(0, 1) = 1.0;
  c2.at2(1, 1) = 1.0;
  c2.at2(2, 1) = 1.0;
  RenderOutput rt = render_mesh(verts2, tie, c2, cam);
  for (int64_t i = 0; i < 32 * 32; ++i) {
    if (rt.mask[i] == 1.0) CHECK(rt.tri_index[size_t(i)] == 0);
  }
}

TEST_CASE("empty and off-screen meshes leave the buffers untouched") {
  Camera cam{16, 16, 0.45};
  Tensor none = Tensor::zeros({1, 3});
  RenderOutput r = render_mesh(none, {}, Tensor::zeros({1, 3}), cam);
  for (int64_t i = 0; i < 16 * 16; ++i) {
    CHECK(r.mask[i] == 0.0);
    CHECK(r.depth[i] == kEmptyDepth);
    CHECK(r.tri_index[size_t(i)] == -1);
    CHECK(r.color[i * 3] == 0.0);
  }
  Tensor far_away = Tensor::from({3, 3}, {10, 10, 0, 10, 9, 0, 11, 10, 0});
  RenderOutput r2 = render_mesh(far_away, {0, 1, 2}, Tensor::zeros({3, 3}), cam);
  for (int64_t i = 0; i < 16 * 16; ++i) CHECK(r2.mask[i] == 0.0);
}

TEST_CASE("degenerate triangles never draw") {
  Camera cam{16, 16, 0.45};
  Tensor verts = Tensor::from({2, 3}, {0, 0, 0, 0.5, 0.5, 0});
  RenderOutput r = render_mesh(verts, {0, 0, 1}, Tensor::zeros({2, 3}), cam);
  for (int64_t i = 0; i < 16 * 16; ++i) CHECK(r.mask[i] == 0.0);
}

TEST_CASE("submission order does not change the image") {
  Camera cam{32, 32, 0.45};
  Rng rng(555, "raster.order");
  RasterScene sc = random_raster_scene(rng);
  RenderOutput a = render_mesh(sc.verts, sc.tris, sc.colors, cam);
  // Rotate the triangle list by one.
  std::vector<int64_t> rot(sc.tris.begin() + 3, sc.tris.end());
  rot.insert(rot.end(), sc.tris.begin(), sc.tris.begin() + 3);
  RenderOutput b = render_mesh(sc.verts, rot, sc.colors, cam);
  for (int64_t i = 0; i < a.mask.numel(); ++i) {
    CHECK(a.mask[i] == b.mask[i]);
    CHECK(a.depth[i] == b.depth[i]);
    CHECK(a.color[i * 3] == b.color[i * 3]);
    CHECK(a.color[i * 3 + 1] == b.color[i * 3 + 1]);
    CHECK(a.color[i * 3 + 2] == b.color[i * 3 + 2]);
  }
}

TEST_CASE("renders are identical across thread counts") {
  FaceModel m = FaceModel::build(90210);
  Camera cam{64, 64, 0.45};
  Tensor colors = m.ncc();
  setenv("VIVIDFORGE_THREADS", "1", 1);
  RenderOutput serial = render_mesh(m.base, m.tris, colors, cam);
  setenv("VIVIDFORGE_THREADS", "4", 1);
  RenderOutput quad = render_mesh(m.base, m.tris, colors, cam);
  setenv("VIVIDFORGE_THREADS", "3", 1);
  RenderOutput tri = render_mesh(m.base, m.tris, colors, cam);
  unsetenv("VIVIDFORGE_THREADS");
  CHECK(render_outputs_identical(serial, quad));
  CHECK(render_outputs_identical(serial, tri));
}

TEST_CASE("face silhouette has no interior holes") {
  FaceModel m = FaceModel::build(90210);
  Camera cam{64, 64, 0.45};
  RenderOutput r = render_mesh(m.base, m.tris, m.ncc(), cam);
  int64_t on = 0;
  for (int64_t i = 0; i < r.mask.numel(); ++i) on += r.mask[i] > 0.0;
  CHECK(on > 1200);  // a solid blob, not a sparse scatter
  for (int64_t y = 1; y < 63; ++y) {
    for (int64_t x = 1; x < 63; ++x) {
      if (r.mask.at2(y, x) == 1.0) continue;
      bool surrounded = true;
      for (int dy = -1; dy <= 1 && surrounded; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          if (r.mask.at2(y + dy, x + dx) == 0.0) {
            surrounded = false;
            break;
          }
        }
      }
      CHECK(!surrounded);
    }
  }
}

TEST_CASE("composite blends by the binary mask and validates it") {
  Tensor fg = Tensor::full({2, 2, 3}, 0.9);
  Tensor bg = Tensor::full({2, 2, 3}, 0.1);
  Tensor mask = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor out = composite(fg, bg, mask);
  CHECK(out[0] == 0.9);
  CHECK(out[3] == 0.1);
  CHECK(out[6] == 0.1);
  CHECK(out[9] == 0.9);

  Tensor all0 = Tensor::zeros({2, 2});
  CHECK(bits_equal(composite(fg, bg, all0), bg));
  Tensor all1 = Tensor::full({2, 2}, 1.0);
  CHECK(bits_equal(composite(fg, bg, all1), fg));

  Tensor soft = Tensor::from({2, 2}, {1, 0.5, 0, 1});
  CHECK_THROWS_AS(composite(fg, bg, soft), DataError);
  CHECK_THROWS_AS(composite(fg, Tensor::zeros({2, 3, 3}), mask), DataError);
}

TEST_CASE("gaussian maps match the closed form") {
  Tensor pts = Tensor::from({2, 2}, {3.5, 2.5, 0.0, 6.0});
  double sigma = 1.7;
  Tensor maps = gaussian_maps(pts, 7, 9, sigma);
  REQUIRE(maps.shape == std::vector<int64_t>{2, 7, 9});
  for (int64_t k = 0; k < 2; ++k) {
    for (int64_t y = 0; y < 7; ++y) {
      for (int64_t x = 0; x < 9; ++x) {
        double dx = double(x) + 0.5 - pts.at2(k, 0);
        double dy = double(y) + 0.5 - pts.at2(k, 1);
        double want = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        CHECK(maps[(k * 7 + y) * 9 + x] == doctest::Approx(want).epsilon(1e-14));
      }
    }
  }
  // Peak value 1 exactly at a pixel center.
  CHECK(maps[(0 * 7 + 2) * 9 + 3] == 1.0);

  // A far-from-border gaussian integrates to ~2 pi sigma^2.
  Tensor center = Tensor::from({1, 2}, {32.0, 32.0});
  Tensor big = gaussian_maps(center, 64, 64, 2.0);
  double sum = 0.0;
  for (int64_t i = 0; i < big.numel(); ++i) sum += big[i];
  CHECK(sum == doctest::Approx(2.0 * M_PI * 4.0).epsilon(1e-6));

  CHECK_THROWS_AS(gaussian_maps(pts, 4, 4, 0.0), DataError);
}

TEST_CASE("landmark heatmap difference is zero only when landmarks agree") {
  Rng rng(99, "raster.lipdiff");
  Tensor a = rand_uniform(rng, {20, 2}, 5.0, 59.0);
  Tensor d = lip_gaussian_diff(a, a, 8, 64, 64, 2.0);
  REQUIRE(d.shape == std::vector<int64_t>{8, 64, 64});
  for (int64_t i = 0; i < d.numel(); ++i) CHECK(d[i] == 0.0);

  Tensor b = a;
  b.at2(0, 0) += 1.0;
  Tensor d2 = lip_gaussian_diff(b, a, 8, 64, 64, 2.0);
  double mass = 0.0;
  for (int64_t i = 0; i < 64 * 64; ++i) mass += std::fabs(d2[i]);
  CHECK(mass > 0.1);
  // Channels past the changed landmark stay zero.
  for (int64_t i = 64 * 64; i < d2.numel(); ++i) CHECK(d2[i] == 0.0);
  // And the difference equals the map difference computed directly.
  Tensor ga = gaussian_maps(a, 64, 64, 2.0);
  Tensor gb = gaussian_maps(b, 64, 64, 2.0);
  for (int64_t i = 0; i < 8 * 64 * 64; ++i) {
    CHECK(d2[i] == gb[i] - ga[i]);
  }
}
