#include "vividforge/m2v.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "vividforge/error.hpp"
#include "vividforge/png_io.hpp"
#include "vividforge/rasterizer.hpp"
#include "vividforge/rng.hpp"

namespace vividforge {
namespace {

// The perceptual pyramid is a fixed random measuring stick: seeded by this
// literal so every model scores images on the same scale, regardless of the
// training seed.
constexpr uint64_t kPerceptualSeed = 0x5CA1E0FFull;
constexpr int64_t kTrunkChannels = 16;
constexpr double kL1Eps = 1e-12;

void check_cfg(const M2vConfig& cfg) {
  if (cfg.height < 8 || cfg.width < 8 || cfg.height % 8 != 0 ||
      cfg.width % 8 != 0) {
    throw DataError("m2v: height and width must be multiples of 8, got " +
                    std::to_string(cfg.height) + "x" +
                    std::to_string(cfg.width));
  }
  if (cfg.lip_maps < 1) throw DataError("m2v: lip_maps must be positive");
  if (cfg.batch < 1) throw DataError("m2v: batch must be positive");
}

void wire(M2vModel& m) {
  const int64_t L = m.cfg.lip_maps;
  m.face_c1 = {.name = "m2v.face.c1", .cin = 6, .cout = 8, .stride = 2};
  m.face_c2 = {.name = "m2v.face.c2", .cin = 8, .cout = 8};
  m.face_c3 = {.name = "m2v.face.c3", .cin = 8, .cout = 12, .stride = 2};
  m.face_c4 = {.name = "m2v.face.c4", .cin = 12, .cout = 12};
  m.face_mlp = {.name = "m2v.face.mlp",
                .cin = 12,
                .cout = kTrunkChannels,
                .k = 1,
                .pad = 0};

  m.lip_e1 = {.name = "m2v.lip.e1", .cin = L, .cout = 10, .stride = 2};
  m.lip_e2 = {.name = "m2v.lip.e2", .cin = 10, .cout = 14, .stride = 2};
  m.lip_e3 = {.name = "m2v.lip.e3", .cin = 14, .cout = 16, .stride = 2};
  m.lip_d1 = {.name = "m2v.lip.d1", .cin = 16, .cout = 14};
  m.lip_mix = {.name = "m2v.lip.mix",
               .cin = 28,
               .cout = kTrunkChannels,
               .k = 1,
               .pad = 0};
  // Zero-init fusion: at initialization the lip branch contributes exactly
  // nothing, so disabling it is a clean ablation baseline.
  m.lip_fuse = {.name = "m2v.lip.fuse",
                .cin = kTrunkChannels,
                .cout = kTrunkChannels,
                .k = 1,
                .pad = 0,
                .zero_init = true};

  m.motion_d1 = {.name = "m2v.motion.d1", .cin = kTrunkChannels, .cout = 12};
  m.motion_d2 = {.name = "m2v.motion.d2", .cin = 12, .cout = 8};
  // Zero-init head: an untrained model moves nothing (zero flow) and gates
  // nothing (occlusion 0.5 everywhere).
  m.motion_head = {
      .name = "m2v.motion.head", .cin = 8, .cout = 3, .zero_init = true};

  m.gen_e1 = {.name = "m2v.gen.e1", .cin = 3, .cout = 8, .stride = 2};
  m.gen_e2 = {.name = "m2v.gen.e2", .cin = 8, .cout = 12, .stride = 2};
  m.gen_d1 = {.name = "m2v.gen.d1", .cin = 12, .cout = 8};
  m.gen_d2 = {.name = "m2v.gen.d2", .cin = 8, .cout = 8};
  m.gen_head = {.name = "m2v.gen.head", .cin = 8, .cout = 3};

  m.disc_c1 = {.name = "m2v.disc.c1", .cin = 3, .cout = 8, .stride = 2};
  m.disc_c2 = {.name = "m2v.disc.c2", .cin = 8, .cout = 12, .stride = 2};
  m.disc_head = {.name = "m2v.disc.head", .cin = 12, .cout = 1};

  m.perc_c0 = {.name = "m2v.perc.c0", .cin = 3, .cout = 8};
  m.perc_c1 = {.name = "m2v.perc.c1", .cin = 8, .cout = 10};
  m.perc_c2 = {.name = "m2v.perc.c2", .cin = 10, .cout = 12};
}

bool gen_trainable(const std::string& name) {
  return name.rfind("m2v.disc.", 0) != 0 && name.rfind("m2v.perc.", 0) != 0;
}
bool disc_trainable(const std::string& name) {
  return name.rfind("m2v.disc.", 0) == 0;
}
bool nothing_trainable(const std::string&) { return false; }

Tensor hwc_to_chw(const Tensor& img) {
  if (img.ndim() != 3) {
    throw DataError("m2v: expected an [H,W,C] image, got " + img.shape_str());
  }
  int64_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  Tensor out = Tensor::zeros({1, c, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t k = 0; k < c; ++k) {
        out[(k * h + y) * w + x] = img[(y * w + x) * c + k];
      }
    }
  }
  return out;
}

Tensor chw_to_hwc(const Tensor& t) {
  int64_t c = t.dim(1), h = t.dim(2), w = t.dim(3);
  Tensor out = Tensor::zeros({h, w, c});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t k = 0; k < c; ++k) {
        out[(y * w + x) * c + k] = t[(k * h + y) * w + x];
      }
    }
  }
  return out;
}

Tensor stack_chw(const Tensor& a_hwc, const Tensor& b_hwc) {
  Tensor a = hwc_to_chw(a_hwc), b = hwc_to_chw(b_hwc);
  if (!a.same_shape(b)) {
    throw DataError("m2v: projection textures must share a shape, got " +
                    a_hwc.shape_str() + " vs " + b_hwc.shape_str());
  }
  int64_t c = a.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor out = Tensor::zeros({1, 2 * c, h, w});
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + a.numel());
  return out;
}

Tensor maps_to_nchw(const Tensor& maps) {
  if (maps.ndim() != 3) {
    throw DataError("m2v: expected [C,H,W] maps, got " + maps.shape_str());
  }
  Tensor out = maps;
  out.shape = {1, maps.dim(0), maps.dim(1), maps.dim(2)};
  return out;
}

int mean_node(Graph& g, int x) {
  return g.scale(g.sum(x), 1.0 / double(g.value(x).numel()));
}

int mean_sq_node(Graph& g, int x) {
  return g.scale(g.sum(g.mul(x, x)), 1.0 / double(g.value(x).numel()));
}

// Mean smooth-L1: mean(sqrt(d^2 + eps) - sqrt(eps)). The elementwise floor
// subtraction makes the term exactly zero at equality while keeping the
// gradient finite everywhere.
int l1_mean_node(Graph& g, int a, int b) {
  int d = g.sub(a, b);
  const Tensor& v = g.value(d);
  int s = g.sqrt(g.mul(d, d), kL1Eps);
  int floor_c = g.constant(Tensor::full(v.shape, std::sqrt(kL1Eps)));
  return g.scale(g.sum(g.sub(s, floor_c)), 1.0 / double(v.numel()));
}

// [1,1,H,W] -> [1,c,H,W] by channel repetition.
int rep_channels(Graph& g, int x, int64_t c) {
  if (c == 1) return x;
  std::vector<int> xs(size_t(c), x);
  return g.concat(xs, 1);
}

// Backward-warp a [1,C,h,w] feature map by per-pixel displacements
// fx, fy ([1,1,h,w], in pixels at this resolution).
int warp_feature_node(Graph& g, int img, int fx, int fy) {
  int64_t h = g.value(img).dim(2), w = g.value(img).dim(3);
  Tensor bx = Tensor::zeros({h * w, 1}), by = Tensor::zeros({h * w, 1});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      bx[y * w + x] = double(x);
      by[y * w + x] = double(y);
    }
  }
  int gx = g.add(g.reshape(fx, {h * w, 1}), g.constant(bx));
  int gy = g.add(g.reshape(fy, {h * w, 1}), g.constant(by));
  int grid = g.reshape(g.concat({gx, gy}, 1), {1, h, w, 2});
  return g.grid_sample(img, grid);
}

Tensor row_of(const Tensor& t, int64_t r) {
  int64_t d = t.dim(1);
  Tensor out = Tensor::zeros({d});
  std::copy(t.data.begin() + r * d, t.data.begin() + (r + 1) * d,
            out.data.begin());
  return out;
}

Tensor landmarks_of(const Tensor& lms, int64_t t) {
  int64_t k = lms.dim(1), d = lms.dim(2);
  Tensor out = Tensor::zeros({k, d});
  std::copy(lms.data.begin() + t * k * d, lms.data.begin() + (t + 1) * k * d,
            out.data.begin());
  return out;
}

}  // namespace

Tensor warp(const Tensor& image, const Tensor& flow) {
  if (image.ndim() != 3) {
    throw DataError("warp: image must be [H,W,C], got " + image.shape_str());
  }
  if (flow.ndim() != 3 || flow.dim(2) != 2 || flow.dim(0) != image.dim(0) ||
      flow.dim(1) != image.dim(1)) {
    throw DataError("warp: flow must be [H,W,2] matching the image, got " +
                    flow.shape_str() + " for image " + image.shape_str());
  }
  int64_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  Tensor out = Tensor::zeros({h, w, c});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double gx = double(x) + flow[(y * w + x) * 2];
      double gy = double(y) + flow[(y * w + x) * 2 + 1];
      int64_t x0 = int64_t(std::floor(gx)), y0 = int64_t(std::floor(gy));
      double fx = gx - double(x0), fy = gy - double(y0);
      auto cx = [&](int64_t v) { return std::clamp<int64_t>(v, 0, w - 1); };
      auto cy = [&](int64_t v) { return std::clamp<int64_t>(v, 0, h - 1); };
      int64_t x0c = cx(x0), x1c = cx(x0 + 1);
      int64_t y0c = cy(y0), y1c = cy(y0 + 1);
      for (int64_t k = 0; k < c; ++k) {
        double v00 = image[(y0c * w + x0c) * c + k];
        double v01 = image[(y0c * w + x1c) * c + k];
        double v10 = image[(y1c * w + x0c) * c + k];
        double v11 = image[(y1c * w + x1c) * c + k];
        out[(y * w + x) * c + k] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                   fy * ((1.0 - fx) * v10 + fx * v11);
      }
    }
  }
  return out;
}

M2vModel M2vModel::build(const M2vConfig& cfg) {
  check_cfg(cfg);
  M2vModel m;
  m.cfg = cfg;
  wire(m);
  for (const Conv2dLayer* l :
       {&m.face_c1, &m.face_c2, &m.face_c3, &m.face_c4, &m.face_mlp, &m.lip_e1,
        &m.lip_e2, &m.lip_e3, &m.lip_mix, &m.lip_fuse, &m.motion_head,
        &m.gen_e1, &m.gen_e2, &m.gen_head, &m.disc_c1, &m.disc_c2,
        &m.disc_head}) {
    l->init(m.params, cfg.seed);
  }
  for (const ConvT2dLayer* l :
       {&m.lip_d1, &m.motion_d1, &m.motion_d2, &m.gen_d1, &m.gen_d2}) {
    l->init(m.params, cfg.seed);
  }
  for (const Conv2dLayer* l : {&m.perc_c0, &m.perc_c1, &m.perc_c2}) {
    l->init(m.params, kPerceptualSeed);
  }
  return m;
}

M2vModel M2vModel::from_store(const M2vConfig& cfg, ParamStore store) {
  M2vModel m = build(cfg);
  for (const auto& [name, t] : m.params.tensors) {
    if (!store.has(name)) {
      throw DataError("m2v store is missing parameter '" + name + "'");
    }
    if (store.at(name).shape != t.shape) {
      throw DataError("m2v parameter '" + name + "' has shape " +
                      store.at(name).shape_str() + ", expected " +
                      t.shape_str());
    }
  }
  m.params = std::move(store);
  return m;
}

int M2vModel::facial_branch_node(ModelContext& ctx, int pt_pair) const {
  const Tensor& v = ctx.g.value(pt_pair);
  if (v.ndim() != 4 || v.dim(0) != 1 || v.dim(1) != 6 ||
      v.dim(2) != cfg.height || v.dim(3) != cfg.width) {
    throw DataError(
        "facial branch expects a [1,6,H,W] texture pair at the configured "
        "size, got " +
        v.shape_str());
  }
  Graph& g = ctx.g;
  int x = g.relu(face_c1.forward(ctx, pt_pair));
  x = g.relu(face_c2.forward(ctx, x));
  x = g.relu(face_c3.forward(ctx, x));
  x = g.relu(face_c4.forward(ctx, x));
  return face_mlp.forward(ctx, x);
}

int M2vModel::lip_branch_node(ModelContext& ctx, int diff_maps) const {
  const Tensor& v = ctx.g.value(diff_maps);
  if (v.ndim() != 4 || v.dim(0) != 1 || v.dim(1) != cfg.lip_maps ||
      v.dim(2) != cfg.height || v.dim(3) != cfg.width) {
    throw DataError("lip branch expects [1," + std::to_string(cfg.lip_maps) +
                    ",H,W] difference maps at the configured size, got " +
                    v.shape_str());
  }
  Graph& g = ctx.g;
  int e1 = g.relu(lip_e1.forward(ctx, diff_maps));
  int e2 = g.relu(lip_e2.forward(ctx, e1));
  int e3 = g.relu(lip_e3.forward(ctx, e2));
  int d1 = g.relu(lip_d1.forward(ctx, e3));
  return lip_mix.forward(ctx, g.concat({d1, e2}, 1));
}

int M2vModel::fused_features_node(ModelContext& ctx, int facial,
                                  int lip) const {
  if (lip < 0) return facial;
  return ctx.g.add(facial, lip_fuse.forward(ctx, lip));
}

M2vModel::MotionNodes M2vModel::motion_nodes(ModelContext& ctx,
                                             int fused) const {
  Graph& g = ctx.g;
  int x = g.relu(motion_d1.forward(ctx, fused));
  x = g.relu(motion_d2.forward(ctx, x));
  int head = motion_head.forward(ctx, x);
  int64_t h = cfg.height, w = cfg.width;
  MotionNodes out;
  out.flow_x =
      g.scale(g.slice(head, {0, 0, 0, 0}, {1, 1, h, w}), cfg.flow_scale);
  out.flow_y =
      g.scale(g.slice(head, {0, 1, 0, 0}, {1, 1, h, w}), cfg.flow_scale);
  out.occlusion =
      g.sigmoid(g.scale(g.slice(head, {0, 2, 0, 0}, {1, 1, h, w}), 2.0));
  return out;
}

int M2vModel::generate_node(ModelContext& ctx, const Tensor& ref_chw,
                            const MotionNodes& motion) const {
  Graph& g = ctx.g;
  if (ref_chw.ndim() != 4 || ref_chw.dim(1) != 3 ||
      ref_chw.dim(2) != cfg.height || ref_chw.dim(3) != cfg.width) {
    throw DataError("generator expects a [1,3,H,W] reference frame, got " +
                    ref_chw.shape_str());
  }
  int ref = g.constant(ref_chw);
  int e1 = g.relu(gen_e1.forward(ctx, ref));
  int e2 = g.relu(gen_e2.forward(ctx, e1));
  // Flow is decoded in full-resolution pixels; each pooling halves the
  // resolution, so displacements shrink by the same factor.
  int fx1 = g.scale(g.avg_pool(motion.flow_x, 2, 2), 0.5);
  int fy1 = g.scale(g.avg_pool(motion.flow_y, 2, 2), 0.5);
  int oc1 = g.avg_pool(motion.occlusion, 2, 2);
  int fx2 = g.scale(g.avg_pool(fx1, 2, 2), 0.5);
  int fy2 = g.scale(g.avg_pool(fy1, 2, 2), 0.5);
  int oc2 = g.avg_pool(oc1, 2, 2);
  // Every path from the reference into the decoder is occlusion-gated, so
  // the output depends on the reference only where occlusion admits it.
  int w2 = g.mul(warp_feature_node(g, e2, fx2, fy2),
                 rep_channels(g, oc2, gen_e2.cout));
  int w1 = g.mul(warp_feature_node(g, e1, fx1, fy1),
                 rep_channels(g, oc1, gen_e1.cout));
  int x = g.relu(gen_d1.forward(ctx, w2));
  x = g.add(x, w1);
  x = g.relu(gen_d2.forward(ctx, x));
  return g.sigmoid(g.scale(gen_head.forward(ctx, x), 3.0));
}

M2vModel::DiscNodes M2vModel::disc_nodes(ModelContext& ctx, int img) const {
  Graph& g = ctx.g;
  DiscNodes d;
  d.f1 = g.relu(disc_c1.forward(ctx, img));
  d.f2 = g.relu(disc_c2.forward(ctx, d.f1));
  d.logits = disc_head.forward(ctx, d.f2);
  return d;
}

int M2vModel::perceptual_node(ModelContext& ctx, int pred, int gt) const {
  Graph& g = ctx.g;
  const Conv2dLayer* pyramid[3] = {&perc_c0, &perc_c1, &perc_c2};
  int pa = pred, pb = gt, total = -1;
  for (int s = 0; s < 3; ++s) {
    if (s > 0) {
      pa = g.avg_pool(pa, 2, 2);
      pb = g.avg_pool(pb, 2, 2);
    }
    pa = g.relu(pyramid[s]->forward(ctx, pa));
    pb = g.relu(pyramid[s]->forward(ctx, pb));
    int term = l1_mean_node(g, pa, pb);
    total = s == 0 ? term : g.add(total, term);
  }
  return total;
}

Tensor facial_motion_branch(const M2vModel& model, const Tensor& pt_ref,
                            const Tensor& pt_d) {
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  int out = model.facial_branch_node(ctx, g.constant(stack_chw(pt_ref, pt_d)));
  Tensor v = g.value(out);
  v.shape = {v.dim(1), v.dim(2), v.dim(3)};
  return v;
}

Tensor lip_motion_branch(const M2vModel& model, const Tensor& diff_maps) {
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  int out = model.lip_branch_node(ctx, g.constant(maps_to_nchw(diff_maps)));
  Tensor v = g.value(out);
  v.shape = {v.dim(1), v.dim(2), v.dim(3)};
  return v;
}

DenseMotion decode_dense_motion(const M2vModel& model,
                                const Tensor& facial_feat,
                                const Tensor& lip_feat) {
  int64_t fh = model.cfg.height / 4, fw = model.cfg.width / 4;
  if (facial_feat.ndim() != 3 || facial_feat.dim(0) != kTrunkChannels ||
      facial_feat.dim(1) != fh || facial_feat.dim(2) != fw) {
    throw DataError("dense motion expects [" + std::to_string(kTrunkChannels) +
                    "," + std::to_string(fh) + "," + std::to_string(fw) +
                    "] facial features, got " + facial_feat.shape_str());
  }
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  int facial = g.constant(maps_to_nchw(facial_feat));
  int lip = -1;
  if (!lip_feat.data.empty()) {
    if (!lip_feat.same_shape(facial_feat)) {
      throw DataError("lip features must match facial features, got " +
                      lip_feat.shape_str() + " vs " + facial_feat.shape_str());
    }
    lip = g.constant(maps_to_nchw(lip_feat));
  }
  auto mo =
      model.motion_nodes(ctx, model.fused_features_node(ctx, facial, lip));
  const Tensor& fx = g.value(mo.flow_x);
  const Tensor& fy = g.value(mo.flow_y);
  const Tensor& oc = g.value(mo.occlusion);
  int64_t h = model.cfg.height, w = model.cfg.width;
  DenseMotion out;
  out.flow = Tensor::zeros({h, w, 2});
  out.occlusion = Tensor::zeros({h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    out.flow[i * 2] = fx[i];
    out.flow[i * 2 + 1] = fy[i];
    out.occlusion[i] = oc[i];
  }
  return out;
}

Tensor generate_frame(const M2vModel& model, const Tensor& ref_image,
                      const DenseMotion& dense) {
  int64_t h = model.cfg.height, w = model.cfg.width;
  if (ref_image.ndim() != 3 || ref_image.dim(0) != h || ref_image.dim(1) != w ||
      ref_image.dim(2) != 3) {
    throw DataError("generate_frame expects an [H,W,3] reference at the "
                    "configured size, got " +
                    ref_image.shape_str());
  }
  if (dense.flow.ndim() != 3 || dense.flow.dim(0) != h ||
      dense.flow.dim(1) != w || dense.flow.dim(2) != 2 ||
      dense.occlusion.ndim() != 2 || dense.occlusion.dim(0) != h ||
      dense.occlusion.dim(1) != w) {
    throw DataError("generate_frame: dense motion shapes do not match the "
                    "configured size");
  }
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  Tensor fx = Tensor::zeros({1, 1, h, w}), fy = Tensor::zeros({1, 1, h, w});
  for (int64_t i = 0; i < h * w; ++i) {
    fx[i] = dense.flow[i * 2];
    fy[i] = dense.flow[i * 2 + 1];
  }
  Tensor oc = dense.occlusion;
  oc.shape = {1, 1, h, w};
  M2vModel::MotionNodes mo;
  mo.flow_x = g.constant(fx);
  mo.flow_y = g.constant(fy);
  mo.occlusion = g.constant(oc);
  int out = model.generate_node(ctx, hwc_to_chw(ref_image), mo);
  return chw_to_hwc(g.value(out));
}

Tensor m2v_infer_frame(const M2vModel& model, const Tensor& ref_image,
                       const Tensor& pt_ref, const Tensor& pt_d,
                       const Tensor& lip_diff) {
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  int facial = model.facial_branch_node(ctx, g.constant(stack_chw(pt_ref, pt_d)));
  int lip = -1;
  if (model.cfg.lip_branch) {
    lip = model.lip_branch_node(ctx, g.constant(maps_to_nchw(lip_diff)));
  }
  auto mo =
      model.motion_nodes(ctx, model.fused_features_node(ctx, facial, lip));
  int out = model.generate_node(ctx, hwc_to_chw(ref_image), mo);
  return chw_to_hwc(g.value(out));
}

M2vLossBreakdown m2v_loss(const M2vModel& model, const Tensor& pred,
                          const Tensor& gt) {
  if (!pred.same_shape(gt)) {
    throw DataError("m2v_loss: prediction " + pred.shape_str() +
                    " and target " + gt.shape_str() + " differ in shape");
  }
  Graph g;
  ModelContext ctx(g, model.params, nothing_trainable);
  int p = g.constant(hwc_to_chw(pred));
  int t = g.constant(hwc_to_chw(gt));
  int perc = model.perceptual_node(ctx, p, t);
  auto dp = model.disc_nodes(ctx, p);
  auto dg = model.disc_nodes(ctx, t);
  int fm = g.add(l1_mean_node(g, dp.f1, dg.f1), l1_mean_node(g, dp.f2, dg.f2));
  int adv = g.scale(mean_node(g, dp.logits), -1.0);
  M2vLossBreakdown b;
  b.perceptual = g.value(perc)[0];
  b.feature_matching = g.value(fm)[0];
  b.adversarial = g.value(adv)[0];
  b.total = model.cfg.w_perc * b.perceptual +
            model.cfg.w_fm * b.feature_matching + model.cfg.w_adv * b.adversarial;
  return b;
}

M2vSample make_m2v_sample(const Dataset& ds, const DatasetClip& clip,
                          int64_t frame, const M2vConfig& cfg) {
  const FaceModel& fm = ds.model;
  int64_t f = clip.beta.dim(0);
  if (frame < 0 || frame >= f) {
    throw DataError("m2v sample frame " + std::to_string(frame) +
                    " out of range for a " + std::to_string(f) + "-frame clip");
  }
  if (cfg.lip_maps > clip.landmarks.dim(1)) {
    throw DataError("m2v: lip_maps exceeds the stored landmark count");
  }
  Camera cam{cfg.width, cfg.height};
  Tensor ncc = fm.ncc();
  Tensor p_ref = row_of(clip.pose, 0);
  auto mesh_at = [&](int64_t t) {
    Tensor verts =
        fm.assemble(clip.alpha, row_of(clip.beta, t), row_of(clip.olip, t));
    // Stored pose rows are absolute; the driven mesh uses the recovered
    // relative pose, matching the construction that rendered the frames.
    Tensor rel = row_of(clip.pose, t + 1);
    for (int64_t i = 0; i < 6; ++i) rel[i] -= p_ref[i];
    return fm.apply_pose(verts, fm.compose_relative(p_ref, rel));
  };
  M2vSample s;
  s.pt_ref = render_mesh(mesh_at(0), fm.tris, ncc, cam).color;
  s.pt_d = render_mesh(mesh_at(frame), fm.tris, ncc, cam).color;
  s.ref_image = read_png(clip_frame_path(clip, 0));
  s.gt = read_png(clip_frame_path(clip, frame));
  if (s.ref_image.ndim() != 3 || s.ref_image.dim(0) != cfg.height ||
      s.ref_image.dim(1) != cfg.width) {
    throw DataError("m2v: dataset frames are " + s.ref_image.shape_str() +
                    " but the model is configured for " +
                    std::to_string(cfg.height) + "x" +
                    std::to_string(cfg.width));
  }
  s.lip_diff =
      lip_gaussian_diff(landmarks_of(clip.landmarks, frame),
                        landmarks_of(clip.landmarks, 0), cfg.lip_maps,
                        cfg.height, cfg.width, cfg.lip_sigma);
  return s;
}

M2vTrainResult train_m2v(const Dataset& ds, const M2vConfig& cfg,
                         const std::string& checkpoint_dir) {
  check_cfg(cfg);
  if (ds.train.empty()) throw DataError("m2v training: empty train split");

  struct Prepared {
    Tensor pair_chw, lip_chw, ref_chw, gt_chw;
  };
  std::vector<Prepared> pool;
  for (int64_t ci : ds.train) {
    const DatasetClip& clip = ds.clips[size_t(ci)];
    for (int64_t t = 0; t < clip.beta.dim(0); ++t) {
      M2vSample s = make_m2v_sample(ds, clip, t, cfg);
      Prepared p;
      p.pair_chw = stack_chw(s.pt_ref, s.pt_d);
      p.lip_chw = maps_to_nchw(s.lip_diff);
      p.ref_chw = hwc_to_chw(s.ref_image);
      p.gt_chw = hwc_to_chw(s.gt);
      pool.push_back(std::move(p));
    }
  }
  if (pool.empty()) throw DataError("m2v training: no frames in train split");

  M2vModel model = M2vModel::build(cfg);
  AdamState opt_g, opt_d;
  opt_g.lr = cfg.lr;
  opt_d.lr = cfg.lr;
  Rng rng(cfg.seed, "m2v.batch");
  M2vTrainResult res;

  auto pred_node = [&](ModelContext& ctx, const Prepared& p,
                       int* facial_out) -> int {
    Graph& g = ctx.g;
    int facial = model.facial_branch_node(ctx, g.constant(p.pair_chw));
    int lip = cfg.lip_branch
                  ? model.lip_branch_node(ctx, g.constant(p.lip_chw))
                  : -1;
    if (facial_out) *facial_out = facial;
    auto mo =
        model.motion_nodes(ctx, model.fused_features_node(ctx, facial, lip));
    return model.generate_node(ctx, p.ref_chw, mo);
  };

  for (int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<size_t> batch;
    for (int64_t b = 0; b < cfg.batch; ++b) {
      batch.push_back(size_t(rng.next_below(uint64_t(pool.size()))));
    }

    {
      Graph g;
      ModelContext ctx(g, model.params, gen_trainable);
      int loss = -1;
      for (size_t idx : batch) {
        const Prepared& p = pool[idx];
        int facial = -1;
        int pred = pred_node(ctx, p, &facial);
        int gt = g.constant(p.gt_chw);
        int perc = model.perceptual_node(ctx, pred, gt);
        auto dp = model.disc_nodes(ctx, pred);
        auto dg = model.disc_nodes(ctx, gt);
        int fm = g.add(l1_mean_node(g, dp.f1, dg.f1),
                       l1_mean_node(g, dp.f2, dg.f2));
        int adv = g.scale(mean_node(g, dp.logits), -1.0);
        int item = g.add(g.add(g.scale(perc, cfg.w_perc),
                               g.scale(fm, cfg.w_fm)),
                         g.scale(adv, cfg.w_adv));
        if (cfg.kl_weight != 0.0) {
          item = g.add(item, g.scale(mean_sq_node(g, facial), cfg.kl_weight));
        }
        loss = loss < 0 ? item : g.add(loss, item);
      }
      loss = g.scale(loss, 1.0 / double(batch.size()));
      auto grads = g.param_grads(loss);
      adam_step(model.params, grads, opt_g);
      res.gen_history.push_back(g.value(loss)[0]);
    }

    {
      Graph g;
      ModelContext ctx(g, model.params, disc_trainable);
      int loss = -1;
      for (size_t idx : batch) {
        const Prepared& p = pool[idx];
        int pred = pred_node(ctx, p, nullptr);
        auto dp = model.disc_nodes(ctx, pred);
        auto dg = model.disc_nodes(ctx, g.constant(p.gt_chw));
        int ones = g.constant(Tensor::full(g.value(dg.logits).shape, 1.0));
        int item = g.add(mean_node(g, g.relu(g.sub(ones, dg.logits))),
                         mean_node(g, g.relu(g.add(ones, dp.logits))));
        loss = loss < 0 ? item : g.add(loss, item);
      }
      loss = g.scale(loss, 1.0 / double(batch.size()));
      auto grads = g.param_grads(loss);
      adam_step(model.params, grads, opt_d);
      res.disc_history.push_back(g.value(loss)[0]);
    }
  }

  res.model = std::move(model);
  if (!checkpoint_dir.empty()) {
    // One persisted optimizer: generator and discriminator parameter names
    // are disjoint, so both moment sets share a map (their step counts are
    // equal by construction).
    AdamState merged = opt_g;
    merged.m.insert(opt_d.m.begin(), opt_d.m.end());
    merged.v.insert(opt_d.v.begin(), opt_d.v.end());
    nlohmann::json meta;
    meta["stage"] = "m2v";
    meta["config"] = {{"height", cfg.height},
                      {"width", cfg.width},
                      {"lr", cfg.lr},
                      {"steps", cfg.steps},
                      {"batch", cfg.batch},
                      {"seed", cfg.seed},
                      {"lip_branch", cfg.lip_branch},
                      {"kl_weight", cfg.kl_weight},
                      {"flow_scale", cfg.flow_scale},
                      {"lip_sigma", cfg.lip_sigma},
                      {"lip_maps", cfg.lip_maps},
                      {"w_perc", cfg.w_perc},
                      {"w_fm", cfg.w_fm},
                      {"w_adv", cfg.w_adv}};
    if (!res.gen_history.empty()) {
      meta["initial_gen_loss"] = res.gen_history.front();
      meta["final_gen_loss"] = res.gen_history.back();
    }
    save_checkpoint(checkpoint_dir, res.model.params, &merged, meta);
  }
  return res;
}

}  // namespace vividforge
