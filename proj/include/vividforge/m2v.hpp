#pragma once

#include <string>
#include <vector>

#include "vividforge/nn.hpp"
#include "vividforge/params.hpp"
#include "vividforge/synthdata.hpp"
#include "vividforge/tensor.hpp"

namespace vividforge {

// Mesh-to-video stage: projection textures of the reference and driven meshes
// plus lip-landmark heatmap differences are decoded into a dense backward
// flow and an occlusion map; the reference frame's encoder features are
// warped, gated, and decoded back into an RGB frame.

struct M2vConfig {
  int64_t height = 64, width = 64;
  double lr = 1e-5;  // stage-2 default; larger values are calibrated per run
  int64_t steps = 2000;
  int64_t batch = 2;
  uint64_t seed = 1;
  bool lip_branch = true;  // false: facial branch only
  double kl_weight = 0.0;  // optional regularizer on facial features
  double flow_scale = 8.0;       // pixels per unit of the flow head
  double lip_sigma = 2.0;        // heatmap width in pixels
  int64_t lip_maps = 8;          // lip landmark channels
  double w_perc = 10.0, w_fm = 10.0, w_adv = 1.0;
};

struct DenseMotion {
  Tensor flow;       // [H,W,2] backward displacement in pixels
  Tensor occlusion;  // [H,W] in (0,1)
};

// Backward warp: out(p) = bilinear_sample(image, p + flow(p)) with border
// clamp, in pixel-index coordinates. image [H,W,C], flow [H,W,2].
Tensor warp(const Tensor& image, const Tensor& flow);

struct M2vModel {
  M2vConfig cfg;
  ParamStore params;

  Conv2dLayer face_c1, face_c2, face_c3, face_c4, face_mlp;
  Conv2dLayer lip_e1, lip_e2, lip_e3, lip_mix, lip_fuse;
  ConvT2dLayer lip_d1;
  ConvT2dLayer motion_d1, motion_d2;
  Conv2dLayer motion_head;
  Conv2dLayer gen_e1, gen_e2, gen_head;
  ConvT2dLayer gen_d1, gen_d2;
  Conv2dLayer disc_c1, disc_c2, disc_head;
  Conv2dLayer perc_c0, perc_c1, perc_c2;  // fixed random pyramid, never trained

  static M2vModel build(const M2vConfig& cfg);
  static M2vModel from_store(const M2vConfig& cfg, ParamStore store);

  // Graph builders. Images and feature maps are [1,C,H,W] nodes.
  int facial_branch_node(ModelContext& ctx, int pt_pair) const;
  int lip_branch_node(ModelContext& ctx, int diff_maps) const;
  // facial features plus the zero-init fusion of lip features (lip < 0 or a
  // disabled branch leaves the trunk untouched).
  int fused_features_node(ModelContext& ctx, int facial, int lip) const;
  struct MotionNodes {
    int flow_x = -1, flow_y = -1, occlusion = -1;  // [1,1,H,W] each
  };
  MotionNodes motion_nodes(ModelContext& ctx, int fused) const;
  int generate_node(ModelContext& ctx, const Tensor& ref_chw,
                    const MotionNodes& motion) const;
  struct DiscNodes {
    int f1 = -1, f2 = -1, logits = -1;
  };
  DiscNodes disc_nodes(ModelContext& ctx, int img) const;
  int perceptual_node(ModelContext& ctx, int pred, int gt) const;
};

// Plain wrappers over the graph builders (single image, no gradients).
// Feature maps are returned as [C,h/4,w/4].
Tensor facial_motion_branch(const M2vModel& model, const Tensor& pt_ref,
                            const Tensor& pt_d);
Tensor lip_motion_branch(const M2vModel& model, const Tensor& diff_maps);
DenseMotion decode_dense_motion(const M2vModel& model,
                                const Tensor& facial_feat,
                                const Tensor& lip_feat);
Tensor generate_frame(const M2vModel& model, const Tensor& ref_image,
                      const DenseMotion& dense);

// Whole image-formation cascade for one driven frame.
Tensor m2v_infer_frame(const M2vModel& model, const Tensor& ref_image,
                       const Tensor& pt_ref, const Tensor& pt_d,
                       const Tensor& lip_diff);

struct M2vLossBreakdown {
  double perceptual = 0.0;
  double feature_matching = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
};
M2vLossBreakdown m2v_loss(const M2vModel& model, const Tensor& pred,
                          const Tensor& gt);

struct M2vTrainResult {
  M2vModel model;
  std::vector<double> gen_history, disc_history;
};

// Alternating generator/discriminator updates on (reference frame, driven
// projection-texture pair, lip difference maps, ground-truth frame) tuples
// derived from the dataset clips.
M2vTrainResult train_m2v(const Dataset& ds, const M2vConfig& cfg,
                         const std::string& checkpoint_dir = "");

// Precomputed training/evaluation inputs for one clip frame.
struct M2vSample {
  Tensor ref_image;  // [H,W,3] clip frame 0
  Tensor pt_ref;     // [H,W,3] reference projection texture
  Tensor pt_d;       // [H,W,3] driven projection texture
  Tensor lip_diff;   // [lip_maps,H,W]
  Tensor gt;         // [H,W,3] stored frame
};
M2vSample make_m2v_sample(const Dataset& ds, const DatasetClip& clip,
                          int64_t frame, const M2vConfig& cfg);

}  // namespace vividforge
