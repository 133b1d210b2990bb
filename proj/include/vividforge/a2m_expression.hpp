#pragma once

#include <string>
#include <vector>

#include "vividforge/face_model.hpp"
#include "vividforge/nn.hpp"
#include "vividforge/params.hpp"
#include "vividforge/synthdata.hpp"
#include "vividforge/tensor.hpp"

namespace vividforge {

// Audio -> expression stage: a causal multi-branch transformer that maps an
// audio feature sequence plus an identity style embedding to blendshape
// coefficients and lip vertex offsets, one frame at a time.

struct BsvoConfig {
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t layers = 1;  // trunk depth; each branch adds one block of its own
  double lr = 1e-4;
  int64_t steps = 200;
  int64_t batch = 4;
  uint64_t seed = 1;
  bool teacher_forcing = true;
  bool shared_trunk = true;      // false: every branch owns a private trunk
  bool blendshape_only = false;  // zero the offset branch output
  bool vertex_only = false;      // zero both blendshape branch outputs
  int64_t audio_dims = kAudioDims;
  int64_t d_id = 8;
  int64_t lip_count = 11;

  // Per-frame motion vector: [beta_lip(4), beta_other(8), o_lip(3*L)].
  int64_t coeff_dims() const { return 12 + 3 * lip_count; }
};

struct BsvoModel {
  BsvoConfig cfg;
  ParamStore params;

  // Layer description (rebuilt from cfg; weights live in params).
  Linear audio_proj, style_proj, motion_proj;
  Linear head_lip, head_other, head_vo;
  std::vector<TransformerBlock> trunk;                  // shared
  std::vector<std::vector<TransformerBlock>> trunks;    // per-branch (ablation)
  std::vector<TransformerBlock> branch;                 // one per head

  static BsvoModel build(const BsvoConfig& cfg);  // fresh seeded weights
  static BsvoModel from_store(const BsvoConfig& cfg, ParamStore store);

  // Causal forward over f frames inside an existing graph. style_row is a
  // [d_model] node added to every token; motion_prefix is a [f-1, coeff]
  // node feeding tokens 1..f-1 (-1 when f == 1). Returns [f, coeff].
  int build_outputs(ModelContext& ctx, const Tensor& audio, int style_row,
                    int motion_prefix, int64_t f) const;

  // Same forward with the style embedded in-graph from alpha (trainable).
  int forward_node(ModelContext& ctx, const Tensor& audio, const Tensor& alpha,
                   int motion_prefix) const;
};

// Pure linear style projection of identity coefficients -> [d_model].
Tensor encode_style(const BsvoModel& model, const Tensor& alpha);

// Autoregressive prediction. history (optional, may be empty) supplies
// ground-truth motion vectors for the first rows; frames past the history
// run on the model's own outputs. history must be shorter than f.
Tensor predict_expression(const BsvoModel& model, const Tensor& audio,
                          const Tensor& z_style, const Tensor& history);

// Reconstruction loss: mean-over-frames L2 norm of the blendshape residual
// plus mean L2 (Frobenius) norm of the mesh residual, where the predicted
// mesh is assembled from the predicted coefficients and posed by p_ref.
double bsvo_loss(const Tensor& pred, const Tensor& gt_beta,
                 const std::vector<Tensor>& gt_mesh, const FaceModel& fm,
                 const Tensor& alpha, const Tensor& p_ref);

// Differentiable version used by training; gt_mesh_flat is [f, 3n] of posed
// ground-truth meshes. Adds 1e-12 under each square root so the gradient
// stays finite at a perfect reconstruction.
int bsvo_loss_node(ModelContext& ctx, int pred, const Tensor& gt_beta,
                   const Tensor& gt_mesh_flat, const FaceModel& fm,
                   const Tensor& alpha, const Tensor& p_ref);

struct BsvoTrainResult {
  BsvoModel model;
  std::vector<double> loss_history;
};

// Teacher-forced Adam training on the dataset's train split. When
// teacher_forcing is false, motion inputs are the model's own gradient-
// stopped free-running predictions instead of ground truth. Saves a
// checkpoint into checkpoint_dir unless it is empty.
BsvoTrainResult train_bsvo(const Dataset& ds, const BsvoConfig& cfg,
                           const std::string& checkpoint_dir = "");

// Splits [f, coeff] motion vectors into beta [f,12] and offsets [f,3L].
void split_coeffs(const Tensor& pred, int64_t lip_count, Tensor* beta,
                  Tensor* olip);

// The one mesh path for predictions: split the coefficients and hand them to
// the face model's driven-mesh chain.
std::vector<Tensor> predicted_meshes(const FaceModel& fm, const Tensor& alpha,
                                     const Tensor& pred, const Tensor& p_ref,
                                     const Tensor& p_rel_seq);

// Posed ground-truth meshes of one clip flattened to [f, 3n] (the loss
// target): frame t = apply_pose(assemble(alpha, beta_t, olip_t), pose row 0).
Tensor clip_mesh_targets(const FaceModel& fm, const DatasetClip& clip);

// [f, coeff] per-frame motion vectors of a clip (beta rows ++ olip rows).
Tensor clip_coeffs(const DatasetClip& clip);

}  // namespace vividforge
