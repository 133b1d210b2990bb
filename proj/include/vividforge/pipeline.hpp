#pragma once

#include <string>
#include <vector>

#include "vividforge/a2m_expression.hpp"
#include "vividforge/a2m_pose.hpp"
#include "vividforge/m2v.hpp"
#include "vividforge/synthdata.hpp"

namespace vividforge {

// End-to-end plumbing: load the three stage checkpoints, run the
// audio -> expression + pose -> meshes -> textures -> frames cascade, and
// score inference outputs against dataset ground truth.

struct StageCheckpoints {
  std::string expr;  // a2m-expr checkpoint directory
  std::string pose;  // directory holding codebook/ and mapper/ stages
  std::string m2v;   // m2v checkpoint directory
};

struct LoadedStages {
  BsvoModel expr;
  PoseVqvae vq;
  PoseMapper mapper;
  M2vModel m2v;
};

// Rebuilds each stage's config from its checkpoint metadata and restores the
// parameters, with explicit errors naming any missing checkpoint.
LoadedStages load_stages(const StageCheckpoints& ckpts);

BsvoConfig bsvo_config_from_meta(const nlohmann::json& meta);
PoseCodebookConfig pose_config_from_meta(const nlohmann::json& meta);
M2vConfig m2v_config_from_meta(const nlohmann::json& meta);

struct InferRequest {
  std::string dataset_dir;
  std::string clip;        // identity + reference frame + default audio
  std::string audio_path;  // optional .wav or .tnsr feature override
  StageCheckpoints ckpts;
  std::string out_dir;
  double fps = 25.0;
};

struct InferSummary {
  int64_t frames = 0;
  std::string out_dir;
};

// Writes frames/frame_%05d.png, beta.tnsr [f,12], olip.tnsr [f,3L],
// pose.tnsr [f,6] (the per-frame rigid transforms driving the meshes), and
// manifest.json (fps + frame list). Deterministic for fixed inputs.
InferSummary run_inference(const InferRequest& req);

struct EvalSummary {
  int64_t frames = 0;
  double psnr_mean = 0.0;
  double vertex_mse = 0.0;
  double beta_mae = 0.0;
  double hpd_pred = 0.0;
  double hpd_gt = 0.0;
};

// pred_dir is either an inference output directory (manifest.json) or a
// dataset clip directory (its own frames and coefficients). Scores it
// against the named ground-truth clip and writes metrics.csv rows.
EvalSummary run_eval(const std::string& pred_dir,
                     const std::string& dataset_dir, const std::string& clip,
                     const std::string& csv_path);

}  // namespace vividforge
