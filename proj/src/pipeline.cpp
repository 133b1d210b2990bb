#include "vividforge/pipeline.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vividforge/audio.hpp"
#include "vividforge/error.hpp"
#include "vividforge/metrics.hpp"
#include "vividforge/png_io.hpp"
#include "vividforge/rasterizer.hpp"
#include "vividforge/tnsr_io.hpp"

namespace fs = std::filesystem;

namespace vividforge {
namespace {

Tensor row6(const Tensor& mat, int64_t r) {
  Tensor out = Tensor::zeros({mat.dim(1)});
  for (int64_t c = 0; c < mat.dim(1); ++c) out[c] = mat.at2(r, c);
  return out;
}

std::string frame_name(int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05" PRId64 ".png", t);
  return buf;
}

nlohmann::json load_stage_meta(const std::string& dir, const std::string& what,
                               const std::string& expect_stage,
                               ParamStore* store) {
  if (dir.empty()) {
    throw UsageError("no " + what + " checkpoint directory given");
  }
  if (!fs::exists(fs::path(dir) / "manifest.json")) {
    throw DataError("missing " + what + " checkpoint: '" + dir +
                    "' has no manifest.json");
  }
  nlohmann::json meta;
  *store = load_checkpoint(dir, nullptr, &meta);
  const std::string stage = meta.value("stage", std::string());
  if (stage != expect_stage) {
    throw DataError("checkpoint at '" + dir + "' holds stage '" + stage +
                    "', expected '" + expect_stage + "'");
  }
  return meta;
}

nlohmann::json config_of(const nlohmann::json& meta) {
  if (!meta.contains("config")) {
    throw DataError("checkpoint metadata has no config block");
  }
  return meta.at("config");
}

// Per-frame rigid transforms that drive the meshes: frame t is
// compose_relative(reference, relative_t). Used identically for predictions
// and ground truth so matching inputs give bitwise-equal poses.
Tensor composed_pose_rows(const FaceModel& fm, const Tensor& p_ref,
                          const Tensor& p_rel_seq) {
  const int64_t f = p_rel_seq.dim(0);
  Tensor out = Tensor::zeros({f, 6});
  for (int64_t t = 0; t < f; ++t) {
    Tensor composed = fm.compose_relative(p_ref, row6(p_rel_seq, t));
    for (int64_t i = 0; i < 6; ++i) out.at2(t, i) = composed[i];
  }
  return out;
}

// [20,2] pixel coordinates of the landmark vertices of one posed mesh.
Tensor mesh_landmarks(const FaceModel& fm, const Tensor& verts,
                      const Camera& cam) {
  Tensor px = project_vertices(verts, cam);
  Tensor out = Tensor::zeros({int64_t(fm.landmarks.size()), 2});
  for (size_t k = 0; k < fm.landmarks.size(); ++k) {
    out.at2(int64_t(k), 0) = px.at2(fm.landmarks[k], 0);
    out.at2(int64_t(k), 1) = px.at2(fm.landmarks[k], 1);
  }
  return out;
}

const DatasetClip& find_clip(const Dataset& ds, const std::string& name) {
  for (const DatasetClip& c : ds.clips) {
    if (c.name == name) return c;
  }
  throw DataError("clip '" + name + "' not found in dataset '" + ds.dir + "'");
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

BsvoConfig bsvo_config_from_meta(const nlohmann::json& meta) {
  const nlohmann::json c = config_of(meta);
  BsvoConfig cfg;
  cfg.d_model = c.value("d_model", cfg.d_model);
  cfg.heads = c.value("heads", cfg.heads);
  cfg.layers = c.value("layers", cfg.layers);
  cfg.lr = c.value("lr", cfg.lr);
  cfg.steps = c.value("steps", cfg.steps);
  cfg.batch = c.value("batch", cfg.batch);
  cfg.seed = c.value("seed", cfg.seed);
  cfg.teacher_forcing = c.value("teacher_forcing", cfg.teacher_forcing);
  cfg.shared_trunk = c.value("shared_trunk", cfg.shared_trunk);
  cfg.blendshape_only = c.value("blendshape_only", cfg.blendshape_only);
  cfg.vertex_only = c.value("vertex_only", cfg.vertex_only);
  cfg.audio_dims = c.value("audio_dims", cfg.audio_dims);
  cfg.d_id = c.value("d_id", cfg.d_id);
  cfg.lip_count = c.value("lip_count", cfg.lip_count);
  return cfg;
}

PoseCodebookConfig pose_config_from_meta(const nlohmann::json& meta) {
  const nlohmann::json c = config_of(meta);
  PoseCodebookConfig cfg;
  cfg.K = c.value("K", cfg.K);
  cfg.d_z = c.value("d_z", cfg.d_z);
  cfg.downsample = c.value("downsample", cfg.downsample);
  cfg.phase1_steps = c.value("phase1_steps", cfg.phase1_steps);
  cfg.phase2_steps = c.value("phase2_steps", cfg.phase2_steps);
  cfg.lr = c.value("lr", cfg.lr);
  cfg.seed = c.value("seed", cfg.seed);
  cfg.absolute_pose = c.value("absolute_pose", cfg.absolute_pose);
  cfg.initial_pose = c.value("initial_pose", cfg.initial_pose);
  cfg.audio_dims = c.value("audio_dims", cfg.audio_dims);
  cfg.d_id = c.value("d_id", cfg.d_id);
  cfg.d_model = c.value("d_model", cfg.d_model);
  cfg.heads = c.value("heads", cfg.heads);
  cfg.mapper_layers = c.value("mapper_layers", cfg.mapper_layers);
  return cfg;
}

M2vConfig m2v_config_from_meta(const nlohmann::json& meta) {
  const nlohmann::json c = config_of(meta);
  M2vConfig cfg;
  cfg.height = c.value("height", cfg.height);
  cfg.width = c.value("width", cfg.width);
  cfg.lr = c.value("lr", cfg.lr);
  cfg.steps = c.value("steps", cfg.steps);
  cfg.batch = c.value("batch", cfg.batch);
  cfg.seed = c.value("seed", cfg.seed);
  cfg.lip_branch = c.value("lip_branch", cfg.lip_branch);
  cfg.kl_weight = c.value("kl_weight", cfg.kl_weight);
  cfg.flow_scale = c.value("flow_scale", cfg.flow_scale);
  cfg.lip_sigma = c.value("lip_sigma", cfg.lip_sigma);
  cfg.lip_maps = c.value("lip_maps", cfg.lip_maps);
  cfg.w_perc = c.value("w_perc", cfg.w_perc);
  cfg.w_fm = c.value("w_fm", cfg.w_fm);
  cfg.w_adv = c.value("w_adv", cfg.w_adv);
  return cfg;
}

LoadedStages load_stages(const StageCheckpoints& ckpts) {
  LoadedStages out;

  ParamStore expr_store;
  nlohmann::json expr_meta =
      load_stage_meta(ckpts.expr, "expression", "a2m-expr", &expr_store);
  out.expr =
      BsvoModel::from_store(bsvo_config_from_meta(expr_meta), std::move(expr_store));

  if (ckpts.pose.empty()) {
    throw UsageError("no pose checkpoint directory given");
  }
  const std::string cb_dir = (fs::path(ckpts.pose) / "codebook").string();
  const std::string mp_dir = (fs::path(ckpts.pose) / "mapper").string();
  if (!fs::exists(fs::path(cb_dir) / "manifest.json")) {
    throw DataError("pose checkpoint is missing its codebook stage: '" +
                    cb_dir + "'");
  }
  if (!fs::exists(fs::path(mp_dir) / "manifest.json")) {
    throw DataError("pose checkpoint is missing its mapper stage: '" + mp_dir +
                    "'");
  }
  ParamStore cb_store, mp_store;
  nlohmann::json cb_meta =
      load_stage_meta(cb_dir, "pose codebook", "a2m-pose-codebook", &cb_store);
  nlohmann::json mp_meta =
      load_stage_meta(mp_dir, "pose mapper", "a2m-pose-mapper", &mp_store);
  PoseCodebookConfig cb_cfg = pose_config_from_meta(cb_meta);
  PoseCodebookConfig mp_cfg = pose_config_from_meta(mp_meta);
  if (cb_cfg.K != mp_cfg.K || cb_cfg.d_z != mp_cfg.d_z ||
      cb_cfg.downsample != mp_cfg.downsample ||
      cb_cfg.absolute_pose != mp_cfg.absolute_pose) {
    throw DataError(
        "pose codebook and mapper checkpoints disagree on the latent layout");
  }
  out.vq = PoseVqvae::from_store(cb_cfg, std::move(cb_store));
  out.vq.frozen = true;
  out.mapper = PoseMapper::from_store(mp_cfg, std::move(mp_store));

  ParamStore m2v_store;
  nlohmann::json m2v_meta =
      load_stage_meta(ckpts.m2v, "frame generator", "m2v", &m2v_store);
  out.m2v =
      M2vModel::from_store(m2v_config_from_meta(m2v_meta), std::move(m2v_store));
  return out;
}

InferSummary run_inference(const InferRequest& req) {
  if (req.out_dir.empty()) throw UsageError("no inference output directory");
  if (!(req.fps > 0)) throw UsageError("fps must be positive");

  Dataset ds = load_dataset(req.dataset_dir);
  const DatasetClip& clip = find_clip(ds, req.clip);
  const FaceModel& fm = ds.model;
  LoadedStages st = load_stages(req.ckpts);

  if (st.expr.cfg.audio_dims != kAudioDims ||
      st.mapper.cfg.audio_dims != kAudioDims) {
    throw DataError("checkpoints expect a different audio feature width");
  }
  if (st.expr.cfg.d_id != fm.d_id || st.mapper.cfg.d_id != fm.d_id) {
    throw DataError("checkpoints expect a different identity coefficient size");
  }
  if (3 * st.expr.cfg.lip_count != clip.olip.dim(1)) {
    throw DataError("expression checkpoint lip vertex count " +
                    std::to_string(st.expr.cfg.lip_count) +
                    " does not match the dataset");
  }

  // Driving audio: the clip's own features, or an override (.wav is turned
  // into features at the requested frame rate; anything else is loaded as a
  // stored feature tensor).
  Tensor audio;
  if (req.audio_path.empty()) {
    audio = clip.audio;
  } else if (ends_with(req.audio_path, ".wav")) {
    AudioClip wav = read_wav(req.audio_path);
    audio = extract_features(wav.samples, wav.sample_rate,
                             int64_t(std::llround(req.fps)));
  } else {
    audio = load_features(req.audio_path, kAudioDims);
  }
  const int64_t f = audio.ndim() == 2 ? audio.dim(0) : 0;
  if (f < 1) {
    throw DataError("driving audio produced no frames");
  }

  // Stage 1: audio -> expression coefficients, free-running.
  Tensor z_style = encode_style(st.expr, clip.alpha);
  Tensor pred = predict_expression(st.expr, audio, z_style, Tensor{});
  Tensor beta, olip;
  split_coeffs(pred, st.expr.cfg.lip_count, &beta, &olip);

  // Stage 1b: audio -> head pose via the frozen codebook.
  Tensor p0 = row6(clip.pose, 0);
  MapForwardResult mf =
      map_forward(st.mapper, st.vq, audio, clip.alpha, p0, f);
  // Under the absolute-pose ablation the decoded rows already are the full
  // transforms, so they compose on top of an identity reference instead.
  Tensor p_ref_eff =
      st.mapper.cfg.absolute_pose ? Tensor::zeros({6}) : p0;
  Tensor pose_rows = composed_pose_rows(fm, p_ref_eff, mf.p_rel);

  std::vector<Tensor> meshes =
      predicted_meshes(fm, clip.alpha, pred, p_ref_eff, mf.p_rel);

  // Stage 2 inputs tied to the reference frame of the clip.
  const M2vConfig& mc = st.m2v.cfg;
  Camera cam{mc.width, mc.height};
  Tensor ncc = fm.ncc();
  Tensor rel0 = row6(clip.pose, 1);
  for (int64_t i = 0; i < 6; ++i) rel0[i] -= p0[i];
  Tensor ref_mesh = fm.apply_pose(
      fm.assemble(clip.alpha, row6(clip.beta, 0), row6(clip.olip, 0)),
      fm.compose_relative(p0, rel0));
  Tensor pt_ref = render_mesh(ref_mesh, fm.tris, ncc, cam).color;
  Tensor lm_ref = mesh_landmarks(fm, ref_mesh, cam);
  Tensor ref_image = read_png(clip_frame_path(clip, 0));
  if (ref_image.ndim() != 3 || ref_image.dim(0) != mc.height ||
      ref_image.dim(1) != mc.width) {
    throw DataError("reference frame is " + ref_image.shape_str() +
                    " but the frame generator was trained at " +
                    std::to_string(mc.height) + "x" + std::to_string(mc.width));
  }

  fs::create_directories(fs::path(req.out_dir) / "frames");

  nlohmann::json manifest;
  manifest["clip"] = req.clip;
  manifest["fps"] = req.fps;
  manifest["count"] = f;
  std::vector<std::string> names;
  for (int64_t t = 0; t < f; ++t) {
    const Tensor& mesh = meshes[size_t(t)];
    Tensor pt_d = render_mesh(mesh, fm.tris, ncc, cam).color;
    Tensor lip_diff =
        lip_gaussian_diff(mesh_landmarks(fm, mesh, cam), lm_ref, mc.lip_maps,
                          mc.height, mc.width, mc.lip_sigma);
    Tensor frame = m2v_infer_frame(st.m2v, ref_image, pt_ref, pt_d, lip_diff);
    const std::string name = frame_name(t);
    write_png((fs::path(req.out_dir) / "frames" / name).string(), frame);
    names.push_back(name);
  }
  manifest["frames"] = names;

  save_tensor((fs::path(req.out_dir) / "beta.tnsr").string(), beta);
  save_tensor((fs::path(req.out_dir) / "olip.tnsr").string(), olip);
  save_tensor((fs::path(req.out_dir) / "pose.tnsr").string(), pose_rows);
  std::ofstream mout(fs::path(req.out_dir) / "manifest.json");
  mout << manifest.dump(2) << "\n";
  if (!mout) throw DataError("failed to write inference manifest");
  mout.close();

  InferSummary summary;
  summary.frames = f;
  summary.out_dir = req.out_dir;
  return summary;
}

namespace {

// Coefficients, per-frame mesh transforms, and frame paths of one scored
// sequence, reconstructed identically for predictions and ground truth.
struct ScoredSequence {
  Tensor beta, olip;
  Tensor pose_rows;  // [f,6] composed per-frame transforms
  std::vector<std::string> frame_paths;
};

ScoredSequence from_infer_output(const std::string& dir) {
  std::ifstream min(fs::path(dir) / "manifest.json");
  nlohmann::json manifest;
  try {
    min >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("unreadable inference manifest in '" + dir +
                    "': " + e.what());
  }
  if (!manifest.contains("frames") || !manifest["frames"].is_array()) {
    throw DataError("inference manifest in '" + dir +
                    "' lists no frames");
  }
  ScoredSequence s;
  s.beta = load_tensor((fs::path(dir) / "beta.tnsr").string());
  s.olip = load_tensor((fs::path(dir) / "olip.tnsr").string());
  s.pose_rows = load_tensor((fs::path(dir) / "pose.tnsr").string());
  for (const auto& name : manifest["frames"]) {
    if (!name.is_string()) {
      throw DataError("inference manifest frame entries must be names");
    }
    s.frame_paths.push_back(
        (fs::path(dir) / "frames" / name.get<std::string>()).string());
  }
  return s;
}

ScoredSequence from_clip(const FaceModel& fm, const DatasetClip& clip) {
  ScoredSequence s;
  s.beta = clip.beta;
  s.olip = clip.olip;
  Tensor p0 = row6(clip.pose, 0);
  Tensor rel = to_relative(clip.pose);
  s.pose_rows = composed_pose_rows(fm, p0, rel);
  for (int64_t t = 0; t < clip.beta.dim(0); ++t) {
    s.frame_paths.push_back(clip_frame_path(clip, t));
  }
  return s;
}

std::vector<Tensor> sequence_meshes(const FaceModel& fm, const Tensor& alpha,
                                    const ScoredSequence& s) {
  std::vector<Tensor> out;
  for (int64_t t = 0; t < s.beta.dim(0); ++t) {
    Tensor verts =
        fm.assemble(alpha, row6(s.beta, t), row6(s.olip, t));
    out.push_back(fm.apply_pose(verts, row6(s.pose_rows, t)));
  }
  return out;
}

}  // namespace

EvalSummary run_eval(const std::string& pred_dir,
                     const std::string& dataset_dir, const std::string& clip,
                     const std::string& csv_path) {
  Dataset ds = load_dataset(dataset_dir);
  const DatasetClip& gt_clip = find_clip(ds, clip);
  const FaceModel& fm = ds.model;

  ScoredSequence pred;
  if (fs::exists(fs::path(pred_dir) / "manifest.json")) {
    pred = from_infer_output(pred_dir);
  } else if (fs::exists(fs::path(pred_dir) / "beta.tnsr") &&
             fs::exists(fs::path(pred_dir) / "pose.tnsr")) {
    // A dataset clip directory scores like its own prediction.
    DatasetClip pc;
    pc.dir = pred_dir;
    pc.name = fs::path(pred_dir).filename().string();
    pc.beta = load_tensor((fs::path(pred_dir) / "beta.tnsr").string());
    pc.olip = load_tensor((fs::path(pred_dir) / "olip.tnsr").string());
    pc.pose = load_tensor((fs::path(pred_dir) / "pose.tnsr").string());
    pred = from_clip(fm, pc);
  } else {
    throw DataError("'" + pred_dir +
                    "' is neither an inference output (manifest.json) nor a "
                    "dataset clip directory");
  }
  ScoredSequence gt = from_clip(fm, gt_clip);

  if (pred.beta.ndim() != 2 || pred.olip.ndim() != 2 ||
      pred.pose_rows.ndim() != 2 || pred.pose_rows.dim(1) != 6) {
    throw DataError("prediction coefficient tensors are malformed");
  }
  const int64_t f = pred.beta.dim(0);
  if (f != gt.beta.dim(0)) {
    throw DataError("prediction has " + std::to_string(f) +
                    " frames but the clip has " +
                    std::to_string(gt.beta.dim(0)));
  }
  if (pred.beta.dim(1) != gt.beta.dim(1) ||
      pred.olip.dim(1) != gt.olip.dim(1) || pred.pose_rows.dim(0) != f ||
      pred.olip.dim(0) != f) {
    throw DataError("prediction coefficients do not match the dataset layout");
  }
  if (int64_t(pred.frame_paths.size()) != f) {
    throw DataError("prediction frame count does not match its coefficients");
  }

  EvalSummary out;
  out.frames = f;

  double psnr_sum = 0.0;
  for (int64_t t = 0; t < f; ++t) {
    Tensor a = read_png(pred.frame_paths[size_t(t)]);
    Tensor b = read_png(gt.frame_paths[size_t(t)]);
    if (!a.same_shape(b)) {
      throw DataError("frame " + std::to_string(t) +
                      " differs in size from the clip frame");
    }
    psnr_sum += psnr(a, b);
  }
  out.psnr_mean = psnr_sum / double(f);

  out.vertex_mse = vertex_mse(sequence_meshes(fm, gt_clip.alpha, pred),
                              sequence_meshes(fm, gt_clip.alpha, gt));
  out.beta_mae = mean_abs_error(pred.beta, gt.beta);
  out.hpd_pred = head_pose_diversity({pred.pose_rows});
  out.hpd_gt = head_pose_diversity({gt.pose_rows});

  if (!csv_path.empty()) {
    write_metrics_csv(csv_path, {{"frames", double(f)},
                                 {"psnr_mean", out.psnr_mean},
                                 {"vertex_mse", out.vertex_mse},
                                 {"beta_mae", out.beta_mae},
                                 {"hpd_pred", out.hpd_pred},
                                 {"hpd_gt", out.hpd_gt}});
  }
  return out;
}

}  // namespace vividforge
