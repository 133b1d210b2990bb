#pragma once

#include <string>
#include <vector>

#include "vividforge/face_model.hpp"
#include "vividforge/rng.hpp"
#include "vividforge/tensor.hpp"

namespace vividforge {

// Procedural paired data: every clip's blendshapes, lip offsets, and poses
// are deterministic functions of its audio features and style, so each
// training stage has a known recoverable mapping.

constexpr int64_t kNumStyles = 8;
constexpr int64_t kAudioDims = 32;
constexpr uint64_t kFaceModelSeed = 0xFACE;

struct SynthConfig {
  int64_t num_clips = 10;
  int64_t frames = 40;
  uint64_t seed = 1;
  int64_t height = 64;
  int64_t width = 64;
};

// Fixed per-style mapping matrices and identity anchors. Seeded by a literal
// constant, never by the dataset seed, so every dataset shares one oracle.
struct OracleStyles {
  std::vector<Tensor> w_beta;   // [12, kAudioDims] per style
  std::vector<Tensor> w_olip;   // [3L, kAudioDims] per style
  std::vector<Tensor> w_pose;   // [6, kAudioDims] per style
  std::vector<Tensor> anchors;  // [d_id] identity anchor per style

  static const OracleStyles& get(int64_t lip_count);
};

// 3-frame moving average along rows with clamped ends.
Tensor smooth3(const Tensor& seq);

// beta[t] = clip(W_style . smooth3(audio)[t], -3, 3); audio [f,kAudioDims].
Tensor oracle_mapping(const Tensor& audio, int64_t style_id,
                      const OracleStyles& styles);
// Lip vertex offsets from the same smoothed features, clipped to +-0.1.
Tensor oracle_lip_offsets(const Tensor& audio, int64_t style_id,
                          const OracleStyles& styles);
// Relative pose walk: cumulative audio-driven increments, clamped to
// +-0.3 rad rotation and +-0.1 units translation. Returns [f,6].
Tensor oracle_pose_walk(const Tensor& audio, int64_t style_id,
                        const OracleStyles& styles);

// AR(1) feature fabric: x_t = 0.85 x_{t-1} + 0.55 g_t per dimension.
Tensor synth_audio_features(Rng& rng, int64_t frames);

// Flat backdrop plus a torso slab, in [0,1]; stands in for the outer face
// region texture.
Tensor synth_background(Rng& rng, int64_t h, int64_t w);

void generate_dataset(const std::string& out_dir, const SynthConfig& cfg);

struct DatasetClip {
  std::string name;  // clip_%04d
  std::string dir;
  Tensor audio;      // [f, kAudioDims]
  Tensor alpha;      // [d_id]
  Tensor beta;       // [f, 12]
  Tensor olip;       // [f, 3L]
  Tensor pose;       // [f+1, 6]; row 0 is the reference pose
  Tensor landmarks;  // [f, 20, 2]
};

struct Dataset {
  std::string dir;
  FaceModel model;
  std::vector<DatasetClip> clips;
  std::vector<int64_t> train, val, test;  // indices into clips

  int64_t frames() const { return clips.empty() ? 0 : clips[0].beta.dim(0); }
};

// Loads coefficients and split (frames/masks stay on disk; see frame_path).
Dataset load_dataset(const std::string& dir);

std::string clip_frame_path(const DatasetClip& clip, int64_t t);
std::string clip_mask_path(const DatasetClip& clip, int64_t t);

}  // namespace vividforge
