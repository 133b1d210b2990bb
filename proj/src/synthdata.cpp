#include "vividforge/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "vividforge/error.hpp"
#include "vividforge/png_io.hpp"
#include "vividforge/rasterizer.hpp"
#include "vividforge/threading.hpp"
#include "vividforge/tnsr_io.hpp"

namespace fs = std::filesystem;

namespace vividforge {

namespace {

// The style bank is seeded by this literal, never by the dataset seed, so
// every dataset shares one audio->motion ground truth.
constexpr uint64_t kStyleSeed = 0x57131E5ULL;
constexpr int64_t kIdDims = 8;

// Rotation components sit in pose slots 0..2, translation in 3..5.
constexpr double kRotWalkLimit = 0.3;
constexpr double kTransWalkLimit = 0.1;

Tensor gaussian_matrix(Rng& rng, int64_t rows, int64_t cols, double sigma) {
  Tensor m = Tensor::zeros({rows, cols});
  for (double& v : m.data) v = sigma * rng.next_gaussian();
  return m;
}

// m [r,c] times each row of seq [f,c] -> [f,r], clipped to +-limit.
Tensor map_rows_clipped(const Tensor& seq, const Tensor& m, double limit) {
  const int64_t f = seq.dim(0), c = seq.dim(1), r = m.dim(0);
  Tensor out = Tensor::zeros({f, r});
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < c; ++j) acc += m.at2(i, j) * seq.at2(t, j);
      out.at2(t, i) = std::clamp(acc, -limit, limit);
    }
  }
  return out;
}

void check_audio(const Tensor& audio) {
  if (audio.ndim() != 2 || audio.dim(1) != kAudioDims) {
    throw DataError("oracle mapping expects [frames," +
                    std::to_string(kAudioDims) + "] audio features, got " +
                    audio.shape_str());
  }
}

void check_style(int64_t style_id) {
  if (style_id < 0 || style_id >= kNumStyles) {
    throw DataError("style_id must be in [0," + std::to_string(kNumStyles) +
                    "), got " + std::to_string(style_id));
  }
}

std::string clip_name(int64_t idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "clip_%04d", int(idx));
  return buf;
}

std::string frame_name(int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "frame_%05d.png", int(t));
  return buf;
}

std::string mask_name(int64_t t) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "mask_%05d.png", int(t));
  return buf;
}

}  // namespace

const OracleStyles& OracleStyles::get(int64_t lip_count) {
  static OracleStyles bank;
  static int64_t built_for = -1;
  if (built_for != -1 && built_for != lip_count) {
    throw DataError("oracle style bank already built for lip count " +
                    std::to_string(built_for));
  }
  if (built_for == -1) {
    for (int64_t s = 0; s < kNumStyles; ++s) {
      const std::string tag = "style." + std::to_string(s);
      // Sigmas are calibrated to the smoothed AR(1) feature scale (~0.97 per
      // dim over 32 dims): beta std ~0.55, lip offsets ~0.03 units, pose
      // increments ~0.03 rad / ~0.01 units per frame.
      Rng rb(kStyleSeed, tag + ".beta");
      bank.w_beta.push_back(gaussian_matrix(rb, 12, kAudioDims, 0.1));
      Rng ro(kStyleSeed, tag + ".olip");
      bank.w_olip.push_back(
          gaussian_matrix(ro, 3 * lip_count, kAudioDims, 0.00544));
      Rng rp(kStyleSeed, tag + ".pose");
      Tensor wp = gaussian_matrix(rp, 6, kAudioDims, 1.0);
      for (int64_t i = 0; i < 6; ++i) {
        const double sigma = i < 3 ? 0.00544 : 0.00181;
        for (int64_t j = 0; j < kAudioDims; ++j) wp.at2(i, j) *= sigma;
      }
      bank.w_pose.push_back(std::move(wp));
      Rng ra(kStyleSeed, tag + ".anchor");
      Tensor anchor = Tensor::zeros({kIdDims});
      for (double& v : anchor.data) v = ra.next_uniform(-1.0, 1.0);
      bank.anchors.push_back(std::move(anchor));
    }
    built_for = lip_count;
  }
  return bank;
}

Tensor smooth3(const Tensor& seq) {
  if (seq.ndim() != 2) {
    throw DataError("smooth3 expects [frames,dims], got " + seq.shape_str());
  }
  const int64_t f = seq.dim(0), d = seq.dim(1);
  Tensor out = Tensor::zeros({f, d});
  for (int64_t t = 0; t < f; ++t) {
    const int64_t lo = t > 0 ? t - 1 : 0;
    const int64_t hi = t + 1 < f ? t + 1 : f - 1;
    for (int64_t j = 0; j < d; ++j) {
      out.at2(t, j) = (seq.at2(lo, j) + seq.at2(t, j) + seq.at2(hi, j)) / 3.0;
    }
  }
  return out;
}

Tensor oracle_mapping(const Tensor& audio, int64_t style_id,
                      const OracleStyles& styles) {
  check_audio(audio);
  check_style(style_id);
  return map_rows_clipped(smooth3(audio), styles.w_beta[size_t(style_id)],
                          3.0);
}

Tensor oracle_lip_offsets(const Tensor& audio, int64_t style_id,
                          const OracleStyles& styles) {
  check_audio(audio);
  check_style(style_id);
  return map_rows_clipped(smooth3(audio), styles.w_olip[size_t(style_id)],
                          0.1);
}

Tensor oracle_pose_walk(const Tensor& audio, int64_t style_id,
                        const OracleStyles& styles) {
  check_audio(audio);
  check_style(style_id);
  // Unclipped per-frame increments, then a cumulative walk clamped into the
  // stated rotation/translation box.
  Tensor delta = map_rows_clipped(smooth3(audio),
                                  styles.w_pose[size_t(style_id)], 1e30);
  const int64_t f = delta.dim(0);
  Tensor walk = Tensor::zeros({f, 6});
  double cur[6] = {0, 0, 0, 0, 0, 0};
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t i = 0; i < 6; ++i) {
      const double limit = i < 3 ? kRotWalkLimit : kTransWalkLimit;
      cur[i] = std::clamp(cur[i] + delta.at2(t, i), -limit, limit);
      walk.at2(t, i) = cur[i];
    }
  }
  return walk;
}

Tensor synth_audio_features(Rng& rng, int64_t frames) {
  if (frames < 1) throw DataError("audio synthesis needs frames >= 1");
  Tensor a = Tensor::zeros({frames, kAudioDims});
  for (int64_t t = 0; t < frames; ++t) {
    for (int64_t j = 0; j < kAudioDims; ++j) {
      const double prev = t > 0 ? a.at2(t - 1, j) : 0.0;
      a.at2(t, j) = 0.85 * prev + 0.55 * rng.next_gaussian();
    }
  }
  return a;
}

Tensor synth_background(Rng& rng, int64_t h, int64_t w) {
  double base[3], torso[3];
  for (double& v : base) v = rng.next_uniform(0.25, 0.75);
  for (double& v : torso) v = rng.next_uniform(0.15, 0.85);
  const double slope = rng.next_uniform(-0.12, 0.12);
  const int64_t torso_top = (h * 13) / 16;
  Tensor bg = Tensor::zeros({h, w, 3});
  for (int64_t y = 0; y < h; ++y) {
    const double shade = slope * (double(y) / double(h > 1 ? h - 1 : 1) - 0.5);
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const double v = (y >= torso_top ? torso[c] : base[c]) + shade;
        bg[(y * w + x) * 3 + c] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return bg;
}

namespace {

struct ClipArrays {
  Tensor audio, alpha, beta, olip, pose, landmarks;
  std::vector<Tensor> frames, masks;  // [H,W,3] and [H,W]
};

// Everything below is a deterministic function of (model, styles, seed,
// clip index, config); regeneration must be byte-identical.
ClipArrays make_clip(const FaceModel& model, const OracleStyles& styles,
                     const SynthConfig& cfg, int64_t idx) {
  const std::string tag = clip_name(idx);
  const int64_t style_id = idx % kNumStyles;
  ClipArrays out;

  Rng audio_rng(cfg.seed, tag + ".audio");
  out.audio = synth_audio_features(audio_rng, cfg.frames);

  Rng alpha_rng(cfg.seed, tag + ".alpha");
  out.alpha = styles.anchors[size_t(style_id)];
  for (double& v : out.alpha.data) v += 0.1 * alpha_rng.next_gaussian();

  out.beta = oracle_mapping(out.audio, style_id, styles);
  out.olip = oracle_lip_offsets(out.audio, style_id, styles);

  Rng pose_rng(cfg.seed, tag + ".pose");
  Tensor p0 = Tensor::zeros({6});
  for (int64_t i = 0; i < 6; ++i) {
    p0[i] = i < 3 ? pose_rng.next_uniform(-0.2, 0.2)
                  : pose_rng.next_uniform(-0.07, 0.07);
  }
  const Tensor walk = oracle_pose_walk(out.audio, style_id, styles);
  out.pose = Tensor::zeros({cfg.frames + 1, 6});
  for (int64_t i = 0; i < 6; ++i) out.pose.at2(0, i) = p0[i];
  for (int64_t t = 0; t < cfg.frames; ++t) {
    for (int64_t i = 0; i < 6; ++i) {
      out.pose.at2(t + 1, i) = p0[i] + walk.at2(t, i);
    }
  }

  // Render through the same canonical chain a re-render from the stored
  // arrays would use: relative poses recovered from the stored absolute rows.
  Tensor p_rel = Tensor::zeros({cfg.frames, 6});
  for (int64_t t = 0; t < cfg.frames; ++t) {
    for (int64_t i = 0; i < 6; ++i) {
      p_rel.at2(t, i) = out.pose.at2(t + 1, i) - out.pose.at2(0, i);
    }
  }
  const std::vector<Tensor> meshes =
      model.driven_mesh_sequence(out.alpha, out.beta, out.olip, p0, p_rel);

  Rng bg_rng(cfg.seed, tag + ".bg");
  const Tensor bg = synth_background(bg_rng, cfg.height, cfg.width);
  const Tensor colors = model.ncc();
  const Camera cam{cfg.width, cfg.height, 0.45};

  out.landmarks = Tensor::zeros({cfg.frames, 20, 2});
  for (int64_t t = 0; t < cfg.frames; ++t) {
    RenderOutput r = render_mesh(meshes[size_t(t)], model.tris, colors, cam);
    out.frames.push_back(composite(r.color, bg, r.mask));
    out.masks.push_back(std::move(r.mask));
    const Tensor px = project_vertices(meshes[size_t(t)], cam);
    for (int64_t k = 0; k < 20; ++k) {
      const int64_t v = model.landmarks[size_t(k)];
      out.landmarks[(t * 20 + k) * 2 + 0] = px.at2(v, 0);
      out.landmarks[(t * 20 + k) * 2 + 1] = px.at2(v, 1);
    }
  }
  return out;
}

void write_clip(const std::string& dir, const ClipArrays& c) {
  fs::create_directories(dir + "/frames");
  fs::create_directories(dir + "/masks");
  save_tensor(dir + "/audio.tnsr", c.audio);
  save_tensor(dir + "/alpha.tnsr", c.alpha);
  save_tensor(dir + "/beta.tnsr", c.beta);
  save_tensor(dir + "/olip.tnsr", c.olip);
  save_tensor(dir + "/pose.tnsr", c.pose);
  save_tensor(dir + "/landmarks.tnsr", c.landmarks);
  for (size_t t = 0; t < c.frames.size(); ++t) {
    write_png(dir + "/frames/" + frame_name(int64_t(t)), c.frames[t]);
    write_png(dir + "/masks/" + mask_name(int64_t(t)), c.masks[t]);
  }
}

void split_counts(int64_t n, int64_t* n_val, int64_t* n_test) {
  int64_t held = n / 10;
  if (held == 0 && n >= 3) held = 1;
  *n_val = held;
  *n_test = held;
}

}  // namespace

void generate_dataset(const std::string& out_dir, const SynthConfig& cfg) {
  if (cfg.num_clips < 1 || cfg.frames < 1) {
    throw DataError("dataset generation needs at least one clip and frame");
  }
  if (cfg.height < 16 || cfg.width < 16) {
    throw DataError("dataset frames must be at least 16x16");
  }
  const FaceModel model = FaceModel::build(kFaceModelSeed);
  const OracleStyles& styles = OracleStyles::get(model.lip_count());
  fs::create_directories(out_dir);
  model.save(out_dir + "/model");

  parallel_for(cfg.num_clips, [&](int64_t begin, int64_t end) {
    for (int64_t i = begin; i < end; ++i) {
      write_clip(out_dir + "/" + clip_name(i), make_clip(model, styles, cfg, i));
    }
  });

  int64_t n_val = 0, n_test = 0;
  split_counts(cfg.num_clips, &n_val, &n_test);
  nlohmann::json split;
  split["train"] = nlohmann::json::array();
  split["val"] = nlohmann::json::array();
  split["test"] = nlohmann::json::array();
  for (int64_t i = 0; i < cfg.num_clips; ++i) {
    const char* bucket = i < cfg.num_clips - n_val - n_test ? "train"
                         : i < cfg.num_clips - n_test       ? "val"
                                                            : "test";
    split[bucket].push_back(clip_name(i));
  }
  std::ofstream sf(out_dir + "/split.json", std::ios::binary);
  sf << split.dump(2) << "\n";

  nlohmann::json meta;
  meta["clips"] = cfg.num_clips;
  meta["frames"] = cfg.frames;
  meta["seed"] = cfg.seed;
  meta["height"] = cfg.height;
  meta["width"] = cfg.width;
  meta["audio_dims"] = kAudioDims;
  meta["styles"] = kNumStyles;
  std::ofstream mf(out_dir + "/dataset.json", std::ios::binary);
  mf << meta.dump(2) << "\n";
  if (!sf || !mf) throw DataError("failed writing dataset manifests");
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream sf(dir + "/split.json", std::ios::binary);
  if (!sf) throw DataError("no split.json in " + dir + "; not a dataset");
  nlohmann::json split;
  try {
    sf >> split;
  } catch (const std::exception& e) {
    throw DataError("malformed split.json in " + dir + ": " + e.what());
  }

  Dataset ds;
  ds.dir = dir;
  ds.model = FaceModel::load(dir + "/model");

  std::map<std::string, int64_t> index_of;
  for (const char* bucket : {"train", "val", "test"}) {
    if (!split.contains(bucket)) {
      throw DataError(std::string("split.json missing bucket ") + bucket);
    }
    for (const auto& name : split[bucket]) {
      const std::string n = name.get<std::string>();
      if (index_of.count(n)) throw DataError("clip listed twice: " + n);
      DatasetClip clip;
      clip.name = n;
      clip.dir = dir + "/" + n;
      clip.audio = load_tensor(clip.dir + "/audio.tnsr");
      clip.alpha = load_tensor(clip.dir + "/alpha.tnsr");
      clip.beta = load_tensor(clip.dir + "/beta.tnsr");
      clip.olip = load_tensor(clip.dir + "/olip.tnsr");
      clip.pose = load_tensor(clip.dir + "/pose.tnsr");
      clip.landmarks = load_tensor(clip.dir + "/landmarks.tnsr");
      const int64_t f = clip.beta.dim(0);
      if (clip.audio.dim(0) != f || clip.olip.dim(0) != f ||
          clip.pose.dim(0) != f + 1 || clip.landmarks.dim(0) != f) {
        throw DataError("clip " + n + " sequence lengths disagree");
      }
      index_of[n] = int64_t(ds.clips.size());
      ds.clips.push_back(std::move(clip));
      const int64_t idx = int64_t(ds.clips.size()) - 1;
      if (std::string(bucket) == "train") ds.train.push_back(idx);
      else if (std::string(bucket) == "val") ds.val.push_back(idx);
      else ds.test.push_back(idx);
    }
  }
  if (ds.clips.empty()) throw DataError("dataset has no clips: " + dir);
  return ds;
}

std::string clip_frame_path(const DatasetClip& clip, int64_t t) {
  return clip.dir + "/frames/" + frame_name(t);
}

std::string clip_mask_path(const DatasetClip& clip, int64_t t) {
  return clip.dir + "/masks/" + mask_name(t);
}

}  // namespace vividforge
