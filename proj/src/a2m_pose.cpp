#include "vividforge/a2m_pose.hpp"

#include <cmath>
#include <set>

#include "json.hpp"
#include "vividforge/error.hpp"

namespace vividforge {

namespace {

constexpr int64_t kPoseDims = 6;
constexpr int64_t kChunkHidden = 48;   // per two-frame chunk
constexpr int64_t kLatentHidden = 64;  // per four-frame latent slot
constexpr int64_t kBatch = 4;

void check_cfg(const PoseCodebookConfig& cfg) {
  if (cfg.K < 2) throw DataError("pose codebook: K must be >= 2");
  if (cfg.d_z < 1) throw DataError("pose codebook: d_z must be >= 1");
  if (cfg.downsample != 4) {
    throw DataError(
        "pose codebook: the encoder halves the sequence twice, so downsample "
        "must be 4");
  }
  if (cfg.phase1_steps < 0 || cfg.phase2_steps < 0) {
    throw DataError("pose codebook: step counts must be >= 0");
  }
  if (cfg.d_model < 2 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0) {
    throw DataError("pose mapper: d_model must be a positive multiple of heads");
  }
  if (cfg.mapper_layers < 1) {
    throw DataError("pose mapper: mapper_layers must be >= 1");
  }
}

int mse_node(Graph& g, int a, int b) {
  const int d = g.sub(a, b);
  return g.scale(g.sum(g.mul(d, d)), 1.0 / double(g.value(d).numel()));
}

double mse_plain(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DataError(std::string(what) + ": shapes disagree, " + a.shape_str() +
                    " vs " + b.shape_str());
  }
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return acc / double(a.numel());
}

nlohmann::json config_json(const PoseCodebookConfig& cfg) {
  return {{"K", cfg.K},
          {"d_z", cfg.d_z},
          {"downsample", cfg.downsample},
          {"phase1_steps", cfg.phase1_steps},
          {"phase2_steps", cfg.phase2_steps},
          {"lr", cfg.lr},
          {"seed", cfg.seed},
          {"absolute_pose", cfg.absolute_pose},
          {"initial_pose", cfg.initial_pose},
          {"audio_dims", cfg.audio_dims},
          {"d_id", cfg.d_id},
          {"d_model", cfg.d_model},
          {"heads", cfg.heads},
          {"mapper_layers", cfg.mapper_layers}};
}

}  // namespace

Tensor to_relative(const Tensor& p_seq) {
  if (p_seq.ndim() != 2 || p_seq.dim(1) != kPoseDims || p_seq.dim(0) < 2) {
    throw DataError("to_relative: need at least [2,6] pose rows, got " +
                    p_seq.shape_str());
  }
  const int64_t f = p_seq.dim(0) - 1;
  Tensor out = Tensor::zeros({f, kPoseDims});
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t j = 0; j < kPoseDims; ++j) {
      out.at2(t, j) = p_seq.at2(t + 1, j) - p_seq.at2(0, j);
    }
  }
  return out;
}

Tensor to_absolute(const Tensor& p0, const Tensor& rel) {
  if (p0.numel() != kPoseDims) {
    throw DataError("to_absolute: reference pose must have 6 entries");
  }
  if (rel.ndim() != 2 || rel.dim(1) != kPoseDims) {
    throw DataError("to_absolute: relative poses must be [f,6], got " +
                    rel.shape_str());
  }
  Tensor out = Tensor::zeros(rel.shape);
  for (int64_t t = 0; t < rel.dim(0); ++t) {
    for (int64_t j = 0; j < kPoseDims; ++j) {
      out.at2(t, j) = p0[j] + rel.at2(t, j);
    }
  }
  return out;
}

Tensor pad_rows_to_multiple(const Tensor& seq, int64_t m) {
  if (seq.ndim() != 2 || seq.dim(0) < 1 || m < 1) {
    throw DataError("pad_rows_to_multiple: need a non-empty [f,D] sequence");
  }
  const int64_t f = seq.dim(0);
  const int64_t fp = ((f + m - 1) / m) * m;
  if (fp == f) return seq;
  Tensor out = Tensor::zeros({fp, seq.dim(1)});
  for (int64_t t = 0; t < fp; ++t) {
    const int64_t src = t < f ? t : f - 1;
    for (int64_t j = 0; j < seq.dim(1); ++j) {
      out.at2(t, j) = seq.at2(src, j);
    }
  }
  return out;
}

QuantizeResult quantize(const Tensor& z_hat, const Tensor& codebook) {
  if (codebook.ndim() != 2 || codebook.dim(0) < 1) {
    throw DataError("quantize: codebook must be a non-empty [K,d_z] table");
  }
  if (z_hat.ndim() != 2 || z_hat.dim(1) != codebook.dim(1)) {
    throw DataError("quantize: tokens must be [T," +
                    std::to_string(codebook.dim(1)) + "], got " +
                    z_hat.shape_str());
  }
  const int64_t t_count = z_hat.dim(0);
  const int64_t k_count = codebook.dim(0);
  const int64_t d = codebook.dim(1);
  QuantizeResult out;
  out.z_q = Tensor::zeros({t_count, d});
  out.indices.resize(size_t(t_count));
  for (int64_t t = 0; t < t_count; ++t) {
    int64_t best = 0;
    double best_d = 0.0;
    for (int64_t k = 0; k < k_count; ++k) {
      double dist = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        const double diff = z_hat.at2(t, j) - codebook.at2(k, j);
        dist += diff * diff;
      }
      if (k == 0 || dist < best_d) {
        best = k;
        best_d = dist;
      }
    }
    out.indices[size_t(t)] = best;
    for (int64_t j = 0; j < d; ++j) out.z_q.at2(t, j) = codebook.at2(best, j);
  }
  return out;
}

namespace {

void wire_vq(PoseVqvae& m) {
  const PoseCodebookConfig& cfg = m.cfg;
  m.enc1 = Linear{"vq.enc1", 2 * kPoseDims, kChunkHidden};
  m.enc2 = Linear{"vq.enc2", 2 * kChunkHidden, kLatentHidden};
  m.enc3 = Linear{"vq.enc3", kLatentHidden, cfg.d_z};
  m.dec1 = Linear{"vq.dec1", cfg.d_z, kLatentHidden};
  m.dec2 = Linear{"vq.dec2", kLatentHidden, 2 * kChunkHidden};
  m.dec3 = Linear{"vq.dec3", kChunkHidden, 2 * kPoseDims};
}

}  // namespace

PoseVqvae PoseVqvae::build(const PoseCodebookConfig& cfg) {
  check_cfg(cfg);
  PoseVqvae m;
  m.cfg = cfg;
  wire_vq(m);
  const uint64_t s = cfg.seed;
  m.enc1.init(m.params, s);
  m.enc2.init(m.params, s);
  m.enc3.init(m.params, s);
  m.dec1.init(m.params, s);
  m.dec2.init(m.params, s);
  m.dec3.init(m.params, s);
  m.params.add("vq.codebook",
               init_uniform(s, "vq.codebook", {cfg.K, cfg.d_z}, cfg.d_z));
  return m;
}

PoseVqvae PoseVqvae::from_store(const PoseCodebookConfig& cfg,
                                ParamStore store) {
  check_cfg(cfg);
  PoseVqvae m;
  m.cfg = cfg;
  wire_vq(m);
  m.params = std::move(store);
  if (!m.params.has("vq.codebook")) {
    throw DataError("pose checkpoint is missing the codebook table");
  }
  const Tensor& cb = m.params.at("vq.codebook");
  if (cb.ndim() != 2 || cb.dim(0) != cfg.K || cb.dim(1) != cfg.d_z) {
    throw DataError("pose checkpoint codebook is " + cb.shape_str() +
                    ", expected [" + std::to_string(cfg.K) + "," +
                    std::to_string(cfg.d_z) + "]");
  }
  return m;
}

int PoseVqvae::encode_node(ModelContext& ctx, const Tensor& padded) const {
  if (padded.ndim() != 2 || padded.dim(1) != kPoseDims ||
      padded.dim(0) < cfg.downsample || padded.dim(0) % cfg.downsample != 0) {
    throw DataError("pose encoder: input must be [4k,6] after padding, got " +
                    padded.shape_str());
  }
  Graph& g = ctx.g;
  const int64_t fp = padded.dim(0);
  int x = g.reshape(g.constant(padded), {fp / 2, 2 * kPoseDims});
  x = g.relu(enc1.forward(ctx, x));
  x = g.reshape(x, {fp / 4, 2 * kChunkHidden});
  x = g.relu(enc2.forward(ctx, x));
  return enc3.forward(ctx, x);
}

int PoseVqvae::decode_node(ModelContext& ctx, int z) const {
  Graph& g = ctx.g;
  const Tensor& zv = g.value(z);
  if (zv.ndim() != 2 || zv.dim(1) != cfg.d_z) {
    throw DataError("pose decoder: latents must be [T," +
                    std::to_string(cfg.d_z) + "], got " + zv.shape_str());
  }
  const int64_t t_count = zv.dim(0);
  int x = g.relu(dec1.forward(ctx, z));
  x = g.relu(dec2.forward(ctx, x));
  x = g.reshape(x, {2 * t_count, kChunkHidden});
  x = dec3.forward(ctx, x);
  return g.reshape(x, {4 * t_count, kPoseDims});
}

Tensor PoseVqvae::reconstruct(const Tensor& p_r) const {
  if (p_r.ndim() != 2 || p_r.dim(1) != kPoseDims || p_r.dim(0) < 1) {
    throw DataError("pose reconstruct: input must be [f,6], got " +
                    p_r.shape_str());
  }
  const int64_t f = p_r.dim(0);
  const Tensor padded = pad_rows_to_multiple(p_r, cfg.downsample);
  Graph g;
  ModelContext ctx(g, params, [](const std::string&) { return false; });
  const int z_hat = encode_node(ctx, padded);
  const QuantizeResult q = quantize(g.value(z_hat), params.at("vq.codebook"));
  const int dec = decode_node(ctx, g.constant(q.z_q));
  const Tensor& full = g.value(dec);
  Tensor out = Tensor::zeros({f, kPoseDims});
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t j = 0; j < kPoseDims; ++j) out.at2(t, j) = full.at2(t, j);
  }
  return out;
}

double rec_loss(const Tensor& p_r, const Tensor& p_hat, const Tensor& z_hat,
                const Tensor& z_q) {
  return mse_plain(p_r, p_hat, "rec_loss poses") +
         mse_plain(z_hat, z_q, "rec_loss latents") +
         mse_plain(z_q, z_hat, "rec_loss latents");
}

double map_loss(const Tensor& p_r, const Tensor& p_hat, const Tensor& z_hat,
                const Tensor& z_q) {
  return mse_plain(p_r, p_hat, "map_loss poses") +
         mse_plain(z_hat, z_q, "map_loss latents");
}

int rec_loss_node(Graph& g, const Tensor& p_r, int p_hat, int z_hat,
                  int z_q) {
  const int pose_term = mse_node(g, g.constant(p_r), p_hat);
  const int codebook_term = mse_node(g, g.stop_grad(z_hat), z_q);
  const int commit_term = mse_node(g, g.stop_grad(z_q), z_hat);
  return g.add(g.add(pose_term, codebook_term), commit_term);
}

int map_loss_node(Graph& g, const Tensor& p_r, int p_hat, int z_hat,
                  int z_q) {
  const int pose_term = mse_node(g, g.constant(p_r), p_hat);
  const int latent_term = mse_node(g, z_hat, g.stop_grad(z_q));
  return g.add(pose_term, latent_term);
}

namespace {

void wire_mapper(PoseMapper& m) {
  const PoseCodebookConfig& cfg = m.cfg;
  m.audio_proj = Linear{"map.audio", cfg.audio_dims, cfg.d_model};
  m.style_proj = Linear{"map.style", cfg.d_id, cfg.d_model, /*bias=*/false};
  m.p0_proj = Linear{"map.p0", kPoseDims, cfg.d_model};
  m.latent_proj = Linear{"map.latent", cfg.d_z, cfg.d_model};
  m.head = Linear{"map.head", cfg.d_model, cfg.d_z};
  m.blocks.clear();
  for (int64_t l = 0; l < cfg.mapper_layers; ++l) {
    m.blocks.emplace_back("map.block" + std::to_string(l), cfg.d_model,
                          int(cfg.heads), 2 * cfg.d_model, true);
  }
}

// Additive [tokens, audio_frames] mask restricting each latent slot to the
// audio frames its decoded poses span: slot s may read frames < 4*(s+1).
// Conditioning rows share slot 0's window.
Tensor latent_cross_mask(int64_t prefix, int64_t t_count, int64_t frames,
                         int64_t window) {
  Tensor mask = Tensor::zeros({prefix + t_count, frames});
  for (int64_t i = 0; i < prefix + t_count; ++i) {
    const int64_t slot = i < prefix ? 0 : i - prefix;
    const int64_t limit = window * (slot + 1);
    for (int64_t c = 0; c < frames; ++c) {
      if (c >= limit) mask.at2(i, c) = -1e30;
    }
  }
  return mask;
}

}  // namespace

PoseMapper PoseMapper::build(const PoseCodebookConfig& cfg) {
  check_cfg(cfg);
  PoseMapper m;
  m.cfg = cfg;
  wire_mapper(m);
  const uint64_t s = cfg.seed;
  m.audio_proj.init(m.params, s);
  m.style_proj.init(m.params, s);
  m.p0_proj.init(m.params, s);
  m.latent_proj.init(m.params, s);
  m.head.init(m.params, s);
  for (const auto& b : m.blocks) b.init(m.params, s);
  m.params.add("map.start",
               init_uniform(s, "map.start", {1, cfg.d_model}, cfg.d_model));
  return m;
}

PoseMapper PoseMapper::from_store(const PoseCodebookConfig& cfg,
                                  ParamStore store) {
  check_cfg(cfg);
  PoseMapper m;
  m.cfg = cfg;
  wire_mapper(m);
  m.params = std::move(store);
  if (!m.params.has("map.start")) {
    throw DataError("pose mapper checkpoint is missing the start token");
  }
  return m;
}

int PoseMapper::outputs_node(ModelContext& ctx, const Tensor& audio,
                             const Tensor& alpha, const Tensor& p0,
                             int planned, int64_t T) const {
  if (audio.ndim() != 2 || audio.dim(1) != cfg.audio_dims) {
    throw DataError("pose mapper: audio must be [frames," +
                    std::to_string(cfg.audio_dims) + "], got " +
                    audio.shape_str());
  }
  if (alpha.numel() != cfg.d_id) {
    throw DataError("pose mapper: alpha must have " +
                    std::to_string(cfg.d_id) + " entries");
  }
  if (p0.numel() != kPoseDims) {
    throw DataError("pose mapper: reference pose must have 6 entries");
  }
  if (T < 1) throw DataError("pose mapper: need at least one latent slot");
  Graph& g = ctx.g;
  const int64_t fa = audio.dim(0);

  int mem = g.add(audio_proj.forward(ctx, g.constant(audio)),
                  g.constant(sinusoid_positions(fa, cfg.d_model)));

  Tensor a_row = alpha;
  a_row.shape = {1, cfg.d_id};
  std::vector<int> parts{style_proj.forward(ctx, g.constant(a_row))};
  if (cfg.initial_pose) {
    Tensor p_row = p0;
    p_row.shape = {1, kPoseDims};
    parts.push_back(p0_proj.forward(ctx, g.constant(p_row)));
  }
  const int64_t prefix = int64_t(parts.size());
  parts.push_back(ctx.param("map.start"));
  if (T > 1) {
    if (planned < 0) throw DataError("pose mapper: missing planned latents");
    const Tensor& pv = g.value(planned);
    if (pv.ndim() != 2 || pv.dim(0) != T - 1 || pv.dim(1) != cfg.d_z) {
      throw DataError("pose mapper: planned latents must be [T-1,d_z]");
    }
    parts.push_back(latent_proj.forward(ctx, planned));
  }
  int tokens = g.concat(parts, 0);
  const int64_t total = prefix + T;
  tokens = g.add(tokens, g.constant(sinusoid_positions(total, cfg.d_model)));

  const int self_mask = g.constant(causal_mask(total));
  const int cross_mask =
      g.constant(latent_cross_mask(prefix, T, fa, cfg.downsample));
  int x = tokens;
  for (const auto& b : blocks) {
    x = b.forward(ctx, x, mem, self_mask, cross_mask);
  }
  x = head.forward(ctx, x);
  return g.slice(x, {prefix, 0}, {T, cfg.d_z});
}

MapForwardResult map_forward(const PoseMapper& mapper, const PoseVqvae& vq,
                             const Tensor& audio, const Tensor& alpha,
                             const Tensor& p0, int64_t frames) {
  if (!vq.frozen) {
    throw DataError(
        "map_forward: the pose decoder and codebook must be frozen before "
        "mapping (finish phase 1 and mark the stage frozen)");
  }
  if (frames < 1) throw DataError("map_forward: need at least one frame");
  if (audio.ndim() != 2 || audio.dim(0) < frames) {
    throw DataError("map_forward: audio must cover the requested frames");
  }
  const int64_t ds = vq.cfg.downsample;
  const int64_t fp = ((frames + ds - 1) / ds) * ds;
  const int64_t t_count = fp / ds;
  const Tensor& codebook = vq.params.at("vq.codebook");
  const auto frozen_filter = [](const std::string&) { return false; };

  MapForwardResult out;
  out.z_q = Tensor::zeros({t_count, mapper.cfg.d_z});
  out.indices.resize(size_t(t_count));
  for (int64_t i = 0; i < t_count; ++i) {
    Graph g;
    ModelContext ctx(g, mapper.params, frozen_filter);
    int planned = -1;
    if (i > 0) {
      Tensor prev = Tensor::zeros({i, mapper.cfg.d_z});
      for (int64_t r = 0; r < i; ++r) {
        for (int64_t j = 0; j < mapper.cfg.d_z; ++j) {
          prev.at2(r, j) = out.z_q.at2(r, j);
        }
      }
      planned = g.constant(prev);
    }
    const int pred = mapper.outputs_node(ctx, audio, alpha, p0, planned, i + 1);
    Tensor row = Tensor::zeros({1, mapper.cfg.d_z});
    for (int64_t j = 0; j < mapper.cfg.d_z; ++j) {
      row.at2(0, j) = g.value(pred).at2(i, j);
    }
    const QuantizeResult q = quantize(row, codebook);
    out.indices[size_t(i)] = q.indices[0];
    for (int64_t j = 0; j < mapper.cfg.d_z; ++j) {
      out.z_q.at2(i, j) = q.z_q.at2(0, j);
    }
  }

  {
    Graph g;
    ModelContext ctx(g, mapper.params, frozen_filter);
    int planned = -1;
    if (t_count > 1) {
      Tensor prev = Tensor::zeros({t_count - 1, mapper.cfg.d_z});
      for (int64_t r = 0; r + 1 < t_count; ++r) {
        for (int64_t j = 0; j < mapper.cfg.d_z; ++j) {
          prev.at2(r, j) = out.z_q.at2(r, j);
        }
      }
      planned = g.constant(prev);
    }
    const int pred =
        mapper.outputs_node(ctx, audio, alpha, p0, planned, t_count);
    out.z_tokens = g.value(pred);
  }

  {
    Graph g;
    ModelContext ctx(g, vq.params, frozen_filter);
    const int dec = vq.decode_node(ctx, g.constant(out.z_q));
    const Tensor& full = g.value(dec);
    out.p_rel = Tensor::zeros({frames, kPoseDims});
    for (int64_t t = 0; t < frames; ++t) {
      for (int64_t j = 0; j < kPoseDims; ++j) {
        out.p_rel.at2(t, j) = full.at2(t, j);
      }
    }
  }
  return out;
}

Tensor clip_pose_targets(const DatasetClip& clip,
                         const PoseCodebookConfig& cfg) {
  if (cfg.absolute_pose) {
    const int64_t f = clip.pose.dim(0) - 1;
    Tensor out = Tensor::zeros({f, kPoseDims});
    for (int64_t t = 0; t < f; ++t) {
      for (int64_t j = 0; j < kPoseDims; ++j) {
        out.at2(t, j) = clip.pose.at2(t + 1, j);
      }
    }
    return out;
  }
  return to_relative(clip.pose);
}

namespace {

struct PoseClipData {
  Tensor audio, alpha, p0, target, padded;
};

std::vector<PoseClipData> collect_clips(const Dataset& ds,
                                        const PoseCodebookConfig& cfg) {
  if (ds.train.empty()) throw DataError("pose training: empty train split");
  std::vector<PoseClipData> data;
  for (int64_t idx : ds.train) {
    const DatasetClip& clip = ds.clips[size_t(idx)];
    PoseClipData cd;
    cd.audio = clip.audio;
    cd.alpha = clip.alpha;
    cd.p0 = Tensor::zeros({kPoseDims});
    for (int64_t j = 0; j < kPoseDims; ++j) cd.p0[j] = clip.pose.at2(0, j);
    cd.target = clip_pose_targets(clip, cfg);
    cd.padded = pad_rows_to_multiple(cd.target, cfg.downsample);
    data.push_back(std::move(cd));
  }
  return data;
}

// Data-dependent codebook seeding: encoder outputs on the training clips,
// cycled until K rows are filled, plus a small jitter so entries start
// distinct. Runs before the first step and counts as initialization.
void seed_codebook(PoseVqvae& vq, const std::vector<PoseClipData>& data) {
  const int64_t k_count = vq.cfg.K;
  const int64_t d = vq.cfg.d_z;
  std::vector<Tensor> rows;
  for (const PoseClipData& cd : data) {
    if (int64_t(rows.size()) >= k_count) break;
    Graph g;
    ModelContext ctx(g, vq.params, [](const std::string&) { return false; });
    const Tensor& z = g.value(vq.encode_node(ctx, cd.padded));
    for (int64_t t = 0; t < z.dim(0) && int64_t(rows.size()) < k_count; ++t) {
      Tensor row = Tensor::zeros({d});
      for (int64_t j = 0; j < d; ++j) row[j] = z.at2(t, j);
      rows.push_back(std::move(row));
    }
  }
  if (rows.empty()) throw DataError("pose training: no latent tokens to seed");
  // Jitter scaled to the spread of the collected tokens keeps duplicated
  // seeds distinct without drowning the data geometry.
  double spread = 0.0;
  Tensor mean = Tensor::zeros({d});
  for (const Tensor& row : rows) {
    for (int64_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (int64_t j = 0; j < d; ++j) mean[j] /= double(rows.size());
  for (const Tensor& row : rows) {
    for (int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean[j];
      spread += c * c;
    }
  }
  spread = std::sqrt(spread / double(rows.size() * size_t(d))) + 1e-6;
  Rng jitter(vq.cfg.seed, "vq.codebook.seed");
  Tensor& cb = vq.params.at("vq.codebook");
  for (int64_t k = 0; k < k_count; ++k) {
    const Tensor& row = rows[size_t(k) % rows.size()];
    for (int64_t j = 0; j < d; ++j) {
      cb.at2(k, j) = row[j] + 0.1 * spread * jitter.next_gaussian();
    }
  }
}

double codebook_usage_fraction(const PoseVqvae& vq,
                               const std::vector<PoseClipData>& data) {
  std::set<int64_t> used;
  for (const PoseClipData& cd : data) {
    Graph g;
    ModelContext ctx(g, vq.params, [](const std::string&) { return false; });
    const Tensor z = g.value(vq.encode_node(ctx, cd.padded));
    const QuantizeResult q = quantize(z, vq.params.at("vq.codebook"));
    used.insert(q.indices.begin(), q.indices.end());
  }
  return double(used.size()) / double(vq.cfg.K);
}

}  // namespace

PosePhase1Result train_pose_phase1(const Dataset& ds,
                                   const PoseCodebookConfig& cfg,
                                   const std::string& checkpoint_dir) {
  check_cfg(cfg);
  const std::vector<PoseClipData> data = collect_clips(ds, cfg);
  PosePhase1Result result{PoseVqvae::build(cfg), {}, 0.0};
  PoseVqvae& vq = result.vqvae;
  seed_codebook(vq, data);

  AdamState opt;
  opt.lr = cfg.lr;
  Rng batch_rng(cfg.seed, "vq.batch");
  for (int64_t step = 0; step < cfg.phase1_steps; ++step) {
    Graph g;
    ModelContext ctx(g, vq.params, nullptr);
    int total = -1;
    for (int64_t b = 0; b < kBatch; ++b) {
      const PoseClipData& cd =
          data[size_t(batch_rng.next_below(uint64_t(data.size())))];
      const int64_t f = cd.target.dim(0);
      const int z_hat = vq.encode_node(ctx, cd.padded);
      const QuantizeResult q =
          quantize(g.value(z_hat), vq.params.at("vq.codebook"));
      const int z_q = g.embed(ctx.param("vq.codebook"), q.indices);
      const int dec_in = g.add(z_hat, g.stop_grad(g.sub(z_q, z_hat)));
      const int dec = vq.decode_node(ctx, dec_in);
      const int p_hat = g.slice(dec, {0, 0}, {f, kPoseDims});
      const int loss = rec_loss_node(g, cd.target, p_hat, z_hat, z_q);
      total = total < 0 ? loss : g.add(total, loss);
    }
    total = g.scale(total, 1.0 / double(kBatch));
    result.history.push_back(g.value(total)[0]);
    adam_step(vq.params, g.param_grads(total), opt);
  }
  result.codebook_usage = codebook_usage_fraction(vq, data);

  if (!checkpoint_dir.empty()) {
    nlohmann::json meta;
    meta["stage"] = "a2m-pose-codebook";
    meta["config"] = config_json(cfg);
    meta["codebook_usage"] = result.codebook_usage;
    if (!result.history.empty()) {
      meta["initial_loss"] = result.history.front();
      meta["final_loss"] = result.history.back();
    }
    save_checkpoint(checkpoint_dir, vq.params, &opt, meta);
  }
  return result;
}

PosePhase2Result train_pose_phase2(const Dataset& ds,
                                   const PoseCodebookConfig& cfg,
                                   const PoseVqvae& vq,
                                   const std::string& checkpoint_dir) {
  check_cfg(cfg);
  if (!vq.frozen) {
    throw DataError(
        "train_pose_phase2: the codebook stage must be frozen first");
  }
  const std::vector<PoseClipData> data = collect_clips(ds, cfg);
  std::map<std::string, Tensor> before = vq.params.tensors;

  PosePhase2Result result{PoseMapper::build(cfg), {}};
  PoseMapper& mapper = result.mapper;
  const auto frozen_filter = [](const std::string&) { return false; };

  AdamState opt;
  opt.lr = cfg.lr;
  Rng batch_rng(cfg.seed, "map.batch");
  for (int64_t step = 0; step < cfg.phase2_steps; ++step) {
    Graph g;
    ModelContext ctx_map(g, mapper.params, nullptr);
    ModelContext ctx_vq(g, vq.params, frozen_filter);
    int total = -1;
    for (int64_t b = 0; b < kBatch; ++b) {
      const PoseClipData& cd =
          data[size_t(batch_rng.next_below(uint64_t(data.size())))];
      const int64_t f = cd.target.dim(0);
      // Plan the autoregressive feedback without gradients, then replay the
      // same forward teacher-forced on the planned quantized latents so one
      // graph carries the whole step.
      const MapForwardResult plan =
          map_forward(mapper, vq, cd.audio, cd.alpha, cd.p0, f);
      const int64_t t_count = plan.z_q.dim(0);
      int planned = -1;
      if (t_count > 1) {
        Tensor prev = Tensor::zeros({t_count - 1, cfg.d_z});
        for (int64_t r = 0; r + 1 < t_count; ++r) {
          for (int64_t j = 0; j < cfg.d_z; ++j) {
            prev.at2(r, j) = plan.z_q.at2(r, j);
          }
        }
        planned = g.constant(prev);
      }
      const int z_hat =
          mapper.outputs_node(ctx_map, cd.audio, cd.alpha, cd.p0, planned,
                              t_count);
      const int z_q = g.embed(ctx_vq.param("vq.codebook"), plan.indices);
      const int dec_in = g.add(z_hat, g.stop_grad(g.sub(z_q, z_hat)));
      const int dec = vq.decode_node(ctx_vq, dec_in);
      const int p_hat = g.slice(dec, {0, 0}, {f, kPoseDims});
      const int loss = map_loss_node(g, cd.target, p_hat, z_hat, z_q);
      total = total < 0 ? loss : g.add(total, loss);
    }
    total = g.scale(total, 1.0 / double(kBatch));
    result.history.push_back(g.value(total)[0]);
    adam_step(mapper.params, g.param_grads(total), opt);
  }

  for (const auto& [name, tensor] : vq.params.tensors) {
    const Tensor& snap = before.at(name);
    bool same = snap.shape == tensor.shape;
    for (int64_t i = 0; same && i < tensor.numel(); ++i) {
      same = snap[i] == tensor[i] &&
             std::signbit(snap[i]) == std::signbit(tensor[i]);
    }
    if (!same) {
      throw DataError("train_pose_phase2: frozen parameter '" + name +
                      "' changed during phase 2");
    }
  }

  if (!checkpoint_dir.empty()) {
    nlohmann::json meta;
    meta["stage"] = "a2m-pose-mapper";
    meta["config"] = config_json(cfg);
    if (!result.history.empty()) {
      meta["initial_loss"] = result.history.front();
      meta["final_loss"] = result.history.back();
    }
    save_checkpoint(checkpoint_dir, mapper.params, &opt, meta);
  }
  return result;
}

PoseTrainResult train_two_phase(const Dataset& ds,
                                const PoseCodebookConfig& cfg,
                                const std::string& vq_checkpoint_dir,
                                const std::string& mapper_checkpoint_dir) {
  PosePhase1Result p1 = train_pose_phase1(ds, cfg, vq_checkpoint_dir);
  p1.vqvae.frozen = true;
  PosePhase2Result p2 =
      train_pose_phase2(ds, cfg, p1.vqvae, mapper_checkpoint_dir);
  PoseTrainResult out;
  out.vqvae = std::move(p1.vqvae);
  out.mapper = std::move(p2.mapper);
  out.phase1_history = std::move(p1.history);
  out.phase2_history = std::move(p2.history);
  out.codebook_usage = p1.codebook_usage;
  return out;
}

}  // namespace vividforge
