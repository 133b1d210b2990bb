#include "vividforge/a2m_expression.hpp"

#include <cmath>

#include "json.hpp"
#include "vividforge/error.hpp"

namespace vividforge {

namespace {

constexpr int64_t kBetaDims = 12;
constexpr int64_t kLipBeta = 4;

void check_cfg(const BsvoConfig& cfg) {
  if (cfg.d_model < 2 || cfg.heads < 1 || cfg.d_model % cfg.heads != 0) {
    throw DataError("bsvo: d_model must be a positive multiple of heads");
  }
  if (cfg.layers < 1) throw DataError("bsvo: layers must be >= 1");
  if (cfg.blendshape_only && cfg.vertex_only) {
    throw DataError("bsvo: blendshape-only and vertex-only are exclusive");
  }
}

std::vector<TransformerBlock> make_trunk(const std::string& prefix,
                                         const BsvoConfig& cfg) {
  std::vector<TransformerBlock> blocks;
  for (int64_t l = 0; l < cfg.layers; ++l) {
    blocks.emplace_back(prefix + std::to_string(l), cfg.d_model,
                        int(cfg.heads), 2 * cfg.d_model, true);
  }
  return blocks;
}

void wire_layers(BsvoModel& m) {
  const BsvoConfig& cfg = m.cfg;
  m.audio_proj = Linear{"bsvo.audio", cfg.audio_dims, cfg.d_model};
  m.style_proj = Linear{"bsvo.style", cfg.d_id, cfg.d_model, /*bias=*/false};
  m.motion_proj = Linear{"bsvo.motion", cfg.coeff_dims(), cfg.d_model};
  m.head_lip = Linear{"bsvo.lip.head", cfg.d_model, kLipBeta};
  m.head_other = Linear{"bsvo.other.head", cfg.d_model, kBetaDims - kLipBeta};
  m.head_vo = Linear{"bsvo.vo.head", cfg.d_model, 3 * cfg.lip_count};
  if (cfg.shared_trunk) {
    m.trunk = make_trunk("bsvo.trunk", cfg);
  } else {
    for (const char* b : {"bsvo.lip.trunk", "bsvo.other.trunk",
                          "bsvo.vo.trunk"}) {
      m.trunks.push_back(make_trunk(b, cfg));
    }
  }
  m.branch = {
      TransformerBlock("bsvo.lip.block", cfg.d_model, int(cfg.heads),
                       2 * cfg.d_model, true),
      TransformerBlock("bsvo.other.block", cfg.d_model, int(cfg.heads),
                       2 * cfg.d_model, true),
      TransformerBlock("bsvo.vo.block", cfg.d_model, int(cfg.heads),
                       2 * cfg.d_model, true),
  };
}

}  // namespace

BsvoModel BsvoModel::build(const BsvoConfig& cfg) {
  check_cfg(cfg);
  BsvoModel m;
  m.cfg = cfg;
  wire_layers(m);
  const uint64_t s = cfg.seed;
  m.audio_proj.init(m.params, s);
  m.style_proj.init(m.params, s);
  m.motion_proj.init(m.params, s);
  m.head_lip.init(m.params, s);
  m.head_other.init(m.params, s);
  m.head_vo.init(m.params, s);
  for (const auto& b : m.trunk) b.init(m.params, s);
  for (const auto& t : m.trunks) {
    for (const auto& b : t) b.init(m.params, s);
  }
  for (const auto& b : m.branch) b.init(m.params, s);
  m.params.add("bsvo.start",
               init_uniform(s, "bsvo.start", {1, cfg.d_model}, cfg.d_model));
  return m;
}

BsvoModel BsvoModel::from_store(const BsvoConfig& cfg, ParamStore store) {
  check_cfg(cfg);
  BsvoModel m;
  m.cfg = cfg;
  wire_layers(m);
  m.params = std::move(store);
  if (!m.params.has("bsvo.start")) {
    throw DataError("bsvo checkpoint is missing the start token");
  }
  return m;
}

int BsvoModel::build_outputs(ModelContext& ctx, const Tensor& audio,
                             int style_row, int motion_prefix,
                             int64_t f) const {
  if (audio.ndim() != 2 || audio.dim(1) != cfg.audio_dims) {
    throw DataError("bsvo: audio must be [frames," +
                    std::to_string(cfg.audio_dims) + "], got " +
                    audio.shape_str());
  }
  if (f < 1 || f > audio.dim(0)) {
    throw DataError("bsvo: frame count out of range");
  }
  Graph& g = ctx.g;

  int audio_node = g.constant(audio);
  int mem = g.add(audio_proj.forward(ctx, audio_node),
                  g.constant(sinusoid_positions(audio.dim(0), cfg.d_model)));

  int tokens;
  int start = ctx.param("bsvo.start");
  if (f > 1) {
    if (motion_prefix < 0) throw DataError("bsvo: missing motion prefix");
    tokens = g.concat({start, motion_proj.forward(ctx, motion_prefix)}, 0);
  } else {
    tokens = start;
  }
  tokens = g.add_row(tokens, style_row);
  tokens = g.add(tokens, g.constant(sinusoid_positions(f, cfg.d_model)));

  int mask = g.constant(causal_mask(f));
  int shared = tokens;
  if (cfg.shared_trunk) {
    for (const auto& b : trunk) {
      shared = b.forward(ctx, shared, mem, mask, -1);
    }
  }

  int outs[3];
  for (int bi = 0; bi < 3; ++bi) {
    int x = shared;
    if (!cfg.shared_trunk) {
      x = tokens;
      for (const auto& b : trunks[size_t(bi)]) {
        x = b.forward(ctx, x, mem, mask, -1);
      }
    }
    x = branch[size_t(bi)].forward(ctx, x, mem, mask, -1);
    outs[bi] = bi == 0   ? head_lip.forward(ctx, x)
               : bi == 1 ? head_other.forward(ctx, x)
                         : head_vo.forward(ctx, x);
  }
  if (cfg.vertex_only) {
    outs[0] = g.scale(outs[0], 0.0);
    outs[1] = g.scale(outs[1], 0.0);
  }
  if (cfg.blendshape_only) outs[2] = g.scale(outs[2], 0.0);
  return g.concat({outs[0], outs[1], outs[2]}, 1);
}

int BsvoModel::forward_node(ModelContext& ctx, const Tensor& audio,
                            const Tensor& alpha, int motion_prefix) const {
  if (alpha.numel() != cfg.d_id) {
    throw DataError("bsvo: alpha must have " + std::to_string(cfg.d_id) +
                    " entries");
  }
  Tensor a_row = alpha;
  a_row.shape = {1, cfg.d_id};
  int style = style_proj.forward(ctx, ctx.g.constant(a_row));
  style = ctx.g.reshape(style, {cfg.d_model});
  return build_outputs(ctx, audio, style, motion_prefix, audio.dim(0));
}

Tensor encode_style(const BsvoModel& model, const Tensor& alpha) {
  if (alpha.numel() != model.cfg.d_id) {
    throw DataError("encode_style: alpha must have " +
                    std::to_string(model.cfg.d_id) + " entries");
  }
  const Tensor& w = model.params.at("bsvo.style.w");  // [d_id, d_model]
  Tensor z = Tensor::zeros({model.cfg.d_model});
  for (int64_t j = 0; j < model.cfg.d_model; ++j) {
    double acc = 0.0;
    for (int64_t i = 0; i < model.cfg.d_id; ++i) {
      acc += alpha[i] * w.at2(i, j);
    }
    z[j] = acc;
  }
  return z;
}

Tensor predict_expression(const BsvoModel& model, const Tensor& audio,
                          const Tensor& z_style, const Tensor& history) {
  const int64_t f = audio.ndim() == 2 ? audio.dim(0) : 0;
  const int64_t coeff = model.cfg.coeff_dims();
  if (f < 1) throw DataError("predict_expression: audio must be [f,D]");
  if (z_style.numel() != model.cfg.d_model) {
    throw DataError("predict_expression: style embedding must have d_model entries");
  }
  int64_t h = 0;
  if (!history.data.empty()) {
    if (history.ndim() != 2 || history.dim(1) != coeff) {
      throw DataError("predict_expression: history must be [h," +
                      std::to_string(coeff) + "]");
    }
    h = history.dim(0);
    if (h >= f) {
      throw DataError("predict_expression: history length " +
                      std::to_string(h) + " must be < frames " +
                      std::to_string(f));
    }
  }
  Tensor style = z_style;
  style.shape = {model.cfg.d_model};

  Tensor out = Tensor::zeros({f, coeff});
  for (int64_t t = 0; t < f; ++t) {
    Graph g;
    ModelContext ctx(g, model.params,
                     [](const std::string&) { return false; });
    int prefix = -1;
    if (t > 0) {
      Tensor p = Tensor::zeros({t, coeff});
      for (int64_t i = 0; i < t; ++i) {
        const Tensor& src = i < h ? history : out;
        for (int64_t j = 0; j < coeff; ++j) p.at2(i, j) = src.at2(i, j);
      }
      prefix = g.constant(p);
    }
    int pred = model.build_outputs(ctx, audio, g.constant(style), prefix,
                                   t + 1);
    const Tensor& v = g.value(pred);
    for (int64_t j = 0; j < coeff; ++j) out.at2(t, j) = v.at2(t, j);
  }
  return out;
}

namespace {

// c + t - R*c: the row added after rotating row vectors by R^T.
Tensor pose_translation_row(const FaceModel& fm, const Tensor& p_ref,
                            const Tensor& rot) {
  Tensor c = fm.pivot();
  Tensor row = Tensor::zeros({3});
  for (int64_t i = 0; i < 3; ++i) {
    double rc = 0.0;
    for (int64_t j = 0; j < 3; ++j) rc += rot.at2(i, j) * c[j];
    row[i] = c[i] + p_ref[3 + i] - rc;
  }
  return row;
}

Tensor rot_part(const Tensor& p_ref) {
  Tensor r = Tensor::zeros({3});
  for (int64_t i = 0; i < 3; ++i) r[i] = p_ref[i];
  return rot_from_axis_angle(r);
}

}  // namespace

double bsvo_loss(const Tensor& pred, const Tensor& gt_beta,
                 const std::vector<Tensor>& gt_mesh, const FaceModel& fm,
                 const Tensor& alpha, const Tensor& p_ref) {
  const int64_t coeff = kBetaDims + 3 * fm.lip_count();
  if (pred.ndim() != 2 || pred.dim(1) != coeff) {
    throw DataError("bsvo_loss: predictions must be [f," +
                    std::to_string(coeff) + "]");
  }
  const int64_t f = pred.dim(0);
  if (gt_beta.ndim() != 2 || gt_beta.dim(0) != f ||
      gt_beta.dim(1) != kBetaDims || int64_t(gt_mesh.size()) != f) {
    throw DataError("bsvo_loss: sequence lengths disagree");
  }
  double beta_term = 0.0, mesh_term = 0.0;
  for (int64_t t = 0; t < f; ++t) {
    double sq = 0.0;
    for (int64_t j = 0; j < kBetaDims; ++j) {
      const double d = gt_beta.at2(t, j) - pred.at2(t, j);
      sq += d * d;
    }
    beta_term += std::sqrt(sq);

    Tensor beta = Tensor::zeros({kBetaDims});
    for (int64_t j = 0; j < kBetaDims; ++j) beta[j] = pred.at2(t, j);
    Tensor olip = Tensor::zeros({3 * fm.lip_count()});
    for (int64_t j = 0; j < 3 * fm.lip_count(); ++j) {
      olip[j] = pred.at2(t, kBetaDims + j);
    }
    const Tensor mesh = fm.apply_pose(fm.assemble(alpha, beta, olip), p_ref);
    if (!mesh.same_shape(gt_mesh[size_t(t)])) {
      throw DataError("bsvo_loss: mesh shape mismatch at frame " +
                      std::to_string(t));
    }
    double msq = 0.0;
    for (int64_t i = 0; i < mesh.numel(); ++i) {
      const double d = gt_mesh[size_t(t)][i] - mesh[i];
      msq += d * d;
    }
    mesh_term += std::sqrt(msq);
  }
  return beta_term / double(f) + mesh_term / double(f);
}

int bsvo_loss_node(ModelContext& ctx, int pred, const Tensor& gt_beta,
                   const Tensor& gt_mesh_flat, const FaceModel& fm,
                   const Tensor& alpha, const Tensor& p_ref) {
  Graph& g = ctx.g;
  const int64_t f = gt_beta.dim(0);
  const int64_t n3 = 3 * fm.n;
  const int64_t lip3 = 3 * fm.lip_count();
  if (g.value(pred).dim(0) != f || gt_mesh_flat.dim(0) != f ||
      gt_mesh_flat.dim(1) != n3) {
    throw DataError("bsvo_loss_node: sequence lengths disagree");
  }

  int beta_hat = g.slice(pred, {0, 0}, {f, kBetaDims});
  int olip_hat = g.slice(pred, {0, kBetaDims}, {f, lip3});

  int beta_diff = g.sub(g.constant(gt_beta), beta_hat);
  int beta_sq = g.mul(beta_diff, beta_diff);
  int beta_rows = g.matmul(beta_sq, g.constant(Tensor::full({kBetaDims, 1}, 1.0)));
  int beta_term = g.scale(g.sum(g.sqrt(beta_rows, 1e-12)), 1.0 / double(f));

  // Expression basis and lip scatter as [dim, 3n] constants so predictions
  // right-multiply into flattened mesh rows.
  Tensor u_exp_t = Tensor::zeros({kBetaDims, n3});
  for (int64_t r = 0; r < n3; ++r) {
    for (int64_t c = 0; c < kBetaDims; ++c) {
      u_exp_t.at2(c, r) = fm.u_exp.at2(r, c);
    }
  }
  Tensor scatter_t = Tensor::zeros({lip3, n3});
  for (int64_t k = 0; k < fm.lip_count(); ++k) {
    for (int64_t ax = 0; ax < 3; ++ax) {
      scatter_t.at2(3 * k + ax, 3 * fm.lip_verts[size_t(k)] + ax) = 1.0;
    }
  }
  Tensor base_row = Tensor::zeros({n3});
  for (int64_t r = 0; r < n3; ++r) {
    double v = fm.base[r];
    for (int64_t c = 0; c < fm.d_id; ++c) v += fm.u_id.at2(r, c) * alpha[c];
    base_row[r] = v;
  }

  int mesh = g.add(g.matmul(beta_hat, g.constant(u_exp_t)),
                   g.matmul(olip_hat, g.constant(scatter_t)));
  mesh = g.add_row(mesh, g.constant(base_row));

  const Tensor rot = rot_part(p_ref);
  Tensor rot_t = Tensor::zeros({3, 3});
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) rot_t.at2(j, i) = rot.at2(i, j);
  }
  int posed = g.matmul(g.reshape(mesh, {f * fm.n, 3}), g.constant(rot_t));
  posed = g.add_row(posed, g.constant(pose_translation_row(fm, p_ref, rot)));
  posed = g.reshape(posed, {f, n3});

  int mesh_diff = g.sub(g.constant(gt_mesh_flat), posed);
  int mesh_sq = g.mul(mesh_diff, mesh_diff);
  int mesh_rows = g.matmul(mesh_sq, g.constant(Tensor::full({n3, 1}, 1.0)));
  int mesh_term = g.scale(g.sum(g.sqrt(mesh_rows, 1e-12)), 1.0 / double(f));

  return g.add(beta_term, mesh_term);
}

void split_coeffs(const Tensor& pred, int64_t lip_count, Tensor* beta,
                  Tensor* olip) {
  const int64_t coeff = kBetaDims + 3 * lip_count;
  if (pred.ndim() != 2 || pred.dim(1) != coeff) {
    throw DataError("split_coeffs: motion vectors must be [f," +
                    std::to_string(coeff) + "]");
  }
  const int64_t f = pred.dim(0);
  *beta = Tensor::zeros({f, kBetaDims});
  *olip = Tensor::zeros({f, 3 * lip_count});
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t j = 0; j < kBetaDims; ++j) beta->at2(t, j) = pred.at2(t, j);
    for (int64_t j = 0; j < 3 * lip_count; ++j) {
      olip->at2(t, j) = pred.at2(t, kBetaDims + j);
    }
  }
}

std::vector<Tensor> predicted_meshes(const FaceModel& fm, const Tensor& alpha,
                                     const Tensor& pred, const Tensor& p_ref,
                                     const Tensor& p_rel_seq) {
  Tensor beta, olip;
  split_coeffs(pred, fm.lip_count(), &beta, &olip);
  return fm.driven_mesh_sequence(alpha, beta, olip, p_ref, p_rel_seq);
}

Tensor clip_mesh_targets(const FaceModel& fm, const DatasetClip& clip) {
  const int64_t f = clip.beta.dim(0);
  const int64_t n3 = 3 * fm.n;
  Tensor p_ref = Tensor::zeros({6});
  for (int64_t i = 0; i < 6; ++i) p_ref[i] = clip.pose.at2(0, i);
  Tensor out = Tensor::zeros({f, n3});
  for (int64_t t = 0; t < f; ++t) {
    Tensor beta = Tensor::zeros({clip.beta.dim(1)});
    for (int64_t j = 0; j < beta.numel(); ++j) beta[j] = clip.beta.at2(t, j);
    Tensor olip = Tensor::zeros({clip.olip.dim(1)});
    for (int64_t j = 0; j < olip.numel(); ++j) olip[j] = clip.olip.at2(t, j);
    const Tensor mesh = fm.apply_pose(fm.assemble(clip.alpha, beta, olip),
                                      p_ref);
    for (int64_t i = 0; i < n3; ++i) out.at2(t, i) = mesh[i];
  }
  return out;
}

Tensor clip_coeffs(const DatasetClip& clip) {
  const int64_t f = clip.beta.dim(0);
  const int64_t coeff = clip.beta.dim(1) + clip.olip.dim(1);
  Tensor out = Tensor::zeros({f, coeff});
  for (int64_t t = 0; t < f; ++t) {
    for (int64_t j = 0; j < clip.beta.dim(1); ++j) {
      out.at2(t, j) = clip.beta.at2(t, j);
    }
    for (int64_t j = 0; j < clip.olip.dim(1); ++j) {
      out.at2(t, clip.beta.dim(1) + j) = clip.olip.at2(t, j);
    }
  }
  return out;
}

BsvoTrainResult train_bsvo(const Dataset& ds, const BsvoConfig& cfg,
                           const std::string& checkpoint_dir) {
  if (ds.train.empty()) throw DataError("train_bsvo: empty train split");
  BsvoTrainResult result{BsvoModel::build(cfg), {}};
  BsvoModel& model = result.model;

  struct ClipData {
    Tensor audio, alpha, gt_beta, coeffs, mesh_flat, p_ref;
  };
  std::vector<ClipData> data;
  for (int64_t idx : ds.train) {
    const DatasetClip& clip = ds.clips[size_t(idx)];
    ClipData cd;
    cd.audio = clip.audio;
    cd.alpha = clip.alpha;
    cd.gt_beta = clip.beta;
    cd.coeffs = clip_coeffs(clip);
    cd.mesh_flat = clip_mesh_targets(ds.model, clip);
    cd.p_ref = Tensor::zeros({6});
    for (int64_t i = 0; i < 6; ++i) cd.p_ref[i] = clip.pose.at2(0, i);
    data.push_back(std::move(cd));
  }

  AdamState opt;
  opt.lr = cfg.lr;
  Rng batch_rng(cfg.seed, "bsvo.batch");
  const int64_t batch = std::max<int64_t>(1, cfg.batch);

  for (int64_t step = 0; step < cfg.steps; ++step) {
    Graph g;
    ModelContext ctx(g, model.params, nullptr);
    int total = -1;
    for (int64_t b = 0; b < batch; ++b) {
      const ClipData& cd =
          data[size_t(batch_rng.next_below(uint64_t(data.size())))];
      const int64_t f = cd.gt_beta.dim(0);
      int prefix = -1;
      if (f > 1) {
        Tensor p;
        if (cfg.teacher_forcing) {
          p = Tensor::zeros({f - 1, cd.coeffs.dim(1)});
          for (int64_t t = 0; t + 1 < f; ++t) {
            for (int64_t j = 0; j < cd.coeffs.dim(1); ++j) {
              p.at2(t, j) = cd.coeffs.at2(t, j);
            }
          }
        } else {
          const Tensor free_run = predict_expression(
              model, cd.audio, encode_style(model, cd.alpha), Tensor{});
          p = Tensor::zeros({f - 1, free_run.dim(1)});
          for (int64_t t = 0; t + 1 < f; ++t) {
            for (int64_t j = 0; j < free_run.dim(1); ++j) {
              p.at2(t, j) = free_run.at2(t, j);
            }
          }
        }
        prefix = g.constant(p);
      }
      int pred = model.forward_node(ctx, cd.audio, cd.alpha, prefix);
      int loss = bsvo_loss_node(ctx, pred, cd.gt_beta, cd.mesh_flat,
                                ds.model, cd.alpha, cd.p_ref);
      total = total < 0 ? loss : g.add(total, loss);
    }
    total = g.scale(total, 1.0 / double(batch));
    result.loss_history.push_back(g.value(total)[0]);
    adam_step(model.params, g.param_grads(total), opt);
  }

  if (!checkpoint_dir.empty()) {
    nlohmann::json meta;
    meta["stage"] = "a2m-expr";
    meta["config"] = {{"d_model", cfg.d_model},
                      {"heads", cfg.heads},
                      {"layers", cfg.layers},
                      {"lr", cfg.lr},
                      {"steps", cfg.steps},
                      {"batch", cfg.batch},
                      {"seed", cfg.seed},
                      {"teacher_forcing", cfg.teacher_forcing},
                      {"shared_trunk", cfg.shared_trunk},
                      {"blendshape_only", cfg.blendshape_only},
                      {"vertex_only", cfg.vertex_only},
                      {"audio_dims", cfg.audio_dims},
                      {"d_id", cfg.d_id},
                      {"lip_count", cfg.lip_count}};
    if (!result.loss_history.empty()) {
      meta["initial_loss"] = result.loss_history.front();
      meta["final_loss"] = result.loss_history.back();
    }
    save_checkpoint(checkpoint_dir, model.params, &opt, meta);
  }
  return result;
}

}  // namespace vividforge
