#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "gradcheck_cases.hpp"
#include "test_util.hpp"
#include "vividforge/a2m_pose.hpp"
#include "vividforge/error.hpp"
#include "vividforge/params.hpp"
#include "vividforge/synthdata.hpp"

using namespace vividforge;
using vividforge::testutil::bits_equal;
using vividforge::testutil::randn;
using vividforge::testutil::scratch_dir;

namespace {

PoseCodebookConfig small_pose_cfg() {
  PoseCodebookConfig cfg;
  cfg.K = 12;
  cfg.d_z = 8;
  cfg.d_model = 32;
  cfg.heads = 4;
  cfg.mapper_layers = 2;
  cfg.seed = 77;
  return cfg;
}

Tensor grid_values(Rng& rng, std::vector<int64_t> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) {
    v = double(int64_t(rng.next_below(1025)) - 512) / 1024.0;
  }
  return t;
}

std::vector<std::pair<std::string, std::vector<char>>> tensor_files(
    const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::pair<std::string, std::vector<char>>> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() != ".tnsr") continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    out.emplace_back(e.path().filename().string(), std::move(bytes));
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  return out;
}

}  // namespace

TEST_CASE("pose parameterization subtracts and restores the reference") {
  Tensor seq = Tensor::zeros({4, 6});
  for (int64_t t = 0; t < 4; ++t) {
    for (int64_t j = 0; j < 6; ++j) seq.at2(t, j) = 0.25 * double(j) - 0.5;
  }
  const Tensor rel_const = to_relative(seq);
  CHECK(rel_const.dim(0) == 3);
  for (int64_t i = 0; i < rel_const.numel(); ++i) {
    CHECK(rel_const[i] == 0.0);
  }

  Rng rng(91, "pose.roundtrip");
  Tensor zero_ref = grid_values(rng, {5, 6});
  for (int64_t j = 0; j < 6; ++j) zero_ref.at2(0, j) = 0.0;
  const Tensor rel_zero = to_relative(zero_ref);
  for (int64_t t = 0; t < 4; ++t) {
    for (int64_t j = 0; j < 6; ++j) {
      CHECK(rel_zero.at2(t, j) == zero_ref.at2(t + 1, j));
    }
  }

  // Values on a 1/1024 grid keep every subtraction and addition exact, so the
  // inverse recovers the input bitwise.
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor abs_seq = grid_values(rng, {7, 6});
    Tensor p0 = Tensor::zeros({6});
    for (int64_t j = 0; j < 6; ++j) p0[j] = abs_seq.at2(0, j);
    const Tensor back = to_absolute(p0, to_relative(abs_seq));
    for (int64_t t = 0; t < 6; ++t) {
      for (int64_t j = 0; j < 6; ++j) {
        CHECK(back.at2(t, j) == abs_seq.at2(t + 1, j));
      }
    }
  }
  // Arbitrary doubles still round-trip to within one rounding step.
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor abs_seq = randn(rng, {6, 6}, 0.3);
    Tensor p0 = Tensor::zeros({6});
    for (int64_t j = 0; j < 6; ++j) p0[j] = abs_seq.at2(0, j);
    const Tensor back = to_absolute(p0, to_relative(abs_seq));
    for (int64_t t = 0; t < 5; ++t) {
      for (int64_t j = 0; j < 6; ++j) {
        CHECK(back.at2(t, j) == doctest::Approx(abs_seq.at2(t + 1, j))
                                    .epsilon(1e-15));
      }
    }
  }

  CHECK_THROWS_AS(to_relative(Tensor::zeros({1, 6})), DataError);
  CHECK_THROWS_AS(to_relative(Tensor::zeros({4, 5})), DataError);
  CHECK_THROWS_AS(to_absolute(Tensor::zeros({5}), Tensor::zeros({3, 6})),
                  DataError);

  const Tensor same = pad_rows_to_multiple(rel_const, 3);
  CHECK(bits_equal(same, rel_const));
  Tensor odd = grid_values(rng, {10, 6});
  const Tensor padded = pad_rows_to_multiple(odd, 4);
  CHECK(padded.dim(0) == 12);
  for (int64_t t = 10; t < 12; ++t) {
    for (int64_t j = 0; j < 6; ++j) CHECK(padded.at2(t, j) == odd.at2(9, j));
  }
  const Tensor single = pad_rows_to_multiple(grid_values(rng, {1, 6}), 4);
  CHECK(single.dim(0) == 4);
  for (int64_t t = 1; t < 4; ++t) {
    for (int64_t j = 0; j < 6; ++j) CHECK(single.at2(t, j) == single.at2(0, j));
  }
}

TEST_CASE("quantization picks the nearest codebook entry") {
  Tensor cb = Tensor::zeros({2, 2});
  cb.at2(1, 0) = 1.0;
  cb.at2(1, 1) = 1.0;
  Tensor z = Tensor::zeros({1, 2});
  z.at2(0, 0) = 0.2;
  z.at2(0, 1) = 0.1;
  const QuantizeResult near = quantize(z, cb);
  CHECK(near.indices[0] == 0);
  CHECK(near.z_q.at2(0, 0) == 0.0);
  CHECK(near.z_q.at2(0, 1) == 0.0);

  // A token equal to an entry maps to that entry at distance zero.
  Tensor exact = Tensor::zeros({1, 2});
  exact.at2(0, 0) = 1.0;
  exact.at2(0, 1) = 1.0;
  const QuantizeResult hit = quantize(exact, cb);
  CHECK(hit.indices[0] == 1);
  CHECK(hit.z_q.at2(0, 0) == 1.0);
  CHECK(hit.z_q.at2(0, 1) == 1.0);

  // Ties resolve to the lowest index.
  Tensor dup = Tensor::zeros({3, 2});
  dup.at2(0, 0) = 5.0;
  dup.at2(1, 0) = 5.0;
  dup.at2(2, 0) = 5.0;
  Tensor probe = Tensor::zeros({1, 2});
  probe.at2(0, 0) = 5.0;
  probe.at2(0, 1) = 0.25;
  CHECK(quantize(probe, dup).indices[0] == 0);
  Tensor mid = Tensor::zeros({1, 2});
  mid.at2(0, 0) = 0.5;
  mid.at2(0, 1) = 0.5;
  CHECK(quantize(mid, cb).indices[0] == 0);

  // 100 random tokens against an exhaustive-search oracle, and bit-equality
  // of the returned rows with the table.
  Rng rng(4242, "pose.quantize");
  const Tensor table = randn(rng, {8, 32});
  const Tensor tokens = randn(rng, {100, 32});
  const QuantizeResult q = quantize(tokens, table);
  for (int64_t t = 0; t < 100; ++t) {
    int64_t best = 0;
    double best_d = 1e300;
    for (int64_t k = 0; k < 8; ++k) {
      double dist = 0.0;
      for (int64_t j = 0; j < 32; ++j) {
        const double d = tokens.at2(t, j) - table.at2(k, j);
        dist += d * d;
      }
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    CHECK(q.indices[size_t(t)] == best);
    for (int64_t j = 0; j < 32; ++j) {
      CHECK(q.z_q.at2(t, j) == table.at2(best, j));
    }
  }

  CHECK_THROWS_AS(quantize(tokens, Tensor::zeros({0, 32})), DataError);
  CHECK_THROWS_AS(quantize(Tensor::zeros({4, 16}), table), DataError);
}

TEST_CASE("codebook autoencoder keeps sequence shape deterministically") {
  PoseCodebookConfig cfg = small_pose_cfg();
  const PoseVqvae vq = PoseVqvae::build(cfg);
  Rng rng(512, "pose.vqvae.shapes");
  for (int64_t f : {8, 16, 40, 10, 1}) {
    const Tensor p_r = randn(rng, {f, 6}, 0.1);
    const Tensor rec = vq.reconstruct(p_r);
    CHECK(rec.dim(0) == f);
    CHECK(rec.dim(1) == 6);
    CHECK(bits_equal(rec, vq.reconstruct(p_r)));
  }

  const Tensor probe = randn(rng, {12, 6}, 0.1);
  const PoseVqvae copy = PoseVqvae::from_store(cfg, vq.params);
  CHECK(bits_equal(copy.reconstruct(probe), vq.reconstruct(probe)));

  PoseCodebookConfig bad = cfg;
  bad.downsample = 2;
  CHECK_THROWS_AS(PoseVqvae::build(bad), DataError);
  ParamStore missing;
  CHECK_THROWS_AS(PoseVqvae::from_store(cfg, missing), DataError);
}

TEST_CASE("reconstruction loss matches its formula and routes gradients") {
  Rng rng(606, "pose.recloss");
  const Tensor p_r = randn(rng, {5, 6});
  const Tensor p_hat = randn(rng, {5, 6});
  const Tensor z_hat = randn(rng, {3, 4});
  const Tensor z_q = randn(rng, {3, 4});

  CHECK(rec_loss(p_r, p_r, z_hat, z_hat) == 0.0);
  CHECK(map_loss(p_r, p_r, z_hat, z_hat) == 0.0);

  double mse_p = 0.0, mse_z = 0.0;
  for (int64_t i = 0; i < p_r.numel(); ++i) {
    const double d = p_r[i] - p_hat[i];
    mse_p += d * d;
  }
  mse_p /= double(p_r.numel());
  for (int64_t i = 0; i < z_hat.numel(); ++i) {
    const double d = z_hat[i] - z_q[i];
    mse_z += d * d;
  }
  mse_z /= double(z_hat.numel());
  CHECK(rec_loss(p_r, p_hat, z_hat, z_q) ==
        doctest::Approx(mse_p + 2.0 * mse_z).epsilon(1e-12));
  CHECK(map_loss(p_r, p_hat, z_hat, z_q) ==
        doctest::Approx(mse_p + mse_z).epsilon(1e-12));

  // Graph versions agree with the plain evaluation.
  {
    Graph g;
    const int loss = rec_loss_node(g, p_r, g.constant(p_hat),
                                   g.constant(z_hat), g.constant(z_q));
    CHECK(g.value(loss)[0] ==
          doctest::Approx(rec_loss(p_r, p_hat, z_hat, z_q)).epsilon(1e-15));
    const int ml = map_loss_node(g, p_r, g.constant(p_hat), g.constant(z_hat),
                                 g.constant(z_q));
    CHECK(g.value(ml)[0] ==
          doctest::Approx(map_loss(p_r, p_hat, z_hat, z_q)).epsilon(1e-15));
  }

  // Routing: the codebook term reaches only the table (through the chosen
  // rows, accumulating duplicates), the commitment term only the encoder
  // output. The reconstruction term is silenced with a constant here.
  const std::vector<int64_t> idx{0, 2, 0};
  Tensor table = randn(rng, {4, 4});
  {
    Graph g;
    const int zh = g.leaf(z_hat, true, "zh");
    const int cb = g.leaf(table, true, "cb");
    const int zq_node = g.embed(cb, idx);
    const int loss = rec_loss_node(g, p_r, g.constant(p_r), zh, zq_node);
    const auto grads = g.param_grads(loss);

    const Tensor& zq_val = g.value(zq_node);
    const double n = double(z_hat.numel());
    for (int64_t t = 0; t < 3; ++t) {
      for (int64_t j = 0; j < 4; ++j) {
        const double expect =
            2.0 * (z_hat.at2(t, j) - zq_val.at2(t, j)) / n;
        CHECK(grads.at("zh").at2(t, j) ==
              doctest::Approx(expect).epsilon(1e-12));
      }
    }
    Tensor cb_expect = Tensor::zeros({4, 4});
    for (size_t t = 0; t < idx.size(); ++t) {
      for (int64_t j = 0; j < 4; ++j) {
        cb_expect.at2(idx[t], j) +=
            2.0 * (zq_val.at2(int64_t(t), j) - z_hat.at2(int64_t(t), j)) / n;
      }
    }
    for (int64_t i = 0; i < cb_expect.numel(); ++i) {
      CHECK(grads.at("cb")[i] == doctest::Approx(cb_expect[i]).epsilon(1e-12));
      if (i >= 4 && i < 8) CHECK(grads.at("cb")[i] == 0.0);  // unused row 1
    }
  }

  // The mapping loss sends exactly zero gradient into the codebook.
  {
    Graph g;
    const int zh = g.leaf(z_hat, true, "zh");
    const int cb = g.leaf(table, true, "cb");
    const int zq_node = g.embed(cb, idx);
    const int loss = map_loss_node(g, p_r, g.constant(p_r), zh, zq_node);
    const auto grads = g.param_grads(loss);
    for (int64_t i = 0; i < grads.at("cb").numel(); ++i) {
      CHECK(grads.at("cb")[i] == 0.0);
    }
    const Tensor& zq_val = g.value(zq_node);
    const double n = double(z_hat.numel());
    for (int64_t t = 0; t < 3; ++t) {
      for (int64_t j = 0; j < 4; ++j) {
        CHECK(grads.at("zh").at2(t, j) ==
              doctest::Approx(2.0 * (z_hat.at2(t, j) - zq_val.at2(t, j)) / n)
                  .epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("straight-through estimator copies decoder gradients") {
  // The quantized-bypass graph must produce exactly the gradient field of the
  // same function with the (z_q - z) offset frozen as a constant — that is
  // the identity-Jacobian backward the finite-difference suite probes.
  Rng rng(707, "pose.st");
  Tensor cb = Tensor::zeros({3, 4});
  for (int64_t k = 0; k < 3; ++k) {
    for (int64_t j = 0; j < 4; ++j) {
      cb.at2(k, j) = 6.0 * double(k) - 6.0 + 0.7 * double(j + 1);
    }
  }
  const Tensor z = randn(rng, {5, 4});
  const Tensor w = randn(rng, {4, 3});
  const QuantizeResult q = quantize(z, cb);
  Tensor offset = Tensor::zeros({5, 4});
  for (int64_t i = 0; i < offset.numel(); ++i) offset[i] = q.z_q[i] - z[i];

  Tensor grad_st, grad_frozen;
  {
    Graph g;
    const int zh = g.leaf(z, true, "zh");
    const int zq = g.constant(q.z_q);
    const int dec_in = g.add(zh, g.stop_grad(g.sub(zq, zh)));
    const int o = g.matmul(dec_in, g.constant(w));
    grad_st = g.param_grads(g.sum(g.mul(o, o))).at("zh");
  }
  {
    Graph g;
    const int zh = g.leaf(z, true, "zh");
    const int dec_in = g.add(zh, g.constant(offset));
    const int o = g.matmul(dec_in, g.constant(w));
    grad_frozen = g.param_grads(g.sum(g.mul(o, o))).at("zh");
  }
  CHECK(bits_equal(grad_st, grad_frozen));
  double largest = 0.0;
  for (int64_t i = 0; i < grad_st.numel(); ++i) {
    largest = std::max(largest, std::abs(grad_st[i]));
  }
  CHECK(largest > 0.0);
}

TEST_CASE("pose mapper is causal over latent slots and feeds back latents") {
  PoseCodebookConfig cfg = small_pose_cfg();
  PoseVqvae vq = PoseVqvae::build(cfg);
  const PoseMapper mapper = PoseMapper::build(cfg);
  Rng rng(808, "pose.mapper");
  const Tensor audio = randn(rng, {12, cfg.audio_dims});
  const Tensor alpha = randn(rng, {cfg.d_id});
  Tensor p0 = randn(rng, {6}, 0.1);

  CHECK_THROWS_AS(map_forward(mapper, vq, audio, alpha, p0, 12), DataError);
  vq.frozen = true;

  const MapForwardResult out = map_forward(mapper, vq, audio, alpha, p0, 12);
  CHECK(out.p_rel.dim(0) == 12);
  CHECK(out.z_tokens.dim(0) == 3);
  CHECK(out.z_q.dim(0) == 3);

  // Quantized latents are exact codebook rows.
  const Tensor& table = vq.params.at("vq.codebook");
  for (int64_t t = 0; t < 3; ++t) {
    for (int64_t j = 0; j < cfg.d_z; ++j) {
      CHECK(out.z_q.at2(t, j) == table.at2(out.indices[size_t(t)], j));
    }
  }

  // Deterministic replay.
  const MapForwardResult again = map_forward(mapper, vq, audio, alpha, p0, 12);
  CHECK(bits_equal(again.z_tokens, out.z_tokens));
  CHECK(bits_equal(again.p_rel, out.p_rel));

  // Audio frame 9 lies in slot 2's window (frames 8..11): slots 0 and 1 and
  // the poses they decode stay bitwise identical, slot 2 moves.
  Tensor bumped = audio;
  for (int64_t j = 0; j < cfg.audio_dims; ++j) bumped.at2(9, j) += 0.5;
  const MapForwardResult pert = map_forward(mapper, vq, bumped, alpha, p0, 12);
  bool slot2_changed = false;
  for (int64_t j = 0; j < cfg.d_z; ++j) {
    CHECK(pert.z_tokens.at2(0, j) == out.z_tokens.at2(0, j));
    CHECK(pert.z_tokens.at2(1, j) == out.z_tokens.at2(1, j));
    slot2_changed |= pert.z_tokens.at2(2, j) != out.z_tokens.at2(2, j);
  }
  CHECK(slot2_changed);
  CHECK(pert.indices[0] == out.indices[0]);
  CHECK(pert.indices[1] == out.indices[1]);
  for (int64_t t = 0; t < 8; ++t) {
    for (int64_t j = 0; j < 6; ++j) {
      CHECK(pert.p_rel.at2(t, j) == out.p_rel.at2(t, j));
    }
  }

  // Dropping the reference-pose token makes the mapper ignore it; keeping it
  // makes the output depend on it.
  Tensor p0_other = p0;
  p0_other[0] += 0.2;
  const MapForwardResult with_p0 =
      map_forward(mapper, vq, audio, alpha, p0_other, 12);
  CHECK_FALSE(bits_equal(with_p0.z_tokens, out.z_tokens));

  PoseCodebookConfig no_ref = cfg;
  no_ref.initial_pose = false;
  const PoseMapper bare = PoseMapper::build(no_ref);
  const MapForwardResult a = map_forward(bare, vq, audio, alpha, p0, 12);
  const MapForwardResult b = map_forward(bare, vq, audio, alpha, p0_other, 12);
  CHECK(bits_equal(a.z_tokens, b.z_tokens));
  CHECK(bits_equal(a.p_rel, b.p_rel));

  // Padded frame counts still decode to the requested length.
  const MapForwardResult short_out =
      map_forward(mapper, vq, audio, alpha, p0, 10);
  CHECK(short_out.p_rel.dim(0) == 10);
  CHECK(short_out.z_q.dim(0) == 3);
}

TEST_CASE("two-phase pose training fits and freezes the codebook stage") {
  const std::string data_dir = scratch_dir("pose_train_data");
  SynthConfig scfg;
  scfg.num_clips = 8;
  scfg.frames = 8;
  scfg.seed = 505;
  scfg.height = 16;
  scfg.width = 16;
  generate_dataset(data_dir, scfg);
  const Dataset ds = load_dataset(data_dir);

  PoseCodebookConfig cfg = small_pose_cfg();
  cfg.phase1_steps = 300;
  cfg.phase2_steps = 40;
  cfg.lr = 4e-3;
  cfg.seed = 3;

  const std::string vq_dir = scratch_dir("pose_train_vq");
  const std::string map_dir = scratch_dir("pose_train_map");
  const PoseTrainResult run = train_two_phase(ds, cfg, vq_dir, map_dir);
  REQUIRE(run.phase1_history.size() == 300);
  REQUIRE(run.phase2_history.size() == 40);
  CHECK(run.phase1_history.back() < 0.6 * run.phase1_history.front());
  CHECK(run.phase2_history.back() < run.phase2_history.front());
  CHECK(run.codebook_usage > 0.0);

  // Freeze contract: the codebook-stage tensors saved after phase 1 must be
  // byte-identical to the stage state after phase 2.
  const std::string after_dir = scratch_dir("pose_train_vq_after");
  save_checkpoint(after_dir, run.vqvae.params, nullptr, {});
  const auto before_files = tensor_files(vq_dir);  // params + optimizer state
  const auto after_files = tensor_files(after_dir);
  REQUIRE(!after_files.empty());
  for (const auto& [name, bytes] : after_files) {
    bool found = false;
    for (const auto& [bname, bbytes] : before_files) {
      if (bname != name) continue;
      found = true;
      CHECK(bbytes == bytes);
    }
    CHECK(found);
  }

  // Determinism: the whole two-phase run replays bit-identically.
  const PoseTrainResult rerun = train_two_phase(ds, cfg);
  CHECK(rerun.phase1_history == run.phase1_history);
  CHECK(rerun.phase2_history == run.phase2_history);
  for (const auto& [name, tensor] : run.mapper.params.tensors) {
    CHECK(bits_equal(tensor, rerun.mapper.params.at(name)));
  }

  // Phase 2 refuses an unfrozen stage.
  PoseVqvae unfrozen = PoseVqvae::from_store(cfg, run.vqvae.params);
  CHECK_THROWS_AS(train_pose_phase2(ds, cfg, unfrozen), DataError);

  // Checkpoint round trip drives the mapper to identical outputs.
  nlohmann::json meta;
  ParamStore loaded = load_checkpoint(map_dir, nullptr, &meta);
  CHECK(meta["stage"] == "a2m-pose-mapper");
  CHECK(meta["config"]["K"] == cfg.K);
  const PoseMapper restored = PoseMapper::from_store(cfg, std::move(loaded));

  const DatasetClip& clip = ds.clips[size_t(ds.val[0])];
  Tensor p0 = Tensor::zeros({6});
  for (int64_t j = 0; j < 6; ++j) p0[j] = clip.pose.at2(0, j);
  const MapForwardResult lhs = map_forward(restored, run.vqvae, clip.audio,
                                           clip.alpha, p0, clip.beta.dim(0));
  const MapForwardResult rhs = map_forward(run.mapper, run.vqvae, clip.audio,
                                           clip.alpha, p0, clip.beta.dim(0));
  CHECK(bits_equal(lhs.p_rel, rhs.p_rel));

  // Trained mapper reacts to the reference pose (non-degeneracy).
  Tensor p0_shift = p0;
  p0_shift[1] += 0.15;
  const MapForwardResult shifted = map_forward(
      run.mapper, run.vqvae, clip.audio, clip.alpha, p0_shift,
      clip.beta.dim(0));
  CHECK_FALSE(bits_equal(shifted.z_tokens, rhs.z_tokens));

  // Reconstruction quality of the trained codebook stage: better than
  // predicting each sequence's mean pose.
  double model_sse = 0.0, mean_sse = 0.0;
  for (int64_t idx : ds.train) {
    const Tensor target = clip_pose_targets(ds.clips[size_t(idx)], cfg);
    const Tensor rec = run.vqvae.reconstruct(target);
    Tensor mean = Tensor::zeros({6});
    for (int64_t t = 0; t < target.dim(0); ++t) {
      for (int64_t j = 0; j < 6; ++j) mean[j] += target.at2(t, j);
    }
    for (int64_t j = 0; j < 6; ++j) mean[j] /= double(target.dim(0));
    for (int64_t t = 0; t < target.dim(0); ++t) {
      for (int64_t j = 0; j < 6; ++j) {
        const double dm = target.at2(t, j) - rec.at2(t, j);
        const double db = target.at2(t, j) - mean[j];
        model_sse += dm * dm;
        mean_sse += db * db;
      }
    }
  }
  CHECK(model_sse < mean_sse);
}
