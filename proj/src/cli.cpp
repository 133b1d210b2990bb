#include "vividforge/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vividforge/a2m_expression.hpp"
#include "vividforge/a2m_pose.hpp"
#include "vividforge/config.hpp"
#include "vividforge/error.hpp"
#include "vividforge/m2v.hpp"
#include "vividforge/pipeline.hpp"
#include "vividforge/png_io.hpp"
#include "vividforge/synthdata.hpp"

namespace fs = std::filesystem;

namespace vividforge {
namespace {

void write_loss_csv(const std::string& path, const std::vector<double>& loss) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write loss file: " + path);
  out << "step,loss\n";
  char buf[80];
  for (size_t i = 0; i < loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, loss[i]);
    out << buf;
  }
  if (!out) throw DataError("failed writing loss file: " + path);
}

void write_gan_loss_csv(const std::string& path,
                        const std::vector<double>& gen,
                        const std::vector<double>& disc) {
  if (gen.size() != disc.size()) {
    throw DataError("generator and discriminator histories differ in length");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write loss file: " + path);
  out << "step,gen_loss,disc_loss\n";
  char buf[120];
  for (size_t i = 0; i < gen.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", i, gen[i], disc[i]);
    out << buf;
  }
  if (!out) throw DataError("failed writing loss file: " + path);
}

BsvoConfig bsvo_from(const RunConfig& rc) {
  BsvoConfig c;
  c.d_model = rc.get_int("a2m_expr.d_model");
  c.heads = rc.get_int("a2m_expr.heads");
  c.layers = rc.get_int("a2m_expr.layers");
  c.lr = rc.get_double("a2m_expr.lr");
  c.steps = rc.get_int("a2m_expr.steps");
  c.batch = rc.get_int("a2m_expr.batch");
  c.seed = uint64_t(rc.get_int("a2m_expr.seed"));
  c.teacher_forcing = rc.get_bool("a2m_expr.teacher_forcing");
  c.shared_trunk = rc.get_bool("a2m_expr.shared_trunk");
  c.blendshape_only = rc.get_bool("a2m_expr.blendshape_only");
  c.vertex_only = rc.get_bool("a2m_expr.vertex_only");
  return c;
}

PoseCodebookConfig pose_from(const RunConfig& rc) {
  PoseCodebookConfig c;
  c.K = rc.get_int("a2m_pose.K");
  c.d_z = rc.get_int("a2m_pose.d_z");
  c.downsample = rc.get_int("a2m_pose.downsample");
  c.phase1_steps = rc.get_int("a2m_pose.phase1_steps");
  c.phase2_steps = rc.get_int("a2m_pose.phase2_steps");
  c.lr = rc.get_double("a2m_pose.lr");
  c.seed = uint64_t(rc.get_int("a2m_pose.seed"));
  c.absolute_pose = rc.get_bool("a2m_pose.absolute_pose");
  c.initial_pose = rc.get_bool("a2m_pose.initial_pose");
  c.d_model = rc.get_int("a2m_pose.d_model");
  c.heads = rc.get_int("a2m_pose.heads");
  c.mapper_layers = rc.get_int("a2m_pose.mapper_layers");
  return c;
}

M2vConfig m2v_from(const RunConfig& rc, int64_t height, int64_t width) {
  M2vConfig c;
  c.height = height;
  c.width = width;
  c.lr = rc.get_double("m2v.lr");
  c.steps = rc.get_int("m2v.steps");
  c.batch = rc.get_int("m2v.batch");
  c.seed = uint64_t(rc.get_int("m2v.seed"));
  c.lip_branch = rc.get_bool("m2v.lip_branch");
  c.kl_weight = rc.get_double("m2v.kl_weight");
  c.flow_scale = rc.get_double("m2v.flow_scale");
  c.lip_sigma = rc.get_double("m2v.lip_sigma");
  c.lip_maps = rc.get_int("m2v.lip_maps");
  c.w_perc = rc.get_double("m2v.w_perc");
  c.w_fm = rc.get_double("m2v.w_fm");
  c.w_adv = rc.get_double("m2v.w_adv");
  return c;
}

int cmd_synth(const RunConfig& rc, const std::string& out_dir) {
  SynthConfig sc;
  sc.num_clips = rc.get_int("synth.clips");
  sc.frames = rc.get_int("synth.frames");
  sc.seed = uint64_t(rc.get_int("synth.seed"));
  sc.height = rc.get_int("synth.height");
  sc.width = rc.get_int("synth.width");
  generate_dataset(out_dir, sc);
  rc.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  std::cout << "synth: wrote " << sc.num_clips << " clips x " << sc.frames
            << " frames (" << sc.height << "x" << sc.width << ") to "
            << out_dir << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& stage,
              const std::string& data_dir, const std::string& out_dir,
              const std::string& phase, const std::string& codebook_dir) {
  fs::create_directories(out_dir);
  rc.write_snapshot((fs::path(out_dir) / "config_resolved.txt").string());
  Dataset ds = load_dataset(data_dir);

  if (stage == "a2m-expr") {
    BsvoTrainResult r = train_bsvo(ds, bsvo_from(rc), out_dir);
    write_loss_csv((fs::path(out_dir) / "loss.csv").string(), r.loss_history);
    std::cout << "train a2m-expr: " << r.loss_history.size() << " steps";
    if (!r.loss_history.empty()) {
      std::cout << ", loss " << r.loss_history.front() << " -> "
                << r.loss_history.back();
    }
    std::cout << ", checkpoint at " << out_dir << "\n";
    return 0;
  }

  if (stage == "a2m-pose") {
    PoseCodebookConfig cfg = pose_from(rc);
    const std::string cb_out = (fs::path(out_dir) / "codebook").string();
    const std::string mp_out = (fs::path(out_dir) / "mapper").string();
    if (phase == "both") {
      PoseTrainResult r = train_two_phase(ds, cfg, cb_out, mp_out);
      write_loss_csv((fs::path(out_dir) / "loss_phase1.csv").string(),
                     r.phase1_history);
      write_loss_csv((fs::path(out_dir) / "loss_phase2.csv").string(),
                     r.phase2_history);
      std::cout << "train a2m-pose: codebook usage " << r.codebook_usage
                << ", checkpoints at " << cb_out << " and " << mp_out << "\n";
      return 0;
    }
    if (phase == "1") {
      PosePhase1Result r = train_pose_phase1(ds, cfg, codebook_dir);
      write_loss_csv((fs::path(out_dir) / "loss_phase1.csv").string(),
                     r.history);
      std::cout << "train a2m-pose phase 1: codebook usage "
                << r.codebook_usage << ", checkpoint at " << codebook_dir
                << "\n";
      return 0;
    }
    // phase 2: the latent layout comes from the trained codebook checkpoint.
    if (!fs::exists(fs::path(codebook_dir) / "manifest.json")) {
      throw DataError("a2m-pose phase 2 requires the codebook checkpoint at '" +
                      codebook_dir +
                      "' (run phase 1 first or pass --codebook)");
    }
    nlohmann::json meta;
    ParamStore store = load_checkpoint(codebook_dir, nullptr, &meta);
    if (meta.value("stage", std::string()) != "a2m-pose-codebook") {
      throw DataError("checkpoint at '" + codebook_dir +
                      "' is not a pose codebook stage");
    }
    PoseCodebookConfig cb = pose_config_from_meta(meta);
    cfg.K = cb.K;
    cfg.d_z = cb.d_z;
    cfg.downsample = cb.downsample;
    cfg.absolute_pose = cb.absolute_pose;
    PoseVqvae vq = PoseVqvae::from_store(cfg, std::move(store));
    vq.frozen = true;
    PosePhase2Result r = train_pose_phase2(ds, cfg, vq, mp_out);
    write_loss_csv((fs::path(out_dir) / "loss_phase2.csv").string(),
                   r.history);
    std::cout << "train a2m-pose phase 2: " << r.history.size()
              << " steps, checkpoint at " << mp_out << "\n";
    return 0;
  }

  // m2v: the frame size is a property of the dataset, not a flag.
  if (ds.clips.empty()) throw DataError("dataset has no clips");
  Tensor first = read_png(clip_frame_path(ds.clips[0], 0));
  if (first.ndim() != 3) {
    throw DataError("dataset frames must be RGB images");
  }
  M2vTrainResult r =
      train_m2v(ds, m2v_from(rc, first.dim(0), first.dim(1)), out_dir);
  write_gan_loss_csv((fs::path(out_dir) / "loss.csv").string(), r.gen_history,
                     r.disc_history);
  std::cout << "train m2v: " << r.gen_history.size() << " steps";
  if (!r.gen_history.empty()) {
    std::cout << ", generator loss " << r.gen_history.front() << " -> "
              << r.gen_history.back();
  }
  std::cout << ", checkpoint at " << out_dir << "\n";
  return 0;
}

int cmd_infer(const RunConfig& rc, const InferRequest& req_in) {
  InferRequest req = req_in;
  req.fps = rc.get_double("infer.fps");
  fs::create_directories(req.out_dir);
  rc.write_snapshot((fs::path(req.out_dir) / "config_resolved.txt").string());
  InferSummary s = run_inference(req);
  std::cout << "infer: wrote " << s.frames << " frames to " << s.out_dir
            << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& pred_dir,
             const std::string& data_dir, const std::string& clip,
             const std::string& csv_path) {
  EvalSummary s = run_eval(pred_dir, data_dir, clip, csv_path);
  fs::path snapshot = fs::path(csv_path).parent_path() / "config_eval.txt";
  rc.write_snapshot(snapshot.string());
  std::cout << "eval: " << s.frames << " frames, psnr_mean " << s.psnr_mean
            << " dB, vertex_mse " << s.vertex_mse << ", beta_mae "
            << s.beta_mae << ", hpd " << s.hpd_pred << " (gt " << s.hpd_gt
            << "), metrics at " << csv_path << "\n";
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"audio-driven talking-head pipeline on synthetic data"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path,
                 "key = value config file layered under command flags")
      ->check(CLI::ExistingFile);

  // synth
  CLI::App* synth = app.add_subcommand("synth", "generate a paired dataset");
  synth->fallthrough();
  std::string synth_out;
  int64_t synth_clips = 0, synth_frames = 0, synth_seed = 0;
  int64_t synth_height = 0, synth_width = 0;
  synth->add_option("--out", synth_out, "dataset directory")->required();
  CLI::Option* o_clips = synth->add_option("--clips", synth_clips)
                             ->check(CLI::PositiveNumber);
  CLI::Option* o_frames = synth->add_option("--frames", synth_frames)
                              ->check(CLI::PositiveNumber);
  CLI::Option* o_sseed = synth->add_option("--seed", synth_seed)
                             ->check(CLI::NonNegativeNumber);
  CLI::Option* o_height = synth->add_option("--height", synth_height)
                              ->check(CLI::PositiveNumber);
  CLI::Option* o_width = synth->add_option("--width", synth_width)
                             ->check(CLI::PositiveNumber);

  // train
  CLI::App* train = app.add_subcommand("train", "train one pipeline stage");
  train->fallthrough();
  std::string train_stage, train_data, train_out, train_phase = "both";
  std::string train_codebook;
  int64_t train_steps = 0, train_batch = 0, train_seed = 0;
  double train_lr = 0.0;
  train->add_option("stage", train_stage, "a2m-expr | a2m-pose | m2v")
      ->required()
      ->check(CLI::IsMember({"a2m-expr", "a2m-pose", "m2v"}));
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "checkpoint directory")->required();
  CLI::Option* o_steps = train->add_option("--steps", train_steps)
                             ->check(CLI::NonNegativeNumber);
  CLI::Option* o_lr = train->add_option("--lr", train_lr);
  CLI::Option* o_batch = train->add_option("--batch", train_batch)
                             ->check(CLI::PositiveNumber);
  CLI::Option* o_tseed = train->add_option("--seed", train_seed)
                             ->check(CLI::NonNegativeNumber);
  CLI::Option* o_phase =
      train
          ->add_option("--phase", train_phase,
                       "a2m-pose only: 1, 2, or both (default)")
          ->check(CLI::IsMember({"1", "2", "both"}));
  CLI::Option* o_codebook = train->add_option(
      "--codebook", train_codebook,
      "a2m-pose: codebook checkpoint location (default <out>/codebook)");
  CLI::Option* f_abs =
      train->add_flag("--absolute-pose", "a2m-pose: model absolute poses");
  CLI::Option* f_noinit = train->add_flag(
      "--no-initial-pose", "a2m-pose: drop the reference-pose input token");
  CLI::Option* f_bs = train->add_flag(
      "--blendshape-only", "a2m-expr: zero the vertex-offset branch");
  CLI::Option* f_vx = train->add_flag(
      "--vertex-only", "a2m-expr: zero the blendshape branches");
  CLI::Option* f_nolip =
      train->add_flag("--no-lip-branch", "m2v: facial motion branch only");

  // infer
  CLI::App* infer = app.add_subcommand("infer", "audio to frames");
  infer->fallthrough();
  std::string in_data, in_clip, in_audio, in_expr, in_pose, in_m2v, in_out;
  double in_fps = 0.0;
  infer->add_option("--data", in_data, "dataset directory")->required();
  infer->add_option("--clip", in_clip, "clip naming identity + reference frame")
      ->required();
  infer->add_option("--audio", in_audio,
                    "driving audio (.wav or feature .tnsr); default: the "
                    "clip's own features");
  infer->add_option("--expr", in_expr, "expression checkpoint")->required();
  infer->add_option("--pose", in_pose,
                    "pose checkpoint directory (codebook/ + mapper/)")
      ->required();
  infer->add_option("--m2v", in_m2v, "frame generator checkpoint")->required();
  infer->add_option("--out", in_out, "output directory")->required();
  CLI::Option* o_fps =
      infer->add_option("--fps", in_fps)->check(CLI::PositiveNumber);

  // eval
  CLI::App* eval = app.add_subcommand("eval", "score predictions against a clip");
  eval->fallthrough();
  std::string ev_pred, ev_data, ev_clip, ev_out;
  eval->add_option("--pred", ev_pred,
                   "inference output directory or dataset clip directory")
      ->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--clip", ev_clip, "ground-truth clip name")->required();
  eval->add_option("--out", ev_out,
                   "metrics csv path (default <pred>/metrics.csv)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig rc = RunConfig::defaults();
    if (!config_path.empty()) rc.load_file(config_path);

    if (app.got_subcommand(synth)) {
      if (o_clips->count()) rc.set_int("synth.clips", synth_clips);
      if (o_frames->count()) rc.set_int("synth.frames", synth_frames);
      if (o_sseed->count()) rc.set_int("synth.seed", synth_seed);
      if (o_height->count()) rc.set_int("synth.height", synth_height);
      if (o_width->count()) rc.set_int("synth.width", synth_width);
      return cmd_synth(rc, synth_out);
    }

    if (app.got_subcommand(train)) {
      if (o_steps->count()) {
        if (train_stage == "a2m-pose") {
          rc.set_int("a2m_pose.phase1_steps", train_steps);
          rc.set_int("a2m_pose.phase2_steps", train_steps);
        } else if (train_stage == "a2m-expr") {
          rc.set_int("a2m_expr.steps", train_steps);
        } else {
          rc.set_int("m2v.steps", train_steps);
        }
      }
      if (o_lr->count()) {
        rc.set_double(train_stage == "a2m-expr"   ? "a2m_expr.lr"
                      : train_stage == "a2m-pose" ? "a2m_pose.lr"
                                                  : "m2v.lr",
                      train_lr);
      }
      if (o_tseed->count()) {
        rc.set_int(train_stage == "a2m-expr"   ? "a2m_expr.seed"
                   : train_stage == "a2m-pose" ? "a2m_pose.seed"
                                               : "m2v.seed",
                   train_seed);
      }
      if (o_batch->count()) {
        if (train_stage == "a2m-pose") {
          throw UsageError("--batch does not apply to a2m-pose");
        }
        rc.set_int(train_stage == "a2m-expr" ? "a2m_expr.batch" : "m2v.batch",
                   train_batch);
      }
      if (o_phase->count() && train_stage != "a2m-pose") {
        throw UsageError("--phase applies only to a2m-pose");
      }
      if (o_codebook->count() && train_stage != "a2m-pose") {
        throw UsageError("--codebook applies only to a2m-pose");
      }
      if (f_abs->count()) {
        if (train_stage != "a2m-pose") {
          throw UsageError("--absolute-pose applies only to a2m-pose");
        }
        rc.set_bool("a2m_pose.absolute_pose", true);
      }
      if (f_noinit->count()) {
        if (train_stage != "a2m-pose") {
          throw UsageError("--no-initial-pose applies only to a2m-pose");
        }
        rc.set_bool("a2m_pose.initial_pose", false);
      }
      if (f_bs->count()) {
        if (train_stage != "a2m-expr") {
          throw UsageError("--blendshape-only applies only to a2m-expr");
        }
        rc.set_bool("a2m_expr.blendshape_only", true);
      }
      if (f_vx->count()) {
        if (train_stage != "a2m-expr") {
          throw UsageError("--vertex-only applies only to a2m-expr");
        }
        rc.set_bool("a2m_expr.vertex_only", true);
      }
      if (f_nolip->count()) {
        if (train_stage != "m2v") {
          throw UsageError("--no-lip-branch applies only to m2v");
        }
        rc.set_bool("m2v.lip_branch", false);
      }
      std::string codebook = train_codebook;
      if (codebook.empty()) {
        codebook = (fs::path(train_out) / "codebook").string();
      }
      return cmd_train(rc, train_stage, train_data, train_out, train_phase,
                       codebook);
    }

    if (app.got_subcommand(infer)) {
      if (o_fps->count()) rc.set_double("infer.fps", in_fps);
      InferRequest req;
      req.dataset_dir = in_data;
      req.clip = in_clip;
      req.audio_path = in_audio;
      req.ckpts = StageCheckpoints{in_expr, in_pose, in_m2v};
      req.out_dir = in_out;
      return cmd_infer(rc, req);
    }

    // eval
    std::string csv = ev_out.empty()
                          ? (fs::path(ev_pred) / "metrics.csv").string()
                          : ev_out;
    return cmd_eval(rc, ev_pred, ev_data, ev_clip, csv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace vividforge
