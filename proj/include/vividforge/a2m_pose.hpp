#pragma once

#include <string>
#include <vector>

#include "vividforge/nn.hpp"
#include "vividforge/params.hpp"
#include "vividforge/synthdata.hpp"
#include "vividforge/tensor.hpp"

namespace vividforge {

// Head-pose stage: a vector-quantized autoencoder learns a codebook of
// plausible relative pose motions (phase 1), then an autoregressive audio
// mapper predicts codebook latents that the frozen decoder turns back into
// pose sequences (phase 2).

struct PoseCodebookConfig {
  int64_t K = 64;
  int64_t d_z = 32;
  int64_t downsample = 4;  // fixed by the encoder architecture; validated
  int64_t phase1_steps = 300;
  int64_t phase2_steps = 300;
  double lr = 1e-4;
  uint64_t seed = 1;
  bool absolute_pose = false;  // train on absolute instead of relative poses
  bool initial_pose = true;    // false: drop the reference-pose token
  int64_t audio_dims = kAudioDims;
  int64_t d_id = 8;
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t mapper_layers = 2;
};

// p_seq [f+1,6] (row 0 is the reference) -> [f,6] componentwise differences.
Tensor to_relative(const Tensor& p_seq);
// Inverse: p0 [6] + rel [f,6] -> absolute [f,6].
Tensor to_absolute(const Tensor& p0, const Tensor& rel);

// Repeats the last row until the row count is a multiple of m.
Tensor pad_rows_to_multiple(const Tensor& seq, int64_t m);

struct QuantizeResult {
  Tensor z_q;                    // rows are exact codebook rows
  std::vector<int64_t> indices;  // argmin-L2, ties to the lowest index
};
QuantizeResult quantize(const Tensor& z_hat, const Tensor& codebook);

struct PoseVqvae {
  PoseCodebookConfig cfg;
  ParamStore params;
  bool frozen = false;  // set before the decoder may serve the mapper

  Linear enc1, enc2, enc3, dec1, dec2, dec3;

  static PoseVqvae build(const PoseCodebookConfig& cfg);
  static PoseVqvae from_store(const PoseCodebookConfig& cfg, ParamStore store);

  // [fp,6] padded poses -> [fp/4, d_z] latent tokens (in-graph).
  int encode_node(ModelContext& ctx, const Tensor& padded) const;
  // [T,d_z] node -> [4T,6] node.
  int decode_node(ModelContext& ctx, int z) const;

  // Plain full round trip: pad, encode, quantize, decode, cut back to f.
  Tensor reconstruct(const Tensor& p_r) const;
};

// Mean-squared-error losses written exactly as the two training objectives:
// value-wise the stop-gradient marks are invisible, so the plain versions
// simply evaluate each printed term.
double rec_loss(const Tensor& p_r, const Tensor& p_hat, const Tensor& z_hat,
                const Tensor& z_q);
double map_loss(const Tensor& p_r, const Tensor& p_hat, const Tensor& z_hat,
                const Tensor& z_q);

// Graph builders with the gradient routing: in the reconstruction loss the
// codebook term updates only the codebook and the commitment term only the
// encoder; in the mapping loss the quantized targets are gradient-free.
int rec_loss_node(Graph& g, const Tensor& p_r, int p_hat, int z_hat, int z_q);
int map_loss_node(Graph& g, const Tensor& p_r, int p_hat, int z_hat, int z_q);

struct PoseMapper {
  PoseCodebookConfig cfg;
  ParamStore params;

  Linear audio_proj, style_proj, p0_proj, latent_proj, head;
  std::vector<TransformerBlock> blocks;

  static PoseMapper build(const PoseCodebookConfig& cfg);
  static PoseMapper from_store(const PoseCodebookConfig& cfg,
                               ParamStore store);

  // Outputs for T latent slots. planned ([T-1, d_z] node, or -1 when T == 1)
  // carries the already-quantized previous latents fed back as inputs. Each
  // slot's cross-attention window covers only the audio frames its decoded
  // poses will span, so later audio cannot leak into earlier tokens.
  int outputs_node(ModelContext& ctx, const Tensor& audio, const Tensor& alpha,
                   const Tensor& p0, int planned, int64_t T) const;
};

struct MapForwardResult {
  Tensor p_rel;                  // [frames, 6] decoded pose sequence
  Tensor z_tokens;               // [T, d_z] raw mapper outputs
  Tensor z_q;                    // [T, d_z] quantized latents
  std::vector<int64_t> indices;  // chosen codebook entries
};

// Autoregressive inference: predict a latent, quantize it against the frozen
// codebook, feed its embedding back, then decode the quantized sequence with
// the frozen decoder. Throws unless vq.frozen is set.
MapForwardResult map_forward(const PoseMapper& mapper, const PoseVqvae& vq,
                             const Tensor& audio, const Tensor& alpha,
                             const Tensor& p0, int64_t frames);

struct PosePhase1Result {
  PoseVqvae vqvae;
  std::vector<double> history;
  double codebook_usage = 0.0;  // fraction of entries selected on train data
};

struct PosePhase2Result {
  PoseMapper mapper;
  std::vector<double> history;
};

struct PoseTrainResult {
  PoseVqvae vqvae;
  PoseMapper mapper;
  std::vector<double> phase1_history, phase2_history;
  double codebook_usage = 0.0;
};

PosePhase1Result train_pose_phase1(const Dataset& ds,
                                   const PoseCodebookConfig& cfg,
                                   const std::string& checkpoint_dir = "");

// vq must already be frozen. Verifies byte-identity of the codebook and
// decoder afterwards and fails hard on any mutation.
PosePhase2Result train_pose_phase2(const Dataset& ds,
                                   const PoseCodebookConfig& cfg,
                                   const PoseVqvae& vq,
                                   const std::string& checkpoint_dir = "");

PoseTrainResult train_two_phase(const Dataset& ds,
                                const PoseCodebookConfig& cfg,
                                const std::string& vq_checkpoint_dir = "",
                                const std::string& mapper_checkpoint_dir = "");

// Pose targets of one clip under the configured parameterization: relative
// differences by default, absolute rows under the ablation.
Tensor clip_pose_targets(const DatasetClip& clip, const PoseCodebookConfig& cfg);

}  // namespace vividforge
