#pragma once

#include <string>
#include <vector>

#include "vividforge/tensor.hpp"

namespace vividforge {

// Parametric head: S = base + unflatten(U_id*alpha + U_exp*beta) + lip
// offsets scattered onto the lip vertices. Flattened coordinate order is
// row-major [n,3] (vertex-major). Poses are 6-vectors: axis-angle rotation
// (rx,ry,rz) followed by translation (tx,ty,tz); rotation pivots on the
// centroid of the neutral shape.
struct FaceModel {
  int64_t n = 0;
  Tensor base;                     // [n,3]
  std::vector<int64_t> tris;       // 3*T indices, CCW seen from outside
  Tensor u_id;                     // [3n, d_id], column-orthonormal
  Tensor u_exp;                    // [3n, d_exp], column-orthonormal;
                                   // first n_lip_exp columns live on lip rows only
  std::vector<int64_t> lip_verts;  // ascending vertex ids
  std::vector<int64_t> landmarks;  // 20 vertex ids; first 8 are lip vertices
  int64_t d_id = 8;
  int64_t d_exp = 12;
  int64_t n_lip_exp = 4;

  int64_t lip_count() const { return int64_t(lip_verts.size()); }
  int64_t tri_count() const { return int64_t(tris.size()) / 3; }
  Tensor pivot() const;  // [3] centroid of base

  // alpha [d_id], beta [d_exp], o_lip flat [3*L] or [L,3] (may be empty for
  // zero offsets). Returns [n,3].
  Tensor assemble(const Tensor& alpha, const Tensor& beta,
                  const Tensor& o_lip) const;

  // Per-axis min-max normalization of the neutral shape into [0,1]^3.
  Tensor ncc() const;  // [n,3]

  Tensor apply_pose(const Tensor& verts, const Tensor& pose) const;
  // Pose equivalent of "apply p_ref, then p_rel" as one rigid transform.
  Tensor compose_relative(const Tensor& p_ref, const Tensor& p_rel) const;

  // Final driven meshes: frame t is assemble(alpha, beta[t], o_lip[t]) posed
  // by compose_relative(p_ref, p_rel[t]). beta_seq [f,d_exp], o_lip_seq
  // [f,3*L] (or empty for zero offsets), p_rel_seq [f,6].
  std::vector<Tensor> driven_mesh_sequence(const Tensor& alpha,
                                           const Tensor& beta_seq,
                                           const Tensor& o_lip_seq,
                                           const Tensor& p_ref,
                                           const Tensor& p_rel_seq) const;

  void save(const std::string& dir) const;
  static FaceModel load(const std::string& dir);

  // The canonical micro head used everywhere: a subdivided icosphere with
  // fixed anisotropic scaling, seeded bases, mouth patch, and landmarks.
  static FaceModel build(uint64_t seed);
};

// Rodrigues rotation from axis-angle [3] -> [3,3].
Tensor rot_from_axis_angle(const Tensor& r);
// Log map back to axis-angle with |r| <= pi.
Tensor axis_angle_from_rot(const Tensor& rot);
// verts [n,3] rotated about pivot then translated.
Tensor apply_pose_about(const Tensor& verts, const Tensor& pose,
                        const Tensor& pivot);
Tensor compose_poses(const Tensor& first, const Tensor& second);

void save_obj(const std::string& path, const Tensor& verts,
              const std::vector<int64_t>& tris);

}  // namespace vividforge
