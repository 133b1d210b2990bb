#include "vividforge/face_model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "json.hpp"
#include "vividforge/error.hpp"
#include "vividforge/rng.hpp"
#include "vividforge/tnsr_io.hpp"

namespace fs = std::filesystem;

namespace vividforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct V3 {
  double x = 0, y = 0, z = 0;
};

V3 norm3(V3 v) {
  double l = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  return {v.x / l, v.y / l, v.z / l};
}

// Unit icosphere: subdivide an icosahedron `level` times, pushing every new
// vertex onto the sphere. Face winding is CCW seen from outside throughout.
void build_icosphere(int level, std::vector<V3>& verts,
                     std::vector<int64_t>& tris) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<V3> v = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0},
      {0, -1, t}, {0, 1, t}, {0, -1, -t}, {0, 1, -t},
      {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
  };
  for (auto& p : v) p = norm3(p);
  std::vector<int64_t> f = {
      0, 11, 5,  0, 5,  1,  0, 1,  7,  0, 7,  10, 0, 10, 11,
      1, 5,  9,  5, 11, 4,  11, 10, 2, 10, 7,  6,  7, 1,  8,
      3, 9,  4,  3, 4,  2,  3, 2,  6,  3, 6,  8,  3, 8,  9,
      4, 9,  5,  2, 4,  11, 6, 2,  10, 8, 6,  7,  9, 8,  1,
  };
  for (int lv = 0; lv < level; ++lv) {
    std::map<std::pair<int64_t, int64_t>, int64_t> midpoint;
    auto mid = [&](int64_t a, int64_t b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      V3 m = norm3({(v[size_t(a)].x + v[size_t(b)].x) / 2,
                    (v[size_t(a)].y + v[size_t(b)].y) / 2,
                    (v[size_t(a)].z + v[size_t(b)].z) / 2});
      v.push_back(m);
      int64_t id = int64_t(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<int64_t> nf;
    nf.reserve(f.size() * 4);
    for (size_t i = 0; i < f.size(); i += 3) {
      int64_t a = f[i], b = f[i + 1], c = f[i + 2];
      int64_t ab = mid(a, b), bc = mid(b, c), ca = mid(c, a);
      int64_t quad[12] = {a, ab, ca, b, bc, ab, c, ca, bc, ab, bc, ca};
      nf.insert(nf.end(), quad, quad + 12);
    }
    f = std::move(nf);
  }
  verts = std::move(v);
  tris = std::move(f);
}

// Modified Gram-Schmidt over the given columns, optionally restricted to a
// row subset (others forced to zero first).
void orthonormalize_columns(Tensor& m, int64_t col_begin, int64_t col_end) {
  int64_t rows = m.dim(0);
  int64_t cols = m.dim(1);
  (void)cols;
  for (int64_t c = col_begin; c < col_end; ++c) {
    for (int64_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (int64_t r = 0; r < rows; ++r) dot += m.at2(r, c) * m.at2(r, p);
      for (int64_t r = 0; r < rows; ++r) m.at2(r, c) -= dot * m.at2(r, p);
    }
    double nrm = 0.0;
    for (int64_t r = 0; r < rows; ++r) nrm += m.at2(r, c) * m.at2(r, c);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-9) throw NumericError("degenerate basis column during build");
    for (int64_t r = 0; r < rows; ++r) m.at2(r, c) /= nrm;
  }
}

}  // namespace

Tensor FaceModel::pivot() const {
  Tensor c = Tensor::zeros({3});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < 3; ++k) c[k] += base.at2(i, k);
  }
  for (int64_t k = 0; k < 3; ++k) c[k] /= double(n);
  return c;
}

Tensor FaceModel::assemble(const Tensor& alpha, const Tensor& beta,
                           const Tensor& o_lip) const {
  if (alpha.numel() != d_id) {
    throw DataError("assemble: alpha must have " + std::to_string(d_id) +
                    " entries, got " + alpha.shape_str());
  }
  if (beta.numel() != d_exp) {
    throw DataError("assemble: beta must have " + std::to_string(d_exp) +
                    " entries, got " + beta.shape_str());
  }
  int64_t L = lip_count();
  if (!o_lip.data.empty() && o_lip.numel() != 3 * L) {
    throw DataError("assemble: lip offsets must have 3*" + std::to_string(L) +
                    " entries, got " + o_lip.shape_str());
  }
  Tensor out = base;
  for (int64_t r = 0; r < 3 * n; ++r) {
    double acc = 0.0;
    for (int64_t c = 0; c < d_id; ++c) acc += u_id.at2(r, c) * alpha[c];
    for (int64_t c = 0; c < d_exp; ++c) acc += u_exp.at2(r, c) * beta[c];
    out[r] += acc;
  }
  if (!o_lip.data.empty()) {
    for (int64_t l = 0; l < L; ++l) {
      for (int64_t k = 0; k < 3; ++k) {
        out.at2(lip_verts[size_t(l)], k) += o_lip[l * 3 + k];
      }
    }
  }
  return out;
}

Tensor FaceModel::ncc() const {
  Tensor out = Tensor::zeros({n, 3});
  for (int64_t k = 0; k < 3; ++k) {
    double lo = base.at2(0, k), hi = base.at2(0, k);
    for (int64_t i = 1; i < n; ++i) {
      lo = std::min(lo, base.at2(i, k));
      hi = std::max(hi, base.at2(i, k));
    }
    if (hi - lo < 1e-12) {
      throw DataError("ncc: neutral shape is degenerate along axis " +
                      std::to_string(k));
    }
    for (int64_t i = 0; i < n; ++i) {
      out.at2(i, k) = (base.at2(i, k) - lo) / (hi - lo);
    }
  }
  return out;
}

Tensor rot_from_axis_angle(const Tensor& r) {
  if (r.numel() != 3) throw DataError("axis-angle must have 3 entries");
  double x = r[0], y = r[1], z = r[2];
  double th = std::sqrt(x * x + y * y + z * z);
  Tensor m = Tensor::zeros({3, 3});
  if (th < 1e-14) {
    m.at2(0, 0) = m.at2(1, 1) = m.at2(2, 2) = 1.0;
    return m;
  }
  double kx = x / th, ky = y / th, kz = z / th;
  double c = std::cos(th), s = std::sin(th), v = 1.0 - c;
  m.at2(0, 0) = c + kx * kx * v;
  m.at2(0, 1) = kx * ky * v - kz * s;
  m.at2(0, 2) = kx * kz * v + ky * s;
  m.at2(1, 0) = ky * kx * v + kz * s;
  m.at2(1, 1) = c + ky * ky * v;
  m.at2(1, 2) = ky * kz * v - kx * s;
  m.at2(2, 0) = kz * kx * v - ky * s;
  m.at2(2, 1) = kz * ky * v + kx * s;
  m.at2(2, 2) = c + kz * kz * v;
  return m;
}

Tensor axis_angle_from_rot(const Tensor& rot) {
  if (rot.ndim() != 2 || rot.dim(0) != 3 || rot.dim(1) != 3) {
    throw DataError("rotation must be 3x3");
  }
  // Quaternion extraction with the largest-pivot rule keeps every branch
  // well conditioned, including rotations near pi.
  double r00 = rot.at2(0, 0), r01 = rot.at2(0, 1), r02 = rot.at2(0, 2);
  double r10 = rot.at2(1, 0), r11 = rot.at2(1, 1), r12 = rot.at2(1, 2);
  double r20 = rot.at2(2, 0), r21 = rot.at2(2, 1), r22 = rot.at2(2, 2);
  double tr = r00 + r11 + r22;
  double w, x, y, z;
  if (tr > r00 && tr > r11 && tr > r22) {
    double s = std::sqrt(tr + 1.0) * 2.0;  // 4w
    w = 0.25 * s;
    x = (r21 - r12) / s;
    y = (r02 - r20) / s;
    z = (r10 - r01) / s;
  } else if (r00 >= r11 && r00 >= r22) {
    double s = std::sqrt(1.0 + r00 - r11 - r22) * 2.0;  // 4x
    w = (r21 - r12) / s;
    x = 0.25 * s;
    y = (r01 + r10) / s;
    z = (r02 + r20) / s;
  } else if (r11 >= r22) {
    double s = std::sqrt(1.0 + r11 - r00 - r22) * 2.0;  // 4y
    w = (r02 - r20) / s;
    x = (r01 + r10) / s;
    y = 0.25 * s;
    z = (r12 + r21) / s;
  } else {
    double s = std::sqrt(1.0 + r22 - r00 - r11) * 2.0;  // 4z
    w = (r10 - r01) / s;
    x = (r02 + r20) / s;
    y = (r12 + r21) / s;
    z = 0.25 * s;
  }
  if (w < 0.0) {
    w = -w;
    x = -x;
    y = -y;
    z = -z;
  }
  double vn = std::sqrt(x * x + y * y + z * z);
  Tensor r = Tensor::zeros({3});
  if (vn < 1e-14) return r;
  double th = 2.0 * std::atan2(vn, w);  // in [0, pi] since w >= 0
  r[0] = th * x / vn;
  r[1] = th * y / vn;
  r[2] = th * z / vn;
  return r;
}

Tensor apply_pose_about(const Tensor& verts, const Tensor& pose,
                        const Tensor& pivot) {
  if (verts.ndim() != 2 || verts.dim(1) != 3) {
    throw DataError("apply_pose: vertices must be [n,3], got " + verts.shape_str());
  }
  if (pose.numel() != 6) throw DataError("pose must have 6 entries");
  Tensor rot = rot_from_axis_angle(Tensor::from({3}, {pose[0], pose[1], pose[2]}));
  Tensor out = Tensor::zeros(verts.shape);
  for (int64_t i = 0; i < verts.dim(0); ++i) {
    double px = verts.at2(i, 0) - pivot[0];
    double py = verts.at2(i, 1) - pivot[1];
    double pz = verts.at2(i, 2) - pivot[2];
    for (int64_t k = 0; k < 3; ++k) {
      out.at2(i, k) = rot.at2(k, 0) * px + rot.at2(k, 1) * py +
                      rot.at2(k, 2) * pz + pivot[k] + pose[3 + k];
    }
  }
  return out;
}

Tensor compose_poses(const Tensor& first, const Tensor& second) {
  if (first.numel() != 6 || second.numel() != 6) {
    throw DataError("poses must have 6 entries");
  }
  Tensor r1 = rot_from_axis_angle(Tensor::from({3}, {first[0], first[1], first[2]}));
  Tensor r2 = rot_from_axis_angle(Tensor::from({3}, {second[0], second[1], second[2]}));
  Tensor r = Tensor::zeros({3, 3});
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int64_t k = 0; k < 3; ++k) acc += r2.at2(i, k) * r1.at2(k, j);
      r.at2(i, j) = acc;
    }
  }
  Tensor aa = axis_angle_from_rot(r);
  Tensor out = Tensor::zeros({6});
  out[0] = aa[0];
  out[1] = aa[1];
  out[2] = aa[2];
  // t = R2*t1 + t2 (the shared pivot cancels).
  for (int64_t i = 0; i < 3; ++i) {
    out[3 + i] = r2.at2(i, 0) * first[3] + r2.at2(i, 1) * first[4] +
                 r2.at2(i, 2) * first[5] + second[3 + i];
  }
  return out;
}

Tensor FaceModel::apply_pose(const Tensor& verts, const Tensor& pose) const {
  return apply_pose_about(verts, pose, pivot());
}

Tensor FaceModel::compose_relative(const Tensor& p_ref,
                                   const Tensor& p_rel) const {
  return compose_poses(p_ref, p_rel);
}

std::vector<Tensor> FaceModel::driven_mesh_sequence(
    const Tensor& alpha, const Tensor& beta_seq, const Tensor& o_lip_seq,
    const Tensor& p_ref, const Tensor& p_rel_seq) const {
  if (beta_seq.ndim() != 2 || beta_seq.dim(1) != d_exp) {
    throw DataError("driven meshes: beta sequence must be [f," +
                    std::to_string(d_exp) + "], got " + beta_seq.shape_str());
  }
  int64_t f = beta_seq.dim(0);
  bool with_offsets = !o_lip_seq.data.empty();
  if (with_offsets &&
      (o_lip_seq.ndim() != 2 || o_lip_seq.dim(0) != f ||
       o_lip_seq.dim(1) != 3 * lip_count())) {
    throw DataError("driven meshes: lip offsets must be [f,3L], got " +
                    o_lip_seq.shape_str());
  }
  if (p_rel_seq.ndim() != 2 || p_rel_seq.dim(0) != f || p_rel_seq.dim(1) != 6) {
    throw DataError("driven meshes: relative poses must be [f,6], got " +
                    p_rel_seq.shape_str());
  }
  std::vector<Tensor> meshes;
  meshes.reserve(size_t(f));
  for (int64_t t = 0; t < f; ++t) {
    Tensor beta = Tensor::zeros({d_exp});
    for (int64_t c = 0; c < d_exp; ++c) beta[c] = beta_seq.at2(t, c);
    Tensor olip;
    if (with_offsets) {
      olip = Tensor::zeros({3 * lip_count()});
      for (int64_t c = 0; c < 3 * lip_count(); ++c) olip[c] = o_lip_seq.at2(t, c);
    }
    Tensor prel = Tensor::zeros({6});
    for (int64_t c = 0; c < 6; ++c) prel[c] = p_rel_seq.at2(t, c);
    meshes.push_back(
        apply_pose(assemble(alpha, beta, olip), compose_relative(p_ref, prel)));
  }
  return meshes;
}

FaceModel FaceModel::build(uint64_t seed) {
  FaceModel m;
  std::vector<V3> unit_verts;
  build_icosphere(3, unit_verts, m.tris);
  m.n = int64_t(unit_verts.size());

  // Anisotropic head shape: slightly tall, slightly shallow.
  const double sx = 0.80, sy = 0.95, sz = 0.85;
  m.base = Tensor::zeros({m.n, 3});
  for (int64_t i = 0; i < m.n; ++i) {
    m.base.at2(i, 0) = sx * unit_verts[size_t(i)].x;
    m.base.at2(i, 1) = sy * unit_verts[size_t(i)].y;
    m.base.at2(i, 2) = sz * unit_verts[size_t(i)].z;
  }

  // Mouth patch: vertices within 0.25 rad of the mouth direction on the unit
  // sphere.
  V3 mouth = norm3({0.0, -0.42, 0.91});
  for (int64_t i = 0; i < m.n; ++i) {
    const V3& u = unit_verts[size_t(i)];
    double dot = std::clamp(u.x * mouth.x + u.y * mouth.y + u.z * mouth.z, -1.0, 1.0);
    if (std::acos(dot) <= 0.25) m.lip_verts.push_back(i);
  }
  if (m.lip_count() < 8) {
    throw DataError("mouth patch has fewer than 8 vertices");
  }

  // Identity basis: dense random, column-orthonormal.
  {
    Rng rng(seed, "face.basis_id");
    m.u_id = Tensor::zeros({3 * m.n, m.d_id});
    for (double& v : m.u_id.data) v = rng.next_gaussian();
    orthonormalize_columns(m.u_id, 0, m.d_id);
  }

  // Expression basis: first n_lip_exp columns only touch lip rows; the rest
  // are dense but orthogonal to them (and each other).
  {
    Rng rng(seed, "face.basis_exp");
    m.u_exp = Tensor::zeros({3 * m.n, m.d_exp});
    for (int64_t c = 0; c < m.n_lip_exp; ++c) {
      for (int64_t v : m.lip_verts) {
        for (int64_t k = 0; k < 3; ++k) {
          m.u_exp.at2(3 * v + k, c) = rng.next_gaussian();
        }
      }
    }
    for (int64_t c = m.n_lip_exp; c < m.d_exp; ++c) {
      for (int64_t r = 0; r < 3 * m.n; ++r) m.u_exp.at2(r, c) = rng.next_gaussian();
    }
    orthonormalize_columns(m.u_exp, 0, m.d_exp);
    // MGS keeps the lip-only support of the first columns: subtracting
    // projections of later columns never touches them, but enforce exact
    // zeros anyway to make the invariant unconditional.
    std::vector<char> is_lip(size_t(m.n), 0);
    for (int64_t v : m.lip_verts) is_lip[size_t(v)] = 1;
    for (int64_t c = 0; c < m.n_lip_exp; ++c) {
      for (int64_t v = 0; v < m.n; ++v) {
        if (!is_lip[size_t(v)]) {
          for (int64_t k = 0; k < 3; ++k) m.u_exp.at2(3 * v + k, c) = 0.0;
        }
      }
    }
  }

  // Landmarks: 8 lip vertices spread around the mouth ring, then 12 fixed
  // facial directions snapped to their nearest vertices.
  {
    // Tangent frame at the mouth direction.
    V3 e1 = norm3({1.0 - mouth.x * mouth.x, -mouth.x * mouth.y, -mouth.x * mouth.z});
    V3 e2 = {mouth.y * e1.z - mouth.z * e1.y, mouth.z * e1.x - mouth.x * e1.z,
             mouth.x * e1.y - mouth.y * e1.x};
    std::vector<std::pair<double, int64_t>> ring;
    for (int64_t v : m.lip_verts) {
      const V3& u = unit_verts[size_t(v)];
      double a = std::atan2(u.x * e2.x + u.y * e2.y + u.z * e2.z,
                            u.x * e1.x + u.y * e1.y + u.z * e1.z);
      ring.emplace_back(a, v);
    }
    std::sort(ring.begin(), ring.end());
    int64_t L = int64_t(ring.size());
    std::vector<char> taken(size_t(m.n), 0);
    for (int64_t i = 0; i < 8; ++i) {
      int64_t pick = ring[size_t(i * L / 8)].second;
      if (taken[size_t(pick)]) {
        // Collision (only possible if L < 8, which is rejected above, or on
        // duplicate ring slots); fall forward to the next free ring entry.
        for (const auto& [a, v] : ring) {
          if (!taken[size_t(v)]) {
            pick = v;
            break;
          }
        }
      }
      taken[size_t(pick)] = 1;
      m.landmarks.push_back(pick);
    }

    const double dirs[12][3] = {
        {0.0, 0.55, 0.84},    // forehead
        {0.0, -0.75, 0.66},   // chin
        {0.0, -0.05, 1.0},    // nose tip
        {0.0, 0.18, 0.98},    // nose bridge
        {-0.35, 0.25, 0.90},  // left eye
        {0.35, 0.25, 0.90},   // right eye
        {-0.38, 0.45, 0.81},  // left brow
        {0.38, 0.45, 0.81},   // right brow
        {-0.62, -0.20, 0.76}, // left cheek
        {0.62, -0.20, 0.76},  // right cheek
        {-0.80, 0.35, 0.49},  // left temple
        {0.80, 0.35, 0.49},   // right temple
    };
    std::vector<char> is_lip(size_t(m.n), 0);
    for (int64_t v : m.lip_verts) is_lip[size_t(v)] = 1;
    for (const auto& d : dirs) {
      V3 dir = norm3({d[0], d[1], d[2]});
      int64_t best = -1;
      double best_dot = -2.0;
      for (int64_t v = 0; v < m.n; ++v) {
        if (taken[size_t(v)] || is_lip[size_t(v)]) continue;
        const V3& u = unit_verts[size_t(v)];
        double dot = u.x * dir.x + u.y * dir.y + u.z * dir.z;
        if (dot > best_dot) {
          best_dot = dot;
          best = v;
        }
      }
      taken[size_t(best)] = 1;
      m.landmarks.push_back(best);
    }
  }
  return m;
}

void FaceModel::save(const std::string& dir) const {
  fs::create_directories(dir);
  save_tensor((fs::path(dir) / "base.tnsr").string(), base);
  save_tensor((fs::path(dir) / "u_id.tnsr").string(), u_id);
  save_tensor((fs::path(dir) / "u_exp.tnsr").string(), u_exp);
  auto save_ids = [&](const std::string& name, const std::vector<int64_t>& v) {
    Tensor t = Tensor::zeros({int64_t(v.size())});
    for (size_t i = 0; i < v.size(); ++i) t[int64_t(i)] = double(v[i]);
    save_tensor((fs::path(dir) / name).string(), t);
  };
  save_ids("tris.tnsr", tris);
  save_ids("lip_verts.tnsr", lip_verts);
  save_ids("landmarks.tnsr", landmarks);
  nlohmann::json meta;
  meta["n"] = n;
  meta["d_id"] = d_id;
  meta["d_exp"] = d_exp;
  meta["n_lip_exp"] = n_lip_exp;
  std::ofstream f((fs::path(dir) / "face_model.json").string(), std::ios::trunc);
  if (!f) throw DataError("cannot write face model metadata in " + dir);
  f << meta.dump(2) << "\n";
}

FaceModel FaceModel::load(const std::string& dir) {
  FaceModel m;
  std::ifstream f((fs::path(dir) / "face_model.json").string());
  if (!f) throw DataError("missing face model metadata in " + dir);
  nlohmann::json meta;
  try {
    f >> meta;
  } catch (const std::exception& e) {
    throw DataError("malformed face model metadata: " + std::string(e.what()));
  }
  m.n = meta.at("n").get<int64_t>();
  m.d_id = meta.at("d_id").get<int64_t>();
  m.d_exp = meta.at("d_exp").get<int64_t>();
  m.n_lip_exp = meta.at("n_lip_exp").get<int64_t>();
  m.base = load_tensor((fs::path(dir) / "base.tnsr").string());
  m.u_id = load_tensor((fs::path(dir) / "u_id.tnsr").string());
  m.u_exp = load_tensor((fs::path(dir) / "u_exp.tnsr").string());
  auto load_ids = [&](const std::string& name) {
    Tensor t = load_tensor((fs::path(dir) / name).string());
    std::vector<int64_t> v(size_t(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) v[size_t(i)] = int64_t(t[i]);
    return v;
  };
  m.tris = load_ids("tris.tnsr");
  m.lip_verts = load_ids("lip_verts.tnsr");
  m.landmarks = load_ids("landmarks.tnsr");
  if (m.base.ndim() != 2 || m.base.dim(0) != m.n || m.base.dim(1) != 3 ||
      m.u_id.dim(0) != 3 * m.n || m.u_id.dim(1) != m.d_id ||
      m.u_exp.dim(0) != 3 * m.n || m.u_exp.dim(1) != m.d_exp) {
    throw DataError("face model tensors are inconsistent in " + dir);
  }
  return m;
}

void save_obj(const std::string& path, const Tensor& verts,
              const std::vector<int64_t>& tris) {
  if (verts.ndim() != 2 || verts.dim(1) != 3) {
    throw DataError("save_obj: vertices must be [n,3]");
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot open for writing: " + path);
  char line[128];
  for (int64_t i = 0; i < verts.dim(0); ++i) {
    std::snprintf(line, sizeof line, "v %.9g %.9g %.9g\n", verts.at2(i, 0),
                  verts.at2(i, 1), verts.at2(i, 2));
    f << line;
  }
  for (size_t i = 0; i + 2 < tris.size(); i += 3) {
    std::snprintf(line, sizeof line, "f %lld %lld %lld\n",
                  (long long)(tris[i] + 1), (long long)(tris[i + 1] + 1),
                  (long long)(tris[i + 2] + 1));
    f << line;
  }
}

}  // namespace vividforge
