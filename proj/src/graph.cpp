#include "vividforge/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vividforge/error.hpp"
#include "vividforge/threading.hpp"

namespace vividforge {

namespace {

constexpr double kLayerNormEps = 1e-5;

// c[M,N] = a[M,K] * b[K,N], accumulating into c (caller zeroes when needed).
void mm_nn(const double* a, const double* b, double* c, int64_t M, int64_t K,
           int64_t N) {
  parallel_for(M, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      double* ci = c + i * N;
      const double* ai = a + i * K;
      for (int64_t k = 0; k < K; ++k) {
        double aik = ai[k];
        if (aik == 0.0) continue;
        const double* bk = b + k * N;
        for (int64_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
      }
    }
  });
}

// c[M,N] += a[M,K] * b[N,K]^T
void mm_nt(const double* a, const double* b, double* c, int64_t M, int64_t K,
           int64_t N) {
  parallel_for(M, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      double* ci = c + i * N;
      const double* ai = a + i * K;
      for (int64_t j = 0; j < N; ++j) {
        const double* bj = b + j * K;
        double acc = 0.0;
        for (int64_t k = 0; k < K; ++k) acc += ai[k] * bj[k];
        ci[j] += acc;
      }
    }
  });
}

// c[M,N] += a[K,M]^T * b[K,N]
void mm_tn(const double* a, const double* b, double* c, int64_t M, int64_t K,
           int64_t N) {
  parallel_for(M, [&](int64_t i0, int64_t i1) {
    for (int64_t i = i0; i < i1; ++i) {
      double* ci = c + i * N;
      for (int64_t k = 0; k < K; ++k) {
        double aki = a[k * M + i];
        if (aki == 0.0) continue;
        const double* bk = b + k * N;
        for (int64_t j = 0; j < N; ++j) ci[j] += aki * bk[j];
      }
    }
  });
}

struct ConvGeom {
  int64_t ci, h, w, co, kh, kw, sh, sw, ph, pw, ho, wo;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int64_t sh, int64_t sw,
                   int64_t ph, int64_t pw, bool transposed) {
  ConvGeom g{};
  g.ci = x.dim(1);
  g.h = x.dim(2);
  g.w = x.dim(3);
  g.sh = sh;
  g.sw = sw;
  g.ph = ph;
  g.pw = pw;
  if (!transposed) {
    g.co = w.dim(0);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.ho = (g.h + 2 * ph - g.kh) / sh + 1;
    g.wo = (g.w + 2 * pw - g.kw) / sw + 1;
  } else {
    g.co = w.dim(1);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.ho = (g.h - 1) * sh - 2 * ph + g.kh;
    g.wo = (g.w - 1) * sw - 2 * pw + g.kw;
  }
  return g;
}

// col[(ci*kh+i)*kw+j, y*wo+x] = img[ci, y*sh-ph+i, x*sw-pw+j] (0 outside).
void im2col(const double* img, double* col, int64_t ci, int64_t h, int64_t w,
            int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph,
            int64_t pw, int64_t ho, int64_t wo) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        double* dst = col + ((c * kh + i) * kw + j) * (ho * wo);
        for (int64_t y = 0; y < ho; ++y) {
          int64_t sy = y * sh - ph + i;
          if (sy < 0 || sy >= h) {
            std::memset(dst + y * wo, 0, size_t(wo) * sizeof(double));
            continue;
          }
          const double* src = img + (c * h + sy) * w;
          for (int64_t x = 0; x < wo; ++x) {
            int64_t sx = x * sw - pw + j;
            dst[y * wo + x] = (sx >= 0 && sx < w) ? src[sx] : 0.0;
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2col.
void col2im(const double* col, double* img, int64_t ci, int64_t h, int64_t w,
            int64_t kh, int64_t kw, int64_t sh, int64_t sw, int64_t ph,
            int64_t pw, int64_t ho, int64_t wo) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t i = 0; i < kh; ++i) {
      for (int64_t j = 0; j < kw; ++j) {
        const double* src = col + ((c * kh + i) * kw + j) * (ho * wo);
        for (int64_t y = 0; y < ho; ++y) {
          int64_t sy = y * sh - ph + i;
          if (sy < 0 || sy >= h) continue;
          double* dst = img + (c * h + sy) * w;
          for (int64_t x = 0; x < wo; ++x) {
            int64_t sx = x * sw - pw + j;
            if (sx >= 0 && sx < w) dst[sx] += src[y * wo + x];
          }
        }
      }
    }
  }
}

int64_t prod(const std::vector<int64_t>& v, size_t lo, size_t hi) {
  int64_t p = 1;
  for (size_t i = lo; i < hi; ++i) p *= v[i];
  return p;
}

}  // namespace

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kAddRow: return "add_row";
    case OpKind::kAddChan: return "add_chan";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kMulRow: return "mul_row";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConvT2d: return "conv2d_t";
    case OpKind::kAvgPool: return "avg_pool";
    case OpKind::kEmbed: return "embed";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kGridSample: return "grid_sample";
    case OpKind::kSum: return "sum";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kStopGrad: return "stop_grad";
    case OpKind::kBadGrad: return "bad_grad";
  }
  return "?";
}

int Graph::push(Node n) {
  if (!n.value.all_finite()) {
    throw NumericError("non-finite values produced by node " +
                       std::to_string(nodes_.size()) + " (" + op_name(n.op) +
                       (n.name.empty() ? std::string() : " '" + n.name + "'") +
                       ")");
  }
  nodes_.push_back(std::move(n));
  return int(nodes_.size()) - 1;
}

int Graph::leaf(Tensor value, bool requires_grad, std::string name) {
  Node n;
  n.op = OpKind::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.name = std::move(name);
  return push(std::move(n));
}

static void check_id(const char* op, int id, int count) {
  if (id < 0 || id >= count) {
    throw DataError(std::string(op) + ": bad node id " + std::to_string(id));
  }
}

#define VF_BINARY_PROLOG(opname)                      \
  check_id(opname, a, size());                        \
  check_id(opname, b, size());                        \
  const Tensor& va = nodes_[size_t(a)].value;         \
  const Tensor& vb = nodes_[size_t(b)].value;         \
  Node n;                                             \
  n.inputs = {a, b};                                  \
  n.requires_grad =                                   \
      nodes_[size_t(a)].requires_grad || nodes_[size_t(b)].requires_grad;

int Graph::add(int a, int b) {
  VF_BINARY_PROLOG("add");
  if (!va.same_shape(vb)) {
    throw DataError("add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  }
  n.op = OpKind::kAdd;
  n.value = va;
  for (int64_t i = 0; i < n.value.numel(); ++i) n.value[i] += vb[i];
  return push(std::move(n));
}

int Graph::sub(int a, int b) {
  VF_BINARY_PROLOG("sub");
  if (!va.same_shape(vb)) {
    throw DataError("sub: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  }
  n.op = OpKind::kSub;
  n.value = va;
  for (int64_t i = 0; i < n.value.numel(); ++i) n.value[i] -= vb[i];
  return push(std::move(n));
}

int Graph::mul(int a, int b) {
  VF_BINARY_PROLOG("mul");
  if (!va.same_shape(vb)) {
    throw DataError("mul: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
  }
  n.op = OpKind::kMul;
  n.value = va;
  for (int64_t i = 0; i < n.value.numel(); ++i) n.value[i] *= vb[i];
  return push(std::move(n));
}

int Graph::add_row(int a, int b) {
  VF_BINARY_PROLOG("add_row");
  if (vb.ndim() != 1 || va.ndim() < 1 || va.shape.back() != vb.dim(0)) {
    throw DataError("add_row: incompatible shapes " + va.shape_str() + " + " +
                    vb.shape_str());
  }
  n.op = OpKind::kAddRow;
  n.value = va;
  int64_t d = vb.dim(0);
  int64_t rows = va.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = n.value.data.data() + r * d;
    for (int64_t i = 0; i < d; ++i) p[i] += vb[i];
  }
  return push(std::move(n));
}

int Graph::mul_row(int a, int b) {
  VF_BINARY_PROLOG("mul_row");
  if (vb.ndim() != 1 || va.ndim() < 1 || va.shape.back() != vb.dim(0)) {
    throw DataError("mul_row: incompatible shapes " + va.shape_str() + " * " +
                    vb.shape_str());
  }
  n.op = OpKind::kMulRow;
  n.value = va;
  int64_t d = vb.dim(0);
  int64_t rows = va.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = n.value.data.data() + r * d;
    for (int64_t i = 0; i < d; ++i) p[i] *= vb[i];
  }
  return push(std::move(n));
}

int Graph::add_chan(int a, int b) {
  VF_BINARY_PROLOG("add_chan");
  if (va.ndim() != 4 || vb.ndim() != 1 || va.dim(1) != vb.dim(0)) {
    throw DataError("add_chan: expects [N,C,H,W] + [C], got " + va.shape_str() +
                    " + " + vb.shape_str());
  }
  n.op = OpKind::kAddChan;
  n.value = va;
  int64_t N = va.dim(0), C = va.dim(1), HW = va.dim(2) * va.dim(3);
  for (int64_t s = 0; s < N; ++s) {
    for (int64_t c = 0; c < C; ++c) {
      double* p = n.value.data.data() + (s * C + c) * HW;
      double bias = vb[c];
      for (int64_t i = 0; i < HW; ++i) p[i] += bias;
    }
  }
  return push(std::move(n));
}

int Graph::scale(int x, double f) {
  check_id("scale", x, size());
  if (!std::isfinite(f)) throw DataError("scale: non-finite factor");
  Node n;
  n.op = OpKind::kScale;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  n.f0 = f;
  n.value = nodes_[size_t(x)].value;
  for (double& v : n.value.data) v *= f;
  return push(std::move(n));
}

int Graph::matmul(int a, int b) {
  VF_BINARY_PROLOG("matmul");
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0)) {
    throw DataError("matmul: incompatible shapes " + va.shape_str() + " x " +
                    vb.shape_str());
  }
  n.op = OpKind::kMatmul;
  n.value = Tensor::zeros({va.dim(0), vb.dim(1)});
  mm_nn(va.data.data(), vb.data.data(), n.value.data.data(), va.dim(0),
        va.dim(1), vb.dim(1));
  return push(std::move(n));
}

int Graph::transpose(int x) {
  check_id("transpose", x, size());
  const Tensor& v = nodes_[size_t(x)].value;
  if (v.ndim() != 2) throw DataError("transpose: expects 2-D, got " + v.shape_str());
  Node n;
  n.op = OpKind::kTranspose;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  n.value = Tensor::zeros({v.dim(1), v.dim(0)});
  for (int64_t i = 0; i < v.dim(0); ++i) {
    for (int64_t j = 0; j < v.dim(1); ++j) {
      n.value.data[size_t(j * v.dim(0) + i)] = v.data[size_t(i * v.dim(1) + j)];
    }
  }
  return push(std::move(n));
}

#define VF_UNARY_PROLOG(opname, kind)            \
  check_id(opname, x, size());                   \
  Node n;                                        \
  n.op = kind;                                   \
  n.inputs = {x};                                \
  n.requires_grad = nodes_[size_t(x)].requires_grad; \
  n.value = nodes_[size_t(x)].value;

int Graph::relu(int x) {
  VF_UNARY_PROLOG("relu", OpKind::kRelu);
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(n));
}

int Graph::tanh(int x) {
  VF_UNARY_PROLOG("tanh", OpKind::kTanh);
  for (double& v : n.value.data) v = std::tanh(v);
  return push(std::move(n));
}

int Graph::sigmoid(int x) {
  VF_UNARY_PROLOG("sigmoid", OpKind::kSigmoid);
  for (double& v : n.value.data) v = 1.0 / (1.0 + std::exp(-v));
  return push(std::move(n));
}

int Graph::softmax(int x) {
  VF_UNARY_PROLOG("softmax", OpKind::kSoftmax);
  int64_t d = n.value.shape.back();
  int64_t rows = n.value.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = n.value.data.data() + r * d;
    double mx = p[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, p[i]);
    double s = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      p[i] = std::exp(p[i] - mx);
      s += p[i];
    }
    for (int64_t i = 0; i < d; ++i) p[i] /= s;
  }
  return push(std::move(n));
}

int Graph::layer_norm(int x) {
  VF_UNARY_PROLOG("layer_norm", OpKind::kLayerNorm);
  int64_t d = n.value.shape.back();
  int64_t rows = n.value.numel() / d;
  for (int64_t r = 0; r < rows; ++r) {
    double* p = n.value.data.data() + r * d;
    double mu = 0.0;
    for (int64_t i = 0; i < d; ++i) mu += p[i];
    mu /= double(d);
    double var = 0.0;
    for (int64_t i = 0; i < d; ++i) var += (p[i] - mu) * (p[i] - mu);
    var /= double(d);
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (int64_t i = 0; i < d; ++i) p[i] = (p[i] - mu) * inv;
  }
  return push(std::move(n));
}

int Graph::conv2d(int x, int w, int stride_h, int stride_w, int pad_h, int pad_w) {
  check_id("conv2d", x, size());
  check_id("conv2d", w, size());
  const Tensor& vx = nodes_[size_t(x)].value;
  const Tensor& vw = nodes_[size_t(w)].value;
  if (vx.ndim() != 4 || vw.ndim() != 4 || vx.dim(1) != vw.dim(1)) {
    throw DataError("conv2d: expects x[N,Ci,H,W], w[Co,Ci,kh,kw]; got " +
                    vx.shape_str() + ", " + vw.shape_str());
  }
  ConvGeom g = conv_geom(vx, vw, stride_h, stride_w, pad_h, pad_w, false);
  if (g.ho <= 0 || g.wo <= 0) throw DataError("conv2d: empty output");
  Node n;
  n.op = OpKind::kConv2d;
  n.inputs = {x, w};
  n.requires_grad =
      nodes_[size_t(x)].requires_grad || nodes_[size_t(w)].requires_grad;
  n.ints = {stride_h, stride_w, pad_h, pad_w};
  int64_t N = vx.dim(0);
  n.value = Tensor::zeros({N, g.co, g.ho, g.wo});
  int64_t ck = g.ci * g.kh * g.kw;
  std::vector<double> col(size_t(ck * g.ho * g.wo));
  for (int64_t s = 0; s < N; ++s) {
    im2col(vx.data.data() + s * g.ci * g.h * g.w, col.data(), g.ci, g.h, g.w,
           g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.ho, g.wo);
    mm_nn(vw.data.data(), col.data(),
          n.value.data.data() + s * g.co * g.ho * g.wo, g.co, ck, g.ho * g.wo);
  }
  return push(std::move(n));
}

int Graph::conv2d_t(int x, int w, int stride_h, int stride_w, int pad_h, int pad_w) {
  check_id("conv2d_t", x, size());
  check_id("conv2d_t", w, size());
  const Tensor& vx = nodes_[size_t(x)].value;
  const Tensor& vw = nodes_[size_t(w)].value;
  if (vx.ndim() != 4 || vw.ndim() != 4 || vx.dim(1) != vw.dim(0)) {
    throw DataError("conv2d_t: expects x[N,Ci,H,W], w[Ci,Co,kh,kw]; got " +
                    vx.shape_str() + ", " + vw.shape_str());
  }
  ConvGeom g = conv_geom(vx, vw, stride_h, stride_w, pad_h, pad_w, true);
  if (g.ho <= 0 || g.wo <= 0) throw DataError("conv2d_t: empty output");
  Node n;
  n.op = OpKind::kConvT2d;
  n.inputs = {x, w};
  n.requires_grad =
      nodes_[size_t(x)].requires_grad || nodes_[size_t(w)].requires_grad;
  n.ints = {stride_h, stride_w, pad_h, pad_w};
  int64_t N = vx.dim(0);
  n.value = Tensor::zeros({N, g.co, g.ho, g.wo});
  int64_t ck = g.co * g.kh * g.kw;
  std::vector<double> col(size_t(ck * g.h * g.w));
  for (int64_t s = 0; s < N; ++s) {
    std::fill(col.begin(), col.end(), 0.0);
    // cols[co*kh*kw, H*W] = w[Ci, co*kh*kw]^T x[Ci, H*W]
    mm_tn(vw.data.data(), vx.data.data() + s * g.ci * g.h * g.w, col.data(),
          ck, g.ci, g.h * g.w);
    col2im(col.data(), n.value.data.data() + s * g.co * g.ho * g.wo, g.co,
           g.ho, g.wo, g.kh, g.kw, g.sh, g.sw, g.ph, g.pw, g.h, g.w);
  }
  return push(std::move(n));
}

int Graph::avg_pool(int x, int k, int s) {
  check_id("avg_pool", x, size());
  const Tensor& v = nodes_[size_t(x)].value;
  if (v.ndim() != 4) throw DataError("avg_pool: expects [N,C,H,W], got " + v.shape_str());
  if (k <= 0 || s <= 0 || (v.dim(2) - k) % s != 0 || (v.dim(3) - k) % s != 0 ||
      v.dim(2) < k || v.dim(3) < k) {
    throw DataError("avg_pool: window k=" + std::to_string(k) + " s=" +
                    std::to_string(s) + " does not tile " + v.shape_str());
  }
  int64_t N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
  int64_t ho = (H - k) / s + 1, wo = (W - k) / s + 1;
  Node n;
  n.op = OpKind::kAvgPool;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  n.ints = {k, s};
  n.value = Tensor::zeros({N, C, ho, wo});
  double inv = 1.0 / double(k * k);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const double* src = v.data.data() + nc * H * W;
    double* dst = n.value.data.data() + nc * ho * wo;
    for (int64_t y = 0; y < ho; ++y) {
      for (int64_t xo = 0; xo < wo; ++xo) {
        double acc = 0.0;
        for (int64_t i = 0; i < k; ++i) {
          for (int64_t j = 0; j < k; ++j) {
            acc += src[(y * s + i) * W + xo * s + j];
          }
        }
        dst[y * wo + xo] = acc * inv;
      }
    }
  }
  return push(std::move(n));
}

int Graph::embed(int table, const std::vector<int64_t>& indices) {
  check_id("embed", table, size());
  const Tensor& v = nodes_[size_t(table)].value;
  if (v.ndim() != 2) throw DataError("embed: table must be 2-D, got " + v.shape_str());
  if (indices.empty()) throw DataError("embed: empty index list");
  Node n;
  n.op = OpKind::kEmbed;
  n.inputs = {table};
  n.requires_grad = nodes_[size_t(table)].requires_grad;
  n.ints = indices;
  int64_t d = v.dim(1);
  n.value = Tensor::zeros({int64_t(indices.size()), d});
  for (size_t i = 0; i < indices.size(); ++i) {
    int64_t idx = indices[i];
    if (idx < 0 || idx >= v.dim(0)) {
      throw DataError("embed: index " + std::to_string(idx) + " out of range [0," +
                      std::to_string(v.dim(0)) + ")");
    }
    std::memcpy(n.value.data.data() + int64_t(i) * d, v.data.data() + idx * d,
                size_t(d) * sizeof(double));
  }
  return push(std::move(n));
}

int Graph::concat(const std::vector<int>& xs, int axis) {
  if (xs.size() < 2) throw DataError("concat: needs at least two inputs");
  for (int x : xs) check_id("concat", x, size());
  const Tensor& first = nodes_[size_t(xs[0])].value;
  if (axis < 0 || axis >= first.ndim()) throw DataError("concat: bad axis");
  std::vector<int64_t> shape = first.shape;
  int64_t total_axis = first.dim(axis);
  for (size_t i = 1; i < xs.size(); ++i) {
    const Tensor& v = nodes_[size_t(xs[i])].value;
    if (v.ndim() != first.ndim()) throw DataError("concat: rank mismatch");
    for (int d = 0; d < first.ndim(); ++d) {
      if (d != axis && v.dim(d) != first.dim(d)) {
        throw DataError("concat: shape mismatch " + first.shape_str() + " vs " +
                        v.shape_str());
      }
    }
    total_axis += v.dim(axis);
  }
  shape[size_t(axis)] = total_axis;
  Node n;
  n.op = OpKind::kConcat;
  n.inputs = xs;
  n.ints = {axis};
  for (int x : xs) n.requires_grad = n.requires_grad || nodes_[size_t(x)].requires_grad;
  n.value = Tensor::zeros(shape);
  int64_t outer = prod(shape, 0, size_t(axis));
  int64_t inner = prod(shape, size_t(axis) + 1, shape.size());
  int64_t dst_axis_off = 0;
  for (int x : xs) {
    const Tensor& v = nodes_[size_t(x)].value;
    int64_t ax = v.dim(axis);
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(
          n.value.data.data() + (o * total_axis + dst_axis_off) * inner,
          v.data.data() + o * ax * inner, size_t(ax * inner) * sizeof(double));
    }
    dst_axis_off += ax;
  }
  return push(std::move(n));
}

int Graph::slice(int x, const std::vector<int64_t>& offsets,
                 const std::vector<int64_t>& sizes) {
  check_id("slice", x, size());
  const Tensor& v = nodes_[size_t(x)].value;
  if (int(offsets.size()) != v.ndim() || int(sizes.size()) != v.ndim()) {
    throw DataError("slice: offsets/sizes rank mismatch for " + v.shape_str());
  }
  for (int d = 0; d < v.ndim(); ++d) {
    if (offsets[size_t(d)] < 0 || sizes[size_t(d)] <= 0 ||
        offsets[size_t(d)] + sizes[size_t(d)] > v.dim(d)) {
      throw DataError("slice: out of bounds on dim " + std::to_string(d) +
                      " of " + v.shape_str());
    }
  }
  Node n;
  n.op = OpKind::kSlice;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  n.ints = offsets;
  n.ints.insert(n.ints.end(), sizes.begin(), sizes.end());
  n.value = Tensor::zeros(sizes);
  // Odometer copy over the sliced region.
  int nd = v.ndim();
  std::vector<int64_t> idx(size_t(nd), 0);
  std::vector<int64_t> stride(size_t(nd), 1);
  for (int d = nd - 2; d >= 0; --d) stride[size_t(d)] = stride[size_t(d) + 1] * v.dim(d + 1);
  int64_t row = sizes[size_t(nd) - 1];
  int64_t out_pos = 0;
  while (true) {
    int64_t src = offsets[size_t(nd) - 1];
    for (int d = 0; d < nd - 1; ++d) src += (offsets[size_t(d)] + idx[size_t(d)]) * stride[size_t(d)];
    std::memcpy(n.value.data.data() + out_pos, v.data.data() + src,
                size_t(row) * sizeof(double));
    out_pos += row;
    int d = nd - 2;
    while (d >= 0 && ++idx[size_t(d)] == sizes[size_t(d)]) idx[size_t(d--)] = 0;
    if (d < 0) break;
  }
  return push(std::move(n));
}

int Graph::reshape(int x, const std::vector<int64_t>& shape) {
  check_id("reshape", x, size());
  const Tensor& v = nodes_[size_t(x)].value;
  Tensor out;
  out.shape = shape;
  if (out.numel() != v.numel()) {
    throw DataError("reshape: element count mismatch " + v.shape_str());
  }
  Node n;
  n.op = OpKind::kReshape;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  out.data = v.data;
  n.value = std::move(out);
  return push(std::move(n));
}

int Graph::grid_sample(int img, int grid) {
  check_id("grid_sample", img, size());
  check_id("grid_sample", grid, size());
  const Tensor& vi = nodes_[size_t(img)].value;
  const Tensor& vg = nodes_[size_t(grid)].value;
  if (vi.ndim() != 4 || vg.ndim() != 4 || vg.dim(3) != 2 || vi.dim(0) != vg.dim(0)) {
    throw DataError("grid_sample: expects img[N,C,H,W], grid[N,Ho,Wo,2]; got " +
                    vi.shape_str() + ", " + vg.shape_str());
  }
  int64_t N = vi.dim(0), C = vi.dim(1), H = vi.dim(2), W = vi.dim(3);
  int64_t ho = vg.dim(1), wo = vg.dim(2);
  Node n;
  n.op = OpKind::kGridSample;
  n.inputs = {img, grid};
  n.requires_grad =
      nodes_[size_t(img)].requires_grad || nodes_[size_t(grid)].requires_grad;
  n.value = Tensor::zeros({N, C, ho, wo});
  for (int64_t s = 0; s < N; ++s) {
    const double* gp = vg.data.data() + s * ho * wo * 2;
    for (int64_t p = 0; p < ho * wo; ++p) {
      double gx = gp[p * 2], gy = gp[p * 2 + 1];
      int64_t x0 = int64_t(std::floor(gx)), y0 = int64_t(std::floor(gy));
      double fx = gx - double(x0), fy = gy - double(y0);
      auto cx = [&](int64_t v) { return std::clamp<int64_t>(v, 0, W - 1); };
      auto cy = [&](int64_t v) { return std::clamp<int64_t>(v, 0, H - 1); };
      int64_t x0c = cx(x0), x1c = cx(x0 + 1), y0c = cy(y0), y1c = cy(y0 + 1);
      for (int64_t c = 0; c < C; ++c) {
        const double* ip = vi.data.data() + (s * C + c) * H * W;
        double v00 = ip[y0c * W + x0c], v01 = ip[y0c * W + x1c];
        double v10 = ip[y1c * W + x0c], v11 = ip[y1c * W + x1c];
        n.value.data[size_t((s * C + c) * ho * wo + p)] =
            (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
            fy * ((1.0 - fx) * v10 + fx * v11);
      }
    }
  }
  return push(std::move(n));
}

int Graph::sum(int x) {
  check_id("sum", x, size());
  const Tensor& v = nodes_[size_t(x)].value;
  double acc = 0.0;
  for (double d : v.data) acc += d;
  Node n;
  n.op = OpKind::kSum;
  n.inputs = {x};
  n.requires_grad = nodes_[size_t(x)].requires_grad;
  n.value = Tensor::scalar(acc);
  return push(std::move(n));
}

int Graph::sqrt(int x, double eps) {
  VF_UNARY_PROLOG("sqrt", OpKind::kSqrt);
  n.f0 = eps;
  for (double& v : n.value.data) v = std::sqrt(v + eps);
  return push(std::move(n));
}

int Graph::stop_grad(int x) {
  check_id("stop_grad", x, size());
  Node n;
  n.op = OpKind::kStopGrad;
  n.inputs = {x};
  n.requires_grad = false;
  n.value = nodes_[size_t(x)].value;
  return push(std::move(n));
}

int Graph::bad_grad(int x) {
  VF_UNARY_PROLOG("bad_grad", OpKind::kBadGrad);
  return push(std::move(n));
}

namespace {

void accumulate(Tensor& dst, const Tensor& shape_like, const double* src) {
  if (dst.data.empty()) {
    dst = Tensor::zeros(shape_like.shape);
  }
  for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

}  // namespace

std::vector<Tensor> Graph::backward(int loss_id) const {
  check_id("backward", loss_id, size());
  if (nodes_[size_t(loss_id)].value.numel() != 1) {
    throw DataError("backward: loss node must be scalar, got " +
                    nodes_[size_t(loss_id)].value.shape_str());
  }
  // Mark nodes that can receive gradient: reachable from the loss through
  // requires_grad inputs.
  std::vector<char> marked(nodes_.size(), 0);
  std::vector<int> stack = {loss_id};
  if (!nodes_[size_t(loss_id)].requires_grad) return std::vector<Tensor>(nodes_.size());
  marked[size_t(loss_id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    const Node& nd = nodes_[size_t(id)];
    if (nd.op == OpKind::kStopGrad) continue;
    for (int in : nd.inputs) {
      if (nodes_[size_t(in)].requires_grad && !marked[size_t(in)]) {
        marked[size_t(in)] = 1;
        stack.push_back(in);
      }
    }
  }

  std::vector<Tensor> grads(nodes_.size());
  grads[size_t(loss_id)] = Tensor::full(nodes_[size_t(loss_id)].value.shape, 1.0);

  for (int id = loss_id; id >= 0; --id) {
    if (!marked[size_t(id)] || grads[size_t(id)].data.empty()) continue;
    const Node& nd = nodes_[size_t(id)];
    const Tensor& g = grads[size_t(id)];
    auto want = [&](int slot) {
      return marked[size_t(nd.inputs[size_t(slot)])] != 0;
    };
    auto gin = [&](int slot) -> Tensor& {
      return grads[size_t(nd.inputs[size_t(slot)])];
    };
    auto vin = [&](int slot) -> const Tensor& {
      return nodes_[size_t(nd.inputs[size_t(slot)])].value;
    };

    switch (nd.op) {
      case OpKind::kLeaf:
      case OpKind::kStopGrad:
        break;
      case OpKind::kAdd: {
        if (want(0)) accumulate(gin(0), vin(0), g.data.data());
        if (want(1)) accumulate(gin(1), vin(1), g.data.data());
        break;
      }
      case OpKind::kSub: {
        if (want(0)) accumulate(gin(0), vin(0), g.data.data());
        if (want(1)) {
          Tensor neg = g;
          for (double& v : neg.data) v = -v;
          accumulate(gin(1), vin(1), neg.data.data());
        }
        break;
      }
      case OpKind::kMul: {
        if (want(0)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) d[i] *= vin(1)[i];
          accumulate(gin(0), vin(0), d.data.data());
        }
        if (want(1)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) d[i] *= vin(0)[i];
          accumulate(gin(1), vin(1), d.data.data());
        }
        break;
      }
      case OpKind::kAddRow: {
        if (want(0)) accumulate(gin(0), vin(0), g.data.data());
        if (want(1)) {
          int64_t d = vin(1).dim(0);
          Tensor acc = Tensor::zeros({d});
          int64_t rows = g.numel() / d;
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t i = 0; i < d; ++i) acc[i] += g[r * d + i];
          }
          accumulate(gin(1), vin(1), acc.data.data());
        }
        break;
      }
      case OpKind::kMulRow: {
        int64_t d = vin(1).dim(0);
        int64_t rows = g.numel() / d;
        if (want(0)) {
          Tensor dx = g;
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t i = 0; i < d; ++i) dx[r * d + i] *= vin(1)[i];
          }
          accumulate(gin(0), vin(0), dx.data.data());
        }
        if (want(1)) {
          Tensor dr = Tensor::zeros({d});
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t i = 0; i < d; ++i) dr[i] += g[r * d + i] * vin(0)[r * d + i];
          }
          accumulate(gin(1), vin(1), dr.data.data());
        }
        break;
      }
      case OpKind::kAddChan: {
        if (want(0)) accumulate(gin(0), vin(0), g.data.data());
        if (want(1)) {
          int64_t N = vin(0).dim(0), C = vin(0).dim(1),
                  HW = vin(0).dim(2) * vin(0).dim(3);
          Tensor dc = Tensor::zeros({C});
          for (int64_t s = 0; s < N; ++s) {
            for (int64_t c = 0; c < C; ++c) {
              const double* p = g.data.data() + (s * C + c) * HW;
              double acc = 0.0;
              for (int64_t i = 0; i < HW; ++i) acc += p[i];
              dc[c] += acc;
            }
          }
          accumulate(gin(1), vin(1), dc.data.data());
        }
        break;
      }
      case OpKind::kScale: {
        if (want(0)) {
          Tensor d = g;
          for (double& v : d.data) v *= nd.f0;
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kMatmul: {
        int64_t M = vin(0).dim(0), K = vin(0).dim(1), N = vin(1).dim(1);
        if (want(0)) {
          if (gin(0).data.empty()) gin(0) = Tensor::zeros(vin(0).shape);
          mm_nt(g.data.data(), vin(1).data.data(), gin(0).data.data(), M, N, K);
        }
        if (want(1)) {
          if (gin(1).data.empty()) gin(1) = Tensor::zeros(vin(1).shape);
          mm_tn(vin(0).data.data(), g.data.data(), gin(1).data.data(), K, M, N);
        }
        break;
      }
      case OpKind::kTranspose: {
        if (want(0)) {
          int64_t R = nd.value.dim(0), C = nd.value.dim(1);
          Tensor d = Tensor::zeros({C, R});
          for (int64_t i = 0; i < R; ++i) {
            for (int64_t j = 0; j < C; ++j) d[j * R + i] = g[i * C + j];
          }
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kRelu: {
        if (want(0)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) {
            if (vin(0)[i] <= 0.0) d[i] = 0.0;
          }
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kTanh: {
        if (want(0)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) {
            d[i] *= 1.0 - nd.value[i] * nd.value[i];
          }
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kSigmoid: {
        if (want(0)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) {
            d[i] *= nd.value[i] * (1.0 - nd.value[i]);
          }
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kSoftmax: {
        if (want(0)) {
          int64_t d = nd.value.shape.back();
          int64_t rows = nd.value.numel() / d;
          Tensor dx = Tensor::zeros(nd.value.shape);
          for (int64_t r = 0; r < rows; ++r) {
            const double* y = nd.value.data.data() + r * d;
            const double* gg = g.data.data() + r * d;
            double dot = 0.0;
            for (int64_t i = 0; i < d; ++i) dot += gg[i] * y[i];
            double* o = dx.data.data() + r * d;
            for (int64_t i = 0; i < d; ++i) o[i] = y[i] * (gg[i] - dot);
          }
          accumulate(gin(0), vin(0), dx.data.data());
        }
        break;
      }
      case OpKind::kLayerNorm: {
        if (want(0)) {
          int64_t d = nd.value.shape.back();
          int64_t rows = nd.value.numel() / d;
          Tensor dx = Tensor::zeros(nd.value.shape);
          for (int64_t r = 0; r < rows; ++r) {
            const double* xr = vin(0).data.data() + r * d;
            const double* y = nd.value.data.data() + r * d;
            const double* gg = g.data.data() + r * d;
            double mu = 0.0;
            for (int64_t i = 0; i < d; ++i) mu += xr[i];
            mu /= double(d);
            double var = 0.0;
            for (int64_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= double(d);
            double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            double gmean = 0.0, gymean = 0.0;
            for (int64_t i = 0; i < d; ++i) {
              gmean += gg[i];
              gymean += gg[i] * y[i];
            }
            gmean /= double(d);
            gymean /= double(d);
            double* o = dx.data.data() + r * d;
            for (int64_t i = 0; i < d; ++i) {
              o[i] = inv * (gg[i] - gmean - y[i] * gymean);
            }
          }
          accumulate(gin(0), vin(0), dx.data.data());
        }
        break;
      }
      case OpKind::kConv2d: {
        ConvGeom geo = conv_geom(vin(0), vin(1), nd.ints[0], nd.ints[1],
                                 nd.ints[2], nd.ints[3], false);
        int64_t N = vin(0).dim(0);
        int64_t ck = geo.ci * geo.kh * geo.kw;
        std::vector<double> col(size_t(ck * geo.ho * geo.wo));
        Tensor dx, dw;
        if (want(0)) dx = Tensor::zeros(vin(0).shape);
        if (want(1)) dw = Tensor::zeros(vin(1).shape);
        std::vector<double> dcol(size_t(ck * geo.ho * geo.wo));
        for (int64_t s = 0; s < N; ++s) {
          const double* gs = g.data.data() + s * geo.co * geo.ho * geo.wo;
          if (want(1)) {
            im2col(vin(0).data.data() + s * geo.ci * geo.h * geo.w, col.data(),
                   geo.ci, geo.h, geo.w, geo.kh, geo.kw, geo.sh, geo.sw,
                   geo.ph, geo.pw, geo.ho, geo.wo);
            mm_nt(gs, col.data(), dw.data.data(), geo.co, geo.ho * geo.wo, ck);
          }
          if (want(0)) {
            std::fill(dcol.begin(), dcol.end(), 0.0);
            mm_tn(vin(1).data.data(), gs, dcol.data(), ck, geo.co,
                  geo.ho * geo.wo);
            col2im(dcol.data(), dx.data.data() + s * geo.ci * geo.h * geo.w,
                   geo.ci, geo.h, geo.w, geo.kh, geo.kw, geo.sh, geo.sw,
                   geo.ph, geo.pw, geo.ho, geo.wo);
          }
        }
        if (want(0)) accumulate(gin(0), vin(0), dx.data.data());
        if (want(1)) accumulate(gin(1), vin(1), dw.data.data());
        break;
      }
      case OpKind::kConvT2d: {
        ConvGeom geo = conv_geom(vin(0), vin(1), nd.ints[0], nd.ints[1],
                                 nd.ints[2], nd.ints[3], true);
        int64_t N = vin(0).dim(0);
        int64_t ck = geo.co * geo.kh * geo.kw;
        std::vector<double> dcol(size_t(ck * geo.h * geo.w));
        Tensor dx, dw;
        if (want(0)) dx = Tensor::zeros(vin(0).shape);
        if (want(1)) dw = Tensor::zeros(vin(1).shape);
        for (int64_t s = 0; s < N; ++s) {
          // Gradient image -> columns (gather with the same geometry).
          im2col(g.data.data() + s * geo.co * geo.ho * geo.wo, dcol.data(),
                 geo.co, geo.ho, geo.wo, geo.kh, geo.kw, geo.sh, geo.sw,
                 geo.ph, geo.pw, geo.h, geo.w);
          if (want(0)) {
            mm_nn(vin(1).data.data(), dcol.data(),
                  dx.data.data() + s * geo.ci * geo.h * geo.w, geo.ci, ck,
                  geo.h * geo.w);
          }
          if (want(1)) {
            mm_nt(vin(0).data.data() + s * geo.ci * geo.h * geo.w, dcol.data(),
                  dw.data.data(), geo.ci, geo.h * geo.w, ck);
          }
        }
        if (want(0)) accumulate(gin(0), vin(0), dx.data.data());
        if (want(1)) accumulate(gin(1), vin(1), dw.data.data());
        break;
      }
      case OpKind::kAvgPool: {
        if (want(0)) {
          int64_t k = nd.ints[0], s = nd.ints[1];
          int64_t N = vin(0).dim(0), C = vin(0).dim(1), H = vin(0).dim(2),
                  W = vin(0).dim(3);
          int64_t ho = nd.value.dim(2), wo = nd.value.dim(3);
          Tensor dx = Tensor::zeros(vin(0).shape);
          double inv = 1.0 / double(k * k);
          for (int64_t nc = 0; nc < N * C; ++nc) {
            const double* gs = g.data.data() + nc * ho * wo;
            double* dst = dx.data.data() + nc * H * W;
            for (int64_t y = 0; y < ho; ++y) {
              for (int64_t xo = 0; xo < wo; ++xo) {
                double v = gs[y * wo + xo] * inv;
                for (int64_t i = 0; i < k; ++i) {
                  for (int64_t j = 0; j < k; ++j) {
                    dst[(y * s + i) * W + xo * s + j] += v;
                  }
                }
              }
            }
          }
          accumulate(gin(0), vin(0), dx.data.data());
        }
        break;
      }
      case OpKind::kEmbed: {
        if (want(0)) {
          int64_t d = vin(0).dim(1);
          Tensor dt = Tensor::zeros(vin(0).shape);
          for (size_t i = 0; i < nd.ints.size(); ++i) {
            int64_t row = nd.ints[i];
            for (int64_t j = 0; j < d; ++j) {
              dt[row * d + j] += g[int64_t(i) * d + j];
            }
          }
          accumulate(gin(0), vin(0), dt.data.data());
        }
        break;
      }
      case OpKind::kConcat: {
        int axis = int(nd.ints[0]);
        int64_t inner = prod(nd.value.shape, size_t(axis) + 1, nd.value.shape.size());
        int64_t outer = prod(nd.value.shape, 0, size_t(axis));
        int64_t total_axis = nd.value.dim(axis);
        int64_t axis_off = 0;
        for (size_t slot = 0; slot < nd.inputs.size(); ++slot) {
          const Tensor& v = nodes_[size_t(nd.inputs[slot])].value;
          int64_t ax = v.dim(axis);
          if (marked[size_t(nd.inputs[slot])]) {
            Tensor d = Tensor::zeros(v.shape);
            for (int64_t o = 0; o < outer; ++o) {
              std::memcpy(d.data.data() + o * ax * inner,
                          g.data.data() + (o * total_axis + axis_off) * inner,
                          size_t(ax * inner) * sizeof(double));
            }
            accumulate(grads[size_t(nd.inputs[slot])], v, d.data.data());
          }
          axis_off += ax;
        }
        break;
      }
      case OpKind::kSlice: {
        if (want(0)) {
          const Tensor& v = vin(0);
          int nd2 = v.ndim();
          std::vector<int64_t> off(nd.ints.begin(), nd.ints.begin() + nd2);
          std::vector<int64_t> sz(nd.ints.begin() + nd2, nd.ints.end());
          Tensor dx = Tensor::zeros(v.shape);
          std::vector<int64_t> stride(size_t(nd2), 1);
          for (int d = nd2 - 2; d >= 0; --d) {
            stride[size_t(d)] = stride[size_t(d) + 1] * v.dim(d + 1);
          }
          std::vector<int64_t> idx(size_t(nd2), 0);
          int64_t row = sz[size_t(nd2) - 1];
          int64_t src_pos = 0;
          while (true) {
            int64_t dst = off[size_t(nd2) - 1];
            for (int d = 0; d < nd2 - 1; ++d) {
              dst += (off[size_t(d)] + idx[size_t(d)]) * stride[size_t(d)];
            }
            for (int64_t i = 0; i < row; ++i) dx[dst + i] += g[src_pos + i];
            src_pos += row;
            int d = nd2 - 2;
            while (d >= 0 && ++idx[size_t(d)] == sz[size_t(d)]) idx[size_t(d--)] = 0;
            if (d < 0) break;
          }
          accumulate(gin(0), v, dx.data.data());
        }
        break;
      }
      case OpKind::kReshape: {
        if (want(0)) accumulate(gin(0), vin(0), g.data.data());
        break;
      }
      case OpKind::kGridSample: {
        const Tensor& vi = vin(0);
        const Tensor& vg = vin(1);
        int64_t N = vi.dim(0), C = vi.dim(1), H = vi.dim(2), W = vi.dim(3);
        int64_t ho = vg.dim(1), wo = vg.dim(2);
        Tensor dimg, dgrid;
        if (want(0)) dimg = Tensor::zeros(vi.shape);
        if (want(1)) dgrid = Tensor::zeros(vg.shape);
        for (int64_t s = 0; s < N; ++s) {
          const double* gp = vg.data.data() + s * ho * wo * 2;
          for (int64_t p = 0; p < ho * wo; ++p) {
            double gx = gp[p * 2], gy = gp[p * 2 + 1];
            int64_t x0 = int64_t(std::floor(gx)), y0 = int64_t(std::floor(gy));
            double fx = gx - double(x0), fy = gy - double(y0);
            auto cxf = [&](int64_t v) { return std::clamp<int64_t>(v, 0, W - 1); };
            auto cyf = [&](int64_t v) { return std::clamp<int64_t>(v, 0, H - 1); };
            int64_t x0c = cxf(x0), x1c = cxf(x0 + 1), y0c = cyf(y0), y1c = cyf(y0 + 1);
            double dgx = 0.0, dgy = 0.0;
            for (int64_t c = 0; c < C; ++c) {
              double go = g[(s * C + c) * ho * wo + p];
              if (go == 0.0) continue;
              const double* ip = vi.data.data() + (s * C + c) * H * W;
              double v00 = ip[y0c * W + x0c], v01 = ip[y0c * W + x1c];
              double v10 = ip[y1c * W + x0c], v11 = ip[y1c * W + x1c];
              if (want(0)) {
                double* dp = dimg.data.data() + (s * C + c) * H * W;
                dp[y0c * W + x0c] += go * (1.0 - fy) * (1.0 - fx);
                dp[y0c * W + x1c] += go * (1.0 - fy) * fx;
                dp[y1c * W + x0c] += go * fy * (1.0 - fx);
                dp[y1c * W + x1c] += go * fy * fx;
              }
              dgx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
              dgy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if (want(1)) {
              dgrid[(s * ho * wo + p) * 2] += dgx;
              dgrid[(s * ho * wo + p) * 2 + 1] += dgy;
            }
          }
        }
        if (want(0)) accumulate(gin(0), vi, dimg.data.data());
        if (want(1)) accumulate(gin(1), vg, dgrid.data.data());
        break;
      }
      case OpKind::kSum: {
        if (want(0)) {
          Tensor d = Tensor::full(vin(0).shape, g[0]);
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kSqrt: {
        if (want(0)) {
          Tensor d = g;
          for (int64_t i = 0; i < d.numel(); ++i) d[i] *= 0.5 / nd.value[i];
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
      case OpKind::kBadGrad: {
        if (want(0)) {
          Tensor d = g;
          for (double& v : d.data) v *= 1.01;
          accumulate(gin(0), vin(0), d.data.data());
        }
        break;
      }
    }
  }
  return grads;
}

std::map<std::string, Tensor> Graph::param_grads(int loss_id) const {
  std::vector<Tensor> grads = backward(loss_id);
  std::map<std::string, Tensor> out;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.op == OpKind::kLeaf && n.requires_grad && !n.name.empty()) {
      if (out.count(n.name)) {
        throw DataError("duplicate parameter leaf '" + n.name + "' in graph");
      }
      out[n.name] = grads[i].data.empty() ? Tensor::zeros(n.value.shape)
                                          : std::move(grads[i]);
    }
  }
  return out;
}

}  // namespace vividforge
