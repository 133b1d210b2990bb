#include "vividforge/nn.hpp"

#include <cmath>

#include "vividforge/error.hpp"

namespace vividforge {

int ModelContext::param(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  bool rg = trainable ? trainable(name) : true;
  int id = g.leaf(store.at(name), rg, rg ? name : std::string());
  cache_.emplace(name, id);
  return id;
}

Tensor init_uniform(uint64_t seed, const std::string& name,
                    std::vector<int64_t> shape, int64_t fan_in) {
  Rng rng(seed, name);
  double bound = 1.0 / std::sqrt(double(fan_in));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.next_uniform(-bound, bound);
  return t;
}

void Linear::init(ParamStore& store, uint64_t seed) const {
  store.add(name + ".w", zero_init ? Tensor::zeros({in, out})
                                   : init_uniform(seed, name + ".w", {in, out}, in));
  if (bias) store.add(name + ".b", Tensor::zeros({out}));
}

int Linear::forward(ModelContext& ctx, int x) const {
  int y = ctx.g.matmul(x, ctx.param(name + ".w"));
  if (bias) y = ctx.g.add_row(y, ctx.param(name + ".b"));
  return y;
}

void LayerNormLayer::init(ParamStore& store, uint64_t seed) const {
  (void)seed;
  store.add(name + ".g", Tensor::full({dim}, 1.0));
  store.add(name + ".b", Tensor::zeros({dim}));
}

int LayerNormLayer::forward(ModelContext& ctx, int x) const {
  int y = ctx.g.layer_norm(x);
  y = ctx.g.mul_row(y, ctx.param(name + ".g"));
  return ctx.g.add_row(y, ctx.param(name + ".b"));
}

int attention(Graph& g, int q, int k, int v, int mask_id) {
  int64_t dh = g.value(q).dim(1);
  int scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(double(dh)));
  if (mask_id >= 0) scores = g.add(scores, mask_id);
  return g.matmul(g.softmax(scores), v);
}

Tensor causal_mask(int64_t t) {
  Tensor m = Tensor::zeros({t, t});
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = i + 1; j < t; ++j) m.at2(i, j) = -1e30;
  }
  return m;
}

Tensor sinusoid_positions(int64_t t, int64_t dim) {
  Tensor p = Tensor::zeros({t, dim});
  for (int64_t pos = 0; pos < t; ++pos) {
    for (int64_t i = 0; i < dim; i += 2) {
      double rate = std::pow(10000.0, double(i) / double(dim));
      p.at2(pos, i) = std::sin(double(pos) / rate);
      if (i + 1 < dim) p.at2(pos, i + 1) = std::cos(double(pos) / rate);
    }
  }
  return p;
}

MultiHeadAttention::MultiHeadAttention(std::string n, int64_t d, int h)
    : name(std::move(n)), dim(d), heads(h) {
  wq = {name + ".q", d, d};
  wk = {name + ".k", d, d};
  wv = {name + ".v", d, d};
  wo = {name + ".o", d, d};
}

void MultiHeadAttention::init(ParamStore& store, uint64_t seed) const {
  wq.init(store, seed);
  wk.init(store, seed);
  wv.init(store, seed);
  wo.init(store, seed);
}

int MultiHeadAttention::forward(ModelContext& ctx, int xq, int xkv,
                                int mask_id) const {
  if (dim % heads != 0) throw DataError("attention dim must divide heads");
  Graph& g = ctx.g;
  int q = wq.forward(ctx, xq);
  int k = wk.forward(ctx, xkv);
  int v = wv.forward(ctx, xkv);
  int64_t tq = g.value(q).dim(0), tk = g.value(k).dim(0);
  int64_t dh = dim / heads;
  std::vector<int> outs;
  for (int h = 0; h < heads; ++h) {
    int qh = g.slice(q, {0, h * dh}, {tq, dh});
    int kh = g.slice(k, {0, h * dh}, {tk, dh});
    int vh = g.slice(v, {0, h * dh}, {tk, dh});
    outs.push_back(attention(g, qh, kh, vh, mask_id));
  }
  int cat = heads == 1 ? outs[0] : g.concat(outs, 1);
  return wo.forward(ctx, cat);
}

TransformerBlock::TransformerBlock(std::string n, int64_t d, int h, int64_t ff,
                                   bool cross)
    : name(std::move(n)), dim(d), heads(h), ff_hidden(ff), with_cross(cross) {
  self_attn = MultiHeadAttention(name + ".self", d, h);
  cross_attn = MultiHeadAttention(name + ".cross", d, h);
  ln1 = {name + ".ln1", d};
  ln2 = {name + ".ln2", d};
  ln3 = {name + ".ln3", d};
  ff1 = {name + ".ff1", d, ff};
  ff2 = {name + ".ff2", ff, d};
}

void TransformerBlock::init(ParamStore& store, uint64_t seed) const {
  self_attn.init(store, seed);
  if (with_cross) cross_attn.init(store, seed);
  ln1.init(store, seed);
  if (with_cross) ln2.init(store, seed);
  ln3.init(store, seed);
  ff1.init(store, seed);
  ff2.init(store, seed);
}

int TransformerBlock::forward(ModelContext& ctx, int x, int mem_id,
                              int self_mask, int cross_mask) const {
  Graph& g = ctx.g;
  int nx = ln1.forward(ctx, x);
  int h = g.add(x, self_attn.forward(ctx, nx, nx, self_mask));
  if (with_cross && mem_id >= 0) {
    h = g.add(h, cross_attn.forward(ctx, ln2.forward(ctx, h), mem_id, cross_mask));
  }
  int f = ff2.forward(ctx, g.relu(ff1.forward(ctx, ln3.forward(ctx, h))));
  return g.add(h, f);
}

void Conv2dLayer::init(ParamStore& store, uint64_t seed) const {
  int64_t fan_in = cin * k * k;
  store.add(name + ".w",
            zero_init ? Tensor::zeros({cout, cin, k, k})
                      : init_uniform(seed, name + ".w", {cout, cin, k, k}, fan_in));
  if (bias) store.add(name + ".b", Tensor::zeros({cout}));
}

int Conv2dLayer::forward(ModelContext& ctx, int x) const {
  int y = ctx.g.conv2d(x, ctx.param(name + ".w"), stride, stride, pad, pad);
  if (bias) y = ctx.g.add_chan(y, ctx.param(name + ".b"));
  return y;
}

void ConvT2dLayer::init(ParamStore& store, uint64_t seed) const {
  int64_t fan_in = cin * k * k;
  store.add(name + ".w",
            zero_init ? Tensor::zeros({cin, cout, k, k})
                      : init_uniform(seed, name + ".w", {cin, cout, k, k}, fan_in));
  if (bias) store.add(name + ".b", Tensor::zeros({cout}));
}

int ConvT2dLayer::forward(ModelContext& ctx, int x) const {
  int y = ctx.g.conv2d_t(x, ctx.param(name + ".w"), stride, stride, pad, pad);
  if (bias) y = ctx.g.add_chan(y, ctx.param(name + ".b"));
  return y;
}

}  // namespace vividforge
