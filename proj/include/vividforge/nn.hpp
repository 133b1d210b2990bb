#pragma once

#include <functional>
#include <map>
#include <string>

#include "vividforge/graph.hpp"
#include "vividforge/params.hpp"
#include "vividforge/rng.hpp"

namespace vividforge {

// Bridges a ParamStore and a Graph for one forward build. Each parameter
// becomes exactly one leaf per graph (cached), so layers can be reused freely.
// `trainable` filters which parameters get gradients; frozen parameters enter
// the graph as anonymous constants.
struct ModelContext {
  Graph& g;
  const ParamStore& store;
  std::function<bool(const std::string&)> trainable;

  ModelContext(Graph& graph, const ParamStore& params,
               std::function<bool(const std::string&)> filter = nullptr)
      : g(graph), store(params), trainable(std::move(filter)) {}

  int param(const std::string& name);

 private:
  std::map<std::string, int> cache_;
};

// U(-1/sqrt(fan_in), +1/sqrt(fan_in)) from a named stream.
Tensor init_uniform(uint64_t seed, const std::string& name,
                    std::vector<int64_t> shape, int64_t fan_in);

struct Linear {
  std::string name;
  int64_t in = 0, out = 0;
  bool bias = true;
  bool zero_init = false;

  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int x) const;  // [T,in] -> [T,out]
};

struct LayerNormLayer {
  std::string name;
  int64_t dim = 0;

  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int x) const;
};

// Single-head scaled dot-product attention from already-projected q/k/v.
// mask_id < 0 means no mask; otherwise an additive [Tq,Tk] node.
int attention(Graph& g, int q, int k, int v, int mask_id);

// [T,T] additive mask: 0 where key index <= query index, -1e30 above.
Tensor causal_mask(int64_t t);

// Standard sinusoidal position table [T,dim].
Tensor sinusoid_positions(int64_t t, int64_t dim);

struct MultiHeadAttention {
  std::string name;
  int64_t dim = 0;
  int heads = 1;
  Linear wq, wk, wv, wo;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::string n, int64_t d, int h);
  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int xq, int xkv, int mask_id) const;
};

// Pre-norm transformer block: self-attention, optional cross-attention when
// mem_id >= 0, then a two-layer feed-forward with relu.
struct TransformerBlock {
  std::string name;
  int64_t dim = 0;
  int heads = 1;
  int64_t ff_hidden = 0;
  bool with_cross = true;
  MultiHeadAttention self_attn, cross_attn;
  LayerNormLayer ln1, ln2, ln3;
  Linear ff1, ff2;

  TransformerBlock() = default;
  TransformerBlock(std::string n, int64_t d, int h, int64_t ff, bool cross);
  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int x, int mem_id, int self_mask,
              int cross_mask) const;
};

struct Conv2dLayer {
  std::string name;
  int64_t cin = 0, cout = 0;
  int k = 3, stride = 1, pad = 1;
  bool bias = true;
  bool zero_init = false;

  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int x) const;
};

struct ConvT2dLayer {
  std::string name;
  int64_t cin = 0, cout = 0;
  int k = 4, stride = 2, pad = 1;
  bool bias = true;
  bool zero_init = false;

  void init(ParamStore& store, uint64_t seed) const;
  int forward(ModelContext& ctx, int x) const;
};

}  // namespace vividforge
