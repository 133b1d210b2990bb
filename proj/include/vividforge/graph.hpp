#pragma once

#include <map>
#include <string>
#include <vector>

#include "vividforge/tensor.hpp"

namespace vividforge {

enum class OpKind {
  kLeaf,
  kAdd,
  kAddRow,   // x[..,D] + r[D]
  kAddChan,  // x[N,C,H,W] + c[C]
  kSub,
  kMul,
  kMulRow,  // x[..,D] * r[D]
  kScale,   // x * constant
  kMatmul,
  kTranspose,
  kRelu,
  kTanh,
  kSigmoid,
  kSoftmax,    // over last dim
  kLayerNorm,  // over last dim, eps 1e-5, no affine
  kConv2d,
  kConvT2d,
  kAvgPool,
  kEmbed,
  kConcat,
  kSlice,
  kReshape,
  kGridSample,
  kSum,   // all elements -> [1]
  kSqrt,  // sqrt(x + eps_attr)
  kStopGrad,
  kBadGrad,  // identity forward, backward deliberately off by 1% (test fixture)
};

const char* op_name(OpKind k);

struct Node {
  OpKind op = OpKind::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  bool requires_grad = false;
  std::string name;            // non-empty tags a named parameter leaf
  std::vector<int64_t> ints;   // op attrs: conv geometry, embed indices, slice bounds, concat axis
  double f0 = 0.0;             // op attr: scale factor / sqrt eps
};

// Define-by-run reverse-mode graph over Tensor. Node ids are ints; inputs
// always have smaller ids, so node order is a topological order. Every op
// checks its output for non-finite values and throws NumericError naming the
// node, so a NaN is caught where it is born. backward() is const and can be
// called several times on one graph with different loss nodes.
class Graph {
 public:
  int leaf(Tensor value, bool requires_grad = false, std::string name = {});
  int constant(Tensor value) { return leaf(std::move(value), false); }

  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int add_row(int x, int r);
  int add_chan(int x, int c);
  int mul_row(int x, int r);
  int scale(int x, double f);
  int matmul(int a, int b);
  int transpose(int x);
  int relu(int x);
  int tanh(int x);
  int sigmoid(int x);
  int softmax(int x);
  int layer_norm(int x);
  int conv2d(int x, int w, int stride_h, int stride_w, int pad_h, int pad_w);
  int conv2d_t(int x, int w, int stride_h, int stride_w, int pad_h, int pad_w);
  int avg_pool(int x, int k, int s);
  int embed(int table, const std::vector<int64_t>& indices);
  int concat(const std::vector<int>& xs, int axis);
  int slice(int x, const std::vector<int64_t>& offsets,
            const std::vector<int64_t>& sizes);
  int reshape(int x, const std::vector<int64_t>& shape);
  // img [N,C,H,W], grid [N,Ho,Wo,2]; grid[...,0] is x (column) and
  // grid[...,1] is y (row), both in pixel-index coordinates. Bilinear with
  // border clamp.
  int grid_sample(int img, int grid);
  int sum(int x);
  int sqrt(int x, double eps = 0.0);
  int stop_grad(int x);
  int bad_grad(int x);

  const Tensor& value(int id) const { return nodes_[size_t(id)].value; }
  const Node& node(int id) const { return nodes_[size_t(id)]; }
  int size() const { return int(nodes_.size()); }

  // Reverse sweep from a scalar loss node. Returns one gradient tensor per
  // node id (empty tensors where no gradient is needed or none flows).
  std::vector<Tensor> backward(int loss_id) const;

  // Gradients for every named requires_grad leaf in the graph; leaves the
  // loss never reaches get zeros (so optimizer state still advances).
  std::map<std::string, Tensor> param_grads(int loss_id) const;

 private:
  int push(Node n);
  std::vector<Node> nodes_;
};

}  // namespace vividforge
