#pragma once

#include <map>
#include <string>

#include "json.hpp"
#include "vividforge/tensor.hpp"

namespace vividforge {

// Named parameter tensors. Names are dotted paths like "bsvo.trunk.q.w" and
// double as checkpoint file names.
struct ParamStore {
  std::map<std::string, Tensor> tensors;

  void add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  int64_t total_elements() const;
};

struct AdamState {
  int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, Tensor> m, v;
};

// One bias-corrected Adam update over every (name, grad) pair. Parameters
// without an entry in grads are left alone. Throws NumericError on non-finite
// gradients.
void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
               AdamState& state);

// Checkpoint directory: manifest.json plus one .tnsr per tensor. The manifest
// records tensor shapes (checked on load), optimizer state names, and caller
// metadata.
void save_checkpoint(const std::string& dir, const ParamStore& params,
                     const AdamState* opt, const nlohmann::json& meta);

ParamStore load_checkpoint(const std::string& dir, AdamState* opt = nullptr,
                           nlohmann::json* meta = nullptr);

}  // namespace vividforge
