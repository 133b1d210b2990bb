#include "vividforge/params.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "vividforge/error.hpp"
#include "vividforge/tnsr_io.hpp"

namespace fs = std::filesystem;

namespace vividforge {

void ParamStore::add(const std::string& name, Tensor t) {
  if (tensors.count(name)) throw DataError("duplicate parameter '" + name + "'");
  tensors.emplace(name, std::move(t));
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw DataError("unknown parameter '" + name + "'");
  return it->second;
}

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [k, t] : tensors) n += t.numel();
  return n;
}

void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads,
               AdamState& state) {
  state.step += 1;
  double t = double(state.step);
  double bc1 = 1.0 - std::pow(state.beta1, t);
  double bc2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (!p.same_shape(g)) {
      throw DataError("gradient shape " + g.shape_str() + " does not match parameter '" +
                      name + "' " + p.shape_str());
    }
    if (!g.all_finite()) {
      throw NumericError("non-finite gradient for parameter '" + name + "'");
    }
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor::zeros(p.shape)).first;
      state.v.emplace(name, Tensor::zeros(p.shape));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

namespace {

std::string tensor_file(const std::string& name) { return name + ".tnsr"; }

}  // namespace

void save_checkpoint(const std::string& dir, const ParamStore& params,
                     const AdamState* opt, const nlohmann::json& meta) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "vividforge-checkpoint-v1";
  manifest["meta"] = meta;
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, t] : params.tensors) {
    shapes[name] = t.shape;
    save_tensor((fs::path(dir) / tensor_file(name)).string(), t);
  }
  manifest["params"] = shapes;
  if (opt) {
    nlohmann::json o;
    o["step"] = opt->step;
    o["lr"] = opt->lr;
    o["beta1"] = opt->beta1;
    o["beta2"] = opt->beta2;
    o["eps"] = opt->eps;
    for (const auto& [name, t] : opt->m) {
      save_tensor((fs::path(dir) / ("opt.m." + tensor_file(name))).string(), t);
    }
    for (const auto& [name, t] : opt->v) {
      save_tensor((fs::path(dir) / ("opt.v." + tensor_file(name))).string(), t);
    }
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, t] : opt->m) names.push_back(name);
    o["moment_names"] = names;
    manifest["optimizer"] = o;
  }
  std::ofstream f((fs::path(dir) / "manifest.json").string(), std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

ParamStore load_checkpoint(const std::string& dir, AdamState* opt,
                           nlohmann::json* meta) {
  fs::path mp = fs::path(dir) / "manifest.json";
  std::ifstream f(mp);
  if (!f) throw DataError("missing checkpoint manifest: " + mp.string());
  nlohmann::json manifest;
  try {
    f >> manifest;
  } catch (const std::exception& e) {
    throw DataError("malformed checkpoint manifest " + mp.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "vividforge-checkpoint-v1") {
    throw DataError("unrecognized checkpoint format in " + mp.string());
  }
  ParamStore params;
  for (auto& [name, shape] : manifest.at("params").items()) {
    Tensor t = load_tensor((fs::path(dir) / tensor_file(name)).string());
    std::vector<int64_t> want = shape.get<std::vector<int64_t>>();
    if (t.shape != want) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + t.shape_str() +
                      " but manifest says otherwise");
    }
    params.add(name, std::move(t));
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  if (opt && manifest.contains("optimizer")) {
    const auto& o = manifest["optimizer"];
    opt->step = o.value("step", int64_t(0));
    opt->lr = o.value("lr", 1e-3);
    opt->beta1 = o.value("beta1", 0.9);
    opt->beta2 = o.value("beta2", 0.999);
    opt->eps = o.value("eps", 1e-8);
    for (const auto& name : o.value("moment_names", std::vector<std::string>{})) {
      opt->m[name] = load_tensor((fs::path(dir) / ("opt.m." + tensor_file(name))).string());
      opt->v[name] = load_tensor((fs::path(dir) / ("opt.v." + tensor_file(name))).string());
    }
  }
  return params;
}

}  // namespace vividforge
