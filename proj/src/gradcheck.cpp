#include "vividforge/gradcheck.hpp"

#include <cmath>

#include "vividforge/error.hpp"

namespace vividforge {

namespace {

double eval_loss(const LossBuilder& build, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(g.leaf(t, false));
  int loss = build(g, ids);
  const Tensor& v = g.value(loss);
  if (v.numel() != 1) throw DataError("gradcheck: loss must be scalar");
  return v[0];
}

}  // namespace

GradCheckReport check_gradients(const LossBuilder& build,
                                const std::vector<Tensor>& inputs, double eps,
                                double tol) {
  // Analytic pass.
  Graph g;
  std::vector<int> ids;
  for (const Tensor& t : inputs) ids.push_back(g.leaf(t, true));
  int loss = build(g, ids);
  if (g.value(loss).numel() != 1) throw DataError("gradcheck: loss must be scalar");
  std::vector<Tensor> grads = g.backward(loss);

  GradCheckReport rep;
  std::vector<Tensor> work = inputs;
  for (size_t k = 0; k < work.size(); ++k) {
    const Tensor& analytic_full =
        grads[size_t(ids[k])].data.empty()
            ? Tensor::zeros(inputs[k].shape)
            : grads[size_t(ids[k])];
    for (int64_t e = 0; e < work[k].numel(); ++e) {
      double keep = work[k][e];
      work[k][e] = keep + eps;
      double up = eval_loss(build, work);
      work[k][e] = keep - eps;
      double down = eval_loss(build, work);
      work[k][e] = keep;
      rep.evaluations += 2;
      double numeric = (up - down) / (2.0 * eps);
      double analytic = analytic_full[e];
      double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
      double rel = std::fabs(analytic - numeric) / denom;
      if (rel > rep.worst_rel_err) {
        rep.worst_rel_err = rel;
        rep.worst_input = int(k);
        rep.worst_element = e;
      }
    }
  }
  rep.pass = rep.worst_rel_err <= tol;
  return rep;
}

}  // namespace vividforge
