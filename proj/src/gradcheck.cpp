#include "fundus/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "fundus/errors.hpp"

namespace fundus {

GradCheckResult finite_difference_check(const std::function<double()>& objective, std::span<Tensor* const> probes,
                                        std::span<const std::string> names, std::span<const Tensor> analytic,
                                        double step, std::size_t max_probes) {
  if (probes.size() != analytic.size() || probes.size() != names.size()) {
    throw ArgumentError("finite_difference_check: probes, names and gradients must align");
  }
  if (!(step > 0.0)) throw ArgumentError("finite_difference_check: step must be positive");
  GradCheckResult result;
  for (std::size_t t = 0; t < probes.size(); ++t) {
    Tensor& x = *probes[t];
    if (analytic[t].shape() != x.shape()) {
      throw DimensionError("finite_difference_check: gradient of '" + names[t] + "' has shape " +
                           shape_str(analytic[t].shape()) + ", tensor has " + shape_str(x.shape()));
    }
    const std::size_t n = x.size();
    const std::size_t count = (max_probes == 0 || max_probes >= n) ? n : max_probes;
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = count == n ? k : (k * n) / count;
      const float original = x[i];
      const float plus = static_cast<float>(original + step);
      const float minus = static_cast<float>(original - step);
      x[i] = plus;
      const double f_plus = objective();
      x[i] = minus;
      const double f_minus = objective();
      x[i] = original;
      // The float-rounded perturbation is the true step.
      const double central = (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      const double err = std::abs(analytic[t][i] - central) / std::max(1.0, std::abs(central));
      ++result.probes;
      if (result.worst.empty() || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = names[t] + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

double kink_distance(const OpNode& node, std::span<const Tensor> inputs) {
  double best = std::numeric_limits<double>::infinity();
  if (inputs.empty()) return best;
  const Tensor& x = inputs[0];
  if (node.kind == OpKind::ReLU) {
    for (float v : x.data()) best = std::min(best, std::abs(static_cast<double>(v)));
  } else if (node.kind == OpKind::MaxPool2d && x.rank() == 4) {
    const int h = x.dim(2), w = x.dim(3), k = node.window, s = node.stride;
    const int oh = (h - k) / s + 1, ow = (w - k) / s + 1;
    for (int p = 0; p < x.dim(0) * x.dim(1); ++p) {
      const float* plane = x.data().data() + static_cast<std::size_t>(p) * h * w;
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo) {
          double top = -std::numeric_limits<double>::infinity(), second = top;
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const double v = plane[(y * s + i) * w + xo * s + j];
              if (v > top) {
                second = top;
                top = v;
              } else if (v > second) {
                second = v;
              }
            }
          if (k * k > 1) best = std::min(best, (top - second) / 2.0);
        }
    }
  }
  return best;
}

GradCheckResult finite_difference_check(const OpNode& node, std::span<const Tensor> inputs, double step,
                                        ops::Mode mode, std::uint64_t seed, std::size_t max_probes) {
  if (!node.differentiable()) {
    throw UnsupportedError(std::string("finite_difference_check: '") + op_kind_name(node.kind) +
                           "' is not a differentiable operator");
  }
  if (kink_distance(node, inputs) < 10.0 * step) {
    throw ArgumentError("finite_difference_check: input within 10*step of a kink; resample");
  }
  OpNode probe_node = node;
  std::vector<Tensor> xs(inputs.begin(), inputs.end());
  std::vector<const Tensor*> args;
  for (const auto& x : xs) args.push_back(&x);

  NodeAux aux;
  const Tensor y = evaluate_node(probe_node, args, mode, &aux);
  Tensor weights(y.shape());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = static_cast<float>(dist(rng));

  const NodeGrads g = backward_node(probe_node, args, y, aux, mode, weights);

  std::vector<Tensor*> probes;
  std::vector<std::string> names;
  std::vector<Tensor> analytic;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    probes.push_back(&xs[i]);
    names.push_back("input" + std::to_string(i));
    analytic.push_back(g.inputs.at(i));
  }
  for (std::size_t i = 0; i < probe_node.params.size(); ++i) {
    probes.push_back(&probe_node.params[i].value);
    names.push_back(probe_node.params[i].name);
    analytic.push_back(g.params.at(i));
  }
  auto objective = [&] { return dot(evaluate_node(probe_node, args, mode), weights); };
  return finite_difference_check(objective, probes, names, analytic, step, max_probes);
}

}  // namespace fundus
