#include "fundus/gradsuite.hpp"

#include <cmath>
#include <random>

#include "fundus/errors.hpp"
#include "fundus/losses.hpp"

namespace fundus::gradsuite {

namespace {

constexpr int kMaxRedraws = 200;

Tensor normal(const Shape& shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

// He-scaled weights keep activations O(1), as in the networks themselves.
Tensor he(const Shape& shape, int fan_in, std::mt19937_64& rng) { return normal(shape, rng, std::sqrt(2.0 / fan_in)); }

Tensor positive(const Shape& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.5, 1.5);
  Tensor t(shape);
  for (float& v : t.data()) v = static_cast<float>(dist(rng));
  return t;
}

struct OpCase {
  OpNode node;
  std::vector<Tensor> inputs;
  ops::Mode mode = ops::Mode::Train;
};

OpNode make_node(OpKind kind) {
  OpNode n;
  n.name = op_kind_name(kind);
  n.kind = kind;
  return n;
}

OpCase draw_op_case(const std::string& name, std::mt19937_64& rng) {
  OpCase c;
  if (name == "conv2d") {
    c.node = make_node(OpKind::Conv2d);
    c.node.stride = 2;
    c.node.pad = 1;
    c.node.params = {{"weight", he({4, 3, 3, 3}, 27, rng)}, {"bias", normal({4}, rng)}};
    c.inputs = {normal({2, 3, 7, 7}, rng)};
  } else if (name == "conv2d_dilated") {
    c.node = make_node(OpKind::Conv2d);
    c.node.pad = 2;
    c.node.dilation = 2;
    c.node.params = {{"weight", he({3, 2, 3, 3}, 18, rng)}};
    c.inputs = {normal({2, 2, 6, 6}, rng)};
  } else if (name == "transposed_conv2d") {
    c.node = make_node(OpKind::TransposedConv2d);
    c.node.stride = 2;
    c.node.pad = 1;
    c.node.params = {{"weight", he({3, 2, 3, 3}, 12, rng)}, {"bias", normal({2}, rng)}};
    c.inputs = {normal({2, 3, 4, 4}, rng)};
  } else if (name == "maxpool2d") {
    c.node = make_node(OpKind::MaxPool2d);
    c.node.window = 2;
    c.node.stride = 2;
    c.inputs = {normal({2, 3, 6, 6}, rng)};
  } else if (name == "batchnorm2d_train" || name == "batchnorm2d_eval") {
    c.node = make_node(OpKind::BatchNorm2d);
    c.node.params = {{"scale", positive({4}, rng)}, {"shift", normal({4}, rng, 0.5)}};
    c.node.bn.running_mean = normal({4}, rng);
    c.node.bn.running_var = positive({4}, rng);
    c.node.bn.updates = 1;
    c.inputs = {normal({3, 4, 3, 3}, rng)};
    c.mode = name == "batchnorm2d_train" ? ops::Mode::Train : ops::Mode::Eval;
  } else if (name == "relu") {
    c.node = make_node(OpKind::ReLU);
    c.inputs = {normal({2, 3, 4, 4}, rng)};
  } else if (name == "sigmoid") {
    c.node = make_node(OpKind::Sigmoid);
    c.inputs = {normal({2, 3, 4, 4}, rng, 2.0)};
  } else if (name == "linear") {
    c.node = make_node(OpKind::Linear);
    c.node.params = {{"weight", he({5, 4}, 5, rng)}, {"bias", normal({4}, rng)}};
    c.inputs = {normal({3, 5}, rng)};
  } else if (name == "global_avg_pool") {
    c.node = make_node(OpKind::GlobalAvgPool);
    c.inputs = {normal({2, 3, 4, 5}, rng)};
  } else if (name == "concat") {
    c.node = make_node(OpKind::Concat);
    c.inputs = {normal({2, 2, 3, 3}, rng), normal({2, 3, 3, 3}, rng)};
  } else if (name == "add") {
    c.node = make_node(OpKind::Add);
    c.inputs = {normal({2, 3, 3, 3}, rng), normal({2, 3, 3, 3}, rng)};
  } else if (name == "bilinear_upsample") {
    c.node = make_node(OpKind::BilinearResize);
    c.node.out_h = 7;
    c.node.out_w = 4;
    c.inputs = {normal({2, 2, 3, 5}, rng)};
  } else if (name == "bilinear_downsample") {
    c.node = make_node(OpKind::BilinearResize);
    c.node.out_h = 3;
    c.node.out_w = 3;
    c.inputs = {normal({2, 2, 6, 6}, rng)};
  } else {
    throw ArgumentError("gradcheck: unknown case '" + name + "'");
  }
  return c;
}

// Two-layer network: conv3x3 + relu, then a task head, then the loss.
struct LossNet {
  NetworkGraph g;
  Tensor input;
  std::vector<int> labels;
  Tensor target;
};

LossNet draw_loss_net(const std::string& name, std::mt19937_64& rng, std::uint64_t seed) {
  LossNet n{NetworkGraph(seed), {}, {}, {}};
  const int batch = 3, side = 6;
  const int x = n.g.add_input("image");
  int h = n.g.add_conv("conv1", x, 3, 4, 3, 1, 1);
  h = n.g.add_relu("relu1", h);
  if (name == "cross_entropy") {
    h = n.g.add_global_avg_pool("pool", h);
    n.g.set_output(n.g.add_linear("fc", h, 4, 2));
    n.labels = {0, 1, 1};
  } else if (name == "euclidean_loss") {
    h = n.g.add_global_avg_pool("pool", h);
    h = n.g.add_linear("fc", h, 4, 2);
    n.g.set_output(n.g.add_sigmoid("sigmoid", h));
    std::uniform_real_distribution<double> u(0.1, 0.9);
    n.target = Tensor({batch, 2});
    for (float& v : n.target.data()) v = static_cast<float>(u(rng));
  } else if (name == "combined_seg_loss") {
    n.g.set_output(n.g.add_conv("conv2", h, 4, 2, 1));
    n.target = Tensor({batch, side, side});
    std::bernoulli_distribution coin(0.4);
    for (float& v : n.target.data()) v = coin(rng) ? 1.0f : 0.0f;
  } else {
    throw ArgumentError("gradcheck: unknown case '" + name + "'");
  }
  for (auto& p : n.g.parameters()) *p.value = normal(p.value->shape(), rng, 0.5);
  n.input = normal({batch, 3, side, side}, rng);
  return n;
}

losses::LossValue eval_loss(const std::string& name, const Tensor& out, const LossNet& n) {
  if (name == "cross_entropy") return losses::cross_entropy(out, n.labels);
  if (name == "euclidean_loss") return losses::euclidean_loss(out, n.target);
  return losses::combined_seg_loss(out, n.target);
}

GradCheckResult run_loss_case(const std::string& name, std::mt19937_64& rng, std::uint64_t seed, double step) {
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    LossNet n = draw_loss_net(name, rng, seed);
    const Tensor inputs[1] = {n.input};
    const Trace trace = n.g.forward(inputs, ops::Mode::Eval);
    // Keep the relu pre-activations clear of the kink.
    const int relu = n.g.find("relu1");
    const Tensor* pre[1] = {&trace.values[static_cast<std::size_t>(n.g.node(relu).inputs[0])]};
    double gap = 1e300;
    for (float v : pre[0]->data()) gap = std::min(gap, std::abs(static_cast<double>(v)));
    if (gap < 10.0 * step) continue;

    const auto loss = eval_loss(name, trace.output(n.g.output()), n);
    const Gradients g = n.g.backward(trace, loss.grad);

    std::vector<Tensor*> probes{&n.input};
    std::vector<std::string> names{"input"};
    std::vector<Tensor> analytic{g.inputs.at(0)};
    auto params = n.g.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      probes.push_back(params[i].value);
      names.push_back(params[i].name);
      analytic.push_back(g.params[i]);
    }
    auto objective = [&] {
      const Tensor in[1] = {n.input};
      return eval_loss(name, n.g.predict(in), n).value;
    };
    return finite_difference_check(objective, probes, names, analytic, step);
  }
  throw StateError("gradcheck: could not draw a kink-free instance for '" + name + "'");
}

}  // namespace

std::vector<std::string> operator_cases() {
  return {"conv2d",  "conv2d_dilated",      "transposed_conv2d",  "maxpool2d", "batchnorm2d_train",
          "batchnorm2d_eval", "relu",        "sigmoid",            "linear",    "global_avg_pool",
          "concat",  "add",                 "bilinear_upsample",  "bilinear_downsample"};
}

std::vector<std::string> loss_cases() { return {"cross_entropy", "euclidean_loss", "combined_seg_loss"}; }

std::vector<std::string> all_cases() {
  auto all = operator_cases();
  for (auto& l : loss_cases()) all.push_back(l);
  return all;
}

GradCheckResult run_case(const std::string& name, std::uint64_t seed, double step) {
  std::mt19937_64 rng(seed);
  for (const auto& l : loss_cases())
    if (l == name) return run_loss_case(name, rng, seed, step);
  for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
    OpCase c = draw_op_case(name, rng);
    if (kink_distance(c.node, c.inputs) < 10.0 * step) continue;
    return finite_difference_check(c.node, c.inputs, step, c.mode, seed);
  }
  throw StateError("gradcheck: could not draw a kink-free instance for '" + name + "'");
}

}  // namespace fundus::gradsuite
