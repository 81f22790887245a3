#include "fundus/graph.hpp"

#include <cmath>

#include "fundus/errors.hpp"

namespace fundus {

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::TransposedConv2d: return "transposed_conv2d";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::BatchNorm2d: return "batchnorm2d";
    case OpKind::ReLU: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Linear: return "linear";
    case OpKind::GlobalAvgPool: return "global_avg_pool";
    case OpKind::Concat: return "concat_channels";
    case OpKind::Add: return "add";
    case OpKind::BilinearResize: return "bilinear_resize";
  }
  return "?";
}

const Tensor* OpNode::param(const std::string& pname) const {
  for (const auto& p : params)
    if (p.name == pname) return &p.value;
  return nullptr;
}

namespace {

void expect_inputs(const OpNode& node, std::size_t got) {
  std::size_t want = 1;
  if (node.kind == OpKind::Add) want = 2;
  if (node.kind == OpKind::Concat) {
    if (got < 1) throw ArgumentError("node '" + node.name + "': concat needs at least one input");
    return;
  }
  if (got != want) {
    throw ArgumentError("node '" + node.name + "' (" + op_kind_name(node.kind) + ") expects " + std::to_string(want) +
                        " input(s), got " + std::to_string(got));
  }
}

const Tensor& required_param(const OpNode& node, const char* pname) {
  const Tensor* t = node.param(pname);
  if (!t) throw StateError("node '" + node.name + "' lacks parameter '" + pname + "'");
  return *t;
}

const Tensor& optional_param(const OpNode& node, const char* pname) {
  static const Tensor none;
  const Tensor* t = node.param(pname);
  return t ? *t : none;
}

}  // namespace

Tensor evaluate_node(const OpNode& node, std::span<const Tensor* const> inputs, ops::Mode mode, NodeAux* aux) {
  if (node.kind == OpKind::Input) throw UnsupportedError("input node '" + node.name + "' has no operator");
  expect_inputs(node, inputs.size());
  const Tensor& x = *inputs[0];
  switch (node.kind) {
    case OpKind::Conv2d:
      return ops::conv2d(x, required_param(node, "weight"), optional_param(node, "bias"),
                         {node.stride, node.pad, node.dilation});
    case OpKind::TransposedConv2d:
      return ops::transposed_conv2d(x, required_param(node, "weight"), optional_param(node, "bias"), node.stride,
                                    node.pad);
    case OpKind::MaxPool2d: {
      auto r = ops::maxpool2d(x, node.window, node.stride);
      if (aux) aux->argmax = std::move(r.argmax);
      return std::move(r.output);
    }
    case OpKind::BatchNorm2d:
      if (mode == ops::Mode::Train) {
        return ops::batchnorm2d_train(x, required_param(node, "scale"), required_param(node, "shift"),
                                      ops::kBatchNormEps, aux ? &aux->stats : nullptr);
      }
      return ops::batchnorm2d_eval(x, required_param(node, "scale"), required_param(node, "shift"), node.bn,
                                   ops::kBatchNormEps);
    case OpKind::ReLU: return ops::relu(x);
    case OpKind::Sigmoid: return ops::sigmoid(x);
    case OpKind::Linear:
      return ops::linear(x, required_param(node, "weight"), optional_param(node, "bias"));
    case OpKind::GlobalAvgPool: {
      Tensor y = ops::global_avg_pool(x);
      if (node.keep_dims) return y.reshaped({y.dim(0), y.dim(1), 1, 1});
      return y;
    }
    case OpKind::Concat: return ops::concat_channels(inputs);
    case OpKind::Add: return add(x, *inputs[1]);
    case OpKind::BilinearResize: return ops::bilinear_resize(x, node.out_h, node.out_w);
    case OpKind::Input: break;
  }
  throw UnsupportedError("unknown operator kind");
}

NodeGrads backward_node(const OpNode& node, std::span<const Tensor* const> inputs, const Tensor& output,
                        const NodeAux& aux, ops::Mode mode, const Tensor& grad_out) {
  if (node.kind == OpKind::Input) throw UnsupportedError("input node '" + node.name + "' is not differentiable");
  expect_inputs(node, inputs.size());
  const Tensor& x = *inputs[0];
  NodeGrads g;
  switch (node.kind) {
    case OpKind::Conv2d: {
      auto r = ops::conv2d_backward(x, required_param(node, "weight"), node.has_bias(), grad_out,
                                    {node.stride, node.pad, node.dilation});
      g.inputs.push_back(std::move(r.input));
      g.params.push_back(std::move(r.kernel));
      if (node.has_bias()) g.params.push_back(std::move(r.bias));
      break;
    }
    case OpKind::TransposedConv2d: {
      auto r = ops::transposed_conv2d_backward(x, required_param(node, "weight"), node.has_bias(), grad_out,
                                               node.stride, node.pad);
      g.inputs.push_back(std::move(r.input));
      g.params.push_back(std::move(r.kernel));
      if (node.has_bias()) g.params.push_back(std::move(r.bias));
      break;
    }
    case OpKind::MaxPool2d:
      g.inputs.push_back(ops::maxpool2d_backward(x.shape(), aux.argmax, grad_out));
      break;
    case OpKind::BatchNorm2d: {
      auto r = mode == ops::Mode::Train
                   ? ops::batchnorm2d_train_backward(x, required_param(node, "scale"), ops::kBatchNormEps, grad_out)
                   : ops::batchnorm2d_eval_backward(x, required_param(node, "scale"), node.bn, ops::kBatchNormEps,
                                                    grad_out);
      g.inputs.push_back(std::move(r.input));
      g.params.push_back(std::move(r.scale));
      g.params.push_back(std::move(r.shift));
      break;
    }
    case OpKind::ReLU: g.inputs.push_back(ops::relu_backward(x, grad_out)); break;
    case OpKind::Sigmoid: g.inputs.push_back(ops::sigmoid_backward(output, grad_out)); break;
    case OpKind::Linear: {
      auto r = ops::linear_backward(x, required_param(node, "weight"), node.has_bias(), grad_out);
      g.inputs.push_back(std::move(r.input));
      g.params.push_back(std::move(r.weight));
      if (node.has_bias()) g.params.push_back(std::move(r.bias));
      break;
    }
    case OpKind::GlobalAvgPool: {
      const Tensor flat = grad_out.reshaped({x.dim(0), x.dim(1)});
      g.inputs.push_back(ops::global_avg_pool_backward(x.shape(), flat));
      break;
    }
    case OpKind::Concat: {
      int begin = 0;
      for (const Tensor* in : inputs) {
        g.inputs.push_back(ops::slice_channels(grad_out, begin, in->dim(1)));
        begin += in->dim(1);
      }
      break;
    }
    case OpKind::Add:
      g.inputs.push_back(grad_out);
      g.inputs.push_back(grad_out);
      break;
    case OpKind::BilinearResize: g.inputs.push_back(ops::bilinear_resize_backward(x.shape(), grad_out)); break;
    case OpKind::Input: break;
  }
  return g;
}

// ---- NetworkGraph ------------------------------------------------------------------

void NetworkGraph::require_node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) {
    throw ArgumentError("node id " + std::to_string(id) + " does not exist");
  }
}

int NetworkGraph::push(OpNode node) {
  for (int in : node.inputs) require_node(in);
  if (find(node.name) >= 0) throw ConfigError("duplicate node name '" + node.name + "'");
  nodes_.push_back(std::move(node));
  output_ = static_cast<int>(nodes_.size()) - 1;
  return output_;
}

int NetworkGraph::add_node(OpNode node) {
  if (node.kind == OpKind::Input) node.input_index = num_inputs_++;
  if (node.kind == OpKind::BatchNorm2d && node.bn.running_mean.empty()) {
    const Tensor* scale = node.param("scale");
    node.bn = ops::BatchNormState::fresh(scale ? static_cast<int>(scale->size()) : 0);
  }
  return push(std::move(node));
}

Tensor NetworkGraph::he_normal(Shape shape, int fan_in) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / std::max(1, fan_in)));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(dist(rng_));
  return t;
}

int NetworkGraph::add_input(const std::string& name) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::Input;
  return add_node(std::move(n));
}

int NetworkGraph::add_conv(const std::string& name, int in, int in_ch, int out_ch, int kernel, int stride, int pad,
                           int dilation, bool bias) {
  if (stride < 1 || dilation < 1) throw ArgumentError("conv '" + name + "': stride and dilation must be positive");
  OpNode n;
  n.name = name;
  n.kind = OpKind::Conv2d;
  n.inputs = {in};
  n.stride = stride;
  n.pad = pad;
  n.dilation = dilation;
  n.params.push_back({"weight", he_normal({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel)});
  if (bias) n.params.push_back({"bias", Tensor::zeros({out_ch})});
  return add_node(std::move(n));
}

int NetworkGraph::add_transposed_conv(const std::string& name, int in, int in_ch, int out_ch, int kernel, int stride,
                                      int pad, bool bias) {
  if (stride < 1) throw ArgumentError("transposed conv '" + name + "': stride must be positive");
  OpNode n;
  n.name = name;
  n.kind = OpKind::TransposedConv2d;
  n.inputs = {in};
  n.stride = stride;
  n.pad = pad;
  // Each output pixel receives in_ch * (kernel/stride)^2 taps.
  const int taps = std::max(1, in_ch * (kernel / stride) * (kernel / stride));
  n.params.push_back({"weight", he_normal({in_ch, out_ch, kernel, kernel}, taps)});
  if (bias) n.params.push_back({"bias", Tensor::zeros({out_ch})});
  return add_node(std::move(n));
}

int NetworkGraph::add_batchnorm(const std::string& name, int in, int channels) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::BatchNorm2d;
  n.inputs = {in};
  n.params.push_back({"scale", Tensor::filled({channels}, 1.0f)});
  n.params.push_back({"shift", Tensor::zeros({channels})});
  return add_node(std::move(n));
}

int NetworkGraph::add_relu(const std::string& name, int in) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::ReLU;
  n.inputs = {in};
  return add_node(std::move(n));
}

int NetworkGraph::add_sigmoid(const std::string& name, int in) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::Sigmoid;
  n.inputs = {in};
  return add_node(std::move(n));
}

int NetworkGraph::add_maxpool(const std::string& name, int in, int window, int stride) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::MaxPool2d;
  n.inputs = {in};
  n.window = window;
  n.stride = stride;
  return add_node(std::move(n));
}

int NetworkGraph::add_linear(const std::string& name, int in, int in_features, int out_features, bool bias) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::Linear;
  n.inputs = {in};
  n.params.push_back({"weight", he_normal({in_features, out_features}, in_features)});
  if (bias) n.params.push_back({"bias", Tensor::zeros({out_features})});
  return add_node(std::move(n));
}

int NetworkGraph::add_global_avg_pool(const std::string& name, int in, bool keep_dims) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::GlobalAvgPool;
  n.inputs = {in};
  n.keep_dims = keep_dims;
  return add_node(std::move(n));
}

int NetworkGraph::add_concat(const std::string& name, std::vector<int> inputs) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::Concat;
  n.inputs = std::move(inputs);
  return add_node(std::move(n));
}

int NetworkGraph::add_add(const std::string& name, int a, int b) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::Add;
  n.inputs = {a, b};
  return add_node(std::move(n));
}

int NetworkGraph::add_resize(const std::string& name, int in, int out_h, int out_w) {
  OpNode n;
  n.name = name;
  n.kind = OpKind::BilinearResize;
  n.inputs = {in};
  n.out_h = out_h;
  n.out_w = out_w;
  return add_node(std::move(n));
}

void NetworkGraph::set_output(int node) {
  require_node(node);
  output_ = node;
}

int NetworkGraph::stage(const std::string& stage) const {
  auto it = stages_.find(stage);
  if (it == stages_.end()) throw ArgumentError("no stage named '" + stage + "'");
  return it->second;
}

int NetworkGraph::find(const std::string& name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].name == name) return static_cast<int>(i);
  return -1;
}

std::vector<ParamRef> NetworkGraph::parameters() {
  std::vector<ParamRef> refs;
  for (auto& n : nodes_)
    for (auto& p : n.params) refs.push_back({n.name + "." + p.name, &p.value});
  return refs;
}

std::vector<ConstParamRef> NetworkGraph::parameters() const {
  std::vector<ConstParamRef> refs;
  for (const auto& n : nodes_)
    for (const auto& p : n.params) refs.push_back({n.name + "." + p.name, &p.value});
  return refs;
}

Trace NetworkGraph::forward(std::span<const Tensor> inputs, ops::Mode mode) const {
  if (static_cast<int>(inputs.size()) != num_inputs_) {
    throw ArgumentError("network expects " + std::to_string(num_inputs_) + " input(s), got " +
                        std::to_string(inputs.size()));
  }
  Trace trace;
  trace.mode = mode;
  trace.values.resize(nodes_.size());
  trace.aux.resize(nodes_.size());
  std::vector<const Tensor*> args;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const OpNode& n = nodes_[i];
    if (n.kind == OpKind::Input) {
      trace.values[i] = inputs[static_cast<std::size_t>(n.input_index)];
      continue;
    }
    args.clear();
    for (int in : n.inputs) args.push_back(&trace.values[static_cast<std::size_t>(in)]);
    trace.values[i] = evaluate_node(n, args, mode, &trace.aux[i]);
  }
  return trace;
}

Tensor NetworkGraph::predict(std::span<const Tensor> inputs) const {
  Trace t = forward(inputs, ops::Mode::Eval);
  return std::move(t.values.at(static_cast<std::size_t>(output_)));
}

void NetworkGraph::commit_batch_stats(const Trace& trace) {
  if (trace.mode != ops::Mode::Train) return;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    OpNode& n = nodes_[i];
    if (n.kind != OpKind::BatchNorm2d) continue;
    const Tensor& x = trace.values[static_cast<std::size_t>(n.inputs[0])];
    ops::batchnorm_update_running(n.bn, trace.aux[i].stats,
                                  static_cast<std::size_t>(x.dim(0)) * x.dim(2) * x.dim(3));
  }
}

Gradients NetworkGraph::backward(const Trace& trace, const Tensor& grad_output) const {
  if (trace.values.size() != nodes_.size()) throw StateError("trace does not belong to this network");
  const Tensor& out = trace.values.at(static_cast<std::size_t>(output_));
  if (grad_output.shape() != out.shape()) {
    throw DimensionError("backward: grad_output " + shape_str(grad_output.shape()) + " vs output " +
                         shape_str(out.shape()));
  }
  std::vector<std::size_t> param_offset(nodes_.size());
  Gradients result;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    param_offset[i] = result.params.size();
    for (const auto& p : nodes_[i].params) result.params.emplace_back(p.value.shape());
  }
  result.inputs.resize(static_cast<std::size_t>(num_inputs_));

  std::vector<Tensor> grads(nodes_.size());
  std::vector<bool> live(nodes_.size(), false);
  grads[static_cast<std::size_t>(output_)] = grad_output;
  live[static_cast<std::size_t>(output_)] = true;

  std::vector<const Tensor*> args;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (!live[i]) continue;
    const OpNode& n = nodes_[i];
    if (n.kind == OpKind::Input) {
      result.inputs[static_cast<std::size_t>(n.input_index)] = std::move(grads[i]);
      continue;
    }
    args.clear();
    for (int in : n.inputs) args.push_back(&trace.values[static_cast<std::size_t>(in)]);
    NodeGrads g = backward_node(n, args, trace.values[i], trace.aux[i], trace.mode, grads[i]);
    grads[i] = Tensor{};
    for (std::size_t k = 0; k < g.params.size(); ++k) result.params[param_offset[i] + k] = std::move(g.params[k]);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const auto src = static_cast<std::size_t>(n.inputs[k]);
      if (live[src]) {
        add_inplace(grads[src], g.inputs[k]);
      } else {
        grads[src] = std::move(g.inputs[k]);
        live[src] = true;
      }
    }
  }
  return result;
}

std::size_t param_count(const NetworkGraph& net) {
  std::size_t total = 0;
  for (const auto& p : net.parameters()) total += p.value->size();
  return total;
}

}  // namespace fundus
