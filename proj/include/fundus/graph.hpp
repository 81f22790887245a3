#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fundus/ops.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

enum class OpKind {
  Input,
  Conv2d,
  TransposedConv2d,
  MaxPool2d,
  BatchNorm2d,
  ReLU,
  Sigmoid,
  Linear,
  GlobalAvgPool,
  Concat,
  Add,
  BilinearResize,
};

const char* op_kind_name(OpKind kind);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// One operator in a network. Hyperparameters that do not apply to `kind`
/// are ignored.
struct OpNode {
  std::string name;
  OpKind kind = OpKind::Input;
  std::vector<int> inputs;

  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int window = 2;          // max pooling
  int out_h = 0;           // bilinear resize target
  int out_w = 0;
  bool keep_dims = false;  // global average pool: emit N x C x 1 x 1
  int input_index = 0;     // Input: which network input feeds this node

  /// Conv/transposed conv: weight[, bias]; Linear: weight[, bias];
  /// BatchNorm2d: scale, shift.
  std::vector<NamedTensor> params;
  ops::BatchNormState bn;  // BatchNorm2d only

  const Tensor* param(const std::string& pname) const;
  bool has_bias() const { return param("bias") != nullptr; }
  bool differentiable() const { return kind != OpKind::Input; }
};

/// Per-node values a backward pass needs beyond the activations.
struct NodeAux {
  std::vector<std::int64_t> argmax;  // MaxPool2d
  ops::BatchNormStats stats;         // BatchNorm2d in train mode
};

struct NodeGrads {
  std::vector<Tensor> inputs;  // one per node input
  std::vector<Tensor> params;  // aligned with OpNode::params
};

/// Evaluates a single node. In train mode a BatchNorm2d node normalizes by
/// batch statistics and reports them through `aux`; running statistics are
/// never modified here.
Tensor evaluate_node(const OpNode& node, std::span<const Tensor* const> inputs, ops::Mode mode,
                     NodeAux* aux = nullptr);

NodeGrads backward_node(const OpNode& node, std::span<const Tensor* const> inputs, const Tensor& output,
                        const NodeAux& aux, ops::Mode mode, const Tensor& grad_out);

struct ParamRef {
  std::string name;
  Tensor* value;
};

struct ConstParamRef {
  std::string name;
  const Tensor* value;
};

/// Activations recorded by a forward pass.
struct Trace {
  ops::Mode mode = ops::Mode::Eval;
  std::vector<Tensor> values;
  std::vector<NodeAux> aux;

  const Tensor& output(int node) const { return values.at(static_cast<std::size_t>(node)); }
};

struct Gradients {
  std::vector<Tensor> params;  // aligned with NetworkGraph::parameters()
  std::vector<Tensor> inputs;  // aligned with the network inputs
};

/// A DAG of operator nodes stored in topological order (every node's inputs
/// precede it). Nodes are appended through the add_* builders.
class NetworkGraph {
 public:
  NetworkGraph() = default;
  explicit NetworkGraph(std::uint64_t seed) : rng_(seed) {}

  // ---- construction ---------------------------------------------------------
  int add_input(const std::string& name);
  int add_conv(const std::string& name, int in, int in_ch, int out_ch, int kernel, int stride = 1, int pad = 0,
               int dilation = 1, bool bias = true);
  int add_transposed_conv(const std::string& name, int in, int in_ch, int out_ch, int kernel, int stride,
                          int pad = 0, bool bias = true);
  int add_batchnorm(const std::string& name, int in, int channels);
  int add_relu(const std::string& name, int in);
  int add_sigmoid(const std::string& name, int in);
  int add_maxpool(const std::string& name, int in, int window, int stride);
  int add_linear(const std::string& name, int in, int in_features, int out_features, bool bias = true);
  int add_global_avg_pool(const std::string& name, int in, bool keep_dims = false);
  int add_concat(const std::string& name, std::vector<int> inputs);
  int add_add(const std::string& name, int a, int b);
  int add_resize(const std::string& name, int in, int out_h, int out_w);
  /// Appends a fully specified node; its inputs must already exist.
  int add_node(OpNode node);

  void set_output(int node);
  int output() const { return output_; }
  void mark_stage(const std::string& stage, int node) { stages_[stage] = node; }
  int stage(const std::string& stage) const;
  const std::map<std::string, int>& stages() const { return stages_; }

  // ---- inspection -------------------------------------------------------------
  const std::vector<OpNode>& nodes() const { return nodes_; }
  std::vector<OpNode>& nodes() { return nodes_; }
  const OpNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  int find(const std::string& name) const;  // -1 when absent
  int num_inputs() const { return num_inputs_; }

  std::vector<ParamRef> parameters();
  std::vector<ConstParamRef> parameters() const;

  /// Forward pass; records everything backward() needs.
  Trace forward(std::span<const Tensor> inputs, ops::Mode mode) const;
  Tensor predict(std::span<const Tensor> inputs) const;
  /// Folds the batch statistics recorded in a train-mode trace into the
  /// running statistics of every batchnorm node.
  void commit_batch_stats(const Trace& trace);

  /// Back-propagates `grad_output` (gradient w.r.t. the output node).
  Gradients backward(const Trace& trace, const Tensor& grad_output) const;

 private:
  int push(OpNode node);
  void require_node(int id) const;
  Tensor he_normal(Shape shape, int fan_in);

  std::vector<OpNode> nodes_;
  std::map<std::string, int> stages_;
  int output_ = -1;
  int num_inputs_ = 0;
  std::mt19937_64 rng_{0};
};

/// Total scalar parameter count. Running statistics are not parameters.
std::size_t param_count(const NetworkGraph& net);

}  // namespace fundus
