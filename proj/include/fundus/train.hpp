#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fundus/augment.hpp"
#include "fundus/graph.hpp"
#include "fundus/metrics.hpp"
#include "fundus/nets.hpp"
#include "fundus/synth.hpp"

namespace fundus::train {

enum class Optimizer { SgdMomentum, Adam };

Optimizer parse_optimizer(const std::string& name);
const char* optimizer_name(Optimizer kind);

inline constexpr double kSgdMomentum = 0.9;
inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

struct TrainConfig {
  nets::Task task = nets::Task::Classify;
  double lr = 1e-3;
  Optimizer optimizer = Optimizer::Adam;
  int batch_size = 8;
  int steps = 100;
  std::uint64_t seed = 1;
  augment::AugmentConfig augment;
  /// Augmented copies (noise + random rotation) added per training sample
  /// before the first step. 0 trains on the samples as given.
  int augment_copies = 0;
  nets::NetConfig net;
  /// Save a checkpoint every this many steps into checkpoint_dir; 0 disables.
  int checkpoint_every = 0;
  std::filesystem::path checkpoint_dir;

  void validate() const;
};

struct OptimizerState {
  Optimizer kind = Optimizer::Adam;
  std::int64_t t = 0;
  std::vector<Tensor> m;  // momentum buffer (sgd) or first moment (adam)
  std::vector<Tensor> v;  // second moment (adam only)
};

/// v <- momentum v + g; w <- w - lr v. Momentum 0 is plain gradient descent.
void sgd_momentum_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state,
                       double lr, double momentum = kSgdMomentum);
/// Bias-corrected Adam with beta (0.9, 0.999), eps 1e-8.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr);

/// Network inputs and targets for a group of samples.
struct Batch {
  std::vector<Tensor> inputs;  // image (+ half, quarter for segmentation)
  std::vector<int> labels;
  Tensor fovea;  // N x 2
  Tensor masks;  // N x H x W
};

Batch make_batch(nets::Task task, std::span<const Sample* const> samples);

struct LossEval {
  double loss = 0.0;
  Tensor grad_output;
};

LossEval task_loss(nets::Task task, const Tensor& output, const Batch& batch);

// ---- checkpoints -------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  std::vector<NamedTensor> tensors;           // parameters, then batchnorm running stats
  std::map<std::string, std::string> meta;    // task and network configuration
  std::map<std::string, std::int64_t> bn_updates;
  OptimizerState optimizer;
  std::string rng_state;
  std::int64_t step = 0;
  std::vector<double> history;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError on a bad magic, version, or truncated/garbled body.
Checkpoint read_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes, const std::string& origin = "checkpoint");

/// Tensors of `net` in checkpoint order.
std::vector<NamedTensor> collect_tensors(const NetworkGraph& net);
/// Copies tensors into `net`. Every name and shape is validated before the
/// first write; on mismatch throws DimensionError listing the differences.
void apply_tensors(NetworkGraph& net, const Checkpoint& ckpt);

std::map<std::string, std::string> describe(nets::Task task, const nets::NetConfig& cfg);
nets::NetConfig net_config_from(const std::map<std::string, std::string>& meta);
nets::Task task_from(const std::map<std::string, std::string>& meta);

/// Rebuilds the network stored in a checkpoint.
NetworkGraph load_network(const Checkpoint& ckpt);

// ---- training --------------------------------------------------------------

struct StepInfo {
  std::int64_t step = 0;  // 1-based index of the step just taken
  double loss = 0.0;
  double grad_norm = 0.0;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Sample> dataset);

  /// One optimization step. Throws TrainingError on a non-finite loss or
  /// gradient norm; parameters are left untouched in that case.
  StepInfo step();
  /// Runs until `cfg.steps` steps have been taken in total. The callback may
  /// return false to stop early.
  void run(const std::function<bool(const StepInfo&)>& on_step = {});

  const TrainConfig& config() const { return cfg_; }
  NetworkGraph& net() { return net_; }
  const NetworkGraph& net() const { return net_; }
  std::int64_t steps_taken() const { return step_; }
  const std::vector<double>& history() const { return history_; }
  std::size_t pool_size() const { return pool_.size(); }

  Checkpoint checkpoint() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer, rng and step counter. The checkpoint
  /// must describe the same task and architecture.
  void restore(const Checkpoint& ckpt);
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<const Sample*> draw_batch();

  TrainConfig cfg_;
  std::vector<Sample> pool_;
  NetworkGraph net_;
  OptimizerState opt_;
  std::mt19937_64 rng_;
  std::int64_t step_ = 0;
  std::vector<double> history_;
};

struct TrainResult {
  NetworkGraph net;
  std::vector<double> history;
};

TrainResult train_loop(const TrainConfig& cfg, std::vector<Sample> dataset);

// ---- evaluation ------------------------------------------------------------

/// Eval-mode outputs for every sample, computed in chunks of `chunk`.
std::vector<Tensor> predict_outputs(const NetworkGraph& net, nets::Task task, std::span<const Sample> samples,
                                    int chunk = 16);

/// Classify: auc, accuracy. Fovea: mean/var Euclidean error over samples with
/// a valid fovea. Segment: mean per-sample hard Dice.
metrics::MetricsReport evaluate(const NetworkGraph& net, nets::Task task, std::span<const Sample> samples);

/// Soft Dice of the foreground probabilities over all samples (smooth 1).
double soft_dice(const NetworkGraph& net, std::span<const Sample> samples);

}  // namespace fundus::train
