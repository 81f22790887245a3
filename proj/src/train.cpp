#include "fundus/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/losses.hpp"

namespace fundus::train {

Optimizer parse_optimizer(const std::string& name) {
  if (name == "adam") return Optimizer::Adam;
  if (name == "sgd-momentum") return Optimizer::SgdMomentum;
  throw ConfigError("unknown optimizer '" + name + "' (expected adam|sgd-momentum)");
}

const char* optimizer_name(Optimizer kind) {
  return kind == Optimizer::Adam ? "adam" : "sgd-momentum";
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (augment_copies < 0) throw ConfigError("augment_copies must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (checkpoint_every > 0 && checkpoint_dir.empty()) throw ConfigError("checkpoint_every needs checkpoint_dir");
  augment.validate();
  net.validate();
}

// ---- optimizers --------------------------------------------------------------

namespace {

void check_step_args(std::span<Tensor* const> params, std::span<const Tensor> grads, const char* what) {
  if (params.size() != grads.size()) {
    throw DimensionError(std::string(what) + ": " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw DimensionError(std::string(what) + ": parameter " + std::to_string(i) + " has shape " +
                           shape_str(params[i]->shape()) + ", gradient " + shape_str(grads[i].shape()));
    }
  }
}

void ensure_slots(std::vector<Tensor>& slots, std::span<Tensor* const> params, const char* what) {
  if (slots.empty()) {
    for (const Tensor* p : params) slots.push_back(Tensor::zeros(p->shape()));
    return;
  }
  if (slots.size() != params.size()) throw DimensionError(std::string(what) + ": optimizer state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (slots[i].shape() != params[i]->shape())
      throw DimensionError(std::string(what) + ": optimizer state shape mismatch at parameter " + std::to_string(i));
  }
}

}  // namespace

void sgd_momentum_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state,
                       double lr, double momentum) {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("sgd_momentum_step: momentum must lie in [0, 1)");
  check_step_args(params, grads, "sgd_momentum_step");
  ensure_slots(state.m, params, "sgd_momentum_step");
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i];
    Tensor& v = state.m[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double vk = momentum * v[k] + static_cast<double>(g[k]);
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * vk);
    }
  }
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, OptimizerState& state, double lr) {
  check_step_args(params, grads, "adam_step");
  ensure_slots(state.m, params, "adam_step");
  ensure_slots(state.v, params, "adam_step");
  ++state.t;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      const double mk = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * gk;
      const double vk = kAdamBeta2 * v[k] + (1.0 - kAdamBeta2) * gk * gk;
      m[k] = static_cast<float>(mk);
      v[k] = static_cast<float>(vk);
      w[k] = static_cast<float>(w[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + kAdamEps));
    }
  }
}

// ---- batches and losses ----------------------------------------------------

Batch make_batch(nets::Task task, std::span<const Sample* const> samples) {
  if (samples.empty()) throw ArgumentError("make_batch: no samples");
  const Shape& shape = samples[0]->image.shape();
  if (shape.size() != 3 || shape[0] != 3) throw DimensionError("make_batch: images must be 3 x s x s");
  const int n = static_cast<int>(samples.size()), h = shape[1], w = shape[2];
  const std::size_t per = samples[0]->image.size();

  Tensor images({n, 3, h, w});
  Batch b;
  b.fovea = Tensor({n, 2});
  const bool with_masks = task == nets::Task::Segment &&
                          std::all_of(samples.begin(), samples.end(), [](const Sample* s) { return !s->disc_mask.empty(); });
  if (with_masks) b.masks = Tensor({n, h, w});
  for (int i = 0; i < n; ++i) {
    const Sample& s = *samples[i];
    if (s.image.shape() != shape) {
      throw DimensionError("make_batch: sample '" + s.id + "' has shape " + shape_str(s.image.shape()) +
                           ", expected " + shape_str(shape));
    }
    std::copy(s.image.data().begin(), s.image.data().end(), images.data().begin() + i * per);
    b.labels.push_back(s.label);
    b.fovea[2 * i] = static_cast<float>(s.fovea_x);
    b.fovea[2 * i + 1] = static_cast<float>(s.fovea_y);
    if (with_masks) {
      if (s.disc_mask.size() != static_cast<std::size_t>(h) * w)
        throw DimensionError("make_batch: mask of '" + s.id + "' does not match its image");
      std::copy(s.disc_mask.data().begin(), s.disc_mask.data().end(),
                b.masks.data().begin() + static_cast<std::size_t>(i) * h * w);
    }
  }
  if (task == nets::Task::Segment) {
    auto levels = augment::make_pyramid(images);
    b.inputs.assign(std::make_move_iterator(levels.begin()), std::make_move_iterator(levels.end()));
  } else {
    b.inputs.push_back(std::move(images));
  }
  return b;
}

LossEval task_loss(nets::Task task, const Tensor& output, const Batch& batch) {
  losses::LossValue lv;
  switch (task) {
    case nets::Task::Classify: lv = losses::cross_entropy(output, batch.labels); break;
    case nets::Task::Fovea: lv = losses::euclidean_loss(output, batch.fovea); break;
    case nets::Task::Segment:
      if (batch.masks.empty()) throw ArgumentError("task_loss: segmentation batch has no masks");
      lv = losses::combined_seg_loss(output, batch.masks);
      break;
  }
  return {lv.value, std::move(lv.grad)};
}

// ---- trainer -----------------------------------------------------------------

Trainer::Trainer(TrainConfig cfg, std::vector<Sample> dataset) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
  cfg_.validate();
  if (dataset.empty()) throw ArgumentError("trainer: empty dataset");
  for (const auto& s : dataset) {
    if (s.size() != cfg_.net.input_size) {
      throw DimensionError("trainer: sample '" + s.id + "' has size " + std::to_string(s.size()) +
                           ", network expects " + std::to_string(cfg_.net.input_size));
    }
    if (cfg_.task == nets::Task::Segment && s.disc_mask.empty())
      throw ArgumentError("trainer: sample '" + s.id + "' has no disc mask");
  }

  std::mt19937_64 aug_rng(cfg_.augment.seed);
  const std::size_t originals = dataset.size();
  pool_ = std::move(dataset);
  for (int copy = 1; copy <= cfg_.augment_copies; ++copy) {
    for (std::size_t i = 0; i < originals; ++i) {
      Sample s = augment::random_rotation(pool_[i], cfg_.augment, aug_rng);
      s.image = augment::gaussian_noise(s.image, cfg_.augment, aug_rng);
      s.id += "_aug" + std::to_string(copy);
      pool_.push_back(std::move(s));
    }
  }
  if (cfg_.task == nets::Task::Fovea) {
    std::erase_if(pool_, [](const Sample& s) { return !s.fovea_valid; });
    if (pool_.empty()) throw ArgumentError("trainer: no sample has a valid fovea");
  }

  net_ = nets::build_for_task(cfg_.task, cfg_.net);
  opt_.kind = cfg_.optimizer;
  for (const auto& p : net_.parameters()) {
    opt_.m.push_back(Tensor::zeros(p.value->shape()));
    if (opt_.kind == Optimizer::Adam) opt_.v.push_back(Tensor::zeros(p.value->shape()));
  }
}

std::vector<const Sample*> Trainer::draw_batch() {
  std::vector<const Sample*> out;
  const std::size_t n = pool_.size(), b = static_cast<std::size_t>(cfg_.batch_size);
  if (b >= n) {
    for (const auto& s : pool_) out.push_back(&s);
    return out;
  }
  // Partial Fisher-Yates: the first b slots become a uniform draw without replacement.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng_() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  for (std::size_t i = 0; i < b; ++i) out.push_back(&pool_[idx[i]]);
  return out;
}

StepInfo Trainer::step() {
  const auto samples = draw_batch();
  const Batch batch = make_batch(cfg_.task, samples);
  const Trace trace = net_.forward(batch.inputs, ops::Mode::Train);
  const LossEval loss = task_loss(cfg_.task, trace.output(net_.output()), batch);
  Gradients grads = net_.backward(trace, loss.grad_output);

  double sq = 0.0;
  for (const auto& g : grads.params)
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  StepInfo info{step_ + 1, loss.loss, std::sqrt(sq)};
  if (!std::isfinite(info.loss) || !std::isfinite(info.grad_norm)) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "training diverged at step %lld: loss=%g lr=%g grad_norm=%g",
                  static_cast<long long>(info.step), info.loss, cfg_.lr, info.grad_norm);
    throw TrainingError(buf);
  }

  net_.commit_batch_stats(trace);
  std::vector<Tensor*> params;
  for (auto& p : net_.parameters()) params.push_back(p.value);
  if (cfg_.optimizer == Optimizer::Adam) {
    adam_step(params, grads.params, opt_, cfg_.lr);
  } else {
    sgd_momentum_step(params, grads.params, opt_, cfg_.lr);
  }
  step_ = info.step;
  history_.push_back(info.loss);

  if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
    char name[32];
    std::snprintf(name, sizeof name, "step_%06lld.fnkt", static_cast<long long>(step_));
    std::filesystem::create_directories(cfg_.checkpoint_dir);
    save_checkpoint(cfg_.checkpoint_dir / name);
  }
  return info;
}

void Trainer::run(const std::function<bool(const StepInfo&)>& on_step) {
  while (step_ < cfg_.steps) {
    const StepInfo info = step();
    if (on_step && !on_step(info)) break;
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.tensors = collect_tensors(net_);
  c.meta = describe(cfg_.task, cfg_.net);
  for (const auto& node : net_.nodes())
    if (node.kind == OpKind::BatchNorm2d) c.bn_updates[node.name] = node.bn.updates;
  c.optimizer = opt_;
  std::ostringstream rng;
  rng << rng_;
  c.rng_state = rng.str();
  c.step = step_;
  c.history = history_;
  return c;
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const { write_checkpoint(path, checkpoint()); }

void Trainer::restore(const Checkpoint& ckpt) {
  const auto expected = describe(cfg_.task, cfg_.net);
  for (const auto& [k, v] : expected) {
    auto it = ckpt.meta.find(k);
    if (it == ckpt.meta.end() || it->second != v) {
      throw ConfigError("checkpoint " + k + "=" + (it == ckpt.meta.end() ? std::string("<absent>") : it->second) +
                        " does not match the training configuration (" + v + ")");
    }
  }
  if (ckpt.optimizer.kind != cfg_.optimizer) {
    throw ConfigError(std::string("checkpoint optimizer is ") + optimizer_name(ckpt.optimizer.kind) + ", config uses " +
                      optimizer_name(cfg_.optimizer));
  }
  const auto params = net_.parameters();
  auto check_slots = [&](const std::vector<Tensor>& slots, const char* what) {
    if (slots.size() != params.size()) throw DimensionError(std::string("checkpoint optimizer ") + what + " count mismatch");
    for (std::size_t i = 0; i < slots.size(); ++i)
      if (slots[i].shape() != params[i].value->shape())
        throw DimensionError(std::string("checkpoint optimizer ") + what + " shape mismatch at " + params[i].name);
  };
  check_slots(ckpt.optimizer.m, "m");
  if (cfg_.optimizer == Optimizer::Adam) check_slots(ckpt.optimizer.v, "v");
  if (ckpt.step < 0 || static_cast<std::size_t>(ckpt.step) != ckpt.history.size())
    throw ParseError("checkpoint step counter disagrees with its loss history");
  std::mt19937_64 rng;
  std::istringstream in(ckpt.rng_state);
  in >> rng;
  if (!in) throw ParseError("checkpoint rng state is malformed");

  apply_tensors(net_, ckpt);
  opt_ = ckpt.optimizer;
  rng_ = rng;
  step_ = ckpt.step;
  history_ = ckpt.history;
}

void Trainer::load_checkpoint(const std::filesystem::path& path) { restore(read_checkpoint(path)); }

TrainResult train_loop(const TrainConfig& cfg, std::vector<Sample> dataset) {
  Trainer t(cfg, std::move(dataset));
  t.run();
  return {std::move(t.net()), t.history()};
}

// ---- evaluation ------------------------------------------------------------

std::vector<Tensor> predict_outputs(const NetworkGraph& net, nets::Task task, std::span<const Sample> samples,
                                    int chunk) {
  if (chunk < 1) throw ArgumentError("predict_outputs: chunk must be >= 1");
  std::vector<Tensor> out;
  for (std::size_t i0 = 0; i0 < samples.size(); i0 += static_cast<std::size_t>(chunk)) {
    const std::size_t i1 = std::min(samples.size(), i0 + static_cast<std::size_t>(chunk));
    std::vector<const Sample*> group;
    for (std::size_t i = i0; i < i1; ++i) group.push_back(&samples[i]);
    const Batch b = make_batch(task, group);
    const Tensor y = net.predict(b.inputs);
    const std::size_t per = y.size() / group.size();
    Shape shape(y.shape().begin() + 1, y.shape().end());
    for (std::size_t k = 0; k < group.size(); ++k) {
      std::vector<float> v(y.data().begin() + k * per, y.data().begin() + (k + 1) * per);
      out.emplace_back(shape, std::move(v));
    }
  }
  return out;
}

metrics::MetricsReport evaluate(const NetworkGraph& net, nets::Task task, std::span<const Sample> samples) {
  if (samples.empty()) throw ArgumentError("evaluate: no samples");
  const auto outputs = predict_outputs(net, task, samples);
  metrics::MetricsReport report;
  switch (task) {
    case nets::Task::Classify: {
      std::vector<double> scores;
      std::vector<int> preds, labels;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor& z = outputs[i];
        const double p1 = 1.0 / (1.0 + std::exp(static_cast<double>(z[0]) - z[1]));
        scores.push_back(p1);
        preds.push_back(z[1] > z[0] ? 1 : 0);
        labels.push_back(samples[i].label);
      }
      const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                        std::count(labels.begin(), labels.end(), 0) > 0;
      if (both) report.auc = metrics::auc(scores, labels);
      report.accuracy = metrics::accuracy(preds, labels);
      report.n = static_cast<int>(samples.size());
      break;
    }
    case nets::Task::Fovea: {
      std::vector<float> p, t;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].fovea_valid) continue;
        p.insert(p.end(), outputs[i].data().begin(), outputs[i].data().end());
        t.push_back(static_cast<float>(samples[i].fovea_x));
        t.push_back(static_cast<float>(samples[i].fovea_y));
      }
      if (p.empty()) throw ArgumentError("evaluate: no sample has a valid fovea");
      const int n = static_cast<int>(p.size() / 2);
      const auto stats = metrics::euclid_stats(Tensor({n, 2}, std::move(p)), Tensor({n, 2}, std::move(t)));
      report.mean_euclid = stats.mean;
      report.var_euclid = stats.variance;
      report.n = n;
      break;
    }
    case nets::Task::Segment: {
      double total = 0.0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const Tensor& z = outputs[i];
        const std::size_t plane = z.size() / 2;
        Tensor hard({z.dim(1), z.dim(2)});
        for (std::size_t k = 0; k < plane; ++k) hard[k] = z[plane + k] > z[k] ? 1.0f : 0.0f;
        if (samples[i].disc_mask.empty()) throw ArgumentError("evaluate: sample '" + samples[i].id + "' has no mask");
        total += metrics::dice_eval(hard, samples[i].disc_mask.reshaped(hard.shape()));
      }
      report.dice = total / static_cast<double>(samples.size());
      report.n = static_cast<int>(samples.size());
      break;
    }
  }
  return report;
}

double soft_dice(const NetworkGraph& net, std::span<const Sample> samples) {
  if (samples.empty()) throw ArgumentError("soft_dice: no samples");
  const auto outputs = predict_outputs(net, nets::Task::Segment, samples);
  const int n = static_cast<int>(samples.size()), h = samples[0].size(), w = h;
  Tensor probs({n, h, w}), masks({n, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const Tensor p = losses::foreground_probs(outputs[i].reshaped({1, 2, h, w}));
    std::copy(p.data().begin(), p.data().end(), probs.data().begin() + i * plane);
    std::copy(samples[i].disc_mask.data().begin(), samples[i].disc_mask.data().end(),
              masks.data().begin() + i * plane);
  }
  return losses::dice(probs, masks);
}

}  // namespace fundus::train
