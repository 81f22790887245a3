#include <catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "fundus/errors.hpp"
#include "fundus/parallel.hpp"
#include "fundus/train.hpp"
#include "support.hpp"

using namespace fundus;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

train::TrainConfig small_config(nets::Task task) {
  train::TrainConfig cfg;
  cfg.task = task;
  cfg.net.input_size = 32;
  cfg.net.base_channels = 4;
  cfg.batch_size = 3;
  cfg.steps = 20;
  cfg.seed = 5;
  return cfg;
}

std::vector<Sample> small_data(int n = 3) {
  synth::SynthParams p;
  p.size = 32;
  return synth::generate_samples(p, n);
}

}  // namespace

TEST_CASE("optimizer steps on a scalar quadratic") {
  SECTION("zero gradient leaves parameters unchanged and advances time") {
    Tensor w({3}, {1.0f, -2.0f, 0.5f});
    const Tensor before = w;
    std::vector<Tensor*> ps{&w};
    const std::vector<Tensor> gs{Tensor({3})};
    train::OptimizerState adam;
    train::adam_step(ps, gs, adam, 1e-2);
    train::adam_step(ps, gs, adam, 1e-2);
    CHECK(w == before);
    CHECK(adam.t == 2);
    train::OptimizerState sgd;
    sgd.kind = train::Optimizer::SgdMomentum;
    train::sgd_momentum_step(ps, gs, sgd, 1e-2);
    CHECK(w == before);
    CHECK(sgd.t == 1);
  }
  SECTION("plain gradient descent decreases w^2 monotonically") {
    Tensor w({1}, {1.0f});
    std::vector<Tensor*> ps{&w};
    train::OptimizerState st;
    st.kind = train::Optimizer::SgdMomentum;
    double prev = 1.0;
    for (int i = 0; i < 50; ++i) {
      train::sgd_momentum_step(ps, std::vector<Tensor>{Tensor({1}, {2.0f * w[0]})}, st, 0.1, 0.0);
      const double f = double(w[0]) * w[0];
      CHECK(f < prev);
      prev = f;
    }
  }
  SECTION("default momentum converges on w^2") {
    Tensor w({1}, {1.0f});
    std::vector<Tensor*> ps{&w};
    train::OptimizerState st;
    st.kind = train::Optimizer::SgdMomentum;
    for (int i = 0; i < 100; ++i) train::sgd_momentum_step(ps, std::vector<Tensor>{Tensor({1}, {2.0f * w[0]})}, st, 0.1);
    CHECK(std::abs(w[0]) < 1e-2);
    CHECK_THROWS_AS(train::sgd_momentum_step(ps, std::vector<Tensor>{Tensor({1})}, st, 0.1, 1.0), ArgumentError);
  }
  SECTION("100 adam steps reach |w| < 1e-2, matching a direct simulation") {
    Tensor w({1}, {1.0f});
    std::vector<Tensor*> ps{&w};
    train::OptimizerState st;
    double sw = 1.0, m = 0, v = 0;
    for (int t = 1; t <= 100; ++t) {
      train::adam_step(ps, std::vector<Tensor>{Tensor({1}, {2.0f * w[0]})}, st, 0.1);
      const double g = 2.0 * static_cast<float>(sw);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      sw = static_cast<float>(sw - 0.1 * mh / (std::sqrt(vh) + 1e-8));
    }
    CHECK(std::abs(w[0]) < 1e-2);
    CHECK(std::abs(w[0] - sw) < 1e-6);
  }
  SECTION("shape mismatch") {
    Tensor w({2});
    std::vector<Tensor*> ps{&w};
    train::OptimizerState st;
    CHECK_THROWS_AS(train::adam_step(ps, std::vector<Tensor>{Tensor({3})}, st, 0.1), DimensionError);
    CHECK_THROWS_AS(train::adam_step(ps, std::vector<Tensor>{}, st, 0.1), DimensionError);
  }
}

TEST_CASE("train config validation") {
  train::TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(train::parse_optimizer("adam") == train::Optimizer::Adam);
  CHECK(train::parse_optimizer("sgd-momentum") == train::Optimizer::SgdMomentum);
  CHECK_THROWS_AS(train::parse_optimizer("rmsprop"), ConfigError);
}

TEST_CASE("batch assembly") {
  const auto data = small_data(2);
  std::vector<const Sample*> ptrs{&data[0], &data[1], &data[2]};
  const auto seg = train::make_batch(nets::Task::Segment, ptrs);
  REQUIRE(seg.inputs.size() == 3);
  CHECK(seg.inputs[0].shape() == Shape{3, 3, 32, 32});
  CHECK(seg.inputs[1].shape() == Shape{3, 3, 16, 16});
  CHECK(seg.inputs[2].shape() == Shape{3, 3, 8, 8});
  CHECK(seg.masks.shape() == Shape{3, 32, 32});
  const auto cls = train::make_batch(nets::Task::Classify, ptrs);
  CHECK(cls.inputs.size() == 1);
  CHECK(cls.labels == std::vector<int>{0, 1, 0});
  const auto fov = train::make_batch(nets::Task::Fovea, ptrs);
  CHECK(fov.fovea.shape() == Shape{3, 2});
  CHECK(fov.fovea[2] == static_cast<float>(data[1].fovea_x));
}

TEST_CASE("a non-finite loss aborts with diagnostics and leaves parameters untouched") {
  auto data = small_data(1);
  data[0].image[10] = std::numeric_limits<float>::quiet_NaN();
  auto cfg = small_config(nets::Task::Classify);
  cfg.batch_size = 2;
  train::Trainer tr(cfg, data);
  const auto before = train::collect_tensors(tr.net());
  try {
    tr.step();
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("lr=") != std::string::npos);
    CHECK(msg.find("grad_norm=") != std::string::npos);
  }
  const auto after = train::collect_tensors(tr.net());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value == after[i].value);
}

TEST_CASE("loss history is reproducible for a fixed seed") {
  const int threads = num_threads();
  set_num_threads(1);
  for (auto task : {nets::Task::Classify, nets::Task::Fovea, nets::Task::Segment}) {
    auto cfg = small_config(task);
    cfg.steps = 6;
    cfg.augment_copies = 1;
    const auto a = train::train_loop(cfg, small_data());
    const auto b = train::train_loop(cfg, small_data());
    CHECK(a.history == b.history);
    CHECK(a.history.size() == 6);
    cfg.seed = 6;
    CHECK(train::train_loop(cfg, small_data()).history != a.history);
  }
  set_num_threads(threads);
}

TEST_CASE("checkpoint round trip") {
  const auto dir = testing::scratch_dir("ckpt");
  for (auto opt : {train::Optimizer::Adam, train::Optimizer::SgdMomentum}) {
    auto cfg = small_config(nets::Task::Segment);
    cfg.optimizer = opt;
    cfg.steps = 3;
    train::Trainer tr(cfg, small_data());
    tr.run();
    tr.save_checkpoint(dir / "a.fnkt");
    const auto ck = train::read_checkpoint(dir / "a.fnkt");
    const auto live = tr.checkpoint();
    REQUIRE(ck.tensors.size() == live.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      CHECK(ck.tensors[i].name == live.tensors[i].name);
      CHECK(ck.tensors[i].value == live.tensors[i].value);
    }
    CHECK(ck.optimizer.t == live.optimizer.t);
    CHECK(ck.optimizer.m == live.optimizer.m);
    CHECK(ck.optimizer.v == live.optimizer.v);
    CHECK(ck.rng_state == live.rng_state);
    CHECK(ck.step == 3);
    CHECK(ck.history == tr.history());
    CHECK(ck.bn_updates == live.bn_updates);

    train::write_checkpoint(dir / "b.fnkt", ck);
    CHECK(read_bytes(dir / "a.fnkt") == read_bytes(dir / "b.fnkt"));

    auto net = train::load_network(ck);
    CHECK(train::collect_tensors(net).size() == ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) CHECK(train::collect_tensors(net)[i].value == ck.tensors[i].value);
  }
}

TEST_CASE("checkpoint header layout") {
  auto cfg = small_config(nets::Task::Classify);
  train::Trainer tr(cfg, small_data(1));
  const auto bytes = train::serialize_checkpoint(tr.checkpoint());
  REQUIRE(bytes.size() > 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "FNKT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  const std::uint32_t count = bytes[8] | bytes[9] << 8 | bytes[10] << 16 | std::uint32_t(bytes[11]) << 24;
  CHECK(count == tr.checkpoint().tensors.size());
  // First tensor: name length, name, rank, extents.
  const std::uint32_t len = bytes[12] | bytes[13] << 8;
  CHECK(std::string(bytes.begin() + 16, bytes.begin() + 16 + len) == "stem.conv.weight");
}

TEST_CASE("corrupted or mismatched checkpoints fail before any state is written") {
  const auto dir = testing::scratch_dir("corrupt");
  auto cfg = small_config(nets::Task::Classify);
  cfg.steps = 2;
  train::Trainer donor(cfg, small_data(1));
  donor.run();
  donor.save_checkpoint(dir / "good.fnkt");
  const auto good = read_bytes(dir / "good.fnkt");

  train::Trainer fresh(cfg, small_data(1));
  const auto before = train::collect_tensors(fresh.net());
  auto unchanged = [&] {
    const auto now = train::collect_tensors(fresh.net());
    for (std::size_t i = 0; i < now.size(); ++i)
      if (!(now[i].value == before[i].value)) return false;
    return fresh.steps_taken() == 0;
  };

  for (std::size_t at : {std::size_t(0), std::size_t(2), std::size_t(4), std::size_t(8)}) {
    auto bad = good;
    bad[at] ^= 0x5a;
    write_bytes(dir / "bad.fnkt", bad);
    CHECK_THROWS_AS(fresh.load_checkpoint(dir / "bad.fnkt"), ParseError);
    CHECK(unchanged());
  }
  auto trunc = good;
  trunc.resize(good.size() / 2);
  write_bytes(dir / "trunc.fnkt", trunc);
  CHECK_THROWS_AS(fresh.load_checkpoint(dir / "trunc.fnkt"), ParseError);
  auto extra = good;
  extra.push_back(0);
  write_bytes(dir / "extra.fnkt", extra);
  CHECK_THROWS_AS(fresh.load_checkpoint(dir / "extra.fnkt"), ParseError);
  CHECK(unchanged());
  try {
    auto bad = good;
    bad[0] = 'X';
    train::parse_checkpoint(bad, "x.fnkt");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("x.fnkt") != std::string::npos);
  }

  // A checkpoint of another architecture.
  auto other_cfg = cfg;
  other_cfg.net.base_channels = 6;
  train::Trainer other(other_cfg, small_data(1));
  other.save_checkpoint(dir / "other.fnkt");
  CHECK_THROWS(fresh.load_checkpoint(dir / "other.fnkt"));
  CHECK(unchanged());
  auto net = nets::build_classifier(cfg.net);
  const auto net_before = train::collect_tensors(net);
  try {
    train::apply_tensors(net, train::read_checkpoint(dir / "other.fnkt"));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("stem.conv.weight") != std::string::npos);
  }
  const auto net_after = train::collect_tensors(net);
  for (std::size_t i = 0; i < net_after.size(); ++i) CHECK(net_after[i].value == net_before[i].value);
}

TEST_CASE("resume reproduces the uninterrupted trajectory") {
  const int threads = num_threads();
  set_num_threads(1);
  const auto dir = testing::scratch_dir("resume");
  for (auto task : {nets::Task::Classify, nets::Task::Segment}) {
    auto cfg = small_config(task);
    cfg.steps = 15;
    cfg.batch_size = 2;  // smaller than the pool, so the batch rng matters
    cfg.checkpoint_every = 5;
    cfg.checkpoint_dir = dir / nets::task_name(task);
    train::Trainer full(cfg, small_data());
    full.run();
    CHECK(fs::exists(cfg.checkpoint_dir / "step_000005.fnkt"));
    CHECK(fs::exists(cfg.checkpoint_dir / "step_000015.fnkt"));

    auto cfg2 = cfg;
    cfg2.checkpoint_every = 0;
    train::Trainer resumed(cfg2, small_data());
    resumed.load_checkpoint(cfg.checkpoint_dir / "step_000005.fnkt");
    CHECK(resumed.steps_taken() == 5);
    resumed.run();
    CHECK(resumed.history() == full.history());
    CHECK(resumed.history()[14] == full.history()[14]);
    CHECK(train::serialize_checkpoint(resumed.checkpoint()) == read_bytes(cfg.checkpoint_dir / "step_000015.fnkt"));
  }
  set_num_threads(threads);
}

TEST_CASE("evaluation reports per task") {
  const auto data = small_data(2);
  for (auto task : {nets::Task::Classify, nets::Task::Fovea, nets::Task::Segment}) {
    auto cfg = small_config(task);
    cfg.steps = 2;
    train::Trainer tr(cfg, data);
    tr.run();
    const auto r = train::evaluate(tr.net(), task, data);
    CHECK(r.n == 4);
    CHECK(r.serialize() == train::evaluate(tr.net(), task, data).serialize());
    if (task == nets::Task::Classify) {
      CHECK(r.auc.has_value());
      CHECK(r.accuracy.has_value());
    } else if (task == nets::Task::Fovea) {
      CHECK(r.mean_euclid.has_value());
      CHECK(r.var_euclid.has_value());
    } else {
      CHECK(r.dice.has_value());
      const double sd = train::soft_dice(tr.net(), data);
      CHECK((sd >= 0.0 && sd <= 1.0));
    }
  }
}
