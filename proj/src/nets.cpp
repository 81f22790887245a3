#include "fundus/nets.hpp"

#include <cmath>

#include "fundus/errors.hpp"

namespace fundus::nets {

void NetConfig::validate() const {
  if (input_size < 32 || input_size % 32 != 0) {
    throw ConfigError("input_size must be a positive multiple of 32, got " + std::to_string(input_size));
  }
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (!(depth_scale > 0.0 && depth_scale <= 1.0)) throw ConfigError("depth_scale must lie in (0, 1]");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (aspp_rates.empty() || aspp_rates.front() != 1) throw ConfigError("aspp_rates must be nonempty and start with 1");
  for (int r : aspp_rates)
    if (r < 1) throw ConfigError("aspp_rates must be positive");
}

int scaled_count(int reference, double depth_scale) {
  return std::max(1, static_cast<int>(std::lround(reference * depth_scale)));
}

namespace {

struct Feature {
  int node;
  int channels;
};

class Builder {
 public:
  explicit Builder(std::uint64_t seed) : g(seed) {}

  Feature conv_bn_relu(const std::string& name, Feature in, int out_ch, int k, int stride = 1, int pad = -1,
                       int dilation = 1) {
    if (pad < 0) pad = dilation * (k / 2);
    int x = g.add_conv(name + ".conv", in.node, in.channels, out_ch, k, stride, pad, dilation, false);
    x = g.add_batchnorm(name + ".bn", x, out_ch);
    x = g.add_relu(name + ".relu", x);
    return {x, out_ch};
  }

  // conv3x3-bn-relu-conv3x3-bn (+ projected shortcut) - relu
  Feature basic_block(const std::string& name, Feature in, int out_ch, int stride) {
    int x = g.add_conv(name + ".conv1", in.node, in.channels, out_ch, 3, stride, 1, 1, false);
    x = g.add_batchnorm(name + ".bn1", x, out_ch);
    x = g.add_relu(name + ".relu1", x);
    x = g.add_conv(name + ".conv2", x, out_ch, out_ch, 3, 1, 1, 1, false);
    x = zero_scale(g.add_batchnorm(name + ".bn2", x, out_ch));
    const int skip = shortcut(name, in, out_ch, stride);
    x = g.add_add(name + ".add", x, skip);
    return {g.add_relu(name + ".relu", x), out_ch};
  }

  // conv1x1-bn-relu-conv3x3-bn-relu-conv1x1-bn (+ shortcut) - relu; output 4*width
  Feature bottleneck_block(const std::string& name, Feature in, int width, int stride) {
    const int out_ch = 4 * width;
    int x = g.add_conv(name + ".conv1", in.node, in.channels, width, 1, 1, 0, 1, false);
    x = g.add_batchnorm(name + ".bn1", x, width);
    x = g.add_relu(name + ".relu1", x);
    x = g.add_conv(name + ".conv2", x, width, width, 3, stride, 1, 1, false);
    x = g.add_batchnorm(name + ".bn2", x, width);
    x = g.add_relu(name + ".relu2", x);
    x = g.add_conv(name + ".conv3", x, width, out_ch, 1, 1, 0, 1, false);
    x = zero_scale(g.add_batchnorm(name + ".bn3", x, out_ch));
    const int skip = shortcut(name, in, out_ch, stride);
    x = g.add_add(name + ".add", x, skip);
    return {g.add_relu(name + ".relu", x), out_ch};
  }

  NetworkGraph g;

 private:
  // The residual branch starts switched off, so every block begins as the identity.
  int zero_scale(int bn) {
    for (auto& p : g.nodes()[static_cast<std::size_t>(bn)].params)
      if (p.name == "scale") p.value = Tensor::zeros(p.value.shape());
    return bn;
  }

  int shortcut(const std::string& name, Feature in, int out_ch, int stride) {
    if (stride == 1 && in.channels == out_ch) return in.node;
    int s = g.add_conv(name + ".down.conv", in.node, in.channels, out_ch, 1, stride, 0, 1, false);
    return g.add_batchnorm(name + ".down.bn", s, out_ch);
  }
};

}  // namespace

NetworkGraph build_classifier(const NetConfig& cfg) {
  cfg.validate();
  if (cfg.num_classes != 2) throw ConfigError("classifier requires num_classes == 2");
  Builder b(cfg.seed);
  const int c = cfg.base_channels;
  const bool bottleneck = cfg.depth_scale >= 1.0;

  // Reference depth is the ResNet-50 layout: 7x7/2 stem, max pool, strided
  // first blocks in stages 2-4. Reduced-depth instances see a fraction of the
  // reference resolution, so the stem keeps full resolution and stages are
  // separated by 2x2 max pooling.
  Feature x{b.g.add_input("image"), 3};
  x = b.conv_bn_relu("stem", x, c, 7, bottleneck ? 2 : 1, 3);
  b.g.mark_stage("block1", x.node);
  x = {b.g.add_maxpool("stem.pool", x.node, 2, 2), x.channels};

  for (int layer = 0; layer < 4; ++layer) {
    const int width = c << layer;
    const int blocks = scaled_count(kResNet50Blocks[layer], cfg.depth_scale);
    const std::string stage = "layer" + std::to_string(layer + 1);
    if (layer > 0 && !bottleneck) x = {b.g.add_maxpool(stage + ".pool", x.node, 2, 2), x.channels};
    for (int i = 0; i < blocks; ++i) {
      const int stride = (i == 0 && layer > 0 && bottleneck) ? 2 : 1;
      const std::string name = stage + "." + std::to_string(i);
      x = bottleneck ? b.bottleneck_block(name, x, width, stride) : b.basic_block(name, x, width, stride);
    }
    b.g.mark_stage("block" + std::to_string(layer + 2), x.node);
  }

  const int pooled = b.g.add_global_avg_pool("head.pool", x.node);
  const int logits = b.g.add_linear("head.fc", pooled, x.channels, cfg.num_classes);
  b.g.mark_stage("head", logits);
  b.g.set_output(logits);
  return std::move(b.g);
}

NetworkGraph build_fovea_net(const NetConfig& cfg) {
  cfg.validate();
  Builder b(cfg.seed);
  const int c = cfg.base_channels;
  const int widths[5] = {c, 2 * c, 4 * c, 8 * c, 8 * c};

  Feature x{b.g.add_input("image"), 3};
  Feature block4{-1, 0};
  for (int blk = 0; blk < 5; ++blk) {
    const int convs = scaled_count(kVgg19Convs[blk], cfg.depth_scale);
    for (int i = 0; i < convs; ++i) {
      x = b.conv_bn_relu("block" + std::to_string(blk + 1) + "." + std::to_string(i), x, widths[blk], 3);
    }
    x = {b.g.add_maxpool("block" + std::to_string(blk + 1) + ".pool", x.node, 2, 2), x.channels};
    b.g.mark_stage("block" + std::to_string(blk + 1), x.node);
    if (blk == 3) block4 = x;
  }

  const int side4 = cfg.input_size / 16;
  Feature head_in = x;
  if (cfg.mixing != FeatureMixing::None) {
    const int up = b.g.add_resize("mix.up", x.node, side4, side4);
    if (cfg.mixing == FeatureMixing::Concat) {
      const int cat = b.g.add_concat("mix.concat", {block4.node, up});
      b.g.mark_stage("mix", cat);
      head_in = b.conv_bn_relu("mix.fuse", {cat, block4.channels + x.channels}, x.channels, 1, 1, 0);
    } else {
      if (block4.channels != x.channels) throw ConfigError("sum mixing needs equal block-4/5 widths");
      const int sum = b.g.add_add("mix.sum", block4.node, up);
      b.g.mark_stage("mix", sum);
      head_in = {sum, x.channels};
    }
  }

  const int pooled = b.g.add_global_avg_pool("head.pool", head_in.node);
  const int fc = b.g.add_linear("head.fc", pooled, head_in.channels, 2);
  const int coords = b.g.add_sigmoid("head.sigmoid", fc);
  b.g.mark_stage("head", coords);
  b.g.set_output(coords);
  return std::move(b.g);
}

NetworkGraph build_disc_seg_net(const NetConfig& cfg) {
  cfg.validate();
  Builder b(cfg.seed);
  const int s = cfg.input_size;
  const int c = cfg.base_channels;
  const int widths[5] = {c, 2 * c, 4 * c, 8 * c, 16 * c};

  const Feature full{b.g.add_input("image"), 3};
  const Feature half{b.g.add_input("image_half"), 3};
  const Feature quarter{b.g.add_input("image_quarter"), 3};

  // Encoder: block k runs at s / 2^(k-1).
  Feature enc[5];
  enc[0] = b.conv_bn_relu("block1.stem", full, widths[0], 3);
  b.g.mark_stage("block1", enc[0].node);
  for (int k = 1; k < 5; ++k) {
    const std::string blk = "block" + std::to_string(k + 1);
    Feature x{b.g.add_maxpool(blk + ".pool", enc[k - 1].node, 2, 2), enc[k - 1].channels};
    if (k == 1 || k == 2) {
      const Feature side = b.conv_bn_relu(blk + ".pyramid", k == 1 ? half : quarter, widths[0], 3);
      x = {b.g.add_concat(blk + ".pyramid_concat", {x.node, side.node}), x.channels + side.channels};
    }
    const int blocks = scaled_count(kResNet34Blocks[k - 1], cfg.depth_scale);
    for (int i = 0; i < blocks; ++i) x = b.basic_block(blk + "." + std::to_string(i), x, widths[k], 1);
    enc[k] = x;
    b.g.mark_stage(blk, x.node);
  }

  // ASPP at the bottleneck; every branch preserves the spatial extent.
  const int side = s / 16;
  const int branch_ch = std::max(1, widths[4] / 4);
  std::vector<int> branches;
  for (int rate : cfg.aspp_rates) {
    const std::string name = "aspp.rate" + std::to_string(rate);
    const int k = rate == 1 ? 1 : 3;
    branches.push_back(b.conv_bn_relu(name, enc[4], branch_ch, k, 1, rate == 1 ? 0 : rate, rate).node);
  }
  if (cfg.aspp_image_pool) {
    int p = b.g.add_global_avg_pool("aspp.image.pool", enc[4].node, true);
    p = b.g.add_conv("aspp.image.conv", p, widths[4], branch_ch, 1);
    p = b.g.add_relu("aspp.image.relu", p);
    branches.push_back(b.g.add_resize("aspp.image.up", p, side, side));
  }
  const int cat = b.g.add_concat("aspp.concat", branches);
  Feature x = b.conv_bn_relu("aspp.fuse", {cat, branch_ch * static_cast<int>(branches.size())}, widths[4], 1, 1, 0);
  b.g.mark_stage("bottleneck", x.node);

  // Decoder: deconv 2x -> concat lateral -> conv -> conv.
  for (int d = 0; d < 4; ++d) {
    const Feature lateral = enc[3 - d];
    const std::string name = "decoder" + std::to_string(d + 1);
    const int up = b.g.add_transposed_conv(name + ".deconv", x.node, x.channels, lateral.channels, 2, 2, 0);
    const int merged = b.g.add_concat(name + ".concat", {up, lateral.node});
    x = b.conv_bn_relu(name + ".conv1", {merged, 2 * lateral.channels}, lateral.channels, 3);
    x = b.conv_bn_relu(name + ".conv2", x, lateral.channels, 3);
    b.g.mark_stage(name, x.node);
  }

  const int logits = b.g.add_conv("head.conv", x.node, x.channels, 2, 1, 1, 0);
  b.g.mark_stage("head", logits);
  b.g.set_output(logits);
  return std::move(b.g);
}

Task parse_task(const std::string& name) {
  if (name == "classify") return Task::Classify;
  if (name == "fovea") return Task::Fovea;
  if (name == "segment") return Task::Segment;
  throw ConfigError("unknown task '" + name + "' (expected classify|fovea|segment)");
}

const char* task_name(Task task) {
  switch (task) {
    case Task::Classify: return "classify";
    case Task::Fovea: return "fovea";
    case Task::Segment: return "segment";
  }
  return "?";
}

FeatureMixing parse_mixing(const std::string& name) {
  if (name == "none") return FeatureMixing::None;
  if (name == "concat") return FeatureMixing::Concat;
  if (name == "sum") return FeatureMixing::Sum;
  throw ConfigError("unknown mixing '" + name + "' (expected none|concat|sum)");
}

const char* mixing_name(FeatureMixing mixing) {
  switch (mixing) {
    case FeatureMixing::None: return "none";
    case FeatureMixing::Concat: return "concat";
    case FeatureMixing::Sum: return "sum";
  }
  return "?";
}

NetworkGraph build_for_task(Task task, const NetConfig& cfg) {
  switch (task) {
    case Task::Classify: return build_classifier(cfg);
    case Task::Fovea: return build_fovea_net(cfg);
    case Task::Segment: return build_disc_seg_net(cfg);
  }
  throw ConfigError("unknown task");
}

}  // namespace fundus::nets
