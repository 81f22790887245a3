#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fundus/graph.hpp"

namespace fundus::nets {

/// How the fovea network merges block-4 and block-5 features.
enum class FeatureMixing {
  None,    // plain VGG-style regressor on block 5
  Concat,  // upsample block 5, concatenate with block 4, fuse with a 1x1 conv
  Sum,     // upsample block 5 and add it to block 4
};

FeatureMixing parse_mixing(const std::string& name);
const char* mixing_name(FeatureMixing mixing);

struct NetConfig {
  int input_size = 64;       // square input; reference scale is 512
  int base_channels = 8;
  double depth_scale = 0.25;  // fraction of the reference block counts
  int num_classes = 2;
  std::vector<int> aspp_rates{1, 2, 4};
  bool aspp_image_pool = true;
  FeatureMixing mixing = FeatureMixing::Concat;
  std::uint64_t seed = 0;

  /// Throws ConfigError when an invariant is violated.
  void validate() const;
};

/// Reference-scale block counts.
inline const std::vector<int> kResNet50Blocks{3, 4, 6, 3};
inline const std::vector<int> kResNet34Blocks{3, 4, 6, 3};
inline const std::vector<int> kVgg19Convs{2, 2, 4, 4, 4};

/// max(1, round(reference * depth_scale)).
int scaled_count(int reference, double depth_scale);

/// Residual classifier: N x 3 x s x s -> N x num_classes logits. Uses
/// bottleneck blocks at depth_scale 1 and basic blocks below it.
NetworkGraph build_classifier(const NetConfig& cfg);

/// VGG-style coordinate regressor with block-4/5 feature mixing:
/// N x 3 x s x s -> N x 2 in (0, 1).
NetworkGraph build_fovea_net(const NetConfig& cfg);

/// Residual-encoder / U-shaped-decoder segmenter with ASPP at the bottleneck.
/// Inputs: the (s, s/2, s/4) pyramid; output N x 2 x s x s logits.
NetworkGraph build_disc_seg_net(const NetConfig& cfg);

enum class Task { Classify, Fovea, Segment };

Task parse_task(const std::string& name);
const char* task_name(Task task);
NetworkGraph build_for_task(Task task, const NetConfig& cfg);

}  // namespace fundus::nets
