// Copyright 2026 The bevquery Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <deque>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bevquery/geometry.hpp"
#include "bevquery/suppression.hpp"
#include "bevquery/tensor.hpp"

namespace bevquery {

/// Motion attributes of one remembered object relative to the current frame.
struct MotionAttributes {
  double dt = 0.0;
  Pose2D ego_delta;  // previous ego frame -> current ego frame
  double vx = 0.0;
  double vy = 0.0;

  MotionAttributes() = default;
  MotionAttributes(double dt, const Pose2D & ego_delta, double vx, double vy);
};

/// FIFO store of past detections with their feature rows and ego poses.
/// Boxes stay in the ego frame they were detected in; the recorded pose maps
/// them back to the world frame. Pushing beyond capacity evicts the oldest
/// frame; each frame keeps at most `per_frame_budget` entries (top by
/// confidence, ties by ascending source_index).
class MemoryQueue {
public:
  struct Entry {
    Detection detection;
    ad::Tensor features;  // [1 x C], detached from any past graph
  };
  struct Frame {
    double timestamp = 0.0;
    Pose2D ego_pose;
    std::vector<Entry> entries;
  };

  explicit MemoryQueue(int capacity_frames, int per_frame_budget = 300);

  void push(
    const std::vector<Detection> & detections, const std::vector<ad::Tensor> & features,
    const Pose2D & ego_pose, double timestamp);

  bool empty() const { return frames_.empty(); }
  int frame_count() const { return static_cast<int>(frames_.size()); }
  /// Frames ordered oldest first.
  const Frame & frame(int i) const { return frames_[i]; }
  std::size_t total_entries() const;
  int capacity_frames() const { return capacity_; }
  int per_frame_budget() const { return budget_; }
  void clear() { frames_.clear(); }

private:
  int capacity_;
  int budget_;
  std::deque<Frame> frames_;
};

struct AlignedMemoryEntry {
  Detection detection;  // box expressed in the current ego frame
  ad::Tensor features;
  MotionAttributes motion;
};

/// Expresses every stored detection in the current ego frame, newest frame
/// first. The per-entry pose delta is inverse(current_pose) * stored_pose.
std::vector<AlignedMemoryEntry> align_memory(
  const MemoryQueue & queue, const Pose2D & current_pose, double current_time);

/// Residual MLP over explicit motion attributes:
/// features + MLP([dt, tx, ty, sin theta, cos theta, vx, vy]).
/// With velocity disabled the two trailing inputs are dropped.
class MotionEncoder {
public:
  MotionEncoder() = default;
  MotionEncoder(int feature_width, int hidden_width, bool use_velocity, std::mt19937_64 & rng);

  ad::Var encode(const ad::Var & features, const std::vector<MotionAttributes> & motion) const;

  /// Same computation with the motion-attribute rows supplied as a graph
  /// node, so gradients with respect to them are observable.
  ad::Var encode_inputs(const ad::Var & features, const ad::Var & inputs) const;

  /// Packs motion attributes into the MLP input rows.
  static ad::Tensor motion_inputs(
    const std::vector<MotionAttributes> & motion, bool use_velocity);

  std::vector<std::pair<std::string, ad::Var>> parameters(const std::string & prefix) const;

private:
  bool use_velocity_;
  ad::Var w1_, b1_, w2_, b2_;
};

enum class RotationCenterMode { kGridCenter, kFixed };

struct GridAlignConfig {
  int rows = 0;  // n
  int cols = 0;  // m
  double extent_x = 0.0;
  double extent_y = 0.0;
  RotationCenterMode mode = RotationCenterMode::kGridCenter;
  // Rotation pivot in cell coordinates, used by kFixed.
  double fixed_cx = 100.0;
  double fixed_cy = 100.0;
};

/// Resamples previous-frame grid features [rows*cols x C] into the current
/// frame (bilinear, zero padding). `ego_delta` maps previous-frame
/// coordinates into current-frame coordinates. kGridCenter rotates about the
/// true grid center; kFixed reproduces rotating about a hard-coded cell.
ad::Tensor align_bev_grid(
  const ad::Tensor & features, const GridAlignConfig & config, const Pose2D & ego_delta);

/// Switches of the object-centric memory integration: whether memory queries
/// join the matching loss and whether they join NMS / the attention mask.
struct MemoryIntegration {
  bool include_in_loss = true;
  bool include_in_mask = true;
};

}  // namespace bevquery
