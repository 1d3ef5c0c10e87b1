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

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "bevquery/model.hpp"

namespace bevquery {

struct SceneObject {
  OrientedBoxBEV box;
  int class_id = 0;
};

/// One synthetic frame: ground truth in the ego frame, the observation
/// raster, and the ego pose in the world frame.
struct Scene {
  std::vector<SceneObject> gt;
  ad::Tensor observation;  // [rows*cols x obs_channels]
  Pose2D ego_pose;
  double timestamp = 0.0;
};

struct SceneSequence {
  std::vector<Scene> frames;
};

struct SceneGenConfig {
  int grid_rows = 32;
  int grid_cols = 32;
  double extent_x = 8.0;
  double extent_y = 8.0;
  int num_classes = 2;
  int min_objects = 2;
  int max_objects = 5;
  /// Per-class {dim_min, dim_max, aspect_max}; width and length are drawn
  /// from [dim_min, dim_max] with length/width <= aspect_max.
  std::vector<std::array<double, 3>> class_dims = {{1.4, 2.0, 1.3}, {2.2, 3.0, 1.3}};
  double height_min = 0.8;
  double height_max = 2.0;
  double z_max = 0.5;
  double speed_max = 1.5;      // object speed, m/s
  double ego_speed_max = 0.0;  // ego translation speed, m/s
  double ego_yaw_rate_max = 0.0;
  double noise_sigma = 0.02;
  double dt = 0.5;
  double spawn_margin = 0.8;  // fraction of the extent where centers spawn
  double max_initial_iou = 0.05;
};

/// Deterministic synthetic scene sequence: boxes sampled without initial
/// overlap, constant-velocity motion, occupancy + class-intensity raster.
SceneSequence generate_scene(std::uint64_t seed, const SceneGenConfig & config, int frames);

struct MatchWeights {
  double w_cls = 2.0;
  double w_box = 0.25;
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (prediction index, gt index)
};

/// Minimum-cost assignment between eligible predictions and ground truths,
/// cost = w_cls * (1 - score of the gt class) + w_box * L1(box params).
MatchResult hungarian_match(
  const std::vector<Detection> & preds, const std::vector<SceneObject> & gts,
  const KeepSet & eligible, const MatchWeights & weights = {}, bool use_velocity = true);

struct LossBreakdown {
  std::vector<double> per_head;
  double total = 0.0;
};

/// The total training loss: per-head focal classification + L1 regression
/// over each head's eligible (non-suppressed) queries, lambda-weighted.
/// Stage 0 matches over every cell; decoder heads are gated by the mask
/// state after their own suppression block, and memory-origin queries drop
/// out when the memory-loss switch is off.
ad::Var total_loss(
  const ForwardOutput & out, const std::vector<SceneObject> & gts, const ModelConfig & config,
  const MatchWeights & weights = {}, LossBreakdown * breakdown = nullptr);

struct Metrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double ap = 0.0;
  double mean_center_error = 0.0;
  int tp = 0;
  int fp = 0;
  int fn = 0;
};

/// Greedy confidence-ordered matching at rotated BEV IoU >= threshold, one
/// match per gt, classes must agree; AP by all-point interpolation.
Metrics evaluate(
  const std::vector<Detection> & preds, const std::vector<SceneObject> & gts,
  double iou_threshold);

/// Pooled evaluation over several frames: predictions are ranked globally
/// but matched within their own frame.
Metrics evaluate_frames(
  const std::vector<std::vector<Detection>> & preds,
  const std::vector<std::vector<SceneObject>> & gts, double iou_threshold);

struct StepRecord {
  int step = 0;
  double loss = 0.0;
  std::optional<Metrics> eval;
};

/// Plain gradient descent with momentum over persistent leaves.
class SgdOptimizer {
public:
  SgdOptimizer(std::vector<ad::Var> params, double lr, double momentum);

  void step();
  void zero_grad();

private:
  std::vector<ad::Var> params_;
  std::vector<ad::Tensor> velocity_;
  double lr_;
  double momentum_;
};

struct TrainConfig {
  SceneGenConfig scenes;
  int steps = 300;
  int frames_per_scene = 1;
  /// 0 draws a fresh sequence every step; N > 0 cycles N fixed sequences.
  int dataset_size = 0;
  double lr = 2e-3;
  double momentum = 0.9;
  std::uint64_t data_seed = 1000;
  MatchWeights match;

  int eval_every = 100;
  int eval_sequences = 12;
  double eval_iou = 0.5;
  double eval_min_confidence = 0.3;
  double target_f1 = -1.0;  // early stop when reached (non-negative)

  /// Invoked after every optimizer step (progress streaming).
  std::function<void(const StepRecord &)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> log;
  double initial_loss = 0.0;
  double best_loss_first_300 = 0.0;
  Metrics final_eval;
  int steps_run = 0;
  bool hit_nan = false;
  int nan_step = -1;
};

/// Streaming trainer: a fresh deterministic scene sequence per step, one
/// optimizer step per frame; memory queue and previous-grid alignment are
/// maintained across the frames of a sequence when hybrid memory is on.
TrainResult train_model(GridQueryDetector & model, const TrainConfig & config);

/// Inference over held-out sequences, pooled metrics.
Metrics evaluate_model(
  GridQueryDetector & model, const TrainConfig & config, std::uint64_t seed_offset,
  int sequences);

}  // namespace bevquery
