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

#include "bevquery/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace bevquery {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct WorldObject {
  OrientedBoxBEV box;  // world frame
  int class_id = 0;
};

void rasterize(
  Scene & scene, const SceneGenConfig & config, std::mt19937_64 & rng)
{
  const int n = config.grid_rows;
  const int m = config.grid_cols;
  const double dx = 2.0 * config.extent_x / m;
  const double dy = 2.0 * config.extent_y / n;
  const double cell_area = dx * dy;

  scene.observation = ad::Tensor(n * m, 2);
  for (const SceneObject & obj : scene.gt) {
    const ConvexPolygon poly = box_corners(obj.box);
    double min_x = 1e300, max_x = -1e300, min_y = 1e300, max_y = -1e300;
    for (const Vec2 & v : poly.vertices) {
      min_x = std::min(min_x, v.x);
      max_x = std::max(max_x, v.x);
      min_y = std::min(min_y, v.y);
      max_y = std::max(max_y, v.y);
    }
    const int j0 = std::max(0, static_cast<int>(std::floor((min_x + config.extent_x) / dx)));
    const int j1 = std::min(m - 1, static_cast<int>(std::floor((max_x + config.extent_x) / dx)));
    const int i0 = std::max(0, static_cast<int>(std::floor((min_y + config.extent_y) / dy)));
    const int i1 = std::min(n - 1, static_cast<int>(std::floor((max_y + config.extent_y) / dy)));
    const double intensity = static_cast<double>(obj.class_id + 1) / config.num_classes;

    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        ConvexPolygon cell;
        const double x = -config.extent_x + j * dx;
        const double y = -config.extent_y + i * dy;
        cell.vertices = {{x, y}, {x + dx, y}, {x + dx, y + dy}, {x, y + dy}};
        const double coverage = convex_intersection_area(cell, poly) / cell_area;
        if (coverage <= 0.0) {
          continue;
        }
        const int row = i * m + j;
        scene.observation.at(row, 0) = std::min(1.0, scene.observation.at(row, 0) + coverage);
        scene.observation.at(row, 1) =
          std::max(scene.observation.at(row, 1), intensity * coverage);
      }
    }
  }

  if (config.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (std::size_t i = 0; i < scene.observation.size(); ++i) {
      scene.observation[i] += noise(rng);
    }
  }
}

}  // namespace

SceneSequence generate_scene(std::uint64_t seed, const SceneGenConfig & config, int frames)
{
  if (frames < 1) {
    throw std::invalid_argument("need at least one frame");
  }
  if (config.class_dims.size() < static_cast<std::size_t>(config.num_classes)) {
    throw std::invalid_argument("need a size range per class");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count_dist(config.min_objects, config.max_objects);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);

  const double span_x = config.spawn_margin * config.extent_x;
  const double span_y = config.spawn_margin * config.extent_y;

  for (int attempt = 0; attempt < 64; ++attempt) {
    const int count = count_dist(rng);
    std::vector<WorldObject> objects;
    bool packed = true;
    for (int k = 0; k < count; ++k) {
      bool placed = false;
      for (int tries = 0; tries < 200; ++tries) {
        const int cls = static_cast<int>(rng() % config.num_classes);
        const auto & dims = config.class_dims[cls];
        const double width = dims[0] + (dims[1] - dims[0]) * unit(rng);
        const double max_len = std::min(dims[1], width * dims[2]);
        const double min_len = std::max(dims[0], width / dims[2]);
        const double length = min_len + (max_len - min_len) * unit(rng);
        const double speed = config.speed_max * unit(rng);
        const double heading = angle(rng);

        WorldObject obj;
        obj.class_id = cls;
        obj.box = OrientedBoxBEV(
          -span_x + 2.0 * span_x * unit(rng), -span_y + 2.0 * span_y * unit(rng),
          -config.z_max + 2.0 * config.z_max * unit(rng), width, length,
          config.height_min + (config.height_max - config.height_min) * unit(rng), angle(rng),
          speed * std::cos(heading), speed * std::sin(heading));

        bool overlaps = false;
        for (const WorldObject & other : objects) {
          if (rotated_iou(obj.box, other.box) >= config.max_initial_iou) {
            overlaps = true;
            break;
          }
        }
        if (!overlaps) {
          objects.push_back(obj);
          placed = true;
          break;
        }
      }
      if (!placed) {
        packed = false;
        break;
      }
    }
    if (!packed) {
      continue;
    }

    // ego motion: constant velocity and yaw rate in the world frame
    const double ego_speed = config.ego_speed_max * unit(rng);
    const double ego_heading = angle(rng);
    const double ego_yaw_rate = config.ego_yaw_rate_max * (2.0 * unit(rng) - 1.0);

    SceneSequence sequence;
    bool in_bounds = true;
    for (int f = 0; f < frames && in_bounds; ++f) {
      const double t = f * config.dt;
      Scene scene;
      scene.timestamp = t;
      scene.ego_pose = Pose2D(
        ego_speed * std::cos(ego_heading) * t, ego_speed * std::sin(ego_heading) * t,
        normalize_angle(ego_yaw_rate * t));
      const Pose2D world_to_ego = inverse(scene.ego_pose);

      for (const WorldObject & obj : objects) {
        OrientedBoxBEV world_box = obj.box;
        world_box.cx += obj.box.vx * t;
        world_box.cy += obj.box.vy * t;
        const OrientedBoxBEV ego_box = transform_box(world_box, world_to_ego);
        if (
          std::abs(ego_box.cx) > 0.98 * config.extent_x ||
          std::abs(ego_box.cy) > 0.98 * config.extent_y) {
          in_bounds = false;
          break;
        }
        scene.gt.push_back({ego_box, obj.class_id});
      }
      if (!in_bounds) {
        break;
      }
      rasterize(scene, config, rng);
      sequence.frames.push_back(std::move(scene));
    }
    if (in_bounds) {
      return sequence;
    }
  }
  throw std::runtime_error("scene packing failed after bounded rejection sampling");
}

namespace {

double box_param_l1(const Detection & pred, const SceneObject & gt, bool use_velocity)
{
  const OrientedBoxBEV & p = pred.box;
  const OrientedBoxBEV & g = gt.box;
  double cost = std::abs(p.cx - g.cx) + std::abs(p.cy - g.cy) + std::abs(p.z - g.z) +
                std::abs(p.width - g.width) + std::abs(p.length - g.length) +
                std::abs(p.height - g.height) + std::abs(std::sin(p.yaw) - std::sin(g.yaw)) +
                std::abs(std::cos(p.yaw) - std::cos(g.yaw));
  if (use_velocity) {
    cost += std::abs(p.vx - g.vx) + std::abs(p.vy - g.vy);
  }
  return cost;
}

// Jonker-style shortest augmenting path assignment; needs rows <= cols.
// Returns col index per row.
std::vector<int> solve_assignment(const std::vector<std::vector<double>> & cost)
{
  const int n = static_cast<int>(cost.size());
  const int m = n == 0 ? 0 : static_cast<int>(cost[0].size());
  constexpr double kInf = std::numeric_limits<double>::infinity();

  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) {
          continue;
        }
        const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= m; ++j) {
    if (p[j] > 0) {
      row_to_col[p[j] - 1] = j - 1;
    }
  }
  return row_to_col;
}

}  // namespace

MatchResult hungarian_match(
  const std::vector<Detection> & preds, const std::vector<SceneObject> & gts,
  const KeepSet & eligible, const MatchWeights & weights, bool use_velocity)
{
  MatchResult result;
  const int n_gt = static_cast<int>(gts.size());
  const int n_el = static_cast<int>(eligible.kept.size());
  if (n_gt == 0 || n_el == 0) {
    return result;
  }

  // cost[pred][gt] over eligible predictions only
  std::vector<std::vector<double>> cost(n_el, std::vector<double>(n_gt));
  for (int e = 0; e < n_el; ++e) {
    const Detection & pred = preds[eligible.kept[e]];
    for (int g = 0; g < n_gt; ++g) {
      const double cls_score = gts[g].class_id < static_cast<int>(pred.class_scores.size())
                                 ? pred.class_scores[gts[g].class_id]
                                 : 0.0;
      cost[e][g] = weights.w_cls * (1.0 - cls_score) +
                   weights.w_box * box_param_l1(pred, gts[g], use_velocity);
    }
  }

  if (n_gt <= n_el) {
    // rows = gts
    std::vector<std::vector<double>> transposed(n_gt, std::vector<double>(n_el));
    for (int e = 0; e < n_el; ++e) {
      for (int g = 0; g < n_gt; ++g) {
        transposed[g][e] = cost[e][g];
      }
    }
    const std::vector<int> gt_to_pred = solve_assignment(transposed);
    for (int g = 0; g < n_gt; ++g) {
      if (gt_to_pred[g] >= 0) {
        result.pairs.emplace_back(eligible.kept[gt_to_pred[g]], g);
      }
    }
  } else {
    const std::vector<int> pred_to_gt = solve_assignment(cost);
    for (int e = 0; e < n_el; ++e) {
      if (pred_to_gt[e] >= 0) {
        result.pairs.emplace_back(eligible.kept[e], pred_to_gt[e]);
      }
    }
    std::sort(result.pairs.begin(), result.pairs.end(), [](const auto & a, const auto & b) {
      return a.second < b.second;
    });
  }
  return result;
}

namespace {

ad::Var head_loss(
  const HeadOutput & head, const std::vector<SceneObject> & gts, const KeepSet & eligible,
  const ModelConfig & config, const MatchWeights & weights)
{
  const int n_el = static_cast<int>(eligible.kept.size());
  const int k_classes = config.num_classes;
  const int d = config.reg_width();
  if (n_el == 0) {
    return ad::constant(ad::Tensor::scalar(0.0));
  }

  const MatchResult match = hungarian_match(head.detections, gts, eligible, weights,
                                            config.use_velocity);
  const double denom = std::max<std::size_t>(1, gts.size());

  // focal classification over every eligible query; matched rows carry the
  // one-hot gt class, the rest are background
  ad::Tensor cls_targets(n_el, k_classes);
  std::vector<int> local_of(head.detections.size(), -1);
  for (int e = 0; e < n_el; ++e) {
    local_of[eligible.kept[e]] = e;
  }
  for (const auto & [pred, gt] : match.pairs) {
    cls_targets.at(local_of[pred], gts[gt].class_id) = 1.0;
  }
  const ad::Var cls_sum = ad::focal_loss_sum(
    ad::gather_rows(head.cls_logits, eligible.kept), cls_targets, 0.25, 2.0);
  ad::Var loss = ad::scale(cls_sum, weights.w_cls / denom);

  if (!match.pairs.empty()) {
    std::vector<int> matched_rows;
    matched_rows.reserve(match.pairs.size());
    ad::Tensor reg_targets(static_cast<int>(match.pairs.size()), d);
    for (std::size_t r = 0; r < match.pairs.size(); ++r) {
      const auto & [pred, gt] = match.pairs[r];
      matched_rows.push_back(pred);
      const OrientedBoxBEV & g = gts[gt].box;
      const OrientedBoxBEV & ref = head.refs[pred];
      const int row = static_cast<int>(r);
      reg_targets.at(row, 0) = g.cx;
      reg_targets.at(row, 1) = g.cy;
      reg_targets.at(row, 2) = g.z;
      reg_targets.at(row, 3) = std::log(g.width);
      reg_targets.at(row, 4) = std::log(g.length);
      reg_targets.at(row, 5) = std::log(std::max(1e-6, g.height));
      reg_targets.at(row, 6) = std::sin(g.yaw - ref.yaw);
      reg_targets.at(row, 7) = std::cos(g.yaw - ref.yaw);
      if (config.use_velocity) {
        reg_targets.at(row, 8) = g.vx;
        reg_targets.at(row, 9) = g.vy;
      }
    }
    const ad::Var reg_sum = ad::l1(
      ad::gather_rows(head.loss_params, matched_rows), reg_targets, ad::Reduction::kSum);
    loss = ad::add(loss, ad::scale(reg_sum, weights.w_box / denom));
  }
  return loss;
}

}  // namespace

ad::Var total_loss(
  const ForwardOutput & out, const std::vector<SceneObject> & gts, const ModelConfig & config,
  const MatchWeights & weights, LossBreakdown * breakdown)
{
  const std::vector<double> lambdas = config.lambdas();
  std::vector<ad::Var> terms;
  if (breakdown) {
    breakdown->per_head.clear();
  }

  // stage 0: every cell is eligible, nothing is suppressed yet
  if (out.has_stage0) {
    KeepSet all;
    all.kept.resize(out.stage0.detections.size());
    for (std::size_t i = 0; i < all.kept.size(); ++i) {
      all.kept[i] = static_cast<int>(i);
    }
    ad::Var stage0 = ad::scale(head_loss(out.stage0, gts, all, config, weights), lambdas[0]);
    if (breakdown) {
      breakdown->per_head.push_back(stage0->value.item());
    }
    terms.push_back(std::move(stage0));
  } else if (breakdown) {
    breakdown->per_head.push_back(0.0);
  }

  for (std::size_t li = 0; li < out.layers.size(); ++li) {
    const AttentionMask & mask = out.masks[li + 1];
    KeepSet eligible;
    for (int k = 0; k < out.queries.size(); ++k) {
      if (mask.is_suppressed(k)) {
        continue;
      }
      if (out.queries.origin[k] == QueryOrigin::kMemory && !config.memory.include_in_loss) {
        continue;
      }
      eligible.kept.push_back(k);
    }
    ad::Var layer =
      ad::scale(head_loss(out.layers[li], gts, eligible, config, weights), lambdas[li + 1]);
    if (breakdown) {
      breakdown->per_head.push_back(layer->value.item());
    }
    terms.push_back(std::move(layer));
  }

  ad::Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    total = ad::add(total, terms[i]);
  }
  if (breakdown) {
    breakdown->total = total->value.item();
  }
  return total;
}

Metrics evaluate_frames(
  const std::vector<std::vector<Detection>> & preds,
  const std::vector<std::vector<SceneObject>> & gts, double iou_threshold)
{
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) {
    throw std::invalid_argument("evaluation IoU threshold must lie in (0, 1)");
  }
  struct Ranked {
    double confidence;
    int frame;
    int index;
  };
  std::vector<Ranked> ranked;
  std::size_t total_gt = 0;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    for (std::size_t i = 0; i < preds[f].size(); ++i) {
      ranked.push_back({preds[f][i].confidence, static_cast<int>(f), static_cast<int>(i)});
    }
  }
  for (const auto & frame_gt : gts) {
    total_gt += frame_gt.size();
  }
  std::sort(ranked.begin(), ranked.end(), [&preds](const Ranked & a, const Ranked & b) {
    if (a.confidence != b.confidence) {
      return a.confidence > b.confidence;
    }
    if (a.frame != b.frame) {
      return a.frame < b.frame;
    }
    return preds[a.frame][a.index].source_index < preds[b.frame][b.index].source_index;
  });

  std::vector<std::vector<char>> gt_used(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) {
    gt_used[f].assign(gts[f].size(), 0);
  }

  Metrics metrics;
  std::vector<char> is_tp(ranked.size(), 0);
  double center_error_sum = 0.0;
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const Detection & pred = preds[ranked[r].frame][ranked[r].index];
    const auto & frame_gt = gts[ranked[r].frame];
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < frame_gt.size(); ++g) {
      if (gt_used[ranked[r].frame][g] || frame_gt[g].class_id != pred.argmax_class()) {
        continue;
      }
      const double iou = rotated_iou(pred.box, frame_gt[g].box);
      if (iou >= best_iou && (best < 0 || iou > best_iou)) {
        best = static_cast<int>(g);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      gt_used[ranked[r].frame][best] = 1;
      is_tp[r] = 1;
      ++metrics.tp;
      center_error_sum += std::hypot(
        pred.box.cx - frame_gt[best].box.cx, pred.box.cy - frame_gt[best].box.cy);
    } else {
      ++metrics.fp;
    }
  }
  metrics.fn = static_cast<int>(total_gt) - metrics.tp;
  metrics.precision = ranked.empty() ? 0.0 : static_cast<double>(metrics.tp) / ranked.size();
  metrics.recall = total_gt == 0 ? 0.0 : static_cast<double>(metrics.tp) / total_gt;
  metrics.f1 = (metrics.precision + metrics.recall) > 0.0
                 ? 2.0 * metrics.precision * metrics.recall / (metrics.precision + metrics.recall)
                 : 0.0;
  metrics.mean_center_error = metrics.tp > 0 ? center_error_sum / metrics.tp : 0.0;

  // all-point interpolated AP over the ranked list
  if (total_gt > 0 && !ranked.empty()) {
    std::vector<double> precision_at(ranked.size());
    std::vector<double> recall_at(ranked.size());
    int tp_count = 0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      tp_count += is_tp[r];
      precision_at[r] = static_cast<double>(tp_count) / (r + 1);
      recall_at[r] = static_cast<double>(tp_count) / total_gt;
    }
    for (int r = static_cast<int>(ranked.size()) - 2; r >= 0; --r) {
      precision_at[r] = std::max(precision_at[r], precision_at[r + 1]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t r = 0; r < ranked.size(); ++r) {
      ap += (recall_at[r] - prev_recall) * precision_at[r];
      prev_recall = recall_at[r];
    }
    metrics.ap = ap;
  }
  return metrics;
}

Metrics evaluate(
  const std::vector<Detection> & preds, const std::vector<SceneObject> & gts, double iou_threshold)
{
  return evaluate_frames({preds}, {gts}, iou_threshold);
}

SgdOptimizer::SgdOptimizer(std::vector<ad::Var> params, double lr, double momentum)
: params_(std::move(params)), lr_(lr), momentum_(momentum)
{
  velocity_.reserve(params_.size());
  for (const ad::Var & p : params_) {
    velocity_.emplace_back(p->value.shape());
  }
}

void SgdOptimizer::step()
{
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Var & p = params_[i];
    if (p->grad.size() != p->value.size()) {
      continue;  // parameter untouched by this graph
    }
    ad::Tensor & vel = velocity_[i];
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      vel[j] = momentum_ * vel[j] - lr_ * p->grad[j];
      p->value[j] += vel[j];
    }
  }
}

void SgdOptimizer::zero_grad() { ad::zero_grad(params_); }

namespace {

struct StreamState {
  std::optional<ad::Tensor> prev_features;  // previous grid feature values
  Pose2D prev_pose;
  double prev_time = 0.0;
  MemoryQueue memory{4, 300};
};

BevGrid aligned_prev_grid(
  const StreamState & state, const Scene & scene, const ModelConfig & config)
{
  GridAlignConfig align;
  align.rows = config.grid_rows;
  align.cols = config.grid_cols;
  align.extent_x = config.extent_x;
  align.extent_y = config.extent_y;
  const Pose2D delta = compose(inverse(scene.ego_pose), state.prev_pose);
  BevGrid grid{config.grid_rows, config.grid_cols, config.extent_x, config.extent_y,
               ad::constant(align_bev_grid(*state.prev_features, align, delta))};
  return grid;
}

}  // namespace

TrainResult train_model(GridQueryDetector & model, const TrainConfig & config)
{
  const ModelConfig & mc = model.config();
  SgdOptimizer optimizer(model.trainable_parameters(), config.lr, config.momentum);

  TrainResult result;
  for (int step = 0; step < config.steps; ++step) {
    const std::uint64_t scene_seed =
      config.dataset_size > 0 ? config.data_seed + step % config.dataset_size
                              : config.data_seed + step;
    const SceneSequence sequence =
      generate_scene(scene_seed, config.scenes, config.frames_per_scene);

    StreamState state;
    state.memory = MemoryQueue(4, mc.n_memory);
    double step_loss = 0.0;
    for (const Scene & frame : sequence.frames) {
      BevGrid prev;
      const bool has_prev = state.prev_features.has_value();
      if (has_prev) {
        prev = aligned_prev_grid(state, frame, mc);
      }
      std::vector<AlignedMemoryEntry> memory;
      if (mc.hybrid_memory && !state.memory.empty()) {
        memory = align_memory(state.memory, frame.ego_pose, frame.timestamp);
      }

      const ForwardOutput out = model.forward(
        frame.observation, has_prev ? &prev : nullptr, memory.empty() ? nullptr : &memory, false);
      const ad::Var loss = total_loss(out, frame.gt, mc, config.match);
      const double loss_value = loss->value.item();
      if (!std::isfinite(loss_value)) {
        result.hit_nan = true;
        result.nan_step = step;
        result.steps_run = step;
        return result;
      }
      step_loss += loss_value;

      optimizer.zero_grad();
      ad::backward(loss);
      optimizer.step();

      if (mc.hybrid_memory) {
        auto [dets, feats] = model.memory_handoff(out);
        state.memory.push(dets, feats, frame.ego_pose, frame.timestamp);
      }
      state.prev_features = out.grid.features->value;
      state.prev_pose = frame.ego_pose;
      state.prev_time = frame.timestamp;
    }

    StepRecord record;
    record.step = step;
    record.loss = step_loss / sequence.frames.size();
    if (step == 0) {
      result.initial_loss = record.loss;
      result.best_loss_first_300 = record.loss;
    } else if (step < 300) {
      result.best_loss_first_300 = std::min(result.best_loss_first_300, record.loss);
    }

    const bool eval_now =
      config.eval_every > 0 &&
      ((step + 1) % config.eval_every == 0 || step + 1 == config.steps);
    if (eval_now) {
      record.eval = evaluate_model(model, config, 1000000, config.eval_sequences);
      result.final_eval = *record.eval;
    }
    result.log.push_back(record);
    result.steps_run = step + 1;
    if (config.on_step) {
      config.on_step(record);
    }

    if (record.eval && config.target_f1 >= 0.0 && record.eval->f1 >= config.target_f1) {
      break;
    }
  }
  return result;
}

Metrics evaluate_model(
  GridQueryDetector & model, const TrainConfig & config, std::uint64_t seed_offset, int sequences)
{
  const ModelConfig & mc = model.config();
  std::vector<std::vector<Detection>> all_preds;
  std::vector<std::vector<SceneObject>> all_gts;

  for (int s = 0; s < sequences; ++s) {
    const SceneSequence sequence =
      generate_scene(config.data_seed + seed_offset + s, config.scenes, config.frames_per_scene);
    StreamState state;
    state.memory = MemoryQueue(4, mc.n_memory);
    for (const Scene & frame : sequence.frames) {
      BevGrid prev;
      const bool has_prev = state.prev_features.has_value();
      if (has_prev) {
        prev = aligned_prev_grid(state, frame, mc);
      }
      std::vector<AlignedMemoryEntry> memory;
      if (mc.hybrid_memory && !state.memory.empty()) {
        memory = align_memory(state.memory, frame.ego_pose, frame.timestamp);
      }
      const ForwardOutput out = model.forward(
        frame.observation, has_prev ? &prev : nullptr, memory.empty() ? nullptr : &memory, true);

      all_preds.push_back(out.final_detections(config.eval_min_confidence));
      all_gts.push_back(frame.gt);

      if (mc.hybrid_memory) {
        auto [dets, feats] = model.memory_handoff(out);
        state.memory.push(dets, feats, frame.ego_pose, frame.timestamp);
      }
      state.prev_features = out.grid.features->value;
      state.prev_pose = frame.ego_pose;
      state.prev_time = frame.timestamp;
    }
  }
  return evaluate_frames(all_preds, all_gts, config.eval_iou);
}

}  // namespace bevquery
