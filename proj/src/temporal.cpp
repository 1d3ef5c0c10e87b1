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

#include "bevquery/temporal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bevquery {

namespace {

ad::Var init_weight(int rows, int cols, std::mt19937_64 & rng)
{
  const double bound = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Tensor w(rows, cols);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = dist(rng);
  }
  return ad::leaf(std::move(w), true);
}

}  // namespace

MotionAttributes::MotionAttributes(double dt, const Pose2D & ego_delta, double vx, double vy)
: dt(dt), ego_delta(ego_delta), vx(vx), vy(vy)
{
  if (!(dt > 0.0)) {
    throw std::invalid_argument("motion attributes need dt > 0");
  }
}

MemoryQueue::MemoryQueue(int capacity_frames, int per_frame_budget)
: capacity_(capacity_frames), budget_(per_frame_budget)
{
  if (capacity_ <= 0 || budget_ <= 0) {
    throw std::invalid_argument("memory queue capacity and budget must be positive");
  }
}

void MemoryQueue::push(
  const std::vector<Detection> & detections, const std::vector<ad::Tensor> & features,
  const Pose2D & ego_pose, double timestamp)
{
  if (detections.size() != features.size()) {
    throw std::invalid_argument("one feature row per detection expected");
  }
  if (!frames_.empty() && !(timestamp > frames_.back().timestamp)) {
    throw std::invalid_argument("memory timestamps must be strictly increasing");
  }

  std::vector<int> order(detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = static_cast<int>(i);
  }
  std::sort(order.begin(), order.end(), [&detections](int a, int b) {
    if (detections[a].confidence != detections[b].confidence) {
      return detections[a].confidence > detections[b].confidence;
    }
    if (detections[a].source_index != detections[b].source_index) {
      return detections[a].source_index < detections[b].source_index;
    }
    return a < b;
  });
  if (order.size() > static_cast<std::size_t>(budget_)) {
    order.resize(budget_);
  }

  Frame frame;
  frame.timestamp = timestamp;
  frame.ego_pose = ego_pose;
  frame.entries.reserve(order.size());
  for (int idx : order) {
    frame.entries.push_back({detections[idx], features[idx]});
  }
  frames_.push_back(std::move(frame));
  while (frames_.size() > static_cast<std::size_t>(capacity_)) {
    frames_.pop_front();
  }
}

std::size_t MemoryQueue::total_entries() const
{
  std::size_t n = 0;
  for (const Frame & f : frames_) {
    n += f.entries.size();
  }
  return n;
}

std::vector<AlignedMemoryEntry> align_memory(
  const MemoryQueue & queue, const Pose2D & current_pose, double current_time)
{
  std::vector<AlignedMemoryEntry> out;
  out.reserve(queue.total_entries());
  for (int i = queue.frame_count() - 1; i >= 0; --i) {
    const MemoryQueue::Frame & frame = queue.frame(i);
    const Pose2D delta = compose(inverse(current_pose), frame.ego_pose);
    const double dt = current_time - frame.timestamp;
    for (const MemoryQueue::Entry & entry : frame.entries) {
      AlignedMemoryEntry aligned;
      aligned.detection = entry.detection;
      aligned.detection.box = transform_box(entry.detection.box, delta);
      aligned.features = entry.features;
      aligned.motion =
        MotionAttributes(dt, delta, aligned.detection.box.vx, aligned.detection.box.vy);
      out.push_back(std::move(aligned));
    }
  }
  return out;
}

MotionEncoder::MotionEncoder(
  int feature_width, int hidden_width, bool use_velocity, std::mt19937_64 & rng)
: use_velocity_(use_velocity)
{
  const int in = use_velocity ? 7 : 5;
  w1_ = init_weight(in, hidden_width, rng);
  b1_ = ad::leaf(ad::Tensor(1, hidden_width), true);
  // zero-initialized output layer: the encoder starts as the identity
  w2_ = ad::leaf(ad::Tensor(hidden_width, feature_width), true);
  b2_ = ad::leaf(ad::Tensor(1, feature_width), true);
}

ad::Tensor MotionEncoder::motion_inputs(
  const std::vector<MotionAttributes> & motion, bool use_velocity)
{
  const int in = use_velocity ? 7 : 5;
  ad::Tensor inputs(static_cast<int>(motion.size()), in);
  for (std::size_t i = 0; i < motion.size(); ++i) {
    const MotionAttributes & m = motion[i];
    const int r = static_cast<int>(i);
    inputs.at(r, 0) = m.dt;
    inputs.at(r, 1) = m.ego_delta.tx;
    inputs.at(r, 2) = m.ego_delta.ty;
    inputs.at(r, 3) = std::sin(m.ego_delta.theta);
    inputs.at(r, 4) = std::cos(m.ego_delta.theta);
    if (use_velocity) {
      inputs.at(r, 5) = m.vx;
      inputs.at(r, 6) = m.vy;
    }
  }
  return inputs;
}

ad::Var MotionEncoder::encode_inputs(const ad::Var & features, const ad::Var & inputs) const
{
  if (inputs->value.rows() != features->value.rows()) {
    throw std::invalid_argument("one motion record per feature row expected");
  }
  const ad::Var hidden = ad::relu(ad::linear(inputs, w1_, b1_));
  return ad::add(features, ad::linear(hidden, w2_, b2_));
}

ad::Var MotionEncoder::encode(
  const ad::Var & features, const std::vector<MotionAttributes> & motion) const
{
  return encode_inputs(features, ad::constant(motion_inputs(motion, use_velocity_)));
}

std::vector<std::pair<std::string, ad::Var>> MotionEncoder::parameters(
  const std::string & prefix) const
{
  return {
    {prefix + ".w1", w1_}, {prefix + ".b1", b1_}, {prefix + ".w2", w2_}, {prefix + ".b2", b2_}};
}

ad::Tensor align_bev_grid(
  const ad::Tensor & features, const GridAlignConfig & config, const Pose2D & ego_delta)
{
  const int n = config.rows;
  const int m = config.cols;
  if (features.rows() != n * m) {
    throw std::invalid_argument("grid feature rows do not match the grid size");
  }
  const int channels = features.cols();
  const double dx = 2.0 * config.extent_x / m;
  const double dy = 2.0 * config.extent_y / n;

  double pivot_x = 0.5 * m;
  double pivot_y = 0.5 * n;
  if (config.mode == RotationCenterMode::kFixed) {
    pivot_x = config.fixed_cx;
    pivot_y = config.fixed_cy;
  }

  const double c = std::cos(-ego_delta.theta);
  const double s = std::sin(-ego_delta.theta);
  const double shift_x = ego_delta.tx / dx;
  const double shift_y = ego_delta.ty / dy;

  ad::Tensor out(n * m, channels);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      // current cell center in cell coordinates, pulled back into the
      // previous frame: rotate about the pivot, then undo the ego shift
      const double px = (j + 0.5) - pivot_x - shift_x;
      const double py = (i + 0.5) - pivot_y - shift_y;
      const double src_x = c * px - s * py + pivot_x;
      const double src_y = s * px + c * py + pivot_y;

      const double u = src_x - 0.5;
      const double v = src_y - 0.5;
      const int j0 = static_cast<int>(std::floor(u));
      const int i0 = static_cast<int>(std::floor(v));
      const double fx = u - j0;
      const double fy = v - i0;

      double * dst = out.data() + (static_cast<std::size_t>(i) * m + j) * channels;
      const auto sample = [&](int si, int sj, double weight) {
        if (weight == 0.0 || si < 0 || si >= n || sj < 0 || sj >= m) {
          return;
        }
        const double * src = features.data() + (static_cast<std::size_t>(si) * m + sj) * channels;
        for (int ch = 0; ch < channels; ++ch) {
          dst[ch] += weight * src[ch];
        }
      };
      sample(i0, j0, (1.0 - fy) * (1.0 - fx));
      sample(i0, j0 + 1, (1.0 - fy) * fx);
      sample(i0 + 1, j0, fy * (1.0 - fx));
      sample(i0 + 1, j0 + 1, fy * fx);
    }
  }
  return out;
}

}  // namespace bevquery
