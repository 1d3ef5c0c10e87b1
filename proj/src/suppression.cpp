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

#include "bevquery/suppression.hpp"

#include <algorithm>
#include <stdexcept>
#include <thread>

namespace bevquery {

namespace {

// Greedy visit order: confidence descending, then ascending source_index,
// then list position. The trailing key makes the order a strict total order.
std::vector<int> confidence_order(const std::vector<Detection> & dets)
{
  std::vector<int> order(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    order[i] = static_cast<int>(i);
  }
  std::sort(order.begin(), order.end(), [&dets](int a, int b) {
    if (dets[a].confidence != dets[b].confidence) {
      return dets[a].confidence > dets[b].confidence;
    }
    if (dets[a].source_index != dets[b].source_index) {
      return dets[a].source_index < dets[b].source_index;
    }
    return a < b;
  });
  return order;
}

bool overlaps_any(
  const OrientedBoxBEV & candidate, const std::vector<OrientedBoxBEV> & kept_boxes, double tau,
  const NmsOptions & opts)
{
  const auto check_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (opts.use_prune_heuristic && pair_prune_heuristic(candidate, kept_boxes[i])) {
        continue;
      }
      if (rotated_iou(candidate, kept_boxes[i]) > tau) {
        return true;
      }
    }
    return false;
  };

  const std::size_t n = kept_boxes.size();
  if (opts.threads <= 1 || n < 256) {
    return check_range(0, n);
  }

  // Parallelism stays inside the per-candidate test; the OR of the chunk
  // results is order-independent, so the keep set is bit-identical to the
  // sequential result.
  const std::size_t workers = std::min<std::size_t>(opts.threads, 16);
  std::vector<std::uint8_t> hit(workers, 0);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) {
      break;
    }
    pool.emplace_back([&, w, begin, end] { hit[w] = check_range(begin, end) ? 1 : 0; });
  }
  for (auto & t : pool) {
    t.join();
  }
  return std::any_of(hit.begin(), hit.end(), [](std::uint8_t h) { return h != 0; });
}

KeepSet greedy_nms(
  const std::vector<Detection> & dets, double tau, const NmsOptions & opts,
  const std::vector<OrientedBoxBEV> & iou_boxes, const std::vector<int> * class_of, bool class_aware)
{
  const std::vector<int> order = confidence_order(dets);
  KeepSet keep;
  // Kept boxes grouped per class in class-aware mode so the inner loop only
  // sees same-class survivors.
  std::vector<std::vector<OrientedBoxBEV>> kept_boxes(
    class_aware ? 1 + *std::max_element(class_of->begin(), class_of->end()) : 1);
  for (int idx : order) {
    const int group = class_aware ? (*class_of)[idx] : 0;
    if (!overlaps_any(iou_boxes[idx], kept_boxes[group], tau, opts)) {
      keep.kept.push_back(idx);
      kept_boxes[group].push_back(iou_boxes[idx]);
    }
  }
  std::sort(keep.kept.begin(), keep.kept.end());
  return keep;
}

}  // namespace

Detection::Detection(OrientedBoxBEV box, std::vector<double> scores, int source_index)
: box(box), class_scores(std::move(scores)), source_index(source_index)
{
  if (class_scores.empty()) {
    throw std::invalid_argument("detection needs at least one class score");
  }
  for (double s : class_scores) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw std::invalid_argument("class scores must lie in [0, 1]");
    }
  }
  confidence = *std::max_element(class_scores.begin(), class_scores.end());
}

int Detection::argmax_class() const
{
  return static_cast<int>(
    std::max_element(class_scores.begin(), class_scores.end()) - class_scores.begin());
}

bool KeepSet::contains(int index) const
{
  return std::binary_search(kept.begin(), kept.end(), index);
}

std::size_t AttentionMask::suppressed_bit_count() const
{
  std::size_t count = 0;
  for (std::uint8_t b : bits_) {
    count += b != 0;
  }
  return count;
}

bool pair_prune_heuristic(const OrientedBoxBEV & a, const OrientedBoxBEV & b)
{
  const double dx = a.cx - b.cx;
  const double dy = a.cy - b.cy;
  const double reach = a.half_diagonal() + b.half_diagonal();
  return dx * dx + dy * dy > reach * reach;
}

KeepSet bev_nms(const std::vector<Detection> & dets, double tau, const NmsOptions & opts)
{
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("NMS IoU threshold must lie in [0, 1]");
  }
  if (dets.empty()) {
    return {};
  }
  std::vector<OrientedBoxBEV> boxes(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    boxes[i] = dets[i].box;
  }
  return greedy_nms(dets, tau, opts, boxes, nullptr, false);
}

KeepSet bev_nms_class_aware(
  const std::vector<Detection> & dets, double tau, NmsMode mode,
  const std::vector<double> & scale_factors, const NmsOptions & opts)
{
  if (mode == NmsMode::kPlain) {
    return bev_nms(dets, tau, opts);
  }
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("NMS IoU threshold must lie in [0, 1]");
  }
  if (dets.empty()) {
    return {};
  }

  std::vector<int> classes(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    classes[i] = dets[i].argmax_class();
  }

  const bool scaled = mode == NmsMode::kScale || mode == NmsMode::kClassAwareScale;
  std::vector<OrientedBoxBEV> boxes(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (scaled) {
      const int cls = classes[i];
      if (cls >= static_cast<int>(scale_factors.size())) {
        throw std::invalid_argument("missing scale factor for class " + std::to_string(cls));
      }
      boxes[i] = scale_box(dets[i].box, scale_factors[cls]);
    } else {
      boxes[i] = dets[i].box;
    }
  }

  const bool class_aware = mode == NmsMode::kClassAware || mode == NmsMode::kClassAwareScale;
  return greedy_nms(dets, tau, opts, boxes, &classes, class_aware);
}

AttentionMask build_attention_mask(const KeepSet & keep, int n_q)
{
  std::vector<std::uint8_t> kept(n_q, 0);
  for (int idx : keep.kept) {
    if (idx < 0 || idx >= n_q) {
      throw std::out_of_range("keep index outside mask range");
    }
    kept[idx] = 1;
  }
  AttentionMask mask(n_q);
  for (int k = 0; k < n_q; ++k) {
    for (int l = 0; l < n_q; ++l) {
      mask.set(k, l, (kept[k] && kept[l]) ? 0 : 1);
    }
  }
  return mask;
}

AttentionMask merge_mask(const AttentionMask & old_mask, const KeepSet & new_keep)
{
  const AttentionMask fresh = build_attention_mask(new_keep, old_mask.n_q());
  AttentionMask out = old_mask;
  const int n = out.n_q();
  for (int k = 0; k < n; ++k) {
    for (int l = 0; l < n; ++l) {
      if (fresh.at(k, l)) {
        out.set(k, l, 1);
      }
    }
  }
  return out;
}

KeepSet topk_by_confidence(const std::vector<Detection> & dets, std::size_t k)
{
  std::vector<int> order = confidence_order(dets);
  if (order.size() > k) {
    order.resize(k);
  }
  std::sort(order.begin(), order.end());
  KeepSet keep;
  keep.kept = std::move(order);
  return keep;
}

PrefilterMode PrefilterMode::confidence(double t)
{
  if (!(t >= 0.0 && t <= 1.0)) {
    throw std::invalid_argument("confidence prefilter threshold must lie in [0, 1]");
  }
  return {PrefilterKind::kConfidence, 0, t};
}

std::vector<Detection> prefilter_candidates(
  const std::vector<Detection> & dets, const PrefilterMode & mode)
{
  switch (mode.kind) {
    case PrefilterKind::kNone:
      return dets;
    case PrefilterKind::kTopK: {
      const KeepSet keep = topk_by_confidence(dets, mode.k);
      std::vector<Detection> out;
      out.reserve(keep.kept.size());
      for (int idx : keep.kept) {
        out.push_back(dets[idx]);
      }
      return out;
    }
    case PrefilterKind::kConfidence: {
      if (!(mode.threshold >= 0.0 && mode.threshold <= 1.0)) {
        throw std::invalid_argument("confidence prefilter threshold must lie in [0, 1]");
      }
      std::vector<Detection> out;
      out.reserve(dets.size());
      for (const Detection & d : dets) {
        if (d.confidence >= mode.threshold) {
          out.push_back(d);
        }
      }
      return out;
    }
  }
  return dets;
}

}  // namespace bevquery
