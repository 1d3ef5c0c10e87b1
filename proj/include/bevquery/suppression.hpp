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

#include <cstdint>
#include <vector>

#include "bevquery/geometry.hpp"

namespace bevquery {

/// A decoded candidate object: box, per-class scores, and the max score.
struct Detection {
  OrientedBoxBEV box;
  std::vector<double> class_scores;
  double confidence = 0.0;
  int source_index = -1;

  Detection() = default;
  Detection(OrientedBoxBEV box, std::vector<double> scores, int source_index);

  /// Index of the highest class score (ties resolved to the lowest index).
  int argmax_class() const;
};

/// Sorted, unique indices into a candidate list.
struct KeepSet {
  std::vector<int> kept;

  bool contains(int index) const;
  std::size_t size() const { return kept.size(); }
};

/// n_q x n_q binary suppression matrix: 1 = attention suppressed at (k, l).
/// A query k is suppressed iff its diagonal bit is set.
class AttentionMask {
public:
  AttentionMask() = default;
  explicit AttentionMask(int n_q) : n_q_(n_q), bits_(static_cast<std::size_t>(n_q) * n_q, 0) {}

  int n_q() const { return n_q_; }
  std::uint8_t at(int k, int l) const { return bits_[static_cast<std::size_t>(k) * n_q_ + l]; }
  void set(int k, int l, std::uint8_t v) { bits_[static_cast<std::size_t>(k) * n_q_ + l] = v; }
  bool is_suppressed(int k) const { return at(k, k) != 0; }
  std::size_t suppressed_bit_count() const;
  const std::vector<std::uint8_t> & bits() const { return bits_; }

private:
  int n_q_ = 0;
  std::vector<std::uint8_t> bits_;
};

enum class NmsMode { kPlain, kClassAware, kScale, kClassAwareScale };

struct NmsOptions {
  bool use_prune_heuristic = true;
  int threads = 1;
};

/// True only when the center distance proves the boxes cannot overlap;
/// never true for a pair with positive IoU.
bool pair_prune_heuristic(const OrientedBoxBEV & a, const OrientedBoxBEV & b);

/// Greedy descending-confidence NMS with rotated BEV IoU. A detection is
/// kept iff its IoU with every previously kept detection is <= tau. Ties in
/// confidence are broken by ascending source_index.
KeepSet bev_nms(const std::vector<Detection> & dets, double tau, const NmsOptions & opts = {});

/// bev_nms with the class-aware / Scale NMS variants. `scale_factors` holds
/// one positive factor per class and is required by the scale modes.
KeepSet bev_nms_class_aware(
  const std::vector<Detection> & dets, double tau, NmsMode mode,
  const std::vector<double> & scale_factors = {}, const NmsOptions & opts = {});

/// bits[k][l] = 1 iff k or l is absent from `keep`.
AttentionMask build_attention_mask(const KeepSet & keep, int n_q);

/// Element-wise OR of `old_mask` with the mask built from `new_keep`.
AttentionMask merge_mask(const AttentionMask & old_mask, const KeepSet & new_keep);

/// Indices of the k highest-confidence detections (all if fewer), sorted.
KeepSet topk_by_confidence(const std::vector<Detection> & dets, std::size_t k);

enum class PrefilterKind { kNone, kTopK, kConfidence };

struct PrefilterMode {
  PrefilterKind kind = PrefilterKind::kNone;
  std::size_t k = 0;
  double threshold = 0.0;

  static PrefilterMode none() { return {}; }
  static PrefilterMode topk(std::size_t k) { return {PrefilterKind::kTopK, k, 0.0}; }
  static PrefilterMode confidence(double t);
};

/// Inference-time candidate reduction before the first-stage NMS. Survivors
/// keep their original relative order.
std::vector<Detection> prefilter_candidates(
  const std::vector<Detection> & dets, const PrefilterMode & mode);

}  // namespace bevquery
