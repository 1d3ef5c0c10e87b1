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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "bevquery/geometry.hpp"
#include "bevquery/suppression.hpp"
#include "bevquery/temporal.hpp"
#include "bevquery/tensor.hpp"

namespace bevquery {

struct ModelConfig {
  int grid_rows = 32;
  int grid_cols = 32;
  double extent_x = 8.0;
  double extent_y = 8.0;
  int obs_channels = 2;
  int channels = 48;
  int num_classes = 2;
  int num_layers = 3;
  int n_queries = 128;
  int n_memory = 300;
  double tau = 0.2;
  int attention_heads = 1;
  int hidden_width = 96;
  std::vector<double> lambda;  // per-head weights, length num_layers + 1; empty = all ones

  double anchor_width = 1.0;
  double anchor_length = 1.0;
  double anchor_height = 1.0;
  double height_min = -3.0;
  double height_max = 3.0;

  /// Width (meters) of the Gaussian locality prior on encoder and
  /// cross-attention scores; <= 0 disables it.
  double locality_sigma = 1.0;

  bool use_velocity = true;
  bool suppression_enabled = true;
  bool hybrid_memory = false;
  MemoryIntegration memory;
  PrefilterMode prefilter;  // applied at inference before the first-stage NMS

  enum class FirstStage { kDenseGrid, kRandomReference };
  FirstStage first_stage = FirstStage::kDenseGrid;

  std::uint64_t init_seed = 1;

  double center_height() const { return 0.5 * (height_min + height_max); }
  int reg_width() const { return use_velocity ? 10 : 8; }
  std::vector<double> lambdas() const;
  void validate() const;
};

/// Metric BEV feature grid. Row i, column j covers the cell centered at
/// ((j + 0.5) * dx - extent_x, (i + 0.5) * dy - extent_y).
struct BevGrid {
  int rows = 0;
  int cols = 0;
  double extent_x = 0.0;
  double extent_y = 0.0;
  ad::Var features;  // [rows*cols x C]

  int cell_index(int i, int j) const { return i * cols + j; }
  std::pair<int, int> cell_of(int index) const { return {index / cols, index % cols}; }
  Vec2 cell_center(int i, int j) const
  {
    const double dx = 2.0 * extent_x / cols;
    const double dy = 2.0 * extent_y / rows;
    return {(j + 0.5) * dx - extent_x, (i + 0.5) * dy - extent_y};
  }
};

enum class QueryOrigin { kGrid, kMemory };

/// Decoder working set: one feature row, reference box and current decoded
/// detection per query. n_q stays fixed across the decoder layers.
struct QuerySet {
  ad::Var features;  // [n_q x C]
  std::vector<OrientedBoxBEV> reference_boxes;
  std::vector<Detection> state;
  std::vector<QueryOrigin> origin;
  std::vector<std::uint8_t> participates;  // joins NMS / the attention mask

  int size() const { return static_cast<int>(reference_boxes.size()); }
};

/// One auxiliary head evaluation: raw branches, the differentiable box
/// parameters used by the loss, and the value-decoded detections.
struct HeadOutput {
  ad::Var cls_logits;   // [n x K]
  ad::Var reg;          // [n x D]
  ad::Var loss_params;  // [n x D]: (cx, cy, z, log w, log l, log h, sin, cos[, vx, vy])
  std::vector<OrientedBoxBEV> refs;
  std::vector<Detection> detections;
};

struct FirstStageResult {
  QuerySet queries;
  AttentionMask mask;
  HeadOutput stage0;
  bool has_stage0 = false;
};

struct ForwardOutput {
  BevGrid grid;
  HeadOutput stage0;
  bool has_stage0 = false;
  std::vector<HeadOutput> layers;
  /// masks[0] is the mask entering layer 1; masks[i] the state after layer i.
  std::vector<AttentionMask> masks;
  QuerySet queries;  // final state after the last layer

  const AttentionMask & final_mask() const { return masks.back(); }
  /// Unsuppressed final-layer detections above the confidence cut.
  std::vector<Detection> final_detections(double min_confidence) const;
};

/// The grid-cell query detector: synthetic-observation encoder, dense
/// per-cell first stage with in-training NMS, masked decoder stack with
/// per-layer suppression blocks, and optional hybrid temporal queries.
class GridQueryDetector {
public:
  explicit GridQueryDetector(const ModelConfig & config);

  const ModelConfig & config() const { return config_; }

  /// Per-cell MLP embedding plus one temporal self-attention layer over the
  /// grid (keys/values extend over the aligned previous grid when present).
  BevGrid encode_scene(const ad::Tensor & observation, const BevGrid * prev_grid) const;

  /// Runs head `head_index` (0 = pre-decoder) on the given features.
  HeadOutput auxiliary_head(
    int head_index, const ad::Var & features,
    const std::vector<OrientedBoxBEV> & reference_boxes) const;

  /// Dense first stage: decode every cell, NMS, top-k select; query features
  /// are the detached survivors. `inference` enables the candidate prefilter.
  FirstStageResult first_stage(const BevGrid & grid, bool inference) const;

  /// Concatenates memory queries (motion-encoded) onto the grid queries.
  QuerySet assemble_hybrid_queries(
    const QuerySet & grid_queries, const std::vector<AlignedMemoryEntry> & memory) const;

  struct LayerResult {
    QuerySet queries;
    AttentionMask mask;
    HeadOutput head;
  };
  /// One decoder layer: masked self-attention, cross-attention to the grid,
  /// feed-forward, head decode, suppression block, reference refinement.
  LayerResult decoder_layer(
    int layer_index, const QuerySet & queries, const AttentionMask & mask,
    const BevGrid & grid) const;

  ForwardOutput forward(
    const ad::Tensor & observation, const BevGrid * prev_grid = nullptr,
    const std::vector<AlignedMemoryEntry> * memory = nullptr, bool inference = false) const;

  /// Applies one regression row to a reference box: center/z offsets in
  /// meters (clamped to the detection space), log-ratio dims, yaw from
  /// atan2(sin, cos) relative to the reference, absolute velocities.
  OrientedBoxBEV decode_box(const OrientedBoxBEV & ref, const double * reg_row) const;

  /// Final-layer entries to push into the object memory: unsuppressed
  /// detections with their feature row values.
  std::pair<std::vector<Detection>, std::vector<ad::Tensor>> memory_handoff(
    const ForwardOutput & out) const;

  std::vector<std::pair<std::string, ad::Var>> parameters() const;
  std::vector<ad::Var> trainable_parameters() const;

  const MotionEncoder & motion_encoder() const { return motion_encoder_; }

private:
  struct Mlp2 {
    ad::Var w1, b1, w2, b2;
  };
  struct AttnBlock {
    ad::Var wq, wk, wv, wo, bo, ln_g, ln_b;
  };
  struct FfnBlock {
    ad::Var w1, b1, w2, b2, ln_g, ln_b;
  };
  struct HeadParams {
    Mlp2 cls;
    Mlp2 reg;
  };
  struct LayerParams {
    AttnBlock self_attn;
    AttnBlock cross_attn;
    FfnBlock ffn;
  };

  ad::Var multihead(
    const ad::Var & q_in, const ad::Var & k_in, const ad::Var & v_in, const AttnBlock & block,
    const ad::MaskMatrix * mask, const ad::Tensor * score_bias = nullptr) const;

  /// Sinusoidal code of arbitrary metric points, matching the per-cell code
  /// (cross-attention queries are conditioned on their reference centers).
  ad::Tensor code_for_points(const std::vector<Vec2> & points) const;

  /// -d^2 / (2 sigma^2) additive attention prior between metric points;
  /// keeps the dense attention but starts it local.
  ad::Tensor locality_bias(
    const std::vector<Vec2> & queries, const std::vector<Vec2> & keys, double sigma) const;

  /// NMS over the unsuppressed participating queries; merges the result
  /// into the mask (non-participants stay untouched).
  AttentionMask suppression_stage(
    const std::vector<Detection> & dets, const AttentionMask & mask,
    const std::vector<std::uint8_t> & participates) const;

  ModelConfig config_;
  ad::Tensor positional_code_;  // [rows*cols x C]
  std::vector<Vec2> cell_centers_;

  Mlp2 embed_;
  AttnBlock encoder_attn_;
  std::vector<HeadParams> heads_;    // [num_layers + 1]
  std::vector<LayerParams> layers_;  // [num_layers]
  MotionEncoder motion_encoder_;

  // random-reference baseline state
  ad::Var query_embed_;
  std::vector<OrientedBoxBEV> random_references_;
};

}  // namespace bevquery
