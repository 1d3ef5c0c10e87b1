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

#include "bevquery/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace bevquery {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kLogDimClamp = 4.0;
// sigmoid prior of ~1% positive rate for the zero-initialized class heads
constexpr double kClassBiasPrior = -4.59511985013459;

ad::Var xavier(int rows, int cols, std::mt19937_64 & rng)
{
  const double bound = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  ad::Tensor w(rows, cols);
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = dist(rng);
  }
  return ad::leaf(std::move(w), true);
}

ad::Var zeros(int rows, int cols) { return ad::leaf(ad::Tensor(rows, cols), true); }

ad::Var ones_row(int cols)
{
  ad::Tensor t(1, cols);
  t.fill(1.0);
  return ad::leaf(std::move(t), true);
}

ad::Var filled_row(int cols, double v)
{
  ad::Tensor t(1, cols);
  t.fill(v);
  return ad::leaf(std::move(t), true);
}

double clamp(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace

std::vector<double> ModelConfig::lambdas() const
{
  if (!lambda.empty()) {
    return lambda;
  }
  return std::vector<double>(num_layers + 1, 1.0);
}

void ModelConfig::validate() const
{
  if (grid_rows <= 0 || grid_cols <= 0 || channels <= 0 || obs_channels <= 0) {
    throw std::invalid_argument("grid and feature extents must be positive");
  }
  if (num_layers < 1 || n_queries < 1 || num_classes < 1) {
    throw std::invalid_argument("need at least one decoder layer, query and class");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw std::invalid_argument("tau must lie in [0, 1]");
  }
  if (attention_heads < 1 || channels % attention_heads != 0) {
    throw std::invalid_argument("channels must divide evenly into attention heads");
  }
  if (!lambda.empty() && static_cast<int>(lambda.size()) != num_layers + 1) {
    throw std::invalid_argument("lambda needs one weight per head (num_layers + 1)");
  }
  if (!(height_max > height_min)) {
    throw std::invalid_argument("empty detection height range");
  }
}

std::vector<Detection> ForwardOutput::final_detections(double min_confidence) const
{
  std::vector<Detection> out;
  const AttentionMask & mask = final_mask();
  for (int k = 0; k < queries.size(); ++k) {
    if (mask.is_suppressed(k)) {
      continue;
    }
    if (queries.state[k].confidence >= min_confidence) {
      out.push_back(queries.state[k]);
    }
  }
  std::sort(out.begin(), out.end(), [](const Detection & a, const Detection & b) {
    if (a.confidence != b.confidence) {
      return a.confidence > b.confidence;
    }
    return a.source_index < b.source_index;
  });
  return out;
}

GridQueryDetector::GridQueryDetector(const ModelConfig & config) : config_(config)
{
  config_.validate();
  std::mt19937_64 rng(config_.init_seed);
  const int c = config_.channels;
  const int hidden = config_.hidden_width;

  embed_.w1 = xavier(config_.obs_channels, hidden, rng);
  embed_.b1 = zeros(1, hidden);
  embed_.w2 = xavier(hidden, c, rng);
  embed_.b2 = zeros(1, c);

  const auto make_attn = [&](AttnBlock & block) {
    block.wq = xavier(c, c, rng);
    block.wk = xavier(c, c, rng);
    block.wv = xavier(c, c, rng);
    block.wo = zeros(c, c);  // residual branch starts silent
    block.bo = zeros(1, c);
    block.ln_g = ones_row(c);
    block.ln_b = zeros(1, c);
  };
  make_attn(encoder_attn_);

  heads_.resize(config_.num_layers + 1);
  for (HeadParams & head : heads_) {
    head.cls.w1 = xavier(c, hidden, rng);
    head.cls.b1 = zeros(1, hidden);
    head.cls.w2 = zeros(hidden, config_.num_classes);
    head.cls.b2 = filled_row(config_.num_classes, kClassBiasPrior);
    head.reg.w1 = xavier(c, hidden, rng);
    head.reg.b1 = zeros(1, hidden);
    head.reg.w2 = zeros(hidden, config_.reg_width());
    head.reg.b2 = zeros(1, config_.reg_width());
  }

  layers_.resize(config_.num_layers);
  for (LayerParams & layer : layers_) {
    make_attn(layer.self_attn);
    make_attn(layer.cross_attn);
    layer.ffn.w1 = xavier(c, hidden, rng);
    layer.ffn.b1 = zeros(1, hidden);
    layer.ffn.w2 = zeros(hidden, c);
    layer.ffn.b2 = zeros(1, c);
    layer.ffn.ln_g = ones_row(c);
    layer.ffn.ln_b = zeros(1, c);
  }

  motion_encoder_ = MotionEncoder(c, hidden, config_.use_velocity, rng);

  // fixed sinusoidal per-cell code, used by the attention layers
  BevGrid proto{config_.grid_rows, config_.grid_cols, config_.extent_x, config_.extent_y, {}};
  cell_centers_.reserve(config_.grid_rows * config_.grid_cols);
  for (int i = 0; i < config_.grid_rows; ++i) {
    for (int j = 0; j < config_.grid_cols; ++j) {
      cell_centers_.push_back(proto.cell_center(i, j));
    }
  }
  positional_code_ = code_for_points(cell_centers_);

  if (config_.first_stage == ModelConfig::FirstStage::kRandomReference) {
    query_embed_ = xavier(config_.n_queries, c, rng);
    std::uniform_real_distribution<double> ux(-0.9 * config_.extent_x, 0.9 * config_.extent_x);
    std::uniform_real_distribution<double> uy(-0.9 * config_.extent_y, 0.9 * config_.extent_y);
    random_references_.reserve(config_.n_queries);
    for (int i = 0; i < config_.n_queries; ++i) {
      random_references_.emplace_back(
        ux(rng), uy(rng), config_.center_height(), config_.anchor_width, config_.anchor_length,
        config_.anchor_height, 0.0);
    }
  }
}

ad::Tensor GridQueryDetector::code_for_points(const std::vector<Vec2> & points) const
{
  const int c = config_.channels;
  ad::Tensor code(static_cast<int>(points.size()), c);
  for (std::size_t row = 0; row < points.size(); ++row) {
    const double u = points[row].x / config_.extent_x;
    const double v = points[row].y / config_.extent_y;
    for (int q = 0; 4 * q + 3 < c; ++q) {
      const double freq = 0.5 * kPi * (q + 1);
      code.at(static_cast<int>(row), 4 * q) = std::sin(freq * u);
      code.at(static_cast<int>(row), 4 * q + 1) = std::cos(freq * u);
      code.at(static_cast<int>(row), 4 * q + 2) = std::sin(freq * v);
      code.at(static_cast<int>(row), 4 * q + 3) = std::cos(freq * v);
    }
  }
  return code;
}

ad::Tensor GridQueryDetector::locality_bias(
  const std::vector<Vec2> & queries, const std::vector<Vec2> & keys, double sigma) const
{
  ad::Tensor bias(static_cast<int>(queries.size()), static_cast<int>(keys.size()));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t r = 0; r < queries.size(); ++r) {
    for (std::size_t c = 0; c < keys.size(); ++c) {
      const double dx = queries[r].x - keys[c].x;
      const double dy = queries[r].y - keys[c].y;
      bias.at(static_cast<int>(r), static_cast<int>(c)) = -(dx * dx + dy * dy) * inv;
    }
  }
  return bias;
}

ad::Var GridQueryDetector::multihead(
  const ad::Var & q_in, const ad::Var & k_in, const ad::Var & v_in, const AttnBlock & block,
  const ad::MaskMatrix * mask, const ad::Tensor * score_bias) const
{
  const ad::Var q = ad::matmul(q_in, block.wq);
  const ad::Var k = ad::matmul(k_in, block.wk);
  const ad::Var v = ad::matmul(v_in, block.wv);
  const ad::MaskMatrix empty(q->value.rows(), k->value.rows());
  const ad::MaskMatrix & m = mask ? *mask : empty;

  const int heads = config_.attention_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.channels / heads));
  const int width = config_.channels / heads;
  std::vector<ad::Var> parts;
  parts.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    ad::Var qh = q;
    ad::Var kh = k;
    ad::Var vh = v;
    if (heads > 1) {
      qh = ad::slice_cols(q, h * width, (h + 1) * width);
      kh = ad::slice_cols(k, h * width, (h + 1) * width);
      vh = ad::slice_cols(v, h * width, (h + 1) * width);
    }
    ad::Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), scale);
    if (score_bias) {
      scores = ad::add(scores, ad::constant(*score_bias));
    }
    parts.push_back(ad::matmul(ad::masked_softmax_rows(scores, m), vh));
  }
  return heads == 1 ? parts.front() : ad::concat_cols(parts);
}

BevGrid GridQueryDetector::encode_scene(
  const ad::Tensor & observation, const BevGrid * prev_grid) const
{
  const int n_cells = config_.grid_rows * config_.grid_cols;
  if (observation.rows() != n_cells || observation.cols() != config_.obs_channels) {
    throw std::invalid_argument("observation does not match the grid configuration");
  }
  if (prev_grid && (!prev_grid->features || prev_grid->features->value.rows() != n_cells ||
                    prev_grid->features->value.cols() != config_.channels)) {
    throw std::invalid_argument("previous grid does not match the grid configuration");
  }

  const ad::Var x = ad::linear(
    ad::relu(ad::linear(ad::constant(observation), embed_.w1, embed_.b1)), embed_.w2, embed_.b2);

  const ad::Var pos = ad::constant(positional_code_);
  ad::Var kv = x;
  ad::Var pos_kv = pos;
  if (prev_grid) {
    kv = ad::concat_rows({x, prev_grid->features});
    pos_kv = ad::concat_rows({pos, pos});
  }

  const ad::Tensor * bias = nullptr;
  ad::Tensor bias_store;
  if (config_.locality_sigma > 0.0) {
    const ad::Tensor cell_bias =
      locality_bias(cell_centers_, cell_centers_, config_.locality_sigma);
    if (prev_grid) {
      // aligned previous cells share the current cell centers
      bias_store = ad::Tensor(n_cells, 2 * n_cells);
      for (int r = 0; r < n_cells; ++r) {
        for (int c = 0; c < n_cells; ++c) {
          bias_store.at(r, c) = cell_bias.at(r, c);
          bias_store.at(r, n_cells + c) = cell_bias.at(r, c);
        }
      }
    } else {
      bias_store = cell_bias;
    }
    bias = &bias_store;
  }
  const ad::Var attended =
    multihead(ad::add(x, pos), ad::add(kv, pos_kv), kv, encoder_attn_, nullptr, bias);
  const ad::Var out = ad::layernorm(
    ad::add(x, ad::linear(attended, encoder_attn_.wo, encoder_attn_.bo)), encoder_attn_.ln_g,
    encoder_attn_.ln_b);

  return {config_.grid_rows, config_.grid_cols, config_.extent_x, config_.extent_y, out};
}

OrientedBoxBEV GridQueryDetector::decode_box(
  const OrientedBoxBEV & ref, const double * reg_row) const
{
  const double ref_h = ref.height > 0.0 ? ref.height : config_.anchor_height;
  OrientedBoxBEV box;
  box.cx = clamp(ref.cx + reg_row[0], -config_.extent_x, config_.extent_x);
  box.cy = clamp(ref.cy + reg_row[1], -config_.extent_y, config_.extent_y);
  box.z = clamp(ref.z + reg_row[2], config_.height_min, config_.height_max);
  box.width = ref.width * std::exp(clamp(reg_row[3], -kLogDimClamp, kLogDimClamp));
  box.length = ref.length * std::exp(clamp(reg_row[4], -kLogDimClamp, kLogDimClamp));
  box.height = ref_h * std::exp(clamp(reg_row[5], -kLogDimClamp, kLogDimClamp));
  box.yaw = normalize_angle(ref.yaw + std::atan2(reg_row[6], reg_row[7]));
  if (config_.use_velocity) {
    box.vx = reg_row[8];
    box.vy = reg_row[9];
  }
  return box;
}

HeadOutput GridQueryDetector::auxiliary_head(
  int head_index, const ad::Var & features, const std::vector<OrientedBoxBEV> & reference_boxes) const
{
  const HeadParams & head = heads_.at(head_index);
  const int n = features->value.rows();
  if (static_cast<int>(reference_boxes.size()) != n) {
    throw std::invalid_argument("one reference box per feature row expected");
  }

  HeadOutput out;
  out.refs = reference_boxes;
  out.cls_logits =
    ad::linear(ad::relu(ad::linear(features, head.cls.w1, head.cls.b1)), head.cls.w2, head.cls.b2);
  out.reg =
    ad::linear(ad::relu(ad::linear(features, head.reg.w1, head.reg.b1)), head.reg.w2, head.reg.b2);

  // differentiable absolute box parameters: reference base + offsets
  ad::Tensor base(n, 6);
  for (int i = 0; i < n; ++i) {
    const OrientedBoxBEV & ref = reference_boxes[i];
    const double ref_h = ref.height > 0.0 ? ref.height : config_.anchor_height;
    base.at(i, 0) = ref.cx;
    base.at(i, 1) = ref.cy;
    base.at(i, 2) = ref.z;
    base.at(i, 3) = std::log(ref.width);
    base.at(i, 4) = std::log(ref.length);
    base.at(i, 5) = std::log(ref_h);
  }
  out.loss_params = ad::concat_cols(
    {ad::add(ad::constant(std::move(base)), ad::slice_cols(out.reg, 0, 6)),
     ad::slice_cols(out.reg, 6, config_.reg_width())});

  out.detections.reserve(n);
  for (int i = 0; i < n; ++i) {
    const double * reg_row = out.reg->value.data() + static_cast<std::size_t>(i) * config_.reg_width();
    const OrientedBoxBEV box = decode_box(reference_boxes[i], reg_row);
    std::vector<double> scores(config_.num_classes);
    for (int k = 0; k < config_.num_classes; ++k) {
      const double logit = out.cls_logits->value.at(i, k);
      scores[k] = 1.0 / (1.0 + std::exp(-logit));
    }
    out.detections.emplace_back(box, std::move(scores), i);
  }
  return out;
}

FirstStageResult GridQueryDetector::first_stage(const BevGrid & grid, bool inference) const
{
  const int n_cells = grid.rows * grid.cols;
  std::vector<OrientedBoxBEV> anchors;
  anchors.reserve(n_cells);
  for (int i = 0; i < grid.rows; ++i) {
    for (int j = 0; j < grid.cols; ++j) {
      const Vec2 center = grid.cell_center(i, j);
      anchors.emplace_back(
        center.x, center.y, config_.center_height(), config_.anchor_width, config_.anchor_length,
        config_.anchor_height, 0.0);
    }
  }

  FirstStageResult result;
  result.stage0 = auxiliary_head(0, grid.features, anchors);
  result.has_stage0 = true;

  // candidate reduction applies at inference only; training decodes everything
  std::vector<Detection> candidates = result.stage0.detections;
  if (inference && config_.prefilter.kind != PrefilterKind::kNone) {
    candidates = prefilter_candidates(candidates, config_.prefilter);
  }

  std::vector<int> selected;
  if (config_.suppression_enabled) {
    const KeepSet keep = bev_nms(candidates, config_.tau);
    std::vector<Detection> survivors;
    survivors.reserve(keep.size());
    for (int idx : keep.kept) {
      survivors.push_back(candidates[idx]);
    }
    const KeepSet top = topk_by_confidence(survivors, config_.n_queries);
    selected.reserve(top.size());
    for (int idx : top.kept) {
      selected.push_back(survivors[idx].source_index);
    }
  } else {
    const KeepSet top = topk_by_confidence(candidates, config_.n_queries);
    selected.reserve(top.size());
    for (int idx : top.kept) {
      selected.push_back(candidates[idx].source_index);
    }
  }

  QuerySet & q = result.queries;
  q.features = ad::gather_rows(ad::detach(grid.features), selected);
  q.reference_boxes.reserve(selected.size());
  q.state.reserve(selected.size());
  for (std::size_t slot = 0; slot < selected.size(); ++slot) {
    Detection det = result.stage0.detections[selected[slot]];
    q.reference_boxes.push_back(det.box);
    q.state.push_back(std::move(det));
  }
  q.origin.assign(selected.size(), QueryOrigin::kGrid);
  q.participates.assign(selected.size(), config_.suppression_enabled ? 1 : 0);

  result.mask = AttentionMask(static_cast<int>(selected.size()));
  return result;
}

QuerySet GridQueryDetector::assemble_hybrid_queries(
  const QuerySet & grid_queries, const std::vector<AlignedMemoryEntry> & memory) const
{
  const std::size_t take = std::min<std::size_t>(memory.size(), config_.n_memory);
  if (take == 0) {
    return grid_queries;
  }

  ad::Tensor raw(static_cast<int>(take), config_.channels);
  std::vector<MotionAttributes> motion;
  motion.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const AlignedMemoryEntry & entry = memory[i];
    if (entry.features.size() != static_cast<std::size_t>(config_.channels)) {
      throw std::invalid_argument("memory feature width mismatch");
    }
    std::copy(
      entry.features.data(), entry.features.data() + config_.channels,
      raw.data() + i * static_cast<std::size_t>(config_.channels));
    motion.push_back(entry.motion);
  }
  const ad::Var encoded = motion_encoder_.encode(ad::constant(std::move(raw)), motion);

  QuerySet out;
  out.features = ad::concat_rows({grid_queries.features, encoded});
  out.reference_boxes = grid_queries.reference_boxes;
  out.state = grid_queries.state;
  out.origin = grid_queries.origin;
  out.participates = grid_queries.participates;
  const std::uint8_t mem_participates =
    (config_.suppression_enabled && config_.memory.include_in_mask) ? 1 : 0;
  for (std::size_t i = 0; i < take; ++i) {
    Detection det = memory[i].detection;
    det.source_index = grid_queries.size() + static_cast<int>(i);
    out.reference_boxes.push_back(det.box);
    out.state.push_back(std::move(det));
    out.origin.push_back(QueryOrigin::kMemory);
    out.participates.push_back(mem_participates);
  }
  return out;
}

AttentionMask GridQueryDetector::suppression_stage(
  const std::vector<Detection> & dets, const AttentionMask & mask,
  const std::vector<std::uint8_t> & participates) const
{
  const int n_q = mask.n_q();
  std::vector<int> candidates;
  candidates.reserve(n_q);
  for (int k = 0; k < n_q; ++k) {
    if (!mask.is_suppressed(k) && participates[k]) {
      candidates.push_back(k);
    }
  }
  std::vector<Detection> cand_dets;
  cand_dets.reserve(candidates.size());
  for (int k : candidates) {
    cand_dets.push_back(dets[k]);
  }
  const KeepSet kept_local = bev_nms(cand_dets, config_.tau);

  std::vector<std::uint8_t> newly_suppressed(n_q, 0);
  for (int k : candidates) {
    newly_suppressed[k] = 1;
  }
  for (int idx : kept_local.kept) {
    newly_suppressed[candidates[idx]] = 0;
  }

  // keep = every currently unsuppressed query that was not just suppressed,
  // so non-participants keep their zero bits
  KeepSet keep;
  for (int k = 0; k < n_q; ++k) {
    if (!mask.is_suppressed(k) && !newly_suppressed[k]) {
      keep.kept.push_back(k);
    }
  }
  return merge_mask(mask, keep);
}

GridQueryDetector::LayerResult GridQueryDetector::decoder_layer(
  int layer_index, const QuerySet & queries, const AttentionMask & mask, const BevGrid & grid) const
{
  const LayerParams & layer = layers_.at(layer_index);
  const int n_q = queries.size();
  if (mask.n_q() != n_q) {
    throw std::invalid_argument("mask does not match the query count");
  }

  const ad::Var x = queries.features;

  // masked self-attention over the queries
  const ad::MaskMatrix self_mask(mask);
  const ad::Var self_out = multihead(x, x, x, layer.self_attn, &self_mask);
  const ad::Var x1 = ad::layernorm(
    ad::add(x, ad::linear(self_out, layer.self_attn.wo, layer.self_attn.bo)),
    layer.self_attn.ln_g, layer.self_attn.ln_b);

  // cross-attention to the grid; suppressed queries have their rows masked.
  // Queries carry the code of their reference centers so attention can focus
  // around the box under refinement (the dense stand-in for sampling at
  // reference points).
  const int n_cells = grid.rows * grid.cols;
  ad::MaskMatrix row_mask(n_q, n_cells);
  for (int k = 0; k < n_q; ++k) {
    if (mask.is_suppressed(k)) {
      for (int c = 0; c < n_cells; ++c) {
        row_mask.set(k, c, 1);
      }
    }
  }
  std::vector<Vec2> ref_centers;
  ref_centers.reserve(n_q);
  for (const OrientedBoxBEV & ref : queries.reference_boxes) {
    ref_centers.push_back({ref.cx, ref.cy});
  }
  ad::Tensor cross_bias;
  const ad::Tensor * bias = nullptr;
  if (config_.locality_sigma > 0.0) {
    cross_bias = locality_bias(ref_centers, cell_centers_, config_.locality_sigma);
    bias = &cross_bias;
  }
  const ad::Var cross_q = ad::add(x1, ad::constant(code_for_points(ref_centers)));
  const ad::Var keys = ad::add(grid.features, ad::constant(positional_code_));
  const ad::Var cross_out =
    multihead(cross_q, keys, grid.features, layer.cross_attn, &row_mask, bias);
  const ad::Var x2 = ad::layernorm(
    ad::add(x1, ad::linear(cross_out, layer.cross_attn.wo, layer.cross_attn.bo)),
    layer.cross_attn.ln_g, layer.cross_attn.ln_b);

  const ad::Var ffn_out = ad::linear(
    ad::relu(ad::linear(x2, layer.ffn.w1, layer.ffn.b1)), layer.ffn.w2, layer.ffn.b2);
  const ad::Var x3 = ad::layernorm(ad::add(x2, ffn_out), layer.ffn.ln_g, layer.ffn.ln_b);

  LayerResult result;
  result.head = auxiliary_head(layer_index + 1, x3, queries.reference_boxes);
  result.mask = config_.suppression_enabled
                  ? suppression_stage(result.head.detections, mask, queries.participates)
                  : mask;

  // iterative refinement: the decoded boxes become the next references
  result.queries.features = x3;
  result.queries.state = result.head.detections;
  result.queries.reference_boxes.reserve(n_q);
  for (const Detection & det : result.head.detections) {
    result.queries.reference_boxes.push_back(det.box);
  }
  result.queries.origin = queries.origin;
  result.queries.participates = queries.participates;
  return result;
}

ForwardOutput GridQueryDetector::forward(
  const ad::Tensor & observation, const BevGrid * prev_grid,
  const std::vector<AlignedMemoryEntry> * memory, bool inference) const
{
  ForwardOutput out;
  out.grid = encode_scene(observation, prev_grid);

  QuerySet queries;
  if (config_.first_stage == ModelConfig::FirstStage::kDenseGrid) {
    FirstStageResult fs = first_stage(out.grid, inference);
    out.stage0 = std::move(fs.stage0);
    out.has_stage0 = true;
    queries = std::move(fs.queries);
  } else {
    queries.features = query_embed_;
    queries.reference_boxes = random_references_;
    queries.origin.assign(config_.n_queries, QueryOrigin::kGrid);
    queries.participates.assign(config_.n_queries, config_.suppression_enabled ? 1 : 0);
    queries.state.reserve(config_.n_queries);
    for (int i = 0; i < config_.n_queries; ++i) {
      queries.state.emplace_back(
        random_references_[i], std::vector<double>(config_.num_classes, 0.5), i);
    }
  }

  if (config_.hybrid_memory && memory && !memory->empty()) {
    queries = assemble_hybrid_queries(queries, *memory);
  }

  AttentionMask mask(queries.size());
  if (config_.suppression_enabled) {
    mask = suppression_stage(queries.state, mask, queries.participates);
  }
  out.masks.push_back(mask);

  // the decoder sees the grid through the gradient stop
  BevGrid decoder_grid = out.grid;
  decoder_grid.features = ad::detach(out.grid.features);

  // look-forward-twice state: base parameters entering the previous layer
  // and the previous layer's regression output
  ad::Tensor prev_base;
  ad::Var prev_reg;
  bool have_prev = false;

  for (int li = 0; li < config_.num_layers; ++li) {
    // base-6 parameters of the references entering this layer
    const int n_q = queries.size();
    ad::Tensor base_in(n_q, 6);
    for (int i = 0; i < n_q; ++i) {
      const OrientedBoxBEV & ref = queries.reference_boxes[i];
      const double ref_h = ref.height > 0.0 ? ref.height : config_.anchor_height;
      base_in.at(i, 0) = ref.cx;
      base_in.at(i, 1) = ref.cy;
      base_in.at(i, 2) = ref.z;
      base_in.at(i, 3) = std::log(ref.width);
      base_in.at(i, 4) = std::log(ref.length);
      base_in.at(i, 5) = std::log(ref_h);
    }

    LayerResult lr = decoder_layer(li, queries, mask, decoder_grid);

    if (have_prev) {
      // this layer's loss box re-applies its regression on top of the
      // gradient-carrying refinement of the previous layer
      lr.head.loss_params = ad::concat_cols(
        {ad::add(
           ad::add(ad::constant(prev_base), ad::slice_cols(prev_reg, 0, 6)),
           ad::slice_cols(lr.head.reg, 0, 6)),
         ad::slice_cols(lr.head.reg, 6, config_.reg_width())});
    }

    prev_base = std::move(base_in);
    prev_reg = lr.head.reg;
    have_prev = true;

    out.layers.push_back(lr.head);
    out.masks.push_back(lr.mask);
    queries = std::move(lr.queries);
    mask = out.masks.back();
  }

  out.queries = std::move(queries);
  return out;
}

std::pair<std::vector<Detection>, std::vector<ad::Tensor>> GridQueryDetector::memory_handoff(
  const ForwardOutput & out) const
{
  std::vector<Detection> dets;
  std::vector<ad::Tensor> feats;
  const AttentionMask & mask = out.final_mask();
  for (int k = 0; k < out.queries.size(); ++k) {
    if (mask.is_suppressed(k)) {
      continue;
    }
    dets.push_back(out.queries.state[k]);
    ad::Tensor row(1, config_.channels);
    std::copy(
      out.queries.features->value.data() + static_cast<std::size_t>(k) * config_.channels,
      out.queries.features->value.data() + static_cast<std::size_t>(k + 1) * config_.channels,
      row.data());
    feats.push_back(std::move(row));
  }
  return {std::move(dets), std::move(feats)};
}

std::vector<std::pair<std::string, ad::Var>> GridQueryDetector::parameters() const
{
  std::vector<std::pair<std::string, ad::Var>> params;
  const auto add_mlp = [&params](const std::string & prefix, const Mlp2 & mlp) {
    params.emplace_back(prefix + ".w1", mlp.w1);
    params.emplace_back(prefix + ".b1", mlp.b1);
    params.emplace_back(prefix + ".w2", mlp.w2);
    params.emplace_back(prefix + ".b2", mlp.b2);
  };
  const auto add_attn = [&params](const std::string & prefix, const AttnBlock & block) {
    params.emplace_back(prefix + ".wq", block.wq);
    params.emplace_back(prefix + ".wk", block.wk);
    params.emplace_back(prefix + ".wv", block.wv);
    params.emplace_back(prefix + ".wo", block.wo);
    params.emplace_back(prefix + ".bo", block.bo);
    params.emplace_back(prefix + ".ln_g", block.ln_g);
    params.emplace_back(prefix + ".ln_b", block.ln_b);
  };

  add_mlp("encoder.embed", embed_);
  add_attn("encoder.attn", encoder_attn_);
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    add_mlp("head" + std::to_string(i) + ".cls", heads_[i].cls);
    add_mlp("head" + std::to_string(i) + ".reg", heads_[i].reg);
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i);
    add_attn(prefix + ".self", layers_[i].self_attn);
    add_attn(prefix + ".cross", layers_[i].cross_attn);
    params.emplace_back(prefix + ".ffn.w1", layers_[i].ffn.w1);
    params.emplace_back(prefix + ".ffn.b1", layers_[i].ffn.b1);
    params.emplace_back(prefix + ".ffn.w2", layers_[i].ffn.w2);
    params.emplace_back(prefix + ".ffn.b2", layers_[i].ffn.b2);
    params.emplace_back(prefix + ".ffn.ln_g", layers_[i].ffn.ln_g);
    params.emplace_back(prefix + ".ffn.ln_b", layers_[i].ffn.ln_b);
  }
  for (auto & named : motion_encoder_.parameters("motion")) {
    params.push_back(std::move(named));
  }
  if (query_embed_) {
    params.emplace_back("query_embed", query_embed_);
  }
  return params;
}

std::vector<ad::Var> GridQueryDetector::trainable_parameters() const
{
  std::vector<ad::Var> out;
  for (auto & [name, var] : parameters()) {
    out.push_back(var);
  }
  return out;
}

}  // namespace bevquery
