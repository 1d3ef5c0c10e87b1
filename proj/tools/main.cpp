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

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "bevquery/io.hpp"
#include "bevquery/model.hpp"
#include "bevquery/training.hpp"

using nlohmann::json;
using namespace bevquery;

namespace {

// exit-code contract: 0 ok, 2 parse/missing-input error, 3 invalid flags,
// 4 NaN loss
constexpr int kExitParse = 2;
constexpr int kExitFlags = 3;
constexpr int kExitNan = 4;

struct FlagError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

PrefilterMode parse_prefilter(const std::string & text)
{
  if (text == "none" || text.empty()) {
    return PrefilterMode::none();
  }
  if (text.rfind("topk:", 0) == 0) {
    const long k = std::stol(text.substr(5));
    if (k < 0) {
      throw FlagError("topk prefilter needs a non-negative count");
    }
    return PrefilterMode::topk(static_cast<std::size_t>(k));
  }
  if (text.rfind("conf:", 0) == 0) {
    const double t = std::stod(text.substr(5));
    if (!(t >= 0.0 && t <= 1.0)) {
      throw FlagError("confidence prefilter threshold must lie in [0, 1]");
    }
    return PrefilterMode::confidence(t);
  }
  throw FlagError("unknown prefilter mode: " + text);
}

NmsMode parse_mode(const std::string & text)
{
  if (text == "plain" || text.empty()) {
    return NmsMode::kPlain;
  }
  if (text == "class") {
    return NmsMode::kClassAware;
  }
  if (text == "scale") {
    return NmsMode::kScale;
  }
  if (text == "class+scale") {
    return NmsMode::kClassAwareScale;
  }
  throw FlagError("unknown NMS mode: " + text);
}

std::vector<double> parse_double_list(const std::string & text, char sep = ',')
{
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) {
      out.push_back(std::stod(item));
    }
  }
  return out;
}

std::pair<int, int> parse_grid(const std::string & text)
{
  const auto x = text.find('x');
  if (x == std::string::npos) {
    throw FlagError("expected a grid like 32x32");
  }
  return {std::stoi(text.substr(0, x)), std::stoi(text.substr(x + 1))};
}

std::vector<std::string> default_class_names(int count)
{
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) {
    names.push_back("class" + std::to_string(i));
  }
  return names;
}

// ---- nms ----

int cmd_nms(
  const std::string & input, const std::string & output, double tau, const std::string & mode_text,
  const std::string & prefilter_text, const std::string & factors_text)
{
  const NmsMode mode = parse_mode(mode_text);
  const PrefilterMode prefilter = parse_prefilter(prefilter_text);
  std::vector<double> factors;
  const bool needs_factors = mode == NmsMode::kScale || mode == NmsMode::kClassAwareScale;
  if (needs_factors) {
    if (factors_text.empty()) {
      throw FlagError("scale modes need --scale-factors");
    }
    factors = parse_double_list(factors_text);
    for (double f : factors) {
      if (!(f > 0.0)) {
        throw FlagError("scale factors must be positive");
      }
    }
  } else if (!factors_text.empty()) {
    throw FlagError("--scale-factors is only valid with a scale mode");
  }
  if (!(tau >= 0.0 && tau <= 1.0)) {
    throw FlagError("--tau must lie in [0, 1]");
  }

  const io::DetectionFile file = io::read_detections(input);
  const std::vector<Detection> candidates = prefilter_candidates(file.detections, prefilter);
  const KeepSet keep = bev_nms_class_aware(candidates, tau, mode, factors);

  std::vector<int> ordered = keep.kept;
  std::sort(ordered.begin(), ordered.end(), [&candidates](int a, int b) {
    if (candidates[a].confidence != candidates[b].confidence) {
      return candidates[a].confidence > candidates[b].confidence;
    }
    return candidates[a].source_index < candidates[b].source_index;
  });

  std::vector<Detection> kept;
  std::vector<int> input_indices;
  kept.reserve(ordered.size());
  for (int idx : ordered) {
    kept.push_back(candidates[idx]);
    input_indices.push_back(candidates[idx].source_index);
  }
  io::write_detections(output, kept, file.class_names);
  io::write_keep_indices(output + ".keep.json", input_indices);
  return 0;
}

// ---- simulate ----

int cmd_simulate(
  std::uint64_t seed, int sequences, int frames, const std::string & grid_text, double extent,
  int classes, double noise, int min_objects, int max_objects, double speed, double ego_speed,
  const std::string & out_dir)
{
  SceneGenConfig config;
  std::tie(config.grid_rows, config.grid_cols) = parse_grid(grid_text);
  config.extent_x = extent;
  config.extent_y = extent;
  config.num_classes = classes;
  config.noise_sigma = noise;
  config.min_objects = min_objects;
  config.max_objects = max_objects;
  config.speed_max = speed;
  config.ego_speed_max = ego_speed;
  while (static_cast<int>(config.class_dims.size()) < classes) {
    const double base = 1.2 + 0.7 * config.class_dims.size();
    config.class_dims.push_back({base, base + 0.8, 1.3});
  }

  std::vector<SceneSequence> out;
  out.reserve(sequences);
  for (int s = 0; s < sequences; ++s) {
    out.push_back(generate_scene(seed + s, config, frames));
  }
  std::filesystem::create_directories(out_dir);
  io::write_dataset(out_dir + "/dataset.jsonl", out, config, default_class_names(classes));
  std::cout << json{{"sequences", sequences}, {"frames_per_sequence", frames},
                    {"path", out_dir + "/dataset.jsonl"}}
                 .dump()
            << std::endl;
  return 0;
}

// ---- train ----

class KvTaker {
public:
  explicit KvTaker(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

  std::string take(const std::string & key, const std::string & fallback)
  {
    const auto it = kv_.find(key);
    if (it == kv_.end()) {
      return fallback;
    }
    std::string value = it->second;
    kv_.erase(it);
    return value;
  }
  double take_double(const std::string & key, double fallback)
  {
    const auto it = kv_.find(key);
    if (it == kv_.end()) {
      return fallback;
    }
    const double v = std::stod(it->second);
    kv_.erase(it);
    return v;
  }
  long take_long(const std::string & key, long fallback)
  {
    const auto it = kv_.find(key);
    if (it == kv_.end()) {
      return fallback;
    }
    const long v = std::stol(it->second);
    kv_.erase(it);
    return v;
  }
  bool take_bool(const std::string & key, bool fallback)
  {
    const auto it = kv_.find(key);
    if (it == kv_.end()) {
      return fallback;
    }
    const std::string v = it->second;
    kv_.erase(it);
    if (v == "1" || v == "true" || v == "on" || v == "yes") {
      return true;
    }
    if (v == "0" || v == "false" || v == "off" || v == "no") {
      return false;
    }
    throw ConfigError("boolean expected for " + key + ", got " + v);
  }
  void expect_empty() const
  {
    if (!kv_.empty()) {
      throw ConfigError("unknown config key: " + kv_.begin()->first);
    }
  }

private:
  std::map<std::string, std::string> kv_;
};

std::pair<ModelConfig, TrainConfig> parse_train_config(const std::string & path)
{
  KvTaker kv(io::read_kv_config(path));

  ModelConfig mc;
  std::tie(mc.grid_rows, mc.grid_cols) = parse_grid(kv.take("grid", "32x32"));
  mc.extent_x = mc.extent_y = kv.take_double("extent", 8.0);
  mc.channels = static_cast<int>(kv.take_long("channels", 48));
  mc.num_classes = static_cast<int>(kv.take_long("classes", 2));
  mc.num_layers = static_cast<int>(kv.take_long("layers", 3));
  mc.n_queries = static_cast<int>(kv.take_long("queries", 128));
  mc.n_memory = static_cast<int>(kv.take_long("memory_budget", 300));
  mc.tau = kv.take_double("tau", 0.2);
  mc.attention_heads = static_cast<int>(kv.take_long("heads", 1));
  mc.hidden_width = static_cast<int>(kv.take_long("hidden", 96));
  mc.locality_sigma = kv.take_double("locality_sigma", 1.0);
  mc.use_velocity = kv.take_bool("velocity", true);
  mc.suppression_enabled = kv.take_bool("suppression", true);
  mc.hybrid_memory = kv.take_bool("hybrid", false);
  mc.memory.include_in_loss = kv.take_bool("memory_loss", true);
  mc.memory.include_in_mask = kv.take_bool("memory_mask", true);
  mc.prefilter = parse_prefilter(kv.take("prefilter", "none"));
  mc.first_stage = kv.take("first_stage", "dense") == "random"
                     ? ModelConfig::FirstStage::kRandomReference
                     : ModelConfig::FirstStage::kDenseGrid;
  mc.init_seed = static_cast<std::uint64_t>(kv.take_long("init_seed", 1));
  const std::string lambda_text = kv.take("lambda", "");
  if (!lambda_text.empty()) {
    mc.lambda = parse_double_list(lambda_text);
  }

  TrainConfig tc;
  tc.scenes.grid_rows = mc.grid_rows;
  tc.scenes.grid_cols = mc.grid_cols;
  tc.scenes.extent_x = mc.extent_x;
  tc.scenes.extent_y = mc.extent_y;
  tc.scenes.num_classes = mc.num_classes;
  tc.scenes.min_objects = static_cast<int>(kv.take_long("min_objects", 2));
  tc.scenes.max_objects = static_cast<int>(kv.take_long("max_objects", 5));
  tc.scenes.noise_sigma = kv.take_double("noise", 0.02);
  tc.scenes.speed_max = kv.take_double("speed_max", 1.5);
  tc.scenes.ego_speed_max = kv.take_double("ego_speed_max", 0.0);
  tc.scenes.ego_yaw_rate_max = kv.take_double("ego_yaw_rate_max", 0.0);
  tc.scenes.dt = kv.take_double("dt", 0.5);
  tc.scenes.spawn_margin = kv.take_double("spawn_margin", 0.8);
  const std::string dims_text = kv.take("class_dims", "");
  if (!dims_text.empty()) {
    tc.scenes.class_dims.clear();
    std::stringstream ss(dims_text);
    std::string group;
    while (std::getline(ss, group, ';')) {
      const std::vector<double> v = parse_double_list(group);
      if (v.size() != 3) {
        throw ConfigError("class_dims groups need min,max,aspect");
      }
      tc.scenes.class_dims.push_back({v[0], v[1], v[2]});
    }
  }

  tc.steps = static_cast<int>(kv.take_long("steps", 300));
  tc.frames_per_scene = static_cast<int>(kv.take_long("frames", 1));
  tc.dataset_size = static_cast<int>(kv.take_long("dataset_size", 0));
  tc.lr = kv.take_double("lr", 2e-3);
  tc.momentum = kv.take_double("momentum", 0.9);
  tc.data_seed = static_cast<std::uint64_t>(kv.take_long("data_seed", 1000));
  tc.eval_every = static_cast<int>(kv.take_long("eval_every", 100));
  tc.eval_sequences = static_cast<int>(kv.take_long("eval_sequences", 12));
  tc.eval_iou = kv.take_double("eval_iou", 0.5);
  tc.eval_min_confidence = kv.take_double("eval_min_conf", 0.3);
  tc.target_f1 = kv.take_double("target_f1", -1.0);
  tc.match.w_cls = kv.take_double("w_cls", 2.0);
  tc.match.w_box = kv.take_double("w_box", 0.25);

  kv.expect_empty();
  return {mc, tc};
}

json metrics_to_json(const Metrics & m)
{
  return json{{"precision", m.precision}, {"recall", m.recall},
              {"f1", m.f1},               {"ap", m.ap},
              {"mean_center_error", m.mean_center_error},
              {"tp", m.tp},               {"fp", m.fp},
              {"fn", m.fn}};
}

int cmd_train(const std::string & config_path, const std::string & out_dir)
{
  auto [mc, tc] = parse_train_config(config_path);
  GridQueryDetector model(mc);

  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir + "/metrics.jsonl");
  tc.on_step = [&log](const StepRecord & record) {
    json j{{"step", record.step}, {"loss", record.loss}};
    if (record.eval) {
      j["eval"] = metrics_to_json(*record.eval);
    }
    log << j.dump() << '\n';
    log.flush();
  };
  const TrainResult result = train_model(model, tc);

  if (result.hit_nan) {
    std::cerr << "NaN loss at step " << result.nan_step << std::endl;
    return kExitNan;
  }

  io::save_checkpoint(out_dir + "/checkpoint.json", model);
  std::cout << json{{"steps", result.steps_run},
                    {"initial_loss", result.initial_loss},
                    {"best_loss_first_300", result.best_loss_first_300},
                    {"final_eval", metrics_to_json(result.final_eval)},
                    {"checkpoint", out_dir + "/checkpoint.json"}}
                 .dump()
            << std::endl;
  return 0;
}

// ---- eval ----

int cmd_eval(
  const std::string & model_path, const std::string & data_path, double iou, double min_conf)
{
  GridQueryDetector model = io::load_model_checkpoint(model_path);
  SceneGenConfig data_config;
  const std::vector<SceneSequence> sequences = io::read_dataset(data_path, &data_config);
  const ModelConfig & mc = model.config();
  if (data_config.grid_rows != mc.grid_rows || data_config.grid_cols != mc.grid_cols) {
    throw std::runtime_error("dataset grid does not match the model grid");
  }

  std::vector<std::vector<Detection>> preds;
  std::vector<std::vector<SceneObject>> gts;
  for (const SceneSequence & sequence : sequences) {
    MemoryQueue memory(4, mc.n_memory);
    std::optional<ad::Tensor> prev_features;
    Pose2D prev_pose;
    for (const Scene & frame : sequence.frames) {
      BevGrid prev;
      if (prev_features) {
        GridAlignConfig align;
        align.rows = mc.grid_rows;
        align.cols = mc.grid_cols;
        align.extent_x = mc.extent_x;
        align.extent_y = mc.extent_y;
        prev = BevGrid{mc.grid_rows, mc.grid_cols, mc.extent_x, mc.extent_y,
                       ad::constant(align_bev_grid(
                         *prev_features, align, compose(inverse(frame.ego_pose), prev_pose)))};
      }
      std::vector<AlignedMemoryEntry> aligned;
      if (mc.hybrid_memory && !memory.empty()) {
        aligned = align_memory(memory, frame.ego_pose, frame.timestamp);
      }
      const ForwardOutput out = model.forward(
        frame.observation, prev_features ? &prev : nullptr, aligned.empty() ? nullptr : &aligned,
        true);
      preds.push_back(out.final_detections(min_conf));
      gts.push_back(frame.gt);
      if (mc.hybrid_memory) {
        auto [dets, feats] = model.memory_handoff(out);
        memory.push(dets, feats, frame.ego_pose, frame.timestamp);
      }
      prev_features = out.grid.features->value;
      prev_pose = frame.ego_pose;
    }
  }
  std::cout << metrics_to_json(evaluate_frames(preds, gts, iou)).dump() << std::endl;
  return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  const auto random_tensor = [&rng](int rows, int cols) {
    std::uniform_real_distribution<double> mag(0.1, 1.0);
    std::bernoulli_distribution sign(0.5);
    ad::Tensor t(rows, cols);
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = (sign(rng) ? 1.0 : -1.0) * mag(rng);
    }
    return t;
  };

  bool ok = true;
  const auto report = [&ok](const std::string & name, double err, double tol = 1e-5) {
    const bool pass = err <= tol;
    ok = ok && pass;
    std::cout << (pass ? "ok   " : "FAIL ") << name << " max_rel_err=" << err << std::endl;
  };

  const ad::Tensor a = random_tensor(4, 3);
  const ad::Tensor b = random_tensor(3, 5);
  const ad::Tensor c = random_tensor(4, 3);
  const ad::Tensor rowv = random_tensor(1, 3);
  const ad::Tensor target = random_tensor(4, 3);

  using ad::Var;
  report("matmul", ad::grad_check([&](const Var & x) { return ad::sum(ad::matmul(x, ad::constant(b))); }, a));
  report("add", ad::grad_check([&](const Var & x) { return ad::sum(ad::mul(ad::add(x, ad::constant(c)), x)); }, a));
  report("concat", ad::grad_check(
                     [&](const Var & x) {
                       return ad::sum(ad::mul(ad::concat_rows({x, ad::constant(a)}),
                                              ad::concat_rows({ad::constant(c), ad::constant(c)})));
                     },
                     a));
  const ad::Tensor lin_b = random_tensor(1, 5);
  const ad::Tensor lin_w = random_tensor(4, 5);
  report("linear", ad::grad_check(
                     [&](const Var & x) {
                       return ad::sum(ad::mul(ad::linear(x, ad::constant(b), ad::constant(lin_b)),
                                              ad::constant(lin_w)));
                     },
                     a));
  const ad::Tensor gamma = random_tensor(1, 3);
  const ad::Tensor beta = random_tensor(1, 3);
  report("layernorm", ad::grad_check(
                        [&](const Var & x) {
                          return ad::sum(ad::mul(
                            ad::layernorm(x, ad::constant(gamma), ad::constant(beta)),
                            ad::constant(c)));
                        },
                        a));
  report("relu", ad::grad_check([&](const Var & x) { return ad::sum(ad::mul(ad::relu(x), ad::constant(c))); }, a));
  report("softmax", ad::grad_check([&](const Var & x) { return ad::sum(ad::mul(ad::softmax_rows(x), ad::constant(c))); }, a));
  report("mse", ad::grad_check([&](const Var & x) { return ad::mse(x, target); }, a));
  report("l1", ad::grad_check([&](const Var & x) { return ad::l1(x, target); }, a));
  report("cross_entropy", ad::grad_check([&](const Var & x) { return ad::cross_entropy(x, {0, 2, 1, 2}); }, a));
  ad::Tensor onehot(4, 3);
  for (std::size_t i = 0; i < onehot.size(); ++i) {
    onehot[i] = i % 3 == 0 ? 1.0 : 0.0;
  }
  report("focal", ad::grad_check(
                    [&](const Var & x) { return ad::focal_loss_sum(x, onehot, 0.25, 2.0); }, a));

  // masked attention composite
  {
    const int n = 6, d = 4;
    ad::MaskMatrix mask(n, n);
    std::bernoulli_distribution bit(0.3);
    for (int r = 0; r < n; ++r) {
      for (int cc = 0; cc < n; ++cc) {
        mask.set(r, cc, bit(rng) ? 1 : 0);
      }
    }
    const ad::Tensor stacked = random_tensor(3 * n, d);
    const ad::Tensor weights = random_tensor(n, d);
    std::vector<int> qi(n), ki(n), vi(n);
    for (int i = 0; i < n; ++i) {
      qi[i] = i;
      ki[i] = n + i;
      vi[i] = 2 * n + i;
    }
    report("masked_attention", ad::grad_check(
                                 [&](const Var & x) {
                                   return ad::sum(ad::mul(
                                     ad::masked_attention(
                                       ad::gather_rows(x, qi), ad::gather_rows(x, ki),
                                       ad::gather_rows(x, vi), mask),
                                     ad::constant(weights)));
                                 },
                                 stacked));
  }

  // auxiliary head and the full toy model against finite differences
  ModelConfig mc;
  mc.grid_rows = 6;
  mc.grid_cols = 6;
  mc.extent_x = mc.extent_y = 3.0;
  mc.channels = 8;
  mc.hidden_width = 12;
  mc.num_layers = 2;
  mc.n_queries = 8;
  mc.num_classes = 2;
  mc.tau = 0.3;
  mc.init_seed = seed;
  GridQueryDetector model(mc);
  // distinct confidences keep the discrete NMS/top-k decisions stable under
  // the finite-difference perturbations
  for (const auto & [name, var] : model.parameters()) {
    if (name.find(".w2") != std::string::npos || name.find(".wo") != std::string::npos) {
      std::uniform_real_distribution<double> dist(-0.15, 0.15);
      for (std::size_t i = 0; i < var->value.size(); ++i) {
        var->value[i] = dist(rng);
      }
    }
  }

  SceneGenConfig sc;
  sc.grid_rows = 6;
  sc.grid_cols = 6;
  sc.extent_x = sc.extent_y = 3.0;
  sc.class_dims = {{0.8, 1.2, 1.3}, {1.2, 1.6, 1.3}};
  sc.min_objects = 2;
  sc.max_objects = 3;
  sc.noise_sigma = 0.01;
  const SceneSequence sequence = generate_scene(seed + 17, sc, 1);
  const Scene & scene = sequence.frames[0];

  {
    // head gradient with respect to its input features
    std::vector<OrientedBoxBEV> refs(4, OrientedBoxBEV(0.4, -0.3, 0.0, 1.0, 1.2, 1.0, 0.2));
    const ad::Tensor feats = random_tensor(4, mc.channels);
    const ad::Tensor wsum = random_tensor(4, mc.reg_width());
    report("auxiliary_head", ad::grad_check(
                               [&](const Var & x) {
                                 const HeadOutput h = model.auxiliary_head(1, x, refs);
                                 return ad::add(
                                   ad::sum(ad::mul(h.reg, ad::constant(wsum))),
                                   ad::sum(ad::mul(h.cls_logits, h.cls_logits)));
                               },
                               feats));
  }

  {
    // full model: loss as a function of a few parameter tensors
    const auto loss_value = [&]() {
      const ForwardOutput out = model.forward(scene.observation);
      return total_loss(out, scene.gt, mc);
    };
    const std::vector<std::string> picks = {
      "encoder.embed.w1", "encoder.attn.wq", "layer0.self.wv", "layer1.ffn.w1", "head2.reg.w2",
      "head0.cls.b2"};
    double worst = 0.0;
    for (const auto & [name, var] : model.parameters()) {
      if (std::find(picks.begin(), picks.end(), name) == picks.end()) {
        continue;
      }
      ad::zero_grad(model.trainable_parameters());
      ad::backward(loss_value());
      ad::Tensor analytic = var->grad.size() == var->value.size() ? var->grad
                                                                  : ad::Tensor(var->value.shape());
      const std::size_t coords = std::min<std::size_t>(12, var->value.size());
      const double h = 1e-5;
      for (std::size_t i = 0; i < coords; ++i) {
        const double orig = var->value[i];
        var->value[i] = orig + h;
        const double fp = loss_value()->value.item();
        var->value[i] = orig - h;
        const double fm = loss_value()->value.item();
        var->value[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
      }
    }
    report("full_model", worst);
  }

  return ok ? 0 : 1;
}

// ---- bench ----

int cmd_bench(int candidates, int repeats, int threads, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> center(-60.0, 60.0);
  std::uniform_real_distribution<double> dim(1.0, 4.0);
  std::uniform_real_distribution<double> angle(-3.14159265358979, 3.14159265358979);
  std::uniform_real_distribution<double> conf(0.0, 1.0);
  std::vector<Detection> dets;
  dets.reserve(candidates);
  for (int i = 0; i < candidates; ++i) {
    dets.emplace_back(
      OrientedBoxBEV(center(rng), center(rng), dim(rng), dim(rng), angle(rng)),
      std::vector<double>{conf(rng)}, i);
  }

  const auto run = [&](const NmsOptions & opts) {
    std::vector<double> times_ms;
    KeepSet keep;
    for (int r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      keep = bev_nms(dets, 0.1, opts);
      const auto stop = std::chrono::steady_clock::now();
      times_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    std::sort(times_ms.begin(), times_ms.end());
    const double median = times_ms[times_ms.size() / 2];
    const double p95 = times_ms[std::min(
      times_ms.size() - 1, static_cast<std::size_t>(std::ceil(0.95 * times_ms.size())) - 1)];
    return std::make_tuple(median, p95, keep);
  };

  const auto [on_median, on_p95, on_keep] = run(NmsOptions{true, threads});
  const auto [off_median, off_p95, off_keep] = run(NmsOptions{false, threads});

  std::cout << json{{"candidates", candidates},
                    {"repeats", repeats},
                    {"threads", threads},
                    {"kept", on_keep.kept.size()},
                    {"keep_sets_identical", on_keep.kept == off_keep.kept},
                    {"heuristic_on", {{"median_ms", on_median}, {"p95_ms", on_p95}}},
                    {"heuristic_off", {{"median_ms", off_median}, {"p95_ms", off_p95}}},
                    {"speedup", off_median / on_median}}
                 .dump()
            << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char ** argv)
{
  CLI::App app{"BEV grid-cell query detection toolkit"};
  app.require_subcommand(1);

  // nms
  auto * nms = app.add_subcommand("nms", "rotated BEV NMS over a detection dump");
  std::string nms_input, nms_output, nms_mode = "plain", nms_prefilter = "none", nms_factors;
  double nms_tau = 0.1;
  nms->add_option("--input", nms_input)->required();
  nms->add_option("--output", nms_output)->required();
  nms->add_option("--tau", nms_tau)->required();
  nms->add_option("--mode", nms_mode);
  nms->add_option("--prefilter", nms_prefilter);
  nms->add_option("--scale-factors", nms_factors);

  // simulate
  auto * simulate = app.add_subcommand("simulate", "generate a synthetic dataset");
  std::uint64_t sim_seed = 1;
  int sim_sequences = 10, sim_frames = 1, sim_classes = 2, sim_min = 2, sim_max = 5;
  double sim_extent = 8.0, sim_noise = 0.02, sim_speed = 1.5, sim_ego_speed = 0.0;
  std::string sim_grid = "32x32", sim_out = "out";
  simulate->add_option("--seed", sim_seed);
  simulate->add_option("--sequences", sim_sequences);
  simulate->add_option("--frames", sim_frames);
  simulate->add_option("--grid", sim_grid);
  simulate->add_option("--extent", sim_extent);
  simulate->add_option("--classes", sim_classes);
  simulate->add_option("--noise", sim_noise);
  simulate->add_option("--min-objects", sim_min);
  simulate->add_option("--max-objects", sim_max);
  simulate->add_option("--speed-max", sim_speed);
  simulate->add_option("--ego-speed-max", sim_ego_speed);
  simulate->add_option("--out", sim_out)->required();

  // train
  auto * train = app.add_subcommand("train", "train the toy detector");
  std::string train_config, train_out;
  train->add_option("--config", train_config)->required();
  train->add_option("--out", train_out)->required();

  // eval
  auto * eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_model, eval_data;
  double eval_iou = 0.5, eval_min_conf = 0.3;
  eval->add_option("--model", eval_model)->required();
  eval->add_option("--data", eval_data)->required();
  eval->add_option("--iou", eval_iou);
  eval->add_option("--min-conf", eval_min_conf);

  // gradcheck
  auto * gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::uint64_t gc_seed = 7;
  gradcheck->add_option("--seed", gc_seed);

  // bench
  auto * bench = app.add_subcommand("bench", "NMS throughput benchmark");
  int bench_candidates = 40000, bench_repeats = 3, bench_threads = 1;
  std::uint64_t bench_seed = 11;
  bench->add_option("--candidates", bench_candidates);
  bench->add_option("--repeats", bench_repeats);
  bench->add_option("--threads", bench_threads);
  bench->add_option("--seed", bench_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp & e) {
    return app.exit(e);
  } catch (const CLI::ParseError & e) {
    app.exit(e);
    return kExitFlags;
  }

  try {
    if (nms->parsed()) {
      return cmd_nms(nms_input, nms_output, nms_tau, nms_mode, nms_prefilter, nms_factors);
    }
    if (simulate->parsed()) {
      return cmd_simulate(
        sim_seed, sim_sequences, sim_frames, sim_grid, sim_extent, sim_classes, sim_noise, sim_min,
        sim_max, sim_speed, sim_ego_speed, sim_out);
    }
    if (train->parsed()) {
      return cmd_train(train_config, train_out);
    }
    if (eval->parsed()) {
      return cmd_eval(eval_model, eval_data, eval_iou, eval_min_conf);
    }
    if (gradcheck->parsed()) {
      return cmd_gradcheck(gc_seed);
    }
    if (bench->parsed()) {
      return cmd_bench(bench_candidates, bench_repeats, bench_threads, bench_seed);
    }
  } catch (const io::ParseError & e) {
    std::cerr << "parse error: " << e.what() << std::endl;
    return kExitParse;
  } catch (const ConfigError & e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return kExitParse;
  } catch (const FlagError & e) {
    std::cerr << "flag error: " << e.what() << std::endl;
    return kExitFlags;
  } catch (const std::invalid_argument & e) {
    std::cerr << "flag error: " << e.what() << std::endl;
    return kExitFlags;
  } catch (const std::exception & e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitParse;
  }
  return 0;
}
