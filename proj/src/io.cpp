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

#include "bevquery/io.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <sstream>

namespace bevquery::io {

using nlohmann::json;

namespace {

std::ifstream open_in(const std::string & path)
{
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  return in;
}

std::ofstream open_out(const std::string & path)
{
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  return out;
}

json box_to_json(const OrientedBoxBEV & box)
{
  return json{{"cx", box.cx}, {"cy", box.cy},     {"z", box.z},   {"w", box.width},
              {"l", box.length}, {"h", box.height}, {"yaw", box.yaw}, {"vx", box.vx},
              {"vy", box.vy}};
}

OrientedBoxBEV box_from_json(const json & j)
{
  return OrientedBoxBEV(
    j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("z").get<double>(),
    j.at("w").get<double>(), j.at("l").get<double>(), j.at("h").get<double>(),
    j.at("yaw").get<double>(), j.value("vx", 0.0), j.value("vy", 0.0));
}

constexpr char kBase64Chars[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

}  // namespace

std::string base64_encode(const std::vector<std::uint8_t> & bytes)
{
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    std::uint32_t chunk = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) {
      chunk |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    }
    if (i + 2 < bytes.size()) {
      chunk |= bytes[i + 2];
    }
    out.push_back(kBase64Chars[(chunk >> 18) & 0x3f]);
    out.push_back(kBase64Chars[(chunk >> 12) & 0x3f]);
    out.push_back(i + 1 < bytes.size() ? kBase64Chars[(chunk >> 6) & 0x3f] : '=');
    out.push_back(i + 2 < bytes.size() ? kBase64Chars[chunk & 0x3f] : '=');
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(const std::string & text)
{
  std::vector<int> lut(256, -1);
  for (int i = 0; i < 64; ++i) {
    lut[static_cast<unsigned char>(kBase64Chars[i])] = i;
  }
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  std::uint32_t chunk = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=' || ch == '\n' || ch == '\r') {
      continue;
    }
    const int v = lut[static_cast<unsigned char>(ch)];
    if (v < 0) {
      throw std::runtime_error("invalid base64 payload");
    }
    chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((chunk >> bits) & 0xff));
    }
  }
  return out;
}

DetectionFile read_detections(const std::string & path)
{
  std::ifstream in = open_in(path);
  DetectionFile file;
  std::string line;
  int line_no = 0;
  int next_index = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception & e) {
      throw ParseError(line_no, e.what());
    }
    try {
      if (j.value("type", "") == "header") {
        file.class_names = j.value("classes", std::vector<std::string>{});
        continue;
      }
      const OrientedBoxBEV box = box_from_json(j);
      std::vector<double> scores = j.at("scores").get<std::vector<double>>();
      Detection det(box, std::move(scores), next_index);
      if (j.contains("confidence")) {
        const double conf = j.at("confidence").get<double>();
        if (std::abs(conf - det.confidence) > 1e-9) {
          throw std::runtime_error("confidence does not equal the max class score");
        }
      }
      ++next_index;
      file.detections.push_back(std::move(det));
    } catch (const ParseError &) {
      throw;
    } catch (const std::exception & e) {
      throw ParseError(line_no, e.what());
    }
  }
  return file;
}

void write_detections(
  const std::string & path, const std::vector<Detection> & detections,
  const std::vector<std::string> & class_names)
{
  std::ofstream out = open_out(path);
  if (!class_names.empty()) {
    out << json{{"type", "header"}, {"classes", class_names}}.dump() << '\n';
  }
  for (const Detection & det : detections) {
    json j = box_to_json(det.box);
    j["scores"] = det.class_scores;
    j["confidence"] = det.confidence;
    out << j.dump() << '\n';
  }
}

void write_keep_indices(const std::string & path, const std::vector<int> & kept)
{
  std::ofstream out = open_out(path);
  out << json(kept).dump() << '\n';
}

void write_dataset(
  const std::string & path, const std::vector<SceneSequence> & sequences,
  const SceneGenConfig & config, const std::vector<std::string> & class_names)
{
  std::ofstream out = open_out(path);
  out << json{{"type", "header"},
              {"grid",
               {{"rows", config.grid_rows},
                {"cols", config.grid_cols},
                {"extent_x", config.extent_x},
                {"extent_y", config.extent_y},
                {"obs_channels", 2}}},
              {"classes", class_names}}
           .dump()
      << '\n';
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    for (std::size_t f = 0; f < sequences[s].frames.size(); ++f) {
      const Scene & frame = sequences[s].frames[f];
      json gt = json::array();
      for (const SceneObject & obj : frame.gt) {
        json g = box_to_json(obj.box);
        g["class"] = obj.class_id;
        gt.push_back(std::move(g));
      }
      out << json{{"type", "frame"},
                  {"seq", s},
                  {"frame", f},
                  {"timestamp", frame.timestamp},
                  {"ego", {{"tx", frame.ego_pose.tx}, {"ty", frame.ego_pose.ty},
                           {"theta", frame.ego_pose.theta}}},
                  {"gt", gt},
                  {"observation", frame.observation.values()}}
               .dump()
          << '\n';
    }
  }
}

std::vector<SceneSequence> read_dataset(const std::string & path, SceneGenConfig * config_out)
{
  std::ifstream in = open_in(path);
  std::vector<SceneSequence> sequences;
  SceneGenConfig config;
  bool have_header = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception & e) {
      throw ParseError(line_no, e.what());
    }
    try {
      const std::string type = j.value("type", "frame");
      if (type == "header") {
        const json & grid = j.at("grid");
        config.grid_rows = grid.at("rows").get<int>();
        config.grid_cols = grid.at("cols").get<int>();
        config.extent_x = grid.at("extent_x").get<double>();
        config.extent_y = grid.at("extent_y").get<double>();
        config.num_classes = static_cast<int>(j.value("classes", std::vector<std::string>{}).size());
        have_header = true;
        continue;
      }
      if (!have_header) {
        throw std::runtime_error("dataset header record missing");
      }
      const std::size_t seq = j.at("seq").get<std::size_t>();
      if (sequences.size() <= seq) {
        sequences.resize(seq + 1);
      }
      Scene frame;
      frame.timestamp = j.at("timestamp").get<double>();
      const json & ego = j.at("ego");
      frame.ego_pose =
        Pose2D(ego.at("tx").get<double>(), ego.at("ty").get<double>(), ego.at("theta").get<double>());
      for (const json & g : j.at("gt")) {
        frame.gt.push_back({box_from_json(g), g.at("class").get<int>()});
      }
      std::vector<double> obs = j.at("observation").get<std::vector<double>>();
      const int cells = config.grid_rows * config.grid_cols;
      if (static_cast<int>(obs.size()) % cells != 0) {
        throw std::runtime_error("observation length does not match the grid");
      }
      const int channels = static_cast<int>(obs.size()) / cells;
      frame.observation = ad::Tensor::from({cells, channels}, std::move(obs));
      sequences[seq].frames.push_back(std::move(frame));
    } catch (const ParseError &) {
      throw;
    } catch (const std::exception & e) {
      throw ParseError(line_no, e.what());
    }
  }
  if (config_out) {
    *config_out = config;
  }
  return sequences;
}

namespace {

json config_to_json(const ModelConfig & c)
{
  json j;
  j["grid_rows"] = c.grid_rows;
  j["grid_cols"] = c.grid_cols;
  j["extent_x"] = c.extent_x;
  j["extent_y"] = c.extent_y;
  j["obs_channels"] = c.obs_channels;
  j["channels"] = c.channels;
  j["num_classes"] = c.num_classes;
  j["num_layers"] = c.num_layers;
  j["n_queries"] = c.n_queries;
  j["n_memory"] = c.n_memory;
  j["tau"] = c.tau;
  j["attention_heads"] = c.attention_heads;
  j["hidden_width"] = c.hidden_width;
  j["lambda"] = c.lambda;
  j["anchor_width"] = c.anchor_width;
  j["anchor_length"] = c.anchor_length;
  j["anchor_height"] = c.anchor_height;
  j["height_min"] = c.height_min;
  j["height_max"] = c.height_max;
  j["locality_sigma"] = c.locality_sigma;
  j["use_velocity"] = c.use_velocity;
  j["suppression_enabled"] = c.suppression_enabled;
  j["hybrid_memory"] = c.hybrid_memory;
  j["memory_loss"] = c.memory.include_in_loss;
  j["memory_mask"] = c.memory.include_in_mask;
  j["prefilter_kind"] = static_cast<int>(c.prefilter.kind);
  j["prefilter_k"] = c.prefilter.k;
  j["prefilter_threshold"] = c.prefilter.threshold;
  j["first_stage"] =
    c.first_stage == ModelConfig::FirstStage::kDenseGrid ? "dense" : "random";
  j["init_seed"] = c.init_seed;
  return j;
}

ModelConfig config_from_json(const json & j)
{
  ModelConfig c;
  c.grid_rows = j.at("grid_rows").get<int>();
  c.grid_cols = j.at("grid_cols").get<int>();
  c.extent_x = j.at("extent_x").get<double>();
  c.extent_y = j.at("extent_y").get<double>();
  c.obs_channels = j.at("obs_channels").get<int>();
  c.channels = j.at("channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.n_queries = j.at("n_queries").get<int>();
  c.n_memory = j.at("n_memory").get<int>();
  c.tau = j.at("tau").get<double>();
  c.attention_heads = j.at("attention_heads").get<int>();
  c.hidden_width = j.at("hidden_width").get<int>();
  c.lambda = j.at("lambda").get<std::vector<double>>();
  c.anchor_width = j.at("anchor_width").get<double>();
  c.anchor_length = j.at("anchor_length").get<double>();
  c.anchor_height = j.at("anchor_height").get<double>();
  c.height_min = j.at("height_min").get<double>();
  c.height_max = j.at("height_max").get<double>();
  c.locality_sigma = j.at("locality_sigma").get<double>();
  c.use_velocity = j.at("use_velocity").get<bool>();
  c.suppression_enabled = j.at("suppression_enabled").get<bool>();
  c.hybrid_memory = j.at("hybrid_memory").get<bool>();
  c.memory.include_in_loss = j.at("memory_loss").get<bool>();
  c.memory.include_in_mask = j.at("memory_mask").get<bool>();
  c.prefilter.kind = static_cast<PrefilterKind>(j.at("prefilter_kind").get<int>());
  c.prefilter.k = j.at("prefilter_k").get<std::size_t>();
  c.prefilter.threshold = j.at("prefilter_threshold").get<double>();
  c.first_stage = j.at("first_stage").get<std::string>() == "random"
                    ? ModelConfig::FirstStage::kRandomReference
                    : ModelConfig::FirstStage::kDenseGrid;
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_checkpoint(const std::string & path, const GridQueryDetector & model)
{
  json params = json::object();
  for (const auto & [name, var] : model.parameters()) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(var->value.size() * 8);
    for (std::size_t i = 0; i < var->value.size(); ++i) {
      std::uint64_t word;
      static_assert(sizeof(word) == sizeof(double));
      std::memcpy(&word, &var->value[i], sizeof(word));
      for (int b = 0; b < 8; ++b) {
        bytes.push_back(static_cast<std::uint8_t>((word >> (8 * b)) & 0xff));
      }
    }
    params[name] = json{{"shape", var->value.shape()}, {"data", base64_encode(bytes)}};
  }
  std::ofstream out = open_out(path);
  out << json{{"format", "bevquery-checkpoint-v1"},
              {"config", config_to_json(model.config())},
              {"params", params}}
           .dump()
      << '\n';
}

void load_checkpoint(const std::string & path, GridQueryDetector & model)
{
  std::ifstream in = open_in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception & e) {
    throw ParseError(1, e.what());
  }
  if (j.value("format", "") != "bevquery-checkpoint-v1") {
    throw std::runtime_error("unrecognized checkpoint format");
  }
  const json & params = j.at("params");
  for (const auto & [name, var] : model.parameters()) {
    if (!params.contains(name)) {
      throw std::runtime_error("checkpoint is missing parameter " + name);
    }
    const json & entry = params.at(name);
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    if (shape != var->value.shape()) {
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    }
    const std::vector<std::uint8_t> bytes = base64_decode(entry.at("data").get<std::string>());
    if (bytes.size() != var->value.size() * 8) {
      throw std::runtime_error("checkpoint payload size mismatch for " + name);
    }
    for (std::size_t i = 0; i < var->value.size(); ++i) {
      std::uint64_t word = 0;
      for (int b = 7; b >= 0; --b) {
        word = (word << 8) | bytes[i * 8 + b];
      }
      std::memcpy(&var->value[i], &word, sizeof(word));
    }
  }
}

GridQueryDetector load_model_checkpoint(const std::string & path)
{
  std::ifstream in = open_in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception & e) {
    throw ParseError(1, e.what());
  }
  if (j.value("format", "") != "bevquery-checkpoint-v1") {
    throw std::runtime_error("unrecognized checkpoint format");
  }
  GridQueryDetector model(config_from_json(j.at("config")));
  load_checkpoint(path, model);
  return model;
}

std::map<std::string, std::string> read_kv_config(const std::string & path)
{
  std::ifstream in = open_in(path);
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) {
      line = line.substr(0, hash);
    }
    const auto strip = [](std::string s) {
      const auto begin = s.find_first_not_of(" \t\r");
      const auto end = s.find_last_not_of(" \t\r");
      return begin == std::string::npos ? std::string{} : s.substr(begin, end - begin + 1);
    };
    line = strip(line);
    if (line.empty()) {
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError(line_no, "expected key=value");
    }
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    if (key.empty()) {
      throw ParseError(line_no, "empty key");
    }
    out[key] = value;
  }
  return out;
}

}  // namespace bevquery::io
