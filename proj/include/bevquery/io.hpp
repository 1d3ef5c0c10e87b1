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

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevquery/model.hpp"
#include "bevquery/training.hpp"

namespace bevquery::io {

/// Parse failure with the 1-based line number of the offending record.
class ParseError : public std::runtime_error {
public:
  ParseError(int line, const std::string & what)
  : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line)
  {
  }
  int line() const { return line_; }

private:
  int line_;
};

struct DetectionFile {
  std::vector<std::string> class_names;  // from the header record, if present
  std::vector<Detection> detections;
};

/// JSON-lines detection dump. An optional leading header record carries the
/// class names; detection records are assigned source_index by file order.
DetectionFile read_detections(const std::string & path);
void write_detections(
  const std::string & path, const std::vector<Detection> & detections,
  const std::vector<std::string> & class_names);

/// Sidecar keep-index list ([i, j, ...], indices into the input order).
void write_keep_indices(const std::string & path, const std::vector<int> & kept);

/// JSON-lines dataset: one header line, then one line per frame.
void write_dataset(
  const std::string & path, const std::vector<SceneSequence> & sequences,
  const SceneGenConfig & config, const std::vector<std::string> & class_names);
std::vector<SceneSequence> read_dataset(const std::string & path, SceneGenConfig * config_out);

/// Model checkpoint: one JSON object with the model configuration and a map
/// of parameter names to shape + base64 little-endian float64 buffers.
/// Loading then saving is byte-identical.
void save_checkpoint(const std::string & path, const GridQueryDetector & model);
void load_checkpoint(const std::string & path, GridQueryDetector & model);
/// Rebuilds the model from the configuration embedded in the checkpoint.
GridQueryDetector load_model_checkpoint(const std::string & path);

/// Flat key=value config file; '#' starts a comment. Unknown keys are the
/// caller's problem (the CLI rejects them).
std::map<std::string, std::string> read_kv_config(const std::string & path);

std::string base64_encode(const std::vector<std::uint8_t> & bytes);
std::vector<std::uint8_t> base64_decode(const std::string & text);

}  // namespace bevquery::io
