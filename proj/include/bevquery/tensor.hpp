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

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "bevquery/suppression.hpp"

namespace bevquery::ad {

/// Dense row-major tensor of 64-bit floats. Everything the pipeline needs is
/// rank 1 or 2; rank-2 accessors assume a [rows x cols] layout.
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(int rows, int cols);

  static Tensor scalar(double v);
  static Tensor row(std::vector<double> values);
  static Tensor from(std::vector<int> shape, std::vector<double> values);

  const std::vector<int> & shape() const { return shape_; }
  int rows() const;
  int cols() const;
  std::size_t size() const { return data_.size(); }
  bool same_shape(const Tensor & other) const { return shape_ == other.shape_; }

  double & at(int r, int c);
  double at(int r, int c) const;
  double & operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double * data() { return data_.data(); }
  const double * data() const { return data_.data(); }
  const std::vector<double> & values() const { return data_; }

  /// Value of a one-element tensor.
  double item() const;

  void fill(double v);

private:
  std::vector<int> shape_;
  std::vector<double> data_;
};

struct Node;
using Var = std::shared_ptr<Node>;

/// One node of the computation tape. Nodes are created in forward order;
/// backward() replays the recorded local rules in reverse topological order.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node &)> backprop;

  /// Allocates (zeroed) storage for grad if not present.
  Tensor & ensure_grad();
};

Var leaf(Tensor value, bool requires_grad);
Var constant(Tensor value);

/// Runs reverse-mode accumulation from a scalar loss. Gradients accumulate
/// into every requires_grad node reachable from `loss`; callers owning
/// persistent leaves (parameters) zero them between steps.
void backward(const Var & loss);

void zero_grad(const std::vector<Var> & params);

// Binary mask with arbitrary row/column counts (1 = suppressed).
struct MaskMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> bits;

  MaskMatrix() = default;
  MaskMatrix(int rows, int cols) : rows(rows), cols(cols), bits(std::size_t(rows) * cols, 0) {}
  explicit MaskMatrix(const AttentionMask & m)
  : rows(m.n_q()), cols(m.n_q()), bits(m.bits()) {}

  std::uint8_t at(int r, int c) const { return bits[static_cast<std::size_t>(r) * cols + c]; }
  void set(int r, int c, std::uint8_t v) { bits[static_cast<std::size_t>(r) * cols + c] = v; }
};

enum class Reduction { kMean, kSum };

// ---- core ops (each records its backward rule) ----

Var matmul(const Var & a, const Var & b);
Var transpose(const Var & a);
Var add(const Var & a, const Var & b);
Var sub(const Var & a, const Var & b);
Var mul(const Var & a, const Var & b);
/// Broadcasts a [1 x m] row vector over the rows of a.
Var add_rowvec(const Var & a, const Var & b);
Var scale(const Var & a, double c);
Var relu(const Var & a);
Var sigmoid(const Var & a);
Var exp(const Var & a);
Var concat_rows(const std::vector<Var> & parts);
Var concat_cols(const std::vector<Var> & parts);
Var gather_rows(const Var & a, std::vector<int> indices);
Var slice_cols(const Var & a, int first, int last);
Var softmax_rows(const Var & a);
Var layernorm(const Var & x, const Var & gamma, const Var & beta, double eps = 1e-12);
Var linear(const Var & x, const Var & weight, const Var & bias);
Var sum(const Var & a);
Var mean(const Var & a);
Var mse(const Var & pred, const Tensor & target);
Var l1(const Var & pred, const Tensor & target, Reduction reduction = Reduction::kMean);
Var cross_entropy(const Var & logits, const std::vector<int> & targets);

/// Sigmoid focal loss, summed over all entries. `targets` holds 0/1 per
/// (row, class).
Var focal_loss_sum(const Var & logits, const Tensor & targets, double alpha, double gamma);

/// Row-wise softmax with additive -1e9 on masked entries; rows that are
/// fully masked short-circuit to exact zeros (and propagate zero gradient).
Var masked_softmax_rows(const Var & scores, const MaskMatrix & mask);

/// softmax(Q K^T / sqrt(d) + M) V with the suppression mask semantics above.
Var masked_attention(const Var & q, const Var & k, const Var & v, const MaskMatrix & mask);
Var masked_attention(const Var & q, const Var & k, const Var & v, const AttentionMask & mask);

/// Values pass through; gradient stops here.
Var detach(const Var & x);

/// Central finite-difference check of a scalar-valued tensor function.
/// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Var(const Var &)> & f, const Tensor & x, double h = 1e-5);

}  // namespace bevquery::ad
