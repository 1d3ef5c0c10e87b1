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

#include "bevquery/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace bevquery::ad {

namespace {

std::size_t shape_product(const std::vector<int> & shape)
{
  std::size_t n = 1;
  for (int extent : shape) {
    if (extent < 0) {
      throw std::invalid_argument("negative tensor extent");
    }
    n *= static_cast<std::size_t>(extent);
  }
  return n;
}

void require(bool cond, const char * what)
{
  if (!cond) {
    throw std::invalid_argument(what);
  }
}

double stable_sigmoid(double x)
{
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x)
{
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// out += a * b, shapes [n x k] * [k x m]
void matmul_nn_acc(const Tensor & a, const Tensor & b, Tensor & out)
{
  const int n = a.rows();
  const int k = a.cols();
  const int m = b.cols();
  for (int i = 0; i < n; ++i) {
    double * orow = out.data() + static_cast<std::size_t>(i) * m;
    const double * arow = a.data() + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) {
        continue;
      }
      const double * brow = b.data() + static_cast<std::size_t>(kk) * m;
      for (int j = 0; j < m; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
}

// out += a * b^T, shapes [n x m] * [k x m]^T -> [n x k]
void matmul_nt_acc(const Tensor & a, const Tensor & b, Tensor & out)
{
  const int n = a.rows();
  const int m = a.cols();
  const int k = b.rows();
  for (int i = 0; i < n; ++i) {
    const double * arow = a.data() + static_cast<std::size_t>(i) * m;
    double * orow = out.data() + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double * brow = b.data() + static_cast<std::size_t>(kk) * m;
      double acc = 0.0;
      for (int j = 0; j < m; ++j) {
        acc += arow[j] * brow[j];
      }
      orow[kk] += acc;
    }
  }
}

// out += a^T * b, shapes [n x k]^T * [n x m] -> [k x m]
void matmul_tn_acc(const Tensor & a, const Tensor & b, Tensor & out)
{
  const int n = a.rows();
  const int k = a.cols();
  const int m = b.cols();
  for (int i = 0; i < n; ++i) {
    const double * arow = a.data() + static_cast<std::size_t>(i) * k;
    const double * brow = b.data() + static_cast<std::size_t>(i) * m;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = arow[kk];
      if (aik == 0.0) {
        continue;
      }
      double * orow = out.data() + static_cast<std::size_t>(kk) * m;
      for (int j = 0; j < m; ++j) {
        orow[j] += aik * brow[j];
      }
    }
  }
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node &)> backprop)
{
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool any_grad = false;
  for (const Var & p : parents) {
    any_grad = any_grad || (p && p->requires_grad);
  }
  node->requires_grad = any_grad;
  if (any_grad) {
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
  }
  return node;
}

void accumulate(Var & parent, const Tensor & delta)
{
  if (!parent->requires_grad) {
    return;
  }
  Tensor & g = parent->ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) {
    g[i] += delta[i];
  }
}

}  // namespace

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)), data_(shape_product(shape_), 0.0)
{
}

Tensor::Tensor(int rows, int cols) : Tensor(std::vector<int>{rows, cols}) {}

Tensor Tensor::scalar(double v)
{
  Tensor t(std::vector<int>{1});
  t.data_[0] = v;
  return t;
}

Tensor Tensor::row(std::vector<double> values)
{
  Tensor t;
  t.shape_ = {1, static_cast<int>(values.size())};
  t.data_ = std::move(values);
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values)
{
  if (shape_product(shape) != values.size()) {
    throw std::invalid_argument("shape does not match value count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

int Tensor::rows() const
{
  if (shape_.size() == 1) {
    return 1;
  }
  require(shape_.size() == 2, "rank-2 tensor expected");
  return shape_[0];
}

int Tensor::cols() const
{
  if (shape_.size() == 1) {
    return shape_[0];
  }
  require(shape_.size() == 2, "rank-2 tensor expected");
  return shape_[1];
}

double & Tensor::at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }

double Tensor::at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

double Tensor::item() const
{
  require(data_.size() == 1, "item() requires a one-element tensor");
  return data_[0];
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor & Node::ensure_grad()
{
  if (grad.size() != value.size()) {
    grad = Tensor(value.shape());
  }
  return grad;
}

Var leaf(Tensor value, bool requires_grad)
{
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

void backward(const Var & loss)
{
  require(loss != nullptr && loss->value.size() == 1, "backward needs a scalar loss");
  if (!loss->requires_grad) {
    return;
  }

  // Iterative depth-first postorder; parents end up before children, so the
  // reverse scan visits each node before anything it feeds.
  struct Frame {
    Node * node;
    std::size_t next;
  };
  std::vector<Node *> topo;
  std::unordered_set<const Node *> seen;
  std::vector<Frame> stack{{loss.get(), 0}};
  seen.insert(loss.get());
  while (!stack.empty()) {
    Frame & frame = stack.back();
    if (frame.next < frame.node->parents.size()) {
      Node * parent = frame.node->parents[frame.next++].get();
      if (parent->requires_grad && seen.insert(parent).second) {
        stack.push_back({parent, 0});
      }
    } else {
      topo.push_back(frame.node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node * node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop(*node);
    }
  }
}

void zero_grad(const std::vector<Var> & params)
{
  for (const Var & p : params) {
    if (p && p->grad.size() > 0) {
      p->grad.fill(0.0);
    }
  }
}

Var matmul(const Var & a, const Var & b)
{
  require(a->value.cols() == b->value.rows(), "matmul inner extents differ");
  Tensor out(a->value.rows(), b->value.cols());
  matmul_nn_acc(a->value, b->value, out);
  return make_node(std::move(out), {a, b}, [](Node & self) {
    const Var & a = self.parents[0];
    const Var & b = self.parents[1];
    if (a->requires_grad) {
      matmul_nt_acc(self.grad, b->value, a->ensure_grad());
    }
    if (b->requires_grad) {
      matmul_tn_acc(a->value, self.grad, b->ensure_grad());
    }
  });
}

Var transpose(const Var & a)
{
  const int n = a->value.rows();
  const int m = a->value.cols();
  Tensor out(m, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      out.at(j, i) = a->value.at(i, j);
    }
  }
  return make_node(std::move(out), {a}, [n, m](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < m; ++j) {
        g.at(i, j) += self.grad.at(j, i);
      }
    }
  });
}

Var add(const Var & a, const Var & b)
{
  require(a->value.same_shape(b->value), "add shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += b->value[i];
  }
  return make_node(std::move(out), {a, b}, [](Node & self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

Var sub(const Var & a, const Var & b)
{
  require(a->value.same_shape(b->value), "sub shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] -= b->value[i];
  }
  return make_node(std::move(out), {a, b}, [](Node & self) {
    accumulate(self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor & g = self.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] -= self.grad[i];
      }
    }
  });
}

Var mul(const Var & a, const Var & b)
{
  require(a->value.same_shape(b->value), "mul shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= b->value[i];
  }
  return make_node(std::move(out), {a, b}, [](Node & self) {
    const Var & a = self.parents[0];
    const Var & b = self.parents[1];
    if (a->requires_grad) {
      Tensor & g = a->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * b->value[i];
      }
    }
    if (b->requires_grad) {
      Tensor & g = b->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        g[i] += self.grad[i] * a->value[i];
      }
    }
  });
}

Var add_rowvec(const Var & a, const Var & b)
{
  require(b->value.rows() == 1 && b->value.cols() == a->value.cols(), "row vector width mismatch");
  Tensor out = a->value;
  const int n = out.rows();
  const int m = out.cols();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      out.at(i, j) += b->value[j];
    }
  }
  return make_node(std::move(out), {a, b}, [n, m](Node & self) {
    accumulate(self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) {
      Tensor & g = self.parents[1]->ensure_grad();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
          g[j] += self.grad.at(i, j);
        }
      }
    }
  });
}

Var scale(const Var & a, double c)
{
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] *= c;
  }
  return make_node(std::move(out), {a}, [c](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += c * self.grad[i];
    }
  });
}

Var relu(const Var & a)
{
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::max(0.0, out[i]);
  }
  return make_node(std::move(out), {a}, [](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    const Tensor & x = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (x[i] > 0.0) {
        g[i] += self.grad[i];
      }
    }
  });
}

Var sigmoid(const Var & a)
{
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = stable_sigmoid(out[i]);
  }
  return make_node(std::move(out), {a}, [](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Var exp(const Var & a)
{
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::exp(out[i]);
  }
  return make_node(std::move(out), {a}, [](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * self.value[i];
    }
  });
}

Var concat_rows(const std::vector<Var> & parts)
{
  require(!parts.empty(), "concat of nothing");
  const int m = parts[0]->value.cols();
  int n = 0;
  for (const Var & p : parts) {
    require(p->value.cols() == m, "concat_rows width mismatch");
    n += p->value.rows();
  }
  Tensor out(n, m);
  int r = 0;
  for (const Var & p : parts) {
    std::copy(
      p->value.data(), p->value.data() + p->value.size(),
      out.data() + static_cast<std::size_t>(r) * m);
    r += p->value.rows();
  }
  return make_node(std::move(out), parts, [m](Node & self) {
    int r = 0;
    for (Var & p : self.parents) {
      const int pr = p->value.rows();
      if (p->requires_grad) {
        Tensor & g = p->ensure_grad();
        const double * src = self.grad.data() + static_cast<std::size_t>(r) * m;
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += src[i];
        }
      }
      r += pr;
    }
  });
}

Var concat_cols(const std::vector<Var> & parts)
{
  require(!parts.empty(), "concat of nothing");
  const int n = parts[0]->value.rows();
  int m = 0;
  for (const Var & p : parts) {
    require(p->value.rows() == n, "concat_cols height mismatch");
    m += p->value.cols();
  }
  Tensor out(n, m);
  int c = 0;
  for (const Var & p : parts) {
    const int pc = p->value.cols();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < pc; ++j) {
        out.at(i, c + j) = p->value.at(i, j);
      }
    }
    c += pc;
  }
  return make_node(std::move(out), parts, [n](Node & self) {
    int c = 0;
    for (Var & p : self.parents) {
      const int pc = p->value.cols();
      if (p->requires_grad) {
        Tensor & g = p->ensure_grad();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < pc; ++j) {
            g.at(i, j) += self.grad.at(i, c + j);
          }
        }
      }
      c += pc;
    }
  });
}

Var gather_rows(const Var & a, std::vector<int> indices)
{
  const int m = a->value.cols();
  Tensor out(static_cast<int>(indices.size()), m);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int src = indices[i];
    require(src >= 0 && src < a->value.rows(), "gather_rows index out of range");
    std::copy(
      a->value.data() + static_cast<std::size_t>(src) * m,
      a->value.data() + static_cast<std::size_t>(src + 1) * m,
      out.data() + i * static_cast<std::size_t>(m));
  }
  return make_node(std::move(out), {a}, [idx = std::move(indices), m](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double * src = self.grad.data() + i * static_cast<std::size_t>(m);
      double * dst = g.data() + static_cast<std::size_t>(idx[i]) * m;
      for (int j = 0; j < m; ++j) {
        dst[j] += src[j];
      }
    }
  });
}

Var slice_cols(const Var & a, int first, int last)
{
  require(0 <= first && first < last && last <= a->value.cols(), "bad column slice");
  const int n = a->value.rows();
  const int w = last - first;
  Tensor out(n, w);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < w; ++j) {
      out.at(i, j) = a->value.at(i, first + j);
    }
  }
  return make_node(std::move(out), {a}, [first, n, w](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < w; ++j) {
        g.at(i, first + j) += self.grad.at(i, j);
      }
    }
  });
}

Var softmax_rows(const Var & a)
{
  const int n = a->value.rows();
  const int m = a->value.cols();
  Tensor out(n, m);
  for (int i = 0; i < n; ++i) {
    double mx = a->value.at(i, 0);
    for (int j = 1; j < m; ++j) {
      mx = std::max(mx, a->value.at(i, j));
    }
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
      const double e = std::exp(a->value.at(i, j) - mx);
      out.at(i, j) = e;
      denom += e;
    }
    for (int j = 0; j < m; ++j) {
      out.at(i, j) /= denom;
    }
  }
  return make_node(std::move(out), {a}, [n, m](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < m; ++j) {
        dot += self.grad.at(i, j) * self.value.at(i, j);
      }
      for (int j = 0; j < m; ++j) {
        g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
    }
  });
}

Var layernorm(const Var & x, const Var & gamma, const Var & beta, double eps)
{
  const int n = x->value.rows();
  const int m = x->value.cols();
  require(gamma->value.rows() == 1 && gamma->value.cols() == m, "layernorm gamma width mismatch");
  require(beta->value.rows() == 1 && beta->value.cols() == m, "layernorm beta width mismatch");
  Tensor out(n, m);
  Tensor normalized(n, m);
  std::vector<double> inv_sigma(n);
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < m; ++j) {
      mu += x->value.at(i, j);
    }
    mu /= m;
    double var = 0.0;
    for (int j = 0; j < m; ++j) {
      const double d = x->value.at(i, j) - mu;
      var += d * d;
    }
    var /= m;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[i] = inv;
    for (int j = 0; j < m; ++j) {
      const double y = (x->value.at(i, j) - mu) * inv;
      normalized.at(i, j) = y;
      out.at(i, j) = gamma->value[j] * y + beta->value[j];
    }
  }
  return make_node(
    std::move(out), {x, gamma, beta},
    [n, m, y = std::move(normalized), inv = std::move(inv_sigma)](Node & self) {
      const Var & x = self.parents[0];
      const Var & gamma = self.parents[1];
      const Var & beta = self.parents[2];
      if (gamma->requires_grad) {
        Tensor & gg = gamma->ensure_grad();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < m; ++j) {
            gg[j] += self.grad.at(i, j) * y.at(i, j);
          }
        }
      }
      if (beta->requires_grad) {
        Tensor & gb = beta->ensure_grad();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < m; ++j) {
            gb[j] += self.grad.at(i, j);
          }
        }
      }
      if (x->requires_grad) {
        Tensor & gx = x->ensure_grad();
        for (int i = 0; i < n; ++i) {
          double mean_h = 0.0;
          double mean_hy = 0.0;
          for (int j = 0; j < m; ++j) {
            const double h = self.grad.at(i, j) * gamma->value[j];
            mean_h += h;
            mean_hy += h * y.at(i, j);
          }
          mean_h /= m;
          mean_hy /= m;
          for (int j = 0; j < m; ++j) {
            const double h = self.grad.at(i, j) * gamma->value[j];
            gx.at(i, j) += inv[i] * (h - mean_h - y.at(i, j) * mean_hy);
          }
        }
      }
    });
}

Var linear(const Var & x, const Var & weight, const Var & bias)
{
  return add_rowvec(matmul(x, weight), bias);
}

Var sum(const Var & a)
{
  Tensor out = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < a->value.size(); ++i) {
    out[0] += a->value[i];
  }
  return make_node(std::move(out), {a}, [](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[0];
    }
  });
}

Var mean(const Var & a)
{
  const double n = static_cast<double>(a->value.size());
  return scale(sum(a), 1.0 / n);
}

Var mse(const Var & pred, const Tensor & target)
{
  require(pred->value.same_shape(target), "mse target shape mismatch");
  const double n = static_cast<double>(pred->value.size());
  Tensor out = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < pred->value.size(); ++i) {
    const double d = pred->value[i] - target[i];
    out[0] += d * d;
  }
  out[0] /= n;
  return make_node(std::move(out), {pred}, [target, n](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    const Tensor & p = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[0] * 2.0 * (p[i] - target[i]) / n;
    }
  });
}

Var l1(const Var & pred, const Tensor & target, Reduction reduction)
{
  require(pred->value.same_shape(target), "l1 target shape mismatch");
  const double norm =
    reduction == Reduction::kMean ? static_cast<double>(pred->value.size()) : 1.0;
  Tensor out = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < pred->value.size(); ++i) {
    out[0] += std::abs(pred->value[i] - target[i]);
  }
  out[0] /= norm;
  return make_node(std::move(out), {pred}, [target, norm](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    const Tensor & p = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double d = p[i] - target[i];
      const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      g[i] += self.grad[0] * sign / norm;
    }
  });
}

Var cross_entropy(const Var & logits, const std::vector<int> & targets)
{
  const int n = logits->value.rows();
  const int m = logits->value.cols();
  require(static_cast<int>(targets.size()) == n, "one target per row expected");
  Tensor out = Tensor::scalar(0.0);
  for (int i = 0; i < n; ++i) {
    require(targets[i] >= 0 && targets[i] < m, "cross_entropy target out of range");
    double mx = logits->value.at(i, 0);
    for (int j = 1; j < m; ++j) {
      mx = std::max(mx, logits->value.at(i, j));
    }
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
      denom += std::exp(logits->value.at(i, j) - mx);
    }
    out[0] += mx + std::log(denom) - logits->value.at(i, targets[i]);
  }
  out[0] /= n;
  return make_node(std::move(out), {logits}, [targets, n, m](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    const Tensor & x = self.parents[0]->value;
    for (int i = 0; i < n; ++i) {
      double mx = x.at(i, 0);
      for (int j = 1; j < m; ++j) {
        mx = std::max(mx, x.at(i, j));
      }
      double denom = 0.0;
      for (int j = 0; j < m; ++j) {
        denom += std::exp(x.at(i, j) - mx);
      }
      for (int j = 0; j < m; ++j) {
        const double p = std::exp(x.at(i, j) - mx) / denom;
        const double one_hot = j == targets[i] ? 1.0 : 0.0;
        g.at(i, j) += self.grad[0] * (p - one_hot) / n;
      }
    }
  });
}

Var focal_loss_sum(const Var & logits, const Tensor & targets, double alpha, double gamma)
{
  require(logits->value.same_shape(targets), "focal targets shape mismatch");
  Tensor out = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < logits->value.size(); ++i) {
    const double x = logits->value[i];
    const double p = stable_sigmoid(x);
    if (targets[i] > 0.5) {
      out[0] += alpha * std::pow(1.0 - p, gamma) * softplus(-x);
    } else {
      out[0] += (1.0 - alpha) * std::pow(p, gamma) * softplus(x);
    }
  }
  return make_node(std::move(out), {logits}, [targets, alpha, gamma](Node & self) {
    Tensor & g = self.parents[0]->ensure_grad();
    const Tensor & logit = self.parents[0]->value;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = logit[i];
      const double p = stable_sigmoid(x);
      double d;
      if (targets[i] > 0.5) {
        // log p = -softplus(-x)
        d = alpha * std::pow(1.0 - p, gamma) * (-gamma * p * softplus(-x) - (1.0 - p));
      } else {
        d = (1.0 - alpha) * std::pow(p, gamma) * (p + gamma * (1.0 - p) * softplus(x));
      }
      g[i] += self.grad[0] * d;
    }
  });
}

Var masked_softmax_rows(const Var & scores, const MaskMatrix & mask)
{
  const int n = scores->value.rows();
  const int m = scores->value.cols();
  require(mask.rows == n && mask.cols == m, "mask dimensions mismatch");
  Tensor out(n, m);
  for (int i = 0; i < n; ++i) {
    double mx = -1e300;
    bool any = false;
    for (int j = 0; j < m; ++j) {
      if (!mask.at(i, j)) {
        mx = std::max(mx, scores->value.at(i, j));
        any = true;
      }
    }
    if (!any) {
      continue;  // fully masked row stays exactly zero
    }
    double denom = 0.0;
    for (int j = 0; j < m; ++j) {
      if (!mask.at(i, j)) {
        const double e = std::exp(scores->value.at(i, j) - mx);
        out.at(i, j) = e;
        denom += e;
      }
    }
    for (int j = 0; j < m; ++j) {
      out.at(i, j) /= denom;
    }
  }
  return make_node(std::move(out), {scores}, [n, m](Node & self) {
    // Masked probabilities are exactly zero, so the plain softmax Jacobian
    // already sends them (and fully masked rows) zero gradient.
    Tensor & g = self.parents[0]->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double dot = 0.0;
      for (int j = 0; j < m; ++j) {
        dot += self.grad.at(i, j) * self.value.at(i, j);
      }
      for (int j = 0; j < m; ++j) {
        g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
    }
  });
}

Var masked_attention(const Var & q, const Var & k, const Var & v, const MaskMatrix & mask)
{
  const int d = q->value.cols();
  require(d > 0, "attention feature width must be positive");
  require(k->value.cols() == d, "query/key width mismatch");
  require(k->value.rows() == v->value.rows(), "key/value count mismatch");
  require(mask.rows == q->value.rows() && mask.cols == k->value.rows(), "mask/attention mismatch");
  const Var scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d)));
  const Var probs = masked_softmax_rows(scores, mask);
  return matmul(probs, v);
}

Var masked_attention(const Var & q, const Var & k, const Var & v, const AttentionMask & mask)
{
  return masked_attention(q, k, v, MaskMatrix(mask));
}

Var detach(const Var & x) { return constant(x->value); }

double grad_check(const std::function<Var(const Var &)> & f, const Tensor & x, double h)
{
  Var input = leaf(x, true);
  Var loss = f(input);
  require(loss->value.size() == 1, "grad_check needs a scalar function");
  backward(loss);
  Tensor analytic = input->grad.size() == x.size() ? input->grad : Tensor(x.shape());

  double max_err = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor plus = x;
    plus[i] += h;
    Tensor minus = x;
    minus[i] -= h;
    const double fp = f(leaf(plus, false))->value.item();
    const double fm = f(leaf(minus, false))->value.item();
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

}  // namespace bevquery::ad
