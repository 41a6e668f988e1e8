// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <vector>

namespace mtel {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

}  // namespace mtel

// Minimal tape-free reverse-mode differentiation over dense row-major matrices.
// Every op returns a Var owning its value; gradients flow back through the
// parent links recorded at construction time.
namespace mtel::ag {

struct Node {
  Matrix value;
  // Parameters are borrowed so the graph never copies model weights.
  const Matrix* borrowed = nullptr;
  Matrix grad;
  Matrix* grad_sink = nullptr;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  const Matrix& val() const { return borrowed ? *borrowed : value; }
  Matrix& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->val(); }
  // Empty matrix when no gradient reached this node.
  const Matrix& grad() const { return node_->grad; }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Matrix value);
Var variable(Matrix value);
Var parameter(const Matrix& value, Matrix& grad_sink);

// Seeds d(root)/d(root) = 1 and propagates. Gradients of parameter leaves
// are added to their sinks.
void backward(const Var& root);

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var transpose(const Var& a);
// x[rows x n] + b[1 x n]
Var add_row(const Var& x, const Var& row);
// x W + b with W stored [in x out] and b [1 x out].
Var linear(const Var& x, const Var& weight, const Var& bias);

Var sigmoid(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);

// Row-wise normalization with affine gamma/beta [1 x n].
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// Softmax down each column (over the row/time axis).
Var softmax_cols(const Var& x);

Var sum_rows(const Var& x);
Var sum_all(const Var& x);
Var mean_all(const Var& x);

// y[t] = x[(t + shift) mod T]
Var rotate_rows(const Var& x, Index shift);
Var gather_rows(const Var& x, const std::vector<Index>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var column(const Var& x, Index col);
Var element(const Var& x, Index row, Index col);
Var mean_of(const std::vector<Var>& parts);

// Inverted dropout; identity when p == 0.
Var dropout(const Var& x, double p, std::mt19937_64& rng);

// Mean binary cross-entropy against fixed targets, predictions clamped to
// [eps, 1 - eps].
Var bce_mean(const Var& p, const Matrix& target, double eps = 1e-7);

// Cosine similarity of one row vector against every row of x, [T x 1].
// A zero-norm operand yields similarity 0.
Var cosine_rows(const Var& e, const Var& x);

// Scaled dot-product attention with `heads` heads. With window > 0 the
// sequence is split into contiguous blocks of that size (the tail block may be
// shorter) and attention is confined to each block; queries and keys must then
// share length. window == 0 attends over all keys.
Var multihead_attention(const Var& q, const Var& k, const Var& v, int heads, Index window = 0);

// Per-head, per-block attention probabilities, in block-major then head order.
std::vector<Matrix> attention_weights(const Matrix& q, const Matrix& k, int heads, Index window = 0);

// Graph attention aggregation: logits e_ij = LeakyReLU(src_i + dst_j) over
// edges of `adjacency`, softmax over j, out_i = sum_j alpha_ij h_j.
Var graph_attention(const Var& src_score, const Var& dst_score, const Var& h, const Mask& adjacency,
                    double slope = 0.2);

Matrix graph_attention_coefficients(const Matrix& src_score, const Matrix& dst_score, const Mask& adjacency,
                                    double slope = 0.2);

}  // namespace mtel::ag
