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

#include "mtel/autograd.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mtel::nn {

// Which training phase owns a parameter; each phase has its own learning rate.
enum class Phase : int { snippet = 1, extraction = 2, interaction = 3 };

struct Parameter {
  std::string name;
  Phase phase = Phase::snippet;
  Matrix value;
  Matrix grad;

  ag::Var var() { return ag::parameter(value, grad); }
};

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& create(const std::string& name, Phase phase, Matrix init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;

  std::vector<std::unique_ptr<Parameter>>& params() { return params_; }
  const std::vector<std::unique_ptr<Parameter>>& params() const { return params_; }

  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> by_name_;
};

// Deterministic weight initialization stream.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Matrix xavier(Index fan_in, Index fan_out);
  Matrix normal(Index rows, Index cols, double stddev);

 private:
  std::mt19937_64 rng_;
};

struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  double dropout = 0.0;

  bool dropout_active() const { return training && rng != nullptr && dropout > 0.0; }
};

struct Linear {
  Parameter* weight = nullptr;  // [in x out]
  Parameter* bias = nullptr;    // [1 x out]

  // init_scale multiplies the Xavier draw for the weight.
  static Linear create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase, Index in,
                       Index out, double init_scale = 1.0);
  ag::Var operator()(const ag::Var& x) const;
  Index in_dim() const { return weight->value.rows(); }
  Index out_dim() const { return weight->value.cols(); }
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNorm create(ParameterStore& store, const std::string& prefix, Phase phase, Index dim);
  ag::Var operator()(const ag::Var& x) const;
};

// One multi-head attention unit: query/key/value/output projections around
// scaled dot-product attention.
struct AttentionUnit {
  Linear query, key, value, output;
  int heads = 1;

  static AttentionUnit create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase,
                              Index dim, int heads, double output_scale = 1.0);
  // window > 0 confines attention to contiguous blocks of that length.
  ag::Var operator()(const ag::Var& queries, const ag::Var& context, Index window,
                     const ForwardContext& ctx) const;
};

struct FeedForward {
  Linear hidden, output;

  static FeedForward create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase,
                            Index dim, Index hidden_dim, double output_scale = 1.0);
  ag::Var operator()(const ag::Var& x) const;
};

}  // namespace mtel::nn
