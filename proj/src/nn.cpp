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

#include "mtel/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mtel::nn {

Parameter& ParameterStore::create(const std::string& name, Phase phase, Matrix init) {
  if (by_name_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->phase = phase;
  p->grad = Matrix::Zero(init.rows(), init.cols());
  p->value = std::move(init);
  Parameter& ref = *p;
  by_name_[name] = p.get();
  params_.push_back(std::move(p));
  return ref;
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero(p->value.rows(), p->value.cols());
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

Matrix Initializer::xavier(Index fan_in, Index fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
  return m;
}

Matrix Initializer::normal(Index rows, Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng_);
  return m;
}

Linear Linear::create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase, Index in,
                      Index out, double init_scale) {
  Linear l;
  l.weight = &store.create(prefix + ".weight", phase, init.xavier(in, out) * init_scale);
  l.bias = &store.create(prefix + ".bias", phase, Matrix::Zero(1, out));
  return l;
}

ag::Var Linear::operator()(const ag::Var& x) const {
  if (x.cols() != in_dim()) {
    throw std::invalid_argument("linear layer expects input dim " + std::to_string(in_dim()) + ", got " +
                                std::to_string(x.cols()));
  }
  return ag::linear(x, weight->var(), bias->var());
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& prefix, Phase phase, Index dim) {
  LayerNorm n;
  n.gamma = &store.create(prefix + ".gamma", phase, Matrix::Ones(1, dim));
  n.beta = &store.create(prefix + ".beta", phase, Matrix::Zero(1, dim));
  return n;
}

ag::Var LayerNorm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma->var(), beta->var()); }

AttentionUnit AttentionUnit::create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase,
                                    Index dim, int heads, double output_scale) {
  if (heads < 1 || dim % heads != 0) throw std::invalid_argument("attention dim must be divisible by heads");
  AttentionUnit u;
  u.query = Linear::create(store, init, prefix + ".query", phase, dim, dim);
  u.key = Linear::create(store, init, prefix + ".key", phase, dim, dim);
  u.value = Linear::create(store, init, prefix + ".value", phase, dim, dim);
  u.output = Linear::create(store, init, prefix + ".output", phase, dim, dim, output_scale);
  u.heads = heads;
  return u;
}

ag::Var AttentionUnit::operator()(const ag::Var& queries, const ag::Var& context, Index window,
                                  const ForwardContext& ctx) const {
  ag::Var attended = ag::multihead_attention(query(queries), key(context), value(context), heads, window);
  ag::Var out = output(attended);
  if (ctx.dropout_active()) out = ag::dropout(out, ctx.dropout, *ctx.rng);
  return out;
}

FeedForward FeedForward::create(ParameterStore& store, Initializer& init, const std::string& prefix, Phase phase,
                                Index dim, Index hidden_dim, double output_scale) {
  FeedForward f;
  f.hidden = Linear::create(store, init, prefix + ".hidden", phase, dim, hidden_dim);
  f.output = Linear::create(store, init, prefix + ".output", phase, hidden_dim, dim, output_scale);
  return f;
}

ag::Var FeedForward::operator()(const ag::Var& x) const { return output(ag::relu(hidden(x))); }

}  // namespace mtel::nn
