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

#include "mtel/pmt.hpp"
#include "mtel/errors.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <tuple>

namespace mtel::pmt {

void PMTConfig::validate() const {
  if (depth < 1) throw ConfigError("pmt depth must be >= 1");
  if (depth > 20) throw ConfigError("pmt depth must be <= 20");
  if (heads < 1) throw ConfigError("pmt heads must be >= 1");
  if (model_dim < 1 || model_dim % heads != 0) throw ConfigError("model_dim must be divisible by heads");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("pmt dropout must lie in [0, 1)");
  if (!(branch_init_scale > 0.0 && branch_init_scale <= 1.0))
    throw ConfigError("pmt branch init scale must lie in (0, 1]");
}

std::vector<Index> PMTConfig::window_sizes() const {
  std::vector<Index> w;
  for (int l = 1; l <= depth; ++l) w.push_back(Index{1} << l);
  return w;
}

namespace {
void check_window(Index window) {
  if (window < 2 || window % 2 != 0) {
    throw std::invalid_argument("snippet shift window must be even and >= 2, got " + std::to_string(window));
  }
}
}  // namespace

ag::Var snippet_shift(const ag::Var& seq, Index window) {
  check_window(window);
  return ag::rotate_rows(seq, window / 2);
}

ag::Var inverse_snippet_shift(const ag::Var& seq, Index window) {
  check_window(window);
  return ag::rotate_rows(seq, -(window / 2));
}

WindowPartition window_partition(const Matrix& seq, Index window) {
  if (window < 1) throw std::invalid_argument("window_partition: window must be >= 1");
  const Index t = seq.rows();
  const Index n = (t + window - 1) / window;
  WindowPartition part;
  part.valid = Mask::Constant(n, window, false);
  for (Index k = 0; k < n; ++k) {
    Matrix w = Matrix::Zero(window, seq.cols());
    const Index len = std::min(window, t - k * window);
    w.topRows(len) = seq.middleRows(k * window, len);
    part.valid.row(k).head(len).setConstant(true);
    part.windows.push_back(std::move(w));
  }
  return part;
}

Matrix window_merge(const WindowPartition& part, Index length) {
  if (part.windows.empty()) return Matrix(0, 0);
  const Index window = part.valid.cols();
  Matrix out(length, part.windows.front().cols());
  for (Index k = 0; k < static_cast<Index>(part.windows.size()); ++k) {
    const Index len = std::min(window, length - k * window);
    if (len <= 0) break;
    out.middleRows(k * window, len) = part.windows[static_cast<std::size_t>(k)].topRows(len);
  }
  return out;
}

std::vector<Matrix> masked_window_attention(const Matrix& q, const Matrix& k,
                                            const Eigen::Array<bool, 1, Eigen::Dynamic>& valid, int heads) {
  const Index w = q.rows();
  const Index dh = q.cols() / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Matrix> out;
  for (int h = 0; h < heads; ++h) {
    Matrix logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * inv;
    Matrix probs = Matrix::Zero(w, w);
    for (Index i = 0; i < w; ++i) {
      if (!valid(i)) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < w; ++j)
        if (valid(j)) mx = std::max(mx, logits(i, j));
      double sum = 0.0;
      for (Index j = 0; j < w; ++j) {
        probs(i, j) = valid(j) ? std::exp(logits(i, j) - mx) : 0.0;
        sum += probs(i, j);
      }
      probs.row(i) /= sum;
    }
    out.push_back(std::move(probs));
  }
  return out;
}

MultimodalAttention::MultimodalAttention(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix,
                                         const PMTConfig& cfg)
    : use_self_(cfg.self_attention), use_cross_(cfg.cross_attention) {
  const auto phase = nn::Phase::snippet;
  const Index d = cfg.model_dim;
  self_audio = nn::AttentionUnit::create(store, init, prefix + ".self_audio", phase, d, cfg.heads, cfg.branch_init_scale);
  self_visual = nn::AttentionUnit::create(store, init, prefix + ".self_visual", phase, d, cfg.heads, cfg.branch_init_scale);
  cross_audio = nn::AttentionUnit::create(store, init, prefix + ".cross_audio", phase, d, cfg.heads, cfg.branch_init_scale);
  cross_visual = nn::AttentionUnit::create(store, init, prefix + ".cross_visual", phase, d, cfg.heads, cfg.branch_init_scale);
  norm_audio = nn::LayerNorm::create(store, prefix + ".norm_audio", phase, d);
  norm_visual = nn::LayerNorm::create(store, prefix + ".norm_visual", phase, d);
  ffn_audio = nn::FeedForward::create(store, init, prefix + ".ffn_audio", phase, d, 2 * d, cfg.branch_init_scale);
  ffn_visual = nn::FeedForward::create(store, init, prefix + ".ffn_visual", phase, d, 2 * d, cfg.branch_init_scale);
  ffn_norm_audio = nn::LayerNorm::create(store, prefix + ".ffn_norm_audio", phase, d);
  ffn_norm_visual = nn::LayerNorm::create(store, prefix + ".ffn_norm_visual", phase, d);
}

std::pair<ag::Var, ag::Var> MultimodalAttention::operator()(const ag::Var& a, const ag::Var& v, Index window,
                                                            const nn::ForwardContext& ctx) const {
  ag::Var a_sum = a;
  ag::Var v_sum = v;
  if (use_self_) {
    a_sum = ag::add(a_sum, self_audio(a, a, window, ctx));
    v_sum = ag::add(v_sum, self_visual(v, v, window, ctx));
  }
  if (use_cross_) {
    a_sum = ag::add(a_sum, cross_audio(a, v, window, ctx));
    v_sum = ag::add(v_sum, cross_visual(v, a, window, ctx));
  }
  ag::Var a1 = norm_audio(a_sum);
  ag::Var v1 = norm_visual(v_sum);
  return {ffn_norm_audio(ag::add(a1, ffn_audio(a1))), ffn_norm_visual(ag::add(v1, ffn_visual(v1)))};
}

PMTLayer::PMTLayer(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix, const PMTConfig& cfg,
                   int level)
    : first(store, init, prefix + ".first", cfg),
      second(store, init, prefix + ".second", cfg),
      window_(Index{1} << level),
      shift_(cfg.snippet_shift) {
  if (level < 1) throw std::invalid_argument("PMT layer index starts at 1");
}

std::pair<ag::Var, ag::Var> PMTLayer::operator()(const ag::Var& a, const ag::Var& v,
                                                 const nn::ForwardContext& ctx) const {
  auto [a1, v1] = first(a, v, window_, ctx);
  if (!shift_) return second(a1, v1, window_, ctx);
  auto [a2, v2] = second(snippet_shift(a1, window_), snippet_shift(v1, window_), window_, ctx);
  return {inverse_snippet_shift(a2, window_), inverse_snippet_shift(v2, window_)};
}

PyramidMultimodalTransformer::PyramidMultimodalTransformer(nn::ParameterStore& store, nn::Initializer& init,
                                                           const PMTConfig& cfg, Index audio_dim, Index visual_dim)
    : cfg_(cfg) {
  cfg.validate();
  project_audio = nn::Linear::create(store, init, "pmt.project_audio", nn::Phase::snippet, audio_dim, cfg.model_dim);
  project_visual =
      nn::Linear::create(store, init, "pmt.project_visual", nn::Phase::snippet, visual_dim, cfg.model_dim);
  for (int l = 1; l <= cfg.depth; ++l) {
    layers_.emplace_back(store, init, "pmt.layer" + std::to_string(l), cfg, l);
  }
}

SnippetFeatures PyramidMultimodalTransformer::project(const ag::Var& raw_audio, const ag::Var& raw_visual) const {
  if (raw_audio.rows() != raw_visual.rows()) throw std::invalid_argument("audio/visual lengths differ");
  return {project_audio(raw_audio), project_visual(raw_visual)};
}

SnippetFeatures PyramidMultimodalTransformer::forward(const SnippetFeatures& feats,
                                                      const nn::ForwardContext& ctx) const {
  nn::ForwardContext local = ctx;
  local.dropout = cfg_.dropout;
  ag::Var a = feats.audio;
  ag::Var v = feats.visual;
  for (const auto& layer : layers_) std::tie(a, v) = layer(a, v, local);
  return {a, v};
}

TemporalAttentionPooling::TemporalAttentionPooling(nn::ParameterStore& store, nn::Initializer& init,
                                                   const std::string& prefix, nn::Phase phase, Index dim,
                                                   int num_classes)
    : classifier(nn::Linear::create(store, init, prefix + ".classifier", phase, dim, num_classes)),
      attention(nn::Linear::create(store, init, prefix + ".attention", phase, dim, num_classes)) {}

ModalityPredictions TemporalAttentionPooling::pool(const ag::Var& feats) const {
  ModalityPredictions p;
  p.snippet_probs = ag::sigmoid(classifier(feats));
  p.attention_logits = attention(feats);
  p.attention_weights = ag::softmax_cols(p.attention_logits);
  p.video_probs = ag::sum_rows(ag::mul(p.attention_weights, p.snippet_probs));
  return p;
}

SnippetPredictions TemporalAttentionPooling::operator()(const SnippetFeatures& feats) const {
  return {pool(feats.audio), pool(feats.visual)};
}

}  // namespace mtel::pmt
