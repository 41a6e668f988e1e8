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

#include "mtel/datamodel.hpp"
#include "mtel/nn.hpp"

#include <vector>

namespace mtel::pmt {

struct PMTConfig {
  int depth = 6;
  int heads = 4;
  Index model_dim = 512;
  double dropout = 0.2;
  // Ablation switches for the intra-modal and cross-modal units and the shift.
  bool self_attention = true;
  bool cross_attention = true;
  bool snippet_shift = true;
  // Scales the initial output projections of every residual branch; small
  // values start each module close to the identity.
  double branch_init_scale = 0.1;

  void validate() const;
  // 2, 4, ..., 2^depth
  std::vector<Index> window_sizes() const;
};

struct SnippetFeatures {
  ag::Var audio;   // [T x d]
  ag::Var visual;  // [T x d]
};

// Cyclic left rotation of the time axis by window / 2.
ag::Var snippet_shift(const ag::Var& seq, Index window);
ag::Var inverse_snippet_shift(const ag::Var& seq, Index window);

struct WindowPartition {
  std::vector<Matrix> windows;  // each [window x d], zero padded
  Mask valid;                   // [num_windows x window]
};

WindowPartition window_partition(const Matrix& seq, Index window);
Matrix window_merge(const WindowPartition& part, Index length);

// Attention probabilities for one padded window with padded keys masked out;
// one [window x window] matrix per head, rows of padded queries left zero.
std::vector<Matrix> masked_window_attention(const Matrix& q, const Matrix& k, const Eigen::Array<bool, 1, Eigen::Dynamic>& valid,
                                            int heads);

// Two self-attention units and two cross-modal units, then a feed-forward
// sublayer, each with residual connection and layer normalization:
//   a1 = Norm(a + Self(a) + Cross(a <- v)),  a' = Norm(a1 + FFN(a1))
// and symmetrically for v.
class MultimodalAttention {
 public:
  MultimodalAttention() = default;
  MultimodalAttention(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix,
                      const PMTConfig& cfg);

  std::pair<ag::Var, ag::Var> operator()(const ag::Var& a, const ag::Var& v, Index window,
                                         const nn::ForwardContext& ctx) const;

  nn::AttentionUnit self_audio, self_visual, cross_audio, cross_visual;
  nn::LayerNorm norm_audio, norm_visual, ffn_norm_audio, ffn_norm_visual;
  nn::FeedForward ffn_audio, ffn_visual;

 private:
  bool use_self_ = true;
  bool use_cross_ = true;
};

class PMTLayer {
 public:
  PMTLayer() = default;
  PMTLayer(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix, const PMTConfig& cfg,
           int level);

  Index window() const { return window_; }
  std::pair<ag::Var, ag::Var> operator()(const ag::Var& a, const ag::Var& v, const nn::ForwardContext& ctx) const;

  MultimodalAttention first, second;

 private:
  Index window_ = 2;
  bool shift_ = true;
};

class PyramidMultimodalTransformer {
 public:
  PyramidMultimodalTransformer() = default;
  PyramidMultimodalTransformer(nn::ParameterStore& store, nn::Initializer& init, const PMTConfig& cfg,
                               Index audio_dim, Index visual_dim);

  SnippetFeatures project(const ag::Var& raw_audio, const ag::Var& raw_visual) const;
  SnippetFeatures forward(const SnippetFeatures& feats, const nn::ForwardContext& ctx) const;

  const PMTConfig& config() const { return cfg_; }
  const std::vector<PMTLayer>& layers() const { return layers_; }

  nn::Linear project_audio, project_visual;

 private:
  PMTConfig cfg_;
  std::vector<PMTLayer> layers_;
};

struct ModalityPredictions {
  ag::Var snippet_probs;      // [T x C], p_t
  ag::Var attention_logits;   // [T x C]
  ag::Var attention_weights;  // [T x C], softmax over t per class
  ag::Var video_probs;        // [1 x C]
};

struct SnippetPredictions {
  ModalityPredictions audio, visual;
  const ModalityPredictions& operator[](Modality m) const { return m == Modality::audio ? audio : visual; }
};

// Temporal attention pooling. Both projections are shared by the two modalities.
class TemporalAttentionPooling {
 public:
  TemporalAttentionPooling() = default;
  TemporalAttentionPooling(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix,
                           nn::Phase phase, Index dim, int num_classes);

  ModalityPredictions pool(const ag::Var& feats) const;
  SnippetPredictions operator()(const SnippetFeatures& feats) const;

  nn::Linear classifier;
  nn::Linear attention;
};

}  // namespace mtel::pmt
