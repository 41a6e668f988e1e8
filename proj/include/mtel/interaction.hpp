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

#include "mtel/eventgraph.hpp"
#include "mtel/nn.hpp"
#include "mtel/pmt.hpp"

#include <vector>

namespace mtel::interaction {

using EventSet = graph::ExtractedEvents;

struct InteractionConfig {
  int heads = 4;
  bool self_attention = true;
  bool cross_attention = true;
};

// Event-level attention, used for training only. The self-attention unit is
// shared by both modalities, as is the cross-modal unit:
//   e' = Norm(e + Self(E_m) + Cross(E_m <- E_other))
// An empty counterpart modality contributes no cross term.
class EventInteraction {
 public:
  EventInteraction() = default;
  EventInteraction(nn::ParameterStore& store, nn::Initializer& init, const InteractionConfig& cfg, Index dim);

  EventSet operator()(const EventSet& events) const;

  nn::AttentionUnit self_attention, cross_attention;
  nn::LayerNorm norm;

 private:
  InteractionConfig cfg_;
};

struct ReweightedPredictions {
  ag::Var audio;   // [1 x C]
  ag::Var visual;  // [1 x C]
  // Snippet weights per extracted event, in event order, each [T x 1].
  std::vector<Matrix> audio_weights;
  std::vector<Matrix> visual_weights;

  const ag::Var& operator[](Modality m) const { return m == Modality::audio ? audio : visual; }
};

// Re-pools video-level predictions with weights softmax_t(cos(event, feat_t))
// for every extracted category; other categories keep the phase-2 value.
ReweightedPredictions reweight_snippets(const EventSet& refined, const pmt::SnippetFeatures& feats,
                                        const pmt::SnippetPredictions& phase2);

// sigmoid(classifier(event))[category], [1 x 1].
ag::Var event_prediction(const graph::EventFeature& event, const nn::Linear& classifier);

}  // namespace mtel::interaction
