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
#include "mtel/interaction.hpp"
#include "mtel/nn.hpp"
#include "mtel/pmt.hpp"
#include "mtel/textio.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace mtel {

struct ModelConfig {
  Index audio_dim = 128;
  Index visual_dim = 512;
  int num_classes = 35;
  pmt::PMTConfig pmt;
  graph::GraphConfig graph;
  interaction::InteractionConfig interaction;
  // 1: snippet prediction only; 2: + event extraction; 3: + event interaction.
  int phases = 3;
  std::uint64_t init_seed = 0;

  void validate() const;
};

ModelConfig model_config_from(const KeyValues& kv, ModelConfig base = {});
void echo_model_config(const ModelConfig& cfg, KeyValues& out);

struct ForwardResult {
  pmt::SnippetFeatures features;
  pmt::SnippetPredictions phase1;

  bool has_phase2 = false;
  pmt::SnippetFeatures refined;
  pmt::SnippetPredictions phase2;
  graph::ExtractedEvents events;

  bool has_phase3 = false;
  interaction::EventSet refined_events;
  interaction::ReweightedPredictions phase3;
  std::vector<ag::Var> audio_event_preds;   // aligned with refined_events.audio
  std::vector<ag::Var> visual_event_preds;  // aligned with refined_events.visual

  // Snippet predictions used for localization at inference.
  const pmt::SnippetPredictions& final_predictions() const { return has_phase2 ? phase2 : phase1; }
};

struct SnippetScores {
  Matrix audio;   // [T x C]
  Matrix visual;  // [T x C]
};

class EventCentricModel {
 public:
  // with_interaction = false builds the inference-only model without any
  // event-interaction parameters.
  explicit EventCentricModel(const ModelConfig& cfg, bool with_interaction = true);

  EventCentricModel(const EventCentricModel&) = delete;
  EventCentricModel& operator=(const EventCentricModel&) = delete;

  // Training path runs every configured phase; the inference path stops after
  // event extraction.
  ForwardResult forward(const Matrix& audio, const Matrix& visual, const nn::ForwardContext& ctx,
                        bool training_path = true) const;
  SnippetScores predict(const Matrix& audio, const Matrix& visual) const;

  const ModelConfig& config() const { return cfg_; }
  bool has_interaction() const { return interaction_.has_value(); }
  nn::ParameterStore& params() { return store_; }
  const nn::ParameterStore& params() const { return store_; }

  const pmt::PyramidMultimodalTransformer& pmt() const { return pmt_; }
  const pmt::TemporalAttentionPooling& snippet_head() const { return tap1_; }
  const graph::GraphRefiner& refiner() const { return graph_; }
  const pmt::TemporalAttentionPooling& event_head() const { return tap2_; }
  const interaction::EventInteraction* interaction() const { return interaction_ ? &*interaction_ : nullptr; }

 private:
  ModelConfig cfg_;
  nn::ParameterStore store_;
  pmt::PyramidMultimodalTransformer pmt_;
  pmt::TemporalAttentionPooling tap1_;
  graph::GraphRefiner graph_;
  pmt::TemporalAttentionPooling tap2_;
  std::optional<interaction::EventInteraction> interaction_;
};

}  // namespace mtel
