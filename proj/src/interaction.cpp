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

#include "mtel/interaction.hpp"

namespace mtel::interaction {

EventInteraction::EventInteraction(nn::ParameterStore& store, nn::Initializer& init, const InteractionConfig& cfg,
                                   Index dim)
    : cfg_(cfg) {
  const auto phase = nn::Phase::interaction;
  self_attention = nn::AttentionUnit::create(store, init, "interaction.self", phase, dim, cfg.heads);
  cross_attention = nn::AttentionUnit::create(store, init, "interaction.cross", phase, dim, cfg.heads);
  norm = nn::LayerNorm::create(store, "interaction.norm", phase, dim);
}

EventSet EventInteraction::operator()(const EventSet& events) const {
  if (events.audio.empty() && events.visual.empty()) return events;

  auto stack = [](const std::vector<graph::EventFeature>& list) {
    std::vector<ag::Var> rows;
    for (const auto& e : list) rows.push_back(e.feature);
    return ag::concat_rows(rows);
  };
  const nn::ForwardContext ctx;  // no dropout at event level

  EventSet out = events;
  const bool has_audio = !events.audio.empty();
  const bool has_visual = !events.visual.empty();
  ag::Var audio = has_audio ? stack(events.audio) : ag::Var();
  ag::Var visual = has_visual ? stack(events.visual) : ag::Var();

  for (Modality m : {Modality::audio, Modality::visual}) {
    const bool has_self = m == Modality::audio ? has_audio : has_visual;
    const bool has_other = m == Modality::audio ? has_visual : has_audio;
    if (!has_self) continue;
    const ag::Var& own = m == Modality::audio ? audio : visual;
    const ag::Var& other = m == Modality::audio ? visual : audio;
    ag::Var sum = own;
    if (cfg_.self_attention) sum = ag::add(sum, self_attention(own, own, 0, ctx));
    if (cfg_.cross_attention && has_other) sum = ag::add(sum, cross_attention(own, other, 0, ctx));
    ag::Var refined = norm(sum);
    auto& list = out[m];
    for (std::size_t i = 0; i < list.size(); ++i) {
      list[i].feature = ag::gather_rows(refined, {static_cast<Index>(i)});
    }
  }
  return out;
}

ReweightedPredictions reweight_snippets(const EventSet& refined, const pmt::SnippetFeatures& feats,
                                        const pmt::SnippetPredictions& phase2) {
  ReweightedPredictions out;
  for (Modality m : {Modality::audio, Modality::visual}) {
    const auto& preds = phase2[m];
    const ag::Var& snippet_feats = m == Modality::audio ? feats.audio : feats.visual;
    const Index classes = preds.video_probs.cols();
    std::vector<ag::Var> cols;
    for (Index c = 0; c < classes; ++c) cols.push_back(ag::element(preds.video_probs, 0, c));
    auto& weights_out = m == Modality::audio ? out.audio_weights : out.visual_weights;
    for (const auto& e : refined[m]) {
      ag::Var weights = ag::softmax_cols(ag::cosine_rows(e.feature, snippet_feats));
      cols[static_cast<std::size_t>(e.category)] =
          ag::sum_all(ag::mul(weights, ag::column(preds.snippet_probs, e.category)));
      weights_out.push_back(weights.value());
    }
    (m == Modality::audio ? out.audio : out.visual) = ag::concat_cols(cols);
  }
  return out;
}

ag::Var event_prediction(const graph::EventFeature& event, const nn::Linear& classifier) {
  return ag::sigmoid(ag::element(classifier(event.feature), 0, event.category));
}

}  // namespace mtel::interaction
