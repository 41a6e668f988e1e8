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

#include "mtel/model.hpp"
#include "mtel/errors.hpp"

namespace mtel {

void ModelConfig::validate() const {
  if (audio_dim < 1 || visual_dim < 1) throw ConfigError("input feature dims must be >= 1");
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (phases < 1 || phases > 3) throw ConfigError("phases must be 1, 2 or 3");
  if (interaction.heads < 1 || pmt.model_dim % interaction.heads != 0) {
    throw ConfigError("model_dim must be divisible by interaction_heads");
  }
  pmt.validate();
  graph.validate();
}

ModelConfig model_config_from(const KeyValues& kv, ModelConfig c) {
  auto num = [&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    using T = std::decay_t<decltype(field)>;
    const std::string where = std::string("config key ") + key;
    if constexpr (std::is_same_v<T, double>) {
      field = parse_double(it->second, where);
    } else if constexpr (std::is_same_v<T, bool>) {
      field = parse_bool(it->second, where);
    } else {
      field = static_cast<T>(parse_int(it->second, where));
    }
  };
  num("audio_dim", c.audio_dim);
  num("visual_dim", c.visual_dim);
  num("num_classes", c.num_classes);
  num("model_dim", c.pmt.model_dim);
  num("pmt_depth", c.pmt.depth);
  num("pmt_heads", c.pmt.heads);
  num("pmt_dropout", c.pmt.dropout);
  num("pmt_branch_init_scale", c.pmt.branch_init_scale);
  num("self_attention", c.pmt.self_attention);
  num("cross_attention", c.pmt.cross_attention);
  num("snippet_shift", c.pmt.snippet_shift);
  num("graph_depth", c.graph.depth);
  num("graph_heads", c.graph.heads);
  num("tau", c.graph.tau);
  num("graph_branch_init_scale", c.graph.branch_init_scale);
  num("interaction_heads", c.interaction.heads);
  num("event_self_attention", c.interaction.self_attention);
  num("event_cross_attention", c.interaction.cross_attention);
  num("phases", c.phases);
  num("init_seed", c.init_seed);
  return c;
}

void echo_model_config(const ModelConfig& c, KeyValues& out) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  out["audio_dim"] = std::to_string(c.audio_dim);
  out["visual_dim"] = std::to_string(c.visual_dim);
  out["num_classes"] = std::to_string(c.num_classes);
  out["model_dim"] = std::to_string(c.pmt.model_dim);
  out["pmt_depth"] = std::to_string(c.pmt.depth);
  out["pmt_heads"] = std::to_string(c.pmt.heads);
  out["pmt_dropout"] = format_double(c.pmt.dropout);
  out["pmt_branch_init_scale"] = format_double(c.pmt.branch_init_scale);
  out["self_attention"] = b(c.pmt.self_attention);
  out["cross_attention"] = b(c.pmt.cross_attention);
  out["snippet_shift"] = b(c.pmt.snippet_shift);
  out["graph_depth"] = std::to_string(c.graph.depth);
  out["graph_heads"] = std::to_string(c.graph.heads);
  out["tau"] = format_double(c.graph.tau);
  out["graph_branch_init_scale"] = format_double(c.graph.branch_init_scale);
  out["interaction_heads"] = std::to_string(c.interaction.heads);
  out["event_self_attention"] = b(c.interaction.self_attention);
  out["event_cross_attention"] = b(c.interaction.cross_attention);
  out["phases"] = std::to_string(c.phases);
  out["init_seed"] = std::to_string(c.init_seed);
}

namespace {
const ModelConfig& validated(const ModelConfig& cfg) {
  cfg.validate();
  return cfg;
}
}  // namespace

EventCentricModel::EventCentricModel(const ModelConfig& cfg, bool with_interaction) : cfg_(validated(cfg)) {
  // Interaction parameters are created last so the other initial values do
  // not depend on whether they exist.
  nn::Initializer init(cfg.init_seed);
  const Index d = cfg.pmt.model_dim;
  pmt_ = pmt::PyramidMultimodalTransformer(store_, init, cfg.pmt, cfg.audio_dim, cfg.visual_dim);
  tap1_ = pmt::TemporalAttentionPooling(store_, init, "tap1", nn::Phase::snippet, d, cfg.num_classes);
  graph_ = graph::GraphRefiner(store_, init, cfg.graph, d);
  tap2_ = pmt::TemporalAttentionPooling(store_, init, "tap2", nn::Phase::extraction, d, cfg.num_classes);
  if (with_interaction) interaction_.emplace(store_, init, cfg.interaction, d);
}

ForwardResult EventCentricModel::forward(const Matrix& audio, const Matrix& visual, const nn::ForwardContext& ctx,
                                         bool training_path) const {
  ForwardResult r;
  r.features = pmt_.forward(pmt_.project(ag::constant(audio), ag::constant(visual)), ctx);
  r.phase1 = tap1_(r.features);
  if (cfg_.phases < 2) return r;

  r.has_phase2 = true;
  r.refined = graph::refine_snippets(r.features, r.phase1, graph_, cfg_.graph.tau);
  r.phase2 = tap2_(r.refined);
  r.events = graph::extract_events(r.refined, r.phase1, r.phase2, cfg_.graph.tau);
  if (cfg_.phases < 3 || !training_path || !interaction_) return r;

  r.has_phase3 = true;
  r.refined_events = (*interaction_)(r.events);
  r.phase3 = interaction::reweight_snippets(r.refined_events, r.refined, r.phase2);
  for (const auto& e : r.refined_events.audio)
    r.audio_event_preds.push_back(interaction::event_prediction(e, tap2_.classifier));
  for (const auto& e : r.refined_events.visual)
    r.visual_event_preds.push_back(interaction::event_prediction(e, tap2_.classifier));
  return r;
}

SnippetScores EventCentricModel::predict(const Matrix& audio, const Matrix& visual) const {
  ag::NoGradGuard guard;
  const ForwardResult r = forward(audio, visual, nn::ForwardContext{}, /*training_path=*/false);
  const auto& preds = r.final_predictions();
  return {preds.audio.snippet_probs.value(), preds.visual.snippet_probs.value()};
}

}  // namespace mtel
