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

#include "mtel/eventgraph.hpp"
#include "mtel/errors.hpp"

#include <ostream>
#include <stdexcept>

namespace mtel::graph {

EventGraph build_event_graph(const Matrix& snippet_probs, Modality modality, int category, double tau) {
  if (category < 0 || category >= snippet_probs.cols()) throw std::out_of_range("build_event_graph: bad category");
  const Index t = snippet_probs.rows();
  EventGraph g;
  g.modality = modality;
  g.category = category;
  g.adjacency = Mask::Constant(t, t, false);
  for (Index i = 0; i < t; ++i) {
    g.adjacency(i, i) = true;
    if (i + 1 < t) g.adjacency(i, i + 1) = g.adjacency(i + 1, i) = true;
    if (snippet_probs(i, category) > tau) g.members.push_back(i);
  }
  for (Index i : g.members)
    for (Index j : g.members) g.adjacency(i, j) = true;
  return g;
}

std::vector<EventGraph> active_graphs(const Matrix& snippet_probs, Modality modality, double tau) {
  std::vector<EventGraph> out;
  for (int c = 0; c < snippet_probs.cols(); ++c) {
    if ((snippet_probs.col(c).array() > tau).any()) out.push_back(build_event_graph(snippet_probs, modality, c, tau));
  }
  return out;
}

void write_graph_dump(std::ostream& out, const std::vector<EventGraph>& graphs) {
  for (const auto& g : graphs) {
    out << "graph " << to_string(g.modality) << " category=" << g.category << " nodes=" << g.adjacency.rows() << '\n';
    out << "members";
    for (Index m : g.members) out << ' ' << m;
    out << '\n';
    for (Index i = 0; i < g.adjacency.rows(); ++i) {
      for (Index j = 0; j < g.adjacency.cols(); ++j) out << (g.adjacency(i, j) ? '1' : '0');
      out << '\n';
    }
  }
}

void GraphConfig::validate() const {
  if (depth < 1) throw ConfigError("graph depth must be >= 1");
  if (heads < 1) throw ConfigError("graph heads must be >= 1");
  if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("tau must lie in (0, 1)");
  if (!(branch_init_scale > 0.0 && branch_init_scale <= 1.0))
    throw ConfigError("graph_branch_init_scale must lie in (0, 1]");
}

GATLayer::GATLayer(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix, Index dim,
                   int num_heads, double init_scale) {
  for (int h = 0; h < num_heads; ++h) {
    const std::string p = prefix + ".head" + std::to_string(h);
    Head head;
    head.weight = &store.create(p + ".weight", nn::Phase::extraction, init.xavier(dim, dim) * init_scale);
    head.attn_src = &store.create(p + ".attn_src", nn::Phase::extraction, init.xavier(dim, 1));
    head.attn_dst = &store.create(p + ".attn_dst", nn::Phase::extraction, init.xavier(dim, 1));
    heads.push_back(head);
  }
}

ag::Var GATLayer::operator()(const ag::Var& h, const Mask& adjacency) const { return forward_mean(h, {&adjacency}); }

ag::Var GATLayer::forward_mean(const ag::Var& h, const std::vector<const Mask*>& graphs) const {
  if (graphs.empty()) return h;
  std::vector<ag::Var> aggregated;
  for (const auto& head : heads) {
    ag::Var wh = ag::matmul(h, head.weight->var());
    ag::Var src = ag::matmul(wh, head.attn_src->var());
    ag::Var dst = ag::matmul(wh, head.attn_dst->var());
    for (const Mask* adj : graphs) aggregated.push_back(ag::graph_attention(src, dst, wh, *adj));
  }
  return ag::add(h, ag::mean_of(aggregated));
}

Matrix GATLayer::coefficients(const Matrix& h, const Mask& adjacency, int head) const {
  const Head& hd = heads.at(static_cast<std::size_t>(head));
  const Matrix wh = h * hd.weight->value;
  return ag::graph_attention_coefficients(wh * hd.attn_src->value, wh * hd.attn_dst->value, adjacency);
}

GraphRefiner::GraphRefiner(nn::ParameterStore& store, nn::Initializer& init, const GraphConfig& cfg, Index dim)
    : cfg_(cfg) {
  cfg.validate();
  for (int l = 0; l < cfg.depth; ++l) {
    layers_.emplace_back(store, init, "graph.layer" + std::to_string(l + 1), dim, cfg.heads, cfg.branch_init_scale);
  }
}

ag::Var GraphRefiner::refine(const ag::Var& feats, const std::vector<EventGraph>& graphs) const {
  if (graphs.empty()) return feats;
  std::vector<const Mask*> masks;
  for (const auto& g : graphs) masks.push_back(&g.adjacency);
  ag::Var h = feats;
  for (const auto& layer : layers_) h = layer.forward_mean(h, masks);
  return h;
}

pmt::SnippetFeatures refine_snippets(const pmt::SnippetFeatures& feats, const pmt::SnippetPredictions& phase1,
                                     const GraphRefiner& refiner, double tau) {
  const auto audio_graphs = active_graphs(phase1.audio.snippet_probs.value(), Modality::audio, tau);
  const auto visual_graphs = active_graphs(phase1.visual.snippet_probs.value(), Modality::visual, tau);
  return {refiner.refine(feats.audio, audio_graphs), refiner.refine(feats.visual, visual_graphs)};
}

std::vector<int> ExtractedEvents::categories(Modality m) const {
  std::vector<int> out;
  for (const auto& e : (*this)[m]) out.push_back(e.category);
  return out;
}

ExtractedEvents extract_events(const pmt::SnippetFeatures& refined, const pmt::SnippetPredictions& phase1,
                               const pmt::SnippetPredictions& phase2, double tau) {
  ExtractedEvents out;
  for (Modality m : {Modality::audio, Modality::visual}) {
    const Matrix& conf = phase1[m].snippet_probs.value();
    const ag::Var& feats = m == Modality::audio ? refined.audio : refined.visual;
    for (int c = 0; c < conf.cols(); ++c) {
      std::vector<Index> members;
      for (Index t = 0; t < conf.rows(); ++t)
        if (conf(t, c) > tau) members.push_back(t);
      if (members.empty()) continue;
      ag::Var logits = ag::gather_rows(ag::column(phase2[m].attention_logits, c), members);
      ag::Var weights = ag::softmax_cols(logits);
      EventFeature e;
      e.modality = m;
      e.category = c;
      e.feature = ag::matmul(ag::transpose(weights), ag::gather_rows(feats, members));
      e.member_weights = weights.value();
      e.members = std::move(members);
      out[m].push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace mtel::graph
