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
#include "mtel/pmt.hpp"

#include <iosfwd>
#include <vector>

namespace mtel::graph {

// Snippet graph for one (modality, category): temporal chain, self-loops, and
// a clique over snippets whose phase-1 confidence exceeds tau.
struct EventGraph {
  Modality modality = Modality::audio;
  int category = 0;
  Mask adjacency;               // [T x T], symmetric
  std::vector<Index> members;   // snippets with confidence > tau, ascending
};

EventGraph build_event_graph(const Matrix& snippet_probs, Modality modality, int category, double tau);

// Graphs for every category of one modality that has at least one member.
std::vector<EventGraph> active_graphs(const Matrix& snippet_probs, Modality modality, double tau);

// Text dump of adjacency and member sets for inspection.
void write_graph_dump(std::ostream& out, const std::vector<EventGraph>& graphs);

struct GraphConfig {
  int depth = 2;
  int heads = 1;
  double tau = 0.5;
  // Multiplies the initial message weights; small values start refinement
  // close to the identity.
  double branch_init_scale = 0.1;

  void validate() const;
};

// One graph-attention layer. Heads are averaged; output is h + aggregation.
class GATLayer {
 public:
  GATLayer() = default;
  GATLayer(nn::ParameterStore& store, nn::Initializer& init, const std::string& prefix, Index dim, int heads,
           double init_scale = 1.0);

  ag::Var operator()(const ag::Var& h, const Mask& adjacency) const;
  // Mean over graphs of this layer applied to each; identity when empty.
  ag::Var forward_mean(const ag::Var& h, const std::vector<const Mask*>& graphs) const;
  // Attention coefficients of head `head` for one graph.
  Matrix coefficients(const Matrix& h, const Mask& adjacency, int head = 0) const;

  struct Head {
    nn::Parameter* weight = nullptr;    // [d x d]
    nn::Parameter* attn_src = nullptr;  // [d x 1]
    nn::Parameter* attn_dst = nullptr;  // [d x 1]
  };
  std::vector<Head> heads;
};

// Shared-weight graph refinement: every (modality, category) graph uses the
// same parameter set.
class GraphRefiner {
 public:
  GraphRefiner() = default;
  GraphRefiner(nn::ParameterStore& store, nn::Initializer& init, const GraphConfig& cfg, Index dim);

  ag::Var refine(const ag::Var& feats, const std::vector<EventGraph>& graphs) const;
  const GraphConfig& config() const { return cfg_; }
  const std::vector<GATLayer>& layers() const { return layers_; }

 private:
  GraphConfig cfg_;
  std::vector<GATLayer> layers_;
};

// Refines both modalities using graphs built from phase-1 snippet predictions.
pmt::SnippetFeatures refine_snippets(const pmt::SnippetFeatures& feats, const pmt::SnippetPredictions& phase1,
                                     const GraphRefiner& refiner, double tau);

struct EventFeature {
  Modality modality = Modality::audio;
  int category = 0;
  ag::Var feature;              // [1 x d]
  std::vector<Index> members;
  Matrix member_weights;        // [|members| x 1]
};

struct ExtractedEvents {
  std::vector<EventFeature> audio;
  std::vector<EventFeature> visual;

  std::vector<EventFeature>& operator[](Modality m) { return m == Modality::audio ? audio : visual; }
  const std::vector<EventFeature>& operator[](Modality m) const { return m == Modality::audio ? audio : visual; }
  std::vector<int> categories(Modality m) const;
};

// One event per (modality, category) with members: attention-weighted average
// of member features, weights = softmax over members of the phase-2 pooling
// logits for that category.
ExtractedEvents extract_events(const pmt::SnippetFeatures& refined, const pmt::SnippetPredictions& phase1,
                               const pmt::SnippetPredictions& phase2, double tau);

}  // namespace mtel::graph
