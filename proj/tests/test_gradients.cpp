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
#include "mtel/interaction.hpp"
#include "mtel/model.hpp"
#include "mtel/pmt.hpp"
#include "mtel/training.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

namespace mtel {
namespace {

using testing::check_gradients;
using testing::check_parameter_gradients;
using testing::random_matrix;

constexpr double kTolerance = 1e-4;

// Fixed random projection so every output element influences the loss.
ag::Var project_to_scalar(const ag::Var& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ag::sum_all(ag::mul(x, ag::constant(random_matrix(x.rows(), x.cols(), rng))));
}

ModelConfig tiny_model(int phases) {
  ModelConfig c;
  c.audio_dim = 5;
  c.visual_dim = 6;
  c.num_classes = 3;
  c.pmt.model_dim = 16;
  c.pmt.depth = 2;
  c.pmt.heads = 2;
  c.interaction.heads = 2;
  c.phases = phases;
  c.init_seed = 11;
  return c;
}

TEST(ModelGradients, TotalLossMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  EventCentricModel model(tiny_model(3));
  const Matrix a = testing::random_matrix(8, 5, rng);
  const Matrix v = testing::random_matrix(8, 6, rng);
  Matrix ya(1, 3), yv(1, 3);
  ya << 1, 0, 1;
  yv << 0, 1, 1;
  auto loss = [&] {
    const ForwardResult r = model.forward(a, v, nn::ForwardContext{}, true);
    return train::compute_loss(r, ya, yv, 0.3).total;
  };
  {
    ag::NoGradGuard g;
    const ForwardResult r = model.forward(a, v, nn::ForwardContext{}, true);
    ASSERT_TRUE(r.has_phase3);
  }
  const auto res = check_parameter_gradients(model.params(), loss);
  EXPECT_LT(res.max_rel_error, 1e-4);
  EXPECT_GT(res.max_abs_grad, 0.0);
}

TEST(OpGradients, ElementwiseAndReductions) {
  std::mt19937_64 rng(1);
  Matrix x = random_matrix(5, 4, rng), y = random_matrix(5, 4, rng), row = random_matrix(1, 4, rng);
  const auto r = check_gradients({&x, &y, &row}, [](const std::vector<ag::Var>& in) {
    ag::Var s = ag::add(ag::mul(ag::sigmoid(in[0]), ag::leaky_relu(in[1], 0.2)), ag::scale(in[0], -0.5));
    s = ag::add_row(ag::sub(s, ag::add_scalar(in[1], 0.3)), in[2]);
    s = ag::concat_rows({s, ag::transpose(ag::matmul(ag::transpose(in[0]), in[1]))});
    s = ag::concat_cols({s, ag::column(s, 1), ag::softmax_cols(s)});
    return ag::add(project_to_scalar(ag::rotate_rows(s, 3), 2),
                   ag::add(ag::mean_all(ag::gather_rows(s, {0, 4, 4, 7})), ag::element(ag::sum_rows(s), 0, 2)));
  });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

TEST(OpGradients, LayerNormLinearBce) {
  std::mt19937_64 rng(2);
  Matrix x = random_matrix(6, 5, rng), g = random_matrix(1, 5, rng), b = random_matrix(1, 5, rng);
  Matrix w = random_matrix(5, 3, rng), bias = random_matrix(1, 3, rng);
  const Matrix target = testing::random_binary(6, 3, rng);
  const auto r = check_gradients({&x, &g, &b, &w, &bias}, [&](const std::vector<ag::Var>& in) {
    ag::Var h = ag::layer_norm(in[0], in[1], in[2]);
    return ag::bce_mean(ag::sigmoid(ag::linear(h, in[3], in[4])), target);
  });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

TEST(OpGradients, CosineRows) {
  std::mt19937_64 rng(3);
  Matrix e = random_matrix(1, 6, rng), x = random_matrix(7, 6, rng);
  const auto r = check_gradients(
      {&e, &x}, [](const std::vector<ag::Var>& in) { return project_to_scalar(ag::cosine_rows(in[0], in[1]), 4); });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

TEST(OpGradients, AttentionWindowedAndGlobal) {
  std::mt19937_64 rng(4);
  Matrix q = random_matrix(10, 8, rng), k = random_matrix(10, 8, rng), v = random_matrix(10, 8, rng);
  for (Index window : {0, 4, 10}) {
    const auto r = check_gradients({&q, &k, &v}, [window](const std::vector<ag::Var>& in) {
      return project_to_scalar(ag::multihead_attention(in[0], in[1], in[2], 2, window), 5);
    });
    EXPECT_LT(r.max_rel_error, kTolerance) << "window " << window;
  }
  Matrix q2 = random_matrix(3, 8, rng);
  const auto r = check_gradients({&q2, &k, &v}, [](const std::vector<ag::Var>& in) {
    return project_to_scalar(ag::multihead_attention(in[0], in[1], in[2], 4), 6);
  });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

TEST(OpGradients, GraphAttention) {
  std::mt19937_64 rng(5);
  Matrix p = testing::random_probs(8, 1, rng);
  const Mask adj = graph::build_event_graph(p, Modality::audio, 0, 0.5).adjacency;
  Matrix src = random_matrix(8, 1, rng), dst = random_matrix(8, 1, rng), h = random_matrix(8, 4, rng);
  const auto r = check_gradients({&src, &dst, &h}, [&](const std::vector<ag::Var>& in) {
    return project_to_scalar(ag::graph_attention(in[0], in[1], in[2], adj), 7);
  });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

TEST(ModuleGradients, TemporalAttentionPooling) {
  nn::ParameterStore store;
  nn::Initializer init(6);
  pmt::TemporalAttentionPooling tap(store, init, "tap", nn::Phase::snippet, 16, 3);
  std::mt19937_64 rng(7);
  Matrix f = random_matrix(8, 16, rng);
  const Matrix y = (Matrix(1, 3) << 1, 0, 1).finished();
  auto loss = [&](const ag::Var& x) { return ag::bce_mean(tap.pool(x).video_probs, y); };
  EXPECT_LT(check_gradients({&f}, [&](const std::vector<ag::Var>& in) { return loss(in[0]); }).max_rel_error,
            kTolerance);
  EXPECT_LT(check_parameter_gradients(store, [&] { return loss(ag::constant(f)); }).max_rel_error, kTolerance);
}

pmt::PMTConfig pmt_config(int depth) {
  pmt::PMTConfig c;
  c.depth = depth;
  c.heads = 2;
  c.model_dim = 16;
  c.dropout = 0.0;
  return c;
}

TEST(ModuleGradients, PmtLayer) {
  nn::ParameterStore store;
  nn::Initializer init(8);
  pmt::PMTLayer layer(store, init, "layer", pmt_config(2), 2);
  std::mt19937_64 rng(9);
  Matrix a = random_matrix(8, 16, rng), v = random_matrix(8, 16, rng);
  auto loss = [&](const ag::Var& x, const ag::Var& y) {
    auto [a2, v2] = layer(x, y, {});
    return ag::add(project_to_scalar(a2, 10), project_to_scalar(v2, 11));
  };
  EXPECT_LT(check_gradients({&a, &v}, [&](const std::vector<ag::Var>& in) { return loss(in[0], in[1]); }).max_rel_error,
            kTolerance);
  EXPECT_LT(check_parameter_gradients(store, [&] { return loss(ag::constant(a), ag::constant(v)); }).max_rel_error,
            kTolerance);
}

TEST(ModuleGradients, PoolingThroughPyramid) {
  nn::ParameterStore store;
  nn::Initializer init(12);
  pmt::PyramidMultimodalTransformer pmt(store, init, pmt_config(2), 5, 6);
  pmt::TemporalAttentionPooling tap(store, init, "tap", nn::Phase::snippet, 16, 3);
  std::mt19937_64 rng(13);
  Matrix a = random_matrix(8, 5, rng), v = random_matrix(8, 6, rng);
  const Matrix ya = (Matrix(1, 3) << 1, 0, 1).finished(), yv = (Matrix(1, 3) << 0, 0, 1).finished();
  auto loss = [&](const ag::Var& x, const ag::Var& y) {
    const auto p = tap(pmt.forward(pmt.project(x, y), {}));
    return train::phase_loss(p.audio.video_probs, p.visual.video_probs, ya, yv);
  };
  EXPECT_LT(check_gradients({&a, &v}, [&](const std::vector<ag::Var>& in) { return loss(in[0], in[1]); }).max_rel_error,
            kTolerance);
  EXPECT_LT(check_parameter_gradients(store, [&] { return loss(ag::constant(a), ag::constant(v)); }).max_rel_error,
            kTolerance);
}

TEST(ModuleGradients, GatLayer) {
  nn::ParameterStore store;
  nn::Initializer init(14);
  graph::GATLayer layer(store, init, "gat", 16, 2);
  std::mt19937_64 rng(15);
  Matrix h = random_matrix(8, 16, rng);
  Matrix p = testing::random_probs(8, 2, rng);
  const auto g0 = graph::build_event_graph(p, Modality::audio, 0, 0.5);
  const auto g1 = graph::build_event_graph(p, Modality::audio, 1, 0.5);
  auto loss = [&](const ag::Var& x) { return project_to_scalar(layer.forward_mean(x, {&g0.adjacency, &g1.adjacency}), 16); };
  EXPECT_LT(check_gradients({&h}, [&](const std::vector<ag::Var>& in) { return loss(in[0]); }).max_rel_error,
            kTolerance);
  EXPECT_LT(check_parameter_gradients(store, [&] { return loss(ag::constant(h)); }).max_rel_error, kTolerance);
}

TEST(ModuleGradients, CosineReweighting) {
  std::mt19937_64 rng(17);
  Matrix ea = random_matrix(1, 16, rng), ev = random_matrix(1, 16, rng);
  Matrix fa = random_matrix(8, 16, rng), fv = random_matrix(8, 16, rng);
  Matrix logits = random_matrix(8, 3, rng), video = testing::random_probs(1, 3, rng);
  const Matrix ya = (Matrix(1, 3) << 1, 0, 1).finished(), yv = (Matrix(1, 3) << 0, 1, 1).finished();
  const auto r = check_gradients({&ea, &ev, &fa, &fv, &logits, &video}, [&](const std::vector<ag::Var>& in) {
    interaction::EventSet set;
    graph::EventFeature a;
    a.modality = Modality::audio;
    a.category = 2;
    a.feature = in[0];
    graph::EventFeature v = a;
    v.modality = Modality::visual;
    v.category = 1;
    v.feature = in[1];
    set.audio.push_back(a);
    set.visual.push_back(v);
    pmt::SnippetPredictions p2;
    for (auto* m : {&p2.audio, &p2.visual}) {
      m->snippet_probs = ag::sigmoid(in[4]);
      m->video_probs = in[5];
    }
    const auto out = interaction::reweight_snippets(set, {in[2], in[3]}, p2);
    return train::phase_loss(out.audio, out.visual, ya, yv);
  });
  EXPECT_LT(r.max_rel_error, kTolerance);
}

}  // namespace
}  // namespace mtel
