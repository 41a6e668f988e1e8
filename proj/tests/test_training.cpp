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


#include "mtel/synthgen.hpp"
#include "mtel/training.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace mtel::train {
namespace {

using mtel::testing::random_matrix;
using mtel::testing::TempDir;

ag::Var probs(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) m(0, i++) = x;
  return ag::constant(m);
}

Matrix labels(std::initializer_list<double> v) { return probs(v).value(); }

TEST(PhaseLoss, Examples) {
  const double perfect = phase_loss(probs({1, 0, 1}), probs({0, 1, 0}), labels({1, 0, 1}), labels({0, 1, 0})).item();
  EXPECT_NEAR(perfect, -2 * std::log(1 - kBceEps), 1e-15);
  EXPECT_LT(perfect, 3e-7);
  const double half =
      phase_loss(probs({0.5, 0.5}), probs({0.5, 0.5}), labels({1, 0}), labels({0, 1})).item();
  EXPECT_NEAR(half, 2 * std::log(2.0), 1e-15);
}

TEST(PhaseLoss, SymmetricUnderModalitySwap) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix pa = mtel::testing::random_probs(1, 4, rng), pv = mtel::testing::random_probs(1, 4, rng);
    const Matrix ya = mtel::testing::random_binary(1, 4, rng), yv = mtel::testing::random_binary(1, 4, rng);
    EXPECT_EQ(phase_loss(ag::constant(pa), ag::constant(pv), ya, yv).item(),
              phase_loss(ag::constant(pv), ag::constant(pa), yv, ya).item());
  }
}

TEST(EventLoss, Examples) {
  const Matrix ya = labels({0, 1, 0}), yv = labels({1, 0, 0});
  const EventLoss none = event_loss({}, {}, {}, {}, ya, yv);
  EXPECT_EQ(none.total.item(), 0.0);

  const EventLoss one = event_loss({probs({0.5})}, {1}, {}, {}, ya, yv);
  EXPECT_NEAR(one.total.item(), std::log(2.0), 1e-15);
  EXPECT_EQ(one.visual.item(), 0.0);

  const EventLoss wrong = event_loss({}, {}, {probs({0.3})}, {2}, ya, yv);
  EXPECT_NEAR(wrong.total.item(), -std::log(1 - 0.3), 1e-15);

  EXPECT_THROW(modality_event_loss({probs({0.5})}, {}, ya), std::invalid_argument);
}

TEST(EventLoss, EmptyEventsCarryNoGradient) {
  const EventLoss none = event_loss({}, {}, {}, {}, labels({1}), labels({0}));
  EXPECT_FALSE(none.total.requires_grad());
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_EQ(total_loss(0.5, 0.25, 0.125, 7.0, 0.0), 0.875);
  EXPECT_NEAR(total_loss(1, 1, 1, 1, 0.3), 3.3, 1e-15);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    double c[4] = {u(rng), u(rng), u(rng), u(rng)};
    const double base = total_loss(c[0], c[1], c[2], c[3], 0.3);
    for (int k = 0; k < 4; ++k) {
      double d[4] = {c[0], c[1], c[2], c[3]};
      d[k] += u(rng);
      EXPECT_GE(total_loss(d[0], d[1], d[2], d[3], 0.3), base);
    }
  }
}

TEST(LearningRate, StepSchedule) {
  TrainConfig c;
  EXPECT_EQ(lr_at(0, 1e-4, c), 1e-4);
  EXPECT_EQ(lr_at(9, 1e-4, c), 1e-4);
  EXPECT_NEAR(lr_at(10, 1e-4, c), 1e-5, 1e-20);
  EXPECT_NEAR(lr_at(29, 1e-4, c), 1e-6, 1e-20);
  EXPECT_THROW(lr_at(-1, 1e-4, c), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLearningRatePerPhase) {
  nn::ParameterStore store;
  auto& a = store.create("a", nn::Phase::snippet, Matrix::Zero(1, 2));
  auto& b = store.create("b", nn::Phase::extraction, Matrix::Zero(1, 1));
  auto& c = store.create("c", nn::Phase::interaction, Matrix::Zero(1, 1));
  a.grad = (Matrix(1, 2) << 3.0, -0.5).finished();
  b.grad = Matrix::Constant(1, 1, 2.0);
  c.grad = Matrix::Constant(1, 1, -4.0);
  Adam adam(store);
  adam.step({0.1, 0.01, 0.001});
  EXPECT_NEAR(a.value(0, 0), -0.1, 1e-8);
  EXPECT_NEAR(a.value(0, 1), 0.1, 1e-8);
  EXPECT_NEAR(b.value(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(c.value(0, 0), 0.001, 1e-10);
  EXPECT_EQ(adam.state().step, 1);
}

TEST(Adam, ConvergesOnQuadratic) {
  nn::ParameterStore store;
  auto& p = store.create("p", nn::Phase::snippet, Matrix::Constant(1, 3, 5.0));
  Adam adam(store);
  for (int i = 0; i < 2000; ++i) {
    p.grad = 2.0 * (p.value.array() - 1.0).matrix();
    adam.step({0.05, 0, 0});
  }
  EXPECT_LT((p.value.array() - 1.0).abs().maxCoeff(), 1e-3);
}

ModelConfig tiny_model(int phases = 3) {
  ModelConfig c;
  c.audio_dim = 6;
  c.visual_dim = 5;
  c.num_classes = 3;
  c.pmt.model_dim = 16;
  c.pmt.depth = 2;
  c.pmt.heads = 2;
  c.pmt.dropout = 0.2;
  c.pmt.branch_init_scale = 0.1;
  c.interaction.heads = 2;
  c.phases = phases;
  c.init_seed = 3;
  return c;
}

std::vector<TrainingSample> tiny_data(double noise, int count, std::uint64_t seed) {
  synth::GeneratorConfig g;
  g.num_classes = 3;
  g.audio_dim = 6;
  g.visual_dim = 5;
  g.noise_std = noise;
  g.min_duration = 30;
  g.max_duration = 60;
  g.mean_categories = 1.5;
  g.seed = seed;
  const auto protos = synth::make_prototypes(g);
  std::vector<TrainingSample> out;
  for (int i = 0; i < count; ++i) {
    const auto tl = synth::sample_timeline(g, i);
    const auto f = synth::render_features(tl, protos, g);
    const auto l = synth::timeline_labels(tl, g.num_classes);
    out.push_back({"v" + std::to_string(i), resample_sequence(f.audio, 32), resample_sequence(f.visual, 32), l.audio,
                   l.visual});
  }
  return out;
}

TrainConfig tiny_train(int epochs) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = epochs;
  c.lr_phase1 = c.lr_phase2 = 3e-3;
  c.lr_phase3 = 6e-3;
  c.grid_length = 32;
  c.seed = 9;
  return c;
}

TEST(ComputeLoss, DecompositionIdentity) {
  EventCentricModel model(tiny_model());
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix a = random_matrix(8, 6, rng), v = random_matrix(8, 5, rng);
    const Matrix ya = mtel::testing::random_binary(1, 3, rng), yv = mtel::testing::random_binary(1, 3, rng);
    const ForwardResult r = model.forward(a, v, {}, true);
    const SampleLoss l = compute_loss(r, ya, yv, 0.3);
    EXPECT_EQ(l.parts.l_e, l.parts.l_ea + l.parts.l_ev);
    EXPECT_EQ(l.parts.total, l.parts.l1 + l.parts.l2 + l.parts.l3 + 0.3 * l.parts.l_e);
    EXPECT_NEAR(l.total.item(), l.parts.total, 1e-12);
  }
}

TEST(ComputeLoss, PhaseOneLossIgnoresLaterPhaseParameters) {
  EventCentricModel model(tiny_model());
  std::mt19937_64 rng(5);
  const ForwardResult r = model.forward(random_matrix(8, 6, rng), random_matrix(8, 5, rng), {}, true);
  ASSERT_TRUE(r.has_phase3);
  model.params().zero_grad();
  ag::backward(phase_loss(r.phase1.audio.video_probs, r.phase1.visual.video_probs, labels({1, 0, 1}),
                          labels({0, 0, 1})));
  int snippet_with_grad = 0;
  for (const auto& p : model.params().params()) {
    const bool has = p->grad.size() > 0 && p->grad.norm() > 0;
    if (p->phase == nn::Phase::snippet) snippet_with_grad += has;
    else EXPECT_FALSE(has) << p->name;
  }
  EXPECT_GT(snippet_with_grad, 0);
}

TEST(Train, SmokeEpochIsFiniteAndNearChance) {
  EventCentricModel model(tiny_model());
  const auto data = tiny_data(0.3, 4, 1);
  TrainState state;
  const auto recs = train(model, data, tiny_train(1), state);
  ASSERT_EQ(recs.size(), 1u);
  const auto& l = recs[0].loss;
  for (double x : {l.l1, l.l2, l.l3, l.l_ea, l.l_ev, l.total}) EXPECT_TRUE(std::isfinite(x));
  EXPECT_GT(l.l1, 0.5);
  EXPECT_LT(l.l1, 2.5);
  EXPECT_EQ(l.l_e, l.l_ea + l.l_ev);
  EXPECT_EQ(l.total, total_loss(l.l1, l.l2, l.l3, l.l_e, 0.3));
  EXPECT_EQ(state.next_epoch, 1);
}

TEST(Train, SameSeedSameLosses) {
  const auto data = tiny_data(0.3, 6, 2);
  std::vector<EpochRecord> runs[2];
  for (auto& recs : runs) {
    EventCentricModel model(tiny_model());
    TrainState state;
    recs = train(model, data, tiny_train(2), state);
  }
  for (int e = 0; e < 2; ++e) EXPECT_EQ(format_epoch_record(runs[0][e]), format_epoch_record(runs[1][e]));
}

TEST(Train, SplitRunEqualsUninterruptedRun) {
  const auto data = tiny_data(0.3, 6, 3);
  EventCentricModel whole(tiny_model());
  TrainState ws;
  const auto all = train(whole, data, tiny_train(3), ws);

  EventCentricModel split(tiny_model());
  TrainState ss;
  auto first = train(split, data, tiny_train(1), ss);
  auto rest = train(split, data, tiny_train(3), ss);
  ASSERT_EQ(rest.size(), 2u);
  EXPECT_EQ(rest[0].epoch, 1);
  EXPECT_EQ(format_epoch_record(first[0]), format_epoch_record(all[0]));
  EXPECT_EQ(format_epoch_record(rest[1]), format_epoch_record(all[2]));
}

TEST(Train, ZeroNoiseLossDecreasesForFiveEpochs) {
  const auto data = tiny_data(0.0, 16, 4);
  EventCentricModel model(tiny_model());
  TrainState state;
  const auto recs = train(model, data, tiny_train(5), state);
  for (std::size_t e = 1; e < recs.size(); ++e) EXPECT_LT(recs[e].loss.total, recs[e - 1].loss.total) << e;
}

TEST(Train, NonFiniteInputNamesComponent) {
  auto data = tiny_data(0.3, 2, 5);
  data[1].audio(3, 2) = std::nan("");
  EventCentricModel model(tiny_model());
  TrainState state;
  try {
    train(model, data, tiny_train(1), state);
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_EQ(e.component(), "L_1");
  }
}

TEST(EpochLog, Format) {
  EXPECT_EQ(epoch_log_header(), "epoch,L_1,L_2,L_3,L_e,L_total,lr_phase1,lr_phase2,lr_phase3\n");
  EpochRecord r;
  r.epoch = 3;
  r.loss = {0.5, 0.25, 0.125, 0.1, 0.2, 0.3, 0.965};
  r.lr = {1e-4, 1e-4, 2e-4};
  const std::string line = format_epoch_record(r);
  EXPECT_EQ(line.rfind("3,0.5,0.25,0.125,0.3,0.965,", 0), 0u) << line;
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8);
}

TEST(Checkpoint, RoundTripRestoresModelAndState) {
  TempDir dir("ckpt");
  const auto data = tiny_data(0.3, 4, 6);
  EventCentricModel model(tiny_model());
  TrainState state;
  train(model, data, tiny_train(1), state);
  const Checkpoint ckpt = make_checkpoint(model, state, {{"seed", "9"}});
  write_checkpoint(dir.path() / "c.ckpt", ckpt);
  const Checkpoint back = read_checkpoint(dir.path() / "c.ckpt");
  EXPECT_EQ(back.metadata, ckpt.metadata);
  EXPECT_EQ(back.metadata.at("next_epoch"), "1");
  ASSERT_EQ(back.tensors.size(), ckpt.tensors.size());

  const auto restored = model_from_checkpoint(back);
  for (const auto& p : model.params().params()) {
    const auto* q = restored->params().find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    EXPECT_LT((q->value - p->value).cwiseAbs().maxCoeff(), 1e-6 * (1 + p->value.cwiseAbs().maxCoeff()));
    for (Index i = 0; i < q->value.size(); ++i)
      EXPECT_EQ(q->value.data()[i], static_cast<double>(static_cast<float>(p->value.data()[i])));
  }
  const TrainState rs = train_state_from_checkpoint(back);
  EXPECT_EQ(rs.next_epoch, 1);
  EXPECT_EQ(rs.adam.step, state.adam.step);
  EXPECT_EQ(rs.adam.m.size(), state.adam.m.size());

  const auto inference = model_from_checkpoint(back, false);
  EXPECT_FALSE(inference->has_interaction());
  EXPECT_LT(inference->params().params().size(), restored->params().params().size());
}

TEST(Checkpoint, CorruptFilesReportOffsets) {
  TempDir dir("ckpt_bad");
  EventCentricModel model(tiny_model());
  write_checkpoint(dir.path() / "c.ckpt", make_checkpoint(model, {}, {}));
  const std::string buf = read_text_file(dir.path() / "c.ckpt");
  write_text_file(dir.path() / "t.ckpt", buf.substr(0, buf.size() / 2));
  EXPECT_THROW(read_checkpoint(dir.path() / "t.ckpt"), FormatError);
  std::string bad = buf;
  bad[1] = '?';
  write_text_file(dir.path() / "m.ckpt", bad);
  try {
    read_checkpoint(dir.path() / "m.ckpt");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(read_checkpoint(dir.path() / "missing.ckpt"), IoError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_factor = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr_step = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

}  // namespace
}  // namespace mtel::train
