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
#include "mtel/model.hpp"
#include "mtel/textio.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtel::train {

struct TrainConfig {
  int batch_size = 16;
  int epochs = 30;
  double lr_phase1 = 1e-4;
  double lr_phase2 = 1e-4;
  double lr_phase3 = 2e-4;
  int lr_step = 10;
  double lr_factor = 0.1;
  double event_loss_weight = 0.3;
  Index grid_length = 200;
  std::uint64_t seed = 0;

  void validate() const;
  std::array<double, 3> base_lrs() const { return {lr_phase1, lr_phase2, lr_phase3}; }
};

TrainConfig train_config_from(const KeyValues& kv, TrainConfig base = {});
void echo_train_config(const TrainConfig& cfg, KeyValues& out);

struct LossBreakdown {
  double l1 = 0.0, l2 = 0.0, l3 = 0.0;
  double l_ea = 0.0, l_ev = 0.0, l_e = 0.0;
  double total = 0.0;
};

inline constexpr double kBceEps = 1e-7;

// BCE(p_a, y_a) + BCE(p_v, y_v), each averaged over every element.
ag::Var phase_loss(const ag::Var& p_audio, const ag::Var& p_visual, const Matrix& y_audio, const Matrix& y_visual);

// (1/n) * sum_i BCE(p_i, y[category_i]); zero when no events were extracted.
ag::Var modality_event_loss(const std::vector<ag::Var>& preds, const std::vector<int>& categories,
                            const Matrix& video_labels);

struct EventLoss {
  ag::Var audio, visual, total;
};
EventLoss event_loss(const std::vector<ag::Var>& audio_preds, const std::vector<int>& audio_categories,
                     const std::vector<ag::Var>& visual_preds, const std::vector<int>& visual_categories,
                     const Matrix& y_audio, const Matrix& y_visual);

double total_loss(double l1, double l2, double l3, double l_e, double alpha);

struct SampleLoss {
  ag::Var total;
  LossBreakdown parts;
};
// Assembles all configured loss terms for one forward pass.
SampleLoss compute_loss(const ForwardResult& r, const Matrix& y_audio, const Matrix& y_visual, double alpha);

double lr_at(int epoch, double base_lr, const TrainConfig& cfg);

struct AdamState {
  long long step = 0;
  std::map<std::string, Matrix> m, v;
};

// Adam over a parameter store, one learning rate per phase group.
class Adam {
 public:
  explicit Adam(nn::ParameterStore& store, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(const std::array<double, 3>& lrs);
  AdamState& state() { return state_; }
  const AdamState& state() const { return state_; }

 private:
  nn::ParameterStore& store_;
  double beta1_, beta2_, eps_;
  AdamState state_;
};

struct TrainingSample {
  std::string video_id;
  Matrix audio;  // [T_grid x D_a]
  Matrix visual;
  Matrix labels_audio;  // [1 x C]
  Matrix labels_visual;
};

std::vector<TrainingSample> load_training_samples(const DatasetManifest& manifest, const LabelTable& labels,
                                                  Index grid_length);

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(const std::string& component, int epoch);
  const std::string& component() const { return component_; }

 private:
  std::string component_;
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown loss;
  std::array<double, 3> lr{};
};

std::string epoch_log_header();
std::string format_epoch_record(const EpochRecord& r);

struct TrainState {
  int next_epoch = 0;
  AdamState adam;
};

using EpochCallback = std::function<void(const EpochRecord&, const EventCentricModel&, const TrainState&)>;

// Runs epochs [state.next_epoch, cfg.epochs). Shuffling and dropout streams
// derive from (seed, epoch), so a resumed run replays the same order.
std::vector<EpochRecord> train(EventCentricModel& model, const std::vector<TrainingSample>& data,
                               const TrainConfig& cfg, TrainState& state, const EpochCallback& on_epoch = {});

// Checkpoint: "MTELCKPT", u32 version, u32 metadata length, metadata text
// (key = value lines), u32 tensor count, then per tensor u32 name length,
// name, u32 rows, u32 cols, float32 row-major data. Optimizer moments are
// stored as tensors named "adam.m/<param>" and "adam.v/<param>".
struct Checkpoint {
  KeyValues metadata;
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* tensor(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const EventCentricModel& model, const TrainState& state, const KeyValues& extra_metadata);
// Rebuilds the model from checkpoint metadata; with_interaction = false drops
// the event-interaction parameters entirely.
std::unique_ptr<EventCentricModel> model_from_checkpoint(const Checkpoint& ckpt, bool with_interaction = true);
TrainState train_state_from_checkpoint(const Checkpoint& ckpt);

}  // namespace mtel::train
