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
#include "mtel/textio.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mtel::synth {

struct GeneratorConfig {
  int num_train = 200;
  int num_val = 50;
  int num_test = 50;
  int num_classes = 35;
  int min_duration = 30;
  int max_duration = 400;
  // Distinct categories per video: 1 + Poisson(mean_categories - 1), capped at C.
  double mean_categories = 3.15;
  // Extra instances per category: Poisson(mean_extra_instances).
  double mean_extra_instances = 0.6;
  // Event durations are log-uniform in [event_min_sec, event_max_sec].
  double event_min_sec = 2.0;
  double event_max_sec = 60.0;
  double cross_modal_corr = 0.5;
  int jitter_max_sec = 3;
  int audio_dim = 128;
  int visual_dim = 512;
  double noise_std = 0.3;
  std::uint64_t seed = 0;

  void validate() const;
  int total_videos() const { return num_train + num_val + num_test; }
};

// Reads recognised keys from a key-value map; unknown keys are ignored here.
GeneratorConfig generator_config_from(const KeyValues& kv, GeneratorConfig base = {});
void echo_generator_config(const GeneratorConfig& cfg, KeyValues& out);

struct PlantedEvent {
  int category = 0;
  int start = 0;  // seconds, inclusive
  int end = 0;    // seconds, exclusive
};

struct Timeline {
  int video_index = 0;
  int duration = 0;
  std::vector<PlantedEvent> audio;
  std::vector<PlantedEvent> visual;

  const std::vector<PlantedEvent>& events(Modality m) const { return m == Modality::audio ? audio : visual; }
  std::vector<int> distinct_categories() const;
};

// Unit-norm class prototypes, one row per category.
struct Prototypes {
  Matrix audio;   // [C x D_audio]
  Matrix visual;  // [C x D_visual]
};

Prototypes make_prototypes(const GeneratorConfig& cfg);
Timeline sample_timeline(const GeneratorConfig& cfg, int video_index);
FeaturePair render_features(const Timeline& timeline, const Prototypes& prototypes, const GeneratorConfig& cfg);

// Per-modality binary video-level labels implied by a timeline.
VideoLabels timeline_labels(const Timeline& timeline, int num_classes);
std::vector<EventAnnotation> timeline_annotations(const Timeline& timeline, const std::string& video_id);

std::vector<std::string> category_names(int num_classes);

// Writes <root>/<split>/{manifest.json, features/*.bin, labels_video.csv,
// labels_event.csv}. The train split carries video-level labels only.
void generate_dataset(const GeneratorConfig& cfg, const std::filesystem::path& root);

}  // namespace mtel::synth
