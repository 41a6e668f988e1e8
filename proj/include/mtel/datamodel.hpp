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

#include "mtel/autograd.hpp"
#include "mtel/errors.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mtel {

enum class Modality { audio, visual };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view s);

enum class Split { train, val, test };

std::string_view to_string(Split s);
Split parse_split(std::string_view s);

// One long-form video. Label rows are [1 x C] with entries in {0, 1}.
struct VideoSample {
  std::string video_id;
  Matrix audio_feats;
  Matrix visual_feats;
  int duration_sec = 0;
  Matrix labels_audio;
  Matrix labels_visual;

  Index length() const { return audio_feats.rows(); }
  int num_classes() const { return static_cast<int>(labels_audio.cols()); }
};

struct EventAnnotation {
  std::string video_id;
  Modality modality = Modality::audio;
  int category = 0;
  double start_sec = 0.0;
  double end_sec = 0.0;
};

struct ManifestEntry {
  std::string video_id;
  std::string feature_path;  // relative to the manifest directory
  int duration = 0;
};

struct DatasetManifest {
  Split split = Split::train;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> category_names;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.feature_path; }
  int num_classes() const { return static_cast<int>(category_names.size()); }
};

// Video-level labels keyed by video id.
struct VideoLabels {
  Matrix audio;   // [1 x C]
  Matrix visual;  // [1 x C]
};
using LabelTable = std::map<std::string, VideoLabels>;

// Raw contents of one feature container; the two streams may differ in length.
struct FeaturePair {
  Matrix audio;
  Matrix visual;
};

// Binary feature container. 32-byte little-endian header:
//   [0, 8)   magic "MTEL0001"
//   [8, 12)  uint32 T (audio length)
//   [12, 16) uint32 D_audio
//   [16, 20) uint32 D_visual
//   [20, 24) uint32 reserved, must be 0
//   [24, 28) uint32 visual length, 0 meaning "same as T"
//   [28, 32) zero padding
// followed by the audio array then the visual array, float32 row-major.
inline constexpr char kFeatureMagic[9] = "MTEL0001";
inline constexpr std::size_t kFeatureHeaderBytes = 32;

void write_feature_file(const std::filesystem::path& path, const Matrix& audio, const Matrix& visual);
FeaturePair read_feature_file(const std::filesystem::path& path);

LabelTable read_video_labels(const std::filesystem::path& path, const std::vector<std::string>& categories);
void write_video_labels(const std::filesystem::path& path, const LabelTable& labels,
                        const std::vector<std::string>& categories);

std::vector<EventAnnotation> read_event_annotations(const std::filesystem::path& path,
                                                    const std::vector<std::string>& categories);
void write_event_annotations(const std::filesystem::path& path, const std::vector<EventAnnotation>& events,
                             const std::vector<std::string>& categories);

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

// Loads one video, truncating both streams to the shorter one.
VideoSample load_video_sample(const DatasetManifest& manifest, const ManifestEntry& entry, const LabelTable& labels);

// Linear interpolation along time at target_len uniformly spaced points
// spanning [0, T - 1]. Returns the input unchanged when lengths agree.
Matrix resample_sequence(const Matrix& feats, Index target_len);

struct GridLabels {
  Matrix audio;   // [T_grid x C]
  Matrix visual;  // [T_grid x C]
};

// Grid cell g spans [g*T_native/T_grid, (g+1)*T_native/T_grid); it is positive
// for class c when annotations of c cover more than half of it.
GridLabels resample_labels_to_grid(const std::vector<EventAnnotation>& annotations, double native_length,
                                   Index grid_length, int num_classes);

// Groups annotations by video id, preserving file order within each video.
std::map<std::string, std::vector<EventAnnotation>> group_by_video(const std::vector<EventAnnotation>& events);

}  // namespace mtel
