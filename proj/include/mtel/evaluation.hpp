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

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mtel::eval {

enum class View { audio, visual, audio_visual };
std::string_view to_string(View v);

// Half-open [start, end) in grid snippets.
struct EventSegment {
  View view = View::audio;
  int category = 0;
  Index start = 0;
  Index end = 0;

  Index length() const { return end - start; }
  bool operator==(const EventSegment&) const = default;
};

Matrix av_snippet_predictions(const Matrix& p_audio, const Matrix& p_visual);

// Maximal runs of p[t, c] > theta, ordered by category then start.
std::vector<EventSegment> snippets_to_segments(const Matrix& p, double theta, View view);

double segment_iou(const EventSegment& a, const EventSegment& b);

struct F1Counts {
  long long tp = 0, fp = 0, fn = 0;

  // 2TP / (2TP + FP + FN); with nothing predicted and nothing to find the
  // score is 1.
  double f1() const;
  F1Counts& operator+=(const F1Counts& o);
};

// One-to-one greedy matching by descending IoU within each category.
F1Counts match_segments(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                        double iou_threshold = 0.5);

// Pairs with equal scores share one precision value, taken over every item
// scoring at least that much. Returns NaN when there are no positives.
double average_precision(const std::vector<double>& scores, const std::vector<bool>& labels);

// Scores and binary ground truth for one video on the evaluation grid.
struct VideoEval {
  std::string video_id;
  Matrix audio_scores, visual_scores;  // [T x C]
  Matrix gt_audio, gt_visual;          // [T x C], 0/1
};

struct MetricsReport {
  double f1_audio = 0, f1_visual = 0, f1_av = 0, f1_avg = 0;
  double map_audio = 0, map_visual = 0, map_av = 0, map_avg = 0;
};

inline constexpr double kDefaultTheta = 0.5;
inline constexpr double kDefaultIou = 0.5;

double view_event_f1(const std::vector<VideoEval>& videos, View view, double theta = kDefaultTheta,
                     double iou_threshold = kDefaultIou);
// Mean over classes with at least one positive snippet; NaN if none has.
double view_snippet_map(const std::vector<VideoEval>& videos, View view);

MetricsReport compute_metrics(const std::vector<VideoEval>& videos, double theta = kDefaultTheta,
                              double iou_threshold = kDefaultIou);

std::string format_report_table(const MetricsReport& r);
// Exactly eight `key = value` lines with four decimals.
std::string format_report_key_values(const MetricsReport& r);

class MissingEventAnnotations : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalVideo {
  std::string video_id;
  Matrix audio, visual;  // features resampled to the grid
  GridLabels truth;
};

struct EvalSet {
  DatasetManifest manifest;
  std::vector<EvalVideo> videos;
};

// Reads <split_dir>/manifest.json, labels_video.csv and labels_event.csv.
EvalSet load_eval_set(const std::filesystem::path& split_dir, Index grid_length);

std::vector<VideoEval> score_with_model(const EventCentricModel& model, const EvalSet& set);
// Ground truth fed back as scores.
std::vector<VideoEval> score_with_oracle(const EvalSet& set);

}  // namespace mtel::eval
