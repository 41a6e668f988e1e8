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

#include "mtel/evaluation.hpp"
#include "mtel/textio.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <tuple>

namespace mtel::eval {

std::string_view to_string(View v) {
  switch (v) {
    case View::audio: return "audio";
    case View::visual: return "visual";
    case View::audio_visual: return "audio-visual";
  }
  return "?";
}

Matrix av_snippet_predictions(const Matrix& p_audio, const Matrix& p_visual) {
  if (p_audio.rows() != p_visual.rows() || p_audio.cols() != p_visual.cols())
    throw std::invalid_argument("av_snippet_predictions: shape mismatch");
  return p_audio.cwiseProduct(p_visual);
}

std::vector<EventSegment> snippets_to_segments(const Matrix& p, double theta, View view) {
  std::vector<EventSegment> out;
  const Index t = p.rows();
  for (Index c = 0; c < p.cols(); ++c) {
    Index i = 0;
    while (i < t) {
      if (!(p(i, c) > theta)) {
        ++i;
        continue;
      }
      Index j = i;
      while (j < t && p(j, c) > theta) ++j;
      out.push_back({view, static_cast<int>(c), i, j});
      i = j;
    }
  }
  return out;
}

double segment_iou(const EventSegment& a, const EventSegment& b) {
  const Index inter = std::max<Index>(0, std::min(a.end, b.end) - std::max(a.start, b.start));
  const Index uni = a.length() + b.length() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

double F1Counts::f1() const {
  const long long denom = 2 * tp + fp + fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

F1Counts& F1Counts::operator+=(const F1Counts& o) {
  tp += o.tp;
  fp += o.fp;
  fn += o.fn;
  return *this;
}

F1Counts match_segments(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                        double iou_threshold) {
  struct Pair {
    double iou;
    std::size_t p, g;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (pred[i].category != gt[j].category) continue;
      const double iou = segment_iou(pred[i], gt[j]);
      if (iou >= iou_threshold && iou > 0.0) pairs.push_back({iou, i, j});
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.iou > b.iou; });
  std::vector<bool> pred_used(pred.size(), false), gt_used(gt.size(), false);
  F1Counts c;
  for (const auto& pr : pairs) {
    if (pred_used[pr.p] || gt_used[pr.g]) continue;
    pred_used[pr.p] = gt_used[pr.g] = true;
    ++c.tp;
  }
  c.fp = static_cast<long long>(pred.size()) - c.tp;
  c.fn = static_cast<long long>(gt.size()) - c.tp;
  return c;
}

double average_precision(const std::vector<double>& scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("average_precision: size mismatch");
  const auto positives = std::count(labels.begin(), labels.end(), true);
  if (positives == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  long long seen = 0, hits = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    long long block_hits = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (labels[order[j]]) ++block_hits;
      ++j;
    }
    seen += static_cast<long long>(j - i);
    hits += block_hits;
    if (block_hits > 0) {
      const double recall_gain = static_cast<double>(block_hits) / static_cast<double>(positives);
      ap += recall_gain * static_cast<double>(hits) / static_cast<double>(seen);
    }
    i = j;
  }
  return ap;
}

namespace {

struct ViewData {
  Matrix scores, gt;
};

ViewData view_of(const VideoEval& v, View view) {
  switch (view) {
    case View::audio: return {v.audio_scores, v.gt_audio};
    case View::visual: return {v.visual_scores, v.gt_visual};
    case View::audio_visual:
      return {av_snippet_predictions(v.audio_scores, v.visual_scores), v.gt_audio.cwiseProduct(v.gt_visual)};
  }
  return {};
}

}  // namespace

double view_event_f1(const std::vector<VideoEval>& videos, View view, double theta, double iou_threshold) {
  F1Counts total;
  for (const auto& v : videos) {
    const ViewData d = view_of(v, view);
    total += match_segments(snippets_to_segments(d.scores, theta, view), snippets_to_segments(d.gt, 0.5, view),
                            iou_threshold);
  }
  return total.f1();
}

double view_snippet_map(const std::vector<VideoEval>& videos, View view) {
  if (videos.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<ViewData> data;
  for (const auto& v : videos) data.push_back(view_of(v, view));
  const Index classes = data.front().scores.cols();
  double sum = 0.0;
  int counted = 0;
  for (Index c = 0; c < classes; ++c) {
    std::vector<double> scores;
    std::vector<bool> labels;
    for (const auto& d : data)
      for (Index t = 0; t < d.scores.rows(); ++t) {
        scores.push_back(d.scores(t, c));
        labels.push_back(d.gt(t, c) > 0.5);
      }
    const double ap = average_precision(scores, labels);
    if (std::isnan(ap)) continue;
    sum += ap;
    ++counted;
  }
  return counted > 0 ? sum / counted : std::numeric_limits<double>::quiet_NaN();
}

MetricsReport compute_metrics(const std::vector<VideoEval>& videos, double theta, double iou_threshold) {
  MetricsReport r;
  r.f1_audio = view_event_f1(videos, View::audio, theta, iou_threshold);
  r.f1_visual = view_event_f1(videos, View::visual, theta, iou_threshold);
  r.f1_av = view_event_f1(videos, View::audio_visual, theta, iou_threshold);
  r.f1_avg = (r.f1_audio + r.f1_visual + r.f1_av) / 3.0;
  // A view without a single positive snippet has nothing to rank; report 0.
  auto finite = [](double v) { return std::isnan(v) ? 0.0 : v; };
  r.map_audio = finite(view_snippet_map(videos, View::audio));
  r.map_visual = finite(view_snippet_map(videos, View::visual));
  r.map_av = finite(view_snippet_map(videos, View::audio_visual));
  r.map_avg = (r.map_audio + r.map_visual + r.map_av) / 3.0;
  return r;
}

std::string format_report_table(const MetricsReport& r) {
  std::ostringstream out;
  out << "metric   audio   visual  av      avg\n";
  out << "F1       " << format_fixed(r.f1_audio, 4) << "  " << format_fixed(r.f1_visual, 4) << "  "
      << format_fixed(r.f1_av, 4) << "  " << format_fixed(r.f1_avg, 4) << '\n';
  out << "mAP      " << format_fixed(r.map_audio, 4) << "  " << format_fixed(r.map_visual, 4) << "  "
      << format_fixed(r.map_av, 4) << "  " << format_fixed(r.map_avg, 4) << '\n';
  return out.str();
}

std::string format_report_key_values(const MetricsReport& r) {
  const std::pair<const char*, double> rows[] = {
      {"f1_audio", r.f1_audio},   {"f1_visual", r.f1_visual},   {"f1_av", r.f1_av},   {"f1_avg", r.f1_avg},
      {"map_audio", r.map_audio}, {"map_visual", r.map_visual}, {"map_av", r.map_av}, {"map_avg", r.map_avg}};
  std::string out;
  for (const auto& [k, v] : rows) out += std::string(k) + " = " + format_fixed(v, 4) + "\n";
  return out;
}

EvalSet load_eval_set(const std::filesystem::path& split_dir, Index grid_length) {
  EvalSet set;
  set.manifest = read_manifest(split_dir / "manifest.json");
  const auto events_path = split_dir / "labels_event.csv";
  if (!std::filesystem::exists(events_path))
    throw MissingEventAnnotations("split " + split_dir.string() + " has no event annotations (labels_event.csv)");
  const auto& names = set.manifest.category_names;
  LabelTable labels;
  if (std::filesystem::exists(split_dir / "labels_video.csv"))
    labels = read_video_labels(split_dir / "labels_video.csv", names);
  const auto by_video = group_by_video(read_event_annotations(events_path, names));
  static const std::vector<EventAnnotation> kNone;

  for (const auto& entry : set.manifest.entries) {
    VideoSample s = load_video_sample(set.manifest, entry, labels);
    EvalVideo v;
    v.video_id = s.video_id;
    v.audio = resample_sequence(s.audio_feats, grid_length);
    v.visual = resample_sequence(s.visual_feats, grid_length);
    auto it = by_video.find(entry.video_id);
    v.truth = resample_labels_to_grid(it == by_video.end() ? kNone : it->second, static_cast<double>(s.length()),
                                      grid_length, set.manifest.num_classes());
    set.videos.push_back(std::move(v));
  }
  return set;
}

std::vector<VideoEval> score_with_model(const EventCentricModel& model, const EvalSet& set) {
  std::vector<VideoEval> out;
  for (const auto& v : set.videos) {
    SnippetScores s = model.predict(v.audio, v.visual);
    out.push_back({v.video_id, std::move(s.audio), std::move(s.visual), v.truth.audio, v.truth.visual});
  }
  return out;
}

std::vector<VideoEval> score_with_oracle(const EvalSet& set) {
  std::vector<VideoEval> out;
  for (const auto& v : set.videos) out.push_back({v.video_id, v.truth.audio, v.truth.visual, v.truth.audio, v.truth.visual});
  return out;
}

}  // namespace mtel::eval
