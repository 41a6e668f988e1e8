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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>

namespace mtel::synth {

namespace {

// Stream tags keep the per-purpose random streams independent.
enum class Stream : std::uint32_t { timeline = 1, noise = 2, prototypes = 3 };

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t index, Stream tag) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32),
                    static_cast<std::uint32_t>(tag)};
  return std::mt19937_64(seq);
}

void merge_events(std::vector<PlantedEvent>& events) {
  std::sort(events.begin(), events.end(), [](const PlantedEvent& a, const PlantedEvent& b) {
    return std::tie(a.category, a.start, a.end) < std::tie(b.category, b.start, b.end);
  });
  std::vector<PlantedEvent> merged;
  for (const auto& e : events) {
    if (!merged.empty() && merged.back().category == e.category && e.start <= merged.back().end) {
      merged.back().end = std::max(merged.back().end, e.end);
    } else {
      merged.push_back(e);
    }
  }
  events = std::move(merged);
}

PlantedEvent jitter_copy(const PlantedEvent& e, int duration, int max_jitter, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> offset(-max_jitter, max_jitter);
  for (int attempt = 0; attempt < 32; ++attempt) {
    PlantedEvent j = e;
    j.start = std::clamp(e.start + offset(rng), 0, duration - 1);
    j.end = std::clamp(e.end + offset(rng), j.start + 1, duration);
    const bool identical = j.start == e.start && j.end == e.end;
    const bool overlaps = j.start < e.end && e.start < j.end;
    if (!identical && overlaps) return j;
  }
  PlantedEvent j = e;
  if (e.end < duration) {
    j.end = e.end + 1;
  } else if (e.start > 0) {
    j.start = e.start - 1;
  } else {
    j.end = e.end - 1;
  }
  return j;
}

}  // namespace

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("generator config: " + msg); };
  if (num_train < 0 || num_val < 0 || num_test < 0) fail("split sizes must be non-negative");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (min_duration < 30) fail("min_duration must be >= 30");
  if (max_duration < min_duration) fail("max_duration must be >= min_duration");
  if (!(mean_categories >= 1.0)) fail("mean_categories must be >= 1");
  if (!(mean_extra_instances >= 0.0)) fail("mean_extra_instances must be >= 0");
  if (!(event_min_sec >= 1.0) || !(event_max_sec >= event_min_sec)) fail("event duration range must satisfy 1 <= min <= max");
  if (!(cross_modal_corr >= 0.0 && cross_modal_corr <= 1.0)) fail("cross_modal_corr must lie in [0, 1]");
  if (jitter_max_sec < 1) fail("jitter_max_sec must be >= 1");
  if (audio_dim < 1 || visual_dim < 1) fail("feature dims must be >= 1");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
}

GeneratorConfig generator_config_from(const KeyValues& kv, GeneratorConfig base) {
  auto get = [&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    const std::string where = std::string("config key ") + key;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, double>) {
      field = parse_double(it->second, where);
    } else {
      field = static_cast<T>(parse_int(it->second, where));
    }
  };
  get("num_train", base.num_train);
  get("num_val", base.num_val);
  get("num_test", base.num_test);
  get("num_classes", base.num_classes);
  get("min_duration", base.min_duration);
  get("max_duration", base.max_duration);
  get("mean_categories", base.mean_categories);
  get("mean_extra_instances", base.mean_extra_instances);
  get("event_min_sec", base.event_min_sec);
  get("event_max_sec", base.event_max_sec);
  get("cross_modal_corr", base.cross_modal_corr);
  get("jitter_max_sec", base.jitter_max_sec);
  get("audio_dim", base.audio_dim);
  get("visual_dim", base.visual_dim);
  get("noise_std", base.noise_std);
  get("seed", base.seed);
  return base;
}

void echo_generator_config(const GeneratorConfig& c, KeyValues& out) {
  out["num_train"] = std::to_string(c.num_train);
  out["num_val"] = std::to_string(c.num_val);
  out["num_test"] = std::to_string(c.num_test);
  out["num_classes"] = std::to_string(c.num_classes);
  out["min_duration"] = std::to_string(c.min_duration);
  out["max_duration"] = std::to_string(c.max_duration);
  out["mean_categories"] = format_double(c.mean_categories);
  out["mean_extra_instances"] = format_double(c.mean_extra_instances);
  out["event_min_sec"] = format_double(c.event_min_sec);
  out["event_max_sec"] = format_double(c.event_max_sec);
  out["cross_modal_corr"] = format_double(c.cross_modal_corr);
  out["jitter_max_sec"] = std::to_string(c.jitter_max_sec);
  out["audio_dim"] = std::to_string(c.audio_dim);
  out["visual_dim"] = std::to_string(c.visual_dim);
  out["noise_std"] = format_double(c.noise_std);
  out["seed"] = std::to_string(c.seed);
}

std::vector<int> Timeline::distinct_categories() const {
  std::set<int> cats;
  for (const auto& e : audio) cats.insert(e.category);
  for (const auto& e : visual) cats.insert(e.category);
  return {cats.begin(), cats.end()};
}

Prototypes make_prototypes(const GeneratorConfig& cfg) {
  auto rng = stream_rng(cfg.seed, 0, Stream::prototypes);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](int dim) {
    Matrix m(cfg.num_classes, dim);
    for (Index r = 0; r < m.rows(); ++r) {
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = normal(rng);
      m.row(r).normalize();
    }
    return m;
  };
  Prototypes p;
  p.audio = draw(cfg.audio_dim);
  p.visual = draw(cfg.visual_dim);
  return p;
}

Timeline sample_timeline(const GeneratorConfig& cfg, int video_index) {
  auto rng = stream_rng(cfg.seed, static_cast<std::uint64_t>(video_index), Stream::timeline);
  Timeline tl;
  tl.video_index = video_index;
  tl.duration = std::uniform_int_distribution<int>(cfg.min_duration, cfg.max_duration)(rng);

  int k = 1;
  if (cfg.mean_categories > 1.0) {
    std::poisson_distribution<int> extra(cfg.mean_categories - 1.0);
    do {
      k = 1 + extra(rng);
    } while (k > cfg.num_classes);
  }
  std::vector<int> pool(static_cast<std::size_t>(cfg.num_classes));
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(static_cast<std::size_t>(k));

  const double log_lo = std::log(cfg.event_min_sec);
  const double log_hi = std::log(cfg.event_max_sec);
  std::uniform_real_distribution<double> log_dur(log_lo, log_hi);
  std::bernoulli_distribution both(cfg.cross_modal_corr);
  std::bernoulli_distribution coin(0.5);

  for (int category : pool) {
    int instances = 1;
    if (cfg.mean_extra_instances > 0) instances += std::poisson_distribution<int>(cfg.mean_extra_instances)(rng);
    for (int i = 0; i < instances; ++i) {
      const int dur = std::clamp(static_cast<int>(std::lround(std::exp(log_dur(rng)))), 1, tl.duration);
      const int start = std::uniform_int_distribution<int>(0, tl.duration - dur)(rng);
      PlantedEvent e{category, start, start + dur};
      const bool in_both = both(rng);
      const bool audio_first = coin(rng);
      if (in_both) {
        PlantedEvent other = jitter_copy(e, tl.duration, cfg.jitter_max_sec, rng);
        (audio_first ? tl.audio : tl.visual).push_back(e);
        (audio_first ? tl.visual : tl.audio).push_back(other);
      } else {
        (audio_first ? tl.audio : tl.visual).push_back(e);
      }
    }
  }
  merge_events(tl.audio);
  merge_events(tl.visual);
  return tl;
}

FeaturePair render_features(const Timeline& timeline, const Prototypes& prototypes, const GeneratorConfig& cfg) {
  auto rng = stream_rng(cfg.seed, static_cast<std::uint64_t>(timeline.video_index), Stream::noise);
  std::normal_distribution<double> noise(0.0, 1.0);
  auto render = [&](const std::vector<PlantedEvent>& events, const Matrix& protos) {
    Matrix feats(timeline.duration, protos.cols());
    for (Index i = 0; i < feats.size(); ++i) feats.data()[i] = cfg.noise_std * noise(rng);
    for (const auto& e : events) {
      for (int t = e.start; t < e.end; ++t) feats.row(t) += protos.row(e.category);
    }
    return feats;
  };
  FeaturePair out;
  out.audio = render(timeline.audio, prototypes.audio);
  out.visual = render(timeline.visual, prototypes.visual);
  return out;
}

VideoLabels timeline_labels(const Timeline& timeline, int num_classes) {
  VideoLabels l{Matrix::Zero(1, num_classes), Matrix::Zero(1, num_classes)};
  for (const auto& e : timeline.audio) l.audio(0, e.category) = 1.0;
  for (const auto& e : timeline.visual) l.visual(0, e.category) = 1.0;
  return l;
}

std::vector<EventAnnotation> timeline_annotations(const Timeline& timeline, const std::string& video_id) {
  std::vector<EventAnnotation> out;
  for (Modality m : {Modality::audio, Modality::visual}) {
    for (const auto& e : timeline.events(m)) {
      out.push_back({video_id, m, e.category, static_cast<double>(e.start), static_cast<double>(e.end)});
    }
  }
  return out;
}

std::vector<std::string> category_names(int num_classes) {
  std::vector<std::string> names;
  for (int i = 0; i < num_classes; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "event_%02d", i);
    names.emplace_back(buf);
  }
  return names;
}

void generate_dataset(const GeneratorConfig& cfg, const std::filesystem::path& root) {
  cfg.validate();
  const Prototypes protos = make_prototypes(cfg);
  const auto names = category_names(cfg.num_classes);

  int next_index = 0;
  const std::pair<Split, int> splits[] = {{Split::train, cfg.num_train}, {Split::val, cfg.num_val},
                                          {Split::test, cfg.num_test}};
  for (const auto& [split, count] : splits) {
    const auto dir = root / std::string(to_string(split));
    const auto feat_dir = dir / "features";
    std::error_code ec;
    std::filesystem::create_directories(feat_dir, ec);
    if (ec) throw IoError("cannot create directory (" + ec.message() + ")", feat_dir.string());

    DatasetManifest manifest;
    manifest.split = split;
    manifest.category_names = names;
    LabelTable labels;
    std::vector<EventAnnotation> events;
    for (int i = 0; i < count; ++i, ++next_index) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%05d", std::string(to_string(split)).c_str(), i);
      const Timeline tl = sample_timeline(cfg, next_index);
      const FeaturePair feats = render_features(tl, protos, cfg);
      const std::string rel = std::string("features/") + id + ".bin";
      write_feature_file(dir / rel, feats.audio, feats.visual);
      manifest.entries.push_back({id, rel, tl.duration});
      labels[id] = timeline_labels(tl, cfg.num_classes);
      if (split != Split::train) {
        auto ann = timeline_annotations(tl, id);
        events.insert(events.end(), ann.begin(), ann.end());
      }
    }
    write_manifest(dir / "manifest.json", manifest);
    write_video_labels(dir / "labels_video.csv", labels, names);
    if (split != Split::train) write_event_annotations(dir / "labels_event.csv", events, names);
  }
}

}  // namespace mtel::synth
