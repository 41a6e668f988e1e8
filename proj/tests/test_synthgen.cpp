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
#include "mtel/textio.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <set>

namespace mtel::synth {
namespace {

using mtel::testing::TempDir;

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.num_train = 6;
  c.num_val = 2;
  c.num_test = 3;
  c.num_classes = 5;
  c.min_duration = 30;
  c.max_duration = 60;
  c.audio_dim = 8;
  c.visual_dim = 12;
  c.seed = 17;
  return c;
}

std::set<int> categories_of(const std::vector<PlantedEvent>& events) {
  std::set<int> s;
  for (const auto& e : events) s.insert(e.category);
  return s;
}

TEST(SampleTimeline, FullCorrelationPlantsJitteredPairs) {
  GeneratorConfig c = small_config();
  c.cross_modal_corr = 1.0;
  c.mean_categories = 1.0;
  c.mean_extra_instances = 0.0;
  for (int i = 0; i < 50; ++i) {
    const Timeline tl = sample_timeline(c, i);
    ASSERT_EQ(tl.audio.size(), 1u);
    ASSERT_EQ(tl.visual.size(), 1u);
    const auto& a = tl.audio[0];
    const auto& v = tl.visual[0];
    EXPECT_EQ(a.category, v.category);
    EXPECT_LT(std::max(a.start, v.start), std::min(a.end, v.end)) << "intervals must overlap";
    EXPECT_FALSE(a.start == v.start && a.end == v.end) << "intervals must be jittered";
  }
}

TEST(SampleTimeline, ZeroCorrelationNeverDuplicatesAcrossModalities) {
  GeneratorConfig c = small_config();
  c.cross_modal_corr = 0.0;
  c.mean_extra_instances = 0.0;
  for (int i = 0; i < 200; ++i) {
    const Timeline tl = sample_timeline(c, i);
    const auto a = categories_of(tl.audio), v = categories_of(tl.visual);
    for (int cat : a) EXPECT_EQ(v.count(cat), 0u) << "video " << i;
  }
}

TEST(SampleTimeline, MeanDistinctCategoriesMatchesDefault) {
  GeneratorConfig c;
  double total = 0;
  for (int i = 0; i < 1000; ++i) total += static_cast<double>(sample_timeline(c, i).distinct_categories().size());
  EXPECT_NEAR(total / 1000.0, 3.15, 0.3);
}

TEST(SampleTimeline, IntervalsInRangeAndMerged) {
  GeneratorConfig c = small_config();
  c.mean_categories = 3.0;
  c.mean_extra_instances = 2.0;
  for (int i = 0; i < 300; ++i) {
    const Timeline tl = sample_timeline(c, i);
    EXPECT_GE(tl.duration, c.min_duration);
    EXPECT_LE(tl.duration, c.max_duration);
    for (const auto* list : {&tl.audio, &tl.visual}) {
      for (std::size_t k = 0; k < list->size(); ++k) {
        const auto& e = (*list)[k];
        EXPECT_GE(e.start, 0);
        EXPECT_LT(e.start, e.end);
        EXPECT_LE(e.end, tl.duration);
        for (std::size_t j = k + 1; j < list->size(); ++j) {
          const auto& o = (*list)[j];
          if (o.category != e.category) continue;
          EXPECT_TRUE(o.start >= e.end || e.start >= o.end) << "same-category overlap in video " << i;
        }
      }
    }
  }
}

TEST(SampleTimeline, Deterministic) {
  const GeneratorConfig c = small_config();
  for (int i = 0; i < 20; ++i) {
    const Timeline a = sample_timeline(c, i), b = sample_timeline(c, i);
    ASSERT_EQ(a.duration, b.duration);
    ASSERT_EQ(a.audio.size(), b.audio.size());
    for (std::size_t k = 0; k < a.audio.size(); ++k) EXPECT_EQ(a.audio[k].start, b.audio[k].start);
  }
}

TEST(RenderFeatures, ZeroNoiseEqualsPrototypes) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.0;
  const Prototypes p = make_prototypes(c);
  for (Index r = 0; r < p.audio.rows(); ++r) EXPECT_NEAR(p.audio.row(r).norm(), 1.0, 1e-12);
  Timeline tl;
  tl.duration = 40;
  tl.audio = {{2, 5, 10}, {3, 8, 12}};
  tl.visual = {{1, 0, 4}};
  const FeaturePair f = render_features(tl, p, c);
  for (int t = 5; t < 8; ++t) EXPECT_TRUE(f.audio.row(t) == p.audio.row(2));
  for (int t = 8; t < 10; ++t) EXPECT_TRUE(f.audio.row(t) == (p.audio.row(2) + p.audio.row(3)).eval());
  for (int t = 10; t < 12; ++t) EXPECT_TRUE(f.audio.row(t) == p.audio.row(3));
  EXPECT_EQ(f.audio.topRows(5).norm(), 0.0);
  EXPECT_EQ(f.audio.bottomRows(28).norm(), 0.0);
  for (int t = 0; t < 4; ++t) EXPECT_TRUE(f.visual.row(t) == p.visual.row(1));
}

TEST(RenderFeatures, NoEventsGivesNoiseWithConfiguredStd) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.3;
  Timeline tl;
  tl.duration = 2000;
  const FeaturePair f = render_features(tl, make_prototypes(c), c);
  for (const Matrix* m : {&f.audio, &f.visual}) {
    for (Index d = 0; d < m->cols(); ++d) {
      const auto col = m->col(d).array();
      const double mean = col.mean();
      const double sd = std::sqrt((col - mean).square().sum() / static_cast<double>(col.size() - 1));
      EXPECT_NEAR(sd, 0.3, 0.03) << "dim " << d;
    }
  }
}

TEST(RenderFeatures, ZeroNoiseIsLinearlySeparable) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.0;
  c.num_classes = 8;
  c.audio_dim = 16;
  const Prototypes p = make_prototypes(c);
  std::vector<Matrix> xs, ys;
  Index rows = 0;
  for (int i = 0; i < 40; ++i) {
    const Timeline tl = sample_timeline(c, i);
    const FeaturePair f = render_features(tl, p, c);
    Matrix y = Matrix::Zero(tl.duration, c.num_classes);
    for (const auto& e : tl.audio)
      for (int t = e.start; t < e.end; ++t) y(t, e.category) = 1.0;
    xs.push_back(f.audio);
    ys.push_back(y);
    rows += tl.duration;
  }
  Matrix x(rows, c.audio_dim), y(rows, c.num_classes);
  Index at = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    x.middleRows(at, xs[k].rows()) = xs[k];
    y.middleRows(at, ys[k].rows()) = ys[k];
    at += xs[k].rows();
  }
  const Matrix w = x.colPivHouseholderQr().solve(y);
  const Matrix pred = x * w;
  for (Index i = 0; i < y.size(); ++i) ASSERT_EQ(pred.data()[i] > 0.5, y.data()[i] > 0.5);
}

TEST(Labels, VideoLabelsAreTimelineUnion) {
  const GeneratorConfig c = small_config();
  for (int i = 0; i < 50; ++i) {
    const Timeline tl = sample_timeline(c, i);
    const VideoLabels l = timeline_labels(tl, c.num_classes);
    const auto a = categories_of(tl.audio), v = categories_of(tl.visual);
    for (int k = 0; k < c.num_classes; ++k) {
      EXPECT_EQ(l.audio(0, k) == 1.0, a.count(k) == 1);
      EXPECT_EQ(l.visual(0, k) == 1.0, v.count(k) == 1);
    }
  }
}

TEST(GenerateDataset, LoadsCleanlyAndLabelsMatchEvents) {
  TempDir dir("gen");
  const GeneratorConfig c = small_config();
  generate_dataset(c, dir.path());
  const auto names = category_names(c.num_classes);
  for (const char* split : {"train", "val", "test"}) {
    const auto sd = dir.path() / split;
    const DatasetManifest m = read_manifest(sd / "manifest.json");
    const LabelTable labels = read_video_labels(sd / "labels_video.csv", names);
    EXPECT_EQ(m.category_names, names);
    const bool has_events = std::string(split) != "train";
    EXPECT_EQ(std::filesystem::exists(sd / "labels_event.csv"), has_events);
    std::map<std::string, std::vector<EventAnnotation>> events;
    if (has_events) events = group_by_video(read_event_annotations(sd / "labels_event.csv", names));
    for (const auto& e : m.entries) {
      const VideoSample s = load_video_sample(m, e, labels);
      EXPECT_EQ(s.length(), e.duration);
      EXPECT_EQ(s.audio_feats.cols(), c.audio_dim);
      EXPECT_EQ(s.visual_feats.cols(), c.visual_dim);
      if (!has_events) continue;
      Matrix ya = Matrix::Zero(1, c.num_classes), yv = Matrix::Zero(1, c.num_classes);
      for (const auto& a : events[e.video_id]) {
        (a.modality == Modality::audio ? ya : yv)(0, a.category) = 1.0;
        EXPECT_LE(a.end_sec, e.duration);
      }
      EXPECT_TRUE(ya == s.labels_audio) << e.video_id;
      EXPECT_TRUE(yv == s.labels_visual) << e.video_id;
    }
  }
}

TEST(GenerateDataset, SameSeedIsByteIdentical) {
  TempDir a("gen_a"), b("gen_b");
  const GeneratorConfig c = small_config();
  generate_dataset(c, a.path());
  generate_dataset(c, b.path());
  std::size_t files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a.path());
    ASSERT_TRUE(std::filesystem::exists(b.path() / rel)) << rel;
    EXPECT_EQ(read_text_file(entry.path()), read_text_file(b.path() / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, static_cast<std::size_t>(c.total_videos() + 3 * 2 + 2));
}

TEST(GeneratorConfig, RejectsInvalidSettings) {
  GeneratorConfig c;
  c.min_duration = 20;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.cross_modal_corr = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.noise_std = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(GeneratorConfig{}.validate());
}

TEST(GeneratorConfig, KeyValueRoundTrip) {
  GeneratorConfig c = small_config();
  c.noise_std = 0.125;
  KeyValues kv;
  echo_generator_config(c, kv);
  const GeneratorConfig back = generator_config_from(kv);
  KeyValues kv2;
  echo_generator_config(back, kv2);
  EXPECT_EQ(kv, kv2);
}

}  // namespace
}  // namespace mtel::synth
