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

#include "mtel/datamodel.hpp"
#include "mtel/textio.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace mtel {

namespace {

static_assert(std::endian::native == std::endian::little, "feature IO assumes a little-endian host");

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf.append(b, 4);
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v;
  std::memcpy(&v, buf.data() + off, 4);
  return v;
}

void append_floats(std::string& buf, const Matrix& m) {
  const std::size_t start = buf.size();
  buf.resize(start + static_cast<std::size_t>(m.size()) * 4);
  char* out = buf.data() + start;
  for (Index i = 0; i < m.size(); ++i) {
    const float f = static_cast<float>(m.data()[i]);
    std::memcpy(out + 4 * i, &f, 4);
  }
}

Matrix read_floats(const std::string& buf, std::size_t off, Index rows, Index cols) {
  Matrix m(rows, cols);
  const char* in = buf.data() + off;
  for (Index i = 0; i < m.size(); ++i) {
    float f;
    std::memcpy(&f, in + 4 * i, 4);
    m.data()[i] = static_cast<double>(f);
  }
  return m;
}

std::map<std::string, int> category_index(const std::vector<std::string>& categories) {
  std::map<std::string, int> idx;
  for (std::size_t i = 0; i < categories.size(); ++i) idx[categories[i]] = static_cast<int>(i);
  return idx;
}

int lookup_category(const std::map<std::string, int>& idx, const std::string& name, const std::string& where) {
  auto it = idx.find(name);
  if (it == idx.end()) throw SchemaError("unknown category '" + name + "' in " + where);
  return it->second;
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::audio ? "audio" : "visual"; }

Modality parse_modality(std::string_view s) {
  if (s == "audio") return Modality::audio;
  if (s == "visual") return Modality::visual;
  throw SchemaError("unknown modality '" + std::string(s) + "'");
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw SchemaError("unknown split '" + std::string(s) + "'");
}

void write_feature_file(const std::filesystem::path& path, const Matrix& audio, const Matrix& visual) {
  std::string buf;
  buf.reserve(kFeatureHeaderBytes + static_cast<std::size_t>(audio.size() + visual.size()) * 4);
  buf.append(kFeatureMagic, 8);
  put_u32(buf, static_cast<std::uint32_t>(audio.rows()));
  put_u32(buf, static_cast<std::uint32_t>(audio.cols()));
  put_u32(buf, static_cast<std::uint32_t>(visual.cols()));
  put_u32(buf, 0);
  put_u32(buf, visual.rows() == audio.rows() ? 0u : static_cast<std::uint32_t>(visual.rows()));
  put_u32(buf, 0);
  append_floats(buf, audio);
  append_floats(buf, visual);
  write_text_file(path, buf);
}

FeaturePair read_feature_file(const std::filesystem::path& path) {
  const std::string buf = read_text_file(path);
  if (buf.size() < kFeatureHeaderBytes) throw FormatError("truncated header in " + path.string(), buf.size());
  if (std::memcmp(buf.data(), kFeatureMagic, 8) != 0) throw FormatError("bad magic in " + path.string(), 0);
  const std::uint32_t t_audio = get_u32(buf, 8);
  const std::uint32_t d_audio = get_u32(buf, 12);
  const std::uint32_t d_visual = get_u32(buf, 16);
  if (get_u32(buf, 20) != 0) throw FormatError("reserved field must be zero in " + path.string(), 20);
  const std::uint32_t t_visual_field = get_u32(buf, 24);
  if (get_u32(buf, 28) != 0) throw FormatError("header padding must be zero in " + path.string(), 28);
  const std::uint32_t t_visual = t_visual_field == 0 ? t_audio : t_visual_field;
  if (d_audio == 0 || d_visual == 0) throw FormatError("zero feature dimension in " + path.string(), 12);

  const std::uint64_t audio_bytes = std::uint64_t{t_audio} * d_audio * 4;
  const std::uint64_t visual_bytes = std::uint64_t{t_visual} * d_visual * 4;
  const std::uint64_t expected = kFeatureHeaderBytes + audio_bytes + visual_bytes;
  if (buf.size() < expected) throw FormatError("truncated payload in " + path.string(), buf.size());
  if (buf.size() > expected) throw FormatError("trailing bytes in " + path.string(), expected);

  FeaturePair out;
  out.audio = read_floats(buf, kFeatureHeaderBytes, t_audio, d_audio);
  out.visual = read_floats(buf, kFeatureHeaderBytes + audio_bytes, t_visual, d_visual);
  return out;
}

LabelTable read_video_labels(const std::filesystem::path& path, const std::vector<std::string>& categories) {
  const auto idx = category_index(categories);
  const Index c = static_cast<Index>(categories.size());
  LabelTable table;
  std::istringstream in(read_text_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("video_id", 0) == 0) continue;
    const auto first = line.find(',');
    const auto second = first == std::string::npos ? std::string::npos : line.find(',', first + 1);
    if (second == std::string::npos) {
      throw SchemaError(path.string() + ":" + std::to_string(lineno) + ": expected video_id,modality,labels");
    }
    const std::string vid = trim(line.substr(0, first));
    const Modality m = parse_modality(trim(line.substr(first + 1, second - first - 1)));
    auto& entry = table[vid];
    if (entry.audio.size() == 0) {
      entry.audio = Matrix::Zero(1, c);
      entry.visual = Matrix::Zero(1, c);
    }
    Matrix& row = m == Modality::audio ? entry.audio : entry.visual;
    std::string rest = line.substr(second + 1);
    std::replace(rest.begin(), rest.end(), ',', ';');
    for (const auto& name : split(rest, ';')) {
      const std::string n = trim(name);
      if (n.empty()) continue;
      row(0, lookup_category(idx, n, path.string() + ":" + std::to_string(lineno))) = 1.0;
    }
  }
  return table;
}

void write_video_labels(const std::filesystem::path& path, const LabelTable& labels,
                        const std::vector<std::string>& categories) {
  std::ostringstream out;
  out << "video_id,modality,labels\n";
  for (const auto& [vid, l] : labels) {
    for (Modality m : {Modality::audio, Modality::visual}) {
      const Matrix& row = m == Modality::audio ? l.audio : l.visual;
      out << vid << ',' << to_string(m) << ',';
      bool first = true;
      for (Index i = 0; i < row.cols(); ++i) {
        if (row(0, i) < 0.5) continue;
        out << (first ? "" : ";") << categories[static_cast<std::size_t>(i)];
        first = false;
      }
      out << '\n';
    }
  }
  write_text_file(path, out.str());
}

std::vector<EventAnnotation> read_event_annotations(const std::filesystem::path& path,
                                                    const std::vector<std::string>& categories) {
  const auto idx = category_index(categories);
  std::vector<EventAnnotation> events;
  std::istringstream in(read_text_file(path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    if (lineno == 1 && line.rfind("video_id", 0) == 0) continue;
    const auto fields = split(line, ',');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 5) throw SchemaError(where + ": expected 5 columns");
    EventAnnotation e;
    e.video_id = trim(fields[0]);
    e.modality = parse_modality(trim(fields[1]));
    e.category = lookup_category(idx, trim(fields[2]), where);
    e.start_sec = parse_double(trim(fields[3]), where);
    e.end_sec = parse_double(trim(fields[4]), where);
    if (!(e.start_sec >= 0.0) || !(e.start_sec < e.end_sec)) throw ValidationError(where + ": need 0 <= start < end");
    events.push_back(std::move(e));
  }
  return events;
}

void write_event_annotations(const std::filesystem::path& path, const std::vector<EventAnnotation>& events,
                             const std::vector<std::string>& categories) {
  std::ostringstream out;
  out << "video_id,modality,category,start_sec,end_sec\n";
  for (const auto& e : events) {
    out << e.video_id << ',' << to_string(e.modality) << ',' << categories.at(static_cast<std::size_t>(e.category))
        << ',' << format_double(e.start_sec) << ',' << format_double(e.end_sec) << '\n';
  }
  write_text_file(path, out.str());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what(), e.byte);
  }
  DatasetManifest m;
  try {
    m.split = parse_split(j.at("split").get<std::string>());
    m.category_names = j.at("category_names").get<std::vector<std::string>>();
    std::set<std::string> seen;
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.video_id = e.at("video_id").get<std::string>();
      entry.feature_path = e.at("feature_path").get<std::string>();
      entry.duration = e.at("duration").get<int>();
      if (!seen.insert(entry.video_id).second) throw SchemaError("duplicate video_id " + entry.video_id);
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest " + path.string() + ": " + e.what());
  }
  m.base_dir = path.parent_path();
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  nlohmann::ordered_json j;
  j["split"] = std::string(to_string(manifest.split));
  j["category_names"] = manifest.category_names;
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json row;
    row["video_id"] = e.video_id;
    row["feature_path"] = e.feature_path;
    row["duration"] = e.duration;
    j["entries"].push_back(std::move(row));
  }
  write_text_file(path, j.dump(2) + "\n");
}

VideoSample load_video_sample(const DatasetManifest& manifest, const ManifestEntry& entry, const LabelTable& labels) {
  FeaturePair raw = read_feature_file(manifest.resolve(entry));
  const Index t = std::min(raw.audio.rows(), raw.visual.rows());
  if (t == 0) throw EmptyVideoError("video " + entry.video_id + " has no snippets");

  VideoSample s;
  s.video_id = entry.video_id;
  s.audio_feats = raw.audio.topRows(t);
  s.visual_feats = raw.visual.topRows(t);
  for (Index i = 0; i < s.audio_feats.size(); ++i)
    if (!std::isfinite(s.audio_feats.data()[i])) throw FormatError("non-finite audio feature", kFeatureHeaderBytes);
  for (Index i = 0; i < s.visual_feats.size(); ++i)
    if (!std::isfinite(s.visual_feats.data()[i])) throw FormatError("non-finite visual feature", kFeatureHeaderBytes);
  s.duration_sec = static_cast<int>(t);

  const Index c = manifest.num_classes();
  auto it = labels.find(entry.video_id);
  if (it == labels.end()) {
    s.labels_audio = Matrix::Zero(1, c);
    s.labels_visual = Matrix::Zero(1, c);
  } else {
    if (it->second.audio.cols() != c) throw SchemaError("label width mismatch for " + entry.video_id);
    s.labels_audio = it->second.audio;
    s.labels_visual = it->second.visual;
  }
  return s;
}

Matrix resample_sequence(const Matrix& feats, Index target_len) {
  if (target_len < 1) throw std::invalid_argument("resample_sequence: target_len must be >= 1");
  const Index t = feats.rows();
  if (t < 1) throw std::invalid_argument("resample_sequence: empty input");
  if (t == target_len) return feats;
  Matrix out(target_len, feats.cols());
  for (Index g = 0; g < target_len; ++g) {
    const double pos = target_len == 1 ? 0.5 * static_cast<double>(t - 1)
                                       : static_cast<double>(g) * static_cast<double>(t - 1) /
                                             static_cast<double>(target_len - 1);
    const Index lo = std::min(static_cast<Index>(std::floor(pos)), t - 1);
    const Index hi = std::min(lo + 1, t - 1);
    const double frac = pos - static_cast<double>(lo);
    if (frac == 0.0 || lo == hi) {
      out.row(g) = feats.row(lo);
    } else {
      out.row(g) = (1.0 - frac) * feats.row(lo) + frac * feats.row(hi);
    }
  }
  return out;
}

GridLabels resample_labels_to_grid(const std::vector<EventAnnotation>& annotations, double native_length,
                                   Index grid_length, int num_classes) {
  if (grid_length < 1) throw std::invalid_argument("resample_labels_to_grid: grid_length must be >= 1");
  if (!(native_length > 0)) throw std::invalid_argument("resample_labels_to_grid: native length must be positive");

  // Merge per (modality, class) so overlapping annotations are not double counted.
  std::map<std::pair<int, int>, std::vector<std::pair<double, double>>> spans;
  for (const auto& a : annotations) {
    if (a.start_sec < 0 || a.end_sec > native_length || !(a.start_sec < a.end_sec)) {
      throw ValidationError("annotation [" + format_double(a.start_sec) + ", " + format_double(a.end_sec) +
                            ") of " + a.video_id + " lies outside [0, " + format_double(native_length) + "]");
    }
    if (a.category < 0 || a.category >= num_classes) throw ValidationError("annotation category out of range");
    spans[{static_cast<int>(a.modality), a.category}].emplace_back(a.start_sec, a.end_sec);
  }

  GridLabels out{Matrix::Zero(grid_length, num_classes), Matrix::Zero(grid_length, num_classes)};
  const double cell = native_length / static_cast<double>(grid_length);
  for (auto& [key, list] : spans) {
    std::sort(list.begin(), list.end());
    std::vector<std::pair<double, double>> merged;
    for (const auto& s : list) {
      if (!merged.empty() && s.first <= merged.back().second) {
        merged.back().second = std::max(merged.back().second, s.second);
      } else {
        merged.push_back(s);
      }
    }
    Matrix& grid = key.first == static_cast<int>(Modality::audio) ? out.audio : out.visual;
    for (Index g = 0; g < grid_length; ++g) {
      const double lo = static_cast<double>(g) * native_length / static_cast<double>(grid_length);
      const double hi = static_cast<double>(g + 1) * native_length / static_cast<double>(grid_length);
      double covered = 0.0;
      for (const auto& [s, e] : merged) covered += std::max(0.0, std::min(hi, e) - std::max(lo, s));
      if (covered > 0.5 * cell) grid(g, key.second) = 1.0;
    }
  }
  return out;
}

std::map<std::string, std::vector<EventAnnotation>> group_by_video(const std::vector<EventAnnotation>& events) {
  std::map<std::string, std::vector<EventAnnotation>> out;
  for (const auto& e : events) out[e.video_id].push_back(e);
  return out;
}

}  // namespace mtel
