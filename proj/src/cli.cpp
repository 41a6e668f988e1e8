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

#include "mtel/cli.hpp"
#include "mtel/errors.hpp"
#include "mtel/evaluation.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <set>
#include <sstream>

namespace mtel::cli {

namespace fs = std::filesystem;

void RunConfig::validate() const {
  generator.validate();
  model.validate();
  train.validate();
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("theta must lie in (0, 1)");
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw ConfigError("iou_threshold must lie in (0, 1]");
  if (data_dir.empty()) throw ConfigError("data_dir must not be empty");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

KeyValues RunConfig::echo() const {
  KeyValues kv;
  synth::echo_generator_config(generator, kv);
  echo_model_config(model, kv);
  train::echo_train_config(train, kv);
  kv["data_dir"] = data_dir.string();
  kv["out_dir"] = out_dir.string();
  kv["theta"] = format_double(theta);
  kv["iou_threshold"] = format_double(iou_threshold);
  kv["seed"] = std::to_string(seed);
  return kv;
}

namespace {

// Keys with the same name mean the same thing in every section (seed,
// feature dims, class count), so one flat namespace suffices.
const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> out;
    for (const auto& [k, v] : RunConfig{}.echo()) out.insert(k);
    return out;
  }();
  return keys;
}

}  // namespace

RunConfig run_config_from(const KeyValues& file_kv, const Overrides& ov) {
  for (const auto& [k, v] : file_kv)
    if (!known_keys().count(k)) throw ConfigError("unknown config key '" + k + "'");
  KeyValues kv = file_kv;
  if (ov.seed) {
    kv["seed"] = std::to_string(*ov.seed);
    kv["init_seed"] = std::to_string(*ov.seed);
  } else if (kv.count("seed") && !kv.count("init_seed")) {
    kv["init_seed"] = kv["seed"];
  }
  if (ov.epochs) kv["epochs"] = std::to_string(*ov.epochs);

  RunConfig c;
  c.generator = synth::generator_config_from(kv);
  c.model = model_config_from(kv);
  c.train = train::train_config_from(kv);
  if (auto it = kv.find("data_dir"); it != kv.end()) c.data_dir = it->second;
  if (auto it = kv.find("out_dir"); it != kv.end()) c.out_dir = it->second;
  if (auto it = kv.find("theta"); it != kv.end()) c.theta = parse_double(it->second, "config key theta");
  if (auto it = kv.find("iou_threshold"); it != kv.end())
    c.iou_threshold = parse_double(it->second, "config key iou_threshold");
  if (auto it = kv.find("seed"); it != kv.end())
    c.seed = static_cast<std::uint64_t>(parse_int(it->second, "config key seed"));
  if (ov.out) c.out_dir = *ov.out;
  if (ov.data) c.data_dir = *ov.data;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::optional<fs::path>& config_path, const Overrides& overrides) {
  KeyValues kv;
  if (config_path) kv = read_key_values(*config_path);
  return run_config_from(kv, overrides);
}

namespace {

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path unique_run_dir(const fs::path& out, std::uint64_t seed) {
  const std::string base = "run-" + timestamp() + "-seed" + std::to_string(seed);
  fs::path dir = out / base;
  for (int i = 1; fs::exists(dir); ++i) dir = out / (base + "-" + std::to_string(i));
  return dir;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory: " + ec.message(), dir);
}

fs::path split_dir(const RunConfig& cfg, const std::string& split) {
  const fs::path as_path(split);
  if (fs::is_directory(as_path) && fs::exists(as_path / "manifest.json")) return as_path;
  return cfg.data_dir / split;
}

struct MissingDataset : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path checked_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw MissingDataset("dataset missing: no manifest.json in " + dir.string());
  return dir;
}

int cmd_gen_data(const RunConfig& cfg, std::ostream& out) {
  make_dirs(cfg.out_dir);
  synth::generate_dataset(cfg.generator, cfg.out_dir);
  write_text_file(cfg.out_dir / "effective_config.txt", format_key_values(cfg.echo()));
  out << "dataset written to " << cfg.out_dir.string() << '\n';
  return kOk;
}

int cmd_train(RunConfig cfg, const std::optional<fs::path>& resume, std::ostream& out) {
  const fs::path train_dir = checked_dataset(cfg.data_dir / "train");
  const DatasetManifest manifest = read_manifest(train_dir / "manifest.json");
  const fs::path labels_path = train_dir / "labels_video.csv";
  if (!fs::exists(labels_path)) throw MissingDataset("dataset missing: no labels_video.csv in " + train_dir.string());
  const LabelTable labels = read_video_labels(labels_path, manifest.category_names);
  const auto samples = train::load_training_samples(manifest, labels, cfg.train.grid_length);
  if (samples.empty()) throw MissingDataset("dataset missing: training split has no videos");

  std::unique_ptr<EventCentricModel> model;
  train::TrainState state;
  fs::path run_dir;
  if (resume) {
    const train::Checkpoint ckpt = train::read_checkpoint(*resume);
    model = train::model_from_checkpoint(ckpt);
    state = train::train_state_from_checkpoint(ckpt);
    cfg.model = model->config();
    run_dir = resume->parent_path();
    if (run_dir.empty()) run_dir = ".";
    write_text_file(run_dir / ("effective_config_resume_epoch" + std::to_string(state.next_epoch) + ".txt"),
                    format_key_values(cfg.echo()));
  } else {
    // Input shapes come from the data itself.
    cfg.model.audio_dim = samples.front().audio.cols();
    cfg.model.visual_dim = samples.front().visual.cols();
    cfg.model.num_classes = manifest.num_classes();
    cfg.validate();
    model = std::make_unique<EventCentricModel>(cfg.model);
    run_dir = unique_run_dir(cfg.out_dir, cfg.seed);
    make_dirs(run_dir);
    write_text_file(run_dir / "effective_config.txt", format_key_values(cfg.echo()));
    write_text_file(run_dir / "epoch_log.csv", train::epoch_log_header());
  }
  out << "run directory " << run_dir.string() << '\n';

  KeyValues meta;
  train::echo_train_config(cfg.train, meta);
  meta["data_dir"] = cfg.data_dir.string();
  const fs::path log_path = run_dir / "epoch_log.csv";
  train::train(*model, samples, cfg.train, state,
               [&](const train::EpochRecord& rec, const EventCentricModel& m, const train::TrainState& st) {
                 append_text_file(log_path, train::format_epoch_record(rec));
                 train::write_checkpoint(run_dir / "checkpoint.ckpt", train::make_checkpoint(m, st, meta));
                 out << "epoch " << rec.epoch << " L_total " << format_fixed(rec.loss.total, 6) << '\n';
               });
  return kOk;
}

Index checkpoint_grid(const train::Checkpoint& ckpt, const RunConfig& cfg) {
  auto it = ckpt.metadata.find("grid_length");
  return it == ckpt.metadata.end() ? cfg.train.grid_length : parse_int(it->second, "checkpoint grid_length");
}

int cmd_eval(const RunConfig& cfg, const std::optional<fs::path>& checkpoint, const std::string& split, bool oracle,
             std::optional<fs::path> out_dir, std::ostream& out) {
  if (!oracle && !checkpoint) throw ConfigError("eval needs --checkpoint (or --oracle-scores)");
  std::optional<train::Checkpoint> ckpt;
  if (checkpoint) ckpt = train::read_checkpoint(*checkpoint);
  const Index grid = ckpt ? checkpoint_grid(*ckpt, cfg) : cfg.train.grid_length;
  const fs::path dir = checked_dataset(split_dir(cfg, split));
  const eval::EvalSet set = eval::load_eval_set(dir, grid);

  std::vector<eval::VideoEval> scores;
  if (oracle) {
    scores = eval::score_with_oracle(set);
  } else {
    auto model = train::model_from_checkpoint(*ckpt, /*with_interaction=*/false);
    scores = eval::score_with_model(*model, set);
  }
  const eval::MetricsReport report = eval::compute_metrics(scores, cfg.theta, cfg.iou_threshold);
  out << eval::format_report_table(report);

  if (!out_dir) out_dir = checkpoint ? checkpoint->parent_path() : cfg.out_dir;
  if (out_dir->empty()) out_dir = ".";
  make_dirs(*out_dir);
  const fs::path report_path = *out_dir / ("report_" + fs::path(split).filename().string() + ".txt");
  write_text_file(report_path, eval::format_report_key_values(report));
  out << "report written to " << report_path.string() << '\n';
  return kOk;
}

int cmd_predict(const RunConfig& cfg, const fs::path& checkpoint, const std::string& split,
                std::optional<fs::path> out_dir, std::ostream& out) {
  const train::Checkpoint ckpt = train::read_checkpoint(checkpoint);
  const Index grid = checkpoint_grid(ckpt, cfg);
  const fs::path dir = checked_dataset(split_dir(cfg, split));
  const DatasetManifest manifest = read_manifest(dir / "manifest.json");
  auto model = train::model_from_checkpoint(ckpt, /*with_interaction=*/false);
  const auto& names = manifest.category_names;
  if (model->config().num_classes != manifest.num_classes())
    throw SchemaError("checkpoint and split disagree on the number of categories");

  std::ostringstream scores, segments;
  scores << "video_id,modality,snippet";
  for (const auto& n : names) scores << ',' << n;
  scores << '\n';
  segments << "video_id,modality,category,start,end\n";
  const LabelTable no_labels;
  for (const auto& entry : manifest.entries) {
    const VideoSample s = load_video_sample(manifest, entry, no_labels);
    const SnippetScores p =
        model->predict(resample_sequence(s.audio_feats, grid), resample_sequence(s.visual_feats, grid));
    const double sec_per_cell = static_cast<double>(s.length()) / static_cast<double>(grid);
    for (Modality m : {Modality::audio, Modality::visual}) {
      const Matrix& probs = m == Modality::audio ? p.audio : p.visual;
      for (Index t = 0; t < probs.rows(); ++t) {
        scores << entry.video_id << ',' << to_string(m) << ',' << t;
        for (Index c = 0; c < probs.cols(); ++c) scores << ',' << format_fixed(probs(t, c), 6);
        scores << '\n';
      }
      const auto view = m == Modality::audio ? eval::View::audio : eval::View::visual;
      for (const auto& seg : eval::snippets_to_segments(probs, cfg.theta, view)) {
        segments << entry.video_id << ',' << to_string(m) << ',' << names[static_cast<std::size_t>(seg.category)]
                 << ',' << format_double(static_cast<double>(seg.start) * sec_per_cell) << ','
                 << format_double(static_cast<double>(seg.end) * sec_per_cell) << '\n';
      }
    }
  }
  if (!out_dir) out_dir = checkpoint.parent_path();
  if (out_dir->empty()) out_dir = ".";
  make_dirs(*out_dir);
  const std::string stem = "predictions_" + fs::path(split).filename().string();
  write_text_file(*out_dir / (stem + "_scores.csv"), scores.str());
  write_text_file(*out_dir / (stem + "_segments.csv"), segments.str());
  out << "predictions written to " << (*out_dir / stem).string() << "_{scores,segments}.csv\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event-centric audio-visual event localization"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path, out_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_option("--seed", seed, "seed override");
  app.add_option("--out", out_path, "output directory");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset into --out");

  auto* trn = app.add_subcommand("train", "train on <data_dir>/train");
  std::optional<std::string> data_path, resume_path;
  std::optional<int> epochs;
  trn->add_option("--data", data_path, "dataset root");
  trn->add_option("--epochs", epochs, "epoch count override");
  trn->add_option("--resume", resume_path, "checkpoint to continue from");

  auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  std::optional<std::string> checkpoint_path;
  std::string split = "test";
  bool oracle = false;
  evl->add_option("--checkpoint", checkpoint_path, "checkpoint file");
  evl->add_option("--split", split, "split name under the data dir, or a split directory");
  evl->add_option("--data", data_path, "dataset root");
  evl->add_flag("--oracle-scores", oracle, "score the ground truth itself (debug)");

  auto* prd = app.add_subcommand("predict", "export snippet scores and segments");
  prd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  prd->add_option("--split", split, "split name under the data dir, or a split directory");
  prd->add_option("--data", data_path, "dataset root");

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kConfigOrIo;
  }

  try {
    Overrides ov;
    ov.seed = seed;
    if (out_path) ov.out = fs::path(*out_path);
    if (data_path) ov.data = fs::path(*data_path);
    ov.epochs = epochs;
    std::optional<fs::path> cfg_file;
    if (config_path) cfg_file = fs::path(*config_path);
    const RunConfig cfg = load_run_config(cfg_file, ov);

    std::optional<fs::path> out_override;
    if (out_path) out_override = fs::path(*out_path);
    std::optional<fs::path> ckpt;
    if (checkpoint_path) ckpt = fs::path(*checkpoint_path);

    if (gen->parsed()) return cmd_gen_data(cfg, out);
    if (trn->parsed()) {
      std::optional<fs::path> resume;
      if (resume_path) resume = fs::path(*resume_path);
      return cmd_train(cfg, resume, out);
    }
    if (evl->parsed()) return cmd_eval(cfg, ckpt, split, oracle, out_override, out);
    if (prd->parsed()) return cmd_predict(cfg, *ckpt, split, out_override, out);
    return kConfigOrIo;
  } catch (const MissingDataset& e) {
    err << "error: " << e.what() << '\n';
    return kMissingDataset;
  } catch (const train::NonFiniteLoss& e) {
    err << "error: " << e.what() << '\n';
    return kNonFiniteLoss;
  } catch (const eval::MissingEventAnnotations& e) {
    err << "error: " << e.what() << '\n';
    return kMissingAnnotations;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigOrIo;
  }
}

}  // namespace mtel::cli
