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

#include "mtel/training.hpp"
#include "mtel/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace mtel::train {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  for (double lr : base_lrs())
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("learning rates must be positive");
  if (lr_step < 1) throw ConfigError("lr_step must be >= 1");
  if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw ConfigError("lr_factor must lie in (0, 1]");
  if (!(event_loss_weight >= 0.0) || !std::isfinite(event_loss_weight))
    throw ConfigError("event_loss_weight must be >= 0");
  if (grid_length < 1) throw ConfigError("grid_length must be >= 1");
}

TrainConfig train_config_from(const KeyValues& kv, TrainConfig c) {
  auto get = [&](const char* key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  auto where = [](const char* key) { return std::string("config key ") + key; };
  auto integer = [&](const char* key, auto& field) {
    if (auto* s = get(key)) field = static_cast<std::decay_t<decltype(field)>>(parse_int(*s, where(key)));
  };
  auto real = [&](const char* key, double& field) {
    if (auto* s = get(key)) field = parse_double(*s, where(key));
  };
  integer("batch_size", c.batch_size);
  integer("epochs", c.epochs);
  real("lr_phase1", c.lr_phase1);
  real("lr_phase2", c.lr_phase2);
  real("lr_phase3", c.lr_phase3);
  integer("lr_step", c.lr_step);
  real("lr_factor", c.lr_factor);
  real("event_loss_weight", c.event_loss_weight);
  integer("grid_length", c.grid_length);
  integer("seed", c.seed);
  return c;
}

void echo_train_config(const TrainConfig& c, KeyValues& out) {
  out["batch_size"] = std::to_string(c.batch_size);
  out["epochs"] = std::to_string(c.epochs);
  out["lr_phase1"] = format_double(c.lr_phase1);
  out["lr_phase2"] = format_double(c.lr_phase2);
  out["lr_phase3"] = format_double(c.lr_phase3);
  out["lr_step"] = std::to_string(c.lr_step);
  out["lr_factor"] = format_double(c.lr_factor);
  out["event_loss_weight"] = format_double(c.event_loss_weight);
  out["grid_length"] = std::to_string(c.grid_length);
  out["seed"] = std::to_string(c.seed);
}

ag::Var phase_loss(const ag::Var& p_audio, const ag::Var& p_visual, const Matrix& y_audio, const Matrix& y_visual) {
  return ag::add(ag::bce_mean(p_audio, y_audio, kBceEps), ag::bce_mean(p_visual, y_visual, kBceEps));
}

ag::Var modality_event_loss(const std::vector<ag::Var>& preds, const std::vector<int>& categories,
                            const Matrix& video_labels) {
  if (preds.size() != categories.size()) throw std::invalid_argument("modality_event_loss: size mismatch");
  if (preds.empty()) return ag::constant(Matrix::Zero(1, 1));
  std::vector<ag::Var> terms;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    Matrix y(1, 1);
    y(0, 0) = video_labels(0, categories[i]);
    terms.push_back(ag::bce_mean(preds[i], y, kBceEps));
  }
  return ag::mean_of(terms);
}

EventLoss event_loss(const std::vector<ag::Var>& audio_preds, const std::vector<int>& audio_categories,
                     const std::vector<ag::Var>& visual_preds, const std::vector<int>& visual_categories,
                     const Matrix& y_audio, const Matrix& y_visual) {
  EventLoss out;
  out.audio = modality_event_loss(audio_preds, audio_categories, y_audio);
  out.visual = modality_event_loss(visual_preds, visual_categories, y_visual);
  out.total = ag::add(out.audio, out.visual);
  return out;
}

double total_loss(double l1, double l2, double l3, double l_e, double alpha) { return l1 + l2 + l3 + alpha * l_e; }

SampleLoss compute_loss(const ForwardResult& r, const Matrix& y_audio, const Matrix& y_visual, double alpha) {
  SampleLoss out;
  ag::Var l1 = phase_loss(r.phase1.audio.video_probs, r.phase1.visual.video_probs, y_audio, y_visual);
  ag::Var total = l1;
  out.parts.l1 = l1.item();
  if (r.has_phase2) {
    ag::Var l2 = phase_loss(r.phase2.audio.video_probs, r.phase2.visual.video_probs, y_audio, y_visual);
    total = ag::add(total, l2);
    out.parts.l2 = l2.item();
  }
  if (r.has_phase3) {
    ag::Var l3 = phase_loss(r.phase3.audio, r.phase3.visual, y_audio, y_visual);
    EventLoss le = event_loss(r.audio_event_preds, r.refined_events.categories(Modality::audio),
                              r.visual_event_preds, r.refined_events.categories(Modality::visual), y_audio, y_visual);
    total = ag::add(total, ag::add(l3, ag::scale(le.total, alpha)));
    out.parts.l3 = l3.item();
    out.parts.l_ea = le.audio.item();
    out.parts.l_ev = le.visual.item();
    out.parts.l_e = out.parts.l_ea + out.parts.l_ev;
  }
  out.parts.total = total_loss(out.parts.l1, out.parts.l2, out.parts.l3, out.parts.l_e, alpha);
  out.total = total;
  return out;
}

double lr_at(int epoch, double base_lr, const TrainConfig& cfg) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  return base_lr * std::pow(cfg.lr_factor, epoch / cfg.lr_step);
}

Adam::Adam(nn::ParameterStore& store, double beta1, double beta2, double eps)
    : store_(store), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::array<double, 3>& lrs) {
  ++state_.step;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
  for (auto& p : store_.params()) {
    if (p->grad.size() == 0) continue;
    Matrix& m = state_.m[p->name];
    Matrix& v = state_.v[p->name];
    if (m.size() == 0) m = Matrix::Zero(p->value.rows(), p->value.cols());
    if (v.size() == 0) v = Matrix::Zero(p->value.rows(), p->value.cols());
    m = beta1_ * m + (1.0 - beta1_) * p->grad;
    v = beta2_ * v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    const double lr = lrs[static_cast<std::size_t>(static_cast<int>(p->phase) - 1)];
    p->value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

std::vector<TrainingSample> load_training_samples(const DatasetManifest& manifest, const LabelTable& labels,
                                                  Index grid_length) {
  std::vector<TrainingSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& entry : manifest.entries) {
    VideoSample s = load_video_sample(manifest, entry, labels);
    TrainingSample t;
    t.video_id = s.video_id;
    t.audio = resample_sequence(s.audio_feats, grid_length);
    t.visual = resample_sequence(s.visual_feats, grid_length);
    t.labels_audio = std::move(s.labels_audio);
    t.labels_visual = std::move(s.labels_visual);
    out.push_back(std::move(t));
  }
  return out;
}

NonFiniteLoss::NonFiniteLoss(const std::string& component, int epoch)
    : std::runtime_error("non-finite loss component " + component + " at epoch " + std::to_string(epoch)),
      component_(component) {}

std::string epoch_log_header() { return "epoch,L_1,L_2,L_3,L_e,L_total,lr_phase1,lr_phase2,lr_phase3\n"; }

std::string format_epoch_record(const EpochRecord& r) {
  std::string line = std::to_string(r.epoch);
  for (double v : {r.loss.l1, r.loss.l2, r.loss.l3, r.loss.l_e, r.loss.total, r.lr[0], r.lr[1], r.lr[2]}) {
    line += ',';
    line += format_double(v);
  }
  return line + '\n';
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

void check_finite(const LossBreakdown& l, int epoch) {
  const std::pair<const char*, double> parts[] = {{"L_1", l.l1},   {"L_2", l.l2},   {"L_3", l.l3},
                                                  {"L_ea", l.l_ea}, {"L_ev", l.l_ev}, {"L_total", l.total}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw NonFiniteLoss(name, epoch);
}

constexpr std::uint64_t kShuffleTag = 0x5155;
constexpr std::uint64_t kDropoutTag = 0xd209;

}  // namespace

std::vector<EpochRecord> train(EventCentricModel& model, const std::vector<TrainingSample>& data,
                               const TrainConfig& cfg, TrainState& state, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.empty()) throw ValidationError("training set is empty");
  Adam adam(model.params());
  adam.state() = state.adam;
  const auto base = cfg.base_lrs();
  std::vector<EpochRecord> records;

  for (int epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    std::array<double, 3> lrs{};
    for (std::size_t i = 0; i < 3; ++i) lrs[i] = lr_at(epoch, base[i], cfg);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = stream(cfg.seed, static_cast<std::uint64_t>(epoch), kShuffleTag);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown sum;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(end - start);
      model.params().zero_grad();
      for (std::size_t pos = start; pos < end; ++pos) {
        const TrainingSample& s = data[order[pos]];
        auto drop_rng = stream(cfg.seed, static_cast<std::uint64_t>(epoch) * 1000003ULL + pos, kDropoutTag);
        nn::ForwardContext ctx;
        ctx.training = true;
        ctx.rng = &drop_rng;
        const ForwardResult r = model.forward(s.audio, s.visual, ctx, true);
        SampleLoss loss = compute_loss(r, s.labels_audio, s.labels_visual, cfg.event_loss_weight);
        check_finite(loss.parts, epoch);
        ag::backward(ag::scale(loss.total, inv_batch));
        sum.l1 += loss.parts.l1;
        sum.l2 += loss.parts.l2;
        sum.l3 += loss.parts.l3;
        sum.l_ea += loss.parts.l_ea;
        sum.l_ev += loss.parts.l_ev;
      }
      adam.step(lrs);
    }

    const double n = static_cast<double>(data.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lrs;
    rec.loss.l1 = sum.l1 / n;
    rec.loss.l2 = sum.l2 / n;
    rec.loss.l3 = sum.l3 / n;
    rec.loss.l_ea = sum.l_ea / n;
    rec.loss.l_ev = sum.l_ev / n;
    rec.loss.l_e = rec.loss.l_ea + rec.loss.l_ev;
    rec.loss.total = total_loss(rec.loss.l1, rec.loss.l2, rec.loss.l3, rec.loss.l_e, cfg.event_loss_weight);
    check_finite(rec.loss, epoch);

    state.next_epoch = epoch + 1;
    state.adam = adam.state();
    records.push_back(rec);
    if (on_epoch) on_epoch(rec, model, state);
  }
  model.params().zero_grad();
  return records;
}

const Matrix* Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

namespace {

constexpr char kCheckpointMagic[9] = "MTELCKPT";
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string bytes, std::filesystem::path path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t offset() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw FormatError(path_.string() + ": truncated checkpoint while reading " + what, pos_);
  }
  std::string bytes_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  const std::string meta = format_key_values(ckpt.metadata);
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, m] : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(m.rows()));
    put_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) {
      const float f = static_cast<float>(m.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  // Write-then-rename keeps a valid checkpoint on disk if we are interrupted.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing", tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("failed writing checkpoint", tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message(), path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint", path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path);
  if (r.text(8, "magic") != std::string(kCheckpointMagic, 8))
    throw FormatError(path.string() + ": not a checkpoint (bad magic)", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version), 8);
  Checkpoint ckpt;
  const std::uint32_t meta_len = r.u32("metadata length");
  ckpt.metadata = parse_key_values(r.text(meta_len, "metadata"), path.string());
  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t t = 0; t < count; ++t) {
    std::string name = r.text(r.u32("name length"), "tensor name");
    const std::uint32_t rows = r.u32("rows");
    const std::uint32_t cols = r.u32("cols");
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.f32("tensor data");
    ckpt.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after checkpoint", r.offset());
  return ckpt;
}

Checkpoint make_checkpoint(const EventCentricModel& model, const TrainState& state, const KeyValues& extra) {
  Checkpoint ckpt;
  ckpt.metadata = extra;
  echo_model_config(model.config(), ckpt.metadata);
  ckpt.metadata["next_epoch"] = std::to_string(state.next_epoch);
  ckpt.metadata["adam_step"] = std::to_string(state.adam.step);
  for (const auto& p : model.params().params()) ckpt.tensors.emplace_back(p->name, p->value);
  for (const auto& [name, m] : state.adam.m) ckpt.tensors.emplace_back("adam.m/" + name, m);
  for (const auto& [name, v] : state.adam.v) ckpt.tensors.emplace_back("adam.v/" + name, v);
  return ckpt;
}

std::unique_ptr<EventCentricModel> model_from_checkpoint(const Checkpoint& ckpt, bool with_interaction) {
  const ModelConfig cfg = model_config_from(ckpt.metadata);
  auto model = std::make_unique<EventCentricModel>(cfg, with_interaction);
  for (auto& p : model->params().params()) {
    const Matrix* m = ckpt.tensor(p->name);
    if (m == nullptr) throw SchemaError("checkpoint lacks parameter " + p->name);
    if (m->rows() != p->value.rows() || m->cols() != p->value.cols())
      throw SchemaError("checkpoint parameter " + p->name + " has the wrong shape");
    p->value = *m;
  }
  return model;
}

TrainState train_state_from_checkpoint(const Checkpoint& ckpt) {
  TrainState s;
  auto get = [&](const char* key) {
    auto it = ckpt.metadata.find(key);
    if (it == ckpt.metadata.end()) throw SchemaError(std::string("checkpoint metadata lacks ") + key);
    return parse_int(it->second, std::string("checkpoint ") + key);
  };
  s.next_epoch = static_cast<int>(get("next_epoch"));
  s.adam.step = get("adam_step");
  for (const auto& [name, m] : ckpt.tensors) {
    if (name.rfind("adam.m/", 0) == 0) s.adam.m[name.substr(7)] = m;
    if (name.rfind("adam.v/", 0) == 0) s.adam.v[name.substr(7)] = m;
  }
  return s;
}

}  // namespace mtel::train
