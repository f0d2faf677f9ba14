#pragma once

// Run configuration, on-disk window store and the command implementations
// behind the CLI. Every command reads and writes under a single workdir.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "transecg/data_io.hpp"
#include "transecg/explain.hpp"
#include "transecg/param_io.hpp"
#include "transecg/signal.hpp"
#include "transecg/training.hpp"
#include "transecg/vit.hpp"

namespace transecg {

namespace fs = std::filesystem;

struct RunConfig {
  std::uint64_t seed = 0;
  std::string task = "gender";

  // paths, relative to the workdir
  std::string manifest = "data/manifest.json";
  std::string checkpoint = "model.tecg";

  // preprocessing
  double low_hz = 0.5;
  double high_hz = 40.0;
  int filter_order = 4;
  std::size_t median_kernel = 5;
  double fs_target = 250.0;
  std::size_t seq_len = 2000;
  std::size_t stride = 2000;

  // model
  std::size_t patch_size = 20;
  std::size_t hidden_dim = 256;
  std::size_t n_layers = 6;
  std::size_t n_heads = 6;
  std::size_t mlp_dim = 128;
  double survival_prob = 0.8;
  double ln_eps = 1e-6;

  // optimization
  double lr = 1e-4;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 45;
  bool early_stopping = true;
  std::size_t patience = 10;
  double scheduler_factor = 0.5;
  std::size_t scheduler_patience = 5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double train_frac = 0.70;
  double val_frac = 0.15;
  double test_frac = 0.15;

  // synthetic corpus
  std::size_t synth_subjects = 8;
  double synth_duration_s = 64.0;
  double synth_noise_std = 0.01;

  NLOHMANN_DEFINE_TYPE_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, task, manifest, checkpoint, low_hz, high_hz,
                                              filter_order, median_kernel, fs_target, seq_len, stride, patch_size,
                                              hidden_dim, n_layers, n_heads, mlp_dim, survival_prob, ln_eps, lr,
                                              batch_size, max_epochs, early_stopping, patience, scheduler_factor,
                                              scheduler_patience, weight_decay, beta1, beta2, adam_eps, train_frac,
                                              val_frac, test_frac, synth_subjects, synth_duration_s, synth_noise_std)

  VitConfig vit(std::size_t n_classes) const {
    VitConfig c;
    c.seq_len = seq_len;
    c.patch_size = patch_size;
    c.hidden_dim = hidden_dim;
    c.n_layers = n_layers;
    c.n_heads = n_heads;
    c.mlp_dim = mlp_dim;
    c.n_classes = n_classes;
    c.survival_prob = survival_prob;
    c.ln_eps = ln_eps;
    return c;
  }

  PreprocessOptions preprocess_options() const {
    PreprocessOptions o;
    o.band = FilterSpec{low_hz, high_hz, filter_order, 0.0};
    o.median_kernel = median_kernel;
    o.fs_target = fs_target;
    o.seq_len = seq_len;
    o.stride = stride;
    return o;
  }

  TrainOptions train_options() const {
    TrainOptions t;
    t.lr = lr;
    t.batch_size = batch_size;
    t.max_epochs = max_epochs;
    t.early_stopping = early_stopping;
    t.early_stop_patience = patience;
    t.scheduler_factor = scheduler_factor;
    t.scheduler_patience = scheduler_patience;
    t.weight_decay = weight_decay;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.seed = seed;
    t.top_k = parse_task(task) == Task::participant_id ? 4 : 0;
    return t;
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw std::invalid_argument("config field '" + field + "' " + why);
    };
    try {
      parse_task(task);
    } catch (const std::invalid_argument& e) {
      fail("task", e.what());
    }
    if (manifest.empty()) fail("manifest", "must not be empty");
    if (checkpoint.empty()) fail("checkpoint", "must not be empty");
    if (!(low_hz > 0.0)) fail("low_hz", "must be positive");
    if (!(high_hz > low_hz)) fail("high_hz", "must exceed low_hz");
    if (filter_order < 1) fail("filter_order", "must be >= 1");
    if (median_kernel == 0 || median_kernel % 2 == 0) fail("median_kernel", "must be odd and positive");
    if (!(fs_target > 2.0 * high_hz)) fail("fs_target", "must exceed twice high_hz");
    if (stride == 0) fail("stride", "must be positive");
    if (!(lr > 0.0)) fail("lr", "must be positive");
    if (batch_size == 0) fail("batch_size", "must be positive");
    if (max_epochs == 0) fail("max_epochs", "must be positive");
    if (!(scheduler_factor > 0.0 && scheduler_factor <= 1.0)) fail("scheduler_factor", "must be in (0, 1]");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
    if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
    if (!(train_frac > 0.0 && train_frac < 1.0)) fail("train_frac", "must be in (0, 1)");
    if (!(val_frac > 0.0 && val_frac < 1.0)) fail("val_frac", "must be in (0, 1)");
    if (!(test_frac > 0.0 && test_frac < 1.0)) fail("test_frac", "must be in (0, 1)");
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) fail("test_frac", "fractions must sum to 1");
    if (synth_subjects == 0) fail("synth_subjects", "must be positive");
    if (!(synth_duration_s > 0.0)) fail("synth_duration_s", "must be positive");
    if (!(synth_noise_std >= 0.0)) fail("synth_noise_std", "must be >= 0");
    vit(2).validate();
  }
};

// Merges `overrides` (flat object) onto `base`; unknown keys are an error.
inline RunConfig apply_json(const RunConfig& base, const nlohmann::json& overrides) {
  if (!overrides.is_object()) throw std::invalid_argument("config must be a JSON object");
  nlohmann::json j = base;
  for (const auto& [k, v] : overrides.items()) {
    if (!j.contains(k)) throw std::invalid_argument("unknown config field '" + k + "'");
    j[k] = v;
  }
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config '" + path.string() + "': " + e.what());
  }
  return apply_json(RunConfig{}, j);
}

// "key=value"; the value is parsed as JSON when possible, otherwise taken as a string.
inline RunConfig apply_override(const RunConfig& base, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
  nlohmann::json v = nlohmann::json::parse(val, nullptr, false);
  if (v.is_discarded()) v = val;
  nlohmann::json j = base;
  if (j.contains(key) && j[key].is_string() && !v.is_string()) v = val;
  try {
    return apply_json(base, nlohmann::json{{key, v}});
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    if (msg.find(key) != std::string::npos) throw;
    throw std::invalid_argument("config field '" + key + "': " + msg);
  }
}

// ---------------------------------------------------------------------------
// Window store: windows.bin (f64 LE, seq_len per window) + windows.json.

struct StoredWindow {
  EcgWindow window;
  std::optional<Gender> gender;
  std::optional<int> age_years;
};

struct WindowStore {
  std::size_t seq_len = 0;
  double fs = 0.0;
  std::vector<StoredWindow> windows;
};

inline void save_window_store(const fs::path& dir, const WindowStore& s) {
  fs::create_directories(dir);
  std::ofstream bin(dir / "windows.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("cannot write '" + (dir / "windows.bin").string() + "'");
  nlohmann::json idx = nlohmann::json::array();
  for (const auto& sw : s.windows) {
    if (sw.window.samples.size() != s.seq_len) throw std::logic_error("window store: inconsistent window length");
    for (double v : sw.window.samples) nn::detail::write_le<double>(bin, v);
    idx.push_back({{"subject_id", sw.window.subject_id},
                   {"offset", sw.window.source_offset},
                   {"gender", sw.gender ? nlohmann::json(std::string(gender_name(*sw.gender))) : nlohmann::json(nullptr)},
                   {"age_years", sw.age_years ? nlohmann::json(*sw.age_years) : nlohmann::json(nullptr)}});
  }
  if (!bin) throw std::runtime_error("window store: write failed");
  std::ofstream js(dir / "windows.json", std::ios::trunc);
  js << nlohmann::json{{"seq_len", s.seq_len}, {"fs", s.fs}, {"windows", idx}}.dump(2) << '\n';
  if (!js) throw std::runtime_error("window store: index write failed");
}

inline WindowStore load_window_store(const fs::path& dir) {
  std::ifstream js(dir / "windows.json");
  if (!js) throw std::runtime_error("window store not found in '" + dir.string() + "' (run preprocess first)");
  const auto j = nlohmann::json::parse(js);
  WindowStore s;
  s.seq_len = j.at("seq_len").get<std::size_t>();
  s.fs = j.at("fs").get<double>();
  std::ifstream bin(dir / "windows.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("window store: missing windows.bin");
  for (const auto& w : j.at("windows")) {
    StoredWindow sw;
    sw.window.subject_id = w.at("subject_id").get<std::string>();
    sw.window.source_offset = w.at("offset").get<std::size_t>();
    sw.window.fs = s.fs;
    if (!w.at("gender").is_null()) sw.gender = parse_gender(w["gender"].get<std::string>());
    if (!w.at("age_years").is_null()) sw.age_years = w["age_years"].get<int>();
    sw.window.samples.resize(s.seq_len);
    for (auto& v : sw.window.samples)
      if (!nn::detail::read_le(bin, v)) throw std::runtime_error("window store: windows.bin is truncated");
    s.windows.push_back(std::move(sw));
  }
  return s;
}

struct LabeledSet {
  LabelVocab vocab;
  std::vector<LabeledWindow> windows;
};

inline LabeledSet label_windows(const WindowStore& store, Task task) {
  std::vector<EcgRecord> meta;
  std::set<std::string> seen;
  for (const auto& sw : store.windows)
    if (seen.insert(sw.window.subject_id).second)
      meta.push_back(EcgRecord{sw.window.subject_id, {}, store.fs, sw.gender, sw.age_years});
  LabeledSet out;
  out.vocab = build_vocab(meta, task);
  for (const auto& sw : store.windows)
    if (auto l = out.vocab.label_for(sw.window.subject_id, sw.gender, sw.age_years))
      out.windows.push_back({sw.window, *l});
  if (out.windows.empty()) throw std::runtime_error("no windows carry labels for task '" + std::string(task_name(task)) + "'");
  return out;
}

// ---------------------------------------------------------------------------
// Commands. Each returns its one-line summary.

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  os << s;
}

// Subjects alternate male/female; females get a taller T wave. Each subject
// also draws its own rate and morphology offsets.
inline std::string cmd_synth(const RunConfig& cfg, const fs::path& workdir) {
  cfg.validate();
  const fs::path manifest_path = workdir / cfg.manifest;
  fs::create_directories(manifest_path.parent_path());
  static constexpr std::array<int, 8> kAges = {12, 27, 43, 58, 72, 31, 47, 61};
  DatasetManifest m;
  m.dataset = "synthetic";
  std::size_t total = 0;
  for (std::size_t k = 0; k < cfg.synth_subjects; ++k) {
    std::mt19937_64 rng(splitmix64(cfg.seed ^ splitmix64(1000 + k)));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    char id[16];
    std::snprintf(id, sizeof id, "S%02zu", k + 1);
    SyntheticEcgSpec s;
    s.subject_id = id;
    s.gender = k % 2 == 0 ? Gender::male : Gender::female;
    s.age_years = kAges[k % kAges.size()];
    s.bpm = 60.0 + 20.0 * u(rng);
    s.duration_s = cfg.synth_duration_s;
    s.fs = cfg.fs_target;
    s.noise_std = cfg.synth_noise_std;
    s.seed = splitmix64(cfg.seed + k);
    s.phase_s = u(rng) * 60.0 / s.bpm;
    auto& w = s.waves;
    w[static_cast<std::size_t>(Wave::p)].amplitude *= 0.7 + 0.6 * u(rng);
    w[static_cast<std::size_t>(Wave::r)].width_ms = 10.0 + 4.0 * u(rng);
    w[static_cast<std::size_t>(Wave::s)].amplitude *= 0.6 + 0.8 * u(rng);
    w[static_cast<std::size_t>(Wave::t)].amplitude = (*s.gender == Gender::female ? 0.5 : 0.25) * (0.85 + 0.3 * u(rng));
    w[static_cast<std::size_t>(Wave::t)].offset_ms = 230.0 + 40.0 * u(rng);
    const auto syn = synthesize(s);
    const std::string csv = std::string(id) + ".csv";
    write_samples_csv(manifest_path.parent_path() / csv, syn.record.samples);
    m.entries.push_back({s.subject_id, csv, s.fs, s.gender, s.age_years});
    total += syn.record.samples.size();
  }
  save_manifest(manifest_path, m);
  return "synth: " + std::to_string(m.entries.size()) + " subjects, " + std::to_string(total) + " samples -> " +
         manifest_path.string();
}

inline std::string cmd_preprocess(const RunConfig& cfg, const fs::path& workdir) {
  cfg.validate();
  const auto manifest = load_manifest(workdir / cfg.manifest);
  const auto opt = cfg.preprocess_options();
  WindowStore store;
  store.seq_len = cfg.seq_len;
  store.fs = cfg.fs_target;
  for (const auto& e : manifest.entries) {
    const auto rec = load_record(e);
    for (auto& w : preprocess(rec, opt)) store.windows.push_back({std::move(w), rec.gender, rec.age_years});
  }
  if (store.windows.empty()) throw std::runtime_error("preprocess: no windows produced");
  save_window_store(workdir / "windows", store);
  return "preprocess: " + std::to_string(manifest.entries.size()) + " records -> " +
         std::to_string(store.windows.size()) + " windows of " + std::to_string(cfg.seq_len) + " samples";
}

struct PreparedData {
  Task task;
  LabeledSet set;
  SplitPlan plan;
};

inline PreparedData prepare(const RunConfig& cfg, const fs::path& workdir) {
  PreparedData d{parse_task(cfg.task), {}, {}};
  const auto store = load_window_store(workdir / "windows");
  if (store.seq_len != cfg.seq_len)
    throw std::invalid_argument("config field 'seq_len' (" + std::to_string(cfg.seq_len) +
                                ") differs from the window store (" + std::to_string(store.seq_len) + ")");
  d.set = label_windows(store, d.task);
  d.plan = make_split(d.set.windows, d.task, cfg.seed, cfg.train_frac, cfg.val_frac);
  return d;
}

inline std::string fmt_fixed(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

inline std::string cmd_train(const RunConfig& cfg, const fs::path& workdir) {
  cfg.validate();
  const auto d = prepare(cfg, workdir);
  Checkpoint ck;
  ck.task = std::string(task_name(d.task));
  ck.vocab = d.set.vocab.labels;
  ck.model.config = cfg.vit(d.set.vocab.size());
  ck.model.params = init_params(ck.model.config, cfg.seed);
  const auto report = train(ck.model, d.set.windows, d.plan, cfg.train_options());
  save_checkpoint(workdir / cfg.checkpoint, ck);
  write_text(workdir / "train_report.json", to_json(report).dump(2) + "\n");
  std::string line = "train: task " + ck.task + ", " + std::to_string(report.epochs.size()) + " epochs, best epoch " +
                     std::to_string(report.best_epoch) + ", val acc " + fmt_fixed(report.best_val_accuracy);
  if (report.test) line += ", test acc " + fmt_fixed(report.test->accuracy);
  return line;
}

inline Checkpoint require_checkpoint(const RunConfig& cfg, const fs::path& workdir) {
  const auto path = workdir / cfg.checkpoint;
  if (!fs::exists(path)) throw std::runtime_error("checkpoint '" + path.string() + "' not found (run train first)");
  auto ck = load_checkpoint(path);
  if (ck.task != cfg.task && parse_task(ck.task) != parse_task(cfg.task))
    throw std::invalid_argument("checkpoint was trained for task '" + ck.task + "', config asks for '" + cfg.task + "'");
  return ck;
}

inline std::string cmd_evaluate(const RunConfig& cfg, const fs::path& workdir) {
  cfg.validate();
  const auto ck = require_checkpoint(cfg, workdir);
  const auto d = prepare(cfg, workdir);
  if (d.set.vocab.labels != ck.vocab) throw std::runtime_error("evaluate: label vocabulary differs from the checkpoint's");
  const auto& idx = d.plan.test.empty() ? d.plan.val : d.plan.test;
  const auto ev = evaluate(ck.model, d.set.windows, idx, cfg.batch_size, cfg.train_options().top_k);
  auto j = to_json(ev.metrics);
  j["task"] = ck.task;
  j["labels"] = ck.vocab;
  j["loss"] = ev.loss;
  write_text(workdir / "metrics.json", j.dump(2) + "\n");
  return "evaluate: task " + ck.task + ", " + std::to_string(ev.metrics.n) + " test windows, accuracy " +
         fmt_fixed(ev.metrics.accuracy) + ", macro F1 " + fmt_fixed(ev.metrics.f1);
}

// Attributes every test window, writes the aggregate report plus per-head
// maps and the SVG for the first attributable window.
inline std::string cmd_explain(const RunConfig& cfg, const fs::path& workdir) {
  cfg.validate();
  const auto ck = require_checkpoint(cfg, workdir);
  const auto d = prepare(cfg, workdir);
  const auto& idx = d.plan.test.empty() ? d.plan.val : d.plan.test;
  std::vector<AttributionReport> reports;
  std::optional<WindowExplanation> first;
  std::size_t first_index = 0;
  for (std::size_t i : idx) {
    try {
      auto ex = explain_window(ck.model, d.set.windows[i].window, ck.task);
      reports.push_back(ex.report);
      if (!first) {
        first = std::move(ex);
        first_index = i;
      }
    } catch (const std::exception& e) {
      warn("window " + d.set.windows[i].window.subject_id + "@" +
           std::to_string(d.set.windows[i].window.source_offset) + ": " + e.what());
    }
  }
  if (reports.empty()) throw std::runtime_error("explain: no window could be attributed");
  const auto agg = aggregate(reports);
  const auto dir = workdir / "explain";
  emit_report(dir, agg, first->importance, d.set.windows[first_index].window.samples, ck.model.config.patch_size,
              first->intervals);
  std::string line = "explain: task " + ck.task + ", " + std::to_string(agg.n_windows) + " windows attributed";
  if (!agg.top3.empty()) line += ", top feature " + agg.top3.front().name + " " + fmt_fixed(agg.top3.front().percent, 2) + "%";
  return line + " -> " + (dir / "attribution.json").string();
}

}  // namespace transecg
