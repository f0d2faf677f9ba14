#pragma once

// Dataset ingestion (JSON manifest + one-column CSV), label vocabularies and a
// Gaussian-bump synthetic ECG generator with exact ground truth.
//
// Manifest:
//   {"dataset": "...",
//    "records": [{"subject_id": "...", "csv": "rel/or/abs.csv", "fs": 250,
//                 "gender": "male"|"female"|null, "age_years": 42|null}]}
// CSV: optional header line "amplitude", then one decimal value per line.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "transecg/log.hpp"
#include "transecg/signal.hpp"

namespace transecg {

enum class Task { gender, age_group, participant_id };

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::gender: return "gender";
    case Task::age_group: return "age";
    case Task::participant_id: return "id";
  }
  return "?";
}

inline Task parse_task(std::string_view s) {
  if (s == "gender") return Task::gender;
  if (s == "age" || s == "age_group") return Task::age_group;
  if (s == "id" || s == "participant_id") return Task::participant_id;
  throw std::invalid_argument("unknown task '" + std::string(s) + "' (expected gender|age|id)");
}

inline std::string_view gender_name(Gender g) { return g == Gender::male ? "male" : "female"; }

inline Gender parse_gender(std::string_view s) {
  if (s == "male") return Gender::male;
  if (s == "female") return Gender::female;
  throw std::invalid_argument("unknown gender '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Manifest and CSV

struct ManifestEntry {
  std::string subject_id;
  std::filesystem::path csv_path;  // resolved against the manifest directory
  double fs = 0.0;
  std::optional<Gender> gender;
  std::optional<int> age_years;
};

struct DatasetManifest {
  std::string dataset;
  std::vector<ManifestEntry> entries;
};

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("manifest '" + path.string() + "': " + e.what());
  }
  DatasetManifest m;
  m.dataset = j.value("dataset", "");
  if (!j.contains("records") || !j["records"].is_array())
    throw std::runtime_error("manifest '" + path.string() + "': missing 'records' array");
  const auto base = path.parent_path();
  std::set<std::string> seen;
  std::size_t idx = 0;
  for (const auto& r : j["records"]) {
    const std::string where = "manifest record " + std::to_string(idx++);
    if (!r.contains("subject_id") || !r.contains("csv") || !r.contains("fs"))
      throw std::runtime_error(where + ": requires subject_id, csv and fs");
    ManifestEntry e;
    e.subject_id = r.at("subject_id").get<std::string>();
    if (!seen.insert(e.subject_id).second)
      throw std::runtime_error("manifest: duplicate subject_id '" + e.subject_id + "'");
    std::filesystem::path csv = r.at("csv").get<std::string>();
    e.csv_path = csv.is_absolute() ? csv : base / csv;
    e.fs = r.at("fs").get<double>();
    if (!(e.fs > 0.0)) throw std::runtime_error(where + ": fs must be positive");
    if (r.contains("gender") && !r["gender"].is_null()) e.gender = parse_gender(r["gender"].get<std::string>());
    if (r.contains("age_years") && !r["age_years"].is_null()) {
      e.age_years = r["age_years"].get<int>();
      if (*e.age_years < 0) throw std::runtime_error(where + ": negative age_years");
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& e : m.entries) {
    nlohmann::json r;
    r["subject_id"] = e.subject_id;
    r["csv"] = e.csv_path.generic_string();
    r["fs"] = e.fs;
    r["gender"] = e.gender ? nlohmann::json(std::string(gender_name(*e.gender))) : nlohmann::json(nullptr);
    r["age_years"] = e.age_years ? nlohmann::json(*e.age_years) : nlohmann::json(nullptr);
    recs.push_back(std::move(r));
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest '" + path.string() + "'");
  os << nlohmann::json{{"dataset", m.dataset}, {"records", recs}}.dump(2) << '\n';
}

inline std::vector<double> read_samples_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open sample file '" + path.string() + "'");
  std::vector<double> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view s = line;
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    if (s.empty()) continue;
    if (lineno == 1 && s == "amplitude") continue;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": non-numeric sample '" +
                               std::string(s) + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::runtime_error(path.string() + ": no samples");
  return out;
}

// Shortest round-trip decimal per value.
inline void write_samples_csv(const std::filesystem::path& path, std::span<const double> samples) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write sample file '" + path.string() + "'");
  os << "amplitude\n";
  std::array<char, 64> buf{};
  for (double v : samples) {
    const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    os.write(buf.data(), ptr - buf.data());
    os.put('\n');
  }
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline EcgRecord load_record(const ManifestEntry& e) {
  EcgRecord r;
  r.subject_id = e.subject_id;
  r.fs = e.fs;
  r.gender = e.gender;
  r.age_years = e.age_years;
  r.samples = read_samples_csv(e.csv_path);
  r.validate();
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic ECG

struct WaveSpec {
  double amplitude = 0.0;  // mV
  double width_ms = 10.0;  // Gaussian sigma
  double offset_ms = 0.0;  // relative to the R anchor
};

enum class Wave { p = 0, q, r, s, t };

inline constexpr std::array<WaveSpec, 5> kDefaultWaves = {{
    {0.12, 25.0, -180.0},  // P
    {-0.10, 10.0, -30.0},  // Q
    {1.00, 12.0, 0.0},     // R
    {-0.15, 10.0, 30.0},   // S
    {0.30, 60.0, 250.0},   // T
}};

struct SyntheticEcgSpec {
  std::string subject_id = "synthetic";
  double bpm = 60.0;
  double duration_s = 8.0;
  double fs = 250.0;
  std::array<WaveSpec, 5> waves = kDefaultWaves;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  double phase_s = 0.0;  // time of the first R anchor
  std::optional<Gender> gender;
  std::optional<int> age_years;

  void validate() const {
    if (!(bpm >= 30.0 && bpm <= 220.0)) throw std::invalid_argument("synthetic spec: bpm must be in [30, 220]");
    if (!(fs >= 100.0)) throw std::invalid_argument("synthetic spec: fs must be >= 100");
    if (!(duration_s > 0.0)) throw std::invalid_argument("synthetic spec: duration must be positive");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("synthetic spec: noise_std must be >= 0");
    for (const auto& w : waves)
      if (!(w.width_ms > 0.0)) throw std::invalid_argument("synthetic spec: wave widths must be positive");
  }
};

// Wave centres of one beat as (rounded) sample indices; may fall outside the
// record for beats near its edges.
struct BeatTruth {
  std::array<std::int64_t, 5> centre{};
  std::int64_t operator[](Wave w) const { return centre[static_cast<std::size_t>(w)]; }
};

struct SyntheticEcg {
  EcgRecord record;
  std::vector<std::size_t> r_peaks;  // beats whose R lies inside the record
  std::vector<BeatTruth> beats;      // same beats, all wave centres
};

inline SyntheticEcg synthesize(const SyntheticEcgSpec& spec) {
  spec.validate();
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * spec.fs));
  const double rr = 60.0 / spec.bpm;
  SyntheticEcg out;
  out.record.subject_id = spec.subject_id;
  out.record.fs = spec.fs;
  out.record.gender = spec.gender;
  out.record.age_years = spec.age_years;
  out.record.samples.assign(n, 0.0);
  auto& x = out.record.samples;

  // Anchors one beat beyond either edge so tails spill in naturally.
  const auto k_lo = static_cast<long>(std::floor(-spec.phase_s / rr)) - 1;
  const auto k_hi = static_cast<long>(std::ceil((spec.duration_s - spec.phase_s) / rr)) + 1;
  for (long k = k_lo; k <= k_hi; ++k) {
    const double anchor = spec.phase_s + static_cast<double>(k) * rr;
    for (const auto& w : spec.waves) {
      const double c = (anchor + w.offset_ms / 1000.0) * spec.fs;
      const double sigma = w.width_ms / 1000.0 * spec.fs;
      const auto lo = static_cast<long>(std::floor(c - 8.0 * sigma));
      const auto hi = static_cast<long>(std::ceil(c + 8.0 * sigma));
      for (long i = std::max(0L, lo); i <= std::min(static_cast<long>(n) - 1, hi); ++i) {
        const double d = (static_cast<double>(i) - c) / sigma;
        x[static_cast<std::size_t>(i)] += w.amplitude * std::exp(-0.5 * d * d);
      }
    }
    const auto r_idx = std::llround(anchor * spec.fs);
    if (r_idx >= 0 && r_idx < static_cast<long long>(n)) {
      BeatTruth bt;
      for (std::size_t w = 0; w < 5; ++w)
        bt.centre[w] = std::llround((anchor + spec.waves[w].offset_ms / 1000.0) * spec.fs);
      out.beats.push_back(bt);
      out.r_peaks.push_back(static_cast<std::size_t>(r_idx));
    }
  }
  if (spec.noise_std > 0.0) {
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (double& v : x) v += noise(rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Label vocabularies

inline constexpr std::array<std::string_view, 5> kAgeGroups = {"0-18", "19-35", "36-50", "51-65", "66+"};

// Upper edges inclusive: 18 -> "0-18", 19 -> "19-35", 66 -> "66+".
inline std::size_t age_group(int age_years) {
  if (age_years < 0) throw std::invalid_argument("age_group: negative age");
  if (age_years <= 18) return 0;
  if (age_years <= 35) return 1;
  if (age_years <= 50) return 2;
  if (age_years <= 65) return 3;
  return 4;
}

struct LabelVocab {
  Task task = Task::gender;
  std::vector<std::string> labels;

  std::size_t size() const { return labels.size(); }

  std::optional<std::size_t> index_of(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == label) return i;
    return std::nullopt;
  }

  // Class index for a subject, or nullopt when the needed metadata is absent.
  std::optional<std::size_t> label_for(const std::string& subject_id, std::optional<Gender> gender,
                                       std::optional<int> age_years) const {
    switch (task) {
      case Task::gender:
        if (!gender) return std::nullopt;
        return *gender == Gender::male ? 0 : 1;
      case Task::age_group:
        if (!age_years) return std::nullopt;
        return age_group(*age_years);
      case Task::participant_id: return index_of(subject_id);
    }
    return std::nullopt;
  }

  std::optional<std::size_t> label_for(const EcgRecord& r) const {
    return label_for(r.subject_id, r.gender, r.age_years);
  }
};

// gender -> {male: 0, female: 1}; age -> five bins; id -> sorted subject ids.
inline LabelVocab build_vocab(std::span<const EcgRecord> records, Task task) {
  LabelVocab v;
  v.task = task;
  switch (task) {
    case Task::gender: v.labels = {"male", "female"}; break;
    case Task::age_group: v.labels.assign(kAgeGroups.begin(), kAgeGroups.end()); break;
    case Task::participant_id: {
      std::set<std::string> ids;
      for (const auto& r : records) ids.insert(r.subject_id);
      v.labels.assign(ids.begin(), ids.end());
      break;
    }
  }
  for (const auto& r : records)
    if (!v.label_for(r))
      warn("record '" + r.subject_id + "' lacks " + std::string(task_name(task)) + " metadata; excluded");
  return v;
}

}  // namespace transecg
