#pragma once

// Class-token attention -> patch importance -> per-interval attention shares.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "transecg/delineation.hpp"
#include "transecg/vit.hpp"

namespace transecg {

struct PatchImportance {
  std::vector<std::vector<double>> per_head;  // [H][N]
  std::vector<double> importance;             // head mean, [N]
  std::vector<double> head_weights;           // [H], max 1 (empty if not computed)

  std::size_t n_heads() const { return per_head.size(); }
  std::size_t n_patches() const { return importance.size(); }
};

// From one attention map [H, T, T] (or [B, H, T, T] with a batch index):
// row 0 (class token), columns 1..N.
inline PatchImportance importance_from_attention(const nn::Tensor& attn, std::size_t batch_index = 0) {
  std::size_t H = 0, T = 0, base = 0;
  if (attn.rank() == 3) {
    H = attn.dim(0);
    T = attn.dim(1);
  } else if (attn.rank() == 4) {
    if (batch_index >= attn.dim(0)) throw std::out_of_range("importance: batch index out of range");
    H = attn.dim(1);
    T = attn.dim(2);
    base = batch_index * H * T * T;
  } else {
    throw std::invalid_argument("importance: attention must be [H,T,T] or [B,H,T,T], got " +
                                nn::to_string(attn.shape()));
  }
  if (T < 2 || attn.dim(-1) != T) throw std::invalid_argument("importance: attention maps must be square with T >= 2");
  const auto a = attn.data();
  PatchImportance pi;
  pi.importance.assign(T - 1, 0.0);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t row = base + h * T * T;
    std::vector<double> v(a.begin() + static_cast<std::ptrdiff_t>(row + 1),
                          a.begin() + static_cast<std::ptrdiff_t>(row + T));
    for (std::size_t i = 0; i + 1 < T; ++i) pi.importance[i] += v[i];
    pi.per_head.push_back(std::move(v));
  }
  for (auto& x : pi.importance) x /= static_cast<double>(H);
  return pi;
}

inline PatchImportance extract_importance(const ForwardArtifacts& fa, std::size_t layer,
                                          std::size_t batch_index = 0) {
  if (fa.attention.empty()) throw std::logic_error("extract_importance: attention was not captured");
  if (layer >= fa.attention.size())
    throw std::out_of_range("extract_importance: layer " + std::to_string(layer) + " of " +
                            std::to_string(fa.attention.size()));
  return importance_from_attention(fa.attention[layer], batch_index);
}

// Final-block importance.
inline PatchImportance extract_importance(const ForwardArtifacts& fa) {
  if (fa.attention.empty()) throw std::logic_error("extract_importance: attention was not captured");
  return extract_importance(fa, fa.attention.size() - 1);
}

// Frobenius norm of each head's row block of W_O, divided by the largest.
inline std::vector<double> head_weights(const VitParams& p, const VitConfig& cfg, std::size_t layer) {
  if (layer >= p.layers.size()) throw std::out_of_range("head_weights: layer out of range");
  const auto& wo = p.layers[layer].w_o;
  const std::size_t Dh = cfg.head_dim(), D = wo.dim(1);
  const auto w = wo.data();
  std::vector<double> raw(cfg.n_heads, 0.0);
  for (std::size_t h = 0; h < cfg.n_heads; ++h) {
    for (std::size_t i = h * Dh * D; i < (h + 1) * Dh * D; ++i) raw[h] += w[i] * w[i];
    raw[h] = std::sqrt(raw[h]);
  }
  const double mx = *std::max_element(raw.begin(), raw.end());
  if (mx == 0.0) return std::vector<double>(cfg.n_heads, 1.0);
  for (auto& r : raw) r /= mx;
  return raw;
}

// ---------------------------------------------------------------------------
// Attribution

struct FeatureScore {
  std::string name;
  double percent = 0.0;
};

struct Candidate {
  Interval interval;
  std::string_view label;
};

inline constexpr std::array<Candidate, 4> kFeatureCandidates = {{
    {Interval::qrs, "R-Wave (QRS Complex)"},
    {Interval::s_t, "S-T Interval"},
    {Interval::p_r, "P-R Interval"},
    {Interval::q_t, "Q-T Interval"},
}};

struct AttributionReport {
  std::string task;
  std::array<double, kIntervalCount> percent{};  // indexed by Interval
  std::vector<FeatureScore> top3;
  std::size_t n_windows = 0;
  std::vector<double> head_weights;

  double operator[](Interval i) const { return percent[static_cast<std::size_t>(i)]; }
};

// Greedy: best candidate by the summed share of its still-unclaimed
// constituents, claim them, repeat. A candidate whose constituents are all
// claimed already scores 0, so three entries are always reported.
inline std::vector<FeatureScore> top_features(const std::array<double, kIntervalCount>& pct, std::size_t k = 3) {
  std::array<bool, kBaseIntervalCount> claimed{};
  std::array<bool, kFeatureCandidates.size()> used{};
  std::vector<FeatureScore> out;
  while (out.size() < k) {
    std::optional<std::size_t> best;
    double best_score = 0.0;
    for (std::size_t c = 0; c < kFeatureCandidates.size(); ++c) {
      if (used[c]) continue;
      double s = 0.0;
      for (Interval b : constituents(kFeatureCandidates[c].interval))
        if (!claimed[static_cast<std::size_t>(b)]) s += pct[static_cast<std::size_t>(b)];
      if (!best || s > best_score) {
        best = c;
        best_score = s;
      }
    }
    if (!best) break;
    used[*best] = true;
    for (Interval b : constituents(kFeatureCandidates[*best].interval)) claimed[static_cast<std::size_t>(b)] = true;
    out.push_back({std::string(kFeatureCandidates[*best].label), best_score});
  }
  return out;
}

inline void fill_composites(std::array<double, kIntervalCount>& pct) {
  for (Interval c : kCompositeIntervals) {
    double s = 0.0;
    for (Interval b : constituents(c)) s += pct[static_cast<std::size_t>(b)];
    pct[static_cast<std::size_t>(c)] = s;
  }
}

// Patch i covers samples [i*P, (i+1)*P). Masses are summed over every beat
// in the window, then normalized over the base partition.
inline AttributionReport attribute(const PatchImportance& imp, const IntervalMap& map, std::size_t patch_size,
                                   const std::string& task = {}) {
  if (patch_size == 0) throw std::invalid_argument("attribute: patch_size must be positive");
  std::array<double, kIntervalCount> mass{};
  for (const auto& beat : map.beats) {
    for (Interval b : kBaseIntervals) {
      const auto& r = beat[b];
      if (!r || r->length() == 0) continue;
      const std::size_t first = r->begin / patch_size;
      const std::size_t last = std::min(imp.n_patches(), (r->end - 1) / patch_size + 1);
      for (std::size_t i = first; i < last; ++i) {
        const std::size_t lo = std::max(r->begin, i * patch_size);
        const std::size_t hi = std::min(r->end, (i + 1) * patch_size);
        if (hi <= lo) continue;
        mass[static_cast<std::size_t>(b)] +=
            imp.importance[i] * static_cast<double>(hi - lo) / static_cast<double>(patch_size);
      }
    }
  }
  double total = 0.0;
  for (Interval b : kBaseIntervals) total += mass[static_cast<std::size_t>(b)];
  if (!(total > 0.0) || !std::isfinite(total)) throw std::runtime_error("unattributable window");
  AttributionReport rep;
  rep.task = task;
  rep.n_windows = 1;
  rep.head_weights = imp.head_weights;
  for (Interval b : kBaseIntervals) rep.percent[static_cast<std::size_t>(b)] = 100.0 * mass[static_cast<std::size_t>(b)] / total;
  fill_composites(rep.percent);
  rep.top3 = top_features(rep.percent);
  return rep;
}

inline AttributionReport attribute(const PatchImportance& imp, const IntervalMap& map, const VitConfig& cfg,
                                   const std::string& task = {}) {
  if (imp.n_patches() != cfg.n_patches())
    throw std::invalid_argument("attribute: importance has " + std::to_string(imp.n_patches()) +
                                " patches, config expects " + std::to_string(cfg.n_patches()));
  return attribute(imp, map, cfg.patch_size, task);
}

// Window-count-weighted mean of per-window (or already aggregated) reports.
inline AttributionReport aggregate(std::span<const AttributionReport> reports) {
  if (reports.empty()) throw std::invalid_argument("aggregate: no reports");
  AttributionReport out;
  out.task = reports.front().task;
  for (const auto& r : reports) out.n_windows += r.n_windows;
  if (out.n_windows == 0) throw std::invalid_argument("aggregate: reports carry zero windows");
  for (const auto& r : reports) {
    const double w = static_cast<double>(r.n_windows) / static_cast<double>(out.n_windows);
    for (Interval b : kBaseIntervals) out.percent[static_cast<std::size_t>(b)] += w * r[b];
    if (!r.head_weights.empty()) {
      if (out.head_weights.empty()) out.head_weights.assign(r.head_weights.size(), 0.0);
      for (std::size_t h = 0; h < std::min(out.head_weights.size(), r.head_weights.size()); ++h)
        out.head_weights[h] += w * r.head_weights[h];
    }
  }
  fill_composites(out.percent);
  out.top3 = top_features(out.percent);
  return out;
}

// ---------------------------------------------------------------------------
// Report files

inline nlohmann::json to_json(const AttributionReport& r) {
  nlohmann::json pct;
  for (std::size_t i = 0; i < kIntervalCount; ++i)
    pct[std::string(interval_name(static_cast<Interval>(i)))] = r.percent[i];
  nlohmann::json top = nlohmann::json::array();
  for (const auto& f : r.top3) top.push_back({{"feature", f.name}, {"percent", f.percent}});
  return {{"task", r.task},
          {"n_windows", r.n_windows},
          {"head_weights", r.head_weights},
          {"interval_percent", pct},
          {"top3", top}};
}

inline AttributionReport report_from_json(const nlohmann::json& j) {
  AttributionReport r;
  r.task = j.at("task").get<std::string>();
  r.n_windows = j.at("n_windows").get<std::size_t>();
  r.head_weights = j.at("head_weights").get<std::vector<double>>();
  for (std::size_t i = 0; i < kIntervalCount; ++i)
    r.percent[i] = j.at("interval_percent").at(std::string(interval_name(static_cast<Interval>(i)))).get<double>();
  for (const auto& f : j.at("top3")) r.top3.push_back({f.at("feature").get<std::string>(), f.at("percent").get<double>()});
  return r;
}

inline std::string fmt_g(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

namespace detail {
inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open '" + p.string() + "' for writing");
  return os;
}
}  // namespace detail

struct ReportFiles {
  std::filesystem::path head_csv, interval_csv, svg, json;
};

inline ReportFiles report_paths(const std::filesystem::path& dir) {
  return {dir / "attention_heads.csv", dir / "interval_percent.csv", dir / "attention.svg", dir / "attribution.json"};
}

inline void write_head_csv(std::ostream& os, const PatchImportance& imp) {
  os << "head,patch,score\n";
  for (std::size_t h = 0; h < imp.n_heads(); ++h)
    for (std::size_t i = 0; i < imp.per_head[h].size(); ++i) os << h << ',' << i << ',' << fmt_g(imp.per_head[h][i]) << '\n';
}

inline void write_interval_csv(std::ostream& os, const AttributionReport& r) {
  os << "interval,percent\n";
  for (std::size_t i = 0; i < kIntervalCount; ++i)
    os << interval_name(static_cast<Interval>(i)) << ',' << fmt_g(r.percent[i]) << '\n';
}

// ECG trace over per-patch importance shading, one <rect> per patch.
inline void write_svg(std::ostream& os, std::span<const double> samples, const PatchImportance& imp,
                      std::size_t patch_size, const IntervalMap& map) {
  const double W = 1000.0, Ht = 240.0, top = 20.0;
  const std::size_t n = samples.size();
  if (n == 0) throw std::invalid_argument("write_svg: empty window");
  const double sx = W / static_cast<double>(n);
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *lo_it, span_y = (*hi_it - lo) > 0.0 ? (*hi_it - lo) : 1.0;
  const double mx = imp.importance.empty() ? 0.0 : *std::max_element(imp.importance.begin(), imp.importance.end());
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << W << "\" height=\""
     << Ht + 2 * top << "\">\n";
  os << "<g id=\"importance\">\n";
  for (std::size_t i = 0; i < imp.n_patches(); ++i) {
    const double op = mx > 0.0 ? imp.importance[i] / mx : 0.0;
    os << "<rect x=\"" << fmt_g(static_cast<double>(i * patch_size) * sx, 6) << "\" y=\"" << top << "\" width=\""
       << fmt_g(static_cast<double>(patch_size) * sx, 6) << "\" height=\"" << Ht
       << "\" fill=\"#d62728\" fill-opacity=\"" << fmt_g(0.8 * op, 4) << "\"/>\n";
  }
  os << "</g>\n<polyline fill=\"none\" stroke=\"#000\" stroke-width=\"1\" points=\"";
  for (std::size_t t = 0; t < n; ++t) {
    if (t) os << ' ';
    os << fmt_g(static_cast<double>(t) * sx, 6) << ',' << fmt_g(top + Ht * (1.0 - (samples[t] - lo) / span_y), 6);
  }
  os << "\"/>\n<g id=\"intervals\" font-size=\"9\" text-anchor=\"middle\">\n";
  for (const auto& beat : map.beats)
    for (Interval b : {Interval::p_wave, Interval::qrs, Interval::t_wave}) {
      const auto& r = beat[b];
      if (!r) continue;
      const double cx = 0.5 * static_cast<double>(r->begin + r->end) * sx;
      os << "<text x=\"" << fmt_g(cx, 6) << "\" y=\"" << top - 6 << "\">" << interval_name(b) << "</text>\n";
    }
  os << "</g>\n</svg>\n";
}

inline ReportFiles emit_report(const std::filesystem::path& dir, const AttributionReport& report,
                               const PatchImportance& imp, std::span<const double> samples, std::size_t patch_size,
                               const IntervalMap& map) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  const auto paths = report_paths(dir);
  {
    auto os = detail::open_out(paths.head_csv);
    write_head_csv(os, imp);
  }
  {
    auto os = detail::open_out(paths.interval_csv);
    write_interval_csv(os, report);
  }
  {
    auto os = detail::open_out(paths.svg);
    write_svg(os, samples, imp, patch_size, map);
  }
  {
    auto os = detail::open_out(paths.json);
    os << to_json(report).dump(2) << '\n';
    if (!os) throw std::runtime_error("write failed: " + paths.json.string());
  }
  return paths;
}

// ---------------------------------------------------------------------------
// One window end to end: forward with capture, delineate, attribute.

struct WindowExplanation {
  PatchImportance importance;
  IntervalMap intervals;
  AttributionReport report;
};

inline WindowExplanation explain_window(const VitModel& model, const EcgWindow& w, const std::string& task = {}) {
  const EcgWindow* ptr = &w;
  const auto fa = model.infer(std::span<const EcgWindow* const>(&ptr, 1), true);
  WindowExplanation ex;
  const std::size_t last = model.config.n_layers - 1;
  ex.importance = extract_importance(fa, last);
  ex.importance.head_weights = head_weights(model.params, model.config, last);
  const auto peaks = pan_tompkins(w.samples, w.fs);
  if (peaks.indices.empty()) throw std::runtime_error("unattributable window");
  ex.intervals = intervals(delineate(w.samples, peaks, w.fs), w.fs);
  ex.report = attribute(ex.importance, ex.intervals, model.config, task);
  return ex;
}

}  // namespace transecg
