#pragma once

// R-peak detection (Pan-Tompkins) and rule-based PQRST delineation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "transecg/log.hpp"
#include "transecg/signal.hpp"

namespace transecg {

struct RPeakList {
  std::vector<std::size_t> indices;  // strictly increasing
  double fs = 0.0;
};

struct BeatFiducials {
  std::optional<std::size_t> p_on, p_off, q;
  std::size_t r = 0;
  std::optional<std::size_t> s, t_on, t_off;
};

// Half-open sample range [begin, end).
struct SampleRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end > begin ? end - begin : 0; }
  friend bool operator==(const SampleRange&, const SampleRange&) = default;
};

enum class Interval : int {
  p_wave = 0,
  pq_segment,
  qrs,
  st_segment,
  t_wave,
  tq_baseline,
  p_r,  // P_WAVE + PQ_SEGMENT
  q_t,  // QRS + ST_SEGMENT + T_WAVE
  s_t,  // ST_SEGMENT + T_WAVE
};

inline constexpr std::size_t kBaseIntervalCount = 6;
inline constexpr std::size_t kIntervalCount = 9;

inline constexpr std::array<Interval, kBaseIntervalCount> kBaseIntervals = {
    Interval::p_wave,     Interval::pq_segment, Interval::qrs,
    Interval::st_segment, Interval::t_wave,     Interval::tq_baseline};

inline constexpr std::array<Interval, 3> kCompositeIntervals = {Interval::p_r, Interval::q_t,
                                                                Interval::s_t};

inline constexpr std::string_view interval_name(Interval i) {
  constexpr std::array<std::string_view, kIntervalCount> names = {
      "P_WAVE", "PQ_SEGMENT", "QRS", "ST_SEGMENT", "T_WAVE", "TQ_BASELINE", "P_R", "Q_T", "S_T"};
  return names[static_cast<std::size_t>(i)];
}

// Base constituents of a (possibly composite) interval.
inline std::vector<Interval> constituents(Interval i) {
  switch (i) {
    case Interval::p_r: return {Interval::p_wave, Interval::pq_segment};
    case Interval::q_t: return {Interval::qrs, Interval::st_segment, Interval::t_wave};
    case Interval::s_t: return {Interval::st_segment, Interval::t_wave};
    default: return {i};
  }
}

struct BeatIntervals {
  std::size_t r = 0;
  std::array<std::optional<SampleRange>, kBaseIntervalCount> base;

  const std::optional<SampleRange>& operator[](Interval i) const {
    return base[static_cast<std::size_t>(i)];
  }
  // Composite = union of its constituents; absent unless all are present.
  std::vector<SampleRange> ranges(Interval i) const {
    std::vector<SampleRange> out;
    for (Interval c : constituents(i)) {
      const auto& r = (*this)[c];
      if (!r) return {};
      out.push_back(*r);
    }
    return out;
  }
  bool has(Interval i) const { return !ranges(i).empty(); }
};

struct IntervalMap {
  std::vector<BeatIntervals> beats;
  double fs = 0.0;
};

namespace detail {

inline std::size_t ms_to_samples(double ms, double fs) {
  return static_cast<std::size_t>(std::llround(ms * fs / 1000.0));
}

// Candidate peaks: local maxima, thinned greedily by height so that no two
// survivors are closer than min_distance.
inline std::vector<std::size_t> find_peaks(std::span<const double> y, std::size_t min_distance) {
  std::vector<std::size_t> cand;
  const std::size_t n = y.size();
  for (std::size_t i = 0; i < n; ++i) {
    const bool left = i == 0 ? true : y[i] > y[i - 1];
    const bool right = i + 1 == n ? true : y[i] >= y[i + 1];
    const bool edge_ok = (i == 0 && n > 1) ? y[0] > y[1] : true;
    if (left && right && edge_ok && y[i] > 0.0) cand.push_back(i);
  }
  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return y[cand[a]] > y[cand[b]]; });
  std::vector<bool> keep(cand.size(), false);
  std::vector<std::size_t> kept;
  for (std::size_t o : order) {
    const std::size_t idx = cand[o];
    bool ok = true;
    for (std::size_t k : kept)
      if ((idx > k ? idx - k : k - idx) < min_distance) {
        ok = false;
        break;
      }
    if (ok) {
      kept.push_back(idx);
      keep[o] = true;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < cand.size(); ++i)
    if (keep[i]) out.push_back(cand[i]);
  return out;
}

inline std::size_t argmax(std::span<const double> y, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t i = lo; i < hi; ++i)
    if (y[i] > y[best]) best = i;
  return best;
}

inline std::size_t argmin(std::span<const double> y, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t i = lo; i < hi; ++i)
    if (y[i] < y[best]) best = i;
  return best;
}

}  // namespace detail

// Offline Pan-Tompkins. Stages: 5-15 Hz zero-phase bandpass, five-point
// derivative, squaring, 150 ms moving-window integration, dual adaptive
// thresholds with 200 ms refractory period, T-wave slope check and
// search-back. Peaks are refined to the band-passed maximum within +-50 ms.
inline RPeakList pan_tompkins(std::span<const double> x, double fs) {
  if (fs < 100.0) throw std::invalid_argument("pan_tompkins: fs must be >= 100 Hz");
  if (static_cast<double>(x.size()) < 2.0 * fs)
    throw std::invalid_argument("pan_tompkins: window shorter than 2 s (" +
                                std::to_string(x.size()) + " samples at " + std::to_string(fs) +
                                " Hz)");
  const std::size_t n = x.size();
  RPeakList result;
  result.fs = fs;

  const auto bp = filtfilt(design_butterworth_bandpass({5.0, 15.0, 2, fs}), x);

  std::vector<double> sq(n);
  auto at = [&](std::ptrdiff_t i) {
    return bp[static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(n) - 1))];
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<std::ptrdiff_t>(i);
    const double d = (-at(k - 2) - 2.0 * at(k - 1) + 2.0 * at(k + 1) + at(k + 2)) * fs / 8.0;
    sq[i] = d * d;
  }

  // Centred moving-window integration, 150 ms.
  const std::size_t half = std::max<std::size_t>(1, detail::ms_to_samples(150.0, fs) / 2);
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + sq[i];
  std::vector<double> mwi(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + half + 1);
    mwi[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(2 * half + 1);
  }

  const std::size_t refractory = detail::ms_to_samples(200.0, fs);
  const std::size_t t_wave_window = detail::ms_to_samples(360.0, fs);
  const std::size_t slope_half = detail::ms_to_samples(75.0, fs) / 2;
  const std::size_t refine = detail::ms_to_samples(50.0, fs);

  const auto peaks = detail::find_peaks(mwi, refractory);
  if (peaks.empty()) return result;

  // Initial levels from the first 2 s of the integrated signal.
  const auto init_len = std::min(n, static_cast<std::size_t>(2.0 * fs));
  const double init_max = *std::max_element(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(init_len));
  const double init_mean =
      std::accumulate(mwi.begin(), mwi.begin() + static_cast<std::ptrdiff_t>(init_len), 0.0) /
      static_cast<double>(init_len);
  double spki = init_max / 3.0;
  double npki = init_mean / 2.0;
  double thr1 = npki + 0.25 * (spki - npki);
  double thr2 = 0.5 * thr1;

  auto max_slope = [&](std::size_t i) {
    const std::size_t lo = i >= slope_half ? i - slope_half : 0;
    const std::size_t hi = std::min(n - 1, i + slope_half);
    double m = 0.0;
    for (std::size_t k = lo; k < hi; ++k) m = std::max(m, std::abs(mwi[k + 1] - mwi[k]));
    return m;
  };

  std::vector<std::size_t> qrs;  // mwi peak positions
  std::vector<double> qrs_slope;
  std::vector<std::size_t> rr;
  std::vector<std::size_t> skipped;  // sub-threshold candidates, for search-back

  auto accept = [&](std::size_t idx, bool from_search_back) {
    const double pk = mwi[idx];
    if (from_search_back)
      spki = 0.25 * pk + 0.75 * spki;
    else
      spki = 0.125 * pk + 0.875 * spki;
    if (!qrs.empty()) rr.push_back(idx - qrs.back());
    qrs.push_back(idx);
    qrs_slope.push_back(max_slope(idx));
  };
  auto update_thresholds = [&] {
    thr1 = npki + 0.25 * (spki - npki);
    thr2 = 0.5 * thr1;
  };
  auto mean_rr = [&]() -> double {
    if (rr.empty()) return 0.0;
    const std::size_t k = std::min<std::size_t>(8, rr.size());
    double s = 0.0;
    for (std::size_t i = rr.size() - k; i < rr.size(); ++i) s += static_cast<double>(rr[i]);
    return s / static_cast<double>(k);
  };

  for (std::size_t idx : peaks) {
    // Search-back for a missed beat when the gap exceeds 1.66 mean RR.
    const double mrr = mean_rr();
    if (!qrs.empty() && mrr > 0.0 && static_cast<double>(idx - qrs.back()) > 1.66 * mrr) {
      std::optional<std::size_t> best;
      for (std::size_t c : skipped)
        if (c > qrs.back() + refractory && c + refractory < idx && mwi[c] > thr2 &&
            (!best || mwi[c] > mwi[*best]))
          best = c;
      if (best) {
        accept(*best, true);
        update_thresholds();
      }
      skipped.clear();
    }

    const double pk = mwi[idx];
    if (pk > thr1) {
      bool is_t_wave = false;
      if (!qrs.empty() && idx - qrs.back() < t_wave_window)
        is_t_wave = max_slope(idx) < 0.5 * qrs_slope.back();
      if (!qrs.empty() && idx - qrs.back() < refractory) is_t_wave = true;
      if (is_t_wave) {
        npki = 0.125 * pk + 0.875 * npki;
      } else {
        accept(idx, false);
        skipped.clear();
      }
    } else {
      npki = 0.125 * pk + 0.875 * npki;
      skipped.push_back(idx);
    }
    update_thresholds();
  }

  // Refine onto the band-passed signal, then enforce the refractory period.
  // Complexes cut by the window edge only leave a filter side lobe behind,
  // so peaks inside the first/last 100 ms are dropped.
  const std::size_t edge = detail::ms_to_samples(100.0, fs);
  std::vector<std::size_t> refined;
  for (std::size_t q : qrs) {
    const std::size_t lo = q >= refine ? q - refine : 0;
    const std::size_t hi = std::min(n, q + refine + 1);
    const std::size_t r = detail::argmax(bp, lo, hi);
    if (r < edge || r + edge >= n) continue;
    refined.push_back(r);
  }
  std::sort(refined.begin(), refined.end());
  for (std::size_t r : refined) {
    if (!result.indices.empty() && r - result.indices.back() < refractory) {
      if (bp[r] > bp[result.indices.back()]) result.indices.back() = r;
      continue;
    }
    result.indices.push_back(r);
  }
  return result;
}

inline RPeakList pan_tompkins(const EcgWindow& w) { return pan_tompkins(w.samples, w.fs); }

// Rule-based fiducial search around each R peak (windows in ms):
//   Q: min in (R-80, R)        S: min in (R, R+80)
//   P: interior local max in (R-240, R-90), wave = centre +-40
//   T: interior local extremum in (S+80, S+360), wave = centre +-80
inline std::vector<BeatFiducials> delineate(std::span<const double> x, const RPeakList& peaks,
                                            double fs) {
  if (peaks.indices.empty()) throw std::invalid_argument("delineate: no R peaks");
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  auto ms = [fs](double v) { return static_cast<std::ptrdiff_t>(detail::ms_to_samples(v, fs)); };
  // Open interval (a, b) clipped to the window -> [lo, hi).
  auto clip_open = [n](std::ptrdiff_t a, std::ptrdiff_t b) {
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(a + 1, 0);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(b, n);
    return std::pair{lo, std::max(lo, hi)};
  };
  auto clip = [n](std::ptrdiff_t v) { return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, n)); };

  double global_range = 0.0;
  if (!x.empty()) {
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    global_range = *hi - *lo;
  }
  const double flat_eps = global_range > 0.0 ? 1e-6 * global_range : 0.0;

  auto flat = [&](std::ptrdiff_t lo, std::ptrdiff_t hi) {
    const auto [mn, mx] = std::minmax_element(x.begin() + lo, x.begin() + hi);
    return *mx - *mn <= flat_eps;
  };

  // Largest interior local maximum of sign*(x - ref) in [lo, hi).
  auto interior_extremum = [&](std::ptrdiff_t lo, std::ptrdiff_t hi, double ref,
                               bool both_signs) -> std::optional<std::ptrdiff_t> {
    std::optional<std::ptrdiff_t> best;
    double best_val = 0.0;
    for (std::ptrdiff_t i = lo + 1; i + 1 < hi; ++i) {
      const double v = x[static_cast<std::size_t>(i)];
      const double l = x[static_cast<std::size_t>(i - 1)];
      const double r = x[static_cast<std::size_t>(i + 1)];
      const bool is_max = v > l && v >= r;
      const bool is_min = v < l && v <= r;
      if (!(is_max || (both_signs && is_min))) continue;
      const double score = both_signs ? std::abs(v - ref) : v;
      if (!best || score > best_val) {
        best = i;
        best_val = score;
      }
    }
    return best;
  };

  std::vector<BeatFiducials> out;
  out.reserve(peaks.indices.size());
  for (std::size_t r_idx : peaks.indices) {
    BeatFiducials b;
    b.r = r_idx;
    const auto r = static_cast<std::ptrdiff_t>(r_idx);

    if (auto [lo, hi] = clip_open(r - ms(80.0), r); hi > lo)
      b.q = detail::argmin(x, static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));
    if (auto [lo, hi] = clip_open(r, r + ms(80.0)); hi > lo)
      b.s = detail::argmin(x, static_cast<std::size_t>(lo), static_cast<std::size_t>(hi));

    if (auto [lo, hi] = clip_open(r - ms(240.0), r - ms(90.0)); hi - lo >= 3 && !flat(lo, hi)) {
      if (auto c = interior_extremum(lo, hi, 0.0, false)) {
        b.p_on = clip(*c - ms(40.0));
        b.p_off = clip(*c + ms(40.0));
      }
    }

    if (b.s) {
      const auto s = static_cast<std::ptrdiff_t>(*b.s);
      if (auto [lo, hi] = clip_open(s + ms(80.0), s + ms(360.0)); hi - lo >= 3 && !flat(lo, hi)) {
        std::vector<double> region(x.begin() + lo, x.begin() + hi);
        auto mid = region.begin() + static_cast<std::ptrdiff_t>(region.size() / 2);
        std::nth_element(region.begin(), mid, region.end());
        if (auto c = interior_extremum(lo, hi, *mid, true)) {
          b.t_on = clip(*c - ms(80.0));
          b.t_off = clip(*c + ms(80.0));
        }
      }
    }
    out.push_back(b);
  }
  return out;
}

inline bool fiducials_ordered(const BeatFiducials& b) {
  std::vector<std::size_t> seq;
  if (b.p_on && b.p_off) {
    seq.push_back(*b.p_on);
    seq.push_back(*b.p_off);
  }
  if (b.q) seq.push_back(*b.q);
  seq.push_back(b.r);
  if (b.s) seq.push_back(*b.s);
  if (b.t_on && b.t_off) {
    seq.push_back(*b.t_on);
    seq.push_back(*b.t_off);
  }
  return std::adjacent_find(seq.begin(), seq.end(), std::greater_equal<>()) == seq.end();
}

// Base ranges per beat:
//   P_WAVE=[p_on,p_off)  PQ_SEGMENT=[p_off,q)  QRS=[q,s+1)
//   ST_SEGMENT=[s+1,t_on)  T_WAVE=[t_on,t_off)  TQ_BASELINE=[t_off, next p_on)
inline IntervalMap intervals(std::span<const BeatFiducials> fids, double fs) {
  IntervalMap map;
  map.fs = fs;
  std::vector<const BeatFiducials*> valid;
  for (const auto& b : fids) {
    if (!fiducials_ordered(b)) {
      warn("beat at R=" + std::to_string(b.r) + " has out-of-order fiducials; skipped");
      continue;
    }
    if (!valid.empty()) {
      const auto& prev = *valid.back();
      const std::size_t prev_end =
          prev.t_off ? *prev.t_off : (prev.s ? *prev.s + 1 : prev.r + 1);
      const std::size_t start = b.p_on ? *b.p_on : (b.q ? *b.q : b.r);
      if (start < prev_end) {
        warn("beat at R=" + std::to_string(b.r) + " overlaps the previous beat; skipped");
        continue;
      }
    }
    valid.push_back(&b);
  }

  for (std::size_t k = 0; k < valid.size(); ++k) {
    const auto& b = *valid[k];
    BeatIntervals bi;
    bi.r = b.r;
    auto set = [&](Interval i, std::size_t lo, std::size_t hi) {
      bi.base[static_cast<std::size_t>(i)] = SampleRange{lo, hi};
    };
    const bool has_p = b.p_on && b.p_off;
    const bool has_t = b.t_on && b.t_off;
    if (has_p) set(Interval::p_wave, *b.p_on, *b.p_off);
    if (has_p && b.q) set(Interval::pq_segment, *b.p_off, *b.q);
    if (b.q && b.s) set(Interval::qrs, *b.q, *b.s + 1);
    if (b.s && has_t) {
      set(Interval::st_segment, *b.s + 1, *b.t_on);
      set(Interval::t_wave, *b.t_on, *b.t_off);
    }
    if (has_t && k + 1 < valid.size()) {
      const auto& next = *valid[k + 1];
      if (next.p_on && *next.p_on >= *b.t_off) set(Interval::tq_baseline, *b.t_off, *next.p_on);
    }
    map.beats.push_back(bi);
  }
  return map;
}

}  // namespace transecg
