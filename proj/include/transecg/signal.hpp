#pragma once

// Single-lead ECG preprocessing: Butterworth bandpass design, zero-phase
// filtering, median filtering, resampling, min-max scaling and windowing.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "transecg/log.hpp"

namespace transecg {

enum class Gender { male, female };

struct EcgRecord {
  std::string subject_id;
  std::vector<double> samples;  // millivolts
  double fs = 0.0;              // Hz
  std::optional<Gender> gender;
  std::optional<int> age_years;

  void validate() const {
    if (samples.empty()) throw std::invalid_argument("record '" + subject_id + "': no samples");
    if (!(fs > 0.0) || !std::isfinite(fs))
      throw std::invalid_argument("record '" + subject_id + "': sampling rate must be positive");
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (!std::isfinite(samples[i]))
        throw std::invalid_argument("record '" + subject_id + "': non-finite sample at index " +
                                    std::to_string(i));
    if (age_years && *age_years < 0)
      throw std::invalid_argument("record '" + subject_id + "': negative age");
  }
};

struct EcgWindow {
  std::string subject_id;
  std::vector<double> samples;  // min-max scaled to [0, 1]
  double fs = 250.0;
  std::size_t source_offset = 0;  // index into the resampled record
};

struct FilterSpec {
  double low_hz = 0.5;
  double high_hz = 40.0;
  int order = 4;
  double fs = 250.0;

  void validate() const {
    if (order < 1) throw std::invalid_argument("filter order must be positive");
    if (!(fs > 0.0)) throw std::invalid_argument("filter fs must be positive");
    if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0))
      throw std::invalid_argument("filter band must satisfy 0 < low < high < fs/2 (got low=" +
                                  std::to_string(low_hz) + ", high=" + std::to_string(high_hz) +
                                  ", fs=" + std::to_string(fs) + ")");
  }
};

// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;

  std::complex<double> response(std::complex<double> z) const {
    const auto zi = 1.0 / z;
    return (b0 + b1 * zi + b2 * zi * zi) / (1.0 + a1 * zi + a2 * zi * zi);
  }
  double dc_gain() const { return (b0 + b1 + b2) / (1.0 + a1 + a2); }
};

struct BiquadCascade {
  std::vector<Biquad> sections;
  double fs = 0.0;

  std::complex<double> response(double f_hz) const {
    const auto z = std::polar(1.0, 2.0 * std::numbers::pi * f_hz / fs);
    std::complex<double> h = 1.0;
    for (const auto& s : sections) h *= s.response(z);
    return h;
  }
  double magnitude(double f_hz) const { return std::abs(response(f_hz)); }
};

// Butterworth bandpass from an order-N analog lowpass prototype (N sections,
// 2N poles), bilinear transform with prewarped band edges. Each section holds
// one zero at DC and one at Nyquist. Unit gain at the prewarped geometric
// centre frequency.
inline BiquadCascade design_butterworth_bandpass(const FilterSpec& spec) {
  spec.validate();
  using cd = std::complex<double>;
  const double pi = std::numbers::pi;
  const double fs2 = 2.0 * spec.fs;
  const double w1 = fs2 * std::tan(pi * spec.low_hz / spec.fs);
  const double w2 = fs2 * std::tan(pi * spec.high_hz / spec.fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;
  const int n = spec.order;

  std::vector<cd> poles;
  poles.reserve(2 * static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const cd proto = std::polar(1.0, pi * (2.0 * k + n + 1.0) / (2.0 * n));
    const cd half = proto * bw / 2.0;
    const cd root = std::sqrt(half * half - w0sq);
    for (const cd s : {half + root, half - root}) poles.push_back((fs2 + s) / (fs2 - s));
  }

  constexpr double kImagTol = 1e-12;
  BiquadCascade cascade;
  cascade.fs = spec.fs;
  std::vector<double> real_poles;
  for (const cd& p : poles) {
    if (p.imag() > kImagTol) {
      Biquad b;
      b.b0 = 1.0;
      b.b1 = 0.0;
      b.b2 = -1.0;
      b.a1 = -2.0 * p.real();
      b.a2 = std::norm(p);
      cascade.sections.push_back(b);
    } else if (std::abs(p.imag()) <= kImagTol) {
      real_poles.push_back(p.real());
    }
  }
  std::sort(real_poles.begin(), real_poles.end());
  for (std::size_t i = 0; i + 1 < real_poles.size(); i += 2) {
    Biquad b;
    b.b0 = 1.0;
    b.b2 = -1.0;
    b.a1 = -(real_poles[i] + real_poles[i + 1]);
    b.a2 = real_poles[i] * real_poles[i + 1];
    cascade.sections.push_back(b);
  }
  if (cascade.sections.size() != static_cast<std::size_t>(n))
    throw std::logic_error("butterworth design: unexpected pole layout");

  const double f_centre = spec.fs / pi * std::atan(std::sqrt(w0sq) / fs2);
  const double g = std::pow(1.0 / cascade.magnitude(f_centre), 1.0 / n);
  for (auto& s : cascade.sections) {
    s.b0 *= g;
    s.b1 *= g;
    s.b2 *= g;
  }
  return cascade;
}

namespace detail {

// Steady-state transposed direct-form II state of each section for a unit
// step input.
inline std::vector<std::array<double, 2>> step_state(const BiquadCascade& c) {
  std::vector<std::array<double, 2>> zi(c.sections.size());
  double u = 1.0;
  for (std::size_t k = 0; k < c.sections.size(); ++k) {
    const auto& s = c.sections[k];
    const double y = s.dc_gain() * u;
    const double z2 = s.b2 * u - s.a2 * y;
    const double z1 = s.b1 * u - s.a1 * y + z2;
    zi[k] = {z1, z2};
    u = y;
  }
  return zi;
}

inline void sosfilt_inplace(const BiquadCascade& c, std::vector<double>& x, double x0) {
  auto state = step_state(c);
  for (auto& st : state) {
    st[0] *= x0;
    st[1] *= x0;
  }
  for (std::size_t k = 0; k < c.sections.size(); ++k) {
    const auto& s = c.sections[k];
    double z1 = state[k][0], z2 = state[k][1];
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * y + z2;
      z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
  }
}

inline void require_finite(std::span<const double> x, const char* what) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]))
      throw std::invalid_argument(std::string(what) + ": non-finite input at index " +
                                  std::to_string(i));
}

}  // namespace detail

// Zero-phase forward-backward filtering with odd-reflection padding and
// step-response initial conditions.
inline std::vector<double> filtfilt(const BiquadCascade& cascade, std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("filtfilt: empty input");
  detail::require_finite(x, "filtfilt");
  const std::size_t n = x.size();
  std::size_t pad = 3 * (2 * cascade.sections.size() + 1);
  pad = std::min(pad, n - 1);

  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  detail::sosfilt_inplace(cascade, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  detail::sosfilt_inplace(cascade, ext, ext.front());
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad),
          ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

// Running median, edges extended by half-sample symmetric reflection
// (edge sample repeated: ... b a | a b c ...).
inline std::vector<double> median_filter(std::span<const double> x, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0)
    throw std::invalid_argument("median_filter: kernel must be odd and positive, got " +
                                std::to_string(kernel));
  if (kernel > x.size())
    throw std::invalid_argument("median_filter: kernel " + std::to_string(kernel) +
                                " exceeds signal length " + std::to_string(x.size()));
  const auto n = static_cast<std::ptrdiff_t>(x.size());
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  auto reflect = [n](std::ptrdiff_t i) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> out(x.size());
  std::vector<double> buf(kernel);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (std::ptrdiff_t k = -half; k <= half; ++k) buf[static_cast<std::size_t>(k + half)] = x[reflect(i + k)];
    auto mid = buf.begin() + half;
    std::nth_element(buf.begin(), mid, buf.end());
    out[static_cast<std::size_t>(i)] = *mid;
  }
  return out;
}

// Linear interpolation onto a uniform grid at fs_out; holds the last sample
// past the end of the input.
inline std::vector<double> resample(std::span<const double> x, double fs_in, double fs_out) {
  if (!(fs_in > 0.0) || !(fs_out > 0.0))
    throw std::invalid_argument("resample: sampling rates must be positive");
  if (x.size() < 2) throw std::invalid_argument("resample: need at least 2 samples");
  if (fs_in == fs_out) return {x.begin(), x.end()};
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(x.size()) * fs_out / fs_in));
  const double step = fs_in / fs_out;
  std::vector<double> out(n_out);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double pos = static_cast<double>(j) * step;
    const auto i0 = static_cast<std::size_t>(std::floor(pos));
    if (i0 + 1 >= x.size()) {
      out[j] = x.back();
      continue;
    }
    const double frac = pos - static_cast<double>(i0);
    out[j] = x[i0] + frac * (x[i0 + 1] - x[i0]);
  }
  return out;
}

// Constant input maps to all zeros.
inline std::vector<double> minmax_normalize(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("minmax_normalize: empty input");
  detail::require_finite(x, "minmax_normalize");
  const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
  const double mn = *lo, range = *hi - *lo;
  std::vector<double> out(x.size(), 0.0);
  if (range > 0.0)
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mn) / range;
  return out;
}

// Cuts fixed-length windows starting at 0, stride apart; the trailing
// partial window is dropped. Each window is min-max scaled on its own.
inline std::vector<EcgWindow> window(const EcgRecord& record, std::size_t seq_len,
                                     std::size_t stride) {
  if (seq_len == 0 || stride == 0)
    throw std::invalid_argument("window: seq_len and stride must be positive");
  std::vector<EcgWindow> out;
  const auto& s = record.samples;
  for (std::size_t off = 0; off + seq_len <= s.size(); off += stride) {
    EcgWindow w;
    w.subject_id = record.subject_id;
    w.fs = record.fs;
    w.source_offset = off;
    w.samples = minmax_normalize(std::span<const double>(s).subspan(off, seq_len));
    out.push_back(std::move(w));
  }
  if (out.empty())
    warn("record '" + record.subject_id + "' has " + std::to_string(s.size()) +
         " samples, fewer than one window of " + std::to_string(seq_len) + "; excluded");
  return out;
}

struct PreprocessOptions {
  FilterSpec band{0.5, 40.0, 4, 0.0};  // fs taken from the record
  std::size_t median_kernel = 5;
  double fs_target = 250.0;
  std::size_t seq_len = 2000;
  std::size_t stride = 2000;
};

// bandpass -> median -> resample -> window -> per-window min-max.
inline EcgRecord condition(const EcgRecord& record, const PreprocessOptions& opt) {
  record.validate();
  FilterSpec band = opt.band;
  band.fs = record.fs;
  const auto filtered = filtfilt(design_butterworth_bandpass(band), record.samples);
  // Kernel length in samples at the native rate, kept odd.
  auto kernel = static_cast<std::size_t>(
      std::llround(static_cast<double>(opt.median_kernel) * record.fs / opt.fs_target));
  kernel = std::max<std::size_t>(1, kernel | 1U);
  kernel = std::min(kernel, filtered.size() % 2 == 1 ? filtered.size() : filtered.size() - 1);
  EcgRecord out = record;
  out.samples = resample(median_filter(filtered, kernel), record.fs, opt.fs_target);
  out.fs = opt.fs_target;
  return out;
}

inline std::vector<EcgWindow> preprocess(const EcgRecord& record, const PreprocessOptions& opt) {
  return window(condition(record, opt), opt.seq_len, opt.stride);
}

}  // namespace transecg
