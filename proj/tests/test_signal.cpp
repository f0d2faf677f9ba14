#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "transecg/signal.hpp"
#include "test_util.hpp"

using namespace transecg;

namespace {

std::vector<double> sine(double f, double fs, std::size_t n, double amp = 1.0, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * std::numbers::pi * f * static_cast<double>(i) / fs + phase);
  return x;
}

double rms(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

double db(double ratio) { return 20.0 * std::log10(ratio); }

const FilterSpec kEcgBand{0.5, 40.0, 4, 250.0};

}  // namespace

TEST(Butterworth, KillsDc) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  EXPECT_LT(c.magnitude(0.0), 1e-6);
  EXPECT_EQ(c.sections.size(), 4u);
}

TEST(Butterworth, GeometricCentreWithinOneDb) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  const double g = c.magnitude(std::sqrt(0.5 * 40.0));
  EXPECT_GE(g, 0.89);
  EXPECT_LE(g, 1.12);
}

TEST(Butterworth, RejectsInvertedBand) {
  EXPECT_THROW(design_butterworth_bandpass({40.0, 0.5, 4, 250.0}), std::invalid_argument);
  EXPECT_THROW(design_butterworth_bandpass({0.5, 130.0, 4, 250.0}), std::invalid_argument);
  EXPECT_THROW(design_butterworth_bandpass({0.5, 40.0, 0, 250.0}), std::invalid_argument);
}

TEST(Butterworth, EdgesAtHalfPowerSquaredForZeroPhase) {
  // Single pass is -3 dB at each edge.
  const auto c = design_butterworth_bandpass(kEcgBand);
  EXPECT_NEAR(c.magnitude(0.5), 1.0 / std::sqrt(2.0), 1e-3);
  EXPECT_NEAR(c.magnitude(40.0), 1.0 / std::sqrt(2.0), 1e-3);
}

TEST(Filtfilt, ConstantBecomesZero) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  const std::vector<double> x(2500, 3.7);
  for (double v : filtfilt(c, x)) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(Filtfilt, PassbandSinusoidAmplitudeAndLag) {
  const double fs = 250.0;
  const auto c = design_butterworth_bandpass(kEcgBand);
  const auto x = sine(10.0, fs, 2500);
  const auto y = filtfilt(c, x);
  // Interior only, away from edge transients.
  const std::span<const double> xi(x.data() + 500, 1500), yi(y.data() + 500, 1500);
  EXPECT_LE(std::abs(db(rms(yi) / rms(xi))), 1.0);
  EXPECT_LE(std::abs(test::best_lag(x, y, 500, 1500, 5)), 1);
}

TEST(Filtfilt, AttenuatesBelowBand) {
  const double fs = 250.0;
  const auto c = design_butterworth_bandpass(kEcgBand);
  const auto x = sine(0.2, fs, 25000);
  const auto y = filtfilt(c, x);
  const std::span<const double> xi(x.data() + 5000, 15000), yi(y.data() + 5000, 15000);
  EXPECT_LE(db(rms(yi) / rms(xi)), -20.0);
}

TEST(Filtfilt, Linear) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  std::vector<double> x(1000), y(1000), z(1000);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = nd(rng);
    y[i] = nd(rng);
    z[i] = 2.5 * x[i] - 0.75 * y[i];
  }
  const auto fx = filtfilt(c, x), fy = filtfilt(c, y), fz = filtfilt(c, z);
  double scale = 0.0;
  for (double v : fz) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fz[i], 2.5 * fx[i] - 0.75 * fy[i], 1e-9 * scale);
}

TEST(Filtfilt, TwiceOnInBandSinusoid) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  const auto x = sine(7.0, 250.0, 2500);
  const auto y = filtfilt(c, filtfilt(c, x));
  const std::span<const double> xi(x.data() + 500, 1500), yi(y.data() + 500, 1500);
  EXPECT_LE(std::abs(db(rms(yi) / rms(xi))), 2.0);
}

TEST(Filtfilt, RejectsNonFinite) {
  const auto c = design_butterworth_bandpass(kEcgBand);
  std::vector<double> x(100, 0.0);
  x[40] = std::nan("");
  EXPECT_THROW(filtfilt(c, x), std::invalid_argument);
}

TEST(Median, RemovesSpike) {
  const std::vector<double> x = {1, 9, 1, 1, 1};
  EXPECT_EQ(median_filter(x, 3), (std::vector<double>{1, 1, 1, 1, 1}));
}

TEST(Median, RampInteriorUnchanged) {
  std::vector<double> x(50);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * static_cast<double>(i);
  for (std::size_t k : {3u, 5u, 9u}) {
    const auto y = median_filter(x, k);
    for (std::size_t i = k / 2; i + k / 2 < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
  }
}

TEST(Median, KernelOneIsIdentity) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(64);
  for (auto& v : x) v = u(rng);
  EXPECT_EQ(median_filter(x, 1), x);
}

TEST(Median, EvenKernelRejected) {
  const std::vector<double> x(10, 0.0);
  EXPECT_THROW(median_filter(x, 4), std::invalid_argument);
  EXPECT_THROW(median_filter(x, 0), std::invalid_argument);
}

TEST(Resample, SameRateIsIdentity) {
  const auto x = sine(3.0, 250.0, 777);
  EXPECT_EQ(resample(x, 250.0, 250.0), x);
}

TEST(Resample, DownsampledSinusoidMatchesClosedForm) {
  const auto x = sine(1.0, 500.0, 1000);
  const auto y = resample(x, 500.0, 250.0);
  ASSERT_EQ(y.size(), 500u);
  double err = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j)
    err = std::max(err, std::abs(y[j] - std::sin(2.0 * std::numbers::pi * static_cast<double>(j) / 250.0)));
  EXPECT_LT(err, 1e-3);
}

TEST(Resample, RoundTripBandLimited) {
  const auto x = sine(5.0, 250.0, 2500, 1.0, 0.3);
  const auto back = resample(resample(x, 250.0, 360.0), 360.0, 250.0);
  ASSERT_EQ(back.size(), x.size());
  double err = 0.0;
  for (std::size_t i = 0; i + 2 < x.size(); ++i) err = std::max(err, std::abs(back[i] - x[i]));
  EXPECT_LT(err, 1e-2 * 2.0);
}

TEST(Resample, TooShortRejected) {
  const std::vector<double> x = {1.0};
  EXPECT_THROW(resample(x, 250.0, 500.0), std::invalid_argument);
}

TEST(MinMax, Examples) {
  EXPECT_EQ(minmax_normalize(std::vector<double>{2, 4, 6}), (std::vector<double>{0, 0.5, 1}));
  EXPECT_EQ(minmax_normalize(std::vector<double>{5, 5, 5}), (std::vector<double>{0, 0, 0}));
}

TEST(MinMax, RangeAndIdempotence) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(3.0, 2.0);
  std::vector<double> x(300);
  for (auto& v : x) v = nd(rng);
  const auto y = minmax_normalize(x);
  EXPECT_EQ(*std::min_element(y.begin(), y.end()), 0.0);
  EXPECT_EQ(*std::max_element(y.begin(), y.end()), 1.0);
  const auto z = minmax_normalize(y);
  for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(z[i], y[i], 1e-15);
}

namespace {
EcgRecord ramp_record(std::size_t n) {
  EcgRecord r;
  r.subject_id = "r";
  r.fs = 250.0;
  r.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) r.samples[i] = std::sin(0.01 * static_cast<double>(i));
  return r;
}
}  // namespace

TEST(Window, Counts) {
  {
    const auto w = window(ramp_record(5000), 2000, 2000);
    ASSERT_EQ(w.size(), 2u);
    EXPECT_EQ(w[0].source_offset, 0u);
    EXPECT_EQ(w[1].source_offset, 2000u);
  }
  EXPECT_EQ(window(ramp_record(2000), 2000, 2000).size(), 1u);
  for (std::size_t len : {2000u, 2500u, 4999u, 7321u})
    for (std::size_t stride : {500u, 1000u, 2000u})
      EXPECT_EQ(window(ramp_record(len), 2000, stride).size(), (len - 2000) / stride + 1);
}

TEST(Window, ShortRecordExcludedWithWarning) {
  test::CapturedWarnings cap;
  EXPECT_TRUE(window(ramp_record(1999), 2000, 2000).empty());
  ASSERT_EQ(cap.messages.size(), 1u);
  EXPECT_NE(cap.messages[0].find("excluded"), std::string::npos);
}

TEST(Preprocess, ResamplesToTargetAndNormalizes) {
  EcgRecord r;
  r.subject_id = "a";
  r.fs = 500.0;
  r.samples = sine(8.0, 500.0, 9000);
  const auto ws = preprocess(r, PreprocessOptions{});
  ASSERT_EQ(ws.size(), 2u);  // 9000 @500 -> 4500 @250
  for (const auto& w : ws) {
    EXPECT_EQ(w.samples.size(), 2000u);
    EXPECT_EQ(w.fs, 250.0);
    EXPECT_EQ(*std::min_element(w.samples.begin(), w.samples.end()), 0.0);
    EXPECT_EQ(*std::max_element(w.samples.begin(), w.samples.end()), 1.0);
  }
}
