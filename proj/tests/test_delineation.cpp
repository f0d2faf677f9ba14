#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "transecg/data_io.hpp"
#include "transecg/delineation.hpp"
#include "test_util.hpp"

using namespace transecg;

namespace {

SyntheticEcg clean(double bpm, double seconds = 8.0, double phase = 0.0) {
  SyntheticEcgSpec s;
  s.bpm = bpm;
  s.duration_s = seconds;
  s.phase_s = phase;
  return synthesize(s);
}

long dist(std::size_t a, std::int64_t b) { return std::abs(static_cast<long>(a) - static_cast<long>(b)); }

}  // namespace

TEST(PanTompkins, SixtyBpmFindsEveryBeat) {
  const auto syn = clean(60.0, 8.0, 0.4);
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  ASSERT_EQ(peaks.indices.size(), 8u);
  ASSERT_EQ(syn.r_peaks.size(), 8u);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_LE(dist(peaks.indices[i], static_cast<std::int64_t>(syn.r_peaks[i])), 5);
}

TEST(PanTompkins, HundredTwentyBpmNoDuplicates) {
  const auto syn = clean(120.0, 8.0, 0.2);
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  EXPECT_EQ(peaks.indices.size(), 16u);
  for (std::size_t i = 1; i < peaks.indices.size(); ++i) EXPECT_GT(peaks.indices[i] - peaks.indices[i - 1], 50u);
}

TEST(PanTompkins, BeatsCutByEdgeAreDropped) {
  const auto syn = clean(60.0);  // R at sample 0, next one just past the end
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  ASSERT_EQ(peaks.indices.size(), 7u);
  for (std::size_t i = 0; i < 7; ++i) EXPECT_LE(dist(peaks.indices[i], static_cast<std::int64_t>(syn.r_peaks[i + 1])), 5);
}

TEST(PanTompkins, ZeroSignalGivesNoPeaks) {
  const std::vector<double> x(2000, 0.0);
  EXPECT_TRUE(pan_tompkins(x, 250.0).indices.empty());
}

TEST(PanTompkins, ShortWindowRejected) {
  const std::vector<double> x(499, 0.0);
  EXPECT_THROW(pan_tompkins(x, 250.0), std::invalid_argument);
}

TEST(PanTompkins, PeaksAreLocalMaximaOfBandpassed) {
  SyntheticEcgSpec s;
  s.bpm = 75.0;
  s.noise_std = 0.02;
  s.seed = 4;
  const auto syn = synthesize(s);
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  const auto bp = filtfilt(design_butterworth_bandpass({5.0, 15.0, 2, 250.0}), syn.record.samples);
  for (std::size_t r : peaks.indices) {
    const std::size_t lo = r >= 12 ? r - 12 : 0, hi = std::min(bp.size(), r + 13);
    for (std::size_t i = lo; i < hi; ++i) EXPECT_LE(bp[i], bp[r]);
  }
}

TEST(Delineate, RecoversGeneratorCentres) {
  for (double bpm : {60.0, 70.0, 80.0}) {
    const auto syn = clean(bpm, 8.0, 0.4);
    const auto peaks = pan_tompkins(syn.record.samples, 250.0);
    const auto fids = delineate(syn.record.samples, peaks, 250.0);
    // Beats cut by the window edge are not detected.
    std::vector<BeatTruth> inner;
    for (const auto& t : syn.beats)
      if (t[Wave::r] >= 25 && t[Wave::r] + 25 < static_cast<std::int64_t>(syn.record.samples.size())) inner.push_back(t);
    ASSERT_EQ(fids.size(), inner.size()) << bpm;
    for (std::size_t k = 0; k < fids.size(); ++k) {
      const auto& f = fids[k];
      const auto& t = inner[k];
      EXPECT_LE(dist(f.r, t[Wave::r]), 3);
      ASSERT_TRUE(f.q && f.s);
      EXPECT_LE(dist(*f.q, t[Wave::q]), 3) << "bpm " << bpm << " beat " << k;
      EXPECT_LE(dist(*f.s, t[Wave::s]), 3) << "bpm " << bpm << " beat " << k;
      if (f.p_on) {
        EXPECT_LE(dist((*f.p_on + *f.p_off) / 2, t[Wave::p]), 3);
      }
      if (f.t_on) {
        EXPECT_LE(dist((*f.t_on + *f.t_off) / 2, t[Wave::t]), 3);
      }
    }
  }
}

TEST(Delineate, EdgeBeatHasNoP) {
  const auto syn = clean(60.0);
  RPeakList peaks{{10}, 250.0};
  const auto f = delineate(syn.record.samples, peaks, 250.0);
  ASSERT_EQ(f.size(), 1u);
  EXPECT_FALSE(f[0].p_on);
  EXPECT_FALSE(f[0].p_off);
  EXPECT_TRUE(f[0].q);
  RPeakList at_zero{{0}, 250.0};
  EXPECT_FALSE(delineate(syn.record.samples, at_zero, 250.0)[0].q);
}

TEST(Delineate, FlatAfterQrsHasNoT) {
  auto syn = clean(60.0);
  auto x = syn.record.samples;
  // Flatten everything after the first S wave up to the next P.
  const std::size_t r = syn.r_peaks[1];
  std::fill(x.begin() + static_cast<long>(r + 20), x.begin() + static_cast<long>(r + 190), 0.0);
  const auto f = delineate(x, RPeakList{{r}, 250.0}, 250.0);
  EXPECT_FALSE(f[0].t_on);
  EXPECT_FALSE(f[0].t_off);
  const auto map = intervals(f, 250.0);
  ASSERT_EQ(map.beats.size(), 1u);
  EXPECT_FALSE(map.beats[0][Interval::st_segment]);
  EXPECT_FALSE(map.beats[0][Interval::t_wave]);
  EXPECT_FALSE(map.beats[0].has(Interval::q_t));
  EXPECT_TRUE(map.beats[0][Interval::qrs]);
}

TEST(Delineate, EmptyPeaksRejected) {
  const std::vector<double> x(1000, 0.0);
  EXPECT_THROW(delineate(x, RPeakList{{}, 250.0}, 250.0), std::invalid_argument);
}

TEST(Intervals, DisjointAndCovering) {
  const auto syn = clean(70.0, 8.0, 0.5);
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  const auto map = intervals(delineate(syn.record.samples, peaks, 250.0), 250.0);
  ASSERT_FALSE(map.beats.empty());
  std::size_t full = 0;
  for (std::size_t k = 0; k < map.beats.size(); ++k) {
    const auto& b = map.beats[k];
    std::vector<SampleRange> present;
    for (Interval i : kBaseIntervals)
      if (b[i]) present.push_back(*b[i]);
    for (std::size_t i = 0; i < present.size(); ++i)
      for (std::size_t j = i + 1; j < present.size(); ++j)
        EXPECT_TRUE(present[i].end <= present[j].begin || present[j].end <= present[i].begin);
    if (present.size() == kBaseIntervalCount) {
      ++full;
      // Contiguous from P onset to the next P onset.
      std::sort(present.begin(), present.end(), [](auto a, auto c) { return a.begin < c.begin; });
      for (std::size_t i = 1; i < present.size(); ++i) EXPECT_EQ(present[i - 1].end, present[i].begin);
      ASSERT_LT(k + 1, map.beats.size());
      EXPECT_EQ(present.back().end, map.beats[k + 1][Interval::p_wave]->begin);
    }
  }
  EXPECT_GE(full, 5u);
}

TEST(Intervals, LastBeatHasNoBaseline) {
  const auto syn = clean(60.0);
  const auto peaks = pan_tompkins(syn.record.samples, 250.0);
  const auto map = intervals(delineate(syn.record.samples, peaks, 250.0), 250.0);
  ASSERT_FALSE(map.beats.empty());
  EXPECT_FALSE(map.beats.back()[Interval::tq_baseline]);
  const auto one = intervals(delineate(syn.record.samples, RPeakList{{peaks.indices[3]}, 250.0}, 250.0), 250.0);
  ASSERT_EQ(one.beats.size(), 1u);
  EXPECT_FALSE(one.beats[0][Interval::tq_baseline]);
}

TEST(Intervals, CompositesAreUnions) {
  BeatFiducials b{10, 30, 40, 50, 60, 90, 130};
  const auto map = intervals(std::vector<BeatFiducials>{b}, 250.0);
  const auto& bi = map.beats.at(0);
  EXPECT_EQ(*bi[Interval::p_wave], (SampleRange{10, 30}));
  EXPECT_EQ(*bi[Interval::pq_segment], (SampleRange{30, 40}));
  EXPECT_EQ(*bi[Interval::qrs], (SampleRange{40, 61}));
  EXPECT_EQ(*bi[Interval::st_segment], (SampleRange{61, 90}));
  EXPECT_EQ(*bi[Interval::t_wave], (SampleRange{90, 130}));
  EXPECT_EQ(bi.ranges(Interval::q_t).size(), 3u);
  EXPECT_EQ(bi.ranges(Interval::p_r).size(), 2u);
  EXPECT_EQ(bi.ranges(Interval::s_t).size(), 2u);
}

TEST(Intervals, OutOfOrderBeatSkippedWithWarning) {
  test::CapturedWarnings cap;
  BeatFiducials good{10, 30, 40, 50, 60, 90, 130};
  BeatFiducials bad{100, 120, 40, 50, 60, 90, 130};  // P after Q
  const auto map = intervals(std::vector<BeatFiducials>{good, bad}, 250.0);
  EXPECT_EQ(map.beats.size(), 1u);
  EXPECT_EQ(cap.messages.size(), 1u);
}

TEST(Intervals, AmplitudeScalingInvariant) {
  const auto syn = clean(65.0, 8.0, 0.2);
  auto scaled = syn.record.samples;
  for (auto& v : scaled) v *= 3.5;
  const auto a = intervals(delineate(syn.record.samples, pan_tompkins(syn.record.samples, 250.0), 250.0), 250.0);
  const auto b = intervals(delineate(scaled, pan_tompkins(scaled, 250.0), 250.0), 250.0);
  ASSERT_EQ(a.beats.size(), b.beats.size());
  for (std::size_t k = 0; k < a.beats.size(); ++k) EXPECT_EQ(a.beats[k].base, b.beats[k].base);
}
