#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include "pieeg/dsp.hpp"
#include "pieeg/simdevice.hpp"

using namespace pieeg;
using namespace pieeg::dsp;
constexpr double kPi = std::numbers::pi;

namespace {

// Analytic magnitude of a bilinear-transformed Butterworth band-pass of
// prototype order n, evaluated independently of the pole placement.
double butterworth_oracle(double f, double lo, double hi, double fs, int n) {
  auto warp = [fs](double x) { return 2.0 * fs * std::tan(kPi * x / fs); };
  double w = warp(f), w1 = warp(lo), w2 = warp(hi);
  double x = (w * w - w1 * w2) / (w * (w2 - w1));
  return 1.0 / std::sqrt(1.0 + std::pow(x * x, n));
}

std::vector<double> sine(double f, double amp, double sps, std::size_t n, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2 * kPi * f * static_cast<double>(i) / sps + phase);
  return x;
}

std::vector<double> gaussian(std::size_t n, double rms, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, rms);
  std::vector<double> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

SessionRecord record_of(const sim::SignalScenario& sc) {
  SessionRecord r;
  r.meta.sps = sc.sps;
  auto n = static_cast<std::size_t>(std::llround(sc.duration_s * sc.sps));
  for (std::size_t i = 0; i < n; ++i) {
    double t = static_cast<double>(i) / sc.sps;
    ChannelValues v;
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = sim::synth_sample(sc, c + 1, t);
    r.append(t, v);
  }
  r.markers = sc.markers;
  return r;
}

std::vector<double> artifact_channel(std::uint64_t seed, std::size_t channel = 1) {
  auto sc = sim::make_artifact_test(sim::artifact_test_min_duration() + 2.0, seed);
  auto n = static_cast<std::size_t>(sc.duration_s * sc.sps);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = sim::synth_sample(sc, channel, static_cast<double>(i) / sc.sps);
  return filtfilt(design_filter(FilterSpec::bandpass(1, 40)), x);
}

}  // namespace

TEST(Design, MatchesAnalyticButterworth) {
  for (auto [lo, hi] : {std::pair{8.0, 12.0}, {1.0, 40.0}, {9.0, 13.0}, {0.5, 100.0}}) {
    for (int order : {2, 4, 6}) {
      auto sos = design_filter(FilterSpec::bandpass(lo, hi, 250, order));
      ASSERT_EQ(sos.size(), static_cast<std::size_t>(order));
      for (double f = 0.25; f < 125.0; f += 0.25)
        ASSERT_NEAR(magnitude(sos, f, 250), butterworth_oracle(f, lo, hi, 250, order), 1e-9)
            << lo << "-" << hi << " order " << order << " f " << f;
    }
  }
}

TEST(Design, AlphaFilterExamples) {
  auto sos = design_filter(FilterSpec::bandpass(8, 12));
  double g10 = magnitude(sos, 10, 250);
  EXPECT_GE(g10, 0.95);
  EXPECT_LE(g10, 1.05);
  EXPECT_LE(magnitude(sos, 50, 250), 0.01);
  EXPECT_LE(magnitude(sos, 2, 250), 0.01);
  // One octave outside both edges.
  EXPECT_LE(20 * std::log10(magnitude(sos, 4, 250)), -40.0);
  EXPECT_LE(20 * std::log10(magnitude(sos, 24, 250)), -40.0);
  EXPECT_TRUE(is_stable(sos));
}

TEST(Design, WideBandExamples) {
  auto sos = design_filter(FilterSpec::bandpass(1, 40));
  EXPECT_EQ(std::abs(response(sos, 0.0, 250)), 0.0);
  double centre = std::sqrt(1.0 * 40.0);
  EXPECT_NEAR(magnitude(sos, centre, 250), 1.0, 0.05);
  EXPECT_NEAR(magnitude(sos, 10, 250), 1.0, 0.05);
}

TEST(Design, Errors) {
  EXPECT_THROW(design_filter(FilterSpec::bandpass(8, 125)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::bandpass(8, 130)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::bandpass(0, 12)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::bandpass(12, 8)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::bandpass(8, 12, 250, 3)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::notch(0)), DesignError);
  EXPECT_THROW(design_filter(FilterSpec::notch(50, 250, 0)), DesignError);
}

TEST(Design, NotchRemovesMains) {
  auto sos = design_filter(FilterSpec::notch(50));
  EXPECT_LT(magnitude(sos, 50, 250), 1e-9);
  EXPECT_NEAR(magnitude(sos, 10, 250), 1.0, 0.01);
  EXPECT_TRUE(is_stable(sos));
}

TEST(Stream, ZeroBlockLeavesStateZero) {
  FilterState st(design_filter(FilterSpec::bandpass(1, 40)));
  std::vector<double> zeros(500, 0.0);
  auto y = st.process(zeros);
  for (double v : y) EXPECT_EQ(v, 0.0);
  EXPECT_TRUE(st.is_zero());
}

TEST(Stream, SplitEqualsWhole) {
  auto sos = design_filter(FilterSpec::bandpass(1, 40));
  auto x = gaussian(1000, 30.0, 5);
  auto whole = filter_signal(sos, x);
  FilterState st(sos);
  std::vector<double> pieces;
  for (std::size_t b = 0; b < 10; ++b) {
    auto y = st.process(std::span<const double>(x).subspan(b * 100, 100));
    pieces.insert(pieces.end(), y.begin(), y.end());
  }
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_LE(std::abs(pieces[i] - whole[i]), 1e-9);
  // Uneven split points too.
  st.reset();
  EXPECT_TRUE(st.is_zero());
  std::mt19937 rng(1);
  std::size_t pos = 0;
  std::vector<double> uneven;
  while (pos < x.size()) {
    std::size_t len = std::min<std::size_t>(x.size() - pos, 1 + rng() % 97);
    auto y = st.process(std::span<const double>(x).subspan(pos, len));
    uneven.insert(uneven.end(), y.begin(), y.end());
    pos += len;
  }
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_LE(std::abs(uneven[i] - whole[i]), 1e-9);
}

TEST(Stream, SteadyStateAmplitude) {
  auto sos = design_filter(FilterSpec::bandpass(8, 12));
  auto y = filter_signal(sos, sine(10, 50, 250, 1000));
  // Least-squares amplitude on the last 2 s.
  double s = 0, c = 0;
  for (std::size_t i = 500; i < 1000; ++i) {
    double ph = 2 * kPi * 10 * static_cast<double>(i) / 250;
    s += y[i] * std::sin(ph);
    c += y[i] * std::cos(ph);
  }
  EXPECT_NEAR(2.0 / 500 * std::hypot(s, c), 50.0, 2.5);
}

TEST(Stream, Linearity) {
  auto sos = design_filter(FilterSpec::bandpass(1, 40));
  auto x = gaussian(2000, 20, 1), y = gaussian(2000, 50, 2);
  const double a = 3.7, b = -0.45;
  std::vector<double> mix(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) mix[i] = a * x[i] + b * y[i];
  auto fx = filter_signal(sos, x), fy = filter_signal(sos, y), fm = filter_signal(sos, mix);
  for (std::size_t i = 0; i < x.size(); ++i) {
    double want = a * fx[i] + b * fy[i];
    double scale = std::max({1.0, std::abs(a * fx[i]), std::abs(b * fy[i])});
    ASSERT_LE(std::abs(fm[i] - want), 1e-9 * scale);
  }
}

TEST(Stream, BoundedOverMillionSamples) {
  for (auto spec : {FilterSpec::bandpass(1, 40), FilterSpec::bandpass(8, 12), FilterSpec::notch(50)}) {
    FilterState st(design_filter(spec));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-1000, 1000);
    double peak = 0;
    for (int i = 0; i < 1000000; ++i) peak = std::max(peak, std::abs(st.process(d(rng))));
    EXPECT_LT(peak, 1e4);
  }
  // Impulse response energy decays to nothing.
  FilterState st(design_filter(FilterSpec::bandpass(8, 12)));
  double energy = 0, tail = 0;
  for (int i = 0; i < 20000; ++i) {
    double y = st.process(i == 0 ? 1.0 : 0.0);
    energy += y * y;
    if (i >= 19000) tail += y * y;
  }
  EXPECT_TRUE(std::isfinite(energy));
  EXPECT_LT(tail, 1e-20);
}

TEST(Filtfilt, ZeroPhaseAtCentre) {
  auto sos = design_filter(FilterSpec::bandpass(8, 12));
  auto x = sine(10, 50, 250, 2500);
  auto y = filtfilt(sos, x);
  // Mid-signal: no phase lag, amplitude |H|^2.
  for (std::size_t i = 1000; i < 1500; ++i) ASSERT_NEAR(y[i], x[i], 1.0);
  EXPECT_TRUE(filtfilt(sos, std::vector<double>{}).empty());
}

TEST(BandPower, ZeroAndShortWindows) {
  std::vector<double> z(1000, 0.0);
  EXPECT_EQ(band_power(z, 250, bands::alpha_observed), 0.0);
  EXPECT_THROW(band_power(std::vector<double>(255, 1.0), 250, bands::alpha_observed), DomainError);
}

TEST(BandPower, SinePowerParseval) {
  for (double amp : {1.0, 50.0, 100.0}) {
    auto x = sine(10, amp, 250, 1000, 0.3);
    double p = band_power(x, 250, bands::alpha_observed);
    EXPECT_NEAR(p, amp * amp / 2, 0.1 * amp * amp / 2);
    EXPECT_LE(band_power(x, 250, {"beta", 20, 30}), 0.01 * amp * amp / 2);
  }
}

TEST(BandPower, ScaleEquivariant) {
  auto x = gaussian(1000, 10, 4);
  double p = band_power(x, 250, bands::alpha_wide);
  for (double k : {0.5, 3.0, -2.0}) {
    std::vector<double> y(x);
    for (auto& v : y) v *= k;
    EXPECT_NEAR(band_power(y, 250, bands::alpha_wide), k * k * p, 1e-9 * k * k * p);
  }
}

TEST(BandPower, DisjointCoverSumsToTotal) {
  auto x = gaussian(3000, 10, 8);
  auto est = welch(x, 250);
  double total = est.total();
  // Variance of the mean-removed signal within Hann-window bias.
  double mean = 0, var = 0;
  for (double v : x) mean += v / static_cast<double>(x.size());
  for (double v : x) var += (v - mean) * (v - mean) / static_cast<double>(x.size());
  EXPECT_NEAR(total, var, 0.1 * var);
  std::mt19937 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> edges{0.0, 125.0};
    for (int k = 0; k < 6; ++k) edges.push_back(std::uniform_real_distribution<double>(0, 125)(rng));
    std::sort(edges.begin(), edges.end());
    double sum = 0;
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) sum += est.integrate(edges[i], edges[i + 1]);
    EXPECT_NEAR(sum, total, 0.01 * total);
  }
}

TEST(AlphaRatio, PresetExceedsFive) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto rec = record_of(sim::make_alpha_test(30, seed));
    for (std::size_t ch = 0; ch < 16; ++ch) {
      auto r = alpha_ratio(rec, ch);
      EXPECT_GE(r.ratio, 5.0) << "seed " << seed << " ch " << ch;
      EXPECT_GT(r.closed_power, r.open_power);
      EXPECT_EQ(r.closed_intervals, 3u);
      EXPECT_EQ(r.open_intervals, 3u);
    }
  }
}

TEST(AlphaRatio, SymmetricControlNearOne) {
  auto rec = record_of(sim::make_alpha_control(60, 1));
  for (std::size_t ch = 0; ch < 16; ++ch) EXPECT_NEAR(alpha_ratio(rec, ch).ratio, 1.0, 0.2) << ch;
}

TEST(AlphaRatio, MissingConditionIsProtocolError) {
  auto rec = record_of(sim::make_alpha_test(10, 1));
  rec.markers.erase(rec.markers.begin());  // drop the only closed interval
  EXPECT_THROW(alpha_ratio(rec, 0), ProtocolError);
  rec.markers.clear();
  EXPECT_THROW(alpha_ratio(rec, 0), ProtocolError);
  EXPECT_THROW(alpha_ratio(record_of(sim::make_alpha_test(10, 1)), 16), DomainError);
}

TEST(Bursts, EmptyAndNoiseOnly) {
  EXPECT_TRUE(count_artifact_bursts(std::vector<double>{}, 250).empty());
  auto noise = filtfilt(design_filter(FilterSpec::bandpass(1, 40)), gaussian(7500, 10, 11));
  EXPECT_TRUE(count_artifact_bursts(noise, 250).empty());
}

TEST(Bursts, SyntheticGroups) {
  // Rectangular 200 uV bursts, 0.3 s long, grouped 2 then 1.
  std::vector<double> x(2500, 0.0);
  for (double onset : {1.0, 1.8, 5.0})
    for (std::size_t i = 0; i < 75; ++i) x[static_cast<std::size_t>(onset * 250) + i] = (i % 2 ? 200.0 : -200.0);
  auto ev = detect_bursts(x, 250, {});
  ASSERT_EQ(ev.size(), 3u);
  for (const auto& e : ev) {
    EXPECT_LT(e.t_start_s, e.t_end_s);
    EXPECT_LE(e.t_start_s, e.t_peak_s);
    EXPECT_LE(e.t_peak_s, e.t_end_s);
  }
  EXPECT_EQ(group_counts(ev, 1.5), (std::vector<int>{2, 1}));
  EXPECT_EQ(group_counts(ev, 0.5), (std::vector<int>{1, 1, 1}));
}

TEST(Bursts, ArtifactPresetTracksForTenSeeds) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto counts = count_artifacts_by_kind(artifact_channel(seed), 250);
    EXPECT_EQ(counts.chew, (std::vector<int>{4, 3, 2, 1})) << "seed " << seed;
    EXPECT_EQ(counts.blink, (std::vector<int>{4, 3, 2, 1})) << "seed " << seed;
  }
}

TEST(Bursts, ClassificationMatchesMarkers) {
  auto sc = sim::make_artifact_test(sim::artifact_test_min_duration() + 2.0, 4);
  auto counts = count_artifacts_by_kind(artifact_channel(4, 7), 250);
  ASSERT_EQ(counts.events.size(), 20u);
  for (const auto& e : counts.events) {
    const Marker* hit = nullptr;
    for (const auto& m : sc.markers)
      if (m.contains(e.t_peak_s)) hit = &m;
    ASSERT_NE(hit, nullptr) << e.t_peak_s;
    EXPECT_EQ(hit->label, to_string(e.kind));
  }
}

TEST(Bursts, MonotoneInThreshold) {
  auto x = artifact_channel(2);
  std::vector<int> prev;
  bool first = true;
  for (double thr = 10; thr <= 200; thr += 5) {
    BurstConfig cfg;
    cfg.threshold_uv = thr;
    auto ev = detect_bursts(x, 250, cfg);
    auto total = static_cast<int>(ev.size());
    if (!first) {
      EXPECT_LE(total, std::accumulate(prev.begin(), prev.end(), 0)) << thr;
    }
    prev = group_counts(ev, cfg.group_gap_s);
    first = false;
  }
  std::mt19937 rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    double lo = std::uniform_real_distribution<double>(20, 150)(rng);
    double hi = lo + std::uniform_real_distribution<double>(0, 50)(rng);
    BurstConfig a, b;
    a.threshold_uv = lo;
    b.threshold_uv = hi;
    auto ea = detect_bursts(x, 250, a), eb = detect_bursts(x, 250, b);
    // Events at a higher threshold are a subset of those at a lower one.
    for (const auto& e : eb)
      EXPECT_TRUE(std::any_of(ea.begin(), ea.end(), [&](const DetectionEvent& o) { return o.t_peak_s == e.t_peak_s; }));
    auto ga = group_counts(ea, 1.5), gb = group_counts(eb, 1.5);
    EXPECT_LE(gb.size(), ea.size());
    if (!gb.empty()) {
      EXPECT_LE(*std::max_element(gb.begin(), gb.end()), *std::max_element(ga.begin(), ga.end()));
    }
  }
}

TEST(AlphaTracker, OnThenOff) {
  AlphaTracker tr;
  std::vector<DetectionEvent> events;
  auto closed = sine(10, 50, 250, 250 * 6);
  auto open = gaussian(250 * 6, 10, 3);
  double t = 0;
  for (auto* src : {&closed, &open}) {
    for (std::size_t b = 0; b < 6; ++b) {
      t += 1.0;
      auto e = tr.update(std::span<const double>(*src).subspan(b * 250, 250), t, 0);
      if (e) events.push_back(*e);
    }
  }
  ASSERT_EQ(events.size(), 2u);
  EXPECT_EQ(events[0].kind, EventKind::alpha_on);
  EXPECT_EQ(events[1].kind, EventKind::alpha_off);
  EXPECT_GT(events[1].t_end_s, 6.0);
  EXPECT_FALSE(tr.active());
}
