#pragma once

// Streaming IIR filters, Welch band power and the alpha / artifact detectors.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pieeg/error.hpp"
#include "pieeg/record.hpp"

namespace pieeg::dsp {

// ---------------------------------------------------------------------------
// Filter design
// ---------------------------------------------------------------------------

// One biquad, a0 normalised to 1.
struct Sos {
  double b0{1.0}, b1{0.0}, b2{0.0};
  double a1{0.0}, a2{0.0};
};

struct FilterSpec {
  enum class Kind { bandpass, notch };

  Kind kind{Kind::bandpass};
  double lo_hz{1.0};  // bandpass lower edge, or notch centre
  double hi_hz{40.0};
  double q{30.0};  // notch only
  int order{4};
  int sps{250};

  static FilterSpec bandpass(double lo, double hi, int sps = 250, int order = 4) {
    return {Kind::bandpass, lo, hi, 0.0, order, sps};
  }
  static FilterSpec notch(double center, int sps = 250, double q = 30.0) {
    return {Kind::notch, center, center, q, 2, sps};
  }
};

struct BandDefinition {
  std::string name;
  double lo_hz{0.0};
  double hi_hz{0.0};
};

namespace bands {
inline const BandDefinition alpha_wide{"alpha_wide", 7.0, 15.0};
inline const BandDefinition alpha_observed{"alpha_observed", 9.0, 13.0};
inline const BandDefinition alpha_filter{"alpha_filter", 8.0, 12.0};
inline const BandDefinition artifact_band{"artifact_band", 1.0, 40.0};
inline std::vector<BandDefinition> catalog() { return {alpha_wide, alpha_observed, alpha_filter, artifact_band}; }
}  // namespace bands

inline std::complex<double> response(std::span<const Sos> sections, double f_hz, double sps) {
  const std::complex<double> z1 = std::polar(1.0, -2.0 * std::numbers::pi * f_hz / sps);
  const std::complex<double> z2 = z1 * z1;
  std::complex<double> h{1.0, 0.0};
  for (const auto& s : sections) h *= (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2);
  return h;
}

inline double magnitude(std::span<const Sos> sections, double f_hz, double sps) {
  return std::abs(response(sections, f_hz, sps));
}

inline bool is_stable(std::span<const Sos> sections) {
  // Both roots of z^2 + a1 z + a2 strictly inside the unit circle.
  for (const auto& s : sections)
    if (!(std::abs(s.a2) < 1.0 && std::abs(s.a1) < 1.0 + s.a2)) return false;
  return true;
}

// Butterworth band-pass of `order` (the low-pass prototype order; the result
// has `order` sections and 2*order poles) or a single-section notch.
inline std::vector<Sos> design_filter(const FilterSpec& spec) {
  using cd = std::complex<double>;
  constexpr double pi = std::numbers::pi;
  if (spec.sps <= 0) throw DesignError("sample rate must be positive");
  const double nyq = spec.sps / 2.0;

  if (spec.kind == FilterSpec::Kind::notch) {
    if (!(spec.lo_hz > 0.0 && spec.lo_hz < nyq)) throw DesignError("notch centre must lie in (0, Nyquist)");
    if (!(spec.q > 0.0)) throw DesignError("notch Q must be positive");
    double w0 = spec.lo_hz / nyq;
    double bw = w0 / spec.q;
    double beta = std::tan(bw * pi / 2.0);
    double gain = 1.0 / (1.0 + beta);
    double c = std::cos(w0 * pi);
    return {Sos{gain, -2.0 * gain * c, gain, -2.0 * gain * c, 2.0 * gain - 1.0}};
  }

  if (spec.order < 2 || spec.order % 2 != 0) throw DesignError("filter order must be a positive even integer");
  if (!(spec.lo_hz > 0.0)) throw DesignError("lower band edge must be > 0");
  if (!(spec.hi_hz < nyq)) throw DesignError("upper band edge must be below Nyquist");
  if (!(spec.lo_hz < spec.hi_hz)) throw DesignError("band edges out of order");

  const double fs2 = 2.0 * spec.sps;
  const double w1 = fs2 * std::tan(pi * spec.lo_hz / spec.sps);
  const double w2 = fs2 * std::tan(pi * spec.hi_hz / spec.sps);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;
  const double center = 2.0 * std::atan(std::sqrt(w0sq) / fs2);  // rad/sample

  std::vector<Sos> out;
  const int n = spec.order;
  // Upper-half-plane prototype poles; each yields two band-pass pole pairs.
  for (int k = 0; k < n / 2; ++k) {
    cd p = std::polar(1.0, pi * (2.0 * k + n + 1) / (2.0 * n));
    cd half = p * bw / 2.0;
    cd disc = std::sqrt(half * half - w0sq);
    for (cd s : {half + disc, half - disc}) {
      cd z = (fs2 + s) / (fs2 - s);
      Sos sec{1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)};
      double g = std::abs(response(std::span<const Sos>(&sec, 1), center * spec.sps / (2.0 * pi), spec.sps));
      sec.b0 /= g;
      sec.b2 /= g;
      out.push_back(sec);
    }
  }
  if (!is_stable(out)) throw DesignError("designed cascade is not stable");
  return out;
}

// ---------------------------------------------------------------------------
// Streaming state
// ---------------------------------------------------------------------------

// Transposed direct-form II cascade, one instance per channel.
class FilterState {
 public:
  FilterState() = default;
  explicit FilterState(std::vector<Sos> sections) : sections_(std::move(sections)), z_(sections_.size()) {}

  double process(double x) {
    for (std::size_t i = 0; i < sections_.size(); ++i) {
      const Sos& s = sections_[i];
      auto& z = z_[i];
      double y = s.b0 * x + z[0];
      z[0] = s.b1 * x - s.a1 * y + z[1];
      z[1] = s.b2 * x - s.a2 * y;
      x = y;
    }
    return x;
  }

  void process(std::span<const double> in, std::span<double> out) {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = process(in[i]);
  }

  std::vector<double> process(std::span<const double> in) {
    std::vector<double> out(in.size());
    process(in, out);
    return out;
  }

  void reset() {
    for (auto& z : z_) z = {0.0, 0.0};
  }

  bool is_zero() const {
    for (const auto& z : z_)
      if (z[0] != 0.0 || z[1] != 0.0) return false;
    return true;
  }

  const std::vector<Sos>& sections() const { return sections_; }
  bool empty() const { return sections_.empty(); }

 private:
  std::vector<Sos> sections_;
  std::vector<std::array<double, 2>> z_;
};

// Causal whole-signal filtering.
inline std::vector<double> filter_signal(const std::vector<Sos>& sections, std::span<const double> x) {
  FilterState st(sections);
  return st.process(x);
}

// Forward-backward (zero-phase) filtering with odd-extension padding.
inline std::vector<double> filtfilt(const std::vector<Sos>& sections, std::span<const double> x) {
  if (x.empty()) return {};
  std::size_t n = x.size();
  std::size_t pad = std::min<std::size_t>(n - 1, 3 * (2 * sections.size() + 1));
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);
  auto fwd = filter_signal(sections, ext);
  std::reverse(fwd.begin(), fwd.end());
  auto bwd = filter_signal(sections, fwd);
  std::reverse(bwd.begin(), bwd.end());
  return std::vector<double>(bwd.begin() + static_cast<std::ptrdiff_t>(pad),
                             bwd.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

// ---------------------------------------------------------------------------
// Welch band power
// ---------------------------------------------------------------------------

inline constexpr std::size_t kWelchSegment = 256;

struct WelchEstimate {
  double df{0.0};
  double sps{0.0};
  std::vector<double> psd;  // one-sided density, µV²/Hz, bins 0..N/2

  // Power of bin k spread uniformly over [f_k - df/2, f_k + df/2] ∩ [0, sps/2].
  double integrate(double lo_hz, double hi_hz) const {
    double nyq = sps / 2.0;
    lo_hz = std::max(lo_hz, 0.0);
    hi_hz = std::min(hi_hz, nyq);
    if (!(hi_hz > lo_hz)) return 0.0;
    double total = 0.0;
    for (std::size_t k = 0; k < psd.size(); ++k) {
      double f = k * df;
      double a = std::max(f - df / 2.0, 0.0), b = std::min(f + df / 2.0, nyq);
      double overlap = std::min(b, hi_hz) - std::max(a, lo_hz);
      if (overlap <= 0.0) continue;
      total += psd[k] * df * overlap / (b - a);
    }
    return total;
  }

  double total() const { return integrate(0.0, sps / 2.0); }
};

namespace detail {

class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : n_(n) {
    auto* in = fftw_alloc_real(n);
    auto* out = fftw_alloc_complex(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
  }
  ~FftPlan() { fftw_destroy_plan(plan_); }
  FftPlan(const FftPlan&) = delete;
  FftPlan& operator=(const FftPlan&) = delete;

  // Thread-safe: new-array execution on caller-owned aligned buffers.
  void execute(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(plan_, in, out); }

  static const FftPlan& get(std::size_t n) {
    static std::mutex mu;
    static std::vector<std::unique_ptr<FftPlan>> plans;
    std::lock_guard lk(mu);
    for (const auto& p : plans)
      if (p->n_ == n) return *p;
    plans.push_back(std::make_unique<FftPlan>(n));
    return *plans.back();
  }

 private:
  std::size_t n_;
  fftw_plan plan_;
};

}  // namespace detail

// 256-sample Hann segments, 50 % overlap, per-segment mean removal.
inline WelchEstimate welch(std::span<const double> x, double sps) {
  const std::size_t n = kWelchSegment;
  if (x.size() < n) throw DomainError("band power needs at least 256 samples, got " + std::to_string(x.size()));
  if (!(sps > 0.0)) throw DomainError("sample rate must be positive");
  const std::size_t hop = n / 2;
  const std::size_t segments = 1 + (x.size() - n) / hop;

  std::vector<double> window(n);
  double wsum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n);  // periodic Hann
    wsum2 += window[i] * window[i];
  }

  const auto& plan = detail::FftPlan::get(n);
  double* in = fftw_alloc_real(n);
  fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
  WelchEstimate est;
  est.sps = sps;
  est.df = sps / n;
  est.psd.assign(n / 2 + 1, 0.0);
  for (std::size_t s = 0; s < segments; ++s) {
    const double* seg = x.data() + s * hop;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += seg[i];
    mean /= n;
    for (std::size_t i = 0; i < n; ++i) in[i] = (seg[i] - mean) * window[i];
    plan.execute(in, out);
    for (std::size_t k = 0; k <= n / 2; ++k) {
      double p = out[k][0] * out[k][0] + out[k][1] * out[k][1];
      double scale = (k == 0 || k == n / 2) ? 1.0 : 2.0;
      est.psd[k] += scale * p / (sps * wsum2);
    }
  }
  fftw_free(in);
  fftw_free(out);
  for (auto& p : est.psd) p /= static_cast<double>(segments);
  return est;
}

inline double band_power(std::span<const double> samples, double sps, const BandDefinition& band) {
  if (!(band.lo_hz >= 0.0 && band.lo_hz < band.hi_hz)) throw DomainError("band '" + band.name + "' is empty");
  return welch(samples, sps).integrate(band.lo_hz, band.hi_hz);
}

// ---------------------------------------------------------------------------
// Alpha ratio
// ---------------------------------------------------------------------------

inline constexpr const char* kEyesClosed = "eyes_closed";
inline constexpr const char* kEyesOpen = "eyes_open";
inline constexpr double kMinAlphaIntervalS = 4.0;

struct AlphaRatio {
  double closed_power{0.0};
  double open_power{0.0};
  double ratio{0.0};
  std::size_t closed_intervals{0};
  std::size_t open_intervals{0};
};

// Mean alpha_observed power over eyes-closed intervals divided by the mean
// over eyes-open intervals. `channel` is 0-based.
inline AlphaRatio alpha_ratio(const SessionRecord& record, std::size_t channel,
                              const BandDefinition& band = bands::alpha_observed) {
  if (channel >= protocol::kChannelCount) throw DomainError("channel out of range");
  AlphaRatio out;
  std::vector<double> samples;
  for (const auto& m : record.markers) {
    bool closed = m.label == kEyesClosed, open = m.label == kEyesOpen;
    if (!closed && !open) continue;
    if (m.duration() < kMinAlphaIntervalS - 1e-9) continue;
    std::size_t a = record.frame_at(m.t_start_s - 1e-9), b = record.frame_at(m.t_end_s - 1e-9);
    if (b - a < kWelchSegment) continue;
    samples.clear();
    for (std::size_t i = a; i < b; ++i) samples.push_back(record.uv[i][channel]);
    double p = band_power(samples, record.meta.sps, band);
    if (closed) {
      out.closed_power += p;
      ++out.closed_intervals;
    } else {
      out.open_power += p;
      ++out.open_intervals;
    }
  }
  if (out.closed_intervals == 0 || out.open_intervals == 0)
    throw ProtocolError("alpha ratio needs at least one eyes_closed and one eyes_open interval of >= 4 s");
  out.closed_power /= static_cast<double>(out.closed_intervals);
  out.open_power /= static_cast<double>(out.open_intervals);
  out.ratio = out.open_power > 0.0 ? out.closed_power / out.open_power : std::numeric_limits<double>::infinity();
  return out;
}

// ---------------------------------------------------------------------------
// Artifact bursts
// ---------------------------------------------------------------------------

enum class EventKind { blink, chew, alpha_on, alpha_off, artifact };

inline const char* to_string(EventKind k) {
  switch (k) {
    case EventKind::blink: return "blink";
    case EventKind::chew: return "chew";
    case EventKind::alpha_on: return "alpha_on";
    case EventKind::alpha_off: return "alpha_off";
    case EventKind::artifact: return "artifact";
  }
  return "?";
}

struct DetectionEvent {
  EventKind kind{EventKind::artifact};
  std::size_t channel{0};
  double t_start_s{0.0};
  double t_end_s{0.0};
  double t_peak_s{0.0};
  double magnitude_uv{0.0};
};

struct BurstConfig {
  double threshold_uv{75.0};
  double refractory_s{0.25};
  double group_gap_s{1.5};
  double rms_window_s{0.2};
};

// Centred moving RMS.
inline std::vector<double> moving_rms(std::span<const double> x, std::size_t window) {
  std::vector<double> out(x.size(), 0.0);
  if (x.empty() || window == 0) return out;
  std::vector<double> cum(x.size() + 1, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) cum[i + 1] = cum[i] + x[i] * x[i];
  std::size_t half = window / 2;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t a = i >= half ? i - half : 0;
    std::size_t b = std::min(x.size(), a + window);
    a = b >= window ? b - window : 0;
    out[i] = std::sqrt(std::max(0.0, cum[b] - cum[a]) / static_cast<double>(b - a));
  }
  return out;
}

// Envelope peaks that dominate a +/- refractory neighbourhood and reach the
// threshold. The candidate set does not depend on the threshold, so raising
// it only removes events.
inline std::vector<DetectionEvent> detect_bursts(std::span<const double> samples, double sps,
                                                 const BurstConfig& cfg, std::size_t channel = 0) {
  std::vector<DetectionEvent> events;
  if (samples.empty()) return events;
  auto window = static_cast<std::size_t>(std::lround(cfg.rms_window_s * sps));
  auto env = moving_rms(samples, std::max<std::size_t>(window, 1));
  auto r = static_cast<std::size_t>(std::lround(cfg.refractory_s * sps));
  const std::size_t n = env.size();
  std::vector<std::size_t> peaks;
  for (std::size_t i = 0; i < n; ++i) {
    if (env[i] < cfg.threshold_uv) continue;
    bool dominant = true;
    std::size_t a = i >= r ? i - r : 0, b = std::min(n - 1, i + r);
    for (std::size_t j = a; j <= b && dominant; ++j) {
      if (j < i && env[j] >= env[i]) dominant = false;
      if (j > i && env[j] > env[i]) dominant = false;
    }
    if (dominant) peaks.push_back(i);
  }
  for (std::size_t k = 0; k < peaks.size(); ++k) {
    std::size_t p = peaks[k];
    std::size_t lo_limit = k == 0 ? 0 : (peaks[k - 1] + p) / 2 + 1;
    std::size_t hi_limit = k + 1 == peaks.size() ? n - 1 : (p + peaks[k + 1]) / 2;
    std::size_t a = p, b = p;
    while (a > lo_limit && env[a - 1] >= cfg.threshold_uv) --a;
    while (b < hi_limit && env[b + 1] >= cfg.threshold_uv) ++b;
    events.push_back({EventKind::artifact, channel, a / sps, (b + 1) / sps, p / sps, env[p]});
  }
  return events;
}

// Events (already in time order) whose peaks are closer than group_gap_s
// share a group.
inline std::vector<int> group_counts(const std::vector<DetectionEvent>& events, double group_gap_s) {
  std::vector<int> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i == 0 || events[i].t_peak_s - events[i - 1].t_peak_s >= group_gap_s) out.push_back(0);
    ++out.back();
  }
  return out;
}

// Input is expected to be band-passed 1-40 Hz already.
inline std::vector<int> count_artifact_bursts(std::span<const double> samples, double sps,
                                              const BurstConfig& cfg = {}) {
  return group_counts(detect_bursts(samples, sps, cfg), cfg.group_gap_s);
}

// Labels each event blink or chew by comparing low-band (1-8 Hz) and
// high-band (15-40 Hz) energy around its peak.
inline void classify_artifacts(std::vector<DetectionEvent>& events, std::span<const double> filtered, double sps) {
  if (events.empty()) return;
  auto lo = filtfilt(design_filter(FilterSpec::bandpass(1.0, 8.0, static_cast<int>(sps))), filtered);
  auto hi = filtfilt(design_filter(FilterSpec::bandpass(15.0, std::min(40.0, 0.45 * sps), static_cast<int>(sps))),
                     filtered);
  for (auto& e : events) {
    auto a = static_cast<std::size_t>(std::max(0.0, (e.t_peak_s - 0.25) * sps));
    auto b = std::min(filtered.size(), static_cast<std::size_t>((e.t_peak_s + 0.25) * sps) + 1);
    double el = 0.0, eh = 0.0;
    for (std::size_t i = a; i < b; ++i) {
      el += lo[i] * lo[i];
      eh += hi[i] * hi[i];
    }
    e.kind = eh > el ? EventKind::chew : EventKind::blink;
  }
}

inline std::vector<DetectionEvent> events_of(const std::vector<DetectionEvent>& all, EventKind kind) {
  std::vector<DetectionEvent> out;
  for (const auto& e : all)
    if (e.kind == kind) out.push_back(e);
  return out;
}

struct ArtifactCounts {
  std::vector<int> chew;
  std::vector<int> blink;
  std::vector<DetectionEvent> events;  // classified, time ordered
};

// Detects, classifies and groups each artifact kind on its own track.
inline ArtifactCounts count_artifacts_by_kind(std::span<const double> filtered, double sps, const BurstConfig& cfg = {},
                                              std::size_t channel = 0) {
  ArtifactCounts out;
  out.events = detect_bursts(filtered, sps, cfg, channel);
  classify_artifacts(out.events, filtered, sps);
  out.chew = group_counts(events_of(out.events, EventKind::chew), cfg.group_gap_s);
  out.blink = group_counts(events_of(out.events, EventKind::blink), cfg.group_gap_s);
  return out;
}

// ---------------------------------------------------------------------------
// Live alpha tracking
// ---------------------------------------------------------------------------

// Hysteretic on/off detector over a sliding window of alpha_observed power.
class AlphaTracker {
 public:
  AlphaTracker(double sps = 250, double window_s = 2.0, double on_uv2 = 200.0, double off_uv2 = 100.0)
      : sps_(sps), window_(static_cast<std::size_t>(window_s * sps)), on_(on_uv2), off_(off_uv2) {
    if (window_ < kWelchSegment) window_ = kWelchSegment;
  }

  // Feeds a block; returns a transition event (if any) and the current power.
  std::optional<DetectionEvent> update(std::span<const double> block, double t_end_s, std::size_t channel) {
    history_.insert(history_.end(), block.begin(), block.end());
    if (history_.size() > window_) history_.erase(history_.begin(), history_.end() - static_cast<std::ptrdiff_t>(window_));
    if (history_.size() < window_) return std::nullopt;
    power_ = band_power(history_, sps_, bands::alpha_observed);
    if (!on_state_ && power_ >= on_) {
      on_state_ = true;
      since_ = t_end_s - static_cast<double>(window_) / sps_;
      return DetectionEvent{EventKind::alpha_on, channel, since_, t_end_s, t_end_s, std::sqrt(2.0 * power_)};
    }
    if (on_state_ && power_ <= off_) {
      on_state_ = false;
      return DetectionEvent{EventKind::alpha_off, channel, since_, t_end_s, t_end_s, std::sqrt(2.0 * power_)};
    }
    return std::nullopt;
  }

  double power() const { return power_; }
  bool active() const { return on_state_; }

 private:
  double sps_;
  std::size_t window_;
  double on_, off_;
  std::vector<double> history_;
  double power_{0.0};
  bool on_state_{false};
  double since_{0.0};
};

}  // namespace pieeg::dsp
