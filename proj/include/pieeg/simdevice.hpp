#pragma once

// Simulated ADS1299 daisy-chained pair and the scripted signal generator
// that feeds it.

#include <algorithm>
#include <bitset>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "pieeg/error.hpp"
#include "pieeg/marker.hpp"
#include "pieeg/protocol.hpp"

namespace pieeg::sim {

using protocol::kChannelCount;

// ---------------------------------------------------------------------------
// Scenario components
// ---------------------------------------------------------------------------

struct Sine {
  double freq_hz{10.0};
  double amplitude_uv{0.0};
  double phase{0.0};
};

struct Gate {
  double start_s{0.0};
  double end_s{0.0};
};

struct GatedSine {
  double freq_hz{10.0};
  double amplitude_uv{0.0};
  double phase{0.0};
  std::vector<Gate> gates;  // half-open [start, end)
};

enum class BurstShape { blink, chew };

inline const char* to_string(BurstShape s) { return s == BurstShape::blink ? "blink" : "chew"; }

struct BurstTrain {
  BurstShape shape{BurstShape::blink};
  std::vector<double> onsets_s;
  std::vector<int> group_counts;
  double peak_uv{0.0};
  double duration_s{0.0};
  double carrier_hz{0.0};  // chew only

  static BurstTrain blink(std::vector<double> onsets, std::vector<int> groups = {}) {
    return {BurstShape::blink, std::move(onsets), std::move(groups), 150.0, 0.3, 0.0};
  }
  static BurstTrain chew(std::vector<double> onsets, std::vector<int> groups = {}) {
    return {BurstShape::chew, std::move(onsets), std::move(groups), 120.0, 0.4, 26.0};
  }
};

struct WhiteNoise {
  double rms_uv{0.0};
};

struct Mains {
  double freq_hz{50.0};
  double amplitude_uv{0.0};
};

struct Drift {
  double slope_uv_per_s{0.0};
};

using Component = std::variant<Sine, GatedSine, BurstTrain, WhiteNoise, Mains, Drift>;

using ChannelMask = std::bitset<kChannelCount>;

inline ChannelMask all_channels() { return ChannelMask{}.set(); }

struct ScenarioComponent {
  ChannelMask channels{all_channels()};
  Component component;
};

struct SignalScenario {
  std::string name;
  double duration_s{0.0};
  int sps{250};
  std::uint64_t seed{1};
  std::vector<ScenarioComponent> components;
  std::vector<Marker> markers;

  void validate() const;
};

// Onsets for groups of bursts: bursts inside a group are `spacing_s` apart,
// groups are separated by `group_gap_s` of silence after the last burst.
inline std::vector<double> grouped_onsets(const std::vector<int>& groups, double start_s,
                                          double spacing_s, double group_gap_s) {
  std::vector<double> out;
  double t = start_s;
  for (int n : groups) {
    for (int i = 0; i < n; ++i) {
      out.push_back(t);
      t += spacing_s;
    }
    t += group_gap_s - spacing_s;
  }
  return out;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Random-access standard normal variate keyed by (seed, stream, index).
inline double gaussian(std::uint64_t seed, std::uint64_t stream, std::int64_t index) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(stream * 0x100000001B3ull ^
                                                 static_cast<std::uint64_t>(index)));
  std::uint64_t h2 = splitmix64(h);
  double u1 = (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
  double u2 = static_cast<double>(h2 >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline double tukey(double x, double taper) {  // x in [0,1], taper fraction per side
  if (x < taper) return 0.5 * (1.0 - std::cos(std::numbers::pi * x / taper));
  if (x > 1.0 - taper) return 0.5 * (1.0 - std::cos(std::numbers::pi * (1.0 - x) / taper));
  return 1.0;
}

inline double burst_value(const BurstTrain& b, double t) {
  double v = 0.0;
  for (double onset : b.onsets_s) {
    double tau = t - onset;
    if (tau < 0.0 || tau >= b.duration_s) continue;
    double x = tau / b.duration_s;
    if (b.shape == BurstShape::blink) {
      // single positive lobe with raised-cosine flanks; a narrower lobe loses
      // too much energy below the 1 Hz analysis edge
      v += b.peak_uv * tukey(x, 0.25);
    } else {
      v += b.peak_uv * tukey(x, 0.25) * std::sin(2.0 * std::numbers::pi * b.carrier_hz * tau);
    }
  }
  return v;
}

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace detail

inline void SignalScenario::validate() const {
  if (!(duration_s >= 0.0)) throw DomainError("scenario duration must be >= 0");
  if (sps <= 0) throw DomainError("scenario sps must be positive");
  auto in_span = [&](double t) { return t >= 0.0 && t <= duration_s; };
  auto amp = [](double a, const char* what) {
    if (!(a >= 0.0)) throw DomainError(std::string(what) + " amplitude must be >= 0");
  };
  for (const auto& sc : components) {
    std::visit(detail::overloaded{
                   [&](const Sine& s) { amp(s.amplitude_uv, "sine"); },
                   [&](const GatedSine& g) {
                     amp(g.amplitude_uv, "gated sine");
                     for (const auto& gate : g.gates)
                       if (!in_span(gate.start_s) || !in_span(gate.end_s) || gate.end_s < gate.start_s)
                         throw DomainError("gate outside scenario span");
                   },
                   [&](const BurstTrain& b) {
                     amp(b.peak_uv, "burst");
                     for (double o : b.onsets_s)
                       if (!in_span(o) || !in_span(std::min(o + b.duration_s, duration_s)) ||
                           o + b.duration_s > duration_s)
                         throw DomainError("burst outside scenario span");
                   },
                   [&](const WhiteNoise& n) { amp(n.rms_uv, "noise"); },
                   [&](const Mains& m) {
                     amp(m.amplitude_uv, "mains");
                     if (m.freq_hz != 50.0 && m.freq_hz != 60.0)
                       throw DomainError("mains frequency must be 50 or 60 Hz");
                   },
                   [&](const Drift&) {},
               },
               sc.component);
  }
  for (const auto& m : markers)
    if (!in_span(m.t_start_s) || !in_span(m.t_end_s) || m.t_end_s < m.t_start_s)
      throw DomainError("marker '" + m.label + "' outside scenario span");
}

// Sum of every component active on `channel` (1-based) at time t_s.
inline double synth_sample(const SignalScenario& sc, std::size_t channel, double t_s) {
  if (channel < 1 || channel > kChannelCount)
    throw DomainError("channel " + std::to_string(channel) + " outside [1,16]");
  if (t_s < 0.0 || t_s > sc.duration_s)
    throw DomainError("time " + std::to_string(t_s) + " s outside scenario span");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::size_t ch = channel - 1;
  double v = 0.0;
  for (std::size_t i = 0; i < sc.components.size(); ++i) {
    const auto& c = sc.components[i];
    if (!c.channels.test(ch)) continue;
    v += std::visit(
        detail::overloaded{
            [&](const Sine& s) { return s.amplitude_uv * std::sin(two_pi * s.freq_hz * t_s + s.phase); },
            [&](const GatedSine& g) {
              for (const auto& gate : g.gates)
                if (t_s >= gate.start_s && t_s < gate.end_s)
                  return g.amplitude_uv * std::sin(two_pi * g.freq_hz * t_s + g.phase);
              return 0.0;
            },
            [&](const BurstTrain& b) { return detail::burst_value(b, t_s); },
            [&](const WhiteNoise& n) {
              if (n.rms_uv == 0.0) return 0.0;
              auto idx = static_cast<std::int64_t>(std::llround(t_s * sc.sps));
              return n.rms_uv * detail::gaussian(sc.seed, i * kChannelCount + ch, idx);
            },
            [&](const Mains& m) { return m.amplitude_uv * std::sin(two_pi * m.freq_hz * t_s); },
            [&](const Drift& d) { return d.slope_uv_per_s * t_s; },
        },
        c.component);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

struct PresetLayout {
  static constexpr double epoch_s = 5.0;
  static constexpr double alpha_freq_hz = 10.0;
  static constexpr double alpha_amplitude_uv = 50.0;
  static constexpr double noise_rms_uv = 10.0;
  static constexpr double burst_start_s = 2.0;
  static constexpr double burst_spacing_s = 0.9;
  static constexpr double burst_group_gap_s = 3.0;
  static constexpr double section_gap_s = 4.0;
  static inline const std::vector<int> burst_groups{4, 3, 2, 1};
};

// Alternating closed/open epochs starting with eyes closed at t = 0.
inline std::vector<Marker> alternating_epochs(double duration_s, double epoch_s) {
  std::vector<Marker> out;
  bool closed = true;
  for (double t = 0.0; t + epoch_s <= duration_s + 1e-9; t += epoch_s, closed = !closed)
    out.push_back({closed ? "eyes_closed" : "eyes_open", t, t + epoch_s});
  return out;
}

inline SignalScenario make_alpha_test(double duration_s, std::uint64_t seed) {
  using L = PresetLayout;
  SignalScenario sc{"alpha_test", duration_s, 250, seed, {}, alternating_epochs(duration_s, L::epoch_s)};
  GatedSine alpha{L::alpha_freq_hz, L::alpha_amplitude_uv, 0.0, {}};
  for (const auto& m : sc.markers)
    if (m.label == "eyes_closed") alpha.gates.push_back({m.t_start_s, m.t_end_s});
  sc.components.push_back({all_channels(), alpha});
  sc.components.push_back({all_channels(), WhiteNoise{L::noise_rms_uv}});
  return sc;
}

// Same markers as alpha_test, identical signal in both conditions.
inline SignalScenario make_alpha_control(double duration_s, std::uint64_t seed) {
  using L = PresetLayout;
  SignalScenario sc{"alpha_control", duration_s, 250, seed, {}, alternating_epochs(duration_s, L::epoch_s)};
  sc.components.push_back({all_channels(), Sine{L::alpha_freq_hz, L::alpha_amplitude_uv, 0.0}});
  sc.components.push_back({all_channels(), WhiteNoise{L::noise_rms_uv}});
  return sc;
}

inline double artifact_test_min_duration() {
  using L = PresetLayout;
  auto chew = grouped_onsets(L::burst_groups, L::burst_start_s, L::burst_spacing_s, L::burst_group_gap_s);
  double blink_start = chew.back() + L::section_gap_s;
  auto blink = grouped_onsets(L::burst_groups, blink_start, L::burst_spacing_s, L::burst_group_gap_s);
  return std::ceil(blink.back() + 2.0 + L::burst_start_s);
}

// Chew bursts grouped 4,3,2,1 followed by blink bursts grouped 4,3,2,1.
inline SignalScenario make_artifact_test(double duration_s, std::uint64_t seed) {
  using L = PresetLayout;
  duration_s = std::max(duration_s, artifact_test_min_duration());
  SignalScenario sc{"artifact_test", duration_s, 250, seed, {}, {}};
  auto chew_on = grouped_onsets(L::burst_groups, L::burst_start_s, L::burst_spacing_s, L::burst_group_gap_s);
  auto blink_on = grouped_onsets(L::burst_groups, chew_on.back() + L::section_gap_s,
                                 L::burst_spacing_s, L::burst_group_gap_s);
  auto chew = BurstTrain::chew(chew_on, L::burst_groups);
  auto blink = BurstTrain::blink(blink_on, L::burst_groups);
  for (double o : chew_on) sc.markers.push_back({"chew", o, o + chew.duration_s});
  for (double o : blink_on) sc.markers.push_back({"blink", o, o + blink.duration_s});
  sc.components.push_back({all_channels(), std::move(chew)});
  sc.components.push_back({all_channels(), std::move(blink)});
  sc.components.push_back({all_channels(), WhiteNoise{L::noise_rms_uv}});
  return sc;
}

inline SignalScenario make_mains_noise(double duration_s, std::uint64_t seed) {
  SignalScenario sc{"mains_noise", duration_s, 250, seed, {}, {}};
  sc.components.push_back({all_channels(), Mains{50.0, 20.0}});
  sc.components.push_back({all_channels(), WhiteNoise{PresetLayout::noise_rms_uv}});
  return sc;
}

inline SignalScenario make_zero(double duration_s, std::uint64_t seed) {
  return SignalScenario{"zero", duration_s, 250, seed, {}, {}};
}

inline std::map<std::string, SignalScenario> scenario_presets(double duration_s = 60.0,
                                                              std::uint64_t seed = 1) {
  std::map<std::string, SignalScenario> out;
  out.emplace("alpha_test", make_alpha_test(duration_s, seed));
  out.emplace("alpha_control", make_alpha_control(duration_s, seed));
  out.emplace("artifact_test", make_artifact_test(duration_s, seed));
  out.emplace("mains_noise", make_mains_noise(duration_s, seed));
  out.emplace("zero", make_zero(duration_s, seed));
  return out;
}

inline std::optional<SignalScenario> find_preset(const std::string& name, double duration_s,
                                                 std::uint64_t seed) {
  auto all = scenario_presets(duration_s, seed);
  auto it = all.find(name);
  if (it == all.end()) return std::nullopt;
  return it->second;
}

// ---------------------------------------------------------------------------
// Declarative scenario files
//
//   # comment
//   name = my_scenario
//   duration_s = 30
//   sps = 250
//   seed = 7
//   component = sine channels=all freq_hz=10 amplitude_uv=50 phase=0
//   component = gated_sine channels=1-8 freq_hz=10 amplitude_uv=50 gates=0:5,10:15
//   component = burst_train channels=5 shape=chew groups=4,3,2,1 start=2 spacing=0.9 gap=3
//   component = burst_train channels=all shape=blink onsets=1.0,2.5
//   component = noise channels=all rms_uv=10
//   component = mains channels=all freq_hz=50 amplitude_uv=20
//   component = drift channels=all slope_uv_per_s=0.5
//   marker = eyes_closed 0 5
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

inline double to_double(const std::string& s, std::size_t line, const std::string& field) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(line, field, "not a number: '" + s + "'");
  }
}

inline ChannelMask parse_channels(const std::string& s, std::size_t line) {
  if (s == "all") return all_channels();
  ChannelMask m;
  for (const auto& part : split(s, ',')) {
    auto dash = part.find('-');
    int lo = 0, hi = 0;
    try {
      if (dash == std::string::npos) {
        lo = hi = std::stoi(part);
      } else {
        lo = std::stoi(part.substr(0, dash));
        hi = std::stoi(part.substr(dash + 1));
      }
    } catch (const std::exception&) {
      throw ParseError(line, "channels", "bad channel list '" + s + "'");
    }
    if (lo < 1 || hi > static_cast<int>(kChannelCount) || lo > hi)
      throw ParseError(line, "channels", "channel outside [1,16]");
    for (int c = lo; c <= hi; ++c) m.set(static_cast<std::size_t>(c - 1));
  }
  return m;
}

}  // namespace detail

inline SignalScenario parse_scenario(std::istream& in) {
  using detail::to_double;
  SignalScenario sc;
  sc.name = "custom";
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    auto hash = raw.find('#');
    std::string text = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    auto eq = text.find('=');
    if (eq == std::string::npos) throw ParseError(line, "", "expected key = value");
    std::string key = detail::trim(text.substr(0, eq));
    std::string value = detail::trim(text.substr(eq + 1));
    if (key == "name") {
      sc.name = value;
    } else if (key == "duration_s") {
      sc.duration_s = to_double(value, line, key);
    } else if (key == "sps") {
      sc.sps = static_cast<int>(to_double(value, line, key));
    } else if (key == "seed") {
      try {
        sc.seed = std::stoull(value);
      } catch (const std::exception&) {
        throw ParseError(line, key, "not an unsigned integer");
      }
    } else if (key == "marker") {
      std::istringstream ms(value);
      Marker m;
      std::string a, b;
      if (!(ms >> m.label >> a >> b)) throw ParseError(line, key, "expected: label start end");
      m.t_start_s = to_double(a, line, "marker.start");
      m.t_end_s = to_double(b, line, "marker.end");
      sc.markers.push_back(m);
    } else if (key == "component") {
      std::istringstream cs(value);
      std::string kind;
      cs >> kind;
      std::map<std::string, std::string> kv;
      std::string tok;
      while (cs >> tok) {
        auto e = tok.find('=');
        if (e == std::string::npos) throw ParseError(line, tok, "expected name=value");
        kv[tok.substr(0, e)] = tok.substr(e + 1);
      }
      auto get = [&](const std::string& k, std::optional<double> def = std::nullopt) {
        auto it = kv.find(k);
        if (it == kv.end()) {
          if (def) return *def;
          throw ParseError(line, k, "missing for component '" + kind + "'");
        }
        return to_double(it->second, line, k);
      };
      auto list = [&](const std::string& k) {
        std::vector<double> out;
        auto it = kv.find(k);
        if (it == kv.end()) return out;
        for (const auto& p : detail::split(it->second, ',')) out.push_back(to_double(p, line, k));
        return out;
      };
      ScenarioComponent comp;
      comp.channels = kv.count("channels") ? detail::parse_channels(kv["channels"], line) : all_channels();
      if (kind == "sine") {
        comp.component = Sine{get("freq_hz"), get("amplitude_uv"), get("phase", 0.0)};
      } else if (kind == "gated_sine") {
        GatedSine g{get("freq_hz"), get("amplitude_uv"), get("phase", 0.0), {}};
        if (kv.count("gates")) {
          for (const auto& p : detail::split(kv["gates"], ',')) {
            auto colon = p.find(':');
            if (colon == std::string::npos) throw ParseError(line, "gates", "expected start:end");
            g.gates.push_back({to_double(p.substr(0, colon), line, "gates"),
                               to_double(p.substr(colon + 1), line, "gates")});
          }
        }
        comp.component = g;
      } else if (kind == "burst_train") {
        std::string shape = kv.count("shape") ? kv["shape"] : "";
        BurstTrain b;
        if (shape == "blink") b = BurstTrain::blink({});
        else if (shape == "chew") b = BurstTrain::chew({});
        else throw ParseError(line, "shape", "expected blink or chew");
        for (double g : list("groups")) b.group_counts.push_back(static_cast<int>(g));
        b.onsets_s = list("onsets");
        if (b.onsets_s.empty() && !b.group_counts.empty())
          b.onsets_s = grouped_onsets(b.group_counts, get("start", 1.0), get("spacing", 0.9), get("gap", 3.0));
        b.peak_uv = get("peak_uv", b.peak_uv);
        b.duration_s = get("burst_s", b.duration_s);
        b.carrier_hz = get("carrier_hz", b.carrier_hz);
        comp.component = b;
      } else if (kind == "noise" || kind == "white_noise") {
        comp.component = WhiteNoise{get("rms_uv")};
      } else if (kind == "mains") {
        comp.component = Mains{get("freq_hz", 50.0), get("amplitude_uv")};
      } else if (kind == "drift") {
        comp.component = Drift{get("slope_uv_per_s")};
      } else {
        throw ParseError(line, "component", "unknown component kind '" + kind + "'");
      }
      sc.components.push_back(std::move(comp));
    } else {
      throw ParseError(line, key, "unknown key");
    }
  }
  sc.validate();
  return sc;
}

inline SignalScenario parse_scenario(const std::string& text) {
  std::istringstream in(text);
  return parse_scenario(in);
}

inline SignalScenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(0, "", "cannot open scenario file " + path);
  return parse_scenario(in);
}

// Preset name or scenario file path.
inline SignalScenario resolve_scenario(const std::string& name_or_path, double duration_s,
                                       std::uint64_t seed) {
  if (auto p = find_preset(name_or_path, duration_s, seed)) return *p;
  std::ifstream probe(name_or_path);
  if (!probe) throw DomainError("unknown scenario '" + name_or_path + "'");
  return load_scenario(name_or_path);
}

// ---------------------------------------------------------------------------
// Device pair
// ---------------------------------------------------------------------------

enum class DeviceMode { standby, idle, continuous_read };

inline const char* to_string(DeviceMode m) {
  switch (m) {
    case DeviceMode::standby: return "standby";
    case DeviceMode::idle: return "idle";
    case DeviceMode::continuous_read: return "continuous-read";
  }
  return "?";
}

struct Violation {
  std::uint64_t command_index;
  std::string what;
};

class SimulatedDevicePair {
 public:
  static constexpr double kClockHz = 2.048e6;

  explicit SimulatedDevicePair(double vref_volts = 4.5) : vref_(vref_volts) {}

  DeviceMode mode() const { return mode_; }
  bool converting() const { return converting_; }
  std::uint64_t sample_index() const { return sample_index_; }
  const protocol::RegisterMap& registers(std::size_t device) const { return regs_.at(device); }
  const std::vector<Violation>& violations() const { return violations_; }
  int data_rate_sps() const { return regs_[0].data_rate_sps(); }

  protocol::ConversionParams conversion(std::size_t channel) const {  // 0-based, 0..15
    const auto& r = regs_[channel / protocol::kChannelsPerDevice];
    return {vref_, r.gain(channel % protocol::kChannelsPerDevice)};
  }

  // Executes one encoded command against both devices (shared chip select)
  // or a single one. Register reads answer from device 0 unless targeted.
  std::optional<protocol::Bytes> handle_command(std::span<const std::uint8_t> bytes,
                                                std::optional<std::size_t> device = std::nullopt) {
    ++command_index_;
    auto [cmd, used] = protocol::decode_command(bytes);
    if (used != bytes.size()) throw EncodingError("trailing bytes after command");
    if (device && *device >= protocol::kDeviceCount) throw DomainError("device index out of range");
    return execute(cmd, device);
  }

  std::optional<protocol::Bytes> execute(const protocol::Command& cmd,
                                         std::optional<std::size_t> device = std::nullopt) {
    using protocol::Opcode;
    switch (cmd.opcode) {
      case Opcode::wakeup:
        if (mode_ == DeviceMode::standby) mode_ = DeviceMode::idle;
        return std::nullopt;
      case Opcode::standby:
        if (mode_ == DeviceMode::continuous_read) {
          violate("STANDBY issued during continuous read");
          return std::nullopt;
        }
        mode_ = DeviceMode::standby;
        converting_ = false;
        return std::nullopt;
      case Opcode::reset:
        for (auto& r : regs_) r = protocol::RegisterMap{};
        mode_ = DeviceMode::idle;
        converting_ = false;
        sample_index_ = 0;
        return std::nullopt;
      case Opcode::start:
        if (mode_ == DeviceMode::standby) {
          violate("START issued in standby");
          return std::nullopt;
        }
        converting_ = true;
        return std::nullopt;
      case Opcode::stop:
        converting_ = false;
        return std::nullopt;
      case Opcode::rdatac:
        if (mode_ == DeviceMode::standby) {
          violate("RDATAC issued in standby");
          return std::nullopt;
        }
        mode_ = DeviceMode::continuous_read;
        return std::nullopt;
      case Opcode::sdatac:
        if (mode_ == DeviceMode::continuous_read) mode_ = DeviceMode::idle;
        return std::nullopt;
      case Opcode::rreg: {
        if (mode_ == DeviceMode::continuous_read) {
          violate("RREG during continuous read");
          return protocol::Bytes(cmd.count + 1u, 0xFF);
        }
        const auto& r = regs_[device.value_or(0)];
        protocol::Bytes out;
        for (unsigned a = cmd.address; a <= cmd.address + cmd.count; ++a)
          out.push_back(r.at(static_cast<std::uint8_t>(a)));
        return out;
      }
      case Opcode::wreg: {
        if (mode_ == DeviceMode::continuous_read) {
          violate("WREG during continuous read");
          return std::nullopt;
        }
        for (std::size_t i = 0; i < cmd.payload.size(); ++i) {
          auto addr = static_cast<std::uint8_t>(cmd.address + i);
          std::uint8_t value = cmd.payload[i];
          if (auto why = reject_write(addr, value)) {
            violate(*why);
            continue;
          }
          for (std::size_t d = 0; d < protocol::kDeviceCount; ++d)
            if (!device || *device == d) regs_[d].set(addr, value);
        }
        return std::nullopt;
      }
    }
    return std::nullopt;
  }

  double channel_microvolts(const SignalScenario& sc, std::size_t channel, double t) const {
    const auto& r = regs_[channel / protocol::kChannelsPerDevice];
    std::size_t local = channel % protocol::kChannelsPerDevice;
    if (r.powered_down(local)) return 0.0;
    switch (r.mux(local)) {
      case protocol::InputMux::normal: {
        if (sc.duration_s <= 0.0) return 0.0;
        double te = t <= sc.duration_s ? t : std::fmod(t, sc.duration_s);
        return synth_sample(sc, channel + 1, te);
      }
      case protocol::InputMux::test_signal: return test_signal(r, t);
      default: return 0.0;
    }
  }

  std::uint32_t status_word(std::size_t device) const {
    return protocol::make_status(0, 0, regs_.at(device).gpio_data());
  }

  protocol::FrameBytes next_frame(const SignalScenario& sc) {
    if (mode_ != DeviceMode::continuous_read)
      throw StateError(std::string("next_frame requires continuous-read, device is ") + to_string(mode_));
    if (!converting_) throw StateError("next_frame requires conversions started (START)");
    double t = static_cast<double>(sample_index_) / data_rate_sps();
    protocol::DataFrame f;
    for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) f.status[d] = status_word(d);
    for (std::size_t c = 0; c < kChannelCount; ++c)
      f.channels[c] = protocol::microvolts_to_raw(channel_microvolts(sc, c, t), conversion(c)).raw;
    ++sample_index_;
    return protocol::encode_frame(f);
  }

 private:
  void violate(std::string what) { violations_.push_back({command_index_, std::move(what)}); }

  static std::optional<std::string> reject_write(std::uint8_t addr, std::uint8_t value) {
    using protocol::Reg;
    if (protocol::is_read_only(addr))
      return std::string("write to read-only register ") + protocol::kRegisterNames[addr];
    if (addr == static_cast<std::uint8_t>(Reg::config1) && (value & 0x07) == 0x07)
      return std::string("reserved data-rate code written to CONFIG1");
    if (addr >= static_cast<std::uint8_t>(Reg::ch1set) && addr <= static_cast<std::uint8_t>(Reg::ch8set) &&
        ((value >> 4) & 0x07) == 0x07)
      return std::string("reserved gain code written to ") + protocol::kRegisterNames[addr];
    return std::nullopt;
  }

  double test_signal(const protocol::RegisterMap& r, double t) const {
    std::uint8_t cfg2 = r[protocol::Reg::config2];
    double amp_uv = ((cfg2 & 0x04) ? 2.0 : 1.0) * vref_ / 2.4 * 1e3;
    double freq = 0.0;
    switch (cfg2 & 0x03) {
      case 0: freq = kClockHz / (1 << 21); break;
      case 1: freq = kClockHz / (1 << 20); break;
      default: return amp_uv;  // DC
    }
    return std::fmod(t * freq, 1.0) < 0.5 ? amp_uv : -amp_uv;
  }

  double vref_;
  std::array<protocol::RegisterMap, protocol::kDeviceCount> regs_{};
  DeviceMode mode_{DeviceMode::idle};
  bool converting_{false};
  std::uint64_t sample_index_{0};
  std::uint64_t command_index_{0};
  std::vector<Violation> violations_;
};

}  // namespace pieeg::sim
