#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "pieeg/simdevice.hpp"

using namespace pieeg;
using namespace pieeg::sim;
using protocol::Command;
using protocol::Opcode;

namespace {

std::optional<protocol::Bytes> send(SimulatedDevicePair& p, const Command& c) {
  return p.handle_command(protocol::encode_command(c));
}

void enter_streaming(SimulatedDevicePair& p) {
  send(p, Command::simple(Opcode::reset));
  send(p, Command::wreg(0x05, protocol::Bytes(8, protocol::make_channel_set(24, protocol::InputMux::normal))));
  send(p, Command::simple(Opcode::rdatac));
  send(p, Command::simple(Opcode::start));
}

SignalScenario single_sine(double duration, double freq, double amp) {
  SignalScenario sc{"sine", duration, 250, 1, {}, {}};
  sc.components.push_back({all_channels(), Sine{freq, amp, 0.0}});
  return sc;
}

}  // namespace

TEST(DevicePair, ResetThenReadId) {
  SimulatedDevicePair p;
  send(p, Command::simple(Opcode::reset));
  auto r = send(p, Command::rreg(0x00, 0));
  ASSERT_TRUE(r);
  EXPECT_EQ(*r, protocol::Bytes{0x3E});
  EXPECT_TRUE(p.violations().empty());
}

TEST(DevicePair, RegisterAccessInContinuousReadIsViolation) {
  SimulatedDevicePair p;
  send(p, Command::simple(Opcode::rdatac));
  auto r = send(p, Command::rreg(0x00, 0));
  ASSERT_EQ(p.violations().size(), 1u);
  EXPECT_NE(p.violations()[0].what.find("RREG"), std::string::npos);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->size(), 1u);  // garbage, not the register
  send(p, Command::wreg(0x01, {0x95}));
  EXPECT_EQ(p.violations().size(), 2u);
  EXPECT_EQ(p.registers(0)[protocol::Reg::config1], 0x96);
}

TEST(DevicePair, StartStopFreezesSampleIndex) {
  SimulatedDevicePair p;
  auto sc = make_zero(10, 1);
  enter_streaming(p);
  for (int i = 0; i < 5; ++i) p.next_frame(sc);
  send(p, Command::simple(Opcode::stop));
  send(p, Command::simple(Opcode::sdatac));
  EXPECT_EQ(p.mode(), DeviceMode::idle);
  EXPECT_FALSE(p.converting());
  EXPECT_EQ(p.sample_index(), 5u);
  EXPECT_THROW(p.next_frame(sc), StateError);
  EXPECT_EQ(p.sample_index(), 5u);
  send(p, Command::simple(Opcode::reset));
  EXPECT_EQ(p.sample_index(), 0u);
}

TEST(DevicePair, ReadOnlyAndReservedWritesRejected) {
  SimulatedDevicePair p;
  send(p, Command::wreg(0x00, {0x11}));
  send(p, Command::wreg(0x01, {0x97}));
  send(p, Command::wreg(0x05, {0x71}));
  EXPECT_EQ(p.violations().size(), 3u);
  EXPECT_EQ(p.registers(0).id(), 0x3E);
  EXPECT_EQ(p.registers(1)[protocol::Reg::config1], 0x96);
}

TEST(DevicePair, TargetedWriteOnlyTouchesOneDevice) {
  SimulatedDevicePair p;
  p.handle_command(protocol::encode_command(Command::wreg(0x05, {0x05})), 1);
  EXPECT_EQ(p.registers(0)[protocol::Reg::ch1set], 0x61);
  EXPECT_EQ(p.registers(1)[protocol::Reg::ch1set], 0x05);
  auto r = p.handle_command(protocol::encode_command(Command::rreg(0x05, 0)), 1);
  EXPECT_EQ((*r)[0], 0x05);
}

// Every illegal command in a random sequence shows up as exactly one violation.
TEST(DevicePair, CommandFuzzReportsEveryIllegalTransition) {
  std::mt19937_64 rng(2024);
  const std::array<Opcode, 9> ops = {Opcode::wakeup, Opcode::standby, Opcode::reset, Opcode::start, Opcode::stop,
                                     Opcode::rdatac, Opcode::sdatac, Opcode::rreg, Opcode::wreg};
  SimulatedDevicePair p;
  DeviceMode model = DeviceMode::idle;
  std::size_t expected = 0;
  for (int i = 0; i < 20000; ++i) {
    Opcode op = ops[rng() % ops.size()];
    Command c = Command::simple(op);
    if (op == Opcode::rreg) c = Command::rreg(static_cast<std::uint8_t>(rng() % 24), 0);
    if (op == Opcode::wreg) {
      // Only registers whose writes the model can judge: ID, CONFIG1, CH1SET, GPIO.
      static const std::uint8_t regs[] = {0x00, 0x01, 0x05, 0x14};
      c = Command::wreg(regs[rng() % 4], {static_cast<std::uint8_t>(rng() % 256)});
    }
    bool illegal = false;
    switch (op) {
      case Opcode::rreg: illegal = model == DeviceMode::continuous_read; break;
      case Opcode::wreg: {
        std::uint8_t a = c.address, v = c.payload[0];
        illegal = model == DeviceMode::continuous_read || a == 0x00 || (a == 0x01 && (v & 7) == 7) ||
                  (a == 0x05 && ((v >> 4) & 7) == 7);
        break;
      }
      case Opcode::standby:
        illegal = model == DeviceMode::continuous_read;
        if (!illegal) model = DeviceMode::standby;
        break;
      case Opcode::start: illegal = model == DeviceMode::standby; break;
      case Opcode::rdatac:
        illegal = model == DeviceMode::standby;
        if (!illegal) model = DeviceMode::continuous_read;
        break;
      case Opcode::sdatac:
        if (model == DeviceMode::continuous_read) model = DeviceMode::idle;
        break;
      case Opcode::wakeup:
        if (model == DeviceMode::standby) model = DeviceMode::idle;
        break;
      case Opcode::reset: model = DeviceMode::idle; break;
      case Opcode::stop: break;
    }
    expected += illegal;
    send(p, c);
    ASSERT_EQ(p.violations().size(), expected) << "step " << i << " " << protocol::to_string(op);
    ASSERT_EQ(p.mode(), model);
  }
  EXPECT_GT(expected, 100u);
}

TEST(Synth, Examples) {
  SignalScenario empty{"e", 10, 250, 1, {}, {}};
  for (double t : {0.0, 1.3, 10.0}) EXPECT_EQ(synth_sample(empty, 1, t), 0.0);
  auto sine = single_sine(1.0, 10.0, 50.0);
  EXPECT_NEAR(synth_sample(sine, 3, 0.025), 50.0, 1e-12);
  SignalScenario gated{"g", 12, 250, 1, {}, {}};
  gated.components.push_back({all_channels(), GatedSine{10.0, 50.0, 0.0, {{5.0, 10.0}}}});
  EXPECT_EQ(synth_sample(gated, 1, 2.0), 0.0);
  EXPECT_NEAR(synth_sample(gated, 1, 5.025), 50.0 * std::sin(2 * std::numbers::pi * 10 * 5.025), 1e-9);
  EXPECT_EQ(synth_sample(gated, 1, 10.0), 0.0);  // half-open gate
}

TEST(Synth, Errors) {
  auto sc = single_sine(1.0, 10.0, 50.0);
  EXPECT_THROW(synth_sample(sc, 0, 0.0), DomainError);
  EXPECT_THROW(synth_sample(sc, 17, 0.0), DomainError);
  EXPECT_THROW(synth_sample(sc, 1, 1.5), DomainError);
}

TEST(Synth, ChannelMaskAndNoiseDeterminism) {
  SignalScenario sc{"n", 5, 250, 99, {}, {}};
  ChannelMask m;
  m.set(4);
  sc.components.push_back({m, WhiteNoise{10.0}});
  EXPECT_EQ(synth_sample(sc, 1, 1.0), 0.0);
  double a = synth_sample(sc, 5, 1.0);
  EXPECT_NE(a, 0.0);
  EXPECT_EQ(a, synth_sample(sc, 5, 1.0));
  auto other = sc;
  other.seed = 100;
  EXPECT_NE(a, synth_sample(other, 5, 1.0));
  // Empirical RMS of the generator.
  double sum2 = 0;
  int n = 0;
  for (int i = 0; i < 1250; ++i, ++n) sum2 += std::pow(synth_sample(sc, 5, i / 250.0), 2);
  EXPECT_NEAR(std::sqrt(sum2 / n), 10.0, 0.6);
}

TEST(NextFrame, ZeroScenarioGivesZeroFrame) {
  SimulatedDevicePair p;
  enter_streaming(p);
  auto f = p.next_frame(make_zero(1, 1));
  protocol::FrameBytes want{};
  want[0] = 0xC0;
  want[27] = 0xC0;
  EXPECT_EQ(f, want);
}

TEST(NextFrame, SineSampleMatchesQuantizedValue) {
  SimulatedDevicePair p;
  enter_streaming(p);
  send(p, Command::simple(Opcode::sdatac));
  send(p, Command::wreg(0x01, {0x94}));  // 1000 sps so t = 0.025 is a sample instant
  send(p, Command::simple(Opcode::rdatac));
  auto sc = single_sine(1.0, 10.0, 50.0);
  for (int i = 0; i < 25; ++i) p.next_frame(sc);
  auto f = protocol::decode_frame(p.next_frame(sc));
  EXPECT_EQ(f.channels[0], 2237);
  EXPECT_EQ(f.channels[15], 2237);
}

TEST(NextFrame, ClockAdvancesExactly) {
  SimulatedDevicePair p;
  enter_streaming(p);
  auto sc = make_zero(5000, 1);
  for (int i = 0; i < 250; ++i) p.next_frame(sc);
  EXPECT_EQ(static_cast<double>(p.sample_index()) / p.data_rate_sps(), 1.0);
  for (int i = 250; i < 1000000; ++i) p.next_frame(sc);
  EXPECT_EQ(p.sample_index(), 1000000u);
  EXPECT_EQ(static_cast<double>(p.sample_index()) / p.data_rate_sps(), 4000.0);
}

TEST(NextFrame, RequiresContinuousRead) {
  SimulatedDevicePair p;
  EXPECT_THROW(p.next_frame(make_zero(1, 1)), StateError);
}

TEST(NextFrame, DeterministicByteStream) {
  auto run = [] {
    SimulatedDevicePair p;
    enter_streaming(p);
    auto sc = make_artifact_test(60, 5);
    std::vector<protocol::FrameBytes> out;
    for (int i = 0; i < 2000; ++i) out.push_back(p.next_frame(sc));
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(NextFrame, ShortedAndTestSignalMux) {
  SimulatedDevicePair p;
  send(p, Command::simple(Opcode::reset));  // default CHnSET = shorted
  send(p, Command::simple(Opcode::rdatac));
  send(p, Command::simple(Opcode::start));
  auto sc = single_sine(1.0, 10.0, 50.0);
  sc.components.push_back({all_channels(), WhiteNoise{10}});
  for (int i = 0; i < 10; ++i) {
    auto f = protocol::decode_frame(p.next_frame(sc));
    for (auto v : f.channels) EXPECT_EQ(v, 0);
  }
  send(p, Command::simple(Opcode::sdatac));
  send(p, Command::wreg(0x05, protocol::Bytes(8, protocol::make_channel_set(24, protocol::InputMux::test_signal))));
  send(p, Command::simple(Opcode::rdatac));
  auto f = protocol::decode_frame(p.next_frame(sc));
  double uv = protocol::raw_to_microvolts(f.channels[0], {4.5, 24});
  EXPECT_NEAR(std::abs(uv), 1875.0, 0.05);
  EXPECT_EQ(f.channels[8], f.channels[0]);  // broadcast write reached device 1
}

// Full decode/convert path recovers the alpha sine amplitude.
TEST(NextFrame, AlphaAmplitudeRecoveredThroughCodec) {
  auto sc = make_alpha_test(10, 1);
  auto clean = sc;
  clean.components.pop_back();  // drop the noise component
  SimulatedDevicePair p, q;
  enter_streaming(p);
  enter_streaming(q);
  protocol::ConversionParams params;
  const double lsb = params.lsb_microvolts();
  double ss = 0, sc_ = 0;
  for (int i = 0; i < 1250; ++i) {  // first eyes-closed epoch
    double t = i / 250.0;
    auto f = protocol::decode_frame(q.next_frame(clean));
    double uv = protocol::raw_to_microvolts(f.channels[4], params);
    ss += uv * std::sin(2 * std::numbers::pi * 10 * t);
    sc_ += uv * std::cos(2 * std::numbers::pi * 10 * t);
    auto g = protocol::decode_frame(p.next_frame(sc));
    double noisy = protocol::raw_to_microvolts(g.channels[4], params);
    ASSERT_LE(std::abs(noisy - synth_sample(sc, 5, t)), 0.5 * lsb * (1 + 1e-9));
  }
  double amp = 2.0 / 1250 * std::hypot(ss, sc_);
  EXPECT_NEAR(amp, 50.0, lsb);
}

TEST(Presets, Catalog) {
  auto presets = scenario_presets(60, 1);
  for (const char* n : {"alpha_test", "artifact_test", "mains_noise", "alpha_control", "zero"})
    EXPECT_TRUE(presets.count(n)) << n;
  for (const auto& [name, sc] : presets) EXPECT_NO_THROW(sc.validate()) << name;
}

TEST(Presets, AlphaMarkersAlternateEveryFiveSeconds) {
  auto sc = make_alpha_test(60, 1);
  ASSERT_EQ(sc.markers.size(), 12u);
  for (std::size_t i = 0; i < sc.markers.size(); ++i) {
    EXPECT_EQ(sc.markers[i].label, i % 2 == 0 ? "eyes_closed" : "eyes_open");
    EXPECT_DOUBLE_EQ(sc.markers[i].t_start_s, 5.0 * static_cast<double>(i));
    EXPECT_DOUBLE_EQ(sc.markers[i].duration(), 5.0);
  }
  // Closed epochs carry a 50 uV sine; open epochs are noise only.
  auto clean = sc;
  clean.components.pop_back();
  EXPECT_NEAR(synth_sample(clean, 1, 0.025), 50.0, 1e-9);
  EXPECT_EQ(synth_sample(clean, 1, 5.025), 0.0);
}

TEST(Presets, ArtifactGroups) {
  auto sc = make_artifact_test(60, 1);
  int chew = 0, blink = 0;
  for (const auto& c : sc.components)
    if (auto* b = std::get_if<BurstTrain>(&c.component)) {
      EXPECT_EQ(b->group_counts, (std::vector<int>{4, 3, 2, 1}));
      EXPECT_EQ(b->onsets_s.size(), 10u);
      (b->shape == BurstShape::chew ? chew : blink)++;
    }
  EXPECT_EQ(chew, 1);
  EXPECT_EQ(blink, 1);
  EXPECT_EQ(sc.markers.size(), 20u);
}

TEST(Presets, MainsHasNoAlphaSine) {
  auto sc = make_mains_noise(10, 1);
  for (const auto& c : sc.components) {
    EXPECT_FALSE(std::holds_alternative<Sine>(c.component));
    EXPECT_FALSE(std::holds_alternative<GatedSine>(c.component));
  }
}

TEST(ScenarioFile, ParsesComponents) {
  auto sc = parse_scenario(R"(
# custom scenario
name = demo
duration_s = 20
seed = 9
component = sine channels=1-4 freq_hz=10 amplitude_uv=50
component = gated_sine channels=5 freq_hz=10 amplitude_uv=40 gates=0:5,10:15
component = burst_train channels=all shape=chew groups=2,1 start=1 spacing=0.9 gap=3
component = noise channels=all rms_uv=10
component = mains freq_hz=60 amplitude_uv=5
component = drift channels=16 slope_uv_per_s=0.5
marker = eyes_closed 0 5
)");
  EXPECT_EQ(sc.name, "demo");
  EXPECT_EQ(sc.seed, 9u);
  EXPECT_EQ(sc.components.size(), 6u);
  EXPECT_EQ(sc.markers.size(), 1u);
  EXPECT_TRUE(sc.components[0].component.index() == 0);
  EXPECT_EQ(sc.components[0].channels.count(), 4u);
  auto& bt = std::get<BurstTrain>(sc.components[2].component);
  EXPECT_EQ(bt.onsets_s, (std::vector<double>{1.0, 1.9, 4.9}));
  auto quiet = sc;
  quiet.components.erase(quiet.components.begin() + 3);  // per-channel noise
  EXPECT_NEAR(synth_sample(quiet, 16, 10.0) - synth_sample(quiet, 15, 10.0), 5.0, 1e-9);
}

TEST(ScenarioFile, Errors) {
  EXPECT_THROW(parse_scenario("component = laser power=3\n"), ParseError);
  EXPECT_THROW(parse_scenario("duration_s = abc\n"), ParseError);
  EXPECT_THROW(parse_scenario("bogus = 1\n"), ParseError);
  EXPECT_THROW(parse_scenario("duration_s = 5\ncomponent = sine channels=0 freq_hz=1 amplitude_uv=1\n"), ParseError);
  EXPECT_THROW(parse_scenario("duration_s = 5\nmarker = x 4 9\n"), DomainError);
  EXPECT_THROW(parse_scenario("duration_s = 5\ncomponent = mains freq_hz=55 amplitude_uv=1\n"), DomainError);
  try {
    parse_scenario("duration_s = 5\n\ncomponent = sine freq_hz=10\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
    EXPECT_EQ(e.field(), "amplitude_uv");
  }
}
