#pragma once

// ADS1299 command set, register map, daisy-chain data frames and
// raw-count <-> microvolt conversion. Everything here is stateless.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pieeg/error.hpp"

namespace pieeg::protocol {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::size_t kChannelsPerDevice = 8;
inline constexpr std::size_t kDeviceCount = 2;
inline constexpr std::size_t kChannelCount = kChannelsPerDevice * kDeviceCount;
inline constexpr std::size_t kDeviceFrameBytes = 3 + 3 * kChannelsPerDevice;  // 27
inline constexpr std::size_t kFrameBytes = kDeviceFrameBytes * kDeviceCount;  // 54
inline constexpr std::size_t kRegisterCount = 24;
inline constexpr std::uint8_t kMaxRegister = 0x17;
inline constexpr std::uint8_t kDeviceId = 0x3E;
inline constexpr std::uint8_t kStatusSync = 0xC;
inline constexpr std::int32_t kRawMin = -8388608;
inline constexpr std::int32_t kRawMax = 8388607;
inline constexpr double kFullScaleCode = 8388607.0;  // 2^23 - 1

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

enum class Opcode : std::uint8_t {
  wakeup = 0x02,
  standby = 0x04,
  reset = 0x06,
  start = 0x08,
  stop = 0x0A,
  rdatac = 0x10,
  sdatac = 0x11,
  rreg = 0x20,
  wreg = 0x40,
};

inline const char* to_string(Opcode op) {
  switch (op) {
    case Opcode::wakeup: return "WAKEUP";
    case Opcode::standby: return "STANDBY";
    case Opcode::reset: return "RESET";
    case Opcode::start: return "START";
    case Opcode::stop: return "STOP";
    case Opcode::rdatac: return "RDATAC";
    case Opcode::sdatac: return "SDATAC";
    case Opcode::rreg: return "RREG";
    case Opcode::wreg: return "WREG";
  }
  return "?";
}

struct Command {
  Opcode opcode{Opcode::sdatac};
  std::uint8_t address{0};
  std::uint8_t count{0};  // registers minus one
  Bytes payload;

  static Command simple(Opcode op) { return Command{op, 0, 0, {}}; }
  static Command rreg(std::uint8_t address, std::uint8_t count) {
    return Command{Opcode::rreg, address, count, {}};
  }
  static Command wreg(std::uint8_t address, Bytes payload) {
    auto count = static_cast<std::uint8_t>(payload.empty() ? 0 : payload.size() - 1);
    return Command{Opcode::wreg, address, count, std::move(payload)};
  }

  bool operator==(const Command&) const = default;
};

inline bool is_register_access(Opcode op) { return op == Opcode::rreg || op == Opcode::wreg; }

inline void validate(const Command& cmd) {
  if (is_register_access(cmd.opcode)) {
    if (cmd.address > kMaxRegister || cmd.count > kMaxRegister ||
        cmd.address + cmd.count > kMaxRegister) {
      throw EncodingError("register range 0x" + std::to_string(cmd.address) + "+" +
                          std::to_string(cmd.count) + " exceeds register map");
    }
    std::size_t want = cmd.opcode == Opcode::wreg ? cmd.count + 1u : 0u;
    if (cmd.payload.size() != want) {
      throw EncodingError(std::string(to_string(cmd.opcode)) + " payload length " +
                          std::to_string(cmd.payload.size()) + ", expected " +
                          std::to_string(want));
    }
  } else if (!cmd.payload.empty() || cmd.address != 0 || cmd.count != 0) {
    throw EncodingError(std::string(to_string(cmd.opcode)) + " takes no operands");
  }
}

inline Bytes encode_command(const Command& cmd) {
  validate(cmd);
  if (!is_register_access(cmd.opcode)) return {static_cast<std::uint8_t>(cmd.opcode)};
  Bytes out;
  out.reserve(2 + cmd.payload.size());
  out.push_back(static_cast<std::uint8_t>(static_cast<std::uint8_t>(cmd.opcode) | cmd.address));
  out.push_back(cmd.count);
  out.insert(out.end(), cmd.payload.begin(), cmd.payload.end());
  return out;
}

// Parses one command from the front of `bytes`. Returns the command and the
// number of bytes it occupied.
inline std::pair<Command, std::size_t> decode_command(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw EncodingError("empty command");
  std::uint8_t b0 = bytes[0];
  switch (b0) {
    case 0x02: case 0x04: case 0x06: case 0x08: case 0x0A: case 0x10: case 0x11:
      return {Command::simple(static_cast<Opcode>(b0)), 1};
    default: break;
  }
  auto top = static_cast<std::uint8_t>(b0 & 0xE0);
  if (top != 0x20 && top != 0x40) throw EncodingError("unknown opcode byte " + std::to_string(b0));
  if (bytes.size() < 2) throw EncodingError("truncated register command");
  Command cmd;
  cmd.opcode = top == 0x20 ? Opcode::rreg : Opcode::wreg;
  cmd.address = static_cast<std::uint8_t>(b0 & 0x1F);
  cmd.count = bytes[1];
  std::size_t used = 2;
  if (cmd.opcode == Opcode::wreg) {
    std::size_t n = cmd.count + 1u;
    if (bytes.size() < 2 + n) throw EncodingError("truncated WREG payload");
    cmd.payload.assign(bytes.begin() + 2, bytes.begin() + 2 + static_cast<std::ptrdiff_t>(n));
    used += n;
  }
  validate(cmd);
  return {cmd, used};
}

// ---------------------------------------------------------------------------
// Register map
// ---------------------------------------------------------------------------

enum class Reg : std::uint8_t {
  id = 0x00,
  config1 = 0x01,
  config2 = 0x02,
  config3 = 0x03,
  loff = 0x04,
  ch1set = 0x05,
  ch2set, ch3set, ch4set, ch5set, ch6set, ch7set,
  ch8set = 0x0C,
  bias_sensp = 0x0D,
  bias_sensn = 0x0E,
  loff_sensp = 0x0F,
  loff_sensn = 0x10,
  loff_flip = 0x11,
  loff_statp = 0x12,
  loff_statn = 0x13,
  gpio = 0x14,
  misc1 = 0x15,
  misc2 = 0x16,
  config4 = 0x17,
};

inline constexpr std::array<const char*, kRegisterCount> kRegisterNames = {
    "ID",         "CONFIG1",    "CONFIG2",    "CONFIG3",    "LOFF",       "CH1SET",
    "CH2SET",     "CH3SET",     "CH4SET",     "CH5SET",     "CH6SET",     "CH7SET",
    "CH8SET",     "BIAS_SENSP", "BIAS_SENSN", "LOFF_SENSP", "LOFF_SENSN", "LOFF_FLIP",
    "LOFF_STATP", "LOFF_STATN", "GPIO",       "MISC1",      "MISC2",      "CONFIG4"};

// Registers the host may not write.
inline bool is_read_only(std::uint8_t address) {
  return address == static_cast<std::uint8_t>(Reg::id) ||
         address == static_cast<std::uint8_t>(Reg::loff_statp) ||
         address == static_cast<std::uint8_t>(Reg::loff_statn);
}

enum class InputMux : std::uint8_t { normal = 0, shorted = 1, test_signal = 5, other = 0xFF };

inline const char* to_string(InputMux m) {
  switch (m) {
    case InputMux::normal: return "normal";
    case InputMux::shorted: return "shorted";
    case InputMux::test_signal: return "test";
    case InputMux::other: return "other";
  }
  return "?";
}

inline std::optional<InputMux> parse_mux(const std::string& s) {
  if (s == "normal") return InputMux::normal;
  if (s == "shorted") return InputMux::shorted;
  if (s == "test" || s == "test-signal" || s == "test_signal") return InputMux::test_signal;
  return std::nullopt;
}

inline constexpr std::array<int, 7> kGains = {1, 2, 4, 6, 8, 12, 24};
inline constexpr std::array<int, 7> kDataRates = {16000, 8000, 4000, 2000, 1000, 500, 250};

inline bool is_valid_gain(int gain) {
  for (int g : kGains)
    if (g == gain) return true;
  return false;
}

inline std::optional<std::uint8_t> gain_code(int gain) {
  for (std::size_t i = 0; i < kGains.size(); ++i)
    if (kGains[i] == gain) return static_cast<std::uint8_t>(i);
  return std::nullopt;
}

inline std::optional<std::uint8_t> data_rate_code(int sps) {
  for (std::size_t i = 0; i < kDataRates.size(); ++i)
    if (kDataRates[i] == sps) return static_cast<std::uint8_t>(i);
  return std::nullopt;
}

class RegisterMap {
 public:
  // Power-on / post-RESET contents.
  static constexpr std::array<std::uint8_t, kRegisterCount> kDefaults = {
      kDeviceId, 0x96, 0xC0, 0x60, 0x00,
      0x61, 0x61, 0x61, 0x61, 0x61, 0x61, 0x61, 0x61,
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x0F, 0x00, 0x00, 0x00};

  RegisterMap() : regs_(kDefaults) {}
  explicit RegisterMap(const std::array<std::uint8_t, kRegisterCount>& raw) : regs_(raw) {}

  std::uint8_t operator[](Reg r) const { return regs_[static_cast<std::size_t>(r)]; }
  std::uint8_t at(std::uint8_t address) const {
    if (address >= kRegisterCount) throw DomainError("register address out of range");
    return regs_[address];
  }
  void set(std::uint8_t address, std::uint8_t value) {
    if (address >= kRegisterCount) throw DomainError("register address out of range");
    regs_[address] = value;
  }
  void set(Reg r, std::uint8_t value) { set(static_cast<std::uint8_t>(r), value); }
  const std::array<std::uint8_t, kRegisterCount>& raw() const { return regs_; }

  std::uint8_t id() const { return (*this)[Reg::id]; }

  int data_rate_sps() const {
    unsigned code = (*this)[Reg::config1] & 0x07u;
    if (code >= kDataRates.size()) throw DomainError("reserved data-rate code in CONFIG1");
    return kDataRates[code];
  }

  // channel is 0-based within the device.
  static Reg channel_register(std::size_t channel) {
    if (channel >= kChannelsPerDevice) throw DomainError("channel index out of range");
    return static_cast<Reg>(static_cast<std::uint8_t>(Reg::ch1set) + channel);
  }

  int gain(std::size_t channel) const {
    unsigned code = ((*this)[channel_register(channel)] >> 4) & 0x07u;
    if (code >= kGains.size()) throw DomainError("reserved gain code on channel " + std::to_string(channel + 1));
    return kGains[code];
  }

  InputMux mux(std::size_t channel) const {
    unsigned code = (*this)[channel_register(channel)] & 0x07u;
    switch (code) {
      case 0: return InputMux::normal;
      case 1: return InputMux::shorted;
      case 5: return InputMux::test_signal;
      default: return InputMux::other;
    }
  }

  bool powered_down(std::size_t channel) const {
    return ((*this)[channel_register(channel)] & 0x80u) != 0;
  }

  std::uint8_t gpio_data() const { return static_cast<std::uint8_t>((*this)[Reg::gpio] >> 4); }

  bool operator==(const RegisterMap&) const = default;

 private:
  std::array<std::uint8_t, kRegisterCount> regs_;
};

inline std::uint8_t make_channel_set(int gain, InputMux mux, bool power_down = false) {
  auto code = gain_code(gain);
  if (!code) throw DomainError("invalid gain " + std::to_string(gain));
  if (mux == InputMux::other) throw DomainError("mux 'other' is not encodable");
  return static_cast<std::uint8_t>((power_down ? 0x80 : 0x00) | (*code << 4) |
                                   static_cast<std::uint8_t>(mux));
}

// ---------------------------------------------------------------------------
// Data frames
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t make_status(std::uint8_t loff_p = 0, std::uint8_t loff_n = 0,
                                           std::uint8_t gpio = 0) {
  return (std::uint32_t{kStatusSync} << 20) | (std::uint32_t{loff_p} << 12) |
         (std::uint32_t{loff_n} << 4) | (gpio & 0x0Fu);
}

struct DataFrame {
  std::array<std::uint32_t, kDeviceCount> status{make_status(), make_status()};
  std::array<std::int32_t, kChannelCount> channels{};

  bool operator==(const DataFrame&) const = default;
};

using FrameBytes = std::array<std::uint8_t, kFrameBytes>;

inline std::uint8_t status_loff_p(std::uint32_t status) { return static_cast<std::uint8_t>(status >> 12); }
inline std::uint8_t status_loff_n(std::uint32_t status) { return static_cast<std::uint8_t>(status >> 4); }
inline std::uint8_t status_gpio(std::uint32_t status) { return static_cast<std::uint8_t>(status & 0x0F); }

inline bool has_sync(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return offset < bytes.size() && (bytes[offset] >> 4) == kStatusSync;
}

inline FrameBytes encode_frame(const DataFrame& frame) {
  FrameBytes out{};
  for (std::size_t d = 0; d < kDeviceCount; ++d) {
    std::uint32_t st = frame.status[d];
    if (st > 0xFFFFFFu || (st >> 20) != kStatusSync)
      throw EncodingError("status word of device " + std::to_string(d) + " lacks sync nibble");
    std::size_t base = d * kDeviceFrameBytes;
    out[base + 0] = static_cast<std::uint8_t>(st >> 16);
    out[base + 1] = static_cast<std::uint8_t>(st >> 8);
    out[base + 2] = static_cast<std::uint8_t>(st);
    for (std::size_t c = 0; c < kChannelsPerDevice; ++c) {
      std::int32_t v = frame.channels[d * kChannelsPerDevice + c];
      if (v < kRawMin || v > kRawMax)
        throw EncodingError("sample " + std::to_string(v) + " outside 24-bit range");
      auto u = static_cast<std::uint32_t>(v) & 0xFFFFFFu;
      std::size_t at = base + 3 + 3 * c;
      out[at + 0] = static_cast<std::uint8_t>(u >> 16);
      out[at + 1] = static_cast<std::uint8_t>(u >> 8);
      out[at + 2] = static_cast<std::uint8_t>(u);
    }
  }
  return out;
}

inline DataFrame decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kFrameBytes)
    throw FramingError("frame is " + std::to_string(bytes.size()) + " bytes, expected 54");
  DataFrame f;
  for (std::size_t d = 0; d < kDeviceCount; ++d) {
    std::size_t base = d * kDeviceFrameBytes;
    if (!has_sync(bytes, base))
      throw DesyncError(base, "missing status sync nibble at byte " + std::to_string(base));
    f.status[d] = (std::uint32_t{bytes[base]} << 16) | (std::uint32_t{bytes[base + 1]} << 8) |
                  bytes[base + 2];
    for (std::size_t c = 0; c < kChannelsPerDevice; ++c) {
      std::size_t at = base + 3 + 3 * c;
      std::uint32_t u = (std::uint32_t{bytes[at]} << 16) | (std::uint32_t{bytes[at + 1]} << 8) |
                        bytes[at + 2];
      // sign-extend 24 -> 32
      f.channels[d * kChannelsPerDevice + c] =
          static_cast<std::int32_t>((u ^ 0x800000u)) - 0x800000;
    }
  }
  return f;
}

// ---------------------------------------------------------------------------
// Conversion
// ---------------------------------------------------------------------------

struct ConversionParams {
  double vref_volts{4.5};
  int gain{24};

  void validate() const {
    if (!(vref_volts > 0.0)) throw DomainError("vref must be positive");
    if (!is_valid_gain(gain)) throw DomainError("invalid gain " + std::to_string(gain));
  }

  // Microvolts represented by one count.
  double lsb_microvolts() const { return vref_volts * 1e6 / (gain * kFullScaleCode); }
  double full_scale_microvolts() const { return vref_volts * 1e6 / gain; }

  bool operator==(const ConversionParams&) const = default;
};

inline double raw_to_microvolts(std::int32_t raw, const ConversionParams& p) {
  // Single rounding: the numerator is exact for the default 4.5 V reference.
  return static_cast<double>(raw) * (p.vref_volts * 1e6) / (p.gain * kFullScaleCode);
}

struct Quantized {
  std::int32_t raw{0};
  bool saturated{false};
};

inline Quantized microvolts_to_raw(double uv, const ConversionParams& p) {
  if (std::isnan(uv)) throw DomainError("NaN microvolt value");
  double counts = uv * (p.gain * kFullScaleCode) / (p.vref_volts * 1e6);
  if (counts >= kRawMax + 0.5) return {kRawMax, true};
  if (counts < kRawMin - 0.5) return {kRawMin, true};
  return {static_cast<std::int32_t>(std::llround(counts)), false};
}

}  // namespace pieeg::protocol
