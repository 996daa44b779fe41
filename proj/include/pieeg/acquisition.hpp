#pragma once

// Device backends, the clocked stream loop and device configuration.

#include <array>
#include <atomic>
#include <chrono>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "pieeg/error.hpp"
#include "pieeg/protocol.hpp"
#include "pieeg/record.hpp"
#include "pieeg/ring_buffer.hpp"
#include "pieeg/simdevice.hpp"

namespace pieeg::acq {

using protocol::Bytes;
using protocol::kChannelCount;
using Clock = std::chrono::steady_clock;

struct TimedFrame {
  std::uint64_t seq{0};
  double t_s{0.0};
  ChannelValues uv{};
  std::array<std::uint32_t, protocol::kDeviceCount> status{};
};

using FrameBuffer = RingBuffer<TimedFrame>;

inline std::size_t default_capacity(int sps) { return static_cast<std::size_t>(4 * sps); }

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

class DeviceBackend {
 public:
  virtual ~DeviceBackend() = default;

  // Reset, configure defaults and verify the device identity.
  virtual void initialize() = 0;
  virtual void start_stream() = 0;
  virtual void stop_stream() = 0;
  // Blocks until the next data-ready; std::nullopt once the source is exhausted.
  virtual std::optional<Bytes> read_frame() = 0;
  // Raw register-level access used by configure().
  virtual std::optional<Bytes> command(const protocol::Command& cmd,
                                       std::optional<std::size_t> device = std::nullopt) = 0;
  virtual bool streaming() const = 0;
  virtual std::string name() const = 0;
};

// Schedules frame k at start + k / (sps * speed); a late caller catches up
// without skipping. speed <= 0 disables pacing.
class Pacer {
 public:
  Pacer(int sps = 250, double speed = 1.0) : sps_(sps), speed_(speed) {}

  void start() {
    start_ = Clock::now();
    k_ = 0;
  }

  void wait_next() {
    if (speed_ > 0.0) {
      auto due = start_ + std::chrono::duration_cast<Clock::duration>(
                              std::chrono::duration<double>(static_cast<double>(k_) / (sps_ * speed_)));
      std::this_thread::sleep_until(due);
    }
    ++k_;
  }

  double speed() const { return speed_; }

 private:
  int sps_;
  double speed_;
  Clock::time_point start_{};
  std::uint64_t k_{0};
};

struct SimulatedOptions {
  double speed{1.0};  // 1 = real time, 0 = unpaced
  std::optional<std::uint64_t> frame_limit;
  double vref_volts{4.5};
  int gain{24};
};

namespace detail {

inline void reset_and_identify(DeviceBackend& b) {
  using protocol::Command;
  using protocol::Opcode;
  b.command(Command::simple(Opcode::sdatac));
  b.command(Command::simple(Opcode::reset));
  b.command(Command::simple(Opcode::sdatac));
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) {
    auto id = b.command(Command::rreg(0x00, 0), d);
    if (!id || id->size() != 1 || (*id)[0] != protocol::kDeviceId)
      throw BackendError("device " + std::to_string(d) + " did not answer with the expected ID");
  }
}

inline void write_defaults(DeviceBackend& b, int sps, int gain) {
  using protocol::Command;
  auto rate = protocol::data_rate_code(sps);
  if (!rate) throw ConfigurationError("unsupported data rate " + std::to_string(sps));
  b.command(Command::wreg(static_cast<std::uint8_t>(protocol::Reg::config1),
                          {static_cast<std::uint8_t>(0x90 | *rate)}));
  b.command(Command::wreg(static_cast<std::uint8_t>(protocol::Reg::config3), {0xE0}));
  Bytes chans(protocol::kChannelsPerDevice, protocol::make_channel_set(gain, protocol::InputMux::normal));
  b.command(Command::wreg(static_cast<std::uint8_t>(protocol::Reg::ch1set), chans));
  // GPIO1 as an output carrying the device index. It shows up in each status
  // word, so the two 27-byte halves of a frame can be told apart on resync.
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d)
    b.command(Command::wreg(static_cast<std::uint8_t>(protocol::Reg::gpio), {static_cast<std::uint8_t>((d << 4) | 0x0E)}),
              d);
}

}  // namespace detail

// Register-level device pair driven by a synthetic scenario.
class SimulatedBackend : public DeviceBackend {
 public:
  explicit SimulatedBackend(sim::SignalScenario scenario, SimulatedOptions opts = {})
      : scenario_(std::move(scenario)), opts_(opts), pair_(opts.vref_volts) {}

  void initialize() override {
    if (streaming_) throw StateError("initialize while streaming");
    detail::reset_and_identify(*this);
    detail::write_defaults(*this, scenario_.sps, opts_.gain);
  }

  void start_stream() override {
    if (streaming_) throw StateError("stream already started");
    command(protocol::Command::simple(protocol::Opcode::rdatac), std::nullopt);
    command(protocol::Command::simple(protocol::Opcode::start), std::nullopt);
    pacer_ = Pacer(pair_.data_rate_sps(), opts_.speed);
    pacer_.start();
    emitted_ = 0;
    streaming_ = true;
  }

  void stop_stream() override {
    if (!streaming_) return;
    streaming_ = false;
    command(protocol::Command::simple(protocol::Opcode::stop), std::nullopt);
    command(protocol::Command::simple(protocol::Opcode::sdatac), std::nullopt);
  }

  std::optional<Bytes> read_frame() override {
    if (!streaming_) throw StateError("read_frame outside start_stream/stop_stream");
    if (opts_.frame_limit && emitted_ >= *opts_.frame_limit) return std::nullopt;
    pacer_.wait_next();
    auto f = pair_.next_frame(scenario_);
    ++emitted_;
    return Bytes(f.begin(), f.end());
  }

  std::optional<Bytes> command(const protocol::Command& cmd, std::optional<std::size_t> device) override {
    auto bytes = protocol::encode_command(cmd);
    return pair_.handle_command(bytes, device);
  }

  bool streaming() const override { return streaming_; }
  std::string name() const override { return "simulated"; }

  const sim::SimulatedDevicePair& device() const { return pair_; }
  const sim::SignalScenario& scenario() const { return scenario_; }

 private:
  sim::SignalScenario scenario_;
  SimulatedOptions opts_;
  sim::SimulatedDevicePair pair_;
  Pacer pacer_{};
  std::uint64_t emitted_{0};
  std::atomic<bool> streaming_{false};
};

struct ReplayOptions {
  double speed{1.0};
};

// Re-emits a recorded sample matrix as device frames at the record's rate.
class ReplayBackend : public DeviceBackend {
 public:
  explicit ReplayBackend(SessionRecord record, ReplayOptions opts = {})
      : record_(std::move(record)), opts_(opts), pair_(record_.meta.vref_volts) {}

  void initialize() override {
    if (streaming_) throw StateError("initialize while streaming");
    detail::reset_and_identify(*this);
    detail::write_defaults(*this, record_.meta.sps, record_.meta.gain);
  }

  void start_stream() override {
    if (streaming_) throw StateError("stream already started");
    command(protocol::Command::simple(protocol::Opcode::rdatac), std::nullopt);
    command(protocol::Command::simple(protocol::Opcode::start), std::nullopt);
    pacer_ = Pacer(record_.meta.sps, opts_.speed);
    pacer_.start();
    next_ = 0;
    streaming_ = true;
  }

  void stop_stream() override {
    if (!streaming_) return;
    streaming_ = false;
    command(protocol::Command::simple(protocol::Opcode::stop), std::nullopt);
    command(protocol::Command::simple(protocol::Opcode::sdatac), std::nullopt);
  }

  std::optional<Bytes> read_frame() override {
    if (!streaming_) throw StateError("read_frame outside start_stream/stop_stream");
    if (next_ >= record_.frame_count()) return std::nullopt;
    pacer_.wait_next();
    protocol::DataFrame f;
    for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) f.status[d] = pair_.status_word(d);
    const auto& row = record_.uv[next_++];
    for (std::size_t c = 0; c < kChannelCount; ++c)
      f.channels[c] = protocol::microvolts_to_raw(row[c], pair_.conversion(c)).raw;
    auto bytes = protocol::encode_frame(f);
    return Bytes(bytes.begin(), bytes.end());
  }

  std::optional<Bytes> command(const protocol::Command& cmd, std::optional<std::size_t> device) override {
    auto bytes = protocol::encode_command(cmd);
    return pair_.handle_command(bytes, device);
  }

  bool streaming() const override { return streaming_; }
  std::string name() const override { return "replay"; }
  const SessionRecord& record() const { return record_; }

 private:
  SessionRecord record_;
  ReplayOptions opts_;
  sim::SimulatedDevicePair pair_;
  Pacer pacer_{};
  std::size_t next_{0};
  std::atomic<bool> streaming_{false};
};

// Seam for a real SPI/GPIO driver. Not built.
class HardwareBackend : public DeviceBackend {
 public:
  void initialize() override { fail(); }
  void start_stream() override { fail(); }
  void stop_stream() override {}
  std::optional<Bytes> read_frame() override { fail(); }
  std::optional<Bytes> command(const protocol::Command&, std::optional<std::size_t>) override { fail(); }
  bool streaming() const override { return false; }
  std::string name() const override { return "hardware"; }

 private:
  [[noreturn]] static void fail() { throw BackendError("hardware backend not built"); }
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DeviceSettings {
  int sps{250};
  int gain{24};
  std::array<protocol::InputMux, kChannelCount> mux{};  // value-initialised: normal

  static DeviceSettings uniform(int sps, int gain, protocol::InputMux m = protocol::InputMux::normal) {
    DeviceSettings s{sps, gain, {}};
    s.mux.fill(m);
    return s;
  }
};

using RegisterPair = std::array<protocol::RegisterMap, protocol::kDeviceCount>;

inline RegisterPair read_registers(DeviceBackend& backend) {
  RegisterPair out;
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) {
    auto bytes = backend.command(protocol::Command::rreg(0x00, protocol::kMaxRegister), d);
    if (!bytes || bytes->size() != protocol::kRegisterCount)
      throw ConfigurationError("register read-back of device " + std::to_string(d) + " failed");
    std::array<std::uint8_t, protocol::kRegisterCount> raw{};
    std::copy(bytes->begin(), bytes->end(), raw.begin());
    out[d] = protocol::RegisterMap(raw);
  }
  return out;
}

// Writes the registers realizing `settings` and verifies them by read-back.
inline RegisterPair configure(DeviceBackend& backend, const DeviceSettings& settings) {
  using protocol::Command;
  using protocol::Reg;
  auto rate = protocol::data_rate_code(settings.sps);
  if (!rate) throw ConfigurationError("unsupported data rate " + std::to_string(settings.sps));
  if (!protocol::is_valid_gain(settings.gain)) throw ConfigurationError("invalid gain " + std::to_string(settings.gain));
  for (auto m : settings.mux)
    if (m == protocol::InputMux::other) throw ConfigurationError("unsupported input mux");
  if (backend.streaming()) throw StateError("configure requires the stream to be stopped");

  backend.command(Command::simple(protocol::Opcode::sdatac));
  auto config1 = static_cast<std::uint8_t>(0x90 | *rate);
  backend.command(Command::wreg(static_cast<std::uint8_t>(Reg::config1), {config1}));
  bool any_test = false;
  std::array<Bytes, protocol::kDeviceCount> chsets;
  for (std::size_t c = 0; c < kChannelCount; ++c) {
    any_test |= settings.mux[c] == protocol::InputMux::test_signal;
    chsets[c / protocol::kChannelsPerDevice].push_back(
        protocol::make_channel_set(settings.gain, settings.mux[c]));
  }
  // INT_CAL enables the internal test source.
  auto config2 = static_cast<std::uint8_t>(any_test ? 0xD0 : 0xC0);
  backend.command(Command::wreg(static_cast<std::uint8_t>(Reg::config2), {config2}));
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d)
    backend.command(Command::wreg(static_cast<std::uint8_t>(Reg::ch1set), chsets[d]), d);

  auto back = read_registers(backend);
  std::string diff;
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) {
    auto check = [&](Reg r, std::uint8_t want) {
      std::uint8_t got = back[d][r];
      if (got != want) {
        diff += " dev" + std::to_string(d) + "." + protocol::kRegisterNames[static_cast<std::size_t>(r)] +
                "=" + std::to_string(got) + "(want " + std::to_string(want) + ")";
      }
    };
    check(Reg::config1, config1);
    check(Reg::config2, config2);
    for (std::size_t c = 0; c < protocol::kChannelsPerDevice; ++c)
      check(protocol::RegisterMap::channel_register(c), chsets[d][c]);
  }
  if (!diff.empty()) throw ConfigurationError("register read-back mismatch:" + diff);
  return back;
}

// ---------------------------------------------------------------------------
// Stream loop
// ---------------------------------------------------------------------------

struct StreamParams {
  int sps{250};
  std::array<protocol::ConversionParams, kChannelCount> conversion{};
  // Expected GPIO1 level in each device's status word, when the devices are tagged.
  std::optional<std::array<std::uint8_t, protocol::kDeviceCount>> device_tags;

  static StreamParams uniform(int sps, protocol::ConversionParams p = {}) {
    StreamParams s;
    s.sps = sps;
    s.conversion.fill(p);
    return s;
  }
};

inline StreamParams stream_params_from(DeviceBackend& backend, double vref_volts = 4.5) {
  auto regs = read_registers(backend);
  StreamParams p;
  p.sps = regs[0].data_rate_sps();
  for (std::size_t c = 0; c < kChannelCount; ++c)
    p.conversion[c] = {vref_volts, regs[c / protocol::kChannelsPerDevice].gain(c % protocol::kChannelsPerDevice)};
  std::array<std::uint8_t, protocol::kDeviceCount> tags{};
  bool outputs = true;
  for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) {
    outputs &= (regs[d][protocol::Reg::gpio] & 0x01) == 0;
    tags[d] = regs[d].gpio_data() & 0x01;
  }
  if (outputs && tags[0] != tags[1]) p.device_tags = tags;
  return p;
}

enum class StreamState { running, stopped, end_of_data, backend_error };

inline const char* to_string(StreamState s) {
  switch (s) {
    case StreamState::running: return "running";
    case StreamState::stopped: return "stopped";
    case StreamState::end_of_data: return "end_of_data";
    case StreamState::backend_error: return "backend_error";
  }
  return "?";
}

struct StreamStatus {
  StreamState state{StreamState::running};
  std::string diagnostic;
  std::uint64_t frames_published{0};
  std::uint64_t desync_events{0};
  std::uint64_t skipped_bytes{0};
};

// Owns the producer thread. The backend and buffer must outlive the handle.
class StreamHandle {
 public:
  StreamHandle(DeviceBackend& backend, StreamParams params, FrameBuffer& buffer)
      : backend_(backend), params_(params), buffer_(buffer) {
    backend_.start_stream();
    worker_ = std::thread([this] { loop(); });
  }

  ~StreamHandle() {
    stop();
  }

  StreamHandle(const StreamHandle&) = delete;
  StreamHandle& operator=(const StreamHandle&) = delete;

  // Safe from any thread; returns once the producer has exited.
  void stop() {
    stop_requested_ = true;
    buffer_.notify();
    join();
  }

  void join() {
    std::lock_guard lk(join_mu_);
    if (worker_.joinable()) worker_.join();
  }

  bool finished() const { return finished_.load(); }

  StreamStatus status() const {
    std::lock_guard lk(status_mu_);
    return status_;
  }

  const StreamParams& params() const { return params_; }

 private:
  // Frames pass the sync check at both device offsets; while resynchronizing
  // the following frame must line up too.
  bool aligned(const std::deque<std::uint8_t>& q, std::size_t frames) const {
    for (std::size_t f = 0; f < frames; ++f)
      for (std::size_t d = 0; d < protocol::kDeviceCount; ++d) {
        std::size_t at = f * protocol::kFrameBytes + d * protocol::kDeviceFrameBytes;
        if ((q[at] >> 4) != protocol::kStatusSync) return false;
        // Status is 3 bytes, GPIO data in the low nibble of the last one.
        if (params_.device_tags && (q[at + 2] & 0x01) != (*params_.device_tags)[d]) return false;
      }
    return true;
  }

  void publish(const protocol::DataFrame& f, std::uint64_t seq) {
    TimedFrame tf;
    tf.seq = seq;
    tf.t_s = static_cast<double>(seq) / params_.sps;
    for (std::size_t c = 0; c < kChannelCount; ++c)
      tf.uv[c] = protocol::raw_to_microvolts(f.channels[c], params_.conversion[c]);
    tf.status = f.status;
    if (buffer_.push(std::move(tf), &stop_requested_)) {
      std::lock_guard lk(status_mu_);
      ++status_.frames_published;
    }
  }

  void loop() {
    std::deque<std::uint8_t> pending;
    std::array<std::uint8_t, protocol::kFrameBytes> scratch{};
    bool resyncing = false;
    std::uint64_t decoded = 0;
    StreamState end = StreamState::stopped;
    std::string diag;
    try {
      while (!stop_requested_) {
        auto chunk = backend_.read_frame();
        if (!chunk) {
          end = StreamState::end_of_data;
          break;
        }
        pending.insert(pending.end(), chunk->begin(), chunk->end());
        while (pending.size() >= protocol::kFrameBytes) {
          std::size_t need = resyncing ? 2 : 1;
          if (pending.size() < need * protocol::kFrameBytes) break;
          if (aligned(pending, need)) {
            std::copy_n(pending.begin(), protocol::kFrameBytes, scratch.begin());
            pending.erase(pending.begin(), pending.begin() + protocol::kFrameBytes);
            resyncing = false;
            std::uint64_t skipped;
            {
              std::lock_guard lk(status_mu_);
              skipped = status_.skipped_bytes;
            }
            // Skipped bytes count as lost frames to the nearest whole frame:
            // stray bytes cost nothing, a truncated frame costs one.
            publish(protocol::decode_frame(scratch),
                    decoded + (skipped + protocol::kFrameBytes / 2) / protocol::kFrameBytes);
            ++decoded;
          } else {
            std::lock_guard lk(status_mu_);
            if (!resyncing) ++status_.desync_events;
            resyncing = true;
            ++status_.skipped_bytes;
            pending.pop_front();
          }
        }
      }
    } catch (const std::exception& e) {
      end = StreamState::backend_error;
      diag = e.what();
    }
    try {
      backend_.stop_stream();
    } catch (const std::exception& e) {
      if (diag.empty()) diag = e.what();
    }
    buffer_.close();
    {
      std::lock_guard lk(status_mu_);
      status_.state = end;
      status_.diagnostic = diag;
    }
    finished_ = true;
  }

  DeviceBackend& backend_;
  StreamParams params_;
  FrameBuffer& buffer_;
  std::atomic<bool> stop_requested_{false};
  std::atomic<bool> finished_{false};
  mutable std::mutex status_mu_;
  StreamStatus status_;
  std::mutex join_mu_;
  std::thread worker_;
};

inline std::unique_ptr<StreamHandle> run_stream(DeviceBackend& backend, StreamParams params, FrameBuffer& buffer) {
  if (buffer.write_seq() != 0) throw StateError("run_stream needs an empty buffer");
  return std::make_unique<StreamHandle>(backend, params, buffer);
}

// ---------------------------------------------------------------------------
// Readers
// ---------------------------------------------------------------------------

struct Block {
  std::vector<TimedFrame> frames;
  std::uint64_t dropped{0};  // frames lost before frames.front()
  bool timed_out{false};
  bool terminal{false};  // stream over and fully drained
};

class Reader {
 public:
  explicit Reader(FrameBuffer& buffer) : buffer_(&buffer), id_(buffer.add_reader()) {}
  ~Reader() {
    if (buffer_) buffer_->remove_reader(id_);
  }
  Reader(const Reader&) = delete;
  Reader& operator=(const Reader&) = delete;
  Reader(Reader&& o) noexcept : buffer_(o.buffer_), id_(o.id_) { o.buffer_ = nullptr; }

  FrameBuffer::ReaderId id() const { return id_; }
  FrameBuffer& buffer() const { return *buffer_; }
  FrameBuffer::ReaderStats stats() const { return buffer_->stats(id_); }

 private:
  FrameBuffer* buffer_;
  FrameBuffer::ReaderId id_;
};

template <class Rep, class Period>
Block read_block(Reader& reader, std::size_t n_frames, std::chrono::duration<Rep, Period> timeout) {
  auto r = reader.buffer().read(reader.id(), n_frames, timeout);
  return Block{std::move(r.items), r.dropped, r.timed_out, r.closed};
}

}  // namespace pieeg::acq
