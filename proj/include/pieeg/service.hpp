#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "pieeg/acquisition.hpp"
#include "pieeg/dsp.hpp"
#include "pieeg/session.hpp"

namespace pieeg::service {

using json = nlohmann::json;
using Message = std::shared_ptr<const std::string>;

enum class Mode { idle, streaming, session };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::idle: return "idle";
    case Mode::streaming: return "streaming";
    case Mode::session: return "session";
  }
  return "?";
}

// Control-surface failure with an HTTP-style status and a stable reason tag.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string reason, const std::string& what)
      : Error("service", what), status_(status), reason_(std::move(reason)) {}
  int status() const { return status_; }
  const std::string& reason() const { return reason_; }
  json to_json() const { return {{"error", reason_}, {"message", what()}, {"status", status_}}; }

 private:
  int status_;
  std::string reason_;
};

inline ServiceError conflict(const std::string& reason, const std::string& what) { return {409, reason, what}; }
inline ServiceError invalid(const std::string& reason, const std::string& what) { return {422, reason, what}; }
inline ServiceError not_found(const std::string& what) { return {404, "not_found", what}; }

// ---------------------------------------------------------------------------
// Requests
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
T field(const json& body, const char* key, T fallback) {
  if (!body.is_object() || !body.contains(key) || body.at(key).is_null()) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw invalid("invalid_parameter", std::string("field '") + key + "' has the wrong type");
  }
}

inline void require_object(const json& body) {
  if (!body.is_null() && !body.is_object()) throw invalid("invalid_body", "request body must be a JSON object");
}

}  // namespace detail

struct StreamRequest {
  std::string backend{"simulated"};
  std::string scenario{"alpha_test"};
  std::string record;  // replay source id
  int sps{250};
  int gain{24};
  double speed{1.0};
  std::uint64_t seed{1};
  double duration_s{60.0};  // scenario script length; playback loops it

  static StreamRequest from_json(const json& body, std::uint64_t default_seed) {
    detail::require_object(body);
    StreamRequest r;
    r.seed = default_seed;
    r.backend = detail::field(body, "backend", r.backend);
    r.scenario = detail::field(body, "scenario", r.scenario);
    r.record = detail::field(body, "record", r.record);
    r.sps = detail::field(body, "sps", r.sps);
    r.gain = detail::field(body, "gain", r.gain);
    r.speed = detail::field(body, "speed", r.speed);
    r.seed = detail::field(body, "seed", r.seed);
    r.duration_s = detail::field(body, "duration_s", r.duration_s);
    if (r.backend != "simulated" && r.backend != "replay" && r.backend != "hardware")
      throw invalid("invalid_backend", "backend must be simulated, replay or hardware");
    if (!protocol::data_rate_code(r.sps)) throw invalid("invalid_sps", "unsupported sps " + std::to_string(r.sps));
    if (!protocol::gain_code(r.gain)) throw invalid("invalid_gain", "unsupported gain " + std::to_string(r.gain));
    if (!(r.speed > 0.0 && r.speed <= 100.0)) throw invalid("invalid_speed", "speed must be in (0, 100]");
    if (!(r.duration_s > 0.0)) throw invalid("invalid_duration", "duration_s must be positive");
    if (r.backend == "replay" && r.record.empty()) throw invalid("missing_record", "replay needs a record id");
    return r;
  }
};

struct FilterSettings {
  double lo_hz{1.0};
  double hi_hz{40.0};
  bool notch{false};
  double notch_hz{50.0};
  bool raw{false};

  json to_json() const {
    return {{"band", {lo_hz, hi_hz}}, {"notch", notch}, {"notch_hz", notch_hz}, {"raw", raw}};
  }

  // Missing fields keep their current value.
  static FilterSettings merge(const FilterSettings& base, const json& body) {
    detail::require_object(body);
    FilterSettings f = base;
    if (body.is_object() && body.contains("band")) {
      const auto& b = body.at("band");
      if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number())
        throw invalid("invalid_band", "band must be [lo_hz, hi_hz]");
      f.lo_hz = b[0].get<double>();
      f.hi_hz = b[1].get<double>();
    }
    f.notch = detail::field(body, "notch", f.notch);
    f.notch_hz = detail::field(body, "notch_hz", f.notch_hz);
    f.raw = detail::field(body, "raw", f.raw);
    return f;
  }

  // The display cascade: band-pass, then the optional notch.
  std::vector<dsp::Sos> design(int sps) const {
    try {
      auto s = dsp::design_filter(dsp::FilterSpec::bandpass(lo_hz, hi_hz, sps));
      if (notch) {
        auto n = dsp::design_filter(dsp::FilterSpec::notch(notch_hz, sps));
        s.insert(s.end(), n.begin(), n.end());
      }
      return s;
    } catch (const Error& e) {
      throw invalid("invalid_filter", e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Subscriptions
// ---------------------------------------------------------------------------

struct SubscriptionStats {
  std::uint64_t produced{0};   // batches offered since the subscription started
  std::uint64_t delivered{0};  // batches handed to the transport
  std::uint64_t skipped{0};    // batches dropped for being stale
  std::uint64_t pending{0};    // batches still queued
  std::uint64_t events_dropped{0};
};

// Bounded per-subscriber queue. When the transport falls behind, the oldest
// queued batches are dropped (freshness over completeness) and the next
// message is a status carrying the skip count; the gap lies before the next
// delivered batch.
class Subscription {
 public:
  Subscription(std::size_t depth, std::function<json()> status_doc)
      : depth_(std::max<std::size_t>(depth, 1)), status_doc_(std::move(status_doc)) {}

  // Next message, or nullptr on timeout or once closed and drained.
  template <class Rep, class Period>
  Message pop(std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return closed_ || !queue_.empty(); });
    return take(lk);
  }

  Message try_pop() {
    std::unique_lock lk(mu_);
    return take(lk);
  }

  // Called whenever a message becomes available, possibly with the service
  // lock held: it must only schedule work, never pop.
  void set_notifier(std::function<void()> fn) {
    std::lock_guard lk(mu_);
    notify_ = std::move(fn);
  }

  SubscriptionStats stats() const {
    std::lock_guard lk(mu_);
    auto s = stats_;
    s.pending = batches_queued_;
    return s;
  }

  bool closed() const {
    std::lock_guard lk(mu_);
    return closed_;
  }

  // First batch seq0 this subscriber receives in the current stream.
  std::uint64_t start_seq() const {
    std::lock_guard lk(mu_);
    return start_seq_;
  }

  void offer_batch(Message msg, std::uint64_t seq0) {
    {
      std::lock_guard lk(mu_);
      if (closed_ || seq0 < start_seq_) return;
      ++stats_.produced;
      if (batches_queued_ >= depth_) {
        auto it = std::find_if(queue_.begin(), queue_.end(), [](const Entry& e) { return e.batch; });
        queue_.erase(it);
        --batches_queued_;
        ++stats_.skipped;
        ++skip_pending_;
      }
      queue_.push_back({std::move(msg), true});
      ++batches_queued_;
    }
    wake();
  }

  void offer(Message msg) {
    {
      std::lock_guard lk(mu_);
      if (closed_) return;
      if (queue_.size() - batches_queued_ >= kMaxOther) {
        auto it = std::find_if(queue_.begin(), queue_.end(), [](const Entry& e) { return !e.batch; });
        queue_.erase(it);
        ++stats_.events_dropped;
      }
      queue_.push_back({std::move(msg), false});
    }
    wake();
  }

  void restart(std::uint64_t start_seq) {
    std::lock_guard lk(mu_);
    start_seq_ = start_seq;
  }

  void close() {
    {
      std::lock_guard lk(mu_);
      closed_ = true;
    }
    wake();
  }

 private:
  static constexpr std::size_t kMaxOther = 1024;

  struct Entry {
    Message msg;
    bool batch;
  };

  Message take(std::unique_lock<std::mutex>& lk) {
    if (queue_.empty()) return nullptr;
    if (skip_pending_ > 0) {
      std::uint64_t n = skip_pending_;
      skip_pending_ = 0;
      auto totals = stats_;
      totals.pending = batches_queued_;
      lk.unlock();
      json doc = status_doc_ ? status_doc_() : json::object();
      doc["type"] = "status";
      doc["skipped"] = n;
      doc["skipped_total"] = totals.skipped;
      doc["delivered"] = totals.delivered;
      doc["produced"] = totals.produced;
      return std::make_shared<const std::string>(doc.dump());
    }
    Entry e = std::move(queue_.front());
    queue_.pop_front();
    if (e.batch) {
      --batches_queued_;
      ++stats_.delivered;
    }
    return e.msg;
  }

  void wake() {
    std::function<void()> fn;
    {
      std::lock_guard lk(mu_);
      fn = notify_;
    }
    cv_.notify_all();
    if (fn) fn();
  }

  const std::size_t depth_;
  std::function<json()> status_doc_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Entry> queue_;
  std::size_t batches_queued_{0};
  std::uint64_t skip_pending_{0};
  std::uint64_t start_seq_{0};
  bool closed_{false};
  SubscriptionStats stats_;
  std::function<void()> notify_;
};

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

struct ServiceConfig {
  std::string data_dir{"pieeg-data"};
  std::size_t queue_depth{4};  // batches per subscriber
  std::uint64_t seed{1};
  dsp::BurstConfig bursts{};
};

// Transport-independent control state machine and stream producer:
//   idle --stream/start--> streaming --session/start--> session
//   session --session/stop | protocol done--> streaming --stream/stop--> idle
// A stream that ends on its own (replay exhausted, backend failure) returns
// the service to idle and seals any running session.
class Service {
 public:
  explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) {
    std::filesystem::create_directories(cfg_.data_dir);
  }

  ~Service() { shutdown(); }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  const ServiceConfig& config() const { return cfg_; }

  json status() const {
    std::lock_guard lk(mu_);
    return status_locked();
  }

  json start_stream(const json& body) {
    std::lock_guard ctl(control_mu_);
    auto req = StreamRequest::from_json(body, cfg_.seed);
    {
      std::lock_guard lk(mu_);
      if (mode_ != Mode::idle) throw conflict("already_streaming", "a stream is already running; stop it first");
    }
    reap();
    auto run = std::make_unique<Run>();
    run->request = req;
    std::string source;
    if (req.backend == "simulated") {
      sim::SignalScenario sc;
      try {
        sc = sim::resolve_scenario(req.scenario, req.duration_s, req.seed);
        sc.sps = req.sps;
        sc.validate();
      } catch (const Error& e) {
        throw invalid("invalid_scenario", e.what());
      }
      acq::SimulatedOptions o;
      o.speed = req.speed;
      o.gain = req.gain;
      run->backend = std::make_unique<acq::SimulatedBackend>(sc, o);
      source = "simulated:" + sc.name;
    } else if (req.backend == "replay") {
      SessionRecord rec;
      try {
        rec = read_record(record_file(req.record));
      } catch (const ParseError& e) {
        throw invalid("invalid_record", e.what());
      }
      run->request.sps = rec.meta.sps;
      run->request.gain = rec.meta.gain;
      run->backend = std::make_unique<acq::ReplayBackend>(rec, acq::ReplayOptions{req.speed});
      source = "replay:" + req.record;
    } else {
      run->backend = std::make_unique<acq::HardwareBackend>();
      source = "hardware";
    }
    run->source = source;
    FilterSettings filters;
    {
      std::lock_guard lk(mu_);
      filters = filters_;
    }
    auto sections = filters.design(run->request.sps);
    acq::StreamParams params;
    try {
      run->backend->initialize();
      params = acq::stream_params_from(*run->backend);
    } catch (const Error& e) {
      throw ServiceError(503, "backend_unavailable", e.what());
    }
    run->buffer = std::make_unique<acq::FrameBuffer>(acq::default_capacity(params.sps));
    run->reader = std::make_unique<acq::Reader>(*run->buffer);
    {
      std::lock_guard lk(mu_);
      mode_ = Mode::streaming;
      stream_ = StreamInfo{};
      stream_.backend = req.backend;
      stream_.scenario = req.backend == "simulated" ? req.scenario : req.record;
      stream_.source = source;
      stream_.sps = params.sps;
      stream_.gain = run->request.gain;
      stream_.speed = req.speed;
      producer_ = Producer(params.sps, sections, filters, cfg_.bursts);
      filters_dirty_ = false;
      for (auto& s : subscribers_) s->restart(0);
    }
    run->handle = acq::run_stream(*run->backend, params, *run->buffer);
    run->thread = std::thread([this, r = run.get()] { produce(*r); });
    run_ = std::move(run);
    return broadcast_status();
  }

  json stop_stream() {
    std::lock_guard ctl(control_mu_);
    {
      std::lock_guard lk(mu_);
      if (mode_ == Mode::idle) throw conflict("not_streaming", "no stream is running");
    }
    reap();
    return status();
  }

  json set_filters(const json& body) {
    std::lock_guard ctl(control_mu_);
    std::lock_guard lk(mu_);
    auto next = FilterSettings::merge(filters_, body);
    next.design(mode_ == Mode::idle ? 250 : stream_.sps);  // validates
    filters_ = next;
    filters_dirty_ = true;
    return status_locked();
  }

  json start_session(const json& body) {
    std::lock_guard ctl(control_mu_);
    detail::require_object(body);
    auto name = detail::field<std::string>(body, "protocol", "alpha");
    auto cycles = detail::field(body, "cycles", 3);
    session::SessionProtocol proto;
    try {
      if (cycles < 1) throw DomainError("cycles must be >= 1");
      proto = session::find_protocol(name, cycles);
      if (body.is_object() && (body.contains("closed_s") || body.contains("open_s")))
        proto = session::SessionProtocol::alpha(cycles, detail::field(body, "closed_s", 5.0),
                                                detail::field(body, "open_s", 5.0));
      proto.validate();
    } catch (const DomainError& e) {
      throw invalid("invalid_protocol", e.what());
    }
    std::lock_guard lk(mu_);
    if (mode_ == Mode::idle) throw conflict("not_streaming", "start a stream before a session");
    if (mode_ == Mode::session) throw conflict("session_running", "a session is already running");
    RecordMetadata meta;
    meta.sps = stream_.sps;
    meta.gain = stream_.gain;
    meta.source = stream_.source;
    meta.start_time = session::utc_now_iso();
    meta.extra["protocol"] = proto.name;
    try {
      session_ = ActiveSession{next_record_id(), proto.name,
                               std::make_unique<session::SessionRecorder>(proto, meta), std::nullopt, 0};
    } catch (const DomainError& e) {
      throw invalid("invalid_protocol", e.what());
    }
    mode_ = Mode::session;
    auto doc = status_locked();
    broadcast_locked(make_status(doc));
    return doc;
  }

  json stop_session() {
    std::lock_guard ctl(control_mu_);
    std::lock_guard lk(mu_);
    if (mode_ != Mode::session) throw conflict("no_session", "no session is running");
    seal_session_locked();
    auto doc = status_locked();
    broadcast_locked(make_status(doc));
    return doc;
  }

  json list_records() const {
    json out = json::array();
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(cfg_.data_dir)) {
      auto name = e.path().filename().string();
      if (e.is_regular_file() && e.path().extension() == ".csv" && name.find(".markers.") == std::string::npos &&
          name.find(".traces.") == std::string::npos)
        files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& p : files) {
      try {
        out.push_back(summary(p.stem().string(), read_record(p.string())));
      } catch (const Error&) {
        // not a record
      }
    }
    return {{"records", out}};
  }

  // Summary, markers and (when the markers allow it) the alpha report.
  json get_record(const std::string& id) const {
    auto rec = read_record(record_file(id));
    json doc = summary(id, rec);
    json markers = json::array();
    for (const auto& m : rec.markers) markers.push_back({{"label", m.label}, {"t_start_s", m.t_start_s}, {"t_end_s", m.t_end_s}});
    doc["markers"] = markers;
    json quality = json::array();
    for (const auto& q : rec.quality)
      quality.push_back({{"t_start_s", q.t_start_s}, {"t_end_s", q.t_end_s}, {"frames", q.frames}});
    doc["quality"] = quality;
    doc["montage"] = rec.meta.montage;
    try {
      auto rep = session::analyze_record(rec, session::ReportKind::alpha);
      json rows = json::array();
      for (std::size_t c = 0; c < rep.alpha.size(); ++c) {
        const auto& r = rep.alpha[c];
        rows.push_back({{"channel", c + 1},
                        {"label", r.label},
                        {"closed_power_uV2", r.closed_power},
                        {"open_power_uV2", r.open_power},
                        {"ratio", r.ratio}});
      }
      doc["alpha"] = rows;
    } catch (const Error&) {
      doc["alpha"] = nullptr;
    }
    return doc;
  }

  // Path of a stored record; 404 for unknown or unsafe ids.
  std::string record_file(const std::string& id) const {
    if (id.empty() || id.find_first_of("/\\") != std::string::npos || id.front() == '.')
      throw not_found("no record '" + id + "'");
    auto p = std::filesystem::path(cfg_.data_dir) / (id + ".csv");
    if (!std::filesystem::is_regular_file(p)) throw not_found("no record '" + id + "'");
    return p.string();
  }

  std::shared_ptr<Subscription> subscribe() {
    auto sub = std::make_shared<Subscription>(cfg_.queue_depth, [this] { return status(); });
    std::lock_guard lk(mu_);
    // Start at the next whole batch boundary.
    std::uint64_t start = producer_.batch_seq0;
    if (mode_ != Mode::idle && !producer_.frames.empty()) start += static_cast<std::uint64_t>(stream_.sps);
    if (mode_ == Mode::idle) start = 0;
    sub->restart(start);
    subscribers_.push_back(sub);
    sub->offer(make_status(status_locked()));
    return sub;
  }

  void unsubscribe(const std::shared_ptr<Subscription>& sub) {
    if (!sub) return;
    sub->close();
    std::lock_guard lk(mu_);
    std::erase(subscribers_, sub);
  }

  std::size_t subscriber_count() const {
    std::lock_guard lk(mu_);
    return subscribers_.size();
  }

  // Blocks until the stream has returned to idle (or the timeout expires).
  template <class Rep, class Period>
  bool wait_idle(std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lk(mu_);
    return idle_cv_.wait_for(lk, timeout, [&] { return mode_ == Mode::idle; });
  }

  template <class Rep, class Period>
  bool wait_mode(Mode m, std::chrono::duration<Rep, Period> timeout) {
    std::unique_lock lk(mu_);
    return idle_cv_.wait_for(lk, timeout, [&] { return mode_ == m; });
  }

  void shutdown() {
    std::lock_guard ctl(control_mu_);
    reap();
    std::lock_guard lk(mu_);
    for (auto& s : subscribers_) s->close();
    subscribers_.clear();
  }

 private:
  struct Run {
    StreamRequest request;
    std::string source;
    std::unique_ptr<acq::DeviceBackend> backend;
    std::unique_ptr<acq::FrameBuffer> buffer;
    std::unique_ptr<acq::Reader> reader;
    std::unique_ptr<acq::StreamHandle> handle;
    std::thread thread;
  };

  struct StreamInfo {
    std::string backend;
    std::string scenario;
    std::string source;
    int sps{0};
    int gain{0};
    double speed{1.0};
    std::uint64_t frames{0};
    std::uint64_t dropped{0};
    std::uint64_t batches{0};
    std::string end_state;
    std::string diagnostic;
  };

  struct ActiveSession {
    std::string id;
    std::string protocol;
    std::unique_ptr<session::SessionRecorder> recorder;
    std::optional<session::CueEvent> cue;
    std::uint64_t seq0{0};  // stream seq of the session's first frame
  };

  // Per-stream DSP and batching state, touched only by the producer (under mu_).
  struct Producer {
    int sps{250};
    std::uint64_t batch_seq0{0};
    std::optional<std::uint64_t> next_seq;
    std::vector<acq::TimedFrame> frames;
    std::vector<dsp::FilterState> display;
    std::vector<dsp::FilterState> artifact;
    std::vector<std::array<double, protocol::kChannelCount>> shown;  // per frame of the open batch
    std::vector<std::array<double, protocol::kChannelCount>> banded;
    std::deque<std::vector<std::vector<double>>> history;  // last batches, 1-40 Hz, per channel
    std::vector<dsp::AlphaTracker> alpha;
    FilterSettings applied;
    dsp::BurstConfig bursts;

    Producer() = default;
    Producer(int rate, const std::vector<dsp::Sos>& sections, FilterSettings f, dsp::BurstConfig b)
        : sps(rate), applied(f), bursts(b) {
      set_display(sections);
      auto band = dsp::design_filter(dsp::FilterSpec::bandpass(1.0, std::min(40.0, 0.45 * rate), rate));
      artifact.assign(protocol::kChannelCount, dsp::FilterState(band));
      alpha.assign(protocol::kChannelCount, dsp::AlphaTracker(rate));
    }

    void set_display(const std::vector<dsp::Sos>& sections) {
      display.assign(protocol::kChannelCount, dsp::FilterState(sections));
    }
  };

  void produce(Run& run) {
    const auto slice = static_cast<std::size_t>(std::max(1, run.request.sps / 10));
    for (;;) {
      auto block = acq::read_block(*run.reader, slice, std::chrono::milliseconds(200));
      {
        std::lock_guard lk(mu_);
        for (const auto& f : block.frames) on_frame_locked(f);
        stream_.dropped += block.dropped;
      }
      if (block.terminal) break;
    }
    auto st = run.handle->status();
    std::lock_guard lk(mu_);
    if (!producer_.frames.empty()) emit_batch_locked(true);
    if (mode_ == Mode::session) seal_session_locked();
    stream_.end_state = acq::to_string(st.state);
    stream_.diagnostic = st.diagnostic;
    mode_ = Mode::idle;
    broadcast_locked(make_status(status_locked()));
    idle_cv_.notify_all();
  }

  void on_frame_locked(const acq::TimedFrame& f) {
    auto& p = producer_;
    const auto sps = static_cast<std::uint64_t>(p.sps);
    if (p.next_seq && f.seq > *p.next_seq) stream_.dropped += f.seq - *p.next_seq;
    p.next_seq = f.seq + 1;
    ++stream_.frames;
    while (f.seq >= p.batch_seq0 + sps) {
      if (!p.frames.empty()) emit_batch_locked(false);
      p.batch_seq0 += sps;
      p.frames.clear();
      p.shown.clear();
      p.banded.clear();
    }
    // Filter changes take effect at the next batch boundary.
    if (p.frames.empty() && filters_dirty_) {
      p.set_display(filters_.design(p.sps));
      p.applied = filters_;
      filters_dirty_ = false;
    }
    // Cues go out before the batch that contains them.
    if (session_.recorder) {
      for (const auto& cue : session_.recorder->feed(f)) {
        if (cue.step == 0) session_.seq0 = f.seq;
        session_.cue = cue;
        broadcast_locked(make_cue(cue, static_cast<double>(session_.seq0 + cue.frame) / p.sps));
      }
      if (session_.recorder->done()) {
        seal_session_locked();
        broadcast_locked(make_status(status_locked()));
      }
    }
    std::array<double, protocol::kChannelCount> shown{}, banded{};
    for (std::size_t c = 0; c < protocol::kChannelCount; ++c) {
      double d = p.display[c].process(f.uv[c]);
      shown[c] = p.applied.raw ? f.uv[c] : d;
      banded[c] = p.artifact[c].process(f.uv[c]);
    }
    p.frames.push_back(f);
    p.shown.push_back(shown);
    p.banded.push_back(banded);
    if (f.seq + 1 == p.batch_seq0 + sps) {
      emit_batch_locked(false);
      p.batch_seq0 += sps;
      p.frames.clear();
      p.shown.clear();
      p.banded.clear();
    }
  }

  void emit_batch_locked(bool final) {
    auto& p = producer_;
    const std::size_t n = p.frames.size();
    const double sps = p.sps;
    json channels = json::array();
    std::vector<std::vector<double>> band(protocol::kChannelCount, std::vector<double>(n));
    for (std::size_t c = 0; c < protocol::kChannelCount; ++c) {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) {
        v[i] = p.shown[i][c];
        band[c][i] = p.banded[i][c];
      }
      channels.push_back(std::move(v));
    }
    const double t0 = static_cast<double>(p.batch_seq0) / sps;
    const double t_end = t0 + static_cast<double>(n) / sps;
    json power = json::array();
    std::vector<json> events;
    for (std::size_t c = 0; c < protocol::kChannelCount; ++c) {
      if (auto ev = p.alpha[c].update(band[c], t_end, c)) events.push_back(make_event(*ev));
      power.push_back(p.alpha[c].power());
    }
    for (auto& e : artifact_events_locked(band)) events.push_back(std::move(e));

    json msg = {{"type", "samples"},
                {"seq0", p.batch_seq0},
                {"t0_s", t0},
                {"sps", p.sps},
                {"frames", n},
                {"missing", final ? 0 : static_cast<std::size_t>(p.sps) - n},
                {"final", final},
                {"raw", p.applied.raw},
                {"raw_available", true},
                {"filter", p.applied.to_json()},
                {"alpha_power_uV2", power},
                {"channels", std::move(channels)}};
    auto batch = std::make_shared<const std::string>(msg.dump());
    ++stream_.batches;
    for (auto& s : subscribers_) s->offer_batch(batch, p.batch_seq0);
    for (auto& e : events) broadcast_locked(std::make_shared<const std::string>(e.dump()));
  }

  // Bursts are reported one batch late, once a full second of context on
  // each side is known, so a burst is never reported twice.
  std::vector<json> artifact_events_locked(std::vector<std::vector<double>> band) {
    auto& p = producer_;
    std::vector<json> out;
    p.history.push_back(std::move(band));
    if (p.history.size() > 3) p.history.pop_front();
    if (p.history.size() < 3) return out;
    const double sps = p.sps;
    const std::size_t a = p.history[0][0].size(), b = a + p.history[1][0].size();
    const double t_window = static_cast<double>(p.batch_seq0) / sps - static_cast<double>(b) / sps;
    for (std::size_t c = 0; c < protocol::kChannelCount; ++c) {
      std::vector<double> w;
      for (const auto& h : p.history) w.insert(w.end(), h[c].begin(), h[c].end());
      auto found = dsp::count_artifacts_by_kind(w, sps, p.bursts, c);
      for (auto e : found.events) {
        auto idx = static_cast<std::size_t>(std::lround(e.t_peak_s * sps));
        if (idx < a || idx >= b) continue;
        e.t_start_s += t_window;
        e.t_end_s += t_window;
        e.t_peak_s += t_window;
        out.push_back(make_event(e));
      }
    }
    return out;
  }

  json make_event(const dsp::DetectionEvent& e) const {
    return {{"type", "event"},
            {"kind", dsp::to_string(e.kind)},
            {"channel", e.channel + 1},
            {"label", e.channel < default_montage().size() ? default_montage()[e.channel] : ""},
            {"t_start_s", e.t_start_s},
            {"t_end_s", e.t_end_s},
            {"t_peak_s", e.t_peak_s},
            {"magnitude_uv", e.magnitude_uv}};
  }

  Message make_cue(const session::CueEvent& c, double stream_t_s) const {
    json msg = {{"type", "cue"},
                {"label", c.label},
                {"t_s", stream_t_s},
                {"session_t_s", c.t_s},
                {"step", c.step},
                {"total_steps", c.total_steps},
                {"duration_s", c.duration_s},
                {"session", session_.id}};
    return std::make_shared<const std::string>(msg.dump());
  }

  static Message make_status(json doc) {
    doc["type"] = "status";
    return std::make_shared<const std::string>(doc.dump());
  }

  void broadcast_locked(const Message& m) {
    for (auto& s : subscribers_) s->offer(m);
  }

  json broadcast_status() {
    std::lock_guard lk(mu_);
    auto doc = status_locked();
    broadcast_locked(make_status(doc));
    return doc;
  }

  json status_locked() const {
    json doc = {{"mode", to_string(mode_)},
                {"filters", filters_.to_json()},
                {"subscribers", subscribers_.size()},
                {"dropped_total", stream_.dropped},
                {"data_dir", cfg_.data_dir}};
    if (!stream_.backend.empty()) {
      doc["stream"] = {{"backend", stream_.backend}, {"scenario", stream_.scenario}, {"source", stream_.source},
                       {"sps", stream_.sps},         {"gain", stream_.gain},         {"speed", stream_.speed},
                       {"frames", stream_.frames},   {"batches", stream_.batches},   {"dropped", stream_.dropped},
                       {"state", mode_ == Mode::idle ? stream_.end_state : std::string("running")},
                       {"diagnostic", stream_.diagnostic}};
      if (mode_ != Mode::idle) doc["sps"] = stream_.sps;
    }
    if (session_.recorder) {
      json s = {{"id", session_.id},
                {"protocol", session_.protocol},
                {"total_steps", session_.recorder->protocol().steps.size()},
                {"frames", session_.recorder->total_frames()}};
      if (session_.cue) {
        s["step"] = session_.cue->step;
        s["label"] = session_.cue->label;
        s["cue_session_t_s"] = session_.cue->t_s;
        s["cue_duration_s"] = session_.cue->duration_s;
      }
      doc["session"] = s;
    } else {
      doc["session"] = nullptr;
    }
    doc["last_record"] = last_record_.empty() ? json(nullptr) : json(last_record_);
    return doc;
  }

  void seal_session_locked() {
    if (!session_.recorder) return;
    auto rec = session_.recorder->finish();
    auto id = session_.id;
    session_ = ActiveSession{};
    if (mode_ == Mode::session) mode_ = Mode::streaming;
    idle_cv_.notify_all();
    try {
      write_record(rec, (std::filesystem::path(cfg_.data_dir) / (id + ".csv")).string());
      last_record_ = id;
    } catch (const std::exception& e) {
      stream_.diagnostic = std::string("session record not saved: ") + e.what();
    }
  }

  std::string next_record_id() {
    auto stamp = session::utc_now_iso();
    std::erase_if(stamp, [](char c) { return c == '-' || c == ':'; });
    for (;;) {
      auto id = "session-" + stamp + "-" + std::to_string(++record_counter_);
      if (!std::filesystem::exists(std::filesystem::path(cfg_.data_dir) / (id + ".csv"))) return id;
    }
  }

  static json summary(const std::string& id, const SessionRecord& r) {
    return {{"id", id},
            {"frames", r.frame_count()},
            {"duration_s", r.t_s.empty() ? 0.0 : r.end_time() - r.t_s.front()},
            {"sps", r.meta.sps},
            {"source", r.meta.source},
            {"start_time", r.meta.start_time},
            {"complete", r.meta.complete},
            {"flagged", r.flagged()},
            {"markers", r.markers.size()}};
  }

  // Stops and joins a previous run (control_mu_ held).
  void reap() {
    if (!run_) return;
    run_->handle->stop();
    if (run_->thread.joinable()) run_->thread.join();
    run_.reset();
  }

  ServiceConfig cfg_;
  std::mutex control_mu_;  // serializes control calls
  mutable std::mutex mu_;  // state shared with the producer
  std::condition_variable idle_cv_;
  Mode mode_{Mode::idle};
  StreamInfo stream_;
  FilterSettings filters_;
  bool filters_dirty_{false};
  Producer producer_;
  ActiveSession session_;
  std::string last_record_;
  std::uint64_t record_counter_{0};
  std::vector<std::shared_ptr<Subscription>> subscribers_;
  std::unique_ptr<Run> run_;
};

}  // namespace pieeg::service
