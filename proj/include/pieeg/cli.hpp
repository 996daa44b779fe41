#pragma once

#include <atomic>
#include <chrono>
#include <csignal>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "pieeg/acquisition.hpp"
#include "pieeg/server.hpp"
#include "pieeg/service.hpp"
#include "pieeg/session.hpp"

namespace pieeg::cli {

enum ExitCode : int { ok = 0, usage = 2, data = 3, runtime = 4 };

// Bad argument values (unknown scenario, unit, ...) that CLI11 cannot see.
struct UsageError : Error {
  explicit UsageError(const std::string& w) : Error("usage", w) {}
};

inline int exit_code_for(const Error& e) {
  const auto& k = e.kind();
  if (k == "usage") return usage;
  if (k == "parse" || k == "ingestion" || k == "protocol" || k == "domain" || k == "framing" || k == "encoding" ||
      k == "desync")
    return data;
  return runtime;
}

// Simulated recordings carry the scenario clock origin, so equal seeds give
// byte-identical files.
inline constexpr const char* kSimulatedEpoch = "1970-01-01T00:00:00Z";

namespace detail {

template <class F>
auto as_usage(F&& fn) {
  try {
    return fn();
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
}

inline acq::FrameBuffer offline_buffer(int sps) {
  return acq::FrameBuffer(acq::default_capacity(sps), acq::OverflowPolicy::block_writer);
}

inline void print_record_summary(std::ostream& out, const SessionRecord& r, const std::string& path) {
  out << "frames     " << r.frame_count() << "\n";
  out << "duration_s " << (r.t_s.empty() ? 0.0 : r.end_time() - r.t_s.front()) << "\n";
  out << "sps        " << r.meta.sps << "\n";
  out << "markers    " << r.markers.size() << "\n";
  out << "dropped    " << [&] {
    std::uint64_t n = 0;
    for (const auto& q : r.quality) n += q.frames;
    return n;
  }() << "\n";
  out << "complete   " << (r.meta.complete ? "yes" : "no") << "\n";
  if (!path.empty()) out << "written    " << path << "\n";
}

inline void check_complete(const acq::StreamHandle& h) {
  auto st = h.status();
  if (st.state == acq::StreamState::backend_error) throw BackendError("stream failed: " + st.diagnostic);
}

inline std::atomic<bool> g_interrupted{false};
inline void on_signal(int) { g_interrupted = true; }

}  // namespace detail

struct SimulateArgs {
  std::string scenario{"alpha_test"};
  std::optional<double> duration_s;  // presets: 60 s; files: their duration_s
  std::string out;
  double speed{0.0};
  int gain{24};
};

inline SessionRecord simulate(const SimulateArgs& a, std::uint64_t seed) {
  if (a.duration_s && !(*a.duration_s > 0.0)) throw UsageError("--duration must be positive");
  auto sc = detail::as_usage([&] { return sim::resolve_scenario(a.scenario, a.duration_s.value_or(60.0), seed); });
  const double duration_s = a.duration_s.value_or(sc.duration_s);
  acq::SimulatedOptions o;
  o.speed = a.speed;
  o.gain = a.gain;
  o.frame_limit = static_cast<std::uint64_t>(std::llround(duration_s * sc.sps));
  acq::SimulatedBackend backend(sc, o);
  backend.initialize();
  auto buffer = detail::offline_buffer(sc.sps);
  acq::Reader reader(buffer);
  auto params = acq::stream_params_from(backend, o.vref_volts);
  RecordMetadata meta;
  meta.sps = params.sps;
  meta.gain = a.gain;
  meta.vref_volts = o.vref_volts;
  meta.source = "simulated:" + sc.name;
  meta.start_time = kSimulatedEpoch;
  meta.extra["seed"] = std::to_string(sc.seed);
  auto handle = acq::run_stream(backend, params, buffer);
  auto rec = session::capture(reader, meta, o.frame_limit);
  handle->join();
  detail::check_complete(*handle);
  rec.markers = session::clip_markers(sc.markers, rec);
  return rec;
}

struct ReplayResult {
  SessionRecord record;
  double wall_s{0.0};
};

inline ReplayResult replay(const std::string& in, double speed) {
  if (speed < 0.0) throw UsageError("--speed must be >= 0");
  auto source = read_record(in);
  acq::ReplayBackend backend(source, {speed});
  backend.initialize();
  auto buffer = detail::offline_buffer(source.meta.sps);
  acq::Reader reader(buffer);
  auto params = acq::stream_params_from(backend, source.meta.vref_volts);
  auto t0 = std::chrono::steady_clock::now();
  auto handle = acq::run_stream(backend, params, buffer);
  auto meta = source.meta;
  meta.source = "replay:" + in;
  auto rec = session::capture(reader, meta);
  handle->join();
  double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  detail::check_complete(*handle);
  // Replay re-emits frames from seq 0; restore the source timeline.
  if (rec.frame_count() == source.frame_count()) {
    rec.t_s = source.t_s;
    rec.quality = source.quality;
  }
  rec.markers = source.markers;
  return {std::move(rec), wall};
}

struct RecordArgs {
  std::string protocol{"alpha"};
  int cycles{3};
  std::string scenario{"alpha_test"};
  std::string out;
  double speed{0.0};
  int gain{24};
};

inline SessionRecord record_session(const RecordArgs& a, std::uint64_t seed,
                                    const std::atomic<bool>* cancel = nullptr) {
  auto proto = detail::as_usage([&] {
    if (a.cycles < 1) throw DomainError("--cycles must be >= 1");
    auto p = session::find_protocol(a.protocol, a.cycles);
    p.validate();
    return p;
  });
  auto sc = detail::as_usage([&] { return sim::resolve_scenario(a.scenario, proto.duration_s(), seed); });
  acq::SimulatedOptions o;
  o.speed = a.speed;
  o.gain = a.gain;
  acq::SimulatedBackend backend(sc, o);
  backend.initialize();
  auto buffer = detail::offline_buffer(sc.sps);
  acq::Reader reader(buffer);
  auto params = acq::stream_params_from(backend, o.vref_volts);
  RecordMetadata meta;
  meta.sps = params.sps;
  meta.gain = a.gain;
  meta.source = "simulated:" + sc.name;
  meta.start_time = kSimulatedEpoch;
  meta.extra["seed"] = std::to_string(sc.seed);
  meta.extra["protocol"] = proto.name;
  auto handle = acq::run_stream(backend, params, buffer);
  session::RunOptions opts;
  opts.cancel = cancel;
  auto rec = session::run_session(proto, reader, meta, {}, opts);
  handle->stop();
  detail::check_complete(*handle);
  return rec;
}

// Parses a comma-separated list of 0-based column indices.
inline std::vector<std::size_t> parse_columns(const std::string& s) {
  std::vector<std::size_t> out;
  if (s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      long v = std::stol(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw UsageError("bad column index '" + item + "'");
    }
  }
  return out;
}

// Runs the command line; `stop` (when given) ends `serve` and `record`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
               const std::atomic<bool>* stop = nullptr) {
  CLI::App app{"PiEEG-16 acquisition, analysis and streaming tools", "pieeg"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "Seed for simulated signals")->capture_default_str();

  SimulateArgs sim_args;
  auto* sim_cmd = app.add_subcommand("simulate", "Simulated device -> acquisition -> record");
  sim_cmd->add_option("--scenario", sim_args.scenario, "Preset name or scenario file")->capture_default_str();
  sim_cmd->add_option("--duration", sim_args.duration_s, "Seconds to record [60, or the scenario file's duration_s]");
  sim_cmd->add_option("--out", sim_args.out, "Record file")->required();
  sim_cmd->add_option("--speed", sim_args.speed, "Pacing: 1 = real time, 0 = as fast as possible")
      ->capture_default_str()->check(CLI::NonNegativeNumber);
  sim_cmd->add_option("--gain", sim_args.gain, "PGA gain")->capture_default_str()->check(CLI::IsMember({1, 2, 4, 6, 8, 12, 24}));

  std::string replay_in, replay_out;
  double replay_speed = 1.0;
  auto* replay_cmd = app.add_subcommand("replay", "Stream a record through the replay backend");
  replay_cmd->add_option("--in", replay_in, "Record file")->required();
  replay_cmd->add_option("--speed", replay_speed, "Pacing: 1 = real time, 0 = as fast as possible")
      ->capture_default_str()->check(CLI::NonNegativeNumber);
  replay_cmd->add_option("--out", replay_out, "Write the re-recorded stream here");

  std::string an_in, an_report = "alpha", an_out;
  auto* analyze_cmd = app.add_subcommand("analyze", "Alpha or artifact report for a record");
  analyze_cmd->add_option("--in", an_in, "Record file")->required();
  analyze_cmd->add_option("--report", an_report, "alpha | artifact")->capture_default_str();
  analyze_cmd->add_option("--out", an_out, "CSV table (traces go next to it)");

  RecordArgs rec_args;
  auto* record_cmd = app.add_subcommand("record", "Run a cued session against a simulated stream");
  record_cmd->add_option("--protocol", rec_args.protocol, "Cue protocol")->capture_default_str();
  record_cmd->add_option("--cycles", rec_args.cycles, "Closed/open cycles")->capture_default_str();
  record_cmd->add_option("--scenario", rec_args.scenario, "Preset name or scenario file")->capture_default_str();
  record_cmd->add_option("--out", rec_args.out, "Record file")->required();
  record_cmd->add_option("--speed", rec_args.speed, "Pacing: 1 = real time, 0 = as fast as possible")
      ->capture_default_str()->check(CLI::NonNegativeNumber);

  server::ServerConfig srv_cfg;
  service::ServiceConfig svc_cfg;
  auto* serve_cmd = app.add_subcommand("serve", "Control and streaming service");
  std::optional<int> port_opt;
  std::optional<std::string> bind_opt, dir_opt;
  serve_cmd->add_option("--port", port_opt, "TCP port (0 picks one); default 8080 or PIEEG_PORT")
      ->check(CLI::Range(0, 65535));
  serve_cmd->add_option("--bind", bind_opt, "Bind address; default 127.0.0.1 or PIEEG_BIND");
  serve_cmd->add_option("--data-dir", dir_opt, "Where session records go; default pieeg-data or PIEEG_DATA_DIR");
  serve_cmd->add_option("--queue-depth", svc_cfg.queue_depth, "Batches queued per subscriber")->capture_default_str();

  std::string ing_in, ing_out, ing_unit = "uV", ing_columns, ing_delim = ",";
  int ing_sps = 250;
  std::optional<std::size_t> ing_time_col;
  bool ing_header = false;
  auto* ingest_cmd = app.add_subcommand("ingest", "Normalize an external CSV into a record");
  ingest_cmd->add_option("--in", ing_in, "CSV file")->required();
  ingest_cmd->add_option("--sps", ing_sps, "Sample rate")->capture_default_str()->check(CLI::PositiveNumber);
  ingest_cmd->add_option("--unit", ing_unit, "uV | mV | V")->capture_default_str();
  ingest_cmd->add_option("--out", ing_out, "Record file")->required();
  ingest_cmd->add_option("--columns", ing_columns, "0-based channel columns, comma separated (default: all)");
  ingest_cmd->add_option("--time-column", ing_time_col, "0-based column to drop as time");
  ingest_cmd->add_option("--delimiter", ing_delim, "Field separator")->capture_default_str();
  ingest_cmd->add_flag("--header", ing_header, "First row is a header");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  try {
    if (*sim_cmd) {
      auto rec = simulate(sim_args, seed);
      write_record(rec, sim_args.out);
      detail::print_record_summary(out, rec, sim_args.out);
    } else if (*replay_cmd) {
      auto res = replay(replay_in, replay_speed);
      if (!replay_out.empty()) write_record(res.record, replay_out);
      detail::print_record_summary(out, res.record, replay_out);
      out << "wall_s     " << std::fixed << std::setprecision(3) << res.wall_s << "\n";
    } else if (*analyze_cmd) {
      auto kind = detail::as_usage([&] { return session::parse_report_kind(an_report); });
      auto rec = read_record(an_in);
      auto rep = session::analyze_record(rec, kind);
      out << session::format_summary(rep);
      if (!an_out.empty()) write_report(rep, an_out);
    } else if (*record_cmd) {
      auto rec = record_session(rec_args, seed, stop);
      write_record(rec, rec_args.out);
      detail::print_record_summary(out, rec, rec_args.out);
    } else if (*serve_cmd) {
      server::apply_env(srv_cfg, svc_cfg);
      if (port_opt) srv_cfg.port = static_cast<unsigned short>(*port_opt);
      if (bind_opt) srv_cfg.bind = *bind_opt;
      if (dir_opt) svc_cfg.data_dir = *dir_opt;
      svc_cfg.seed = seed;
      service::Service svc(svc_cfg);
      server::Server srv(svc, srv_cfg);
      srv.start();
      out << "listening on http://" << srv.bind_address() << ":" << srv.port() << " (data " << svc_cfg.data_dir
          << ")" << std::endl;
      if (!stop) {
        std::signal(SIGINT, detail::on_signal);
        std::signal(SIGTERM, detail::on_signal);
      }
      const std::atomic<bool>& flag = stop ? *stop : detail::g_interrupted;
      while (!flag.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      srv.stop();
      svc.shutdown();
      out << "stopped" << std::endl;
    } else if (*ingest_cmd) {
      session::IngestSpec spec;
      spec.sps = ing_sps;
      spec.unit = detail::as_usage([&] { return session::parse_unit(ing_unit); });
      if (ing_delim.size() != 1) throw UsageError("--delimiter must be one character");
      spec.delimiter = ing_delim[0];
      spec.columns = parse_columns(ing_columns);
      spec.time_column = ing_time_col;
      spec.header = ing_header;
      auto res = session::ingest_external(ing_in, spec);
      write_record(res.record, ing_out);
      for (const auto& issue : res.issues) err << "skipped: " << issue << "\n";
      detail::print_record_summary(out, res.record, ing_out);
      out << "skipped    " << res.skipped_rows << "\n";
    }
  } catch (const Error& e) {
    err << "error (" << e.kind() << "): " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return runtime;
  }
  return ok;
}

}  // namespace pieeg::cli
