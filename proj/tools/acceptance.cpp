// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fail.
#include <sys/socket.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "pieeg/cli.hpp"

using namespace pieeg;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using Rational = boost::multiprecision::cpp_rational;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

Outcome pass(std::string d) { return {true, std::move(d)}; }
Outcome fail(std::string d) { return {false, std::move(d)}; }

std::string num(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

struct Scratch {
  fs::path dir = fs::temp_directory_path() / ("pieeg_acceptance_" + std::to_string(::getpid()));
  Scratch() { fs::create_directories(dir); }
  ~Scratch() { fs::remove_all(dir); }
  std::string file(const std::string& n) const { return (dir / n).string(); }
};

struct CliOut {
  int code;
  std::string out, err;
};

CliOut pieeg_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "pieeg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

void require_ok(const CliOut& r, const std::string& what) {
  if (r.code != 0) throw std::runtime_error(what + " exited " + std::to_string(r.code) + ": " + r.err);
}

std::vector<double> report_ratios(const std::string& path) {
  std::ifstream in(path);
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("channel", 0) == 0) continue;
    out.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  }
  return out;
}

// --- 1: codec ---------------------------------------------------------------

Outcome codec() {
  using namespace protocol;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::int32_t> sample(kRawMin, kRawMax);
  std::uniform_int_distribution<int> byte(0, 255), nib(0, 15);
  for (int i = 0; i < 10000; ++i) {
    DataFrame f;
    for (auto& s : f.status)
      s = make_status(static_cast<std::uint8_t>(byte(rng)), static_cast<std::uint8_t>(byte(rng)),
                      static_cast<std::uint8_t>(nib(rng)));
    for (auto& c : f.channels) c = sample(rng);
    auto bytes = encode_frame(f);
    if (decode_frame(bytes) != f || encode_frame(decode_frame(bytes)) != bytes)
      return fail("frame " + std::to_string(i) + " did not round-trip");
  }
  FrameBytes b{};
  b[0] = b[27] = 0xC0;
  const std::pair<std::array<std::uint8_t, 3>, std::int32_t> vectors[] = {
      {{0x7F, 0xFF, 0xFF}, 8388607}, {{0xFF, 0xFF, 0xFF}, -1}, {{0x80, 0x00, 0x00}, -8388608}};
  for (const auto& [v, want] : vectors) {
    std::copy(v.begin(), v.end(), b.begin() + 3);
    if (decode_frame(b).channels[0] != want) return fail("boundary vector decodes wrong: want " + std::to_string(want));
  }
  return pass("10000 random frames byte-exact; 3 boundary vectors");
}

// --- 2: conversion ----------------------------------------------------------

Outcome conversion() {
  using namespace protocol;
  if (raw_to_microvolts(8388607, {4.5, 24}) != 187500.0) return fail("full scale is not 187500.0 uV");
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::int32_t> dist(kRawMin, kRawMax);
  const Rational vref(9, 2);
  double worst = 0.0;
  for (int i = 0; i < 100000; ++i) {
    std::int32_t raw = dist(rng);
    for (int g : kGains) {
      ConversionParams p{4.5, g};
      Rational lsb = vref * 1000000 / (Rational(g) * 8388607);
      Rational exact = Rational(raw) * lsb;
      double err_lsb = std::abs(static_cast<double>((Rational(raw_to_microvolts(raw, p)) - exact) / lsb));
      worst = std::max(worst, err_lsb);
      if (err_lsb > 0.5) return fail("raw " + std::to_string(raw) + " gain " + std::to_string(g) + " off by " + num(err_lsb) + " LSB");
      if (microvolts_to_raw(static_cast<double>(exact), p).raw != raw) return fail("uV->raw does not invert raw " + std::to_string(raw));
    }
  }
  return pass("10^5 counts x 7 gains; worst error " + num(worst) + " LSB; full scale exact");
}

// --- 3: filter --------------------------------------------------------------

Outcome filter() {
  auto sos = dsp::design_filter(dsp::FilterSpec::bandpass(8, 12));
  double g10 = dsp::magnitude(sos, 10, 250);
  double db50 = 20 * std::log10(dsp::magnitude(sos, 50, 250));
  double db2 = 20 * std::log10(dsp::magnitude(sos, 2, 250));
  if (g10 < 0.95 || g10 > 1.05) return fail("gain at 10 Hz " + num(g10));
  if (db50 > -40 || db2 > -40) return fail("stopband " + num(db2) + " dB @2 Hz, " + num(db50) + " dB @50 Hz");
  std::mt19937_64 rng(3);
  std::normal_distribution<double> noise(0.0, 50.0);
  std::vector<double> x(25000);
  for (auto& v : x) v = noise(rng);
  auto whole = dsp::filter_signal(sos, x);
  dsp::FilterState st(sos);
  std::uniform_int_distribution<std::size_t> len(1, 300);
  double worst = 0.0;
  for (std::size_t pos = 0; pos < x.size();) {
    std::size_t n = std::min(x.size() - pos, len(rng));
    auto y = st.process(std::span<const double>(x).subspan(pos, n));
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::abs(y[i] - whole[pos + i]));
    pos += n;
  }
  if (worst > 1e-9) return fail("block split differs by " + num(worst) + " uV");
  return pass("|H(10)|=" + num(g10, 4) + ", " + num(db2) + " dB @2 Hz, " + num(db50) + " dB @50 Hz, split diff " +
              num(worst) + " uV");
}

// --- 4: alpha ---------------------------------------------------------------

Outcome alpha() {
  Scratch s;
  require_ok(pieeg_cli({"simulate", "--scenario", "alpha_test", "--duration", "60", "--seed", "1", "--out", s.file("a.csv")}), "simulate");
  require_ok(pieeg_cli({"analyze", "--in", s.file("a.csv"), "--report", "alpha", "--out", s.file("a_rep.csv")}), "analyze");
  auto r = report_ratios(s.file("a_rep.csv"));
  if (r.size() != 16) return fail("report has " + std::to_string(r.size()) + " channels");
  double lo = *std::min_element(r.begin(), r.end());
  if (lo <= 3.0) return fail("min closed/open ratio " + num(lo));
  require_ok(pieeg_cli({"simulate", "--scenario", "alpha_control", "--duration", "60", "--seed", "1", "--out", s.file("c.csv")}), "simulate");
  require_ok(pieeg_cli({"analyze", "--in", s.file("c.csv"), "--report", "alpha", "--out", s.file("c_rep.csv")}), "analyze");
  auto c = report_ratios(s.file("c_rep.csv"));
  if (c.size() != 16) return fail("control report has " + std::to_string(c.size()) + " channels");
  for (double v : c)
    if (std::abs(v - 1.0) > 0.2) return fail("control ratio " + num(v));
  auto [cmin, cmax] = std::minmax_element(c.begin(), c.end());
  return pass("min ratio " + num(lo) + " on 16 channels; control " + num(*cmin) + ".." + num(*cmax));
}

// --- 5: artifact ------------------------------------------------------------

Outcome artifact() {
  Scratch s;
  for (int seed = 1; seed <= 10; ++seed) {
    require_ok(pieeg_cli({"simulate", "--scenario", "artifact_test", "--duration", "40", "--seed", std::to_string(seed), "--out", s.file("a.csv")}), "simulate");
    auto r = pieeg_cli({"analyze", "--in", s.file("a.csv"), "--report", "artifact"});
    require_ok(r, "analyze");
    if (r.out != "chew [4,3,2,1]\nblink [4,3,2,1]\n") return fail("seed " + std::to_string(seed) + ": " + r.out);
  }
  return pass("chew [4,3,2,1], blink [4,3,2,1] for seeds 1..10");
}

// --- 6: real-time -----------------------------------------------------------

Outcome realtime(bool soak) {
  const std::uint64_t total = soak ? 150000 : 7500;  // 600 s or 30 s at 250 sps
  const std::uint64_t stall = 2500;                   // 10 s
  acq::SimulatedOptions o;
  o.speed = 1.0;
  o.frame_limit = total;
  acq::SimulatedBackend b(sim::make_zero(static_cast<double>(total) / 250.0 + 1.0, 6), o);
  b.initialize();
  acq::FrameBuffer buf(acq::default_capacity(250));  // 4 s
  acq::Reader keep(buf), stalled(buf);
  auto h = acq::run_stream(b, acq::StreamParams::uniform(250), buf);

  std::uint64_t keep_frames = 0, keep_dropped = 0;
  std::int64_t last_seq = -1;
  bool monotone = true;
  std::thread keeper([&] {
    for (;;) {
      auto blk = acq::read_block(keep, 25, 1s);
      keep_dropped += blk.dropped;
      for (const auto& f : blk.frames) {
        if (static_cast<std::int64_t>(f.seq) <= last_seq) monotone = false;
        last_seq = static_cast<std::int64_t>(f.seq);
        ++keep_frames;
      }
      if (blk.terminal) return;
    }
  });

  auto first = acq::read_block(stalled, 1, 5s);
  if (first.frames.empty()) {
    h->stop();
    keeper.join();
    return fail("no frames from stream");
  }
  std::uint64_t resume = first.frames[0].seq + 1;
  while (buf.write_seq() < resume + stall) std::this_thread::sleep_for(1ms);
  auto after = acq::read_block(stalled, 1000, 5s);
  const double predicted = static_cast<double>(stall - buf.capacity());
  for (;;) {  // a stalled reader that resumes keeps up again
    auto blk = acq::read_block(stalled, 250, 1s);
    if (blk.terminal) break;
  }
  keeper.join();
  h->join();

  if (keep_dropped != 0) return fail("keep-up reader dropped " + std::to_string(keep_dropped));
  if (!monotone) return fail("sequence not strictly increasing");
  if (keep_frames != total) return fail("keep-up reader saw " + std::to_string(keep_frames) + " of " + std::to_string(total));
  if (std::abs(static_cast<double>(after.dropped) - predicted) > 1.0)
    return fail("stall dropped " + std::to_string(after.dropped) + ", predicted " + num(predicted, 6));
  return pass(std::to_string(total) + " frames, dropped=0, seq increasing; 10 s stall on 4 s ring dropped " +
              std::to_string(after.dropped) + " (predicted " + num(predicted, 6) + ")");
}

// --- 7: session timing ------------------------------------------------------

Outcome session_timing() {
  Scratch s;
  require_ok(pieeg_cli({"record", "--protocol", "alpha", "--cycles", "3", "--scenario", "alpha_test", "--out", s.file("s.csv")}), "record");
  auto rec = read_record(s.file("s.csv"));
  if (rec.markers.size() != 6) return fail(std::to_string(rec.markers.size()) + " markers");
  std::set<double> stamps(rec.t_s.begin(), rec.t_s.end());
  for (const auto& m : rec.markers) {
    if (!stamps.count(m.t_start_s)) return fail("marker start " + num(m.t_start_s, 10) + " is not a frame timestamp");
    auto frames = std::count_if(rec.t_s.begin(), rec.t_s.end(), [&](double t) { return t >= m.t_start_s && t < m.t_end_s; });
    if (frames != 1250) return fail(m.label + " spans " + std::to_string(frames) + " frames");
  }
  return pass("6 intervals x 1250 frames on frame timestamps");
}

// --- 8: record format -------------------------------------------------------

SessionRecord random_record(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 6), frames(0, 300), coin(0, 1);
  std::uniform_real_distribution<double> amp(-187500.0, 187500.0), u(0.0, 1.0);
  SessionRecord r;
  r.meta.sps = protocol::kDataRates[static_cast<std::size_t>(pick(rng))];
  r.meta.gain = protocol::kGains[static_cast<std::size_t>(pick(rng))];
  r.meta.source = coin(rng) ? "simulated:alpha_test" : "replay";
  r.meta.start_time = "2026-01-01T00:00:00Z";
  r.meta.complete = coin(rng);
  const double step = 1.0 / r.meta.sps;
  std::int64_t seq = static_cast<std::int64_t>(rng() % 1000);
  int n = frames(rng);
  for (int i = 0; i < n; ++i) {
    if (i > 0 && u(rng) < 0.01) {
      std::int64_t lost = 1 + static_cast<std::int64_t>(rng() % 50);
      r.quality.push_back({static_cast<double>(seq) * step, static_cast<double>(seq + lost) * step, static_cast<std::uint64_t>(lost)});
      seq += lost;
    }
    ChannelValues v;
    for (auto& x : v) x = amp(rng);
    r.append(static_cast<double>(seq++) * step, v);
  }
  if (n > 0)
    for (int m = 0, k = static_cast<int>(rng() % 4); m < k; ++m) {
      double a = r.t_s.front() + u(rng) * (r.end_time() - r.t_s.front());
      r.markers.push_back({m % 2 ? "eyes_open" : "eyes_closed", a, a + u(rng) * (r.end_time() - a)});
    }
  return r;
}

Outcome record_format() {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 1000; ++i) {
    auto r = random_record(rng);
    std::stringstream data, markers;
    write_record(r, data, markers);
    if (read_record(data, &markers) != r) return fail("record " + std::to_string(i) + " changed in round trip");
  }
  Scratch s;
  require_ok(pieeg_cli({"simulate", "--scenario", "artifact_test", "--duration", "40", "--out", s.file("a.csv")}), "simulate");
  require_ok(pieeg_cli({"replay", "--in", s.file("a.csv"), "--speed", "0", "--out", s.file("b.csv")}), "replay");
  auto a = read_record(s.file("a.csv")), b = read_record(s.file("b.csv"));
  if (a.uv != b.uv || a.t_s != b.t_s || a.markers != b.markers) return fail("replayed record differs from source");
  return pass("1000 random records identical; replay re-record sample-identical (" + std::to_string(a.frame_count()) + " frames)");
}

// --- 9: service cadence -----------------------------------------------------

namespace beast = boost::beast;
namespace websocket = beast::websocket;
namespace net = boost::asio;

struct WsClient {
  net::io_context ioc;
  websocket::stream<net::ip::tcp::socket> ws{ioc};

  WsClient(unsigned short port, int receive_buffer = 0) {
    auto& s = ws.next_layer();
    s.open(net::ip::tcp::v4());
    if (receive_buffer > 0) s.set_option(net::socket_base::receive_buffer_size(receive_buffer));
    timeval tv{20, 0};
    ::setsockopt(s.native_handle(), SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
    s.connect({net::ip::make_address("127.0.0.1"), port});
    ws.handshake("127.0.0.1", "/stream");
  }

  service::json next() {
    beast::flat_buffer b;
    ws.read(b);
    return service::json::parse(beast::buffers_to_string(b.data()));
  }

  // Reads to the idle status that follows the final batch.
  void drain(std::vector<service::json>& batches, std::uint64_t& skipped) {
    for (;;) {
      auto m = next();
      if (m["type"] == "samples") batches.push_back(m);
      if (m["type"] != "status") continue;
      if (m.contains("skipped")) skipped += m["skipped"].get<std::uint64_t>();
      else if (m["mode"] == "idle" && !batches.empty() && batches.back()["final"] == true) return;
    }
  }
};

Outcome cadence() {
  Scratch s;
  service::ServiceConfig sc;
  sc.data_dir = s.file("data");
  service::Service svc(sc);
  server::ServerConfig cfg;
  cfg.port = 0;
  cfg.send_buffer_bytes = 4096;
  server::Server srv(svc, cfg);
  srv.start();
  WsClient fast(srv.port()), slow(srv.port(), 4096);
  svc.start_stream({{"scenario", "alpha_test"}, {"speed", 1}});

  std::vector<service::json> fast_batches, slow_batches;
  std::uint64_t fast_skipped = 0, slow_skipped = 0;
  auto t0 = std::chrono::steady_clock::now();
  while (fast_batches.size() < 30) {  // the slow subscriber reads nothing meanwhile
    auto m = fast.next();
    if (m["type"] == "samples") fast_batches.push_back(m);
    if (m.contains("skipped")) fast_skipped += m["skipped"].get<std::uint64_t>();
  }
  double took = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<service::json> first30 = fast_batches;
  svc.stop_stream();
  fast.drain(fast_batches, fast_skipped);
  slow.drain(slow_batches, slow_skipped);
  srv.stop();

  for (std::size_t k = 0; k < first30.size(); ++k) {
    if (first30[k]["seq0"].get<std::uint64_t>() != 250 * k) return fail("batch " + std::to_string(k) + " not contiguous");
    if (first30[k]["frames"] != 250) return fail("batch " + std::to_string(k) + " has " + first30[k]["frames"].dump() + " frames");
  }
  if (fast_skipped != 0) return fail("reading subscriber skipped " + std::to_string(fast_skipped));
  if (slow_skipped == 0) return fail("stalled subscriber never skipped");
  if (slow_batches.size() + slow_skipped != fast_batches.size())
    return fail("stalled: " + std::to_string(slow_batches.size()) + " delivered + " + std::to_string(slow_skipped) +
                " skipped != " + std::to_string(fast_batches.size()) + " produced");
  return pass("30 contiguous 250-frame batches in " + num(took) + " s; stalled subscriber " +
              std::to_string(slow_batches.size()) + " delivered + " + std::to_string(slow_skipped) + " skipped = " +
              std::to_string(fast_batches.size()) + " produced");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pieeg acceptance run"};
  bool soak = false;
  std::vector<int> only;
  app.add_flag("--soak", soak, "run the 10-minute real-time stream instead of the 30 s smoke");
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int id;
    std::string name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "codec soundness", 5, codec},
      {2, "conversion oracle", 10, conversion},
      {3, "filter spec", 5, filter},
      {4, "alpha reproduction", 30, alpha},
      {5, "artifact reproduction", 60, artifact},
      {6, soak ? "real-time invariant (soak)" : "real-time invariant (smoke)", soak ? 660.0 : 45.0, [soak] { return realtime(soak); }},
      {7, "session timing", 30, session_timing},
      {8, "record format", 60, record_format},
      {9, "service cadence", 60, cadence},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = fail(std::string("error: ") + e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (o.pass && secs > c.budget_s) o = fail("took " + num(secs) + " s, budget " + num(c.budget_s) + " s");
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.id << " " << c.name << ": " << o.detail << " [" << num(secs) << " s]"
              << std::endl;
  }
  return failed ? 1 : 0;
}
