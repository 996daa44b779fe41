#pragma once

// Cued sessions, frame capture, external-table ingestion and offline
// analysis reports.

#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pieeg/acquisition.hpp"
#include "pieeg/dsp.hpp"
#include "pieeg/record.hpp"

namespace pieeg::session {

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct CueStep {
  std::string label;
  double duration_s{0.0};
  bool operator==(const CueStep&) const = default;
};

struct SessionProtocol {
  std::string name;
  std::vector<CueStep> steps;
  std::vector<std::string> montage{default_montage()};

  void validate() const {
    for (const auto& s : steps) {
      if (!(s.duration_s > 0.0)) throw DomainError("cue '" + s.label + "' needs a positive duration");
      if (s.label.empty() || !record_detail::safe_text(s.label)) throw DomainError("invalid cue label '" + s.label + "'");
    }
    if (montage.size() != protocol::kChannelCount) throw DomainError("montage must list 16 labels");
    std::set<std::string> seen(montage.begin(), montage.end());
    if (seen.size() != montage.size()) throw DomainError("montage labels must be unique");
  }

  double duration_s() const {
    double t = 0.0;
    for (const auto& s : steps) t += s.duration_s;
    return t;
  }

  // N x [eyes_closed, eyes_open].
  static SessionProtocol alpha(int cycles, double closed_s = 5.0, double open_s = 5.0) {
    if (cycles < 0) throw DomainError("cycle count must be >= 0");
    SessionProtocol p{"alpha", {}, default_montage()};
    for (int i = 0; i < cycles; ++i) {
      p.steps.push_back({dsp::kEyesClosed, closed_s});
      p.steps.push_back({dsp::kEyesOpen, open_s});
    }
    return p;
  }
};

inline SessionProtocol find_protocol(const std::string& name, int cycles) {
  if (name == "alpha") return SessionProtocol::alpha(cycles);
  throw DomainError("unknown protocol '" + name + "' (known: alpha)");
}

// ---------------------------------------------------------------------------
// Recording
// ---------------------------------------------------------------------------

struct CueEvent {
  std::size_t step{0};  // == steps.size() for the terminal "done" cue
  std::string label;
  double t_s{0.0};  // session time of the cue's first frame
  double duration_s{0.0};
  std::uint64_t frame{0};  // frames since session start
  std::size_t total_steps{0};
};

struct SessionSink {
  std::function<void(const CueEvent&)> on_cue;
  std::function<void(const acq::TimedFrame&)> on_frame;
};

inline std::string utc_now_iso() {
  std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Builds a SessionRecord frame by frame. Cue boundaries are counted in
// frames from the first frame seen, so every marker edge is a frame
// timestamp: k / sps with integer k.
class SessionRecorder {
 public:
  SessionRecorder(SessionProtocol protocol, RecordMetadata meta) : protocol_(std::move(protocol)) {
    protocol_.validate();
    record_.meta = std::move(meta);
    record_.meta.montage = protocol_.montage;
    if (record_.meta.sps <= 0) throw DomainError("record sps must be positive");
    std::uint64_t acc = 0;
    for (const auto& s : protocol_.steps) {
      auto n = static_cast<std::uint64_t>(std::llround(s.duration_s * record_.meta.sps));
      if (n == 0) throw DomainError("cue '" + s.label + "' is shorter than one frame");
      bounds_.push_back(acc);
      acc += n;
    }
    total_ = acc;
  }

  std::uint64_t total_frames() const { return total_; }
  bool done() const { return started_ && next_offset_ >= total_; }
  bool started() const { return started_; }
  const SessionProtocol& protocol() const { return protocol_; }

  // Returns the cue events triggered by this frame (in order).
  std::vector<CueEvent> feed(const acq::TimedFrame& f) {
    std::vector<CueEvent> cues;
    if (done() || protocol_.steps.empty()) return cues;
    if (!started_) {
      started_ = true;
      seq0_ = f.seq;
    }
    if (f.seq < seq0_ + next_offset_) return cues;  // duplicate or stale
    std::uint64_t off = f.seq - seq0_;
    if (off >= total_) {
      // Lost the tail of the session.
      note_gap(total_);
      next_offset_ = total_;
      advance_to(total_, cues);
      return cues;
    }
    note_gap(off);
    advance_to(off, cues);
    record_.append(t_of(off), f.uv);
    next_offset_ = off + 1;
    if (next_offset_ == total_) advance_to(total_, cues);
    return cues;
  }

  // Seals the record. An unfinished session keeps its partial last marker
  // and is flagged incomplete.
  SessionRecord finish() {
    if (!protocol_.steps.empty() && !done()) {
      record_.meta.complete = false;
      if (started_ && current_ < protocol_.steps.size()) {
        record_.markers.push_back({protocol_.steps[current_].label, t_of(bounds_[current_]), t_of(next_offset_)});
        current_ = protocol_.steps.size();
      }
    }
    return std::move(record_);
  }

 private:
  double t_of(std::uint64_t off) const { return static_cast<double>(off) / record_.meta.sps; }

  void note_gap(std::uint64_t off) {
    if (off <= next_offset_) return;
    record_.quality.push_back({t_of(next_offset_), t_of(off), off - next_offset_});
  }

  std::size_t step_at(std::uint64_t off) const {
    if (off >= total_) return protocol_.steps.size();
    std::size_t i = 0;
    while (i + 1 < bounds_.size() && off >= bounds_[i + 1]) ++i;
    return i;
  }

  // Closes finished steps and opens each following one up to the step
  // containing `off`; steps swallowed by a drop still get their marker.
  void advance_to(std::uint64_t off, std::vector<CueEvent>& cues) {
    const std::size_t n = protocol_.steps.size();
    const std::size_t want = step_at(off);
    while (!opened_ || current_ != want) {
      if (opened_) {
        std::uint64_t end = current_ + 1 < n ? bounds_[current_ + 1] : total_;
        record_.markers.push_back({protocol_.steps[current_].label, t_of(bounds_[current_]), t_of(end)});
        ++current_;
      } else {
        opened_ = true;
        current_ = 0;
      }
      CueEvent ev;
      ev.step = current_;
      ev.total_steps = n;
      if (current_ < n) {
        ev.label = protocol_.steps[current_].label;
        ev.duration_s = protocol_.steps[current_].duration_s;
        ev.frame = bounds_[current_];
      } else {
        ev.label = "done";
        ev.frame = total_;
      }
      ev.t_s = t_of(ev.frame);
      cues.push_back(std::move(ev));
    }
  }

  SessionProtocol protocol_;
  SessionRecord record_;
  std::vector<std::uint64_t> bounds_;
  std::uint64_t total_{0};
  bool started_{false};
  bool opened_{false};
  std::uint64_t seq0_{0};
  std::uint64_t next_offset_{0};
  std::size_t current_{0};
};

struct RunOptions {
  const std::atomic<bool>* cancel{nullptr};
  std::chrono::milliseconds read_timeout{2000};
};

// Drives a recorder from a stream reader until the protocol completes, the
// stream ends, or `cancel` is raised.
inline SessionRecord run_session(const SessionProtocol& protocol, acq::Reader& reader, RecordMetadata meta,
                                 const SessionSink& sink = {}, RunOptions opts = {}) {
  if (meta.start_time.empty()) meta.start_time = utc_now_iso();
  SessionRecorder rec(protocol, std::move(meta));
  if (protocol.steps.empty()) return rec.finish();
  while (!rec.done()) {
    if (opts.cancel && opts.cancel->load()) break;
    auto block = acq::read_block(reader, 25, opts.read_timeout);
    for (const auto& f : block.frames) {
      if (rec.done()) break;
      for (const auto& cue : rec.feed(f))
        if (sink.on_cue) sink.on_cue(cue);
      if (sink.on_frame) sink.on_frame(f);
    }
    if (block.terminal) break;
  }
  return rec.finish();
}

// Records every frame (up to `frame_limit`) into a marker-less record with
// t_s = seq / sps; gaps in seq become quality intervals.
inline SessionRecord capture(acq::Reader& reader, RecordMetadata meta, std::optional<std::uint64_t> frame_limit = {},
                             RunOptions opts = {}) {
  if (meta.start_time.empty()) meta.start_time = utc_now_iso();
  SessionRecord r;
  r.meta = std::move(meta);
  const double sps = r.meta.sps;
  std::optional<std::uint64_t> next;
  while (!frame_limit || r.frame_count() < *frame_limit) {
    if (opts.cancel && opts.cancel->load()) {
      r.meta.complete = false;
      break;
    }
    auto block = acq::read_block(reader, 250, opts.read_timeout);
    for (const auto& f : block.frames) {
      if (frame_limit && r.frame_count() >= *frame_limit) break;
      if (next && f.seq > *next)
        r.quality.push_back({static_cast<double>(*next) / sps, static_cast<double>(f.seq) / sps, f.seq - *next});
      r.append(static_cast<double>(f.seq) / sps, f.uv);
      next = f.seq + 1;
    }
    if (block.terminal) {
      if (frame_limit && r.frame_count() < *frame_limit) r.meta.complete = false;
      break;
    }
  }
  return r;
}

// Keeps the parts of `markers` inside the record span.
inline std::vector<Marker> clip_markers(const std::vector<Marker>& markers, const SessionRecord& r) {
  std::vector<Marker> out;
  if (r.t_s.empty()) return out;
  double a = r.t_s.front(), b = r.end_time();
  for (auto m : markers) {
    m.t_start_s = std::max(m.t_start_s, a);
    m.t_end_s = std::min(m.t_end_s, b);
    if (m.t_end_s > m.t_start_s) out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

enum class Unit { microvolts, millivolts, volts };

inline Unit parse_unit(const std::string& s) {
  if (s == "uV" || s == "uv" || s == "µV") return Unit::microvolts;
  if (s == "mV" || s == "mv") return Unit::millivolts;
  if (s == "V" || s == "v") return Unit::volts;
  throw DomainError("unknown unit '" + s + "' (uV, mV or V)");
}

inline double unit_scale(Unit u) {
  switch (u) {
    case Unit::microvolts: return 1.0;
    case Unit::millivolts: return 1e3;
    case Unit::volts: return 1e6;
  }
  return 1.0;
}

struct IngestSpec {
  int sps{250};
  char delimiter{','};
  std::vector<std::size_t> columns;  // 0-based source column per channel; empty = all non-time columns
  std::optional<std::size_t> time_column;
  Unit unit{Unit::microvolts};
  bool header{false};
};

struct IngestResult {
  SessionRecord record;
  std::size_t skipped_rows{0};
  std::vector<std::string> issues;  // one line per skipped row
};

inline IngestResult ingest_external(std::istream& in, const IngestSpec& spec, const std::string& source = "ingest") {
  if (spec.sps <= 0) throw IngestionError("sps must be positive");
  IngestResult res;
  auto& r = res.record;
  r.meta.sps = spec.sps;
  r.meta.source = source;
  r.meta.start_time = utc_now_iso();
  const double scale = unit_scale(spec.unit);
  std::vector<std::size_t> cols = spec.columns;
  std::optional<std::size_t> width;
  std::uint64_t row_index = 0, next = 0;
  std::string line;
  std::size_t ln = 0;
  bool header_pending = spec.header;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = record_detail::split_view(line, spec.delimiter);
    if (!width) {
      width = fields.size();
      if (cols.empty())
        for (std::size_t i = 0; i < *width; ++i)
          if (i != spec.time_column) cols.push_back(i);
      if (cols.empty() || cols.size() > protocol::kChannelCount)
        throw IngestionError("line " + std::to_string(ln) + ": " + std::to_string(cols.size()) +
                             " channel columns, expected 1-16");
      for (auto c : cols)
        if (c >= *width)
          throw IngestionError("line " + std::to_string(ln) + ": channel column " + std::to_string(c + 1) +
                               " beyond the " + std::to_string(*width) + " columns present");
    }
    if (fields.size() != *width)
      throw IngestionError("line " + std::to_string(ln) + ": " + std::to_string(fields.size()) + " columns, expected " +
                           std::to_string(*width));
    if (header_pending) {
      header_pending = false;
      continue;
    }
    ChannelValues v{};
    bool ok = true;
    for (std::size_t ch = 0; ch < cols.size() && ok; ++ch) {
      double x;
      if (!record_detail::parse_double(fields[cols[ch]], x) || !std::isfinite(x)) {
        res.issues.push_back("line " + std::to_string(ln) + ": column " + std::to_string(cols[ch] + 1) + " '" +
                             std::string(fields[cols[ch]]) + "' is not a number");
        ok = false;
      } else {
        v[ch] = x * scale;
      }
    }
    if (ok) {
      // A skipped row is a missing sample: keep the timeline and flag it.
      if (row_index > next)
        r.quality.push_back({static_cast<double>(next) / spec.sps, static_cast<double>(row_index) / spec.sps,
                             row_index - next});
      r.append(static_cast<double>(row_index) / spec.sps, v);
      next = row_index + 1;
    } else {
      ++res.skipped_rows;
    }
    ++row_index;
  }
  return res;
}

// Files in the native record format are read as-is; anything else goes
// through the table spec.
inline IngestResult ingest_external(const std::string& path, const IngestSpec& spec) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open " + path);
  std::string first;
  std::getline(in, first);
  if (first.rfind(std::string("# ") + kRecordMagic, 0) == 0) return {read_record(path), 0, {}};
  in.clear();
  in.seekg(0);
  return ingest_external(in, spec, "ingest:" + std::filesystem::path(path).filename().string());
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

enum class ReportKind { alpha, artifact };

inline ReportKind parse_report_kind(const std::string& s) {
  if (s == "alpha") return ReportKind::alpha;
  if (s == "artifact") return ReportKind::artifact;
  throw DomainError("unknown report '" + s + "' (alpha or artifact)");
}

struct AlphaRow {
  std::string label;
  double closed_power{0.0};
  double open_power{0.0};
  double ratio{0.0};
};

struct ArtifactRow {
  std::string label;
  std::vector<int> chew;
  std::vector<int> blink;
};

struct AnalysisReport {
  ReportKind kind{ReportKind::alpha};
  int sps{250};
  std::vector<AlphaRow> alpha;
  std::vector<ArtifactRow> artifact;
  std::vector<int> chew;  // most common per-channel result
  std::vector<int> blink;
  std::vector<double> t_s;
  std::vector<std::vector<double>> traces;  // per channel, filtered
};

inline AnalysisReport analyze_record(const SessionRecord& record, ReportKind kind,
                                     const dsp::BurstConfig& cfg = {}) {
  AnalysisReport rep;
  rep.kind = kind;
  rep.sps = record.meta.sps;
  rep.t_s = record.t_s;
  const std::size_t nch = protocol::kChannelCount;
  auto label = [&](std::size_t c) {
    return c < record.meta.montage.size() ? record.meta.montage[c] : channel_column(c);
  };
  auto spec = kind == ReportKind::alpha
                  ? dsp::FilterSpec::bandpass(dsp::bands::alpha_filter.lo_hz, dsp::bands::alpha_filter.hi_hz, rep.sps)
                  : dsp::FilterSpec::bandpass(dsp::bands::artifact_band.lo_hz, dsp::bands::artifact_band.hi_hz, rep.sps);
  auto sos = dsp::design_filter(spec);
  for (std::size_t c = 0; c < nch; ++c) rep.traces.push_back(dsp::filtfilt(sos, record.channel(c)));

  if (kind == ReportKind::alpha) {
    for (std::size_t c = 0; c < nch; ++c) {
      auto a = dsp::alpha_ratio(record, c);
      rep.alpha.push_back({label(c), a.closed_power, a.open_power, a.ratio});
    }
    return rep;
  }
  std::map<std::pair<std::vector<int>, std::vector<int>>, int> votes;
  for (std::size_t c = 0; c < nch; ++c) {
    auto counts = dsp::count_artifacts_by_kind(rep.traces[c], rep.sps, cfg, c);
    rep.artifact.push_back({label(c), counts.chew, counts.blink});
    ++votes[{counts.chew, counts.blink}];
  }
  int best = 0;
  for (const auto& row : rep.artifact) {  // channel order breaks ties
    int v = votes[{row.chew, row.blink}];
    if (v > best) {
      best = v;
      rep.chew = row.chew;
      rep.blink = row.blink;
    }
  }
  return rep;
}

inline std::string format_groups(const std::vector<int>& g, char sep = ',') {
  std::string s;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(g[i]);
  }
  return s;
}

// Human-readable summary for the terminal.
inline std::string format_summary(const AnalysisReport& rep) {
  std::ostringstream os;
  if (rep.kind == ReportKind::alpha) {
    os << "channel label  closed_uV2    open_uV2    ratio\n";
    for (std::size_t c = 0; c < rep.alpha.size(); ++c) {
      const auto& a = rep.alpha[c];
      char buf[128];
      std::snprintf(buf, sizeof buf, "%7zu %-5s %11.3f %11.3f %8.3f\n", c + 1, a.label.c_str(), a.closed_power,
                    a.open_power, a.ratio);
      os << buf;
    }
  } else {
    os << "chew [" << format_groups(rep.chew) << "]\n";
    os << "blink [" << format_groups(rep.blink) << "]\n";
  }
  return os.str();
}

inline std::string traces_path(const std::string& table_path) { return table_path + ".traces.csv"; }

// Plot-ready table at `path` plus the filtered traces next to it.
inline void write_report(const AnalysisReport& rep, const std::string& path) {
  using record_detail::fmt_double;
  std::ofstream out(path);
  if (!out) throw Error("io", "cannot write report " + path);
  if (rep.kind == ReportKind::alpha) {
    out << "# report=alpha\n";
    out << "channel,label,closed_power_uV2,open_power_uV2,ratio\n";
    for (std::size_t c = 0; c < rep.alpha.size(); ++c) {
      const auto& a = rep.alpha[c];
      out << c + 1 << ',' << a.label << ',' << fmt_double(a.closed_power) << ',' << fmt_double(a.open_power) << ','
          << fmt_double(a.ratio) << '\n';
    }
  } else {
    out << "# report=artifact\n";
    out << "# chew=" << format_groups(rep.chew, ';') << '\n';
    out << "# blink=" << format_groups(rep.blink, ';') << '\n';
    out << "channel,label,chew_groups,blink_groups\n";
    for (std::size_t c = 0; c < rep.artifact.size(); ++c) {
      const auto& a = rep.artifact[c];
      out << c + 1 << ',' << a.label << ',' << format_groups(a.chew, ';') << ',' << format_groups(a.blink, ';')
          << '\n';
    }
  }
  std::ofstream tr(traces_path(path));
  if (!tr) throw Error("io", "cannot write traces for " + path);
  tr << "t_s";
  for (std::size_t c = 0; c < rep.traces.size(); ++c) tr << ',' << channel_column(c);
  tr << '\n';
  std::string line;
  for (std::size_t i = 0; i < rep.t_s.size(); ++i) {
    line = fmt_double(rep.t_s[i]);
    for (const auto& t : rep.traces) {
      line += ',';
      line += fmt_double(t[i]);
    }
    line += '\n';
    tr << line;
  }
  if (!out || !tr) throw Error("io", "write failed for report " + path);
}

}  // namespace pieeg::session
