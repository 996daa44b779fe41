#pragma once

// SessionRecord and its on-disk form: a CSV sample table with `#` metadata
// lines plus a `<path>.markers.csv` sidecar.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pieeg/error.hpp"
#include "pieeg/marker.hpp"
#include "pieeg/protocol.hpp"

namespace pieeg {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kRecordMagic = "pieeg-record v1";

using ChannelValues = std::array<double, protocol::kChannelCount>;

inline const std::vector<std::string>& default_montage() {
  static const std::vector<std::string> m = {"Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3",
                                             "C3",  "Cz",  "C4", "T4", "P3", "Pz", "P4", "O1"};
  return m;
}

// Frames lost while recording, [t_start_s, t_end_s).
struct QualityInterval {
  double t_start_s{0.0};
  double t_end_s{0.0};
  std::uint64_t frames{0};
  bool operator==(const QualityInterval&) const = default;
};

struct RecordMetadata {
  int sps{250};
  int gain{24};
  double vref_volts{4.5};
  std::vector<std::string> montage{default_montage()};
  std::string source{"live"};
  std::string start_time;
  std::string software_version{kVersion};
  bool complete{true};
  std::map<std::string, std::string> extra;

  bool operator==(const RecordMetadata&) const = default;
};

struct SessionRecord {
  RecordMetadata meta;
  std::vector<double> t_s;
  std::vector<ChannelValues> uv;
  std::vector<Marker> markers;
  std::vector<QualityInterval> quality;

  std::size_t frame_count() const { return t_s.size(); }
  // A dropped tail still belongs to the span.
  double end_time() const {
    if (t_s.empty()) return 0.0;
    double end = t_s.back() + 1.0 / meta.sps;
    for (const auto& q : quality) end = std::max(end, q.t_end_s);
    return end;
  }
  std::vector<double> channel(std::size_t ch) const {  // 0-based
    std::vector<double> out;
    out.reserve(uv.size());
    for (const auto& row : uv) out.push_back(row.at(ch));
    return out;
  }
  // Index of the first frame with t >= t_s.
  std::size_t frame_at(double t) const {
    return static_cast<std::size_t>(std::lower_bound(t_s.begin(), t_s.end(), t) - t_s.begin());
  }
  bool flagged() const { return !meta.complete || !quality.empty(); }

  void append(double t, const ChannelValues& v) {
    t_s.push_back(t);
    uv.push_back(v);
  }

  void validate() const;
  bool operator==(const SessionRecord&) const = default;
};

inline std::string channel_column(std::size_t ch) {  // 0-based
  char buf[16];
  std::snprintf(buf, sizeof buf, "ch%02zu_uV", ch + 1);
  return buf;
}

namespace record_detail {

inline std::string fmt_double(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline bool parse_double(std::string_view s, double& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  return r.ec == std::errc{} && r.ptr == s.data() + s.size();
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

inline bool safe_text(std::string_view s) {
  return s.find_first_of(",\n\r") == std::string_view::npos;
}

// Frame steps are exact multiples of 1/sps within floating tolerance.
inline bool is_step(double dt, double step) { return std::abs(dt - step) <= 1e-9 * std::max(1.0, step); }

}  // namespace record_detail

inline void SessionRecord::validate() const {
  if (meta.sps <= 0) throw DomainError("record sps must be positive");
  if (meta.montage.size() != protocol::kChannelCount) throw DomainError("montage must list 16 labels");
  if (uv.size() != t_s.size()) throw DomainError("sample matrix and time column differ in length");
  for (const auto& label : meta.montage)
    if (label.empty() || !record_detail::safe_text(label) || label.find(';') != std::string::npos)
      throw DomainError("montage label '" + label + "' is empty or contains a separator");
  for (const auto* text : {&meta.source, &meta.start_time, &meta.software_version})
    if (text->find_first_of("\n\r") != std::string::npos) throw DomainError("metadata text contains a line break");
  if (!std::isfinite(meta.vref_volts)) throw DomainError("vref must be finite");
  for (std::size_t i = 0; i < uv.size(); ++i) {
    if (!std::isfinite(t_s[i])) throw DomainError("non-finite t_s at frame " + std::to_string(i));
    for (double v : uv[i])
      if (!std::isfinite(v)) throw DomainError("non-finite sample at frame " + std::to_string(i));
  }
  double step = 1.0 / meta.sps;
  for (std::size_t i = 1; i < t_s.size(); ++i) {
    double dt = t_s[i] - t_s[i - 1];
    if (!(dt > 0.0)) throw DomainError("t_s not strictly increasing at frame " + std::to_string(i));
    if (!record_detail::is_step(dt, step)) {
      bool covered = false;
      for (const auto& q : quality)
        if (q.t_start_s <= t_s[i - 1] + step + 1e-9 && q.t_end_s >= t_s[i] - 1e-9) covered = true;
      if (!covered) throw DomainError("t_s gap at frame " + std::to_string(i) + " not covered by a dropped interval");
    }
  }
  for (const auto& m : markers) {
    if (!record_detail::safe_text(m.label)) throw DomainError("marker label contains a separator");
    if (m.t_end_s < m.t_start_s) throw DomainError("marker '" + m.label + "' ends before it starts");
    if (!t_s.empty() && (m.t_start_s < t_s.front() - 1e-9 || m.t_end_s > end_time() + 1e-9))
      throw DomainError("marker '" + m.label + "' outside record span");
  }
}

inline std::string markers_path(const std::string& record_path) { return record_path + ".markers.csv"; }

inline void write_record(const SessionRecord& r, std::ostream& data, std::ostream& markers) {
  using record_detail::fmt_double;
  r.validate();
  for (const auto& [k, v] : r.meta.extra)
    if (!record_detail::safe_text(k + v) || k.find('=') != std::string::npos)
      throw DomainError("metadata entry '" + k + "' contains a separator");
  data << "# " << kRecordMagic << '\n';
  data << "# sps=" << r.meta.sps << '\n';
  data << "# gain=" << r.meta.gain << '\n';
  data << "# vref_volts=" << fmt_double(r.meta.vref_volts) << '\n';
  data << "# montage=" << record_detail::join(r.meta.montage, ';') << '\n';
  data << "# source=" << r.meta.source << '\n';
  data << "# start_time=" << r.meta.start_time << '\n';
  data << "# software_version=" << r.meta.software_version << '\n';
  data << "# complete=" << (r.meta.complete ? "true" : "false") << '\n';
  std::string dropped;
  for (const auto& q : r.quality) {
    if (!dropped.empty()) dropped += ';';
    dropped += fmt_double(q.t_start_s) + ':' + fmt_double(q.t_end_s) + ':' + std::to_string(q.frames);
  }
  data << "# dropped=" << dropped << '\n';
  for (const auto& [k, v] : r.meta.extra) data << "# x." << k << '=' << v << '\n';
  data << "t_s";
  for (std::size_t c = 0; c < protocol::kChannelCount; ++c) data << ',' << channel_column(c);
  data << '\n';
  std::string line;
  for (std::size_t i = 0; i < r.t_s.size(); ++i) {
    line = fmt_double(r.t_s[i]);
    for (double v : r.uv[i]) {
      line += ',';
      line += fmt_double(v);
    }
    line += '\n';
    data << line;
  }
  markers << "label,t_start_s,t_end_s\n";
  for (const auto& m : r.markers)
    markers << m.label << ',' << fmt_double(m.t_start_s) << ',' << fmt_double(m.t_end_s) << '\n';
}

inline void write_record(const SessionRecord& r, const std::string& path) {
  r.validate();  // before truncating anything
  std::ofstream data(path), markers(markers_path(path));
  if (!data || !markers) throw Error("io", "cannot write record " + path);
  write_record(r, data, markers);
  if (!data || !markers) throw Error("io", "write failed for record " + path);
}

inline std::vector<Marker> read_markers(std::istream& in) {
  std::vector<Marker> out;
  std::string line;
  std::size_t ln = 0;
  while (std::getline(in, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cols = record_detail::split_view(line, ',');
    if (ln == 1) {
      static const char* want[] = {"label", "t_start_s", "t_end_s"};
      for (std::size_t i = 0; i < 3; ++i)
        if (i >= cols.size() || cols[i] != want[i]) throw ParseError(ln, want[i], "missing marker header column");
      continue;
    }
    if (cols.size() != 3) throw ParseError(ln, "", "marker row needs 3 fields");
    Marker m;
    m.label = std::string(cols[0]);
    if (!record_detail::parse_double(cols[1], m.t_start_s)) throw ParseError(ln, "t_start_s", "not a number");
    if (!record_detail::parse_double(cols[2], m.t_end_s)) throw ParseError(ln, "t_end_s", "not a number");
    if (m.t_end_s < m.t_start_s) throw ParseError(ln, "t_end_s", "marker ends before it starts");
    out.push_back(std::move(m));
  }
  return out;
}

inline SessionRecord read_record(std::istream& data, std::istream* markers) {
  using record_detail::parse_double;
  SessionRecord r;
  r.meta.montage.clear();
  std::string line;
  std::size_t ln = 0;
  bool header_seen = false;
  bool have_montage = false;
  double step = 0.0;
  while (std::getline(data, line)) {
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!header_seen && line[0] == '#') {
      std::string body = line.substr(1);
      if (!body.empty() && body[0] == ' ') body.erase(0, 1);
      if (body == kRecordMagic) continue;
      auto eq = body.find('=');
      if (eq == std::string::npos) throw ParseError(ln, "", "metadata line needs key=value");
      std::string key = body.substr(0, eq), val = body.substr(eq + 1);
      auto to_int = [&](int& out) {
        double d;
        if (!parse_double(val, d) || d != std::floor(d)) throw ParseError(ln, key, "not an integer");
        out = static_cast<int>(d);
      };
      if (key == "sps") to_int(r.meta.sps);
      else if (key == "gain") to_int(r.meta.gain);
      else if (key == "vref_volts") {
        if (!parse_double(val, r.meta.vref_volts)) throw ParseError(ln, key, "not a number");
      } else if (key == "montage") {
        for (auto v : record_detail::split_view(val, ';')) r.meta.montage.emplace_back(v);
        have_montage = true;
      } else if (key == "source") r.meta.source = val;
      else if (key == "start_time") r.meta.start_time = val;
      else if (key == "software_version") r.meta.software_version = val;
      else if (key == "complete") {
        if (val != "true" && val != "false") throw ParseError(ln, key, "expected true or false");
        r.meta.complete = val == "true";
      } else if (key == "dropped") {
        if (val.empty()) continue;
        for (auto item : record_detail::split_view(val, ';')) {
          auto parts = record_detail::split_view(item, ':');
          QualityInterval q;
          double frames = 0;
          if (parts.size() != 3 || !parse_double(parts[0], q.t_start_s) ||
              !parse_double(parts[1], q.t_end_s) || !parse_double(parts[2], frames))
            throw ParseError(ln, key, "expected t_start:t_end:frames");
          q.frames = static_cast<std::uint64_t>(frames);
          r.quality.push_back(q);
        }
      } else if (key.rfind("x.", 0) == 0) {
        r.meta.extra[key.substr(2)] = val;
      } else {
        throw ParseError(ln, key, "unknown metadata key");
      }
      continue;
    }
    auto cols = record_detail::split_view(line, ',');
    if (!header_seen) {
      if (cols.empty() || cols[0] != "t_s") throw ParseError(ln, "t_s", "missing header column");
      for (std::size_t c = 0; c < protocol::kChannelCount; ++c)
        if (c + 1 >= cols.size() || cols[c + 1] != channel_column(c))
          throw ParseError(ln, channel_column(c), "missing header column");
      if (cols.size() != protocol::kChannelCount + 1) throw ParseError(ln, "", "unexpected extra header columns");
      header_seen = true;
      if (r.meta.sps <= 0) throw ParseError(ln, "sps", "sps must be positive");
      step = 1.0 / r.meta.sps;
      continue;
    }
    if (cols.size() != protocol::kChannelCount + 1)
      throw ParseError(ln, "", "expected 17 fields, got " + std::to_string(cols.size()));
    double t;
    if (!parse_double(cols[0], t)) throw ParseError(ln, "t_s", "not a number");
    if (!r.t_s.empty()) {
      double dt = t - r.t_s.back();
      if (!(dt > 0.0)) throw ParseError(ln, "t_s", "t_s not strictly increasing");
      if (!record_detail::is_step(dt, step)) {
        bool covered = false;
        for (const auto& q : r.quality)
          if (q.t_start_s <= r.t_s.back() + step + 1e-9 && q.t_end_s >= t - 1e-9) covered = true;
        if (!covered) throw ParseError(ln, "t_s", "t_s step differs from 1/sps outside a dropped interval");
      }
    }
    ChannelValues v{};
    for (std::size_t c = 0; c < protocol::kChannelCount; ++c)
      if (!parse_double(cols[c + 1], v[c])) throw ParseError(ln, channel_column(c), "not a number");
    r.append(t, v);
  }
  if (!header_seen) throw ParseError(ln, "t_s", "missing header row");
  if (!have_montage) r.meta.montage = default_montage();
  if (r.meta.montage.size() != protocol::kChannelCount) throw ParseError(0, "montage", "montage must list 16 labels");
  if (markers) r.markers = read_markers(*markers);
  return r;
}

inline SessionRecord read_record(const std::string& path) {
  std::ifstream data(path);
  if (!data) throw ParseError(0, "", "cannot open record " + path);
  std::ifstream markers(markers_path(path));
  auto r = read_record(data, markers ? &markers : nullptr);
  try {
    r.validate();
  } catch (const DomainError& e) {
    throw ParseError(0, "", e.what());
  }
  return r;
}

}  // namespace pieeg
