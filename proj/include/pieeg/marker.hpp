#pragma once

#include <string>

namespace pieeg {

// Labeled half-open time interval [t_start_s, t_end_s).
struct Marker {
  std::string label;
  double t_start_s{0.0};
  double t_end_s{0.0};

  bool contains(double t) const { return t >= t_start_s && t < t_end_s; }
  double duration() const { return t_end_s - t_start_s; }
  bool operator==(const Marker&) const = default;
};

}  // namespace pieeg
