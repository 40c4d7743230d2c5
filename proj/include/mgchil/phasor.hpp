#pragma once

#include <complex>
#include <cstdint>

namespace mgchil {

inline constexpr double kNominalFrequency = 60.0;

// One PMU reading. Phasors are rectangular (volts, amps), power is three-phase.
struct PhasorSample {
  std::complex<double> voltage;
  std::complex<double> current;
  double frequency = kNominalFrequency;  // Hz
  double rocof = 0.0;                    // Hz/s
  double p_kw = 0.0;
  double q_kvar = 0.0;
  std::uint16_t stat = 0;

  bool operator==(const PhasorSample&) const = default;
};

// Wall-clock stamp carried by every synchrophasor frame.
struct FrameTime {
  std::uint32_t soc = 0;       // epoch seconds
  std::uint32_t fracsec = 0;   // microseconds within the second
  bool operator==(const FrameTime&) const = default;
};

inline FrameTime frame_time_from_seconds(double t) {
  const double whole = static_cast<double>(static_cast<std::uint64_t>(t));
  auto us = static_cast<std::uint32_t>((t - whole) * 1e6 + 0.5);
  auto s = static_cast<std::uint32_t>(whole);
  if (us >= 1000000) {
    us -= 1000000;
    ++s;
  }
  return {s, us};
}

inline double frame_time_seconds(FrameTime ft) { return ft.soc + ft.fracsec * 1e-6; }

// Seconds since epoch, exact to the microsecond for any realistic run length.
inline double frame_time_since(FrameTime ft, std::uint32_t epoch) {
  return static_cast<double>(static_cast<std::int64_t>(ft.soc) - epoch) + ft.fracsec * 1e-6;
}

}  // namespace mgchil
