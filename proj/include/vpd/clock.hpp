#pragma once
// Isochronous common-clock model: ideal shared phase, per-inverter
// offset/drift, signal-loss holdover, and continuous restoration.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "vpd/droop.hpp"  // wrap_phase

namespace vpd {

struct ClockModel {
  double phase_offset = 0.0;  // theta_k, rad
  double drift_rate = 0.0;    // parts-per-unit frequency error during holdover
  bool holdover = false;
  double holdover_start = 0.0;  // s

  // Restoration slew bookkeeping: after a restore event the residual offset is
  // taken to zero linearly over one fundamental cycle instead of jumping.
  double slew_start = -1.0;          // s; negative means no slew in progress
  double slew_initial_offset = 0.0;  // rad
  double slew_duration = 1.0 / 60.0; // s, one fundamental cycle

  void validate() const {
    if (!(std::abs(phase_offset) < M_PI)) throw std::domain_error("ClockModel: |phase_offset| must be < pi");
    if (!(drift_rate >= 0.0)) throw std::domain_error("ClockModel: drift_rate must be >= 0");
    if (!(slew_duration > 0.0)) throw std::domain_error("ClockModel: slew_duration must be > 0");
  }
};

struct ClockEvent {
  double time = 0.0;      // s
  int inverter_index = 0; // < N
  enum class Kind { loss, restore, set_offset } kind = Kind::loss;
  double offset_payload = 0.0;  // rad, used by set_offset
};

// Effective constant offset (excluding drift accumulation) at time t.
inline double clock_effective_offset(const ClockModel& clock, double t) {
  double offset = clock.phase_offset;
  if (clock.slew_start >= 0.0 && t >= clock.slew_start) {
    double progress = (t - clock.slew_start) / clock.slew_duration;
    if (progress < 1.0) offset += clock.slew_initial_offset * (1.0 - progress);
  } else if (clock.slew_start >= 0.0 && t < clock.slew_start) {
    offset += clock.slew_initial_offset;
  }
  return offset;
}

// Reference phase produced by the k-th clock at time t, wrapped to [0, 2*pi).
// Synchronized: omega0*t + theta_k.  Holdover: the local oscillator runs at
// omega0*(1+drift) from the phase held at holdover start.
inline double phase_at(const ClockModel& clock, double t, double omega0) {
  if (!(t >= 0.0)) throw std::domain_error("phase_at: t must be >= 0");
  double phase = omega0 * t + clock_effective_offset(clock, t);
  if (clock.holdover && t >= clock.holdover_start)
    phase += omega0 * clock.drift_rate * (t - clock.holdover_start);
  return wrap_phase(phase);
}

struct ClockEventWarning {
  bool raised = false;
  std::string message;
};

// Apply one event to the clock list; phase stays continuous across every event.
inline ClockEventWarning apply_event(std::vector<ClockModel>& clocks, const ClockEvent& event,
                                     double omega0) {
  if (event.inverter_index < 0 || event.inverter_index >= static_cast<int>(clocks.size()))
    throw std::domain_error("apply_event: inverter index out of range");
  ClockModel& c = clocks[static_cast<std::size_t>(event.inverter_index)];
  switch (event.kind) {
    case ClockEvent::Kind::loss:
      if (!c.holdover) {
        // Fold any in-progress slew into the offset so the phase is continuous.
        c.phase_offset = clock_effective_offset(c, event.time);
        c.slew_start = -1.0;
        c.slew_initial_offset = 0.0;
        c.holdover = true;
        c.holdover_start = event.time;
      }
      return {};
    case ClockEvent::Kind::restore: {
      if (!c.holdover) return {true, "restore without prior loss: no-op"};
      double accumulated = omega0 * c.drift_rate * (event.time - c.holdover_start);
      double residual = wrap_phase(c.phase_offset + accumulated + M_PI) - M_PI;  // to (-pi, pi]
      c.holdover = false;
      c.phase_offset = 0.0;  // re-synchronized with the common clock
      c.slew_start = event.time;
      c.slew_initial_offset = residual;
      c.slew_duration = 2.0 * M_PI / omega0;  // one fundamental cycle
      return {};
    }
    case ClockEvent::Kind::set_offset:
      c.phase_offset = event.offset_payload;
      return {};
  }
  return {};
}

}  // namespace vpd
