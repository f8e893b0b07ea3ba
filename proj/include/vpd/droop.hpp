#pragma once
// Outer voltage/active-power droop law, active-power measurement filtering,
// reference generation, and the full-droop (P-V / Q-f) baseline.

#include <cmath>
#include <stdexcept>

namespace vpd {

struct DroopParams {
  double droop_coefficient = 2e-4;          // n_k, volts per watt
  double active_power_reference = 250.0;    // P*_k, watts
  double nominal_voltage = 120.0 * M_SQRT2; // E*, volts amplitude
  double power_filter_bandwidth = 2.0 * M_PI; // omega_P, rad/s

  void validate(double voltage_loop_bandwidth_rad = 0.0) const {
    if (!(droop_coefficient > 0.0)) throw std::domain_error("DroopParams: droop_coefficient must be > 0");
    if (!(power_filter_bandwidth > 0.0))
      throw std::domain_error("DroopParams: power_filter_bandwidth must be > 0");
    if (voltage_loop_bandwidth_rad > 0.0 &&
        !(power_filter_bandwidth < voltage_loop_bandwidth_rad / 50.0))
      throw std::domain_error("DroopParams: power filter must be at least 50x below the voltage loop");
  }
};

struct DroopState {
  double filtered_active_power = 0.0;  // P_k, watts
  double commanded_magnitude = 0.0;    // E_k, volts amplitude
};

struct FullDroopParams : DroopParams {
  double q_droop_coefficient = 0.0;       // m_k, (rad/s) per var
  double reactive_power_reference = 0.0;  // Q*_k, vars
  double nominal_frequency = 2.0 * M_PI * 60.0;  // omega*, rad/s

  void validate_full() const {
    validate();
    if (!(q_droop_coefficient > 0.0))
      throw std::domain_error("FullDroopParams: q_droop_coefficient must be > 0");
  }
};

// First-order LPF update with the exact exponential hold over dt:
//   P <- p + (P - p) * exp(-omega_P * dt).
// A constant input is a fixed point and the steady-state value equals the input.
inline void power_filter_step(DroopState& state, double instantaneous_power, double dt,
                              const DroopParams& params) {
  if (!(dt > 0.0)) throw std::domain_error("power_filter_step: dt must be > 0");
  if (!(dt * params.power_filter_bandwidth < 0.1))
    throw std::domain_error("power_filter_step: dt*omega_P must stay below 0.1");
  double decay = std::exp(-params.power_filter_bandwidth * dt);
  state.filtered_active_power =
      instantaneous_power + (state.filtered_active_power - instantaneous_power) * decay;
}

// E_k = E* - n_k (P_k - P*_k), clamped to [0.5 E*, 1.5 E*].
inline double vpd_voltage(const DroopState& state, const DroopParams& params) {
  double e = params.nominal_voltage -
             params.droop_coefficient * (state.filtered_active_power - params.active_power_reference);
  double lo = 0.5 * params.nominal_voltage;
  double hi = 1.5 * params.nominal_voltage;
  return std::min(hi, std::max(lo, e));
}

// v_ref = E_k * sin(clock_phase).
inline double reference_voltage(const DroopState& state, double clock_phase) {
  return state.commanded_magnitude * std::sin(clock_phase);
}

inline double wrap_phase(double phase) {
  double two_pi = 2.0 * M_PI;
  double w = std::fmod(phase, two_pi);
  if (w < 0.0) w += two_pi;
  return w;
}

struct FullDroopUpdate {
  double commanded_magnitude;  // E_k
  double accumulated_phase;    // rad, wrapped to [0, 2*pi)
  double angular_frequency;    // omega_k, rad/s
};

// Full-droop baseline: magnitude per the VP-D law, frequency
// omega_k = omega* + m_k (Q*_k - Q_k), phase integrating omega_k.
inline FullDroopUpdate full_droop_update(double current_phase, double filtered_P, double filtered_Q,
                                         double dt, const FullDroopParams& params) {
  if (!(dt > 0.0)) throw std::domain_error("full_droop_update: dt must be > 0");
  DroopState s{filtered_P, 0.0};
  double e = vpd_voltage(s, params);
  double omega = params.nominal_frequency +
                 params.q_droop_coefficient * (params.reactive_power_reference - filtered_Q);
  double phase = wrap_phase(current_phase + omega * dt);
  return {e, phase, omega};
}

}  // namespace vpd
