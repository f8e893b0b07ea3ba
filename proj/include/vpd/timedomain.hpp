#pragma once
// Fixed-step time-domain simulation of the N-inverter closed loop.
//
// Continuous electrical states (filter inductor currents, capacitor voltages,
// inductive branch currents, and the series-RL load current) are integrated
// with classical RK4; the multi-loop controllers run as discrete realizations
// updated once per step with their outputs zero-order held; the droop
// magnitude law and the demodulation-based power measurements update once per
// step with exact exponential holds. The PCC node is eliminated algebraically
// so the model stays an ODE (index-1 avoidance).

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vpd/clock.hpp"
#include "vpd/controller.hpp"
#include "vpd/droop.hpp"
#include "vpd/net_model.hpp"
#include "vpd/steady_state.hpp"

namespace vpd {

// ---------------------------------------------------------------------------
// Load conversion
// ---------------------------------------------------------------------------

// Map a load description onto time-domain elements. Complex loads specified
// at the nominal frequency become series R-L (inductive) or resistive
// (real); capacitive loads have no time-domain element here.
inline LoadModel time_domain_load(const LoadModel& load, double omega0) {
  switch (load.kind) {
    case LoadModel::Kind::resistive:
    case LoadModel::Kind::series_rl:
      return load;
    case LoadModel::Kind::complex_at_omega0: {
      cplx z = load.impedance;
      if (z.imag() < -1e-12)
        throw std::domain_error(
            "time_domain_load: capacitive loads are not supported in the time domain");
      if (z.imag() <= 1e-12) return LoadModel::resistive_load(z.real());
      return LoadModel::series_rl_load(z.real(), z.imag() / omega0, omega0);
    }
  }
  throw std::domain_error("time_domain_load: unknown load kind");
}

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

struct InverterRuntime {
  // continuous electrical states
  double inductor_current = 0.0;   // i_Lk, through the filter inductor
  double capacitor_voltage = 0.0;  // across the filter capacitor proper (the
                                   // output node adds the damper drop)
  double branch_current = 0.0;     // i_k; a state when branch_inductance > 0,
                                   // otherwise derived algebraically

  // zero-order-held controller output (inverter bridge voltage)
  double applied_voltage = 0.0;

  // discrete controller states
  Eigen::VectorXd voltage_ctrl_state;
  Eigen::VectorXd current_ctrl_state;

  // droop state (filtered active power + commanded magnitude)
  DroopState droop;

  // self-generated phase for the frequency-droop baseline
  double accumulated_phase = 0.0;
  double angular_frequency = 0.0;

  // demodulated measurement filters (local-clock in-phase/quadrature parts
  // of v_k and i_k; drive the trace Q column and the baseline's Q input)
  double v_inphase = 0.0, v_quadrature = 0.0;
  double i_inphase = 0.0, i_quadrature = 0.0;

  bool regulating = false;  // controller active, capacitor regulated
  bool connected = false;   // breaker closed, branch carries current
  double regulate_start = 0.0;  // for the one-cycle soft-start ramp
};

struct SimulationState {
  double time = 0.0;
  std::vector<InverterRuntime> inverters;
  double load_current = 0.0;  // series-RL load only
  double pcc_voltage = 0.0;   // algebraic byproduct, refreshed on evaluation
};

struct StateDerivative {
  struct PerInverter {
    double d_inductor_current = 0.0;
    double d_capacitor_voltage = 0.0;
    double d_branch_current = 0.0;
    double branch_current = 0.0;  // algebraic value (resistive branches)
  };
  std::vector<PerInverter> inverters;
  double d_load_current = 0.0;
  double pcc_voltage = 0.0;
};

class SimulationDivergedError : public std::runtime_error {
 public:
  SimulationDivergedError(const std::string& what, double last_good_time)
      : std::runtime_error(what), last_good_time(last_good_time) {}
  double last_good_time;
};

// ---------------------------------------------------------------------------
// Continuous dynamics with algebraic PCC elimination
// ---------------------------------------------------------------------------

// Output node voltage of inverter k: the filter capacitor (in series with its
// damping resistance) hangs off the node that joins the filter inductor and
// the output branch, so v_k = vC + R_c (iL - i_k).
inline double node_voltage_now(const InverterRuntime& inv, const InverterElectrical& el,
                               double branch_current) {
  return inv.capacitor_voltage +
         el.filter_damping_resistance * (inv.inductor_current - branch_current);
}

// Instantaneous PCC voltage for the given state. Resistive branches and a
// resistive load form a pure algebraic node; inductive branches contribute
// their state currents; an RL load contributes its state current, and when
// no resistive branch is connected the node is recovered by eliminating the
// branch/load current derivatives. A resistive branch behind the capacitor
// damper acts as source vC + R_c iL behind resistance r_k + R_c.
inline double solve_pcc_voltage(const SimulationState& state, const MicrogridConfig& config) {
  const LoadModel& load = config.load;
  double num = 0.0;
  double den = 0.0;
  bool any_resistive_branch = false;
  for (std::size_t k = 0; k < state.inverters.size(); ++k) {
    const InverterRuntime& inv = state.inverters[k];
    if (!inv.connected) continue;
    const InverterElectrical& el = config.inverters[k];
    if (el.branch_inductance > 0.0) {
      num += inv.branch_current;
    } else {
      any_resistive_branch = true;
      double r_eff = el.branch_resistance + el.filter_damping_resistance;
      num += (inv.capacitor_voltage + el.filter_damping_resistance * inv.inductor_current) /
             r_eff;
      den += 1.0 / r_eff;
    }
  }
  if (load.kind == LoadModel::Kind::resistive) {
    den += 1.0 / load.resistance;
    return num / den;  // den > 0 always; all-disconnected gives 0
  }
  // series-RL load
  if (any_resistive_branch) {
    if (den <= 0.0) return 0.0;
    return (num - state.load_current) / den;
  }
  // all connected branches are inductive (or none connected): eliminate the
  // current derivatives through the load equation
  bool any_connected = false;
  double a = 0.0, b = 0.0;  // sum over connected: 1/L_k and (v_k - r_k i_k)/L_k
  for (std::size_t k = 0; k < state.inverters.size(); ++k) {
    const InverterRuntime& inv = state.inverters[k];
    if (!inv.connected) continue;
    any_connected = true;
    const InverterElectrical& el = config.inverters[k];
    a += 1.0 / el.branch_inductance;
    double v_k = node_voltage_now(inv, el, inv.branch_current);
    b += (v_k - el.branch_resistance * inv.branch_current) / el.branch_inductance;
  }
  if (!any_connected) return 0.0;  // load current decays through its own R
  double l_load = load.inductance;
  return (load.resistance * state.load_current + l_load * b) / (1.0 + l_load * a);
}

inline StateDerivative derivatives(const SimulationState& state, const MicrogridConfig& config) {
  StateDerivative d;
  d.inverters.resize(state.inverters.size());
  double v_pcc = solve_pcc_voltage(state, config);
  d.pcc_voltage = v_pcc;

  for (std::size_t k = 0; k < state.inverters.size(); ++k) {
    const InverterRuntime& inv = state.inverters[k];
    const InverterElectrical& el = config.inverters[k];
    auto& out = d.inverters[k];
    if (!inv.regulating && !inv.connected) continue;  // dormant: all zero

    // branch current: state (inductive) or algebraic (resistive)
    double i_k = 0.0;
    if (inv.connected) {
      if (el.branch_inductance > 0.0) {
        i_k = inv.branch_current;
      } else {
        i_k = (inv.capacitor_voltage + el.filter_damping_resistance * inv.inductor_current -
               v_pcc) /
              (el.branch_resistance + el.filter_damping_resistance);
      }
    }
    out.branch_current = i_k;
    double v_node = node_voltage_now(inv, el, i_k);
    if (inv.connected && el.branch_inductance > 0.0) {
      out.d_branch_current =
          (v_node - el.branch_resistance * i_k - v_pcc) / el.branch_inductance;
    }

    // LC filter
    out.d_inductor_current =
        (inv.applied_voltage - el.filter_esr * inv.inductor_current - v_node) /
        el.filter_inductance;
    out.d_capacitor_voltage = (inv.inductor_current - i_k) / el.filter_capacitance;
  }

  if (config.load.kind == LoadModel::Kind::series_rl) {
    bool any_connected = false;
    for (const auto& inv : state.inverters) any_connected |= inv.connected;
    if (any_connected) {
      d.d_load_current =
          (v_pcc - config.load.resistance * state.load_current) / config.load.inductance;
    } else {
      d.d_load_current = -config.load.resistance / config.load.inductance * state.load_current;
    }
  }
  return d;
}

// Instantaneous branch current of inverter k (state or algebraic).
inline double branch_current_now(const SimulationState& state, const MicrogridConfig& config,
                                 std::size_t k, double v_pcc) {
  const InverterRuntime& inv = state.inverters[k];
  if (!inv.connected) return 0.0;
  const InverterElectrical& el = config.inverters[k];
  if (el.branch_inductance > 0.0) return inv.branch_current;
  return (inv.capacitor_voltage + el.filter_damping_resistance * inv.inductor_current -
          v_pcc) /
         (el.branch_resistance + el.filter_damping_resistance);
}

// ---------------------------------------------------------------------------
// Scenario description
// ---------------------------------------------------------------------------

struct SimulationEvent {
  enum class Kind {
    connect_regulate,     // power up the inverter: controller starts from zero
                          // states, reference soft-ramped over one cycle
    connect_close,        // close the breaker (implies regulation if dormant)
    disconnect,           // open the breaker; the unit keeps regulating
    load_step,            // replace the load model
    set_power_reference,  // change one unit's active-power reference
    clock                 // apply a ClockEvent to one unit's clock
  };
  double time = 0.0;
  Kind kind = Kind::load_step;
  std::size_t inverter_index = 0;
  LoadModel new_load;
  double new_power_reference = 0.0;
  ClockEvent clock_event;
};

enum class Architecture { vpd, full_droop };

struct Scenario {
  MicrogridConfig config;
  double duration = 1.0;
  double time_step = 1e-5;
  std::size_t decimation = 1;  // store every Nth step
  std::vector<SimulationEvent> events;  // sorted by time
  Architecture architecture = Architecture::vpd;
  std::vector<FullDroopParams> full_droop;  // per inverter when architecture=full_droop
  double controller_gain_scale = 0.02;
  bool open_loop = false;  // drive fixed sinusoidal sources, no control
  // Open-loop source amplitude as a fraction of the nominal magnitude; zero
  // gives a free (unforced) plant response.
  double open_loop_drive_scale = 1.0;
  std::vector<std::size_t> initially_dormant;  // units starting unpowered

  void validate() const {
    config.validate();
    if (!(open_loop_drive_scale >= 0.0))
      throw std::domain_error("Scenario: open_loop_drive_scale must be >= 0");
    if (!(time_step > 0.0)) throw std::domain_error("Scenario: time_step must be > 0");
    if (!(duration > 0.0)) throw std::domain_error("Scenario: duration must be > 0");
    if (!(decimation >= 1)) throw std::domain_error("Scenario: decimation must be >= 1");
    double last = 0.0;
    for (const auto& ev : events) {
      if (ev.time < last) throw std::domain_error("Scenario: events must be sorted by time");
      if (ev.time > duration) throw std::domain_error("Scenario: event after duration");
      last = ev.time;
      if (ev.kind != SimulationEvent::Kind::load_step &&
          ev.inverter_index >= config.size())
        throw std::out_of_range("Scenario: event inverter index out of range");
    }
    if (architecture == Architecture::full_droop) {
      if (full_droop.size() != config.size())
        throw std::domain_error(
            "Scenario: full_droop params must be given per inverter for the baseline");
      for (const auto& p : full_droop) p.validate_full();
    }
    for (std::size_t idx : initially_dormant)
      if (idx >= config.size())
        throw std::out_of_range("Scenario: dormant inverter index out of range");
  }
};

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

struct SimulationTrace {
  double sample_time = 1e-5;          // time between stored samples
  double nominal_frequency = 2.0 * M_PI * 60.0;  // rad/s
  double nominal_voltage = 120.0 * M_SQRT2;
  std::vector<double> rated_apparent_power;  // per inverter
  std::size_t inverter_count = 0;

  std::vector<double> time;
  std::vector<double> pcc_voltage;
  // per-inverter columns, indexed [k][sample]
  std::vector<std::vector<double>> output_voltage;
  std::vector<std::vector<double>> branch_current;
  std::vector<std::vector<double>> inductor_current;
  std::vector<std::vector<double>> commanded_magnitude;
  std::vector<std::vector<double>> active_power;    // droop-filtered P_k
  std::vector<std::vector<double>> reactive_power;  // demodulated Q_k
  // pairwise circulating currents 0.5 (i_j - i_k), j < k
  std::vector<std::pair<std::size_t, std::size_t>> circulating_pairs;
  std::vector<std::vector<double>> circulating_current;

  std::vector<double> event_times;
  std::size_t samples() const { return time.size(); }
};

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

class Simulator {
 public:
  explicit Simulator(Scenario scenario) : scenario_(std::move(scenario)) {
    scenario_.validate();
    config_ = scenario_.config;
    config_.load = time_domain_load(config_.load, config_.nominal_frequency);
    full_droop_ = scenario_.full_droop;
    controllers_ = default_controllers(scenario_.controller_gain_scale);
    if (!scenario_.open_loop) {
      voltage_proto_ = make_voltage_controller_realization(
          controllers_.voltage_controller, scenario_.time_step, config_.nominal_frequency);
      current_proto_ = discretize(controllers_.current_controller, scenario_.time_step,
                                  config_.nominal_frequency);
      for (std::size_t k = 0; k < config_.size(); ++k) {
        double bw_rad = 2.0 * M_PI * 600.0;  // order-of-magnitude check only
        config_.droop[k].validate(bw_rad);
      }
    }
    reset();
  }

  const Scenario& scenario() const { return scenario_; }
  const MicrogridConfig& config() const { return config_; }
  const ControllerSet& controllers() const { return controllers_; }
  const DiscreteRealization& voltage_realization() const { return voltage_proto_; }
  const DiscreteRealization& current_realization() const { return current_proto_; }
  const SimulationState& state() const { return state_; }
  SimulationState& mutable_state() { return state_; }

  void reset() {
    state_ = SimulationState{};
    state_.inverters.resize(config_.size());
    for (std::size_t k = 0; k < config_.size(); ++k) {
      InverterRuntime& inv = state_.inverters[k];
      if (!scenario_.open_loop) {
        inv.voltage_ctrl_state = zero_state(voltage_proto_);
        inv.current_ctrl_state = zero_state(current_proto_);
      }
      inv.droop.filtered_active_power = 0.0;
      inv.droop.commanded_magnitude = vpd_voltage(inv.droop, config_.droop[k]);
      inv.regulating = true;
      inv.connected = true;
      inv.regulate_start = 0.0;
      inv.accumulated_phase = initial_phase(k);
      inv.angular_frequency = config_.nominal_frequency;
    }
    for (std::size_t idx : scenario_.initially_dormant) {
      state_.inverters[idx].regulating = false;
      state_.inverters[idx].connected = false;
    }
    state_.pcc_voltage = solve_pcc_voltage(state_, config_);
    step_index_ = 0;
    next_event_ = 0;
  }

  // Advance one time step: hold controller outputs, integrate the continuous
  // states with RK4, then update the discrete droop and measurement filters.
  void step() {
    double dt = scenario_.time_step;
    double t = state_.time;

    if (!scenario_.open_loop) {
      update_controllers(t);
    } else {
      for (std::size_t k = 0; k < config_.size(); ++k) {
        InverterRuntime& inv = state_.inverters[k];
        if (!inv.regulating && !inv.connected) continue;
        inv.applied_voltage = scenario_.open_loop_drive_scale *
                              config_.nominal_voltage_magnitude * std::sin(phase_of(k, t));
      }
    }

    rk4_step(dt);
    state_.time = t + dt;
    ++step_index_;

    if (!all_finite())
      throw SimulationDivergedError(
          "simulation diverged (non-finite state) at t = " + std::to_string(state_.time),
          t);

    update_discrete_filters(dt);
  }

  // Execute the scenario and collect the decimated trace.
  SimulationTrace run() {
    reset();
    SimulationTrace trace;
    init_trace(trace);
    auto n_steps = static_cast<long long>(std::llround(scenario_.duration / scenario_.time_step));
    for (long long i = 0; i <= n_steps; ++i) {
      apply_due_events(trace);
      if (i % static_cast<long long>(scenario_.decimation) == 0) record(trace);
      if (i < n_steps) step();
    }
    return trace;
  }

  // Load the electrical, controller, droop, and measurement states consistent
  // with a phasor solution at time t (periodic steady state of the hybrid
  // loop, up to zero-order-hold ripple).
  void load_phasor_state(const PhasorSolution& solution,
                         const std::vector<double>& commanded_magnitudes, double t) {
    const double w0 = config_.nominal_frequency;
    const cplx jw0(0.0, w0);
    const cplx rot = std::exp(jw0 * t);
    state_.time = t;
    state_.load_current = 0.0;
    if (config_.load.kind == LoadModel::Kind::series_rl) {
      cplx zl = config_.load_impedance(w0);
      state_.load_current = std::imag(solution.pcc_voltage / zl * rot);
    }
    for (std::size_t k = 0; k < config_.size(); ++k) {
      InverterRuntime& inv = state_.inverters[k];
      const InverterElectrical& el = config_.inverters[k];
      // solution.capacitor_voltage is the output-node phasor V_k; recover the
      // internal capacitor state through the damped capacitor branch:
      // V_node = V_C (1 + j w0 R_c C), I_L = I_k + j w0 C V_C.
      cplx v_node = solution.capacitor_voltage[k];
      cplx i_b = solution.branch_current[k];
      cplx v_c = v_node / (1.0 + jw0 * el.filter_damping_resistance * el.filter_capacitance);
      cplx i_l = i_b + jw0 * el.filter_capacitance * v_c;
      cplx v_inv = v_node + (jw0 * el.filter_inductance + el.filter_esr) * i_l;
      inv.capacitor_voltage = std::imag(v_c * rot);
      inv.branch_current = std::imag(i_b * rot);
      inv.inductor_current = std::imag(i_l * rot);
      inv.applied_voltage = std::imag(v_inv * rot);
      inv.regulating = true;
      inv.connected = true;
      inv.regulate_start = t - 1.0;  // ramp finished
      inv.droop.filtered_active_power = solution.active_power[k];
      inv.droop.commanded_magnitude = commanded_magnitudes[k];
      inv.accumulated_phase = phase_of(k, t);
      inv.angular_frequency = w0;

      // demodulated measurements relative to the local clock phase offset
      double offset = config_.clocks.empty() ? 0.0 : config_.clocks[k].phase_offset;
      cplx local = std::exp(cplx(0.0, -offset));
      cplx v_loc = v_node * local, i_loc = i_b * local;
      inv.v_inphase = v_loc.real();
      inv.v_quadrature = v_loc.imag();
      inv.i_inphase = i_loc.real();
      inv.i_quadrature = i_loc.imag();

      if (!scenario_.open_loop) {
        // Discrete controller states at the sinusoidal steady state. The
        // internal model nulls the sampled tracking errors, so both
        // controllers run on zero input while their resonant modes carry the
        // required outputs net of the feedforward terms added outside the
        // realizations: i_L - i_k for the voltage loop (the branch current is
        // fed forward), v_inv - v_node for the current loop (the output
        // voltage is fed forward).
        double ts = scenario_.time_step;
        cplx z = std::exp(cplx(0.0, w0 * ts));
        set_realization_state(voltage_proto_, inv.voltage_ctrl_state, i_l - i_b, z, rot);
        set_realization_state(current_proto_, inv.current_ctrl_state, v_inv - v_node, z, rot);
      }
    }
    state_.pcc_voltage = solve_pcc_voltage(state_, config_);
  }

 private:
  double initial_phase(std::size_t k) const {
    return config_.clocks.empty() ? 0.0 : config_.clocks[k].phase_offset;
  }

  double phase_of(std::size_t k, double t) const {
    if (scenario_.architecture == Architecture::full_droop)
      return state_.inverters[k].accumulated_phase;
    if (config_.clocks.empty()) return config_.nominal_frequency * t;
    return phase_at(config_.clocks[k], t, config_.nominal_frequency);
  }

  void update_controllers(double t) {
    double v_pcc = solve_pcc_voltage(state_, config_);
    for (std::size_t k = 0; k < config_.size(); ++k) {
      InverterRuntime& inv = state_.inverters[k];
      if (!inv.regulating) continue;
      const InverterElectrical& el = config_.inverters[k];
      double ramp = std::clamp((t - inv.regulate_start) * config_.nominal_frequency /
                                   (2.0 * M_PI),
                               0.0, 1.0);
      double i_k = branch_current_now(state_, config_, k, v_pcc);
      double v_node = node_voltage_now(inv, el, i_k);
      double v_ref = ramp * inv.droop.commanded_magnitude * std::sin(phase_of(k, t)) -
                     el.virtual_resistance * i_k;
      // Cascade with branch-current and output-voltage feedforwards: the
      // current reference adds the measured branch current (so the voltage
      // controller drives only the capacitor current), and the commanded
      // voltage adds the measured output voltage (cancelling the filter
      // back-EMF so the current controller sees the bare L-R inductor).
      double i_ref = realization_step(voltage_proto_, inv.voltage_ctrl_state,
                                      v_ref - v_node) +
                     i_k;
      double v_cmd = realization_step(current_proto_, inv.current_ctrl_state,
                                      i_ref - inv.inductor_current) +
                     v_node;
      inv.applied_voltage = std::clamp(v_cmd, -el.dc_link_voltage, el.dc_link_voltage);
    }
  }

  void update_discrete_filters(double dt) {
    double v_pcc = solve_pcc_voltage(state_, config_);
    state_.pcc_voltage = v_pcc;
    double t = state_.time;
    for (std::size_t k = 0; k < config_.size(); ++k) {
      InverterRuntime& inv = state_.inverters[k];
      if (!inv.regulating && !inv.connected) continue;
      const DroopParams& dp = config_.droop[k];
      double i_k = branch_current_now(state_, config_, k, v_pcc);
      double v_node = node_voltage_now(inv, config_.inverters[k], i_k);
      double p_inst = v_node * i_k;
      if (!scenario_.open_loop) power_filter_step(inv.droop, p_inst, dt, dp);

      // demodulated measurement filters (exact exponential hold at the droop
      // filter bandwidth)
      double theta = phase_of(k, t);
      double s = std::sin(theta), c = std::cos(theta);
      double decay = std::exp(-dp.power_filter_bandwidth * dt);
      auto lpf = [&](double& y, double x) { y = x + (y - x) * decay; };
      lpf(inv.v_inphase, 2.0 * v_node * s);
      lpf(inv.v_quadrature, 2.0 * v_node * c);
      lpf(inv.i_inphase, 2.0 * i_k * s);
      lpf(inv.i_quadrature, 2.0 * i_k * c);

      if (scenario_.open_loop) continue;
      if (scenario_.architecture == Architecture::vpd) {
        inv.droop.commanded_magnitude = vpd_voltage(inv.droop, dp);
      } else {
        double q_meas = 0.5 * (inv.v_quadrature * inv.i_inphase -
                               inv.v_inphase * inv.i_quadrature);
        FullDroopUpdate upd =
            full_droop_update(inv.accumulated_phase, inv.droop.filtered_active_power,
                              q_meas, dt, full_droop_[k]);
        inv.droop.commanded_magnitude = upd.commanded_magnitude;
        inv.accumulated_phase = upd.accumulated_phase;
        inv.angular_frequency = upd.angular_frequency;
      }
    }
  }

  // --- RK4 over the continuous states ---------------------------------------

  void rk4_step(double dt) {
    StateDerivative k1 = derivatives(state_, config_);
    SimulationState s2 = advanced(state_, k1, 0.5 * dt);
    StateDerivative k2 = derivatives(s2, config_);
    SimulationState s3 = advanced(state_, k2, 0.5 * dt);
    StateDerivative k3 = derivatives(s3, config_);
    SimulationState s4 = advanced(state_, k3, dt);
    StateDerivative k4 = derivatives(s4, config_);

    for (std::size_t k = 0; k < state_.inverters.size(); ++k) {
      InverterRuntime& inv = state_.inverters[k];
      const auto &a = k1.inverters[k], &b = k2.inverters[k], &c = k3.inverters[k],
                 &d = k4.inverters[k];
      inv.inductor_current += dt / 6.0 *
                              (a.d_inductor_current + 2.0 * b.d_inductor_current +
                               2.0 * c.d_inductor_current + d.d_inductor_current);
      inv.capacitor_voltage += dt / 6.0 *
                               (a.d_capacitor_voltage + 2.0 * b.d_capacitor_voltage +
                                2.0 * c.d_capacitor_voltage + d.d_capacitor_voltage);
      inv.branch_current += dt / 6.0 *
                            (a.d_branch_current + 2.0 * b.d_branch_current +
                             2.0 * c.d_branch_current + d.d_branch_current);
    }
    state_.load_current += dt / 6.0 *
                           (k1.d_load_current + 2.0 * k2.d_load_current +
                            2.0 * k3.d_load_current + k4.d_load_current);
  }

  static SimulationState advanced(const SimulationState& base, const StateDerivative& d,
                                  double h) {
    SimulationState out = base;
    for (std::size_t k = 0; k < base.inverters.size(); ++k) {
      out.inverters[k].inductor_current += h * d.inverters[k].d_inductor_current;
      out.inverters[k].capacitor_voltage += h * d.inverters[k].d_capacitor_voltage;
      out.inverters[k].branch_current += h * d.inverters[k].d_branch_current;
    }
    out.load_current += h * d.d_load_current;
    return out;
  }

  bool all_finite() const {
    auto ok = [](double x) { return std::isfinite(x); };
    if (!ok(state_.load_current)) return false;
    for (const auto& inv : state_.inverters) {
      if (!ok(inv.inductor_current) || !ok(inv.capacitor_voltage) ||
          !ok(inv.branch_current) || !ok(inv.applied_voltage))
        return false;
    }
    return true;
  }

  // --- events ----------------------------------------------------------------

  void apply_due_events(SimulationTrace& trace) {
    double dt = scenario_.time_step;
    while (next_event_ < scenario_.events.size() &&
           std::llround(scenario_.events[next_event_].time / dt) ==
               static_cast<long long>(step_index_)) {
      apply_event_now(scenario_.events[next_event_]);
      trace.event_times.push_back(state_.time);
      ++next_event_;
    }
  }

  void apply_event_now(const SimulationEvent& ev) {
    switch (ev.kind) {
      case SimulationEvent::Kind::connect_regulate: {
        InverterRuntime& inv = state_.inverters[ev.inverter_index];
        if (!inv.regulating) start_regulation(ev.inverter_index);
        break;
      }
      case SimulationEvent::Kind::connect_close: {
        InverterRuntime& inv = state_.inverters[ev.inverter_index];
        if (!inv.regulating) start_regulation(ev.inverter_index);
        inv.connected = true;
        inv.branch_current = 0.0;
        snap_load_current();
        break;
      }
      case SimulationEvent::Kind::disconnect: {
        InverterRuntime& inv = state_.inverters[ev.inverter_index];
        inv.connected = false;
        inv.branch_current = 0.0;
        snap_load_current();
        break;
      }
      case SimulationEvent::Kind::load_step: {
        LoadModel old = config_.load;
        config_.load = time_domain_load(ev.new_load, config_.nominal_frequency);
        if (config_.load.kind == LoadModel::Kind::series_rl &&
            old.kind == LoadModel::Kind::resistive) {
          // continue the instantaneous load current into the new inductor
          state_.load_current = state_.pcc_voltage / old.resistance;
        }
        if (config_.load.kind == LoadModel::Kind::resistive) state_.load_current = 0.0;
        break;
      }
      case SimulationEvent::Kind::set_power_reference:
        config_.droop[ev.inverter_index].active_power_reference = ev.new_power_reference;
        if (scenario_.architecture == Architecture::full_droop)
          full_droop_[ev.inverter_index].active_power_reference = ev.new_power_reference;
        break;
      case SimulationEvent::Kind::clock:
        apply_event(config_.clocks, ev.clock_event, config_.nominal_frequency);
        break;
    }
  }

  void start_regulation(std::size_t k) {
    InverterRuntime& inv = state_.inverters[k];
    inv.regulating = true;
    inv.regulate_start = state_.time;
    inv.inductor_current = 0.0;
    inv.capacitor_voltage = 0.0;
    inv.applied_voltage = 0.0;
    if (!scenario_.open_loop) {
      inv.voltage_ctrl_state = zero_state(voltage_proto_);
      inv.current_ctrl_state = zero_state(current_proto_);
    }
    inv.droop = DroopState{};
    inv.droop.commanded_magnitude = vpd_voltage(inv.droop, config_.droop[k]);
    inv.accumulated_phase = phase_of(k, state_.time);
    inv.v_inphase = inv.v_quadrature = inv.i_inphase = inv.i_quadrature = 0.0;
  }

  // Keep the RL load current consistent with KCL when no resistive branch can
  // absorb a mismatch (all connected branches inductive).
  void snap_load_current() {
    if (config_.load.kind != LoadModel::Kind::series_rl) return;
    bool any_resistive = false, any_connected = false;
    double sum = 0.0;
    for (std::size_t k = 0; k < state_.inverters.size(); ++k) {
      const InverterRuntime& inv = state_.inverters[k];
      if (!inv.connected) continue;
      any_connected = true;
      if (config_.inverters[k].branch_inductance > 0.0)
        sum += inv.branch_current;
      else
        any_resistive = true;
    }
    if (any_connected && !any_resistive) state_.load_current = sum;
  }

  // --- trace -----------------------------------------------------------------

  void init_trace(SimulationTrace& trace) const {
    std::size_t n = config_.size();
    trace.sample_time = scenario_.time_step * static_cast<double>(scenario_.decimation);
    trace.nominal_frequency = config_.nominal_frequency;
    trace.nominal_voltage = config_.nominal_voltage_magnitude;
    trace.inverter_count = n;
    trace.rated_apparent_power.clear();
    for (const auto& el : config_.inverters)
      trace.rated_apparent_power.push_back(el.rated_apparent_power);
    trace.output_voltage.assign(n, {});
    trace.branch_current.assign(n, {});
    trace.inductor_current.assign(n, {});
    trace.commanded_magnitude.assign(n, {});
    trace.active_power.assign(n, {});
    trace.reactive_power.assign(n, {});
    trace.circulating_pairs.clear();
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = j + 1; k < n; ++k) trace.circulating_pairs.emplace_back(j, k);
    trace.circulating_current.assign(trace.circulating_pairs.size(), {});
  }

  void record(SimulationTrace& trace) {
    double v_pcc = solve_pcc_voltage(state_, config_);
    state_.pcc_voltage = v_pcc;
    trace.time.push_back(state_.time);
    trace.pcc_voltage.push_back(v_pcc);
    std::vector<double> branch(config_.size());
    for (std::size_t k = 0; k < config_.size(); ++k) {
      const InverterRuntime& inv = state_.inverters[k];
      branch[k] = branch_current_now(state_, config_, k, v_pcc);
      trace.output_voltage[k].push_back(
          node_voltage_now(inv, config_.inverters[k], branch[k]));
      trace.branch_current[k].push_back(branch[k]);
      trace.inductor_current[k].push_back(inv.inductor_current);
      trace.commanded_magnitude[k].push_back(inv.droop.commanded_magnitude);
      trace.active_power[k].push_back(inv.droop.filtered_active_power);
      trace.reactive_power[k].push_back(
          0.5 * (inv.v_quadrature * inv.i_inphase - inv.v_inphase * inv.i_quadrature));
    }
    for (std::size_t p = 0; p < trace.circulating_pairs.size(); ++p) {
      auto [j, k] = trace.circulating_pairs[p];
      trace.circulating_current[p].push_back(0.5 * (branch[j] - branch[k]));
    }
  }

  // --- phasor-state helpers ----------------------------------------------------

  // Solve for the zero-input natural-mode state phasor X with
  // (zI - A) X = 0 and C X = output_phasor (stacked least squares; the
  // resonant eigenvalue sits exactly at z, so the system is consistent).
  static void set_realization_state(const DiscreteRealization& real, Eigen::VectorXd& state,
                                    cplx output_phasor, cplx z, cplx rot) {
    int n = real.state_dimension;
    if (n == 0) return;
    Eigen::MatrixXcd m(n + 1, n);
    m.topRows(n) = z * Eigen::MatrixXcd::Identity(n, n) -
                   real.state_update_matrix.cast<cplx>();
    m.bottomRows(1) = real.output_map.cast<cplx>();
    Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n + 1);
    rhs(n) = output_phasor;
    Eigen::VectorXcd x = m.colPivHouseholderQr().solve(rhs);
    for (int i = 0; i < n; ++i) state(i) = std::imag(x(i) * rot);
  }

  Scenario scenario_;
  MicrogridConfig config_;
  std::vector<FullDroopParams> full_droop_;
  ControllerSet controllers_;
  DiscreteRealization voltage_proto_;
  DiscreteRealization current_proto_;
  SimulationState state_;
  std::size_t step_index_ = 0;
  std::size_t next_event_ = 0;
};

inline SimulationTrace run(const Scenario& scenario) { return Simulator(scenario).run(); }

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Total harmonic distortion of a sampled signal: sqrt(sum_{h>=2} |c_h|^2)/|c_1|
// from a DFT over an integer number of fundamental periods (snapped down).
inline double thd(const std::vector<double>& signal, double sample_time,
                  double fundamental_hz) {
  if (!(sample_time > 0.0) || !(fundamental_hz > 0.0))
    throw std::domain_error("thd: sample_time and fundamental must be > 0");
  double total = static_cast<double>(signal.size() - 1) * sample_time;
  auto periods = static_cast<long long>(std::floor(total * fundamental_hz + 1e-9));
  if (periods < 1) throw std::domain_error("thd: need at least one fundamental period");
  auto n_use = static_cast<std::size_t>(
      std::llround(static_cast<double>(periods) / fundamental_hz / sample_time));
  n_use = std::min(n_use, signal.size());
  std::size_t start = signal.size() - n_use;
  auto max_h = static_cast<std::size_t>(std::floor(0.45 / (fundamental_hz * sample_time)));
  if (max_h < 1) throw std::domain_error("thd: sampling too coarse for the fundamental");

  double fundamental2 = 0.0, harmonics2 = 0.0;
  for (std::size_t h = 1; h <= max_h; ++h) {
    double wh = 2.0 * M_PI * fundamental_hz * static_cast<double>(h) * sample_time;
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < n_use; ++i) {
      double ang = wh * static_cast<double>(i);
      re += signal[start + i] * std::cos(ang);
      im += signal[start + i] * std::sin(ang);
    }
    double mag2 = (re * re + im * im) * 4.0 / (static_cast<double>(n_use) * n_use);
    if (h == 1)
      fundamental2 = mag2;
    else
      harmonics2 += mag2;
  }
  if (fundamental2 <= 0.0) throw std::domain_error("thd: no fundamental component");
  return std::sqrt(harmonics2 / fundamental2);
}

// First instant where the half-cycle peak envelope of the signal stays within
// `band` (relative) of its final value for the rest of the record.
inline double settling_time_envelope(const std::vector<double>& signal, double sample_time,
                                     double fundamental_hz, double band = 0.1) {
  if (signal.empty()) return 0.0;
  double half_period = 0.5 / fundamental_hz;
  auto per_bin = static_cast<std::size_t>(std::llround(half_period / sample_time));
  if (per_bin < 2) return 0.0;
  std::vector<double> peaks;
  for (std::size_t b = 0; (b + 1) * per_bin <= signal.size(); ++b) {
    double peak = 0.0;
    for (std::size_t i = b * per_bin; i < (b + 1) * per_bin; ++i)
      peak = std::max(peak, std::abs(signal[i]));
    peaks.push_back(peak);
  }
  if (peaks.empty()) return 0.0;
  std::size_t tail = std::min<std::size_t>(peaks.size(), 10);
  double final_value = 0.0;
  for (std::size_t i = peaks.size() - tail; i < peaks.size(); ++i) final_value += peaks[i];
  final_value /= static_cast<double>(tail);
  double tol = band * std::max(final_value, 1e-12);
  std::size_t first_ok = peaks.size();
  for (std::size_t b = peaks.size(); b-- > 0;) {
    if (std::abs(peaks[b] - final_value) <= tol)
      first_ok = b;
    else
      break;
  }
  if (first_ok >= peaks.size()) return static_cast<double>(peaks.size()) * half_period;
  return static_cast<double>(first_ok) * half_period;
}

// Fundamental frequency estimate (Hz) from rising zero crossings with linear
// interpolation, over up to `cycles` last cycles.
inline double estimate_frequency(const std::vector<double>& signal, double sample_time,
                                 std::size_t cycles = 10) {
  std::vector<double> crossings;
  for (std::size_t i = 1; i < signal.size(); ++i) {
    if (signal[i - 1] < 0.0 && signal[i] >= 0.0) {
      double frac = -signal[i - 1] / (signal[i] - signal[i - 1]);
      crossings.push_back((static_cast<double>(i - 1) + frac) * sample_time);
    }
  }
  if (crossings.size() < 2) return 0.0;
  std::size_t use = std::min(crossings.size(), cycles + 1);
  double t0 = crossings[crossings.size() - use];
  double t1 = crossings.back();
  return static_cast<double>(use - 1) / (t1 - t0);
}

struct TraceMetrics {
  std::vector<double> active_power;        // cycle-averaged, from demodulation
  std::vector<double> reactive_power;
  std::vector<double> voltage_amplitude;   // fundamental amplitude of v_k
  std::vector<double> voltage_phase;       // rad, common frame
  std::vector<double> current_amplitude;   // fundamental amplitude of i_k
  std::vector<double> current_phase;
  double pcc_amplitude = 0.0;
  double pcc_regulation_error = 0.0;       // (|V_pcc| - E*)/E*
  std::vector<double> circulating_amplitude;  // per stored pair
  std::vector<double> settling_time;       // per inverter, envelope of i_k
  double settling_time_max = 0.0;
  std::vector<double> thd_voltage;
  std::vector<double> frequency_estimate;  // Hz, per inverter (zero crossings)
  bool window_snapped = false;
  double window_used = 0.0;
};

namespace detail {
// Fundamental sin-phasor of a sampled signal over [end-window, end]:
// x(t) ~= Im(X exp(j w0 t)).
inline cplx demodulate(const std::vector<double>& x, const std::vector<double>& t,
                       std::size_t first, double w0) {
  double re = 0.0, im = 0.0;
  std::size_t n = x.size() - first;
  for (std::size_t i = first; i < x.size(); ++i) {
    re += 2.0 * x[i] * std::sin(w0 * t[i]);
    im += 2.0 * x[i] * std::cos(w0 * t[i]);
  }
  return cplx(re / static_cast<double>(n), im / static_cast<double>(n));
}
}  // namespace detail

inline TraceMetrics measure_metrics(const SimulationTrace& trace, double window) {
  if (trace.samples() < 2) throw std::domain_error("measure_metrics: empty trace");
  double f0 = trace.nominal_frequency / (2.0 * M_PI);
  double period = 1.0 / f0;
  if (!(window >= period))
    throw std::domain_error("measure_metrics: window must cover one fundamental period");
  TraceMetrics m;
  auto periods = static_cast<long long>(std::floor(window * f0 + 1e-9));
  double used = static_cast<double>(periods) * period;
  m.window_snapped = std::abs(used - window) > 1e-12;
  m.window_used = used;

  double t_end = trace.time.back();
  double t_start = t_end - used;
  std::size_t first = 0;
  while (first + 1 < trace.samples() && trace.time[first] < t_start - 1e-12) ++first;

  double w0 = trace.nominal_frequency;
  cplx v_pcc = detail::demodulate(trace.pcc_voltage, trace.time, first, w0);
  m.pcc_amplitude = std::abs(v_pcc);
  m.pcc_regulation_error = (m.pcc_amplitude - trace.nominal_voltage) / trace.nominal_voltage;

  std::size_t n = trace.inverter_count;
  for (std::size_t k = 0; k < n; ++k) {
    cplx v = detail::demodulate(trace.output_voltage[k], trace.time, first, w0);
    cplx i = detail::demodulate(trace.branch_current[k], trace.time, first, w0);
    cplx s = 0.5 * v * std::conj(i);
    m.active_power.push_back(s.real());
    m.reactive_power.push_back(s.imag());
    m.voltage_amplitude.push_back(std::abs(v));
    m.voltage_phase.push_back(std::arg(v));
    m.current_amplitude.push_back(std::abs(i));
    m.current_phase.push_back(std::arg(i));
    m.settling_time.push_back(settling_time_envelope(trace.branch_current[k],
                                                     trace.sample_time, f0));
    m.thd_voltage.push_back(thd(trace.output_voltage[k], trace.sample_time, f0));
    m.frequency_estimate.push_back(
        estimate_frequency(trace.output_voltage[k], trace.sample_time));
  }
  m.settling_time_max = m.settling_time.empty()
                            ? 0.0
                            : *std::max_element(m.settling_time.begin(), m.settling_time.end());
  for (std::size_t p = 0; p < trace.circulating_pairs.size(); ++p)
    m.circulating_amplitude.push_back(
        std::abs(detail::demodulate(trace.circulating_current[p], trace.time, first, w0)));
  return m;
}

}  // namespace vpd
