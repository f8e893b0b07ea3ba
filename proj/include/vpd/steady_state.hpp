#pragma once
// Fundamental-frequency steady-state engine: closed-form phasor solution for
// resistive-branch networks, a dense-solve oracle for arbitrary branch
// impedances, branch phase-difference formulas, the droop equilibrium fixed
// point, and circulating-current reporting.

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "vpd/clock.hpp"
#include "vpd/droop.hpp"
#include "vpd/net_model.hpp"

namespace vpd {

struct PhasorSolution {
  std::vector<double> current_amplitude;  // I_k, amperes
  std::vector<double> current_phase;      // phi_k, rad
  std::vector<double> voltage_amplitude;  // V_k, volts (capacitor terminal)
  std::vector<double> voltage_phase;      // psi_k, rad
  std::vector<double> active_power;       // P_k, watts
  std::vector<double> reactive_power;     // Q_k, vars
  cplx pcc_voltage = 0.0;                 // complex volts

  // intermediates used by the branch phase-difference formulas
  AdmittanceModel intermediate;
  std::vector<cplx> beta;      // beta_k = E_k / (lambda_v^T E), ohms
  std::vector<double> gamma;   // gamma_k = |beta_k - alpha|, ohms
  std::vector<double> delta;   // delta_k = (E_k - E*_k)/E*_k

  // convenience phasors and the KCL check
  std::vector<cplx> branch_current;     // complex I_k
  std::vector<cplx> capacitor_voltage;  // complex V_k
  double kcl_residual = 0.0;            // relative
};

struct DroopEquilibrium {
  std::vector<double> voltage_magnitudes;  // E_k, volts amplitude
  PhasorSolution solution;
  int iterations = 0;
  double residual = 0.0;  // volts
};

struct NonConvergenceError : std::runtime_error {
  std::vector<double> last_magnitudes;
  std::vector<double> residual_history;
  NonConvergenceError(const std::string& what, std::vector<double> magnitudes,
                      std::vector<double> history)
      : std::runtime_error(what),
        last_magnitudes(std::move(magnitudes)),
        residual_history(std::move(history)) {}
};

namespace detail {

// Fill amplitudes, phases, powers, intermediates, and the KCL residual from
// complex branch currents and the PCC voltage.
inline PhasorSolution assemble_solution(const MicrogridConfig& config,
                                        const std::vector<double>& e_magnitudes,
                                        const std::vector<double>& e_phases,
                                        const std::vector<cplx>& currents, cplx v_pcc) {
  const std::size_t n = config.size();
  PhasorSolution out;
  out.intermediate = build_admittance(config, config.nominal_frequency);
  out.pcc_voltage = v_pcc;
  out.branch_current = currents;
  out.current_amplitude.resize(n);
  out.current_phase.resize(n);
  out.voltage_amplitude.resize(n);
  out.voltage_phase.resize(n);
  out.active_power.resize(n);
  out.reactive_power.resize(n);
  out.capacitor_voltage.resize(n);
  out.beta.resize(n);
  out.gamma.resize(n);
  out.delta.resize(n);

  cplx e_weighted = 0.0;  // lambda_v^T E
  for (std::size_t k = 0; k < n; ++k)
    e_weighted += out.intermediate.lambda_v[k] *
                  std::polar(e_magnitudes[k], e_phases[k]);

  cplx current_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    cplx e_k = std::polar(e_magnitudes[k], e_phases[k]);
    cplx v_k = e_k - config.inverters[k].virtual_resistance * currents[k];
    out.capacitor_voltage[k] = v_k;
    out.current_amplitude[k] = std::abs(currents[k]);
    out.current_phase[k] = std::arg(currents[k]);
    out.voltage_amplitude[k] = std::abs(v_k);
    out.voltage_phase[k] = std::arg(v_k);
    cplx s_k = 0.5 * v_k * std::conj(currents[k]);
    out.active_power[k] = s_k.real();
    out.reactive_power[k] = s_k.imag();
    out.beta[k] = std::abs(e_weighted) > 0.0 ? e_k / e_weighted : cplx(0.0);
    out.gamma[k] = std::abs(out.beta[k] - out.intermediate.alpha);
    out.delta[k] = (e_magnitudes[k] - config.droop[k].nominal_voltage) /
                   config.droop[k].nominal_voltage;
    current_sum += currents[k];
  }

  cplx z_load = config.load_impedance(config.nominal_frequency);
  cplx kcl = current_sum - v_pcc / z_load;
  double scale = 0.0;
  for (const cplx& i : currents) scale += std::abs(i);
  out.kcl_residual = std::abs(kcl) / std::max(scale, 1e-30);
  return out;
}

inline std::vector<double> clock_phases(const MicrogridConfig& config) {
  std::vector<double> phases(config.size(), 0.0);
  for (std::size_t k = 0; k < config.size(); ++k)
    phases[k] = config.clocks[k].phase_offset;
  return phases;
}

}  // namespace detail

// Dense oracle: N branch currents plus the PCC voltage as complex unknowns.
// Branch impedance r_k + R_vk + j*omega0*L_branch,k between the source E_k
// and the PCC node, load Z_L from PCC to ground.
inline PhasorSolution solve_brute_force(const std::vector<double>& e_magnitudes,
                                        const MicrogridConfig& config) {
  const std::size_t n = config.size();
  if (e_magnitudes.size() != n)
    throw std::invalid_argument("solve_brute_force: E list size mismatch");
  for (double e : e_magnitudes)
    if (!(e > 0.0)) throw std::domain_error("solve_brute_force: E_k must be > 0");
  const double w0 = config.nominal_frequency;
  cplx z_load = load_impedance_at(config.load, w0);
  if (!(std::abs(z_load) > 0.0))
    throw std::domain_error("solve_brute_force: zero load impedance");

  std::vector<double> phases = detail::clock_phases(config);
  Eigen::MatrixXcd a = Eigen::MatrixXcd::Zero(n + 1, n + 1);
  Eigen::VectorXcd b = Eigen::VectorXcd::Zero(n + 1);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& inv = config.inverters[k];
    a(k, k) = inv.branch_resistance + inv.virtual_resistance +
              cplx(0.0, w0 * inv.branch_inductance);
    a(k, n) = 1.0;
    b(k) = std::polar(e_magnitudes[k], phases[k]);
    a(n, k) = 1.0;
  }
  a(n, n) = -1.0 / z_load;

  Eigen::FullPivLU<Eigen::MatrixXcd> lu(a);
  if (!lu.isInvertible())
    throw std::domain_error("solve_brute_force: singular network system");
  Eigen::VectorXcd x = lu.solve(b);

  std::vector<cplx> currents(n);
  for (std::size_t k = 0; k < n; ++k) currents[k] = x(k);
  return detail::assemble_solution(config, e_magnitudes, phases, currents, x(n));
}

// Closed-form solution for resistive branches (complex load allowed):
//   I_k = lambda_vk (lambda_v^T E)(beta_k - alpha),   V_k = E_k - R_vk I_k,
// with the amplitude/phase decomposition
//   I_k = gamma_k/(r_k+R_vk) * sum_m E_m/(r_m+R_vm),
//   cos phi_k = (beta_k - Re alpha)/gamma_k, sin phi_k = -Im alpha / gamma_k.
inline PhasorSolution solve_closed_form(const std::vector<double>& e_magnitudes,
                                        const MicrogridConfig& config) {
  const std::size_t n = config.size();
  if (e_magnitudes.size() != n)
    throw std::invalid_argument("solve_closed_form: E list size mismatch");
  for (double e : e_magnitudes)
    if (!(e > 0.0)) throw std::domain_error("solve_closed_form: E_k must be > 0");
  for (const auto& inv : config.inverters)
    if (inv.branch_inductance != 0.0)
      throw std::domain_error("solve_closed_form: branches must be resistive");

  AdmittanceModel model = build_admittance(config, config.nominal_frequency);
  cplx e_weighted = 0.0;
  for (std::size_t k = 0; k < n; ++k) e_weighted += model.lambda_v[k] * e_magnitudes[k];
  if (!(std::abs(e_weighted) > 0.0))
    throw std::domain_error("solve_closed_form: zero total source admittance");

  std::vector<cplx> currents(n);
  for (std::size_t k = 0; k < n; ++k) {
    cplx beta_k = e_magnitudes[k] / e_weighted;
    currents[k] = model.lambda_v[k] * e_weighted * (beta_k - model.alpha);
  }
  cplx v_pcc = model.alpha * e_weighted;
  return detail::assemble_solution(config, e_magnitudes,
                                   std::vector<double>(n, 0.0), currents, v_pcc);
}

// The theorem-statement amplitude form sqrt((E - R_v I)^2 + (R_v I)^2) and the
// derivation's general form sqrt((E - R_v I cos phi)^2 + (R_v I sin phi)^2).
// The two agree only when cos phi = 1 and the quadrature term vanishes; the
// statement form is kept available so the gap can be logged explicitly.
inline double statement_voltage_form(double e_k, double r_v, double i_k) {
  return std::hypot(e_k - r_v * i_k, r_v * i_k);
}
inline double general_voltage_form(double e_k, double r_v, double i_k, double phi_k) {
  return std::hypot(e_k - r_v * i_k * std::cos(phi_k), r_v * i_k * std::sin(phi_k));
}

// Phase difference phi_k - phi_j evaluated from the printed rational formula
// in nu, xi, delta; the principal value is quadrant-resolved against the
// complex branch currents stored in the solution.
inline double phase_difference_exact(const PhasorSolution& solution, std::size_t k,
                                     std::size_t j) {
  const std::size_t n = solution.delta.size();
  if (k >= n || j >= n)
    throw std::invalid_argument("phase_difference_exact: index out of range");
  const cplx nu = solution.intermediate.nu;
  double xi_dot_delta = 0.0;
  for (std::size_t m = 0; m < n; ++m)
    xi_dot_delta += solution.intermediate.xi[m].real() * solution.delta[m];
  const double denom_common = 1.0 + xi_dot_delta;
  const double a_k = (1.0 + solution.delta[k]) / denom_common;
  const double a_j = (1.0 + solution.delta[j]) / denom_common;
  const double numerator = nu.imag() * (solution.delta[k] - solution.delta[j]) / denom_common;
  const double denominator =
      (nu.real() - a_k) * (nu.real() - a_j) + nu.imag() * nu.imag();
  if (std::abs(denominator) < 1e-14)
    throw std::domain_error("phase_difference_exact: degenerate geometry");
  const double principal = std::atan(numerator / denominator);

  // resolve the tan branch with full quadrant information
  cplx ratio = solution.branch_current[k] *
               std::conj(solution.branch_current[j]);
  double reference = std::arg(ratio);
  double resolved = principal;
  while (resolved - reference > M_PI_2) resolved -= M_PI;
  while (reference - resolved > M_PI_2) resolved += M_PI;
  return resolved;
}

struct ApproxPhaseDifference {
  double value = 0.0;  // rad
  bool warning = false;
  std::string message;
};

// Linearized estimate tan(phi_k - phi_j) ~ (sum_m |Z_L| sin(theta_L) /
// (r_m + R_vm)) * (delta_k - delta_j), returned as an angle.
inline ApproxPhaseDifference phase_difference_approx(const MicrogridConfig& config,
                                                     double delta_k, double delta_j) {
  AdmittanceModel model = build_admittance(config, config.nominal_frequency);
  cplx z_load = config.load_impedance(config.nominal_frequency);
  cplx lambda_sum = 0.0;
  for (cplx lv : model.lambda_v) lambda_sum += lv;
  double theta_l = std::arg(z_load);
  double factor = std::abs(z_load) * std::sin(theta_l) * lambda_sum.real();

  ApproxPhaseDifference out;
  out.value = std::atan(factor * (delta_k - delta_j));
  double stiff = std::abs(z_load * lambda_sum);
  if (stiff <= 10.0) {
    out.warning = true;
    out.message = "linearization outside its validity region: |Z_L lambda_v^T 1| = " +
                  std::to_string(stiff) + " <= 10";
  } else if (stiff < 50.0) {
    out.warning = true;
    out.message = "linearization marginal: |Z_L lambda_v^T 1| = " +
                  std::to_string(stiff) + " < 50";
  }
  return out;
}

// Admissible |delta_k - delta_j| that keeps the linearized phase difference
// below epsilon: inverting the linearized relation gives
//   budget = epsilon / ((lambda_v^T 1) |Z_L| sin theta_L),
// so stiffer source coupling (larger branch conductance sum) tightens the
// admissible spread while a purely resistive load leaves it unconstrained.
inline double delta_budget(const MicrogridConfig& config, double epsilon) {
  if (!(epsilon > 0.0)) throw std::domain_error("delta_budget: epsilon must be > 0");
  AdmittanceModel model = build_admittance(config, config.nominal_frequency);
  cplx z_load = config.load_impedance(config.nominal_frequency);
  cplx lambda_sum = 0.0;
  for (cplx lv : model.lambda_v) lambda_sum += lv;
  double sin_theta = std::abs(std::sin(std::arg(z_load)));
  double factor = lambda_sum.real() * std::abs(z_load) * sin_theta;
  if (!(factor > 0.0)) return std::numeric_limits<double>::infinity();
  return epsilon / factor;
}

// Self-consistent droop operating point: fixed point of
//   E_k = clamp(E*_k - n_k (P_k(E) - P*_k))
// with P_k(E) from the dense network solve; damped Picard iteration.  The
// relaxation adapts: whenever the residual grows the step is halved (large
// droop gains make the undamped map expansive even though the fixed point
// exists), and sustained progress lets it recover toward the default.
inline DroopEquilibrium droop_equilibrium(const MicrogridConfig& config) {
  config.validate();
  const std::size_t n = config.size();
  const double tolerance = 1e-10;
  const int max_iterations = 1000;

  std::vector<double> e(n);
  for (std::size_t k = 0; k < n; ++k) e[k] = config.droop[k].nominal_voltage;

  std::vector<double> history;
  PhasorSolution solution;
  double damping = 0.5;
  int improving_streak = 0;
  for (int it = 1; it <= max_iterations; ++it) {
    solution = solve_brute_force(e, config);
    double residual = 0.0;
    std::vector<double> target(n);
    for (std::size_t k = 0; k < n; ++k) {
      DroopState s{solution.active_power[k], 0.0};
      target[k] = vpd_voltage(s, config.droop[k]);
      residual = std::max(residual, std::abs(target[k] - e[k]));
    }
    if (!history.empty() && residual > history.back()) {
      damping = std::max(damping * 0.5, 1.0 / 1024.0);
      improving_streak = 0;
    } else if (++improving_streak >= 8) {
      damping = std::min(damping * 1.5, 0.5);
      improving_streak = 0;
    }
    history.push_back(residual);
    if (residual < tolerance)
      return DroopEquilibrium{e, solution, it, residual};
    for (std::size_t k = 0; k < n; ++k)
      e[k] = (1.0 - damping) * e[k] + damping * target[k];
  }
  throw NonConvergenceError(
      "droop_equilibrium: no fixed point after " + std::to_string(max_iterations) +
          " iterations (last residual " + std::to_string(history.back()) + " V)",
      e, history);
}

// Half the phasor difference of a branch-current pair.
inline cplx circulating_current(const PhasorSolution& solution, std::size_t k,
                                std::size_t j) {
  if (k >= solution.branch_current.size() || j >= solution.branch_current.size())
    throw std::invalid_argument("circulating_current: index out of range");
  return 0.5 * (solution.branch_current[k] - solution.branch_current[j]);
}

}  // namespace vpd
