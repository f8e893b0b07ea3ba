#pragma once
// Electrical description of the microgrid — inverters, branch resistances,
// virtual resistances, common load — and its admittance-matrix algebra.
// The network is a single-PCC star: every inverter feeds the same node
// through its branch; the load hangs off that node.

#include <cmath>
#include <complex>
#include <stdexcept>
#include <vector>

#include "vpd/clock.hpp"
#include "vpd/droop.hpp"
#include "vpd/transfer_function.hpp"

namespace vpd {

struct InverterElectrical {
  double filter_inductance = 0.063e-3;   // L_k, henries
  double filter_esr = 0.014;             // R_k, ohms
  double filter_capacitance = 1e-6;      // C_k, farads
  // Series damping resistance in the filter-capacitor branch.  The averaged
  // (switch-free) plant model has essentially no loss at the LC resonance, so
  // the sampled controllers interacting with that resonance need a small
  // physical damper to reproduce the loss that real hardware exhibits there.
  double filter_damping_resistance = 3.0;  // R_ck, ohms
  double virtual_resistance = 0.2;       // R_vk, ohms
  double branch_resistance = 0.2;        // r_k, ohms
  double branch_inductance = 0.0;        // line inductance, henries (0 = purely resistive branch)
  double rated_apparent_power = 600.0;   // volt-amperes
  double dc_link_voltage = 250.0;        // volts

  void validate() const {
    if (!(filter_inductance > 0.0)) throw std::domain_error("InverterElectrical: filter_inductance must be > 0");
    if (!(filter_esr >= 0.0)) throw std::domain_error("InverterElectrical: filter_esr must be >= 0");
    if (!(filter_damping_resistance >= 0.0))
      throw std::domain_error("InverterElectrical: filter_damping_resistance must be >= 0");
    if (!(filter_capacitance > 0.0)) throw std::domain_error("InverterElectrical: filter_capacitance must be > 0");
    if (!(virtual_resistance >= 0.0)) throw std::domain_error("InverterElectrical: virtual_resistance must be >= 0");
    if (!(branch_resistance > 0.0)) throw std::domain_error("InverterElectrical: branch_resistance must be > 0");
    if (!(branch_inductance >= 0.0)) throw std::domain_error("InverterElectrical: branch_inductance must be >= 0");
    if (!(rated_apparent_power > 0.0)) throw std::domain_error("InverterElectrical: rated_apparent_power must be > 0");
    if (!(dc_link_voltage > 0.0)) throw std::domain_error("InverterElectrical: dc_link_voltage must be > 0");
  }
};

struct LoadModel {
  enum class Kind { resistive, series_rl, complex_at_omega0 } kind = Kind::resistive;
  double resistance = 24.0;   // R_L, ohms
  double inductance = 0.0;    // load L, henries (series-RL only)
  cplx impedance = 24.0;      // Z_L at omega0 (derived; authoritative for complex_at_omega0)
  double power_factor_angle = 0.0;  // theta_L at omega0, radians (derived)

  static LoadModel resistive_load(double R) {
    LoadModel l;
    l.kind = Kind::resistive;
    l.resistance = R;
    l.impedance = R;
    l.power_factor_angle = 0.0;
    return l;
  }
  static LoadModel series_rl_load(double R, double L, double omega0) {
    LoadModel l;
    l.kind = Kind::series_rl;
    l.resistance = R;
    l.inductance = L;
    l.impedance = cplx(R, omega0 * L);
    l.power_factor_angle = std::arg(l.impedance);
    return l;
  }
  static LoadModel complex_load(cplx Z) {
    LoadModel l;
    l.kind = Kind::complex_at_omega0;
    l.resistance = Z.real();
    l.inductance = 0.0;
    l.impedance = Z;
    l.power_factor_angle = std::arg(Z);
    return l;
  }

  void validate() const {
    if (!(std::abs(impedance) > 0.0)) throw std::domain_error("LoadModel: |impedance| must be > 0");
    if (kind == Kind::resistive || kind == Kind::series_rl) {
      if (!(resistance > 0.0)) throw std::domain_error("LoadModel: resistance must be > 0");
    } else {
      // Arbitrary passive impedance; purely reactive (Re = 0) is allowed.
      if (impedance.real() < 0.0) throw std::domain_error("LoadModel: load must be passive (Re Z >= 0)");
    }
    double pf = std::cos(power_factor_angle);
    if (!(pf >= 0.0 && pf <= 1.0)) throw std::domain_error("LoadModel: power factor must be in [0, 1]");
  }
};

// Load impedance at an arbitrary angular frequency.
inline cplx load_impedance_at(const LoadModel& load, double angular_frequency) {
  if (!(angular_frequency > 0.0)) throw std::domain_error("load_impedance_at: frequency must be > 0");
  switch (load.kind) {
    case LoadModel::Kind::resistive:
      return {load.resistance, 0.0};
    case LoadModel::Kind::series_rl:
      return {load.resistance, angular_frequency * load.inductance};
    case LoadModel::Kind::complex_at_omega0:
      return load.impedance;  // callers must query at omega0; enforced by config
  }
  throw std::domain_error("load_impedance_at: unknown load kind");
}

struct MicrogridConfig {
  std::vector<InverterElectrical> inverters;
  LoadModel load;
  double nominal_voltage_magnitude = 120.0 * M_SQRT2;  // E*, volts amplitude
  double nominal_frequency = 2.0 * M_PI * 60.0;        // omega0, rad/s
  std::vector<DroopParams> droop;
  std::vector<ClockModel> clocks;

  std::size_t size() const { return inverters.size(); }

  void validate() const {
    std::size_t n = inverters.size();
    if (n < 1) throw std::domain_error("MicrogridConfig: at least one inverter required");
    if (droop.size() != n || clocks.size() != n)
      throw std::domain_error("MicrogridConfig: inverters, droop, clocks lists must have equal length");
    if (!(nominal_frequency > 0.0)) throw std::domain_error("MicrogridConfig: omega0 must be > 0");
    if (!(nominal_voltage_magnitude > 0.0)) throw std::domain_error("MicrogridConfig: E* must be > 0");
    for (const auto& inv : inverters) inv.validate();
    load.validate();
    for (const auto& d : droop) d.validate();
    for (const auto& c : clocks) c.validate();
  }

  // Query the load at a frequency, guarding the complex_at_omega0 restriction.
  cplx load_impedance(double angular_frequency) const {
    if (load.kind == LoadModel::Kind::complex_at_omega0 &&
        std::abs(angular_frequency - nominal_frequency) > 1e-9 * nominal_frequency)
      throw std::domain_error("load_impedance: complex_at_omega0 load queried off the nominal frequency");
    return load_impedance_at(load, angular_frequency);
  }
};

// Convenience: a config with N identical inverters on the given load.
inline MicrogridConfig make_uniform_config(std::size_t n, const LoadModel& load,
                                           const InverterElectrical& inverter = {},
                                           const DroopParams& droop = {}) {
  MicrogridConfig cfg;
  cfg.inverters.assign(n, inverter);
  cfg.load = load;
  cfg.droop.assign(n, droop);
  cfg.clocks.assign(n, ClockModel{});
  return cfg;
}

// Intermediate quantities of the star-network admittance algebra.
struct AdmittanceModel {
  std::vector<cplx> lambda_v;  // entries 1/(r_k + R_vk), siemens
  std::vector<cplx> Lambda_v;  // diagonal of lambda_v (stored as the diagonal vector)
  cplx h_inv = 0.0;            // h^{-1} = Z_L^{-1} + sum r_k^{-1}
  cplx alpha = 0.0;            // alpha^{-1} = Z_L^{-1} + sum (r_m + R_vm)^{-1}
  cplx nu = 0.0;               // nu = alpha * lambda_v^T 1
  std::vector<cplx> xi;        // xi = lambda_v / (lambda_v^T 1); sums to 1
};

inline AdmittanceModel build_admittance(const MicrogridConfig& config, double angular_frequency) {
  config.validate();
  cplx zl = config.load_impedance(angular_frequency);
  if (!(std::abs(zl) > 0.0)) throw std::domain_error("build_admittance: singular (zero-impedance) load");

  AdmittanceModel m;
  cplx lambda_sum = 0.0;
  cplx branch_only_sum = 0.0;
  for (const auto& inv : config.inverters) {
    cplx lv = 1.0 / cplx(inv.branch_resistance + inv.virtual_resistance, 0.0);
    m.lambda_v.push_back(lv);
    lambda_sum += lv;
    branch_only_sum += 1.0 / cplx(inv.branch_resistance, 0.0);
  }
  m.Lambda_v = m.lambda_v;
  m.h_inv = 1.0 / zl + branch_only_sum;
  m.alpha = 1.0 / (1.0 / zl + lambda_sum);
  m.nu = m.alpha * lambda_sum;
  for (cplx lv : m.lambda_v) m.xi.push_back(lv / lambda_sum);
  return m;
}

}  // namespace vpd
