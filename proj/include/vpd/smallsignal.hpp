#pragma once
// Dynamic-phasor (complex-envelope) model of the closed loop, numerical
// linearization around the droop equilibrium, assembly of the coupled
// N-inverter system matrix with reference-frame rotations, eigenvalue
// reporting, and stability sweeps.
//
// Modeling route
// --------------
// Every real signal is written x(t) = Im(X(t) e^{j w0 t}) with a slowly
// varying complex envelope X.  A real LTI block H(s) then acts on envelopes
// as H(s + j w0): in state space the A matrix is shifted to A - j w0 I.  The
// sinusoidal steady states of the time-domain model map one-to-one onto
// fixed points of the envelope model, so standard equilibrium linearization
// applies.  The double-frequency (2 w0) component of the instantaneous power
// product is dropped; the droop power state keeps only the envelope product
//   dP/dt = w_P (Re(V_node conj(I_branch))/2 - P).
// Controllers are used in their continuous form here (the time-domain module
// samples them at 100 kHz; at the envelope scales of interest the hold delay
// is negligible).  The current controller must be strictly proper; the
// voltage controller may carry a derivative term (numerator degree one above
// the denominator), which is realized exactly by propagating the state
// derivatives into the error derivative.
//
// Frames
// ------
// Inverter k's reference is E_k sin(w0 t + theta_k) with theta_k the static
// clock offset.  Each inverter's states are kept in its LOCAL frame (envelope
// relative to e^{j(w0 t + theta_k)}), where the droop reference is the real
// number E_k.  With Theta_k := theta_com - theta_k and theta_com = 0, the 2x2
// rotation T_{Theta_k} = [[cos, -sin], [sin, cos]](Theta_k) maps common-frame
// d-q components into inverter k's local frame (d = Re, q = Im).  The PCC
// coupling between units j and k therefore carries T_{Theta_k} T_{Theta_j}^T,
// and with all offsets zero the coupling reduces to the plain selector
// pattern.  Clock holdover and drift are runtime concepts of the time-domain
// module and do not appear here.
//
// States per inverter: i_L (2), v_C (2), i_branch (2, only when the branch is
// inductive), voltage-controller states (2 per denominator degree),
// current-controller states (2 per denominator degree), filtered power P (1).
// A series-RL load adds a load-current pair in the common frame unless every
// branch is inductive; in that case the load current is identically the sum
// of the branch currents (the node is then index-reduced exactly as in the
// time-domain module) and carrying it as a state would only add a spurious
// marginal eigenvalue along the redundant KCL direction.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "vpd/controller.hpp"
#include "vpd/net_model.hpp"
#include "vpd/steady_state.hpp"
#include "vpd/timedomain.hpp"

namespace vpd {

// ---------------------------------------------------------------------------
// Continuous-time canonical realization
// ---------------------------------------------------------------------------

// y = C x + d0 u + d1 du/dt with xdot = A x + B u.  Controllable canonical
// form (same layout as the discrete realizations): monic denominator
// s^n + a1 s^{n-1} + ... + an gives A(0,i) = -a_{i+1}, subdiagonal ones,
// B = e1, C_i = b_{i+1} - b0 a_{i+1}, d0 = b0.  A numerator of degree n+1 is
// split by polynomial division into q1 s + (biproper part); q1 becomes d1.
struct ContinuousRealization {
  int state_dimension = 0;
  Eigen::MatrixXd state_matrix;    // A, n x n
  Eigen::VectorXd input_map;       // B, n
  Eigen::RowVectorXd output_map;   // C, 1 x n
  double feedthrough = 0.0;        // d0
  double derivative_feedthrough = 0.0;  // d1
};

inline ContinuousRealization make_continuous_realization(const RationalTransferFunction& tf) {
  Poly den = poly_trim(tf.denominator_coefficients, 0.0);
  int n = poly_degree(den);
  if (n < 0 || std::abs(den[0]) <= 1e-300)
    throw std::domain_error("make_continuous_realization: degenerate denominator");

  Poly num = tf.numerator_coefficients;
  double d1 = 0.0;
  if (!tf.is_proper()) {
    if (tf.numerator_degree() != tf.denominator_degree() + 1)
      throw std::invalid_argument(
          "make_continuous_realization: numerator degree may exceed the denominator by at most 1");
    PolyDivision div = poly_divide(num, den);
    d1 = div.quotient[0];  // quotient is exactly q1 s + q0
    num = poly_add(poly_scale(den, div.quotient[1]), div.remainder);
  }

  Poly aligned(static_cast<std::size_t>(n) + 1, 0.0);
  if (num.size() > aligned.size())
    throw std::invalid_argument("make_continuous_realization: numerator too long after split");
  for (std::size_t i = 0; i < num.size(); ++i)
    aligned[aligned.size() - num.size() + i] = num[i];

  double lead = den[0];
  std::vector<double> a(static_cast<std::size_t>(n) + 1), b(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) {
    a[static_cast<std::size_t>(i)] = den[static_cast<std::size_t>(i)] / lead;
    b[static_cast<std::size_t>(i)] = aligned[static_cast<std::size_t>(i)] / lead;
  }

  ContinuousRealization out;
  out.state_dimension = n;
  out.state_matrix = Eigen::MatrixXd::Zero(n, n);
  out.input_map = Eigen::VectorXd::Zero(n);
  out.output_map = Eigen::RowVectorXd::Zero(n);
  out.feedthrough = b[0];
  out.derivative_feedthrough = d1;
  for (int i = 0; i < n; ++i) {
    out.state_matrix(0, i) = -a[static_cast<std::size_t>(i) + 1];
    out.output_map(i) = b[static_cast<std::size_t>(i) + 1] - b[0] * a[static_cast<std::size_t>(i) + 1];
  }
  for (int i = 1; i < n; ++i) out.state_matrix(i, i - 1) = 1.0;
  if (n > 0) out.input_map(0) = 1.0;
  return out;
}

// ---------------------------------------------------------------------------
// State layout
// ---------------------------------------------------------------------------

struct EnvelopeUnitLayout {
  std::size_t base = 0;          // first real index of this unit
  bool inductive_branch = false;
  std::size_t inductor_offset = 0;  // relative offsets (d component; q = +1)
  std::size_t capacitor_offset = 2;
  std::size_t branch_offset = 0;    // valid only when inductive_branch
  std::size_t voltage_ctrl_offset = 0;
  std::size_t current_ctrl_offset = 0;
  std::size_t power_offset = 0;
  std::size_t state_count = 0;
};

struct EnvelopeLayout {
  std::vector<EnvelopeUnitLayout> units;
  bool has_load_state = false;  // series-RL load with at least one resistive branch
  std::size_t load_offset = 0;
  std::size_t dimension = 0;
  std::vector<std::string> labels;  // one per real state, unique
};

// ---------------------------------------------------------------------------
// Result types
// ---------------------------------------------------------------------------

// Envelope states of every inverter consistent with a droop equilibrium.
// `state` is the real 2x-expanded vector (d = Re, q = Im per complex state)
// in per-inverter local frames; `rotation_angles` lists Theta_k = -theta_k.
// The relative residual is max_i |f_i| / (w0 * max(1, max_i |x_i|)).
struct OperatingPoint {
  Eigen::VectorXd state;
  std::vector<double> rotation_angles;  // Theta_k, rad
  EnvelopeLayout layout;
  double residual = 0.0;
  int newton_iterations = 0;
};

struct LinearModel {
  Eigen::MatrixXd system_matrix;  // A_sys, real 2x-expanded, local frames
  std::vector<std::string> state_labels;
  // Per-inverter blocks (load block appended last when it carries states):
  // unit_state_blocks[k] = A_k with the PCC input frozen; unit_input_blocks[k]
  // = dF_k/d(local PCC voltage envelope), n_k x 2; the derivative channel
  // dF_k/d(local PCC voltage rate) is nonzero only for resistive branches.
  std::vector<Eigen::MatrixXd> unit_state_blocks;
  std::vector<Eigen::MatrixXd> unit_input_blocks;
  std::vector<Eigen::MatrixXd> unit_derivative_input_blocks;
  std::vector<Eigen::Matrix2d> rotation_maps;  // T_{Theta_k} per inverter
  EnvelopeLayout layout;
};

struct EigenReport {
  std::vector<cplx> eigenvalues;           // rad/s
  std::vector<std::string> mode_labels;    // max-participation state per mode
  double spectral_abscissa = 0.0;
  std::string dominant_mode_label;         // label of the rightmost mode
  bool stable = false;                     // spectral_abscissa < 0
};

struct EigenSolverError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class SweepAxis { clock_angle, droop_gain, virtual_resistance, load_pf };

struct SweepPoint {
  double parameter = 0.0;
  bool ok = false;
  std::string message;  // failure reason when !ok
  EigenReport report;
};

// Common-frame phasors reconstructed from an operating point.
struct EnvelopePhasors {
  std::vector<cplx> node_voltage;    // regulated output node, common frame
  std::vector<cplx> branch_current;  // common frame
  std::vector<double> active_power;  // envelope product Re(V conj(I))/2, W
  std::vector<double> reactive_power;
  cplx pcc_voltage = 0.0;
};

// ---------------------------------------------------------------------------
// Envelope model
// ---------------------------------------------------------------------------

class EnvelopeModel {
 public:
  explicit EnvelopeModel(MicrogridConfig config,
                         ControllerSet controllers = default_controllers())
      : config_(std::move(config)), controllers_(std::move(controllers)) {
    config_.validate();
    config_.load = time_domain_load(config_.load, config_.nominal_frequency);
    w0_ = config_.nominal_frequency;
    voltage_real_ = make_continuous_realization(controllers_.voltage_controller);
    current_real_ = make_continuous_realization(controllers_.current_controller);
    if (current_real_.feedthrough != 0.0 || current_real_.derivative_feedthrough != 0.0)
      throw std::invalid_argument(
          "EnvelopeModel: the current controller must be strictly proper");
    build_layout();
    std::vector<double> phases = detail::clock_phases(config_);
    local_rotation_.resize(config_.size());
    for (std::size_t k = 0; k < config_.size(); ++k)
      local_rotation_[k] = std::polar(1.0, phases[k]);  // local -> common
  }

  const MicrogridConfig& config() const { return config_; }
  const ControllerSet& controllers() const { return controllers_; }
  const EnvelopeLayout& layout() const { return layout_; }
  const ContinuousRealization& voltage_realization() const { return voltage_real_; }
  const ContinuousRealization& current_realization() const { return current_real_; }
  // Theta_k = -theta_k (theta_com = 0).
  std::vector<double> rotation_angles() const {
    std::vector<double> out(config_.size());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = -std::arg(local_rotation_[k]);
    return out;
  }

  // Common-frame PCC voltage envelope for a state vector.
  cplx pcc_voltage(const Eigen::VectorXd& state) const {
    check_dimension(state);
    return solve_pcc(state);
  }

  // Time derivative of the common-frame PCC voltage envelope.
  cplx pcc_rate(const Eigen::VectorXd& state) const {
    check_dimension(state);
    cplx v_pcc = solve_pcc(state);
    std::vector<FirstPass> fp(config_.size());
    for (std::size_t k = 0; k < config_.size(); ++k)
      fp[k] = first_pass(k, state, std::conj(local_rotation_[k]) * v_pcc);
    return solve_pcc_rate(state, v_pcc, fp);
  }

  // Full envelope derivative f(x).
  Eigen::VectorXd dynamics(const Eigen::VectorXd& state) const {
    check_dimension(state);
    Eigen::VectorXd deriv = Eigen::VectorXd::Zero(layout_.dimension);
    cplx v_pcc = solve_pcc(state);
    std::vector<FirstPass> fp(config_.size());
    for (std::size_t k = 0; k < config_.size(); ++k)
      fp[k] = first_pass(k, state, std::conj(local_rotation_[k]) * v_pcc);
    cplx dv_pcc = 0.0;
    if (any_resistive_branch_) dv_pcc = solve_pcc_rate(state, v_pcc, fp);
    for (std::size_t k = 0; k < config_.size(); ++k)
      second_pass(k, state, fp[k], std::conj(local_rotation_[k]) * dv_pcc, deriv);
    if (layout_.has_load_state) {
      cplx i_load = read_complex(state, layout_.load_offset);
      write_complex(deriv, layout_.load_offset, load_current_rate(v_pcc, i_load));
    }
    return deriv;
  }

  // Derivative of unit k's states with the PCC inputs frozen at the given
  // local-frame values (the isolated block used for A_k / B_k extraction).
  Eigen::VectorXd unit_dynamics(std::size_t k, const Eigen::VectorXd& state, cplx v_pcc_local,
                                cplx dv_pcc_local) const {
    check_dimension(state);
    Eigen::VectorXd deriv = Eigen::VectorXd::Zero(layout_.dimension);
    FirstPass fp = first_pass(k, state, v_pcc_local);
    second_pass(k, state, fp, dv_pcc_local, deriv);
    const EnvelopeUnitLayout& u = layout_.units[k];
    return deriv.segment(static_cast<Eigen::Index>(u.base),
                         static_cast<Eigen::Index>(u.state_count));
  }

  // Branch-current envelope of unit k in its local frame (state or algebraic).
  cplx branch_current(std::size_t k, const Eigen::VectorXd& state, cplx v_pcc_common) const {
    const EnvelopeUnitLayout& u = layout_.units[k];
    if (u.inductive_branch) return read_complex(state, u.base + u.branch_offset);
    const InverterElectrical& el = config_.inverters[k];
    cplx w = read_complex(state, u.base + u.capacitor_offset) +
             el.filter_damping_resistance * read_complex(state, u.base + u.inductor_offset);
    double rho = el.branch_resistance + el.filter_damping_resistance;
    return (w - std::conj(local_rotation_[k]) * v_pcc_common) / rho;
  }

  cplx local_rotation(std::size_t k) const { return local_rotation_[k]; }

 private:
  struct FirstPass {
    cplx i_branch;   // local frame
    cplx v_node;     // local frame
    cplx d_i_l;      // derivative of the inductor-current envelope
    cplx d_v_c;      // derivative of the capacitor-voltage envelope
    cplx d_i_branch; // only filled for inductive branches
  };

  void check_dimension(const Eigen::VectorXd& state) const {
    if (state.size() != static_cast<Eigen::Index>(layout_.dimension))
      throw std::invalid_argument("EnvelopeModel: state vector has wrong dimension");
  }

  static cplx read_complex(const Eigen::VectorXd& v, std::size_t at) {
    return {v(static_cast<Eigen::Index>(at)), v(static_cast<Eigen::Index>(at) + 1)};
  }
  static void write_complex(Eigen::VectorXd& v, std::size_t at, cplx value) {
    v(static_cast<Eigen::Index>(at)) = value.real();
    v(static_cast<Eigen::Index>(at) + 1) = value.imag();
  }

  void build_layout() {
    layout_ = EnvelopeLayout{};
    const std::size_t nv = static_cast<std::size_t>(voltage_real_.state_dimension);
    const std::size_t nc = static_cast<std::size_t>(current_real_.state_dimension);
    any_resistive_branch_ = false;
    std::size_t at = 0;
    for (std::size_t k = 0; k < config_.size(); ++k) {
      EnvelopeUnitLayout u;
      u.base = at;
      u.inductive_branch = config_.inverters[k].branch_inductance > 0.0;
      if (!u.inductive_branch) any_resistive_branch_ = true;
      std::size_t rel = 4;  // i_L, v_C
      if (u.inductive_branch) {
        u.branch_offset = rel;
        rel += 2;
      }
      u.voltage_ctrl_offset = rel;
      rel += 2 * nv;
      u.current_ctrl_offset = rel;
      rel += 2 * nc;
      u.power_offset = rel;
      rel += 1;
      u.state_count = rel;
      layout_.units.push_back(u);

      std::string p = "inv" + std::to_string(k + 1) + ".";
      layout_.labels.push_back(p + "iL_d");
      layout_.labels.push_back(p + "iL_q");
      layout_.labels.push_back(p + "vC_d");
      layout_.labels.push_back(p + "vC_q");
      if (u.inductive_branch) {
        layout_.labels.push_back(p + "ib_d");
        layout_.labels.push_back(p + "ib_q");
      }
      for (std::size_t i = 0; i < nv; ++i) {
        layout_.labels.push_back(p + "xv" + std::to_string(i + 1) + "_d");
        layout_.labels.push_back(p + "xv" + std::to_string(i + 1) + "_q");
      }
      for (std::size_t i = 0; i < nc; ++i) {
        layout_.labels.push_back(p + "xc" + std::to_string(i + 1) + "_d");
        layout_.labels.push_back(p + "xc" + std::to_string(i + 1) + "_q");
      }
      layout_.labels.push_back(p + "P");
      at += rel;
    }
    layout_.has_load_state =
        config_.load.kind == LoadModel::Kind::series_rl && any_resistive_branch_;
    if (layout_.has_load_state) {
      layout_.load_offset = at;
      layout_.labels.push_back("load.i_d");
      layout_.labels.push_back("load.i_q");
      at += 2;
    }
    layout_.dimension = at;
  }

  // Mirrors the time-domain node solve with complex envelopes in the common
  // frame.  Resistive branches act as sources (v_C + R_c i_L) behind
  // r + R_c; inductive branches contribute their state currents; a series-RL
  // load contributes its state current, and with no resistive branch the node
  // is recovered by eliminating the current derivatives (the -j w0 envelope
  // terms cancel exactly in that elimination).
  cplx solve_pcc(const Eigen::VectorXd& state) const {
    cplx num = 0.0;
    double den = 0.0;
    for (std::size_t k = 0; k < config_.size(); ++k) {
      const EnvelopeUnitLayout& u = layout_.units[k];
      const InverterElectrical& el = config_.inverters[k];
      if (u.inductive_branch) {
        num += local_rotation_[k] * read_complex(state, u.base + u.branch_offset);
      } else {
        double rho = el.branch_resistance + el.filter_damping_resistance;
        cplx w = read_complex(state, u.base + u.capacitor_offset) +
                 el.filter_damping_resistance * read_complex(state, u.base + u.inductor_offset);
        num += local_rotation_[k] * w / rho;
        den += 1.0 / rho;
      }
    }
    if (config_.load.kind == LoadModel::Kind::resistive)
      return num / (den + 1.0 / config_.load.resistance);
    if (layout_.has_load_state)
      return (num - read_complex(state, layout_.load_offset)) / den;
    // all branches inductive: index reduction against the series-RL load
    double a = 0.0;
    cplx b = 0.0;
    for (std::size_t k = 0; k < config_.size(); ++k) {
      const EnvelopeUnitLayout& u = layout_.units[k];
      const InverterElectrical& el = config_.inverters[k];
      cplx i_b = read_complex(state, u.base + u.branch_offset);
      cplx v_node = read_complex(state, u.base + u.capacitor_offset) +
                    el.filter_damping_resistance *
                        (read_complex(state, u.base + u.inductor_offset) - i_b);
      a += 1.0 / el.branch_inductance;
      b += local_rotation_[k] * (v_node - el.branch_resistance * i_b) / el.branch_inductance;
    }
    cplx i_load = num;  // identically the branch-current sum
    double l_load = config_.load.inductance;
    return (config_.load.resistance * i_load + l_load * b) / (1.0 + l_load * a);
  }

  cplx load_current_rate(cplx v_pcc, cplx i_load) const {
    const LoadModel& load = config_.load;
    return (v_pcc - load.resistance * i_load) / load.inductance - cplx(0.0, w0_) * i_load;
  }

  // d/dt of the common-frame PCC envelope; only required (and only queried)
  // when at least one branch is resistive, so the algebraic node expression
  // can be differentiated directly.
  cplx solve_pcc_rate(const Eigen::VectorXd& state, cplx v_pcc,
                      const std::vector<FirstPass>& fp) const {
    cplx dnum = 0.0;
    double den = 0.0;
    for (std::size_t k = 0; k < config_.size(); ++k) {
      const EnvelopeUnitLayout& u = layout_.units[k];
      const InverterElectrical& el = config_.inverters[k];
      if (u.inductive_branch) {
        dnum += local_rotation_[k] * fp[k].d_i_branch;
      } else {
        double rho = el.branch_resistance + el.filter_damping_resistance;
        dnum += local_rotation_[k] *
                (fp[k].d_v_c + el.filter_damping_resistance * fp[k].d_i_l) / rho;
        den += 1.0 / rho;
      }
    }
    if (config_.load.kind == LoadModel::Kind::resistive)
      return dnum / (den + 1.0 / config_.load.resistance);
    cplx d_i_load = load_current_rate(v_pcc, read_complex(state, layout_.load_offset));
    return (dnum - d_i_load) / den;
  }

  // Plant quantities and state derivatives that depend only on unit states
  // and the (local-frame) PCC voltage.
  FirstPass first_pass(std::size_t k, const Eigen::VectorXd& state, cplx v_pcc_local) const {
    const EnvelopeUnitLayout& u = layout_.units[k];
    const InverterElectrical& el = config_.inverters[k];
    const cplx jw0(0.0, w0_);
    FirstPass fp;
    cplx i_l = read_complex(state, u.base + u.inductor_offset);
    cplx v_c = read_complex(state, u.base + u.capacitor_offset);
    if (u.inductive_branch) {
      fp.i_branch = read_complex(state, u.base + u.branch_offset);
    } else {
      double rho = el.branch_resistance + el.filter_damping_resistance;
      fp.i_branch = (v_c + el.filter_damping_resistance * i_l - v_pcc_local) / rho;
    }
    fp.v_node = v_c + el.filter_damping_resistance * (i_l - fp.i_branch);
    if (u.inductive_branch)
      fp.d_i_branch = (fp.v_node - el.branch_resistance * fp.i_branch - v_pcc_local) /
                          el.branch_inductance -
                      jw0 * fp.i_branch;
    // Commanded voltage = current-controller state output (strictly proper)
    // plus the output-voltage feedforward.
    cplx v_inv = fp.v_node;
    for (int i = 0; i < current_real_.state_dimension; ++i)
      v_inv += current_real_.output_map(i) *
               read_complex(state, u.base + u.current_ctrl_offset + 2 * static_cast<std::size_t>(i));
    fp.d_i_l = (v_inv - el.filter_esr * i_l - fp.v_node) / el.filter_inductance - jw0 * i_l;
    fp.d_v_c = (i_l - fp.i_branch) / el.filter_capacitance - jw0 * v_c;
    return fp;
  }

  // Controller and droop derivatives; writes the whole unit derivative.
  void second_pass(std::size_t k, const Eigen::VectorXd& state, const FirstPass& fp,
                   cplx dv_pcc_local, Eigen::VectorXd& deriv) const {
    const EnvelopeUnitLayout& u = layout_.units[k];
    const InverterElectrical& el = config_.inverters[k];
    const DroopParams& dp = config_.droop[k];
    const cplx jw0(0.0, w0_);

    cplx i_l = read_complex(state, u.base + u.inductor_offset);
    double p_state = state(static_cast<Eigen::Index>(u.base + u.power_offset));

    cplx d_i_branch = fp.d_i_branch;
    if (!u.inductive_branch) {
      double rho = el.branch_resistance + el.filter_damping_resistance;
      d_i_branch = (fp.d_v_c + el.filter_damping_resistance * fp.d_i_l - dv_pcc_local) / rho;
    }

    double p_envelope = 0.5 * (fp.v_node * std::conj(fp.i_branch)).real();
    double d_p = dp.power_filter_bandwidth * (p_envelope - p_state);

    DroopState ds;
    ds.filtered_active_power = p_state;
    double e_k = vpd_voltage(ds, dp);
    double lo = 0.5 * dp.nominal_voltage, hi = 1.5 * dp.nominal_voltage;
    double d_e = (e_k > lo && e_k < hi) ? -dp.droop_coefficient * d_p : 0.0;

    cplx e_v = e_k - el.virtual_resistance * fp.i_branch - fp.v_node;
    cplx d_v_node = fp.d_v_c + el.filter_damping_resistance * (fp.d_i_l - d_i_branch);
    cplx d_e_v = d_e - el.virtual_resistance * d_i_branch - d_v_node;

    // Current reference = voltage-controller output (with the derivative
    // feedthrough acting on the error rate) plus the branch-current
    // feedforward.
    cplx i_ref = (voltage_real_.feedthrough + jw0 * voltage_real_.derivative_feedthrough) * e_v +
                 voltage_real_.derivative_feedthrough * d_e_v + fp.i_branch;
    for (int i = 0; i < voltage_real_.state_dimension; ++i)
      i_ref += voltage_real_.output_map(i) *
               read_complex(state, u.base + u.voltage_ctrl_offset + 2 * static_cast<std::size_t>(i));
    cplx e_c = i_ref - i_l;

    write_complex(deriv, u.base + u.inductor_offset, fp.d_i_l);
    write_complex(deriv, u.base + u.capacitor_offset, fp.d_v_c);
    if (u.inductive_branch) write_complex(deriv, u.base + u.branch_offset, fp.d_i_branch);
    controller_rate(voltage_real_, state, u.base + u.voltage_ctrl_offset, e_v, deriv);
    controller_rate(current_real_, state, u.base + u.current_ctrl_offset, e_c, deriv);
    deriv(static_cast<Eigen::Index>(u.base + u.power_offset)) = d_p;
  }

  // xdot = (A - j w0 I) x + B u for a canonical block stored as interleaved
  // d/q components.
  void controller_rate(const ContinuousRealization& real, const Eigen::VectorXd& state,
                       std::size_t at, cplx input, Eigen::VectorXd& deriv) const {
    const int n = real.state_dimension;
    const cplx jw0(0.0, w0_);
    for (int i = 0; i < n; ++i) {
      cplx acc = real.input_map(i) * input;
      for (int j = 0; j < n; ++j) {
        if (real.state_matrix(i, j) == 0.0) continue;
        acc += real.state_matrix(i, j) *
               read_complex(state, at + 2 * static_cast<std::size_t>(j));
      }
      acc -= jw0 * read_complex(state, at + 2 * static_cast<std::size_t>(i));
      write_complex(deriv, at + 2 * static_cast<std::size_t>(i), acc);
    }
  }

  MicrogridConfig config_;
  ControllerSet controllers_;
  ContinuousRealization voltage_real_;
  ContinuousRealization current_real_;
  EnvelopeLayout layout_;
  std::vector<cplx> local_rotation_;
  bool any_resistive_branch_ = false;
  double w0_ = 2.0 * M_PI * 60.0;
};

inline EnvelopeLayout envelope_layout(const MicrogridConfig& config,
                                      const ControllerSet& controllers = default_controllers()) {
  return EnvelopeModel(config, controllers).layout();
}

// Time-invariant complex ODE whose fixed points correspond one-to-one with
// the sinusoidal steady states of the time-domain model.
inline Eigen::VectorXd envelope_dynamics(const Eigen::VectorXd& state,
                                         const MicrogridConfig& config,
                                         const ControllerSet& controllers = default_controllers()) {
  return EnvelopeModel(config, controllers).dynamics(state);
}

// ---------------------------------------------------------------------------
// Fixed point
// ---------------------------------------------------------------------------

namespace detail {

inline double envelope_relative_residual(const Eigen::VectorXd& f, const Eigen::VectorXd& x,
                                         double w0) {
  double xm = x.size() ? x.cwiseAbs().maxCoeff() : 0.0;
  double fm = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
  return fm / (w0 * std::max(1.0, xm));
}

// Central-difference Jacobian of the coupled envelope dynamics with the
// per-state step h_i = step_scale * max(1e-6 |x_i|, 1e-9).
inline Eigen::MatrixXd envelope_jacobian(const EnvelopeModel& model, const Eigen::VectorXd& x,
                                         double step_scale = 1.0) {
  const Eigen::Index n = x.size();
  Eigen::MatrixXd jac(n, n);
  Eigen::VectorXd xp = x, xm = x;
  for (Eigen::Index i = 0; i < n; ++i) {
    double h = step_scale * std::max(1e-6 * std::abs(x(i)), 1e-9);
    xp(i) = x(i) + h;
    xm(i) = x(i) - h;
    jac.col(i) = (model.dynamics(xp) - model.dynamics(xm)) / (2.0 * h);
    xp(i) = x(i);
    xm(i) = x(i);
  }
  return jac;
}

// Minimum-residual solve of [[A - j w0 I]; [C]] x = [0; target]: the
// controller state vector carrying a pure resonant mode whose output matches
// the required equilibrium output.  The stacked system is consistent because
// the canonical pair (A, B) is controllable and j w0 is a denominator root.
inline Eigen::VectorXcd resonant_state_for_output(const ContinuousRealization& real,
                                                  double w0, cplx target) {
  const int n = real.state_dimension;
  Eigen::MatrixXcd stacked(n + 1, n);
  stacked.topRows(n) =
      real.state_matrix.cast<cplx>() - cplx(0.0, w0) * Eigen::MatrixXcd::Identity(n, n);
  for (int i = 0; i < n; ++i) stacked(n, i) = real.output_map(i);
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(n + 1);
  rhs(n) = target;
  return stacked.colPivHouseholderQr().solve(rhs);
}

}  // namespace detail

// Solve for the envelope fixed point.  The initial guess is constructed from
// the droop equilibrium (source E_k behind R_v at the regulated node), which
// already satisfies every envelope equation exactly up to the equilibrium
// solver's own tolerance; Newton polishes and verifies.
inline OperatingPoint solve_envelope_fixed_point(
    const MicrogridConfig& config, const ControllerSet& controllers = default_controllers()) {
  EnvelopeModel model(config, controllers);
  const MicrogridConfig& cfg = model.config();
  const EnvelopeLayout& layout = model.layout();
  const double w0 = cfg.nominal_frequency;
  const cplx jw0(0.0, w0);

  DroopEquilibrium eq = droop_equilibrium(cfg);

  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.dimension));
  auto put = [&x](std::size_t at, cplx v) {
    x(static_cast<Eigen::Index>(at)) = v.real();
    x(static_cast<Eigen::Index>(at) + 1) = v.imag();
  };
  for (std::size_t k = 0; k < cfg.size(); ++k) {
    const EnvelopeUnitLayout& u = layout.units[k];
    const InverterElectrical& el = cfg.inverters[k];
    cplx to_local = std::conj(model.local_rotation(k));
    cplx v_node = eq.solution.capacitor_voltage[k] * to_local;
    cplx i_b = eq.solution.branch_current[k] * to_local;
    cplx v_c = v_node / (1.0 + jw0 * el.filter_damping_resistance * el.filter_capacitance);
    cplx i_l = i_b + jw0 * el.filter_capacitance * v_c;
    cplx v_inv = v_node + (jw0 * el.filter_inductance + el.filter_esr) * i_l;
    put(u.base + u.inductor_offset, i_l);
    put(u.base + u.capacitor_offset, v_c);
    if (u.inductive_branch) put(u.base + u.branch_offset, i_b);
    // Controller resonant modes carry the equilibrium outputs net of the
    // feedforwards: i_L - i_k for the voltage loop, v_inv - v_node for the
    // current loop.
    Eigen::VectorXcd xv =
        detail::resonant_state_for_output(model.voltage_realization(), w0, i_l - i_b);
    for (Eigen::Index i = 0; i < xv.size(); ++i)
      put(u.base + u.voltage_ctrl_offset + 2 * static_cast<std::size_t>(i), xv(i));
    Eigen::VectorXcd xc =
        detail::resonant_state_for_output(model.current_realization(), w0, v_inv - v_node);
    for (Eigen::Index i = 0; i < xc.size(); ++i)
      put(u.base + u.current_ctrl_offset + 2 * static_cast<std::size_t>(i), xc(i));
    x(static_cast<Eigen::Index>(u.base + u.power_offset)) = eq.solution.active_power[k];
  }
  if (layout.has_load_state)
    put(layout.load_offset, eq.solution.pcc_voltage / cfg.load_impedance(w0));

  Eigen::VectorXd f = model.dynamics(x);
  double rel = detail::envelope_relative_residual(f, x, w0);
  int iterations = 0;
  for (; iterations < 30 && rel > 1e-10; ++iterations) {
    Eigen::MatrixXd jac = detail::envelope_jacobian(model, x);
    Eigen::VectorXd dx = jac.partialPivLu().solve(-f);
    double t = 1.0;
    double f_norm = f.cwiseAbs().maxCoeff();
    Eigen::VectorXd x_try, f_try;
    for (;;) {
      x_try = x + t * dx;
      f_try = model.dynamics(x_try);
      if (f_try.cwiseAbs().maxCoeff() <= (1.0 - 1e-4 * t) * f_norm || t < 1.0 / 64.0) break;
      t *= 0.5;
    }
    x = x_try;
    f = f_try;
    rel = detail::envelope_relative_residual(f, x, w0);
  }
  if (!(rel < 1e-8))
    throw std::runtime_error(
        "solve_envelope_fixed_point: Newton did not reach the residual tolerance (relative "
        "residual " +
        std::to_string(rel) + ")");

  OperatingPoint out;
  out.state = std::move(x);
  out.rotation_angles = model.rotation_angles();
  out.layout = layout;
  out.residual = rel;
  out.newton_iterations = iterations;
  return out;
}

// Common-frame phasors of an operating point (for reports and cross-checks).
inline EnvelopePhasors envelope_phasors(const OperatingPoint& point, const MicrogridConfig& config,
                                        const ControllerSet& controllers = default_controllers()) {
  EnvelopeModel model(config, controllers);
  const EnvelopeLayout& layout = model.layout();
  if (point.state.size() != static_cast<Eigen::Index>(layout.dimension))
    throw std::invalid_argument("envelope_phasors: operating point does not match the config");
  EnvelopePhasors out;
  cplx v_pcc = model.pcc_voltage(point.state);
  out.pcc_voltage = v_pcc;
  for (std::size_t k = 0; k < model.config().size(); ++k) {
    const EnvelopeUnitLayout& u = layout.units[k];
    const InverterElectrical& el = model.config().inverters[k];
    cplx rot = model.local_rotation(k);
    cplx i_b = model.branch_current(k, point.state, v_pcc);
    cplx i_l(point.state(static_cast<Eigen::Index>(u.base + u.inductor_offset)),
             point.state(static_cast<Eigen::Index>(u.base + u.inductor_offset) + 1));
    cplx v_c(point.state(static_cast<Eigen::Index>(u.base + u.capacitor_offset)),
             point.state(static_cast<Eigen::Index>(u.base + u.capacitor_offset) + 1));
    cplx v_node = v_c + el.filter_damping_resistance * (i_l - i_b);
    cplx s = 0.5 * v_node * std::conj(i_b);
    out.node_voltage.push_back(v_node * rot);
    out.branch_current.push_back(i_b * rot);
    out.active_power.push_back(s.real());
    out.reactive_power.push_back(s.imag());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linearization
// ---------------------------------------------------------------------------

// Central finite differences on the envelope dynamics (per-state step
// step_scale * max(1e-6 |x_i|, 1e-9)).  Per-inverter blocks A_k, B_k are
// extracted with the PCC inputs frozen; the system matrix is assembled as
//   A_sys = A + B_v C + B_d C A_sys,
// where C maps states to the local-frame PCC voltages (rotations applied to
// the algebraic node row) and the B_d term carries the voltage-controller
// derivative feedthrough, which sees the PCC rate through resistive branches.
// With inductive branches and a resistive load this reduces exactly to
// A_sys = A + R_L B T_Theta.
inline LinearModel linearize(const OperatingPoint& point, const MicrogridConfig& config,
                             const ControllerSet& controllers = default_controllers(),
                             double step_scale = 1.0) {
  EnvelopeModel model(config, controllers);
  const EnvelopeLayout& layout = model.layout();
  const double w0 = model.config().nominal_frequency;
  const Eigen::Index n = static_cast<Eigen::Index>(layout.dimension);
  if (point.state.size() != n)
    throw std::invalid_argument("linearize: operating point does not match the config");
  {
    Eigen::VectorXd f = model.dynamics(point.state);
    double rel = detail::envelope_relative_residual(f, point.state, w0);
    if (!(rel < 1e-6))
      throw std::invalid_argument(
          "linearize: operating point residual too large (relative " + std::to_string(rel) +
          "); solve the fixed point first");
  }

  const Eigen::VectorXd& x0 = point.state;
  cplx v_pcc0 = model.pcc_voltage(x0);
  cplx dv_pcc0 = model.pcc_rate(x0);

  LinearModel out;
  out.layout = layout;
  out.state_labels = layout.labels;

  const std::size_t n_inv = model.config().size();
  auto fd_step = [&](double x) { return step_scale * std::max(1e-6 * std::abs(x), 1e-9); };

  // Per-unit state and input blocks with the PCC inputs frozen.
  for (std::size_t k = 0; k < n_inv; ++k) {
    const EnvelopeUnitLayout& u = layout.units[k];
    const Eigen::Index nk = static_cast<Eigen::Index>(u.state_count);
    cplx to_local = std::conj(model.local_rotation(k));
    cplx v_loc = to_local * v_pcc0;
    cplx dv_loc = to_local * dv_pcc0;

    Eigen::MatrixXd a_k(nk, nk);
    Eigen::VectorXd xw = x0;
    for (Eigen::Index i = 0; i < nk; ++i) {
      Eigen::Index gi = static_cast<Eigen::Index>(u.base) + i;
      double h = fd_step(x0(gi));
      xw(gi) = x0(gi) + h;
      Eigen::VectorXd fp = model.unit_dynamics(k, xw, v_loc, dv_loc);
      xw(gi) = x0(gi) - h;
      Eigen::VectorXd fm = model.unit_dynamics(k, xw, v_loc, dv_loc);
      xw(gi) = x0(gi);
      a_k.col(i) = (fp - fm) / (2.0 * h);
    }

    Eigen::MatrixXd b_v(nk, 2), b_d(nk, 2);
    for (int comp = 0; comp < 2; ++comp) {
      cplx e = comp == 0 ? cplx(1.0, 0.0) : cplx(0.0, 1.0);
      double hv = fd_step(comp == 0 ? v_loc.real() : v_loc.imag());
      b_v.col(comp) = (model.unit_dynamics(k, x0, v_loc + hv * e, dv_loc) -
                       model.unit_dynamics(k, x0, v_loc - hv * e, dv_loc)) /
                      (2.0 * hv);
      double hd = fd_step(comp == 0 ? dv_loc.real() : dv_loc.imag());
      b_d.col(comp) = (model.unit_dynamics(k, x0, v_loc, dv_loc + hd * e) -
                       model.unit_dynamics(k, x0, v_loc, dv_loc - hd * e)) /
                      (2.0 * hd);
    }
    out.unit_state_blocks.push_back(std::move(a_k));
    out.unit_input_blocks.push_back(std::move(b_v));
    out.unit_derivative_input_blocks.push_back(std::move(b_d));

    double theta = point.rotation_angles.size() > k ? point.rotation_angles[k]
                                                    : -std::arg(model.local_rotation(k));
    Eigen::Matrix2d t;
    t << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
    out.rotation_maps.push_back(t);
  }

  // Load block (exact; the load current lives in the common frame).
  if (layout.has_load_state) {
    const LoadModel& load = model.config().load;
    Eigen::MatrixXd a_l(2, 2), b_l(2, 2);
    a_l << -load.resistance / load.inductance, w0, -w0, -load.resistance / load.inductance;
    b_l = Eigen::Matrix2d::Identity() / load.inductance;
    out.unit_state_blocks.push_back(a_l);
    out.unit_input_blocks.push_back(b_l);
    out.unit_derivative_input_blocks.push_back(Eigen::MatrixXd::Zero(2, 2));
  }

  // Node row: common-frame PCC voltage as a (linear) function of the states.
  Eigen::MatrixXd c_pcc(2, n);
  {
    Eigen::VectorXd xw = x0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double h = fd_step(x0(i));
      xw(i) = x0(i) + h;
      cplx vp = model.pcc_voltage(xw);
      xw(i) = x0(i) - h;
      cplx vm = model.pcc_voltage(xw);
      xw(i) = x0(i);
      c_pcc(0, i) = (vp.real() - vm.real()) / (2.0 * h);
      c_pcc(1, i) = (vp.imag() - vm.imag()) / (2.0 * h);
    }
  }

  // Assemble A_sys = A + B_v C + B_d C A_sys.
  Eigen::MatrixXd a_blk = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd bv_c = Eigen::MatrixXd::Zero(n, n);
  Eigen::MatrixXd bd_c = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t k = 0; k < out.unit_state_blocks.size(); ++k) {
    bool is_load = layout.has_load_state && k == n_inv;
    Eigen::Index base = is_load ? static_cast<Eigen::Index>(layout.load_offset)
                                : static_cast<Eigen::Index>(layout.units[k].base);
    Eigen::Index nk = out.unit_state_blocks[k].rows();
    a_blk.block(base, base, nk, nk) = out.unit_state_blocks[k];
    Eigen::Matrix2d rot = is_load ? Eigen::Matrix2d::Identity() : Eigen::Matrix2d(out.rotation_maps[k]);
    bv_c.middleRows(base, nk) += out.unit_input_blocks[k] * rot * c_pcc;
    bd_c.middleRows(base, nk) += out.unit_derivative_input_blocks[k] * rot * c_pcc;
  }
  out.system_matrix = (Eigen::MatrixXd::Identity(n, n) - bd_c)
                          .partialPivLu()
                          .solve(a_blk + bv_c);
  return out;
}

// ---------------------------------------------------------------------------
// Eigenvalue reporting
// ---------------------------------------------------------------------------

namespace detail {

// Osborne balancing with power-of-two scale factors: reduces the norm spread
// between rows and columns without perturbing the eigenvalues.  Participation
// factors are invariant under this diagonal similarity.
inline Eigen::MatrixXd osborne_balance(Eigen::MatrixXd a) {
  const Eigen::Index n = a.rows();
  for (int sweep = 0; sweep < 50; ++sweep) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      double c = a.col(i).cwiseAbs().sum() - std::abs(a(i, i));
      double r = a.row(i).cwiseAbs().sum() - std::abs(a(i, i));
      if (!(c > 0.0) || !(r > 0.0)) continue;
      int k = static_cast<int>(std::lround(std::log2(std::sqrt(r / c))));
      if (k == 0) continue;
      double f = std::ldexp(1.0, k);
      a.col(i) *= f;
      a.row(i) /= f;
      changed = true;
    }
    if (!changed) break;
  }
  return a;
}

}  // namespace detail

inline EigenReport eigen_report(const Eigen::MatrixXd& system_matrix,
                                const std::vector<std::string>& state_labels) {
  const Eigen::Index n = system_matrix.rows();
  if (system_matrix.cols() != n)
    throw std::invalid_argument("eigen_report: system matrix must be square");
  if (state_labels.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("eigen_report: one label per state required");

  Eigen::MatrixXd balanced = detail::osborne_balance(system_matrix);
  Eigen::EigenSolver<Eigen::MatrixXd> es(balanced, true);
  if (es.info() != Eigen::Success) {
    std::ostringstream dump;
    dump << "eigen_report: eigensolver failed to converge on\n" << system_matrix;
    throw EigenSolverError(dump.str());
  }

  Eigen::MatrixXcd v = es.eigenvectors();
  Eigen::MatrixXcd w;
  bool have_left = false;
  {
    Eigen::FullPivLU<Eigen::MatrixXcd> lu(v);
    if (lu.isInvertible()) {
      w = lu.inverse();
      have_left = true;
    }
  }

  EigenReport out;
  out.eigenvalues.resize(static_cast<std::size_t>(n));
  out.mode_labels.resize(static_cast<std::size_t>(n));
  Eigen::Index dominant = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    out.eigenvalues[static_cast<std::size_t>(i)] = es.eigenvalues()(i);
    Eigen::Index best = 0;
    double best_p = -1.0;
    for (Eigen::Index k = 0; k < n; ++k) {
      double p = have_left ? std::abs(w(i, k) * v(k, i)) : std::abs(v(k, i));
      if (p > best_p) {
        best_p = p;
        best = k;
      }
    }
    out.mode_labels[static_cast<std::size_t>(i)] = state_labels[static_cast<std::size_t>(best)];
    if (es.eigenvalues()(i).real() > es.eigenvalues()(dominant).real()) dominant = i;
  }
  out.spectral_abscissa = es.eigenvalues()(dominant).real();
  out.dominant_mode_label = out.mode_labels[static_cast<std::size_t>(dominant)];
  out.stable = out.spectral_abscissa < 0.0;
  return out;
}

inline EigenReport eigen_report(const LinearModel& model) {
  return eigen_report(model.system_matrix, model.state_labels);
}

// ---------------------------------------------------------------------------
// Stability sweeps
// ---------------------------------------------------------------------------

// One eigen report per grid point, equilibrium re-solved per point.  Axes:
//   clock_angle        absolute clock offset (rad) on inverter 1 (or the only
//                      inverter), other clocks unchanged
//   droop_gain         multiplicative factor on every droop coefficient
//   virtual_resistance absolute R_v (ohms) applied to every inverter
//   load_pf            lagging power factor in (0, 1] at fixed |Z_L|
// Per-point failures are recorded in the returned list and the sweep
// continues.
inline std::vector<SweepPoint> stability_sweep(
    const MicrogridConfig& config, SweepAxis axis, const std::vector<double>& grid,
    const ControllerSet& controllers = default_controllers()) {
  if (grid.empty()) throw std::invalid_argument("stability_sweep: grid must be nonempty");
  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (double g : grid) {
    SweepPoint point;
    point.parameter = g;
    try {
      MicrogridConfig cfg = config;
      switch (axis) {
        case SweepAxis::clock_angle: {
          std::size_t idx = cfg.size() > 1 ? 1 : 0;
          cfg.clocks[idx].phase_offset = g;
          break;
        }
        case SweepAxis::droop_gain:
          for (auto& d : cfg.droop) d.droop_coefficient *= g;
          break;
        case SweepAxis::virtual_resistance:
          for (auto& inv : cfg.inverters) inv.virtual_resistance = g;
          break;
        case SweepAxis::load_pf: {
          if (!(g > 0.0 && g <= 1.0))
            throw std::domain_error("load_pf sweep: power factor must be in (0, 1]");
          double z_mag = std::abs(cfg.load_impedance(cfg.nominal_frequency));
          if (g >= 1.0 - 1e-12) {
            cfg.load = LoadModel::resistive_load(z_mag);
          } else {
            cfg.load = LoadModel::complex_load(
                z_mag * cplx(g, std::sqrt(std::max(0.0, 1.0 - g * g))));
          }
          break;
        }
      }
      OperatingPoint op = solve_envelope_fixed_point(cfg, controllers);
      LinearModel lm = linearize(op, cfg, controllers);
      point.report = eigen_report(lm);
      point.ok = true;
    } catch (const std::exception& err) {
      point.ok = false;
      point.message = err.what();
    }
    out.push_back(std::move(point));
  }
  return out;
}

}  // namespace vpd
