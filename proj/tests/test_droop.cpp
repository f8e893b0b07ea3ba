#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "vpd/droop.hpp"

using namespace vpd;
using Catch::Approx;

TEST_CASE("power filter: exact exponential step response", "[droop]") {
  DroopParams params;  // power_filter_bandwidth = 2*pi rad/s
  DroopState state;
  state.filtered_active_power = 0.0;
  const double dt = 1e-4;
  for (int i = 0; i < 10000; ++i) power_filter_step(state, 100.0, dt, params);
  // one-pole low-pass driven by a constant: P(1s) = 100 (1 - e^{-2 pi})
  CHECK(state.filtered_active_power ==
        Approx(100.0 * (1.0 - std::exp(-2.0 * M_PI))).epsilon(1e-9));
  CHECK(state.filtered_active_power == Approx(99.81).margin(0.005));
}

TEST_CASE("power filter: fixed point and step-size guard", "[droop]") {
  DroopParams params;
  DroopState state;
  state.filtered_active_power = 42.0;
  power_filter_step(state, 42.0, 1e-3, params);
  CHECK(state.filtered_active_power == 42.0);  // exact fixed point
  CHECK_THROWS_AS(power_filter_step(state, 1.0, 1.0, params), std::domain_error);
  CHECK_THROWS_AS(power_filter_step(state, 1.0, -1e-4, params), std::domain_error);
}

TEST_CASE("power filter: double-frequency ripple attenuation", "[droop]") {
  DroopParams params;
  DroopState state;
  const double w0 = 2.0 * M_PI * 60.0;
  const double dt = 1e-5;
  const double two_w0 = 2.0 * w0;
  double t = 0.0;
  // settle, then record one ripple period
  for (int i = 0; i < 300000; ++i) {
    power_filter_step(state, std::sin(two_w0 * t), dt, params);
    t += dt;
  }
  double lo = 1e300, hi = -1e300;
  int period_steps = static_cast<int>(std::round(2.0 * M_PI / two_w0 / dt));
  for (int i = 0; i < period_steps; ++i) {
    power_filter_step(state, std::sin(two_w0 * t), dt, params);
    t += dt;
    lo = std::min(lo, state.filtered_active_power);
    hi = std::max(hi, state.filtered_active_power);
  }
  double ripple_gain = (hi - lo) / 2.0;
  // |H(j 2 w0)| = w_P / sqrt(w_P^2 + (2 w0)^2) = 0.0083329...
  double expected = params.power_filter_bandwidth /
                    std::hypot(params.power_filter_bandwidth, two_w0);
  CHECK(ripple_gain == Approx(expected).margin(2e-4));
  CHECK(ripple_gain == Approx(0.00833).margin(2e-4));
}

TEST_CASE("power filter: monotone map preserves ordering", "[droop]") {
  DroopParams params;
  std::mt19937 rng(99);
  std::uniform_real_distribution<double> pdist(-100.0, 100.0);
  std::uniform_real_distribution<double> bump(0.0, 50.0);
  DroopState a, b;
  a.filtered_active_power = b.filtered_active_power = 0.0;
  for (int i = 0; i < 2000; ++i) {
    double p = pdist(rng);
    power_filter_step(a, p, 1e-4, params);
    power_filter_step(b, p + bump(rng), 1e-4, params);
    REQUIRE(b.filtered_active_power >= a.filtered_active_power);
  }
}

TEST_CASE("droop law: reference point and slope", "[droop]") {
  DroopParams params;
  params.nominal_voltage = 169.7;
  params.droop_coefficient = 2e-4;
  params.active_power_reference = 250.0;
  DroopState state;

  state.filtered_active_power = 250.0;
  CHECK(vpd_voltage(state, params) == 169.7);  // P == P* -> E* exactly

  state.filtered_active_power = 600.0;
  // 169.7 - 2e-4 * 350 = 169.63
  CHECK(vpd_voltage(state, params) == Approx(169.63).epsilon(1e-12));

  // affine: equal increments in P give equal decrements in E
  state.filtered_active_power = 300.0;
  double e1 = vpd_voltage(state, params);
  state.filtered_active_power = 400.0;
  double e2 = vpd_voltage(state, params);
  CHECK(e1 - e2 == Approx(2e-4 * 100.0).epsilon(1e-12));

  // disabled droop pins the magnitude
  DroopParams flat = params;
  flat.droop_coefficient = 0.0;
  state.filtered_active_power = 5000.0;
  CHECK(vpd_voltage(state, flat) == 169.7);
}

TEST_CASE("droop law: magnitude command is clamped", "[droop]") {
  DroopParams params;
  DroopState state;
  state.filtered_active_power = params.active_power_reference +
                                10.0 * params.nominal_voltage / params.droop_coefficient;
  CHECK(vpd_voltage(state, params) == Approx(0.5 * params.nominal_voltage));
  state.filtered_active_power = params.active_power_reference -
                                10.0 * params.nominal_voltage / params.droop_coefficient;
  CHECK(vpd_voltage(state, params) == Approx(1.5 * params.nominal_voltage));
}

TEST_CASE("droop law: equal weighted deviations give equal magnitudes", "[droop]") {
  // n_i (P_i - P*_i) == n_j (P_j - P*_j)  =>  E_i == E_j
  DroopParams pi, pj;
  pi.droop_coefficient = 1e-4;
  pi.active_power_reference = 400.0;
  pj.droop_coefficient = 4e-4;
  pj.active_power_reference = 100.0;
  DroopState si, sj;
  si.filtered_active_power = 400.0 + 200.0;         // n_i * dev = 0.02
  sj.filtered_active_power = 100.0 + 200.0 / 4.0;   // n_j * dev = 0.02
  CHECK(vpd_voltage(si, pi) == Approx(vpd_voltage(sj, pj)).epsilon(1e-14));
}

TEST_CASE("reference voltage synthesis", "[droop]") {
  DroopParams params;
  DroopState state;
  state.filtered_active_power = params.active_power_reference;
  state.commanded_magnitude = vpd_voltage(state, params);
  CHECK(reference_voltage(state, M_PI / 2.0) ==
        Approx(params.nominal_voltage).epsilon(1e-14));
  CHECK(reference_voltage(state, 0.0) == Approx(0.0).margin(1e-12));
}

TEST_CASE("validation guards", "[droop]") {
  DroopParams params;
  CHECK_NOTHROW(params.validate());
  params.power_filter_bandwidth = -1.0;
  CHECK_THROWS_AS(params.validate(), std::domain_error);
  params = DroopParams{};
  params.droop_coefficient = -1e-4;
  CHECK_THROWS_AS(params.validate(), std::domain_error);
  // filter must sit well below the voltage loop bandwidth when one is supplied
  params = DroopParams{};
  CHECK_THROWS_AS(params.validate(40.0 * params.power_filter_bandwidth),
                  std::domain_error);
  CHECK_NOTHROW(params.validate(100.0 * params.power_filter_bandwidth));
}

TEST_CASE("full droop: frequency deviation law", "[droop]") {
  FullDroopParams params;
  params.q_droop_coefficient = 1e-3;
  params.reactive_power_reference = 200.0;
  const double dt = 1e-4;
  // Q* - Q = 100 var -> omega deviation = 0.1 rad/s
  auto upd = full_droop_update(0.0, params.active_power_reference, 100.0, dt, params);
  CHECK(upd.angular_frequency - params.nominal_frequency == Approx(0.1).epsilon(1e-12));
  CHECK(upd.accumulated_phase == Approx(upd.angular_frequency * dt).epsilon(1e-12));

  // Q == Q* -> exactly nominal frequency
  auto nom = full_droop_update(1.0, 0.0, 200.0, dt, params);
  CHECK(nom.angular_frequency == params.nominal_frequency);
}

TEST_CASE("full droop: phase wraps and symmetric units stay locked", "[droop]") {
  FullDroopParams params;
  params.q_droop_coefficient = 1e-3;
  params.reactive_power_reference = 0.0;
  double phase_a = 0.0, phase_b = 0.0;
  const double dt = 1e-4;
  for (int i = 0; i < 200000; ++i) {  // 20 s
    double q = 50.0 * std::sin(1e-3 * i);
    phase_a = full_droop_update(phase_a, 0.0, q, dt, params).accumulated_phase;
    phase_b = full_droop_update(phase_b, 0.0, q, dt, params).accumulated_phase;
    REQUIRE(phase_a >= 0.0);
    REQUIRE(phase_a < 2.0 * M_PI);
    REQUIRE(phase_a == phase_b);
  }
}
