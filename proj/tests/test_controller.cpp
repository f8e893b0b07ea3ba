#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "vpd/controller.hpp"

using namespace vpd;
using Catch::Approx;

namespace {
constexpr double kW0 = 2.0 * M_PI * 60.0;

bool contains_root(const std::vector<cplx>& roots, cplx target, double rel_tol) {
  double scale = std::max(1.0, std::abs(target));
  for (cplx r : roots)
    if (std::abs(r - target) < rel_tol * scale) return true;
  return false;
}

// random stable controller pair carrying the resonant internal model
ControllerSet random_resonant_controllers(std::mt19937& rng) {
  std::uniform_real_distribution<double> root(100.0, 6000.0);
  std::uniform_real_distribution<double> gain(0.005, 0.1);
  std::uniform_real_distribution<double> rv(0.0, 1.0);
  ControllerSet ctrl;
  Poly nv = poly_mul(poly_mul({1.0, root(rng)}, {1.0, root(rng)}),
                     poly_mul({1.0, root(rng)}, {1.0, root(rng)}));
  Poly dv = poly_mul(poly_mul({1.0, root(rng)}, {1.0, root(rng)}), {1.0, 0.0, kW0 * kW0});
  ctrl.voltage_controller = RationalTransferFunction{poly_scale(nv, gain(rng)), dv};
  Poly nc = poly_scale(poly_mul({1.0, root(rng)}, {1.0, root(rng)}), 1e4 * gain(rng));
  Poly dc = poly_mul({1.0, root(rng)}, {1.0, 0.0, kW0 * kW0});
  ctrl.current_controller = RationalTransferFunction{nc, dc};
  ctrl.virtual_resistance = rv(rng);
  return ctrl;
}
}  // namespace

TEST_CASE("shipped controllers reproduce the design roots", "[controller]") {
  ControllerSet ctrl = default_controllers();

  auto vz = poly_roots(ctrl.voltage_controller.numerator_coefficients);
  REQUIRE(vz.size() == 5);
  CHECK(contains_root(vz, 0.0, 1e-6));
  CHECK(contains_root(vz, -3139.0, 1e-6));
  CHECK(contains_root(vz, -1172.0, 1e-6));
  double im = std::sqrt(8.895e6 - 1664.0 * 1664.0);
  CHECK(contains_root(vz, cplx(-1664.0, im), 1e-6));
  CHECK(contains_root(vz, cplx(-1664.0, -im), 1e-6));

  auto vp = poly_roots(ctrl.voltage_controller.denominator_coefficients);
  REQUIRE(vp.size() == 4);
  CHECK(contains_root(vp, -5390.0, 1e-6));
  CHECK(contains_root(vp, -1406.0, 1e-6));
  CHECK(contains_root(vp, cplx(0.0, kW0), 1e-6));
  CHECK(contains_root(vp, cplx(0.0, -kW0), 1e-6));
  CHECK(ctrl.voltage_controller.denominator_coefficients[0] == Approx(1492.75));

  auto cz = poly_roots(ctrl.current_controller.numerator_coefficients);
  CHECK(contains_root(cz, -1406.0, 1e-6));
  CHECK(contains_root(cz, -222.0, 1e-6));
  CHECK(ctrl.current_controller.numerator_coefficients[0] == Approx(38403.0));
  auto cp = poly_roots(ctrl.current_controller.denominator_coefficients);
  CHECK(contains_root(cp, -6468.0, 1e-6));
  CHECK(contains_root(cp, cplx(0.0, kW0), 1e-6));
  CHECK(contains_root(cp, cplx(0.0, -kW0), 1e-6));

  CHECK_FALSE(ctrl.voltage_controller.is_proper());
  CHECK(ctrl.current_controller.is_strictly_proper());
  CHECK_THROWS_AS(evaluate(ctrl.current_controller, cplx(0.0, kW0)), UnboundedValueError);
}

TEST_CASE("internal-model verification", "[controller]") {
  ControllerSet ctrl = default_controllers();
  auto ok = verify_internal_model(ctrl, kW0);
  CHECK(ok.satisfied);
  CHECK(ok.residual < 1e-9);

  ControllerSet plain = ctrl;
  plain.voltage_controller = RationalTransferFunction{{1.0}, {1.0, 1.0}};
  CHECK_FALSE(verify_internal_model(plain, kW0).satisfied);

  CHECK_FALSE(verify_internal_model(ctrl, 2.0 * M_PI * 50.0).satisfied);
}

TEST_CASE("closed loop at the fundamental: unit gain, virtual-resistance output impedance",
          "[controller]") {
  InverterElectrical plant;
  ControllerSet ctrl = default_controllers();
  auto blk = closed_loop_blocks(plant, ctrl, cplx(0.0, kW0));
  CHECK(std::abs(blk.G - 1.0) < 1e-9);
  CHECK(std::abs(blk.Z - ctrl.virtual_resistance) < 1e-9);

  ControllerSet no_rv = ctrl;
  no_rv.virtual_resistance = 0.0;
  CHECK(std::abs(closed_loop_blocks(plant, no_rv, cplx(0.0, kW0)).Z) < 1e-12);
}

TEST_CASE("sensitivity decomposition holds off resonance", "[controller]") {
  InverterElectrical plant;
  ControllerSet ctrl = default_controllers();
  for (double w : {10.0, 500.0, 5000.0, 2.0e5}) {
    auto blk = closed_loop_blocks(plant, ctrl, cplx(0.0, w));
    CHECK(std::abs(blk.T - (1.0 - blk.S)) < 1e-12 * (1.0 + std::abs(blk.T)));
    // G = S / (P u w) * u w ... equivalently G = 1 - S for this architecture
    // does NOT hold in general; instead verify G and Z stay finite and the
    // reciprocal formulation agrees with direct evaluation away from poles.
    cplx kc = evaluate(ctrl.current_controller, cplx(0.0, w));
    cplx kv = evaluate(ctrl.voltage_controller, cplx(0.0, w));
    cplx lf = plant.filter_inductance * cplx(0.0, w) + plant.filter_esr;
    cplx ti = kc / (lf + kc);
    cplx direct_g =
        ti * kv / (plant.filter_capacitance * cplx(0.0, w) + ti * kv);
    CHECK(std::abs(blk.G - direct_g) < 1e-9 * std::abs(direct_g));
  }
}

TEST_CASE("resonant internal model forces unit tracking for randomized designs",
          "[controller]") {
  InverterElectrical plant;
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    ControllerSet ctrl = random_resonant_controllers(rng);
    auto blk = closed_loop_blocks(plant, ctrl, cplx(0.0, kW0));
    CHECK(std::abs(blk.G - 1.0) < 1e-9);
    CHECK(std::abs(blk.Z - ctrl.virtual_resistance) < 1e-9);
    CHECK(std::abs(blk.S) < 1e-9);
  }
}

TEST_CASE("tracking-error numerator carries the resonant factor", "[controller]") {
  InverterElectrical plant;
  ControllerSet ctrl = default_controllers();
  // numerator of (1 - G) = D(s) - nc * nv
  Poly d = closed_loop_denominator(plant, ctrl);
  Poly ncnv = poly_mul(ctrl.current_controller.numerator_coefficients,
                       ctrl.voltage_controller.numerator_coefficients);
  Poly n1g = poly_add(d, poly_scale(ncnv, -1.0));
  Poly factor = poly_mul({1.0, 0.0}, {1.0, 0.0, kW0 * kW0});  // s (s^2 + w0^2)
  PolyDivision div = poly_divide(n1g, factor);
  CHECK(poly_max_abs_coeff(div.remainder) / poly_max_abs_coeff(n1g) < 1e-6);
}

TEST_CASE("disconnected closed loop: structural integrator plus stable spectrum",
          "[controller]") {
  InverterElectrical plant;
  ControllerSet ctrl = default_controllers();
  Poly d = closed_loop_denominator(plant, ctrl);
  CHECK(poly_degree(d) == 9);
  CHECK(std::abs(poly_eval(d, 0.0)) < 1e-12 * poly_max_abs_coeff(d));
  int near_zero = 0;
  for (cplx r : poly_roots(d)) {
    if (std::abs(r) < 1e-3) {
      ++near_zero;
      continue;
    }
    CHECK(r.real() < -100.0);
  }
  CHECK(near_zero == 1);
}

TEST_CASE("measured loop crossovers of the shipped design", "[controller]") {
  InverterElectrical plant;
  ControllerSet ctrl = default_controllers();
  double fc_i = loop_crossover_hz(
      [&](cplx s) { return current_loop_gain(plant, ctrl, s); }, 100.0, 2e5);
  double fc_v = loop_crossover_hz(
      [&](cplx s) { return voltage_loop_gain(plant, ctrl, s); }, 100.0, 2e6);
  // frozen regression oracles measured for the shipped gains
  CHECK(fc_i == Approx(3866.45).margin(0.5));
  CHECK(fc_v == Approx(14882.2).margin(2.0));
}

TEST_CASE("discretize: static gain becomes feedthrough only", "[controller]") {
  auto real = discretize(RationalTransferFunction{{3.5}, {1.0}}, 1e-5);
  CHECK(real.state_dimension == 0);
  CHECK(real.feedthrough(0, 0) == Approx(3.5));
  Eigen::VectorXd x = zero_state(real);
  CHECK(realization_step(real, x, 2.0) == Approx(7.0));
}

TEST_CASE("discretize: resonant pair lands exactly on the unit circle", "[controller]") {
  const double ts = 1e-5;
  RationalTransferFunction tf{{1.0}, {1.0, 0.0, kW0 * kW0}};
  auto real = discretize(tf, ts, kW0);
  Eigen::EigenSolver<Eigen::MatrixXd> es(real.state_update_matrix);
  REQUIRE(es.eigenvalues().size() == 2);
  // closed-form bilinear pole map with prewarp at w0: z = (K + j w0)/(K - j w0)
  double k_map = kW0 / std::tan(kW0 * ts / 2.0);
  cplx z_expect = (cplx(k_map, kW0)) / (cplx(k_map, -kW0));
  for (int i = 0; i < 2; ++i) {
    cplx z = es.eigenvalues()(i);
    CHECK(std::abs(std::abs(z) - 1.0) < 1e-12);
    CHECK(std::abs(z - (z.imag() > 0 ? z_expect : std::conj(z_expect))) < 1e-9);
    CHECK(std::abs(std::arg(z)) == Approx(kW0 * ts).epsilon(1e-9));
  }
}

TEST_CASE("discretize: hand-mapped real pole and preserved DC gain", "[controller]") {
  RationalTransferFunction tf{{1.0}, {1.0, 1000.0}};
  auto real = discretize(tf, 1e-5);
  Eigen::EigenSolver<Eigen::MatrixXd> es(real.state_update_matrix);
  CHECK(es.eigenvalues()(0).real() == Approx((1.0 - 0.005) / (1.0 + 0.005)).epsilon(1e-12));
  CHECK(std::abs(discrete_frequency_response(real, 0.0) - cplx(1e-3)) < 1e-12);

  // DC gain preservation for a biproper block, with prewarp active
  RationalTransferFunction bip{{2.0, 300.0}, {1.0, 700.0}};
  auto real2 = discretize(bip, 1e-5, kW0);
  CHECK(std::abs(discrete_frequency_response(real2, 0.0) - cplx(300.0 / 700.0)) <
        1e-9 * (300.0 / 700.0));
}

TEST_CASE("discretize: response matches the continuous design at the prewarp frequency",
          "[controller]") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> root(50.0, 5000.0);
  for (int trial = 0; trial < 10; ++trial) {
    Poly num = poly_mul({1.0, root(rng)}, {1.0, root(rng)});
    Poly den = poly_mul(poly_mul({1.0, root(rng)}, {1.0, root(rng)}), {1.0, root(rng)});
    RationalTransferFunction tf{num, den};
    double w_pre = root(rng);
    auto real = discretize(tf, 1e-5, w_pre);
    cplx hc = evaluate(tf, cplx(0.0, w_pre));
    cplx hd = discrete_frequency_response(real, w_pre);
    CHECK(std::abs(hd - hc) < 1e-9 * std::abs(hc));
  }
}

TEST_CASE("discretize rejects improper and degenerate inputs", "[controller]") {
  ControllerSet ctrl = default_controllers();
  CHECK_THROWS_AS(discretize(ctrl.voltage_controller, 1e-5, kW0), std::invalid_argument);
  RationalTransferFunction ok{{1.0}, {1.0, 1.0}};
  CHECK_THROWS_AS(discretize(ok, 0.0), std::domain_error);
  CHECK_THROWS_AS(discretize(ok, 1e-5, 2.0 * M_PI / 1e-5), std::domain_error);
}

TEST_CASE("voltage-controller realization: split derivative matches the design response",
          "[controller]") {
  ControllerSet ctrl = default_controllers();
  const double ts = 1e-5;
  auto real = make_voltage_controller_realization(ctrl.voltage_controller, ts, kW0);
  CHECK(real.state_dimension == 5);
  for (double w : {2.0 * M_PI * 10.0, 2.0 * M_PI * 30.0, 2.0 * M_PI * 100.0}) {
    cplx hc = evaluate(ctrl.voltage_controller, cplx(0.0, w));
    cplx hd = discrete_frequency_response(real, w);
    CHECK(std::abs(hd - hc) < 1e-3 * std::abs(hc));
  }
}

TEST_CASE("shipped realizations keep the spectral-radius contract", "[controller]") {
  ControllerSet ctrl = default_controllers();
  const double ts = 1e-5;
  auto vol = make_voltage_controller_realization(ctrl.voltage_controller, ts, kW0);
  auto cur = discretize(ctrl.current_controller, ts, kW0);
  CHECK(spectral_radius(vol) <= 1.0 + 1e-9);
  CHECK(spectral_radius(cur) <= 1.0 + 1e-9);
}
