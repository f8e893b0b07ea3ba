#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <random>

#include "vpd/net_model.hpp"

using namespace vpd;
using Catch::Approx;

namespace {
MicrogridConfig two_identical(double r, double rv, const LoadModel& load) {
  InverterElectrical inv;
  inv.branch_resistance = r;
  inv.virtual_resistance = rv;
  return make_uniform_config(2, load, inv);
}
}  // namespace

TEST_CASE("admittance: two identical inverters on resistive load", "[net_model]") {
  auto cfg = two_identical(0.2, 0.2, LoadModel::resistive_load(24.0));
  auto m = build_admittance(cfg, cfg.nominal_frequency);
  REQUIRE(m.lambda_v.size() == 2);
  CHECK(m.lambda_v[0].real() == Approx(2.5));
  CHECK(m.lambda_v[1].real() == Approx(2.5));
  CHECK(m.lambda_v[0].imag() == 0.0);
  // alpha^{-1} = 1/24 + 5 S, purely real for a resistive load
  CHECK((1.0 / m.alpha).real() == Approx(1.0 / 24.0 + 5.0).epsilon(1e-12));
  CHECK(m.alpha.imag() == Approx(0.0).margin(1e-15));
}

TEST_CASE("admittance: series-RL load gives complex nu", "[net_model]") {
  const double w0 = 2.0 * M_PI * 60.0;
  auto cfg = two_identical(0.2, 0.2, LoadModel::series_rl_load(11.52, 0.02293, w0));
  auto m = build_admittance(cfg, w0);
  // independent direct complex arithmetic oracle
  cplx zl(11.52, w0 * 0.02293);
  cplx alpha_oracle = 1.0 / (1.0 / zl + 5.0);
  cplx nu_oracle = alpha_oracle * 5.0;
  CHECK(std::abs(m.alpha - alpha_oracle) < 1e-14 * std::abs(alpha_oracle));
  CHECK(std::abs(m.nu - nu_oracle) < 1e-14 * std::abs(nu_oracle));
  CHECK(std::abs(m.nu.imag()) > 1e-3);
}

TEST_CASE("admittance: single inverter hand arithmetic", "[net_model]") {
  InverterElectrical inv;
  inv.branch_resistance = 0.2;
  inv.virtual_resistance = 0.2;
  auto cfg = make_uniform_config(1, LoadModel::resistive_load(24.0), inv);
  auto m = build_admittance(cfg, cfg.nominal_frequency);
  REQUIRE(m.xi.size() == 1);
  CHECK(m.xi[0].real() == Approx(1.0).epsilon(1e-14));
  CHECK(m.xi[0].imag() == Approx(0.0).margin(1e-15));
  // nu = 24*2.5/(1 + 24*2.5) = 60/61
  CHECK(m.nu.real() == Approx(60.0 / 61.0).epsilon(1e-13));
}

TEST_CASE("load_impedance_at basics", "[net_model]") {
  const double w0 = 2.0 * M_PI * 60.0;
  auto r24 = LoadModel::resistive_load(24.0);
  CHECK(load_impedance_at(r24, 1.0) == cplx(24.0, 0.0));
  CHECK(load_impedance_at(r24, w0) == cplx(24.0, 0.0));

  auto rl = LoadModel::series_rl_load(11.52, 0.02293, w0);
  cplx z = load_impedance_at(rl, w0);
  CHECK(z.real() == Approx(11.52));
  CHECK(z.imag() == Approx(w0 * 0.02293).epsilon(1e-12));  // = 8.6444 ohms

  auto degenerate = LoadModel::series_rl_load(7.0, 0.0, w0);
  CHECK(load_impedance_at(degenerate, w0).imag() == 0.0);

  CHECK_THROWS_AS(load_impedance_at(r24, 0.0), std::domain_error);
}

TEST_CASE("complex-at-omega0 load refuses other frequencies", "[net_model]") {
  auto cfg = two_identical(0.2, 0.2, LoadModel::complex_load(cplx(10.0, 5.0)));
  CHECK_NOTHROW(cfg.load_impedance(cfg.nominal_frequency));
  CHECK_THROWS_AS(cfg.load_impedance(cfg.nominal_frequency * 1.5), std::domain_error);
}

TEST_CASE("admittance invariants: resistive case is real, xi sums to one",
          "[net_model]") {
  std::mt19937 rng(12345);
  std::uniform_real_distribution<double> rdist(0.05, 2.0);
  std::uniform_real_distribution<double> ldist(5.0, 100.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 1 + trial % 5;
    MicrogridConfig cfg = make_uniform_config(n, LoadModel::resistive_load(ldist(rng)));
    for (auto& inv : cfg.inverters) {
      inv.branch_resistance = rdist(rng);
      inv.virtual_resistance = rdist(rng);
    }
    auto m = build_admittance(cfg, cfg.nominal_frequency);
    cplx xi_sum = 0.0;
    for (cplx x : m.xi) xi_sum += x;
    CHECK(std::abs(xi_sum - cplx(1.0)) < 1e-12);
    CHECK(std::abs(m.alpha.imag()) < 1e-12 * std::abs(m.alpha));
    CHECK(std::abs(m.nu.imag()) < 1e-12 * std::abs(m.nu));
    CHECK(std::abs(m.h_inv.imag()) < 1e-12 * std::abs(m.h_inv));
  }
}

TEST_CASE("admittance invariant: nu computed two ways agrees", "[net_model]") {
  const double w0 = 2.0 * M_PI * 60.0;
  std::mt19937 rng(777);
  std::uniform_real_distribution<double> rdist(0.05, 2.0);
  std::uniform_real_distribution<double> zdist(2.0, 60.0);
  std::uniform_real_distribution<double> adist(0.0, 1.2);
  for (int trial = 0; trial < 20; ++trial) {
    std::size_t n = 1 + trial % 5;
    cplx zl = std::polar(zdist(rng), adist(rng));
    MicrogridConfig cfg = make_uniform_config(n, LoadModel::complex_load(zl));
    for (auto& inv : cfg.inverters) {
      inv.branch_resistance = rdist(rng);
      inv.virtual_resistance = rdist(rng);
    }
    auto m = build_admittance(cfg, w0);
    cplx lambda_sum = 0.0;
    for (cplx lv : m.lambda_v) lambda_sum += lv;
    cplx nu2 = zl * lambda_sum / (1.0 + zl * lambda_sum);
    CHECK(std::abs(m.nu - nu2) < 1e-12 * std::abs(nu2));
  }
}

TEST_CASE("Woodbury identity: rank-one corrected inverse matches dense inverse",
          "[net_model]") {
  const double w0 = 2.0 * M_PI * 60.0;
  std::mt19937 rng(424242);
  std::uniform_real_distribution<double> rdist(0.05, 1.5);
  std::uniform_real_distribution<double> zdist(3.0, 50.0);
  std::uniform_real_distribution<double> adist(0.0, 1.3);
  for (std::size_t n : {2u, 3u, 5u}) {
    for (int trial = 0; trial < 5; ++trial) {
      cplx zl = std::polar(zdist(rng), adist(rng));
      MicrogridConfig cfg = make_uniform_config(n, LoadModel::complex_load(zl));
      for (auto& inv : cfg.inverters) {
        inv.branch_resistance = rdist(rng);
        inv.virtual_resistance = rdist(rng);
      }
      auto m = build_admittance(cfg, w0);

      // Branch-only admittance Y = Lambda - h * lambda lambda^T with entries 1/r_k.
      Eigen::MatrixXcd lam = Eigen::MatrixXcd::Zero(n, n);
      Eigen::VectorXcd lvec(n);
      Eigen::VectorXcd lv_v(n);
      Eigen::MatrixXcd rv = Eigen::MatrixXcd::Zero(n, n);
      for (std::size_t k = 0; k < n; ++k) {
        lam(k, k) = 1.0 / cfg.inverters[k].branch_resistance;
        lvec(static_cast<Eigen::Index>(k)) = 1.0 / cfg.inverters[k].branch_resistance;
        lv_v(static_cast<Eigen::Index>(k)) = m.lambda_v[k];
        rv(k, k) = cfg.inverters[k].virtual_resistance;
      }
      cplx h = 1.0 / m.h_inv;
      Eigen::MatrixXcd y = lam - h * (lvec * lvec.transpose());

      // Explicit rank-one corrected form with the R_v-augmented branch constants.
      Eigen::MatrixXcd explicit_form =
          Eigen::MatrixXcd(lv_v.asDiagonal()) - m.alpha * (lv_v * lv_v.transpose());
      Eigen::MatrixXcd dense = (y.inverse() + rv).inverse();
      double rel = (explicit_form - dense).norm() / dense.norm();
      CHECK(rel < 1e-10);
    }
  }
}

TEST_CASE("degenerate and invalid configs are rejected", "[net_model]") {
  MicrogridConfig empty;
  empty.inverters.clear();
  empty.droop.clear();
  empty.clocks.clear();
  CHECK_THROWS_AS(empty.validate(), std::domain_error);

  auto cfg = two_identical(0.2, 0.2, LoadModel::resistive_load(24.0));
  cfg.droop.pop_back();
  CHECK_THROWS_AS(cfg.validate(), std::domain_error);

  InverterElectrical bad;
  bad.filter_capacitance = -1e-6;
  CHECK_THROWS_AS(bad.validate(), std::domain_error);
}
