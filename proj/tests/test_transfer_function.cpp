#include <catch2/catch_amalgamated.hpp>

#include "vpd/transfer_function.hpp"

using namespace vpd;
using Catch::Approx;

TEST_CASE("evaluate: simple rational functions", "[transfer_function]") {
  RationalTransferFunction one_over_s_plus_1({1.0}, {1.0, 1.0});
  CHECK(evaluate(one_over_s_plus_1, cplx(0.0)).real() == Approx(1.0));
  CHECK(evaluate(one_over_s_plus_1, cplx(0.0)).imag() == Approx(0.0));

  RationalTransferFunction f({1.0, 2.0}, {1.0, 1.0});  // (s+2)/(s+1)
  CHECK(evaluate(f, cplx(1.0)).real() == Approx(1.5));
}

TEST_CASE("evaluate: pole hit raises unless opted in", "[transfer_function]") {
  const double w0 = 2.0 * M_PI * 60.0;
  RationalTransferFunction resonant({1.0}, {1.0, 0.0, w0 * w0});  // 1/(s^2+w0^2)
  CHECK_THROWS_AS(evaluate(resonant, cplx(0.0, w0)), UnboundedValueError);
  cplx v = evaluate(resonant, cplx(0.0, w0), /*allow_unbounded=*/true);
  CHECK(std::isinf(v.real()));
  // Slightly off the pole evaluation is fine.
  CHECK_NOTHROW(evaluate(resonant, cplx(0.0, w0 * 1.001)));
}

TEST_CASE("polynomial multiply/divide round trip", "[transfer_function]") {
  Poly n{2.0, -3.0, 0.5, 7.0, -1.0};
  Poly d{1.0, 4.0, -2.0};
  auto qr = poly_divide(n, d);
  Poly back = poly_add(poly_mul(qr.quotient, d), qr.remainder);
  Poly nt = poly_trim(n);
  REQUIRE(back.size() >= nt.size());
  Poly bt = poly_trim(back, 1e-14);
  REQUIRE(bt.size() == nt.size());
  for (std::size_t i = 0; i < nt.size(); ++i) CHECK(bt[i] == Approx(nt[i]).margin(1e-12));
  CHECK(poly_degree(qr.remainder) < poly_degree(d));
}

TEST_CASE("roots round trip", "[transfer_function]") {
  std::vector<cplx> roots{{-1.0, 0.0}, {-2.0, 3.0}, {-2.0, -3.0}};
  Poly p = poly_from_roots(roots);
  REQUIRE(p.size() == 4);
  CHECK(p[0] == Approx(1.0));
  auto found = poly_roots(p);
  REQUIRE(found.size() == 3);
  for (cplx r : roots) {
    double best = 1e300;
    for (cplx f : found) best = std::min(best, std::abs(f - r));
    CHECK(best < 1e-10);
  }
}

TEST_CASE("poly_from_roots rejects unpaired complex roots", "[transfer_function]") {
  CHECK_THROWS_AS(poly_from_roots({{0.0, 1.0}}), std::domain_error);
}

TEST_CASE("derivative", "[transfer_function]") {
  Poly p{1.0, 0.0, 0.0, 0.0};  // s^3
  Poly d = poly_derivative(p);
  REQUIRE(d.size() == 3);
  CHECK(d[0] == Approx(3.0));
  CHECK(d[1] == Approx(0.0));
  CHECK(d[2] == Approx(0.0));
}

TEST_CASE("properness checks", "[transfer_function]") {
  RationalTransferFunction strictly({1.0}, {1.0, 1.0});
  CHECK(strictly.is_proper());
  CHECK(strictly.is_strictly_proper());
  RationalTransferFunction biproper({2.0, 1.0}, {1.0, 1.0});
  CHECK(biproper.is_proper());
  CHECK_FALSE(biproper.is_strictly_proper());
  RationalTransferFunction improper({1.0, 0.0, 0.0}, {1.0, 1.0});
  CHECK_FALSE(improper.is_proper());
}

TEST_CASE("zero denominator rejected", "[transfer_function]") {
  CHECK_THROWS_AS(RationalTransferFunction({1.0}, {0.0}), std::domain_error);
}
