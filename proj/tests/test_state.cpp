#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bevodom/state.hpp"
#include "test_support.hpp"

using namespace bevodom;
namespace bt = bevodom::testing;

TEST_CASE("boxplus with zero leaves the state unchanged") {
  auto rng = bt::make_rng(11);
  const NavState x = bt::random_state(rng);
  const NavState y = boxplus(x, ErrorState::Zero());
  CHECK((y.R_WI - x.R_WI).norm() == 0.0);
  CHECK((y.p_WI - x.p_WI).norm() == 0.0);
  CHECK((y.v_W - x.v_W).norm() == 0.0);
  CHECK((y.b_a - x.b_a).norm() == 0.0);
  CHECK((y.b_g - x.b_g).norm() == 0.0);
  CHECK((y.g_W - x.g_W).norm() == 0.0);
}

TEST_CASE("boxminus of equal states is zero") {
  auto rng = bt::make_rng(12);
  const NavState x = bt::random_state(rng);
  CHECK(boxminus(x, x).norm() == 0.0);
}

TEST_CASE("boxplus/boxminus round trip") {
  auto rng = bt::make_rng(13);
  for (int i = 0; i < 200; ++i) {
    const NavState x = bt::random_state(rng);
    ErrorState d;
    for (int k = 0; k < err::kDim; ++k) {
      std::uniform_real_distribution<double> u(-0.9, 0.9);
      d[k] = u(rng);
    }
    // Keep the rotation part below 1 rad as the contract requires.
    d.segment<3>(err::kTheta) *= 0.5;
    const ErrorState back = boxminus(boxplus(x, d), x);
    CHECK((back - d).norm() < 1e-9);
  }
}

TEST_CASE("boxplus keeps the rotation orthonormal") {
  auto rng = bt::make_rng(14);
  NavState x;
  for (int i = 0; i < 500; ++i) {
    ErrorState d = ErrorState::Zero();
    d.segment<3>(err::kTheta) = bt::random_vec3(rng, 0.5);
    x = boxplus(x, d);
  }
  CHECK(is_rotation(x.R_WI, 1e-9));
}

TEST_CASE("vector blocks are antisymmetric") {
  auto rng = bt::make_rng(15);
  const NavState a = bt::random_state(rng);
  const NavState b = bt::random_state(rng);
  const ErrorState ab = boxminus(a, b);
  const ErrorState ba = boxminus(b, a);
  CHECK((ab.segment<3>(err::kPos) + ba.segment<3>(err::kPos)).norm() == 0.0);
  CHECK((ab.segment<3>(err::kVel) + ba.segment<3>(err::kVel)).norm() == 0.0);
  CHECK((ab.segment<3>(err::kBa) + ba.segment<3>(err::kBa)).norm() == 0.0);
  CHECK((ab.segment<3>(err::kGrav) + ba.segment<3>(err::kGrav)).norm() ==
        0.0);
}

TEST_CASE("small increments commute to first order") {
  auto rng = bt::make_rng(16);
  for (double eps : {1e-2, 1e-3, 1e-4}) {
    const NavState x = bt::random_state(rng);
    ErrorState d1 = ErrorState::Zero(), d2 = ErrorState::Zero();
    d1.segment<3>(err::kTheta) = eps * Vec3(1.0, 0.5, -0.3);
    d2.segment<3>(err::kTheta) = eps * Vec3(-0.2, 0.9, 0.4);
    const NavState a = boxplus(boxplus(x, d1), d2);
    const NavState b = boxplus(boxplus(x, d2), d1);
    const double discrepancy = boxminus(a, b).norm();
    // O(eps^2) falloff with a generous constant.
    CHECK(discrepancy < 10.0 * eps * eps);
  }
}
