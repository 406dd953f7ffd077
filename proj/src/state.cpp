#include "bevodom/state.hpp"

namespace bevodom {

NavState boxplus(const NavState& x, const ErrorState& delta) {
  NavState out = x;
  out.R_WI = x.R_WI * so3_exp(delta.segment<3>(err::kTheta));
  out.p_WI += delta.segment<3>(err::kPos);
  out.v_W += delta.segment<3>(err::kVel);
  out.b_a += delta.segment<3>(err::kBa);
  out.b_g += delta.segment<3>(err::kBg);
  out.g_W += delta.segment<3>(err::kGrav);
  return out;
}

ErrorState boxminus(const NavState& a, const NavState& b) {
  ErrorState delta;
  delta.segment<3>(err::kTheta) = so3_log(b.R_WI.transpose() * a.R_WI);
  delta.segment<3>(err::kPos) = a.p_WI - b.p_WI;
  delta.segment<3>(err::kVel) = a.v_W - b.v_W;
  delta.segment<3>(err::kBa) = a.b_a - b.b_a;
  delta.segment<3>(err::kBg) = a.b_g - b.b_g;
  delta.segment<3>(err::kGrav) = a.g_W - b.g_W;
  return delta;
}

}  // namespace bevodom
