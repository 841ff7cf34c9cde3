#pragma once

// Elementary functions with a fixed evaluation order so policy outputs are
// bit-identical across libm implementations. Only IEEE-754 basic operations,
// sqrt and ldexp are used; build with -ffp-contract=off.

namespace softtouch::detmath {

/// e^x via Cody-Waite reduction x = k ln2 + r and a degree-13 Taylor
/// polynomial on |r| <= ln2 / 2. Relative error below 2 ulp.
double exp(double x);

/// 1 / (1 + e^-x), evaluated on the side that cannot overflow.
double sigmoid(double x);

/// Wraps an angle to [-pi, pi] by subtracting the nearest multiple of 2 pi.
double wrapAngle(double a);

}  // namespace softtouch::detmath
