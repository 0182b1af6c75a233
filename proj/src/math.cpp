#include "dt/math.hpp"

#include <algorithm>
#include <stdexcept>

namespace dt {

namespace {

// One-sided Jacobi sweep helper: eigendecomposition of a symmetric 3x3.
void jacobi_eigen(const Mat3& b, Vec3& eval, Mat3& evec) {
  Mat3 a = b;
  Mat3 v = Mat3::identity();
  for (int sweep = 0; sweep < 32; sweep++) {
    real off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
    if (off < 1e-30) break;
    for (int p = 0; p < 2; p++)
      for (int q = p + 1; q < 3; q++) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        real theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        real t = (theta >= 0 ? 1.0 : -1.0) /
                 (std::abs(theta) + std::sqrt(theta * theta + 1));
        real c = 1 / std::sqrt(t * t + 1);
        real s = t * c;
        Mat3 r = Mat3::identity();
        r(p, p) = c; r(q, q) = c; r(p, q) = s; r(q, p) = -s;
        a = transpose(r) * a * r;
        v = v * r;
      }
  }
  eval = {a(0, 0), a(1, 1), a(2, 2)};
  evec = v;
}

}  // namespace

Svd3 svd3(const Mat3& a_in) {
  // Normalize so tolerances are scale-invariant.
  real amax = 0;
  for (real x : a_in.m) amax = std::max(amax, std::abs(x));
  if (amax < 1e-300) return {Mat3::identity(), {0, 0, 0}, Mat3::identity()};
  Mat3 a = a_in * (1 / amax);
  Mat3 b = transpose(a) * a;
  Vec3 eval;
  Mat3 v;
  jacobi_eigen(b, eval, v);

  // Sort eigenpairs descending.
  int idx[3] = {0, 1, 2};
  std::sort(idx, idx + 3, [&](int i, int j) { return eval[i] > eval[j]; });
  Mat3 vs;
  Vec3 es;
  for (int k = 0; k < 3; k++) {
    es[k] = std::max(eval[idx[k]], 0.0);
    vs.set_col(k, v.col(idx[k]));
  }

  if (det(vs) < 0) vs.set_col(2, -vs.col(2));

  Vec3 sigma{std::sqrt(es.x), std::sqrt(es.y), std::sqrt(es.z)};
  Mat3 u;
  real scale = sigma.x;
  if (scale < 1e-150) {
    return {Mat3::identity(), {0, 0, 0}, vs};
  }
  Vec3 u0 = normalized(a * vs.col(0));
  Vec3 u1 = a * vs.col(1);
  u1 -= dot(u1, u0) * u0;
  real n1 = norm(u1);
  if (n1 > 1e-12 * scale) {
    u1 = u1 / n1;
  } else {
    // rank deficient: pick any direction orthogonal to u0
    Vec3 h = std::abs(u0.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    u1 = normalized(cross(u0, h));
  }
  Vec3 u2 = cross(u0, u1);
  u.set_col(0, u0);
  u.set_col(1, u1);
  u.set_col(2, u2);

  // Signed singular values w.r.t. the rotation pair (U, V), rescaled back.
  for (int k = 0; k < 3; k++) sigma[k] = amax * dot(u.col(k), a * vs.col(k));
  return {u, sigma, vs};
}

Mat3 polar_rotation(const Mat3& a) {
  real amax = 0;
  for (real x : a.m) amax = std::max(amax, std::abs(x));
  if (amax < 1e-300 || det(a * (1 / amax)) <= 1e-12)
    throw std::invalid_argument("polar_rotation: degenerate matrix (det <= 1e-12)");
  Svd3 s = svd3(a);
  return s.U * transpose(s.V);
}

Mat3 axis_angle(const Vec3& axis, real angle) {
  real c = std::cos(angle), s = std::sin(angle);
  Mat3 k{0, -axis.z, axis.y, axis.z, 0, -axis.x, -axis.y, axis.x, 0};
  return Mat3::identity() + s * k + (1 - c) * (k * k);
}

TriangleClosest point_triangle_signed_distance(const Vec3& p, const Vec3& a,
                                               const Vec3& b, const Vec3& c,
                                               const Vec3& n) {
  Vec3 ab = b - a, ac = c - a;
  if (norm(cross(ab, ac)) < 2e-12)
    throw std::invalid_argument("point_triangle_signed_distance: degenerate triangle");

  TriangleClosest out;
  Vec3 ap = p - a;
  real d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) {  // vertex a
    out.closest = a;
    out.bary = {1, 0, 0};
    out.region = 4;
  } else {
    Vec3 bp = p - b;
    real d3 = dot(ab, bp), d4 = dot(ac, bp);
    Vec3 cp = p - c;
    real d5 = dot(ab, cp), d6 = dot(ac, cp);
    real vc = d1 * d4 - d3 * d2;
    real vb = d5 * d2 - d1 * d6;
    real va = d3 * d6 - d5 * d4;
    if (d3 >= 0 && d4 <= d3) {  // vertex b
      out.closest = b;
      out.bary = {0, 1, 0};
      out.region = 5;
    } else if (d6 >= 0 && d5 <= d6) {  // vertex c
      out.closest = c;
      out.bary = {0, 0, 1};
      out.region = 6;
    } else if (vc <= 0 && d1 >= 0 && d3 <= 0) {  // edge ab
      real t = d1 / (d1 - d3);
      out.closest = a + t * ab;
      out.bary = {1 - t, t, 0};
      out.region = 1;
    } else if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {  // edge bc
      real t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
      out.closest = b + t * (c - b);
      out.bary = {0, 1 - t, t};
      out.region = 2;
    } else if (vb <= 0 && d2 >= 0 && d6 <= 0) {  // edge ca
      real t = d2 / (d2 - d6);
      out.closest = a + t * ac;
      out.bary = {1 - t, 0, t};
      out.region = 3;
    } else {  // face interior
      real denom = va + vb + vc;
      real w1 = vb / denom, w2 = vc / denom;
      out.closest = a + w1 * ab + w2 * ac;
      out.bary = {1 - w1 - w2, w1, w2};
      out.region = 0;
      out.inside = true;
    }
  }

  real side = dot(p - a, n) >= 0 ? 1.0 : -1.0;
  if (out.inside) {
    out.d = dot(p - out.closest, n);
  } else {
    out.d = side * norm(p - out.closest);
  }
  return out;
}

Bary barycentric_weights(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  real d00 = dot(ab, ab), d01 = dot(ab, ac), d11 = dot(ac, ac);
  real d20 = dot(ap, ab), d21 = dot(ap, ac);
  real denom = d00 * d11 - d01 * d01;
  real w1 = (d11 * d20 - d01 * d21) / denom;
  real w2 = (d00 * d21 - d01 * d20) / denom;
  real w0 = 1 - w1 - w2;
  if (w0 >= -1e-9 && w1 >= -1e-9 && w2 >= -1e-9)
    return {w0, w1, w2, false};
  Vec3 n = normalized(cross(ab, ac));
  TriangleClosest tc = point_triangle_signed_distance(p, a, b, c, n);
  return {tc.bary.x, tc.bary.y, tc.bary.z, true};
}

}  // namespace dt
