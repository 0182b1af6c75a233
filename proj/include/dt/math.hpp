// Small fixed-size linear algebra shared by all physics modules.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace dt {

using real = double;

struct Vec3 {
  real x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(real x_, real y_, real z_) : x(x_), y(y_), z(z_) {}

  real& operator[](int i) { return (&x)[i]; }
  real operator[](int i) const { return (&x)[i]; }

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator-() const { return {-x, -y, -z}; }
  Vec3 operator*(real s) const { return {x * s, y * s, z * s}; }
  Vec3 operator/(real s) const { return {x / s, y / s, z / s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  Vec3& operator*=(real s) { x *= s; y *= s; z *= s; return *this; }
};

inline Vec3 operator*(real s, const Vec3& v) { return v * s; }
inline real dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline real norm_sq(const Vec3& v) { return dot(v, v); }
inline real norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline Vec3 normalized(const Vec3& v) { return v / norm(v); }

// Row-major 3x3.
struct Mat3 {
  std::array<real, 9> m{};

  Mat3() = default;
  Mat3(real a00, real a01, real a02,
       real a10, real a11, real a12,
       real a20, real a21, real a22)
      : m{a00, a01, a02, a10, a11, a12, a20, a21, a22} {}

  static Mat3 identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }
  static Mat3 zero() { return {}; }
  static Mat3 diag(real a, real b, real c) { return {a, 0, 0, 0, b, 0, 0, 0, c}; }
  static Mat3 diag(const Vec3& d) { return diag(d.x, d.y, d.z); }
  // Outer product a b^T.
  static Mat3 outer(const Vec3& a, const Vec3& b) {
    return {a.x * b.x, a.x * b.y, a.x * b.z,
            a.y * b.x, a.y * b.y, a.y * b.z,
            a.z * b.x, a.z * b.y, a.z * b.z};
  }

  real& operator()(int r, int c) { return m[3 * r + c]; }
  real operator()(int r, int c) const { return m[3 * r + c]; }

  Vec3 row(int r) const { return {m[3 * r], m[3 * r + 1], m[3 * r + 2]}; }
  Vec3 col(int c) const { return {m[c], m[c + 3], m[c + 6]}; }
  void set_col(int c, const Vec3& v) { m[c] = v.x; m[c + 3] = v.y; m[c + 6] = v.z; }

  Mat3 operator+(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; i++) r.m[i] = m[i] + o.m[i];
    return r;
  }
  Mat3 operator-(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 9; i++) r.m[i] = m[i] - o.m[i];
    return r;
  }
  Mat3 operator*(real s) const {
    Mat3 r;
    for (int i = 0; i < 9; i++) r.m[i] = m[i] * s;
    return r;
  }
  Mat3& operator+=(const Mat3& o) {
    for (int i = 0; i < 9; i++) m[i] += o.m[i];
    return *this;
  }
  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; i++)
      for (int j = 0; j < 3; j++) {
        real s = 0;
        for (int k = 0; k < 3; k++) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }
};

inline Mat3 operator*(real s, const Mat3& a) { return a * s; }
inline Mat3 transpose(const Mat3& a) {
  return {a.m[0], a.m[3], a.m[6], a.m[1], a.m[4], a.m[7], a.m[2], a.m[5], a.m[8]};
}
inline real det(const Mat3& a) {
  return a.m[0] * (a.m[4] * a.m[8] - a.m[5] * a.m[7]) -
         a.m[1] * (a.m[3] * a.m[8] - a.m[5] * a.m[6]) +
         a.m[2] * (a.m[3] * a.m[7] - a.m[4] * a.m[6]);
}
inline real trace(const Mat3& a) { return a.m[0] + a.m[4] + a.m[8]; }
// Frobenius inner product A:B.
inline real ddot(const Mat3& a, const Mat3& b) {
  real s = 0;
  for (int i = 0; i < 9; i++) s += a.m[i] * b.m[i];
  return s;
}
inline real frobenius_norm(const Mat3& a) { return std::sqrt(ddot(a, a)); }

inline Mat3 inverse(const Mat3& a) {
  real d = det(a);
  Mat3 r;
  r.m[0] = (a.m[4] * a.m[8] - a.m[5] * a.m[7]) / d;
  r.m[1] = (a.m[2] * a.m[7] - a.m[1] * a.m[8]) / d;
  r.m[2] = (a.m[1] * a.m[5] - a.m[2] * a.m[4]) / d;
  r.m[3] = (a.m[5] * a.m[6] - a.m[3] * a.m[8]) / d;
  r.m[4] = (a.m[0] * a.m[8] - a.m[2] * a.m[6]) / d;
  r.m[5] = (a.m[2] * a.m[3] - a.m[0] * a.m[5]) / d;
  r.m[6] = (a.m[3] * a.m[7] - a.m[4] * a.m[6]) / d;
  r.m[7] = (a.m[1] * a.m[6] - a.m[0] * a.m[7]) / d;
  r.m[8] = (a.m[0] * a.m[4] - a.m[1] * a.m[3]) / d;
  return r;
}

struct Svd3 {
  Mat3 U;
  Vec3 sigma;  // descending; last entry may be negative for reflections
  Mat3 V;
};

// Jacobi-based 3x3 SVD. U, V are rotations (det +1); any reflection sign is
// folded into sigma.z. Reconstruction U diag(sigma) V^T accurate to ~1e-12.
Svd3 svd3(const Mat3& a);

// Best-fit rotation R = U V^T. det(input) must exceed 1e-12.
Mat3 polar_rotation(const Mat3& a);

// Rotation about unit axis by angle (Rodrigues).
Mat3 axis_angle(const Vec3& axis, real angle);

struct TriangleClosest {
  real d = 0;        // signed distance along the face normal
  Vec3 closest;      // closest point on the triangle
  Vec3 bary;         // barycentric weights of the closest point
  bool inside = false;  // closest point projects strictly inside the face
  int region = 0;    // 0 face, 1..3 edge (01,12,20), 4..6 vertex
};

// Signed distance from p to triangle (a,b,c) with outward unit normal n.
// d < 0 iff p lies behind the face along -n.
TriangleClosest point_triangle_signed_distance(const Vec3& p, const Vec3& a,
                                               const Vec3& b, const Vec3& c,
                                               const Vec3& n);

struct Bary {
  real w0, w1, w2;
  bool clamped;  // p projected outside the triangle, weights clamped
};

// Barycentric weights of the in-plane projection of p.
Bary barycentric_weights(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

}  // namespace dt
