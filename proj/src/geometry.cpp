// Copyright 2026 The bevquery Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bevquery/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace bevquery {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Vertices within this distance of a clip edge count as inside; output
// vertices closer than this are merged.
constexpr double kClipEps = 1e-12;

// Fixed-capacity polygon used by the clipping hot path. Two convex inputs
// with n and m vertices intersect in at most n + m vertices.
struct PolyBuf {
  static constexpr int kCapacity = 40;
  Vec2 v[kCapacity];
  int n = 0;

  void push(const Vec2 & p)
  {
    if (n >= kCapacity) {
      throw std::length_error("convex clip buffer overflow");
    }
    v[n++] = p;
  }
};

Vec2 edge_intersection(const Vec2 & a, const Vec2 & b, double side_a, double side_b)
{
  const double t = side_a / (side_a - side_b);
  return a + (b - a) * t;
}

// Clips `in` against the half-plane left of the directed edge e1 -> e2.
void clip_half_plane(const PolyBuf & in, const Vec2 & e1, const Vec2 & e2, PolyBuf & out)
{
  out.n = 0;
  if (in.n == 0) {
    return;
  }
  const Vec2 dir = e2 - e1;
  const Vec2 * prev = &in.v[in.n - 1];
  double side_prev = cross(dir, *prev - e1);
  for (int i = 0; i < in.n; ++i) {
    const Vec2 & cur = in.v[i];
    const double side_cur = cross(dir, cur - e1);
    const bool inside_prev = side_prev >= -kClipEps;
    const bool inside_cur = side_cur >= -kClipEps;
    if (inside_cur) {
      if (!inside_prev) {
        out.push(edge_intersection(*prev, cur, side_prev, side_cur));
      }
      out.push(cur);
    } else if (inside_prev) {
      out.push(edge_intersection(*prev, cur, side_prev, side_cur));
    }
    prev = &cur;
    side_prev = side_cur;
  }
}

void merge_duplicate_vertices(PolyBuf & poly)
{
  if (poly.n < 2) {
    return;
  }
  int m = 0;
  for (int i = 0; i < poly.n; ++i) {
    const Vec2 & next = poly.v[(i + 1) % poly.n];
    const Vec2 & cur = poly.v[i];
    if (std::abs(cur.x - next.x) <= kClipEps && std::abs(cur.y - next.y) <= kClipEps) {
      continue;
    }
    poly.v[m++] = cur;
  }
  poly.n = m;
}

double shoelace_area(const Vec2 * v, int n)
{
  if (n < 3) {
    return 0.0;
  }
  double twice = 0.0;
  for (int i = 0; i < n; ++i) {
    twice += cross(v[i], v[(i + 1) % n]);
  }
  return 0.5 * twice;
}

// Lexicographic polygon order (size, then vertex coordinates); used to
// canonicalize the clip operand order so intersection is exactly symmetric.
bool polygon_less(const PolyBuf & a, const PolyBuf & b)
{
  if (a.n != b.n) {
    return a.n < b.n;
  }
  for (int i = 0; i < a.n; ++i) {
    if (a.v[i].x != b.v[i].x) {
      return a.v[i].x < b.v[i].x;
    }
    if (a.v[i].y != b.v[i].y) {
      return a.v[i].y < b.v[i].y;
    }
  }
  return false;
}

double clip_area(const PolyBuf & a, const PolyBuf & b)
{
  const PolyBuf * subject = &a;
  const PolyBuf * clip = &b;
  if (polygon_less(b, a)) {
    std::swap(subject, clip);
  }
  PolyBuf work = *subject;
  PolyBuf scratch;
  for (int i = 0; i < clip->n && work.n > 0; ++i) {
    clip_half_plane(work, clip->v[i], clip->v[(i + 1) % clip->n], scratch);
    std::swap(work, scratch);
  }
  merge_duplicate_vertices(work);
  return std::max(0.0, shoelace_area(work.v, work.n));
}

PolyBuf box_poly(const OrientedBoxBEV & box)
{
  const double c = std::cos(box.yaw);
  const double s = std::sin(box.yaw);
  const double hl = 0.5 * box.length;
  const double hw = 0.5 * box.width;
  PolyBuf poly;
  poly.n = 4;
  // CCW, starting at the front-left corner; length runs along the heading.
  poly.v[0] = {box.cx + c * hl - s * hw, box.cy + s * hl + c * hw};
  poly.v[1] = {box.cx - c * hl - s * hw, box.cy - s * hl + c * hw};
  poly.v[2] = {box.cx - c * hl + s * hw, box.cy - s * hl - c * hw};
  poly.v[3] = {box.cx + c * hl + s * hw, box.cy + s * hl - c * hw};
  return poly;
}

}  // namespace

double normalize_angle(double angle)
{
  double a = std::fmod(angle, 2.0 * kPi);
  if (a <= -kPi) {
    a += 2.0 * kPi;
  } else if (a > kPi) {
    a -= 2.0 * kPi;
  }
  return a;
}

Pose2D compose(const Pose2D & a, const Pose2D & b)
{
  const Vec2 t = a.apply({b.tx, b.ty});
  return {t.x, t.y, normalize_angle(a.theta + b.theta)};
}

Pose2D inverse(const Pose2D & p)
{
  const double c = std::cos(p.theta);
  const double s = std::sin(p.theta);
  return {-(c * p.tx + s * p.ty), -(-s * p.tx + c * p.ty), normalize_angle(-p.theta)};
}

OrientedBoxBEV::OrientedBoxBEV(double cx, double cy, double width, double length, double yaw)
: OrientedBoxBEV(cx, cy, 0.0, width, length, 0.0, yaw)
{
}

OrientedBoxBEV::OrientedBoxBEV(
  double cx, double cy, double z, double width, double length, double height, double yaw,
  double vx, double vy)
: cx(cx), cy(cy), width(width), length(length), yaw(normalize_angle(yaw)), z(z), height(height),
  vx(vx), vy(vy)
{
  if (!(width > 0.0) || !(length > 0.0)) {
    throw std::invalid_argument("box width and length must be positive");
  }
  if (height != 0.0 && !(height > 0.0)) {
    throw std::invalid_argument("box height must be positive when present");
  }
}

double ConvexPolygon::area() const
{
  return shoelace_area(vertices.data(), static_cast<int>(vertices.size()));
}

bool ConvexPolygon::is_convex_ccw(double eps) const
{
  const int n = static_cast<int>(vertices.size());
  if (n < 3) {
    return false;
  }
  for (int i = 0; i < n; ++i) {
    const Vec2 e0 = vertices[(i + 1) % n] - vertices[i];
    const Vec2 e1 = vertices[(i + 2) % n] - vertices[(i + 1) % n];
    if (cross(e0, e1) < -eps) {
      return false;
    }
  }
  return true;
}

ConvexPolygon box_corners(const OrientedBoxBEV & box)
{
  const PolyBuf poly = box_poly(box);
  ConvexPolygon out;
  out.vertices.assign(poly.v, poly.v + poly.n);
  return out;
}

double convex_intersection_area(const ConvexPolygon & a, const ConvexPolygon & b)
{
  PolyBuf pa;
  for (const Vec2 & v : a.vertices) {
    pa.push(v);
  }
  PolyBuf pb;
  for (const Vec2 & v : b.vertices) {
    pb.push(v);
  }
  return clip_area(pa, pb);
}

double rotated_iou(const OrientedBoxBEV & a, const OrientedBoxBEV & b)
{
  const PolyBuf pa = box_poly(a);
  const PolyBuf pb = box_poly(b);
  const double intersection = clip_area(pa, pb);
  const double area_a = shoelace_area(pa.v, pa.n);
  const double area_b = shoelace_area(pb.v, pb.n);
  const double union_area = area_a + area_b - intersection;
  if (union_area <= 0.0) {
    return 0.0;
  }
  return std::clamp(intersection / union_area, 0.0, 1.0);
}

OrientedBoxBEV scale_box(const OrientedBoxBEV & box, double factor)
{
  if (!(factor > 0.0)) {
    throw std::invalid_argument("scale factor must be positive");
  }
  OrientedBoxBEV out = box;
  out.width *= factor;
  out.length *= factor;
  return out;
}

OrientedBoxBEV transform_box(const OrientedBoxBEV & box, const Pose2D & pose)
{
  const double c = std::cos(pose.theta);
  const double s = std::sin(pose.theta);
  OrientedBoxBEV out = box;
  const Vec2 center = pose.apply({box.cx, box.cy});
  out.cx = center.x;
  out.cy = center.y;
  out.yaw = normalize_angle(box.yaw + pose.theta);
  out.vx = c * box.vx - s * box.vy;
  out.vy = s * box.vx + c * box.vy;
  return out;
}

}  // namespace bevquery
