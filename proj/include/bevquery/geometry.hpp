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

#pragma once

#include <cmath>
#include <vector>

namespace bevquery {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2() = default;
  Vec2(double px, double py) : x(px), y(py) {}

  Vec2 operator+(const Vec2 & p) const { return {x + p.x, y + p.y}; }
  Vec2 operator-(const Vec2 & p) const { return {x - p.x, y - p.y}; }
  Vec2 operator*(double c) const { return {x * c, y * c}; }
};

inline double dot(const Vec2 & a, const Vec2 & b) { return a.x * b.x + a.y * b.y; }
inline double cross(const Vec2 & a, const Vec2 & b) { return a.x * b.y - a.y * b.x; }

/// Wraps an angle into (-pi, pi].
double normalize_angle(double angle);

/// Rigid 2D transform: rotate by theta, then translate by (tx, ty).
struct Pose2D {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;

  Pose2D() = default;
  Pose2D(double px, double py, double ptheta) : tx(px), ty(py), theta(ptheta) {}

  Vec2 apply(const Vec2 & p) const
  {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    return {c * p.x - s * p.y + tx, s * p.x + c * p.y + ty};
  }
};

/// compose(a, b) applies b first, then a.
Pose2D compose(const Pose2D & a, const Pose2D & b);
Pose2D inverse(const Pose2D & p);

/// Planar rotated rectangle in the BEV plane. `length` extends along the
/// heading axis (yaw), `width` across it. z/height/vx/vy are optional 3D and
/// motion extensions that ride along untouched by the planar operations;
/// height 0 means "no vertical extent assigned".
struct OrientedBoxBEV {
  double cx = 0.0;
  double cy = 0.0;
  double width = 1.0;
  double length = 1.0;
  double yaw = 0.0;
  double z = 0.0;
  double height = 0.0;
  double vx = 0.0;
  double vy = 0.0;

  OrientedBoxBEV() = default;
  OrientedBoxBEV(double cx, double cy, double width, double length, double yaw);
  OrientedBoxBEV(
    double cx, double cy, double z, double width, double length, double height, double yaw,
    double vx = 0.0, double vy = 0.0);

  double area() const { return width * length; }
  double half_diagonal() const { return 0.5 * std::hypot(width, length); }
};

/// Convex polygon, vertices in counter-clockwise order.
struct ConvexPolygon {
  std::vector<Vec2> vertices;

  double area() const;
  bool is_convex_ccw(double eps = 1e-12) const;
};

/// The 4 corners of a box as a CCW polygon.
ConvexPolygon box_corners(const OrientedBoxBEV & box);

/// Exact area of the intersection of two convex CCW polygons
/// (half-plane clipping + shoelace). Symmetric in its arguments.
double convex_intersection_area(const ConvexPolygon & a, const ConvexPolygon & b);

/// Rotated IoU of two boxes in the BEV plane, in [0, 1].
double rotated_iou(const OrientedBoxBEV & a, const OrientedBoxBEV & b);

/// Multiplies width and length by `factor` (> 0); everything else unchanged.
OrientedBoxBEV scale_box(const OrientedBoxBEV & box, double factor);

/// Applies the rigid transform to center, yaw and velocity; dims unchanged.
OrientedBoxBEV transform_box(const OrientedBoxBEV & box, const Pose2D & pose);

}  // namespace bevquery
