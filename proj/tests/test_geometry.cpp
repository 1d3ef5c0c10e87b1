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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "bevquery/geometry.hpp"
#include "oracles.hpp"

using namespace bevquery;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool same_vertex_set(const ConvexPolygon & a, const ConvexPolygon & b, double tol)
{
  if (a.vertices.size() != b.vertices.size()) {
    return false;
  }
  std::vector<bool> used(b.vertices.size(), false);
  for (const Vec2 & v : a.vertices) {
    bool found = false;
    for (std::size_t i = 0; i < b.vertices.size(); ++i) {
      if (!used[i] && std::abs(v.x - b.vertices[i].x) < tol &&
          std::abs(v.y - b.vertices[i].y) < tol) {
        used[i] = true;
        found = true;
        break;
      }
    }
    if (!found) {
      return false;
    }
  }
  return true;
}

double shoelace(const ConvexPolygon & poly)
{
  double twice = 0.0;
  const auto & v = poly.vertices;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Vec2 & p = v[i];
    const Vec2 & q = v[(i + 1) % v.size()];
    twice += p.x * q.y - p.y * q.x;
  }
  return 0.5 * twice;
}

}  // namespace

TEST_CASE("box_corners axis-aligned unit square")
{
  const ConvexPolygon poly = box_corners({0, 0, 1, 1, 0});
  REQUIRE(poly.vertices.size() == 4);
  ConvexPolygon expected;
  expected.vertices = {{0.5, 0.5}, {-0.5, 0.5}, {-0.5, -0.5}, {0.5, -0.5}};
  CHECK(same_vertex_set(poly, expected, 1e-12));
  CHECK(poly.is_convex_ccw());
}

TEST_CASE("box_corners quarter turn swaps the roles of width and length")
{
  const ConvexPolygon rotated = box_corners({0, 0, 1, 2, kPi / 2});
  const ConvexPolygon swapped = box_corners({0, 0, 2, 1, 0});
  CHECK(same_vertex_set(rotated, swapped, 1e-12));
}

TEST_CASE("box_corners area and invariants on random boxes")
{
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    const OrientedBoxBEV box = oracles::random_box(rng);
    const ConvexPolygon poly = box_corners(box);
    CHECK(poly.is_convex_ccw());
    const double area = shoelace(poly);
    CHECK(std::abs(area - box.area()) <= 1e-9 * box.area());

    OrientedBoxBEV wrapped = box;
    wrapped.yaw = normalize_angle(box.yaw + 2 * kPi);
    CHECK(same_vertex_set(box_corners(wrapped), poly, 1e-9));
  }
}

TEST_CASE("box construction enforces invariants")
{
  CHECK_THROWS_AS(OrientedBoxBEV(0, 0, -1, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(OrientedBoxBEV(0, 0, 1, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(OrientedBoxBEV(0, 0, 0, 1, 1, -2, 0), std::invalid_argument);
  const OrientedBoxBEV b(0, 0, 1, 1, 3 * kPi);
  CHECK(b.yaw == doctest::Approx(kPi).epsilon(1e-12));
  CHECK(b.yaw <= kPi);
  CHECK(b.yaw > -kPi);
}

TEST_CASE("convex_intersection_area basics")
{
  const ConvexPolygon unit = box_corners({0, 0, 1, 1, 0});
  CHECK(convex_intersection_area(unit, unit) == doctest::Approx(1.0).epsilon(1e-12));

  const ConvexPolygon far_square = box_corners({10, 0, 1, 1, 0});
  CHECK(convex_intersection_area(unit, far_square) == 0.0);

  const ConvexPolygon rotated = box_corners({0, 0, 1, 1, kPi / 4});
  const double octagon = 2.0 * (std::sqrt(2.0) - 1.0);
  CHECK(std::abs(convex_intersection_area(unit, rotated) - octagon) < 1e-9);
  CHECK(
    std::abs(oracles::rasterized_intersection_area({0, 0, 1, 1, 0}, {0, 0, 1, 1, kPi / 4}) -
             octagon) < 1e-3);
}

TEST_CASE("convex_intersection_area is symmetric and bounded")
{
  std::mt19937_64 rng(23);
  for (int i = 0; i < 500; ++i) {
    const OrientedBoxBEV a = oracles::random_box(rng, 3.0, 0.5, 4.0);
    const OrientedBoxBEV b = oracles::random_box(rng, 3.0, 0.5, 4.0);
    const ConvexPolygon pa = box_corners(a);
    const ConvexPolygon pb = box_corners(b);
    const double ab = convex_intersection_area(pa, pb);
    const double ba = convex_intersection_area(pb, pa);
    CHECK(ab == ba);  // canonical operand order makes this exact
    CHECK(ab >= 0.0);
    CHECK(ab <= std::min(a.area(), b.area()) + 1e-9);
  }
}

TEST_CASE("rotated_iou identities")
{
  const OrientedBoxBEV box(1.5, -2.0, 1.8, 4.2, 0.7);
  CHECK(rotated_iou(box, box) == 1.0);

  // axis-aligned unit squares offset by half a side: overlap 0.5, union 1.5
  CHECK(rotated_iou({0, 0, 1, 1, 0}, {0.5, 0, 1, 1, 0}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // same region, yaw shifted by pi
  OrientedBoxBEV flipped = box;
  flipped.yaw = normalize_angle(box.yaw + kPi);
  CHECK(rotated_iou(box, flipped) == doctest::Approx(1.0).epsilon(1e-9));

  // same region, quarter turn with width/length swapped
  const OrientedBoxBEV swapped(1.5, -2.0, 4.2, 1.8, normalize_angle(0.7 + kPi / 2));
  CHECK(rotated_iou(box, swapped) == doctest::Approx(1.0).epsilon(1e-9));

  // shared edge, zero-area intersection
  CHECK(rotated_iou({0, 0, 1, 1, 0}, {1, 0, 1, 1, 0}) == 0.0);
}

TEST_CASE("rotated_iou matches the rasterization oracle")
{
  std::mt19937_64 rng(37);
  double max_err = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const OrientedBoxBEV a = oracles::random_box(rng);
    const OrientedBoxBEV b = oracles::random_box(rng);
    const double exact = rotated_iou(a, b);
    CHECK(exact >= 0.0);
    CHECK(exact <= 1.0);
    CHECK(exact == rotated_iou(b, a));
    max_err = std::max(max_err, std::abs(exact - oracles::rasterized_iou(a, b)));
  }
  CHECK(max_err < 1e-3);
}

TEST_CASE("rotated_iou is invariant under rigid transforms")
{
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> shift(-15.0, 15.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  for (int i = 0; i < 300; ++i) {
    const OrientedBoxBEV a = oracles::random_box(rng, 5.0, 0.5, 5.0);
    const OrientedBoxBEV b = oracles::random_box(rng, 5.0, 0.5, 5.0);
    const Pose2D pose(shift(rng), shift(rng), angle(rng));
    const double before = rotated_iou(a, b);
    const double after = rotated_iou(transform_box(a, pose), transform_box(b, pose));
    CHECK(std::abs(before - after) < 1e-9);
  }
}

TEST_CASE("intersection area is monotone as centers separate")
{
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  for (int trial = 0; trial < 50; ++trial) {
    const OrientedBoxBEV a = oracles::random_box(rng, 2.0, 0.5, 4.0);
    OrientedBoxBEV b = oracles::random_box(rng, 2.0, 0.5, 4.0);
    // start concentric: overlap of centrally symmetric convex bodies peaks
    // there and decays monotonically along any fixed pull-apart direction
    b.cx = a.cx;
    b.cy = a.cy;
    const double dir = angle(rng);
    const Vec2 step{0.2 * std::cos(dir), 0.2 * std::sin(dir)};
    double prev = convex_intersection_area(box_corners(a), box_corners(b));
    for (int i = 0; i < 40; ++i) {
      b.cx += step.x;
      b.cy += step.y;
      const double cur = convex_intersection_area(box_corners(a), box_corners(b));
      CHECK(cur <= prev + 1e-9);
      prev = cur;
    }
  }
}

TEST_CASE("scale_box")
{
  const OrientedBoxBEV box(3, 4, 1, 2, 0.3);
  const OrientedBoxBEV same = scale_box(box, 1.0);
  CHECK(same.width == box.width);
  CHECK(same.length == box.length);
  CHECK(same.cx == box.cx);

  const OrientedBoxBEV doubled = scale_box(box, 2.0);
  CHECK(doubled.width == doctest::Approx(2.0));
  CHECK(doubled.length == doctest::Approx(4.0));
  CHECK(doubled.cx == box.cx);
  CHECK(doubled.cy == box.cy);
  CHECK(doubled.yaw == box.yaw);

  CHECK_THROWS_AS(scale_box(box, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(scale_box(box, -2.0), std::invalid_argument);

  std::mt19937_64 rng(53);
  for (int i = 0; i < 200; ++i) {
    const OrientedBoxBEV a = oracles::random_box(rng, 3.0, 0.5, 4.0);
    const OrientedBoxBEV b = oracles::random_box(rng, 3.0, 0.5, 4.0);
    const double f = 0.5 + 2.0 * std::generate_canonical<double, 53>(rng);
    const double got = rotated_iou(scale_box(a, f), scale_box(b, f));
    const double oracle = oracles::rasterized_iou(scale_box(a, f), scale_box(b, f));
    CHECK(std::abs(got - oracle) < 1e-3);
  }
}

TEST_CASE("transform_box")
{
  const OrientedBoxBEV box(1, 1, 0.5, 1.2, 2.0, 1.5, 0.4, 2.0, -1.0);

  const OrientedBoxBEV same = transform_box(box, Pose2D{});
  CHECK(same.cx == doctest::Approx(box.cx));
  CHECK(same.cy == doctest::Approx(box.cy));
  CHECK(same.yaw == doctest::Approx(box.yaw));
  CHECK(same.vx == doctest::Approx(box.vx));

  const OrientedBoxBEV moved = transform_box(box, Pose2D{3, -1, 0});
  CHECK(moved.cx == doctest::Approx(4.0));
  CHECK(moved.cy == doctest::Approx(0.0));
  CHECK(moved.yaw == doctest::Approx(box.yaw));

  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> shift(-10.0, 10.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  for (int i = 0; i < 300; ++i) {
    const OrientedBoxBEV a = oracles::random_box(rng);
    const Pose2D pose(shift(rng), shift(rng), angle(rng));
    const OrientedBoxBEV back = transform_box(transform_box(a, pose), inverse(pose));
    CHECK(std::abs(back.cx - a.cx) < 1e-9);
    CHECK(std::abs(back.cy - a.cy) < 1e-9);
    CHECK(std::abs(normalize_angle(back.yaw - a.yaw)) < 1e-9);
    CHECK(std::abs(back.vx - a.vx) < 1e-9);
    CHECK(std::abs(back.vy - a.vy) < 1e-9);
    CHECK(back.width == a.width);
    CHECK(back.length == a.length);
  }
}

TEST_CASE("pose composition")
{
  std::mt19937_64 rng(67);
  std::uniform_real_distribution<double> shift(-10.0, 10.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  for (int i = 0; i < 200; ++i) {
    const Pose2D p(shift(rng), shift(rng), angle(rng));
    const Pose2D id = compose(p, inverse(p));
    CHECK(std::abs(id.tx) < 1e-12);
    CHECK(std::abs(id.ty) < 1e-12);
    CHECK(std::abs(id.theta) < 1e-12);

    // composition applies the right-hand pose first
    const Pose2D q(shift(rng), shift(rng), angle(rng));
    const Vec2 point{shift(rng), shift(rng)};
    const Vec2 via = q.apply(p.apply(point));
    const Vec2 direct = compose(q, p).apply(point);
    CHECK(std::abs(via.x - direct.x) < 1e-9);
    CHECK(std::abs(via.y - direct.y) < 1e-9);
  }
}
