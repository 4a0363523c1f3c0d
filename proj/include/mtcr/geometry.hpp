#pragma once

#include <vector>

namespace mtcr::geom {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

/// Open ring: the closing vertex is implicit.
using Ring = std::vector<Point>;

struct Polygon {
  Ring outer;
  std::vector<Ring> holes;
};

struct Box {
  double min_x, min_y, max_x, max_y;

  bool touches(const Box& o, double tol) const {
    return min_x <= o.max_x + tol && o.min_x <= max_x + tol && min_y <= o.max_y + tol && o.min_y <= max_y + tol;
  }
};

double signed_area(const Ring& ring);
double area(const Polygon& poly);
double area(const std::vector<Polygon>& parts);

Box bounds(const std::vector<Polygon>& parts);

/// Sutherland-Hodgman against an axis-aligned box. The subject may be
/// concave; the result's |signed area| equals the overlap area.
Ring clip_to_box(const Ring& ring, const Box& box);

/// Overlap area of a multipolygon with an axis-aligned box.
double overlap_area(const std::vector<Polygon>& parts, const Box& box);

/// Keeps the part of a convex ring where a*x + b*y <= c.
Ring clip_halfplane(const Ring& ring, double a, double b, double c);

/// Total length along which two boundaries coincide (collinear overlap of
/// their edges). Point-only contact contributes zero.
double shared_boundary_length(const std::vector<Polygon>& a, const std::vector<Polygon>& b, double tol);

/// Even-odd point-in-polygon over all rings.
bool contains(const std::vector<Polygon>& parts, Point p);

}  // namespace mtcr::geom
