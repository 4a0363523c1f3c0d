#include "mtcr/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtcr::geom {

double signed_area(const Ring& ring) {
  const std::size_t n = ring.size();
  if (n < 3) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Point& p = ring[i];
    const Point& q = ring[(i + 1) % n];
    s += p.x * q.y - q.x * p.y;
  }
  return 0.5 * s;
}

double area(const Polygon& poly) {
  double a = std::abs(signed_area(poly.outer));
  for (const auto& h : poly.holes) a -= std::abs(signed_area(h));
  return a;
}

double area(const std::vector<Polygon>& parts) {
  double a = 0.0;
  for (const auto& p : parts) a += area(p);
  return a;
}

Box bounds(const std::vector<Polygon>& parts) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  Box b{inf, inf, -inf, -inf};
  for (const auto& poly : parts) {
    for (const Point& p : poly.outer) {
      b.min_x = std::min(b.min_x, p.x);
      b.min_y = std::min(b.min_y, p.y);
      b.max_x = std::max(b.max_x, p.x);
      b.max_y = std::max(b.max_y, p.y);
    }
  }
  return b;
}

namespace {

template <typename Inside, typename Cross>
Ring clip_edge(const Ring& in, Inside inside, Cross cross) {
  Ring out;
  const std::size_t n = in.size();
  if (n == 0) return out;
  out.reserve(n + 4);
  for (std::size_t i = 0; i < n; ++i) {
    const Point& cur = in[i];
    const Point& prev = in[(i + n - 1) % n];
    const bool cur_in = inside(cur);
    const bool prev_in = inside(prev);
    if (cur_in) {
      if (!prev_in) out.push_back(cross(prev, cur));
      out.push_back(cur);
    } else if (prev_in) {
      out.push_back(cross(prev, cur));
    }
  }
  return out;
}

Point lerp_x(const Point& a, const Point& b, double x) {
  const double t = (x - a.x) / (b.x - a.x);
  return {x, a.y + t * (b.y - a.y)};
}

Point lerp_y(const Point& a, const Point& b, double y) {
  const double t = (y - a.y) / (b.y - a.y);
  return {a.x + t * (b.x - a.x), y};
}

}  // namespace

Ring clip_to_box(const Ring& ring, const Box& box) {
  Ring r = clip_edge(
      ring, [&](const Point& p) { return p.x >= box.min_x; },
      [&](const Point& a, const Point& b) { return lerp_x(a, b, box.min_x); });
  r = clip_edge(
      r, [&](const Point& p) { return p.x <= box.max_x; },
      [&](const Point& a, const Point& b) { return lerp_x(a, b, box.max_x); });
  r = clip_edge(
      r, [&](const Point& p) { return p.y >= box.min_y; },
      [&](const Point& a, const Point& b) { return lerp_y(a, b, box.min_y); });
  r = clip_edge(
      r, [&](const Point& p) { return p.y <= box.max_y; },
      [&](const Point& a, const Point& b) { return lerp_y(a, b, box.max_y); });
  return r;
}

double overlap_area(const std::vector<Polygon>& parts, const Box& box) {
  double a = 0.0;
  for (const auto& poly : parts) {
    a += std::abs(signed_area(clip_to_box(poly.outer, box)));
    for (const auto& h : poly.holes) a -= std::abs(signed_area(clip_to_box(h, box)));
  }
  return std::max(a, 0.0);
}

Ring clip_halfplane(const Ring& ring, double a, double b, double c) {
  return clip_edge(
      ring, [&](const Point& p) { return a * p.x + b * p.y <= c; },
      [&](const Point& p, const Point& q) {
        const double fp = a * p.x + b * p.y - c;
        const double fq = a * q.x + b * q.y - c;
        const double t = fp / (fp - fq);
        return Point{p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
      });
}

namespace {

struct Segment {
  Point a, b;
};

std::vector<Segment> edges(const std::vector<Polygon>& parts) {
  std::vector<Segment> out;
  const auto add_ring = [&](const Ring& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out.push_back({r[i], r[(i + 1) % r.size()]});
  };
  for (const auto& p : parts) {
    add_ring(p.outer);
    for (const auto& h : p.holes) add_ring(h);
  }
  return out;
}

double collinear_overlap(const Segment& s, const Segment& t, double tol) {
  const double dx = s.b.x - s.a.x, dy = s.b.y - s.a.y;
  const double len = std::hypot(dx, dy);
  if (len <= tol) return 0.0;
  const double ux = dx / len, uy = dy / len;
  const auto perp = [&](const Point& p) { return std::abs((p.x - s.a.x) * uy - (p.y - s.a.y) * ux); };
  if (perp(t.a) > tol || perp(t.b) > tol) return 0.0;
  const double p0 = (t.a.x - s.a.x) * ux + (t.a.y - s.a.y) * uy;
  const double p1 = (t.b.x - s.a.x) * ux + (t.b.y - s.a.y) * uy;
  const double lo = std::max(0.0, std::min(p0, p1));
  const double hi = std::min(len, std::max(p0, p1));
  return hi - lo > tol ? hi - lo : 0.0;
}

}  // namespace

double shared_boundary_length(const std::vector<Polygon>& a, const std::vector<Polygon>& b, double tol) {
  const auto ea = edges(a);
  const auto eb = edges(b);
  double total = 0.0;
  for (const auto& s : ea) {
    const double sx0 = std::min(s.a.x, s.b.x) - tol, sx1 = std::max(s.a.x, s.b.x) + tol;
    const double sy0 = std::min(s.a.y, s.b.y) - tol, sy1 = std::max(s.a.y, s.b.y) + tol;
    for (const auto& t : eb) {
      if (std::max(t.a.x, t.b.x) < sx0 || std::min(t.a.x, t.b.x) > sx1) continue;
      if (std::max(t.a.y, t.b.y) < sy0 || std::min(t.a.y, t.b.y) > sy1) continue;
      total += collinear_overlap(s, t, tol);
    }
  }
  return total;
}

bool contains(const std::vector<Polygon>& parts, Point p) {
  bool inside = false;
  const auto ring_test = [&](const Ring& r) {
    const std::size_t n = r.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      if ((r[i].y > p.y) != (r[j].y > p.y) &&
          p.x < (r[j].x - r[i].x) * (p.y - r[i].y) / (r[j].y - r[i].y) + r[i].x) {
        inside = !inside;
      }
    }
  };
  for (const auto& poly : parts) {
    ring_test(poly.outer);
    for (const auto& h : poly.holes) ring_test(h);
  }
  return inside;
}

}  // namespace mtcr::geom
