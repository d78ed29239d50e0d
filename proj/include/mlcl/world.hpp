#pragma once

// Synthetic mobility: Manhattan grid road networks, shortest-path driving,
// ground-truth trace CSV import/export and train/test vehicle splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <queue>
#include <sstream>
#include <string>
#include <system_error>
#include <tuple>
#include <utility>
#include <vector>

#include "mlcl/errors.hpp"
#include "mlcl/geometry.hpp"
#include "mlcl/rng.hpp"

namespace mlcl {

struct Segment {
  int a = 0;
  int b = 0;
  double speed_limit = 0.0;  // m/s
};

struct BoundingBox {
  Vec2 min;
  Vec2 max;

  bool contains(Vec2 p, double tol = 1e-9) const {
    return p.x >= min.x - tol && p.x <= max.x + tol && p.y >= min.y - tol && p.y <= max.y + tol;
  }
};

struct RoadNetwork {
  std::vector<Vec2> junctions;
  std::vector<Segment> segments;
  BoundingBox extent;

  double max_speed() const {
    double v = 0.0;
    for (const auto& s : segments) v = std::max(v, s.speed_limit);
    return v;
  }
};

struct Pose {
  Vec2 pos;
  double heading = 0.0;  // radians, (-pi, pi]
};

struct VehicleTrack {
  int id = 0;
  std::vector<Pose> poses;  // one per timestep
};

/// Ground-truth trajectories. Every track has the same number of samples.
struct TraceSet {
  double dt = 1.0;
  std::vector<VehicleTrack> vehicles;

  std::size_t steps() const { return vehicles.empty() ? 0 : vehicles.front().poses.size(); }
};

/// Junction (r, c) sits at (c * spacing, r * spacing) with index r * cols + c.
/// Horizontal segments are listed first, then vertical ones.
inline RoadNetwork generate_grid_network(int rows, int cols, double spacing, double speed_limit) {
  if (rows < 2 || cols < 2) throw ConfigError("grid network needs rows >= 2 and cols >= 2");
  if (!(spacing > 0.0)) throw ConfigError("grid spacing must be positive");
  if (!(speed_limit > 0.0)) throw ConfigError("speed limit must be positive");

  RoadNetwork net;
  net.junctions.reserve(static_cast<std::size_t>(rows * cols));
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) net.junctions.push_back({c * spacing, r * spacing});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c) net.segments.push_back({r * cols + c, r * cols + c + 1, speed_limit});
  for (int r = 0; r + 1 < rows; ++r)
    for (int c = 0; c < cols; ++c) net.segments.push_back({r * cols + c, (r + 1) * cols + c, speed_limit});
  net.extent = {{0.0, 0.0}, {(cols - 1) * spacing, (rows - 1) * spacing}};
  return net;
}

namespace detail {

struct Edge {
  int to;
  int segment;
};

inline std::vector<std::vector<Edge>> adjacency(const RoadNetwork& net) {
  std::vector<std::vector<Edge>> adj(net.junctions.size());
  for (int s = 0; s < static_cast<int>(net.segments.size()); ++s) {
    const auto& seg = net.segments[static_cast<std::size_t>(s)];
    adj[static_cast<std::size_t>(seg.a)].push_back({seg.b, s});
    adj[static_cast<std::size_t>(seg.b)].push_back({seg.a, s});
  }
  return adj;
}

/// Fastest route (by free-flow travel time) as a junction sequence including
/// both endpoints. Ties resolve towards lower junction indices.
inline std::vector<int> shortest_route(const RoadNetwork& net, const std::vector<std::vector<Edge>>& adj,
                                       int from, int to) {
  const auto n = net.junctions.size();
  std::vector<double> cost(n, std::numeric_limits<double>::infinity());
  std::vector<int> prev(n, -1);
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> open;
  cost[static_cast<std::size_t>(from)] = 0.0;
  open.push({0.0, from});
  while (!open.empty()) {
    auto [c, u] = open.top();
    open.pop();
    if (c > cost[static_cast<std::size_t>(u)]) continue;
    if (u == to) break;
    for (const auto& e : adj[static_cast<std::size_t>(u)]) {
      const auto& seg = net.segments[static_cast<std::size_t>(e.segment)];
      const double len = distance(net.junctions[static_cast<std::size_t>(seg.a)],
                                  net.junctions[static_cast<std::size_t>(seg.b)]);
      const double nc = c + len / seg.speed_limit;
      if (nc < cost[static_cast<std::size_t>(e.to)]) {
        cost[static_cast<std::size_t>(e.to)] = nc;
        prev[static_cast<std::size_t>(e.to)] = u;
        open.push({nc, e.to});
      }
    }
  }
  if (from != to && prev[static_cast<std::size_t>(to)] < 0) throw ConfigError("road network is not connected");
  std::vector<int> route;
  for (int v = to; v != -1; v = prev[static_cast<std::size_t>(v)]) route.push_back(v);
  std::reverse(route.begin(), route.end());
  return route;
}

inline double segment_speed(const RoadNetwork& net, const std::vector<std::vector<Edge>>& adj, int a, int b) {
  for (const auto& e : adj[static_cast<std::size_t>(a)])
    if (e.to == b) return net.segments[static_cast<std::size_t>(e.segment)].speed_limit;
  throw ConfigError("route uses a missing segment");
}

class Driver {
 public:
  Driver(const RoadNetwork& net, const std::vector<std::vector<Edge>>& adj, Rng& rng)
      : net_(net), adj_(adj), rng_(rng) {
    const int start = static_cast<int>(rng_.below(net_.junctions.size()));
    speed_factor_ = rng_.uniform(0.8, 1.0);
    plan_from(start);
  }

  Vec2 position() const {
    const Vec2 a = junction(route_[leg_]);
    const Vec2 b = junction(route_[leg_ + 1]);
    const double len = distance(a, b);
    return len > 0.0 ? a + (progress_ / len) * (b - a) : a;
  }

  double direction() const { return bearing_of(junction(route_[leg_ + 1]) - junction(route_[leg_])); }

  void advance(double dt) {
    double remaining = dt;
    while (remaining > 0.0) {
      const double len = distance(junction(route_[leg_]), junction(route_[leg_ + 1]));
      const double v = speed_factor_ * segment_speed(net_, adj_, route_[leg_], route_[leg_ + 1]);
      const double left = len - progress_;
      if (v * remaining < left) {
        progress_ += v * remaining;
        return;
      }
      remaining -= left / v;
      progress_ = 0.0;
      ++leg_;
      if (leg_ + 1 >= route_.size()) plan_from(route_.back());
    }
  }

 private:
  Vec2 junction(int i) const { return net_.junctions[static_cast<std::size_t>(i)]; }

  void plan_from(int start) {
    const auto n = net_.junctions.size();
    int dest = start;
    while (dest == start) dest = static_cast<int>(rng_.below(n));
    route_ = shortest_route(net_, adj_, start, dest);
    leg_ = 0;
    progress_ = 0.0;
  }

  const RoadNetwork& net_;
  const std::vector<std::vector<Edge>>& adj_;
  Rng& rng_;
  double speed_factor_ = 1.0;
  std::vector<int> route_;
  std::size_t leg_ = 0;
  double progress_ = 0.0;
};

}  // namespace detail

/// Drives `n_vehicles` along shortest-path routes between random junctions.
/// Sample k is taken at time k * dt for k = 0..floor(duration_s / dt).
/// Heading at k >= 1 is the direction of the displacement since k - 1 (held
/// when the vehicle did not move); at k = 0 it is the initial travel direction.
inline TraceSet simulate_traces(const RoadNetwork& net, int n_vehicles, double duration_s, double dt,
                                std::uint64_t seed) {
  if (n_vehicles < 1) throw ConfigError("n_vehicles must be >= 1");
  if (!(dt > 0.0) || duration_s < dt) throw ConfigError("need dt > 0 and duration >= dt");
  if (net.junctions.size() < 2) throw ConfigError("road network needs at least two junctions");

  const auto adj = detail::adjacency(net);
  const auto steps = static_cast<std::size_t>(std::floor(duration_s / dt + 1e-9));
  TraceSet traces;
  traces.dt = dt;
  traces.vehicles.reserve(static_cast<std::size_t>(n_vehicles));
  for (int v = 0; v < n_vehicles; ++v) {
    Rng rng(stream_key(seed, "vehicle", static_cast<std::uint64_t>(v)));
    detail::Driver driver(net, adj, rng);
    VehicleTrack track{v, {}};
    track.poses.reserve(steps + 1);
    track.poses.push_back({driver.position(), driver.direction()});
    for (std::size_t k = 1; k <= steps; ++k) {
      driver.advance(dt);
      const Vec2 p = driver.position();
      const Vec2 d = p - track.poses.back().pos;
      const double heading = norm(d) > 1e-9 ? bearing_of(d) : track.poses.back().heading;
      track.poses.push_back({p, heading});
    }
    traces.vehicles.push_back(std::move(track));
  }
  return traces;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

template <class T>
bool parse_number(const std::string& s, T& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && last[-1] == ' ') --last;
  if (first == last) return false;
  auto res = std::from_chars(first, last, out);
  return res.ec == std::errc{} && res.ptr == last;
}

}  // namespace detail

inline void save_traces(const TraceSet& traces, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "vehicle_id,t,x_m,y_m,heading_rad\n";
  for (const auto& v : traces.vehicles) {
    for (std::size_t t = 0; t < v.poses.size(); ++t) {
      const auto& p = v.poses[t];
      out << v.id << ',' << t << ',' << detail::format_double(p.pos.x) << ',' << detail::format_double(p.pos.y)
          << ',' << detail::format_double(p.heading) << '\n';
    }
  }
  if (!out) throw Error("write failed: " + path.string());
}

/// Reads a trace CSV. The file carries no timestep length, so `dt` is supplied
/// by the caller (datasets record it in their manifest).
inline TraceSet load_traces(const std::filesystem::path& path, double dt = 1.0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string file = path.string();
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(file, 1, "missing header");
  ++lineno;
  const auto header = detail::split_csv(line);
  const std::vector<std::string> expected{"vehicle_id", "t", "x_m", "y_m", "heading_rad"};
  if (header != expected) throw ParseError(file, lineno, "header must be vehicle_id,t,x_m,y_m,heading_rad");

  TraceSet traces;
  traces.dt = dt;
  auto close_vehicle = [&](std::size_t at_line) {
    if (traces.vehicles.empty()) return;
    const auto len = traces.vehicles.back().poses.size();
    if (traces.vehicles.size() > 1 && len != traces.vehicles.front().poses.size())
      throw ParseError(file, at_line,
                       "vehicle " + std::to_string(traces.vehicles.back().id) + " has " + std::to_string(len) +
                           " samples, expected " + std::to_string(traces.vehicles.front().poses.size()));
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 5) throw ParseError(file, lineno, "expected 5 columns, got " + std::to_string(f.size()));
    long long id = 0;
    long long t = 0;
    double x = 0, y = 0, h = 0;
    if (!detail::parse_number(f[0], id) || id < 0) throw ParseError(file, lineno, "bad vehicle_id '" + f[0] + "'");
    if (!detail::parse_number(f[1], t) || t < 0) throw ParseError(file, lineno, "bad timestep '" + f[1] + "'");
    if (!detail::parse_number(f[2], x) || !detail::parse_number(f[3], y) || !detail::parse_number(f[4], h) ||
        !std::isfinite(x) || !std::isfinite(y) || !std::isfinite(h))
      throw ParseError(file, lineno, "bad coordinate");
    if (traces.vehicles.empty() || traces.vehicles.back().id != id) {
      if (!traces.vehicles.empty() && id < traces.vehicles.back().id)
        throw ParseError(file, lineno, "rows not sorted by vehicle_id");
      close_vehicle(lineno);
      traces.vehicles.push_back({static_cast<int>(id), {}});
    }
    auto& track = traces.vehicles.back();
    if (static_cast<std::size_t>(t) != track.poses.size())
      throw ParseError(file, lineno,
                       "non-monotone timestep " + std::to_string(t) + ", expected " +
                           std::to_string(track.poses.size()));
    track.poses.push_back({{x, y}, h});
  }
  close_vehicle(lineno);
  if (traces.vehicles.empty()) throw ParseError(file, lineno, "no trace rows");
  return traces;
}

/// Random disjoint partition into (train, test). The train part has
/// round(n * train_fraction) vehicles, clamped so neither part is empty.
/// Each part keeps ascending vehicle-id order.
inline std::pair<TraceSet, TraceSet> split_vehicles(const TraceSet& traces, double train_fraction,
                                                    std::uint64_t seed) {
  const auto n = traces.vehicles.size();
  if (n < 2) throw ConfigError("need at least two vehicles to split");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train_fraction must be in (0, 1)");
  auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * train_fraction));
  n_train = std::clamp<std::size_t>(n_train, 1, n - 1);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(stream_key(seed, "split"));
  rng.shuffle(order.begin(), order.end());
  std::sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::sort(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  TraceSet train{traces.dt, {}};
  TraceSet test{traces.dt, {}};
  for (std::size_t i = 0; i < n; ++i) (i < n_train ? train : test).vehicles.push_back(traces.vehicles[order[i]]);
  return {std::move(train), std::move(test)};
}

}  // namespace mlcl
