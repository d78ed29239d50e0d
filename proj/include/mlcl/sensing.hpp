#pragma once

// Measurement synthesis (GNSS-like internal fixes, range/bearing external
// observations), per-timestep measurement/communication graphs with random
// link failures, and the Episode container plus its JSON-lines format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "mlcl/errors.hpp"
#include "mlcl/geometry.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/world.hpp"

namespace mlcl {

enum class BearingFrame { global, ego };

struct NoiseConfig {
  double sigma_gnss = 10.0;                       // m, per axis
  double sigma_range = 3.0;                       // m
  double sigma_bearing = std::numbers::pi / 180;  // rad
  double rho_meas = 500.0;                        // m
  double rho_comm = 1000.0;                       // m
  double p_fail = 0.1;
  BearingFrame frame = BearingFrame::global;

  void validate() const {
    if (!(sigma_gnss >= 0 && sigma_range >= 0 && sigma_bearing >= 0 && rho_meas >= 0 && rho_comm >= 0))
      throw ConfigError("noise parameters and radii must be non-negative");
    if (!(p_fail >= 0 && p_fail <= 1)) throw ConfigError("p_fail must lie in [0, 1]");
  }

  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

struct InternalMeasurement {
  int vehicle = 0;
  int t = 0;
  Vec2 pos_meas;
};

/// `observer` measured `subject`. Inside an Episode both are group-local
/// indices; in files they are vehicle ids.
struct ExternalMeasurement {
  int observer = 0;
  int subject = 0;
  int t = 0;
  double range = 0.0;
  double bearing = 0.0;
};

/// Dense symmetric boolean adjacency with a false diagonal.
class Adjacency {
 public:
  Adjacency() = default;
  explicit Adjacency(std::size_t n) : n_(n), bits_(n * n, 0) {}

  std::size_t size() const { return n_; }
  bool operator()(std::size_t a, std::size_t b) const { return bits_[a * n_ + b] != 0; }
  void set(std::size_t a, std::size_t b, bool v) {
    bits_[a * n_ + b] = v;
    bits_[b * n_ + a] = v;
  }
  std::size_t edge_count() const {
    std::size_t c = 0;
    for (auto b : bits_) c += b;
    return c / 2;
  }
  friend bool operator==(const Adjacency&, const Adjacency&) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> bits_;
};

struct DomainGraphs {
  int t = 0;
  Adjacency meas;
  Adjacency comm;
};

inline InternalMeasurement sense_internal(Vec2 true_pos, const NoiseConfig& cfg, Rng& rng) {
  if (!std::isfinite(true_pos.x) || !std::isfinite(true_pos.y)) throw NumericError("non-finite position");
  const double nx = rng.normal() * cfg.sigma_gnss;
  const double ny = rng.normal() * cfg.sigma_gnss;
  return {0, 0, {true_pos.x + nx, true_pos.y + ny}};
}

/// Range and bearing of B seen from A. In the ego frame the observer heading
/// is subtracted from the global bearing before noise is added.
inline ExternalMeasurement sense_external(Vec2 pos_a, Vec2 pos_b, const NoiseConfig& cfg, Rng& rng,
                                          double observer_heading = 0.0) {
  const Vec2 d = pos_b - pos_a;
  const double r = norm(d);
  if (!(r > 0.0)) throw ConfigError("external measurement between coincident positions");
  const double nr = rng.normal() * cfg.sigma_range;
  const double nb = rng.normal() * cfg.sigma_bearing;
  double bearing = std::atan2(d.y, d.x);
  if (cfg.frame == BearingFrame::ego) bearing -= observer_heading;
  return {0, 1, 0, std::max(0.0, r + nr), wrap_angle(bearing + nb)};
}

/// Measurement edges need 0 < dist <= rho_meas (coincident vehicles cannot
/// range each other). Communication edges need dist <= rho_comm with
/// rho_comm > 0 and survive a failure draw. One uniform is consumed per
/// unordered pair regardless of distance so radii sweeps share noise.
inline DomainGraphs build_domain_graphs(const std::vector<Vec2>& positions, const NoiseConfig& cfg, Rng& rng) {
  if (positions.empty()) throw ConfigError("build_domain_graphs needs at least one position");
  const auto n = positions.size();
  DomainGraphs g{0, Adjacency(n), Adjacency(n)};
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const double d = distance(positions[a], positions[b]);
      const bool link_up = rng.uniform() >= cfg.p_fail;
      g.meas.set(a, b, d > 0.0 && d <= cfg.rho_meas);
      g.comm.set(a, b, cfg.rho_comm > 0.0 && d <= cfg.rho_comm && link_up);
    }
  }
  return g;
}

/// Network input encoding of an external measurement.
inline std::array<double, 3> encode_external(const ExternalMeasurement& m, const NoiseConfig& cfg) {
  return {m.range / cfg.rho_meas, std::cos(m.bearing), std::sin(m.bearing)};
}

struct EpisodeStep {
  int t = 0;                       // trace timestep index
  std::vector<Vec2> truth;         // per group vehicle
  std::vector<double> heading;     // per group vehicle
  std::vector<Vec2> internal;      // per group vehicle
  std::vector<ExternalMeasurement> external;  // local indices, sorted (observer, subject)
  DomainGraphs graphs;
};

/// One vehicle group over `window()` consecutive steps. Vehicles are held in
/// ascending id order and addressed by local index everywhere inside.
struct Episode {
  std::vector<int> vehicle_ids;
  std::vector<EpisodeStep> steps;

  std::size_t vehicles() const { return vehicle_ids.size(); }
  std::size_t window() const { return steps.size(); }
};

/// Structural checks; `cfg` supplies the measurement radius.
inline void validate_episode(const Episode& ep, const NoiseConfig& cfg) {
  const auto n = ep.vehicles();
  if (n == 0 || ep.steps.empty()) throw ConfigError("episode is empty");
  if (!std::is_sorted(ep.vehicle_ids.begin(), ep.vehicle_ids.end()) ||
      std::adjacent_find(ep.vehicle_ids.begin(), ep.vehicle_ids.end()) != ep.vehicle_ids.end())
    throw ConfigError("episode vehicle ids must be strictly ascending");
  for (const auto& s : ep.steps) {
    if (s.truth.size() != n || s.internal.size() != n || s.heading.size() != n || s.graphs.meas.size() != n ||
        s.graphs.comm.size() != n)
      throw ConfigError("episode step " + std::to_string(s.t) + " has inconsistent sizes");
    for (std::size_t a = 0; a < n; ++a) {
      if (s.graphs.meas(a, a) || s.graphs.comm(a, a)) throw ConfigError("adjacency diagonal must be false");
      for (std::size_t b = a + 1; b < n; ++b)
        if (s.graphs.meas(a, b) && distance(s.truth[a], s.truth[b]) > cfg.rho_meas + 1e-9)
          throw ConfigError("measurement edge longer than rho_meas at step " + std::to_string(s.t));
    }
    for (const auto& m : s.external) {
      const auto o = static_cast<std::size_t>(m.observer);
      const auto u = static_cast<std::size_t>(m.subject);
      if (m.observer < 0 || m.subject < 0 || o >= n || u >= n || o == u)
        throw ConfigError("external measurement with bad endpoints");
      if (!s.graphs.meas(o, u)) throw ConfigError("external measurement without a measurement edge");
      if (!(m.range >= 0.0) || !(m.bearing > -std::numbers::pi && m.bearing <= std::numbers::pi))
        throw ConfigError("external measurement out of range");
    }
  }
}

/// Samples one group episode from `traces`. A focal vehicle and window start
/// are drawn until at least group_size - 1 other vehicles sit within
/// rho_meas of the focal vehicle at the start; the group is the focal vehicle
/// plus its nearest group_size - 1 neighbors.
inline Episode make_episode(const TraceSet& traces, int group_size, int window, const NoiseConfig& cfg,
                            std::uint64_t seed, int max_tries = 2000) {
  cfg.validate();
  if (group_size < 1 || window < 1) throw ConfigError("group_size and window must be >= 1");
  const auto nv = traces.vehicles.size();
  const auto steps = traces.steps();
  if (nv < static_cast<std::size_t>(group_size)) throw ConfigError("fewer vehicles than group_size");
  if (steps < static_cast<std::size_t>(window)) throw ConfigError("traces shorter than the episode window");

  Rng select(stream_key(seed, "select"));
  std::vector<std::size_t> group;
  std::size_t start = 0;
  for (int attempt = 0; attempt < max_tries && group.empty(); ++attempt) {
    const auto focal = static_cast<std::size_t>(select.below(nv));
    start = static_cast<std::size_t>(select.below(steps - static_cast<std::size_t>(window) + 1));
    const Vec2 fp = traces.vehicles[focal].poses[start].pos;
    std::vector<std::pair<double, std::size_t>> near;
    for (std::size_t v = 0; v < nv; ++v) {
      if (v == focal) continue;
      const double d = distance(fp, traces.vehicles[v].poses[start].pos);
      if (d <= cfg.rho_meas) near.push_back({d, v});
    }
    if (near.size() + 1 < static_cast<std::size_t>(group_size)) continue;
    std::sort(near.begin(), near.end(), [&](const auto& l, const auto& r) {
      return l.first != r.first ? l.first < r.first : traces.vehicles[l.second].id < traces.vehicles[r.second].id;
    });
    group.push_back(focal);
    for (int k = 0; k + 1 < group_size; ++k) group.push_back(near[static_cast<std::size_t>(k)].second);
  }
  if (group.empty())
    throw ConfigError("no vehicle has " + std::to_string(group_size - 1) +
                      " neighbors within rho_meas; generate denser traces");
  std::sort(group.begin(), group.end(),
            [&](std::size_t l, std::size_t r) { return traces.vehicles[l].id < traces.vehicles[r].id; });

  Episode ep;
  for (auto v : group) ep.vehicle_ids.push_back(traces.vehicles[v].id);
  Rng links(stream_key(seed, "links"));
  Rng internal(stream_key(seed, "internal"));
  Rng external(stream_key(seed, "external"));
  const auto n = group.size();
  for (int k = 0; k < window; ++k) {
    EpisodeStep s;
    s.t = static_cast<int>(start) + k;
    for (auto v : group) {
      const auto& pose = traces.vehicles[v].poses[start + static_cast<std::size_t>(k)];
      s.truth.push_back(pose.pos);
      s.heading.push_back(pose.heading);
    }
    s.graphs = build_domain_graphs(s.truth, cfg, links);
    s.graphs.t = s.t;
    for (std::size_t a = 0; a < n; ++a) {
      auto m = sense_internal(s.truth[a], cfg, internal);
      s.internal.push_back(m.pos_meas);
    }
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        if (a == b || !s.graphs.meas(a, b)) continue;
        auto m = sense_external(s.truth[a], s.truth[b], cfg, external, s.heading[a]);
        m.observer = static_cast<int>(a);
        m.subject = static_cast<int>(b);
        m.t = s.t;
        s.external.push_back(m);
      }
    }
    ep.steps.push_back(std::move(s));
  }
  return ep;
}

// --- JSON-lines serialization ----------------------------------------------

inline nlohmann::json noise_to_json(const NoiseConfig& c) {
  return {{"sigma_gnss", c.sigma_gnss}, {"sigma_range", c.sigma_range}, {"sigma_bearing", c.sigma_bearing},
          {"rho_meas", c.rho_meas},     {"rho_comm", c.rho_comm},       {"p_fail", c.p_fail},
          {"bearing_frame", c.frame == BearingFrame::ego ? "ego" : "global"}};
}

inline NoiseConfig noise_from_json(const nlohmann::json& j) {
  NoiseConfig c;
  c.sigma_gnss = j.at("sigma_gnss").get<double>();
  c.sigma_range = j.at("sigma_range").get<double>();
  c.sigma_bearing = j.at("sigma_bearing").get<double>();
  c.rho_meas = j.at("rho_meas").get<double>();
  c.rho_comm = j.at("rho_comm").get<double>();
  c.p_fail = j.at("p_fail").get<double>();
  c.frame = j.value("bearing_frame", "global") == "ego" ? BearingFrame::ego : BearingFrame::global;
  c.validate();
  return c;
}

/// One JSON object per step: t, truth, heading, internal, external,
/// meas_edges, comm_edges. Vehicle references are ids.
inline std::string episode_to_jsonl(const Episode& ep) {
  std::string out;
  const auto n = ep.vehicles();
  for (const auto& s : ep.steps) {
    nlohmann::json line;
    line["t"] = s.t;
    nlohmann::json truth = nlohmann::json::object(), heading = nlohmann::json::object(),
                   internal = nlohmann::json::object();
    for (std::size_t a = 0; a < n; ++a) {
      const auto key = std::to_string(ep.vehicle_ids[a]);
      truth[key] = {s.truth[a].x, s.truth[a].y};
      heading[key] = s.heading[a];
      internal[key] = {s.internal[a].x, s.internal[a].y};
    }
    line["truth"] = truth;
    line["heading"] = heading;
    line["internal"] = internal;
    auto ext = nlohmann::json::array();
    for (const auto& m : s.external)
      ext.push_back({ep.vehicle_ids[static_cast<std::size_t>(m.observer)],
                     ep.vehicle_ids[static_cast<std::size_t>(m.subject)], m.range, m.bearing});
    line["external"] = ext;
    auto meas = nlohmann::json::array(), comm = nlohmann::json::array();
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) {
        if (s.graphs.meas(a, b)) meas.push_back({ep.vehicle_ids[a], ep.vehicle_ids[b]});
        if (s.graphs.comm(a, b)) comm.push_back({ep.vehicle_ids[a], ep.vehicle_ids[b]});
      }
    line["meas_edges"] = meas;
    line["comm_edges"] = comm;
    out += line.dump();
    out += '\n';
  }
  return out;
}

inline void save_episode(const Episode& ep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << episode_to_jsonl(ep);
  if (!out) throw Error("write failed: " + path.string());
}

inline Episode load_episode(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const std::string file = path.string();
  Episode ep;
  std::map<int, std::size_t> local;
  std::string text;
  std::size_t lineno = 0;
  auto vec2 = [](const nlohmann::json& j) { return Vec2{j.at(0).get<double>(), j.at(1).get<double>()}; };
  while (std::getline(in, text)) {
    ++lineno;
    if (text.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(text);
      if (ep.vehicle_ids.empty()) {
        for (const auto& [key, _] : j.at("truth").items()) ep.vehicle_ids.push_back(std::stoi(key));
        std::sort(ep.vehicle_ids.begin(), ep.vehicle_ids.end());
        for (std::size_t a = 0; a < ep.vehicle_ids.size(); ++a) local[ep.vehicle_ids[a]] = a;
      }
      const auto n = ep.vehicle_ids.size();
      if (j.at("truth").size() != n || j.at("internal").size() != n)
        throw ParseError(file, lineno, "vehicle set changes between lines");
      EpisodeStep s;
      s.t = j.at("t").get<int>();
      s.truth.resize(n);
      s.internal.resize(n);
      s.heading.assign(n, 0.0);
      for (std::size_t a = 0; a < n; ++a) {
        const auto key = std::to_string(ep.vehicle_ids[a]);
        s.truth[a] = vec2(j.at("truth").at(key));
        s.internal[a] = vec2(j.at("internal").at(key));
        if (j.contains("heading")) s.heading[a] = j["heading"].at(key).get<double>();
      }
      auto lookup = [&](const nlohmann::json& id) {
        auto it = local.find(id.get<int>());
        if (it == local.end()) throw ParseError(file, lineno, "unknown vehicle id " + id.dump());
        return it->second;
      };
      s.graphs = {s.t, Adjacency(n), Adjacency(n)};
      for (const auto& e : j.at("meas_edges")) s.graphs.meas.set(lookup(e.at(0)), lookup(e.at(1)), true);
      for (const auto& e : j.at("comm_edges")) s.graphs.comm.set(lookup(e.at(0)), lookup(e.at(1)), true);
      for (const auto& e : j.at("external")) {
        ExternalMeasurement m;
        m.observer = static_cast<int>(lookup(e.at(0)));
        m.subject = static_cast<int>(lookup(e.at(1)));
        m.t = s.t;
        m.range = e.at(2).get<double>();
        m.bearing = e.at(3).get<double>();
        s.external.push_back(m);
      }
      ep.steps.push_back(std::move(s));
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(file, lineno, e.what());
    }
  }
  if (ep.steps.empty()) throw ParseError(file, lineno, "episode file has no steps");
  return ep;
}

}  // namespace mlcl
