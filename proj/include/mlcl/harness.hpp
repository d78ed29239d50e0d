#pragma once

// Experiment orchestration: flat key = value configs, dataset generation,
// per-scheme training and evaluation, sweeps, bootstrap errors and
// deterministic CSV/JSON artifacts.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlcl/baselines.hpp"
#include "mlcl/errors.hpp"
#include "mlcl/model.hpp"
#include "mlcl/rng.hpp"
#include "mlcl/sensing.hpp"
#include "mlcl/training.hpp"
#include "mlcl/world.hpp"

namespace mlcl {

inline constexpr const char* kCodeVersion = "mlcl 0.1.0";

enum class SweepAxis { none, n_vehicles, comm_range };

inline const std::vector<std::string>& all_schemes() {
  static const std::vector<std::string> s{"mlcl", "nc", "gcn", "ekf", "mle", "naive"};
  return s;
}

inline bool is_learned(const std::string& scheme) { return scheme == "mlcl" || scheme == "nc" || scheme == "gcn"; }

struct ExperimentConfig {
  // world
  int grid_rows = 6;
  int grid_cols = 6;
  double grid_spacing_m = 150.0;
  double speed_limit_mps = 14.0;
  int n_vehicles = 60;
  double duration_s = 600.0;
  double dt_s = 1.0;
  double train_fraction = 0.7;
  // sensing
  double sigma_gnss_m = 10.0;
  double sigma_range_m = 3.0;
  double sigma_bearing_deg = 1.0;
  double rho_meas_m = 500.0;
  double rho_comm_m = 1000.0;
  double p_fail = 0.1;
  BearingFrame bearing_frame = BearingFrame::global;
  // episodes
  int train_episodes = 6000;
  int test_episodes = 60;
  int group_size = 6;
  int window = 20;
  // networks and training
  int hidden = 64;
  int message_dim = 32;
  int state_dim = 32;
  double position_scale_m = 250.0;
  double lr = 0.005;
  double lr_final = 5e-5;  // < 0: constant lr
  std::int64_t lr_horizon = 0;  // 0: the run's own step count
  int batch_size = 16;
  std::int64_t train_steps = 8000;
  std::int64_t gcn_train_steps = 4000;
  int eval_every = 500;
  double clip_norm = 0.0;
  // classical baselines
  double ekf_accel_std = 1.0;
  double ekf_init_vel_var = 100.0;
  bool mle_motion_prior = false;
  int mle_max_iterations = 200;
  // experiment
  std::vector<std::string> schemes = all_schemes();
  SweepAxis sweep_axis = SweepAxis::none;
  std::vector<double> sweep_values;
  int bootstrap_resamples = 1000;
  std::uint64_t seed = 1;
  std::string out_dir = "out";

  NoiseConfig noise() const {
    NoiseConfig n;
    n.sigma_gnss = sigma_gnss_m;
    n.sigma_range = sigma_range_m;
    n.sigma_bearing = sigma_bearing_deg * std::numbers::pi / 180.0;
    n.rho_meas = rho_meas_m;
    n.rho_comm = rho_comm_m;
    n.p_fail = p_fail;
    n.frame = bearing_frame;
    return n;
  }

  MlclDims dims() const { return {state_dim, message_dim, hidden}; }

  /// Centre of the road grid; learned models measure positions from here.
  Vec2 map_center() const {
    return {0.5 * (grid_cols - 1) * grid_spacing_m, 0.5 * (grid_rows - 1) * grid_spacing_m};
  }

  TrainConfig train_config(const std::string& scheme) const {
    TrainConfig t;
    t.lr = lr;
    t.lr_final = lr_final;
    t.lr_horizon = lr_horizon;
    t.batch_size = batch_size;
    t.window = window;
    t.group_size = group_size;
    t.steps = scheme == "gcn" ? gcn_train_steps : train_steps;
    t.seed = stream_key(seed, "batches");
    t.disable_comm = scheme == "nc";
    t.position_scale = position_scale_m;
    t.eval_every = eval_every;
    t.clip_norm = clip_norm;
    return t;
  }

  EkfConfig ekf() const { return {ekf_accel_std, ekf_init_vel_var}; }

  MleOptions mle() const {
    MleOptions o;
    o.max_iterations = mle_max_iterations;
    o.motion_prior = mle_motion_prior;
    o.accel_std = ekf_accel_std;
    o.dt = dt_s;
    return o;
  }

  void validate() const;
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class T>
Field number_field(T ExperimentConfig::*member, const std::string& key) {
  return {[member, key](ExperimentConfig& c, const std::string& v) { c.*member = parse_number<T>(key, v); },
          [member](const ExperimentConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return detail::format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline const std::vector<std::pair<std::string, Field>>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<std::pair<std::string, Field>> fields = [] {
    std::vector<std::pair<std::string, Field>> f;
    auto num = [&f](const char* key, auto member) { f.emplace_back(key, number_field(member, key)); };
    num("grid_rows", &C::grid_rows);
    num("grid_cols", &C::grid_cols);
    num("grid_spacing_m", &C::grid_spacing_m);
    num("speed_limit_mps", &C::speed_limit_mps);
    num("n_vehicles", &C::n_vehicles);
    num("duration_s", &C::duration_s);
    num("dt_s", &C::dt_s);
    num("train_fraction", &C::train_fraction);
    num("sigma_gnss_m", &C::sigma_gnss_m);
    num("sigma_range_m", &C::sigma_range_m);
    num("sigma_bearing_deg", &C::sigma_bearing_deg);
    num("rho_meas_m", &C::rho_meas_m);
    num("rho_comm_m", &C::rho_comm_m);
    num("p_fail", &C::p_fail);
    f.emplace_back("bearing_frame",
                   Field{[](C& c, const std::string& v) {
                           if (v == "global") c.bearing_frame = BearingFrame::global;
                           else if (v == "ego") c.bearing_frame = BearingFrame::ego;
                           else throw ConfigError("bearing_frame must be global or ego");
                         },
                         [](const C& c) { return std::string(c.bearing_frame == BearingFrame::ego ? "ego" : "global"); }});
    num("train_episodes", &C::train_episodes);
    num("test_episodes", &C::test_episodes);
    num("group_size", &C::group_size);
    num("window", &C::window);
    num("hidden", &C::hidden);
    num("message_dim", &C::message_dim);
    num("state_dim", &C::state_dim);
    num("position_scale_m", &C::position_scale_m);
    num("lr", &C::lr);
    num("lr_final", &C::lr_final);
    num("lr_horizon", &C::lr_horizon);
    num("batch_size", &C::batch_size);
    num("train_steps", &C::train_steps);
    num("gcn_train_steps", &C::gcn_train_steps);
    num("eval_every", &C::eval_every);
    num("clip_norm", &C::clip_norm);
    num("ekf_accel_std", &C::ekf_accel_std);
    num("ekf_init_vel_var", &C::ekf_init_vel_var);
    f.emplace_back("mle_motion_prior",
                   Field{[](C& c, const std::string& v) { c.mle_motion_prior = parse_bool("mle_motion_prior", v); },
                         [](const C& c) { return std::string(c.mle_motion_prior ? "true" : "false"); }});
    num("mle_max_iterations", &C::mle_max_iterations);
    f.emplace_back("schemes", Field{[](C& c, const std::string& v) { c.schemes = split_list(v); },
                                    [](const C& c) { return join(c.schemes); }});
    f.emplace_back("sweep_axis",
                   Field{[](C& c, const std::string& v) {
                           if (v == "none") c.sweep_axis = SweepAxis::none;
                           else if (v == "n_vehicles") c.sweep_axis = SweepAxis::n_vehicles;
                           else if (v == "comm_range") c.sweep_axis = SweepAxis::comm_range;
                           else throw ConfigError("sweep_axis must be none, n_vehicles or comm_range");
                         },
                         [](const C& c) {
                           return std::string(c.sweep_axis == SweepAxis::none         ? "none"
                                              : c.sweep_axis == SweepAxis::n_vehicles ? "n_vehicles"
                                                                                      : "comm_range");
                         }});
    f.emplace_back("sweep_values", Field{[](C& c, const std::string& v) {
                                           c.sweep_values.clear();
                                           for (const auto& s : split_list(v))
                                             c.sweep_values.push_back(parse_number<double>("sweep_values", s));
                                         },
                                         [](const C& c) {
                                           std::vector<std::string> s;
                                           for (double v : c.sweep_values) s.push_back(detail::format_double(v));
                                           return join(s);
                                         }});
    num("bootstrap_resamples", &C::bootstrap_resamples);
    num("seed", &C::seed);
    f.emplace_back("out_dir", Field{[](C& c, const std::string& v) { c.out_dir = v; },
                                    [](const C& c) { return c.out_dir; }});
    return f;
  }();
  return fields;
}

}  // namespace detail

inline void ExperimentConfig::validate() const {
  if (grid_rows < 2 || grid_cols < 2) throw ConfigError("grid needs at least 2 rows and 2 columns");
  if (!(grid_spacing_m > 0 && speed_limit_mps > 0 && duration_s > 0 && dt_s > 0))
    throw ConfigError("spacing, speed limit, duration and dt must be positive");
  if (n_vehicles < 2) throw ConfigError("n_vehicles must be >= 2");
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must lie in (0, 1)");
  noise().validate();
  if (train_episodes < 1 || test_episodes < 1 || group_size < 1 || window < 1)
    throw ConfigError("episode counts, group_size and window must be >= 1");
  if (hidden < 1 || message_dim < 1 || state_dim < 1) throw ConfigError("network dims must be >= 1");
  train_config("mlcl").validate();
  if (gcn_train_steps < 0) throw ConfigError("gcn_train_steps must be >= 0");
  if (!(ekf_accel_std >= 0 && ekf_init_vel_var > 0)) throw ConfigError("bad EKF noise settings");
  if (mle_max_iterations < 1) throw ConfigError("mle_max_iterations must be >= 1");
  if (schemes.empty()) throw ConfigError("scheme list is empty");
  for (const auto& s : schemes)
    if (std::find(all_schemes().begin(), all_schemes().end(), s) == all_schemes().end())
      throw ConfigError("unknown scheme '" + s + "'");
  for (std::size_t i = 0; i < sweep_values.size(); ++i) {
    const double v = sweep_values[i];
    if (i > 0 && !(v > sweep_values[i - 1])) throw ConfigError("sweep values must be strictly increasing");
    if (sweep_axis == SweepAxis::n_vehicles && (v < 1 || v != std::floor(v)))
      throw ConfigError("group-size sweep values must be positive integers");
    if (sweep_axis == SweepAxis::comm_range && v < 0) throw ConfigError("range sweep values must be >= 0");
    if (sweep_axis == SweepAxis::none) throw ConfigError("sweep_values given without a sweep_axis");
  }
  if (bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be >= 1");
}

/// Parses `key = value` lines; '#' starts a comment. Unknown keys and
/// malformed values are config errors.
inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  const auto& fields = detail::config_fields();
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.first == key; });
    if (it == fields.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    it->second.set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Every key in fixed order; parse_config(canonical(c)) reproduces c.
inline std::string canonical_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(cfg) + "\n";
  return out;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical config; the output directory does not contribute.
inline std::string config_hash(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.out_dir.clear();
  return hex64(fnv1a64(canonical_config(c)));
}

// --- artifacts ---------------------------------------------------------------------

inline void write_text(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw Error("write failed: " + path.string());
}

inline std::filesystem::path provenance_path(const std::filesystem::path& artifact) {
  return artifact.string() + ".provenance.json";
}

/// Writes `content` and its provenance record next to it.
inline void write_artifact(const std::filesystem::path& path, const std::string& content, const ExperimentConfig& cfg,
                           const std::string& command) {
  write_text(path, content);
  nlohmann::ordered_json p;
  p["artifact"] = path.filename().string();
  p["command"] = command;
  p["config_hash"] = config_hash(cfg);
  p["seed"] = cfg.seed;
  p["code_version"] = kCodeVersion;
  p["content_fnv1a64"] = hex64(fnv1a64(content));
  write_text(provenance_path(path), p.dump(2) + "\n");
}

// --- statistics --------------------------------------------------------------------

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Standard deviation of the resampled means (per-episode bootstrap).
inline double bootstrap_stderr(const std::vector<double>& values, int resamples, std::uint64_t seed) {
  if (values.size() < 2) return 0.0;
  Rng rng(stream_key(seed, "bootstrap"));
  std::vector<double> means;
  for (int r = 0; r < resamples; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[rng.below(values.size())];
    means.push_back(s / static_cast<double>(values.size()));
  }
  const double m = mean_of(means);
  double var = 0.0;
  for (double x : means) var += (x - m) * (x - m);
  return std::sqrt(var / static_cast<double>(means.size() - 1 > 0 ? means.size() - 1 : 1));
}

/// Bootstrap error of mean(a) - mean(b) with episodes resampled jointly.
inline double bootstrap_stderr_diff(const std::vector<double>& a, const std::vector<double>& b, int resamples,
                                    std::uint64_t seed) {
  if (a.size() != b.size()) throw ShapeError("paired bootstrap needs equal-length samples");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return bootstrap_stderr(d, resamples, seed);
}

// --- datasets ----------------------------------------------------------------------

struct Dataset {
  TraceSet train_traces;
  TraceSet test_traces;
  std::vector<Episode> train;
  std::vector<Episode> test;
  NoiseConfig noise;
  double dt = 1.0;
};

inline TraceSet simulate_world(const ExperimentConfig& cfg) {
  const auto net = generate_grid_network(cfg.grid_rows, cfg.grid_cols, cfg.grid_spacing_m, cfg.speed_limit_mps);
  return simulate_traces(net, cfg.n_vehicles, cfg.duration_s, cfg.dt_s, stream_key(cfg.seed, "traces"));
}

/// Test episodes drawn from `traces`; sweeps vary group size or noise while
/// keeping the per-episode streams fixed.
inline std::vector<Episode> make_episodes(const TraceSet& traces, int count, int group_size, int window,
                                          const NoiseConfig& noise, std::uint64_t seed, const char* purpose) {
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_episode(traces, group_size, window, noise, stream_key(seed, purpose, static_cast<std::uint64_t>(i))));
  return out;
}

inline Dataset build_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.noise = cfg.noise();
  d.dt = cfg.dt_s;
  auto traces = simulate_world(cfg);
  std::tie(d.train_traces, d.test_traces) = split_vehicles(traces, cfg.train_fraction, stream_key(cfg.seed, "split"));
  d.train = make_episodes(d.train_traces, cfg.train_episodes, cfg.group_size, cfg.window, d.noise, cfg.seed, "train-episode");
  d.test = make_episodes(d.test_traces, cfg.test_episodes, cfg.group_size, cfg.window, d.noise, cfg.seed, "test-episode");
  return d;
}

inline std::string episode_file(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "episode_%05zu.jsonl", i);
  return buf;
}

/// Writes train/test traces, episodes and manifest.json under `dir`.
inline void save_dataset(const Dataset& d, const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "train");
  std::filesystem::create_directories(dir / "test");
  save_traces(d.train_traces, dir / "train_traces.csv");
  save_traces(d.test_traces, dir / "test_traces.csv");
  nlohmann::ordered_json m;
  m["format"] = "mlcl-dataset";
  m["version"] = 1;
  m["code_version"] = kCodeVersion;
  m["config_hash"] = config_hash(cfg);
  m["seed"] = cfg.seed;
  m["dt"] = d.dt;
  m["group_size"] = cfg.group_size;
  m["window"] = cfg.window;
  m["noise"] = noise_to_json(d.noise);
  m["train_traces"] = "train_traces.csv";
  m["test_traces"] = "test_traces.csv";
  for (const char* split : {"train", "test"}) {
    const auto& eps = std::string(split) == "train" ? d.train : d.test;
    auto files = nlohmann::json::array();
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const auto rel = std::string(split) + "/" + episode_file(i);
      save_episode(eps[i], dir / rel);
      files.push_back({{"file", rel}, {"seed", stream_key(cfg.seed, std::string(split) == "train" ? "train-episode" : "test-episode", i)}});
    }
    m[std::string(split) + "_episodes"] = files;
  }
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

/// Reloads a dataset directory and revalidates every episode.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in) throw ConfigError("no manifest.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "manifest.json").string(), 0, e.what());
  }
  if (m.value("format", "") != "mlcl-dataset") throw ConfigError("not an mlcl dataset manifest");
  Dataset d;
  d.dt = m.at("dt").get<double>();
  d.noise = noise_from_json(m.at("noise"));
  d.train_traces = load_traces(dir / m.at("train_traces").get<std::string>(), d.dt);
  d.test_traces = load_traces(dir / m.at("test_traces").get<std::string>(), d.dt);
  for (const char* split : {"train", "test"}) {
    auto& eps = std::string(split) == "train" ? d.train : d.test;
    for (const auto& f : m.at(std::string(split) + "_episodes")) {
      eps.push_back(load_episode(dir / f.at("file").get<std::string>()));
      validate_episode(eps.back(), d.noise);
    }
  }
  return d;
}

// --- models ------------------------------------------------------------------------

struct TrainedModel {
  std::string scheme;
  std::optional<MlclParams> mlcl;
  std::optional<GcnParams> gcn;
  tc::AdamState adam;
  std::vector<CurveRow> curve;  // rows of the most recent training call
};

inline TrainedModel init_model(const ExperimentConfig& cfg, const std::string& scheme) {
  TrainedModel m;
  m.scheme = scheme;
  if (scheme == "gcn") {
    m.gcn = GcnParams::init(cfg.hidden, stream_key(cfg.seed, "model-init"), cfg.position_scale_m, cfg.rho_meas_m);
    m.gcn->origin = cfg.map_center();
  } else if (scheme == "mlcl" || scheme == "nc") {
    m.mlcl = MlclParams::init(cfg.dims(), stream_key(cfg.seed, "model-init"), cfg.position_scale_m, cfg.rho_meas_m);
    m.mlcl->origin = cfg.map_center();
  } else {
    throw ConfigError("scheme '" + scheme + "' has no trainable model");
  }
  return m;
}

/// Trains `model` for the configured step count, continuing its Adam step.
inline void train_model(TrainedModel& model, const ExperimentConfig& cfg, const Dataset& data,
                        const ProgressFn& progress = {}) {
  const auto tcfg = cfg.train_config(model.scheme);
  if (model.gcn) model.curve = gcn_train(*model.gcn, model.adam, data.train, data.test, tcfg, progress);
  else model.curve = train(*model.mlcl, model.adam, data.train, data.test, tcfg, progress);
}

inline tc::Checkpoint model_checkpoint(const TrainedModel& m) {
  return m.gcn ? gcn_to_checkpoint(*m.gcn, m.adam) : to_checkpoint(*m.mlcl, m.adam, m.scheme);
}

inline TrainedModel model_from_checkpoint(const tc::Checkpoint& ck) {
  TrainedModel m;
  m.scheme = ck.meta.value("scheme", "");
  if (m.scheme == "gcn") m.gcn = gcn_from_checkpoint(ck);
  else if (m.scheme == "mlcl" || m.scheme == "nc") m.mlcl = params_from_checkpoint(ck);
  else throw ConfigError("checkpoint has unknown scheme '" + m.scheme + "'");
  if (ck.adam) m.adam = *ck.adam;
  return m;
}

using ModelMap = std::map<std::string, TrainedModel>;

/// Estimates of `scheme` for every episode.
inline std::vector<EstimateGrid> run_scheme(const std::string& scheme, const ModelMap& models,
                                            const std::vector<Episode>& episodes, const ExperimentConfig& cfg,
                                            const NoiseConfig& noise) {
  std::vector<EstimateGrid> out;
  if (is_learned(scheme)) {
    const auto it = models.find(scheme);
    if (it == models.end()) throw ConfigError("no trained model or checkpoint for scheme '" + scheme + "'");
    if (scheme == "gcn") return gcn_estimate_all(*it->second.gcn, episodes);
    return estimate_all(*it->second.mlcl, episodes, scheme == "nc");
  }
  for (const auto& ep : episodes) {
    if (scheme == "naive") out.push_back(naive_estimate(ep));
    else if (scheme == "ekf") out.push_back(ekf_run(ep, noise, cfg.dt_s, cfg.ekf()));
    else if (scheme == "mle") out.push_back(mle_window(ep, noise, cfg.mle()).estimates);
    else throw ConfigError("unknown scheme '" + scheme + "'");
  }
  return out;
}

// --- result tables -----------------------------------------------------------------

struct ResultRow {
  std::string scheme;
  std::string axis;  // "t", "n_vehicles", "comm_range" or "none"
  double axis_value = 0.0;
  double mae = 0.0;
  double stderr_m = 0.0;
  std::size_t n_episodes = 0;
};

struct ResultTable {
  std::vector<ResultRow> rows;

  std::string to_csv() const {
    std::string out = "scheme,axis,axis_value,mae_m,stderr_m,n_episodes\n";
    for (const auto& r : rows)
      out += r.scheme + "," + r.axis + "," + detail::format_double(r.axis_value) + "," + detail::format_double(r.mae) + "," +
             detail::format_double(r.stderr_m) + "," + std::to_string(r.n_episodes) + "\n";
    return out;
  }

  const ResultRow& find(const std::string& scheme, double axis_value) const {
    for (const auto& r : rows)
      if (r.scheme == scheme && r.axis_value == axis_value) return r;
    throw Error("no result row for " + scheme);
  }
};

/// [t][episode] group MAE of each episode at step t.
inline std::vector<std::vector<double>> step_errors(const std::vector<EstimateGrid>& est,
                                                    const std::vector<Episode>& eps) {
  std::size_t window = 0;
  for (const auto& e : eps) window = std::max(window, e.window());
  std::vector<std::vector<double>> out(window);
  for (std::size_t e = 0; e < eps.size(); ++e)
    for (std::size_t t = 0; t < eps[e].window(); ++t) {
      double s = 0.0;
      for (std::size_t v = 0; v < eps[e].vehicles(); ++v) s += distance(est[e][t][v], eps[e].steps[t].truth[v]);
      out[t].push_back(s / static_cast<double>(eps[e].vehicles()));
    }
  return out;
}

inline std::string estimates_csv(const std::string& scheme, const std::vector<EstimateGrid>& est,
                                 const std::vector<Episode>& eps) {
  std::string out;
  for (std::size_t e = 0; e < eps.size(); ++e)
    for (std::size_t t = 0; t < eps[e].window(); ++t)
      for (std::size_t v = 0; v < eps[e].vehicles(); ++v) {
        const auto& p = est[e][t][v];
        out += scheme + "," + std::to_string(e) + "," + std::to_string(eps[e].vehicle_ids[v]) + "," +
               std::to_string(eps[e].steps[t].t) + "," + detail::format_double(p.x) + "," + detail::format_double(p.y) + "," +
               detail::format_double(distance(p, eps[e].steps[t].truth[v])) + "\n";
      }
  return out;
}

inline std::string curve_csv(const std::vector<CurveRow>& curve) {
  std::string out = "step,train_loss_m,eval_mae_m\n";
  for (const auto& r : curve)
    out += std::to_string(r.step) + "," + detail::format_double(r.train_loss) + "," +
           (r.eval_mae ? detail::format_double(*r.eval_mae) : std::string()) + "\n";
  return out;
}

// --- commands ----------------------------------------------------------------------

inline Dataset cmd_gen(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  auto d = build_dataset(cfg);
  save_dataset(d, cfg, out);
  return d;
}

/// Trains one scheme (fresh or resumed) and writes `<scheme>.ckpt.json` and
/// `<scheme>_curve.csv` under `out`.
inline TrainedModel cmd_train(const ExperimentConfig& cfg, const std::string& scheme, const Dataset& data,
                              const std::filesystem::path& out,
                              const std::optional<std::filesystem::path>& resume = std::nullopt,
                              const ProgressFn& progress = {}) {
  TrainedModel m;
  if (resume) {
    m = model_from_checkpoint(tc::load_checkpoint(*resume));
    if (m.scheme != scheme) throw ConfigError("resume checkpoint holds scheme '" + m.scheme + "'");
  } else {
    m = init_model(cfg, scheme);
  }
  train_model(m, cfg, data, progress);
  std::filesystem::create_directories(out);
  tc::save_checkpoint(model_checkpoint(m), out / (scheme + ".ckpt.json"));
  write_artifact(out / (scheme + "_curve.csv"), curve_csv(m.curve), cfg, "train");
  return m;
}

struct EvalOutput {
  ResultTable per_time;  // axis "t"
  ResultTable summary;   // axis "none", one row per scheme
  std::map<std::string, std::vector<double>> per_episode;
  std::map<std::string, std::vector<EstimateGrid>> estimates;
};

inline EvalOutput evaluate_schemes(const ExperimentConfig& cfg, const std::vector<Episode>& episodes,
                                   const NoiseConfig& noise, const ModelMap& models) {
  EvalOutput out;
  for (const auto& scheme : cfg.schemes) {
    auto est = run_scheme(scheme, models, episodes, cfg, noise);
    const auto res = summarize(est, episodes);
    const auto steps = step_errors(est, episodes);
    for (std::size_t t = 0; t < steps.size(); ++t)
      out.per_time.rows.push_back({scheme, "t", static_cast<double>(t), mean_of(steps[t]),
                                   bootstrap_stderr(steps[t], cfg.bootstrap_resamples, cfg.seed), steps[t].size()});
    out.summary.rows.push_back({scheme, "none", 0.0, res.aggregate,
                                bootstrap_stderr(res.per_episode, cfg.bootstrap_resamples, cfg.seed),
                                res.per_episode.size()});
    out.per_episode[scheme] = res.per_episode;
    out.estimates[scheme] = std::move(est);
  }
  return out;
}

/// Per-time and overall MAE of every configured scheme on the test split.
/// Writes eval_time.csv, eval_summary.csv and estimates.csv.
inline EvalOutput cmd_eval(const ExperimentConfig& cfg, const Dataset& data, const ModelMap& models,
                           const std::filesystem::path& out) {
  auto res = evaluate_schemes(cfg, data.test, data.noise, models);
  std::string est = "scheme,episode,vehicle_id,t,xhat_m,yhat_m,err_m\n";
  for (const auto& scheme : cfg.schemes) est += estimates_csv(scheme, res.estimates.at(scheme), data.test);
  write_artifact(out / "eval_time.csv", res.per_time.to_csv(), cfg, "eval");
  write_artifact(out / "eval_summary.csv", res.summary.to_csv(), cfg, "eval");
  write_artifact(out / "estimates.csv", est, cfg, "eval");
  return res;
}

struct SweepOutput {
  ResultTable table;
  std::vector<double> values;
  // scheme -> per sweep value -> per-episode MAE
  std::map<std::string, std::vector<std::vector<double>>> per_episode;
};

/// Trains every learned scheme in the config that `models` lacks.
inline void ensure_models(const ExperimentConfig& cfg, const Dataset& data, ModelMap& models,
                          const ProgressFn& progress = {}) {
  for (const auto& s : cfg.schemes)
    if (is_learned(s) && !models.count(s)) {
      auto m = init_model(cfg, s);
      train_model(m, cfg, data, progress);
      models.emplace(s, std::move(m));
    }
}

inline SweepOutput run_sweep(const ExperimentConfig& cfg, const Dataset& data, const ModelMap& models,
                             const std::vector<double>& values, const char* axis,
                             const std::function<std::vector<Episode>(double, NoiseConfig&)>& episodes_for) {
  SweepOutput out;
  out.values = values;
  for (double v : values) {
    NoiseConfig noise = data.noise;
    const auto eps = episodes_for(v, noise);
    const auto res = evaluate_schemes(cfg, eps, noise, models);
    for (const auto& row : res.summary.rows) {
      auto r = row;
      r.axis = axis;
      r.axis_value = v;
      out.table.rows.push_back(r);
      out.per_episode[r.scheme].push_back(res.per_episode.at(r.scheme));
    }
  }
  return out;
}

inline std::vector<double> sweep_values_or(const ExperimentConfig& cfg, SweepAxis axis, std::vector<double> fallback) {
  if (cfg.sweep_axis == SweepAxis::none) return fallback;
  if (cfg.sweep_axis != axis) throw ConfigError("sweep_axis does not match the sweep command");
  return cfg.sweep_values.empty() ? fallback : cfg.sweep_values;
}

/// Evaluates models trained at cfg.group_size on test episodes of every swept
/// group size. Writes sweep_n.csv.
inline SweepOutput cmd_sweep_n(const ExperimentConfig& cfg, const Dataset& data, ModelMap& models,
                               const std::filesystem::path& out, const ProgressFn& progress = {}) {
  const auto values = sweep_values_or(cfg, SweepAxis::n_vehicles, {2, 3, 4, 5, 6, 7, 8});
  ensure_models(cfg, data, models, progress);
  auto res = run_sweep(cfg, data, models, values, "n_vehicles", [&](double n, NoiseConfig& noise) {
    return make_episodes(data.test_traces, cfg.test_episodes, static_cast<int>(n), cfg.window, noise, cfg.seed,
                         "test-episode");
  });
  write_artifact(out / "sweep_n.csv", res.table.to_csv(), cfg, "sweep-n");
  return res;
}

/// Evaluates the trained models with the communication radius swept and the
/// measurement radius fixed. Writes sweep_range.csv.
inline SweepOutput cmd_sweep_range(const ExperimentConfig& cfg, const Dataset& data, ModelMap& models,
                                   const std::filesystem::path& out, const ProgressFn& progress = {}) {
  const auto values = sweep_values_or(cfg, SweepAxis::comm_range, {0, 100, 200, 400, 800});
  ensure_models(cfg, data, models, progress);
  auto res = run_sweep(cfg, data, models, values, "comm_range", [&](double rho, NoiseConfig& noise) {
    noise.rho_comm = rho;
    return make_episodes(data.test_traces, cfg.test_episodes, cfg.group_size, cfg.window, noise, cfg.seed,
                         "test-episode");
  });
  write_artifact(out / "sweep_range.csv", res.table.to_csv(), cfg, "sweep-range");
  return res;
}

}  // namespace mlcl
