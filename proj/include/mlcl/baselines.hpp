#pragma once

// Comparison estimators: raw GNSS (naive), a centralized constant-velocity
// EKF, windowed maximum likelihood solved by Levenberg-Marquardt, and a
// per-step two-layer graph-convolution network.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mlcl/errors.hpp"
#include "mlcl/geometry.hpp"
#include "mlcl/sensing.hpp"
#include "mlcl/tensorcore.hpp"
#include "mlcl/training.hpp"

namespace mlcl {

// --- naive -----------------------------------------------------------------------

inline EstimateGrid naive_estimate(const Episode& ep) {
  EstimateGrid out;
  for (const auto& s : ep.steps) out.push_back(s.internal);
  return out;
}

// --- shared measurement model ------------------------------------------------------

/// Predicted range/bearing of `subject` seen from `observer` plus the 1x2
/// Jacobian blocks w.r.t. each endpoint position.
struct RangeBearingModel {
  double range = 0.0;
  double bearing = 0.0;
  Eigen::RowVector2d d_range_d_obs, d_range_d_sub;
  Eigen::RowVector2d d_bearing_d_obs, d_bearing_d_sub;
};

inline RangeBearingModel range_bearing_model(Vec2 observer, Vec2 subject, double observer_heading,
                                             BearingFrame frame) {
  const Vec2 d = subject - observer;
  const double r2 = d.x * d.x + d.y * d.y;
  const double r = std::sqrt(r2);
  RangeBearingModel m;
  m.range = r;
  m.bearing = wrap_angle(std::atan2(d.y, d.x) - (frame == BearingFrame::ego ? observer_heading : 0.0));
  if (r > 0.0) {
    m.d_range_d_sub << d.x / r, d.y / r;
    m.d_bearing_d_sub << -d.y / r2, d.x / r2;
  } else {
    m.d_range_d_sub.setZero();
    m.d_bearing_d_sub.setZero();
  }
  m.d_range_d_obs = -m.d_range_d_sub;
  m.d_bearing_d_obs = -m.d_bearing_d_sub;
  return m;
}

// --- EKF -------------------------------------------------------------------------

struct EkfConfig {
  double accel_std = 1.0;       // m/s^2, white-acceleration process noise
  double init_vel_var = 100.0;  // m^2/s^2
};

/// Joint state: per vehicle (x, y, vx, vy), stacked.
struct EkfState {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;

  std::size_t vehicles() const { return static_cast<std::size_t>(mean.size() / 4); }
  Vec2 position(std::size_t v) const {
    return {mean(static_cast<Eigen::Index>(4 * v)), mean(static_cast<Eigen::Index>(4 * v + 1))};
  }
};

inline EkfState ekf_init(const std::vector<Vec2>& first_fix, double sigma_gnss, const EkfConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(first_fix.size());
  EkfState s{Eigen::VectorXd::Zero(4 * n), Eigen::MatrixXd::Zero(4 * n, 4 * n)};
  for (Eigen::Index v = 0; v < n; ++v) {
    s.mean(4 * v) = first_fix[static_cast<std::size_t>(v)].x;
    s.mean(4 * v + 1) = first_fix[static_cast<std::size_t>(v)].y;
    s.cov(4 * v, 4 * v) = s.cov(4 * v + 1, 4 * v + 1) = sigma_gnss * sigma_gnss;
    s.cov(4 * v + 2, 4 * v + 2) = s.cov(4 * v + 3, 4 * v + 3) = cfg.init_vel_var;
  }
  return s;
}

/// Constant-velocity transition with white-acceleration noise of std
/// `accel_std` on each axis.
inline EkfState ekf_predict(const EkfState& s, double dt, double accel_std) {
  const auto dim = s.mean.size();
  Eigen::MatrixXd F = Eigen::MatrixXd::Identity(dim, dim);
  Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(dim, dim);
  const double q = accel_std * accel_std;
  for (Eigen::Index b = 0; b < dim; b += 4) {
    for (Eigen::Index k = 0; k < 2; ++k) {
      F(b + k, b + 2 + k) = dt;
      Q(b + k, b + k) = q * dt * dt * dt * dt / 4.0;
      Q(b + k, b + 2 + k) = Q(b + 2 + k, b + k) = q * dt * dt * dt / 2.0;
      Q(b + 2 + k, b + 2 + k) = q * dt * dt;
    }
  }
  EkfState out{F * s.mean, F * s.cov * F.transpose() + Q};
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

/// One joint update with GNSS fixes (may be empty) and external measurements
/// (group-local indices). Bearing innovations are wrapped; Joseph-form
/// covariance. `headings` is only read in the ego bearing frame.
inline EkfState ekf_update(const EkfState& s, const std::vector<Vec2>& internal,
                           const std::vector<ExternalMeasurement>& external, const NoiseConfig& noise,
                           const std::vector<double>& headings = {}) {
  const auto n = s.vehicles();
  const auto dim = s.mean.size();
  if (!internal.empty() && internal.size() != n) throw ShapeError("ekf_update: internal count != vehicles");
  const double floor = 1e-9;
  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> innov, var;
  for (std::size_t v = 0; v < internal.size(); ++v) {
    for (int k = 0; k < 2; ++k) {
      Eigen::RowVectorXd h = Eigen::RowVectorXd::Zero(dim);
      h(static_cast<Eigen::Index>(4 * v) + k) = 1.0;
      rows.push_back(h);
      const Vec2 p = s.position(v);
      innov.push_back(k == 0 ? internal[v].x - p.x : internal[v].y - p.y);
      var.push_back(std::max(noise.sigma_gnss * noise.sigma_gnss, floor));
    }
  }
  for (const auto& m : external) {
    const auto a = static_cast<std::size_t>(m.observer);
    const auto b = static_cast<std::size_t>(m.subject);
    if (a >= n || b >= n || a == b) throw ShapeError("ekf_update: bad measurement endpoints");
    const double heading = headings.empty() ? 0.0 : headings[a];
    const auto model = range_bearing_model(s.position(a), s.position(b), heading, noise.frame);
    if (!(model.range > 0.0)) continue;  // coincident predictions carry no direction
    const auto ia = static_cast<Eigen::Index>(4 * a), ib = static_cast<Eigen::Index>(4 * b);
    Eigen::RowVectorXd hr = Eigen::RowVectorXd::Zero(dim), hb = Eigen::RowVectorXd::Zero(dim);
    hr.segment<2>(ia) = model.d_range_d_obs;
    hr.segment<2>(ib) = model.d_range_d_sub;
    hb.segment<2>(ia) = model.d_bearing_d_obs;
    hb.segment<2>(ib) = model.d_bearing_d_sub;
    rows.push_back(hr);
    innov.push_back(m.range - model.range);
    var.push_back(std::max(noise.sigma_range * noise.sigma_range, floor));
    rows.push_back(hb);
    innov.push_back(wrap_angle(m.bearing - model.bearing));
    var.push_back(std::max(noise.sigma_bearing * noise.sigma_bearing, floor));
  }
  if (rows.empty()) return s;
  const auto mdim = static_cast<Eigen::Index>(rows.size());
  Eigen::MatrixXd H(mdim, dim);
  Eigen::VectorXd y(mdim);
  Eigen::VectorXd r(mdim);
  for (Eigen::Index i = 0; i < mdim; ++i) {
    H.row(i) = rows[static_cast<std::size_t>(i)];
    y(i) = innov[static_cast<std::size_t>(i)];
    r(i) = var[static_cast<std::size_t>(i)];
  }
  if (!y.allFinite()) throw NumericError("EKF innovation is not finite");
  const Eigen::MatrixXd PHt = s.cov * H.transpose();
  Eigen::MatrixXd S = H * PHt;
  S.diagonal() += r;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  const Eigen::MatrixXd K = ldlt.solve(PHt.transpose()).transpose();
  EkfState out;
  out.mean = s.mean + K * y;
  const Eigen::MatrixXd IKH = Eigen::MatrixXd::Identity(dim, dim) - K * H;
  out.cov = IKH * s.cov * IKH.transpose() + K * r.asDiagonal() * K.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  if (!out.mean.allFinite() || !out.cov.allFinite()) throw NumericError("EKF update produced non-finite state");
  return out;
}

/// Causal filtering over an episode. Step 0 initializes from the first GNSS
/// fixes and applies that step's external measurements.
inline EstimateGrid ekf_run(const Episode& ep, const NoiseConfig& noise, double dt, const EkfConfig& cfg = {}) {
  EstimateGrid out;
  EkfState s = ekf_init(ep.steps.front().internal, noise.sigma_gnss, cfg);
  for (std::size_t t = 0; t < ep.window(); ++t) {
    const auto& st = ep.steps[t];
    if (t == 0) {
      s = ekf_update(s, {}, st.external, noise, st.heading);
    } else {
      s = ekf_predict(s, dt, cfg.accel_std);
      s = ekf_update(s, st.internal, st.external, noise, st.heading);
    }
    std::vector<Vec2> est;
    for (std::size_t v = 0; v < ep.vehicles(); ++v) est.push_back(s.position(v));
    out.push_back(std::move(est));
  }
  return out;
}

// --- windowed maximum likelihood ---------------------------------------------------

struct MleOptions {
  int max_iterations = 200;
  double rel_tolerance = 1e-10;
  double lambda_init = 1e-3;
  double lambda_max = 1e12;
  bool motion_prior = false;  // constant-velocity second-difference prior
  double accel_std = 1.0;
  double dt = 1.0;
};

struct MleResult {
  EstimateGrid estimates;
  double cost = 0.0;  // 0.5 * sum of squared weighted residuals
  int iterations = 0;
  bool converged = false;
  bool diverged = false;  // hit the damping cap; estimates are the best iterate
  std::vector<double> cost_history;  // accepted iterates, starting point first
};

/// Stacked weighted residuals of the window problem. Variable layout:
/// index 2 * (t * N + v) + {0, 1}.
class MleProblem {
 public:
  MleProblem(const Episode& ep, const NoiseConfig& noise, const MleOptions& opt)
      : ep_(ep), noise_(noise), opt_(opt), n_(ep.vehicles()), window_(ep.window()) {}

  Eigen::Index variables() const { return static_cast<Eigen::Index>(2 * n_ * window_); }

  /// Residual count: 2NT GNSS + 2 per external measurement (+ prior terms).
  Eigen::Index residuals() const {
    Eigen::Index m = static_cast<Eigen::Index>(2 * n_ * window_);
    for (const auto& s : ep_.steps) m += static_cast<Eigen::Index>(2 * s.external.size());
    if (opt_.motion_prior && window_ >= 3) m += static_cast<Eigen::Index>(2 * n_ * (window_ - 2));
    return m;
  }

  Eigen::VectorXd initial() const {
    Eigen::VectorXd x(variables());
    for (std::size_t t = 0; t < window_; ++t)
      for (std::size_t v = 0; v < n_; ++v) {
        x(var(t, v)) = ep_.steps[t].internal[v].x;
        x(var(t, v) + 1) = ep_.steps[t].internal[v].y;
      }
    return x;
  }

  Eigen::VectorXd truth() const {
    Eigen::VectorXd x(variables());
    for (std::size_t t = 0; t < window_; ++t)
      for (std::size_t v = 0; v < n_; ++v) {
        x(var(t, v)) = ep_.steps[t].truth[v].x;
        x(var(t, v) + 1) = ep_.steps[t].truth[v].y;
      }
    return x;
  }

  double cost(const Eigen::VectorXd& x) const {
    double c = 0.0;
    visit(x, false, [&](double r, std::span<const std::pair<Eigen::Index, double>>) { c += r * r; });
    return 0.5 * c;
  }

  /// Gauss-Newton normal equations A = J^T J, g = J^T r, assembled term by term.
  double normal_equations(const Eigen::VectorXd& x, Eigen::MatrixXd& A, Eigen::VectorXd& g) const {
    A.setZero(variables(), variables());
    g.setZero(variables());
    double c = 0.0;
    visit(x, true, [&](double r, std::span<const std::pair<Eigen::Index, double>> jac) {
      c += r * r;
      for (const auto& [i, ji] : jac) {
        g(i) += ji * r;
        for (const auto& [k, jk] : jac) A(i, k) += ji * jk;
      }
    });
    return 0.5 * c;
  }

  /// Dense Jacobian (rows in residual order), for checks.
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const {
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(residuals(), variables());
    Eigen::Index row = 0;
    visit(x, true, [&](double, std::span<const std::pair<Eigen::Index, double>> jac) {
      for (const auto& [i, ji] : jac) J(row, i) += ji;
      ++row;
    });
    return J;
  }

  Eigen::VectorXd residual_vector(const Eigen::VectorXd& x) const {
    Eigen::VectorXd r(residuals());
    Eigen::Index row = 0;
    visit(x, false, [&](double v, std::span<const std::pair<Eigen::Index, double>>) { r(row++) = v; });
    return r;
  }

  EstimateGrid unpack(const Eigen::VectorXd& x) const {
    EstimateGrid out(window_);
    for (std::size_t t = 0; t < window_; ++t)
      for (std::size_t v = 0; v < n_; ++v) out[t].push_back({x(var(t, v)), x(var(t, v) + 1)});
    return out;
  }

 private:
  Eigen::Index var(std::size_t t, std::size_t v) const { return static_cast<Eigen::Index>(2 * (t * n_ + v)); }

  static double inv_sigma(double s) { return 1.0 / std::max(s, 1e-9); }

  template <class F>
  void visit(const Eigen::VectorXd& x, bool with_jacobian, F&& f) const {
    using Entry = std::pair<Eigen::Index, double>;
    const double wg = inv_sigma(noise_.sigma_gnss);
    const double wr = inv_sigma(noise_.sigma_range);
    const double wb = inv_sigma(noise_.sigma_bearing);
    for (std::size_t t = 0; t < window_; ++t) {
      const auto& s = ep_.steps[t];
      for (std::size_t v = 0; v < n_; ++v) {
        const auto i = var(t, v);
        const Entry jx[] = {{i, wg}};
        const Entry jy[] = {{i + 1, wg}};
        f(wg * (x(i) - s.internal[v].x), std::span<const Entry>(jx));
        f(wg * (x(i + 1) - s.internal[v].y), std::span<const Entry>(jy));
      }
      for (const auto& m : s.external) {
        const auto a = static_cast<std::size_t>(m.observer);
        const auto b = static_cast<std::size_t>(m.subject);
        const auto ia = var(t, a), ib = var(t, b);
        const auto model = range_bearing_model({x(ia), x(ia + 1)}, {x(ib), x(ib + 1)}, s.heading[a], noise_.frame);
        Entry jr[4], jb[4];
        if (with_jacobian) {
          jr[0] = {ia, wr * model.d_range_d_obs(0)};
          jr[1] = {ia + 1, wr * model.d_range_d_obs(1)};
          jr[2] = {ib, wr * model.d_range_d_sub(0)};
          jr[3] = {ib + 1, wr * model.d_range_d_sub(1)};
          jb[0] = {ia, wb * model.d_bearing_d_obs(0)};
          jb[1] = {ia + 1, wb * model.d_bearing_d_obs(1)};
          jb[2] = {ib, wb * model.d_bearing_d_sub(0)};
          jb[3] = {ib + 1, wb * model.d_bearing_d_sub(1)};
        }
        f(wr * (model.range - m.range), std::span<const Entry>(jr, with_jacobian ? 4 : 0));
        f(wb * wrap_angle(model.bearing - m.bearing), std::span<const Entry>(jb, with_jacobian ? 4 : 0));
      }
    }
    if (opt_.motion_prior && window_ >= 3) {
      const double wp = inv_sigma(opt_.accel_std * opt_.dt * opt_.dt);
      for (std::size_t t = 1; t + 1 < window_; ++t)
        for (std::size_t v = 0; v < n_; ++v)
          for (Eigen::Index k = 0; k < 2; ++k) {
            const auto i0 = var(t - 1, v) + k, i1 = var(t, v) + k, i2 = var(t + 1, v) + k;
            const Entry j[] = {{i0, wp}, {i1, -2.0 * wp}, {i2, wp}};
            f(wp * (x(i0) - 2.0 * x(i1) + x(i2)), std::span<const Entry>(j));
          }
    }
  }

  const Episode& ep_;
  NoiseConfig noise_;
  MleOptions opt_;
  std::size_t n_;
  std::size_t window_;
};

/// Levenberg-Marquardt on the window problem, started at the GNSS fixes.
/// Damping: (A + lambda diag(A)) step = -g, lambda x10 on reject, /10 on accept.
inline MleResult mle_window(const Episode& ep, const NoiseConfig& noise, const MleOptions& opt = {}) {
  const MleProblem problem(ep, noise, opt);
  Eigen::VectorXd x = problem.initial();
  Eigen::MatrixXd A;
  Eigen::VectorXd g;
  double cost = problem.normal_equations(x, A, g);
  MleResult res;
  res.cost_history.push_back(cost);
  double lambda = opt.lambda_init;
  bool need_system = false;
  while (res.iterations < opt.max_iterations) {
    if (cost == 0.0 || g.lpNorm<Eigen::Infinity>() == 0.0) {
      res.converged = true;
      break;
    }
    if (need_system) {
      cost = problem.normal_equations(x, A, g);
      need_system = false;
    }
    ++res.iterations;
    Eigen::MatrixXd damped = A;
    damped.diagonal() += lambda * A.diagonal();
    const Eigen::VectorXd step = damped.ldlt().solve(-g);
    const Eigen::VectorXd candidate = x + step;
    const double new_cost = step.allFinite() ? problem.cost(candidate) : std::numeric_limits<double>::infinity();
    if (new_cost < cost) {
      const double rel = (cost - new_cost) / cost;
      x = candidate;
      cost = new_cost;
      res.cost_history.push_back(cost);
      lambda = std::max(lambda / 10.0, 1e-15);
      need_system = true;
      if (rel < opt.rel_tolerance) {
        res.converged = true;
        break;
      }
    } else {
      lambda *= 10.0;
      if (lambda > opt.lambda_max) {
        // No descent left at any damping: either converged to machine
        // precision or stuck. Both return the best iterate.
        res.diverged = problem.cost(x) > 0.0 && g.norm() > 1e-6 * std::max(1.0, std::sqrt(2.0 * cost));
        res.converged = !res.diverged;
        break;
      }
    }
  }
  res.cost = cost;
  res.estimates = problem.unpack(x);
  return res;
}

// --- GCN -------------------------------------------------------------------------

struct GcnParams {
  tc::Index hidden = 128;
  double position_scale = 1000.0;
  double range_scale = 500.0;
  tc::ParamSet tensors;
  Vec2 origin{};  // positions are taken relative to this point before scaling

  static constexpr tc::Index kInput = 5;  // internal fix (2) + pooled external encoding (3)

  static GcnParams init(tc::Index hidden, std::uint64_t seed, double position_scale = 1000.0,
                        double range_scale = 500.0) {
    if (hidden < 1) throw ConfigError("gcn hidden width must be positive");
    GcnParams p{hidden, position_scale, range_scale, {}};
    Rng rng(stream_key(seed, "gcn-init"));
    tc::add_dense(p.tensors, "gcn.l1", kInput, hidden, rng);
    tc::add_dense(p.tensors, "gcn.l2", hidden, hidden, rng);
    tc::add_dense(p.tensors, "gcn.head.l1", hidden, hidden, rng);
    tc::add_dense(p.tensors, "gcn.head.l2", hidden, 2, rng);
    return p;
  }
};

/// Node features for one step: internal fix / L and the sum of the node's
/// encoded measurements of its measurement-domain neighbors.
inline tc::Matrix gcn_features(const GcnParams& p, const EpisodeStep& s) {
  const auto n = s.truth.size();
  tc::Matrix x = tc::Matrix::Zero(static_cast<tc::Index>(n), GcnParams::kInput);
  NoiseConfig enc;
  enc.rho_meas = p.range_scale;
  for (std::size_t v = 0; v < n; ++v) {
    x(static_cast<tc::Index>(v), 0) = (s.internal[v].x - p.origin.x) / p.position_scale;
    x(static_cast<tc::Index>(v), 1) = (s.internal[v].y - p.origin.y) / p.position_scale;
  }
  for (const auto& m : s.external) {
    if (!s.graphs.meas(static_cast<std::size_t>(m.observer), static_cast<std::size_t>(m.subject))) continue;
    const auto e = encode_external(m, enc);
    for (int k = 0; k < 3; ++k) x(m.observer, 2 + k) += e[static_cast<std::size_t>(k)];
  }
  return x;
}

/// Links of D^-1/2 (A + I) D^-1/2 for adjacency `adj`, rows offset by `off`,
/// ordered by (output row, input row).
inline void normalized_links(const Adjacency& adj, int off, std::vector<tc::Tape::Link>& out) {
  const auto n = adj.size();
  std::vector<double> deg(n, 1.0);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (adj(a, b)) deg[a] += 1.0;
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b)
      if (a == b || adj(a, b))
        out.push_back({off + static_cast<int>(a), off + static_cast<int>(b), 1.0 / std::sqrt(deg[a] * deg[b])});
}

struct GcnForward {
  tc::Var estimates;             // correction / L; rows: episode-major, then step, then vehicle
  std::vector<std::size_t> offsets;  // first row of each episode
  std::size_t rows = 0;
};

/// H1 = ReLU(Ahat_meas X W1 + b1), H2 = ReLU(Ahat_comm H1 W2 + b2), then a
/// two-layer head giving a normalized correction to each vehicle's own fix.
/// Every (episode, step) graph is processed independently.
inline GcnForward gcn_forward_batch(tc::Tape& tape, const GcnParams& p, std::span<const Episode* const> episodes) {
  GcnForward out;
  for (const auto* ep : episodes) {
    out.offsets.push_back(out.rows);
    out.rows += ep->vehicles() * ep->window();
  }
  const auto rows = static_cast<tc::Index>(out.rows);
  tc::Matrix x(rows, GcnParams::kInput);
  std::vector<tc::Tape::Link> meas_links, comm_links;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = *episodes[e];
    for (std::size_t t = 0; t < ep.window(); ++t) {
      const int off = static_cast<int>(out.offsets[e] + t * ep.vehicles());
      x.middleRows(off, static_cast<tc::Index>(ep.vehicles())) = gcn_features(p, ep.steps[t]);
      normalized_links(ep.steps[t].graphs.meas, off, meas_links);
      normalized_links(ep.steps[t].graphs.comm, off, comm_links);
    }
  }
  auto P = [&](const char* n) { return tape.param(p.tensors, n); };
  const tc::Var x0 = tape.constant(std::move(x));
  const tc::Var h1 = tape.relu(tape.linear(tape.aggregate_rows(x0, std::move(meas_links), rows), P("gcn.l1.W"), P("gcn.l1.b")));
  const tc::Var h2 = tape.relu(tape.linear(tape.aggregate_rows(h1, std::move(comm_links), rows), P("gcn.l2.W"), P("gcn.l2.b")));
  const tc::Var head = tape.relu(tape.linear(h2, P("gcn.head.l1.W"), P("gcn.head.l1.b")));
  out.estimates = tape.linear(head, P("gcn.head.l2.W"), P("gcn.head.l2.b"));
  return out;
}

/// Estimates (meters) for a single step of an episode.
inline std::vector<Vec2> gcn_forward(const GcnParams& p, const Episode& ep, std::size_t t) {
  Episode one;
  one.vehicle_ids = ep.vehicle_ids;
  one.steps = {ep.steps.at(t)};
  tc::Tape tape(false);
  const Episode* batch[] = {&one};
  const auto fwd = gcn_forward_batch(tape, p, batch);
  std::vector<Vec2> out;
  const auto& m = tape.value(fwd.estimates);
  const auto& fix = ep.steps[t].internal;
  for (tc::Index v = 0; v < m.rows(); ++v) {
    const auto& f = fix[static_cast<std::size_t>(v)];
    out.push_back({f.x + p.position_scale * m(v, 0), f.y + p.position_scale * m(v, 1)});
  }
  return out;
}

inline tc::Var gcn_batch_loss(tc::Tape& tape, const GcnParams& p, std::span<const Episode* const> episodes) {
  const auto fwd = gcn_forward_batch(tape, p, episodes);
  const auto rows = static_cast<tc::Index>(fwd.rows);
  tc::Matrix target(rows, 2);
  tc::Vector weights(rows);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = *episodes[e];
    const double w = 1.0 / (static_cast<double>(episodes.size()) * static_cast<double>(ep.vehicles() * ep.window()));
    for (std::size_t t = 0; t < ep.window(); ++t)
      for (std::size_t v = 0; v < ep.vehicles(); ++v) {
        const auto r = static_cast<tc::Index>(fwd.offsets[e] + t * ep.vehicles() + v);
        target(r, 0) = ep.steps[t].truth[v].x - ep.steps[t].internal[v].x;
        target(r, 1) = ep.steps[t].truth[v].y - ep.steps[t].internal[v].y;
        weights(r) = w;
      }
  }
  return tape.weighted_distance_sum(fwd.estimates, target, p.position_scale, weights);
}

inline std::vector<EstimateGrid> gcn_estimate_all(const GcnParams& p, const std::vector<Episode>& episodes,
                                                  std::size_t chunk = 32) {
  std::vector<EstimateGrid> out;
  for (std::size_t i = 0; i < episodes.size(); i += chunk) {
    std::vector<const Episode*> batch;
    for (std::size_t k = i; k < std::min(episodes.size(), i + chunk); ++k) batch.push_back(&episodes[k]);
    tc::Tape tape(false);
    const auto fwd = gcn_forward_batch(tape, p, batch);
    const auto& m = tape.value(fwd.estimates);
    for (std::size_t e = 0; e < batch.size(); ++e) {
      const auto& ep = *batch[e];
      EstimateGrid grid(ep.window());
      for (std::size_t t = 0; t < ep.window(); ++t)
        for (std::size_t v = 0; v < ep.vehicles(); ++v) {
          const auto r = static_cast<tc::Index>(fwd.offsets[e] + t * ep.vehicles() + v);
          const auto& f = ep.steps[t].internal[v];
          grid[t].push_back({f.x + p.position_scale * m(r, 0), f.y + p.position_scale * m(r, 1)});
        }
      out.push_back(std::move(grid));
    }
  }
  return out;
}

/// Same loss, optimizer and loop as the recurrent model.
inline std::vector<CurveRow> gcn_train(GcnParams& p, tc::AdamState& adam, const std::vector<Episode>& train_set,
                                       const std::vector<Episode>& eval_set, const TrainConfig& cfg,
                                       const ProgressFn& progress = {}) {
  if (adam.m.size() != p.tensors.size()) adam = tc::AdamState::for_params(p.tensors, cfg.lr);
  auto loss_fn = [&](tc::Tape& tape, const tc::ParamSet&, const std::vector<const Episode*>& batch) {
    return gcn_batch_loss(tape, p, batch);
  };
  auto eval_fn = [&](const tc::ParamSet&) {
    return eval_set.empty() ? 0.0 : summarize(gcn_estimate_all(p, eval_set), eval_set).aggregate;
  };
  return run_training(p.tensors, adam, train_set, cfg, cfg.steps, loss_fn, eval_fn, progress);
}

inline tc::Checkpoint gcn_to_checkpoint(const GcnParams& p, const std::optional<tc::AdamState>& adam) {
  tc::Checkpoint ck{p.tensors, adam, nlohmann::json::object()};
  ck.meta["model"] = "gcn";
  ck.meta["scheme"] = "gcn";
  ck.meta["position_scale"] = p.position_scale;
  ck.meta["range_scale"] = p.range_scale;
  ck.meta["origin"] = {p.origin.x, p.origin.y};
  return ck;
}

inline GcnParams gcn_from_checkpoint(const tc::Checkpoint& ck) {
  if (ck.meta.value("model", "") != "gcn") throw ConfigError("checkpoint does not hold a gcn model");
  GcnParams p;
  p.tensors = ck.params;
  p.hidden = p.tensors.at("gcn.l1.W").rows();
  p.position_scale = ck.meta.at("position_scale").get<double>();
  p.range_scale = ck.meta.at("range_scale").get<double>();
  p.origin = {ck.meta.at("origin").at(0).get<double>(), ck.meta.at("origin").at(1).get<double>()};
  if (p.tensors.at("gcn.l1.W").cols() != GcnParams::kInput) throw ShapeError("gcn.l1.W has wrong input width");
  return p;
}

}  // namespace mlcl
