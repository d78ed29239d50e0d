#pragma once

// The recurrent message-passing localizer. Four shared units run on every
// vehicle:
//   mtnn  previous state + measurement of a neighbor -> outgoing message
//   mrnn  incoming message + measurement of the sender -> latent
//   sunn  GRU over (sum of latents | own GNSS fix)     -> new state
//   lenn  state                                         -> position estimate
// A missing measurement or communication link feeds a zero vector in place of
// the corresponding input.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlcl/errors.hpp"
#include "mlcl/geometry.hpp"
#include "mlcl/sensing.hpp"
#include "mlcl/tensorcore.hpp"
#include "mlcl/training.hpp"

namespace mlcl {

using tc::Index;
using tc::Matrix;
using tc::Vector;

struct MlclDims {
  Index state = 32;    // d_s
  Index message = 32;  // d_m
  Index hidden = 128;
};

/// Shared weights of all four units plus the fixed input scalings.
struct MlclParams {
  MlclDims dims;
  double position_scale = 1000.0;  // L: positions enter and leave the networks divided by this
  double range_scale = 500.0;      // rho_meas used by encode_external
  tc::ParamSet tensors;
  Vec2 origin{};  // positions are taken relative to this point before scaling

  static MlclParams init(const MlclDims& dims, std::uint64_t seed, double position_scale = 1000.0,
                         double range_scale = 500.0) {
    if (dims.state < 1 || dims.message < 1 || dims.hidden < 1) throw ConfigError("network dims must be positive");
    MlclParams p{dims, position_scale, range_scale, {}};
    Rng rng(stream_key(seed, "init"));
    tc::add_dense(p.tensors, "mtnn.l1", dims.state + 3, dims.hidden, rng);
    tc::add_dense(p.tensors, "mtnn.l2", dims.hidden, dims.message, rng);
    tc::add_dense(p.tensors, "mrnn.l1", dims.message + 3, dims.hidden, rng);
    tc::add_dense(p.tensors, "mrnn.l2", dims.hidden, dims.message, rng);
    tc::add_gru(p.tensors, "sunn", dims.message + 2, dims.state, rng);
    tc::add_dense(p.tensors, "lenn.l1", dims.state, dims.hidden, rng);
    tc::add_dense(p.tensors, "lenn.l2", dims.hidden, 2, rng);
    return p;
  }

  /// Re-derives dims from tensor shapes (e.g. after loading a checkpoint).
  static MlclParams from_tensors(tc::ParamSet tensors, double position_scale, double range_scale) {
    MlclParams p;
    p.dims.hidden = tensors.at("mtnn.l1.W").rows();
    p.dims.state = tensors.at("mtnn.l1.W").cols() - 3;
    p.dims.message = tensors.at("mtnn.l2.W").rows();
    p.position_scale = position_scale;
    p.range_scale = range_scale;
    p.tensors = std::move(tensors);
    auto expect = [&](const char* name, Index r, Index c) {
      const auto& m = p.tensors.at(name);
      if (m.rows() != r || m.cols() != c) throw ShapeError(std::string("parameter ") + name + " has wrong shape");
    };
    const auto& d = p.dims;
    expect("mrnn.l1.W", d.hidden, d.message + 3);
    expect("mrnn.l2.W", d.message, d.hidden);
    expect("sunn.W_z", d.state, d.message + 2);
    expect("sunn.U_z", d.state, d.state);
    expect("lenn.l1.W", d.hidden, d.state);
    expect("lenn.l2.W", 2, d.hidden);
    return p;
  }
};

namespace detail {

inline Vector two_layer(const tc::ParamSet& ps, const std::string& unit, const Vector& x) {
  return tc::dense_forward(tc::dense_view(ps, unit + ".l2"), tc::relu(tc::dense_forward(tc::dense_view(ps, unit + ".l1"), x)));
}

inline Vector concat(const Vector& a, const Vector& b) {
  Vector out(a.size() + b.size());
  out << a, b;
  return out;
}

inline Vector feature_or_zero(const std::optional<Vector>& v, Index width) {
  if (!v) return Vector::Zero(width);
  if (v->size() != width) throw ShapeError("input feature has wrong length");
  return *v;
}

}  // namespace detail

/// Message M_{A->B} from A's previous state and A's measurement of B
/// (nullopt when A and B are not measurement-connected).
inline Vector mtnn_forward(const MlclParams& p, const Vector& s_prev, const std::optional<Vector>& e_feat) {
  if (s_prev.size() != p.dims.state) throw ShapeError("mtnn_forward: state has wrong length");
  return detail::two_layer(p.tensors, "mtnn", detail::concat(s_prev, detail::feature_or_zero(e_feat, 3)));
}

/// Latent for neighbor B at A from M_{B->A} (nullopt without a comm link) and
/// A's measurement of B (nullopt without a measurement link).
inline Vector mrnn_forward(const MlclParams& p, const std::optional<Vector>& m_in, const std::optional<Vector>& e_feat) {
  return detail::two_layer(p.tensors, "mrnn",
                           detail::concat(detail::feature_or_zero(m_in, p.dims.message),
                                          detail::feature_or_zero(e_feat, 3)));
}

/// S_t = GRU(sum_pool(latents) | I_feat, S_prev). `i_feat` is the internal
/// fix divided by the position scale.
inline Vector aggregate_and_update(const MlclParams& p, const std::vector<Vector>& latents, const Vector& i_feat,
                                   const Vector& s_prev) {
  if (i_feat.size() != 2) throw ShapeError("aggregate_and_update: internal feature must have length 2");
  const Vector pooled = tc::sum_pool(latents, p.dims.message);
  return tc::gru_forward(tc::gru_view(p.tensors, "sunn"), detail::concat(pooled, i_feat), s_prev);
}

/// Position estimate in meters.
inline Vec2 lenn_forward(const MlclParams& p, const Vector& s_t) {
  if (s_t.size() != p.dims.state) throw ShapeError("lenn_forward: state has wrong length");
  const Vector out = detail::two_layer(p.tensors, "lenn", s_t);
  return {p.origin.x + p.position_scale * out(0), p.origin.y + p.position_scale * out(1)};
}

inline Vector encode_feature(const ExternalMeasurement& m, double range_scale) {
  NoiseConfig c;
  c.rho_meas = range_scale;
  const auto e = encode_external(m, c);
  return Vector{{e[0], e[1], e[2]}};
}

struct Message {
  int from = 0;  // group-local index
  int to = 0;
  Vector value;
};

struct RolloutRecord {
  std::vector<std::vector<Vector>> states;      // [t][vehicle], S^1..S^T
  std::vector<std::vector<Message>> messages;   // [t], one per directed comm edge
  EstimateGrid estimates;                       // [t][vehicle], meters
  double loss = 0.0;                            // MAE against the episode truth
};

/// Index into step.external of "a measured b", or -1.
inline std::vector<int> external_lookup(const EpisodeStep& s, std::size_t n) {
  std::vector<int> idx(n * n, -1);
  for (std::size_t k = 0; k < s.external.size(); ++k) {
    const auto& m = s.external[k];
    idx[static_cast<std::size_t>(m.observer) * n + static_cast<std::size_t>(m.subject)] = static_cast<int>(k);
  }
  return idx;
}

inline double loss_mae(const RolloutRecord& record, const Episode& ep) { return episode_mae(record.estimates, ep); }

/// Straightforward per-vehicle rollout built from the unit functions above.
/// Serves as the readable definition of the update order; `rollout` is the
/// batched equivalent used for training.
inline RolloutRecord rollout_reference(const MlclParams& p, const Episode& ep, bool disable_comm) {
  const auto n = ep.vehicles();
  RolloutRecord rec;
  std::vector<Vector> state(n, Vector::Zero(p.dims.state));
  for (const auto& s : ep.steps) {
    if (s.truth.size() != n) throw ShapeError("episode step has wrong group size");
    const auto ext = external_lookup(s, n);
    auto e_feat = [&](std::size_t a, std::size_t b) -> std::optional<Vector> {
      const int k = ext[a * n + b];
      if (!s.graphs.meas(a, b) || k < 0) return std::nullopt;
      return encode_feature(s.external[static_cast<std::size_t>(k)], p.range_scale);
    };
    auto comm = [&](std::size_t a, std::size_t b) { return !disable_comm && s.graphs.comm(a, b); };

    // (1) + (2): messages along comm edges, built from the previous states.
    std::vector<Message> msgs;
    std::vector<std::optional<Vector>> inbox(n * n);
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (a != b && comm(a, b)) {
          Vector m = mtnn_forward(p, state[a], e_feat(a, b));
          inbox[b * n + a] = m;
          msgs.push_back({static_cast<int>(a), static_cast<int>(b), std::move(m)});
        }
    // (3) - (5)
    std::vector<Vector> next(n);
    std::vector<Vec2> est(n);
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<Vector> latents;
      for (std::size_t b = 0; b < n; ++b) {
        if (a == b || !(s.graphs.meas(a, b) || comm(a, b))) continue;
        latents.push_back(mrnn_forward(p, inbox[a * n + b], e_feat(a, b)));
      }
      const Vector i_feat{{(s.internal[a].x - p.origin.x) / p.position_scale,
                           (s.internal[a].y - p.origin.y) / p.position_scale}};
      next[a] = aggregate_and_update(p, latents, i_feat, state[a]);
      est[a] = lenn_forward(p, next[a]);
    }
    state = next;
    rec.states.push_back(std::move(next));
    rec.messages.push_back(std::move(msgs));
    rec.estimates.push_back(std::move(est));
  }
  rec.loss = loss_mae(rec, ep);
  return rec;
}

/// Output of the batched forward pass over several episodes. Rows of every
/// per-step node are the vehicles of all episodes, episode after episode.
struct BatchForward {
  std::vector<std::size_t> offsets;  // first row of each episode
  std::size_t rows = 0;
  std::vector<tc::Var> states;       // per step, rows x d_s
  std::vector<tc::Var> estimates;    // per step, rows x 2 (normalized)
  std::vector<tc::Var> messages;     // per step, one row per comm edge (invalid id when none)
  std::vector<std::vector<std::pair<int, int>>> message_edges;  // per step, (from row, to row)
};

namespace detail {

struct UnitVars {
  tc::Var w1, b1, w2, b2;
};

inline UnitVars unit_vars(tc::Tape& tape, const tc::ParamSet& ps, const std::string& unit) {
  return {tape.param(ps, unit + ".l1.W"), tape.param(ps, unit + ".l1.b"), tape.param(ps, unit + ".l2.W"),
          tape.param(ps, unit + ".l2.b")};
}

/// Batched GRU with the same equations as tc::gru_forward.
inline tc::Var gru_batch(tc::Tape& t, const tc::ParamSet& ps, const std::string& prefix, tc::Var x, tc::Var h) {
  auto P = [&](const char* n) { return t.param(ps, prefix + "." + n); };
  const tc::Var z = t.sigmoid(t.add(t.linear(x, P("W_z"), P("b_z")), t.matmul_nt(h, P("U_z"))));
  const tc::Var r = t.sigmoid(t.add(t.linear(x, P("W_r"), P("b_r")), t.matmul_nt(h, P("U_r"))));
  const tc::Var c = t.tanh(t.add(t.linear(x, P("W_h"), P("b_h")), t.matmul_nt(t.mul(r, h), P("U_h"))));
  return t.add(t.mul(t.one_minus(z), h), t.mul(z, c));
}

}  // namespace detail

/// Explicit switching: inputs forced to zero while the edges stay in place.
/// Arguments are (episode in batch, step, receiver a, neighbor b).
struct ZeroFill {
  std::function<bool(std::size_t, std::size_t, std::size_t, std::size_t)> message;      // M_{b->a} at a
  std::function<bool(std::size_t, std::size_t, std::size_t, std::size_t)> measurement;  // a's E about b
};

/// Batched rollout of `episodes` (equal windows) on `tape`. The second layer
/// of mrnn is applied after pooling: sum_B (W2 h_B + b2) = W2 sum_B h_B + k b2.
inline BatchForward forward_batch(tc::Tape& tape, const MlclParams& p, std::span<const Episode* const> episodes,
                                  bool disable_comm, const ZeroFill* zero_fill = nullptr) {
  if (episodes.empty()) throw ConfigError("forward_batch needs at least one episode");
  const std::size_t window = episodes.front()->window();
  BatchForward out;
  for (const auto* ep : episodes) {
    if (ep->window() != window) throw ShapeError("episodes in a batch must share the window length");
    out.offsets.push_back(out.rows);
    out.rows += ep->vehicles();
  }
  const auto rows = static_cast<Index>(out.rows);
  const auto& d = p.dims;
  const auto mt = detail::unit_vars(tape, p.tensors, "mtnn");
  const auto mr = detail::unit_vars(tape, p.tensors, "mrnn");
  const auto le = detail::unit_vars(tape, p.tensors, "lenn");

  tc::Var state = tape.constant(Matrix::Zero(rows, d.state));
  for (std::size_t t = 0; t < window; ++t) {
    // Sender-side message edges (a -> b) and receiver-side union edges (a <- b).
    std::vector<int> senders;
    std::vector<std::array<double, 3>> send_feat;
    std::vector<std::pair<int, int>> msg_edges;
    std::vector<int> recv_seg, recv_msg;
    std::vector<std::array<double, 3>> recv_feat;
    Matrix i_feat(rows, 2);
    for (std::size_t e = 0; e < episodes.size(); ++e) {
      const auto& ep = *episodes[e];
      const auto& s = ep.steps[t];
      const auto n = ep.vehicles();
      const auto off = out.offsets[e];
      const auto ext = external_lookup(s, n);
      auto feat = [&](std::size_t a, std::size_t b) -> std::array<double, 3> {
        const int k = ext[a * n + b];
        if (!s.graphs.meas(a, b) || k < 0) return {0.0, 0.0, 0.0};
        if (zero_fill && zero_fill->measurement && zero_fill->measurement(e, t, a, b)) return {0.0, 0.0, 0.0};
        const Vector f = encode_feature(s.external[static_cast<std::size_t>(k)], p.range_scale);
        return {f(0), f(1), f(2)};
      };
      auto comm = [&](std::size_t a, std::size_t b) { return !disable_comm && s.graphs.comm(a, b); };
      std::vector<int> msg_id(n * n, -1);
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t b = 0; b < n; ++b)
          if (a != b && comm(a, b)) {
            msg_id[a * n + b] = static_cast<int>(senders.size());
            senders.push_back(static_cast<int>(off + a));
            send_feat.push_back(feat(a, b));
            msg_edges.push_back({static_cast<int>(off + a), static_cast<int>(off + b)});
          }
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          if (a == b || !(s.graphs.meas(a, b) || comm(a, b))) continue;
          recv_seg.push_back(static_cast<int>(off + a));
          const bool muted = zero_fill && zero_fill->message && zero_fill->message(e, t, a, b);
          recv_msg.push_back(muted ? -1 : msg_id[b * n + a]);
          recv_feat.push_back(feat(a, b));
        }
        i_feat(static_cast<Index>(off + a), 0) = (s.internal[a].x - p.origin.x) / p.position_scale;
        i_feat(static_cast<Index>(off + a), 1) = (s.internal[a].y - p.origin.y) / p.position_scale;
      }
    }
    auto feat_matrix = [](const std::vector<std::array<double, 3>>& f) {
      Matrix m(static_cast<Index>(f.size()), 3);
      for (std::size_t i = 0; i < f.size(); ++i)
        for (Index c = 0; c < 3; ++c) m(static_cast<Index>(i), c) = f[i][static_cast<std::size_t>(c)];
      return m;
    };

    tc::Var messages{};
    if (!senders.empty()) {
      const tc::Var x = tape.concat_cols(tape.gather_rows(state, senders), tape.constant(feat_matrix(send_feat)));
      messages = tape.linear(tape.relu(tape.linear(x, mt.w1, mt.b1)), mt.w2, mt.b2);
    }

    tc::Var pooled;
    if (!recv_seg.empty()) {
      const auto k = static_cast<Index>(recv_seg.size());
      const tc::Var m_in = senders.empty() ? tape.constant(Matrix::Zero(k, d.message)) : tape.gather_rows(messages, recv_msg);
      const tc::Var x = tape.concat_cols(m_in, tape.constant(feat_matrix(recv_feat)));
      const tc::Var h = tape.relu(tape.linear(x, mr.w1, mr.b1));
      Vector counts = Vector::Zero(rows);
      for (int r : recv_seg) counts(r) += 1.0;
      pooled = tape.linear_scaled_bias(tape.segment_sum(h, recv_seg, rows), mr.w2, mr.b2, counts);
    } else {
      pooled = tape.constant(Matrix::Zero(rows, d.message));
    }

    const tc::Var x = tape.concat_cols(pooled, tape.constant(std::move(i_feat)));
    state = detail::gru_batch(tape, p.tensors, "sunn", x, state);
    const tc::Var est = tape.linear(tape.relu(tape.linear(state, le.w1, le.b1)), le.w2, le.b2);
    out.states.push_back(state);
    out.estimates.push_back(est);
    out.messages.push_back(messages);
    out.message_edges.push_back(std::move(msg_edges));
  }
  return out;
}

/// Mean over episodes of the episode MAE (meters), as a tape scalar.
inline tc::Var batch_loss(tc::Tape& tape, const MlclParams& p, std::span<const Episode* const> episodes,
                          bool disable_comm) {
  const BatchForward fwd = forward_batch(tape, p, episodes, disable_comm);
  const auto rows = static_cast<Index>(fwd.rows);
  const std::size_t window = episodes.front()->window();
  Vector weights(rows);
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto n = episodes[e]->vehicles();
    const double w = 1.0 / (static_cast<double>(episodes.size()) * static_cast<double>(n) * static_cast<double>(window));
    for (std::size_t v = 0; v < n; ++v) weights(static_cast<Index>(fwd.offsets[e] + v)) = w;
  }
  tc::Var total{};
  for (std::size_t t = 0; t < window; ++t) {
    Matrix target(rows, 2);
    for (std::size_t e = 0; e < episodes.size(); ++e)
      for (std::size_t v = 0; v < episodes[e]->vehicles(); ++v) {
        target(static_cast<Index>(fwd.offsets[e] + v), 0) = episodes[e]->steps[t].truth[v].x - p.origin.x;
        target(static_cast<Index>(fwd.offsets[e] + v), 1) = episodes[e]->steps[t].truth[v].y - p.origin.y;
      }
    const tc::Var term = tape.weighted_distance_sum(fwd.estimates[t], target, p.position_scale, weights);
    total = t == 0 ? term : tape.add(total, term);
  }
  return total;
}

/// Forward pass over one episode without gradient recording.
inline RolloutRecord rollout(const MlclParams& p, const Episode& ep, bool disable_comm,
                             const ZeroFill* zero_fill = nullptr) {
  tc::Tape tape(false);
  const Episode* one[] = {&ep};
  const BatchForward fwd = forward_batch(tape, p, one, disable_comm, zero_fill);
  RolloutRecord rec;
  for (std::size_t t = 0; t < ep.window(); ++t) {
    const Matrix& s = tape.value(fwd.states[t]);
    const Matrix& x = tape.value(fwd.estimates[t]);
    std::vector<Vector> states;
    std::vector<Vec2> est;
    for (Index v = 0; v < s.rows(); ++v) {
      states.push_back(s.row(v).transpose());
      est.push_back({p.origin.x + p.position_scale * x(v, 0), p.origin.y + p.position_scale * x(v, 1)});
    }
    std::vector<Message> msgs;
    for (std::size_t k = 0; k < fwd.message_edges[t].size(); ++k)
      msgs.push_back({fwd.message_edges[t][k].first, fwd.message_edges[t][k].second,
                      tape.value(fwd.messages[t]).row(static_cast<Index>(k)).transpose()});
    rec.states.push_back(std::move(states));
    rec.estimates.push_back(std::move(est));
    rec.messages.push_back(std::move(msgs));
  }
  rec.loss = loss_mae(rec, ep);
  return rec;
}

/// Estimates for many episodes, batched in chunks of `chunk` episodes that
/// share a window length.
inline std::vector<EstimateGrid> estimate_all(const MlclParams& p, const std::vector<Episode>& episodes,
                                              bool disable_comm, std::size_t chunk = 32) {
  std::vector<EstimateGrid> out(episodes.size());
  std::size_t i = 0;
  while (i < episodes.size()) {
    std::vector<const Episode*> batch;
    std::vector<std::size_t> ids;
    const std::size_t w = episodes[i].window();
    while (i < episodes.size() && batch.size() < chunk && episodes[i].window() == w) {
      batch.push_back(&episodes[i]);
      ids.push_back(i);
      ++i;
    }
    tc::Tape tape(false);
    const BatchForward fwd = forward_batch(tape, p, batch, disable_comm);
    for (std::size_t e = 0; e < batch.size(); ++e) {
      EstimateGrid grid(w);
      for (std::size_t t = 0; t < w; ++t) {
        const Matrix& x = tape.value(fwd.estimates[t]);
        for (std::size_t v = 0; v < batch[e]->vehicles(); ++v) {
          const auto r = static_cast<Index>(fwd.offsets[e] + v);
          grid[t].push_back({p.origin.x + p.position_scale * x(r, 0), p.origin.y + p.position_scale * x(r, 1)});
        }
      }
      out[ids[e]] = std::move(grid);
    }
  }
  return out;
}

/// Rollout without gradients over a dataset; tail > 0 restricts the MAE to
/// the final `tail` steps of each episode.
inline EvalResult evaluate(const MlclParams& p, const std::vector<Episode>& episodes, bool disable_comm,
                           std::size_t tail = 0) {
  return summarize(estimate_all(p, episodes, disable_comm), episodes, tail);
}

/// Trains the shared parameters on `train_set` with BPTT through every step
/// and message edge; `eval_set` feeds the eval column of the curve.
inline std::vector<CurveRow> train(MlclParams& p, tc::AdamState& adam, const std::vector<Episode>& train_set,
                                   const std::vector<Episode>& eval_set, const TrainConfig& cfg,
                                   const ProgressFn& progress = {}) {
  if (cfg.position_scale != p.position_scale) throw ConfigError("train config and parameters disagree on L");
  if (adam.m.size() != p.tensors.size()) adam = tc::AdamState::for_params(p.tensors, cfg.lr);
  auto loss_fn = [&](tc::Tape& tape, const tc::ParamSet&, const std::vector<const Episode*>& batch) {
    return batch_loss(tape, p, batch, cfg.disable_comm);
  };
  auto eval_fn = [&](const tc::ParamSet&) {
    return eval_set.empty() ? 0.0 : evaluate(p, eval_set, cfg.disable_comm).aggregate;
  };
  return run_training(p.tensors, adam, train_set, cfg, cfg.steps, loss_fn, eval_fn, progress);
}

/// Checkpoint with scales and dims recorded in the metadata.
inline tc::Checkpoint to_checkpoint(const MlclParams& p, const std::optional<tc::AdamState>& adam,
                                    const std::string& scheme) {
  tc::Checkpoint ck{p.tensors, adam, nlohmann::json::object()};
  ck.meta["model"] = "mlcl";
  ck.meta["scheme"] = scheme;
  ck.meta["position_scale"] = p.position_scale;
  ck.meta["range_scale"] = p.range_scale;
  ck.meta["origin"] = {p.origin.x, p.origin.y};
  return ck;
}

inline MlclParams params_from_checkpoint(const tc::Checkpoint& ck) {
  if (ck.meta.value("model", "") != "mlcl") throw ConfigError("checkpoint does not hold an mlcl model");
  auto p = MlclParams::from_tensors(ck.params, ck.meta.at("position_scale").get<double>(),
                                    ck.meta.at("range_scale").get<double>());
  p.origin = {ck.meta.at("origin").at(0).get<double>(), ck.meta.at("origin").at(1).get<double>()};
  return p;
}

}  // namespace mlcl
