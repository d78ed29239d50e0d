#pragma once

// Dense numerical kernel for the localization networks: eager layer ops, a
// batched reverse-mode tape (rows = samples), Adam, Glorot initialization and
// named-tensor checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "mlcl/errors.hpp"
#include "mlcl/rng.hpp"

namespace mlcl::tc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

inline void require_finite(const Matrix& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value in ") + where);
}

// --- eager ops ---------------------------------------------------------------

struct DenseLayer {
  Matrix W;  // out x in
  Vector b;  // out
};

inline Vector dense_forward(const DenseLayer& layer, const Vector& x) {
  if (layer.W.cols() != x.size() || layer.W.rows() != layer.b.size())
    throw ShapeError("dense_forward: layer is " + std::to_string(layer.W.rows()) + "x" +
                     std::to_string(layer.W.cols()) + ", input has " + std::to_string(x.size()));
  return layer.W * x + layer.b;
}

inline Vector relu(const Vector& x) { return x.cwiseMax(0.0); }

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct GruCell {
  Matrix W_z, W_r, W_h;  // hidden x in
  Matrix U_z, U_r, U_h;  // hidden x hidden
  Vector b_z, b_r, b_h;

  Index hidden() const { return W_z.rows(); }
  Index input() const { return W_z.cols(); }

  static GruCell zeros(Index in, Index hidden) {
    GruCell c;
    c.W_z = c.W_r = c.W_h = Matrix::Zero(hidden, in);
    c.U_z = c.U_r = c.U_h = Matrix::Zero(hidden, hidden);
    c.b_z = c.b_r = c.b_h = Vector::Zero(hidden);
    return c;
  }
};

/// z = s(Wz x + Uz h + bz), r = s(Wr x + Ur h + br),
/// c = tanh(Wh x + Uh (r * h) + bh), h' = (1 - z) * h + z * c.
inline Vector gru_forward(const GruCell& cell, const Vector& x, const Vector& h_prev) {
  if (x.size() != cell.input() || h_prev.size() != cell.hidden()) throw ShapeError("gru_forward: shape mismatch");
  const auto sig = [](const Vector& v) -> Vector { return v.unaryExpr([](double u) { return sigmoid(u); }); };
  const Vector z = sig(cell.W_z * x + cell.U_z * h_prev + cell.b_z);
  const Vector r = sig(cell.W_r * x + cell.U_r * h_prev + cell.b_r);
  const Vector c = (cell.W_h * x + cell.U_h * r.cwiseProduct(h_prev) + cell.b_h).array().tanh().matrix();
  return (Vector::Ones(z.size()) - z).cwiseProduct(h_prev) + z.cwiseProduct(c);
}

/// Elementwise sum in list order. An empty list yields zeros of `width`.
inline Vector sum_pool(const std::vector<Vector>& vectors, Index width) {
  Vector out = Vector::Zero(width);
  for (const auto& v : vectors) {
    if (v.size() != width) throw ShapeError("sum_pool: length mismatch");
    out += v;
  }
  return out;
}

// --- parameters ----------------------------------------------------------------

/// Ordered set of named tensors. Biases are stored as (out x 1).
class ParamSet {
 public:
  std::size_t add(std::string name, Matrix value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = values_.size();
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Matrix& operator[](std::size_t i) { return values_[i]; }
  const Matrix& operator[](std::size_t i) const { return values_[i]; }

  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }
  Matrix& at(const std::string& name) { return values_[index(name)]; }
  const Matrix& at(const std::string& name) const { return values_[index(name)]; }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Zero tensors with the same names and shapes.
  std::vector<Matrix> zeros_like() const {
    std::vector<Matrix> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(Matrix::Zero(v.rows(), v.cols()));
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.names_ != b.names_) return false;
    for (std::size_t i = 0; i < a.values_.size(); ++i)
      if (a.values_[i].rows() != b.values_[i].rows() || a.values_[i].cols() != b.values_[i].cols() ||
          a.values_[i] != b.values_[i])
        return false;
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix> values_;
  std::map<std::string, std::size_t> index_;
};

using Gradients = std::vector<Matrix>;

/// Glorot-uniform weight of shape (fan_out x fan_in): entries ~ U(-a, a),
/// a = sqrt(6 / (fan_in + fan_out)).
inline Matrix glorot_uniform(Index fan_out, Index fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Matrix m(fan_out, fan_in);
  for (Index r = 0; r < fan_out; ++r)
    for (Index c = 0; c < fan_in; ++c) m(r, c) = rng.uniform(-a, a);
  return m;
}

/// Registers `<prefix>.W` (Glorot) and `<prefix>.b` (zeros).
inline void add_dense(ParamSet& ps, const std::string& prefix, Index in, Index out, Rng& rng) {
  ps.add(prefix + ".W", glorot_uniform(out, in, rng));
  ps.add(prefix + ".b", Matrix::Zero(out, 1));
}

/// Registers the nine GRU tensors; recurrent weights use the same Glorot rule.
inline void add_gru(ParamSet& ps, const std::string& prefix, Index in, Index hidden, Rng& rng) {
  for (const char* g : {"z", "r", "h"}) {
    ps.add(prefix + ".W_" + g, glorot_uniform(hidden, in, rng));
    ps.add(prefix + ".U_" + g, glorot_uniform(hidden, hidden, rng));
    ps.add(prefix + ".b_" + g, Matrix::Zero(hidden, 1));
  }
}

inline DenseLayer dense_view(const ParamSet& ps, const std::string& prefix) {
  return {ps.at(prefix + ".W"), ps.at(prefix + ".b").col(0)};
}

inline GruCell gru_view(const ParamSet& ps, const std::string& prefix) {
  GruCell c;
  c.W_z = ps.at(prefix + ".W_z");
  c.W_r = ps.at(prefix + ".W_r");
  c.W_h = ps.at(prefix + ".W_h");
  c.U_z = ps.at(prefix + ".U_z");
  c.U_r = ps.at(prefix + ".U_r");
  c.U_h = ps.at(prefix + ".U_h");
  c.b_z = ps.at(prefix + ".b_z").col(0);
  c.b_r = ps.at(prefix + ".b_r").col(0);
  c.b_h = ps.at(prefix + ".b_h").col(0);
  return c;
}

// --- reverse-mode tape -----------------------------------------------------------

class Tape;

/// X * W^T evaluated one sample row at a time, so every output row is
/// bit-identical whatever other rows share the batch.
inline Matrix rowwise_nt(const Matrix& x, const Matrix& w) {
  Matrix yt(w.rows(), x.rows());
  Vector xi(x.cols()), yi(w.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    xi = x.row(i).transpose();
    yi.noalias() = w * xi;
    yt.col(i) = yi;
  }
  return yt.transpose();
}

struct Var {
  int id = -1;
};

/// Records batched matrix ops for a single reverse sweep. Row i of every
/// value is sample i; parameters enter as leaves bound to a ParamSet slot.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Matrix& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix m) { return push(std::move(m), false, {}); }

  /// Leaf marked differentiable but not bound to any parameter (for tests).
  Var input(Matrix m) { return push(std::move(m), true, {}); }

  /// Leaf for parameter slot `index`; one node per slot per tape.
  Var param(const ParamSet& ps, std::size_t index) {
    auto it = param_nodes_.find(index);
    if (it != param_nodes_.end()) return it->second;
    Var v = push(ps[index], true, {});
    nodes_[static_cast<std::size_t>(v.id)].param = static_cast<int>(index);
    param_nodes_[index] = v;
    return v;
  }
  Var param(const ParamSet& ps, const std::string& name) { return param(ps, ps.index(name)); }

  /// X * W^T
  Var matmul_nt(Var x, Var w) {
    check(value(x).cols() == value(w).cols(), "matmul_nt");
    Matrix y = rowwise_nt(value(x), value(w));
    return push(std::move(y), needs(x) || needs(w), [x, w](Tape& t, const Matrix& g) {
      if (t.needs(x)) t.acc(x, g * t.value(w));
      if (t.needs(w)) t.acc(w, g.transpose() * t.value(x));
    });
  }

  /// X * W^T + 1 b^T with b stored as (out x 1).
  Var linear(Var x, Var w, Var b) {
    check(value(x).cols() == value(w).cols() && value(b).rows() == value(w).rows() && value(b).cols() == 1,
          "linear");
    Matrix y = rowwise_nt(value(x), value(w));
    y.rowwise() += value(b).col(0).transpose();
    return push(std::move(y), needs(x) || needs(w) || needs(b), [x, w, b](Tape& t, const Matrix& g) {
      if (t.needs(x)) t.acc(x, g * t.value(w));
      if (t.needs(w)) t.acc(w, g.transpose() * t.value(x));
      if (t.needs(b)) t.acc(b, g.colwise().sum().transpose());
    });
  }

  /// X * W^T + c b^T where c is a constant per-row multiplier (column).
  Var linear_scaled_bias(Var x, Var w, Var b, const Vector& c) {
    check(value(x).cols() == value(w).cols() && value(b).rows() == value(w).rows() && c.size() == value(x).rows(),
          "linear_scaled_bias");
    Matrix y = rowwise_nt(value(x), value(w)) + c * value(b).col(0).transpose();
    return push(std::move(y), needs(x) || needs(w) || needs(b), [x, w, b, c](Tape& t, const Matrix& g) {
      if (t.needs(x)) t.acc(x, g * t.value(w));
      if (t.needs(w)) t.acc(w, g.transpose() * t.value(x));
      if (t.needs(b)) t.acc(b, g.transpose() * c);
    });
  }

  Var add(Var a, Var b) {
    check(same_shape(a, b), "add");
    return push(value(a) + value(b), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(b)) t.acc(b, g);
    });
  }

  Var sub(Var a, Var b) {
    check(same_shape(a, b), "sub");
    return push(value(a) - value(b), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.acc(a, g);
      if (t.needs(b)) t.acc(b, -g);
    });
  }

  Var mul(Var a, Var b) {
    check(same_shape(a, b), "mul");
    return push(value(a).cwiseProduct(value(b)), needs(a) || needs(b), [a, b](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.acc(a, g.cwiseProduct(t.value(b)));
      if (t.needs(b)) t.acc(b, g.cwiseProduct(t.value(a)));
    });
  }

  Var one_minus(Var a) {
    Matrix y = (1.0 - value(a).array()).matrix();
    return push(std::move(y), needs(a), [a](Tape& t, const Matrix& g) { t.acc(a, -g); });
  }

  Var scale(Var a, double s) {
    return push(s * value(a), needs(a), [a, s](Tape& t, const Matrix& g) { t.acc(a, s * g); });
  }

  Var relu(Var a) {
    Matrix y = value(a).cwiseMax(0.0);
    const Var out = push(std::move(y), needs(a), {});
    set_backward(out, [a, out](Tape& t, const Matrix& g) {
      t.acc(a, (t.value(out).array() > 0.0).select(g.array(), 0.0).matrix());
    });
    return out;
  }

  Var sigmoid(Var a) {
    Matrix y = value(a).unaryExpr([](double u) { return tc::sigmoid(u); });
    const Var out = push(std::move(y), needs(a), {});
    set_backward(out, [a, out](Tape& t, const Matrix& g) {
      const auto& y = t.value(out).array();
      t.acc(a, (g.array() * y * (1.0 - y)).matrix());
    });
    return out;
  }

  Var tanh(Var a) {
    Matrix y = value(a).array().tanh().matrix();
    const Var out = push(std::move(y), needs(a), {});
    set_backward(out, [a, out](Tape& t, const Matrix& g) {
      const auto& y = t.value(out).array();
      t.acc(a, (g.array() * (1.0 - y * y)).matrix());
    });
    return out;
  }

  /// [A | B] along columns.
  Var concat_cols(Var a, Var b) {
    check(value(a).rows() == value(b).rows(), "concat_cols");
    const Index ca = value(a).cols(), cb = value(b).cols();
    Matrix y(value(a).rows(), ca + cb);
    y << value(a), value(b);
    return push(std::move(y), needs(a) || needs(b), [a, b, ca, cb](Tape& t, const Matrix& g) {
      if (t.needs(a)) t.acc(a, g.leftCols(ca));
      if (t.needs(b)) t.acc(b, g.rightCols(cb));
    });
  }

  /// Row i of the result is row idx[i] of A, or zeros where idx[i] < 0.
  Var gather_rows(Var a, std::vector<int> idx) {
    const Matrix& av = value(a);
    Matrix y = Matrix::Zero(static_cast<Index>(idx.size()), av.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) continue;
      check(idx[i] < av.rows(), "gather_rows");
      y.row(static_cast<Index>(i)) = av.row(idx[i]);
    }
    const Index rows = av.rows(), cols = av.cols();
    return push(std::move(y), needs(a), [a, idx = std::move(idx), rows, cols](Tape& t, const Matrix& g) {
      Matrix d = Matrix::Zero(rows, cols);
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] >= 0) d.row(idx[i]) += g.row(static_cast<Index>(i));
      t.acc(a, d);
    });
  }

  /// Row r of the result sums the rows i with seg[i] == r, in row order.
  Var segment_sum(Var a, std::vector<int> seg, Index segments) {
    const Matrix& av = value(a);
    check(static_cast<Index>(seg.size()) == av.rows(), "segment_sum");
    Matrix y = Matrix::Zero(segments, av.cols());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      check(seg[i] >= 0 && seg[i] < segments, "segment_sum");
      y.row(seg[i]) += av.row(static_cast<Index>(i));
    }
    return push(std::move(y), needs(a), [a, seg = std::move(seg)](Tape& t, const Matrix& g) {
      Matrix d(static_cast<Index>(seg.size()), g.cols());
      for (std::size_t i = 0; i < seg.size(); ++i) d.row(static_cast<Index>(i)) = g.row(seg[i]);
      t.acc(a, d);
    });
  }

  struct Link {
    int out;
    int in;
    double weight;
  };

  /// Sparse left product: result row l.out accumulates l.weight * row l.in,
  /// in link order.
  Var aggregate_rows(Var a, std::vector<Link> links, Index out_rows) {
    const Matrix& av = value(a);
    Matrix y = Matrix::Zero(out_rows, av.cols());
    for (const auto& l : links) {
      check(l.out >= 0 && l.out < out_rows && l.in >= 0 && l.in < av.rows(), "aggregate_rows");
      y.row(l.out) += l.weight * av.row(l.in);
    }
    const Index rows = av.rows();
    return push(std::move(y), needs(a), [a, links = std::move(links), rows](Tape& t, const Matrix& g) {
      Matrix d = Matrix::Zero(rows, g.cols());
      for (const auto& l : links) d.row(l.in) += l.weight * g.row(l.out);
      t.acc(a, d);
    });
  }

  /// sum_i w_i * || scale * P_i - T_i ||  (P: n x 2 predictions, T: targets).
  /// The subgradient at zero distance is taken as zero.
  Var weighted_distance_sum(Var p, const Matrix& target, double scale, const Vector& weights) {
    const Matrix& pv = value(p);
    check(pv.rows() == target.rows() && pv.cols() == target.cols() && weights.size() == pv.rows(),
          "weighted_distance_sum");
    const Matrix diff = scale * pv - target;
    const Vector dist = diff.rowwise().norm();
    Matrix y(1, 1);
    y(0, 0) = weights.dot(dist);
    return push(std::move(y), needs(p), [p, diff, dist, scale, weights](Tape& t, const Matrix& g) {
      Matrix d = Matrix::Zero(diff.rows(), diff.cols());
      for (Index i = 0; i < diff.rows(); ++i)
        if (dist(i) > 0.0) d.row(i) = (g(0, 0) * weights(i) * scale / dist(i)) * diff.row(i);
      t.acc(p, d);
    });
  }

  /// Sum of all entries (scalar).
  Var sum(Var a) {
    Matrix y(1, 1);
    y(0, 0) = value(a).sum();
    const Index r = value(a).rows(), c = value(a).cols();
    return push(std::move(y), needs(a),
                [a, r, c](Tape& t, const Matrix& g) { t.acc(a, Matrix::Constant(r, c, g(0, 0))); });
  }

  /// Reverse sweep from a scalar node. Parameter-leaf gradients are added to
  /// `grads` (indexed like the ParamSet).
  void backward(Var loss, Gradients* grads = nullptr) {
    if (!record_) throw Error("backward on a tape created without recording");
    const auto& lv = value(loss);
    if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward needs a scalar loss");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    acc(loss, Matrix::Ones(1, 1));
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back(*this, n.grad);
      if (n.param >= 0 && grads) {
        auto& dst = (*grads)[static_cast<std::size_t>(n.param)];
        if (dst.size() == 0) dst = Matrix::Zero(n.value.rows(), n.value.cols());
        dst += n.grad;
      }
    }
  }

 private:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  struct Node {
    Matrix value;
    Matrix grad;
    Backward back;
    int param = -1;
    bool needs_grad = false;
  };

  bool needs(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  bool same_shape(Var a, Var b) const {
    return value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols();
  }
  static void check(bool ok, const char* op) {
    if (!ok) throw ShapeError(std::string("tape op ") + op + ": shape mismatch");
  }

  Var push(Matrix value, bool needs_grad, Backward back) {
    require_finite(value, "tape forward");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && record_;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  void set_backward(Var v, Backward back) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.needs_grad) n.back = std::move(back);
  }

  void acc(Var v, const Matrix& g) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  bool record_;
  std::vector<Node> nodes_;
  std::map<std::size_t, Var> param_nodes_;
};

// --- optimizer -------------------------------------------------------------------

struct AdamState {
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const ParamSet& ps, double lr = 0.0005) {
    AdamState s;
    s.m = ps.zeros_like();
    s.v = ps.zeros_like();
    s.lr = lr;
    return s;
  }
};

/// Global L2 norm over all gradient tensors.
inline double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

/// Bias-corrected Adam update in place.
inline void adam_step(ParamSet& params, const Gradients& grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols() ||
        state.m[i].rows() != params[i].rows() || state.m[i].cols() != params[i].cols())
      throw ShapeError("adam_step: shape mismatch for " + params.name(i));
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i].cwiseProduct(grads[i]);
    const auto mhat = state.m[i].array() / c1;
    const auto vhat = state.v[i].array() / c2;
    params[i].array() -= state.lr * mhat / (vhat.sqrt() + state.eps);
  }
}

// --- checkpoints -------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json tensor_to_json(const std::string& name, const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  return {{"name", name}, {"shape", {m.rows(), m.cols()}}, {"data", data}};
}

inline Matrix tensor_from_json(const nlohmann::json& j) {
  const auto rows = j.at("shape").at(0).get<Index>();
  const auto cols = j.at("shape").at(1).get<Index>();
  const auto& data = j.at("data");
  if (static_cast<Index>(data.size()) != rows * cols)
    throw ShapeError("tensor " + j.at("name").get<std::string>() + ": data length does not match shape");
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = data[k++].get<double>();
  return m;
}

/// Checkpoint = versioned header + named parameter tensors, optionally with
/// Adam moments and free-form metadata.
struct Checkpoint {
  ParamSet params;
  std::optional<AdamState> adam;
  nlohmann::json meta = nlohmann::json::object();
};

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "mlcl-checkpoint";
  j["version"] = kCheckpointVersion;
  j["meta"] = ck.meta;
  auto tensors = nlohmann::json::array();
  for (std::size_t i = 0; i < ck.params.size(); ++i) tensors.push_back(tensor_to_json(ck.params.name(i), ck.params[i]));
  j["tensors"] = tensors;
  if (ck.adam) {
    nlohmann::json a;
    a["step"] = ck.adam->step;
    a["lr"] = ck.adam->lr;
    a["beta1"] = ck.adam->beta1;
    a["beta2"] = ck.adam->beta2;
    a["eps"] = ck.adam->eps;
    auto m = nlohmann::json::array(), v = nlohmann::json::array();
    for (std::size_t i = 0; i < ck.params.size(); ++i) {
      m.push_back(tensor_to_json(ck.params.name(i), ck.adam->m[i]));
      v.push_back(tensor_to_json(ck.params.name(i), ck.adam->v[i]));
    }
    a["m"] = m;
    a["v"] = v;
    j["adam"] = a;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump() << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
  if (j.value("format", "") != "mlcl-checkpoint") throw ParseError(path.string(), 0, "not an mlcl checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw ParseError(path.string(), 0, "unsupported checkpoint version " + j.value("version", nlohmann::json()).dump());
  Checkpoint ck;
  ck.meta = j.value("meta", nlohmann::json::object());
  for (const auto& t : j.at("tensors")) ck.params.add(t.at("name").get<std::string>(), tensor_from_json(t));
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    AdamState s;
    s.step = a.at("step").get<std::int64_t>();
    s.lr = a.at("lr").get<double>();
    s.beta1 = a.at("beta1").get<double>();
    s.beta2 = a.at("beta2").get<double>();
    s.eps = a.at("eps").get<double>();
    for (const auto& t : a.at("m")) s.m.push_back(tensor_from_json(t));
    for (const auto& t : a.at("v")) s.v.push_back(tensor_from_json(t));
    if (s.m.size() != ck.params.size() || s.v.size() != ck.params.size())
      throw ParseError(path.string(), 0, "adam state does not match parameters");
    ck.adam = std::move(s);
  }
  return ck;
}

}  // namespace mlcl::tc
