#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "unimt/errors.hpp"

namespace unimt {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A trainable tensor with its gradient accumulator.
template <typename Scalar>
struct Param {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;
};

/// Named parameters in insertion order.
template <typename Scalar>
class ParamSet {
 public:
  Param<Scalar>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index_.count(name)) throw StateError("duplicate parameter '" + name + "'");
    auto p = std::make_unique<Param<Scalar>>();
    p->name = name;
    p->value = Mat<Scalar>::Zero(rows, cols);
    p->grad = Mat<Scalar>::Zero(rows, cols);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Param<Scalar>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StateError("unknown parameter '" + name + "'");
    return *params_[it->second];
  }
  const Param<Scalar>& get(const std::string& name) const {
    return const_cast<ParamSet*>(this)->get(name);
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return params_.size(); }
  Param<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Param<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

 private:
  std::vector<std::unique_ptr<Param<Scalar>>> params_;
  std::map<std::string, std::size_t> index_;
};

/// Handle to a node of a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Reduction { Mean, Sum };

/// Deterministic keep/drop decision for element `index` of a dropout mask.
inline double hashed_uniform(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return static_cast<double>(z >> 11) * 0x1.0p-53;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return static_cast<std::uint64_t>(hashed_uniform(a, b) * 0x1.0p53) ^ (a * 31 + b);
}

template <typename Scalar>
struct AttentionSpec {
  int batch = 1;
  int q_len = 0;
  int k_len = 0;
  int heads = 1;
  bool causal = false;
  /// batch*k_len flags, true for keys that may be attended.
  const std::vector<std::uint8_t>* key_mask = nullptr;
  Scalar dropout = 0;
  std::uint64_t seed = 0;
  /// Relative key/value tables of shape (2*clip+1) x head_dim, shared by all heads.
  Var rel_k;
  Var rel_v;
  int clip = 16;
  /// When set, receives the batch*heads attention probability matrices.
  std::vector<Mat<Scalar>>* probe = nullptr;
};

/// Reverse-mode tape over dense row-major matrices.
template <typename Scalar>
class Graph {
 public:
  using M = Mat<Scalar>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }
  std::size_t node_count() const { return nodes_.size(); }

  const M& value(Var v) const { return node(v).value; }

  /// Gradient of a node, allocated as zeros on first use.
  M& grad(Var v) {
    Node& n = node(v);
    if (n.grad.size() == 0) n.grad = M::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  Var constant(M value) { return push(std::move(value), false); }

  /// Leaf bound to a parameter. The same parameter always maps to one node.
  Var param(Param<Scalar>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{it->second};
    Var v = push(p.value, record_);
    nodes_[v.id].param = &p;
    param_nodes_[&p] = v.id;
    return v;
  }

  /// Accumulates d(loss)/d(param) into every bound parameter's grad.
  void backward(Var loss) {
    if (!record_) throw StateError("backward called on a graph built without recording");
    if (!loss.valid() || static_cast<std::size_t>(loss.id) >= nodes_.size())
      throw StateError("backward called before a forward pass produced a loss");
    if (backward_done_) throw StateError("backward already ran on this graph");
    const M& l = value(loss);
    if (l.rows() != 1 || l.cols() != 1) throw DimensionError("backward expects a scalar loss");
    grad(loss)(0, 0) += Scalar(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0) continue;
      if (n.back) n.back();
      if (n.param) n.param->grad += n.grad;
    }
    backward_done_ = true;
  }

  // ---- elementwise and linear algebra ----

  Var matmul(Var a, Var b) {
    const M& A = value(a);
    const M& B = value(b);
    if (A.cols() != B.rows()) throw DimensionError("matmul: inner dimensions differ");
    M out(A.rows(), B.cols());
    out.noalias() = A * B;
    Var r = push(std::move(out), needs(a) || needs(b));
    on_back(r, [this, a, b, r] {
      const M& g = grad(r);
      if (needs(a)) grad(a).noalias() += g * value(b).transpose();
      if (needs(b)) grad(b).noalias() += value(a).transpose() * g;
    });
    return r;
  }

  /// x * W + b, with b a 1 x out row broadcast over rows (b may be invalid).
  Var linear(Var x, Var w, Var b = {}) {
    const M& X = value(x);
    const M& W = value(w);
    if (X.cols() != W.rows())
      throw DimensionError("linear: input width " + std::to_string(X.cols()) +
                           " does not match weight rows " + std::to_string(W.rows()));
    M out(X.rows(), W.cols());
    out.noalias() = X * W;
    if (b.valid()) {
      const M& B = value(b);
      if (B.rows() != 1 || B.cols() != W.cols()) throw DimensionError("linear: bias shape");
      out.rowwise() += B.row(0);
    }
    Var r = push(std::move(out), needs(x) || needs(w) || (b.valid() && needs(b)));
    on_back(r, [this, x, w, b, r] {
      const M& g = grad(r);
      if (needs(x)) grad(x).noalias() += g * value(w).transpose();
      if (needs(w)) grad(w).noalias() += value(x).transpose() * g;
      if (b.valid() && needs(b)) grad(b) += g.colwise().sum();
    });
    return r;
  }

  Var add(Var a, Var b) {
    const M& A = value(a);
    const M& B = value(b);
    if (A.rows() != B.rows() || A.cols() != B.cols()) throw DimensionError("add: shapes differ");
    Var r = push(A + B, needs(a) || needs(b));
    on_back(r, [this, a, b, r] {
      if (needs(a)) grad(a) += grad(r);
      if (needs(b)) grad(b) += grad(r);
    });
    return r;
  }

  /// Adds a 1 x cols row vector to every row.
  Var add_rowvec(Var x, Var v) {
    const M& X = value(x);
    const M& V = value(v);
    if (V.rows() != 1 || V.cols() != X.cols()) throw DimensionError("add_rowvec: shape");
    M out = X;
    out.rowwise() += V.row(0);
    Var r = push(std::move(out), needs(x) || needs(v));
    on_back(r, [this, x, v, r] {
      if (needs(x)) grad(x) += grad(r);
      if (needs(v)) grad(v) += grad(r).colwise().sum();
    });
    return r;
  }

  Var scale(Var x, Scalar s) {
    Var r = push(value(x) * s, needs(x));
    on_back(r, [this, x, r, s] { grad(x) += grad(r) * s; });
    return r;
  }

  Var relu(Var x) {
    Var r = push(value(x).cwiseMax(Scalar(0)), needs(x));
    on_back(r, [this, x, r] {
      grad(x) += (value(x).array() > Scalar(0)).select(grad(r), Scalar(0)).matrix();
    });
    return r;
  }

  /// Inverted dropout with a mask derived from `seed`; identity when p == 0.
  Var dropout(Var x, Scalar p, std::uint64_t seed) {
    if (p <= Scalar(0)) return x;
    const M& X = value(x);
    const Scalar keep_scale = Scalar(1) / (Scalar(1) - p);
    M mask(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] =
          hashed_uniform(seed, static_cast<std::uint64_t>(i)) < static_cast<double>(p) ? Scalar(0)
                                                                                       : keep_scale;
    }
    Var r = push(X.cwiseProduct(mask), needs(x));
    on_back(r, [this, x, r, mask = std::move(mask)] { grad(x) += grad(r).cwiseProduct(mask); });
    return r;
  }

  /// Per-row normalization followed by gain and bias (both 1 x cols).
  Var layer_norm(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5)) {
    const M& X = value(x);
    const Eigen::Index n = X.cols();
    if (value(gain).cols() != n || value(bias).cols() != n)
      throw DimensionError("layer_norm: gain/bias width");
    M xhat(X.rows(), n);
    std::vector<Scalar> inv_std(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const Scalar mean = X.row(i).mean();
      const Scalar var = (X.row(i).array() - mean).square().mean();
      inv_std[i] = Scalar(1) / std::sqrt(var + eps);
      xhat.row(i) = (X.row(i).array() - mean) * inv_std[i];
    }
    M out = xhat;
    out.array().rowwise() *= value(gain).row(0).array();
    out.rowwise() += value(bias).row(0);
    Var r = push(std::move(out), needs(x) || needs(gain) || needs(bias));
    on_back(r, [this, x, gain, bias, r, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const M& g = grad(r);
      if (needs(gain)) grad(gain) += g.cwiseProduct(xhat).colwise().sum();
      if (needs(bias)) grad(bias) += g.colwise().sum();
      if (!needs(x)) return;
      M dxhat = g;
      dxhat.array().rowwise() *= value(gain).row(0).array();
      M& gx = grad(x);
      const Scalar inv_n = Scalar(1) / static_cast<Scalar>(xhat.cols());
      for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
        const Scalar m1 = dxhat.row(i).sum() * inv_n;
        const Scalar m2 = dxhat.row(i).dot(xhat.row(i)) * inv_n;
        gx.row(i).array() +=
            inv_std[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
      }
    });
    return r;
  }

  /// Row lookup scaled by `scale`; id -1 yields a zero row.
  Var embedding(Var table, const std::vector<int>& ids, Scalar scale = Scalar(1)) {
    const M& T = value(table);
    M out = M::Zero(static_cast<Eigen::Index>(ids.size()), T.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0) continue;
      if (ids[i] >= T.rows())
        throw DimensionError("embedding: id " + std::to_string(ids[i]) + " exceeds table rows");
      out.row(static_cast<Eigen::Index>(i)) = T.row(ids[i]) * scale;
    }
    Var r = push(std::move(out), needs(table));
    on_back(r, [this, table, r, ids, scale] {
      M& gt = grad(table);
      const M& g = grad(r);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= 0) gt.row(ids[i]) += g.row(static_cast<Eigen::Index>(i)) * scale;
      }
    });
    return r;
  }

  /// Builds rows from (source index, row) pairs over `sources`; source -1 yields zeros.
  Var gather_rows(const std::vector<Var>& sources,
                  const std::vector<std::pair<int, int>>& picks) {
    if (sources.empty()) throw DimensionError("gather_rows: no sources");
    const Eigen::Index cols = value(sources[0]).cols();
    bool any_grad = false;
    for (Var s : sources) {
      if (value(s).cols() != cols) throw DimensionError("gather_rows: widths differ");
      any_grad = any_grad || needs(s);
    }
    M out = M::Zero(static_cast<Eigen::Index>(picks.size()), cols);
    for (std::size_t i = 0; i < picks.size(); ++i) {
      const auto [s, row] = picks[i];
      if (s < 0) continue;
      out.row(static_cast<Eigen::Index>(i)) = value(sources[s]).row(row);
    }
    Var r = push(std::move(out), any_grad);
    on_back(r, [this, sources, picks, r] {
      const M& g = grad(r);
      for (std::size_t i = 0; i < picks.size(); ++i) {
        const auto [s, row] = picks[i];
        if (s < 0 || !needs(sources[s])) continue;
        grad(sources[s]).row(row) += g.row(static_cast<Eigen::Index>(i));
      }
    });
    return r;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const Eigen::Index rows = value(parts[0]).rows();
    Eigen::Index cols = 0;
    bool any_grad = false;
    for (Var p : parts) {
      if (value(p).rows() != rows) throw DimensionError("concat_cols: row counts differ");
      cols += value(p).cols();
      any_grad = any_grad || needs(p);
    }
    M out(rows, cols);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, value(p).cols()) = value(p);
      c += value(p).cols();
    }
    Var r = push(std::move(out), any_grad);
    on_back(r, [this, parts, r] {
      Eigen::Index c = 0;
      for (Var p : parts) {
        const Eigen::Index w = value(p).cols();
        if (needs(p)) grad(p) += grad(r).middleCols(c, w);
        c += w;
      }
    });
    return r;
  }

  // ---- attention ----

  /// Multi-head scaled dot-product attention over row blocks of q (batch*q_len x d)
  /// and k, v (batch*k_len x d), with optional relative-position key/value terms.
  Var attention(Var q, Var k, Var v, const AttentionSpec<Scalar>& spec) {
    const M& Q = value(q);
    const M& K = value(k);
    const M& V = value(v);
    const int B = spec.batch, Lq = spec.q_len, Lk = spec.k_len, H = spec.heads;
    const Eigen::Index d = Q.cols();
    if (Q.rows() != Eigen::Index(B) * Lq || K.rows() != Eigen::Index(B) * Lk ||
        V.rows() != K.rows() || K.cols() != d || V.cols() != d || d % H != 0)
      throw DimensionError("attention: query/key/value shapes are inconsistent");
    if (spec.key_mask && spec.key_mask->size() != std::size_t(B) * Lk)
      throw DimensionError("attention: key mask size");
    const Eigen::Index dh = d / H;
    const bool rel = spec.rel_k.valid();
    const int R = 2 * spec.clip + 1;
    if (rel && (value(spec.rel_k).rows() != R || value(spec.rel_k).cols() != dh ||
                value(spec.rel_v).rows() != R || value(spec.rel_v).cols() != dh))
      throw DimensionError("attention: relative table shape");
    const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
    const Scalar p = spec.dropout;
    const Scalar keep_scale = p > 0 ? Scalar(1) / (Scalar(1) - p) : Scalar(1);

    // Relative index table (shared by all batch rows and heads).
    auto rel_index = std::make_shared<std::vector<int>>(std::size_t(Lq) * Lk);
    for (int i = 0; i < Lq; ++i)
      for (int j = 0; j < Lk; ++j)
        (*rel_index)[std::size_t(i) * Lk + j] = std::clamp(j - i, -spec.clip, spec.clip) + spec.clip;

    auto probs = std::make_shared<std::vector<M>>(std::size_t(B) * H);
    auto dropped = std::make_shared<std::vector<M>>(p > 0 ? std::size_t(B) * H : 0);
    M out = M::Zero(Q.rows(), d);
    const Scalar neg_inf = -std::numeric_limits<Scalar>::infinity();

    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const auto Qb = Q.block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
        const auto Kb = K.block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
        const auto Vb = V.block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
        M S(Lq, Lk);
        S.noalias() = Qb * Kb.transpose();
        if (rel) {
          M QR(Lq, R);
          QR.noalias() = Qb * value(spec.rel_k).transpose();
          for (int i = 0; i < Lq; ++i)
            for (int j = 0; j < Lk; ++j) S(i, j) += QR(i, (*rel_index)[std::size_t(i) * Lk + j]);
        }
        S *= sc;
        for (int i = 0; i < Lq; ++i) {
          Scalar mx = neg_inf;
          for (int j = 0; j < Lk; ++j) {
            const bool ok = (!spec.key_mask || (*spec.key_mask)[std::size_t(b) * Lk + j]) &&
                            !(spec.causal && j > i);
            if (!ok) S(i, j) = neg_inf;
            mx = std::max(mx, S(i, j));
          }
          if (mx == neg_inf) {
            S.row(i).setZero();
            continue;
          }
          Scalar sum = 0;
          for (int j = 0; j < Lk; ++j) {
            const Scalar e = S(i, j) == neg_inf ? Scalar(0) : std::exp(S(i, j) - mx);
            S(i, j) = e;
            sum += e;
          }
          S.row(i) /= sum;
        }
        const std::size_t slot = std::size_t(b) * H + h;
        const M* A = &S;
        if (p > 0) {
          M Ad = S;
          const std::uint64_t base = mix_seed(spec.seed, slot);
          for (Eigen::Index t = 0; t < Ad.size(); ++t) {
            Ad.data()[t] *= hashed_uniform(base, std::uint64_t(t)) < static_cast<double>(p)
                                ? Scalar(0)
                                : keep_scale;
          }
          (*dropped)[slot] = std::move(Ad);
          A = &(*dropped)[slot];
        }
        auto Ob = out.block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
        Ob.noalias() = (*A) * Vb;
        if (rel) {
          M W = M::Zero(Lq, R);
          for (int i = 0; i < Lq; ++i)
            for (int j = 0; j < Lk; ++j) W(i, (*rel_index)[std::size_t(i) * Lk + j]) += (*A)(i, j);
          Ob.noalias() += W * value(spec.rel_v);
        }
        (*probs)[slot] = std::move(S);
      }
    }
    if (spec.probe) *spec.probe = *probs;

    const bool ng = needs(q) || needs(k) || needs(v) ||
                    (rel && (needs(spec.rel_k) || needs(spec.rel_v)));
    Var r = push(std::move(out), ng);
    const Var rk = spec.rel_k, rv = spec.rel_v;
    on_back(r, [=, this] {
      const M& G = grad(r);
      const M& Qv = value(q);
      const M& Kv = value(k);
      const M& Vv = value(v);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          const std::size_t slot = std::size_t(b) * H + h;
          const M& P = (*probs)[slot];
          const M& A = p > 0 ? (*dropped)[slot] : P;
          const auto Gb = G.block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
          const auto Qb = Qv.block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
          const auto Kb = Kv.block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
          const auto Vb = Vv.block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
          // Gradient w.r.t. the (dropped-out) attention weights.
          M dA(Lq, Lk);
          dA.noalias() = Gb * Vb.transpose();
          if (rel) {
            M GR(Lq, R);
            GR.noalias() = Gb * value(rv).transpose();
            M W = M::Zero(Lq, R);
            for (int i = 0; i < Lq; ++i)
              for (int j = 0; j < Lk; ++j) {
                const int ri = (*rel_index)[std::size_t(i) * Lk + j];
                dA(i, j) += GR(i, ri);
                W(i, ri) += A(i, j);
              }
            if (needs(rv)) grad(rv).noalias() += W.transpose() * Gb;
          }
          if (needs(v)) grad(v).block(Eigen::Index(b) * Lk, h * dh, Lk, dh).noalias() +=
              A.transpose() * Gb;
          if (p > 0) {
            // Undo the mask: A = P .* m, so dP = dA .* m.
            for (Eigen::Index t = 0; t < dA.size(); ++t)
              dA.data()[t] = P.data()[t] > 0 ? dA.data()[t] * A.data()[t] / P.data()[t]
                                             : Scalar(0);
          }
          // Softmax backward, then the 1/sqrt(dh) scale.
          M dS(Lq, Lk);
          for (int i = 0; i < Lq; ++i) {
            const Scalar dot = dA.row(i).dot(P.row(i));
            dS.row(i) = P.row(i).cwiseProduct((dA.row(i).array() - dot).matrix());
          }
          dS *= sc;
          if (needs(q)) grad(q).block(Eigen::Index(b) * Lq, h * dh, Lq, dh).noalias() += dS * Kb;
          if (needs(k))
            grad(k).block(Eigen::Index(b) * Lk, h * dh, Lk, dh).noalias() += dS.transpose() * Qb;
          if (rel) {
            M dQR = M::Zero(Lq, R);
            for (int i = 0; i < Lq; ++i)
              for (int j = 0; j < Lk; ++j) dQR(i, (*rel_index)[std::size_t(i) * Lk + j]) += dS(i, j);
            if (needs(q))
              grad(q).block(Eigen::Index(b) * Lq, h * dh, Lq, dh).noalias() += dQR * value(rk);
            if (needs(rk)) grad(rk).noalias() += dQR.transpose() * Qb;
          }
        }
      }
    });
    return r;
  }

  // ---- losses ----

  /// Label-smoothed cross-entropy over rows of `logits`. Rows with target -1
  /// are skipped. The gold class keeps 1-eps; eps is spread uniformly over the
  /// other classes, excluding `excluded_class` (pass -1 to exclude none).
  /// When `log_probs` is given it receives the row-wise log-softmax.
  Var cross_entropy(Var logits, const std::vector<int>& targets, Scalar eps, int excluded_class,
                    Reduction reduction = Reduction::Mean, M* log_probs = nullptr) {
    const M& Z = value(logits);
    const Eigen::Index V = Z.cols();
    if (Z.rows() != static_cast<Eigen::Index>(targets.size()))
      throw DimensionError("cross_entropy: one target per logit row is required");
    const Eigen::Index support = V - 1 - (excluded_class >= 0 && excluded_class < V ? 1 : 0);
    const Scalar off = support > 0 ? eps / static_cast<Scalar>(support) : Scalar(0);
    M lp = log_softmax_rows(Z);
    Scalar total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const int t = targets[i];
      if (t < 0) continue;
      if (t >= V) throw DimensionError("cross_entropy: target id exceeds logits width");
      ++count;
      const auto row = lp.row(static_cast<Eigen::Index>(i));
      Scalar loss = -(Scalar(1) - eps) * row(t);
      if (off != Scalar(0)) {
        Scalar rest = row.sum() - row(t);
        if (excluded_class >= 0 && excluded_class < V && excluded_class != t)
          rest -= row(excluded_class);
        loss -= off * rest;
      }
      total += loss;
    }
    const Scalar norm =
        reduction == Reduction::Mean && count > 0 ? Scalar(1) / static_cast<Scalar>(count) : Scalar(1);
    M out(1, 1);
    out(0, 0) = total * norm;
    if (log_probs) *log_probs = lp;
    Var r = push(std::move(out), needs(logits));
    on_back(r, [this, logits, r, targets, eps, off, excluded_class, norm, lp = std::move(lp)] {
      const Scalar g = grad(r)(0, 0) * norm;
      M& gz = grad(logits);
      const Eigen::Index V = lp.cols();
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const int t = targets[i];
        if (t < 0) continue;
        const auto row = lp.row(static_cast<Eigen::Index>(i));
        // d/dz of -sum_c q_c log p_c is p - q (sum q = 1).
        auto gr = gz.row(static_cast<Eigen::Index>(i));
        gr.array() += g * row.array().exp();
        if (off != Scalar(0)) {
          gr.array() -= g * off;
          if (excluded_class >= 0 && excluded_class < V && excluded_class != t)
            gr(excluded_class) += g * off;
          gr(t) += g * off;
        }
        gr(t) -= g * (Scalar(1) - eps);
      }
    });
    return r;
  }

  // ---- convolution helpers ----

  /// Wide-convolution windows: for each of `batch` sequences of `len` rows,
  /// emits len+width-1 rows, each the concatenation of `width` consecutive input
  /// rows with zero rows beyond the sequence edges.
  Var unfold(Var x, int batch, int len, int width) {
    const M& X = value(x);
    if (X.rows() != Eigen::Index(batch) * len || width < 1)
      throw DimensionError("unfold: input rows do not match batch*len");
    const Eigen::Index e = X.cols();
    const int windows = len + width - 1;
    M out = M::Zero(Eigen::Index(batch) * windows, e * width);
    for (int b = 0; b < batch; ++b)
      for (int s = 0; s < windows; ++s)
        for (int o = 0; o < width; ++o) {
          const int pos = s - (width - 1) + o;
          if (pos < 0 || pos >= len) continue;
          out.block(Eigen::Index(b) * windows + s, o * e, 1, e) = X.row(Eigen::Index(b) * len + pos);
        }
    Var r = push(std::move(out), needs(x));
    on_back(r, [this, x, r, batch, len, width, windows, e] {
      const M& g = grad(r);
      M& gx = grad(x);
      for (int b = 0; b < batch; ++b)
        for (int s = 0; s < windows; ++s)
          for (int o = 0; o < width; ++o) {
            const int pos = s - (width - 1) + o;
            if (pos < 0 || pos >= len) continue;
            gx.row(Eigen::Index(b) * len + pos) += g.block(Eigen::Index(b) * windows + s, o * e, 1, e);
          }
    });
    return r;
  }

  /// Column-wise max over rows [lo, hi) of each sequence's block of `rows_per`
  /// rows; empty ranges produce zeros.
  Var max_pool(Var x, int batch, int rows_per, const std::vector<std::pair<int, int>>& ranges) {
    const M& X = value(x);
    if (X.rows() != Eigen::Index(batch) * rows_per || ranges.size() != std::size_t(batch))
      throw DimensionError("max_pool: shape");
    const Eigen::Index F = X.cols();
    M out = M::Zero(batch, F);
    std::vector<int> arg(std::size_t(batch) * F, -1);
    for (int b = 0; b < batch; ++b) {
      const auto [lo, hi] = ranges[b];
      for (Eigen::Index f = 0; f < F; ++f) {
        int best = -1;
        for (int s = lo; s < hi; ++s) {
          const Eigen::Index row = Eigen::Index(b) * rows_per + s;
          if (best < 0 || X(row, f) > X(best, f)) best = static_cast<int>(row);
        }
        if (best >= 0) out(b, f) = X(best, f);
        arg[std::size_t(b) * F + f] = best;
      }
    }
    Var r = push(std::move(out), needs(x));
    on_back(r, [this, x, r, arg = std::move(arg), batch, F] {
      const M& g = grad(r);
      M& gx = grad(x);
      for (int b = 0; b < batch; ++b)
        for (Eigen::Index f = 0; f < F; ++f) {
          const int row = arg[std::size_t(b) * F + f];
          if (row >= 0) gx(row, f) += g(b, f);
        }
    });
    return r;
  }

  static M log_softmax_rows(const M& z) {
    M out(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const Scalar mx = z.row(i).maxCoeff();
      const Scalar lse = mx + std::log((z.row(i).array() - mx).exp().sum());
      out.row(i) = z.row(i).array() - lse;
    }
    return out;
  }

 private:
  struct Node {
    M value;
    M grad;
    Param<Scalar>* param = nullptr;
    bool needs_grad = false;
    std::function<void()> back;
  };

  Node& node(Var v) {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw StateError("invalid graph variable");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  const Node& node(Var v) const { return const_cast<Graph*>(this)->node(v); }

  bool needs(Var v) const { return v.valid() && node(v).needs_grad; }

  Var push(M value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size() - 1)};
  }

  template <typename F>
  void on_back(Var r, F&& f) {
    Node& n = node(r);
    if (n.needs_grad) n.back = std::forward<F>(f);
  }

  bool record_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<Param<Scalar>*, int> param_nodes_;
};

}  // namespace unimt
