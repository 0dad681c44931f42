#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph records one forward computation. Each op appends a node holding
// its value and a closure that propagates the node's gradient to its inputs.
// Ops skip gradient work for inputs that do not require gradients, so a
// graph built with recording disabled (or over frozen parameters only) is a
// plain forward evaluator.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace refloc::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
struct Parameter {
  std::string name;
  std::string group;
  Matrix<T> value;
  Matrix<T> grad;
  bool frozen = false;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

namespace kernels {

template <class T>
T gelu(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2 / pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
  constexpr T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

/// Vectorized forms of gelu / gelu_grad over whole matrices.
template <class T>
void gelu_array(const Matrix<T>& x, Matrix<T>& out) {
  constexpr T c = T(0.7978845608028654);
  const auto a = x.array();
  out = (T(0.5) * a * (T(1) + (c * (a + T(0.044715) * a.cube())).tanh())).matrix();
}

template <class T>
void gelu_grad_array(const Matrix<T>& x, Matrix<T>& out) {
  constexpr T c = T(0.7978845608028654);
  const auto a = x.array();
  const auto t = (c * (a + T(0.044715) * a.cube())).tanh().eval();
  out = (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * c * (T(1) + T(3 * 0.044715) * a.square())).matrix();
}

/// Row-wise layer normalization. Writes normalized values to `xhat` and the
/// per-row reciprocal standard deviation to `inv_std`.
template <class T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& gamma, const Matrix<T>& beta, T eps,
                Matrix<T>& out, Matrix<T>* xhat_out, Eigen::Matrix<T, Eigen::Dynamic, 1>* inv_std_out) {
  const Eigen::Index n = x.rows(), d = x.cols();
  out.resize(n, d);
  if (xhat_out) xhat_out->resize(n, d);
  if (inv_std_out) inv_std_out->resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + eps);
    auto xh = ((x.row(i).array() - mean) * inv).matrix().eval();
    out.row(i) = (xh.array() * gamma.row(0).array() + beta.row(0).array()).matrix();
    if (xhat_out) xhat_out->row(i) = xh;
    if (inv_std_out) (*inv_std_out)(i) = inv;
  }
}

/// In-place row softmax over the first `valid` columns of each row; other
/// columns are zeroed. A row with no admissible key becomes all zeros.
template <class Derived>
void softmax_rows_masked(Eigen::MatrixBase<Derived>& s, const std::uint8_t* key_valid, bool causal,
                         Eigen::Index causal_offset) {
  using T = typename Derived::Scalar;
  const Eigen::Index n = s.rows(), m = s.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(m, i + causal_offset + 1) : m;
    for (Eigen::Index j = 0; j < limit; ++j) {
      if (key_valid && !key_valid[j]) continue;
      mx = std::max(mx, s(i, j));
    }
    if (!std::isfinite(mx)) {
      s.row(i).setZero();
      continue;
    }
    T sum = 0;
    for (Eigen::Index j = 0; j < m; ++j) {
      if (j >= limit || (key_valid && !key_valid[j])) {
        s(i, j) = 0;
      } else {
        s(i, j) = std::exp(s(i, j) - mx);
        sum += s(i, j);
      }
    }
    s.row(i) /= sum;
  }
}

template <class T>
Matrix<T> sinusoidal_positions(int length, int d, int offset = 0) {
  Matrix<T> pe(length, d);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / d);
      pe(p, i) = static_cast<T>(std::sin((p + offset) * freq));
      if (i + 1 < d) pe(p, i + 1) = static_cast<T>(std::cos((p + offset) * freq));
    }
  }
  return pe;
}

}  // namespace kernels

/// Shape and masking description of a batched attention call. Queries are
/// laid out as `batch` consecutive blocks of `q_len` rows, keys as blocks of
/// `k_len` rows.
struct AttentionLayout {
  int batch = 1;
  int q_len = 0;
  int k_len = 0;
  int heads = 1;
  bool causal = false;
  /// batch * k_len flags (1 = key may be attended); empty means all valid.
  std::vector<std::uint8_t> key_valid;
};

template <class T>
class Graph {
 public:
  using Mat = Matrix<T>;

  explicit Graph(bool record = true) : record_(record) { nodes_.reserve(512); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Mat m) { return push(std::move(m), false, nullptr); }

  /// Leaf bound to a parameter. Gradients collect in the graph; read them
  /// back with parameter_grads() after backward().
  Var param(const Parameter<T>& p) {
    Node n;
    n.param = &p;
    n.requires_grad = record_ && !p.frozen;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of a node, zero-initialized on first access.
  Mat& grad(Var v) {
    Node& n = nodes_[v.id];
    const Mat& val = n.param ? n.param->value : n.value;
    if (n.grad.rows() != val.rows() || n.grad.cols() != val.cols()) {
      n.grad = Mat::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  /// (parameter, gradient) for every parameter leaf that received a
  /// gradient. A parameter used by several leaves appears once per leaf.
  std::vector<std::pair<const Parameter<T>*, const Mat*>> parameter_grads() const {
    std::vector<std::pair<const Parameter<T>*, const Mat*>> out;
    for (const Node& n : nodes_) {
      if (n.param && n.requires_grad && n.grad.size() != 0) out.emplace_back(n.param, &n.grad);
    }
    return out;
  }

  /// Backpropagates from a 1x1 node.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be 1x1");
    if (!requires_grad(loss)) return;
    grad(loss)(0, 0) += T(1);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && n.requires_grad && (n.grad.size() != 0 || n.value.size() == 0)) n.backward();
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise / linear algebra -------------------------------------

  Var matmul(Var a, Var b) {
    Mat out = value(a) * value(b);
    Var o = push(std::move(out), rg(a) || rg(b), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, b, o] {
        const Mat& g = grad(o);
        if (rg(a)) grad(a).noalias() += g * value(b).transpose();
        if (rg(b)) grad(b).noalias() += value(a).transpose() * g;
      });
    }
    return o;
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Mat out = value(a) * value(b).transpose();
    Var o = push(std::move(out), rg(a) || rg(b), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, b, o] {
        const Mat& g = grad(o);
        if (rg(a)) grad(a).noalias() += g * value(b);
        if (rg(b)) grad(b).noalias() += g.transpose() * value(a);
      });
    }
    return o;
  }

  /// x * w + bias (bias is 1 x out, broadcast over rows).
  Var linear(Var x, Var w, Var bias) {
    Mat out = value(x) * value(w);
    out.rowwise() += value(bias).row(0);
    Var o = push(std::move(out), rg(x) || rg(w) || rg(bias), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, w, bias, o] {
        const Mat& g = grad(o);
        if (rg(x)) grad(x).noalias() += g * value(w).transpose();
        if (rg(w)) grad(w).noalias() += value(x).transpose() * g;
        if (rg(bias)) grad(bias).row(0) += g.colwise().sum();
      });
    }
    return o;
  }

  Var add(Var a, Var b) {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols()) {
      throw std::invalid_argument("add: shape mismatch");
    }
    Mat out = value(a) + value(b);
    Var o = push(std::move(out), rg(a) || rg(b), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, b, o] {
        if (rg(a)) grad(a) += grad(o);
        if (rg(b)) grad(b) += grad(o);
      });
    }
    return o;
  }

  Var scale(Var a, T s) {
    Mat out = value(a) * s;
    Var o = push(std::move(out), rg(a), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, o, s] { grad(a) += grad(o) * s; });
    }
    return o;
  }

  /// Adds `pattern` (p x d) to every consecutive block of p rows of x.
  Var add_tiled(Var x, Var pattern) {
    const Mat& xv = value(x);
    const Mat& pv = value(pattern);
    const Eigen::Index p = pv.rows();
    if (p == 0 || xv.rows() % p != 0 || xv.cols() != pv.cols()) {
      throw std::invalid_argument("add_tiled: shape mismatch");
    }
    Mat out = xv;
    for (Eigen::Index b = 0; b < xv.rows() / p; ++b) out.middleRows(b * p, p) += pv;
    Var o = push(std::move(out), rg(x) || rg(pattern), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, pattern, o, p] {
        const Mat& g = grad(o);
        if (rg(x)) grad(x) += g;
        if (rg(pattern)) {
          Mat& gp = grad(pattern);
          for (Eigen::Index b = 0; b < g.rows() / p; ++b) gp += g.middleRows(b * p, p);
        }
      });
    }
    return o;
  }

  /// Repeats x (n x d) `times` times vertically.
  Var tile(Var x, int times) {
    const Mat& xv = value(x);
    const Eigen::Index n = xv.rows();
    Mat out(n * times, xv.cols());
    for (int b = 0; b < times; ++b) out.middleRows(b * n, n) = xv;
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o, n, times] {
        const Mat& g = grad(o);
        Mat& gx = grad(x);
        for (int b = 0; b < times; ++b) gx += g.middleRows(b * n, n);
      });
    }
    return o;
  }

  /// Per-sample row concatenation: part k holds `batch` blocks of
  /// rows(k)/batch rows; the output holds, for each sample, its block of
  /// every part in order.
  Var interleave(const std::vector<Var>& parts, int batch) {
    std::vector<Eigen::Index> len;
    Eigen::Index total = 0, cols = -1;
    for (Var p : parts) {
      const Mat& v = value(p);
      if (v.rows() % batch != 0) throw std::invalid_argument("interleave: rows not divisible by batch");
      if (v.rows() > 0 || cols < 0) {
        if (cols >= 0 && v.rows() > 0 && v.cols() != cols) throw std::invalid_argument("interleave: width mismatch");
        if (v.rows() > 0) cols = v.cols();
      }
      len.push_back(v.rows() / batch);
      total += v.rows() / batch;
    }
    if (cols < 0) cols = parts.empty() ? 0 : value(parts.front()).cols();
    Mat out(total * batch, cols);
    bool any_rg = false;
    for (int b = 0; b < batch; ++b) {
      Eigen::Index r = b * total;
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (len[k]) out.middleRows(r, len[k]) = value(parts[k]).middleRows(b * len[k], len[k]);
        r += len[k];
      }
    }
    for (Var p : parts) any_rg = any_rg || rg(p);
    Var o = push(std::move(out), any_rg, nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, parts, len, total, batch, o] {
        const Mat& g = grad(o);
        for (int b = 0; b < batch; ++b) {
          Eigen::Index r = b * total;
          for (std::size_t k = 0; k < parts.size(); ++k) {
            if (len[k] && rg(parts[k])) grad(parts[k]).middleRows(b * len[k], len[k]) += g.middleRows(r, len[k]);
            r += len[k];
          }
        }
      });
    }
    return o;
  }

  /// Rows [begin, begin + count) of every block of `block` rows.
  Var select_rows(Var x, int block, int begin, int count) {
    const Mat& xv = value(x);
    const Eigen::Index batch = block ? xv.rows() / block : 0;
    Mat out(batch * count, xv.cols());
    for (Eigen::Index b = 0; b < batch; ++b) out.middleRows(b * count, count) = xv.middleRows(b * block + begin, count);
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o, block, begin, count, batch] {
        const Mat& g = grad(o);
        Mat& gx = grad(x);
        for (Eigen::Index b = 0; b < batch; ++b) gx.middleRows(b * block + begin, count) += g.middleRows(b * count, count);
      });
    }
    return o;
  }

  /// Gathers the given rows of x (row indices may repeat).
  Var gather_rows(Var x, std::vector<int> rows) {
    const Mat& xv = value(x);
    Mat out(static_cast<Eigen::Index>(rows.size()), xv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(i) = xv.row(rows[i]);
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o, rows = std::move(rows)] {
        const Mat& g = grad(o);
        Mat& gx = grad(x);
        for (std::size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(i);
      });
    }
    return o;
  }

  Var gelu(Var x) {
    Mat out;
    kernels::gelu_array(value(x), out);
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o] {
        Mat d;
        kernels::gelu_grad_array(value(x), d);
        grad(x).array() += grad(o).array() * d.array();
      });
    }
    return o;
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    Mat out;
    auto xhat = std::make_shared<Mat>();
    auto inv = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>();
    kernels::layer_norm<T>(value(x), value(gamma), value(beta), eps, out, xhat.get(), inv.get());
    Var o = push(std::move(out), rg(x) || rg(gamma) || rg(beta), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, gamma, beta, o, xhat, inv] {
        const Mat& g = grad(o);
        if (rg(gamma)) grad(gamma).row(0) += (g.array() * xhat->array()).colwise().sum().matrix();
        if (rg(beta)) grad(beta).row(0) += g.colwise().sum();
        if (rg(x)) {
          const Eigen::Index d = g.cols();
          Mat& gx = grad(x);
          const auto gam = value(gamma).row(0).array();
          for (Eigen::Index i = 0; i < g.rows(); ++i) {
            auto dxh = (g.row(i).array() * gam).eval();
            const T m1 = dxh.sum() / T(d);
            const T m2 = (dxh * xhat->row(i).array()).sum() / T(d);
            gx.row(i).array() += (*inv)(i) * (dxh - m1 - xhat->row(i).array() * m2);
          }
        }
      });
    }
    return o;
  }

  /// Rows of `table` selected by ids, multiplied by `scale`.
  Var embedding(Var table, std::vector<std::int32_t> ids, T scale = T(1)) {
    const Mat& tv = value(table);
    Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= tv.rows()) throw std::out_of_range("embedding: id out of range");
      out.row(i) = tv.row(ids[i]) * scale;
    }
    Var o = push(std::move(out), rg(table), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, table, o, ids = std::move(ids), scale] {
        const Mat& g = grad(o);
        Mat& gt = grad(table);
        for (std::size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(i) * scale;
      });
    }
    return o;
  }

  /// Multi-head scaled dot-product attention, batched per AttentionLayout.
  Var attention(Var q, Var k, Var v, AttentionLayout layout) {
    const Mat& qv = value(q);
    const Mat& kv = value(k);
    const Mat& vv = value(v);
    const int B = layout.batch, Lq = layout.q_len, Lk = layout.k_len, H = layout.heads;
    const Eigen::Index d = qv.cols();
    if (qv.rows() != Eigen::Index(B) * Lq || kv.rows() != Eigen::Index(B) * Lk || vv.rows() != kv.rows() ||
        kv.cols() != d || vv.cols() != d || d % H != 0) {
      throw std::invalid_argument("attention: shape mismatch");
    }
    if (!layout.key_valid.empty() && layout.key_valid.size() != std::size_t(B) * Lk) {
      throw std::invalid_argument("attention: key mask size mismatch");
    }
    const Eigen::Index dh = d / H;
    const T sc = T(1) / std::sqrt(T(dh));
    auto probs = std::make_shared<std::vector<Mat>>(std::size_t(B) * H);
    Mat out = Mat::Zero(qv.rows(), d);
    for (int b = 0; b < B; ++b) {
      const std::uint8_t* mask = layout.key_valid.empty() ? nullptr : &layout.key_valid[std::size_t(b) * Lk];
      for (int h = 0; h < H; ++h) {
        Mat& p = (*probs)[std::size_t(b) * H + h];
        p.noalias() = qv.block(Eigen::Index(b) * Lq, h * dh, Lq, dh) * kv.block(Eigen::Index(b) * Lk, h * dh, Lk, dh).transpose();
        p *= sc;
        kernels::softmax_rows_masked(p, mask, layout.causal, Lk - Lq);
        out.block(Eigen::Index(b) * Lq, h * dh, Lq, dh).noalias() = p * vv.block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
      }
    }
    Var o = push(std::move(out), rg(q) || rg(k) || rg(v), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, q, k, v, o, probs, B, Lq, Lk, H, dh, sc] {
        const Mat& g = grad(o);
        const bool gq = rg(q), gk = rg(k), gv = rg(v);
        Mat dp, ds;
        for (int b = 0; b < B; ++b) {
          for (int h = 0; h < H; ++h) {
            const Mat& p = (*probs)[std::size_t(b) * H + h];
            auto go = g.block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
            if (gv) grad(v).block(Eigen::Index(b) * Lk, h * dh, Lk, dh).noalias() += p.transpose() * go;
            if (!gq && !gk) continue;
            dp.noalias() = go * value(v).block(Eigen::Index(b) * Lk, h * dh, Lk, dh).transpose();
            ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
            ds *= sc;
            if (gq) grad(q).block(Eigen::Index(b) * Lq, h * dh, Lq, dh).noalias() += ds * value(k).block(Eigen::Index(b) * Lk, h * dh, Lk, dh);
            if (gk) grad(k).block(Eigen::Index(b) * Lk, h * dh, Lk, dh).noalias() += ds.transpose() * value(q).block(Eigen::Index(b) * Lq, h * dh, Lq, dh);
          }
        }
      });
    }
    return o;
  }

  /// Weighted mean token cross-entropy. Rows with zero weight are ignored;
  /// the result is sum_i w_i * ce_i / sum_i w_i.
  Var cross_entropy(Var logits, std::vector<std::int32_t> targets, std::vector<T> weights) {
    const Mat& lv = value(logits);
    if (targets.size() != std::size_t(lv.rows()) || weights.size() != targets.size()) {
      throw std::invalid_argument("cross_entropy: shape mismatch");
    }
    T wsum = 0;
    for (T w : weights) wsum += w;
    if (!(wsum > 0)) throw std::invalid_argument("cross_entropy: empty mask");
    auto probs = std::make_shared<Mat>(Mat::Zero(lv.rows(), lv.cols()));
    T loss = 0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
      if (weights[i] == T(0)) continue;
      const T mx = lv.row(i).maxCoeff();
      auto e = (lv.row(i).array() - mx).exp();
      const T s = e.sum();
      probs->row(i) = e / s;
      loss += weights[i] * (std::log(s) + mx - lv(i, targets[i]));
    }
    Mat out(1, 1);
    out(0, 0) = loss / wsum;
    Var o = push(std::move(out), rg(logits), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, logits, o, probs, targets = std::move(targets), weights = std::move(weights), wsum] {
        const T g = grad(o)(0, 0) / wsum;
        Mat& gl = grad(logits);
        for (Eigen::Index i = 0; i < gl.rows(); ++i) {
          if (weights[i] == T(0)) continue;
          gl.row(i) += (g * weights[i]) * probs->row(i);
          gl(i, targets[i]) -= g * weights[i];
        }
      });
    }
    return o;
  }

  /// Mean over the valid rows of each block of `block` rows; one output row
  /// per block. `valid` has one flag per input row (empty = all valid).
  Var masked_mean(Var x, int block, std::vector<std::uint8_t> valid) {
    const Mat& xv = value(x);
    const Eigen::Index batch = xv.rows() / block;
    std::vector<T> inv(batch, T(0));
    Mat out = Mat::Zero(batch, xv.cols());
    for (Eigen::Index b = 0; b < batch; ++b) {
      int n = 0;
      for (int r = 0; r < block; ++r) {
        const Eigen::Index row = b * block + r;
        if (!valid.empty() && !valid[row]) continue;
        out.row(b) += xv.row(row);
        ++n;
      }
      if (n) {
        inv[b] = T(1) / T(n);
        out.row(b) *= inv[b];
      }
    }
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o, block, valid = std::move(valid), inv = std::move(inv), batch] {
        const Mat& g = grad(o);
        Mat& gx = grad(x);
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int r = 0; r < block; ++r) {
            const Eigen::Index row = b * block + r;
            if (!valid.empty() && !valid[row]) continue;
            gx.row(row) += g.row(b) * inv[b];
          }
        }
      });
    }
    return o;
  }

  Var l2_normalize_rows(Var x, T eps = T(1e-8)) {
    const Mat& xv = value(x);
    auto norms = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(xv.rows());
    Mat out(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      (*norms)(i) = std::sqrt(xv.row(i).squaredNorm() + eps);
      out.row(i) = xv.row(i) / (*norms)(i);
    }
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o, norms] {
        const Mat& g = grad(o);
        const Mat& y = value(o);
        Mat& gx = grad(x);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          const T dot = g.row(i).dot(y.row(i));
          gx.row(i) += (g.row(i) - dot * y.row(i)) / (*norms)(i);
        }
      });
    }
    return o;
  }

  /// exp(x) elementwise.
  Var exp(Var x) {
    Mat out = value(x).array().exp().matrix();
    Var o = push(std::move(out), rg(x), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, x, o] { grad(x).array() += grad(o).array() * value(o).array(); });
    }
    return o;
  }

  /// Multiplies matrix a by the 1x1 node s.
  Var mul_scalar(Var a, Var s) {
    if (value(s).size() != 1) throw std::invalid_argument("mul_scalar: expected 1x1");
    Mat out = value(a) * value(s)(0, 0);
    Var o = push(std::move(out), rg(a) || rg(s), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, s, o] {
        const Mat& g = grad(o);
        if (rg(a)) grad(a) += g * value(s)(0, 0);
        if (rg(s)) grad(s)(0, 0) += (g.array() * value(a).array()).sum();
      });
    }
    return o;
  }

  /// Transpose.
  Var transpose(Var a) {
    Mat out = value(a).transpose();
    Var o = push(std::move(out), rg(a), nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, a, o] { grad(a) += grad(o).transpose(); });
    }
    return o;
  }

  /// sum_k w_k * s_k over 1x1 nodes.
  Var weighted_sum(const std::vector<Var>& terms, const std::vector<T>& weights) {
    if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
    Mat out = Mat::Zero(1, 1);
    bool any = false;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      out(0, 0) += weights[i] * value(terms[i])(0, 0);
      any = any || rg(terms[i]);
    }
    Var o = push(std::move(out), any, nullptr);
    if (requires_grad(o)) {
      set_backward(o, [this, terms, weights, o] {
        const T g = grad(o)(0, 0);
        for (std::size_t i = 0; i < terms.size(); ++i) {
          if (rg(terms[i])) grad(terms[i])(0, 0) += weights[i] * g;
        }
      });
    }
    return o;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    const Parameter<T>* param = nullptr;
    bool requires_grad = false;
    std::function<void()> backward;
  };

  bool rg(Var v) const { return nodes_[v.id].requires_grad; }

  Var push(Mat value, bool requires_grad, std::function<void()> bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = record_ && requires_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  void set_backward(Var o, std::function<void()> bw) { nodes_[o.id].backward = std::move(bw); }

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace refloc::nn
