#include "perpcs/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace perpcs {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  // Transposing B once keeps the inner loop contiguous.
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t, const float*, const float*, float*, bool);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t, const double*, const double*, double*, bool);

AutodiffCounters& autodiff_counters() {
  thread_local AutodiffCounters counters;
  return counters;
}

template <typename T>
std::vector<T> softmax(std::span<const T> x) {
  std::vector<T> out(x.size());
  if (x.empty()) return out;
  const T mx = *std::max_element(x.begin(), x.end());
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    total += out[i];
  }
  for (T& v : out) v /= total;
  return out;
}
template std::vector<float> softmax<float>(std::span<const float>);
template std::vector<double> softmax<double>(std::span<const double>);

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename T>
T gelu_value(T x) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_deriv(T x) {
  constexpr T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

template <typename T>
Tape<T>::Tape(bool grad_enabled) : grad_enabled_(grad_enabled) {
  if (grad_enabled_) ++autodiff_counters().grad_tapes;
}

template <typename T>
Var Tape<T>::push(Tensor<T> value, bool needs_grad, const char* op) {
  if (!value.all_finite()) throw NonFiniteError(std::string("non-finite output from ") + op);
  Node n;
  n.value = std::move(value);
  n.needs_grad = grad_enabled_ && needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
std::vector<T>& Tape<T>::grad_buf(Var v) {
  Node& n = node(v);
  if (n.grad.empty()) n.grad.assign(n.value.numel(), T(0));
  return n.grad;
}

template <typename T>
bool Tape<T>::any_grad(std::initializer_list<Var> vs) const {
  for (Var v : vs)
    if (nodes_.at(v.id).needs_grad) return true;
  return false;
}

template <typename T>
Var Tape<T>::param(Parameter<T>& p) {
  Var v = push(p.value, p.trainable, "param");
  Node& n = node(v);
  if (n.needs_grad) {
    n.param = &p;
    if (p.grad.size() != p.value.numel()) p.zero_grad();
  }
  return v;
}

template <typename T>
Var Tape<T>::constant(Tensor<T> value) {
  return push(std::move(value), false, "constant");
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[0],
          "matmul shape mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor<T> out({m, n});
  gemm_nn(m, n, k, av.data.data(), bv.data.data(), out.data.data(), false);
  Var r = push(std::move(out), any_grad({a, b}), "matmul");
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r, m, n, k] {
      const auto& g = node(r).grad;
      if (node(a).needs_grad) gemm_nt(m, k, n, g.data(), value(b).data.data(), grad_buf(a).data(), true);
      if (node(b).needs_grad) gemm_tn(k, n, m, value(a).data.data(), g.data(), grad_buf(b).data(), true);
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::matmul_nt(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.rank() == 2 && bv.rank() == 2 && av.shape[1] == bv.shape[1],
          "matmul_nt shape mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape) + "^T");
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  Tensor<T> out({m, n});
  gemm_nt(m, n, k, av.data.data(), bv.data.data(), out.data.data(), false);
  Var r = push(std::move(out), any_grad({a, b}), "matmul_nt");
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r, m, n, k] {
      const auto& g = node(r).grad;
      // dA = G B, dB = G^T A
      if (node(a).needs_grad) gemm_nn(m, k, n, g.data(), value(b).data.data(), grad_buf(a).data(), true);
      if (node(b).needs_grad) gemm_tn(n, k, m, g.data(), value(a).data.data(), grad_buf(b).data(), true);
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.shape == bv.shape, "add shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += bv.data[i];
  Var r = push(std::move(out), any_grad({a, b}), "add");
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r] {
      const auto& g = node(r).grad;
      for (Var x : {a, b}) {
        if (!node(x).needs_grad) continue;
        auto& gx = grad_buf(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  return add(a, scale(b, T(-1)));
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& av = value(a);
  const auto& bv = value(b);
  require(av.shape == bv.shape, "mul shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
  Tensor<T> out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= bv.data[i];
  Var r = push(std::move(out), any_grad({a, b}), "mul");
  if (node(r).needs_grad) {
    node(r).back = [this, a, b, r] {
      const auto& g = node(r).grad;
      if (node(a).needs_grad) {
        auto& ga = grad_buf(a);
        const auto& bd = value(b).data;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
      }
      if (node(b).needs_grad) {
        auto& gb = grad_buf(b);
        const auto& ad = value(a).data;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::scale(Var a, T s) {
  Tensor<T> out = value(a);
  for (T& v : out.data) v *= s;
  Var r = push(std::move(out), any_grad({a}), "scale");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r, s] {
      const auto& g = node(r).grad;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::add_row(Var a, Var bias) {
  const auto& av = value(a);
  const auto& bv = value(bias);
  require(av.rank() == 2 && bv.numel() == av.shape[1], "add_row shape mismatch " + shape_str(av.shape) +
                                                           " + " + shape_str(bv.shape));
  const std::size_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bv.data[j];
  Var r = push(std::move(out), any_grad({a, bias}), "add_row");
  if (node(r).needs_grad) {
    node(r).back = [this, a, bias, r, m, n] {
      const auto& g = node(r).grad;
      if (node(a).needs_grad) {
        auto& ga = grad_buf(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (node(bias).needs_grad) {
        auto& gb = grad_buf(bias);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::mul_col(Var a, Var col) {
  const auto& av = value(a);
  const auto& cv = value(col);
  require(av.rank() == 2 && cv.numel() == av.shape[0], "mul_col shape mismatch " + shape_str(av.shape) +
                                                           " * " + shape_str(cv.shape));
  const std::size_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= cv.data[i];
  Var r = push(std::move(out), any_grad({a, col}), "mul_col");
  if (node(r).needs_grad) {
    node(r).back = [this, a, col, r, m, n] {
      const auto& g = node(r).grad;
      if (node(a).needs_grad) {
        auto& ga = grad_buf(a);
        const auto& cd = value(col).data;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] * cd[i];
      }
      if (node(col).needs_grad) {
        auto& gc = grad_buf(col);
        const auto& ad = value(a).data;
        for (std::size_t i = 0; i < m; ++i) {
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * ad[i * n + j];
          gc[i] += acc;
        }
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::row_dot(Var a, Var v) {
  const auto& av = value(a);
  const auto& vv = value(v);
  require(av.rank() == 2 && vv.numel() == av.shape[1], "row_dot shape mismatch " + shape_str(av.shape) +
                                                          " . " + shape_str(vv.shape));
  const std::size_t m = av.shape[0], n = av.shape[1];
  Tensor<T> out({m});
  for (std::size_t i = 0; i < m; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += av.data[i * n + j] * vv.data[j];
    out.data[i] = acc;
  }
  Var r = push(std::move(out), any_grad({a, v}), "row_dot");
  if (node(r).needs_grad) {
    node(r).back = [this, a, v, r, m, n] {
      const auto& g = node(r).grad;
      if (node(a).needs_grad) {
        auto& ga = grad_buf(a);
        const auto& vd = value(v).data;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i] * vd[j];
      }
      if (node(v).needs_grad) {
        auto& gv = grad_buf(v);
        const auto& ad = value(a).data;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) gv[j] += g[i] * ad[i * n + j];
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::sigmoid(Var a) {
  Tensor<T> out = value(a);
  for (T& v : out.data) v = sigmoid_value(v);
  Var r = push(std::move(out), any_grad({a}), "sigmoid");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r] {
      const auto& g = node(r).grad;
      const auto& y = value(r).data;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::relu(Var a) {
  Tensor<T> out = value(a);
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  Var r = push(std::move(out), any_grad({a}), "relu");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r] {
      const auto& g = node(r).grad;
      const auto& x = value(a).data;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > T(0) ? g[i] : T(0);
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::gelu(Var a) {
  Tensor<T> out = value(a);
  for (T& v : out.data) v = gelu_value(v);
  Var r = push(std::move(out), any_grad({a}), "gelu");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r] {
      const auto& g = node(r).grad;
      const auto& x = value(a).data;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_deriv(x[i]);
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::softmax_rows(Var a) {
  const auto& av = value(a);
  const std::size_t m = av.rows(), n = av.cols();
  Tensor<T> out(av.shape);
  for (std::size_t i = 0; i < m; ++i) {
    auto s = softmax<T>(std::span<const T>(av.data.data() + i * n, n));
    std::copy(s.begin(), s.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  Var r = push(std::move(out), any_grad({a}), "softmax_rows");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r, m, n] {
      const auto& g = node(r).grad;
      const auto& y = value(r).data;
      auto& ga = grad_buf(a);
      for (std::size_t i = 0; i < m; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::layer_norm(Var x, Var gamma, Var beta, T eps) {
  const auto& xv = value(x);
  require(xv.rank() == 2 && value(gamma).numel() == xv.shape[1] && value(beta).numel() == xv.shape[1],
          "layer_norm shape mismatch " + shape_str(xv.shape));
  const std::size_t m = xv.shape[0], n = xv.shape[1];
  const auto& gd = value(gamma).data;
  const auto& bd = value(beta).data;
  Tensor<T> out({m, n});
  std::vector<T> xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.data.data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out.data[i * n + j] = xhat[i * n + j] * gd[j] + bd[j];
    }
  }
  Var r = push(std::move(out), any_grad({x, gamma, beta}), "layer_norm");
  if (node(r).needs_grad) {
    node(r).back = [this, x, gamma, beta, r, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      const auto& g = node(r).grad;
      const auto& gd = value(gamma).data;
      if (node(gamma).needs_grad || node(beta).needs_grad) {
        auto* gg = node(gamma).needs_grad ? &grad_buf(gamma) : nullptr;
        auto* gb = node(beta).needs_grad ? &grad_buf(beta) : nullptr;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            if (gg) (*gg)[j] += g[i * n + j] * xhat[i * n + j];
            if (gb) (*gb)[j] += g[i * n + j];
          }
      }
      if (node(x).needs_grad) {
        auto& gx = grad_buf(x);
        for (std::size_t i = 0; i < m; ++i) {
          T sum_d = 0, sum_dx = 0;
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[i * n + j] * gd[j];
            sum_d += d;
            sum_dx += d * xhat[i * n + j];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const T d = g[i * n + j] * gd[j];
            gx[i * n + j] += inv_std[i] / T(n) * (T(n) * d - sum_d - xhat[i * n + j] * sum_dx);
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::embedding(Var table, const std::vector<int>& ids) {
  const auto& tv = value(table);
  require(tv.rank() == 2, "embedding table must be 2-D");
  const std::size_t v = tv.shape[0], d = tv.shape[1];
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ShapeError("embedding id " + std::to_string(ids[i]) + " out of range " + std::to_string(v));
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Var r = push(std::move(out), any_grad({table}), "embedding");
  if (node(r).needs_grad) {
    node(r).back = [this, table, r, ids, d] {
      const auto& g = node(r).grad;
      auto& gt = grad_buf(table);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
  const auto& qv = value(q);
  const auto& kv = value(k);
  const auto& vv = value(v);
  require(qv.rank() == 2 && qv.shape == kv.shape && qv.shape == vv.shape && qv.shape[0] == batch * seq &&
              qv.shape[1] % heads == 0,
          "causal_attention shape mismatch " + shape_str(qv.shape));
  const std::size_t d = qv.shape[1], hd = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(hd));
  Tensor<T> out({batch * seq, d});
  // probs[b][h][i][j] for j <= i, stored dense per (b,h) as seq x seq.
  std::vector<T> probs(batch * heads * seq * seq, T(0));
  std::vector<T> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* P = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const T* qi = qv.data.data() + (b * seq + i) * d + h * hd;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const T* kj = kv.data.data() + (b * seq + j) * d + h * hd;
          T s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * seq + j] = std::exp(scores[j] - mx);
          total += P[i * seq + j];
        }
        T* oi = out.data.data() + (b * seq + i) * d + h * hd;
        for (std::size_t j = 0; j <= i; ++j) {
          P[i * seq + j] /= total;
          const T* vj = vv.data.data() + (b * seq + j) * d + h * hd;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += P[i * seq + j] * vj[c];
        }
      }
    }
  }
  Var r = push(std::move(out), any_grad({q, k, v}), "causal_attention");
  if (node(r).needs_grad) {
    node(r).back = [this, q, k, v, r, batch, seq, heads, d, hd, inv_sqrt, probs = std::move(probs)] {
      const auto& g = node(r).grad;
      const auto& qd = value(q).data;
      const auto& kd = value(k).data;
      const auto& vd = value(v).data;
      const bool need_q = node(q).needs_grad, need_k = node(k).needs_grad, need_v = node(v).needs_grad;
      std::vector<T>* gq = need_q ? &grad_buf(q) : nullptr;
      std::vector<T>* gk = need_k ? &grad_buf(k) : nullptr;
      std::vector<T>* gv = need_v ? &grad_buf(v) : nullptr;
      std::vector<T> dp(seq);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const T* P = probs.data() + (b * heads + h) * seq * seq;
          for (std::size_t i = 0; i < seq; ++i) {
            const T* gi = g.data() + (b * seq + i) * d + h * hd;
            T dot = 0;
            for (std::size_t j = 0; j <= i; ++j) {
              const T* vj = vd.data() + (b * seq + j) * d + h * hd;
              T s = 0;
              for (std::size_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
              dp[j] = s;
              dot += s * P[i * seq + j];
              if (gv) {
                T* gvj = gv->data() + (b * seq + j) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gvj[c] += P[i * seq + j] * gi[c];
              }
            }
            if (!gq && !gk) continue;
            const T* qi = qd.data() + (b * seq + i) * d + h * hd;
            for (std::size_t j = 0; j <= i; ++j) {
              const T ds = P[i * seq + j] * (dp[j] - dot) * inv_sqrt;
              const T* kj = kd.data() + (b * seq + j) * d + h * hd;
              if (gq) {
                T* gqi = gq->data() + (b * seq + i) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds * kj[c];
              }
              if (gk) {
                T* gkj = gk->data() + (b * seq + j) * d + h * hd;
                for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds * qi[c];
              }
            }
          }
        }
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask) {
  const auto& lv = value(logits);
  require(lv.rank() == 2 && targets.size() == lv.shape[0] && mask.size() == lv.shape[0],
          "cross_entropy shape mismatch " + shape_str(lv.shape));
  const std::size_t m = lv.shape[0], n = lv.shape[1];
  std::size_t count = 0;
  for (auto bit : mask) count += bit ? 1 : 0;
  if (count == 0) throw ShapeError("cross_entropy: mask selects no positions");
  std::vector<T> probs(m * n, T(0));
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (!mask[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= n)
      throw ShapeError("cross_entropy target out of range");
    auto p = softmax<T>(std::span<const T>(lv.data.data() + i * n, n));
    std::copy(p.begin(), p.end(), probs.begin() + static_cast<std::ptrdiff_t>(i * n));
    // log-sum-exp form keeps the loss finite when the target prob underflows.
    const T* row = lv.data.data() + i * n;
    const T mx = *std::max_element(row, row + n);
    double lse = 0;
    for (std::size_t j = 0; j < n; ++j) lse += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(lse) + static_cast<double>(mx) - static_cast<double>(row[targets[i]]);
  }
  Tensor<T> out({1}, {static_cast<T>(total / static_cast<double>(count))});
  Var r = push(std::move(out), any_grad({logits}), "cross_entropy");
  if (node(r).needs_grad) {
    node(r).back = [this, logits, r, targets, mask, m, n, count, probs = std::move(probs)] {
      const T g = node(r).grad[0] / T(count);
      auto& gl = grad_buf(logits);
      for (std::size_t i = 0; i < m; ++i) {
        if (!mask[i]) continue;
        for (std::size_t j = 0; j < n; ++j) gl[i * n + j] += g * probs[i * n + j];
        gl[i * n + static_cast<std::size_t>(targets[i])] -= g;
      }
    };
  }
  return r;
}

template <typename T>
Var Tape<T>::sum(Var a) {
  T total = 0;
  for (T v : value(a).data) total += v;
  Var r = push(Tensor<T>({1}, {total}), any_grad({a}), "sum");
  if (node(r).needs_grad) {
    node(r).back = [this, a, r] {
      const T g = node(r).grad[0];
      auto& ga = grad_buf(a);
      for (T& x : ga) x += g;
    };
  }
  return r;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (!grad_enabled_) throw TapeError("backward on a tape with gradients disabled");
  if (backward_done_) throw TapeError("backward called twice without reset");
  if (value(loss).numel() != 1) throw TapeError("backward requires a scalar loss");
  backward_done_ = true;
  ++autodiff_counters().backward_calls;
  if (!node(loss).needs_grad) return;
  grad_buf(loss)[0] = T(1);
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.back) n.back();
    if (n.param) {
      auto& pg = n.param->grad;
      for (std::size_t j = 0; j < pg.size(); ++j) pg[j] += n.grad[j];
    }
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace perpcs
