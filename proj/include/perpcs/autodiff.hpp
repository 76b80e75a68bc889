#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "perpcs/tensor.hpp"

namespace perpcs {

// A persistent weight. Gradients are accumulated here by Tape::backward when
// `trainable` is set; frozen parameters are never written by the tape.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad.assign(value.numel(), T(0)); }
};

// Handle to a value recorded on a tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Per-thread instrumentation. Assembly asserts these do not move.
struct AutodiffCounters {
  std::uint64_t grad_tapes = 0;
  std::uint64_t backward_calls = 0;
  std::uint64_t optimizer_steps = 0;
};
AutodiffCounters& autodiff_counters();

class TapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reverse-mode tape, rebuilt for every step. Nodes are appended in execution
// order, so reverse insertion order is a reverse topological order.
template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var param(Parameter<T>& p);
  Var constant(Tensor<T> value);

  Var matmul(Var a, Var b);     // [m,k] x [k,n]
  Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T s);
  Var add_row(Var a, Var bias);   // [m,n] + [n]
  Var mul_col(Var a, Var col);    // [m,n] * [m] (row-wise scale)
  Var row_dot(Var a, Var v);      // [m,n] . [n] -> [m]
  Var sigmoid(Var a);
  Var relu(Var a);
  Var gelu(Var a);
  Var softmax_rows(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5));
  Var embedding(Var table, const std::vector<int>& ids);
  // Multi-head causal self-attention over `batch` sequences of length `seq`.
  Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);
  // Mean negative log-likelihood over positions where mask != 0.
  Var cross_entropy(Var logits, const std::vector<int>& targets, const std::vector<std::uint8_t>& mask);
  Var sum(Var a);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  // Gradient of the last backward() w.r.t. this node; empty when not needed.
  const std::vector<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(Var loss);
  void reset();

 private:
  struct Node {
    Tensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    std::function<void()> back;
  };

  Var push(Tensor<T> value, bool needs_grad, const char* op);
  Node& node(Var v) { return nodes_.at(v.id); }
  std::vector<T>& grad_buf(Var v);
  bool any_grad(std::initializer_list<Var> vs) const;

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

extern template class Tape<float>;
extern template class Tape<double>;

// Softmax of a plain vector with max-subtraction.
template <typename T>
std::vector<T> softmax(std::span<const T> x);

}  // namespace perpcs
