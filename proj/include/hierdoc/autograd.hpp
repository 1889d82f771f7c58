#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hierdoc/array.hpp"

// Reverse-mode differentiation over a linear tape. Every operation appends a
// node whose value is computed eagerly; backward() walks the tape in reverse
// and accumulates gradients into the nodes and, finally, into parameters.
namespace hierdoc::ad {

template <typename T>
struct Parameter {
  std::string name;
  Array<T> value;
  Array<T> grad;  // same shape as value once allocated

  void zero_grad() {
    if (grad.size() != value.size()) {
      grad = Array<T>(value.shape());
    } else {
      grad.fill(T(0));
    }
  }
};

// Owns named parameters with stable addresses. Insertion order is the
// serialization order.
template <typename T>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<T>& add(std::string name, Array<T> value);
  Parameter<T>& get(std::string_view name);
  const Parameter<T>& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  std::vector<Array<T>> snapshot() const;
  void restore(const std::vector<Array<T>>& values);

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
};

struct Var {
  std::uint32_t id = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  // With record == false no backward closures are kept; use for inference.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array<T> value);
  Var parameter(Parameter<T>& p);

  const Array<T>& value(Var v) const;
  // Gradient accumulated so far; empty array if nothing reached the node.
  const Array<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and propagates. Parameter gradients are added
  // to Parameter::grad, so callers zero them between steps.
  void backward(Var loss);

  // Operation-author interface.
  Var record(Array<T> value, std::initializer_list<Var> inputs, BackwardFn fn);
  Array<T>& grad_buffer(Var v);

 private:
  struct Node {
    Array<T> value;
    const Array<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Array<T> grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  bool record_;
  std::vector<Node> nodes_;
};

// ---- primitive operations -------------------------------------------------
// All operands are viewed as matrices (rows x last dimension).

template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
// x[m,k] * w[k,n] + b[n]
template <typename T> Var linear(Tape<T>& t, Var x, Var w, Var b);
template <typename T> Var add(Tape<T>& t, Var a, Var b);
// Adds `tile` (r rows) to every consecutive block of r rows of x.
template <typename T> Var add_tiled(Tape<T>& t, Var x, Var tile);
template <typename T> Var mul(Tape<T>& t, Var a, Var b);
template <typename T> Var scale(Tape<T>& t, Var a, T factor);
template <typename T> Var tanh(Tape<T>& t, Var a);
template <typename T> Var sigmoid(Tape<T>& t, Var a);
template <typename T> Var relu(Tape<T>& t, Var a);
// Exact erf-based GELU.
template <typename T> Var gelu(Tape<T>& t, Var a);
template <typename T> Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T epsilon);
template <typename T> Var softmax_rows(Tape<T>& t, Var x);
template <typename T> Var embedding(Tape<T>& t, Var table, std::span<const std::int32_t> ids);
template <typename T> Var gather_rows(Tape<T>& t, Var x, std::vector<std::size_t> rows);
template <typename T> Var slice_cols(Tape<T>& t, Var x, std::size_t begin, std::size_t count);
// x holds `groups` consecutive blocks of equal height; returns the per-block
// row mean, shape (groups, cols).
template <typename T> Var mean_groups(Tape<T>& t, Var x, std::size_t groups);
// Inverted dropout. rate == 0 or rng == nullptr is the identity.
template <typename T> Var dropout(Tape<T>& t, Var x, T rate, std::mt19937_64* rng);
template <typename T> Var sum(Tape<T>& t, Var x);
// Mean softmax cross-entropy of logits rows against integer labels.
template <typename T> Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels);

// Scaled dot-product attention over `groups` independent sequences.
// q is (groups*query_len, d); k and v are (groups*key_len, d). key_mask is
// empty (all keys visible) or has groups*key_len entries, 0 for padding.
// Heads split d into equal contiguous slices.
struct AttentionOptions {
  std::size_t groups = 1;
  std::size_t heads = 1;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::span<const std::uint8_t> key_mask,
              const AttentionOptions& options);

}  // namespace hierdoc::ad

namespace hierdoc {

// Array-level entry points used outside of training graphs.
template <typename T>
Array<T> layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias,
                    T epsilon = T(1e-12));

// Single-sequence multi-head attention; mask has one entry per key row.
template <typename T>
Array<T> multi_head_attention(const Array<T>& q, const Array<T>& k, const Array<T>& v,
                              std::span<const std::uint8_t> key_mask, std::size_t heads);

}  // namespace hierdoc
