#include "hierdoc/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace hierdoc {

template <typename T>
Array<T> softmax(const Array<T>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (rank == 0 || axis < 0 || axis >= rank) {
    throw std::invalid_argument("softmax axis " + std::to_string(axis) +
                                " invalid for shape " + shape_string(x.shape()));
  }
  x.check_finite("softmax input");
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= shape[d];
  const std::size_t n = shape[axis];

  Array<T> out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      T hi = x[base];
      for (std::size_t j = 1; j < n; ++j) hi = std::max(hi, x[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x[base + j * inner] - hi);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return out;
}

template Array<float> softmax(const Array<float>&, int);
template Array<double> softmax(const Array<double>&, int);

}  // namespace hierdoc

namespace hierdoc::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
MatMap<T> as_matrix(Array<T>& a) {
  return MatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()),
                   static_cast<Eigen::Index>(a.cols()));
}

template <typename T>
ConstMatMap<T> as_matrix(const Array<T>& a) {
  return ConstMatMap<T>(a.data(), static_cast<Eigen::Index>(a.rows()),
                        static_cast<Eigen::Index>(a.cols()));
}

void require(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument(message);
}

template <typename T>
Shape matrix_shape(const Array<T>& a) {
  return {a.rows(), a.cols()};
}

// Applies f elementwise and records df(x, y) for the backward pass.
template <typename T, typename F, typename DF>
Var unary(Tape<T>& t, Var a, F f, DF df) {
  const Array<T>& x = t.value(a);
  Array<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return t.record(std::move(y), {a}, [a, df](Tape<T>& tape, Var self) {
    const Array<T>& x = tape.value(a);
    const Array<T>& y = tape.value(self);
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(a);
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

// ---- ParameterSet ---------------------------------------------------------

template <typename T>
Parameter<T>& ParameterSet<T>::add(std::string name, Array<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = std::move(name);
  p->value = std::move(value);
  p->grad = Array<T>(p->value.shape());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParameterSet<T>::get(std::string_view name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("unknown parameter " + std::string(name));
}

template <typename T>
const Parameter<T>& ParameterSet<T>::get(std::string_view name) const {
  for (const auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("unknown parameter " + std::string(name));
}

template <typename T>
bool ParameterSet<T>::contains(std::string_view name) const {
  return std::any_of(params_.begin(), params_.end(),
                     [&](const auto& p) { return p->name == name; });
}

template <typename T>
std::size_t ParameterSet<T>::total_size() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

template <typename T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

template <typename T>
std::vector<Array<T>> ParameterSet<T>::snapshot() const {
  std::vector<Array<T>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

template <typename T>
void ParameterSet<T>::restore(const std::vector<Array<T>>& values) {
  require(values.size() == params_.size(), "parameter snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    require(values[i].shape() == params_[i]->value.shape(),
            "parameter snapshot shape mismatch for " + params_[i]->name);
    params_[i]->value = values[i];
  }
}

// ---- Tape -----------------------------------------------------------------

template <typename T>
Var Tape<T>::constant(Array<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
const Array<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.external ? *n.external : n.value;
}

template <typename T>
Var Tape<T>::record(Array<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var in : inputs) {
      if (nodes_.at(in.id).needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Array<T>& Tape<T>::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.empty()) n.grad = Array<T>(value(v).shape());
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var loss) {
  if (value(loss).size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_string(value(loss).shape()));
  }
  grad_buffer(loss)[0] = T(1);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.backward && !n.grad.empty()) n.backward(*this, Var{static_cast<std::uint32_t>(id)});
  }
  for (Node& n : nodes_) {
    if (n.param && !n.grad.empty()) {
      Parameter<T>& p = *n.param;
      if (p.grad.size() != p.value.size()) p.grad = Array<T>(p.value.shape());
      for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    }
  }
}

// ---- operations -----------------------------------------------------------

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const Array<T>& av = t.value(a);
  const Array<T>& bv = t.value(b);
  require(av.cols() == bv.rows(), "matmul shape mismatch " + shape_string(av.shape()) +
                                      " x " + shape_string(bv.shape()));
  Array<T> out = Array<T>::matrix(av.rows(), bv.cols());
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tape, Var self) {
    auto g = as_matrix(tape.grad(self));
    if (tape.needs_grad(a)) {
      as_matrix(tape.grad_buffer(a)).noalias() += g * as_matrix(tape.value(b)).transpose();
    }
    if (tape.needs_grad(b)) {
      as_matrix(tape.grad_buffer(b)).noalias() += as_matrix(tape.value(a)).transpose() * g;
    }
  });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
  const Array<T>& xv = t.value(x);
  const Array<T>& wv = t.value(w);
  const Array<T>& bv = t.value(b);
  require(xv.cols() == wv.rows() && bv.size() == wv.cols(),
          "linear shape mismatch " + shape_string(xv.shape()) + " x " +
              shape_string(wv.shape()) + " + " + shape_string(bv.shape()));
  Array<T> out = Array<T>::matrix(xv.rows(), wv.cols());
  auto o = as_matrix(out);
  o.noalias() = as_matrix(xv) * as_matrix(wv);
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(
      bv.data(), static_cast<Eigen::Index>(bv.size()));
  return t.record(std::move(out), {x, w, b}, [x, w, b](Tape<T>& tape, Var self) {
    auto g = as_matrix(tape.grad(self));
    if (tape.needs_grad(x)) {
      as_matrix(tape.grad_buffer(x)).noalias() += g * as_matrix(tape.value(w)).transpose();
    }
    if (tape.needs_grad(w)) {
      as_matrix(tape.grad_buffer(w)).noalias() += as_matrix(tape.value(x)).transpose() * g;
    }
    if (tape.needs_grad(b)) {
      Array<T>& gb = tape.grad_buffer(b);
      MatMap<T>(gb.data(), 1, static_cast<Eigen::Index>(gb.size())) += g.colwise().sum();
    }
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const Array<T>& av = t.value(a);
  const Array<T>& bv = t.value(b);
  require(av.size() == bv.size(), "add shape mismatch " + shape_string(av.shape()) +
                                      " + " + shape_string(bv.shape()));
  Array<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    for (Var in : {a, b}) {
      if (!tape.needs_grad(in)) continue;
      Array<T>& gi = tape.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

template <typename T>
Var add_tiled(Tape<T>& t, Var x, Var tile) {
  const Array<T>& xv = t.value(x);
  const Array<T>& tv = t.value(tile);
  require(xv.cols() == tv.cols() && xv.rows() % tv.rows() == 0,
          "add_tiled shape mismatch " + shape_string(xv.shape()) + " + " +
              shape_string(tv.shape()));
  Array<T> out = xv;
  const std::size_t block = tv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += tv[i % block];
  return t.record(std::move(out), {x, tile}, [x, tile](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    if (tape.needs_grad(x)) {
      Array<T>& gx = tape.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tape.needs_grad(tile)) {
      Array<T>& gt = tape.grad_buffer(tile);
      const std::size_t block = gt.size();
      for (std::size_t i = 0; i < g.size(); ++i) gt[i % block] += g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  const Array<T>& av = t.value(a);
  const Array<T>& bv = t.value(b);
  require(av.size() == bv.size(), "mul shape mismatch " + shape_string(av.shape()) +
                                      " * " + shape_string(bv.shape()));
  Array<T> out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    if (tape.needs_grad(a)) {
      const Array<T>& bv = tape.value(b);
      Array<T>& ga = tape.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(b)) {
      const Array<T>& av = tape.value(a);
      Array<T>& gb = tape.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T factor) {
  return unary(
      t, a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Var tanh(Tape<T>& t, Var a) {
  return unary(
      t, a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var sigmoid(Tape<T>& t, Var a) {
  return unary(
      t, a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
  return unary(
      t, a, [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <typename T>
Var gelu(Tape<T>& t, Var a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary(
      t, a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var bias, T epsilon) {
  const Array<T>& xv = t.value(x);
  const Array<T>& gv = t.value(gain);
  const Array<T>& bv = t.value(bias);
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(gv.size() == cols && bv.size() == cols,
          "layer_norm gain/bias must match last dimension " + std::to_string(cols));
  require(epsilon > 0, "layer_norm epsilon must be positive");

  Array<T> out(xv.shape());
  std::vector<T> normalized(xv.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    T mean = 0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= T(cols);
    T var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= T(cols);
    const T inv = T(1) / std::sqrt(var + epsilon);
    inv_std[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      const T n = (row[c] - mean) * inv;
      normalized[r * cols + c] = n;
      out[r * cols + c] = n * gv[c] + bv[c];
    }
  }
  return t.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, rows, cols, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](Tape<T>& tape, Var self) {
        const Array<T>& g = tape.grad(self);
        if (tape.needs_grad(gain)) {
          Array<T>& gg = tape.grad_buffer(gain);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % cols] += g[i] * normalized[i];
        }
        if (tape.needs_grad(bias)) {
          Array<T>& gb = tape.grad_buffer(bias);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
        }
        if (tape.needs_grad(x)) {
          const Array<T>& gv = tape.value(gain);
          Array<T>& gx = tape.grad_buffer(x);
          std::vector<T> dn(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dn = 0, mean_dn_n = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              dn[c] = g[r * cols + c] * gv[c];
              mean_dn += dn[c];
              mean_dn_n += dn[c] * normalized[r * cols + c];
            }
            mean_dn /= T(cols);
            mean_dn_n /= T(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              gx[r * cols + c] +=
                  inv_std[r] * (dn[c] - mean_dn - normalized[r * cols + c] * mean_dn_n);
            }
          }
        }
      });
}

template <typename T>
Var softmax_rows(Tape<T>& t, Var x) {
  const Array<T>& xv = t.value(x);
  Array<T> out = softmax(xv.reshaped(matrix_shape(xv)), -1).reshaped(xv.shape());
  return t.record(std::move(out), {x}, [x](Tape<T>& tape, Var self) {
    const Array<T>& y = tape.value(self);
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(x);
    const std::size_t cols = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
      }
    }
  });
}

template <typename T>
Var embedding(Tape<T>& t, Var table, std::span<const std::int32_t> ids) {
  const Array<T>& tv = t.value(table);
  const std::size_t d = tv.cols();
  Array<T> out = Array<T>::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
      throw std::out_of_range("embedding id " + std::to_string(id) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  return t.record(std::move(out), {table},
                  [table, ids = std::vector<std::int32_t>(ids.begin(), ids.end())](
                      Tape<T>& tape, Var self) {
                    const Array<T>& g = tape.grad(self);
                    Array<T>& gt = tape.grad_buffer(table);
                    const std::size_t d = gt.cols();
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      T* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                      const T* src = g.data() + i * d;
                      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                    }
                  });
}

template <typename T>
Var gather_rows(Tape<T>& t, Var x, std::vector<std::size_t> rows) {
  const Array<T>& xv = t.value(x);
  const std::size_t d = xv.cols();
  Array<T> out = Array<T>::matrix(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] < xv.rows(), "gather_rows index out of range");
    std::copy_n(xv.data() + rows[i] * d, d, out.data() + i * d);
  }
  return t.record(std::move(out), {x}, [x, rows = std::move(rows)](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(x);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t c = 0; c < d; ++c) gx[rows[i] * d + c] += g[i * d + c];
    }
  });
}

template <typename T>
Var slice_cols(Tape<T>& t, Var x, std::size_t begin, std::size_t count) {
  const Array<T>& xv = t.value(x);
  const std::size_t cols = xv.cols();
  require(count > 0 && begin + count <= cols, "slice_cols range out of bounds");
  Array<T> out = Array<T>::matrix(xv.rows(), count);
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    std::copy_n(xv.data() + r * cols + begin, count, out.data() + r * count);
  }
  return t.record(std::move(out), {x}, [x, begin, count](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(x);
    const std::size_t cols = gx.cols();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + begin + c] += g[r * count + c];
    }
  });
}

template <typename T>
Var mean_groups(Tape<T>& t, Var x, std::size_t groups) {
  const Array<T>& xv = t.value(x);
  require(groups > 0 && xv.rows() % groups == 0, "mean_groups: rows not divisible by groups");
  const std::size_t height = xv.rows() / groups, d = xv.cols();
  Array<T> out = Array<T>::matrix(groups, d);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < d; ++c) out(gi, c) += xv[(gi * height + r) * d + c];
    }
    for (std::size_t c = 0; c < d; ++c) out(gi, c) /= T(height);
  }
  return t.record(std::move(out), {x}, [x, height](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(x);
    const std::size_t d = g.cols();
    for (std::size_t r = 0; r < gx.rows(); ++r) {
      const std::size_t gi = r / height;
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[gi * d + c] / T(height);
    }
  });
}

template <typename T>
Var dropout(Tape<T>& t, Var x, T rate, std::mt19937_64* rng) {
  if (rate <= 0 || rng == nullptr) return x;
  require(rate < 1, "dropout rate must be below 1");
  const Array<T>& xv = t.value(x);
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  const T kept_scale = T(1) / (T(1) - rate);
  std::vector<T> factors(xv.size());
  Array<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    factors[i] = keep(*rng) ? kept_scale : T(0);
    out[i] = xv[i] * factors[i];
  }
  return t.record(std::move(out), {x}, [x, factors = std::move(factors)](Tape<T>& tape, Var self) {
    const Array<T>& g = tape.grad(self);
    Array<T>& gx = tape.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[i];
  });
}

template <typename T>
Var sum(Tape<T>& t, Var x) {
  const Array<T>& xv = t.value(x);
  T total = 0;
  for (T v : xv.values()) total += v;
  return t.record(Array<T>::scalar(total), {x}, [x](Tape<T>& tape, Var self) {
    const T g = tape.grad(self)[0];
    Array<T>& gx = tape.grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, std::span<const int> labels) {
  const Array<T>& lv = t.value(logits);
  const std::size_t rows = lv.rows(), classes = lv.cols();
  require(rows == labels.size(), "cross_entropy: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(rows) + " rows");
  lv.check_finite("cross_entropy logits");
  Array<T> probs = softmax(lv.reshaped({rows, classes}), -1);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = labels[r];
    require(y >= 0 && static_cast<std::size_t>(y) < classes, "cross_entropy label out of range");
    const T* row = lv.data() + r * classes;
    T hi = row[0];
    for (std::size_t c = 1; c < classes; ++c) hi = std::max(hi, row[c]);
    T total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(row[c] - hi);
    loss += hi + std::log(total) - row[y];
  }
  loss /= T(rows);
  return t.record(Array<T>::scalar(loss), {logits},
                  [logits, probs = std::move(probs),
                   labels = std::vector<int>(labels.begin(), labels.end())](Tape<T>& tape,
                                                                             Var self) {
                    const T g = tape.grad(self)[0];
                    Array<T>& gl = tape.grad_buffer(logits);
                    const std::size_t rows = probs.rows(), classes = probs.cols();
                    const T w = g / T(rows);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t c = 0; c < classes; ++c) {
                        const T target = static_cast<int>(c) == labels[r] ? T(1) : T(0);
                        gl[r * classes + c] += w * (probs(r, c) - target);
                      }
                    }
                  });
}

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::span<const std::uint8_t> key_mask,
              const AttentionOptions& options) {
  const Array<T>& qv = t.value(q);
  const Array<T>& kv = t.value(k);
  const Array<T>& vv = t.value(v);
  const std::size_t groups = options.groups, heads = options.heads;
  const std::size_t d = qv.cols();
  require(groups > 0 && heads > 0, "attention needs positive groups and heads");
  require(kv.cols() == d && vv.cols() == d, "attention q/k/v widths differ");
  require(d % heads == 0, "model dimension " + std::to_string(d) +
                              " not divisible by " + std::to_string(heads) + " heads");
  require(qv.rows() % groups == 0 && kv.rows() % groups == 0 && kv.rows() == vv.rows(),
          "attention row counts inconsistent with groups");
  const std::size_t lq = qv.rows() / groups, lk = kv.rows() / groups, dh = d / heads;
  require(key_mask.empty() || key_mask.size() == groups * lk, "attention mask size mismatch");
  for (std::size_t g = 0; g < groups && !key_mask.empty(); ++g) {
    bool any = false;
    for (std::size_t j = 0; j < lk; ++j) any = any || key_mask[g * lk + j] != 0;
    if (!any) throw std::invalid_argument("attention: every key is masked in group " +
                                          std::to_string(g));
  }
  const T inv_scale = T(1) / std::sqrt(T(dh));
  const T rate = static_cast<T>(options.dropout);
  const bool use_dropout = rate > 0 && options.rng != nullptr;

  // probs: (groups, heads, lq, lk) softmax weights; keep: dropout factors.
  std::vector<T> probs(groups * heads * lq * lk);
  std::vector<T> keep;
  if (use_dropout) {
    keep.resize(probs.size());
    std::bernoulli_distribution coin(1.0 - options.dropout);
    const T kept = T(1) / (T(1) - rate);
    for (auto& f : keep) f = coin(*options.rng) ? kept : T(0);
  }
  Array<T> out = Array<T>::matrix(groups * lq, d);
  const auto ld = static_cast<Eigen::Index>(d);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t gh = 0; gh < static_cast<std::ptrdiff_t>(groups * heads); ++gh) {
    const std::size_t g = static_cast<std::size_t>(gh) / heads;
    const std::size_t h = static_cast<std::size_t>(gh) % heads;
    ConstStridedMap<T> qm(qv.data() + g * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> km(kv.data() + g * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(ld));
    ConstStridedMap<T> vm(vv.data() + g * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(ld));
    StridedMap<T> om(out.data() + g * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(ld));
    MatMap<T> p(probs.data() + static_cast<std::size_t>(gh) * lq * lk, lq, lk);
    p.noalias() = (qm * km.transpose()) * inv_scale;
    for (std::size_t i = 0; i < lq; ++i) {
      T hi = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < lk; ++j) {
        if (key_mask.empty() || key_mask[g * lk + j]) hi = std::max(hi, p(i, j));
      }
      T total = 0;
      for (std::size_t j = 0; j < lk; ++j) {
        const bool visible = key_mask.empty() || key_mask[g * lk + j];
        const T e = visible ? std::exp(p(i, j) - hi) : T(0);
        p(i, j) = e;
        total += e;
      }
      for (std::size_t j = 0; j < lk; ++j) p(i, j) /= total;
    }
    if (use_dropout) {
      ConstMatMap<T> f(keep.data() + static_cast<std::size_t>(gh) * lq * lk, lq, lk);
      om.noalias() = p.cwiseProduct(f) * vm;
    } else {
      om.noalias() = p * vm;
    }
  }

  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, groups, heads, lq, lk, dh, inv_scale, probs = std::move(probs),
       keep = std::move(keep)](Tape<T>& tape, Var self) {
        const Array<T>& g_out = tape.grad(self);
        const Array<T>& qv = tape.value(q);
        const Array<T>& kv = tape.value(k);
        const Array<T>& vv = tape.value(v);
        const std::size_t d = qv.cols();
        const auto ld = static_cast<Eigen::Index>(d);
        const bool want_q = tape.needs_grad(q), want_k = tape.needs_grad(k),
                   want_v = tape.needs_grad(v);
        T* gq = want_q ? tape.grad_buffer(q).data() : nullptr;
        T* gk = want_k ? tape.grad_buffer(k).data() : nullptr;
        T* gv = want_v ? tape.grad_buffer(v).data() : nullptr;

#pragma omp parallel for schedule(static)
        for (std::ptrdiff_t gh = 0; gh < static_cast<std::ptrdiff_t>(groups * heads); ++gh) {
          const std::size_t g = static_cast<std::size_t>(gh) / heads;
          const std::size_t h = static_cast<std::size_t>(gh) % heads;
          const std::size_t qoff = g * lq * d + h * dh, koff = g * lk * d + h * dh;
          ConstStridedMap<T> qm(qv.data() + qoff, lq, dh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> km(kv.data() + koff, lk, dh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> vm(vv.data() + koff, lk, dh, Eigen::OuterStride<>(ld));
          ConstStridedMap<T> go(g_out.data() + qoff, lq, dh, Eigen::OuterStride<>(ld));
          ConstMatMap<T> p(probs.data() + static_cast<std::size_t>(gh) * lq * lk, lq, lk);

          RowMat<T> weights = p;
          if (!keep.empty()) {
            weights = p.cwiseProduct(
                ConstMatMap<T>(keep.data() + static_cast<std::size_t>(gh) * lq * lk, lq, lk));
          }
          if (want_v) {
            StridedMap<T>(gv + koff, lk, dh, Eigen::OuterStride<>(ld)).noalias() +=
                weights.transpose() * go;
          }
          if (!want_q && !want_k) continue;
          RowMat<T> dp = go * vm.transpose();
          if (!keep.empty()) {
            dp = dp.cwiseProduct(
                ConstMatMap<T>(keep.data() + static_cast<std::size_t>(gh) * lq * lk, lq, lk));
          }
          // softmax backward: ds = p * (dp - rowsum(dp * p))
          RowMat<T> ds = p.cwiseProduct(dp);
          const auto row_dot = ds.rowwise().sum().eval();
          ds -= p.cwiseProduct(row_dot.replicate(1, static_cast<Eigen::Index>(lk)));
          ds *= inv_scale;
          if (want_q) {
            StridedMap<T>(gq + qoff, lq, dh, Eigen::OuterStride<>(ld)).noalias() += ds * km;
          }
          if (want_k) {
            StridedMap<T>(gk + koff, lk, dh, Eigen::OuterStride<>(ld)).noalias() +=
                ds.transpose() * qm;
          }
        }
      });
}

#define HIERDOC_INSTANTIATE(T)                                                        \
  template class ParameterSet<T>;                                                     \
  template class Tape<T>;                                                             \
  template Var matmul(Tape<T>&, Var, Var);                                            \
  template Var linear(Tape<T>&, Var, Var, Var);                                       \
  template Var add(Tape<T>&, Var, Var);                                               \
  template Var add_tiled(Tape<T>&, Var, Var);                                         \
  template Var mul(Tape<T>&, Var, Var);                                               \
  template Var scale(Tape<T>&, Var, T);                                               \
  template Var tanh(Tape<T>&, Var);                                                   \
  template Var sigmoid(Tape<T>&, Var);                                                \
  template Var relu(Tape<T>&, Var);                                                   \
  template Var gelu(Tape<T>&, Var);                                                   \
  template Var layer_norm(Tape<T>&, Var, Var, Var, T);                                \
  template Var softmax_rows(Tape<T>&, Var);                                           \
  template Var embedding(Tape<T>&, Var, std::span<const std::int32_t>);               \
  template Var gather_rows(Tape<T>&, Var, std::vector<std::size_t>);                  \
  template Var slice_cols(Tape<T>&, Var, std::size_t, std::size_t);                   \
  template Var mean_groups(Tape<T>&, Var, std::size_t);                               \
  template Var dropout(Tape<T>&, Var, T, std::mt19937_64*);                           \
  template Var sum(Tape<T>&, Var);                                                    \
  template Var cross_entropy(Tape<T>&, Var, std::span<const int>);                    \
  template Var attention(Tape<T>&, Var, Var, Var, std::span<const std::uint8_t>,      \
                         const AttentionOptions&);

HIERDOC_INSTANTIATE(float)
HIERDOC_INSTANTIATE(double)

#undef HIERDOC_INSTANTIATE

}  // namespace hierdoc::ad

namespace hierdoc {

template <typename T>
Array<T> layer_norm(const Array<T>& x, const Array<T>& gain, const Array<T>& bias, T epsilon) {
  ad::Tape<T> tape(false);
  const ad::Var out = ad::layer_norm(tape, tape.constant(x), tape.constant(gain),
                                     tape.constant(bias), epsilon);
  return tape.value(out);
}

template <typename T>
Array<T> multi_head_attention(const Array<T>& q, const Array<T>& k, const Array<T>& v,
                              std::span<const std::uint8_t> key_mask, std::size_t heads) {
  q.check_finite("attention query");
  k.check_finite("attention key");
  v.check_finite("attention value");
  ad::Tape<T> tape(false);
  ad::AttentionOptions options;
  options.heads = heads;
  const ad::Var out = ad::attention(tape, tape.constant(q), tape.constant(k),
                                    tape.constant(v), key_mask, options);
  return tape.value(out);
}

template Array<float> layer_norm(const Array<float>&, const Array<float>&, const Array<float>&,
                                 float);
template Array<double> layer_norm(const Array<double>&, const Array<double>&,
                                  const Array<double>&, double);
template Array<float> multi_head_attention(const Array<float>&, const Array<float>&,
                                           const Array<float>&, std::span<const std::uint8_t>,
                                           std::size_t);
template Array<double> multi_head_attention(const Array<double>&, const Array<double>&,
                                            const Array<double>&,
                                            std::span<const std::uint8_t>, std::size_t);

}  // namespace hierdoc
