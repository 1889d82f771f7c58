#pragma once

// Plain-loop reference implementations used as test oracles. They share no
// code with the library beyond reading parameter values.

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "hierdoc/autograd.hpp"
#include "hierdoc/segmenter.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const hierdoc::Array<double>& a) {
  Mat m(a.rows(), Vec(a.cols()));
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m[r][c] = a(r, c);
  return m;
}

inline Vec to_vec(const hierdoc::Array<double>& a) { return Vec(a.values().begin(), a.values().end()); }

inline hierdoc::Array<double> to_array(const Mat& m) {
  hierdoc::Array<double> a = hierdoc::Array<double>::matrix(m.size(), m[0].size());
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < m[0].size(); ++c) a(r, c) = m[r][c];
  return a;
}

inline Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, Vec(c));
  for (auto& row : m)
    for (auto& v : row) v = n(rng);
  return m;
}

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.size(), Vec(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

inline Mat affine(const Mat& x, const Mat& w, const Vec& b) {
  Mat out = matmul(x, w);
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

inline Vec softmax(const Vec& x) {
  // exp/sum without max shift; fine for the moderate logits used in tests.
  long double total = 0;
  std::vector<long double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(x[i]));
    total += e[i];
  }
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(e[i] / total);
  return out;
}

inline Vec layer_norm_row(const Vec& x, const Vec& gain, const Vec& bias, double eps) {
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = (x[i] - mean) / std::sqrt(var + eps) * gain[i] + bias[i];
  return out;
}

inline Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, double eps) {
  Mat out;
  for (const auto& row : x) out.push_back(layer_norm_row(row, gain, bias, eps));
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scaled dot-product attention, heads over contiguous column slices.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<int>& key_mask,
                     std::size_t heads) {
  const std::size_t d = q[0].size(), dh = d / heads;
  Mat out(q.size(), Vec(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < q.size(); ++i) {
      Vec scores;
      std::vector<std::size_t> keys;
      for (std::size_t j = 0; j < k.size(); ++j) {
        if (!key_mask.empty() && key_mask[j] == 0) continue;
        double s = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[i][c] * k[j][c];
        scores.push_back(s / std::sqrt(static_cast<double>(dh)));
        keys.push_back(j);
      }
      const Vec w = softmax(scores);
      for (std::size_t n = 0; n < keys.size(); ++n)
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) out[i][c] += w[n] * v[keys[n]][c];
    }
  }
  return out;
}

// Reads named parameters from a set.
struct Params {
  const hierdoc::ad::ParameterSet<double>& set;
  Mat mat(const std::string& name) const { return to_mat(set.get(name).value); }
  Vec vec(const std::string& name) const { return to_vec(set.get(name).value); }
};

// Post-norm block: LN(x + Attn(x)W_o); LN(h + W2 gelu(W1 h)).
inline Mat transformer_layer(const Mat& x, const Params& p, const std::string& prefix,
                             std::size_t heads, double eps, const std::vector<int>& mask = {}) {
  auto lin = [&](const Mat& in, const std::string& name) {
    return affine(in, p.mat(prefix + name + ".weight"), p.vec(prefix + name + ".bias"));
  };
  const Mat q = lin(x, ".attention.query");
  const Mat k = lin(x, ".attention.key");
  const Mat v = lin(x, ".attention.value");
  const Mat a = lin(attention(q, k, v, mask, heads), ".attention.output");
  const Mat h = layer_norm(add(x, a), p.vec(prefix + ".attention.norm.gain"),
                           p.vec(prefix + ".attention.norm.bias"), eps);
  Mat f = lin(h, ".ffn.in");
  for (auto& row : f)
    for (auto& val : row) val = gelu(val);
  f = lin(f, ".ffn.out");
  return layer_norm(add(h, f), p.vec(prefix + ".ffn.norm.gain"), p.vec(prefix + ".ffn.norm.bias"),
                    eps);
}

// One LSTM step; gate columns ordered i, f, g, o.
inline void lstm_cell(const Vec& x, Vec& h, Vec& c, const Mat& w_in, const Mat& w_rec,
                      const Vec& bias) {
  const std::size_t n = h.size();
  Vec z(4 * n);
  for (std::size_t j = 0; j < 4 * n; ++j) {
    double s = bias[j];
    for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * w_in[k][j];
    for (std::size_t k = 0; k < n; ++k) s += h[k] * w_rec[k][j];
    z[j] = s;
  }
  Vec h2(n), c2(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double i = sigmoid(z[j]), f = sigmoid(z[n + j]), g = std::tanh(z[2 * n + j]),
                 o = sigmoid(z[3 * n + j]);
    c2[j] = f * c[j] + i * g;
    h2[j] = o * std::tanh(c2[j]);
  }
  h = h2;
  c = c2;
}

// Head: softmax(W2 relu(W1 e + b1) + b2).
inline Vec doc_head(const Vec& e, const Params& p) {
  Mat hid = affine(Mat{e}, p.mat("head.hidden.weight"), p.vec("head.hidden.bias"));
  for (auto& v : hid[0]) v = std::max(0.0, v);
  return softmax(affine(hid, p.mat("head.output.weight"), p.vec("head.output.bias"))[0]);
}

// Brute-force window enumeration: start p is kept when p == 0 or the window
// before it stopped short of the last token.
struct Windows {
  std::vector<std::size_t> starts;
  std::vector<std::size_t> coverage;  // per token
};

inline Windows enumerate_windows(std::size_t L, std::size_t s, std::size_t t) {
  Windows w;
  w.coverage.assign(L, 0);
  for (std::size_t p = 0; p < L; p += t) {
    if (p > 0 && w.starts.back() + s >= L) break;
    w.starts.push_back(p);
    for (std::size_t i = p; i < std::min(L, p + s); ++i) ++w.coverage[i];
  }
  return w;
}

// Max over all parameter elements of |analytic - numeric| / max(|a|, |n|, floor)
// using central differences.
struct GradCheck {
  double max_rel_error = 0;
  std::string worst;
  std::size_t checked = 0;
};

inline GradCheck check_gradients(
    hierdoc::ad::ParameterSet<double>& params,
    const std::function<hierdoc::ad::Var(hierdoc::ad::Tape<double>&)>& loss, double step = 1e-5,
    double floor = 1e-6) {
  using namespace hierdoc;
  params.zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(loss(tape));
  }
  GradCheck out;
  auto eval = [&] {
    ad::Tape<double> tape(false);
    return tape.value(loss(tape))[0];
  };
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params[i];
    for (std::size_t e = 0; e < p.value.size(); ++e) {
      const double saved = p.value[e];
      p.value[e] = saved + step;
      const double up = eval();
      p.value[e] = saved - step;
      const double down = eval();
      p.value[e] = saved;
      const double numeric = (up - down) / (2 * step);
      const double analytic = p.grad[e];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        char buf[160];
        std::snprintf(buf, sizeof buf, "[%zu] analytic %.6e numeric %.6e", e, analytic, numeric);
        out.worst = p.name + buf;
      }
    }
  }
  return out;
}

}  // namespace oracle
