#pragma once

#include <random>
#include <span>
#include <string>

#include "hierdoc/autograd.hpp"

namespace hierdoc::nn {

// Normal(0, std) resampled until within two standard deviations.
template <typename T>
Array<T> truncated_normal(Shape shape, double stddev, std::mt19937_64& rng);

// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Array<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

enum class Init { truncated_normal, glorot };

template <typename T>
struct Linear {
  ad::Parameter<T>* weight = nullptr;  // (in, out)
  ad::Parameter<T>* bias = nullptr;    // (out)

  static Linear create(ad::ParameterSet<T>& params, const std::string& prefix, std::size_t in,
                       std::size_t out, std::mt19937_64& rng, Init init = Init::truncated_normal,
                       double stddev = 0.02);
  ad::Var operator()(ad::Tape<T>& t, ad::Var x) const;
};

template <typename T>
struct LayerNorm {
  ad::Parameter<T>* gain = nullptr;
  ad::Parameter<T>* bias = nullptr;
  T epsilon = T(1e-12);

  static LayerNorm create(ad::ParameterSet<T>& params, const std::string& prefix,
                          std::size_t width, double epsilon);
  ad::Var operator()(ad::Tape<T>& t, ad::Var x) const;
};

// Post-norm Transformer block: x = LN(x + Attn(x)); x = LN(x + FFN(x)).
// Dropout applies to attention weights and to the feed-forward output.
template <typename T>
struct TransformerLayer {
  Linear<T> query, key, value, output;
  LayerNorm<T> attention_norm;
  Linear<T> ff_in, ff_out;
  LayerNorm<T> ff_norm;
  std::size_t heads = 1;

  static TransformerLayer create(ad::ParameterSet<T>& params, const std::string& prefix,
                                 std::size_t d_model, std::size_t d_ff, std::size_t heads,
                                 double epsilon, std::mt19937_64& rng);

  // x is (groups * length, d_model); key_mask may be empty.
  ad::Var operator()(ad::Tape<T>& t, ad::Var x, std::size_t groups,
                     std::span<const std::uint8_t> key_mask, double dropout,
                     std::mt19937_64* rng) const;
};

}  // namespace hierdoc::nn
