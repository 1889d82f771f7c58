#include "hierdoc/nn.hpp"

#include <cmath>

namespace hierdoc::nn {

template <typename T>
Array<T> truncated_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Array<T> out(std::move(shape));
  std::normal_distribution<double> normal(0.0, stddev);
  for (auto& v : out.values()) {
    double x;
    do {
      x = normal(rng);
    } while (std::abs(x) > 2.0 * stddev);
    v = static_cast<T>(x);
  }
  return out;
}

template <typename T>
Array<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> uniform(-limit, limit);
  Array<T> out = Array<T>::matrix(fan_in, fan_out);
  for (auto& v : out.values()) v = static_cast<T>(uniform(rng));
  return out;
}

template <typename T>
Linear<T> Linear<T>::create(ad::ParameterSet<T>& params, const std::string& prefix,
                            std::size_t in, std::size_t out, std::mt19937_64& rng, Init init,
                            double stddev) {
  Linear l;
  l.weight = &params.add(prefix + ".weight", init == Init::glorot
                                                 ? glorot_uniform<T>(in, out, rng)
                                                 : truncated_normal<T>({in, out}, stddev, rng));
  l.bias = &params.add(prefix + ".bias", Array<T>({out}));
  return l;
}

template <typename T>
ad::Var Linear<T>::operator()(ad::Tape<T>& t, ad::Var x) const {
  return ad::linear(t, x, t.parameter(*weight), t.parameter(*bias));
}

template <typename T>
LayerNorm<T> LayerNorm<T>::create(ad::ParameterSet<T>& params, const std::string& prefix,
                                  std::size_t width, double epsilon) {
  LayerNorm n;
  n.gain = &params.add(prefix + ".gain", Array<T>({width}, T(1)));
  n.bias = &params.add(prefix + ".bias", Array<T>({width}));
  n.epsilon = static_cast<T>(epsilon);
  return n;
}

template <typename T>
ad::Var LayerNorm<T>::operator()(ad::Tape<T>& t, ad::Var x) const {
  return ad::layer_norm(t, x, t.parameter(*gain), t.parameter(*bias), epsilon);
}

template <typename T>
TransformerLayer<T> TransformerLayer<T>::create(ad::ParameterSet<T>& params,
                                                const std::string& prefix, std::size_t d_model,
                                                std::size_t d_ff, std::size_t heads,
                                                double epsilon, std::mt19937_64& rng) {
  if (heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  }
  TransformerLayer l;
  l.heads = heads;
  l.query = Linear<T>::create(params, prefix + ".attention.query", d_model, d_model, rng);
  l.key = Linear<T>::create(params, prefix + ".attention.key", d_model, d_model, rng);
  l.value = Linear<T>::create(params, prefix + ".attention.value", d_model, d_model, rng);
  l.output = Linear<T>::create(params, prefix + ".attention.output", d_model, d_model, rng);
  l.attention_norm = LayerNorm<T>::create(params, prefix + ".attention.norm", d_model, epsilon);
  l.ff_in = Linear<T>::create(params, prefix + ".ffn.in", d_model, d_ff, rng);
  l.ff_out = Linear<T>::create(params, prefix + ".ffn.out", d_ff, d_model, rng);
  l.ff_norm = LayerNorm<T>::create(params, prefix + ".ffn.norm", d_model, epsilon);
  return l;
}

template <typename T>
ad::Var TransformerLayer<T>::operator()(ad::Tape<T>& t, ad::Var x, std::size_t groups,
                                        std::span<const std::uint8_t> key_mask, double dropout,
                                        std::mt19937_64* rng) const {
  ad::AttentionOptions opts;
  opts.groups = groups;
  opts.heads = heads;
  opts.dropout = dropout;
  opts.rng = rng;
  ad::Var attended = ad::attention(t, query(t, x), key(t, x), value(t, x), key_mask, opts);
  ad::Var h = attention_norm(t, ad::add(t, x, output(t, attended)));
  ad::Var ff = ff_out(t, ad::gelu(t, ff_in(t, h)));
  ff = ad::dropout(t, ff, static_cast<T>(dropout), rng);
  return ff_norm(t, ad::add(t, h, ff));
}

template Array<float> truncated_normal<float>(Shape, double, std::mt19937_64&);
template Array<double> truncated_normal<double>(Shape, double, std::mt19937_64&);
template Array<float> glorot_uniform<float>(std::size_t, std::size_t, std::mt19937_64&);
template Array<double> glorot_uniform<double>(std::size_t, std::size_t, std::mt19937_64&);
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct TransformerLayer<float>;
template struct TransformerLayer<double>;

}  // namespace hierdoc::nn
