#include "hierdoc/document_models.hpp"

#include "hierdoc/json_util.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <numeric>

namespace hierdoc {

std::string_view feature_kind_name(FeatureKind k) {
  return k == FeatureKind::pooled ? "H" : "P";
}

FeatureKind parse_feature_kind(std::string_view name) {
  if (name == "H") return FeatureKind::pooled;
  if (name == "P") return FeatureKind::posterior;
  throw std::invalid_argument("representation must be H or P, got '" + std::string(name) + "'");
}

std::string_view doc_model_kind_name(DocModelKind k) {
  return k == DocModelKind::robert ? "robert" : "tobert";
}

DocModelKind parse_doc_model_kind(std::string_view name) {
  if (name == "robert") return DocModelKind::robert;
  if (name == "tobert") return DocModelKind::tobert;
  throw std::invalid_argument("document model kind must be robert or tobert, got '" +
                              std::string(name) + "'");
}

void DocModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("doc_model." + field + ": " + why);
  };
  if (input_width == 0) fail("input_width", "must be positive");
  if (num_classes < 2) fail("num_classes", "must be at least 2");
  if (head_hidden == 0) fail("head_hidden", "must be positive");
  if (kind == DocModelKind::robert && lstm_dim == 0) fail("lstm_dim", "must be positive");
  if (kind == DocModelKind::tobert) {
    if (tobert_layers == 0) fail("tobert_layers", "must be positive");
    if (tobert_heads == 0 || tobert_width % tobert_heads != 0) {
      fail("tobert_heads", "must divide tobert_width");
    }
    if (tobert_ff == 0) fail("tobert_ff", "must be positive");
  }
  if (max_segments == 0) fail("max_segments", "must be positive");
  if (!(dropout >= 0 && dropout < 1)) fail("dropout", "must lie in [0, 1)");
}

nlohmann::json to_json(const DocModelConfig& c) {
  return {{"kind", doc_model_kind_name(c.kind)},
          {"input_width", c.input_width},
          {"num_classes", c.num_classes},
          {"lstm_dim", c.lstm_dim},
          {"head_hidden", c.head_hidden},
          {"tobert_layers", c.tobert_layers},
          {"tobert_heads", c.tobert_heads},
          {"tobert_width", c.tobert_width},
          {"tobert_ff", c.tobert_ff},
          {"use_position_embeddings", c.use_position_embeddings},
          {"max_segments", c.max_segments},
          {"pooling", c.pooling == SegmentPooling::mean ? "mean" : "first"},
          {"standardize_inputs", c.standardize_inputs},
          {"dropout", c.dropout},
          {"layer_norm_epsilon", c.layer_norm_epsilon}};
}

DocModelConfig doc_model_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, "doc_model", {"kind", "input_width", "num_classes", "lstm_dim", "head_hidden", "tobert_layers", "tobert_heads", "tobert_width", "tobert_ff", "use_position_embeddings", "max_segments", "pooling", "standardize_inputs", "dropout", "layer_norm_epsilon"});
  DocModelConfig c;
  try {
    c.kind = parse_doc_model_kind(json_field(j, "kind", std::string("robert"), "doc_model"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("doc_model.kind: ") + e.what());
  }
  c.input_width = json_field(j, "input_width", c.input_width, "doc_model");
  c.num_classes = json_field(j, "num_classes", c.num_classes, "doc_model");
  c.lstm_dim = json_field(j, "lstm_dim", c.lstm_dim, "doc_model");
  c.head_hidden = json_field(j, "head_hidden", c.head_hidden, "doc_model");
  c.tobert_layers = json_field(j, "tobert_layers", c.tobert_layers, "doc_model");
  c.tobert_heads = json_field(j, "tobert_heads", c.tobert_heads, "doc_model");
  c.tobert_width = json_field(j, "tobert_width", c.tobert_width, "doc_model");
  c.tobert_ff = json_field(j, "tobert_ff", c.tobert_ff, "doc_model");
  c.use_position_embeddings = json_field(j, "use_position_embeddings", c.use_position_embeddings, "doc_model");
  c.max_segments = json_field(j, "max_segments", c.max_segments, "doc_model");
  const std::string pooling = json_field(j, "pooling", std::string("mean"), "doc_model");
  if (pooling != "mean" && pooling != "first") {
    throw ConfigError("doc_model.pooling: must be mean or first");
  }
  c.pooling = pooling == "mean" ? SegmentPooling::mean : SegmentPooling::first;
  c.standardize_inputs = json_field(j, "standardize_inputs", c.standardize_inputs, "doc_model");
  c.dropout = json_field(j, "dropout", c.dropout, "doc_model");
  c.layer_norm_epsilon = json_field(j, "layer_norm_epsilon", c.layer_norm_epsilon, "doc_model");
  return c;
}

template <typename T>
DocumentModel<T>::DocumentModel(DocModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  std::size_t embedding_width = 0;
  if (config_.kind == DocModelKind::robert) {
    const std::size_t h = config_.lstm_dim;
    lstm_input_ = &params_.add("lstm.input", nn::glorot_uniform<T>(config_.input_width, 4 * h, rng));
    lstm_recurrent_ = &params_.add("lstm.recurrent", nn::glorot_uniform<T>(h, 4 * h, rng));
    Array<T> bias({4 * h});
    for (std::size_t i = h; i < 2 * h; ++i) bias[i] = T(1);  // forget gate
    lstm_bias_ = &params_.add("lstm.bias", std::move(bias));
    embedding_width = h;
  } else {
    const std::size_t w = config_.tobert_width;
    projection_ = nn::Linear<T>::create(params_, "projection", config_.input_width, w, rng);
    if (config_.use_position_embeddings) {
      segment_positions_ = &params_.add(
          "segment_positions", nn::truncated_normal<T>({config_.max_segments, w}, 0.02, rng));
    }
    for (std::size_t i = 0; i < config_.tobert_layers; ++i) {
      layers_.push_back(nn::TransformerLayer<T>::create(params_, "layer" + std::to_string(i), w,
                                                        config_.tobert_ff, config_.tobert_heads,
                                                        config_.layer_norm_epsilon, rng));
    }
    embedding_width = w;
  }
  hidden_ = nn::Linear<T>::create(params_, "head.hidden", embedding_width, config_.head_hidden, rng,
                                  nn::Init::glorot);
  output_ = nn::Linear<T>::create(params_, "head.output", config_.head_hidden,
                                  config_.num_classes, rng, nn::Init::glorot);
}

template <typename T>
ad::Var DocumentModel<T>::document_embedding(ad::Tape<T>& t, const Array<T>& features,
                                             std::size_t groups,
                                             std::mt19937_64* dropout_rng) const {
  if (features.cols() != config_.input_width) {
    throw std::invalid_argument("feature width " + std::to_string(features.cols()) +
                                " does not match model input width " +
                                std::to_string(config_.input_width));
  }
  if (groups == 0 || features.rows() == 0 || features.rows() % groups != 0) {
    throw std::invalid_argument("document model needs at least one segment per sequence");
  }
  const std::size_t length = features.rows() / groups;
  Array<T> input = features.reshaped({features.rows(), features.cols()});
  if (!input_mean_.empty()) {
    const std::size_t w = input.cols();
    for (std::size_t i = 0; i < input.size(); ++i) {
      input[i] = (input[i] - input_mean_[i % w]) / input_scale_[i % w];
    }
  }
  ad::Var x = t.constant(std::move(input));

  if (config_.kind == DocModelKind::robert) {
    const std::size_t h = config_.lstm_dim;
    ad::Var projected = ad::linear(t, x, t.parameter(*lstm_input_), t.parameter(*lstm_bias_));
    ad::Var recurrent = t.parameter(*lstm_recurrent_);
    ad::Var hidden{}, cell{};
    for (std::size_t step = 0; step < length; ++step) {
      std::vector<std::size_t> rows(groups);
      for (std::size_t g = 0; g < groups; ++g) rows[g] = g * length + step;
      ad::Var gates = ad::gather_rows(t, projected, std::move(rows));
      if (step > 0) gates = ad::add(t, gates, ad::matmul(t, hidden, recurrent));
      ad::Var in = ad::sigmoid(t, ad::slice_cols(t, gates, 0, h));
      ad::Var forget = ad::sigmoid(t, ad::slice_cols(t, gates, h, h));
      ad::Var candidate = ad::tanh(t, ad::slice_cols(t, gates, 2 * h, h));
      ad::Var out = ad::sigmoid(t, ad::slice_cols(t, gates, 3 * h, h));
      ad::Var update = ad::mul(t, in, candidate);
      cell = step == 0 ? update : ad::add(t, ad::mul(t, forget, cell), update);
      hidden = ad::mul(t, out, ad::tanh(t, cell));
    }
    return hidden;
  }

  if (config_.use_position_embeddings && length > config_.max_segments) {
    throw std::invalid_argument("sequence of " + std::to_string(length) +
                                " segments exceeds the positional table of " +
                                std::to_string(config_.max_segments));
  }
  ad::Var y = projection_(t, x);
  if (segment_positions_ != nullptr) {
    std::vector<std::int32_t> positions(length);
    std::iota(positions.begin(), positions.end(), 0);
    y = ad::add_tiled(t, y, ad::embedding(t, t.parameter(*segment_positions_),
                                          std::span<const std::int32_t>(positions)));
  }
  const double rate = dropout_rng ? config_.dropout : 0.0;
  for (const auto& layer : layers_) y = layer(t, y, groups, {}, rate, dropout_rng);
  if (config_.pooling == SegmentPooling::mean) return ad::mean_groups(t, y, groups);
  std::vector<std::size_t> first(groups);
  for (std::size_t g = 0; g < groups; ++g) first[g] = g * length;
  return ad::gather_rows(t, y, std::move(first));
}

template <typename T>
void DocumentModel<T>::set_input_standardization(Array<T> mean, Array<T> scale) {
  if (mean.size() != config_.input_width || scale.size() != config_.input_width) {
    throw std::invalid_argument("standardization statistics must have input_width entries");
  }
  for (T v : scale.values()) {
    if (!(v > T(0))) throw std::invalid_argument("standardization scale must be positive");
  }
  input_mean_ = std::move(mean);
  input_scale_ = std::move(scale);
}

template <typename T>
void DocumentModel<T>::fit_input_standardization(std::span<const SegmentSequence> seqs) {
  const std::size_t w = config_.input_width;
  std::vector<double> sum(w, 0.0), sq(w, 0.0);
  double n = 0;
  for (const auto& s : seqs) {
    if (s.width() != w) {
      throw std::invalid_argument("sequence '" + s.doc_id + "' has feature width " +
                                  std::to_string(s.width()) + ", model expects " +
                                  std::to_string(w));
    }
    for (std::size_t r = 0; r < s.num_segments(); ++r) {
      for (std::size_t k = 0; k < w; ++k) sum[k] += s.features(r, k);
    }
    n += static_cast<double>(s.num_segments());
  }
  if (n == 0) throw std::invalid_argument("cannot fit standardization on no segments");
  for (auto& v : sum) v /= n;
  for (const auto& s : seqs) {
    for (std::size_t r = 0; r < s.num_segments(); ++r) {
      for (std::size_t k = 0; k < w; ++k) sq[k] += std::pow(s.features(r, k) - sum[k], 2);
    }
  }
  Array<T> mean({w}), scale({w});
  for (std::size_t k = 0; k < w; ++k) {
    mean[k] = static_cast<T>(sum[k]);
    const double sd = std::sqrt(sq[k] / n);
    scale[k] = static_cast<T>(sd > 1e-6 ? sd : 1.0);
  }
  set_input_standardization(std::move(mean), std::move(scale));
}

template <typename T>
ad::Var DocumentModel<T>::logits(ad::Tape<T>& t, const Array<T>& features, std::size_t groups,
                                 std::mt19937_64* dropout_rng) const {
  ad::Var e = document_embedding(t, features, groups, dropout_rng);
  return output_(t, ad::relu(t, hidden_(t, e)));
}

template <typename T>
Array<T> DocumentModel<T>::posterior(const SegmentSequence& seq) const {
  if (seq.num_segments() == 0) throw std::invalid_argument("empty segment sequence");
  ad::Tape<T> tape(false);
  ad::Var l = logits(tape, seq.features.template cast<T>(), 1, nullptr);
  Array<T> p = softmax(tape.value(l), -1);
  return p.reshaped({config_.num_classes});
}

template <typename T>
int DocumentModel<T>::predict(const SegmentSequence& seq) const {
  const Array<T> p = posterior(seq);
  return static_cast<int>(std::max_element(p.values().begin(), p.values().end()) -
                          p.values().begin());
}

template <typename T>
Array<T> robert_forward(const SegmentSequence& seq, const DocumentModel<T>& model) {
  if (model.config().kind != DocModelKind::robert) {
    throw std::invalid_argument("robert_forward called with a ToBERT model");
  }
  return model.posterior(seq);
}

template <typename T>
Array<T> tobert_forward(const SegmentSequence& seq, const DocumentModel<T>& model) {
  if (model.config().kind != DocModelKind::tobert) {
    throw std::invalid_argument("tobert_forward called with a RoBERT model");
  }
  return model.posterior(seq);
}

namespace {

template <typename T>
int lowest_argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

}  // namespace

template <typename T>
int aggregate_average(const Array<T>& posteriors) {
  if (posteriors.empty()) throw std::invalid_argument("aggregate_average: no segments");
  const std::size_t c = posteriors.cols();
  std::vector<T> mean(c, T(0));
  for (std::size_t r = 0; r < posteriors.rows(); ++r) {
    for (std::size_t k = 0; k < c; ++k) mean[k] += posteriors(r, k);
  }
  for (auto& m : mean) m /= T(posteriors.rows());
  return lowest_argmax<T>(mean);
}

template <typename T>
int aggregate_most_frequent(const Array<T>& posteriors) {
  if (posteriors.empty()) throw std::invalid_argument("aggregate_most_frequent: no segments");
  std::vector<std::size_t> votes(posteriors.cols(), 0);
  for (std::size_t r = 0; r < posteriors.rows(); ++r) ++votes[lowest_argmax(posteriors.row(r))];
  return lowest_argmax<std::size_t>(votes);
}

namespace {

struct LengthBatch {
  std::vector<std::size_t> members;  // indices into the sequence list
};

// Groups sequences of equal segment count, chunked to batch_size.
std::vector<LengthBatch> length_batches(std::span<const SegmentSequence> seqs,
                                        std::vector<std::size_t> order, std::size_t batch_size) {
  std::map<std::size_t, std::vector<std::size_t>> by_length;
  for (auto i : order) by_length[seqs[i].num_segments()].push_back(i);
  std::vector<LengthBatch> out;
  for (auto& [len, members] : by_length) {
    for (std::size_t b = 0; b < members.size(); b += batch_size) {
      LengthBatch batch;
      batch.members.assign(members.begin() + static_cast<std::ptrdiff_t>(b),
                           members.begin() + static_cast<std::ptrdiff_t>(
                                                 std::min(members.size(), b + batch_size)));
      out.push_back(std::move(batch));
    }
  }
  return out;
}

template <typename T>
Array<T> stack_features(std::span<const SegmentSequence> seqs, const LengthBatch& batch) {
  const auto& first = seqs[batch.members.front()];
  const std::size_t len = first.num_segments(), w = first.width();
  Array<T> out = Array<T>::matrix(batch.members.size() * len, w);
  std::size_t offset = 0;
  for (auto i : batch.members) {
    const auto& f = seqs[i].features;
    for (std::size_t k = 0; k < f.size(); ++k) out[offset + k] = static_cast<T>(f[k]);
    offset += f.size();
  }
  return out;
}

template <typename T>
std::pair<double, double> evaluate_documents(const DocumentModel<T>& model,
                                             std::span<const SegmentSequence> seqs,
                                             std::size_t batch_size) {
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), 0);
  double loss = 0.0;
  std::size_t correct = 0;
  for (const auto& batch : length_batches(seqs, order, batch_size)) {
    ad::Tape<T> tape(false);
    std::vector<int> labels;
    for (auto i : batch.members) labels.push_back(seqs[i].label);
    ad::Var l = model.logits(tape, stack_features<T>(seqs, batch), batch.members.size(), nullptr);
    loss += static_cast<double>(tape.value(ad::cross_entropy(tape, l, labels))[0]) *
            static_cast<double>(labels.size());
    const Array<T>& lv = tape.value(l);
    for (std::size_t r = 0; r < labels.size(); ++r) correct += lowest_argmax(lv.row(r)) == labels[r];
  }
  const double n = static_cast<double>(seqs.size());
  return {loss / n, static_cast<double>(correct) / n};
}

void check_sequences(std::span<const SegmentSequence> seqs, const DocModelConfig& config,
                     const char* split) {
  if (seqs.empty()) {
    throw std::invalid_argument(std::string("train_document_model: empty ") + split + " split");
  }
  for (const auto& s : seqs) {
    if (s.num_segments() == 0) throw std::invalid_argument("sequence '" + s.doc_id + "' is empty");
    if (s.width() != config.input_width) {
      throw std::invalid_argument("sequence '" + s.doc_id + "' has feature width " +
                                  std::to_string(s.width()) + ", model expects " +
                                  std::to_string(config.input_width));
    }
    if (s.label < 0 || static_cast<std::size_t>(s.label) >= config.num_classes) {
      throw std::invalid_argument("sequence '" + s.doc_id + "' label outside model classes");
    }
  }
}

}  // namespace

template <typename T>
TrainResult train_document_model(DocumentModel<T>& model, std::span<const SegmentSequence> train,
                                 std::span<const SegmentSequence> valid,
                                 const TrainOptions& options) {
  check_sequences(train, model.config(), "train");
  check_sequences(valid, model.config(), "valid");
  if (options.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (model.config().standardize_inputs) model.fit_input_standardization(train);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = length_batches(train, order, options.batch_size).size();
  Adam<T> optimizer(options.optimizer, steps_per_epoch * options.epochs);
  PlateauSchedule plateau(options.optimizer.learning_rate);
  std::mt19937_64 order_rng(options.seed);
  std::mt19937_64 dropout_rng(options.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  result.examples_per_epoch = train.size();
  auto [v_loss, v_acc] = evaluate_documents(model, valid, options.batch_size);
  result.history.push_back({0, std::nan(""), v_loss, v_acc, optimizer.current_learning_rate()});
  result.best_valid_accuracy = v_acc;
  auto best_params = model.parameters().snapshot();
  std::size_t since_best = 0, step = 0;

  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    auto batches = length_batches(train, order, options.batch_size);
    std::shuffle(batches.begin(), batches.end(), order_rng);
    double epoch_loss = 0.0;
    for (const auto& batch : batches) {
      std::vector<int> labels;
      for (auto i : batch.members) labels.push_back(train[i].label);
      model.parameters().zero_grad();
      double loss_value = std::nan("");
      try {
        ad::Tape<T> tape;
        ad::Var l = model.logits(tape, stack_features<T>(train, batch), batch.members.size(),
                                 &dropout_rng);
        ad::Var loss = ad::cross_entropy(tape, l, labels);
        loss_value = static_cast<double>(tape.value(loss)[0]);
        if (std::isfinite(loss_value)) tape.backward(loss);
      } catch (const NumericError&) {
        loss_value = std::nan("");
      }
      if (!std::isfinite(loss_value)) {
        model.parameters().restore(best_params);
        throw TrainingDiverged("document model training diverged at epoch " +
                               std::to_string(epoch));
      }
      optimizer.step(model.parameters());
      epoch_loss += loss_value * static_cast<double>(labels.size());
      if (options.on_step) options.on_step(step, loss_value);
      ++step;
    }
    epoch_loss /= static_cast<double>(train.size());
    std::tie(v_loss, v_acc) = evaluate_documents(model, valid, options.batch_size);
    result.history.push_back({epoch, epoch_loss, v_loss, v_acc, optimizer.current_learning_rate()});
    if (options.verbose) {
      std::cerr << doc_model_kind_name(model.config().kind) << " epoch " << epoch
                << " train_loss " << epoch_loss << " valid_loss " << v_loss << " valid_acc "
                << v_acc << " lr " << optimizer.current_learning_rate() << '\n';
    }
    if (options.plateau_schedule) optimizer.set_base_learning_rate(plateau.update(v_loss));
    if (v_acc > result.best_valid_accuracy) {
      result.best_valid_accuracy = v_acc;
      result.best_epoch = epoch;
      best_params = model.parameters().snapshot();
      since_best = 0;
    } else if (options.early_stop_patience > 0 && ++since_best >= options.early_stop_patience) {
      break;
    }
  }
  model.parameters().restore(best_params);
  return result;
}

template <typename T>
std::vector<int> predict_documents(const DocumentModel<T>& model,
                                   std::span<const SegmentSequence> sequences) {
  std::vector<int> out(sequences.size());
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), 0);
  for (const auto& batch : length_batches(sequences, order, 64)) {
    ad::Tape<T> tape(false);
    ad::Var l = model.logits(tape, stack_features<T>(sequences, batch), batch.members.size(),
                             nullptr);
    const Array<T>& lv = tape.value(l);
    for (std::size_t r = 0; r < batch.members.size(); ++r) {
      out[batch.members[r]] = lowest_argmax(lv.row(r));
    }
  }
  return out;
}

TrainOptions default_train_options(DocModelKind kind) {
  TrainOptions o;
  if (kind == DocModelKind::robert) {
    o.optimizer = OptimizerSettings::adam_default();
    o.plateau_schedule = true;
  } else {
    o.optimizer = OptimizerSettings::bert_adam_default();
    o.plateau_schedule = false;
  }
  return o;
}

template class DocumentModel<float>;
template class DocumentModel<double>;
template Array<float> robert_forward(const SegmentSequence&, const DocumentModel<float>&);
template Array<double> robert_forward(const SegmentSequence&, const DocumentModel<double>&);
template Array<float> tobert_forward(const SegmentSequence&, const DocumentModel<float>&);
template Array<double> tobert_forward(const SegmentSequence&, const DocumentModel<double>&);
template int aggregate_average(const Array<float>&);
template int aggregate_average(const Array<double>&);
template int aggregate_most_frequent(const Array<float>&);
template int aggregate_most_frequent(const Array<double>&);
template TrainResult train_document_model(DocumentModel<float>&, std::span<const SegmentSequence>,
                                          std::span<const SegmentSequence>, const TrainOptions&);
template TrainResult train_document_model(DocumentModel<double>&,
                                          std::span<const SegmentSequence>,
                                          std::span<const SegmentSequence>, const TrainOptions&);
template std::vector<int> predict_documents(const DocumentModel<float>&,
                                            std::span<const SegmentSequence>);
template std::vector<int> predict_documents(const DocumentModel<double>&,
                                            std::span<const SegmentSequence>);

}  // namespace hierdoc
