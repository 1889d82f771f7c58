#include "hierdoc/experiment.hpp"

#include <fstream>

namespace hierdoc {

using json = nlohmann::json;

json to_json(const TrainOptions& o) {
  return {{"epochs", o.epochs},
          {"batch_size", o.batch_size},
          {"optimizer", to_json(o.optimizer)},
          {"plateau_schedule", o.plateau_schedule},
          {"early_stop_patience", o.early_stop_patience},
          {"seed", o.seed},
          {"verbose", o.verbose}};
}

TrainOptions train_options_from_json(const json& j, std::string_view prefix, TrainOptions o) {
  reject_unknown_keys(j, prefix,
                      {"epochs", "batch_size", "optimizer", "plateau_schedule",
                       "early_stop_patience", "seed", "verbose"});
  o.epochs = json_field(j, "epochs", o.epochs, prefix);
  o.batch_size = json_field(j, "batch_size", o.batch_size, prefix);
  if (j.contains("optimizer")) {
    o.optimizer = optimizer_settings_from_json(j.at("optimizer"),
                                               std::string(prefix) + ".optimizer");
  }
  o.plateau_schedule = json_field(j, "plateau_schedule", o.plateau_schedule, prefix);
  o.early_stop_patience = json_field(j, "early_stop_patience", o.early_stop_patience, prefix);
  o.seed = json_field(j, "seed", o.seed, prefix);
  o.verbose = json_field(j, "verbose", o.verbose, prefix);
  if (o.batch_size == 0) throw ConfigError(std::string(prefix) + ".batch_size: must be positive");
  return o;
}

ExperimentConfig::ExperimentConfig() {
  encoder_training.epochs = 10;
  encoder_training.batch_size = 32;
  encoder_training.optimizer = OptimizerSettings::bert_adam_default();
  encoder_training.optimizer.learning_rate = 1e-4;
  encoder_training.early_stop_patience = 3;
  doc_model.input_width = 0;
  doc_model.num_classes = 0;
  doc_training = default_train_options(doc_model.kind);
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(field + ": " + why);
  };
  if (segmentation.segment_size == 0) fail("segmentation.segment_size", "must be positive");
  if (segmentation.stride == 0 || segmentation.stride > segmentation.segment_size) {
    fail("segmentation.stride", "must lie in [1, segment_size]");
  }
  if (vocab_size <= Vocabulary::num_specials) fail("vocab_size", "must exceed the 4 specials");
  EncoderConfig enc = encoder;
  enc.vocab_size = std::max<std::size_t>(enc.vocab_size, Vocabulary::num_specials + 1);
  enc.num_classes = std::max<std::size_t>(enc.num_classes, 2);
  enc.validate();
  if (encoder.max_positions < segmentation.segment_size + 2) {
    fail("encoder.max_positions", "must be at least segmentation.segment_size + 2 (" +
                                      std::to_string(segmentation.segment_size + 2) + ")");
  }
  DocModelConfig doc = doc_model;
  doc.input_width = std::max<std::size_t>(doc.input_width, 1);
  doc.num_classes = std::max<std::size_t>(doc.num_classes, 2);
  doc.validate();
  if (doc_model.input_width != 0) {
    if (representation == FeatureKind::pooled && doc_model.input_width != encoder.d_model) {
      fail("doc_model.input_width", "must equal encoder.d_model for H features");
    }
    if (representation == FeatureKind::posterior && doc_model.num_classes != 0 &&
        doc_model.input_width != doc_model.num_classes) {
      fail("doc_model.input_width", "must equal the class count for P features");
    }
  }
  if (doc_model.kind == DocModelKind::tobert && doc_model.use_position_embeddings) {
    if (segmentation.max_segments == 0) {
      fail("segmentation.max_segments",
           "must be set when doc_model.use_position_embeddings is on");
    }
    if (segmentation.max_segments > doc_model.max_segments) {
      fail("segmentation.max_segments", "exceeds doc_model.max_segments");
    }
  }
  if (encoder_training.batch_size == 0) fail("encoder_training.batch_size", "must be positive");
  if (doc_training.batch_size == 0) fail("doc_training.batch_size", "must be positive");
  if (seeds.empty()) fail("seeds", "must list at least one seed");
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (seeds[i] == seeds[k]) fail("seeds", "must be distinct");
    }
  }
  for (std::size_t i = 1; i < bucket_edges.size(); ++i) {
    if (bucket_edges[i] <= bucket_edges[i - 1]) fail("bucket_edges", "must be strictly increasing");
  }
}

ExperimentConfig experiment_config_from_json(const json& j) {
  reject_unknown_keys(j, "config",
                      {"dataset", "output_dir", "segmentation", "vocab_size", "encoder",
                       "encoder_training", "doc_model", "doc_training", "representation", "seeds",
                       "encoder_seed", "strict_features", "bucket_edges"});
  ExperimentConfig c;
  c.dataset = json_field(j, "dataset", std::string(), "config");
  c.output_dir = json_field(j, "output_dir", c.output_dir.string(), "config");
  if (j.contains("segmentation")) {
    const json& s = j.at("segmentation");
    reject_unknown_keys(s, "segmentation", {"segment_size", "stride", "max_segments"});
    c.segmentation.segment_size =
        json_field(s, "segment_size", c.segmentation.segment_size, "segmentation");
    c.segmentation.stride = json_field(s, "stride", c.segmentation.stride, "segmentation");
    c.segmentation.max_segments =
        json_field(s, "max_segments", c.segmentation.max_segments, "segmentation");
  }
  c.vocab_size = json_field(j, "vocab_size", c.vocab_size, "config");
  if (j.contains("encoder")) {
    json e = j.at("encoder");
    require_object(e, "encoder");
    c.encoder = encoder_config_from_json(e);
  }
  if (j.contains("encoder_training")) {
    c.encoder_training =
        train_options_from_json(j.at("encoder_training"), "encoder_training", c.encoder_training);
  }
  if (j.contains("doc_model")) {
    json d = j.at("doc_model");
    require_object(d, "doc_model");
    if (!d.contains("input_width")) d["input_width"] = 0;
    if (!d.contains("num_classes")) d["num_classes"] = 0;
    // num_classes 0 means "from data"; skip the range check done by validate.
    c.doc_model = doc_model_config_from_json(d);
  }
  c.doc_training = default_train_options(c.doc_model.kind);
  if (j.contains("doc_training")) {
    c.doc_training = train_options_from_json(j.at("doc_training"), "doc_training", c.doc_training);
  }
  const std::string repr = json_field(j, "representation", std::string("H"), "config");
  try {
    c.representation = parse_feature_kind(repr);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("representation: ") + e.what());
  }
  c.seeds = json_field(j, "seeds", c.seeds, "config");
  c.encoder_seed = json_field(j, "encoder_seed", c.encoder_seed, "config");
  c.strict_features = json_field(j, "strict_features", c.strict_features, "config");
  c.bucket_edges = json_field(j, "bucket_edges", c.bucket_edges, "config");
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"dataset", c.dataset.string()},
          {"output_dir", c.output_dir.string()},
          {"segmentation",
           {{"segment_size", c.segmentation.segment_size},
            {"stride", c.segmentation.stride},
            {"max_segments", c.segmentation.max_segments}}},
          {"vocab_size", c.vocab_size},
          {"encoder", to_json(c.encoder)},
          {"encoder_training", to_json(c.encoder_training)},
          {"doc_model", to_json(c.doc_model)},
          {"doc_training", to_json(c.doc_training)},
          {"representation", feature_kind_name(c.representation)},
          {"seeds", c.seeds},
          {"encoder_seed", c.encoder_seed},
          {"strict_features", c.strict_features},
          {"bucket_edges", c.bucket_edges}};
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::filesystem::filesystem_error(
        "cannot open config", path, std::make_error_code(std::errc::no_such_file_or_directory));
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

std::span<const Document> PreparedData::split(Split s) const {
  switch (s) {
    case Split::train:
      return train;
    case Split::valid:
      return valid;
    case Split::test:
      return test;
  }
  return train;
}

PreparedData prepare_data(const Corpus& corpus, const Vocabulary& vocab) {
  PreparedData d;
  d.labels = corpus.labels;
  d.vocab = vocab;
  for (auto& doc : encode_documents(corpus.documents, d.vocab)) {
    switch (doc.split) {
      case Split::train:
        d.train.push_back(std::move(doc));
        break;
      case Split::valid:
        d.valid.push_back(std::move(doc));
        break;
      case Split::test:
        d.test.push_back(std::move(doc));
        break;
    }
  }
  return d;
}

PreparedData prepare_data(const Corpus& corpus, std::size_t vocab_size) {
  const auto lists = corpus.token_lists(Split::train);
  if (lists.empty()) throw DatasetError("dataset has no train split");
  return prepare_data(corpus, build_vocab(lists, vocab_size));
}

EncoderConfig resolved_encoder_config(const ExperimentConfig& c, const PreparedData& data) {
  EncoderConfig e = c.encoder;
  e.vocab_size = data.vocab.size();
  e.num_classes = data.labels.size();
  e.validate();
  return e;
}

DocModelConfig resolved_doc_config(const ExperimentConfig& c, std::size_t num_classes) {
  DocModelConfig d = c.doc_model;
  d.num_classes = num_classes;
  if (d.input_width == 0) {
    d.input_width = c.representation == FeatureKind::pooled ? c.encoder.d_model : num_classes;
  }
  d.validate();
  return d;
}

std::vector<SegmentSequence> extract_sequences(const SegmentEncoder<float>& encoder,
                                               std::span<const Document> docs,
                                               const SegmentationOptions& seg, FeatureKind kind) {
  const auto batches = segment_documents(docs, seg);
  auto pooled = extract_pooled(encoder, std::span<const SegmentBatch>(batches));
  std::vector<SegmentSequence> out;
  out.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    SegmentSequence s;
    s.doc_id = docs[i].id;
    s.label = docs[i].label;
    s.doc_length = docs[i].token_ids.size();
    s.features = kind == FeatureKind::pooled ? std::move(pooled[i])
                                             : encoder.classify_segments(pooled[i]);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<int> labels_of(std::span<const SegmentSequence> seqs) {
  std::vector<int> out;
  for (const auto& s : seqs) out.push_back(s.label);
  return out;
}

std::vector<std::size_t> lengths_of(std::span<const SegmentSequence> seqs) {
  std::vector<std::size_t> out;
  for (const auto& s : seqs) out.push_back(s.doc_length);
  return out;
}

SeedResult train_and_test(const DocModelConfig& config, TrainOptions options,
                          std::span<const SegmentSequence> train,
                          std::span<const SegmentSequence> valid,
                          std::span<const SegmentSequence> test, std::uint64_t seed,
                          DocumentModel<float>* trained) {
  options.seed = seed;
  DocumentModel<float> model(config, seed);
  const TrainResult r = train_document_model(model, train, valid, options);
  SeedResult out;
  out.seed = seed;
  out.best_valid_accuracy = r.best_valid_accuracy;
  out.curve = r.history;
  if (!test.empty()) {
    out.test_accuracy = evaluate_accuracy(predict_documents(model, test), labels_of(test));
  } else {
    out.test_accuracy = std::nan("");
  }
  if (trained) *trained = std::move(model);
  return out;
}

std::string_view voting_rule_name(VotingRule r) {
  return r == VotingRule::average ? "average" : "most_frequent";
}

VotingRule parse_voting_rule(std::string_view name) {
  if (name == "average") return VotingRule::average;
  if (name == "most_frequent") return VotingRule::most_frequent;
  throw std::invalid_argument("voting rule must be average or most_frequent, got '" +
                              std::string(name) + "'");
}

std::vector<int> vote(std::span<const SegmentSequence> posteriors, VotingRule rule) {
  std::vector<int> out;
  out.reserve(posteriors.size());
  for (const auto& s : posteriors) {
    out.push_back(rule == VotingRule::average ? aggregate_average(s.features)
                                              : aggregate_most_frequent(s.features));
  }
  return out;
}

}  // namespace hierdoc
