#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hierdoc/document_models.hpp"
#include "hierdoc/encoder.hpp"
#include "hierdoc/json_util.hpp"
#include "hierdoc/text.hpp"

namespace hierdoc {

nlohmann::json to_json(const TrainOptions& o);
TrainOptions train_options_from_json(const nlohmann::json& j, std::string_view prefix,
                                     TrainOptions defaults);

struct ExperimentConfig {
  std::filesystem::path dataset;
  std::filesystem::path output_dir = "out";
  SegmentationOptions segmentation;
  std::size_t vocab_size = 30000;  // cap including specials
  EncoderConfig encoder;           // vocab_size/num_classes filled from data
  TrainOptions encoder_training;
  DocModelConfig doc_model;        // input_width/num_classes filled when 0
  TrainOptions doc_training;
  FeatureKind representation = FeatureKind::pooled;
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::uint64_t encoder_seed = 0;
  bool strict_features = true;
  std::vector<std::size_t> bucket_edges;

  ExperimentConfig();
  // Cross-field checks; throws ConfigError naming the field.
  void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct PreparedData {
  LabelMap labels;
  Vocabulary vocab;
  std::vector<Document> train, valid, test;

  std::span<const Document> split(Split s) const;
};

// Vocabulary from the train split only.
PreparedData prepare_data(const Corpus& corpus, std::size_t vocab_size);
PreparedData prepare_data(const Corpus& corpus, const Vocabulary& vocab);

// Encoder config with data-dependent fields resolved.
EncoderConfig resolved_encoder_config(const ExperimentConfig& c, const PreparedData& data);
DocModelConfig resolved_doc_config(const ExperimentConfig& c, std::size_t num_classes);

std::vector<SegmentSequence> extract_sequences(const SegmentEncoder<float>& encoder,
                                               std::span<const Document> docs,
                                               const SegmentationOptions& seg, FeatureKind kind);

// Trains one document model and scores it on `test`.
SeedResult train_and_test(const DocModelConfig& config, TrainOptions options,
                          std::span<const SegmentSequence> train,
                          std::span<const SegmentSequence> valid,
                          std::span<const SegmentSequence> test, std::uint64_t seed,
                          DocumentModel<float>* trained = nullptr);

enum class VotingRule { average, most_frequent };
std::string_view voting_rule_name(VotingRule r);
VotingRule parse_voting_rule(std::string_view name);

// Segment posteriors (P features) to document decisions.
std::vector<int> vote(std::span<const SegmentSequence> posteriors, VotingRule rule);

std::vector<int> labels_of(std::span<const SegmentSequence> seqs);
std::vector<std::size_t> lengths_of(std::span<const SegmentSequence> seqs);

}  // namespace hierdoc
