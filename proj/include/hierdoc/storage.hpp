#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hierdoc/document_models.hpp"
#include "hierdoc/encoder.hpp"
#include "hierdoc/text.hpp"

namespace hierdoc {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Git blob id: sha1("blob <size>\0" + content), lowercase hex.
std::string git_blob_hash(std::string_view content);
std::string git_blob_hash_file(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);

// Container layout shared by checkpoints and feature stores:
// u64 LE header length, JSON header, then little-endian float32 data.
struct Container {
  nlohmann::json header;
  std::vector<float> data;
};

void write_container(const std::filesystem::path& path, const nlohmann::json& header,
                     std::span<const std::span<const float>> blocks);
Container read_container(const std::filesystem::path& path);

inline constexpr int checkpoint_format_version = 1;

struct Checkpoint {
  std::string model_kind;  // "encoder" | "robert" | "tobert"
  nlohmann::json config;
  LabelMap labels;
  std::optional<Vocabulary> vocab;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Array<float>>> tensors;  // manifest order
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const SegmentEncoder<float>& encoder, const LabelMap& labels,
                           const Vocabulary& vocab, nlohmann::json metadata = {});
Checkpoint make_checkpoint(const DocumentModel<float>& model, const LabelMap& labels,
                           nlohmann::json metadata = {});

// Copies tensors into params; names and shapes must match exactly.
void load_parameters(ad::ParameterSet<float>& params, const Checkpoint& ckpt);

SegmentEncoder<float> encoder_from_checkpoint(const Checkpoint& ckpt);
DocumentModel<float> doc_model_from_checkpoint(const Checkpoint& ckpt);

struct FeatureStore {
  FeatureKind kind = FeatureKind::pooled;
  std::size_t width = 0;
  std::string source_checkpoint;  // git blob hash of the encoder checkpoint
  LabelMap labels;
  std::vector<SegmentSequence> sequences;
};

void write_feature_store(const std::filesystem::path& path, const FeatureStore& store);
// With expected_checkpoint set, a different recorded source hash throws.
FeatureStore read_feature_store(const std::filesystem::path& path,
                                const std::optional<std::string>& expected_checkpoint = {});

// Throws std::invalid_argument when the store cannot feed the model.
void check_feature_width(const FeatureStore& store, const DocModelConfig& config);

// Caps OpenMP and Eigen threads from HIERDOC_THREADS (default: all cores).
int configure_threads();

}  // namespace hierdoc
