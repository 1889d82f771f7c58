#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hierdoc/text.hpp"

namespace hierdoc {

enum class TaskKind { distributed_evidence, order_sensitive, separable, null_task };

std::string_view task_kind_name(TaskKind k);
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::distributed_evidence;
  std::size_t num_train = 2000;
  std::size_t num_valid = 500;
  std::size_t num_test = 500;
  std::size_t min_length = 1000;
  std::size_t max_length = 1000;
  std::size_t filler_vocab = 1000;
  std::size_t num_classes = 2;  // separable and null tasks only
  std::size_t segment_size = 200;
  std::size_t stride = 50;
  std::size_t marker_repeat = 1;  // consecutive copies of each planted marker
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TaskSpec& s);
TaskSpec task_spec_from_json(const nlohmann::json& j);

struct SyntheticDataset {
  std::vector<TextDocument> documents;
  LabelMap labels;
};

inline constexpr const char* marker_a = "marker_a";
inline constexpr const char* marker_b = "marker_b";
std::string filler_token(std::size_t i);

// Where the two marker bursts of a two-marker document start.
struct MarkerPlacement {
  std::size_t doc_length = 0;
  std::size_t first = 0;
  std::size_t second = 0;
  std::size_t repeat = 1;
};

// Label = XOR of two binary markers placed more than segment_size tokens
// apart, so no window sees both.
SyntheticDataset gen_distributed_evidence(const TaskSpec& spec);
// Label = whether marker_a precedes marker_b. Documents come in adjacent
// pairs sharing filler and positions with the markers swapped. Bursts are
// placed only where window coverage is maximal.
SyntheticDataset gen_order_sensitive(const TaskSpec& spec);
// A class token recurs every `stride` tokens, so every window is labeled.
SyntheticDataset gen_separable(const TaskSpec& spec);
// Filler only, labels uniform at random.
SyntheticDataset gen_null(const TaskSpec& spec);

SyntheticDataset generate_task(const TaskSpec& spec);

// Marker positions of a two-marker document (throws if absent).
MarkerPlacement find_markers(const TextDocument& doc);

}  // namespace hierdoc
