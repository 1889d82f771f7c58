#include "hierdoc/synthetic.hpp"

#include "hierdoc/json_util.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "hierdoc/segmenter.hpp"

namespace hierdoc {

std::string_view task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::distributed_evidence:
      return "distributed_evidence";
    case TaskKind::order_sensitive:
      return "order_sensitive";
    case TaskKind::separable:
      return "separable";
    case TaskKind::null_task:
      return "null";
  }
  return "null";
}

TaskKind parse_task_kind(std::string_view name) {
  for (auto k : {TaskKind::distributed_evidence, TaskKind::order_sensitive, TaskKind::separable,
                 TaskKind::null_task}) {
    if (task_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown synthetic task '" + std::string(name) + "'");
}

void TaskSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("task." + field + ": " + why);
  };
  if (min_length == 0 || max_length < min_length) fail("min_length", "need 0 < min <= max");
  if (filler_vocab == 0) fail("filler_vocab", "must be positive");
  if (segment_size == 0 || stride == 0 || stride > segment_size) {
    fail("stride", "need 0 < stride <= segment_size");
  }
  if (marker_repeat == 0) fail("marker_repeat", "must be positive");
  const bool two_markers =
      kind == TaskKind::distributed_evidence || kind == TaskKind::order_sensitive;
  if (two_markers && min_length < 2 * segment_size) {
    fail("min_length", "must be at least 2 * segment_size so markers land in different segments");
  }
  if (two_markers && min_length / 2 < (segment_size + 1) / 2 + marker_repeat) {
    fail("marker_repeat", "too long for the document length");
  }
  if (kind == TaskKind::order_sensitive && (num_train % 2 || num_valid % 2 || num_test % 2)) {
    fail("num_train", "order_sensitive splits must have even sizes (paired documents)");
  }
  if ((kind == TaskKind::separable || kind == TaskKind::null_task) && num_classes < 2) {
    fail("num_classes", "must be at least 2");
  }
  if (num_train == 0) fail("num_train", "must be positive");
}

nlohmann::json to_json(const TaskSpec& s) {
  return {{"kind", task_kind_name(s.kind)}, {"num_train", s.num_train},
          {"num_valid", s.num_valid},       {"num_test", s.num_test},
          {"min_length", s.min_length},     {"max_length", s.max_length},
          {"filler_vocab", s.filler_vocab}, {"num_classes", s.num_classes},
          {"segment_size", s.segment_size}, {"stride", s.stride},
          {"marker_repeat", s.marker_repeat}, {"seed", s.seed}};
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, "task", {"kind", "num_train", "num_valid", "num_test", "min_length", "max_length", "filler_vocab", "num_classes", "segment_size", "stride", "marker_repeat", "seed"});
  TaskSpec s;
  try {
    s.kind = parse_task_kind(json_field(j, "kind", std::string(task_kind_name(s.kind)), "task"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("task.kind: ") + e.what());
  }
  s.num_train = json_field(j, "num_train", s.num_train, "task");
  s.num_valid = json_field(j, "num_valid", s.num_valid, "task");
  s.num_test = json_field(j, "num_test", s.num_test, "task");
  s.min_length = json_field(j, "min_length", s.min_length, "task");
  s.max_length = json_field(j, "max_length", s.max_length, "task");
  s.filler_vocab = json_field(j, "filler_vocab", s.filler_vocab, "task");
  s.num_classes = json_field(j, "num_classes", s.num_classes, "task");
  s.segment_size = json_field(j, "segment_size", s.segment_size, "task");
  s.stride = json_field(j, "stride", s.stride, "task");
  s.marker_repeat = json_field(j, "marker_repeat", s.marker_repeat, "task");
  s.seed = json_field(j, "seed", s.seed, "task");
  return s;
}

std::string filler_token(std::size_t i) { return "w" + std::to_string(i); }

namespace {

struct SplitPlan {
  Split split;
  std::size_t count;
};

std::vector<SplitPlan> split_plan(const TaskSpec& spec) {
  return {{Split::train, spec.num_train}, {Split::valid, spec.num_valid},
          {Split::test, spec.num_test}};
}

std::vector<std::string> filler(std::size_t length, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, vocab - 1);
  std::vector<std::string> out(length);
  for (auto& tok : out) tok = filler_token(pick(rng));
  return out;
}

std::size_t draw_length(const TaskSpec& spec, std::mt19937_64& rng) {
  return std::uniform_int_distribution<std::size_t>(spec.min_length, spec.max_length)(rng);
}

// Windows that overlap [pos, pos + repeat).
std::size_t windows_touching(const SegmentPlan& plan, std::size_t pos, std::size_t repeat) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < plan.count(); ++i) {
    const std::size_t a = plan.starts[i], b = a + plan.window_length(i);
    n += a < pos + repeat && pos < b;
  }
  return n;
}

// First burst entirely before the middle gap, second after it; the gap is
// wider than segment_size. With interior_only, both bursts sit where the
// maximum number of windows overlaps them, so their within-window offsets
// follow the same distribution in both halves.
MarkerPlacement place_markers(std::size_t length, const TaskSpec& spec, std::mt19937_64& rng,
                              bool interior_only) {
  const std::size_t mid = length / 2;
  const std::size_t r = spec.marker_repeat;
  const std::size_t first_max = mid - (spec.segment_size + 1) / 2 - r;
  const std::size_t second_min = mid + spec.segment_size / 2;
  const std::size_t second_max = length - r;
  MarkerPlacement p{length, 0, 0, r};
  if (!interior_only) {
    p.first = std::uniform_int_distribution<std::size_t>(0, first_max)(rng);
    p.second = std::uniform_int_distribution<std::size_t>(second_min, second_max)(rng);
    return p;
  }
  const SegmentPlan plan = plan_segments(length, spec.segment_size, spec.stride);
  std::size_t best = 0;
  for (std::size_t pos = 0; pos + r <= length; ++pos) best = std::max(best, windows_touching(plan, pos, r));
  auto interior = [&](std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> out;
    for (std::size_t pos = lo; pos <= hi; ++pos) {
      if (windows_touching(plan, pos, r) == best) out.push_back(pos);
    }
    if (out.empty()) {
      throw std::invalid_argument("task.min_length: no fully covered marker positions; use longer documents");
    }
    return out;
  };
  const auto a = interior(0, first_max), b = interior(second_min, second_max);
  p.first = a[std::uniform_int_distribution<std::size_t>(0, a.size() - 1)(rng)];
  p.second = b[std::uniform_int_distribution<std::size_t>(0, b.size() - 1)(rng)];
  return p;
}

void plant(std::vector<std::string>& tokens, std::size_t pos, std::size_t repeat,
           const char* marker) {
  for (std::size_t i = 0; i < repeat; ++i) tokens[pos + i] = marker;
}

}  // namespace

SyntheticDataset gen_distributed_evidence(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticDataset ds;
  ds.labels.names = {"same", "different"};
  std::bernoulli_distribution coin(0.5);
  std::size_t n = 0;
  for (const auto& part : split_plan(spec)) {
    for (std::size_t i = 0; i < part.count; ++i, ++n) {
      const std::size_t length = draw_length(spec, rng);
      auto tokens = filler(length, spec.filler_vocab, rng);
      const MarkerPlacement p = place_markers(length, spec, rng, false);
      const bool first_b = coin(rng), second_b = coin(rng);
      plant(tokens, p.first, p.repeat, first_b ? marker_b : marker_a);
      plant(tokens, p.second, p.repeat, second_b ? marker_b : marker_a);
      ds.documents.push_back(
          {"doc" + std::to_string(n), std::move(tokens), first_b != second_b ? 1 : 0, part.split});
    }
  }
  return ds;
}

SyntheticDataset gen_order_sensitive(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticDataset ds;
  ds.labels.names = {"a_first", "b_first"};
  std::size_t pair = 0;
  for (const auto& part : split_plan(spec)) {
    for (std::size_t i = 0; i < part.count; i += 2, ++pair) {
      const std::size_t length = draw_length(spec, rng);
      auto tokens = filler(length, spec.filler_vocab, rng);
      const MarkerPlacement p = place_markers(length, spec, rng, true);
      auto swapped = tokens;
      plant(tokens, p.first, p.repeat, marker_a);
      plant(tokens, p.second, p.repeat, marker_b);
      plant(swapped, p.first, p.repeat, marker_b);
      plant(swapped, p.second, p.repeat, marker_a);
      const std::string id = "pair" + std::to_string(pair);
      ds.documents.push_back({id + "_a", std::move(tokens), 0, part.split});
      ds.documents.push_back({id + "_b", std::move(swapped), 1, part.split});
    }
  }
  return ds;
}

SyntheticDataset gen_separable(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticDataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.labels.names.push_back("class" + std::to_string(c));
  std::uniform_int_distribution<int> label(0, static_cast<int>(spec.num_classes) - 1);
  const std::size_t period = std::min(spec.stride, spec.segment_size);
  std::size_t n = 0;
  for (const auto& part : split_plan(spec)) {
    for (std::size_t i = 0; i < part.count; ++i, ++n) {
      const std::size_t length = draw_length(spec, rng);
      auto tokens = filler(length, spec.filler_vocab, rng);
      const int y = label(rng);
      const std::string cue = "cue" + std::to_string(y);
      for (std::size_t pos = 0; pos < length; pos += period) tokens[pos] = cue;
      ds.documents.push_back({"doc" + std::to_string(n), std::move(tokens), y, part.split});
    }
  }
  return ds;
}

SyntheticDataset gen_null(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticDataset ds;
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.labels.names.push_back("class" + std::to_string(c));
  std::uniform_int_distribution<int> label(0, static_cast<int>(spec.num_classes) - 1);
  std::size_t n = 0;
  for (const auto& part : split_plan(spec)) {
    for (std::size_t i = 0; i < part.count; ++i, ++n) {
      const std::size_t length = draw_length(spec, rng);
      auto tokens = filler(length, spec.filler_vocab, rng);
      ds.documents.push_back({"doc" + std::to_string(n), std::move(tokens), label(rng), part.split});
    }
  }
  return ds;
}

SyntheticDataset generate_task(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::distributed_evidence:
      return gen_distributed_evidence(spec);
    case TaskKind::order_sensitive:
      return gen_order_sensitive(spec);
    case TaskKind::separable:
      return gen_separable(spec);
    case TaskKind::null_task:
      return gen_null(spec);
  }
  throw std::invalid_argument("unknown task kind");
}

MarkerPlacement find_markers(const TextDocument& doc) {
  std::vector<std::size_t> starts;
  std::size_t repeat = 0;
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
    const bool is_marker = doc.tokens[i] == marker_a || doc.tokens[i] == marker_b;
    if (!is_marker) continue;
    if (i == 0 || doc.tokens[i - 1] != doc.tokens[i]) {
      starts.push_back(i);
    }
    if (starts.size() == 1) repeat = i - starts[0] + 1;
  }
  if (starts.size() != 2) {
    throw std::invalid_argument("document '" + doc.id + "' does not hold exactly two markers");
  }
  return {doc.tokens.size(), starts[0], starts[1], repeat};
}

}  // namespace hierdoc
