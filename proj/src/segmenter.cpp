#include "hierdoc/segmenter.hpp"

#include <iostream>
#include <stdexcept>

namespace hierdoc {

std::size_t segment_count(std::size_t doc_length, std::size_t segment_size, std::size_t stride) {
  if (doc_length <= segment_size) return 1;
  return 1 + (doc_length - segment_size + stride - 1) / stride;
}

std::size_t SegmentPlan::window_length(std::size_t i) const {
  const std::size_t start = starts.at(i);
  return std::min(segment_size, doc_length - start);
}

SegmentPlan plan_segments(std::size_t doc_length, std::size_t segment_size, std::size_t stride) {
  if (doc_length == 0 || segment_size == 0 || stride == 0) {
    throw std::invalid_argument("plan_segments arguments must be positive");
  }
  if (stride > segment_size) {
    throw std::invalid_argument("stride " + std::to_string(stride) + " exceeds segment size " +
                                std::to_string(segment_size));
  }
  SegmentPlan plan{doc_length, segment_size, stride, {}};
  const std::size_t n = segment_count(doc_length, segment_size, stride);
  plan.starts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) plan.starts.push_back(i * stride);
  return plan;
}

SegmentPlan truncate_plan(SegmentPlan plan, std::size_t max_segments, const std::string& doc_id) {
  if (max_segments == 0) throw std::invalid_argument("max_segments must be positive");
  if (plan.count() > max_segments) {
    std::cerr << "warning: document " << (doc_id.empty() ? "<unnamed>" : doc_id) << " has "
              << plan.count() << " segments; keeping the first " << max_segments << '\n';
    plan.starts.resize(max_segments);
  }
  return plan;
}

SegmentBatch materialize_segments(const Document& doc, const SegmentPlan& plan) {
  if (plan.doc_length != doc.token_ids.size()) {
    throw std::invalid_argument("segment plan for length " + std::to_string(plan.doc_length) +
                                " applied to document '" + doc.id + "' of length " +
                                std::to_string(doc.token_ids.size()));
  }
  SegmentBatch batch;
  batch.doc_id = doc.id;
  batch.width = plan.segment_size + 2;
  const std::size_t rows = plan.count();
  batch.tokens.assign(rows * batch.width, Vocabulary::pad_id);
  batch.mask.assign(rows * batch.width, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t start = plan.starts[r];
    const std::size_t len = plan.window_length(r);
    std::int32_t* row = batch.tokens.data() + r * batch.width;
    std::uint8_t* m = batch.mask.data() + r * batch.width;
    row[0] = Vocabulary::cls_id;
    for (std::size_t j = 0; j < len; ++j) row[1 + j] = doc.token_ids[start + j];
    row[1 + len] = Vocabulary::sep_id;
    std::fill(m, m + len + 2, std::uint8_t{1});
    batch.segment_index.push_back(r);
  }
  return batch;
}

SegmentBatch concat_batches(const std::vector<const SegmentBatch*>& parts) {
  SegmentBatch out;
  if (parts.empty()) return out;
  out.width = parts.front()->width;
  for (const SegmentBatch* p : parts) {
    if (p->width != out.width) throw std::invalid_argument("cannot concatenate batches of unequal width");
    out.tokens.insert(out.tokens.end(), p->tokens.begin(), p->tokens.end());
    out.mask.insert(out.mask.end(), p->mask.begin(), p->mask.end());
    out.segment_index.insert(out.segment_index.end(), p->segment_index.begin(),
                             p->segment_index.end());
  }
  out.doc_id = parts.size() == 1 ? parts.front()->doc_id : std::string{};
  return out;
}

}  // namespace hierdoc
