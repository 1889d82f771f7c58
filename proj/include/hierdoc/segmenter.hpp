#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hierdoc/text.hpp"

namespace hierdoc {

// Window placement for one document: windows of `segment_size` content tokens
// starting at 0, stride, 2*stride, ... until a window reaches the last token.
struct SegmentPlan {
  std::size_t doc_length = 0;
  std::size_t segment_size = 200;
  std::size_t stride = 50;
  std::vector<std::size_t> starts;

  std::size_t count() const { return starts.size(); }
  // Number of content tokens in window i (the last one may be short).
  std::size_t window_length(std::size_t i) const;
};

// 1 + ceil(max(0, L - s) / t)
std::size_t segment_count(std::size_t doc_length, std::size_t segment_size, std::size_t stride);

SegmentPlan plan_segments(std::size_t doc_length, std::size_t segment_size = 200,
                          std::size_t stride = 50);

// Keeps the first max_segments windows; logs a warning when it drops any.
SegmentPlan truncate_plan(SegmentPlan plan, std::size_t max_segments,
                          const std::string& doc_id = {});

// Row layout: [CLS] content... [SEP] [PAD]...; width = segment_size + 2.
struct SegmentBatch {
  std::string doc_id;
  std::size_t width = 0;
  std::vector<std::int32_t> tokens;  // rows x width
  std::vector<std::uint8_t> mask;    // 1 on CLS, content and SEP
  std::vector<std::size_t> segment_index;

  std::size_t rows() const { return segment_index.size(); }
};

SegmentBatch materialize_segments(const Document& doc, const SegmentPlan& plan);

// Concatenates batches (all of equal width) into one.
SegmentBatch concat_batches(const std::vector<const SegmentBatch*>& parts);

}  // namespace hierdoc
