#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hierdoc {

enum class Split { train, valid, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Lowercases ASCII letters and splits on whitespace. Bytes >= 0x80 are kept
// as-is, so UTF-8 sequences survive unchanged inside tokens.
std::vector<std::string> tokenize(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::int32_t pad_id = 0;
  static constexpr std::int32_t unk_id = 1;
  static constexpr std::int32_t cls_id = 2;
  static constexpr std::int32_t sep_id = 3;
  static constexpr std::size_t num_specials = 4;

  Vocabulary();
  // Rebuilds from an id-ordered token list whose first entries are the specials.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::int32_t id(std::string_view token) const;  // unk_id when absent
  const std::string& token(std::int32_t id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int32_t, std::less<>> index_;
};

// Keeps the most frequent tokens up to max_size entries including the four
// specials; ties go to the lexicographically smaller token.
Vocabulary build_vocab(std::span<const std::vector<std::string>> token_lists,
                       std::size_t max_size);

// Ordered class names; the position is the class id.
struct LabelMap {
  std::vector<std::string> names;
  std::size_t size() const { return names.size(); }
  int id(std::string_view name) const;
};

struct TextDocument {
  std::string id;
  std::vector<std::string> tokens;
  int label = 0;
  Split split = Split::train;
};

struct Document {
  std::string id;
  std::vector<std::int32_t> token_ids;
  int label = 0;
  Split split = Split::train;
};

struct CdfPoint {
  std::size_t length = 0;
  double fraction = 0.0;
  friend bool operator==(const CdfPoint&, const CdfPoint&) = default;
};

struct CorpusStats {
  std::size_t num_classes = 0;    // C
  std::size_t num_documents = 0;  // N
  double average_words = 0.0;     // AW
  std::size_t longest = 0;        // L
  std::vector<CdfPoint> length_cdf;

  // Fraction of documents whose length is <= length.
  double fraction_at_or_below(std::size_t length) const;
};

CorpusStats compute_stats(std::span<const std::size_t> lengths, std::size_t num_classes);

struct Corpus {
  std::vector<TextDocument> documents;  // file order
  LabelMap labels;
  CorpusStats stats;

  std::vector<std::vector<std::string>> token_lists(Split split) const;
};

// Reads one JSON object per line with fields id, text, label, split.
// Integer labels map to themselves when they already form 0..C-1; otherwise
// distinct label values are sorted and numbered.
Corpus load_dataset(const std::filesystem::path& path);
Corpus parse_dataset(std::string_view jsonl, std::string_view source_name = "<memory>");

void write_dataset(const std::filesystem::path& path, std::span<const TextDocument> docs,
                   const LabelMap& labels);

std::vector<Document> encode_documents(std::span<const TextDocument> docs,
                                       const Vocabulary& vocab);

// Writes stats.csv (C,N,AW,L) and length_cdf.csv (length,fraction) into dir.
void export_stats(const CorpusStats& stats, const std::filesystem::path& dir);
std::vector<CdfPoint> read_length_cdf(const std::filesystem::path& csv);

}  // namespace hierdoc
