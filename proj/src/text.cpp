#include "hierdoc/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <unordered_map>

namespace hierdoc {

namespace {

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
  return specials;
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "valid") return Split::valid;
  if (name == "test") return Split::test;
  throw DatasetError("unknown split tag '" + std::string(name) + "'");
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  for (char c : text) {
    if (is_space(c)) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      const auto u = static_cast<unsigned char>(c);
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---- Vocabulary -----------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(special_tokens()) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& specials = special_tokens();
  if (tokens_.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), tokens_.begin())) {
    throw std::invalid_argument("vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::int32_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(token);
  return it == index_.end() ? unk_id : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(token); }

std::vector<std::int32_t> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<std::int32_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token(i));
  return out;
}

Vocabulary build_vocab(std::span<const std::vector<std::string>> token_lists,
                       std::size_t max_size) {
  if (token_lists.empty()) throw DatasetError("cannot build a vocabulary from an empty corpus");
  if (max_size < Vocabulary::num_specials) {
    throw std::invalid_argument("vocabulary max_size must leave room for 4 special tokens");
  }
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& doc : token_lists) {
    for (const auto& tok : doc) ++counts[tok];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  ranked.reserve(counts.size());
  for (auto& [tok, n] : counts) {
    if (std::find(special_tokens().begin(), special_tokens().end(), tok) ==
        special_tokens().end()) {
      ranked.emplace_back(tok, n);
    }
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  const std::size_t keep = std::min(ranked.size(), max_size - Vocabulary::num_specials);
  std::vector<std::string> tokens = special_tokens();
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(std::move(ranked[i].first));
  return Vocabulary(std::move(tokens));
}

// ---- labels and stats -----------------------------------------------------

int LabelMap::id(std::string_view name) const {
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw DatasetError("unknown label '" + std::string(name) + "'");
  return static_cast<int>(it - names.begin());
}

double CorpusStats::fraction_at_or_below(std::size_t length) const {
  double f = 0.0;
  for (const auto& p : length_cdf) {
    if (p.length > length) break;
    f = p.fraction;
  }
  return f;
}

CorpusStats compute_stats(std::span<const std::size_t> lengths, std::size_t num_classes) {
  CorpusStats s;
  s.num_classes = num_classes;
  s.num_documents = lengths.size();
  if (lengths.empty()) return s;
  std::vector<std::size_t> sorted(lengths.begin(), lengths.end());
  std::sort(sorted.begin(), sorted.end());
  std::size_t total = 0;
  for (auto n : sorted) total += n;
  s.average_words = static_cast<double>(total) / static_cast<double>(sorted.size());
  s.longest = sorted.back();
  const double n = static_cast<double>(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (i + 1 < sorted.size() && sorted[i + 1] == sorted[i]) continue;
    s.length_cdf.push_back({sorted[i], static_cast<double>(i + 1) / n});
  }
  return s;
}

std::vector<std::vector<std::string>> Corpus::token_lists(Split split) const {
  std::vector<std::vector<std::string>> out;
  for (const auto& d : documents) {
    if (d.split == split) out.push_back(d.tokens);
  }
  return out;
}

// ---- JSONL ingestion ------------------------------------------------------

Corpus parse_dataset(std::string_view jsonl, std::string_view source_name) {
  struct RawLabel {
    std::string text;
    std::optional<long long> number;
  };
  Corpus corpus;
  std::vector<RawLabel> raw_labels;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) {
    throw DatasetError(std::string(source_name) + ":" + std::to_string(line_no) + ": " + why);
  };
  while (pos <= jsonl.size()) {
    const std::size_t end = std::min(jsonl.find('\n', pos), jsonl.size());
    std::string_view line = jsonl.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (std::all_of(line.begin(), line.end(), is_space)) continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) fail("expected a JSON object");
    for (const char* field : {"id", "text", "label", "split"}) {
      if (!obj.contains(field)) fail(std::string("missing field '") + field + "'");
    }
    if (!obj["id"].is_string() || !obj["text"].is_string() || !obj["split"].is_string()) {
      fail("fields id, text and split must be strings");
    }
    TextDocument doc;
    doc.id = obj["id"].get<std::string>();
    try {
      doc.split = parse_split(obj["split"].get<std::string>());
    } catch (const DatasetError& e) {
      fail(e.what());
    }
    doc.tokens = tokenize(obj["text"].get<std::string>());
    if (doc.tokens.empty()) fail("empty text for document '" + doc.id + "'");

    const auto& label = obj["label"];
    if (label.is_number_integer()) {
      raw_labels.push_back({std::to_string(label.get<long long>()), label.get<long long>()});
    } else if (label.is_string()) {
      raw_labels.push_back({label.get<std::string>(), std::nullopt});
    } else {
      fail("label must be a string or an integer");
    }
    corpus.documents.push_back(std::move(doc));
  }
  if (corpus.documents.empty()) throw DatasetError(std::string(source_name) + ": no documents");

  const bool all_numeric = std::all_of(raw_labels.begin(), raw_labels.end(),
                                       [](const RawLabel& l) { return l.number.has_value(); });
  std::vector<std::string> names;
  if (all_numeric) {
    std::set<long long> values;
    for (const auto& l : raw_labels) values.insert(*l.number);
    for (long long v : values) names.push_back(std::to_string(v));
  } else {
    std::set<std::string> values;
    for (const auto& l : raw_labels) values.insert(l.text);
    names.assign(values.begin(), values.end());
  }
  corpus.labels.names = std::move(names);
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < corpus.labels.names.size(); ++i) {
    ids[corpus.labels.names[i]] = static_cast<int>(i);
  }
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
    corpus.documents[i].label = ids.at(raw_labels[i].text);
    lengths.push_back(corpus.documents[i].tokens.size());
  }
  corpus.stats = compute_stats(lengths, corpus.labels.size());
  return corpus;
}

Corpus load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str(), path.string());
}

void write_dataset(const std::filesystem::path& path, std::span<const TextDocument> docs,
                   const LabelMap& labels) {
  bool numeric = true;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    numeric = numeric && labels.names[i] == std::to_string(i);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write dataset " + path.string());
  for (const auto& d : docs) {
    std::string text;
    for (const auto& tok : d.tokens) {
      if (!text.empty()) text += ' ';
      text += tok;
    }
    nlohmann::json obj;
    obj["id"] = d.id;
    obj["text"] = text;
    if (numeric) {
      obj["label"] = d.label;
    } else {
      obj["label"] = labels.names.at(static_cast<std::size_t>(d.label));
    }
    obj["split"] = std::string(split_name(d.split));
    out << obj.dump() << '\n';
  }
}

std::vector<Document> encode_documents(std::span<const TextDocument> docs,
                                       const Vocabulary& vocab) {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const auto& d : docs) {
    out.push_back({d.id, vocab.encode(d.tokens), d.label, d.split});
  }
  return out;
}

void export_stats(const CorpusStats& stats, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream s(dir / "stats.csv");
  if (!s) throw std::runtime_error("cannot write " + (dir / "stats.csv").string());
  s << "C,N,AW,L\n"
    << stats.num_classes << ',' << stats.num_documents << ','
    << format_real(stats.average_words) << ',' << stats.longest << '\n';
  std::ofstream c(dir / "length_cdf.csv");
  if (!c) throw std::runtime_error("cannot write " + (dir / "length_cdf.csv").string());
  c << "length,fraction\n";
  for (const auto& p : stats.length_cdf) c << p.length << ',' << format_real(p.fraction) << '\n';
}

std::vector<CdfPoint> read_length_cdf(const std::filesystem::path& csv) {
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open " + csv.string());
  std::string line;
  std::getline(in, line);
  if (line != "length,fraction") throw DatasetError("unexpected CDF header in " + csv.string());
  std::vector<CdfPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DatasetError("malformed CDF row '" + line + "'");
    CdfPoint p;
    p.length = std::stoull(line.substr(0, comma));
    p.fraction = std::stod(line.substr(comma + 1));
    out.push_back(p);
  }
  return out;
}

}  // namespace hierdoc
