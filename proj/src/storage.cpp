#include "hierdoc/storage.hpp"

#include <Eigen/Core>
#include <openssl/evp.h>
#include <omp.h>

#include <algorithm>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

namespace hierdoc {

namespace {

using json = nlohmann::json;

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void put_u64_le(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, 8);
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

void put_floats_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(float)));
  } else {
    for (float f : values) {
      std::uint32_t u = byteswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&u), 4);
    }
  }
}

json shape_json(const Shape& s) { return json(s); }

Shape shape_from_json(const json& j) {
  Shape s = j.get<Shape>();
  if (s.empty()) throw FormatError("empty tensor shape");
  return s;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::filesystem::filesystem_error("cannot open", path, std::make_error_code(std::errc::no_such_file_or_directory));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string git_blob_hash(std::string_view content) {
  const std::string prefix = "blob " + std::to_string(content.size()) + '\0';
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) &&
                  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("sha1 digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned char b : std::span(digest, len)) {
    out += hex[b >> 4];
    out += hex[b & 15];
  }
  return out;
}

std::string git_blob_hash_file(const std::filesystem::path& path) {
  return git_blob_hash(read_file(path));
}

void write_container(const std::filesystem::path& path, const json& header,
                     std::span<const std::span<const float>> blocks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string text = header.dump();
  put_u64_le(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto block : blocks) put_floats_le(out, block);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8) throw FormatError(path.string() + ": truncated header");
  const std::uint64_t header_len = get_u64_le(reinterpret_cast<const unsigned char*>(bytes.data()));
  if (header_len > bytes.size() - 8) throw FormatError(path.string() + ": header length out of range");
  Container c;
  try {
    c.header = json::parse(bytes.substr(8, header_len));
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  const std::size_t payload = bytes.size() - 8 - header_len;
  if (payload % 4 != 0) throw FormatError(path.string() + ": payload not a whole number of floats");
  c.data.resize(payload / 4);
  std::memcpy(c.data.data(), bytes.data() + 8 + header_len, payload);
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : c.data) f = std::bit_cast<float>(byteswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json manifest = json::array();
  std::vector<std::span<const float>> blocks;
  std::size_t offset = 0;
  for (const auto& [name, value] : ckpt.tensors) {
    manifest.push_back({{"name", name}, {"shape", shape_json(value.shape())}, {"offset", offset}});
    offset += value.size();
    blocks.push_back(value.values());
  }
  json header = {{"format_version", checkpoint_format_version},
                 {"model_kind", ckpt.model_kind},
                 {"config", ckpt.config},
                 {"parameters", manifest},
                 {"labels", ckpt.labels.names},
                 {"metadata", ckpt.metadata}};
  if (ckpt.vocab) header["vocabulary"] = ckpt.vocab->tokens();
  write_container(path, header, blocks);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  const json& h = c.header;
  try {
    const int version = h.at("format_version").get<int>();
    if (version != checkpoint_format_version) {
      throw FormatError(path.string() + ": unsupported checkpoint format_version " +
                        std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.model_kind = h.at("model_kind").get<std::string>();
    ckpt.config = h.at("config");
    ckpt.labels.names = h.at("labels").get<std::vector<std::string>>();
    ckpt.metadata = h.value("metadata", json::object());
    if (h.contains("vocabulary")) {
      ckpt.vocab = Vocabulary(h.at("vocabulary").get<std::vector<std::string>>());
    }
    for (const auto& entry : h.at("parameters")) {
      Shape shape = shape_from_json(entry.at("shape"));
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (offset + n > c.data.size()) {
        throw FormatError(path.string() + ": tensor " + entry.at("name").get<std::string>() +
                          " runs past end of file");
      }
      std::vector<float> values(c.data.begin() + static_cast<std::ptrdiff_t>(offset),
                                c.data.begin() + static_cast<std::ptrdiff_t>(offset + n));
      ckpt.tensors.emplace_back(entry.at("name").get<std::string>(),
                                Array<float>(std::move(shape), std::move(values)));
    }
    return ckpt;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed checkpoint header: " + e.what());
  }
}

namespace {

std::vector<std::pair<std::string, Array<float>>> tensors_of(const ad::ParameterSet<float>& p) {
  std::vector<std::pair<std::string, Array<float>>> out;
  for (std::size_t i = 0; i < p.count(); ++i) out.emplace_back(p[i].name, p[i].value);
  return out;
}

}  // namespace

Checkpoint make_checkpoint(const SegmentEncoder<float>& encoder, const LabelMap& labels,
                           const Vocabulary& vocab, json metadata) {
  Checkpoint c;
  c.model_kind = "encoder";
  c.config = to_json(encoder.config());
  c.labels = labels;
  c.vocab = vocab;
  c.metadata = metadata.is_null() ? json::object() : std::move(metadata);
  c.tensors = tensors_of(encoder.parameters());
  return c;
}

Checkpoint make_checkpoint(const DocumentModel<float>& model, const LabelMap& labels,
                           json metadata) {
  Checkpoint c;
  c.model_kind = std::string(doc_model_kind_name(model.config().kind));
  c.config = to_json(model.config());
  c.labels = labels;
  c.metadata = metadata.is_null() ? json::object() : std::move(metadata);
  c.tensors = tensors_of(model.parameters());
  if (!model.input_mean().empty()) {
    c.tensors.emplace_back("input.mean", model.input_mean());
    c.tensors.emplace_back("input.scale", model.input_scale());
  }
  return c;
}

void load_parameters(ad::ParameterSet<float>& params, const Checkpoint& ckpt) {
  if (params.count() != ckpt.tensors.size()) {
    throw FormatError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                      " tensors, model expects " + std::to_string(params.count()));
  }
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& [name, value] = ckpt.tensors[i];
    auto& p = params[i];
    if (p.name != name || p.value.shape() != value.shape()) {
      throw FormatError("checkpoint tensor " + name + " " + shape_string(value.shape()) +
                        " does not match model parameter " + p.name + " " +
                        shape_string(p.value.shape()));
    }
    p.value = value;
  }
}

SegmentEncoder<float> encoder_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "encoder") {
    throw FormatError("checkpoint holds a " + ckpt.model_kind + " model, expected encoder");
  }
  SegmentEncoder<float> enc(encoder_config_from_json(ckpt.config), 0);
  load_parameters(enc.parameters(), ckpt);
  return enc;
}

DocumentModel<float> doc_model_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.model_kind != "robert" && ckpt.model_kind != "tobert") {
    throw FormatError("checkpoint holds a " + ckpt.model_kind + " model, expected a document model");
  }
  DocModelConfig cfg = doc_model_config_from_json(ckpt.config);
  if (ckpt.model_kind != doc_model_kind_name(cfg.kind)) {
    throw FormatError("checkpoint model_kind " + ckpt.model_kind + " disagrees with its config");
  }
  DocumentModel<float> model(cfg, 0);
  Checkpoint trainable = ckpt;
  Array<float> mean, scale;
  std::erase_if(trainable.tensors, [&](const auto& entry) {
    if (entry.first == "input.mean") mean = entry.second;
    if (entry.first == "input.scale") scale = entry.second;
    return entry.first.starts_with("input.");
  });
  load_parameters(model.parameters(), trainable);
  if (!mean.empty()) model.set_input_standardization(std::move(mean), std::move(scale));
  return model;
}

void write_feature_store(const std::filesystem::path& path, const FeatureStore& store) {
  json docs = json::array();
  std::vector<std::span<const float>> blocks;
  std::size_t offset = 0;
  for (const auto& s : store.sequences) {
    if (s.width() != store.width) {
      throw std::invalid_argument("sequence " + s.doc_id + " has width " +
                                  std::to_string(s.width()) + ", store width is " +
                                  std::to_string(store.width));
    }
    docs.push_back({{"id", s.doc_id},
                    {"label", s.label},
                    {"num_segments", s.num_segments()},
                    {"doc_length", s.doc_length},
                    {"offset", offset}});
    offset += s.features.size();
    blocks.push_back(s.features.values());
  }
  json header = {{"format_version", checkpoint_format_version},
                 {"representation", feature_kind_name(store.kind)},
                 {"width", store.width},
                 {"source_checkpoint", store.source_checkpoint},
                 {"labels", store.labels.names},
                 {"docs", docs}};
  write_container(path, header, blocks);
}

FeatureStore read_feature_store(const std::filesystem::path& path,
                                const std::optional<std::string>& expected_checkpoint) {
  Container c = read_container(path);
  const json& h = c.header;
  FeatureStore store;
  try {
    store.kind = parse_feature_kind(h.at("representation").get<std::string>());
    store.width = h.at("width").get<std::size_t>();
    store.source_checkpoint = h.at("source_checkpoint").get<std::string>();
    store.labels.names = h.at("labels").get<std::vector<std::string>>();
    if (expected_checkpoint && *expected_checkpoint != store.source_checkpoint) {
      throw FormatError(path.string() + ": features come from checkpoint " +
                        store.source_checkpoint + ", expected " + *expected_checkpoint);
    }
    for (const auto& d : h.at("docs")) {
      const std::size_t n = d.at("num_segments").get<std::size_t>();
      const std::size_t offset = d.at("offset").get<std::size_t>();
      const std::size_t size = n * store.width;
      if (n == 0 || offset + size > c.data.size()) {
        throw FormatError(path.string() + ": document " + d.at("id").get<std::string>() +
                          " has an invalid extent");
      }
      SegmentSequence s;
      s.doc_id = d.at("id").get<std::string>();
      s.label = d.at("label").get<int>();
      s.doc_length = d.at("doc_length").get<std::size_t>();
      s.features = Array<float>(
          {n, store.width},
          std::vector<float>(c.data.begin() + static_cast<std::ptrdiff_t>(offset),
                             c.data.begin() + static_cast<std::ptrdiff_t>(offset + size)));
      store.sequences.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": malformed feature store header: " + e.what());
  }
  return store;
}

void check_feature_width(const FeatureStore& store, const DocModelConfig& config) {
  if (store.width != config.input_width) {
    throw std::invalid_argument("feature store holds " + std::string(feature_kind_name(store.kind)) +
                                " features of width " + std::to_string(store.width) +
                                " but the document model expects input_width " +
                                std::to_string(config.input_width));
  }
}

int configure_threads() {
  int n = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("HIERDOC_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) {
      throw std::invalid_argument("HIERDOC_THREADS must be a positive integer, got '" +
                                  std::string(env) + "'");
    }
    n = static_cast<int>(v);
  }
  omp_set_num_threads(n);
  Eigen::setNbThreads(n);
  return n;
}

}  // namespace hierdoc
