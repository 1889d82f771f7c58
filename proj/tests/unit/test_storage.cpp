#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "hierdoc/experiment.hpp"
#include "hierdoc/storage.hpp"

using namespace hierdoc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hierdoc_storage_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SegmentSequence random_sequence(const std::string& id, std::size_t n, std::size_t width,
                                std::mt19937_64& rng) {
  SegmentSequence s;
  s.doc_id = id;
  s.label = static_cast<int>(rng() % 2);
  s.doc_length = 100 * n;
  s.features = Array<float>::matrix(n, width);
  std::normal_distribution<float> g(0.5f, 2.0f);
  for (auto& v : s.features.values()) v = g(rng);
  return s;
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

}  // namespace

TEST_CASE("git blob hash matches git hash-object") {
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(git_blob_hash("") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  const fs::path dir = temp_dir("hash");
  write_bytes(dir / "h.txt", "hello\n");
  CHECK(git_blob_hash_file(dir / "h.txt") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK_THROWS_AS(git_blob_hash_file(dir / "missing"), fs::filesystem_error);
}

TEST_CASE("encoder checkpoint roundtrip is bit-exact") {
  const fs::path dir = temp_dir("enc");
  EncoderConfig c;
  c.layers = 1;
  c.heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.max_positions = 12;
  c.vocab_size = 9;
  c.num_classes = 2;
  SegmentEncoder<float> enc(c, 4);
  const Vocabulary vocab({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b", "c", "d", "e"});
  LabelMap labels{{"neg", "pos"}};
  write_checkpoint(dir / "e.ckpt", make_checkpoint(enc, labels, vocab, {{"note", "x"}}));
  const Checkpoint back = read_checkpoint(dir / "e.ckpt");
  CHECK(back.model_kind == "encoder");
  CHECK(back.labels.names == labels.names);
  REQUIRE(back.vocab.has_value());
  CHECK(back.vocab->tokens() == vocab.tokens());
  CHECK(back.metadata.at("note") == "x");
  const SegmentEncoder<float> loaded = encoder_from_checkpoint(back);
  const auto a = enc.parameters().snapshot(), b = loaded.parameters().snapshot();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK_THROWS_AS(doc_model_from_checkpoint(back), FormatError);
}

TEST_CASE("document model checkpoint keeps the standardization") {
  const fs::path dir = temp_dir("doc");
  std::mt19937_64 rng(3);
  for (DocModelKind kind : {DocModelKind::robert, DocModelKind::tobert}) {
    DocModelConfig c;
    c.kind = kind;
    c.input_width = 6;
    c.lstm_dim = 5;
    c.tobert_width = 8;
    c.tobert_heads = 2;
    c.tobert_ff = 12;
    c.tobert_layers = 1;
    c.use_position_embeddings = kind == DocModelKind::tobert;
    DocumentModel<float> model(c, 8);
    std::vector<SegmentSequence> seqs;
    for (int i = 0; i < 6; ++i) seqs.push_back(random_sequence("d" + std::to_string(i), 1 + i, 6, rng));
    model.fit_input_standardization(seqs);
    write_checkpoint(dir / "m.ckpt", make_checkpoint(model, LabelMap{{"x", "y"}}, {{"seed", 8}}));
    const DocumentModel<float> back = doc_model_from_checkpoint(read_checkpoint(dir / "m.ckpt"));
    CHECK(back.input_mean() == model.input_mean());
    CHECK(back.input_scale() == model.input_scale());
    const auto a = model.parameters().snapshot(), b = back.parameters().snapshot();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    for (const auto& s : seqs) CHECK(back.posterior(s) == model.posterior(s));
  }
}

TEST_CASE("feature store roundtrip") {
  const fs::path dir = temp_dir("features");
  std::mt19937_64 rng(5);
  FeatureStore store;
  store.kind = FeatureKind::pooled;
  store.width = 7;
  store.source_checkpoint = git_blob_hash("encoder bytes");
  store.labels.names = {"a", "b"};
  for (int i = 0; i < 10; ++i)
    store.sequences.push_back(random_sequence("doc" + std::to_string(i), 1 + i % 4, 7, rng));
  store.sequences.push_back(random_sequence("long", 13, 7, rng));
  write_feature_store(dir / "f.bin", store);

  const FeatureStore back = read_feature_store(dir / "f.bin", store.source_checkpoint);
  REQUIRE(back.sequences.size() == store.sequences.size());
  CHECK(back.kind == FeatureKind::pooled);
  CHECK(back.width == 7);
  CHECK(back.labels.names == store.labels.names);
  for (std::size_t i = 0; i < store.sequences.size(); ++i) {
    CHECK(back.sequences[i].doc_id == store.sequences[i].doc_id);
    CHECK(back.sequences[i].label == store.sequences[i].label);
    CHECK(back.sequences[i].doc_length == store.sequences[i].doc_length);
    CHECK(back.sequences[i].features == store.sequences[i].features);
  }
  CHECK(back.sequences.back().num_segments() == 13);
  CHECK(read_container(dir / "f.bin").header.at("docs").back().at("num_segments") == 13);

  SUBCASE("strict source hash mismatch") {
    CHECK_THROWS_AS(read_feature_store(dir / "f.bin", git_blob_hash("other")), FormatError);
    CHECK_NOTHROW(read_feature_store(dir / "f.bin"));
  }
  SUBCASE("an H store cannot feed a P-width model") {
    DocModelConfig c;
    c.input_width = 2;
    CHECK_THROWS_AS(check_feature_width(back, c), std::invalid_argument);
    c.input_width = 7;
    CHECK_NOTHROW(check_feature_width(back, c));
  }
  SUBCASE("mismatched sequence width is rejected on write") {
    FeatureStore bad = store;
    bad.sequences.push_back(random_sequence("wide", 2, 8, rng));
    CHECK_THROWS_AS(write_feature_store(dir / "bad.bin", bad), std::invalid_argument);
  }
}

TEST_CASE("corrupt containers raise FormatError") {
  const fs::path dir = temp_dir("corrupt");
  write_bytes(dir / "short.bin", "abc");
  CHECK_THROWS_AS(read_container(dir / "short.bin"), FormatError);
  std::string huge(8, '\xff');
  write_bytes(dir / "range.bin", huge + "{}");
  CHECK_THROWS_AS(read_container(dir / "range.bin"), FormatError);
  std::string len(8, '\0');
  len[0] = 2;
  write_bytes(dir / "json.bin", len + "{x");
  CHECK_THROWS_AS(read_container(dir / "json.bin"), FormatError);
  write_bytes(dir / "odd.bin", len + "{}" + "abc");
  CHECK_THROWS_AS(read_container(dir / "odd.bin"), FormatError);
  write_bytes(dir / "nofields.bin", len + "{}");
  CHECK_THROWS_AS(read_checkpoint(dir / "nofields.bin"), FormatError);
  CHECK_THROWS_AS(read_feature_store(dir / "nofields.bin"), FormatError);
  CHECK_THROWS_AS(read_container(dir / "missing.bin"), fs::filesystem_error);
}
