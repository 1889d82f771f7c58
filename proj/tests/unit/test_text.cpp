#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <random>

#include "hierdoc/text.hpp"

using namespace hierdoc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("hierdoc_text_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string line(const std::string& id, const std::string& text, const std::string& label,
                 const std::string& split = "train") {
  return R"({"id":")" + id + R"(","text":")" + text + R"(","label":)" + label + R"(,"split":")" +
         split + "\"}\n";
}

}  // namespace

TEST_CASE("tokenize lowercases and splits on whitespace") {
  CHECK(tokenize("Hello  WORLD\tfoo\n") == std::vector<std::string>{"hello", "world", "foo"});
  CHECK(tokenize("   ").empty());
  CHECK(tokenize("Caf\xc3\x89") == std::vector<std::string>{"caf\xc3\x89"});
}

TEST_CASE("build_vocab examples") {
  const std::vector<std::vector<std::string>> corpus = {{"a", "a", "b"}};
  const Vocabulary v = build_vocab(corpus, 5);
  CHECK(v.size() == 6 - 1);  // 4 specials + a; max_size 5 leaves one slot
  const Vocabulary v2 = build_vocab(corpus, 6);
  CHECK(v2.size() == 6);
  CHECK(v2.id("a") == 4);
  CHECK(v2.id("b") == 5);
  CHECK(v2.id("c") == Vocabulary::unk_id);

  const std::vector<std::vector<std::string>> tie = {{"zeta", "alpha", "mid", "mid"}};
  const Vocabulary t = build_vocab(tie, 10);
  CHECK(t.id("mid") == 4);
  CHECK(t.id("alpha") < t.id("zeta"));

  CHECK_THROWS_AS(build_vocab(std::vector<std::vector<std::string>>{}, 10), DatasetError);
}

TEST_CASE("vocabulary size cap and encode/decode roundtrip") {
  std::mt19937_64 rng(1);
  std::vector<std::vector<std::string>> corpus(20);
  for (auto& doc : corpus)
    for (int i = 0; i < 200; ++i) doc.push_back("t" + std::to_string(rng() % 500));
  const Vocabulary v = build_vocab(corpus, 53160);
  CHECK(v.size() <= 53160);
  const Vocabulary small = build_vocab(corpus, 100);
  CHECK(small.size() == 100);
  std::vector<std::int32_t> ids(small.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::int32_t>(i);
  const auto words = small.decode(ids);
  CHECK(small.encode(words) == ids);
  CHECK(Vocabulary(small.tokens()).tokens() == small.tokens());
}

TEST_CASE("load_dataset examples") {
  const Corpus c = parse_dataset(line("a", "hello world", "0"));
  CHECK(c.stats.num_documents == 1);
  CHECK(c.stats.average_words == 2.0);
  CHECK(c.stats.longest == 2);

  const Corpus three = parse_dataset(line("a", "x", "\"neg\"") + line("b", "x y", "\"pos\"", "valid") +
                                     line("c", "x y z", "\"neg\"", "test"));
  CHECK(three.labels.names == std::vector<std::string>{"neg", "pos"});
  CHECK(three.documents[1].label == 1);
  CHECK(three.documents[2].split == Split::test);
  const auto& cdf = three.stats.length_cdf;
  REQUIRE(cdf.size() == 3);
  CHECK(cdf[0].length == 1);
  CHECK(cdf[0].fraction == doctest::Approx(1.0 / 3));
  CHECK(cdf[1].fraction == doctest::Approx(2.0 / 3));
  CHECK(cdf[2].fraction == 1.0);
}

TEST_CASE("integer labels keep their values when contiguous") {
  const Corpus c = parse_dataset(line("a", "x", "1") + line("b", "y", "0"));
  CHECK(c.documents[0].label == 1);
  CHECK(c.documents[1].label == 0);
}

TEST_CASE("load_dataset errors name the line") {
  const std::string good = line("a", "x", "0");
  try {
    parse_dataset(good + "{not json\n", "d.jsonl");
    FAIL("expected DatasetError");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find("d.jsonl:2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_dataset(line("a", "x", "0", "dev")), DatasetError);
  CHECK_THROWS_AS(parse_dataset(line("a", "   ", "0")), DatasetError);
  CHECK_THROWS_AS(parse_dataset(""), DatasetError);
  CHECK_THROWS_AS(load_dataset("/nonexistent/file.jsonl"), DatasetError);
}

TEST_CASE("stats are invariant to document order") {
  std::mt19937_64 rng(2);
  std::vector<std::size_t> lengths(200);
  for (auto& l : lengths) l = 1 + rng() % 1000;
  const CorpusStats a = compute_stats(lengths, 3);
  std::shuffle(lengths.begin(), lengths.end(), rng);
  const CorpusStats b = compute_stats(lengths, 3);
  CHECK(a.average_words == b.average_words);
  CHECK(a.longest == b.longest);
  CHECK(a.length_cdf == b.length_cdf);
  CHECK(a.longest == *std::max_element(lengths.begin(), lengths.end()));
  for (std::size_t i = 1; i < a.length_cdf.size(); ++i) {
    CHECK(a.length_cdf[i].fraction >= a.length_cdf[i - 1].fraction);
  }
  CHECK(a.length_cdf.back().fraction == 1.0);
}

TEST_CASE("export_stats and CDF roundtrip") {
  const fs::path dir = temp_dir("export");
  const std::vector<std::size_t> one = {5};
  export_stats(compute_stats(one, 1), dir);
  CHECK(fs::exists(dir / "stats.csv"));
  CHECK(read_length_cdf(dir / "length_cdf.csv").size() == 1);

  std::vector<std::size_t> lengths;
  for (int i = 0; i < 50; ++i) lengths.push_back(100 + i);   // shorter than 500
  for (int i = 0; i < 50; ++i) lengths.push_back(600 + 3 * i);
  const CorpusStats s = compute_stats(lengths, 2);
  CHECK(s.fraction_at_or_below(500) == 0.5);
  export_stats(s, dir);
  CHECK(read_length_cdf(dir / "length_cdf.csv") == s.length_cdf);
}

TEST_CASE("write_dataset roundtrip") {
  const fs::path dir = temp_dir("write");
  const Corpus c = parse_dataset(line("a", "Hello there", "\"x\"") + line("b", "general kenobi", "\"y\"", "test"));
  write_dataset(dir / "d.jsonl", c.documents, c.labels);
  const Corpus back = load_dataset(dir / "d.jsonl");
  REQUIRE(back.documents.size() == 2);
  CHECK(back.documents[0].tokens == c.documents[0].tokens);
  CHECK(back.labels.names == c.labels.names);
  CHECK(back.documents[1].split == Split::test);
}
