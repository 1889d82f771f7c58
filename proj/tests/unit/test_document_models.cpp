#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "hierdoc/document_models.hpp"
#include "model_oracles.hpp"

using namespace hierdoc;
using oracle::Mat;
using oracle::Vec;

namespace {

DocModelConfig robert_config(std::size_t width = 5, std::size_t lstm = 6, std::size_t classes = 3) {
  DocModelConfig c;
  c.kind = DocModelKind::robert;
  c.input_width = width;
  c.lstm_dim = lstm;
  c.head_hidden = 4;
  c.num_classes = classes;
  return c;
}

DocModelConfig tobert_config(bool positions, std::size_t width = 5, std::size_t model = 8) {
  DocModelConfig c;
  c.kind = DocModelKind::tobert;
  c.input_width = width;
  c.tobert_width = model;
  c.tobert_heads = 2;
  c.tobert_ff = 16;
  c.tobert_layers = 2;
  c.head_hidden = 4;
  c.num_classes = 3;
  c.max_segments = 6;
  c.use_position_embeddings = positions;
  return c;
}

SegmentSequence random_sequence(std::size_t segments, std::size_t width, std::mt19937_64& rng) {
  SegmentSequence s;
  s.doc_id = "r";
  s.features = Array<float>::matrix(segments, width);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : s.features.values()) v = n(rng);
  s.doc_length = segments * 10;
  return s;
}

// Label = argmax of the mean row; the label column gets a +1 shift so ties
// are rare.
std::vector<SegmentSequence> mean_argmax_task(std::size_t n, std::size_t classes,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SegmentSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    SegmentSequence s = random_sequence(1 + rng() % 6, classes, rng);
    const std::size_t y = rng() % classes;
    for (std::size_t r = 0; r < s.num_segments(); ++r) s.features(r, y) += 1.0f;
    Vec mean(classes, 0.0);
    for (std::size_t r = 0; r < s.num_segments(); ++r)
      for (std::size_t k = 0; k < classes; ++k) mean[k] += s.features(r, k);
    s.label = static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
    s.doc_id = "m" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("robert_forward matches the unrolled cell oracle") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 120; ++trial) {
    DocumentModel<double> m(robert_config(), trial);
    oracle::randomize(m, rng);
    const SegmentSequence s = random_sequence(1 + trial % 5, 5, rng);
    const Array<double> got = robert_forward(s, m);
    const Vec want = oracle::robert(m, s);
    REQUIRE(got.size() == 3);
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(std::abs(got[c] - want[c]) <= 1e-8);
  }
}

TEST_CASE("robert one segment equals one cell step from zero state") {
  std::mt19937_64 rng(32);
  DocumentModel<double> m(robert_config(), 1);
  oracle::randomize(m, rng);
  const SegmentSequence s = random_sequence(1, 5, rng);
  const oracle::Params p{m.parameters()};
  Vec h(6, 0.0), c(6, 0.0);
  oracle::lstm_cell(oracle::features_of(s)[0], h, c, p.mat("lstm.input"), p.mat("lstm.recurrent"),
                    p.vec("lstm.bias"));
  const Vec want = oracle::doc_head(h, p);
  const Array<double> got = robert_forward(s, m);
  for (std::size_t k = 0; k < 3; ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-8);
}

TEST_CASE("robert forget-gate bias starts at 1") {
  DocumentModel<double> m(robert_config(5, 6), 1);
  const auto& b = m.parameters().get("lstm.bias").value;
  for (std::size_t i = 0; i < 24; ++i) CHECK(b[i] == (i >= 6 && i < 12 ? 1.0 : 0.0));
}

TEST_CASE("tobert_forward matches the small-instance oracle") {
  std::mt19937_64 rng(33);
  SUBCASE("single segment, positions off") {
    DocumentModel<double> m(tobert_config(false), 2);
    oracle::randomize(m, rng);
    const SegmentSequence s = random_sequence(1, 5, rng);
    const Array<double> got = tobert_forward(s, m);
    const Vec want = oracle::tobert(m, s);
    for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(got[c] - want[c]) <= 1e-8);
  }
  SUBCASE("random lengths with and without positions") {
    for (int trial = 0; trial < 100; ++trial) {
      DocumentModel<double> m(tobert_config(trial % 2 == 0), trial);
      oracle::randomize(m, rng);
      const SegmentSequence s = random_sequence(1 + trial % 6, 5, rng);
      const Array<double> got = tobert_forward(s, m);
      const Vec want = oracle::tobert(m, s);
      for (std::size_t c = 0; c < 3; ++c) REQUIRE(std::abs(got[c] - want[c]) <= 1e-8);
    }
  }
}

TEST_CASE("posterior shape and simplex contract") {
  std::mt19937_64 rng(34);
  for (bool robert : {true, false}) {
    DocumentModel<double> m(robert ? robert_config() : tobert_config(true), 4);
    oracle::randomize(m, rng, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      const Array<double> p = m.posterior(random_sequence(1 + trial % 6, 5, rng));
      CHECK(p.shape() == Shape{3});
      double total = 0;
      for (double v : p.values()) {
        CHECK(v > 0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("input errors") {
  std::mt19937_64 rng(1);
  DocumentModel<double> r(robert_config(), 1);
  CHECK_THROWS_AS(r.posterior(random_sequence(2, 4, rng)), std::invalid_argument);
  SegmentSequence empty;
  CHECK_THROWS_AS(r.posterior(empty), std::invalid_argument);
  DocumentModel<double> t(tobert_config(true), 1);
  CHECK_THROWS_AS(t.posterior(random_sequence(7, 5, rng)), std::invalid_argument);
  DocModelConfig bad = robert_config();
  bad.lstm_dim = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("tobert without positions is permutation invariant") {
  std::mt19937_64 rng(35);
  DocumentModel<double> m(tobert_config(false), 7);
  oracle::randomize(m, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const SegmentSequence s = random_sequence(2 + trial % 5, 5, rng);
    std::vector<std::size_t> order(s.num_segments());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const Array<double> a = m.posterior(s), b = m.posterior(oracle::permuted(s, order));
    for (std::size_t c = 0; c < 3; ++c) REQUIRE(std::abs(a[c] - b[c]) <= 1e-5);
  }
}

TEST_CASE("tobert with positions: a swap changes the posterior") {
  std::mt19937_64 rng(36);
  DocumentModel<double> m(tobert_config(true), 8);
  oracle::randomize(m, rng);
  SegmentSequence s = random_sequence(2, 5, rng);
  for (std::size_t k = 0; k < 5; ++k) s.features(1, k) = -s.features(0, k);
  const Array<double> a = m.posterior(s), b = m.posterior(oracle::permuted(s, {1, 0}));
  double diff = 0;
  for (std::size_t c = 0; c < 3; ++c) diff += std::abs(a[c] - b[c]);
  CHECK(diff > 1e-6);
}

TEST_CASE("zeroed output layer gives the uniform posterior") {
  std::mt19937_64 rng(37);
  for (bool robert : {true, false}) {
    DocumentModel<double> m(robert ? robert_config() : tobert_config(false), 3);
    oracle::randomize(m, rng);
    m.parameters().get("head.output.weight").value.fill(0);
    m.parameters().get("head.output.bias").value.fill(0);
    const Array<double> p = m.posterior(random_sequence(3, 5, rng));
    for (double v : p.values()) CHECK(v == 1.0 / 3.0);
  }
}

TEST_CASE("aggregate examples") {
  const Array<double> p({2, 2}, {0.6, 0.4, 0.2, 0.8});
  CHECK(aggregate_average(p) == 1);
  const Array<double> one({1, 3}, {0.2, 0.5, 0.3});
  CHECK(aggregate_average(one) == 1);
  CHECK(aggregate_most_frequent(one) == 1);

  Array<double> rows = Array<double>::matrix(3, 6, 0.0);
  rows(0, 2) = rows(1, 2) = rows(2, 5) = 1.0;
  CHECK(aggregate_most_frequent(rows) == 2);
  const Array<double> tie({2, 3}, {0.1, 0.8, 0.1, 0.1, 0.1, 0.8});
  CHECK(aggregate_most_frequent(tie) == 1);
  CHECK(aggregate_average(Array<double>({1, 2}, {0.5, 0.5})) == 0);
  CHECK_THROWS_AS(aggregate_average(Array<double>()), std::invalid_argument);
  CHECK_THROWS_AS(aggregate_most_frequent(Array<double>()), std::invalid_argument);
}

TEST_CASE("aggregates match brute-force oracles and are permutation invariant") {
  std::mt19937_64 rng(38);
  for (int trial = 0; trial < 100; ++trial) {
    const Array<double> p = oracle::random_simplex(1 + trial % 9, 2 + trial % 4, rng);
    CHECK(aggregate_average(p) == oracle::argmax_mean(p));
    CHECK(aggregate_most_frequent(p) == oracle::modal_argmax(p));
    std::vector<std::size_t> order(p.rows());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    Array<double> q = p;
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) q(r, c) = p(order[r], c);
    CHECK(aggregate_average(q) == aggregate_average(p));
    CHECK(aggregate_most_frequent(q) == aggregate_most_frequent(p));
    Array<double> twice = Array<double>::matrix(2 * p.rows(), p.cols());
    for (std::size_t r = 0; r < 2 * p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) twice(r, c) = p(r % p.rows(), c);
    CHECK(aggregate_average(twice) == aggregate_average(p));
  }
}

TEST_CASE("full-graph gradients match finite differences") {
  std::mt19937_64 rng(39);
  const std::vector<int> labels = {2, 0};
  auto check = [&](DocumentModel<double>& m, std::size_t segments) {
    oracle::randomize(m, rng);
    Array<double> features = Array<double>::matrix(2 * segments, m.config().input_width);
    for (auto& v : features.values()) v = std::normal_distribution<double>()(rng);
    const auto g = oracle::check_gradients(m.parameters(), [&](ad::Tape<double>& t) {
      return ad::cross_entropy(t, m.logits(t, features, 2, nullptr), std::span<const int>(labels));
    });
    INFO(g.worst);
    CHECK(g.max_rel_error <= 1e-4);
  };
  SUBCASE("robert") {
    DocumentModel<double> m(robert_config(6, 5), 1);
    check(m, 4);
  }
  SUBCASE("tobert with positions") {
    DocumentModel<double> m(tobert_config(true, 6, 8), 2);
    check(m, 4);
  }
  SUBCASE("tobert first-position pooling") {
    DocModelConfig c = tobert_config(false, 6, 8);
    c.pooling = SegmentPooling::first;
    DocumentModel<double> m(c, 3);
    check(m, 3);
  }
}

TEST_CASE("train_document_model") {
  TrainOptions opts;
  opts.batch_size = 32;
  opts.seed = 3;

  SUBCASE("0 epochs returns the initialization") {
    const auto train = mean_argmax_task(50, 3, 1), valid = mean_argmax_task(20, 3, 2);
    DocModelConfig c = robert_config(3, 8);
    DocumentModel<float> m(c, 1);
    const auto before = m.parameters().snapshot();
    opts.epochs = 0;
    const TrainResult r = train_document_model(m, std::span<const SegmentSequence>(train),
                                               std::span<const SegmentSequence>(valid), opts);
    CHECK(r.history.size() == 1);
    const auto after = m.parameters().snapshot();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  }

  SUBCASE("mean-argmax task is learned by both kinds") {
    const auto train = mean_argmax_task(1500, 3, 3), valid = mean_argmax_task(300, 3, 4);
    for (DocModelKind kind : {DocModelKind::robert, DocModelKind::tobert}) {
      DocModelConfig c = kind == DocModelKind::robert ? robert_config(3, 100) : tobert_config(false, 3, 32);
      c.head_hidden = 30;
      if (kind == DocModelKind::tobert) c.tobert_ff = 64;
      DocumentModel<float> m(c, 5);
      TrainOptions o = default_train_options(kind);
      o.epochs = 20;
      o.seed = 5;
      if (kind == DocModelKind::tobert) o.optimizer.learning_rate = 1e-3;
      const TrainResult r = train_document_model(m, std::span<const SegmentSequence>(train),
                                                 std::span<const SegmentSequence>(valid), o);
      INFO(doc_model_kind_name(kind));
      CHECK(r.best_valid_accuracy >= 0.99);
      CHECK(r.history.size() <= 21);
    }
  }

  SUBCASE("null task stays near chance") {
    std::mt19937_64 rng(40);
    std::vector<SegmentSequence> train, valid;
    for (int i = 0; i < 400; ++i) {
      SegmentSequence s = random_sequence(1 + rng() % 4, 8, rng);
      s.label = static_cast<int>(rng() % 2);
      (i < 200 ? train : valid).push_back(s);
    }
    for (int i = 0; i < 200; ++i) {
      SegmentSequence s = random_sequence(1 + rng() % 4, 8, rng);
      s.label = static_cast<int>(rng() % 2);
      valid.push_back(s);
    }
    DocumentModel<float> m(robert_config(8, 16, 2), 1);
    TrainOptions o = default_train_options(DocModelKind::robert);
    o.epochs = 15;
    const TrainResult r = train_document_model(m, std::span<const SegmentSequence>(train),
                                               std::span<const SegmentSequence>(valid), o);
    CHECK(std::abs(r.best_valid_accuracy - 0.5) <= 0.10);
  }

  SUBCASE("errors") {
    const auto train = mean_argmax_task(10, 3, 1);
    DocumentModel<float> m(robert_config(4, 8), 1);
    opts.epochs = 1;
    CHECK_THROWS_AS(train_document_model(m, std::span<const SegmentSequence>(train),
                                         std::span<const SegmentSequence>(train), opts),
                    std::invalid_argument);
    DocumentModel<float> ok(robert_config(3, 8), 1);
    CHECK_THROWS_AS(train_document_model(ok, std::span<const SegmentSequence>(),
                                         std::span<const SegmentSequence>(train), opts),
                    std::invalid_argument);
  }
}

TEST_CASE("input standardization") {
  std::mt19937_64 rng(41);
  std::vector<SegmentSequence> seqs;
  for (int i = 0; i < 30; ++i) {
    SegmentSequence s = random_sequence(3, 4, rng);
    for (std::size_t r = 0; r < 3; ++r) {
      s.features(r, 0) = 5.0f + 0.01f * s.features(r, 0);
      s.features(r, 3) = 2.0f;  // constant column keeps scale 1
    }
    seqs.push_back(s);
  }
  DocModelConfig c = robert_config(4, 6);
  DocumentModel<double> m(c, 1);
  m.fit_input_standardization(seqs);
  double n = 0, sum0 = 0, sq0 = 0;
  for (const auto& s : seqs)
    for (std::size_t r = 0; r < 3; ++r) sum0 += s.features(r, 0), ++n;
  const double mean0 = sum0 / n;
  for (const auto& s : seqs)
    for (std::size_t r = 0; r < 3; ++r) sq0 += std::pow(s.features(r, 0) - mean0, 2);
  CHECK(m.input_mean()[0] == doctest::Approx(mean0).epsilon(1e-9));
  CHECK(m.input_scale()[0] == doctest::Approx(std::sqrt(sq0 / n)).epsilon(1e-9));
  CHECK(m.input_scale()[3] == 1.0);

  // The model sees (x - mean) / scale: equal to an unstandardized model fed
  // pre-transformed features.
  DocumentModel<double> raw(c, 1);
  SegmentSequence shifted = seqs[0];
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t k = 0; k < 4; ++k)
      shifted.features(r, k) = static_cast<float>((seqs[0].features(r, k) - m.input_mean()[k]) /
                                                  m.input_scale()[k]);
  const Array<double> a = m.posterior(seqs[0]), b = raw.posterior(shifted);
  for (std::size_t k = 0; k < 3; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-6));

  CHECK_THROWS_AS(m.set_input_standardization(Array<double>({4}), Array<double>({4}, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(m.set_input_standardization(Array<double>({3}), Array<double>({3}, 1.0)),
                  std::invalid_argument);
}

TEST_CASE("doc model config json roundtrip and field errors") {
  DocModelConfig c = tobert_config(true);
  c.pooling = SegmentPooling::first;
  c.standardize_inputs = false;
  CHECK(to_json(doc_model_config_from_json(to_json(c))) == to_json(c));
  nlohmann::json j = to_json(c);
  j["lstm_dim"] = "wide";
  try {
    doc_model_config_from_json(j);
    FAIL("expected ConfigError");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).rfind("doc_model.lstm_dim", 0) == 0);
  }
  j = to_json(c);
  j["kind"] = "gru";
  CHECK_THROWS_WITH_AS(doc_model_config_from_json(j), doctest::Contains("doc_model.kind"),
                       std::invalid_argument);
}
