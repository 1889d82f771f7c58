#include "hierdoc/cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "hierdoc/experiment.hpp"
#include "hierdoc/storage.hpp"
#include "hierdoc/synthetic.hpp"

namespace hierdoc {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + ": no path given");
  if (!fs::is_regular_file(p)) throw MissingInput(what + " not found: " + p.string());
}

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<fs::path> inputs;
  std::vector<fs::path> outputs;

  fs::path write(const fs::path& dir, const std::string& name) const {
    json in = json::object(), out = json::object();
    for (const auto& p : inputs) in[p.string()] = git_blob_hash_file(p);
    for (const auto& p : outputs) out[p.string()] = git_blob_hash_file(p);
    const json m = {{"command", command},   {"argv", argv},
                    {"config", config},     {"config_hash", git_blob_hash(config.dump())},
                    {"seeds", seeds},       {"inputs", in},
                    {"outputs", out}};
    const fs::path path = dir / "manifests" / (name + ".json");
    fs::create_directories(path.parent_path());
    std::ofstream f(path);
    f << m.dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write " + path.string());
    return path;
  }
};

Corpus load_corpus(const fs::path& p) {
  require_file(p, "dataset");
  return load_dataset(p);
}

std::string feature_file_name(const std::string& source, FeatureKind kind, Split split) {
  return source + "_" + std::string(feature_kind_name(kind)) + "_" +
         std::string(split_name(split)) + ".bin";
}

fs::path encoder_checkpoint_path(const fs::path& out, const std::string& source) {
  return out / (source == "untrained" ? "encoder_untrained.ckpt" : "encoder.ckpt");
}

void check_source(const std::string& source) {
  if (source != "finetuned" && source != "untrained") {
    throw ConfigError("--source: must be finetuned or untrained, got " + source);
  }
}

std::vector<std::size_t> parse_edges(const std::string& text) {
  std::vector<std::size_t> edges;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size() || v < 0) throw std::invalid_argument(item);
      edges.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("--buckets: '" + item + "' is not a non-negative integer");
    }
  }
  if (edges.size() < 2) throw ConfigError("--buckets: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i) {
    if (edges[i] <= edges[i - 1]) throw ConfigError("--buckets: edges must be strictly increasing");
  }
  return edges;
}

struct FeatureSplits {
  FeatureStore train, valid, test;
  std::vector<fs::path> paths;
};

FeatureStore load_store(const fs::path& out, const std::string& source, FeatureKind kind,
                        Split split, bool strict, std::vector<fs::path>& inputs) {
  const fs::path p = out / "features" / feature_file_name(source, kind, split);
  require_file(p, "feature store");
  std::optional<std::string> expected;
  if (strict) {
    const fs::path ckpt = encoder_checkpoint_path(out, source);
    require_file(ckpt, "encoder checkpoint");
    expected = git_blob_hash_file(ckpt);
    inputs.push_back(ckpt);
  }
  inputs.push_back(p);
  return read_feature_store(p, expected);
}

void write_predictions(const fs::path& path, std::span<const SegmentSequence> seqs,
                       std::span<const int> predictions, const LabelMap& labels) {
  std::ofstream f(path);
  f << "id,label,prediction,doc_length,num_segments\n";
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    f << seqs[i].doc_id << ',' << labels.names.at(seqs[i].label) << ','
      << labels.names.at(predictions[i]) << ',' << seqs[i].doc_length << ','
      << seqs[i].num_segments() << '\n';
  }
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

std::string model_name(DocModelKind kind, bool positions, FeatureKind repr,
                       const std::string& source) {
  std::string n = std::string(doc_model_kind_name(kind));
  if (positions) n += "_pos";
  n += "_" + std::string(feature_kind_name(repr));
  if (source != "finetuned") n += "_" + source;
  return n;
}

// Flags shared by commands that read an experiment config.
struct ConfigFlags {
  std::string config;
  std::string data;
  std::string out;

  void add(CLI::App* sub) {
    sub->add_option("-c,--config", config, "experiment config JSON")->required();
    sub->add_option("--data", data, "override config.dataset");
    sub->add_option("-o,--out", out, "override config.output_dir");
  }

  ExperimentConfig load(Manifest& m) const {
    require_file(config, "config");
    ExperimentConfig c = load_experiment_config(config);
    if (!data.empty()) c.dataset = data;
    if (!out.empty()) c.output_dir = out;
    m.inputs.push_back(config);
    return c;
  }
};

struct DocFlags {
  std::string kind;
  std::string repr;
  std::string source = "finetuned";
  bool positions = false;
  bool no_positions = false;
  std::string name;

  void add(CLI::App* sub) {
    sub->add_option("--kind", kind, "robert | tobert (overrides config)");
    sub->add_option("--repr", repr, "H | P (overrides config)");
    sub->add_option("--source", source, "feature source: finetuned | untrained");
    sub->add_flag("--positions", positions, "ToBERT segment position embeddings on");
    sub->add_flag("--no-positions", no_positions, "ToBERT segment position embeddings off");
    sub->add_option("--name", name, "run name (default derived from the model)");
  }

  void apply(ExperimentConfig& c) {
    check_source(source);
    if (!kind.empty()) {
      try {
        const DocModelKind k = parse_doc_model_kind(kind);
        if (k != c.doc_model.kind) c.doc_training = default_train_options(k);
        c.doc_model.kind = k;
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--kind: ") + e.what());
      }
    }
    if (!repr.empty()) {
      try {
        c.representation = parse_feature_kind(repr);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("--repr: ") + e.what());
      }
      c.doc_model.input_width = 0;
    }
    if (positions && no_positions) throw ConfigError("--positions: conflicts with --no-positions");
    if (positions) c.doc_model.use_position_embeddings = true;
    if (no_positions) c.doc_model.use_position_embeddings = false;
    c.validate();
    if (name.empty()) {
      name = model_name(c.doc_model.kind, c.doc_model.kind == DocModelKind::tobert &&
                                              c.doc_model.use_position_embeddings,
                        c.representation, source);
    }
  }
};

int cmd_gen_synthetic(const std::string& task, const std::string& spec_path,
                      const fs::path& out_path, const std::optional<std::uint64_t>& seed,
                      const std::optional<std::size_t>& num_train,
                      const std::optional<std::size_t>& num_valid,
                      const std::optional<std::size_t>& num_test,
                      const std::optional<std::size_t>& length,
                      const std::optional<std::size_t>& marker_repeat,
                      const std::optional<std::size_t>& segment_size,
                      const std::optional<std::size_t>& stride, Manifest& m,
                      std::ostream& out) {
  TaskSpec spec;
  if (!spec_path.empty()) {
    require_file(spec_path, "task spec");
    m.inputs.push_back(spec_path);
    json j;
    try {
      j = json::parse(read_file(spec_path));
    } catch (const json::parse_error& e) {
      throw ConfigError(std::string("task: invalid JSON: ") + e.what());
    }
    spec = task_spec_from_json(j);
  }
  if (!task.empty()) {
    try {
      spec.kind = parse_task_kind(task);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--task: ") + e.what());
    }
  }
  if (seed) spec.seed = *seed;
  if (num_train) spec.num_train = *num_train;
  if (num_valid) spec.num_valid = *num_valid;
  if (num_test) spec.num_test = *num_test;
  if (length) spec.min_length = spec.max_length = *length;
  if (marker_repeat) spec.marker_repeat = *marker_repeat;
  if (segment_size) spec.segment_size = *segment_size;
  if (stride) spec.stride = *stride;
  spec.validate();
  const SyntheticDataset ds = generate_task(spec);
  write_dataset(out_path, ds.documents, ds.labels);
  m.config = to_json(spec);
  m.seeds = {spec.seed};
  m.outputs.push_back(out_path);
  const fs::path dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
  m.write(dir, "gen-synthetic_" + out_path.stem().string());
  out << "wrote " << ds.documents.size() << " documents to " << out_path.string() << '\n';
  return exit_ok;
}

int cmd_stats(const fs::path& data, const fs::path& dir, Manifest& m, std::ostream& out) {
  const Corpus corpus = load_corpus(data);
  export_stats(corpus.stats, dir);
  m.inputs.push_back(data);
  m.outputs = {dir / "stats.csv", dir / "length_cdf.csv"};
  m.write(dir, "stats");
  const auto& s = corpus.stats;
  out << "C=" << s.num_classes << " N=" << s.num_documents << " AW=" << s.average_words
      << " L=" << s.longest << '\n';
  return exit_ok;
}

int cmd_finetune(const ConfigFlags& flags, std::optional<std::size_t> epochs, bool verbose,
                 Manifest& m, std::ostream& out) {
  ExperimentConfig cfg = flags.load(m);
  if (epochs) cfg.encoder_training.epochs = *epochs;
  cfg.encoder_training.verbose = cfg.encoder_training.verbose || verbose;
  const Corpus corpus = load_corpus(cfg.dataset);
  m.inputs.push_back(cfg.dataset);
  const PreparedData data = prepare_data(corpus, cfg.vocab_size);
  SegmentEncoder<float> encoder(resolved_encoder_config(cfg, data), cfg.encoder_seed);
  TrainOptions opts = cfg.encoder_training;
  opts.seed = cfg.encoder_seed;
  m.config = to_json(cfg);
  m.seeds = {cfg.encoder_seed};

  const fs::path ckpt_path = cfg.output_dir / "encoder.ckpt";
  json meta = {{"dataset_hash", git_blob_hash_file(cfg.dataset)}, {"encoder_seed", cfg.encoder_seed}};
  TrainResult result;
  try {
    result = fine_tune_segments(encoder, std::span<const Document>(data.train),
                                std::span<const Document>(data.valid), cfg.segmentation, opts);
  } catch (const TrainingDiverged&) {
    meta["aborted"] = "non-finite loss";
    write_checkpoint(ckpt_path, make_checkpoint(encoder, data.labels, data.vocab, meta));
    m.outputs.push_back(ckpt_path);
    m.write(cfg.output_dir, "finetune-encoder");
    throw;
  }
  meta["best_epoch"] = result.best_epoch;
  meta["best_valid_accuracy"] = result.best_valid_accuracy;
  meta["examples_per_epoch"] = result.examples_per_epoch;
  write_checkpoint(ckpt_path, make_checkpoint(encoder, data.labels, data.vocab, meta));
  write_curves_csv(cfg.output_dir / "encoder_curves.csv", result.history);
  m.outputs = {ckpt_path, cfg.output_dir / "encoder_curves.csv"};
  m.write(cfg.output_dir, "finetune-encoder");
  out << "encoder: " << result.examples_per_epoch << " segments/epoch, best valid segment accuracy "
      << result.best_valid_accuracy << " at epoch " << result.best_epoch << '\n';
  return exit_ok;
}

int cmd_extract(const ConfigFlags& flags, const std::string& repr, const std::string& source,
                const std::string& checkpoint, Manifest& m, std::ostream& out) {
  ExperimentConfig cfg = flags.load(m);
  check_source(source);
  if (!repr.empty()) {
    try {
      cfg.representation = parse_feature_kind(repr);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--repr: ") + e.what());
    }
  }
  const Corpus corpus = load_corpus(cfg.dataset);
  m.inputs.push_back(cfg.dataset);
  m.config = to_json(cfg);

  fs::path ckpt_path;
  if (source == "untrained") {
    const PreparedData data = prepare_data(corpus, cfg.vocab_size);
    SegmentEncoder<float> encoder(resolved_encoder_config(cfg, data), cfg.encoder_seed);
    ckpt_path = encoder_checkpoint_path(cfg.output_dir, source);
    write_checkpoint(ckpt_path, make_checkpoint(encoder, data.labels, data.vocab,
                                                {{"untrained", true},
                                                 {"encoder_seed", cfg.encoder_seed}}));
    m.outputs.push_back(ckpt_path);
    m.seeds = {cfg.encoder_seed};
  } else {
    ckpt_path = checkpoint.empty() ? encoder_checkpoint_path(cfg.output_dir, source)
                                   : fs::path(checkpoint);
    require_file(ckpt_path, "encoder checkpoint");
    m.inputs.push_back(ckpt_path);
  }
  const Checkpoint ckpt = read_checkpoint(ckpt_path);
  if (!ckpt.vocab) throw FormatError(ckpt_path.string() + ": encoder checkpoint has no vocabulary");
  if (ckpt.labels.names != corpus.labels.names) {
    throw std::runtime_error("label map of " + ckpt_path.string() + " differs from the dataset's");
  }
  const SegmentEncoder<float> encoder = encoder_from_checkpoint(ckpt);
  const PreparedData data = prepare_data(corpus, *ckpt.vocab);
  const std::string hash = git_blob_hash_file(ckpt_path);

  for (Split split : {Split::train, Split::valid, Split::test}) {
    const auto docs = data.split(split);
    if (docs.empty()) continue;
    FeatureStore store;
    store.kind = cfg.representation;
    store.width = cfg.representation == FeatureKind::pooled ? encoder.config().d_model
                                                            : encoder.config().num_classes;
    store.source_checkpoint = hash;
    store.labels = data.labels;
    store.sequences = extract_sequences(encoder, docs, cfg.segmentation, cfg.representation);
    const fs::path p =
        cfg.output_dir / "features" / feature_file_name(source, cfg.representation, split);
    write_feature_store(p, store);
    m.outputs.push_back(p);
    out << split_name(split) << ": " << store.sequences.size() << " documents -> " << p.string()
        << '\n';
  }
  m.write(cfg.output_dir, "extract-features_" + source + "_" +
                              std::string(feature_kind_name(cfg.representation)));
  return exit_ok;
}

struct LoadedFeatures {
  FeatureStore train, valid, test;
};

LoadedFeatures load_features(const ExperimentConfig& cfg, const std::string& source, Manifest& m) {
  LoadedFeatures f;
  f.train = load_store(cfg.output_dir, source, cfg.representation, Split::train,
                       cfg.strict_features, m.inputs);
  f.valid = load_store(cfg.output_dir, source, cfg.representation, Split::valid,
                       cfg.strict_features, m.inputs);
  const fs::path test_path =
      cfg.output_dir / "features" / feature_file_name(source, cfg.representation, Split::test);
  if (fs::exists(test_path)) {
    f.test = load_store(cfg.output_dir, source, cfg.representation, Split::test,
                        cfg.strict_features, m.inputs);
  }
  return f;
}

int cmd_train_doc(const ConfigFlags& flags, DocFlags doc, std::optional<std::uint64_t> seed,
                  std::optional<std::size_t> epochs, bool verbose, bool all_seeds, Manifest& m,
                  std::ostream& out) {
  ExperimentConfig cfg = flags.load(m);
  doc.apply(cfg);
  if (epochs) cfg.doc_training.epochs = *epochs;
  cfg.doc_training.verbose = cfg.doc_training.verbose || verbose;
  const LoadedFeatures f = load_features(cfg, doc.source, m);
  const DocModelConfig dcfg = resolved_doc_config(cfg, f.train.labels.size());
  check_feature_width(f.train, dcfg);
  m.config = to_json(cfg);

  const std::vector<std::uint64_t> seeds =
      all_seeds ? cfg.seeds : std::vector<std::uint64_t>{seed.value_or(cfg.seeds.front())};
  m.seeds = seeds;
  DocumentModel<float> last(dcfg, seeds.front());
  const RunReport report = multi_seed_run(
      seeds,
      [&](std::uint64_t s) {
        return train_and_test(dcfg, cfg.doc_training, f.train.sequences, f.valid.sequences,
                              f.test.sequences, s, &last);
      },
      {{"experiment", to_json(cfg)},
       {"doc_model", to_json(dcfg)},
       {"feature_source", doc.source},
       {"source_checkpoint", f.train.source_checkpoint}});
  const std::string run = all_seeds ? doc.name + "_multi" : doc.name;
  const fs::path run_dir = cfg.output_dir / "runs" / run;
  write_run_report(run_dir, report);
  m.outputs.push_back(run_dir / "run_report.json");
  for (const auto& r : report.runs) {
    m.outputs.push_back(run_dir / ("curve_seed" + std::to_string(r.seed) + ".csv"));
  }
  if (!all_seeds && report.complete) {
    const fs::path ckpt = cfg.output_dir / ("doc_" + doc.name + ".ckpt");
    write_checkpoint(ckpt, make_checkpoint(last, f.train.labels,
                                           {{"seed", seeds.front()},
                                            {"representation", feature_kind_name(cfg.representation)},
                                            {"feature_source", doc.source},
                                            {"source_checkpoint", f.train.source_checkpoint},
                                            {"best_valid_accuracy", report.runs.front().best_valid_accuracy}}));
    m.outputs.push_back(ckpt);
  }
  m.write(cfg.output_dir, (all_seeds ? "multi-seed_" : "train-doc_") + doc.name);
  for (const auto& r : report.runs) {
    out << run << " seed " << r.seed << ": valid " << r.best_valid_accuracy << " test "
        << r.test_accuracy << '\n';
  }
  if (!report.complete) {
    throw TrainingDiverged("run " + run + " incomplete: " + report.error);
  }
  out << run << " mean test accuracy " << report.mean_accuracy << " over " << report.runs.size()
      << " seed(s)\n";
  return exit_ok;
}

int cmd_evaluate(const ConfigFlags& flags, const std::string& model_path,
                 const std::string& voting, const std::string& source, const std::string& split_s,
                 const std::string& buckets, std::string name, Manifest& m, std::ostream& out) {
  ExperimentConfig cfg = flags.load(m);
  check_source(source);
  if (model_path.empty() == voting.empty()) {
    throw ConfigError("--model: give exactly one of --model or --voting");
  }
  Split split;
  try {
    split = parse_split(split_s);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("--split: ") + e.what());
  }
  std::vector<std::size_t> edges = buckets.empty() ? cfg.bucket_edges : parse_edges(buckets);

  std::vector<int> predictions;
  FeatureStore store;
  json described;
  if (!voting.empty()) {
    VotingRule rule;
    try {
      rule = parse_voting_rule(voting);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("--voting: ") + e.what());
    }
    store = load_store(cfg.output_dir, source, FeatureKind::posterior, split, cfg.strict_features,
                       m.inputs);
    predictions = vote(store.sequences, rule);
    if (name.empty()) name = "vote_" + voting + (source == "finetuned" ? "" : "_" + source);
    described = {{"voting", voting}};
  } else {
    require_file(model_path, "model checkpoint");
    m.inputs.push_back(model_path);
    const Checkpoint ckpt = read_checkpoint(model_path);
    const DocumentModel<float> model = doc_model_from_checkpoint(ckpt);
    const FeatureKind repr = parse_feature_kind(
        ckpt.metadata.value("representation", std::string(feature_kind_name(cfg.representation))));
    const std::string feat_source = ckpt.metadata.value("feature_source", source);
    store = load_store(cfg.output_dir, feat_source, repr, split, cfg.strict_features, m.inputs);
    check_feature_width(store, model.config());
    if (ckpt.labels.names != store.labels.names) {
      throw std::runtime_error("label map of the model differs from the feature store's");
    }
    predictions = predict_documents(model, std::span<const SegmentSequence>(store.sequences));
    if (name.empty()) {
      name = fs::path(model_path).stem().string();
      if (name.starts_with("doc_")) name = name.substr(4);
    }
    described = {{"model", model_path}, {"model_kind", ckpt.model_kind}};
  }
  const auto labels = labels_of(store.sequences);
  const double acc = evaluate_accuracy(predictions, labels);
  const fs::path dir = cfg.output_dir / "eval" / name;
  fs::create_directories(dir);
  write_predictions(dir / "predictions.csv", store.sequences, predictions, store.labels);
  m.outputs.push_back(dir / "predictions.csv");
  json metrics = {{"name", name},
                  {"split", split_name(split)},
                  {"accuracy", acc},
                  {"documents", labels.size()},
                  {"source", described}};
  if (!edges.empty()) {
    const auto rows = bucketed_accuracy(predictions, labels, lengths_of(store.sequences), edges);
    write_bucket_csv(dir / "buckets.csv", rows);
    m.outputs.push_back(dir / "buckets.csv");
    metrics["buckets"] = rows.size();
  }
  {
    std::ofstream f(dir / "metrics.json");
    f << metrics.dump(2) << '\n';
  }
  m.outputs.push_back(dir / "metrics.json");
  m.config = to_json(cfg);
  m.write(cfg.output_dir, "evaluate_" + name);
  out << name << " " << split_name(split) << " accuracy " << acc << " (" << labels.size()
      << " documents)\n";
  return exit_ok;
}

int cmd_report(const fs::path& dir, Manifest& m, std::ostream& out) {
  if (!fs::is_directory(dir)) throw MissingInput("output directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::ostringstream csv;
  csv << "kind,name,accuracy,runs,complete\n";
  std::size_t checkpoints = 0, stores = 0;
  for (const auto& p : files) {
    const std::string fname = p.filename().string();
    if (fname == "run_report.json") {
      const RunReport r = read_run_report(p);
      csv << "run," << p.parent_path().filename().string() << ',' << std::setprecision(17)
          << r.mean_accuracy << ',' << r.runs.size() << ',' << (r.complete ? 1 : 0) << '\n';
      m.inputs.push_back(p);
    } else if (fname == "metrics.json") {
      const json j = json::parse(read_file(p));
      csv << "eval," << j.at("name").get<std::string>() << ',' << std::setprecision(17)
          << j.at("accuracy").get<double>() << ",1,1\n";
      m.inputs.push_back(p);
    } else if (p.extension() == ".ckpt") {
      const Checkpoint c = read_checkpoint(p);
      if (c.model_kind == "encoder") {
        (void)encoder_from_checkpoint(c);
      } else {
        (void)doc_model_from_checkpoint(c);
      }
      ++checkpoints;
      m.inputs.push_back(p);
    } else if (p.extension() == ".bin" && p.parent_path().filename() == "features") {
      (void)read_feature_store(p);
      ++stores;
      m.inputs.push_back(p);
    }
  }
  const fs::path summary = dir / "summary.csv";
  {
    std::ofstream f(summary);
    f << csv.str();
    if (!f) throw std::runtime_error("cannot write " + summary.string());
  }
  m.outputs.push_back(summary);
  m.write(dir, "report");
  out << csv.str();
  out << "reloaded " << checkpoints << " checkpoint(s) and " << stores << " feature store(s)\n";
  return exit_ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical long-document classification"};
  app.name("hierdoc");
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "print per-epoch training progress");

  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic JSONL corpus");
  std::string task, spec_path, gen_out;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::size_t> n_train, n_valid, n_test, length, repeat, seg_size, seg_stride;
  gen->add_option("--task", task, "distributed_evidence | order_sensitive | separable | null");
  gen->add_option("--spec", spec_path, "task spec JSON");
  gen->add_option("--out", gen_out, "output JSONL path")->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--num-train", n_train);
  gen->add_option("--num-valid", n_valid);
  gen->add_option("--num-test", n_test);
  gen->add_option("--length", length, "fixed document length");
  gen->add_option("--marker-repeat", repeat);
  gen->add_option("--segment-size", seg_size, "window size the markers are planted against");
  gen->add_option("--stride", seg_stride);

  auto* stats = app.add_subcommand("stats", "corpus statistics and length CDF");
  std::string stats_data, stats_out;
  stats->add_option("--data", stats_data, "JSONL dataset")->required();
  stats->add_option("--out", stats_out, "output directory")->required();

  auto* ft = app.add_subcommand("finetune-encoder", "segment-level encoder training");
  ConfigFlags ft_flags;
  ft_flags.add(ft);
  std::optional<std::size_t> ft_epochs;
  ft->add_option("--epochs", ft_epochs);

  auto* ex = app.add_subcommand("extract-features", "write per-segment H or P feature stores");
  ConfigFlags ex_flags;
  ex_flags.add(ex);
  std::string ex_repr, ex_source = "finetuned", ex_ckpt;
  ex->add_option("--repr", ex_repr, "H | P");
  ex->add_option("--source", ex_source, "finetuned | untrained");
  ex->add_option("--checkpoint", ex_ckpt, "encoder checkpoint (default <out>/encoder.ckpt)");

  auto* td = app.add_subcommand("train-doc", "train RoBERT or ToBERT on a feature store");
  ConfigFlags td_flags;
  td_flags.add(td);
  DocFlags td_doc;
  td_doc.add(td);
  std::optional<std::uint64_t> td_seed;
  std::optional<std::size_t> td_epochs;
  td->add_option("--seed", td_seed, "default: first config seed");
  td->add_option("--epochs", td_epochs);

  auto* ms = app.add_subcommand("multi-seed", "train-doc over every config seed");
  ConfigFlags ms_flags;
  ms_flags.add(ms);
  DocFlags ms_doc;
  ms_doc.add(ms);
  std::optional<std::size_t> ms_epochs;
  ms->add_option("--epochs", ms_epochs);

  auto* ev = app.add_subcommand("evaluate", "score a document model or a voting rule");
  ConfigFlags ev_flags;
  ev_flags.add(ev);
  std::string ev_model, ev_voting, ev_source = "finetuned", ev_split = "test", ev_buckets, ev_name;
  ev->add_option("--model", ev_model, "document model checkpoint");
  ev->add_option("--voting", ev_voting, "average | most_frequent (uses P features)");
  ev->add_option("--source", ev_source, "finetuned | untrained");
  ev->add_option("--split", ev_split, "train | valid | test");
  ev->add_option("--buckets", ev_buckets, "comma-separated length edges");
  ev->add_option("--name", ev_name);

  auto* rep = app.add_subcommand("report", "summarize runs and reload every artifact");
  std::string rep_dir;
  rep->add_option("-o,--out", rep_dir, "output directory")->required();

  std::vector<std::string> argv_store = {"hierdoc"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? exit_ok : exit_invalid_config;
  }

  Manifest m;
  m.argv = args;
  try {
    configure_threads();
    CLI::App* sub = app.get_subcommands().front();
    m.command = sub->get_name();
    if (sub == gen) {
      return cmd_gen_synthetic(task, spec_path, gen_out, gen_seed, n_train, n_valid, n_test,
                               length, repeat, seg_size, seg_stride, m, out);
    }
    if (sub == stats) return cmd_stats(stats_data, stats_out, m, out);
    if (sub == ft) return cmd_finetune(ft_flags, ft_epochs, verbose, m, out);
    if (sub == ex) return cmd_extract(ex_flags, ex_repr, ex_source, ex_ckpt, m, out);
    if (sub == td) return cmd_train_doc(td_flags, td_doc, td_seed, td_epochs, verbose, false, m, out);
    if (sub == ms) return cmd_train_doc(ms_flags, ms_doc, {}, ms_epochs, verbose, true, m, out);
    if (sub == ev) {
      return cmd_evaluate(ev_flags, ev_model, ev_voting, ev_source, ev_split, ev_buckets, ev_name,
                          m, out);
    }
    if (sub == rep) return cmd_report(rep_dir, m, out);
  } catch (const ConfigError& e) {
    err << "invalid config: " << e.what() << '\n';
    return exit_invalid_config;
  } catch (const MissingInput& e) {
    err << "missing input: " << e.what() << '\n';
    return exit_missing_input;
  } catch (const fs::filesystem_error& e) {
    err << "missing input: " << e.what() << '\n';
    return exit_missing_input;
  } catch (const TrainingDiverged& e) {
    err << "training aborted: " << e.what() << '\n';
    return exit_training_aborted;
  } catch (const NumericError& e) {
    err << "training aborted: " << e.what() << '\n';
    return exit_training_aborted;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_failure;
  }
  return exit_failure;
}

}  // namespace hierdoc
