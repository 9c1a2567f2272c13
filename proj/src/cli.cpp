/**
 * @file cli.cpp
 * @brief Subcommand wiring over the library. Each handler validates flags,
 *        loads inputs, calls one library operation and writes its outputs.
 */

#include "poly/cli.hpp"

#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>
#include <pthread.h>
#include <spdlog/spdlog.h>

#include "poly/error.hpp"
#include "poly/generate.hpp"
#include "poly/metrics.hpp"
#include "poly/midi_io.hpp"
#include "poly/service.hpp"
#include "poly/training.hpp"

namespace poly {

namespace fs = std::filesystem;

namespace {

/// Flag combinations that cannot work; reported with exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string in;
  std::string out;
  std::string ckpt;
  std::string config;
  std::string structure;
  std::string resume;
  std::string static_dir;
  std::string snapshot;
  std::string embedding = "pitch";
  int bars = 2;
  int n = 1;
  int steps = 5;
  int k = 2;
  int port = 8080;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> seed_b;
  std::optional<double> threshold;
  std::optional<std::int64_t> updates;
};

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("IoError", "cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("BadJson", path.string() + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const nlohmann::json& doc) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

/// The optional --config document, or an empty object.
nlohmann::json config_doc(const Flags& f) {
  if (f.config.empty()) return nlohmann::json::object();
  auto doc = read_json_file(f.config);
  if (!doc.is_object()) throw Error("InvalidConfig", "config file must hold a JSON object");
  return doc;
}

std::uint64_t resolve_seed(const Flags& f, const nlohmann::json& cfg) {
  if (f.seed) return *f.seed;
  return cfg.value("seed", std::uint64_t{1});
}

GenerationOptions resolve_generation(const Flags& f, const nlohmann::json& cfg) {
  GenerationOptions opts;
  if (cfg.contains("generation")) {
    const auto& g = cfg["generation"];
    opts.threshold = g.value("threshold", opts.threshold);
    opts.sample_tokens = g.value("sample_tokens", opts.sample_tokens);
    opts.token_seed = g.value("token_seed", opts.token_seed);
  }
  if (f.threshold) opts.threshold = *f.threshold;
  if (opts.threshold < 0.0 || opts.threshold > 1.0) throw UsageError("--threshold must lie in [0, 1]");
  return opts;
}

ModelConfig resolve_model_config(const Flags& f, const nlohmann::json& cfg) {
  auto doc = to_json(ModelConfig::for_bars(f.bars));
  if (cfg.contains("model")) doc.merge_patch(cfg["model"]);
  doc["n_bars"] = f.bars;
  return model_config_from_json(doc);
}

TrainingConfig resolve_training_config(const Flags& f, const nlohmann::json& cfg, std::uint64_t seed) {
  auto c = TrainingConfig::for_bars(f.bars);
  if (cfg.contains("training")) c = training_config_from_json(cfg["training"], c);
  c.seed = seed;
  if (f.updates) c.max_updates = *f.updates;
  c.validate();
  return c;
}

void write_generation(const fs::path& dir, const std::string& stem, const Generation& g) {
  write_file_bytes(dir / (stem + ".mid"), midi::write_smf(midi::from_pianoroll(g.roll)));
  write_json_file(dir / (stem + ".json"), to_json(g.roll));
}

fs::path prepare_dir(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("IoError", "cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

std::string stem_for(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%03d", prefix, i);
  return buf;
}

std::vector<fs::path> midi_inputs(const fs::path& in) {
  std::vector<fs::path> files;
  if (fs::is_directory(in)) {
    for (const auto& e : fs::recursive_directory_iterator(in)) {
      if (!e.is_regular_file()) continue;
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (ext == ".mid" || ext == ".midi") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(in)) {
    files.push_back(in);
  } else {
    throw Error("IoError", in.string() + " does not exist");
  }
  return files;
}

int cmd_preprocess(const Flags& f, std::ostream& out) {
  midi::ConversionOptions opts;
  opts.bars_per_sequence = f.bars;
  std::vector<Pianoroll> corpus;
  int used = 0, skipped = 0;
  const auto files = midi_inputs(f.in);
  for (const auto& path : files) {
    try {
      auto rolls = midi::to_pianoroll(midi::parse_smf(read_file_bytes(path)), opts);
      corpus.insert(corpus.end(), std::make_move_iterator(rolls.begin()), std::make_move_iterator(rolls.end()));
      ++used;
    } catch (const Error& e) {
      ++skipped;
      spdlog::warn("skipping {}: {} ({})", path.string(), e.what(), e.code());
    }
  }
  if (corpus.empty()) throw Error("NoQuantizableContent", "no sequences extracted from " + f.in);
  write_corpus_file(f.out, corpus);
  out << "preprocessed " << used << " files (" << skipped << " skipped) into " << corpus.size() << " sequences -> "
      << f.out << '\n';
  return kExitOk;
}

int cmd_train(const Flags& f, std::ostream& out) {
  const auto cfg = config_doc(f);
  const auto seed = resolve_seed(f, cfg);
  const auto mcfg = resolve_model_config(f, cfg);
  const auto tcfg = resolve_training_config(f, cfg, seed);

  const auto corpus = load_corpus(f.in);
  std::vector<ChordGraph> graphs;
  graphs.reserve(corpus.size());
  int truncated = 0;
  for (const auto& roll : corpus) {
    if (roll.n_bars() != mcfg.n_bars) {
      throw Error("ConfigMismatch", "corpus holds " + std::to_string(roll.n_bars()) + "-bar sequences, model expects " +
                                        std::to_string(mcfg.n_bars));
    }
    graphs.push_back(build_graph(roll, {.sigma = mcfg.sigma}));
    truncated += graphs.back().truncated_notes;
  }
  if (truncated > 0) spdlog::warn("{} notes dropped by chord overflow", truncated);
  auto split = split_dataset(std::move(graphs), seed);
  spdlog::info("split: {} train, {} validation, {} test", split.train.size(), split.validation.size(),
               split.test.size());

  Model model(mcfg);
  Trainer trainer(model, tcfg, std::move(split.train), std::move(split.validation));
  if (!f.resume.empty()) {
    trainer.resume(f.resume);
    spdlog::info("resumed at update {}", trainer.updates_done());
  }
  trainer.run([&](const HistoryRow& row) {
    const auto k = row.step + 1;
    if (k % 100 == 0 || k == tcfg.max_updates) {
      spdlog::info("update {} lr {:.3e} beta {} loss {:.5f} (S {:.5f} P {:.5f} D {:.5f} KL {:.5f})", k, row.lr,
                   row.loss.beta, row.loss.total, row.loss.structure_nll, row.loss.pitch_nll, row.loss.duration_nll,
                   row.loss.kl);
    }
    if (tcfg.checkpoint_every > 0 && k % tcfg.checkpoint_every == 0) trainer.save(f.out);
    if (tcfg.validate_every > 0 && k % tcfg.validate_every == 0) {
      if (const auto v = trainer.validation_loss()) spdlog::info("update {} validation loss {:.5f}", k, v->total);
    }
  });
  trainer.save(f.out);
  const fs::path history = f.out + ".history.csv";
  write_history_csv(history, trainer.history());
  out << "trained " << trainer.updates_done() << " updates -> " << f.out << " (history " << history.string() << ")\n";
  return kExitOk;
}

int cmd_generate(const Flags& f, std::ostream& out) {
  const auto cfg = config_doc(f);
  const auto opts = resolve_generation(f, cfg);
  const auto model = load_model(f.ckpt);
  const auto dir = prepare_dir(f.out);
  const auto gens = sample(model, f.n, resolve_seed(f, cfg), opts);
  for (std::size_t i = 0; i < gens.size(); ++i) {
    const auto stem = stem_for("sample", static_cast<int>(i));
    write_generation(dir, stem, gens[i]);
    out << (dir / (stem + ".mid")).string() << (gens[i].silent ? " (silent)" : "") << '\n';
  }
  return kExitOk;
}

int cmd_interpolate(const Flags& f, std::ostream& out) {
  const auto cfg = config_doc(f);
  const auto opts = resolve_generation(f, cfg);
  const auto model = load_model(f.ckpt);
  const auto seed_a = resolve_seed(f, cfg);
  const auto seed_b = f.seed_b.value_or(seed_a + 1);
  const int d = model.config().d;
  const auto path = interpolate(model, random_latent(d, seed_a), random_latent(d, seed_b), f.steps, opts);
  const auto dir = prepare_dir(f.out);
  for (std::size_t i = 0; i < path.size(); ++i) {
    const auto stem = stem_for("interp", static_cast<int>(i));
    write_generation(dir, stem, path[i]);
    out << (dir / (stem + ".mid")).string() << '\n';
  }
  return kExitOk;
}

int cmd_condition(const Flags& f, std::ostream& out) {
  const auto cfg = config_doc(f);
  const auto opts = resolve_generation(f, cfg);
  const auto model = load_model(f.ckpt);
  const auto structure = structure_from_json(read_json_file(f.structure));
  if (structure.n_bars() != model.config().n_bars) {
    throw Error("InvalidStructure", "structure has " + std::to_string(structure.n_bars()) + " bars, model expects " +
                                        std::to_string(model.config().n_bars));
  }
  const auto z = random_latent(model.config().d, resolve_seed(f, cfg));
  const auto g = conditioned_generate(model, z, structure, opts);
  const auto dir = prepare_dir(f.out);
  write_generation(dir, "conditioned", g);
  out << (dir / "conditioned.mid").string() << (g.silent ? " (silent)" : "") << '\n';
  return kExitOk;
}

int cmd_metrics(const Flags& f, std::ostream& out) {
  const auto corpus = load_corpus(f.in);
  const auto r = report(corpus);
  const auto doc = to_json(r);
  if (!f.out.empty()) write_json_file(f.out, doc);
  out << doc.dump(2) << '\n';
  spdlog::info("\n{}", format_table(r));
  return kExitOk;
}

int cmd_pca(const Flags& f, std::ostream& out) {
  const auto model = load_model(f.ckpt);
  auto [rows, labels] = embedding_rows(model, embedding_kind_from_string(f.embedding));
  const auto projection = embedding_pca(rows, f.k, std::move(labels));
  if (projection.degenerate) spdlog::warn("embedding has rank below k; fewer components returned");
  write_pca_csv(f.out, projection);
  out << "wrote " << projection.coordinates.rows() << " rows x " << projection.coordinates.cols() << " components -> "
      << f.out << '\n';
  for (std::size_t c = 0; c < projection.explained.size(); ++c) {
    out << "  c" << (c + 1) << " explained " << projection.explained[c] << '\n';
  }
  return kExitOk;
}

int cmd_serve(const Flags& f, std::ostream& out) {
  const auto cfg = config_doc(f);
  ServiceOptions opts;
  opts.port = f.port;
  opts.static_dir = f.static_dir;
  opts.snapshot_path = f.snapshot;
  opts.threshold = resolve_generation(f, cfg).threshold;
  std::shared_ptr<const Model> model;
  if (!f.ckpt.empty()) {
    model = std::make_shared<const Model>(load_model(f.ckpt));
    opts.checkpoint_label = fs::path(f.ckpt).filename().string();
  } else {
    spdlog::warn("no --ckpt given; generation routes will answer 503");
  }
  Service service(model, opts);

  // SIGINT / SIGTERM stop the server so the session snapshot gets written.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  std::thread watcher([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    if (sig != 0) service.stop();
  });
  out << "serving on port " << f.port << '\n' << std::flush;
  const bool ok = service.listen();
  if (!ok) {
    pthread_kill(watcher.native_handle(), SIGTERM);
    watcher.join();
    throw Error("BindFailed", "cannot listen on port " + std::to_string(f.port));
  }
  watcher.join();
  return kExitOk;
}

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file; flags override its values")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Random seed (default 1)");
}

void add_generation(CLI::App* cmd, Flags& f) {
  cmd->add_option("--ckpt", f.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  cmd->add_option("--threshold", f.threshold, "Structure binarization threshold (default 0.5)");
  add_common(cmd, f);
}

}  // namespace

void configure_logging_from_env() {
  const char* env = std::getenv("POLY_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  configure_logging_from_env();
  Flags f;
  CLI::App app{"Chord-graph music VAE: data preparation, training and generation", "poly"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  auto* pre = app.add_subcommand("preprocess", "Convert MIDI files into a pianoroll corpus");
  pre->add_option("--in", f.in, "MIDI file or directory (searched recursively)")->required();
  pre->add_option("--out", f.out, "Corpus file to write")->required();
  pre->add_option("--bars", f.bars, "Bars per sequence")->check(CLI::IsMember({2, 16}))->capture_default_str();

  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  train->add_option("--in", f.in, "Corpus file or pianoroll JSON directory")->required();
  train->add_option("--out", f.out, "Checkpoint to write")->required();
  train->add_option("--bars", f.bars, "Bars per sequence")->check(CLI::IsMember({2, 16}))->capture_default_str();
  train->add_option("--updates", f.updates, "Number of parameter updates (default from config)");
  train->add_option("--resume", f.resume, "Continue from a training checkpoint")->check(CLI::ExistingFile);
  add_common(train, f);

  auto* gen = app.add_subcommand("generate", "Sample sequences from random latents");
  add_generation(gen, f);
  gen->add_option("--n", f.n, "Number of sequences")->check(CLI::Range(1, 100000))->capture_default_str();
  gen->add_option("--out", f.out, "Output directory")->required();

  auto* interp = app.add_subcommand("interpolate", "Decode a linear path between two random latents");
  add_generation(interp, f);
  interp->add_option("--seed-b", f.seed_b, "Seed of the second endpoint (default seed + 1)");
  interp->add_option("--steps", f.steps, "Points on the path, endpoints included")
      ->check(CLI::Range(2, 1000))
      ->capture_default_str();
  interp->add_option("--out", f.out, "Output directory")->required();

  auto* cond = app.add_subcommand("condition", "Decode content for a given structure grid");
  add_generation(cond, f);
  cond->add_option("--structure", f.structure, "Structure JSON (bars x 4 x 32 of 0/1)")
      ->required()
      ->check(CLI::ExistingFile);
  cond->add_option("--out", f.out, "Output directory")->required();

  auto* met = app.add_subcommand("metrics", "EB, UPC and DP of a corpus");
  met->add_option("--in,--corpus", f.in, "Corpus file or pianoroll JSON directory")->required();
  met->add_option("--out", f.out, "Also write the JSON report here");

  auto* pca = app.add_subcommand("pca", "Project learned embeddings onto principal components");
  pca->add_option("--ckpt", f.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  pca->add_option("--embedding", f.embedding, "pitch, drum_pitch, duration or chord")
      ->check(CLI::IsMember({"pitch", "drum_pitch", "duration", "chord"}))
      ->capture_default_str();
  pca->add_option("--k", f.k, "Number of components")->check(CLI::PositiveNumber)->capture_default_str();
  pca->add_option("--out", f.out, "CSV file to write")->required();

  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  serve->add_option("--ckpt", f.ckpt, "Model checkpoint (routes answer 503 without one)")->check(CLI::ExistingFile);
  serve->add_option("--port", f.port, "TCP port")->check(CLI::Range(1, 65535))->capture_default_str();
  serve->add_option("--static", f.static_dir, "Directory served under /");
  serve->add_option("--snapshot", f.snapshot, "Session snapshot file (restored at start, written at stop)");
  serve->add_option("--threshold", f.threshold, "Structure binarization threshold (default 0.5)");
  serve->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "ERROR:Usage:" << e.what() << '\n';
    err << "Run with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (pre->parsed()) return cmd_preprocess(f, out);
    if (train->parsed()) return cmd_train(f, out);
    if (gen->parsed()) return cmd_generate(f, out);
    if (interp->parsed()) return cmd_interpolate(f, out);
    if (cond->parsed()) return cmd_condition(f, out);
    if (met->parsed()) return cmd_metrics(f, out);
    if (pca->parsed()) return cmd_pca(f, out);
    if (serve->parsed()) return cmd_serve(f, out);
  } catch (const UsageError& e) {
    err << "ERROR:Usage:" << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    err << "ERROR:" << e.code() << ':' << e.what() << '\n';
    return e.code() == "InvalidConfig" ? kExitUsage : kExitData;
  } catch (const std::exception& e) {
    err << "ERROR:Internal:" << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace poly
