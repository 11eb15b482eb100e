#include "commands.hpp"

#include <CLI11.hpp>

#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "dinocell/adapters.hpp"
#include "dinocell/binary_io.hpp"
#include "dinocell/dataset.hpp"
#include "dinocell/dino.hpp"
#include "dinocell/embedding.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/evaluation.hpp"
#include "dinocell/head.hpp"
#include "dinocell/synth.hpp"
#include "run_config.hpp"

#ifndef DINOCELL_VERSION
#define DINOCELL_VERSION "0.0.0"
#endif

namespace dinocell::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string tool_version() { return DINOCELL_VERSION; }

namespace {

struct Common {
  std::string config;
  std::string out;
  std::string manifest;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_manifest) {
  cmd->add_option("--config", c.config, "Run config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "Output directory")->required();
  cmd->add_flag("--force", c.force, "Write into an existing output directory");
  if (needs_manifest) cmd->add_option("--manifest", c.manifest, "Dataset manifest (overrides dataset.manifest)");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (!c.manifest.empty()) cfg.manifest = c.manifest;
  return cfg;
}

void prepare_out(const fs::path& out, bool force) {
  if (fs::exists(out) && !fs::is_directory(out)) throw IoError(out.string() + " exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out) && !force) {
    throw IoError("output directory " + out.string() + " is not empty (use --force)");
  }
  fs::create_directories(out);
}

void write_json(const fs::path& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

void write_run_config(const fs::path& out, const std::string& command, const RunConfig& cfg) {
  write_json(out / "run_config.json",
             {{"tool", kToolName}, {"version", tool_version()}, {"command", command}, {"config", to_json(cfg)}});
}

DatasetManifest require_manifest(const RunConfig& cfg) {
  if (cfg.manifest.empty()) throw ConfigError("no dataset manifest given (--manifest or dataset.manifest)");
  if (!fs::exists(cfg.manifest)) throw IoError("dataset manifest not found: " + cfg.manifest.string());
  return load_manifest(cfg.manifest);
}

void log(const std::string& tag, const std::string& msg) { std::cerr << "[" << tag << "] " << msg << "\n"; }

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

// ---- gen-data

struct GenData {
  Common common;
  std::optional<std::size_t> n, size, channels, classes;
  std::optional<std::uint64_t> seed;
  std::optional<double> multi_label, noise;
  std::optional<std::string> name;
};

void gen_data(const GenData& g) {
  RunConfig cfg = resolve(g.common);
  SynthSpec& s = cfg.synth;
  if (g.n) s.n_images = *g.n;
  if (g.size) s.height = s.width = *g.size;
  if (g.channels) s.channels = *g.channels;
  if (g.classes) s.classes = *g.classes;
  if (g.seed) s.seed = *g.seed;
  if (g.multi_label) s.multi_label_probability = *g.multi_label;
  if (g.noise) s.noise = *g.noise;
  if (g.name) s.name = *g.name;
  validate_synth_spec(s);
  const fs::path out = g.common.out;
  if (fs::exists(out) && !g.common.force) {
    throw IoError("output directory " + out.string() + " already exists (use --force)");
  }
  log("gen-data", "generating " + std::to_string(s.n_images) + " images, " + std::to_string(s.classes) +
                      " classes, seed " + std::to_string(s.seed));
  auto ds = generate_synthetic_dataset(s);
  auto manifest = write_dataset(out, ds, g.common.force);
  cfg.manifest = out / "manifest.json";
  write_run_config(out, "gen-data", cfg);
  std::cout << "wrote " << manifest.size() << " images to " << out.string() << "\n";
}

// ---- pretrain

struct Pretrain {
  Common common;
  std::optional<std::size_t> epochs, stop_after;
  std::optional<std::uint64_t> seed;
  std::string resume;
};

void pretrain_cmd(const Pretrain& p) {
  RunConfig cfg = resolve(p.common);
  if (p.epochs) cfg.dino.epochs = *p.epochs;
  if (p.seed) cfg.dino.seed = *p.seed;
  validate(cfg);
  const auto manifest = require_manifest(cfg);

  PretrainOptions opt;
  opt.split_seed = cfg.split_seed;
  opt.holdout_fraction = cfg.holdout_fraction;
  const std::size_t in_ch = cfg.dino.backbone.in_channels;
  if (!cfg.pretrain_input_map.empty()) {
    opt.input_map = parse_channel_map(cfg.pretrain_input_map, in_ch, manifest.channels);
  } else if (manifest.channels.size() != in_ch) {
    throw ConfigError("dataset has " + std::to_string(manifest.channels.size()) +
                      " channels but the backbone expects " + std::to_string(in_ch) +
                      "; set pretrain.input_map");
  }
  std::vector<std::string> kept_log;
  const fs::path out = p.common.out;
  const fs::path log_path = out / "log.jsonl";
  if (!p.resume.empty()) {
    DinoState state = load_dino(p.resume);
    // resuming into its own run directory is the normal case
    const bool same_dir = fs::exists(out) && fs::equivalent(fs::absolute(p.resume).parent_path(), out);
    prepare_out(out, p.common.force || same_dir);
    if (fs::exists(log_path)) {
      std::istringstream lines(io::read_text(log_path));
      for (std::string line; std::getline(lines, line);) {
        if (!line.empty() && json::parse(line).value("epoch", std::size_t{0}) <= state.epoch) kept_log.push_back(line);
      }
    }
    log("pretrain", "resuming at epoch " + std::to_string(state.epoch) + ", step " + std::to_string(state.step));
    opt.resume = std::move(state);
  } else {
    prepare_out(out, p.common.force);
  }
  opt.stop_after_epoch = p.stop_after;

  std::ofstream log_file(log_path, std::ios::trunc);
  if (!log_file) throw IoError("cannot write " + log_path.string());
  for (const auto& line : kept_log) log_file << line << "\n";
  const double ln_k = std::log(static_cast<double>(cfg.dino.out_dim));
  opt.on_epoch = [&](const EpochLog& e) {
    log_file << to_json(e).dump() << "\n";
    log_file.flush();
    log("pretrain", "epoch " + std::to_string(e.epoch) + "/" + std::to_string(cfg.dino.epochs) + " loss " +
                        fixed(e.mean_loss) + " teacher entropy " + fixed(e.teacher_entropy / ln_k, 3) +
                        " lnK lambda " + fixed(e.lambda, 5));
  };
  write_run_config(out, "pretrain", cfg);
  auto result = pretrain(manifest, cfg.dino, std::move(opt));
  save_dino(out / "dino.ckpt", result.state);
  save_vit(out / "teacher.vitw", result.state.teacher);
  std::cout << "pretrained " << result.state.epoch << " epochs; checkpoint " << (out / "dino.ckpt").string() << "\n";
}

// ---- embed

struct Embed {
  Common common;
  std::optional<std::string> backbone, adapter, weights_label, model;
  std::vector<std::string> map;
  std::optional<std::size_t> resize, broadcast_width;
};

struct LoadedBackbone {
  ViTParams params;
  std::string weights;
  std::size_t epochs = 0;
};

LoadedBackbone load_backbone(const RunConfig& cfg) {
  if (cfg.backbone == "random") {
    return {init_vit(cfg.dino.backbone), "scratch", 0};
  }
  const auto bytes = io::read_file(cfg.backbone);
  const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
  if (magic == "DINO") {
    auto state = decode_dino(bytes);
    return {std::move(state.teacher), "pretrained", state.epoch};
  }
  if (magic == "VITW") return {decode_vit(bytes), "pretrained", 0};
  throw FormatError(cfg.backbone + " is neither a DINO checkpoint nor a VITW backbone file");
}

void embed_cmd(const Embed& e) {
  RunConfig cfg = resolve(e.common);
  if (e.backbone) cfg.backbone = *e.backbone;
  if (e.adapter) cfg.adapter = *e.adapter;
  if (e.weights_label) cfg.weights_label = *e.weights_label;
  if (e.model) cfg.model_label = *e.model;
  if (!e.map.empty()) cfg.adapter_map = e.map;
  if (e.resize) cfg.resize_px = *e.resize;
  if (e.broadcast_width) cfg.broadcast_width = *e.broadcast_width;
  validate(cfg);
  const auto manifest = require_manifest(cfg);
  auto bb = load_backbone(cfg);
  const std::size_t in_ch = bb.params.config.in_channels;

  AdapterSpec adapter;
  if (cfg.adapter == "replication") {
    adapter = AdapterSpec::replication(cfg.broadcast_width);
  } else if (!cfg.adapter_map.empty()) {
    adapter = AdapterSpec::mapping(parse_channel_map(cfg.adapter_map, in_ch, manifest.channels));
  } else if (manifest.channels.size() == in_ch) {
    adapter = AdapterSpec::mapping(identity_map(in_ch));
  } else {
    throw ConfigError("backbone expects " + std::to_string(in_ch) + " channels, dataset has " +
                      std::to_string(manifest.channels.size()) +
                      "; pass --map (e.g. protein:0 nucleus:2) or use --adapter replication");
  }
  prepare_out(e.common.out, e.common.force);
  write_run_config(e.common.out, "embed", cfg);

  ExtractOptions opt;
  opt.batch_size = cfg.embed_batch;
  opt.resize_px = cfg.resize_px;
  log("embed", adapter.name() + " adapter over " + std::to_string(manifest.size()) + " images");
  auto m = extract_embeddings(manifest, bb.params, adapter, opt);
  m.provenance["weights"] = cfg.weights_label.empty() ? bb.weights : cfg.weights_label;
  m.provenance["dino_epochs"] = bb.epochs;
  m.provenance["model"] = cfg.model_label;
  save_embeddings(fs::path(e.common.out) / "embeddings.emb1", m);
  std::cout << "embedded " << m.rows << " images into " << m.cols << " dims\n";
}

// ---- shared by train-head and crossval

struct LoadedEmbeddings {
  EmbeddingMatrix matrix;
  std::string sha256;
};

LoadedEmbeddings load_checked_embeddings(const fs::path& path, const DatasetManifest& manifest) {
  const auto bytes = io::read_file(path);
  LoadedEmbeddings out{decode_embeddings(bytes), io::sha256_hex(bytes)};
  if (out.matrix.rows != manifest.size()) {
    throw ShapeError(path.string() + " has " + std::to_string(out.matrix.rows) + " rows, manifest has " +
                     std::to_string(manifest.size()) + " images");
  }
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    if (out.matrix.ids[i] != manifest.records[i].id) {
      throw ConfigError(path.string() + " row " + std::to_string(i) + " is image '" + out.matrix.ids[i] +
                        "', manifest has '" + manifest.records[i].id + "'");
    }
  }
  return out;
}

// ---- train-head

struct TrainHead {
  Common common;
  std::string embeddings;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

void train_head_cmd(const TrainHead& t) {
  RunConfig cfg = resolve(t.common);
  if (t.epochs) cfg.head.epochs = *t.epochs;
  if (t.seed) cfg.head.seed = *t.seed;
  validate(cfg);
  const auto manifest = require_manifest(cfg);
  cfg.head.classes = manifest.classes.size();
  const auto emb = load_checked_embeddings(t.embeddings, manifest);
  const auto labels = manifest.all_labels(cfg.min_grade);
  const auto split = holdout_split(manifest.size(), cfg.holdout_fraction, cfg.split_seed);
  prepare_out(t.common.out, t.common.force);
  write_run_config(t.common.out, "train-head", cfg);

  const std::size_t d = emb.matrix.cols;
  const auto stats = fit_standardizer(gather(emb.matrix.values, d, split.train), d);
  const auto xt = apply_standardizer(stats, gather(emb.matrix.values, d, split.train));
  const auto xh = apply_standardizer(stats, gather(emb.matrix.values, d, split.holdout));
  std::vector<LabelVector> yt, yh;
  for (auto i : split.train) yt.push_back(labels[i]);
  for (auto i : split.holdout) yh.push_back(labels[i]);

  std::ofstream log_file(fs::path(t.common.out) / "log.jsonl", std::ios::trunc);
  auto res = train_head({xt, yt}, {xh, yh}, d, cfg.head, [&](const HeadEpochLog& e) {
    log_file << to_json(e).dump() << "\n";
    if (e.epoch % 50 == 0 || e.epoch == cfg.head.epochs) {
      log("train-head", "epoch " + std::to_string(e.epoch) + " loss " + fixed(e.train_loss) + " holdout F1 " +
                            fixed(e.val_macro_f1));
    }
  });
  res.head.stats = stats;
  save_head(fs::path(t.common.out) / "head.ckpt", res.head);
  const auto pred = predict(res.head, xh, cfg.head.threshold);
  const auto f1 = f1_per_class(confusion(yh, pred));
  write_json(fs::path(t.common.out) / "metrics.json", {{"holdout_rows", yh.size()},
                                                       {"holdout_macro_f1", macro_f1(f1)},
                                                       {"holdout_f1_per_class", f1},
                                                       {"classes", manifest.classes},
                                                       {"embedding_sha256", emb.sha256}});
  std::cout << "holdout macro F1 " << fixed(macro_f1(f1)) << "\n";
}

// ---- crossval / report

void write_report_set(const fs::path& out, const std::vector<CVReport>& reports) {
  json all = json::array();
  for (const auto& r : reports) all.push_back(to_json(r));
  write_json(out / "reports.json", all);
  io::write_text(out / "table.txt", render_table(reports));
  io::write_text(out / "figure.svg", render_svg(reports));
}

struct Crossval {
  Common common;
  std::vector<std::string> embeddings;
  std::optional<std::size_t> folds, epochs;
  std::optional<std::uint64_t> seed;
};

void crossval_cmd(const Crossval& x) {
  RunConfig cfg = resolve(x.common);
  if (x.folds) cfg.folds = *x.folds;
  if (x.seed) cfg.fold_seed = *x.seed;
  if (x.epochs) cfg.head.epochs = *x.epochs;
  validate(cfg);
  const auto manifest = require_manifest(cfg);
  cfg.head.classes = manifest.classes.size();
  std::vector<LoadedEmbeddings> inputs;
  for (const auto& path : x.embeddings) inputs.push_back(load_checked_embeddings(path, manifest));
  const auto labels = manifest.all_labels(cfg.min_grade);
  const auto split = holdout_split(manifest.size(), cfg.holdout_fraction, cfg.split_seed);
  const fs::path out = x.common.out;
  prepare_out(out, x.common.force);
  write_run_config(out, "crossval", cfg);

  std::ofstream log_file(out / "log.jsonl", std::ios::trunc);
  std::vector<CVReport> reports;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto& m = inputs[k].matrix;
    CrossvalOptions opt;
    opt.folds = cfg.folds;
    opt.fold_seed = cfg.fold_seed;
    opt.row = {m.provenance.value("weights", std::string("unknown")), m.provenance.value("model", cfg.model_label),
               m.provenance.contains("adapter") ? m.provenance["adapter"].value("kind", std::string("?")) : "?",
               m.provenance.value("dino_epochs", std::size_t{0})};
    opt.provenance = {{"embedding_sha256", inputs[k].sha256},
                      {"backbone_sha256", m.provenance.value("backbone_sha256", std::string{})},
                      {"dataset_hash", m.provenance.value("dataset_hash", std::string{})},
                      {"split_seed", cfg.split_seed},
                      {"holdout_fraction", cfg.holdout_fraction},
                      {"min_grade", cfg.min_grade}};
    opt.on_epoch = [&](std::size_t fold, const HeadEpochLog& e) {
      auto j = to_json(e);
      j["input"] = k;
      j["fold"] = fold;
      log_file << j.dump() << "\n";
    };
    log("crossval", "input " + std::to_string(k + 1) + "/" + std::to_string(inputs.size()) + ": " +
                        opt.row.weights + " / " + opt.row.approach + ", " + std::to_string(m.cols) + " dims");
    auto report = crossval_run(m.values, m.cols, labels, split, cfg.head, opt);
    const auto fold_table = render_fold_table(report);
    std::cout << opt.row.weights << " / " << opt.row.approach << "\n" << fold_table << "\n";
    io::write_text(out / ("folds_" + std::to_string(k + 1) + ".txt"), fold_table);
    write_json(out / ("report_" + std::to_string(k + 1) + ".json"), to_json(report));
    reports.push_back(std::move(report));
  }
  write_report_set(out, reports);
  std::cout << render_table(reports);
}

struct Report {
  Common common;
  std::vector<std::string> inputs;
};

void report_cmd(const Report& r) {
  RunConfig cfg = resolve(r.common);
  std::vector<CVReport> reports;
  for (const auto& path : r.inputs) {
    json j;
    try {
      j = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
      throw FormatError(path + " is not valid JSON: " + e.what());
    }
    if (j.is_array()) {
      for (const auto& item : j) reports.push_back(cv_report_from_json(item));
    } else {
      reports.push_back(cv_report_from_json(j));
    }
  }
  if (reports.empty()) throw ConfigError("report: no cross-validation results given");
  const fs::path out = r.common.out;
  prepare_out(out, r.common.force);
  write_run_config(out, "report", cfg);
  write_report_set(out, reports);
  std::cout << render_table(reports);
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Self-supervised ViT embeddings for multi-channel cell images", kToolName};
  app.set_version_flag("--version", tool_version());
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic labelled dataset");
  add_common(g, gen.common, false);
  g->add_option("--n", gen.n, "Number of images");
  g->add_option("--size", gen.size, "Image side in pixels");
  g->add_option("--channels", gen.channels, "2 (protein, nucleus) or 4");
  g->add_option("--classes", gen.classes, "Number of localization classes");
  g->add_option("--seed", gen.seed);
  g->add_option("--multi-label", gen.multi_label, "Chance of a second localization");
  g->add_option("--noise", gen.noise);
  g->add_option("--name", gen.name);

  Pretrain pre;
  auto* p = app.add_subcommand("pretrain", "DINO self-supervised pretraining");
  add_common(p, pre.common, true);
  p->add_option("--epochs", pre.epochs);
  p->add_option("--seed", pre.seed);
  p->add_option("--resume", pre.resume, "Continue from a DINO checkpoint")->check(CLI::ExistingFile);
  p->add_option("--stop-after", pre.stop_after, "Stop after this epoch (schedules still span --epochs)");

  Embed emb;
  auto* e = app.add_subcommand("embed", "Extract frozen backbone embeddings");
  add_common(e, emb.common, true);
  e->add_option("--backbone", emb.backbone, "'random', a DINO checkpoint or a VITW file");
  e->add_option("--adapter", emb.adapter, "mapping or replication");
  e->add_option("--map", emb.map, "Channel map entries, e.g. protein:0 nucleus:2");
  e->add_option("--broadcast-width", emb.broadcast_width);
  e->add_option("--weights-label", emb.weights_label);
  e->add_option("--model", emb.model);
  e->add_option("--resize", emb.resize, "Resize side before embedding (0 = native)");

  TrainHead th;
  auto* t = app.add_subcommand("train-head", "Train the classifier head on the training split");
  add_common(t, th.common, true);
  t->add_option("--embeddings", th.embeddings)->required()->check(CLI::ExistingFile);
  t->add_option("--epochs", th.epochs);
  t->add_option("--seed", th.seed);

  Crossval cv;
  auto* c = app.add_subcommand("crossval", "k-fold cross-validation of the classifier head");
  add_common(c, cv.common, true);
  c->add_option("--embeddings", cv.embeddings, "One or more EMB1 files")->required()->check(CLI::ExistingFile);
  c->add_option("--folds", cv.folds);
  c->add_option("--seed", cv.seed, "Fold seed");
  c->add_option("--epochs", cv.epochs, "Head epochs");

  Report rep;
  auto* r = app.add_subcommand("report", "Render a comparison table and error-bar chart");
  add_common(r, rep.common, false);
  r->add_option("--inputs", rep.inputs, "CV report JSON files")->required()->check(CLI::ExistingFile);

  std::vector<const char*> argv{kToolName};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (g->parsed()) gen_data(gen);
    if (p->parsed()) pretrain_cmd(pre);
    if (e->parsed()) embed_cmd(emb);
    if (t->parsed()) train_head_cmd(th);
    if (c->parsed()) crossval_cmd(cv);
    if (r->parsed()) report_cmd(rep);
  } catch (const UserError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "internal error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace dinocell::cli
