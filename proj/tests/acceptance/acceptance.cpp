// Runs the acceptance checks and prints one PASS/FAIL line per criterion.
//   dinocell_acceptance [--work DIR] [--only 1,2,...] [--expect-fail 6,...]
// Artifacts go to a temporary directory unless --work is given.
// Exit status is 0 when every criterion passes or fails only where listed in
// --expect-fail.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "commands.hpp"
#include "dinocell/adapters.hpp"
#include "dinocell/binary_io.hpp"
#include "dinocell/dino.hpp"
#include "dinocell/embedding.hpp"
#include "dinocell/errors.hpp"
#include "dinocell/evaluation.hpp"
#include "dinocell/head.hpp"
#include "dinocell/metrics.hpp"
#include "dinocell/synth.hpp"
#include "gradcheck.hpp"
#include "run_config.hpp"
#include "temp_dir.hpp"

#ifndef DINOCELL_DESK_CONFIG
#error "DINOCELL_DESK_CONFIG must point at configs/desk.json"
#endif

namespace dinocell::acceptance {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt_num(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

void note(const std::string& msg) {
  std::fprintf(stderr, "  .. %s\n", msg.c_str());
  std::fflush(stderr);
}

// CLI chatter goes to stderr so stdout holds only the verdict lines.
int run_cli(const std::vector<std::string>& args) {
  auto* saved = std::cout.rdbuf(std::cerr.rdbuf());
  int rc = 2;
  try {
    rc = cli::run(args);
  } catch (...) {
    std::cout.rdbuf(saved);
    throw;
  }
  std::cout.rdbuf(saved);
  return rc;
}

// Shared desk pipeline. Each stage runs once through the CLI and is reused by
// later criteria; stage wall times are kept so the end-to-end budget can be
// charged to criterion 6 no matter which criterion triggered the stage.
class Desk {
 public:
  explicit Desk(fs::path root) : root_(std::move(root)) {}

  fs::path path(const std::string& rel) const { return root_ / rel; }
  std::string s(const std::string& rel) const { return path(rel).string(); }

  void cli(std::vector<std::string> args, const std::string& stage) {
    auto t0 = Clock::now();
    note("dinocell " + args.front() + " (" + stage + ")");
    const int rc = run_cli(args);
    stage_seconds_[stage] += seconds_since(t0);
    if (rc != 0) throw Error("dinocell " + args.front() + " exited with " + std::to_string(rc));
  }

  std::vector<std::string> with_config(std::vector<std::string> args) const {
    args.insert(args.end(), {"--config", DINOCELL_DESK_CONFIG, "--manifest", s("data/manifest.json")});
    return args;
  }

  void data() {
    if (fs::exists(path("data/manifest.json"))) return;
    cli({"gen-data", "--config", DINOCELL_DESK_CONFIG, "--out", s("data")}, "gen-data");
  }

  fs::path pretrained() {
    data();
    if (!fs::exists(path("pretrain/dino.ckpt"))) cli(with_config({"pretrain", "--out", s("pretrain")}), "pretrain");
    return path("pretrain/dino.ckpt");
  }

  // weights: "pretrained" or "scratch"; adapter: "mapping" or "replication"
  fs::path embeddings(const std::string& weights, const std::string& adapter) {
    data();
    const std::string dir = "emb-" + weights + "-" + adapter;
    if (!fs::exists(path(dir + "/embeddings.emb1"))) {
      const std::string backbone = weights == "pretrained" ? pretrained().string() : "random";
      cli(with_config({"embed", "--backbone", backbone, "--adapter", adapter, "--out", s(dir)}),
          "embed-" + weights + "-" + adapter);
    }
    return path(dir + "/embeddings.emb1");
  }

  CVReport crossval(const std::string& weights, const std::string& adapter) {
    const std::string dir = "cv-" + weights + "-" + adapter;
    if (!fs::exists(path(dir + "/report_1.json"))) {
      auto emb = embeddings(weights, adapter);
      cli(with_config({"crossval", "--embeddings", emb.string(), "--out", s(dir)}),
          "crossval-" + weights + "-" + adapter);
    }
    return cv_report_from_json(json::parse(io::read_text(path(dir + "/report_1.json"))));
  }

  double seconds(const std::vector<std::string>& stages) const {
    double total = 0.0;
    for (const auto& st : stages) {
      if (auto it = stage_seconds_.find(st); it != stage_seconds_.end()) total += it->second;
    }
    return total;
  }

 private:
  fs::path root_;
  std::map<std::string, double> stage_seconds_;
};

cli::RunConfig desk_config() { return cli::load_run_config(DINOCELL_DESK_CONFIG); }

// ---------------------------------------------------------------------------
// 1

Outcome c1_acknowledge(Desk&) {
  // The published table cells need the real image corpora and full-size
  // pretraining. Nothing here tries to match them; the numbered checks below
  // are the stand-in. What we can check is that our report speaks the same
  // "mean (± std)" format as the table.
  const std::string cell = format_mean_std(0.81234, 0.00567);
  const bool ok = cell == "0.8123 (± 0.0057)";
  return {ok, "published table values are not desk-reproducible (real corpora + full-scale pretraining "
              "required); property suite substitutes; report cell format '" + cell + "'"};
}

// ---------------------------------------------------------------------------
// 2

using testing::gradcheck;
using testing::random_projection;
using testing::random_tensor;

Outcome c2_gradients(Desk&) {
  constexpr double kTol = 1e-2;
  auto t0 = Clock::now();
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    std::mt19937_64 rng(seed);
    {
      auto a = random_tensor({4, 6}, rng), b = random_tensor({6, 5}, rng), c = random_tensor({3, 6}, rng);
      record("matmul", gradcheck([&] { return random_projection(ops::matmul(a, b), seed); }, {a, b}));
      record("matmul_bt", gradcheck([&] { return random_projection(ops::matmul_bt(a, c), seed); }, {a, c}));
    }
    {
      auto x = random_tensor({2, 3, 5}, rng), w = random_tensor({5, 4}, rng), b = random_tensor({4}, rng);
      record("linear", gradcheck([&] { return random_projection(ops::linear(x, w, b), seed); }, {x, w, b}));
    }
    {
      auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
      record("add", gradcheck([&] { return random_projection(ops::add(a, b), seed); }, {a, b}));
      record("sub", gradcheck([&] { return random_projection(ops::sub(a, b), seed); }, {a, b}));
      record("mul", gradcheck([&] { return random_projection(ops::mul(a, b), seed); }, {a, b}));
      record("scale", gradcheck([&] { return random_projection(ops::scale(a, -1.7f), seed); }, {a}));
      record("sum", gradcheck([&] { return ops::sum(ops::mul(a, a)); }, {a}));
      record("mean", gradcheck([&] { return ops::mean(ops::mul(a, b)); }, {a, b}));
      record("reshape", gradcheck([&] { return random_projection(ops::reshape(a, {2, 6}), seed); }, {a}));
    }
    {
      auto x = random_tensor({2, 3, 4}, rng), y = random_tensor({3, 4}, rng), tok = random_tensor({4}, rng);
      record("add_broadcast", gradcheck([&] { return random_projection(ops::add_broadcast(x, y), seed); }, {x, y}));
      record("prepend_token", gradcheck([&] { return random_projection(ops::prepend_token(x, tok), seed); }, {x, tok}));
      record("select_token", gradcheck([&] { return random_projection(ops::select_token(x, 1), seed); }, {x}));
    }
    {
      auto r = random_tensor({5, 3}, rng), q = random_tensor({2, 3}, rng);
      std::vector<std::size_t> idx{4, 0, 2, 2};
      record("gather_rows", gradcheck([&] { return random_projection(ops::gather_rows(r, idx), seed); }, {r}));
      record("concat_rows", gradcheck([&] { return random_projection(ops::concat_rows({r, q}), seed); }, {r, q}));
      record("l2_normalize_rows",
             gradcheck([&] { return random_projection(ops::l2_normalize_rows(r), seed); }, {r}));
    }
    {
      auto x = random_tensor({6, 8}, rng, -3.0f, 3.0f);
      record("gelu", gradcheck([&] { return random_projection(ops::gelu(x), seed); }, {x}));
      auto y = random_tensor({6, 8}, rng, 0.1f, 2.0f);  // away from the kink
      for (std::size_t i = 0; i < y.numel(); i += 2) y.mutable_data()[i] *= -1.0f;
      record("relu", gradcheck([&] { return random_projection(ops::relu(y), seed); }, {y}));
      record("dropout", gradcheck(
                            [&] {
                              std::mt19937_64 mask(seed);  // same mask every evaluation
                              return random_projection(ops::dropout(x, 0.3f, mask), seed);
                            },
                            {x}));
    }
    {
      auto x = random_tensor({4, 8}, rng, -2.0f, 2.0f), g = random_tensor({8}, rng, 0.5f, 1.5f),
           b = random_tensor({8}, rng);
      record("layer_norm", gradcheck([&] { return random_projection(ops::layer_norm(x, g, b), seed); }, {x, g, b}));
    }
    {
      auto l = random_tensor({5, 7}, rng, -2.0f, 2.0f);
      record("tempered_softmax",
             gradcheck([&] { return random_projection(ops::tempered_softmax(l, 0.5f), seed); }, {l}));
      auto pt = Tensor::from({3, 4}, testing::random_stochastic_rows(3, 4, rng), true);
      auto ps = Tensor::from({3, 4}, testing::random_stochastic_rows(3, 4, rng), true);
      record("cross_entropy_rows", gradcheck([&] { return ops::cross_entropy_rows(pt, ps); }, {pt, ps}));
    }
    {
      auto x = random_tensor({4, 6}, rng, -3.0f, 3.0f);
      std::bernoulli_distribution coin(0.4);
      std::vector<float> y(24);
      for (auto& v : y) v = coin(rng) ? 1.0f : 0.0f;
      auto t = Tensor::from({4, 6}, y);
      record("bce_with_logits", gradcheck([&] { return ops::bce_with_logits(x, t); }, {x}));
    }
    {
      auto qkv = random_tensor({2, 5, 3 * 8}, rng);
      record("multi_head_attention",
             gradcheck([&] { return random_projection(ops::multi_head_attention(qkv, 2), seed); }, {qkv}));
    }
    {
      ViTConfig cfg{.image_size = 8, .patch_size = 4, .in_channels = 2, .embed_dim = 8, .depth = 1,
                    .num_heads = 2, .mlp_ratio = 2.0f, .seed = seed};
      auto p = init_vit(cfg);
      // trunc-normal(0.02) weights give gradients too small for float differences
      std::uniform_real_distribution<float> u(-0.5f, 0.5f);
      for (auto t : p.parameters()) {
        for (auto& v : t.mutable_data()) v += u(rng);
      }
      auto batch = random_tensor({2, 2, 8, 8}, rng, 0.0f, 1.0f, false);
      record("vit_block_depth1",
             gradcheck([&] { return random_projection(forward_features(p, batch), seed); }, p.parameters()));
    }
  }
  const double secs = seconds_since(t0);
  std::string worst_name;
  double worst_err = 0.0;
  bool ok = secs < 60.0;
  for (const auto& [name, err] : worst) {
    ok = ok && err < kTol;
    if (err >= worst_err) {
      worst_err = err;
      worst_name = name;
    }
  }
  return {ok, std::to_string(worst.size()) + " ops x 5 seeds, worst rel err " + fmt_num(worst_err, 5) + " (" +
                  worst_name + ") < 1e-2, " + fmt_num(secs, 1) + "s < 60s"};
}

// ---------------------------------------------------------------------------
// 3

bool bit_equal(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

Outcome c3_dino(Desk& desk) {
  auto t0 = Clock::now();
  const auto rc = desk_config();
  std::vector<std::string> fails;

  // (a) pair count on real multi-crop views
  auto small = rc.dino;
  small.backbone.depth = 1;
  SynthSpec spec{.n_images = 2, .height = 64, .width = 64, .channels = 2, .classes = 4, .seed = 5};
  auto ds = generate_synthetic_dataset(spec);
  std::vector<MultiChannelImage> imgs;
  for (const auto& r : ds.images) imgs.push_back(normalize_image(r));
  bool pairs_ok = true;
  for (std::size_t locals : {0u, 2u, 6u}) {
    small.n_local_views = locals;
    auto state = init_dino(small);
    std::mt19937_64 rng(locals);
    std::vector<ViewSet> views;
    for (const auto& im : imgs) views.push_back(make_views(im, small, rng));
    auto out = dino_loss(state, views);
    pairs_ok = pairs_ok && out.pair_terms == 2 * (locals + 2 - 1);
  }
  if (!pairs_ok) fails.push_back("pair count");

  // (b) the teacher is outside the gradient graph
  small.n_local_views = 2;
  auto state = init_dino(small);
  std::mt19937_64 rng(9);
  std::vector<ViewSet> views;
  for (const auto& im : imgs) views.push_back(make_views(im, small, rng));
  auto grads = backward(dino_loss(state, views).loss);
  bool teacher_ok = true;
  for (const auto& t : state.teacher_parameters()) teacher_ok = teacher_ok && !grads.contains(t);
  std::size_t student_touched = 0;
  for (const auto& p : state.student_parameters()) student_touched += grads.contains(p);
  teacher_ok = teacher_ok && student_touched == state.student_parameters().size();
  if (!teacher_ok) fails.push_back("teacher gradient");

  // (c) EMA identities, bitwise
  auto other_cfg = small;
  other_cfg.backbone.seed += 100;
  auto other = init_dino(other_cfg);
  auto teacher = state.teacher_parameters();
  auto student = other.student_parameters();
  std::vector<std::vector<float>> before;
  for (const auto& t : teacher) before.emplace_back(t.data().begin(), t.data().end());
  bool ema_ok = true;
  ema_update(teacher, student, 1.0);
  for (std::size_t i = 0; i < teacher.size(); ++i) ema_ok = ema_ok && bit_equal(teacher[i].data(), before[i]);
  ema_update(teacher, student, 0.0);
  for (std::size_t i = 0; i < teacher.size(); ++i) ema_ok = ema_ok && bit_equal(teacher[i].data(), student[i].data());
  for (double lambda : {0.5, 0.9, 0.996}) {
    ema_update(teacher, student, lambda);
    for (std::size_t i = 0; i < teacher.size(); ++i) ema_ok = ema_ok && bit_equal(teacher[i].data(), student[i].data());
  }
  if (!ema_ok) fails.push_back("EMA identities");
  const double mech_secs = seconds_since(t0);

  // (d) two 20-epoch runs on the desk dataset. The backbone is shrunk to
  // 48px / depth 3 so both fit the 10 min budget on one core; everything else
  // (heads, temperatures, schedule, crops relative to the backbone) follows
  // the desk config.
  auto t1 = Clock::now();
  auto mech = rc.dino;
  mech.backbone.image_size = mech.global_crop_px = 48;
  mech.local_crop_px = 24;
  mech.backbone.depth = 3;
  mech.epochs = 20;
  const double lnK = std::log(static_cast<double>(mech.out_dim));
  desk.data();
  const auto manifest = load_manifest(desk.path("data/manifest.json"));
  auto entropy_curve = [&](const DinoConfig& cfg, const std::string& tag) {
    PretrainOptions opt;
    opt.split_seed = rc.split_seed;
    opt.holdout_fraction = rc.holdout_fraction;
    std::vector<double> curve;
    opt.on_epoch = [&](const EpochLog& l) {
      curve.push_back(l.teacher_entropy / lnK);
      if (l.epoch % 5 == 0) note(tag + " epoch " + std::to_string(l.epoch) + " entropy/lnK " + fmt_num(curve.back()));
    };
    pretrain(manifest, cfg, opt);
    return curve;
  };
  const auto on = entropy_curve(mech, "centering on");
  auto off_cfg = mech;
  off_cfg.centering = false;
  off_cfg.tau_teacher = 0.02f;
  const auto off = entropy_curve(off_cfg, "centering off");
  const double min_on = *std::min_element(on.begin(), on.end());
  const double final_off = off.back();
  if (on.size() != 20 || !(min_on > 0.1)) fails.push_back("entropy with centering");
  if (!(final_off < 0.01)) fails.push_back("collapse without centering");

  const double secs = mech_secs + seconds_since(t1);
  if (!(secs < 600.0)) fails.push_back("runtime");
  std::string detail = "pairs 2(|V|-1) for |V| in {2,4,8}; teacher grad-free; EMA bitwise; entropy/lnK min " +
                       fmt_num(min_on, 3) + " > 0.1 (centering on), final " + fmt_num(final_off, 5) +
                       " < 0.01 (off, tau_t 0.02), K " + std::to_string(mech.out_dim) + "; " + fmt_num(secs, 0) + "s < 600s";
  if (!fails.empty()) {
    detail += "; failed:";
    for (const auto& f : fails) detail += " [" + f + "]";
  }
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// 4

Outcome c4_adapters(Desk&) {
  std::vector<std::string> fails;
  ViTConfig cfg{.image_size = 16, .patch_size = 4, .in_channels = 3, .embed_dim = 12, .depth = 1,
                .num_heads = 2, .seed = 2};
  auto vit = init_vit(cfg);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto random_image = [&](std::size_t c) {
    MultiChannelImage im(c, 16, 16);
    for (auto& v : im.pixels) v = u(rng);
    return im;
  };
  for (std::size_t c : {1u, 2u, 4u}) {
    auto e = replicate_embed(random_image(c), vit, 3);
    if (e.size() != c * cfg.embed_dim) fails.push_back("replicate dim C=" + std::to_string(c));
  }

  // 2 channels (protein, nucleus) into 4 slots
  auto im = random_image(2);
  ChannelMapSpec spec{.dst_channels = 4, .assignments = {{0, kHpaProteinSlot}, {1, kHpaNucleusSlot}}};
  auto mapped = map_channels(im, spec);
  const std::size_t plane = 16 * 16;
  for (std::size_t slot : {kHpaMicrotubuleSlot, kHpaErSlot}) {
    for (std::size_t i = 0; i < plane; ++i) {
      const float v = mapped.pixels[slot * plane + i];
      if (std::bit_cast<std::uint32_t>(v) != 0u) {
        fails.push_back("slot " + std::to_string(slot) + " not +0.0");
        break;
      }
    }
  }
  for (std::size_t i = 0; i < plane; ++i) {
    if (mapped.pixels[kHpaProteinSlot * plane + i] != im.pixels[i] ||
        mapped.pixels[kHpaNucleusSlot * plane + i] != im.pixels[plane + i]) {
      fails.push_back("mapped slots differ from source");
      break;
    }
  }
  for (std::size_t c : {1u, 2u, 4u}) {
    auto src = random_image(c);
    auto same = map_channels(src, identity_map(c));
    if (same.pixels != src.pixels || same.channels != c) fails.push_back("identity C=" + std::to_string(c));
  }
  std::string detail = "replicate dim = C*" + std::to_string(cfg.embed_dim) +
                       " for C in {1,2,4}; unmapped slots bitwise +0; identity map is identity";
  for (const auto& f : fails) detail += "; failed [" + f + "]";
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// 5

// Counts per class with plain loops and uses F1 = 2TP / (2TP + FP + FN),
// which equals the precision/recall form whenever TP > 0 and is 0 otherwise.
double counting_oracle(const std::vector<LabelVector>& t, const std::vector<LabelVector>& p) {
  const std::size_t classes = t.front().size();
  double total = 0.0;
  for (std::size_t k = 0; k < classes; ++k) {
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const bool a = t[i][k] != 0, b = p[i][k] != 0;
      tp += a && b;
      fp += !a && b;
      fn += a && !b;
    }
    if (tp > 0) total += 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  return total / static_cast<double>(classes);
}

Outcome c5_metric_oracle(Desk&) {
  std::mt19937_64 rng(20260);
  std::uniform_int_distribution<std::size_t> classes(1, 17), rows(1, 50);
  std::uniform_real_distribution<double> density(0.0, 0.8);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = classes(rng), m = rows(rng);
    std::bernoulli_distribution bt(density(rng)), bp(density(rng));
    std::vector<LabelVector> t(m, LabelVector(n)), p(m, LabelVector(n));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        t[i][k] = bt(rng);
        p[i][k] = bp(rng);
      }
    }
    worst = std::max(worst, std::abs(macro_f1(t, p) - counting_oracle(t, p)));
  }
  return {worst <= 1e-12, "1000 random instances (n<=17, N<=50), max |diff| " + fmt_num(worst * 1e15, 3) +
                              "e-15 <= 1e-12"};
}

// ---------------------------------------------------------------------------
// 6

Outcome c6_pipeline(Desk& desk) {
  const auto pre = desk.crossval("pretrained", "mapping");
  const auto rnd = desk.crossval("scratch", "mapping");
  const auto rc = desk_config();
  const auto manifest = load_manifest(desk.path("data/manifest.json"));
  const double secs = desk.seconds({"gen-data", "pretrain", "embed-pretrained-mapping", "crossval-pretrained-mapping"});
  const double control_secs = desk.seconds({"embed-scratch-mapping", "crossval-scratch-mapping"});

  std::vector<std::string> fails;
  if (manifest.size() != 400 || manifest.classes.size() != 4) fails.push_back("dataset shape");
  if (pre.folds.size() != 5 || pre.row.epochs != 20 || rc.dino.epochs != 20) fails.push_back("protocol");
  if (!(pre.test.mean >= 0.90)) fails.push_back("mean < 0.90");
  if (!(pre.test.std <= 0.05)) fails.push_back("std > 0.05");
  if (!(rnd.test.mean < pre.test.mean)) fails.push_back("control not lower");
  if (!(secs + control_secs < 1800.0)) fails.push_back("runtime");

  std::string detail = "pretrained test macro-F1 " + format_mean_std(pre.test.mean, pre.test.std) +
                       " (need >= 0.90, std <= 0.05); random-init control " +
                       format_mean_std(rnd.test.mean, rnd.test.std) + "; " + fmt_num(secs + control_secs, 0) +
                       "s < 1800s";
  for (const auto& f : fails) detail += "; failed [" + f + "]";
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// 7

Outcome c7_report(Desk& desk) {
  std::vector<std::string> inputs;
  for (const std::string weights : {"pretrained", "scratch"}) {
    for (const std::string adapter : {"mapping", "replication"}) {
      desk.crossval(weights, adapter);
      inputs.push_back(desk.s("cv-" + weights + "-" + adapter + "/report_1.json"));
    }
  }
  std::vector<std::string> args{"report", "--inputs"};
  args.insert(args.end(), inputs.begin(), inputs.end());
  args.insert(args.end(), {"--out", desk.s("report")});
  desk.cli(args, "report");

  std::vector<std::string> fails;
  std::ifstream table(desk.path("report/table.txt"));
  std::vector<std::string> lines;
  for (std::string line; std::getline(table, line);) {
    if (!line.empty()) lines.push_back(line);
  }
  std::set<std::pair<std::string, std::string>> cells;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::istringstream in(lines[i]);
    std::string weights, model, approach;
    in >> weights >> model >> approach;
    cells.insert({weights, approach});
    if (lines[i].find(" (± ") == std::string::npos) fails.push_back("row without mean ± std");
  }
  if (lines.size() != 5 || cells.size() != 4) fails.push_back("expected header + 4 distinct rows");

  const std::string svg = io::read_text(desk.path("report/figure.svg"));
  std::size_t bars = 0, lines_drawn = 0;
  for (std::size_t at = svg.find("<rect"); at != std::string::npos; at = svg.find("<rect", at + 1)) ++bars;
  for (std::size_t at = svg.find("<line"); at != std::string::npos; at = svg.find("<line", at + 1)) ++lines_drawn;
  // axes (2) + gridlines (6) + 3 per error bar
  if (bars != 4 || lines_drawn != 2 + 6 + 3 * 4) fails.push_back("svg bars/error bars");

  std::string detail = "report over {mapping, replication} x {pretrained, scratch}: " +
                       std::to_string(lines.empty() ? 0 : lines.size() - 1) + " rows with mean (± std), SVG with " +
                       std::to_string(bars) + " bars + error bars";
  for (const auto& f : fails) detail += "; failed [" + f + "]";
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------
// 8

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  const auto fa = files_under(a), fb = files_under(b);
  if (fa != fb) {
    why = a.filename().string() + ": file lists differ";
    return false;
  }
  for (const auto& f : fa) {
    if (io::read_file(a / f) != io::read_file(b / f)) {
      why = (a.filename() / f).string() + " differs";
      return false;
    }
  }
  return true;
}

Outcome c8_determinism(Desk& desk) {
  // A small config so the double runs stay cheap; every seed comes from it.
  const char* config = R"({
    "synth": {"n_images": 40, "height": 32, "width": 32, "classes": 4, "seed": 11},
    "split": {"seed": 5},
    "dino": {"backbone": {"image_size": 16, "patch_size": 4, "in_channels": 2, "embed_dim": 16,
                          "depth": 1, "num_heads": 2, "seed": 3},
             "out_dim": 16, "head_hidden": 32, "head_bottleneck": 8, "global_crop_px": 16,
             "local_crop_px": 8, "n_local_views": 2, "epochs": 3, "batch_size": 8, "seed": 4},
    "head": {"hidden": [32, 16], "epochs": 10, "batch_size": 16, "seed": 6},
    "crossval": {"folds": 3, "seed": 8}
  })";
  const fs::path root = desk.path("determinism");
  fs::remove_all(root);  // a reused --work dir
  fs::create_directories(root);
  const std::string cfg = (root / "config.json").string();
  io::write_text(cfg, config);
  auto p = [&](const std::string& rel) { return (root / rel).string(); };
  auto run = [&](std::vector<std::string> args) {
    if (run_cli(args) != 0) throw Error("determinism run failed: " + args.front());
  };

  run({"gen-data", "--config", cfg, "--out", p("data")});
  const std::string manifest = p("data/manifest.json");
  for (const std::string tag : {"a", "b"}) {
    run({"pretrain", "--config", cfg, "--manifest", manifest, "--out", p("pre-" + tag)});
    run({"embed", "--config", cfg, "--manifest", manifest, "--backbone", p("pre-a/dino.ckpt"), "--out",
         p("emb-" + tag)});
    run({"crossval", "--config", cfg, "--manifest", manifest, "--embeddings", p("emb-a/embeddings.emb1"),
         "--out", p("cv-" + tag)});
  }
  std::string why;
  bool ok = true;
  for (const std::string stage : {"pre", "emb", "cv"}) {
    ok = ok && same_tree(root / (stage + "-a"), root / (stage + "-b"), why);
  }

  // Desk scale: repeat the embed and crossval behind criterion 6 (the desk
  // pretrain itself is too slow to run twice here).
  desk.crossval("pretrained", "mapping");
  run(desk.with_config({"embed", "--backbone", desk.pretrained().string(), "--adapter", "mapping", "--out",
                        p("desk-emb")}));
  run(desk.with_config({"crossval", "--embeddings", desk.embeddings("pretrained", "mapping").string(), "--out",
                        p("desk-cv")}));
  ok = ok && same_tree(desk.path("emb-pretrained-mapping"), root / "desk-emb", why) &&
       same_tree(desk.path("cv-pretrained-mapping"), root / "desk-cv", why);
  return {ok, ok ? "small config: pretrain, embed and crossval outputs (checkpoints, logs, embeddings, reports) "
                   "bit-identical across two runs; desk config: embed and crossval repeat bit-identically"
                 : "mismatch: " + why};
}

// ---------------------------------------------------------------------------
// 9

Outcome c9_leakage(Desk& desk) {
  std::vector<std::string> fails;
  const auto rc = desk_config();
  auto emb = load_embeddings(desk.embeddings("pretrained", "mapping"));
  const auto split = holdout_split(emb.rows, rc.holdout_fraction, rc.split_seed);
  auto folds = kfold_split(split.train, rc.folds, rc.fold_seed);

  // held-out indices appear in no fold
  const std::set<std::size_t> holdout(split.holdout.begin(), split.holdout.end());
  for (const auto& f : folds) {
    for (auto i : f.train) {
      if (holdout.count(i)) fails.push_back("holdout in fold train");
    }
    for (auto i : f.val) {
      if (holdout.count(i)) fails.push_back("holdout in fold val");
    }
  }
  try {
    check_folds(folds, split.train, split.holdout);
  } catch (const LeakageError&) {
    fails.push_back("guard rejects clean folds");
  }
  auto injected = folds;
  injected[0].train.push_back(split.holdout.front());
  bool caught = false;
  try {
    check_folds(injected, split.train, split.holdout);
  } catch (const LeakageError&) {
    caught = true;
  }
  if (!caught) fails.push_back("holdout injection not caught");

  // standardization statistics from fold-train rows only
  const auto& fit_rows = folds[0].train;
  auto clean = fit_standardizer(gather(emb.values, emb.cols, fit_rows), emb.cols);
  try {
    check_standardizer_source(clean, emb.values, emb.cols, fit_rows);
  } catch (const LeakageError&) {
    fails.push_back("guard rejects clean stats");
  }
  auto mutated_rows = fit_rows;
  mutated_rows.insert(mutated_rows.end(), split.holdout.begin(), split.holdout.end());
  auto leaky = fit_standardizer(gather(emb.values, emb.cols, mutated_rows), emb.cols);
  if (leaky == clean) fails.push_back("test rows did not change stats");
  caught = false;
  try {
    check_standardizer_source(leaky, emb.values, emb.cols, fit_rows);
  } catch (const LeakageError&) {
    caught = true;
  }
  if (!caught) fails.push_back("stats mutation not caught");

  // the crossval run behind criterion 6 trained on the same folds
  const auto report = desk.crossval("pretrained", "mapping");
  for (std::size_t f = 0; f < report.folds.size(); ++f) {
    if (report.folds[f].train_rows != folds[f].train.size() || report.folds[f].val_rows != folds[f].val.size()) {
      fails.push_back("report folds differ from guarded folds");
    }
  }
  if (report.test_rows != split.holdout.size()) fails.push_back("test rows");

  std::string detail = std::to_string(split.holdout.size()) + " held-out indices absent from all " +
                       std::to_string(folds.size()) + " folds; injection caught; stats with " +
                       std::to_string(split.holdout.size()) + " test rows mixed in differ and are caught";
  for (const auto& f : fails) detail += "; failed [" + f + "]";
  return {fails.empty(), detail};
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(Desk&)> check;
};

std::set<int> parse_ids(const std::string& s) {
  std::set<int> out;
  std::istringstream in(s);
  for (std::string tok; std::getline(in, tok, ',');) {
    if (!tok.empty()) out.insert(std::stoi(tok));
  }
  return out;
}

int main_impl(int argc, char** argv) {
  std::optional<fs::path> work;
  std::set<int> only, expect_fail;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only = parse_ids(argv[++i]);
    } else if (a == "--expect-fail" && i + 1 < argc) {
      expect_fail = parse_ids(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--work DIR] [--only 1,2] [--expect-fail 6]\n", argv[0]);
      return 2;
    }
  }

  std::optional<testing::TempDir> tmp;
  if (!work) {
    tmp.emplace();
    work = tmp->path();
  }
  fs::create_directories(*work);
  Desk desk(*work);

  const std::vector<Criterion> criteria{
      {1, "published-number non-reproducibility acknowledged", c1_acknowledge},
      {2, "gradient correctness", c2_gradients},
      {3, "DINO mechanics", c3_dino},
      {4, "adapter laws", c4_adapters},
      {5, "metric oracle", c5_metric_oracle},
      {6, "pipeline end-to-end", c6_pipeline},
      {7, "embedding-strategy comparison report", c7_report},
      {8, "determinism", c8_determinism},
      {9, "no-leakage guards", c9_leakage},
  };

  int unexpected = 0, passed = 0, run = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    ++run;
    auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.check(desk);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    passed += o.pass;
    const bool expected = expect_fail.count(c.id) > 0;
    if (!o.pass && !expected) ++unexpected;
    std::printf("%s [%d] %s: %s (%.1fs)%s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                seconds_since(t0), !o.pass && expected ? " [expected failure]" : "");
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", passed, run);
  return unexpected == 0 ? 0 : 1;
}

}  // namespace
}  // namespace dinocell::acceptance

int main(int argc, char** argv) { return dinocell::acceptance::main_impl(argc, argv); }
