#include "dinocell/evaluation.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "dinocell/errors.hpp"

namespace dinocell {

std::vector<Fold> kfold_split(std::span<const std::size_t> ids, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("kfold_split: k must be at least 2");
  if (k > ids.size()) {
    throw ConfigError("kfold_split: k = " + std::to_string(k) + " exceeds " + std::to_string(ids.size()) + " ids");
  }
  std::vector<std::size_t> order(ids.begin(), ids.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Fold> folds(k);
  const std::size_t base = order.size() / k, extra = order.size() % k;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    folds[f].val.assign(order.begin() + pos, order.begin() + pos + len);
    folds[f].train.assign(order.begin(), order.begin() + pos);
    folds[f].train.insert(folds[f].train.end(), order.begin() + pos + len, order.end());
    std::sort(folds[f].val.begin(), folds[f].val.end());
    std::sort(folds[f].train.begin(), folds[f].train.end());
    pos += len;
  }
  return folds;
}

void check_folds(std::span<const Fold> folds, std::span<const std::size_t> train_ids,
                 std::span<const std::size_t> holdout) {
  std::vector<std::size_t> hold(holdout.begin(), holdout.end());
  std::sort(hold.begin(), hold.end());
  std::vector<std::size_t> expected(train_ids.begin(), train_ids.end());
  std::sort(expected.begin(), expected.end());
  std::vector<std::size_t> seen;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    for (const auto* part : {&folds[f].train, &folds[f].val}) {
      for (auto i : *part) {
        if (std::binary_search(hold.begin(), hold.end(), i)) {
          throw LeakageError("held-out row " + std::to_string(i) + " appears in fold " + std::to_string(f + 1));
        }
      }
    }
    std::vector<std::size_t> all(folds[f].train);
    all.insert(all.end(), folds[f].val.begin(), folds[f].val.end());
    std::sort(all.begin(), all.end());
    if (all != expected) throw LeakageError("fold " + std::to_string(f + 1) + " does not cover the train ids");
    seen.insert(seen.end(), folds[f].val.begin(), folds[f].val.end());
  }
  std::sort(seen.begin(), seen.end());
  if (seen != expected) throw LeakageError("validation folds do not partition the train ids");
}

std::vector<float> gather(std::span<const float> embeddings, std::size_t dim,
                          std::span<const std::size_t> rows) {
  const std::size_t n = dim == 0 ? 0 : embeddings.size() / dim;
  std::vector<float> out;
  out.reserve(rows.size() * dim);
  for (auto r : rows) {
    if (r >= n) throw ShapeError("row index " + std::to_string(r) + " out of range");
    auto row = embeddings.subspan(r * dim, dim);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

void check_standardizer_source(const StandardizationStats& stats, std::span<const float> embeddings,
                               std::size_t dim, std::span<const std::size_t> fit_rows) {
  const auto refit = fit_standardizer(gather(embeddings, dim, fit_rows), dim, stats.epsilon);
  const auto bits_equal = [](const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
  };
  if (!bits_equal(refit.mean, stats.mean) || !bits_equal(refit.std, stats.std)) {
    throw LeakageError("standardization statistics were not computed from the fold-train rows alone");
  }
}

namespace {

nlohmann::json to_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

MeanStd mean_std_from_json(const nlohmann::json& j) { return {j.at("mean"), j.at("std")}; }

}  // namespace

nlohmann::json to_json(const CVReport& r) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) {
    folds.push_back({{"fold", f.fold},
                     {"train_rows", f.train_rows},
                     {"val_rows", f.val_rows},
                     {"val_macro_f1", f.val_macro_f1},
                     {"test_macro_f1", f.test_macro_f1},
                     {"test_f1_per_class", f.test_f1_per_class}});
  }
  return {{"row", {{"weights", r.row.weights}, {"model", r.row.model}, {"approach", r.row.approach},
                   {"epochs", r.row.epochs}}},
          {"folds", folds},
          {"val", to_json(r.val)},
          {"test", to_json(r.test)},
          {"test_rows", r.test_rows},
          {"table_cell", format_mean_std(r.test.mean, r.test.std)},
          {"provenance", r.provenance}};
}

CVReport cv_report_from_json(const nlohmann::json& j) {
  CVReport r;
  try {
    const auto& row = j.at("row");
    r.row = {row.at("weights"), row.at("model"), row.at("approach"), row.at("epochs")};
    for (const auto& f : j.at("folds")) {
      r.folds.push_back({f.at("fold"), f.at("train_rows"), f.at("val_rows"), f.at("val_macro_f1"),
                         f.at("test_macro_f1"), f.at("test_f1_per_class").get<std::vector<double>>()});
    }
    r.val = mean_std_from_json(j.at("val"));
    r.test = mean_std_from_json(j.at("test"));
    r.test_rows = j.at("test_rows");
    r.provenance = j.value("provenance", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cv report: ") + e.what());
  }
  return r;
}

CVReport crossval_run(std::span<const float> embeddings, std::size_t dim,
                      std::span<const LabelVector> labels, const HoldoutSplit& split,
                      const HeadConfig& head_config, const CrossvalOptions& options) {
  if (dim == 0 || embeddings.size() % dim != 0 || embeddings.size() / dim != labels.size()) {
    throw ShapeError("crossval: embeddings and labels disagree on the number of rows");
  }
  if (split.holdout.empty()) throw ConfigError("crossval: empty held-out set");
  const auto folds = kfold_split(split.train, options.folds, options.fold_seed);
  check_folds(folds, split.train, split.holdout);

  auto pick_labels = [&](const std::vector<std::size_t>& idx) {
    std::vector<LabelVector> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  };
  const auto test_raw = gather(embeddings, dim, split.holdout);
  const auto test_labels = pick_labels(split.holdout);

  CVReport report;
  report.row = options.row;
  report.test_rows = split.holdout.size();
  report.provenance = options.provenance;
  report.provenance["head"] = to_json(head_config);
  report.provenance["folds"] = options.folds;
  report.provenance["fold_seed"] = options.fold_seed;

  std::vector<double> val_scores, test_scores;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const Fold& fold = folds[f];
    const auto train_raw = gather(embeddings, dim, fold.train);
    const auto stats = fit_standardizer(train_raw, dim);
    check_standardizer_source(stats, embeddings, dim, fold.train);

    const auto train_x = apply_standardizer(stats, train_raw);
    const auto val_x = apply_standardizer(stats, gather(embeddings, dim, fold.val));
    const auto test_x = apply_standardizer(stats, test_raw);
    const auto train_y = pick_labels(fold.train);
    const auto val_y = pick_labels(fold.val);

    HeadConfig cfg = head_config;
    cfg.seed = head_config.seed + f;
    std::function<void(const HeadEpochLog&)> hook;
    if (options.on_epoch) hook = [&](const HeadEpochLog& e) { options.on_epoch(f + 1, e); };
    auto trained = train_head({train_x, train_y}, {val_x, val_y}, dim, cfg, hook);
    trained.head.stats = stats;

    FoldResult res;
    res.fold = f + 1;
    res.train_rows = fold.train.size();
    res.val_rows = fold.val.size();
    res.val_macro_f1 = macro_f1(val_y, predict(trained.head, val_x, cfg.threshold));
    const auto test_pred = predict(trained.head, test_x, cfg.threshold);
    res.test_f1_per_class = f1_per_class(confusion(test_labels, test_pred));
    res.test_macro_f1 = macro_f1(res.test_f1_per_class);
    val_scores.push_back(res.val_macro_f1);
    test_scores.push_back(res.test_macro_f1);
    report.folds.push_back(std::move(res));
  }
  report.val = mean_std(val_scores);
  report.test = mean_std(test_scores);
  return report;
}

std::string format_mean_std(double mean, double std) { return fmt::format("{:.4f} (± {:.4f})", mean, std); }

std::string render_table(std::span<const CVReport> reports) {
  std::string out = fmt::format("{:<14} {:<12} {:<14} {:>11}  {}\n", "Weights", "Model", "Approach",
                                "DINO epochs", "Macro F1");
  for (const auto& r : reports) {
    out += fmt::format("{:<14} {:<12} {:<14} {:>11}  {}\n", r.row.weights, r.row.model, r.row.approach,
                       r.row.epochs, format_mean_std(r.test.mean, r.test.std));
  }
  return out;
}

std::string render_fold_table(const CVReport& r) {
  std::string out = fmt::format("{:>4} {:>7} {:>5} {:>8} {:>9}\n", "fold", "train", "val", "val F1", "test F1");
  for (const auto& f : r.folds) {
    out += fmt::format("{:>4} {:>7} {:>5} {:>8.4f} {:>9.4f}\n", f.fold, f.train_rows, f.val_rows,
                       f.val_macro_f1, f.test_macro_f1);
  }
  out += fmt::format("mean ± std test macro F1: {}\n", format_mean_std(r.test.mean, r.test.std));
  return out;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string render_svg(std::span<const CVReport> reports) {
  const double bar_w = 60, gap = 40, left = 60, top = 30, plot_h = 240;
  const double width = left + static_cast<double>(reports.size()) * (bar_w + gap) + gap;
  const double height = top + plot_h + 70;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::string s = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n",
      width, height);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n", left, top, top + plot_h);
  s += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n", left, top + plot_h, width - 10);
  for (int t = 0; t <= 5; ++t) {
    const double v = t / 5.0;
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"end\">{:.1f}</text>\n", left - 6,
                     y_of(v) + 4, v);
    s += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n",
                     left, y_of(v), width - 10, y_of(v));
  }
  s += fmt::format("<text x=\"14\" y=\"{:.1f}\" transform=\"rotate(-90 14 {:.1f})\" text-anchor=\"middle\">"
                   "macro F1</text>\n", top + plot_h / 2, top + plot_h / 2);
  static const char* palette[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"};
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const double x = left + gap + static_cast<double>(i) * (bar_w + gap);
    const double cx = x + bar_w / 2;
    s += fmt::format("<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\">"
                     "<title>{}</title></rect>\n",
                     x, y_of(r.test.mean), bar_w, top + plot_h - y_of(r.test.mean), palette[i % 6],
                     xml_escape(format_mean_std(r.test.mean, r.test.std)));
    const double lo = y_of(r.test.mean - r.test.std), hi = y_of(r.test.mean + r.test.std);
    s += fmt::format("<line x1=\"{0:.1f}\" y1=\"{1:.1f}\" x2=\"{0:.1f}\" y2=\"{2:.1f}\" stroke=\"black\"/>\n", cx, lo, hi);
    for (double yy : {lo, hi}) {
      s += fmt::format("<line x1=\"{:.1f}\" y1=\"{:.1f}\" x2=\"{:.1f}\" y2=\"{:.1f}\" stroke=\"black\"/>\n",
                       cx - 8, yy, cx + 8, yy);
    }
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", cx,
                     top + plot_h + 16, xml_escape(r.row.weights));
    s += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n", cx,
                     top + plot_h + 30, xml_escape(r.row.approach));
  }
  s += "</svg>\n";
  return s;
}

}  // namespace dinocell
