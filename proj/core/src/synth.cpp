#include "dinocell/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dinocell/errors.hpp"
#include "dinocell/seeding.hpp"

namespace dinocell {

namespace {

struct Cell {
  double cy, cx;  // cell body center
  double ny, nx;  // nucleus center
  double rc, rn;  // cell and nucleus radii
};

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

double gauss(double d2, double sigma) { return std::exp(-d2 / (2.0 * sigma * sigma)); }

double segment_dist2(double py, double px, double ay, double ax, double by, double bx) {
  const double vy = by - ay, vx = bx - ax;
  const double len2 = vy * vy + vx * vx;
  double t = len2 > 0 ? ((py - ay) * vy + (px - ax) * vx) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dy = py - (ay + t * vy), dx = px - (ax + t * vx);
  return dy * dy + dx * dx;
}

// Float plane with max-compositing helpers.
class Plane {
 public:
  Plane(std::size_t h, std::size_t w) : h_(h), w_(w), v_(h * w, 0.0) {}

  template <class F>
  void max_with(F&& f) {
    for (std::size_t y = 0; y < h_; ++y) {
      for (std::size_t x = 0; x < w_; ++x) {
        auto& cell = v_[y * w_ + x];
        cell = std::max(cell, f(static_cast<double>(y), static_cast<double>(x)));
      }
    }
  }

  void dot(double cy, double cx, double sigma, double amp = 1.0) {
    max_with([&](double y, double x) {
      return amp * gauss((y - cy) * (y - cy) + (x - cx) * (x - cx), sigma);
    });
  }

  void line(double ay, double ax, double by, double bx, double width, double amp = 1.0) {
    max_with([&](double y, double x) { return amp * gauss(segment_dist2(y, x, ay, ax, by, bx), width); });
  }

  std::vector<double>& values() { return v_; }

 private:
  std::size_t h_, w_;
  std::vector<double> v_;
};

double dist(double y, double x, double cy, double cx) {
  return std::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
}

double nucleus_mask(const Cell& c, double y, double x) {
  return sigmoid((c.rn - dist(y, x, c.ny, c.nx)) / 0.8);
}

double cell_mask(const Cell& c, double y, double x) {
  return sigmoid((c.rc - dist(y, x, c.cy, c.cx)) / 1.0);
}

// A random point in the cytoplasm ring between the nucleus and the membrane.
std::pair<double, double> cytoplasm_point(const Cell& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  const double lo = c.rn + 1.0;
  const double hi = std::max(lo + 0.5, c.rc - 1.5);
  std::uniform_real_distribution<double> radius(lo, hi);
  const double a = angle(rng), r = radius(rng);
  return {c.ny + r * std::sin(a), c.nx + r * std::cos(a)};
}

std::pair<double, double> nucleus_point(const Cell& c, double frac, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> radius(0.0, frac * c.rn);
  const double a = angle(rng), r = radius(rng);
  return {c.ny + r * std::sin(a), c.nx + r * std::cos(a)};
}

void render_class(std::size_t cls, const std::vector<Cell>& cells, Plane& out,
                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  for (const auto& c : cells) {
    switch (cls) {
      case 0:  // nucleoplasm
        out.max_with([&](double y, double x) { return 0.9 * nucleus_mask(c, y, x); });
        break;
      case 1:  // plasma membrane
        out.max_with([&](double y, double x) {
          const double d = dist(y, x, c.cy, c.cx) - c.rc;
          return gauss(d * d, 1.0);
        });
        break;
      case 2:  // cytoplasmic
        out.max_with([&](double y, double x) {
          return 0.7 * cell_mask(c, y, x) * (1.0 - nucleus_mask(c, y, x));
        });
        break;
      case 3:  // vesicles
        for (int k = 0; k < 10; ++k) {
          auto [py, px] = cytoplasm_point(c, rng);
          out.dot(py, px, 0.9);
        }
        break;
      case 4:  // nucleolus
        for (int k = 0; k < 2; ++k) {
          auto [py, px] = nucleus_point(c, 0.5, rng);
          out.dot(py, px, 0.2 * c.rn);
        }
        break;
      case 5:  // nuclear membrane
        out.max_with([&](double y, double x) {
          const double d = dist(y, x, c.ny, c.nx) - c.rn;
          return gauss(d * d, 0.8);
        });
        break;
      case 6:  // endoplasmic reticulum
        out.max_with([&](double y, double x) {
          const double d = std::max(0.0, dist(y, x, c.ny, c.nx) - c.rn);
          return cell_mask(c, y, x) * (1.0 - nucleus_mask(c, y, x)) * std::exp(-d / (0.35 * c.rc));
        });
        break;
      case 7: {  // golgi
        const double a = angle(rng);
        const double r = c.rn + 0.2 * c.rc;
        out.dot(c.ny + r * std::sin(a), c.nx + r * std::cos(a), 0.3 * c.rn);
        break;
      }
      case 8:  // mitochondria
        for (int k = 0; k < 6; ++k) {
          auto [py, px] = cytoplasm_point(c, rng);
          const double a = angle(rng);
          out.line(py, px, py + 3.0 * std::sin(a), px + 3.0 * std::cos(a), 0.7);
        }
        break;
      case 9: {  // centrosome
        const double a = angle(rng);
        const double r = c.rn + 1.5;
        out.dot(c.ny + r * std::sin(a), c.nx + r * std::cos(a), 0.8);
        break;
      }
      case 10:  // chromatin
        for (int k = 0; k < 12; ++k) {
          auto [py, px] = nucleus_point(c, 0.9, rng);
          out.dot(py, px, 0.6, 0.6 + 0.4 * unit(rng));
        }
        break;
      case 11:  // cytoskeleton
        for (int k = 0; k < 4; ++k) {
          const double a = angle(rng);
          const double off = (unit(rng) - 0.5) * c.rc;
          const double py = c.cy + off * std::cos(a), px = c.cx - off * std::sin(a);
          const double dy = c.rc * std::sin(a), dx = c.rc * std::cos(a);
          out.max_with([&](double y, double x) {
            return cell_mask(c, y, x) *
                   gauss(segment_dist2(y, x, py - dy, px - dx, py + dy, px + dx), 0.6);
          });
        }
        break;
      case 12:  // nuclear punctae
        for (int k = 0; k < 6; ++k) {
          auto [py, px] = nucleus_point(c, 0.85, rng);
          out.dot(py, px, 0.7);
        }
        break;
      case 13: {  // cell contact: a membrane arc
        const double a0 = angle(rng);
        out.max_with([&](double y, double x) {
          const double d = dist(y, x, c.cy, c.cx) - c.rc;
          double a = std::atan2(y - c.cy, x - c.cx) - a0;
          a = std::remainder(a, 2.0 * std::numbers::pi);
          return std::abs(a) < std::numbers::pi / 3.0 ? gauss(d * d, 1.0) : 0.0;
        });
        break;
      }
      case 14: {  // big aggregates
        auto [py, px] = cytoplasm_point(c, rng);
        out.dot(py, px, 0.3 * c.rc);
        break;
      }
      case 15:  // focal adhesions: short radial streaks at the periphery
        for (int k = 0; k < 5; ++k) {
          const double a = angle(rng);
          const double r0 = c.rc - 3.0, r1 = c.rc - 0.5;
          out.line(c.cy + r0 * std::sin(a), c.cx + r0 * std::cos(a), c.cy + r1 * std::sin(a),
                   c.cx + r1 * std::cos(a), 0.6);
        }
        break;
      default:  // lysosome: few medium dots
        for (int k = 0; k < 4; ++k) {
          auto [py, px] = cytoplasm_point(c, rng);
          out.dot(py, px, 1.6);
        }
        break;
    }
  }
}

double grade_amplitude(int grade) {
  switch (grade) {
    case 3:
      return 1.0;
    case 2:
      return 0.7;
    default:
      return 0.45;
  }
}

std::vector<std::uint16_t> quantize(const std::vector<double>& plane, double gain, double noise,
                                    std::mt19937_64& rng) {
  constexpr double kOffset = 800.0;
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<std::uint16_t> out(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i) {
    const double v = kOffset + gain * (plane[i] + noise * n01(rng));
    out[i] = static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, 65535L));
  }
  return out;
}

}  // namespace

const std::vector<std::string>& localization_class_names() {
  static const std::vector<std::string> kNames{
      "nucleoplasm",     "membrane",     "cytoplasmic",      "vesicles",
      "nucleolus",       "nuclear_membrane", "er",           "golgi",
      "mitochondria",    "centrosome",   "chromatin",        "cytoskeleton",
      "nuclear_punctae", "cell_contact", "big_aggregates",   "focal_adhesions",
      "lysosome"};
  return kNames;
}

void validate_synth_spec(const SynthSpec& spec) {
  if (spec.n_images == 0) throw ConfigError("synthetic dataset needs at least one image");
  if (spec.classes < 2 || spec.classes > localization_class_names().size()) {
    throw ConfigError("synthetic dataset class count must be in [2, " +
                      std::to_string(localization_class_names().size()) + "], got " +
                      std::to_string(spec.classes));
  }
  if (spec.channels != 2 && spec.channels != 4) {
    throw ConfigError("synthetic dataset supports 2 or 4 channels, got " +
                      std::to_string(spec.channels));
  }
  if (spec.height < 16 || spec.width < 16) throw ConfigError("synthetic images must be >= 16x16");
  if (spec.multi_label_probability < 0.0 || spec.multi_label_probability > 1.0) {
    throw ConfigError("multi_label_probability must be in [0, 1]");
  }
  if (spec.noise < 0.0) throw ConfigError("noise must be non-negative");
}

SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec) {
  validate_synth_spec(spec);
  SyntheticDataset out;
  auto& m = out.manifest;
  m.name = spec.name;
  m.channels = spec.channels == 2
                   ? std::vector<std::string>{"protein", "nucleus"}
                   : std::vector<std::string>{"protein", "microtubules", "nucleus", "er"};
  const auto& names = localization_class_names();
  m.classes.assign(names.begin(), names.begin() + static_cast<std::ptrdiff_t>(spec.classes));
  m.generator = {{"kind", "synthetic"},
                 {"n_images", spec.n_images},
                 {"height", spec.height},
                 {"width", spec.width},
                 {"channels", spec.channels},
                 {"classes", spec.classes},
                 {"seed", spec.seed},
                 {"multi_label_probability", spec.multi_label_probability},
                 {"noise", spec.noise}};

  const std::size_t h = spec.height, w = spec.width;
  const double s = static_cast<double>(std::min(h, w));
  const std::size_t protein = 0;
  const std::size_t nucleus = spec.channels == 2 ? 1 : 2;

  for (std::size_t i = 0; i < spec.n_images; ++i) {
    std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(i + 1)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> grade_dist(1, 3);

    ImageRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "img_%05zu", i);
    rec.id = id;
    rec.path = "images/" + rec.id + ".mci";
    const std::size_t primary = i % spec.classes;
    std::vector<std::size_t> assigned{primary};
    rec.grades[m.classes[primary]] = grade_dist(rng);
    if (unit(rng) < spec.multi_label_probability) {
      std::uniform_int_distribution<std::size_t> other(1, spec.classes - 1);
      const std::size_t second = (primary + other(rng)) % spec.classes;
      assigned.push_back(second);
      rec.grades[m.classes[second]] = grade_dist(rng);
    }

    const std::size_t max_extra = std::max<std::size_t>(1, static_cast<std::size_t>(s / 32.0));
    const std::size_t n_cells = 2 + static_cast<std::size_t>(rng() % (max_extra + 1));
    // Cells may touch but not overlap, so one cell's membrane never crosses
    // another cell's nucleus.
    std::vector<Cell> cells;
    for (std::size_t k = 0; k < n_cells; ++k) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        Cell c;
        c.cy = static_cast<double>(h) * (0.15 + 0.7 * unit(rng));
        c.cx = static_cast<double>(w) * (0.15 + 0.7 * unit(rng));
        c.rc = s * (0.16 + 0.06 * unit(rng));
        c.rn = c.rc * (0.42 + 0.1 * unit(rng));
        const double a = 2.0 * std::numbers::pi * unit(rng);
        const double off = 0.15 * c.rc * unit(rng);
        c.ny = c.cy + off * std::sin(a);
        c.nx = c.cx + off * std::cos(a);
        const bool clear = std::all_of(cells.begin(), cells.end(), [&](const Cell& o) {
          return dist(c.cy, c.cx, o.cy, o.cx) >= c.rc + o.rc + 1.0;
        });
        if (clear) {
          cells.push_back(c);
          break;
        }
      }
    }

    RawImage raw{spec.channels, h, w, {}};
    raw.pixels.resize(spec.channels * h * w);
    std::vector<std::vector<double>> planes(spec.channels, std::vector<double>(h * w, 0.0));

    Plane nuc(h, w);
    for (const auto& c : cells) {
      nuc.max_with([&](double y, double x) {
        const double d = dist(y, x, c.ny, c.nx);
        return gauss(d * d, 0.65 * c.rn);
      });
    }
    planes[nucleus] = nuc.values();

    for (std::size_t cls : assigned) {
      Plane pat(h, w);
      render_class(cls, cells, pat, rng);
      const double amp = grade_amplitude(rec.grades[m.classes[cls]]);
      auto& dst = planes[protein];
      const auto& src = pat.values();
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += amp * src[p];
    }

    if (spec.channels == 4) {
      Plane mt(h, w);
      for (const auto& c : cells) {
        for (int k = 0; k < 8; ++k) {
          const double a = 2.0 * std::numbers::pi * (k + unit(rng)) / 8.0;
          mt.line(c.ny, c.nx, c.ny + c.rc * std::sin(a), c.nx + c.rc * std::cos(a), 0.7, 0.8);
        }
      }
      planes[1] = mt.values();
      Plane er(h, w);
      render_class(6, cells, er, rng);
      planes[3] = er.values();
    }

    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      const double gain = 30000.0 + 20000.0 * unit(rng);
      auto q = quantize(planes[ch], gain, spec.noise, rng);
      std::copy(q.begin(), q.end(), raw.pixels.begin() + static_cast<std::ptrdiff_t>(ch * h * w));
    }
    m.records.push_back(std::move(rec));
    out.images.push_back(std::move(raw));
  }
  return out;
}

DatasetManifest write_dataset(const std::filesystem::path& dir, const SyntheticDataset& dataset,
                              bool overwrite) {
  namespace fs = std::filesystem;
  if (dataset.images.size() != dataset.manifest.size()) {
    throw ConfigError("dataset image count differs from manifest record count");
  }
  if (fs::exists(dir)) {
    if (!overwrite) {
      throw IoError("output directory " + dir.string() + " already exists (use --force)");
    }
    fs::remove_all(dir);
  }
  auto staging = dir;
  staging += ".partial";
  fs::remove_all(staging);
  try {
    fs::create_directories(staging / "images");
    for (std::size_t i = 0; i < dataset.images.size(); ++i) {
      write_image(staging / dataset.manifest.records[i].path, dataset.images[i]);
    }
    save_manifest(staging / "manifest.json", dataset.manifest);
    fs::rename(staging, dir);
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }
  DatasetManifest m = dataset.manifest;
  m.root = dir;
  return m;
}

double pixel_correlation(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("pixel_correlation: size mismatch");
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace dinocell
