#pragma once

// Synthetic compositional scenes: one labelled (attribute, object) shape per
// image plus optional distractor shapes, seen/unseen pair splits and the
// on-disk manifest format.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "locl/core.hpp"
#include "locl/io.hpp"

namespace locl::data {

namespace fs = std::filesystem;

struct Vocabulary {
  std::vector<std::string> objects;
  std::vector<std::string> attributes;

  int num_objects() const { return static_cast<int>(objects.size()); }
  int num_attributes() const { return static_cast<int>(attributes.size()); }

  void validate() const {
    if (objects.empty()) throw ValidationError("vocabulary has no objects");
    if (attributes.empty()) throw ValidationError("vocabulary has no attributes");
    auto check_unique = [](const std::vector<std::string>& names, const char* what) {
      std::set<std::string> seen;
      for (const auto& n : names) {
        if (!seen.insert(n).second) throw ValidationError(std::string("duplicate ") + what + " name '" + n + "'");
      }
    };
    check_unique(objects, "object");
    check_unique(attributes, "attribute");
  }

  bool operator==(const Vocabulary&) const = default;
};

inline const std::vector<std::string>& known_shapes() {
  static const std::vector<std::string> shapes = {"circle", "square",  "triangle", "star",  "cross",
                                                  "diamond", "hexagon", "ring",     "ellipse", "bar"};
  return shapes;
}

inline const std::vector<std::string>& known_attributes() {
  static const std::vector<std::string> attrs = {"red",   "green",  "blue",  "yellow", "striped",
                                                 "dotted", "small", "large", "purple", "cyan"};
  return attrs;
}

/// First `num_objects` shapes and `num_attributes` attribute names.
inline Vocabulary default_vocabulary(int num_objects = 8, int num_attributes = 8) {
  if (num_objects < 1 || num_objects > static_cast<int>(known_shapes().size()) || num_attributes < 1 ||
      num_attributes > static_cast<int>(known_attributes().size())) {
    throw ValidationError("default vocabulary supports 1-10 objects and 1-10 attributes");
  }
  Vocabulary v;
  v.objects.assign(known_shapes().begin(), known_shapes().begin() + num_objects);
  v.attributes.assign(known_attributes().begin(), known_attributes().begin() + num_attributes);
  return v;
}

struct Pair {
  int attr = 0;
  int obj = 0;
  auto operator<=>(const Pair&) const = default;
};

inline void check_pair(const Vocabulary& vocab, Pair p) {
  if (p.attr < 0 || p.attr >= vocab.num_attributes()) {
    throw std::out_of_range("attribute index " + std::to_string(p.attr) + " outside [0, " +
                            std::to_string(vocab.num_attributes()) + ")");
  }
  if (p.obj < 0 || p.obj >= vocab.num_objects()) {
    throw std::out_of_range("object index " + std::to_string(p.obj) + " outside [0, " +
                            std::to_string(vocab.num_objects()) + ")");
  }
}

struct PairSplit {
  std::vector<Pair> train;
  std::vector<Pair> val;
  std::vector<Pair> test;

  bool is_train(Pair p) const { return std::binary_search(train.begin(), train.end(), p); }
  bool is_val(Pair p) const { return std::binary_search(val.begin(), val.end(), p); }
  bool is_test(Pair p) const { return std::binary_search(test.begin(), test.end(), p); }

  /// Closed-world candidate set used at evaluation: train ∪ test, sorted.
  std::vector<Pair> candidates() const {
    std::vector<Pair> all = train;
    all.insert(all.end(), test.begin(), test.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    return all;
  }

  void validate(const Vocabulary& vocab) const {
    if (train.empty()) throw ValidationError("split has no train pairs");
    for (const auto* set : {&train, &val, &test}) {
      if (!std::is_sorted(set->begin(), set->end())) throw ValidationError("split pair lists must be sorted");
      for (Pair p : *set) {
        try {
          check_pair(vocab, p);
        } catch (const std::out_of_range& e) {
          throw ValidationError(std::string("split references invalid pair: ") + e.what());
        }
      }
    }
    for (Pair p : test) {
      if (is_train(p)) {
        throw ValidationError("pair (" + vocab.attributes[p.attr] + ", " + vocab.objects[p.obj] +
                              ") is both seen and unseen");
      }
    }
    for (Pair p : val) {
      if (is_train(p)) throw ValidationError("validation pair overlaps train pairs");
    }
  }

  bool operator==(const PairSplit&) const = default;
};

/// Holds out ~unseen_fraction of all pairs as test (unseen) pairs and
/// ~val_fraction as validation pairs while keeping every attribute and every
/// object present in at least one train pair.
inline PairSplit build_split(const Vocabulary& vocab, double unseen_fraction, std::uint64_t seed,
                             double val_fraction = 0.0) {
  vocab.validate();
  if (!(unseen_fraction > 0.0 && unseen_fraction < 1.0)) throw ValidationError("unseen_fraction must lie in (0, 1)");
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw ValidationError("val_fraction must lie in [0, 1)");
  const int na = vocab.num_attributes();
  const int no = vocab.num_objects();
  const int total = na * no;
  if (total < 4) throw ValidationError("vocabulary yields " + std::to_string(total) + " pairs; at least 4 required");

  const int n_test = std::clamp(static_cast<int>(std::lround(unseen_fraction * total)), 1, total - 1);
  const int n_val = static_cast<int>(std::lround(val_fraction * total));

  std::vector<Pair> pairs;
  for (int a = 0; a < na; ++a)
    for (int o = 0; o < no; ++o) pairs.push_back({a, o});
  std::mt19937_64 rng(derive_seed(seed, "split"));
  std::shuffle(pairs.begin(), pairs.end(), rng);

  std::vector<int> attr_count(static_cast<std::size_t>(na), no);
  std::vector<int> obj_count(static_cast<std::size_t>(no), na);
  std::vector<bool> held(pairs.size(), false);

  auto hold_out = [&](int wanted, std::vector<Pair>& dest) {
    for (std::size_t i = 0; i < pairs.size() && static_cast<int>(dest.size()) < wanted; ++i) {
      if (held[i]) continue;
      const Pair p = pairs[i];
      if (attr_count[static_cast<std::size_t>(p.attr)] > 1 && obj_count[static_cast<std::size_t>(p.obj)] > 1) {
        held[i] = true;
        --attr_count[static_cast<std::size_t>(p.attr)];
        --obj_count[static_cast<std::size_t>(p.obj)];
        dest.push_back(p);
      }
    }
    if (static_cast<int>(dest.size()) < wanted) {
      // Name a primitive that blocks any further hold-out.
      for (int a = 0; a < na; ++a) {
        if (attr_count[static_cast<std::size_t>(a)] == 1) {
          throw ValidationError("cannot hold out " + std::to_string(wanted) +
                                " pairs: attribute '" + vocab.attributes[static_cast<std::size_t>(a)] +
                                "' would be left without a train pair");
        }
      }
      for (int o = 0; o < no; ++o) {
        if (obj_count[static_cast<std::size_t>(o)] == 1) {
          throw ValidationError("cannot hold out " + std::to_string(wanted) + " pairs: object '" +
                                vocab.objects[static_cast<std::size_t>(o)] + "' would be left without a train pair");
        }
      }
      throw ValidationError("cannot hold out " + std::to_string(wanted) + " pairs");
    }
  };

  PairSplit split;
  hold_out(n_test, split.test);
  hold_out(n_val, split.val);
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (!held[i]) split.train.push_back(pairs[i]);
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

/// Axis-aligned box in input-image pixels.
struct Box {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool intersects(const Box& o) const {
    return x_min < o.x_max && o.x_min < x_max && y_min < o.y_max && o.y_min < y_max;
  }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// 8-bit RGB image, row-major, interleaved channels. Pixel values are exposed
/// as reals in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {}

  float at(int y, int x, int c) const {
    return static_cast<float>(pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]) / 255.0f;
  }
  void set(int y, int x, const std::array<double, 3>& rgb) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(rgb[static_cast<std::size_t>(c)], 0.0, 1.0);
      pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }

  /// (H*W) × 3 matrix of reals in [0, 1].
  template <typename T>
  Mat<T> to_matrix() const {
    Mat<T> m(static_cast<Eigen::Index>(height) * width, 3);
    for (std::size_t i = 0; i < pixels.size(); ++i) m.data()[i] = static_cast<T>(pixels[i]) / T(255);
    return m;
  }

  bool operator==(const Image&) const = default;
};

struct Distractor {
  int attr = 0;
  int obj = 0;
  Box box;
  bool operator==(const Distractor&) const = default;
};

struct SceneSample {
  Image image;
  Pair label;
  int clutter_level = 0;
  /// Generation metadata; never read by training code.
  std::vector<Distractor> clutter_meta;
  /// Diagnostic only; empty when loaded without diagnostics.
  std::optional<Box> object_box;
};

struct SceneConfig {
  int image_size = 256;
  int max_clutter = 8;
  /// Largest allowed IoU between a distractor and the target.
  double max_distractor_iou = 0.3;
};

namespace detail {

enum class Texture { kSolid, kStripes, kDots };

struct Style {
  std::array<double, 3> color{0.82, 0.82, 0.82};
  Texture texture = Texture::kSolid;
  double size_factor = 1.0;
};

inline Style style_for(const std::string& attr, int index) {
  static const std::map<std::string, Style> styles = {
      {"red", {{0.92, 0.16, 0.14}, Texture::kSolid, 1.0}},
      {"green", {{0.18, 0.80, 0.22}, Texture::kSolid, 1.0}},
      {"blue", {{0.16, 0.32, 0.95}, Texture::kSolid, 1.0}},
      {"yellow", {{0.95, 0.90, 0.15}, Texture::kSolid, 1.0}},
      {"purple", {{0.62, 0.22, 0.85}, Texture::kSolid, 1.0}},
      {"cyan", {{0.15, 0.88, 0.90}, Texture::kSolid, 1.0}},
      {"striped", {{0.85, 0.85, 0.85}, Texture::kStripes, 1.0}},
      {"dotted", {{0.85, 0.85, 0.85}, Texture::kDots, 1.0}},
      {"small", {{0.82, 0.82, 0.82}, Texture::kSolid, 0.68}},
      {"large", {{0.82, 0.82, 0.82}, Texture::kSolid, 1.38}},
  };
  if (auto it = styles.find(attr); it != styles.end()) return it->second;
  const auto& names = known_attributes();
  return styles.at(names[static_cast<std::size_t>(index) % names.size()]);
}

inline std::string shape_for(const std::string& obj, int index) {
  const auto& shapes = known_shapes();
  if (std::find(shapes.begin(), shapes.end(), obj) != shapes.end()) return obj;
  return shapes[static_cast<std::size_t>(index) % shapes.size()];
}

/// Membership test in normalised coordinates (u, v) ∈ [-1, 1]², y pointing down.
inline bool inside_shape(const std::string& shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double rho = std::sqrt(u * u + v * v);
  if (shape == "circle") return rho <= 1.0;
  if (shape == "square") return std::max(au, av) <= 0.85;
  if (shape == "triangle") return v <= 0.8 && v >= -1.0 && au <= (v + 1.0) / 1.8;
  if (shape == "diamond") return au + av <= 1.0;
  if (shape == "cross") return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
  if (shape == "hexagon") return av <= 0.866 && 1.732 * au + av <= 1.732;
  if (shape == "ring") return rho <= 1.0 && rho >= 0.55;
  if (shape == "ellipse") return u * u + v * v / 0.36 <= 1.0;
  if (shape == "bar") return au <= 1.0 && av <= 0.38;
  if (shape == "star") {
    const double theta = std::atan2(v, u) + std::numbers::pi / 2.0;
    const double lobe = 0.5 + 0.5 * std::cos(5.0 * theta);
    return rho <= 0.42 + 0.58 * lobe * lobe;
  }
  return rho <= 1.0;
}

inline void draw_shape(Image& img, const std::string& shape, const Style& style, double cx, double cy,
                       double half) {
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - half)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + half)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - half)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + half)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double u = (x + 0.5 - cx) / half;
      const double v = (y + 0.5 - cy) / half;
      if (!inside_shape(shape, u, v)) continue;
      std::array<double, 3> c = style.color;
      bool dark = false;
      if (style.texture == Texture::kStripes) {
        dark = ((x + y) / 5) % 2 == 0;
      } else if (style.texture == Texture::kDots) {
        const int mx = x % 9 - 4, my = y % 9 - 4;
        dark = mx * mx + my * my <= 6;
      }
      if (dark) c = {c[0] * 0.22, c[1] * 0.22, c[2] * 0.22};
      img.set(y, x, c);
    }
  }
}

}  // namespace detail

/// Renders one scene: a target shape carrying `pair`'s attribute, drawn on top
/// of `clutter_level` smaller distractor shapes over a noisy background. With
/// two or more distractors, the first one shares the target's attribute on a
/// different object.
inline SceneSample generate_scene(const Vocabulary& vocab, Pair pair, int clutter_level, std::uint64_t seed,
                                  const SceneConfig& cfg = {}) {
  check_pair(vocab, pair);
  if (clutter_level < 0 || clutter_level > cfg.max_clutter) {
    throw std::invalid_argument("clutter_level " + std::to_string(clutter_level) + " outside [0, " +
                                std::to_string(cfg.max_clutter) + "]");
  }
  const int size = cfg.image_size;
  if (size < 16) throw std::invalid_argument("image_size must be at least 16");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SceneSample s;
  s.image = Image(size, size);
  s.label = pair;
  s.clutter_level = clutter_level;

  // Background: dim vertical gradient with a random tint plus pixel noise.
  const std::array<double, 3> tint{0.08 + 0.14 * unit(rng), 0.08 + 0.14 * unit(rng), 0.08 + 0.14 * unit(rng)};
  const double slope = 0.10 * (unit(rng) - 0.5);
  std::normal_distribution<double> noise(0.0, 0.035);
  for (int y = 0; y < size; ++y) {
    const double g = slope * (static_cast<double>(y) / size - 0.5);
    for (int x = 0; x < size; ++x) {
      s.image.set(y, x, {tint[0] + g + noise(rng), tint[1] + g + noise(rng), tint[2] + g + noise(rng)});
    }
  }

  const detail::Style target_style = detail::style_for(vocab.attributes[static_cast<std::size_t>(pair.attr)], pair.attr);
  const double target_half = std::min(0.19 * size * target_style.size_factor * (0.9 + 0.2 * unit(rng)), 0.45 * size);
  const double tcx = target_half + unit(rng) * (size - 2.0 * target_half);
  const double tcy = target_half + unit(rng) * (size - 2.0 * target_half);
  const Box target_box{std::max(0.0, tcx - target_half), std::max(0.0, tcy - target_half),
                       std::min<double>(size, tcx + target_half), std::min<double>(size, tcy + target_half)};

  std::uniform_int_distribution<int> pick_attr(0, vocab.num_attributes() - 1);
  std::uniform_int_distribution<int> pick_obj(0, vocab.num_objects() - 1);
  for (int d = 0; d < clutter_level; ++d) {
    Distractor dist;
    const bool confounder = clutter_level >= 2 && d == 0;
    for (int tries = 0; tries < 100; ++tries) {
      dist.attr = confounder ? pair.attr : pick_attr(rng);
      dist.obj = pick_obj(rng);
      if (!(Pair{dist.attr, dist.obj} == pair)) break;
    }
    if (Pair{dist.attr, dist.obj} == pair) {
      // Only possible for single-object vocabularies; change the attribute instead.
      dist.attr = (pair.attr + 1) % vocab.num_attributes();
    }
    const detail::Style st = detail::style_for(vocab.attributes[static_cast<std::size_t>(dist.attr)], dist.attr);
    const double half = 0.11 * size * st.size_factor * (0.9 + 0.2 * unit(rng));
    Box best;
    double best_iou = 2.0;
    for (int tries = 0; tries < 200; ++tries) {
      const double cx = half + unit(rng) * (size - 2.0 * half);
      const double cy = half + unit(rng) * (size - 2.0 * half);
      const Box b{cx - half, cy - half, cx + half, cy + half};
      const double ov = iou(b, target_box);
      if (ov < best_iou) {
        best_iou = ov;
        best = b;
      }
      if (ov <= cfg.max_distractor_iou * 0.5) break;
    }
    dist.box = best;
    s.clutter_meta.push_back(dist);
  }

  for (const Distractor& d : s.clutter_meta) {
    const detail::Style st = detail::style_for(vocab.attributes[static_cast<std::size_t>(d.attr)], d.attr);
    detail::draw_shape(s.image, detail::shape_for(vocab.objects[static_cast<std::size_t>(d.obj)], d.obj), st,
                       0.5 * (d.box.x_min + d.box.x_max), 0.5 * (d.box.y_min + d.box.y_max), 0.5 * d.box.width());
  }
  detail::draw_shape(s.image, detail::shape_for(vocab.objects[static_cast<std::size_t>(pair.obj)], pair.obj),
                     target_style, tcx, tcy, target_half);
  s.object_box = target_box;
  return s;
}

// ---------------------------------------------------------------------------
// Lossless image files (binary PPM, 8-bit RGB).

inline void write_ppm(const fs::path& path, const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  io::atomic_write(path, out);
}

inline Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("missing image file: " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w <= 0 || h <= 0 || maxval != 255) throw ValidationError("malformed PPM: " + path.string());
  in.get();
  Image img(h, w);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw ValidationError("truncated PPM: " + path.string());
  return img;
}

// ---------------------------------------------------------------------------
// Manifest.

enum class SplitTag { kTrain, kVal, kTest };

inline const char* to_string(SplitTag t) {
  switch (t) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
  }
  return "?";
}

inline SplitTag split_tag_from(const std::string& s) {
  if (s == "train") return SplitTag::kTrain;
  if (s == "val") return SplitTag::kVal;
  if (s == "test") return SplitTag::kTest;
  throw ValidationError("unknown split tag '" + s + "'");
}

struct ManifestRecord {
  std::string path;  // relative to the manifest directory
  Pair label;
  SplitTag split = SplitTag::kTrain;
  int clutter_level = 0;
  std::optional<Box> object_box;
  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  int version = kVersion;
  std::uint64_t seed = 0;
  int image_size = 256;
  std::string config_hash;
  Vocabulary vocabulary;
  PairSplit split;
  std::vector<ManifestRecord> records;
  /// Directory the record paths are relative to (not serialised).
  fs::path root;

  bool operator==(const DatasetManifest& o) const {
    return version == o.version && seed == o.seed && image_size == o.image_size && config_hash == o.config_hash &&
           vocabulary == o.vocabulary && split == o.split && records == o.records;
  }

  std::vector<const ManifestRecord*> records_in(SplitTag tag) const {
    std::vector<const ManifestRecord*> out;
    for (const auto& r : records)
      if (r.split == tag) out.push_back(&r);
    return out;
  }
};

/// Checks that every record's label is allowed in its split: train records
/// must carry train pairs, val records train or val pairs, test records train
/// or test pairs.
inline void validate_records(const DatasetManifest& m) {
  for (const auto& r : m.records) {
    try {
      check_pair(m.vocabulary, r.label);
    } catch (const std::out_of_range& e) {
      throw ValidationError("record " + r.path + ": " + e.what());
    }
    const bool seen = m.split.is_train(r.label);
    bool ok = false;
    switch (r.split) {
      case SplitTag::kTrain: ok = seen; break;
      case SplitTag::kVal: ok = seen || m.split.is_val(r.label); break;
      case SplitTag::kTest: ok = seen || m.split.is_test(r.label); break;
    }
    if (!ok) {
      throw ValidationError("split violation: " + std::string(to_string(r.split)) + " record " + r.path +
                            " is labelled (" + m.vocabulary.attributes[static_cast<std::size_t>(r.label.attr)] + ", " +
                            m.vocabulary.objects[static_cast<std::size_t>(r.label.obj)] +
                            ") which is not allowed in that split");
    }
  }
}

namespace detail {

inline nlohmann::json pairs_to_json(const std::vector<Pair>& ps) {
  nlohmann::json j = nlohmann::json::array();
  for (Pair p : ps) j.push_back({p.attr, p.obj});
  return j;
}

inline std::vector<Pair> pairs_from_json(const nlohmann::json& j) {
  std::vector<Pair> out;
  for (const auto& e : j) {
    if (!e.is_array() || e.size() != 2) throw ValidationError("malformed pair entry in manifest");
    out.push_back({e[0].get<int>(), e[1].get<int>()});
  }
  return out;
}

inline nlohmann::json box_to_json(const Box& b) { return {b.x_min, b.y_min, b.x_max, b.y_max}; }

inline Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("malformed box in manifest");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace detail

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["image_size"] = m.image_size;
  j["config_hash"] = m.config_hash;
  j["vocabulary"] = {{"objects", m.vocabulary.objects}, {"attributes", m.vocabulary.attributes}};
  j["splits"] = {{"train", detail::pairs_to_json(m.split.train)},
                 {"val", detail::pairs_to_json(m.split.val)},
                 {"test", detail::pairs_to_json(m.split.test)}};
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json jr = {{"path", r.path},
                         {"attr", r.label.attr},
                         {"obj", r.label.obj},
                         {"split", to_string(r.split)},
                         {"clutter_level", r.clutter_level}};
    if (r.object_box) jr["diagnostics"] = {{"object_box", detail::box_to_json(*r.object_box)}};
    recs.push_back(std::move(jr));
  }
  j["records"] = std::move(recs);
  return j;
}

/// Writes every sample as `images/<split>_<index>.ppm` next to `path`, then the
/// manifest itself (atomically, last).
inline DatasetManifest write_manifest(const std::vector<std::pair<SplitTag, const SceneSample*>>& samples,
                                      const Vocabulary& vocab, const PairSplit& split, const fs::path& path,
                                      std::uint64_t seed, int image_size, const std::string& config_hash = "") {
  vocab.validate();
  split.validate(vocab);
  DatasetManifest m;
  m.seed = seed;
  m.image_size = image_size;
  m.config_hash = config_hash;
  m.vocabulary = vocab;
  m.split = split;
  m.root = path.parent_path();
  std::map<SplitTag, int> counter;
  for (const auto& [tag, sample] : samples) {
    ManifestRecord r;
    char name[64];
    std::snprintf(name, sizeof(name), "images/%s_%05d.ppm", to_string(tag), counter[tag]++);
    r.path = name;
    r.label = sample->label;
    r.split = tag;
    r.clutter_level = sample->clutter_level;
    r.object_box = sample->object_box;
    m.records.push_back(std::move(r));
  }
  validate_records(m);
  for (std::size_t i = 0; i < samples.size(); ++i) write_ppm(m.root / m.records[i].path, samples[i].second->image);
  io::atomic_write(path, manifest_to_json(m).dump(1));
  return m;
}

struct LoadOptions {
  /// Keep the diagnostic object boxes. Training entry points never set this.
  bool with_diagnostics = false;
  bool check_files = true;
};

inline DatasetManifest load_manifest(const fs::path& path, const LoadOptions& opts = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.version = j.at("version").get<int>();
    if (m.version != DatasetManifest::kVersion) throw ValidationError("unsupported manifest version " + std::to_string(m.version));
    m.seed = j.at("seed").get<std::uint64_t>();
    m.image_size = j.at("image_size").get<int>();
    m.config_hash = j.value("config_hash", "");
    m.vocabulary.objects = j.at("vocabulary").at("objects").get<std::vector<std::string>>();
    m.vocabulary.attributes = j.at("vocabulary").at("attributes").get<std::vector<std::string>>();
    m.split.train = detail::pairs_from_json(j.at("splits").at("train"));
    m.split.val = detail::pairs_from_json(j.at("splits").at("val"));
    m.split.test = detail::pairs_from_json(j.at("splits").at("test"));
    for (const auto& jr : j.at("records")) {
      ManifestRecord r;
      r.path = jr.at("path").get<std::string>();
      r.label = {jr.at("attr").get<int>(), jr.at("obj").get<int>()};
      r.split = split_tag_from(jr.at("split").get<std::string>());
      r.clutter_level = jr.value("clutter_level", 0);
      if (opts.with_diagnostics && jr.contains("diagnostics"))
        r.object_box = detail::box_from_json(jr["diagnostics"].at("object_box"));
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
  m.vocabulary.validate();
  m.split.validate(m.vocabulary);
  validate_records(m);
  if (opts.check_files) {
    std::vector<std::string> missing;
    for (const auto& r : m.records)
      if (!fs::exists(m.root / r.path)) missing.push_back((m.root / r.path).string());
    if (!missing.empty()) {
      std::string msg = "manifest references " + std::to_string(missing.size()) + " missing image file(s):";
      for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += " " + missing[i];
      throw MissingArtifactError(msg);
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// In-memory datasets.

struct DatasetConfig {
  int num_objects = 8;
  int num_attributes = 8;
  double unseen_fraction = 0.1875;  // 12 of 64 pairs
  double val_fraction = 0.0;
  int image_size = 256;
  int clutter_min = 0;
  int clutter_max = 4;
  int num_train = 2000;
  int num_val = 200;
  int num_test = 600;
  /// Share of test images drawn from unseen pairs.
  double test_unseen_share = 0.5;
  std::uint64_t seed = 0;
};

struct Dataset {
  Vocabulary vocabulary;
  PairSplit split;
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
  std::vector<SceneSample> test;
};

inline Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.clutter_min < 0 || cfg.clutter_max < cfg.clutter_min) throw ValidationError("invalid clutter range");
  Dataset ds;
  ds.vocabulary = default_vocabulary(cfg.num_objects, cfg.num_attributes);
  ds.split = build_split(ds.vocabulary, cfg.unseen_fraction, cfg.seed, cfg.val_fraction);
  SceneConfig scene_cfg;
  scene_cfg.image_size = cfg.image_size;
  scene_cfg.max_clutter = std::max(scene_cfg.max_clutter, cfg.clutter_max);

  std::mt19937_64 rng(derive_seed(cfg.seed, "labels"));
  std::uniform_int_distribution<int> clutter(cfg.clutter_min, cfg.clutter_max);
  auto draw = [&](const std::vector<Pair>& pool) {
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng)];
  };
  auto make = [&](const char* tag, int index, Pair p) {
    const int level = clutter(rng);
    return generate_scene(ds.vocabulary, p, level, derive_seed(cfg.seed, std::string(tag) + std::to_string(index)),
                          scene_cfg);
  };

  for (int i = 0; i < cfg.num_train; ++i) {
    // Cycle through train pairs so every seen pair is represented evenly.
    const Pair p = ds.split.train[static_cast<std::size_t>(i) % ds.split.train.size()];
    ds.train.push_back(make("train", i, p));
  }
  std::shuffle(ds.train.begin(), ds.train.end(), rng);
  std::vector<Pair> val_pool = ds.split.train;
  val_pool.insert(val_pool.end(), ds.split.val.begin(), ds.split.val.end());
  for (int i = 0; i < cfg.num_val; ++i) ds.val.push_back(make("val", i, draw(val_pool)));
  const int n_unseen = static_cast<int>(std::lround(cfg.test_unseen_share * cfg.num_test));
  for (int i = 0; i < cfg.num_test; ++i) {
    const bool unseen = i < n_unseen;
    const Pair p = unseen ? ds.split.test[static_cast<std::size_t>(i) % ds.split.test.size()] : draw(ds.split.train);
    ds.test.push_back(make("test", i, p));
  }
  return ds;
}

/// Image plus label only: the view every training entry point consumes.
struct TrainingSample {
  const Image* image = nullptr;
  Pair label;
};

inline std::vector<TrainingSample> training_view(std::span<const SceneSample> samples) {
  std::vector<TrainingSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({&s.image, s.label});
  return out;
}

inline std::vector<SceneSample> load_samples(const DatasetManifest& m, SplitTag tag) {
  std::vector<SceneSample> out;
  for (const auto* r : m.records_in(tag)) {
    SceneSample s;
    s.image = read_ppm(m.root / r->path);
    if (s.image.height != m.image_size || s.image.width != m.image_size)
      throw ValidationError("image " + r->path + " does not match manifest image_size");
    s.label = r->label;
    s.clutter_level = r->clutter_level;
    s.object_box = r->object_box;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace locl::data
