#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unihetero/core/rng.hpp"
#include "unihetero/io.hpp"

// Synthetic world of colored shapes on a grid. Each grid cell is one image
// token; a frozen handcrafted encoder supplies the semantic stream and a
// fixed orthogonal patch transform supplies the pixel stream.

namespace unihetero {

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow };

inline constexpr std::size_t kNumShapes = 3;
inline constexpr std::size_t kNumColors = 4;

inline constexpr std::array<const char*, kNumShapes> kShapeNames = {"circle", "square", "triangle"};
inline constexpr std::array<const char*, kNumColors> kColorNames = {"red", "green", "blue", "yellow"};
inline constexpr std::array<std::array<float, 3>, kNumColors> kPalette = {{
    {1.0f, 0.0f, 0.0f},
    {0.0f, 1.0f, 0.0f},
    {0.0f, 0.0f, 1.0f},
    {1.0f, 1.0f, 0.0f},
}};

struct WorldConfig {
  std::size_t grid = 4;
  std::size_t cell_px = 4;
  std::size_t semantic_dim = 32;
  std::uint64_t codec_seed = 0x5eedc0decafeULL;

  std::size_t tokens() const { return grid * grid; }
  std::size_t image_px() const { return grid * cell_px; }
  std::size_t pixel_dim() const { return cell_px * cell_px * 3; }
  friend bool operator==(const WorldConfig&, const WorldConfig&) = default;

  void validate() const {
    if (grid < 2 || grid > 4) throw std::invalid_argument("WorldConfig: grid must be in [2, 4]");
    if (cell_px < 2) throw std::invalid_argument("WorldConfig: cell_px must be >= 2");
    if (semantic_dim < 12) throw std::invalid_argument("WorldConfig: semantic_dim must be >= 12");
  }
};

inline void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = nlohmann::json{{"grid", c.grid}, {"cell_px", c.cell_px}, {"semantic_dim", c.semantic_dim}, {"codec_seed", c.codec_seed}};
}
inline void from_json(const nlohmann::json& j, WorldConfig& c) {
  c.grid = j.value("grid", c.grid);
  c.cell_px = j.value("cell_px", c.cell_px);
  c.semantic_dim = j.value("semantic_dim", c.semantic_dim);
  c.codec_seed = j.value("codec_seed", c.codec_seed);
}

// ---------------------------------------------------------------- vocabulary

/// Fixed token table. Grid positions are single tokens whose text contains a
/// space ("top left"), so every QA answer is exactly one token.
class Vocab {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kBoi = 3, kEoi = 4, kQ = 5, kA = 6;
  static constexpr int kWordA = 7, kAt = 8, kAnd = 9, kWhat = 10, kColorWord = 11, kShapeWord = 12, kIs = 13,
                       kThe = 14, kWhere = 15, kQuestion = 16;
  static constexpr int kFirstColor = 17;
  static constexpr int kFirstShape = kFirstColor + static_cast<int>(kNumColors);
  static constexpr int kFirstPosition = kFirstShape + static_cast<int>(kNumShapes);
  static constexpr std::size_t kMaxGrid = 4;
  static constexpr std::size_t kSize = static_cast<std::size_t>(kFirstPosition) + kMaxGrid * kMaxGrid;

  static const Vocab& instance() {
    static const Vocab vocab;
    return vocab;
  }

  std::size_t size() const { return strings_.size(); }
  const std::string& str(int id) const { return strings_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& s) const {
    const auto it = ids_.find(s);
    if (it == ids_.end()) throw std::out_of_range("unknown token '" + s + "'");
    return it->second;
  }

  static int color_token(Color c) { return kFirstColor + static_cast<int>(c); }
  static int shape_token(ShapeKind s) { return kFirstShape + static_cast<int>(s); }
  /// Positions are named on a 4x4 lattice; smaller grids use its corners and edges.
  static int position_token(std::size_t row, std::size_t col, std::size_t grid) {
    return kFirstPosition + static_cast<int>(lattice(row, grid) * kMaxGrid + lattice(col, grid));
  }
  static std::optional<Color> as_color(int id) {
    if (id >= kFirstColor && id < kFirstShape) return static_cast<Color>(id - kFirstColor);
    return std::nullopt;
  }
  static std::optional<ShapeKind> as_shape(int id) {
    if (id >= kFirstShape && id < kFirstPosition) return static_cast<ShapeKind>(id - kFirstShape);
    return std::nullopt;
  }
  /// (row, col) for a position token on the given grid.
  static std::optional<std::pair<std::size_t, std::size_t>> as_position(int id, std::size_t grid) {
    if (id < kFirstPosition || id >= static_cast<int>(kSize)) return std::nullopt;
    const std::size_t lr = static_cast<std::size_t>(id - kFirstPosition) / kMaxGrid;
    const std::size_t lc = static_cast<std::size_t>(id - kFirstPosition) % kMaxGrid;
    for (std::size_t r = 0; r < grid; ++r)
      for (std::size_t c = 0; c < grid; ++c)
        if (lattice(r, grid) == lr && lattice(c, grid) == lc) return std::make_pair(r, c);
    return std::nullopt;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ' ';
      s += str(ids[i]);
    }
    return s;
  }

  /// Greedy longest-match tokenization of space-separated text.
  std::vector<int> encode(const std::string& text) const {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
      if (ch == ' ') {
        if (!cur.empty()) words.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    if (!cur.empty()) words.push_back(cur);
    std::vector<int> out;
    for (std::size_t i = 0; i < words.size();) {
      if (i + 1 < words.size()) {
        const auto it = ids_.find(words[i] + " " + words[i + 1]);
        if (it != ids_.end()) {
          out.push_back(it->second);
          i += 2;
          continue;
        }
      }
      out.push_back(id(words[i]));
      ++i;
    }
    return out;
  }

 private:
  static std::size_t lattice(std::size_t i, std::size_t grid) {
    if (grid == kMaxGrid) return i;
    return (i * (kMaxGrid - 1) + (grid - 1) / 2) / (grid - 1);
  }

  Vocab() {
    strings_ = {"<pad>", "<bos>", "<eos>", "<boi>", "<eoi>", "<q>", "<a>",
                "a", "at", "and", "what", "color", "shape", "is", "the", "where", "?"};
    for (const char* c : kColorNames) strings_.emplace_back(c);
    for (const char* s : kShapeNames) strings_.emplace_back(s);
    static constexpr std::array<const char*, 4> rows = {"top", "upper", "lower", "bottom"};
    static constexpr std::array<const char*, 4> cols = {"left", "mid-left", "mid-right", "right"};
    for (const char* r : rows)
      for (const char* c : cols) strings_.push_back(std::string(r) + " " + c);
    for (std::size_t i = 0; i < strings_.size(); ++i) ids_[strings_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> strings_;
  std::map<std::string, int> ids_;
};

// ---------------------------------------------------------------- scenes

struct Object {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;
  friend bool operator==(const Object&, const Object&) = default;
};

struct Scene {
  std::size_t grid = 4;
  std::vector<std::optional<Object>> cells;  // row-major, grid * grid

  std::size_t object_count() const {
    return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](const auto& c) { return c.has_value(); }));
  }
  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Scenes must hold between one and three objects.
inline void validate_scene(const Scene& scene) {
  if (scene.cells.size() != scene.grid * scene.grid) throw std::invalid_argument("scene: cell count does not match grid");
  const std::size_t n = scene.object_count();
  if (n < 1 || n > 3) throw std::invalid_argument("scene: object count " + std::to_string(n) + " outside [1, 3]");
}

inline Scene make_scene(std::size_t grid, const std::vector<std::pair<std::size_t, Object>>& objects) {
  Scene scene{grid, std::vector<std::optional<Object>>(grid * grid)};
  for (const auto& [cell, obj] : objects) {
    if (cell >= scene.cells.size()) throw std::out_of_range("make_scene: cell out of range");
    if (scene.cells[cell]) throw std::invalid_argument("make_scene: two objects in one cell");
    scene.cells[cell] = obj;
  }
  validate_scene(scene);
  return scene;
}

inline Scene generate_scene(Rng& rng, std::size_t grid = 4) {
  Scene scene{grid, std::vector<std::optional<Object>>(grid * grid)};
  const std::size_t count = static_cast<std::size_t>(rng.uniform_int(1, 3));
  for (std::size_t cell : rng.choose(grid * grid, count)) {
    Object obj;
    obj.shape = static_cast<ShapeKind>(rng.index(kNumShapes));
    obj.color = static_cast<Color>(rng.index(kNumColors));
    scene.cells[cell] = obj;
  }
  return scene;
}

/// Pixel coverage of a shape inside a cell of side `px`.
inline bool shape_covers(ShapeKind shape, std::size_t px, std::size_t y, std::size_t x) {
  switch (shape) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      const double c = static_cast<double>(px) / 2.0;
      const double dy = static_cast<double>(y) + 0.5 - c, dx = static_cast<double>(x) + 0.5 - c;
      return dy * dy + dx * dx <= c * c;
    }
    case ShapeKind::Triangle:
      return x <= y;
  }
  return false;
}

/// H x W x 3 raster, black background, values in [0, 1].
inline std::vector<float> render(const Scene& scene, const WorldConfig& cfg) {
  const std::size_t w = scene.grid * cfg.cell_px;
  std::vector<float> raster(w * w * 3, 0.0f);
  for (std::size_t cell = 0; cell < scene.cells.size(); ++cell) {
    if (!scene.cells[cell]) continue;
    const auto& obj = *scene.cells[cell];
    const std::size_t r0 = (cell / scene.grid) * cfg.cell_px, c0 = (cell % scene.grid) * cfg.cell_px;
    for (std::size_t y = 0; y < cfg.cell_px; ++y)
      for (std::size_t x = 0; x < cfg.cell_px; ++x)
        if (shape_covers(obj.shape, cfg.cell_px, y, x))
          for (std::size_t ch = 0; ch < 3; ++ch)
            raster[((r0 + y) * w + (c0 + x)) * 3 + ch] = kPalette[static_cast<std::size_t>(obj.color)][ch];
  }
  return raster;
}

/// "a <color> <shape> at <position>", joined by "and", objects row-major.
inline std::vector<int> caption(const Scene& scene) {
  std::vector<int> out;
  for (std::size_t cell = 0; cell < scene.cells.size(); ++cell) {
    if (!scene.cells[cell]) continue;
    if (!out.empty()) out.push_back(Vocab::kAnd);
    out.push_back(Vocab::kWordA);
    out.push_back(Vocab::color_token(scene.cells[cell]->color));
    out.push_back(Vocab::shape_token(scene.cells[cell]->shape));
    out.push_back(Vocab::kAt);
    out.push_back(Vocab::position_token(cell / scene.grid, cell % scene.grid, scene.grid));
  }
  return out;
}

enum class AnswerKind : std::uint8_t { Color, Position, Shape };

struct QaPair {
  std::vector<int> question;
  int answer = 0;
  AnswerKind kind = AnswerKind::Color;
  friend bool operator==(const QaPair&, const QaPair&) = default;
};

/// One question per object attribute; questions whose referent is ambiguous are skipped.
inline std::vector<QaPair> qa_pairs(const Scene& scene) {
  std::vector<QaPair> out;
  std::vector<std::pair<std::size_t, Object>> objs;
  for (std::size_t cell = 0; cell < scene.cells.size(); ++cell)
    if (scene.cells[cell]) objs.emplace_back(cell, *scene.cells[cell]);
  for (const auto& [cell, obj] : objs) {
    const auto same_shape = std::count_if(objs.begin(), objs.end(), [&](const auto& o) { return o.second.shape == obj.shape; });
    const auto same_both = std::count_if(objs.begin(), objs.end(), [&](const auto& o) { return o.second == obj; });
    const int pos = Vocab::position_token(cell / scene.grid, cell % scene.grid, scene.grid);
    if (same_shape == 1) {
      out.push_back({{Vocab::kWhat, Vocab::kColorWord, Vocab::kIs, Vocab::kThe, Vocab::shape_token(obj.shape), Vocab::kQuestion},
                     Vocab::color_token(obj.color), AnswerKind::Color});
    }
    if (same_both == 1) {
      out.push_back({{Vocab::kWhere, Vocab::kIs, Vocab::kThe, Vocab::color_token(obj.color), Vocab::shape_token(obj.shape), Vocab::kQuestion},
                     pos, AnswerKind::Position});
    }
    out.push_back({{Vocab::kWhat, Vocab::kShapeWord, Vocab::kIs, Vocab::kAt, pos, Vocab::kQuestion},
                   Vocab::shape_token(obj.shape), AnswerKind::Shape});
  }
  return out;
}

/// Candidate answer tokens for a question kind (multiple-choice decoding).
inline std::vector<int> answer_candidates(AnswerKind kind, std::size_t grid) {
  std::vector<int> out;
  switch (kind) {
    case AnswerKind::Color:
      for (std::size_t c = 0; c < kNumColors; ++c) out.push_back(Vocab::color_token(static_cast<Color>(c)));
      break;
    case AnswerKind::Shape:
      for (std::size_t s = 0; s < kNumShapes; ++s) out.push_back(Vocab::shape_token(static_cast<ShapeKind>(s)));
      break;
    case AnswerKind::Position:
      for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t c = 0; c < grid; ++c) out.push_back(Vocab::position_token(r, c, grid));
      break;
  }
  return out;
}

// ---------------------------------------------------------------- reference parser

struct ObjectDesc {
  Color color = Color::Red;
  ShapeKind shape = ShapeKind::Circle;
  std::size_t row = 0, col = 0;
  friend bool operator==(const ObjectDesc&, const ObjectDesc&) = default;
};

/// Parses the caption grammar; a trailing EOS is accepted. nullopt on any
/// deviation.
inline std::optional<std::vector<ObjectDesc>> parse_caption(const std::vector<int>& tokens, std::size_t grid) {
  std::vector<int> t = tokens;
  if (!t.empty() && t.back() == Vocab::kEos) t.pop_back();
  std::vector<ObjectDesc> out;
  std::size_t i = 0;
  while (true) {
    if (i + 5 > t.size() || t[i] != Vocab::kWordA || t[i + 3] != Vocab::kAt) return std::nullopt;
    const auto color = Vocab::as_color(t[i + 1]);
    const auto shape = Vocab::as_shape(t[i + 2]);
    const auto pos = Vocab::as_position(t[i + 4], grid);
    if (!color || !shape || !pos) return std::nullopt;
    out.push_back({*color, *shape, pos->first, pos->second});
    i += 5;
    if (i == t.size()) break;
    if (t[i] != Vocab::kAnd) return std::nullopt;
    ++i;
  }
  return out;
}

/// Scene described by a caption; nullopt if unparseable or not a valid scene.
inline std::optional<Scene> scene_from_caption(const std::vector<int>& tokens, std::size_t grid) {
  const auto objs = parse_caption(tokens, grid);
  if (!objs) return std::nullopt;
  Scene scene{grid, std::vector<std::optional<Object>>(grid * grid)};
  for (const auto& o : *objs) {
    auto& cell = scene.cells[o.row * grid + o.col];
    if (cell) return std::nullopt;
    cell = Object{o.shape, o.color};
  }
  if (scene.object_count() < 1 || scene.object_count() > 3) return std::nullopt;
  return scene;
}

/// Answers a templated question by reading the scene. nullopt when the
/// question is malformed or ambiguous.
inline std::optional<int> answer_from_scene(const Scene& scene, const std::vector<int>& q) {
  if (q.size() != 6 || q.back() != Vocab::kQuestion) return std::nullopt;
  std::vector<std::pair<std::size_t, Object>> hits;
  for (std::size_t cell = 0; cell < scene.cells.size(); ++cell) {
    if (!scene.cells[cell]) continue;
    const auto& o = *scene.cells[cell];
    if (q[0] == Vocab::kWhat && q[1] == Vocab::kColorWord) {
      if (Vocab::as_shape(q[4]) == o.shape) hits.emplace_back(cell, o);
    } else if (q[0] == Vocab::kWhere) {
      if (Vocab::as_color(q[3]) == o.color && Vocab::as_shape(q[4]) == o.shape) hits.emplace_back(cell, o);
    } else if (q[0] == Vocab::kWhat && q[1] == Vocab::kShapeWord) {
      const auto pos = Vocab::as_position(q[4], scene.grid);
      if (pos && pos->first * scene.grid + pos->second == cell) hits.emplace_back(cell, o);
    }
  }
  if (hits.size() != 1) return std::nullopt;
  const auto& [cell, o] = hits.front();
  if (q[1] == Vocab::kColorWord) return Vocab::color_token(o.color);
  if (q[0] == Vocab::kWhere) return Vocab::position_token(cell / scene.grid, cell % scene.grid, scene.grid);
  return Vocab::shape_token(o.shape);
}

// ---------------------------------------------------------------- frozen encoders

namespace detail {

inline bool pixel_on(const std::vector<float>& raster, std::size_t width, std::size_t y, std::size_t x) {
  const float* p = raster.data() + (y * width + x) * 3;
  return std::max({p[0], p[1], p[2]}) > 0.5f;
}

struct CellStats {
  std::array<double, 3> mean_rgb{};
  std::array<double, kNumColors> hist{};
  double occupancy = 0, edge = 0, fill = 0;
};

inline CellStats cell_stats(const std::vector<float>& raster, const WorldConfig& cfg, std::size_t cell) {
  const std::size_t w = cfg.image_px(), px = cfg.cell_px;
  const std::size_t r0 = (cell / cfg.grid) * px, c0 = (cell % cfg.grid) * px;
  CellStats s;
  std::size_t on = 0, edges = 0;
  auto occupied = [&](long y, long x) {
    if (y < 0 || x < 0 || y >= static_cast<long>(px) || x >= static_cast<long>(px)) return false;
    return pixel_on(raster, w, r0 + static_cast<std::size_t>(y), c0 + static_cast<std::size_t>(x));
  };
  for (std::size_t y = 0; y < px; ++y) {
    for (std::size_t x = 0; x < px; ++x) {
      const float* p = raster.data() + ((r0 + y) * w + (c0 + x)) * 3;
      for (std::size_t ch = 0; ch < 3; ++ch) s.mean_rgb[ch] += p[ch];
      if (!occupied(static_cast<long>(y), static_cast<long>(x))) continue;
      ++on;
      std::size_t best = 0;
      double best_d = 1e30;
      for (std::size_t c = 0; c < kNumColors; ++c) {
        double d = 0;
        for (std::size_t ch = 0; ch < 3; ++ch) d += (p[ch] - kPalette[c][ch]) * (p[ch] - kPalette[c][ch]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      s.hist[best] += 1.0;
      const long yy = static_cast<long>(y), xx = static_cast<long>(x);
      if (!occupied(yy - 1, xx) || !occupied(yy + 1, xx) || !occupied(yy, xx - 1) || !occupied(yy, xx + 1)) ++edges;
    }
  }
  const double area = static_cast<double>(px * px);
  for (auto& m : s.mean_rgb) m /= area;
  if (on > 0)
    for (auto& h : s.hist) h /= static_cast<double>(on);
  s.occupancy = on > 0 ? 1.0 : 0.0;
  s.edge = static_cast<double>(edges) / area;
  s.fill = static_cast<double>(on) / area;
  return s;
}

}  // namespace detail

/// Index ranges of the semantic feature blocks.
struct SemanticLayout {
  static constexpr std::size_t kRgb = 0;        // 3
  static constexpr std::size_t kHist = 3;       // 4
  static constexpr std::size_t kOccupancy = 7;  // 1
  static constexpr std::size_t kEdge = 8;
  static constexpr std::size_t kFill = 9;
  static constexpr std::size_t kPosition = 10;  // 2
  static constexpr std::size_t kUsed = 12;
};

/// Frozen per-cell semantic features, grid^2 rows of semantic_dim floats.
inline std::vector<float> encode_semantic(const std::vector<float>& raster, const WorldConfig& cfg) {
  if (raster.size() != cfg.image_px() * cfg.image_px() * 3) throw std::invalid_argument("encode_semantic: raster size mismatch");
  const std::size_t ds = cfg.semantic_dim;
  std::vector<float> out(cfg.tokens() * ds, 0.0f);
  for (std::size_t cell = 0; cell < cfg.tokens(); ++cell) {
    const auto s = detail::cell_stats(raster, cfg, cell);
    float* f = out.data() + cell * ds;
    for (std::size_t i = 0; i < 3; ++i) f[SemanticLayout::kRgb + i] = static_cast<float>(s.mean_rgb[i]);
    for (std::size_t i = 0; i < kNumColors; ++i) f[SemanticLayout::kHist + i] = static_cast<float>(s.hist[i]);
    f[SemanticLayout::kOccupancy] = static_cast<float>(s.occupancy);
    f[SemanticLayout::kEdge] = static_cast<float>(s.edge);
    f[SemanticLayout::kFill] = static_cast<float>(s.fill);
    f[SemanticLayout::kPosition] = static_cast<float>((static_cast<double>(cell / cfg.grid) + 0.5) / static_cast<double>(cfg.grid));
    f[SemanticLayout::kPosition + 1] = static_cast<float>((static_cast<double>(cell % cfg.grid) + 0.5) / static_cast<double>(cfg.grid));
  }
  return out;
}

struct CellClass {
  bool occupied = false;
  Color color = Color::Red;
  ShapeKind shape = ShapeKind::Circle;
};

/// Deterministic per-cell classifier over a raster (inverse of the semantic
/// encoder's color, occupancy and shape blocks).
inline std::vector<CellClass> classify_cells(const std::vector<float>& raster, const WorldConfig& cfg) {
  std::array<std::pair<double, double>, kNumShapes> proto{};
  for (std::size_t s = 0; s < kNumShapes; ++s) {
    const Scene one = make_scene(cfg.grid, {{0, Object{static_cast<ShapeKind>(s), Color::Red}}});
    const auto st = detail::cell_stats(render(one, cfg), cfg, 0);
    proto[s] = {st.fill, st.edge};
  }
  std::vector<CellClass> out(cfg.tokens());
  for (std::size_t cell = 0; cell < cfg.tokens(); ++cell) {
    const auto st = detail::cell_stats(raster, cfg, cell);
    auto& c = out[cell];
    c.occupied = st.occupancy > 0.0;
    if (!c.occupied) continue;
    c.color = static_cast<Color>(std::max_element(st.hist.begin(), st.hist.end()) - st.hist.begin());
    double best = 1e30;
    for (std::size_t s = 0; s < kNumShapes; ++s) {
      const double d = (st.fill - proto[s].first) * (st.fill - proto[s].first) + (st.edge - proto[s].second) * (st.edge - proto[s].second);
      if (d < best) {
        best = d;
        c.shape = static_cast<ShapeKind>(s);
      }
    }
  }
  return out;
}

/// Fixed orthogonal transform between a cell's pixels and its latent.
class PixelCodec {
 public:
  explicit PixelCodec(const WorldConfig& cfg) : cfg_(cfg), dim_(cfg.pixel_dim()), q_(dim_ * dim_) {
    Rng rng(cfg.codec_seed);
    std::vector<double> m(dim_ * dim_);
    for (auto& v : m) v = rng.normal();
    // Modified Gram-Schmidt over rows, two passes.
    for (std::size_t i = 0; i < dim_; ++i) {
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < i; ++j) {
          double dot = 0;
          for (std::size_t k = 0; k < dim_; ++k) dot += m[i * dim_ + k] * m[j * dim_ + k];
          for (std::size_t k = 0; k < dim_; ++k) m[i * dim_ + k] -= dot * m[j * dim_ + k];
        }
      }
      double norm = 0;
      for (std::size_t k = 0; k < dim_; ++k) norm += m[i * dim_ + k] * m[i * dim_ + k];
      norm = std::sqrt(norm);
      for (std::size_t k = 0; k < dim_; ++k) m[i * dim_ + k] /= norm;
    }
    for (std::size_t i = 0; i < q_.size(); ++i) q_[i] = static_cast<float>(m[i]);
  }

  std::size_t dim() const { return dim_; }
  const std::vector<float>& matrix() const { return q_; }

  /// grid^2 latents of pixel_dim floats: latent = Q * vec(patch).
  std::vector<float> encode(const std::vector<float>& raster) const {
    const std::size_t w = cfg_.image_px(), px = cfg_.cell_px;
    if (raster.size() != w * w * 3) throw std::invalid_argument("encode_pixel: raster size mismatch");
    std::vector<float> out(cfg_.tokens() * dim_);
    std::vector<double> patch(dim_);
    for (std::size_t cell = 0; cell < cfg_.tokens(); ++cell) {
      extract(raster, cell, patch);
      for (std::size_t i = 0; i < dim_; ++i) {
        double acc = 0;
        for (std::size_t k = 0; k < dim_; ++k) acc += static_cast<double>(q_[i * dim_ + k]) * patch[k];
        out[cell * dim_ + i] = static_cast<float>(acc);
      }
    }
    (void)px;
    return out;
  }

  /// Inverse transform: raster = assemble(Q^T * latent).
  std::vector<float> decode(const std::vector<float>& latents) const {
    if (latents.size() != cfg_.tokens() * dim_)
      throw std::invalid_argument("decode_pixel: expected " + std::to_string(cfg_.tokens()) + " latents of width " +
                                  std::to_string(dim_) + ", got " + std::to_string(latents.size()) + " floats");
    const std::size_t w = cfg_.image_px(), px = cfg_.cell_px;
    std::vector<float> raster(w * w * 3);
    for (std::size_t cell = 0; cell < cfg_.tokens(); ++cell) {
      const std::size_t r0 = (cell / cfg_.grid) * px, c0 = (cell % cfg_.grid) * px;
      for (std::size_t k = 0; k < dim_; ++k) {
        double acc = 0;
        for (std::size_t i = 0; i < dim_; ++i) acc += static_cast<double>(q_[i * dim_ + k]) * latents[cell * dim_ + i];
        const std::size_t y = k / (px * 3), x = (k / 3) % px, ch = k % 3;
        raster[((r0 + y) * w + (c0 + x)) * 3 + ch] = static_cast<float>(acc);
      }
    }
    return raster;
  }

 private:
  void extract(const std::vector<float>& raster, std::size_t cell, std::vector<double>& patch) const {
    const std::size_t w = cfg_.image_px(), px = cfg_.cell_px;
    const std::size_t r0 = (cell / cfg_.grid) * px, c0 = (cell % cfg_.grid) * px;
    for (std::size_t y = 0; y < px; ++y)
      for (std::size_t x = 0; x < px; ++x)
        for (std::size_t ch = 0; ch < 3; ++ch) patch[(y * px + x) * 3 + ch] = raster[((r0 + y) * w + (c0 + x)) * 3 + ch];
  }

  WorldConfig cfg_;
  std::size_t dim_;
  std::vector<float> q_;
};

// ---------------------------------------------------------------- samples & corpus

struct ToySample {
  Scene scene;
  std::vector<float> raster;
  std::vector<int> caption;
  std::vector<QaPair> qa;
  std::vector<float> semantic;  // tokens x semantic_dim
  std::vector<float> pixel;     // tokens x pixel_dim
  friend bool operator==(const ToySample&, const ToySample&) = default;
};

inline ToySample make_sample(const Scene& scene, const WorldConfig& cfg, const PixelCodec& codec) {
  validate_scene(scene);
  ToySample s;
  s.scene = scene;
  s.raster = render(scene, cfg);
  s.caption = caption(scene);
  s.qa = qa_pairs(scene);
  s.semantic = encode_semantic(s.raster, cfg);
  s.pixel = codec.encode(s.raster);
  return s;
}

/// Sample `index` of the stream `seed`; depends on (seed, index) only.
inline ToySample generate_sample(std::uint64_t seed, std::uint64_t index, const WorldConfig& cfg, const PixelCodec& codec) {
  Rng rng(mix_seed(seed, index));
  return make_sample(generate_scene(rng, cfg.grid), cfg, codec);
}

inline std::vector<ToySample> generate_corpus(std::uint64_t seed, std::size_t count, const WorldConfig& cfg) {
  const PixelCodec codec(cfg);
  std::vector<ToySample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(seed, i, cfg, codec));
  return out;
}

/// Held-out samples come from a stream disjoint from the training corpus.
inline std::vector<ToySample> generate_heldout(std::uint64_t seed, std::size_t count, const WorldConfig& cfg) {
  return generate_corpus(mix_seed(seed, 0x4e1d0a7ULL), count, cfg);
}

inline std::vector<std::uint8_t> serialize_sample(const ToySample& s) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(s.scene.grid));
  for (const auto& cell : s.scene.cells)
    w.u8(cell ? static_cast<std::uint8_t>(static_cast<unsigned>(cell->shape) * kNumColors + static_cast<unsigned>(cell->color)) : 0xFF);
  w.f32_array(s.raster);
  w.u32(static_cast<std::uint32_t>(s.caption.size()));
  for (int t : s.caption) w.u32(static_cast<std::uint32_t>(t));
  w.u32(static_cast<std::uint32_t>(s.qa.size()));
  for (const auto& qa : s.qa) {
    w.u32(static_cast<std::uint32_t>(qa.question.size()));
    for (int t : qa.question) w.u32(static_cast<std::uint32_t>(t));
    w.u32(static_cast<std::uint32_t>(qa.answer));
    w.u8(static_cast<std::uint8_t>(qa.kind));
  }
  w.f32_array(s.semantic);
  w.f32_array(s.pixel);
  return w.take();
}

inline ToySample deserialize_sample(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "sample record");
  ToySample s;
  s.scene.grid = r.u32();
  if (s.scene.grid == 0 || s.scene.grid > Vocab::kMaxGrid) throw std::runtime_error("sample record: bad grid");
  s.scene.cells.resize(s.scene.grid * s.scene.grid);
  for (auto& cell : s.scene.cells) {
    const std::uint8_t code = r.u8();
    if (code != 0xFF) cell = Object{static_cast<ShapeKind>(code / kNumColors), static_cast<Color>(code % kNumColors)};
  }
  s.raster = r.f32_array();
  s.caption.resize(r.u32());
  for (auto& t : s.caption) t = static_cast<int>(r.u32());
  s.qa.resize(r.u32());
  for (auto& qa : s.qa) {
    qa.question.resize(r.u32());
    for (auto& t : qa.question) t = static_cast<int>(r.u32());
    qa.answer = static_cast<int>(r.u32());
    qa.kind = static_cast<AnswerKind>(r.u8());
  }
  s.semantic = r.f32_array();
  s.pixel = r.f32_array();
  if (!r.done()) throw std::runtime_error("sample record: trailing bytes");
  return s;
}

/// Corpus file: sequence of (u32 little-endian length, serialized sample).
inline std::vector<std::uint8_t> serialize_corpus(const std::vector<ToySample>& samples) {
  ByteWriter w;
  for (const auto& s : samples) {
    const auto rec = serialize_sample(s);
    w.u32(static_cast<std::uint32_t>(rec.size()));
    w.bytes(rec);
  }
  return w.take();
}

inline std::vector<ToySample> deserialize_corpus(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "corpus");
  std::vector<ToySample> out;
  while (!r.done()) {
    const std::uint32_t len = r.u32();
    out.push_back(deserialize_sample(r.take(len)));
  }
  return out;
}

struct CorpusFiles {
  std::filesystem::path data;
  std::filesystem::path manifest;
};

inline CorpusFiles corpus_paths(const std::filesystem::path& dir) {
  return {dir / "corpus.bin", dir / "manifest.json"};
}

/// Writes corpus.bin and manifest.json under `dir`; returns the manifest.
inline nlohmann::json export_corpus(const std::filesystem::path& dir, std::uint64_t seed, std::size_t count, const WorldConfig& cfg) {
  const auto samples = generate_corpus(seed, count, cfg);
  const auto bytes = serialize_corpus(samples);
  const auto files = corpus_paths(dir);
  write_file(files.data, bytes);
  nlohmann::json world = cfg;
  nlohmann::json manifest = {
      {"format", "unihetero-corpus"},
      {"version", 1},
      {"seed", seed},
      {"count", count},
      {"world", world},
      {"config_digest", to_hex(sha256(world.dump()))},
      {"corpus_digest", to_hex(sha256(bytes))},
  };
  write_text(files.manifest, manifest.dump(2) + "\n");
  return manifest;
}

struct LoadedCorpus {
  nlohmann::json manifest;
  WorldConfig world;
  std::vector<ToySample> samples;
};

class MissingCorpus : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline LoadedCorpus load_corpus(const std::filesystem::path& dir) {
  const auto files = corpus_paths(dir);
  if (!std::filesystem::exists(files.data) || !std::filesystem::exists(files.manifest))
    throw MissingCorpus("corpus not found under " + dir.string());
  LoadedCorpus out;
  out.manifest = nlohmann::json::parse(read_text(files.manifest));
  out.world = out.manifest.at("world").get<WorldConfig>();
  const auto bytes = read_file(files.data);
  if (to_hex(sha256(bytes)) != out.manifest.at("corpus_digest").get<std::string>())
    throw std::runtime_error("corpus digest does not match manifest in " + dir.string());
  out.samples = deserialize_corpus(bytes);
  return out;
}

}  // namespace unihetero
