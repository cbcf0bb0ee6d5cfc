#include <rtgen/synthdata.hpp>

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace rtgen {
namespace {

using json = nlohmann::ordered_json;

struct PixelBox {
  int x0, y0, x1, y1;  // half-open

  bool overlaps(const PixelBox& o) const { return x0 < o.x1 && o.x0 < x1 && y0 < o.y1 && o.y0 < y1; }
};

bool covers(const std::string& shape, double px, double py, int x0, int y0, int size) {
  const double half = 0.5 * size;
  const double cx = x0 + half;
  const double cy = y0 + half;
  if (shape == "square") return true;
  if (shape == "circle") return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= half * half;
  if (shape == "triangle") return std::abs(px - cx) <= 0.5 * (py - y0) + 0.5;
  if (shape == "diamond") return std::abs(px - cx) + std::abs(py - cy) <= half + 0.5;
  return false;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Augmentation

DetectionSample augment_sample(const DetectionSample& sample, std::mt19937_64& rng, int max_shift,
                               std::array<std::uint8_t, 3> background) {
  const int size = sample.image.width;
  if (sample.image.height != size) throw std::invalid_argument("augment_sample needs a square image");
  const int op = uniform_int(rng, 0, 7);
  const bool transpose = (op & 4) != 0;
  const bool flip_x = (op & 1) != 0;
  const bool flip_y = (op & 2) != 0;
  const double extent = static_cast<double>(size);
  auto map_point = [&](double x, double y) {
    if (transpose) std::swap(x, y);
    if (flip_x) x = extent - x;
    if (flip_y) y = extent - y;
    return std::pair{x, y};
  };

  std::vector<BoxXyxy> pixel_boxes;
  double lo_x = extent;
  double hi_x = 0.0;
  double lo_y = extent;
  double hi_y = 0.0;
  for (const auto& b : sample.boxes) {
    const BoxXyxy xy = to_xyxy(b);
    const auto [ax, ay] = map_point(xy[0] * extent, xy[1] * extent);
    const auto [bx, by] = map_point(xy[2] * extent, xy[3] * extent);
    const BoxXyxy mapped{std::min(ax, bx), std::min(ay, by), std::max(ax, bx), std::max(ay, by)};
    lo_x = std::min(lo_x, mapped[0]);
    hi_x = std::max(hi_x, mapped[2]);
    lo_y = std::min(lo_y, mapped[1]);
    hi_y = std::max(hi_y, mapped[3]);
    pixel_boxes.push_back(mapped);
  }
  // Every box keeps x1 >= 0 and x2 <= size after the shift.
  const int dx_min = std::max(-max_shift, -static_cast<int>(std::floor(pixel_boxes.empty() ? 0.0 : lo_x)));
  const int dx_max = std::min(max_shift, static_cast<int>(std::floor(pixel_boxes.empty() ? 0.0 : extent - hi_x)));
  const int dy_min = std::max(-max_shift, -static_cast<int>(std::floor(pixel_boxes.empty() ? 0.0 : lo_y)));
  const int dy_max = std::min(max_shift, static_cast<int>(std::floor(pixel_boxes.empty() ? 0.0 : extent - hi_y)));
  const int dx = pixel_boxes.empty() ? 0 : uniform_int(rng, std::min(dx_min, dx_max), std::max(dx_min, dx_max));
  const int dy = pixel_boxes.empty() ? 0 : uniform_int(rng, std::min(dy_min, dy_max), std::max(dy_min, dy_max));

  DetectionSample out;
  out.names = sample.names;
  out.image = Image(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      // Pixel centers map like points; invert the shift first.
      const int ux = x - dx;
      const int uy = y - dy;
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = background[static_cast<std::size_t>(c)];
      if (ux < 0 || ux >= size || uy < 0 || uy >= size) continue;
      int sx = flip_x ? size - 1 - ux : ux;
      int sy = flip_y ? size - 1 - uy : uy;
      if (transpose) std::swap(sx, sy);
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = sample.image.at(sy, sx, c);
    }
  }
  for (const auto& b : pixel_boxes) {
    out.boxes.push_back(to_cxcywh({(b[0] + dx) / extent, (b[1] + dy) / extent, (b[2] + dx) / extent, (b[3] + dy) / extent}));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  words_.emplace_back(kPadWord);
  words_.emplace_back(kEndWord);
  for (const auto& w : words) {
    if (w.empty() || std::any_of(w.begin(), w.end(), [](unsigned char c) { return std::isspace(c); })) {
      throw VocabularyError("vocabulary words must be non-empty and contain no whitespace: '" + w + "'");
    }
    words_.push_back(w);
  }
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!ids_.emplace(words_[i], static_cast<TokenId>(i)).second) {
      throw VocabularyError("duplicate vocabulary word '" + words_[i] + "'");
    }
  }
}

TokenId Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) throw VocabularyError("unknown word '" + std::string(word) + "'");
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw VocabularyError("token id " + std::to_string(id) + " out of range");
  }
  return words_[static_cast<std::size_t>(id)];
}

TokenSequence tokenize(std::string_view name, const Vocabulary& vocab) {
  TokenSequence ids;
  std::istringstream words{std::string(name)};
  for (std::string w; words >> w;) {
    const TokenId id = vocab.id(w);
    if (id == kPadToken || id == kEndToken) throw VocabularyError("reserved word '" + w + "' in name");
    ids.push_back(id);
  }
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (TokenId id : ids) {
    if (id == kPadToken || id == kEndToken) throw VocabularyError("reserved token id " + std::to_string(id));
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene generation

void GenConfig::validate() const {
  if (image_size <= 0) throw std::invalid_argument("image_size must be positive");
  if (min_shapes < 0 || max_shapes < min_shapes) throw std::invalid_argument("shape count range is empty");
  if (colors.empty() || shapes.empty()) throw std::invalid_argument("need at least one color and one shape");
  if (min_size < 2 || max_size < min_size || max_size > image_size) throw std::invalid_argument("bad size range");
  if (size_gap < 0) throw std::invalid_argument("size_gap must be non-negative");
  bool any_size = false;
  for (int s = min_size; s <= max_size; ++s) {
    any_size = any_size || !((s > small_up_to && s <= small_up_to + size_gap) || (s < large_from && s >= large_from - size_gap));
  }
  if (!any_size) throw std::invalid_argument("size_gap leaves no drawable size");
  for (const auto& s : shapes) {
    if (s != "circle" && s != "square" && s != "triangle" && s != "diamond") {
      throw std::invalid_argument("unknown shape '" + s + "'");
    }
  }
}

Vocabulary synthetic_vocabulary(const GenConfig& cfg) {
  std::vector<std::string> words{"small", "large"};
  for (const auto& c : cfg.colors) words.push_back(c.name);
  for (const auto& s : cfg.shapes) words.push_back(s);
  return Vocabulary(words);
}

DetectionSample generate_scene(std::uint64_t seed, const GenConfig& cfg, const Vocabulary& vocab) {
  std::mt19937_64 rng(seed);
  const int side = cfg.image_size;
  DetectionSample sample;
  sample.image = Image(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      for (int c = 0; c < 3; ++c) sample.image.at(y, x, c) = cfg.background[static_cast<std::size_t>(c)];
    }
  }

  std::vector<int> sizes;
  for (int s = cfg.min_size; s <= cfg.max_size; ++s) {
    const bool near_small = s > cfg.small_up_to && s <= cfg.small_up_to + cfg.size_gap;
    const bool near_large = s < cfg.large_from && s >= cfg.large_from - cfg.size_gap;
    if (!near_small && !near_large) sizes.push_back(s);
  }
  const int count = uniform_int(rng, cfg.min_shapes, cfg.max_shapes);
  std::vector<PixelBox> placed;
  for (int n = 0; n < count; ++n) {
    const auto& color = cfg.colors[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cfg.colors.size()) - 1))];
    const auto& shape = cfg.shapes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(cfg.shapes.size()) - 1))];
    const int size = sizes[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(sizes.size()) - 1))];
    PixelBox box{};
    for (int attempt = 0; attempt < cfg.placement_attempts; ++attempt) {
      const int x0 = uniform_int(rng, 0, side - size);
      const int y0 = uniform_int(rng, 0, side - size);
      box = {x0, y0, x0 + size, y0 + size};
      if (std::none_of(placed.begin(), placed.end(), [&](const PixelBox& p) { return p.overlaps(box); })) break;
    }
    placed.push_back(box);

    int min_x = side, min_y = side, max_x = -1, max_y = -1;
    for (int y = box.y0; y < box.y1; ++y) {
      for (int x = box.x0; x < box.x1; ++x) {
        if (!covers(shape, x + 0.5, y + 0.5, box.x0, box.y0, size)) continue;
        for (int c = 0; c < 3; ++c) sample.image.at(y, x, c) = color.rgb[static_cast<std::size_t>(c)];
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
    }
    const double s = side;
    sample.boxes.push_back(to_cxcywh({min_x / s, min_y / s, (max_x + 1) / s, (max_y + 1) / s}));

    std::string name;
    if (size <= cfg.small_up_to) name = "small ";
    else if (size >= cfg.large_from) name = "large ";
    name += color.name + " " + shape;
    sample.names.push_back(tokenize(name, vocab));
  }
  return sample;
}

// ---------------------------------------------------------------------------
// PPM

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open " + path.string() + " for writing");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw DatasetError("failed writing " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> DatasetError {
    return DatasetError(path.string() + ": offset " + std::to_string(pos) + ": " + what);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos || pos - start > 9) {
      pos = start;
      throw fail(std::string("expected ") + what);
    }
    return std::stoi(bytes.substr(start, pos - start));
  };
  if (bytes.compare(0, 2, "P6") != 0) throw fail("missing P6 magic");
  pos = 2;
  const int width = read_int("width");
  const int height = read_int("height");
  const int maxval = read_int("maxval");
  if (width <= 0 || height <= 0) throw fail("non-positive image size");
  if (maxval != 255) throw fail("maxval must be 255");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("missing header terminator");
  ++pos;
  Image image(width, height);
  if (bytes.size() - pos != image.rgb.size()) throw fail("pixel data has wrong length");
  std::copy(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), image.rgb.begin());
  return image;
}

// ---------------------------------------------------------------------------
// Dataset directory

namespace {

std::string image_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04zu.ppm", index + 1);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  json doc;
  doc["version"] = kDatasetVersion;
  doc["vocab"] = dataset.vocab.entries();
  json samples = json::array();
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (s.boxes.size() != s.names.size()) throw DatasetError("sample " + std::to_string(i) + ": boxes/names size mismatch");
    const std::string file = image_file_name(i);
    write_ppm(dir / file, s.image);
    json boxes = json::array();
    for (const auto& b : s.boxes) boxes.push_back(b);
    samples.push_back({{"image", file}, {"boxes", boxes}, {"names", s.names}});
  }
  doc["samples"] = std::move(samples);
  std::ofstream out(dir / "annotations.json");
  if (!out) throw DatasetError("cannot write " + (dir / "annotations.json").string());
  out << doc.dump(1) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto ann_path = dir / "annotations.json";
  std::ifstream in(ann_path);
  if (!in) throw DatasetError("cannot open " + ann_path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t offset = e.byte;
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(std::min(offset, text.size())), '\n');
    throw DatasetError(ann_path.string() + ": line " + std::to_string(line) + ", offset " + std::to_string(offset) +
                       ": " + e.what());
  }
  auto where = [&](const std::string& ctx) { return ann_path.string() + ": " + ctx; };
  try {
    if (doc.at("version").get<int>() != kDatasetVersion) throw DatasetError(where("unsupported dataset version"));
    auto entries = doc.at("vocab").get<std::vector<std::string>>();
    if (entries.size() < 2 || entries[0] != Vocabulary::kPadWord || entries[1] != Vocabulary::kEndWord) {
      throw DatasetError(where("vocab must start with reserved entries"));
    }
    Dataset ds{Vocabulary(std::vector<std::string>(entries.begin() + 2, entries.end())), {}};
    const auto& samples = doc.at("samples");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& js = samples[i];
      const std::string ctx = "sample " + std::to_string(i);
      DetectionSample s;
      s.image = read_ppm(dir / js.at("image").get<std::string>());
      for (const auto& b : js.at("boxes")) s.boxes.push_back(b.get<BoxCxcywh>());
      s.names = js.at("names").get<std::vector<TokenSequence>>();
      if (s.boxes.size() != s.names.size()) throw DatasetError(where(ctx + ": boxes/names size mismatch"));
      for (const auto& name : s.names) {
        for (TokenId id : name) {
          if (id <= kEndToken || static_cast<std::size_t>(id) >= ds.vocab.size()) {
            throw DatasetError(where(ctx + ": token id " + std::to_string(id) + " invalid"));
          }
        }
      }
      ds.samples.push_back(std::move(s));
    }
    return ds;
  } catch (const json::exception& e) {
    throw DatasetError(where(std::string("schema error: ") + e.what()));
  } catch (const VocabularyError& e) {
    throw DatasetError(where(e.what()));
  }
}

}  // namespace rtgen
