#include <rtgen/commands.hpp>
#include <rtgen/synthdata.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

using namespace rtgen;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rtgen_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct PixelRect {
  int x0, y0, x1, y1;
};

PixelRect to_pixels(const BoxCxcywh& box, int side) {
  const BoxXyxy b = to_xyxy(box);
  return {static_cast<int>(std::lround(b[0] * side)), static_cast<int>(std::lround(b[1] * side)),
          static_cast<int>(std::lround(b[2] * side)), static_cast<int>(std::lround(b[3] * side))};
}

bool is_background(const Image& img, int y, int x, const std::array<std::uint8_t, 3>& bg) {
  return img.at(y, x, 0) == bg[0] && img.at(y, x, 1) == bg[1] && img.at(y, x, 2) == bg[2];
}

// Every painted pixel lies in some box, and every box edge touches paint.
void check_boxes_are_tight(const DetectionSample& s, const std::array<std::uint8_t, 3>& bg) {
  const int side = s.image.width;
  std::vector<PixelRect> rects;
  for (const auto& b : s.boxes) {
    const PixelRect r = to_pixels(b, side);
    CHECK(r.x0 >= 0);
    CHECK(r.y0 >= 0);
    CHECK(r.x1 <= side);
    CHECK(r.y1 <= side);
    CHECK(r.x1 > r.x0);
    CHECK(r.y1 > r.y0);
    rects.push_back(r);
  }
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      if (is_background(s.image, y, x, bg)) continue;
      bool inside = false;
      for (const auto& r : rects) inside = inside || (x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1);
      CHECK(inside);
    }
  }
  for (const auto& r : rects) {
    auto painted_row = [&](int y) {
      for (int x = r.x0; x < r.x1; ++x) {
        if (!is_background(s.image, y, x, bg)) return true;
      }
      return false;
    };
    auto painted_col = [&](int x) {
      for (int y = r.y0; y < r.y1; ++y) {
        if (!is_background(s.image, y, x, bg)) return true;
      }
      return false;
    };
    CHECK(painted_row(r.y0));
    CHECK(painted_row(r.y1 - 1));
    CHECK(painted_col(r.x0));
    CHECK(painted_col(r.x1 - 1));
  }
}

}  // namespace

TEST_CASE("vocabulary reserves pad and end ids") {
  const Vocabulary v({"red", "circle"});
  CHECK(v.size() == 4);
  CHECK(v.id(Vocabulary::kPadWord) == kPadToken);
  CHECK(v.id(Vocabulary::kEndWord) == kEndToken);
  CHECK(v.word(2) == "red");
  CHECK_THROWS_AS(v.id("blue"), VocabularyError);
  CHECK_THROWS_AS(Vocabulary({"red", "red"}), VocabularyError);
}

TEST_CASE("tokenize and detokenize round-trip every generator name") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  for (const std::string size : {"", "small ", "large "}) {
    for (const auto& c : cfg.colors) {
      for (const auto& shape : cfg.shapes) {
        const std::string name = size + c.name + " " + shape;
        CHECK(detokenize(tokenize(name, vocab), vocab) == name);
      }
    }
  }
  CHECK(tokenize("  red   circle ", vocab) == tokenize("red circle", vocab));
  CHECK_THROWS_AS(tokenize("red <eos>", vocab), VocabularyError);
  const TokenSequence with_end{kEndToken};
  CHECK_THROWS_AS(detokenize(with_end, vocab), VocabularyError);
}

TEST_CASE("scene generation is a pure function of the seed") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  CHECK(generate_scene(42, cfg, vocab) == generate_scene(42, cfg, vocab));
  CHECK(!(generate_scene(42, cfg, vocab) == generate_scene(43, cfg, vocab)));
}

TEST_CASE("generated boxes tightly enclose the painted shapes") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(seed, cfg, vocab);
    CHECK(s.boxes.size() == s.names.size());
    CHECK(static_cast<int>(s.boxes.size()) >= cfg.min_shapes);
    CHECK(static_cast<int>(s.boxes.size()) <= cfg.max_shapes);
    check_boxes_are_tight(s, cfg.background);
  }
}

TEST_CASE("size words follow the drawn extent and skip the gap sizes") {
  GenConfig cfg;
  cfg.shapes = {"square"};
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  const TokenId small = vocab.id("small");
  const TokenId large = vocab.id("large");
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto s = generate_scene(seed, cfg, vocab);
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const int extent = static_cast<int>(std::lround(s.boxes[i][2] * cfg.image_size));
      CHECK(extent >= cfg.min_size);
      CHECK(extent <= cfg.max_size);
      CHECK(!(extent > cfg.small_up_to && extent <= cfg.small_up_to + cfg.size_gap));
      CHECK(!(extent < cfg.large_from && extent >= cfg.large_from - cfg.size_gap));
      const TokenId first = s.names[i].front();
      CHECK((first == small) == (extent <= cfg.small_up_to));
      CHECK((first == large) == (extent >= cfg.large_from));
    }
  }
}

TEST_CASE("a fixed seed reproduces the golden scene") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  const auto s = generate_scene(scene_seed(1, 0, 1), cfg, vocab);
  std::ifstream in(std::filesystem::path(RTGEN_TEST_DATA) / "golden_scene.txt");
  REQUIRE(in);
  std::size_t count = 0;
  in >> count;
  REQUIRE(count == s.boxes.size());
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    BoxCxcywh box{};
    in >> box[0] >> box[1] >> box[2] >> box[3];
    std::getline(in >> std::ws, name);
    for (int c = 0; c < 4; ++c) CHECK(s.boxes[i][static_cast<std::size_t>(c)] == doctest::Approx(box[static_cast<std::size_t>(c)]).epsilon(1e-12));
    CHECK(detokenize(s.names[i], vocab) == name);
  }
  std::uint64_t checksum = 0;
  in >> checksum;
  std::uint64_t actual = 1469598103934665603ull;
  for (std::uint8_t b : s.image.rgb) actual = (actual ^ b) * 1099511628211ull;
  CHECK(actual == checksum);
}

TEST_CASE("datasets round-trip through disk") {
  const GenConfig cfg;
  Dataset ds{synthetic_vocabulary(cfg), {}};
  for (int i = 0; i < 3; ++i) ds.samples.push_back(generate_scene(scene_seed(9, 0, i), cfg, ds.vocab));
  const auto dir = scratch_dir("roundtrip");
  write_dataset(dir, ds);
  const Dataset back = read_dataset(dir);
  CHECK(back.vocab == ds.vocab);
  REQUIRE(back.samples.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(back.samples[static_cast<std::size_t>(i)] == ds.samples[static_cast<std::size_t>(i)]);
}

TEST_CASE("malformed annotations report the line and offset") {
  const auto dir = scratch_dir("badjson");
  std::ofstream(dir / "annotations.json") << "{\n  \"version\": 1,\n  \"vocab\": [\n";
  try {
    read_dataset(dir);
    FAIL("expected a DatasetError");
  } catch (const DatasetError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("line 4") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }
}

TEST_CASE("malformed PPM headers report the byte offset") {
  const auto dir = scratch_dir("badppm");
  std::ofstream(dir / "bad.ppm", std::ios::binary) << "P6\n4 x\n255\n";
  try {
    read_ppm(dir / "bad.ppm");
    FAIL("expected a DatasetError");
  } catch (const DatasetError& e) {
    CHECK(std::string(e.what()).find("offset 5") != std::string::npos);
  }
  CHECK_THROWS_AS(read_ppm(dir / "missing.ppm"), DatasetError);
}

TEST_CASE("augmented views keep names and tight boxes") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  std::mt19937_64 rng(5);
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = generate_scene(seed, cfg, vocab);
    const auto view = augment_sample(s, rng, 8, cfg.background);
    CHECK(view.names == s.names);
    CHECK(view.boxes.size() == s.boxes.size());
    check_boxes_are_tight(view, cfg.background);
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      const double area = s.boxes[i][2] * s.boxes[i][3];
      CHECK(view.boxes[i][2] * view.boxes[i][3] == doctest::Approx(area));
    }
  }
}

TEST_CASE("augmentation without shift is one of the eight symmetries") {
  const GenConfig cfg;
  const Vocabulary vocab = synthetic_vocabulary(cfg);
  const auto s = generate_scene(3, cfg, vocab);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 16; ++trial) {
    const auto view = augment_sample(s, rng, 0, cfg.background);
    std::size_t background_pixels[2] = {0, 0};
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        background_pixels[0] += is_background(s.image, y, x, cfg.background);
        background_pixels[1] += is_background(view.image, y, x, cfg.background);
      }
    }
    CHECK(background_pixels[0] == background_pixels[1]);
  }
}

TEST_CASE("generator config validation") {
  GenConfig cfg;
  cfg.shapes = {"hexagon"};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = GenConfig{};
  cfg.max_size = 80;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = GenConfig{};
  cfg.min_size = 14;
  cfg.max_size = 15;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_NOTHROW(GenConfig{}.validate());
}
