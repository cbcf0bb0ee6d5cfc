#pragma once

// Procedural shape scenes with text labels, a closed word vocabulary, and the
// on-disk dataset layout (P6 PPM images plus a JSON annotation sidecar).

#include <rtgen/types.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rtgen {

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed dataset file. The message carries the file and line/offset.
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t& at(int y, int x, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  /// Channel value scaled to [0, 1].
  double value(int y, int x, int c) const { return at(y, x, c) / 255.0; }

  bool operator==(const Image&) const = default;
};

class Vocabulary {
 public:
  static constexpr std::string_view kPadWord = "<pad>";
  static constexpr std::string_view kEndWord = "<eos>";

  Vocabulary();
  /// `words` excludes the reserved entries, which always take ids 0 and 1.
  explicit Vocabulary(const std::vector<std::string>& words);

  std::size_t size() const { return words_.size(); }
  /// Every entry including the reserved ones, ordered by id.
  const std::vector<std::string>& entries() const { return words_; }
  TokenId id(std::string_view word) const;
  const std::string& word(TokenId id) const;
  bool contains(std::string_view word) const { return ids_.count(std::string(word)) != 0; }

  bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

TokenSequence tokenize(std::string_view name, const Vocabulary& vocab);
std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab);

struct ColorSpec {
  std::string name;
  std::array<std::uint8_t, 3> rgb;
};

struct GenConfig {
  int image_size = 64;
  int min_shapes = 1;
  int max_shapes = 4;
  std::vector<ColorSpec> colors = {{"red", {220, 40, 40}},
                                   {"green", {40, 200, 60}},
                                   {"blue", {50, 80, 230}},
                                   {"yellow", {230, 220, 40}},
                                   {"purple", {160, 60, 200}}};
  std::vector<std::string> shapes = {"circle", "square", "triangle", "diamond"};
  /// Object extent in pixels, inclusive.
  int min_size = 10;
  int max_size = 26;
  /// Objects at most this big are named "small ..."; at least `large_from` "large ...".
  int small_up_to = 13;
  int large_from = 23;
  /// Sizes this many pixels above `small_up_to` or below `large_from` are
  /// never drawn, so the three size classes are visibly apart.
  int size_gap = 2;
  int placement_attempts = 30;
  std::array<std::uint8_t, 3> background = {24, 24, 24};

  void validate() const;
};

/// Closed vocabulary covering every name the generator can emit.
Vocabulary synthetic_vocabulary(const GenConfig& cfg);

struct DetectionSample {
  Image image;
  std::vector<BoxCxcywh> boxes;
  std::vector<TokenSequence> names;

  bool operator==(const DetectionSample&) const = default;
};

/// Deterministic scene for `seed`.
DetectionSample generate_scene(std::uint64_t seed, const GenConfig& cfg, const Vocabulary& vocab);

/// Random name-preserving view of a sample: one of the eight flips and
/// quarter turns of a square image, then an integer shift of at most
/// `max_shift` pixels per axis that keeps every box inside the image.
/// Uncovered pixels take the `background` color.
DetectionSample augment_sample(const DetectionSample& sample, std::mt19937_64& rng, int max_shift,
                               std::array<std::uint8_t, 3> background);

struct Dataset {
  Vocabulary vocab;
  std::vector<DetectionSample> samples;
};

inline constexpr int kDatasetVersion = 1;

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Writes `dir/annotations.json` and one PPM per sample.
void write_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace rtgen
