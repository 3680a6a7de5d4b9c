#pragma once

#include "mambaseg/image_io.hpp"
#include "mambaseg/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mambaseg {

struct TargetSize {
  Index height = 192;
  Index width = 256;
};

struct Sample {
  std::string id;
  Tensor<float> image;  // [3,H,W], values in [0,1]
  Tensor<float> mask;   // [1,H,W], values in {0,1}
};

/// RGB conversion (gray replicated, alpha dropped), bilinear resize, /255.
Tensor<float> image_to_tensor(const Image& image, TargetSize target);
/// Mean over color channels, nearest resize, then > 127 -> 1.
Tensor<float> mask_to_tensor(const Image& mask, TargetSize target);

/// Throws PairingError when the file stems differ and IoError when either
/// file cannot be decoded.
Sample load_pair(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                 TargetSize target = {});

struct PairPaths {
  std::string id;
  std::filesystem::path image;
  std::filesystem::path mask;
};

/// Pairs <root>/images/<id>.<png|jpg|jpeg> with <root>/masks/<id>.<png|jpg|jpeg>,
/// sorted by id. Unmatched or duplicated stems throw PairingError.
std::vector<PairPaths> scan_dataset(const std::filesystem::path& root);

enum class SplitOrdering { lexicographic, seeded_shuffle };

struct SplitSpec {
  Index train_count = 0;
  Index test_count = 0;
  std::uint64_t seed = 0;
  SplitOrdering ordering = SplitOrdering::lexicographic;

  static SplitSpec isic2018() { return {2074, 520, 0, SplitOrdering::lexicographic}; }
  static SplitSpec ph2() { return {170, 30, 0, SplitOrdering::lexicographic}; }
};

/// Deterministic permutation of [0, n) from (seed, epoch).
std::vector<Index> shuffled_indices(Index n, std::uint64_t seed, std::uint64_t epoch);

template <typename Item>
struct Split {
  std::vector<Item> train;
  std::vector<Item> test;
};

/// Orders the items (by id, or a seeded shuffle of that order) and takes the
/// first train_count for training and the next test_count for testing.
/// Counts exceeding the dataset throw ConfigError. Works on any item type
/// with a string `id` member.
template <typename Item>
Split<Item> split(const std::vector<Item>& items, const SplitSpec& spec);

std::vector<Sample> load_samples(const std::vector<PairPaths>& items, TargetSize target);

struct Batch {
  std::vector<std::string> ids;
  Tensor<float> images;  // [B,3,H,W]
  Tensor<float> masks;   // [B,1,H,W]
};

Batch collate(const std::vector<Sample>& samples, const std::vector<Index>& indices);

/// Epoch view over a sample set. Without shuffling, samples are visited in
/// ascending id order; the final batch may be partial.
class Batches {
 public:
  Batches(const std::vector<Sample>& samples, Index batch_size, bool shuffle, std::uint64_t seed,
          std::uint64_t epoch = 0);

  Index count() const { return static_cast<Index>(groups_.size()); }
  const std::vector<Index>& indices(Index i) const { return groups_.at(static_cast<std::size_t>(i)); }
  Batch get(Index i) const { return collate(*samples_, indices(i)); }

 private:
  const std::vector<Sample>* samples_;
  std::vector<std::vector<Index>> groups_;
};

struct SyntheticPair {
  std::string id;
  Image image;  // RGB
  Image mask;   // gray, {0,255}
};

/// Elliptical dark "lesion" on a textured skin-toned background. Fully
/// determined by (seed, index, extents).
SyntheticPair synthesize_pair(std::uint64_t seed, Index index, Index height, Index width);

/// synthesize_pair converted through the same tensor path as loaded files.
std::vector<Sample> synthesize_samples(std::uint64_t seed, Index count, TargetSize size);

/// Writes <out>/images/<id>.png and <out>/masks/<id>.png for `count` pairs.
void write_synthetic_dataset(const std::filesystem::path& out, Index count, std::uint64_t seed, TargetSize size);

}  // namespace mambaseg
