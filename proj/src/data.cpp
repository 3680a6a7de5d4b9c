#include "mambaseg/data.hpp"

#include "mambaseg/errors.hpp"
#include "mambaseg/module.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

namespace mambaseg {

namespace fs = std::filesystem;

Tensor<float> image_to_tensor(const Image& image, TargetSize target) {
  if (image.channels < 1 || image.pixels.empty()) throw UsageError("image_to_tensor: empty image");
  const Index H = image.height, W = image.width;
  std::vector<float> planar(static_cast<std::size_t>(3 * H * W));
  for (Index c = 0; c < 3; ++c) {
    const Index src_c = image.channels >= 3 ? c : 0;
    for (Index y = 0; y < H; ++y) {
      for (Index x = 0; x < W; ++x) {
        planar[static_cast<std::size_t>((c * H + y) * W + x)] = static_cast<float>(image.at(y, x, src_c));
      }
    }
  }
  std::vector<float> resized = resize_bilinear(planar, 3, H, W, target.height, target.width);
  Array<float> data = Eigen::Map<Array<float>>(resized.data(), static_cast<Index>(resized.size())) / 255.0f;
  return Tensor<float>({3, target.height, target.width}, std::move(data));
}

Tensor<float> mask_to_tensor(const Image& mask, TargetSize target) {
  if (mask.channels < 1 || mask.pixels.empty()) throw UsageError("mask_to_tensor: empty mask");
  const Index H = mask.height, W = mask.width;
  const Index colors = mask.channels == 2 || mask.channels == 4 ? mask.channels - 1 : mask.channels;
  std::vector<float> gray(static_cast<std::size_t>(H * W));
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      float s = 0;
      for (Index c = 0; c < colors; ++c) s += mask.at(y, x, c);
      gray[static_cast<std::size_t>(y * W + x)] = s / static_cast<float>(colors);
    }
  }
  std::vector<float> resized = resize_nearest(gray, 1, H, W, target.height, target.width);
  Array<float> data(static_cast<Index>(resized.size()));
  for (Index i = 0; i < data.size(); ++i) data(i) = resized[static_cast<std::size_t>(i)] > 127.0f ? 1.0f : 0.0f;
  return Tensor<float>({1, target.height, target.width}, std::move(data));
}

Sample load_pair(const fs::path& image_path, const fs::path& mask_path, TargetSize target) {
  if (image_path.stem() != mask_path.stem()) {
    throw PairingError("image " + image_path.string() + " and mask " + mask_path.string() + " have different stems");
  }
  Sample s;
  s.id = image_path.stem().string();
  s.image = image_to_tensor(read_image(image_path), target);
  s.mask = mask_to_tensor(read_image(mask_path), target);
  return s;
}

namespace {

bool raster_extension(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

std::map<std::string, fs::path> index_directory(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("missing dataset directory " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || !raster_extension(entry.path())) continue;
    const std::string stem = entry.path().stem().string();
    if (!out.emplace(stem, entry.path()).second) {
      throw PairingError("duplicate stem '" + stem + "' in " + dir.string());
    }
  }
  return out;
}

}  // namespace

std::vector<PairPaths> scan_dataset(const fs::path& root) {
  const auto images = index_directory(root / "images");
  const auto masks = index_directory(root / "masks");
  std::vector<PairPaths> out;
  for (const auto& [id, path] : images) {
    auto it = masks.find(id);
    if (it == masks.end()) throw PairingError("image " + path.string() + " has no mask");
    out.push_back({id, path, it->second});
  }
  for (const auto& [id, path] : masks) {
    if (!images.count(id)) throw PairingError("mask " + path.string() + " has no image");
  }
  return out;
}

std::vector<Index> shuffled_indices(Index n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  InitRng rng(seed ^ (0xD1B54A32D192ED03ULL * (epoch + 1)));
  for (Index i = n - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

template <typename Item>
Split<Item> split(const std::vector<Item>& items, const SplitSpec& spec) {
  if (spec.train_count < 0 || spec.test_count < 0) throw ConfigError("split counts must be non-negative");
  const auto n = static_cast<Index>(items.size());
  if (spec.train_count + spec.test_count > n) {
    throw ConfigError("split needs " + std::to_string(spec.train_count) + " + " + std::to_string(spec.test_count) +
                      " items but the dataset has " + std::to_string(n));
  }
  std::vector<Item> ordered = items;
  std::stable_sort(ordered.begin(), ordered.end(), [](const Item& a, const Item& b) { return a.id < b.id; });
  if (spec.ordering == SplitOrdering::seeded_shuffle) {
    std::vector<Item> shuffled;
    for (Index i : shuffled_indices(n, spec.seed, 0)) shuffled.push_back(ordered[static_cast<std::size_t>(i)]);
    ordered = std::move(shuffled);
  }
  Split<Item> out;
  out.train.assign(ordered.begin(), ordered.begin() + spec.train_count);
  out.test.assign(ordered.begin() + spec.train_count, ordered.begin() + spec.train_count + spec.test_count);
  std::set<std::string> train_ids;
  for (const auto& p : out.train) train_ids.insert(p.id);
  for (const auto& p : out.test) {
    if (train_ids.count(p.id)) throw PairingError("split leaks id '" + p.id + "' into both partitions");
  }
  return out;
}

template Split<PairPaths> split<PairPaths>(const std::vector<PairPaths>&, const SplitSpec&);
template Split<Sample> split<Sample>(const std::vector<Sample>&, const SplitSpec&);

std::vector<Sample> load_samples(const std::vector<PairPaths>& items, TargetSize target) {
  std::vector<Sample> out;
  out.reserve(items.size());
  for (const auto& p : items) out.push_back(load_pair(p.image, p.mask, target));
  return out;
}

Batch collate(const std::vector<Sample>& samples, const std::vector<Index>& indices) {
  if (indices.empty()) throw UsageError("collate: empty batch");
  const Sample& first = samples.at(static_cast<std::size_t>(indices.front()));
  const Index H = first.image.dim(1), W = first.image.dim(2), B = static_cast<Index>(indices.size());
  Batch batch;
  Array<float> images(B * 3 * H * W), masks(B * H * W);
  for (Index b = 0; b < B; ++b) {
    const Sample& s = samples.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(b)]));
    if (s.image.shape() != Shape{3, H, W} || s.mask.shape() != Shape{1, H, W}) {
      throw DimensionError("collate: sample '" + s.id + "' does not match the batch extents");
    }
    images.segment(b * 3 * H * W, 3 * H * W) = s.image.data();
    masks.segment(b * H * W, H * W) = s.mask.data();
    batch.ids.push_back(s.id);
  }
  batch.images = Tensor<float>({B, 3, H, W}, std::move(images));
  batch.masks = Tensor<float>({B, 1, H, W}, std::move(masks));
  return batch;
}

Batches::Batches(const std::vector<Sample>& samples, Index batch_size, bool shuffle, std::uint64_t seed,
                 std::uint64_t epoch)
    : samples_(&samples) {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (samples.empty()) throw UsageError("cannot batch an empty split");
  const auto n = static_cast<Index>(samples.size());
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    return samples[static_cast<std::size_t>(a)].id < samples[static_cast<std::size_t>(b)].id;
  });
  if (shuffle) {
    std::vector<Index> permuted;
    for (Index i : shuffled_indices(n, seed, epoch)) permuted.push_back(order[static_cast<std::size_t>(i)]);
    order = std::move(permuted);
  }
  for (Index start = 0; start < n; start += batch_size) {
    groups_.emplace_back(order.begin() + start, order.begin() + std::min(n, start + batch_size));
  }
}

SyntheticPair synthesize_pair(std::uint64_t seed, Index index, Index height, Index width) {
  InitRng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(index) * 0xBF58476D1CE4E5B9ULL + 1);
  SyntheticPair pair;
  char id[32];
  std::snprintf(id, sizeof id, "synth_%05lld", static_cast<long long>(index));
  pair.id = id;
  pair.image = Image{height, width, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width * 3))};
  pair.mask = Image{height, width, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(height * width))};

  const double skin[3] = {rng.uniform(190, 235), rng.uniform(140, 180), rng.uniform(110, 150)};
  const double lesion[3] = {rng.uniform(70, 120), rng.uniform(40, 80), rng.uniform(25, 60)};
  const double fx = rng.uniform(1, 4) * 2 * std::numbers::pi / static_cast<double>(width);
  const double fy = rng.uniform(1, 4) * 2 * std::numbers::pi / static_cast<double>(height);
  const double phase = rng.uniform(0, 2 * std::numbers::pi);
  const double cy = rng.uniform(0.3, 0.7) * static_cast<double>(height);
  const double cx = rng.uniform(0.3, 0.7) * static_cast<double>(width);
  const double ry = rng.uniform(0.12, 0.3) * static_cast<double>(height);
  const double rx = rng.uniform(0.12, 0.3) * static_cast<double>(width);
  const double theta = rng.uniform(0, std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);

  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
      const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
      const double r2 = u * u + v * v;
      const bool inside = r2 <= 1.0;
      const double texture = 12 * std::sin(fx * static_cast<double>(x) + phase) * std::cos(fy * static_cast<double>(y));
      for (Index c = 0; c < 3; ++c) {
        const double base = inside ? lesion[c] + 20 * r2 : skin[c];
        const double value = base + texture + rng.uniform(-10, 10);
        pair.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(value), 0L, 255L));
      }
      pair.mask.at(y, x, 0) = inside ? 255 : 0;
    }
  }
  return pair;
}

std::vector<Sample> synthesize_samples(std::uint64_t seed, Index count, TargetSize size) {
  std::vector<Sample> out;
  for (Index i = 0; i < count; ++i) {
    SyntheticPair p = synthesize_pair(seed, i, size.height, size.width);
    out.push_back({p.id, image_to_tensor(p.image, size), mask_to_tensor(p.mask, size)});
  }
  return out;
}

void write_synthetic_dataset(const fs::path& out, Index count, std::uint64_t seed, TargetSize size) {
  if (count < 1) throw UsageError("synthetic dataset count must be >= 1");
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "masks", ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  for (Index i = 0; i < count; ++i) {
    SyntheticPair p = synthesize_pair(seed, i, size.height, size.width);
    write_png(out / "images" / (p.id + ".png"), p.image);
    write_png(out / "masks" / (p.id + ".png"), p.mask);
  }
}

}  // namespace mambaseg
