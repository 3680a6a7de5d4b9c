#include "mambaseg/data.hpp"
#include "mambaseg/errors.hpp"
#include "mambaseg/image_io.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <set>

using namespace mambaseg;
namespace fs = std::filesystem;

namespace {

Image gradient_image(Index h, Index w, Index channels) {
  Image img{h, w, channels, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w * channels))};
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < channels; ++c) img.at(y, x, c) = static_cast<std::uint8_t>((y * 7 + x * 3 + c * 50) % 256);
  return img;
}

std::vector<PairPaths> fake_items(Index n) {
  std::vector<PairPaths> items;
  for (Index i = 0; i < n; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "ISIC_%07lld", static_cast<long long>(n - 1 - i));
    items.push_back({id, {}, {}});
  }
  return items;
}

std::vector<Sample> tiny_samples(Index n) {
  std::vector<Sample> out;
  for (Index i = 0; i < n; ++i) {
    out.push_back({"s" + std::to_string(100 + i), Tensor<float>::full({3, 2, 2}, static_cast<float>(i)),
                   Tensor<float>::zeros({1, 2, 2})});
  }
  return out;
}

}  // namespace

TEST(ImageIo, PngRoundTripIsExact) {
  const auto dir = oracle::scratch_dir("png_roundtrip");
  for (Index channels : {1, 3, 4}) {
    const Image img = gradient_image(13, 17, channels);
    const auto path = dir / ("img" + std::to_string(channels) + ".png");
    write_png(path, img);
    const Image back = read_image(path);
    EXPECT_EQ(back.height, 13);
    EXPECT_EQ(back.width, 17);
    EXPECT_EQ(back.channels, channels);
    EXPECT_EQ(back.pixels, img.pixels);
  }
}

TEST(ImageIo, UnreadableFilesNameThePath) {
  const auto dir = oracle::scratch_dir("png_bad");
  std::ofstream(dir / "broken.png") << "not an image";
  try {
    read_image(dir / "broken.png");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.png"), std::string::npos);
  }
  EXPECT_THROW(read_image(dir / "missing.png"), IoError);
}

TEST(Resize, BilinearAndNearestOnSmallGrids) {
  const std::vector<float> src{0, 1, 2, 3};  // 1 x 2 x 2
  const auto up = resize_bilinear(src, 1, 2, 2, 4, 4);
  // Half-pixel centers: output row 0 samples source row -0.25 -> clamped to 0.
  EXPECT_FLOAT_EQ(up[0], 0.0f);
  EXPECT_FLOAT_EQ(up[1], 0.25f);
  EXPECT_FLOAT_EQ(up[5], 0.75f);
  EXPECT_FLOAT_EQ(up[15], 3.0f);
  const auto same = resize_bilinear(src, 1, 2, 2, 2, 2);
  EXPECT_EQ(same, src);
  const auto nn = resize_nearest(src, 1, 2, 2, 4, 4);
  EXPECT_EQ(nn, (std::vector<float>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
}

TEST(Tensors, ImageConversionRangeAndChannels) {
  const Image gray = gradient_image(10, 12, 1);
  const auto t = image_to_tensor(gray, {8, 8});
  EXPECT_EQ(t.shape(), (Shape{3, 8, 8}));
  EXPECT_GE(t.data().minCoeff(), 0.0f);
  EXPECT_LE(t.data().maxCoeff(), 1.0f);
  EXPECT_EQ(narrow(t, 0, 0, 1).data().matrix(), narrow(t, 0, 2, 1).data().matrix());
  const Image rgba = gradient_image(8, 8, 4);
  const auto u = image_to_tensor(rgba, {8, 8});
  EXPECT_FLOAT_EQ(u.data()[0], rgba.at(0, 0, 0) / 255.0f);
}

TEST(Tensors, MaskBinarization) {
  Image checker{8, 8, 1, std::vector<std::uint8_t>(64)};
  for (Index y = 0; y < 8; ++y)
    for (Index x = 0; x < 8; ++x) checker.at(y, x, 0) = ((x + y) % 2) ? 255 : 0;
  const auto m = mask_to_tensor(checker, {6, 10});
  EXPECT_EQ(m.shape(), (Shape{1, 6, 10}));
  EXPECT_TRUE((m.data() == 0.0f || m.data() == 1.0f).all());

  Image full{5, 7, 3, std::vector<std::uint8_t>(105, 255)};
  EXPECT_TRUE((mask_to_tensor(full, {4, 4}).data() == 1.0f).all());
  Image dim{4, 4, 1, std::vector<std::uint8_t>(16, 127)};
  EXPECT_TRUE((mask_to_tensor(dim, {4, 4}).data() == 0.0f).all());
}

TEST(Tensors, LargePhotographResizesToDefaultExtents) {
  const auto dir = oracle::scratch_dir("large_image");
  Image big{2016, 3024, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(2016 * 3024 * 3))};
  for (Index y = 0; y < big.height; ++y)
    for (Index x = 0; x < big.width; ++x)
      for (Index c = 0; c < 3; ++c) big.at(y, x, c) = static_cast<std::uint8_t>((y / 8 + c * 40) % 256);
  Image mask{2016, 3024, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(2016 * 3024), 0)};
  for (Index y = 500; y < 1500; ++y)
    for (Index x = 1000; x < 2000; ++x) mask.at(y, x, 0) = 255;
  write_png(dir / "ISIC_0000001.png", big);
  fs::create_directories(dir / "masks");
  write_png(dir / "masks" / "ISIC_0000001.png", mask);
  const Sample s = load_pair(dir / "ISIC_0000001.png", dir / "masks" / "ISIC_0000001.png");
  EXPECT_EQ(s.id, "ISIC_0000001");
  EXPECT_EQ(s.image.shape(), (Shape{3, 192, 256}));
  EXPECT_EQ(s.mask.shape(), (Shape{1, 192, 256}));
  const double fraction = s.mask.data().sum() / (192.0 * 256.0);
  EXPECT_NEAR(fraction, (1000.0 * 1000.0) / (2016.0 * 3024.0), 0.01);
}

TEST(Pairing, StemMismatchAndMissingFiles) {
  const auto dir = oracle::scratch_dir("pairing");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  write_png(dir / "images" / "a.png", gradient_image(4, 4, 3));
  write_png(dir / "masks" / "b.png", gradient_image(4, 4, 1));
  EXPECT_THROW(load_pair(dir / "images" / "a.png", dir / "masks" / "b.png"), PairingError);
  EXPECT_THROW(scan_dataset(dir), PairingError);
  fs::rename(dir / "masks" / "b.png", dir / "masks" / "a.png");
  const auto items = scan_dataset(dir);
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].id, "a");
  std::ofstream(dir / "masks" / "a.png", std::ios::trunc) << "garbage";
  EXPECT_THROW(load_pair(items[0].image, items[0].mask), IoError);
  EXPECT_THROW(scan_dataset(dir / "nowhere"), IoError);
}

TEST(Split, PresetsAreDisjointAndDeterministic) {
  const auto isic = split(fake_items(2594), SplitSpec::isic2018());
  EXPECT_EQ(isic.train.size(), 2074u);
  EXPECT_EQ(isic.test.size(), 520u);
  EXPECT_EQ(isic.train.front().id, "ISIC_0000000");
  std::set<std::string> ids;
  for (const auto& p : isic.train) ids.insert(p.id);
  for (const auto& p : isic.test) EXPECT_FALSE(ids.count(p.id));

  const auto ph2 = split(fake_items(200), SplitSpec::ph2());
  EXPECT_EQ(ph2.train.size(), 170u);
  EXPECT_EQ(ph2.test.size(), 30u);

  SplitSpec shuffled{10, 5, 7, SplitOrdering::seeded_shuffle};
  const auto a = split(fake_items(20), shuffled), b = split(fake_items(20), shuffled);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].id, b.train[i].id);
  shuffled.seed = 8;
  const auto c = split(fake_items(20), shuffled);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) differs = differs || a.train[i].id != c.train[i].id;
  EXPECT_TRUE(differs);
  EXPECT_THROW(split(fake_items(100), SplitSpec::ph2()), ConfigError);
}

TEST(Batches, SizesAndOrder) {
  const auto samples = tiny_samples(20);
  const Batches plain(samples, 8, false, 0);
  ASSERT_EQ(plain.count(), 3);
  EXPECT_EQ(plain.indices(0).size(), 8u);
  EXPECT_EQ(plain.indices(1).size(), 8u);
  EXPECT_EQ(plain.indices(2).size(), 4u);
  const Batch first = plain.get(0);
  EXPECT_EQ(first.images.shape(), (Shape{8, 3, 2, 2}));
  EXPECT_EQ(first.masks.shape(), (Shape{8, 1, 2, 2}));
  EXPECT_EQ(first.ids.front(), "s100");
  EXPECT_EQ(first.images.at(3, 0, 0, 0), 3.0f);
  EXPECT_THROW(Batches(samples, 0, false, 0), UsageError);
}

TEST(Batches, ShuffleIsSeededPerEpoch) {
  EXPECT_EQ(shuffled_indices(50, 3, 1), shuffled_indices(50, 3, 1));
  EXPECT_NE(shuffled_indices(50, 3, 1), shuffled_indices(50, 3, 2));
  EXPECT_NE(shuffled_indices(50, 3, 1), shuffled_indices(50, 4, 1));
  auto perm = shuffled_indices(50, 3, 1);
  std::sort(perm.begin(), perm.end());
  for (Index i = 0; i < 50; ++i) EXPECT_EQ(perm[static_cast<std::size_t>(i)], i);

  const auto samples = tiny_samples(20);
  const Batches a(samples, 8, true, 5, 1), b(samples, 8, true, 5, 1);
  for (Index i = 0; i < a.count(); ++i) EXPECT_EQ(a.indices(i), b.indices(i));
}

TEST(Synthetic, DeterministicAndBinary) {
  const auto a = synthesize_pair(1, 3, 32, 48), b = synthesize_pair(1, 3, 32, 48);
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_EQ(a.mask.pixels, b.mask.pixels);
  EXPECT_NE(synthesize_pair(2, 3, 32, 48).image.pixels, a.image.pixels);
  std::size_t lesion = 0;
  for (auto v : a.mask.pixels) {
    EXPECT_TRUE(v == 0 || v == 255);
    lesion += v == 255;
  }
  EXPECT_GT(lesion, 0u);
  EXPECT_LT(lesion, a.mask.pixels.size());

  const auto dir = oracle::scratch_dir("synthetic");
  write_synthetic_dataset(dir, 3, 9, {32, 32});
  const auto items = scan_dataset(dir);
  ASSERT_EQ(items.size(), 3u);
  const auto loaded = load_samples(items, {32, 32});
  const auto memory = synthesize_samples(9, 3, {32, 32});
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(loaded[i].id, memory[i].id);
    EXPECT_TRUE((loaded[i].image.data() == memory[i].image.data()).all());
    EXPECT_TRUE((loaded[i].mask.data() == memory[i].mask.data()).all());
  }
}
