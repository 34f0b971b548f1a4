#include <gtest/gtest.h>

#include <random>

#include "glaucad/preprocess.hpp"
#include "oracles.hpp"

using namespace glaucad;

namespace {

Image random_image(std::size_t w, std::size_t h, std::uint64_t seed, std::size_t channels = 3) {
  std::mt19937_64 gen(seed);
  Image img(w, h, channels);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(gen() & 0xff);
  return img;
}

ImageSample sample_of(Image img, int label = kGlaucoma) {
  ImageSample s;
  s.pixels = std::move(img);
  s.label = label;
  s.id = "s";
  return s;
}

}  // namespace

TEST(Codec, PngRoundTrip) {
  const auto img = random_image(17, 9, 1);
  const auto bytes = encode_png(img);
  EXPECT_EQ(sniff_format(bytes), ImageFormat::png);
  EXPECT_EQ(decode_png(bytes), img);
  EXPECT_EQ(decode_image(bytes), img);
}

TEST(Codec, JpegDecodesToSameExtent) {
  Image img(32, 24, 3, 128);
  const auto bytes = encode_jpeg(img);
  EXPECT_EQ(sniff_format(bytes), ImageFormat::jpeg);
  const auto back = decode_image(bytes);
  EXPECT_EQ(back.width, 32u);
  EXPECT_EQ(back.height, 24u);
  for (auto p : back.pixels) EXPECT_NEAR(p, 128, 2);
}

TEST(Codec, SniffAndRejectGarbage) {
  const std::string text = "hello, this is not an image";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  EXPECT_EQ(sniff_format(bytes), ImageFormat::unknown);
  EXPECT_THROW(decode_image(bytes), DataError);
  std::vector<std::uint8_t> gif{'G', 'I', 'F', '8', '9', 'a'};
  EXPECT_EQ(sniff_format(gif), ImageFormat::other_image);
  std::vector<std::uint8_t> bmp{'B', 'M', 0, 0};
  EXPECT_EQ(sniff_format(bmp), ImageFormat::bmp);
  auto png = encode_png(random_image(8, 8, 2));
  png.resize(png.size() / 2);
  EXPECT_THROW(decode_image(png), DataError);
}

TEST(Resize, MatchesBilinearOracle) {
  const auto img = random_image(40, 40, 3, 1);
  const auto out = resize_bilinear(img, 0, 0, 40, 40, 17, 17);
  std::vector<double> src(img.pixels.begin(), img.pixels.end());
  for (std::size_t y = 0; y < 17; ++y)
    for (std::size_t x = 0; x < 17; ++x) {
      const double expect = oracle::bilinear(src, 40, 40, 17, y, x);
      EXPECT_NEAR(out.at(x, y), expect, 0.5 + 1e-9) << x << "," << y;
    }
}

TEST(CenterCropResize, IdentityAtSameSize) {
  auto s = sample_of(random_image(224, 224, 4));
  s.lesion_mask = random_image(224, 224, 5, 1);
  const auto out = center_crop_resize(s, 224);
  EXPECT_EQ(out.pixels, s.pixels);
  EXPECT_EQ(*out.lesion_mask, *s.lesion_mask);
  EXPECT_EQ(out.label, s.label);
}

TEST(CenterCropResize, WideImageUsesCenteredSquare) {
  // 2500 x 2000: the crop is columns [250, 2250). Mark the crop border.
  Image img(2500, 2000, 3, 0);
  for (std::size_t y = 0; y < 2000; ++y)
    for (std::size_t x = 250; x < 2250; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = 200;
  const auto out = center_crop_resize(sample_of(img), 224);
  EXPECT_EQ(out.pixels.width, 224u);
  EXPECT_EQ(out.pixels.height, 224u);
  for (auto p : out.pixels.pixels) EXPECT_EQ(p, 200);
  const auto t = normalize<float>(out.pixels);
  EXPECT_EQ(t.shape(), (Shape{3, 224, 224}));
}

TEST(CenterCropResize, ConstantImageStaysConstant) {
  Image img(301, 157, 3);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) {
    img.pixels[i] = 10;
    img.pixels[i + 1] = 77;
    img.pixels[i + 2] = 250;
  }
  const auto out = center_crop_resize(sample_of(img), 64);
  for (std::size_t i = 0; i < out.pixels.pixels.size(); i += 3) {
    ASSERT_EQ(out.pixels.pixels[i], 10);
    ASSERT_EQ(out.pixels.pixels[i + 1], 77);
    ASSERT_EQ(out.pixels.pixels[i + 2], 250);
  }
}

TEST(CenterCropResize, Errors) {
  EXPECT_THROW(center_crop_resize(sample_of(random_image(10, 10, 1)), 7), ConfigError);
  EXPECT_THROW(center_crop_resize(sample_of(Image(0, 10, 3)), 32), DataError);
}

TEST(CenterCropResize, ShapeSoundForManyExtents) {
  std::mt19937_64 gen(6);
  for (int i = 0; i < 20; ++i) {
    const std::size_t w = 1 + gen() % 300, h = 1 + gen() % 300, S = 8 + gen() % 60;
    auto s = sample_of(random_image(w, h, gen()));
    s.lesion_mask = Image(w, h, 1, 1);
    const auto out = center_crop_resize(s, S);
    EXPECT_EQ(normalize<float>(out.pixels).shape(), (Shape{3, S, S}));
    EXPECT_EQ(out.lesion_mask->width, S);
    for (auto m : out.lesion_mask->pixels) EXPECT_EQ(m, 1);
  }
}

TEST(Normalize, ChannelMeans) {
  Image white(2, 1, 3, 255), black(2, 1, 3, 0);
  const auto w = normalize<double>(white);
  EXPECT_EQ(w.shape(), (Shape{3, 1, 2}));
  EXPECT_NEAR(w[0], 149.49, 1e-12);
  EXPECT_NEAR(w[2], 200.48, 1e-12);
  EXPECT_NEAR(w[4], 238.81, 1e-12);
  const auto b = normalize<double>(black);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(b[i], -105.51);
    EXPECT_DOUBLE_EQ(b[2 + i], -54.52);
    EXPECT_DOUBLE_EQ(b[4 + i], -16.19);
  }
  // With integer means a pixel equal to the means maps to exact zeros.
  NormalizationStats rounded;
  rounded.mean = {105, 54, 16};
  Image m(1, 1, 3);
  m.pixels = {105, 54, 16};
  const auto zero = normalize<double>(m, rounded);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
  NormalizationStats bad;
  bad.mean[1] = std::nan("");
  EXPECT_THROW(normalize<double>(m, bad), ConfigError);
}

TEST(Augment, NeutralDrawsAreIdentity) {
  auto s = sample_of(random_image(64, 64, 7));
  s.lesion_mask = random_image(64, 64, 8, 1);
  AugmentDraws d;
  d.crop_side = 64;
  const auto out = apply_augment(s, d);
  EXPECT_EQ(out.pixels, s.pixels);
  EXPECT_EQ(*out.lesion_mask, *s.lesion_mask);

  AugmentConfig neutral{1.0, 0.0, 0.0};
  Rng rng(1);
  const auto a = augment(s, neutral, rng);
  EXPECT_EQ(a.pixels, s.pixels);
}

TEST(Augment, FlipIsAnInvolution) {
  auto s = sample_of(random_image(31, 20, 9));
  AugmentDraws d;
  d.flip = true;
  EXPECT_NE(apply_augment(s, d).pixels, s.pixels);
  EXPECT_EQ(apply_augment(apply_augment(s, d), d).pixels, s.pixels);
}

TEST(Augment, SameSeedSameBytes) {
  auto s = sample_of(random_image(64, 64, 10));
  s.lesion_mask = random_image(64, 64, 11, 1);
  AugmentConfig cfg;
  Rng a(77), b(77);
  for (int i = 0; i < 5; ++i) {
    const auto x = augment(s, cfg, a), y = augment(s, cfg, b);
    EXPECT_EQ(x.pixels, y.pixels);
    EXPECT_EQ(*x.lesion_mask, *y.lesion_mask);
  }
}

TEST(Augment, PreservesLabelExtentAndMaskGeometry) {
  // A mask equal to the first channel of a two-level image follows it exactly
  // through geometry when brightness is neutral.
  std::mt19937_64 gen(12);
  Image img(48, 48, 3, 0), mask(48, 48, 1, 0);
  for (std::size_t y = 0; y < 48; ++y)
    for (std::size_t x = 0; x < 48; ++x)
      if (gen() % 3 == 0) {
        mask.at(x, y) = 1;
        for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = 255;
      }
  auto s = sample_of(img, kNormal);
  s.lesion_mask = mask;
  Rng rng(13);
  AugmentConfig cfg{1.0, 0.5, 0.8};
  for (int i = 0; i < 10; ++i) {
    const auto d = draw_augment(cfg, 48, 48, rng);
    EXPECT_GE(d.brightness, kMinBrightness);
    EXPECT_LE(d.brightness, 1.8);
    auto nd = d;
    nd.brightness = 1.0;
    const auto out = apply_augment(s, nd);
    EXPECT_EQ(out.label, kNormal);
    ASSERT_EQ(out.pixels.width, 48u);
    for (std::size_t y = 0; y < 48; ++y)
      for (std::size_t x = 0; x < 48; ++x) ASSERT_EQ(out.pixels.at(x, y) == 255, out.lesion_mask->at(x, y) == 1);
  }
}

TEST(Augment, BrightnessClampsAndCropResizesBack) {
  auto s = sample_of(Image(40, 30, 3, 200));
  AugmentDraws d;
  d.brightness = 1.8;
  for (auto p : apply_augment(s, d).pixels.pixels) EXPECT_EQ(p, 255);
  d.brightness = 0.5;
  for (auto p : apply_augment(s, d).pixels.pixels) EXPECT_EQ(p, 100);
  AugmentDraws crop;
  crop.crop_side = 20;
  crop.crop_x = 5;
  crop.crop_y = 3;
  const auto out = apply_augment(s, crop);
  EXPECT_EQ(out.pixels.width, 40u);
  EXPECT_EQ(out.pixels.height, 30u);
}

TEST(Augment, InvalidConfigRejected) {
  Rng rng(1);
  EXPECT_THROW(draw_augment({0.0, 0.5, 0.8}, 10, 10, rng), ConfigError);
  EXPECT_THROW(draw_augment({0.9, 1.5, 0.8}, 10, 10, rng), ConfigError);
  EXPECT_THROW(draw_augment({0.9, 0.5, -1}, 10, 10, rng), ConfigError);
}
