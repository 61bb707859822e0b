#include <gtest/gtest.h>

#include <algorithm>

#include "percept/imaging.hpp"

using namespace percept;

namespace {

std::string fer_row(std::size_t emotion, const std::vector<int>& px, const std::string& usage = "Training") {
  std::string s = std::to_string(emotion) + ",";
  for (std::size_t i = 0; i < px.size(); ++i) s += (i ? " " : "") + std::to_string(px[i]);
  return s + "," + usage + "\n";
}

GrayImage random_image(Prng& prng, std::size_t w, std::size_t h) {
  GrayImage img(w, h);
  for (float& p : img.pixels) p = static_cast<float>(prng.next_double());
  return img;
}

Bytes pgm(const std::string& header, const std::vector<std::uint8_t>& px) {
  Bytes b(header.begin(), header.end());
  b.insert(b.end(), px.begin(), px.end());
  return b;
}

}  // namespace

TEST(FerCsv, ParsesRowsAndScales) {
  std::vector<int> black(2304, 0), mixed(2304, 0);
  mixed[0] = 255;
  const std::string text = "emotion,pixels,Usage\n" + fer_row(3, black) + fer_row(0, mixed, "PrivateTest");
  const auto r = parse_fer_csv(text);
  ASSERT_EQ(r.records.size(), 2u);
  EXPECT_TRUE(r.diagnostics.empty());
  EXPECT_EQ(kFerEmotions[r.records[0].emotion], "happy");
  EXPECT_EQ(r.records[0].image, GrayImage(48, 48));
  EXPECT_EQ(r.records[1].image.pixels[0], 1.0f);
  EXPECT_EQ(r.records[1].image.pixels[1], 0.0f);
  EXPECT_EQ(r.records[1].usage, FerUsage::PrivateTest);
}

TEST(FerCsv, BadRowsReportedAndSkipped) {
  const std::vector<int> ok(2304, 10), short_row(2303, 10);
  std::vector<int> hot(2304, 10);
  hot[5] = 256;
  std::string text = "emotion,pixels,Usage\n" + fer_row(1, short_row) + fer_row(7, ok) + fer_row(2, hot) +
                     "4,1 2 x,Training\n" + fer_row(5, ok, "Other") + fer_row(6, ok);
  const auto r = parse_fer_csv(text);
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].emotion, 6u);
  ASSERT_EQ(r.diagnostics.size(), 5u);
  EXPECT_EQ(r.diagnostics[0].line, 2u);
  EXPECT_NE(r.diagnostics[0].message.find("2303"), std::string::npos);
  EXPECT_EQ(r.diagnostics[1].line, 3u);
}

TEST(FerCsv, HeaderRequired) { EXPECT_THROW(parse_fer_csv("a,b,c\n"), Error); }

TEST(FerCsv, RecordCountIndependentOfOrder) {
  Prng prng(3);
  std::vector<std::string> rows;
  for (std::size_t i = 0; i < 12; ++i) {
    std::vector<int> px(2304);
    for (int& v : px) v = static_cast<int>(prng.below(256));
    rows.push_back(fer_row(i % 7, px));
  }
  for (int trial = 0; trial < 3; ++trial) {
    shuffle(rows.begin(), rows.end(), prng);
    std::string text = "emotion,pixels,Usage\n";
    for (const auto& r : rows) text += r;
    const auto parsed = parse_fer_csv(text);
    EXPECT_EQ(parsed.records.size(), 12u);
    for (const auto& rec : parsed.records)
      for (float p : rec.image.pixels) ASSERT_TRUE(p >= 0.0f && p <= 1.0f);
  }
}

TEST(FerCsv, EncodeRoundTrip) {
  Prng prng(5);
  std::vector<FerRecord> recs;
  for (std::size_t k = 0; k < 3; ++k) {
    FerRecord r{k, random_image(prng, 48, 48), FerUsage::PublicTest};
    for (float& p : r.image.pixels) p = std::round(p * 255.0f) / 255.0f;
    recs.push_back(r);
  }
  const auto back = parse_fer_csv(encode_fer_csv(recs));
  ASSERT_EQ(back.records.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.records[i].emotion, recs[i].emotion);
    EXPECT_EQ(back.records[i].image, recs[i].image);
  }
}

TEST(Pgm, Examples) {
  EXPECT_EQ(load_pgm(pgm("P5\n1 1\n255\n", {255})).pixels, std::vector<float>{1.0f});
  const auto img = load_pgm(pgm("P5 2 2 255\n", {0, 64, 128, 255}));
  EXPECT_EQ(img.width, 2u);
  EXPECT_NEAR(img.at(1, 0), 0.251, 1e-3);
  EXPECT_NEAR(img.at(0, 1), 0.502, 1e-3);
  EXPECT_EQ(img.at(1, 1), 1.0f);
}

TEST(Pgm, CommentsInHeader) {
  const auto img = load_pgm(pgm("P5\n# made by hand\n2 1\n255\n", {0, 255}));
  EXPECT_EQ(img.pixels, (std::vector<float>{0.0f, 1.0f}));
}

TEST(Pgm, Errors) {
  EXPECT_THROW(load_pgm(pgm("P2\n1 1\n255\n0\n", {})), Error);
  EXPECT_THROW(load_pgm(pgm("P5\n1 1\n65535\n", {0, 0})), Error);
  EXPECT_THROW(load_pgm(pgm("P5\n2 2\n255\n", {0, 1, 2})), Error);
}

TEST(Pgm, EncodeRoundTripStaysInRange) {
  Prng prng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = random_image(prng, 1 + prng.below(20), 1 + prng.below(20));
    const auto back = load_pgm(encode_pgm(img));
    ASSERT_EQ(back.width, img.width);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      EXPECT_NEAR(back.pixels[i], img.pixels[i], 0.5 / 255 + 1e-7);
      EXPECT_TRUE(back.pixels[i] >= 0.0f && back.pixels[i] <= 1.0f);
    }
  }
}

TEST(Resize, Examples) {
  Prng prng(1);
  const auto img = random_image(prng, 5, 3);
  EXPECT_EQ(resize_bilinear(img, 5, 3), img);
  const auto c = resize_bilinear(GrayImage(1, 1, 0.3f), 4, 6);
  for (float p : c.pixels) EXPECT_EQ(p, 0.3f);
  GrayImage sq(2, 2);
  sq.pixels = {0.0f, 0.5f, 0.5f, 1.0f};
  EXPECT_NEAR(resize_bilinear(sq, 3, 3).at(1, 1), 0.5f, 1e-7);
}

TEST(Resize, NoOvershoot) {
  Prng prng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto img = random_image(prng, 1 + prng.below(12), 1 + prng.below(12));
    const auto [lo, hi] = std::minmax_element(img.pixels.begin(), img.pixels.end());
    const auto out = resize_bilinear(img, 1 + prng.below(30), 1 + prng.below(30));
    for (float p : out.pixels) {
      EXPECT_GE(p, *lo - 1e-6f);
      EXPECT_LE(p, *hi + 1e-6f);
    }
  }
}

TEST(Affine, IdentityDraw) {
  Prng prng(3);
  const auto img = random_image(prng, 9, 7);
  const auto out = affine_transform(img, AffineDraw{});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(out.pixels[i], img.pixels[i], 1e-6);
  const auto zero = affine_augment(img, AugmentParams{0, 0, 1, 1}, prng);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(zero.pixels[i], img.pixels[i], 1e-6);
}

TEST(Affine, QuarterTurnIsIndexRotation) {
  Prng prng(4);
  const auto img = random_image(prng, 8, 8);
  const auto out = affine_transform(img, AffineDraw{90.0, 0.0, 1.0});
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) EXPECT_NEAR(out.at(x, y), img.at(y, 7 - x), 1e-5);
}

TEST(Affine, RangeAndDeterminism) {
  Prng prng(5);
  const auto img = random_image(prng, 16, 16);
  const AugmentParams p{30, 0.3, 0.7, 1.3};
  Prng a(77), b(77);
  for (int i = 0; i < 100; ++i) {
    const auto x = affine_augment(img, p, a);
    EXPECT_EQ(x, affine_augment(img, p, b));
    for (float v : x.pixels) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Affine, DrawsWithinBounds) {
  Prng prng(6);
  const AugmentParams p{15, 0.1, 0.9, 1.1};
  for (int i = 0; i < 1000; ++i) {
    const auto d = draw_affine(p, prng);
    EXPECT_LE(std::abs(d.rotation_deg), 15.0);
    EXPECT_LE(std::abs(d.shear), 0.1);
    EXPECT_GE(d.zoom, 0.9);
    EXPECT_LE(d.zoom, 1.1);
  }
  EXPECT_THROW(draw_affine(AugmentParams{15, 0.1, 1.2, 1.1}, prng), Error);
  EXPECT_THROW(draw_affine(AugmentParams{-1, 0.1, 0.9, 1.1}, prng), Error);
}

TEST(OneHot, Examples) {
  EXPECT_EQ(one_hot(2, 7), (std::vector<float>{0, 0, 1, 0, 0, 0, 0}));
  EXPECT_EQ(one_hot(0, 2), (std::vector<float>{1, 0}));
  EXPECT_THROW(one_hot(7, 7), Error);
}

TEST(Batching, ImagesToTensor) {
  GrayImage a(2, 1), b(2, 1);
  a.pixels = {0.1f, 0.2f};
  b.pixels = {0.3f, 0.4f};
  const std::vector<GrayImage> imgs{a, b};
  const auto t = images_to_tensor(imgs);
  EXPECT_EQ(t.shape(), (Shape{2, 1, 1, 2}));
  EXPECT_EQ(tensor_image(t, 1), b);
  const std::vector<GrayImage> mixed{a, GrayImage(1, 1)};
  EXPECT_THROW(images_to_tensor(mixed), Error);
}

TEST(Manifest, ParsesAndResolves) {
  const auto m = parse_manifest("path,label\nimg/a.pgm,open\n/abs/b.pgm,closed\n", "/data");
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m[0].path, std::filesystem::path("/data/img/a.pgm"));
  EXPECT_EQ(m[1].path, std::filesystem::path("/abs/b.pgm"));
  EXPECT_EQ(m[1].label, "closed");
  EXPECT_THROW(parse_manifest("file,class\n", "/"), Error);
  EXPECT_THROW(parse_manifest("path,label\nonly-one-field\n", "/"), Error);
}
