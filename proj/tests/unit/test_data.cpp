// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "csmap/container.hpp"
#include "csmap/data.hpp"
#include "csmap/error.hpp"
#include "oracles.hpp"

using namespace csmap;

namespace {

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::size_t count(const std::vector<std::uint8_t>& v) { return std::count(v.begin(), v.end(), std::uint8_t{1}); }

}  // namespace

TEST(Squares, HalfPositiveExactly) {
  SquaresConfig cfg;
  cfg.n = 2000;
  cfg.seed = 7;
  const auto d = gen_squares(cfg);
  EXPECT_EQ(d.size(), 2000u);
  EXPECT_EQ(count(d.label("square")), 1000u);
  EXPECT_EQ(d.shape, (ImageShape{32, 32, 1}));
  d.validate();
}

TEST(Squares, CountsRoundHalfUp) {
  SquaresConfig cfg;
  cfg.n = 5;
  cfg.fraction_with = 0.5;  // 2.5 -> 3
  EXPECT_EQ(count(gen_squares(cfg).label("square")), 3u);
  cfg.n = 7;
  cfg.fraction_with = 0.3;  // 2.1 -> 2
  EXPECT_EQ(count(gen_squares(cfg).label("square")), 2u);
  cfg.n = 10;
  cfg.fraction_with = 0.25;  // 2.5 -> 3
  EXPECT_EQ(count(gen_squares(cfg).label("square")), 3u);
}

TEST(Squares, SquarePixelsHaveContractBrightness) {
  for (const auto b : {Brightness::bright, Brightness::dark}) {
    SquaresConfig cfg;
    cfg.n = 60;
    cfg.brightness = b;
    cfg.seed = 2;
    const auto d = gen_squares(cfg);
    const auto& rows = d.annotation("square_row");
    const auto& cols = d.annotation("square_col");
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto s = d.sample(i);
      if (!d.label("square")[i]) {
        EXPECT_EQ(rows[i], -1.0f);
        continue;
      }
      const auto r0 = static_cast<std::size_t>(rows[i]), c0 = static_cast<std::size_t>(cols[i]);
      ASSERT_LE(r0 + 8, 32u);
      ASSERT_LE(c0 + 8, 32u);
      for (std::size_t r = r0; r < r0 + 8; ++r)
        for (std::size_t c = c0; c < c0 + 8; ++c) {
          if (b == Brightness::bright)
            EXPECT_GE(s[r * 32 + c], 0.9f);
          else
            EXPECT_LE(s[r * 32 + c], 0.1f);
        }
    }
    for (float v : d.samples) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Squares, BackgroundIsSmoothAndNonConstant) {
  SquaresConfig cfg;
  cfg.n = 20;
  cfg.seed = 4;
  const auto d = gen_squares(cfg);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d.label("square")[i]) continue;
    const auto s = d.sample(i);
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    EXPECT_GT(*hi - *lo, 0.01f);
    EXPECT_GE(*lo, 0.5f - 0.1f - 1e-6f);
    EXPECT_LE(*hi, 0.5f + 0.1f + 1e-6f);
    // Low frequency: neighbouring pixels differ far less than the range.
    float step = 0.0f;
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t c = 0; c + 1 < 32; ++c) step = std::max(step, std::abs(s[r * 32 + c + 1] - s[r * 32 + c]));
    EXPECT_LT(step, 0.5f * (*hi - *lo));
  }
}

TEST(Squares, ExplicitColorAndRgb) {
  SquaresConfig cfg;
  cfg.n = 10;
  cfg.channels = 3;
  cfg.color = std::array<float, 3>{0.0f, 0.0f, 1.0f};
  const auto d = gen_squares(cfg);
  EXPECT_EQ(d.shape.channels, 3u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d.label("square")[i]) continue;
    const auto r0 = static_cast<std::size_t>(d.annotation("square_row")[i]);
    const auto c0 = static_cast<std::size_t>(d.annotation("square_col")[i]);
    const auto s = d.sample(i);
    EXPECT_EQ(s[(r0 * 32 + c0) * 3 + 0], 0.0f);
    EXPECT_EQ(s[(r0 * 32 + c0) * 3 + 2], 1.0f);
  }
}

TEST(Squares, DeterministicAndRegenerableFromProvenance) {
  SquaresConfig cfg;
  cfg.n = 50;
  cfg.seed = 9;
  cfg.brightness = Brightness::dark;
  const auto a = gen_squares(cfg), b = gen_squares(cfg);
  EXPECT_EQ(a.samples, b.samples);
  EXPECT_EQ(a.labels, b.labels);
  cfg.seed = 10;
  EXPECT_NE(gen_squares(cfg).samples, a.samples);

  const auto& p = a.provenance;
  SquaresConfig again;
  again.n = p.at("n");
  again.image_size = p.at("image_size");
  again.channels = p.at("channels");
  again.side = p.at("side");
  again.brightness = p.at("brightness") == "dark" ? Brightness::dark : Brightness::bright;
  again.fraction_with = p.at("fraction_with");
  again.background_amplitude = p.at("background_amplitude");
  again.seed = p.at("seed");
  EXPECT_EQ(gen_squares(again).samples, a.samples);
}

TEST(Squares, InvalidGeometryRejected) {
  SquaresConfig cfg;
  cfg.side = 32;
  EXPECT_THROW(gen_squares(cfg), DataError);
  cfg.side = 8;
  cfg.fraction_with = 1.0;
  EXPECT_THROW(gen_squares(cfg), DataError);
  cfg.fraction_with = 0.5;
  cfg.n = 0;
  EXPECT_THROW(gen_squares(cfg), DataError);
  cfg.n = 4;
  cfg.background_amplitude = 0.7;
  EXPECT_THROW(gen_squares(cfg), DataError);
}

TEST(StLayers, TemplatesAreDisjointConcentricAndBalanced) {
  const auto t = st_templates(32, 3);
  ASSERT_EQ(t.size(), 3u);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = a + 1; b < 3; ++b)
      for (std::size_t i = 0; i < t[a].size(); ++i) EXPECT_EQ(t[a][i] * t[b][i], 0.0f);
  std::vector<double> area(3, 0), radius(3, 0);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j)
        if (t[k][i * 32 + j] == 1.0f) {
          area[k] += 1;
          radius[k] += std::hypot(i - 15.5, j - 15.5);
        }
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_GT(area[k], 150);
    radius[k] /= area[k];
  }
  // Inner disc, then rings moving outward.
  EXPECT_LT(radius[0], radius[1]);
  EXPECT_LT(radius[1], radius[2]);
  EXPECT_NEAR(area[0], area[2], 0.15 * area[0]);
  EXPECT_THROW(st_templates(32, 1), DataError);
}

TEST(StLayers, NoiseFreeGenesEqualTemplates) {
  StLayersConfig cfg;
  cfg.n_genes = 9;
  cfg.noise = 0.0;
  const auto d = gen_st_layers(cfg);
  const auto t = st_templates(32, 3);
  for (std::size_t g = 0; g < 9; ++g) {
    const auto s = d.sample(g);
    EXPECT_TRUE(std::equal(s.begin(), s.end(), t[g % 3].values().begin())) << g;
    EXPECT_EQ(d.ids[g], "g" + std::to_string(g));
    EXPECT_EQ(d.label("layer" + std::to_string(g % 3))[g], 1);
    EXPECT_EQ(d.annotation("template")[g], float(g % 3));
  }
}

TEST(StLayers, NoisyGenesNormalizedAndDeterministic) {
  StLayersConfig cfg;
  cfg.n_genes = 30;
  cfg.seed = 5;
  const auto a = gen_st_layers(cfg), b = gen_st_layers(cfg);
  EXPECT_EQ(a.samples, b.samples);
  for (std::size_t g = 0; g < a.size(); ++g) {
    const auto s = a.sample(g);
    EXPECT_EQ(*std::min_element(s.begin(), s.end()), 0.0f);
    EXPECT_EQ(*std::max_element(s.begin(), s.end()), 1.0f);
  }
  cfg.layer_patterns = 1;
  EXPECT_THROW(gen_st_layers(cfg), DataError);
}

TEST(Normalize, MinMaxAndDegenerateRules) {
  std::vector<float> v{2, 4, 6};
  const auto [lo, hi] = normalize_min_max(v);
  EXPECT_EQ(lo, 2.0);
  EXPECT_EQ(hi, 6.0);
  EXPECT_EQ(v, (std::vector<float>{0, 0.5f, 1}));
  std::vector<float> flat{3, 3, 3};
  normalize_min_max(flat);
  EXPECT_EQ(flat, (std::vector<float>{1, 1, 1}));
  std::vector<float> zero{0, 0};
  normalize_min_max(zero);
  EXPECT_EQ(zero, (std::vector<float>{0, 0}));
}

class StLoader : public ::testing::Test {
 protected:
  oracle::TempDir dir{"st"};
  std::filesystem::path matrix = dir / "counts.tsv", spots = dir / "spots.txt";
};

TEST_F(StLoader, OneHotCollisionsAndDrops) {
  // Four corner spots plus a fifth landing on the same cell as s1.
  write_file(spots, "spot x y\ns1 0 0\ns2 10 0\ns3 0 10\ns4 10 10\ns5 0.1 0.1\n");
  write_file(matrix,
             "gene\ts1\ts2\ts3\ts4\ts5\n"
             "one\t5\t0\t0\t0\t0\n"
             "zero\t0\t0\t0\t0\t0\n"
             "sum\t1\t0\t0\t2\t2\n");
  const auto r = load_st_counts(matrix, spots, {4, 4});
  ASSERT_EQ(r.genes.size(), 2u);
  EXPECT_EQ(r.dropped_all_zero, (std::vector<std::string>{"zero"}));
  const auto& one = r.genes[0];
  EXPECT_EQ(one.gene_id, "one");
  EXPECT_EQ(one.counts.shape(), (Shape{4, 4}));
  EXPECT_EQ(one.counts[0], 1.0f);
  EXPECT_EQ(std::count(one.counts.values().begin(), one.counts.values().end(), 0.0f), 15);
  EXPECT_EQ(one.raw_max, 5.0);
  const auto& sum = r.genes[1];
  // s1 and s5 share cell (0,0): 1+2 = 3 is the maximum; s4 holds 2.
  EXPECT_EQ(sum.raw_max, 3.0);
  EXPECT_EQ(sum.counts[0], 1.0f);
  EXPECT_NEAR(sum.counts[15], 2.0f / 3.0f, 1e-7);

  const auto d = st_grids_to_dataset(r, {4, 4});
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.ids[1], "sum");
  EXPECT_EQ(d.shape, (ImageShape{4, 4, 1}));
}

TEST_F(StLoader, MalformedLinesAreAllListed) {
  write_file(spots, "s1 0 0\ns2 1 1\ns3 x 1\n");
  write_file(matrix,
             "gene\ts1\ts2\n"
             "a\t1\n"
             "b\t1\t-2\n"
             "c\t1\t2\n");
  try {
    load_st_counts(matrix, spots, {8, 8});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("spots.txt:3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("counts.tsv:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("counts.tsv:3"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("counts.tsv:4"), std::string::npos) << msg;
  }
}

TEST_F(StLoader, SpotsOutsideExplicitBoundsAreErrors) {
  write_file(spots, "s1 0 0\ns2 20 5\n");
  write_file(matrix, "gene\ts1\ts2\ng\t1\t1\n");
  EXPECT_THROW(load_st_counts(matrix, spots, {8, 8}, CoordinateBounds{0, 10, 0, 10}), DataError);
  EXPECT_NO_THROW(load_st_counts(matrix, spots, {8, 8}));
  EXPECT_THROW(load_st_counts(dir / "nope.tsv", spots, {8, 8}), IoError);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  oracle::TempDir dir("ds");
  SquaresConfig cfg;
  cfg.n = 12;
  cfg.seed = 1;
  const auto d = gen_squares(cfg);
  save_dataset(d, dir / "d.bin");
  const auto r = load_dataset(dir / "d.bin");
  EXPECT_EQ(r.shape, d.shape);
  EXPECT_EQ(r.samples, d.samples);
  EXPECT_EQ(r.ids, d.ids);
  EXPECT_EQ(r.labels, d.labels);
  EXPECT_EQ(r.annotations, d.annotations);
  EXPECT_EQ(r.provenance, d.provenance);
}

TEST(DatasetIo, TruncatedPayloadIsSizeMismatch) {
  oracle::TempDir dir("ds-trunc");
  SquaresConfig cfg;
  cfg.n = 4;
  save_dataset(gen_squares(cfg), dir / "d.bin");
  const auto full = std::filesystem::file_size(dir / "d.bin");
  std::filesystem::resize_file(dir / "d.bin", full - 10);
  try {
    load_dataset(dir / "d.bin");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("size mismatch"), std::string::npos) << e.what();
  }
}

TEST(DatasetIo, MissingLabelNamesAvailableAttributes) {
  SquaresConfig cfg;
  cfg.n = 4;
  const auto d = gen_squares(cfg);
  try {
    d.label("smile");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("smile"), std::string::npos);
    EXPECT_NE(msg.find("square"), std::string::npos);
  }
}

TEST(DatasetOps, SubsetBatchAndValidation) {
  SquaresConfig cfg;
  cfg.n = 10;
  const auto d = gen_squares(cfg);
  const std::vector<std::size_t> idx{7, 2};
  const auto s = d.subset(idx);
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.ids, (std::vector<std::string>{"img7", "img2"}));
  EXPECT_EQ(s.label("square")[0], d.label("square")[7]);
  const auto b = d.batch(idx);
  EXPECT_EQ(b.shape(), (Shape{2, 32, 32, 1}));
  EXPECT_EQ(b[1024 + 5], d.sample(2)[5]);
  EXPECT_EQ(d.sample_tensor(3).shape(), (Shape{32, 32, 1}));
  EXPECT_EQ(d.find_id("img4"), std::optional<std::size_t>(4));
  EXPECT_FALSE(d.find_id("nope"));
  auto broken = d;
  broken.labels["square"][0] = 2;
  EXPECT_THROW(broken.validate(), DataError);
  broken = d;
  broken.labels["square"].pop_back();
  EXPECT_THROW(broken.validate(), DataError);
}
