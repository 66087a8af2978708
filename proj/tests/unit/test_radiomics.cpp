#include "doctest.h"

#include <random>

#include "endofuse/errors.hpp"
#include "endofuse/radiomics.hpp"

#include "support/checks.hpp"
#include "support/oracles.hpp"

using namespace endofuse;
using namespace endofuse::testing;
namespace rad = endofuse::radiomics;

namespace {

GrayImage ramp_image(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  GrayImage img{Raster(h, w)};
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) img.pixels(r, c) = u(rng);
  return img;
}

}  // namespace

TEST_CASE("texture matrices and features agree with brute-force oracles") {
  const auto r = texture_oracle_suite(50, 17);
  for (const auto& f : r.failures) INFO(f);
  CHECK(r.ok());
}

TEST_CASE("central and peripheral masks partition the image") {
  const auto r = mask_partition_suite(200, 19);
  CHECK(r.ok());
}

TEST_CASE("central mask on 8x8 at half radius covers the 12 innermost pixels") {
  const RoiMask m = rad::make_central_mask(8, 8, 0.5);
  CHECK(m.count() == 12);
  CHECK(m.bits(3, 3));
  CHECK(m.bits(2, 4));
  CHECK_FALSE(m.bits(2, 2));
  CHECK(rad::make_peripheral_mask(8, 8, 0.5).count() == 52);
  CHECK_THROWS_AS(rad::make_central_mask(7, 8), ParameterError);
  CHECK_THROWS_AS(rad::make_central_mask(8, 8, 0.0), ParameterError);
  CHECK_THROWS_AS(rad::make_central_mask(8, 8, 1.5), ParameterError);
}

TEST_CASE("first-order features of a four-pixel region") {
  GrayImage img{Raster::Zero(2, 2)};
  img.pixels << 1, 2, 3, 4;
  const RoiMask all{BitRaster::Constant(2, 2, true)};
  const auto f = rad::first_order_features(img, all);
  CHECK(f.at("mean") == doctest::Approx(2.5));
  CHECK(f.at("variance") == doctest::Approx(1.25));
  CHECK(f.at("skewness") == doctest::Approx(0.0));
  CHECK(f.at("kurtosis") == doctest::Approx(2.5625 / 1.5625 - 3.0));
  CHECK(f.at("energy") == doctest::Approx(30.0));
  CHECK(f.at("entropy") == doctest::Approx(2.0));
  CHECK(f.at("median") == doctest::Approx(2.5));
  CHECK(f.at("range") == doctest::Approx(3.0));
  CHECK_THROWS_AS(f.at("nonexistent"), std::out_of_range);
}

TEST_CASE("quantization maps a constant region to level 1") {
  GrayImage img{Raster::Constant(4, 4, 0.3)};
  const auto q = rad::quantize(img, RoiMask{BitRaster::Constant(4, 4, true)}, 8);
  CHECK((q.levels == 1).all());
  const auto f = rad::glcm_features(q);
  CHECK(f.at("energy") == doctest::Approx(1.0));
  CHECK(f.at("contrast") == doctest::Approx(0.0));
}

TEST_CASE("quantization spans levels 1..N over the masked range") {
  GrayImage img = ramp_image(10, 10, 3);
  const RoiMask all{BitRaster::Constant(10, 10, true)};
  const auto q = rad::quantize(img, all, 16);
  CHECK(q.levels.minCoeff() == 1);
  CHECK(q.levels.maxCoeff() == 16);
  CHECK(q.count() == 100);
}

TEST_CASE("LoG kernel sums to zero and filtering matches a reflect-101 correlation") {
  for (double sigma : {1.0, 2.0}) {
    const Raster k = rad::log_kernel(sigma);
    CHECK(k.rows() == 2 * static_cast<Index>(std::ceil(3 * sigma)) + 1);
    CHECK(std::abs(k.sum()) < 1e-12);

    const GrayImage img = ramp_image(16, 13, 5);
    std::vector<std::vector<double>> grid(16, std::vector<double>(13)), kern(k.rows(), std::vector<double>(k.cols()));
    for (Index r = 0; r < 16; ++r)
      for (Index c = 0; c < 13; ++c) grid[r][c] = img.pixels(r, c);
    for (Index r = 0; r < k.rows(); ++r)
      for (Index c = 0; c < k.cols(); ++c) kern[r][c] = k(r, c);
    const auto ref = oracle::correlate_reflect101(grid, kern);
    const GrayImage out = rad::log_filter(img, sigma);
    double worst = 0;
    for (Index r = 0; r < 16; ++r)
      for (Index c = 0; c < 13; ++c) worst = std::max(worst, std::abs(out.pixels(r, c) - ref[r][c]));
    CHECK(worst < 1e-12);
  }
  CHECK_THROWS_AS(rad::log_filter(ramp_image(8, 8, 1), 3.0), ParameterError);
}

TEST_CASE("LoG response of a constant image is zero") {
  const GrayImage out = rad::log_filter(GrayImage{Raster::Constant(12, 12, 0.7)}, 1.0);
  CHECK(out.pixels.abs().maxCoeff() < 1e-12);
}

TEST_CASE("extract_record yields 46 named features and rejects tiny regions") {
  const GrayImage img = ramp_image(32, 32, 7);
  const auto rec = rad::extract_record(img, rad::make_central_mask(32, 32), "img0");
  CHECK(rec.features.names.size() == 46);
  CHECK(rec.features.values.size() == 46);
  CHECK(rec.features.names == rad::record_feature_names());
  CHECK(rec.image_id == "img0");
  CHECK(rec.version == std::string(rad::kExtractorVersion));

  RoiMask tiny{BitRaster::Constant(32, 32, false)};
  tiny.bits.block(0, 0, 3, 5) = true;  // 15 pixels
  CHECK_THROWS_AS(rad::extract_record(img, tiny), RegionTooSmall);
  tiny.bits(3, 0) = true;
  CHECK_NOTHROW(rad::extract_record(img, tiny));
}

TEST_CASE("merging central and peripheral tables gives 92 prefixed columns") {
  std::vector<rad::RadiomicsRecord> central, peripheral;
  for (int i = 0; i < 3; ++i) {
    const GrayImage img = ramp_image(24, 24, 40 + i);
    const std::string id = "im" + std::to_string(i);
    central.push_back(rad::extract_record(img, rad::make_central_mask(24, 24), id));
    peripheral.push_back(rad::extract_record(img, rad::make_peripheral_mask(24, 24), id));
  }
  const std::vector<int> labels{0, 1, 2};
  const FeatureTable c = rad::records_to_table(central, &labels);
  const FeatureTable p = rad::records_to_table(peripheral, &labels);
  const FeatureTable m = rad::merge_tables(c, p);
  CHECK(m.cols() == 92);
  CHECK(m.rows() == 3);
  CHECK(m.columns.front().starts_with("central_"));
  CHECK(m.columns.back().starts_with("peripheral_"));
  CHECK(m.diagnostics.empty());
  REQUIRE(m.labels.has_value());
  CHECK(*m.labels == labels);
  CHECK(m.values(1, 0) == c.values(1, 0));

  // Mismatched ids cannot be joined.
  peripheral.pop_back();
  const FeatureTable short_p = rad::records_to_table(peripheral);
  CHECK_THROWS_AS(rad::merge_tables(c, short_p), ValidationError);
}
