#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bsdg/transforms.hpp"

using namespace bsdg;
using ad::Shape;
using ad::Tensor;

namespace {

Tensor<float> noise_batch(std::size_t n, std::size_t c, std::size_t h,
                          std::size_t w, std::uint64_t seed) {
  RngStream rng(seed);
  Tensor<float> t(Shape{n, c, h, w});
  for (auto& v : t.values()) v = static_cast<float>(rng.next_double());
  return t;
}

}  // namespace

TEST_CASE("neutral magnitudes reproduce the input bitwise") {
  using K = TransformKind;
  Pipeline identity{"identity",
                    {{K::rotate, 0, 0},
                     {K::translate, 0, 0},
                     {K::shear, 0, 0},
                     {K::zoom, 1, 1},
                     {K::cutout, 0, 0},
                     {K::posterize, 8, 8},
                     {K::solarize, 1.01, 1.01},
                     {K::invert, 0, 0},
                     {K::contrast, 1, 1},
                     {K::brightness, 0, 0},
                     {K::hsv_shift, 0, 0},
                     {K::color_jitter, 1, 1},
                     {K::blur, 0, 0},
                     {K::sharpen, 1, 1},
                     {K::equalize, 0, 0}}};
  auto x = noise_batch(3, 3, 8, 8, 42);
  auto y = apply_pipeline(x, identity, 7);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("midpoint mode turns symmetric ranges into identities") {
  Pipeline p{"sym", {{TransformKind::rotate, -15, 15}, {TransformKind::brightness, -0.2, 0.2}}};
  auto x = noise_batch(2, 1, 8, 8, 3);
  auto y = apply_pipeline(x, p, 11, 0, /*stochastic=*/false);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y.values()[i] == x.values()[i]);
}

TEST_CASE("same seed gives identical corruption, different seeds differ") {
  auto x = noise_batch(4, 1, 16, 16, 9);
  Pipeline p = builtin_pipelines()[1];  // geometry
  auto a = apply_pipeline(x, p, 100);
  auto b = apply_pipeline(x, p, 100);
  auto c = apply_pipeline(x, p, 101);
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(a.values()[i] == b.values()[i]);
    if (a.values()[i] != c.values()[i]) ++diffs;
  }
  CHECK(diffs > 0);
}

TEST_CASE("batch splits do not change per-sample results") {
  auto x = noise_batch(10, 1, 16, 16, 5);
  Pipeline p = builtin_pipelines()[4];  // scale_shape
  auto whole = apply_pipeline(x, p, 77, 0);

  // Same samples pushed through in two chunks with the right global offsets.
  const std::size_t stride = 16 * 16;
  auto firstv = std::vector<float>(x.values().begin(),
                                   x.values().begin() + 6 * stride);
  auto secondv = std::vector<float>(x.values().begin() + 6 * stride, x.values().end());
  Tensor<float> first(Shape{6, 1, 16, 16}, std::move(firstv));
  Tensor<float> second(Shape{4, 1, 16, 16}, std::move(secondv));
  auto fa = apply_pipeline(first, p, 77, 0);
  auto sa = apply_pipeline(second, p, 77, 6);
  for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa.values()[i] == whole.values()[i]);
  for (std::size_t i = 0; i < sa.size(); ++i)
    CHECK(sa.values()[i] == whole.values()[6 * stride + i]);
}

TEST_CASE("pixels stay inside [0,1] and shapes are preserved") {
  auto x = noise_batch(6, 3, 12, 12, 21);
  for (const auto& p : builtin_pipelines()) {
    auto y = apply_pipeline(x, p, 13);
    REQUIRE(y.shape() == x.shape());
    for (float v : y.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
  for (const auto& p : builtin_holdout_pipelines()) {
    auto y = apply_pipeline(x, p, 13);
    REQUIRE(y.shape() == x.shape());
    for (float v : y.values()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("curated pipelines: five of three steps each, holdouts disjoint") {
  auto train = builtin_pipelines();
  auto holdout = builtin_holdout_pipelines();
  CHECK(train.size() == 5);
  for (const auto& p : train) CHECK(p.steps.size() == 3);
  CHECK(holdout.size() == 3);
  CHECK_NOTHROW(check_pipelines_disjoint(train, holdout));

  // Reusing an exact training tuple must be rejected.
  auto bad = holdout;
  bad[0].steps[0] = train[1].steps[0];
  CHECK_THROWS_AS(check_pipelines_disjoint(train, bad), config_error);
}

TEST_CASE("pipeline json round-trip") {
  Pipeline p = builtin_pipelines()[0];
  auto j = to_json(p);
  Pipeline q = pipeline_from_json(j);
  CHECK(q.name == p.name);
  REQUIRE(q.steps.size() == p.steps.size());
  for (std::size_t i = 0; i < p.steps.size(); ++i) CHECK(q.steps[i] == p.steps[i]);

  CHECK_THROWS_AS(pipeline_from_json(nlohmann::json{{"name", "x"}}), config_error);
  auto broken = j;
  broken["steps"][0]["kind"] = "melt";
  CHECK_THROWS_AS(pipeline_from_json(broken), config_error);
  auto inverted = j;
  inverted["steps"][0]["lo"] = 2.0;
  inverted["steps"][0]["hi"] = 1.0;
  CHECK_THROWS_AS(pipeline_from_json(inverted), config_error);
}

TEST_CASE("hue shift degrades to a photometric change on grayscale") {
  auto x = noise_batch(2, 1, 8, 8, 33);
  Pipeline p{"hue", {{TransformKind::hsv_shift, 0.1, 0.1}}};
  auto y = apply_pipeline(x, p, 1);
  std::size_t diffs = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(y.values()[i] >= 0.0f);
    CHECK(y.values()[i] <= 1.0f);
    if (y.values()[i] != x.values()[i]) ++diffs;
  }
  CHECK(diffs > 0);
}

TEST_CASE("single transform semantics") {
  SUBCASE("translate moves content by whole pixels") {
    Tensor<float> x(Shape{1, 1, 4, 4}, 0.0f);
    x.values()[1 * 4 + 1] = 1.0f;  // lit pixel at (1,1)
    Pipeline p{"t", {{TransformKind::translate, 0.25, 0.25}}};  // one pixel on 4px
    auto y = apply_pipeline(x, p, 0);
    CHECK(y.values()[2 * 4 + 2] == doctest::Approx(1.0f));
    CHECK(y.values()[1 * 4 + 1] == doctest::Approx(0.0f));
  }
  SUBCASE("cutout fills a square with 0.5") {
    Tensor<float> x(Shape{1, 1, 8, 8}, 1.0f);
    Pipeline p{"c", {{TransformKind::cutout, 0.5, 0.5}}};
    auto y = apply_pipeline(x, p, 0, 0, /*stochastic=*/false);  // centered 4x4
    std::size_t halves = 0;
    for (float v : y.values())
      if (v == 0.5f) ++halves;
    CHECK(halves == 16);
  }
  SUBCASE("posterize to one bit leaves only the extremes") {
    auto x = noise_batch(1, 1, 8, 8, 2);
    Pipeline p{"p", {{TransformKind::posterize, 1, 1}}};
    auto y = apply_pipeline(x, p, 0);
    for (float v : y.values()) CHECK((v == 0.0f || v == 1.0f));
  }
  SUBCASE("solarize flips pixels at or above the threshold") {
    Tensor<float> x(Shape{1, 1, 1, 2}, {0.25f, 0.75f});
    Pipeline p{"s", {{TransformKind::solarize, 0.5, 0.5}}};
    auto y = apply_pipeline(x, p, 0);
    CHECK(y.values()[0] == 0.25f);
    CHECK(y.values()[1] == doctest::Approx(0.25f));
  }
  SUBCASE("invert at full strength is the negative") {
    Tensor<float> x(Shape{1, 1, 1, 2}, {0.2f, 0.9f});
    Pipeline p{"i", {{TransformKind::invert, 1, 1}}};
    auto y = apply_pipeline(x, p, 0);
    CHECK(y.values()[0] == doctest::Approx(0.8f));
    CHECK(y.values()[1] == doctest::Approx(0.1f).epsilon(1e-6));
  }
}
