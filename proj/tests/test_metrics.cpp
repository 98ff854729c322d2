#include <doctest.h>

#include <cmath>
#include <random>

#include "mmml/errors.hpp"
#include "mmml/metrics.hpp"
#include "metrics_fixture.hpp"

using namespace mmml;

namespace {

EvalPairs mosi(std::vector<double> p, std::vector<double> l) { return {std::move(p), std::move(l), TaskStyle::mosi}; }
EvalPairs sims(std::vector<double> p, std::vector<double> l) { return {std::move(p), std::move(l), TaskStyle::sims}; }

}  // namespace

TEST_CASE("has0 treats zero as positive") {
  const auto s = has0_binary(mosi({0.2, -0.1, 0.0}, {0.5, -0.3, 0.0}));
  CHECK(s.accuracy == 1.0);
  CHECK(s.f1 == 1.0);
  CHECK(has0_binary(mosi({-0.1}, {0.0})).accuracy == 0.0);
  CHECK_THROWS_AS(has0_binary(mosi({}, {})), ContractError);
}

TEST_CASE("non0 drops zero labels") {
  CHECK(non0_binary(mosi({9, 2, -2}, {0, 1, -1})).accuracy == 1.0);
  CHECK(non0_binary(mosi({-1, -2, 2}, {0, 1, -1})).accuracy == 0.0);
  CHECK_THROWS_AS(non0_binary(mosi({1, 2}, {0, 0})), UndefinedMetricError);
  // A zero prediction on a nonzero label counts as negative.
  CHECK(non0_binary(mosi({0.0}, {1.0})).accuracy == 0.0);
}

TEST_CASE("has0 and non0 agree without zero labels") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.5);
  for (int trial = 0; trial < 20; ++trial) {
    EvalPairs p{{}, {}, TaskStyle::mosi};
    for (int i = 0; i < 15; ++i) {
      p.predictions.push_back(n(rng));
      double l = n(rng);
      p.labels.push_back(l == 0.0 ? 0.5 : l);
    }
    const auto a = has0_binary(p), b = non0_binary(p);
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.f1 == b.f1);
  }
}

TEST_CASE("MOSI multi-class accuracy") {
  CHECK(acc_k_mosi(mosi({2.6}, {2.9}), 7) == 1.0);
  CHECK(mosi_class(-3.4, 7) == -3);
  CHECK(mosi_class(2.6, 5) == 2);
  CHECK(mosi_class(0.5, 7) == 1);
  CHECK(mosi_class(-0.5, 7) == -1);
  CHECK(mosi_class(-2.5, 5) == -2);
  CHECK_THROWS_AS(acc_k_mosi(mosi({}, {}), 5), ContractError);
  CHECK_THROWS_AS(acc_k_mosi(mosi({1}, {1}), 3), ContractError);
}

TEST_CASE("SIMS bins") {
  CHECK(sims_acc(sims({0.05}, {0.0}), 3) == 1.0);
  CHECK(sims_class(-0.8, 5) == 0);
  CHECK(sims_class(-0.75, 5) == 0);
  CHECK(sims_class(-0.7, 5) == 0);
  CHECK(sims_class(-0.65, 5) == 1);
  CHECK(sims_acc(sims({-0.8}, {-0.65}), 5) == 0.0);
  CHECK(sims_class(-0.1, 3) == 0);
  CHECK(sims_class(0.1, 3) == 2);
  CHECK(sims_class(0.7, 5) == 4);
  CHECK(sims_class(-0.0001, 2) == 0);
  CHECK(sims_class(0.0, 2) == 1);
  for (int k : {2, 3, 5}) CHECK(sims_acc(sims({-0.9, -0.3, 0.0, 0.4, 0.8}, {-0.9, -0.3, 0.0, 0.4, 0.8}), k) == 1.0);
  CHECK_THROWS_AS(sims_acc(sims({}, {}), 3), ContractError);
}

TEST_CASE("bin accuracy ignores perturbations inside a bin") {
  const auto base = sims({-0.85, -0.4, 0.0, 0.3, 0.9}, {-0.75, -0.2, 0.05, 0.5, 0.8});
  auto moved = base;
  const std::vector<double> shift{0.1, -0.25, 0.08, 0.35, -0.15};
  for (std::size_t i = 0; i < shift.size(); ++i) moved.predictions[i] += shift[i];
  for (int k : {2, 3, 5}) CHECK(sims_acc(base, k) == sims_acc(moved, k));
}

TEST_CASE("mae and pearson") {
  CHECK(mae(mosi({1, 2, 3}, {1, 2, 4})) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(mae(mosi({1, 2}, {1, 2})) == 0.0);
  CHECK(pearson(mosi({1, 2, 3}, {1, 2, 3})) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson(mosi({1, -2, 3}, {-1, 2, -3})) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(pearson(mosi({1, 1, 1}, {1, 2, 3})), UndefinedMetricError);

  const auto p = mosi({0.3, -1.2, 2.0, 0.1}, {0.5, -1.0, 1.5, -0.4});
  auto shifted = p;
  for (auto& v : shifted.predictions) v += 0.75;
  for (auto& v : shifted.labels) v += 0.75;
  CHECK(std::abs(mae(shifted) - mae(p)) < 1e-12);
}

TEST_CASE("report fields") {
  const auto m = full_report(mosi({0.5, -0.2, 1.0}, {0.4, -0.1, 1.2}));
  CHECK(m.fields.size() == 8);
  const auto s = full_report(sims({0.5, -0.2, 1.0}, {0.4, -0.1, 0.2}));
  CHECK(s.fields.size() == 6);

  const auto undefined = full_report(mosi({0.5, -0.2}, {0.0, 0.0}));
  CHECK_FALSE(undefined.get("non0_acc2").has_value());
  CHECK_FALSE(undefined.get("corr").has_value());
  CHECK(undefined.to_json().find("\"non0_acc2\":null") != std::string::npos);

  const auto perfect = full_report(mosi({-2.0, 0.0, 1.3, 2.9}, {-2.0, 0.0, 1.3, 2.9}));
  for (const auto& [name, value] : perfect.fields) {
    CAPTURE(name);
    REQUIRE(value.has_value());
    if (name == "mae") CHECK(*value == 0.0);
    else CHECK(*value == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(perfect.to_json().find("\"mae_x100\"") != std::string::npos);
  CHECK(perfect.csv_header() == "has0_acc2,has0_f1,non0_acc2,non0_f1,acc5,acc7,mae,corr,mae_x100");
}

TEST_CASE("fixture matches the reference script") {
  const auto m = full_report(fixture::mosi_pairs());
  for (const auto& [name, expected] : fixture::kMosiExpected) {
    CAPTURE(name);
    REQUIRE(m.get(std::string(name)).has_value());
    CHECK(std::abs(*m.get(std::string(name)) - expected) <= 1e-12);
  }
  const auto s = full_report(fixture::sims_pairs());
  for (const auto& [name, expected] : fixture::kSimsExpected) {
    CAPTURE(name);
    REQUIRE(s.get(std::string(name)).has_value());
    CHECK(std::abs(*s.get(std::string(name)) - expected) <= 1e-12);
  }
}
