#include "dpmm_rul/datagen.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace dpmm_rul;

namespace {

ModeSpec mode_a() { return default_mode_specs(1)[0]; }

}  // namespace

TEST_CASE("failure_time arithmetic") {
  CHECK(failure_time(0.0, 2.0, 400.0) == Catch::Approx(200.0));
  CHECK(failure_time(-1.5, 2.5, 400.0) == Catch::Approx(160.6));
  CHECK(failure_time(400.0, 1.0, 400.0) == 0.0);  // degenerate: no observable cycles
  CHECK_THROWS_AS(failure_time(0.0, 0.0, 400.0), std::invalid_argument);
  CHECK_THROWS_AS(failure_time(0.0, -1.0, 400.0), std::invalid_argument);
}

TEST_CASE("sample_random_effects rejects non-positive slopes") {
  ModeSpec m = mode_a();
  Rng rng(1);
  for (int i = 0; i < 500; ++i) {
    const auto [g0, g1] = sample_random_effects(m, rng);
    (void)g0;
    CHECK(g1 > 0.0);
  }
}

TEST_CASE("zero covariance degenerates to the mean") {
  ModeSpec m = mode_a();
  m.gamma_cov.setZero();
  Rng rng(5);
  const auto [g0, g1] = sample_random_effects(m, rng);
  CHECK(g0 == m.gamma_mean[0]);
  CHECK(g1 == m.gamma_mean[1]);
}

TEST_CASE("rejection cap signals a degenerate mode") {
  ModeSpec m = mode_a();
  m.gamma_mean << 0.0, -100.0;  // slope essentially never positive
  m.gamma_cov << 1.0, 0.0, 0.0, 1.0;
  Rng rng(3);
  CHECK_THROWS_AS(sample_random_effects(m, rng, 1000), std::runtime_error);
}

TEST_CASE("accepted-draw mean matches a brute-force Monte Carlo oracle") {
  // oracle: direct rejection sampling with its own stream and arithmetic
  const ModeSpec m = mode_a();
  const double sd0 = std::sqrt(m.gamma_cov(0, 0));
  const double c01 = m.gamma_cov(0, 1) / sd0;
  const double sd1 = std::sqrt(m.gamma_cov(1, 1) - c01 * c01);

  std::mt19937_64 eng(99);
  std::normal_distribution<double> n01;
  const long oracle_n = 10'000'000;
  double acc0 = 0, acc1 = 0, acc0sq = 0, acc1sq = 0;
  long kept = 0;
  for (long i = 0; i < oracle_n; ++i) {
    const double z0 = n01(eng), z1 = n01(eng);
    const double g0 = m.gamma_mean[0] + sd0 * z0;
    const double g1 = m.gamma_mean[1] + c01 * z0 + sd1 * z1;
    if (g1 <= 0) continue;
    ++kept;
    acc0 += g0;
    acc1 += g1;
    acc0sq += g0 * g0;
    acc1sq += g1 * g1;
  }
  const double mean0 = acc0 / kept, mean1 = acc1 / kept;
  const double var0 = acc0sq / kept - mean0 * mean0;
  const double var1 = acc1sq / kept - mean1 * mean1;

  Rng rng(123);
  const long n = 100'000;
  double s0 = 0, s1 = 0;
  for (long i = 0; i < n; ++i) {
    const auto [g0, g1] = sample_random_effects(m, rng);
    s0 += g0;
    s1 += g1;
  }
  const double se0 = std::sqrt(var0 / n + var0 / kept);
  const double se1 = std::sqrt(var1 / n + var1 / kept);
  CHECK(std::abs(s0 / n - mean0) < 3.0 * se0);
  CHECK(std::abs(s1 / n - mean1) < 3.0 * se1);
}

TEST_CASE("generate_sensor_signal hand cases") {
  const auto sensors = default_sensor_specs();
  ModeSpec m = mode_a();

  SystemEffects fx;
  fx.u1 = Vector::Zero(8);
  fx.u2 = Vector::Zero(8);
  fx.u3 = Vector::Zero(8);

  SECTION("sensor 4 arithmetic from the published row") {
    fx.u1[3] = 10.0;
    fx.u3[3] = 5.0;
    fx.gamma0 = 0.0;
    fx.gamma1 = 2.0;  // eta(t) = 2t
    m.trend_signs[3] = +1.0;
    // 0.001 * 10 * sqrt(100) + 5 + 200 = 205.1
    CHECK(generate_sensor_signal(fx, m, sensors[3], 3, 100) == Catch::Approx(205.1));
  }

  SECTION("all-zero coefficients pass the degradation through") {
    SensorSpec flat{0.0, 0.0, 0.0, TemporalFn::None, 0.0};
    fx.gamma0 = -1.0;
    fx.gamma1 = 3.0;
    m.trend_signs[0] = +1.0;
    for (int t : {1, 7, 50})
      CHECK(generate_sensor_signal(fx, m, flat, 0, t) == Catch::Approx(-1.0 + 3.0 * t));
  }

  SECTION("sensor 1 uses a sine at 0.05t") {
    fx.u2[0] = 1.0;
    fx.gamma0 = fx.gamma1 = 0.0;
    const double v = generate_sensor_signal(fx, m, sensors[0], 0, 10);
    CHECK(v == Catch::Approx(sensors[0].delta3 * std::sin(0.05 * 10.0)));
  }
}

TEST_CASE("trend sign flip changes only the degradation term") {
  FleetConfig cfg = default_fleet_config(1, 3, 42);
  Fleet base = generate_fleet(cfg);
  FleetConfig flipped_cfg = cfg;
  flipped_cfg.modes[0].trend_signs[2] = -1.0;  // was +1
  Fleet flipped = generate_fleet(flipped_cfg);

  for (std::size_t i = 0; i < base.size(); ++i) {
    REQUIRE(base[i].length() == flipped[i].length());
    for (Eigen::Index t = 0; t < base[i].length(); ++t) {
      // flipped sensor moves by exactly -2 * eta(t); all others identical
      for (Eigen::Index s = 0; s < 8; ++s) {
        const double diff = flipped[i].readings(t, s) - base[i].readings(t, s);
        if (s == 2) {
          CHECK(diff != 0.0);
        } else {
          CHECK(diff == 0.0);
        }
      }
    }
  }
}

TEST_CASE("noise-free zero-effect systems reproduce eta exactly") {
  FleetConfig cfg = default_fleet_config(1, 1, 7);
  cfg.noise_sd = 0.0;
  cfg.uniform_hi = 0.0;  // test hook: all U draws collapse to 0
  Fleet fleet = generate_fleet(cfg);
  REQUIRE(fleet.size() == 1);
  const auto& h = fleet[0];
  // recover gamma from the first sensor (sign -1): value = -eta(t)
  const double eta1 = -h.readings(0, 0);
  const double eta2 = -h.readings(1, 0);
  const double g1 = eta2 - eta1;
  const double g0 = eta1 - g1;
  for (Eigen::Index t = 0; t < h.length(); ++t)
    for (Eigen::Index s = 0; s < 8; ++s) {
      const double expected =
          cfg.modes[0].trend_signs[s] * (g0 + g1 * static_cast<double>(t + 1));
      CHECK(h.readings(t, s) == Catch::Approx(expected).margin(1e-9));
    }
  // tau respects the threshold identity
  CHECK(h.failure_time == Catch::Approx((cfg.failure_threshold - g0) / g1));
  CHECK(h.length() == static_cast<Eigen::Index>(std::floor(h.failure_time)));
}

TEST_CASE("generate_fleet counts, labels and determinism") {
  FleetConfig cfg = default_fleet_config(4, 5, 2024);
  Fleet a = generate_fleet(cfg);
  CHECK(a.size() == 20);
  int per_mode[4] = {0, 0, 0, 0};
  for (const auto& h : a) {
    REQUIRE(h.true_mode.has_value());
    for (int m = 0; m < 4; ++m)
      if (*h.true_mode == cfg.modes[static_cast<std::size_t>(m)].name) per_mode[m]++;
    CHECK(h.length() >= 1);
  }
  for (int m = 0; m < 4; ++m) CHECK(per_mode[m] == 5);

  Fleet b = generate_fleet(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].system_id == b[i].system_id);
    CHECK(a[i].failure_time == b[i].failure_time);
    CHECK(a[i].readings == b[i].readings);  // bit-identical
  }

  FleetConfig single = default_fleet_config(1, 1, 5);
  CHECK(generate_fleet(single).size() == 1);
}

TEST_CASE("adding a sensor never perturbs existing sensors") {
  FleetConfig cfg = default_fleet_config(1, 2, 77);
  Fleet base = generate_fleet(cfg);

  FleetConfig wider = cfg;
  wider.sensors.push_back({0.5, 0.5, 1.0, TemporalFn::Sine, 0.2});
  for (auto& m : wider.modes) {
    Vector signs(9);
    signs << m.trend_signs, 1.0;
    m.trend_signs = signs;
  }
  Fleet more = generate_fleet(wider);
  for (std::size_t i = 0; i < base.size(); ++i)
    CHECK(base[i].readings == more[i].readings.leftCols(8));
}

TEST_CASE("emergent modes are delivered as scheduled batches") {
  FleetConfig cfg = default_fleet_config(3, 4, 9);
  cfg.emergence_schedule.emplace_back(6, "C");
  Fleet initial = generate_fleet(cfg);
  CHECK(initial.size() == 8);  // modes A and B only
  for (const auto& h : initial) CHECK(*h.true_mode != "C");

  const auto batches = generate_emergent_batches(cfg);
  REQUIRE(batches.size() == 1);
  CHECK(batches[0].arrival_iteration == 6);
  CHECK(batches[0].histories.size() == 4);
  for (const auto& h : batches[0].histories) CHECK(*h.true_mode == "C");

  cfg.emergence_schedule[0].second = "Z";
  CHECK_THROWS_AS(generate_emergent_batches(cfg), std::invalid_argument);
}

TEST_CASE("config validation catches bad specs") {
  FleetConfig cfg = default_fleet_config(2, 3, 1);
  cfg.failure_threshold = 0.0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

  cfg = default_fleet_config(2, 3, 1);
  cfg.modes[0].trend_signs[0] = 0.5;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

  cfg = default_fleet_config(2, 3, 1);
  cfg.modes[0].gamma_cov(0, 1) = 5.0;  // asymmetric
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);

  SensorSpec s{0.1, 0.5, 0.3, TemporalFn::None, 0.0};  // delta3 != 0 with no fn
  CHECK_THROWS_AS(validate(s), std::invalid_argument);
}
