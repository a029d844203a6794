#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <vector>

#include "prodseek/rng.hpp"

using namespace prodseek;

TEST_CASE("same seed reproduces the stream") {
    Rng a(123), b(123);
    for (int i = 0; i < 200; ++i) {
        REQUIRE(a.uniform() == b.uniform());
    }
}

TEST_CASE("derived seeds give distinct streams") {
    Rng a(derive_seed(7, 0)), b(derive_seed(7, 1));
    int same = 0;
    for (int i = 0; i < 64; ++i) {
        if (a.uniform() == b.uniform()) ++same;
    }
    REQUIRE(same == 0);
}

TEST_CASE("uniform stays in [0,1) and fills the range") {
    Rng r(5);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    REQUIRE(lo < 0.01);
    REQUIRE(hi > 0.99);
}

TEST_CASE("uniform_int respects inclusive bounds and hits every value") {
    Rng r(9);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 5000; ++i) {
        const int v = r.uniform_int(2, 6);
        REQUIRE(v >= 2);
        REQUIRE(v <= 6);
        ++counts[static_cast<std::size_t>(v - 2)];
    }
    for (int c : counts) REQUIRE(c > 700);
    REQUIRE_THROWS_AS(r.uniform_int(3, 2), std::invalid_argument);
}

TEST_CASE("normal has roughly the requested moments") {
    Rng r(11);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = r.normal(1.0, 2.0);
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    REQUIRE(mean == Catch::Approx(1.0).margin(0.06));
    REQUIRE(var == Catch::Approx(4.0).margin(0.25));
}

TEST_CASE("shuffle permutes without loss") {
    Rng r(3);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    std::vector<int> orig = v;
    r.shuffle(v);
    REQUIRE(v != orig);  // astronomically unlikely to be identity
    std::sort(v.begin(), v.end());
    REQUIRE(v == orig);
}

TEST_CASE("state save/restore resumes the exact stream") {
    Rng r(77);
    for (int i = 0; i < 10; ++i) r.uniform();
    const std::string state = r.save_state();
    std::vector<double> ahead;
    for (int i = 0; i < 20; ++i) ahead.push_back(r.uniform());
    Rng fresh(0);
    fresh.restore_state(state);
    for (int i = 0; i < 20; ++i) REQUIRE(fresh.uniform() == ahead[static_cast<std::size_t>(i)]);
}
