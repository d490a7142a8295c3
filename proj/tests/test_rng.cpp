#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "entaudit/rng.hpp"

using namespace entaudit;

TEST_CASE("fnv1a64 matches the published test vectors") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
}

TEST_CASE("fnv1a64 chains like byte concatenation") {
    CHECK(fnv1a64("bar", fnv1a64("foo")) == fnv1a64("foobar"));
}

TEST_CASE("derive_key separates tags, parts and seeds") {
    std::set<std::uint64_t> keys;
    keys.insert(derive_key(1, "mask"));
    keys.insert(derive_key(1, "noise"));
    keys.insert(derive_key(2, "mask"));
    keys.insert(derive_key(1, "mask", 0));
    keys.insert(derive_key(1, "mask", 1));
    keys.insert(derive_key(1, "mask", 0, 0));
    keys.insert(derive_key(1, "mask", 0, 1));
    CHECK(keys.size() == 7);
    CHECK(derive_key(1, "mask") == derive_key(1, "mask"));
}

TEST_CASE("StreamRng replays identically from the same key") {
    StreamRng a(derive_key(42, "test"));
    StreamRng b(derive_key(42, "test"));
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("StreamRng copies replay the remaining stream") {
    StreamRng a(7);
    for (int i = 0; i < 17; ++i) a.next_u64();
    StreamRng b = a;
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
}

TEST_CASE("next_uniform lies in [0,1) with a flat mean") {
    StreamRng rng(derive_key(3, "uniform"));
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double u = rng.next_uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / n - 0.5) < 0.01);
}

TEST_CASE("next_below respects the bound and covers the range") {
    StreamRng rng(derive_key(4, "below"));
    long counts[7] = {0};
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        auto v = rng.next_below(7);
        REQUIRE(v < 7);
        ++counts[v];
    }
    for (long c : counts) CHECK(std::abs(c - n / 7.0) < 0.05 * n / 7.0);
}

TEST_CASE("next_gaussian has standard moments") {
    StreamRng rng(derive_key(5, "gauss"));
    double sum = 0.0, sum_sq = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double g = rng.next_gaussian();
        sum += g;
        sum_sq += g * g;
    }
    double mean = sum / n;
    double var = sum_sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("keyed_uniform is a pure function of the key") {
    CHECK(keyed_uniform(99) == keyed_uniform(99));
    CHECK(keyed_uniform(99) != keyed_uniform(100));
    double u = keyed_uniform(derive_key(1, "drop", 5));
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
}
