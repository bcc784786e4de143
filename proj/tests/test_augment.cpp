#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "atas/augment.hpp"
#include "atas/data.hpp"

using atas::CorpusConfig;
using atas::MosaicSample;
using atas::Tensor;
using atas::TileSample;

namespace {

CorpusConfig tile_config() {
    CorpusConfig c;
    c.num_classes = 16;
    c.samples_per_class = 4;
    c.noise_std = 0.0;
    c.seed = 3;
    return c;
}

TileSample constant_tile(double value, int class_id, std::size_t side = 32) {
    TileSample t;
    t.image = Tensor::full({3, side, side}, value);
    t.class_id = class_id;
    t.patch_labels.assign((side / 8) * (side / 8), class_id);
    return t;
}

// brute-force ownership: which tile's pixel rectangle contains this patch?
std::vector<std::set<std::size_t>> expected_patch_map(std::size_t g, std::size_t tile_side, std::size_t patch) {
    std::size_t mosaic_side = g * tile_side;
    std::size_t pps = mosaic_side / patch;
    std::vector<std::set<std::size_t>> map(g * g);
    for (std::size_t p = 0; p < pps * pps; ++p) {
        std::size_t y0 = (p / pps) * patch;
        std::size_t x0 = (p % pps) * patch;
        std::size_t tile = (y0 / tile_side) * g + (x0 / tile_side);
        map[tile].insert(p);
    }
    return map;
}

} // namespace

TEST_SUITE("augment") {

TEST_CASE("degenerate grid: mosaic of one tile is that tile") {
    auto corpus = atas::gen_corpus(tile_config());
    MosaicSample m = atas::make_mosaic({corpus[5]}, 1, 8);
    CHECK(m.image.data() == corpus[5].image.data());
    REQUIRE(m.tile_patch_map.size() == 1);
    CHECK(m.tile_patch_map[0].size() == 16);
    for (std::size_t p = 0; p < 16; ++p) CHECK(m.tile_patch_map[0][p] == p);
    CHECK(m.tile_class_ids[0] == corpus[5].class_id);
}

TEST_CASE("constant tiles fill their quadrants") {
    std::vector<TileSample> tiles = {constant_tile(1, 0), constant_tile(2, 1), constant_tile(3, 2),
                                     constant_tile(4, 3)};
    MosaicSample m = atas::make_mosaic(tiles, 2, 8);
    CHECK(m.image.dim(1) == 64);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 64; ++y)
            for (std::size_t x = 0; x < 64; ++x) {
                double want = static_cast<double>((y / 32) * 2 + (x / 32) + 1);
                CHECK(m.image.data()[c * 4096 + y * 64 + x] == want);
            }
    auto want_map = expected_patch_map(2, 32, 8);
    for (std::size_t t = 0; t < 4; ++t) {
        std::set<std::size_t> got(m.tile_patch_map[t].begin(), m.tile_patch_map[t].end());
        CHECK(got == want_map[t]);
    }
}

TEST_CASE("each tile owns 16 of 64 patches at g=2, verified by enumeration") {
    auto corpus = atas::gen_corpus(tile_config());
    MosaicSample m = atas::make_mosaic({corpus[0], corpus[7], corpus[21], corpus[40]}, 2, 8);
    auto want_map = expected_patch_map(2, 32, 8);
    for (std::size_t t = 0; t < 4; ++t) {
        CHECK(m.tile_patch_map[t].size() == 16);
        std::set<std::size_t> got(m.tile_patch_map[t].begin(), m.tile_patch_map[t].end());
        CHECK(got == want_map[t]);
    }
}

TEST_CASE("patch map partitions all mosaic patches for g in {1,2,3}") {
    auto corpus = atas::gen_corpus(tile_config());
    for (std::size_t g : {1u, 2u, 3u}) {
        std::vector<TileSample> tiles(corpus.begin(), corpus.begin() + g * g);
        MosaicSample m = atas::make_mosaic(tiles, g, 8);
        std::size_t n = m.num_patches();
        CHECK(n == g * g * 16);
        std::set<std::size_t> all;
        for (const auto& s : m.tile_patch_map) {
            CHECK(s.size() == n / (g * g));
            for (std::size_t p : s) CHECK(all.insert(p).second); // disjoint
        }
        CHECK(all.size() == n);
        CHECK(*all.rbegin() == n - 1);
    }
}

TEST_CASE("cropping the mosaic reproduces the tiles bit-exactly") {
    CorpusConfig cfg = tile_config();
    cfg.noise_std = 0.05;
    auto corpus = atas::gen_corpus(cfg);
    std::vector<TileSample> tiles = {corpus[1], corpus[9], corpus[17], corpus[33]};
    MosaicSample m = atas::make_mosaic(tiles, 2, 8);
    for (std::size_t t = 0; t < 4; ++t) {
        Tensor crop = atas::crop_tile(m, t, 2);
        CHECK(crop.data() == tiles[t].image.data());
    }
}

TEST_CASE("mosaic patch labels agree with tile labels") {
    auto corpus = atas::gen_corpus(tile_config());
    MosaicSample m = atas::make_mosaic({corpus[2], corpus[6], corpus[10], corpus[14]}, 2, 8);
    std::vector<int> labels = m.patch_labels();
    REQUIRE(labels.size() == 64);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t p : m.tile_patch_map[t]) CHECK(labels[p] == m.tile_class_ids[t]);
    for (int l : labels) CHECK(l >= 0);
}

TEST_CASE("make_mosaic rejects bad inputs") {
    auto corpus = atas::gen_corpus(tile_config());
    std::vector<TileSample> three(corpus.begin(), corpus.begin() + 3);
    CHECK_THROWS_AS(atas::make_mosaic(three, 2, 8), atas::ConfigError);

    std::vector<TileSample> mixed = {corpus[0], corpus[1], corpus[2], constant_tile(1, 0, 16)};
    CHECK_THROWS_AS(atas::make_mosaic(mixed, 2, 8), atas::DimensionError);
}

TEST_CASE("sample_mosaic_batch: degenerate batch equals a corpus tile") {
    auto corpus = atas::gen_corpus(tile_config());
    auto batch = atas::sample_mosaic_batch(corpus, 1, 1, 99, 8);
    REQUIRE(batch.size() == 1);
    REQUIRE(batch[0].tile_corpus_indices.size() == 1);
    CHECK(batch[0].image.data() == corpus[batch[0].tile_corpus_indices[0]].image.data());
}

TEST_CASE("sample_mosaic_batch is deterministic in the seed") {
    auto corpus = atas::gen_corpus(tile_config());
    auto a = atas::sample_mosaic_batch(corpus, 4, 2, 123, 8);
    auto b = atas::sample_mosaic_batch(corpus, 4, 2, 123, 8);
    auto c = atas::sample_mosaic_batch(corpus, 4, 2, 124, 8);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.data() == b[i].image.data());
        CHECK(a[i].tile_corpus_indices == b[i].tile_corpus_indices);
    }
    bool any_diff = false;
    for (std::size_t i = 0; i < a.size(); ++i) any_diff |= (a[i].tile_corpus_indices != c[i].tile_corpus_indices);
    CHECK(any_diff);

    CHECK_THROWS_AS(atas::sample_mosaic_batch({}, 1, 1, 0, 8), atas::ConfigError);
}

TEST_CASE("tile class frequency is near uniform over many draws") {
    auto corpus = atas::gen_corpus(tile_config()); // 16 classes x 4 tiles
    std::size_t draws = 0;
    std::vector<std::size_t> hist(16, 0);
    auto batch = atas::sample_mosaic_batch(corpus, 2500, 2, 2024, 8);
    for (const MosaicSample& m : batch)
        for (int c : m.tile_class_ids) {
            hist[c]++;
            ++draws;
        }
    CHECK(draws == 10000);
    for (std::size_t c = 0; c < 16; ++c) {
        double freq = static_cast<double>(hist[c]) / static_cast<double>(draws);
        CHECK(std::fabs(freq - 1.0 / 16) <= 0.05);
        // binomial noise at 10k draws is ~0.0024; 4 sigma still flags any real skew
        CHECK(std::fabs(freq - 1.0 / 16) <= 4.0 * 0.0025);
    }
}

} // TEST_SUITE
