#pragma once

// Mosaic augmentation: g x g single-object tiles concatenated into one
// composite image, with the partition of mosaic patch indices per tile kept
// alongside. Teacher class tokens come from the tiles; patch tokens from the
// composite.

#include <cstdint>
#include <vector>

#include "atas/data.hpp"
#include "atas/error.hpp"
#include "atas/rng.hpp"
#include "atas/tensor.hpp"

namespace atas {

struct MosaicSample {
    Tensor image; // [3 x g*tile_side x g*tile_side]
    std::vector<TileSample> tiles;
    std::vector<std::vector<std::size_t>> tile_patch_map; // disjoint, union = all mosaic patches
    std::vector<int> tile_class_ids;
    std::vector<std::size_t> tile_corpus_indices; // provenance, lets the trainer cache teacher tile outputs

    std::size_t num_patches() const {
        std::size_t n = 0;
        for (const auto& s : tile_patch_map) n += s.size();
        return n;
    }

    // tile class broadcast over its patch set, in mosaic patch order
    std::vector<int> patch_labels() const {
        std::vector<int> labels(num_patches(), -1);
        for (std::size_t t = 0; t < tile_patch_map.size(); ++t)
            for (std::size_t p : tile_patch_map[t]) labels[p] = tile_class_ids[t];
        return labels;
    }
};

// Tiles placed row-major into the grid; the patch map follows from geometry.
inline MosaicSample make_mosaic(const std::vector<TileSample>& tiles, std::size_t grid_side,
                                std::size_t patch_size) {
    if (grid_side == 0 || tiles.size() != grid_side * grid_side) {
        throw ConfigError("make_mosaic: need exactly g^2 tiles, got " + std::to_string(tiles.size()) +
                          " for g=" + std::to_string(grid_side));
    }
    const Tensor& first = tiles[0].image;
    if (first.rank() != 3) throw DimensionError("make_mosaic: tile images must be rank 3");
    std::size_t side = first.dim(1);
    for (const TileSample& t : tiles) {
        if (t.image.shape() != first.shape()) {
            throw DimensionError("make_mosaic: mixed tile sizes: " + shape_str(first.shape()) + " vs " +
                                 shape_str(t.image.shape()));
        }
    }
    if (side != first.dim(2) || patch_size == 0 || side % patch_size != 0) {
        throw ConfigError("make_mosaic: tile side " + std::to_string(side) +
                          " must be square and divisible by patch_size " + std::to_string(patch_size));
    }

    std::size_t channels = first.dim(0);
    std::size_t mosaic_side = grid_side * side;
    std::vector<double> img(channels * mosaic_side * mosaic_side);
    for (std::size_t t = 0; t < tiles.size(); ++t) {
        std::size_t gr = t / grid_side, gc = t % grid_side;
        const auto& src = tiles[t].image.data();
        for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t y = 0; y < side; ++y)
                for (std::size_t x = 0; x < side; ++x)
                    img[c * mosaic_side * mosaic_side + (gr * side + y) * mosaic_side + (gc * side + x)] =
                        src[c * side * side + y * side + x];
    }

    std::size_t patches_per_tile_side = side / patch_size;
    std::size_t mosaic_patch_side = mosaic_side / patch_size;
    MosaicSample mosaic;
    mosaic.image = Tensor::from({channels, mosaic_side, mosaic_side}, std::move(img), false);
    mosaic.tiles = tiles;
    mosaic.tile_patch_map.resize(tiles.size());
    for (std::size_t t = 0; t < tiles.size(); ++t) {
        std::size_t gr = t / grid_side, gc = t % grid_side;
        for (std::size_t pr = 0; pr < patches_per_tile_side; ++pr)
            for (std::size_t pc = 0; pc < patches_per_tile_side; ++pc)
                mosaic.tile_patch_map[t].push_back((gr * patches_per_tile_side + pr) * mosaic_patch_side +
                                                   gc * patches_per_tile_side + pc);
        mosaic.tile_class_ids.push_back(tiles[t].class_id);
    }
    return mosaic;
}

// Crops tile t's region back out of the mosaic; the result must equal the
// input tile bit-exactly.
inline Tensor crop_tile(const MosaicSample& mosaic, std::size_t t, std::size_t grid_side) {
    std::size_t mosaic_side = mosaic.image.dim(1);
    std::size_t side = mosaic_side / grid_side;
    std::size_t channels = mosaic.image.dim(0);
    std::size_t gr = t / grid_side, gc = t % grid_side;
    std::vector<double> out(channels * side * side);
    const auto& img = mosaic.image.data();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                out[c * side * side + y * side + x] =
                    img[c * mosaic_side * mosaic_side + (gr * side + y) * mosaic_side + (gc * side + x)];
    return Tensor::from({channels, side, side}, std::move(out), false);
}

// Uniform with replacement; per-mosaic seeds derive from (seed, index) so the
// batch is reproducible regardless of construction order.
inline std::vector<MosaicSample> sample_mosaic_batch(const std::vector<TileSample>& corpus,
                                                     std::size_t batch_size, std::size_t grid_side,
                                                     std::uint64_t seed, std::size_t patch_size) {
    if (corpus.empty()) throw ConfigError("sample_mosaic_batch: empty corpus");
    std::vector<MosaicSample> batch;
    batch.reserve(batch_size);
    std::size_t k = grid_side * grid_side;
    for (std::size_t i = 0; i < batch_size; ++i) {
        Rng rng(derive_seed(seed, 0xba7c4, i));
        std::vector<TileSample> tiles;
        std::vector<std::size_t> indices;
        tiles.reserve(k);
        for (std::size_t t = 0; t < k; ++t) {
            std::size_t idx = rng.uniform_index(corpus.size());
            indices.push_back(idx);
            tiles.push_back(corpus[idx]);
        }
        MosaicSample m = make_mosaic(tiles, grid_side, patch_size);
        m.tile_corpus_indices = std::move(indices);
        batch.push_back(std::move(m));
    }
    return batch;
}

} // namespace atas
