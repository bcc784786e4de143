#pragma once

// Synthetic object-centric corpus and the fixed concept bank that stands in
// for a frozen text tower. Every patch of a tile carries the tile's class, so
// the coherence/alignment metrics have unambiguous ground truth.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "atas/error.hpp"
#include "atas/rng.hpp"
#include "atas/tensor.hpp"

namespace atas {

struct ConceptBank {
    std::size_t num_classes = 0;
    Tensor vectors; // [num_classes x d], unit rows

    Tensor concept_of(std::size_t class_id) const {
        if (class_id >= num_classes) {
            throw ParameterError("class_id " + std::to_string(class_id) + " out of range (num_classes=" +
                                 std::to_string(num_classes) + ")");
        }
        return row(vectors, class_id).detach();
    }
};

struct TileSample {
    Tensor image; // [3 x tile_side x tile_side]
    int class_id = 0;
    std::vector<int> patch_labels; // tile class broadcast over its patch grid
};

struct CorpusConfig {
    std::size_t num_classes = 16;
    std::size_t samples_per_class = 256;
    double noise_std = 0.05;
    std::uint64_t seed = 1;
    std::size_t tile_side = 32;  // must match the model's pretraining resolution
    std::size_t patch_size = 8;  // sizes patch_labels

    std::size_t patches_per_tile() const {
        std::size_t g = tile_side / patch_size;
        return g * g;
    }

    void validate() const {
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
        if (noise_std < 0.0) throw ConfigError("noise_std must be >= 0");
        if (tile_side == 0 || patch_size == 0 || tile_side % patch_size != 0) {
            throw ConfigError("tile_side " + std::to_string(tile_side) +
                              " must be a positive multiple of patch_size " + std::to_string(patch_size));
        }
    }
};

// Unit vectors with pairwise cosine <= 0.5, found by seeded rejection.
inline ConceptBank gen_concepts(std::size_t num_classes, std::size_t d, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("gen_concepts: num_classes must be >= 2");
    if (d < 2) throw ConfigError("gen_concepts: embedding dim must be >= 2");
    Rng rng(derive_seed(seed, 0xc0ce));
    std::vector<std::vector<double>> rows;
    const int max_attempts = 10000;
    int attempts = 0;
    while (rows.size() < num_classes) {
        if (++attempts > max_attempts) {
            throw GenerationError("gen_concepts: could not satisfy the 0.5 pairwise-cosine bound after " +
                                  std::to_string(max_attempts) + " attempts (num_classes=" +
                                  std::to_string(num_classes) + ", d=" + std::to_string(d) + ")");
        }
        std::vector<double> v(d);
        double norm2 = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm2 += x * x;
        }
        double norm = std::sqrt(norm2);
        if (norm == 0.0) continue;
        for (double& x : v) x /= norm;
        bool ok = true;
        for (const auto& r : rows) {
            double cosv = 0.0;
            for (std::size_t i = 0; i < d; ++i) cosv += r[i] * v[i];
            if (cosv > 0.5) {
                ok = false;
                break;
            }
        }
        if (ok) rows.push_back(std::move(v));
    }
    std::vector<double> flat;
    flat.reserve(num_classes * d);
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    ConceptBank bank;
    bank.num_classes = num_classes;
    bank.vectors = Tensor::from({num_classes, d}, std::move(flat), false);
    return bank;
}

namespace detail {

struct ClassTexture {
    double base[3];
    double phase[3];
    double amp;
    double fx, fy;
};

// Texture parameters depend on the class only, never on the tile seed, so a
// class has one base pattern and noise_std=0 tiles are identical.
inline ClassTexture class_texture(int class_id) {
    Rng rng(derive_seed(0x7e97u, static_cast<std::uint64_t>(class_id)));
    ClassTexture t;
    for (int c = 0; c < 3; ++c) t.base[c] = rng.uniform(0.2, 0.8);
    for (int c = 0; c < 3; ++c) t.phase[c] = rng.uniform(0.0, 6.283185307179586);
    t.amp = rng.uniform(0.12, 0.2);
    // distinct frequency pair per class id (mod 16)
    t.fx = 1.0 + static_cast<double>(class_id % 4);
    t.fy = 1.0 + static_cast<double>((class_id / 4) % 4);
    return t;
}

} // namespace detail

// Class-keyed base color and frequency pattern plus Gaussian pixel noise.
inline TileSample gen_tile(int class_id, const CorpusConfig& config, std::uint64_t seed) {
    config.validate();
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= config.num_classes) {
        throw ParameterError("gen_tile: class_id " + std::to_string(class_id) + " out of range");
    }
    detail::ClassTexture tex = detail::class_texture(class_id);
    std::size_t side = config.tile_side;
    Rng noise(derive_seed(seed, 0x9015e));
    std::vector<double> img(3 * side * side);
    const double two_pi = 6.283185307179586;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) {
                double wave = std::sin(two_pi * (tex.fx * static_cast<double>(x) + tex.fy * static_cast<double>(y)) /
                                           static_cast<double>(side) +
                                       tex.phase[c]);
                double v = tex.base[c] + tex.amp * wave;
                if (config.noise_std > 0.0) v += noise.normal(0.0, config.noise_std);
                img[c * side * side + y * side + x] = v;
            }
    TileSample tile;
    tile.image = Tensor::from({3, side, side}, std::move(img), false);
    tile.class_id = class_id;
    tile.patch_labels.assign(config.patches_per_tile(), class_id);
    return tile;
}

// Class-balanced, ordered by (class, index); per-sample seeds derive from
// (config.seed, class, index) so generation order never matters.
inline std::vector<TileSample> gen_corpus(const CorpusConfig& config) {
    config.validate();
    std::vector<TileSample> corpus;
    corpus.reserve(config.num_classes * config.samples_per_class);
    for (std::size_t c = 0; c < config.num_classes; ++c)
        for (std::size_t i = 0; i < config.samples_per_class; ++i)
            corpus.push_back(gen_tile(static_cast<int>(c), config,
                                      derive_seed(config.seed, c, i)));
    return corpus;
}

// Raw f64 dump plus a manifest of (filename, class_id) pairs.
inline void export_corpus(const std::vector<TileSample>& corpus, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("cannot write corpus manifest under " + dir);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "tile_%05zu.f64", i);
        std::ofstream f(dir + "/" + name, std::ios::binary);
        if (!f) throw IoError("cannot write corpus tile " + std::string(name));
        const auto& data = corpus[i].image.data();
        f.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(double)));
        manifest << name << " " << corpus[i].class_id << "\n";
    }
}

} // namespace atas
