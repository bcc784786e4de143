#pragma once

// Diagnostics: coherence AUROC over same/different-class patch pairs,
// patch-level nearest-concept accuracy, and per-patch similarity heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "atas/data.hpp"
#include "atas/error.hpp"
#include "atas/rng.hpp"
#include "atas/tensor.hpp"

namespace atas {

struct EvalReport {
    double coherence_auroc = 0.0;
    double alignment_accuracy = 0.0;
    std::vector<double> per_class_accuracy;
    std::size_t num_pairs_evaluated = 0;
    std::uint64_t seed = 0;
};

// Rank statistic with tied scores counted one half.
inline double auroc_from_scores(const std::vector<double>& scores, const std::vector<int>& positive) {
    if (scores.size() != positive.size() || scores.empty()) {
        throw MetricUndefinedError("auroc: need matching nonempty scores and labels");
    }
    std::size_t np = 0;
    for (int p : positive) np += (p != 0);
    std::size_t nn = scores.size() - np;
    if (np == 0 || nn == 0) {
        throw MetricUndefinedError("auroc: need at least one positive and one negative pair");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // average 1-based ranks within tie groups
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < scores.size(); ++k)
        if (positive[k]) rank_sum += rank[k];
    double u = rank_sum - 0.5 * static_cast<double>(np) * static_cast<double>(np + 1);
    return u / (static_cast<double>(np) * static_cast<double>(nn));
}

struct PairScores {
    std::vector<double> scores;
    std::vector<int> positive;

    void append(const PairScores& other) {
        scores.insert(scores.end(), other.scores.begin(), other.scores.end());
        positive.insert(positive.end(), other.positive.begin(), other.positive.end());
    }
};

namespace detail {

// k-th unordered pair (i < j) of n items, pairs ordered row by row
inline std::pair<std::size_t, std::size_t> decode_pair(std::size_t k, std::size_t n) {
    std::size_t i = 0;
    std::size_t rowlen = n - 1;
    while (k >= rowlen) {
        k -= rowlen;
        ++i;
        --rowlen;
    }
    return {i, i + 1 + k};
}

} // namespace detail

// Cosine scores over unordered patch pairs sampled uniformly without
// replacement (all pairs when fewer exist than requested); positive means
// same label. Floyd's algorithm keeps the distinct sample O(num_pairs).
inline PairScores sample_pair_scores(const Tensor& patches, const std::vector<int>& labels,
                                     std::size_t num_pairs, std::uint64_t seed) {
    if (patches.rank() != 2 || patches.rows() < 2) {
        throw MetricUndefinedError("pair sampling needs at least two patches, got shape " +
                                   shape_str(patches.shape()));
    }
    std::size_t n = patches.rows();
    if (labels.size() != n) {
        throw DimensionError("labels length " + std::to_string(labels.size()) + " does not match " +
                             std::to_string(n) + " patches");
    }
    std::size_t total = n * (n - 1) / 2;
    std::vector<std::size_t> picked;
    if (num_pairs >= total) {
        picked.resize(total);
        std::iota(picked.begin(), picked.end(), 0);
    } else {
        Rng rng(derive_seed(seed, 0xa02c));
        std::vector<bool> in(total, false);
        picked.reserve(num_pairs);
        for (std::size_t j = total - num_pairs; j < total; ++j) {
            std::size_t r = rng.uniform_index(j + 1);
            if (in[r]) r = j;
            in[r] = true;
            picked.push_back(r);
        }
    }
    PairScores out;
    out.scores.reserve(picked.size());
    out.positive.reserve(picked.size());
    for (std::size_t k : picked) {
        auto [i, j] = detail::decode_pair(k, n);
        out.scores.push_back(cosine_sim(row(patches, i), row(patches, j)).item());
        out.positive.push_back(labels[i] == labels[j] ? 1 : 0);
    }
    return out;
}

// AUROC of cosine scores over sampled same/different-label patch pairs.
inline double coherence_auroc(const Tensor& patches, const std::vector<int>& labels, std::size_t num_pairs,
                              std::uint64_t seed) {
    if (patches.rank() != 2 || patches.rows() < 2 || labels.size() != patches.rows()) {
        throw MetricUndefinedError("coherence_auroc: need >= 2 labeled patches");
    }
    std::vector<int> sorted_labels = labels;
    std::sort(sorted_labels.begin(), sorted_labels.end());
    bool any_same = std::adjacent_find(sorted_labels.begin(), sorted_labels.end()) != sorted_labels.end();
    bool any_diff = sorted_labels.front() != sorted_labels.back();
    if (!any_same || !any_diff) {
        throw MetricUndefinedError("coherence_auroc: labeling admits no " +
                                   std::string(any_same ? "different" : "same") + "-label pairs");
    }
    PairScores ps = sample_pair_scores(patches, labels, num_pairs, seed);
    return auroc_from_scores(ps.scores, ps.positive);
}

// Nearest concept by cosine, ties resolved toward the lowest class index.
inline std::vector<int> classify_patches(const Tensor& patches, const ConceptBank& bank) {
    if (patches.rank() != 2 || patches.cols() != bank.vectors.cols()) {
        throw DimensionError("classify_patches: patches " + shape_str(patches.shape()) +
                             " incompatible with concepts " + shape_str(bank.vectors.shape()));
    }
    std::vector<int> out(patches.rows());
    for (std::size_t i = 0; i < patches.rows(); ++i) {
        Tensor p = row(patches, i);
        int best = 0;
        double best_score = -2.0;
        for (std::size_t c = 0; c < bank.num_classes; ++c) {
            double s = cosine_sim(p, row(bank.vectors, c)).item();
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(c);
            }
        }
        out[i] = best;
    }
    return out;
}

inline double alignment_accuracy(const Tensor& patches, const std::vector<int>& labels,
                                 const ConceptBank& bank) {
    if (labels.size() != patches.rows()) {
        throw DimensionError("alignment_accuracy: labels length " + std::to_string(labels.size()) +
                             " does not match " + std::to_string(patches.rows()) + " patches");
    }
    for (int l : labels) {
        if (l < 0 || static_cast<std::size_t>(l) >= bank.num_classes) {
            throw ParameterError("alignment_accuracy: label " + std::to_string(l) + " outside concept bank");
        }
    }
    std::vector<int> pred = classify_patches(patches, bank);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += (pred[i] == labels[i]);
    return static_cast<double>(correct) / static_cast<double>(pred.size());
}

// Heatmap of cosine similarity against one anchor patch, laid out on the
// patch grid. The anchor cell is 1 by definition.
inline Tensor similarity_map(const Tensor& patches, std::size_t anchor_index) {
    if (patches.rank() != 2 || patches.rows() == 0) {
        throw DimensionError("similarity_map: expected patches, got shape " + shape_str(patches.shape()));
    }
    std::size_t n = patches.rows();
    std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) {
        throw DimensionError("similarity_map: patch count " + std::to_string(n) + " is not a perfect square");
    }
    if (anchor_index >= n) {
        throw DimensionError("similarity_map: anchor " + std::to_string(anchor_index) + " out of range");
    }
    Tensor anchor = row(patches, anchor_index);
    std::vector<double> map(n);
    for (std::size_t j = 0; j < n; ++j) {
        map[j] = (j == anchor_index) ? 1.0 : cosine_sim(anchor, row(patches, j)).item();
    }
    return Tensor::from({side, side}, std::move(map), false);
}

// [-1, 1] mapped linearly onto 8-bit grayscale, binary PGM.
inline void write_pgm(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw DimensionError("write_pgm: expected a matrix, got " + shape_str(map.shape()));
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path);
    f << "P5\n" << map.cols() << " " << map.rows() << "\n255\n";
    for (double v : map.data()) {
        double scaled = (std::min(std::max(v, -1.0), 1.0) + 1.0) * 0.5 * 255.0;
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(scaled))));
    }
    if (!f) throw IoError("short write to " + path);
}

inline void write_matrix_txt(const std::string& path, const Tensor& map) {
    if (map.rank() != 2) throw DimensionError("write_matrix_txt: expected a matrix");
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f.precision(6);
    for (std::size_t r = 0; r < map.rows(); ++r) {
        for (std::size_t c = 0; c < map.cols(); ++c) {
            if (c) f << " ";
            f << map.at(r, c);
        }
        f << "\n";
    }
}

inline std::string eval_csv_header(std::size_t num_classes) {
    std::string h = "run_id,step,coherence_auroc,alignment_accuracy";
    for (std::size_t c = 0; c < num_classes; ++c) h += ",acc_class_" + std::to_string(c);
    return h;
}

inline std::string eval_csv_row(const std::string& run_id, std::size_t step, const EvalReport& report) {
    std::ostringstream os;
    os.precision(10);
    os << run_id << "," << step << "," << report.coherence_auroc << "," << report.alignment_accuracy;
    for (double a : report.per_class_accuracy) os << "," << a;
    return os.str();
}

} // namespace atas
