#pragma once

// End-to-end orchestration: teacher pretraining on single tiles, student
// distillation on mosaic batches, periodic evaluation, checkpointing, and the
// ablation matrix. Every random draw derives from (config seed, purpose,
// step), so runs are bit-reproducible and resume exactly.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "atas/augment.hpp"
#include "atas/checkpoint.hpp"
#include "atas/data.hpp"
#include "atas/distill.hpp"
#include "atas/error.hpp"
#include "atas/metrics.hpp"
#include "atas/model.hpp"
#include "atas/rng.hpp"
#include "atas/tensor.hpp"

namespace atas {

namespace salt {
constexpr std::uint64_t concepts = 0xc0;
constexpr std::uint64_t pretrain_init = 0x1a;
constexpr std::uint64_t pretrain_batch = 0x1b;
constexpr std::uint64_t mosaic_batch = 0x2a;
constexpr std::uint64_t eval_corpus = 0x3a;
constexpr std::uint64_t eval_mosaics = 0x3b;
constexpr std::uint64_t eval_pairs = 0x3c;
} // namespace salt

struct RunConfig {
    // Desk-scale experiment defaults, calibrated once: a 64-tile-per-class
    // corpus trains in minutes, and lambda_lld = 2 holds patch coherence
    // within the eval budget while the alignment transfer saturates.
    static CorpusConfig default_corpus() {
        CorpusConfig c;
        c.samples_per_class = 64;
        return c;
    }
    static DistillConfig default_distill() {
        DistillConfig d;
        d.lambda_lld = 2.0;
        return d;
    }

    ModelConfig model;
    CorpusConfig corpus = default_corpus();
    DistillConfig distill = default_distill();
    std::size_t grid_side = 2;
    std::size_t batch_size = 8;
    std::size_t steps = 320;
    double learning_rate = 1e-3;
    double weight_decay = 0.05;
    std::size_t eval_every = 80;
    std::uint64_t seed = 1;
    std::string output_dir = "out";

    // teacher pretraining (desk-scale stand-in for large-scale pretraining)
    std::size_t pretrain_steps = 500;
    std::size_t pretrain_batch = 32;
    double pretrain_tau = 0.2;
    double pretrain_target_accuracy = 0.95;
    std::size_t pretrain_eval_every = 25;
    std::size_t pretrain_eval_per_class = 4;

    // evaluation protocol: held-out tiles composed into fixed eval mosaics
    std::size_t eval_tiles_per_class = 8;
    std::size_t eval_mosaics = 24;
    std::size_t eval_pairs = 20000;

    void validate() const {
        model.validate();
        corpus.validate();
        distill.validate();
        if (corpus.tile_side != model.image_side || corpus.patch_size != model.patch_size) {
            throw ConfigError("corpus tile geometry (" + std::to_string(corpus.tile_side) + "/" +
                              std::to_string(corpus.patch_size) + ") must match the model (" +
                              std::to_string(model.image_side) + "/" + std::to_string(model.patch_size) + ")");
        }
        if (grid_side == 0) throw ConfigError("grid_side must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (eval_every == 0) throw ConfigError("eval_every must be >= 1");
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (pretrain_tau <= 0.0) throw ConfigError("pretrain_tau must be > 0");
        if (pretrain_batch == 0 || pretrain_eval_every == 0) throw ConfigError("pretrain batch/eval cadence must be >= 1");
        if (eval_tiles_per_class == 0 || eval_mosaics == 0 || eval_pairs == 0) {
            throw ConfigError("evaluation protocol sizes must be >= 1");
        }
        if (corpus.num_classes > model.embed_dim) {
            throw ConfigError("embed_dim should be >= num_classes for the concept bank");
        }
    }
};

inline ConceptBank concept_bank_for(const RunConfig& cfg) {
    return gen_concepts(cfg.corpus.num_classes, cfg.model.embed_dim, derive_seed(cfg.corpus.seed, salt::concepts));
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

// AdamW with decoupled weight decay. A step whose entire gradient is exactly
// zero is skipped outright (no moment update, no decay), so a null objective
// leaves the parameters untouched.
class AdamW {
public:
    AdamW() = default;
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    std::size_t steps_taken() const { return t_; }

    void step(ModelParams& params) {
        std::map<std::string, std::vector<double>> grads;
        bool any_nonzero = false;
        for (const auto& [name, p] : params.tensors) {
            std::vector<double> g = p.grad();
            for (double v : g) any_nonzero |= (v != 0.0);
            grads.emplace(name, std::move(g));
        }
        if (!any_nonzero) return;

        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, p] : params.tensors) {
            const std::vector<double>& g = grads[name];
            std::vector<double>& m = m_[name];
            std::vector<double>& v = v_[name];
            if (m.size() != g.size()) m.assign(g.size(), 0.0);
            if (v.size() != g.size()) v.assign(g.size(), 0.0);
            std::vector<double> next = p.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                next[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * next[i]);
            }
            p = Tensor::from(p.shape(), std::move(next), true);
        }
    }

    std::map<std::string, Tensor> state_tensors() const {
        std::map<std::string, Tensor> out;
        out["opt.t"] = Tensor::scalar(static_cast<double>(t_));
        out["opt.lr"] = Tensor::scalar(lr_);
        out["opt.wd"] = Tensor::scalar(wd_);
        for (const auto& [name, m] : m_) out["opt.m." + name] = Tensor::from({m.size()}, m);
        for (const auto& [name, v] : v_) out["opt.v." + name] = Tensor::from({v.size()}, v);
        return out;
    }

    void load_state(const std::map<std::string, Tensor>& riders) {
        m_.clear();
        v_.clear();
        t_ = 0;
        for (const auto& [name, t] : riders) {
            if (name == "opt.t") t_ = static_cast<std::size_t>(t.item());
            else if (name == "opt.lr") lr_ = t.item();
            else if (name == "opt.wd") wd_ = t.item();
            else if (name.rfind("opt.m.", 0) == 0) m_[name.substr(6)] = t.data();
            else if (name.rfind("opt.v.", 0) == 0) v_[name.substr(6)] = t.data();
        }
    }

private:
    double lr_ = 1e-3;
    double wd_ = 0.0;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    std::size_t t_ = 0;
    std::map<std::string, std::vector<double>> m_;
    std::map<std::string, std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// evaluation protocol
// ---------------------------------------------------------------------------

inline CorpusConfig eval_corpus_config(const RunConfig& cfg) {
    CorpusConfig ec = cfg.corpus;
    ec.samples_per_class = cfg.eval_tiles_per_class;
    ec.seed = derive_seed(cfg.corpus.seed, salt::eval_corpus);
    return ec;
}

// Fixed set of mosaics built from held-out tiles; identical for every model
// evaluated under the same config, so reports are directly comparable.
inline std::vector<MosaicSample> eval_mosaic_set(const RunConfig& cfg) {
    std::vector<TileSample> tiles = gen_corpus(eval_corpus_config(cfg));
    return sample_mosaic_batch(tiles, cfg.eval_mosaics, cfg.grid_side, derive_seed(cfg.seed, salt::eval_mosaics),
                               cfg.model.patch_size);
}

inline EvalReport evaluate_on(const ModelParams& params, const ConceptBank& bank,
                              const std::vector<MosaicSample>& mosaics, const RunConfig& cfg) {
    PairScores pooled;
    std::size_t quota = (cfg.eval_pairs + mosaics.size() - 1) / mosaics.size();
    std::vector<std::size_t> correct(bank.num_classes, 0), total(bank.num_classes, 0);
    std::uint64_t pair_seed = derive_seed(cfg.seed, salt::eval_pairs);
    for (std::size_t i = 0; i < mosaics.size(); ++i) {
        EncoderOutput out = encode(mosaics[i].image, params);
        std::vector<int> labels = mosaics[i].patch_labels();
        pooled.append(sample_pair_scores(out.patches, labels, quota, derive_seed(pair_seed, i)));
        std::vector<int> pred = classify_patches(out.patches, bank);
        for (std::size_t p = 0; p < pred.size(); ++p) {
            total[labels[p]]++;
            correct[labels[p]] += (pred[p] == labels[p]);
        }
    }
    EvalReport report;
    report.coherence_auroc = auroc_from_scores(pooled.scores, pooled.positive);
    std::size_t c_all = 0, t_all = 0;
    report.per_class_accuracy.resize(bank.num_classes);
    for (std::size_t c = 0; c < bank.num_classes; ++c) {
        c_all += correct[c];
        t_all += total[c];
        report.per_class_accuracy[c] = total[c] ? static_cast<double>(correct[c]) / static_cast<double>(total[c]) : 0.0;
    }
    report.alignment_accuracy = static_cast<double>(c_all) / static_cast<double>(t_all);
    report.num_pairs_evaluated = pooled.scores.size();
    report.seed = derive_seed(cfg.seed, salt::eval_mosaics);
    return report;
}

inline EvalReport evaluate(const ModelParams& params, const ConceptBank& bank, const RunConfig& cfg) {
    return evaluate_on(params, bank, eval_mosaic_set(cfg), cfg);
}

// Image-level nearest-concept accuracy over single tiles.
inline double cls_accuracy(const ModelParams& params, const std::vector<TileSample>& tiles,
                           const ConceptBank& bank) {
    if (tiles.empty()) throw ContractError("cls_accuracy: no tiles");
    std::size_t correct = 0;
    for (const TileSample& t : tiles) {
        EncoderOutput out = encode(t.image, params);
        std::vector<int> pred = classify_patches(reshape(out.cls, {1, out.cls.size()}), bank);
        correct += (pred[0] == t.class_id);
    }
    return static_cast<double>(correct) / static_cast<double>(tiles.size());
}

// ---------------------------------------------------------------------------
// teacher pretraining
// ---------------------------------------------------------------------------

struct PretrainResult {
    ModelParams params; // frozen
    std::vector<double> loss_history;
    std::size_t steps_run = 0;
    double final_accuracy = 0.0;
};

namespace detail {

// cross-entropy of cls embeddings against the concept bank, cosine logits
inline Tensor concept_nll(const Tensor& cls_rows, const std::vector<int>& labels, const ConceptBank& bank,
                          double tau) {
    Tensor logits = scale(cosine_sim_matrix(cls_rows, bank.vectors), 1.0 / tau);
    std::vector<Tensor> terms;
    terms.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        Tensor r = row(logits, i);
        terms.push_back(sub(log_sum_exp(r), index(r, static_cast<std::size_t>(labels[i]))));
    }
    return mean(stack_scalars(terms));
}

} // namespace detail

// Trains a fresh model to align tile class tokens with their class concepts;
// patch tokens get no direct supervision. The corpus tail of each class is
// held out for the stopping criterion.
inline PretrainResult pretrain_teacher_full(const std::vector<TileSample>& corpus, const ConceptBank& bank,
                                            const RunConfig& cfg) {
    cfg.validate();
    if (corpus.empty()) throw ContractError("pretrain_teacher: empty corpus");

    std::size_t spc = cfg.corpus.samples_per_class;
    std::size_t holdout_per_class = std::max<std::size_t>(1, spc / 8);
    if (holdout_per_class >= spc) holdout_per_class = spc > 1 ? spc - 1 : 0;
    std::vector<std::size_t> train_idx;
    std::vector<TileSample> eval_tiles;
    for (std::size_t c = 0; c < cfg.corpus.num_classes; ++c) {
        for (std::size_t i = 0; i < spc; ++i) {
            std::size_t idx = c * spc + i;
            if (i >= spc - holdout_per_class) {
                if (eval_tiles.size() < (c + 1) * cfg.pretrain_eval_per_class) eval_tiles.push_back(corpus[idx]);
            } else {
                train_idx.push_back(idx);
            }
        }
    }
    if (eval_tiles.empty()) eval_tiles.push_back(corpus[0]);
    if (train_idx.empty()) {
        for (std::size_t i = 0; i < corpus.size(); ++i) train_idx.push_back(i);
    }

    ModelParams model = init_params(cfg.model, derive_seed(cfg.seed, salt::pretrain_init));
    for (auto& [name, t] : model.tensors) t = t.clone(true);
    AdamW opt(cfg.learning_rate, cfg.weight_decay);

    PretrainResult result;
    double best_acc = 0.0;
    for (std::size_t s = 0; s < cfg.pretrain_steps; ++s) {
        Rng rng(derive_seed(cfg.seed, salt::pretrain_batch, s));
        std::vector<Tensor> cls_rows;
        std::vector<int> labels;
        for (std::size_t b = 0; b < cfg.pretrain_batch; ++b) {
            const TileSample& tile = corpus[train_idx[rng.uniform_index(train_idx.size())]];
            cls_rows.push_back(encode(tile.image, model).cls);
            labels.push_back(tile.class_id);
        }
        Tensor loss = detail::concept_nll(concat_rows(cls_rows), labels, bank, cfg.pretrain_tau);
        double loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
            throw DivergenceError("pretrain loss became non-finite at step " + std::to_string(s));
        }
        result.loss_history.push_back(loss_value);
        backward(loss);
        opt.step(model);
        result.steps_run = s + 1;

        if ((s + 1) % cfg.pretrain_eval_every == 0 || s + 1 == cfg.pretrain_steps) {
            double acc = cls_accuracy(freeze(model), eval_tiles, bank);
            best_acc = std::max(best_acc, acc);
            result.final_accuracy = acc;
            if (acc >= cfg.pretrain_target_accuracy) break;
        }
    }
    if (cfg.pretrain_steps > 0 && best_acc < 0.5) {
        std::ostringstream os;
        os << "pretraining failed to reach 0.5 held-out accuracy within " << cfg.pretrain_steps
           << " steps (best " << best_acc << "); loss trace:";
        for (std::size_t i = 0; i < result.loss_history.size(); i += std::max<std::size_t>(1, result.loss_history.size() / 8)) {
            os << " " << result.loss_history[i];
        }
        throw DivergenceError(os.str());
    }
    result.params = freeze(model);
    return result;
}

inline ModelParams pretrain_teacher(const std::vector<TileSample>& corpus, const ConceptBank& bank,
                                    const RunConfig& cfg) {
    return pretrain_teacher_full(corpus, bank, cfg).params;
}

// ---------------------------------------------------------------------------
// distillation
// ---------------------------------------------------------------------------

struct StepLoss {
    std::size_t step = 0;
    double gld = 0.0, lld = 0.0, ggd = 0.0, total = 0.0;
};

struct TrainState {
    ModelParams student;
    AdamW optimizer;
    std::size_t step = 0;
    std::vector<StepLoss> history;
};

using EvalHook = std::function<void(const TrainState&, const EvalReport&)>;

// Caches teacher class tokens per corpus tile; the teacher is frozen, so the
// cache is exact.
class TeacherTileCache {
public:
    TeacherTileCache(const ModelParams& teacher, const std::vector<TileSample>& corpus)
        : teacher_(teacher), corpus_(corpus) {}

    const Tensor& cls(std::size_t corpus_index) {
        auto it = cache_.find(corpus_index);
        if (it != cache_.end()) return it->second;
        Tensor c = encode(corpus_.at(corpus_index).image, teacher_).cls;
        return cache_.emplace(corpus_index, std::move(c)).first->second;
    }

private:
    const ModelParams& teacher_;
    const std::vector<TileSample>& corpus_;
    std::unordered_map<std::size_t, Tensor> cache_;
};

inline BatchViews build_batch_views(const std::vector<MosaicSample>& batch, const ModelParams& student,
                                    const ModelParams& teacher, TeacherTileCache& tile_cache) {
    BatchViews views;
    for (const MosaicSample& m : batch) {
        MosaicView v;
        EncoderOutput s = encode(m.image, student);
        EncoderOutput t = encode(m.image, teacher);
        v.student_patches = s.patches;
        v.student_cls = s.cls;
        v.teacher_patches = t.patches;
        v.teacher_cls = t.cls;
        for (std::size_t k = 0; k < m.tiles.size(); ++k) {
            if (k < m.tile_corpus_indices.size()) {
                v.teacher_tile_cls.push_back(tile_cache.cls(m.tile_corpus_indices[k]));
            } else {
                v.teacher_tile_cls.push_back(encode(m.tiles[k].image, teacher).cls);
            }
        }
        v.tile_patch_map = m.tile_patch_map;
        v.tile_class_ids = m.tile_class_ids;
        views.mosaics.push_back(std::move(v));
    }
    return views;
}

// Runs (or resumes) the distillation loop. Step seeds derive from the config
// alone, so a resumed run replays the exact batch sequence of an unbroken one.
inline TrainState distill_student(const ModelParams& teacher, const std::vector<TileSample>& corpus,
                                  const ConceptBank& bank, const RunConfig& cfg,
                                  const EvalHook& on_eval = nullptr,
                                  std::optional<TrainState> resume = std::nullopt) {
    cfg.validate();
    if (teacher.trainable()) throw ContractError("distill_student: teacher must be frozen");
    if (corpus.empty()) throw ContractError("distill_student: empty corpus");

    TrainState state;
    if (resume) {
        state = std::move(*resume);
    } else {
        state.student = trainable_copy(teacher);
        state.optimizer = AdamW(cfg.learning_rate, cfg.weight_decay);
    }

    TeacherTileCache tile_cache(teacher, corpus);
    std::vector<MosaicSample> eval_set;
    if (on_eval) eval_set = eval_mosaic_set(cfg);

    for (std::size_t s = state.step; s < cfg.steps; ++s) {
        std::uint64_t batch_seed = derive_seed(cfg.seed, salt::mosaic_batch, s);
        std::vector<MosaicSample> batch =
            sample_mosaic_batch(corpus, cfg.batch_size, cfg.grid_side, batch_seed, cfg.model.patch_size);
        BatchViews views = build_batch_views(batch, state.student, teacher, tile_cache);
        LossBreakdown lb = total_loss(views, cfg.distill);
        double total_value = lb.total.item();
        if (!std::isfinite(total_value)) {
            throw DivergenceError("NaN loss at step " + std::to_string(s) + " (batch seed " +
                                  std::to_string(batch_seed) + ")");
        }
        backward(lb.total);
        state.optimizer.step(state.student);
        state.step = s + 1;
        state.history.push_back({s, lb.gld.item(), lb.lld.item(), lb.ggd.item(), total_value});

        if (on_eval && ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps)) {
            on_eval(state, evaluate_on(freeze(state.student), bank, eval_set, cfg));
        }
    }
    return state;
}

// ---------------------------------------------------------------------------
// train-state checkpointing
// ---------------------------------------------------------------------------

inline void save_train_state(const std::string& path, const TrainState& state) {
    std::map<std::string, Tensor> riders = state.optimizer.state_tensors();
    riders["train.step"] = Tensor::scalar(static_cast<double>(state.step));
    if (!state.history.empty()) {
        std::vector<double> flat;
        flat.reserve(state.history.size() * 5);
        for (const StepLoss& h : state.history) {
            flat.push_back(static_cast<double>(h.step));
            flat.push_back(h.gld);
            flat.push_back(h.lld);
            flat.push_back(h.ggd);
            flat.push_back(h.total);
        }
        riders["train.loss_history"] = Tensor::from({state.history.size(), 5}, std::move(flat));
    }
    save_checkpoint(path, state.student, riders);
}

inline TrainState load_train_state(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    TrainState state;
    state.student = params_from_checkpoint(ck, /*trainable=*/true);
    state.optimizer.load_state(ck.tensors);
    auto it = ck.tensors.find("train.step");
    if (it != ck.tensors.end()) state.step = static_cast<std::size_t>(it->second.item());
    auto hist = ck.tensors.find("train.loss_history");
    if (hist != ck.tensors.end()) {
        const Tensor& h = hist->second;
        for (std::size_t r = 0; r < h.rows(); ++r) {
            state.history.push_back({static_cast<std::size_t>(h.at(r, 0)), h.at(r, 1), h.at(r, 2), h.at(r, 3),
                                     h.at(r, 4)});
        }
    }
    return state;
}

// ---------------------------------------------------------------------------
// ablations
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> names = {"full",          "gld_only",        "gld_lld",
                                                   "cosine_unweighted", "cosine_weighted", "contrastive_unweighted",
                                                   "whole_mosaic_anchor"};
    return names;
}

inline RunConfig apply_variant(const RunConfig& base, const std::string& variant) {
    RunConfig cfg = base;
    if (variant == "full") {
        // base objective as configured
    } else if (variant == "gld_only") {
        cfg.distill.lambda_lld = 0.0;
        cfg.distill.lambda_ggd = 0.0;
    } else if (variant == "gld_lld") {
        cfg.distill.lambda_ggd = 0.0;
    } else if (variant == "cosine_unweighted") {
        cfg.distill.gld_objective = GldObjective::cosine;
        cfg.distill.gld_pooling = GldPooling::mean;
    } else if (variant == "cosine_weighted") {
        cfg.distill.gld_objective = GldObjective::cosine;
        cfg.distill.gld_pooling = GldPooling::weighted;
    } else if (variant == "contrastive_unweighted") {
        cfg.distill.gld_objective = GldObjective::contrastive;
        cfg.distill.gld_pooling = GldPooling::mean;
    } else if (variant == "whole_mosaic_anchor") {
        cfg.distill.gld_anchor = GldAnchor::whole_mosaic;
    } else {
        throw ConfigError("unknown ablation variant: " + variant);
    }
    return cfg;
}

struct AblationOutcome {
    EvalReport teacher_report;
    EvalReport student_report;
    TrainState state;
};

// Trains the variant and reports both metrics for the teacher baseline and
// the trained student. Pass a teacher to skip re-pretraining.
inline AblationOutcome run_ablation(const RunConfig& base, const std::string& variant,
                                    const ModelParams* teacher = nullptr, const EvalHook& on_eval = nullptr) {
    RunConfig cfg = apply_variant(base, variant);
    cfg.validate();
    std::vector<TileSample> corpus = gen_corpus(cfg.corpus);
    ConceptBank bank = concept_bank_for(cfg);
    ModelParams frozen_teacher = teacher ? freeze(*teacher) : pretrain_teacher(corpus, bank, cfg);

    AblationOutcome out;
    std::vector<MosaicSample> eval_set = eval_mosaic_set(cfg);
    out.teacher_report = evaluate_on(frozen_teacher, bank, eval_set, cfg);
    out.state = distill_student(frozen_teacher, corpus, bank, cfg, on_eval);
    out.student_report = evaluate_on(freeze(out.state.student), bank, eval_set, cfg);
    return out;
}

// ---------------------------------------------------------------------------
// flat key=value run configuration
// ---------------------------------------------------------------------------

inline std::string run_config_to_text(const RunConfig& c) {
    std::ostringstream os;
    os.precision(17);
    os << "model.image_side=" << c.model.image_side << "\n"
       << "model.patch_size=" << c.model.patch_size << "\n"
       << "model.embed_dim=" << c.model.embed_dim << "\n"
       << "model.num_layers=" << c.model.num_layers << "\n"
       << "model.num_heads=" << c.model.num_heads << "\n"
       << "model.mlp_ratio=" << c.model.mlp_ratio << "\n"
       << "corpus.num_classes=" << c.corpus.num_classes << "\n"
       << "corpus.samples_per_class=" << c.corpus.samples_per_class << "\n"
       << "corpus.noise_std=" << c.corpus.noise_std << "\n"
       << "corpus.seed=" << c.corpus.seed << "\n"
       << "distill.lambda_gld=" << c.distill.lambda_gld << "\n"
       << "distill.lambda_lld=" << c.distill.lambda_lld << "\n"
       << "distill.lambda_ggd=" << c.distill.lambda_ggd << "\n"
       << "distill.tau=" << c.distill.tau << "\n"
       << "distill.symmetric_contrastive=" << (c.distill.symmetric_contrastive ? 1 : 0) << "\n"
       << "distill.gld_objective=" << (c.distill.gld_objective == GldObjective::cosine ? "cosine" : "contrastive") << "\n"
       << "distill.gld_pooling=" << (c.distill.gld_pooling == GldPooling::mean ? "mean" : "weighted") << "\n"
       << "distill.gld_anchor=" << (c.distill.gld_anchor == GldAnchor::whole_mosaic ? "whole_mosaic" : "per_tile") << "\n"
       << "grid_side=" << c.grid_side << "\n"
       << "batch_size=" << c.batch_size << "\n"
       << "steps=" << c.steps << "\n"
       << "learning_rate=" << c.learning_rate << "\n"
       << "weight_decay=" << c.weight_decay << "\n"
       << "eval_every=" << c.eval_every << "\n"
       << "seed=" << c.seed << "\n"
       << "output_dir=" << c.output_dir << "\n"
       << "pretrain_steps=" << c.pretrain_steps << "\n"
       << "pretrain_batch=" << c.pretrain_batch << "\n"
       << "pretrain_tau=" << c.pretrain_tau << "\n"
       << "pretrain_target_accuracy=" << c.pretrain_target_accuracy << "\n"
       << "pretrain_eval_every=" << c.pretrain_eval_every << "\n"
       << "pretrain_eval_per_class=" << c.pretrain_eval_per_class << "\n"
       << "eval_tiles_per_class=" << c.eval_tiles_per_class << "\n"
       << "eval_mosaics=" << c.eval_mosaics << "\n"
       << "eval_pairs=" << c.eval_pairs << "\n";
    return os.str();
}

inline RunConfig run_config_from_text(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos) continue;
        if (line[start] == '#') continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
        }
        auto trim = [](std::string s) {
            std::size_t a = s.find_first_not_of(" \t\r");
            std::size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        try {
            if (key == "model.image_side") c.model.image_side = std::stoull(val);
            else if (key == "model.patch_size") c.model.patch_size = std::stoull(val);
            else if (key == "model.embed_dim") c.model.embed_dim = std::stoull(val);
            else if (key == "model.num_layers") c.model.num_layers = std::stoull(val);
            else if (key == "model.num_heads") c.model.num_heads = std::stoull(val);
            else if (key == "model.mlp_ratio") c.model.mlp_ratio = std::stod(val);
            else if (key == "corpus.num_classes") c.corpus.num_classes = std::stoull(val);
            else if (key == "corpus.samples_per_class") c.corpus.samples_per_class = std::stoull(val);
            else if (key == "corpus.noise_std") c.corpus.noise_std = std::stod(val);
            else if (key == "corpus.seed") c.corpus.seed = std::stoull(val);
            else if (key == "distill.lambda_gld") c.distill.lambda_gld = std::stod(val);
            else if (key == "distill.lambda_lld") c.distill.lambda_lld = std::stod(val);
            else if (key == "distill.lambda_ggd") c.distill.lambda_ggd = std::stod(val);
            else if (key == "distill.tau") c.distill.tau = std::stod(val);
            else if (key == "distill.symmetric_contrastive") c.distill.symmetric_contrastive = (val == "1" || val == "true");
            else if (key == "distill.gld_objective") {
                if (val == "cosine") c.distill.gld_objective = GldObjective::cosine;
                else if (val == "contrastive") c.distill.gld_objective = GldObjective::contrastive;
                else throw ConfigError("unknown gld_objective: " + val);
            } else if (key == "distill.gld_pooling") {
                if (val == "mean") c.distill.gld_pooling = GldPooling::mean;
                else if (val == "weighted") c.distill.gld_pooling = GldPooling::weighted;
                else throw ConfigError("unknown gld_pooling: " + val);
            } else if (key == "distill.gld_anchor") {
                if (val == "whole_mosaic") c.distill.gld_anchor = GldAnchor::whole_mosaic;
                else if (val == "per_tile") c.distill.gld_anchor = GldAnchor::per_tile;
                else throw ConfigError("unknown gld_anchor: " + val);
            } else if (key == "grid_side") c.grid_side = std::stoull(val);
            else if (key == "batch_size") c.batch_size = std::stoull(val);
            else if (key == "steps") c.steps = std::stoull(val);
            else if (key == "learning_rate") c.learning_rate = std::stod(val);
            else if (key == "weight_decay") c.weight_decay = std::stod(val);
            else if (key == "eval_every") c.eval_every = std::stoull(val);
            else if (key == "seed") c.seed = std::stoull(val);
            else if (key == "output_dir") c.output_dir = val;
            else if (key == "pretrain_steps") c.pretrain_steps = std::stoull(val);
            else if (key == "pretrain_batch") c.pretrain_batch = std::stoull(val);
            else if (key == "pretrain_tau") c.pretrain_tau = std::stod(val);
            else if (key == "pretrain_target_accuracy") c.pretrain_target_accuracy = std::stod(val);
            else if (key == "pretrain_eval_every") c.pretrain_eval_every = std::stoull(val);
            else if (key == "pretrain_eval_per_class") c.pretrain_eval_per_class = std::stoull(val);
            else if (key == "eval_tiles_per_class") c.eval_tiles_per_class = std::stoull(val);
            else if (key == "eval_mosaics") c.eval_mosaics = std::stoull(val);
            else if (key == "eval_pairs") c.eval_pairs = std::stoull(val);
            else throw ConfigError("unknown config key: " + key);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad value for " + key + ": " + val);
        }
    }
    // tile geometry always mirrors the model
    c.corpus.tile_side = c.model.image_side;
    c.corpus.patch_size = c.model.patch_size;
    return c;
}

inline RunConfig parse_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return run_config_from_text(ss.str());
}

} // namespace atas
