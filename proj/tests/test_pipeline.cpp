#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "atas/pipeline.hpp"
#include "test_util.hpp"

using atas::ModelParams;
using atas::RunConfig;
using atas::Tensor;
using atas::TrainState;

namespace {

// everything shrunk so a full train fits in milliseconds
RunConfig micro_run_config(std::uint64_t seed = 5) {
    RunConfig cfg;
    cfg.model.image_side = 16;
    cfg.model.patch_size = 8;
    cfg.model.embed_dim = 8;
    cfg.model.num_layers = 1;
    cfg.model.num_heads = 2;
    cfg.model.mlp_ratio = 2.0;
    cfg.corpus.num_classes = 4;
    cfg.corpus.samples_per_class = 6;
    cfg.corpus.tile_side = 16;
    cfg.corpus.patch_size = 8;
    cfg.corpus.seed = 2;
    cfg.grid_side = 2;
    cfg.batch_size = 2;
    cfg.steps = 6;
    cfg.eval_every = 3;
    cfg.seed = seed;
    cfg.pretrain_steps = 10;
    cfg.pretrain_batch = 4;
    cfg.pretrain_eval_every = 5;
    cfg.pretrain_eval_per_class = 1;
    cfg.pretrain_target_accuracy = 2.0; // never early-stop in the micro runs
    cfg.eval_tiles_per_class = 2;
    cfg.eval_mosaics = 3;
    cfg.eval_pairs = 60;
    return cfg;
}

struct Fixture {
    RunConfig cfg = micro_run_config();
    std::vector<atas::TileSample> corpus;
    atas::ConceptBank bank;
    ModelParams teacher;

    Fixture() {
        cfg.validate();
        corpus = atas::gen_corpus(cfg.corpus);
        bank = atas::concept_bank_for(cfg);
        ModelParams init = atas::init_params(cfg.model, 99);
        teacher = atas::freeze(init);
    }
};

bool same_history(const std::vector<atas::StepLoss>& a, const std::vector<atas::StepLoss>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].step != b[i].step || a[i].gld != b[i].gld || a[i].lld != b[i].lld || a[i].ggd != b[i].ggd ||
            a[i].total != b[i].total) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_SUITE("pipeline") {

TEST_CASE("AdamW skips steps whose entire gradient is zero") {
    ModelParams p;
    p.config = micro_run_config().model;
    p.tensors["w"] = testutil::random_tensor({3}, 1, true);
    std::vector<double> before = p.tensors["w"].data();
    atas::AdamW opt(0.1, 0.5);
    opt.step(p); // no gradient at all
    CHECK(p.tensors["w"].data() == before);
    CHECK(opt.steps_taken() == 0);

    atas::backward(atas::sum(atas::mul(p.tensors["w"], Tensor::from({3}, {0, 0, 0}))));
    opt.step(p); // gradient exists but is exactly zero: decay must be skipped
    CHECK(p.tensors["w"].data() == before);
    CHECK(opt.steps_taken() == 0);

    atas::backward(atas::sum(p.tensors["w"]));
    opt.step(p);
    CHECK(p.tensors["w"].data() != before);
    CHECK(opt.steps_taken() == 1);
}

TEST_CASE("AdamW state round-trips through tensors") {
    ModelParams p;
    p.config = micro_run_config().model;
    p.tensors["w"] = testutil::random_tensor({4}, 2, true);
    atas::AdamW opt(0.05, 0.01);
    for (int i = 0; i < 3; ++i) {
        atas::backward(atas::sum(atas::mul(p.tensors["w"], p.tensors["w"])));
        opt.step(p);
    }
    atas::AdamW restored;
    restored.load_state(opt.state_tensors());
    CHECK(restored.steps_taken() == opt.steps_taken());

    // both copies must produce identical updates next step
    ModelParams q;
    q.config = p.config;
    q.tensors["w"] = p.tensors["w"].clone(true);
    atas::backward(atas::sum(p.tensors["w"]));
    atas::backward(atas::sum(q.tensors["w"]));
    opt.step(p);
    restored.step(q);
    CHECK(p.tensors["w"].data() == q.tensors["w"].data());
}

TEST_CASE("run config text round trip and errors") {
    RunConfig cfg = micro_run_config(77);
    cfg.distill.lambda_lld = 0.25;
    cfg.distill.gld_objective = atas::GldObjective::cosine;
    cfg.distill.gld_anchor = atas::GldAnchor::whole_mosaic;
    cfg.output_dir = "elsewhere";
    RunConfig back = atas::run_config_from_text(atas::run_config_to_text(cfg));
    CHECK(atas::run_config_to_text(back) == atas::run_config_to_text(cfg));

    CHECK_THROWS_AS(atas::run_config_from_text("bogus_key=1\n"), atas::ConfigError);
    CHECK_THROWS_AS(atas::run_config_from_text("steps\n"), atas::ConfigError);
    CHECK_THROWS_AS(atas::run_config_from_text("steps=banana\n"), atas::ConfigError);
    RunConfig commented = atas::run_config_from_text("# comment only\n\n  steps = 9 \n");
    CHECK(commented.steps == 9);
    CHECK_THROWS_AS(atas::parse_run_config("/nonexistent/path.cfg"), atas::IoError);
}

TEST_CASE("pretrain with zero budget returns the initialization, frozen") {
    Fixture fx;
    fx.cfg.pretrain_steps = 0;
    atas::PretrainResult pre = atas::pretrain_teacher_full(fx.corpus, fx.bank, fx.cfg);
    CHECK_FALSE(pre.params.trainable());
    ModelParams init = atas::init_params(fx.cfg.model, atas::derive_seed(fx.cfg.seed, atas::salt::pretrain_init));
    CHECK(atas::param_hash(pre.params) == atas::param_hash(init));
    CHECK(pre.loss_history.empty());
}

TEST_CASE("pretraining decreases the loss and returns frozen params") {
    Fixture fx;
    fx.cfg.pretrain_steps = 120;
    fx.cfg.pretrain_batch = 8;
    atas::PretrainResult pre = atas::pretrain_teacher_full(fx.corpus, fx.bank, fx.cfg);
    REQUIRE(!pre.loss_history.empty());
    CHECK(pre.loss_history.back() < pre.loss_history.front());
    CHECK(pre.final_accuracy >= 0.5);
    CHECK_FALSE(pre.params.trainable());
    for (double l : pre.loss_history) CHECK(std::isfinite(l));
}

TEST_CASE("a hopeless pretrain budget raises a divergence error with the loss trace") {
    Fixture fx;
    fx.cfg.pretrain_steps = 2;
    fx.cfg.pretrain_eval_every = 1;
    fx.cfg.pretrain_target_accuracy = 2.0;
    bool threw = false;
    try {
        atas::pretrain_teacher_full(fx.corpus, fx.bank, fx.cfg);
    } catch (const atas::DivergenceError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("loss trace") != std::string::npos);
    }
    CHECK(threw);
}

TEST_CASE("distill with zero steps returns the teacher bit-exactly") {
    Fixture fx;
    fx.cfg.steps = 0;
    TrainState state = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(atas::param_hash(state.student) == atas::param_hash(fx.teacher));
    CHECK(state.history.empty());
}

TEST_CASE("distill rejects a trainable teacher") {
    Fixture fx;
    ModelParams wild = atas::trainable_copy(fx.teacher);
    CHECK_THROWS_AS(atas::distill_student(wild, fx.corpus, fx.bank, fx.cfg), atas::ContractError);
}

TEST_CASE("identical configs produce bit-identical loss traces") {
    Fixture fx;
    TrainState a = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    TrainState b = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(same_history(a.history, b.history));
    CHECK(atas::param_hash(a.student) == atas::param_hash(b.student));

    RunConfig other = fx.cfg;
    other.seed = fx.cfg.seed + 1;
    TrainState c = atas::distill_student(fx.teacher, fx.corpus, fx.bank, other);
    CHECK_FALSE(same_history(a.history, c.history));
}

TEST_CASE("one nonzero step changes the student hash") {
    Fixture fx;
    fx.cfg.steps = 1;
    TrainState state = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(atas::param_hash(state.student) != atas::param_hash(fx.teacher));
}

TEST_CASE("all-zero lambdas leave the student equal to the teacher") {
    Fixture fx;
    fx.cfg.distill.lambda_gld = 0.0;
    fx.cfg.distill.lambda_lld = 0.0;
    fx.cfg.distill.lambda_ggd = 0.0;
    TrainState state = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(atas::param_hash(state.student) == atas::param_hash(fx.teacher));
    for (const atas::StepLoss& h : state.history) CHECK(h.total == 0.0);
}

TEST_CASE("teacher params and outputs stay frozen across a distillation run") {
    Fixture fx;
    std::uint64_t before = atas::param_hash(fx.teacher);
    Tensor probe_image = fx.corpus[0].image;
    std::vector<double> probe_before = atas::encode(probe_image, fx.teacher).patches.data();
    atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(atas::param_hash(fx.teacher) == before);
    CHECK(atas::encode(probe_image, fx.teacher).patches.data() == probe_before);
}

TEST_CASE("eval hook fires on the configured cadence") {
    Fixture fx;
    std::vector<std::size_t> steps_seen;
    atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg,
                          [&](const TrainState& st, const atas::EvalReport& r) {
                              steps_seen.push_back(st.step);
                              CHECK(r.coherence_auroc >= 0.0);
                              CHECK(r.coherence_auroc <= 1.0);
                              CHECK(r.per_class_accuracy.size() == fx.bank.num_classes);
                          });
    CHECK(steps_seen == std::vector<std::size_t>{3, 6});
}

TEST_CASE("checkpoint resume reproduces the unbroken run exactly") {
    Fixture fx;
    fx.cfg.steps = 6;
    TrainState full = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);

    RunConfig half_cfg = fx.cfg;
    half_cfg.steps = 3;
    TrainState half = atas::distill_student(fx.teacher, fx.corpus, fx.bank, half_cfg);

    auto dir = std::filesystem::temp_directory_path() / "atas_pipeline_test";
    std::filesystem::create_directories(dir);
    std::string path = (dir / "student_3.ckpt").string();
    atas::save_train_state(path, half);
    TrainState resumed_state = atas::load_train_state(path);
    CHECK(resumed_state.step == 3);
    CHECK(atas::param_hash(resumed_state.student) == atas::param_hash(half.student));
    CHECK(same_history(resumed_state.history, half.history));

    TrainState continued =
        atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg, nullptr, std::move(resumed_state));
    CHECK(same_history(continued.history, full.history));
    CHECK(atas::param_hash(continued.student) == atas::param_hash(full.student));

    // save/load round trip of the final state is bit-exact too
    std::string final_path = (dir / "student_6.ckpt").string();
    atas::save_train_state(final_path, continued);
    TrainState reloaded = atas::load_train_state(final_path);
    CHECK(atas::param_hash(reloaded.student) == atas::param_hash(full.student));
    CHECK(atas::serialize_checkpoint(reloaded.student, reloaded.optimizer.state_tensors()) ==
          atas::serialize_checkpoint(continued.student, continued.optimizer.state_tensors()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("NaN loss aborts with the batch seed recorded") {
    Fixture fx;
    ModelParams poisoned = atas::freeze(fx.teacher);
    std::vector<double> bad = poisoned.tensors.at("cls").data();
    bad[0] = std::numeric_limits<double>::quiet_NaN();
    poisoned.tensors["cls"] = Tensor::from({bad.size()}, bad);
    bool threw = false;
    try {
        atas::distill_student(poisoned, fx.corpus, fx.bank, fx.cfg);
    } catch (const atas::DivergenceError& e) {
        threw = true;
        CHECK(std::string(e.what()).find("batch seed") != std::string::npos);
    } catch (const atas::ContractError&) {
        threw = true; // debug builds trip the NaN guard inside the ops instead
    }
    CHECK(threw);
}

TEST_CASE("run_ablation: full variant equals plain distillation, unknown variant rejected") {
    Fixture fx;
    CHECK_THROWS_AS(atas::apply_variant(fx.cfg, "no_such_variant"), atas::ConfigError);

    atas::AblationOutcome outcome = atas::run_ablation(fx.cfg, "full", &fx.teacher);
    TrainState direct = atas::distill_student(fx.teacher, fx.corpus, fx.bank, fx.cfg);
    CHECK(atas::param_hash(outcome.state.student) == atas::param_hash(direct.student));
    CHECK(same_history(outcome.state.history, direct.history));
    CHECK(outcome.teacher_report.per_class_accuracy.size() == fx.bank.num_classes);

    // variant wiring
    RunConfig gld_only = atas::apply_variant(fx.cfg, "gld_only");
    CHECK(gld_only.distill.lambda_lld == 0.0);
    CHECK(gld_only.distill.lambda_ggd == 0.0);
    RunConfig cw = atas::apply_variant(fx.cfg, "cosine_weighted");
    CHECK(cw.distill.gld_objective == atas::GldObjective::cosine);
    CHECK(cw.distill.gld_pooling == atas::GldPooling::weighted);
    RunConfig cu = atas::apply_variant(fx.cfg, "contrastive_unweighted");
    CHECK(cu.distill.gld_pooling == atas::GldPooling::mean);
    RunConfig wm = atas::apply_variant(fx.cfg, "whole_mosaic_anchor");
    CHECK(wm.distill.gld_anchor == atas::GldAnchor::whole_mosaic);
}

TEST_CASE("ablation smoke matrix: every variant trains and logs all components") {
    Fixture fx;
    fx.cfg.steps = 2;
    fx.cfg.eval_every = 2;
    for (const std::string& variant : atas::ablation_variants()) {
        CAPTURE(variant);
        atas::AblationOutcome outcome = atas::run_ablation(fx.cfg, variant, &fx.teacher);
        REQUIRE(outcome.state.history.size() == 2);
        for (const atas::StepLoss& h : outcome.state.history) {
            CHECK(std::isfinite(h.gld));
            CHECK(std::isfinite(h.lld));
            CHECK(std::isfinite(h.ggd));
            CHECK(std::isfinite(h.total));
        }
        CHECK(outcome.student_report.alignment_accuracy >= 0.0);
    }
}

TEST_CASE("evaluate is deterministic and self-consistent") {
    Fixture fx;
    atas::EvalReport a = atas::evaluate(fx.teacher, fx.bank, fx.cfg);
    atas::EvalReport b = atas::evaluate(fx.teacher, fx.bank, fx.cfg);
    CHECK(a.coherence_auroc == b.coherence_auroc);
    CHECK(a.alignment_accuracy == b.alignment_accuracy);
    CHECK(a.num_pairs_evaluated == b.num_pairs_evaluated);
    CHECK(a.per_class_accuracy == b.per_class_accuracy);

    // pooled accuracy equals the weighted mean of per-class accuracies
    double weighted = 0.0;
    for (double acc : a.per_class_accuracy) weighted += acc;
    CHECK(a.alignment_accuracy >= 0.0);
    CHECK(a.alignment_accuracy <= 1.0);
}

} // TEST_SUITE
