// Command-line driver: pretrain / distill / eval / ablate / viz over a flat
// key=value run configuration. Exit code 0 on success; failures print one
// machine-parseable "error: <category>: <message>" line.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "atas/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir;
    std::string resume_path;
};

atas::RunConfig load_config(const CommonOpts& opts) {
    atas::RunConfig cfg;
    if (!opts.config_path.empty()) cfg = atas::parse_run_config(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    if (!opts.out_dir.empty()) cfg.output_dir = opts.out_dir;
    cfg.validate();
    return cfg;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw atas::IoError("cannot write " + path);
    f << text;
}

void append_metrics(const std::string& path, const std::string& run_id, std::size_t step,
                    const atas::EvalReport& report, std::size_t num_classes) {
    bool fresh = !fs::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw atas::IoError("cannot write " + path);
    if (fresh) f << atas::eval_csv_header(num_classes) << "\n";
    f << atas::eval_csv_row(run_id, step, report) << "\n";
}

void write_loss_csv(const std::string& path, const std::vector<atas::StepLoss>& history) {
    std::ofstream f(path);
    if (!f) throw atas::IoError("cannot write " + path);
    f << "step,gld,lld,ggd,total\n";
    f.precision(12);
    for (const atas::StepLoss& h : history) {
        f << h.step << "," << h.gld << "," << h.lld << "," << h.ggd << "," << h.total << "\n";
    }
}

atas::ModelParams load_or_pretrain_teacher(const atas::RunConfig& cfg, const std::vector<atas::TileSample>& corpus,
                                           const atas::ConceptBank& bank) {
    std::string path = cfg.output_dir + "/teacher.ckpt";
    if (fs::exists(path)) {
        std::printf("loading teacher from %s\n", path.c_str());
        return atas::params_from_checkpoint(atas::load_checkpoint(path));
    }
    std::printf("pretraining teacher (budget %zu steps)\n", cfg.pretrain_steps);
    atas::PretrainResult pre = atas::pretrain_teacher_full(corpus, bank, cfg);
    fs::create_directories(cfg.output_dir);
    atas::save_checkpoint(path, pre.params);
    std::ofstream f(cfg.output_dir + "/pretrain_loss.csv");
    f << "step,loss\n";
    for (std::size_t i = 0; i < pre.loss_history.size(); ++i) f << i << "," << pre.loss_history[i] << "\n";
    std::printf("teacher ready after %zu steps (holdout accuracy %.3f)\n", pre.steps_run, pre.final_accuracy);
    return pre.params;
}

int cmd_pretrain(const CommonOpts& opts) {
    atas::RunConfig cfg = load_config(opts);
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir + "/config.txt", atas::run_config_to_text(cfg));
    std::vector<atas::TileSample> corpus = atas::gen_corpus(cfg.corpus);
    atas::ConceptBank bank = atas::concept_bank_for(cfg);
    atas::PretrainResult pre = atas::pretrain_teacher_full(corpus, bank, cfg);
    atas::save_checkpoint(cfg.output_dir + "/teacher.ckpt", pre.params);
    std::ofstream f(cfg.output_dir + "/pretrain_loss.csv");
    f << "step,loss\n";
    for (std::size_t i = 0; i < pre.loss_history.size(); ++i) f << i << "," << pre.loss_history[i] << "\n";
    atas::EvalReport report = atas::evaluate(pre.params, bank, cfg);
    append_metrics(cfg.output_dir + "/metrics.csv", "teacher", pre.steps_run, report, bank.num_classes);
    std::printf("pretrain done: %zu steps, holdout accuracy %.4f, patch auroc %.4f, patch alignment %.4f\n",
                pre.steps_run, pre.final_accuracy, report.coherence_auroc, report.alignment_accuracy);
    return 0;
}

int cmd_distill(const CommonOpts& opts) {
    atas::RunConfig cfg = load_config(opts);
    fs::create_directories(cfg.output_dir);
    write_text(cfg.output_dir + "/config.txt", atas::run_config_to_text(cfg));
    std::vector<atas::TileSample> corpus = atas::gen_corpus(cfg.corpus);
    atas::ConceptBank bank = atas::concept_bank_for(cfg);
    atas::ModelParams teacher = load_or_pretrain_teacher(cfg, corpus, bank);

    std::optional<atas::TrainState> resume;
    if (!opts.resume_path.empty()) {
        resume = atas::load_train_state(opts.resume_path);
        std::printf("resuming from %s at step %zu\n", opts.resume_path.c_str(), resume->step);
    }

    std::string run_id = "distill-seed" + std::to_string(cfg.seed);
    auto on_eval = [&](const atas::TrainState& state, const atas::EvalReport& report) {
        append_metrics(cfg.output_dir + "/metrics.csv", run_id, state.step, report, bank.num_classes);
        atas::save_train_state(cfg.output_dir + "/student_" + std::to_string(state.step) + ".ckpt", state);
        std::printf("step %zu: total %.5f, auroc %.4f, alignment %.4f\n", state.step,
                    state.history.back().total, report.coherence_auroc, report.alignment_accuracy);
    };
    atas::TrainState state = atas::distill_student(teacher, corpus, bank, cfg, on_eval, std::move(resume));
    write_loss_csv(cfg.output_dir + "/loss.csv", state.history);
    if (!fs::exists(cfg.output_dir + "/student_" + std::to_string(state.step) + ".ckpt")) {
        atas::save_train_state(cfg.output_dir + "/student_" + std::to_string(state.step) + ".ckpt", state);
    }
    std::printf("distill done: %zu steps\n", state.step);
    return 0;
}

int cmd_eval(const CommonOpts& opts) {
    atas::RunConfig cfg = load_config(opts);
    atas::ConceptBank bank = atas::concept_bank_for(cfg);
    fs::create_directories(cfg.output_dir);

    auto eval_one = [&](const std::string& path, const std::string& run_id) {
        atas::ModelParams params = atas::params_from_checkpoint(atas::load_checkpoint(path));
        atas::EvalReport report = atas::evaluate(params, bank, cfg);
        append_metrics(cfg.output_dir + "/metrics.csv", run_id, 0, report, bank.num_classes);
        std::printf("%s: auroc %.4f, alignment %.4f (%zu pairs)\n", run_id.c_str(), report.coherence_auroc,
                    report.alignment_accuracy, report.num_pairs_evaluated);
    };

    if (!opts.resume_path.empty()) {
        eval_one(opts.resume_path, "eval-" + fs::path(opts.resume_path).stem().string());
        return 0;
    }
    std::string teacher_path = cfg.output_dir + "/teacher.ckpt";
    if (!fs::exists(teacher_path)) {
        throw atas::IoError("no checkpoint given and " + teacher_path + " not found");
    }
    eval_one(teacher_path, "eval-teacher");
    // newest student checkpoint, if any
    std::string latest;
    std::size_t latest_step = 0;
    for (const auto& entry : fs::directory_iterator(cfg.output_dir)) {
        std::string name = entry.path().filename().string();
        if (name.rfind("student_", 0) == 0 && entry.path().extension() == ".ckpt") {
            std::size_t step = std::stoull(name.substr(8, name.size() - 8 - 5));
            if (step >= latest_step) {
                latest_step = step;
                latest = entry.path().string();
            }
        }
    }
    if (!latest.empty()) eval_one(latest, "eval-student_" + std::to_string(latest_step));
    return 0;
}

int cmd_ablate(const CommonOpts& opts, const std::string& variant) {
    atas::RunConfig base = load_config(opts);
    atas::RunConfig cfg = atas::apply_variant(base, variant);
    std::string vdir = base.output_dir + "/" + variant;
    cfg.output_dir = vdir;
    fs::create_directories(vdir);
    write_text(vdir + "/config.txt", atas::run_config_to_text(cfg));

    std::vector<atas::TileSample> corpus = atas::gen_corpus(cfg.corpus);
    atas::ConceptBank bank = atas::concept_bank_for(cfg);
    // share one teacher across variants of the same base config
    atas::RunConfig teacher_cfg = base;
    atas::ModelParams teacher = load_or_pretrain_teacher(teacher_cfg, corpus, bank);
    if (!fs::exists(vdir + "/teacher.ckpt")) atas::save_checkpoint(vdir + "/teacher.ckpt", teacher);

    std::vector<atas::MosaicSample> eval_set = atas::eval_mosaic_set(cfg);
    atas::EvalReport teacher_report = atas::evaluate_on(teacher, bank, eval_set, cfg);
    append_metrics(vdir + "/metrics.csv", variant + "-teacher", 0, teacher_report, bank.num_classes);

    auto on_eval = [&](const atas::TrainState& state, const atas::EvalReport& report) {
        append_metrics(vdir + "/metrics.csv", variant + "-student", state.step, report, bank.num_classes);
        std::printf("step %zu: total %.5f, auroc %.4f, alignment %.4f\n", state.step,
                    state.history.back().total, report.coherence_auroc, report.alignment_accuracy);
    };
    atas::TrainState state = atas::distill_student(teacher, corpus, bank, cfg, on_eval);
    write_loss_csv(vdir + "/loss.csv", state.history);
    atas::save_train_state(vdir + "/student_" + std::to_string(state.step) + ".ckpt", state);
    atas::EvalReport student_report = atas::evaluate_on(atas::freeze(state.student), bank, eval_set, cfg);
    std::printf("%s: teacher auroc %.4f align %.4f -> student auroc %.4f align %.4f\n", variant.c_str(),
                teacher_report.coherence_auroc, teacher_report.alignment_accuracy, student_report.coherence_auroc,
                student_report.alignment_accuracy);
    return 0;
}

int cmd_viz(const CommonOpts& opts, std::size_t image_index, std::size_t anchor_index) {
    atas::RunConfig cfg = load_config(opts);
    std::string ckpt = opts.resume_path.empty() ? cfg.output_dir + "/teacher.ckpt" : opts.resume_path;
    atas::ModelParams params = atas::params_from_checkpoint(atas::load_checkpoint(ckpt));

    std::vector<atas::MosaicSample> eval_set = atas::eval_mosaic_set(cfg);
    if (image_index >= eval_set.size()) {
        throw atas::ConfigError("image index " + std::to_string(image_index) + " out of range (have " +
                                std::to_string(eval_set.size()) + " eval mosaics)");
    }
    atas::EncoderOutput out = atas::encode(eval_set[image_index].image, params);
    atas::Tensor map = atas::similarity_map(out.patches, anchor_index);

    std::string maps_dir = cfg.output_dir + "/maps";
    fs::create_directories(maps_dir);
    std::string stem = maps_dir + "/" + std::to_string(image_index) + "_" + std::to_string(anchor_index);
    atas::write_pgm(stem + ".pgm", map);
    atas::write_matrix_txt(stem + ".txt", map);
    std::printf("wrote %s.pgm and %s.txt\n", stem.c_str(), stem.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale teacher/student patch-alignment distillation lab"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string variant = "full";
    std::size_t image_index = 0;
    std::size_t anchor_index = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "flat key=value run configuration file");
        sub->add_option("--seed", opts.seed, "override the run seed");
        sub->add_option("--out", opts.out_dir, "override the output directory");
    };

    CLI::App* pre = app.add_subcommand("pretrain", "train and freeze the teacher on single tiles");
    add_common(pre);

    CLI::App* dis = app.add_subcommand("distill", "distill the student on mosaic batches");
    add_common(dis);
    dis->add_option("--resume", opts.resume_path, "resume from a student checkpoint");

    CLI::App* eva = app.add_subcommand("eval", "evaluate checkpoints under the fixed eval protocol");
    add_common(eva);
    eva->add_option("--resume", opts.resume_path, "checkpoint to evaluate (default: teacher + newest student)");

    CLI::App* abl = app.add_subcommand("ablate", "run one objective variant and report both metrics");
    add_common(abl);
    abl->add_option("--variant", variant, "one of: full, gld_only, gld_lld, cosine_unweighted, cosine_weighted, contrastive_unweighted, whole_mosaic_anchor");

    CLI::App* viz = app.add_subcommand("viz", "emit a patch-similarity heatmap for one eval mosaic");
    add_common(viz);
    viz->add_option("--resume", opts.resume_path, "checkpoint to visualize (default: teacher.ckpt)");
    viz->add_option("--image", image_index, "eval mosaic index");
    viz->add_option("--anchor", anchor_index, "anchor patch index");

    CLI11_PARSE(app, argc, argv);

    try {
        if (pre->parsed()) return cmd_pretrain(opts);
        if (dis->parsed()) return cmd_distill(opts);
        if (eva->parsed()) return cmd_eval(opts);
        if (abl->parsed()) return cmd_ablate(opts, variant);
        if (viz->parsed()) return cmd_viz(opts, image_index, anchor_index);
    } catch (const atas::Error& e) {
        std::cerr << "error: " << e.category() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
