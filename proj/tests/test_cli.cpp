#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

namespace fs = std::filesystem;

namespace {

const char* cli_path() { return ATAS_CLI_PATH; }

struct RunResult {
    int code;
    std::string err;
};

RunResult run_cli(const std::string& args, const fs::path& dir) {
    fs::path errfile = dir / "stderr.txt";
    std::string cmd = std::string("\"") + cli_path() + "\" " + args + " 2> \"" + errfile.string() + "\"";
    int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream f(errfile);
    std::ostringstream ss;
    ss << f.rdbuf();
    r.err = ss.str();
    return r;
}

std::string micro_config(const fs::path& out_dir) {
    std::ostringstream os;
    os << "# micro run used by the CLI smoke test\n"
       << "model.image_side=16\n"
       << "model.patch_size=8\n"
       << "model.embed_dim=8\n"
       << "model.num_layers=1\n"
       << "model.num_heads=2\n"
       << "model.mlp_ratio=2\n"
       << "corpus.num_classes=4\n"
       << "corpus.samples_per_class=6\n"
       << "corpus.noise_std=0.05\n"
       << "corpus.seed=2\n"
       << "grid_side=2\n"
       << "batch_size=2\n"
       << "steps=4\n"
       << "learning_rate=0.001\n"
       << "weight_decay=0.05\n"
       << "eval_every=2\n"
       << "seed=5\n"
       << "output_dir=" << out_dir.string() << "\n"
       << "pretrain_steps=150\n"
       << "pretrain_batch=4\n"
       << "pretrain_tau=0.2\n"
       << "pretrain_target_accuracy=0.5\n"
       << "pretrain_eval_every=25\n"
       << "pretrain_eval_per_class=1\n"
       << "eval_tiles_per_class=2\n"
       << "eval_mosaics=3\n"
       << "eval_pairs=40\n";
    return os.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

TEST_SUITE("cli") {

TEST_CASE("end-to-end subcommand flow") {
    fs::path dir = fs::temp_directory_path() / "atas_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::path out = dir / "out";
    fs::path cfg = dir / "run.cfg";
    {
        std::ofstream f(cfg);
        f << micro_config(out);
    }
    std::string cfg_arg = "--config \"" + cfg.string() + "\"";

    // pretrain
    RunResult pre = run_cli("pretrain " + cfg_arg, dir);
    CAPTURE(pre.err);
    REQUIRE(pre.code == 0);
    CHECK(fs::exists(out / "teacher.ckpt"));
    CHECK(fs::exists(out / "pretrain_loss.csv"));
    CHECK(fs::exists(out / "metrics.csv"));
    CHECK(fs::exists(out / "config.txt"));

    // distill picks up the saved teacher
    RunResult dis = run_cli("distill " + cfg_arg, dir);
    CAPTURE(dis.err);
    REQUIRE(dis.code == 0);
    CHECK(fs::exists(out / "loss.csv"));
    CHECK(fs::exists(out / "student_2.ckpt"));
    CHECK(fs::exists(out / "student_4.ckpt"));
    std::string loss_unbroken = slurp(out / "loss.csv");
    CHECK(loss_unbroken.rfind("step,gld,lld,ggd,total", 0) == 0);

    // resuming from the midpoint reproduces the same loss.csv
    RunResult res = run_cli("distill " + cfg_arg + " --resume \"" + (out / "student_2.ckpt").string() + "\"", dir);
    CAPTURE(res.err);
    REQUIRE(res.code == 0);
    CHECK(slurp(out / "loss.csv") == loss_unbroken);

    // eval: teacher plus newest student, then an explicit checkpoint
    CHECK(run_cli("eval " + cfg_arg, dir).code == 0);
    CHECK(run_cli("eval " + cfg_arg + " --resume \"" + (out / "student_2.ckpt").string() + "\"", dir).code == 0);
    std::string metrics = slurp(out / "metrics.csv");
    CHECK(metrics.find("eval-teacher") != std::string::npos);
    CHECK(metrics.find("eval-student_4") != std::string::npos);
    CHECK(metrics.find("eval-student_2") != std::string::npos);
    CHECK(metrics.rfind("run_id,step,coherence_auroc,alignment_accuracy,acc_class_0", 0) == 0);

    // viz writes the heatmap pair
    RunResult viz = run_cli("viz " + cfg_arg + " --image 1 --anchor 3", dir);
    CAPTURE(viz.err);
    REQUIRE(viz.code == 0);
    CHECK(fs::exists(out / "maps" / "1_3.pgm"));
    CHECK(fs::exists(out / "maps" / "1_3.txt"));
    CHECK(slurp(out / "maps" / "1_3.pgm").rfind("P5", 0) == 0);

    // ablate into a variant subdirectory, reusing the teacher
    RunResult abl = run_cli("ablate " + cfg_arg + " --variant gld_only", dir);
    CAPTURE(abl.err);
    REQUIRE(abl.code == 0);
    CHECK(fs::exists(out / "gld_only" / "metrics.csv"));
    CHECK(fs::exists(out / "gld_only" / "loss.csv"));
    CHECK(fs::exists(out / "gld_only" / "student_4.ckpt"));
    std::string ametrics = slurp(out / "gld_only" / "metrics.csv");
    CHECK(ametrics.find("gld_only-teacher") != std::string::npos);
    CHECK(ametrics.find("gld_only-student") != std::string::npos);

    fs::remove_all(dir);
}

TEST_CASE("failures exit nonzero with a machine-parseable category") {
    fs::path dir = fs::temp_directory_path() / "atas_cli_err";
    fs::remove_all(dir);
    fs::create_directories(dir);
    fs::path out = dir / "out";

    fs::path bad_cfg = dir / "bad.cfg";
    {
        std::ofstream f(bad_cfg);
        f << "definitely_not_a_key=1\n";
    }
    RunResult bad = run_cli("pretrain --config \"" + bad_cfg.string() + "\"", dir);
    CHECK(bad.code != 0);
    CHECK(bad.err.rfind("error: config:", 0) == 0);

    RunResult missing = run_cli("pretrain --config \"" + (dir / "nope.cfg").string() + "\"", dir);
    CHECK(missing.code != 0);
    CHECK(missing.err.rfind("error: io:", 0) == 0);

    fs::path cfg = dir / "run.cfg";
    {
        std::ofstream f(cfg);
        f << micro_config(out);
    }
    RunResult variant = run_cli("ablate --config \"" + cfg.string() + "\" --variant bogus", dir);
    CHECK(variant.code != 0);
    CHECK(variant.err.rfind("error: config:", 0) == 0);

    RunResult nockpt = run_cli("eval --config \"" + cfg.string() + "\"", dir);
    CHECK(nockpt.code != 0);
    CHECK(nockpt.err.rfind("error: io:", 0) == 0);

    fs::remove_all(dir);
}

} // TEST_SUITE
