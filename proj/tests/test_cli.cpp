// Drives the real ditforge binary: exit codes, output shapes, config files,
// and byte-level artifact behavior. DITFORGE_CLI_PATH names the executable.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ditforge/distill.hpp"
#include "ditforge/io.hpp"
#include "ditforge/model.hpp"
#include "ditforge/perf.hpp"
#include "ditforge/rng.hpp"
#include "ditforge/schedules.hpp"

using namespace ditforge;
namespace fs = std::filesystem;

namespace {

const fs::path& scratch() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / "ditforge_cli_scratch";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string where(const std::string& name) { return (scratch() / name).string(); }

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    REQUIRE(f.good());
    f << text;
}

bool same_bytes(const std::string& a, const std::string& b) { return slurp(a) == slurp(b); }

struct RunResult {
    int code = -1;
    std::string out, err;
};

RunResult run_cli(const std::string& args) {
    static int seq = 0;
    std::string out_f = where("run." + std::to_string(seq) + ".out");
    std::string err_f = where("run." + std::to_string(seq) + ".err");
    ++seq;
    std::string cmd =
        std::string(DITFORGE_CLI_PATH) + " " + args + " > " + out_f + " 2> " + err_f;
    int rc = std::system(cmd.c_str());
    RunResult r;
    if (WIFEXITED(rc)) r.code = WEXITSTATUS(rc);
    r.out = slurp(out_f);
    r.err = slurp(err_f);
    return r;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) out.push_back(line);
    return out;
}

// Geometry the tiny train/generate runs below use throughout.
DitConfig tiny_cfg() {
    DitConfig c;
    c.depth = 1;
    c.width = 8;
    c.heads = 2;
    c.patch = 2;
    c.image = 4;
    c.in_channels = 3;
    c.num_classes = 3;
    c.mlp_ratio = 4;
    c.validate();
    return c;
}

constexpr const char* kTinyFlags = "--d 1 --w 8 --h 2 --img 4 --classes 3";

// One shared trained checkpoint; several cases probe it.
const std::string& trained_ckpt() {
    static std::string path = [] {
        std::string p = where("trained.dtck");
        RunResult r = run_cli(std::string("train --synth --synth-n 4 ") + kTinyFlags +
                              " --epochs 2 --batch 2 --lr 1e-3 --seed 9 --out " + p);
        REQUIRE(r.code == 0);
        return p;
    }();
    return path;
}

} // namespace

TEST_CASE("plan ranks candidates under the budget") {
    RunResult r = run_cli("plan --budget 430K");
    CHECK(r.code == 0);
    auto rows = lines_of(r.out);
    REQUIRE(rows.size() >= 2);
    CHECK(rows[0].find("params") != std::string::npos);
    CHECK(rows[1].find("w64d5h8") != std::string::npos);
    CHECK(rows[1].find("421068") != std::string::npos);

    RunResult top = run_cli("plan --budget 430K --top 3");
    CHECK(lines_of(top.out).size() == 4);

    RunResult csv = run_cli("plan --budget 2.2M --top 1 --csv");
    CHECK(csv.code == 0);
    auto crows = lines_of(csv.out);
    REQUIRE(crows.size() == 2);
    CHECK(crows[0] == "name,d,w,h,params,utilization,deficit");
    CHECK(crows[1].find(",7,128,8,2197644,") != std::string::npos);
}

TEST_CASE("plan with an infeasible budget exits 2 naming the minimum") {
    RunResult r = run_cli("plan --budget 10");
    CHECK(r.code == 2);
    CHECK(r.err.find("14460") != std::string::npos);
}

TEST_CASE("params prints the frozen breakdown") {
    RunResult r = run_cli("params --d 7 --w 192 --h 12 --csv");
    CHECK(r.code == 0);
    auto rows = lines_of(r.out);
    REQUIRE(!rows.empty());
    CHECK(rows[0] == "component,count");
    CHECK(r.out.find("per_block,666432") != std::string::npos);
    CHECK(r.out.find("total,4881612") != std::string::npos);

    RunResult ruled = run_cli("params --d 5 --w 64");
    CHECK(ruled.code == 0);
    CHECK(ruled.out.find("heads=8") != std::string::npos);
    CHECK(ruled.out.find("421068") != std::string::npos);
}

TEST_CASE("schedule endpoints land on the pinned sigmas") {
    RunResult r = run_cli("schedule --points 2 --csv");
    CHECK(r.code == 0);
    auto rows = lines_of(r.out);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0] == "t,sigma,alpha");
    CHECK(rows[1].rfind("0,80,", 0) == 0);
    CHECK(rows[2].rfind("1,0.02,", 0) == 0);

    RunResult grid = run_cli("schedule");
    CHECK(lines_of(grid.out).size() == 12);
    CHECK(grid.out.find("80.00000000") != std::string::npos);
    CHECK(grid.out.find("0.02000000") != std::string::npos);
}

TEST_CASE("unknown flags and missing requirements exit 2") {
    RunResult bogus = run_cli("plan --budget 430K --bogus");
    CHECK(bogus.code == 2);
    CHECK(bogus.err.find("--bogus") != std::string::npos);

    RunResult bare = run_cli("");
    CHECK(bare.code == 2);

    RunResult missing = run_cli("plan");
    CHECK(missing.code == 2);
    CHECK(missing.err.find("--budget") != std::string::npos);
}

TEST_CASE("usage errors inside command bodies exit 2") {
    std::string out = where("unused.dtck");
    RunResult ta = run_cli(std::string("train --method ta --synth ") + kTinyFlags +
                           " --out " + out);
    CHECK(ta.code == 2);
    CHECK(ta.err.find("--ta-ckpt") != std::string::npos);

    RunResult mi1 = run_cli(std::string("train --method mi1 --synth ") + kTinyFlags +
                            " --out " + out);
    CHECK(mi1.code == 2);
    CHECK(mi1.err.find("--layers") != std::string::npos);

    RunResult both = run_cli(std::string("train --synth --data somewhere ") + kTinyFlags +
                             " --out " + out);
    CHECK(both.code == 2);

    CHECK(run_cli("train --method nope --synth --d 1 --w 8 --out x").code == 2);
    CHECK(run_cli("plan --budget 4x3").code == 2);
    CHECK(run_cli("schedule --points 0").code == 2);
    CHECK(run_cli("pareto").code == 2);
    CHECK(run_cli("pareto --bundled --input extra.csv").code == 2);
}

TEST_CASE("config file supplies values and command-line flags win") {
    std::string cfg = where("opts.ini");
    spill(cfg, "[schedule]\npoints=3\n");

    RunResult fromfile = run_cli("--config " + cfg + " schedule --csv");
    CHECK(fromfile.code == 0);
    CHECK(lines_of(fromfile.out).size() == 4);

    RunResult overridden = run_cli("--config " + cfg + " schedule --csv --points 5");
    CHECK(overridden.code == 0);
    CHECK(lines_of(overridden.out).size() == 6);
    CHECK(overridden.err.find("points=5") != std::string::npos);
}

TEST_CASE("every run echoes the resolved configuration to stderr") {
    RunResult r = run_cli("schedule --points 2");
    CHECK(r.code == 0);
    CHECK(r.err.find("# resolved configuration [schedule]") != std::string::npos);
    CHECK(r.err.find("points=2") != std::string::npos);
    CHECK(r.out.find('#') == std::string::npos);
}

TEST_CASE("train with zero epochs writes the initialization") {
    std::string ck_path = where("init.dtck");
    RunResult r = run_cli(std::string("train --synth --synth-n 4 ") + kTinyFlags +
                          " --epochs 0 --seed 9 --out " + ck_path);
    CHECK(r.code == 0);
    CHECK(r.out.find("steps=0") != std::string::npos);

    Checkpoint ck = load_checkpoint(ck_path);
    ModelState<float> init = init_model<float>(tiny_cfg(), 9);
    REQUIRE(ck.model.weights.size() == init.weights.size());
    for (const auto& [name, w] : init.weights) {
        const Tensor<float>& got = ck.model.weights.at(name);
        REQUIRE(got.numel() == w.numel());
        for (int64_t i = 0; i < w.numel(); ++i) CHECK(got[i] == w[i]);
    }
    REQUIRE(ck.ema.has_value());
    for (const auto& [name, w] : init.weights) {
        const Tensor<float>& sh = ck.ema->shadow.at(name);
        for (int64_t i = 0; i < w.numel(); ++i) CHECK(sh[i] == w[i]);
    }
}

TEST_CASE("fixed seeds make byte-identical artifacts") {
    std::string ck1 = where("rerun1.dtck"), cv1 = where("rerun1.csv");
    std::string ck2 = where("rerun2.dtck"), cv2 = where("rerun2.csv");
    std::string args = std::string("train --synth --synth-n 4 ") + kTinyFlags +
                       " --epochs 2 --batch 2 --lr 1e-3 --seed 9";
    CHECK(run_cli(args + " --out " + ck1 + " --curve " + cv1).code == 0);
    CHECK(run_cli(args + " --out " + ck2 + " --curve " + cv2).code == 0);
    CHECK(same_bytes(ck1, ck2));
    CHECK(same_bytes(cv1, cv2));

    std::string g1 = where("rerun1.tnsr"), g2 = where("rerun2.tnsr");
    std::string gen = "generate --ckpt " + ck1 + " --class 1 --seed 5 --out ";
    CHECK(run_cli(gen + g1).code == 0);
    CHECK(run_cli(gen + g2).code == 0);
    CHECK(same_bytes(g1, g2));
}

TEST_CASE("generate at cfg-scale 1 equals the conditional forward") {
    std::string img = where("scale1.tnsr");
    RunResult r = run_cli("generate --ckpt " + trained_ckpt() +
                          " --class 2 --cfg-scale 1 --seed 5 --out " + img);
    CHECK(r.code == 0);

    Checkpoint ck = load_checkpoint(trained_ckpt());
    REQUIRE(ck.ema.has_value());
    ModelState<float> model = ema_snapshot(*ck.ema, ck.model.cfg);
    Tensor<float> z({3, 4, 4});
    Rng rng = named_stream(5, "generate.z");
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());
    Tensor<float> cond = forward(model, z, 2).image;

    Tensor<float> got = load_tensor(img);
    REQUIRE(got.numel() == cond.numel());
    for (int64_t i = 0; i < cond.numel(); ++i) CHECK(got[i] == cond[i]);
}

TEST_CASE("ema toggle changes the sample once training has stepped") {
    std::string ema_img = where("ema.tnsr");
    std::string raw_img = where("raw.tnsr");
    std::string raw2_img = where("raw2.tnsr");
    std::string gen = "generate --ckpt " + trained_ckpt() + " --class 1 --seed 5 --out ";
    CHECK(run_cli(gen + ema_img).code == 0);
    CHECK(run_cli(gen + raw_img + " --no-ema").code == 0);
    CHECK(run_cli(gen + raw2_img + " --use-ema=false").code == 0);
    CHECK(!same_bytes(ema_img, raw_img));
    CHECK(same_bytes(raw_img, raw2_img));
}

TEST_CASE("divergent training exits 3 but persists artifacts") {
    std::vector<TeacherPair> pairs(2);
    for (int i = 0; i < 2; ++i) {
        pairs[i].class_id = i;
        pairs[i].z = Tensor<float>({3, 4, 4});
        pairs[i].x = Tensor<float>({3, 4, 4});
        for (int64_t j = 0; j < pairs[i].z.numel(); ++j) {
            pairs[i].z[j] = 0.1f * static_cast<float>(j % 5);
            pairs[i].x[j] = 0.2f;
        }
    }
    pairs[0].x[0] = std::numeric_limits<float>::quiet_NaN();
    std::string data = where("poison.dtp1");
    write_teacher_pairs(data, pairs);

    std::string ck_path = where("poison.dtck"), cv_path = where("poison.csv");
    RunResult r = run_cli(std::string("train --data ") + data + " " + kTinyFlags +
                          " --epochs 1 --batch 2 --seed 3 --out " + ck_path + " --curve " +
                          cv_path);
    CHECK(r.code == 3);
    CHECK(r.err.find("non-finite") != std::string::npos);

    Checkpoint ck = load_checkpoint(ck_path);
    ModelState<float> init = init_model<float>(tiny_cfg(), 3);
    for (const auto& [name, w] : init.weights) {
        const Tensor<float>& got = ck.model.weights.at(name);
        for (int64_t i = 0; i < w.numel(); ++i) CHECK(got[i] == w[i]);
    }
    CHECK(slurp(cv_path) == "step,loss,ema_loss\n");
}

TEST_CASE("missing and corrupt inputs exit 4") {
    RunResult gone = run_cli("generate --ckpt " + where("nonexistent.dtck") + " --out " +
                             where("never.tnsr"));
    CHECK(gone.code == 4);

    std::string trunc = where("trunc.dtck");
    spill(trunc, slurp(trained_ckpt()).substr(0, 40));
    RunResult bad = run_cli("generate --ckpt " + trunc + " --out " + where("never.tnsr"));
    CHECK(bad.code == 4);

    CHECK(run_cli("pareto --input " + where("nonexistent.csv")).code == 4);
}

TEST_CASE("mi1-targets writes tensors matching the library") {
    std::string dir = where("targets");
    RunResult r = run_cli("mi1-targets --layers 1,2 --times 0.5,0 --synth --img 8 --classes 4"
                          " --out-dir " + dir + " --d 2 --seed 1");
    CHECK(r.code == 0);
    auto listed = lines_of(r.out);
    REQUIRE(listed.size() == 2);
    CHECK(listed[0] == dir + "/target_l1.tnsr");
    CHECK(listed[1] == dir + "/target_l2.tnsr");

    SynthPairSource src(500, 1, 8, 3, 4);
    TeacherPair pair = src.at(0);
    Mi1Plan plan;
    plan.layers = {1, 2};
    plan.times = {0.5, 0.0};
    auto expected = mi1_targets<float>(ScheduleSpec{}, plan, pair.z, pair.x);
    REQUIRE(expected.size() == 2);
    for (size_t k = 0; k < expected.size(); ++k) {
        Tensor<float> got = load_tensor(listed[k]);
        const Tensor<float>& want = expected[k].second;
        REQUIRE(got.shape() == want.shape());
        for (int64_t i = 0; i < want.numel(); ++i) CHECK(got[i] == want[i]);
    }

    CHECK(run_cli("mi1-targets --layers 1 --times 0 --out-dir " + dir).code == 2);
}

TEST_CASE("train accepts a full mi1 invocation") {
    std::string ck_path = where("mi1.dtck");
    RunResult r = run_cli("train --method mi1 --layers 2,4,6 --times 0.66,0.33,0 --synth"
                          " --synth-n 4 --d 6 --w 16 --h 4 --img 8 --classes 4 --epochs 0"
                          " --seed 1 --out " + ck_path);
    CHECK(r.code == 0);
    CHECK(fs::exists(ck_path));
}

TEST_CASE("pareto matches the bundled table and writes a gnuplot table") {
    std::string table = where("designs.csv");
    spill(table, kBundledDesignCsv);
    RunResult from_file = run_cli("pareto --input " + table + " --csv");
    RunResult bundled = run_cli("pareto --bundled --csv");
    CHECK(from_file.code == 0);
    CHECK(bundled.code == 0);
    CHECK(from_file.out == bundled.out);

    std::string gp = where("frontier.gnuplot");
    RunResult pretty = run_cli("pareto --bundled --gnuplot " + gp);
    CHECK(pretty.code == 0);
    CHECK(pretty.out.find("11 of 13 designs on the frontier") != std::string::npos);
    CHECK(pretty.out.find("proposed-5M-200ep") != std::string::npos);
    CHECK(pretty.out.find("deeper") == std::string::npos);
    CHECK(pretty.out.find("proposed-5M ") == std::string::npos);
    auto gp_rows = lines_of(slurp(gp));
    REQUIRE(gp_rows.size() == 12);
    CHECK(gp_rows[0] == "# params latency_s fid name");
}

TEST_CASE("latency-fit reports coefficients and rank fidelity") {
    RunResult plain = run_cli("latency-fit --bundled --csv");
    CHECK(plain.code == 0);
    CHECK(plain.out.rfind("term,coefficient\n", 0) == 0);
    CHECK(plain.out.find("spearman,0.997249") != std::string::npos);

    RunResult heads = run_cli("latency-fit --bundled --with-heads --csv");
    CHECK(heads.out.find("d*h*N^2,") != std::string::npos);
    CHECK(heads.out.find("spearman,0.998625") != std::string::npos);

    RunResult pretty = run_cli("latency-fit --bundled");
    CHECK(pretty.out.find("residual") != std::string::npos);

    std::string tiny = where("twopoints.csv");
    spill(tiny, "name,d,w,h,params,latency_s,fid\na,1,16,2,1000,1.0,5\nb,2,16,2,2000,2.0,4\n");
    CHECK(run_cli("latency-fit --input " + tiny).code == 3);
}

TEST_CASE("make-pairs output round trips through the pair loader") {
    std::string path = where("pairs.dtp1");
    RunResult r = run_cli("make-pairs --out " + path + " --n 6 --seed 3 --img 8 --classes 4");
    CHECK(r.code == 0);

    FilePairSource loaded(path);
    REQUIRE(loaded.size() == 6);
    SynthPairSource fresh(6, 3, 8, 3, 4);
    TeacherPair got = loaded.at(5);
    TeacherPair want = fresh.at(5);
    CHECK(got.class_id == want.class_id);
    REQUIRE(got.x.shape() == std::vector<int64_t>{3, 8, 8});
    for (int64_t i = 0; i < want.x.numel(); ++i) {
        CHECK(got.x[i] == want.x[i]);
        CHECK(got.z[i] == want.z[i]);
    }
}

TEST_CASE("bench reports flops and throughput") {
    RunResult r = run_cli("bench --d 1 --w 16 --h 4 --img 8 --iters 1 --warmup 0");
    CHECK(r.code == 0);
    CHECK(r.out.find("flops/forward") != std::string::npos);
    CHECK(r.out.find("gflop/s") != std::string::npos);

    RunResult csv = run_cli("bench --d 1 --w 16 --h 4 --img 8 --iters 1 --warmup 0 --csv");
    CHECK(lines_of(csv.out)[0] == "d,w,h,params,flops,mean_s,best_s,gflops_per_s");
}

TEST_CASE("help lists every subcommand and its flags") {
    RunResult top = run_cli("--help");
    CHECK(top.code == 0);
    for (const char* name : {"plan", "params", "schedule", "mi1-targets", "train", "generate",
                             "pareto", "latency-fit", "bench", "make-pairs"})
        CHECK(top.out.find(name) != std::string::npos);

    RunResult gen = run_cli("generate --help");
    CHECK(gen.code == 0);
    for (const char* flag : {"--ckpt", "--class", "--cfg-scale", "--seed", "--out", "--use-ema"})
        CHECK(gen.out.find(flag) != std::string::npos);
}
