// ditforge: plan, train, and measure miniature diffusion transformers.
// Exit codes: 0 ok; 2 usage/config/plan; 3 numeric/state/fit; 4 format/io.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "ditforge/arch_plan.hpp"
#include "ditforge/distill.hpp"
#include "ditforge/io.hpp"
#include "ditforge/metrics.hpp"
#include "ditforge/model.hpp"
#include "ditforge/perf.hpp"
#include "ditforge/schedules.hpp"

using namespace ditforge;

namespace {

// Accepts plain integers plus decimal K/M suffixes: "430000", "430K", "2.2M".
int64_t parse_count(const std::string& text) {
    if (text.empty()) throw UsageError("empty count");
    std::string body = text;
    double mult = 1.0;
    char suffix = body.back();
    if (suffix == 'k' || suffix == 'K') {
        mult = 1e3;
        body.pop_back();
    } else if (suffix == 'm' || suffix == 'M') {
        mult = 1e6;
        body.pop_back();
    }
    try {
        size_t pos = 0;
        double v = std::stod(body, &pos);
        if (pos != body.size() || !(v > 0))
            throw UsageError("bad count '" + text + "'");
        return static_cast<int64_t>(std::llround(v * mult));
    } catch (const Error&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError("bad count '" + text + "' (expected a number with optional K/M suffix)");
    }
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t pos = 0;
            out.push_back(std::stoi(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(std::string("bad ") + what + " list entry '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError(std::string(what) + " list is empty");
    return out;
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t pos = 0;
            out.push_back(std::stod(item, &pos));
            if (pos != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(std::string("bad ") + what + " list entry '" + item + "'");
        }
    }
    if (out.empty()) throw UsageError(std::string(what) + " list is empty");
    return out;
}

void print_resolved(const CLI::App& app) {
    for (const CLI::App* sub : app.get_subcommands()) {
        std::cerr << "# resolved configuration [" << sub->get_name() << "]\n";
        std::istringstream is(sub->config_to_str(true, false));
        std::string line;
        while (std::getline(is, line))
            if (!line.empty()) std::cerr << "#   " << line << "\n";
    }
}

std::string fmt(double v, const char* spec = "%g") {
    char buf[64];
    std::snprintf(buf, sizeof buf, spec, v);
    return buf;
}

struct GeometryFlags {
    int patch = 2;
    int image = 32;
    int channels = 3;
    int classes = 10;
    int mlp_ratio = 4;

    void attach(CLI::App* cmd) {
        cmd->add_option("--patch", patch, "Patch size")->capture_default_str();
        cmd->add_option("--img", image, "Image side length")->capture_default_str();
        cmd->add_option("--channels", channels, "Image channels")->capture_default_str();
        cmd->add_option("--classes", classes, "Class count")->capture_default_str();
        cmd->add_option("--mlp-ratio", mlp_ratio, "MLP expansion ratio")->capture_default_str();
    }

    DitConfig config(int d, int w, int h) const {
        DitConfig c;
        c.depth = d;
        c.width = w;
        c.heads = h > 0 ? h : heads_for_width(w);
        c.patch = patch;
        c.image = image;
        c.in_channels = channels;
        c.num_classes = classes;
        c.mlp_ratio = mlp_ratio;
        c.validate();
        return c;
    }
};

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << text;
    if (!out) throw IoError("short write on " + path);
}

// ---- plan ----

struct PlanCmd {
    CLI::App* cmd = nullptr;
    std::string budget;
    int wmin = 16, wmax = 512;
    GeometryFlags geo;
    int top = 0;
    bool csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("plan", "Rank architectures under a parameter budget");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--budget", budget, "Parameter budget (K/M suffixes allowed)")->required();
        cmd->add_option("--wmin", wmin, "Smallest width considered")->capture_default_str();
        cmd->add_option("--wmax", wmax, "Largest width considered")->capture_default_str();
        cmd->add_option("--top", top, "Print only the best N candidates (0 = all)")->capture_default_str();
        cmd->add_flag("--csv", csv, "Emit CSV");
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        PlanRequest req;
        req.budget = parse_count(budget);
        req.width_min = wmin;
        req.width_max = wmax;
        req.patch = geo.patch;
        req.image = geo.image;
        req.in_channels = geo.channels;
        req.num_classes = geo.classes;
        req.mlp_ratio = geo.mlp_ratio;
        PlanResult plan = plan_architecture(req);
        if (top > 0 && static_cast<size_t>(top) < plan.ranked.size())
            plan.ranked.resize(static_cast<size_t>(top));
        if (csv) {
            std::cout << plan_to_csv(plan);
            return;
        }
        std::printf("%-12s %4s %5s %4s %10s %8s %8s  %s\n", "name", "d", "w", "h", "params", "util%",
                    "deficit", "notes");
        for (const auto& c : plan.ranked)
            std::printf("%-12s %4d %5d %4d %10lld %8.2f %8d  %s\n", c.name.c_str(), c.cfg.depth,
                        c.cfg.width, c.cfg.heads, static_cast<long long>(c.params),
                        100.0 * c.utilization, c.deficit, c.note.c_str());
    }
};

// ---- params ----

struct ParamsCmd {
    CLI::App* cmd = nullptr;
    int d = 0, w = 0, h = 0;
    GeometryFlags geo;
    bool csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("params", "Break down the parameter count of one architecture");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--d", d, "Depth")->required();
        cmd->add_option("--w", w, "Width")->required();
        cmd->add_option("--h", h, "Heads (0 = median-divisor rule)")->capture_default_str();
        cmd->add_flag("--csv", csv, "Emit CSV");
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        DitConfig cfg = geo.config(d, w, h);
        ParamBreakdown b = count_params(cfg);
        const std::pair<const char*, int64_t> rows[] = {
            {"patch_embed", b.patch_embed}, {"pos_embed", b.pos_embed},
            {"timestep_embed", b.timestep_embed}, {"label_embed", b.label_embed},
            {"per_block", b.per_block}, {"blocks_total", b.per_block * b.depth},
            {"final_head", b.final_head}, {"total", b.total}};
        if (csv) {
            std::cout << "component,count\n";
            for (auto [name, count] : rows) std::cout << name << ',' << count << '\n';
        } else {
            std::printf("architecture: %s heads=%d\n", cfg.describe().c_str(), cfg.heads);
            for (auto [name, count] : rows)
                std::printf("%-16s %12lld\n", name, static_cast<long long>(count));
        }
    }
};

// ---- schedule ----

struct ScheduleCmd {
    CLI::App* cmd = nullptr;
    int points = 11;
    double sigma_min = 0.02, sigma_max = 80.0, rho = 7.0;
    bool csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("schedule", "Tabulate the noise schedule on a time grid");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--points", points, "Grid size over [0,1]")->capture_default_str();
        cmd->add_option("--sigma-min", sigma_min, "Noise floor")->capture_default_str();
        cmd->add_option("--sigma-max", sigma_max, "Noise ceiling")->capture_default_str();
        cmd->add_option("--rho", rho, "Warp exponent")->capture_default_str();
        cmd->add_flag("--csv", csv, "Emit CSV");
        this->cmd = cmd;
    }

    void run() const {
        if (points < 1) throw UsageError("--points must be >= 1");
        ScheduleSpec spec{sigma_min, sigma_max, rho};
        spec.validate();
        if (csv)
            std::cout << "t,sigma,alpha\n";
        else
            std::printf("%10s %16s %16s\n", "t", "sigma", "alpha");
        for (int i = 0; i < points; ++i) {
            double t = points == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(points - 1);
            double sg = sigma_at(spec, t);
            double al = alpha_at(spec, t);
            if (csv)
                std::cout << fmt(t, "%.8g") << ',' << fmt(sg, "%.10g") << ',' << fmt(al, "%.10g") << '\n';
            else
                std::printf("%10.6f %16.8f %16.10f\n", t, sg, al);
        }
    }
};

// ---- mi1-targets ----

struct Mi1TargetsCmd {
    CLI::App* cmd = nullptr;
    std::string layers, times;
    std::string pairs_path, out_dir;
    bool synth = false;
    int index = 0;
    int d = 0;
    int synth_n = 500;
    uint64_t seed = 0;
    GeometryFlags geo;
    double sigma_min = 0.02, sigma_max = 80.0, rho = 7.0;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("mi1-targets", "Write intermediate-supervision target tensors");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--layers", layers, "Comma list of 1-based layer indices")->required();
        cmd->add_option("--times", times, "Comma list of listed times (0 = clean end)")->required();
        cmd->add_option("--out-dir", out_dir, "Directory for target_l<k>.tnsr files")->required();
        cmd->add_option("--pairs", pairs_path, "Teacher pair file supplying (z, x)");
        cmd->add_flag("--synth", synth, "Draw the pair from the synthetic teacher instead");
        cmd->add_option("--index", index, "Pair index within the source")->capture_default_str();
        cmd->add_option("--d", d, "Model depth to validate the plan against (0 = skip)")->capture_default_str();
        cmd->add_option("--synth-n", synth_n, "Synthetic source size")->capture_default_str();
        cmd->add_option("--seed", seed, "Synthetic source seed")->capture_default_str();
        cmd->add_option("--sigma-min", sigma_min, "Noise floor")->capture_default_str();
        cmd->add_option("--sigma-max", sigma_max, "Noise ceiling")->capture_default_str();
        cmd->add_option("--rho", rho, "Warp exponent")->capture_default_str();
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        Mi1Plan plan;
        plan.layers = parse_int_list(layers, "layer");
        plan.times = parse_double_list(times, "time");
        plan.validate(d > 0 ? std::optional<int>(d) : std::nullopt);
        if (pairs_path.empty() == !synth)
            throw UsageError("need exactly one of --pairs or --synth");
        std::unique_ptr<PairSource> src;
        if (synth)
            src = std::make_unique<SynthPairSource>(synth_n, seed, geo.image, geo.channels, geo.classes);
        else
            src = std::make_unique<FilePairSource>(pairs_path);
        if (index < 0 || index >= src->size())
            throw UsageError("--index " + std::to_string(index) + " out of range [0," +
                             std::to_string(src->size()) + ")");
        TeacherPair pair = src->at(index);
        ScheduleSpec spec{sigma_min, sigma_max, rho};
        auto targets = mi1_targets<float>(spec, plan, pair.z, pair.x);
        std::filesystem::create_directories(out_dir);
        for (const auto& [layer, tensor] : targets) {
            std::string path = out_dir + "/target_l" + std::to_string(layer) + ".tnsr";
            save_tensor(path, tensor);
            std::cout << path << '\n';
        }
    }
};

// ---- train ----

struct TrainCmd {
    CLI::App* cmd = nullptr;
    std::string method = "get";
    std::string data_path;
    bool synth = false;
    int synth_n = 500;
    int d = 0, w = 0, h = 0;
    GeometryFlags geo;
    double lr = 1e-4, wd = 0.01;
    int batch = 32, epochs = 100;
    int64_t max_steps = -1;
    double ema_decay = 0.9999, cfg_dropout = 0.1;
    uint64_t seed = 0;
    std::string metric_name = "pyramid";
    int metric_scales = 3;
    std::string metric_weights;
    std::string ta_ckpt;
    int ta_layer = 0, student_layer = 0;
    double lambda0 = 1.0, lambda1 = 1.0, lambda2 = 1.0;
    std::string layers, times;
    double sigma_min = 0.02, sigma_max = 80.0, rho = 7.0;
    std::string out_path, curve_path;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("train", "Distill a one-step student from teacher pairs");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--method", method, "Loss family: get, ta or mi1")
            ->check(CLI::IsMember({"get", "ta", "mi1"}))
            ->capture_default_str();
        cmd->add_option("--data", data_path, "Teacher pair file");
        cmd->add_flag("--synth", synth, "Use the synthetic teacher");
        cmd->add_option("--synth-n", synth_n, "Synthetic pair count")->capture_default_str();
        cmd->add_option("--d", d, "Student depth")->required();
        cmd->add_option("--w", w, "Student width")->required();
        cmd->add_option("--h", h, "Student heads (0 = rule)")->capture_default_str();
        cmd->add_option("--lr", lr, "Learning rate")->capture_default_str();
        cmd->add_option("--wd", wd, "Weight decay")->capture_default_str();
        cmd->add_option("--batch", batch, "Batch size")->capture_default_str();
        cmd->add_option("--epochs", epochs, "Epochs over the pair set")->capture_default_str();
        cmd->add_option("--max-steps", max_steps, "Hard step cap (-1 = epochs decide)")->capture_default_str();
        cmd->add_option("--ema-decay", ema_decay, "EMA decay per step")->capture_default_str();
        cmd->add_option("--cfg-dropout", cfg_dropout, "Per-sample class-drop probability")->capture_default_str();
        cmd->add_option("--seed", seed, "Seed for init, shuffling and dropout")->capture_default_str();
        cmd->add_option("--metric", metric_name, "Distance: l1, l2, pyramid, external")
            ->check(CLI::IsMember({"l1", "l2", "pyramid", "external"}))
            ->capture_default_str();
        cmd->add_option("--metric-scales", metric_scales, "Pyramid scale count")->capture_default_str();
        cmd->add_option("--metric-weights", metric_weights, "External metric weights file");
        cmd->add_option("--ta-ckpt", ta_ckpt, "Frozen assistant checkpoint (ta method)");
        cmd->add_option("--ta-layer", ta_layer, "Assistant matched layer (0 = penultimate)")->capture_default_str();
        cmd->add_option("--student-layer", student_layer, "Student matched layer (0 = penultimate)")->capture_default_str();
        cmd->add_option("--lambda0", lambda0, "Weight of the data term")->capture_default_str();
        cmd->add_option("--lambda1", lambda1, "Weight of the assistant output term")->capture_default_str();
        cmd->add_option("--lambda2", lambda2, "Weight of the feature term")->capture_default_str();
        cmd->add_option("--layers", layers, "mi1 layer list");
        cmd->add_option("--times", times, "mi1 listed-time list");
        cmd->add_option("--sigma-min", sigma_min, "Noise floor")->capture_default_str();
        cmd->add_option("--sigma-max", sigma_max, "Noise ceiling")->capture_default_str();
        cmd->add_option("--rho", rho, "Warp exponent")->capture_default_str();
        cmd->add_option("--out", out_path, "Checkpoint to write")->required();
        cmd->add_option("--curve", curve_path, "Loss curve CSV to write");
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        if (data_path.empty() == !synth) throw UsageError("need exactly one of --data or --synth");

        TrainConfig tc;
        tc.lr = lr;
        tc.weight_decay = wd;
        tc.batch = batch;
        tc.epochs = epochs;
        tc.max_steps = max_steps;
        tc.ema_decay = ema_decay;
        tc.cfg_dropout = cfg_dropout;
        tc.seed = seed;
        tc.metric = MetricSpec::parse(metric_name, metric_scales, metric_weights);

        DitConfig cfg = geo.config(d, w, h);
        std::unique_ptr<PairSource> src;
        if (synth)
            src = std::make_unique<SynthPairSource>(synth_n, seed, cfg.image, cfg.in_channels,
                                                    cfg.num_classes);
        else
            src = std::make_unique<FilePairSource>(data_path);

        ModelState<float> init = init_model<float>(cfg, seed);

        TaSetup<float> ta;
        Mi1Plan plan;
        ScheduleSpec sched{sigma_min, sigma_max, rho};
        const TaSetup<float>* ta_ptr = nullptr;
        const Mi1Plan* plan_ptr = nullptr;
        if (method == "ta") {
            if (ta_ckpt.empty()) throw UsageError("--method ta needs --ta-ckpt");
            tc.method = TrainMethod::Ta;
            Checkpoint ck = load_checkpoint(ta_ckpt);
            ModelState<float> ta_model =
                ck.ema ? ema_snapshot(*ck.ema, ck.model.cfg) : std::move(ck.model);
            ta = make_ta_setup(std::move(ta_model), cfg, seed, lambda0, lambda1, lambda2);
            ta.student_layer = student_layer;
            ta.ta_layer = ta_layer;
            ta.validate(cfg);
            ta_ptr = &ta;
        } else if (method == "mi1") {
            if (layers.empty() || times.empty()) throw UsageError("--method mi1 needs --layers and --times");
            tc.method = TrainMethod::Mi1;
            plan.layers = parse_int_list(layers, "layer");
            plan.times = parse_double_list(times, "time");
            plan.validate(cfg.depth);
            plan_ptr = &plan;
        }

        TrainResult<float> result = train(tc, *src, std::move(init), ta_ptr, plan_ptr, sched);

        Checkpoint ck;
        ck.model = std::move(result.model);
        ck.ema = std::move(result.ema);
        if (result.expansion) ck.aux["expansion"] = *result.expansion;
        save_checkpoint(out_path, ck);
        if (!curve_path.empty()) write_text_file(curve_path, curve_to_csv(result.curve));

        if (result.curve.empty()) {
            std::cout << "steps=0 (checkpoint equals initialization)\n";
        } else {
            const CurvePoint& last = result.curve.back();
            std::cout << "steps=" << result.curve.size() << " first_loss=" << fmt(result.curve.front().loss, "%.6g")
                      << " last_loss=" << fmt(last.loss, "%.6g") << " ema_loss=" << fmt(last.ema_loss, "%.6g")
                      << '\n';
        }
        if (result.diverged_at)
            throw NumericError("loss became non-finite at step " + std::to_string(*result.diverged_at) +
                               "; checkpoint holds the last finite weights");
    }
};

// ---- generate ----

struct GenerateCmd {
    CLI::App* cmd = nullptr;
    std::string ckpt, out_path;
    int class_id = 0;
    double cfg_scale = 1.5;
    uint64_t seed = 0;
    bool use_ema = true;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("generate", "One-step sample from a checkpoint");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--ckpt", ckpt, "Checkpoint path")->required();
        cmd->add_option("--class", class_id, "Class id (-1 = unconditioned)")->capture_default_str();
        cmd->add_option("--cfg-scale", cfg_scale, "Guidance strength")->capture_default_str();
        cmd->add_option("--seed", seed, "Noise seed")->capture_default_str();
        cmd->add_option("--out", out_path, "Output tensor file")->required();
        cmd->add_flag("--use-ema,!--no-ema", use_ema, "Sample the EMA shadow (default) or, negated, the live weights")
            ->capture_default_str();
        this->cmd = cmd;
    }

    void run() const {
        Checkpoint ck = load_checkpoint(ckpt);
        ModelState<float> model = (use_ema && ck.ema) ? ema_snapshot(*ck.ema, ck.model.cfg)
                                                      : std::move(ck.model);
        const DitConfig& cfg = model.cfg;
        Tensor<float> z({cfg.in_channels, cfg.image, cfg.image});
        Rng rng = named_stream(seed, "generate.z");
        for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());

        Tensor<float> image;
        Tensor<float> uncond = forward(model, z, std::nullopt).image;
        if (class_id >= 0) {
            Tensor<float> cond = forward(model, z, class_id).image;
            image = cfg_guide(cond, uncond, cfg_scale);
        } else {
            image = uncond;
        }
        save_tensor(out_path, image);

        double mn = image[0], mx = image[0], mean = 0;
        for (int64_t i = 0; i < image.numel(); ++i) {
            mn = std::min(mn, double(image[i]));
            mx = std::max(mx, double(image[i]));
            mean += image[i];
        }
        mean /= double(image.numel());
        std::cout << "wrote " << out_path << " shape=" << image.shape_str() << " min=" << fmt(mn)
                  << " max=" << fmt(mx) << " mean=" << fmt(mean) << '\n';
    }
};

// ---- pareto ----

struct ParetoCmd {
    CLI::App* cmd = nullptr;
    std::string input, gnuplot_path;
    bool bundled = false, csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("pareto", "Non-dominated designs by (params, latency, fid)");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--input", input, "Results CSV");
        cmd->add_flag("--bundled", bundled, "Use the bundled design table");
        cmd->add_flag("--csv", csv, "Emit CSV");
        cmd->add_option("--gnuplot", gnuplot_path, "Also write a whitespace table here");
        this->cmd = cmd;
    }

    void run() const {
        if (input.empty() == !bundled) throw UsageError("need exactly one of --input or --bundled");
        std::vector<DesignPoint> pts = bundled ? bundled_design_points() : load_results_csv(input);
        std::vector<DesignPoint> front = pareto_frontier(pts);
        if (!gnuplot_path.empty()) write_text_file(gnuplot_path, frontier_gnuplot_table(front));
        if (csv) {
            std::cout << results_to_csv(front);
        } else {
            std::printf("%zu of %zu designs on the frontier\n", front.size(), pts.size());
            for (const auto& p : front)
                std::printf("%-20s d=%-3d w=%-4d h=%-3d params=%-9lld latency_s=%-8s fid=%s\n",
                            p.name.c_str(), p.cfg.depth, p.cfg.width, p.cfg.heads,
                            static_cast<long long>(p.params), fmt(p.latency_s).c_str(),
                            fmt(p.fid).c_str());
        }
    }
};

// ---- latency-fit ----

struct LatencyFitCmd {
    CLI::App* cmd = nullptr;
    std::string input;
    bool bundled = false, with_heads = false, csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("latency-fit", "Fit the analytic latency surrogate");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--input", input, "Results CSV");
        cmd->add_flag("--bundled", bundled, "Use the bundled design table");
        cmd->add_flag("--with-heads", with_heads, "Include the d*h*N^2 term");
        cmd->add_flag("--csv", csv, "Emit CSV");
        this->cmd = cmd;
    }

    void run() const {
        if (input.empty() == !bundled) throw UsageError("need exactly one of --input or --bundled");
        std::vector<DesignPoint> pts = bundled ? bundled_design_points() : load_results_csv(input);
        LatencyModel lm = fit_latency(pts, with_heads);
        const char* names[5] = {"const", "d", "d*N*w^2", "d*N^2*w", "d*h*N^2"};
        size_t k = with_heads ? 5 : 4;
        if (csv) {
            std::cout << "term,coefficient\n";
            for (size_t i = 0; i < k; ++i) std::cout << names[i] << ',' << fmt(lm.coeff[i], "%.8g") << '\n';
            std::cout << "spearman," << fmt(lm.spearman, "%.6f") << '\n';
        } else {
            for (size_t i = 0; i < k; ++i)
                std::printf("%-10s %14s\n", names[i], fmt(lm.coeff[i], "%.8g").c_str());
            std::printf("spearman   %14.6f\n", lm.spearman);
            std::printf("%-20s %10s %10s %10s\n", "name", "measured", "predicted", "residual");
            for (size_t i = 0; i < pts.size(); ++i)
                std::printf("%-20s %10.2f %10.2f %10.2f\n", pts[i].name.c_str(), pts[i].latency_s,
                            lm.predict(pts[i].cfg), lm.residuals[i]);
        }
    }
};

// ---- bench ----

struct BenchCmd {
    CLI::App* cmd = nullptr;
    int d = 0, w = 0, h = 0;
    GeometryFlags geo;
    int iters = 10, warmup = 2;
    uint64_t seed = 0;
    bool csv = false;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("bench", "Time single-image forward passes");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--d", d, "Depth")->required();
        cmd->add_option("--w", w, "Width")->required();
        cmd->add_option("--h", h, "Heads (0 = rule)")->capture_default_str();
        cmd->add_option("--iters", iters, "Timed iterations")->capture_default_str();
        cmd->add_option("--warmup", warmup, "Untimed iterations")->capture_default_str();
        cmd->add_option("--seed", seed, "Weight/noise seed")->capture_default_str();
        cmd->add_flag("--csv", csv, "Emit CSV");
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        if (iters < 1 || warmup < 0) throw UsageError("need --iters >= 1 and --warmup >= 0");
        DitConfig cfg = geo.config(d, w, h);
        ModelState<float> model = init_model<float>(cfg, seed);
        Tensor<float> z({cfg.in_channels, cfg.image, cfg.image});
        Rng rng = named_stream(seed, "bench.z");
        for (int64_t i = 0; i < z.numel(); ++i) z[i] = static_cast<float>(rng.normal());

        volatile float sink = 0;
        for (int i = 0; i < warmup; ++i) sink += forward(model, z, 0).image[0];
        double total = 0, best = 1e300;
        for (int i = 0; i < iters; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            sink += forward(model, z, 0).image[0];
            auto t1 = std::chrono::steady_clock::now();
            double dt = std::chrono::duration<double>(t1 - t0).count();
            total += dt;
            best = std::min(best, dt);
        }
        (void)sink;
        double mean = total / iters;
        int64_t flops = count_flops(cfg);
        if (csv) {
            std::cout << "d,w,h,params,flops,mean_s,best_s,gflops_per_s\n";
            std::cout << cfg.depth << ',' << cfg.width << ',' << cfg.heads << ','
                      << count_params(cfg).total << ',' << flops << ',' << fmt(mean, "%.6g") << ','
                      << fmt(best, "%.6g") << ',' << fmt(double(flops) / mean / 1e9, "%.4g") << '\n';
        } else {
            std::printf("architecture      %s\n", cfg.describe().c_str());
            std::printf("params            %lld\n", static_cast<long long>(count_params(cfg).total));
            std::printf("flops/forward     %lld\n", static_cast<long long>(flops));
            std::printf("mean latency      %.6f s\n", mean);
            std::printf("best latency      %.6f s\n", best);
            std::printf("throughput        %.3f gflop/s\n", double(flops) / mean / 1e9);
        }
    }
};

// ---- make-pairs ----

struct MakePairsCmd {
    CLI::App* cmd = nullptr;
    std::string out_path;
    int n = 500;
    uint64_t seed = 0;
    GeometryFlags geo;

    void attach(CLI::App& app) {
        auto* cmd = app.add_subcommand("make-pairs", "Write a synthetic teacher-pair file");
        cmd->set_help_flag("--help", "Print help and exit");
        cmd->add_option("--out", out_path, "Pair file to write")->required();
        cmd->add_option("--n", n, "Pair count")->capture_default_str();
        cmd->add_option("--seed", seed, "Generator seed")->capture_default_str();
        geo.attach(cmd);
        this->cmd = cmd;
    }

    void run() const {
        SynthPairSource src(n, seed, geo.image, geo.channels, geo.classes);
        std::vector<TeacherPair> pairs;
        pairs.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < src.size(); ++i) pairs.push_back(src.at(i));
        write_teacher_pairs(out_path, pairs);
        std::cout << "wrote " << out_path << " pairs=" << n << " image=" << geo.channels << 'x'
                  << geo.image << 'x' << geo.image << '\n';
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"ditforge: design-space compiler and distillation workbench for tiny"
                 " diffusion transformers"};
    app.require_subcommand(1);
    app.set_help_flag("--help", "Print help and exit");
    app.set_config("--config", "", "Read options from a key=value file (flags given on the "
                                   "command line win)");
    app.get_formatter()->column_width(34);

    PlanCmd plan_cmd;
    ParamsCmd params_cmd;
    ScheduleCmd schedule_cmd;
    Mi1TargetsCmd mi1_cmd;
    TrainCmd train_cmd;
    GenerateCmd generate_cmd;
    ParetoCmd pareto_cmd;
    LatencyFitCmd fit_cmd;
    BenchCmd bench_cmd;
    MakePairsCmd pairs_cmd;
    plan_cmd.attach(app);
    params_cmd.attach(app);
    schedule_cmd.attach(app);
    mi1_cmd.attach(app);
    train_cmd.attach(app);
    generate_cmd.attach(app);
    pareto_cmd.attach(app);
    fit_cmd.attach(app);
    bench_cmd.attach(app);
    pairs_cmd.attach(app);

    try {
        app.parse(argc, argv);
        print_resolved(app);
        if (plan_cmd.cmd->parsed()) plan_cmd.run();
        else if (params_cmd.cmd->parsed()) params_cmd.run();
        else if (schedule_cmd.cmd->parsed()) schedule_cmd.run();
        else if (mi1_cmd.cmd->parsed()) mi1_cmd.run();
        else if (train_cmd.cmd->parsed()) train_cmd.run();
        else if (generate_cmd.cmd->parsed()) generate_cmd.run();
        else if (pareto_cmd.cmd->parsed()) pareto_cmd.run();
        else if (fit_cmd.cmd->parsed()) fit_cmd.run();
        else if (bench_cmd.cmd->parsed()) bench_cmd.run();
        else if (pairs_cmd.cmd->parsed()) pairs_cmd.run();
        return 0;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const PlanError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}
