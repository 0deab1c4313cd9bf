#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtpose/commands.hpp"

namespace {

using namespace mtpose;

KeyValueConfig load_optional(const std::string& path) { return path.empty() ? KeyValueConfig{} : KeyValueConfig::load(path); }

ClipMode parse_mode(const std::string& m) {
    if (m == "single") return ClipMode::single;
    if (m == "multi") return ClipMode::multi;
    throw std::invalid_argument("--mode must be single or multi, got '" + m + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task pose estimation and action recognition toolkit"};
    app.require_subcommand(1);

    std::string config, out, checkpoint, data, action_data, mode = "single", resume, kind = "pose", export_text;
    std::optional<std::uint64_t> seed;
    std::vector<int> cuts;
    int batch = 16, reps = 20, workers = 1, count = 0, cut_point = 0;
    bool inject_bug = false;

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    gradcheck->add_option("--seed", seed, "fixture seed");
    gradcheck->add_flag("--inject-bug", inject_bug)->group("");

    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset file");
    gen->add_option("--kind", kind, "pose or action")->check(CLI::IsMember({"pose", "action"}));
    gen->add_option("--count", count, "number of samples or clips")->required();
    gen->add_option("--seed", seed, "generator seed");
    gen->add_option("--out", out, "output dataset path")->required();
    gen->add_option("--config", config, "figure/action spec (key=value)");
    gen->add_option("--export-text", export_text, "also dump poses as text");

    auto* train = app.add_subcommand("train", "run the staged training protocol");
    train->add_option("--config", config, "training config (key=value)");
    train->add_option("--seed", seed, "overrides config seed");
    train->add_option("--out", out, "output directory")->required();
    train->add_option("--resume", resume, "checkpoint to resume from");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--data", data, "pose or action dataset")->required();
    eval->add_option("--mode", mode, "single or multi clip")->check(CLI::IsMember({"single", "multi"}));

    auto* bench = app.add_subcommand("bench", "throughput and accuracy per cut point");
    bench->add_option("--checkpoint", checkpoint)->required();
    bench->add_option("--cut", cuts, "pyramid indices (default: all)")->delimiter(',');
    bench->add_option("--batch", batch, "images per forward pass");
    bench->add_option("--reps", reps, "timed repetitions (>= 20)");
    bench->add_option("--workers", workers, "worker threads (only 1 supported)");
    bench->add_option("--data", data, "pose dataset for PCKh/MPJPE");
    bench->add_option("--action-data", action_data, "action dataset for accuracy");
    bench->add_option("--out", out, "write the report as JSON");

    auto* cut = app.add_subcommand("cut", "keep the first pyramids of a checkpoint");
    cut->add_option("--checkpoint", checkpoint)->required();
    cut->add_option("--cut", cut_point, "last pyramid kept")->required();
    cut->add_option("--out", out, "output checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (gradcheck->parsed()) {
            GradSuiteOptions o;
            if (seed) o.seed = *seed;
            o.inject_bug = inject_bug;
            return cmd_gradcheck(o, std::cout);
        }
        if (gen->parsed()) {
            GenOptions o;
            o.kind = kind;
            o.count = count;
            if (seed) o.seed = *seed;
            o.out = out;
            o.spec = load_optional(config);
            o.export_text = export_text;
            return cmd_gen(o, std::cout);
        }
        if (train->parsed()) {
            TrainCommandOptions o;
            o.config = load_optional(config);
            if (seed) o.config.set("seed", std::to_string(*seed));
            o.out_dir = out;
            o.resume = resume;
            return cmd_train(o, std::cout);
        }
        if (eval->parsed()) return cmd_eval({checkpoint, data, parse_mode(mode)}, std::cout);
        if (bench->parsed()) {
            const auto net = network_from_checkpoint(load_checkpoint(checkpoint));
            std::optional<PoseDataset> pose;
            std::optional<ActionDataset> act;
            if (!data.empty()) pose = load_pose_dataset(data);
            if (!action_data.empty()) act = load_action_dataset(action_data);
            BenchOptions o;
            o.cut_points = cuts;
            o.batch = batch;
            o.repetitions = reps;
            o.workers = workers;
            o.pose_data = pose ? &*pose : nullptr;
            o.action_data = act ? &*act : nullptr;
            const auto rep = run_bench(net, o);
            print_bench(rep, std::cout);
            if (!out.empty()) {
                std::ofstream f(out);
                if (!f) throw std::runtime_error("cannot write '" + out + "'");
                f << rep.to_json().dump(2) << "\n";
            }
            return kExitOk;
        }
        if (cut->parsed()) return cmd_cut(checkpoint, cut_point, out, std::cout);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitUsage;
}
