#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mtpose/checkpoint.hpp"
#include "mtpose/config.hpp"
#include "mtpose/data_synth.hpp"
#include "mtpose/grad_suite.hpp"
#include "mtpose/network.hpp"
#include "mtpose/training.hpp"

namespace mtpose {

// Exit statuses shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // a check suite failed or training aborted
inline constexpr int kExitUsage = 2;        // invalid flags, config or arguments
inline constexpr int kExitIo = 3;           // unreadable/corrupt files

// ---------------------------------------------------------------- gradcheck

inline int cmd_gradcheck(const GradSuiteOptions& opt, std::ostream& out) {
    const auto entries = run_grad_suite(opt);
    for (const auto& e : entries) {
        out << (e.report.pass ? "PASS " : "FAIL ") << e.op << " [" << e.case_label << "] max_rel_error=" << e.report.max_rel_error
            << " coords=" << e.report.coords_checked;
        if (e.report.coords_skipped) out << " nonsmooth_skipped=" << e.report.coords_skipped;
        if (!e.report.pass) out << " worst: " << e.report.worst << (e.report.message.empty() ? "" : " (" + e.report.message + ")");
        out << "\n";
    }
    const bool ok = grad_suite_passed(entries);
    out << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (" << entries.size() << " checks)\n";
    return ok ? kExitOk : kExitCheckFailed;
}

// --------------------------------------------------------------------- gen

inline std::vector<std::string> figure_spec_keys() {
    return {"image_size", "limb_width_px", "figure_height_px_min", "figure_height_px_max", "max_yaw_deg",
            "max_roll_deg", "noise_level", "max_retries"};
}
inline std::vector<std::string> action_spec_keys() { return {"actions", "frames", "separation", "idle_jitter_deg"}; }

struct GenOptions {
    std::string kind = "pose";  // pose | action
    int count = 0;
    std::uint64_t seed = 1;
    std::string out;
    KeyValueConfig spec;      // figure/action spec overrides
    std::string export_text;  // optional text dump of poses (pose kind)
};

inline int cmd_gen(const GenOptions& o, std::ostream& log) {
    if (o.out.empty()) throw std::invalid_argument("gen: --out is required");
    if (o.count <= 0) throw std::invalid_argument("gen: --count must be > 0");
    if (!o.export_text.empty() && o.kind != "pose") throw std::invalid_argument("gen: --export-text only applies to pose datasets");
    auto known = figure_spec_keys();
    for (const auto& k : action_spec_keys()) known.push_back(k);
    const auto unknown = o.spec.unknown_keys(known);
    if (!unknown.empty()) throw std::invalid_argument("gen: unknown spec key '" + unknown.front() + "'");
    const auto figure = figure_spec_from_kv(o.spec);
    std::string echo = o.spec.to_string();
    std::replace(echo.begin(), echo.end(), '\n', ';');
    if (o.kind == "pose") {
        const auto ds = generate_pose_dataset(figure, o.count, o.seed);
        save_dataset(ds, o.out, echo);
        if (!o.export_text.empty()) {
            std::ofstream t(o.export_text);
            if (!t) throw std::runtime_error("cannot write '" + o.export_text + "'");
            export_poses_text(ds, t);
        }
        log << "wrote " << ds.size() << " pose samples to " << o.out << "\n";
    } else if (o.kind == "action") {
        const auto ds = generate_action_dataset(figure, action_spec_from_kv(o.spec), o.count, o.seed);
        save_dataset(ds, o.out, echo);
        log << "wrote " << ds.size() << " clips of " << ds.frames << " frames to " << o.out << "\n";
    } else {
        throw std::invalid_argument("gen: --kind must be pose or action, got '" + o.kind + "'");
    }
    return kExitOk;
}

// ------------------------------------------------------------------- train

/// Keys a training config may hold besides network and optimisation keys.
inline std::vector<std::string> train_data_keys() {
    return {"pose_data", "action_data", "pose_val_data", "action_val_data", "pose_samples", "action_clips",
            "pose_val_samples", "action_val_clips", "data_seed"};
}

inline std::vector<std::string> train_command_keys() {
    auto keys = TrainConfig::keys();
    for (const auto& k : NetworkConfig::keys()) keys.push_back(k);
    for (const auto& k : train_data_keys()) keys.push_back(k);
    return keys;
}

/// Datasets named in a training config, or generated from data_seed when
/// no file is given.
struct TrainDatasets {
    std::vector<PoseDataset> pose;
    std::optional<ActionDataset> actions;
    std::optional<PoseDataset> pose_val;
    std::optional<ActionDataset> action_val;

    TrainData view() const {
        TrainData d;
        for (const auto& p : pose) d.pose_sources.push_back(&p);
        if (actions) d.actions = &*actions;
        if (pose_val) d.pose_val = &*pose_val;
        if (action_val) d.action_val = &*action_val;
        return d;
    }
};

inline TrainDatasets load_train_datasets(const KeyValueConfig& kv, const TrainConfig& tc) {
    TrainDatasets ds;
    const auto seed = static_cast<std::uint64_t>(kv.get_int("data_seed", 1000));
    const SyntheticFigureSpec fig;
    const SyntheticActionSpec act;
    if (kv.has("pose_data")) {
        std::stringstream ss(kv.get("pose_data", ""));
        std::string path;
        while (std::getline(ss, path, ','))
            if (!path.empty()) ds.pose.push_back(load_pose_dataset(path));
    } else if (tc.pose_iterations > 0 || tc.joint_iterations > 0) {
        ds.pose.push_back(generate_pose_dataset(fig, kv.get_int("pose_samples", 2000), seed));
    }
    if (kv.has("action_data")) {
        ds.actions = load_action_dataset(kv.get("action_data", ""));
    } else if (tc.action_iterations > 0 || tc.joint_iterations > 0) {
        ds.actions = generate_action_dataset(fig, act, kv.get_int("action_clips", 1000), seed + 1);
    }
    if (kv.has("pose_val_data")) {
        ds.pose_val = load_pose_dataset(kv.get("pose_val_data", ""));
    } else if (kv.get_int("pose_val_samples", 0) > 0) {
        ds.pose_val = generate_pose_dataset(fig, kv.get_int("pose_val_samples", 0), seed + 2);
    }
    if (kv.has("action_val_data")) {
        ds.action_val = load_action_dataset(kv.get("action_val_data", ""));
    } else if (kv.get_int("action_val_clips", 0) > 0) {
        ds.action_val = generate_action_dataset(fig, act, kv.get_int("action_val_clips", 0), seed + 3);
    }
    return ds;
}

struct TrainCommandOptions {
    KeyValueConfig config;  // file contents with flag overrides applied
    std::string out_dir;
    std::string resume;  // checkpoint path
};

inline int cmd_train(const TrainCommandOptions& o, std::ostream& log) {
    if (o.out_dir.empty()) throw std::invalid_argument("train: --out is required");
    const auto unknown = o.config.unknown_keys(train_command_keys());
    if (!unknown.empty()) throw std::invalid_argument("train: unknown config key '" + unknown.front() + "'");
    auto tc = TrainConfig::from_kv(o.config);
    tc.out_dir = o.out_dir;
    tc.validate();
    const auto net_cfg = NetworkConfig::from_kv(o.config);
    net_cfg.validate();
    std::filesystem::create_directories(o.out_dir);
    {
        std::ofstream echo(std::filesystem::path(o.out_dir) / "config.txt");
        echo << o.config.to_string();
    }
    const auto data = load_train_datasets(o.config, tc);
    Network<float> net(net_cfg, tc.seed);
    TrainState state;
    state.optimizer = Optimizer(tc.optimizer);
    if (!o.resume.empty()) {
        restore_training(net, state, load_checkpoint(o.resume));
        log << "resuming at iteration " << state.iteration << "\n";
    }
    TrainLog tlog((std::filesystem::path(o.out_dir) / "train.log").string());
    const bool ok = train(net, data.view(), tc, state, tlog);
    if (!ok) {
        log << "training aborted: " << state.abort_reason << "\n";
        return kExitCheckFailed;
    }
    log << "trained to iteration " << state.iteration << "; checkpoint " << (std::filesystem::path(o.out_dir) / "checkpoint.prkt").string()
        << "\n";
    return kExitOk;
}

// -------------------------------------------------------------------- eval

struct EvalOptions {
    std::string checkpoint;
    std::string data;
    ClipMode mode = ClipMode::single;
};

struct EvalResult {
    std::optional<PoseMetrics> pose;
    std::optional<double> single_clip_accuracy;
    std::optional<double> multi_clip_accuracy;
};

inline EvalResult evaluate_checkpoint(const Network<float>& net, const std::string& data_path, ClipMode mode) {
    EvalResult r;
    const auto kind = dataset_kind(data_path);
    if (kind == "pose") {
        const auto ds = load_pose_dataset(data_path);
        if (ds.size() == 0) throw std::invalid_argument("eval: empty dataset " + data_path);
        r.pose = evaluate_pose_model(net, ds);
    } else {
        const auto ds = load_action_dataset(data_path);
        if (ds.size() == 0) throw std::invalid_argument("eval: empty dataset " + data_path);
        r.single_clip_accuracy = evaluate_action_model(net, ds, ClipMode::single);
        if (mode == ClipMode::multi) r.multi_clip_accuracy = evaluate_action_model(net, ds, ClipMode::multi);
    }
    return r;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out) {
    if (o.checkpoint.empty() || o.data.empty()) throw std::invalid_argument("eval: --checkpoint and --data are required");
    const auto net = network_from_checkpoint(load_checkpoint(o.checkpoint));
    const auto r = evaluate_checkpoint(net, o.data, o.mode);
    out.precision(6);
    if (r.pose) out << "pckh=" << r.pose->pckh << " mpjpe_mm=" << r.pose->mpjpe_mm << "\n";
    if (r.single_clip_accuracy) out << "accuracy_single_clip=" << *r.single_clip_accuracy << "\n";
    if (r.multi_clip_accuracy) out << "accuracy_multi_clip=" << *r.multi_clip_accuracy << "\n";
    return kExitOk;
}

// ------------------------------------------------------------------- bench

struct BenchRecord {
    int pyramid = 0;
    std::size_t parameters = 0;
    double fps = 0;       // single-frame images per second
    double clip_fps = 0;  // frames per second in clip mode, 0 if not measured
    std::optional<double> pckh, mpjpe_mm, action_accuracy;
};

struct BenchReport {
    int batch = 0;
    int repetitions = 0;
    int warmup = 0;
    int workers = 1;
    std::vector<BenchRecord> records;

    nlohmann::json to_json() const {
        nlohmann::json j{{"batch", batch}, {"repetitions", repetitions}, {"warmup", warmup}, {"workers", workers}};
        j["records"] = nlohmann::json::array();
        for (const auto& r : records) {
            nlohmann::json e{{"pyramid", r.pyramid}, {"parameters", r.parameters}, {"fps", r.fps}};
            if (r.clip_fps > 0) e["clip_fps"] = r.clip_fps;
            if (r.pckh) e["pckh"] = *r.pckh;
            if (r.mpjpe_mm) e["mpjpe_mm"] = *r.mpjpe_mm;
            if (r.action_accuracy) e["action_accuracy"] = *r.action_accuracy;
            j["records"].push_back(e);
        }
        return j;
    }
};

struct BenchOptions {
    std::vector<int> cut_points;  // empty = every pyramid
    int batch = 16;
    int repetitions = 20;
    int warmup = 5;
    int workers = 1;
    const PoseDataset* pose_data = nullptr;
    const ActionDataset* action_data = nullptr;
};

/// Median wall time of `reps` calls after `warmup` untimed ones.
template <typename Fn>
double median_seconds(Fn&& fn, int warmup, int reps) {
    for (int i = 0; i < warmup; ++i) fn();
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
        const auto a = std::chrono::steady_clock::now();
        fn();
        t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
    }
    std::sort(t.begin(), t.end());
    return t.size() % 2 ? t[t.size() / 2] : 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
}

inline BenchReport run_bench(const Network<float>& net, const BenchOptions& o) {
    if (o.batch < 1) throw std::invalid_argument("bench: --batch must be >= 1");
    if (o.repetitions < 20) throw std::invalid_argument("bench: --reps must be >= 20");
    if (o.workers != 1) throw std::invalid_argument("bench: kernels are single-threaded; --workers must be 1");
    std::vector<int> cuts = o.cut_points;
    if (cuts.empty())
        for (int p = 1; p <= net.pyramids_built(); ++p) cuts.push_back(p);
    for (int p : cuts) {
        if (p < 1 || p > net.pyramids_built()) {
            throw std::invalid_argument("bench: cut point " + std::to_string(p) + " outside [1," +
                                        std::to_string(net.pyramids_built()) + "]");
        }
    }
    const auto& cfg = net.config();
    std::mt19937_64 rng(12345);
    const auto images = Tensor<float>::uniform({o.batch, cfg.input_height, cfg.input_width, 3}, 0.0f, 1.0f, rng);
    const auto clip = Tensor<float>::uniform({cfg.clip_length, cfg.input_height, cfg.input_width, 3}, 0.0f, 1.0f, rng);
    BenchReport rep{o.batch, o.repetitions, o.warmup, o.workers, {}};
    for (int p : cuts) {
        const auto cut = cut_network(net, p);
        BenchRecord r;
        r.pyramid = p;
        r.parameters = count_parameters(cut);
        {
            NoGradGuard g;
            r.fps = o.batch / median_seconds([&] { (void)cut.forward(images); }, o.warmup, o.repetitions);
            if (cut.blocks().back().has_action) {
                ForwardOptions fo;
                fo.video = true;
                r.clip_fps = cfg.clip_length / median_seconds([&] { (void)cut.forward(clip, fo); }, o.warmup, o.repetitions);
            }
        }
        if (o.pose_data) {
            const auto m = evaluate_pose_model(cut, *o.pose_data);
            r.pckh = m.pckh;
            r.mpjpe_mm = m.mpjpe_mm;
        }
        if (o.action_data && cut.blocks().back().has_action) {
            r.action_accuracy = evaluate_action_model(cut, *o.action_data, ClipMode::single);
        }
        rep.records.push_back(r);
    }
    return rep;
}

inline void print_bench(const BenchReport& rep, std::ostream& out) {
    out << "batch=" << rep.batch << " reps=" << rep.repetitions << " warmup=" << rep.warmup << " workers=" << rep.workers << "\n";
    out << "pyramid  parameters       fps  clip_fps      pckh  mpjpe_mm  accuracy\n";
    for (const auto& r : rep.records) {
        char line[160];
        std::snprintf(line, sizeof line, "%7d  %10zu  %8.1f  %8.1f  %8s  %8s  %8s\n", r.pyramid, r.parameters, r.fps, r.clip_fps,
                      r.pckh ? std::to_string(*r.pckh).substr(0, 7).c_str() : "-",
                      r.mpjpe_mm ? std::to_string(*r.mpjpe_mm).substr(0, 7).c_str() : "-",
                      r.action_accuracy ? std::to_string(*r.action_accuracy).substr(0, 7).c_str() : "-");
        out << line;
    }
}

// --------------------------------------------------------------------- cut

inline int cmd_cut(const std::string& checkpoint, int pyramid, const std::string& out_path, std::ostream& log) {
    if (checkpoint.empty() || out_path.empty()) throw std::invalid_argument("cut: --checkpoint and --out are required");
    const auto net = network_from_checkpoint(load_checkpoint(checkpoint));
    const auto cut = cut_network(net, pyramid);
    save_checkpoint(network_checkpoint(cut), out_path);
    log << "cut at pyramid " << pyramid << ": " << count_parameters(cut) << " of " << count_parameters(net)
        << " parameters, written to " << out_path << "\n";
    return kExitOk;
}

}  // namespace mtpose
