#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mtpose/config.hpp"
#include "mtpose/io.hpp"

namespace mtpose {

// Stick-figure skeleton with 8 joints. The head is drawn as a disc above
// the neck and only sets the PCKh reference length.
enum Joint : int { pelvis = 0, neck, l_elbow, l_hand, r_elbow, r_hand, l_foot, r_foot };

inline constexpr int kFigureJoints = 8;

using Vec3 = std::array<double, 3>;

/// Skeleton topology, proportions and rendering parameters.
struct SyntheticFigureSpec {
    int image_size = 64;
    std::vector<int> parent{-1, 0, 1, 2, 1, 4, 0, 0};
    // bone length to the parent joint, millimetres
    std::vector<double> bone_length_mm{0, 520, 300, 330, 300, 330, 900, 900};
    std::vector<std::array<int, 2>> flip_pairs{{l_elbow, r_elbow}, {l_hand, r_hand}, {l_foot, r_foot}};
    double head_length_mm = 290;   // neck to top of head; PCKh reference
    double limb_width_px = 2.6;
    double torso_width_px = 3.6;
    double figure_height_px_min = 38;  // pelvis-to-head-top span before pose changes
    double figure_height_px_max = 50;
    double max_yaw_deg = 60;
    double max_roll_deg = 25;
    double camera_distance_mm = 4000;
    double depth_range_mm = 2000;
    double noise_level = 0.25;
    int margin_px = 2;
    int max_retries = 50;

    int joints() const { return static_cast<int>(parent.size()); }

    void validate() const {
        if (parent.size() != bone_length_mm.size()) throw std::invalid_argument("figure spec: parent/bone size mismatch");
        if (parent.empty() || parent[0] != -1) throw std::invalid_argument("figure spec: joint 0 must be the root");
        for (std::size_t j = 1; j < parent.size(); ++j) {
            if (parent[j] < 0 || parent[j] >= static_cast<int>(j)) {
                throw std::invalid_argument("figure spec: joint " + std::to_string(j) + " must have an earlier parent");
            }
            if (!(bone_length_mm[j] > 0)) throw std::invalid_argument("figure spec: bone lengths must be positive");
        }
        if (image_size < 8) throw std::invalid_argument("figure spec: image_size must be >= 8");
        if (!(figure_height_px_min > 0) || figure_height_px_max < figure_height_px_min) {
            throw std::invalid_argument("figure spec: bad figure height range");
        }
    }
};

/// Class-specific motion families: one limb is raised and swings while the
/// others idle near rest.
struct SyntheticActionSpec {
    int actions = 4;          // left arm, right arm, left leg, right leg
    int frames = 8;           // frames per video
    double separation = 1.0;  // scales the raised-limb amplitude
    double idle_jitter_deg = 6;
    double max_yaw_deg = 45;
    double max_roll_deg = 10;

    void validate() const {
        if (actions < 1 || actions > 4) throw std::invalid_argument("action spec: actions must be in [1,4]");
        if (frames < 2) throw std::invalid_argument("action spec: frames must be >= 2");
        if (!(separation > 0)) throw std::invalid_argument("action spec: separation must be positive");
    }
};

/// Limb directions in the figure frame (x right, y down, z away from the
/// camera), angles in degrees. theta is measured from straight down in the
/// frontal plane, towards the figure's own side; phi tilts out of it.
struct FigurePose {
    double arm_theta[2] = {25, 25}, arm_phi[2] = {0, 0};
    double forearm_bend[2] = {10, 10};
    double leg_theta[2] = {8, 8}, leg_phi[2] = {0, 0};
    double spine_lean = 0;  // degrees towards +x
};

/// Global placement: rotation about the vertical axis (yaw), in-plane roll,
/// pixel scale, pelvis pixel position, and depth of the pelvis.
struct Placement {
    double yaw_deg = 0, roll_deg = 0;
    double px_per_mm = 0.025;
    double cx = 32, cy = 32;
    double root_depth_mm = 4000;
};

/// One rendered frame with normalised ground truth.
struct RenderedFrame {
    std::vector<float> image;                 // [H, W, 3]
    std::vector<std::array<float, 3>> joints;  // normalised (x, y, z)
    std::vector<float> confidence;            // 1 in-crop, 0 outside
    float head_size = 0;                      // normalised (fraction of image width)
    float mm_per_pixel = 0;
};

namespace detail {

inline double deg(double d) { return d * std::numbers::pi / 180.0; }

inline Vec3 limb_dir(double theta_deg, double phi_deg, double side) {
    const double t = deg(theta_deg), p = deg(phi_deg);
    return {side * std::sin(t) * std::cos(p), std::cos(t) * std::cos(p), std::sin(p)};
}

inline Vec3 add3(const Vec3& a, const Vec3& b, double s = 1.0) { return {a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]}; }

/// Figure-frame joint positions in millimetres, pelvis at the origin.
inline std::vector<Vec3> figure_joints_mm(const SyntheticFigureSpec& spec, const FigurePose& pose) {
    std::vector<Vec3> j(spec.joints(), Vec3{0, 0, 0});
    const double lean = deg(pose.spine_lean);
    const Vec3 up{std::sin(lean), -std::cos(lean), 0};
    j[neck] = add3(j[pelvis], up, spec.bone_length_mm[neck]);
    // left limbs on +x, right limbs on -x
    for (int s = 0; s < 2; ++s) {
        const double side = s == 0 ? 1.0 : -1.0;
        const int elbow = s == 0 ? l_elbow : r_elbow;
        const int hand = s == 0 ? l_hand : r_hand;
        const int foot = s == 0 ? l_foot : r_foot;
        j[elbow] = add3(j[neck], limb_dir(pose.arm_theta[s], pose.arm_phi[s], side), spec.bone_length_mm[elbow]);
        j[hand] = add3(j[elbow], limb_dir(pose.arm_theta[s] + pose.forearm_bend[s], pose.arm_phi[s], side),
                       spec.bone_length_mm[hand]);
        j[foot] = add3(j[pelvis], limb_dir(pose.leg_theta[s], pose.leg_phi[s], side), spec.bone_length_mm[foot]);
    }
    return j;
}

/// Rotates figure-frame points (yaw about y, then roll about z) and maps to
/// pixel (u, v) and depth in mm.
inline Vec3 project(const Vec3& p, const Placement& pl) {
    const double cy = std::cos(deg(pl.yaw_deg)), sy = std::sin(deg(pl.yaw_deg));
    const double x1 = cy * p[0] + sy * p[2];
    const double z1 = -sy * p[0] + cy * p[2];
    const double cr = std::cos(deg(pl.roll_deg)), sr = std::sin(deg(pl.roll_deg));
    const double x2 = cr * x1 - sr * p[1];
    const double y2 = sr * x1 + cr * p[1];
    return {pl.cx + x2 * pl.px_per_mm, pl.cy + y2 * pl.px_per_mm, pl.root_depth_mm + z1};
}

/// Smooth value noise: a coarse random grid bilinearly upsampled, plus
/// fine per-pixel noise.
inline void textured_background(std::vector<float>& img, int size, double level, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const int g = 5;
    std::vector<double> grid(static_cast<std::size_t>(g) * g * 3);
    const double base[3] = {0.35 + 0.3 * u01(rng), 0.35 + 0.3 * u01(rng), 0.35 + 0.3 * u01(rng)};
    for (auto& v : grid) v = u01(rng) - 0.5;
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const double gy = (r + 0.5) / size * (g - 1), gx = (c + 0.5) / size * (g - 1);
            const int y0 = std::min(static_cast<int>(gy), g - 2), x0 = std::min(static_cast<int>(gx), g - 2);
            const double fy = gy - y0, fx = gx - x0;
            for (int ch = 0; ch < 3; ++ch) {
                auto at = [&](int y, int x) { return grid[(static_cast<std::size_t>(y) * g + x) * 3 + ch]; };
                const double smooth = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                                      fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                const double v = base[ch] + level * (smooth + 0.5 * (u01(rng) - 0.5));
                img[(static_cast<std::size_t>(r) * size + c) * 3 + ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
}

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qx = ax + t * dx - px, qy = ay + t * dy - py;
    return std::sqrt(qx * qx + qy * qy);
}

/// Anti-aliased capsule from a to b (pixel coordinates, where pixel (c, r)
/// has its centre at (c + 0.5, r + 0.5)), alpha-blended in place.
inline void draw_capsule(std::vector<float>& img, int size, double ax, double ay, double bx, double by, double width,
                         const std::array<float, 3>& color) {
    const double half = width / 2;
    const int c0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - half - 1)));
    const int c1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ax, bx) + half + 1)));
    const int r0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - half - 1)));
    const int r1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(ay, by) + half + 1)));
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
            const double d = segment_distance(c + 0.5, r + 0.5, ax, ay, bx, by);
            const double alpha = std::clamp(half + 0.5 - d, 0.0, 1.0);
            if (alpha <= 0) continue;
            float* px = &img[(static_cast<std::size_t>(r) * size + c) * 3];
            for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<float>((1 - alpha) * px[ch] + alpha * color[ch]);
        }
}

// one colour per bone (indexed by child joint) plus the head
inline const std::array<std::array<float, 3>, 9>& palette() {
    static const std::array<std::array<float, 3>, 9> p{{
        {1.00f, 1.00f, 1.00f},  // unused (root)
        {0.95f, 0.95f, 0.20f},  // torso
        {0.95f, 0.15f, 0.15f},  // left upper arm
        {1.00f, 0.60f, 0.10f},  // left forearm
        {0.15f, 0.35f, 0.95f},  // right upper arm
        {0.10f, 0.85f, 0.95f},  // right forearm
        {0.85f, 0.15f, 0.85f},  // left leg
        {0.15f, 0.85f, 0.25f},  // right leg
        {0.98f, 0.85f, 0.70f},  // head
    }};
    return p;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace detail

inline std::vector<float> make_background(const SyntheticFigureSpec& spec, std::mt19937_64& rng) {
    std::vector<float> bg(static_cast<std::size_t>(spec.image_size) * spec.image_size * 3, 0.0f);
    detail::textured_background(bg, spec.image_size, spec.noise_level, rng);
    return bg;
}

/// Renders one frame over `background` ([H, W, 3]). Ground truth is defined
/// by the same projected joint positions the renderer draws from.
inline RenderedFrame render_figure(const SyntheticFigureSpec& spec, const FigurePose& pose, const Placement& pl,
                                   const std::vector<float>& background) {
    const int size = spec.image_size;
    if (background.size() != static_cast<std::size_t>(size) * size * 3) {
        throw std::invalid_argument("render_figure: background does not match image_size " + std::to_string(size));
    }
    RenderedFrame f;
    f.image = background;

    const auto mm = detail::figure_joints_mm(spec, pose);
    std::vector<Vec3> px(mm.size());
    for (std::size_t j = 0; j < mm.size(); ++j) px[j] = detail::project(mm[j], pl);

    const double lean = detail::deg(pose.spine_lean);
    const Vec3 up{std::sin(lean), -std::cos(lean), 0};
    const Vec3 head_centre = detail::project(detail::add3(mm[neck], up, spec.head_length_mm * 0.55), pl);
    const double head_radius = spec.head_length_mm * 0.4 * pl.px_per_mm;

    // painter's order: farthest primitive first
    struct Item {
        double depth;
        int kind;  // joint index of a bone, or -1 for the head
    };
    std::vector<Item> items;
    for (int j = 1; j < spec.joints(); ++j) items.push_back({0.5 * (px[j][2] + px[spec.parent[j]][2]), j});
    items.push_back({head_centre[2], -1});
    std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.depth > b.depth; });
    const auto& pal = detail::palette();
    for (const auto& it : items) {
        if (it.kind < 0) {
            detail::draw_capsule(f.image, size, head_centre[0], head_centre[1], head_centre[0], head_centre[1],
                                 2 * head_radius, pal[8]);
            continue;
        }
        const int j = it.kind, p = spec.parent[j];
        const double w = j == neck ? spec.torso_width_px : spec.limb_width_px;
        detail::draw_capsule(f.image, size, px[p][0], px[p][1], px[j][0], px[j][1], w, pal[std::min(j, 7)]);
    }

    const double root = px[pelvis][2];
    f.joints.resize(px.size());
    f.confidence.resize(px.size());
    for (std::size_t j = 0; j < px.size(); ++j) {
        const double x = px[j][0] / size, y = px[j][1] / size;
        const double z = std::clamp(0.5 + (px[j][2] - root) / spec.depth_range_mm, 0.0, 1.0);
        f.joints[j] = {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)};
        const bool inside = x >= 0 && x <= 1 && y >= 0 && y <= 1;
        f.confidence[j] = inside ? 1.0f : 0.0f;
    }
    f.head_size = static_cast<float>(spec.head_length_mm * pl.px_per_mm / size);
    f.mm_per_pixel = static_cast<float>(1.0 / pl.px_per_mm);
    return f;
}

/// Random articulation for still images.
inline FigurePose random_figure_pose(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto range = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
    FigurePose p;
    for (int s = 0; s < 2; ++s) {
        p.arm_theta[s] = range(10, 170);
        p.arm_phi[s] = range(-40, 40);
        p.forearm_bend[s] = range(-20, 120);
        p.leg_theta[s] = range(0, 45);
        p.leg_phi[s] = range(-30, 30);
    }
    p.spine_lean = range(-12, 12);
    return p;
}

/// Pixel bounding box of the figure (joints and head) under a placement.
inline std::array<double, 4> figure_bounds(const SyntheticFigureSpec& spec, const FigurePose& pose, const Placement& pl) {
    const auto mm = detail::figure_joints_mm(spec, pose);
    const double lean = detail::deg(pose.spine_lean);
    const Vec3 up{std::sin(lean), -std::cos(lean), 0};
    const Vec3 head = detail::project(detail::add3(mm[neck], up, spec.head_length_mm * 0.55), pl);
    const double hr = spec.head_length_mm * 0.4 * pl.px_per_mm;
    double x0 = head[0] - hr, x1 = head[0] + hr, y0 = head[1] - hr, y1 = head[1] + hr;
    for (const auto& m : mm) {
        const auto p = detail::project(m, pl);
        x0 = std::min(x0, p[0]);
        x1 = std::max(x1, p[0]);
        y0 = std::min(y0, p[1]);
        y1 = std::max(y1, p[1]);
    }
    return {x0, y0, x1, y1};
}

/// Draws a placement whose figure fits the canvas with the spec margin.
/// Throws after spec.max_retries failed attempts.
inline Placement random_placement(const SyntheticFigureSpec& spec, const FigurePose& pose, double max_yaw, double max_roll,
                                  std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double nominal_mm = spec.bone_length_mm[neck] + spec.head_length_mm + spec.bone_length_mm[l_foot];
    for (int attempt = 0; attempt < spec.max_retries; ++attempt) {
        Placement pl;
        pl.yaw_deg = (2 * u(rng) - 1) * max_yaw;
        pl.roll_deg = (2 * u(rng) - 1) * max_roll;
        const double height_px = spec.figure_height_px_min + (spec.figure_height_px_max - spec.figure_height_px_min) * u(rng);
        pl.px_per_mm = height_px / nominal_mm;
        pl.root_depth_mm = spec.camera_distance_mm;
        pl.cx = pl.cy = 0;
        const auto b = figure_bounds(spec, pose, pl);
        const double lo_x = spec.margin_px - b[0], hi_x = spec.image_size - spec.margin_px - b[2];
        const double lo_y = spec.margin_px - b[1], hi_y = spec.image_size - spec.margin_px - b[3];
        if (hi_x < lo_x || hi_y < lo_y) continue;
        pl.cx = lo_x + (hi_x - lo_x) * u(rng);
        pl.cy = lo_y + (hi_y - lo_y) * u(rng);
        return pl;
    }
    throw std::runtime_error("synthetic figure does not fit a " + std::to_string(spec.image_size) + "x" +
                             std::to_string(spec.image_size) + " canvas after " + std::to_string(spec.max_retries) +
                             " attempts");
}

/// Still-image dataset. Arrays are row-major; poses are normalised.
struct PoseDataset {
    int height = 0, width = 0, joints = 0;
    std::vector<float> images;      // [N, H, W, 3]
    std::vector<float> poses;       // [N, J, 3]
    std::vector<float> mask;        // [N, J, 3] 1 where the axis is annotated
    std::vector<float> confidence;  // [N, J]
    std::vector<float> head_size;   // [N]
    std::vector<float> mm_per_pixel;  // [N]

    int size() const { return static_cast<int>(head_size.size()); }
    std::size_t image_stride() const { return static_cast<std::size_t>(height) * width * 3; }
    bool operator==(const PoseDataset&) const = default;
};

/// Video dataset of `frames`-long sequences with one label each.
struct ActionDataset {
    int frames = 0, height = 0, width = 0, joints = 0, actions = 0;
    std::vector<float> images;      // [N, F, H, W, 3]
    std::vector<float> poses;       // [N, F, J, 3]
    std::vector<float> confidence;  // [N, F, J]
    std::vector<float> head_size;   // [N, F]
    std::vector<float> mm_per_pixel;  // [N, F]
    std::vector<int> labels;        // [N]

    int size() const { return static_cast<int>(labels.size()); }
    std::size_t image_stride() const { return static_cast<std::size_t>(height) * width * 3; }
    bool operator==(const ActionDataset&) const = default;
};

namespace detail {

inline void append_frame(const RenderedFrame& f, std::vector<float>& images, std::vector<float>& poses,
                         std::vector<float>& conf) {
    images.insert(images.end(), f.image.begin(), f.image.end());
    for (const auto& j : f.joints) poses.insert(poses.end(), j.begin(), j.end());
    conf.insert(conf.end(), f.confidence.begin(), f.confidence.end());
}

}  // namespace detail

/// Pure function of (spec, count, seed): each sample uses its own derived
/// seed.
inline PoseDataset generate_pose_dataset(const SyntheticFigureSpec& spec, int count, std::uint64_t seed) {
    spec.validate();
    if (count < 0) throw std::invalid_argument("generate_pose_dataset: negative count");
    PoseDataset ds;
    ds.height = ds.width = spec.image_size;
    ds.joints = spec.joints();
    ds.images.reserve(static_cast<std::size_t>(count) * ds.image_stride());
    for (int i = 0; i < count; ++i) {
        std::mt19937_64 rng(detail::mix_seed(seed, static_cast<std::uint64_t>(i)));
        const auto pose = random_figure_pose(rng);
        const auto pl = random_placement(spec, pose, spec.max_yaw_deg, spec.max_roll_deg, rng);
        const auto f = render_figure(spec, pose, pl, make_background(spec, rng));
        detail::append_frame(f, ds.images, ds.poses, ds.confidence);
        ds.mask.insert(ds.mask.end(), static_cast<std::size_t>(ds.joints) * 3, 1.0f);
        ds.head_size.push_back(f.head_size);
        ds.mm_per_pixel.push_back(f.mm_per_pixel);
    }
    return ds;
}

/// Limb pose of class `label` at frame t. The acting limb oscillates
/// between half and full raise; the rest idle near their rest angles.
inline FigurePose action_pose_at(const SyntheticActionSpec& spec, int label, double t, double period, double phase,
                                 const FigurePose& rest) {
    FigurePose p = rest;
    const double s = 0.75 + 0.25 * std::sin(2 * std::numbers::pi * t / period + phase);
    const int limb = label % 4;
    const int side = limb % 2;  // 0 left, 1 right
    if (limb < 2) {
        p.arm_theta[side] = rest.arm_theta[side] + s * spec.separation * 120.0;
        p.forearm_bend[side] = rest.forearm_bend[side] * (1 - s);
    } else {
        p.leg_theta[side] = rest.leg_theta[side] + s * spec.separation * 60.0;
        p.leg_phi[side] = rest.leg_phi[side] - s * spec.separation * 25.0;
    }
    return p;
}

inline ActionDataset generate_action_dataset(const SyntheticFigureSpec& figure, const SyntheticActionSpec& spec,
                                             int count, std::uint64_t seed) {
    figure.validate();
    spec.validate();
    if (count < 0) throw std::invalid_argument("generate_action_dataset: negative count");
    ActionDataset ds;
    ds.frames = spec.frames;
    ds.height = ds.width = figure.image_size;
    ds.joints = figure.joints();
    ds.actions = spec.actions;
    for (int i = 0; i < count; ++i) {
        std::mt19937_64 rng(detail::mix_seed(seed ^ 0xA5A5A5A5ull, static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        const int label = i % spec.actions;  // balanced by construction
        FigurePose rest;
        for (int s = 0; s < 2; ++s) {
            rest.arm_theta[s] = 15 + 25 * u(rng);
            rest.arm_phi[s] = -20 + 40 * u(rng);
            rest.forearm_bend[s] = 40 * u(rng);
            rest.leg_theta[s] = 3 + 10 * u(rng);
            rest.leg_phi[s] = -10 + 20 * u(rng);
        }
        rest.spine_lean = -6 + 12 * u(rng);
        const double period = 5 + 5 * u(rng);
        const double phase = 2 * std::numbers::pi * u(rng);

        // jitter and the placement are fixed before fitting, so retries only move the figure
        std::vector<FigurePose> poses(spec.frames);
        std::normal_distribution<double> jitter(0.0, spec.idle_jitter_deg);
        for (int t = 0; t < spec.frames; ++t) {
            poses[t] = action_pose_at(spec, label, t, period, phase, rest);
            for (int s = 0; s < 2; ++s) {
                if (!(label < 2 && s == label)) poses[t].arm_theta[s] += jitter(rng);
                if (!(label >= 2 && s == label - 2)) poses[t].leg_theta[s] += 0.5 * jitter(rng);
            }
        }
        // a placement must fit every frame
        Placement pl;
        bool placed = false;
        for (int attempt = 0; attempt < figure.max_retries && !placed; ++attempt) {
            pl = random_placement(figure, poses[0], spec.max_yaw_deg, spec.max_roll_deg, rng);
            placed = true;
            for (const auto& p : poses) {
                const auto b = figure_bounds(figure, p, pl);
                if (b[0] < 0 || b[1] < 0 || b[2] > figure.image_size || b[3] > figure.image_size) placed = false;
            }
        }
        if (!placed) throw std::runtime_error("generate_action_dataset: clip " + std::to_string(i) + " does not fit the canvas");

        const auto background = make_background(figure, rng);
        for (int t = 0; t < spec.frames; ++t) {
            const auto f = render_figure(figure, poses[t], pl, background);
            detail::append_frame(f, ds.images, ds.poses, ds.confidence);
            ds.head_size.push_back(f.head_size);
            ds.mm_per_pixel.push_back(f.mm_per_pixel);
        }
        ds.labels.push_back(label);
    }
    return ds;
}

enum class ClipMode { single, multi };

/// Start frames of the clips drawn from a video of `length` frames.
/// single: one centred window; multi: windows every T/2 frames.
inline std::vector<int> clip_sampler(int length, int clip_length, ClipMode mode) {
    if (clip_length < 1) throw std::invalid_argument("clip_sampler: clip length must be >= 1");
    if (length < clip_length) {
        throw std::invalid_argument("clip_sampler: video of " + std::to_string(length) + " frames is shorter than T=" +
                                    std::to_string(clip_length));
    }
    if (mode == ClipMode::single) return {(length - clip_length) / 2};
    const int stride = std::max(1, clip_length / 2);
    std::vector<int> starts;
    for (int s = 0; s + clip_length <= length; s += stride) starts.push_back(s);
    return starts;
}

// PRDS1 dataset files: text header ending in "end\n", then little-endian
// float32 / int32 arrays in header order.
inline constexpr const char* kDatasetMagic = "PRDS1";

inline void save_dataset(const PoseDataset& ds, const std::string& path, const std::string& spec_echo = "") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file '" + path + "'");
    out << kDatasetMagic << "\n";
    out << "kind=pose\ncount=" << ds.size() << "\nheight=" << ds.height << "\nwidth=" << ds.width
        << "\njoints=" << ds.joints << "\n";
    if (!spec_echo.empty()) out << "spec=" << spec_echo << "\n";
    out << "payload=images,poses,mask,confidence,head_size,mm_per_pixel\nend\n";
    detail::write_le(out, ds.images);
    detail::write_le(out, ds.poses);
    detail::write_le(out, ds.mask);
    detail::write_le(out, ds.confidence);
    detail::write_le(out, ds.head_size);
    detail::write_le(out, ds.mm_per_pixel);
    if (!out) throw std::runtime_error("write failed for dataset file '" + path + "'");
}

inline void save_dataset(const ActionDataset& ds, const std::string& path, const std::string& spec_echo = "") {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write dataset file '" + path + "'");
    out << kDatasetMagic << "\n";
    out << "kind=action\ncount=" << ds.size() << "\nframes=" << ds.frames << "\nheight=" << ds.height
        << "\nwidth=" << ds.width << "\njoints=" << ds.joints << "\nactions=" << ds.actions << "\n";
    if (!spec_echo.empty()) out << "spec=" << spec_echo << "\n";
    out << "payload=images,poses,confidence,head_size,mm_per_pixel,labels\nend\n";
    detail::write_le(out, ds.images);
    detail::write_le(out, ds.poses);
    detail::write_le(out, ds.confidence);
    detail::write_le(out, ds.head_size);
    detail::write_le(out, ds.mm_per_pixel);
    detail::write_le(out, ds.labels);
    if (!out) throw std::runtime_error("write failed for dataset file '" + path + "'");
}

/// Kind recorded in a dataset file header ("pose" or "action").
inline std::string dataset_kind(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
    detail::expect_magic(in, kDatasetMagic, path);
    return detail::read_header(in, path, "dataset").get("kind", "");
}

inline PoseDataset load_pose_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
    detail::expect_magic(in, kDatasetMagic, path);
    const auto kv = detail::read_header(in, path, "dataset");
    if (kv.get("kind", "") != "pose") throw std::runtime_error(path + ": expected a pose dataset, found kind '" + kv.get("kind", "") + "'");
    PoseDataset ds;
    const auto n = static_cast<std::size_t>(detail::header_int(kv, "count", path));
    ds.height = detail::header_int(kv, "height", path);
    ds.width = detail::header_int(kv, "width", path);
    ds.joints = detail::header_int(kv, "joints", path);
    const auto h = static_cast<std::size_t>(ds.height), w = static_cast<std::size_t>(ds.width),
               j = static_cast<std::size_t>(ds.joints);
    ds.images = detail::read_le<float>(in, detail::checked_product({n, h, w, 3}, path), "images", path);
    ds.poses = detail::read_le<float>(in, detail::checked_product({n, j, 3}, path), "poses", path);
    ds.mask = detail::read_le<float>(in, n * j * 3, "mask", path);
    ds.confidence = detail::read_le<float>(in, n * j, "confidence", path);
    ds.head_size = detail::read_le<float>(in, n, "head_size", path);
    ds.mm_per_pixel = detail::read_le<float>(in, n, "mm_per_pixel", path);
    detail::expect_eof(in, path);
    return ds;
}

inline ActionDataset load_action_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset file '" + path + "'");
    detail::expect_magic(in, kDatasetMagic, path);
    const auto kv = detail::read_header(in, path, "dataset");
    if (kv.get("kind", "") != "action") throw std::runtime_error(path + ": expected an action dataset, found kind '" + kv.get("kind", "") + "'");
    ActionDataset ds;
    const auto n = static_cast<std::size_t>(detail::header_int(kv, "count", path));
    ds.frames = detail::header_int(kv, "frames", path);
    ds.height = detail::header_int(kv, "height", path);
    ds.width = detail::header_int(kv, "width", path);
    ds.joints = detail::header_int(kv, "joints", path);
    ds.actions = detail::header_int(kv, "actions", path);
    const auto f = static_cast<std::size_t>(ds.frames), h = static_cast<std::size_t>(ds.height),
               w = static_cast<std::size_t>(ds.width), j = static_cast<std::size_t>(ds.joints);
    ds.images = detail::read_le<float>(in, detail::checked_product({n, f, h, w, 3}, path), "images", path);
    ds.poses = detail::read_le<float>(in, detail::checked_product({n, f, j, 3}, path), "poses", path);
    ds.confidence = detail::read_le<float>(in, n * f * j, "confidence", path);
    ds.head_size = detail::read_le<float>(in, n * f, "head_size", path);
    ds.mm_per_pixel = detail::read_le<float>(in, n * f, "mm_per_pixel", path);
    ds.labels = detail::read_le<int>(in, n, "labels", path);
    for (std::size_t i = 0; i < n; ++i) {
        if (ds.labels[i] < 0 || ds.labels[i] >= ds.actions) {
            throw std::runtime_error(path + ": label " + std::to_string(ds.labels[i]) + " of clip " + std::to_string(i) +
                                     " outside [0," + std::to_string(ds.actions) + ")");
        }
    }
    detail::expect_eof(in, path);
    return ds;
}

/// One line per sample: "<index> x y z c x y z c ..." (normalised).
inline void export_poses_text(const PoseDataset& ds, std::ostream& out) {
    out.precision(7);
    for (int i = 0; i < ds.size(); ++i) {
        out << i;
        for (int j = 0; j < ds.joints; ++j) {
            const std::size_t o = (static_cast<std::size_t>(i) * ds.joints + j);
            out << ' ' << ds.poses[o * 3] << ' ' << ds.poses[o * 3 + 1] << ' ' << ds.poses[o * 3 + 2] << ' '
                << ds.confidence[o];
        }
        out << '\n';
    }
}

inline SyntheticFigureSpec figure_spec_from_kv(const KeyValueConfig& kv) {
    SyntheticFigureSpec s;
    s.image_size = kv.get_int("image_size", s.image_size);
    s.limb_width_px = kv.get_double("limb_width_px", s.limb_width_px);
    s.figure_height_px_min = kv.get_double("figure_height_px_min", s.figure_height_px_min);
    s.figure_height_px_max = kv.get_double("figure_height_px_max", s.figure_height_px_max);
    s.max_yaw_deg = kv.get_double("max_yaw_deg", s.max_yaw_deg);
    s.max_roll_deg = kv.get_double("max_roll_deg", s.max_roll_deg);
    s.noise_level = kv.get_double("noise_level", s.noise_level);
    s.max_retries = kv.get_int("max_retries", s.max_retries);
    return s;
}

inline SyntheticActionSpec action_spec_from_kv(const KeyValueConfig& kv) {
    SyntheticActionSpec s;
    s.actions = kv.get_int("actions", s.actions);
    s.frames = kv.get_int("frames", s.frames);
    s.separation = kv.get_double("separation", s.separation);
    s.idle_jitter_deg = kv.get_double("idle_jitter_deg", s.idle_jitter_deg);
    return s;
}

}  // namespace mtpose
