// SPDX-License-Identifier: Apache-2.0
//
// One validated record for every hyperparameter. JSON is the on-disk form;
// unknown keys are rejected so configs cannot silently drift. Defaults are
// the shipped desk-scale setup.
#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "meddet/detnet.hpp"
#include "meddet/errors.hpp"
#include "meddet/losses.hpp"
#include "meddet/nmode.hpp"
#include "meddet/synthdata.hpp"

namespace meddet::config {

using nlohmann::json;

enum class OptimKind { sgd, adam };
enum class FusionMode { lwff, sum, concat };

struct OptimSpec {
    OptimKind kind = OptimKind::adam;
    double lr_student = 2e-3;
    double lr_generator = 1e-3;
    double lr_discriminator = 1e-3;
    double momentum = 0.9;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (lr_student < 0 || lr_generator < 0 || lr_discriminator < 0)
            throw ConfigError("optim: learning rates must be >= 0");
        if (momentum < 0 || momentum >= 1) throw ConfigError("optim: momentum in [0,1)");
    }
};

struct TrainSpec {
    int batch_size = 8;
    int teacher_epochs = 20;
    int distill_epochs = 20;
    int n_train = 800, n_val = 100, n_test = 100;
    int d_steps_per_student_step = 1;

    void validate() const {
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (teacher_epochs < 1 || distill_epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("train: split counts must be >= 1");
        if (d_steps_per_student_step < 0) throw ConfigError("train: d_steps_per_student_step must be >= 0");
    }
};

struct EvalSpec {
    double nms_iou = 0.6;
    double score_thresh = 0.05;

    void validate() const {
        if (nms_iou <= 0 || nms_iou > 1) throw ConfigError("eval: nms_iou in (0,1]");
        if (score_thresh < 0 || score_thresh > 1) throw ConfigError("eval: score_thresh in [0,1]");
    }
};

struct DistillConfig {
    uint64_t seed = 1;
    detnet::NetConfig student = detnet::default_config(detnet::Role::student);
    detnet::NetConfig teacher_small = detnet::default_config(detnet::Role::teacher_small);
    detnet::NetConfig teacher_mid = detnet::default_config(detnet::Role::teacher_mid);
    detnet::NetConfig teacher_large = detnet::default_config(detnet::Role::teacher_large);
    losses::LossWeights weights;
    nmode::SolverSpec solver = nmode::default_block_solver();  // applied to every net's blocks
    synth::SceneSpec scene = default_scene();
    OptimSpec optim;
    TrainSpec train;
    EvalSpec eval;
    bool use_nmode2 = true;
    bool use_aatm = true;
    FusionMode fusion = FusionMode::lwff;
    bool generator_literal_loss = false;

    static synth::SceneSpec default_scene() {
        synth::SceneSpec s;
        s.noise.gaussian_sigma = 0.1;
        s.noise.rician_sigma = 0.05;
        return s;
    }

    void validate() const {
        student.validate();
        teacher_small.validate();
        teacher_mid.validate();
        teacher_large.validate();
        detnet::validate_family(student, teacher_small, teacher_mid, teacher_large);
        weights.validate();
        solver.steps();
        scene.validate();
        optim.validate();
        train.validate();
        eval.validate();
        const int stride = student.max_stride();
        if (scene.image_size % stride != 0)
            throw ConfigError("scene image_size " + std::to_string(scene.image_size) +
                              " must be divisible by the largest stride " + std::to_string(stride));
    }

    // nets as actually built: the shared solver is pushed down and the
    // student's blocks honor the ablation flag
    detnet::NetConfig student_as_built() const {
        detnet::NetConfig c = student;
        c.solver = solver;
        if (!use_nmode2) c.nmode2_placement = {false, false, false};
        return c;
    }
    detnet::NetConfig teacher_as_built(detnet::Role role) const {
        detnet::NetConfig c = role == detnet::Role::teacher_small ? teacher_small
                              : role == detnet::Role::teacher_mid ? teacher_mid
                                                                  : teacher_large;
        c.solver = solver;
        return c;
    }

    std::vector<std::string> deviation_flags() const {
        std::vector<std::string> flags = {"lwff_alpha_sigmoid"};
        flags.push_back(generator_literal_loss ? "generator_loss_literal" : "generator_loss_nonsaturating");
        return flags;
    }
};

// ---------------------------------------------------------------------------
// JSON (strict: unknown keys rejected)

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename V>
void opt(const json& j, const char* key, V& into) {
    if (j.contains(key)) into = j.at(key).get<V>();
}

}  // namespace detail

inline json placement_to_json(const detnet::Placement& p) {
    json arr = json::array();
    if (p.backbone) arr.push_back("backbone");
    if (p.fpn) arr.push_back("fpn");
    if (p.head) arr.push_back("head");
    return arr;
}

inline detnet::Placement placement_from_json(const json& arr) {
    detnet::Placement p{false, false, false};
    for (const auto& v : arr) {
        const std::string s = v.get<std::string>();
        if (s == "backbone")
            p.backbone = true;
        else if (s == "fpn")
            p.fpn = true;
        else if (s == "head")
            p.head = true;
        else
            throw ConfigError("nmode2_placement: unknown location '" + s + "'");
    }
    return p;
}

inline json net_to_json(const detnet::NetConfig& c) {
    return json{{"stem_channels", c.stem_channels},      {"stage_widths", c.stage_widths},
                {"pyramid_levels", c.pyramid_levels},    {"pyramid_channels", c.pyramid_channels},
                {"head_tower_depth", c.head_tower_depth}, {"num_classes", c.num_classes},
                {"reg_bins", c.reg_bins},                {"nmode2_placement", placement_to_json(c.nmode2_placement)}};
}

inline void net_from_json(const json& j, detnet::NetConfig& c, const std::string& where) {
    detail::check_keys(j,
                       {"stem_channels", "stage_widths", "pyramid_levels", "pyramid_channels", "head_tower_depth",
                        "num_classes", "reg_bins", "nmode2_placement"},
                       where);
    detail::opt(j, "stem_channels", c.stem_channels);
    detail::opt(j, "stage_widths", c.stage_widths);
    detail::opt(j, "pyramid_levels", c.pyramid_levels);
    detail::opt(j, "pyramid_channels", c.pyramid_channels);
    detail::opt(j, "head_tower_depth", c.head_tower_depth);
    detail::opt(j, "num_classes", c.num_classes);
    detail::opt(j, "reg_bins", c.reg_bins);
    if (j.contains("nmode2_placement")) c.nmode2_placement = placement_from_json(j.at("nmode2_placement"));
}

inline json to_json(const DistillConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["nets"] = {{"student", net_to_json(c.student)},
                 {"teacher_small", net_to_json(c.teacher_small)},
                 {"teacher_mid", net_to_json(c.teacher_mid)},
                 {"teacher_large", net_to_json(c.teacher_large)}};
    j["loss"] = {{"lambda", c.weights.lambda}, {"mu", c.weights.mu},     {"sigma", c.weights.sigma},
                 {"tau", c.weights.tau},       {"beta", c.weights.beta}};
    j["solver"] = {{"method", c.solver.method == nmode::Method::rk4 ? "rk4" : "euler"},
                   {"step", c.solver.step},
                   {"t_end", c.solver.t_end}};
    j["scene"] = {{"image_size", c.scene.image_size},
                  {"discs_min", c.scene.discs_min},
                  {"discs_max", c.scene.discs_max},
                  {"radius_min", c.scene.radius_min},
                  {"radius_max", c.scene.radius_max},
                  {"protrusion_bump", c.scene.protrusion_bump},
                  {"class_balance", c.scene.class_balance},
                  {"noise",
                   {{"gaussian_sigma", c.scene.noise.gaussian_sigma},
                    {"rician_sigma", c.scene.noise.rician_sigma},
                    {"streak_count", c.scene.noise.streak_count},
                    {"streak_amplitude", c.scene.noise.streak_amplitude}}}};
    j["optim"] = {{"kind", c.optim.kind == OptimKind::adam ? "adam" : "sgd"},
                  {"lr_student", c.optim.lr_student},
                  {"lr_generator", c.optim.lr_generator},
                  {"lr_discriminator", c.optim.lr_discriminator},
                  {"momentum", c.optim.momentum},
                  {"adam_beta1", c.optim.adam_beta1},
                  {"adam_beta2", c.optim.adam_beta2},
                  {"adam_eps", c.optim.adam_eps}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"teacher_epochs", c.train.teacher_epochs},
                  {"distill_epochs", c.train.distill_epochs},
                  {"n_train", c.train.n_train},
                  {"n_val", c.train.n_val},
                  {"n_test", c.train.n_test},
                  {"d_steps_per_student_step", c.train.d_steps_per_student_step}};
    j["eval"] = {{"nms_iou", c.eval.nms_iou}, {"score_thresh", c.eval.score_thresh}};
    j["ablation"] = {{"use_nmode2", c.use_nmode2},
                     {"use_aatm", c.use_aatm},
                     {"fusion", c.fusion == FusionMode::lwff  ? "lwff"
                                : c.fusion == FusionMode::sum ? "sum"
                                                              : "concat"},
                     {"generator_loss", c.generator_literal_loss ? "literal" : "nonsaturating"}};
    return j;
}

inline DistillConfig from_json(const json& j) {
    detail::check_keys(j, {"seed", "nets", "loss", "solver", "scene", "optim", "train", "eval", "ablation"}, "config");
    DistillConfig c;
    detail::opt(j, "seed", c.seed);
    if (j.contains("nets")) {
        const auto& n = j.at("nets");
        detail::check_keys(n, {"student", "teacher_small", "teacher_mid", "teacher_large"}, "nets");
        if (n.contains("student")) net_from_json(n.at("student"), c.student, "nets.student");
        if (n.contains("teacher_small")) net_from_json(n.at("teacher_small"), c.teacher_small, "nets.teacher_small");
        if (n.contains("teacher_mid")) net_from_json(n.at("teacher_mid"), c.teacher_mid, "nets.teacher_mid");
        if (n.contains("teacher_large")) net_from_json(n.at("teacher_large"), c.teacher_large, "nets.teacher_large");
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        detail::check_keys(l, {"lambda", "mu", "sigma", "tau", "beta"}, "loss");
        detail::opt(l, "lambda", c.weights.lambda);
        detail::opt(l, "mu", c.weights.mu);
        detail::opt(l, "sigma", c.weights.sigma);
        detail::opt(l, "tau", c.weights.tau);
        detail::opt(l, "beta", c.weights.beta);
    }
    if (j.contains("solver")) {
        const auto& s = j.at("solver");
        detail::check_keys(s, {"method", "step", "t_end"}, "solver");
        if (s.contains("method")) {
            const std::string m = s.at("method").get<std::string>();
            if (m == "rk4")
                c.solver.method = nmode::Method::rk4;
            else if (m == "euler")
                c.solver.method = nmode::Method::euler;
            else
                throw ConfigError("solver.method must be rk4 or euler, got '" + m + "'");
        }
        detail::opt(s, "step", c.solver.step);
        detail::opt(s, "t_end", c.solver.t_end);
    }
    if (j.contains("scene")) {
        const auto& s = j.at("scene");
        detail::check_keys(s,
                           {"image_size", "discs_min", "discs_max", "radius_min", "radius_max", "protrusion_bump",
                            "class_balance", "noise"},
                           "scene");
        detail::opt(s, "image_size", c.scene.image_size);
        detail::opt(s, "discs_min", c.scene.discs_min);
        detail::opt(s, "discs_max", c.scene.discs_max);
        detail::opt(s, "radius_min", c.scene.radius_min);
        detail::opt(s, "radius_max", c.scene.radius_max);
        detail::opt(s, "protrusion_bump", c.scene.protrusion_bump);
        detail::opt(s, "class_balance", c.scene.class_balance);
        if (s.contains("noise")) {
            const auto& n = s.at("noise");
            detail::check_keys(n, {"gaussian_sigma", "rician_sigma", "streak_count", "streak_amplitude"},
                               "scene.noise");
            detail::opt(n, "gaussian_sigma", c.scene.noise.gaussian_sigma);
            detail::opt(n, "rician_sigma", c.scene.noise.rician_sigma);
            detail::opt(n, "streak_count", c.scene.noise.streak_count);
            detail::opt(n, "streak_amplitude", c.scene.noise.streak_amplitude);
        }
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        detail::check_keys(
            o, {"kind", "lr_student", "lr_generator", "lr_discriminator", "momentum", "adam_beta1", "adam_beta2",
                "adam_eps"},
            "optim");
        if (o.contains("kind")) {
            const std::string k = o.at("kind").get<std::string>();
            if (k == "adam")
                c.optim.kind = OptimKind::adam;
            else if (k == "sgd")
                c.optim.kind = OptimKind::sgd;
            else
                throw ConfigError("optim.kind must be adam or sgd, got '" + k + "'");
        }
        detail::opt(o, "lr_student", c.optim.lr_student);
        detail::opt(o, "lr_generator", c.optim.lr_generator);
        detail::opt(o, "lr_discriminator", c.optim.lr_discriminator);
        detail::opt(o, "momentum", c.optim.momentum);
        detail::opt(o, "adam_beta1", c.optim.adam_beta1);
        detail::opt(o, "adam_beta2", c.optim.adam_beta2);
        detail::opt(o, "adam_eps", c.optim.adam_eps);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        detail::check_keys(t,
                           {"batch_size", "teacher_epochs", "distill_epochs", "n_train", "n_val", "n_test",
                            "d_steps_per_student_step"},
                           "train");
        detail::opt(t, "batch_size", c.train.batch_size);
        detail::opt(t, "teacher_epochs", c.train.teacher_epochs);
        detail::opt(t, "distill_epochs", c.train.distill_epochs);
        detail::opt(t, "n_train", c.train.n_train);
        detail::opt(t, "n_val", c.train.n_val);
        detail::opt(t, "n_test", c.train.n_test);
        detail::opt(t, "d_steps_per_student_step", c.train.d_steps_per_student_step);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::check_keys(e, {"nms_iou", "score_thresh"}, "eval");
        detail::opt(e, "nms_iou", c.eval.nms_iou);
        detail::opt(e, "score_thresh", c.eval.score_thresh);
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        detail::check_keys(a, {"use_nmode2", "use_aatm", "fusion", "generator_loss"}, "ablation");
        detail::opt(a, "use_nmode2", c.use_nmode2);
        detail::opt(a, "use_aatm", c.use_aatm);
        if (a.contains("fusion")) {
            const std::string f = a.at("fusion").get<std::string>();
            if (f == "lwff")
                c.fusion = FusionMode::lwff;
            else if (f == "sum")
                c.fusion = FusionMode::sum;
            else if (f == "concat")
                c.fusion = FusionMode::concat;
            else
                throw ConfigError("ablation.fusion must be lwff, sum or concat, got '" + f + "'");
        }
        if (a.contains("generator_loss")) {
            const std::string g = a.at("generator_loss").get<std::string>();
            if (g == "literal")
                c.generator_literal_loss = true;
            else if (g == "nonsaturating")
                c.generator_literal_loss = false;
            else
                throw ConfigError("ablation.generator_loss must be nonsaturating or literal, got '" + g + "'");
        }
    }
    c.validate();
    return c;
}

inline DistillConfig load_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
    return from_json(j);
}

inline uint64_t config_hash(const DistillConfig& c) {
    const std::string s = to_json(c).dump();
    uint64_t h = 1469598103934665603ull;
    for (unsigned char b : s) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace meddet::config
