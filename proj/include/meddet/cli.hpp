// SPDX-License-Identifier: Apache-2.0
//
// Command-line surface. Exit codes: 0 success, 1 validation/usage error,
// 2 runtime or training error. Diagnostics go to stderr; machine outputs go
// to the files named by --out. The config file owns hyperparameters; --set
// overrides individual scalar fields and every override lands in the run
// metadata.
#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "meddet/config.hpp"
#include "meddet/gradcheck.hpp"
#include "meddet/pipeline.hpp"

namespace meddet::cli {

namespace detail {

inline nlohmann::json parse_scalar(const std::string& text) {
    try {
        nlohmann::json v = nlohmann::json::parse(text);
        if (v.is_object() || v.is_array()) throw ConfigError("--set accepts scalar values only");
        return v;
    } catch (const nlohmann::json::exception&) {
        return nlohmann::json(text);  // bare string
    }
}

// "train.batch_size=4" applied onto the config JSON
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    nlohmann::json value = parse_scalar(assignment.substr(eq + 1));
    nlohmann::json* cur = &j;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("--set: empty key path");
    for (size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
    if (cur->contains(parts.back()) && ((*cur)[parts.back()].is_object() || (*cur)[parts.back()].is_array()))
        throw ConfigError("--set may only override scalar fields; '" + path + "' is structured");
    (*cur)[parts.back()] = value;
}

inline config::DistillConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    nlohmann::json j;
    if (!path.empty()) {
        std::ifstream is(path);
        if (!is) throw ConfigError("cannot open config file " + path);
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("malformed JSON in " + path + ": " + e.what());
        }
    } else {
        j = config::to_json(config::DistillConfig{});
    }
    for (const auto& o : overrides) apply_override(j, o);
    return config::from_json(j);
}

inline void apply_threads(int threads) {
    if (threads <= 0) {
        const char* env = std::getenv("MEDDET_KIT_THREADS");
        threads = env ? std::atoi(env) : 1;
    }
    set_thread_count(threads > 0 ? threads : 1);
}

inline std::vector<uint64_t> parse_seeds(const std::string& csv) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        seeds.push_back(std::stoull(tok));
    }
    if (seeds.empty()) throw ConfigError("--seeds: no seeds given");
    return seeds;
}

// ---------------------------------------------------------------------------
// Plot helpers: deterministic SVG plus the tidy CSV behind it.

struct MetricsRows {
    struct Row {
        std::string run_id, variant;
        double map50, map5095, recall;
        long long tp, fp, fn;
    };
    std::vector<Row> rows;
};

inline MetricsRows parse_metrics_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open metrics csv " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError(path + ": empty file, expected a header row");
    if (line != evalm::csv_header())
        throw FormatError(path + " row 1: header mismatch, expected '" + evalm::csv_header() + "'");
    MetricsRows out;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[8];
        for (int c = 0; c < 8; ++c) {
            if (!std::getline(ss, f[c], ','))
                throw FormatError(path + " row " + std::to_string(lineno) + ": missing column " + std::to_string(c + 1));
        }
        try {
            out.rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stoll(f[5]),
                                std::stoll(f[6]), std::stoll(f[7])});
        } catch (const std::exception&) {
            throw FormatError(path + " row " + std::to_string(lineno) + ": non-numeric metric column");
        }
    }
    return out;
}

inline std::string svg_header(int w, int h) {
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n", w,
                  h, w, h);
    return buf;
}

inline std::string bars_svg(const std::vector<std::pair<std::string, double>>& bars) {
    const int W = 640, H = 360, pad = 40;
    std::string svg = svg_header(W, H);
    double peak = 1e-9;
    for (const auto& [name, v] : bars) peak = std::max(peak, v);
    const int n = static_cast<int>(bars.size());
    char buf[256];
    for (int i = 0; i < n; ++i) {
        const double bw = static_cast<double>(W - 2 * pad) / n;
        const double x = pad + i * bw + 0.1 * bw;
        const double h = (H - 2 * pad) * bars[static_cast<size_t>(i)].second / peak;
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"#4878a8\"/>\n", x,
                      H - pad - h, 0.8 * bw, h);
        svg += buf;
        std::snprintf(buf, sizeof(buf), "<text x=\"%.2f\" y=\"%d\" font-size=\"10\">%s</text>\n", x, H - pad + 12,
                      bars[static_cast<size_t>(i)].first.c_str());
        svg += buf;
        std::snprintf(buf, sizeof(buf), "<text x=\"%.2f\" y=\"%.2f\" font-size=\"10\">%.4f</text>\n", x,
                      H - pad - h - 4, bars[static_cast<size_t>(i)].second);
        svg += buf;
    }
    svg += "</svg>\n";
    return svg;
}

inline std::string curves_svg(const std::map<std::string, std::vector<std::pair<double, double>>>& series) {
    const int W = 640, H = 360, pad = 40;
    std::string svg = svg_header(W, H);
    double xmax = 1e-9, ymax = 1e-9;
    for (const auto& [name, pts] : series)
        for (const auto& [x, y] : pts) {
            xmax = std::max(xmax, x);
            ymax = std::max(ymax, y);
        }
    const char* colors[] = {"#4878a8", "#a84848", "#48a868", "#a8a848", "#7848a8", "#48a8a8"};
    int ci = 0;
    char buf[128];
    for (const auto& [name, pts] : series) {
        std::string path;
        for (size_t i = 0; i < pts.size(); ++i) {
            const double px = pad + (W - 2 * pad) * (xmax > 0 ? pts[i].first / xmax : 0.0);
            const double py = H - pad - (H - 2 * pad) * (ymax > 0 ? pts[i].second / ymax : 0.0);
            std::snprintf(buf, sizeof(buf), "%s%.2f,%.2f", i ? " " : "", px, py);
            path += buf;
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(colors[ci % 6]) + "\" points=\"" + path + "\"/>\n";
        std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" font-size=\"10\" fill=\"%s\">%s</text>\n", pad,
                      pad + 12 * ci, colors[ci % 6], name.c_str());
        svg += buf;
        ++ci;
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    CLI::App app{"generative-adversarial multi-teacher distillation for small-object detection"};
    app.require_subcommand(1);

    std::string config_path, out_path, role = "student", deriv = "nmode2", split = "train", module = "all";
    std::string ckpt_path, metrics_path, grid = "table3", seeds_csv = "1,2,3", teachers_csv;
    std::vector<std::string> overrides;
    std::vector<std::string> teacher_paths;
    uint64_t seed = 0;
    bool seed_given = false;
    int threads = 0, precision = 64, trials = 100;
    double gamma = 0.0, t_end = 20.0, step = 0.125, y0 = 0.0;

    auto add_common = [&](CLI::App* cmd, bool needs_seed) {
        cmd->add_option("--config", config_path, "JSON config file (defaults when omitted)");
        cmd->add_option("--set", overrides, "override a scalar config field, key.path=value")->take_all();
        cmd->add_option("--threads", threads, "worker threads (or MEDDET_KIT_THREADS)");
        if (needs_seed) cmd->add_option("--seed", seed, "run seed (required)")->required()->each([&](const std::string&) {
            seed_given = true;
        });
    };

    auto* train_cmd = app.add_subcommand("train-teacher", "pretrain one teacher on the synthetic benchmark");
    add_common(train_cmd, true);
    train_cmd->add_option("--role", role, "teacher_small | teacher_mid | teacher_large")->required();
    train_cmd->add_option("--out", out_path, "output directory")->required();

    auto* distill_cmd = app.add_subcommand("distill", "distill the student against three frozen teachers");
    add_common(distill_cmd, true);
    distill_cmd->add_option("--teachers", teacher_paths, "three teacher checkpoints (small mid large)")
        ->expected(3)
        ->required();
    distill_cmd->add_option("--out", out_path, "output directory")->required();

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a split");
    add_common(eval_cmd, false);
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("--role", role, "network config the checkpoint belongs to");
    eval_cmd->add_option("--split", split, "train | val | test");
    eval_cmd->add_option("--out", out_path, "output directory")->required();

    auto* ablate_cmd = app.add_subcommand("ablate", "run an ablation grid over shared seeds");
    add_common(ablate_cmd, true);
    ablate_cmd->add_option("--grid", grid, "table2 | table3 | table4");
    ablate_cmd->add_option("--seeds", seeds_csv, "comma-separated seeds (default 1,2,3)");
    ablate_cmd->add_option("--out", out_path, "output directory")->required();

    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference checks for every differentiable op");
    grad_cmd->add_option("--module", module, "check-name filter or 'all'");
    grad_cmd->add_option("--precision", precision, "64 (gating) or 32 (informational)");
    grad_cmd->add_option("--trials", trials, "random trials per check");

    auto* dyn_cmd = app.add_subcommand("dynamics", "integrate the memory dynamics and dump the trajectory");
    dyn_cmd->add_option("--gamma", gamma, "perceptual input value");
    dyn_cmd->add_option("--deriv", deriv, "nmode | nmode2");
    dyn_cmd->add_option("--t-end", t_end, "integration horizon");
    dyn_cmd->add_option("--step", step, "solver step");
    dyn_cmd->add_option("--y0", y0, "initial state");
    dyn_cmd->add_option("--out", out_path, "trajectory CSV path")->required();

    auto* gen_cmd = app.add_subcommand("gen-data", "export a synthetic split as a binary dataset");
    add_common(gen_cmd, false);
    gen_cmd->add_option("--split", split, "train | val | test");
    gen_cmd->add_option("--out", out_path, "dataset file path")->required();

    auto* plot_cmd = app.add_subcommand("plot", "render bar/curve SVGs from a metrics CSV");
    plot_cmd->add_option("--metrics", metrics_path, "metrics CSV (evalmetrics schema)")->required();
    plot_cmd->add_option("--out", out_path, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        detail::apply_threads(threads);
        std::vector<std::string> echoed = overrides;
        if (seed_given) echoed.push_back("seed=" + std::to_string(seed));

        if (train_cmd->parsed()) {
            auto cfg = detail::load_config(config_path, overrides);
            cfg.seed = seed;
            detnet::Role r;
            if (role == "teacher_small")
                r = detnet::Role::teacher_small;
            else if (role == "teacher_mid")
                r = detnet::Role::teacher_mid;
            else if (role == "teacher_large")
                r = detnet::Role::teacher_large;
            else
                throw ConfigError("train-teacher: --role must name a teacher, got '" + role + "'");
            std::filesystem::create_directories(out_path);
            pipeline::MetricsLog log;
            auto res = pipeline::train_detector(cfg.teacher_as_built(r), cfg,
                                                std::string(detnet::role_name(r)) + "-s" + std::to_string(seed), seed,
                                                &log);
            ckpt::save(res.best, out_path + "/" + detnet::role_name(r) + ".mdkt");
            log.write(out_path + "/metrics.csv");
            pipeline::write_metadata(out_path + "/metadata.json", cfg, "train-teacher", seed, echoed);
            std::fprintf(stderr, "best val mAP@0.5 %.4f at epoch %d\n", res.best_val_map50, res.best_epoch);
            return 0;
        }

        if (distill_cmd->parsed()) {
            auto cfg = detail::load_config(config_path, overrides);
            cfg.seed = seed;
            std::vector<ckpt::Checkpoint> tc;
            for (const auto& p : teacher_paths) tc.push_back(ckpt::load(p));
            std::filesystem::create_directories(out_path);
            pipeline::MetricsLog log;
            auto res = pipeline::distill(cfg, tc, "distill-s" + std::to_string(seed), seed, &log);
            ckpt::save(res.best, out_path + "/student.mdkt");
            log.write(out_path + "/metrics.csv");
            pipeline::write_metadata(out_path + "/metadata.json", cfg, "distill", seed, echoed);
            std::fprintf(stderr, "best val mAP@0.5 %.4f at epoch %d (teachers frozen: checksum %016llx)\n",
                         res.best_val_map50, res.best_epoch,
                         static_cast<unsigned long long>(res.teacher_checksum_after));
            return 0;
        }

        if (eval_cmd->parsed()) {
            auto cfg = detail::load_config(config_path, overrides);
            auto c = ckpt::load(ckpt_path);
            const bool distilled = c.find("student/stem.w") != nullptr;
            detnet::NetConfig net_cfg;
            if (role == "student")
                net_cfg = cfg.student_as_built();
            else if (role == "teacher_small")
                net_cfg = cfg.teacher_as_built(detnet::Role::teacher_small);
            else if (role == "teacher_mid")
                net_cfg = cfg.teacher_as_built(detnet::Role::teacher_mid);
            else if (role == "teacher_large")
                net_cfg = cfg.teacher_as_built(detnet::Role::teacher_large);
            else
                throw ConfigError("eval: unknown --role '" + role + "'");
            auto splits = synth::make_split(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
            const synth::Dataset& ds = split == "train" ? splits.train : split == "val" ? splits.val : splits.test;
            auto rep = pipeline::evaluate_checkpoint(cfg, net_cfg, c, ds, distilled ? "student/" : "");
            std::filesystem::create_directories(out_path);
            pipeline::MetricsLog log;
            log.add("eval", role + "-" + split, rep);
            log.write(out_path + "/metrics.csv");
            std::printf("%s\n", evalm::csv_row("eval", role + "-" + split, rep).c_str());
            return 0;
        }

        if (ablate_cmd->parsed()) {
            auto cfg = detail::load_config(config_path, overrides);
            cfg.seed = seed;
            std::vector<pipeline::Variant> variants;
            if (grid == "table3")
                variants = pipeline::table3_grid();
            else if (grid == "table2")
                variants = pipeline::table2_grid();
            else if (grid == "table4")
                variants = pipeline::table4_grid();
            else
                throw ConfigError("ablate: unknown --grid '" + grid + "'");
            auto log = pipeline::ablate(cfg, variants, detail::parse_seeds(seeds_csv));
            std::filesystem::create_directories(out_path);
            log.write(out_path + "/ablation.csv");
            pipeline::write_metadata(out_path + "/metadata.json", cfg, "ablate", seed, echoed);
            return 0;
        }

        if (grad_cmd->parsed()) {
            const double tol = precision == 64 ? 1e-4 : 5e-2;
            std::vector<gradcheck::CheckResult> results;
            if (precision == 64)
                results = gradcheck::run_suite<double>(trials, tol, 99, module);
            else if (precision == 32)
                results = gradcheck::run_suite<float>(trials, tol, 99, module);
            else
                throw ConfigError("gradcheck: --precision must be 32 or 64");
            if (results.empty()) throw ConfigError("gradcheck: no checks match module filter '" + module + "'");
            bool all_pass = true;
            std::printf("%-18s %10s %8s  %s\n", "check", "max_err", "trials", "status");
            for (const auto& r : results) {
                std::printf("%-18s %10.3e %8d  %s\n", r.name.c_str(), r.max_err, r.trials, r.pass ? "pass" : "FAIL");
                all_pass = all_pass && r.pass;
            }
            return all_pass ? 0 : 2;
        }

        if (dyn_cmd->parsed()) {
            nmode::SolverSpec spec{nmode::Method::rk4, step, t_end};
            nmode::Deriv d;
            if (deriv == "nmode")
                d = nmode::Deriv::nmode;
            else if (deriv == "nmode2")
                d = nmode::Deriv::nmode2;
            else
                throw ConfigError("dynamics: --deriv must be nmode or nmode2");
            std::ofstream os(out_path, std::ios::trunc);
            if (!os) throw FormatError("cannot write trajectory to " + out_path);
            auto g = Tensor::scalar(static_cast<float>(gamma));
            auto y = Tensor::scalar(static_cast<float>(y0));
            nmode::write_trajectory_csv<float>(os, g, d, spec, &y);
            return 0;
        }

        if (gen_cmd->parsed()) {
            auto cfg = detail::load_config(config_path, overrides);
            auto splits = synth::make_split(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
            const synth::Dataset& ds = split == "train" ? splits.train : split == "val" ? splits.val : splits.test;
            synth::export_dataset<float>(ds, out_path);
            return 0;
        }

        if (plot_cmd->parsed()) {
            auto rows = detail::parse_metrics_csv(metrics_path);
            std::filesystem::create_directories(out_path);
            std::vector<std::pair<std::string, double>> bars;
            std::map<std::string, std::vector<std::pair<double, double>>> series;
            std::string tidy = "kind,series,x,y\n";
            char buf[160];
            for (const auto& r : rows.rows) {
                const auto at = r.run_id.find("@epoch");
                if (at != std::string::npos) {
                    const std::string key = r.run_id.substr(0, at);
                    const double epoch = std::stod(r.run_id.substr(at + 6));
                    series[key].push_back({epoch, r.map50});
                    std::snprintf(buf, sizeof(buf), "curve,%s,%.6f,%.6f\n", key.c_str(), epoch, r.map50);
                } else {
                    bars.push_back({r.run_id, r.map50});
                    std::snprintf(buf, sizeof(buf), "bar,%s,%zu,%.6f\n", r.run_id.c_str(), bars.size() - 1, r.map50);
                }
                tidy += buf;
            }
            std::ofstream(out_path + "/bars.svg", std::ios::trunc) << detail::bars_svg(bars);
            std::ofstream(out_path + "/curves.svg", std::ios::trunc) << detail::curves_svg(series);
            std::ofstream(out_path + "/tidy.csv", std::ios::trunc) << tidy;
            return 0;
        }

        return 1;
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }
}

}  // namespace meddet::cli
