// SPDX-License-Identifier: Apache-2.0
//
// Orchestration: teacher pretraining on the synthetic benchmark, frozen-
// teacher distillation (per-teacher alignment -> fusion -> per-level
// adversarial matching + feature regression), evaluation, checkpointing and
// the ablation harness.
//
// The teacher branch (three networks + their alignment convs + the fusion
// parameters) is built deterministically from the seed and never trains;
// since the dataset is index-keyed, fused targets are computed once per run.
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "meddet/aatm.hpp"
#include "meddet/alignfuse.hpp"
#include "meddet/checkpoint.hpp"
#include "meddet/config.hpp"
#include "meddet/detnet.hpp"
#include "meddet/evalmetrics.hpp"
#include "meddet/losses.hpp"
#include "meddet/synthdata.hpp"

namespace meddet::pipeline {

using Tensorf = TensorT<float>;

// ---------------------------------------------------------------------------
// Optimizers: SGD with momentum and Adam over parameter groups. A zero
// gradient is an exact no-op while the state buffers are zero.

struct ParamGroup {
    std::vector<Tensorf*> params;
    double lr = 1e-3;
};

class Optimizer {
public:
    Optimizer(config::OptimSpec spec, std::vector<ParamGroup> groups) : spec_(spec), groups_(std::move(groups)) {
        for (auto& g : groups_)
            for (auto* p : g.params) {
                m_.emplace_back(p->size(), 0.0f);
                v_.emplace_back(p->size(), 0.0f);
            }
    }

    void step() {
        ++t_;
        size_t slot = 0;
        for (auto& g : groups_) {
            for (auto* p : g.params) {
                auto& m = m_[slot];
                auto& v = v_[slot];
                ++slot;
                if (!p->has_grad()) continue;
                const auto& grad = p->grad();
                auto& val = p->data_mut();
                const float lr = static_cast<float>(g.lr);
                if (spec_.kind == config::OptimKind::sgd) {
                    const float mu = static_cast<float>(spec_.momentum);
                    for (size_t i = 0; i < val.size(); ++i) {
                        m[i] = mu * m[i] + grad[i];
                        val[i] -= lr * m[i];
                    }
                } else {
                    const float b1 = static_cast<float>(spec_.adam_beta1);
                    const float b2 = static_cast<float>(spec_.adam_beta2);
                    const float eps = static_cast<float>(spec_.adam_eps);
                    const float c1 = 1.0f - std::pow(b1, static_cast<float>(t_));
                    const float c2 = 1.0f - std::pow(b2, static_cast<float>(t_));
                    for (size_t i = 0; i < val.size(); ++i) {
                        m[i] = b1 * m[i] + (1.0f - b1) * grad[i];
                        v[i] = b2 * v[i] + (1.0f - b2) * grad[i] * grad[i];
                        val[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
                    }
                }
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto* p : g.params) p->zero_grad();
    }

    // named optimizer-state records for checkpointing
    void pack(ckpt::Checkpoint& c, const std::vector<std::string>& names) const {
        size_t slot = 0;
        for (auto& g : groups_)
            for (auto* p : g.params) {
                (void)p;
                c.params.push_back({"opt/m/" + names[slot], {static_cast<int>(m_[slot].size())}, m_[slot]});
                c.params.push_back({"opt/v/" + names[slot], {static_cast<int>(v_[slot].size())}, v_[slot]});
                ++slot;
            }
    }

    int64_t steps_taken() const { return t_; }

private:
    config::OptimSpec spec_;
    std::vector<ParamGroup> groups_;
    std::vector<std::vector<float>> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Data plumbing: scenes cached per split, batches stacked on demand.

struct CachedSplit {
    std::vector<std::vector<float>> images;  // [count][H*W]
    GroundTruthSet truth;
    int h = 0, w = 0;

    static CachedSplit load(const synth::Dataset& ds) {
        CachedSplit out;
        out.h = ds.spec.image_size;
        out.w = ds.spec.image_size;
        for (int i = 0; i < ds.count; ++i) {
            auto sc = synth::render<float>(ds.spec, ds.index(i));
            out.images.push_back(sc.image.data());
            out.truth.push_back(sc.truth);
        }
        return out;
    }

    int count() const { return static_cast<int>(images.size()); }

    Tensorf batch_images(const std::vector<int>& ids) const {
        std::vector<float> data;
        data.reserve(ids.size() * images[0].size());
        for (int id : ids) data.insert(data.end(), images[static_cast<size_t>(id)].begin(), images[static_cast<size_t>(id)].end());
        return Tensorf::from({static_cast<int>(ids.size()), 1, h, w}, std::move(data));
    }

    GroundTruthSet batch_truth(const std::vector<int>& ids) const {
        GroundTruthSet out;
        for (int id : ids) out.push_back(truth[static_cast<size_t>(id)]);
        return out;
    }
};

inline std::vector<int> epoch_order(int n, uint64_t seed, int epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    CounterRng rng(seed, static_cast<uint64_t>(epoch), 9);
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    return order;
}

// ---------------------------------------------------------------------------
// Evaluation of a network on a cached split.

inline evalm::EvalReport evaluate_net(detnet::Network<float>& net, const CachedSplit& split,
                                      const config::EvalSpec& eval, int batch_size, int num_classes) {
    NoGradGuard ng;
    DetectionSet dets;
    GroundTruthSet truth;
    for (int start = 0; start < split.count(); start += batch_size) {
        std::vector<int> ids;
        for (int i = start; i < std::min(split.count(), start + batch_size); ++i) ids.push_back(i);
        auto out = detnet::forward(net, split.batch_images(ids));
        auto decoded = detnet::decode_boxes(out.head, eval.score_thresh);
        auto kept = evalm::nms(decoded, eval.nms_iou);
        for (auto& d : kept) dets.push_back(std::move(d));
        for (int id : ids) truth.push_back(split.truth[static_cast<size_t>(id)]);
    }
    return evalm::evaluate(dets, truth, num_classes, eval.score_thresh);
}

// ---------------------------------------------------------------------------
// Metrics sink: rows in the evalmetrics CSV schema, final + per-epoch rows.

struct MetricsLog {
    std::vector<std::string> rows;

    void add(const std::string& run_id, const std::string& variant, const evalm::EvalReport& r) {
        rows.push_back(evalm::csv_row(run_id, variant, r));
    }
    std::string csv() const {
        std::string out = evalm::csv_header() + "\n";
        for (const auto& r : rows) out += r + "\n";
        return out;
    }
    void write(const std::string& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw FormatError("cannot write metrics to " + path);
        os << csv();
    }
};

// ---------------------------------------------------------------------------
// Detector training (teachers, and the student-alone baseline): minimizes
// L_det only, returns the best-validation-mAP checkpoint.

struct TrainResult {
    ckpt::Checkpoint best;
    double best_val_map50 = -1.0;
    int best_epoch = -1;
    evalm::EvalReport final_val;
};

inline TrainResult train_detector(const detnet::NetConfig& net_cfg, const config::DistillConfig& cfg,
                                  const std::string& run_id, uint64_t seed, MetricsLog* log = nullptr,
                                  int epochs_override = -1) {
    auto net = detnet::build<float>(net_cfg, seed);
    auto named = net.named_params();
    ParamGroup group{{}, cfg.optim.lr_student};
    std::vector<std::string> names;
    for (auto& [name, t] : named) {
        group.params.push_back(t);
        names.push_back(name);
    }
    Optimizer opt(cfg.optim, {group});

    auto splits = synth::make_split(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
    auto train_split = CachedSplit::load(splits.train);
    auto val_split = CachedSplit::load(splits.val);

    const int epochs = epochs_override > 0 ? epochs_override : cfg.train.teacher_epochs;
    const int bs = cfg.train.batch_size;
    TrainResult result;
    int64_t global_step = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = epoch_order(train_split.count(), seed, epoch);
        for (int start = 0; start + bs <= train_split.count(); start += bs) {
            std::vector<int> ids(order.begin() + start, order.begin() + start + bs);
            auto images = train_split.batch_images(ids);
            auto truth = train_split.batch_truth(ids);
            auto out = detnet::forward(net, images);
            auto parts = losses::det_loss_parts(out.head, truth, cfg.weights, net_cfg.reg_bins);
            const float total = parts.total.item();
            if (!std::isfinite(total))
                throw NumericError("training diverged at step " + std::to_string(global_step) + " (qfl=" +
                                   std::to_string(parts.qfl_term.item()) + ", dfl=" +
                                   std::to_string(parts.dfl_term.item()) + ", giou=" +
                                   std::to_string(parts.giou_term.item()) + ")");
            opt.zero_grad();
            backward(parts.total);
            opt.step();
            ++global_step;
        }
        auto rep = evaluate_net(net, val_split, cfg.eval, bs, net_cfg.num_classes);
        if (log) log->add(run_id + "@epoch" + std::to_string(epoch), "epoch", rep);
        if (rep.map_50 > result.best_val_map50) {
            result.best_val_map50 = rep.map_50;
            result.best_epoch = epoch;
            result.final_val = rep;
            ckpt::Checkpoint c;
            c.epoch = static_cast<uint32_t>(epoch);
            c.config_hash = config::config_hash(cfg);
            c.rng_state = seed;
            ckpt::pack_params<float>(c, net.named_params());
            result.best = std::move(c);
        }
    }
    if (log) log->add(run_id, role_name(net_cfg.role), result.final_val);
    return result;
}

// ---------------------------------------------------------------------------
// Distillation apparatus

struct DistillApparatus {
    config::DistillConfig cfg;
    uint64_t seed = 0;
    std::vector<detnet::Network<float>> teachers;  // small, mid, large
    std::vector<uint64_t> teacher_checksums;
    detnet::Network<float> student;
    int levels = 0;
    int fusion_channels = 0;
    std::vector<std::vector<int>> fusion_dims;                     // per level {h, w}
    std::vector<std::vector<fusion::AlignSpec<float>>> t_align;    // [teacher][level], frozen
    std::vector<fusion::FusionParams<float>> lwff;                 // per level, frozen
    std::vector<fusion::AlignSpec<float>> s_align;                 // per level, trainable
    aatm::Generator<float> gen;                                    // trainable (when AATM on)
    std::vector<aatm::Discriminator<float>> discs;                 // per level (when AATM on)

    uint64_t teacher_checksum() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& c : teacher_checksums) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    std::vector<Tensorf*> student_side_params() {
        std::vector<Tensorf*> out;
        for (auto& [name, t] : student.named_params()) out.push_back(t);
        for (auto& a : s_align) {
            out.push_back(&a.conv_weight);
            out.push_back(&a.conv_bias);
        }
        return out;
    }

    // teacher branch under no-grad: forward all three, align, fuse
    std::vector<Tensorf> fuse_teachers(const Tensorf& images) {
        NoGradGuard ng;
        std::vector<detnet::PyramidFeatures<float>> pyramids;
        for (auto& t : teachers) pyramids.push_back(detnet::forward(t, images).pyramid);
        std::vector<Tensorf> fused;
        for (int lv = 0; lv < levels; ++lv) {
            std::vector<Tensorf> aligned;
            for (size_t ti = 0; ti < teachers.size(); ++ti)
                aligned.push_back(fusion::afa_apply(pyramids[ti][static_cast<size_t>(lv)],
                                                    t_align[ti][static_cast<size_t>(lv)]));
            if (cfg.fusion == config::FusionMode::lwff)
                fused.push_back(fusion::lwff_fuse(aligned, lwff[static_cast<size_t>(lv)]));
            else
                fused.push_back(fusion::fuse_baselines(
                    aligned, cfg.fusion == config::FusionMode::sum ? fusion::BaselineFuse::sum
                                                                   : fusion::BaselineFuse::concat));
        }
        return fused;
    }

    // student branch with gradients: align each level, then generate
    std::vector<Tensorf> student_branch(const detnet::PyramidFeatures<float>& pyramid) {
        std::vector<Tensorf> out;
        for (int lv = 0; lv < levels; ++lv) {
            Tensorf aligned = fusion::afa_apply(pyramid[static_cast<size_t>(lv)], s_align[static_cast<size_t>(lv)]);
            out.push_back(cfg.use_aatm ? aatm::generate(gen, aligned) : aligned);
        }
        return out;
    }
};

inline DistillApparatus make_apparatus(const config::DistillConfig& cfg, const std::vector<ckpt::Checkpoint>& tckpts,
                                       uint64_t seed) {
    if (tckpts.size() != 3) throw ContractError("distill: expected 3 teacher checkpoints");
    DistillApparatus ap;
    ap.cfg = cfg;
    ap.seed = seed;
    const detnet::Role roles[3] = {detnet::Role::teacher_small, detnet::Role::teacher_mid,
                                   detnet::Role::teacher_large};
    for (int i = 0; i < 3; ++i) {
        auto tcfg = cfg.teacher_as_built(roles[i]);
        auto net = detnet::build<float>(tcfg, seed);
        auto named = net.named_params();
        ckpt::Checkpoint c = tckpts[static_cast<size_t>(i)];
        ckpt::unpack_params<float>(c, named);
        for (auto& [name, t] : named) t->set_requires_grad(false);
        ap.teacher_checksums.push_back(ckpt::params_checksum<float>(named));
        ap.teachers.push_back(std::move(net));
    }
    ap.student = detnet::build<float>(cfg.student_as_built(), seed);

    ap.levels = cfg.student.pyramid_levels;
    ap.fusion_channels = cfg.teacher_small.pyramid_channels;
    const int img = cfg.scene.image_size;
    for (int lv = 0; lv < ap.levels; ++lv) {
        const int stride = cfg.student.stride_of(lv);
        ap.fusion_dims.push_back({img / stride, img / stride});
    }

    // frozen teacher-side alignment + fusion, deterministic from the seed
    uint64_t next = 0;
    auto align_spec = [&](int cin, int lv) {
        CounterRng rng(seed, next++, 8);
        fusion::AlignSpec<float> a;
        a.in_channels = cin;
        a.out_channels = ap.fusion_channels;
        a.out_h = ap.fusion_dims[static_cast<size_t>(lv)][0];
        a.out_w = ap.fusion_dims[static_cast<size_t>(lv)][1];
        a.conv_weight = init::he_normal<float>({ap.fusion_channels, cin, 1, 1}, rng);
        a.conv_weight.set_requires_grad(false);
        a.conv_bias = Tensorf::zeros({ap.fusion_channels});
        return a;
    };
    const int tch[3] = {cfg.teacher_small.pyramid_channels, cfg.teacher_mid.pyramid_channels,
                        cfg.teacher_large.pyramid_channels};
    for (int ti = 0; ti < 3; ++ti) {
        std::vector<fusion::AlignSpec<float>> per_level;
        for (int lv = 0; lv < ap.levels; ++lv) per_level.push_back(align_spec(tch[ti], lv));
        ap.t_align.push_back(std::move(per_level));
    }
    for (int lv = 0; lv < ap.levels; ++lv) {
        fusion::FusionParams<float> fp;
        fp.k = 3;
        for (int ti = 0; ti < 3; ++ti)
            fp.heads.push_back({Tensorf::zeros({ap.fusion_channels, ap.fusion_channels, 1, 1}),
                                Tensorf::zeros({ap.fusion_channels})});
        fp.merge_weight = fusion::concat_mean_merge_weight<float>(3, ap.fusion_channels);
        fp.merge_bias = Tensorf::zeros({ap.fusion_channels});
        ap.lwff.push_back(std::move(fp));
    }

    // trainable student-side alignment (spatial identity, channel projection)
    for (int lv = 0; lv < ap.levels; ++lv) {
        CounterRng rng(seed, next++, 8);
        fusion::AlignSpec<float> a;
        a.in_channels = cfg.student.pyramid_channels;
        a.out_channels = ap.fusion_channels;
        a.out_h = ap.fusion_dims[static_cast<size_t>(lv)][0];
        a.out_w = ap.fusion_dims[static_cast<size_t>(lv)][1];
        a.conv_weight = init::he_normal<float>({ap.fusion_channels, cfg.student.pyramid_channels, 1, 1}, rng);
        a.conv_bias = init::zero_param<float>({ap.fusion_channels});
        ap.s_align.push_back(std::move(a));
    }

    if (cfg.use_aatm) {
        CounterRng grng(seed, next++, 8);
        ap.gen = aatm::Generator<float>::make(ap.fusion_channels, grng);
        for (int lv = 0; lv < ap.levels; ++lv) {
            CounterRng drng(seed, next++, 8);
            const int dim = ap.fusion_channels * ap.fusion_dims[static_cast<size_t>(lv)][0] *
                            ap.fusion_dims[static_cast<size_t>(lv)][1];
            ap.discs.push_back(aatm::Discriminator<float>::make(dim, drng));
        }
    }
    return ap;
}

struct DistillResult {
    ckpt::Checkpoint best;
    double best_val_map50 = -1.0;
    int best_epoch = -1;
    evalm::EvalReport final_val;
    uint64_t teacher_checksum_before = 0, teacher_checksum_after = 0;
};

inline DistillResult distill(const config::DistillConfig& cfg, const std::vector<ckpt::Checkpoint>& tckpts,
                             const std::string& run_id, uint64_t seed, MetricsLog* log = nullptr) {
    cfg.validate();
    DistillApparatus ap = make_apparatus(cfg, tckpts, seed);
    DistillResult result;
    result.teacher_checksum_before = ap.teacher_checksum();

    auto splits = synth::make_split(cfg.scene, cfg.train.n_train, cfg.train.n_val, cfg.train.n_test);
    auto train_split = CachedSplit::load(splits.train);
    auto val_split = CachedSplit::load(splits.val);
    const int bs = cfg.train.batch_size;

    // frozen targets: one pass over the train set
    std::vector<std::vector<std::vector<float>>> target_cache(static_cast<size_t>(ap.levels));
    for (auto& lv : target_cache) lv.resize(static_cast<size_t>(train_split.count()));
    for (int start = 0; start < train_split.count(); start += bs) {
        std::vector<int> ids;
        for (int i = start; i < std::min(train_split.count(), start + bs); ++i) ids.push_back(i);
        auto fused = ap.fuse_teachers(train_split.batch_images(ids));
        for (int lv = 0; lv < ap.levels; ++lv) {
            const auto& data = fused[static_cast<size_t>(lv)].data();
            const int64_t per = fused[static_cast<size_t>(lv)].size() / static_cast<int64_t>(ids.size());
            for (size_t j = 0; j < ids.size(); ++j)
                target_cache[static_cast<size_t>(lv)][static_cast<size_t>(ids[j])] =
                    std::vector<float>(data.begin() + static_cast<int64_t>(j) * per,
                                       data.begin() + static_cast<int64_t>(j + 1) * per);
        }
    }
    auto batch_targets = [&](const std::vector<int>& ids) {
        std::vector<Tensorf> out;
        for (int lv = 0; lv < ap.levels; ++lv) {
            std::vector<float> data;
            for (int id : ids)
                data.insert(data.end(), target_cache[static_cast<size_t>(lv)][static_cast<size_t>(id)].begin(),
                            target_cache[static_cast<size_t>(lv)][static_cast<size_t>(id)].end());
            out.push_back(Tensorf::from({static_cast<int>(ids.size()), ap.fusion_channels,
                                         ap.fusion_dims[static_cast<size_t>(lv)][0],
                                         ap.fusion_dims[static_cast<size_t>(lv)][1]},
                                        std::move(data)));
        }
        return out;
    };

    // optimizers: student+align+generator under total_loss, D under d_loss
    std::vector<std::string> names;
    ParamGroup sgroup{{}, cfg.optim.lr_student};
    for (auto& [name, t] : ap.student.named_params()) {
        sgroup.params.push_back(t);
        names.push_back("student/" + name);
    }
    for (size_t lv = 0; lv < ap.s_align.size(); ++lv) {
        sgroup.params.push_back(&ap.s_align[lv].conv_weight);
        sgroup.params.push_back(&ap.s_align[lv].conv_bias);
        names.push_back("align" + std::to_string(lv) + "/w");
        names.push_back("align" + std::to_string(lv) + "/b");
    }
    ParamGroup ggroup{{}, cfg.optim.lr_generator};
    if (cfg.use_aatm) {
        int gi = 0;
        for (auto* p : ap.gen.params()) {
            ggroup.params.push_back(p);
            names.push_back("gen/p" + std::to_string(gi++));
        }
    }
    Optimizer student_opt(cfg.optim, {sgroup, ggroup});

    std::vector<Optimizer> d_opts;
    if (cfg.use_aatm)
        for (auto& d : ap.discs) {
            ParamGroup dg{{}, cfg.optim.lr_discriminator};
            for (auto* p : d.params()) dg.params.push_back(p);
            d_opts.emplace_back(cfg.optim, std::vector<ParamGroup>{dg});
        }

    int64_t global_step = 0;
    for (int epoch = 0; epoch < cfg.train.distill_epochs; ++epoch) {
        auto order = epoch_order(train_split.count(), seed, epoch);
        for (int start = 0; start + bs <= train_split.count(); start += bs) {
            std::vector<int> ids(order.begin() + start, order.begin() + start + bs);
            auto images = train_split.batch_images(ids);
            auto truth = train_split.batch_truth(ids);
            auto targets = batch_targets(ids);

            auto out = detnet::forward(ap.student, images);
            auto generated = ap.student_branch(out.pyramid);

            // (1) discriminator updates on this fixed batch
            if (cfg.use_aatm) {
                for (int ds = 0; ds < cfg.train.d_steps_per_student_step; ++ds) {
                    for (int lv = 0; lv < ap.levels; ++lv) {
                        aatm::AdversarialBatch<float> b{lv, targets[static_cast<size_t>(lv)],
                                                        generated[static_cast<size_t>(lv)]};
                        auto dl = aatm::d_loss(b, ap.discs[static_cast<size_t>(lv)]);
                        d_opts[static_cast<size_t>(lv)].zero_grad();
                        backward(dl);
                        d_opts[static_cast<size_t>(lv)].step();
                    }
                }
            }

            // (2) student + generator + alignment update on the total loss
            auto l_det = losses::det_loss(out.head, truth, cfg.weights, cfg.student.reg_bins);
            auto l_dist = losses::dist_loss_pregenerated(targets, generated);
            Tensorf l_adv = Tensorf::zeros({1});
            if (cfg.use_aatm) {
                for (int lv = 0; lv < ap.levels; ++lv) {
                    aatm::AdversarialBatch<float> b{lv, targets[static_cast<size_t>(lv)],
                                                    generated[static_cast<size_t>(lv)]};
                    l_adv = add(l_adv, aatm::g_loss(b, ap.discs[static_cast<size_t>(lv)],
                                                    cfg.generator_literal_loss));
                }
            }
            auto total = losses::total_loss(l_det, l_dist, l_adv, cfg.weights);
            if (!std::isfinite(total.total.item()))
                throw NumericError("distillation diverged at step " + std::to_string(global_step) + " (det=" +
                                   std::to_string(total.det) + ", dist=" + std::to_string(total.dist) + ", adv=" +
                                   std::to_string(total.adv) + ")");
            student_opt.zero_grad();
            backward(total.total);
            student_opt.step();
            ++global_step;
        }
        auto rep = evaluate_net(ap.student, val_split, cfg.eval, bs, cfg.student.num_classes);
        if (log) log->add(run_id + "@epoch" + std::to_string(epoch), "epoch", rep);
        if (rep.map_50 > result.best_val_map50) {
            result.best_val_map50 = rep.map_50;
            result.best_epoch = epoch;
            result.final_val = rep;
            ckpt::Checkpoint c;
            c.epoch = static_cast<uint32_t>(epoch);
            c.config_hash = config::config_hash(cfg);
            c.rng_state = seed;
            ckpt::pack_params<float>(c, ap.student.named_params(), "student/");
            for (size_t lv = 0; lv < ap.s_align.size(); ++lv) {
                ckpt::pack_params<float>(
                    c, {{"align" + std::to_string(lv) + "/w", &ap.s_align[lv].conv_weight},
                        {"align" + std::to_string(lv) + "/b", &ap.s_align[lv].conv_bias}});
            }
            if (cfg.use_aatm) {
                int gi = 0;
                for (auto* p : ap.gen.params())
                    ckpt::pack_params<float>(c, {{"gen/p" + std::to_string(gi++), p}});
            }
            result.best = std::move(c);
        }
    }
    result.teacher_checksum_after = ap.teacher_checksum();
    if (result.teacher_checksum_after != result.teacher_checksum_before)
        throw NumericError("frozen-teacher contract violated: parameter checksum changed during distillation");
    if (log) log->add(run_id, "distill", result.final_val);
    return result;
}

// Evaluate a trained checkpoint (detector-only parameters) on a chosen split.
inline evalm::EvalReport evaluate_checkpoint(const config::DistillConfig& cfg, const detnet::NetConfig& net_cfg,
                                             ckpt::Checkpoint& c, const synth::Dataset& ds,
                                             const std::string& prefix = "") {
    auto net = detnet::build<float>(net_cfg, c.rng_state);
    ckpt::unpack_params<float>(c, net.named_params(), prefix);
    auto split = CachedSplit::load(ds);
    return evaluate_net(net, split, cfg.eval, cfg.train.batch_size, net_cfg.num_classes);
}

// ---------------------------------------------------------------------------
// Ablation harness: shared seeds, one CSV row per (variant, seed), mean rows.

struct Variant {
    std::string name;
    bool use_nmode2 = true;
    bool use_aatm = true;
    config::FusionMode fusion = config::FusionMode::lwff;
    detnet::Placement placement{false, false, true};
};

inline std::vector<Variant> table3_grid() {
    return {{"baseline_kd", false, false, config::FusionMode::concat},
            {"nmode2", true, false, config::FusionMode::concat},
            {"nmode2_lwff", true, false, config::FusionMode::lwff},
            {"nmode2_lwff_aatm", true, true, config::FusionMode::lwff}};
}

inline std::vector<Variant> table2_grid() {
    return {{"place_backbone", true, true, config::FusionMode::lwff, {true, false, false}},
            {"place_fpn", true, true, config::FusionMode::lwff, {false, true, false}},
            {"place_head", true, true, config::FusionMode::lwff, {false, false, true}}};
}

inline std::vector<Variant> table4_grid() {
    return {{"fuse_sum", true, true, config::FusionMode::sum},
            {"fuse_concat", true, true, config::FusionMode::concat},
            {"fuse_lwff", true, true, config::FusionMode::lwff}};
}

inline config::DistillConfig apply_variant(const config::DistillConfig& base, const Variant& v) {
    config::DistillConfig c = base;
    c.use_nmode2 = v.use_nmode2;
    c.use_aatm = v.use_aatm;
    c.fusion = v.fusion;
    c.student.nmode2_placement = v.placement;
    return c;
}

// Teachers are a pure function of (config, seed); reuse them across variants.
inline std::vector<ckpt::Checkpoint> train_teachers(const config::DistillConfig& cfg, uint64_t seed,
                                                    MetricsLog* log = nullptr) {
    std::vector<ckpt::Checkpoint> out;
    for (auto role : {detnet::Role::teacher_small, detnet::Role::teacher_mid, detnet::Role::teacher_large}) {
        auto r = train_detector(cfg.teacher_as_built(role), cfg, std::string(role_name(role)) + "-s" +
                                    std::to_string(seed),
                                seed, log);
        out.push_back(std::move(r.best));
    }
    return out;
}

inline MetricsLog ablate(const config::DistillConfig& base, const std::vector<Variant>& grid,
                         const std::vector<uint64_t>& seeds) {
    base.validate();
    MetricsLog log;
    struct Acc {
        double map50 = 0, map5095 = 0, recall = 0;
        int n = 0;
    };
    std::map<std::string, Acc> acc;
    auto splits = synth::make_split(base.scene, base.train.n_train, base.train.n_val, base.train.n_test);
    for (uint64_t seed : seeds) {
        auto teachers = train_teachers(base, seed);
        for (const auto& v : grid) {
            const std::string run_id = v.name + "-s" + std::to_string(seed);
            try {
                auto cfg = apply_variant(base, v);
                auto res = distill(cfg, teachers, run_id, seed);
                auto rep = evaluate_checkpoint(cfg, cfg.student_as_built(), res.best, splits.test, "student/");
                log.add(run_id, v.name, rep);
                auto& a = acc[v.name];
                a.map50 += rep.map_50;
                a.map5095 += rep.map_50_95;
                a.recall += rep.recall;
                ++a.n;
            } catch (const std::exception& e) {
                evalm::EvalReport failed;
                failed.map_50 = failed.map_50_95 = failed.recall = -1.0;
                log.add(run_id, v.name + ":failed", failed);
            }
        }
    }
    for (const auto& v : grid) {
        auto it = acc.find(v.name);
        if (it == acc.end() || it->second.n == 0) continue;
        evalm::EvalReport meanrep;
        meanrep.map_50 = it->second.map50 / it->second.n;
        meanrep.map_50_95 = it->second.map5095 / it->second.n;
        meanrep.recall = it->second.recall / it->second.n;
        log.add(v.name + "-mean", v.name, meanrep);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Run metadata: configs, seeds, overrides and deviation flags, so every
// experiment is self-describing.

inline void write_metadata(const std::string& path, const config::DistillConfig& cfg, const std::string& command,
                           uint64_t seed, const std::vector<std::string>& overrides) {
    nlohmann::json j;
    j["command"] = command;
    j["seed"] = seed;
    j["overrides"] = overrides;
    j["deviation_flags"] = cfg.deviation_flags();
    j["config"] = config::to_json(cfg);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw FormatError("cannot write metadata to " + path);
    os << j.dump(2) << "\n";
}

}  // namespace meddet::pipeline
