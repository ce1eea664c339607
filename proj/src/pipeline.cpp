#include "scenebooth/pipeline.hpp"

#include <malloc.h>

#include <atomic>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "scenebooth/checkpoint.hpp"
#include "scenebooth/errors.hpp"

namespace scenebooth::pipeline {

using nlohmann::json;

void tune_allocator() {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
}

void set_seed(config::run_config& cfg, std::uint64_t seed) {
    cfg.seed            = seed;
    cfg.layout.train.seed = seed;
    cfg.paint.train.seed  = seed;
}

std::vector<data::scene_sample> dataset::subset(const std::vector<int>& idx) const {
    std::vector<data::scene_sample> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(samples[i]);
    return out;
}

dataset make_synthetic(const config::run_config& cfg) {
    const auto& d = cfg.data;
    if (d.train_count < 1 || d.val_count < 0 || d.test_count < 0)
        throw invalid_range_error("synthetic dataset: counts must be positive");
    std::mt19937_64 rng(cfg.seed);
    dataset ds;
    ds.samples = data::synth_generate(d.grammar, d.train_count + d.val_count + d.test_count, rng);
    for (int i = d.train_count + d.val_count; i < static_cast<int>(ds.samples.size()); ++i)
        ds.samples[i].source_split = "val";
    const double fraction = static_cast<double>(d.train_count) / (d.train_count + d.val_count);
    ds.split = data::filter_and_split(ds.samples, rng, fraction, d.grammar.min_objects, d.grammar.max_objects);
    return ds;
}

std::vector<layoutgen::training_example> layout_examples(const std::vector<data::scene_sample>& samples) {
    std::vector<layoutgen::training_example> out;
    out.reserve(samples.size());
    for (auto& s : samples) out.push_back(layoutgen::make_example(s.objects, data::extract_subject(s), s.caption));
    return out;
}

std::vector<metrics::palette_entry> palette_of(const data::synthetic_grammar& g) {
    std::vector<metrics::palette_entry> out;
    for (auto& c : g.categories) out.push_back({c.name, c.rgb()});
    return out;
}

layout_bundle make_layout(const config::run_config& cfg) {
    layout_bundle b;
    b.cfg   = cfg;
    b.model = std::make_unique<layoutgen::layout_denoiser>(cfg.layout.model, cfg.seed ^ 0x1a7e0u);
    b.enc.text    = encoders::toy_text_encoder(cfg.layout.model.text_dim);
    b.enc.vision  = encoders::toy_vision_encoder(cfg.layout.model.vis_dim);
    b.enc.augment = cfg.layout.augment;
    b.schedule    = cfg.layout.schedule.build();
    return b;
}

paint_bundle make_paint(const config::run_config& cfg) {
    paint_bundle b;
    b.cfg      = cfg;
    b.model    = std::make_unique<paintnet::paint_unet>(cfg.paint.model, cfg.seed ^ 0x9a1e7u);
    b.schedule = cfg.paint.schedule.build();
    return b;
}

layout_bundle load_layout(const std::filesystem::path& ckpt) {
    auto h = checkpoint::read_header(ckpt);
    auto b = make_layout(config::from_json(h.config));
    checkpoint::load(ckpt, b.model->params(), nullptr, "layout");
    return b;
}

paint_bundle load_paint(const std::filesystem::path& ckpt) {
    auto h = checkpoint::read_header(ckpt);
    auto b = make_paint(config::from_json(h.config));
    checkpoint::load(ckpt, b.model->params(), nullptr, "paint");
    return b;
}

namespace {

// On resume, lines past the checkpoint (written before an interruption) are
// dropped so every step appears once.
std::ofstream open_log(const std::filesystem::path& path, bool append,
                       const std::function<bool(const json&)>& keep = {}) {
    if (append && keep && std::filesystem::exists(path)) {
        std::ifstream in(path);
        std::string line, kept;
        while (std::getline(in, line))
            if (!line.empty() && keep(json::parse(line))) kept += line + "\n";
        in.close();
        std::ofstream(path, std::ios::trunc) << kept;
    }
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw io_error("cannot write log " + path.string());
    return out;
}

// Run length and checkpoint spacing may change between sessions; everything
// else must match the checkpoint.
json resume_view(json j) {
    for (const char* p : {"/layout/train/iterations", "/layout/checkpoint_every", "/paint/train/base_iterations",
                          "/paint/train/iterations", "/paint/checkpoint_every"}) {
        const json::json_pointer ptr(p);
        if (j.contains(ptr)) j.at(ptr.parent_pointer()).erase(ptr.back());
    }
    return j;
}

void check_resume_config(const checkpoint::header& h, const json& current, const std::filesystem::path& path) {
    const auto stored = config::hash_json(resume_view(h.config)), now = config::hash_json(resume_view(current));
    if (stored != now)
        throw io_error("checkpoint " + path.string() + " was written with a different config (hash " + stored +
                       ", current " + now + ")");
}

}  // namespace

std::vector<layoutgen::step_record> run_train_layout(layout_bundle& b, const std::vector<data::scene_sample>& train,
                                                     const train_options& opts) {
    std::filesystem::create_directories(opts.out_dir);
    const json cfg_json = config::to_json(b.cfg);
    write_json(opts.out_dir / "config.json", cfg_json);
    layoutgen::train_state state;
    if (!opts.resume.empty()) {
        auto h = checkpoint::load(opts.resume, b.model->params(), &state.optimizer, "layout");
        check_resume_config(h, cfg_json, opts.resume);
        state.step = h.state.at("step").get<long>();
    }
    const auto ckpt = opts.out_dir / "layout.ckpt";
    const long resumed  = state.step;
    auto log = open_log(opts.out_dir / "layout_log.jsonl", !opts.resume.empty(),
                        [&](const json& r) { return r.at("step").get<long>() <= resumed; });
    const auto examples = layout_examples(train);
    const long total    = b.cfg.layout.train.iterations;
    const int every     = std::max(1, b.cfg.layout.checkpoint_every);
    auto on_step = [&](const layoutgen::step_record& r, const layoutgen::train_state& st) {
        log << json{{"step", r.step}, {"loss", r.loss}, {"grad_norm", r.grad_norm}, {"wall", r.wall_seconds}}.dump()
            << "\n";
        if (r.step % every == 0 || r.step == total) {
            log.flush();
            checkpoint::save(ckpt, "layout", cfg_json, json{{"step", r.step}}, b.model->params(), &st.optimizer);
        }
        if (!opts.quiet && (r.step % 100 == 0 || r.step == total))
            std::fprintf(stderr, "layout step %ld/%ld loss %.5f (%.1fs)\n", r.step, total, r.loss, r.wall_seconds);
    };
    auto records = layoutgen::train_layout_model(*b.model, examples, b.cfg.layout.train, b.schedule, b.enc, state,
                                                 on_step);
    if (records.empty() && !std::filesystem::exists(ckpt))
        checkpoint::save(ckpt, "layout", cfg_json, json{{"step", state.step}}, b.model->params(), &state.optimizer);
    return records;
}

std::vector<paintnet::step_record> run_train_paint(paint_bundle& b, const std::vector<data::scene_sample>& train,
                                                   const train_options& opts) {
    std::filesystem::create_directories(opts.out_dir);
    const json cfg_json = config::to_json(b.cfg);
    write_json(opts.out_dir / "config.json", cfg_json);
    paintnet::train_state state;
    if (!opts.resume.empty()) {
        const auto h0 = checkpoint::read_header(opts.resume);
        state.phase   = h0.state.at("phase").get<std::string>() == "pretrain" ? paintnet::phase::pretrain
                                                                               : paintnet::phase::adapters;
        if (state.phase == paintnet::phase::pretrain) b.model->set_phase_pretrain();
        else b.model->set_phase_adapters();
        auto h = checkpoint::load(opts.resume, b.model->params(), &state.optimizer, "paint");
        check_resume_config(h, cfg_json, opts.resume);
        state.step = h.state.at("step").get<long>();
    }
    const auto ckpt = opts.out_dir / "paint.ckpt";
    const bool resumed_pre = state.phase == paintnet::phase::pretrain;
    const long resumed     = state.step;
    auto log               = open_log(opts.out_dir / "paint_log.jsonl", !opts.resume.empty(), [&](const json& r) {
        const bool pre = r.at("phase").get<std::string>() == "pretrain";
        if (pre != resumed_pre) return pre;
        return r.at("step").get<long>() <= resumed;
    });
    const auto& tc  = b.cfg.paint.train;
    const int every = std::max(1, b.cfg.paint.checkpoint_every);
    auto on_step = [&](const paintnet::step_record& r, const paintnet::train_state& st) {
        const bool pre   = r.phase == paintnet::phase::pretrain;
        const long total = pre ? tc.base_iterations : tc.iterations;
        log << json{{"phase", pre ? "pretrain" : "adapters"},
                    {"step", r.step},
                    {"loss", r.loss},
                    {"grad_norm", r.grad_norm},
                    {"wall", r.wall_seconds}}
                   .dump()
            << "\n";
        if (r.step % every == 0 || r.step == total) {
            log.flush();
            checkpoint::save(ckpt, "paint", cfg_json,
                             json{{"phase", pre ? "pretrain" : "adapters"}, {"step", r.step}}, b.model->params(),
                             &st.optimizer);
        }
        if (!opts.quiet && (r.step % 100 == 0 || r.step == total))
            std::fprintf(stderr, "paint %s step %ld/%ld loss %.5f (%.1fs)\n", pre ? "pretrain" : "adapters", r.step,
                         total, r.loss, r.wall_seconds);
    };
    auto records = paintnet::train_paintnet(*b.model, train, tc, b.schedule, state, on_step);
    if (records.empty() && !std::filesystem::exists(ckpt))
        checkpoint::save(ckpt, "paint", cfg_json, json{{"phase", "adapters"}, {"step", state.step}},
                         b.model->params(), &state.optimizer);
    return records;
}

std::mt19937_64 layout_rng(std::uint64_t seed, long index) {
    return layoutgen::step_rng(seed ^ 0x6c61796f7574ULL, index);
}

std::mt19937_64 paint_rng(std::uint64_t seed, long index) { return layoutgen::step_rng(seed ^ 0x7061696e74ULL, index); }

void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex mu;
    int failed_at = n;
    std::exception_ptr failure;
    auto worker = [&] {
        for (int i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (i < failed_at) {
                    failed_at = i;
                    failure   = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> threads;
    for (int w = 0; w < std::min(workers, n); ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::vector<std::vector<layout>> sample_test_layouts(const std::vector<data::scene_sample>& test, int k,
                                                     const config::run_config& cfg, const layout_bundle* layout,
                                                     layout_source source, int workers) {
    if (source == layout_source::model && !layout) throw input_error("evaluation needs a layout checkpoint");
    std::vector<std::vector<scenebooth::layout>> out(test.size());
    parallel_for(static_cast<int>(test.size()), workers, [&](int i) {
        const auto& s = test[i];
        if (source == layout_source::ground_truth) {
            out[i].assign(k, s.objects);
            return;
        }
        layoutgen::scene_query q{objects_of(s.objects), data::extract_subject(s), s.caption};
        auto rng = layout_rng(cfg.seed, i);
        out[i]   = layoutgen::sample_layouts(*layout->model, q, k, layout->schedule, layout->enc, rng);
    });
    return out;
}

std::vector<paintnet::paint_result> paint_scenes(const std::vector<data::scene_sample>& test,
                                                 const std::vector<layout>& layouts, const config::run_config& cfg,
                                                 const paint_bundle& paint, int workers) {
    if (layouts.size() != test.size()) throw input_error("paint_scenes: one layout per scene expected");
    const int chunk  = std::max(1, cfg.eval.chunk);
    const int n      = static_cast<int>(test.size());
    const int chunks = (n + chunk - 1) / chunk;
    std::vector<paintnet::paint_result> out(test.size());
    parallel_for(chunks, workers, [&](int c) {
        std::vector<paintnet::paint_request> reqs;
        for (int i = c * chunk; i < std::min(n, (c + 1) * chunk); ++i)
            reqs.push_back({data::extract_subject(test[i]), layouts[i], test[i].caption, std::nullopt});
        auto rng = paint_rng(cfg.seed, c);
        auto res = paintnet::generate(*paint.model, reqs, paint.schedule, rng);
        for (std::size_t j = 0; j < res.size(); ++j) out[c * chunk + j] = std::move(res[j]);
    });
    return out;
}

eval_report evaluate(const std::vector<data::scene_sample>& test_in, const config::run_config& cfg,
                     const layout_bundle* layout, const paint_bundle* paint, const eval_options& opts) {
    std::vector<data::scene_sample> test = test_in;
    if (cfg.eval.max_samples > 0 && static_cast<int>(test.size()) > cfg.eval.max_samples)
        test.resize(cfg.eval.max_samples);
    if (test.empty()) throw input_error("evaluation: the test split is empty");
    const int kmax = *std::max_element(cfg.eval.ks.begin(), cfg.eval.ks.end());
    const auto layouts = sample_test_layouts(test, kmax, cfg, layout, opts.source, opts.workers);

    eval_report rep;
    rep.per_sample.resize(test.size());
    std::vector<double> iou_sum(cfg.eval.ks.size(), 0.0);
    double sky_ok = 0.0, rules_ok = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        json& ps = rep.per_sample[i];
        ps["id"] = test[i].id;
        json mi  = json::object();
        for (std::size_t j = 0; j < cfg.eval.ks.size(); ++j) {
            const int k    = cfg.eval.ks[j];
            const double v = metrics::max_iou_at_k(std::span(layouts[i].data(), k), test[i].objects);
            iou_sum[j] += v;
            mi[std::to_string(k)] = v;
        }
        ps["max_iou"] = mi;
        int sky = 0, rules = 0;
        for (auto& l : layouts[i]) {
            sky += data::sky_above_ground(l);
            rules += data::check_rules(cfg.data.grammar, l).empty();
        }
        ps["sky_above_ground"] = static_cast<double>(sky) / kmax;
        ps["rules_ok"]         = static_cast<double>(rules) / kmax;
        sky_ok += sky;
        rules_ok += rules;
    }
    const double n = static_cast<double>(test.size());
    for (std::size_t j = 0; j < cfg.eval.ks.size(); ++j)
        rep.metrics["max_iou@" + std::to_string(cfg.eval.ks[j])] = iou_sum[j] / n;
    rep.metrics["sky_above_ground_rate"] = sky_ok / (n * kmax);
    rep.metrics["rule_pass_rate"]        = rules_ok / (n * kmax);
    rep.metrics["samples"]               = test.size();

    if (opts.paint && paint) {
        std::vector<scenebooth::layout> first(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) first[i] = layouts[i][0];
        const auto painted = paint_scenes(test, first, cfg, *paint, opts.workers);
        const encoders::toy_vision_encoder vision(64);
        const auto palette = palette_of(cfg.data.grammar);
        std::vector<std::vector<double>> fake, real;
        std::vector<metrics::detection> dets;
        std::vector<std::vector<metrics::ground_truth_box>> gts(test.size());
        int exact = 0;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const auto& r = painted[i];
            fake.push_back(vision.encode(r.composed));
            real.push_back(vision.encode(test[i].img));
            auto d = metrics::oracle_detect(r.composed, palette,
                                            {cfg.eval.oracle_tolerance, cfg.eval.oracle_min_area},
                                            static_cast<int>(i));
            dets.insert(dets.end(), d.begin(), d.end());
            for (auto& e : first[i]) gts[i].push_back({e.object.phrase, e.box});
            bool same = true;
            for (int y = 0; y < r.mask.height && same; ++y)
                for (int x = 0; x < r.mask.width && same; ++x)
                    if (!r.mask.at(y, x))
                        for (int c = 0; c < 3; ++c) same = same && r.composed.at(c, y, x) == r.pasted.at(c, y, x);
            exact += same;
            rep.per_sample[i]["detections"]     = d.size();
            rep.per_sample[i]["subject_exact"]  = same;
        }
        if (test.size() >= 2)
            rep.metrics["toy_fid"] = metrics::frechet_distance(metrics::summarize(fake), metrics::summarize(real));
        else
            rep.metrics["toy_fid"] = nullptr;
        const auto ap                       = metrics::average_precision(dets, gts);
        rep.metrics["yolo_ap"]              = ap.ap;
        rep.metrics["yolo_ap50"]            = ap.ap50;
        rep.metrics["yolo_ap75"]            = ap.ap75;
        rep.metrics["subject_preservation"] = exact / n;
    }
    return rep;
}

void write_json(const std::filesystem::path& path, const json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw io_error(path.string() + ": " + e.what());
    }
}

}  // namespace scenebooth::pipeline
