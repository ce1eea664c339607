#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "scenebooth/checkpoint.hpp"
#include "scenebooth/config.hpp"
#include "scenebooth/data.hpp"
#include "scenebooth/errors.hpp"
#include "scenebooth/image.hpp"
#include "scenebooth/layoutgen.hpp"
#include "scenebooth/paintnet.hpp"
#include "scenebooth/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace scenebooth;

namespace {

// Bad arguments or unusable inputs named on the command line.
struct usage_error : error {
    using error::error;
};

struct common_flags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string profile;
    std::string out;
    std::optional<int> k;
    int workers = 1;
};

void add_common(CLI::App* cmd, common_flags& f) {
    cmd->add_option("--config", f.config_path, "JSON config (merged over the profile)");
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--profile", f.profile, "Base profile")->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--out", f.out, "Output directory");
    cmd->add_option("--k", f.k, "Layouts per input")->check(CLI::PositiveNumber);
    cmd->add_option("--workers", f.workers, "Worker threads")->check(CLI::PositiveNumber);
}

config::run_config resolve_config(const common_flags& f, const json* base = nullptr) {
    json j = base ? *base : json::object();
    if (!f.config_path.empty()) {
        if (!fs::exists(f.config_path)) throw io_error("config file not found: " + f.config_path);
        j.merge_patch(pipeline::read_json(f.config_path));
    }
    if (!f.profile.empty()) j["profile"] = f.profile;
    auto cfg = config::from_json(j);
    if (f.seed) pipeline::set_seed(cfg, *f.seed);
    return cfg;
}

fs::path data_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("SCENEBOOTH_DATA"); env && *env) return env;
    return "data";
}

fs::path out_dir(const common_flags& f, const char* fallback) { return f.out.empty() ? fs::path(fallback) : fs::path(f.out); }

void require_file(const fs::path& p, const char* what) {
    if (p.empty()) throw usage_error(std::string("missing ") + what);
    if (!fs::exists(p)) throw io_error(std::string(what) + " not found: " + p.string());
}

std::vector<data::scene_sample> load_split(const fs::path& root, const std::string& split) {
    require_file(root / "index.jsonl", "dataset index");
    auto s = data::read_split(root, split);
    if (s.empty()) throw usage_error("dataset " + root.string() + " has no " + split + " split");
    return s;
}

void write_lines(const fs::path& path, const std::vector<json>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw io_error("cannot write " + path.string());
    for (auto& r : rows) out << r.dump() << "\n";
}

json layout_json(const std::string& caption, const layout& l) {
    json j;
    to_json(j, layout_record{caption, l});
    return j;
}

// ---------------------------------------------------------------------------

int cmd_synth(const common_flags& f, const std::string& data_flag) {
    const auto cfg  = resolve_config(f);
    const fs::path out = f.out.empty() ? data_root(data_flag) : fs::path(f.out);
    const auto ds   = pipeline::make_synthetic(cfg);
    data::write_dataset(out, ds.samples, ds.split);
    pipeline::write_json(out / "config.json", config::to_json(cfg));
    std::fprintf(stderr, "wrote %zu scenes to %s (train %zu, val %zu, test %zu)\n", ds.samples.size(),
                 out.string().c_str(), ds.split.train.size(), ds.split.val.size(), ds.split.test.size());
    return 0;
}

struct ingest_flags {
    std::string instances, captions, images, split;
};

int cmd_ingest(const common_flags& f, const ingest_flags& in, const std::string& data_flag) {
    require_file(in.instances, "instances file");
    require_file(in.captions, "captions file");
    if (!in.images.empty() && !fs::is_directory(in.images)) throw io_error("image directory not found: " + in.images);
    const auto cfg = resolve_config(f);
    data::ingest_options opts;
    if (!in.images.empty()) opts.image_dir = fs::path(in.images);
    opts.source_split = in.split;
    data::ingest_stats stats;
    const auto samples = data::ingest_coco(in.instances, in.captions, opts, &stats);
    std::mt19937_64 rng(cfg.seed);
    const auto split   = data::filter_and_split(samples, rng);
    const fs::path out = f.out.empty() ? data_root(data_flag) : fs::path(f.out);
    data::write_dataset(out, samples, split);
    pipeline::write_json(out / "ingest.json", {{"images_total", stats.images_total},
                                               {"skipped_no_objects", stats.skipped_no_objects},
                                               {"skipped_no_caption", stats.skipped_no_caption},
                                               {"crowd_annotations", stats.crowd_annotations},
                                               {"samples", samples.size()},
                                               {"train", split.train.size()},
                                               {"val", split.val.size()},
                                               {"test", split.test.size()}});
    std::fprintf(stderr, "ingested %zu of %d images into %s\n", samples.size(), stats.images_total,
                 out.string().c_str());
    return 0;
}

int cmd_train_layout(const common_flags& f, const std::string& data_flag, const std::string& resume) {
    json base = json::object();
    if (!resume.empty()) {
        require_file(resume, "checkpoint");
        base = checkpoint::read_header(resume).config;
    }
    const auto cfg   = resolve_config(f, &base);
    const auto train = load_split(data_root(data_flag), "train");
    auto b           = pipeline::make_layout(cfg);
    pipeline::train_options opts{out_dir(f, "runs/layout"), resume, false};
    const auto log = pipeline::run_train_layout(b, train, opts);
    if (!log.empty())
        std::fprintf(stderr, "layout training done: %zu steps, final loss %.5f\n", log.size(), log.back().loss);
    return 0;
}

int cmd_train_paint(const common_flags& f, const std::string& data_flag, const std::string& resume) {
    json base = json::object();
    if (!resume.empty()) {
        require_file(resume, "checkpoint");
        base = checkpoint::read_header(resume).config;
    }
    const auto cfg   = resolve_config(f, &base);
    const auto train = load_split(data_root(data_flag), "train");
    auto b           = pipeline::make_paint(cfg);
    pipeline::train_options opts{out_dir(f, "runs/paint"), resume, false};
    const auto log = pipeline::run_train_paint(b, train, opts);
    if (!log.empty())
        std::fprintf(stderr, "paint training done: %zu steps, final loss %.5f\n", log.size(), log.back().loss);
    return 0;
}

struct generate_flags {
    std::string layout_ckpt, paint_ckpt, subject, caption;
    std::vector<std::string> phrases;
    bool all = false;
};

// One phrase per object; a leading '*' marks the subject.
std::vector<object_spec> parse_phrases(const std::vector<std::string>& raw) {
    std::vector<object_spec> out;
    int subjects = 0;
    for (auto p : raw) {
        object_spec o;
        if (!p.empty() && p[0] == '*') {
            o.is_subject = true;
            p.erase(0, 1);
            ++subjects;
        }
        if (p.empty()) throw usage_error("empty phrase");
        o.phrase = p;
        out.push_back(o);
    }
    if (subjects != 1) throw usage_error("exactly one --phrase must be marked as the subject with a leading '*'");
    return out;
}

image paint_one(const pipeline::paint_bundle& paint, const image& subject, const layout& l, const std::string& caption,
                std::optional<pixel_rect> rect, std::uint64_t seed, long index) {
    paintnet::paint_request req{subject, l, caption, rect};
    auto rng = pipeline::paint_rng(seed, index);
    return paintnet::generate(*paint.model, std::span(&req, 1), paint.schedule, rng).at(0).composed;
}

int cmd_generate(const common_flags& f, const generate_flags& g) {
    require_file(g.layout_ckpt, "layout checkpoint");
    require_file(g.paint_ckpt, "paint checkpoint");
    require_file(g.subject, "subject image");
    if (g.caption.empty()) throw usage_error("missing --caption");
    const auto objects = parse_phrases(g.phrases);
    const auto layout_model = pipeline::load_layout(g.layout_ckpt);
    const auto paint        = pipeline::load_paint(g.paint_ckpt);
    const std::uint64_t seed = f.seed.value_or(layout_model.cfg.seed);
    const int k              = f.k.value_or(1);
    image subject;
    try {
        subject = read_png(g.subject);
    } catch (const error& e) {
        throw io_error(std::string("cannot load subject image: ") + e.what());
    }

    const fs::path out = out_dir(f, "generation");
    fs::create_directories(out);
    layoutgen::scene_query q{objects, subject, g.caption};
    auto rng           = pipeline::layout_rng(seed, 0);
    const auto layouts = layoutgen::sample_layouts(*layout_model.model, q, k, layout_model.schedule, layout_model.enc, rng);

    json record = {{"caption", g.caption},
                   {"seed", seed},
                   {"k", k},
                   {"chosen", 0},
                   {"subject", "subject.png"},
                   {"layout_checkpoint", fs::absolute(g.layout_ckpt).string()},
                   {"paint_checkpoint", fs::absolute(g.paint_ckpt).string()},
                   {"layouts", json::array()},
                   {"images", json::array()}};
    for (auto& l : layouts) record["layouts"].push_back(layout_json(g.caption, l));
    const int painted = g.all ? k : 1;
    for (int i = 0; i < painted; ++i) {
        const auto img  = paint_one(paint, subject, layouts[i], g.caption, std::nullopt, seed, i);
        const auto name = "image_" + std::to_string(i) + ".png";
        write_png(out / name, img);
        record["images"].push_back({{"layout", i}, {"file", name}});
    }
    write_png(out / "subject.png", subject);
    pipeline::write_json(out / "generation.json", record);
    std::fprintf(stderr, "wrote %d image(s) and %d layout(s) to %s\n", painted, k, out.string().c_str());
    return 0;
}

struct drag_flags {
    std::string record;
    double dx = 0.0, dy = 0.0;
};

int cmd_drag(const common_flags& f, const drag_flags& d) {
    require_file(d.record, "generation record");
    const fs::path rec_path = d.record;
    const json rec          = pipeline::read_json(rec_path);
    try {
        const int chosen        = rec.at("chosen").get<int>();
        const std::string cap   = rec.at("caption").get<std::string>();
        const std::uint64_t seed = f.seed.value_or(rec.at("seed").get<std::uint64_t>());
        const fs::path subject_path = rec_path.parent_path() / rec.at("subject").get<std::string>();
        require_file(subject_path, "subject image");
        const fs::path paint_ckpt = rec.at("paint_checkpoint").get<std::string>();
        require_file(paint_ckpt, "paint checkpoint");
        const auto paint   = pipeline::load_paint(paint_ckpt);
        const image subject = read_png(subject_path);
        layout l            = layout_record_from_json(rec.at("layouts").at(chosen)).objects;

        const int W = paint.cfg.paint.model.image_size, H = W;
        const int si      = subject_index(l);
        const auto rect0  = paintnet::paintable_rect(subject, l[si].box, W);
        const int dxp     = static_cast<int>(std::lround(d.dx * W));
        const int dyp     = static_cast<int>(std::lround(d.dy * H));
        pixel_rect rect   = rect0;
        rect.x0 += dxp;
        rect.y0 += dyp;
        if (rect.x0 >= W || rect.y0 >= H || rect.x0 + rect.w <= 0 || rect.y0 + rect.h <= 0)
            throw usage_error("drag moves the subject fully off the canvas");
        rect.x0 = std::clamp(rect.x0, std::min(0, W - rect.w), std::max(0, W - rect.w));
        rect.y0 = std::clamp(rect.y0, std::min(0, H - rect.h), std::max(0, H - rect.h));
        const int sx = rect.x0 - rect0.x0, sy = rect.y0 - rect0.y0;
        l[si].box.cx += static_cast<double>(sx) / W;
        l[si].box.cy += static_cast<double>(sy) / H;

        const fs::path out = out_dir(f, "drag");
        fs::create_directories(out);
        const auto img = paint_one(paint, subject, l, cap, rect, seed, chosen);
        write_png(out / "drag.png", img);
        pipeline::write_json(out / "drag.json", {{"source", fs::absolute(rec_path).string()},
                                                 {"seed", seed},
                                                 {"delta_pixels", {sx, sy}},
                                                 {"subject_rect", {rect.x0, rect.y0, rect.w, rect.h}},
                                                 {"layout", layout_json(cap, l)},
                                                 {"image", "drag.png"}});
        std::fprintf(stderr, "subject moved by (%d, %d) px; wrote %s\n", sx, sy, (out / "drag.png").string().c_str());
    } catch (const json::exception& e) {
        throw io_error("generation record " + rec_path.string() + ": " + e.what());
    }
    return 0;
}

struct evaluate_flags {
    std::string layout_ckpt, paint_ckpt, source = "model";
    bool no_paint = false;
};

int cmd_evaluate(const common_flags& f, const evaluate_flags& e, const std::string& data_flag) {
    const auto source = e.source == "model" ? pipeline::layout_source::model : pipeline::layout_source::ground_truth;
    std::optional<pipeline::layout_bundle> layout_model;
    std::optional<pipeline::paint_bundle> paint;
    json base = json::object();
    if (source == pipeline::layout_source::model || !e.layout_ckpt.empty()) {
        require_file(e.layout_ckpt, "layout checkpoint");
        layout_model = pipeline::load_layout(e.layout_ckpt);
        base         = config::to_json(layout_model->cfg);
    }
    if (!e.no_paint && !e.paint_ckpt.empty()) {
        require_file(e.paint_ckpt, "paint checkpoint");
        paint = pipeline::load_paint(e.paint_ckpt);
        if (base.empty()) base = config::to_json(paint->cfg);
    }
    auto cfg = resolve_config(f, &base);
    if (f.k) {
        std::vector<int> ks;
        for (int k : {1, 3, 5})
            if (k < *f.k) ks.push_back(k);
        ks.push_back(*f.k);
        cfg.eval.ks = ks;
    }
    const auto test = load_split(data_root(data_flag), "test");
    pipeline::eval_options opts{source, paint.has_value(), f.workers};
    const auto rep = pipeline::evaluate(test, cfg, layout_model ? &*layout_model : nullptr, paint ? &*paint : nullptr,
                                        opts);

    const fs::path out = out_dir(f, "eval");
    fs::create_directories(out);
    const json report = {{"layout_source", e.source},
                         {"seed", cfg.seed},
                         {"config_hash", config::hash_json(config::to_json(cfg))},
                         {"ks", cfg.eval.ks},
                         {"metrics", rep.metrics}};
    pipeline::write_json(out / "report.json", report);
    write_lines(out / "per_sample.jsonl", rep.per_sample);
    std::cout << rep.metrics.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    pipeline::tune_allocator();
    CLI::App app{"scenebooth: subject-preserving scene generation"};
    app.require_subcommand(1);
    common_flags common;
    std::string data_flag, resume;

    auto* synth = app.add_subcommand("synth-data", "Generate the synthetic scene dataset");
    add_common(synth, common);
    synth->add_option("--data", data_flag, "Dataset directory (default $SCENEBOOTH_DATA or ./data)");

    ingest_flags ingest;
    auto* coco = app.add_subcommand("ingest-coco", "Convert COCO instances + captions into a dataset");
    add_common(coco, common);
    coco->add_option("--instances", ingest.instances, "instances_*.json")->required();
    coco->add_option("--captions", ingest.captions, "captions_*.json")->required();
    coco->add_option("--images", ingest.images, "Directory of PNG images");
    coco->add_option("--split", ingest.split, "Source split (default: from the file name)");
    coco->add_option("--data", data_flag, "Dataset directory");

    auto* tl = app.add_subcommand("train-layout", "Train the layout generator");
    add_common(tl, common);
    tl->add_option("--data", data_flag, "Dataset directory");
    tl->add_option("--resume", resume, "Checkpoint to continue from");

    auto* tp = app.add_subcommand("train-paint", "Train the painter");
    add_common(tp, common);
    tp->add_option("--data", data_flag, "Dataset directory");
    tp->add_option("--resume", resume, "Checkpoint to continue from");

    generate_flags gen;
    auto* g = app.add_subcommand("generate", "Generate scenes around a subject");
    add_common(g, common);
    g->add_option("--layout-ckpt", gen.layout_ckpt, "Layout checkpoint")->required();
    g->add_option("--paint-ckpt", gen.paint_ckpt, "Paint checkpoint")->required();
    g->add_option("--subject", gen.subject, "Subject PNG (alpha = silhouette)")->required();
    g->add_option("--caption", gen.caption, "Scene caption")->required();
    g->add_option("--phrase", gen.phrases, "Object phrase; prefix the subject with '*'")->required();
    g->add_flag("--all", gen.all, "Paint every sampled layout instead of the first");

    drag_flags drag;
    auto* dr = app.add_subcommand("drag", "Move the subject of a generation and repaint");
    add_common(dr, common);
    dr->add_option("--record", drag.record, "generation.json")->required();
    dr->add_option("--dx", drag.dx, "Horizontal shift (canvas fraction)");
    dr->add_option("--dy", drag.dy, "Vertical shift (canvas fraction)");

    evaluate_flags ev;
    auto* e = app.add_subcommand("evaluate", "Evaluate on the test split");
    add_common(e, common);
    e->add_option("--data", data_flag, "Dataset directory");
    e->add_option("--layout-ckpt", ev.layout_ckpt, "Layout checkpoint");
    e->add_option("--paint-ckpt", ev.paint_ckpt, "Paint checkpoint (omit to skip image metrics)");
    e->add_option("--layout-source", ev.source, "Where layouts come from")
        ->check(CLI::IsMember({"model", "ground-truth"}));
    e->add_flag("--no-paint", ev.no_paint, "Layout metrics only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*synth) return cmd_synth(common, data_flag);
        if (*coco) return cmd_ingest(common, ingest, data_flag);
        if (*tl) return cmd_train_layout(common, data_flag, resume);
        if (*tp) return cmd_train_paint(common, data_flag, resume);
        if (*g) return cmd_generate(common, gen);
        if (*dr) return cmd_drag(common, drag);
        if (*e) return cmd_evaluate(common, ev, data_flag);
    } catch (const usage_error& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    } catch (const io_error& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 1;
    }
    return 2;
}
