#include "scenebooth/config.hpp"

#include <cstdio>
#include <fstream>

#include "scenebooth/errors.hpp"

namespace scenebooth::config {

using nlohmann::json;

run_config desk_profile() { return run_config{}; }

run_config paper_profile() {
    run_config c;
    c.profile                    = "paper";
    c.layout.schedule.steps      = 1000;
    c.layout.train.lr            = 1e-5;
    c.layout.train.batch         = 64;
    c.layout.train.iterations    = 400000;
    c.layout.augment.canvas_size = 512;
    c.layout.checkpoint_every    = 10000;
    c.paint.schedule.steps       = 1000;
    c.paint.model.image_size     = 64;
    c.data.grammar.canvas        = 64;
    c.paint.train.lr             = 5e-5;
    c.paint.train.batch          = 8;
    c.paint.train.iterations     = 102000;
    c.paint.checkpoint_every     = 10000;
    return c;
}

run_config profile_by_name(const std::string& name) {
    if (name == "desk") return desk_profile();
    if (name == "paper") return paper_profile();
    throw invalid_range_error("unknown profile: " + name + " (expected desk or paper)");
}

namespace {

json schedule_json(const diffusion::schedule_config& s) {
    return {{"kind", diffusion::to_string(s.kind)}, {"steps", s.steps}, {"beta_start", s.beta_start},
            {"beta_end", s.beta_end}};
}

diffusion::schedule_config schedule_from(const json& j) {
    diffusion::schedule_config s;
    s.kind       = diffusion::parse_schedule_kind(j.at("kind").get<std::string>());
    s.steps      = j.at("steps").get<int>();
    s.beta_start = j.at("beta_start").get<double>();
    s.beta_end   = j.at("beta_end").get<double>();
    return s;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& path) {
    if (!j.is_object()) throw io_error("config: " + path + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (auto* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw io_error("config: unknown key " + path + "/" + it.key());
    }
}

}  // namespace

json to_json(const run_config& c) {
    json grammar;
    data::to_json(grammar, c.data.grammar);
    const auto& lm = c.layout.model;
    const auto& lt = c.layout.train;
    const auto& pm = c.paint.model;
    const auto& pt = c.paint.train;
    return {
        {"profile", c.profile},
        {"seed", c.seed},
        {"data",
         {{"train_count", c.data.train_count},
          {"val_count", c.data.val_count},
          {"test_count", c.data.test_count},
          {"grammar", grammar}}},
        {"layout",
         {{"model",
           {{"frequencies", lm.frequencies},
            {"geometry_scale", lm.geometry_scale},
            {"text_dim", lm.text_dim},
            {"vis_dim", lm.vis_dim},
            {"width", lm.width},
            {"heads", lm.heads},
            {"blocks", lm.blocks},
            {"ff_mult", lm.ff_mult},
            {"max_objects", lm.max_objects}}},
          {"schedule", schedule_json(c.layout.schedule)},
          {"train",
           {{"lr", lt.lr}, {"batch", lt.batch}, {"iterations", lt.iterations}, {"grad_clip", lt.grad_clip}}},
          {"augment",
           {{"canvas_size", c.layout.augment.canvas_size},
            {"scale_min", c.layout.augment.scale_min},
            {"scale_max", c.layout.augment.scale_max}}},
          {"checkpoint_every", c.layout.checkpoint_every}}},
        {"paint",
         {{"model",
           {{"image_size", pm.image_size},
            {"ch0", pm.ch0},
            {"ch1", pm.ch1},
            {"groups", pm.groups},
            {"heads", pm.heads},
            {"time_dim", pm.time_dim},
            {"text_dim", pm.text_dim},
            {"frequencies", pm.frequencies},
            {"grounding_hidden", pm.grounding_hidden},
            {"max_objects", pm.max_objects},
            {"attention", pm.attention == paintnet::attention_kind::gated_self ? "gated_self" : "gated_cross"}}},
          {"schedule", schedule_json(c.paint.schedule)},
          {"train",
           {{"base_lr", pt.base_lr},
            {"base_iterations", pt.base_iterations},
            {"lr", pt.lr},
            {"batch", pt.batch},
            {"iterations", pt.iterations},
            {"grad_clip", pt.grad_clip},
            {"strategy", paintnet::to_string(pt.strategy)}}},
          {"checkpoint_every", c.paint.checkpoint_every}}},
        {"eval",
         {{"ks", c.eval.ks},
          {"max_samples", c.eval.max_samples},
          {"chunk", c.eval.chunk},
          {"oracle_tolerance", c.eval.oracle_tolerance},
          {"oracle_min_area", c.eval.oracle_min_area}}},
    };
}

run_config from_json(const json& in) {
    if (!in.is_object()) throw io_error("config: document must be a JSON object");
    try {
        const std::string profile = in.value("profile", std::string("desk"));
        json j                    = to_json(profile_by_name(profile));
        j.merge_patch(in);
        check_keys(j, {"profile", "seed", "data", "layout", "paint", "eval"}, "");
        check_keys(j["data"], {"train_count", "val_count", "test_count", "grammar"}, "/data");
        check_keys(j["layout"], {"model", "schedule", "train", "augment", "checkpoint_every"}, "/layout");
        check_keys(j["paint"], {"model", "schedule", "train", "checkpoint_every"}, "/paint");
        check_keys(j["eval"], {"ks", "max_samples", "chunk", "oracle_tolerance", "oracle_min_area"}, "/eval");
        check_keys(j["layout"]["train"], {"lr", "batch", "iterations", "grad_clip"}, "/layout/train");
        check_keys(j["paint"]["train"],
                   {"base_lr", "base_iterations", "lr", "batch", "iterations", "grad_clip", "strategy"}, "/paint/train");

        run_config c;
        c.profile = j.at("profile").get<std::string>();
        c.seed    = j.at("seed").get<std::uint64_t>();

        const auto& d     = j.at("data");
        c.data.train_count = d.at("train_count").get<int>();
        c.data.val_count   = d.at("val_count").get<int>();
        c.data.test_count  = d.at("test_count").get<int>();
        c.data.grammar     = data::grammar_from_json(d.at("grammar"));

        const auto& l  = j.at("layout");
        const auto& lm = l.at("model");
        auto& m        = c.layout.model;
        m.frequencies    = lm.at("frequencies").get<int>();
        m.geometry_scale = lm.at("geometry_scale").get<double>();
        m.text_dim       = lm.at("text_dim").get<int>();
        m.vis_dim        = lm.at("vis_dim").get<int>();
        m.width          = lm.at("width").get<int>();
        m.heads          = lm.at("heads").get<int>();
        m.blocks         = lm.at("blocks").get<int>();
        m.ff_mult        = lm.at("ff_mult").get<int>();
        m.max_objects    = lm.at("max_objects").get<int>();
        c.layout.schedule = schedule_from(l.at("schedule"));
        const auto& lt    = l.at("train");
        c.layout.train.lr         = lt.at("lr").get<double>();
        c.layout.train.batch      = lt.at("batch").get<int>();
        c.layout.train.iterations = lt.at("iterations").get<long>();
        c.layout.train.grad_clip  = lt.at("grad_clip").get<double>();
        const auto& la            = l.at("augment");
        c.layout.augment.canvas_size = la.at("canvas_size").get<int>();
        c.layout.augment.scale_min   = la.at("scale_min").get<double>();
        c.layout.augment.scale_max   = la.at("scale_max").get<double>();
        c.layout.checkpoint_every    = l.at("checkpoint_every").get<int>();

        const auto& p  = j.at("paint");
        const auto& pm = p.at("model");
        auto& q        = c.paint.model;
        q.image_size       = pm.at("image_size").get<int>();
        q.ch0              = pm.at("ch0").get<int>();
        q.ch1              = pm.at("ch1").get<int>();
        q.groups           = pm.at("groups").get<int>();
        q.heads            = pm.at("heads").get<int>();
        q.time_dim         = pm.at("time_dim").get<int>();
        q.text_dim         = pm.at("text_dim").get<int>();
        q.frequencies      = pm.at("frequencies").get<int>();
        q.grounding_hidden = pm.at("grounding_hidden").get<int>();
        q.max_objects      = pm.at("max_objects").get<int>();
        const auto att     = pm.at("attention").get<std::string>();
        if (att == "gated_self") q.attention = paintnet::attention_kind::gated_self;
        else if (att == "gated_cross") q.attention = paintnet::attention_kind::gated_cross;
        else throw io_error("config: /paint/model/attention must be gated_self or gated_cross");
        c.paint.schedule = schedule_from(p.at("schedule"));
        const auto& pt   = p.at("train");
        auto& t          = c.paint.train;
        t.base_lr         = pt.at("base_lr").get<double>();
        t.base_iterations = pt.at("base_iterations").get<long>();
        t.lr              = pt.at("lr").get<double>();
        t.batch           = pt.at("batch").get<int>();
        t.iterations      = pt.at("iterations").get<long>();
        t.grad_clip       = pt.at("grad_clip").get<double>();
        t.strategy        = paintnet::parse_mask_strategy(pt.at("strategy").get<std::string>());
        c.paint.checkpoint_every = p.at("checkpoint_every").get<int>();

        const auto& e = j.at("eval");
        c.eval.ks               = e.at("ks").get<std::vector<int>>();
        c.eval.max_samples      = e.at("max_samples").get<int>();
        c.eval.chunk            = e.at("chunk").get<int>();
        c.eval.oracle_tolerance = e.at("oracle_tolerance").get<double>();
        c.eval.oracle_min_area  = e.at("oracle_min_area").get<int>();
        if (c.eval.ks.empty()) throw io_error("config: /eval/ks must not be empty");
        for (int k : c.eval.ks)
            if (k < 1) throw io_error("config: /eval/ks entries must be >= 1");
        if (c.eval.chunk < 1) throw io_error("config: /eval/chunk must be >= 1");
        c.layout.train.seed = c.seed;
        c.paint.train.seed  = c.seed;
        return c;
    } catch (const json::exception& e) {
        throw io_error(std::string("config: ") + e.what());
    }
}

run_config load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw io_error("config " + path.string() + ": " + e.what());
    }
    return from_json(j);
}

std::string hash_json(const json& j) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : j.dump()) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace scenebooth::config
