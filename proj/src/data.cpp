#include "scenebooth/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "scenebooth/errors.hpp"

namespace scenebooth::data {

namespace fs = std::filesystem;
using nlohmann::json;

void validate_sample(const scene_sample& s) {
    if (s.objects.size() != s.instance_masks.size())
        throw input_error("sample " + s.id + ": object and mask counts differ");
    if (s.subject_index < 0 || s.subject_index >= static_cast<int>(s.objects.size()))
        throw input_error("sample " + s.id + ": subject index out of range");
    for (auto& m : s.instance_masks)
        if (m.width != s.width || m.height != s.height)
            throw input_error("sample " + s.id + ": mask size differs from image size");
    if (!s.img.empty() && (s.img.width != s.width || s.img.height != s.height))
        throw input_error("sample " + s.id + ": image size differs from recorded size");
}

// ---------------------------------------------------------------------------
// Synthetic scenes

synthetic_grammar synthetic_grammar::default_grammar() {
    synthetic_grammar g;
    g.categories = {
        {"sky", {120, 180, 240}, placement::sky_band, shape_kind::rect, {1.0, 1.0}, {0.0, 0.0}},
        {"ground", {130, 90, 50}, placement::ground_band, shape_kind::rect, {1.0, 1.0}, {0.0, 0.0}},
        {"tree", {30, 130, 40}, placement::on_ground, shape_kind::ellipse, {0.12, 0.25}, {0.25, 0.45}},
        {"house", {200, 50, 50}, placement::on_ground, shape_kind::rect, {0.2, 0.34}, {0.18, 0.3}},
        {"car", {40, 60, 210}, placement::on_ground, shape_kind::rect, {0.18, 0.3}, {0.1, 0.16}},
        {"dog", {240, 150, 50}, placement::on_ground, shape_kind::ellipse, {0.1, 0.2}, {0.08, 0.14}},
        {"person", {240, 160, 220}, placement::on_ground, shape_kind::rect, {0.07, 0.11}, {0.2, 0.32}},
        {"sun", {250, 240, 60}, placement::in_sky, shape_kind::ellipse, {0.1, 0.16}, {0.1, 0.16}},
        {"bird", {20, 20, 20}, placement::in_sky, shape_kind::rect, {0.07, 0.11}, {0.07, 0.1}},
    };
    g.caption_templates = {
        "a {subject} with {others} under the sky",
        "a photo of a {subject} near {others}",
        "{others} and a {subject} on the ground",
    };
    return g;
}

const category* synthetic_grammar::find(const std::string& name) const {
    for (auto& c : categories)
        if (c.name == name) return &c;
    return nullptr;
}

namespace {

const char* placement_name(placement p) {
    switch (p) {
        case placement::sky_band: return "sky_band";
        case placement::ground_band: return "ground_band";
        case placement::on_ground: return "on_ground";
        case placement::in_sky: return "in_sky";
    }
    return "";
}

placement parse_placement(const std::string& s) {
    if (s == "sky_band") return placement::sky_band;
    if (s == "ground_band") return placement::ground_band;
    if (s == "on_ground") return placement::on_ground;
    if (s == "in_sky") return placement::in_sky;
    throw io_error("grammar: unknown placement '" + s + "'");
}

}  // namespace

void to_json(json& j, const synthetic_grammar& g) {
    auto cats = json::array();
    for (auto& c : g.categories)
        cats.push_back({{"name", c.name},
                        {"color", c.color},
                        {"placement", placement_name(c.place)},
                        {"shape", c.shape == shape_kind::rect ? "rect" : "ellipse"},
                        {"width_range", c.width_range},
                        {"height_range", c.height_range}});
    j = {{"canvas", g.canvas},
         {"categories", std::move(cats)},
         {"object_count", {g.min_objects, g.max_objects}},
         {"horizon_range", g.horizon_range},
         {"caption_templates", g.caption_templates},
         {"max_attempts", g.max_attempts}};
}

synthetic_grammar grammar_from_json(const json& j) {
    try {
        synthetic_grammar g;
        g.canvas = j.at("canvas").get<int>();
        for (auto& c : j.at("categories")) {
            category cat;
            cat.name         = c.at("name").get<std::string>();
            cat.color        = c.at("color").get<std::array<int, 3>>();
            cat.place        = parse_placement(c.at("placement").get<std::string>());
            cat.shape        = c.value("shape", std::string("rect")) == "ellipse" ? shape_kind::ellipse : shape_kind::rect;
            cat.width_range  = c.value("width_range", std::array<double, 2>{0.1, 0.2});
            cat.height_range = c.value("height_range", std::array<double, 2>{0.1, 0.2});
            g.categories.push_back(cat);
        }
        auto cnt            = j.at("object_count").get<std::array<int, 2>>();
        g.min_objects       = cnt[0];
        g.max_objects       = cnt[1];
        g.horizon_range     = j.at("horizon_range").get<std::array<double, 2>>();
        g.caption_templates = j.at("caption_templates").get<std::vector<std::string>>();
        g.max_attempts      = j.value("max_attempts", 1000);
        std::set<std::array<int, 3>> colors;
        for (auto& c : g.categories)
            if (!colors.insert(c.color).second) throw io_error("grammar: colour reused by '" + c.name + "'");
        return g;
    } catch (const json::exception& e) {
        throw io_error(std::string("grammar: ") + e.what());
    }
}

namespace {

// Snaps a box to whole pixels so rendered extents equal the layout exactly.
bbox snap(double left, double top, double w, double h, int canvas) {
    const double px = 1.0 / canvas;
    int x0 = static_cast<int>(std::lround(left * canvas));
    int y0 = static_cast<int>(std::lround(top * canvas));
    int pw = std::max(2, static_cast<int>(std::lround(w * canvas)));
    int ph = std::max(2, static_cast<int>(std::lround(h * canvas)));
    x0 = std::clamp(x0, 0, canvas - pw);
    y0 = std::clamp(y0, 0, canvas - ph);
    return bbox::from_corners(x0 * px, y0 * px, (x0 + pw) * px, (y0 + ph) * px);
}

bool overlaps(const pixel_rect& a, const pixel_rect& b) {
    return a.x0 < b.x0 + b.w && b.x0 < a.x0 + a.w && a.y0 < b.y0 + b.h && b.y0 < a.y0 + a.h;
}

std::string join_others(const std::vector<std::string>& others) {
    if (others.empty()) return "an open field";
    std::string s;
    for (std::size_t i = 0; i < others.size(); ++i) {
        if (i > 0) s += (i + 1 == others.size()) ? " and " : ", ";
        s += "a " + others[i];
    }
    return s;
}

std::string fill_template(std::string tpl, const std::string& subject, const std::string& others) {
    auto replace = [&tpl](const std::string& key, const std::string& val) {
        for (auto pos = tpl.find(key); pos != std::string::npos; pos = tpl.find(key, pos + val.size()))
            tpl.replace(pos, key.size(), val);
    };
    replace("{subject}", subject);
    replace("{others}", others);
    return tpl;
}

std::string zero_pad(int i, int width = 6) {
    std::string s = std::to_string(i);
    return std::string(std::max(0, width - static_cast<int>(s.size())), '0') + s;
}

}  // namespace

image render_layout(const synthetic_grammar& grammar, const layout& l, std::vector<binary_mask>* visible_masks) {
    const int W = grammar.canvas;
    image img(W, W, 3, 0.0);
    std::vector<int> owner(static_cast<std::size_t>(W) * W, -1);

    std::vector<int> order(l.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_partition(order.begin(), order.end(), [&](int i) {
        auto* c = grammar.find(l[i].object.phrase);
        return c && !c->is_thing();
    });
    for (int i : order) {
        const category* cat = grammar.find(l[i].object.phrase);
        if (!cat) continue;
        const auto rgb = cat->rgb();
        const pixel_rect r = to_pixel_rect(l[i].box, W, W);
        const double rx = r.w / 2.0, ry = r.h / 2.0;
        for (int y = std::max(0, r.y0); y < std::min(W, r.y0 + r.h); ++y)
            for (int x = std::max(0, r.x0); x < std::min(W, r.x0 + r.w); ++x) {
                if (cat->shape == shape_kind::ellipse) {
                    double dx = (x + 0.5 - r.x0 - rx) / rx, dy = (y + 0.5 - r.y0 - ry) / ry;
                    if (dx * dx + dy * dy > 1.0) continue;
                }
                for (int c = 0; c < 3; ++c) img.at(c, y, x) = rgb[c];
                owner[static_cast<std::size_t>(y) * W + x] = i;
            }
    }
    if (visible_masks) {
        visible_masks->assign(l.size(), binary_mask(W, W));
        for (int y = 0; y < W; ++y)
            for (int x = 0; x < W; ++x)
                if (int o = owner[static_cast<std::size_t>(y) * W + x]; o >= 0) (*visible_masks)[o].at(y, x) = 1;
    }
    return img;
}

std::vector<scene_sample> synth_generate(const synthetic_grammar& grammar, int count, std::mt19937_64& rng) {
    if (count < 1) throw input_error("synth_generate: count must be >= 1");
    const category* sky    = nullptr;
    const category* ground = nullptr;
    std::vector<const category*> things;
    for (auto& c : grammar.categories) {
        if (c.place == placement::sky_band) sky = &c;
        else if (c.place == placement::ground_band) ground = &c;
        else things.push_back(&c);
    }
    if (!sky || !ground || things.empty()) throw input_error("synth_generate: grammar needs sky, ground and things");
    const int min_things = std::max(1, grammar.min_objects - 2);
    const int max_things = grammar.max_objects - 2;
    if (max_things < min_things) throw input_error("synth_generate: object count range too small");

    auto uni = [&rng](double a, double b) { return a >= b ? a : std::uniform_real_distribution<double>(a, b)(rng); };
    const int W = grammar.canvas;
    std::vector<scene_sample> out;
    out.reserve(count);

    for (int n = 0; n < count; ++n) {
        int attempts = 0;
        layout l;
        while (true) {
            if (++attempts > grammar.max_attempts)
                throw input_error("synth_generate: grammar unsatisfiable after " + std::to_string(grammar.max_attempts) +
                                  " attempts");
            l.clear();
            double horizon = std::lround(uni(grammar.horizon_range[0], grammar.horizon_range[1]) * W) /
                             static_cast<double>(W);
            l.push_back({{sky->name, false}, bbox::from_corners(0.0, 0.0, 1.0, horizon)});
            l.push_back({{ground->name, false}, bbox::from_corners(0.0, horizon, 1.0, 1.0)});
            const int n_things = std::uniform_int_distribution<int>(min_things, max_things)(rng);
            std::vector<pixel_rect> placed;
            bool ok = true;
            for (int k = 0; k < n_things && ok; ++k) {
                const category* cat = things[std::uniform_int_distribution<std::size_t>(0, things.size() - 1)(rng)];
                bool done = false;
                for (int tries = 0; tries < 50 && !done; ++tries) {
                    double w = uni(cat->width_range[0], cat->width_range[1]);
                    double h = uni(cat->height_range[0], cat->height_range[1]);
                    double left = uni(0.0, 1.0 - w), top = 0.0;
                    if (cat->place == placement::on_ground) {
                        double bottom = uni(horizon + 0.04, 1.0);
                        top = bottom - h;
                        if (top < 0.0) continue;
                    } else {
                        if (h > horizon - 0.04) continue;
                        top = uni(0.0, horizon - 0.04 - h);
                    }
                    bbox b = snap(left, top, w, h, W);
                    if (cat->place == placement::in_sky && b.bottom() > horizon) continue;
                    if (cat->place == placement::on_ground && b.bottom() <= horizon) continue;
                    pixel_rect r = to_pixel_rect(b, W, W);
                    if (std::any_of(placed.begin(), placed.end(), [&](const pixel_rect& p) { return overlaps(p, r); }))
                        continue;
                    placed.push_back(r);
                    l.push_back({{cat->name, false}, b});
                    done = true;
                }
                ok = done;
            }
            if (ok) break;
        }

        scene_sample s;
        s.id           = "synth_" + zero_pad(n);
        s.source_split = "train";
        s.width = s.height = W;
        const int subject = 2 + std::uniform_int_distribution<int>(0, static_cast<int>(l.size()) - 3)(rng);
        l[subject].object.is_subject = true;
        s.subject_index = subject;
        s.img = render_layout(grammar, l, &s.instance_masks);

        std::vector<std::string> others;
        for (std::size_t i = 2; i < l.size(); ++i)
            if (static_cast<int>(i) != subject) others.push_back(l[i].object.phrase);
        const auto& tpl =
            grammar.caption_templates[std::uniform_int_distribution<std::size_t>(0, grammar.caption_templates.size() - 1)(rng)];
        s.caption = fill_template(tpl, l[subject].object.phrase, join_others(others));
        s.objects = std::move(l);
        out.push_back(std::move(s));
    }
    return out;
}

bool sky_above_ground(const layout& l) {
    for (auto& a : l)
        for (auto& b : l)
            if (a.object.phrase == "sky" && b.object.phrase == "ground" && !(a.box.cy < b.box.cy)) return false;
    return true;
}

std::vector<std::string> check_rules(const synthetic_grammar& grammar, const layout& l, double tol) {
    std::vector<std::string> violated;
    if (!sky_above_ground(l)) violated.push_back("sky_above_ground");
    double horizon = -1.0;
    for (auto& e : l)
        if (auto* c = grammar.find(e.object.phrase); c && c->place == placement::ground_band) horizon = e.box.top();
    if (horizon < 0.0) return violated;
    for (auto& e : l) {
        auto* c = grammar.find(e.object.phrase);
        if (!c) continue;
        if (c->place == placement::on_ground && e.box.bottom() < horizon - tol) {
            violated.push_back("on_ground:" + e.object.phrase);
        } else if (c->place == placement::in_sky && e.box.bottom() > horizon + tol) {
            violated.push_back("in_sky:" + e.object.phrase);
        }
    }
    return violated;
}

// ---------------------------------------------------------------------------
// COCO ingestion

namespace {

json load_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw io_error("cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw io_error(p.string() + ": " + e.what());
    }
}

const json& member(const json& j, const std::string& key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) throw io_error("schema violation at " + path + "/" + key + ": missing");
    return j.at(key);
}

template <class T>
T member_as(const json& j, const std::string& key, const std::string& path) {
    const json& v = member(j, key, path);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw io_error("schema violation at " + path + "/" + key + ": unexpected type");
    }
}

}  // namespace

binary_mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int width, int height) {
    binary_mask m(width, height);
    for (auto& poly : polygons) {
        const std::size_t n = poly.size() / 2;
        if (n < 3) continue;
        for (int y = 0; y < height; ++y) {
            const double py = y + 0.5;
            for (int x = 0; x < width; ++x) {
                const double px = x + 0.5;
                bool inside = false;
                for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
                    double xi = poly[2 * i], yi = poly[2 * i + 1], xj = poly[2 * j], yj = poly[2 * j + 1];
                    if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
                }
                if (inside) m.at(y, x) = 1;
            }
        }
    }
    return m;
}

binary_mask decode_coco_rle(const json& rle, int width, int height) {
    std::vector<long> counts;
    const json& c = member(rle, "counts", "segmentation");
    if (c.is_array()) {
        for (auto& v : c) counts.push_back(v.get<long>());
    } else if (c.is_string()) {
        const std::string s = c.get<std::string>();
        std::size_t p = 0;
        while (p < s.size()) {
            long x = 0;
            int k = 0;
            bool more = true;
            while (more) {
                if (p >= s.size()) throw io_error("segmentation/counts: truncated RLE string");
                long ch = s[p] - 48;
                x |= (ch & 0x1f) << (5 * k);
                more = ch & 0x20;
                ++p;
                ++k;
                if (!more && (ch & 0x10)) x |= -1L << (5 * k);
            }
            if (counts.size() > 2) x += counts[counts.size() - 2];
            counts.push_back(x);
        }
    } else {
        throw io_error("schema violation at segmentation/counts: expected list or string");
    }
    binary_mask m(width, height);
    long pos = 0;
    const long total = static_cast<long>(width) * height;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        for (long k = 0; k < counts[i] && pos < total; ++k, ++pos) {
            if (i % 2 == 1) {
                // column-major order
                int x = static_cast<int>(pos / height), y = static_cast<int>(pos % height);
                m.at(y, x) = 1;
            }
        }
    }
    return m;
}

std::vector<scene_sample> ingest_coco(const fs::path& instances_json, const fs::path& captions_json,
                                      const ingest_options& opts, ingest_stats* stats) {
    const json inst = load_json(instances_json);
    const json caps = load_json(captions_json);
    ingest_stats st;

    std::map<long, std::string> category_names;
    const json& cats = member(inst, "categories", "");
    for (std::size_t i = 0; i < cats.size(); ++i) {
        const std::string path = "/categories/" + std::to_string(i);
        category_names[member_as<long>(cats[i], "id", path)] = member_as<std::string>(cats[i], "name", path);
    }

    std::map<long, std::pair<long, std::string>> first_caption;  // image -> (caption id, text)
    const json& cap_anns = member(caps, "annotations", "");
    for (std::size_t i = 0; i < cap_anns.size(); ++i) {
        const std::string path = "/annotations/" + std::to_string(i);
        long img_id = member_as<long>(cap_anns[i], "image_id", path);
        long cid    = member_as<long>(cap_anns[i], "id", path);
        auto text   = member_as<std::string>(cap_anns[i], "caption", path);
        auto it     = first_caption.find(img_id);
        if (it == first_caption.end() || cid < it->second.first) first_caption[img_id] = {cid, text};
    }

    std::map<long, std::vector<const json*>> anns_by_image;
    std::map<const json*, std::string> ann_paths;
    const json& anns = member(inst, "annotations", "");
    for (std::size_t i = 0; i < anns.size(); ++i) {
        const std::string path = "/annotations/" + std::to_string(i);
        anns_by_image[member_as<long>(anns[i], "image_id", path)].push_back(&anns[i]);
        ann_paths[&anns[i]] = path;
    }

    std::string source = opts.source_split;
    if (source.empty()) source = instances_json.filename().string().find("val") != std::string::npos ? "val" : "train";

    struct image_meta {
        long id;
        std::string file;
        int w, h;
    };
    std::vector<image_meta> images;
    const json& imgs = member(inst, "images", "");
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        const std::string path = "/images/" + std::to_string(i);
        images.push_back({member_as<long>(imgs[i], "id", path), imgs[i].value("file_name", std::string()),
                          member_as<int>(imgs[i], "width", path), member_as<int>(imgs[i], "height", path)});
        if (images.back().w < 1 || images.back().h < 1)
            throw io_error("schema violation at " + path + ": non-positive image size");
    }
    std::sort(images.begin(), images.end(), [](auto& a, auto& b) { return a.id < b.id; });

    std::vector<scene_sample> out;
    for (auto& meta : images) {
        ++st.images_total;
        scene_sample s;
        s.id           = std::to_string(meta.id);
        s.source_split = source;
        s.width        = meta.w;
        s.height       = meta.h;

        std::vector<const json*> list = anns_by_image[meta.id];
        std::sort(list.begin(), list.end(), [&](const json* a, const json* b) {
            return member_as<long>(*a, "id", ann_paths[a]) < member_as<long>(*b, "id", ann_paths[b]);
        });
        for (const json* a : list) {
            const std::string& path = ann_paths[a];
            if (a->value("iscrowd", 0) == 1) {
                ++st.crowd_annotations;
                continue;
            }
            auto box = member_as<std::vector<double>>(*a, "bbox", path);
            if (box.size() != 4) throw io_error("schema violation at " + path + "/bbox: expected [x,y,w,h]");
            long cat_id = member_as<long>(*a, "category_id", path);
            auto cit    = category_names.find(cat_id);
            if (cit == category_names.end())
                throw io_error("schema violation at " + path + "/category_id: unknown category " + std::to_string(cat_id));
            bbox b = clamp_box({(box[0] + box[2] / 2) / meta.w, (box[1] + box[3] / 2) / meta.h, box[2] / meta.w,
                                box[3] / meta.h});
            binary_mask mask(meta.w, meta.h);
            if (a->contains("segmentation")) {
                const json& seg = a->at("segmentation");
                if (seg.is_array()) {
                    std::vector<std::vector<double>> polys;
                    try {
                        polys = seg.get<std::vector<std::vector<double>>>();
                    } catch (const json::exception&) {
                        throw io_error("schema violation at " + path + "/segmentation: expected polygon lists");
                    }
                    mask = rasterize_polygons(polys, meta.w, meta.h);
                } else if (seg.is_object()) {
                    mask = decode_coco_rle(seg, meta.w, meta.h);
                } else {
                    throw io_error("schema violation at " + path + "/segmentation: unsupported form");
                }
            }
            s.objects.push_back({{cit->second, false}, b});
            s.instance_masks.push_back(std::move(mask));
        }
        if (s.objects.empty()) {
            ++st.skipped_no_objects;
            continue;
        }
        auto cap = first_caption.find(meta.id);
        if (cap == first_caption.end()) {
            ++st.skipped_no_caption;
            continue;
        }
        s.caption = cap->second.second;
        // Deterministic uniform subject choice keyed on the image id.
        std::mt19937_64 pick(static_cast<std::uint64_t>(meta.id) * 0x9E3779B97F4A7C15ULL + 17);
        s.subject_index = std::uniform_int_distribution<int>(0, static_cast<int>(s.objects.size()) - 1)(pick);
        s.objects[s.subject_index].object.is_subject = true;
        if (opts.image_dir) {
            fs::path p = *opts.image_dir / fs::path(meta.file).replace_extension(".png");
            if (fs::exists(p)) {
                s.img = read_png(p);
                if (s.img.has_alpha()) {
                    s.img.data.resize(3 * s.img.plane());
                    s.img.channels = 3;
                }
            }
        }
        out.push_back(std::move(s));
    }
    if (stats) *stats = st;
    return out;
}

dataset_split filter_and_split(const std::vector<scene_sample>& samples, std::mt19937_64& rng, double train_fraction,
                               int min_objects, int max_objects) {
    dataset_split split;
    std::vector<int> train_source;
    for (int i = 0; i < static_cast<int>(samples.size()); ++i) {
        const int n = static_cast<int>(samples[i].objects.size());
        if (n < min_objects || n > max_objects) continue;
        if (samples[i].source_split == "val") split.test.push_back(i);
        else train_source.push_back(i);
    }
    std::shuffle(train_source.begin(), train_source.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * train_source.size()));
    split.train.assign(train_source.begin(), train_source.begin() + n_train);
    split.val.assign(train_source.begin() + n_train, train_source.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

image extract_instance(const scene_sample& s, int index) {
    if (index < 0 || index >= static_cast<int>(s.instance_masks.size()))
        throw input_error("extract_subject: invalid subject index");
    if (s.img.empty()) throw input_error("extract_subject: sample " + s.id + " has no pixels");
    const binary_mask& m = s.instance_masks[index];
    int x0 = m.width, y0 = m.height, x1 = -1, y1 = -1;
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
            if (m.at(y, x)) {
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (x1 < 0) throw input_error("extract_subject: empty mask for object " + std::to_string(index));
    image crop(x1 - x0 + 1, y1 - y0 + 1, 4);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const bool on = m.at(y, x);
            for (int c = 0; c < 3; ++c) crop.at(c, y - y0, x - x0) = on ? s.img.at(c, y, x) : 0.0;
            crop.at(3, y - y0, x - x0) = on ? 1.0 : 0.0;
        }
    return crop;
}

image extract_subject(const scene_sample& s) { return extract_instance(s, s.subject_index); }

// ---------------------------------------------------------------------------
// On-disk datasets

std::vector<int> encode_runs(const binary_mask& m) {
    std::vector<int> runs;
    std::uint8_t cur = 0;
    int len = 0;
    for (auto v : m.data) {
        if (v != cur) {
            runs.push_back(len);
            cur = v;
            len = 0;
        }
        ++len;
    }
    runs.push_back(len);
    return runs;
}

binary_mask decode_runs(const std::vector<int>& runs, int width, int height) {
    binary_mask m(width, height);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (runs[i] < 0 || pos + runs[i] > m.data.size()) throw io_error("mask runs exceed mask size");
        if (i % 2 == 1) std::fill_n(m.data.begin() + pos, runs[i], std::uint8_t{1});
        pos += runs[i];
    }
    if (pos != m.data.size()) throw io_error("mask runs do not cover the mask");
    return m;
}

void write_dataset(const fs::path& dir, const std::vector<scene_sample>& samples, const dataset_split& split) {
    fs::create_directories(dir / "images");
    std::vector<std::string> split_of(samples.size());
    for (int i : split.train) split_of[i] = "train";
    for (int i : split.val) split_of[i] = "val";
    for (int i : split.test) split_of[i] = "test";

    std::ofstream index(dir / "index.jsonl", std::ios::binary);
    if (!index) throw io_error("cannot write " + (dir / "index.jsonl").string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (split_of[i].empty()) continue;
        const auto& s = samples[i];
        std::string image_file;
        if (!s.img.empty()) {
            image_file = "images/" + s.id + ".png";
            write_png(dir / image_file, s.img);
        }
        json rec = layout_record{s.caption, s.objects};
        auto masks = json::array();
        for (auto& m : s.instance_masks) masks.push_back(encode_runs(m));
        json line = {{"id", s.id},         {"split", split_of[i]},        {"source_split", s.source_split},
                     {"width", s.width},   {"height", s.height},          {"image", image_file},
                     {"caption", s.caption}, {"objects", rec["objects"]}, {"subject_index", s.subject_index},
                     {"masks", std::move(masks)}};
        index << line.dump() << '\n';
    }
}

std::vector<indexed_sample> read_dataset(const fs::path& dir) {
    std::ifstream index(dir / "index.jsonl");
    if (!index) throw io_error("cannot open dataset index: " + (dir / "index.jsonl").string());
    std::vector<indexed_sample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(index, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            indexed_sample is;
            auto& s        = is.sample;
            is.split       = j.at("split").get<std::string>();
            s.id           = j.at("id").get<std::string>();
            s.source_split = j.value("source_split", std::string("train"));
            s.width        = j.at("width").get<int>();
            s.height       = j.at("height").get<int>();
            s.caption      = j.at("caption").get<std::string>();
            s.objects      = layout_record_from_json(j).objects;
            s.subject_index = j.at("subject_index").get<int>();
            for (auto& m : j.at("masks")) s.instance_masks.push_back(decode_runs(m.get<std::vector<int>>(), s.width, s.height));
            auto file = j.value("image", std::string());
            if (!file.empty()) s.img = read_png(dir / file);
            validate_sample(s);
            out.push_back(std::move(is));
        } catch (const json::exception& e) {
            throw io_error((dir / "index.jsonl").string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<scene_sample> read_split(const fs::path& dir, const std::string& split) {
    std::vector<scene_sample> out;
    for (auto& is : read_dataset(dir))
        if (is.split == split) out.push_back(std::move(is.sample));
    return out;
}

}  // namespace scenebooth::data
