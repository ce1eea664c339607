#include "scenebooth/layout.hpp"

#include <algorithm>
#include <cmath>

#include "scenebooth/errors.hpp"

namespace scenebooth {

bool is_valid_box(const bbox& b, double tol) {
    return b.w > 0.0 && b.h > 0.0 && b.left() >= -tol && b.right() <= 1.0 + tol && b.top() >= -tol &&
           b.bottom() <= 1.0 + tol;
}

bbox clamp_box(const bbox& b) {
    bbox out;
    out.w  = std::clamp(b.w, min_box_extent, 1.0);
    out.h  = std::clamp(b.h, min_box_extent, 1.0);
    out.cx = std::clamp(b.cx, out.w / 2, 1.0 - out.w / 2);
    out.cy = std::clamp(b.cy, out.h / 2, 1.0 - out.h / 2);
    return out;
}

int subject_index(std::span<const object_spec> objects) {
    if (objects.empty()) throw input_error("scene has no objects");
    int found = -1;
    for (std::size_t i = 0; i < objects.size(); ++i) {
        if (!objects[i].is_subject) continue;
        if (found >= 0) throw input_error("scene flags more than one subject");
        found = static_cast<int>(i);
    }
    if (found < 0) throw input_error("scene flags no subject");
    return found;
}

int subject_index(const layout& l) { return subject_index(objects_of(l)); }

std::vector<object_spec> objects_of(const layout& l) {
    std::vector<object_spec> out;
    out.reserve(l.size());
    for (auto& e : l) out.push_back(e.object);
    return out;
}

pixel_rect to_pixel_rect(const bbox& b, int canvas_width, int canvas_height) {
    pixel_rect r;
    r.w  = static_cast<int>(std::lround(b.w * canvas_width));
    r.h  = static_cast<int>(std::lround(b.h * canvas_height));
    r.x0 = static_cast<int>(std::lround(b.left() * canvas_width));
    r.y0 = static_cast<int>(std::lround(b.top() * canvas_height));
    return r;
}

void to_json(nlohmann::json& j, const object_spec& o) { j = {{"phrase", o.phrase}, {"is_subject", o.is_subject}}; }

void to_json(nlohmann::json& j, const layout_record& r) {
    auto objs = nlohmann::json::array();
    for (auto& e : r.objects)
        objs.push_back({{"phrase", e.object.phrase},
                        {"is_subject", e.object.is_subject},
                        {"bbox", {e.box.cx, e.box.cy, e.box.w, e.box.h}}});
    j = {{"caption", r.caption}, {"objects", std::move(objs)}};
}

layout_record layout_record_from_json(const nlohmann::json& j) {
    try {
        layout_record r;
        r.caption = j.at("caption").get<std::string>();
        for (auto& o : j.at("objects")) {
            auto b = o.at("bbox");
            if (!b.is_array() || b.size() != 4) throw io_error("layout record: bbox must have four numbers");
            r.objects.push_back({{o.at("phrase").get<std::string>(), o.value("is_subject", false)},
                                 {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()}});
        }
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw io_error(std::string("layout record: ") + e.what());
    }
}

}  // namespace scenebooth
