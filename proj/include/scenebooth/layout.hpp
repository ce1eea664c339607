#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "scenebooth/image.hpp"

namespace scenebooth {

struct object_spec {
    std::string phrase;
    bool is_subject = false;

    bool operator==(const object_spec&) const = default;
};

// Center-form box normalised by the canvas: (cx, cy, w, h).
struct bbox {
    double cx = 0.5, cy = 0.5, w = 0.0, h = 0.0;

    double left() const { return cx - w / 2; }
    double top() const { return cy - h / 2; }
    double right() const { return cx + w / 2; }
    double bottom() const { return cy + h / 2; }

    static bbox from_corners(double x0, double y0, double x1, double y1) {
        return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0};
    }
    std::array<double, 4> as_array() const { return {cx, cy, w, h}; }

    bool operator==(const bbox&) const = default;
};

struct layout_entry {
    object_spec object;
    bbox box;

    bool operator==(const layout_entry&) const = default;
};

using layout = std::vector<layout_entry>;

// A layout together with the caption it was generated for; one JSON-lines record.
struct layout_record {
    std::string caption;
    layout objects;

    bool operator==(const layout_record&) const = default;
};

constexpr double min_box_extent = 1e-3;

// w, h > 0 and the box lies inside the unit canvas (with a tiny tolerance).
bool is_valid_box(const bbox& b, double tol = 1e-9);

// Clamps a raw box into a valid one: extents into [min_box_extent, 1], then the
// center so that the box stays inside the canvas.
bbox clamp_box(const bbox& b);

// Index of the single subject; throws input_error unless exactly one entry is flagged.
int subject_index(std::span<const object_spec> objects);
int subject_index(const layout& l);

std::vector<object_spec> objects_of(const layout& l);

// Pixel rectangle of a box on a canvas. Width and height are rounded
// independently of position, so translating a box never changes its pixel size.
pixel_rect to_pixel_rect(const bbox& b, int canvas_width, int canvas_height);

void to_json(nlohmann::json& j, const object_spec& o);
void to_json(nlohmann::json& j, const layout_record& r);
layout_record layout_record_from_json(const nlohmann::json& j);

}  // namespace scenebooth
