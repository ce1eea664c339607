#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "scenebooth/image.hpp"
#include "scenebooth/layout.hpp"

namespace scenebooth::data {

struct scene_sample {
    std::string id;
    std::string source_split;  // "train" or "val" of the originating corpus
    int width  = 0;
    int height = 0;
    image img;  // RGB; may be empty for annotation-only ingestion
    std::string caption;
    layout objects;
    std::vector<binary_mask> instance_masks;
    int subject_index = 0;
};

void validate_sample(const scene_sample& s);

// ---------------------------------------------------------------------------
// Synthetic scenes

enum class placement { sky_band, ground_band, on_ground, in_sky };
enum class shape_kind { rect, ellipse };

struct category {
    std::string name;
    std::array<int, 3> color{};  // 8-bit RGB, unique per category
    placement place = placement::on_ground;
    shape_kind shape = shape_kind::rect;
    std::array<double, 2> width_range{0.1, 0.2};
    std::array<double, 2> height_range{0.1, 0.2};

    bool is_thing() const { return place == placement::on_ground || place == placement::in_sky; }
    std::array<double, 3> rgb() const { return {color[0] / 255.0, color[1] / 255.0, color[2] / 255.0}; }
};

struct synthetic_grammar {
    int canvas = 32;
    std::vector<category> categories;
    int min_objects = 3;
    int max_objects = 8;
    std::array<double, 2> horizon_range{0.35, 0.6};
    std::vector<std::string> caption_templates;  // placeholders: {subject}, {others}
    int max_attempts = 1000;

    static synthetic_grammar default_grammar();
    const category* find(const std::string& name) const;
};

void to_json(nlohmann::json& j, const synthetic_grammar& g);
synthetic_grammar grammar_from_json(const nlohmann::json& j);

std::vector<scene_sample> synth_generate(const synthetic_grammar& grammar, int count, std::mt19937_64& rng);

// Renders a layout with the grammar's palette. Later entries paint over
// earlier ones; stuff bands are drawn first.
image render_layout(const synthetic_grammar& grammar, const layout& l, std::vector<binary_mask>* visible_masks = nullptr);

// cy(sky) < cy(ground) for every sky/ground pair; vacuous without both.
bool sky_above_ground(const layout& l);

// Names of violated placement rules; empty when the layout obeys the grammar.
std::vector<std::string> check_rules(const synthetic_grammar& grammar, const layout& l, double tol = 0.05);

// ---------------------------------------------------------------------------
// COCO ingestion

struct ingest_stats {
    int images_total          = 0;
    int skipped_no_objects    = 0;
    int skipped_no_caption    = 0;
    int crowd_annotations     = 0;
};

struct ingest_options {
    std::optional<std::filesystem::path> image_dir;  // PNG pixels, file stem matched
    std::string source_split;                         // empty: inferred from the file name
};

std::vector<scene_sample> ingest_coco(const std::filesystem::path& instances_json,
                                      const std::filesystem::path& captions_json, const ingest_options& opts = {},
                                      ingest_stats* stats = nullptr);

// Polygon rasterisation at pixel centers (even-odd rule).
binary_mask rasterize_polygons(const std::vector<std::vector<double>>& polygons, int width, int height);
// COCO RLE (column-major) from uncompressed counts or the compressed string form.
binary_mask decode_coco_rle(const nlohmann::json& rle, int width, int height);

struct dataset_split {
    std::vector<int> train, val, test;
};

// Keeps scenes with 3..8 objects; the training source is shuffled and split
// 95/5 into train/val, the validation source becomes test.
dataset_split filter_and_split(const std::vector<scene_sample>& samples, std::mt19937_64& rng,
                               double train_fraction = 0.95, int min_objects = 3, int max_objects = 8);

// Tight RGBA crop of the subject; alpha is the instance mask.
image extract_subject(const scene_sample& s);
image extract_instance(const scene_sample& s, int index);

// ---------------------------------------------------------------------------
// On-disk datasets: images/<id>.png plus index.jsonl

struct indexed_sample {
    scene_sample sample;
    std::string split;  // "train", "val" or "test"
};

void write_dataset(const std::filesystem::path& dir, const std::vector<scene_sample>& samples,
                   const dataset_split& split);
std::vector<indexed_sample> read_dataset(const std::filesystem::path& dir);
std::vector<scene_sample> read_split(const std::filesystem::path& dir, const std::string& split);

// Row-major run lengths, starting with a (possibly zero) run of zeros.
std::vector<int> encode_runs(const binary_mask& m);
binary_mask decode_runs(const std::vector<int>& runs, int width, int height);

}  // namespace scenebooth::data
