#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "scenebooth/config.hpp"
#include "scenebooth/data.hpp"
#include "scenebooth/layoutgen.hpp"
#include "scenebooth/metrics.hpp"
#include "scenebooth/paintnet.hpp"

namespace scenebooth::pipeline {

// Keeps freed heap memory mapped; large tensors are allocated every step.
void tune_allocator();

void set_seed(config::run_config& cfg, std::uint64_t seed);

struct dataset {
    std::vector<data::scene_sample> samples;
    data::dataset_split split;

    std::vector<data::scene_sample> subset(const std::vector<int>& idx) const;
};

// train_count + val_count scenes from the training source, split by count,
// plus test_count scenes marked as the validation source.
dataset make_synthetic(const config::run_config& cfg);

std::vector<layoutgen::training_example> layout_examples(const std::vector<data::scene_sample>& samples);
std::vector<metrics::palette_entry> palette_of(const data::synthetic_grammar& g);

struct layout_bundle {
    config::run_config cfg;
    std::unique_ptr<layoutgen::layout_denoiser> model;
    layoutgen::frozen_encoders enc;
    diffusion::noise_schedule schedule;
};

struct paint_bundle {
    config::run_config cfg;
    std::unique_ptr<paintnet::paint_unet> model;
    diffusion::noise_schedule schedule;
};

layout_bundle make_layout(const config::run_config& cfg);
paint_bundle make_paint(const config::run_config& cfg);
layout_bundle load_layout(const std::filesystem::path& ckpt);
paint_bundle load_paint(const std::filesystem::path& ckpt);

// Training drivers with JSON-lines logging ({step, loss, wall}) and periodic
// checkpoints. Resume continues from the checkpoint's step and optimizer state.
struct train_options {
    std::filesystem::path out_dir;
    std::filesystem::path resume;  // empty: fresh start
    bool quiet = false;
};

std::vector<layoutgen::step_record> run_train_layout(layout_bundle& b, const std::vector<data::scene_sample>& train,
                                                     const train_options& opts);
std::vector<paintnet::step_record> run_train_paint(paint_bundle& b, const std::vector<data::scene_sample>& train,
                                                   const train_options& opts);

// Generators for the two stages, derived from the run seed.
std::mt19937_64 layout_rng(std::uint64_t seed, long index);
std::mt19937_64 paint_rng(std::uint64_t seed, long index);

enum class layout_source { model, ground_truth };

struct eval_options {
    layout_source source = layout_source::model;
    bool paint           = true;
    int workers          = 1;
};

struct eval_report {
    nlohmann::json metrics;                  // {metric_name: value}
    std::vector<nlohmann::json> per_sample;  // in test-split order
};

// Max. IoU @ k over the configured ks, grammar rule rates and, when painting,
// toy-FID against the real renders plus oracle-detector AP on the composites.
eval_report evaluate(const std::vector<data::scene_sample>& test, const config::run_config& cfg,
                     const layout_bundle* layout, const paint_bundle* paint, const eval_options& opts);

// Layouts per test scene (k each) from the model, or the ground truth repeated.
std::vector<std::vector<layout>> sample_test_layouts(const std::vector<data::scene_sample>& test, int k,
                                                     const config::run_config& cfg, const layout_bundle* layout,
                                                     layout_source source, int workers);

// Paints each scene with the given layout; chunks of cfg.eval.chunk share a generator.
std::vector<paintnet::paint_result> paint_scenes(const std::vector<data::scene_sample>& test,
                                                 const std::vector<layout>& layouts, const config::run_config& cfg,
                                                 const paint_bundle& paint, int workers);

// Parallel map over [0, n) with a fixed assignment of indices to results.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace scenebooth::pipeline
