#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "scenebooth/data.hpp"
#include "scenebooth/diffusion.hpp"
#include "scenebooth/layoutgen.hpp"
#include "scenebooth/paintnet.hpp"

namespace scenebooth::config {

struct data_section {
    int train_count = 2000;  // synthetic scenes drawn from the training source
    int val_count   = 200;
    int test_count  = 200;
    data::synthetic_grammar grammar = data::synthetic_grammar::default_grammar();
};

struct layout_section {
    layoutgen::model_config model;
    diffusion::schedule_config schedule;
    layoutgen::train_config train;
    encoders::subject_augment_config augment;
    int checkpoint_every = 500;
};

struct paint_section {
    paintnet::model_config model;
    diffusion::schedule_config schedule;
    paintnet::train_config train;
    int checkpoint_every = 500;
};

struct eval_section {
    std::vector<int> ks{1, 3, 5};
    int max_samples = 0;  // 0: the whole test split
    int chunk       = 16; // scenes painted per batch; each chunk has its own generator
    double oracle_tolerance = 0.08;
    int oracle_min_area     = 2;
};

struct run_config {
    std::string profile = "desk";
    std::uint64_t seed  = 0;
    data_section data;
    layout_section layout;
    paint_section paint;
    eval_section eval;
};

run_config desk_profile();
// Hyperparameters of the published setting; documented, not meant to run here.
run_config paper_profile();
run_config profile_by_name(const std::string& name);

nlohmann::json to_json(const run_config& c);
// Missing keys fall back to the profile named in the document (default desk).
run_config from_json(const nlohmann::json& j);
run_config load(const std::filesystem::path& path);

// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string hash_json(const nlohmann::json& j);

}  // namespace scenebooth::config
