#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "scenebooth/data.hpp"
#include "scenebooth/errors.hpp"

using namespace scenebooth;
using namespace scenebooth::data;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("scenebooth_test_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(); }

// Two images: image 1 (100 wide, 200 tall) with a dog polygon, a crowd region
// and a grass box; image 2 has no caption; image 3 has no annotations.
json instances_fixture() {
    return {{"images",
             {{{"id", 1}, {"file_name", "a.jpg"}, {"width", 100}, {"height", 200}},
              {{"id", 2}, {"file_name", "b.jpg"}, {"width", 50}, {"height", 50}},
              {{"id", 3}, {"file_name", "c.jpg"}, {"width", 50}, {"height", 50}}}},
            {"categories", {{{"id", 18}, {"name", "dog"}}, {{"id", 124}, {"name", "grass"}}}},
            {"annotations",
             {{{"id", 7}, {"image_id", 1}, {"category_id", 18}, {"iscrowd", 0}, {"bbox", {10, 20, 30, 40}},
               {"segmentation", {{10, 20, 40, 20, 40, 60, 10, 60}}}},
              {{"id", 5}, {"image_id", 1}, {"category_id", 124}, {"iscrowd", 0}, {"bbox", {0, 100, 100, 100}}},
              {{"id", 9}, {"image_id", 1}, {"category_id", 18}, {"iscrowd", 1}, {"bbox", {0, 0, 5, 5}}},
              {{"id", 11}, {"image_id", 2}, {"category_id", 18}, {"iscrowd", 0}, {"bbox", {0, 0, 50, 50}}}}}};
}

json captions_fixture() {
    return {{"annotations",
             {{{"id", 30}, {"image_id", 1}, {"caption", "second caption"}},
              {{"id", 21}, {"image_id", 1}, {"caption", "a dog on the grass"}},
              {{"id", 40}, {"image_id", 3}, {"caption", "nothing here"}}}}};
}

}  // namespace

TEST_CASE("COCO ingestion on a hand-built fixture") {
    const auto dir = scratch("coco");
    write(dir / "instances_val2017.json", instances_fixture());
    write(dir / "captions_val2017.json", captions_fixture());
    ingest_stats st;
    const auto samples = ingest_coco(dir / "instances_val2017.json", dir / "captions_val2017.json", {}, &st);
    CHECK(st.images_total == 3);
    CHECK(st.skipped_no_caption == 1);
    CHECK(st.skipped_no_objects == 1);
    CHECK(st.crowd_annotations == 1);
    REQUIRE(samples.size() == 1);
    const auto& s = samples[0];
    CHECK(s.id == "1");
    CHECK(s.source_split == "val");
    CHECK(s.caption == "a dog on the grass");
    REQUIRE(s.objects.size() == 2);
    // annotations ordered by id: grass (5) then dog (7)
    CHECK(s.objects[0].object.phrase == "grass");
    CHECK(s.objects[1].object.phrase == "dog");
    const bbox dog = s.objects[1].box;
    CHECK(dog.cx == doctest::Approx(0.25));
    CHECK(dog.cy == doctest::Approx(0.2));
    CHECK(dog.w == doctest::Approx(0.3));
    CHECK(dog.h == doctest::Approx(0.2));
    const bbox grass = s.objects[0].box;
    CHECK(grass.cy == doctest::Approx(0.75));
    CHECK(grass.h == doctest::Approx(0.5));
    // polygon mask is the axis-aligned rectangle of pixel centres in [10,40) x [20,60)
    CHECK(s.instance_masks[1].count() == 30 * 40);
    CHECK(s.instance_masks[1].at(20, 10) == 1);
    CHECK(s.instance_masks[1].at(19, 10) == 0);
    int subjects = 0;
    for (auto& e : s.objects) subjects += e.object.is_subject;
    CHECK(subjects == 1);
    CHECK(s.objects[s.subject_index].object.is_subject);
    // subject choice repeats
    CHECK(ingest_coco(dir / "instances_val2017.json", dir / "captions_val2017.json")[0].subject_index == s.subject_index);

    SUBCASE("explicit split overrides the file name") {
        ingest_options o;
        o.source_split = "train";
        CHECK(ingest_coco(dir / "instances_val2017.json", dir / "captions_val2017.json", o)[0].source_split == "train");
    }
    SUBCASE("schema violations are io errors") {
        auto bad = instances_fixture();
        bad["annotations"][0]["category_id"] = 99;
        write(dir / "bad.json", bad);
        CHECK_THROWS_AS(ingest_coco(dir / "bad.json", dir / "captions_val2017.json"), io_error);
        bad = instances_fixture();
        bad["annotations"][0].erase("bbox");
        write(dir / "bad.json", bad);
        CHECK_THROWS_AS(ingest_coco(dir / "bad.json", dir / "captions_val2017.json"), io_error);
        CHECK_THROWS_AS(ingest_coco(dir / "missing.json", dir / "captions_val2017.json"), io_error);
    }
}

TEST_CASE("COCO RLE decoding") {
    // 3x2 mask, column-major counts: 1 zero, 2 ones, 1 zero, 2 ones
    const auto m = decode_coco_rle(json{{"counts", {1, 2, 1, 2}}, {"size", {2, 3}}}, 3, 2);
    CHECK(m.at(0, 0) == 0);
    CHECK(m.at(1, 0) == 1);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(1, 1) == 0);
    CHECK(m.at(0, 2) == 1);
    CHECK(m.at(1, 2) == 1);
}

TEST_CASE("filtering and splitting") {
    std::vector<scene_sample> samples;
    for (int i = 0; i < 260; ++i) {
        scene_sample s;
        s.id           = std::to_string(i);
        s.source_split = i < 220 ? "train" : "val";
        const int n    = 2 + i % 8;  // object counts 2..9
        for (int k = 0; k < n; ++k) s.objects.push_back({{"x", k == 0}, bbox{0.5, 0.5, 0.1, 0.1}});
        samples.push_back(s);
    }
    std::mt19937_64 rng(1);
    const auto split = filter_and_split(samples, rng);
    std::set<int> seen;
    for (auto* part : {&split.train, &split.val, &split.test})
        for (int i : *part) {
            const int n = static_cast<int>(samples[i].objects.size());
            CHECK(n >= 3);
            CHECK(n <= 8);
            CHECK(seen.insert(i).second);
        }
    // 220 training-source scenes, 6 of every 8 kept
    const double kept_train = split.train.size() + split.val.size();
    CHECK(kept_train == 165);
    CHECK(split.train.size() == static_cast<std::size_t>(std::llround(0.95 * 165)));
    for (int i : split.test) CHECK(samples[i].source_split == "val");
    for (int i : split.train) CHECK(samples[i].source_split == "train");
    std::mt19937_64 r2(1);
    const auto again = filter_and_split(samples, r2);
    CHECK(again.train == split.train);
    CHECK(again.val == split.val);
}

TEST_CASE("synthetic scenes obey the grammar") {
    const auto g = synthetic_grammar::default_grammar();
    std::mt19937_64 rng(2);
    const auto scenes = synth_generate(g, 200, rng);
    std::set<std::string> captions;
    for (auto& s : scenes) {
        validate_sample(s);
        CHECK(check_rules(g, s.objects).empty());
        CHECK(sky_above_ground(s.objects));
        const int n = static_cast<int>(s.objects.size());
        CHECK(n >= g.min_objects);
        CHECK(n <= g.max_objects);
        CHECK(subject_index(s.objects) == s.subject_index);
        CHECK(g.find(s.objects[s.subject_index].object.phrase)->is_thing());
        CHECK(s.caption.find(s.objects[s.subject_index].object.phrase) != std::string::npos);
        for (auto& e : s.objects) CHECK(is_valid_box(e.box));
        CHECK(render_layout(g, s.objects) == s.img);
        captions.insert(s.caption);
    }
    CHECK(captions.size() > 100);
    std::mt19937_64 again(2);
    const auto repeat = synth_generate(g, 200, again);
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        CHECK(repeat[i].objects == scenes[i].objects);
        CHECK(repeat[i].caption == scenes[i].caption);
    }
}

TEST_CASE("rule checker flags violations") {
    const auto g = synthetic_grammar::default_grammar();
    layout l{{{"sky", false}, bbox::from_corners(0, 0, 1, 0.5)},
             {{"ground", false}, bbox::from_corners(0, 0.5, 1, 1)},
             {{"car", true}, bbox::from_corners(0.1, 0.1, 0.3, 0.2)}};
    const auto v = check_rules(g, l);
    REQUIRE(v.size() == 1);
    CHECK(v[0] == "on_ground:car");
    std::swap(l[0].box, l[1].box);
    CHECK_FALSE(sky_above_ground(l));
}

TEST_CASE("subject extraction") {
    const auto g = synthetic_grammar::default_grammar();
    std::mt19937_64 rng(3);
    for (auto& s : synth_generate(g, 20, rng)) {
        const auto crop = extract_subject(s);
        CHECK(crop.channels == 4);
        const auto r = to_pixel_rect(s.objects[s.subject_index].box, s.width, s.height);
        CHECK(crop.width == r.w);
        CHECK(crop.height == r.h);
        const auto rgb = g.find(s.objects[s.subject_index].object.phrase)->rgb();
        for (int y = 0; y < crop.height; ++y)
            for (int x = 0; x < crop.width; ++x)
                if (crop.opaque(y, x))
                    for (int c = 0; c < 3; ++c) CHECK(crop.at(c, y, x) == rgb[c]);
    }
    scene_sample empty;
    CHECK_THROWS_AS(extract_subject(empty), input_error);
}

TEST_CASE("run-length masks and dataset files round trip") {
    std::mt19937_64 rng(4);
    std::bernoulli_distribution coin(0.3);
    for (int t = 0; t < 50; ++t) {
        binary_mask m(1 + t % 9, 1 + t % 5);
        for (auto& v : m.data) v = coin(rng);
        if (t == 0) std::fill(m.data.begin(), m.data.end(), 1);
        CHECK(decode_runs(encode_runs(m), m.width, m.height) == m);
    }
    CHECK_THROWS_AS(decode_runs({3, 5}, 2, 2), io_error);

    const auto g   = synthetic_grammar::default_grammar();
    auto scenes    = synth_generate(g, 12, rng);
    for (int i = 8; i < 12; ++i) scenes[i].source_split = "val";
    const auto split = filter_and_split(scenes, rng);
    const auto dir   = scratch("dataset");
    write_dataset(dir, scenes, split);
    const auto back = read_dataset(dir);
    REQUIRE(back.size() == scenes.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        const auto& a = back[i].sample;
        CHECK(a.id == scenes[i].id);
        CHECK(a.objects == scenes[i].objects);
        CHECK(a.instance_masks == scenes[i].instance_masks);
        CHECK(a.img == quantize8(scenes[i].img));
        CHECK(a.caption == scenes[i].caption);
    }
    CHECK(read_split(dir, "test").size() == split.test.size());
}
