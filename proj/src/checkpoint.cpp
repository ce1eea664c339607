#include "scenebooth/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "scenebooth/config.hpp"
#include "scenebooth/errors.hpp"

namespace scenebooth::checkpoint {

using nlohmann::json;

namespace {

constexpr char magic[8] = {'S', 'B', 'C', 'K', 'P', 'T', '0', '1'};

void write_doubles(std::ofstream& out, const ag::buffer& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, ag::buffer& v, const std::filesystem::path& path) {
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw io_error("checkpoint " + path.string() + ": truncated tensor data");
}

header parse_header(std::ifstream& in, const std::filesystem::path& path) {
    char m[8];
    in.read(m, 8);
    if (!in || std::memcmp(m, magic, 8) != 0) throw io_error("checkpoint " + path.string() + ": bad magic");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    if (!in || len > (1ULL << 30)) throw io_error("checkpoint " + path.string() + ": bad header length");
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw io_error("checkpoint " + path.string() + ": truncated header");
    header h;
    try {
        const json j  = json::parse(text);
        h.version     = j.at("version").get<int>();
        h.kind        = j.at("kind").get<std::string>();
        h.config      = j.at("config");
        h.config_hash = j.at("config_hash").get<std::string>();
        h.state       = j.at("state");
        h.tensors     = j.at("tensors");
        h.optimizer   = j.at("optimizer");
    } catch (const json::exception& e) {
        throw io_error("checkpoint " + path.string() + ": malformed header: " + e.what());
    }
    if (h.version != format_version)
        throw io_error("checkpoint " + path.string() + ": unsupported format version " + std::to_string(h.version));
    if (config::hash_json(h.config) != h.config_hash)
        throw io_error("checkpoint " + path.string() + ": config hash does not match the embedded config");
    return h;
}

}  // namespace

void save(const std::filesystem::path& path, const std::string& kind, const json& config, const json& state,
          const nn::parameter_store& store, const nn::adam* optimizer) {
    json tensors = json::array();
    for (auto& e : store.entries())
        tensors.push_back({{"name", e.name}, {"shape", e.value->value.shape}, {"trainable", e.trainable}});
    json opt = nullptr;
    if (optimizer && !optimizer->empty()) {
        json names = json::array();
        for (auto& e : store.entries())
            if (e.trainable) names.push_back(e.name);
        const auto& oc = optimizer->config();
        opt = {{"steps", optimizer->steps_taken()},
               {"params", names},
               {"lr", oc.lr},
               {"beta1", oc.beta1},
               {"beta2", oc.beta2},
               {"eps", oc.eps},
               {"grad_clip", oc.grad_clip}};
    }
    const json head = {{"version", format_version}, {"kind", kind},     {"config", config},
                       {"config_hash", config::hash_json(config)},     {"state", state},
                       {"tensors", tensors},        {"optimizer", opt}};
    const std::string text = head.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write checkpoint " + tmp.string());
        out.write(magic, 8);
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(text.data(), static_cast<std::streamsize>(len));
        for (auto& e : store.entries()) write_doubles(out, e.value->value.data);
        if (!opt.is_null()) {
            for (auto& m : optimizer->first_moments()) write_doubles(out, m.data);
            for (auto& v : optimizer->second_moments()) write_doubles(out, v.data);
        }
        if (!out) throw io_error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

header read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint " + path.string());
    return parse_header(in, path);
}

header load(const std::filesystem::path& path, nn::parameter_store& store, nn::adam* optimizer,
            const std::string& expected_kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open checkpoint " + path.string());
    header h = parse_header(in, path);
    if (h.kind != expected_kind)
        throw io_error("checkpoint " + path.string() + " holds a " + h.kind + " model, expected " + expected_kind);
    if (h.tensors.size() != store.entries().size())
        throw io_error("checkpoint " + path.string() + ": parameter count differs from the model");
    // the payload must be exactly the tensors plus the optimizer moments the header announces
    std::uintmax_t expected = 0;
    for (auto& t : h.tensors) {
        const bool moments = !h.optimizer.is_null() && t.at("trainable").get<bool>();
        expected += ag::numel_of(t.at("shape").get<ag::shape_t>()) * sizeof(double) * (moments ? 3 : 1);
    }
    if (std::filesystem::file_size(path) - static_cast<std::uintmax_t>(in.tellg()) != expected)
        throw io_error("checkpoint " + path.string() + ": payload size does not match the header");
    for (std::size_t i = 0; i < store.entries().size(); ++i) {
        const auto& e = store.entries()[i];
        const auto& t = h.tensors[i];
        if (t.at("name").get<std::string>() != e.name || t.at("shape").get<ag::shape_t>() != e.value->value.shape)
            throw io_error("checkpoint " + path.string() + ": parameter " + e.name + " does not match");
        read_doubles(in, e.value->value.data, path);
        e.value->grad.clear();
    }
    if (optimizer && !h.optimizer.is_null()) {
        auto params = store.trainable();
        const auto names = h.optimizer.at("params").get<std::vector<std::string>>();
        std::vector<std::string> current;
        for (auto& e : store.entries())
            if (e.trainable) current.push_back(e.name);
        if (names != current)
            throw io_error("checkpoint " + path.string() + ": optimizer parameters differ from the trainable set");
        nn::adam_config oc;
        oc.lr        = h.optimizer.at("lr").get<double>();
        oc.beta1     = h.optimizer.at("beta1").get<double>();
        oc.beta2     = h.optimizer.at("beta2").get<double>();
        oc.eps       = h.optimizer.at("eps").get<double>();
        oc.grad_clip = h.optimizer.at("grad_clip").get<double>();
        *optimizer   = nn::adam(params, oc);
        for (auto& m : optimizer->first_moments()) read_doubles(in, m.data, path);
        for (auto& v : optimizer->second_moments()) read_doubles(in, v.data, path);
        optimizer->set_steps_taken(h.optimizer.at("steps").get<long>());
    }
    return h;
}

}  // namespace scenebooth::checkpoint
