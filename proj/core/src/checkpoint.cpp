#include "hmr/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace hmr {

namespace {

constexpr char kMagic[4] = {'H', 'M', 'R', '1'};

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(U));
}

void put_f32_le(std::ostream& os, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_le<std::uint32_t>(os, bits);
}

void get_bytes(std::istream& is, void* p, std::size_t n, const std::string& path) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw IoError("container: truncated file " + path);
}

template <class U>
U get_le(std::istream& is, const std::string& path) {
    unsigned char buf[sizeof(U)];
    get_bytes(is, buf, sizeof(U), path);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

float get_f32_le(std::istream& is, const std::string& path) {
    std::uint32_t bits = get_le<std::uint32_t>(is, path);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

void write_container(const std::string& path, const std::vector<NamedArray>& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("container: cannot open " + path + " for writing");
    put_bytes(os, kMagic, 4);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        if (a.name.size() > 0xffff) throw ContractError("container: array name too long: " + a.name);
        if (a.shape.size() > 0xff) throw ContractError("container: rank too large for " + a.name);
        if (shape_numel(a.shape) != a.values.size())
            throw ShapeError("container: " + a.name + " shape " + shape_str(a.shape) + " does not match " +
                             std::to_string(a.values.size()) + " values");
        put_le<std::uint16_t>(os, static_cast<std::uint16_t>(a.name.size()));
        put_bytes(os, a.name.data(), a.name.size());
        unsigned char rank = static_cast<unsigned char>(a.shape.size());
        put_bytes(os, &rank, 1);
        for (std::size_t dim : a.shape) put_le<std::uint64_t>(os, static_cast<std::uint64_t>(dim));
        for (float v : a.values) put_f32_le(os, v);
    }
    if (!os) throw IoError("container: write failed for " + path);
}

std::vector<NamedArray> read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("container: cannot open " + path);
    char magic[4];
    get_bytes(is, magic, 4, path);
    if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("container: bad magic in " + path);
    const std::uint32_t count = get_le<std::uint32_t>(is, path);
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        const std::uint16_t name_len = get_le<std::uint16_t>(is, path);
        a.name.resize(name_len);
        get_bytes(is, a.name.data(), name_len, path);
        unsigned char rank;
        get_bytes(is, &rank, 1, path);
        a.shape.resize(rank);
        for (auto& dim : a.shape) dim = static_cast<std::size_t>(get_le<std::uint64_t>(is, path));
        a.values.resize(shape_numel(a.shape));
        for (auto& v : a.values) v = get_f32_le(is, path);
        arrays.push_back(std::move(a));
    }
    return arrays;
}

template <class T>
void save_model(const std::string& path, const ModelParams<T>& params) {
    std::vector<NamedArray> arrays;
    for (const auto& [name, tensor] : params.named()) {
        NamedArray a;
        a.name = name;
        a.shape = tensor->shape();
        a.values.reserve(tensor->size());
        for (T v : tensor->data()) a.values.push_back(static_cast<float>(v));
        arrays.push_back(std::move(a));
    }
    write_container(path, arrays);
}

template <class T>
ModelParams<T> load_model(const std::string& path, const ModelConfig& cfg) {
    Rng rng(cfg.seed);
    ModelParams<T> params = ModelParams<T>::init(cfg, rng);
    auto arrays = read_container(path);
    auto named = params.named();
    if (arrays.size() != named.size())
        throw ConfigError("load_model: checkpoint has " + std::to_string(arrays.size()) + " arrays, config expects " +
                          std::to_string(named.size()));
    std::size_t idx = 0;
    for (auto& [name, tensor] : named) {
        const NamedArray& a = arrays[idx++];
        if (a.name != name)
            throw ConfigError("load_model: expected array '" + name + "', found '" + a.name + "'");
        if (a.shape != tensor->shape())
            throw ConfigError("load_model: array '" + name + "' has shape " + shape_str(a.shape) +
                              " but config expects " + shape_str(tensor->shape()) +
                              " (vocab/layer mismatch?)");
        auto dst = tensor->data();
        for (std::size_t i = 0; i < a.values.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
    }
    return params;
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["d"] = cfg.d;
    j["d_state"] = cfg.d_state;
    j["n_layers"] = cfg.n_layers;
    j["L"] = cfg.L;
    j["conv_width"] = cfg.conv_width;
    j["use_binding"] = cfg.use_binding;
    j["use_compression"] = cfg.use_compression;
    j["bundle_k"] = cfg.bundle_k;
    j["vocab_items"] = cfg.vocab_items;
    j["vocab_attrs"] = cfg.vocab_attrs;
    j["dropout"] = cfg.dropout;
    j["seed"] = cfg.seed;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("save_model_config: cannot open " + path);
    os << j.dump(2) << "\n";
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("load_model_config: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_model_config: invalid JSON in " + path + ": " + e.what());
    }
    ModelConfig cfg;
    cfg.d = j.at("d").get<int>();
    cfg.d_state = j.at("d_state").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.L = j.at("L").get<int>();
    cfg.conv_width = j.at("conv_width").get<int>();
    cfg.use_binding = j.at("use_binding").get<bool>();
    cfg.use_compression = j.at("use_compression").get<bool>();
    cfg.bundle_k = j.at("bundle_k").get<int>();
    cfg.vocab_items = j.at("vocab_items").get<int>();
    cfg.vocab_attrs = j.at("vocab_attrs").get<int>();
    cfg.dropout = j.at("dropout").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

template void save_model<float>(const std::string&, const ModelParams<float>&);
template void save_model<double>(const std::string&, const ModelParams<double>&);
template ModelParams<float> load_model<float>(const std::string&, const ModelConfig&);
template ModelParams<double> load_model<double>(const std::string&, const ModelConfig&);

}  // namespace hmr
