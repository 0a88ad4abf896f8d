#pragma once

#include <string>
#include <vector>

#include "hmr/model.hpp"

namespace hmr {

// Binary container: magic "HMR1", then a 32-bit little-endian array
// count; per array a 16-bit name length + UTF-8 name, an 8-bit rank,
// rank x 64-bit little-endian dims, and row-major 32-bit little-endian
// floats. Written byte-for-byte identically for identical inputs.
struct NamedArray {
    std::string name;
    Shape shape;
    std::vector<float> values;
};

void write_container(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> read_container(const std::string& path);

template <class T>
void save_model(const std::string& path, const ModelParams<T>& params);

// Rebuilds parameters for `cfg` from a checkpoint; missing arrays or
// shape/vocab disagreements raise ConfigError.
template <class T>
ModelParams<T> load_model(const std::string& path, const ModelConfig& cfg);

// Model configuration as a flat JSON document using the ModelConfig
// field names; conventionally stored next to the checkpoint.
void save_model_config(const std::string& path, const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

}  // namespace hmr
