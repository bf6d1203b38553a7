#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace advlab::io {

// Checkpoint container: a JSON header plus named float arrays, stored raw so
// round trips are bit-exact.
struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

struct Container {
    nlohmann::json header;
    std::vector<NamedArray> arrays;

    const NamedArray& find(const std::string& name) const;
};

void save_container(const Container& c, const std::filesystem::path& file);
Container load_container(const std::filesystem::path& file);

}  // namespace advlab::io
