#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "advlab/rng.hpp"
#include "advlab/serialize.hpp"

using namespace advlab;

TEST_CASE("container round trip is bit-exact") {
    io::Container c;
    c.header["kind"] = "test";
    c.header["nested"] = {{"a", 1}, {"b", 3.5}};

    RngStream rng(13, "ser");
    io::NamedArray a;
    a.name = "weights.w1";
    a.shape = {3, 4};
    for (int i = 0; i < 12; ++i) a.data.push_back(static_cast<float>(rng.normal()));
    io::NamedArray b;
    b.name = "weights.b1";
    b.shape = {4};
    for (int i = 0; i < 4; ++i) b.data.push_back(static_cast<float>(rng.normal()));
    c.arrays = {a, b};

    auto file = std::filesystem::temp_directory_path() / "advlab_container_test.bin";
    io::save_container(c, file);
    auto back = io::load_container(file);

    CHECK(back.header == c.header);
    REQUIRE(back.arrays.size() == 2);
    CHECK(back.find("weights.w1").shape == a.shape);
    CHECK(back.find("weights.w1").data == a.data);  // exact float bits
    CHECK(back.find("weights.b1").data == b.data);
    CHECK_THROWS(back.find("missing"));
    std::filesystem::remove(file);
}

TEST_CASE("corrupt magic detected") {
    auto file = std::filesystem::temp_directory_path() / "advlab_container_bad.bin";
    {
        std::ofstream out(file, std::ios::binary);
        out << "NOTMAGIContent";
    }
    CHECK_THROWS(io::load_container(file));
    std::filesystem::remove(file);
}
