#include "advlab/serialize.hpp"

#include <fstream>
#include <stdexcept>

namespace advlab::io {

namespace {
constexpr char kMagic[8] = {'A', 'D', 'V', 'L', 'A', 'B', 'C', '1'};

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}
}  // namespace

const NamedArray& Container::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw std::runtime_error("container: missing array '" + name + "'");
}

void save_container(const Container& c, const std::filesystem::path& file) {
    std::filesystem::create_directories(file.parent_path().empty() ? "." : file.parent_path());
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("save_container: cannot open " + file.string());
    out.write(kMagic, sizeof(kMagic));
    const std::string header = c.header.dump();
    write_pod<uint64_t>(out, header.size());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(c.arrays.size()));
    for (const auto& a : c.arrays) {
        write_pod<uint32_t>(out, static_cast<uint32_t>(a.name.size()));
        out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        write_pod<uint32_t>(out, static_cast<uint32_t>(a.shape.size()));
        for (int d : a.shape) write_pod<int32_t>(out, d);
        write_pod<uint64_t>(out, a.data.size());
        out.write(reinterpret_cast<const char*>(a.data.data()),
                  static_cast<std::streamsize>(a.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("save_container: write failed for " + file.string());
}

Container load_container(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("load_container: cannot open " + file.string());
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::string(magic, 8) != std::string(kMagic, 8))
        throw std::runtime_error("load_container: bad magic in " + file.string());
    const auto hlen = read_pod<uint64_t>(in);
    std::string header(hlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(hlen));
    Container c;
    c.header = nlohmann::json::parse(header);
    const auto n = read_pod<uint32_t>(in);
    c.arrays.resize(n);
    for (auto& a : c.arrays) {
        const auto nlen = read_pod<uint32_t>(in);
        a.name.resize(nlen);
        in.read(a.name.data(), nlen);
        const auto ndim = read_pod<uint32_t>(in);
        a.shape.resize(ndim);
        for (auto& d : a.shape) d = read_pod<int32_t>(in);
        const auto count = read_pod<uint64_t>(in);
        a.data.resize(count);
        in.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!in) throw std::runtime_error("load_container: truncated file " + file.string());
    }
    return c;
}

}  // namespace advlab::io
