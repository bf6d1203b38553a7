#include "advlab/toy_world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace advlab::toy {

using json = nlohmann::json;

const char* to_string(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::cross: return "cross";
    }
    return "?";
}

const char* to_string(Color c) {
    switch (c) {
        case Color::red: return "red";
        case Color::green: return "green";
        case Color::blue: return "blue";
    }
    return "?";
}

ConceptLabel ConceptLabel::from_index(int i) {
    if (i < 0 || i >= kNumClasses) throw std::out_of_range("ConceptLabel::from_index");
    return ConceptLabel{static_cast<Shape>(i % kNumShapes), static_cast<Color>(i / kNumShapes)};
}

std::string ConceptLabel::str() const {
    return std::string(to_string(color)) + " " + to_string(shape);
}

std::optional<ConceptLabel> ConceptLabel::parse(const std::string& s) {
    std::istringstream in(s);
    std::string c, sh, extra;
    if (!(in >> c >> sh) || (in >> extra)) return std::nullopt;
    for (const auto& label : all_labels())
        if (c == to_string(label.color) && sh == to_string(label.shape)) return label;
    return std::nullopt;
}

std::vector<ConceptLabel> all_labels() {
    std::vector<ConceptLabel> out;
    for (int i = 0; i < kNumClasses; ++i) out.push_back(ConceptLabel::from_index(i));
    return out;
}

namespace {

struct Vec2 {
    double x, y;
};

double sd_circle(Vec2 p, double r) { return std::sqrt(p.x * p.x + p.y * p.y) - r; }

double sd_box(Vec2 p, double bx, double by) {
    double qx = std::abs(p.x) - bx, qy = std::abs(p.y) - by;
    double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

double sd_triangle(Vec2 p, double r) {
    // Equilateral triangle, half-width r.
    const double k = std::sqrt(3.0);
    p.x = std::abs(p.x) - r;
    p.y = p.y + r / k;
    if (p.x + k * p.y > 0.0) {
        Vec2 q{(p.x - k * p.y) / 2.0, (-k * p.x - p.y) / 2.0};
        p = q;
    }
    p.x -= std::clamp(p.x, -2.0 * r, 0.0);
    double len = std::sqrt(p.x * p.x + p.y * p.y);
    return -len * (p.y > 0.0 ? 1.0 : -1.0);
}

double sd_cross(Vec2 p, double r) {
    const double arm = 0.36 * r;
    return std::min(sd_box(p, r, arm), sd_box(p, arm, r));
}

double shape_distance(Shape s, Vec2 p, double r) {
    switch (s) {
        case Shape::circle: return sd_circle(p, r);
        case Shape::square: return sd_box(p, 0.85 * r, 0.85 * r);
        case Shape::triangle: return sd_triangle(p, 1.05 * r);
        case Shape::cross: return sd_cross(p, 1.05 * r);
    }
    return 1e9;
}

std::array<double, 3> color_rgb(Color c) {
    switch (c) {
        case Color::red: return {0.88, 0.12, 0.10};
        case Color::green: return {0.10, 0.78, 0.16};
        case Color::blue: return {0.12, 0.22, 0.90};
    }
    return {0, 0, 0};
}

}  // namespace

Image generate_image(const ConceptLabel& label, uint64_t seed) {
    RngStream rng(seed, "toy_image", static_cast<uint64_t>(label.index()));
    const double bg = rng.uniform(0.6, 0.9);
    const double cx = kImageSize / 2.0 + rng.uniform(-4.0, 4.0);
    const double cy = kImageSize / 2.0 + rng.uniform(-4.0, 4.0);
    const double radius = 8.5 * rng.uniform(0.8, 1.2);
    const auto rgb = color_rgb(label.color);

    Image img;
    const double edge = 1.1;  // soft edge width in pixels
    for (int y = 0; y < kImageSize; ++y)
        for (int x = 0; x < kImageSize; ++x) {
            Vec2 p{x + 0.5 - cx, y + 0.5 - cy};
            const double d = shape_distance(label.shape, p, radius);
            const double cover = std::clamp(0.5 - d / edge, 0.0, 1.0);
            for (int c = 0; c < 3; ++c) {
                double v = bg * (1.0 - cover) + rgb[static_cast<size_t>(c)] * cover;
                img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return img;
}

PromptGrammar PromptGrammar::standard() {
    PromptGrammar g;
    g.vocab_ = {"<pad>", "<bos>", "<eos>", "<null>",
                "red",   "green", "blue",
                "circle", "square", "triangle", "cross",
                "a",     "an",    "the",   "photo", "picture", "image", "drawing",
                "of",    "small", "large", "bright"};
    g.templates_ = {
        "a photo of a {color} {shape}",
        "a picture of a {color} {shape}",
        "an image of a {color} {shape}",
        "a drawing of a {color} {shape}",
        "a {color} {shape}",
        "the {color} {shape}",
        "a small {color} {shape}",
        "a large {color} {shape}",
        "a bright {color} {shape}",
        "a photo of the {color} {shape}",
    };
    return g;
}

int PromptGrammar::token_id(const std::string& word) const {
    for (size_t i = 0; i < vocab_.size(); ++i)
        if (vocab_[i] == word) return static_cast<int>(i);
    throw std::out_of_range("unknown word: '" + word + "'");
}

const std::string& PromptGrammar::word(int id) const {
    if (id < 0 || id >= vocab_size()) throw std::out_of_range("token id out of range");
    return vocab_[static_cast<size_t>(id)];
}

TokenSequence PromptGrammar::tokenize(const std::string& text) const {
    TokenSequence seq;
    if (text.empty()) {
        seq.ids.push_back(null_id());
        return seq;
    }
    seq.ids.push_back(bos_id());
    std::istringstream in(text);
    std::string w;
    while (in >> w) seq.ids.push_back(token_id(w));
    seq.ids.push_back(eos_id());
    return seq;
}

std::string PromptGrammar::detokenize(const TokenSequence& seq) const {
    std::string out;
    for (int id : seq.ids) {
        if (id == bos_id() || id == eos_id() || id == pad_id() || id == null_id()) continue;
        if (!out.empty()) out += ' ';
        out += word(id);
    }
    return out;
}

std::string PromptGrammar::instantiate(int template_index, const ConceptLabel& label) const {
    if (template_index < 0 || template_index >= static_cast<int>(templates_.size()))
        throw std::out_of_range("template index out of range");
    std::string t = templates_[static_cast<size_t>(template_index)];
    auto replace_all = [&t](const std::string& from, const std::string& to) {
        size_t pos = 0;
        while ((pos = t.find(from, pos)) != std::string::npos) {
            t.replace(pos, from.size(), to);
            pos += to.size();
        }
    };
    replace_all("{color}", to_string(label.color));
    replace_all("{shape}", to_string(label.shape));
    return t;
}

TokenSequence PromptGrammar::make_prompt(const ConceptLabel& label, int template_index) const {
    return tokenize(instantiate(template_index, label));
}

TokenSequence PromptGrammar::empty_prompt() const {
    TokenSequence seq;
    seq.ids.push_back(null_id());
    return seq;
}

uint64_t PromptGrammar::hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& w : vocab_) {
        h = fnv1a64(w, h);
        h = fnv1a64("|", h);
    }
    h = fnv1a64("##", h);
    for (const auto& t : templates_) {
        h = fnv1a64(t, h);
        h = fnv1a64("|", h);
    }
    return h;
}

Dataset build_dataset(int n_per_class, const std::vector<ConceptLabel>& classes, uint64_t seed,
                      const PromptGrammar& grammar) {
    if (classes.empty()) throw std::invalid_argument("build_dataset: empty class list");
    if (n_per_class < 1) throw std::invalid_argument("build_dataset: n_per_class must be >= 1");

    Dataset ds;
    ds.classes = classes;
    ds.n_per_class = n_per_class;
    ds.seed = seed;
    ds.grammar_hash = grammar.hash();
    const int n_templates = static_cast<int>(grammar.templates().size());
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        for (int i = 0; i < n_per_class; ++i) {
            const uint64_t item_key = splitmix64(seed ^ splitmix64(ci * 1000003ull + static_cast<uint64_t>(i)));
            DatasetItem item;
            item.label = classes[ci];
            item.image = generate_image(item.label, item_key);
            RngStream trng(item_key, "template_pick");
            item.prompt = grammar.make_prompt(item.label, static_cast<int>(trng.uniform_index(static_cast<uint64_t>(n_templates))));
            ds.items.push_back(std::move(item));
        }
    }
    return ds;
}

void export_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::ofstream img(dir / "images.f32", std::ios::binary);
    std::ofstream tok(dir / "tokens.i32", std::ios::binary);
    std::ofstream lab(dir / "labels.i32", std::ios::binary);
    if (!img || !tok || !lab) throw std::runtime_error("export_dataset: cannot open output files");
    for (const auto& it : ds.items) {
        img.write(reinterpret_cast<const char*>(it.image.chw.data()), kImagePixels * sizeof(float));
        int32_t len = static_cast<int32_t>(it.prompt.ids.size());
        tok.write(reinterpret_cast<const char*>(&len), sizeof(len));
        for (int id : it.prompt.ids) {
            int32_t v = id;
            tok.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
        int32_t li = it.label.index();
        lab.write(reinterpret_cast<const char*>(&li), sizeof(li));
    }

    json manifest;
    manifest["count"] = ds.items.size();
    manifest["n_per_class"] = ds.n_per_class;
    manifest["seed"] = ds.seed;
    manifest["grammar_hash"] = ds.grammar_hash;
    json cls = json::array();
    for (const auto& c : ds.classes) cls.push_back(c.str());
    manifest["classes"] = cls;
    std::ofstream mf(dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

Dataset import_dataset(const std::filesystem::path& dir, const PromptGrammar& grammar) {
    namespace fs = std::filesystem;
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("import_dataset: missing manifest.json in " + dir.string());
    json manifest = json::parse(mf);

    Dataset ds;
    ds.n_per_class = manifest.at("n_per_class").get<int>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.grammar_hash = manifest.at("grammar_hash").get<uint64_t>();
    if (ds.grammar_hash != grammar.hash()) throw std::runtime_error("import_dataset: grammar hash mismatch");
    for (const auto& s : manifest.at("classes")) {
        auto label = ConceptLabel::parse(s.get<std::string>());
        if (!label) throw std::runtime_error("import_dataset: bad class label in manifest");
        ds.classes.push_back(*label);
    }
    const size_t count = manifest.at("count").get<size_t>();

    std::ifstream img(dir / "images.f32", std::ios::binary);
    std::ifstream tok(dir / "tokens.i32", std::ios::binary);
    std::ifstream lab(dir / "labels.i32", std::ios::binary);
    if (!img || !tok || !lab) throw std::runtime_error("import_dataset: missing array files");
    for (size_t i = 0; i < count; ++i) {
        DatasetItem it;
        img.read(reinterpret_cast<char*>(it.image.chw.data()), kImagePixels * sizeof(float));
        int32_t len = 0;
        tok.read(reinterpret_cast<char*>(&len), sizeof(len));
        it.prompt.ids.resize(static_cast<size_t>(len));
        for (auto& id : it.prompt.ids) {
            int32_t v = 0;
            tok.read(reinterpret_cast<char*>(&v), sizeof(v));
            id = v;
        }
        int32_t li = 0;
        lab.read(reinterpret_cast<char*>(&li), sizeof(li));
        it.label = ConceptLabel::from_index(li);
        if (!img || !tok || !lab) throw std::runtime_error("import_dataset: truncated array files");
        ds.items.push_back(std::move(it));
    }
    return ds;
}

}  // namespace advlab::toy
