#include "doctest.h"

#include <filesystem>
#include <map>

#include "advlab/toy_world.hpp"

using namespace advlab;
using namespace advlab::toy;

TEST_CASE("labels: 12 distinct classes, canonical string round trip") {
    auto labels = all_labels();
    CHECK(labels.size() == 12);
    for (size_t i = 0; i < labels.size(); ++i) {
        CHECK(labels[i].index() == static_cast<int>(i));
        auto parsed = ConceptLabel::parse(labels[i].str());
        REQUIRE(parsed.has_value());
        CHECK(*parsed == labels[i]);
    }
    CHECK_FALSE(ConceptLabel::parse("red potato").has_value());
    CHECK_FALSE(ConceptLabel::parse("red circle extra").has_value());
}

TEST_CASE("generate_image determinism, jitter, and clipping") {
    ConceptLabel red_circle{Shape::circle, Color::red};
    auto a = generate_image(red_circle, 0);
    auto b = generate_image(red_circle, 0);
    CHECK(a.chw == b.chw);

    auto c = generate_image(red_circle, 1);
    CHECK(a.chw != c.chw);

    for (uint64_t seed = 0; seed < 20; ++seed)
        for (const auto& label : all_labels()) {
            auto img = generate_image(label, seed);
            float mn = 2.f, mx = -1.f;
            for (float v : img.chw) {
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            CHECK(mn >= 0.f);
            CHECK(mx <= 1.f);
        }
}

TEST_CASE("images carry their color in the shape region") {
    // The dominant channel inside the drawn shape must match the label color.
    for (uint64_t seed = 0; seed < 5; ++seed)
        for (const auto& label : all_labels()) {
            auto img = generate_image(label, seed);
            // background is gray (all channels equal); find most saturated pixel
            double best = -1;
            int bestc = -1;
            for (int y = 0; y < kImageSize; ++y)
                for (int x = 0; x < kImageSize; ++x) {
                    double r = img.at(0, y, x), g = img.at(1, y, x), b = img.at(2, y, x);
                    double mean = (r + g + b) / 3;
                    double sat = std::abs(r - mean) + std::abs(g - mean) + std::abs(b - mean);
                    if (sat > best) {
                        best = sat;
                        bestc = r > g && r > b ? 0 : (g > b ? 1 : 2);
                    }
                }
            CHECK(best > 0.3);  // a shape actually exists
            CHECK(bestc == static_cast<int>(label.color));
        }
}

TEST_CASE("grammar basics") {
    auto g = PromptGrammar::standard();
    CHECK(g.vocab_size() <= 64);

    SUBCASE("make_prompt instantiates template with BOS/EOS framing") {
        ConceptLabel red_circle{Shape::circle, Color::red};
        auto seq = g.make_prompt(red_circle, 0);
        CHECK(seq.ids.front() == g.bos_id());
        CHECK(seq.ids.back() == g.eos_id());
        CHECK(g.detokenize(seq) == "a photo of a red circle");
    }
    SUBCASE("empty prompt is the single NULL token") {
        auto e = g.tokenize("");
        CHECK(e.ids.size() == 1);
        CHECK(e.ids[0] == g.null_id());
        CHECK(e == g.empty_prompt());
    }
    SUBCASE("unknown template index throws") {
        CHECK_THROWS_AS(g.make_prompt(ConceptLabel{}, 999), std::out_of_range);
    }
    SUBCASE("every label x template round-trips and fits the length budget") {
        for (const auto& label : all_labels())
            for (int t = 0; t < static_cast<int>(g.templates().size()); ++t) {
                auto seq = g.make_prompt(label, t);
                CHECK(static_cast<int>(seq.ids.size()) <= kMaxPromptLen);
                CHECK(g.detokenize(seq) == g.instantiate(t, label));
                CHECK(g.tokenize(g.detokenize(seq)) == seq);
            }
    }
    SUBCASE("out-of-vocabulary word throws") {
        CHECK_THROWS_AS(g.tokenize("a purple circle"), std::out_of_range);
    }
}

TEST_CASE("build_dataset: counts, determinism, balance") {
    auto g = PromptGrammar::standard();
    auto ds = build_dataset(100, all_labels(), 7, g);
    CHECK(ds.items.size() == 1200);

    auto ds2 = build_dataset(100, all_labels(), 7, g);
    REQUIRE(ds2.items.size() == ds.items.size());
    bool identical = true;
    for (size_t i = 0; i < ds.items.size(); ++i)
        identical = identical && ds.items[i].image.chw == ds2.items[i].image.chw &&
                    ds.items[i].prompt == ds2.items[i].prompt && ds.items[i].label == ds2.items[i].label;
    CHECK(identical);

    std::map<int, int> hist;
    for (const auto& it : ds.items) hist[it.label.index()]++;
    CHECK(hist.size() == 12);
    for (auto& [k, v] : hist) CHECK(v == 100);

    // prompts decode to their own label
    for (const auto& it : ds.items) {
        auto text = g.detokenize(it.prompt);
        CHECK(text.find(it.label.str()) != std::string::npos);
    }

    CHECK_THROWS_AS(build_dataset(3, {}, 0, g), std::invalid_argument);
    CHECK_THROWS_AS(build_dataset(0, all_labels(), 0, g), std::invalid_argument);
}

TEST_CASE("dataset export/import round trip") {
    auto g = PromptGrammar::standard();
    auto ds = build_dataset(3, all_labels(), 11, g);
    auto dir = std::filesystem::temp_directory_path() / "advlab_ds_test";
    std::filesystem::remove_all(dir);
    export_dataset(ds, dir);
    auto back = import_dataset(dir, g);
    REQUIRE(back.items.size() == ds.items.size());
    for (size_t i = 0; i < ds.items.size(); ++i) {
        CHECK(back.items[i].image.chw == ds.items[i].image.chw);
        CHECK(back.items[i].prompt == ds.items[i].prompt);
        CHECK(back.items[i].label == ds.items[i].label);
    }
    CHECK(back.grammar_hash == g.hash());
    std::filesystem::remove_all(dir);
}
