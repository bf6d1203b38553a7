#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "advlab/rng.hpp"

namespace advlab::toy {

enum class Shape : int { circle = 0, square = 1, triangle = 2, cross = 3 };
enum class Color : int { red = 0, green = 1, blue = 2 };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 3;
inline constexpr int kNumClasses = kNumShapes * kNumColors;
inline constexpr int kImageSize = 32;
inline constexpr int kImagePixels = 3 * kImageSize * kImageSize;

const char* to_string(Shape s);
const char* to_string(Color c);

struct ConceptLabel {
    Shape shape = Shape::circle;
    Color color = Color::red;

    int index() const { return static_cast<int>(color) * kNumShapes + static_cast<int>(shape); }
    static ConceptLabel from_index(int i);
    // Canonical "COLOR SHAPE" string, e.g. "red circle".
    std::string str() const;
    static std::optional<ConceptLabel> parse(const std::string& s);

    bool operator==(const ConceptLabel&) const = default;
};

std::vector<ConceptLabel> all_labels();

// CHW float image with values in [0,1].
struct Image {
    std::vector<float> chw = std::vector<float>(kImagePixels, 0.f);

    float& at(int c, int y, int x) { return chw[static_cast<size_t>((c * kImageSize + y) * kImageSize + x)]; }
    float at(int c, int y, int x) const { return chw[static_cast<size_t>((c * kImageSize + y) * kImageSize + x)]; }
};

// A colored shape on a gray background with seeded jitter: position +-4 px,
// scale +-20%, background level in [0.6, 0.9]. Pure in (label, seed).
Image generate_image(const ConceptLabel& label, uint64_t seed);

struct TokenSequence {
    std::vector<int> ids;
    bool operator==(const TokenSequence&) const = default;
};

// Word-level grammar: fixed vocabulary plus prompt templates with
// {color}/{shape} slots. The <null> token alone encodes the empty prompt.
class PromptGrammar {
public:
    static PromptGrammar standard();

    const std::vector<std::string>& vocabulary() const { return vocab_; }
    const std::vector<std::string>& templates() const { return templates_; }
    int vocab_size() const { return static_cast<int>(vocab_.size()); }

    int pad_id() const { return 0; }
    int bos_id() const { return 1; }
    int eos_id() const { return 2; }
    int null_id() const { return 3; }

    // Throws std::out_of_range on unknown words.
    int token_id(const std::string& word) const;
    const std::string& word(int id) const;

    // Word-level codec. "" maps to the single <null> token; other inputs get
    // <bos> ... <eos> framing.
    TokenSequence tokenize(const std::string& text) const;
    std::string detokenize(const TokenSequence& seq) const;

    std::string instantiate(int template_index, const ConceptLabel& label) const;
    TokenSequence make_prompt(const ConceptLabel& label, int template_index) const;
    TokenSequence empty_prompt() const;

    uint64_t hash() const;

private:
    std::vector<std::string> vocab_;
    std::vector<std::string> templates_;
};

inline constexpr int kMaxPromptLen = 12;

struct DatasetItem {
    Image image;
    TokenSequence prompt;
    ConceptLabel label;
};

struct Dataset {
    std::vector<DatasetItem> items;
    std::vector<ConceptLabel> classes;
    int n_per_class = 0;
    uint64_t seed = 0;
    uint64_t grammar_hash = 0;
};

// Balanced dataset: n_per_class images per class, each paired with a randomly
// chosen template prompt for its label. Deterministic in (arguments, seed).
Dataset build_dataset(int n_per_class, const std::vector<ConceptLabel>& classes, uint64_t seed,
                      const PromptGrammar& grammar);

// Directory layout: manifest.json + images.f32 + tokens.i32 + labels.i32.
// Round-trips bit-exactly.
void export_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset import_dataset(const std::filesystem::path& dir, const PromptGrammar& grammar);

}  // namespace advlab::toy
