#include "advlab/objectives.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace advlab::objectives {

PromptJudge keyword_judge(const toy::ConceptLabel& erased) {
    const std::string color = toy::to_string(erased.color);
    const std::string shape = toy::to_string(erased.shape);
    return [color, shape](const std::string& prompt) {
        std::istringstream in(prompt);
        std::string w;
        while (in >> w)
            if (w == color || w == shape) return true;
        return false;
    };
}

RetainSet build_retain_set(const std::vector<toy::ConceptLabel>& object_words, const toy::PromptGrammar& grammar,
                           const PromptJudge& judge, int target_size, const std::string& source_tag,
                           const std::string& filter_tag, const std::string& erased_concept) {
    RetainSet rs;
    rs.source_tag = source_tag;
    rs.filter_tag = filter_tag;
    rs.erased_concept = erased_concept;

    std::set<std::string> seen;
    // Template-major round robin keeps surviving labels balanced within +-1
    // after truncation.
    for (int t = 0; t < static_cast<int>(grammar.templates().size()); ++t) {
        for (const auto& label : object_words) {
            const std::string text = grammar.instantiate(t, label);
            if (judge(text)) continue;
            if (!seen.insert(text).second) continue;
            rs.prompts.push_back(grammar.tokenize(text));
            rs.labels.push_back(label);
            if (static_cast<int>(rs.prompts.size()) == target_size) break;
        }
        if (static_cast<int>(rs.prompts.size()) == target_size) break;
    }
    if (rs.prompts.empty()) throw std::runtime_error("build_retain_set: judge filtered out every candidate prompt");
    return rs;
}

void save_retain_set(const RetainSet& rs, const std::filesystem::path& file, const toy::PromptGrammar& grammar) {
    std::ofstream out(file);
    if (!out) throw std::runtime_error("save_retain_set: cannot open " + file.string());
    for (const auto& p : rs.prompts) out << grammar.detokenize(p) << "\n";

    nlohmann::json side;
    side["source"] = rs.source_tag;
    side["filter"] = rs.filter_tag;
    side["erased_concept"] = rs.erased_concept;
    side["count"] = rs.prompts.size();
    std::ofstream meta(file.string() + ".json");
    meta << side.dump(2) << "\n";
}

RetainSet load_retain_set(const std::filesystem::path& file, const toy::PromptGrammar& grammar) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("load_retain_set: cannot open " + file.string());
    RetainSet rs;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rs.prompts.push_back(grammar.tokenize(line));
        // recover the x0 label from the prompt text
        toy::ConceptLabel found;
        bool ok = false;
        for (const auto& label : toy::all_labels())
            if (line.find(label.str()) != std::string::npos) {
                found = label;
                ok = true;
                break;
            }
        if (!ok) throw std::runtime_error("load_retain_set: prompt mentions no known label: " + line);
        rs.labels.push_back(found);
    }
    std::ifstream meta(file.string() + ".json");
    if (meta) {
        auto side = nlohmann::json::parse(meta);
        rs.source_tag = side.value("source", "");
        rs.filter_tag = side.value("filter", "");
        rs.erased_concept = side.value("erased_concept", "");
    }
    return rs;
}

}  // namespace advlab::objectives
