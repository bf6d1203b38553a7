#include "advlab/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "advlab/serialize.hpp"

namespace advlab::eval {

OracleClassifier::OracleClassifier(int c1, int c2, int c3, uint64_t init_seed) : c1_(c1), c2_(c2), c3_(c3) {
    int pidx = 0;
    auto conv_init = [&](int co, int ci) {
        RngStream rng(init_seed, "oracle_init", static_cast<uint64_t>(pidx++));
        return Tensor<float>::randn({co, ci, 3, 3}, rng, static_cast<float>(std::sqrt(2.0 / (ci * 9))));
    };
    w1_ = conv_init(c1, 3);
    b1_ = Tensor<float>::zeros({c1});
    w2_ = conv_init(c2, c1);
    b2_ = Tensor<float>::zeros({c2});
    w3_ = conv_init(c3, c2);
    b3_ = Tensor<float>::zeros({c3});
    RngStream rng(init_seed, "oracle_init", static_cast<uint64_t>(pidx++));
    fc_w_ = Tensor<float>::randn({c3, toy::kNumClasses}, rng, static_cast<float>(std::sqrt(2.0 / (c3 + 12))));
    fc_b_ = Tensor<float>::zeros({toy::kNumClasses});
}

Tensor<float> OracleClassifier::features(const Tensor<float>& x) const {
    auto h1 = avg_pool2(silu(conv3x3(x, w1_, b1_)));        // 16x16
    auto h2 = avg_pool2(silu(conv3x3(h1, w2_, b2_)));       // 8x8
    auto h3 = silu(conv3x3(h2, w3_, b3_));                  // 8x8
    return global_avg_pool(h3);                             // [N, c3]
}

Tensor<float> OracleClassifier::forward(const Tensor<float>& x) const {
    return linear(features(x), fc_w_, fc_b_);
}

namespace {

Tensor<float> image_batch(const std::vector<const toy::Image*>& imgs) {
    auto x = Tensor<float>::zeros({static_cast<int>(imgs.size()), 3, toy::kImageSize, toy::kImageSize});
    for (size_t i = 0; i < imgs.size(); ++i)
        std::copy(imgs[i]->chw.begin(), imgs[i]->chw.end(), x.data() + i * toy::kImagePixels);
    return x;
}

std::vector<float> softmax(const float* logits, int k) {
    float mx = logits[0];
    for (int i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
    std::vector<float> p(static_cast<size_t>(k));
    float z = 0;
    for (int i = 0; i < k; ++i) {
        p[static_cast<size_t>(i)] = std::exp(logits[i] - mx);
        z += p[static_cast<size_t>(i)];
    }
    for (auto& v : p) v /= z;
    return p;
}

}  // namespace

std::vector<float> OracleClassifier::class_probabilities(const toy::Image& img) const {
    NoGradGuard ng;
    auto logits = forward(image_batch({&img}));
    return softmax(logits.data(), toy::kNumClasses);
}

int OracleClassifier::predict(const toy::Image& img) const {
    auto p = class_probabilities(img);
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

std::vector<float> OracleClassifier::feature_vector(const toy::Image& img) const {
    NoGradGuard ng;
    auto f = features(image_batch({&img}));
    return f.values();
}

ParamList<float> OracleClassifier::params() {
    return {{"oracle.w1", &w1_}, {"oracle.b1", &b1_}, {"oracle.w2", &w2_}, {"oracle.b2", &b2_},
            {"oracle.w3", &w3_}, {"oracle.b3", &b3_}, {"oracle.fc_w", &fc_w_}, {"oracle.fc_b", &fc_b_}};
}

void OracleClassifier::save(const std::filesystem::path& file) {
    io::Container c;
    c.header["kind"] = "oracle";
    c.header["channels"] = {c1_, c2_, c3_};
    for (auto& p : params()) c.arrays.push_back({p.name, p.tensor->shape(), p.tensor->values()});
    io::save_container(c, file);
}

OracleClassifier OracleClassifier::load(const std::filesystem::path& file) {
    auto c = io::load_container(file);
    if (c.header.at("kind") != "oracle") throw std::runtime_error("oracle load: wrong container kind");
    auto ch = c.header.at("channels").get<std::vector<int>>();
    OracleClassifier o(ch.at(0), ch.at(1), ch.at(2), 0);
    for (auto& p : o.params()) p.tensor->values() = c.find(p.name).data;
    return o;
}

namespace {

// Mild noise/blur augmentation so the oracle stays reliable on the softer
// images the diffusion model produces.
toy::Image augment(const toy::Image& src, RngStream& rng) {
    toy::Image out = src;
    if (rng.uniform() < 0.5) {
        const float sigma = static_cast<float>(rng.uniform(0.0, 0.08));
        for (auto& v : out.chw) v = std::clamp(v + sigma * static_cast<float>(rng.normal()), 0.f, 1.f);
    }
    if (rng.uniform() < 0.3) {
        toy::Image blur = out;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < toy::kImageSize; ++y)
                for (int x = 0; x < toy::kImageSize; ++x) {
                    float acc = 0;
                    int cnt = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= toy::kImageSize || xx < 0 || xx >= toy::kImageSize) continue;
                            acc += out.at(c, yy, xx);
                            ++cnt;
                        }
                    blur.at(c, y, x) = acc / static_cast<float>(cnt);
                }
        out = blur;
    }
    return out;
}

struct Split {
    std::vector<const toy::DatasetItem*> train, holdout;
};

// Stratified split: the last 10% of every class goes to the holdout.
Split split_dataset(const toy::Dataset& data) {
    Split s;
    std::map<int, std::vector<const toy::DatasetItem*>> by_class;
    for (const auto& it : data.items) by_class[it.label.index()].push_back(&it);
    for (auto& [cls, items] : by_class) {
        const size_t cut = items.size() - std::max<size_t>(1, items.size() / 10);
        for (size_t i = 0; i < items.size(); ++i)
            (i < cut ? s.train : s.holdout).push_back(items[i]);
    }
    return s;
}

}  // namespace

double oracle_holdout_accuracy(const OracleClassifier& oracle, const toy::Dataset& data) {
    auto split = split_dataset(data);
    int correct = 0;
    for (const auto* it : split.holdout)
        if (oracle.predict(it->image) == it->label.index()) ++correct;
    return static_cast<double>(correct) / static_cast<double>(split.holdout.size());
}

OracleClassifier train_oracle(const toy::Dataset& data, uint64_t seed, double accuracy_gate) {
    OracleClassifier oracle(16, 32, 32, seed);
    auto split = split_dataset(data);

    auto params = oracle.params();
    for (auto& p : params) p.tensor->set_requires_grad(true);
    Optimizer<float> opt(OptimizerKind::adam, 2e-3f);

    const int epochs = 10, batch = 32;
    for (int e = 0; e < epochs; ++e) {
        RngStream order_rng(seed, "oracle_order", static_cast<uint64_t>(e));
        std::vector<size_t> order(split.train.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.uniform_index(i)]);

        RngStream aug_rng(seed, "oracle_aug", static_cast<uint64_t>(e));
        for (size_t off = 0; off < order.size(); off += batch) {
            const size_t end = std::min(order.size(), off + batch);
            std::vector<toy::Image> imgs;
            std::vector<int> labels;
            for (size_t i = off; i < end; ++i) {
                imgs.push_back(augment(split.train[order[i]]->image, aug_rng));
                labels.push_back(split.train[order[i]]->label.index());
            }
            std::vector<const toy::Image*> ptrs;
            for (const auto& im : imgs) ptrs.push_back(&im);
            auto loss = cross_entropy_logits(oracle.forward(image_batch(ptrs)), labels);
            zero_grads(params);
            backward(loss);
            opt.step(params);
        }
    }
    for (auto& p : params) p.tensor->set_requires_grad(false);

    const double acc = oracle_holdout_accuracy(oracle, data);
    if (acc < accuracy_gate)
        throw std::runtime_error("train_oracle: holdout accuracy " + std::to_string(acc) +
                                 " below the gate; the toy domain is misconfigured");
    return oracle;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j;
    j["asr"] = asr;
    j["fd"] = fd;
    j["alignment"] = alignment;
    j["timing_seconds"] = timing_seconds;
    j["provenance"] = provenance;
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
    MetricsReport r;
    r.asr = j.at("asr").get<double>();
    r.fd = j.at("fd").get<double>();
    r.alignment = j.at("alignment").get<double>();
    r.timing_seconds = j.at("timing_seconds").get<std::map<std::string, double>>();
    r.provenance = j.at("provenance");
    return r;
}

double frechet_feature_distance(const OracleClassifier& oracle, const std::vector<toy::Image>& a,
                                const std::vector<toy::Image>& b, int min_images) {
    if (static_cast<int>(a.size()) < min_images || static_cast<int>(b.size()) < min_images)
        throw std::invalid_argument("frechet_feature_distance: each set needs >= " + std::to_string(min_images) +
                                    " images");
    const int d = oracle.feature_dim();
    auto stats = [&](const std::vector<toy::Image>& set) {
        Eigen::MatrixXd feats(set.size(), d);
        for (size_t i = 0; i < set.size(); ++i) {
            auto f = oracle.feature_vector(set[i]);
            for (int j = 0; j < d; ++j) feats(static_cast<Eigen::Index>(i), j) = f[static_cast<size_t>(j)];
        }
        Eigen::VectorXd mu = feats.colwise().mean();
        Eigen::MatrixXd centered = feats.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(set.size()) - 1);
        cov.diagonal().array() += 1e-6;
        return std::make_pair(mu, cov);
    };
    auto [mu_a, cov_a] = stats(a);
    auto [mu_b, cov_b] = stats(b);

    // tr((Sa Sb)^{1/2}) via the symmetric form Sa^{1/2} Sb Sa^{1/2}
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_a(cov_a);
    Eigen::VectorXd root = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd sqrt_a = es_a.eigenvectors() * root.asDiagonal() * es_a.eigenvectors().transpose();
    Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es_i((inner + inner.transpose()) / 2.0);
    const double tr_sqrt = es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    const double mean_term = (mu_a - mu_b).squaredNorm();
    return mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
}

std::vector<std::pair<toy::TokenSequence, toy::ConceptLabel>> benign_prompts(const toy::PromptGrammar& grammar,
                                                                             const toy::ConceptLabel& erased) {
    std::vector<std::pair<toy::TokenSequence, toy::ConceptLabel>> out;
    for (const auto& label : toy::all_labels()) {
        if (label == erased) continue;
        for (int t = 0; t < static_cast<int>(grammar.templates().size()); ++t)
            out.emplace_back(grammar.make_prompt(label, t), label);
    }
    return out;
}

double alignment_score(const ModelF& model, const OracleClassifier& oracle,
                       const std::vector<std::pair<toy::TokenSequence, toy::ConceptLabel>>& prompts,
                       const toy::PromptGrammar& grammar, int n_samples, double guidance_weight, uint64_t seed) {
    double acc = 0;
    int count = 0;
    for (size_t i = 0; i < prompts.size(); ++i) {
        auto imgs = diffusion::sample_cfg(model, prompts[i].first, grammar, guidance_weight,
                                          splitmix64(seed ^ (0xa11e5 + i)), n_samples);
        for (const auto& img : imgs) {
            acc += oracle.class_probabilities(img)[static_cast<size_t>(prompts[i].second.index())];
            ++count;
        }
    }
    return acc / std::max(1, count);
}

SamplerFn default_sampler(const toy::PromptGrammar& grammar) {
    return [&grammar](const ModelF& m, const Tensor<float>& cond, double w, uint64_t seed, int n) {
        return diffusion::sample_cfg_with_cond(m, cond, grammar, w, seed, n);
    };
}

bool attack_success(const OracleClassifier& oracle, const std::vector<toy::Image>& samples,
                    const toy::ConceptLabel& erased, double threshold) {
    for (const auto& img : samples)
        if (oracle.class_probabilities(img)[static_cast<size_t>(erased.index())] > threshold) return true;
    return false;
}

double evaluate_asr(ModelF& model, const OracleClassifier& oracle, const toy::ConceptLabel& erased,
                    const toy::PromptGrammar& grammar, const AsrConfig& cfg, uint64_t seed, const SamplerFn& sampler,
                    std::vector<adversary::AttackTranscript>* transcripts) {
    if (cfg.n_prompts < 50) throw std::invalid_argument("evaluate_asr: contract requires n_prompts >= 50");
    const int n_templates = static_cast<int>(grammar.templates().size());
    int successes = 0;
    for (int i = 0; i < cfg.n_prompts; ++i) {
        const auto prompt = grammar.make_prompt(erased, i % n_templates);
        const auto target = toy::generate_image(erased, cfg.heldout_image_seed + static_cast<uint64_t>(i));
        const uint64_t attack_seed = splitmix64(seed ^ (0x5eedULL + static_cast<uint64_t>(i)));

        auto atk_cfg = cfg.attack;
        const bool use_injected = static_cast<bool>(sampler);
        if (use_injected) atk_cfg.n_samples = 0;  // sampling delegated to the injected generator
        auto result = adversary::test_attack(model, target, prompt, grammar, atk_cfg, attack_seed);

        std::vector<toy::Image> samples = result.samples;
        if (use_injected) {
            Tensor<float> cond;
            {
                NoGradGuard ng;
                cond = model.encoder.encode_pooled(adversary::apply_strategy(model.encoder.embed(prompt), result.pert));
            }
            samples = sampler(model, cond, cfg.attack.guidance_weight, splitmix64(attack_seed ^ 0x7e57a77acull),
                              cfg.attack.n_samples);
        }
        const bool ok = attack_success(oracle, samples, erased, cfg.success_threshold);
        successes += ok ? 1 : 0;
        if (transcripts) {
            adversary::AttackTranscript row;
            row.seed = attack_seed;
            row.prompt = grammar.detokenize(prompt);
            row.loss_trajectory = result.loss_trajectory;
            double norm = 0;
            for (int64_t j = 0; j < result.pert.delta.size(); ++j)
                norm += static_cast<double>(result.pert.delta.data()[j]) * result.pert.delta.data()[j];
            row.final_delta_norm = std::sqrt(norm);
            row.success = ok;
            transcripts->push_back(row);
        }
    }
    return static_cast<double>(successes) / cfg.n_prompts;
}

double nominal_erased_rate(const ModelF& model, const OracleClassifier& oracle, const toy::ConceptLabel& erased,
                           const toy::PromptGrammar& grammar, int n_prompts, int n_samples, double guidance_weight,
                           uint64_t seed, double threshold) {
    const int n_templates = static_cast<int>(grammar.templates().size());
    int hits = 0;
    for (int i = 0; i < n_prompts; ++i) {
        const auto prompt = grammar.make_prompt(erased, i % n_templates);
        auto imgs = diffusion::sample_cfg(model, prompt, grammar, guidance_weight,
                                          splitmix64(seed ^ (0x40E1ULL + static_cast<uint64_t>(i))), n_samples);
        hits += attack_success(oracle, imgs, erased, threshold) ? 1 : 0;
    }
    return static_cast<double>(hits) / std::max(1, n_prompts);
}

std::vector<toy::Image> sample_benign_set(const ModelF& model, const toy::PromptGrammar& grammar,
                                          const toy::ConceptLabel& erased, int count, double guidance_weight,
                                          uint64_t seed) {
    auto prompts = benign_prompts(grammar, erased);
    std::vector<toy::Image> out;
    int i = 0;
    while (static_cast<int>(out.size()) < count) {
        const auto& [prompt, label] = prompts[static_cast<size_t>(i) % prompts.size()];
        auto imgs = diffusion::sample_cfg(model, prompt, grammar, guidance_weight,
                                          splitmix64(seed ^ (0xbe1164ULL + static_cast<uint64_t>(i))), 1);
        out.push_back(imgs[0]);
        ++i;
    }
    return out;
}

TransferReportPair transfer_eval(const text::EncoderStack<float>& encoder, const ModelF& foreign_model,
                                 const OracleClassifier& oracle, const toy::ConceptLabel& erased,
                                 const toy::PromptGrammar& grammar, const AsrConfig& asr_cfg,
                                 const std::vector<toy::Image>& reference_set, int benign_sample_count,
                                 int alignment_samples, double guidance_weight, uint64_t seed) {
    auto prompts = benign_prompts(grammar, erased);

    auto run = [&](const ModelF& m, const std::string& tag) {
        MetricsReport r;
        ModelF copy = m.clone_weights();
        copy.frozen = m.frozen;
        r.asr = evaluate_asr(copy, oracle, erased, grammar, asr_cfg, splitmix64(seed ^ fnv1a64(tag)));
        r.alignment = alignment_score(m, oracle, prompts, grammar, alignment_samples, guidance_weight,
                                      splitmix64(seed ^ fnv1a64(tag + "_align")));
        auto set = sample_benign_set(m, grammar, erased, benign_sample_count, guidance_weight,
                                     splitmix64(seed ^ fnv1a64(tag + "_set")));
        r.fd = frechet_feature_distance(oracle, set, reference_set);
        r.provenance["role"] = tag;
        r.provenance["fd_feature_space"] = "oracle_v1";
        r.provenance["seed"] = seed;
        return r;
    };

    TransferReportPair pair;
    pair.original = run(foreign_model, "original");
    auto swapped = text::swap_into(foreign_model, encoder);
    pair.transferred = run(swapped, "transferred");
    return pair;
}

}  // namespace advlab::eval
