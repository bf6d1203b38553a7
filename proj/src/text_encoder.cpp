#include "advlab/text_encoder.hpp"

#include "advlab/serialize.hpp"

namespace advlab::text {

void save_encoder_checkpoint(EncoderStack<float>& enc, const std::filesystem::path& file) {
    io::Container c;
    const auto& cfg = enc.config();
    c.header["kind"] = "text_encoder";
    c.header["vocab_size"] = cfg.vocab_size;
    c.header["d_model"] = cfg.d_model;
    c.header["n_layers"] = cfg.n_layers;
    c.header["n_heads"] = cfg.n_heads;
    c.header["max_len"] = cfg.max_len;
    c.header["ff_mult"] = cfg.ff_mult;
    c.header["vocab_hash"] = enc.vocab_hash();
    c.header["trainable_layers"] = enc.trainable_layers();
    for (auto& p : enc.params()) c.arrays.push_back({p.name, p.tensor->shape(), p.tensor->values()});
    io::save_container(c, file);
}

EncoderStack<float> load_encoder_checkpoint(const std::filesystem::path& file) {
    auto c = io::load_container(file);
    if (c.header.at("kind") != "text_encoder")
        throw std::runtime_error("load_encoder_checkpoint: wrong container kind in " + file.string());
    EncoderConfig cfg;
    cfg.vocab_size = c.header.at("vocab_size").get<int>();
    cfg.d_model = c.header.at("d_model").get<int>();
    cfg.n_layers = c.header.at("n_layers").get<int>();
    cfg.n_heads = c.header.at("n_heads").get<int>();
    cfg.max_len = c.header.at("max_len").get<int>();
    cfg.ff_mult = c.header.at("ff_mult").get<int>();
    EncoderStack<float> enc(cfg, c.header.at("vocab_hash").get<uint64_t>(), 0);
    for (auto& p : enc.params()) {
        const auto& a = c.find(p.name);
        if (a.shape != p.tensor->shape())
            throw std::runtime_error("load_encoder_checkpoint: shape mismatch for " + p.name);
        p.tensor->values() = a.data;
    }
    enc.set_trainable_layers(c.header.at("trainable_layers").get<int>());
    return enc;
}

}  // namespace advlab::text
