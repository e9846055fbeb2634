#include "gcut3r/model.hpp"

#include <cctype>
#include <cmath>

#include "gcut3r/errors.hpp"

namespace gcut3r {

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.image_size = 224;
    c.patch = 16;
    c.embed_dim = 768;
    c.encoder = {768, 12, 4, 12};
    c.decoder = {768, 12, 4, 12};
    c.modality_encoder = {768, 12, 4, 4};
    c.state_tokens = 768;
    return c;
}

void ModelConfig::validate() const {
    if (patch == 0 || image_size == 0 || image_size % patch != 0) {
        fail(Errc::config, "image_size " + std::to_string(image_size) + " must be a positive multiple of patch " +
                               std::to_string(patch));
    }
    encoder.validate("encoder");
    decoder.validate("decoder");
    modality_encoder.validate("modality_encoder");
    for (const auto* b : {&encoder, &decoder, &modality_encoder}) {
        if (b->embed_dim != embed_dim) fail(Errc::config, "block embed_dim must equal embed_dim");
    }
    if (decoder.layers < kFusionPoints) {
        fail(Errc::config, "decoder needs at least 5 layers to host the fusion points");
    }
    if (modality_encoder.layers != kModalityLayers) fail(Errc::config, "modality encoders have exactly 4 layers");
    if (state_tokens == 0) fail(Errc::config, "state_tokens must be >= 1");
    if (embed_dim % 4 != 0) fail(Errc::config, "embed_dim must be divisible by 4");
}

std::string ModalitySubset::letters() const {
    std::string s;
    if (k) s += 'K';
    if (p) s += 'P';
    if (d) s += 'D';
    return s;
}

ModalitySubset ModalitySubset::parse(const std::string& letters) {
    ModalitySubset s;
    for (char ch : letters) {
        switch (std::toupper(static_cast<unsigned char>(ch))) {
            case 'K': s.k = true; break;
            case 'P': s.p = true; break;
            case 'D': s.d = true; break;
            default: fail(Errc::usage, std::string("unknown modality letter '") + ch + "'");
        }
    }
    return s;
}

std::array<ModalitySubset, 8> all_subsets() {
    return {ModalitySubset{false, false, false}, ModalitySubset{true, false, false},
            ModalitySubset{false, true, false},  ModalitySubset{false, false, true},
            ModalitySubset{true, true, false},   ModalitySubset{true, false, true},
            ModalitySubset{false, true, true},   ModalitySubset{true, true, true}};
}

GuidanceSet GuidanceSet::restricted(ModalitySubset subset) const {
    GuidanceSet g;
    if (subset.k) g.intrinsics = intrinsics;
    if (subset.p) g.pose = pose;
    if (subset.d) g.depth = depth;
    return g;
}

Pose Prediction::pose() const {
    const auto& q = quat.value().data;
    const auto& t = trans.value().data;
    return {Quat{q[0], q[1], q[2], q[3]}, Vec3{t[0], t[1], t[2]}};
}

ImageEncoder::ImageEncoder(nn::ParamStore& store, const ModelConfig& cfg)
    : cfg_(cfg),
      embed_(store, "image_encoder.embed", 3, cfg.patch, cfg.embed_dim),
      pos_(nn::sincos_2d(cfg.grid(), cfg.grid(), cfg.embed_dim)),
      norm_(store, "image_encoder.norm", cfg.embed_dim) {
    for (std::size_t i = 0; i < cfg.encoder.layers; ++i) {
        blocks_.emplace_back(store, "image_encoder.blocks." + std::to_string(i), cfg.encoder);
    }
}

Var ImageEncoder::operator()(const Array& image) const {
    const Shape expected{3, cfg_.image_size, cfg_.image_size};
    if (image.shape != expected) {
        fail(Errc::shape, "image " + shape_str(image.shape) + " does not match configured " + shape_str(expected));
    }
    Var x = ad::add(embed_(ad::constant(image)), ad::constant(pos_));
    for (const auto& b : blocks_) x = b(x);
    return norm_(x);
}

Model::DecoderBlock::DecoderBlock(nn::ParamStore& store, const std::string& name, const nn::BlockConfig& cfg)
    : ln_self_(store, name + ".ln_self", cfg.embed_dim),
      ln_tok_q_(store, name + ".ln_tok_q", cfg.embed_dim),
      ln_tok_kv_(store, name + ".ln_tok_kv", cfg.embed_dim),
      ln_state_q_(store, name + ".ln_state_q", cfg.embed_dim),
      ln_state_kv_(store, name + ".ln_state_kv", cfg.embed_dim),
      ln_tok_mlp_(store, name + ".ln_tok_mlp", cfg.embed_dim),
      ln_state_mlp_(store, name + ".ln_state_mlp", cfg.embed_dim),
      self_attn_(store, name + ".self_attn", cfg.embed_dim, cfg.heads),
      tok_from_state_(store, name + ".tok_from_state", cfg.embed_dim, cfg.heads),
      state_from_tok_(store, name + ".state_from_tok", cfg.embed_dim, cfg.heads),
      tok_mlp_(store, name + ".tok_mlp", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio),
      state_mlp_(store, name + ".state_mlp", cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio) {}

void Model::DecoderBlock::operator()(Var& tokens, Var& state) const {
    tokens = ad::add(tokens, self_attn_(ln_self_(tokens)));
    tokens = ad::add(tokens, tok_from_state_(ln_tok_q_(tokens), ln_tok_kv_(state)));
    state = ad::add(state, state_from_tok_(ln_state_q_(state), ln_state_kv_(tokens)));
    tokens = ad::add(tokens, tok_mlp_(ln_tok_mlp_(tokens)));
    state = ad::add(state, state_mlp_(ln_state_mlp_(state)));
}

Model::Model(const ModelConfig& cfg)
    : cfg_((cfg.validate(), cfg)),
      store_(cfg.seed),
      image_encoder_(store_, cfg_),
      pos_(nn::sincos_2d(cfg.grid(), cfg.grid(), cfg.embed_dim)) {
    const std::size_t c = cfg_.embed_dim;
    const std::pair<ModalityBranch*, std::pair<const char*, std::size_t>> branches[] = {
        {&branch_k_, {"modality.k", 3}}, {&branch_p_, {"modality.p", 3}}, {&branch_d_, {"modality.d", 2}}};
    for (auto& [branch, spec] : branches) {
        const std::string name = spec.first;
        branch->embed = nn::PatchEmbed(store_, name + ".embed", spec.second, cfg_.patch, c);
        for (std::size_t i = 0; i < kModalityLayers; ++i) {
            branch->blocks.emplace_back(store_, name + ".blocks." + std::to_string(i), cfg_.modality_encoder);
        }
    }
    for (std::size_t k = 0; k < kFusionPoints; ++k) {
        fusion_.emplace_back(store_, "fusion." + std::to_string(k), c, cfg_.fusion);
    }
    pose_token_ = store_.add("decoder.pose_token", nn::trunc_normal({1, c}, 0.02, cfg_.seed, "decoder.pose_token"));
    state_init_ = store_.add("decoder.state_init",
                             nn::trunc_normal({cfg_.state_tokens, c}, 0.02, cfg_.seed, "decoder.state_init"));
    for (std::size_t i = 0; i < cfg_.decoder.layers; ++i) {
        decoder_.emplace_back(store_, "decoder.blocks." + std::to_string(i), cfg_.decoder);
    }
    decoder_norm_ = nn::LayerNorm(store_, "decoder.norm", c);
    const std::size_t pp = cfg_.patch * cfg_.patch;
    point_head_ = nn::Linear(store_, "head.point", c, pp * 3);
    conf_head_ = nn::Linear(store_, "head.conf", c, pp);
    pose_head_ = nn::Linear(store_, "head.pose", c, 7);
    // Start the rotation readout at identity.
    store_.get("head.pose.bias").node()->value.data[0] = 1.0;
}

Var Model::encode_image(const Array& image) const { return image_encoder_(image); }

ModalityTokens Model::embed_modalities(const GuidanceSet& guidance) const {
    const std::size_t h = cfg_.image_size;
    ModalityTokens out;
    if (guidance.intrinsics) {
        const Array rays = encode_rays(*guidance.intrinsics, guidance.pose, h, h, cfg_.rays);
        out.k = branch_k_.embed(ad::constant(rays));
    }
    if (guidance.pose) out.p = branch_p_.embed(ad::constant(encode_pose_map(*guidance.pose, h, h)));
    if (guidance.depth) {
        if (guidance.depth->height != h || guidance.depth->width != h) {
            fail(Errc::shape, "depth prior " + std::to_string(guidance.depth->height) + "x" +
                                  std::to_string(guidance.depth->width) + " does not match image size " +
                                  std::to_string(h));
        }
        out.d = branch_d_.embed(ad::constant(encode_depth(*guidance.depth)));
    }
    return out;
}

std::vector<Var> Model::encode_branch(const ModalityBranch& branch, const Var& embedded) const {
    std::vector<Var> levels;
    Var x = ad::add(embedded, ad::constant(pos_));
    for (const auto& b : branch.blocks) {
        x = b(x);
        levels.push_back(x);
    }
    return levels;
}

GuidancePyramid Model::guidance_pyramid(const ModalityTokens& tokens) const {
    GuidancePyramid g;
    for (auto& level : g) level = ad::zeros({cfg_.tokens(), cfg_.embed_dim});
    const std::pair<const std::optional<Var>*, const ModalityBranch*> parts[] = {
        {&tokens.k, &branch_k_}, {&tokens.p, &branch_p_}, {&tokens.d, &branch_d_}};
    bool first = true;
    for (const auto& [embedded, branch] : parts) {
        if (!embedded->has_value()) continue;
        const std::vector<Var> levels = encode_branch(*branch, **embedded);
        if (first) {
            g[0] = **embedded;
            for (std::size_t k = 0; k < kModalityLayers; ++k) g[k + 1] = levels[k];
            first = false;
        } else {
            g[0] = ad::add(g[0], **embedded);
            for (std::size_t k = 0; k < kModalityLayers; ++k) g[k + 1] = ad::add(g[k + 1], levels[k]);
        }
    }
    return g;
}

Var Model::fuse(const Var& image_tokens, const Var& guidance, std::size_t level) const {
    if (level >= kFusionPoints) fail(Errc::shape, "fusion level " + std::to_string(level) + " out of range");
    return ad::add(image_tokens, fusion_[level](guidance));
}

State Model::initial_state() const { return {state_init_}; }

DecodeOutput Model::decode_step(const Var& image_tokens, const GuidancePyramid& guidance,
                                const State& state) const {
    const std::size_t n = cfg_.tokens();
    const Var parts[] = {pose_token_, fuse(image_tokens, guidance[0], 0)};
    Var tokens = ad::concat_rows(parts);
    Var s = state.tokens;
    for (std::size_t layer = 0; layer < decoder_.size(); ++layer) {
        decoder_[layer](tokens, s);
        if (layer + 1 < kFusionPoints) {
            const Var fused[] = {ad::slice_rows(tokens, 0, 1),
                                 fuse(ad::slice_rows(tokens, 1, n + 1), guidance[layer + 1], layer + 1)};
            tokens = ad::concat_rows(fused);
        }
    }
    tokens = decoder_norm_(tokens);
    return {ad::slice_rows(tokens, 0, 1), ad::slice_rows(tokens, 1, n + 1), State{s}};
}

Prediction Model::heads(const DecodeOutput& decoded) const {
    const std::size_t h = cfg_.image_size;
    Prediction pred;
    pred.pointmap = ad::unpatchify(point_head_(decoded.image_tokens), 3, h, h, cfg_.patch);
    const Var conf_raw = ad::unpatchify(conf_head_(decoded.image_tokens), 1, h, h, cfg_.patch);
    pred.confidence = ad::add_scalar(ad::exp(ad::reshape(conf_raw, {h, h})), 1.0);

    const Var pose_raw = pose_head_(decoded.pose_token);  // 1 x 7
    const Var q_raw = ad::reshape(ad::slice_cols(pose_raw, 0, 4), {4, 1});
    const double q_norm = ad::row_norm(ad::reshape(q_raw, {4})).item();
    if (q_norm < 1e-12) {
        pred.quat = ad::constant(Array({4}, {1.0, 0.0, 0.0, 0.0}));
    } else {
        const Var norm = ad::row_norm(ad::reshape(q_raw, {1, 4}));          // [1]
        const Var inv = ad::exp(ad::scale(ad::log(norm), -1.0));              // [1]
        const Var unit = ad::reshape(ad::mul(q_raw, inv), {4});
        const Quat raw{unit.value()[0], unit.value()[1], unit.value()[2], unit.value()[3]};
        pred.quat = canonicalize(raw) == raw ? unit : ad::scale(unit, -1.0);
    }
    pred.trans = ad::reshape(ad::slice_cols(pose_raw, 4, 7), {3});
    return pred;
}

Prediction Model::forward_frame(const Frame& frame, State& state) const {
    const Var image_tokens = encode_image(frame.image);
    const GuidancePyramid g = guidance_pyramid(embed_modalities(frame.guidance));
    DecodeOutput decoded = decode_step(image_tokens, g, state);
    state = decoded.state;
    return heads(decoded);
}

SequenceOutput Model::forward_sequence(std::span<const Frame> frames) const {
    if (frames.empty()) fail(Errc::shape, "forward_sequence needs at least one frame");
    for (const Frame& f : frames) {
        if (f.image.shape != frames[0].image.shape) {
            fail(Errc::shape, "inconsistent image sizes within a sequence: " + shape_str(frames[0].image.shape) +
                                  " vs " + shape_str(f.image.shape));
        }
    }
    SequenceOutput out;
    out.state = initial_state();
    for (const Frame& f : frames) out.predictions.push_back(forward_frame(f, out.state));
    return out;
}

std::vector<std::string> Model::fusion_param_names() const {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < kFusionPoints; ++k) {
        names.push_back("fusion." + std::to_string(k) + ".weight");
        names.push_back("fusion." + std::to_string(k) + ".bias");
    }
    return names;
}

}  // namespace gcut3r
