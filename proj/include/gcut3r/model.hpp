#pragma once

// Recurrent state-token reconstruction network with guidance fusion.
//
// Per frame: the image is patch-embedded and encoded by a ViT; each available prior
// (intrinsics / pose / depth) is rasterised, patch-embedded by its own embedder and
// passed through its own 4-layer encoder. Summed guidance features enter the image
// token stream through five 1x1 channel-mixing layers, one before the first decoder
// layer and one after each of the next four. The decoder exchanges information with a
// persistent set of state tokens, and linear heads read out pointmap, confidence and pose.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gcut3r/geometry.hpp"
#include "gcut3r/nn.hpp"

namespace gcut3r {

using ad::Var;

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch = 8;
    std::size_t embed_dim = 64;
    nn::BlockConfig encoder{64, 4, 4, 4};
    nn::BlockConfig decoder{64, 4, 4, 6};
    nn::BlockConfig modality_encoder{64, 4, 4, 4};
    std::size_t state_tokens = 16;
    nn::Init fusion = nn::Init::zero;
    RayEncoding rays = RayEncoding::rotation_only;
    std::uint64_t seed = 0;

    static ModelConfig tiny();
    static ModelConfig paper();

    std::size_t grid() const { return image_size / patch; }
    std::size_t tokens() const { return grid() * grid(); }
    void validate() const;
};

inline constexpr std::size_t kFusionPoints = 5;
inline constexpr std::size_t kModalityLayers = 4;

/// Which priors are supplied; any of the 8 combinations is valid.
struct ModalitySubset {
    bool k = false;
    bool p = false;
    bool d = false;

    static ModalitySubset none() { return {}; }
    static ModalitySubset all() { return {true, true, true}; }
    /// Bit 0 = K, bit 1 = P, bit 2 = D.
    static ModalitySubset from_bits(unsigned bits) { return {(bits & 1u) != 0, (bits & 2u) != 0, (bits & 4u) != 0}; }
    unsigned bits() const { return (k ? 1u : 0u) | (p ? 2u : 0u) | (d ? 4u : 0u); }
    /// "KPD" letters of present modalities, "" for none.
    std::string letters() const;
    /// Parses letters from {K, P, D}, case-insensitive.
    static ModalitySubset parse(const std::string& letters);

    friend bool operator==(const ModalitySubset&, const ModalitySubset&) = default;
};

/// Enumerates subsets in the table order: -, K, P, D, KP, KD, PD, KPD.
std::array<ModalitySubset, 8> all_subsets();

struct GuidanceSet {
    std::optional<Intrinsics> intrinsics;
    std::optional<Pose> pose;  // relative to the first frame of the sequence
    std::optional<DepthRaster> depth;

    ModalitySubset present() const { return {intrinsics.has_value(), pose.has_value(), depth.has_value()}; }
    /// Drops every prior not in `subset`.
    GuidanceSet restricted(ModalitySubset subset) const;
};

struct Frame {
    Array image;  // 3 x H x W in [0, 1]
    GuidanceSet guidance;
};

struct State {
    Var tokens;  // state_tokens x C
};

struct Prediction {
    Var pointmap;    // 3 x H x W, first-camera frame
    Var confidence;  // H x W, > 1
    Var quat;        // 4, unit, w >= 0
    Var trans;       // 3

    Pose pose() const;
};

/// Per-modality token arrays; absent modalities are empty.
struct ModalityTokens {
    std::optional<Var> k;
    std::optional<Var> p;
    std::optional<Var> d;
};

using GuidancePyramid = std::array<Var, kFusionPoints>;

struct DecodeOutput {
    Var pose_token;    // 1 x C
    Var image_tokens;  // N x C
    State state;
};

struct SequenceOutput {
    std::vector<Prediction> predictions;
    State state;
};

class ImageEncoder {
public:
    ImageEncoder(nn::ParamStore& store, const ModelConfig& cfg);
    Var operator()(const Array& image) const;

private:
    ModelConfig cfg_;
    nn::PatchEmbed embed_;
    Array pos_;
    std::vector<nn::Block> blocks_;
    nn::LayerNorm norm_;
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    Var encode_image(const Array& image) const;
    ModalityTokens embed_modalities(const GuidanceSet& guidance) const;
    GuidancePyramid guidance_pyramid(const ModalityTokens& tokens) const;
    Var fuse(const Var& image_tokens, const Var& guidance, std::size_t level) const;
    State initial_state() const;
    DecodeOutput decode_step(const Var& image_tokens, const GuidancePyramid& guidance,
                             const State& state) const;
    Prediction heads(const DecodeOutput& decoded) const;
    Prediction forward_frame(const Frame& frame, State& state) const;
    SequenceOutput forward_sequence(std::span<const Frame> frames) const;

    /// Names of the five fusion layers' parameters.
    std::vector<std::string> fusion_param_names() const;

private:
    struct ModalityBranch {
        nn::PatchEmbed embed;
        std::vector<nn::Block> blocks;
    };

    class DecoderBlock {
    public:
        DecoderBlock(nn::ParamStore& store, const std::string& name, const nn::BlockConfig& cfg);
        void operator()(Var& tokens, Var& state) const;

    private:
        nn::LayerNorm ln_self_, ln_tok_q_, ln_tok_kv_, ln_state_q_, ln_state_kv_, ln_tok_mlp_, ln_state_mlp_;
        nn::MultiHeadAttention self_attn_, tok_from_state_, state_from_tok_;
        nn::Mlp tok_mlp_, state_mlp_;
    };

    std::vector<Var> encode_branch(const ModalityBranch& branch, const Var& embedded) const;

    ModelConfig cfg_;
    nn::ParamStore store_;
    ImageEncoder image_encoder_;
    ModalityBranch branch_k_, branch_p_, branch_d_;
    Array pos_;
    std::vector<nn::Conv1x1> fusion_;
    Var pose_token_;
    Var state_init_;
    std::vector<DecoderBlock> decoder_;
    nn::LayerNorm decoder_norm_;
    nn::Linear point_head_, conf_head_, pose_head_;
};

}  // namespace gcut3r
