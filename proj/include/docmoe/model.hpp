#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "docmoe/nn.hpp"

namespace docmoe {

enum class NoiseClass : int { SaltPepper = 0, Blurred = 1, Faded = 2, Watermarked = 3 };
inline constexpr int kNumNoiseClasses = 4;

std::string to_string(NoiseClass c);
NoiseClass noise_class_from_string(const std::string& s);
NoiseClass noise_class_from_int(int v);

enum class GeneratorId { H, F };
enum class Domain { X, Y };

/// How a generator's gate slots are filled during a forward pass.
enum class GateMode {
    Learned,  // gates from the gate heads applied to E(x)
    Ones,     // every gate forced to 1
    Off       // no gating at all (plain ResNet generator)
};

struct ArchConfig {
    int channels = 1;
    int patch_size = 256;
    int base_channels = 64;
    int n_blocks = 9;
    int embed_dim = 128;
    int embedder_channels = 32;
    int disc_channels = 64;
    int disc_layers = 3;

    /// Generators downsample twice by stride 2.
    static constexpr int kDownsampling = 4;

    int block_channels() const { return base_channels * 4; }
    void validate() const;

    /// 8x8 patches, 2 blocks, 4 channels, d = 8: small enough for
    /// finite-difference checks over every parameter tensor.
    static ArchConfig micro();
    /// 64x64 patches, 3 blocks, 16 base channels, d = 32.
    static ArchConfig toy();
};

bool operator==(const ArchConfig& a, const ArchConfig& b);

/// Non-negative per-channel gates for one generator, one vector per
/// residual block. `gates[b]` has the block's channel count.
template <typename T>
struct GateSet {
    GeneratorId generator = GeneratorId::H;
    std::vector<std::vector<T>> gates;
};

template <typename T>
using GateVars = std::vector<ag::Var<T>>;  // each [N, block_channels]

/// Scales input channel i by gates[i] and convolves; the bias is added after
/// the gated sum and is not itself gated. features: [C_in, H, W].
template <typename T>
Tensor<T> gated_conv_forward(const Tensor<T>& features, const Tensor<T>& kernels, const Tensor<T>* bias,
                             const std::vector<T>& gates, int stride = 1, int pad = 0);

/// ResNet generator: c7s1 -> two stride-2 downsamples -> residual blocks ->
/// two transposed upsamples -> c7s1 -> tanh. Instance norm throughout.
template <typename T>
class ResnetGenerator {
public:
    ResnetGenerator() = default;
    ResnetGenerator(const ArchConfig& cfg, std::mt19937_64& rng);

    /// `gates == nullptr` runs the ungated network. Otherwise one [N, C] gate
    /// tensor per residual block scales the block's first convolution output
    /// after normalisation, which makes the block's second convolution a gated
    /// convolution over its input channels.
    ag::Var<T> forward(const ag::Var<T>& x, const GateVars<T>* gates) const;

    std::size_t n_blocks() const { return blocks_.size(); }
    std::size_t block_channels() const { return blocks_.front().conv1.out_channels(); }
    nn::ParamList<T> params() const;

private:
    struct Block {
        nn::Conv2d<T> conv1, conv2;
    };
    nn::Conv2d<T> head_, down1_, down2_, tail_;
    std::vector<Block> blocks_;
    nn::ConvTranspose2d<T> up1_, up2_;
};

/// PatchGAN discriminator; with three stride-2 layers each output score sees
/// a 70x70 input window.
template <typename T>
class PatchDiscriminator {
public:
    PatchDiscriminator() = default;
    PatchDiscriminator(const ArchConfig& cfg, std::mt19937_64& rng);

    ag::Var<T> forward(const ag::Var<T>& x) const;  // [N, 1, h, w] raw scores
    nn::ParamList<T> params() const;

    /// Side of the input window seen by one score.
    static int receptive_field(int disc_layers);
    static std::size_t output_size(std::size_t input, int disc_layers);

private:
    std::vector<nn::Conv2d<T>> convs_;
};

/// 7-layer 3x3 CNN with batch norm and ReLU, global average pooling, then a
/// projection to the embedding dimension.
template <typename T>
class Embedder {
public:
    Embedder() = default;
    Embedder(const ArchConfig& cfg, std::mt19937_64& rng);

    ag::Var<T> forward(const ag::Var<T>& x, bool training);
    ag::Var<T> forward_eval(const ag::Var<T>& x) const;
    nn::ParamList<T> params() const;
    nn::BufferList<T> buffers();

    static constexpr int kLayers = 7;

private:
    std::vector<nn::Conv2d<T>> convs_;
    std::vector<nn::BatchNorm2d<T>> norms_;
    nn::Linear<T> proj_;
};

/// The full training-time system: both generators, both discriminators, the
/// embedder with its classifier and the two banks of gate heads.
template <typename T>
class ModelBundle {
public:
    ModelBundle() = default;
    ModelBundle(const ArchConfig& cfg, std::uint64_t seed);

    const ArchConfig& config() const { return cfg_; }

    ResnetGenerator<T> generator_H, generator_F;
    PatchDiscriminator<T> disc_X, disc_Y;
    Embedder<T> embedder;
    nn::Linear<T> classifier;
    std::vector<nn::Linear<T>> gate_heads_H, gate_heads_F;

    // Batched building blocks shared by training and inference. All inputs NCHW.
    ag::Var<T> embed(const ag::Var<T>& x, bool training) {
        return training ? embedder.forward(x, true) : embedder.forward_eval(x);
    }
    ag::Var<T> classify(const ag::Var<T>& e) const { return classifier(e); }
    GateVars<T> gates(const ag::Var<T>& e, GeneratorId g) const;
    /// Gate tensors per GateMode; `e` is unused unless mode is Learned.
    std::optional<GateVars<T>> gates_for(const ag::Var<T>& e, GeneratorId g, GateMode mode, std::size_t batch) const;

    /// Network name -> parameters, in a fixed order: six networks, then the
    /// forward and backward gate heads.
    std::vector<std::pair<std::string, nn::ParamList<T>>> networks() const;
    std::vector<std::pair<std::string, nn::BufferList<T>>> buffers();
    nn::ParamList<T> generator_side_params() const;
    nn::ParamList<T> discriminator_params() const;

    /// Copies every parameter and buffer value from `other` (same config).
    void copy_from(const ModelBundle& other);

private:
    ArchConfig cfg_;
};

std::string gate_head_name(GeneratorId g, std::size_t block);

// ---- single-patch evaluation-mode entry points -----------------------------

template <typename T>
struct Classification {
    std::vector<T> embedding;
    std::array<T, kNumNoiseClasses> class_probs{};
    /// argmax with ties to the lowest index
    NoiseClass predicted() const;
};

/// x: [C, P, P] in the signed range.
template <typename T>
Classification<T> embed_and_classify(const ModelBundle<T>& bundle, const Tensor<T>& x);

template <typename T>
GateSet<T> gate_vectors(const ModelBundle<T>& bundle, const std::vector<T>& embedding, GeneratorId g);

/// H(x) with gates from E(x).
template <typename T>
Tensor<T> generate_forward(const ModelBundle<T>& bundle, const Tensor<T>& x, GateMode mode = GateMode::Learned);

/// F(y) with gates from E(x_for_gates).
template <typename T>
Tensor<T> generate_backward(const ModelBundle<T>& bundle, const Tensor<T>& y, const Tensor<T>& x_for_gates,
                            GateMode mode = GateMode::Learned);

/// Raw PatchGAN score map [h, w].
template <typename T>
Tensor<T> discriminate(const ModelBundle<T>& bundle, const Tensor<T>& img, Domain domain);

/// Checks a single patch [C, P, P] against the architecture.
void check_patch_shape(const ArchConfig& cfg, const Shape& s);

}  // namespace docmoe
