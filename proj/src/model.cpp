#include "docmoe/model.hpp"

#include <algorithm>
#include <cstdint>

namespace docmoe {

namespace {

constexpr double kGateBiasInit = 0.5;
constexpr double kLeakySlope = 0.2;

}  // namespace

std::string to_string(NoiseClass c) {
    switch (c) {
        case NoiseClass::SaltPepper: return "salt_pepper";
        case NoiseClass::Blurred: return "blurred";
        case NoiseClass::Faded: return "faded";
        case NoiseClass::Watermarked: return "watermarked";
    }
    return "unknown";
}

NoiseClass noise_class_from_string(const std::string& s) {
    for (int i = 0; i < kNumNoiseClasses; ++i)
        if (to_string(static_cast<NoiseClass>(i)) == s) return static_cast<NoiseClass>(i);
    throw ContractViolation("unknown noise class '" + s + "'");
}

NoiseClass noise_class_from_int(int v) {
    require(v >= 0 && v < kNumNoiseClasses, "noise class label must be in 0..3, got " + std::to_string(v));
    return static_cast<NoiseClass>(v);
}

void ArchConfig::validate() const {
    require(channels == 1 || channels == 3, "channels must be 1 or 3");
    require(n_blocks >= 1, "n_blocks must be >= 1");
    require(base_channels >= 1, "base_channels must be >= 1");
    require(embed_dim >= 1, "embed_dim must be >= 1");
    require(embedder_channels >= 1, "embedder_channels must be >= 1");
    require(disc_channels >= 1 && disc_layers >= 1, "discriminator width and depth must be >= 1");
    require(patch_size >= 8 && patch_size % kDownsampling == 0,
            "patch_size must be >= 8 and divisible by " + std::to_string(kDownsampling));
    PatchDiscriminator<float>::output_size(static_cast<std::size_t>(patch_size), disc_layers);
}

ArchConfig ArchConfig::micro() {
    ArchConfig c;
    c.patch_size = 8;
    c.base_channels = 4;
    c.n_blocks = 2;
    c.embed_dim = 8;
    c.embedder_channels = 2;
    c.disc_channels = 4;
    c.disc_layers = 1;
    return c;
}

ArchConfig ArchConfig::toy() {
    ArchConfig c;
    c.patch_size = 64;
    c.base_channels = 16;
    c.n_blocks = 3;
    c.embed_dim = 32;
    c.embedder_channels = 8;
    c.disc_channels = 16;
    c.disc_layers = 3;
    return c;
}

bool operator==(const ArchConfig& a, const ArchConfig& b) {
    return a.channels == b.channels && a.patch_size == b.patch_size && a.base_channels == b.base_channels &&
           a.n_blocks == b.n_blocks && a.embed_dim == b.embed_dim && a.embedder_channels == b.embedder_channels &&
           a.disc_channels == b.disc_channels && a.disc_layers == b.disc_layers;
}

void check_patch_shape(const ArchConfig& cfg, const Shape& s) {
    require(s.size() == 3 && s[0] == static_cast<std::size_t>(cfg.channels) &&
                s[1] == static_cast<std::size_t>(cfg.patch_size) && s[2] == static_cast<std::size_t>(cfg.patch_size),
            "patch shape " + shape_str(s) + " does not match architecture [" + std::to_string(cfg.channels) + "," +
                std::to_string(cfg.patch_size) + "," + std::to_string(cfg.patch_size) + "]");
}

template <typename T>
Tensor<T> gated_conv_forward(const Tensor<T>& features, const Tensor<T>& kernels, const Tensor<T>* bias,
                             const std::vector<T>& gates, int stride, int pad) {
    require(features.rank() == 3, "gated_conv_forward expects [C, H, W] features");
    require(gates.size() == features.dim(0), "gate count " + std::to_string(gates.size()) +
                                                 " does not match input channels " + std::to_string(features.dim(0)));
    for (T g : gates) require(g >= T(0), "gates must be non-negative");
    ag::NoGradGuard no_grad;
    const Shape s = features.shape();
    ag::Var<T> x(features.reshaped({1, s[0], s[1], s[2]}));
    ag::Var<T> g(Tensor<T>({1, gates.size()}, gates));
    ag::Var<T> w(kernels);
    ag::Var<T> b = bias ? ag::Var<T>(*bias) : ag::Var<T>();
    auto out = ops::conv2d(ops::channel_scale(x, g), w, b, stride, pad).value();
    return out.reshaped({out.dim(1), out.dim(2), out.dim(3)});
}

// ---- generator --------------------------------------------------------------

template <typename T>
ResnetGenerator<T>::ResnetGenerator(const ArchConfig& cfg, std::mt19937_64& rng) {
    const std::size_t C = cfg.channels, ngf = cfg.base_channels, nb = cfg.block_channels();
    head_ = nn::Conv2d<T>(C, ngf, 7, 1, 0, rng);
    down1_ = nn::Conv2d<T>(ngf, 2 * ngf, 3, 2, 1, rng);
    down2_ = nn::Conv2d<T>(2 * ngf, nb, 3, 2, 1, rng);
    for (int i = 0; i < cfg.n_blocks; ++i) {
        Block b;
        b.conv1 = nn::Conv2d<T>(nb, nb, 3, 1, 0, rng);
        b.conv2 = nn::Conv2d<T>(nb, nb, 3, 1, 0, rng);
        blocks_.push_back(std::move(b));
    }
    up1_ = nn::ConvTranspose2d<T>(nb, 2 * ngf, 3, 2, 1, 1, rng);
    up2_ = nn::ConvTranspose2d<T>(2 * ngf, ngf, 3, 2, 1, 1, rng);
    tail_ = nn::Conv2d<T>(ngf, C, 7, 1, 0, rng);
}

template <typename T>
ag::Var<T> ResnetGenerator<T>::forward(const ag::Var<T>& x, const GateVars<T>* gates) const {
    using namespace ops;
    if (gates) require(gates->size() == blocks_.size(), "one gate tensor per residual block is required");
    auto h = relu(instance_norm(head_(reflect_pad(x, 3))));
    h = relu(instance_norm(down1_(h)));
    h = relu(instance_norm(down2_(h)));
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        const auto& blk = blocks_[i];
        auto r = instance_norm(blk.conv1(reflect_pad(h, 1)));
        if (gates) r = channel_scale(r, (*gates)[i]);
        r = relu(r);
        r = instance_norm(blk.conv2(reflect_pad(r, 1)));
        h = add(h, r);
    }
    h = relu(instance_norm(up1_(h)));
    h = relu(instance_norm(up2_(h)));
    return ops::tanh(tail_(reflect_pad(h, 3)));
}

template <typename T>
nn::ParamList<T> ResnetGenerator<T>::params() const {
    nn::ParamList<T> out;
    head_.collect("head", out);
    down1_.collect("down1", out);
    down2_.collect("down2", out);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        blocks_[i].conv1.collect("block" + std::to_string(i) + ".conv1", out);
        blocks_[i].conv2.collect("block" + std::to_string(i) + ".conv2", out);
    }
    up1_.collect("up1", out);
    up2_.collect("up2", out);
    tail_.collect("tail", out);
    return out;
}

// ---- discriminator ------------------------------------------------------------

template <typename T>
PatchDiscriminator<T>::PatchDiscriminator(const ArchConfig& cfg, std::mt19937_64& rng) {
    const std::size_t ndf = cfg.disc_channels;
    auto width = [ndf](int i) { return ndf * static_cast<std::size_t>(std::min(1 << i, 8)); };
    convs_.emplace_back(cfg.channels, ndf, 4, 2, 1, rng);
    for (int i = 1; i < cfg.disc_layers; ++i) convs_.emplace_back(width(i - 1), width(i), 4, 2, 1, rng);
    convs_.emplace_back(width(cfg.disc_layers - 1), width(cfg.disc_layers), 4, 1, 1, rng);
    convs_.emplace_back(width(cfg.disc_layers), 1, 4, 1, 1, rng);
}

template <typename T>
ag::Var<T> PatchDiscriminator<T>::forward(const ag::Var<T>& x) const {
    using namespace ops;
    auto h = leaky_relu(convs_.front()(x), T(kLeakySlope));
    for (std::size_t i = 1; i + 1 < convs_.size(); ++i) h = leaky_relu(instance_norm(convs_[i](h)), T(kLeakySlope));
    return convs_.back()(h);
}

template <typename T>
nn::ParamList<T> PatchDiscriminator<T>::params() const {
    nn::ParamList<T> out;
    for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i].collect("conv" + std::to_string(i), out);
    return out;
}

template <typename T>
int PatchDiscriminator<T>::receptive_field(int disc_layers) {
    int r = 1;
    r = (r - 1) * 1 + 4;  // score layer
    r = (r - 1) * 1 + 4;  // stride-1 feature layer
    for (int i = 0; i < disc_layers; ++i) r = (r - 1) * 2 + 4;
    return r;
}

template <typename T>
std::size_t PatchDiscriminator<T>::output_size(std::size_t input, int disc_layers) {
    long s = static_cast<long>(input);
    for (int i = 0; i < disc_layers; ++i) s = (s + 2 - 4) / 2 + 1;
    s = s + 2 - 4 + 1;
    s = s + 2 - 4 + 1;
    require(s >= 1, "input of size " + std::to_string(input) + " is too small for a " + std::to_string(disc_layers) +
                        "-layer patch discriminator");
    return static_cast<std::size_t>(s);
}

// ---- embedder -------------------------------------------------------------------

template <typename T>
Embedder<T>::Embedder(const ArchConfig& cfg, std::mt19937_64& rng) {
    const std::size_t w = cfg.embedder_channels;
    const std::array<std::size_t, kLayers> widths{w, w, 2 * w, 2 * w, 4 * w, 4 * w, 4 * w};
    std::size_t in = cfg.channels;
    for (int i = 0; i < kLayers; ++i) {
        const int stride = (i % 2 == 0) ? 2 : 1;
        convs_.emplace_back(in, widths[i], 3, stride, 1, rng);
        norms_.emplace_back(widths[i], rng);
        in = widths[i];
    }
    proj_ = nn::Linear<T>(in, cfg.embed_dim, rng);
}

template <typename T>
ag::Var<T> Embedder<T>::forward(const ag::Var<T>& x, bool training) {
    auto h = x;
    for (int i = 0; i < kLayers; ++i) h = ops::relu(norms_[i](convs_[i](h), training));
    return proj_(ops::global_avg_pool(h));
}

template <typename T>
ag::Var<T> Embedder<T>::forward_eval(const ag::Var<T>& x) const {
    auto h = x;
    for (int i = 0; i < kLayers; ++i) h = ops::relu(norms_[i].eval(convs_[i](h)));
    return proj_(ops::global_avg_pool(h));
}

template <typename T>
nn::ParamList<T> Embedder<T>::params() const {
    nn::ParamList<T> out;
    for (int i = 0; i < kLayers; ++i) {
        convs_[i].collect("conv" + std::to_string(i), out);
        norms_[i].collect("bn" + std::to_string(i), out);
    }
    proj_.collect("proj", out);
    return out;
}

template <typename T>
nn::BufferList<T> Embedder<T>::buffers() {
    nn::BufferList<T> out;
    for (int i = 0; i < kLayers; ++i) norms_[i].collect_buffers("bn" + std::to_string(i), out);
    return out;
}

// ---- bundle -------------------------------------------------------------------------

std::string gate_head_name(GeneratorId g, std::size_t block) {
    return std::string("gate_head_") + (g == GeneratorId::H ? "H_" : "F_") + std::to_string(block);
}

template <typename T>
ModelBundle<T>::ModelBundle(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    generator_H = ResnetGenerator<T>(cfg_, rng);
    generator_F = ResnetGenerator<T>(cfg_, rng);
    disc_X = PatchDiscriminator<T>(cfg_, rng);
    disc_Y = PatchDiscriminator<T>(cfg_, rng);
    embedder = Embedder<T>(cfg_, rng);
    classifier = nn::Linear<T>(cfg_.embed_dim, kNumNoiseClasses, rng);
    for (auto* heads : {&gate_heads_H, &gate_heads_F}) {
        for (int i = 0; i < cfg_.n_blocks; ++i) {
            nn::Linear<T> head(cfg_.embed_dim, cfg_.block_channels(), rng);
            head.bias = nn::constant_param<T>({static_cast<std::size_t>(cfg_.block_channels())}, kGateBiasInit);
            heads->push_back(std::move(head));
        }
    }
}

template <typename T>
GateVars<T> ModelBundle<T>::gates(const ag::Var<T>& e, GeneratorId g) const {
    const auto& heads = g == GeneratorId::H ? gate_heads_H : gate_heads_F;
    GateVars<T> out;
    out.reserve(heads.size());
    for (const auto& head : heads) out.push_back(ops::relu(head(e)));
    return out;
}

template <typename T>
std::optional<GateVars<T>> ModelBundle<T>::gates_for(const ag::Var<T>& e, GeneratorId g, GateMode mode,
                                                     std::size_t batch) const {
    switch (mode) {
        case GateMode::Learned: return gates(e, g);
        case GateMode::Ones: {
            GateVars<T> out;
            for (int i = 0; i < cfg_.n_blocks; ++i)
                out.emplace_back(Tensor<T>({batch, static_cast<std::size_t>(cfg_.block_channels())}, T(1)));
            return out;
        }
        case GateMode::Off: break;
    }
    return std::nullopt;
}

template <typename T>
std::vector<std::pair<std::string, nn::ParamList<T>>> ModelBundle<T>::networks() const {
    std::vector<std::pair<std::string, nn::ParamList<T>>> out;
    out.emplace_back("generator_H", generator_H.params());
    out.emplace_back("generator_F", generator_F.params());
    out.emplace_back("disc_X", disc_X.params());
    out.emplace_back("disc_Y", disc_Y.params());
    out.emplace_back("embedder", embedder.params());
    nn::ParamList<T> cls;
    classifier.collect("fc", cls);
    out.emplace_back("classifier", cls);
    for (auto g : {GeneratorId::H, GeneratorId::F}) {
        const auto& heads = g == GeneratorId::H ? gate_heads_H : gate_heads_F;
        for (std::size_t i = 0; i < heads.size(); ++i) {
            nn::ParamList<T> p;
            heads[i].collect("fc", p);
            out.emplace_back(gate_head_name(g, i), p);
        }
    }
    return out;
}

template <typename T>
std::vector<std::pair<std::string, nn::BufferList<T>>> ModelBundle<T>::buffers() {
    return {{"embedder", embedder.buffers()}};
}

template <typename T>
nn::ParamList<T> ModelBundle<T>::generator_side_params() const {
    nn::ParamList<T> out;
    for (auto& [net, params] : networks()) {
        if (net == "disc_X" || net == "disc_Y") continue;
        for (auto& [name, v] : params) out.emplace_back(net + "/" + name, v);
    }
    return out;
}

template <typename T>
nn::ParamList<T> ModelBundle<T>::discriminator_params() const {
    nn::ParamList<T> out;
    for (auto& [net, params] : networks()) {
        if (net != "disc_X" && net != "disc_Y") continue;
        for (auto& [name, v] : params) out.emplace_back(net + "/" + name, v);
    }
    return out;
}

template <typename T>
void ModelBundle<T>::copy_from(const ModelBundle& other) {
    require(cfg_ == other.cfg_, "copy_from requires identical architectures");
    auto dst = networks();
    auto src = other.networks();
    for (std::size_t i = 0; i < dst.size(); ++i)
        for (std::size_t j = 0; j < dst[i].second.size(); ++j)
            dst[i].second[j].second.mutable_value() = src[i].second[j].second.value();
    auto db = buffers();
    auto sb = const_cast<ModelBundle&>(other).buffers();
    for (std::size_t i = 0; i < db.size(); ++i)
        for (std::size_t j = 0; j < db[i].second.size(); ++j) *db[i].second[j].second = *sb[i].second[j].second;
}

// ---- single-patch API -------------------------------------------------------------

template <typename T>
NoiseClass Classification<T>::predicted() const {
    // max_element returns the first maximum, so ties go to the lowest index.
    return static_cast<NoiseClass>(std::max_element(class_probs.begin(), class_probs.end()) - class_probs.begin());
}

namespace {

template <typename T>
ag::Var<T> as_batch(const Tensor<T>& x) {
    return ag::Var<T>(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}));
}

template <typename T>
Tensor<T> unbatch(const Tensor<T>& x) {
    return x.reshaped({x.dim(1), x.dim(2), x.dim(3)});
}

}  // namespace

template <typename T>
Classification<T> embed_and_classify(const ModelBundle<T>& bundle, const Tensor<T>& x) {
    check_patch_shape(bundle.config(), x.shape());
    ag::NoGradGuard no_grad;
    auto e = bundle.embedder.forward_eval(as_batch(x));
    auto probs = ops::softmax(bundle.classify(e).value());
    Classification<T> out;
    out.embedding = e.value().vec();
    std::copy(probs.vec().begin(), probs.vec().end(), out.class_probs.begin());
    return out;
}

template <typename T>
GateSet<T> gate_vectors(const ModelBundle<T>& bundle, const std::vector<T>& embedding, GeneratorId g) {
    require(embedding.size() == static_cast<std::size_t>(bundle.config().embed_dim),
            "embedding length does not match embed_dim");
    ag::NoGradGuard no_grad;
    ag::Var<T> e(Tensor<T>({1, embedding.size()}, embedding));
    GateSet<T> out;
    out.generator = g;
    for (auto& v : bundle.gates(e, g)) out.gates.push_back(v.value().vec());
    return out;
}

template <typename T>
Tensor<T> generate_forward(const ModelBundle<T>& bundle, const Tensor<T>& x, GateMode mode) {
    check_patch_shape(bundle.config(), x.shape());
    ag::NoGradGuard no_grad;
    auto xb = as_batch(x);
    ag::Var<T> e = mode == GateMode::Learned ? bundle.embedder.forward_eval(xb) : ag::Var<T>();
    auto g = bundle.gates_for(e, GeneratorId::H, mode, 1);
    return unbatch(bundle.generator_H.forward(xb, g ? &*g : nullptr).value());
}

template <typename T>
Tensor<T> generate_backward(const ModelBundle<T>& bundle, const Tensor<T>& y, const Tensor<T>& x_for_gates,
                            GateMode mode) {
    check_patch_shape(bundle.config(), y.shape());
    check_patch_shape(bundle.config(), x_for_gates.shape());
    ag::NoGradGuard no_grad;
    ag::Var<T> e = mode == GateMode::Learned ? bundle.embedder.forward_eval(as_batch(x_for_gates)) : ag::Var<T>();
    auto g = bundle.gates_for(e, GeneratorId::F, mode, 1);
    return unbatch(bundle.generator_F.forward(as_batch(y), g ? &*g : nullptr).value());
}

template <typename T>
Tensor<T> discriminate(const ModelBundle<T>& bundle, const Tensor<T>& img, Domain domain) {
    require(img.rank() == 3 && img.dim(0) == static_cast<std::size_t>(bundle.config().channels),
            "discriminator input must be [C, H, W] with the model's channel count");
    ag::NoGradGuard no_grad;
    const auto& d = domain == Domain::X ? bundle.disc_X : bundle.disc_Y;
    auto out = d.forward(as_batch(img)).value();
    return out.reshaped({out.dim(2), out.dim(3)});
}

#define DOCMOE_INSTANTIATE_MODEL(T)                                                                            \
    template Tensor<T> gated_conv_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,                \
                                          const std::vector<T>&, int, int);                                    \
    template class ResnetGenerator<T>;                                                                         \
    template class PatchDiscriminator<T>;                                                                      \
    template class Embedder<T>;                                                                                \
    template class ModelBundle<T>;                                                                             \
    template struct Classification<T>;                                                                         \
    template Classification<T> embed_and_classify(const ModelBundle<T>&, const Tensor<T>&);                    \
    template GateSet<T> gate_vectors(const ModelBundle<T>&, const std::vector<T>&, GeneratorId);               \
    template Tensor<T> generate_forward(const ModelBundle<T>&, const Tensor<T>&, GateMode);                    \
    template Tensor<T> generate_backward(const ModelBundle<T>&, const Tensor<T>&, const Tensor<T>&, GateMode); \
    template Tensor<T> discriminate(const ModelBundle<T>&, const Tensor<T>&, Domain);

DOCMOE_INSTANTIATE_MODEL(float)
DOCMOE_INSTANTIATE_MODEL(double)

}  // namespace docmoe
