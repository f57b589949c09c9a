#include "docmoe/inference.hpp"

#include <algorithm>
#include <map>
#include <thread>

#include "docmoe/synth.hpp"

namespace docmoe {

using nlohmann::json;

MinimalModel::MinimalModel(const ArchConfig& cfg) : arch(cfg) {
    arch.validate();
    std::mt19937_64 rng(0);
    generator_H = ResnetGenerator<float>(arch, rng);
    embedder = Embedder<float>(arch, rng);
    for (int i = 0; i < arch.n_blocks; ++i) gate_heads_H.emplace_back(arch.embed_dim, arch.block_channels(), rng);
}

std::vector<ContainerEntry> MinimalModel::entries() {
    std::vector<ContainerEntry> out;
    for (auto& [name, v] : generator_H.params()) out.push_back({"generator_H", name, &v.mutable_value(), "param"});
    for (auto& [name, v] : embedder.params()) out.push_back({"embedder", name, &v.mutable_value(), "param"});
    for (std::size_t i = 0; i < gate_heads_H.size(); ++i) {
        nn::ParamList<float> p;
        gate_heads_H[i].collect("fc", p);
        for (auto& [name, v] : p) out.push_back({gate_head_name(GeneratorId::H, i), name, &v.mutable_value(), "param"});
    }
    for (auto& [name, t] : embedder.buffers()) out.push_back({"embedder", name, t, "buffer"});
    return out;
}

GateVars<float> MinimalModel::gates(const ag::Var<float>& e) const {
    GateVars<float> out;
    out.reserve(gate_heads_H.size());
    for (const auto& head : gate_heads_H) out.push_back(ops::relu(head(e)));
    return out;
}

MinimalModel export_minimal(const ModelBundle<float>& bundle) {
    MinimalModel m(bundle.config());
    auto& src = const_cast<ModelBundle<float>&>(bundle);
    std::map<std::pair<std::string, std::string>, Tensor<float>*> from;
    for (auto& e : container_entries(src)) from[{e.network, e.layer}] = e.tensor;
    for (auto& e : m.entries()) *e.tensor = *from.at({e.network, e.layer});
    return m;
}

void save_minimal(const std::filesystem::path& dir, MinimalModel& m) {
    json extra;
    extra["arch"] = to_json(m.arch);
    json nets = json::array({"generator_H", "embedder"});
    for (std::size_t i = 0; i < m.gate_heads_H.size(); ++i) nets.push_back(gate_head_name(GeneratorId::H, i));
    extra["networks"] = nets;
    write_container(dir, "minimal", m.entries(), extra);
}

MinimalModel load_minimal(const std::filesystem::path& dir) {
    const json head = read_manifest(dir, "minimal");
    ArchConfig arch;
    try {
        arch = arch_from_json(head.at("arch"));
        arch.validate();
    } catch (const std::exception& e) {
        throw CorruptionError(std::string("bad architecture in manifest: ") + e.what());
    }
    MinimalModel m(arch);
    read_container(dir, "minimal", m.entries());
    return m;
}

namespace {

ag::Var<float> patch_batch(const MinimalModel& m, const Tensor<float>& x) {
    check_patch_shape(m.arch, x.shape());
    return ag::Var<float>(x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)}));
}

GateSet<float> to_gate_set(const GateVars<float>& g) {
    GateSet<float> s;
    s.generator = GeneratorId::H;
    for (const auto& v : g) s.gates.push_back(v.value().vec());
    return s;
}

}  // namespace

Tensor<float> minimal_forward(const MinimalModel& m, const Tensor<float>& x, const GateObserver& observer) {
    ag::NoGradGuard no_grad;
    auto xb = patch_batch(m, x);
    const auto g = m.gates(m.embedder.forward_eval(xb));
    if (observer) observer(to_gate_set(g));
    const auto y = m.generator_H.forward(xb, &g).value();
    return y.reshaped({y.dim(1), y.dim(2), y.dim(3)});
}

GateSet<float> minimal_gates(const MinimalModel& m, const Tensor<float>& x) {
    ag::NoGradGuard no_grad;
    return to_gate_set(m.gates(m.embedder.forward_eval(patch_batch(m, x))));
}

ImageTensor clean_patch(const MinimalModel& m, const ImageTensor& x, const GateObserver& observer) {
    const ImageTensor in = to_signed(x);
    return to_unit(ImageTensor(minimal_forward(m, in.data, observer), RangeTag::Signed));
}

// ---- stitching ------------------------------------------------------------------------

StitchPlan StitchPlan::from_origins(std::size_t channels, std::size_t height, std::size_t width, int patch_size,
                                    std::vector<std::pair<int, int>> origins) {
    require(patch_size >= 1, "patch_size must be >= 1");
    StitchPlan p;
    p.channels = channels;
    p.height = height;
    p.width = width;
    p.patch_size = patch_size;
    p.origins = std::move(origins);
    p.counts.assign(height * width, 0);
    const std::size_t P = patch_size;
    for (const auto& [r, c] : p.origins) {
        require(r >= 0 && c >= 0 && r + P <= height && c + P <= width, "patch origin outside the page");
        for (std::size_t y = r; y < r + P; ++y)
            for (std::size_t x = c; x < c + P; ++x) ++p.counts[y * width + x];
    }
    return p;
}

StitchPlan StitchPlan::lattice(std::size_t channels, std::size_t height, std::size_t width, int patch_size, int stride) {
    require(stride >= 1 && patch_size % stride == 0, "stride must divide patch_size");
    require(height % patch_size == 0 && width % patch_size == 0, "page dimensions must be multiples of the patch size");
    std::vector<std::pair<int, int>> origins;
    for (std::size_t iy = 0; iy < patches_per_axis(height, patch_size, stride); ++iy)
        for (std::size_t ix = 0; ix < patches_per_axis(width, patch_size, stride); ++ix)
            origins.emplace_back(static_cast<int>(iy * stride), static_cast<int>(ix * stride));
    return from_origins(channels, height, width, patch_size, std::move(origins));
}

void StitchPlan::validate() const {
    require(counts.size() == height * width, "stitch plan counts do not match the page size");
    for (std::size_t i = 0; i < counts.size(); ++i)
        if (counts[i] == 0)
            throw ContractViolation("stitch plan leaves pixel (" + std::to_string(i / width) + ", " +
                                    std::to_string(i % width) + ") uncovered");
}

ImageTensor stitch_patches(const std::vector<ImageTensor>& patches, const StitchPlan& plan) {
    plan.validate();
    require(patches.size() == plan.origins.size(), "one patch per plan origin");
    const std::size_t C = plan.channels, H = plan.height, W = plan.width, P = plan.patch_size;
    std::vector<double> acc(C * H * W, 0.0);
    const RangeTag range = patches.empty() ? RangeTag::Unit : patches.front().range;
    for (std::size_t k = 0; k < patches.size(); ++k) {
        const auto& p = patches[k];
        require(p.channels() == C && p.height() == P && p.width() == P, "patch does not match the plan");
        const auto [r, c] = plan.origins[k];
        for (std::size_t ch = 0; ch < C; ++ch)
            for (std::size_t y = 0; y < P; ++y)
                for (std::size_t x = 0; x < P; ++x) acc[(ch * H + r + y) * W + c + x] += p.at(ch, y, x);
    }
    ImageTensor out = ImageTensor::filled(C, H, W, 0.0f, range);
    for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t i = 0; i < H * W; ++i)
            out.data[ch * H * W + i] = static_cast<float>(acc[ch * H * W + i] / plan.counts[i]);
    return out;
}

// ---- pages ----------------------------------------------------------------------------

ImageTensor clean_page_with(const PatchFn& fn, const ImageTensor& page, int patch_size, unsigned workers) {
    const ImageTensor unit = to_unit(page);
    const ImageTensor resized = resize_to_patch_multiple(unit, patch_size);
    const int stride = std::max(1, patch_size / 2);
    const auto records = extract_patches(resized, patch_size, stride);
    std::vector<ImageTensor> cleaned(records.size());
    workers = std::max(1u, std::min<unsigned>(workers, records.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < records.size(); ++i) cleaned[i] = fn(records[i].patch);
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < records.size(); i += workers) cleaned[i] = fn(records[i].patch);
            });
        for (auto& t : pool) t.join();
    }
    std::vector<std::pair<int, int>> origins;
    for (const auto& r : records) origins.emplace_back(r.row, r.col);
    const auto plan = StitchPlan::from_origins(resized.channels(), resized.height(), resized.width(), patch_size,
                                               std::move(origins));
    const ImageTensor stitched = stitch_patches(cleaned, plan);
    return clamped(resize_bilinear(stitched, unit.height(), unit.width()));
}

ImageTensor clean_page(const MinimalModel& m, const ImageTensor& page, unsigned workers) {
    require(page.channels() == static_cast<std::size_t>(m.arch.channels), "page channels differ from the model");
    return clean_page_with([&m](const ImageTensor& p) { return clean_patch(m, p); }, page, m.arch.patch_size, workers);
}

}  // namespace docmoe
