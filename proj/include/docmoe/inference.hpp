#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <utility>
#include <vector>

#include "docmoe/checkpoint.hpp"
#include "docmoe/image.hpp"
#include "docmoe/model.hpp"

namespace docmoe {

/// Inference subset of a bundle: forward generator, embedder and the forward
/// gate heads. Holds its own copies of the parameters.
struct MinimalModel {
    ArchConfig arch;
    ResnetGenerator<float> generator_H;
    Embedder<float> embedder;
    std::vector<nn::Linear<float>> gate_heads_H;

    explicit MinimalModel(const ArchConfig& cfg = ArchConfig::micro());

    std::vector<ContainerEntry> entries();
    GateVars<float> gates(const ag::Var<float>& e) const;
};

MinimalModel export_minimal(const ModelBundle<float>& bundle);
void save_minimal(const std::filesystem::path& dir, MinimalModel& m);
MinimalModel load_minimal(const std::filesystem::path& dir);

using GateObserver = std::function<void(const GateSet<float>&)>;

/// Signed-range forward pass; bitwise equal to generate_forward on the bundle
/// the model was exported from. `observer` sees the gates actually applied.
Tensor<float> minimal_forward(const MinimalModel& m, const Tensor<float>& x, const GateObserver& observer = {});

/// Gate vectors g*_H(E(x)) for one signed-range patch.
GateSet<float> minimal_gates(const MinimalModel& m, const Tensor<float>& x);

/// Cleans one patch of either range; the result is in the unit range.
ImageTensor clean_patch(const MinimalModel& m, const ImageTensor& x, const GateObserver& observer = {});

/// Lattice geometry for reassembling a page from square patches.
struct StitchPlan {
    std::size_t channels = 1, height = 0, width = 0;
    int patch_size = 0;
    std::vector<std::pair<int, int>> origins;  // (row, col)
    std::vector<std::uint32_t> counts;         // patches covering each pixel, row-major

    /// Full lattice with the given stride over a page of multiple-of-patch size.
    static StitchPlan lattice(std::size_t channels, std::size_t height, std::size_t width, int patch_size, int stride);
    /// Arbitrary origins; counts are derived from them.
    static StitchPlan from_origins(std::size_t channels, std::size_t height, std::size_t width, int patch_size,
                                   std::vector<std::pair<int, int>> origins);

    /// Throws ContractViolation naming the first uncovered pixel.
    void validate() const;
};

/// Each pixel becomes the mean of the patch values covering it.
ImageTensor stitch_patches(const std::vector<ImageTensor>& patches, const StitchPlan& plan);

using PatchFn = std::function<ImageTensor(const ImageTensor&)>;

/// resize to a patch multiple -> lattice patches with stride patch/2 ->
/// `fn` per patch -> stitch -> resize back. Unit range in and out.
ImageTensor clean_page_with(const PatchFn& fn, const ImageTensor& page, int patch_size, unsigned workers = 1);
ImageTensor clean_page(const MinimalModel& m, const ImageTensor& page, unsigned workers = 1);

}  // namespace docmoe
