#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "docmoe/image.hpp"
#include "docmoe/model.hpp"

namespace docmoe {

// ---- degradations -------------------------------------------------------------

struct SaltPepperParams {
    double amount = 0.1;      // per-pixel replacement probability
    double salt_ratio = 0.5;  // share of replacements that are white
};
struct BlurParams {
    double sigma = 1.5;
};
struct FadeParams {
    double strength = 0.5;  // remaining contrast: out = 1 - strength * (1 - in)
};
struct WatermarkParams {
    std::string text = "COPY";
    std::array<double, 3> color{0.85, 0.25, 0.25};
    double opacity = 0.35;
    int rows = 4;
    int cols = 2;
    double angle_deg = 30.0;
};

struct NoiseSpec {
    NoiseClass cls = NoiseClass::SaltPepper;
    std::variant<SaltPepperParams, BlurParams, FadeParams, WatermarkParams> params;

    static NoiseSpec salt_pepper(double amount, double salt_ratio = 0.5);
    static NoiseSpec blurred(double sigma);
    static NoiseSpec faded(double strength);
    static NoiseSpec watermarked(WatermarkParams p = {});

    /// Throws ContractViolation for out-of-range parameters or a class/params mismatch.
    void validate() const;
};

/// Applies one degradation to a unit-range image; deterministic in (img, spec, seed).
ImageTensor apply_noise(const ImageTensor& img, const NoiseSpec& spec, std::uint64_t seed);

/// Separable Gaussian blur truncated at 3 sigma with mirrored borders.
ImageTensor gaussian_blur(const ImageTensor& img, double sigma);

// ---- page synthesis -----------------------------------------------------------------

inline constexpr float kPaperLevel = 0.95f;
inline constexpr float kInkLevel = 0.10f;

struct RenderedPage {
    ImageTensor image;
    std::vector<std::string> words;  // in reading order
};

/// Dark glyph strokes on a light background laid out on glyphs::kDefaultLayout.
/// Deterministic in (seed, size). Requires height, width >= 64.
RenderedPage render_clean_page(std::uint64_t seed, int height, int width, int channels = 1);
ImageTensor synth_clean_page(std::uint64_t seed, int height, int width, int channels = 1);

// ---- resizing and patches ----------------------------------------------------------------

/// Bilinear resampling with half-pixel centres.
ImageTensor resize_bilinear(const ImageTensor& img, std::size_t height, std::size_t width);

/// Nearest positive multiple of `patch_size` (at least one patch); halves round up.
std::size_t nearest_patch_multiple(std::size_t dim, int patch_size);
ImageTensor resize_to_patch_multiple(const ImageTensor& img, int patch_size);

struct PatchRecord {
    ImageTensor patch;
    std::optional<NoiseClass> label;  // nullopt marks a clean-domain patch
    std::string source_page;
    int row = 0, col = 0;  // pixel origin on the page
};

/// Number of patches along one axis of length `dim`.
std::size_t patches_per_axis(std::size_t dim, int patch_size, int stride);

/// All patches on the stride lattice, row-major. Requires dimensions that are
/// multiples of patch_size and a stride dividing patch_size.
std::vector<PatchRecord> extract_patches(const ImageTensor& img, int patch_size, int stride,
                                         const std::string& source_page = {},
                                         std::optional<NoiseClass> label = std::nullopt);

// ---- corpus -------------------------------------------------------------------------------

enum class PageDomain { Noisy, Clean };

struct PageEntry {
    std::string id;
    std::string path;  // relative to the manifest directory
    PageDomain domain = PageDomain::Clean;
    std::optional<NoiseClass> noise;
    std::uint64_t seed = 0;
    std::string split = "train";        // "train" or "test"
    std::optional<std::string> reference;  // clean rendering of a test page; evaluation only
};

struct CorpusManifest {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    std::uint64_t global_seed = 0;
    int patch_size = 256;
    int stride = 128;
    int channels = 1;
    std::vector<PageEntry> pages;

    /// Throws ContractViolation if a page id is both noisy and clean, ids
    /// repeat, or a noisy page lacks its class.
    void validate() const;
};

std::string to_json_string(const CorpusManifest& m);
CorpusManifest manifest_from_json_string(const std::string& s);

struct CorpusSpec {
    std::uint64_t seed = 1;
    int page_height = 512;
    int page_width = 512;
    int channels = 1;
    int patch_size = 256;
    int stride = 128;
    int clean_pages = 8;
    /// Training pages per degradation; the key order fixes page order.
    std::map<NoiseClass, int> noisy_pages{{NoiseClass::SaltPepper, 2}, {NoiseClass::Blurred, 2},
                                          {NoiseClass::Faded, 2}, {NoiseClass::Watermarked, 2}};
    /// Held-out pages per degradation, each with a clean reference.
    int test_pages_per_class = 1;
    std::map<NoiseClass, NoiseSpec> noise{{NoiseClass::SaltPepper, NoiseSpec::salt_pepper(0.1)},
                                          {NoiseClass::Blurred, NoiseSpec::blurred(1.5)},
                                          {NoiseClass::Faded, NoiseSpec::faded(0.5)},
                                          {NoiseClass::Watermarked, NoiseSpec::watermarked()}};
};

/// In-memory corpus: manifest plus the decoded pages, keyed by page id.
struct Corpus {
    CorpusManifest manifest;
    std::map<std::string, ImageTensor> images;
    std::map<std::string, ImageTensor> references;
};

/// Seed of page `index` in stream `stream`, mixed from the global seed.
std::uint64_t derive_seed(std::uint64_t global, std::uint64_t stream, std::uint64_t index);

/// Pages are quantised to 8 bits so the in-memory corpus equals what
/// write_corpus/load_corpus round-trips. `workers` only affects speed.
Corpus build_corpus(const CorpusSpec& spec, unsigned workers = 1);
void write_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& manifest_path);

// ---- batches -------------------------------------------------------------------------------

/// Training patches of a corpus split into the two unpaired domains.
struct PatchPool {
    std::vector<PatchRecord> noisy;
    std::vector<PatchRecord> clean;
    int patch_size = 0;
    int channels = 1;

    static PatchPool from_corpus(const Corpus& corpus, const std::string& split = "train");
};

struct Batch {
    Tensor<float> x;          // [B, C, P, P], signed range
    std::vector<int> labels;  // noise classes of x
    Tensor<float> y;          // [B, C, P, P], signed range, drawn independently of x
};

/// Draws x (with its label) and y independently and uniformly from the two domains.
Batch sample_batch(const PatchPool& pool, std::size_t batch_size, std::mt19937_64& rng);

}  // namespace docmoe
