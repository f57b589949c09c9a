#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "docmoe/image.hpp"
#include "docmoe/inference.hpp"

namespace docmoe {

/// A metric whose value is undefined for the given inputs (empty reference,
/// zero variance).
class UndefinedMetric : public std::domain_error {
    using std::domain_error::domain_error;
};

class OcrError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// 10 log10(1 / MSE) on unit-range images; +infinity when they are identical.
double psnr(const ImageTensor& a, const ImageTensor& b);

using WordList = std::vector<std::string>;

/// 100 * (1 - |reference ∩ candidate| / |reference|) with multiset intersection.
double word_mismatch_percent(const WordList& reference, const WordList& candidate);

/// Sample Pearson coefficient.
double pearson_correlation(const std::vector<double>& u, const std::vector<double>& v);

// ---- OCR adapters ---------------------------------------------------------------------

class OcrAdapter {
public:
    virtual ~OcrAdapter() = default;
    virtual WordList read(const ImageTensor& page) const = 0;
    virtual std::string name() const = 0;
};

/// Reads pages laid out on glyphs::kDefaultLayout: each glyph bit is the
/// thresholded mean of its pixel block, each cell is matched to the nearest
/// glyph (ties and distances above 2 read as '?'), words are runs of
/// non-blank cells.
class MockOcr : public OcrAdapter {
public:
    WordList read(const ImageTensor& page) const override;
    std::string name() const override { return "mock"; }
};

/// Runs `command` through /bin/sh with `{image}` replaced by a temporary PNG
/// path (appended when absent). One word per stdout line; nonzero exit or a
/// timeout throws OcrError.
class CommandOcr : public OcrAdapter {
public:
    CommandOcr(std::string command, std::chrono::milliseconds timeout, std::filesystem::path scratch_dir = {});
    WordList read(const ImageTensor& page) const override;
    std::string name() const override { return "command"; }

private:
    std::string command_;
    std::chrono::milliseconds timeout_;
    std::filesystem::path scratch_;
};

/// Splits text on whitespace.
WordList tokenize(const std::string& text);

// ---- reports ------------------------------------------------------------------------------

enum class ReferenceMode {
    OriginalVsNoisy,    // reference: OCR of the clean original; candidate: the noisy page
    OriginalVsCleaned,  // reference: OCR of the clean original; candidate: the cleaned page
    CleanedVsOriginal   // reference: OCR of the cleaned page; candidate: the noisy page
};

std::string to_string(ReferenceMode m);

struct EvalPage {
    std::string id;
    ImageTensor noisy;
    ImageTensor cleaned;
    std::optional<ImageTensor> reference;  // clean original
};

struct PageScore {
    std::string id;
    double improvement = 0;     // word mismatch percent of the mode's pair
    std::optional<double> psnr;  // candidate vs clean original
};

struct EvalReport {
    ReferenceMode mode = ReferenceMode::CleanedVsOriginal;
    std::vector<PageScore> pages;
    double averaged_improvement = 0;
    double max_improvement = 0;
    double pct_pages_gt5 = 0;
    double pct_pages_gt10 = 0;
    std::optional<double> mean_psnr;
    int psnr_infinite = 0;  // identical-page sentinels left out of mean_psnr
    int excluded = 0;
    std::vector<std::string> errors;  // "<id>: <reason>" per excluded page
};

/// Aggregates per-page mismatch percentages (permutation invariant).
EvalReport summarize(ReferenceMode mode, std::vector<PageScore> pages);

/// OCRs both sides of every page and scores them under `mode`. Pages whose
/// OCR fails or whose reference has no words are excluded and counted.
EvalReport relative_ocr_report(const std::vector<EvalPage>& pages, const OcrAdapter& ocr, ReferenceMode mode);

/// Keys mirror the table rows ("Averaged Improvement (%)", ...).
nlohmann::json to_json(const EvalReport& r);

// ---- gate analysis ----------------------------------------------------------------------------

struct GateAnalysis {
    std::vector<NoiseClass> sample_classes;               // row/column order of every matrix
    std::vector<std::vector<std::vector<double>>> matrices;  // [block][i][j], NaN for degenerate pairs
    std::vector<double> within_class_mean, cross_class_mean;  // per block, over i < j
    std::vector<int> degenerate_pairs;                        // per block
    double zero_fraction = 0;                                 // exact zeros over all gate entries
};

GateAnalysis gate_analysis(const MinimalModel& m, const std::map<NoiseClass, std::vector<ImageTensor>>& patches_by_class);

nlohmann::json to_json(const GateAnalysis& g);
/// Long format: block,i,j,class_i,class_j,r
std::string gate_matrices_csv(const GateAnalysis& g);

}  // namespace docmoe
