#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "docmoe/tensor.hpp"

namespace docmoe {

enum class RangeTag {
    Unit,   // [0, 1], used at file boundaries
    Signed  // [-1, 1], used inside the networks
};

/// A page or patch: float data [C, H, W] plus its value range.
struct ImageTensor {
    Tensor<float> data;
    RangeTag range = RangeTag::Unit;

    ImageTensor() = default;
    ImageTensor(Tensor<float> d, RangeTag r) : data(std::move(d)), range(r) {}
    static ImageTensor filled(std::size_t c, std::size_t h, std::size_t w, float v, RangeTag r = RangeTag::Unit) {
        return ImageTensor(Tensor<float>({c, h, w}, v), r);
    }

    std::size_t channels() const { return data.dim(0); }
    std::size_t height() const { return data.dim(1); }
    std::size_t width() const { return data.dim(2); }
    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height() + y) * width() + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height() + y) * width() + x]; }

    /// Throws ContractViolation unless C in {1, 3}, H, W >= 1 and every value
    /// lies inside the declared range.
    void validate() const;

    friend bool operator==(const ImageTensor& a, const ImageTensor& b) {
        return a.range == b.range && a.data == b.data;
    }
};

ImageTensor to_signed(const ImageTensor& img);
ImageTensor to_unit(const ImageTensor& img);
/// Clamps into the declared range.
ImageTensor clamped(const ImageTensor& img);
ImageTensor to_grayscale(const ImageTensor& img);
/// Rounds a unit-range image to the 256 levels an 8-bit file can hold.
ImageTensor quantize_8bit(const ImageTensor& img);

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads an 8-bit PNG as a unit-range image with `channels` (1 or 3) channels.
ImageTensor read_png(const std::filesystem::path& path, int channels = 1);
/// Writes a unit-range image (values clamped, rounded to 8 bits).
void write_png(const std::filesystem::path& path, const ImageTensor& img);

}  // namespace docmoe
