#include "docmoe/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace docmoe {

void ImageTensor::validate() const {
    require(data.rank() == 3, "image must be [C, H, W]");
    require(channels() == 1 || channels() == 3, "image must have 1 or 3 channels");
    require(height() >= 1 && width() >= 1, "image must be at least 1x1");
    const float lo = range == RangeTag::Unit ? 0.0f : -1.0f;
    for (float v : data.vec()) require(v >= lo && v <= 1.0f, "image value outside its declared range");
}

ImageTensor to_signed(const ImageTensor& img) {
    if (img.range == RangeTag::Signed) return img;
    ImageTensor out(img.data, RangeTag::Signed);
    for (auto& v : out.data.vec()) v = v * 2.0f - 1.0f;
    return out;
}

ImageTensor to_unit(const ImageTensor& img) {
    if (img.range == RangeTag::Unit) return img;
    ImageTensor out(img.data, RangeTag::Unit);
    for (auto& v : out.data.vec()) v = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
    return out;
}

ImageTensor clamped(const ImageTensor& img) {
    ImageTensor out = img;
    const float lo = img.range == RangeTag::Unit ? 0.0f : -1.0f;
    for (auto& v : out.data.vec()) v = std::clamp(v, lo, 1.0f);
    return out;
}

ImageTensor to_grayscale(const ImageTensor& img) {
    if (img.channels() == 1) return img;
    ImageTensor out = ImageTensor::filled(1, img.height(), img.width(), 0.0f, img.range);
    for (std::size_t y = 0; y < img.height(); ++y)
        for (std::size_t x = 0; x < img.width(); ++x)
            out.at(0, y, x) = 0.299f * img.at(0, y, x) + 0.587f * img.at(1, y, x) + 0.114f * img.at(2, y, x);
    return out;
}

ImageTensor quantize_8bit(const ImageTensor& img) {
    ImageTensor out = to_unit(img);
    for (auto& v : out.data.vec()) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
    return out;
}

ImageTensor read_png(const std::filesystem::path& path, int channels) {
    require(channels == 1 || channels == 3, "read_png: channels must be 1 or 3");
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
    }
    const std::size_t H = image.height, W = image.width, C = channels;
    ImageTensor out = ImageTensor::filled(C, H, W, 0.0f);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = buf[(y * W + x) * C + c] / 255.0f;
    return out;
}

void write_png(const std::filesystem::path& path, const ImageTensor& img) {
    const ImageTensor u = to_unit(img);
    const std::size_t C = u.channels(), H = u.height(), W = u.width();
    require(C == 1 || C == 3, "write_png: channels must be 1 or 3");
    std::vector<png_byte> buf(C * H * W);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x)
            for (std::size_t c = 0; c < C; ++c)
                buf[(y * W + x) * C + c] =
                    static_cast<png_byte>(std::lround(std::clamp(u.at(c, y, x), 0.0f, 1.0f) * 255.0f));
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(W);
    image.height = static_cast<png_uint_32>(H);
    image.format = C == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

}  // namespace docmoe
