#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>

// Bitmap font and page lattice shared by the synthetic page renderer and the
// mock OCR reader. Pages are a grid of character cells; each glyph bit is a
// `scale` x `scale` block of pixels.
namespace docmoe::glyphs {

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;
inline constexpr int kLetters = 26;

/// Rows of each glyph, most significant of the low 5 bits is the left column.
const std::array<std::array<std::uint8_t, kGlyphHeight>, kLetters>& font();

inline bool bit(int letter, int row, int col) {
    return (font()[letter][row] >> (kGlyphWidth - 1 - col)) & 1u;
}

struct PageLayout {
    int scale = 2;
    int margin = 8;
    int cell_width() const { return (kGlyphWidth + 3) * scale; }
    int line_height() const { return (kGlyphHeight + 1) * scale; }
    int lines(int page_height) const { return std::max(0, (page_height - 2 * margin) / line_height()); }
    int cells(int page_width) const { return std::max(0, (page_width - 2 * margin) / cell_width()); }
    /// Top-left pixel of the glyph box of (line, cell).
    int glyph_top(int line) const { return margin + line * line_height() + scale / 2; }
    int glyph_left(int cell) const { return margin + cell * cell_width(); }
};

inline constexpr PageLayout kDefaultLayout{};

/// Minimum Hamming distance between any two glyph bitmaps.
int min_pairwise_distance();

}  // namespace docmoe::glyphs
