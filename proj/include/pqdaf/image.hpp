#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pqdaf {

// Pixel value convention. Model-facing buffers live in [-1, 1], file-facing
// buffers in [0, 255]. Every buffer is tagged with the convention it uses.
enum class PixelRange {
    Unit, // [-1, 1]
    Byte, // [0, 255]
};

// Planar float image: values[(c * height + y) * width + x].
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 0; // 1 or 3
    PixelRange range = PixelRange::Unit;
    std::vector<float> values;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, int c, PixelRange r, float fill = 0.0f);

    float& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t value_count() const { return pixel_count() * channels; }

    bool same_shape(const ImageBuffer& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }

    // throws validation_error if dimensions or value range are inconsistent
    void validate() const;
};

// byte b -> unit b/127.5 - 1; unit u -> byte round((u+1) * 127.5).
// A Byte -> Unit -> Byte round trip is exact.
ImageBuffer to_unit(const ImageBuffer& img);
ImageBuffer to_byte(const ImageBuffer& img);

// Width-wise concatenation [a | b]; heights and channel counts must match.
ImageBuffer hconcat(const ImageBuffer& a, const ImageBuffer& b);

// 2x2 box-average downscale (dimensions must be even) and nearest-neighbor
// 2x upscale.
ImageBuffer downscale2x(const ImageBuffer& img);
ImageBuffer upscale2x(const ImageBuffer& img);

// Per-pixel maximum over channels, rescaled to [0, 1] from either convention.
std::vector<float> luminance01(const ImageBuffer& img);

// Binary PPM (P6, 3 channels) / PGM (P5, 1 channel) in the Byte convention.
// Unit-convention buffers are converted on write; reads return Byte buffers.
void write_image(const ImageBuffer& img, const std::string& path);
ImageBuffer read_image(const std::string& path);

// Encoded file bytes without touching disk (used by the remote scorer).
std::string encode_image_bytes(const ImageBuffer& img);

} // namespace pqdaf
