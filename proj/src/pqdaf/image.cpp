#include "pqdaf/image.hpp"

#include "pqdaf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pqdaf {

ImageBuffer::ImageBuffer(int w, int h, int c, PixelRange r, float fill)
    : width(w), height(h), channels(c), range(r),
      values(static_cast<std::size_t>(w) * h * c, fill) {}

void ImageBuffer::validate() const {
    if (width <= 0 || height <= 0)
        throw validation_error("image dimensions must be positive");
    if (channels != 1 && channels != 3)
        throw validation_error("image must have 1 or 3 channels");
    if (values.size() != value_count())
        throw validation_error("image value storage does not match dimensions");
    const float lo = range == PixelRange::Unit ? -1.0f : 0.0f;
    const float hi = range == PixelRange::Unit ? 1.0f : 255.0f;
    for (float v : values) {
        if (!(v >= lo && v <= hi))
            throw validation_error("image value outside declared convention");
    }
}

ImageBuffer to_unit(const ImageBuffer& img) {
    if (img.range == PixelRange::Unit) return img;
    ImageBuffer out = img;
    out.range = PixelRange::Unit;
    for (auto& v : out.values) v = v / 127.5f - 1.0f;
    return out;
}

ImageBuffer to_byte(const ImageBuffer& img) {
    if (img.range == PixelRange::Byte) return img;
    ImageBuffer out = img;
    out.range = PixelRange::Byte;
    for (auto& v : out.values) {
        float b = std::round((v + 1.0f) * 127.5f);
        v = std::clamp(b, 0.0f, 255.0f);
    }
    return out;
}

ImageBuffer hconcat(const ImageBuffer& a, const ImageBuffer& b) {
    if (a.height != b.height || a.channels != b.channels)
        throw validation_error("hconcat: height/channel mismatch");
    if (a.range != b.range)
        throw validation_error("hconcat: mixed pixel conventions");
    ImageBuffer out(a.width + b.width, a.height, a.channels, a.range);
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y < a.height; ++y) {
            for (int x = 0; x < a.width; ++x) out.at(c, y, x) = a.at(c, y, x);
            for (int x = 0; x < b.width; ++x) out.at(c, y, a.width + x) = b.at(c, y, x);
        }
    return out;
}

ImageBuffer downscale2x(const ImageBuffer& img) {
    if (img.width % 2 != 0 || img.height % 2 != 0)
        throw validation_error("downscale2x: dimensions must be even");
    ImageBuffer out(img.width / 2, img.height / 2, img.channels, img.range);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                float s = img.at(c, 2 * y, 2 * x) + img.at(c, 2 * y, 2 * x + 1) +
                          img.at(c, 2 * y + 1, 2 * x) + img.at(c, 2 * y + 1, 2 * x + 1);
                out.at(c, y, x) = s * 0.25f;
            }
    return out;
}

ImageBuffer upscale2x(const ImageBuffer& img) {
    ImageBuffer out(img.width * 2, img.height * 2, img.channels, img.range);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x)
                out.at(c, y, x) = img.at(c, y / 2, x / 2);
    return out;
}

std::vector<float> luminance01(const ImageBuffer& img) {
    std::vector<float> out(img.pixel_count(), 0.0f);
    const float scale = img.range == PixelRange::Byte ? 1.0f / 255.0f : 0.5f;
    const float shift = img.range == PixelRange::Byte ? 0.0f : 0.5f;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            float m = img.at(0, y, x);
            for (int c = 1; c < img.channels; ++c) m = std::max(m, img.at(c, y, x));
            out[static_cast<std::size_t>(y) * img.width + x] = m * scale + shift;
        }
    return out;
}

std::string encode_image_bytes(const ImageBuffer& img) {
    ImageBuffer b = to_byte(img);
    std::ostringstream os;
    os << (b.channels == 3 ? "P6" : "P5") << "\n"
       << b.width << " " << b.height << "\n255\n";
    // interleave channels per PNM
    for (int y = 0; y < b.height; ++y)
        for (int x = 0; x < b.width; ++x)
            for (int c = 0; c < b.channels; ++c)
                os.put(static_cast<char>(static_cast<unsigned char>(b.at(c, y, x))));
    return os.str();
}

void write_image(const ImageBuffer& img, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw validation_error("cannot open image file for writing: " + path);
    std::string bytes = encode_image_bytes(img);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw validation_error("failed writing image file: " + path);
}

ImageBuffer read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw validation_error("cannot open image file: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6" && magic != "P5")
        throw validation_error("unsupported image format in " + path);
    int w = 0, h = 0, maxval = 0;
    f >> w >> h >> maxval;
    if (!f || w <= 0 || h <= 0 || maxval != 255)
        throw validation_error("malformed image header in " + path);
    f.get(); // single whitespace after header
    int channels = magic == "P6" ? 3 : 1;
    ImageBuffer img(w, h, channels, PixelRange::Byte);
    std::vector<char> raw(static_cast<std::size_t>(w) * h * channels);
    f.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!f) throw validation_error("truncated image data in " + path);
    std::size_t i = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c)
                img.at(c, y, x) = static_cast<float>(static_cast<unsigned char>(raw[i++]));
    return img;
}

} // namespace pqdaf
