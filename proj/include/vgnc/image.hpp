#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "vgnc/error.hpp"

namespace vgnc {

/// H x W x C raster, row-major with interleaved channels. Values nominally in [0,1].
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels, double fill = 0.0)
        : width_(width), height_(height), channels_(channels),
          data_(static_cast<std::size_t>(width) * height * channels, fill) {
        if (width < 0 || height < 0 || channels <= 0)
            throw Error(Errc::precondition, "invalid image dimensions");
    }

    int width() const noexcept { return width_; }
    int height() const noexcept { return height_; }
    int channels() const noexcept { return channels_; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
    double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

    std::size_t index(int x, int y, int c = 0) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool same_shape(const Image& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
    }

    bool operator==(const Image& other) const = default;

private:
    int width_ = 0;
    int height_ = 0;
    int channels_ = 1;
    std::vector<double> data_;
};

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
    if (!a.same_shape(b))
        throw Error(Errc::shape_mismatch, what);
}

/// Per-pixel boolean mask, row-major.
struct Mask {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> bits;

    Mask() = default;
    Mask(int w, int h, bool value) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, value ? 1 : 0) {}

    bool operator()(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool value) { bits[static_cast<std::size_t>(y) * width + x] = value ? 1 : 0; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
    bool operator==(const Mask&) const = default;
};

/// Luminance (Rec. 601 weights) for 3-channel input; a copy of channel 0 otherwise.
inline Image to_gray(const Image& img) {
    Image out(img.width(), img.height(), 1);
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            if (img.channels() >= 3)
                out.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
            else
                out.at(x, y) = img.at(x, y, 0);
        }
    }
    return out;
}

inline Image clamp01(Image img) {
    for (double& v : img.data()) v = std::clamp(v, 0.0, 1.0);
    return img;
}

} // namespace vgnc
