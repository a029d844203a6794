#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace prodseek {

// Channel-last H×W×3 raster, values in [0,1].
struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int h, int w, double fill = 0.0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {
        if (h <= 0 || w <= 0) throw std::invalid_argument("Image: non-positive dimensions");
    }

    double& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    double at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
};

}  // namespace prodseek
