// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <vector>

#include "meddet/errors.hpp"

namespace meddet {

// Axis-aligned box, xyxy pixel coordinates, x1 <= x2 and y1 <= y2.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double longer_side() const { return std::max(width(), height()); }
    bool contains(double px, double py) const { return px >= x1 && px <= x2 && py >= y1 && py <= y2; }
    bool well_ordered() const { return x1 <= x2 && y1 <= y2; }
};

struct GtObject {
    Box box;
    int cls = 0;  // 0 = non-protrusion, 1 = protrusion
};

struct Detection {
    Box box;
    int cls = 0;
    double score = 0;
};

// Per-image collections; outer index is the image.
using GroundTruthSet = std::vector<std::vector<GtObject>>;
using DetectionSet = std::vector<std::vector<Detection>>;

inline double iou(const Box& a, const Box& b, double eps = 1e-9) {
    if (!a.well_ordered() || !b.well_ordered()) throw ContractError("iou: boxes must satisfy x1<=x2, y1<=y2");
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return inter / std::max(uni, eps);
}

}  // namespace meddet
