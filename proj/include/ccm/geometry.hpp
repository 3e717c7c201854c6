// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "ccm/error.hpp"

namespace ccm {

// Axis-aligned box in normalized image coordinates, x to the right,
// y downward, origin at the top-left corner.
struct BoundingBox {
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }

    void validate() const {
        if (!(x0 < x1) || !(y0 < y1))
            throw GeometryError("degenerate bounding box");
        if (x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0)
            throw GeometryError("bounding box outside [0,1]^2");
    }

    BoundingBox clamped() const {
        BoundingBox b = *this;
        b.x0 = b.x0 < 0.0 ? 0.0 : (b.x0 > 1.0 ? 1.0 : b.x0);
        b.y0 = b.y0 < 0.0 ? 0.0 : (b.y0 > 1.0 ? 1.0 : b.y0);
        b.x1 = b.x1 < 0.0 ? 0.0 : (b.x1 > 1.0 ? 1.0 : b.x1);
        b.y1 = b.y1 < 0.0 ? 0.0 : (b.y1 > 1.0 ? 1.0 : b.y1);
        return b;
    }
};

// 2-dim task selector: one bit per foreground attribute, value 1 meaning
// the attribute may be changed by the generator.
struct Indicator {
    int illumination = 0;
    int pose = 0;

    static Indicator blend() { return {0, 0}; }
    static Indicator harmonize() { return {1, 0}; }
    static Indicator view_synthesis() { return {0, 1}; }
    static Indicator compose() { return {1, 1}; }

    void validate() const {
        if ((illumination != 0 && illumination != 1) || (pose != 0 && pose != 1))
            throw ValidationError("indicator bits must be 0 or 1");
    }

    // Stable index in {0,1,2,3}; also the task enumeration order.
    int index() const { return illumination * 2 + pose; }

    std::string name() const {
        if (illumination == 0 && pose == 0)
            return "blend";
        if (illumination == 1 && pose == 0)
            return "harmonize";
        if (illumination == 0 && pose == 1)
            return "view";
        return "compose";
    }

    bool operator==(const Indicator& o) const { return illumination == o.illumination && pose == o.pose; }

    static Indicator from_index(int i) {
        switch (i) {
        case 0: return {0, 0};
        case 1: return {0, 1};
        case 2: return {1, 0};
        case 3: return {1, 1};
        default: throw ValidationError("indicator index out of range");
        }
    }

    static const Indicator kAll[4];
};

inline const Indicator Indicator::kAll[4] = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};

} // namespace ccm
