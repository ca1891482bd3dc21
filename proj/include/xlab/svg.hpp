#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

namespace xlab::svg {

struct Series {
    std::string name;
    std::vector<std::pair<double, double>> points;   // drawn in x order
};

/// Standalone SVG line chart with linear axes and a legend. Every point is
/// a circle carrying its exact coordinates in a <title> child ("x,y", %.10g).
std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                       std::span<const Series> series);

}  // namespace xlab::svg
