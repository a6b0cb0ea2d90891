#pragma once

#include <cstddef>
#include <vector>

namespace das::test {

struct Row {
  const char* type;
  std::vector<long> shape;
  std::size_t params;
};

// Layer table of the depth-8 network on 200x200 input.
inline const std::vector<Row> kLayerTable = {
    {"Conv2d", {-1, 16, 200, 200}, 144},    {"BatchNorm2d", {-1, 16, 200, 200}, 32},
    {"ReLU", {-1, 16, 200, 200}, 0},        {"Conv2d", {-1, 16, 200, 200}, 2304},
    {"BatchNorm2d", {-1, 16, 200, 200}, 32}, {"ReLU", {-1, 16, 200, 200}, 0},
    {"Conv2d", {-1, 16, 200, 200}, 2304},   {"BatchNorm2d", {-1, 16, 200, 200}, 32},
    {"ReLU", {-1, 16, 200, 200}, 0},        {"BasicBlock", {-1, 16, 200, 200}, 0},
    {"Conv2d", {-1, 32, 100, 100}, 4608},   {"BatchNorm2d", {-1, 32, 100, 100}, 64},
    {"ReLU", {-1, 32, 100, 100}, 0},        {"Conv2d", {-1, 32, 100, 100}, 9216},
    {"BatchNorm2d", {-1, 32, 100, 100}, 64}, {"Conv2d", {-1, 32, 100, 100}, 512},
    {"BatchNorm2d", {-1, 32, 100, 100}, 64}, {"ReLU", {-1, 32, 100, 100}, 0},
    {"BasicBlock", {-1, 32, 100, 100}, 0},  {"Conv2d", {-1, 64, 50, 50}, 18432},
    {"BatchNorm2d", {-1, 64, 50, 50}, 128}, {"ReLU", {-1, 64, 50, 50}, 0},
    {"Conv2d", {-1, 64, 50, 50}, 36864},    {"BatchNorm2d", {-1, 64, 50, 50}, 128},
    {"Conv2d", {-1, 64, 50, 50}, 2048},     {"BatchNorm2d", {-1, 64, 50, 50}, 128},
    {"ReLU", {-1, 64, 50, 50}, 0},          {"BasicBlock", {-1, 64, 50, 50}, 0},
    {"AdaptiveAvgPool2d", {-1, 64, 1, 1}, 0}, {"Linear", {-1, 2}, 130},
};

}  // namespace das::test
