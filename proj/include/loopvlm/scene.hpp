#pragma once

// Deterministic synthetic visual-QA scenes: 1-6 colored shapes placed on a
// 4x4 grid of 8x8-pixel cells over a dark background. Two tasks:
//   global_count    "count <color> <shape>?"  -> "0".."6"
//   local_attribute "color at <row> <col>?"   -> "r" | "g" | "b"
// Counting needs the whole scene; the attribute task needs one cell, which
// is what makes coarse vs fine visual tiers informative.

#include <cstdint>
#include <string>
#include <vector>

namespace loopvlm {

enum class TaskKind { global_count, local_attribute };

const char* task_name(TaskKind k);
TaskKind task_from_name(const std::string& name);

struct SceneObject {
    int shape = 0;  // 0 square, 1 circle, 2 triangle
    int color = 0;  // 0 red, 1 green, 2 blue
    int row = 0;    // cell coordinates in [0, 4)
    int col = 0;
};

struct SyntheticScene {
    uint32_t seed = 0;
    TaskKind task = TaskKind::global_count;
    std::vector<SceneObject> objects;
    std::string question;
    std::string answer;
    std::vector<uint8_t> image;  // CHW, 3 x 32 x 32
};

constexpr int kImageChannels = 3;
constexpr int kImageSize = 32;
constexpr int kCellSize = 8;
constexpr int kCellGrid = kImageSize / kCellSize;  // 4
constexpr int kMaxObjects = 6;

const char* shape_name(int shape);
const char* color_name(int color);
char color_letter(int color);

SyntheticScene generate_scene(uint32_t seed, TaskKind kind);

// u8 pixels to [0,1] floats, CHW order preserved
std::vector<float> image_to_float(const std::vector<uint8_t>& image);

}  // namespace loopvlm
