#include "loopvlm/scene.hpp"

#include <algorithm>

#include "loopvlm/errors.hpp"
#include "loopvlm/rng.hpp"

namespace loopvlm {

namespace {

constexpr uint8_t kLow = 25;    // background / off channel
constexpr uint8_t kHigh = 230;  // lit channel

void put_pixel(std::vector<uint8_t>& img, int y, int x, int color) {
    uint8_t rgb[3] = {kLow, kLow, kLow};
    rgb[color] = kHigh;
    for (int c = 0; c < kImageChannels; ++c)
        img[static_cast<size_t>(c) * kImageSize * kImageSize + static_cast<size_t>(y) * kImageSize + x] = rgb[c];
}

void draw_object(std::vector<uint8_t>& img, const SceneObject& obj) {
    const int y0 = obj.row * kCellSize;
    const int x0 = obj.col * kCellSize;
    for (int y = 0; y < kCellSize; ++y) {
        for (int x = 0; x < kCellSize; ++x) {
            bool on = false;
            switch (obj.shape) {
                case 0:  // square, 6x6 block
                    on = y >= 1 && y <= 6 && x >= 1 && x <= 6;
                    break;
                case 1: {  // disc
                    double dy = y - 3.5, dx = x - 3.5;
                    on = dy * dy + dx * dx <= 3.3 * 3.3;
                    break;
                }
                case 2:  // lower-left staircase triangle
                    on = y >= 1 && y <= 6 && x >= 1 && x <= y;
                    break;
            }
            if (on) put_pixel(img, y0 + y, x0 + x, obj.color);
        }
    }
}

std::vector<int> pick_cells(Rng& rng, int count) {
    std::vector<int> cells(kCellGrid * kCellGrid);
    for (size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
    for (int i = 0; i < count; ++i) {
        int j = rng.uniform_int(i, static_cast<int>(cells.size()) - 1);
        std::swap(cells[i], cells[j]);
    }
    cells.resize(count);
    return cells;
}

}  // namespace

const char* task_name(TaskKind k) {
    return k == TaskKind::global_count ? "global_count" : "local_attribute";
}

TaskKind task_from_name(const std::string& name) {
    if (name == "global_count") return TaskKind::global_count;
    if (name == "local_attribute") return TaskKind::local_attribute;
    throw DataError("unknown task kind '" + name + "'");
}

const char* shape_name(int shape) {
    switch (shape) {
        case 0: return "square";
        case 1: return "circle";
        case 2: return "triangle";
    }
    throw DataError("shape index out of range");
}

const char* color_name(int color) {
    switch (color) {
        case 0: return "red";
        case 1: return "green";
        case 2: return "blue";
    }
    throw DataError("color index out of range");
}

char color_letter(int color) { return "rgb"[color]; }

SyntheticScene generate_scene(uint32_t seed, TaskKind kind) {
    SyntheticScene scene;
    scene.seed = seed;
    scene.task = kind;
    scene.image.assign(static_cast<size_t>(kImageChannels) * kImageSize * kImageSize, kLow);

    Rng rng(mix_seed({seed, static_cast<uint64_t>(kind == TaskKind::global_count ? 11 : 22)}));

    if (kind == TaskKind::global_count) {
        // The queried count is drawn uniformly from 0..6 so that every answer
        // stays well represented; filler objects use a different combination.
        const int target_color = rng.uniform_int(0, 2);
        const int target_shape = rng.uniform_int(0, 2);
        const int count = rng.uniform_int(0, kMaxObjects);
        const int min_extra = count == 0 ? 1 : 0;
        const int extra = rng.uniform_int(min_extra, kMaxObjects - count);
        const int total = count + extra;
        auto cells = pick_cells(rng, total);
        for (int i = 0; i < total; ++i) {
            SceneObject obj;
            obj.row = cells[i] / kCellGrid;
            obj.col = cells[i] % kCellGrid;
            if (i < count) {
                obj.color = target_color;
                obj.shape = target_shape;
            } else {
                do {
                    obj.color = rng.uniform_int(0, 2);
                    obj.shape = rng.uniform_int(0, 2);
                } while (obj.color == target_color && obj.shape == target_shape);
            }
            scene.objects.push_back(obj);
        }
        scene.question =
            std::string("count ") + color_name(target_color) + " " + shape_name(target_shape) + "?";
        scene.answer = std::to_string(count);
    } else {
        const int total = rng.uniform_int(1, kMaxObjects);
        auto cells = pick_cells(rng, total);
        for (int i = 0; i < total; ++i) {
            SceneObject obj;
            obj.row = cells[i] / kCellGrid;
            obj.col = cells[i] % kCellGrid;
            obj.color = rng.uniform_int(0, 2);
            obj.shape = rng.uniform_int(0, 2);
            scene.objects.push_back(obj);
        }
        const SceneObject& asked = scene.objects[static_cast<size_t>(rng.uniform_int(0, total - 1))];
        scene.question =
            "color at " + std::to_string(asked.row) + " " + std::to_string(asked.col) + "?";
        scene.answer = std::string(1, color_letter(asked.color));
    }

    for (const auto& obj : scene.objects) draw_object(scene.image, obj);
    return scene;
}

std::vector<float> image_to_float(const std::vector<uint8_t>& image) {
    std::vector<float> out(image.size());
    for (size_t i = 0; i < image.size(); ++i) out[i] = static_cast<float>(image[i]) / 255.0f;
    return out;
}

}  // namespace loopvlm
