#include "loopvlm/dataset.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

#include "loopvlm/errors.hpp"

namespace loopvlm {

namespace {
constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    const size_t rem = bytes.size() - i;
    if (rem == 1) {
        uint32_t v = bytes[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw DataError("base64: length not a multiple of 4");
    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                vals[j] = 0;
                ++pad;
            } else {
                vals[j] = value_of(c);
                if (vals[j] < 0) throw DataError(std::string("base64: bad character '") + c + "'");
                if (pad) throw DataError("base64: data after padding");
            }
        }
        uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
        out.push_back((v >> 16) & 255);
        if (pad < 2) out.push_back((v >> 8) & 255);
        if (pad < 1) out.push_back(v & 255);
    }
    return out;
}

std::vector<SyntheticScene> build_split(const SplitSpec& spec) {
    if (spec.count < 0) throw DataError("build_split: negative count");
    if (spec.global_count_frac < 0.0 || spec.global_count_frac > 1.0)
        throw DataError("build_split: task mix must lie in [0,1]");
    const int n_global = static_cast<int>(std::llround(spec.global_count_frac * spec.count));
    std::vector<SyntheticScene> scenes;
    scenes.reserve(spec.count);
    for (int i = 0; i < spec.count; ++i) {
        TaskKind kind = i < n_global ? TaskKind::global_count : TaskKind::local_attribute;
        scenes.push_back(generate_scene(spec.seed_start + static_cast<uint32_t>(i), kind));
    }
    return scenes;
}

void write_split_file(const std::string& path, const std::vector<SyntheticScene>& scenes) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    for (const auto& s : scenes) {
        nlohmann::json rec;
        rec["seed"] = s.seed;
        rec["task"] = task_name(s.task);
        rec["question"] = s.question;
        rec["answer"] = s.answer;
        rec["image_b64"] = base64_encode(s.image);
        os << rec.dump() << "\n";
    }
}

std::vector<SyntheticScene> read_split_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset file: " + path);
    std::vector<SyntheticScene> scenes;
    std::string line;
    size_t line_no = 0;
    const size_t expect_bytes = static_cast<size_t>(kImageChannels) * kImageSize * kImageSize;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        SyntheticScene s;
        s.seed = rec.at("seed").get<uint32_t>();
        s.task = task_from_name(rec.at("task").get<std::string>());
        s.question = rec.at("question").get<std::string>();
        s.answer = rec.at("answer").get<std::string>();
        s.image = base64_decode(rec.at("image_b64").get<std::string>());
        if (s.image.size() != expect_bytes)
            throw DataError(path + ":" + std::to_string(line_no) + ": image payload has " +
                            std::to_string(s.image.size()) + " bytes, expected " + std::to_string(expect_bytes));
        scenes.push_back(std::move(s));
    }
    return scenes;
}

void validate_disjoint(const std::vector<SplitSpec>& splits) {
    for (size_t i = 0; i < splits.size(); ++i) {
        for (size_t j = i + 1; j < splits.size(); ++j) {
            const uint64_t a0 = splits[i].seed_start, a1 = a0 + static_cast<uint64_t>(splits[i].count);
            const uint64_t b0 = splits[j].seed_start, b1 = b0 + static_cast<uint64_t>(splits[j].count);
            if (a0 < b1 && b0 < a1)
                throw DataError("overlapping seed ranges: '" + splits[i].name + "' [" + std::to_string(a0) + "," +
                                std::to_string(a1) + ") and '" + splits[j].name + "' [" + std::to_string(b0) + "," +
                                std::to_string(b1) + ")");
        }
    }
}

std::string manifest_json(const std::vector<SplitSpec>& splits) {
    nlohmann::json m;
    m["generator_version"] = kGeneratorVersion;
    m["image"] = {{"channels", kImageChannels}, {"height", kImageSize}, {"width", kImageSize}, {"encoding", "u8"}};
    nlohmann::json sj = nlohmann::json::object();
    for (const auto& s : splits) {
        sj[s.name] = {{"count", s.count},
                      {"seed_start", s.seed_start},
                      {"global_count_frac", s.global_count_frac},
                      {"file", s.name + ".jsonl"}};
    }
    m["splits"] = sj;
    return m.dump(2) + "\n";
}

std::vector<SplitSpec> parse_manifest(const std::string& json_text) {
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest: ") + e.what());
    }
    if (m.at("generator_version").get<int>() != kGeneratorVersion)
        throw DataError("manifest: generator version mismatch");
    std::vector<SplitSpec> splits;
    for (auto& [name, sj] : m.at("splits").items()) {
        SplitSpec s;
        s.name = name;
        s.count = sj.at("count").get<int>();
        s.seed_start = sj.at("seed_start").get<uint32_t>();
        s.global_count_frac = sj.at("global_count_frac").get<double>();
        splits.push_back(std::move(s));
    }
    validate_disjoint(splits);
    return splits;
}

}  // namespace loopvlm
