#pragma once

// Dataset files: one JSON object per line with seed, task kind, question,
// answer, and the base64-encoded raw u8 image payload. A manifest JSON
// records generator version, counts, mixes, and per-split seed ranges;
// regenerating from the manifest is byte-identical.

#include <cstdint>
#include <string>
#include <vector>

#include "loopvlm/scene.hpp"

namespace loopvlm {

constexpr int kGeneratorVersion = 1;

std::string base64_encode(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

struct SplitSpec {
    std::string name;
    int count = 0;
    uint32_t seed_start = 0;       // seeds [seed_start, seed_start + count)
    double global_count_frac = 0.5;  // rest is local_attribute
};

// Builds one split: stratified task assignment, seeds dense in the range.
std::vector<SyntheticScene> build_split(const SplitSpec& spec);

void write_split_file(const std::string& path, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> read_split_file(const std::string& path);

// Rejects overlapping seed ranges across splits before any generation.
void validate_disjoint(const std::vector<SplitSpec>& splits);

std::string manifest_json(const std::vector<SplitSpec>& splits);
std::vector<SplitSpec> parse_manifest(const std::string& json_text);

}  // namespace loopvlm
