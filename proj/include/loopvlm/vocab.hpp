#pragma once

// Character-level vocabulary: printable ASCII plus the image placeholder
// protocol tokens and sequence structurals. Encoding layout for one sample:
//   [bos][image_start][image x n][image_end] question answer [eos]
// The loss mask covers answer positions and eos (optionally the question).

#include <cstdint>
#include <string>
#include <vector>

namespace loopvlm {

class Vocabulary {
public:
    static constexpr int pad_id = 0;
    static constexpr int bos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int image_start_id = 3;
    static constexpr int image_id = 4;
    static constexpr int image_end_id = 5;
    static constexpr int first_char_id = 6;
    static constexpr char first_char = ' ';  // 0x20
    static constexpr char last_char = '~';   // 0x7e

    int size() const { return first_char_id + (last_char - first_char) + 1; }  // 101

    bool contains(char c) const { return c >= first_char && c <= last_char; }
    int char_to_id(char c) const;   // throws DataError naming the character
    char id_to_char(int id) const;  // throws DataError for non-character ids
    bool is_char_id(int id) const { return id >= first_char_id && id < size(); }

    std::vector<int> encode_text(const std::string& s) const;
    std::string decode_text(const std::vector<int>& ids) const;  // character ids only
};

struct EncodedSample {
    std::vector<int> token_ids;
    int span_start = 0;  // first image_id position
    int span_len = 0;
    int answer_start = 0;  // index of the first answer token
    std::vector<uint8_t> target_mask;  // true where loss applies
};

EncodedSample encode_sample(const Vocabulary& vocab, const std::string& question, const std::string& answer,
                            int n_visual_tokens, bool loss_on_question = false);

struct DecodedSample {
    std::string question;
    std::string answer;
    int n_visual_tokens = 0;
};

// Inverse of encode_sample's layout; rejects malformed token streams.
DecodedSample decode_sample(const Vocabulary& vocab, const std::vector<int>& ids);

}  // namespace loopvlm
