#include "loopvlm/vocab.hpp"

#include "loopvlm/errors.hpp"

namespace loopvlm {

int Vocabulary::char_to_id(char c) const {
    if (!contains(c))
        throw DataError(std::string("vocabulary: unknown symbol '") + c + "' (code " +
                        std::to_string(static_cast<int>(static_cast<unsigned char>(c))) + ")");
    return first_char_id + (c - first_char);
}

char Vocabulary::id_to_char(int id) const {
    if (!is_char_id(id)) throw DataError("vocabulary: id " + std::to_string(id) + " is not a character");
    return static_cast<char>(first_char + (id - first_char_id));
}

std::vector<int> Vocabulary::encode_text(const std::string& s) const {
    std::vector<int> out;
    out.reserve(s.size());
    for (char c : s) out.push_back(char_to_id(c));
    return out;
}

std::string Vocabulary::decode_text(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(id_to_char(id));
    return out;
}

EncodedSample encode_sample(const Vocabulary& vocab, const std::string& question, const std::string& answer,
                            int n_visual_tokens, bool loss_on_question) {
    if (n_visual_tokens < 0) throw DataError("encode_sample: negative visual token count");
    EncodedSample out;
    auto& ids = out.token_ids;
    ids.push_back(Vocabulary::bos_id);
    ids.push_back(Vocabulary::image_start_id);
    out.span_start = static_cast<int>(ids.size());
    out.span_len = n_visual_tokens;
    for (int i = 0; i < n_visual_tokens; ++i) ids.push_back(Vocabulary::image_id);
    ids.push_back(Vocabulary::image_end_id);

    const int question_start = static_cast<int>(ids.size());
    for (char c : question) ids.push_back(vocab.char_to_id(c));
    out.answer_start = static_cast<int>(ids.size());
    for (char c : answer) ids.push_back(vocab.char_to_id(c));
    ids.push_back(Vocabulary::eos_id);

    out.target_mask.assign(ids.size(), 0);
    for (size_t i = static_cast<size_t>(out.answer_start); i < ids.size(); ++i) out.target_mask[i] = 1;  // answer + eos
    if (loss_on_question)
        for (int i = question_start; i < out.answer_start; ++i) out.target_mask[i] = 1;
    return out;
}

DecodedSample decode_sample(const Vocabulary& vocab, const std::vector<int>& ids) {
    size_t i = 0;
    auto expect = [&](int id, const char* what) {
        if (i >= ids.size() || ids[i] != id) throw DataError(std::string("decode_sample: expected ") + what);
        ++i;
    };
    expect(Vocabulary::bos_id, "bos");
    expect(Vocabulary::image_start_id, "image_start");
    DecodedSample out;
    while (i < ids.size() && ids[i] == Vocabulary::image_id) {
        ++out.n_visual_tokens;
        ++i;
    }
    expect(Vocabulary::image_end_id, "image_end");
    // The token stream carries no question/answer delimiter; questions in
    // this protocol end with '?' and answers never contain one, so the last
    // '?' marks the boundary.
    std::string text;
    while (i < ids.size() && vocab.is_char_id(ids[i])) {
        text.push_back(vocab.id_to_char(ids[i]));
        ++i;
    }
    expect(Vocabulary::eos_id, "eos");
    if (i != ids.size()) throw DataError("decode_sample: trailing tokens after eos");
    auto pos = text.find_last_of('?');
    if (pos == std::string::npos) {
        out.answer = text;
    } else {
        out.question = text.substr(0, pos + 1);
        out.answer = text.substr(pos + 1);
    }
    return out;
}

}  // namespace loopvlm
