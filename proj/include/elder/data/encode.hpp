// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "elder/core/errors.hpp"
#include "elder/model/transformer.hpp"
#include "elder/text/tokenizer.hpp"

namespace elder {

// <bos> + prompt tokens + target tokens; prompt_len marks the target boundary.
inline TokenSequence make_sequence(const Tokenizer& tok, const std::string& prompt,
                                   const std::string& target) {
    TokenSequence seq;
    seq.ids.push_back(Tokenizer::kBos);
    for (int id : tok.encode(prompt)) seq.ids.push_back(id);
    seq.prompt_len = seq.length();
    if (seq.prompt_len < 2) throw DegenerateInputError("make_sequence: empty prompt");
    for (int id : tok.encode(target)) seq.ids.push_back(id);
    if (seq.length() == seq.prompt_len) throw DegenerateInputError("make_sequence: empty target");
    return seq;
}

// Plain language-modelling line: everything after <bos> is predicted.
inline TokenSequence make_lm_sequence(const Tokenizer& tok, const std::string& line) {
    TokenSequence seq;
    seq.ids.push_back(Tokenizer::kBos);
    for (int id : tok.encode(line)) seq.ids.push_back(id);
    seq.prompt_len = 1;
    if (seq.length() < 2) throw DegenerateInputError("make_lm_sequence: empty line");
    return seq;
}

} // namespace elder
