// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "elder/core/errors.hpp"

namespace elder {

// Whitespace-split word-level tokenizer with a byte fallback for unknown
// words. Vocabulary order is first-occurrence over the corpus, so the same
// corpus always yields the same table.
class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;

    Tokenizer() { add_specials(); }

    static Tokenizer from_corpus(const std::vector<std::string>& lines) {
        Tokenizer tok;
        for (const std::string& line : lines) {
            std::istringstream ss(line);
            std::string w;
            while (ss >> w) tok.intern(w);
        }
        return tok;
    }

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }

    int token_id(const std::string& w) const {
        auto it = token_to_id_.find(w);
        return it == token_to_id_.end() ? -1 : it->second;
    }

    std::vector<int> encode(const std::string& text) const {
        std::vector<int> ids;
        std::istringstream ss(text);
        std::string w;
        while (ss >> w) {
            auto it = token_to_id_.find(w);
            if (it != token_to_id_.end()) {
                ids.push_back(it->second);
            } else {
                for (unsigned char b : w) ids.push_back(byte_base_ + int(b));
            }
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        std::string pending_bytes;
        for (int id : ids) {
            if (id < 0 || id >= vocab_size()) throw IndexError("decode: token id out of range");
            if (id == kPad || id == kBos || id == kEos) continue;
            if (id >= byte_base_ && id < byte_base_ + 256) {
                pending_bytes.push_back(char(id - byte_base_));
                continue;
            }
            if (!pending_bytes.empty()) {
                if (!out.empty()) out.push_back(' ');
                out += pending_bytes;
                pending_bytes.clear();
            }
            if (!out.empty()) out.push_back(' ');
            out += id_to_token_[std::size_t(id)];
        }
        if (!pending_bytes.empty()) {
            if (!out.empty()) out.push_back(' ');
            out += pending_bytes;
        }
        return out;
    }

    // Text table (token, id) sorted by id; whole-file atomic.
    void save(const std::string& path) const {
        namespace fs = std::filesystem;
        const fs::path tmp = path + ".tmp";
        {
            std::ofstream os(tmp);
            if (!os) throw IoError("cannot write vocabulary to '" + path + "'");
            for (std::size_t i = 0; i < id_to_token_.size(); ++i)
                os << id_to_token_[i] << '\t' << i << '\n';
        }
        fs::rename(tmp, path);
    }

    static Tokenizer load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open vocabulary '" + path + "'");
        Tokenizer tok;
        tok.token_to_id_.clear();
        tok.id_to_token_.clear();
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            auto tab = line.find('\t');
            if (tab == std::string::npos) throw IoError("malformed vocabulary line: " + line);
            std::string w = line.substr(0, tab);
            int id = std::stoi(line.substr(tab + 1));
            if (id != int(tok.id_to_token_.size()))
                throw IoError("vocabulary ids must be dense and sorted");
            tok.id_to_token_.push_back(w);
            tok.token_to_id_[w] = id;
        }
        if (tok.vocab_size() < 3 + 256) throw IoError("vocabulary is missing special tokens");
        return tok;
    }

    bool operator==(const Tokenizer& o) const { return id_to_token_ == o.id_to_token_; }

private:
    void add_specials() {
        intern("<pad>");
        intern("<bos>");
        intern("<eos>");
        byte_base_ = vocab_size();
        char buf[8];
        for (int b = 0; b < 256; ++b) {
            std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
            intern(buf);
        }
    }

    int intern(const std::string& w) {
        auto it = token_to_id_.find(w);
        if (it != token_to_id_.end()) return it->second;
        int id = vocab_size();
        token_to_id_[w] = id;
        id_to_token_.push_back(w);
        return id;
    }

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    int byte_base_ = 3;
};

} // namespace elder
