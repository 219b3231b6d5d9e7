#pragma once

#include <cctype>
#include <string>
#include <unordered_map>
#include <vector>

#include "multi/common.hpp"
#include "multi/tensor.hpp"

namespace multi {

// Word-level tokenizer over a small closed vocabulary. Ids 0..3 are the
// specials, 4..17 cover the prompt-template words and punctuation, and the
// rest of the id space belongs to synthetic caption words, written "w<id>".
// Unknown words hash deterministically into the caption range.
class Tokenizer {
  public:
    static constexpr Index kPad = 0;
    static constexpr Index kCls = 1;
    static constexpr Index kSep = 2;
    static constexpr Index kMask = 3;

    explicit Tokenizer(Index vocab = 256) : vocab_(vocab) {
        if (vocab < kCaptionStart + 1) {
            throw ConfigError("Tokenizer: vocabulary must cover the reserved ids");
        }
        const char* words[] = {"what", "does", "this", "picture", "video", "describe", "option",
                               "?",    ":",    ".",   "1",       "2",     "3",        "4"};
        Index id = 4;
        for (const char* w : words) {
            word_ids_[w] = id++;
        }
    }

    Index vocab() const { return vocab_; }
    static constexpr Index caption_word_start() { return kCaptionStart; }

    static std::string caption_word(Index token_id) { return "w" + std::to_string(token_id); }

    std::vector<Index> encode(const std::string& text) const {
        std::vector<Index> out;
        std::size_t i = 0;
        std::string word;
        auto flush = [&]() {
            if (!word.empty()) {
                out.push_back(word_id(word));
                word.clear();
            }
        };
        while (i < text.size()) {
            const char c = text[i];
            if (c == '[') {
                const std::size_t close = text.find(']', i);
                if (close != std::string::npos) {
                    const std::string tag = text.substr(i, close - i + 1);
                    Index special = -1;
                    if (tag == "[CLS]") special = kCls;
                    if (tag == "[SEP]") special = kSep;
                    if (tag == "[MASK]") special = kMask;
                    if (tag == "[PAD]") special = kPad;
                    if (special >= 0) {
                        flush();
                        out.push_back(special);
                        i = close + 1;
                        continue;
                    }
                }
            }
            if (std::isalnum(static_cast<unsigned char>(c))) {
                word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            } else {
                flush();
                if (c == '?' || c == ':' || c == '.') {
                    out.push_back(word_id(std::string(1, c)));
                }
                // other separators (spaces, commas, ...) are dropped
            }
            ++i;
        }
        flush();
        return out;
    }

  private:
    static constexpr Index kCaptionStart = 18;

    Index word_id(const std::string& w) const {
        if (auto it = word_ids_.find(w); it != word_ids_.end()) {
            return it->second;
        }
        if (w.size() >= 2 && w[0] == 'w') {
            bool digits = true;
            for (std::size_t i = 1; i < w.size(); ++i) {
                digits = digits && std::isdigit(static_cast<unsigned char>(w[i])) != 0;
            }
            if (digits) {
                const Index id = static_cast<Index>(std::stoll(w.substr(1)));
                if (id >= kCaptionStart && id < vocab_) {
                    return id;
                }
            }
        }
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (char c : w) {
            h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c)));
        }
        return kCaptionStart + static_cast<Index>(h % static_cast<std::uint64_t>(vocab_ - kCaptionStart));
    }

    Index vocab_;
    std::unordered_map<std::string, Index> word_ids_;
};

}  // namespace multi
