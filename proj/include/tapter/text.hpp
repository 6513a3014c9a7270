// Word- and subword-level tokenization, stop words, and vocabulary
// construction shared by the embedding and language-model code.
#pragma once

#include "tapter/common.hpp"

#include <unordered_map>
#include <unordered_set>

namespace tapter {

// ---------------------------------------------------------------------------
// word level
// ---------------------------------------------------------------------------

struct WordSequence {
    std::vector<std::string> words;
    // [begin, end) byte offsets into the source text, one span per word;
    // non-overlapping and strictly increasing.
    std::vector<std::pair<int, int>> source_offsets;

    size_t size() const { return words.size(); }
    bool empty() const { return words.empty(); }
    void append(const WordSequence& other);
};

// Splits on whitespace, then detaches leading/trailing ASCII punctuation as
// separate words. Intra-word punctuation (hyphens etc.) is kept.
WordSequence word_tokenize(std::string_view text, bool lowercase);

std::string ascii_lower(std::string_view s);

struct StopWordList {
    std::unordered_set<std::string> words; // all lowercase

    bool empty() const { return words.empty(); }
    static StopWordList default_english();
    static StopWordList load(const std::string& path);
    void save(const std::string& path) const;
};

// Membership test after lowercasing; the empty string is never a stop word.
bool is_stopword(std::string_view word, const StopWordList& list);

// ---------------------------------------------------------------------------
// subword level
// ---------------------------------------------------------------------------

struct SubwordVocab {
    std::vector<std::string> tokens;              // id -> token string
    std::unordered_map<std::string, int> id_of;   // token string -> id
    int pad_id{-1}, unk_id{-1}, cls_id{-1}, sep_id{-1}, mask_id{-1};

    static constexpr const char* kContinuation = "##";
    static constexpr const char* kPad = "[PAD]";
    static constexpr const char* kUnk = "[UNK]";
    static constexpr const char* kCls = "[CLS]";
    static constexpr const char* kSep = "[SEP]";
    static constexpr const char* kMask = "[MASK]";

    int size() const { return static_cast<int>(tokens.size()); }
    bool is_special(int id) const;
    const std::string& token(int id) const { return tokens[static_cast<size_t>(id)]; }
    // Token surface without the continuation marker.
    std::string demarked(int id) const;
    int demarked_len(int id) const; // in code points

    // Builds the id map and locates the special tokens; throws if a special
    // is missing/duplicated or token strings repeat.
    static SubwordVocab from_tokens(std::vector<std::string> tokens);
    static SubwordVocab load(const std::string& path);
    void save(const std::string& path) const; // one token per line, line = id
};

// Greedy longest-match segmentation. Returns [unk_id] when the word cannot
// be covered. Non-initial pieces carry the continuation marker.
std::vector<int> subword_tokenize(std::string_view word, const SubwordVocab& vocab);

// Deterministic frequency-based merge construction. The result contains the
// specials, every single character of the corpus (initial and continuation
// form), and merged pieces, up to target_size entries. Every corpus word
// tokenizes without UNK.
SubwordVocab build_subword_vocab(const WordSequence& corpus, int target_size);

// Convenience: concatenated subword ids of every word in the sequence.
std::vector<int> encode_words(const WordSequence& seq, const SubwordVocab& vocab);

} // namespace tapter
