#include "tapter/text.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace tapter {

void WordSequence::append(const WordSequence& other) {
    int base = 0;
    if (!source_offsets.empty()) base = source_offsets.back().second + 1;
    for (size_t i = 0; i < other.words.size(); ++i) {
        words.push_back(other.words[i]);
        source_offsets.emplace_back(base + other.source_offsets[i].first,
                                    base + other.source_offsets[i].second);
    }
}

namespace {

bool is_ascii_punct(char c) {
    static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    return punct.find(c) != std::string::npos;
}

bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

} // namespace

std::string ascii_lower(std::string_view s) {
    std::string out(s);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

WordSequence word_tokenize(std::string_view text, bool lowercase) {
    WordSequence seq;
    auto emit = [&](size_t begin, size_t end) {
        std::string w(text.substr(begin, end - begin));
        if (lowercase) w = ascii_lower(w);
        seq.words.push_back(std::move(w));
        seq.source_offsets.emplace_back(static_cast<int>(begin), static_cast<int>(end));
    };

    size_t i = 0;
    const size_t n = text.size();
    while (i < n) {
        while (i < n && is_space(text[i])) ++i;
        if (i >= n) break;
        size_t j = i;
        while (j < n && !is_space(text[j])) ++j;
        // chunk [i, j): peel punctuation off both ends
        size_t begin = i, end = j;
        while (begin < end && is_ascii_punct(text[begin])) {
            emit(begin, begin + 1);
            ++begin;
        }
        // find trailing punctuation run
        size_t core_end = end;
        while (core_end > begin && is_ascii_punct(text[core_end - 1])) --core_end;
        if (core_end > begin) emit(begin, core_end);
        for (size_t k = core_end; k < end; ++k) emit(k, k + 1);
        i = j;
    }
    return seq;
}

bool is_stopword(std::string_view word, const StopWordList& list) {
    if (word.empty()) return false;
    return list.words.count(ascii_lower(word)) > 0;
}

StopWordList StopWordList::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open stop-word file: " + path);
    StopWordList list;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        list.words.insert(ascii_lower(line));
    }
    if (list.words.empty()) throw std::runtime_error("stop-word file is empty: " + path);
    return list;
}

void StopWordList::save(const std::string& path) const {
    std::vector<std::string> sorted(words.begin(), words.end());
    std::sort(sorted.begin(), sorted.end());
    std::ostringstream out;
    for (const auto& w : sorted) out << w << '\n';
    write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// SubwordVocab
// ---------------------------------------------------------------------------

bool SubwordVocab::is_special(int id) const {
    return id == pad_id || id == unk_id || id == cls_id || id == sep_id || id == mask_id;
}

std::string SubwordVocab::demarked(int id) const {
    const std::string& t = tokens[static_cast<size_t>(id)];
    if (t.size() > 2 && t.compare(0, 2, kContinuation) == 0) return t.substr(2);
    return t;
}

int SubwordVocab::demarked_len(int id) const {
    return static_cast<int>(utf8_len(demarked(id)));
}

SubwordVocab SubwordVocab::from_tokens(std::vector<std::string> tokens) {
    SubwordVocab v;
    v.tokens = std::move(tokens);
    for (size_t i = 0; i < v.tokens.size(); ++i) {
        if (!v.id_of.emplace(v.tokens[i], static_cast<int>(i)).second)
            throw std::runtime_error("duplicate token in vocab: " + v.tokens[i]);
    }
    auto locate = [&](const char* name) {
        auto it = v.id_of.find(name);
        if (it == v.id_of.end())
            throw std::runtime_error(std::string("vocab missing special token ") + name);
        return it->second;
    };
    v.pad_id = locate(kPad);
    v.unk_id = locate(kUnk);
    v.cls_id = locate(kCls);
    v.sep_id = locate(kSep);
    v.mask_id = locate(kMask);
    return v;
}

SubwordVocab SubwordVocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
}

void SubwordVocab::save(const std::string& path) const {
    std::ostringstream out;
    for (const auto& t : tokens) out << t << '\n';
    write_text_file(path, out.str());
}

// ---------------------------------------------------------------------------
// greedy longest-match segmentation
// ---------------------------------------------------------------------------

std::vector<int> subword_tokenize(std::string_view word, const SubwordVocab& vocab) {
    std::vector<std::string> chars = utf8_chars(word);
    const size_t n = chars.size();
    if (n == 0) return {};
    std::vector<int> out;
    size_t pos = 0;
    bool first = true;
    while (pos < n) {
        int match_id = -1;
        size_t match_len = 0;
        for (size_t len = n - pos; len >= 1; --len) {
            std::string cand = first ? "" : SubwordVocab::kContinuation;
            for (size_t k = 0; k < len; ++k) cand += chars[pos + k];
            auto it = vocab.id_of.find(cand);
            if (it != vocab.id_of.end()) {
                match_id = it->second;
                match_len = len;
                break;
            }
        }
        if (match_id < 0) return {vocab.unk_id};
        out.push_back(match_id);
        pos += match_len;
        first = false;
    }
    return out;
}

// ---------------------------------------------------------------------------
// frequency-based merge construction
// ---------------------------------------------------------------------------

SubwordVocab build_subword_vocab(const WordSequence& corpus, int target_size) {
    // unique words in order of first appearance, with frequencies
    std::vector<std::string> word_list;
    std::vector<long long> freq;
    std::unordered_map<std::string, int> word_idx;
    for (const auto& w : corpus.words) {
        auto [it, inserted] = word_idx.emplace(w, static_cast<int>(word_list.size()));
        if (inserted) {
            word_list.push_back(w);
            freq.push_back(0);
        }
        ++freq[static_cast<size_t>(it->second)];
    }

    // base symbol inventory: first char unmarked, continuations marked
    std::vector<std::vector<std::string>> symbols(word_list.size());
    std::vector<std::string> base;
    std::unordered_set<std::string> base_seen;
    for (size_t wi = 0; wi < word_list.size(); ++wi) {
        std::vector<std::string> chars = utf8_chars(word_list[wi]);
        for (size_t k = 0; k < chars.size(); ++k) {
            std::string sym = (k == 0) ? chars[k] : SubwordVocab::kContinuation + chars[k];
            symbols[wi].push_back(sym);
            if (base_seen.insert(sym).second) base.push_back(sym);
        }
    }
    std::sort(base.begin(), base.end());

    const int n_special = 5;
    if (target_size < static_cast<int>(base.size()) + n_special)
        throw std::runtime_error("vocab target_size " + std::to_string(target_size) +
                                 " too small; need at least " +
                                 std::to_string(base.size() + n_special));

    std::vector<std::string> tokens = {SubwordVocab::kPad, SubwordVocab::kUnk,
                                       SubwordVocab::kCls, SubwordVocab::kSep,
                                       SubwordVocab::kMask};
    tokens.insert(tokens.end(), base.begin(), base.end());
    std::unordered_set<std::string> token_set(tokens.begin(), tokens.end());

    auto merge_string = [](const std::string& a, const std::string& b) {
        // b is always continuation-marked; the result inherits a's marking
        return a + b.substr(2);
    };

    while (static_cast<int>(tokens.size()) < target_size) {
        // count adjacent pairs; ties break on earliest first occurrence
        std::map<std::pair<std::string, std::string>, long long> counts;
        std::map<std::pair<std::string, std::string>, std::pair<size_t, size_t>> first_at;
        for (size_t wi = 0; wi < symbols.size(); ++wi) {
            const auto& syms = symbols[wi];
            for (size_t k = 0; k + 1 < syms.size(); ++k) {
                auto key = std::make_pair(syms[k], syms[k + 1]);
                counts[key] += freq[wi];
                auto pos = std::make_pair(wi, k);
                auto it = first_at.find(key);
                if (it == first_at.end() || pos < it->second) {
                    if (it == first_at.end()) first_at.emplace(key, pos);
                    else it->second = std::min(it->second, pos);
                }
            }
        }
        if (counts.empty()) break;

        std::pair<std::string, std::string> best;
        long long best_count = -1;
        std::pair<size_t, size_t> best_pos{SIZE_MAX, SIZE_MAX};
        for (const auto& [key, count] : counts) {
            auto pos = first_at[key];
            if (count > best_count || (count == best_count && pos < best_pos)) {
                best = key;
                best_count = count;
                best_pos = pos;
            }
        }

        std::string merged = merge_string(best.first, best.second);
        if (token_set.insert(merged).second) tokens.push_back(merged);

        // replace every occurrence of the pair
        for (auto& syms : symbols) {
            std::vector<std::string> next;
            next.reserve(syms.size());
            for (size_t k = 0; k < syms.size();) {
                if (k + 1 < syms.size() && syms[k] == best.first && syms[k + 1] == best.second) {
                    next.push_back(merged);
                    k += 2;
                } else {
                    next.push_back(syms[k]);
                    ++k;
                }
            }
            syms = std::move(next);
        }
    }

    return SubwordVocab::from_tokens(std::move(tokens));
}

std::vector<int> encode_words(const WordSequence& seq, const SubwordVocab& vocab) {
    std::vector<int> ids;
    for (const auto& w : seq.words) {
        std::vector<int> piece = subword_tokenize(w, vocab);
        ids.insert(ids.end(), piece.begin(), piece.end());
    }
    return ids;
}

} // namespace tapter
