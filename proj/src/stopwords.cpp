#include "tapter/text.hpp"

namespace tapter {

namespace {

// Fixed English stop-word list, version 1. Kept in sync with
// data/stopwords_en.txt; pinned so filtering stays reproducible.
const char* const kEnglishStopWords[] = {
    "a", "about", "above", "after", "again", "against", "all", "also", "although",
    "always", "am", "among", "an", "and", "any", "anyone", "anything", "are", "as",
    "at", "be", "became", "because", "become", "becomes", "been", "before", "being",
    "below", "between", "both", "but", "by", "can", "cannot", "could", "did", "do",
    "does", "doing", "don", "down", "during", "each", "either", "else", "ever",
    "every", "few", "for", "from", "further", "had", "has", "have", "having", "he",
    "her", "here", "hers", "herself", "him", "himself", "his", "how", "however",
    "i", "if", "in", "into", "is", "it", "its", "itself", "just", "may", "me",
    "might", "more", "most", "must", "my", "myself", "neither", "never", "no",
    "nor", "not", "now", "of", "off", "often", "on", "once", "only", "or", "other",
    "ought", "our", "ours", "ourselves", "out", "over", "own", "s", "same", "shall",
    "she", "should", "since", "so", "some", "sometimes", "still", "such", "t",
    "than", "that", "the", "their", "theirs", "them", "themselves", "then",
    "there", "these", "they", "this", "those", "though", "through", "thus", "to",
    "too", "under", "until", "up", "upon", "us", "very", "via", "was", "we",
    "were", "what", "when", "where", "whether", "which", "while", "who", "whom",
    "why", "will", "with", "within", "without", "would", "yet", "you", "your",
    "yours", "yourself", "yourselves",
};

} // namespace

StopWordList StopWordList::default_english() {
    StopWordList list;
    for (const char* w : kEnglishStopWords) list.words.insert(w);
    return list;
}

} // namespace tapter
