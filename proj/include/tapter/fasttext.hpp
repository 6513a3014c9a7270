// Subword-hashing skipgram embeddings: negative-sampling training, word
// vector inference, and inference of target embeddings for an LM vocabulary.
#pragma once

#include "tapter/common.hpp"
#include "tapter/text.hpp"

namespace tapter {

struct FastTextConfig {
    int dim{50};          // reference setups use 300; desk scale defaults to 50
    int window{5};
    int negatives{5};
    double lr{0.05};
    int epochs{5};
    int min_count{5};
    int min_n{3};
    int max_n{6};
    int bucket_count{100000};
    uint64_t seed{1};
};

struct SubwordModel {
    Mat w_in;   // bucket_count x dim, hashed n-gram input embeddings
    Mat w_out;  // |words| x dim, output word embeddings

    std::vector<std::string> words;              // id -> word
    std::unordered_map<std::string, int> word_id;
    std::vector<long long> word_freq;

    int min_n{3};
    int max_n{6};
    int bucket_count{0};
    int dim{0};

    int vocab_size() const { return static_cast<int>(words.size()); }
};

// All contiguous substrings of "<word>" with code-point length in
// [min_n, max_n], ordered shorter-first then left-to-right, duplicates kept
// once. An empty list when the padded word is shorter than min_n.
std::vector<std::string> char_ngrams(std::string_view word, int min_n, int max_n);

// 32-bit FNV-1a over the UTF-8 bytes, reduced modulo bucket_count.
uint32_t hash_subword(std::string_view s, uint32_t bucket_count);

struct ScoreResult {
    double value{0.0};
    bool has_subwords{false}; // false when the word yields no n-grams
};
ScoreResult score(const SubwordModel& model, std::string_view input_word, int output_word_id);

struct WordVector {
    Vec v;
    bool valid{false};
};
WordVector word_vector(const SubwordModel& model, std::string_view word);

// Text vector file: optional first line "count dim", then one word and dim
// space-separated decimals per line.
struct VectorFile {
    int dim{0};
    std::vector<std::string> words;
    std::vector<Vec> vectors;
};
VectorFile load_vector_file(const std::string& path);

// Builds the word vocabulary (frequency >= min_count, ordered by descending
// frequency then lexicographically) and initializes the matrices. When warm
// is given, w_out rows of known words are copied from it; other w_out rows
// and all of w_in are drawn uniformly from [-1/dim, 1/dim].
SubwordModel make_subword_model(const WordSequence& corpus, const FastTextConfig& cfg,
                                const VectorFile* warm = nullptr);

SubwordModel load_pretrained_vectors(const std::string& path, const WordSequence& corpus,
                                     const FastTextConfig& cfg);
void save_vectors(const SubwordModel& model, const std::string& path);

// Binary round trip of the full model (w_in included) for pipeline stages.
void save_subword_model(const SubwordModel& model, const std::string& path);
SubwordModel load_subword_model(const std::string& path);

struct SkipgramTrace {
    std::vector<double> epoch_loss; // mean per-pair loss, one entry per epoch
};

// SGD with negative sampling over every (position, window context) pair.
// Deterministic under cfg.seed; learning rate decays linearly to zero.
SkipgramTrace skipgram_train(SubwordModel& model, const WordSequence& corpus,
                             const FastTextConfig& cfg);

struct TargetEmbeddingTable {
    Mat f;                      // |LM vocab| x dim
    std::vector<uint8_t> valid; // false for specials and too-short surfaces

    int rows() const { return f.rows; }
};

// Per LM token: strip the continuation marker and infer a word vector.
// Specials and surfaces shorter than min_n code points are marked invalid.
TargetEmbeddingTable infer_vocab_embeddings(const SubwordModel& model, const SubwordVocab& vocab);

// Table artifact: vectors-file format keyed by LM token, invalid rows omitted.
void save_embedding_table(const TargetEmbeddingTable& table, const SubwordVocab& vocab,
                          const std::string& path);
TargetEmbeddingTable load_embedding_table(const std::string& path, const SubwordVocab& vocab);

} // namespace tapter
