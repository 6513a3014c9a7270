// Span-extraction QA: encoding, span head, top-k decoding, the fine-tuning
// loop, and the evaluation metrics (EM, F1, strict/lenient accuracy, MRR).
#pragma once

#include "tapter/mlm.hpp"

namespace tapter {

struct QaExample {
    std::string id;
    WordSequence question;
    WordSequence passage;
    std::string answer_text;
    int answer_word_start{-1}; // inclusive word indices into passage
    int answer_word_end{-1};
};

struct SpanHead {
    Mat w; // d_lm x 2, column 0 scores starts, column 1 scores ends
    Mat b; // 1 x 2
    static SpanHead init(int d_lm, uint64_t seed);
};

struct EncodedQa {
    std::vector<int> ids; // [CLS] question [SEP] passage [SEP]
    std::vector<uint8_t> attn;
    int passage_begin{0}; // token range [begin, end)
    int passage_end{0};
    std::vector<int> tok_word;                 // token -> kept passage word index, -1 outside
    std::vector<std::pair<int, int>> word_tok; // kept word -> [tok begin, tok end)
    std::vector<std::string> words;            // kept passage words
    int gold_start{-1}; // inclusive token span of the answer
    int gold_end{-1};
    bool gold_in_window{false};
};

// Truncates the question to max_query_len tokens and fits whole passage
// words into max_len (single window from the passage start). The gold word
// span maps to a token span; if truncated away the example stays usable for
// evaluation but carries gold_in_window = false.
EncodedQa encode_qa(const QaExample& ex, const SubwordVocab& vocab, int max_len,
                    int max_query_len);

// Decodes a token span to text: expand to word boundaries, join with spaces.
std::string decode_span(const EncodedQa& enc, int tok_start, int tok_end);

struct SpanLogits {
    Vec start, end; // one entry per token
};

SpanLogits span_logits_from_hidden(const Mat& hidden, const SpanHead& head);
// Convenience: runs the encoder forward first.
SpanLogits span_logits(const LmModel& model, const SpanHead& head, const EncodedQa& enc);

// Mean of the start and end cross entropies, each over the passage region.
double qa_loss(const SpanLogits& logits, const EncodedQa& enc);

struct QaBack {
    double loss{0.0};
    Mat dhidden; // l x d
    Mat dw;      // d x 2
    Mat db;      // 1 x 2
};
QaBack qa_loss_backward(const Mat& hidden, const SpanHead& head, const EncodedQa& enc);

struct ScoredSpan {
    int start{0};
    int end{0};
    double score{0.0};
};

struct RankedPrediction {
    std::vector<ScoredSpan> spans; // descending score
    std::vector<std::string> texts;
};

// Ranks spans within the passage region with end - start < max_answer_len by
// start_logit + end_logit; ties prefer the earlier start then the shorter
// span; duplicate decoded texts keep the highest-scoring span.
RankedPrediction predict_topk(const SpanLogits& logits, const EncodedQa& enc, int k,
                              int max_answer_len);

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

// Lowercase, strip punctuation and the articles a/an/the, collapse whitespace.
std::string normalize_answer(std::string_view s);
int metric_em(std::string_view pred, std::string_view gold);
double metric_f1(std::string_view pred, std::string_view gold);

double metric_sacc(const std::vector<RankedPrediction>& preds,
                   const std::vector<std::string>& golds);
double metric_lacc(const std::vector<RankedPrediction>& preds,
                   const std::vector<std::string>& golds);
double metric_mrr(const std::vector<RankedPrediction>& preds,
                  const std::vector<std::string>& golds);

// ---------------------------------------------------------------------------
// fine-tuning
// ---------------------------------------------------------------------------

struct FinetuneConfig {
    int epochs{3};
    int batch_size{8};
    double lr{5e-5};
    double warmup_proportion{0.06};
    double weight_decay{0.01};
    int max_len{128};
    int max_query_len{64};
    int max_answer_len{30};
    int top_k{5};
    uint64_t seed{0};
};

struct EvalReport {
    double em{0.0}, f1{0.0}, sacc{0.0}, lacc{0.0}, mrr{0.0};
    int n{0};
};

struct FinetuneTraceRow {
    int epoch{0};
    double train_loss{0.0};
    bool has_dev{false};
    EvalReport dev;
};

struct FinetuneResult {
    std::vector<FinetuneTraceRow> trace;
};

// Optimizes qa_loss over all model parameters plus the span head. Examples
// whose gold span fell outside the window are skipped for training.
FinetuneResult finetune(LmModel& model, SpanHead& head, const std::vector<QaExample>& train,
                        const std::vector<QaExample>* dev, const SubwordVocab& vocab,
                        const FinetuneConfig& cfg);

EvalReport evaluate_qa(const LmModel& model, const SpanHead& head,
                       const std::vector<QaExample>& examples, const SubwordVocab& vocab,
                       const FinetuneConfig& cfg,
                       std::vector<RankedPrediction>* out_preds = nullptr);

} // namespace tapter
