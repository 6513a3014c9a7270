#include "tapter/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace tapter {

SpanHead SpanHead::init(int d_lm, uint64_t seed) {
    SpanHead h;
    Rng rng(mix_seed(seed, "span_init"));
    h.w = Mat(d_lm, 2);
    h.w.fill_gauss(rng, 0.02);
    h.b = Mat(1, 2);
    return h;
}

// ---------------------------------------------------------------------------
// encoding
// ---------------------------------------------------------------------------

EncodedQa encode_qa(const QaExample& ex, const SubwordVocab& vocab, int max_len,
                    int max_query_len) {
    if (ex.question.empty()) throw std::invalid_argument("encode_qa: empty question");
    if (ex.passage.empty()) throw std::invalid_argument("encode_qa: empty passage");

    std::vector<int> q_ids;
    for (const auto& w : ex.question.words) {
        std::vector<int> piece = subword_tokenize(w, vocab);
        q_ids.insert(q_ids.end(), piece.begin(), piece.end());
        if (static_cast<int>(q_ids.size()) >= max_query_len) break;
    }
    if (static_cast<int>(q_ids.size()) > max_query_len) q_ids.resize(static_cast<size_t>(max_query_len));

    EncodedQa enc;
    enc.ids.push_back(vocab.cls_id);
    enc.ids.insert(enc.ids.end(), q_ids.begin(), q_ids.end());
    enc.ids.push_back(vocab.sep_id);
    enc.passage_begin = static_cast<int>(enc.ids.size());

    const int budget = max_len - enc.passage_begin - 1; // room for the final [SEP]
    if (budget <= 0) throw std::invalid_argument("encode_qa: max_len leaves no passage room");

    int used = 0;
    for (size_t wi = 0; wi < ex.passage.words.size(); ++wi) {
        std::vector<int> piece = subword_tokenize(ex.passage.words[wi], vocab);
        if (used + static_cast<int>(piece.size()) > budget) break;
        enc.word_tok.emplace_back(enc.passage_begin + used,
                                  enc.passage_begin + used + static_cast<int>(piece.size()));
        enc.words.push_back(ex.passage.words[wi]);
        enc.ids.insert(enc.ids.end(), piece.begin(), piece.end());
        used += static_cast<int>(piece.size());
    }
    enc.passage_end = static_cast<int>(enc.ids.size());
    enc.ids.push_back(vocab.sep_id);
    enc.attn.assign(enc.ids.size(), 1);

    enc.tok_word.assign(enc.ids.size(), -1);
    for (size_t wi = 0; wi < enc.word_tok.size(); ++wi)
        for (int t = enc.word_tok[wi].first; t < enc.word_tok[wi].second; ++t)
            enc.tok_word[static_cast<size_t>(t)] = static_cast<int>(wi);

    if (ex.answer_word_start >= 0 && ex.answer_word_end >= ex.answer_word_start &&
        ex.answer_word_end < static_cast<int>(enc.words.size())) {
        enc.gold_start = enc.word_tok[static_cast<size_t>(ex.answer_word_start)].first;
        enc.gold_end = enc.word_tok[static_cast<size_t>(ex.answer_word_end)].second - 1;
        enc.gold_in_window = true;
    }
    return enc;
}

std::string decode_span(const EncodedQa& enc, int tok_start, int tok_end) {
    const int ws = enc.tok_word[static_cast<size_t>(tok_start)];
    const int we = enc.tok_word[static_cast<size_t>(tok_end)];
    if (ws < 0 || we < 0) return {};
    std::string out;
    for (int w = ws; w <= we; ++w) {
        if (!out.empty()) out += ' ';
        out += enc.words[static_cast<size_t>(w)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// span logits and loss
// ---------------------------------------------------------------------------

SpanLogits span_logits_from_hidden(const Mat& hidden, const SpanHead& head) {
    if (hidden.cols != head.w.rows)
        throw std::invalid_argument("span_logits: hidden dim does not match head");
    SpanLogits out;
    out.start.assign(static_cast<size_t>(hidden.rows), 0.0);
    out.end.assign(static_cast<size_t>(hidden.rows), 0.0);
    for (int i = 0; i < hidden.rows; ++i) {
        const double* h = hidden.row(i);
        double s0 = head.b.at(0, 0), s1 = head.b.at(0, 1);
        for (int j = 0; j < hidden.cols; ++j) {
            s0 += h[j] * head.w.at(j, 0);
            s1 += h[j] * head.w.at(j, 1);
        }
        out.start[static_cast<size_t>(i)] = s0;
        out.end[static_cast<size_t>(i)] = s1;
    }
    return out;
}

SpanLogits span_logits(const LmModel& model, const SpanHead& head, const EncodedQa& enc) {
    ForwardCache fc = forward(model, enc.ids, enc.attn, {});
    return span_logits_from_hidden(fc.hidden, head);
}

namespace {

// cross entropy over the passage region only; returns loss and writes the
// softmax into probs (passage positions only, zero elsewhere)
double region_ce(const Vec& logits, int begin, int end, int target, Vec* probs) {
    double max_l = logits[static_cast<size_t>(begin)];
    for (int i = begin; i < end; ++i) max_l = std::max(max_l, logits[static_cast<size_t>(i)]);
    double denom = 0.0;
    for (int i = begin; i < end; ++i) denom += std::exp(logits[static_cast<size_t>(i)] - max_l);
    if (probs) {
        probs->assign(logits.size(), 0.0);
        for (int i = begin; i < end; ++i)
            (*probs)[static_cast<size_t>(i)] = std::exp(logits[static_cast<size_t>(i)] - max_l) / denom;
    }
    return std::log(denom) + max_l - logits[static_cast<size_t>(target)];
}

} // namespace

double qa_loss(const SpanLogits& logits, const EncodedQa& enc) {
    if (!enc.gold_in_window || enc.gold_start < enc.passage_begin ||
        enc.gold_end >= enc.passage_end)
        throw std::invalid_argument("qa_loss: gold span outside the passage region");
    const double ls = region_ce(logits.start, enc.passage_begin, enc.passage_end, enc.gold_start,
                                nullptr);
    const double le = region_ce(logits.end, enc.passage_begin, enc.passage_end, enc.gold_end,
                                nullptr);
    return 0.5 * (ls + le);
}

QaBack qa_loss_backward(const Mat& hidden, const SpanHead& head, const EncodedQa& enc) {
    SpanLogits logits = span_logits_from_hidden(hidden, head);
    if (!enc.gold_in_window || enc.gold_start < enc.passage_begin ||
        enc.gold_end >= enc.passage_end)
        throw std::invalid_argument("qa_loss_backward: gold span outside the passage region");
    Vec ps, pe;
    const double ls = region_ce(logits.start, enc.passage_begin, enc.passage_end, enc.gold_start, &ps);
    const double le = region_ce(logits.end, enc.passage_begin, enc.passage_end, enc.gold_end, &pe);

    QaBack back;
    back.loss = 0.5 * (ls + le);
    back.dhidden = Mat(hidden.rows, hidden.cols);
    back.dw = Mat(head.w.rows, 2);
    back.db = Mat(1, 2);
    // d loss / d logit = 0.5 * (softmax - onehot) per side
    ps[static_cast<size_t>(enc.gold_start)] -= 1.0;
    pe[static_cast<size_t>(enc.gold_end)] -= 1.0;
    for (int i = enc.passage_begin; i < enc.passage_end; ++i) {
        const double g0 = 0.5 * ps[static_cast<size_t>(i)];
        const double g1 = 0.5 * pe[static_cast<size_t>(i)];
        const double* h = hidden.row(i);
        double* dh = back.dhidden.row(i);
        for (int j = 0; j < hidden.cols; ++j) {
            dh[j] += g0 * head.w.at(j, 0) + g1 * head.w.at(j, 1);
            back.dw.at(j, 0) += g0 * h[j];
            back.dw.at(j, 1) += g1 * h[j];
        }
        back.db.at(0, 0) += g0;
        back.db.at(0, 1) += g1;
    }
    return back;
}

// ---------------------------------------------------------------------------
// top-k decoding
// ---------------------------------------------------------------------------

RankedPrediction predict_topk(const SpanLogits& logits, const EncodedQa& enc, int k,
                              int max_answer_len) {
    if (k < 1) throw std::invalid_argument("predict_topk: k must be >= 1");
    std::vector<ScoredSpan> all;
    for (int s = enc.passage_begin; s < enc.passage_end; ++s) {
        const int last = std::min(enc.passage_end - 1, s + max_answer_len - 1);
        for (int e = s; e <= last; ++e)
            all.push_back({s, e, logits.start[static_cast<size_t>(s)] +
                                     logits.end[static_cast<size_t>(e)]});
    }
    std::sort(all.begin(), all.end(), [](const ScoredSpan& a, const ScoredSpan& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.start != b.start) return a.start < b.start;
        return (a.end - a.start) < (b.end - b.start);
    });

    RankedPrediction out;
    std::unordered_set<std::string> seen;
    for (const auto& span : all) {
        if (static_cast<int>(out.spans.size()) >= k) break;
        std::string text = decode_span(enc, span.start, span.end);
        if (!seen.insert(text).second) continue;
        out.spans.push_back(span);
        out.texts.push_back(std::move(text));
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

std::string normalize_answer(std::string_view s) {
    static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
    std::string lowered = ascii_lower(s);
    std::string stripped;
    for (char c : lowered)
        if (punct.find(c) == std::string::npos) stripped += c;
    std::istringstream ss(stripped);
    std::string tok, out;
    while (ss >> tok) {
        if (tok == "a" || tok == "an" || tok == "the") continue;
        if (!out.empty()) out += ' ';
        out += tok;
    }
    return out;
}

namespace {

std::vector<std::string> normalized_tokens(std::string_view s) {
    std::istringstream ss(normalize_answer(s));
    std::vector<std::string> toks;
    std::string t;
    while (ss >> t) toks.push_back(t);
    return toks;
}

} // namespace

int metric_em(std::string_view pred, std::string_view gold) {
    return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

double metric_f1(std::string_view pred, std::string_view gold) {
    std::vector<std::string> p = normalized_tokens(pred);
    std::vector<std::string> g = normalized_tokens(gold);
    if (p.empty() && g.empty()) return 1.0;
    if (p.empty() || g.empty()) return 0.0;
    std::map<std::string, int> gc;
    for (const auto& t : g) ++gc[t];
    int overlap = 0;
    for (const auto& t : p) {
        auto it = gc.find(t);
        if (it != gc.end() && it->second > 0) {
            ++overlap;
            --it->second;
        }
    }
    if (overlap == 0) return 0.0;
    const double precision = static_cast<double>(overlap) / static_cast<double>(p.size());
    const double recall = static_cast<double>(overlap) / static_cast<double>(g.size());
    return 2.0 * precision * recall / (precision + recall);
}

namespace {

// 1-based rank of the first correct prediction within the top 5, or 0
int correct_rank(const RankedPrediction& pred, const std::string& gold) {
    const std::string ng = normalize_answer(gold);
    const int limit = std::min<int>(5, static_cast<int>(pred.texts.size()));
    for (int i = 0; i < limit; ++i)
        if (normalize_answer(pred.texts[static_cast<size_t>(i)]) == ng) return i + 1;
    return 0;
}

void check_sizes(const std::vector<RankedPrediction>& preds,
                 const std::vector<std::string>& golds) {
    if (preds.size() != golds.size())
        throw std::invalid_argument("rank metrics: prediction/gold count mismatch");
    if (preds.empty()) throw std::invalid_argument("rank metrics: no questions");
}

} // namespace

double metric_sacc(const std::vector<RankedPrediction>& preds,
                   const std::vector<std::string>& golds) {
    check_sizes(preds, golds);
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (correct_rank(preds[i], golds[i]) == 1) acc += 1.0;
    return acc / static_cast<double>(preds.size());
}

double metric_lacc(const std::vector<RankedPrediction>& preds,
                   const std::vector<std::string>& golds) {
    check_sizes(preds, golds);
    double acc = 0.0;
    for (size_t i = 0; i < preds.size(); ++i)
        if (correct_rank(preds[i], golds[i]) > 0) acc += 1.0;
    return acc / static_cast<double>(preds.size());
}

double metric_mrr(const std::vector<RankedPrediction>& preds,
                  const std::vector<std::string>& golds) {
    check_sizes(preds, golds);
    double total = 0.0;
    for (size_t i = 0; i < preds.size(); ++i) {
        const int rank = correct_rank(preds[i], golds[i]);
        if (rank > 0) total += 1.0 / static_cast<double>(rank);
    }
    return total / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// fine-tuning loop
// ---------------------------------------------------------------------------

EvalReport evaluate_qa(const LmModel& model, const SpanHead& head,
                       const std::vector<QaExample>& examples, const SubwordVocab& vocab,
                       const FinetuneConfig& cfg, std::vector<RankedPrediction>* out_preds) {
    if (examples.empty()) throw std::invalid_argument("evaluate_qa: no examples");
    std::vector<RankedPrediction> preds;
    std::vector<std::string> golds;
    double em = 0.0, f1 = 0.0;
    for (const auto& ex : examples) {
        EncodedQa enc = encode_qa(ex, vocab, cfg.max_len, cfg.max_query_len);
        SpanLogits logits = span_logits(model, head, enc);
        RankedPrediction pred = predict_topk(logits, enc, cfg.top_k, cfg.max_answer_len);
        const std::string top1 = pred.texts.empty() ? std::string{} : pred.texts.front();
        em += metric_em(top1, ex.answer_text);
        f1 += metric_f1(top1, ex.answer_text);
        preds.push_back(std::move(pred));
        golds.push_back(ex.answer_text);
    }
    EvalReport r;
    r.n = static_cast<int>(examples.size());
    r.em = em / r.n;
    r.f1 = f1 / r.n;
    r.sacc = metric_sacc(preds, golds);
    r.lacc = metric_lacc(preds, golds);
    r.mrr = metric_mrr(preds, golds);
    if (out_preds) *out_preds = std::move(preds);
    return r;
}

FinetuneResult finetune(LmModel& model, SpanHead& head, const std::vector<QaExample>& train,
                        const std::vector<QaExample>* dev, const SubwordVocab& vocab,
                        const FinetuneConfig& cfg) {
    if (train.empty()) throw std::invalid_argument("finetune: empty dataset");

    std::vector<EncodedQa> encoded;
    for (const auto& ex : train) {
        EncodedQa enc = encode_qa(ex, vocab, cfg.max_len, cfg.max_query_len);
        if (enc.gold_in_window) encoded.push_back(std::move(enc));
    }
    if (encoded.empty())
        throw std::runtime_error("finetune: no training example has its answer in the window");

    const size_t n = encoded.size();
    const long long batches_per_epoch = static_cast<long long>(
        (n + static_cast<size_t>(cfg.batch_size) - 1) / static_cast<size_t>(cfg.batch_size));
    const long long total_steps = batches_per_epoch * cfg.epochs;

    auto params = param_views(model);
    std::vector<ParamView> all_params = params;
    all_params.push_back({"span.w", &head.w, true});
    all_params.push_back({"span.b", &head.b, false});
    OptimizerState opt = OptimizerState::init(all_params, cfg.lr, cfg.warmup_proportion,
                                              cfg.weight_decay, total_steps);

    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;

    FinetuneResult result;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "ft_shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        long long epoch_batches = 0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(stop - start);
            LmGrads grads = zero_grads(model);
            Mat dw(head.w.rows, 2), db(1, 2);
            double batch_loss = 0.0;
            for (size_t bi = start; bi < stop; ++bi) {
                const EncodedQa& enc = encoded[order[bi]];
                ForwardCache fc = forward(model, enc.ids, enc.attn, {});
                QaBack back = qa_loss_backward(fc.hidden, head, enc);
                batch_loss += back.loss;
                for (double& v : back.dhidden.a) v *= inv_b;
                backward(model, fc, Mat(), back.dhidden, grads);
                for (size_t t = 0; t < dw.a.size(); ++t) dw.a[t] += inv_b * back.dw.a[t];
                for (size_t t = 0; t < db.a.size(); ++t) db.a[t] += inv_b * back.db.a[t];
            }
            auto grad_views = param_views(grads);
            std::vector<ParamView> all_grads = grad_views;
            all_grads.push_back({"span.w", &dw, true});
            all_grads.push_back({"span.b", &db, false});
            adam_step(all_params, all_grads, opt);
            epoch_loss += batch_loss * inv_b;
            ++epoch_batches;
        }
        FinetuneTraceRow row;
        row.epoch = epoch;
        row.train_loss = epoch_loss / static_cast<double>(epoch_batches);
        if (dev && !dev->empty()) {
            row.has_dev = true;
            row.dev = evaluate_qa(model, head, *dev, vocab, cfg);
        }
        result.trace.push_back(row);
    }
    return result;
}

} // namespace tapter
