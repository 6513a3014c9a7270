#include "tapter/fasttext.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tapter {

std::vector<std::string> char_ngrams(std::string_view word, int min_n, int max_n) {
    std::vector<std::string> out;
    if (word.empty()) return out;
    std::vector<std::string> chars = utf8_chars(word);
    std::vector<std::string> padded;
    padded.reserve(chars.size() + 2);
    padded.emplace_back("<");
    for (auto& c : chars) padded.push_back(std::move(c));
    padded.emplace_back(">");
    const int n = static_cast<int>(padded.size());

    std::unordered_set<std::string> seen;
    for (int len = min_n; len <= max_n && len <= n; ++len) {
        for (int start = 0; start + len <= n; ++start) {
            std::string gram;
            for (int k = 0; k < len; ++k) gram += padded[static_cast<size_t>(start + k)];
            if (seen.insert(gram).second) out.push_back(std::move(gram));
        }
    }
    return out;
}

uint32_t hash_subword(std::string_view s, uint32_t bucket_count) {
    return fnv1a32(s) % bucket_count;
}

namespace {

std::vector<int> ngram_rows(const SubwordModel& model, std::string_view word) {
    std::vector<int> rows;
    for (const auto& g : char_ngrams(word, model.min_n, model.max_n))
        rows.push_back(static_cast<int>(
            hash_subword(g, static_cast<uint32_t>(model.bucket_count))));
    return rows;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + e^x) without overflow
inline double log1p_exp(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

} // namespace

ScoreResult score(const SubwordModel& model, std::string_view input_word, int output_word_id) {
    if (output_word_id < 0 || output_word_id >= model.vocab_size())
        throw std::out_of_range("score: output word id out of range");
    std::vector<int> rows = ngram_rows(model, input_word);
    ScoreResult r;
    r.has_subwords = !rows.empty();
    const double* out_row = model.w_out.row(output_word_id);
    for (int row : rows) r.value += dot(model.w_in.row(row), out_row, model.dim);
    return r;
}

WordVector word_vector(const SubwordModel& model, std::string_view word) {
    WordVector wv;
    wv.v.assign(static_cast<size_t>(model.dim), 0.0);
    std::vector<int> rows = ngram_rows(model, word);
    if (rows.empty()) return wv;
    wv.valid = true;
    for (int row : rows) {
        const double* r = model.w_in.row(row);
        for (int j = 0; j < model.dim; ++j) wv.v[static_cast<size_t>(j)] += r[j];
    }
    return wv;
}

// ---------------------------------------------------------------------------
// model construction
// ---------------------------------------------------------------------------

SubwordModel make_subword_model(const WordSequence& corpus, const FastTextConfig& cfg,
                                const VectorFile* warm) {
    if (cfg.min_n < 1 || cfg.min_n > cfg.max_n)
        throw std::invalid_argument("fasttext: need 1 <= min_n <= max_n");
    if (cfg.bucket_count <= 0) throw std::invalid_argument("fasttext: bucket_count must be > 0");
    if (cfg.lr <= 0.0) throw std::invalid_argument("fasttext: lr must be > 0");
    if (cfg.window < 1 || cfg.negatives < 1)
        throw std::invalid_argument("fasttext: window and negatives must be >= 1");

    std::unordered_map<std::string, long long> counts;
    for (const auto& w : corpus.words) ++counts[w];

    std::vector<std::pair<std::string, long long>> kept;
    for (const auto& [w, c] : counts)
        if (c >= cfg.min_count) kept.emplace_back(w, c);
    if (kept.empty())
        throw std::runtime_error("fasttext: no words reach min_count " +
                                 std::to_string(cfg.min_count));
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    SubwordModel m;
    m.dim = cfg.dim;
    m.min_n = cfg.min_n;
    m.max_n = cfg.max_n;
    m.bucket_count = cfg.bucket_count;
    for (const auto& [w, c] : kept) {
        m.word_id.emplace(w, static_cast<int>(m.words.size()));
        m.words.push_back(w);
        m.word_freq.push_back(c);
    }

    if (warm && warm->dim != cfg.dim)
        throw std::runtime_error("fasttext: pretrained vector dim " +
                                 std::to_string(warm->dim) + " != configured dim " +
                                 std::to_string(cfg.dim));

    Rng rng(mix_seed(cfg.seed, "ft_init"));
    const double bound = 1.0 / static_cast<double>(cfg.dim);
    m.w_in = Mat(cfg.bucket_count, cfg.dim);
    m.w_in.fill_uniform(rng, -bound, bound);
    m.w_out = Mat(m.vocab_size(), cfg.dim);

    std::unordered_map<std::string, int> warm_idx;
    if (warm)
        for (size_t i = 0; i < warm->words.size(); ++i)
            warm_idx.emplace(warm->words[i], static_cast<int>(i));
    for (int i = 0; i < m.vocab_size(); ++i) {
        if (warm) {
            auto it = warm_idx.find(m.words[static_cast<size_t>(i)]);
            if (it != warm_idx.end()) {
                const Vec& src = warm->vectors[static_cast<size_t>(it->second)];
                std::copy(src.begin(), src.end(), m.w_out.row(i));
                continue;
            }
            for (int j = 0; j < cfg.dim; ++j) m.w_out.at(i, j) = rng.uniform(-bound, bound);
        }
        // fresh models keep w_out at zero
    }
    return m;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

SkipgramTrace skipgram_train(SubwordModel& model, const WordSequence& corpus,
                             const FastTextConfig& cfg) {
    // corpus positions restricted to in-vocabulary words
    std::vector<int> stream;
    stream.reserve(corpus.words.size());
    for (const auto& w : corpus.words) {
        auto it = model.word_id.find(w);
        if (it != model.word_id.end()) stream.push_back(it->second);
    }
    if (stream.empty()) throw std::runtime_error("fasttext: empty training stream");

    // per-word hashed n-gram rows, computed once
    std::vector<std::vector<int>> word_rows(static_cast<size_t>(model.vocab_size()));
    for (int i = 0; i < model.vocab_size(); ++i)
        word_rows[static_cast<size_t>(i)] = ngram_rows(model, model.words[static_cast<size_t>(i)]);

    // unigram^(3/4) cumulative table for negative sampling
    std::vector<double> cum(static_cast<size_t>(model.vocab_size()));
    double total = 0.0;
    for (int i = 0; i < model.vocab_size(); ++i) {
        total += std::pow(static_cast<double>(model.word_freq[static_cast<size_t>(i)]), 0.75);
        cum[static_cast<size_t>(i)] = total;
    }
    auto draw_negative = [&](Rng& rng) {
        double u = rng.next_double() * total;
        auto it = std::lower_bound(cum.begin(), cum.end(), u);
        if (it == cum.end()) --it;
        return static_cast<int>(it - cum.begin());
    };

    const int n = static_cast<int>(stream.size());
    long long pairs_per_epoch = 0;
    for (int i = 0; i < n; ++i) {
        int lo = std::max(0, i - cfg.window);
        int hi = std::min(n - 1, i + cfg.window);
        pairs_per_epoch += (hi - lo); // window positions excluding i itself
    }
    const long long total_pairs = pairs_per_epoch * cfg.epochs;
    const bool can_sample_negatives = model.vocab_size() > 1;

    SkipgramTrace trace;
    Rng rng(mix_seed(cfg.seed, "ft_train"));
    Vec in_grad(static_cast<size_t>(model.dim));
    long long processed = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        long long loss_pairs = 0;
        for (int i = 0; i < n; ++i) {
            const int center = stream[static_cast<size_t>(i)];
            const std::vector<int>& rows = word_rows[static_cast<size_t>(center)];
            int lo = std::max(0, i - cfg.window);
            int hi = std::min(n - 1, i + cfg.window);
            for (int j = lo; j <= hi; ++j) {
                if (j == i) continue;
                const double lr =
                    cfg.lr * (1.0 - static_cast<double>(processed) / static_cast<double>(total_pairs));
                ++processed;
                double pair_loss = 0.0;
                std::fill(in_grad.begin(), in_grad.end(), 0.0);

                // positive target plus sampled negatives
                const int positive = stream[static_cast<size_t>(j)];
                for (int k = 0; k <= (can_sample_negatives ? cfg.negatives : 0); ++k) {
                    int target;
                    double label;
                    if (k == 0) {
                        target = positive;
                        label = 1.0;
                    } else {
                        do {
                            target = draw_negative(rng);
                        } while (target == positive);
                        label = 0.0;
                    }
                    double s = 0.0;
                    const double* out_row = model.w_out.row(target);
                    for (int row : rows) s += dot(model.w_in.row(row), out_row, model.dim);
                    pair_loss += (label > 0.5) ? log1p_exp(-s) : log1p_exp(s);
                    const double g = sigmoid(s) - label; // d loss / d s
                    // accumulate input-side gradient, update output row
                    double* out_mut = model.w_out.row(target);
                    for (int d = 0; d < model.dim; ++d) {
                        in_grad[static_cast<size_t>(d)] += g * out_mut[d];
                    }
                    // d s / d w_out = sum of input rows
                    for (int row : rows) {
                        const double* in_row = model.w_in.row(row);
                        for (int d = 0; d < model.dim; ++d)
                            out_mut[d] -= lr * g * in_row[d];
                    }
                }
                for (int row : rows) {
                    double* in_row = model.w_in.row(row);
                    for (int d = 0; d < model.dim; ++d)
                        in_row[d] -= lr * in_grad[static_cast<size_t>(d)];
                }
                loss_sum += pair_loss;
                ++loss_pairs;
            }
        }
        trace.epoch_loss.push_back(loss_pairs > 0 ? loss_sum / static_cast<double>(loss_pairs)
                                                  : 0.0);
    }
    return trace;
}

// ---------------------------------------------------------------------------
// target table inference
// ---------------------------------------------------------------------------

TargetEmbeddingTable infer_vocab_embeddings(const SubwordModel& model, const SubwordVocab& vocab) {
    TargetEmbeddingTable table;
    table.f = Mat(vocab.size(), model.dim);
    table.valid.assign(static_cast<size_t>(vocab.size()), 0);
    for (int id = 0; id < vocab.size(); ++id) {
        if (vocab.is_special(id)) continue;
        std::string surface = vocab.demarked(id);
        if (static_cast<int>(utf8_len(surface)) < model.min_n) continue;
        WordVector wv = word_vector(model, surface);
        if (!wv.valid) continue;
        std::copy(wv.v.begin(), wv.v.end(), table.f.row(id));
        table.valid[static_cast<size_t>(id)] = 1;
    }
    return table;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

VectorFile load_vector_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vector file: " + path);
    VectorFile vf;
    std::string line;
    long long declared_count = -1;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        std::istringstream ss(line);
        if (line_no == 1) {
            // optional "count dim" header: exactly two integer fields
            long long a = 0, b = 0;
            std::istringstream probe(line);
            std::string f1, f2, rest;
            probe >> f1 >> f2;
            if (!(probe >> rest)) {
                try {
                    size_t p1 = 0, p2 = 0;
                    a = std::stoll(f1, &p1);
                    b = std::stoll(f2, &p2);
                    if (p1 == f1.size() && p2 == f2.size() && a >= 0 && b > 0) {
                        declared_count = a;
                        vf.dim = static_cast<int>(b);
                        continue;
                    }
                } catch (...) {
                }
            }
        }
        std::string word;
        ss >> word;
        Vec values;
        double v;
        while (ss >> v) values.push_back(v);
        if (word.empty() || values.empty())
            throw std::runtime_error("vector file " + path + ": malformed line " +
                                     std::to_string(line_no));
        if (vf.dim == 0) vf.dim = static_cast<int>(values.size());
        if (static_cast<int>(values.size()) != vf.dim)
            throw std::runtime_error("vector file " + path + ": dimension mismatch at line " +
                                     std::to_string(line_no) + " (expected " +
                                     std::to_string(vf.dim) + ", got " +
                                     std::to_string(values.size()) + ")");
        vf.words.push_back(word);
        vf.vectors.push_back(std::move(values));
    }
    if (declared_count >= 0 && declared_count != static_cast<long long>(vf.words.size()))
        throw std::runtime_error("vector file " + path + ": header count " +
                                 std::to_string(declared_count) + " != rows " +
                                 std::to_string(vf.words.size()));
    return vf;
}

SubwordModel load_pretrained_vectors(const std::string& path, const WordSequence& corpus,
                                     const FastTextConfig& cfg) {
    VectorFile vf = load_vector_file(path);
    return make_subword_model(corpus, cfg, &vf);
}

void save_vectors(const SubwordModel& model, const std::string& path) {
    std::ostringstream out;
    out << model.vocab_size() << ' ' << model.dim << '\n';
    for (int i = 0; i < model.vocab_size(); ++i) {
        out << model.words[static_cast<size_t>(i)];
        const double* row = model.w_out.row(i);
        for (int j = 0; j < model.dim; ++j) out << ' ' << format_double(row[j]);
        out << '\n';
    }
    write_text_file(path, out.str());
}

void save_subword_model(const SubwordModel& model, const std::string& path) {
    TensorFile tf;
    tf.meta.emplace_back("kind", "fasttext");
    tf.meta.emplace_back("dim", std::to_string(model.dim));
    tf.meta.emplace_back("min_n", std::to_string(model.min_n));
    tf.meta.emplace_back("max_n", std::to_string(model.max_n));
    tf.meta.emplace_back("bucket_count", std::to_string(model.bucket_count));
    std::ostringstream words, freqs;
    for (int i = 0; i < model.vocab_size(); ++i) {
        if (i) {
            words << '\n';
            freqs << ' ';
        }
        words << model.words[static_cast<size_t>(i)];
        freqs << model.word_freq[static_cast<size_t>(i)];
    }
    tf.meta.emplace_back("words", words.str());
    tf.meta.emplace_back("freqs", freqs.str());
    tf.tensors.emplace_back("w_in", model.w_in);
    tf.tensors.emplace_back("w_out", model.w_out);
    save_tensor_file(tf, path);
}

SubwordModel load_subword_model(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    const std::string* kind = tf.find_meta("kind");
    if (!kind || *kind != "fasttext")
        throw std::runtime_error("not a fasttext model file: " + path);
    SubwordModel m;
    m.dim = std::stoi(*tf.find_meta("dim"));
    m.min_n = std::stoi(*tf.find_meta("min_n"));
    m.max_n = std::stoi(*tf.find_meta("max_n"));
    m.bucket_count = std::stoi(*tf.find_meta("bucket_count"));
    {
        std::istringstream ws(*tf.find_meta("words"));
        std::string w;
        while (std::getline(ws, w))
            if (!w.empty()) {
                m.word_id.emplace(w, static_cast<int>(m.words.size()));
                m.words.push_back(w);
            }
        std::istringstream fs(*tf.find_meta("freqs"));
        long long f;
        while (fs >> f) m.word_freq.push_back(f);
    }
    if (m.word_freq.size() != m.words.size())
        throw std::runtime_error("corrupt fasttext model file: " + path);
    m.w_in = *tf.find_tensor("w_in");
    m.w_out = *tf.find_tensor("w_out");
    if (m.w_out.rows != m.vocab_size() || m.w_in.rows != m.bucket_count)
        throw std::runtime_error("corrupt fasttext model file: " + path);
    return m;
}

void save_embedding_table(const TargetEmbeddingTable& table, const SubwordVocab& vocab,
                          const std::string& path) {
    int n_valid = 0;
    for (uint8_t v : table.valid) n_valid += v;
    std::ostringstream out;
    out << n_valid << ' ' << table.f.cols << '\n';
    for (int id = 0; id < table.rows(); ++id) {
        if (!table.valid[static_cast<size_t>(id)]) continue;
        out << vocab.token(id);
        const double* row = table.f.row(id);
        for (int j = 0; j < table.f.cols; ++j) out << ' ' << format_double(row[j]);
        out << '\n';
    }
    write_text_file(path, out.str());
}

TargetEmbeddingTable load_embedding_table(const std::string& path, const SubwordVocab& vocab) {
    VectorFile vf = load_vector_file(path);
    TargetEmbeddingTable table;
    table.f = Mat(vocab.size(), vf.dim);
    table.valid.assign(static_cast<size_t>(vocab.size()), 0);
    for (size_t i = 0; i < vf.words.size(); ++i) {
        auto it = vocab.id_of.find(vf.words[i]);
        if (it == vocab.id_of.end())
            throw std::runtime_error("embedding table " + path + ": token not in vocab: " +
                                     vf.words[i]);
        std::copy(vf.vectors[i].begin(), vf.vectors[i].end(), table.f.row(it->second));
        table.valid[static_cast<size_t>(it->second)] = 1;
    }
    return table;
}

} // namespace tapter
