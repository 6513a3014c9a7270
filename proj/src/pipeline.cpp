#include "tapter/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <unistd.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tapter {

// ---------------------------------------------------------------------------
// synthetic world
// ---------------------------------------------------------------------------

namespace {

const char* kConsonants[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
const char* kVowels[] = {"a", "e", "i", "o", "u"};

std::string make_syllable(Rng& rng) {
    std::string s = kConsonants[rng.next_below(14)];
    s += kVowels[rng.next_below(5)];
    return s;
}

struct WordFactory {
    Rng* rng;
    std::unordered_set<std::string> used;
    StopWordList stopwords = StopWordList::default_english();

    std::string fresh(int min_syll, int max_syll, const std::string& suffix = {}) {
        for (int attempt = 0; attempt < 10000; ++attempt) {
            const int n = min_syll + static_cast<int>(
                rng->next_below(static_cast<uint32_t>(max_syll - min_syll + 1)));
            std::string w;
            for (int i = 0; i < n; ++i) w += make_syllable(*rng);
            w += suffix;
            if (is_stopword(w, stopwords)) continue;
            if (used.insert(w).second) return w;
        }
        throw std::runtime_error("word factory exhausted");
    }
};

struct Sentence {
    std::vector<std::string> words;
};

void push_sentence(std::vector<Sentence>& out, std::initializer_list<std::string> words) {
    Sentence s;
    s.words.assign(words.begin(), words.end());
    out.push_back(std::move(s));
}

std::string sentences_to_text(const std::vector<Sentence>& sents) {
    std::string text;
    for (const auto& s : sents) {
        for (const auto& w : s.words) {
            if (!text.empty()) text += ' ';
            text += w;
        }
    }
    return text;
}

struct DomainWorld {
    std::vector<std::string> suffixes;
    std::vector<std::vector<std::string>> train_terms; // per category
    std::vector<std::vector<std::string>> dev_terms;
    std::vector<std::string> catnouns;
    std::vector<std::string> subjects;
    std::vector<std::string> verbs;
};

// A fact sentence: "the <subj> <verb> the <objA> and the <objB> ."
Sentence fact_sentence(const std::string& subj, const std::string& verb, const std::string& obj_a,
                       const std::string& obj_b) {
    Sentence s;
    s.words = {"the", subj, verb, "the", obj_a, "and", "the", obj_b, "."};
    return s;
}

} // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    if (spec.general_words <= 0 || spec.general_topics <= 0 || spec.domain_categories <= 0 ||
        spec.train_terms_per_category <= 0 || spec.subjects <= 0 || spec.qa_train <= 0)
        throw std::invalid_argument("synthetic spec: counts must be positive");

    Rng rng(mix_seed(spec.seed, "synthgen"));
    WordFactory words{&rng, {}, StopWordList::default_english()};

    // general lexicon, split into topics
    std::vector<std::string> general;
    for (int i = 0; i < spec.general_words; ++i) general.push_back(words.fresh(2, 3));
    std::vector<std::vector<std::string>> topics(static_cast<size_t>(spec.general_topics));
    for (size_t i = 0; i < general.size(); ++i)
        topics[i % topics.size()].push_back(general[i]);

    // domain world
    static const char* kSuffixPool[] = {"itin", "omab", "avir", "urol", "etin", "axol", "ipran", "odil"};
    DomainWorld dw;
    for (int c = 0; c < spec.domain_categories; ++c) {
        std::string suffix;
        if (spec.category_suffixes) suffix = kSuffixPool[c % 8];
        dw.suffixes.push_back(suffix);
        std::vector<std::string> train, dev;
        for (int t = 0; t < spec.train_terms_per_category; ++t)
            train.push_back(words.fresh(2, 2, suffix));
        for (int t = 0; t < spec.dev_terms_per_category; ++t)
            dev.push_back(words.fresh(2, 2, suffix));
        dw.train_terms.push_back(std::move(train));
        dw.dev_terms.push_back(std::move(dev));
        dw.catnouns.push_back(words.fresh(2, 3));
    }
    for (int i = 0; i < spec.subjects; ++i) dw.subjects.push_back(words.fresh(2, 3));
    for (int i = 0; i < 3; ++i) dw.verbs.push_back(words.fresh(2, 2));

    // polysemy pairs: same word, different anchor per corpus
    std::vector<std::string> poly, poly_general_anchor, poly_domain_anchor;
    for (int i = 0; i < spec.polysemy_pairs; ++i) {
        poly.push_back(words.fresh(2, 2));
        poly_general_anchor.push_back(general[rng.next_below(static_cast<uint32_t>(general.size()))]);
        poly_domain_anchor.push_back(dw.catnouns[static_cast<size_t>(i) % dw.catnouns.size()]);
    }

    // twin words: different shapes, emitted in identical contexts
    std::string twin_a = words.fresh(2, 2);
    std::string twin_b = words.fresh(3, 3);

    // ---- general corpus ----
    std::vector<Sentence> general_sents;
    for (int i = 0; i < spec.general_sentences; ++i) {
        const auto& topic = topics[rng.next_below(static_cast<uint32_t>(topics.size()))];
        auto pick = [&]() { return topic[rng.next_below(static_cast<uint32_t>(topic.size()))]; };
        const std::string w1 = pick(), w2 = pick(), w3 = pick();
        switch (rng.next_below(4)) {
        case 0:
            push_sentence(general_sents, {"the", w1, "of", "the", w2, "is", "the", w3, "."});
            break;
        case 1:
            push_sentence(general_sents, {"a", w1, "and", "the", w2, "are", "the", w3, "."});
            break;
        case 2:
            push_sentence(general_sents, {"the", w1, "is", "a", w2, "of", "the", w3, "."});
            break;
        default:
            push_sentence(general_sents, {"what", w1, "does", "the", w2, w3, "."});
            break;
        }
        if (!poly.empty() && i % 17 == 0) {
            const size_t pi = static_cast<size_t>(i / 17) % poly.size();
            push_sentence(general_sents,
                          {"the", poly[pi], "is", "the", poly_general_anchor[pi], "."});
        }
    }

    // ---- qa examples ----
    auto term_of = [&](const std::vector<std::vector<std::string>>& pool, int category) {
        const auto& v = pool[static_cast<size_t>(category)];
        return v[rng.next_below(static_cast<uint32_t>(v.size()))];
    };

    const int n_train_subjects =
        std::max(1, spec.subjects - (spec.dev_subjects < spec.subjects ? spec.dev_subjects : 0));
    auto pick_subject = [&](bool dev_pool) {
        if (dev_pool && spec.dev_subjects > 0 && spec.dev_subjects < spec.subjects) {
            const uint32_t span = static_cast<uint32_t>(spec.dev_subjects);
            return dw.subjects[static_cast<size_t>(n_train_subjects) + rng.next_below(span)];
        }
        return dw.subjects[rng.next_below(static_cast<uint32_t>(n_train_subjects))];
    };

    auto make_example = [&](bool dev_pool, int index) {
        QaExample ex;
        ex.id = (dev_pool ? "dev-" : "train-") + std::to_string(index);
        const int n_cat = spec.domain_categories;
        const int c_a = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
        int c_b = c_a;
        if (n_cat > 1)
            while (c_b == c_a) c_b = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
        const auto& pool = dev_pool ? dw.dev_terms : dw.train_terms;
        std::string obj_a = term_of(pool, c_a);
        std::string obj_b = term_of(pool, c_b);
        while (obj_b == obj_a) obj_b = term_of(pool, c_b);
        const std::string subj = pick_subject(dev_pool);
        const std::string verb = dw.verbs[rng.next_below(static_cast<uint32_t>(dw.verbs.size()))];
        const bool flip = rng.next_below(2) == 1;
        Sentence fact = flip ? fact_sentence(subj, verb, obj_b, obj_a)
                             : fact_sentence(subj, verb, obj_a, obj_b);

        std::vector<Sentence> sents;
        std::unordered_set<std::string> taken = {obj_a, obj_b};
        const int n_distract = dev_pool ? spec.dev_distractor_sentences : spec.distractor_sentences;
        for (int di = 0; di < n_distract; ++di) {
            // training passages never mention the held-out subjects
            const uint32_t dpool = dev_pool ? static_cast<uint32_t>(dw.subjects.size())
                                            : static_cast<uint32_t>(n_train_subjects);
            std::string dsubj = subj;
            while (dsubj == subj) dsubj = dw.subjects[rng.next_below(dpool)];
            const int dc_a = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
            int dc_b = dc_a;
            if (n_cat > 1)
                while (dc_b == dc_a)
                    dc_b = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
            std::string da = term_of(pool, dc_a);
            while (taken.count(da)) da = term_of(pool, dc_a);
            taken.insert(da);
            std::string db = term_of(pool, dc_b);
            while (taken.count(db)) db = term_of(pool, dc_b);
            taken.insert(db);
            const std::string dverb =
                dw.verbs[rng.next_below(static_cast<uint32_t>(dw.verbs.size()))];
            sents.push_back(fact_sentence(dsubj, dverb, da, db));
        }
        const size_t fact_at = rng.next_below(static_cast<uint32_t>(sents.size() + 1));
        sents.insert(sents.begin() + static_cast<long>(fact_at), fact);

        const bool ask_a = rng.next_below(2) == 0;
        const int ask_cat = ask_a ? c_a : c_b;
        const std::string answer = ask_a ? obj_a : obj_b;
        ex.answer_text = answer;

        std::string passage_text = sentences_to_text(sents);
        ex.passage = word_tokenize(passage_text, false);
        int answer_word = -1;
        for (size_t wi = 0; wi < ex.passage.words.size(); ++wi)
            if (ex.passage.words[wi] == answer) {
                answer_word = static_cast<int>(wi);
                break;
            }
        if (answer_word < 0) throw std::logic_error("synthetic answer missing from passage");
        ex.answer_word_start = answer_word;
        ex.answer_word_end = answer_word;

        std::string qtext = "what " + dw.catnouns[static_cast<size_t>(ask_cat)] + " does the " +
                            subj + " " + verb;
        ex.question = word_tokenize(qtext, false);
        return std::make_pair(ex, std::move(sents));
    };

    SyntheticData data;
    std::vector<Sentence> target_sents;
    for (int i = 0; i < spec.qa_train; ++i) {
        auto [ex, sents] = make_example(false, i);
        data.qa_train.push_back(std::move(ex));
        target_sents.insert(target_sents.end(), sents.begin(), sents.end());
    }
    for (int i = 0; i < spec.qa_dev; ++i) {
        auto [ex, sents] = make_example(true, i);
        data.qa_dev.push_back(std::move(ex));
        // dev passages stay out of the pre-training corpus
    }

    // filler facts: same templates as the passages, train terms only, never
    // part of any question's passage
    for (int i = 0; i < spec.target_filler_facts; ++i) {
        const int n_cat = spec.domain_categories;
        const int c_a = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
        int c_b = c_a;
        if (n_cat > 1)
            while (c_b == c_a) c_b = static_cast<int>(rng.next_below(static_cast<uint32_t>(n_cat)));
        const std::string subj =
            dw.subjects[rng.next_below(static_cast<uint32_t>(dw.subjects.size()))];
        const std::string verb = dw.verbs[rng.next_below(static_cast<uint32_t>(dw.verbs.size()))];
        std::string obj_a = term_of(dw.train_terms, c_a);
        std::string obj_b = term_of(dw.train_terms, c_b);
        while (obj_b == obj_a) obj_b = term_of(dw.train_terms, c_b);
        target_sents.push_back(fact_sentence(subj, verb, obj_a, obj_b));
    }

    // glossary: category membership statements; held-out terms stay rare
    for (int c = 0; c < spec.domain_categories; ++c) {
        for (const auto& term : dw.train_terms[static_cast<size_t>(c)])
            for (int r = 0; r < spec.glossary_repeats_train; ++r)
                push_sentence(target_sents,
                              {"the", term, "is", "a", "kind", "of", dw.catnouns[static_cast<size_t>(c)], "."});
        for (const auto& term : dw.dev_terms[static_cast<size_t>(c)])
            for (int r = 0; r < spec.glossary_repeats_dev; ++r)
                push_sentence(target_sents,
                              {"the", term, "is", "a", "kind", "of", dw.catnouns[static_cast<size_t>(c)], "."});
    }

    // twin words: each sampled context emitted once per twin
    for (int i = 0; i < spec.twin_context_sentences; ++i) {
        const std::string ctx_a =
            dw.subjects[rng.next_below(static_cast<uint32_t>(dw.subjects.size()))];
        const std::string ctx_b =
            dw.catnouns[rng.next_below(static_cast<uint32_t>(dw.catnouns.size()))];
        for (const std::string* twin : {&twin_a, &twin_b})
            push_sentence(target_sents, {"the", ctx_a, *twin, "is", "the", ctx_b, "."});
    }

    // polysemy words near their domain anchors
    for (size_t pi = 0; pi < poly.size(); ++pi)
        for (int r = 0; r < 6; ++r)
            push_sentence(target_sents,
                          {"the", poly[pi], "is", "a", "kind", "of", poly_domain_anchor[pi], "."});

    // deterministic order shuffle of target sentences
    Rng order_rng(mix_seed(spec.seed, "target_order"));
    order_rng.shuffle(target_sents);

    data.general_text = sentences_to_text(general_sents);
    data.target_text = sentences_to_text(target_sents);
    data.general_corpus = word_tokenize(data.general_text, true);
    data.target_corpus = word_tokenize(data.target_text, true);
    data.polysemy_words = poly;
    data.twin_words = {twin_a, twin_b};
    return data;
}

// ---------------------------------------------------------------------------
// qa dataset io
// ---------------------------------------------------------------------------

namespace {

std::string words_to_text(const WordSequence& seq) {
    std::string out;
    for (const auto& w : seq.words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

} // namespace

void save_qa_dataset(const std::vector<QaExample>& examples, const std::string& path) {
    json arr = json::array();
    for (const auto& ex : examples) {
        const std::string passage_text = words_to_text(ex.passage);
        // answer_start_char relative to the canonical single-space join
        int start_char = 0;
        for (int wi = 0; wi < ex.answer_word_start; ++wi)
            start_char += static_cast<int>(ex.passage.words[static_cast<size_t>(wi)].size()) + 1;
        json rec;
        rec["id"] = ex.id;
        rec["question"] = words_to_text(ex.question);
        rec["passage"] = passage_text;
        rec["answer_text"] = ex.answer_text;
        rec["answer_start_char"] = start_char;
        arr.push_back(std::move(rec));
    }
    write_text_file(path, arr.dump(2) + "\n");
}

std::vector<QaExample> load_qa_dataset(const std::string& path) {
    json arr = json::parse(read_text_file(path));
    if (!arr.is_array()) throw std::runtime_error("qa dataset must be a json array: " + path);
    std::vector<QaExample> out;
    for (const auto& rec : arr) {
        QaExample ex;
        ex.id = rec.at("id").get<std::string>();
        ex.question = word_tokenize(rec.at("question").get<std::string>(), false);
        const std::string passage_text = rec.at("passage").get<std::string>();
        ex.passage = word_tokenize(passage_text, false);
        ex.answer_text = rec.at("answer_text").get<std::string>();
        const int start_char = rec.at("answer_start_char").get<int>();

        WordSequence answer_words = word_tokenize(ex.answer_text, false);
        if (answer_words.empty())
            throw std::runtime_error("qa dataset " + path + ": empty answer for id " + ex.id);
        int start_word = -1;
        for (size_t wi = 0; wi < ex.passage.words.size(); ++wi) {
            if (ex.passage.source_offsets[wi].first <= start_char &&
                start_char < ex.passage.source_offsets[wi].second) {
                start_word = static_cast<int>(wi);
                break;
            }
        }
        if (start_word < 0)
            throw std::runtime_error("qa dataset " + path + ": answer_start_char out of range for id " + ex.id);
        const int end_word = start_word + static_cast<int>(answer_words.size()) - 1;
        if (end_word >= static_cast<int>(ex.passage.words.size()))
            throw std::runtime_error("qa dataset " + path + ": answer span exceeds passage for id " + ex.id);
        for (size_t k = 0; k < answer_words.size(); ++k)
            if (ex.passage.words[static_cast<size_t>(start_word) + k] != answer_words.words[k])
                throw std::runtime_error("qa dataset " + path +
                                         ": answer text does not match passage at span for id " + ex.id);
        ex.answer_word_start = start_word;
        ex.answer_word_end = end_word;
        out.push_back(std::move(ex));
    }
    return out;
}

// ---------------------------------------------------------------------------
// pca / embedding distance
// ---------------------------------------------------------------------------

PcaResult pca_project(const Mat& points, int k) {
    const int n = points.rows;
    const int dim = points.cols;
    if (k < 1 || k > std::min(n, dim))
        throw std::invalid_argument("pca_project: k must be in [1, min(n, dim)]");

    Mat centered(n, dim);
    Vec mean(static_cast<size_t>(dim), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dim; ++j) mean[static_cast<size_t>(j)] += points.at(i, j);
    for (double& v : mean) v /= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dim; ++j)
            centered.at(i, j) = points.at(i, j) - mean[static_cast<size_t>(j)];

    Mat cov(dim, dim);
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < dim; ++a) {
            const double ca = centered.at(i, a);
            if (ca == 0.0) continue;
            for (int b = a; b < dim; ++b) cov.at(a, b) += ca * centered.at(i, b);
        }
    for (int a = 0; a < dim; ++a)
        for (int b = a; b < dim; ++b) {
            cov.at(a, b) /= n;
            cov.at(b, a) = cov.at(a, b);
        }

    // cyclic Jacobi eigendecomposition
    Mat A = cov;
    Mat V(dim, dim);
    for (int i = 0; i < dim; ++i) V.at(i, i) = 1.0;
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < dim; ++p)
            for (int q = p + 1; q < dim; ++q) off += A.at(p, q) * A.at(p, q);
        if (off < 1e-28) break;
        for (int p = 0; p < dim; ++p) {
            for (int q = p + 1; q < dim; ++q) {
                const double apq = A.at(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double tau = (A.at(q, q) - A.at(p, p)) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int i = 0; i < dim; ++i) {
                    const double aip = A.at(i, p), aiq = A.at(i, q);
                    A.at(i, p) = c * aip - s * aiq;
                    A.at(i, q) = s * aip + c * aiq;
                }
                for (int i = 0; i < dim; ++i) {
                    const double api = A.at(p, i), aqi = A.at(q, i);
                    A.at(p, i) = c * api - s * aqi;
                    A.at(q, i) = s * api + c * aqi;
                }
                for (int i = 0; i < dim; ++i) {
                    const double vip = V.at(i, p), viq = V.at(i, q);
                    V.at(i, p) = c * vip - s * viq;
                    V.at(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    std::vector<std::pair<double, int>> eig;
    double total = 0.0;
    for (int i = 0; i < dim; ++i) {
        eig.emplace_back(A.at(i, i), i);
        total += std::max(0.0, A.at(i, i));
    }
    std::sort(eig.begin(), eig.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });

    PcaResult result;
    result.coords = Mat(n, k);
    result.explained.assign(static_cast<size_t>(k), 0.0);
    for (int comp = 0; comp < k; ++comp) {
        const int col = eig[static_cast<size_t>(comp)].second;
        Vec dir(static_cast<size_t>(dim));
        double best = 0.0;
        for (int i = 0; i < dim; ++i) {
            dir[static_cast<size_t>(i)] = V.at(i, col);
            if (std::abs(dir[static_cast<size_t>(i)]) > std::abs(best))
                best = dir[static_cast<size_t>(i)];
        }
        if (best < 0.0)
            for (double& v : dir) v = -v;
        for (int i = 0; i < n; ++i)
            result.coords.at(i, comp) = dot(centered.row(i), dir.data(), dim);
        result.explained[static_cast<size_t>(comp)] =
            total > 0.0 ? std::max(0.0, eig[static_cast<size_t>(comp)].first) / total : 0.0;
    }
    return result;
}

double avg_embedding_distance(const Mat& e1, const Mat& e2, const std::vector<uint8_t>& row_mask) {
    if (!e1.same_shape(e2)) throw std::invalid_argument("avg_embedding_distance: shape mismatch");
    if (static_cast<int>(row_mask.size()) != e1.rows)
        throw std::invalid_argument("avg_embedding_distance: mask size mismatch");
    double total = 0.0;
    long long count = 0;
    for (int i = 0; i < e1.rows; ++i) {
        if (!row_mask[static_cast<size_t>(i)]) continue;
        double sq = 0.0;
        for (int j = 0; j < e1.cols; ++j) {
            const double d = e1.at(i, j) - e2.at(i, j);
            sq += d * d;
        }
        total += std::sqrt(sq);
        ++count;
    }
    if (count == 0) throw std::invalid_argument("avg_embedding_distance: empty row mask");
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

namespace {

json synthetic_to_json(const SyntheticSpec& s) {
    return json{{"general_words", s.general_words},
                {"general_topics", s.general_topics},
                {"general_sentences", s.general_sentences},
                {"domain_categories", s.domain_categories},
                {"train_terms_per_category", s.train_terms_per_category},
                {"dev_terms_per_category", s.dev_terms_per_category},
                {"category_suffixes", s.category_suffixes},
                {"subjects", s.subjects},
                {"dev_subjects", s.dev_subjects},
                {"glossary_repeats_train", s.glossary_repeats_train},
                {"glossary_repeats_dev", s.glossary_repeats_dev},
                {"qa_train", s.qa_train},
                {"qa_dev", s.qa_dev},
                {"distractor_sentences", s.distractor_sentences},
                {"dev_distractor_sentences", s.dev_distractor_sentences},
                {"target_filler_facts", s.target_filler_facts},
                {"polysemy_pairs", s.polysemy_pairs},
                {"twin_context_sentences", s.twin_context_sentences},
                {"seed", s.seed}};
}

SyntheticSpec synthetic_from_json(const json& j) {
    SyntheticSpec s;
    s.general_words = j.value("general_words", s.general_words);
    s.general_topics = j.value("general_topics", s.general_topics);
    s.general_sentences = j.value("general_sentences", s.general_sentences);
    s.domain_categories = j.value("domain_categories", s.domain_categories);
    s.train_terms_per_category = j.value("train_terms_per_category", s.train_terms_per_category);
    s.dev_terms_per_category = j.value("dev_terms_per_category", s.dev_terms_per_category);
    s.category_suffixes = j.value("category_suffixes", s.category_suffixes);
    s.subjects = j.value("subjects", s.subjects);
    s.dev_subjects = j.value("dev_subjects", s.dev_subjects);
    s.glossary_repeats_train = j.value("glossary_repeats_train", s.glossary_repeats_train);
    s.glossary_repeats_dev = j.value("glossary_repeats_dev", s.glossary_repeats_dev);
    s.qa_train = j.value("qa_train", s.qa_train);
    s.qa_dev = j.value("qa_dev", s.qa_dev);
    s.distractor_sentences = j.value("distractor_sentences", s.distractor_sentences);
    s.dev_distractor_sentences = j.value("dev_distractor_sentences", s.dev_distractor_sentences);
    s.target_filler_facts = j.value("target_filler_facts", s.target_filler_facts);
    s.polysemy_pairs = j.value("polysemy_pairs", s.polysemy_pairs);
    s.twin_context_sentences = j.value("twin_context_sentences", s.twin_context_sentences);
    s.seed = j.value("seed", s.seed);
    return s;
}

json config_to_json(const PipelineConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["stopwords_file"] = c.stopwords_file;
    j["vocab_size"] = c.vocab_size;
    j["synthetic"] = synthetic_to_json(c.synthetic);
    j["fasttext"] = {{"dim", c.fasttext.dim},
                     {"window", c.fasttext.window},
                     {"negatives", c.fasttext.negatives},
                     {"lr", c.fasttext.lr},
                     {"epochs", c.fasttext.epochs},
                     {"min_count", c.fasttext.min_count},
                     {"min_n", c.fasttext.min_n},
                     {"max_n", c.fasttext.max_n},
                     {"bucket_count", c.fasttext.bucket_count},
                     {"pretrained_vectors", c.fasttext_pretrained}};
    j["lm"] = {{"d_model", c.lm.d_model},
               {"n_layers", c.lm.n_layers},
               {"n_heads", c.lm.n_heads},
               {"d_ff", c.lm.d_ff},
               {"max_len", c.lm.max_len},
               {"tie_embeddings", c.lm.tie_embeddings}};
    j["pretrain"] = {{"reg_weight", c.pretrain.reg_weight},
                     {"epochs_general", c.pretrain_epochs_general},
                     {"epochs_target", c.pretrain_epochs_target},
                     {"batch_size", c.pretrain.batch_size},
                     {"seq_len", c.pretrain.seq_len},
                     {"eval_interval", c.pretrain.eval_interval},
                     {"mask_rate", c.pretrain.mask_rate},
                     {"lr", c.pretrain.lr},
                     {"warmup_proportion", c.pretrain.warmup_proportion},
                     {"weight_decay", c.pretrain.weight_decay},
                     {"sample_rate", c.pretrain.selection.sample_rate},
                     {"reg_min_len", c.pretrain.selection.min_len},
                     {"lowercase_match", c.pretrain.selection.lowercase_match}};
    j["finetune"] = {{"epochs", c.finetune.epochs},
                     {"batch_size", c.finetune.batch_size},
                     {"lr", c.finetune.lr},
                     {"warmup_proportion", c.finetune.warmup_proportion},
                     {"weight_decay", c.finetune.weight_decay},
                     {"max_len", c.finetune.max_len},
                     {"max_query_len", c.finetune.max_query_len},
                     {"max_answer_len", c.finetune.max_answer_len},
                     {"top_k", c.finetune.top_k}};
    j["analysis"] = {{"pca_components", c.analysis_pca_components},
                     {"pca_tokens", c.analysis_pca_tokens}};
    return j;
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.stopwords_file = j.value("stopwords_file", c.stopwords_file);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    if (j.contains("synthetic")) c.synthetic = synthetic_from_json(j["synthetic"]);
    if (j.contains("fasttext")) {
        const json& f = j["fasttext"];
        c.fasttext.dim = f.value("dim", c.fasttext.dim);
        c.fasttext.window = f.value("window", c.fasttext.window);
        c.fasttext.negatives = f.value("negatives", c.fasttext.negatives);
        c.fasttext.lr = f.value("lr", c.fasttext.lr);
        c.fasttext.epochs = f.value("epochs", c.fasttext.epochs);
        c.fasttext.min_count = f.value("min_count", c.fasttext.min_count);
        c.fasttext.min_n = f.value("min_n", c.fasttext.min_n);
        c.fasttext.max_n = f.value("max_n", c.fasttext.max_n);
        c.fasttext.bucket_count = f.value("bucket_count", c.fasttext.bucket_count);
        c.fasttext_pretrained = f.value("pretrained_vectors", c.fasttext_pretrained);
    }
    if (j.contains("lm")) {
        const json& m = j["lm"];
        c.lm.d_model = m.value("d_model", c.lm.d_model);
        c.lm.n_layers = m.value("n_layers", c.lm.n_layers);
        c.lm.n_heads = m.value("n_heads", c.lm.n_heads);
        c.lm.d_ff = m.value("d_ff", c.lm.d_ff);
        c.lm.max_len = m.value("max_len", c.lm.max_len);
        c.lm.tie_embeddings = m.value("tie_embeddings", c.lm.tie_embeddings);
    }
    if (j.contains("pretrain")) {
        const json& p = j["pretrain"];
        c.pretrain.reg_weight = p.value("reg_weight", c.pretrain.reg_weight);
        c.pretrain_epochs_general = p.value("epochs_general", c.pretrain_epochs_general);
        c.pretrain_epochs_target = p.value("epochs_target", c.pretrain_epochs_target);
        c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
        c.pretrain.seq_len = p.value("seq_len", c.pretrain.seq_len);
        c.pretrain.eval_interval = p.value("eval_interval", c.pretrain.eval_interval);
        c.pretrain.mask_rate = p.value("mask_rate", c.pretrain.mask_rate);
        c.pretrain.lr = p.value("lr", c.pretrain.lr);
        c.pretrain.warmup_proportion = p.value("warmup_proportion", c.pretrain.warmup_proportion);
        c.pretrain.weight_decay = p.value("weight_decay", c.pretrain.weight_decay);
        c.pretrain.selection.sample_rate = p.value("sample_rate", c.pretrain.selection.sample_rate);
        c.pretrain.selection.min_len = p.value("reg_min_len", c.pretrain.selection.min_len);
        c.pretrain.selection.lowercase_match =
            p.value("lowercase_match", c.pretrain.selection.lowercase_match);
    }
    if (j.contains("finetune")) {
        const json& f = j["finetune"];
        c.finetune.epochs = f.value("epochs", c.finetune.epochs);
        c.finetune.batch_size = f.value("batch_size", c.finetune.batch_size);
        c.finetune.lr = f.value("lr", c.finetune.lr);
        c.finetune.warmup_proportion = f.value("warmup_proportion", c.finetune.warmup_proportion);
        c.finetune.weight_decay = f.value("weight_decay", c.finetune.weight_decay);
        c.finetune.max_len = f.value("max_len", c.finetune.max_len);
        c.finetune.max_query_len = f.value("max_query_len", c.finetune.max_query_len);
        c.finetune.max_answer_len = f.value("max_answer_len", c.finetune.max_answer_len);
        c.finetune.top_k = f.value("top_k", c.finetune.top_k);
    }
    if (j.contains("analysis")) {
        const json& a = j["analysis"];
        c.analysis_pca_components = a.value("pca_components", c.analysis_pca_components);
        c.analysis_pca_tokens = a.value("pca_tokens", c.analysis_pca_tokens);
    }
    return c;
}

void validate_config(const PipelineConfig& c) {
    auto fail = [](const std::string& field, const std::string& why) {
        throw std::invalid_argument("config field " + field + ": " + why);
    };
    if (c.pretrain.reg_weight < 0.0) fail("pretrain.reg_weight", "must be >= 0");
    if (c.pretrain.selection.sample_rate < 0.0 || c.pretrain.selection.sample_rate > 1.0)
        fail("pretrain.sample_rate", "must be in [0, 1]");
    if (c.fasttext.min_n < 1 || c.fasttext.min_n > c.fasttext.max_n)
        fail("fasttext.min_n", "need 1 <= min_n <= max_n");
    if (c.fasttext.window < 1) fail("fasttext.window", "must be >= 1");
    if (c.fasttext.negatives < 1) fail("fasttext.negatives", "must be >= 1");
    if (c.fasttext.lr <= 0.0) fail("fasttext.lr", "must be > 0");
    if (c.fasttext.bucket_count <= 0) fail("fasttext.bucket_count", "must be > 0");
    if (c.lm.d_model % c.lm.n_heads != 0) fail("lm.d_model", "must be divisible by lm.n_heads");
    if (c.vocab_size < 10) fail("vocab_size", "too small");
    if (c.pretrain.mask_rate <= 0.0 || c.pretrain.mask_rate > 1.0)
        fail("pretrain.mask_rate", "must be in (0, 1]");
    if (c.pretrain.seq_len < 4 || c.pretrain.seq_len > c.lm.max_len)
        fail("pretrain.seq_len", "must be in [4, lm.max_len]");
    if (c.finetune.max_len > c.lm.max_len) fail("finetune.max_len", "exceeds lm.max_len");
}

} // namespace

PipelineConfig PipelineConfig::load(const std::string& path) {
    PipelineConfig c = config_from_json(json::parse(read_text_file(path)));
    validate_config(c);
    return c;
}

void PipelineConfig::save(const std::string& path) const {
    write_text_file(path, config_to_json(*this).dump(2) + "\n");
}

bool PipelineConfig::operator==(const PipelineConfig& other) const {
    return config_to_json(*this) == config_to_json(other);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

const char* stage_name(Stage s) {
    switch (s) {
    case Stage::Generate: return "generate";
    case Stage::TrainFasttext: return "train-fasttext";
    case Stage::InferEmbeddings: return "infer-embeddings";
    case Stage::Pretrain: return "pretrain";
    case Stage::Finetune: return "finetune";
    case Stage::Evaluate: return "evaluate";
    case Stage::Analyze: return "analyze";
    }
    return "?";
}

bool parse_stage(std::string_view name, Stage& out) {
    for (Stage s : {Stage::Generate, Stage::TrainFasttext, Stage::InferEmbeddings, Stage::Pretrain,
                    Stage::Finetune, Stage::Evaluate, Stage::Analyze}) {
        if (name == stage_name(s)) {
            out = s;
            return true;
        }
    }
    return false;
}

namespace {

struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string ckpt_stem(const std::string& path) {
    return fs::path(path).stem().string();
}

std::string pretrain_ckpt_name(const StageOptions& opts) {
    return "model_" + opts.mode + "_" + opts.corpus + ".ckpt";
}

std::string pretrain_curve_name(const StageOptions& opts) {
    return "curve_" + opts.mode + "_" + opts.corpus + ".csv";
}

// Holds <dir>/.lock for the duration of a stage.
class StageLock {
public:
    explicit StageLock(const std::string& dir) : path_(dir + "/.lock") {
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw std::runtime_error("another stage holds the lock file " + path_);
    }
    ~StageLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    StageLock(const StageLock&) = delete;
    StageLock& operator=(const StageLock&) = delete;

private:
    std::string path_;
    int fd_{-1};
};

void require_input(const std::string& path, const std::string& what) {
    if (!file_exists(path)) throw MissingArtifact("missing " + what + ": " + path);
}

StopWordList stage_stopwords(const PipelineConfig& cfg) {
    if (cfg.stopwords_file.empty()) return StopWordList::default_english();
    return StopWordList::load(cfg.stopwords_file);
}

struct QaCheckpoint {
    LmModel model;
    SpanHead head;
};

void save_qa_checkpoint(const std::string& path, const LmModel& model, const SpanHead& head) {
    TensorFile tf;
    const LmConfig& c = model.cfg;
    tf.meta.emplace_back("kind", "qa_checkpoint");
    tf.meta.emplace_back("vocab_size", std::to_string(c.vocab_size));
    tf.meta.emplace_back("d_model", std::to_string(c.d_model));
    tf.meta.emplace_back("n_layers", std::to_string(c.n_layers));
    tf.meta.emplace_back("n_heads", std::to_string(c.n_heads));
    tf.meta.emplace_back("d_ff", std::to_string(c.d_ff));
    tf.meta.emplace_back("max_len", std::to_string(c.max_len));
    tf.meta.emplace_back("tie_embeddings", c.tie_embeddings ? "1" : "0");
    tf.meta.emplace_back("ln_eps", format_double(c.ln_eps));
    auto views = param_views(const_cast<LmModel&>(model));
    for (const auto& pv : views) tf.tensors.emplace_back(pv.name, *pv.m);
    tf.tensors.emplace_back("span.w", head.w);
    tf.tensors.emplace_back("span.b", head.b);
    save_tensor_file(tf, path);
}

QaCheckpoint load_qa_checkpoint(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    const std::string* kind = tf.find_meta("kind");
    if (!kind || *kind != "qa_checkpoint")
        throw std::runtime_error("not a qa checkpoint: " + path);
    LmConfig c;
    c.vocab_size = std::stoi(*tf.find_meta("vocab_size"));
    c.d_model = std::stoi(*tf.find_meta("d_model"));
    c.n_layers = std::stoi(*tf.find_meta("n_layers"));
    c.n_heads = std::stoi(*tf.find_meta("n_heads"));
    c.d_ff = std::stoi(*tf.find_meta("d_ff"));
    c.max_len = std::stoi(*tf.find_meta("max_len"));
    c.tie_embeddings = *tf.find_meta("tie_embeddings") == "1";
    c.ln_eps = std::stod(*tf.find_meta("ln_eps"));
    QaCheckpoint out{LmModel::init(c, 0), SpanHead{}};
    auto views = param_views(out.model);
    for (auto& pv : views) {
        const Mat* src = tf.find_tensor(pv.name);
        if (!src) throw std::runtime_error("qa checkpoint missing tensor " + pv.name);
        *pv.m = *src;
    }
    out.head.w = *tf.find_tensor("span.w");
    out.head.b = *tf.find_tensor("span.b");
    return out;
}

} // namespace

StageIo stage_io(Stage stage, const StageOptions& opts) {
    StageIo io;
    switch (stage) {
    case Stage::Generate:
        io.outputs = {"general_corpus.txt", "target_corpus.txt", "qa_train.json", "qa_dev.json",
                      "vocab.txt", "synth_info.json"};
        break;
    case Stage::TrainFasttext:
        io.inputs = {"target_corpus.txt"};
        io.outputs = {"fasttext_model.bin", "fasttext_vectors.txt"};
        break;
    case Stage::InferEmbeddings:
        io.inputs = {"fasttext_model.bin", "vocab.txt"};
        io.outputs = {"target_embeddings.txt"};
        break;
    case Stage::Pretrain:
        io.inputs = {opts.corpus + "_corpus.txt", "vocab.txt"};
        if (opts.mode == "tapter") io.inputs.push_back("target_embeddings.txt");
        if (!opts.init.empty()) io.inputs.push_back(opts.init);
        io.outputs = {pretrain_ckpt_name(opts), pretrain_curve_name(opts)};
        break;
    case Stage::Finetune:
        io.inputs = {"qa_train.json", "vocab.txt", opts.init};
        io.outputs = {"qa_from_" + ckpt_stem(opts.init) + ".ckpt"};
        break;
    case Stage::Evaluate:
        io.inputs = {"qa_dev.json", "vocab.txt", opts.init};
        io.outputs = {"predictions_" + ckpt_stem(opts.init) + ".json",
                      "metrics_" + ckpt_stem(opts.init) + ".txt"};
        break;
    case Stage::Analyze:
        io.inputs = {"vocab.txt", "target_corpus.txt", "model_tapt_general.ckpt"};
        io.outputs = {"analysis_report.txt", "pca_model_tapt_general.csv"};
        break;
    }
    return io;
}

std::string metrics_report_string(const EvalReport& report) {
    std::ostringstream out;
    char buf[64];
    out << "questions " << report.n << '\n';
    auto line = [&](const char* name, double v) {
        std::snprintf(buf, sizeof(buf), "%s %.12f\n", name, v);
        out << buf;
    };
    line("em", report.em);
    line("f1", report.f1);
    line("sacc", report.sacc);
    line("lacc", report.lacc);
    line("mrr", report.mrr);
    return out.str();
}

namespace {

void run_generate(const PipelineConfig& cfg, const std::string& dir, uint64_t seed) {
    SyntheticSpec spec = cfg.synthetic;
    spec.seed = mix_seed(seed, "generate", spec.seed);
    SyntheticData data = generate_synthetic(spec);
    write_text_file(dir + "/general_corpus.txt", data.general_text + "\n");
    write_text_file(dir + "/target_corpus.txt", data.target_text + "\n");
    save_qa_dataset(data.qa_train, dir + "/qa_train.json");
    save_qa_dataset(data.qa_dev, dir + "/qa_dev.json");

    WordSequence combined = data.general_corpus;
    combined.append(data.target_corpus);
    SubwordVocab vocab = build_subword_vocab(combined, cfg.vocab_size);
    vocab.save(dir + "/vocab.txt");

    json info;
    info["polysemy_words"] = data.polysemy_words;
    info["twin_words"] = {data.twin_words.first, data.twin_words.second};
    info["vocab_size"] = vocab.size();
    write_text_file(dir + "/synth_info.json", info.dump(2) + "\n");
}

void run_train_fasttext(const PipelineConfig& cfg, const std::string& dir, uint64_t seed) {
    const std::string corpus_path = dir + "/target_corpus.txt";
    require_input(corpus_path, "pre-training corpus artifact");
    WordSequence corpus = word_tokenize(read_text_file(corpus_path), true);
    FastTextConfig fcfg = cfg.fasttext;
    fcfg.seed = mix_seed(seed, "train-fasttext");
    SubwordModel model = [&] {
        if (cfg.fasttext_pretrained.empty()) return make_subword_model(corpus, fcfg);
        require_input(cfg.fasttext_pretrained, "pretrained vector file");
        return load_pretrained_vectors(cfg.fasttext_pretrained, corpus, fcfg);
    }();
    skipgram_train(model, corpus, fcfg);
    save_subword_model(model, dir + "/fasttext_model.bin");
    save_vectors(model, dir + "/fasttext_vectors.txt");
}

void run_infer_embeddings(const PipelineConfig& cfg, const std::string& dir) {
    (void)cfg;
    require_input(dir + "/fasttext_model.bin", "trained fasttext model artifact");
    require_input(dir + "/vocab.txt", "vocab artifact");
    SubwordModel model = load_subword_model(dir + "/fasttext_model.bin");
    SubwordVocab vocab = SubwordVocab::load(dir + "/vocab.txt");
    TargetEmbeddingTable table = infer_vocab_embeddings(model, vocab);
    save_embedding_table(table, vocab, dir + "/target_embeddings.txt");
}

void run_pretrain(const PipelineConfig& cfg, const std::string& dir, uint64_t seed,
                  const StageOptions& opts) {
    if (opts.mode != "tapt" && opts.mode != "tapter")
        throw std::invalid_argument("pretrain mode must be tapt or tapter, got " + opts.mode);
    if (opts.corpus != "general" && opts.corpus != "target")
        throw std::invalid_argument("pretrain corpus must be general or target, got " + opts.corpus);

    const std::string corpus_path = dir + "/" + opts.corpus + "_corpus.txt";
    require_input(corpus_path, "pre-training corpus artifact");
    require_input(dir + "/vocab.txt", "vocab artifact");
    SubwordVocab vocab = SubwordVocab::load(dir + "/vocab.txt");
    WordSequence corpus = word_tokenize(read_text_file(corpus_path), true);

    TapterConfig tcfg = cfg.pretrain;
    tcfg.epochs = (opts.corpus == "general") ? cfg.pretrain_epochs_general
                                             : cfg.pretrain_epochs_target;
    tcfg.selection.stopwords = stage_stopwords(cfg);
    // seed depends on the corpus but not the mode: a tapt run is the tapter
    // code path with reg_weight 0 and must be bit-identical to it
    tcfg.seed = mix_seed(seed, "pretrain", fnv1a64(opts.corpus));

    TargetEmbeddingTable table;
    if (opts.mode == "tapter") {
        const std::string table_path = dir + "/target_embeddings.txt";
        require_input(table_path, "target embedding table artifact (run infer-embeddings first)");
        table = load_embedding_table(table_path, vocab);
    } else {
        tcfg.reg_weight = 0.0;
        table.f = Mat(vocab.size(), cfg.fasttext.dim);
        table.valid.assign(static_cast<size_t>(vocab.size()), 0);
    }

    LmModel model = [&] {
        if (!opts.init.empty()) {
            std::string init_path = fs::path(opts.init).is_absolute()
                                        ? opts.init
                                        : dir + "/" + opts.init;
            require_input(init_path, "initial checkpoint artifact");
            return load_checkpoint(init_path);
        }
        LmConfig lc = cfg.lm;
        lc.vocab_size = vocab.size();
        return LmModel::init(lc, mix_seed(seed, "lm-init"));
    }();
    if (model.cfg.vocab_size != vocab.size())
        throw std::runtime_error("checkpoint vocab size does not match vocab.txt");

    ProjectionHead head = ProjectionHead::init(cfg.fasttext.dim, model.cfg.d_model,
                                               mix_seed(seed, "proj-init"));
    LearningCurve curve = tapter_pretrain(model, head, vocab, corpus, table, tcfg);
    save_checkpoint(dir + "/" + pretrain_ckpt_name(opts), model, &head);
    curve.save_csv(dir + "/" + pretrain_curve_name(opts));
}

void run_finetune(const PipelineConfig& cfg, const std::string& dir, uint64_t seed,
                  const StageOptions& opts) {
    if (opts.init.empty())
        throw std::invalid_argument("finetune requires --init <pretrained checkpoint>");
    const std::string init_path =
        fs::path(opts.init).is_absolute() ? opts.init : dir + "/" + opts.init;
    require_input(init_path, "pretrained checkpoint artifact");
    require_input(dir + "/qa_train.json", "qa training set artifact");
    require_input(dir + "/vocab.txt", "vocab artifact");

    SubwordVocab vocab = SubwordVocab::load(dir + "/vocab.txt");
    std::vector<QaExample> train = load_qa_dataset(dir + "/qa_train.json");
    LmModel model = load_checkpoint(init_path);
    FinetuneConfig fcfg = cfg.finetune;
    fcfg.seed = mix_seed(seed, "finetune", fnv1a64(ckpt_stem(opts.init)));
    SpanHead head = SpanHead::init(model.cfg.d_model, mix_seed(fcfg.seed, "span"));
    finetune(model, head, train, nullptr, vocab, fcfg);
    save_qa_checkpoint(dir + "/qa_from_" + ckpt_stem(opts.init) + ".ckpt", model, head);
}

void run_evaluate(const PipelineConfig& cfg, const std::string& dir, const StageOptions& opts) {
    if (opts.init.empty())
        throw std::invalid_argument("evaluate requires --init <fine-tuned checkpoint>");
    const std::string init_path =
        fs::path(opts.init).is_absolute() ? opts.init : dir + "/" + opts.init;
    require_input(init_path, "fine-tuned checkpoint artifact");
    require_input(dir + "/qa_dev.json", "qa evaluation set artifact");
    require_input(dir + "/vocab.txt", "vocab artifact");

    SubwordVocab vocab = SubwordVocab::load(dir + "/vocab.txt");
    std::vector<QaExample> dev = load_qa_dataset(dir + "/qa_dev.json");
    QaCheckpoint ckpt = load_qa_checkpoint(init_path);
    std::vector<RankedPrediction> preds;
    EvalReport report = evaluate_qa(ckpt.model, ckpt.head, dev, vocab, cfg.finetune, &preds);

    json parr = json::array();
    for (size_t i = 0; i < preds.size(); ++i) {
        json rec;
        rec["id"] = dev[i].id;
        rec["answers"] = preds[i].texts;
        json scores = json::array();
        for (const auto& s : preds[i].spans) scores.push_back(s.score);
        rec["scores"] = scores;
        parr.push_back(std::move(rec));
    }
    const std::string stem = ckpt_stem(opts.init);
    write_text_file(dir + "/predictions_" + stem + ".json", parr.dump(2) + "\n");
    write_text_file(dir + "/metrics_" + stem + ".txt", metrics_report_string(report));
}

void run_analyze(const PipelineConfig& cfg, const std::string& dir) {
    require_input(dir + "/vocab.txt", "vocab artifact");
    require_input(dir + "/target_corpus.txt", "pre-training corpus artifact");
    const std::string base_path = dir + "/model_tapt_general.ckpt";
    require_input(base_path, "base checkpoint artifact (model_tapt_general.ckpt)");

    SubwordVocab vocab = SubwordVocab::load(dir + "/vocab.txt");
    WordSequence corpus = word_tokenize(read_text_file(dir + "/target_corpus.txt"), true);
    StopWordList stop = stage_stopwords(cfg);

    // most frequent eligible tokens in the target corpus
    std::vector<long long> freq(static_cast<size_t>(vocab.size()), 0);
    for (int id : encode_words(corpus, vocab)) ++freq[static_cast<size_t>(id)];
    std::vector<int> by_freq;
    for (int id = 0; id < vocab.size(); ++id) {
        if (vocab.is_special(id)) continue;
        if (vocab.demarked_len(id) < 3) continue;
        if (is_stopword(vocab.demarked(id), stop)) continue;
        if (freq[static_cast<size_t>(id)] > 0) by_freq.push_back(id);
    }
    std::sort(by_freq.begin(), by_freq.end(), [&](int a, int b) {
        if (freq[static_cast<size_t>(a)] != freq[static_cast<size_t>(b)])
            return freq[static_cast<size_t>(a)] > freq[static_cast<size_t>(b)];
        return a < b;
    });
    if (static_cast<int>(by_freq.size()) > cfg.analysis_pca_tokens)
        by_freq.resize(static_cast<size_t>(cfg.analysis_pca_tokens));

    LmModel base = load_checkpoint(base_path);
    std::ostringstream report;
    report << "tokens " << by_freq.size() << "\n";

    auto pca_to_csv = [&](const LmModel& model, const std::string& name) {
        Mat sel(static_cast<int>(by_freq.size()), model.cfg.d_model);
        for (size_t i = 0; i < by_freq.size(); ++i)
            std::copy(model.tok_emb.row(by_freq[i]),
                      model.tok_emb.row(by_freq[i]) + model.cfg.d_model,
                      sel.row(static_cast<int>(i)));
        const int k = std::min(cfg.analysis_pca_components,
                               std::min(sel.rows, sel.cols));
        PcaResult pca = pca_project(sel, k);
        std::ostringstream csv;
        csv << "token";
        for (int c = 0; c < k; ++c) csv << ",pc" << (c + 1);
        csv << '\n';
        for (size_t i = 0; i < by_freq.size(); ++i) {
            csv << vocab.token(by_freq[i]);
            for (int c = 0; c < k; ++c)
                csv << ',' << format_double(pca.coords.at(static_cast<int>(i), c));
            csv << '\n';
        }
        write_text_file(dir + "/pca_" + name + ".csv", csv.str());
        report << "pca_" << name << " explained";
        for (int c = 0; c < k; ++c) report << ' ' << format_double(pca.explained[static_cast<size_t>(c)]);
        report << '\n';
    };

    pca_to_csv(base, "model_tapt_general");

    std::vector<uint8_t> mask(static_cast<size_t>(vocab.size()), 0);
    for (int id = 0; id < vocab.size(); ++id)
        if (!vocab.is_special(id)) mask[static_cast<size_t>(id)] = 1;

    for (const std::string name : {"model_tapt_target", "model_tapter_target"}) {
        const std::string path = dir + "/" + name + ".ckpt";
        if (!file_exists(path)) continue;
        LmModel adapted = load_checkpoint(path);
        pca_to_csv(adapted, name);
        const double dist = avg_embedding_distance(base.tok_emb, adapted.tok_emb, mask);
        report << "avg_embedding_distance base_vs_" << name << ' ' << format_double(dist) << '\n';
    }
    write_text_file(dir + "/analysis_report.txt", report.str());
}

} // namespace

int run_stage(const PipelineConfig& cfg, Stage stage, const StageOptions& opts,
              std::ostream& err) {
    try {
        validate_config(cfg);
        const std::string dir = opts.out_dir.empty() ? cfg.out_dir : opts.out_dir;
        fs::create_directories(dir);
        const uint64_t seed = opts.has_seed ? opts.seed : cfg.seed;
        StageLock lock(dir);
        switch (stage) {
        case Stage::Generate: run_generate(cfg, dir, seed); break;
        case Stage::TrainFasttext: run_train_fasttext(cfg, dir, seed); break;
        case Stage::InferEmbeddings: run_infer_embeddings(cfg, dir); break;
        case Stage::Pretrain: run_pretrain(cfg, dir, seed, opts); break;
        case Stage::Finetune: run_finetune(cfg, dir, seed, opts); break;
        case Stage::Evaluate: run_evaluate(cfg, dir, opts); break;
        case Stage::Analyze: run_analyze(cfg, dir); break;
        }
        return 0;
    } catch (const MissingArtifact& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

} // namespace tapter
