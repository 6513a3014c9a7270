#include "tapter/tapter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace tapter {

ProjectionHead ProjectionHead::init(int d_ft, int d_lm, uint64_t seed) {
    ProjectionHead h;
    Rng rng(mix_seed(seed, "proj_init"));
    h.w_f = Mat(d_ft, d_lm);
    h.w_f.fill_gauss(rng, 0.02);
    h.b_f = Mat(1, d_ft);
    return h;
}

Vec layer_norm(const Vec& z, double eps) {
    if (z.empty()) throw std::invalid_argument("layer_norm: empty vector");
    const int d = static_cast<int>(z.size());
    double mean = 0.0;
    for (double v : z) mean += v;
    mean /= d;
    double var = 0.0;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    Vec out(z.size());
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] = (z[static_cast<size_t>(j)] - mean) * rstd;
    return out;
}

Vec project(const ProjectionHead& head, const double* z, int d_lm) {
    if (d_lm != head.d_lm())
        throw std::invalid_argument("project: input dim " + std::to_string(d_lm) +
                                    " != head d_lm " + std::to_string(head.d_lm()));
    Vec u(static_cast<size_t>(head.d_ft()));
    matvec(head.w_f, z, u.data());
    for (int j = 0; j < head.d_ft(); ++j) u[static_cast<size_t>(j)] += head.b_f.at(0, j);
    return layer_norm(u, head.ln_eps);
}

Vec project(const ProjectionHead& head, const Vec& z) {
    return project(head, z.data(), static_cast<int>(z.size()));
}

// ---------------------------------------------------------------------------
// regularization target selection
// ---------------------------------------------------------------------------

std::vector<int> select_reg_targets(const std::vector<int>& original_ids,
                                    const SubwordVocab& vocab, const TargetEmbeddingTable& table,
                                    const RegSelectionConfig& cfg) {
    if (cfg.sample_rate < 0.0 || cfg.sample_rate > 1.0)
        throw std::invalid_argument("select_reg_targets: sample_rate must be in [0, 1]");
    Rng rng(mix_seed(cfg.seed, "regsel"));
    std::vector<int> out;
    for (size_t p = 0; p < original_ids.size(); ++p) {
        const int id = original_ids[p];
        if (id < 0 || id >= vocab.size())
            throw std::invalid_argument("select_reg_targets: token id out of range");
        if (vocab.is_special(id)) continue;
        if (static_cast<int>(table.valid.size()) != vocab.size() ||
            !table.valid[static_cast<size_t>(id)])
            continue;
        if (vocab.demarked_len(id) < cfg.min_len) continue;
        std::string surface = vocab.demarked(id);
        if (cfg.lowercase_match) {
            if (is_stopword(surface, cfg.stopwords)) continue;
        } else {
            if (cfg.stopwords.words.count(surface) > 0) continue;
        }
        if (rng.next_double() < cfg.sample_rate) out.push_back(static_cast<int>(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// regularization loss
// ---------------------------------------------------------------------------

double reg_loss(const Mat& emb, const ProjectionHead& head, const TargetEmbeddingTable& table,
                const std::vector<int>& reg_positions, const std::vector<int>& original_ids) {
    if (reg_positions.empty()) return 0.0;
    double total = 0.0;
    for (int p : reg_positions) {
        const int id = original_ids[static_cast<size_t>(p)];
        if (!table.valid[static_cast<size_t>(id)])
            throw std::invalid_argument("reg_loss: position has no valid target row");
        Vec y = project(head, emb.row(id), emb.cols);
        const double* f = table.f.row(id);
        for (int j = 0; j < table.f.cols; ++j) {
            const double r = y[static_cast<size_t>(j)] - f[j];
            total += r * r;
        }
    }
    return total / static_cast<double>(reg_positions.size());
}

ProjGrads ProjGrads::zeros_like(const ProjectionHead& head) {
    ProjGrads g;
    g.w_f = tapter::zeros_like(head.w_f);
    g.b_f = tapter::zeros_like(head.b_f);
    return g;
}

double reg_loss_backward(const Mat& emb, const ProjectionHead& head,
                         const TargetEmbeddingTable& table, const std::vector<int>& reg_positions,
                         const std::vector<int>& original_ids, double scale, Mat& demb,
                         ProjGrads& pg) {
    if (reg_positions.empty()) return 0.0;
    const int d_ft = head.d_ft();
    const int d_lm = head.d_lm();
    const double inv_n = 1.0 / static_cast<double>(reg_positions.size());
    double total = 0.0;
    Vec u(static_cast<size_t>(d_ft)), y(static_cast<size_t>(d_ft)), dy(static_cast<size_t>(d_ft)),
        du(static_cast<size_t>(d_ft));
    for (int p : reg_positions) {
        const int id = original_ids[static_cast<size_t>(p)];
        if (!table.valid[static_cast<size_t>(id)])
            throw std::invalid_argument("reg_loss_backward: position has no valid target row");
        const double* e = emb.row(id);
        matvec(head.w_f, e, u.data());
        for (int j = 0; j < d_ft; ++j) u[static_cast<size_t>(j)] += head.b_f.at(0, j);

        double mean = 0.0;
        for (double v : u) mean += v;
        mean /= d_ft;
        double var = 0.0;
        for (double v : u) var += (v - mean) * (v - mean);
        var /= d_ft;
        const double rstd = 1.0 / std::sqrt(var + head.ln_eps);
        const double* f = table.f.row(id);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d_ft; ++j) {
            y[static_cast<size_t>(j)] = (u[static_cast<size_t>(j)] - mean) * rstd;
            const double r = y[static_cast<size_t>(j)] - f[j];
            total += r * r;
            dy[static_cast<size_t>(j)] = 2.0 * r * inv_n * scale;
            m1 += dy[static_cast<size_t>(j)];
            m2 += dy[static_cast<size_t>(j)] * y[static_cast<size_t>(j)];
        }
        m1 /= d_ft;
        m2 /= d_ft;
        for (int j = 0; j < d_ft; ++j)
            du[static_cast<size_t>(j)] =
                rstd * (dy[static_cast<size_t>(j)] - m1 - y[static_cast<size_t>(j)] * m2);

        // u = W_f e + b_f
        double* de = demb.row(id);
        for (int j = 0; j < d_ft; ++j) {
            const double g = du[static_cast<size_t>(j)];
            if (g == 0.0) continue;
            pg.b_f.at(0, j) += g;
            const double* wr = head.w_f.row(j);
            double* dwr = pg.w_f.row(j);
            for (int c = 0; c < d_lm; ++c) {
                dwr[c] += g * e[c];
                de[c] += g * wr[c];
            }
        }
    }
    return total * inv_n;
}

// ---------------------------------------------------------------------------
// joint loss
// ---------------------------------------------------------------------------

JointResult joint_loss(const LmModel& model, const ProjectionHead& head, const MaskedBatch& batch,
                       const TargetEmbeddingTable& table, const std::vector<int>& reg_positions,
                       double reg_weight) {
    if (reg_weight < 0.0) throw std::invalid_argument("joint_loss: reg_weight must be >= 0");
    JointResult r;
    r.grads = zero_grads(model);
    r.proj_grads = ProjGrads::zeros_like(head);

    ForwardCache cache = forward(model, batch);
    r.lm = lm_loss(cache, batch);
    Mat dlogits = lm_loss_dlogits(cache, batch);
    backward(model, cache, dlogits, Mat(), r.grads);

    if (reg_weight > 0.0) {
        r.reg = reg_loss_backward(model.tok_emb, head, table, reg_positions, batch.original_ids,
                                  reg_weight, r.grads.tok_emb, r.proj_grads);
        r.total = r.lm + reg_weight * r.reg;
    } else {
        r.total = r.lm;
    }
    return r;
}

// ---------------------------------------------------------------------------
// learning curve io
// ---------------------------------------------------------------------------

void LearningCurve::save_csv(const std::string& path) const {
    std::ostringstream out;
    out << "step,lm_train,reg_train,lm_dev,reg_dev\n";
    for (const auto& r : rows)
        out << r.step << ',' << format_double(r.lm_train) << ',' << format_double(r.reg_train)
            << ',' << format_double(r.lm_dev) << ',' << format_double(r.reg_dev) << '\n';
    write_text_file(path, out.str());
}

LearningCurve LearningCurve::load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open curve file: " + path);
    LearningCurve curve;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (header) {
            header = false;
            continue;
        }
        CurveRow r;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream ss(line);
        if (!(ss >> r.step >> r.lm_train >> r.reg_train >> r.lm_dev >> r.reg_dev))
            throw std::runtime_error("malformed curve row in " + path);
        curve.rows.push_back(r);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// pre-training loop
// ---------------------------------------------------------------------------

namespace {

struct SequenceSet {
    std::vector<std::vector<int>> seqs; // [CLS] ... [SEP], padded to seq_len
};

SequenceSet chunk_corpus(const WordSequence& corpus, const SubwordVocab& vocab, int seq_len) {
    std::vector<int> stream = encode_words(corpus, vocab);
    SequenceSet out;
    const int body = seq_len - 2;
    if (body <= 0) throw std::invalid_argument("seq_len too small");
    for (size_t pos = 0; pos < stream.size(); pos += static_cast<size_t>(body)) {
        const size_t end = std::min(stream.size(), pos + static_cast<size_t>(body));
        std::vector<int> seq;
        seq.reserve(static_cast<size_t>(seq_len));
        seq.push_back(vocab.cls_id);
        seq.insert(seq.end(), stream.begin() + static_cast<long>(pos),
                   stream.begin() + static_cast<long>(end));
        seq.push_back(vocab.sep_id);
        while (static_cast<int>(seq.size()) < seq_len) seq.push_back(vocab.pad_id);
        out.seqs.push_back(std::move(seq));
    }
    if (out.seqs.empty()) throw std::runtime_error("pretraining corpus is empty");
    return out;
}

} // namespace

LearningCurve tapter_pretrain(LmModel& model, ProjectionHead& head, const SubwordVocab& vocab,
                              const WordSequence& corpus, const TargetEmbeddingTable& table,
                              const TapterConfig& cfg) {
    if (corpus.empty()) throw std::runtime_error("tapter_pretrain: empty corpus");
    if (cfg.reg_weight > 0.0 && table.rows() != vocab.size())
        throw std::runtime_error("tapter_pretrain: target table does not cover the vocab");

    SequenceSet all = chunk_corpus(corpus, vocab, cfg.seq_len);
    // deterministic 90/10 split; dev is the tail, at least one sequence if possible
    const size_t n_total = all.seqs.size();
    size_t n_dev = n_total / 10;
    if (n_dev == 0 && n_total > 1) n_dev = 1;
    const size_t n_train = n_total - n_dev;
    if (n_train == 0) throw std::runtime_error("tapter_pretrain: corpus too small to split");

    const long long batches_per_epoch =
        static_cast<long long>((n_train + static_cast<size_t>(cfg.batch_size) - 1) /
                               static_cast<size_t>(cfg.batch_size));
    const long long total_steps = batches_per_epoch * cfg.epochs;

    auto params = param_views(model);
    std::vector<ParamView> head_params = {{"proj.w_f", &head.w_f, true},
                                          {"proj.b_f", &head.b_f, false}};
    std::vector<ParamView> all_params = params;
    all_params.insert(all_params.end(), head_params.begin(), head_params.end());
    OptimizerState opt = OptimizerState::init(all_params, cfg.lr, cfg.warmup_proportion,
                                              cfg.weight_decay, total_steps);

    // fixed dev batches: masking and selection drawn once so the dev curve
    // only reflects the model
    std::vector<MaskedBatch> dev_batches;
    std::vector<std::vector<int>> dev_reg;
    for (size_t i = 0; i < n_dev; ++i) {
        const auto& seq = all.seqs[n_train + i];
        MaskedBatch b = mask_tokens(seq, cfg.mask_rate, mix_seed(cfg.seed, "devmask", i), vocab);
        RegSelectionConfig sel = cfg.selection;
        sel.seed = mix_seed(cfg.seed, "devregsel", i);
        dev_batches.push_back(std::move(b));
        dev_reg.push_back(cfg.reg_weight > 0.0
                              ? select_reg_targets(dev_batches.back().original_ids, vocab, table, sel)
                              : std::vector<int>{});
    }

    auto eval_dev = [&](double& lm_out, double& reg_out) {
        lm_out = 0.0;
        reg_out = 0.0;
        if (dev_batches.empty()) return;
        for (size_t i = 0; i < dev_batches.size(); ++i) {
            ForwardCache fc = forward(model, dev_batches[i]);
            lm_out += lm_loss(fc, dev_batches[i]);
            if (cfg.reg_weight > 0.0)
                reg_out += reg_loss(model.tok_emb, head, table, dev_reg[i],
                                    dev_batches[i].original_ids);
        }
        lm_out /= static_cast<double>(dev_batches.size());
        reg_out /= static_cast<double>(dev_batches.size());
    };

    auto eval_train_probe = [&](double& lm_out, double& reg_out) {
        // probe the first training batch without updating
        lm_out = 0.0;
        reg_out = 0.0;
        const size_t n = std::min(n_train, static_cast<size_t>(cfg.batch_size));
        for (size_t i = 0; i < n; ++i) {
            MaskedBatch b =
                mask_tokens(all.seqs[i], cfg.mask_rate, mix_seed(cfg.seed, "probemask", i), vocab);
            RegSelectionConfig sel = cfg.selection;
            sel.seed = mix_seed(cfg.seed, "proberegsel", i);
            ForwardCache fc = forward(model, b);
            lm_out += lm_loss(fc, b);
            if (cfg.reg_weight > 0.0) {
                std::vector<int> R = select_reg_targets(b.original_ids, vocab, table, sel);
                reg_out += reg_loss(model.tok_emb, head, table, R, b.original_ids);
            }
        }
        lm_out /= static_cast<double>(n);
        reg_out /= static_cast<double>(n);
    };

    LearningCurve curve;
    {
        CurveRow r0;
        r0.step = 0;
        eval_train_probe(r0.lm_train, r0.reg_train);
        eval_dev(r0.lm_dev, r0.reg_dev);
        curve.rows.push_back(r0);
    }

    std::vector<size_t> order(n_train);
    for (size_t i = 0; i < n_train; ++i) order[i] = i;

    double acc_lm = 0.0, acc_reg = 0.0;
    long long acc_batches = 0;
    long long step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (size_t start = 0; start < n_train; start += static_cast<size_t>(cfg.batch_size)) {
            const size_t stop = std::min(n_train, start + static_cast<size_t>(cfg.batch_size));
            const double inv_b = 1.0 / static_cast<double>(stop - start);
            LmGrads grads = zero_grads(model);
            ProjGrads pgrads = ProjGrads::zeros_like(head);
            double batch_lm = 0.0, batch_reg = 0.0;
            for (size_t bi = start; bi < stop; ++bi) {
                const size_t si = order[bi];
                MaskedBatch b = mask_tokens(
                    all.seqs[si], cfg.mask_rate,
                    mix_seed(cfg.seed, "mask", static_cast<uint64_t>(epoch), si), vocab);
                ForwardCache fc = forward(model, b);
                batch_lm += lm_loss(fc, b);
                Mat dlogits = lm_loss_dlogits(fc, b);
                // scale the per-sequence gradient by 1/batch inside the seed
                for (double& v : dlogits.a) v *= inv_b;
                backward(model, fc, dlogits, Mat(), grads);
                if (cfg.reg_weight > 0.0) {
                    RegSelectionConfig sel = cfg.selection;
                    sel.seed = mix_seed(cfg.seed, "regsel", static_cast<uint64_t>(epoch), si);
                    std::vector<int> R = select_reg_targets(b.original_ids, vocab, table, sel);
                    batch_reg += reg_loss_backward(model.tok_emb, head, table, R, b.original_ids,
                                                   cfg.reg_weight * inv_b, grads.tok_emb, pgrads);
                }
            }
            batch_lm *= inv_b;
            batch_reg *= inv_b;

            auto grad_views = param_views(grads);
            std::vector<ParamView> all_grads = grad_views;
            all_grads.push_back({"proj.w_f", &pgrads.w_f, true});
            all_grads.push_back({"proj.b_f", &pgrads.b_f, false});
            adam_step(all_params, all_grads, opt);
            ++step;
            acc_lm += batch_lm;
            acc_reg += batch_reg;
            ++acc_batches;

            if (cfg.eval_interval > 0 && step % cfg.eval_interval == 0) {
                CurveRow r;
                r.step = step;
                r.lm_train = acc_lm / static_cast<double>(acc_batches);
                r.reg_train = acc_reg / static_cast<double>(acc_batches);
                eval_dev(r.lm_dev, r.reg_dev);
                curve.rows.push_back(r);
                acc_lm = acc_reg = 0.0;
                acc_batches = 0;
            }
        }
    }
    return curve;
}

// ---------------------------------------------------------------------------
// checkpoints with projection head section
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const LmModel& model, const ProjectionHead* head) {
    TensorFile tf;
    const LmConfig& c = model.cfg;
    tf.meta.emplace_back("kind", "lm_checkpoint");
    tf.meta.emplace_back("vocab_size", std::to_string(c.vocab_size));
    tf.meta.emplace_back("d_model", std::to_string(c.d_model));
    tf.meta.emplace_back("n_layers", std::to_string(c.n_layers));
    tf.meta.emplace_back("n_heads", std::to_string(c.n_heads));
    tf.meta.emplace_back("d_ff", std::to_string(c.d_ff));
    tf.meta.emplace_back("max_len", std::to_string(c.max_len));
    tf.meta.emplace_back("tie_embeddings", c.tie_embeddings ? "1" : "0");
    tf.meta.emplace_back("ln_eps", format_double(c.ln_eps));
    tf.meta.emplace_back("has_projection_head", head ? "1" : "0");
    if (head) tf.meta.emplace_back("proj_ln_eps", format_double(head->ln_eps));
    auto views = param_views(const_cast<LmModel&>(model));
    for (const auto& pv : views) tf.tensors.emplace_back(pv.name, *pv.m);
    if (head) {
        tf.tensors.emplace_back("proj.w_f", head->w_f);
        tf.tensors.emplace_back("proj.b_f", head->b_f);
    }
    save_tensor_file(tf, path);
}

LmModel load_checkpoint(const std::string& path, ProjectionHead* head_out) {
    LmModel model = load_lm_checkpoint(path);
    if (head_out) {
        TensorFile tf = load_tensor_file(path);
        const std::string* flag = tf.find_meta("has_projection_head");
        if (flag && *flag == "1") {
            head_out->w_f = *tf.find_tensor("proj.w_f");
            head_out->b_f = *tf.find_tensor("proj.b_f");
            head_out->ln_eps = std::stod(*tf.find_meta("proj_ln_eps"));
        } else {
            *head_out = ProjectionHead{};
        }
    }
    return model;
}

} // namespace tapter
