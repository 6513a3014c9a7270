#include "tapter/mlm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tapter {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

inline double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    return cdf + x * pdf;
}

// y[i] = W x[i] + b for every row of x; W is (out x in), b is 1 x out
void affine_rows(const Mat& x, const Mat& w, const Mat& b, Mat& y) {
    for (int i = 0; i < x.rows; ++i) {
        matvec(w, x.row(i), y.row(i));
        const double* bb = b.row(0);
        double* yy = y.row(i);
        for (int r = 0; r < w.rows; ++r) yy[r] += bb[r];
    }
}

// backward of affine_rows: accumulates dw, db, dx
void affine_rows_backward(const Mat& x, const Mat& w, const Mat& dy, Mat& dw, Mat& db, Mat& dx) {
    for (int i = 0; i < x.rows; ++i) {
        const double* dyr = dy.row(i);
        const double* xr = x.row(i);
        double* dxr = dx.row(i);
        double* dbr = db.row(0);
        for (int r = 0; r < w.rows; ++r) {
            const double g = dyr[r];
            if (g == 0.0) continue;
            dbr[r] += g;
            const double* wr = w.row(r);
            double* dwr = dw.row(r);
            for (int c = 0; c < w.cols; ++c) {
                dwr[c] += g * xr[c];
                dxr[c] += g * wr[c];
            }
        }
    }
}

void layer_norm_rows(const Mat& x, const Mat& g, const Mat& b, double eps, Mat& y, LnCache& cache) {
    const int d = x.cols;
    cache.mean.assign(static_cast<size_t>(x.rows), 0.0);
    cache.rstd.assign(static_cast<size_t>(x.rows), 0.0);
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xr[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= d;
        const double rstd = 1.0 / std::sqrt(var + eps);
        cache.mean[static_cast<size_t>(i)] = mean;
        cache.rstd[static_cast<size_t>(i)] = rstd;
        double* yr = y.row(i);
        const double* gg = g.row(0);
        const double* bb = b.row(0);
        for (int j = 0; j < d; ++j) yr[j] = gg[j] * ((xr[j] - mean) * rstd) + bb[j];
    }
}

void layer_norm_rows_backward(const Mat& x, const Mat& g, const LnCache& cache, const Mat& dy,
                              Mat& dg, Mat& db, Mat& dx) {
    const int d = x.cols;
    Vec xhat(static_cast<size_t>(d));
    Vec dxhat(static_cast<size_t>(d));
    for (int i = 0; i < x.rows; ++i) {
        const double mean = cache.mean[static_cast<size_t>(i)];
        const double rstd = cache.rstd[static_cast<size_t>(i)];
        const double* xr = x.row(i);
        const double* dyr = dy.row(i);
        const double* gg = g.row(0);
        double* dgr = dg.row(0);
        double* dbr = db.row(0);
        double m1 = 0.0, m2 = 0.0;
        for (int j = 0; j < d; ++j) {
            xhat[static_cast<size_t>(j)] = (xr[j] - mean) * rstd;
            dgr[j] += dyr[j] * xhat[static_cast<size_t>(j)];
            dbr[j] += dyr[j];
            dxhat[static_cast<size_t>(j)] = dyr[j] * gg[j];
            m1 += dxhat[static_cast<size_t>(j)];
            m2 += dxhat[static_cast<size_t>(j)] * xhat[static_cast<size_t>(j)];
        }
        m1 /= d;
        m2 /= d;
        double* dxr = dx.row(i);
        for (int j = 0; j < d; ++j)
            dxr[j] += rstd * (dxhat[static_cast<size_t>(j)] - m1 -
                              xhat[static_cast<size_t>(j)] * m2);
    }
}

} // namespace

// ---------------------------------------------------------------------------
// model init
// ---------------------------------------------------------------------------

LmModel LmModel::init(const LmConfig& cfg, uint64_t seed) {
    if (cfg.d_model % cfg.n_heads != 0)
        throw std::invalid_argument("d_model must be divisible by n_heads");
    if (cfg.vocab_size <= 0 || cfg.max_len <= 0 || cfg.n_layers < 0)
        throw std::invalid_argument("bad LmConfig");
    LmModel m;
    m.cfg = cfg;
    Rng rng(mix_seed(seed, "lm_init"));
    const double std0 = 0.02;
    m.tok_emb = Mat(cfg.vocab_size, cfg.d_model);
    m.tok_emb.fill_gauss(rng, std0);
    m.pos_emb = Mat(cfg.max_len, cfg.d_model);
    m.pos_emb.fill_gauss(rng, std0);
    m.emb_ln_g = Mat(1, cfg.d_model, 1.0);
    m.emb_ln_b = Mat(1, cfg.d_model, 0.0);
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& L : m.layers) {
        for (Mat* w : {&L.wq, &L.wk, &L.wv, &L.wo}) {
            *w = Mat(cfg.d_model, cfg.d_model);
            w->fill_gauss(rng, std0);
        }
        L.bq = Mat(1, cfg.d_model);
        L.bk = Mat(1, cfg.d_model);
        L.bv = Mat(1, cfg.d_model);
        L.bo = Mat(1, cfg.d_model);
        L.ln1_g = Mat(1, cfg.d_model, 1.0);
        L.ln1_b = Mat(1, cfg.d_model, 0.0);
        L.w1 = Mat(cfg.d_ff, cfg.d_model);
        L.w1.fill_gauss(rng, std0);
        L.b1 = Mat(1, cfg.d_ff);
        L.w2 = Mat(cfg.d_model, cfg.d_ff);
        L.w2.fill_gauss(rng, std0);
        L.b2 = Mat(1, cfg.d_model);
        L.ln2_g = Mat(1, cfg.d_model, 1.0);
        L.ln2_b = Mat(1, cfg.d_model, 0.0);
    }
    if (!cfg.tie_embeddings) {
        m.head_w = Mat(cfg.vocab_size, cfg.d_model);
        m.head_w.fill_gauss(rng, std0);
    }
    m.head_b = Mat(1, cfg.vocab_size);
    return m;
}

LmGrads zero_grads(const LmModel& model) {
    LmGrads g;
    g.cfg = model.cfg;
    g.tok_emb = zeros_like(model.tok_emb);
    g.pos_emb = zeros_like(model.pos_emb);
    g.emb_ln_g = zeros_like(model.emb_ln_g);
    g.emb_ln_b = zeros_like(model.emb_ln_b);
    g.layers.resize(model.layers.size());
    for (size_t i = 0; i < model.layers.size(); ++i) {
        const auto& L = model.layers[i];
        auto& G = g.layers[i];
        G.wq = zeros_like(L.wq);
        G.wk = zeros_like(L.wk);
        G.wv = zeros_like(L.wv);
        G.wo = zeros_like(L.wo);
        G.bq = zeros_like(L.bq);
        G.bk = zeros_like(L.bk);
        G.bv = zeros_like(L.bv);
        G.bo = zeros_like(L.bo);
        G.ln1_g = zeros_like(L.ln1_g);
        G.ln1_b = zeros_like(L.ln1_b);
        G.w1 = zeros_like(L.w1);
        G.b1 = zeros_like(L.b1);
        G.w2 = zeros_like(L.w2);
        G.b2 = zeros_like(L.b2);
        G.ln2_g = zeros_like(L.ln2_g);
        G.ln2_b = zeros_like(L.ln2_b);
    }
    if (!model.cfg.tie_embeddings) g.head_w = zeros_like(model.head_w);
    g.head_b = zeros_like(model.head_b);
    return g;
}

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

MaskedBatch mask_tokens(const std::vector<int>& ids, double rate, uint64_t seed,
                        const SubwordVocab& vocab) {
    if (rate <= 0.0 || rate > 1.0) throw std::invalid_argument("mask rate must be in (0, 1]");
    bool any_maskable = false;
    for (int id : ids)
        if (!vocab.is_special(id)) any_maskable = true;
    if (!any_maskable) throw std::runtime_error("mask_tokens: sequence has only special tokens");

    for (uint64_t attempt = 0;; ++attempt) {
        Rng rng(mix_seed(seed, "mask", attempt));
        MaskedBatch b;
        b.input_ids = ids;
        b.original_ids = ids;
        b.attention_mask.assign(ids.size(), 1);
        for (size_t p = 0; p < ids.size(); ++p) {
            if (ids[p] == vocab.pad_id) b.attention_mask[p] = 0;
            if (vocab.is_special(ids[p])) continue;
            if (rng.next_double() >= rate) continue;
            b.mask_positions.push_back(static_cast<int>(p));
            const double branch = rng.next_double();
            if (branch < 0.8) {
                b.input_ids[p] = vocab.mask_id;
            } else if (branch < 0.9) {
                b.input_ids[p] = static_cast<int>(rng.next_below(
                    static_cast<uint32_t>(vocab.size())));
            } // else: keep the original token
        }
        if (!b.mask_positions.empty()) return b;
    }
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

ForwardCache forward(const LmModel& model, const std::vector<int>& input_ids,
                     const std::vector<uint8_t>& attention_mask,
                     const std::vector<int>& mask_positions) {
    const LmConfig& cfg = model.cfg;
    const int l = static_cast<int>(input_ids.size());
    if (l == 0) throw std::invalid_argument("forward: empty sequence");
    if (l > cfg.max_len)
        throw std::invalid_argument("forward: sequence length " + std::to_string(l) +
                                    " exceeds max_len " + std::to_string(cfg.max_len));
    for (int id : input_ids)
        if (id < 0 || id >= cfg.vocab_size)
            throw std::invalid_argument("forward: token id out of range: " + std::to_string(id));
    if (static_cast<int>(attention_mask.size()) != l)
        throw std::invalid_argument("forward: attention mask length mismatch");
    bool any_valid = false;
    for (uint8_t a : attention_mask) any_valid |= (a != 0);
    if (!any_valid) throw std::invalid_argument("forward: all positions are padding");
    for (int p : mask_positions)
        if (p < 0 || p >= l) throw std::invalid_argument("forward: mask position out of range");

    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    ForwardCache c;
    c.ids = input_ids;
    c.attn = attention_mask;
    c.mask_positions = mask_positions;

    c.emb_sum = Mat(l, d);
    for (int i = 0; i < l; ++i) {
        const double* e = model.tok_emb.row(input_ids[static_cast<size_t>(i)]);
        const double* p = model.pos_emb.row(i);
        double* o = c.emb_sum.row(i);
        for (int j = 0; j < d; ++j) o[j] = e[j] + p[j];
    }
    c.h0 = Mat(l, d);
    layer_norm_rows(c.emb_sum, model.emb_ln_g, model.emb_ln_b, cfg.ln_eps, c.h0, c.emb_ln);

    const Mat* x = &c.h0;
    c.layers.resize(model.layers.size());
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const EncoderLayer& L = model.layers[li];
        LayerCache& lc = c.layers[li];
        lc.in = *x;
        lc.q = Mat(l, d);
        lc.k = Mat(l, d);
        lc.v = Mat(l, d);
        affine_rows(lc.in, L.wq, L.bq, lc.q);
        affine_rows(lc.in, L.wk, L.bk, lc.k);
        affine_rows(lc.in, L.wv, L.bv, lc.v);

        lc.probs.assign(static_cast<size_t>(heads), Mat(l, l));
        lc.ctx = Mat(l, d);
        Vec scores(static_cast<size_t>(l));
        for (int h = 0; h < heads; ++h) {
            Mat& probs = lc.probs[static_cast<size_t>(h)];
            const int off = h * dh;
            for (int i = 0; i < l; ++i) {
                const double* qi = lc.q.row(i) + off;
                double max_s = kNegInf;
                for (int j = 0; j < l; ++j) {
                    double s = kNegInf;
                    if (attention_mask[static_cast<size_t>(j)]) {
                        s = dot(qi, lc.k.row(j) + off, dh) * inv_sqrt_dh;
                    }
                    scores[static_cast<size_t>(j)] = s;
                    max_s = std::max(max_s, s);
                }
                double denom = 0.0;
                double* pr = probs.row(i);
                for (int j = 0; j < l; ++j) {
                    const double e = std::exp(scores[static_cast<size_t>(j)] - max_s);
                    pr[j] = e;
                    denom += e;
                }
                for (int j = 0; j < l; ++j) pr[j] /= denom;
                double* ctx_i = lc.ctx.row(i) + off;
                for (int j = 0; j < l; ++j) {
                    const double p = pr[j];
                    if (p == 0.0) continue;
                    const double* vj = lc.v.row(j) + off;
                    for (int t = 0; t < dh; ++t) ctx_i[t] += p * vj[t];
                }
            }
        }

        lc.attn_out = Mat(l, d);
        affine_rows(lc.ctx, L.wo, L.bo, lc.attn_out);
        lc.res1 = Mat(l, d);
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < d; ++j) lc.res1.at(i, j) = lc.in.at(i, j) + lc.attn_out.at(i, j);
        lc.h1 = Mat(l, d);
        layer_norm_rows(lc.res1, L.ln1_g, L.ln1_b, cfg.ln_eps, lc.h1, lc.ln1);

        lc.ffn_pre = Mat(l, cfg.d_ff);
        affine_rows(lc.h1, L.w1, L.b1, lc.ffn_pre);
        lc.ffn_act = Mat(l, cfg.d_ff);
        for (size_t t = 0; t < lc.ffn_pre.a.size(); ++t) lc.ffn_act.a[t] = gelu(lc.ffn_pre.a[t]);
        lc.ffn_out = Mat(l, d);
        affine_rows(lc.ffn_act, L.w2, L.b2, lc.ffn_out);
        lc.res2 = Mat(l, d);
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < d; ++j) lc.res2.at(i, j) = lc.h1.at(i, j) + lc.ffn_out.at(i, j);
        lc.out = Mat(l, d);
        layer_norm_rows(lc.res2, L.ln2_g, L.ln2_b, cfg.ln_eps, lc.out, lc.ln2);
        x = &lc.out;
    }
    c.hidden = *x;

    if (!mask_positions.empty()) {
        const Mat& w = model.output_weight();
        c.logits = Mat(static_cast<int>(mask_positions.size()), cfg.vocab_size);
        for (size_t mi = 0; mi < mask_positions.size(); ++mi) {
            const double* h = c.hidden.row(mask_positions[mi]);
            double* lo = c.logits.row(static_cast<int>(mi));
            for (int vID = 0; vID < cfg.vocab_size; ++vID)
                lo[vID] = dot(w.row(vID), h, d) + model.head_b.at(0, vID);
        }
    }
    return c;
}

ForwardCache forward(const LmModel& model, const MaskedBatch& batch) {
    return forward(model, batch.input_ids, batch.attention_mask, batch.mask_positions);
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

double lm_loss(const ForwardCache& cache, const MaskedBatch& batch) {
    const int m = static_cast<int>(batch.mask_positions.size());
    if (m == 0) throw std::runtime_error("lm_loss: no masked positions");
    const int V = cache.logits.cols;
    double total = 0.0;
    for (int mi = 0; mi < m; ++mi) {
        const double* lo = cache.logits.row(mi);
        double max_l = lo[0];
        for (int j = 1; j < V; ++j) max_l = std::max(max_l, lo[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(lo[j] - max_l);
        const int target = batch.original_ids[static_cast<size_t>(batch.mask_positions[static_cast<size_t>(mi)])];
        total += std::log(denom) + max_l - lo[target];
    }
    return total / m;
}

Mat lm_loss_dlogits(const ForwardCache& cache, const MaskedBatch& batch) {
    const int m = static_cast<int>(batch.mask_positions.size());
    const int V = cache.logits.cols;
    Mat d(m, V);
    for (int mi = 0; mi < m; ++mi) {
        const double* lo = cache.logits.row(mi);
        double max_l = lo[0];
        for (int j = 1; j < V; ++j) max_l = std::max(max_l, lo[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(lo[j] - max_l);
        double* dr = d.row(mi);
        for (int j = 0; j < V; ++j) dr[j] = std::exp(lo[j] - max_l) / denom / m;
        const int target = batch.original_ids[static_cast<size_t>(batch.mask_positions[static_cast<size_t>(mi)])];
        dr[target] -= 1.0 / m;
    }
    return d;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const LmModel& model, const ForwardCache& cache, const Mat& dlogits,
              const Mat& dhidden, LmGrads& grads) {
    const LmConfig& cfg = model.cfg;
    const int l = static_cast<int>(cache.ids.size());
    const int d = cfg.d_model;
    const int heads = cfg.n_heads;
    const int dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Mat dhid(l, d);
    if (!dhidden.empty()) {
        if (dhidden.rows != l || dhidden.cols != d)
            throw std::invalid_argument("backward: dhidden shape mismatch");
        dhid = dhidden;
    }

    if (!dlogits.empty()) {
        if (dlogits.rows != static_cast<int>(cache.mask_positions.size()) ||
            dlogits.cols != cfg.vocab_size)
            throw std::invalid_argument("backward: dlogits shape mismatch");
        const Mat& w = model.output_weight();
        Mat& dw = cfg.tie_embeddings ? grads.tok_emb : grads.head_w;
        for (int mi = 0; mi < dlogits.rows; ++mi) {
            const int pos = cache.mask_positions[static_cast<size_t>(mi)];
            const double* h = cache.hidden.row(pos);
            const double* dl = dlogits.row(mi);
            double* dh_row = dhid.row(pos);
            double* dbh = grads.head_b.row(0);
            for (int vID = 0; vID < cfg.vocab_size; ++vID) {
                const double g = dl[vID];
                if (g == 0.0) continue;
                dbh[vID] += g;
                const double* wr = w.row(vID);
                double* dwr = dw.row(vID);
                for (int j = 0; j < d; ++j) {
                    dwr[j] += g * h[j];
                    dh_row[j] += g * wr[j];
                }
            }
        }
    }

    // encoder layers in reverse
    Mat dcur = std::move(dhid);
    for (int li = static_cast<int>(model.layers.size()) - 1; li >= 0; --li) {
        const EncoderLayer& L = model.layers[static_cast<size_t>(li)];
        const LayerCache& lc = cache.layers[static_cast<size_t>(li)];
        EncoderLayer& G = grads.layers[static_cast<size_t>(li)];

        // out = LN2(res2)
        Mat dres2(l, d);
        layer_norm_rows_backward(lc.res2, L.ln2_g, lc.ln2, dcur, G.ln2_g, G.ln2_b, dres2);
        // res2 = h1 + ffn_out
        Mat dh1 = dres2;
        Mat dffn_out = dres2;
        // ffn_out = W2 ffn_act + b2
        Mat dffn_act(l, cfg.d_ff);
        affine_rows_backward(lc.ffn_act, L.w2, dffn_out, G.w2, G.b2, dffn_act);
        // ffn_act = gelu(ffn_pre)
        Mat dffn_pre(l, cfg.d_ff);
        for (size_t t = 0; t < dffn_pre.a.size(); ++t)
            dffn_pre.a[t] = dffn_act.a[t] * gelu_grad(lc.ffn_pre.a[t]);
        // ffn_pre = W1 h1 + b1
        affine_rows_backward(lc.h1, L.w1, dffn_pre, G.w1, G.b1, dh1);
        // h1 = LN1(res1)
        Mat dres1(l, d);
        layer_norm_rows_backward(lc.res1, L.ln1_g, lc.ln1, dh1, G.ln1_g, G.ln1_b, dres1);
        // res1 = in + attn_out
        Mat din = dres1;
        Mat dattn_out = dres1;
        // attn_out = Wo ctx + bo
        Mat dctx(l, d);
        affine_rows_backward(lc.ctx, L.wo, dattn_out, G.wo, G.bo, dctx);

        // attention heads
        Mat dq(l, d), dk(l, d), dv(l, d);
        Vec dp(static_cast<size_t>(l)), ds(static_cast<size_t>(l));
        for (int h = 0; h < heads; ++h) {
            const Mat& probs = lc.probs[static_cast<size_t>(h)];
            const int off = h * dh;
            for (int i = 0; i < l; ++i) {
                const double* dctx_i = dctx.row(i) + off;
                const double* pr = probs.row(i);
                double inner = 0.0;
                for (int j = 0; j < l; ++j) {
                    double dpj = 0.0;
                    if (pr[j] != 0.0) {
                        dpj = dot(dctx_i, lc.v.row(j) + off, dh);
                        double* dv_j = dv.row(j) + off;
                        for (int t = 0; t < dh; ++t) dv_j[t] += pr[j] * dctx_i[t];
                    }
                    dp[static_cast<size_t>(j)] = dpj;
                    inner += pr[j] * dpj;
                }
                const double* qi = lc.q.row(i) + off;
                double* dq_i = dq.row(i) + off;
                for (int j = 0; j < l; ++j) {
                    const double dsj = pr[j] * (dp[static_cast<size_t>(j)] - inner);
                    if (dsj == 0.0) continue;
                    const double scaled = dsj * inv_sqrt_dh;
                    const double* kj = lc.k.row(j) + off;
                    double* dk_j = dk.row(j) + off;
                    for (int t = 0; t < dh; ++t) {
                        dq_i[t] += scaled * kj[t];
                        dk_j[t] += scaled * qi[t];
                    }
                }
            }
        }

        affine_rows_backward(lc.in, L.wq, dq, G.wq, G.bq, din);
        affine_rows_backward(lc.in, L.wk, dk, G.wk, G.bk, din);
        affine_rows_backward(lc.in, L.wv, dv, G.wv, G.bv, din);
        dcur = std::move(din);
    }

    // embedding layer norm, then token/positional lookups
    Mat demb(l, d);
    layer_norm_rows_backward(cache.emb_sum, model.emb_ln_g, cache.emb_ln, dcur, grads.emb_ln_g,
                             grads.emb_ln_b, demb);
    for (int i = 0; i < l; ++i) {
        const double* dr = demb.row(i);
        double* de = grads.tok_emb.row(cache.ids[static_cast<size_t>(i)]);
        double* dpos = grads.pos_emb.row(i);
        for (int j = 0; j < d; ++j) {
            de[j] += dr[j];
            dpos[j] += dr[j];
        }
    }
}

// ---------------------------------------------------------------------------
// parameter registry
// ---------------------------------------------------------------------------

std::vector<ParamView> param_views(LmModel& model) {
    std::vector<ParamView> out;
    out.push_back({"tok_emb", &model.tok_emb, true});
    out.push_back({"pos_emb", &model.pos_emb, true});
    out.push_back({"emb_ln_g", &model.emb_ln_g, false});
    out.push_back({"emb_ln_b", &model.emb_ln_b, false});
    for (size_t i = 0; i < model.layers.size(); ++i) {
        auto& L = model.layers[i];
        const std::string p = "layer" + std::to_string(i) + ".";
        out.push_back({p + "wq", &L.wq, true});
        out.push_back({p + "bq", &L.bq, false});
        out.push_back({p + "wk", &L.wk, true});
        out.push_back({p + "bk", &L.bk, false});
        out.push_back({p + "wv", &L.wv, true});
        out.push_back({p + "bv", &L.bv, false});
        out.push_back({p + "wo", &L.wo, true});
        out.push_back({p + "bo", &L.bo, false});
        out.push_back({p + "ln1_g", &L.ln1_g, false});
        out.push_back({p + "ln1_b", &L.ln1_b, false});
        out.push_back({p + "w1", &L.w1, true});
        out.push_back({p + "b1", &L.b1, false});
        out.push_back({p + "w2", &L.w2, true});
        out.push_back({p + "b2", &L.b2, false});
        out.push_back({p + "ln2_g", &L.ln2_g, false});
        out.push_back({p + "ln2_b", &L.ln2_b, false});
    }
    if (!model.cfg.tie_embeddings) out.push_back({"head_w", &model.head_w, true});
    out.push_back({"head_b", &model.head_b, false});
    return out;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

OptimizerState OptimizerState::init(const std::vector<ParamView>& params, double lr,
                                    double warmup_proportion, double weight_decay,
                                    long long total_steps) {
    OptimizerState st;
    st.lr = lr;
    st.warmup_proportion = warmup_proportion;
    st.weight_decay = weight_decay;
    st.total_steps = total_steps;
    for (const auto& p : params) {
        st.m.push_back(zeros_like(*p.m));
        st.v.push_back(zeros_like(*p.m));
    }
    return st;
}

double scheduled_lr(const OptimizerState& st, long long step) {
    if (st.total_steps <= 0) return st.lr;
    const double warmup_steps = st.warmup_proportion * static_cast<double>(st.total_steps);
    const double s = static_cast<double>(step);
    if (warmup_steps > 0.0 && s < warmup_steps) return st.lr * s / warmup_steps;
    const double remain = static_cast<double>(st.total_steps) - warmup_steps;
    if (remain <= 0.0) return st.lr;
    return st.lr * std::max(0.0, (static_cast<double>(st.total_steps) - s) / remain);
}

void adam_step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
               OptimizerState& st) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
    const double lr = scheduled_lr(st, st.step);
    const long long t = st.step + 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Mat& p = *params[pi].m;
        const Mat& g = *grads[pi].m;
        if (!p.same_shape(g)) throw std::invalid_argument("adam_step: shape mismatch at " + params[pi].name);
        Mat& m = st.m[pi];
        Mat& v = st.v[pi];
        const bool decay = params[pi].decay && st.weight_decay > 0.0;
        for (size_t i = 0; i < p.a.size(); ++i) {
            m.a[i] = st.beta1 * m.a[i] + (1.0 - st.beta1) * g.a[i];
            v.a[i] = st.beta2 * v.a[i] + (1.0 - st.beta2) * g.a[i] * g.a[i];
            const double mhat = m.a[i] / bc1;
            const double vhat = v.a[i] / bc2;
            double update = mhat / (std::sqrt(vhat) + st.eps);
            if (decay) update += st.weight_decay * p.a[i];
            p.a[i] -= lr * update;
        }
    }
    ++st.step;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_lm_checkpoint(const LmModel& model, const std::string& path) {
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
    auto views = param_views(const_cast<LmModel&>(model));
    for (const auto& pv : views) tf.tensors.emplace_back(pv.name, *pv.m);
    save_tensor_file(tf, path);
}

LmModel load_lm_checkpoint(const std::string& path) {
    TensorFile tf = load_tensor_file(path);
    const std::string* kind = tf.find_meta("kind");
    if (!kind || *kind != "lm_checkpoint")
        throw std::runtime_error("not an lm checkpoint: " + path);
    LmConfig c;
    c.vocab_size = std::stoi(*tf.find_meta("vocab_size"));
    c.d_model = std::stoi(*tf.find_meta("d_model"));
    c.n_layers = std::stoi(*tf.find_meta("n_layers"));
    c.n_heads = std::stoi(*tf.find_meta("n_heads"));
    c.d_ff = std::stoi(*tf.find_meta("d_ff"));
    c.max_len = std::stoi(*tf.find_meta("max_len"));
    c.tie_embeddings = *tf.find_meta("tie_embeddings") == "1";
    c.ln_eps = std::stod(*tf.find_meta("ln_eps"));
    LmModel model = LmModel::init(c, 0);
    auto views = param_views(model);
    for (auto& pv : views) {
        const Mat* src = tf.find_tensor(pv.name);
        if (!src) throw std::runtime_error("checkpoint " + path + " missing tensor " + pv.name);
        if (!src->same_shape(*pv.m))
            throw std::runtime_error("checkpoint " + path + ": shape mismatch for " + pv.name);
        *pv.m = *src;
    }
    return model;
}

} // namespace tapter
