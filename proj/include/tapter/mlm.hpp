// Miniature transformer encoder with a masked-language-modeling head,
// hand-written exact backward pass, and Adam with warmup/decay schedule.
// Everything is f64 and single-threaded for reproducibility.
#pragma once

#include "tapter/common.hpp"
#include "tapter/text.hpp"

namespace tapter {

struct LmConfig {
    int vocab_size{2000};
    int d_model{64};
    int n_layers{2};
    int n_heads{4};
    int d_ff{256};
    int max_len{128};
    bool tie_embeddings{true}; // MLM head weight shares the embedding matrix
    double ln_eps{1e-12};
};

struct EncoderLayer {
    Mat wq, wk, wv, wo; // d x d
    Mat bq, bk, bv, bo; // 1 x d
    Mat ln1_g, ln1_b;   // 1 x d, post-attention layer norm
    Mat w1;             // d_ff x d
    Mat b1;             // 1 x d_ff
    Mat w2;             // d x d_ff
    Mat b2;             // 1 x d
    Mat ln2_g, ln2_b;   // 1 x d, post-ffn layer norm
};

struct LmModel {
    LmConfig cfg;
    Mat tok_emb;             // V x d, the static word embeddings
    Mat pos_emb;             // max_len x d
    Mat emb_ln_g, emb_ln_b;  // 1 x d
    std::vector<EncoderLayer> layers;
    Mat head_w;              // V x d; empty when tied to tok_emb
    Mat head_b;              // 1 x V

    static LmModel init(const LmConfig& cfg, uint64_t seed);
    const Mat& output_weight() const { return cfg.tie_embeddings ? tok_emb : head_w; }
};

// Gradients mirror the model tensor-for-tensor.
using LmGrads = LmModel;
LmGrads zero_grads(const LmModel& model);

struct MaskedBatch {
    std::vector<int> input_ids;          // after corruption
    std::vector<int> original_ids;       // prediction targets
    std::vector<int> mask_positions;     // sorted, subset of [0, l)
    std::vector<uint8_t> attention_mask; // 1 = real token, 0 = padding
};

// Independently selects each non-special position with probability rate;
// of the selected: 80% become MASK, 10% a uniform random id, 10% stay.
// Resamples (with a derived seed) until at least one position is selected.
MaskedBatch mask_tokens(const std::vector<int>& ids, double rate, uint64_t seed,
                        const SubwordVocab& vocab);

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

struct LnCache {
    Vec mean, rstd; // per position
};

struct LayerCache {
    Mat in;               // l x d, layer input
    Mat q, k, v;          // l x d
    std::vector<Mat> probs; // per head, l x l attention rows
    Mat ctx;              // l x d, concatenated head outputs
    Mat attn_out;         // l x d, after output projection
    Mat res1;             // in + attn_out (pre layer norm)
    LnCache ln1;
    Mat h1;               // after ln1
    Mat ffn_pre;          // l x d_ff, pre-activation
    Mat ffn_act;          // l x d_ff
    Mat ffn_out;          // l x d
    Mat res2;             // h1 + ffn_out
    LnCache ln2;
    Mat out;              // l x d
};

struct ForwardCache {
    std::vector<int> ids;
    std::vector<uint8_t> attn;
    std::vector<int> mask_positions;
    Mat emb_sum; // l x d, token + positional embedding
    LnCache emb_ln;
    Mat h0;      // after embedding layer norm
    std::vector<LayerCache> layers;
    Mat hidden;  // l x d, final hidden states
    Mat logits;  // |mask_positions| x V
};

ForwardCache forward(const LmModel& model, const std::vector<int>& input_ids,
                     const std::vector<uint8_t>& attention_mask,
                     const std::vector<int>& mask_positions);
ForwardCache forward(const LmModel& model, const MaskedBatch& batch);

// Mean cross entropy of the masked-position logits against the original ids.
double lm_loss(const ForwardCache& cache, const MaskedBatch& batch);
// Gradient of lm_loss at the logits: (softmax - onehot) / |mask positions|.
Mat lm_loss_dlogits(const ForwardCache& cache, const MaskedBatch& batch);

// Exact gradients for every parameter. dlogits (|mask| x V) seeds the MLM
// head path; dhidden (l x d) seeds an extra gradient at the final hidden
// states (used by the span head). Either may be empty. Gradients accumulate
// into grads.
void backward(const LmModel& model, const ForwardCache& cache, const Mat& dlogits,
              const Mat& dhidden, LmGrads& grads);

// ---------------------------------------------------------------------------
// parameter registry (stable order, used by the optimizer and checkpoints)
// ---------------------------------------------------------------------------

struct ParamView {
    std::string name;
    Mat* m;
    bool decay; // weight decay applies (matrices yes, 1-row gains/biases no)
};
std::vector<ParamView> param_views(LmModel& model);

// ---------------------------------------------------------------------------
// Adam with linear warmup then linear decay to zero, decoupled weight decay
// ---------------------------------------------------------------------------

struct OptimizerState {
    double lr{5e-5};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weight_decay{0.01};
    double warmup_proportion{0.06};
    long long total_steps{0};
    long long step{0};
    std::vector<Mat> m, v; // first/second moments, same order as params

    static OptimizerState init(const std::vector<ParamView>& params, double lr,
                               double warmup_proportion, double weight_decay,
                               long long total_steps);
};

// Learning rate at the given step: 0 at step 0, peak at the end of warmup,
// then linearly down to 0 at total_steps.
double scheduled_lr(const OptimizerState& st, long long step);

void adam_step(const std::vector<ParamView>& params, const std::vector<ParamView>& grads,
               OptimizerState& st);

// ---------------------------------------------------------------------------
// checkpoints (bit-exact round trip)
// ---------------------------------------------------------------------------

void save_lm_checkpoint(const LmModel& model, const std::string& path);
LmModel load_lm_checkpoint(const std::string& path);

} // namespace tapter
