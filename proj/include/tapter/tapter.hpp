// Additional pre-training with word-embedding regularization: a projection
// head maps static LM embeddings into the subword-embedding space, and an
// l2 penalty pulls them toward frozen target vectors during MLM training.
// reg_weight = 0 reduces to plain task-adaptive pre-training on the same
// code path.
#pragma once

#include "tapter/fasttext.hpp"
#include "tapter/mlm.hpp"

namespace tapter {

struct ProjectionHead {
    Mat w_f;           // d_ft x d_lm
    Mat b_f;           // 1 x d_ft
    double ln_eps{1e-12};

    int d_ft() const { return w_f.rows; }
    int d_lm() const { return w_f.cols; }
    static ProjectionHead init(int d_ft, int d_lm, uint64_t seed);
};

// (z - mean) / sqrt(population variance + eps); no trainable gain or bias.
Vec layer_norm(const Vec& z, double eps);

// f(z) = LN(W_f z + b_f)
Vec project(const ProjectionHead& head, const Vec& z);
Vec project(const ProjectionHead& head, const double* z, int d_lm);

struct RegSelectionConfig {
    double sample_rate{0.5};
    int min_len{3};            // de-marked code-point length threshold
    StopWordList stopwords;
    bool lowercase_match{true}; // fold the surface before the stop-word check
    uint64_t seed{0};
};

// Candidate positions: non-special tokens whose de-marked surface is not a
// stop word, has length >= min_len, and has a valid target row. Candidates
// are kept i.i.d. with sample_rate. Operates on pre-corruption ids.
std::vector<int> select_reg_targets(const std::vector<int>& original_ids,
                                    const SubwordVocab& vocab, const TargetEmbeddingTable& table,
                                    const RegSelectionConfig& cfg);

// Mean over R of || f(E[x_i]) - F[x_i] ||^2; empty R gives 0.
double reg_loss(const Mat& emb, const ProjectionHead& head, const TargetEmbeddingTable& table,
                const std::vector<int>& reg_positions, const std::vector<int>& original_ids);

struct ProjGrads {
    Mat w_f, b_f;
    static ProjGrads zeros_like(const ProjectionHead& head);
};

// Adds scale * d(reg_loss)/d{E, W_f, b_f} into the gradients, returns the
// raw (unscaled) reg loss.
double reg_loss_backward(const Mat& emb, const ProjectionHead& head,
                         const TargetEmbeddingTable& table, const std::vector<int>& reg_positions,
                         const std::vector<int>& original_ids, double scale, Mat& demb,
                         ProjGrads& pg);

struct JointResult {
    double total{0.0};
    double lm{0.0};
    double reg{0.0};
    LmGrads grads;
    ProjGrads proj_grads;
};

// total = lm_loss + reg_weight * reg_loss with exact gradients for every
// trainable tensor. The target table is constant. reg_weight = 0 yields
// exactly lm_loss and leaves the projection gradients zero.
JointResult joint_loss(const LmModel& model, const ProjectionHead& head, const MaskedBatch& batch,
                       const TargetEmbeddingTable& table, const std::vector<int>& reg_positions,
                       double reg_weight);

struct TapterConfig {
    double reg_weight{1.0}; // 0 = plain task-adaptive pre-training
    int epochs{4};
    int batch_size{16};
    int seq_len{64};
    int eval_interval{20};
    double mask_rate{0.15};
    double lr{5e-5};
    double warmup_proportion{0.06};
    double weight_decay{0.01};
    RegSelectionConfig selection;
    uint64_t seed{0};
};

struct CurveRow {
    long long step{0};
    double lm_train{0.0}, reg_train{0.0}, lm_dev{0.0}, reg_dev{0.0};
};

struct LearningCurve {
    std::vector<CurveRow> rows;
    void save_csv(const std::string& path) const; // header: step,lm_train,reg_train,lm_dev,reg_dev
    static LearningCurve load_csv(const std::string& path);
};

// Joint-loss pre-training over the tokenized corpus, chunked into fixed
// length sequences with a deterministic 90/10 train/dev split. Records the
// two loss terms on train (running mean since the previous record) and on
// the held-out split at step 0 and every eval_interval steps.
LearningCurve tapter_pretrain(LmModel& model, ProjectionHead& head, const SubwordVocab& vocab,
                              const WordSequence& corpus, const TargetEmbeddingTable& table,
                              const TapterConfig& cfg);

// Checkpoint with an optional projection-head section.
void save_checkpoint(const std::string& path, const LmModel& model,
                     const ProjectionHead* head = nullptr);
LmModel load_checkpoint(const std::string& path, ProjectionHead* head_out = nullptr);

} // namespace tapter
