// Pipeline orchestration: configuration, synthetic corpus/dataset
// generation, the staged runner behind the CLI, and analysis exports
// (PCA coordinates, embedding-distance report).
#pragma once

#include "tapter/finetune.hpp"
#include "tapter/tapter.hpp"

#include <iosfwd>

namespace tapter {

// ---------------------------------------------------------------------------
// synthetic world
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int general_words{100};
    int general_topics{5};
    int general_sentences{2400};

    int domain_categories{4};
    int train_terms_per_category{10};
    int dev_terms_per_category{4};
    bool category_suffixes{true}; // terms share a per-category suffix
    int subjects{18};
    int dev_subjects{6}; // tail of the subject pool: corpus + dev questions only
    int glossary_repeats_train{3}; // glossary sentences per train term
    int glossary_repeats_dev{1};   // per held-out term

    int qa_train{120};
    int qa_dev{36};
    int distractor_sentences{2};
    int dev_distractor_sentences{3}; // longer passages in the evaluation set
    int target_filler_facts{500};    // extra fact sentences outside the passages

    int polysemy_pairs{2};
    int twin_context_sentences{60}; // contexts emitted once per twin word

    uint64_t seed{7};
};

struct SyntheticData {
    WordSequence general_corpus;
    WordSequence target_corpus;
    std::string general_text;
    std::string target_text;
    std::vector<QaExample> qa_train;
    std::vector<QaExample> qa_dev;
    std::vector<std::string> polysemy_words;
    std::pair<std::string, std::string> twin_words;
};

SyntheticData generate_synthetic(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// qa dataset files: json array of {id, question, passage, answer_text,
// answer_start_char}
// ---------------------------------------------------------------------------

void save_qa_dataset(const std::vector<QaExample>& examples, const std::string& path);
std::vector<QaExample> load_qa_dataset(const std::string& path);

// ---------------------------------------------------------------------------
// analysis
// ---------------------------------------------------------------------------

struct PcaResult {
    Mat coords;    // n x k
    Vec explained; // fraction of total variance per component
};

// Mean-centered PCA via eigendecomposition of the covariance. Components
// are ordered by descending eigenvalue; each is flipped so its
// largest-magnitude entry is positive.
PcaResult pca_project(const Mat& points, int k);

// Mean l2 distance between corresponding rows, restricted to mask rows.
double avg_embedding_distance(const Mat& e1, const Mat& e2, const std::vector<uint8_t>& row_mask);

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
    uint64_t seed{42};
    std::string out_dir{"runs/default"};
    std::string stopwords_file; // empty = built-in list

    SyntheticSpec synthetic;
    int vocab_size{1400};
    FastTextConfig fasttext;
    std::string fasttext_pretrained; // optional warm-start vectors file
    LmConfig lm;

    TapterConfig pretrain; // selection seed/stopwords filled at run time
    int pretrain_epochs_general{10};
    int pretrain_epochs_target{4};

    FinetuneConfig finetune;
    int analysis_pca_components{2};
    int analysis_pca_tokens{50};

    static PipelineConfig load(const std::string& path);
    void save(const std::string& path) const;
    bool operator==(const PipelineConfig& other) const;
};

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

enum class Stage { Generate, TrainFasttext, InferEmbeddings, Pretrain, Finetune, Evaluate, Analyze };

const char* stage_name(Stage s);
bool parse_stage(std::string_view name, Stage& out);

struct StageOptions {
    std::string mode{"tapt"};   // pretrain: tapt | tapter
    std::string corpus{"target"}; // pretrain: general | target
    std::string init;           // pretrain/finetune/evaluate: checkpoint (relative to out_dir or absolute)
    std::string out_dir;        // overrides config.out_dir
    bool has_seed{false};
    uint64_t seed{0};
};

struct StageIo {
    std::vector<std::string> inputs;  // file names relative to out_dir
    std::vector<std::string> outputs;
};
StageIo stage_io(Stage stage, const StageOptions& opts);

// Runs one stage; artifacts land in the output directory. Returns 0 on
// success, 1 on usage/config errors, 2 when a dependency artifact is
// missing. Diagnostics go to err.
int run_stage(const PipelineConfig& cfg, Stage stage, const StageOptions& opts, std::ostream& err);

std::string metrics_report_string(const EvalReport& report);

} // namespace tapter
