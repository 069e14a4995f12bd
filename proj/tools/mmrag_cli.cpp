// mmrag: ingest corpora, run the answering pipeline, score runs and build
// fine-tuning data.

#include <array>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmrag/core.hpp"
#include "mmrag/dataaug.hpp"
#include "mmrag/evaluation.hpp"
#include "mmrag/manifest.hpp"
#include "mmrag/model_client.hpp"
#include "mmrag/pipeline.hpp"
#include "mmrag/retrieval.hpp"

namespace fs = std::filesystem;
using namespace mmrag;

namespace {

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
    std::optional<double> budget_seconds;
    std::string templates_dir;
};

struct SourceOptions {
    std::string index_path;
    std::string corpus_path;
    std::string embedder_url;
    std::optional<std::size_t> dim;
};

struct BackendOptions {
    std::string backend = "";
    std::string model = "default";
    std::string api_key_env = "OPENAI_API_KEY";
};

void add_common(CLI::App* cmd, CommonOptions& o) {
    cmd->add_option("--config", o.config_path, "JSON config mirroring PipelineConfig fields")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Run seed");
    cmd->add_option("--workers", o.workers, "Conversations processed in parallel");
    cmd->add_option("--budget-seconds", o.budget_seconds, "Per-turn answer budget (default 30)");
    cmd->add_option("--templates", o.templates_dir, "Directory with prompt template overrides")
        ->check(CLI::ExistingDirectory);
}

void add_source(CLI::App* cmd, SourceOptions& o) {
    auto* idx = cmd->add_option("--index", o.index_path, "Index artifact written by 'ingest'")->check(CLI::ExistingFile);
    auto* corpus = cmd->add_option("--corpus", o.corpus_path, "Corpus JSONL, ingested on the fly")->check(CLI::ExistingFile);
    idx->excludes(corpus);
    cmd->add_option("--embedder", o.embedder_url, "OpenAI-compatible embeddings URL (default: hashing embedder)");
    cmd->add_option("--dim", o.dim, "Embedding dimension for on-the-fly ingestion");
}

void add_backend(CLI::App* cmd, BackendOptions& o, const std::string& name, const std::string& help) {
    cmd->add_option(name, o.backend, help)->required();
    cmd->add_option("--model", o.model, "Model name sent to HTTP backends");
    cmd->add_option("--api-key-env", o.api_key_env, "Environment variable holding the bearer token");
}

PipelineConfig resolve_config(const CommonOptions& o) {
    PipelineConfig c = o.config_path.empty() ? PipelineConfig{} : load_config(o.config_path);
    if (o.seed) c.seed = *o.seed;
    if (o.workers) c.workers = *o.workers;
    if (o.budget_seconds) c.answer_budget = Millis(static_cast<long long>(std::llround(*o.budget_seconds * 1000.0)));
    c.validate();
    return c;
}

std::shared_ptr<const Embedder> make_embedder(const SourceOptions& src, std::size_t dim) {
    if (!src.embedder_url.empty()) return std::make_shared<HttpEmbedder>(src.embedder_url, dim);
    return std::make_shared<HashingEmbedder>(dim);
}

struct LoadedSource {
    std::shared_ptr<const VectorIndex> index;
    std::shared_ptr<const Embedder> embedder;
};

LoadedSource load_source(const SourceOptions& src, PipelineConfig& config, RunManifest& manifest) {
    LoadedSource out;
    if (!src.index_path.empty()) {
        auto index = std::make_shared<VectorIndex>(load_index(src.index_path));
        out.embedder = make_embedder(src, index->dimension());
        out.index = std::move(index);
        manifest.add_input("index", src.index_path);
    } else {
        const std::size_t dim = src.dim.value_or(config.embedding_dim);
        out.embedder = make_embedder(src, dim);
        if (!src.corpus_path.empty()) {
            auto entries = load_corpus(src.corpus_path, *out.embedder);
            out.index = std::make_shared<VectorIndex>(entries.empty() ? VectorIndex(dim) : build_index(std::move(entries)));
            manifest.add_input("corpus", src.corpus_path);
        } else {
            out.index = std::make_shared<VectorIndex>(dim);
        }
    }
    config.embedding_dim = out.index->dimension();
    manifest.backends["embedder"] = out.embedder->id();
    return out;
}

PromptTemplates load_templates(const CommonOptions& o, RunManifest& manifest) {
    if (o.templates_dir.empty()) return {};
    for (const char* name : {"task1_qa.txt", "querygen.txt", "rerank.txt", "qa.txt"}) {
        const auto path = fs::path(o.templates_dir) / name;
        if (fs::exists(path)) manifest.add_input(std::string("template:") + name, path.string());
    }
    return load_prompt_templates(o.templates_dir);
}

std::shared_ptr<ChatBackend> open_backend(const BackendOptions& b, RunManifest& manifest, const std::string& role) {
    if (b.backend.rfind("mock:", 0) == 0) manifest.add_input(role + "_script", b.backend.substr(5));
    manifest.backends[role] = b.backend;
    return make_backend(b.backend, b.model, b.api_key_env);
}

std::shared_ptr<Judge> open_judge(const std::string& descriptor, bool three_way, const std::string& model,
                                  RunManifest& manifest) {
    if (descriptor.rfind("mock:", 0) == 0) manifest.add_input("judge_script", descriptor.substr(5));
    manifest.backends["judge"] = descriptor;
    return make_judge(descriptor, three_way, {}, model);
}

void write_json_file(const fs::path& path, const json& value) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out << value.dump(2) << '\n';
}

void write_dataset(const fs::path& path, const Dataset& data) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    for (const auto& s : data) out << to_json(s).dump() << '\n';
}

Dataset load_checked_dataset(const std::string& path, TaskKind task, bool need_ground_truth) {
    Dataset data = load_dataset(path);
    if (data.empty()) throw EmptyDataset();
    validate_dataset(data, task, need_ground_truth);
    return data;
}

// ---------------------------------------------------------------------------

int cmd_ingest(const std::string& corpus_path, const std::string& out_path, const SourceOptions& src,
               const CommonOptions& common) {
    PipelineConfig config = resolve_config(common);
    const auto embedder = make_embedder(src, src.dim.value_or(config.embedding_dim));
    auto entries = load_corpus(corpus_path, *embedder);
    const VectorIndex index = build_index(std::move(entries));
    save_index(index, out_path, embedder->id());
    std::cout << "indexed " << index.size() << " entries (dimension " << index.dimension() << ") hash "
              << file_hash(out_path) << '\n';
    return 0;
}

struct RunOptions {
    std::string task = "task2";
    std::string dataset;
    std::string out;
    std::string manifest_path;
    bool no_rerank = false;
    std::optional<std::size_t> queries;
    bool include_history_answers = false;
};

int cmd_run(const RunOptions& o, const SourceOptions& src, const BackendOptions& b, const CommonOptions& common) {
    RunManifest manifest;
    manifest.command = "run";
    manifest.started_at = utc_timestamp();
    const TaskKind task = parse_task_kind(o.task);
    PipelineConfig config = resolve_config(common);
    if (o.no_rerank) config.rerank_enabled = false;
    if (o.queries) config.query_samples = *o.queries;
    if (o.include_history_answers) config.include_history_answers = true;
    config.validate();

    const Dataset data = load_checked_dataset(o.dataset, task, false);
    manifest.add_input("dataset", o.dataset);
    auto source = load_source(src, config, manifest);
    auto templates = load_templates(common, manifest);
    auto backend = open_backend(b, manifest, "answer");
    manifest.config = to_json(config);
    manifest.seed = config.seed;
    manifest.flags = {{"task", to_string(task)},
                      {"no_rerank", o.no_rerank},
                      {"queries", config.query_samples},
                      {"include_history_answers", config.include_history_answers}};

    const Pipeline pipeline(config, {source.index, source.embedder, backend, templates, {}});
    const auto results = pipeline.run_dataset(data, task);
    const std::string run_id = manifest.run_id();

    std::ofstream out(o.out, std::ios::binary);
    if (!out) throw Error("cannot write '" + o.out + "'");
    std::size_t lines = 0;
    for (const auto& conv : results) {
        for (auto rec : conv) {
            rec.run_id = run_id;
            out << to_json(rec).dump() << '\n';
            ++lines;
        }
    }
    out.close();
    manifest.finished_at = utc_timestamp();
    json m = manifest.to_json();
    m["outputs"] = {{"answers", o.out}, {"lines", lines}};
    write_json_file(o.manifest_path.empty() ? o.out + ".manifest.json" : o.manifest_path, m);
    std::cout << "wrote " << lines << " answers to " << o.out << " (run " << run_id << ")\n";
    return 0;
}

struct EvalOptions {
    std::string answers;
    std::string dataset;
    std::string task = "task2";
    std::string judge = "oracle";
    std::string judge_model = "default";
    bool three_way = false;
    std::string out;
    std::string table;
};

int cmd_eval(const EvalOptions& o, const CommonOptions& common) {
    RunManifest manifest;
    const TaskKind task = parse_task_kind(o.task);
    const PipelineConfig config = resolve_config(common);
    const Dataset data = load_checked_dataset(o.dataset, task, true);
    const auto answers = load_answers(o.answers);
    auto judge = open_judge(o.judge, o.three_way, o.judge_model, manifest);
    const MetricsReport report = evaluate(answers, data, task, *judge, config);
    const std::string table = format_report_table(report);
    std::cout << table;
    if (!o.out.empty()) {
        json j = to_json(report);
        j["judge"] = judge->id();
        j["answers_hash"] = file_hash(o.answers);
        j["dataset_hash"] = file_hash(o.dataset);
        write_json_file(o.out, j);
    }
    if (!o.table.empty()) {
        std::ofstream t(o.table, std::ios::binary);
        t << table;
    }
    return 0;
}

int cmd_compare(const std::string& a, const std::string& b, const std::string& out) {
    const json cmp = to_json(compare_runs(load_report(a), load_report(b)));
    std::cout << cmp.dump(2) << '\n';
    if (!out.empty()) write_json_file(out, cmp);
    return 0;
}

struct BuildOptions {
    std::string task = "task1";
    std::string dataset;
    std::string out_dir;
    std::string judge = "oracle";
    std::string judge_model = "default";
    std::size_t paraphrases = 10;
    double train_fraction = 0.8;
    double refusal_keep = 1.0;
};

/// Runs fn per sample in parallel, wrapping failures with the sample id.
template <typename Fn>
auto per_sample(const Dataset& data, std::size_t workers, Fn fn) {
    using Result = decltype(fn(data.front()));
    std::vector<Result> out(data.size());
    Pipeline::parallel_for(data.size(), workers, [&](std::size_t i) {
        try {
            out[i] = fn(data[i]);
        } catch (const Error& e) {
            throw Error("sample '" + data[i].id + "': " + e.what());
        }
    });
    return out;
}

json split_summary(const Dataset& train, const Dataset& val) {
    std::set<std::string> ti, vi;
    for (const auto& s : train) ti.insert(s.image_ref);
    for (const auto& s : val) vi.insert(s.image_ref);
    return {{"train_samples", train.size()}, {"val_samples", val.size()},
            {"train_images", ti.size()},     {"val_images", vi.size()}};
}

json downsampling_summary(const OriginCounts& before, const OriginCounts& after, double keep) {
    return {{"keep_fraction", keep},
            {"before", to_json(before)},
            {"after", to_json(after)},
            {"refusal_retention", before.refusal_converted
                                      ? static_cast<double>(after.refusal_converted) /
                                            static_cast<double>(before.refusal_converted)
                                      : 1.0}};
}

int cmd_build(const BuildOptions& o, bool task1_only, const SourceOptions& src, const BackendOptions& b,
              const CommonOptions& common) {
    RunManifest manifest;
    manifest.command = task1_only ? "augment" : "build-finetune";
    manifest.started_at = utc_timestamp();
    const TaskKind task = task1_only ? TaskKind::Task1 : parse_task_kind(o.task);
    if (!task1_only && task == TaskKind::Task1) throw ConfigError("build-finetune covers task2/task3; use 'augment' for task1");
    PipelineConfig config = resolve_config(common);

    const Dataset data = load_checked_dataset(o.dataset, task, true);
    manifest.add_input("dataset", o.dataset);
    auto source = load_source(src, config, manifest);
    auto templates = load_templates(common, manifest);
    auto backend = open_backend(b, manifest, "answer");
    auto judge = open_judge(o.judge, false, o.judge_model, manifest);
    manifest.config = to_json(config);
    manifest.seed = config.seed;
    manifest.flags = {{"task", to_string(task)},
                      {"train_fraction", o.train_fraction},
                      {"refusal_keep", o.refusal_keep},
                      {"paraphrases", task1_only ? o.paraphrases : 0}};
    if (!(o.refusal_keep >= 0.0 && o.refusal_keep <= 1.0)) throw ConfigError("--refusal-keep must be in [0, 1]");

    const Pipeline pipeline(config, {source.index, source.embedder, backend, templates, {}});
    const auto [train, val] = split_by_image(data, {o.train_fraction, config.seed});
    fs::create_directories(o.out_dir);
    write_dataset(fs::path(o.out_dir) / "train_dataset.jsonl", train);
    write_dataset(fs::path(o.out_dir) / "val_dataset.jsonl", val);

    json files = json::object();
    json skipped = json::array();
    auto emit = [&](const std::string& name, const std::vector<FinetuneSample>& samples) {
        write_finetune_file((fs::path(o.out_dir) / name).string(), samples);
        files[name] = to_json(count_origins(samples));
    };
    json downsampling;

    if (task1_only) {
        auto flatten = [](std::vector<std::vector<FinetuneSample>> parts) {
            std::vector<FinetuneSample> out;
            for (auto& p : parts) out.insert(out.end(), p.begin(), p.end());
            return out;
        };
        auto train_qa = flatten(per_sample(train, config.workers, [&](const ConversationSample& s) {
            return augment_task1(s, pipeline, *judge, o.paraphrases);
        }));
        auto val_qa = flatten(per_sample(val, config.workers, [&](const ConversationSample& s) {
            return augment_task1(s, pipeline, *judge, 0);
        }));
        const auto before = count_origins(train_qa);
        train_qa = downsample_refusals(train_qa, o.refusal_keep, config.seed);
        downsampling = downsampling_summary(before, count_origins(train_qa), o.refusal_keep);
        emit("train_qa.jsonl", train_qa);
        emit("val_qa.jsonl", val_qa);
    } else {
        auto build_all = [&](const Dataset& part) {
            std::array<BuildResult, 3> out;  // querygen, rerank, qa
            auto per = per_sample(part, config.workers, [&](const ConversationSample& s) {
                const Dataset one{s};
                return std::array<BuildResult, 3>{build_querygen_data(one, pipeline),
                                                  build_rerank_data(one, pipeline, *judge),
                                                  build_qa_data(one, pipeline, *judge, task)};
            });
            for (auto& r : per) {
                for (std::size_t k = 0; k < 3; ++k) out[k].append(std::move(r[k]));
            }
            return out;
        };
        auto tr = build_all(train);
        auto va = build_all(val);
        const auto before = count_origins(tr[2].samples);
        tr[2].samples = downsample_refusals(tr[2].samples, o.refusal_keep, config.seed);
        downsampling = downsampling_summary(before, count_origins(tr[2].samples), o.refusal_keep);
        const char* names[] = {"querygen", "rerank", "qa"};
        for (std::size_t k = 0; k < 3; ++k) {
            emit(std::string("train_") + names[k] + ".jsonl", tr[k].samples);
            emit(std::string("val_") + names[k] + ".jsonl", va[k].samples);
            for (const auto& line : tr[k].skip_log) skipped.push_back(std::string(names[k]) + " " + line);
            for (const auto& line : va[k].skip_log) skipped.push_back(std::string(names[k]) + " " + line);
        }
    }

    manifest.finished_at = utc_timestamp();
    json m = manifest.to_json();
    m["split"] = split_summary(train, val);
    m["files"] = files;
    m["refusal_downsampling"] = downsampling;
    m["skipped"] = skipped;
    m["training"] = training_metadata(task);
    write_json_file(fs::path(o.out_dir) / "manifest.json", m);
    std::cout << "wrote fine-tuning data to " << o.out_dir << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-modal RAG answering and evaluation harness"};
    app.require_subcommand(1);

    CommonOptions common;
    SourceOptions source;
    BackendOptions backend;

    std::string ingest_corpus, ingest_out;
    auto* ingest = app.add_subcommand("ingest", "Embed a corpus and persist the index");
    ingest->add_option("--corpus", ingest_corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);
    ingest->add_option("--out", ingest_out, "Index artifact path")->required();
    ingest->add_option("--dim", source.dim, "Embedding dimension");
    ingest->add_option("--embedder", source.embedder_url, "OpenAI-compatible embeddings URL");
    ingest->add_option("--config", common.config_path, "JSON config")->check(CLI::ExistingFile);

    RunOptions run_opts;
    auto* run = app.add_subcommand("run", "Answer every turn of a dataset");
    run->add_option("--task", run_opts.task, "task1 | task2 | task3")->required();
    run->add_option("--dataset", run_opts.dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
    run->add_option("--out", run_opts.out, "Answers JSONL")->required();
    run->add_option("--manifest", run_opts.manifest_path, "Manifest path (default <out>.manifest.json)");
    run->add_flag("--no-rerank", run_opts.no_rerank, "Keep the first retrieved items instead of reranking");
    run->add_option("--queries", run_opts.queries, "Number of sampled retrieval queries");
    run->add_flag("--include-history-answers", run_opts.include_history_answers,
                  "Thread prior answers into Task3 history");
    add_common(run, common);
    add_source(run, source);
    add_backend(run, backend, "--backend", "mock:<script.json> or chat-completions URL");

    EvalOptions eval_opts;
    auto* eval = app.add_subcommand("eval", "Score an answers file");
    eval->add_option("--answers", eval_opts.answers, "Answers JSONL")->required()->check(CLI::ExistingFile);
    eval->add_option("--dataset", eval_opts.dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
    eval->add_option("--task", eval_opts.task, "task1 | task2 | task3")->required();
    eval->add_option("--judge", eval_opts.judge, "oracle | mock:<script.json> | URL");
    eval->add_option("--judge-model", eval_opts.judge_model, "Model name for HTTP judges");
    eval->add_flag("--three-way", eval_opts.three_way, "Judge grades Perfect / Acceptable / Incorrect");
    eval->add_option("--out", eval_opts.out, "Report JSON");
    eval->add_option("--table", eval_opts.table, "Report text table");
    eval->add_option("--config", common.config_path, "JSON config")->check(CLI::ExistingFile);
    eval->add_option("--workers", common.workers, "Parallel judge workers");

    std::string cmp_a, cmp_b, cmp_out;
    auto* compare = app.add_subcommand("compare", "Metric deltas and category transitions between two reports");
    compare->add_option("--a", cmp_a, "Baseline report JSON")->required()->check(CLI::ExistingFile);
    compare->add_option("--b", cmp_b, "Candidate report JSON")->required()->check(CLI::ExistingFile);
    compare->add_option("--out", cmp_out, "Comparison JSON");

    BuildOptions aug_opts;
    auto* augment = app.add_subcommand("augment", "Task1 refusal conversion and paraphrase augmentation");
    augment->add_option("--dataset", aug_opts.dataset, "Task1 dataset JSONL")->required()->check(CLI::ExistingFile);
    augment->add_option("--out-dir", aug_opts.out_dir, "Output directory")->required();
    augment->add_option("--judge", aug_opts.judge, "oracle | mock:<script.json> | URL");
    augment->add_option("--judge-model", aug_opts.judge_model, "Model name for HTTP judges");
    augment->add_option("--paraphrases", aug_opts.paraphrases, "Paraphrase labels requested per sample");
    augment->add_option("--train-fraction", aug_opts.train_fraction, "Train share of distinct images");
    augment->add_option("--refusal-keep", aug_opts.refusal_keep, "Fraction of refusal samples kept in train");
    add_common(augment, common);
    add_source(augment, source);
    add_backend(augment, backend, "--backend", "Answering backend");

    BuildOptions ft_opts;
    ft_opts.task = "task2";
    auto* build = app.add_subcommand("build-finetune", "Task2/3 query-generation, rerank and QA training data");
    build->add_option("--task", ft_opts.task, "task2 | task3")->required();
    build->add_option("--dataset", ft_opts.dataset, "Dataset JSONL")->required()->check(CLI::ExistingFile);
    build->add_option("--out-dir", ft_opts.out_dir, "Output directory")->required();
    build->add_option("--judge", ft_opts.judge, "oracle | mock:<script.json> | URL");
    build->add_option("--judge-model", ft_opts.judge_model, "Model name for HTTP judges");
    build->add_option("--train-fraction", ft_opts.train_fraction, "Train share of distinct images");
    build->add_option("--refusal-keep", ft_opts.refusal_keep, "Fraction of refusal QA samples kept in train");
    add_common(build, common);
    add_source(build, source);
    add_backend(build, backend, "--backend", "Answering backend");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) return cmd_ingest(ingest_corpus, ingest_out, source, common);
        if (*run) return cmd_run(run_opts, source, backend, common);
        if (*eval) return cmd_eval(eval_opts, common);
        if (*compare) return cmd_compare(cmp_a, cmp_b, cmp_out);
        if (*augment) return cmd_build(aug_opts, true, source, backend, common);
        if (*build) return cmd_build(ft_opts, false, source, backend, common);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
