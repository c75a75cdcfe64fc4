#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "prunerec/diagnostics.hpp"
#include "prunerec/distill.hpp"
#include "prunerec/errors.hpp"
#include "prunerec/evalmetrics.hpp"
#include "prunerec/pipeline.hpp"
#include "prunerec/prune.hpp"
#include "prunerec/recdata.hpp"

namespace {

using namespace prunerec;

struct GlobalOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::optional<std::uint64_t> seed_override;
};

PipelineConfig load_config(const GlobalOpts& g) {
    PipelineConfig config;
    if (!g.config_path.empty()) config = parse_pipeline_config(g.config_path);
    if (g.seed_override) config.seed = *g.seed_override;
    return config;
}

std::string default_dataset_path(const GlobalOpts& g) {
    return g.out_dir + "/dataset.txt";
}

RecDataset load_data(const PipelineConfig& config, const GlobalOpts& g,
                     const std::string& explicit_path) {
    if (!explicit_path.empty()) return load_dataset(explicit_path);
    if (!config.dataset_path.empty()) return load_dataset(config.dataset_path);
    return load_dataset(default_dataset_path(g));
}

void ensure_out_dir(const GlobalOpts& g) {
    std::error_code ec;
    std::filesystem::create_directories(g.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + g.out_dir);
}

ModelConfig model_config_for(const PipelineConfig& config, const RecDataset& dataset) {
    ModelConfig mc = config.model;
    mc.vocab_size = dataset.vocab_size();
    mc.validate();
    return mc;
}

constexpr std::uint64_t kSaltInitCli = 1;
constexpr std::uint64_t kSaltTrainBaseCli = 2;
constexpr std::uint64_t kSaltObserveCli = 7;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"structured pruning toolkit for a small sequential recommender"};
    app.require_subcommand(1);
    app.fallthrough();  // accept global options after the subcommand too

    GlobalOpts g;
    app.add_option("--config", g.config_path, "key=value config file");
    app.add_option("--out-dir", g.out_dir, "artifact output directory");
    std::uint64_t seed_flag = 0;
    auto* seed_opt = app.add_option("--seed", seed_flag, "override the master seed");

    std::string data_path, ckpt_path, out_path, split_name = "test";
    std::string strategies_csv = "prunerec,random,wanda,no_alpha,global_importance";
    std::string seeds_csv = "1,2,3,4,5";

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    gen->add_option("--out", out_path, "dataset output path (default <out-dir>/dataset.txt)");

    auto* train = app.add_subcommand("train-base", "train the base model from scratch");
    train->add_option("--data", data_path, "dataset file");

    auto* obs = app.add_subcommand("observe", "activation-concentration diagnostics");
    obs->add_option("--checkpoint", ckpt_path, "model checkpoint (default <out-dir>/base.prck)");
    obs->add_option("--data", data_path, "dataset file");

    auto* s1 = app.add_subcommand("stage1", "prune attention heads and hidden dims, then restore");
    s1->add_option("--checkpoint", ckpt_path, "input checkpoint (default <out-dir>/base.prck)");
    s1->add_option("--data", data_path, "dataset file");

    auto* s2 = app.add_subcommand("stage2", "prune MLP intermediate dims, then restore");
    s2->add_option("--checkpoint", ckpt_path, "input checkpoint (default <out-dir>/stage1.prck)");
    s2->add_option("--data", data_path, "dataset file");

    auto* s3 = app.add_subcommand("stage3", "remove layers greedily, then restore");
    s3->add_option("--checkpoint", ckpt_path, "input checkpoint (default <out-dir>/stage2.prck)");
    s3->add_option("--data", data_path, "dataset file");

    auto* ev = app.add_subcommand("eval", "rank-based evaluation of a checkpoint");
    ev->add_option("--checkpoint", ckpt_path, "model checkpoint (default <out-dir>/stage3.prck)");
    ev->add_option("--data", data_path, "dataset file");
    ev->add_option("--split", split_name, "train|valid|test (default test)");

    auto* pipe = app.add_subcommand("pipeline", "full base-train + three-stage pipeline");

    auto* cmp = app.add_subcommand("compare-baselines", "head-pruning strategy comparison");
    cmp->add_option("--strategies", strategies_csv, "comma-separated strategy list");
    cmp->add_option("--seeds", seeds_csv, "comma-separated seed list (>= 3)");

    auto* insp = app.add_subcommand("inspect-checkpoint", "print a checkpoint header");
    insp->add_option("checkpoint", ckpt_path, "checkpoint file")->required();

    CLI11_PARSE(app, argc, argv);
    if (*seed_opt) g.seed_override = seed_flag;

    try {
        const PipelineConfig config = load_config(g);

        if (gen->parsed()) {
            ensure_out_dir(g);
            const RecDataset ds = generate(config.data);
            const std::string path = out_path.empty() ? default_dataset_path(g) : out_path;
            save_dataset(ds, path);
            std::cout << "wrote " << path << " (" << ds.sequences.size()
                      << " sequences, " << ds.n_items << " items)\n";
        } else if (train->parsed()) {
            ensure_out_dir(g);
            const RecDataset ds = load_data(config, g, data_path);
            TransformerModel model =
                init_model(model_config_for(config, ds), derive_seed(config.seed, kSaltInitCli));
            DistillConfig dc = config.distill_base;
            dc.seed = derive_seed(config.seed, kSaltTrainBaseCli);
            const TrainReport tr = train_base(model, ds, dc);
            append_train_log(tr, g.out_dir + "/train_base.log", "base");
            save_checkpoint(model, g.out_dir + "/base.prck", CheckpointDtype::F64, "base",
                            "master=" + std::to_string(config.seed));
            std::cout << "trained base model: " << param_count(model, false)
                      << " non-embedding params, " << tr.steps.size() << " steps\n";
        } else if (obs->parsed()) {
            ensure_out_dir(g);
            const RecDataset ds = load_data(config, g, data_path);
            const std::string in = ckpt_path.empty() ? g.out_dir + "/base.prck" : ckpt_path;
            const TransformerModel model = load_checkpoint(in);
            const ConcentrationReport report =
                observe(model, ds, config.calib_b, kDefaultKGrid,
                        derive_seed(config.seed, kSaltObserveCli));
            save_concentration_report(report, g.out_dir + "/concentration.tsv");
            std::cout << "wrote " << g.out_dir << "/concentration.tsv ("
                      << report.rows.size() << " rows)\n";
        } else if (s1->parsed() || s2->parsed() || s3->parsed()) {
            ensure_out_dir(g);
            const RecDataset ds = load_data(config, g, data_path);
            const int stage = s1->parsed() ? 1 : s2->parsed() ? 2 : 3;
            const std::string default_in =
                stage == 1 ? "/base.prck" : stage == 2 ? "/stage1.prck" : "/stage2.prck";
            const std::string in = ckpt_path.empty() ? g.out_dir + default_in : ckpt_path;
            const TransformerModel model = load_checkpoint(in);
            const StageResult result =
                stage == 1   ? run_stage1(model, ds, config, g.out_dir)
                : stage == 2 ? run_stage2(model, ds, config, g.out_dir)
                             : run_stage3(model, ds, config, g.out_dir);
            const std::string out =
                g.out_dir + "/stage" + std::to_string(stage) + ".prck";
            save_checkpoint(result.model, out, CheckpointDtype::F64,
                            "stage" + std::to_string(stage),
                            "master=" + std::to_string(config.seed));
            std::cout << "stage" << stage << ": " << param_count(result.model, false)
                      << " non-embedding params, valid HR@20 "
                      << result.hr20_pre_restore << " -> " << result.hr20_post_restore
                      << (result.restored ? "" : " (restore skipped)") << "\n";
        } else if (ev->parsed()) {
            ensure_out_dir(g);
            const RecDataset ds = load_data(config, g, data_path);
            const std::string in = ckpt_path.empty() ? g.out_dir + "/stage3.prck" : ckpt_path;
            const TransformerModel model = load_checkpoint(in);
            const Split split = split_name == "train"   ? Split::Train
                                : split_name == "valid" ? Split::Valid
                                : split_name == "test"
                                    ? Split::Test
                                    : throw ContractError("eval: unknown split '" +
                                                          split_name + "'");
            const EvalReport report = evaluate(model, ds, split, {5, 10, 20});
            save_eval_report(report, g.out_dir + "/eval_" + split_name + ".txt");
            std::cout << "split=" << split_name << " n=" << report.n_evaluated
                      << " ppl=" << report.ppl << " hr@20=" << report.hr.at(20)
                      << " ndcg@20=" << report.ndcg.at(20) << "\n";
        } else if (pipe->parsed()) {
            const PipelineResult result = run_pipeline(config, g.out_dir);
            for (const LedgerRow& row : result.ledger)
                std::cout << row.stage << "\tparams=" << row.param_count_non_embedding
                          << "\thr@20=" << row.hr20 << "\tndcg@20=" << row.ndcg20 << "\n";
            std::cout << "test hr@20=" << result.final_eval.hr.at(20)
                      << " ndcg@20=" << result.final_eval.ndcg.at(20)
                      << " ppl=" << result.final_eval.ppl << "\n";
        } else if (cmp->parsed()) {
            std::vector<std::string> strategies;
            for (std::size_t pos = 0; pos <= strategies_csv.size();) {
                const auto comma = strategies_csv.find(',', pos);
                const auto end = comma == std::string::npos ? strategies_csv.size() : comma;
                if (end > pos) strategies.push_back(strategies_csv.substr(pos, end - pos));
                pos = end + 1;
            }
            std::vector<std::uint64_t> seeds;
            for (std::size_t pos = 0; pos <= seeds_csv.size();) {
                const auto comma = seeds_csv.find(',', pos);
                const auto end = comma == std::string::npos ? seeds_csv.size() : comma;
                if (end > pos) seeds.push_back(std::stoull(seeds_csv.substr(pos, end - pos)));
                pos = end + 1;
            }
            const ComparisonTable table =
                compare_baselines(config, strategies, seeds, g.out_dir);
            for (const auto& [strategy, med] : table.medians)
                std::cout << strategy << "\tmedian hr@20=" << med.first
                          << "\tmedian ndcg@20=" << med.second << "\n";
        } else if (insp->parsed()) {
            std::cout << inspect_checkpoint(ckpt_path);
        }
    } catch (const IoError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const Error& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
