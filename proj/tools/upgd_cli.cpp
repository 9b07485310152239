// Command-line front end: run experiments, search hyperparameter grids,
// score utility approximations, time updates, and reshape result CSVs.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "upgd/upgd.hpp"

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out;
    std::string data_dir;
    int64_t seed = -1;
    int64_t seeds = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool needs_config) {
    auto* c = cmd->add_option("--config", f.config_path, "run configuration file");
    if (needs_config) c->required();
    cmd->add_option("--seed", f.seed, "run a single specific seed");
    cmd->add_option("--seeds", f.seeds, "number of seeds (overrides the config)");
    cmd->add_option("--out", f.out, "output path (overrides the config)");
    cmd->add_option("--data-dir", f.data_dir,
                    "dataset directory (overrides UPGD_DATA_DIR and the config)");
}

upgd::RunConfig load_config(const CommonFlags& f) {
    upgd::RunConfig cfg = upgd::parse_config(upgd::read_text_file(f.config_path));
    upgd::resolve_data_dir(cfg, f.data_dir);
    if (!f.out.empty()) cfg.out = f.out;
    if (f.seeds >= 0) {
        cfg.seeds = uint64_t(f.seeds);
        upgd::finalize_config(cfg);
    }
    return cfg;
}

std::vector<uint64_t> seed_list(const CommonFlags& f, const upgd::RunConfig& cfg) {
    if (f.seed >= 0) return {uint64_t(f.seed)};
    std::vector<uint64_t> seeds(cfg.seeds);
    for (uint64_t s = 0; s < cfg.seeds; ++s) seeds[s] = s;
    return seeds;
}

int cmd_run(const CommonFlags& f) {
    upgd::RunConfig cfg = load_config(f);
    upgd::Dataset ds;
    const upgd::Dataset* dsp = nullptr;
    if (upgd::needs_dataset(cfg.problem)) {
        ds = upgd::load_run_dataset(cfg);
        dsp = &ds;
    }
    std::vector<upgd::RunRecord> records;
    for (uint64_t s : seed_list(f, cfg)) {
        records.push_back(upgd::run_experiment(cfg, s, dsp));
        const upgd::RunRecord& r = records.back();
        std::printf("%s seed=%llu windows=%zu final_acc=%.4f final_loss=%.6g "
                    "forgetting=%.4g plasticity_drop=%.4g ms/update=%.4f checksum=%016llx\n",
                    r.run_id.c_str(), (unsigned long long)r.seed, r.windows.size(),
                    r.windows.back().accuracy, r.windows.back().loss, r.forgetting,
                    r.loss_of_plasticity, r.per_update_ms, (unsigned long long)r.checksum);
    }
    upgd::emit_csv(records, cfg.out);
    std::printf("wrote %s\n", cfg.out.c_str());
    return 0;
}

int cmd_grid(const CommonFlags& f) {
    auto [base, space] = upgd::parse_grid_config(upgd::read_text_file(f.config_path));
    upgd::resolve_data_dir(base.cfg, f.data_dir);
    if (f.seeds >= 0) base.cfg.seeds = uint64_t(f.seeds);
    upgd::GridResult res = upgd::grid_search(base.cfg, space);
    std::string out = !f.out.empty() ? f.out : base.cfg.out;
    std::ofstream table(out, std::ios::binary);
    if (!table) throw upgd::IoError("cannot open '" + out + "' for writing");
    for (size_t a = 0; a < space.axes.size(); ++a) table << space.axes[a].first << ',';
    table << "mean_auc\n";
    for (const upgd::GridPoint& p : res.table) {
        for (const std::string& v : p.values) table << v << ',';
        table << upgd::detail::fmt_g10(p.mean_auc) << "\n";
    }
    table.flush();
    if (!table) throw upgd::IoError("write to '" + out + "' failed");
    std::printf("evaluated %zu configurations; best mean AUC %.6g\n", res.table.size(),
                res.best_auc);
    std::printf("best configuration:\n%s", upgd::serialize_config(res.best).c_str());
    std::printf("wrote %s\n", out.c_str());
    return 0;
}

int cmd_utility_quality(const CommonFlags& f) {
    upgd::RunConfig cfg = load_config(f);
    std::vector<uint64_t> seeds = seed_list(f, cfg);
    std::ofstream out(cfg.out, std::ios::binary);
    if (!out) throw upgd::IoError("cannot open '" + cfg.out + "' for writing");
    out << "seed,step,first_order,second_order,squared_grad,weight_mag,random_order\n";
    upgd::UtilityQualityRow full{}, quarter{};
    for (uint64_t s : seeds) {
        upgd::UtilityQualityResult res = upgd::utility_quality_run(cfg, s);
        for (const upgd::UtilityQualityRow& r : res.rows)
            out << s << ',' << r.step << ',' << upgd::detail::fmt_g10(r.first_order) << ','
                << upgd::detail::fmt_g10(r.second_order) << ','
                << upgd::detail::fmt_g10(r.squared_grad) << ','
                << upgd::detail::fmt_g10(r.weight_mag) << ','
                << upgd::detail::fmt_g10(r.random_order) << "\n";
        full.first_order += res.mean_full.first_order;
        full.second_order += res.mean_full.second_order;
        full.squared_grad += res.mean_full.squared_grad;
        full.weight_mag += res.mean_full.weight_mag;
        full.random_order += res.mean_full.random_order;
        quarter.first_order += res.mean_last_quarter.first_order;
        quarter.second_order += res.mean_last_quarter.second_order;
    }
    out.flush();
    if (!out) throw upgd::IoError("write to '" + cfg.out + "' failed");
    double n = double(seeds.size());
    std::printf("mean Spearman over full run (across %zu seeds):\n", seeds.size());
    std::printf("  first_order  %.4f\n  second_order %.4f\n  squared_grad %.4f\n"
                "  weight_mag   %.4f\n  random_order %.4f\n",
                full.first_order / n, full.second_order / n, full.squared_grad / n,
                full.weight_mag / n, full.random_order / n);
    std::printf("final quarter: first_order %.4f, second_order %.4f\n", quarter.first_order / n,
                quarter.second_order / n);
    std::printf("wrote %s\n", cfg.out.c_str());
    return 0;
}

int cmd_bench(const CommonFlags& f) {
    upgd::RunConfig cfg = load_config(f);
    uint64_t seed = f.seed >= 0 ? uint64_t(f.seed) : 0;
    upgd::BenchResult res = upgd::bench_update_time(cfg, seed);
    std::printf("%s: %.4f ms/update (stderr %.4f, %llu repetitions)\n",
                upgd::method_name(cfg.method), res.mean_ms, res.stderr_ms,
                (unsigned long long)res.reps);
    return 0;
}

int cmd_plot_data(const std::string& input, const std::string& out) {
    upgd::plot_data(input, out.empty() ? "plot.csv" : out);
    std::printf("wrote %s\n", out.empty() ? "plot.csv" : out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning optimization laboratory"};
    app.require_subcommand(1);

    CommonFlags run_f, grid_f, uq_f, bench_f;
    std::string plot_in, plot_out;

    auto* run = app.add_subcommand("run", "execute a configured experiment");
    add_common(run, run_f, true);
    auto* grid = app.add_subcommand("grid", "hyperparameter grid search by accuracy AUC");
    add_common(grid, grid_f, true);
    auto* uq = app.add_subcommand("utility-quality",
                                  "rank-correlate utility approximations against truth");
    add_common(uq, uq_f, true);
    auto* bench = app.add_subcommand("bench", "per-update timing benchmark");
    add_common(bench, bench_f, true);
    auto* plot = app.add_subcommand("plot-data", "average a result CSV into per-method series");
    plot->add_option("input", plot_in, "CSV produced by 'run'")->required();
    plot->add_option("--out", plot_out, "output path (default plot.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(run_f);
        if (grid->parsed()) return cmd_grid(grid_f);
        if (uq->parsed()) return cmd_utility_quality(uq_f);
        if (bench->parsed()) return cmd_bench(bench_f);
        if (plot->parsed()) return cmd_plot_data(plot_in, plot_out);
    } catch (const upgd::ConfigError& e) {
        std::fprintf(stderr, "ConfigError: %s\n", e.what());
        return 2;
    } catch (const upgd::StreamError& e) {
        std::fprintf(stderr, "StreamError: %s\n", e.what());
        return 3;
    } catch (const upgd::NumericError& e) {
        std::fprintf(stderr, "NumericError: %s\n", e.what());
        return 4;
    } catch (const upgd::IoError& e) {
        std::fprintf(stderr, "IoError: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
