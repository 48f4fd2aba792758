// Command-line front end: data generation, training, bank building, detection,
// evaluation, and hyperparameter sweeps. Commands compose through files only;
// every output directory receives the fully resolved configuration.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "viewalign/checkpoint.hpp"
#include "viewalign/config.hpp"
#include "viewalign/eval.hpp"
#include "viewalign/image_io.hpp"
#include "viewalign/memory_bank.hpp"

namespace fs = std::filesystem;
using namespace viewalign;

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string seed;
    std::string out;
    int workers = 1;
    bool deterministic = false;

    void attach(CLI::App* cmd, bool with_out = true) {
        cmd->add_option("--config", config_path, "JSON configuration file");
        cmd->add_option("--set", overrides, "override as key.path=value (repeatable)");
        cmd->add_option("--seed", seed, "override the run seed");
        cmd->add_option("--workers", workers, "worker threads for per-sample stages");
        cmd->add_flag("--deterministic", deterministic,
                      "force single-threaded, bit-reproducible execution");
        if (with_out) cmd->add_option("--out", out, "output directory")->required();
    }

    RunConfig load() const { return load_run_config(config_path, overrides, seed); }
    int effective_workers() const { return deterministic ? 1 : std::max(1, workers); }
};

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string levels_to_string(const std::vector<int>& levels) {
    std::string s;
    for (size_t i = 0; i < levels.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(levels[i]);
    }
    return s;
}

std::vector<std::pair<std::string, std::string>> config_echo(const RunConfig& cfg,
                                                             const std::string& ckpt_hash,
                                                             const std::string& bank_hash) {
    std::vector<std::pair<std::string, std::string>> echo;
    echo.emplace_back("seed", std::to_string(cfg.seed));
    echo.emplace_back("topology", topology_to_string(cfg.topology));
    echo.emplace_back("levels", levels_to_string(cfg.score.levels));
    std::string w;
    for (double x : cfg.score.resolved_weights()) {
        if (!w.empty()) w += ",";
        w += format_double(x);
    }
    echo.emplace_back("level_weights", w);
    echo.emplace_back("radius", std::to_string(cfg.model.radius));
    echo.emplace_back("lambda", format_double(cfg.train.lambda));
    echo.emplace_back("coreset_fraction", format_double(cfg.score.coreset_fraction));
    echo.emplace_back("smooth_sigma", format_double(cfg.score.smooth_sigma));
    echo.emplace_back("invert_steps", std::to_string(cfg.invert.steps));
    echo.emplace_back("t_extract", std::to_string(cfg.invert.t_extract));
    echo.emplace_back("align_enabled", cfg.model.align_enabled ? "true" : "false");
    echo.emplace_back("refine_enabled", cfg.model.refine_enabled ? "true" : "false");
    if (!ckpt_hash.empty()) echo.emplace_back("checkpoint_hash", ckpt_hash);
    if (!bank_hash.empty()) echo.emplace_back("bank_model_hash", bank_hash);
    return echo;
}

std::vector<MultiViewSample> load_split(const Dataset& ds, bool train_split) {
    std::vector<MultiViewSample> out;
    const auto& entries = train_split ? ds.train_entries() : ds.test_entries();
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(ds.load(e));
    return out;
}

// Inverts every training sample and pools per-level position vectors for the
// configured bank levels.
std::vector<LevelFeatureSet> extract_train_features(const Dataset& ds, const Denoiser& model,
                                                    const NoiseSchedule& schedule,
                                                    const InversionConfig& inv_cfg,
                                                    const std::vector<int>& levels) {
    const int latent_side = ds.scene().image_size / model.config().latent_factor;
    const auto plans = model.build_plans(ds.graph(), ds.calibration(), latent_side, latent_side);

    std::vector<LevelFeatureSet> sets(levels.size());
    for (size_t i = 0; i < levels.size(); ++i) sets[i].level_id = levels[i];

    for (const auto& entry : ds.train_entries()) {
        const MultiViewSample sample = ds.load(entry);
        const LatentState z0 = encode_latent(sample, model.config().latent_factor);
        const InversionResult inv =
            ddim_invert(z0, inv_cfg, schedule, model, ds.graph(), plans);
        for (size_t i = 0; i < levels.size(); ++i) {
            const int idx = levels[i] - 1;
            if (idx < 0 || idx >= static_cast<int>(inv.level_features.size()))
                throw LevelMismatch("bank level " + std::to_string(levels[i]) +
                                    " outside decoder range");
            sets[i].add(inv.level_features[static_cast<size_t>(idx)]);
        }
    }
    return sets;
}

MemoryBank build_bank_from_dataset(const Dataset& ds, const Denoiser& model,
                                   const NoiseSchedule& schedule, const RunConfig& cfg,
                                   const std::string& ckpt_hash) {
    const auto sets =
        extract_train_features(ds, model, schedule, cfg.invert, cfg.score.levels);
    MemoryBank bank = build_bank(sets, cfg.score);
    bank.checkpoint_hash = ckpt_hash;
    bank.invert_steps = cfg.invert.steps;
    bank.t_extract = cfg.invert.t_extract;
    bank.radius = model.config().radius;
    return bank;
}

void warn_on_hash_mismatch(const MemoryBank& bank, const std::string& ckpt_hash,
                           EvalReport* report) {
    if (!bank.checkpoint_hash.empty() && !ckpt_hash.empty() &&
        bank.checkpoint_hash != ckpt_hash) {
        const std::string msg =
            "memory bank was built from checkpoint " + bank.checkpoint_hash +
            " but scoring uses " + ckpt_hash + "; scores may be inconsistent";
        std::cerr << "warning: " << msg << "\n";
        if (report) report->warnings.push_back(msg);
    }
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

void cmd_gen_data(const CommonArgs& args) {
    const RunConfig cfg = args.load();
    DatasetSpec spec{cfg.scene, cfg.topology, cfg.counts};
    generate_dataset(spec, args.out);
    write_run_config(cfg, args.out);
    std::cout << "dataset written to " << args.out << " ("
              << cfg.counts.train_normal << " train, "
              << cfg.counts.test_normal + cfg.counts.test_defective << " test)\n";
}

void cmd_train(const CommonArgs& args, const std::string& data_dir) {
    const RunConfig cfg = args.load();
    const Dataset ds = load_dataset(data_dir);
    const auto samples = load_split(ds, /*train_split=*/true);
    const NoiseSchedule schedule = cfg.schedule();

    const int latent_channels = 3 * cfg.model.latent_factor * cfg.model.latent_factor;
    Denoiser model(cfg.model, latent_channels, cfg.seed);

    fs::create_directories(args.out);
    std::ofstream loss_log(fs::path(args.out) / "loss_log.csv");
    loss_log << "epoch,step,l_d,l_r,l_total\n";
    loss_log.flush();

    const TrainResult result =
        train(samples, ds.graph(), ds.calibration(), schedule, cfg.train, model,
              [&](const LossRecord& r) {
                  loss_log << r.epoch << "," << r.step << "," << format_double(r.l_d) << ","
                           << format_double(r.l_r) << "," << format_double(r.l_total) << "\n";
                  loss_log.flush();
              });

    const std::string ckpt_path = (fs::path(args.out) / "checkpoint.vackpt").string();
    save_checkpoint(ckpt_path, model, schedule, cfg.seed);
    write_run_config(cfg, args.out);

    const auto& first = result.epoch_means.front();
    const auto& last = result.epoch_means.back();
    std::cout << "trained " << result.steps.size() << " steps; epoch-mean l_d "
              << format_double(first.l_d) << " -> " << format_double(last.l_d)
              << "; checkpoint at " << ckpt_path << "\n";
}

void cmd_build_bank(const CommonArgs& args, const std::string& data_dir,
                    const std::string& ckpt_path) {
    const RunConfig cfg = args.load();
    const Dataset ds = load_dataset(data_dir);
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);

    const MemoryBank bank =
        build_bank_from_dataset(ds, ckpt.model, ckpt.schedule, cfg, ckpt.content_hash);
    fs::create_directories(args.out);
    const std::string bank_path = (fs::path(args.out) / "bank.vamem").string();
    save_bank(bank, bank_path);
    write_run_config(cfg, args.out);

    std::cout << "memory bank written to " << bank_path << " (levels:";
    for (const auto& l : bank.levels) std::cout << " " << l.level_id << "/" << l.count();
    std::cout << ")\n";
}

void cmd_detect(const CommonArgs& args, const std::string& ckpt_path,
                const std::string& bank_path, const std::string& sample_dir,
                std::string data_dir) {
    const RunConfig cfg = args.load();
    if (data_dir.empty()) data_dir = fs::path(sample_dir).parent_path().parent_path().string();
    const Dataset ds = load_dataset(data_dir);
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    const MemoryBank bank = load_bank(bank_path);
    warn_on_hash_mismatch(bank, ckpt.content_hash, nullptr);

    const bool has_mask = fs::exists(fs::path(sample_dir) / "mask_0.png");
    const MultiViewSample sample = ds.load_dir(sample_dir, has_mask);
    const int latent_side = ds.scene().image_size / ckpt.model.config().latent_factor;
    const auto plans = ckpt.model.build_plans(ds.graph(), ds.calibration(), latent_side,
                                              latent_side);
    const LatentState z0 = encode_latent(sample, ckpt.model.config().latent_factor);
    const InversionResult inv =
        ddim_invert(z0, cfg.invert, ckpt.schedule, ckpt.model, ds.graph(), plans);

    std::vector<FeatureMap> query;
    for (int id : cfg.score.levels) query.push_back(inv.level_features[static_cast<size_t>(id - 1)]);
    const AnomalyScores scores = score_sample(query, bank, cfg.score);

    fs::create_directories(args.out);
    const int64_t plane = static_cast<int64_t>(sample.height()) * sample.width();
    nlohmann::json summary;
    summary["sample"] = sample.sample_id;
    summary["sample_score"] = scores.sample_score;
    summary["view_scores"] = scores.view_scores;
    for (int v = 0; v < sample.num_views(); ++v) {
        Tensor map({sample.height(), sample.width()});
        std::copy(scores.pixel_maps.data() + v * plane,
                  scores.pixel_maps.data() + (v + 1) * plane, map.data());
        Tensor image({3, sample.height(), sample.width()});
        std::copy(sample.views.data() + v * 3 * plane,
                  sample.views.data() + (v + 1) * 3 * plane, image.data());
        export_anomaly_map(map, image,
                           (fs::path(args.out) / ("view_" + std::to_string(v))).string());
    }
    std::ofstream out(fs::path(args.out) / "scores.json");
    out << summary.dump(2) << "\n";
    write_run_config(cfg, args.out);
    std::cout << "sample score " << format_double(scores.sample_score) << "; maps under "
              << args.out << "\n";
}

EvalReport run_eval(const RunConfig& cfg, const Dataset& ds, const Denoiser& model,
                    const NoiseSchedule& schedule, const MemoryBank& bank,
                    const std::string& ckpt_hash, int workers, const std::string& out_dir) {
    EvalOptions opts;
    opts.workers = workers;
    opts.export_maps = cfg.eval_export_maps;
    opts.export_features = cfg.eval_export_features;
    opts.out_dir = out_dir;
    EvalReport report = evaluate(ds, model, schedule, bank, cfg.score, cfg.invert, opts);
    warn_on_hash_mismatch(bank, ckpt_hash, &report);
    report.config_echo = config_echo(cfg, ckpt_hash, bank.checkpoint_hash);
    return report;
}

void write_report(const EvalReport& report, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream txt(fs::path(out_dir) / "report.txt");
    txt << report.to_text();
    std::ofstream csv(fs::path(out_dir) / "report.csv");
    csv << report.to_csv();
}

void cmd_eval(const CommonArgs& args, const std::string& data_dir, const std::string& ckpt_path,
              const std::string& bank_path) {
    const RunConfig cfg = args.load();
    const Dataset ds = load_dataset(data_dir);
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    const MemoryBank bank = load_bank(bank_path);

    const EvalReport report = run_eval(cfg, ds, ckpt.model, ckpt.schedule, bank,
                                       ckpt.content_hash, args.effective_workers(), args.out);
    write_report(report, args.out);
    write_run_config(cfg, args.out);
    std::cout << report.to_text();
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, sep))
        if (!tok.empty()) out.push_back(tok);
    return out;
}

struct SweepRow {
    std::string value;
    EvalReport report;
};

void write_sweep_table(const std::vector<SweepRow>& rows, const std::string& axis,
                       const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ostringstream csv, txt;
    csv << axis << ",p_auroc,v_auroc,s_auroc,delta_p,delta_v,delta_s\n";
    txt << "sweep over " << axis << "\n";
    txt << "value\tP-AUROC\tV-AUROC\tS-AUROC\n";
    const EvalReport& base = rows.front().report;
    for (const auto& row : rows) {
        const EvalReport& r = row.report;
        csv << row.value << "," << format_double(r.p_auroc) << "," << format_double(r.v_auroc)
            << "," << format_double(r.s_auroc) << "," << format_double(r.p_auroc - base.p_auroc)
            << "," << format_double(r.v_auroc - base.v_auroc) << ","
            << format_double(r.s_auroc - base.s_auroc) << "\n";
        txt << row.value << "\t" << format_double(r.p_auroc) << "\t"
            << format_double(r.v_auroc) << "\t" << format_double(r.s_auroc) << "\n";
    }
    std::ofstream c(fs::path(out_dir) / ("sweep_" + axis + ".csv"));
    c << csv.str();
    std::ofstream t(fs::path(out_dir) / ("sweep_" + axis + ".txt"));
    t << txt.str();
    std::cout << txt.str();
}

void cmd_sweep(const CommonArgs& args, const std::string& axis, const std::string& values,
               const std::string& data_dir, const std::string& ckpt_path) {
    const RunConfig base_cfg = args.load();
    const Dataset ds = load_dataset(data_dir);
    std::vector<SweepRow> rows;

    if (axis == "radius") {
        LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
        for (const std::string& v : split(values, ',')) {
            RunConfig cfg = base_cfg;
            cfg.model.radius = std::stoi(v);
            ckpt.model.set_radius(cfg.model.radius);
            const MemoryBank bank =
                build_bank_from_dataset(ds, ckpt.model, ckpt.schedule, cfg, ckpt.content_hash);
            EvalReport rep = run_eval(cfg, ds, ckpt.model, ckpt.schedule, bank,
                                      ckpt.content_hash, args.effective_workers(), "");
            write_report(rep, (fs::path(args.out) / ("radius_" + v)).string());
            write_run_config(cfg, (fs::path(args.out) / ("radius_" + v)).string());
            rows.push_back({v, std::move(rep)});
        }
    } else if (axis == "layers") {
        LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
        for (const std::string& set_str : split(values, ';')) {
            RunConfig cfg = base_cfg;
            cfg.score.levels.clear();
            for (const std::string& tok : split(set_str, ',')) cfg.score.levels.push_back(std::stoi(tok));
            cfg.score.level_weights.clear();
            const MemoryBank bank =
                build_bank_from_dataset(ds, ckpt.model, ckpt.schedule, cfg, ckpt.content_hash);
            EvalReport rep = run_eval(cfg, ds, ckpt.model, ckpt.schedule, bank,
                                      ckpt.content_hash, args.effective_workers(), "");
            const std::string tag = "layers_" + levels_to_string(cfg.score.levels);
            write_report(rep, (fs::path(args.out) / tag).string());
            write_run_config(cfg, (fs::path(args.out) / tag).string());
            rows.push_back({set_str, std::move(rep)});
        }
    } else if (axis == "lambda") {
        const auto samples = load_split(ds, /*train_split=*/true);
        for (const std::string& v : split(values, ',')) {
            RunConfig cfg = base_cfg;
            cfg.train.lambda = std::stod(v);
            const NoiseSchedule schedule = cfg.schedule();
            const int latent_channels = 3 * cfg.model.latent_factor * cfg.model.latent_factor;
            Denoiser model(cfg.model, latent_channels, cfg.seed);
            train(samples, ds.graph(), ds.calibration(), schedule, cfg.train, model);
            const MemoryBank bank = build_bank_from_dataset(ds, model, schedule, cfg, "");
            EvalReport rep = run_eval(cfg, ds, model, schedule, bank, "",
                                      args.effective_workers(), "");
            write_report(rep, (fs::path(args.out) / ("lambda_" + v)).string());
            write_run_config(cfg, (fs::path(args.out) / ("lambda_" + v)).string());
            rows.push_back({v, std::move(rep)});
        }
    } else {
        throw ConfigParseError("sweep axis must be radius, layers, or lambda");
    }

    write_sweep_table(rows, axis, args.out);
    write_run_config(base_cfg, args.out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-view anomaly detection with homography-guided feature alignment"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, bank_args, detect_args, eval_args, sweep_args;
    std::string data_dir, ckpt_path, bank_path, sample_dir, axis, values, detect_data;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic multi-view dataset");
    gen_args.attach(gen);

    auto* tr = app.add_subcommand("train", "train the denoiser on a dataset's train split");
    train_args.attach(tr);
    tr->add_option("--data", data_dir, "dataset root")->required();

    auto* bb = app.add_subcommand("build-bank", "extract normal features into a memory bank");
    bank_args.attach(bb);
    bb->add_option("--data", data_dir, "dataset root")->required();
    bb->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();

    auto* det = app.add_subcommand("detect", "score one sample directory");
    detect_args.attach(det);
    det->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();
    det->add_option("--bank", bank_path, "memory bank file")->required();
    det->add_option("--sample", sample_dir, "sample directory (view_*.png)")->required();
    det->add_option("--data", detect_data, "dataset root (default: sample's grandparent)");

    auto* ev = app.add_subcommand("eval", "evaluate on a dataset's test split");
    eval_args.attach(ev);
    ev->add_option("--data", data_dir, "dataset root")->required();
    ev->add_option("--checkpoint", ckpt_path, "trained model checkpoint")->required();
    ev->add_option("--bank", bank_path, "memory bank file")->required();

    auto* sw = app.add_subcommand("sweep", "repeat bank building + evaluation over one axis");
    sweep_args.attach(sw);
    sw->add_option("--data", data_dir, "dataset root")->required();
    sw->add_option("--checkpoint", ckpt_path, "trained model checkpoint");
    sw->add_option("--axis", axis, "radius | layers | lambda")->required();
    sw->add_option("--values", values,
                   "comma-separated values; layers uses ';' between level sets")
        ->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return e.get_exit_code() == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) cmd_gen_data(gen_args);
        if (tr->parsed()) cmd_train(train_args, data_dir);
        if (bb->parsed()) cmd_build_bank(bank_args, data_dir, ckpt_path);
        if (det->parsed()) cmd_detect(detect_args, ckpt_path, bank_path, sample_dir, detect_data);
        if (ev->parsed()) cmd_eval(eval_args, data_dir, ckpt_path, bank_path);
        if (sw->parsed()) {
            if (axis != "lambda" && ckpt_path.empty())
                throw MissingInput("sweep over " + axis + " needs --checkpoint");
            cmd_sweep(sweep_args, axis, values, data_dir, ckpt_path);
        }
    } catch (const ConfigParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const MissingInput& e) {
        std::cerr << "missing input: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
