#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>

#include "sdm/checkpoint.hpp"
#include "sdm/config.hpp"
#include "sdm/image_io.hpp"
#include "sdm/inference.hpp"
#include "sdm/metrics.hpp"
#include "sdm/service.hpp"

namespace fs = std::filesystem;
using namespace sdm;

namespace {

struct SamplerFlags {
    std::optional<int> steps;
    std::optional<double> guidance_scale;
    std::optional<uint64_t> seed;
    std::optional<int> num_samples;
    bool no_clamp = false;
    bool no_guidance = false;

    void add(CLI::App* app) {
        app->add_option("--steps", steps, "Sampling steps (respaced)");
        app->add_option("--guidance-scale", guidance_scale, "Classifier-free guidance scale s");
        app->add_option("--seed", seed, "Sampling seed");
        app->add_option("--num-samples", num_samples, "Images per layout");
        app->add_flag("--no-clamp", no_clamp, "Do not clamp the predicted clean image to [-1, 1]");
        app->add_flag("--no-guidance", no_guidance, "Disable the unconditional branch");
    }

    SamplerConfig apply(SamplerConfig c) const {
        if (steps) c.steps = *steps;
        if (guidance_scale) c.guidance.scale = *guidance_scale;
        if (seed) c.seed = *seed;
        if (num_samples) c.num_samples = *num_samples;
        if (no_clamp) c.clamp_y0 = false;
        if (no_guidance) c.guidance.enabled = false;
        c.validate();
        return c;
    }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(2) << "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

torch::Tensor read_layout(const fs::path& path, const ModelConfig& model) {
    auto labels = raster_to_labels(read_png(path));
    if (labels.size(0) != model.image_size || labels.size(1) != model.image_size) {
        std::cerr << "note: layout " << path << " is " << labels.size(0) << "x" << labels.size(1)
                  << ", resized to " << model.image_size << "x" << model.image_size << " (nearest)\n";
        labels = resize_nearest(labels, model.image_size);
    }
    if (labels.max().item<int64_t>() >= model.num_classes) {
        throw std::runtime_error(path.string() + ": class id outside the model's " +
                                 std::to_string(model.num_classes) + " classes");
    }
    return labels;
}

void write_pngs(const std::vector<Png>& pngs, const fs::path& out_dir, const std::string& stem) {
    fs::create_directories(out_dir);
    for (size_t i = 0; i < pngs.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%03zu.png", stem.c_str(), i);
        write_file_bytes(out_dir / name, pngs[i]);
        std::cout << (out_dir / name).string() << "\n";
    }
}

ProgressCallback stderr_progress(bool quiet) {
    if (quiet) return {};
    return [](int done, int total) {
        if (done == total || done % 10 == 0) std::cerr << "\r" << done << "/" << total << std::flush;
        if (done == total) std::cerr << "\n";
    };
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semantic diffusion model: data, training, sampling, editing, evaluation and serving"};
    app.require_subcommand(1);

    std::optional<std::string> config_flag;
    std::optional<std::string> preset_flag;
    int threads = 0;
    bool quiet = false;
    app.add_option("--config", config_flag, "INI config file (default: $SDM_CONFIG)");
    app.add_option("--preset", preset_flag, "Starting values when no config file is used: desk or cpu16");
    app.add_option("--threads", threads, "Intra-op threads (0 = library default)");
    app.add_flag("-q,--quiet", quiet, "Less progress output");

    // make-data
    auto* make_data = app.add_subcommand("make-data", "Generate a procedural shapes dataset");
    std::optional<int> md_size, md_classes, md_count;
    std::optional<uint64_t> md_seed;
    std::string md_out;
    make_data->add_option("--size", md_size, "Image side length");
    make_data->add_option("--classes", md_classes, "Number of classes including background");
    make_data->add_option("--count", md_count, "Number of scenes");
    make_data->add_option("--seed", md_seed, "Base seed");
    make_data->add_option("--out", md_out, "Output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "Train a model");
    std::string tr_data, tr_out;
    std::optional<std::string> tr_resume, tr_conditioning, tr_phase;
    std::optional<int64_t> tr_steps, tr_stop_after, tr_finetune_start;
    std::optional<int> tr_batch;
    std::optional<double> tr_lr, tr_lambda, tr_dropout;
    std::optional<uint64_t> tr_seed;
    train->add_option("--data", tr_data, "Dataset directory (generated from [data] when omitted)");
    train->add_option("--out", tr_out, "Output directory for checkpoint.sdm and loss.log")->required();
    train->add_option("--resume", tr_resume, "Checkpoint to resume from");
    train->add_option("--steps", tr_steps, "Total optimizer steps");
    train->add_option("--stop-after", tr_stop_after, "Stop after this many completed steps");
    train->add_option("--batch-size", tr_batch, "Batch size");
    train->add_option("--lr", tr_lr, "Learning rate");
    train->add_option("--lambda-vlb", tr_lambda, "Weight of the variational term");
    train->add_option("--dropout-prob", tr_dropout, "Layout dropout probability");
    train->add_option("--dropout-phase", tr_phase, "from_scratch or finetune_only");
    train->add_option("--finetune-start", tr_finetune_start, "Step at which layout dropout starts");
    train->add_option("--conditioning", tr_conditioning, "spade or concat");
    train->add_option("--seed", tr_seed, "Training seed");

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "Sample images for a layout");
    std::string sa_ckpt, sa_layout, sa_out;
    SamplerFlags sa_flags;
    sample_cmd->add_option("--checkpoint", sa_ckpt, "Checkpoint file")->required();
    sample_cmd->add_option("--layout", sa_layout, "Palette-indexed layout PNG")->required();
    sample_cmd->add_option("--out", sa_out, "Output directory")->required();
    sa_flags.add(sample_cmd);

    // edit
    auto* edit_cmd = app.add_subcommand("edit", "Regenerate a masked region under an edited layout");
    std::string ed_ckpt, ed_source, ed_layout, ed_mask, ed_out;
    SamplerFlags ed_flags;
    edit_cmd->add_option("--checkpoint", ed_ckpt, "Checkpoint file")->required();
    edit_cmd->add_option("--source", ed_source, "Source RGB PNG")->required();
    edit_cmd->add_option("--layout", ed_layout, "Edited layout PNG")->required();
    edit_cmd->add_option("--mask", ed_mask, "Region mask PNG (nonzero = regenerate)")->required();
    edit_cmd->add_option("--out", ed_out, "Output directory")->required();
    ed_flags.add(edit_cmd);

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on held-out layouts");
    std::string ev_ckpt, ev_out;
    int ev_layouts = 200, ev_seeds = 4;
    SamplerFlags ev_flags;
    eval_cmd->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--out", ev_out, "Directory for report.json and report.txt");
    eval_cmd->add_option("--layouts", ev_layouts, "Held-out layouts")->capture_default_str();
    eval_cmd->add_option("--seeds-per-layout", ev_seeds, "Samples per layout")->capture_default_str();
    ev_flags.add(eval_cmd);

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Compare SPADE and concat decoders, guided and unguided");
    std::string ab_spade, ab_concat, ab_out;
    int ab_layouts = 200, ab_seeds = 4;
    SamplerFlags ab_flags;
    ablate_cmd->add_option("--spade", ab_spade, "SPADE-decoder checkpoint")->required();
    ablate_cmd->add_option("--concat", ab_concat, "Concat-input checkpoint")->required();
    ablate_cmd->add_option("--out", ab_out, "Directory for ablation.json and ablation.txt");
    ablate_cmd->add_option("--layouts", ab_layouts, "Held-out layouts")->capture_default_str();
    ablate_cmd->add_option("--seeds-per-layout", ab_seeds, "Samples per layout")->capture_default_str();
    ab_flags.add(ablate_cmd);

    // serve
    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP inference service");
    std::string sv_ckpt;
    std::optional<std::string> sv_host;
    std::optional<int> sv_port, sv_workers, sv_queue;
    serve_cmd->add_option("--checkpoint", sv_ckpt, "Checkpoint file")->required();
    serve_cmd->add_option("--host", sv_host, "Listen address");
    serve_cmd->add_option("--port", sv_port, "Listen port");
    serve_cmd->add_option("--workers", sv_workers, "Sampling worker threads");
    serve_cmd->add_option("--queue", sv_queue, "Maximum queued jobs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (threads > 0) torch::set_num_threads(threads);
        AppConfig cfg;
        if (auto path = resolve_config_path(config_flag)) {
            cfg = load_config(*path);
        } else {
            cfg = preset(preset_flag.value_or("desk"));
        }

        if (*make_data) {
            if (md_size) cfg.data.scene.image_size = *md_size;
            if (md_classes) cfg.data.scene.num_classes = *md_classes;
            if (md_count) cfg.data.count = *md_count;
            if (md_seed) cfg.data.seed = *md_seed;
            const auto ds = generate_dataset(cfg.data.scene, cfg.data.count, cfg.data.seed);
            save_dataset(ds, md_out);
            std::cout << "wrote " << ds.size() << " scenes to " << md_out << "\n";
        } else if (*train) {
            if (tr_steps) cfg.train.total_steps = *tr_steps;
            if (tr_batch) cfg.train.batch_size = *tr_batch;
            if (tr_lr) cfg.train.learning_rate = *tr_lr;
            if (tr_lambda) cfg.train.lambda_vlb = *tr_lambda;
            if (tr_dropout) cfg.train.dropout_prob = *tr_dropout;
            if (tr_phase) cfg.train.dropout_phase = dropout_phase_from_string(*tr_phase);
            if (tr_finetune_start) cfg.train.finetune_start_step = *tr_finetune_start;
            if (tr_conditioning) cfg.model.conditioning = conditioning_from_string(*tr_conditioning);
            if (tr_seed) cfg.train.seed = *tr_seed;
            const auto ds = tr_data.empty() ? generate_dataset(cfg.data.scene, cfg.data.count, cfg.data.seed)
                                            : load_dataset(tr_data);
            RunOptions opts;
            if (tr_resume) opts.resume_from = fs::path(*tr_resume);
            opts.stop_after = tr_stop_after;
            opts.quiet = quiet;
            const auto state = run_training(cfg.model, cfg.train, cfg.diffusion, ds, tr_out, opts);
            std::cout << "trained to step " << state.step << "; checkpoint " << (fs::path(tr_out) / "checkpoint.sdm").string()
                      << "\n";
        } else if (*sample_cmd) {
            const auto model = InferenceModel::from_checkpoint(load_checkpoint(sa_ckpt));
            const auto scfg = sa_flags.apply(cfg.sample);
            const auto labels = read_layout(sa_layout, model.config);
            write_pngs(generate_pngs(model, labels, scfg, stderr_progress(quiet)), sa_out, "sample");
        } else if (*edit_cmd) {
            const auto model = InferenceModel::from_checkpoint(load_checkpoint(ed_ckpt));
            const auto scfg = ed_flags.apply(cfg.sample);
            const auto source = raster_to_image(read_png(ed_source));
            const auto labels = read_layout(ed_layout, model.config);
            const auto mask = raster_to_mask(read_png(ed_mask));
            write_pngs(edit_pngs(model, source, labels, mask, scfg, stderr_progress(quiet)), ed_out, "edit");
        } else if (*eval_cmd) {
            const auto ckpt = load_checkpoint(ev_ckpt);
            const auto model = InferenceModel::from_checkpoint(ckpt);
            EvalSettings settings;
            settings.num_layouts = ev_layouts;
            settings.seeds_per_layout = ev_seeds;
            settings.sampler = ev_flags.apply(cfg.sample);
            const auto report = evaluate(model.denoiser, model.schedule, heldout_layouts(ckpt.scene_spec, settings),
                                         settings, model.config.image_channels, stderr_progress(quiet));
            const auto table = report.table(ckpt.scene_spec.class_names());
            std::cout << table;
            if (!ev_out.empty()) {
                fs::create_directories(ev_out);
                write_json(fs::path(ev_out) / "report.json", report.to_json());
                write_text(fs::path(ev_out) / "report.txt", table);
            }
        } else if (*ablate_cmd) {
            EvalSettings settings;
            settings.num_layouts = ab_layouts;
            settings.seeds_per_layout = ab_seeds;
            settings.sampler = ab_flags.apply(cfg.sample);
            const auto rows = run_ablation(standard_ablation(ab_spade, ab_concat), settings);
            const auto table = format_ablation_table(rows);
            std::cout << table;
            if (!ab_out.empty()) {
                fs::create_directories(ab_out);
                write_json(fs::path(ab_out) / "ablation.json", ablation_to_json(rows));
                write_text(fs::path(ab_out) / "ablation.txt", table);
            }
        } else if (*serve_cmd) {
            if (sv_host) cfg.serve.host = *sv_host;
            if (sv_port) cfg.serve.port = *sv_port;
            if (sv_workers) cfg.serve.workers = *sv_workers;
            if (sv_queue) cfg.serve.queue_capacity = *sv_queue;
            Service service(InferenceModel::from_checkpoint(load_checkpoint(sv_ckpt)), cfg.serve, cfg.sample);
            const int port = service.bind(cfg.serve.host, cfg.serve.port);
            std::cout << "listening on http://" << cfg.serve.host << ":" << port << std::endl;
            service.run();
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
