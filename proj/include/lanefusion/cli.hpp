#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lanefusion/attribution.hpp"
#include "lanefusion/metrics.hpp"
#include "lanefusion/pipeline.hpp"

namespace lanefusion::cli {

namespace fs = std::filesystem;

inline void require_file(const std::string& path) {
    if (!fs::exists(path)) throw std::runtime_error("file not found: " + path);
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << text;
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    int n = 16;
    uint64_t seed = 0;
    std::string out;
    int lanes = 3;
    double coverage = 0.015;
    int height = 128, width = 256;
};

inline void cmd_synth(const SynthArgs& a) {
    SyntheticConfig cfg;
    cfg.height = a.height;
    cfg.width = a.width;
    cfg.lane_count = a.lanes;
    cfg.coverage_ratio = a.coverage;
    fs::create_directories(fs::path(a.out) / "frames");
    Manifest manifest;
    std::vector<FrameRecord> frames(static_cast<size_t>(a.n));
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < a.n; ++i)
        frames[static_cast<size_t>(i)] =
            generate_synthetic_frame(derive_seed(a.seed, static_cast<uint64_t>(i)), cfg);
    for (int i = 0; i < a.n; ++i) {
        char stem[32];
        std::snprintf(stem, sizeof(stem), "frames/%06d", i);
        ManifestEntry e;
        e.image = std::string(stem) + "_image.png";
        e.cloud = std::string(stem) + "_cloud.bin";
        e.calib = std::string(stem) + "_calib.txt";
        e.lane_mask = std::string(stem) + "_lane.png";
        e.road_mask = std::string(stem) + "_road.png";
        const auto& f = frames[static_cast<size_t>(i)];
        save_image_tensor((fs::path(a.out) / e.image).string(), f.image);
        write_binary_file((fs::path(a.out) / e.cloud).string(), serialize_point_cloud(f.cloud));
        write_text((fs::path(a.out) / e.calib).string(), serialize_calibration(f.calib));
        save_mask((fs::path(a.out) / e.lane_mask).string(), f.lane_mask);
        save_mask((fs::path(a.out) / e.road_mask).string(), f.road_mask);
        manifest.frames.push_back(e);
    }
    write_manifest((fs::path(a.out) / "manifest.json").string(), manifest);
    std::cout << "wrote " << a.n << " synthetic frames to " << a.out << "\n";
}

// ---------------------------------------------------------------------------
// preprocess
// ---------------------------------------------------------------------------

struct PreprocessArgs {
    std::string manifest;
    std::string out;
    int knn = 3;
    int height = 128, width = 256;
};

inline void cmd_preprocess(const PreprocessArgs& a) {
    require_file(a.manifest);
    const Manifest src = read_manifest(a.manifest);
    const std::string src_dir = fs::path(a.manifest).parent_path().string();
    fs::create_directories(fs::path(a.out) / "maps");
    Manifest dst;
    std::vector<Tensor> maps(src.frames.size());
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < src.frames.size(); ++i) {
        FrameRecord f = load_frame(src_dir, src.frames[i]);
        SparseModalMap sp = project_points(f.cloud, f.calib, a.width, a.height);
        maps[i] = compose_modal_image(knn_complete(sp, a.knn)).to_tensor();
    }
    for (size_t i = 0; i < src.frames.size(); ++i) {
        ManifestEntry e = src.frames[i];
        char name[32];
        std::snprintf(name, sizeof(name), "maps/%06zu_lidar.png", i);
        save_image_tensor((fs::path(a.out) / name).string(), maps[i]);
        // point the copied entries back at the source files
        auto rebase = [&](const std::string& rel) {
            if (rel.empty()) return rel;
            return fs::relative(fs::absolute(fs::path(src_dir) / rel), fs::absolute(a.out)).string();
        };
        e.image = rebase(e.image);
        e.cloud = rebase(e.cloud);
        e.calib = rebase(e.calib);
        e.lane_mask = rebase(e.lane_mask);
        e.road_mask = rebase(e.road_mask);
        e.lidar_map = name;
        dst.frames.push_back(e);
    }
    write_manifest((fs::path(a.out) / "manifest.json").string(), dst);
    std::cout << "wrote " << dst.frames.size() << " dense maps to " << a.out << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;   // JSON file, or empty when --variant is used
    std::string variant;  // shortcut
    std::string data;
    std::string out;
    int epochs = 100;
    uint64_t seed = 0;
    int batch = 4;
    int base_width = 16;
    int augment = 0;  // extra augmented copies per training record
    int checkpoint_every = 0;
};

inline ArchitectureConfig resolve_config(const TrainArgs& a) {
    if (!a.config.empty()) {
        require_file(a.config);
        std::ifstream in(a.config);
        nlohmann::json j;
        in >> j;
        return ArchitectureConfig::from_json(j);
    }
    if (a.variant.empty()) throw std::runtime_error("train: need --config or --variant");
    return ArchitectureConfig::for_variant(variant_from_name(a.variant), a.base_width);
}

inline std::vector<FrameRecord> load_frames(const std::string& manifest_path,
                                            const std::vector<int>& indices) {
    const Manifest m = read_manifest(manifest_path);
    const std::string dir = fs::path(manifest_path).parent_path().string();
    std::vector<FrameRecord> out(indices.size());
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < indices.size(); ++i) {
        const int idx = indices[i];
        if (idx < 0 || static_cast<size_t>(idx) >= m.frames.size())
            throw std::runtime_error("frame index out of range");
        out[i] = load_frame(dir, m.frames[static_cast<size_t>(idx)]);
    }
    return out;
}

// Attach the pseudo image, then materialize augmented copies so geometric
// warps keep the modalities registered.
inline std::vector<TrainSample> build_training_set(const std::vector<FrameRecord>& frames,
                                                   const ArchitectureConfig& cfg, int augment,
                                                   uint64_t seed) {
    std::vector<TrainSample> out;
    std::vector<FrameRecord> prepared(frames.size());
#pragma omp parallel for schedule(dynamic)
    for (size_t i = 0; i < frames.size(); ++i) {
        prepared[i] = frames[i];
        if (cfg.has_lidar()) prepared[i].lidar = lidar_input_for(frames[i], cfg);
    }
    for (const auto& f : prepared) out.push_back(make_train_sample(f, cfg));
    if (augment > 0) {
        const size_t base = prepared.size();
        std::vector<TrainSample> extra(base * static_cast<size_t>(augment));
#pragma omp parallel for schedule(dynamic) collapse(2)
        for (size_t i = 0; i < base; ++i)
            for (int a = 0; a < augment; ++a) {
                AugmentationPlan plan = default_augmentation_plan(
                    derive_seed(seed, 1000003ull * i + static_cast<uint64_t>(a) + 1));
                extra[i * static_cast<size_t>(augment) + static_cast<size_t>(a)] =
                    make_train_sample(augment_frame(prepared[i], plan), cfg);
            }
        for (auto& s : extra) out.push_back(std::move(s));
    }
    return out;
}

inline void cmd_train(const TrainArgs& a) {
    require_file(a.data);
    ArchitectureConfig cfg = resolve_config(a);
    if (!a.variant.empty() && !a.config.empty())
        throw std::runtime_error("train: use either --config or --variant, not both");

    const Manifest m = read_manifest(a.data);
    const int n = static_cast<int>(m.frames.size());
    const DatasetSplit split = split_dataset(n, a.seed);
    std::vector<FrameRecord> train_frames = load_frames(a.data, split.train);
    std::vector<FrameRecord> val_frames = load_frames(a.data, split.val);

    std::vector<TrainSample> train = build_training_set(train_frames, cfg, a.augment, a.seed);
    std::vector<TrainSample> val = build_training_set(val_frames, cfg, 0, a.seed);

    Model model(cfg, derive_seed(a.seed, 0x6d6f64656cull));
    FitOptions opt;
    opt.epochs = a.epochs;
    opt.seed = a.seed;
    opt.batch_size = a.batch;
    fs::create_directories(a.out);
    if (a.checkpoint_every > 0) {
        opt.epoch_hook = [&](int epoch, Model& mm) {
            if ((epoch + 1) % a.checkpoint_every != 0) return;
            char name[48];
            std::snprintf(name, sizeof(name), "checkpoint_epoch%04d.ckpt", epoch + 1);
            mm.save((fs::path(a.out) / name).string());
        };
    }

    TrainReport report = fit(model, train, val, opt);
    model.save((fs::path(a.out) / "model.ckpt").string());
    write_text((fs::path(a.out) / "history.csv").string(), report.to_csv());
    std::ofstream cfg_out(fs::path(a.out) / "config.json");
    cfg_out << cfg.to_json().dump(2) << "\n";
    std::cout << "trained " << variant_name(cfg.variant) << " for " << a.epochs << " epochs, final loss "
              << report.epochs.back().loss << ", final train LAcc " << report.epochs.back().lane_acc
              << "\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string mode = "both";
    std::string split = "all";
    uint64_t seed = 0;
    std::string out = ".";
    std::string overlays;
};

inline std::vector<int> pick_split(const std::string& which, int n, uint64_t seed) {
    if (which == "all") {
        std::vector<int> idx(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
        return idx;
    }
    const DatasetSplit s = split_dataset(n, seed);
    if (which == "train") return s.train;
    if (which == "val") return s.val;
    if (which == "test") return s.test;
    throw std::runtime_error("unknown split: " + which);
}

inline void write_overlays(const std::string& dir, Model& model,
                           const std::vector<FrameRecord>& frames, EvalMode mode) {
    fs::create_directories(dir);
    const auto& cfg = model.config();
    const int64_t plane = static_cast<int64_t>(cfg.input_height) * cfg.input_width;
    for (size_t i = 0; i < frames.size(); ++i) {
        Tensor lidar = lidar_input_for(frames[i], cfg);
        ModalityMask which = mode == EvalMode::OnlyImage  ? ModalityMask::Lidar
                             : mode == EvalMode::OnlyPoints ? ModalityMask::Image
                                                            : ModalityMask::None;
        auto [img, lid] = mask_modality(frames[i].image, lidar, which);
        SegmentationOutput out = model.infer(img, lid.empty() ? nullptr : &lid);
        Tensor painted = frames[i].image;
        for (int64_t p = 0; p < plane; ++p) {
            if (std::exp(out.lane_logprob[plane + p]) <= 0.5) continue;
            painted[p] = 0.65f * painted[p] + 0.35f;                      // red up
            painted[plane + p] *= 0.5f;                                   // green down
            painted[2 * plane + p] *= 0.5f;                               // blue down
        }
        char name[32];
        std::snprintf(name, sizeof(name), "%06zu.png", i);
        save_image_tensor((fs::path(dir) / name).string(), painted);
    }
}

inline void cmd_eval(const EvalArgs& a) {
    require_file(a.checkpoint);
    require_file(a.data);
    Model model = Model::load(a.checkpoint);
    const Manifest m = read_manifest(a.data);
    const std::vector<int> idx = pick_split(a.split, static_cast<int>(m.frames.size()), a.seed);
    std::vector<FrameRecord> frames = load_frames(a.data, idx);
    const EvalMode mode = eval_mode_from_name(a.mode);
    MetricsReport r = evaluate(model, frames, mode);
    fs::create_directories(a.out);
    std::ofstream jf(fs::path(a.out) / "metrics.json");
    jf << metrics_to_json(r).dump(2) << "\n";
    write_text((fs::path(a.out) / "metrics.csv").string(), metrics_csv_header() + metrics_to_csv_row(r));
    if (!a.overlays.empty()) write_overlays(a.overlays, model, frames, mode);
    std::cout << metrics_csv_header() << metrics_to_csv_row(r);
}

// ---------------------------------------------------------------------------
// ablate: train the variant sweep, evaluate, emit the delta table
// ---------------------------------------------------------------------------

struct AblateArgs {
    std::string data;
    std::string variants = "V1,V2,V3,V4,V5,V3r,V4r,V3r+,V6";
    std::string out;
    int epochs = 40;
    uint64_t seed = 0;
    int batch = 4;
    int base_width = 8;
    int augment = 0;
};

inline void cmd_ablate(const AblateArgs& a) {
    require_file(a.data);
    std::vector<Variant> variants;
    {
        std::istringstream ss(a.variants);
        std::string tok;
        while (std::getline(ss, tok, ',')) variants.push_back(variant_from_name(tok));
    }
    if (std::find(variants.begin(), variants.end(), Variant::V1) == variants.end())
        variants.insert(variants.begin(), Variant::V1);  // the baseline is always needed

    const Manifest m = read_manifest(a.data);
    const DatasetSplit split = split_dataset(static_cast<int>(m.frames.size()), a.seed);
    std::vector<FrameRecord> train_frames = load_frames(a.data, split.train);
    std::vector<FrameRecord> val_frames = load_frames(a.data, split.val);
    std::vector<FrameRecord> test_frames = load_frames(a.data, split.test);

    fs::create_directories(a.out);
    std::string summary = "model,LAcc,Acc,mAcc,F2\n";
    std::string deltas = "model,metric,delta\n";
    std::map<Variant, MetricsReport> reports;
    for (Variant v : variants) {
        ArchitectureConfig cfg = ArchitectureConfig::for_variant(v, a.base_width);
        std::vector<TrainSample> train = build_training_set(train_frames, cfg, a.augment, a.seed);
        std::vector<TrainSample> val = build_training_set(val_frames, cfg, 0, a.seed);
        Model model(cfg, derive_seed(a.seed, 0x6d6f64656cull));
        FitOptions opt;
        opt.epochs = a.epochs;
        opt.seed = a.seed;
        opt.batch_size = a.batch;
        fit(model, train, val, opt);
        char ckpt[32];
        std::snprintf(ckpt, sizeof(ckpt), "%s.ckpt", variant_name(v));
        model.save((fs::path(a.out) / ckpt).string());
        MetricsReport r = evaluate(model, test_frames, EvalMode::Both);
        reports[v] = r;
        char row[160];
        std::snprintf(row, sizeof(row), "%s,%.2f,%.2f,%.2f,%.2f\n", variant_name(v), r.lacc * 100,
                      r.acc * 100, r.macc * 100, r.f2 * 100);
        summary += row;
        std::cout << row;
    }
    const MetricsReport& base = reports.at(Variant::V1);
    for (Variant v : variants) {
        if (v == Variant::V1) continue;
        const MetricsReport& r = reports.at(v);
        char row[256];
        std::snprintf(row, sizeof(row), "%s,LAcc,%.2f\n%s,Acc,%.2f\n%s,mAcc,%.2f\n%s,F2,%.2f\n",
                      variant_name(v), (r.lacc - base.lacc) * 100, variant_name(v),
                      (r.acc - base.acc) * 100, variant_name(v), (r.macc - base.macc) * 100,
                      variant_name(v), (r.f2 - base.f2) * 100);
        deltas += row;
    }
    write_text((fs::path(a.out) / "summary.csv").string(), summary);
    write_text((fs::path(a.out) / "deltas.csv").string(), deltas);
}

// ---------------------------------------------------------------------------
// attribute
// ---------------------------------------------------------------------------

struct AttributeArgs {
    std::string deltas;
    std::string out = ".";
};

inline void cmd_attribute(const AttributeArgs& a) {
    require_file(a.deltas);
    const DeltaTable table = parse_delta_csv(read_text_file(a.deltas));
    if (table.metrics.empty()) throw std::runtime_error("attribute: no usable rows in " + a.deltas);
    const FactorDesign design = build_design_matrix();
    std::vector<AttributionResult> results;
    for (const auto& metric : table.metrics) {
        Eigen::VectorXd d(FactorDesign::kSize);
        for (int i = 0; i < FactorDesign::kSize; ++i) d(i) = table.values.at(metric)[static_cast<size_t>(i)];
        results.push_back(solve_attribution(design, d));
    }
    fs::create_directories(a.out);
    const std::string csv = contributions_to_csv(design, table.metrics, results);
    write_text((fs::path(a.out) / "contributions.csv").string(), csv);
    std::ofstream jf(fs::path(a.out) / "contributions.json");
    jf << contributions_to_json(design, table.metrics, results).dump(2) << "\n";
    std::cout << csv;
}

// ---------------------------------------------------------------------------
// entry point: returns 0 on success, 1 on usage errors, 2 on runtime errors
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& argv) {
    CLI::App app{"LiDAR-camera fusion lane segmentation workbench"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* cs = app.add_subcommand("synth", "generate a synthetic dataset");
    cs->add_option("--n", synth.n, "number of frames")->required();
    cs->add_option("--seed", synth.seed, "rng seed");
    cs->add_option("--out", synth.out, "output directory")->required();
    cs->add_option("--lanes", synth.lanes, "lane stripe count (>=2)");
    cs->add_option("--coverage", synth.coverage, "target lidar pixel coverage ratio");
    cs->add_option("--height", synth.height, "image height");
    cs->add_option("--width", synth.width, "image width");
    cs->callback([&] { cmd_synth(synth); });

    PreprocessArgs prep;
    auto* cp = app.add_subcommand("preprocess", "project and densify point clouds");
    cp->add_option("--manifest", prep.manifest, "dataset manifest")->required();
    cp->add_option("--out", prep.out, "output directory")->required();
    cp->add_option("--knn", prep.knn, "neighbors for completion");
    cp->add_option("--height", prep.height, "map height");
    cp->add_option("--width", prep.width, "map width");
    cp->callback([&] { cmd_preprocess(prep); });

    TrainArgs train;
    auto* ct = app.add_subcommand("train", "train a variant");
    ct->add_option("--config", train.config, "architecture config JSON");
    ct->add_option("--variant", train.variant, "variant name (V1..V6, V3r, V4r, V3r+)");
    ct->add_option("--data", train.data, "dataset manifest")->required();
    ct->add_option("--epochs", train.epochs, "training epochs");
    ct->add_option("--seed", train.seed, "seed for split, init, shuffling");
    ct->add_option("--out", train.out, "output directory")->required();
    ct->add_option("--batch", train.batch, "batch size");
    ct->add_option("--base-width", train.base_width, "channel width of the first block");
    ct->add_option("--augment", train.augment, "augmented copies per training frame");
    ct->add_option("--checkpoint-every", train.checkpoint_every, "periodic checkpoints");
    ct->callback([&] { cmd_train(train); });

    EvalArgs ev;
    auto* ce = app.add_subcommand("eval", "evaluate a checkpoint");
    ce->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
    ce->add_option("--data", ev.data, "dataset manifest")->required();
    ce->add_option("--mode", ev.mode, "both | only_image | only_points");
    ce->add_option("--split", ev.split, "all | train | val | test");
    ce->add_option("--seed", ev.seed, "split seed (match training)");
    ce->add_option("--out", ev.out, "output directory");
    ce->add_option("--overlays", ev.overlays, "write prediction overlays here");
    ce->callback([&] { cmd_eval(ev); });

    AblateArgs ab;
    auto* ca = app.add_subcommand("ablate", "train and evaluate a variant sweep");
    ca->add_option("--data", ab.data, "dataset manifest")->required();
    ca->add_option("--variants", ab.variants, "comma separated variant list");
    ca->add_option("--out", ab.out, "output directory")->required();
    ca->add_option("--epochs", ab.epochs, "epochs per variant");
    ca->add_option("--seed", ab.seed, "seed");
    ca->add_option("--batch", ab.batch, "batch size");
    ca->add_option("--base-width", ab.base_width, "channel width");
    ca->add_option("--augment", ab.augment, "augmented copies per training frame");
    ca->callback([&] { cmd_ablate(ab); });

    AttributeArgs at;
    auto* cat = app.add_subcommand("attribute", "solve per-factor contributions from a delta table");
    cat->add_option("--deltas", at.deltas, "CSV with rows model,metric,delta")->required();
    cat->add_option("--out", at.out, "output directory");
    cat->callback([&] { cmd_attribute(at); });

    std::vector<std::string> args = argv;
    std::vector<char*> cargs;
    std::string prog = "lanefusion";
    cargs.push_back(prog.data());
    for (auto& s : args) cargs.push_back(s.data());
    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace lanefusion::cli
