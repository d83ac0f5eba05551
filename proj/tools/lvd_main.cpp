// lvd: desk-scale image-to-video latent diffusion toolkit
//
// subcommands: make-data, train-codec, train, sample, eval, ablate

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "lvd/eval.hpp"
#include "lvd/trainer.hpp"

namespace fs = std::filesystem;
using namespace lvd;

namespace {

Config load_config_or_default(const std::string& path) {
    return path.empty() ? Config::defaults() : Config::load(path);
}

RunOptions run_options_for(const ModelState& st, const Config& cfg, const std::string& out,
                           int64_t steps_override) {
    RunOptions opt;
    opt.out_dir = out;
    opt.batch = cfg.geti("train.batch");
    opt.checkpoint_every = cfg.geti("train.checkpoint_every");
    opt.log_every = cfg.geti("train.log_every");
    opt.cond_drop = cfg.getf("train.cond_drop");
    opt.seed = static_cast<uint64_t>(cfg.geti("train.seed"));
    switch (st.stage) {
        case Stage::codec:
            opt.lr = cfg.getf("train.lr_codec");
            opt.steps = cfg.geti("train.steps_codec");
            break;
        case Stage::image_adapter:
            opt.lr = cfg.getf("train.lr_adapter");
            opt.steps = cfg.geti("train.steps_adapter");
            break;
        case Stage::video_finetune:
            opt.lr = cfg.getf("train.lr_finetune");
            opt.steps = cfg.geti("train.steps_finetune");
            break;
    }
    if (steps_override > 0) opt.steps = steps_override;
    return opt;
}

void write_sample(const std::string& out_dir, const Tensor<float>& video,
                  const nlohmann::json& manifest) {
    fs::create_directories(out_dir);
    const int64_t L = video.shape[0];
    const int64_t per = video.numel() / L;
    for (int64_t l = 0; l < L; ++l) {
        Tensor<float> fr({3, video.shape[2], video.shape[3]});
        std::copy_n(&video.data[static_cast<size_t>(l * per)], per, fr.data.data());
        write_png_rgb(frame_path(out_dir, l), fr);
    }
    std::ofstream(out_dir + "/sample_manifest.json") << manifest.dump(2) << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"lvd: toy image-to-video latent diffusion"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "config file of key = value lines")
        ->check(CLI::ExistingFile);

    // make-data
    auto* mk = app.add_subcommand("make-data", "render a synthetic moving-shapes corpus");
    std::string mk_out;
    int64_t mk_clips = 8;
    uint64_t mk_seed = 0;
    mk->add_option("--out", mk_out, "corpus output directory")->required();
    mk->add_option("--clips", mk_clips, "number of clips");
    mk->add_option("--seed", mk_seed, "corpus seed");

    // train-codec
    auto* tc = app.add_subcommand("train-codec", "train the frame autoencoder from scratch");
    std::string tc_data, tc_out;
    int64_t tc_steps = 0;
    tc->add_option("--data", tc_data, "corpus directory")->required()->check(CLI::ExistingDirectory);
    tc->add_option("--out", tc_out, "run output directory")->required();
    tc->add_option("--steps", tc_steps, "override step count");

    // train
    auto* tr = app.add_subcommand("train", "run a diffusion training stage from a checkpoint");
    std::string tr_stage, tr_data, tr_ckpt, tr_out;
    int64_t tr_steps = 0;
    tr->add_option("--stage", tr_stage, "image_adapter or video_finetune")
        ->required()
        ->check(CLI::IsMember({"image_adapter", "video_finetune"}));
    tr->add_option("--data", tr_data, "corpus directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--checkpoint", tr_ckpt, "input checkpoint directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    tr->add_option("--out", tr_out, "run output directory")->required();
    tr->add_option("--steps", tr_steps, "override step count");

    // sample
    auto* sm = app.add_subcommand("sample", "animate an image into a video");
    std::string sm_image, sm_prompt, sm_ckpt, sm_out;
    uint64_t sm_seed = 0;
    int64_t sm_steps = 50;
    double sm_eta = 0.0, sm_guidance = 7.5;
    sm->add_option("--image", sm_image, "conditioning image (PNG)")
        ->required()
        ->check(CLI::ExistingFile);
    sm->add_option("--prompt", sm_prompt, "text prompt");
    sm->add_option("--seed", sm_seed, "sampling seed");
    sm->add_option("--steps", sm_steps, "DDIM steps");
    sm->add_option("--eta", sm_eta, "DDIM eta in [0,1]");
    sm->add_option("--guidance", sm_guidance, "classifier-free guidance scale");
    sm->add_option("--checkpoint", sm_ckpt, "checkpoint directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    sm->add_option("--out", sm_out, "sample output directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "fidelity metrics over a directory of samples");
    std::string ev_samples, ev_report, ev_ckpt;
    ev->add_option("--samples", ev_samples, "directory of sample directories")
        ->required()
        ->check(CLI::ExistingDirectory);
    ev->add_option("--report", ev_report, "report JSON path")->required();
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint for the embedding metric")
        ->required()
        ->check(CLI::ExistingDirectory);

    // ablate
    auto* ab = app.add_subcommand("ablate", "sample + evaluate one conditioning mode over a corpus");
    std::string ab_mode, ab_ckpt, ab_data, ab_out;
    uint64_t ab_seed = 0;
    int64_t ab_steps = 50;
    double ab_guidance = 7.5;
    ab->add_option("--mode", ab_mode, "full_tokens or cls_only")
        ->required()
        ->check(CLI::IsMember({"full_tokens", "cls_only"}));
    ab->add_option("--checkpoint", ab_ckpt, "checkpoint trained in that mode")
        ->required()
        ->check(CLI::ExistingDirectory);
    ab->add_option("--data", ab_data, "held-out corpus directory")
        ->required()
        ->check(CLI::ExistingDirectory);
    ab->add_option("--out", ab_out, "output directory (samples + report)")->required();
    ab->add_option("--seed", ab_seed, "base sampling seed");
    ab->add_option("--steps", ab_steps, "DDIM steps");
    ab->add_option("--guidance", ab_guidance, "guidance scale");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (mk->parsed()) {
        Config cfg = load_config_or_default(config_path);
        auto records = generate_corpus(mk_clips, mk_seed, mk_out, cfg.geti("data.clip_frames"),
                                       cfg.geti("video.size"), static_cast<int>(cfg.geti("data.fps")));
        std::cout << "wrote " << records.size() << " clips to " << mk_out << "\n";
        return 0;
    }

    if (tc->parsed()) {
        Config cfg = load_config_or_default(config_path);
        ModelState st = ModelState::create(cfg);
        Corpus corpus = load_corpus(tc_data);
        RunOptions opt = run_options_for(st, cfg, tc_out, tc_steps);
        run_stage(st, corpus, opt);
        std::cout << "codec stage done: step " << st.step << ", normalization " << st.normalization
                  << ", checkpoint " << tc_out << "/final\n";
        return 0;
    }

    if (tr->parsed()) {
        ModelState st = load_checkpoint(tr_ckpt);
        if (!config_path.empty())
            std::cerr << "note: model config comes from the checkpoint; --config ignored\n";
        advance_stage(st, stage_from(tr_stage));
        Corpus corpus = load_corpus(tr_data);
        RunOptions opt = run_options_for(st, st.config, tr_out, tr_steps);
        run_stage(st, corpus, opt);
        std::cout << stage_name(st.stage) << " done: step " << st.step << ", checkpoint " << tr_out
                  << "/final\n";
        return 0;
    }

    if (sm->parsed()) {
        ModelState st = load_checkpoint(sm_ckpt);
        Tensor<float> image = read_png_rgb(sm_image);
        SamplerConfig scfg{static_cast<int>(sm_steps), sm_eta, sm_guidance, sm_seed};
        Tensor<float> video = generate(st, image, sm_prompt, scfg);
        nlohmann::json manifest = {
            {"image_path", fs::absolute(sm_image).string()},
            {"prompt", sm_prompt},
            {"seed", sm_seed},
            {"steps", sm_steps},
            {"eta", sm_eta},
            {"guidance", sm_guidance},
            {"checkpoint", fs::absolute(sm_ckpt).string()},
            {"mode", to_string(st.mcfg.mode)},
        };
        write_sample(sm_out, video, manifest);
        std::cout << "wrote " << video.shape[0] << " frames to " << sm_out << "\n";
        return 0;
    }

    if (ev->parsed()) {
        ModelState st = load_checkpoint(ev_ckpt);
        EvalReport report;
        std::vector<fs::path> dirs;
        for (const auto& entry : fs::directory_iterator(ev_samples))
            if (entry.is_directory() && fs::exists(entry.path() / "sample_manifest.json"))
                dirs.push_back(entry.path());
        std::sort(dirs.begin(), dirs.end());
        if (dirs.empty()) throw std::runtime_error("eval: no sample directories under " + ev_samples);
        for (const auto& dir : dirs) {
            nlohmann::json manifest;
            std::ifstream(dir / "sample_manifest.json") >> manifest;
            Tensor<float> cond = read_png_rgb(manifest.at("image_path").get<std::string>());
            Tensor<float> video = load_sample_frames(dir.string());
            report.rows.push_back(
                fidelity_metrics(st.model->imgenc, video, cond, dir.filename().string()));
        }
        std::ofstream(ev_report) << report_to_json(report).dump(2) << "\n";
        const auto p = report.psnr_stat();
        std::cout << "evaluated " << report.rows.size() << " samples; mean first-frame PSNR " << p.mean
                  << " dB (report: " << ev_report << ")\n";
        return 0;
    }

    if (ab->parsed()) {
        ModelState st = load_checkpoint(ab_ckpt);
        if (to_string(st.mcfg.mode) != ab_mode)
            throw std::runtime_error("ablate: checkpoint was trained with cond.mode=" +
                                     to_string(st.mcfg.mode) + ", requested " + ab_mode);
        Corpus corpus;
        corpus.records = load_manifest(ab_data);
        EvalReport report;
        fs::create_directories(ab_out);
        for (size_t i = 0; i < corpus.records.size(); ++i) {
            const auto& rec = corpus.records[i];
            Tensor<float> cond = read_png_rgb(frame_path(rec.frame_dir, 0));
            SamplerConfig scfg{static_cast<int>(ab_steps), 0.0, ab_guidance,
                               ab_seed + static_cast<uint64_t>(i)};
            Tensor<float> video = generate(st, cond, rec.caption, scfg);
            const std::string dir = ab_out + "/" + rec.clip_id;
            nlohmann::json manifest = {
                {"image_path", fs::absolute(frame_path(rec.frame_dir, 0)).string()},
                {"prompt", rec.caption},
                {"seed", scfg.seed},
                {"steps", ab_steps},
                {"eta", 0.0},
                {"guidance", ab_guidance},
                {"checkpoint", fs::absolute(ab_ckpt).string()},
                {"mode", ab_mode},
            };
            write_sample(dir, video, manifest);
            report.rows.push_back(fidelity_metrics(st.model->imgenc, video, cond, rec.clip_id));
        }
        std::ofstream(ab_out + "/report.json") << report_to_json(report).dump(2) << "\n";
        const auto p = report.psnr_stat();
        std::cout << "ablate mode=" << ab_mode << " clips=" << report.rows.size()
                  << " mean_first_frame_psnr=" << p.mean << "\n";
        return 0;
    }

    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
