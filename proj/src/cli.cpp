#include "docmoe/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>

#include "docmoe/checkpoint.hpp"
#include "docmoe/config.hpp"
#include "docmoe/evalkit.hpp"
#include "docmoe/inference.hpp"

namespace docmoe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config_path;
    std::string out_dir;
    std::map<std::string, std::string> overrides;
    std::map<std::string, CLI::Option*> override_opts;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "JSON configuration file");
    sub->add_option("--out-dir", c.out_dir, "output directory")->required();
    for (const auto& k : config_keys()) c.override_opts[k.name] = sub->add_option("--" + k.name, c.overrides[k.name], k.help);
}

RunConfig resolve_config(const Common& c) {
    RunConfig cfg;
    if (!c.config_path.empty()) cfg.merge_file(c.config_path);
    for (const auto& [name, opt] : c.override_opts)
        if (opt->count() > 0) cfg.set(name, c.overrides.at(name));
    cfg.resolve();
    return cfg;
}

Corpus open_corpus(const std::string& path) {
    fs::path p = path;
    if (fs::is_directory(p)) p /= "manifest.json";
    try {
        return load_corpus(p);
    } catch (const ContractViolation& e) {
        throw CorruptionError(e.what());
    } catch (const IoError& e) {
        throw CorruptionError(e.what());
    }
}

MinimalModel open_model(const std::string& dir) {
    std::ifstream in(fs::path(dir) / "manifest.json");
    if (!in) throw CheckpointError("no model manifest in " + dir);
    std::string kind;
    try {
        kind = json::parse(in).value("kind", std::string());
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("unreadable model manifest: ") + e.what());
    }
    if (kind == "full") return export_minimal(load_checkpoint(dir).bundle);
    return load_minimal(dir);
}

std::unique_ptr<OcrAdapter> make_ocr(const RunConfig& cfg) {
    if (cfg.get<std::string>("ocr") == "command")
        return std::make_unique<CommandOcr>(cfg.get<std::string>("ocr_command"),
                                            std::chrono::milliseconds(cfg.get<long>("ocr_timeout_ms")));
    return std::make_unique<MockOcr>();
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

void check_arch(const ArchConfig& model, const Corpus& corpus) {
    if (corpus.manifest.patch_size != model.patch_size || corpus.manifest.channels != model.channels)
        throw ConfigError("corpus patch size/channels do not match the model");
}

// ---- commands --------------------------------------------------------------------------

int cmd_synth(const Common& c, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    const CorpusSpec spec = cfg.corpus_spec();
    const Corpus corpus = build_corpus(spec, static_cast<unsigned>(cfg.get<long>("workers")));
    write_corpus(corpus, c.out_dir);
    cfg.echo_to(c.out_dir);
    out << "wrote " << corpus.manifest.pages.size() << " pages to " << c.out_dir << "\n";
    return kExitOk;
}

int cmd_train(const Common& c, const std::string& corpus_path, const std::string& resume, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    const TrainConfig tc = cfg.train_config();
    const Corpus corpus = open_corpus(corpus_path);
    if (corpus.manifest.patch_size != tc.arch.patch_size || corpus.manifest.channels != tc.arch.channels)
        throw ConfigError("corpus patch_size/channels (" + std::to_string(corpus.manifest.patch_size) + "/" +
                          std::to_string(corpus.manifest.channels) + ") differ from the architecture");
    cfg.echo_to(c.out_dir);
    RunOptions opts;
    opts.out_dir = c.out_dir;
    if (!resume.empty()) opts.resume_from = resume;
    const long every = cfg.get<long>("log_interval");
    opts.on_step = [&out, every](long s, const LossBreakdown& l) {
        if (s % every == 0)
            out << "step " << s << " total " << l.total << " cycle " << l.cycle << " moe_ce " << l.moe_ce << " disc_X "
                << l.disc_X << " disc_Y " << l.disc_Y << "\n";
    };
    const auto result = run_training(tc, corpus, opts);
    out << "trained to step " << result.steps_done << "; checkpoint " << result.final_checkpoint.string() << "\n";
    return kExitOk;
}

int cmd_export(const Common& c, const std::string& checkpoint, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    MinimalModel m = export_minimal(ck.bundle);
    save_minimal(c.out_dir, m);
    cfg.echo_to(c.out_dir);
    out << "minimal model " << container_bytes(c.out_dir) << " bytes (checkpoint " << container_bytes(checkpoint)
        << " bytes)\n";
    return kExitOk;
}

int cmd_clean(const Common& c, const std::string& model_dir, const std::string& input, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    const MinimalModel m = open_model(model_dir);
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(input);
    }
    if (files.empty()) throw ConfigError("no PNG pages found at " + input);
    cfg.echo_to(c.out_dir);
    const unsigned workers = static_cast<unsigned>(cfg.get<long>("workers"));
    json pages = json::array();
    double total_ms = 0;
    for (const auto& f : files) {
        const ImageTensor page = read_png(f, m.arch.channels);
        const auto t0 = std::chrono::steady_clock::now();
        const ImageTensor cleaned = clean_page(m, page, workers);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        write_png(fs::path(c.out_dir) / f.filename(), cleaned);
        total_ms += ms;
        pages.push_back({{"file", f.filename().string()}, {"height", page.height()}, {"width", page.width()}, {"ms", ms}});
        out << f.filename().string() << ": " << page.height() << "x" << page.width() << " cleaned in " << std::fixed
            << std::setprecision(1) << ms << " ms\n";
    }
    const json lat{{"pages", pages},
                   {"mean_ms", total_ms / static_cast<double>(files.size())},
                   {"reference_seconds_per_page", 4.49}};
    write_text(fs::path(c.out_dir) / "latency.json", lat.dump(2) + "\n");
    return kExitOk;
}

int cmd_evaluate(const Common& c, const std::string& corpus_path, const std::string& model_dir,
                 const std::string& cleaned_dir, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    if (model_dir.empty() == cleaned_dir.empty()) throw ConfigError("evaluate needs exactly one of --model or --cleaned-dir");
    const Corpus corpus = open_corpus(corpus_path);
    std::optional<MinimalModel> model;
    if (!model_dir.empty()) {
        model = open_model(model_dir);
        check_arch(model->arch, corpus);
    }
    bool have_test = false;
    for (const auto& p : corpus.manifest.pages) have_test = have_test || (p.domain == PageDomain::Noisy && p.split == "test");
    cfg.echo_to(c.out_dir);
    std::vector<EvalPage> pages;
    for (const auto& p : corpus.manifest.pages) {
        if (p.domain != PageDomain::Noisy || (have_test && p.split != "test")) continue;
        EvalPage e;
        e.id = p.id;
        e.noisy = corpus.images.at(p.id);
        if (model) {
            e.cleaned = clean_page(*model, e.noisy, static_cast<unsigned>(cfg.get<long>("workers")));
            write_png(fs::path(c.out_dir) / "cleaned" / (p.id + ".png"), e.cleaned);
        } else {
            e.cleaned = read_png(fs::path(cleaned_dir) / (p.id + ".png"), corpus.manifest.channels);
        }
        if (auto it = corpus.references.find(p.id); it != corpus.references.end()) e.reference = it->second;
        pages.push_back(std::move(e));
    }
    if (pages.empty()) throw ConfigError("the corpus has no noisy pages to evaluate");
    const auto ocr = make_ocr(cfg);
    const bool with_refs = std::all_of(pages.begin(), pages.end(), [](const EvalPage& e) { return e.reference.has_value(); });
    json report{{"ocr", ocr->name()}, {"pages", pages.size()}};
    const EvalReport t3 = relative_ocr_report(pages, *ocr, ReferenceMode::CleanedVsOriginal);
    report["table3"] = {{"cleaned_vs_original", to_json(t3)}};
    out << "cleaned vs original: averaged improvement " << t3.averaged_improvement << "%\n";
    if (with_refs) {
        const EvalReport base = relative_ocr_report(pages, *ocr, ReferenceMode::OriginalVsNoisy);
        const EvalReport cl = relative_ocr_report(pages, *ocr, ReferenceMode::OriginalVsCleaned);
        report["table2"] = {{"original_vs_noisy", to_json(base)}, {"original_vs_cleaned", to_json(cl)}};
        out << "original vs noisy: " << base.averaged_improvement << "% mismatch, PSNR "
            << (base.mean_psnr ? std::to_string(*base.mean_psnr) : "n/a") << "\n";
        out << "original vs cleaned: " << cl.averaged_improvement << "% mismatch, PSNR "
            << (cl.mean_psnr ? std::to_string(*cl.mean_psnr) : "n/a") << "\n";
    } else {
        report["table2"] = nullptr;
    }
    write_text(fs::path(c.out_dir) / "report.json", report.dump(2) + "\n");
    return kExitOk;
}

int cmd_ablate(const Common& c, const std::string& model_dir, const std::string& corpus_path, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    const MinimalModel m = open_model(model_dir);
    const Corpus corpus = open_corpus(corpus_path);
    check_arch(m.arch, corpus);
    const auto want = static_cast<std::size_t>(cfg.get<long>("samples_per_class"));
    bool have_test = false;
    for (const auto& p : corpus.manifest.pages) have_test = have_test || (p.domain == PageDomain::Noisy && p.split == "test");
    std::map<NoiseClass, std::vector<ImageTensor>> by_class;
    for (const auto& p : corpus.manifest.pages) {
        if (p.domain != PageDomain::Noisy || (have_test && p.split != "test")) continue;
        auto& bucket = by_class[*p.noise];
        if (bucket.size() >= want) continue;
        const auto page = resize_to_patch_multiple(corpus.images.at(p.id), m.arch.patch_size);
        for (auto& r : extract_patches(page, m.arch.patch_size, m.arch.patch_size)) {
            if (bucket.size() >= want) break;
            bucket.push_back(std::move(r.patch));
        }
    }
    cfg.echo_to(c.out_dir);
    const GateAnalysis g = gate_analysis(m, by_class);
    write_text(fs::path(c.out_dir) / "gate_analysis.json", to_json(g).dump(2) + "\n");
    write_text(fs::path(c.out_dir) / "gate_correlations.csv", gate_matrices_csv(g));
    std::ostringstream summary;
    summary << "block,within_class_mean,cross_class_mean,degenerate_pairs\n";
    for (std::size_t b = 0; b < g.matrices.size(); ++b)
        summary << b << ',' << g.within_class_mean[b] << ',' << g.cross_class_mean[b] << ',' << g.degenerate_pairs[b] << '\n';
    write_text(fs::path(c.out_dir) / "gate_summary.csv", summary.str());
    out << "zero fraction " << g.zero_fraction << "\n";
    for (std::size_t b = 0; b < g.matrices.size(); ++b)
        out << "block " << b << ": within " << g.within_class_mean[b] << ", cross " << g.cross_class_mean[b] << "\n";
    return kExitOk;
}

}  // namespace

int run_command(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Unsupervised document image cleanup with a gated cycle-GAN"};
    app.require_subcommand(1);

    Common synth_c, train_c, export_c, clean_c, eval_c, ablate_c;
    std::string train_corpus, train_resume, export_ckpt, clean_model, clean_input, eval_corpus, eval_model, eval_cleaned,
        ablate_model, ablate_corpus;

    auto* synth = app.add_subcommand("synth-data", "render a synthetic corpus and its manifest");
    add_common(synth, synth_c);

    auto* train = app.add_subcommand("train", "train the full model on a corpus");
    add_common(train, train_c);
    train->add_option("--corpus", train_corpus, "corpus directory or manifest.json")->required();
    train->add_option("--resume", train_resume, "checkpoint directory to resume from");

    auto* exp = app.add_subcommand("export-minimal", "extract the inference subset of a checkpoint");
    add_common(exp, export_c);
    exp->add_option("--checkpoint", export_ckpt, "checkpoint directory")->required();

    auto* clean = app.add_subcommand("clean", "clean PNG pages");
    add_common(clean, clean_c);
    clean->add_option("--model", clean_model, "minimal model or checkpoint directory")->required();
    clean->add_option("--input", clean_input, "PNG file or directory of PNG files")->required();

    auto* eval = app.add_subcommand("evaluate", "relative OCR and PSNR report on a corpus");
    add_common(eval, eval_c);
    eval->add_option("--corpus", eval_corpus, "corpus directory or manifest.json")->required();
    eval->add_option("--model", eval_model, "model used to clean the noisy pages");
    eval->add_option("--cleaned-dir", eval_cleaned, "directory of already cleaned pages named <page id>.png");

    auto* ablate = app.add_subcommand("ablate-gates", "gate-response correlations and sparsity");
    add_common(ablate, ablate_c);
    ablate->add_option("--model", ablate_model, "minimal model or checkpoint directory")->required();
    ablate->add_option("--corpus", ablate_corpus, "corpus directory or manifest.json")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*synth) return cmd_synth(synth_c, out);
        if (*train) return cmd_train(train_c, train_corpus, train_resume, out);
        if (*exp) return cmd_export(export_c, export_ckpt, out);
        if (*clean) return cmd_clean(clean_c, clean_model, clean_input, out);
        if (*eval) return cmd_evaluate(eval_c, eval_corpus, eval_model, eval_cleaned, out);
        if (*ablate) return cmd_ablate(ablate_c, ablate_model, ablate_corpus, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const CheckpointError& e) {
        err << "format error: " << e.what() << "\n";
        return kExitCorrupt;
    } catch (const DivergenceError& e) {
        err << "divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return kExitUsage;
}

}  // namespace docmoe
