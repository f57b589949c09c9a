// Acceptance run: one PASS/FAIL line per criterion. Arguments select
// criteria by name (A1 ... A10); no arguments runs all of them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "docmoe/checkpoint.hpp"
#include "docmoe/evalkit.hpp"
#include "docmoe/inference.hpp"
#include "docmoe/objectives.hpp"
#include "docmoe/synth.hpp"
#include "docmoe/trainer.hpp"

using namespace docmoe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os.precision(precision);
    os << v;
    return os.str();
}

template <typename T>
Tensor<T> uniform_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<T> t(std::move(s));
    for (auto& v : t.vec()) v = static_cast<T>(d(rng));
    return t;
}

template <typename T>
void perturb(ModelBundle<T>& b, std::mt19937_64& rng, double amount) {
    std::uniform_real_distribution<double> d(-amount, amount);
    for (auto& [net, params] : b.networks())
        for (auto& [name, v] : params)
            for (auto& x : v.mutable_value().vec()) x += static_cast<T>(d(rng));
}

double rel(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

/// Central difference confirmed at a second step size; empty near a kink.
std::optional<double> central_difference(double& w, const std::function<double()>& f) {
    auto at = [&](double h) {
        const double orig = w;
        w = orig + h;
        const double up = f();
        w = orig - h;
        const double down = f();
        w = orig;
        return (up - down) / (2 * h);
    };
    const double coarse = at(1e-5), fine = at(2.5e-6);
    if (rel(coarse, fine, 1e-6) > 1e-5) return std::nullopt;
    return coarse;
}

// ---- A1 ---------------------------------------------------------------------------

Outcome gate_reduction() {
    std::mt19937_64 rng(101);
    double worst = 0;
    for (int draw = 0; draw < 100; ++draw) {
        ArchConfig a = ArchConfig::micro();
        a.patch_size = draw % 2 ? 8 : 16;
        a.n_blocks = 1 + draw % 3;
        ModelBundle<float> b(a, 1000 + draw);
        perturb(b, rng, 0.3);
        const auto x = uniform_tensor<float>({2, 1, std::size_t(a.patch_size), std::size_t(a.patch_size)}, rng);
        GateVars<float> ones;
        for (int k = 0; k < a.n_blocks; ++k) ones.push_back(ag::Var<float>(Tensor<float>({2, std::size_t(a.block_channels())}, 1.0f)));
        const auto gated = b.generator_H.forward(ag::Var<float>(x), &ones).value();
        const auto plain = b.generator_H.forward(ag::Var<float>(x), nullptr).value();
        double diff = 0, scale = 0;
        for (std::size_t i = 0; i < gated.size(); ++i) {
            diff = std::max(diff, std::abs(double(gated[i]) - plain[i]));
            scale = std::max(scale, std::abs(double(plain[i])));
        }
        worst = std::max(worst, diff / std::max(scale, 1e-12));
    }
    return {worst < 1e-5, "max relative deviation " + fmt(worst) + " over 100 draws (limit 1e-5)"};
}

// ---- A2 ---------------------------------------------------------------------------

Outcome gradient_oracle() {
    TrainConfig cfg;
    cfg.arch = ArchConfig::micro();
    cfg.batch_size = 3;
    ModelBundle<double> b(cfg.arch, 202);
    std::mt19937_64 rng(203);
    perturb(b, rng, 0.2);
    const auto x = uniform_tensor<double>({3, 1, 8, 8}, rng), y = uniform_tensor<double>({3, 1, 8, 8}, rng);
    const std::vector<int> labels{0, 1, 3};
    Trainer<double> tr(b, cfg);

    // generator side: adversarial + cycle + MoE terms
    tr.generator_objective(x, labels, y);
    const auto gparams = b.generator_side_params();
    std::vector<Tensor<double>> analytic;
    for (const auto& [name, v] : gparams) analytic.push_back(v.has_grad() ? v.grad() : Tensor<double>(v.shape()));
    auto gen_total = [&] { return tr.generator_objective(x, labels, y).total; };

    // discriminator side on fixed fakes
    const auto fx = uniform_tensor<double>({3, 1, 8, 8}, rng), fy = uniform_tensor<double>({3, 1, 8, 8}, rng);
    auto disc_graph = [&] {
        using V = ag::Var<double>;
        auto lx = adversarial_loss(b.disc_X.forward(V(x)), b.disc_X.forward(V(fx)), AdversarialMode::LeastSquares,
                                   AdversarialRole::Discriminator);
        auto ly = adversarial_loss(b.disc_Y.forward(V(y)), b.disc_Y.forward(V(fy)), AdversarialMode::LeastSquares,
                                   AdversarialRole::Discriminator);
        return ops::add(lx, ly);
    };
    const auto dparams = b.discriminator_params();
    for (auto [name, v] : dparams) v.zero_grad();
    disc_graph().backward();
    std::vector<Tensor<double>> d_analytic;
    for (const auto& [name, v] : dparams) d_analytic.push_back(v.grad());
    auto disc_total = [&] { return disc_graph().value()[0]; };

    double worst = 0;
    int skipped = 0;
    auto probe = [&](const nn::ParamList<double>& params, const std::vector<Tensor<double>>& grads,
                     const std::function<double()>& f, int wanted) {
        std::uniform_int_distribution<std::size_t> pick_p(0, params.size() - 1);
        for (int done = 0; done < wanted;) {
            const std::size_t p = pick_p(rng);
            auto v = params[p].second;
            std::uniform_int_distribution<std::size_t> pick(0, v.value().size() - 1);
            const std::size_t i = pick(rng);
            const auto numeric = central_difference(v.mutable_value()[i], f);
            if (!numeric) {
                ++skipped;
                continue;
            }
            worst = std::max(worst, rel(grads[p][i], *numeric, 1e-6));
            ++done;
        }
    };
    probe(gparams, analytic, gen_total, 50);
    probe(dparams, d_analytic, disc_total, 50);
    return {worst < 1e-3, "max relative error " + fmt(worst) + " on 50 generator-side and 50 discriminator coordinates (" +
                              std::to_string(skipped) + " kink coordinates redrawn; limit 1e-3)"};
}

// ---- A3 ---------------------------------------------------------------------------

Outcome loss_closed_forms() {
    LossWeights w;
    GateSet<double> z;
    z.gates.assign(9, std::vector<double>(256, 0.0));
    const double ce = moe_loss(std::vector<double>(4, 0.0), NoiseClass::Faded, z, z, w);
    const Shape s{2, 1, 30, 30};
    const double perfect = adversarial_loss(Tensor<double>(s, 1.0), Tensor<double>(s, 0.0), AdversarialMode::LeastSquares,
                                            AdversarialRole::Discriminator);
    std::mt19937_64 rng(303);
    const auto xr = uniform_tensor<double>({2, 1, 8, 8}, rng), yr = uniform_tensor<double>({2, 1, 8, 8}, rng);
    const double cyc = cycle_consistency_loss(xr, xr, yr, yr);

    double worst = 0;
    std::uniform_real_distribution<double> u(0, 3), lam(0, 20);
    for (int t = 0; t < 1000; ++t) {
        LossParts p{u(rng), u(rng), u(rng), u(rng), u(rng)};
        LossWeights lw{lam(rng), lam(rng), 0.1, 0.1};
        const double expect = p.gan_forward + p.gan_backward + lw.lambda_cyc * p.cycle + lw.lambda_moe * (p.moe_ce + p.moe_gate_l1);
        worst = std::max(worst, std::abs(total_objective(p, lw).total - expect));
    }
    const bool pass = std::abs(ce - std::log(4.0)) <= 1e-6 && std::abs(perfect) <= 1e-9 && cyc == 0.0 && worst <= 1e-6;
    return {pass, "uniform CE " + fmt(ce, 10) + " (ln 4 = " + fmt(std::log(4.0), 10) + "), perfect LS " + fmt(perfect) +
                      ", identity cycle " + fmt(cyc) + ", total deviation " + fmt(worst) + " over 1000 draws"};
}

// ---- A4 ---------------------------------------------------------------------------

Outcome history_buffer() {
    HistoryBuffer<float> hb(50, 404);
    std::size_t peak = 0;
    int incoming = 0, trials = 0;
    for (int i = 0; i < 100000; ++i) {
        const auto out = hb.push_and_sample(Tensor<float>({1}, static_cast<float>(i)));
        peak = std::max(peak, hb.size());
        if (i >= 50 && trials < 10000) {
            incoming += out[0] == static_cast<float>(i);
            ++trials;
        }
    }
    const double freq = double(incoming) / trials;
    return {peak <= 50 && std::abs(freq - 0.5) <= 0.05,
            "peak size " + std::to_string(peak) + " of 50 over 1e5 pushes, incoming returned " + fmt(freq) + " of 1e4"};
}

// ---- A5 ---------------------------------------------------------------------------

Outcome pipeline_identity() {
    std::mt19937_64 rng(505);
    bool exact = true;
    int pages = 0;
    for (auto [c, h, w] : std::vector<std::tuple<std::size_t, std::size_t, std::size_t>>{
             {1, 256, 256}, {1, 512, 768}, {3, 256, 512}, {1, 1024, 256}, {3, 512, 512}}) {
        ImageTensor page(uniform_tensor<float>({c, h, w}, rng, 0, 1), RangeTag::Unit);
        std::vector<ImageTensor> patches;
        for (auto& r : extract_patches(page, 256, 128)) patches.push_back(std::move(r.patch));
        exact = exact && stitch_patches(patches, StitchPlan::lattice(c, h, w, 256, 128)) == page;
        const PatchFn identity = [](const ImageTensor& p) { return p; };
        exact = exact && clean_page_with(identity, page, 256) == page;
        ++pages;
    }
    const std::size_t r300 = nearest_patch_multiple(300, 256), r700 = nearest_patch_multiple(700, 256);
    return {exact && r300 == 256 && r700 == 768, std::string(exact ? "bit-exact" : "NOT bit-exact") + " on " +
                                                     std::to_string(pages) + " pages; 300 -> " + std::to_string(r300) +
                                                     ", 700 -> " + std::to_string(r700)};
}

// ---- A6 ---------------------------------------------------------------------------

Outcome metric_oracles() {
    std::mt19937_64 rng(606);
    double worst = 0;
    std::uniform_int_distribution<int> dim(1, 10), len(2, 30), letter(0, 3);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t c = t % 2 ? 3 : 1, h = dim(rng), w = dim(rng);
        ImageTensor a(uniform_tensor<float>({c, h, w}, rng, 0, 1), RangeTag::Unit);
        ImageTensor b(uniform_tensor<float>({c, h, w}, rng, 0, 1), RangeTag::Unit);
        double se = 0;
        for (std::size_t i = 0; i < a.data.size(); ++i) se += std::pow(double(a.data[i]) - b.data[i], 2);
        worst = std::max(worst, rel(psnr(a, b), 10 * std::log10(a.data.size() / se), 1e-12));

        std::vector<double> u(len(rng)), v(u.size());
        for (auto& x : u) x = uniform_tensor<double>({1}, rng, -5, 5)[0];
        for (auto& x : v) x = uniform_tensor<double>({1}, rng, -5, 5)[0];
        const double mu = std::accumulate(u.begin(), u.end(), 0.0) / u.size();
        const double mv = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double cuv = 0, cuu = 0, cvv = 0;
        for (std::size_t i = 0; i < u.size(); ++i) {
            cuv += (u[i] - mu) * (v[i] - mv);
            cuu += (u[i] - mu) * (u[i] - mu);
            cvv += (v[i] - mv) * (v[i] - mv);
        }
        worst = std::max(worst, std::abs(pearson_correlation(u, v) - cuv / std::sqrt(cuu * cvv)));

        WordList ref(len(rng)), cand(len(rng));
        for (auto& s : ref) s = std::string(1, char('a' + letter(rng)));
        for (auto& s : cand) s = std::string(1, char('a' + letter(rng)));
        std::map<std::string, int> rc, cc;
        for (auto& s : ref) ++rc[s];
        for (auto& s : cand) ++cc[s];
        int common = 0;
        for (auto& [s, n] : rc) common += std::min(n, cc[s]);
        worst = std::max(worst, std::abs(word_mismatch_percent(ref, cand) - 100.0 * (1.0 - double(common) / ref.size())));
    }
    const double ex_psnr = psnr(ImageTensor::filled(1, 4, 4, 0.0f), ImageTensor::filled(1, 4, 4, 0.5f));
    const double ex_r = pearson_correlation({1, 2, 3}, {1, 2, 4});
    const double ex_w = word_mismatch_percent({"the", "cat", "sat"}, {"the", "cat", "sot"});
    const bool pass = worst <= 1e-9 && std::abs(ex_psnr - 6.0206) <= 1e-4 && std::abs(ex_r - 9 / std::sqrt(84.0)) <= 1e-4 &&
                      std::abs(ex_w - 100.0 / 3) <= 1e-2;
    return {pass, "max oracle deviation " + fmt(worst) + " over 1000 instances; examples " + fmt(ex_psnr, 6) + " dB, r " +
                      fmt(ex_r, 6) + ", " + fmt(ex_w, 5) + "%"};
}

// ---- A7, A8, A10 ---------------------------------------------------------------------

CorpusSpec toy_corpus_spec() {
    CorpusSpec s;
    s.seed = 7;
    s.page_height = 192;
    s.page_width = 192;
    s.patch_size = 64;
    s.stride = 32;
    s.clean_pages = 100;
    s.noisy_pages = {{NoiseClass::SaltPepper, 50}, {NoiseClass::Blurred, 50}};
    s.test_pages_per_class = 10;
    s.noise = {{NoiseClass::SaltPepper, NoiseSpec::salt_pepper(0.1)}, {NoiseClass::Blurred, NoiseSpec::blurred(1.5)}};
    return s;
}

TrainConfig toy_train_config(double lambda_g) {
    TrainConfig c;
    c.arch = ArchConfig::toy();
    c.batch_size = 4;
    c.steps = 2000;
    c.seed = 11;
    c.weights.lambda_gH = lambda_g;
    c.weights.lambda_gF = lambda_g;
    return c;
}

struct ToyRun {
    LoadedCheckpoint checkpoint;
    MinimalModel minimal;
    double seconds = 0;
};

ToyRun train_toy(const Corpus& corpus, double lambda_g, const fs::path& dir) {
    fs::remove_all(dir);
    RunOptions opts{dir, std::nullopt, [](long s, const LossBreakdown& l) {
                        if (s % 250 == 0) std::cerr << "  step " << s << " total " << l.total << "\n";
                    }};
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = run_training(toy_train_config(lambda_g), corpus, opts);
    ToyRun run{load_checkpoint(result.final_checkpoint), MinimalModel(ArchConfig::toy()), 0};
    run.minimal = export_minimal(run.checkpoint.bundle);
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run;
}

/// Non-overlapping patches of the held-out noisy pages, by class.
std::map<NoiseClass, std::vector<ImageTensor>> held_out_patches(const Corpus& corpus) {
    std::map<NoiseClass, std::vector<ImageTensor>> out;
    for (const auto& p : corpus.manifest.pages)
        if (p.split == "test" && p.noise)
            for (auto& r : extract_patches(corpus.images.at(p.id), corpus.manifest.patch_size, corpus.manifest.patch_size))
                out[*p.noise].push_back(std::move(r.patch));
    return out;
}

const fs::path kToyRoot = fs::temp_directory_path() / "docmoe_acceptance";

struct ToyState {
    Corpus corpus;
    std::optional<ToyRun> main_run, no_l1_run;
    fs::path root = kToyRoot;
};

ToyState& toy() {
    static ToyState s{build_corpus(toy_corpus_spec())};
    return s;
}

ToyRun& main_run() {
    auto& s = toy();
    if (!s.main_run) s.main_run = train_toy(s.corpus, 0.1, s.root / "lambda_g_0.1");
    return *s.main_run;
}

Outcome toy_end_to_end() {
    auto& s = toy();
    auto& run = main_run();
    std::vector<EvalPage> pages;
    double noisy_db = 0, cleaned_db = 0;
    for (const auto& p : s.corpus.manifest.pages) {
        if (p.split != "test") continue;
        EvalPage e{p.id, s.corpus.images.at(p.id), clean_page(run.minimal, s.corpus.images.at(p.id)), s.corpus.references.at(p.id)};
        noisy_db += psnr(e.noisy, *e.reference);
        cleaned_db += psnr(e.cleaned, *e.reference);
        pages.push_back(std::move(e));
    }
    noisy_db /= pages.size();
    cleaned_db /= pages.size();
    MockOcr ocr;
    const auto rel_report = relative_ocr_report(pages, ocr, ReferenceMode::CleanedVsOriginal);
    const auto vs_noisy = relative_ocr_report(pages, ocr, ReferenceMode::OriginalVsNoisy);
    const auto vs_cleaned = relative_ocr_report(pages, ocr, ReferenceMode::OriginalVsCleaned);
    const bool pass = pages.size() == 20 && cleaned_db >= noisy_db + 2.0 && rel_report.averaged_improvement > 0 &&
                      rel_report.excluded == 0;
    return {pass, std::to_string(pages.size()) + " held-out pages: PSNR cleaned " + fmt(cleaned_db) + " dB vs noisy " +
                      fmt(noisy_db) + " dB; mock-OCR averaged improvement " + fmt(rel_report.averaged_improvement) +
                      "% (word mismatch vs original: noisy " + fmt(vs_noisy.averaged_improvement) + "%, cleaned " +
                      fmt(vs_cleaned.averaged_improvement) + "%); training " + fmt(run.seconds, 5) + " s"};
}

Outcome gate_ablation() {
    auto& s = toy();
    auto& run = main_run();
    if (!s.no_l1_run) s.no_l1_run = train_toy(s.corpus, 0.0, s.root / "lambda_g_0");
    const auto patches = held_out_patches(s.corpus);
    const auto with_l1 = gate_analysis(run.minimal, patches);
    const auto without = gate_analysis(s.no_l1_run->minimal, patches);
    int majority = 0;
    std::string per_block;
    for (std::size_t k = 0; k < with_l1.within_class_mean.size(); ++k) {
        majority += with_l1.within_class_mean[k] > with_l1.cross_class_mean[k];
        per_block += (k ? ", " : "") + fmt(with_l1.within_class_mean[k], 3) + "/" + fmt(with_l1.cross_class_mean[k], 3);
    }
    const std::size_t blocks = with_l1.within_class_mean.size();
    const bool pass = 2 * majority > static_cast<int>(blocks) && with_l1.zero_fraction > without.zero_fraction;
    return {pass, "within > cross at " + std::to_string(majority) + " of " + std::to_string(blocks) +
                      " blocks (within/cross " + per_block + "); zero fraction " + fmt(with_l1.zero_fraction) +
                      " with l1 vs " + fmt(without.zero_fraction) + " without"};
}

Outcome classifier_sanity() {
    auto& s = toy();
    auto& run = main_run();
    int correct = 0, total = 0;
    for (const auto& [cls, list] : held_out_patches(s.corpus))
        for (const auto& p : list) {
            correct += embed_and_classify(run.checkpoint.bundle, to_signed(p).data).predicted() == cls;
            ++total;
        }
    const double acc = double(correct) / total;
    return {acc >= 0.9, "held-out patch accuracy " + fmt(acc) + " (" + std::to_string(correct) + "/" +
                            std::to_string(total) + ", limit 0.9)"};
}

// ---- A9 ---------------------------------------------------------------------------

Outcome roundtrips() {
    const fs::path dir = fs::temp_directory_path() / "docmoe_acceptance_a9";
    fs::remove_all(dir);
    std::mt19937_64 rng(909);
    bool bitwise = true, smaller = true;
    for (auto arch : {ArchConfig::micro(), ArchConfig::toy()}) {
        ModelBundle<float> b(arch, 910);
        perturb(b, rng, 0.1);
        save_checkpoint(dir / "full", b, 1, nlohmann::json::object());
        auto loaded = load_checkpoint(dir / "full");
        auto m = export_minimal(b);
        save_minimal(dir / "minimal", m);
        const auto lm = load_minimal(dir / "minimal");
        for (int t = 0; t < 5; ++t) {
            const std::size_t p = arch.patch_size;
            const auto x = uniform_tensor<float>({1, p, p}, rng);
            const auto ref = generate_forward(b, x);
            bitwise = bitwise && generate_forward(loaded.bundle, x) == ref && minimal_forward(m, x) == ref &&
                      minimal_forward(lm, x) == ref &&
                      generate_backward(loaded.bundle, x, x) == generate_backward(b, x, x) &&
                      discriminate(loaded.bundle, x, Domain::Y) == discriminate(b, x, Domain::Y);
        }
        smaller = smaller && container_bytes(dir / "minimal") < container_bytes(dir / "full");
        fs::remove_all(dir);
    }
    return {bitwise && smaller, std::string("checkpoint and minimal outputs ") + (bitwise ? "bitwise equal" : "DIFFER") +
                                    "; minimal " + (smaller ? "smaller" : "NOT smaller") + " than the checkpoint"};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"A1", gate_reduction},   {"A2", gradient_oracle},  {"A3", loss_closed_forms}, {"A4", history_buffer},
        {"A5", pipeline_identity}, {"A6", metric_oracles},  {"A7", toy_end_to_end},   {"A8", gate_ablation},
        {"A9", roundtrips},       {"A10", classifier_sanity}};
    std::set<std::string> only(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& [name, fn] : criteria) {
        if (!only.empty() && !only.count(name)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failed += !o.pass;
        std::cout << name << (name.size() == 2 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  ["
                  << fmt(s, 4) << " s]" << std::endl;
    }
    fs::remove_all(kToyRoot);
    return failed == 0 ? 0 : 1;
}
