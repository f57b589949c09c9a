#include "docmoe/evalkit.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "docmoe/glyphs.hpp"

namespace docmoe {

using nlohmann::json;

double psnr(const ImageTensor& a, const ImageTensor& b) {
    require(a.channels() == b.channels() && a.height() == b.height() && a.width() == b.width(),
            "psnr needs images of the same shape");
    const ImageTensor ua = to_unit(a), ub = to_unit(b);
    double se = 0;
    for (std::size_t i = 0; i < ua.data.size(); ++i) {
        const double d = static_cast<double>(ua.data[i]) - ub.data[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(ua.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

double word_mismatch_percent(const WordList& reference, const WordList& candidate) {
    if (reference.empty()) throw UndefinedMetric("word mismatch is undefined for an empty reference");
    std::map<std::string, int> pool;
    for (const auto& w : candidate) ++pool[w];
    std::size_t matched = 0;
    for (const auto& w : reference) {
        auto it = pool.find(w);
        if (it != pool.end() && it->second > 0) {
            --it->second;
            ++matched;
        }
    }
    return 100.0 * (1.0 - static_cast<double>(matched) / static_cast<double>(reference.size()));
}

double pearson_correlation(const std::vector<double>& u, const std::vector<double>& v) {
    require(u.size() == v.size() && u.size() >= 2, "pearson_correlation needs two vectors of equal length >= 2");
    const double n = static_cast<double>(u.size());
    double mu = 0, mv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        mu += u[i];
        mv += v[i];
    }
    mu /= n;
    mv /= n;
    double suv = 0, suu = 0, svv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double du = u[i] - mu, dv = v[i] - mv;
        suv += du * dv;
        suu += du * du;
        svv += dv * dv;
    }
    if (suu == 0.0 || svv == 0.0) throw UndefinedMetric("correlation is undefined for a constant vector");
    return std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
}

// ---- OCR --------------------------------------------------------------------------------

WordList tokenize(const std::string& text) {
    WordList out;
    std::istringstream is(text);
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

WordList MockOcr::read(const ImageTensor& page) const {
    const ImageTensor g = to_grayscale(to_unit(page));
    const auto& L = glyphs::kDefaultLayout;
    const int H = static_cast<int>(g.height()), W = static_cast<int>(g.width());
    const int lines = L.lines(H), cells = L.cells(W);
    const auto& font = glyphs::font();
    WordList words;
    for (int line = 0; line < lines; ++line) {
        std::string word;
        for (int cell = 0; cell <= cells; ++cell) {
            char ch = ' ';
            if (cell < cells) {
                std::array<std::uint8_t, glyphs::kGlyphHeight> rows{};
                int dark = 0;
                const int top = L.glyph_top(line), left = L.glyph_left(cell);
                for (int r = 0; r < glyphs::kGlyphHeight; ++r)
                    for (int c = 0; c < glyphs::kGlyphWidth; ++c) {
                        double sum = 0;
                        for (int dy = 0; dy < L.scale; ++dy)
                            for (int dx = 0; dx < L.scale; ++dx)
                                sum += g.at(0, top + r * L.scale + dy, left + c * L.scale + dx);
                        if (sum / (L.scale * L.scale) < 0.5) {
                            rows[r] |= static_cast<std::uint8_t>(1u << (glyphs::kGlyphWidth - 1 - c));
                            ++dark;
                        }
                    }
                if (dark > 1) {
                    int best = 1 << 20, best_letter = -1;
                    bool tie = false;
                    for (int l = 0; l < glyphs::kLetters; ++l) {
                        int d = 0;
                        for (int r = 0; r < glyphs::kGlyphHeight; ++r)
                            d += std::popcount(static_cast<unsigned>(rows[r] ^ font[l][r]));
                        if (d < best) {
                            best = d;
                            best_letter = l;
                            tie = false;
                        } else if (d == best) {
                            tie = true;
                        }
                    }
                    ch = (best <= 2 && !tie) ? static_cast<char>('A' + best_letter) : '?';
                }
            }
            if (ch == ' ') {
                if (!word.empty()) words.push_back(std::move(word));
                word.clear();
            } else {
                word.push_back(ch);
            }
        }
    }
    return words;
}

CommandOcr::CommandOcr(std::string command, std::chrono::milliseconds timeout, std::filesystem::path scratch_dir)
    : command_(std::move(command)), timeout_(timeout), scratch_(std::move(scratch_dir)) {
    require(!command_.empty(), "OCR command must not be empty");
    require(timeout_.count() > 0, "OCR timeout must be positive");
    if (scratch_.empty()) scratch_ = std::filesystem::temp_directory_path();
}

namespace {

std::string shell_quote(const std::string& s) {
    std::string out = "'";
    for (char c : s) out += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return out + "'";
}

struct TempFile {
    std::filesystem::path path;
    ~TempFile() {
        std::error_code ec;
        std::filesystem::remove(path, ec);
    }
};

}  // namespace

WordList CommandOcr::read(const ImageTensor& page) const {
    static std::atomic<unsigned long> counter{0};
    TempFile tmp{scratch_ / ("docmoe_ocr_" + std::to_string(::getpid()) + "_" + std::to_string(counter++) + ".png")};
    write_png(tmp.path, page);

    std::string cmd = command_;
    const std::string quoted = shell_quote(tmp.path.string());
    if (auto pos = cmd.find("{image}"); pos != std::string::npos) {
        cmd.replace(pos, 7, quoted);
    } else {
        cmd += " " + quoted;
    }

    int fd[2];
    if (::pipe(fd) != 0) throw OcrError("cannot create a pipe for the OCR command");
    const pid_t pid = ::fork();
    if (pid < 0) {
        ::close(fd[0]);
        ::close(fd[1]);
        throw OcrError("cannot fork the OCR command");
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(fd[1], STDOUT_FILENO);
        ::close(fd[0]);
        ::close(fd[1]);
        ::execl("/bin/sh", "sh", "-c", cmd.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(fd[1]);
    std::string output;
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    bool timed_out = false;
    char buf[4096];
    while (true) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) {
            timed_out = true;
            break;
        }
        pollfd p{fd[0], POLLIN, 0};
        const int r = ::poll(&p, 1, static_cast<int>(left.count()));
        if (r == 0) {
            timed_out = true;
            break;
        }
        if (r < 0) continue;
        const ssize_t n = ::read(fd[0], buf, sizeof buf);
        if (n <= 0) break;
        output.append(buf, static_cast<std::size_t>(n));
    }
    ::close(fd[0]);
    if (timed_out) ::kill(-pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    if (timed_out) throw OcrError("OCR command timed out after " + std::to_string(timeout_.count()) + " ms");
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw OcrError("OCR command failed with status " + std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));
    return tokenize(output);
}

// ---- reports ---------------------------------------------------------------------------------

std::string to_string(ReferenceMode m) {
    switch (m) {
        case ReferenceMode::OriginalVsNoisy: return "original_vs_noisy";
        case ReferenceMode::OriginalVsCleaned: return "original_vs_cleaned";
        case ReferenceMode::CleanedVsOriginal: return "cleaned_vs_original";
    }
    return "cleaned_vs_original";
}

EvalReport summarize(ReferenceMode mode, std::vector<PageScore> pages) {
    EvalReport r;
    r.mode = mode;
    r.pages = std::move(pages);
    if (r.pages.empty()) return r;
    std::vector<double> v, ps;
    for (const auto& p : r.pages) {
        v.push_back(p.improvement);
        if (p.psnr) {
            if (std::isinf(*p.psnr)) {
                ++r.psnr_infinite;
            } else {
                ps.push_back(*p.psnr);
            }
        }
    }
    std::sort(v.begin(), v.end());
    std::sort(ps.begin(), ps.end());
    const double n = static_cast<double>(v.size());
    double sum = 0;
    for (double x : v) sum += x;
    r.averaged_improvement = sum / n;
    r.max_improvement = v.back();
    r.pct_pages_gt5 = 100.0 * static_cast<double>(std::count_if(v.begin(), v.end(), [](double x) { return x > 5; })) / n;
    r.pct_pages_gt10 = 100.0 * static_cast<double>(std::count_if(v.begin(), v.end(), [](double x) { return x > 10; })) / n;
    if (!ps.empty()) {
        double s = 0;
        for (double x : ps) s += x;
        r.mean_psnr = s / static_cast<double>(ps.size());
    }
    return r;
}

EvalReport relative_ocr_report(const std::vector<EvalPage>& pages, const OcrAdapter& ocr, ReferenceMode mode) {
    std::vector<PageScore> scores;
    std::vector<std::string> errors;
    for (const auto& page : pages) {
        try {
            PageScore s;
            s.id = page.id;
            const bool against_original = mode != ReferenceMode::CleanedVsOriginal;
            if (against_original && !page.reference) throw UndefinedMetric("no clean original supplied");
            const ImageTensor& candidate = mode == ReferenceMode::OriginalVsNoisy ? page.noisy
                                           : mode == ReferenceMode::OriginalVsCleaned ? page.cleaned
                                                                                       : page.noisy;
            const WordList ref = against_original ? ocr.read(*page.reference) : ocr.read(page.cleaned);
            s.improvement = word_mismatch_percent(ref, ocr.read(candidate));
            if (page.reference)
                s.psnr = psnr(mode == ReferenceMode::OriginalVsNoisy ? page.noisy : page.cleaned, *page.reference);
            scores.push_back(std::move(s));
        } catch (const OcrError& e) {
            errors.push_back(page.id + ": " + e.what());
        } catch (const UndefinedMetric& e) {
            errors.push_back(page.id + ": " + e.what());
        }
    }
    EvalReport r = summarize(mode, std::move(scores));
    r.excluded = static_cast<int>(errors.size());
    r.errors = std::move(errors);
    return r;
}

json to_json(const EvalReport& r) {
    json pages = json::array();
    for (const auto& p : r.pages) {
        json e{{"id", p.id}, {"improvement", p.improvement}};
        e["psnr"] = p.psnr && std::isfinite(*p.psnr) ? json(*p.psnr) : json(nullptr);
        pages.push_back(std::move(e));
    }
    json j{{"mode", to_string(r.mode)},
           {"Averaged Improvement (%)", r.averaged_improvement},
           {"Max. Improvement (%)", r.max_improvement},
           {"Percentage of Pages with more than 5% Improvement (%)", r.pct_pages_gt5},
           {"Percentage of Pages with more than 10% Improvement (%)", r.pct_pages_gt10},
           {"psnr_infinite_pages", r.psnr_infinite},
           {"excluded_pages", r.excluded},
           {"errors", r.errors},
           {"pages", pages}};
    j["PSNR"] = r.mean_psnr ? json(*r.mean_psnr) : json(nullptr);
    return j;
}

// ---- gate analysis ------------------------------------------------------------------------------

GateAnalysis gate_analysis(const MinimalModel& m, const std::map<NoiseClass, std::vector<ImageTensor>>& patches_by_class) {
    GateAnalysis out;
    std::vector<GateSet<float>> sets;
    for (const auto& [cls, patches] : patches_by_class) {
        require(patches.size() >= 2, "gate analysis needs at least 2 patches of class " + to_string(cls));
        for (const auto& p : patches) {
            sets.push_back(minimal_gates(m, to_signed(p).data));
            out.sample_classes.push_back(cls);
        }
    }
    require(!sets.empty(), "gate analysis needs patches");
    const std::size_t S = sets.size(), B = sets.front().gates.size();
    std::size_t zeros = 0, total = 0;
    for (const auto& s : sets)
        for (const auto& g : s.gates) {
            total += g.size();
            zeros += static_cast<std::size_t>(std::count(g.begin(), g.end(), 0.0f));
        }
    out.zero_fraction = static_cast<double>(zeros) / static_cast<double>(total);

    const double nan = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::vector<double>> vecs(S);
        for (std::size_t i = 0; i < S; ++i) vecs[i].assign(sets[i].gates[b].begin(), sets[i].gates[b].end());
        std::vector<std::vector<double>> mat(S, std::vector<double>(S, nan));
        double within = 0, cross = 0;
        int n_within = 0, n_cross = 0, degenerate = 0;
        for (std::size_t i = 0; i < S; ++i)
            for (std::size_t j = i; j < S; ++j) {
                double r = nan;
                try {
                    r = pearson_correlation(vecs[i], vecs[j]);
                } catch (const UndefinedMetric&) {
                    if (i != j) ++degenerate;
                }
                mat[i][j] = mat[j][i] = r;
                if (i == j || std::isnan(r)) continue;
                if (out.sample_classes[i] == out.sample_classes[j]) {
                    within += r;
                    ++n_within;
                } else {
                    cross += r;
                    ++n_cross;
                }
            }
        out.matrices.push_back(std::move(mat));
        out.within_class_mean.push_back(n_within ? within / n_within : nan);
        out.cross_class_mean.push_back(n_cross ? cross / n_cross : nan);
        out.degenerate_pairs.push_back(degenerate);
    }
    return out;
}

json to_json(const GateAnalysis& g) {
    json classes = json::array();
    for (auto c : g.sample_classes) classes.push_back(to_string(c));
    json blocks = json::array();
    for (std::size_t b = 0; b < g.matrices.size(); ++b) {
        auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
        json mat = json::array();
        for (const auto& row : g.matrices[b]) {
            json jr = json::array();
            for (double v : row) jr.push_back(num(v));
            mat.push_back(std::move(jr));
        }
        blocks.push_back({{"block", b},
                          {"within_class_mean", num(g.within_class_mean[b])},
                          {"cross_class_mean", num(g.cross_class_mean[b])},
                          {"degenerate_pairs", g.degenerate_pairs[b]},
                          {"correlation", std::move(mat)}});
    }
    return {{"sample_classes", classes}, {"zero_fraction", g.zero_fraction}, {"blocks", blocks}};
}

std::string gate_matrices_csv(const GateAnalysis& g) {
    std::ostringstream os;
    os << "block,i,j,class_i,class_j,r\n";
    os.precision(17);
    for (std::size_t b = 0; b < g.matrices.size(); ++b)
        for (std::size_t i = 0; i < g.matrices[b].size(); ++i)
            for (std::size_t j = 0; j < g.matrices[b].size(); ++j) {
                os << b << ',' << i << ',' << j << ',' << to_string(g.sample_classes[i]) << ','
                   << to_string(g.sample_classes[j]) << ',';
                const double r = g.matrices[b][i][j];
                if (std::isnan(r)) {
                    os << "nan";
                } else {
                    os << r;
                }
                os << '\n';
            }
    return os.str();
}

}  // namespace docmoe
