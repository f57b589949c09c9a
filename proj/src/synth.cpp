#include "docmoe/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "docmoe/glyphs.hpp"

namespace docmoe {

using nlohmann::json;

// ---- noise specs -----------------------------------------------------------------

NoiseSpec NoiseSpec::salt_pepper(double amount, double salt_ratio) {
    return {NoiseClass::SaltPepper, SaltPepperParams{amount, salt_ratio}};
}
NoiseSpec NoiseSpec::blurred(double sigma) { return {NoiseClass::Blurred, BlurParams{sigma}}; }
NoiseSpec NoiseSpec::faded(double strength) { return {NoiseClass::Faded, FadeParams{strength}}; }
NoiseSpec NoiseSpec::watermarked(WatermarkParams p) { return {NoiseClass::Watermarked, std::move(p)}; }

void NoiseSpec::validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    switch (cls) {
        case NoiseClass::SaltPepper: {
            const auto* p = std::get_if<SaltPepperParams>(&params);
            require(p != nullptr, "salt-pepper noise needs SaltPepperParams");
            require(unit(p->amount) && unit(p->salt_ratio), "salt-pepper amount and salt_ratio must be in [0, 1]");
            break;
        }
        case NoiseClass::Blurred: {
            const auto* p = std::get_if<BlurParams>(&params);
            require(p != nullptr, "blur needs BlurParams");
            require(p->sigma > 0.0 && std::isfinite(p->sigma), "blur sigma must be > 0");
            break;
        }
        case NoiseClass::Faded: {
            const auto* p = std::get_if<FadeParams>(&params);
            require(p != nullptr, "fade needs FadeParams");
            require(unit(p->strength), "fade strength must be in [0, 1]");
            break;
        }
        case NoiseClass::Watermarked: {
            const auto* p = std::get_if<WatermarkParams>(&params);
            require(p != nullptr, "watermark needs WatermarkParams");
            require(unit(p->opacity), "watermark opacity must be in [0, 1]");
            require(std::all_of(p->color.begin(), p->color.end(), unit), "watermark color must be in [0, 1]");
            require(p->rows >= 1 && p->cols >= 1, "watermark grid must be at least 1x1");
            break;
        }
    }
}

namespace {

// Mirror index without repeating the edge sample, for any offset.
long mirror(long i, long n) {
    if (n == 1) return 0;
    const long period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

ImageTensor salt_pepper(const ImageTensor& img, const SaltPepperParams& p, std::uint64_t seed) {
    ImageTensor out = img;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const std::size_t C = img.channels(), H = img.height(), W = img.width();
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            if (u(rng) >= p.amount) continue;
            const float v = u(rng) < p.salt_ratio ? 1.0f : 0.0f;
            for (std::size_t c = 0; c < C; ++c) out.at(c, y, x) = v;
        }
    return out;
}

ImageTensor fade(const ImageTensor& img, const FadeParams& p) {
    ImageTensor out = img;
    const float s = static_cast<float>(p.strength);
    for (auto& v : out.data.vec()) v = 1.0f - s * (1.0f - v);
    return out;
}

int letter_index(char ch) {
    if (ch >= 'A' && ch <= 'Z') return ch - 'A';
    if (ch >= 'a' && ch <= 'z') return ch - 'a';
    return -1;
}

ImageTensor watermark(const ImageTensor& img, const WatermarkParams& p) {
    if (p.opacity == 0.0 || p.text.empty()) return img;
    ImageTensor out = img;
    const std::size_t C = img.channels(), H = img.height(), W = img.width();
    const double cell_h = static_cast<double>(H) / p.rows, cell_w = static_cast<double>(W) / p.cols;
    const int text_units = static_cast<int>(p.text.size()) * (glyphs::kGlyphWidth + 1) - 1;
    const int unit = std::max(1, static_cast<int>(std::min(0.8 * cell_w / text_units, 0.8 * cell_h / glyphs::kGlyphHeight)));
    const double half_w = 0.5 * text_units * unit, half_h = 0.5 * glyphs::kGlyphHeight * unit;
    const double theta = p.angle_deg * std::numbers::pi / 180.0, ct = std::cos(theta), st = std::sin(theta);

    std::array<float, 3> color{};
    if (C == 1) {
        color[0] = static_cast<float>(0.299 * p.color[0] + 0.587 * p.color[1] + 0.114 * p.color[2]);
    } else {
        for (int c = 0; c < 3; ++c) color[c] = static_cast<float>(p.color[c]);
    }
    const float a = static_cast<float>(p.opacity);

    for (std::size_t y = 0; y < H; ++y) {
        const int r = std::min(p.rows - 1, static_cast<int>(y / cell_h));
        const double dy = y + 0.5 - (r + 0.5) * cell_h;
        for (std::size_t x = 0; x < W; ++x) {
            const int c = std::min(p.cols - 1, static_cast<int>(x / cell_w));
            const double dx = x + 0.5 - (c + 0.5) * cell_w;
            const double u = ct * dx + st * dy + half_w;
            const double v = -st * dx + ct * dy + half_h;
            if (u < 0 || v < 0) continue;
            const int gx = static_cast<int>(u / unit), gy = static_cast<int>(v / unit);
            if (gx >= text_units || gy >= glyphs::kGlyphHeight) continue;
            const int col = gx % (glyphs::kGlyphWidth + 1);
            if (col == glyphs::kGlyphWidth) continue;
            const int letter = letter_index(p.text[gx / (glyphs::kGlyphWidth + 1)]);
            if (letter < 0 || !glyphs::bit(letter, gy, col)) continue;
            for (std::size_t ch = 0; ch < C; ++ch) out.at(ch, y, x) = (1.0f - a) * out.at(ch, y, x) + a * color[ch];
        }
    }
    return out;
}

}  // namespace

ImageTensor gaussian_blur(const ImageTensor& img, double sigma) {
    require(sigma > 0.0, "blur sigma must be > 0");
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
    for (auto& v : k) v /= sum;

    const std::size_t C = img.channels(), H = img.height(), W = img.width();
    ImageTensor tmp = img, out = img;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * img.at(c, y, mirror(static_cast<long>(x) + i, static_cast<long>(W)));
                tmp.at(c, y, x) = static_cast<float>(acc);
            }
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * tmp.at(c, mirror(static_cast<long>(y) + i, static_cast<long>(H)), x);
                out.at(c, y, x) = static_cast<float>(acc);
            }
    }
    return out;
}

ImageTensor apply_noise(const ImageTensor& img, const NoiseSpec& spec, std::uint64_t seed) {
    spec.validate();
    require(img.range == RangeTag::Unit, "apply_noise expects a unit-range image");
    switch (spec.cls) {
        case NoiseClass::SaltPepper: return salt_pepper(img, std::get<SaltPepperParams>(spec.params), seed);
        case NoiseClass::Blurred: return gaussian_blur(img, std::get<BlurParams>(spec.params).sigma);
        case NoiseClass::Faded: return fade(img, std::get<FadeParams>(spec.params));
        case NoiseClass::Watermarked: return watermark(img, std::get<WatermarkParams>(spec.params));
    }
    return img;
}

// ---- page rendering ----------------------------------------------------------------

RenderedPage render_clean_page(std::uint64_t seed, int height, int width, int channels) {
    require(height >= 64 && width >= 64, "synthetic pages must be at least 64x64");
    require(channels == 1 || channels == 3, "channels must be 1 or 3");
    const auto& L = glyphs::kDefaultLayout;
    RenderedPage page;
    page.image = ImageTensor::filled(channels, height, width, kPaperLevel);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> word_len(2, 7), letter(0, glyphs::kLetters - 1);

    const int lines = L.lines(height), cells = L.cells(width);
    bool paragraph_start = true;
    for (int line = 0; line < lines; ++line) {
        if (u(rng) < 0.12) {  // paragraph break
            paragraph_start = true;
            continue;
        }
        int pos = paragraph_start ? 2 : 0;
        const int limit = u(rng) < 0.2 ? std::max(3, static_cast<int>(cells * (0.4 + 0.4 * u(rng)))) : cells;
        paragraph_start = false;
        for (bool first = true;; first = false) {
            int len = word_len(rng);
            if (pos + len > limit) {
                if (!first || pos >= limit) break;
                len = limit - pos;  // a short line still gets a (clipped) word
            }
            std::string word;
            for (int i = 0; i < len; ++i) {
                const int l = letter(rng);
                word.push_back(static_cast<char>('A' + l));
                const int top = L.glyph_top(line), left = L.glyph_left(pos + i);
                for (int r = 0; r < glyphs::kGlyphHeight; ++r)
                    for (int c = 0; c < glyphs::kGlyphWidth; ++c) {
                        if (!glyphs::bit(l, r, c)) continue;
                        for (int dy = 0; dy < L.scale; ++dy)
                            for (int dx = 0; dx < L.scale; ++dx)
                                for (int ch = 0; ch < channels; ++ch)
                                    page.image.at(ch, top + r * L.scale + dy, left + c * L.scale + dx) = kInkLevel;
                    }
            }
            page.words.push_back(std::move(word));
            pos += len + 1;
        }
    }
    return page;
}

ImageTensor synth_clean_page(std::uint64_t seed, int height, int width, int channels) {
    return render_clean_page(seed, height, width, channels).image;
}

// ---- resizing and patches ------------------------------------------------------------

ImageTensor resize_bilinear(const ImageTensor& img, std::size_t height, std::size_t width) {
    require(height >= 1 && width >= 1, "resize target must be at least 1x1");
    if (height == img.height() && width == img.width()) return img;
    const std::size_t C = img.channels(), H = img.height(), W = img.width();
    ImageTensor out = ImageTensor::filled(C, height, width, 0.0f, img.range);
    const double sy = static_cast<double>(H) / height, sx = static_cast<double>(W) / width;
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
        const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, H - 1);
        const double wy = fy - y0;
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
            const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, W - 1);
            const double wx = fx - x0;
            for (std::size_t c = 0; c < C; ++c) {
                const double top = (1 - wx) * img.at(c, y0, x0) + wx * img.at(c, y0, x1);
                const double bot = (1 - wx) * img.at(c, y1, x0) + wx * img.at(c, y1, x1);
                out.at(c, y, x) = static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

std::size_t nearest_patch_multiple(std::size_t dim, int patch_size) {
    require(patch_size >= 1, "patch_size must be >= 1");
    const auto p = static_cast<std::size_t>(patch_size);
    const std::size_t k = std::max<std::size_t>(1, (2 * dim + p) / (2 * p));  // round half up
    return k * p;
}

ImageTensor resize_to_patch_multiple(const ImageTensor& img, int patch_size) {
    return resize_bilinear(img, nearest_patch_multiple(img.height(), patch_size),
                           nearest_patch_multiple(img.width(), patch_size));
}

std::size_t patches_per_axis(std::size_t dim, int patch_size, int stride) {
    return (dim - static_cast<std::size_t>(patch_size)) / static_cast<std::size_t>(stride) + 1;
}

std::vector<PatchRecord> extract_patches(const ImageTensor& img, int patch_size, int stride,
                                         const std::string& source_page, std::optional<NoiseClass> label) {
    require(patch_size >= 1 && stride >= 1 && patch_size % stride == 0, "stride must divide patch_size");
    require(img.height() % patch_size == 0 && img.width() % patch_size == 0,
            "page dimensions must be multiples of the patch size");
    const std::size_t P = patch_size, C = img.channels();
    const std::size_t ny = patches_per_axis(img.height(), patch_size, stride);
    const std::size_t nx = patches_per_axis(img.width(), patch_size, stride);
    std::vector<PatchRecord> out;
    out.reserve(ny * nx);
    for (std::size_t iy = 0; iy < ny; ++iy)
        for (std::size_t ix = 0; ix < nx; ++ix) {
            PatchRecord r;
            r.row = static_cast<int>(iy * stride);
            r.col = static_cast<int>(ix * stride);
            r.source_page = source_page;
            r.label = label;
            r.patch = ImageTensor::filled(C, P, P, 0.0f, img.range);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t y = 0; y < P; ++y) {
                    const float* src = &img.data[(c * img.height() + r.row + y) * img.width() + r.col];
                    std::copy(src, src + P, &r.patch.data[(c * P + y) * P]);
                }
            out.push_back(std::move(r));
        }
    return out;
}

// ---- manifest ----------------------------------------------------------------------------

void CorpusManifest::validate() const {
    std::map<std::string, PageDomain> seen;
    for (const auto& p : pages) {
        auto [it, inserted] = seen.emplace(p.id, p.domain);
        require(inserted, "page id '" + p.id + "' appears more than once" +
                              (it->second != p.domain ? " (in both the noisy and the clean set)" : ""));
        if (p.domain == PageDomain::Noisy) require(p.noise.has_value(), "noisy page '" + p.id + "' has no noise class");
        require(p.split == "train" || p.split == "test", "page '" + p.id + "' has unknown split '" + p.split + "'");
    }
}

std::string to_json_string(const CorpusManifest& m) {
    json j;
    j["format_version"] = m.format_version;
    j["global_seed"] = m.global_seed;
    j["patch_size"] = m.patch_size;
    j["stride"] = m.stride;
    j["channels"] = m.channels;
    j["pages"] = json::array();
    for (const auto& p : m.pages) {
        json e{{"id", p.id}, {"path", p.path}, {"domain", p.domain == PageDomain::Noisy ? "noisy" : "clean"},
               {"seed", p.seed}, {"split", p.split}};
        e["noise_class"] = p.noise ? json(to_string(*p.noise)) : json(nullptr);
        if (p.reference) e["reference"] = *p.reference;
        j["pages"].push_back(std::move(e));
    }
    return j.dump(2);
}

CorpusManifest manifest_from_json_string(const std::string& s) {
    CorpusManifest m;
    try {
        const json j = json::parse(s);
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != CorpusManifest::kFormatVersion)
            throw ContractViolation("unsupported corpus manifest format_version " + std::to_string(m.format_version));
        m.global_seed = j.at("global_seed").get<std::uint64_t>();
        m.patch_size = j.at("patch_size").get<int>();
        m.stride = j.at("stride").get<int>();
        m.channels = j.value("channels", 1);
        for (const auto& e : j.at("pages")) {
            PageEntry p;
            p.id = e.at("id").get<std::string>();
            p.path = e.at("path").get<std::string>();
            const auto domain = e.at("domain").get<std::string>();
            require(domain == "noisy" || domain == "clean", "unknown page domain '" + domain + "'");
            p.domain = domain == "noisy" ? PageDomain::Noisy : PageDomain::Clean;
            if (!e.at("noise_class").is_null()) p.noise = noise_class_from_string(e.at("noise_class").get<std::string>());
            p.seed = e.at("seed").get<std::uint64_t>();
            p.split = e.value("split", std::string("train"));
            if (e.contains("reference")) p.reference = e.at("reference").get<std::string>();
            m.pages.push_back(std::move(p));
        }
    } catch (const json::exception& ex) {
        throw ContractViolation(std::string("malformed corpus manifest: ") + ex.what());
    }
    m.validate();
    return m;
}

// ---- corpus ---------------------------------------------------------------------------------

std::uint64_t derive_seed(std::uint64_t global, std::uint64_t stream, std::uint64_t index) {
    std::uint64_t z = global ^ (stream * 0x9E3779B97F4A7C15ull) ^ (index * 0xD1B54A32D192ED03ull);
    z += 0x9E3779B97F4A7C15ull;  // splitmix64 finaliser
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

namespace {

std::string page_id(const std::string& kind, const std::string& split, int idx) {
    std::ostringstream os;
    os << kind << '_' << split << '_' << std::setw(4) << std::setfill('0') << idx;
    return os.str();
}

struct PageJob {
    PageEntry entry;
    std::optional<NoiseSpec> noise;
};

}  // namespace

Corpus build_corpus(const CorpusSpec& spec, unsigned workers) {
    require(spec.page_height >= 64 && spec.page_width >= 64, "pages must be at least 64x64");
    std::vector<PageJob> jobs;
    for (int i = 0; i < spec.clean_pages; ++i) {
        PageJob j;
        j.entry.id = page_id("clean", "train", i);
        j.entry.domain = PageDomain::Clean;
        j.entry.seed = derive_seed(spec.seed, 1, i);
        jobs.push_back(std::move(j));
    }
    auto noisy_jobs = [&](NoiseClass cls, int count, const std::string& split, std::uint64_t stream) {
        const auto it = spec.noise.find(cls);
        require(it != spec.noise.end(), "no noise parameters configured for class " + to_string(cls));
        for (int i = 0; i < count; ++i) {
            PageJob j;
            j.entry.id = page_id(to_string(cls), split, i);
            j.entry.domain = PageDomain::Noisy;
            j.entry.noise = cls;
            j.entry.split = split;
            j.entry.seed = derive_seed(spec.seed, stream + static_cast<std::uint64_t>(cls), i);
            j.noise = it->second;
            jobs.push_back(std::move(j));
        }
    };
    for (const auto& [cls, count] : spec.noisy_pages) noisy_jobs(cls, count, "train", 10);
    if (spec.test_pages_per_class > 0)
        for (const auto& [cls, count] : spec.noisy_pages) noisy_jobs(cls, spec.test_pages_per_class, "test", 20);

    std::vector<ImageTensor> images(jobs.size()), refs(jobs.size());
    auto run = [&](std::size_t i) {
        const auto& job = jobs[i];
        ImageTensor clean = synth_clean_page(job.entry.seed, spec.page_height, spec.page_width, spec.channels);
        if (job.noise) {
            images[i] = quantize_8bit(clamped(apply_noise(clean, *job.noise, derive_seed(job.entry.seed, 99, 0))));
            if (job.entry.split == "test") refs[i] = quantize_8bit(clean);
        } else {
            images[i] = quantize_8bit(clean);
        }
    };
    workers = std::max(1u, workers);
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < jobs.size(); i += workers) run(i);
        });
    for (auto& t : pool) t.join();

    Corpus corpus;
    corpus.manifest.global_seed = spec.seed;
    corpus.manifest.patch_size = spec.patch_size;
    corpus.manifest.stride = spec.stride;
    corpus.manifest.channels = spec.channels;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        PageEntry e = jobs[i].entry;
        e.path = "pages/" + e.id + ".png";
        if (e.split == "test") {
            e.reference = "references/" + e.id + ".png";
            corpus.references[e.id] = std::move(refs[i]);
        }
        corpus.images[e.id] = std::move(images[i]);
        corpus.manifest.pages.push_back(std::move(e));
    }
    corpus.manifest.validate();
    return corpus;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (const auto& p : corpus.manifest.pages) {
        write_png(dir / p.path, corpus.images.at(p.id));
        if (p.reference) write_png(dir / *p.reference, corpus.references.at(p.id));
    }
    std::ofstream(dir / "manifest.json") << to_json_string(corpus.manifest) << '\n';
}

Corpus load_corpus(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open corpus manifest " + manifest_path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Corpus corpus;
    corpus.manifest = manifest_from_json_string(ss.str());
    const auto dir = manifest_path.parent_path();
    for (const auto& p : corpus.manifest.pages) {
        corpus.images[p.id] = read_png(dir / p.path, corpus.manifest.channels);
        if (p.reference) corpus.references[p.id] = read_png(dir / *p.reference, corpus.manifest.channels);
    }
    return corpus;
}

// ---- batches --------------------------------------------------------------------------------

PatchPool PatchPool::from_corpus(const Corpus& corpus, const std::string& split) {
    PatchPool pool;
    pool.patch_size = corpus.manifest.patch_size;
    pool.channels = corpus.manifest.channels;
    for (const auto& p : corpus.manifest.pages) {
        if (p.split != split) continue;
        const auto page = resize_to_patch_multiple(corpus.images.at(p.id), pool.patch_size);
        auto patches = extract_patches(page, pool.patch_size, corpus.manifest.stride, p.id, p.noise);
        auto& dst = p.domain == PageDomain::Noisy ? pool.noisy : pool.clean;
        std::move(patches.begin(), patches.end(), std::back_inserter(dst));
    }
    return pool;
}

Batch sample_batch(const PatchPool& pool, std::size_t batch_size, std::mt19937_64& rng) {
    if (pool.noisy.empty() || pool.clean.empty())
        throw ContractViolation("sample_batch needs patches in both the noisy and the clean domain");
    require(batch_size >= 1, "batch_size must be >= 1");
    const std::size_t C = pool.channels, P = pool.patch_size, per = C * P * P;
    Batch b;
    b.x = Tensor<float>({batch_size, C, P, P});
    b.y = Tensor<float>({batch_size, C, P, P});
    std::uniform_int_distribution<std::size_t> pick_x(0, pool.noisy.size() - 1), pick_y(0, pool.clean.size() - 1);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const auto& xr = pool.noisy[pick_x(rng)];
        const auto& yr = pool.clean[pick_y(rng)];
        for (std::size_t k = 0; k < per; ++k) {
            b.x[i * per + k] = xr.patch.data[k] * 2.0f - 1.0f;
            b.y[i * per + k] = yr.patch.data[k] * 2.0f - 1.0f;
        }
        b.labels.push_back(static_cast<int>(*xr.label));
    }
    return b;
}

}  // namespace docmoe
