#include "docmoe/config.hpp"

#include <fstream>

namespace docmoe {

using nlohmann::json;
using Type = ConfigKey::Type;

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys{
        {"seed", Type::Int, 0, "global seed for data synthesis and training"},
        {"device", Type::String, "cpu", "compute device (only cpu)"},
        // architecture
        {"arch", Type::String, "default", "architecture preset: default, toy or micro"},
        {"channels", Type::Int, 1, "image channels (1 or 3)"},
        {"patch_size", Type::Int, nullptr, "patch side in pixels"},
        {"base_channels", Type::Int, nullptr, "generator base width"},
        {"n_blocks", Type::Int, nullptr, "gated residual blocks per generator"},
        {"embed_dim", Type::Int, nullptr, "embedding length d"},
        {"embedder_channels", Type::Int, nullptr, "embedder base width"},
        {"disc_channels", Type::Int, nullptr, "discriminator base width"},
        {"disc_layers", Type::Int, nullptr, "discriminator stride-2 layers"},
        // data
        {"page_height", Type::Int, 512, "synthetic page height"},
        {"page_width", Type::Int, 512, "synthetic page width"},
        {"stride", Type::Int, nullptr, "patch stride (default: patch_size / 2)"},
        {"clean_pages", Type::Int, 8, "clean-domain training pages"},
        {"salt_pepper_pages", Type::Int, 2, "salt-and-pepper training pages"},
        {"blurred_pages", Type::Int, 2, "blurred training pages"},
        {"faded_pages", Type::Int, 2, "faded training pages"},
        {"watermarked_pages", Type::Int, 2, "watermarked training pages"},
        {"test_pages_per_class", Type::Int, 1, "held-out pages per used noise class"},
        {"sp_amount", Type::Double, 0.1, "salt-and-pepper replacement probability"},
        {"sp_salt_ratio", Type::Double, 0.5, "share of white replacements"},
        {"blur_sigma", Type::Double, 1.5, "Gaussian blur standard deviation"},
        {"fade_strength", Type::Double, 0.5, "remaining contrast of faded pages"},
        {"watermark_text", Type::String, "COPY", "watermark text"},
        {"watermark_opacity", Type::Double, 0.35, "watermark opacity"},
        {"watermark_rows", Type::Int, 4, "watermark grid rows"},
        {"watermark_cols", Type::Int, 2, "watermark grid columns"},
        {"watermark_angle", Type::Double, 30.0, "watermark rotation in degrees"},
        {"watermark_r", Type::Double, 0.85, "watermark red"},
        {"watermark_g", Type::Double, 0.25, "watermark green"},
        {"watermark_b", Type::Double, 0.25, "watermark blue"},
        {"workers", Type::Int, 1, "worker threads for synthesis and page cleaning"},
        // training
        {"steps", Type::Int, 1000, "total training steps"},
        {"batch_size", Type::Int, 32, "patches per batch and domain"},
        {"learning_rate", Type::Double, 2e-4, "optimiser step size"},
        {"beta1", Type::Double, 0.5, "Adam beta1"},
        {"beta2", Type::Double, 0.999, "Adam beta2"},
        {"adam_eps", Type::Double, 1e-8, "Adam epsilon"},
        {"optimizer", Type::String, "adam", "adam or sgd"},
        {"adversarial_mode", Type::String, "least_squares", "least_squares or log"},
        {"history_capacity", Type::Int, 50, "images per discriminator history buffer"},
        {"checkpoint_interval", Type::Int, 0, "steps between checkpoints (0: final only)"},
        {"gating", Type::String, "learned", "learned, ones or off"},
        {"lambda_cyc", Type::Double, 10.0, "cycle-consistency weight"},
        {"lambda_moe", Type::Double, 1.0, "MoE loss weight"},
        {"lambda_gH", Type::Double, 0.1, "forward gate l1 weight"},
        {"lambda_gF", Type::Double, 0.1, "backward gate l1 weight"},
        {"log_interval", Type::Int, 10, "steps between progress lines"},
        // evaluation
        {"ocr", Type::String, "mock", "OCR adapter: mock or command"},
        {"ocr_command", Type::String, "", "command for the command adapter; {image} is the page path"},
        {"ocr_timeout_ms", Type::Int, 30000, "per-page OCR timeout"},
        {"samples_per_class", Type::Int, 8, "patches per class for gate analysis"},
    };
    return keys;
}

namespace {

const ConfigKey& find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return k;
    throw ConfigError("unknown configuration key '" + name + "'");
}

}  // namespace

RunConfig::RunConfig() : values_(json::object()) {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

void RunConfig::check_type(const ConfigKey& k, const json& v) const {
    if (v.is_null()) return;
    bool ok = false;
    switch (k.type) {
        case Type::Int: ok = v.is_number_integer(); break;
        case Type::Double: ok = v.is_number(); break;
        case Type::String: ok = v.is_string(); break;
        case Type::Bool: ok = v.is_boolean(); break;
    }
    if (!ok) throw ConfigError("configuration key '" + k.name + "' has the wrong type");
}

void RunConfig::merge_json(const json& j) {
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        const auto& k = find_key(key);
        check_type(k, v);
        values_[key] = v;
    }
    resolved_ = false;
}

void RunConfig::merge_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open configuration file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("configuration file " + path.string() + " is not valid JSON: " + e.what());
    }
    merge_json(j);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& k = find_key(key);
    try {
        std::size_t used = 0;
        switch (k.type) {
            case Type::Int:
                values_[key] = std::stoll(value, &used);
                break;
            case Type::Double:
                values_[key] = std::stod(value, &used);
                break;
            case Type::String:
                values_[key] = value;
                used = value.size();
                break;
            case Type::Bool:
                if (value != "true" && value != "false") throw std::invalid_argument("bool");
                values_[key] = value == "true";
                used = value.size();
                break;
        }
        if (used != value.size()) throw std::invalid_argument("trailing characters");
    } catch (const std::logic_error&) {
        throw ConfigError("cannot parse '" + value + "' for --" + key);
    }
    resolved_ = false;
}

void RunConfig::resolve() {
    const auto preset = get<std::string>("arch");
    ArchConfig base;
    if (preset == "toy") {
        base = ArchConfig::toy();
    } else if (preset == "micro") {
        base = ArchConfig::micro();
    } else if (preset != "default") {
        throw ConfigError("unknown arch preset '" + preset + "' (default, toy, micro)");
    }
    const json b = to_json(base);
    for (const char* k : {"patch_size", "base_channels", "n_blocks", "embed_dim", "embedder_channels", "disc_channels",
                          "disc_layers"})
        if (values_[k].is_null()) values_[k] = b[k];
    if (values_["stride"].is_null()) values_["stride"] = std::max(1, get<int>("patch_size") / 2);
    if (get<std::string>("device") != "cpu")
        throw ConfigError("device '" + get<std::string>("device") + "' is not available (cpu only)");
    const auto ocr = get<std::string>("ocr");
    if (ocr != "mock" && ocr != "command") throw ConfigError("unknown ocr adapter '" + ocr + "'");
    if (ocr == "command" && get<std::string>("ocr_command").empty()) throw ConfigError("ocr=command needs ocr_command");
    if (get<long>("workers") < 1) throw ConfigError("workers must be >= 1");
    if (get<long>("samples_per_class") < 2) throw ConfigError("samples_per_class must be >= 2");
    if (get<long>("log_interval") < 1) throw ConfigError("log_interval must be >= 1");
    if (get<long>("seed") < 0) throw ConfigError("seed must be >= 0");
    resolved_ = true;
    try {
        train_config().validate();
        const auto spec = corpus_spec();
        for (const auto& [cls, n] : spec.noise) n.validate();
        require(spec.page_height >= 64 && spec.page_width >= 64, "pages must be at least 64x64");
        require(spec.stride >= 1 && spec.patch_size % spec.stride == 0, "stride must divide patch_size");
        for (const char* k : {"clean_pages", "salt_pepper_pages", "blurred_pages", "faded_pages", "watermarked_pages",
                              "test_pages_per_class"})
            require(get<long>(k) >= 0, std::string(k) + " must be >= 0");
    } catch (const ContractViolation& e) {
        resolved_ = false;
        throw ConfigError(e.what());
    }
}

ArchConfig RunConfig::arch() const {
    require(resolved_, "RunConfig::resolve() has not run");
    return arch_from_json(values_);
}

CorpusSpec RunConfig::corpus_spec() const {
    require(resolved_, "RunConfig::resolve() has not run");
    CorpusSpec s;
    s.seed = get<std::uint64_t>("seed");
    s.page_height = get<int>("page_height");
    s.page_width = get<int>("page_width");
    s.channels = get<int>("channels");
    s.patch_size = get<int>("patch_size");
    s.stride = get<int>("stride");
    s.clean_pages = get<int>("clean_pages");
    s.test_pages_per_class = get<int>("test_pages_per_class");
    s.noisy_pages.clear();
    const std::pair<NoiseClass, const char*> counts[] = {{NoiseClass::SaltPepper, "salt_pepper_pages"},
                                                         {NoiseClass::Blurred, "blurred_pages"},
                                                         {NoiseClass::Faded, "faded_pages"},
                                                         {NoiseClass::Watermarked, "watermarked_pages"}};
    for (const auto& [cls, key] : counts)
        if (get<int>(key) > 0) s.noisy_pages[cls] = get<int>(key);
    WatermarkParams wm;
    wm.text = get<std::string>("watermark_text");
    wm.opacity = get<double>("watermark_opacity");
    wm.rows = get<int>("watermark_rows");
    wm.cols = get<int>("watermark_cols");
    wm.angle_deg = get<double>("watermark_angle");
    wm.color = {get<double>("watermark_r"), get<double>("watermark_g"), get<double>("watermark_b")};
    s.noise = {{NoiseClass::SaltPepper, NoiseSpec::salt_pepper(get<double>("sp_amount"), get<double>("sp_salt_ratio"))},
               {NoiseClass::Blurred, NoiseSpec::blurred(get<double>("blur_sigma"))},
               {NoiseClass::Faded, NoiseSpec::faded(get<double>("fade_strength"))},
               {NoiseClass::Watermarked, NoiseSpec::watermarked(wm)}};
    return s;
}

TrainConfig RunConfig::train_config() const {
    require(resolved_, "RunConfig::resolve() has not run");
    TrainConfig c;
    c.weights.lambda_cyc = get<double>("lambda_cyc");
    c.weights.lambda_moe = get<double>("lambda_moe");
    c.weights.lambda_gH = get<double>("lambda_gH");
    c.weights.lambda_gF = get<double>("lambda_gF");
    c.adversarial_mode = adversarial_mode_from_string(get<std::string>("adversarial_mode"));
    c.optimizer = optimizer_from_string(get<std::string>("optimizer"));
    c.gating = gate_mode_from_string(get<std::string>("gating"));
    c.learning_rate = get<double>("learning_rate");
    c.beta1 = get<double>("beta1");
    c.beta2 = get<double>("beta2");
    c.adam_eps = get<double>("adam_eps");
    const long batch = get<long>("batch_size");
    require(batch >= 1, "batch_size must be >= 1");
    c.batch_size = static_cast<std::size_t>(batch);
    c.steps = get<long>("steps");
    c.seed = get<std::uint64_t>("seed");
    c.history_capacity = get<int>("history_capacity");
    c.checkpoint_interval = get<long>("checkpoint_interval");
    c.arch = arch();
    return c;
}

void RunConfig::echo_to(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "resolved_config.json") << values_.dump(2) << '\n';
}

}  // namespace docmoe
