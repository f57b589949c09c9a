#include "docmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace docmoe {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(const std::vector<float>& data) {
    std::uint64_t h = 1469598103934665603ull;
    const auto* p = reinterpret_cast<const unsigned char*>(data.data());
    for (std::size_t i = 0; i < data.size() * sizeof(float); ++i) h = (h ^ p[i]) * 1099511628211ull;
    return h;
}

std::uint32_t to_le(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

void write_floats(const std::filesystem::path& path, const std::vector<float>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    for (float f : data) {
        std::uint32_t u;
        std::memcpy(&u, &f, 4);
        u = to_le(u);
        out.write(reinterpret_cast<const char*>(&u), 4);
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<float> read_floats(const std::filesystem::path& path, std::uint64_t expected_bytes) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw CorruptionError("missing blob " + path.filename().string());
    if (size != expected_bytes)
        throw CorruptionError(path.filename().string() + " holds " + std::to_string(size) + " bytes, manifest expects " +
                              std::to_string(expected_bytes));
    if (size % 4 != 0) throw CorruptionError(path.filename().string() + " is not a float32 array");
    std::ifstream in(path, std::ios::binary);
    std::vector<float> out(size / 4);
    for (auto& f : out) {
        std::uint32_t u;
        in.read(reinterpret_cast<char*>(&u), 4);
        u = to_le(u);
        std::memcpy(&f, &u, 4);
    }
    if (!in) throw CorruptionError("short read on " + path.filename().string());
    return out;
}

json shape_json(const Shape& s) { return json(s); }

void append(std::vector<float>& blob, const Tensor<float>& t) { blob.insert(blob.end(), t.vec().begin(), t.vec().end()); }

}  // namespace

void write_container(const std::filesystem::path& dir, const std::string& kind, const std::vector<ContainerEntry>& entries,
                     const json& extra, const std::vector<float>* optim) {
    std::filesystem::create_directories(dir);
    std::vector<float> blob;
    json list = json::array();
    for (const auto& e : entries) {
        list.push_back({{"network", e.network},
                        {"layer", e.layer},
                        {"shape", shape_json(e.tensor->shape())},
                        {"dtype", "float32"},
                        {"offset", blob.size() * sizeof(float)},
                        {"kind", e.kind}});
        append(blob, *e.tensor);
    }
    json m = extra;
    m["format_version"] = kCheckpointFormatVersion;
    m["kind"] = kind;
    m["byte_order"] = "little";
    m["entries"] = std::move(list);
    m["params_bytes"] = blob.size() * sizeof(float);
    m["params_fnv1a"] = fnv1a(blob);
    write_floats(dir / "params.bin", blob);
    if (optim) {
        m["optim_bytes"] = optim->size() * sizeof(float);
        m["optim_fnv1a"] = fnv1a(*optim);
        write_floats(dir / "optim.bin", *optim);
    } else {
        std::filesystem::remove(dir / "optim.bin");
    }
    std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

json read_manifest(const std::filesystem::path& dir, const std::string& kind) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw CheckpointError("no manifest.json in " + dir.string());
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("unreadable manifest: ") + e.what());
    }
    if (!m.is_object() || !m.contains("format_version") || !m["format_version"].is_number_integer())
        throw CorruptionError("manifest has no format_version");
    const int version = m["format_version"].get<int>();
    if (version != kCheckpointFormatVersion)
        throw FormatVersionError("unsupported checkpoint format_version " + std::to_string(version) + " (expected " +
                                 std::to_string(kCheckpointFormatVersion) + ")");
    const std::string found = m.value("kind", std::string());
    if (found != kind) throw FormatVersionError("container kind '" + found + "' where '" + kind + "' was expected");
    return m;
}

ContainerContents read_container(const std::filesystem::path& dir, const std::string& kind,
                                 const std::vector<ContainerEntry>& entries) {
    ContainerContents out;
    out.manifest = read_manifest(dir, kind);
    const json& m = out.manifest;
    try {
        const auto params = read_floats(dir / "params.bin", m.at("params_bytes").get<std::uint64_t>());
        if (fnv1a(params) != m.at("params_fnv1a").get<std::uint64_t>()) throw CorruptionError("params.bin checksum mismatch");

        std::map<std::pair<std::string, std::string>, const json*> listed;
        for (const auto& e : m.at("entries")) {
            auto key = std::make_pair(e.at("network").get<std::string>(), e.at("layer").get<std::string>());
            if (!listed.emplace(key, &e).second)
                throw CorruptionError("tensor " + key.first + "/" + key.second + " listed twice");
        }
        if (listed.size() != entries.size())
            throw CorruptionError("manifest lists " + std::to_string(listed.size()) + " tensors, model has " +
                                  std::to_string(entries.size()));
        std::vector<std::pair<const ContainerEntry*, std::size_t>> plan;
        for (const auto& e : entries) {
            auto it = listed.find({e.network, e.layer});
            if (it == listed.end()) throw CorruptionError("tensor " + e.network + "/" + e.layer + " missing from manifest");
            const json& je = *it->second;
            if (je.at("dtype").get<std::string>() != "float32") throw CorruptionError("unsupported dtype");
            if (je.at("shape").get<Shape>() != e.tensor->shape())
                throw CorruptionError("shape mismatch for " + e.network + "/" + e.layer + ": manifest " +
                                      shape_str(je.at("shape").get<Shape>()) + ", model " + shape_str(e.tensor->shape()));
            const auto offset = je.at("offset").get<std::uint64_t>();
            if (offset % 4 != 0 || offset / 4 + e.tensor->size() > params.size())
                throw CorruptionError("tensor " + e.network + "/" + e.layer + " lies outside params.bin");
            plan.emplace_back(&e, offset / 4);
        }
        if (m.contains("optim_bytes")) {
            out.optim = read_floats(dir / "optim.bin", m.at("optim_bytes").get<std::uint64_t>());
            if (fnv1a(out.optim) != m.at("optim_fnv1a").get<std::uint64_t>())
                throw CorruptionError("optim.bin checksum mismatch");
        }
        for (const auto& [e, start] : plan)
            std::copy(params.begin() + start, params.begin() + start + e->tensor->size(), e->tensor->vec().begin());
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("malformed manifest: ") + e.what());
    }
    return out;
}

std::vector<ContainerEntry> container_entries(ModelBundle<float>& bundle) {
    std::vector<ContainerEntry> out;
    for (auto& [net, params] : bundle.networks())
        for (auto& [name, v] : params) out.push_back({net, name, &v.mutable_value(), "param"});
    for (auto& [net, bufs] : bundle.buffers())
        for (auto& [name, t] : bufs) out.push_back({net, name, t, "buffer"});
    return out;
}

void save_checkpoint(const std::filesystem::path& dir, ModelBundle<float>& bundle, long step, const json& train_config,
                     const TrainerSnapshot<float>* trainer, const std::string& data_rng) {
    json extra;
    extra["step"] = step;
    extra["arch"] = to_json(bundle.config());
    extra["train_config"] = train_config;
    json nets = json::array();
    for (const auto& [net, params] : bundle.networks()) nets.push_back(net);
    extra["networks"] = nets;

    std::vector<float> optim;
    if (trainer) {
        for (const auto* s : {&trainer->generator_opt, &trainer->discriminator_opt})
            for (std::size_t i = 0; i < s->m.size(); ++i) {
                append(optim, s->m[i]);
                append(optim, s->v[i]);
            }
        for (const auto& t : trainer->history_X) append(optim, t);
        for (const auto& t : trainer->history_Y) append(optim, t);
        extra["trainer"] = {{"step", trainer->step},
                            {"generator_t", trainer->generator_opt.t},
                            {"generator_moments", !trainer->generator_opt.m.empty()},
                            {"discriminator_t", trainer->discriminator_opt.t},
                            {"discriminator_moments", !trainer->discriminator_opt.m.empty()},
                            {"history_X", trainer->history_X.size()},
                            {"history_Y", trainer->history_Y.size()}};
        extra["rng"] = {{"data", data_rng}, {"history_X", trainer->history_X_rng}, {"history_Y", trainer->history_Y_rng}};
    }
    write_container(dir, "full", container_entries(bundle), extra, trainer ? &optim : nullptr);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    const json head = read_manifest(dir, "full");
    ArchConfig arch;
    try {
        arch = arch_from_json(head.at("arch"));
        arch.validate();
    } catch (const std::exception& e) {
        throw CorruptionError(std::string("bad architecture in manifest: ") + e.what());
    }
    LoadedCheckpoint ck;
    ck.bundle = ModelBundle<float>(arch, 0);
    auto contents = read_container(dir, "full", container_entries(ck.bundle));
    const json& m = contents.manifest;
    ck.step = m.value("step", 0L);
    ck.train_config = m.value("train_config", json::object());
    if (!m.contains("trainer")) return ck;

    try {
        const json& t = m.at("trainer");
        TrainerSnapshot<float> s;
        s.step = t.at("step").get<long>();
        std::size_t pos = 0;
        auto take = [&](const Shape& shape) {
            Tensor<float> out(shape);
            if (pos + out.size() > contents.optim.size()) throw CorruptionError("optim.bin is shorter than its layout");
            std::copy(contents.optim.begin() + pos, contents.optim.begin() + pos + out.size(), out.vec().begin());
            pos += out.size();
            return out;
        };
        auto moments = [&](OptimizerState<float>& st, const nn::ParamList<float>& params, bool present, long tt) {
            st.t = tt;
            if (!present) return;
            for (const auto& [name, p] : params) {
                st.m.push_back(take(p.shape()));
                st.v.push_back(take(p.shape()));
            }
        };
        moments(s.generator_opt, ck.bundle.generator_side_params(), t.at("generator_moments").get<bool>(),
                t.at("generator_t").get<long>());
        moments(s.discriminator_opt, ck.bundle.discriminator_params(), t.at("discriminator_moments").get<bool>(),
                t.at("discriminator_t").get<long>());
        const Shape img{1, std::size_t(arch.channels), std::size_t(arch.patch_size), std::size_t(arch.patch_size)};
        for (std::size_t i = 0, n = t.at("history_X").get<std::size_t>(); i < n; ++i) s.history_X.push_back(take(img));
        for (std::size_t i = 0, n = t.at("history_Y").get<std::size_t>(); i < n; ++i) s.history_Y.push_back(take(img));
        if (pos != contents.optim.size()) throw CorruptionError("optim.bin is longer than its layout");
        s.history_X_rng = m.at("rng").at("history_X").get<std::string>();
        s.history_Y_rng = m.at("rng").at("history_Y").get<std::string>();
        ck.data_rng = m.at("rng").at("data").get<std::string>();
        ck.trainer = std::move(s);
    } catch (const json::exception& e) {
        throw CorruptionError(std::string("malformed trainer state: ") + e.what());
    }
    return ck;
}

std::uintmax_t container_bytes(const std::filesystem::path& dir) {
    std::uintmax_t total = 0;
    for (const auto& f : std::filesystem::directory_iterator(dir))
        if (f.is_regular_file()) total += f.file_size();
    return total;
}

}  // namespace docmoe
