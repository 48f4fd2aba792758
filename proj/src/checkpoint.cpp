#include "viewalign/checkpoint.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "viewalign/errors.hpp"

namespace viewalign {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'V', 'A', 'C', 'K', 'P', 'T', '0', '1'};

json model_config_to_json(const ModelConfig& m) {
    return json{{"latent_factor", m.latent_factor},
                {"base_width", m.base_width},
                {"encoder_levels", m.encoder_levels},
                {"decoder_levels", m.decoder_levels},
                {"temb_dim", m.temb_dim},
                {"norm_groups", m.norm_groups},
                {"attention_dim", m.attention_dim},
                {"se_ratio", m.se_ratio},
                {"radius", m.radius},
                {"include_self", m.include_self},
                {"align_enabled", m.align_enabled},
                {"refine_enabled", m.refine_enabled}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig m;
    m.latent_factor = j.at("latent_factor").get<int>();
    m.base_width = j.at("base_width").get<int>();
    m.encoder_levels = j.at("encoder_levels").get<int>();
    m.decoder_levels = j.at("decoder_levels").get<int>();
    m.temb_dim = j.at("temb_dim").get<int>();
    m.norm_groups = j.at("norm_groups").get<int>();
    m.attention_dim = j.at("attention_dim").get<int>();
    m.se_ratio = j.at("se_ratio").get<int>();
    m.radius = j.at("radius").get<int>();
    m.include_self = j.at("include_self").get<bool>();
    m.align_enabled = j.at("align_enabled").get<bool>();
    m.refine_enabled = j.at("refine_enabled").get<bool>();
    return m;
}

}  // namespace

std::string content_hash_sha1(const std::string& tag, const void* payload, size_t size) {
    std::string framed = tag + " " + std::to_string(size);
    framed.push_back('\0');
    framed.append(reinterpret_cast<const char*>(payload), size);
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(framed.data(), framed.size(), md, &len, EVP_sha1(), nullptr) != 1)
        throw Error("content hash: digest failure");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

void save_checkpoint(const std::string& path, const Denoiser& model,
                     const NoiseSchedule& schedule, uint64_t seed) {
    const ParamStore& store = model.params();

    // float32 payload in registration order
    std::string payload;
    payload.reserve(static_cast<size_t>(store.total_scalars()) * sizeof(float));
    json tensors = json::array();
    for (size_t i = 0; i < store.count(); ++i) {
        const Tensor& t = store.value(static_cast<ParamId>(i));
        json entry;
        entry["name"] = store.name(static_cast<ParamId>(i));
        entry["shape"] = t.shape();
        tensors.push_back(entry);
        for (int64_t j = 0; j < t.numel(); ++j) {
            const float f = static_cast<float>(t[j]);
            payload.append(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    }

    json manifest;
    manifest["format_version"] = 1;
    manifest["model"] = model_config_to_json(model.config());
    manifest["latent_channels"] = model.latent_channels();
    manifest["schedule"] = {{"kind", schedule_kind_to_string(schedule.kind)},
                            {"timesteps", schedule.total_steps}};
    manifest["seed"] = seed;
    manifest["tensors"] = tensors;
    manifest["content_hash"] = content_hash_sha1("viewalign-params", payload.data(),
                                                 payload.size());
    const std::string mstr = manifest.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoFailure("cannot write checkpoint: " + path);
        out.write(kMagic, sizeof(kMagic));
        const uint64_t mlen = mstr.size();
        out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
        out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        if (!out) throw IoFailure("failed writing checkpoint: " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoFailure("cannot finalize checkpoint: " + path);
}

namespace {

json read_manifest(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoFailure("not a checkpoint file: " + path);
    uint64_t mlen = 0;
    in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
    if (!in || mlen > (1ull << 30)) throw IoFailure("corrupt checkpoint manifest: " + path);
    std::string mstr(mlen, '\0');
    in.read(mstr.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw IoFailure("corrupt checkpoint manifest: " + path);
    try {
        return json::parse(mstr);
    } catch (const json::parse_error& e) {
        throw IoFailure("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
}

}  // namespace

std::string checkpoint_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open checkpoint: " + path);
    return read_manifest(in, path).at("content_hash").get<std::string>();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open checkpoint: " + path);
    const json manifest = read_manifest(in, path);

    const ModelConfig cfg = model_config_from_json(manifest.at("model"));
    const int latent_channels = manifest.at("latent_channels").get<int>();
    const uint64_t seed = manifest.at("seed").get<uint64_t>();

    LoadedCheckpoint out{Denoiser(cfg, latent_channels, /*init_seed=*/0),
                         make_schedule(manifest.at("schedule").at("timesteps").get<int>(),
                                       schedule_kind_from_string(
                                           manifest.at("schedule").at("kind").get<std::string>())),
                         seed, manifest.at("content_hash").get<std::string>()};

    ParamStore& store = out.model.params();
    const json& tensors = manifest.at("tensors");
    if (tensors.size() != store.count())
        throw IoFailure("checkpoint tensor count does not match model config");

    std::string payload;
    {
        std::string rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        payload = std::move(rest);
    }
    size_t off = 0;
    for (size_t i = 0; i < store.count(); ++i) {
        Tensor& t = store.value(static_cast<ParamId>(i));
        const json& entry = tensors.at(i);
        if (entry.at("name").get<std::string>() != store.name(static_cast<ParamId>(i)))
            throw IoFailure("checkpoint tensor name mismatch at index " + std::to_string(i));
        const auto shape = entry.at("shape").get<std::vector<int64_t>>();
        if (shape != t.shape())
            throw IoFailure("checkpoint tensor shape mismatch for " +
                            store.name(static_cast<ParamId>(i)));
        const size_t bytes = static_cast<size_t>(t.numel()) * sizeof(float);
        if (off + bytes > payload.size()) throw IoFailure("checkpoint payload truncated");
        for (int64_t j = 0; j < t.numel(); ++j) {
            float f;
            std::memcpy(&f, payload.data() + off + static_cast<size_t>(j) * sizeof(float),
                        sizeof(float));
            t[j] = static_cast<double>(f);
        }
        off += bytes;
    }
    if (off != payload.size()) throw IoFailure("checkpoint payload has trailing bytes");

    const std::string recomputed =
        content_hash_sha1("viewalign-params", payload.data(), payload.size());
    if (recomputed != out.content_hash)
        throw IoFailure("checkpoint content hash mismatch (file corrupted?)");
    return out;
}

}  // namespace viewalign
