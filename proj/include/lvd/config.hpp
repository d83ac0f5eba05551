#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace lvd {

// Flat `key = value` configuration with a closed key set: unknown keys and
// malformed values fail loudly. The table below is the reference list of
// every key, its type, and its default.
class Config {
  public:
    enum class Type { integer, real, text };

    struct KeySpec {
        Type type;
        const char* def;
        const char* doc;
    };

    static const std::map<std::string, KeySpec>& known() {
        static const std::map<std::string, KeySpec> k = {
            {"schedule.steps", {Type::integer, "200", "diffusion timestep count T"}},
            {"schedule.beta_start", {Type::real, "1e-4", "first variance increment"}},
            {"schedule.beta_end", {Type::real, "2e-2", "last variance increment"}},
            {"schedule.kind", {Type::text, "linear", "schedule family (linear)"}},
            {"video.frames", {Type::integer, "16", "frames per training/sample clip L"}},
            {"video.size", {Type::integer, "64", "frame height = width in pixels"}},
            {"codec.factor", {Type::integer, "8", "codec spatial downsampling factor"}},
            {"codec.latent_channels", {Type::integer, "4", "latent channel count C"}},
            {"codec.width", {Type::integer, "32", "codec base width (multiple of 16)"}},
            {"text.vocab", {Type::integer, "4096", "hash vocabulary size"}},
            {"text.len", {Type::integer, "16", "text token count N_tex"}},
            {"text.dim", {Type::integer, "64", "context embedding width d"}},
            {"image.patch", {Type::integer, "8", "image encoder patch size p"}},
            {"image.dim", {Type::integer, "64", "image token width d_vis"}},
            {"image.layers", {Type::integer, "2", "image encoder depth"}},
            {"image.heads", {Type::integer, "2", "image encoder attention heads"}},
            {"proj.queries", {Type::integer, "16", "projection learned-query count M"}},
            {"proj.layers", {Type::integer, "2", "projection network depth"}},
            {"proj.heads", {Type::integer, "2", "projection attention heads"}},
            {"cond.mode", {Type::text, "full_tokens", "full_tokens or cls_only"}},
            {"unet.width", {Type::integer, "64", "denoiser base width"}},
            {"unet.heads", {Type::integer, "2", "denoiser attention heads"}},
            {"unet.temb", {Type::integer, "128", "timestep embedding width"}},
            {"unet.groups", {Type::integer, "8", "group-norm group count"}},
            {"data.clip_frames", {Type::integer, "96", "native frames per generated clip"}},
            {"data.fps", {Type::integer, "8", "fps tag written to the manifest"}},
            {"train.seed", {Type::integer, "0", "training master seed"}},
            {"train.batch", {Type::integer, "16", "clips (or frames) per step"}},
            {"train.accum", {Type::integer, "1", "gradient accumulation factor"}},
            {"train.lr_codec", {Type::real, "1e-3", "codec stage learning rate"}},
            {"train.lr_adapter", {Type::real, "1e-4", "image_adapter stage learning rate"}},
            {"train.lr_finetune", {Type::real, "5e-5", "video_finetune stage learning rate"}},
            {"train.steps_codec", {Type::integer, "4000", "codec stage step count"}},
            {"train.steps_adapter", {Type::integer, "20000", "image_adapter stage step count"}},
            {"train.steps_finetune", {Type::integer, "2000", "video_finetune stage step count"}},
            {"train.cond_drop", {Type::real, "0.1", "joint condition dropout probability"}},
            {"train.checkpoint_every", {Type::integer, "500", "steps between checkpoints"}},
            {"train.log_every", {Type::integer, "25", "steps between metric rows"}},
        };
        return k;
    }

    static Config defaults() {
        Config c;
        for (auto& [k, spec] : known()) c.values_[k] = spec.def;
        return c;
    }

    static Config load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
        Config c = defaults();
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error("config: line " + std::to_string(lineno) +
                                         ": expected key = value");
            c.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
        return c;
    }

    void set(const std::string& key, const std::string& value) {
        auto it = known().find(key);
        if (it == known().end()) throw std::runtime_error("config: unknown key '" + key + "'");
        check_type(key, it->second.type, value);
        values_[key] = value;
    }

    int64_t geti(const std::string& key) const { return std::stoll(raw(key, Type::integer)); }
    double getf(const std::string& key) const { return std::stod(raw(key, Type::real)); }
    const std::string& gets(const std::string& key) const { return raw(key, Type::text); }

    const std::map<std::string, std::string>& values() const { return values_; }

    static Config from_values(const std::map<std::string, std::string>& vals) {
        Config c = defaults();
        for (auto& [k, v] : vals) c.set(k, v);
        return c;
    }

  private:
    std::map<std::string, std::string> values_;

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }

    static void check_type(const std::string& key, Type t, const std::string& v) {
        if (v.empty()) throw std::runtime_error("config: empty value for '" + key + "'");
        char* end = nullptr;
        if (t == Type::integer) {
            std::strtoll(v.c_str(), &end, 10);
            if (*end != '\0')
                throw std::runtime_error("config: '" + key + "' wants an integer, got '" + v + "'");
        } else if (t == Type::real) {
            std::strtod(v.c_str(), &end);
            if (*end != '\0')
                throw std::runtime_error("config: '" + key + "' wants a number, got '" + v + "'");
        }
    }

    const std::string& raw(const std::string& key, Type want) const {
        auto spec = known().find(key);
        if (spec == known().end()) throw std::runtime_error("config: unknown key '" + key + "'");
        if (spec->second.type != want) throw std::runtime_error("config: type misuse for '" + key + "'");
        return values_.at(key);
    }
};

}  // namespace lvd
