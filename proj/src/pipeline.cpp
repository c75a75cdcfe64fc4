#include "prunerec/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "prunerec/diagnostics.hpp"
#include "prunerec/errors.hpp"

namespace prunerec {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
const char kMagic[4] = {'P', 'R', 'C', 'K'};

// seed-lineage salts; every consumer of randomness gets its own stream
constexpr std::uint64_t kSaltInit = 1;
constexpr std::uint64_t kSaltTrainBase = 2;
constexpr std::uint64_t kSaltCalib = 3;
constexpr std::uint64_t kSaltRestore1 = 4;
constexpr std::uint64_t kSaltRestore2 = 5;
constexpr std::uint64_t kSaltRestore3 = 6;
constexpr std::uint64_t kSaltObserve = 7;
constexpr std::uint64_t kSaltRandomPlan = 8;

std::uint64_t fnv1a64(const unsigned char* bytes, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct NamedTensor {
    std::string name;
    TensorPtr tensor;  // may be null (untied lm_head absent, biases off)
};

std::vector<NamedTensor> named_tensors(const TransformerModel& model) {
    std::vector<NamedTensor> out;
    out.push_back({"token_embedding", model.token_embedding});
    for (int l = 0; l < model.n_layers(); ++l) {
        const LayerWeights& lw = model.layers[static_cast<std::size_t>(l)];
        const std::string p = "layer." + std::to_string(l) + ".";
        out.push_back({p + "w_q", lw.w_q});
        out.push_back({p + "w_k", lw.w_k});
        out.push_back({p + "w_v", lw.w_v});
        out.push_back({p + "w_o", lw.w_o});
        out.push_back({p + "w_gate", lw.w_gate});
        out.push_back({p + "w_up", lw.w_up});
        out.push_back({p + "w_down", lw.w_down});
        out.push_back({p + "b_gate", lw.b_gate});
        out.push_back({p + "b_up", lw.b_up});
        out.push_back({p + "b_down", lw.b_down});
        out.push_back({p + "attn_norm", lw.attn_norm});
        out.push_back({p + "mlp_norm", lw.mlp_norm});
    }
    out.push_back({"final_norm", model.final_norm});
    out.push_back({"lm_head", model.lm_head});
    return out;
}

void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void append_f64_le(std::vector<unsigned char>& buf, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i)
        buf.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

void append_f32_le(std::vector<unsigned char>& buf, double v) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i)
        buf.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
    const std::uint64_t bits = read_u64(p);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

double read_f32_le(const unsigned char* p) {
    const std::uint32_t bits = read_u32(p);
    float v;
    std::memcpy(&v, &bits, 4);
    return static_cast<double>(v);
}

struct DirEntry {
    std::string name;
    std::string dtype;  // "f64" or "f32"
    Shape shape;
    std::uint64_t offset = 0;
};

}  // namespace

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt) {
    std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

void save_checkpoint(const TransformerModel& model, const std::string& path,
                     CheckpointDtype dtype, const std::string& stage,
                     const std::string& seed_lineage) {
    const std::string dtype_name = dtype == CheckpointDtype::F64 ? "f64" : "f32";
    const std::size_t word = dtype == CheckpointDtype::F64 ? 8 : 4;

    std::vector<unsigned char> payload;
    std::ostringstream header;
    header << "stage=" << stage << "\n";
    header << "seed_lineage=" << seed_lineage << "\n";
    header << "dtype=" << dtype_name << "\n";
    const ModelConfig& c = model.config;
    header << "config.n_layers=" << c.n_layers << "\n";
    header << "config.n_heads=" << c.n_heads << "\n";
    header << "config.d_k=" << c.d_k << "\n";
    header << "config.d_model=" << c.d_model << "\n";
    header << "config.d_ff=" << c.d_ff << "\n";
    header << "config.vocab_size=" << c.vocab_size << "\n";
    header << "config.max_seq_len=" << c.max_seq_len << "\n";
    header << "config.rope_base=" << fmt_double(c.rope_base) << "\n";
    header << "config.tie_embeddings=" << (c.tie_embeddings ? 1 : 0) << "\n";
    header << "config.mlp_bias=" << (c.mlp_bias ? 1 : 0) << "\n";
    for (int l = 0; l < model.n_layers(); ++l) {
        header << "layer." << l << ".n_heads="
               << model.layers[static_cast<std::size_t>(l)].n_heads << "\n";
        header << "layer." << l << ".d_ff="
               << model.layers[static_cast<std::size_t>(l)].d_ff << "\n";
    }
    for (const NamedTensor& nt : named_tensors(model)) {
        if (!nt.tensor) continue;
        header << "tensor " << nt.name << ' ' << dtype_name << ' '
               << nt.tensor->ndim();
        for (std::int64_t d : nt.tensor->shape) header << ' ' << d;
        header << ' ' << payload.size() << "\n";
        payload.reserve(payload.size() + nt.tensor->data.size() * word);
        for (double v : nt.tensor->data)
            dtype == CheckpointDtype::F64 ? append_f64_le(payload, v)
                                          : append_f32_le(payload, v);
    }
    header << "checksum=" << std::hex << std::setw(16) << std::setfill('0')
           << fnv1a64(payload.data(), payload.size()) << "\n";
    const std::string header_text = header.str();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(kMagic, 4);
    write_u32(out, kCheckpointVersion);
    write_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed for " + path);
}

namespace {

struct ParsedCheckpoint {
    std::map<std::string, std::string> fields;
    std::vector<DirEntry> dir;
    std::string header_text;
    std::vector<unsigned char> payload;
};

ParsedCheckpoint read_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 16) throw IoError("checkpoint " + path + ": truncated preamble");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw IoError("checkpoint " + path + ": bad magic");
    const std::uint32_t version = read_u32(bytes.data() + 4);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint " + path + ": unsupported version " +
                      std::to_string(version));
    const std::uint64_t header_len = read_u64(bytes.data() + 8);
    if (bytes.size() < 16 + header_len)
        throw IoError("checkpoint " + path + ": truncated header");

    ParsedCheckpoint pc;
    pc.header_text.assign(reinterpret_cast<const char*>(bytes.data() + 16), header_len);
    pc.payload.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len),
                      bytes.end());

    std::istringstream hs(pc.header_text);
    std::string line;
    while (std::getline(hs, line)) {
        if (line.rfind("tensor ", 0) == 0) {
            std::istringstream ls(line);
            std::string tag;
            DirEntry e;
            int ndim = 0;
            ls >> tag >> e.name >> e.dtype >> ndim;
            if (!ls || ndim < 0 || ndim > 8)
                throw IoError("checkpoint " + path + ": malformed directory line");
            for (int i = 0; i < ndim; ++i) {
                std::int64_t d = 0;
                ls >> d;
                e.shape.push_back(d);
            }
            ls >> e.offset;
            if (!ls) throw IoError("checkpoint " + path + ": malformed directory line");
            pc.dir.push_back(std::move(e));
        } else {
            const auto eq = line.find('=');
            if (eq != std::string::npos) pc.fields[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }

    const auto ck = pc.fields.find("checksum");
    if (ck == pc.fields.end()) throw IoError("checkpoint " + path + ": missing checksum");
    std::ostringstream want;
    want << std::hex << std::setw(16) << std::setfill('0')
         << fnv1a64(pc.payload.data(), pc.payload.size());
    if (want.str() != ck->second)
        throw IoError("checkpoint " + path + ": payload checksum mismatch");
    return pc;
}

int field_int(const ParsedCheckpoint& pc, const std::string& key, const std::string& path) {
    const auto it = pc.fields.find(key);
    if (it == pc.fields.end())
        throw IoError("checkpoint " + path + ": missing field " + key);
    return std::stoi(it->second);
}

}  // namespace

TransformerModel load_checkpoint(const std::string& path) {
    ParsedCheckpoint pc = read_checkpoint_file(path);

    ModelConfig c;
    c.n_layers = field_int(pc, "config.n_layers", path);
    c.n_heads = field_int(pc, "config.n_heads", path);
    c.d_k = field_int(pc, "config.d_k", path);
    c.d_model = field_int(pc, "config.d_model", path);
    c.d_ff = field_int(pc, "config.d_ff", path);
    c.vocab_size = field_int(pc, "config.vocab_size", path);
    c.max_seq_len = field_int(pc, "config.max_seq_len", path);
    {
        const auto it = pc.fields.find("config.rope_base");
        if (it == pc.fields.end())
            throw IoError("checkpoint " + path + ": missing field config.rope_base");
        c.rope_base = std::stod(it->second);
    }
    c.tie_embeddings = field_int(pc, "config.tie_embeddings", path) != 0;
    c.mlp_bias = field_int(pc, "config.mlp_bias", path) != 0;

    TransformerModel model;
    model.config = c;
    model.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights& lw = model.layers[static_cast<std::size_t>(l)];
        lw.n_heads = field_int(pc, "layer." + std::to_string(l) + ".n_heads", path);
        lw.d_ff = field_int(pc, "layer." + std::to_string(l) + ".d_ff", path);
    }

    std::map<std::string, const DirEntry*> by_name;
    for (const DirEntry& e : pc.dir) by_name[e.name] = &e;

    auto load_tensor = [&](const std::string& name, Shape expect,
                           bool required) -> TensorPtr {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            if (required)
                throw IoError("checkpoint " + path + ": missing tensor " + name);
            return nullptr;
        }
        const DirEntry& e = *it->second;
        if (e.shape != expect)
            throw IoError("checkpoint " + path + ": tensor " + name + " has shape " +
                          shape_str(e.shape) + ", expected " + shape_str(expect));
        std::int64_t count = 1;
        for (std::int64_t d : e.shape) count *= d;
        const std::size_t word = e.dtype == "f64" ? 8 : e.dtype == "f32" ? 4 : 0;
        if (word == 0)
            throw IoError("checkpoint " + path + ": tensor " + name +
                          " has unknown dtype " + e.dtype);
        const std::uint64_t end =
            e.offset + static_cast<std::uint64_t>(count) * word;
        if (end > pc.payload.size())
            throw IoError("checkpoint " + path + ": truncated payload for " + name);
        auto t = make_tensor(std::move(expect));
        const unsigned char* src = pc.payload.data() + e.offset;
        for (std::int64_t i = 0; i < count; ++i)
            t->data[static_cast<std::size_t>(i)] =
                word == 8 ? read_f64_le(src + i * 8) : read_f32_le(src + i * 4);
        return t;
    };

    const std::int64_t dm = c.d_model, vocab = c.vocab_size;
    model.token_embedding = load_tensor("token_embedding", {vocab, dm}, true);
    for (int l = 0; l < c.n_layers; ++l) {
        LayerWeights& lw = model.layers[static_cast<std::size_t>(l)];
        const std::string p = "layer." + std::to_string(l) + ".";
        const std::int64_t hd = static_cast<std::int64_t>(lw.n_heads) * c.d_k;
        const std::int64_t ff = lw.d_ff;
        lw.w_q = load_tensor(p + "w_q", {dm, hd}, true);
        lw.w_k = load_tensor(p + "w_k", {dm, hd}, true);
        lw.w_v = load_tensor(p + "w_v", {dm, hd}, true);
        lw.w_o = load_tensor(p + "w_o", {hd, dm}, true);
        lw.w_gate = load_tensor(p + "w_gate", {dm, ff}, true);
        lw.w_up = load_tensor(p + "w_up", {dm, ff}, true);
        lw.w_down = load_tensor(p + "w_down", {ff, dm}, true);
        lw.b_gate = load_tensor(p + "b_gate", {ff}, c.mlp_bias);
        lw.b_up = load_tensor(p + "b_up", {ff}, c.mlp_bias);
        lw.b_down = load_tensor(p + "b_down", {dm}, c.mlp_bias);
        lw.attn_norm = load_tensor(p + "attn_norm", {dm}, true);
        lw.mlp_norm = load_tensor(p + "mlp_norm", {dm}, true);
    }
    model.final_norm = load_tensor("final_norm", {dm}, true);
    model.lm_head = load_tensor("lm_head", {dm, vocab}, !c.tie_embeddings);
    return model;
}

std::string inspect_checkpoint(const std::string& path) {
    const ParsedCheckpoint pc = read_checkpoint_file(path);
    return "magic=PRCK\nversion=" + std::to_string(kCheckpointVersion) + "\n" +
           pc.header_text;
}

int PipelineConfig::resolved_hidden_keep() const {
    if (hidden_keep >= 0) return hidden_keep;
    return model.d_k * (model.n_heads - k_attn);
}

int PipelineConfig::resolved_k_mlp(int current_d_model) const {
    if (k_mlp >= 0) return k_mlp;
    return 2 * current_d_model;
}

namespace {

int to_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const int v = std::stoi(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw IoError("config: bad integer for " + key + ": '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw IoError("config: bad number for " + key + ": '" + value + "'");
    }
}

std::uint64_t to_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw IoError("config: bad unsigned integer for " + key + ": '" + value + "'");
    }
}

bool apply_distill_key(DistillConfig& dc, const std::string& field,
                       const std::string& key, const std::string& value) {
    if (field == "lambda") {
        dc.lambda = to_double(key, value);
    } else if (field == "kl_direction") {
        if (value == "forward")
            dc.kl_direction = KlDirection::Forward;
        else if (value == "reverse")
            dc.kl_direction = KlDirection::Reverse;
        else
            throw IoError("config: bad kl_direction '" + value + "'");
    } else if (field == "learning_rate") {
        dc.learning_rate = to_double(key, value);
    } else if (field == "epochs") {
        dc.epochs = to_int(key, value);
    } else if (field == "batch_size") {
        dc.batch_size = to_int(key, value);
    } else {
        return false;
    }
    return true;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

void apply_config_line(PipelineConfig& config, const std::string& line) {
    const auto eq = line.find('=');
    if (eq == std::string::npos)
        throw IoError("config: expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw IoError("config: empty key in '" + line + "'");

    if (key == "model.n_layers") config.model.n_layers = to_int(key, value);
    else if (key == "model.n_heads") config.model.n_heads = to_int(key, value);
    else if (key == "model.d_k") config.model.d_k = to_int(key, value);
    else if (key == "model.d_model") config.model.d_model = to_int(key, value);
    else if (key == "model.d_ff") config.model.d_ff = to_int(key, value);
    else if (key == "model.max_seq_len") config.model.max_seq_len = to_int(key, value);
    else if (key == "model.rope_base") config.model.rope_base = to_double(key, value);
    else if (key == "model.tie_embeddings") config.model.tie_embeddings = to_int(key, value) != 0;
    else if (key == "model.mlp_bias") config.model.mlp_bias = to_int(key, value) != 0;
    else if (key == "data.n_items") config.data.n_items = to_int(key, value);
    else if (key == "data.n_users") config.data.n_users = to_int(key, value);
    else if (key == "data.n_clusters") config.data.n_clusters = to_int(key, value);
    else if (key == "data.within_cluster_prob") config.data.within_cluster_prob = to_double(key, value);
    else if (key == "data.h_max") config.data.h_max = to_int(key, value);
    else if (key == "data.walk_len") config.data.walk_len = to_int(key, value);
    else if (key == "data.seed") config.data.seed = to_u64(key, value);
    else if (key == "data.path") config.dataset_path = value;
    else if (key == "calib.b") config.calib_b = to_int(key, value);
    else if (key == "alpha") config.alpha = to_double(key, value);
    else if (key == "k_attn") config.k_attn = to_int(key, value);
    else if (key == "hidden_keep") config.hidden_keep = value == "auto" ? -1 : to_int(key, value);
    else if (key == "tau") {
        if (value == "auto") config.tau = std::nullopt;
        else config.tau = to_double(key, value);
    }
    else if (key == "k_mlp") config.k_mlp = value == "auto" ? -1 : to_int(key, value);
    else if (key == "k_layer") config.k_layer = to_int(key, value);
    else if (key == "seed") config.seed = to_u64(key, value);
    else if (key == "load_base") config.load_base = value;
    else if (key.rfind("distill.", 0) == 0) {
        const std::string rest = key.substr(8);
        const auto dot = rest.find('.');
        if (dot == std::string::npos) {
            // shared shorthand: distill.lambda=... applies to all four phases
            if (!apply_distill_key(config.distill_base, rest, key, value) ||
                !apply_distill_key(config.distill_stage1, rest, key, value) ||
                !apply_distill_key(config.distill_stage2, rest, key, value) ||
                !apply_distill_key(config.distill_stage3, rest, key, value))
                throw IoError("config: unknown key " + key);
        } else {
            const std::string phase = rest.substr(0, dot);
            const std::string field = rest.substr(dot + 1);
            DistillConfig* dc = phase == "base"     ? &config.distill_base
                                : phase == "stage1" ? &config.distill_stage1
                                : phase == "stage2" ? &config.distill_stage2
                                : phase == "stage3" ? &config.distill_stage3
                                                    : nullptr;
            if (!dc || !apply_distill_key(*dc, field, key, value))
                throw IoError("config: unknown key " + key);
        }
    } else {
        throw IoError("config: unknown key " + key);
    }
}

PipelineConfig parse_pipeline_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    PipelineConfig config;
    std::string line;
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        apply_config_line(config, line);
    }
    return config;
}

std::pair<double, double> quick_hr_ndcg(const TransformerModel& model,
                                        const RecDataset& dataset, Split split, int k) {
    const std::vector<int>& indices = dataset.split_indices(split);
    if (indices.empty()) throw ContractError("quick_hr_ndcg: empty split");
    std::vector<int> ranks;
    ranks.reserve(indices.size());
    for (int idx : indices)
        ranks.push_back(rank_target(model, encode(dataset, idx), dataset.n_items));
    return {hr_at_k(ranks, k), ndcg_at_k(ranks, k)};
}

namespace {

std::vector<Encoded> encode_calibration(const RecDataset& dataset,
                                        const PipelineConfig& config) {
    const std::vector<int> idx = sample_calibration_indices(
        dataset, config.calib_b, derive_seed(config.seed, kSaltCalib));
    std::vector<Encoded> calib;
    calib.reserve(idx.size());
    for (int i : idx) calib.push_back(encode(dataset, i));
    return calib;
}

std::vector<std::vector<int>> calibration_sequences(const RecDataset& dataset,
                                                    const PipelineConfig& config) {
    const std::vector<int> idx = sample_calibration_indices(
        dataset, config.calib_b, derive_seed(config.seed, kSaltCalib));
    std::vector<std::vector<int>> seqs;
    seqs.reserve(idx.size());
    for (int i : idx) seqs.push_back(full_token_sequence(dataset, i));
    return seqs;
}

void ensure_dir(const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir);
}

bool plan_is_noop(const PruningPlan& plan, const TransformerModel& model) {
    for (const auto& hs : plan.heads_to_prune)
        if (!hs.empty()) return false;
    if (plan.hidden_dims_to_keep &&
        static_cast<int>(plan.hidden_dims_to_keep->size()) != model.config.d_model)
        return false;
    if (plan.mlp_dims_to_keep) {
        for (int l = 0; l < model.n_layers(); ++l)
            if (static_cast<int>((*plan.mlp_dims_to_keep)[static_cast<std::size_t>(l)]
                                     .size()) != model.layers[static_cast<std::size_t>(l)].d_ff)
                return false;
    }
    if (plan.layers_to_remove && !plan.layers_to_remove->empty()) return false;
    return true;
}

}  // namespace

StageResult run_stage1(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir) {
    ensure_dir(out_dir);
    for (const LayerWeights& lw : model.layers)
        if (lw.n_heads != model.config.n_heads)
            throw ContractError("stage1: model already head-pruned");
    const int keep = config.resolved_hidden_keep();
    if (keep < 1 || keep > model.config.d_model)
        throw PlanError("stage1: hidden_keep " + std::to_string(keep) +
                        " outside [1, " + std::to_string(model.config.d_model) + "]");
    if (config.k_attn < 0 || config.k_attn >= model.config.n_heads)
        throw PlanError("stage1: k_attn " + std::to_string(config.k_attn) +
                        " outside [0, " + std::to_string(model.config.n_heads) + ")");

    const std::vector<Encoded> calib = encode_calibration(dataset, config);
    const HeadScoreMatrix raw = head_importance_raw(model, calib);
    const HeadScoreMatrix norm = minmax_normalize_rows(raw);
    const HeadImportance imp = propagate_importance(norm, config.alpha);

    PruningPlan plan;
    plan.heads_to_prune = select_heads(imp, config.k_attn);
    plan.provenance = "stage1 alpha=" + fmt_double(config.alpha) +
                      " k_attn=" + std::to_string(config.k_attn) +
                      " hidden_keep=" + std::to_string(keep) +
                      " calib_b=" + std::to_string(config.calib_b);

    std::vector<ImportanceRow> rows;
    for (int l = 0; l < static_cast<int>(raw.size()); ++l)
        for (int h = 0; h < static_cast<int>(raw[static_cast<std::size_t>(l)].size()); ++h) {
            rows.push_back({"head_raw", l, h, raw[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]});
            rows.push_back({"head_norm", l, h, norm[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]});
            rows.push_back({"head_prop", l, h, imp.scores[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)]});
        }

    TransformerModel pruned = prune_heads(model, plan.heads_to_prune);
    if (keep < pruned.config.d_model) {
        pruned.token_embedding->requires_grad = true;
        const DimImportance dim_imp = embedding_dim_importance(pruned, calib);
        pruned.token_embedding->requires_grad = false;
        pruned.token_embedding->grad.clear();
        for (int d = 0; d < static_cast<int>(dim_imp.scores.size()); ++d)
            rows.push_back({"hidden", -1, d, dim_imp.scores[static_cast<std::size_t>(d)]});
        plan.hidden_dims_to_keep = select_hidden_dims(dim_imp, keep);
        pruned = prune_hidden_dims(pruned, *plan.hidden_dims_to_keep);
    }
    save_plan(plan, out_dir + "/plan_stage1.txt");
    save_importance_report(rows, out_dir + "/importance_stage1.tsv");

    StageResult result{std::move(pruned), std::move(plan)};
    const auto pre = quick_hr_ndcg(result.model, dataset, Split::Valid, 20);
    result.hr20_pre_restore = pre.first;
    if (!plan_is_noop(result.plan, model)) {
        DistillConfig dc = config.distill_stage1;
        dc.seed = derive_seed(config.seed, kSaltRestore1);
        const TrainReport tr = restore(result.model, model, dataset, dc);
        append_train_log(tr, out_dir + "/restore_stage1.log", "stage1");
        result.restored = true;
        result.hr20_post_restore = quick_hr_ndcg(result.model, dataset, Split::Valid, 20).first;
    } else {
        result.hr20_post_restore = result.hr20_pre_restore;
    }
    return result;
}

StageResult run_stage2(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir) {
    ensure_dir(out_dir);
    const int k = config.resolved_k_mlp(model.config.d_model);
    for (const LayerWeights& lw : model.layers)
        if (k > lw.d_ff)
            throw PlanError("stage2: k_mlp " + std::to_string(k) + " exceeds d_ff " +
                            std::to_string(lw.d_ff));
    if (k < 1) throw PlanError("stage2: k_mlp must be >= 1");

    const std::vector<Encoded> calib = encode_calibration(dataset, config);
    const MlpDimStats stats = mlp_dim_stats(model, calib, config.tau);

    PruningPlan plan;
    plan.heads_to_prune.assign(static_cast<std::size_t>(model.n_layers()), {});
    plan.mlp_dims_to_keep = select_mlp_dims(stats, k);
    plan.provenance = "stage2 k_mlp=" + std::to_string(k) +
                      " tau=" + (config.tau ? fmt_double(*config.tau) : std::string("auto")) +
                      " calib_b=" + std::to_string(config.calib_b);
    save_plan(plan, out_dir + "/plan_stage2.txt");

    std::vector<ImportanceRow> rows;
    for (int l = 0; l < static_cast<int>(stats.counts.size()); ++l) {
        rows.push_back({"mlp_tau", l, 0, stats.tau[static_cast<std::size_t>(l)]});
        for (int d = 0; d < static_cast<int>(stats.counts[static_cast<std::size_t>(l)].size()); ++d)
            rows.push_back({"mlp_count", l, d,
                            static_cast<double>(stats.counts[static_cast<std::size_t>(l)][static_cast<std::size_t>(d)])});
    }
    save_importance_report(rows, out_dir + "/importance_stage2.tsv");

    StageResult result{prune_mlp_dims(model, *plan.mlp_dims_to_keep), plan};
    const auto pre = quick_hr_ndcg(result.model, dataset, Split::Valid, 20);
    result.hr20_pre_restore = pre.first;
    if (!plan_is_noop(plan, model)) {
        DistillConfig dc = config.distill_stage2;
        dc.seed = derive_seed(config.seed, kSaltRestore2);
        const TrainReport tr = restore(result.model, model, dataset, dc);
        append_train_log(tr, out_dir + "/restore_stage2.log", "stage2");
        result.restored = true;
        result.hr20_post_restore = quick_hr_ndcg(result.model, dataset, Split::Valid, 20).first;
    } else {
        result.hr20_post_restore = result.hr20_pre_restore;
    }
    return result;
}

StageResult run_stage3(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir) {
    ensure_dir(out_dir);
    if (config.k_layer > model.n_layers())
        throw PlanError("stage3: k_layer " + std::to_string(config.k_layer) +
                        " exceeds current layer count " + std::to_string(model.n_layers()));
    if (config.k_layer < 1) throw PlanError("stage3: k_layer must be >= 1");

    const std::vector<std::vector<int>> seqs = calibration_sequences(dataset, config);
    const LayerImportance initial = layer_delta_ppl(model, seqs);
    const std::vector<int> removal_order = select_layers(model, seqs, config.k_layer, true);

    PruningPlan plan;
    plan.heads_to_prune.assign(static_cast<std::size_t>(model.n_layers()), {});
    plan.layers_to_remove = removal_order;
    plan.provenance = "stage3 k_layer=" + std::to_string(config.k_layer) +
                      " calib_b=" + std::to_string(config.calib_b);
    save_plan(plan, out_dir + "/plan_stage3.txt");

    std::vector<ImportanceRow> rows;
    rows.push_back({"layer_baseline_ppl", -1, 0, initial.baseline_ppl});
    for (int l = 0; l < static_cast<int>(initial.delta_ppl.size()); ++l)
        rows.push_back({"layer_delta_ppl", l, 0, initial.delta_ppl[static_cast<std::size_t>(l)]});
    for (int step = 0; step < static_cast<int>(removal_order.size()); ++step)
        rows.push_back({"layer_removed", removal_order[static_cast<std::size_t>(step)], step, 0.0});
    save_importance_report(rows, out_dir + "/importance_stage3.tsv");

    StageResult result{removal_order.empty() ? clone_model(model)
                                             : drop_layers(model, removal_order),
                       plan};
    const auto pre = quick_hr_ndcg(result.model, dataset, Split::Valid, 20);
    result.hr20_pre_restore = pre.first;
    if (!removal_order.empty()) {
        DistillConfig dc = config.distill_stage3;
        dc.seed = derive_seed(config.seed, kSaltRestore3);
        const TrainReport tr = restore(result.model, model, dataset, dc);
        append_train_log(tr, out_dir + "/restore_stage3.log", "stage3");
        result.restored = true;
        result.hr20_post_restore = quick_hr_ndcg(result.model, dataset, Split::Valid, 20).first;
    } else {
        result.hr20_post_restore = result.hr20_pre_restore;
    }
    return result;
}

PipelineResult run_pipeline(const PipelineConfig& config, const std::string& out_dir) {
    ensure_dir(out_dir);
    RecDataset dataset = config.dataset_path.empty() ? generate(config.data)
                                                     : load_dataset(config.dataset_path);
    save_dataset(dataset, out_dir + "/dataset.txt");

    ModelConfig mc = config.model;
    mc.vocab_size = dataset.vocab_size();
    mc.validate();

    TransformerModel base;
    if (!config.load_base.empty()) {
        base = load_checkpoint(config.load_base);
        if (base.config.vocab_size != mc.vocab_size)
            throw ContractError("pipeline: loaded base vocab " +
                                std::to_string(base.config.vocab_size) +
                                " != dataset vocab " + std::to_string(mc.vocab_size));
    } else {
        base = init_model(mc, derive_seed(config.seed, kSaltInit));
        DistillConfig dc = config.distill_base;
        dc.seed = derive_seed(config.seed, kSaltTrainBase);
        const TrainReport tr = train_base(base, dataset, dc);
        append_train_log(tr, out_dir + "/train_base.log", "base");
    }
    const std::string lineage = "master=" + std::to_string(config.seed);
    save_checkpoint(base, out_dir + "/base.prck", CheckpointDtype::F64, "base", lineage);

    const ConcentrationReport conc =
        observe(base, dataset, config.calib_b, kDefaultKGrid,
                derive_seed(config.seed, kSaltObserve));
    save_concentration_report(conc, out_dir + "/concentration.tsv");

    PipelineResult result;
    auto ledger_row = [&](const std::string& stage, const TransformerModel& m) {
        const auto [hr, ndcg] = quick_hr_ndcg(m, dataset, Split::Valid, 20);
        result.ledger.push_back({stage, param_count(m, false), hr, ndcg});
    };
    ledger_row("base", base);

    StageResult s1 = run_stage1(base, dataset, config, out_dir);
    save_checkpoint(s1.model, out_dir + "/stage1.prck", CheckpointDtype::F64, "stage1", lineage);
    ledger_row("stage1", s1.model);

    StageResult s2 = run_stage2(s1.model, dataset, config, out_dir);
    save_checkpoint(s2.model, out_dir + "/stage2.prck", CheckpointDtype::F64, "stage2", lineage);
    ledger_row("stage2", s2.model);

    StageResult s3 = run_stage3(s2.model, dataset, config, out_dir);
    save_checkpoint(s3.model, out_dir + "/stage3.prck", CheckpointDtype::F64, "stage3", lineage);
    ledger_row("stage3", s3.model);

    save_ledger(result.ledger, out_dir + "/ledger.tsv");

    result.final_eval = evaluate(s3.model, dataset, Split::Test, {5, 10, 20});
    save_eval_report(result.final_eval, out_dir + "/eval_test.txt");

    result.final_model = std::move(s3.model);
    s3.model = TransformerModel{};
    result.stages = {std::move(s1), std::move(s2), std::move(s3)};
    return result;
}

namespace {

std::vector<std::vector<int>> lowest_k_per_layer(const HeadScoreMatrix& scores, int k) {
    std::vector<std::vector<int>> picked;
    for (const std::vector<double>& row : scores) {
        std::vector<int> order(row.size());
        for (int i = 0; i < static_cast<int>(order.size()); ++i)
            order[static_cast<std::size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return row[static_cast<std::size_t>(a)] < row[static_cast<std::size_t>(b)];
        });
        std::vector<int> sel(order.begin(), order.begin() + k);
        std::sort(sel.begin(), sel.end());
        picked.push_back(std::move(sel));
    }
    return picked;
}

std::vector<std::vector<int>> wanda_head_selection(const TransformerModel& model,
                                                   const std::vector<Encoded>& calib,
                                                   int k_attn) {
    // per layer, pool concatenated head outputs over all calibration positions
    std::vector<std::vector<double>> pooled(static_cast<std::size_t>(model.n_layers()));
    std::vector<std::int64_t> pooled_rows(static_cast<std::size_t>(model.n_layers()), 0);
    for (const Encoded& enc : calib) {
        const Activations acts = capture_activations(model, enc.tokens);
        for (int l = 0; l < model.n_layers(); ++l) {
            const TensorPtr& x = acts[static_cast<std::size_t>(l)].attn_concat;
            pooled[static_cast<std::size_t>(l)].insert(pooled[static_cast<std::size_t>(l)].end(),
                                                       x->data.begin(), x->data.end());
            pooled_rows[static_cast<std::size_t>(l)] += x->dim(0);
        }
    }
    std::vector<std::vector<double>> head_scores;
    for (int l = 0; l < model.n_layers(); ++l) {
        const LayerWeights& lw = model.layers[static_cast<std::size_t>(l)];
        const std::int64_t width = lw.w_o->dim(0);
        auto x = make_tensor({pooled_rows[static_cast<std::size_t>(l)], width},
                             std::move(pooled[static_cast<std::size_t>(l)]));
        const TensorPtr score = wanda_score(lw.w_o, x);
        std::vector<double> per_head(static_cast<std::size_t>(lw.n_heads), 0.0);
        const std::int64_t d_model = score->dim(1);
        for (int h = 0; h < lw.n_heads; ++h)
            for (std::int64_t r = h * model.config.d_k; r < (h + 1) * model.config.d_k; ++r)
                for (std::int64_t ccol = 0; ccol < d_model; ++ccol)
                    per_head[static_cast<std::size_t>(h)] +=
                        score->data[static_cast<std::size_t>(r * d_model + ccol)];
        head_scores.push_back(std::move(per_head));
    }
    return lowest_k_per_layer(head_scores, k_attn);
}

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ComparisonTable compare_baselines(const PipelineConfig& config,
                                  const std::vector<std::string>& strategies,
                                  const std::vector<std::uint64_t>& seeds,
                                  const std::string& out_dir) {
    if (seeds.size() < 3) throw ContractError("compare_baselines: need at least 3 seeds");
    for (const std::string& s : strategies)
        if (std::find(kAllStrategies.begin(), kAllStrategies.end(), s) ==
            kAllStrategies.end())
            throw ContractError("compare_baselines: unknown strategy '" + s + "'");
    ensure_dir(out_dir);

    RecDataset dataset = config.dataset_path.empty() ? generate(config.data)
                                                     : load_dataset(config.dataset_path);
    ModelConfig mc = config.model;
    mc.vocab_size = dataset.vocab_size();
    mc.validate();
    if (config.k_attn < 1 || config.k_attn >= mc.n_heads)
        throw PlanError("compare_baselines: k_attn " + std::to_string(config.k_attn) +
                        " outside [1, " + std::to_string(mc.n_heads) + ")");

    ComparisonTable table;
    std::map<std::string, std::vector<double>> hr_by_strategy, ndcg_by_strategy;

    for (std::uint64_t seed : seeds) {
        TransformerModel base = init_model(mc, derive_seed(seed, kSaltInit));
        DistillConfig base_dc = config.distill_base;
        base_dc.seed = derive_seed(seed, kSaltTrainBase);
        train_base(base, dataset, base_dc);

        const std::vector<int> calib_idx = sample_calibration_indices(
            dataset, config.calib_b, derive_seed(seed, kSaltCalib));
        std::vector<Encoded> calib;
        calib.reserve(calib_idx.size());
        for (int i : calib_idx) calib.push_back(encode(dataset, i));

        // scored strategies share the raw KL scores per seed
        HeadScoreMatrix raw;
        for (const std::string& strategy : strategies) {
            std::vector<std::vector<int>> heads;
            if (strategy == "prunerec" || strategy == "no_alpha" ||
                strategy == "global_importance") {
                if (raw.empty()) raw = head_importance_raw(base, calib);
            }
            if (strategy == "prunerec") {
                heads = select_heads(
                    propagate_importance(minmax_normalize_rows(raw), config.alpha),
                    config.k_attn);
            } else if (strategy == "no_alpha") {
                heads = select_heads(propagate_importance(minmax_normalize_rows(raw), 0.0),
                                     config.k_attn);
            } else if (strategy == "global_importance") {
                std::vector<double> mean(raw[0].size(), 0.0);
                for (const std::vector<double>& row : raw)
                    for (std::size_t h = 0; h < row.size(); ++h) mean[h] += row[h];
                for (double& v : mean) v /= static_cast<double>(raw.size());
                HeadScoreMatrix one = {mean};
                const std::vector<int> shared = lowest_k_per_layer(one, config.k_attn)[0];
                heads.assign(static_cast<std::size_t>(base.n_layers()), shared);
            } else if (strategy == "random") {
                heads = random_head_plan(base, config.k_attn,
                                         derive_seed(seed, kSaltRandomPlan))
                            .heads_to_prune;
            } else {  // wanda
                heads = wanda_head_selection(base, calib, config.k_attn);
            }
            for (const std::vector<int>& hs : heads)
                if (static_cast<int>(hs.size()) != config.k_attn)
                    throw ContractError("compare_baselines: strategy " + strategy +
                                        " did not prune exactly k_attn heads per layer");

            TransformerModel student = prune_heads(base, heads);
            DistillConfig dc = config.distill_stage1;
            dc.seed = derive_seed(seed, kSaltRestore1);
            restore(student, base, dataset, dc);
            const auto [hr, ndcg] = quick_hr_ndcg(student, dataset, Split::Valid, 20);
            table.rows.push_back({strategy, seed, hr, ndcg});
            hr_by_strategy[strategy].push_back(hr);
            ndcg_by_strategy[strategy].push_back(ndcg);
        }
    }

    for (const auto& [strategy, values] : hr_by_strategy)
        table.medians[strategy] = {median_of(values), median_of(ndcg_by_strategy[strategy])};

    std::ofstream out(out_dir + "/comparison.tsv");
    if (!out) throw IoError("cannot open " + out_dir + "/comparison.tsv for writing");
    out << std::setprecision(17);
    out << "strategy\tseed\thr@20\tndcg@20\n";
    for (const StrategyOutcome& row : table.rows)
        out << row.strategy << '\t' << row.seed << '\t' << row.hr20 << '\t' << row.ndcg20
            << '\n';
    for (const auto& [strategy, med] : table.medians)
        out << "median\t" << strategy << '\t' << med.first << '\t' << med.second << '\n';
    if (!out) throw IoError("write failed for " + out_dir + "/comparison.tsv");
    return table;
}

void save_importance_report(const std::vector<ImportanceRow>& rows,
                            const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << std::setprecision(17);
    out << "kind\tlayer\tindex\tscore\n";
    for (const ImportanceRow& r : rows)
        out << r.kind << '\t' << r.layer << '\t' << r.index << '\t' << r.score << '\n';
    if (!out) throw IoError("write failed for " + path);
}

void save_ledger(const std::vector<LedgerRow>& ledger, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << std::setprecision(17);
    out << "stage\tparam_count_non_embedding\thr@20\tndcg@20\n";
    for (const LedgerRow& row : ledger)
        out << row.stage << '\t' << row.param_count_non_embedding << '\t' << row.hr20
            << '\t' << row.ndcg20 << '\n';
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace prunerec
