#include "genplugin/textembed.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

#include "genplugin/errors.hpp"
#include "json.hpp"

namespace genplugin::textembed {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur += static_cast<char>(std::tolower(c));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string extractor_name(const ExtractorConfig& cfg) {
    if (cfg.kind == ExtractorKind::FileLoaded) return "file:" + cfg.vectors_file.filename().string();
    return "hash-d" + std::to_string(cfg.dim) + "-s" + std::to_string(cfg.seed);
}

std::vector<double> hash_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
    std::map<std::string, std::size_t> counts;
    for (auto& t : tokenize(text)) ++counts[t];
    std::vector<double> e(dim, 0.0);
    double norm2 = 0.0;
    for (const auto& [token, count] : counts) {
        Rng r(seed ^ fnv1a(token), "token-direction");
        const double c = static_cast<double>(count);
        norm2 += c * c;
        for (std::size_t j = 0; j < dim; ++j) e[j] += c * r.normal();
    }
    if (norm2 > 0.0) {
        const double inv = 1.0 / std::sqrt(norm2);
        for (auto& x : e) x *= inv;
    }
    for (auto& x : e) x = static_cast<double>(static_cast<float>(x));
    return e;
}

namespace {

Matrix load_vectors(const std::vector<corpus::ItemMeta>& items, const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw UserError("cannot open embedding file " + file.string());
    std::unordered_map<std::string, std::vector<double>> vecs;
    std::string line;
    std::size_t lineno = 0, dim = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(file.string(), lineno, e.what());
        }
        if (!rec.contains("item") || !rec.contains("vector") || !rec["vector"].is_array()) {
            throw ParseError(file.string(), lineno, "expected {\"item\", \"vector\"}");
        }
        auto v = rec["vector"].get<std::vector<double>>();
        if (dim == 0) dim = v.size();
        if (v.size() != dim || dim == 0) throw ParseError(file.string(), lineno, "inconsistent vector dimension");
        for (auto& x : v) {
            if (!std::isfinite(x)) throw ParseError(file.string(), lineno, "non-finite vector entry");
            x = static_cast<double>(static_cast<float>(x));
        }
        vecs[rec["item"].get<std::string>()] = std::move(v);
    }
    std::string missing;
    for (const auto& m : items)
        if (!vecs.count(m.item_id)) missing += " " + m.item_id;
    if (!missing.empty()) throw UserError("embedding file lacks vectors for items:" + missing);
    Matrix out(items.size(), dim);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& v = vecs[items[i].item_id];
        std::copy(v.begin(), v.end(), out.row_span(i).begin());
    }
    return out;
}

}  // namespace

Matrix extract(const std::vector<corpus::ItemMeta>& items, const ExtractorConfig& cfg) {
    if (cfg.kind == ExtractorKind::FileLoaded) return load_vectors(items, cfg.vectors_file);
    if (cfg.dim == 0) throw UserError("extractor dimension must be positive");
    Matrix out(items.size(), cfg.dim);
    const auto n = static_cast<std::ptrdiff_t>(items.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto e = hash_embed(corpus::item_text(items[static_cast<std::size_t>(i)]), cfg.dim, cfg.seed);
        std::copy(e.begin(), e.end(), out.row_span(static_cast<std::size_t>(i)).begin());
    }
    return out;
}

void write_cache(const std::filesystem::path& stem, const Matrix& embeddings, const std::string& extractor,
                 std::uint64_t corpus_hash) {
    nlohmann::json header{{"extractor", extractor},
                          {"D_ext", embeddings.cols()},
                          {"n_items", embeddings.rows()},
                          {"corpus_hash", std::to_string(corpus_hash)}};
    {
        std::ofstream h(stem.string() + ".json");
        if (!h) throw UserError("cannot write " + stem.string() + ".json");
        h << header.dump(2) << '\n';
    }
    std::ofstream b(stem.string() + ".f32", std::ios::binary);
    if (!b) throw UserError("cannot write " + stem.string() + ".f32");
    std::vector<float> buf(embeddings.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(embeddings[i]);
    b.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

bool read_cache(const std::filesystem::path& stem, const std::string& extractor, std::uint64_t corpus_hash,
                Matrix& out) {
    std::ifstream h(stem.string() + ".json");
    std::ifstream b(stem.string() + ".f32", std::ios::binary);
    if (!h || !b) return false;
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::parse_error&) {
        return false;
    }
    if (header.value("extractor", "") != extractor || header.value("corpus_hash", "") != std::to_string(corpus_hash)) {
        return false;
    }
    const auto rows = header.at("n_items").get<std::size_t>();
    const auto cols = header.at("D_ext").get<std::size_t>();
    std::vector<float> buf(rows * cols);
    b.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (static_cast<std::size_t>(b.gcount()) != buf.size() * sizeof(float)) return false;
    out = Matrix(rows, cols);
    for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i];
    return true;
}

Matrix extract_cached(const std::vector<corpus::ItemMeta>& items, const ExtractorConfig& cfg,
                      const std::filesystem::path& cache_dir, std::uint64_t corpus_hash) {
    const std::string name = extractor_name(cfg);
    const auto stem = cache_dir / "embeddings";
    Matrix m;
    if (read_cache(stem, name, corpus_hash, m) && m.rows() == items.size()) return m;
    m = extract(items, cfg);
    std::filesystem::create_directories(cache_dir);
    write_cache(stem, m, name, corpus_hash);
    return m;
}

Projector::Projector(nn::ParameterStore& store, const std::string& name, std::size_t in_dim, std::size_t out_dim,
                     std::size_t hidden, Rng& rng, Activation act)
    : first(store, name + ".fc1", in_dim, hidden, rng),
      second(store, name + ".fc2", hidden, out_dim, rng),
      in_dim_(in_dim),
      out_dim_(out_dim),
      act_(act) {}

ag::Var Projector::operator()(const ag::Var& embeddings) const {
    if (embeddings->value.cols() != in_dim_) {
        throw std::invalid_argument("projector: expected input width " + std::to_string(in_dim_) + ", got " +
                                    std::to_string(embeddings->value.cols()));
    }
    ag::Var h = first(embeddings);
    if (act_ == Activation::Gelu) h = ag::gelu(h);
    return second(h);
}

}  // namespace genplugin::textembed
